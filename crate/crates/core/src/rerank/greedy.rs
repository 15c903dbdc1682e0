//! Greedy marginal-gain calibration baseline.

use super::{RerankProblem, RerankSolution, SolveStatus, TIE_TOLERANCE};

/// Adds one item at a time. The first `K1` picks fill the calibration subset
/// and maximize `relevance - lambda * TV` of the partial subset; the remaining
/// picks take the best remaining scores. Ties go to the smaller item id.
pub fn greedy_calibrated(p: &RerankProblem) -> RerankSolution {
    let calib = greedy_calibration_positions(p);
    let e = p.complete(calib);
    RerankSolution::from_evaluated(p, &e, SolveStatus::Optimal, 0.0, 0)
}

pub(super) fn greedy_calibration_positions(p: &RerankProblem) -> Vec<usize> {
    let n = p.candidates.len();
    let mut taken = vec![false; n];
    let mut mass = vec![0u64; p.n_categories()];
    let mut chosen = Vec::with_capacity(p.k1);
    let mut relevance = 0.0;
    for step in 1..=p.k1 {
        let mut best: Option<(f64, usize)> = None;
        for pos in (0..n).filter(|&i| !taken[i]) {
            let mut trial = mass.clone();
            p.add_units(&mut trial, pos);
            let value = relevance + p.candidates[pos].score - p.lambda * p.tv_of_mass(&trial, step);
            let better = match best {
                None => true,
                Some((v, b)) => {
                    value > v + TIE_TOLERANCE
                        || (value >= v - TIE_TOLERANCE && p.candidates[pos].item < p.candidates[b].item)
                }
            };
            if better {
                best = Some((value, pos));
            }
        }
        let (_, pos) = best.expect("K1 <= K <= N");
        taken[pos] = true;
        p.add_units(&mut mass, pos);
        relevance += p.candidates[pos].score;
        chosen.push(pos);
    }
    chosen.sort_unstable();
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::{item_category_spread, total_variation};
    use crate::rerank::tests::{cand, dist, four_item};

    #[test]
    fn falls_short_of_the_exact_optimum() {
        let third = 1.0 / 3.0;
        let p = RerankProblem::new(
            1,
            vec![
                cand(1, 0.25, &["A", "B"]),
                cand(2, 0.75, &["B", "C"]),
                cand(3, 0.9, &["A", "B", "C"]),
                cand(4, 0.65, &["A", "B", "C"]),
                cand(5, 0.9, &["A"]),
            ],
            dist(&[("A", third), ("B", third), ("C", 1.0 - 2.0 * third)]),
            3,
            3,
            1.5,
        )
        .unwrap();
        let greedy = greedy_calibrated(&p);
        let exact = crate::rerank::solve_exact_bruteforce(&p).unwrap();
        assert_eq!(greedy.selected, vec![3, 2, 4]);
        assert_eq!(exact.selected, vec![3, 5, 2]);
        assert!(exact.objective - greedy.objective > 0.2);
    }

    #[test]
    fn first_pick_matches_single_item_objective() {
        let p = RerankProblem::new(
            1,
            vec![cand(1, 0.9, &["A"]), cand(2, 0.6, &["A", "B"]), cand(3, 0.5, &["B"])],
            dist(&[("A", 0.5), ("B", 0.5)]),
            2,
            1,
            1.0,
        )
        .unwrap();
        let expected = p
            .candidates()
            .iter()
            .map(|c| {
                let item = crate::data::Item {
                    id: c.item,
                    categories: c.categories.iter().cloned().collect(),
                };
                (
                    c.score - p.lambda() * total_variation(p.target(), &item_category_spread(&item)),
                    c.item,
                )
            })
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap()
            .1;
        let s = greedy_calibrated(&p);
        assert_eq!(s.calibration_subset, vec![expected]);
        assert_eq!(expected, 2);
        assert_eq!(s.selected, vec![1, 2]);
    }

    #[test]
    fn zero_lambda_is_top_k() {
        let s = greedy_calibrated(&four_item(0.0));
        assert_eq!(s.selected, vec![1, 2]);
    }

    #[test]
    fn four_item_instance() {
        let s = greedy_calibrated(&four_item(10.0));
        assert_eq!(s.selected, vec![1, 3]);
    }
}
