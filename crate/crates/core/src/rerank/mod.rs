//! Per-user calibrated re-ranking.
//!
//! Each user's problem picks `K` of the candidates and marks `K1` of them as
//! the calibration subset:
//!
//! ```text
//! maximize  sum(score of selected) - lambda * TV(target, q(calibration subset))
//! ```
//!
//! `q` is the unweighted category spread of the calibration subset. Category
//! mass is tracked in integer units (`lcm` of the items' category counts), so
//! the TV of a subset does not depend on the order its items are summed in,
//! and every solver evaluates a given subset to the same bits.

mod bnb;
mod bruteforce;
mod greedy;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Catalog;
use crate::distribution::CategoryDistribution;
use crate::error::{Error, Result};
use crate::scoring::CandidateList;
use crate::{ItemId, UserId};

pub use bnb::solve_branch_and_bound;
pub use bruteforce::{solve_exact_bruteforce, BRUTE_FORCE_LIMIT};
pub use greedy::greedy_calibrated;

/// Objective differences below this are ties.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct RerankCandidate {
    pub item: ItemId,
    pub score: f64,
    pub categories: Vec<String>,
}

/// One user's re-ranking instance. Candidates are kept sorted by score
/// descending, ties by item id.
#[derive(Debug, Clone)]
pub struct RerankProblem {
    pub user: UserId,
    candidates: Vec<RerankCandidate>,
    target: CategoryDistribution,
    k: usize,
    k1: usize,
    lambda: f64,
    target_dense: Vec<f64>,
    unit_scale: u64,
    /// Per candidate, `(category index, mass units)`.
    units: Vec<Vec<(usize, u64)>>,
    /// Candidates with identical category sets share a group.
    group_of: Vec<usize>,
    n_groups: usize,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl RerankProblem {
    pub fn new(
        user: UserId,
        mut candidates: Vec<RerankCandidate>,
        target: CategoryDistribution,
        k: usize,
        k1: usize,
        lambda: f64,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("K must be positive"));
        }
        if k > candidates.len() {
            return Err(Error::invalid(format!(
                "K = {k} exceeds the {} available candidates",
                candidates.len()
            )));
        }
        if k1 > k {
            return Err(Error::invalid(format!("K1 = {k1} exceeds K = {k}")));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda must be finite and non-negative, got {lambda}"
            )));
        }
        for c in &mut candidates {
            if !c.score.is_finite() {
                return Err(Error::invalid(format!("candidate {} has a non-finite score", c.item)));
            }
            c.categories.sort();
            c.categories.dedup();
            if c.categories.is_empty() {
                return Err(Error::invalid(format!("candidate {} has no categories", c.item)));
            }
        }
        candidates.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.item.cmp(&b.item)));
        if candidates.windows(2).any(|w| w[0].item == w[1].item) {
            return Err(Error::invalid("duplicate candidate item"));
        }

        let mut labels: Vec<String> = target.categories().map(str::to_owned).collect();
        for c in &candidates {
            labels.extend(c.categories.iter().cloned());
        }
        labels.sort();
        labels.dedup();
        let index: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let target_dense = labels.iter().map(|l| target.prob(l)).collect();

        let mut unit_scale: u64 = 1;
        for c in &candidates {
            let n = c.categories.len() as u64;
            unit_scale = unit_scale / gcd(unit_scale, n) * n;
            if unit_scale > 1 << 40 {
                return Err(Error::invalid("category counts too varied for exact mass units"));
            }
        }
        let units = candidates
            .iter()
            .map(|c| {
                let share = unit_scale / c.categories.len() as u64;
                c.categories.iter().map(|l| (index[l.as_str()], share)).collect()
            })
            .collect();

        let mut group_ids: BTreeMap<&[String], usize> = BTreeMap::new();
        let mut group_of = Vec::with_capacity(candidates.len());
        for c in &candidates {
            let next = group_ids.len();
            group_of.push(*group_ids.entry(c.categories.as_slice()).or_insert(next));
        }
        let n_groups = group_ids.len();

        Ok(Self {
            user,
            candidates,
            target,
            k,
            k1,
            lambda,
            target_dense,
            unit_scale,
            units,
            group_of,
            n_groups,
        })
    }

    pub fn candidates(&self) -> &[RerankCandidate] {
        &self.candidates
    }

    pub fn target(&self) -> &CategoryDistribution {
        &self.target
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn k1(&self) -> usize {
        self.k1
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Same instance with a different trade-off weight.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda must be finite and non-negative, got {lambda}"
            )));
        }
        let mut p = self.clone();
        p.lambda = lambda;
        Ok(p)
    }

    /// Same instance with a different calibration subset size.
    pub fn with_k1(&self, k1: usize) -> Result<Self> {
        if k1 > self.k {
            return Err(Error::invalid(format!("K1 = {k1} exceeds K = {}", self.k)));
        }
        let mut p = self.clone();
        p.k1 = k1;
        Ok(p)
    }

    fn n_categories(&self) -> usize {
        self.target_dense.len()
    }

    fn add_units(&self, mass: &mut [u64], pos: usize) {
        for &(c, u) in &self.units[pos] {
            mass[c] += u;
        }
    }

    /// TV between the target and the spread of `count` items holding `mass`.
    fn tv_of_mass(&self, mass: &[u64], count: usize) -> f64 {
        let denom = (self.unit_scale * count as u64) as f64;
        self.target_dense
            .iter()
            .zip(mass)
            .map(|(p, m)| (p - *m as f64 / denom).abs())
            .sum()
    }

    /// Scores a (selected, calibration subset) pair given as ascending positions.
    fn evaluate(&self, selected: Vec<usize>, calib: Vec<usize>) -> Evaluated {
        debug_assert!(selected.windows(2).all(|w| w[0] < w[1]));
        debug_assert!(calib.windows(2).all(|w| w[0] < w[1]));
        let relevance: f64 = selected.iter().map(|&p| self.candidates[p].score).sum();
        let divergence = if calib.is_empty() {
            0.0
        } else {
            let mut mass = vec![0u64; self.n_categories()];
            for &p in &calib {
                self.add_units(&mut mass, p);
            }
            self.tv_of_mass(&mass, calib.len())
        };
        let mut selected_ids: Vec<ItemId> = selected.iter().map(|&p| self.candidates[p].item).collect();
        selected_ids.sort_unstable();
        Evaluated {
            objective: relevance - self.lambda * divergence,
            relevance,
            divergence,
            selected,
            calib,
            selected_ids,
        }
    }

    /// Fills the non-calibration slots with the best remaining candidates.
    fn complete(&self, calib: Vec<usize>) -> Evaluated {
        let mut selected = calib.clone();
        let mut in_calib = vec![false; self.candidates.len()];
        for &p in &calib {
            in_calib[p] = true;
        }
        selected.extend(
            (0..self.candidates.len())
                .filter(|p| !in_calib[*p])
                .take(self.k - calib.len()),
        );
        selected.sort_unstable();
        self.evaluate(selected, calib)
    }

    /// The plain top-K list, with the first `K1` of it as calibration subset.
    fn top_k(&self) -> Evaluated {
        self.evaluate((0..self.k).collect(), (0..self.k1).collect())
    }
}

/// A fully scored candidate solution.
#[derive(Debug, Clone)]
struct Evaluated {
    objective: f64,
    relevance: f64,
    divergence: f64,
    selected: Vec<usize>,
    calib: Vec<usize>,
    selected_ids: Vec<ItemId>,
}

impl Evaluated {
    /// Strict preference: objective, then relevance, then the smaller sorted
    /// id list, then the calibration subset earliest in candidate order.
    fn beats(&self, other: &Evaluated) -> bool {
        if self.objective > other.objective + TIE_TOLERANCE {
            return true;
        }
        if self.objective < other.objective - TIE_TOLERANCE {
            return false;
        }
        if self.relevance > other.relevance + TIE_TOLERANCE {
            return true;
        }
        if self.relevance < other.relevance - TIE_TOLERANCE {
            return false;
        }
        match self.selected_ids.cmp(&other.selected_ids) {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Greater => false,
            std::cmp::Ordering::Equal => self.calib < other.calib,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    FeasibleWithGap,
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::FeasibleWithGap => "feasible_with_gap",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankSolution {
    pub user: UserId,
    /// Selected items, best baseline score first.
    pub selected: Vec<ItemId>,
    /// Calibration items, in the same order as `selected`.
    pub calibration_subset: Vec<ItemId>,
    pub objective: f64,
    pub relevance_part: f64,
    pub divergence_part: f64,
    pub status: SolveStatus,
    pub bound_gap: f64,
    pub nodes_explored: u64,
}

impl RerankSolution {
    fn from_evaluated(p: &RerankProblem, e: &Evaluated, status: SolveStatus, bound_gap: f64, nodes: u64) -> Self {
        RerankSolution {
            user: p.user,
            selected: e.selected.iter().map(|&i| p.candidates[i].item).collect(),
            calibration_subset: e.calib.iter().map(|&i| p.candidates[i].item).collect(),
            objective: e.objective,
            relevance_part: e.relevance,
            divergence_part: e.divergence,
            status,
            bound_gap,
            nodes_explored: nodes,
        }
    }

    /// Recomputes the objective through the public distribution functions.
    pub fn recompute_objective(&self, p: &RerankProblem) -> Result<f64> {
        let score: BTreeMap<ItemId, &RerankCandidate> = p.candidates.iter().map(|c| (c.item, c)).collect();
        let mut relevance = 0.0;
        for id in &self.selected {
            relevance += score.get(id).ok_or(Error::MissingItem(*id))?.score;
        }
        let divergence = if self.calibration_subset.is_empty() {
            0.0
        } else {
            let mut masses: BTreeMap<String, f64> = BTreeMap::new();
            for id in &self.calibration_subset {
                let c = score.get(id).ok_or(Error::MissingItem(*id))?;
                for l in &c.categories {
                    *masses.entry(l.clone()).or_insert(0.0) += 1.0 / c.categories.len() as f64;
                }
            }
            let q = CategoryDistribution::from_masses(masses)?;
            crate::distribution::total_variation(&p.target, &q)
        };
        Ok(relevance - p.lambda * divergence)
    }
}

/// Limits on a single branch-and-bound solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverBudget {
    pub max_nodes: u64,
    pub max_seconds: f64,
}

impl SolverBudget {
    pub fn new(max_nodes: u64, max_seconds: f64) -> Result<Self> {
        if max_nodes == 0 || max_seconds.is_nan() || max_seconds <= 0.0 {
            return Err(Error::invalid("solver budget limits must be positive"));
        }
        Ok(Self { max_nodes, max_seconds })
    }
}

impl Default for SolverBudget {
    fn default() -> Self {
        // the time cap sits well above what the node cap takes, so the node
        // cap is the one that binds and runs stay reproducible
        Self {
            max_nodes: 50_000,
            max_seconds: 60.0,
        }
    }
}

/// `round(weight * K)`, halves rounded up.
pub fn calibration_slots(weight: f64, k: usize) -> usize {
    ((weight * k as f64) + 0.5 + 1e-9).floor() as usize
}

/// Builds one user's problem from their candidate pool and profile.
///
/// The global trade-off weight is divided by the number of users because the
/// miscalibration term averages over users, which makes the joint problem
/// separable into per-user problems with weight `lambda_global / n_users`.
#[allow(clippy::too_many_arguments)]
pub fn build_problem(
    user: UserId,
    candidates: &CandidateList,
    catalog: &Catalog,
    profile_dist: &CategoryDistribution,
    k: usize,
    weight: f64,
    lambda_global: f64,
    n_users: usize,
) -> Result<RerankProblem> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::invalid(format!("confidence weight {weight} outside [0, 1]")));
    }
    if n_users == 0 {
        return Err(Error::invalid("n_users must be positive"));
    }
    let items = candidates
        .candidates
        .iter()
        .map(|c| {
            let item = catalog.get(c.item).ok_or(Error::MissingItem(c.item))?;
            Ok(RerankCandidate {
                item: c.item,
                score: c.score,
                categories: item.categories.iter().cloned().collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    RerankProblem::new(
        user,
        items,
        profile_dist.clone(),
        k,
        calibration_slots(weight, k),
        lambda_global / n_users as f64,
    )
}

/// Which re-ranker produces the final lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    /// Baseline top-K, no re-ranking.
    None,
    /// Greedy marginal-gain calibration.
    Greedy,
    /// Exact solver with every user fully calibrated.
    Cl,
    /// Exact solver with confidence-sized calibration subsets.
    Ccl,
}

impl Engine {
    pub const ALL: [Engine; 4] = [Engine::None, Engine::Greedy, Engine::Cl, Engine::Ccl];

    pub fn as_str(&self) -> &'static str {
        match self {
            Engine::None => "none",
            Engine::Greedy => "greedy",
            Engine::Cl => "cl",
            Engine::Ccl => "ccl",
        }
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "n" => Ok(Engine::None),
            "greedy" => Ok(Engine::Greedy),
            "cl" => Ok(Engine::Cl),
            "ccl" => Ok(Engine::Ccl),
            other => Err(Error::invalid(format!("unknown engine {other:?}"))),
        }
    }
}

/// Solves one problem with the given engine.
pub fn solve(problem: &RerankProblem, engine: Engine, budget: &SolverBudget) -> Result<RerankSolution> {
    match engine {
        Engine::None => {
            let p = problem.with_lambda(0.0)?;
            Ok(RerankSolution::from_evaluated(
                &p,
                &p.top_k(),
                SolveStatus::Optimal,
                0.0,
                0,
            ))
        }
        Engine::Greedy => Ok(greedy_calibrated(problem)),
        Engine::Cl | Engine::Ccl => solve_branch_and_bound(problem, budget),
    }
}

/// Solves every user independently. `cl` expects problems built with weight 1.
pub fn rerank_all(
    problems: &[RerankProblem],
    engine: Engine,
    budget: &SolverBudget,
) -> Result<BTreeMap<UserId, RerankSolution>> {
    let solved: Vec<Result<RerankSolution>> = problems
        .par_iter()
        .map(|p| {
            solve(p, engine, budget).map_err(|e| Error::User {
                user: p.user,
                source: Box::new(e),
            })
        })
        .collect();
    let mut out = BTreeMap::new();
    for s in solved {
        let s = s?;
        out.insert(s.user, s);
    }
    Ok(out)
}

/// `userId,itemId,rank,score,inCalibrationSubset,engine`
pub fn solutions_csv(
    solutions: &BTreeMap<UserId, RerankSolution>,
    problems: &BTreeMap<UserId, &RerankProblem>,
    engine: Engine,
) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("userId,itemId,rank,score,inCalibrationSubset,engine\n");
    for (user, sol) in solutions {
        let scores: BTreeMap<ItemId, f64> = problems
            .get(user)
            .map(|p| p.candidates.iter().map(|c| (c.item, c.score)).collect())
            .unwrap_or_default();
        for (idx, item) in sol.selected.iter().enumerate() {
            let in_calib = sol.calibration_subset.contains(item);
            let score = scores.get(item).copied().unwrap_or(f64::NAN);
            let _ = writeln!(out, "{user},{item},{},{score},{in_calib},{engine}", idx + 1);
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn cand(item: ItemId, score: f64, cats: &[&str]) -> RerankCandidate {
        RerankCandidate {
            item,
            score,
            categories: cats.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub(crate) fn dist(pairs: &[(&str, f64)]) -> CategoryDistribution {
        CategoryDistribution::from_pairs(pairs.iter().copied()).unwrap()
    }

    /// The four-item instance: two A items with high scores, two B items with low.
    pub(crate) fn four_item(lambda: f64) -> RerankProblem {
        RerankProblem::new(
            7,
            vec![
                cand(1, 0.9, &["A"]),
                cand(2, 0.8, &["A"]),
                cand(3, 0.2, &["B"]),
                cand(4, 0.1, &["B"]),
            ],
            dist(&[("A", 0.5), ("B", 0.5)]),
            2,
            2,
            lambda,
        )
        .unwrap()
    }

    #[test]
    fn slots_round_half_up() {
        assert_eq!(calibration_slots(0.5, 20), 10);
        assert_eq!(calibration_slots(1.0, 20), 20);
        assert_eq!(calibration_slots(0.475, 20), 10);
        assert_eq!(calibration_slots(0.0, 20), 0);
        assert_eq!(calibration_slots(0.02, 20), 0);
        assert_eq!(calibration_slots(0.026, 20), 1);
    }

    #[test]
    fn problem_validation() {
        let t = dist(&[("A", 1.0)]);
        assert!(RerankProblem::new(1, vec![cand(1, 1.0, &["A"])], t.clone(), 2, 0, 1.0).is_err());
        assert!(RerankProblem::new(1, vec![cand(1, 1.0, &["A"])], t.clone(), 1, 2, 1.0).is_err());
        assert!(RerankProblem::new(1, vec![cand(1, 1.0, &["A"])], t.clone(), 1, 1, -1.0).is_err());
        assert!(RerankProblem::new(1, vec![cand(1, 1.0, &[])], t.clone(), 1, 1, 1.0).is_err());
        let p = RerankProblem::new(1, vec![cand(2, 1.0, &["A"]), cand(1, 1.0, &["B"])], t, 1, 1, 1.0).unwrap();
        assert_eq!(p.candidates()[0].item, 1);
    }

    #[test]
    fn build_problem_divides_lambda() {
        let catalog = Catalog::from_pairs([(1, ["A"]), (2, ["B"]), (3, ["A"])]).unwrap();
        let list = CandidateList {
            user: 5,
            candidates: vec![
                crate::scoring::Candidate { item: 1, score: 3.0 },
                crate::scoring::Candidate { item: 2, score: 2.0 },
                crate::scoring::Candidate { item: 3, score: 1.0 },
            ],
        };
        let target = dist(&[("A", 0.5), ("B", 0.5)]);
        let p = build_problem(5, &list, &catalog, &target, 2, 0.5, 10.0, 4).unwrap();
        assert_eq!(p.k1(), 1);
        assert_eq!(p.lambda(), 2.5);
        assert!(build_problem(5, &list, &catalog, &target, 4, 0.5, 10.0, 4).is_err());
        assert!(build_problem(5, &list, &catalog, &target, 2, 1.5, 10.0, 4).is_err());
    }

    #[test]
    fn exact_units_make_tv_order_free() {
        let p = RerankProblem::new(
            1,
            vec![
                cand(1, 0.5, &["A", "B", "C"]),
                cand(2, 0.4, &["A"]),
                cand(3, 0.3, &["B", "C"]),
                cand(4, 0.2, &["A", "B", "C"]),
            ],
            dist(&[("A", 0.2), ("B", 0.3), ("C", 0.5)]),
            3,
            3,
            1.0,
        )
        .unwrap();
        let a = p.evaluate(vec![0, 1, 2], vec![0, 1, 2]);
        let b = p.evaluate(vec![1, 2, 3], vec![1, 2, 3]);
        assert_eq!(a.divergence.to_bits(), b.divergence.to_bits());
    }

    #[test]
    fn recompute_matches() {
        let p = four_item(10.0);
        let e = p.evaluate(vec![0, 2], vec![0, 2]);
        let s = RerankSolution::from_evaluated(&p, &e, SolveStatus::Optimal, 0.0, 0);
        assert!((s.recompute_objective(&p).unwrap() - s.objective).abs() < 1e-9);
        assert!((s.objective - 1.1).abs() < 1e-12);
    }

    #[test]
    fn none_engine_is_prefix() {
        let p = four_item(10.0);
        let s = solve(&p, Engine::None, &SolverBudget::default()).unwrap();
        assert_eq!(s.selected, vec![1, 2]);
        assert_eq!(s.divergence_part, 1.0);
        assert!((s.objective - 1.7).abs() < 1e-12);
    }

    #[test]
    fn engine_names() {
        for e in Engine::ALL {
            assert_eq!(e.as_str().parse::<Engine>().unwrap(), e);
        }
        assert!("gurobi".parse::<Engine>().is_err());
    }

    #[test]
    fn solution_export_header() {
        let p = four_item(10.0);
        let s = solve(&p, Engine::Ccl, &SolverBudget::default()).unwrap();
        let sols: BTreeMap<_, _> = [(7, s)].into_iter().collect();
        let probs: BTreeMap<_, _> = [(7, &p)].into_iter().collect();
        let csv = solutions_csv(&sols, &probs, Engine::Ccl);
        assert_eq!(
            csv,
            "userId,itemId,rank,score,inCalibrationSubset,engine\n7,1,1,0.9,true,ccl\n7,3,2,0.2,true,ccl\n"
        );
    }
}
