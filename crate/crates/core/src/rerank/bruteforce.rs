//! Exhaustive enumeration, used as the reference for the exact solver.

use super::{Evaluated, RerankProblem, RerankSolution, SolveStatus};
use crate::error::{Error, Result};

/// Largest number of (selected, calibration subset) pairs we agree to enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 10_000_000;

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Calls `f` with every `k`-subset of `0..n` in lexicographic order.
fn for_each_combination(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    let mut idx: Vec<usize> = (0..k).collect();
    if k > n {
        return;
    }
    loop {
        f(&idx);
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Enumerates every selected set and every calibration subset of it.
pub fn solve_exact_bruteforce(p: &RerankProblem) -> Result<RerankSolution> {
    let n = p.candidates.len();
    let combinations = binomial(n, p.k) * binomial(p.k, p.k1);
    if combinations > BRUTE_FORCE_LIMIT {
        return Err(Error::InstanceTooLarge {
            combinations,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let mut best: Option<Evaluated> = None;
    let mut visited = 0u64;
    for_each_combination(n, p.k, |selected| {
        for_each_combination(p.k, p.k1, |inner| {
            visited += 1;
            let calib: Vec<usize> = inner.iter().map(|&i| selected[i]).collect();
            let e = p.evaluate(selected.to_vec(), calib);
            if best.as_ref().is_none_or(|b| e.beats(b)) {
                best = Some(e);
            }
        });
    });
    let best = best.expect("K <= N guarantees at least one selection");
    Ok(RerankSolution::from_evaluated(
        p,
        &best,
        SolveStatus::Optimal,
        0.0,
        visited,
    ))
}
