//! Best-first branch-and-bound over calibration-subset membership.
//!
//! Candidates are visited in score order and each is either put into the
//! calibration subset or left out of it. The rest of the list is always the
//! best-scored non-calibration items, which is optimal for a fixed subset.
//!
//! Items with identical category sets are interchangeable for the divergence
//! term, so within such a group the calibration subset is restricted to a
//! prefix in score order: once a group member is left out, later members of
//! that group are too. Swapping a later member for an earlier one never
//! lowers the objective or worsens the tie-break.
//!
//! A node's bound is the smaller of two relaxations. The first treats
//! relevance and divergence separately: best remaining scores, and the least
//! TV reachable when every category may take its largest eligible masses.
//! The second is a Lagrangian dual of the TV term, `-|d| <= -mu * d` for any
//! `mu` in `[-1, 1]`, which turns the node problem into picking calibration
//! and relevance slots under per-item prices; the multipliers are tuned by a
//! few subgradient steps, warm-started from the parent.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::time::Instant;

use super::greedy::greedy_calibration_positions;
use super::{Evaluated, RerankProblem, RerankSolution, SolveStatus, SolverBudget, TIE_TOLERANCE};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct Node {
    bound: f64,
    relevance_bound: f64,
    seq: u64,
    /// Next candidate position to decide.
    next: usize,
    calib: Vec<usize>,
    mass: Vec<u64>,
    closed: Vec<u64>,
    /// Multipliers that produced the dual bound, reused by the children.
    mu: Vec<f64>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Node {}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Node {
    fn cmp(&self, other: &Self) -> Ordering {
        self.bound
            .total_cmp(&other.bound)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

fn is_closed(closed: &[u64], group: usize) -> bool {
    closed[group / 64] & (1 << (group % 64)) != 0
}

fn close(closed: &mut [u64], group: usize) {
    closed[group / 64] |= 1 << (group % 64);
}

/// Total order on finite floats for the selection heaps.
#[derive(Clone, Copy)]
struct Key(f64);

impl PartialEq for Key {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

const ROOT_DUAL_STEPS: usize = 40;
const NODE_DUAL_STEPS: usize = 4;

struct Search<'a> {
    p: &'a RerankProblem,
    /// Per category, `(units, position)` of candidates carrying it, most units first.
    by_category: Vec<Vec<(u64, usize)>>,
    /// Per group, `(category, share)` with shares summing to one.
    group_shares: Vec<Vec<(usize, f64)>>,
    /// Per group, member positions in ascending order.
    members: Vec<Vec<usize>>,
    incumbent: Evaluated,
    seq: u64,
    scratch: Scratch,
}

#[derive(Default)]
struct Scratch {
    group_d: Vec<f64>,
    group_order: Vec<usize>,
    order: Vec<(f64, usize)>,
    prefix: Vec<f64>,
    suffix: Vec<f64>,
    heap: BinaryHeap<Reverse<Key>>,
    chosen: Vec<(f64, usize)>,
    in_calib: Vec<bool>,
}

impl<'a> Search<'a> {
    fn new(p: &'a RerankProblem, incumbent: Evaluated) -> Self {
        let mut by_category: Vec<Vec<(u64, usize)>> = vec![Vec::new(); p.n_categories()];
        for (pos, units) in p.units.iter().enumerate() {
            for &(c, u) in units {
                by_category[c].push((u, pos));
            }
        }
        for list in &mut by_category {
            list.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        }
        let mut group_shares = vec![Vec::new(); p.n_groups];
        let mut members = vec![Vec::new(); p.n_groups];
        for (pos, units) in p.units.iter().enumerate() {
            let g = p.group_of[pos];
            if members[g].is_empty() {
                group_shares[g] = units
                    .iter()
                    .map(|&(c, n)| (c, n as f64 / p.unit_scale as f64))
                    .collect();
            }
            members[g].push(pos);
        }
        Self {
            p,
            by_category,
            group_shares,
            members,
            incumbent,
            seq: 0,
            scratch: Scratch::default(),
        }
    }

    /// Multipliers at which the dual bound equals the incumbent's own penalty.
    fn incumbent_mu(&self) -> Vec<f64> {
        let p = self.p;
        let mut mass = vec![0u64; p.n_categories()];
        for &pos in &self.incumbent.calib {
            p.add_units(&mut mass, pos);
        }
        let denom = (p.unit_scale * p.k1 as u64) as f64;
        p.target_dense
            .iter()
            .zip(&mass)
            .map(|(t, m)| {
                let d = *m as f64 / denom - t;
                if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Dual bound at fixed multipliers, with a subgradient.
    ///
    /// With prices fixed, the node problem asks for `need` more calibration
    /// items (value `u`) and `K - K1` relevance items (value `s`), disjoint.
    /// Some optimum puts its calibration items before its relevance items
    /// when candidates are sorted by `u - s`, so a sweep over the split point
    /// with two running top-k sums finds it. `u - s` only depends on the
    /// category set, so the sort is over groups.
    fn dual_value(&mut self, calib: &[usize], next: usize, closed: &[u64], mu: &[f64]) -> (f64, Vec<f64>) {
        let mut sc = std::mem::take(&mut self.scratch);
        let out = self.dual_value_with(&mut sc, calib, next, closed, mu);
        self.scratch = sc;
        out
    }

    fn dual_value_with(
        &self,
        sc: &mut Scratch,
        calib: &[usize],
        next: usize,
        closed: &[u64],
        mu: &[f64],
    ) -> (f64, Vec<f64>) {
        let p = self.p;
        let n = p.candidates.len();
        let scale = p.lambda / p.k1 as f64;
        let need = p.k1 - calib.len();
        let rest = p.k - p.k1;

        sc.group_d.clear();
        sc.group_d.extend(
            self.group_shares
                .iter()
                .map(|sh| -scale * sh.iter().map(|&(c, a)| mu[c] * a).sum::<f64>()),
        );
        let mut value: f64 = p.lambda * mu.iter().zip(&p.target_dense).map(|(m, t)| m * t).sum::<f64>();
        sc.in_calib.clear();
        sc.in_calib.resize(n, false);
        for &pos in calib {
            sc.in_calib[pos] = true;
            value += p.candidates[pos].score + sc.group_d[p.group_of[pos]];
        }

        sc.group_order.clear();
        sc.group_order
            .extend((0..p.n_groups).filter(|&g| !is_closed(closed, g)));
        let gd = &sc.group_d;
        sc.group_order.sort_by(|&a, &b| gd[b].total_cmp(&gd[a]).then(a.cmp(&b)));
        sc.order.clear();
        for &g in &sc.group_order {
            let members = &self.members[g];
            let from = members.partition_point(|&pos| pos < next);
            sc.order.extend(members[from..].iter().map(|&pos| (gd[g], pos)));
        }
        for pos in 0..n {
            if !sc.in_calib[pos] && (pos < next || is_closed(closed, p.group_of[pos])) {
                sc.order.push((f64::NEG_INFINITY, pos));
            }
        }
        let m = sc.order.len();

        sc.prefix.clear();
        sc.prefix.resize(m + 1, f64::NEG_INFINITY);
        sc.heap.clear();
        let mut sum = 0.0;
        if need == 0 {
            sc.prefix[0] = 0.0;
        }
        for (t, &(d, pos)) in sc.order.iter().enumerate() {
            if need > 0 && d > f64::NEG_INFINITY {
                let u = p.candidates[pos].score + d;
                sc.heap.push(Reverse(Key(u)));
                sum += u;
                if sc.heap.len() > need {
                    sum -= sc.heap.pop().map(|r| r.0 .0).unwrap_or(0.0);
                }
            }
            if sc.heap.len() == need {
                sc.prefix[t + 1] = sum;
            }
        }
        sc.suffix.clear();
        sc.suffix.resize(m + 1, f64::NEG_INFINITY);
        sc.heap.clear();
        let mut sum = 0.0;
        if rest == 0 {
            sc.suffix.iter_mut().for_each(|v| *v = 0.0);
        } else {
            for t in (0..m).rev() {
                let s = p.candidates[sc.order[t].1].score;
                sc.heap.push(Reverse(Key(s)));
                sum += s;
                if sc.heap.len() > rest {
                    sum -= sc.heap.pop().map(|r| r.0 .0).unwrap_or(0.0);
                }
                if sc.heap.len() == rest {
                    sc.suffix[t] = sum;
                }
            }
        }
        let (split, best) = (0..=m)
            .map(|t| (t, sc.prefix[t] + sc.suffix[t]))
            .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        value += best;

        sc.chosen.clear();
        sc.chosen.extend(
            sc.order[..split]
                .iter()
                .filter(|(d, _)| *d > f64::NEG_INFINITY)
                .map(|&(d, pos)| (p.candidates[pos].score + d, pos)),
        );
        sc.chosen.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut grad: Vec<f64> = p.target_dense.iter().map(|t| p.lambda * t).collect();
        for pos in calib.iter().copied().chain(sc.chosen.iter().take(need).map(|c| c.1)) {
            for &(c, a) in &self.group_shares[p.group_of[pos]] {
                grad[c] -= scale * a;
            }
        }
        (value, grad)
    }

    /// Smallest dual value found by projected subgradient steps from `mu`.
    fn dual_bound(
        &mut self,
        calib: &[usize],
        next: usize,
        closed: &[u64],
        mu: &[f64],
        steps: usize,
    ) -> (f64, Vec<f64>) {
        let target = self.incumbent.objective;
        let mut mu = mu.to_vec();
        let mut best = (f64::INFINITY, mu.clone());
        let mut theta = 1.0;
        for _ in 0..steps {
            let (value, grad) = self.dual_value(calib, next, closed, &mu);
            if value < best.0 {
                best = (value, mu.clone());
            } else {
                theta *= 0.5;
            }
            let norm: f64 = grad.iter().map(|g| g * g).sum();
            if value < target || norm == 0.0 {
                break;
            }
            let step = theta * (value - target).max(1e-9) / norm;
            for (m, g) in mu.iter_mut().zip(&grad) {
                *m = (*m - step * g).clamp(-1.0, 1.0);
            }
        }
        best
    }

    fn eligible(&self, pos: usize, next: usize, closed: &[u64]) -> bool {
        pos >= next && !is_closed(closed, self.p.group_of[pos])
    }

    /// Relevance if the calibration items were free to be the best scores.
    fn relevance_bound(&self, calib: &[usize]) -> f64 {
        let p = self.p;
        let mut in_calib = calib.iter().copied().peekable();
        let mut total: f64 = calib.iter().map(|&i| p.candidates[i].score).sum();
        let mut room = p.k - calib.len();
        for pos in 0..p.candidates.len() {
            if room == 0 {
                break;
            }
            if in_calib.peek() == Some(&pos) {
                in_calib.next();
                continue;
            }
            total += p.candidates[pos].score;
            room -= 1;
        }
        total
    }

    /// Smallest TV reachable by adding `need` eligible items: the per-category
    /// mass range is boxed, then the box is intersected with the simplex.
    fn divergence_bound(&self, node_mass: &[u64], need: usize, next: usize, closed: &[u64]) -> f64 {
        let p = self.p;
        let denom = (p.unit_scale * p.k1 as u64) as f64;
        let mut cost = 0.0;
        let mut total = 0.0;
        for (c, list) in self.by_category.iter().enumerate() {
            let extra: u64 = list
                .iter()
                .filter(|(_, pos)| self.eligible(*pos, next, closed))
                .take(need)
                .map(|(u, _)| *u)
                .sum();
            let lo = node_mass[c] as f64 / denom;
            let hi = (node_mass[c] + extra) as f64 / denom;
            let target = p.target_dense[c];
            let q = target.clamp(lo, hi);
            cost += (target - q).abs();
            total += q;
        }
        cost + (1.0 - total).abs()
    }

    fn count_eligible(&self, next: usize, closed: &[u64]) -> usize {
        (next..self.p.candidates.len())
            .filter(|&pos| !is_closed(closed, self.p.group_of[pos]))
            .count()
    }

    #[allow(clippy::too_many_arguments)]
    fn make_node(
        &mut self,
        next: usize,
        calib: Vec<usize>,
        mass: Vec<u64>,
        closed: Vec<u64>,
        mu: &[f64],
        steps: usize,
        slack: f64,
    ) -> Option<Node> {
        let need = self.p.k1 - calib.len();
        if self.count_eligible(next, &closed) < need {
            return None;
        }
        let relevance_bound = self.relevance_bound(&calib);
        let divergence = self.divergence_bound(&mass, need, next, &closed);
        let mut bound = relevance_bound - self.p.lambda * divergence;
        let mut mu = mu.to_vec();
        if !self.prunable(bound, relevance_bound, slack) {
            let (dual, dual_mu) = self.dual_bound(&calib, next, &closed, &mu, steps);
            mu = dual_mu;
            bound = bound.min(dual + slack);
        }
        self.seq += 1;
        Some(Node {
            bound,
            relevance_bound,
            seq: self.seq,
            next,
            calib,
            mass,
            closed,
            mu,
        })
    }

    /// True when nothing under the node can beat the incumbent, tie-breaks included.
    fn prunable(&self, bound: f64, relevance_bound: f64, slack: f64) -> bool {
        let inc = &self.incumbent;
        if bound < inc.objective - TIE_TOLERANCE - slack {
            return true;
        }
        bound <= inc.objective + TIE_TOLERANCE && relevance_bound < inc.relevance - TIE_TOLERANCE - slack
    }

    fn offer(&mut self, e: Evaluated) {
        if e.beats(&self.incumbent) {
            self.incumbent = improve(self.p, e);
        }
    }
}

/// Best-improvement local search over single swaps into and out of the
/// calibration subset.
fn improve(p: &RerankProblem, mut best: Evaluated) -> Evaluated {
    let n = p.candidates.len();
    for _ in 0..n * p.k1.max(1) {
        let mut in_calib = vec![false; n];
        for &pos in &best.calib {
            in_calib[pos] = true;
        }
        let mut step: Option<Evaluated> = None;
        for slot in 0..best.calib.len() {
            for pos in (0..n).filter(|&i| !in_calib[i]) {
                let mut calib = best.calib.clone();
                calib[slot] = pos;
                calib.sort_unstable();
                let e = p.complete(calib);
                if e.beats(step.as_ref().unwrap_or(&best)) {
                    step = Some(e);
                }
            }
        }
        match step {
            Some(e) => best = e,
            None => break,
        }
    }
    best
}

/// Exact solve with a node and time budget; falls back to the best solution
/// found (with its optimality gap) when the budget runs out.
pub fn solve_branch_and_bound(p: &RerankProblem, budget: &SolverBudget) -> Result<RerankSolution> {
    let top = p.top_k();
    if p.k1 == 0 || p.lambda == 0.0 {
        return Ok(RerankSolution::from_evaluated(p, &top, SolveStatus::Optimal, 0.0, 1));
    }
    let mut seed = p.complete(greedy_calibration_positions(p));
    if top.beats(&seed) {
        seed = top;
    }
    let mut search = Search::new(p, improve(p, seed));
    // bounds are computed along a different arithmetic path than leaf
    // objectives; keep a margin proportional to the magnitudes involved
    let scale: f64 = p.candidates.iter().take(p.k).map(|c| c.score.abs()).sum::<f64>() + 2.0 * p.lambda;
    let slack = 1e-12 * (1.0 + scale);

    let words = p.n_groups.div_ceil(64).max(1);
    let mut heap = BinaryHeap::new();
    let mu = search.incumbent_mu();
    let root = search.make_node(
        0,
        Vec::new(),
        vec![0; p.n_categories()],
        vec![0; words],
        &mu,
        ROOT_DUAL_STEPS,
        slack,
    );
    if let Some(root) = root {
        heap.push(root);
    }
    let started = Instant::now();
    let mut nodes = 0u64;
    let mut exhausted = false;

    while let Some(node) = heap.pop() {
        if search.prunable(node.bound, node.relevance_bound, slack) {
            continue;
        }
        if nodes >= budget.max_nodes
            || (nodes.is_multiple_of(256) && started.elapsed().as_secs_f64() > budget.max_seconds)
        {
            heap.push(node);
            exhausted = true;
            break;
        }
        nodes += 1;

        let Some(pos) = (node.next..p.candidates.len()).find(|&i| !is_closed(&node.closed, p.group_of[i])) else {
            continue;
        };

        // put `pos` into the calibration subset
        let mut calib = node.calib.clone();
        calib.push(pos);
        let mut mass = node.mass.clone();
        p.add_units(&mut mass, pos);
        if calib.len() == p.k1 {
            let e = p.complete(calib);
            search.offer(e);
        } else if let Some(child) = search.make_node(
            pos + 1,
            calib,
            mass,
            node.closed.clone(),
            &node.mu,
            NODE_DUAL_STEPS,
            slack,
        ) {
            if !search.prunable(child.bound, child.relevance_bound, slack) {
                heap.push(child);
            }
        }

        // leave it out, and with it the rest of its group
        let mut closed = node.closed;
        close(&mut closed, p.group_of[pos]);
        if let Some(child) = search.make_node(pos + 1, node.calib, node.mass, closed, &node.mu, NODE_DUAL_STEPS, slack)
        {
            if !search.prunable(child.bound, child.relevance_bound, slack) {
                heap.push(child);
            }
        }
    }

    let incumbent = search.incumbent;
    if exhausted {
        let best_bound = heap
            .iter()
            .filter(|n| !search_prunable_static(n, &incumbent, slack))
            .map(|n| n.bound)
            .fold(incumbent.objective, f64::max);
        let gap = (best_bound - incumbent.objective).max(0.0);
        if incumbent.selected.len() != p.k {
            return Err(Error::NoIncumbent);
        }
        return Ok(RerankSolution::from_evaluated(
            p,
            &incumbent,
            SolveStatus::FeasibleWithGap,
            gap,
            nodes,
        ));
    }
    Ok(RerankSolution::from_evaluated(
        p,
        &incumbent,
        SolveStatus::Optimal,
        0.0,
        nodes,
    ))
}

fn search_prunable_static(n: &Node, inc: &Evaluated, slack: f64) -> bool {
    n.bound < inc.objective - TIE_TOLERANCE - slack
}
