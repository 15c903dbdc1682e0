//! How much to trust a user's history: confidence weights, activity groups,
//! Beta posteriors over category preference, and the test-as-oracle analysis.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, Continuous, ContinuousCDF};

use crate::data::{SplitDataset, UserProfile};
use crate::distribution::{hellinger_distance, js_divergence, profile_distribution, Divergence};
use crate::error::{Error, Result};
use crate::UserId;

/// Per-user `W(u) = min(|I_u| / mean |I|, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceWeights {
    pub weights: BTreeMap<UserId, f64>,
    pub mean_profile_size: f64,
}

impl ConfidenceWeights {
    pub fn get(&self, user: UserId) -> Option<f64> {
        self.weights.get(&user).copied()
    }
}

pub fn confidence_weight(profile_sizes: &BTreeMap<UserId, usize>) -> Result<ConfidenceWeights> {
    if profile_sizes.is_empty() {
        return Err(Error::invalid("confidence weights need at least one user"));
    }
    if let Some((user, _)) = profile_sizes.iter().find(|(_, s)| **s == 0) {
        return Err(Error::invalid(format!("user {user} has an empty profile")));
    }
    let total: usize = profile_sizes.values().sum();
    let mean = total as f64 / profile_sizes.len() as f64;
    let weights = profile_sizes
        .iter()
        .map(|(u, s)| (*u, (*s as f64 / mean).clamp(0.0, 1.0)))
        .collect();
    Ok(ConfidenceWeights {
        weights,
        mean_profile_size: mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum UserGroup {
    #[serde(rename = "active")]
    Active,
    #[serde(rename = "semi-active")]
    SemiActive,
    #[serde(rename = "inactive")]
    Inactive,
}

impl UserGroup {
    pub const ALL: [UserGroup; 3] = [UserGroup::Active, UserGroup::SemiActive, UserGroup::Inactive];

    pub fn as_str(&self) -> &'static str {
        match self {
            UserGroup::Active => "active",
            UserGroup::SemiActive => "semi-active",
            UserGroup::Inactive => "inactive",
        }
    }
}

impl fmt::Display for UserGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserGroupAssignment {
    pub groups: BTreeMap<UserId, UserGroup>,
}

impl UserGroupAssignment {
    pub fn get(&self, user: UserId) -> Option<UserGroup> {
        self.groups.get(&user).copied()
    }

    pub fn members(&self, group: UserGroup) -> impl Iterator<Item = UserId> + '_ {
        self.groups.iter().filter(move |(_, g)| **g == group).map(|(u, _)| *u)
    }

    pub fn count(&self, group: UserGroup) -> usize {
        self.members(group).count()
    }
}

/// 20/60/20 split by profile size, largest first, ties by user id.
pub fn assign_user_groups(profile_sizes: &BTreeMap<UserId, usize>) -> Result<UserGroupAssignment> {
    let n = profile_sizes.len();
    if n < 5 {
        return Err(Error::invalid(format!(
            "activity groups need at least 5 users, got {n}"
        )));
    }
    let mut order: Vec<(UserId, usize)> = profile_sizes.iter().map(|(u, s)| (*u, *s)).collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let tail = n / 5;
    let groups = order
        .iter()
        .enumerate()
        .map(|(idx, (u, _))| {
            let g = if idx < tail {
                UserGroup::Active
            } else if idx >= n - tail {
                UserGroup::Inactive
            } else {
                UserGroup::SemiActive
            };
            (*u, g)
        })
        .collect();
    Ok(UserGroupAssignment { groups })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaPosterior {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaPosterior {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::invalid(format!(
                "Beta({alpha}, {beta}) needs positive parameters"
            )));
        }
        Ok(Self { alpha, beta })
    }

    /// Beta(1, 1).
    pub fn uniform() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn std_dev(&self) -> f64 {
        let s = self.alpha + self.beta;
        (self.alpha * self.beta / (s * s * (s + 1.0))).sqrt()
    }

    fn dist(&self) -> Beta {
        Beta::new(self.alpha, self.beta).expect("parameters validated at construction")
    }
}

pub fn beta_posterior_from_counts(successes: u64, failures: u64, prior: BetaPosterior) -> BetaPosterior {
    BetaPosterior {
        alpha: prior.alpha + successes as f64,
        beta: prior.beta + failures as f64,
    }
}

// Gauss-Kronrod 7/15 nodes and weights on [-1, 1].
const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const KRONROD_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss weights for the odd-indexed nodes (1, 3, 5, 7).
const GAUSS_WEIGHTS: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gauss_kronrod(f: &impl Fn(f64) -> f64, lo: f64, hi: f64) -> (f64, f64) {
    let center = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let mut kronrod = 0.0;
    let mut gauss = 0.0;
    for (i, (&x, &wk)) in GK_NODES.iter().zip(KRONROD_WEIGHTS.iter()).enumerate() {
        let values = if x == 0.0 {
            let v = f(center);
            (v, 0.0)
        } else {
            (f(center - half * x), f(center + half * x))
        };
        let pair = values.0 + values.1;
        kronrod += wk * pair;
        if i % 2 == 1 {
            gauss += GAUSS_WEIGHTS[i / 2] * pair;
        }
    }
    (kronrod * half, (kronrod - gauss).abs() * half)
}

fn adaptive(f: &impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64, depth: u32) -> f64 {
    let (value, err) = gauss_kronrod(f, lo, hi);
    if err <= tol || depth == 0 || hi - lo < 1e-15 {
        return value;
    }
    let mid = 0.5 * (lo + hi);
    adaptive(f, lo, mid, 0.5 * tol, depth - 1) + adaptive(f, mid, hi, 0.5 * tol, depth - 1)
}

/// `P(X > Y)` for independent `X ~ a`, `Y ~ b`, as `integral f_a(x) F_b(x) dx`.
///
/// The unit interval is cut at `a`'s mean plus multiples of its standard
/// deviation so that sharply peaked posteriors are resolved, then each piece
/// is integrated with adaptive Gauss-Kronrod.
pub fn prob_greater(a: &BetaPosterior, b: &BetaPosterior) -> f64 {
    let fa = a.dist();
    let fb = b.dist();
    let integrand = |x: f64| fa.pdf(x) * fb.cdf(x);
    let (mu, sd) = (a.mean(), a.std_dev());
    let mut cuts = vec![0.0, 1.0];
    for k in -40..=40 {
        let x = mu + 0.5 * k as f64 * sd;
        if x > 0.0 && x < 1.0 {
            cuts.push(x);
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let tol = 1e-10 / cuts.len() as f64;
    let total: f64 = cuts.windows(2).map(|w| adaptive(&integrand, w[0], w[1], tol, 40)).sum();
    total.clamp(0.0, 1.0)
}

/// Mean train-vs-test divergence within one activity group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleGroupRow {
    pub group: UserGroup,
    pub js: f64,
    pub hellinger: f64,
    pub n_users: usize,
}

/// Per-user divergence between the train profile and the test items, both with
/// unit weights. Users missing either side (after catalog filtering) are skipped.
fn oracle_per_user(split: &SplitDataset) -> BTreeMap<UserId, (f64, f64)> {
    let test = split.test_by_user();
    let mut out = BTreeMap::new();
    for (user, train_rows) in split.train_by_user() {
        let Some(test_rows) = test.get(&user) else { continue };
        let train_items = train_rows.iter().map(|r| r.item).filter(|i| split.items.contains(*i));
        let test_items = test_rows.iter().map(|r| r.item).filter(|i| split.items.contains(*i));
        let p = profile_distribution(&UserProfile::uniform(user, train_items), &split.items);
        let q = profile_distribution(&UserProfile::uniform(user, test_items), &split.items);
        if let (Ok(p), Ok(q)) = (p, q) {
            out.insert(user, (js_divergence(&p, &q), hellinger_distance(&p, &q)));
        }
    }
    out
}

/// Treats each user's test items as a perfect recommendation list and reports
/// its miscalibration per group, for one divergence.
pub fn oracle_miscalibration(
    split: &SplitDataset,
    groups: &UserGroupAssignment,
    divergence: Divergence,
) -> BTreeMap<UserGroup, f64> {
    oracle_analysis(split, groups)
        .into_iter()
        .map(|row| {
            let value = match divergence {
                Divergence::Js => row.js,
                Divergence::Hellinger => row.hellinger,
            };
            (row.group, value)
        })
        .collect()
}

/// Both divergences per group; groups with no evaluable users are omitted.
pub fn oracle_analysis(split: &SplitDataset, groups: &UserGroupAssignment) -> Vec<OracleGroupRow> {
    let per_user = oracle_per_user(split);
    UserGroup::ALL
        .iter()
        .filter_map(|&group| {
            let vals: Vec<(f64, f64)> = groups
                .members(group)
                .filter_map(|u| per_user.get(&u).copied())
                .collect();
            if vals.is_empty() {
                return None;
            }
            let n = vals.len() as f64;
            Some(OracleGroupRow {
                group,
                js: vals.iter().map(|v| v.0).sum::<f64>() / n,
                hellinger: vals.iter().map(|v| v.1).sum::<f64>() / n,
                n_users: vals.len(),
            })
        })
        .collect()
}

/// `group,js,hellinger,n_users`
pub fn oracle_csv(rows: &[OracleGroupRow]) -> String {
    let mut out = String::from("group,js,hellinger,n_users\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.group, r.js, r.hellinger, r.n_users));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Catalog, Interaction};
    use crate::distribution::miscalibration;
    use proptest::prelude::*;

    fn sizes(pairs: &[(u64, usize)]) -> BTreeMap<u64, usize> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn weight_formula() {
        let w = confidence_weight(&sizes(&[(1, 10), (2, 20), (3, 30)])).unwrap();
        assert_eq!(w.mean_profile_size, 20.0);
        assert_eq!(w.weights, [(1, 0.5), (2, 1.0), (3, 1.0)].into_iter().collect());

        let w = confidence_weight(&sizes(&[(1, 7), (2, 7), (3, 7)])).unwrap();
        assert!(w.weights.values().all(|v| *v == 1.0));

        let w = confidence_weight(&sizes(&[(1, 100), (2, 10)])).unwrap();
        assert_eq!(w.get(1), Some(1.0));
        assert!((w.get(2).unwrap() - 10.0 / 55.0).abs() < 1e-15);

        assert!(confidence_weight(&BTreeMap::new()).is_err());
        assert!(confidence_weight(&sizes(&[(1, 0)])).is_err());
    }

    #[test]
    fn group_sizes() {
        let ten = sizes(&(0..10).map(|u| (u, 10 + u as usize)).collect::<Vec<_>>());
        let g = assign_user_groups(&ten).unwrap();
        assert_eq!(g.count(UserGroup::Active), 2);
        assert_eq!(g.count(UserGroup::SemiActive), 6);
        assert_eq!(g.count(UserGroup::Inactive), 2);
        assert_eq!(g.get(9), Some(UserGroup::Active));
        assert_eq!(g.get(0), Some(UserGroup::Inactive));

        let five = sizes(&(0..5).map(|u| (u, 3)).collect::<Vec<_>>());
        let g = assign_user_groups(&five).unwrap();
        assert_eq!(
            (
                g.count(UserGroup::Active),
                g.count(UserGroup::SemiActive),
                g.count(UserGroup::Inactive)
            ),
            (1, 3, 1)
        );
        // all tied: lowest id is first in the order
        assert_eq!(g.get(0), Some(UserGroup::Active));
        assert_eq!(g.get(4), Some(UserGroup::Inactive));

        assert!(assign_user_groups(&sizes(&[(1, 1), (2, 2), (3, 3), (4, 4)])).is_err());
    }

    #[test]
    fn posterior_counts() {
        let prior = BetaPosterior::uniform();
        assert_eq!(
            beta_posterior_from_counts(90, 10, prior),
            BetaPosterior {
                alpha: 91.0,
                beta: 11.0
            }
        );
        assert_eq!(
            beta_posterior_from_counts(9, 1, prior),
            BetaPosterior { alpha: 10.0, beta: 2.0 }
        );
        assert_eq!(beta_posterior_from_counts(0, 0, prior), prior);
        assert!(BetaPosterior::new(0.0, 1.0).is_err());
    }

    #[test]
    fn prob_greater_symmetric_cases() {
        for p in [(1.0, 1.0), (91.0, 11.0), (10.0, 2.0), (0.5, 0.5), (3.0, 700.0)] {
            let a = BetaPosterior::new(p.0, p.1).unwrap();
            assert!((prob_greater(&a, &a) - 0.5).abs() < 1e-6, "{p:?}");
        }
    }

    #[test]
    fn prob_greater_closed_form() {
        // X ~ Beta(2,1) has F(x) = x^2; Y ~ U(0,1): P(X > Y) = E[X] = 2/3
        let a = BetaPosterior::new(2.0, 1.0).unwrap();
        let u = BetaPosterior::uniform();
        assert!((prob_greater(&a, &u) - 2.0 / 3.0).abs() < 1e-9);
        let extreme = prob_greater(
            &BetaPosterior::new(1000.0, 1.0).unwrap(),
            &BetaPosterior::new(1.0, 1000.0).unwrap(),
        );
        assert!((extreme - 1.0).abs() < 1e-6);
    }

    fn inter(user: u64, item: u64) -> Interaction {
        Interaction {
            user,
            item,
            rating: 4.0,
            timestamp: 0,
        }
    }

    /// Ten users; user u has 2u + 2 train items. Active users' test items match
    /// their train genres, inactive users' test items are a different genre.
    fn oracle_fixture(identical: bool) -> SplitDataset {
        let catalog = Catalog::from_pairs([(1, ["A"]), (2, ["B"]), (3, ["C"])]).unwrap();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for u in 0..10u64 {
            for _ in 0..(2 * u + 2) {
                train.push(inter(u, 1));
            }
            let test_item = if identical || u >= 8 {
                1
            } else if u >= 2 {
                if u % 2 == 0 {
                    1
                } else {
                    2
                }
            } else {
                3
            };
            test.push(inter(u, test_item));
        }
        SplitDataset {
            train,
            test,
            items: catalog,
            dropped_users: vec![],
        }
    }

    fn train_sizes(split: &SplitDataset) -> BTreeMap<u64, usize> {
        split.train_by_user().into_iter().map(|(u, r)| (u, r.len())).collect()
    }

    #[test]
    fn oracle_identical_is_zero() {
        let split = oracle_fixture(true);
        let groups = assign_user_groups(&train_sizes(&split)).unwrap();
        let js = oracle_miscalibration(&split, &groups, Divergence::Js);
        assert_eq!(js.len(), 3);
        assert!(js.values().all(|v| *v == 0.0));
    }

    #[test]
    fn oracle_orders_groups() {
        let split = oracle_fixture(false);
        let groups = assign_user_groups(&train_sizes(&split)).unwrap();
        let js = oracle_miscalibration(&split, &groups, Divergence::Js);
        assert!(js[&UserGroup::Inactive] > js[&UserGroup::Active]);

        // group value is miscalibration() of that group's per-user values
        let per_user = oracle_per_user(&split);
        let semi: BTreeMap<u64, f64> = groups
            .members(UserGroup::SemiActive)
            .map(|u| (u, per_user[&u].0))
            .collect();
        assert!((miscalibration(&semi).unwrap() - js[&UserGroup::SemiActive]).abs() < 1e-15);

        let csv = oracle_csv(&oracle_analysis(&split, &groups));
        assert!(csv.starts_with("group,js,hellinger,n_users\nactive,"));
    }

    proptest! {
        #[test]
        fn weights_scale_invariant(raw in proptest::collection::vec(1usize..200, 1..40), k in 1usize..20) {
            let s: BTreeMap<u64, usize> = raw.iter().enumerate().map(|(i, v)| (i as u64, *v)).collect();
            let scaled: BTreeMap<u64, usize> = s.iter().map(|(u, v)| (*u, v * k)).collect();
            let a = confidence_weight(&s).unwrap();
            let b = confidence_weight(&scaled).unwrap();
            for (u, w) in &a.weights {
                prop_assert!((w - b.weights[u]).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(w));
            }
        }

        #[test]
        fn weights_monotone(raw in proptest::collection::vec(1usize..200, 2..30), bump in 1usize..50) {
            let s: BTreeMap<u64, usize> = raw.iter().enumerate().map(|(i, v)| (i as u64, *v)).collect();
            let mut bigger = s.clone();
            *bigger.get_mut(&0).unwrap() += bump;
            let a = confidence_weight(&s).unwrap().weights[&0];
            let b = confidence_weight(&bigger).unwrap().weights[&0];
            prop_assert!(b >= a - 1e-12);
        }

        #[test]
        fn groups_partition(raw in proptest::collection::vec(1usize..50, 5..60)) {
            let s: BTreeMap<u64, usize> = raw.iter().enumerate().map(|(i, v)| (i as u64, *v)).collect();
            let g = assign_user_groups(&s).unwrap();
            prop_assert_eq!(g.groups.len(), s.len());
            prop_assert_eq!(g.count(UserGroup::Active), s.len() / 5);
            prop_assert_eq!(g.count(UserGroup::Inactive), s.len() / 5);
            prop_assert_eq!(&g, &assign_user_groups(&s).unwrap());
            let min_active = g.members(UserGroup::Active).map(|u| s[&u]).min().unwrap();
            let max_semi = g.members(UserGroup::SemiActive).map(|u| s[&u]).max().unwrap();
            prop_assert!(min_active >= max_semi);
        }

        #[test]
        fn prob_greater_complement(a1 in 1.0f64..60.0, b1 in 1.0f64..60.0, a2 in 1.0f64..60.0, b2 in 1.0f64..60.0) {
            let x = BetaPosterior::new(a1, b1).unwrap();
            let y = BetaPosterior::new(a2, b2).unwrap();
            prop_assert!((prob_greater(&x, &y) + prob_greater(&y, &x) - 1.0).abs() < 2e-6);
        }
    }
}
