//! Top-K accuracy, coverage, diversity and calibration metrics, aggregated per
//! engine and per activity group, plus paired significance tests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::confidence::{UserGroup, UserGroupAssignment};
use crate::data::{Catalog, SplitDataset};
use crate::distribution::{hellinger_distance, js_divergence, list_distribution, CategoryDistribution, RankWeighting};
use crate::error::{Error, Result};
use crate::rerank::{Engine, RerankSolution};
use crate::{ItemId, UserId};

pub const METRICS: [&str; 7] = [
    "precision",
    "recall",
    "ndcg",
    "catalog_coverage",
    "diversity",
    "js",
    "hellinger",
];

fn hits(recommended: &[ItemId], relevant: &BTreeSet<ItemId>, k: usize) -> usize {
    recommended.iter().take(k).filter(|i| relevant.contains(i)).count()
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("cutoff K must be at least 1"));
    }
    Ok(())
}

pub fn precision_at_k(recommended: &[ItemId], relevant: &BTreeSet<ItemId>, k: usize) -> Result<f64> {
    check_k(k)?;
    if recommended.is_empty() {
        return Err(Error::invalid("precision of an empty list"));
    }
    Ok(hits(recommended, relevant, k) as f64 / k as f64)
}

pub fn recall_at_k(recommended: &[ItemId], relevant: &BTreeSet<ItemId>, k: usize) -> Result<f64> {
    check_k(k)?;
    if relevant.is_empty() {
        return Err(Error::invalid("recall with no relevant items"));
    }
    Ok(hits(recommended, relevant, k) as f64 / relevant.len() as f64)
}

/// Binary-gain nDCG with a `1 / log2(r + 1)` discount.
pub fn ndcg_at_k(recommended: &[ItemId], relevant: &BTreeSet<ItemId>, k: usize) -> Result<f64> {
    check_k(k)?;
    if relevant.is_empty() {
        return Err(Error::invalid("nDCG with no relevant items"));
    }
    let discount = |r: usize| 1.0 / ((r + 1) as f64).log2();
    let dcg: f64 = recommended
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(idx, _)| discount(idx + 1))
        .sum();
    let idcg: f64 = (1..=k.min(relevant.len())).map(discount).sum();
    Ok((dcg / idcg).min(1.0))
}

/// Percentage of the catalog recommended to at least one of the given users.
pub fn catalog_coverage<'a>(lists: impl IntoIterator<Item = &'a Vec<ItemId>>, catalog_size: usize) -> Result<f64> {
    if catalog_size == 0 {
        return Err(Error::invalid("catalog coverage over an empty catalog"));
    }
    let union: BTreeSet<ItemId> = lists.into_iter().flatten().copied().collect();
    Ok(100.0 * union.len() as f64 / catalog_size as f64)
}

/// Mean pairwise `1 - Jaccard` of the items' category sets.
pub fn intra_list_diversity(list: &[ItemId], catalog: &Catalog) -> Result<f64> {
    if list.len() < 2 {
        return Err(Error::invalid("diversity needs at least two items"));
    }
    let cats = list
        .iter()
        .map(|id| catalog.get(*id).map(|it| &it.categories).ok_or(Error::MissingItem(*id)))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..cats.len() {
        for j in i + 1..cats.len() {
            let inter = cats[i].intersection(cats[j]).count();
            let union = cats[i].len() + cats[j].len() - inter;
            total += 1.0 - inter as f64 / union as f64;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub significant: bool,
}

/// Two-sided paired t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64], alpha: f64) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::invalid("paired t-test needs at least two pairs"));
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let (t, p) = if diffs.iter().all(|d| *d == 0.0) {
        (0.0, 1.0)
    } else if var == 0.0 {
        (mean.signum() * f64::INFINITY, 0.0)
    } else {
        let t = mean / (var / n).sqrt();
        let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::invalid(e.to_string()))?;
        (t, (2.0 * dist.sf(t.abs())).min(1.0))
    };
    Ok(TTest {
        t,
        p,
        significant: p < alpha,
    })
}

/// One user's metric values. Diversity is absent for lists shorter than two.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserMetrics {
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub diversity: Option<f64>,
    pub js: f64,
    pub hellinger: f64,
}

impl UserMetrics {
    fn get(&self, metric: &str) -> Option<f64> {
        match metric {
            "precision" => Some(self.precision),
            "recall" => Some(self.recall),
            "ndcg" => Some(self.ndcg),
            "diversity" => self.diversity,
            "js" => Some(self.js),
            "hellinger" => Some(self.hellinger),
            _ => None,
        }
    }
}

/// Averages for one engine over one set of users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: String,
    pub n_users: usize,
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub catalog_coverage: f64,
    pub diversity: f64,
    pub js: f64,
    pub hellinger: f64,
}

impl GroupMetrics {
    pub fn get(&self, metric: &str) -> Option<f64> {
        match metric {
            "precision" => Some(self.precision),
            "recall" => Some(self.recall),
            "ndcg" => Some(self.ndcg),
            "catalog_coverage" => Some(self.catalog_coverage),
            "diversity" => Some(self.diversity),
            "js" => Some(self.js),
            "hellinger" => Some(self.hellinger),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineMetrics {
    pub engine: Engine,
    /// `all` first, then the activity groups that have members.
    pub groups: Vec<GroupMetrics>,
    #[serde(skip)]
    pub per_user: BTreeMap<UserId, UserMetrics>,
}

impl EngineMetrics {
    pub fn group(&self, name: &str) -> Option<&GroupMetrics> {
        self.groups.iter().find(|g| g.group == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub engine: Engine,
    pub reference: Engine,
    pub metric: String,
    pub t: f64,
    pub p: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub rank_weighting: RankWeighting,
    pub engines: Vec<EngineMetrics>,
    pub significance: Vec<Significance>,
}

impl EvalReport {
    pub fn engine(&self, engine: Engine) -> Option<&EngineMetrics> {
        self.engines.iter().find(|e| e.engine == engine)
    }

    pub fn value(&self, engine: Engine, group: &str, metric: &str) -> Option<f64> {
        self.engine(engine)?.group(group)?.get(metric)
    }

    /// `engine,group,metric,value`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("engine,group,metric,value\n");
        for e in &self.engines {
            for g in &e.groups {
                for metric in METRICS {
                    let v = g.get(metric).unwrap_or(f64::NAN);
                    let _ = writeln!(out, "{},{},{},{}", e.engine, g.group, metric, v);
                }
            }
        }
        out
    }
}

pub const ALPHA: f64 = 0.05;

/// Ranked lists from solver output.
pub fn ranked_lists(solutions: &BTreeMap<UserId, RerankSolution>) -> BTreeMap<UserId, Vec<ItemId>> {
    solutions.iter().map(|(u, s)| (*u, s.selected.clone())).collect()
}

fn user_metrics(
    list: &[ItemId],
    relevant: &BTreeSet<ItemId>,
    profile: &CategoryDistribution,
    catalog: &Catalog,
    weighting: RankWeighting,
    k: usize,
) -> Result<UserMetrics> {
    let top: Vec<ItemId> = list.iter().take(k).copied().collect();
    let q = list_distribution(&top, catalog, weighting)?;
    Ok(UserMetrics {
        precision: precision_at_k(&top, relevant, k)?,
        recall: recall_at_k(&top, relevant, k)?,
        ndcg: ndcg_at_k(&top, relevant, k)?,
        diversity: if top.len() >= 2 {
            Some(intra_list_diversity(&top, catalog)?)
        } else {
            None
        },
        js: js_divergence(profile, &q),
        hellinger: hellinger_distance(profile, &q),
    })
}

fn aggregate(
    name: &str,
    users: &[UserId],
    per_user: &BTreeMap<UserId, UserMetrics>,
    lists: &BTreeMap<UserId, Vec<ItemId>>,
    catalog_size: usize,
    k: usize,
) -> Result<GroupMetrics> {
    let n = users.len() as f64;
    let mean = |f: &dyn Fn(&UserMetrics) -> f64| users.iter().map(|u| f(&per_user[u])).sum::<f64>() / n;
    let divs: Vec<f64> = users.iter().filter_map(|u| per_user[u].diversity).collect();
    let diversity = if divs.is_empty() {
        0.0
    } else {
        divs.iter().sum::<f64>() / divs.len() as f64
    };
    let truncated: Vec<Vec<ItemId>> = users
        .iter()
        .map(|u| lists[u].iter().take(k).copied().collect())
        .collect();
    Ok(GroupMetrics {
        group: name.to_string(),
        n_users: users.len(),
        precision: mean(&|m| m.precision),
        recall: mean(&|m| m.recall),
        ndcg: mean(&|m| m.ndcg),
        catalog_coverage: catalog_coverage(&truncated, catalog_size)?,
        diversity,
        js: mean(&|m| m.js),
        hellinger: mean(&|m| m.hellinger),
    })
}

/// Scores every engine's lists against the test split.
///
/// `profiles` holds each user's train-side `p(c|u)`. Every engine must cover
/// exactly the same users, and each of those users needs test items, a
/// profile, and a group.
pub fn evaluate(
    lists: &BTreeMap<Engine, BTreeMap<UserId, Vec<ItemId>>>,
    split: &SplitDataset,
    profiles: &BTreeMap<UserId, CategoryDistribution>,
    groups: &UserGroupAssignment,
    rank_weighting: RankWeighting,
    k: usize,
) -> Result<EvalReport> {
    check_k(k)?;
    let mut user_set: Option<BTreeSet<UserId>> = None;
    for (engine, per_user) in lists {
        let users: BTreeSet<UserId> = per_user.keys().copied().collect();
        match &user_set {
            None => user_set = Some(users),
            Some(expected) if *expected != users => {
                return Err(Error::invalid(format!(
                    "engine {engine} was evaluated on a different user set"
                )));
            }
            Some(_) => {}
        }
    }
    let users: Vec<UserId> = user_set.unwrap_or_default().into_iter().collect();
    if users.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let relevant = split.test_items();
    for u in &users {
        if !relevant.contains_key(u) {
            return Err(Error::invalid(format!("user {u} has no test items")));
        }
        if !profiles.contains_key(u) {
            return Err(Error::invalid(format!("user {u} has no profile distribution")));
        }
        if groups.get(*u).is_none() {
            return Err(Error::invalid(format!("user {u} has no activity group")));
        }
    }
    let catalog = &split.items;

    let mut engines = Vec::new();
    for (&engine, engine_lists) in lists {
        let per_user: BTreeMap<UserId, UserMetrics> = users
            .par_iter()
            .map(|u| {
                user_metrics(&engine_lists[u], &relevant[u], &profiles[u], catalog, rank_weighting, k)
                    .map(|m| (*u, m))
                    .map_err(|e| Error::User {
                        user: *u,
                        source: Box::new(e),
                    })
            })
            .collect::<Result<_>>()?;
        let mut rows = vec![aggregate("all", &users, &per_user, engine_lists, catalog.len(), k)?];
        for g in UserGroup::ALL {
            let members: Vec<UserId> = users.iter().copied().filter(|u| groups.get(*u) == Some(g)).collect();
            if !members.is_empty() {
                rows.push(aggregate(
                    g.as_str(),
                    &members,
                    &per_user,
                    engine_lists,
                    catalog.len(),
                    k,
                )?);
            }
        }
        engines.push(EngineMetrics {
            engine,
            groups: rows,
            per_user,
        });
    }

    let mut significance = Vec::new();
    let find = |e: Engine| engines.iter().find(|m| m.engine == e);
    if let Some(ccl) = find(Engine::Ccl) {
        for reference in [Engine::None, Engine::Cl] {
            let Some(base) = find(reference) else { continue };
            if users.len() < 2 {
                continue;
            }
            for metric in ["precision", "recall", "ndcg"] {
                let a: Vec<f64> = users.iter().filter_map(|u| ccl.per_user[u].get(metric)).collect();
                let b: Vec<f64> = users.iter().filter_map(|u| base.per_user[u].get(metric)).collect();
                let test = paired_t_test(&a, &b, ALPHA)?;
                significance.push(Significance {
                    engine: Engine::Ccl,
                    reference,
                    metric: metric.to_string(),
                    t: test.t,
                    p: test.p,
                    significant: test.significant,
                });
            }
        }
    }

    Ok(EvalReport {
        k,
        rank_weighting,
        engines,
        significance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(items: &[u64]) -> BTreeSet<u64> {
        items.iter().copied().collect()
    }

    #[test]
    fn precision_examples() {
        let list: Vec<u64> = (1..=20).collect();
        assert_eq!(precision_at_k(&list, &list.iter().copied().collect(), 20).unwrap(), 1.0);
        assert_eq!(precision_at_k(&list, &set(&[100]), 20).unwrap(), 0.0);
        assert_eq!(precision_at_k(&list, &set(&[5, 100]), 20).unwrap(), 0.05);
        assert!(precision_at_k(&list, &set(&[1]), 0).is_err());
    }

    #[test]
    fn recall_examples() {
        let list = [1, 2, 3, 4];
        assert_eq!(recall_at_k(&list, &set(&[1, 2]), 4).unwrap(), 1.0);
        assert_eq!(recall_at_k(&list, &set(&[9]), 4).unwrap(), 0.0);
        assert_eq!(recall_at_k(&list, &set(&[1, 3, 8, 9]), 4).unwrap(), 0.5);
        assert!(recall_at_k(&list, &set(&[]), 4).is_err());
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[1, 2, 3], &set(&[1, 2]), 3).unwrap(), 1.0);
        let v = ndcg_at_k(&[5, 1], &set(&[1]), 2).unwrap();
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert_eq!(ndcg_at_k(&[5, 6], &set(&[1]), 2).unwrap(), 0.0);
    }

    #[test]
    fn coverage_examples() {
        let same = vec![vec![1, 2], vec![1, 2], vec![2, 1]];
        assert_eq!(catalog_coverage(&same, 8).unwrap(), 25.0);
        let all = vec![vec![1, 2], vec![3, 4]];
        assert_eq!(catalog_coverage(&all, 4).unwrap(), 100.0);
        assert!(catalog_coverage(&all, 0).is_err());
    }

    #[test]
    fn diversity_examples() {
        let cat = Catalog::from_pairs([(1, vec!["A"]), (2, vec!["A"]), (3, vec!["B"]), (4, vec!["A", "B"])]).unwrap();
        assert_eq!(intra_list_diversity(&[1, 2], &cat).unwrap(), 0.0);
        assert_eq!(intra_list_diversity(&[1, 3], &cat).unwrap(), 1.0);
        assert_eq!(intra_list_diversity(&[1, 4], &cat).unwrap(), 0.5);
        assert!(intra_list_diversity(&[1], &cat).is_err());
    }

    #[test]
    fn t_test_conventions() {
        let a = [0.1, 0.2, 0.3];
        let same = paired_t_test(&a, &a, 0.05).unwrap();
        assert_eq!(same.p, 1.0);
        assert!(!same.significant);
        let shifted = paired_t_test(&[2.0, 3.0, 4.0, 5.0], &[1.0, 2.0, 3.0, 4.0], 0.05).unwrap();
        assert_eq!(shifted.p, 0.0);
        assert!(shifted.significant);
        assert!(paired_t_test(&[1.0], &[2.0], 0.05).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[2.0], 0.05).is_err());
    }

    #[test]
    fn t_test_ten_pairs() {
        let a = [0.61, 0.42, 0.55, 0.70, 0.38, 0.49, 0.66, 0.52, 0.47, 0.58];
        let b = [0.55, 0.40, 0.47, 0.71, 0.30, 0.41, 0.60, 0.53, 0.39, 0.50];
        // t = sum(d) / sqrt((n * sum(d^2) - sum(d)^2) / (n - 1))
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let s1: f64 = d.iter().sum();
        let s2: f64 = d.iter().map(|x| x * x).sum();
        let expected_t = s1 / ((10.0 * s2 - s1 * s1) / 9.0).sqrt();
        let r = paired_t_test(&a, &b, 0.05).unwrap();
        assert!((r.t - expected_t).abs() < 1e-9);
        assert!((r.t - 4.367161585).abs() < 1e-6);
        assert!((r.p - 0.0018045344).abs() < 1e-7);
        assert!(r.significant);
    }

    proptest! {
        #[test]
        fn bounds_and_monotone_in_k(
            list in proptest::collection::vec(0u64..40, 1..25),
            relevant in proptest::collection::btree_set(0u64..40, 1..15),
        ) {
            let mut seen = BTreeSet::new();
            let list: Vec<u64> = list.into_iter().filter(|i| seen.insert(*i)).collect();
            let mut prev_recall = 0.0;
            let mut prev_hits = 0.0;
            for k in 1..=list.len() + 2 {
                let p = precision_at_k(&list, &relevant, k).unwrap();
                let r = recall_at_k(&list, &relevant, k).unwrap();
                let n = ndcg_at_k(&list, &relevant, k).unwrap();
                prop_assert!((0.0..=1.0).contains(&r));
                prop_assert!((0.0..=1.0).contains(&n));
                prop_assert!(r >= prev_recall);
                prop_assert!(p * k as f64 >= prev_hits - 1e-9);
                prev_recall = r;
                prev_hits = p * k as f64;
            }
        }

        #[test]
        fn ndcg_is_one_iff_relevant_on_top(perm in Just((0u64..10).collect::<Vec<_>>()).prop_shuffle(), n_rel in 1usize..10) {
            let relevant: BTreeSet<u64> = (0..n_rel as u64).collect();
            let k = 10;
            let v = ndcg_at_k(&perm, &relevant, k).unwrap();
            let on_top = perm.iter().take(n_rel).all(|i| relevant.contains(i));
            prop_assert!(v <= 1.0);
            prop_assert_eq!(on_top, (v - 1.0).abs() < 1e-12);
        }

        #[test]
        fn diversity_in_unit_interval(cats in proptest::collection::vec(proptest::collection::btree_set(0u8..5, 1..4), 2..8)) {
            let names: Vec<Vec<String>> = cats.iter().map(|s| s.iter().map(|c| c.to_string()).collect()).collect();
            let cat = Catalog::from_pairs(
                names.iter().enumerate().map(|(i, c)| (i as u64, c.iter().map(|s| s.as_str()))),
            )
            .unwrap();
            let ids: Vec<u64> = (0..cats.len() as u64).collect();
            let d = intra_list_diversity(&ids, &cat).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
        }
    }
}
