//! Category distributions of profiles and recommendation lists, and the
//! divergences between them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Catalog, Item, UserProfile};
use crate::error::{Error, Result};
use crate::{ItemId, UserId};

/// Tolerance on the total mass of a distribution.
pub const MASS_TOLERANCE: f64 = 1e-9;

/// A probability distribution over category labels.
///
/// Categories absent from the map have probability zero.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CategoryDistribution {
    probs: BTreeMap<String, f64>,
}

impl CategoryDistribution {
    /// Validates non-negativity and unit mass.
    pub fn new(probs: BTreeMap<String, f64>) -> Result<Self> {
        if probs.values().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::invalid("category probabilities must be finite and non-negative"));
        }
        let total: f64 = probs.values().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::invalid(format!("category probabilities sum to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, f64)>) -> Result<Self> {
        Self::new(pairs.into_iter().map(|(c, p)| (c.to_owned(), p)).collect())
    }

    /// Normalizes non-negative masses. Fails when the total is zero.
    pub fn from_masses(masses: BTreeMap<String, f64>) -> Result<Self> {
        let total: f64 = masses.values().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::invalid("cannot normalize a zero or non-finite mass"));
        }
        Self::new(masses.into_iter().map(|(c, m)| (c, m / total)).collect())
    }

    pub fn prob(&self, category: &str) -> f64 {
        self.probs.get(category).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.probs.iter().map(|(c, p)| (c.as_str(), *p))
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.probs.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Both distributions as aligned vectors over the union of their supports.
    fn aligned(&self, other: &Self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let union: BTreeSet<&String> = self.probs.keys().chain(other.probs.keys()).collect();
        let pairs: Vec<(f64, f64)> = union.into_iter().map(|c| (self.prob(c), other.prob(c))).collect();
        pairs.into_iter()
    }
}

impl fmt::Display for CategoryDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, (c, p)) in self.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{c}: {p:.4}")?;
        }
        write!(f, "}}")
    }
}

/// Position weights for list distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankWeighting {
    #[default]
    Uniform,
    /// `1 / log2(r + 1)` for 1-based rank `r`.
    Logarithmic,
}

impl RankWeighting {
    pub fn weight(&self, rank: usize) -> f64 {
        match self {
            RankWeighting::Uniform => 1.0,
            RankWeighting::Logarithmic => 1.0 / ((rank + 1) as f64).log2(),
        }
    }
}

impl FromStr for RankWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uniform" => Ok(RankWeighting::Uniform),
            "logarithmic" | "log" => Ok(RankWeighting::Logarithmic),
            other => Err(Error::invalid(format!("unknown rank weighting {other:?}"))),
        }
    }
}

impl fmt::Display for RankWeighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankWeighting::Uniform => "uniform",
            RankWeighting::Logarithmic => "logarithmic",
        })
    }
}

/// Spreads one unit of mass evenly over the item's categories.
pub fn item_category_spread(item: &Item) -> CategoryDistribution {
    let share = 1.0 / item.categories.len() as f64;
    CategoryDistribution {
        probs: item.categories.iter().map(|c| (c.clone(), share)).collect(),
    }
}

fn weighted_mixture(
    weighted_items: impl IntoIterator<Item = (ItemId, f64)>,
    catalog: &Catalog,
) -> Result<CategoryDistribution> {
    let mut masses: BTreeMap<String, f64> = BTreeMap::new();
    let mut total_weight = 0.0;
    for (id, weight) in weighted_items {
        let item = catalog.get(id).ok_or(Error::MissingItem(id))?;
        let share = weight / item.categories.len() as f64;
        for c in &item.categories {
            *masses.entry(c.clone()).or_insert(0.0) += share;
        }
        total_weight += weight;
    }
    if total_weight <= 0.0 {
        return Err(Error::invalid("distribution over an empty or zero-weight item set"));
    }
    CategoryDistribution::new(masses.into_iter().map(|(c, m)| (c, m / total_weight)).collect())
}

/// `p(c|u)`: weight-averaged category spread of the profile's items.
pub fn profile_distribution(profile: &UserProfile, catalog: &Catalog) -> Result<CategoryDistribution> {
    if profile.is_empty() {
        return Err(Error::invalid(format!("profile of user {} is empty", profile.user)));
    }
    weighted_mixture(profile.entries.iter().map(|e| (e.item, e.weight)), catalog)
}

/// `q(c|u)`: rank-weighted category spread of a ranked list.
pub fn list_distribution(
    items: &[ItemId],
    catalog: &Catalog,
    weighting: RankWeighting,
) -> Result<CategoryDistribution> {
    if items.is_empty() {
        return Err(Error::invalid("list distribution of an empty list"));
    }
    weighted_mixture(
        items
            .iter()
            .enumerate()
            .map(|(idx, id)| (*id, weighting.weight(idx + 1))),
        catalog,
    )
}

fn kl_to_mixture(p: f64, m: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (p / m).log2()
    }
}

/// Jensen-Shannon divergence with base-2 logarithms, in `[0, 1]`.
pub fn js_divergence(p: &CategoryDistribution, q: &CategoryDistribution) -> f64 {
    let mut total = 0.0;
    for (a, b) in p.aligned(q) {
        let m = 0.5 * (a + b);
        total += 0.5 * kl_to_mixture(a, m) + 0.5 * kl_to_mixture(b, m);
    }
    total.clamp(0.0, 1.0)
}

/// Hellinger distance `||sqrt(p) - sqrt(q)||_2 / sqrt(2)`, in `[0, 1]`.
pub fn hellinger_distance(p: &CategoryDistribution, q: &CategoryDistribution) -> f64 {
    let sq: f64 = p
        .aligned(q)
        .map(|(a, b)| {
            let d = a.sqrt() - b.sqrt();
            d * d
        })
        .sum();
    (sq.sqrt() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Full l1 distance `sum |p(c) - q(c)|`, in `[0, 2]`.
pub fn total_variation(p: &CategoryDistribution, q: &CategoryDistribution) -> f64 {
    p.aligned(q).map(|(a, b)| (a - b).abs()).sum()
}

/// Mean of per-user divergences.
pub fn miscalibration(per_user: &BTreeMap<UserId, f64>) -> Result<f64> {
    if per_user.is_empty() {
        return Err(Error::invalid("miscalibration over zero users"));
    }
    Ok(per_user.values().sum::<f64>() / per_user.len() as f64)
}

/// Which divergence a miscalibration figure is measured with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Divergence {
    #[default]
    Js,
    Hellinger,
}

impl Divergence {
    pub fn eval(&self, p: &CategoryDistribution, q: &CategoryDistribution) -> f64 {
        match self {
            Divergence::Js => js_divergence(p, q),
            Divergence::Hellinger => hellinger_distance(p, q),
        }
    }
}

impl FromStr for Divergence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "js" => Ok(Divergence::Js),
            "h" | "hellinger" => Ok(Divergence::Hellinger),
            other => Err(Error::invalid(format!("unknown divergence {other:?}"))),
        }
    }
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Divergence::Js => "js",
            Divergence::Hellinger => "hellinger",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ProfileEntry;
    use proptest::prelude::*;

    fn dist(pairs: &[(&str, f64)]) -> CategoryDistribution {
        CategoryDistribution::from_pairs(pairs.iter().copied()).unwrap()
    }

    fn catalog() -> Catalog {
        Catalog::from_pairs([
            (1, vec!["A"]),
            (2, vec!["B"]),
            (3, vec!["A", "B"]),
            (4, vec!["A", "B", "C", "D"]),
            (5, vec!["Comedy"]),
            (6, vec!["Action"]),
            (7, vec!["Comedy", "Action"]),
        ])
        .unwrap()
    }

    #[test]
    fn spread_is_uniform() {
        let cat = catalog();
        assert_eq!(item_category_spread(cat.get(5).unwrap()), dist(&[("Comedy", 1.0)]));
        assert_eq!(
            item_category_spread(cat.get(7).unwrap()),
            dist(&[("Comedy", 0.5), ("Action", 0.5)])
        );
        let four = item_category_spread(cat.get(4).unwrap());
        assert!(four.iter().all(|(_, p)| p == 0.25));
        assert_eq!(four.len(), 4);
    }

    #[test]
    fn profile_nine_to_one() {
        let mut items: Vec<(u64, Vec<&str>)> = (0..9).map(|i| (100 + i, vec!["Comedy"])).collect();
        items.push((200, vec!["Action"]));
        let cat = Catalog::from_pairs(items.clone()).unwrap();
        let profile = UserProfile::uniform(1, items.iter().map(|x| x.0));
        let p = profile_distribution(&profile, &cat).unwrap();
        assert!((p.prob("Comedy") - 0.9).abs() < 1e-12);
        assert!((p.prob("Action") - 0.1).abs() < 1e-12);
    }

    #[test]
    fn profile_single_and_weighted() {
        let cat = catalog();
        let p = profile_distribution(&UserProfile::uniform(1, [7]), &cat).unwrap();
        assert_eq!(p, dist(&[("Comedy", 0.5), ("Action", 0.5)]));

        let profile = UserProfile {
            user: 1,
            entries: vec![
                ProfileEntry {
                    item: 1,
                    weight: 3.0,
                    timestamp: 0,
                },
                ProfileEntry {
                    item: 2,
                    weight: 1.0,
                    timestamp: 1,
                },
            ],
        };
        assert_eq!(
            profile_distribution(&profile, &cat).unwrap(),
            dist(&[("A", 0.75), ("B", 0.25)])
        );
    }

    #[test]
    fn profile_missing_item() {
        let cat = catalog();
        assert!(matches!(
            profile_distribution(&UserProfile::uniform(1, [99]), &cat),
            Err(Error::MissingItem(99))
        ));
        assert!(profile_distribution(&UserProfile::uniform(1, []), &cat).is_err());
    }

    #[test]
    fn list_distributions() {
        let cat = catalog();
        let q = list_distribution(&[1, 2], &cat, RankWeighting::Uniform).unwrap();
        assert_eq!(q, dist(&[("A", 0.5), ("B", 0.5)]));

        // weights 1 and 1/log2(3)
        let w2 = 1.0 / 3f64.log2();
        let expected_a = 1.0 / (1.0 + w2);
        let q = list_distribution(&[1, 2], &cat, RankWeighting::Logarithmic).unwrap();
        assert!((q.prob("A") - expected_a).abs() < 1e-12);
        assert!((q.prob("A") - 0.6131).abs() < 1e-4);
        assert!((q.prob("B") - 0.3869).abs() < 1e-4);

        let q = list_distribution(&[3], &cat, RankWeighting::Logarithmic).unwrap();
        assert_eq!(q, dist(&[("A", 0.5), ("B", 0.5)]));
        assert!(list_distribution(&[], &cat, RankWeighting::Uniform).is_err());
    }

    #[test]
    fn js_cases() {
        let p = dist(&[("A", 0.5), ("B", 0.5)]);
        let q = dist(&[("A", 1.0)]);
        assert_eq!(js_divergence(&p, &p), 0.0);
        assert!((js_divergence(&dist(&[("A", 1.0)]), &dist(&[("B", 1.0)])) - 1.0).abs() < 1e-12);
        // m = (0.75, 0.25)
        let oracle = 0.5 * (0.5 * (0.5f64 / 0.75).log2() + 0.5 * (0.5f64 / 0.25).log2()) + 0.5 * (1.0f64 / 0.75).log2();
        assert!((js_divergence(&p, &q) - oracle).abs() < 1e-12);
        assert!((js_divergence(&p, &q) - 0.31128).abs() < 1e-4);
    }

    #[test]
    fn hellinger_cases() {
        let p = dist(&[("A", 0.5), ("B", 0.5)]);
        let q = dist(&[("A", 1.0)]);
        assert_eq!(hellinger_distance(&p, &p), 0.0);
        assert!((hellinger_distance(&dist(&[("A", 1.0)]), &dist(&[("B", 1.0)])) - 1.0).abs() < 1e-12);
        let oracle = (((0.5f64).sqrt() - 1.0).powi(2) + 0.5).sqrt() / 2f64.sqrt();
        assert!((hellinger_distance(&p, &q) - oracle).abs() < 1e-12);
        assert!((hellinger_distance(&p, &q) - 0.5412).abs() < 1e-4);
    }

    #[test]
    fn tv_cases() {
        let p = dist(&[("A", 0.7), ("B", 0.3)]);
        let q = dist(&[("A", 0.5), ("B", 0.5)]);
        assert_eq!(total_variation(&p, &p), 0.0);
        assert_eq!(total_variation(&dist(&[("A", 1.0)]), &dist(&[("B", 1.0)])), 2.0);
        assert!((total_variation(&p, &q) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn miscalibration_mean() {
        let m: BTreeMap<u64, f64> = [(1, 0.2), (2, 0.4)].into_iter().collect();
        assert!((miscalibration(&m).unwrap() - 0.3).abs() < 1e-15);
        let m: BTreeMap<u64, f64> = [(1, 0.15)].into_iter().collect();
        assert_eq!(miscalibration(&m).unwrap(), 0.15);
        let m: BTreeMap<u64, f64> = [(1, 0.0), (2, 0.0)].into_iter().collect();
        assert_eq!(miscalibration(&m).unwrap(), 0.0);
        assert!(miscalibration(&BTreeMap::new()).is_err());
    }

    #[test]
    fn rejects_unnormalized() {
        assert!(CategoryDistribution::from_pairs([("A", 0.5)]).is_err());
        assert!(CategoryDistribution::from_pairs([("A", 1.5), ("B", -0.5)]).is_err());
    }

    fn arb_dist() -> impl Strategy<Value = CategoryDistribution> {
        proptest::collection::vec(0.0f64..1.0, 4).prop_filter_map("zero mass", |raw| {
            let masses: BTreeMap<String, f64> = raw
                .iter()
                .enumerate()
                .filter(|(_, m)| **m > 0.05)
                .map(|(i, m)| (format!("c{i}"), *m))
                .collect();
            CategoryDistribution::from_masses(masses).ok()
        })
    }

    proptest! {
        #[test]
        fn divergence_properties(p in arb_dist(), q in arb_dist()) {
            let js = js_divergence(&p, &q);
            let h = hellinger_distance(&p, &q);
            let tv = total_variation(&p, &q);
            prop_assert!((js - js_divergence(&q, &p)).abs() < 1e-12);
            prop_assert!((h - hellinger_distance(&q, &p)).abs() < 1e-12);
            prop_assert!((tv - total_variation(&q, &p)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&js));
            prop_assert!((0.0..=1.0).contains(&h));
            prop_assert!((0.0..=2.0 + 1e-12).contains(&tv));
            prop_assert!(h * h <= 0.5 * tv + 1e-12);
            prop_assert!(0.5 * tv <= 1.0 + 1e-12);
            prop_assert!(js_divergence(&p, &p) < 1e-9 && hellinger_distance(&p, &p) < 1e-9);
            if tv > 1e-6 {
                prop_assert!(js > 0.0 && h > 0.0);
            }
        }

        #[test]
        fn uniform_list_matches_unit_profile(ids in proptest::collection::vec(1u64..8, 1..10)) {
            let cat = catalog();
            let q = list_distribution(&ids, &cat, RankWeighting::Uniform).unwrap();
            let p = profile_distribution(&UserProfile::uniform(0, ids.iter().copied()), &cat).unwrap();
            prop_assert!(total_variation(&p, &q) < 1e-12);
        }
    }
}
