//! Relevance scorers and per-user top-N candidate pools.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Deserialize;

use crate::data::{parse_id, read_rows, Catalog, SplitDataset};
use crate::error::{Error, Result};
use crate::{ItemId, UserId};

/// Something that can score (user, item) pairs.
pub trait Scorer: Sync {
    fn score(&self, user: UserId, item: ItemId) -> Option<f64>;

    /// Every scored catalog item for `user`. Order is unspecified.
    fn scores_for(&self, user: UserId, catalog: &Catalog) -> Vec<(ItemId, f64)>;
}

/// Scores every item by its train interaction count.
#[derive(Debug, Clone)]
pub struct MostPopular {
    counts: BTreeMap<ItemId, usize>,
}

pub fn most_popular_scores(split: &SplitDataset) -> Result<MostPopular> {
    if split.train.is_empty() {
        return Err(Error::invalid("popularity scorer needs train interactions"));
    }
    let mut counts = BTreeMap::new();
    for it in &split.train {
        *counts.entry(it.item).or_insert(0) += 1;
    }
    Ok(MostPopular { counts })
}

impl Scorer for MostPopular {
    fn score(&self, _user: UserId, item: ItemId) -> Option<f64> {
        Some(self.counts.get(&item).copied().unwrap_or(0) as f64)
    }

    fn scores_for(&self, user: UserId, catalog: &Catalog) -> Vec<(ItemId, f64)> {
        catalog.ids().map(|i| (i, self.score(user, i).unwrap_or(0.0))).collect()
    }
}

/// Item-based nearest neighbours on the binary "rated" matrix.
///
/// `sim(i, j) = |U_i ∩ U_j| / sqrt(|U_i| |U_j|)`; a user's score for `i` sums
/// the `k` largest similarities between `i` and the items in their profile.
#[derive(Debug, Clone)]
pub struct ItemKnn {
    k_neighbors: usize,
    index_of: HashMap<ItemId, usize>,
    item_ids: Vec<ItemId>,
    /// Distinct raters per item index, ascending.
    raters: Vec<Vec<u32>>,
    /// Distinct items per user, ascending by index.
    user_items: BTreeMap<UserId, Vec<u32>>,
    users_by_index: Vec<UserId>,
}

pub fn item_knn_scores(split: &SplitDataset, k_neighbors: usize) -> Result<ItemKnn> {
    if k_neighbors < 1 {
        return Err(Error::invalid("k_neighbors must be at least 1"));
    }
    if split.train.is_empty() {
        return Err(Error::invalid("item-KNN scorer needs train interactions"));
    }
    let pairs: BTreeSet<(UserId, ItemId)> = split.train.iter().map(|r| (r.user, r.item)).collect();
    let item_ids: Vec<ItemId> = pairs.iter().map(|p| p.1).collect::<BTreeSet<_>>().into_iter().collect();
    let index_of: HashMap<ItemId, usize> = item_ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let users_by_index: Vec<UserId> = pairs.iter().map(|p| p.0).collect::<BTreeSet<_>>().into_iter().collect();
    let user_index: HashMap<UserId, u32> = users_by_index.iter().enumerate().map(|(i, u)| (*u, i as u32)).collect();
    let mut raters = vec![Vec::new(); item_ids.len()];
    let mut user_items: BTreeMap<UserId, Vec<u32>> = BTreeMap::new();
    for (user, item) in &pairs {
        let idx = index_of[item];
        raters[idx].push(user_index[user]);
        user_items.entry(*user).or_default().push(idx as u32);
    }
    for list in user_items.values_mut() {
        list.sort_unstable();
    }
    Ok(ItemKnn {
        k_neighbors,
        index_of,
        item_ids,
        raters,
        user_items,
        users_by_index,
    })
}

impl ItemKnn {
    /// Cosine similarity between two items' rater sets.
    pub fn similarity(&self, a: ItemId, b: ItemId) -> f64 {
        let (Some(&ia), Some(&ib)) = (self.index_of.get(&a), self.index_of.get(&b)) else {
            return 0.0;
        };
        let (ra, rb) = (&self.raters[ia], &self.raters[ib]);
        let (mut x, mut y, mut common) = (0, 0, 0usize);
        while x < ra.len() && y < rb.len() {
            match ra[x].cmp(&rb[y]) {
                std::cmp::Ordering::Less => x += 1,
                std::cmp::Ordering::Greater => y += 1,
                std::cmp::Ordering::Equal => {
                    common += 1;
                    x += 1;
                    y += 1;
                }
            }
        }
        cosine(common, ra.len(), rb.len())
    }

    /// Similarities of every co-rated item to each profile item, grouped by
    /// target item index.
    fn neighbour_sims(&self, user: UserId) -> HashMap<usize, Vec<f64>> {
        let mut out: HashMap<usize, Vec<f64>> = HashMap::new();
        let Some(profile) = self.user_items.get(&user) else {
            return out;
        };
        let mut counts: HashMap<u32, usize> = HashMap::new();
        for &j in profile {
            counts.clear();
            for &v in &self.raters[j as usize] {
                let other = self.users_by_index[v as usize];
                for &i in &self.user_items[&other] {
                    if i != j {
                        *counts.entry(i).or_insert(0) += 1;
                    }
                }
            }
            let nj = self.raters[j as usize].len();
            for (&i, &c) in &counts {
                let ni = self.raters[i as usize].len();
                out.entry(i as usize).or_default().push(cosine(c, ni, nj));
            }
        }
        out
    }

    fn top_k_sum(&self, sims: &mut [f64]) -> f64 {
        sims.sort_unstable_by(|a, b| b.total_cmp(a));
        // sum in descending order so the result does not depend on hash order
        sims.iter().take(self.k_neighbors).sum()
    }
}

fn cosine(common: usize, na: usize, nb: usize) -> f64 {
    if common == 0 || na == 0 || nb == 0 {
        0.0
    } else if na == nb && common == na {
        1.0
    } else {
        common as f64 / ((na * nb) as f64).sqrt()
    }
}

impl Scorer for ItemKnn {
    fn score(&self, user: UserId, item: ItemId) -> Option<f64> {
        let Some(profile) = self.user_items.get(&user) else {
            return Some(0.0);
        };
        let mut sims: Vec<f64> = profile
            .iter()
            .map(|&j| self.item_ids[j as usize])
            .filter(|&j| j != item)
            .map(|j| self.similarity(item, j))
            .collect();
        Some(self.top_k_sum(&mut sims))
    }

    fn scores_for(&self, user: UserId, catalog: &Catalog) -> Vec<(ItemId, f64)> {
        let mut sims = self.neighbour_sims(user);
        catalog
            .ids()
            .map(|id| {
                let score = match self.index_of.get(&id).and_then(|idx| sims.get_mut(idx)) {
                    Some(list) => self.top_k_sum(list),
                    None => 0.0,
                };
                (id, score)
            })
            .collect()
    }
}

/// Scores read from a file; pairs not in the file have no score.
#[derive(Debug, Clone, Default)]
pub struct ImportedScores {
    scores: BTreeMap<UserId, BTreeMap<ItemId, f64>>,
}

#[derive(Debug, Deserialize)]
struct ScoreRow {
    #[serde(rename = "userId")]
    user: String,
    #[serde(rename = "itemId", alias = "movieId")]
    item: String,
    score: String,
}

/// Reads `userId,itemId,score` (extra columns such as `rank` are ignored).
pub fn import_scores(path: impl AsRef<Path>) -> Result<ImportedScores> {
    let path = path.as_ref();
    let mut scores: BTreeMap<UserId, BTreeMap<ItemId, f64>> = BTreeMap::new();
    for (line, row) in read_rows::<ScoreRow>(path)? {
        let user = parse_id(path, line, "userId", &row.user)?;
        let item = parse_id(path, line, "itemId", &row.item)?;
        let score: f64 = row
            .score
            .parse()
            .ok()
            .filter(|s: &f64| s.is_finite())
            .ok_or_else(|| Error::parse(path, line, format!("score {:?} is not a finite number", row.score)))?;
        if scores.entry(user).or_default().insert(item, score).is_some() {
            return Err(Error::parse(
                path,
                line,
                format!("duplicate score for user {user}, item {item}"),
            ));
        }
    }
    Ok(ImportedScores { scores })
}

impl Scorer for ImportedScores {
    fn score(&self, user: UserId, item: ItemId) -> Option<f64> {
        self.scores.get(&user)?.get(&item).copied()
    }

    fn scores_for(&self, user: UserId, catalog: &Catalog) -> Vec<(ItemId, f64)> {
        self.scores
            .get(&user)
            .map(|m| {
                m.iter()
                    .filter(|(i, _)| catalog.contains(**i))
                    .map(|(i, s)| (*i, *s))
                    .collect()
            })
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub item: ItemId,
    pub score: f64,
}

/// A user's candidate pool, best first, ties by item id.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateList {
    pub user: UserId,
    pub candidates: Vec<Candidate>,
}

impl CandidateList {
    pub fn items(&self) -> Vec<ItemId> {
        self.candidates.iter().map(|c| c.item).collect()
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Output of candidate generation.
#[derive(Debug, Clone, Default)]
pub struct CandidatePools {
    pub lists: BTreeMap<UserId, CandidateList>,
    /// Users who received fewer than N candidates.
    pub short_users: Vec<UserId>,
    /// Users with nothing to recommend; absent from `lists`.
    pub empty_users: Vec<UserId>,
}

pub fn sort_candidates(candidates: &mut [Candidate]) {
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.item.cmp(&b.item)));
}

/// The N best-scored catalog items per train user, excluding the user's
/// own train items.
pub fn top_n_candidates(scorer: &dyn Scorer, split: &SplitDataset, n: usize) -> Result<CandidatePools> {
    if n < 1 {
        return Err(Error::invalid("candidate pool size N must be at least 1"));
    }
    let seen = split.train_items();
    let lists: Vec<(UserId, Vec<Candidate>)> = seen
        .par_iter()
        .map(|(user, train_items)| {
            let mut candidates: Vec<Candidate> = scorer
                .scores_for(*user, &split.items)
                .into_iter()
                .filter(|(item, _)| !train_items.contains(item))
                .map(|(item, score)| Candidate { item, score })
                .collect();
            sort_candidates(&mut candidates);
            candidates.truncate(n);
            (*user, candidates)
        })
        .collect();
    let mut pools = CandidatePools::default();
    for (user, candidates) in lists {
        if candidates.is_empty() {
            pools.empty_users.push(user);
            continue;
        }
        if candidates.len() < n {
            pools.short_users.push(user);
        }
        pools.lists.insert(user, CandidateList { user, candidates });
    }
    Ok(pools)
}

/// `userId,itemId,score,rank` with 1-based rank. Scores use shortest
/// round-trip formatting so re-importing reproduces them exactly.
pub fn candidates_csv(pools: &CandidatePools) -> String {
    let mut out = String::from("userId,itemId,score,rank\n");
    for list in pools.lists.values() {
        for (idx, c) in list.candidates.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{}", list.user, c.item, c.score, idx + 1);
        }
    }
    out
}
