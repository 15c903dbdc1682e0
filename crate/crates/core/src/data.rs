//! Ratings and item metadata ingest, per-user temporal split, weighted profiles.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{ItemId, UserId};

/// Genre label used by MovieLens for items without any genre.
pub const NO_GENRES: &str = "(no genres listed)";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    pub rating: f64,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Item {
    pub id: ItemId,
    /// Never empty.
    pub categories: BTreeSet<String>,
}

/// All items with at least one category, keyed by id.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    items: BTreeMap<ItemId, Item>,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts an item. Rejects empty category sets and duplicate ids.
    pub fn insert(&mut self, item: Item) -> Result<()> {
        if item.categories.is_empty() {
            return Err(Error::invalid(format!("item {} has no categories", item.id)));
        }
        if self.items.contains_key(&item.id) {
            return Err(Error::invalid(format!("duplicate item id {}", item.id)));
        }
        self.items.insert(item.id, item);
        Ok(())
    }

    pub fn get(&self, id: ItemId) -> Option<&Item> {
        self.items.get(&id)
    }

    pub fn contains(&self, id: ItemId) -> bool {
        self.items.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.items.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Item> {
        self.items.values()
    }

    /// Convenience constructor used heavily in tests.
    pub fn from_pairs<'a, I, C>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (ItemId, C)>,
        C: IntoIterator<Item = &'a str>,
    {
        let mut catalog = Catalog::new();
        for (id, cats) in pairs {
            catalog.insert(Item {
                id,
                categories: cats.into_iter().map(str::to_owned).collect(),
            })?;
        }
        Ok(catalog)
    }
}

/// Items dropped at ingest, with the reason.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExclusionReport {
    pub excluded: Vec<(ItemId, String)>,
}

impl ExclusionReport {
    pub fn is_empty(&self) -> bool {
        self.excluded.is_empty()
    }

    pub fn len(&self) -> usize {
        self.excluded.len()
    }

    /// One `item_id<TAB>reason` line per excluded item.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# excluded items: itemId\treason\n");
        for (id, reason) in &self.excluded {
            out.push_str(&format!("{id}\t{reason}\n"));
        }
        out
    }
}

#[derive(Debug, Deserialize)]
struct RatingRow {
    #[serde(rename = "userId")]
    user: String,
    #[serde(rename = "itemId", alias = "movieId")]
    item: String,
    rating: String,
    timestamp: String,
}

#[derive(Debug, Deserialize)]
struct ItemRow {
    #[serde(rename = "movieId", alias = "itemId")]
    item: String,
    #[allow(dead_code)]
    title: String,
    genres: String,
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

/// Reads every data row as `(line number, row)`.
pub(crate) fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<(u64, T)>> {
    let mut reader = csv_reader(path)?;
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(path, 1, e.to_string()))?
        .clone();
    let mut record = csv::StringRecord::new();
    let mut out = Vec::new();
    loop {
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {
                let line = record.position().map(|p| p.line()).unwrap_or(0);
                let row = record
                    .deserialize::<T>(Some(&headers))
                    .map_err(|e| Error::parse(path, line, e.to_string()))?;
                out.push((line, row));
            }
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                return Err(Error::parse(path, line, e.to_string()));
            }
        }
    }
    Ok(out)
}

pub(crate) fn parse_id(path: &Path, line: u64, field: &str, raw: &str) -> Result<u64> {
    raw.parse::<u64>()
        .map_err(|_| Error::parse(path, line, format!("{field} {raw:?} is not a non-negative integer")))
}

/// Reads a `userId,itemId,rating,timestamp` file. Row order is preserved.
pub fn load_interactions(path: impl AsRef<Path>) -> Result<Vec<Interaction>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (line, row) in read_rows::<RatingRow>(path)? {
        let user = parse_id(path, line, "userId", &row.user)?;
        let item = parse_id(path, line, "itemId", &row.item)?;
        let rating: f64 = row
            .rating
            .parse()
            .map_err(|_| Error::parse(path, line, format!("rating {:?} is not a number", row.rating)))?;
        if !(1.0..=5.0).contains(&rating) {
            return Err(Error::parse(path, line, format!("rating {rating} outside [1, 5]")));
        }
        let timestamp: i64 = row
            .timestamp
            .parse()
            .map_err(|_| Error::parse(path, line, format!("timestamp {:?} is not an integer", row.timestamp)))?;
        if timestamp < 0 {
            return Err(Error::parse(path, line, format!("negative timestamp {timestamp}")));
        }
        out.push(Interaction {
            user,
            item,
            rating,
            timestamp: timestamp as u64,
        });
    }
    Ok(out)
}

/// Reads a `movieId,title,genres` file with pipe-separated genres.
///
/// Items whose genre field is empty or `(no genres listed)` are left out of the
/// catalog and listed in the returned report.
pub fn load_item_categories(path: impl AsRef<Path>) -> Result<(Catalog, ExclusionReport)> {
    let path = path.as_ref();
    let mut catalog = Catalog::new();
    let mut seen = BTreeSet::new();
    let mut report = ExclusionReport::default();
    for (line, row) in read_rows::<ItemRow>(path)? {
        let id = parse_id(path, line, "movieId", &row.item)?;
        if !seen.insert(id) {
            return Err(Error::parse(path, line, format!("duplicate item id {id}")));
        }
        let categories: BTreeSet<String> = row
            .genres
            .split('|')
            .map(str::trim)
            .filter(|g| !g.is_empty() && *g != NO_GENRES)
            .map(str::to_owned)
            .collect();
        if categories.is_empty() {
            report.excluded.push((id, "no categories".to_owned()));
            continue;
        }
        catalog.insert(Item { id, categories })?;
    }
    Ok((catalog, report))
}

/// Train/test interactions plus the item catalog they refer to.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: Vec<Interaction>,
    pub test: Vec<Interaction>,
    pub items: Catalog,
    /// Users removed because one side of their split came out empty.
    pub dropped_users: Vec<UserId>,
}

impl SplitDataset {
    /// Train interactions grouped by user, in split order.
    pub fn train_by_user(&self) -> BTreeMap<UserId, Vec<&Interaction>> {
        group_by_user(&self.train)
    }

    pub fn test_by_user(&self) -> BTreeMap<UserId, Vec<&Interaction>> {
        group_by_user(&self.test)
    }

    /// Set of items each user has in train.
    pub fn train_items(&self) -> BTreeMap<UserId, BTreeSet<ItemId>> {
        let mut out: BTreeMap<UserId, BTreeSet<ItemId>> = BTreeMap::new();
        for it in &self.train {
            out.entry(it.user).or_default().insert(it.item);
        }
        out
    }

    pub fn test_items(&self) -> BTreeMap<UserId, BTreeSet<ItemId>> {
        let mut out: BTreeMap<UserId, BTreeSet<ItemId>> = BTreeMap::new();
        for it in &self.test {
            out.entry(it.user).or_default().insert(it.item);
        }
        out
    }

    pub fn users(&self) -> BTreeSet<UserId> {
        self.train.iter().map(|i| i.user).collect()
    }
}

fn group_by_user(rows: &[Interaction]) -> BTreeMap<UserId, Vec<&Interaction>> {
    let mut out: BTreeMap<UserId, Vec<&Interaction>> = BTreeMap::new();
    for it in rows {
        out.entry(it.user).or_default().push(it);
    }
    out
}

/// Per-user temporal split.
///
/// Each user's interactions are ordered by `(timestamp, item)`; the earliest
/// `ceil(train_fraction * n)` go to train and the rest to test. Users left with
/// an empty side are dropped.
pub fn temporal_split(interactions: &[Interaction], items: Catalog, train_fraction: f64) -> Result<SplitDataset> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut by_user: BTreeMap<UserId, Vec<Interaction>> = BTreeMap::new();
    for it in interactions {
        by_user.entry(it.user).or_default().push(*it);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut dropped_users = Vec::new();
    for (user, mut rows) in by_user {
        rows.sort_by_key(|r| (r.timestamp, r.item));
        let n = rows.len();
        // the epsilon keeps 0.7 * 10 from rounding up to 8
        let n_train = ((train_fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
        if n_train == 0 || n_train >= n {
            dropped_users.push(user);
            continue;
        }
        test.extend_from_slice(&rows[n_train..]);
        rows.truncate(n_train);
        train.extend(rows);
    }
    Ok(SplitDataset {
        train,
        test,
        items,
        dropped_users,
    })
}

/// How a profile entry's weight depends on how recently it was rated.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum RecencyWeighting {
    #[default]
    Uniform,
    /// `w = 2^(-rank / half_life)` with rank 0 for the most recent item.
    Exponential { half_life: f64 },
}

impl RecencyWeighting {
    pub fn weight(&self, recency_rank: usize) -> f64 {
        match *self {
            RecencyWeighting::Uniform => 1.0,
            RecencyWeighting::Exponential { half_life } => (-(recency_rank as f64) / half_life).exp2(),
        }
    }
}

impl FromStr for RecencyWeighting {
    type Err = Error;

    /// Accepts `uniform` or `exponential:<half_life>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("uniform") {
            return Ok(RecencyWeighting::Uniform);
        }
        if let Some(h) = s.strip_prefix("exponential:") {
            let half_life: f64 = h.parse().map_err(|_| Error::invalid(format!("bad half-life {h:?}")))?;
            if !(half_life > 0.0 && half_life.is_finite()) {
                return Err(Error::invalid("half-life must be positive"));
            }
            return Ok(RecencyWeighting::Exponential { half_life });
        }
        Err(Error::invalid(format!("unknown recency weighting {s:?}")))
    }
}

impl fmt::Display for RecencyWeighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecencyWeighting::Uniform => write!(f, "uniform"),
            RecencyWeighting::Exponential { half_life } => write!(f, "exponential:{half_life}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileEntry {
    pub item: ItemId,
    pub weight: f64,
    pub timestamp: u64,
}

/// A user's train-time history. Entries are in chronological order.
#[derive(Debug, Clone, PartialEq)]
pub struct UserProfile {
    pub user: UserId,
    pub entries: Vec<ProfileEntry>,
}

impl UserProfile {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Profile with unit weights over `items`.
    pub fn uniform(user: UserId, items: impl IntoIterator<Item = ItemId>) -> Self {
        UserProfile {
            user,
            entries: items
                .into_iter()
                .map(|item| ProfileEntry {
                    item,
                    weight: 1.0,
                    timestamp: 0,
                })
                .collect(),
        }
    }
}

/// Builds one profile per train user. Interactions on items missing from the
/// catalog are skipped; users left with nothing are omitted.
pub fn build_profiles(split: &SplitDataset, recency: RecencyWeighting) -> BTreeMap<UserId, UserProfile> {
    let mut out = BTreeMap::new();
    for (user, mut rows) in split.train_by_user() {
        rows.retain(|r| split.items.contains(r.item));
        if rows.is_empty() {
            continue;
        }
        rows.sort_by_key(|r| (r.timestamp, r.item));
        let n = rows.len();
        let entries = rows
            .iter()
            .enumerate()
            .map(|(idx, r)| ProfileEntry {
                item: r.item,
                weight: recency.weight(n - 1 - idx),
                timestamp: r.timestamp,
            })
            .collect();
        out.insert(user, UserProfile { user, entries });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn inter(user: u64, item: u64, ts: u64) -> Interaction {
        Interaction {
            user,
            item,
            rating: 4.0,
            timestamp: ts,
        }
    }

    #[test]
    fn parses_rating_row() {
        let f = write_tmp("userId,itemId,rating,timestamp\n1,31,2.5,1260759144\n");
        let rows = load_interactions(f.path()).unwrap();
        assert_eq!(
            rows,
            vec![Interaction {
                user: 1,
                item: 31,
                rating: 2.5,
                timestamp: 1260759144
            }]
        );
    }

    #[test]
    fn empty_ratings_file() {
        let f = write_tmp("userId,itemId,rating,timestamp\n");
        assert!(load_interactions(f.path()).unwrap().is_empty());
    }

    #[test]
    fn out_of_range_rating_names_line() {
        let f = write_tmp("userId,itemId,rating,timestamp\n1,2,3.0,10\n1,3,7.0,11\n");
        let err = load_interactions(f.path()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_row_names_line() {
        let f = write_tmp("userId,itemId,rating,timestamp\n1,2,3.0,10\n1,x,3.0,11\n");
        match load_interactions(f.path()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let f = write_tmp("userId,itemId,rating,timestamp\n1,2,3.0\n");
        assert!(matches!(load_interactions(f.path()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn item_rows_and_exclusions() {
        let f = write_tmp(
            "movieId,title,genres\n1,Toy Story (1995),Adventure|Animation|Comedy\n\
             2,\"Lost, Film\",(no genres listed)\n3,Other,\n",
        );
        let (catalog, report) = load_item_categories(f.path()).unwrap();
        let item = catalog.get(1).unwrap();
        let expected: BTreeSet<String> = ["Adventure", "Animation", "Comedy"]
            .into_iter()
            .map(String::from)
            .collect();
        assert_eq!(item.categories, expected);
        assert_eq!(catalog.len(), 1);
        assert_eq!(report.excluded.iter().map(|e| e.0).collect::<Vec<_>>(), vec![2, 3]);
        assert!(report.to_text().contains("2\tno categories"));
    }

    #[test]
    fn duplicate_item_rejected() {
        let f = write_tmp("movieId,title,genres\n1,A,Comedy\n1,B,Drama\n");
        assert!(matches!(
            load_item_categories(f.path()),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn split_ten_interactions() {
        let rows: Vec<_> = (0..10).map(|i| inter(1, 100 + i, 1000 - i)).collect();
        let split = temporal_split(&rows, Catalog::new(), 0.8).unwrap();
        assert_eq!(split.train.len(), 8);
        assert_eq!(split.test.len(), 2);
        let min_test = split.test.iter().map(|r| r.timestamp).min().unwrap();
        let max_train = split.train.iter().map(|r| r.timestamp).max().unwrap();
        assert!(max_train <= min_test);
        // the two latest timestamps (1000, 999) belong to items 100 and 101
        let mut test_items: Vec<_> = split.test.iter().map(|r| r.item).collect();
        test_items.sort();
        assert_eq!(test_items, vec![100, 101]);
    }

    #[test]
    fn split_drops_single_interaction_user() {
        let mut rows = vec![inter(1, 1, 5)];
        rows.extend((0..5).map(|i| inter(2, i, 10 + i)));
        let split = temporal_split(&rows, Catalog::new(), 0.8).unwrap();
        assert_eq!(split.dropped_users, vec![1]);
        assert_eq!(split.train.len(), 4);
        assert_eq!(split.test.len(), 1);
    }

    #[test]
    fn split_tie_broken_by_item_id() {
        // 5 interactions, ceil(0.8 * 5) = 4 in train; items 7 and 3 share the last timestamp
        let rows = vec![
            inter(1, 1, 1),
            inter(1, 2, 2),
            inter(1, 4, 3),
            inter(1, 7, 4),
            inter(1, 3, 4),
        ];
        let split = temporal_split(&rows, Catalog::new(), 0.8).unwrap();
        assert_eq!(split.test.iter().map(|r| r.item).collect::<Vec<_>>(), vec![7]);
    }

    #[test]
    fn split_rounding_guard() {
        let rows: Vec<_> = (0..10).map(|i| inter(1, i, i)).collect();
        let split = temporal_split(&rows, Catalog::new(), 0.7).unwrap();
        assert_eq!(split.train.len(), 7);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        assert!(temporal_split(&[], Catalog::new(), 1.0).is_err());
        assert!(temporal_split(&[], Catalog::new(), 0.0).is_err());
    }

    #[test]
    fn profile_weights() {
        let catalog = Catalog::from_pairs([(1, ["A"]), (2, ["B"]), (3, ["A"])]).unwrap();
        let split = SplitDataset {
            train: vec![inter(9, 1, 10), inter(9, 2, 20), inter(9, 3, 30)],
            test: vec![],
            items: catalog,
            dropped_users: vec![],
        };
        let uniform = build_profiles(&split, RecencyWeighting::Uniform);
        let w: Vec<f64> = uniform[&9].entries.iter().map(|e| e.weight).collect();
        assert_eq!(w, vec![1.0, 1.0, 1.0]);

        let exp = build_profiles(&split, "exponential:1".parse().unwrap());
        // chronological order; the most recent (item 3) has recency rank 0
        let w: Vec<(u64, f64)> = exp[&9].entries.iter().map(|e| (e.item, e.weight)).collect();
        assert_eq!(w, vec![(1, 0.25), (2, 0.5), (3, 1.0)]);
        assert!(!uniform.contains_key(&10));
    }

    #[test]
    fn unknown_recency_scheme() {
        assert!("linear".parse::<RecencyWeighting>().is_err());
        assert!("exponential:-1".parse::<RecencyWeighting>().is_err());
        assert_eq!(
            "uniform".parse::<RecencyWeighting>().unwrap(),
            RecencyWeighting::Uniform
        );
    }

    proptest! {
        #[test]
        fn split_respects_per_user_time_order(
            rows in proptest::collection::vec((0u64..6, 0u64..40, 0u64..50), 0..120),
            frac in 0.05f64..0.95,
        ) {
            let rows: Vec<_> = rows.into_iter().map(|(u, i, t)| inter(u, i, t)).collect();
            let split = temporal_split(&rows, Catalog::new(), frac).unwrap();
            let train = split.train_by_user();
            let test = split.test_by_user();
            prop_assert_eq!(train.keys().collect::<Vec<_>>(), test.keys().collect::<Vec<_>>());
            for (user, tr) in &train {
                let te = &test[user];
                let max_tr = tr.iter().map(|r| (r.timestamp, r.item)).max().unwrap();
                let min_te = te.iter().map(|r| (r.timestamp, r.item)).min().unwrap();
                prop_assert!(max_tr <= min_te);
            }
            let kept = split.train.len() + split.test.len();
            let dropped = rows.iter().filter(|r| split.dropped_users.contains(&r.user)).count();
            prop_assert_eq!(kept + dropped, rows.len());
        }

        #[test]
        fn profile_sizes_match_train(
            rows in proptest::collection::vec((0u64..5, 0u64..12, 0u64..30), 1..80),
        ) {
            // items >= 8 are missing from the catalog
            let catalog = Catalog::from_pairs((0..8).map(|i| (i, ["G"]))).unwrap();
            let rows: Vec<_> = rows.into_iter().map(|(u, i, t)| inter(u, i, t)).collect();
            let split = temporal_split(&rows, catalog, 0.8).unwrap();
            let profiles = build_profiles(&split, RecencyWeighting::Uniform);
            let total: usize = profiles.values().map(|p| p.len()).sum();
            let excluded = split.train.iter().filter(|r| r.item >= 8).count();
            prop_assert_eq!(total, split.train.len() - excluded);
            prop_assert!(profiles.values().all(|p| !p.is_empty()));
        }
    }
}
