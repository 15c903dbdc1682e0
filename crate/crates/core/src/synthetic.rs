//! Seeded MovieLens-shaped data: a genre-tagged catalog with skewed item
//! popularity, users with heavy-tailed activity, and tastes that drift over time.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Interaction;
use crate::error::{Error, Result};
use crate::ItemId;

pub const GENRES: [&str; 18] = [
    "Action",
    "Adventure",
    "Animation",
    "Children",
    "Comedy",
    "Crime",
    "Documentary",
    "Drama",
    "Fantasy",
    "Film-Noir",
    "Horror",
    "Musical",
    "Mystery",
    "Romance",
    "Sci-Fi",
    "Thriller",
    "War",
    "Western",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub min_profile: usize,
    pub max_profile: usize,
    /// Share of the taste that moves to a new genre by the user's last interaction.
    pub drift: f64,
    /// Items written with no genres, to exercise ingest exclusions.
    pub untagged_items: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 50,
            n_items: 600,
            min_profile: 15,
            max_profile: 300,
            drift: 0.5,
            untagged_items: 2,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticMovie {
    pub id: ItemId,
    pub title: String,
    /// Empty for untagged items.
    pub genres: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub movies: Vec<SyntheticMovie>,
    pub ratings: Vec<Interaction>,
}

fn weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    WeightedIndex::new(weights)
        .expect("weights have positive mass")
        .sample(rng)
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    if cfg.n_users == 0 || cfg.n_items == 0 {
        return Err(Error::invalid("synthetic data needs users and items"));
    }
    if cfg.min_profile == 0 || cfg.min_profile > cfg.max_profile || cfg.max_profile > cfg.n_items {
        return Err(Error::invalid("profile bounds must satisfy 1 <= min <= max <= n_items"));
    }
    if !(0.0..=1.0).contains(&cfg.drift) {
        return Err(Error::invalid("drift must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_genres = GENRES.len();
    let genre_weight: Vec<f64> = (0..n_genres).map(|g| 1.0 / (g as f64 + 1.0).powf(0.8)).collect();

    let mut order: Vec<usize> = (0..cfg.n_items).collect();
    order.shuffle(&mut rng);
    let mut popularity = vec![0.0; cfg.n_items];
    for (rank, &idx) in order.iter().enumerate() {
        popularity[idx] = 1.0 / (rank as f64 + 1.0).powf(0.9);
    }

    let mut item_genres: Vec<BTreeSet<usize>> = Vec::with_capacity(cfg.n_items);
    for _ in 0..cfg.n_items {
        let n = 1 + weighted(&mut rng, &[0.5, 0.35, 0.15]);
        let mut set = BTreeSet::new();
        while set.len() < n {
            set.insert(weighted(&mut rng, &genre_weight));
        }
        item_genres.push(set);
    }
    let by_genre: Vec<Vec<usize>> = (0..n_genres)
        .map(|g| (0..cfg.n_items).filter(|&i| item_genres[i].contains(&g)).collect())
        .collect();

    let mut movies: Vec<SyntheticMovie> = (0..cfg.n_items)
        .map(|i| SyntheticMovie {
            id: i as ItemId + 1,
            title: format!("Movie {} ({})", i + 1, 1950 + rng.random_range(0..70)),
            genres: item_genres[i].iter().map(|&g| GENRES[g].to_string()).collect(),
        })
        .collect();
    for j in 0..cfg.untagged_items {
        movies.push(SyntheticMovie {
            id: (cfg.n_items + j) as ItemId + 1,
            title: format!("Untitled, part {}", j + 1),
            genres: Vec::new(),
        });
    }

    let (lo, hi) = ((cfg.min_profile as f64).ln(), (cfg.max_profile as f64).ln());
    let mut ratings = Vec::new();
    for u in 0..cfg.n_users {
        let user = u as u64 + 1;
        let size = (rng.random_range(lo..=hi).exp().floor() as usize).clamp(cfg.min_profile, cfg.max_profile);
        let mut taste: Vec<f64> = genre_weight.iter().map(|w| 0.3 * w).collect();
        for _ in 0..3 {
            taste[weighted(&mut rng, &genre_weight)] += rng.random_range(0.5..2.0);
        }
        let total: f64 = taste.iter().sum();
        taste.iter_mut().for_each(|t| *t /= total);
        let new_genre = rng.random_range(0..n_genres);

        let mut seen = BTreeSet::new();
        let start = 978_300_000 + rng.random_range(0..30_000_000u64);
        let mut ts = start;
        for step in 0..size {
            let shift = cfg.drift * step as f64 / size as f64;
            let mut current: Vec<f64> = taste.iter().map(|t| (1.0 - shift) * t).collect();
            current[new_genre] += shift;
            let genre = weighted(&mut rng, &current);
            let pool: Vec<usize> = by_genre[genre].iter().copied().filter(|i| !seen.contains(i)).collect();
            let pool = if pool.is_empty() {
                (0..cfg.n_items).filter(|i| !seen.contains(i)).collect()
            } else {
                pool
            };
            let weights: Vec<f64> = pool.iter().map(|&i| popularity[i]).collect();
            let item = pool[weighted(&mut rng, &weights)];
            seen.insert(item);
            ts += rng.random_range(60..86_400);
            ratings.push(Interaction {
                user,
                item: item as ItemId + 1,
                rating: 1.0 + 0.5 * rng.random_range(0..9) as f64,
                timestamp: ts,
            });
        }
        if cfg.untagged_items > 0 && u % 10 == 0 {
            ts += 1;
            ratings.push(Interaction {
                user,
                item: cfg.n_items as ItemId + 1,
                rating: 3.0,
                timestamp: ts,
            });
        }
    }
    Ok(SyntheticData { movies, ratings })
}

impl SyntheticData {
    /// Writes `ratings.csv` and `movies.csv` in the MovieLens layout.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ratings_path = dir.join("ratings.csv");
        let movies_path = dir.join("movies.csv");

        let mut w = csv::Writer::from_path(&ratings_path).map_err(|e| csv_error(&ratings_path, e))?;
        w.write_record(["userId", "movieId", "rating", "timestamp"])
            .map_err(|e| csv_error(&ratings_path, e))?;
        for r in &self.ratings {
            w.write_record([
                r.user.to_string(),
                r.item.to_string(),
                format!("{:.1}", r.rating),
                r.timestamp.to_string(),
            ])
            .map_err(|e| csv_error(&ratings_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&ratings_path, e))?;

        let mut w = csv::Writer::from_path(&movies_path).map_err(|e| csv_error(&movies_path, e))?;
        w.write_record(["movieId", "title", "genres"])
            .map_err(|e| csv_error(&movies_path, e))?;
        for m in &self.movies {
            let genres = if m.genres.is_empty() {
                "(no genres listed)".to_string()
            } else {
                m.genres.join("|")
            };
            w.write_record([m.id.to_string(), m.title.clone(), genres])
                .map_err(|e| csv_error(&movies_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&movies_path, e))?;
        Ok((ratings_path, movies_path))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}
