//! The end-to-end pipeline: ingest, split, score, build candidate pools,
//! weigh confidence, re-rank with each engine, evaluate, and write artifacts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::confidence::{
    assign_user_groups, confidence_weight, oracle_analysis, oracle_csv, ConfidenceWeights, OracleGroupRow,
    UserGroupAssignment,
};
use crate::data::{
    build_profiles, load_interactions, load_item_categories, parse_id, read_rows, temporal_split, ExclusionReport,
    RecencyWeighting, SplitDataset,
};
use crate::distribution::{list_distribution, profile_distribution, CategoryDistribution, Divergence, RankWeighting};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, ndcg_at_k, ranked_lists, EvalReport};
use crate::rerank::{
    build_problem, rerank_all, solutions_csv, Engine, RerankProblem, RerankSolution, SolveStatus, SolverBudget,
};
use crate::scoring::{import_scores, item_knn_scores, most_popular_scores, top_n_candidates, CandidatePools, Scorer};
use crate::{ItemId, UserId};

/// Floor applied to miscalibration before taking the nDCG / MC ratio.
pub const MC_FLOOR: f64 = 1e-6;

pub const DEFAULT_LAMBDA_GRID: [f64; 9] = [0.0, 1.0, 3.0, 10.0, 30.0, 100.0, 300.0, 1000.0, 3000.0];

/// Where relevance scores come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ScorerSpec {
    Popularity,
    ItemKnn { neighbors: usize },
    Import { path: PathBuf },
}

impl Default for ScorerSpec {
    fn default() -> Self {
        ScorerSpec::ItemKnn { neighbors: 50 }
    }
}

impl FromStr for ScorerSpec {
    type Err = Error;

    /// `popularity`, `item-knn`, `item-knn:<k>` or `import:<path>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("popularity") {
            return Ok(ScorerSpec::Popularity);
        }
        if s.eq_ignore_ascii_case("item-knn") {
            return Ok(ScorerSpec::default());
        }
        if let Some(k) = s.strip_prefix("item-knn:") {
            let neighbors: usize = k
                .parse()
                .map_err(|_| Error::invalid(format!("bad neighbour count {k:?}")))?;
            if neighbors == 0 {
                return Err(Error::invalid("item-knn needs at least one neighbour"));
            }
            return Ok(ScorerSpec::ItemKnn { neighbors });
        }
        if let Some(path) = s.strip_prefix("import:") {
            return Ok(ScorerSpec::Import { path: path.into() });
        }
        Err(Error::invalid(format!("unknown scorer {s:?}")))
    }
}

impl fmt::Display for ScorerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScorerSpec::Popularity => write!(f, "popularity"),
            ScorerSpec::ItemKnn { neighbors } => write!(f, "item-knn:{neighbors}"),
            ScorerSpec::Import { path } => write!(f, "import:{}", path.display()),
        }
    }
}

/// Serde through `FromStr` / `Display`, so config files use the same spellings as flags.
mod via_str {
    use std::fmt::Display;
    use std::str::FromStr;

    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<T: Display, S: Serializer>(value: &T, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(value)
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub ratings: PathBuf,
    pub items: PathBuf,
    pub train_fraction: f64,
    pub n_candidates: usize,
    pub k: usize,
    #[serde(with = "via_str")]
    pub scorer: ScorerSpec,
    pub engines: Vec<Engine>,
    #[serde(with = "via_str")]
    pub recency: RecencyWeighting,
    #[serde(with = "via_str")]
    pub rank_weighting: RankWeighting,
    pub lambda_grid: Vec<f64>,
    /// Divergence used for miscalibration in the sweep ratio.
    #[serde(with = "via_str")]
    pub divergence: Divergence,
    pub max_nodes: u64,
    pub max_seconds: f64,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Fail when any user's solve stops on the budget.
    pub strict: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let budget = SolverBudget::default();
        Self {
            ratings: PathBuf::from("ratings.csv"),
            items: PathBuf::from("movies.csv"),
            train_fraction: 0.8,
            n_candidates: 100,
            k: 20,
            scorer: ScorerSpec::default(),
            engines: Engine::ALL.to_vec(),
            recency: RecencyWeighting::Uniform,
            rank_weighting: RankWeighting::Uniform,
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            divergence: Divergence::Js,
            max_nodes: budget.max_nodes,
            max_seconds: budget.max_seconds,
            output_dir: PathBuf::from("out"),
            seed: 42,
            strict: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    pub fn budget(&self) -> Result<SolverBudget> {
        SolverBudget::new(self.max_nodes, self.max_seconds)
    }

    pub fn validate(&self) -> Result<()> {
        for path in [&self.ratings, &self.items] {
            if !path.is_file() {
                return Err(Error::invalid(format!("{} does not exist", path.display())));
            }
        }
        if let ScorerSpec::Import { path } = &self.scorer {
            if !path.is_file() {
                return Err(Error::invalid(format!("{} does not exist", path.display())));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::invalid("train_fraction must lie in (0, 1)"));
        }
        if self.k == 0 || self.n_candidates < self.k {
            return Err(Error::invalid("need 1 <= K <= N"));
        }
        if self.engines.is_empty() {
            return Err(Error::invalid("no engines requested"));
        }
        if self.lambda_grid.is_empty() {
            return Err(Error::invalid("lambda grid is empty"));
        }
        if self.lambda_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::invalid("lambda grid values must be finite and non-negative"));
        }
        self.budget()?;
        Ok(())
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

/// Everything the engines share: one split, one set of candidate pools.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub item_exclusions: ExclusionReport,
    /// Interactions dropped because their item is not in the catalog.
    pub dropped_interactions: usize,
    pub split: SplitDataset,
    pub profiles: BTreeMap<UserId, CategoryDistribution>,
    pub pools: CandidatePools,
    /// Users that are re-ranked and evaluated.
    pub users: Vec<UserId>,
    pub skipped_users: Vec<(UserId, String)>,
    pub weights: ConfidenceWeights,
    pub groups: UserGroupAssignment,
}

fn build_scorer(spec: &ScorerSpec, split: &SplitDataset) -> Result<Box<dyn Scorer>> {
    Ok(match spec {
        ScorerSpec::Popularity => Box::new(most_popular_scores(split)?),
        ScorerSpec::ItemKnn { neighbors } => Box::new(item_knn_scores(split, *neighbors)?),
        ScorerSpec::Import { path } => Box::new(import_scores(path)?),
    })
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let (catalog, item_exclusions) = stage("ingest", load_item_categories(&config.items))?;
    let all = stage("ingest", load_interactions(&config.ratings))?;
    let total = all.len();
    let interactions: Vec<_> = all.into_iter().filter(|i| catalog.contains(i.item)).collect();
    let dropped_interactions = total - interactions.len();

    let split = stage("split", temporal_split(&interactions, catalog, config.train_fraction))?;
    let profile_rows = build_profiles(&split, config.recency);
    let scorer = stage("score", build_scorer(&config.scorer, &split))?;
    let pools = stage(
        "candidates",
        top_n_candidates(scorer.as_ref(), &split, config.n_candidates),
    )?;

    let mut skipped_users: Vec<(UserId, String)> = split
        .dropped_users
        .iter()
        .map(|u| (*u, "empty train or test side after split".to_string()))
        .collect();
    let test_users: BTreeSet<UserId> = split.test_items().keys().copied().collect();
    let mut users = Vec::new();
    let mut profiles = BTreeMap::new();
    let mut sizes = BTreeMap::new();
    for (user, profile) in &profile_rows {
        let reason = match pools.lists.get(user) {
            None => Some("no candidates".to_string()),
            Some(list) if list.len() < config.k => Some(format!("only {} candidates", list.len())),
            Some(_) if !test_users.contains(user) => Some("no test items".to_string()),
            Some(_) => None,
        };
        if let Some(reason) = reason {
            skipped_users.push((*user, reason));
            continue;
        }
        let dist = stage("profiles", profile_distribution(profile, &split.items))?;
        profiles.insert(*user, dist);
        sizes.insert(*user, profile.len());
        users.push(*user);
    }
    skipped_users.sort();
    let weights = stage("confidence", confidence_weight(&sizes))?;
    let groups = stage("confidence", assign_user_groups(&sizes))?;
    Ok(Prepared {
        config: config.clone(),
        item_exclusions,
        dropped_interactions,
        split,
        profiles,
        pools,
        users,
        skipped_users,
        weights,
        groups,
    })
}

impl Prepared {
    /// One problem per evaluated user. `cl` and `greedy` calibrate every
    /// slot; `ccl` sizes the calibration subset by confidence.
    pub fn problems(&self, engine: Engine, lambda: f64) -> Result<Vec<RerankProblem>> {
        let n = self.users.len();
        self.users
            .iter()
            .map(|u| {
                let weight = match engine {
                    Engine::Ccl => self.weights.get(*u).unwrap_or(0.0),
                    _ => 1.0,
                };
                build_problem(
                    *u,
                    &self.pools.lists[u],
                    &self.split.items,
                    &self.profiles[u],
                    self.config.k,
                    weight,
                    lambda,
                    n,
                )
                .map_err(|e| Error::User {
                    user: *u,
                    source: Box::new(e),
                })
            })
            .collect()
    }

    pub fn solve(&self, engine: Engine, lambda: f64) -> Result<BTreeMap<UserId, RerankSolution>> {
        let problems = stage("rerank", self.problems(engine, lambda))?;
        stage("rerank", rerank_all(&problems, engine, &self.config.budget()?))
    }

    /// Lists for every evaluated user, checked against the user set.
    fn evaluate_lists(&self, lists: &BTreeMap<Engine, BTreeMap<UserId, Vec<ItemId>>>) -> Result<EvalReport> {
        stage(
            "evaluate",
            evaluate(
                lists,
                &self.split,
                &self.profiles,
                &self.groups,
                self.config.rank_weighting,
                self.config.k,
            ),
        )
    }

    pub fn oracle(&self) -> Vec<OracleGroupRow> {
        oracle_analysis(&self.split, &self.groups)
    }

    pub fn exclusions_text(&self) -> String {
        let mut out = self.item_exclusions.to_text();
        let _ = writeln!(
            out,
            "# interactions on items outside the catalog: {}",
            self.dropped_interactions
        );
        out.push_str("# skipped users: userId\treason\n");
        for (u, reason) in &self.skipped_users {
            let _ = writeln!(out, "{u}\t{reason}");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub ndcg: f64,
    pub mc: f64,
    pub ratio: f64,
    pub budget_exhausted_users: usize,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub engine: Engine,
    pub chosen: f64,
    pub rows: Vec<SweepRow>,
    /// Solutions at the chosen value.
    pub solutions: BTreeMap<UserId, RerankSolution>,
}

/// `engine,lambda,ndcg,mc,ratio,budget_exhausted_users`
pub fn sweep_csv<'a>(sweeps: impl IntoIterator<Item = &'a SweepResult>) -> String {
    let mut out = String::from("engine,lambda,ndcg,mc,ratio,budget_exhausted_users\n");
    for sweep in sweeps {
        for r in &sweep.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                sweep.engine, r.lambda, r.ndcg, r.mc, r.ratio, r.budget_exhausted_users
            );
        }
    }
    out
}

/// Index of the largest ratio; ties go to the earlier (smaller) lambda.
pub fn choose_lambda(rows: &[SweepRow]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (idx, row) in rows.iter().enumerate() {
        match best {
            Some(b) if row.ratio.partial_cmp(&rows[b].ratio) != Some(std::cmp::Ordering::Greater) => {}
            _ => best = Some(idx),
        }
    }
    best
}

fn sweep_point(prepared: &Prepared, solutions: &BTreeMap<UserId, RerankSolution>, lambda: f64) -> Result<SweepRow> {
    let cfg = &prepared.config;
    let relevant = prepared.split.test_items();
    let n = solutions.len() as f64;
    let mut ndcg = 0.0;
    let mut mc = 0.0;
    for (u, sol) in solutions {
        ndcg += ndcg_at_k(&sol.selected, &relevant[u], cfg.k)?;
        let q = list_distribution(&sol.selected, &prepared.split.items, cfg.rank_weighting)?;
        mc += cfg.divergence.eval(&prepared.profiles[u], &q);
    }
    let (ndcg, mc) = (ndcg / n, mc / n);
    Ok(SweepRow {
        lambda,
        ndcg,
        mc,
        ratio: ndcg / mc.max(MC_FLOOR),
        budget_exhausted_users: solutions.values().filter(|s| s.status != SolveStatus::Optimal).count(),
    })
}

/// Runs `engine` at each grid value (sorted ascending, duplicates removed)
/// and picks the value maximizing `nDCG / max(MC, 1e-6)`.
pub fn sweep_engine(prepared: &Prepared, engine: Engine, grid: &[f64]) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::invalid("lambda grid is empty"));
    }
    if grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::invalid("lambda grid values must be finite and non-negative"));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut rows = Vec::new();
    let mut best: Option<(usize, BTreeMap<UserId, RerankSolution>)> = None;
    for &lambda in &grid {
        let solutions = prepared.solve(engine, lambda)?;
        rows.push(stage("sweep", sweep_point(prepared, &solutions, lambda))?);
        let idx = rows.len() - 1;
        if choose_lambda(&rows) == Some(idx) {
            best = Some((idx, solutions));
        }
    }
    let (idx, solutions) = best.expect("grid is non-empty");
    Ok(SweepResult {
        engine,
        chosen: rows[idx].lambda,
        rows,
        solutions,
    })
}

/// The sweep for the confidence-aware engine.
pub fn lambda_sweep(prepared: &Prepared, grid: &[f64]) -> Result<SweepResult> {
    sweep_engine(prepared, Engine::Ccl, grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    pub engine: Engine,
    pub optimal_users: usize,
    pub budget_exhausted_users: usize,
    pub max_bound_gap: f64,
    pub total_nodes: u64,
}

fn summarize(engine: Engine, solutions: &BTreeMap<UserId, RerankSolution>) -> SolverSummary {
    let gaps: Vec<&RerankSolution> = solutions
        .values()
        .filter(|s| s.status != SolveStatus::Optimal)
        .collect();
    SolverSummary {
        engine,
        optimal_users: solutions.len() - gaps.len(),
        budget_exhausted_users: gaps.len(),
        max_bound_gap: gaps.iter().map(|s| s.bound_gap).fold(0.0, f64::max),
        total_nodes: solutions.values().map(|s| s.nodes_explored).sum(),
    }
}

/// Settings echoed into the report. Paths are left out so reports compare
/// across machines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub train_fraction: f64,
    pub n_candidates: usize,
    pub k: usize,
    pub scorer: String,
    pub recency: String,
    pub rank_weighting: String,
    pub divergence: String,
    pub lambda_grid: Vec<f64>,
    pub max_nodes: u64,
    pub max_seconds: f64,
    pub seed: u64,
}

impl From<&ExperimentConfig> for RunSettings {
    fn from(c: &ExperimentConfig) -> Self {
        Self {
            train_fraction: c.train_fraction,
            n_candidates: c.n_candidates,
            k: c.k,
            scorer: match &c.scorer {
                ScorerSpec::Import { .. } => "import".to_string(),
                other => other.to_string(),
            },
            recency: c.recency.to_string(),
            rank_weighting: c.rank_weighting.to_string(),
            divergence: c.divergence.to_string(),
            lambda_grid: c.lambda_grid.clone(),
            max_nodes: c.max_nodes,
            max_seconds: c.max_seconds,
            seed: c.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub settings: RunSettings,
    pub n_users: usize,
    pub skipped_users: usize,
    pub mean_profile_size: f64,
    /// Per calibrating engine, the lambda its own sweep selected.
    pub chosen_lambda: BTreeMap<Engine, f64>,
    pub sweep: BTreeMap<Engine, Vec<SweepRow>>,
    pub solver: Vec<SolverSummary>,
    pub oracle: Vec<OracleGroupRow>,
    pub evaluation: EvalReport,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub solutions: BTreeMap<Engine, BTreeMap<UserId, RerankSolution>>,
}

impl ExperimentOutcome {
    pub fn budget_exhausted_users(&self) -> usize {
        self.report.solver.iter().map(|s| s.budget_exhausted_users).sum()
    }
}

/// Runs every configured engine on the same prepared data. Each
/// calibrating engine gets the lambda its own sweep selects; `none` ignores
/// lambda.
pub fn run_prepared(prepared: &Prepared) -> Result<(ExperimentOutcome, Vec<SweepResult>)> {
    let cfg = &prepared.config;
    let engines: BTreeSet<Engine> = cfg.engines.iter().copied().collect();
    let mut solutions = BTreeMap::new();
    let mut sweeps = Vec::new();
    for &engine in &engines {
        if engine == Engine::None {
            solutions.insert(engine, prepared.solve(engine, 0.0)?);
            continue;
        }
        let sweep = sweep_engine(prepared, engine, &cfg.lambda_grid)?;
        solutions.insert(engine, sweep.solutions.clone());
        sweeps.push(sweep);
    }
    let lists = solutions.iter().map(|(e, s)| (*e, ranked_lists(s))).collect();
    let evaluation = prepared.evaluate_lists(&lists)?;
    let report = ExperimentReport {
        settings: RunSettings::from(cfg),
        n_users: prepared.users.len(),
        skipped_users: prepared.skipped_users.len(),
        mean_profile_size: prepared.weights.mean_profile_size,
        chosen_lambda: sweeps.iter().map(|s| (s.engine, s.chosen)).collect(),
        sweep: sweeps.iter().map(|s| (s.engine, s.rows.clone())).collect(),
        solver: solutions.iter().map(|(e, s)| summarize(*e, s)).collect(),
        oracle: prepared.oracle(),
        evaluation,
    };
    Ok((ExperimentOutcome { report, solutions }, sweeps))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// `engine,userId,status,bound_gap,nodes_explored` for users whose solve did not finish.
pub fn solver_gaps_csv(solutions: &BTreeMap<Engine, BTreeMap<UserId, RerankSolution>>) -> String {
    let mut out = String::from("engine,userId,status,bound_gap,nodes_explored\n");
    for (engine, sols) in solutions {
        for s in sols.values().filter(|s| s.status != SolveStatus::Optimal) {
            let _ = writeln!(
                out,
                "{engine},{},feasible_with_gap,{},{}",
                s.user, s.bound_gap, s.nodes_explored
            );
        }
    }
    out
}

/// Full pipeline plus artifacts under `config.output_dir`:
/// `report.json`, `report.csv`, `sweep.csv`, `solver_gaps.csv`,
/// `solutions/<engine>.csv`, `figures/*.csv` and `exclusions.txt`.
///
/// In strict mode the artifacts are still written before the budget error is returned.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let prepared = prepare(config)?;
    let (outcome, sweeps) = run_prepared(&prepared)?;
    let out = &config.output_dir;
    let write = |name: &str, text: &str| stage("write", write_file(&out.join(name), text));
    write("report.json", &outcome.report.to_json())?;
    write("report.csv", &outcome.report.evaluation.to_csv())?;
    write("sweep.csv", &sweep_csv(&sweeps))?;
    write("solver_gaps.csv", &solver_gaps_csv(&outcome.solutions))?;
    write("exclusions.txt", &prepared.exclusions_text())?;
    for (engine, sols) in &outcome.solutions {
        let lambda = outcome.report.chosen_lambda.get(engine).copied().unwrap_or(0.0);
        let problems = stage("write", prepared.problems(*engine, lambda))?;
        let by_user: BTreeMap<UserId, &RerankProblem> = problems.iter().map(|p| (p.user, p)).collect();
        write(
            &format!("solutions/{engine}.csv"),
            &solutions_csv(sols, &by_user, *engine),
        )?;
    }
    for (name, text) in emit_figures_data(&outcome.report.evaluation, &outcome.report.oracle) {
        write(&format!("figures/{name}"), &text)?;
    }
    let exhausted = outcome.budget_exhausted_users();
    if config.strict && exhausted > 0 {
        return Err(Error::BudgetExhausted { users: exhausted });
    }
    Ok(outcome)
}

/// Figure tables:
/// - `fig1b_oracle.csv`: `group,js,hellinger,n_users`
/// - `fig2_catalog_coverage.csv`: `engine,group,catalog_coverage`
/// - `fig3_improvement.csv`: `engine,group,metric,baseline,value,relative_improvement`
/// - `fig4_diversity.csv`: `engine,group,diversity`
///
/// Relative improvement is over the `none` engine and signed so that positive
/// is better; for `js` lower values count as improvement.
pub fn emit_figures_data(report: &EvalReport, oracle: &[OracleGroupRow]) -> Vec<(String, String)> {
    let mut fig2 = String::from("engine,group,catalog_coverage\n");
    let mut fig4 = String::from("engine,group,diversity\n");
    for e in &report.engines {
        for g in &e.groups {
            let _ = writeln!(fig2, "{},{},{}", e.engine, g.group, g.catalog_coverage);
            let _ = writeln!(fig4, "{},{},{}", e.engine, g.group, g.diversity);
        }
    }
    let mut fig3 = String::from("engine,group,metric,baseline,value,relative_improvement\n");
    if let Some(base) = report.engine(Engine::None) {
        for e in report
            .engines
            .iter()
            .filter(|e| matches!(e.engine, Engine::Cl | Engine::Ccl))
        {
            for g in &e.groups {
                let Some(b) = base.group(&g.group) else { continue };
                for metric in ["ndcg", "js", "diversity", "catalog_coverage"] {
                    let (bv, v) = (b.get(metric).unwrap_or(f64::NAN), g.get(metric).unwrap_or(f64::NAN));
                    let rel = if metric == "js" { (bv - v) / bv } else { (v - bv) / bv };
                    let _ = writeln!(fig3, "{},{},{},{},{},{}", e.engine, g.group, metric, bv, v, rel);
                }
            }
        }
    }
    vec![
        ("fig1b_oracle.csv".to_string(), oracle_csv(oracle)),
        ("fig2_catalog_coverage.csv".to_string(), fig2),
        ("fig3_improvement.csv".to_string(), fig3),
        ("fig4_diversity.csv".to_string(), fig4),
    ]
}

/// Reads a solution export back into ranked lists. All rows must name the same engine.
pub fn read_solutions_csv(path: impl AsRef<Path>) -> Result<(Engine, BTreeMap<UserId, Vec<ItemId>>)> {
    #[derive(Deserialize)]
    struct Row {
        #[serde(rename = "userId")]
        user: String,
        #[serde(rename = "itemId")]
        item: String,
        rank: usize,
        engine: String,
    }
    let path = path.as_ref();
    let rows: Vec<(u64, Row)> = read_rows(path)?;
    let mut engine: Option<Engine> = None;
    let mut ranked: BTreeMap<UserId, Vec<(usize, ItemId)>> = BTreeMap::new();
    for (line, row) in rows {
        let e: Engine = row
            .engine
            .parse()
            .map_err(|_| Error::parse(path, line, "unknown engine"))?;
        if engine.is_some_and(|prev| prev != e) {
            return Err(Error::parse(path, line, "file mixes engines"));
        }
        engine = Some(e);
        let user = parse_id(path, line, "userId", &row.user)?;
        let item = parse_id(path, line, "itemId", &row.item)?;
        ranked.entry(user).or_default().push((row.rank, item));
    }
    let engine = engine.ok_or_else(|| Error::parse(path, 1, "no solution rows"))?;
    let lists = ranked
        .into_iter()
        .map(|(u, mut rows)| {
            rows.sort();
            (u, rows.into_iter().map(|(_, i)| i).collect())
        })
        .collect();
    Ok((engine, lists))
}

/// Evaluates exported solution files against the configured data.
pub fn evaluate_solution_files(config: &ExperimentConfig, files: &[PathBuf]) -> Result<EvalReport> {
    let prepared = prepare(config)?;
    let mut lists = BTreeMap::new();
    for f in files {
        let (engine, per_user) = stage("ingest", read_solutions_csv(f))?;
        if lists.insert(engine, per_user).is_some() {
            return Err(Error::invalid(format!("engine {engine} given twice")));
        }
    }
    prepared.evaluate_lists(&lists)
}
