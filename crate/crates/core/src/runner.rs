//! Experiment orchestration: selection strategies, repeated two-tower jobs,
//! stratified evaluation, the policy-training loop and report tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{load_review_files, prepare, read_split, Catalog, FieldNames, ItemId, LoadStats, SplitDataset, UserId};
use crate::embeddings::{load_embedding_file, EmbeddingTable, DEFAULT_DIM};
use crate::error::{format_err, invalid, Error, Result};
use crate::features::{quota_for, FeatureName, FeatureTable, DEFAULT_VELOCITY_WINDOW};
use crate::numerics::{fnv1a64, mean, standard_error, stream_id, DenseMatrix, Pca, RngStream};
use crate::oracle::{
    generate_triples, train_histories, AugmentationTriple, HttpTransport, LlmConfig, LlmOracle, PreferenceOracle,
    SimulatedOracle, SimulationMode,
};
use crate::policy::{
    anneal_temperature, bootstrap_init, select_users, top_users, PolicyConfig, PolicyParams,
};
use crate::reward::{
    compute_rewards, init_baselines, job_seed, reinforce_update, reward_job, update_baselines, BaselineState,
    FeatureArm, RewardMode,
};
use crate::synthetic::{SyntheticConfig, SyntheticDataset};
use crate::twotower::{
    recall_counts, train_keep_best, EvalFilter, EvalReport, PositiveKind, RecallCount, ScoreCache, TowerConfig,
    TwoTowerModel, REWARD_K,
};

// ---------------------------------------------------------------------------
// configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// Review and metadata JSON-lines files.
    Reviews {
        reviews: PathBuf,
        meta: PathBuf,
        #[serde(default)]
        fields: FieldNames,
    },
    /// A directory written by `ingest`.
    Prepared { dir: PathBuf },
    Synthetic(SyntheticConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    #[serde(flatten)]
    pub source: DataSource,
    pub k_core: usize,
    pub train_fraction: f64,
    pub velocity_window_days: i64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic(SyntheticConfig::default()),
            k_core: 5,
            train_fraction: 0.7,
            velocity_window_days: DEFAULT_VELOCITY_WINDOW / 86_400,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    /// Hashed metadata dimension when no file is given.
    pub dim: usize,
    pub file: Option<PathBuf>,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self { dim: DEFAULT_DIM, file: None, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    #[default]
    Deterministic,
    /// Bradley-Terry draws at `temperature`.
    Stochastic,
    /// Chat model behind the `llm` endpoint.
    Llm,
    /// Cluster-truth oracle of a synthetic dataset.
    Planted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub mode: OracleMode,
    pub pairs_per_user: usize,
    pub temperature: f64,
    pub llm: LlmConfig,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { mode: OracleMode::Deterministic, pairs_per_user: 1, temperature: 0.1, llm: LlmConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    /// Two-tower jobs per policy iteration.
    pub m: usize,
    pub alpha_init: f64,
    pub alpha_train: f64,
    pub mode: RewardMode,
    /// IBS-only epochs of the checkpoints fine-tune rewards start from.
    pub pretrain_epochs: usize,
    pub max_iterations: usize,
    pub patience: usize,
    pub tolerance: f64,
    /// Window of the reward moving average used for early stopping.
    pub average_window: usize,
    /// Recompute per-feature recalls for baselines instead of reusing the
    /// selection-experiment results.
    pub recompute_feature_recalls: bool,
    /// Reuse the same `m` job seeds for every reward measurement, so that
    /// rewards of different selections are paired.
    pub common_job_seeds: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            m: 6,
            alpha_init: 0.0,
            alpha_train: 0.3,
            mode: RewardMode::Full,
            pretrain_epochs: 30,
            max_iterations: 40,
            patience: 8,
            tolerance: 1e-4,
            average_window: 3,
            recompute_feature_recalls: false,
            common_job_seeds: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Independent two-tower jobs per strategy.
    pub jobs: usize,
    pub strategies: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { jobs: 5, strategies: vec!["none".into(), "random".into()] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub data: DataConfig,
    pub embeddings: EmbeddingConfig,
    pub oracle: OracleConfig,
    pub tower: TowerConfig,
    pub policy: PolicyConfig,
    pub reward: RewardConfig,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            threads: 0,
            data: DataConfig::default(),
            embeddings: EmbeddingConfig::default(),
            oracle: OracleConfig::default(),
            tower: TowerConfig::default(),
            policy: PolicyConfig::default(),
            reward: RewardConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.tower.validate()?;
        self.policy.validate()?;
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction <= 1.0) {
            return Err(invalid("train fraction outside (0, 1]"));
        }
        if self.reward.m == 0 || self.experiment.jobs == 0 {
            return Err(invalid("need at least one job"));
        }
        let mut missing = Vec::new();
        match &self.data.source {
            DataSource::Reviews { reviews, meta, .. } => {
                for p in [reviews, meta] {
                    if !p.exists() {
                        missing.push(p.display().to_string());
                    }
                }
            }
            DataSource::Prepared { dir } if !dir.exists() => missing.push(dir.display().to_string()),
            _ => {}
        }
        if let Some(f) = &self.embeddings.file {
            if !f.exists() {
                missing.push(f.display().to_string());
            }
        }
        if !missing.is_empty() {
            return Err(invalid(format!("missing input paths: {}", missing.join(", "))));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// loaded inputs

/// Dataset, metadata and embeddings an experiment reads.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub split: SplitDataset,
    pub catalog: Catalog,
    pub embeddings: EmbeddingTable,
    /// Embeddings the simulated oracle compares.
    pub oracle_embeddings: EmbeddingTable,
    pub synthetic: Option<SyntheticDataset>,
    /// Parse statistics when read from review files.
    pub stats: Option<LoadStats>,
}

impl Workspace {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let (split, catalog, synthetic, stats) = match &cfg.data.source {
            DataSource::Reviews { reviews, meta, fields } => {
                let loaded = load_review_files(reviews, meta, fields)?;
                let split = prepare(&loaded, cfg.data.k_core, cfg.data.train_fraction)?;
                (split, loaded.catalog, None, Some(loaded.stats))
            }
            DataSource::Prepared { dir } => {
                let (split, catalog) = read_split(dir)?;
                (split, catalog, None, None)
            }
            DataSource::Synthetic(sc) => {
                let d = SyntheticDataset::generate(sc)?;
                (d.split.clone(), d.catalog.clone(), Some(d), None)
            }
        };
        let (embeddings, oracle_embeddings) = match (&cfg.embeddings.file, &synthetic) {
            (Some(f), _) => {
                let t = load_embedding_file(f, None)?;
                (t.clone(), t)
            }
            (None, Some(d)) => (d.embeddings.clone(), d.oracle_embeddings.clone()),
            (None, None) => {
                let t = EmbeddingTable::from_catalog(&catalog, cfg.embeddings.dim, cfg.embeddings.seed)?;
                (t.clone(), t)
            }
        };
        Ok(Self { split, catalog, embeddings, oracle_embeddings, synthetic, stats })
    }

    pub fn features(&self, window_days: i64) -> Result<FeatureTable> {
        FeatureTable::compute(&self.split, &self.catalog, &self.embeddings, window_days * 86_400)
    }

    pub fn oracle<'a>(&'a self, cfg: &OracleConfig) -> Result<Box<dyn PreferenceOracle + 'a>> {
        Ok(match cfg.mode {
            OracleMode::Deterministic => Box::new(SimulatedOracle::new(&self.oracle_embeddings, SimulationMode::Deterministic)?),
            OracleMode::Stochastic => Box::new(SimulatedOracle::new(
                &self.oracle_embeddings,
                SimulationMode::Stochastic { temperature: cfg.temperature },
            )?),
            OracleMode::Llm => Box::new(LlmOracle::new(HttpTransport::new(&cfg.llm), &self.catalog, &cfg.llm)),
            OracleMode::Planted => Box::new(
                self.synthetic.as_ref().ok_or_else(|| invalid("the planted oracle needs a synthetic dataset"))?.planted_oracle(),
            ),
        })
    }
}

/// Named policy input columns, one row per warm user.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyInputs {
    pub names: Vec<String>,
    pub rows: Vec<(UserId, Vec<f64>)>,
}

impl PolicyInputs {
    /// Scaled features of `names`.
    pub fn from_features(table: &FeatureTable, names: &[FeatureName]) -> Self {
        Self { names: names.iter().map(|f| f.abbrev().to_owned()).collect(), rows: table.scaled_rows(names) }
    }

    /// Appends `dims` PCA components of the user-tower outputs, each min-max
    /// scaled to [0, 1].
    pub fn with_pca(mut self, model: &TwoTowerModel, dims: usize) -> Result<Self> {
        if dims == 0 {
            return Ok(self);
        }
        let emb = model.extract_user_top_embeddings();
        let pca = Pca::fit(&emb, dims)?;
        let proj = pca.transform(&emb)?;
        let cols: Vec<Vec<f64>> = (0..dims).map(|j| proj.column(j)).collect();
        let scaled: Vec<Vec<f64>> = cols.iter().map(|c| min_max(c)).collect();
        let index: BTreeMap<&UserId, usize> = model.user_ids().iter().enumerate().map(|(i, u)| (u, i)).collect();
        for (u, row) in &mut self.rows {
            let i = *index.get(u).ok_or_else(|| Error::MissingUser(u.to_string()))?;
            row.extend(scaled.iter().map(|c| c[i]));
        }
        self.names.extend((0..dims).map(|j| format!("PC{}", j + 1)));
        Ok(self)
    }

    pub fn as_map(&self) -> BTreeMap<UserId, Vec<f64>> {
        self.rows.iter().cloned().collect()
    }

    /// Top-`quota` users by column `col`, ties by ascending id.
    pub fn top_by_column(&self, col: usize, quota: usize) -> Vec<UserId> {
        let mut order: Vec<&(UserId, Vec<f64>)> = self.rows.iter().collect();
        order.sort_by(|a, b| b.1[col].total_cmp(&a.1[col]).then(a.0.cmp(&b.0)));
        order.into_iter().take(quota).map(|(u, _)| u.clone()).collect()
    }
}

fn min_max(col: &[f64]) -> Vec<f64> {
    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    col.iter().map(|x| if hi > lo { (x - lo) / (hi - lo) } else { 0.5 }).collect()
}

// ---------------------------------------------------------------------------
// selection experiments

#[derive(Clone, Debug, PartialEq)]
pub enum Strategy {
    None,
    Random,
    Feature(FeatureName),
    /// Top-quota users by the logits of a policy.
    Policy { name: String, params: PolicyParams },
    /// An explicit user set.
    Users { name: String, users: Vec<UserId> },
}

impl Strategy {
    pub fn name(&self) -> String {
        match self {
            Strategy::None => "none".into(),
            Strategy::Random => "random".into(),
            Strategy::Feature(f) => format!("feature:{}", f.abbrev()),
            Strategy::Policy { name, .. } => format!("policy:{name}"),
            Strategy::Users { name, .. } => format!("users:{name}"),
        }
    }

    /// File-name-safe form of [`name`](Self::name).
    pub fn slug(&self) -> String {
        self.name().chars().map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Parses `none`, `random`, `feature:<ABBREV>` and `policy:<checkpoint>`.
impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "none" => Ok(Strategy::None),
            None if s == "random" => Ok(Strategy::Random),
            Some(("feature", f)) => Ok(Strategy::Feature(f.parse()?)),
            Some(("policy", path)) => {
                let p = Path::new(path);
                if !p.exists() {
                    return Err(invalid(format!("policy checkpoint {path} not found")));
                }
                let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "policy".into());
                Ok(Strategy::Policy { name, params: PolicyParams::load(p)? })
            }
            _ => Err(invalid(format!("unknown strategy {s:?}"))),
        }
    }
}

/// Everything a batch of two-tower jobs needs.
pub struct Experiment<'a> {
    pub split: &'a SplitDataset,
    pub embeddings: &'a EmbeddingTable,
    pub oracle: &'a dyn PreferenceOracle,
    pub features: Option<&'a FeatureTable>,
    pub policy_inputs: Option<&'a PolicyInputs>,
    pub histories: BTreeMap<UserId, Vec<ItemId>>,
    pub cold_items: Vec<ItemId>,
    pub tower: TowerConfig,
    pub pairs_per_user: usize,
    pub quota_fraction: f64,
    pub jobs: usize,
    pub seed: u64,
}

impl<'a> Experiment<'a> {
    pub fn new(split: &'a SplitDataset, embeddings: &'a EmbeddingTable, oracle: &'a dyn PreferenceOracle, tower: TowerConfig, seed: u64) -> Self {
        Self {
            split,
            embeddings,
            oracle,
            features: None,
            policy_inputs: None,
            histories: train_histories(split),
            cold_items: split.cold_items.iter().cloned().collect(),
            tower,
            pairs_per_user: 1,
            quota_fraction: 0.2,
            jobs: 5,
            seed,
        }
    }

    /// Experiment settings of a run configuration.
    pub fn configured(cfg: &RunConfig, ws: &'a Workspace, oracle: &'a dyn PreferenceOracle) -> Self {
        let mut exp = Self::new(&ws.split, &ws.embeddings, oracle, cfg.tower.clone(), cfg.seed);
        exp.pairs_per_user = cfg.oracle.pairs_per_user;
        exp.quota_fraction = cfg.policy.quota_fraction;
        exp.jobs = cfg.experiment.jobs;
        exp
    }

    pub fn quota(&self) -> Result<usize> {
        quota_for(self.split.warm_users.len(), self.quota_fraction)
    }

    /// Users a strategy picks; empty for `none`.
    pub fn select(&self, strategy: &Strategy) -> Result<Vec<UserId>> {
        let quota = self.quota()?;
        let mut users = match strategy {
            Strategy::None => Vec::new(),
            Strategy::Random => {
                let mut rng = RngStream::new(self.seed, stream_id("select/random", 0, 0));
                let all: Vec<&UserId> = self.split.warm_users.iter().collect();
                rand::seq::index::sample(&mut rng, all.len(), quota).into_iter().map(|i| all[i].clone()).collect()
            }
            Strategy::Feature(f) => {
                let t = self.features.ok_or_else(|| invalid("feature strategies need the feature table"))?;
                t.top_fraction_users(*f, self.quota_fraction)?.into_iter().collect()
            }
            Strategy::Policy { params, .. } => {
                let inputs = self.policy_inputs.ok_or_else(|| invalid("policy strategies need policy inputs"))?;
                if inputs.names.len() != params.input_dim() {
                    return Err(invalid("policy checkpoint does not match the configured inputs"));
                }
                top_users(params, &inputs.rows, quota)?
            }
            Strategy::Users { users, .. } => users.clone(),
        };
        users.sort();
        for u in &users {
            if !self.split.warm_users.contains(u) {
                return Err(Error::MissingUser(u.to_string()));
            }
        }
        Ok(users)
    }

    pub fn augment(&self, selected: &[UserId], phase: &str, iteration: u64) -> Result<Vec<AugmentationTriple>> {
        if selected.is_empty() {
            return Ok(Vec::new());
        }
        let mut rng = RngStream::new(self.seed, stream_id(phase, iteration, 0));
        generate_triples(selected, &self.cold_items, self.pairs_per_user, &self.histories, self.oracle, &mut rng)
    }

    /// Trains `self.jobs` models from scratch; job `j` uses the same seed
    /// under every strategy so that runs pair up.
    pub fn train_jobs(&self, triples: &[AugmentationTriple]) -> Result<Vec<(EvalReport, TwoTowerModel)>> {
        (0..self.jobs)
            .into_par_iter()
            .map(|j| {
                let seed = job_seed(self.seed, "experiment/job", 0, j as u64);
                let cfg = TowerConfig { seed, ..self.tower.clone() };
                let mut rng = RngStream::new(seed, stream_id("two-tower/init", 0, 0));
                let mut model = TwoTowerModel::init(cfg, self.split, self.embeddings, &mut rng)?;
                let aug = (!triples.is_empty()).then_some(triples);
                train_keep_best(&mut model, self.split, aug, self.tower.epochs, &mut ())
            })
            .collect()
    }

    pub fn run(&self, strategy: &Strategy) -> Result<ExperimentRun> {
        let selected = self.select(strategy)?;
        let triples = self.augment(&selected, &format!("augment/{}", strategy.name()), 0)?;
        let runs = self.train_jobs(&triples)?;
        let jobs: Vec<JobRecord> = runs
            .iter()
            .enumerate()
            .map(|(j, (report, _))| JobRecord::new(j, job_seed(self.seed, "experiment/job", 0, j as u64), report))
            .collect();
        let report = StrategyReport::new(strategy.name(), selected.clone(), triples.len(), jobs);
        let (reports, models) = runs.into_iter().unzip();
        Ok(ExperimentRun { report, selected, triples, reports, models })
    }
}

/// Mean and standard error of per-job values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: Option<f64>,
    /// Sample standard deviation over `√n`; absent for fewer than two jobs.
    pub se: Option<f64>,
    pub n: usize,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> Self {
        Self { mean: mean(values), se: standard_error(values), n: values.len() }
    }

    fn of_options(values: &[Option<f64>]) -> Self {
        let v: Vec<f64> = values.iter().flatten().copied().collect();
        Self::of(&v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub cold10: Option<f64>,
    pub cold50: Option<f64>,
    pub warm10: Option<f64>,
    pub warm50: Option<f64>,
    pub overall10: Option<f64>,
    pub overall50: Option<f64>,
}

impl JobRecord {
    fn new(job: usize, seed: u64, r: &EvalReport) -> Self {
        let m10 = r.metric(10);
        let m50 = r.metric(50);
        Self {
            job,
            seed,
            best_epoch: r.best_epoch,
            cold10: m10.cold,
            cold50: m50.cold,
            warm10: m10.warm,
            warm50: m50.warm,
            overall10: m10.overall,
            overall50: m50.overall,
        }
    }
}

pub const SUMMARY_METRICS: [&str; 4] = ["cold@10", "cold@50", "warm@10", "warm@50"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: String,
    pub selected: Vec<UserId>,
    pub triples: usize,
    pub jobs: Vec<JobRecord>,
    pub summary: BTreeMap<String, MeanSe>,
}

impl StrategyReport {
    fn new(strategy: String, selected: Vec<UserId>, triples: usize, jobs: Vec<JobRecord>) -> Self {
        let col = |f: fn(&JobRecord) -> Option<f64>| MeanSe::of_options(&jobs.iter().map(f).collect::<Vec<_>>());
        let summary = BTreeMap::from([
            ("cold@10".to_owned(), col(|j| j.cold10)),
            ("cold@50".to_owned(), col(|j| j.cold50)),
            ("warm@10".to_owned(), col(|j| j.warm10)),
            ("warm@50".to_owned(), col(|j| j.warm50)),
        ]);
        Self { strategy, selected, triples, jobs, summary }
    }

    pub fn cold50(&self) -> MeanSe {
        self.summary["cold@50"]
    }

    pub fn jobs_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("job,seed,best_epoch,cold@10,cold@50,warm@10,warm@50,overall@10,overall@50\n");
        for j in &self.jobs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                j.job,
                j.seed,
                j.best_epoch,
                fmt(j.cold10),
                fmt(j.cold50),
                fmt(j.warm10),
                fmt(j.warm50),
                fmt(j.overall10),
                fmt(j.overall50)
            ));
        }
        out
    }
}

pub struct ExperimentRun {
    pub report: StrategyReport,
    pub selected: Vec<UserId>,
    pub triples: Vec<AugmentationTriple>,
    pub reports: Vec<EvalReport>,
    /// Best-epoch snapshots, one per job.
    pub models: Vec<TwoTowerModel>,
}

impl ExperimentRun {
    /// Writes the summary JSON, per-job CSV and per-epoch curves under `dir`.
    pub fn write(&self, dir: &Path, slug: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_json(&dir.join(format!("{slug}.json")), &self.report)?;
        fs::write(dir.join(format!("{slug}_jobs.csv")), self.report.jobs_csv())?;
        for (j, r) in self.reports.iter().enumerate() {
            fs::write(dir.join(format!("{slug}_job{j}_curves.csv")), r.curves_csv())?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// stratified evaluation

/// Cold recall@50 counts of one model split by selection membership.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StrataCounts {
    pub all: RecallCount,
    pub selected: RecallCount,
    pub unselected: RecallCount,
}

impl StrataCounts {
    pub fn compute(model: &TwoTowerModel, test: &[crate::dataset::Interaction], selection: &BTreeSet<UserId>) -> Self {
        let cache = ScoreCache::new(model);
        let k = [REWARD_K];
        let all = recall_counts(model, test, &k, &EvalFilter::COLD, &cache)[0];
        let selected = recall_counts(model, test, &k, &EvalFilter::users_in(PositiveKind::Cold, selection), &cache)[0];
        let unselected = recall_counts(model, test, &k, &EvalFilter::users_not_in(PositiveKind::Cold, selection), &cache)[0];
        Self { all, selected, unselected }
    }

    /// Whether the partitions add up to the whole, hit for hit.
    pub fn recombines(&self) -> bool {
        self.selected.hits + self.unselected.hits == self.all.hits
            && self.selected.examples + self.unselected.examples == self.all.examples
    }

    /// Partition recalls weighted by partition sizes.
    pub fn weighted_recall(&self) -> Option<f64> {
        let n = self.selected.examples + self.unselected.examples;
        if n == 0 {
            return None;
        }
        let part = |c: &RecallCount| c.recall().map_or(0.0, |r| r * c.examples as f64);
        Some((part(&self.selected) + part(&self.unselected)) / n as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub without: MeanSe,
    pub with: MeanSe,
    /// Relative change in percent.
    pub improvement_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratifiedReport {
    pub strategy: String,
    pub selected: PartitionSummary,
    pub unselected: PartitionSummary,
    pub augmented: Vec<StrataCounts>,
    pub baseline: Vec<StrataCounts>,
}

/// `(new − old) / old` in percent.
pub fn improvement_pct(old: f64, new: f64) -> Option<f64> {
    (old != 0.0).then(|| (new - old) / old * 100.0)
}

/// Cold recall@50 of selected vs unselected users' test examples, for the
/// augmented models and the non-augmented ones, using one selection set.
pub fn stratified_eval(
    strategy: &str,
    augmented: &[TwoTowerModel],
    baseline: &[TwoTowerModel],
    selection: &[UserId],
    split: &SplitDataset,
) -> StratifiedReport {
    let set: BTreeSet<UserId> = selection.iter().cloned().collect();
    let counts = |ms: &[TwoTowerModel]| -> Vec<StrataCounts> { ms.iter().map(|m| StrataCounts::compute(m, &split.test, &set)).collect() };
    let aug = counts(augmented);
    let base = counts(baseline);
    let summarize = |pick: fn(&StrataCounts) -> RecallCount| {
        let without = MeanSe::of_options(&base.iter().map(|c| pick(c).recall()).collect::<Vec<_>>());
        let with = MeanSe::of_options(&aug.iter().map(|c| pick(c).recall()).collect::<Vec<_>>());
        let improvement_pct = match (without.mean, with.mean) {
            (Some(o), Some(n)) => improvement_pct(o, n),
            _ => None,
        };
        PartitionSummary { without, with, improvement_pct }
    };
    StratifiedReport {
        strategy: strategy.to_owned(),
        selected: summarize(|c| c.selected),
        unselected: summarize(|c| c.unselected),
        augmented: aug,
        baseline: base,
    }
}

// ---------------------------------------------------------------------------
// policy training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub mean_cr: f64,
    pub std_error: Option<f64>,
    pub temperature: f64,
    /// FNV-1a of the sorted selection.
    pub selection_hash: u64,
    pub passes_used: usize,
    pub job_recalls: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyRun {
    /// Parameters before each iteration, then the final ones.
    pub trajectory: Vec<PolicyParams>,
    pub log: Vec<IterationLog>,
    pub baselines: BaselineState,
    /// Iteration with the highest mean reward.
    pub best_iteration: Option<usize>,
}

impl PolicyRun {
    /// Parameters used by the best iteration, or the initial ones.
    pub fn best_params(&self) -> &PolicyParams {
        &self.trajectory[self.best_iteration.unwrap_or(0)]
    }

    pub fn final_params(&self) -> &PolicyParams {
        self.trajectory.last().expect("trajectory holds the initial parameters")
    }

    pub fn rewards_csv(&self) -> String {
        let mut out = String::from("iteration,mean_cr,std_error,temperature,selection_hash,passes_used\n");
        for l in &self.log {
            out.push_str(&format!(
                "{},{},{},{},{:016x},{}\n",
                l.iteration,
                l.mean_cr,
                l.std_error.map(|x| x.to_string()).unwrap_or_default(),
                l.temperature,
                l.selection_hash,
                l.passes_used
            ));
        }
        out
    }

    /// `iteration,temperature,<weights...>` for linear policies.
    pub fn weights_csv(&self) -> Option<String> {
        let names = &self.trajectory[0].inputs;
        self.trajectory[0].theta()?;
        let mut out = format!("iteration,temperature,{}\n", names.join(","));
        for (i, p) in self.trajectory.iter().enumerate() {
            let w: Vec<String> = p.theta()?.iter().map(|x| x.to_string()).collect();
            out.push_str(&format!("{i},{},{}\n", p.temperature, w.join(",")));
        }
        Some(out)
    }
}

/// Reward-job recalls for one selection: `cfg.m` jobs, with pretrained
/// checkpoints when the mode fine-tunes.
pub fn selection_rewards(
    exp: &Experiment<'_>,
    triples: &[AugmentationTriple],
    cfg: &RewardConfig,
    pretrained: &[TwoTowerModel],
    phase: &str,
    iteration: u64,
) -> Result<Vec<f64>> {
    (0..cfg.m)
        .into_par_iter()
        .map(|j| {
            let seed = if cfg.common_job_seeds {
                job_seed(exp.seed, "reward/job", 0, j as u64)
            } else {
                job_seed(exp.seed, phase, iteration, j as u64)
            };
            let base = pretrained.get(j % pretrained.len().max(1));
            let run = || reward_job(cfg.mode, base, exp.split, exp.embeddings, triples, &exp.tower, seed);
            // one retry, then the error propagates
            run().or_else(|_| run())
        })
        .collect()
}

/// IBS-only checkpoints for fine-tune rewards; empty for other modes.
pub fn pretrain_checkpoints(exp: &Experiment<'_>, cfg: &RewardConfig) -> Result<Vec<TwoTowerModel>> {
    if !matches!(cfg.mode, RewardMode::FineTune { .. }) {
        return Ok(Vec::new());
    }
    (0..cfg.m)
        .into_par_iter()
        .map(|j| {
            let seed = job_seed(exp.seed, "policy/pretrain", 0, j as u64);
            let tower = TowerConfig { seed, ..exp.tower.clone() };
            let mut rng = RngStream::new(seed, stream_id("two-tower/init", 0, 0));
            let mut model = TwoTowerModel::init(tower, exp.split, exp.embeddings, &mut rng)?;
            let (_, best) = train_keep_best(&mut model, exp.split, None, cfg.pretrain_epochs, &mut ())?;
            Ok(best)
        })
        .collect()
}

/// Baselines from reward jobs measured under the same reward mode: no
/// augmentation, and each input column's top-quota selection.
pub fn measured_baselines(
    exp: &Experiment<'_>,
    inputs: &PolicyInputs,
    columns: &[usize],
    cfg: &RewardConfig,
    pretrained: &[TwoTowerModel],
) -> Result<BaselineState> {
    let nonaug = selection_rewards(exp, &[], cfg, pretrained, "baseline/none", 0)?;
    let quota = exp.quota()?;
    let mut arms = Vec::new();
    for &c in columns {
        let users = inputs.top_by_column(c, quota);
        let triples = exp.augment(&users, "baseline/augment", c as u64)?;
        let recalls = selection_rewards(exp, &triples, cfg, pretrained, "baseline/arm", c as u64)?;
        arms.push(FeatureArm { name: inputs.names[c].clone(), recall: mean(&recalls).unwrap_or(0.0), top_set: users.into_iter().collect() });
    }
    init_baselines(&nonaug, &arms, &exp.split.warm_users, cfg.alpha_init, cfg.alpha_train)
}

/// Per iteration: sample a selection, augment, run the reward jobs, update
/// the policy by REINFORCE and the baselines by EMA, then anneal `T`.
pub fn train_policy(
    exp: &Experiment<'_>,
    inputs: &PolicyInputs,
    init: PolicyParams,
    baselines: BaselineState,
    policy: &PolicyConfig,
    cfg: &RewardConfig,
    pretrained: &[TwoTowerModel],
    on_iteration: &mut dyn FnMut(&IterationLog, &PolicyParams),
) -> Result<PolicyRun> {
    if inputs.names.len() != init.input_dim() {
        return Err(invalid("policy inputs do not match the policy dimension"));
    }
    let features = inputs.as_map();
    let quota = exp.quota()?;
    let mut params = init;
    let mut baselines = baselines;
    let mut trajectory = vec![params.clone()];
    let mut log: Vec<IterationLog> = Vec::new();
    let mut best_avg = f64::NEG_INFINITY;
    let mut stale = 0usize;
    for it in 0..cfg.max_iterations {
        let mut rng = RngStream::new(exp.seed, stream_id("policy/select", it as u64, 0));
        let sel = select_users(&params, &inputs.rows, quota, policy.max_passes, &mut rng)?;
        let mut sorted = sel.selected.clone();
        sorted.sort();
        let triples = exp.augment(&sorted, "policy/augment", it as u64)?;
        let recalls = selection_rewards(exp, &triples, cfg, pretrained, "policy/job", it as u64)?;
        let rewards = compute_rewards(&recalls, &baselines, &sel.selected)?;
        let entry = IterationLog {
            iteration: it,
            mean_cr: rewards.mean_cr,
            std_error: standard_error(&recalls),
            temperature: params.temperature,
            selection_hash: fnv1a64(sorted.iter().map(|u| u.as_str()).collect::<Vec<_>>().join("\n").as_bytes()),
            passes_used: sel.passes_used,
            job_recalls: recalls,
        };
        let mut next = reinforce_update(&params, &features, &rewards.per_user_reward, policy.learning_rate)?;
        next = anneal_temperature(&next);
        next.iteration = it + 1;
        baselines = update_baselines(&baselines, rewards.mean_cr, cfg.alpha_train)?;
        on_iteration(&entry, &next);
        log.push(entry);
        params = next;
        trajectory.push(params.clone());

        let w = cfg.average_window.max(1);
        if log.len() >= w {
            let avg = mean(&log[log.len() - w..].iter().map(|l| l.mean_cr).collect::<Vec<_>>()).unwrap();
            if avg > best_avg + cfg.tolerance {
                best_avg = avg;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    let best_iteration = log.iter().enumerate().max_by(|a, b| a.1.mean_cr.total_cmp(&b.1.mean_cr).then(b.0.cmp(&a.0))).map(|(i, _)| i);
    Ok(PolicyRun { trajectory, log, baselines, best_iteration })
}

// ---------------------------------------------------------------------------
// full pipeline and report

/// SHA-256 of each file, keyed by path.
pub fn checksums(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for p in paths {
        let bytes = fs::read(p)?;
        let digest = Sha256::digest(&bytes);
        out.insert(p.display().to_string(), digest.iter().map(|b| format!("{b:02x}")).collect());
    }
    Ok(out)
}

fn input_files(cfg: &RunConfig) -> Vec<PathBuf> {
    let mut v = Vec::new();
    match &cfg.data.source {
        DataSource::Reviews { reviews, meta, .. } => {
            v.push(reviews.clone());
            v.push(meta.clone());
        }
        DataSource::Prepared { dir } => {
            for f in ["train.tsv", "test.tsv", "items.tsv", "manifest.json"] {
                v.push(dir.join(f));
            }
        }
        DataSource::Synthetic(_) => {}
    }
    if let Some(f) = &cfg.embeddings.file {
        v.push(f.clone());
    }
    v
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| format_err(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| format_err(format!("{}: {e}", path.display())))
}

/// Runs every configured strategy and writes `experiments/` and
/// `stratified/` under the output directory.
pub fn run_experiments(cfg: &RunConfig, ws: &Workspace) -> Result<Vec<StrategyReport>> {
    let features = ws.features(cfg.data.velocity_window_days)?;
    let oracle = ws.oracle(&cfg.oracle)?;
    let inputs = PolicyInputs::from_features(&features, &cfg.policy.features);
    let mut exp = Experiment::configured(cfg, ws, oracle.as_ref());
    exp.features = Some(&features);
    exp.policy_inputs = Some(&inputs);
    let strategies: Vec<Strategy> = cfg.experiment.strategies.iter().map(|s| s.parse()).collect::<Result<_>>()?;
    let exp_dir = cfg.out.join("experiments");
    let strat_dir = cfg.out.join("stratified");
    fs::create_dir_all(&strat_dir)?;
    let none = exp.run(&Strategy::None)?;
    none.write(&exp_dir, "none")?;
    let mut reports = vec![none.report.clone()];
    for s in strategies.iter().filter(|s| **s != Strategy::None) {
        let run = exp.run(s)?;
        run.write(&exp_dir, &s.slug())?;
        let strat = stratified_eval(&s.name(), &run.models, &none.models, &run.selected, &ws.split);
        write_json(&strat_dir.join(format!("{}.json", s.slug())), &strat)?;
        reports.push(run.report);
    }
    write_json(&cfg.out.join("inputs.json"), &checksums(&input_files(cfg))?)?;
    Ok(reports)
}

/// The complete policy-training pipeline, writing `policy/` under the
/// output directory.
pub fn run_policy_training(cfg: &RunConfig, ws: &Workspace) -> Result<PolicyRun> {
    let inputs_before = checksums(&input_files(cfg))?;
    let features = ws.features(cfg.data.velocity_window_days)?;
    let oracle = ws.oracle(&cfg.oracle)?;
    let base_inputs = PolicyInputs::from_features(&features, &cfg.policy.features);
    let mut exp = Experiment::configured(cfg, ws, oracle.as_ref());
    exp.features = Some(&features);
    exp.jobs = cfg.reward.m;
    let pretrained = pretrain_checkpoints(&exp, &cfg.reward)?;
    let inputs = if cfg.policy.pca_dims > 0 {
        let source = match pretrained.first() {
            Some(m) => m.clone(),
            None => {
                let probe = Experiment { jobs: 1, ..Experiment::configured(cfg, ws, oracle.as_ref()) };
                probe.train_jobs(&[])?.remove(0).1
            }
        };
        base_inputs.with_pca(&source, cfg.policy.pca_dims)?
    } else {
        base_inputs
    };
    let base_cols: Vec<usize> = (0..cfg.policy.features.len()).collect();
    let baselines = measured_baselines(&exp, &inputs, &base_cols, &cfg.reward, &pretrained)?;
    let mut rng = RngStream::new(cfg.seed, stream_id("policy/init", 0, 0));
    // bootstrap score of a column: mean F_u over its top-quota users
    let quota = exp.quota()?;
    let scores: Vec<f64> = base_cols
        .iter()
        .map(|&c| {
            let users: BTreeSet<UserId> = inputs.top_by_column(c, quota).into_iter().collect();
            let f: Vec<f64> = baselines.f.iter().filter(|(u, _)| users.contains(*u)).map(|(_, v)| *v).collect();
            mean(&f).unwrap_or(0.0)
        })
        .collect();
    let init = bootstrap_init(&cfg.policy, inputs.names.clone(), &scores, &mut rng)?;
    let dir = cfg.out.join("policy");
    fs::create_dir_all(&dir)?;
    let run = train_policy(&exp, &inputs, init, baselines, &cfg.policy, &cfg.reward, &pretrained, &mut |_, _| {})?;
    fs::write(dir.join("rewards.csv"), run.rewards_csv())?;
    if let Some(w) = run.weights_csv() {
        fs::write(dir.join("weights.csv"), w)?;
    }
    run.best_params().save(&dir.join("best.policy"))?;
    run.final_params().save(&dir.join("final.policy"))?;
    write_json(&dir.join("baselines.json"), &run.baselines)?;
    if checksums(&input_files(cfg))? != inputs_before {
        return Err(Error::InvalidInput("input artifacts changed during policy training".into()));
    }
    Ok(run)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Renders report CSVs from an output directory's artifacts and returns the
/// paths written.
pub fn report(out: &Path) -> Result<Vec<PathBuf>> {
    let exp_dir = out.join("experiments");
    let none_path = exp_dir.join("none.json");
    let mut missing = Vec::new();
    if !none_path.exists() {
        missing.push(none_path.display().to_string());
    }
    let mut reports: Vec<StrategyReport> = Vec::new();
    if exp_dir.is_dir() {
        let mut names: Vec<PathBuf> = fs::read_dir(&exp_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        names.sort();
        for p in names {
            reports.push(read_json(&p)?);
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    // none first, then random, then the rest by name
    reports.sort_by_key(|r| (r.strategy != "none", r.strategy != "random", r.strategy.clone()));
    let tables = out.join("tables");
    fs::create_dir_all(&tables)?;
    let mut written = Vec::new();

    let mut t3 = String::from("strategy");
    for m in SUMMARY_METRICS {
        t3.push_str(&format!(",{m}_mean,{m}_se"));
    }
    t3.push_str(",jobs\n");
    for r in &reports {
        t3.push_str(&r.strategy);
        for m in SUMMARY_METRICS {
            let s = r.summary.get(m).copied().unwrap_or_default();
            t3.push_str(&format!(",{},{}", fmt_opt(s.mean), fmt_opt(s.se)));
        }
        t3.push_str(&format!(",{}\n", r.jobs.len()));
    }
    let p = tables.join("recall_table.csv");
    fs::write(&p, t3)?;
    written.push(p);

    let reference = |name: &str| reports.iter().find(|r| r.strategy == name).and_then(|r| r.cold50().mean);
    let mut imp = String::from("strategy,cold@50,vs_none_pct,vs_random_pct\n");
    for r in &reports {
        let c = r.cold50().mean;
        let vs = |base: Option<f64>| match (base, c) {
            (Some(b), Some(n)) => fmt_opt(improvement_pct(b, n)),
            _ => String::new(),
        };
        imp.push_str(&format!("{},{},{},{}\n", r.strategy, fmt_opt(c), vs(reference("none")), vs(reference("random"))));
    }
    let p = tables.join("improvements.csv");
    fs::write(&p, imp)?;
    written.push(p);

    let strat_dir = out.join("stratified");
    if strat_dir.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(&strat_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        let mut t5 = String::from("strategy,partition,without_mean,with_mean,improvement_pct\n");
        let mut bars = String::from("strategy,partition,augmented,mean,se,jobs\n");
        for f in files {
            let s: StratifiedReport = read_json(&f)?;
            for (part, v) in [("selected", &s.selected), ("unselected", &s.unselected)] {
                t5.push_str(&format!(
                    "{},{part},{},{},{}\n",
                    s.strategy,
                    fmt_opt(v.without.mean),
                    fmt_opt(v.with.mean),
                    fmt_opt(v.improvement_pct)
                ));
                for (aug, m) in [(false, v.without), (true, v.with)] {
                    bars.push_str(&format!("{},{part},{aug},{},{},{}\n", s.strategy, fmt_opt(m.mean), fmt_opt(m.se), m.n));
                }
            }
        }
        for (name, body) in [("stratified_improvements.csv", t5), ("stratified_bars.csv", bars)] {
            let p = tables.join(name);
            fs::write(&p, body)?;
            written.push(p);
        }
    }

    let weights = out.join("policy").join("weights.csv");
    if weights.exists() {
        let text = fs::read_to_string(&weights)?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
        if let Some(last) = lines.last() {
            let vals: Vec<&str> = last.split(',').collect();
            let mut body = String::from("feature,weight\n");
            for (h, v) in header.iter().zip(&vals).skip(2) {
                body.push_str(&format!("{h},{v}\n"));
            }
            let p = tables.join("policy_weights.csv");
            fs::write(&p, body)?;
            written.push(p);
        }
    }
    Ok(written)
}

/// Projects rows of `m` onto their leading principal components.
pub fn pca_project(m: &DenseMatrix, k: usize) -> Result<DenseMatrix> {
    Pca::fit(m, k)?.transform(m)
}

/// 64-bit seed for auxiliary streams.
pub fn derive_seed(root: u64, phase: &str) -> u64 {
    RngStream::new(root, stream_id(phase, 0, 0)).next_u64()
}
