//! Per-user reward baselines, REINFORCE updates for the selection policy,
//! and the two-tower jobs that produce rewards.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataset::{SplitDataset, UserId};
use crate::embeddings::EmbeddingTable;
use crate::error::{invalid, Error, Result};
use crate::numerics::{mean, stream_id, RngStream};
use crate::oracle::AugmentationTriple;
use crate::policy::{apply_step, PolicyParams};
use crate::twotower::{train, TowerConfig, TwoTowerModel};

/// Cold recall of one single-feature top-quota selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureArm {
    pub name: String,
    pub recall: f64,
    pub top_set: BTreeSet<UserId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineState {
    pub b0: f64,
    pub f: BTreeMap<UserId, f64>,
    pub b: BTreeMap<UserId, f64>,
    pub alpha_init: f64,
    pub alpha_train: f64,
}

fn check_alpha(a: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&a) {
        return Err(invalid(format!("{what} {a} outside [0, 1]")));
    }
    Ok(())
}

/// `B0` is the mean non-augmented recall, `F_u` the mean recall of the
/// feature arms whose top set contains `u` (`B0` when none does), and
/// `B_u = α·B0 + (1−α)·F_u`.
pub fn init_baselines(
    nonaug_recalls: &[f64],
    arms: &[FeatureArm],
    warm_users: &BTreeSet<UserId>,
    alpha_init: f64,
    alpha_train: f64,
) -> Result<BaselineState> {
    check_alpha(alpha_init, "alpha_init")?;
    check_alpha(alpha_train, "alpha_train")?;
    let b0 = mean(nonaug_recalls).ok_or_else(|| invalid("need at least one non-augmented recall"))?;
    let mut f = BTreeMap::new();
    let mut b = BTreeMap::new();
    for u in warm_users {
        let hits: Vec<f64> = arms.iter().filter(|a| a.top_set.contains(u)).map(|a| a.recall).collect();
        let fu = mean(&hits).unwrap_or(b0);
        f.insert(u.clone(), fu);
        b.insert(u.clone(), alpha_init * b0 + (1.0 - alpha_init) * fu);
    }
    Ok(BaselineState { b0, f, b, alpha_init, alpha_train })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReward {
    pub mean_cr: f64,
    pub per_user_reward: BTreeMap<UserId, f64>,
    pub job_recalls: Vec<f64>,
}

/// `R_u = mean(job_recalls) − B_u` for each selected user.
pub fn compute_rewards(job_recalls: &[f64], baselines: &BaselineState, selected: &[UserId]) -> Result<IterationReward> {
    let mean_cr = mean(job_recalls).ok_or_else(|| invalid("need at least one reward job"))?;
    let mut per_user_reward = BTreeMap::new();
    for u in selected {
        let b = baselines.b.get(u).ok_or_else(|| Error::MissingUser(u.to_string()))?;
        per_user_reward.insert(u.clone(), mean_cr - b);
    }
    Ok(IterationReward { mean_cr, per_user_reward, job_recalls: job_recalls.to_vec() })
}

/// `B_u ← α·B_u + (1−α)·mean_cr` for every user.
pub fn update_baselines(baselines: &BaselineState, mean_cr: f64, alpha_train: f64) -> Result<BaselineState> {
    check_alpha(alpha_train, "alpha_train")?;
    let mut next = baselines.clone();
    for v in next.b.values_mut() {
        *v = alpha_train * *v + (1.0 - alpha_train) * mean_cr;
    }
    Ok(next)
}

fn feature_of<'a>(features: &'a BTreeMap<UserId, Vec<f64>>, u: &UserId) -> Result<&'a [f64]> {
    features.get(u).map(Vec::as_slice).ok_or_else(|| Error::MissingUser(u.to_string()))
}

/// `J(θ) = Σ_u R_u · log π_θ(a=1 | f_u)` over the rewarded users.
pub fn reinforce_objective(params: &PolicyParams, features: &BTreeMap<UserId, Vec<f64>>, rewards: &BTreeMap<UserId, f64>) -> Result<f64> {
    let mut j = 0.0;
    for (u, r) in rewards {
        j += r * params.probability(feature_of(features, u)?)?.ln();
    }
    Ok(j)
}

/// `∇J` w.r.t. the flattened policy parameters.
pub fn reinforce_gradient(params: &PolicyParams, features: &BTreeMap<UserId, Vec<f64>>, rewards: &BTreeMap<UserId, f64>) -> Result<Vec<f64>> {
    let mut g = vec![0.0; params.flat().len()];
    for (u, r) in rewards {
        if *r == 0.0 {
            continue;
        }
        let gl = params.grad_log_prob(feature_of(features, u)?)?;
        g.iter_mut().zip(gl).for_each(|(a, b)| *a += r * b);
    }
    Ok(g)
}

/// One gradient-ascent step `θ ← θ + η∇J`.
pub fn reinforce_update(
    params: &PolicyParams,
    features: &BTreeMap<UserId, Vec<f64>>,
    rewards: &BTreeMap<UserId, f64>,
    learning_rate: f64,
) -> Result<PolicyParams> {
    let g = reinforce_gradient(params, features, rewards)?;
    let step: Vec<f64> = g.iter().map(|x| learning_rate * x).collect();
    apply_step(params, &step)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RewardMode {
    /// Train from scratch for the configured number of epochs.
    Full,
    /// Continue a pretrained checkpoint for a few epochs.
    FineTune { epochs: usize },
    /// Train from scratch for a few epochs.
    EarlyStop { epochs: usize },
}

impl RewardMode {
    pub const FINE_TUNE: RewardMode = RewardMode::FineTune { epochs: 3 };
    pub const EARLY_STOP: RewardMode = RewardMode::EarlyStop { epochs: 5 };
}

/// Per-job seed derived from a root seed.
pub fn job_seed(root: u64, phase: &str, iteration: u64, job: u64) -> u64 {
    use rand::RngCore;
    RngStream::new(root, stream_id(phase, iteration, job)).next_u64()
}

/// Best-epoch cold recall@50 of one two-tower job.
pub fn reward_job(
    mode: RewardMode,
    pretrained: Option<&TwoTowerModel>,
    split: &SplitDataset,
    embeddings: &EmbeddingTable,
    triples: &[AugmentationTriple],
    tower: &TowerConfig,
    seed: u64,
) -> Result<f64> {
    let aug = (!triples.is_empty()).then_some(triples);
    let report = match mode {
        RewardMode::FineTune { epochs } => {
            let base = pretrained.ok_or_else(|| invalid("fine-tune rewards need a pretrained checkpoint"))?;
            let mut model = base.clone();
            model.config_mut().seed = seed;
            train(&mut model, split, aug, epochs, &mut ())?
        }
        RewardMode::EarlyStop { epochs } => fresh_run(split, embeddings, aug, tower, seed, epochs)?,
        RewardMode::Full => fresh_run(split, embeddings, aug, tower, seed, tower.epochs)?,
    };
    report.best_cold_recall().ok_or_else(|| Error::Degenerate("test set has no cold-item examples".into()))
}

fn fresh_run(
    split: &SplitDataset,
    embeddings: &EmbeddingTable,
    aug: Option<&[AugmentationTriple]>,
    tower: &TowerConfig,
    seed: u64,
    epochs: usize,
) -> Result<crate::twotower::EvalReport> {
    let cfg = TowerConfig { seed, ..tower.clone() };
    let mut rng = RngStream::new(seed, stream_id("two-tower/init", 0, 0));
    let mut model = TwoTowerModel::init(cfg, split, embeddings, &mut rng)?;
    train(&mut model, split, aug, epochs, &mut ())
}

/// [`reward_job`] restricted to the two proxy modes.
pub fn proxy_reward(
    mode: RewardMode,
    pretrained: Option<&TwoTowerModel>,
    split: &SplitDataset,
    embeddings: &EmbeddingTable,
    triples: &[AugmentationTriple],
    tower: &TowerConfig,
    seed: u64,
) -> Result<f64> {
    if mode == RewardMode::Full {
        return Err(invalid("proxy rewards use fine-tune or early-stop mode"));
    }
    reward_job(mode, pretrained, split, embeddings, triples, tower, seed)
}
