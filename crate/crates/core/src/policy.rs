//! User-selection policies: a linear scorer or a small two-layer network,
//! a sigmoid with temperature on top, and quota-constrained sampling.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::UserId;
use crate::error::{format_err, invalid, Error, Result};
use crate::features::FeatureName;
use crate::numerics::{dot, sigmoid, RngStream};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const DEFAULT_MAX_PASSES: usize = 10;
const CHECKPOINT_MAGIC: &[u8; 4] = b"POL1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Linear,
    TwoLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anneal {
    pub decay: f64,
    pub floor: f64,
}

impl Default for Anneal {
    fn default() -> Self {
        Self { decay: 0.9, floor: 0.07 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub features: Vec<FeatureName>,
    /// Append this many PCA dimensions of the user-tower output.
    pub pca_dims: usize,
    pub hidden: usize,
    pub quota_fraction: f64,
    pub temperature: f64,
    pub anneal: Anneal,
    pub w_hi: f64,
    pub w_lo: f64,
    pub learning_rate: f64,
    pub max_passes: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        use FeatureName::*;
        Self {
            kind: PolicyKind::Linear,
            features: vec![MP, AP, CSD, AR, V],
            pca_dims: 0,
            hidden: 5,
            quota_fraction: 0.2,
            temperature: 0.2,
            anneal: Anneal::default(),
            w_hi: 1.0,
            w_lo: 0.2,
            learning_rate: 0.001,
            max_passes: DEFAULT_MAX_PASSES,
        }
    }
}

impl PolicyConfig {
    /// Amazon Sports settings.
    pub fn sports() -> Self {
        use FeatureName::*;
        Self {
            features: vec![RV, CKLD, V, AP, EE],
            temperature: 0.12,
            anneal: Anneal { decay: 1.0, floor: 0.12 },
            learning_rate: 0.02,
            ..Self::default()
        }
    }

    pub fn input_dim(&self) -> usize {
        self.features.len() + self.pca_dims
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.quota_fraction > 0.0 && self.quota_fraction <= 1.0) {
            return Err(invalid(format!("quota fraction {} outside (0, 1]", self.quota_fraction)));
        }
        if !(self.temperature > 0.0) {
            return Err(invalid("policy temperature must be positive"));
        }
        if !(self.anneal.decay > 0.0 && self.anneal.decay <= 1.0) || !(self.anneal.floor > 0.0) {
            return Err(invalid("anneal decay must be in (0, 1] and the floor positive"));
        }
        if self.input_dim() == 0 || self.hidden == 0 {
            return Err(invalid("policy needs at least one input and hidden unit"));
        }
        Ok(())
    }
}

/// Linear(d→h) → LayerNorm(h) → ReLU → Linear(h→1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoLayerNet {
    pub d: usize,
    pub h: usize,
    /// Row-major `h × d`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

struct NetPass {
    normed: Vec<f64>,
    inv_std: f64,
    post: Vec<f64>,
    relu: Vec<f64>,
    logit: f64,
}

impl TwoLayerNet {
    pub fn random(d: usize, h: usize, rng: &mut RngStream) -> Self {
        let l1 = (1.0 / d as f64).sqrt();
        let l2 = (1.0 / h as f64).sqrt();
        Self {
            d,
            h,
            w1: (0..h * d).map(|_| rng.gen_range(-l1..l1)).collect(),
            b1: vec![0.0; h],
            gain: vec![1.0; h],
            bias: vec![0.0; h],
            w2: (0..h).map(|_| rng.gen_range(-l2..l2)).collect(),
            b2: 0.0,
        }
    }

    fn forward(&self, f: &[f64]) -> NetPass {
        let pre: Vec<f64> = (0..self.h).map(|j| self.b1[j] + dot(&self.w1[j * self.d..(j + 1) * self.d], f)).collect();
        let mean = pre.iter().sum::<f64>() / self.h as f64;
        let var = pre.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / self.h as f64;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let normed: Vec<f64> = pre.iter().map(|a| (a - mean) * inv_std).collect();
        let post: Vec<f64> = (0..self.h).map(|j| self.gain[j] * normed[j] + self.bias[j]).collect();
        let relu: Vec<f64> = post.iter().map(|y| y.max(0.0)).collect();
        let logit = dot(&self.w2, &relu) + self.b2;
        NetPass { normed, inv_std, post, relu, logit }
    }

    /// Gradient of the logit w.r.t. the flattened parameters.
    fn logit_grad(&self, f: &[f64]) -> (f64, Vec<f64>) {
        let p = self.forward(f);
        let h = self.h;
        let mut dw1 = vec![0.0; h * self.d];
        let mut db1 = vec![0.0; h];
        let mut dgain = vec![0.0; h];
        let mut dbias = vec![0.0; h];
        let dw2 = p.relu.clone();
        let dpost: Vec<f64> = (0..h).map(|j| if p.post[j] > 0.0 { self.w2[j] } else { 0.0 }).collect();
        for j in 0..h {
            dgain[j] = dpost[j] * p.normed[j];
            dbias[j] = dpost[j];
        }
        let dnorm: Vec<f64> = (0..h).map(|j| dpost[j] * self.gain[j]).collect();
        let m1 = dnorm.iter().sum::<f64>() / h as f64;
        let m2 = dnorm.iter().zip(&p.normed).map(|(a, b)| a * b).sum::<f64>() / h as f64;
        for j in 0..h {
            let da = p.inv_std * (dnorm[j] - m1 - p.normed[j] * m2);
            db1[j] = da;
            for i in 0..self.d {
                dw1[j * self.d + i] = da * f[i];
            }
        }
        let mut g = dw1;
        g.extend(db1);
        g.extend(dgain);
        g.extend(dbias);
        g.extend(dw2);
        g.push(1.0);
        (p.logit, g)
    }

    fn flat(&self) -> Vec<f64> {
        let mut v = self.w1.clone();
        v.extend(&self.b1);
        v.extend(&self.gain);
        v.extend(&self.bias);
        v.extend(&self.w2);
        v.push(self.b2);
        v
    }

    fn set_flat(&mut self, v: &[f64]) {
        let (h, d) = (self.h, self.d);
        let mut it = v.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { (&mut it).take(n).collect() };
        self.w1 = take(h * d);
        self.b1 = take(h);
        self.gain = take(h);
        self.bias = take(h);
        self.w2 = take(h);
        self.b2 = take(1)[0];
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PolicyNet {
    Linear { theta: Vec<f64> },
    TwoLayer(TwoLayerNet),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub net: PolicyNet,
    pub temperature: f64,
    pub anneal: Anneal,
    /// Policy iterations completed.
    pub iteration: usize,
    /// Column names of the input features.
    pub inputs: Vec<String>,
}

impl PolicyParams {
    pub fn linear(theta: Vec<f64>, temperature: f64, anneal: Anneal, inputs: Vec<String>) -> Result<Self> {
        if theta.len() != inputs.len() {
            return Err(invalid("one weight per input feature required"));
        }
        Ok(Self { net: PolicyNet::Linear { theta }, temperature, anneal, iteration: 0, inputs })
    }

    pub fn kind(&self) -> PolicyKind {
        match self.net {
            PolicyNet::Linear { .. } => PolicyKind::Linear,
            PolicyNet::TwoLayer(_) => PolicyKind::TwoLayer,
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.net {
            PolicyNet::Linear { theta } => theta.len(),
            PolicyNet::TwoLayer(n) => n.d,
        }
    }

    pub fn theta(&self) -> Option<&[f64]> {
        match &self.net {
            PolicyNet::Linear { theta } => Some(theta),
            PolicyNet::TwoLayer(_) => None,
        }
    }

    /// All trainable parameters, flattened.
    pub fn flat(&self) -> Vec<f64> {
        match &self.net {
            PolicyNet::Linear { theta } => theta.clone(),
            PolicyNet::TwoLayer(n) => n.flat(),
        }
    }

    pub fn set_flat(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.flat().len() {
            return Err(invalid("parameter vector has the wrong length"));
        }
        match &mut self.net {
            PolicyNet::Linear { theta } => theta.copy_from_slice(v),
            PolicyNet::TwoLayer(n) => n.set_flat(v),
        }
        Ok(())
    }

    fn check_dim(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.input_dim() {
            return Err(invalid(format!("feature vector has {} entries, policy expects {}", f.len(), self.input_dim())));
        }
        Ok(())
    }

    /// `σ(logit / T)`.
    pub fn probability(&self, f: &[f64]) -> Result<f64> {
        Ok(sigmoid(policy_logit(self, f)? / self.temperature))
    }

    /// Gradient of `log σ(logit / T)` w.r.t. the flattened parameters.
    pub fn grad_log_prob(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(f)?;
        let (logit, dlogit) = match &self.net {
            PolicyNet::Linear { theta } => (dot(theta, f), f.to_vec()),
            PolicyNet::TwoLayer(n) => n.logit_grad(f),
        };
        let t = self.temperature;
        let scale = (1.0 - sigmoid(logit / t)) / t;
        Ok(dlogit.into_iter().map(|g| g * scale).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let body = serde_json::to_vec(self).map_err(|e| format_err(e.to_string()))?;
        w.write_all(&(body.len() as u64).to_le_bytes())?;
        w.write_all(&body)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut head = [0u8; 16];
        r.read_exact(&mut head)?;
        if &head[..4] != CHECKPOINT_MAGIC {
            return Err(format_err("not a policy checkpoint"));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(format_err(format!("unsupported policy checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
        let mut body = vec![0u8; len];
        r.read_exact(&mut body)?;
        serde_json::from_slice(&body).map_err(|e| format_err(e.to_string()))
    }

    /// `feature,weight` rows of a linear policy.
    pub fn weights_csv(&self) -> Result<String> {
        let theta = self.theta().ok_or_else(|| invalid("only linear policies export weights"))?;
        let mut out = String::from("feature,weight\n");
        for (name, w) in self.inputs.iter().zip(theta) {
            out.push_str(&format!("{name},{w}\n"));
        }
        Ok(out)
    }
}

pub fn policy_logit(params: &PolicyParams, f: &[f64]) -> Result<f64> {
    params.check_dim(f)?;
    Ok(match &params.net {
        PolicyNet::Linear { theta } => dot(theta, f),
        PolicyNet::TwoLayer(n) => n.forward(f).logit,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// In order of selection.
    pub selected: Vec<UserId>,
    pub probs: BTreeMap<UserId, f64>,
    pub passes_used: usize,
}

/// Users in descending logit order, equal logits in a random order drawn
/// from `rng`.
pub fn rank_users(params: &PolicyParams, features: &[(UserId, Vec<f64>)], rng: &mut RngStream) -> Result<Vec<(UserId, f64)>> {
    let mut scored: Vec<(usize, f64)> =
        features.iter().enumerate().map(|(i, (_, f))| policy_logit(params, f).map(|l| (i, l))).collect::<Result<_>>()?;
    let mut tiebreak: Vec<usize> = (0..features.len()).collect();
    tiebreak.shuffle(rng);
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(tiebreak[a.0].cmp(&tiebreak[b.0])));
    Ok(scored.into_iter().map(|(i, l)| (features[i].0.clone(), l)).collect())
}

/// Walks users in descending logit order drawing `Bernoulli(σ(logit/T))`,
/// repeating over the still-unselected users for up to `max_passes` passes,
/// then fills any shortfall with the highest-logit unselected users.
pub fn select_users(
    params: &PolicyParams,
    features: &[(UserId, Vec<f64>)],
    quota: usize,
    max_passes: usize,
    rng: &mut RngStream,
) -> Result<SelectionResult> {
    if quota > features.len() {
        return Err(invalid(format!("quota {quota} exceeds the {} candidate users", features.len())));
    }
    let ranked = rank_users(params, features, rng)?;
    let probs: BTreeMap<UserId, f64> = ranked.iter().map(|(u, l)| (u.clone(), sigmoid(l / params.temperature))).collect();
    let mut taken = vec![false; ranked.len()];
    let mut selected = Vec::with_capacity(quota);
    let mut passes_used = 0;
    while selected.len() < quota && passes_used < max_passes {
        passes_used += 1;
        for (i, (u, _)) in ranked.iter().enumerate() {
            if selected.len() == quota {
                break;
            }
            if !taken[i] && rng.gen::<f64>() < probs[u] {
                taken[i] = true;
                selected.push(u.clone());
            }
        }
    }
    for (i, (u, _)) in ranked.iter().enumerate() {
        if selected.len() == quota {
            break;
        }
        if !taken[i] {
            taken[i] = true;
            selected.push(u.clone());
        }
    }
    Ok(SelectionResult { selected, probs, passes_used })
}

/// The `quota` highest-logit users, ties by ascending user id.
pub fn top_users(params: &PolicyParams, features: &[(UserId, Vec<f64>)], quota: usize) -> Result<Vec<UserId>> {
    let mut scored: Vec<(&UserId, f64)> = features.iter().map(|(u, f)| policy_logit(params, f).map(|l| (u, l))).collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
    Ok(scored.into_iter().take(quota).map(|(u, _)| u.clone()).collect())
}

/// Initial parameters giving the two best-ranked inputs weight `w_hi` and
/// the rest `w_lo`. `scores[i]` ranks input `i`; ties go to the lower index.
///
/// Two-layer nets scale the first affine layer's input columns the same way.
pub fn bootstrap_init(cfg: &PolicyConfig, inputs: Vec<String>, scores: &[f64], rng: &mut RngStream) -> Result<PolicyParams> {
    cfg.validate()?;
    if scores.len() < 2 {
        return Err(invalid("bootstrap needs at least two ranked features"));
    }
    let d = inputs.len();
    if scores.len() > d {
        return Err(invalid("more ranked features than policy inputs"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut col = vec![cfg.w_lo; d];
    col[order[0]] = cfg.w_hi;
    col[order[1]] = cfg.w_hi;
    let net = match cfg.kind {
        PolicyKind::Linear => PolicyNet::Linear { theta: col },
        PolicyKind::TwoLayer => {
            let mut n = TwoLayerNet::random(d, cfg.hidden, rng);
            for j in 0..n.h {
                for (i, c) in col.iter().enumerate() {
                    n.w1[j * d + i] = n.w1[j * d + i].abs() * c;
                }
            }
            PolicyNet::TwoLayer(n)
        }
    };
    Ok(PolicyParams { net, temperature: cfg.temperature, anneal: cfg.anneal, iteration: 0, inputs })
}

/// `T ← max(floor, T · decay)`.
pub fn anneal_temperature(params: &PolicyParams) -> PolicyParams {
    let mut p = params.clone();
    p.temperature = (p.temperature * p.anneal.decay).max(p.anneal.floor);
    p
}

/// Checks that gradients are finite before applying `θ ← θ + step`.
pub(crate) fn apply_step(params: &PolicyParams, step: &[f64]) -> Result<PolicyParams> {
    if step.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence("non-finite policy gradient".into()));
    }
    let mut p = params.clone();
    let v: Vec<f64> = p.flat().iter().zip(step).map(|(w, s)| w + s).collect();
    p.set_flat(&v)?;
    Ok(p)
}
