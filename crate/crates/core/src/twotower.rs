//! Two-tower retrieval model trained with in-batch softmax plus LogQ
//! correction, with an auxiliary BPR loss over augmentation triples.
//!
//! The user tower reads a user ID embedding. The item tower reads the
//! concatenation of an item ID embedding and the item's fixed metadata
//! embedding. Warm items own an ID row; every other item is routed to one of
//! `hash_buckets` shared rows so that cold items are never scored through a
//! private, never-trained row.
//!
//! All arithmetic is `f64`. Gradients are hand-derived and checked against
//! central finite differences in the test suite.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Interaction, ItemId, SplitDataset, UserId};
use crate::embeddings::EmbeddingTable;
use crate::error::{format_err, invalid, Error, Result};
use crate::numerics::{dot, fnv1a64_extend, log_sigmoid, sigmoid, stream_id, DenseMatrix, RngStream};
use crate::oracle::AugmentationTriple;

pub const DEFAULT_KS: [usize; 3] = [5, 10, 50];
/// Cutoff whose cold recall drives best-epoch selection and rewards.
pub const REWARD_K: usize = 50;
const ADAGRAD_INIT: f64 = 0.1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"CTT1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TowerConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub softmax_temperature: f64,
    pub use_cosine: bool,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub aug_batch_size: usize,
    pub bpr_coefficient: f64,
    pub epochs: usize,
    pub hash_buckets: usize,
    pub seed: u64,
}

impl Default for TowerConfig {
    /// Desk-scale dimensions.
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden_dim: 128,
            output_dim: 32,
            softmax_temperature: 0.1,
            use_cosine: true,
            dropout_rate: 0.01,
            learning_rate: 0.2,
            batch_size: 256,
            aug_batch_size: 8,
            bpr_coefficient: 0.1,
            epochs: 30,
            hash_buckets: 64,
            seed: 0,
        }
    }
}

impl TowerConfig {
    /// Full-size Amazon Beauty settings.
    pub fn beauty() -> Self {
        Self {
            embed_dim: 1024,
            hidden_dim: 2048,
            output_dim: 512,
            learning_rate: 7e-4,
            bpr_coefficient: 0.01,
            batch_size: 256,
            aug_batch_size: 8,
            hash_buckets: 1024,
            ..Self::default()
        }
    }

    /// Full-size Amazon Sports settings.
    pub fn sports() -> Self {
        Self { batch_size: 512, aug_batch_size: 16, ..Self::beauty() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(invalid("tower dimensions must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(invalid(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(self.softmax_temperature > 0.0) {
            return Err(invalid("softmax temperature must be positive"));
        }
        if self.hash_buckets == 0 {
            return Err(invalid("need at least one hash bucket"));
        }
        if self.batch_size < 2 {
            return Err(invalid("in-batch softmax needs batches of at least 2"));
        }
        Ok(())
    }
}

/// Two affine layers with a rectifier and dropout in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

#[derive(Clone, Debug)]
struct TowerPass {
    input: Vec<f64>,
    pre: Vec<f64>,
    /// Inverted-dropout multipliers, absent at inference.
    mask: Option<Vec<f64>>,
    hidden: Vec<f64>,
    out: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrad {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpGrad {
    fn zeros(m: &Mlp) -> Self {
        Self { w1: vec![0.0; m.w1.len()], b1: vec![0.0; m.b1.len()], w2: vec![0.0; m.w2.len()], b2: vec![0.0; m.b2.len()] }
    }

    fn add_scaled(&mut self, o: &Self, c: f64) {
        for (a, b) in [(&mut self.w1, &o.w1), (&mut self.b1, &o.b1), (&mut self.w2, &o.w2), (&mut self.b2, &o.b2)] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += c * y);
        }
    }
}

fn uniform(rng: &mut RngStream, n: usize, limit: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

impl Mlp {
    fn new(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut RngStream) -> Self {
        let l1 = (6.0 / (in_dim + hidden) as f64).sqrt();
        let l2 = (6.0 / (hidden + out_dim) as f64).sqrt();
        Self {
            in_dim,
            hidden,
            out_dim,
            w1: uniform(rng, hidden * in_dim, l1),
            b1: vec![0.0; hidden],
            w2: uniform(rng, out_dim * hidden, l2),
            b2: vec![0.0; out_dim],
        }
    }

    fn forward(&self, input: Vec<f64>, dropout: Option<(&mut RngStream, f64)>) -> TowerPass {
        let mut pre = self.b1.clone();
        for (h, p) in pre.iter_mut().enumerate() {
            *p += dot(&self.w1[h * self.in_dim..(h + 1) * self.in_dim], &input);
        }
        let mask = dropout.filter(|(_, rate)| *rate > 0.0).map(|(rng, rate)| {
            let keep = 1.0 / (1.0 - rate);
            (0..self.hidden).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect::<Vec<f64>>()
        });
        let hidden: Vec<f64> = pre
            .iter()
            .enumerate()
            .map(|(h, &p)| {
                let r = p.max(0.0);
                mask.as_ref().map_or(r, |m| r * m[h])
            })
            .collect();
        let mut out = self.b2.clone();
        for (o, y) in out.iter_mut().enumerate() {
            *y += dot(&self.w2[o * self.hidden..(o + 1) * self.hidden], &hidden);
        }
        TowerPass { input, pre, mask, hidden, out }
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&self, pass: &TowerPass, dout: &[f64], grad: &mut MlpGrad) -> Vec<f64> {
        let mut dhidden = vec![0.0; self.hidden];
        for (o, &d) in dout.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grad.b2[o] += d;
            let row = o * self.hidden;
            for h in 0..self.hidden {
                grad.w2[row + h] += d * pass.hidden[h];
                dhidden[h] += d * self.w2[row + h];
            }
        }
        let mut dinput = vec![0.0; self.in_dim];
        for h in 0..self.hidden {
            if pass.pre[h] <= 0.0 {
                continue;
            }
            let d = dhidden[h] * pass.mask.as_ref().map_or(1.0, |m| m[h]);
            if d == 0.0 {
                continue;
            }
            grad.b1[h] += d;
            let row = h * self.in_dim;
            for i in 0..self.in_dim {
                grad.w1[row + i] += d * pass.input[i];
                dinput[i] += d * self.w1[row + i];
            }
        }
        dinput
    }

    fn groups_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn groups(&self) -> [&Vec<f64>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }
}

/// Indices of a `(user, item)` training example inside a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Example {
    pub user: usize,
    pub item: usize,
}

/// Indices of an augmentation triple inside a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairExample {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

/// Gradients of a loss with respect to every model parameter. Embedding
/// gradients are kept sparse by row.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub user_rows: BTreeMap<usize, Vec<f64>>,
    pub item_rows: BTreeMap<usize, Vec<f64>>,
    pub user_tower: MlpGrad,
    pub item_tower: MlpGrad,
}

fn add_row(map: &mut BTreeMap<usize, Vec<f64>>, row: usize, g: &[f64], c: f64) {
    let dst = map.entry(row).or_insert_with(|| vec![0.0; g.len()]);
    dst.iter_mut().zip(g).for_each(|(d, x)| *d += c * x);
}

impl Gradients {
    fn zeros(m: &TwoTowerModel) -> Self {
        Self {
            user_rows: BTreeMap::new(),
            item_rows: BTreeMap::new(),
            user_tower: MlpGrad::zeros(&m.user_tower),
            item_tower: MlpGrad::zeros(&m.item_tower),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, c: f64) {
        for (r, g) in &other.user_rows {
            add_row(&mut self.user_rows, *r, g, c);
        }
        for (r, g) in &other.item_rows {
            add_row(&mut self.item_rows, *r, g, c);
        }
        self.user_tower.add_scaled(&other.user_tower, c);
        self.item_tower.add_scaled(&other.item_tower, c);
    }

    fn all_finite(&self) -> bool {
        let rows = self.user_rows.values().chain(self.item_rows.values()).flatten();
        let towers = [&self.user_tower, &self.item_tower]
            .into_iter()
            .flat_map(|t| t.w1.iter().chain(&t.b1).chain(&t.w2).chain(&t.b2));
        rows.chain(towers).all(|v| v.is_finite())
    }

    /// Dense view in the order of [`TwoTowerModel::parameter_groups_mut`].
    pub fn dense(&self, model: &TwoTowerModel) -> Vec<(&'static str, Vec<f64>)> {
        let e = model.config.embed_dim;
        let mut user = vec![0.0; model.user_emb.len()];
        for (r, g) in &self.user_rows {
            user[r * e..(r + 1) * e].copy_from_slice(g);
        }
        let mut item = vec![0.0; model.item_emb.len()];
        for (r, g) in &self.item_rows {
            item[r * e..(r + 1) * e].copy_from_slice(g);
        }
        let ut = &self.user_tower;
        let it = &self.item_tower;
        vec![
            ("user_embeddings", user),
            ("item_embeddings", item),
            ("user_tower.w1", ut.w1.clone()),
            ("user_tower.b1", ut.b1.clone()),
            ("user_tower.w2", ut.w2.clone()),
            ("user_tower.b2", ut.b2.clone()),
            ("item_tower.w1", it.w1.clone()),
            ("item_tower.b1", it.b1.clone()),
            ("item_tower.w2", it.w2.clone()),
            ("item_tower.b2", it.b2.clone()),
        ]
    }
}

/// Output of one tower pass plus what backprop needs.
struct Side {
    pass: TowerPass,
    /// Normalized output when scoring by cosine, raw output otherwise.
    vec: Vec<f64>,
    norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoTowerModel {
    config: TowerConfig,
    user_ids: Vec<UserId>,
    user_index: BTreeMap<UserId, usize>,
    /// All items of the dataset, sorted.
    item_ids: Vec<ItemId>,
    item_index: BTreeMap<ItemId, usize>,
    /// Item position → embedding row (private for warm items, bucket otherwise).
    item_row: Vec<usize>,
    cold: Vec<bool>,
    /// `log q` of each item; `-inf` for items without train interactions.
    log_q: Vec<f64>,
    n_private_rows: usize,
    meta_dim: usize,
    meta: Vec<f64>,
    user_emb: Vec<f64>,
    item_emb: Vec<f64>,
    user_tower: Mlp,
    item_tower: Mlp,
    /// Adagrad accumulators, same layout as the parameter groups.
    accum: Vec<Vec<f64>>,
}

/// Bucket row of a non-warm item.
pub fn hash_bucket(item: &ItemId, buckets: usize, seed: u64) -> usize {
    let h = fnv1a64_extend(0xcbf2_9ce4_8422_2325, &seed.to_le_bytes());
    (fnv1a64_extend(h, item.as_str().as_bytes()) % buckets as u64) as usize
}

impl TwoTowerModel {
    /// Builds a freshly initialized model over the users and items of `split`.
    pub fn init(config: TowerConfig, split: &SplitDataset, embeddings: &EmbeddingTable, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let user_ids: Vec<UserId> = split.warm_users.iter().cloned().collect();
        let user_index = user_ids.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect();
        let item_ids = split.item_universe();
        let item_index: BTreeMap<ItemId, usize> = item_ids.iter().enumerate().map(|(i, x)| (x.clone(), i)).collect();
        let warm: Vec<&ItemId> = split.unigram.keys().collect();
        let private: BTreeMap<&ItemId, usize> = warm.iter().enumerate().map(|(r, i)| (*i, r)).collect();
        let n_private_rows = private.len();
        let mut item_row = Vec::with_capacity(item_ids.len());
        let mut cold = Vec::with_capacity(item_ids.len());
        let mut log_q = Vec::with_capacity(item_ids.len());
        let meta_dim = embeddings.dim();
        let mut meta = Vec::with_capacity(item_ids.len() * meta_dim);
        for item in &item_ids {
            match private.get(item) {
                Some(&r) => item_row.push(r),
                None => item_row.push(n_private_rows + hash_bucket(item, config.hash_buckets, config.seed)),
            }
            cold.push(split.is_cold(item));
            log_q.push(split.unigram.get(item).map_or(f64::NEG_INFINITY, |p| p.ln()));
            meta.extend_from_slice(embeddings.require(item)?);
        }
        let e = config.embed_dim;
        let emb_limit = (3.0 / e as f64).sqrt();
        let user_emb = uniform(rng, user_ids.len() * e, emb_limit);
        let item_emb = uniform(rng, (n_private_rows + config.hash_buckets) * e, emb_limit);
        let user_tower = Mlp::new(e, config.hidden_dim, config.output_dim, rng);
        let item_tower = Mlp::new(e + meta_dim, config.hidden_dim, config.output_dim, rng);
        let mut model = Self {
            config,
            user_ids,
            user_index,
            item_ids,
            item_index,
            item_row,
            cold,
            log_q,
            n_private_rows,
            meta_dim,
            meta,
            user_emb,
            item_emb,
            user_tower,
            item_tower,
            accum: Vec::new(),
        };
        model.accum = model.parameter_groups().iter().map(|(_, g)| vec![ADAGRAD_INIT; g.len()]).collect();
        Ok(model)
    }

    pub fn config(&self) -> &TowerConfig {
        &self.config
    }

    /// Mutable access to the hyperparameters, e.g. to lower the step size
    /// before fine-tuning. Dimensions must not change.
    pub fn config_mut(&mut self) -> &mut TowerConfig {
        &mut self.config
    }

    pub fn user_ids(&self) -> &[UserId] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[ItemId] {
        &self.item_ids
    }

    pub fn user_position(&self, user: &UserId) -> Option<usize> {
        self.user_index.get(user).copied()
    }

    pub fn item_position(&self, item: &ItemId) -> Option<usize> {
        self.item_index.get(item).copied()
    }

    /// Embedding row used for the item at position `pos`.
    pub fn item_embedding_row(&self, pos: usize) -> usize {
        self.item_row[pos]
    }

    pub fn n_private_item_rows(&self) -> usize {
        self.n_private_rows
    }

    pub fn is_cold_position(&self, pos: usize) -> bool {
        self.cold[pos]
    }

    pub fn example(&self, user: &UserId, item: &ItemId) -> Result<Example> {
        Ok(Example {
            user: self.user_position(user).ok_or_else(|| Error::MissingUser(user.to_string()))?,
            item: self.item_position(item).ok_or_else(|| invalid(format!("unknown item {item}")))?,
        })
    }

    pub fn pair_example(&self, t: &AugmentationTriple) -> Result<PairExample> {
        let pos = self.example(&t.user, &t.pos)?;
        let neg = self.item_position(&t.neg).ok_or_else(|| invalid(format!("unknown item {}", t.neg)))?;
        Ok(PairExample { user: pos.user, pos: pos.item, neg })
    }

    fn user_input(&self, u: usize) -> Vec<f64> {
        let e = self.config.embed_dim;
        self.user_emb[u * e..(u + 1) * e].to_vec()
    }

    fn item_input(&self, pos: usize) -> Vec<f64> {
        let e = self.config.embed_dim;
        let r = self.item_row[pos];
        let mut x = Vec::with_capacity(e + self.meta_dim);
        x.extend_from_slice(&self.item_emb[r * e..(r + 1) * e]);
        x.extend_from_slice(&self.meta[pos * self.meta_dim..(pos + 1) * self.meta_dim]);
        x
    }

    fn finish(&self, pass: TowerPass) -> Side {
        if self.config.use_cosine {
            let norm = dot(&pass.out, &pass.out).sqrt().max(1e-12);
            let vec = pass.out.iter().map(|x| x / norm).collect();
            Side { pass, vec, norm }
        } else {
            let vec = pass.out.clone();
            Side { pass, vec, norm: 1.0 }
        }
    }

    fn user_side(&self, u: usize, rng: Option<&mut RngStream>) -> Side {
        let rate = self.config.dropout_rate;
        self.finish(self.user_tower.forward(self.user_input(u), rng.map(|r| (r, rate))))
    }

    fn item_side(&self, pos: usize, rng: Option<&mut RngStream>) -> Side {
        let rate = self.config.dropout_rate;
        self.finish(self.item_tower.forward(self.item_input(pos), rng.map(|r| (r, rate))))
    }

    /// Backprop from the gradient w.r.t. the (possibly normalized) output.
    fn back_user(&self, side: &Side, dvec: &[f64], u: usize, grads: &mut Gradients) {
        let dout = self.unnormalize_grad(side, dvec);
        let dx = self.user_tower.backward(&side.pass, &dout, &mut grads.user_tower);
        add_row(&mut grads.user_rows, u, &dx, 1.0);
    }

    fn back_item(&self, side: &Side, dvec: &[f64], pos: usize, grads: &mut Gradients) {
        let dout = self.unnormalize_grad(side, dvec);
        let dx = self.item_tower.backward(&side.pass, &dout, &mut grads.item_tower);
        add_row(&mut grads.item_rows, self.item_row[pos], &dx[..self.config.embed_dim], 1.0);
    }

    fn unnormalize_grad(&self, side: &Side, dvec: &[f64]) -> Vec<f64> {
        if self.config.use_cosine {
            let proj = dot(&side.vec, dvec);
            side.vec.iter().zip(dvec).map(|(v, d)| (d - v * proj) / side.norm).collect()
        } else {
            dvec.to_vec()
        }
    }

    /// Inference-mode user vector (normalized when scoring by cosine).
    pub fn user_vector(&self, u: usize) -> Vec<f64> {
        self.user_side(u, None).vec
    }

    pub fn item_vector(&self, pos: usize) -> Vec<f64> {
        self.item_side(pos, None).vec
    }

    /// Cosine (or dot) score of a warm user and any item of the universe.
    pub fn score(&self, user: &UserId, item: &ItemId) -> Result<f64> {
        let ex = self.example(user, item)?;
        Ok(dot(&self.user_vector(ex.user), &self.item_vector(ex.item)))
    }

    /// In-batch softmax cross-entropy with LogQ correction, averaged over rows.
    ///
    /// `rng` enables dropout; pass `None` for a deterministic evaluation.
    pub fn ibs_logq_loss_and_grad(&self, batch: &[Example], mut rng: Option<&mut RngStream>) -> Result<(f64, Gradients)> {
        let b = batch.len();
        if b < 2 {
            return Err(Error::InvalidBatch(format!("in-batch softmax needs at least 2 rows, got {b}")));
        }
        for ex in batch {
            if !self.log_q[ex.item].is_finite() {
                return Err(Error::InvalidBatch(format!("item {} has zero unigram probability", self.item_ids[ex.item])));
            }
        }
        let users: Vec<Side> = batch.iter().map(|ex| self.user_side(ex.user, rng.as_deref_mut())).collect();
        let items: Vec<Side> = batch.iter().map(|ex| self.item_side(ex.item, rng.as_deref_mut())).collect();
        let tau = self.config.softmax_temperature;
        let mut loss = 0.0;
        // dscore[i][j] = ∂loss/∂(u_i · v_j)
        let mut dscore = vec![0.0; b * b];
        for i in 0..b {
            let logits: Vec<f64> =
                (0..b).map(|j| dot(&users[i].vec, &items[j].vec) / tau - self.log_q[batch[j].item]).collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            let lse = mx + z.ln();
            loss += lse - logits[i];
            for j in 0..b {
                let p = (logits[j] - lse).exp();
                let g = (p - if i == j { 1.0 } else { 0.0 }) / b as f64;
                dscore[i * b + j] = g / tau;
            }
        }
        loss /= b as f64;
        let d = self.config.output_dim;
        let mut grads = Gradients::zeros(self);
        for i in 0..b {
            let mut du = vec![0.0; d];
            for j in 0..b {
                let g = dscore[i * b + j];
                du.iter_mut().zip(&items[j].vec).for_each(|(a, v)| *a += g * v);
            }
            self.back_user(&users[i], &du, batch[i].user, &mut grads);
        }
        for j in 0..b {
            let mut dv = vec![0.0; d];
            for i in 0..b {
                let g = dscore[i * b + j];
                dv.iter_mut().zip(&users[i].vec).for_each(|(a, u)| *a += g * u);
            }
            self.back_item(&items[j], &dv, batch[j].item, &mut grads);
        }
        Ok((loss, grads))
    }

    /// `−Σ log σ(ŷ_pos − ŷ_neg)` over the triples.
    pub fn bpr_loss_and_grad(&self, triples: &[PairExample], mut rng: Option<&mut RngStream>) -> Result<(f64, Gradients)> {
        let mut grads = Gradients::zeros(self);
        let mut loss = 0.0;
        for t in triples {
            let u = self.user_side(t.user, rng.as_deref_mut());
            let p = self.item_side(t.pos, rng.as_deref_mut());
            let n = self.item_side(t.neg, rng.as_deref_mut());
            let diff = dot(&u.vec, &p.vec) - dot(&u.vec, &n.vec);
            loss -= log_sigmoid(diff);
            let g = -sigmoid(-diff);
            let du: Vec<f64> = p.vec.iter().zip(&n.vec).map(|(a, b)| g * (a - b)).collect();
            let dp: Vec<f64> = u.vec.iter().map(|x| g * x).collect();
            let dn: Vec<f64> = dp.iter().map(|x| -x).collect();
            self.back_user(&u, &du, t.user, &mut grads);
            self.back_item(&p, &dp, t.pos, &mut grads);
            self.back_item(&n, &dn, t.neg, &mut grads);
        }
        Ok((loss, grads))
    }

    /// Parameter groups in a fixed order, for optimizers and gradient checks.
    pub fn parameter_groups(&self) -> Vec<(&'static str, &Vec<f64>)> {
        let [uw1, ub1, uw2, ub2] = self.user_tower.groups();
        let [iw1, ib1, iw2, ib2] = self.item_tower.groups();
        vec![
            ("user_embeddings", &self.user_emb),
            ("item_embeddings", &self.item_emb),
            ("user_tower.w1", uw1),
            ("user_tower.b1", ub1),
            ("user_tower.w2", uw2),
            ("user_tower.b2", ub2),
            ("item_tower.w1", iw1),
            ("item_tower.b1", ib1),
            ("item_tower.w2", iw2),
            ("item_tower.b2", ib2),
        ]
    }

    pub fn parameter_groups_mut(&mut self) -> Vec<(&'static str, &mut Vec<f64>)> {
        let [uw1, ub1, uw2, ub2] = self.user_tower.groups_mut();
        let [iw1, ib1, iw2, ib2] = self.item_tower.groups_mut();
        vec![
            ("user_embeddings", &mut self.user_emb),
            ("item_embeddings", &mut self.item_emb),
            ("user_tower.w1", uw1),
            ("user_tower.b1", ub1),
            ("user_tower.w2", uw2),
            ("user_tower.b2", ub2),
            ("item_tower.w1", iw1),
            ("item_tower.b1", ib1),
            ("item_tower.w2", iw2),
            ("item_tower.b2", ib2),
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_groups().iter().map(|(_, g)| g.len()).sum()
    }

    /// One Adagrad step. Embedding rows without a gradient are left untouched.
    pub fn adagrad_step(&mut self, grads: &Gradients) {
        let lr = self.config.learning_rate;
        let e = self.config.embed_dim;
        let mut accum = std::mem::take(&mut self.accum);
        {
            let apply = |w: &mut [f64], acc: &mut [f64], g: &[f64]| {
                for ((w, a), g) in w.iter_mut().zip(acc.iter_mut()).zip(g) {
                    *a += g * g;
                    *w -= lr * g / a.sqrt();
                }
            };
            for (r, g) in &grads.user_rows {
                apply(&mut self.user_emb[r * e..(r + 1) * e], &mut accum[0][r * e..(r + 1) * e], g);
            }
            for (r, g) in &grads.item_rows {
                apply(&mut self.item_emb[r * e..(r + 1) * e], &mut accum[1][r * e..(r + 1) * e], g);
            }
            let ut = &grads.user_tower;
            let it = &grads.item_tower;
            let dense = [&ut.w1, &ut.b1, &ut.w2, &ut.b2, &it.w1, &it.b1, &it.w2, &it.b2];
            let [uw1, ub1, uw2, ub2] = self.user_tower.groups_mut();
            let [iw1, ib1, iw2, ib2] = self.item_tower.groups_mut();
            let params = [uw1, ub1, uw2, ub2, iw1, ib1, iw2, ib2];
            for (k, (p, g)) in params.into_iter().zip(dense).enumerate() {
                apply(p, &mut accum[2 + k], g);
            }
        }
        self.accum = accum;
    }

    /// User-tower outputs (inference mode) for every warm user, row order of
    /// [`user_ids`](Self::user_ids).
    pub fn extract_user_top_embeddings(&self) -> DenseMatrix {
        let rows: Vec<Vec<f64>> = (0..self.user_ids.len()).map(|u| self.user_side(u, None).pass.out).collect();
        DenseMatrix::from_rows(&rows).expect("finite tower outputs")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_checkpoint(&mut BufReader::new(File::open(path)?))
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        put_u32(w, CHECKPOINT_VERSION)?;
        let cfg = serde_json::to_string(&self.config).map_err(|e| format_err(e.to_string()))?;
        put_str(w, &cfg)?;
        put_u64(w, self.user_ids.len() as u64)?;
        for u in &self.user_ids {
            put_str(w, u.as_str())?;
        }
        put_u64(w, self.item_ids.len() as u64)?;
        for (pos, item) in self.item_ids.iter().enumerate() {
            put_str(w, item.as_str())?;
            put_u64(w, self.item_row[pos] as u64)?;
            w.write_all(&[u8::from(self.cold[pos])])?;
            put_f64s(w, &[self.log_q[pos]])?;
        }
        put_u64(w, self.n_private_rows as u64)?;
        put_u64(w, self.meta_dim as u64)?;
        put_f64s(w, &self.meta)?;
        for (_, g) in self.parameter_groups() {
            put_f64s(w, g)?;
        }
        for a in &self.accum {
            put_f64s(w, a)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(format_err("not a two-tower checkpoint"));
        }
        let version = get_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(format_err(format!("unsupported checkpoint version {version}")));
        }
        let config: TowerConfig = serde_json::from_str(&get_str(r)?).map_err(|e| format_err(e.to_string()))?;
        config.validate()?;
        let n_users = get_u64(r)? as usize;
        let user_ids: Vec<UserId> = (0..n_users).map(|_| get_str(r).map(UserId::from)).collect::<Result<_>>()?;
        let n_items = get_u64(r)? as usize;
        let mut item_ids = Vec::with_capacity(n_items);
        let mut item_row = Vec::with_capacity(n_items);
        let mut cold = Vec::with_capacity(n_items);
        let mut log_q = Vec::with_capacity(n_items);
        for _ in 0..n_items {
            item_ids.push(ItemId::from(get_str(r)?));
            item_row.push(get_u64(r)? as usize);
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            cold.push(flag[0] != 0);
            log_q.push(get_f64s(r)?[0]);
        }
        let n_private_rows = get_u64(r)? as usize;
        let meta_dim = get_u64(r)? as usize;
        let meta = get_f64s(r)?;
        let e = config.embed_dim;
        let mut rng = RngStream::new(0, 0);
        let mut model = Self {
            user_index: user_ids.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect(),
            item_index: item_ids.iter().enumerate().map(|(i, x)| (x.clone(), i)).collect(),
            user_emb: Vec::new(),
            item_emb: Vec::new(),
            user_tower: Mlp::new(e, config.hidden_dim, config.output_dim, &mut rng),
            item_tower: Mlp::new(e + meta_dim, config.hidden_dim, config.output_dim, &mut rng),
            config,
            user_ids,
            item_ids,
            item_row,
            cold,
            log_q,
            n_private_rows,
            meta_dim,
            meta,
            accum: Vec::new(),
        };
        let expected: Vec<usize> = {
            let h = model.config.hidden_dim;
            let o = model.config.output_dim;
            vec![
                n_users * e,
                (n_private_rows + model.config.hash_buckets) * e,
                h * e,
                h,
                o * h,
                o,
                h * (e + meta_dim),
                h,
                o * h,
                o,
            ]
        };
        if model.meta.len() != n_items * meta_dim {
            return Err(format_err("checkpoint metadata block has the wrong size"));
        }
        for ((name, g), want) in model.parameter_groups_mut().into_iter().zip(&expected) {
            let v = get_f64s(r)?;
            if v.len() != *want {
                return Err(format_err(format!("parameter group {name} has {} values, expected {want}", v.len())));
            }
            *g = v;
        }
        for want in &expected {
            let v = get_f64s(r)?;
            if v.len() != *want {
                return Err(format_err("optimizer state does not match parameters"));
            }
            model.accum.push(v);
        }
        Ok(model)
    }
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    put_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn put_f64s<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    put_u64(w, v.len() as u64)?;
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_str<R: Read>(r: &mut R) -> Result<String> {
    let n = get_u64(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| format_err("checkpoint string is not UTF-8"))
}

fn get_f64s<R: Read>(r: &mut R) -> Result<Vec<f64>> {
    let n = get_u64(r)? as usize;
    let mut b = vec![0u8; n * 8];
    r.read_exact(&mut b)?;
    Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Which test positives count towards a recall.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositiveKind {
    All,
    Cold,
    Warm,
}

#[derive(Clone, Copy, Debug)]
pub enum UserScope<'a> {
    All,
    In(&'a BTreeSet<UserId>),
    NotIn(&'a BTreeSet<UserId>),
}

#[derive(Clone, Copy, Debug)]
pub struct EvalFilter<'a> {
    pub positives: PositiveKind,
    pub users: UserScope<'a>,
}

impl<'a> EvalFilter<'a> {
    pub const ALL: EvalFilter<'static> = EvalFilter { positives: PositiveKind::All, users: UserScope::All };
    pub const COLD: EvalFilter<'static> = EvalFilter { positives: PositiveKind::Cold, users: UserScope::All };
    pub const WARM: EvalFilter<'static> = EvalFilter { positives: PositiveKind::Warm, users: UserScope::All };

    pub fn users_in(positives: PositiveKind, set: &'a BTreeSet<UserId>) -> Self {
        Self { positives, users: UserScope::In(set) }
    }

    pub fn users_not_in(positives: PositiveKind, set: &'a BTreeSet<UserId>) -> Self {
        Self { positives, users: UserScope::NotIn(set) }
    }

    fn admits_user(&self, u: &UserId) -> bool {
        match self.users {
            UserScope::All => true,
            UserScope::In(s) => s.contains(u),
            UserScope::NotIn(s) => !s.contains(u),
        }
    }

    fn admits_item(&self, cold: bool) -> bool {
        match self.positives {
            PositiveKind::All => true,
            PositiveKind::Cold => cold,
            PositiveKind::Warm => !cold,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecallCount {
    pub hits: usize,
    pub examples: usize,
    /// Filtered examples whose user has no trained embedding.
    pub skipped_unknown_users: usize,
}

impl RecallCount {
    /// `None` when no example passed the filter.
    pub fn recall(&self) -> Option<f64> {
        (self.examples > 0).then(|| self.hits as f64 / self.examples as f64)
    }
}

/// Rank of each filtered test example's positive among all items, with ties
/// resolved towards the smaller item id. `None` for unknown users.
fn positive_ranks(model: &TwoTowerModel, test: &[Interaction], filter: &EvalFilter<'_>, cache: &ScoreCache) -> Vec<Option<usize>> {
    test.par_iter()
        .filter(|x| {
            let cold = model.item_position(&x.item).map_or(true, |p| model.cold[p]);
            filter.admits_item(cold) && filter.admits_user(&x.user)
        })
        .map(|x| {
            let u = model.user_position(&x.user)?;
            let p = model.item_position(&x.item)?;
            let uv = model.user_vector(u);
            let sp = dot(&uv, &cache.items[p]);
            let mut rank = 0;
            for (j, iv) in cache.items.iter().enumerate() {
                let s = dot(&uv, iv);
                if s > sp || (s == sp && j < p) {
                    rank += 1;
                }
            }
            Some(rank)
        })
        .collect()
}

/// Inference-mode item vectors of the whole universe.
pub struct ScoreCache {
    items: Vec<Vec<f64>>,
}

impl ScoreCache {
    pub fn new(model: &TwoTowerModel) -> Self {
        Self { items: (0..model.item_ids.len()).into_par_iter().map(|p| model.item_vector(p)).collect() }
    }
}

fn count_hits(ranks: &[Option<usize>], k: usize) -> RecallCount {
    let mut c = RecallCount::default();
    for r in ranks {
        match r {
            Some(r) => {
                c.examples += 1;
                c.hits += usize::from(*r < k);
            }
            None => c.skipped_unknown_users += 1,
        }
    }
    c
}

/// Fraction of filtered test examples whose positive ranks in the top `k`
/// over every item of the model.
pub fn recall_at_k(model: &TwoTowerModel, test: &[Interaction], k: usize, filter: &EvalFilter<'_>) -> Result<RecallCount> {
    if k == 0 {
        return Err(invalid("K must be at least 1"));
    }
    let cache = ScoreCache::new(model);
    Ok(count_hits(&positive_ranks(model, test, filter, &cache), k))
}

/// Recall counts for several cutoffs in one ranking pass.
pub fn recall_counts(model: &TwoTowerModel, test: &[Interaction], ks: &[usize], filter: &EvalFilter<'_>, cache: &ScoreCache) -> Vec<RecallCount> {
    let ranks = positive_ranks(model, test, filter, cache);
    ks.iter().map(|&k| count_hits(&ranks, k)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecallTriple {
    pub overall: Option<f64>,
    pub cold: Option<f64>,
    pub warm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean combined step loss; absent for the pre-training evaluation.
    pub loss: Option<f64>,
    pub recall: BTreeMap<usize, RecallTriple>,
}

impl EpochMetrics {
    pub fn cold_recall(&self, k: usize) -> Option<f64> {
        self.recall.get(&k).and_then(|r| r.cold)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Metrics of the best epoch.
    pub recall_at: BTreeMap<usize, RecallTriple>,
    /// Epoch with the highest cold recall@50; the earliest wins ties.
    pub best_epoch: usize,
    pub curves: Vec<EpochMetrics>,
}

impl EvalReport {
    pub fn from_curves(curves: Vec<EpochMetrics>) -> Self {
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for (i, m) in curves.iter().enumerate() {
            let v = m.cold_recall(REWARD_K).unwrap_or(-1.0);
            if v > best_val {
                best_val = v;
                best = i;
            }
        }
        let recall_at = curves.get(best).map(|m| m.recall.clone()).unwrap_or_default();
        let best_epoch = curves.get(best).map_or(0, |m| m.epoch);
        Self { recall_at, best_epoch, curves }
    }

    /// Cold recall@50 at the best epoch.
    pub fn best_cold_recall(&self) -> Option<f64> {
        self.recall_at.get(&REWARD_K).and_then(|r| r.cold)
    }

    pub fn metric(&self, k: usize) -> RecallTriple {
        self.recall_at.get(&k).copied().unwrap_or_default()
    }

    /// Per-epoch CSV: `epoch,loss,recall@K_{overall,cold,warm}...`.
    pub fn curves_csv(&self) -> String {
        let ks: Vec<usize> = self.curves.first().map(|m| m.recall.keys().copied().collect()).unwrap_or_default();
        let mut out = String::from("epoch,loss");
        for k in &ks {
            for part in ["overall", "cold", "warm"] {
                out.push_str(&format!(",recall@{k}_{part}"));
            }
        }
        out.push('\n');
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for m in &self.curves {
            out.push_str(&format!("{},{}", m.epoch, fmt(m.loss)));
            for k in &ks {
                let r = m.recall.get(k).copied().unwrap_or_default();
                out.push_str(&format!(",{},{},{}", fmt(r.overall), fmt(r.cold), fmt(r.warm)));
            }
            out.push('\n');
        }
        out
    }
}

/// Overall, cold and warm recall at each of `ks`.
pub fn evaluate(model: &TwoTowerModel, test: &[Interaction], ks: &[usize]) -> BTreeMap<usize, RecallTriple> {
    let cache = ScoreCache::new(model);
    let all = recall_counts(model, test, ks, &EvalFilter::ALL, &cache);
    let cold = recall_counts(model, test, ks, &EvalFilter::COLD, &cache);
    let warm = recall_counts(model, test, ks, &EvalFilter::WARM, &cache);
    ks.iter()
        .enumerate()
        .map(|(i, &k)| (k, RecallTriple { overall: all[i].recall(), cold: cold[i].recall(), warm: warm[i].recall() }))
        .collect()
}

/// Receives per-epoch metrics while training runs.
pub trait ProgressSink {
    fn epoch(&mut self, metrics: &EpochMetrics);
}

impl ProgressSink for () {
    fn epoch(&mut self, _: &EpochMetrics) {}
}

impl<F: FnMut(&EpochMetrics)> ProgressSink for F {
    fn epoch(&mut self, metrics: &EpochMetrics) {
        self(metrics)
    }
}

/// Cycles through augmentation triples, reshuffling on every wrap.
struct AugCursor {
    items: Vec<PairExample>,
    pos: usize,
}

impl AugCursor {
    fn next_batch(&mut self, n: usize, rng: &mut RngStream) -> Vec<PairExample> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n.min(self.items.len()) {
            if self.pos == 0 {
                self.items.shuffle(rng);
            }
            out.push(self.items[self.pos]);
            self.pos = (self.pos + 1) % self.items.len();
        }
        out
    }
}

/// Trains for `epochs` epochs: Adagrad on the in-batch softmax loss; when
/// triples are given, each main batch is paired with one augmentation batch
/// and the step minimizes `L_IBS + bpr_coefficient · L_BPR`.
///
/// Evaluates before the first epoch and after each one.
pub fn train(
    model: &mut TwoTowerModel,
    split: &SplitDataset,
    triples: Option<&[AugmentationTriple]>,
    epochs: usize,
    sink: &mut dyn ProgressSink,
) -> Result<EvalReport> {
    train_impl(model, split, triples, epochs, sink, false).map(|(r, _)| r)
}

/// [`train`], also returning a snapshot of the model at the best epoch.
pub fn train_keep_best(
    model: &mut TwoTowerModel,
    split: &SplitDataset,
    triples: Option<&[AugmentationTriple]>,
    epochs: usize,
    sink: &mut dyn ProgressSink,
) -> Result<(EvalReport, TwoTowerModel)> {
    let (report, best) = train_impl(model, split, triples, epochs, sink, true)?;
    Ok((report, best.expect("snapshot kept")))
}

fn train_impl(
    model: &mut TwoTowerModel,
    split: &SplitDataset,
    triples: Option<&[AugmentationTriple]>,
    epochs: usize,
    sink: &mut dyn ProgressSink,
    keep_best: bool,
) -> Result<(EvalReport, Option<TwoTowerModel>)> {
    let seed = model.config.seed;
    let mut main_rng = RngStream::new(seed, stream_id("two-tower/main", 0, 0));
    let mut aug_rng = RngStream::new(seed, stream_id("two-tower/aug", 0, 0));
    let mut examples: Vec<Example> = split.train.iter().map(|x| model.example(&x.user, &x.item)).collect::<Result<_>>()?;
    let mut aug = match triples {
        Some(ts) if !ts.is_empty() => {
            Some(AugCursor { items: ts.iter().map(|t| model.pair_example(t)).collect::<Result<_>>()?, pos: 0 })
        }
        _ => None,
    };
    let ks = DEFAULT_KS;
    let mut curves = vec![EpochMetrics { epoch: 0, loss: None, recall: evaluate(model, &split.test, &ks) }];
    sink.epoch(&curves[0]);
    // same ordering as EvalReport::from_curves
    let score = |m: &EpochMetrics| m.cold_recall(REWARD_K).unwrap_or(-1.0);
    let mut best_score = score(&curves[0]);
    let mut best = keep_best.then(|| model.clone());
    let bs = model.config.batch_size;
    let coef = model.config.bpr_coefficient;
    for epoch in 1..=epochs {
        examples.shuffle(&mut main_rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for (b, chunk) in examples.chunks(bs).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let (mut loss, mut grads) = model.ibs_logq_loss_and_grad(chunk, Some(&mut main_rng))?;
            if let Some(cursor) = aug.as_mut() {
                let batch = cursor.next_batch(model.config.aug_batch_size, &mut aug_rng);
                let (bl, bg) = model.bpr_loss_and_grad(&batch, Some(&mut aug_rng))?;
                loss += coef * bl;
                grads.add_scaled(&bg, coef);
            }
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence(format!("non-finite loss at epoch {epoch}, batch {b}")));
            }
            model.adagrad_step(&grads);
            total += loss;
            steps += 1;
        }
        let m = EpochMetrics {
            epoch,
            loss: (steps > 0).then(|| total / steps as f64),
            recall: evaluate(model, &split.test, &ks),
        };
        sink.epoch(&m);
        if keep_best && score(&m) > best_score {
            best_score = score(&m);
            best = Some(model.clone());
        }
        curves.push(m);
    }
    Ok((EvalReport::from_curves(curves), best))
}
