//! Planted synthetic datasets with known structure.
//!
//! Users and items fall into taste clusters. Cold items only appear after the
//! split time. Item metadata carries a cluster token diluted by random filler
//! words, so the metadata pathway alone transfers little cold signal.
//! "Coherent" users draw mostly from their own cluster; the others draw
//! uniformly. The planted oracle is truthful only for "useful" users and
//! inverted for the rest.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{sort_log, temporal_split, Catalog, Interaction, ItemId, ItemMeta, SplitDataset, UserId};
use crate::embeddings::EmbeddingTable;
use crate::error::{invalid, Result};
use crate::numerics::{stream_id, RngStream};
use crate::oracle::{PreferenceOracle, PreferenceQuery};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub users: usize,
    pub warm_items: usize,
    pub cold_items: usize,
    pub clusters: usize,
    pub train_per_user: usize,
    pub test_per_user: usize,
    /// Probability that a test interaction targets a cold item.
    pub cold_test_fraction: f64,
    /// Share of users with cluster-focused taste.
    pub coherent_fraction: f64,
    /// Share of users the planted oracle answers truthfully for; drawn from
    /// the coherent users first.
    pub useful_fraction: f64,
    /// Probability that the planted oracle inverts a non-useful user's
    /// answer; 0.5 makes those answers coin flips.
    pub misleading_prob: f64,
    /// Probability that a coherent user's interaction stays in their cluster.
    pub in_cluster_prob: f64,
    /// Copies of the cluster token in each title.
    pub tag_repeats: usize,
    pub filler_tokens: usize,
    pub vocabulary: usize,
    pub meta_dim: usize,
    /// Dimension of the richer text embedding the simulated oracle reads.
    pub oracle_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 500,
            warm_items: 240,
            cold_items: 60,
            clusters: 10,
            train_per_user: 8,
            test_per_user: 4,
            cold_test_fraction: 0.5,
            coherent_fraction: 1.0,
            useful_fraction: 1.0,
            misleading_prob: 1.0,
            in_cluster_prob: 0.9,
            tag_repeats: 1,
            filler_tokens: 12,
            vocabulary: 2000,
            meta_dim: 32,
            oracle_dim: 512,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub log: Vec<Interaction>,
    pub split: SplitDataset,
    pub catalog: Catalog,
    /// Tower-side metadata embeddings.
    pub embeddings: EmbeddingTable,
    pub oracle_embeddings: EmbeddingTable,
    pub user_cluster: BTreeMap<UserId, usize>,
    pub item_cluster: BTreeMap<ItemId, usize>,
    /// 1.0 for users the planted oracle is truthful for, 0.0 otherwise.
    pub usefulness: BTreeMap<UserId, f64>,
}

fn user_id(u: usize) -> UserId {
    UserId(format!("U{u:04}"))
}

fn item_id(i: usize, cold: bool) -> ItemId {
    ItemId(if cold { format!("C{i:04}") } else { format!("W{i:04}") })
}

const DAY: i64 = 86_400;

impl SyntheticDataset {
    pub fn generate(cfg: &SyntheticConfig) -> Result<Self> {
        if cfg.clusters == 0 || cfg.users == 0 || cfg.warm_items < cfg.clusters || cfg.cold_items < cfg.clusters.max(2) {
            return Err(invalid("synthetic dataset needs users and at least one warm and cold item per cluster"));
        }
        if cfg.train_per_user == 0 || cfg.test_per_user == 0 {
            return Err(invalid("each user needs train and test interactions"));
        }
        let mut rng = RngStream::new(cfg.seed, stream_id("synthetic", 0, 0));
        let warm: Vec<ItemId> = (0..cfg.warm_items).map(|i| item_id(i, false)).collect();
        let cold: Vec<ItemId> = (0..cfg.cold_items).map(|i| item_id(i, true)).collect();
        let mut item_cluster = BTreeMap::new();
        let mut warm_by: Vec<Vec<usize>> = vec![Vec::new(); cfg.clusters];
        let mut cold_by: Vec<Vec<usize>> = vec![Vec::new(); cfg.clusters];
        for (i, id) in warm.iter().enumerate() {
            item_cluster.insert(id.clone(), i % cfg.clusters);
            warm_by[i % cfg.clusters].push(i);
        }
        for (i, id) in cold.iter().enumerate() {
            item_cluster.insert(id.clone(), i % cfg.clusters);
            cold_by[i % cfg.clusters].push(i);
        }

        let mut catalog = Catalog::new();
        for id in warm.iter().chain(&cold) {
            let c = item_cluster[id];
            let mut words: Vec<String> = (0..cfg.tag_repeats).map(|_| format!("genre{c}")).collect();
            words.extend((0..cfg.filler_tokens).map(|_| format!("w{}", rng.gen_range(0..cfg.vocabulary))));
            catalog.insert(
                id.clone(),
                ItemMeta {
                    item: id.clone(),
                    title: words.join(" "),
                    brand: Some(format!("brand{}", rng.gen_range(0..20))),
                    categories: vec![format!("cat{}", rng.gen_range(0..8))],
                    ..Default::default()
                },
            );
        }

        let n_coherent = (cfg.coherent_fraction * cfg.users as f64).round() as usize;
        let mut order: Vec<usize> = (0..cfg.users).collect();
        order.shuffle(&mut rng);
        let n_useful = (cfg.useful_fraction * cfg.users as f64).round() as usize;
        let mut coherent = vec![false; cfg.users];
        let mut useful = vec![false; cfg.users];
        for &u in &order[..n_coherent.min(cfg.users)] {
            coherent[u] = true;
        }
        for &u in &order[..n_useful.min(cfg.users)] {
            useful[u] = true;
        }

        let split_day = (cfg.train_per_user as i64) * 3 + 10;
        let mut log = Vec::new();
        let mut user_cluster = BTreeMap::new();
        let mut usefulness = BTreeMap::new();
        for u in 0..cfg.users {
            let uid = user_id(u);
            let c = rng.gen_range(0..cfg.clusters);
            user_cluster.insert(uid.clone(), c);
            usefulness.insert(uid.clone(), if useful[u] { 1.0 } else { 0.0 });
            let draw = |pool_by: &[Vec<usize>], total: usize, rng: &mut RngStream| -> usize {
                if coherent[u] && rng.gen::<f64>() < cfg.in_cluster_prob {
                    *pool_by[c].choose(rng).expect("non-empty cluster")
                } else {
                    rng.gen_range(0..total)
                }
            };
            let mut seen = std::collections::BTreeSet::new();
            let mut day = rng.gen_range(0..5);
            for _ in 0..cfg.train_per_user {
                let mut i = draw(&warm_by, cfg.warm_items, &mut rng);
                for _ in 0..20 {
                    if seen.insert(i) {
                        break;
                    }
                    i = draw(&warm_by, cfg.warm_items, &mut rng);
                }
                day += rng.gen_range(1..=3);
                let rating = if coherent[u] { rng.gen_range(4..=5) } else { rng.gen_range(1..=5) };
                log.push(Interaction::new(uid.clone(), warm[i].clone(), rating as f64, day * DAY + rng.gen_range(0..DAY)));
            }
            let mut tday = split_day;
            for _ in 0..cfg.test_per_user {
                tday += rng.gen_range(1..=3);
                let item = if rng.gen::<f64>() < cfg.cold_test_fraction {
                    cold[draw(&cold_by, cfg.cold_items, &mut rng)].clone()
                } else {
                    warm[draw(&warm_by, cfg.warm_items, &mut rng)].clone()
                };
                log.push(Interaction::new(uid.clone(), item, 5.0, tday * DAY + rng.gen_range(0..DAY)));
            }
        }
        // a warm item never drawn for train would turn cold
        let trained: std::collections::BTreeSet<ItemId> =
            log.iter().filter(|x| x.timestamp < split_day * DAY).map(|x| x.item.clone()).collect();
        log.retain(|x| x.timestamp < split_day * DAY || x.item.as_str().starts_with('C') || trained.contains(&x.item));
        sort_log(&mut log);
        let n_train = log.iter().filter(|x| x.timestamp < split_day * DAY).count();
        let split = temporal_split(&log, n_train as f64 / log.len() as f64)?;
        catalog.retain(|id, _| item_cluster.contains_key(id));
        let embeddings = EmbeddingTable::from_catalog(&catalog, cfg.meta_dim, cfg.seed)?;
        let oracle_embeddings = EmbeddingTable::from_catalog(&catalog, cfg.oracle_dim, cfg.seed ^ 0x5eed)?;
        Ok(Self { config: cfg.clone(), log, split, catalog, embeddings, oracle_embeddings, user_cluster, item_cluster, usefulness })
    }

    /// Oracle that prefers the user's own cluster for useful users and the
    /// opposite for everyone else; same-side pairs are a fair coin.
    pub fn planted_oracle(&self) -> PlantedOracle<'_> {
        PlantedOracle { data: self }
    }

    /// Cold items of the split, sorted.
    pub fn cold_items(&self) -> Vec<ItemId> {
        self.split.cold_items.iter().cloned().collect()
    }

    /// Planted policy features: column 0 is usefulness, followed by
    /// `distractors` independent 0/1 columns with the same marginal rate, so
    /// only column 0 carries information about usefulness.
    pub fn planted_features(&self, distractors: usize) -> Vec<(UserId, Vec<f64>)> {
        let mut rng = RngStream::new(self.config.seed, stream_id("synthetic/features", 0, 0));
        let rate = self.usefulness.values().sum::<f64>() / self.usefulness.len().max(1) as f64;
        self.split
            .warm_users
            .iter()
            .map(|u| {
                let mut row = vec![self.usefulness[u]];
                row.extend((0..distractors).map(|_| if rng.gen::<f64>() < rate { 1.0 } else { 0.0 }));
                (u.clone(), row)
            })
            .collect()
    }

    /// Random sample of `n` warm users, sorted.
    pub fn sample_users(&self, n: usize, rng: &mut RngStream) -> Vec<UserId> {
        let users: Vec<&UserId> = self.split.warm_users.iter().collect();
        let mut out: Vec<UserId> = index::sample(rng, users.len(), n.min(users.len())).into_iter().map(|i| users[i].clone()).collect();
        out.sort();
        out
    }

    /// Writes the log and catalog as review/metadata JSON lines.
    pub fn write_json_lines(&self, reviews: &Path, meta: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(reviews)?);
        for x in &self.log {
            let line = serde_json::json!({
                "reviewerID": x.user, "asin": x.item, "overall": x.rating, "unixReviewTime": x.timestamp,
            });
            writeln!(w, "{line}")?;
        }
        w.flush()?;
        let mut w = BufWriter::new(File::create(meta)?);
        for m in self.catalog.values() {
            let line = serde_json::json!({
                "asin": m.item, "title": m.title, "brand": m.brand, "categories": m.categories,
            });
            writeln!(w, "{line}")?;
        }
        w.flush()?;
        Ok(())
    }
}

pub struct PlantedOracle<'d> {
    data: &'d SyntheticDataset,
}

impl PreferenceOracle for PlantedOracle<'_> {
    fn choose(&self, q: &PreferenceQuery, rng: &mut RngStream) -> Result<ItemId> {
        let d = self.data;
        let truthful = d.usefulness.get(&q.user).copied().unwrap_or(0.0) > 0.5 || rng.gen::<f64>() >= d.config.misleading_prob;
        let c = d.user_cluster[&q.user];
        let pick_a = match (d.item_cluster[&q.item_a] == c, d.item_cluster[&q.item_b] == c) {
            (true, false) => truthful,
            (false, true) => !truthful,
            _ => rng.gen::<bool>(),
        };
        Ok(if pick_a { q.item_a.clone() } else { q.item_b.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cold_items_only_after_split() {
        let d = SyntheticDataset::generate(&SyntheticConfig { users: 60, ..Default::default() }).unwrap();
        assert!(!d.split.cold_items.is_empty());
        assert!(d.split.train.iter().all(|x| x.item.as_str().starts_with('W')));
        assert!(d.split.cold_items.iter().all(|i| i.as_str().starts_with('C')));
        assert!(d.split.train.iter().all(|x| x.timestamp <= d.split.split_time));
        assert_eq!(d.split.warm_users.len(), 60);
        let again = SyntheticDataset::generate(&SyntheticConfig { users: 60, ..Default::default() }).unwrap();
        assert_eq!(again.log, d.log);
    }

    #[test]
    fn coherent_fraction_is_planted() {
        let d = SyntheticDataset::generate(&SyntheticConfig { users: 100, useful_fraction: 0.2, ..Default::default() }).unwrap();
        let ones = d.usefulness.values().filter(|&&v| v == 1.0).count();
        assert_eq!(ones, 20);
        let f = d.planted_features(4);
        assert!(f.iter().all(|(u, r)| r.len() == 5 && r[0] == d.usefulness[u]));
    }
}
