//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use coldaug::dataset::{Catalog, Interaction, ItemId, ItemMeta, SplitDataset, UserId};
use coldaug::embeddings::EmbeddingTable;
use coldaug::numerics::{sym_eig, DenseMatrix, RngStream};
use coldaug::twotower::{Gradients, PositiveKind, TowerConfig, TwoTowerModel};

pub const CATEGORIES: [&str; 5] = ["Skin", "Hair", "Nails", "Tools", "Fragrance"];
pub const BRANDS: [&str; 4] = ["Acme", "Borealis", "Cirrus", "Dune"];

/// Random log with user ids `u0..`, item ids `i0..` and distinct timestamps
/// drawn without a fixed order.
pub fn random_log(rng: &mut RngStream, users: usize, items: usize, n: usize) -> Vec<Interaction> {
    let mut stamps: Vec<i64> = (0..n as i64).map(|t| t * 3_600 * 7).collect();
    for i in (1..stamps.len()).rev() {
        stamps.swap(i, rng.gen_range(0..=i));
    }
    (0..n)
        .map(|k| {
            let u = rng.gen_range(0..users);
            let i = rng.gen_range(0..items);
            Interaction::new(format!("u{u}"), format!("i{i}"), rng.gen_range(1..=5) as f64, stamps[k])
        })
        .collect()
}

/// Catalog with one or two categories and an optional brand per item.
pub fn random_catalog(rng: &mut RngStream, items: impl IntoIterator<Item = ItemId>) -> Catalog {
    items
        .into_iter()
        .map(|item| {
            let mut categories = vec![CATEGORIES[rng.gen_range(0..CATEGORIES.len())].to_owned()];
            if rng.gen_bool(0.4) {
                categories.push(CATEGORIES[rng.gen_range(0..CATEGORIES.len())].to_owned());
            }
            let brand = rng.gen_bool(0.8).then(|| BRANDS[rng.gen_range(0..BRANDS.len())].to_owned());
            let title = format!("{} {} item {}", categories[0], brand.clone().unwrap_or_default(), item);
            (item.clone(), ItemMeta { item, title, brand, categories, ..Default::default() })
        })
        .collect()
}

/// Random unit-vector table over `items`.
pub fn random_table(rng: &mut RngStream, items: impl IntoIterator<Item = ItemId>, dim: usize) -> EmbeddingTable {
    let mut t = EmbeddingTable::new(dim);
    for item in items {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        t.insert(item, v.iter().map(|x| x / n).collect()).unwrap();
    }
    t
}

/// Split built by hand: train over warm items, test mixing warm and cold
/// items plus one user unknown to training.
pub fn tiny_world(rng: &mut RngStream, users: usize, warm: usize, cold: usize, meta_dim: usize) -> (SplitDataset, EmbeddingTable) {
    let mut train = Vec::new();
    let mut t = 0i64;
    for u in 0..users {
        let n = rng.gen_range(2..=4);
        for _ in 0..n {
            train.push(Interaction::new(format!("u{u}"), format!("w{}", rng.gen_range(0..warm)), 5.0, t));
            t += 1;
        }
    }
    for i in 0..warm {
        train.push(Interaction::new(format!("u{}", i % users), format!("w{i}"), 4.0, t));
        t += 1;
    }
    let split_time = t;
    let mut test = Vec::new();
    for _ in 0..rng.gen_range(6..=14) {
        let u = rng.gen_range(0..users);
        let item = if rng.gen_bool(0.5) { format!("c{}", rng.gen_range(0..cold)) } else { format!("w{}", rng.gen_range(0..warm)) };
        t += 1;
        test.push(Interaction::new(format!("u{u}"), item, 5.0, t));
    }
    test.push(Interaction::new("stranger", "c0", 5.0, t + 1));
    test.push(Interaction::new("u0", "c0", 5.0, t + 2));
    let warm_users: BTreeSet<UserId> = train.iter().map(|x| x.user.clone()).collect();
    let train_items: BTreeSet<ItemId> = train.iter().map(|x| x.item.clone()).collect();
    let cold_items: BTreeSet<ItemId> = test.iter().map(|x| x.item.clone()).filter(|i| !train_items.contains(i)).collect();
    let mut counts: BTreeMap<ItemId, f64> = BTreeMap::new();
    for x in &train {
        *counts.entry(x.item.clone()).or_default() += 1.0;
    }
    let unigram = counts.into_iter().map(|(k, c)| (k, c / train.len() as f64)).collect();
    let split = SplitDataset { train, test, warm_users, cold_items, unigram, split_time };
    let items: BTreeSet<ItemId> = split.train.iter().chain(&split.test).map(|x| x.item.clone()).collect();
    let table = random_table(rng, items, meta_dim);
    (split, table)
}

pub fn tiny_tower(cosine: bool, seed: u64) -> TowerConfig {
    TowerConfig {
        embed_dim: 5,
        hidden_dim: 7,
        output_dim: 4,
        dropout_rate: 0.0,
        hash_buckets: 3,
        batch_size: 8,
        aug_batch_size: 4,
        use_cosine: cosine,
        seed,
        ..TowerConfig::default()
    }
}

/// Worst relative error between a loss function's analytic gradient and
/// central differences with `h = 1e-5`, probing up to `probes` entries per
/// parameter group.
pub fn fd_worst(model: &mut TwoTowerModel, probes: usize, f: &dyn Fn(&TwoTowerModel) -> (f64, Gradients)) -> f64 {
    let (_, g) = f(model);
    let dense: Vec<Vec<f64>> = g.dense(model).into_iter().map(|(_, v)| v).collect();
    let mut worst: f64 = 0.0;
    for (gi, grad) in dense.iter().enumerate() {
        let step = 1 + grad.len() / probes;
        for k in (0..grad.len()).step_by(step) {
            let orig = model.parameter_groups()[gi].1[k];
            model.parameter_groups_mut()[gi].1[k] = orig + 1e-5;
            let up = f(model).0;
            model.parameter_groups_mut()[gi].1[k] = orig - 1e-5;
            let down = f(model).0;
            model.parameter_groups_mut()[gi].1[k] = orig;
            let fd = (up - down) / 2e-5;
            let an = grad[k];
            let scale = fd.abs().max(an.abs());
            if scale < 1e-9 {
                continue;
            }
            worst = worst.max((fd - an).abs() / scale);
        }
    }
    worst
}

/// Independent recall oracle: scores every item with `model.score`, sorts
/// the full ranking and looks up the positive's place. Ties rank by item
/// position, earlier first.
pub fn brute_force_recall(
    model: &TwoTowerModel,
    test: &[Interaction],
    k: usize,
    kind: PositiveKind,
    users: Option<(&BTreeSet<UserId>, bool)>,
) -> (usize, usize) {
    let items = model.item_ids().to_vec();
    let (mut hits, mut n) = (0, 0);
    for x in test {
        if model.user_position(&x.user).is_none() {
            continue;
        }
        let Some(p) = model.item_position(&x.item) else { continue };
        let cold = model.is_cold_position(p);
        let keep_item = match kind {
            PositiveKind::All => true,
            PositiveKind::Cold => cold,
            PositiveKind::Warm => !cold,
        };
        let keep_user = users.is_none_or(|(set, inside)| set.contains(&x.user) == inside);
        if !keep_item || !keep_user {
            continue;
        }
        let mut ranking: Vec<(f64, usize)> = items.iter().enumerate().map(|(j, it)| (model.score(&x.user, it).unwrap(), j)).collect();
        ranking.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let place = ranking.iter().position(|&(_, j)| j == p).unwrap();
        n += 1;
        if place < k {
            hits += 1;
        }
    }
    (hits, n)
}

/// Naive per-user feature recomputation in the `FeatureName::ALL` order.
pub fn naive_features(
    user: &UserId,
    train: &[Interaction],
    catalog: &Catalog,
    table: &EmbeddingTable,
    window: i64,
) -> [f64; 12] {
    let mine: Vec<&Interaction> = train.iter().filter(|x| &x.user == user).collect();
    let count = |item: &ItemId| train.iter().filter(|x| &x.item == item).count() as f64;
    let pops: Vec<f64> = mine.iter().map(|x| count(&x.item)).collect();
    let ratings: Vec<f64> = mine.iter().map(|x| x.rating).collect();
    let n = mine.len() as f64;
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let med = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        let m = s.len() / 2;
        if s.len() % 2 == 1 { s[m] } else { (s[m - 1] + s[m]) / 2.0 }
    };
    let ar = avg(&ratings);
    let rv = ratings.iter().map(|r| (r - ar) * (r - ar)).sum::<f64>() / n;

    let dist = |rows: &[&Interaction], brand: bool| -> BTreeMap<String, f64> {
        let mut c: BTreeMap<String, f64> = BTreeMap::new();
        for x in rows {
            let m = &catalog[&x.item];
            if brand {
                if let Some(b) = &m.brand {
                    *c.entry(b.clone()).or_default() += 1.0;
                }
            } else {
                for cat in &m.categories {
                    *c.entry(cat.clone()).or_default() += 1.0;
                }
            }
        }
        c
    };
    let all: Vec<&Interaction> = train.iter().collect();
    let simpson = |c: &BTreeMap<String, f64>| {
        let t: f64 = c.values().sum();
        c.values().map(|v| (v / t) * (v / t)).sum::<f64>()
    };
    let kl = |p: &BTreeMap<String, f64>, q: &BTreeMap<String, f64>| {
        let eps = 1e-8;
        let tp: f64 = p.values().sum();
        let tq: f64 = q.values().sum();
        let keys: BTreeSet<&String> = p.keys().chain(q.keys()).collect();
        let z = 1.0 + eps * keys.len() as f64;
        let mut s = 0.0;
        for key in keys {
            let a = (p.get(key).map_or(0.0, |v| v / tp) + eps) / z;
            let b = (q.get(key).map_or(0.0, |v| v / tq) + eps) / z;
            s += a * (a / b).ln();
        }
        s.max(0.0)
    };
    let side = |brand: bool| {
        let u = dist(&mine, brand);
        let g = dist(&all, brand);
        if u.is_empty() { (0.0, simpson(&g)) } else { (kl(&u, &g), simpson(&u)) }
    };
    let (ckld, csd) = side(false);
    let (bkld, bsd) = side(true);

    // eigenvalues of XᵀX / n share the nonzero spectrum of the n×n kernel
    let d = table.dim();
    let mut g = DenseMatrix::zeros(d, d);
    for x in &mine {
        let v = table.get(&x.item).unwrap();
        for a in 0..d {
            for b in 0..d {
                g.set(a, b, g.get(a, b) + v[a] * v[b] / n);
            }
        }
    }
    let eig = sym_eig(&g, 1e-12).unwrap();
    let ee = eig.eigenvalues.iter().filter(|&&l| l > 1e-15).map(|&l| -l * l.ln()).sum::<f64>().exp();

    let mut v = 0.0;
    for x in &mine {
        for y in train {
            if y.item == x.item && &y.user != user && y.timestamp > x.timestamp && y.timestamp <= x.timestamp + window {
                v += 1.0;
            }
        }
    }
    [med(&pops), ar, avg(&pops), rv, ckld, csd, ee, v, n, med(&ratings), bsd, bkld]
}

/// Small synthetic run that trains in a second or two.
pub fn small_run_config(out: &std::path::Path, seed: u64) -> coldaug::runner::RunConfig {
    let mut cfg = coldaug::runner::RunConfig::from_toml(&format!(
        r#"
seed = {seed}
[data]
source = "synthetic"
users = 80
warm_items = 60
cold_items = 16
meta_dim = 8
oracle_dim = 32
[embeddings]
dim = 8
[oracle]
pairs_per_user = 4
[tower]
epochs = 3
embed_dim = 6
hidden_dim = 8
output_dim = 6
batch_size = 64
[reward]
m = 3
pretrain_epochs = 2
max_iterations = 3
[reward.mode]
mode = "fine_tune"
epochs = 1
[experiment]
jobs = 3
strategies = ["none", "random", "feature:MP", "feature:EE"]
"#
    ))
    .unwrap();
    cfg.out = out.to_path_buf();
    cfg
}

/// Every file under `dir` with its bytes, keyed by relative path.
pub fn snapshot(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &std::path::Path, d: &std::path::Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}
