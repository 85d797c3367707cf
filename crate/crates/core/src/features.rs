//! Behavioral user features computed from train interactions.
//!
//! Twelve features per warm user: popularity (MP, AP), counts (NR), ratings
//! (AR, MR, RV), category and brand diversity (CKLD, CSD, BKLD, BSD), the
//! Vendi-style embedding entropy (EE) and review velocity (V).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Catalog, Interaction, ItemId, SplitDataset, UserId};
use crate::embeddings::EmbeddingTable;
use crate::error::{format_err, invalid, Error, Result};
use crate::numerics::{dot, mean, median, sym_eig, DenseMatrix, DEFAULT_EIG_TOL};

pub const KL_EPSILON: f64 = 1e-8;
pub const DEFAULT_VELOCITY_WINDOW: i64 = 30 * 24 * 3600;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FeatureName {
    MP,
    AR,
    AP,
    RV,
    CKLD,
    CSD,
    EE,
    V,
    NR,
    MR,
    BSD,
    BKLD,
}

impl FeatureName {
    pub const ALL: [FeatureName; 12] = [
        FeatureName::MP,
        FeatureName::AR,
        FeatureName::AP,
        FeatureName::RV,
        FeatureName::CKLD,
        FeatureName::CSD,
        FeatureName::EE,
        FeatureName::V,
        FeatureName::NR,
        FeatureName::MR,
        FeatureName::BSD,
        FeatureName::BKLD,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn abbrev(self) -> &'static str {
        match self {
            FeatureName::MP => "MP",
            FeatureName::AR => "AR",
            FeatureName::AP => "AP",
            FeatureName::RV => "RV",
            FeatureName::CKLD => "CKLD",
            FeatureName::CSD => "CSD",
            FeatureName::EE => "EE",
            FeatureName::V => "V",
            FeatureName::NR => "NR",
            FeatureName::MR => "MR",
            FeatureName::BSD => "BSD",
            FeatureName::BKLD => "BKLD",
        }
    }
}

impl fmt::Display for FeatureName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.abbrev())
    }
}

impl FromStr for FeatureName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureName::ALL
            .into_iter()
            .find(|f| f.abbrev().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid(format!("unknown feature {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserFeatureVector {
    pub user: UserId,
    pub raw: [f64; 12],
    pub scaled: [f64; 12],
}

impl UserFeatureVector {
    pub fn raw(&self, f: FeatureName) -> f64 {
        self.raw[f.index()]
    }

    pub fn scaled(&self, f: FeatureName) -> f64 {
        self.scaled[f.index()]
    }
}

/// Train-only lookups shared by every feature.
pub struct TrainIndex<'a> {
    histories: BTreeMap<&'a UserId, Vec<&'a Interaction>>,
    item_counts: HashMap<&'a ItemId, usize>,
    /// Per item: train interactions sorted by timestamp.
    item_timeline: HashMap<&'a ItemId, Vec<(i64, &'a UserId)>>,
}

impl<'a> TrainIndex<'a> {
    pub fn new(train: &'a [Interaction]) -> Self {
        let mut histories: BTreeMap<&UserId, Vec<&Interaction>> = BTreeMap::new();
        let mut item_counts: HashMap<&ItemId, usize> = HashMap::new();
        let mut item_timeline: HashMap<&ItemId, Vec<(i64, &UserId)>> = HashMap::new();
        for x in train {
            histories.entry(&x.user).or_default().push(x);
            *item_counts.entry(&x.item).or_default() += 1;
            item_timeline.entry(&x.item).or_default().push((x.timestamp, &x.user));
        }
        for tl in item_timeline.values_mut() {
            tl.sort();
        }
        Self { histories, item_counts, item_timeline }
    }

    pub fn history(&self, user: &UserId) -> Result<&[&'a Interaction]> {
        self.histories
            .get(user)
            .map(Vec::as_slice)
            .filter(|h| !h.is_empty())
            .ok_or_else(|| Error::MissingUser(user.to_string()))
    }

    pub fn users(&self) -> impl Iterator<Item = &'a UserId> + '_ {
        self.histories.keys().copied()
    }

    pub fn item_count(&self, item: &ItemId) -> usize {
        self.item_counts.get(item).copied().unwrap_or(0)
    }
}

/// `(MP, AP, NR)`: median and mean train popularity of the user's items, and
/// the user's train interaction count.
pub fn popularity_and_count_features(user: &UserId, index: &TrainIndex<'_>) -> Result<(f64, f64, f64)> {
    let h = index.history(user)?;
    let pops: Vec<f64> = h.iter().map(|x| index.item_count(&x.item) as f64).collect();
    Ok((median(&pops).unwrap(), mean(&pops).unwrap(), h.len() as f64))
}

/// `(AR, MR, RV)`: mean, median and population variance of ratings.
pub fn rating_features(user: &UserId, index: &TrainIndex<'_>) -> Result<(f64, f64, f64)> {
    let h = index.history(user)?;
    let r: Vec<f64> = h.iter().map(|x| x.rating).collect();
    let m = mean(&r).unwrap();
    let var = r.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / r.len() as f64;
    Ok((m, median(&r).unwrap(), var))
}

/// Categorical distribution as counts.
#[derive(Clone, Debug, Default)]
pub struct Counts(BTreeMap<String, f64>);

impl Counts {
    pub fn add(&mut self, key: &str) {
        *self.0.entry(key.to_owned()).or_default() += 1.0;
    }

    fn total(&self) -> f64 {
        self.0.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn probabilities(&self) -> BTreeMap<&str, f64> {
        let t = self.total();
        self.0.iter().map(|(k, c)| (k.as_str(), c / t)).collect()
    }
}

/// `Σ p²` of a distribution.
pub fn simpson(counts: &Counts) -> f64 {
    counts.probabilities().values().map(|p| p * p).sum()
}

/// `KL(p ‖ q)` after adding `eps` to both over the union support and renormalizing.
pub fn smoothed_kl(p: &Counts, q: &Counts, eps: f64) -> f64 {
    let pp = p.probabilities();
    let qp = q.probabilities();
    let support: BTreeSet<&str> = pp.keys().chain(qp.keys()).copied().collect();
    let z = 1.0 + eps * support.len() as f64;
    support
        .iter()
        .map(|k| {
            let a = (pp.get(k).copied().unwrap_or(0.0) + eps) / z;
            let b = (qp.get(k).copied().unwrap_or(0.0) + eps) / z;
            a * (a / b).ln()
        })
        .sum::<f64>()
        .max(0.0)
}

/// Global category and brand distributions over all train interactions.
pub struct GlobalDistributions {
    pub categories: Counts,
    pub brands: Counts,
}

fn category_counts<'x, I: IntoIterator<Item = &'x Interaction>>(rows: I, catalog: &Catalog) -> (Counts, Counts) {
    let mut cats = Counts::default();
    let mut brands = Counts::default();
    for x in rows {
        if let Some(m) = catalog.get(&x.item) {
            for c in &m.categories {
                cats.add(c);
            }
            if let Some(b) = &m.brand {
                brands.add(b);
            }
        }
    }
    (cats, brands)
}

impl GlobalDistributions {
    pub fn new(train: &[Interaction], catalog: &Catalog) -> Self {
        let (categories, brands) = category_counts(train, catalog);
        Self { categories, brands }
    }
}

/// `(CKLD, CSD, BKLD, BSD)`. Users without category (brand) metadata take the
/// global Simpson value and a KL of zero.
pub fn diversity_features(
    user: &UserId,
    index: &TrainIndex<'_>,
    catalog: &Catalog,
    global: &GlobalDistributions,
) -> Result<(f64, f64, f64, f64)> {
    let h = index.history(user)?;
    let (cats, brands) = category_counts(h.iter().copied(), catalog);
    let side = |u: &Counts, g: &Counts| {
        if u.is_empty() {
            (0.0, simpson(g))
        } else {
            (smoothed_kl(u, g, KL_EPSILON), simpson(u))
        }
    };
    let (ckld, csd) = side(&cats, &global.categories);
    let (bkld, bsd) = side(&brands, &global.brands);
    Ok((ckld, csd, bkld, bsd))
}

/// Vendi score of a set of unit vectors: `exp(-Σ λ log λ)` over the
/// eigenvalues of the cosine kernel divided by `n`.
pub fn vendi_score(vectors: &[&[f64]]) -> Result<f64> {
    let n = vectors.len();
    if n == 0 {
        return Err(invalid("vendi score of an empty set"));
    }
    let mut k = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = dot(vectors[i], vectors[j]) / n as f64;
            k.set(i, j, v);
            k.set(j, i, v);
        }
    }
    let eig = sym_eig(&k, DEFAULT_EIG_TOL)?;
    let entropy: f64 = eig
        .eigenvalues
        .iter()
        .filter(|&&l| l > 0.0)
        .map(|&l| -l * l.ln())
        .sum();
    Ok(entropy.exp().clamp(1.0, n as f64))
}

/// EE: Vendi score of the user's history item embeddings, one per interaction.
pub fn embedding_entropy(user: &UserId, index: &TrainIndex<'_>, table: &EmbeddingTable) -> Result<f64> {
    let h = index.history(user)?;
    let vecs: Vec<&[f64]> = h.iter().map(|x| table.require(&x.item)).collect::<Result<_>>()?;
    vendi_score(&vecs)
}

/// V: over the user's train interactions `(u, i, t)`, count the train
/// interactions `(u', i, t')` with `u' ≠ u` and `t < t' ≤ t + window`.
pub fn velocity(user: &UserId, index: &TrainIndex<'_>, window: i64) -> Result<f64> {
    let h = index.history(user)?;
    let mut total = 0usize;
    for x in h {
        let tl = &index.item_timeline[&x.item];
        let lo = tl.partition_point(|(t, _)| *t <= x.timestamp);
        let hi = tl.partition_point(|(t, _)| *t <= x.timestamp + window);
        total += tl[lo..hi].iter().filter(|(_, u)| *u != user).count();
    }
    Ok(total as f64)
}

/// Unscaled features of every warm user, ordered by user id.
pub fn compute_raw_features(
    split: &SplitDataset,
    catalog: &Catalog,
    table: &EmbeddingTable,
    window: i64,
) -> Result<Vec<(UserId, [f64; 12])>> {
    if window <= 0 {
        return Err(invalid("velocity window must be positive"));
    }
    let index = TrainIndex::new(&split.train);
    let global = GlobalDistributions::new(&split.train, catalog);
    let users: Vec<&UserId> = index.users().collect();
    users
        .par_iter()
        .map(|&u| {
            let (mp, ap, nr) = popularity_and_count_features(u, &index)?;
            let (ar, mr, rv) = rating_features(u, &index)?;
            let (ckld, csd, bkld, bsd) = diversity_features(u, &index, catalog, &global)?;
            let ee = embedding_entropy(u, &index, table)?;
            let v = velocity(u, &index, window)?;
            let mut raw = [0.0; 12];
            for (f, val) in [
                (FeatureName::MP, mp),
                (FeatureName::AR, ar),
                (FeatureName::AP, ap),
                (FeatureName::RV, rv),
                (FeatureName::CKLD, ckld),
                (FeatureName::CSD, csd),
                (FeatureName::EE, ee),
                (FeatureName::V, v),
                (FeatureName::NR, nr),
                (FeatureName::MR, mr),
                (FeatureName::BSD, bsd),
                (FeatureName::BKLD, bkld),
            ] {
                raw[f.index()] = val;
            }
            Ok((u.clone(), raw))
        })
        .collect()
}

/// Per-column min-max scaling to `[0, 1]`; constant columns map to 0.5.
pub fn min_max_scale_columns(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for r in rows {
        for (j, &v) in r.iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    rows.iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(j, &v)| if hi[j] > lo[j] { ((v - lo[j]) / (hi[j] - lo[j])).clamp(0.0, 1.0) } else { 0.5 })
                .collect()
        })
        .collect()
}

pub fn min_max_scale(raw: Vec<(UserId, [f64; 12])>) -> FeatureTable {
    let rows: Vec<Vec<f64>> = raw.iter().map(|(_, r)| r.to_vec()).collect();
    let scaled = min_max_scale_columns(&rows);
    let users = raw
        .into_iter()
        .zip(scaled)
        .map(|((user, raw), s)| {
            let mut sc = [0.0; 12];
            sc.copy_from_slice(&s);
            UserFeatureVector { user, raw, scaled: sc }
        })
        .collect();
    FeatureTable { users }
}

/// Scaled feature vectors of all warm users, sorted by user id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub users: Vec<UserFeatureVector>,
}

impl FeatureTable {
    pub fn compute(split: &SplitDataset, catalog: &Catalog, table: &EmbeddingTable, window: i64) -> Result<Self> {
        Ok(min_max_scale(compute_raw_features(split, catalog, table, window)?))
    }

    pub fn get(&self, user: &UserId) -> Option<&UserFeatureVector> {
        self.users.binary_search_by(|v| v.user.cmp(user)).ok().map(|i| &self.users[i])
    }

    pub fn user_ids(&self) -> Vec<UserId> {
        self.users.iter().map(|v| v.user.clone()).collect()
    }

    /// Scaled values of `names`, one row per user.
    pub fn scaled_rows(&self, names: &[FeatureName]) -> Vec<(UserId, Vec<f64>)> {
        self.users
            .iter()
            .map(|v| (v.user.clone(), names.iter().map(|&f| v.scaled(f)).collect()))
            .collect()
    }

    /// The `⌈fraction · |users|⌉` users with the largest scaled value of
    /// `feature`, ties broken by ascending user id.
    pub fn top_fraction_users(&self, feature: FeatureName, fraction: f64) -> Result<BTreeSet<UserId>> {
        let k = quota_for(self.users.len(), fraction)?;
        let mut order: Vec<&UserFeatureVector> = self.users.iter().collect();
        order.sort_by(|a, b| b.scaled(feature).total_cmp(&a.scaled(feature)).then_with(|| a.user.cmp(&b.user)));
        Ok(order.into_iter().take(k).map(|v| v.user.clone()).collect())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let mut header = vec!["user".to_owned()];
        header.extend(FeatureName::ALL.iter().map(|f| f.abbrev().to_owned()));
        header.extend(FeatureName::ALL.iter().map(|f| format!("{f}_scaled")));
        writeln!(w, "{}", header.join("\t"))?;
        for v in &self.users {
            let mut cols = vec![v.user.to_string()];
            cols.extend(v.raw.iter().map(f64::to_string));
            cols.extend(v.scaled.iter().map(f64::to_string));
            writeln!(w, "{}", cols.join("\t"))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        let mut users = Vec::new();
        for (n, line) in r.lines().enumerate().skip(1) {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 25 {
                return Err(format_err(format!("{}:{}: expected 25 columns", path.display(), n + 1)));
            }
            let parse = |s: &str| s.parse::<f64>().map_err(|e| format_err(format!("{}:{}: {e}", path.display(), n + 1)));
            let mut raw = [0.0; 12];
            let mut scaled = [0.0; 12];
            for j in 0..12 {
                raw[j] = parse(cols[1 + j])?;
                scaled[j] = parse(cols[13 + j])?;
            }
            users.push(UserFeatureVector { user: cols[0].into(), raw, scaled });
        }
        users.sort_by(|a, b| a.user.cmp(&b.user));
        Ok(Self { users })
    }
}

/// `⌈fraction · n⌉`, validated.
pub fn quota_for(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!("fraction {fraction} outside (0, 1]")));
    }
    Ok(((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ItemMeta;
    use crate::numerics::RngStream;
    use rand::Rng;

    fn ix(u: &str, i: &str, r: f64, t: i64) -> Interaction {
        Interaction::new(u, i, r, t)
    }

    #[test]
    fn popularity_arithmetic() {
        // item a: 3 reviews, b: 5, c: 9; user "me" reviewed each once
        let mut train = vec![ix("me", "a", 4.0, 0), ix("me", "b", 5.0, 1), ix("me", "c", 3.0, 2)];
        for (item, extra) in [("a", 2), ("b", 4), ("c", 8)] {
            for k in 0..extra {
                train.push(ix(&format!("o{item}{k}"), item, 3.0, 10));
            }
        }
        let idx = TrainIndex::new(&train);
        let (mp, ap, nr) = popularity_and_count_features(&"me".into(), &idx).unwrap();
        assert_eq!(mp, 5.0);
        assert!((ap - 17.0 / 3.0).abs() < 1e-15);
        assert_eq!(nr, 3.0);
        assert!(matches!(popularity_and_count_features(&"ghost".into(), &idx), Err(Error::MissingUser(_))));
    }

    #[test]
    fn single_item_history() {
        let mut train = vec![ix("me", "a", 4.0, 0)];
        for k in 0..6 {
            train.push(ix(&format!("o{k}"), "a", 3.0, 1));
        }
        let idx = TrainIndex::new(&train);
        assert_eq!(popularity_and_count_features(&"me".into(), &idx).unwrap(), (7.0, 7.0, 1.0));
    }

    #[test]
    fn rating_arithmetic() {
        let train = vec![ix("u", "a", 4.0, 0), ix("u", "b", 5.0, 1), ix("c", "a", 2.0, 0), ix("c", "b", 2.0, 1)];
        let idx = TrainIndex::new(&train);
        assert_eq!(rating_features(&"u".into(), &idx).unwrap(), (4.5, 4.5, 0.25));
        assert_eq!(rating_features(&"c".into(), &idx).unwrap().2, 0.0);
    }

    fn counts(pairs: &[(&str, f64)]) -> Counts {
        let mut c = Counts::default();
        for (k, n) in pairs {
            c.0.insert((*k).to_owned(), *n);
        }
        c
    }

    #[test]
    fn diversity_formulas() {
        let same = counts(&[("x", 3.0), ("y", 1.0)]);
        assert!(smoothed_kl(&same, &same, KL_EPSILON).abs() < 1e-15);
        assert_eq!(simpson(&counts(&[("x", 4.0)])), 1.0);

        let user = counts(&[("x", 1.0), ("y", 1.0)]);
        let global = counts(&[("x", 9.0), ("y", 1.0)]);
        assert_eq!(simpson(&user), 0.5);
        // hand evaluation of the smoothed formula
        let eps = KL_EPSILON;
        let z = 1.0 + 2.0 * eps;
        let (p1, p2) = ((0.5 + eps) / z, (0.5 + eps) / z);
        let (q1, q2) = ((0.9 + eps) / z, (0.1 + eps) / z);
        let expected = p1 * (p1 / q1).ln() + p2 * (p2 / q2).ln();
        assert!((smoothed_kl(&user, &global, eps) - expected).abs() < 1e-15);
    }

    #[test]
    fn missing_categories_use_global_convention() {
        let mut catalog = Catalog::new();
        catalog.insert("a".into(), ItemMeta { item: "a".into(), title: "A".into(), categories: vec!["c1".into()], ..Default::default() });
        catalog.insert("b".into(), ItemMeta { item: "b".into(), title: "B".into(), categories: vec!["c2".into()], ..Default::default() });
        catalog.insert("n".into(), ItemMeta { item: "n".into(), title: "N".into(), ..Default::default() });
        let train = vec![ix("u", "a", 4.0, 0), ix("u", "b", 4.0, 1), ix("bare", "n", 4.0, 2), ix("x", "a", 1.0, 3)];
        let idx = TrainIndex::new(&train);
        let global = GlobalDistributions::new(&train, &catalog);
        let (ckld, csd, bkld, bsd) = diversity_features(&"bare".into(), &idx, &catalog, &global).unwrap();
        assert_eq!(ckld, 0.0);
        assert!((csd - (4.0 / 9.0 + 1.0 / 9.0)).abs() < 1e-15);
        assert_eq!((bkld, bsd), (0.0, 0.0));
    }

    #[test]
    fn vendi_extremes() {
        let e = [1.0, 0.0, 0.0, 0.0];
        let dup: Vec<&[f64]> = vec![&e, &e, &e];
        assert!((vendi_score(&dup).unwrap() - 1.0).abs() < 1e-6);
        let basis: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        let refs: Vec<&[f64]> = basis.iter().map(Vec::as_slice).collect();
        assert!((vendi_score(&refs).unwrap() - 4.0).abs() < 1e-6);
    }

    #[test]
    fn vendi_matches_eigen_oracle() {
        let mut rng = RngStream::new(12, 0);
        for _ in 0..10 {
            let vs: Vec<Vec<f64>> = (0..5)
                .map(|_| {
                    let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let n = crate::numerics::l2_norm(&v);
                    v.into_iter().map(|x| x / n).collect()
                })
                .collect();
            let refs: Vec<&[f64]> = vs.iter().map(Vec::as_slice).collect();
            // oracle: eigenvalues of K/n via an explicit Gram build and the trace identity check
            let n = vs.len();
            let gram = DenseMatrix::from_rows(
                &(0..n).map(|i| (0..n).map(|j| dot(&vs[i], &vs[j]) / n as f64).collect()).collect::<Vec<_>>(),
            )
            .unwrap();
            let eig = sym_eig(&gram, 1e-14).unwrap();
            let h: f64 = eig.eigenvalues.iter().filter(|l| **l > 1e-300).map(|l| -l * l.ln()).sum();
            let got = vendi_score(&refs).unwrap();
            assert!((got - h.exp()).abs() < 1e-6);
            assert!((1.0..=5.0).contains(&got));
        }
    }

    #[test]
    fn velocity_definition() {
        let day = 24 * 3600;
        let train = vec![
            ix("me", "a", 5.0, 0),
            ix("o1", "a", 5.0, 2 * day),
            ix("o2", "a", 5.0, 10 * day),
            ix("o3", "a", 5.0, 40 * day),
            ix("me", "b", 5.0, 0),
        ];
        let idx = TrainIndex::new(&train);
        assert_eq!(velocity(&"me".into(), &idx, 30 * day).unwrap(), 2.0);
        assert_eq!(velocity(&"o3".into(), &idx, 30 * day).unwrap(), 0.0);
    }

    #[test]
    fn scaling_cases() {
        let s = min_max_scale_columns(&[vec![2.0, 7.0], vec![4.0, 7.0], vec![6.0, 7.0]]);
        assert_eq!(s, vec![vec![0.0, 0.5], vec![0.5, 0.5], vec![1.0, 0.5]]);
    }

    fn table_from(values: &[f64]) -> FeatureTable {
        let raw = values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let mut r = [0.0; 12];
                r[FeatureName::AP.index()] = v;
                (UserId::from(format!("u{i:02}")), r)
            })
            .collect();
        min_max_scale(raw)
    }

    #[test]
    fn top_fraction_selection() {
        let t = table_from(&[5.0, 1.0, 9.0, 3.0, 8.0, 2.0, 4.0, 6.0, 7.0, 0.0]);
        let top = t.top_fraction_users(FeatureName::AP, 0.2).unwrap();
        assert_eq!(top, ["u02", "u04"].iter().map(|s| UserId::from(*s)).collect());
        assert_eq!(t.top_fraction_users(FeatureName::AP, 1.0).unwrap().len(), 10);
        assert!(t.top_fraction_users(FeatureName::AP, 0.0).is_err());
    }

    #[test]
    fn top_fraction_ties_follow_stable_sort() {
        let vals = [1.0, 3.0, 3.0, 3.0, 0.0, 3.0, 2.0, 1.0];
        let t = table_from(&vals);
        let got = t.top_fraction_users(FeatureName::AP, 0.25).unwrap();
        // stable sort of ids by descending value keeps ascending ids among ties
        let mut ids: Vec<usize> = (0..vals.len()).collect();
        ids.sort_by(|a, b| vals[*b].partial_cmp(&vals[*a]).unwrap());
        let want: BTreeSet<UserId> = ids[..2].iter().map(|i| UserId::from(format!("u{i:02}"))).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn feature_names_round_trip() {
        for f in FeatureName::ALL {
            assert_eq!(f.abbrev().parse::<FeatureName>().unwrap(), f);
        }
        assert!("XYZ".parse::<FeatureName>().is_err());
    }

    #[test]
    fn table_file_round_trip() {
        let t = table_from(&[0.5, 1.5, 0.25]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("features.tsv");
        t.write(&p).unwrap();
        assert_eq!(FeatureTable::read(&p).unwrap(), t);
    }
}
