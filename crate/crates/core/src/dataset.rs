//! Review-log ingestion, k-core filtering and the single-time-point split.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{format_err, invalid, Error, Result};

macro_rules! id_newtype {
    ($name:ident) => {
        #[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

id_newtype!(UserId);
id_newtype!(ItemId);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    pub rating: f64,
    pub timestamp: i64,
}

impl Interaction {
    pub fn new(user: impl Into<UserId>, item: impl Into<ItemId>, rating: f64, timestamp: i64) -> Self {
        Self { user: user.into(), item: item.into(), rating, timestamp }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub item: ItemId,
    pub title: String,
    pub brand: Option<String>,
    pub categories: Vec<String>,
    pub description: Option<String>,
    pub features_text: Vec<String>,
}

/// Item id → metadata.
pub type Catalog = BTreeMap<ItemId, ItemMeta>;

/// JSON keys used when reading review and metadata lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldNames {
    pub user: String,
    pub item: String,
    pub rating: String,
    pub timestamp: String,
    pub meta_item: String,
    pub title: String,
    pub brand: String,
    pub categories: Vec<String>,
    pub description: String,
    pub features: String,
}

impl Default for FieldNames {
    fn default() -> Self {
        Self {
            user: "reviewerID".into(),
            item: "asin".into(),
            rating: "overall".into(),
            timestamp: "unixReviewTime".into(),
            meta_item: "asin".into(),
            title: "title".into(),
            brand: "brand".into(),
            categories: vec!["categories".into(), "category".into()],
            description: "description".into(),
            features: "feature".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadStats {
    pub malformed_reviews: usize,
    pub malformed_meta: usize,
    /// Interactions dropped because the item has no metadata or no title.
    pub dropped_without_title: usize,
}

#[derive(Clone, Debug)]
pub struct LoadedReviews {
    pub interactions: Vec<Interaction>,
    pub catalog: Catalog,
    pub stats: LoadStats,
}

/// Parses a line as JSON, falling back to the Python-literal dialect
/// (`{'asin': 'X', ...}`) used by some public metadata dumps.
fn parse_record(line: &str) -> Option<Value> {
    serde_json::from_str(line)
        .ok()
        .or_else(|| python_literal_to_json(line).and_then(|s| serde_json::from_str(&s).ok()))
}

/// Rewrites a Python dict/list literal into JSON text.
fn python_literal_to_json(src: &str) -> Option<String> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = String::with_capacity(src.len() + 16);
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '\'' | '"' => {
                let quote = c;
                out.push('"');
                i += 1;
                loop {
                    let ch = *chars.get(i)?;
                    if ch == quote {
                        break;
                    }
                    if ch == '\\' {
                        let next = *chars.get(i + 1)?;
                        match next {
                            '\'' => out.push('\''),
                            '"' => out.push_str("\\\""),
                            'n' | 't' | 'r' | '\\' | '/' | 'b' | 'f' | 'u' => {
                                out.push('\\');
                                out.push(next);
                            }
                            'x' => {
                                let hex: String = chars.get(i + 2..i + 4)?.iter().collect();
                                out.push_str("\\u00");
                                out.push_str(&hex);
                                i += 2;
                            }
                            other => out.push(other),
                        }
                        i += 2;
                        continue;
                    }
                    match ch {
                        '"' => out.push_str("\\\""),
                        '\n' => out.push_str("\\n"),
                        '\t' => out.push_str("\\t"),
                        c if (c as u32) < 0x20 => out.push(' '),
                        c => out.push(c),
                    }
                    i += 1;
                }
                out.push('"');
                i += 1;
            }
            c if c.is_ascii_alphabetic() => {
                let start = i;
                while i < chars.len() && chars[i].is_ascii_alphanumeric() {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                if out.ends_with(|p: char| p.is_ascii_digit() || p == '.') {
                    // exponent of a float literal
                    out.push_str(&word);
                    continue;
                }
                match word.as_str() {
                    "True" => out.push_str("true"),
                    "False" => out.push_str("false"),
                    "None" => out.push_str("null"),
                    _ => return None,
                }
            }
            c => {
                out.push(c);
                i += 1;
            }
        }
    }
    Some(out)
}

fn as_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn as_i64(v: &Value) -> Option<i64> {
    match v {
        Value::Number(n) => n.as_i64().or_else(|| n.as_f64().map(|f| f as i64)),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

/// Flattens strings and arbitrarily nested string lists.
fn collect_strings(v: &Value, out: &mut Vec<String>) {
    match v {
        Value::String(s) if !s.trim().is_empty() => out.push(s.trim().to_owned()),
        Value::Array(items) => items.iter().for_each(|x| collect_strings(x, out)),
        _ => {}
    }
}

fn parse_review(v: &Value, f: &FieldNames) -> Option<Interaction> {
    let user = as_text(v.get(&f.user)?)?;
    let item = as_text(v.get(&f.item)?)?;
    let rating = as_f64(v.get(&f.rating)?)?;
    let timestamp = as_i64(v.get(&f.timestamp)?)?;
    if user.is_empty() || item.is_empty() || !rating.is_finite() || timestamp < 0 {
        return None;
    }
    Some(Interaction::new(user, item, rating, timestamp))
}

fn parse_meta(v: &Value, f: &FieldNames) -> Option<ItemMeta> {
    let item = as_text(v.get(&f.meta_item)?)?;
    let title = v.get(&f.title).and_then(as_text).map(|t| t.trim().to_owned()).unwrap_or_default();
    let brand = v.get(&f.brand).and_then(as_text).filter(|b| !b.trim().is_empty());
    let mut categories = Vec::new();
    for key in &f.categories {
        if let Some(c) = v.get(key) {
            collect_strings(c, &mut categories);
        }
    }
    let mut seen = BTreeSet::new();
    categories.retain(|c| seen.insert(c.clone()));
    let description = v.get(&f.description).map(|d| {
        let mut parts = Vec::new();
        collect_strings(d, &mut parts);
        parts.join(" ")
    });
    let description = description.filter(|d| !d.is_empty());
    let mut features_text = Vec::new();
    if let Some(x) = v.get(&f.features) {
        collect_strings(x, &mut features_text);
    }
    Some(ItemMeta { item: item.into(), title, brand, categories, description, features_text })
}

/// Reads line-delimited review and metadata records.
///
/// Malformed lines are counted and skipped. Interactions on items without
/// a titled metadata record are dropped.
pub fn load_reviews<R: BufRead, M: BufRead>(reviews: R, meta: M, fields: &FieldNames) -> Result<LoadedReviews> {
    let mut stats = LoadStats::default();
    let mut catalog = Catalog::new();
    for line in meta.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(&line).as_ref().and_then(|v| parse_meta(v, fields)) {
            Some(m) => {
                catalog.insert(m.item.clone(), m);
            }
            None => stats.malformed_meta += 1,
        }
    }
    catalog.retain(|_, m| !m.title.is_empty());

    let mut interactions = Vec::new();
    for line in reviews.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(&line).as_ref().and_then(|v| parse_review(v, fields)) {
            Some(x) if catalog.contains_key(&x.item) => interactions.push(x),
            Some(_) => stats.dropped_without_title += 1,
            None => stats.malformed_reviews += 1,
        }
    }
    if interactions.is_empty() {
        return Err(Error::EmptyDataset("no valid review records".into()));
    }
    sort_log(&mut interactions);
    Ok(LoadedReviews { interactions, catalog, stats })
}

pub fn load_review_files(reviews: &Path, meta: &Path, fields: &FieldNames) -> Result<LoadedReviews> {
    let r = BufReader::new(File::open(reviews)?);
    let m = BufReader::new(File::open(meta)?);
    load_reviews(r, m, fields)
}

/// Sorts by timestamp, then user, then item.
pub fn sort_log(log: &mut [Interaction]) {
    log.sort_by(|a, b| {
        a.timestamp
            .cmp(&b.timestamp)
            .then_with(|| a.user.cmp(&b.user))
            .then_with(|| a.item.cmp(&b.item))
    });
}

/// Largest subset of `log` in which every user and item has at least `k`
/// interactions, found by iterated deletion until fixpoint.
pub fn k_core_filter(log: &[Interaction], k: usize) -> Vec<Interaction> {
    assert!(k >= 1, "k must be at least 1");
    let mut user_idx: HashMap<&UserId, usize> = HashMap::new();
    let mut item_idx: HashMap<&ItemId, usize> = HashMap::new();
    let edges: Vec<(usize, usize)> = log
        .iter()
        .map(|x| {
            let nu = user_idx.len();
            let u = *user_idx.entry(&x.user).or_insert(nu);
            let ni = item_idx.len();
            let i = *item_idx.entry(&x.item).or_insert(ni);
            (u, i)
        })
        .collect();
    let mut user_deg = vec![0usize; user_idx.len()];
    let mut item_deg = vec![0usize; item_idx.len()];
    let mut user_edges = vec![Vec::new(); user_idx.len()];
    let mut item_edges = vec![Vec::new(); item_idx.len()];
    for (e, &(u, i)) in edges.iter().enumerate() {
        user_deg[u] += 1;
        item_deg[i] += 1;
        user_edges[u].push(e);
        item_edges[i].push(e);
    }
    let mut alive = vec![true; edges.len()];
    // queue of (is_user, index) nodes whose degree fell below k
    let mut queue: VecDeque<(bool, usize)> = VecDeque::new();
    let mut removed_user = vec![false; user_deg.len()];
    let mut removed_item = vec![false; item_deg.len()];
    for (u, &d) in user_deg.iter().enumerate() {
        if d < k {
            removed_user[u] = true;
            queue.push_back((true, u));
        }
    }
    for (i, &d) in item_deg.iter().enumerate() {
        if d < k {
            removed_item[i] = true;
            queue.push_back((false, i));
        }
    }
    while let Some((is_user, node)) = queue.pop_front() {
        let incident = if is_user { &user_edges[node] } else { &item_edges[node] };
        for &e in incident {
            if !alive[e] {
                continue;
            }
            alive[e] = false;
            let (u, i) = edges[e];
            user_deg[u] -= 1;
            item_deg[i] -= 1;
            if !removed_user[u] && user_deg[u] < k {
                removed_user[u] = true;
                queue.push_back((true, u));
            }
            if !removed_item[i] && item_deg[i] < k {
                removed_item[i] = true;
                queue.push_back((false, i));
            }
        }
    }
    log.iter().zip(alive).filter(|(_, a)| *a).map(|(x, _)| x.clone()).collect()
}

/// Train/test partition at a single time point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: Vec<Interaction>,
    pub test: Vec<Interaction>,
    pub warm_users: BTreeSet<UserId>,
    /// Test items with no train interaction.
    pub cold_items: BTreeSet<ItemId>,
    /// Train-count item frequencies.
    pub unigram: BTreeMap<ItemId, f64>,
    pub split_time: i64,
}

impl SplitDataset {
    /// Every item seen in either partition, sorted.
    pub fn item_universe(&self) -> Vec<ItemId> {
        let set: BTreeSet<&ItemId> = self.train.iter().chain(&self.test).map(|x| &x.item).collect();
        set.into_iter().cloned().collect()
    }

    pub fn warm_items(&self) -> Vec<ItemId> {
        self.unigram.keys().cloned().collect()
    }

    /// Test users that never appear in train.
    pub fn unknown_test_users(&self) -> BTreeSet<UserId> {
        self.test.iter().filter(|x| !self.warm_users.contains(&x.user)).map(|x| x.user.clone()).collect()
    }

    pub fn is_cold(&self, item: &ItemId) -> bool {
        self.cold_items.contains(item)
    }

    /// Train interactions grouped per user in chronological order.
    pub fn train_histories(&self) -> BTreeMap<UserId, Vec<&Interaction>> {
        let mut out: BTreeMap<UserId, Vec<&Interaction>> = BTreeMap::new();
        for x in &self.train {
            out.entry(x.user.clone()).or_default().push(x);
        }
        out
    }

    pub fn summary(&self) -> SplitSummary {
        let users: BTreeSet<&UserId> = self.train.iter().chain(&self.test).map(|x| &x.user).collect();
        SplitSummary {
            users: users.len(),
            items: self.item_universe().len(),
            interactions: self.train.len() + self.test.len(),
            train_interactions: self.train.len(),
            test_interactions: self.test.len(),
            warm_users: self.warm_users.len(),
            cold_items: self.cold_items.len(),
            cold_test_interactions: self.test.iter().filter(|x| self.is_cold(&x.item)).count(),
            unknown_test_users: self.unknown_test_users().len(),
            split_time: self.split_time,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub train_interactions: usize,
    pub test_interactions: usize,
    pub warm_users: usize,
    pub cold_items: usize,
    pub cold_test_interactions: usize,
    pub unknown_test_users: usize,
    pub split_time: i64,
}

/// Splits a timestamp-sorted log at the smallest time `t` such that at least
/// `train_fraction` of the interactions happen at or before `t`.
///
/// `train_fraction == 1.0` puts everything in train.
pub fn temporal_split(log: &[Interaction], train_fraction: f64) -> Result<SplitDataset> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(invalid(format!("train fraction {train_fraction} outside (0, 1]")));
    }
    if log.is_empty() {
        return Err(Error::EmptyDataset("cannot split an empty log".into()));
    }
    if log.windows(2).any(|w| w[0].timestamp > w[1].timestamp) {
        return Err(invalid("log is not sorted by timestamp"));
    }
    let n = log.len();
    // smallest prefix length whose fraction reaches train_fraction
    let needed = ((train_fraction * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let split_time = log[needed.min(n) - 1].timestamp;
    let cut = log.partition_point(|x| x.timestamp <= split_time);
    if cut == n && train_fraction < 1.0 {
        return Err(Error::DegenerateSplit(format!(
            "no interaction is later than the split time {split_time}"
        )));
    }
    let train = log[..cut].to_vec();
    let test = log[cut..].to_vec();
    Ok(build_split(train, test, split_time))
}

pub(crate) fn build_split(train: Vec<Interaction>, test: Vec<Interaction>, split_time: i64) -> SplitDataset {
    let warm_users: BTreeSet<UserId> = train.iter().map(|x| x.user.clone()).collect();
    let mut counts: BTreeMap<ItemId, usize> = BTreeMap::new();
    for x in &train {
        *counts.entry(x.item.clone()).or_default() += 1;
    }
    let total = train.len() as f64;
    let unigram = counts.iter().map(|(k, &c)| (k.clone(), c as f64 / total)).collect();
    let cold_items = test.iter().filter(|x| !counts.contains_key(&x.item)).map(|x| x.item.clone()).collect();
    SplitDataset { train, test, warm_users, cold_items, unigram, split_time }
}

/// Load, title-filter, k-core and split in one go.
pub fn prepare(loaded: &LoadedReviews, k_core: usize, train_fraction: f64) -> Result<SplitDataset> {
    let mut core = k_core_filter(&loaded.interactions, k_core);
    if core.is_empty() {
        return Err(Error::EmptyDataset(format!("nothing survives {k_core}-core filtering")));
    }
    sort_log(&mut core);
    temporal_split(&core, train_fraction)
}

fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c == '\\' {
            match it.next() {
                Some('t') => out.push('\t'),
                Some('n') => out.push('\n'),
                Some('r') => out.push('\r'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

fn write_interactions(path: &Path, rows: &[Interaction]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "user\titem\trating\ttimestamp")?;
    for x in rows {
        writeln!(w, "{}\t{}\t{}\t{}", escape_field(x.user.as_str()), escape_field(x.item.as_str()), x.rating, x.timestamp)?;
    }
    w.flush()?;
    Ok(())
}

fn read_interactions(path: &Path) -> Result<Vec<Interaction>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate().skip(1) {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = || format_err(format!("{}:{}: malformed interaction row", path.display(), n + 1));
        if cols.len() != 4 {
            return Err(bad());
        }
        out.push(Interaction {
            user: unescape_field(cols[0]).into(),
            item: unescape_field(cols[1]).into(),
            rating: cols[2].parse().map_err(|_| bad())?,
            timestamp: cols[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

const LIST_SEP: &str = " | ";

fn write_items(path: &Path, split: &SplitDataset, catalog: &Catalog) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "item\tcold\ttrain_count\ttitle\tbrand\tcategories\tdescription\tfeatures")?;
    let total = split.train.len() as f64;
    for item in split.item_universe() {
        let meta = catalog.get(&item).ok_or_else(|| Error::MissingMetadata(item.to_string()))?;
        let count = split.unigram.get(&item).map_or(0, |p| (p * total).round() as usize);
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            escape_field(item.as_str()),
            u8::from(split.is_cold(&item)),
            count,
            escape_field(&meta.title),
            escape_field(meta.brand.as_deref().unwrap_or("")),
            escape_field(&meta.categories.join(LIST_SEP)),
            escape_field(meta.description.as_deref().unwrap_or("")),
            escape_field(&meta.features_text.join(LIST_SEP)),
        )?;
    }
    w.flush()?;
    Ok(())
}

fn split_list(s: &str) -> Vec<String> {
    if s.is_empty() {
        Vec::new()
    } else {
        s.split(LIST_SEP).map(str::to_owned).collect()
    }
}

fn read_items(path: &Path) -> Result<Catalog> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Catalog::new();
    for (n, line) in r.lines().enumerate().skip(1) {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<String> = line.split('\t').map(unescape_field).collect();
        if cols.len() != 8 {
            return Err(format_err(format!("{}:{}: expected 8 columns", path.display(), n + 1)));
        }
        let opt = |s: &String| if s.is_empty() { None } else { Some(s.clone()) };
        let meta = ItemMeta {
            item: cols[0].clone().into(),
            title: cols[3].clone(),
            brand: opt(&cols[4]),
            categories: split_list(&cols[5]),
            description: opt(&cols[6]),
            features_text: split_list(&cols[7]),
        };
        out.insert(meta.item.clone(), meta);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitManifest {
    pub summary: SplitSummary,
    pub load_stats: Option<LoadStats>,
}

/// Writes `train.tsv`, `test.tsv`, `items.tsv` and `manifest.json`.
pub fn write_split(dir: &Path, split: &SplitDataset, catalog: &Catalog, stats: Option<&LoadStats>) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_interactions(&dir.join("train.tsv"), &split.train)?;
    write_interactions(&dir.join("test.tsv"), &split.test)?;
    write_items(&dir.join("items.tsv"), split, catalog)?;
    let manifest = SplitManifest { summary: split.summary(), load_stats: stats.cloned() };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| format_err(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(())
}

/// Reads a directory written by [`write_split`].
pub fn read_split(dir: &Path) -> Result<(SplitDataset, Catalog)> {
    let train = read_interactions(&dir.join("train.tsv"))?;
    let test = read_interactions(&dir.join("test.tsv"))?;
    let catalog = read_items(&dir.join("items.tsv"))?;
    let manifest: SplitManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)
        .map_err(|e| format_err(format!("manifest.json: {e}")))?;
    Ok((build_split(train, test, manifest.summary.split_time), catalog))
}
