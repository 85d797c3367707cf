//! Item metadata embeddings: precomputed text-encoder output loaded from disk,
//! or a deterministic feature-hashing fallback.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::dataset::{Catalog, ItemId, ItemMeta};
use crate::error::{format_err, invalid, Error, Result};
use crate::numerics::{dot, fnv1a64_extend, l2_norm};

pub const DEFAULT_DIM: usize = 512;
const HEADER_TAG: &str = "item_embeddings v1";

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: BTreeMap<ItemId, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self { dim, vectors: BTreeMap::new() }
    }

    /// Inserts `v` after L2-normalizing it.
    pub fn insert(&mut self, item: ItemId, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(format_err(format!("item {item}: vector has length {}, expected {}", v.len(), self.dim)));
        }
        let v = normalized(v).ok_or_else(|| Error::Degenerate(format!("item {item} has a zero or non-finite vector")))?;
        self.vectors.insert(item, v);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, item: &ItemId) -> Option<&[f64]> {
        self.vectors.get(item).map(Vec::as_slice)
    }

    pub fn require(&self, item: &ItemId) -> Result<&[f64]> {
        self.get(item).ok_or_else(|| Error::MissingEmbedding(item.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ItemId, &[f64])> {
        self.vectors.iter().map(|(k, v)| (k, v.as_slice()))
    }

    /// Builds the hashed fallback table for every item of `catalog`.
    pub fn from_catalog(catalog: &Catalog, dim: usize, seed: u64) -> Result<Self> {
        let mut t = Self::new(dim);
        for meta in catalog.values() {
            t.vectors.insert(meta.item.clone(), hash_embed(meta, dim, seed)?);
        }
        Ok(t)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{HEADER_TAG} {}", self.dim)?;
        for (item, v) in &self.vectors {
            let row: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            writeln!(w, "{}\t{}", item, row.join(","))?;
        }
        Ok(())
    }
}

/// Unit-norm copy of `v`; vectors already within 1e-12 of unit norm are kept
/// bit-for-bit so that a written table reads back unchanged.
fn normalized(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = l2_norm(&v);
    if !n.is_finite() || n == 0.0 {
        return None;
    }
    if (n - 1.0).abs() > 1e-12 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    Some(v)
}

pub fn load_embedding_file(path: &Path, expected_dim: Option<usize>) -> Result<EmbeddingTable> {
    read_embeddings(BufReader::new(File::open(path)?), expected_dim)
}

/// Parses the `item_embeddings v1 <dim>` text format.
pub fn read_embeddings<R: BufRead>(r: R, expected_dim: Option<usize>) -> Result<EmbeddingTable> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| format_err("embedding file is empty"))??;
    let dim: usize = header
        .strip_prefix(HEADER_TAG)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| format_err(format!("bad embedding header {header:?}")))?;
    if let Some(want) = expected_dim {
        if want != dim {
            return Err(format_err(format!("embedding file has dim {dim}, expected {want}")));
        }
    }
    let mut table = EmbeddingTable::new(dim);
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (item, values) = line
            .split_once('\t')
            .ok_or_else(|| format_err(format!("embedding row without a tab: {line:?}")))?;
        let item = ItemId::from(item);
        let v: Vec<f64> = values
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| format_err(format!("item {item}: {e}")))?;
        if table.vectors.contains_key(&item) {
            return Err(format_err(format!("duplicate item {item}")));
        }
        table.insert(item, v)?;
    }
    Ok(table)
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase)
}

fn meta_tokens(meta: &ItemMeta) -> Vec<String> {
    let mut out: Vec<String> = tokenize(&meta.title).collect();
    if let Some(b) = &meta.brand {
        out.extend(tokenize(b));
    }
    for c in &meta.categories {
        out.extend(tokenize(c));
    }
    if let Some(d) = &meta.description {
        out.extend(tokenize(d));
    }
    out
}

/// Signed feature hashing of the item's title, brand, categories and
/// description into `dim` buckets.
pub fn hash_embed(meta: &ItemMeta, dim: usize, seed: u64) -> Result<Vec<f64>> {
    if dim < 8 {
        return Err(invalid(format!("hash embedding dim must be at least 8, got {dim}")));
    }
    let tokens = meta_tokens(meta);
    if tokens.is_empty() {
        return Err(Error::Degenerate(format!("item {} has no metadata text", meta.item)));
    }
    let mut base = fnv1a64_extend(0xcbf2_9ce4_8422_2325, &seed.to_le_bytes());
    // colliding tokens can cancel out exactly; rehash with a salted base until
    // they do not
    for salt in 0u64..64 {
        let mut v = vec![0.0; dim];
        for t in &tokens {
            let h = fnv1a64_extend(base, t.as_bytes());
            let bucket = (h % dim as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        if let Some(u) = normalized(v) {
            return Ok(u);
        }
        base = fnv1a64_extend(base, &salt.to_le_bytes());
    }
    Err(Error::Degenerate(format!("item {} hashed to a zero vector", meta.item)))
}

/// Normalized mean of the embeddings of `items`.
pub fn history_centroid<'a, I>(items: I, table: &EmbeddingTable) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a ItemId>,
{
    let mut acc = vec![0.0; table.dim];
    let mut n = 0usize;
    for item in items {
        if let Some(v) = table.get(item) {
            acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::MissingEmbedding("no item of the history has an embedding".into()));
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    if l2_norm(&acc) < 1e-12 {
        return Err(Error::Degenerate("history embeddings average to zero".into()));
    }
    Ok(normalized(acc).expect("non-zero norm"))
}

/// [`history_centroid`], falling back to the earliest embeddable item when
/// the mean vanishes.
pub fn history_centroid_or_first<'a, I>(items: I, table: &EmbeddingTable) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a ItemId> + Clone,
{
    match history_centroid(items.clone(), table) {
        Err(Error::Degenerate(_)) => {
            let first = items.into_iter().find_map(|i| table.get(i)).expect("centroid had items");
            Ok(first.to_vec())
        }
        other => other,
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}
