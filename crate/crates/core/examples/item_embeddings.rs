//! Hashes item metadata into embeddings and compares within-genre and
//! cross-genre cosine similarity.

use coldaug::embeddings::{cosine, EmbeddingTable};
use coldaug::numerics::mean;
use coldaug::synthetic::{SyntheticConfig, SyntheticDataset};

fn main() -> coldaug::Result<()> {
    let data = SyntheticDataset::generate(&SyntheticConfig::default())?;
    let table = EmbeddingTable::from_catalog(&data.catalog, 256, 0)?;
    let items: Vec<_> = table.iter().map(|(i, v)| (i.clone(), v.to_vec())).collect();
    let (mut same, mut diff) = (Vec::new(), Vec::new());
    for (a, (ia, va)) in items.iter().enumerate().step_by(7) {
        for (ib, vb) in items.iter().skip(a + 1).step_by(5) {
            let s = cosine(va, vb);
            if data.item_cluster[ia] == data.item_cluster[ib] { same.push(s) } else { diff.push(s) }
        }
    }
    println!("{} items, dim {}", table.len(), table.dim());
    println!("mean cosine, same genre      {:.4} over {} pairs", mean(&same).unwrap_or(0.0), same.len());
    println!("mean cosine, different genre {:.4} over {} pairs", mean(&diff).unwrap_or(0.0), diff.len());
    Ok(())
}
