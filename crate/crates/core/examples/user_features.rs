//! Computes the twelve behavioral user features on a synthetic split and
//! prints raw and min-max scaled values for a few users.

use coldaug::embeddings::EmbeddingTable;
use coldaug::features::{FeatureName, FeatureTable, DEFAULT_VELOCITY_WINDOW};
use coldaug::synthetic::{SyntheticConfig, SyntheticDataset};

fn main() -> coldaug::Result<()> {
    let data = SyntheticDataset::generate(&SyntheticConfig { users: 200, coherent_fraction: 0.5, ..SyntheticConfig::default() })?;
    let table = EmbeddingTable::from_catalog(&data.catalog, 64, 0)?;
    let features = FeatureTable::compute(&data.split, &data.catalog, &table, DEFAULT_VELOCITY_WINDOW)?;
    let header: Vec<&str> = FeatureName::ALL.iter().map(|f| f.abbrev()).collect();
    println!("user   {}", header.join("  "));
    for u in features.user_ids().iter().take(5) {
        let v = features.get(u).expect("row exists");
        let cells: Vec<String> = FeatureName::ALL.iter().map(|&f| format!("{:.2}", v.scaled(f))).collect();
        println!("{u}  {}", cells.join("  "));
        println!("  raw MP {:.3}  EE {:.3}  V {:.3}", v.raw(FeatureName::MP), v.raw(FeatureName::EE), v.raw(FeatureName::V));
    }
    let top = features.top_fraction_users(FeatureName::CSD, 0.2)?;
    println!("top 20% by CSD: {} users", top.len());
    Ok(())
}
