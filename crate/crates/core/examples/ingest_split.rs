//! Writes a synthetic review log as JSON lines, reloads it, applies the
//! 5-core filter and the 7:3 temporal split, and prints the split summary.

use coldaug::dataset::{load_review_files, prepare, FieldNames};
use coldaug::synthetic::{SyntheticConfig, SyntheticDataset};

fn main() -> coldaug::Result<()> {
    let dir = std::env::temp_dir().join("coldaug-ingest-example");
    std::fs::create_dir_all(&dir)?;
    let (reviews, meta) = (dir.join("reviews.json"), dir.join("meta.json"));
    let data = SyntheticDataset::generate(&SyntheticConfig { users: 200, ..SyntheticConfig::default() })?;
    data.write_json_lines(&reviews, &meta)?;

    let loaded = load_review_files(&reviews, &meta, &FieldNames::default())?;
    println!("parsed {} interactions, stats {:?}", loaded.interactions.len(), loaded.stats);
    let split = prepare(&loaded, 5, 0.7)?;
    let s = split.summary();
    println!("users {}  items {}  interactions {}", s.users, s.items, s.interactions);
    println!("train {}  test {}  cold items {}  cold test {}", s.train_interactions, s.test_interactions, s.cold_items, s.cold_test_interactions);
    println!("split time {}", s.split_time);
    Ok(())
}
