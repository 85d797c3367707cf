//! Trains the two-tower retriever without augmentation and prints the
//! per-epoch loss and recall curves.

use coldaug::numerics::{stream_id, RngStream};
use coldaug::synthetic::{SyntheticConfig, SyntheticDataset};
use coldaug::twotower::{train, EpochMetrics, TowerConfig, TwoTowerModel};

fn main() -> coldaug::Result<()> {
    let data = SyntheticDataset::generate(&SyntheticConfig::default())?;
    let cfg = TowerConfig { epochs: 10, ..TowerConfig::default() };
    let mut rng = RngStream::new(cfg.seed, stream_id("two-tower/init", 0, 0));
    let mut model = TwoTowerModel::init(cfg.clone(), &data.split, &data.embeddings, &mut rng)?;
    println!("{} parameters", model.parameter_count());
    let report = train(&mut model, &data.split, None, cfg.epochs, &mut |m: &EpochMetrics| {
        let r = &m.recall[&50];
        println!("epoch {:>2}  loss {:>8}  recall@50 overall {:?} warm {:?} cold {:?}",
            m.epoch, m.loss.map(|l| format!("{l:.4}")).unwrap_or_default(), r.overall, r.warm, r.cold);
    })?;
    println!("best epoch {} (cold recall@50 {:?})", report.best_epoch, report.best_cold_recall());
    Ok(())
}
