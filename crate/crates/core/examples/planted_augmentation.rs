//! Compares cold recall@50 without augmentation and with triples from a
//! random 20% of users on a planted synthetic dataset.
//!
//! Usage: `cargo run --release --example planted_augmentation -- [seeds]`

use coldaug::numerics::{mean, stream_id, RngStream};
use coldaug::oracle::{generate_triples, train_histories, SimulatedOracle, SimulationMode};
use coldaug::synthetic::{SyntheticConfig, SyntheticDataset};
use coldaug::twotower::{train, TowerConfig, TwoTowerModel};

fn main() -> coldaug::Result<()> {
    let seeds: u64 = std::env::args().nth(1).map(|a| a.parse().expect("seed count")).unwrap_or(3);
    let data = SyntheticDataset::generate(&SyntheticConfig::default())?;
    let oracle = SimulatedOracle::new(&data.oracle_embeddings, SimulationMode::Deterministic)?;
    let histories = train_histories(&data.split);
    let cold = data.cold_items();
    let quota = data.split.warm_users.len() / 5;
    let (mut none, mut aug) = (Vec::new(), Vec::new());
    for seed in 0..seeds {
        let cfg = TowerConfig { seed, epochs: 20, ..TowerConfig::default() };
        let mut rng = RngStream::new(seed, stream_id("example/select", 0, 0));
        let selected = data.sample_users(quota, &mut rng);
        let triples = generate_triples(&selected, &cold, 20, &histories, &oracle, &mut rng)?;
        let mut recall = Vec::new();
        for extra in [None, Some(triples.as_slice())] {
            let mut init = RngStream::new(seed, stream_id("two-tower/init", 0, 0));
            let mut model = TwoTowerModel::init(cfg.clone(), &data.split, &data.embeddings, &mut init)?;
            recall.push(train(&mut model, &data.split, extra, cfg.epochs, &mut ())?.best_cold_recall().unwrap_or(0.0));
        }
        println!("seed {seed}: none {:.4}  random 20% {:.4}", recall[0], recall[1]);
        none.push(recall[0]);
        aug.push(recall[1]);
    }
    let (n, a) = (mean(&none).unwrap(), mean(&aug).unwrap());
    println!("mean: none {n:.4}  random {a:.4}  relative {:+.1}%", (a - n) / n * 100.0);
    Ok(())
}
