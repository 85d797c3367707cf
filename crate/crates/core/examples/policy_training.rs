//! Learns a selection policy on a planted synthetic dataset where only 20% of
//! users give truthful preferences, then compares the policy's top users
//! with the planted set.
//!
//! Usage: `cargo run --release --example policy_training -- [lr] [T] [iterations] [proxy epochs] [pretrain epochs] [bootstrap 0/1] [early stop 0/1] [misleading prob]`

use std::collections::BTreeSet;
use std::time::Instant;

use coldaug::dataset::UserId;
use coldaug::numerics::{mean, stream_id, RngStream};
use coldaug::policy::{bootstrap_init, top_users, Anneal, PolicyConfig, PolicyParams};
use coldaug::reward::{init_baselines, RewardMode};
use coldaug::runner::{measured_baselines, pretrain_checkpoints, selection_rewards, train_policy, Experiment, PolicyInputs, RewardConfig};
use coldaug::synthetic::{SyntheticConfig, SyntheticDataset};
use coldaug::twotower::TowerConfig;

fn main() -> coldaug::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let arg = |i: usize, d: f64| args.get(i).copied().unwrap_or(d);
    let started = Instant::now();

    let data = SyntheticDataset::generate(&SyntheticConfig { useful_fraction: 0.2, misleading_prob: arg(7, 0.5), ..SyntheticConfig::default() })?;
    let oracle = data.planted_oracle();
    let tower = TowerConfig { epochs: 20, aug_batch_size: 64, ..TowerConfig::default() };
    let mut exp = Experiment::new(&data.split, &data.embeddings, &oracle, tower, 11);
    exp.pairs_per_user = 20;

    let mut names = vec!["planted".to_owned()];
    names.extend((1..=4).map(|i| format!("noise{i}")));
    let inputs = PolicyInputs { names: names.clone(), rows: data.planted_features(4) };

    let reward = RewardConfig {
        m: 6,
        alpha_init: 1.0,
        mode: if arg(6, 0.0) > 0.0 { RewardMode::EarlyStop { epochs: arg(3, 5.0) as usize } } else { RewardMode::FineTune { epochs: arg(3, 3.0) as usize } },
        pretrain_epochs: arg(4, 10.0) as usize,
        max_iterations: arg(2, 50.0) as usize,
        patience: usize::MAX,
        ..RewardConfig::default()
    };
    let policy = PolicyConfig { learning_rate: arg(0, 0.1), temperature: arg(1, 1.0), anneal: Anneal { decay: 1.0, floor: arg(1, 1.0) }, ..PolicyConfig::default() };

    let pretrained = pretrain_checkpoints(&exp, &reward)?;
    let (init, baselines) = if arg(5, 1.0) > 0.0 {
        // bootstrap from per-column arms, as `coldaug policy-train` does
        let cols: Vec<usize> = (0..names.len()).collect();
        let baselines = measured_baselines(&exp, &inputs, &cols, &reward, &pretrained)?;
        let quota = exp.quota()?;
        let scores: Vec<f64> = cols
            .iter()
            .map(|&c| {
                let top: BTreeSet<UserId> = inputs.top_by_column(c, quota).into_iter().collect();
                let f: Vec<f64> = baselines.f.iter().filter(|(u, _)| top.contains(*u)).map(|(_, v)| *v).collect();
                mean(&f).unwrap_or(0.0)
            })
            .collect();
        println!("arm scores {scores:.4?}");
        let init = bootstrap_init(&policy, names.clone(), &scores, &mut RngStream::new(11, stream_id("policy/init", 0, 0)))?;
        (init, baselines)
    } else {
        let nonaug = selection_rewards(&exp, &[], &reward, &pretrained, "example/none", 0)?;
        let baselines = init_baselines(&nonaug, &[], &data.split.warm_users, reward.alpha_init, reward.alpha_train)?;
        (PolicyParams::linear(vec![0.0; names.len()], policy.temperature, policy.anneal, names.clone())?, baselines)
    };
    println!("pretrained in {:.0?}; non-augmented proxy recall {:.4}", started.elapsed(), baselines.b0);

    let run = train_policy(&exp, &inputs, init, baselines, &policy, &reward, &pretrained, &mut |log, p| {
        let w: Vec<String> = p.theta().unwrap().iter().map(|x| format!("{x:+.3}")).collect();
        println!("iter {:>2}  mean_cr {:.4}  theta [{}]", log.iteration, log.mean_cr, w.join(" "));
    })?;

    let planted: BTreeSet<UserId> = data.usefulness.iter().filter(|(_, &v)| v == 1.0).map(|(u, _)| u.clone()).collect();
    let top: BTreeSet<UserId> = top_users(run.final_params(), &inputs.rows, exp.quota()?)?.into_iter().collect();
    let inter = top.intersection(&planted).count() as f64;
    let jaccard = inter / top.union(&planted).count() as f64;
    println!("jaccard {jaccard:.3}  elapsed {:.0?}", started.elapsed());
    Ok(())
}
