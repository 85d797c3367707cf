//! Runs small selection experiments (none, random, two single features) on
//! synthetic data and renders the report tables.

use coldaug::runner::{report, run_experiments, RunConfig, Workspace};

fn main() -> coldaug::Result<()> {
    let mut cfg = RunConfig::from_toml(
        r#"
seed = 3
[data]
source = "synthetic"
users = 200
[oracle]
pairs_per_user = 10
[tower]
epochs = 5
[experiment]
jobs = 2
strategies = ["none", "random", "feature:MP", "feature:CSD"]
"#,
    )?;
    cfg.out = std::env::temp_dir().join("coldaug-report-example");
    let ws = Workspace::load(&cfg)?;
    for r in run_experiments(&cfg, &ws)? {
        println!("{:<14} cold@50 {:?}", r.strategy, r.cold50().mean);
    }
    for p in report(&cfg.out)? {
        println!("--- {}\n{}", p.display(), std::fs::read_to_string(&p)?);
    }
    Ok(())
}
