use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use coldaug::dataset::write_split;
use coldaug::numerics::{stream_id, RngStream};
use coldaug::oracle::{read_triples, write_triples};
use coldaug::runner::{report, run_experiments, run_policy_training, write_json, Experiment, PolicyInputs, RunConfig, Strategy, Workspace};
use coldaug::twotower::{evaluate, train_keep_best, TwoTowerModel, DEFAULT_KS};
use coldaug::{Error, Result};

#[derive(Parser)]
#[command(name = "coldaug", version, about = "Cold-start item augmentation with learned user selection")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load reviews, apply the k-core filter and the temporal split.
    Ingest,
    /// Compute the user feature table.
    Features,
    /// Write item embeddings.
    Embed,
    /// Select users with a strategy and generate preference triples.
    Augment {
        #[arg(long, default_value = "random")]
        strategy: String,
    },
    /// Train one model, or run selection experiments with `--strategy`.
    Train {
        /// Strategies to compare (repeatable); `none` is always included.
        #[arg(long)]
        strategy: Vec<String>,
        /// Augmentation triples for single-model training.
        #[arg(long)]
        triples: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        model: PathBuf,
    },
    /// Train the selection policy.
    PolicyTrain,
    /// Render tables from the artifacts in the output directory.
    Report,
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(j) = cli.jobs {
        cfg.threads = j;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config(&cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    std::fs::create_dir_all(&cfg.out)?;
    if let Command::Report = cli.command {
        for p in report(&cfg.out)? {
            println!("{}", p.display());
        }
        return Ok(());
    }
    let ws = Workspace::load(&cfg)?;
    match cli.command {
        Command::Ingest => {
            let dir = cfg.out.join("data");
            write_split(&dir, &ws.split, &ws.catalog, ws.stats.as_ref())?;
            println!("{}", serde_json::to_string(&ws.split.summary()).expect("summary serializes"));
        }
        Command::Features => {
            let path = cfg.out.join("features.tsv");
            ws.features(cfg.data.velocity_window_days)?.write(&path)?;
            println!("{}", path.display());
        }
        Command::Embed => {
            let path = cfg.out.join("embeddings.tsv");
            ws.embeddings.write(&path)?;
            println!("{}", path.display());
        }
        Command::Augment { strategy } => {
            let strategy: Strategy = strategy.parse()?;
            let features = ws.features(cfg.data.velocity_window_days)?;
            let inputs = PolicyInputs::from_features(&features, &cfg.policy.features);
            let oracle = ws.oracle(&cfg.oracle)?;
            let mut exp = Experiment::configured(&cfg, &ws, oracle.as_ref());
            exp.features = Some(&features);
            exp.policy_inputs = Some(&inputs);
            let selected = exp.select(&strategy)?;
            let triples = exp.augment(&selected, &format!("augment/{}", strategy.name()), 0)?;
            let path = cfg.out.join(format!("triples_{}.jsonl", strategy.slug()));
            write_triples(&path, &triples)?;
            println!("{} users, {} triples -> {}", selected.len(), triples.len(), path.display());
        }
        Command::Train { strategy, triples } if !strategy.is_empty() => {
            if triples.is_some() {
                return Err(Error::InvalidInput("--triples applies to single-model training only".into()));
            }
            let mut cfg = cfg;
            cfg.experiment.strategies = strategy;
            for r in run_experiments(&cfg, &ws)? {
                let c = r.cold50();
                println!("{:<20} cold@50 {}", r.strategy, c.mean.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into()));
            }
        }
        Command::Train { triples, .. } => {
            let aug = triples.as_deref().map(read_triples).transpose()?;
            let tower = coldaug::twotower::TowerConfig { seed: cfg.seed, ..cfg.tower.clone() };
            let mut rng = RngStream::new(cfg.seed, stream_id("two-tower/init", 0, 0));
            let mut model = TwoTowerModel::init(tower, &ws.split, &ws.embeddings, &mut rng)?;
            let epochs = cfg.tower.epochs;
            let (rep, best) = train_keep_best(&mut model, &ws.split, aug.as_deref(), epochs, &mut |m: &coldaug::twotower::EpochMetrics| {
                eprintln!("epoch {:>3} loss {:?} cold@50 {:?}", m.epoch, m.loss, m.cold_recall(50));
            })?;
            best.save(&cfg.out.join("model.ctt"))?;
            std::fs::write(cfg.out.join("curves.csv"), rep.curves_csv())?;
            write_json(&cfg.out.join("eval.json"), &rep.recall_at)?;
            println!("best epoch {} cold@50 {:?}", rep.best_epoch, rep.best_cold_recall());
        }
        Command::Eval { model } => {
            let m = TwoTowerModel::load(&model)?;
            let r = evaluate(&m, &ws.split.test, &DEFAULT_KS);
            println!("{}", serde_json::to_string_pretty(&r).expect("metrics serialize"));
        }
        Command::PolicyTrain => {
            let run = run_policy_training(&cfg, &ws)?;
            for l in &run.log {
                println!("iteration {:>3} mean_cr {:.5} T {:.4}", l.iteration, l.mean_cr, l.temperature);
            }
        }
        Command::Report => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
