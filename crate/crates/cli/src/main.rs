use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use egoground::app::report::{EvalReport, EVAL_SCHEMA};
use egoground::app::trainer::{prepare_all, SPLITS};
use egoground::app::{load_splits, run_ablate, synth, Checkpoint, Phase, RunConfig, Trainer};
use egoground::dataio::{container, read_dataset, EpisodeRecord};
use egoground::infer_eval::{prediction_records, to_jsonl};
use egoground::model::prepare;
use egoground::Error;

/// Moment localization over synthetic clip, query and object features.
///
/// Log verbosity follows RUST_LOG (default `info`).
#[derive(Parser)]
#[command(name = "egoground", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the pretrain, train and val splits into a dataset directory.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override a config key, e.g. `--set data.snr=0.5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train one phase and write a checkpoint plus a report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        phase: Option<String>,
        #[arg(long)]
        seed: u64,
        /// Checkpoint to resume (same phase) or to start fine-tuning from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Stop after this many epochs even if the schedule is longer.
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a dataset and dump its predictions.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// A split directory, or a `synth` output whose `val` split is used.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Prediction dump; defaults to the report path with `.predictions.jsonl`.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Predict moments for one episode of the checkpoint's dataset.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        episode: String,
        #[arg(long)]
        out: PathBuf,
        /// Look the episode up here instead of the checkpoint's dataset.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the structure and shot-mode ablation matrix.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 2 for configuration problems, 3 for everything data-related.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_config() => 2,
        _ => 3,
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Synth { config, out, overrides } => {
            let cfg = RunConfig::load(&config, &overrides)?;
            let manifests = synth(&cfg, &out)?;
            for (name, m) in SPLITS.iter().zip(&manifests) {
                log::info!("{name}: {} episodes", m.episodes.len());
            }
            println!("wrote dataset to {}", out.display());
        }
        Command::Train { config, phase, seed, init, out, stop_after, mut overrides } => {
            overrides.push(format!("seed={seed}"));
            if let Some(p) = phase {
                let p: Phase = p.parse()?;
                overrides.push(format!("phase=\"{}\"", if p == Phase::Pretrain { "pretrain" } else { "finetune" }));
            }
            let cfg = RunConfig::load(&config, &overrides)?;
            let init = init.map(|p| Checkpoint::load(&p)).transpose()?;
            let splits = load_splits(&cfg)?;
            let train = prepare_all(splits.training(cfg.phase), &cfg)?;
            let val = prepare_all(&splits.val, &cfg)?;
            let mut trainer = Trainer::new(cfg.clone(), init.as_ref())?;
            let report = trainer.run(&train, &val, stop_after)?;
            trainer.checkpoint().save(&out.join("checkpoint"))?;
            container::write_json(&out.join("train_report.json"), &report)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml_string()).with_context(|| format!("writing {}", out.display()))?;
            println!("{}", serde_json::to_string(&report.final_metrics)?);
        }
        Command::Eval { config, ckpt, data, out, predictions, overrides } => {
            let cfg = RunConfig::load(&config, &overrides)?;
            let ck = Checkpoint::load(&ckpt)?;
            let mut run = ck.clone();
            run.config.infer = cfg.infer.clone();
            let trainer = Trainer::from_checkpoint(&run)?;
            let records = read_eval_split(&data)?;
            let prepared = prepare_all(&records, &run.config)?;
            let evaluation = trainer.evaluate(&prepared)?;
            let report = EvalReport {
                schema: EVAL_SCHEMA.into(),
                config_hash: ck.config_hash(),
                checkpoint_epoch: ck.epoch,
                dataset: data.display().to_string(),
                metrics: evaluation.metrics,
            };
            container::write_json(&out, &report)?;
            let dump: Vec<_> = prepared
                .iter()
                .zip(&evaluation.predictions)
                .flat_map(|(p, m)| prediction_records(&p.episode_id, m, p.seconds_per_clip))
                .collect();
            let dump_path = predictions.unwrap_or_else(|| out.with_extension("predictions.jsonl"));
            std::fs::write(&dump_path, to_jsonl(&dump)).with_context(|| format!("writing {}", dump_path.display()))?;
            println!("{}", serde_json::to_string(&report.metrics)?);
        }
        Command::Infer { ckpt, episode, out, data } => {
            let ck = Checkpoint::load(&ckpt)?;
            let mut cfg = ck.config.clone();
            if let Some(dir) = data {
                cfg.dataset.dir = Some(dir);
            }
            let record = find_episode(&cfg, &episode)?;
            let trainer = Trainer::from_checkpoint(&ck)?;
            let prep = prepare(&record, &ck.config.prepare_config())?;
            let moments = trainer.predict(&prep);
            let lines = to_jsonl(&prediction_records(&record.episode_id, &moments, prep.seconds_per_clip));
            std::fs::write(&out, lines).with_context(|| format!("writing {}", out.display()))?;
            println!("{} moments for {episode}", moments.len());
        }
        Command::Ablate { config, out, seed, mut overrides } => {
            if let Some(s) = seed {
                overrides.push(format!("seed={s}"));
            }
            let cfg = RunConfig::load(&config, &overrides)?;
            let splits = load_splits(&cfg)?;
            let report = run_ablate(&cfg, &splits)?;
            container::write_json(&out.join("ablation_report.json"), &report)?;
            std::fs::write(out.join("ablation_table.txt"), report.table()).with_context(|| format!("writing {}", out.display()))?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

fn read_eval_split(dir: &Path) -> anyhow::Result<Vec<EpisodeRecord>> {
    if dir.join("manifest.json").exists() {
        Ok(read_dataset(dir)?)
    } else if dir.join("val").join("manifest.json").exists() {
        Ok(read_dataset(&dir.join("val"))?)
    } else {
        Err(Error::Data(format!("no dataset manifest in {} or its `val` split", dir.display())).into())
    }
}

fn find_episode(cfg: &RunConfig, id: &str) -> anyhow::Result<EpisodeRecord> {
    let splits = load_splits(cfg)?;
    SPLITS
        .iter()
        .flat_map(|s| splits.get(s).unwrap_or_default())
        .find(|r| r.episode_id == id)
        .cloned()
        .ok_or_else(|| anyhow!(Error::Data(format!("episode `{id}` not found"))))
}
