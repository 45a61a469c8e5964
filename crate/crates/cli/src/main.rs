//! Command-line front end: `gen-data`, `train`, `eval`, `export`, `ablate`.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime or numerical error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drop_reid::retrieval::Mode;
use drop_reid::synthetic::{Dataset, Split, MANIFEST_FILE};
use drop_reid::train::ablation::{ablation_table, run_ablation, Axis, Components};
use drop_reid::train::export::EmbeddingIndex;
use drop_reid::train::report::{cmc_svg, ranking_strips, run_evaluation};
use drop_reid::train::trainer::embed_samples;
use drop_reid::train::{Checkpoint, RunConfig, Trainer};
use drop_reid::{DropError, Result};

#[derive(Parser)]
#[command(name = "drop-reid", version, about = "Train and evaluate part-aware occluded re-identification on synthetic pedestrians")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set optim.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let cfg = base.with_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset to a directory.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints, metrics.jsonl and a final report.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the query/gallery splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
        /// Comma-separated modes, e.g. `G,F+P`; defaults to the checkpoint's list.
        #[arg(long)]
        modes: Option<String>,
        /// Skip ranking strip images.
        #[arg(long)]
        no_strips: bool,
    },
    /// Write an embedding index for one or all splits.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
        /// `query`, `gallery`, `train` or `all`.
        #[arg(long, default_value = "all")]
        split: String,
    },
    /// Train one model per component setting and compare them.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
        /// Comma-separated subset of decouple,ppf,pct,ss for a full on/off
        /// grid; without it the six-row component study runs.
        #[arg(long)]
        axes: Option<String>,
    },
}

fn dataset_for(cfg: &RunConfig, data: Option<&Path>) -> Result<Dataset> {
    match data {
        Some(dir) if dir.join(MANIFEST_FILE).exists() => {
            let d = Dataset::load(dir)?;
            if d.config != cfg.data {
                log::warn!("dataset at {} was generated with a different data config", dir.display());
            }
            Ok(d)
        }
        Some(dir) => Err(DropError::Config(format!("no dataset manifest in {}", dir.display()))),
        None => Dataset::generate(&cfg.data),
    }
}

fn parse_modes(s: &str) -> Result<Vec<Mode>> {
    s.split(',').map(|m| m.trim().parse()).collect()
}

fn write_report(out: &Path, report: &drop_reid::train::EvalReport, title: &str) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("report.txt"), report.to_text())?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(report)?)?;
    fs::write(out.join("cmc.svg"), cmc_svg(&report.rows, title))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = config.load()?;
            let d = Dataset::generate(&cfg.data)?;
            d.save(&out)?;
            println!("wrote {} samples to {}", d.samples.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let (mut trainer, dataset) = match resume {
                Some(p) => {
                    let ckpt = Checkpoint::load(&p)?;
                    let dataset = dataset_for(&ckpt.config, data.as_deref())?;
                    (Trainer::from_checkpoint(&ckpt, &dataset)?, dataset)
                }
                None => {
                    let cfg = config.load()?;
                    let dataset = dataset_for(&cfg, data.as_deref())?;
                    (Trainer::new(&cfg, &dataset)?, dataset)
                }
            };
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.toml"), trainer.config().to_toml()?)?;
            let fit = trainer.fit(&dataset, Some(&out), |r| {
                println!(
                    "epoch {:>3} lr {:.2e} total {:.4} reid {:.4} triplet {:.4} parsing {:.4} acc {:.1}% ({:.0}s)",
                    r.stats.epoch,
                    r.stats.lr,
                    r.stats.total,
                    r.stats.reid,
                    r.stats.triplet,
                    r.stats.parsing,
                    100.0 * r.stats.pixel_accuracy,
                    r.stats.seconds
                );
                if let Some(e) = &r.eval {
                    for row in &e.rows {
                        println!("    {:<6} R-1 {:.1} mAP {:.1}", row.mode.to_string(), 100.0 * row.rank1, 100.0 * row.map);
                    }
                }
            })?;
            write_report(&out, &fit.final_report, "CMC")?;
            print!("{}", fit.final_report.to_text());
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            modes,
            no_strips,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mut cfg = ckpt.config.clone();
            if let Some(m) = modes {
                cfg.eval.modes = parse_modes(&m)?;
            }
            let dataset = dataset_for(&cfg, data.as_deref())?;
            let trainer = Trainer::from_checkpoint(&ckpt, &dataset)?;
            let eval = run_evaluation(trainer.model(), &dataset, &cfg.eval, ckpt.epoch)?;
            write_report(&out, &eval.report, &format!("CMC after {} epochs", ckpt.epoch))?;
            if !no_strips && cfg.eval.strips > 0 {
                let mode = if cfg.eval.modes.contains(&cfg.eval.select_mode) {
                    cfg.eval.select_mode
                } else {
                    cfg.eval.modes[0]
                };
                let dir = out.join("strips");
                fs::create_dir_all(&dir)?;
                for (i, img) in ranking_strips(&dataset, &eval, mode, cfg.eval.strips, cfg.eval.strip_top_k)?
                    .iter()
                    .enumerate()
                {
                    img.save(dir.join(format!("query_{i:02}.png")))?;
                }
            }
            print!("{}", eval.report.to_text());
        }
        Command::Export {
            checkpoint,
            data,
            out,
            split,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let dataset = dataset_for(&ckpt.config, data.as_deref())?;
            let trainer = Trainer::from_checkpoint(&ckpt, &dataset)?;
            let samples: Vec<_> = match split.as_str() {
                "all" => dataset.samples.iter().collect(),
                s => dataset.split(Split::parse(s).map_err(|e| DropError::Config(e.to_string()))?),
            };
            let (records, _) = embed_samples(trainer.model(), &samples, 32)?;
            let mut index = EmbeddingIndex::new(ckpt.config.model.reid.embedding_dim, ckpt.config.data.num_parts);
            index.extend(records)?;
            if let Some(dir) = out.parent() {
                if !dir.as_os_str().is_empty() {
                    fs::create_dir_all(dir)?;
                }
            }
            index.save(&out)?;
            println!("wrote {} rows (C={}, K={}) to {}", index.len(), index.dim, index.num_parts, out.display());
        }
        Command::Ablate {
            config,
            data,
            out,
            axes,
        } => {
            let cfg = config.load()?;
            let rows = match axes {
                Some(a) => {
                    let axes: Vec<Axis> = a.split(',').map(str::parse).collect::<Result<_>>()?;
                    Components::grid(&axes)
                }
                None => Components::table(),
            };
            for c in &rows {
                c.apply(&cfg).validate()?;
            }
            let dataset = dataset_for(&cfg, data.as_deref())?;
            fs::create_dir_all(&out)?;
            let log_path = out.join("ablation.jsonl");
            let _ = fs::remove_file(&log_path);
            let results = run_ablation(&cfg, &rows, &dataset, |r| {
                println!(
                    "{}: R-1 {:.1} mAP {:.1} ({:.0}s)",
                    r.components,
                    100.0 * r.rank1,
                    100.0 * r.map,
                    r.seconds
                );
                if let Ok(line) = serde_json::to_string(r) {
                    let _ = fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(&log_path)
                        .and_then(|mut f| std::io::Write::write_all(&mut f, format!("{line}\n").as_bytes()));
                }
            })?;
            let table = ablation_table(&results);
            fs::write(out.join("ablation.txt"), &table)?;
            fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&results)?)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
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
