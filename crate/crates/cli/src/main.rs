use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use elecrec::checkpoint;
use elecrec::config::{TrainConfig, VariantMode};
use elecrec::data::{self, FilterConfig, SplitDataset, Which, MIN_INTERACTIONS};
use elecrec::harness::{parse_grid, run_sweep, sweep_csv, SweepParam};
use elecrec::metrics::evaluate_split;
use elecrec::train::{history_csv, train_loop_with};

#[derive(Parser)]
#[command(name = "elecrec", version, about = "Train and evaluate discriminator-based sequential recommenders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter, remap and split a raw `user item item ...` file.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = MIN_INTERACTIONS)]
        min_interactions: usize,
        /// Apply the user and item thresholds once instead of to a fixed point.
        #[arg(long)]
        single_pass: bool,
    },
    /// Train one model; writes `checkpoint.elec` and `history.csv` to the output directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        variant: Option<VariantMode>,
    },
    /// Evaluate a checkpoint and append the result to a CSV file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Which,
        /// Prepared split directory or raw file; defaults to the checkpoint's `data`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to `eval.csv` next to the checkpoint.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train one model per grid value of alpha or lambda.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        param: String,
        #[arg(long, default_value = "0.0:1.0:0.1")]
        grid: String,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Write a synthetic Markov-chain corpus.
    Synth {
        #[arg(long, default_value_t = 1000)]
        users: usize,
        #[arg(long, default_value_t = 200)]
        items: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// `key=value` run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides any configuration key, e.g. `--set lr=0.002`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

/// Bad flags, configuration or paths.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl RunArgs {
    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut bad = Vec::new();
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
                TrainConfig::parse(&text).unwrap_or_else(|e| {
                    bad.push(format!("{}: {e}", path.display()));
                    TrainConfig::default()
                })
            }
            None => TrainConfig::default(),
        };
        for kv in &self.overrides {
            match kv.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = cfg.set(k.trim(), v) {
                        bad.push(e);
                    }
                }
                None => bad.push(format!("--set {kv}: expected key=value")),
            }
        }
        if !bad.is_empty() {
            // report range problems of the keys that did parse as well
            if let Err(e) = cfg.validate() {
                bad.push(e.to_string());
            }
            bail!(usage(bad.join("; ")));
        }
        if let Some(d) = &self.data {
            cfg.data = Some(d.clone());
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

fn check_config(cfg: &TrainConfig) -> anyhow::Result<()> {
    cfg.validate().map_err(|e| usage(e.to_string()))
}

/// A directory is read as prepared split files; a file is filtered and split
/// in memory.
fn load_split(path: Option<&Path>) -> anyhow::Result<SplitDataset> {
    let path = path.ok_or_else(|| usage("no data path: set `data=` in the config or pass --data"))?;
    if !path.exists() {
        bail!(usage(format!("data path {} does not exist", path.display())));
    }
    if path.is_dir() {
        Ok(SplitDataset::read_dir(path)?)
    } else {
        let ds = data::load_dataset(path, FilterConfig::default())?;
        Ok(data::leave_one_out_split(&ds.sequences)?)
    }
}

fn cmd_train(run: &RunArgs, variant: Option<VariantMode>) -> anyhow::Result<()> {
    let mut cfg = run.resolve()?;
    if let Some(v) = variant {
        cfg = cfg.build_variant(v);
    }
    check_config(&cfg)?;
    let split = load_split(cfg.data.as_deref())?;
    eprintln!(
        "training {} on {} users, {} items",
        cfg.variant_mode(),
        split.users.len(),
        split.num_items
    );
    let outcome = train_loop_with(&split, &cfg, |row| {
        eprintln!(
            "epoch {:>3}  loss_nip {:.4}  loss_disc {:.4}  valid HR@5 {:.4}  NDCG@10 {:.4}",
            row.epoch,
            row.loss_nip,
            row.loss_disc,
            row.report.hr(5),
            row.report.ndcg(10)
        );
    })?;
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let ckpt = cfg.out.join("checkpoint.elec");
    checkpoint::save(&outcome.model, outcome.best_epoch, &ckpt)?;
    fs::write(cfg.out.join("history.csv"), history_csv(&outcome.history))?;
    let test = evaluate_split(&outcome.model, &split, Which::Test)?;
    println!("best epoch: {}", outcome.best_epoch);
    print!("{}", outcome.best);
    print!("{test}");
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn cmd_eval(path: &Path, which: Which, data: Option<&Path>, csv: Option<&Path>) -> anyhow::Result<()> {
    let ckpt = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let data = data.map(Path::to_path_buf).or_else(|| ckpt.model.config.data.clone());
    let split = load_split(data.as_deref())?;
    if split.num_items != ckpt.model.num_items {
        bail!(usage(format!(
            "checkpoint has {} items but the data has {}",
            ckpt.model.num_items, split.num_items
        )));
    }
    let report = evaluate_split(&ckpt.model, &split, which)?;
    print!("{report}");
    let csv = csv
        .map(Path::to_path_buf)
        .unwrap_or_else(|| path.with_file_name("eval.csv"));
    let fresh = !csv.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(&csv)?;
    if fresh {
        writeln!(f, "epoch,split,hr5,hr10,ndcg5,ndcg10")?;
    }
    writeln!(f, "{},{}", ckpt.best_epoch, report.csv_fields())?;
    Ok(())
}

fn cmd_sweep(run: &RunArgs, param: &str, grid: &str, parallel: usize) -> anyhow::Result<()> {
    let cfg = run.resolve()?;
    check_config(&cfg)?;
    let param = SweepParam::parse(param).map_err(|e| usage(e.to_string()))?;
    let grid = parse_grid(grid).map_err(|e| usage(e.to_string()))?;
    let split = load_split(cfg.data.as_deref())?;
    eprintln!("sweeping {} over {} values", param.as_str(), grid.len());
    let rows = run_sweep(&split, &cfg, param, &grid, parallel)?;
    let text = sweep_csv(param, &rows);
    fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join(format!("sweep_{}.csv", param.as_str()));
    fs::write(&path, &text)?;
    print!("{text}");
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Prepare {
            input,
            out,
            min_interactions,
            single_pass,
        } => {
            let filter = FilterConfig {
                min_interactions,
                iterative: !single_pass,
            };
            let split = data::prepare(&input, &out, filter)?;
            println!(
                "{} users, {} items -> {}",
                split.users.len(),
                split.num_items,
                out.display()
            );
            Ok(())
        }
        Command::Train { run, variant } => cmd_train(&run, variant),
        Command::Eval {
            checkpoint,
            split,
            data,
            csv,
        } => cmd_eval(&checkpoint, split, data.as_deref(), csv.as_deref()),
        Command::Sweep {
            run,
            param,
            grid,
            parallel,
        } => cmd_sweep(&run, &param, &grid, parallel),
        Command::Synth {
            users,
            items,
            noise,
            seed,
            out,
        } => {
            let corpus = data::synth_generate(users, items, seed, noise).map_err(|e| usage(e.to_string()))?;
            data::write_dataset(&out, &corpus.sequences)?;
            println!("{} users, {} items -> {}", users, items, out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e.downcast_ref::<UsageError>().is_some()
                || matches!(
                    e.downcast_ref::<elecrec::Error>(),
                    Some(elecrec::Error::Config(_) | elecrec::Error::UnknownVariant(_))
                );
            if config_error {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
