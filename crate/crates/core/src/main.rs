use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pwiser::cli::{self, RunConfig, SynthGenArgs};
use pwiser::data::LabelPolicy;
use pwiser::{Error, Result};

#[derive(Parser)]
#[command(name = "pwiser", version, about = "Train and evaluate click / conversion models", after_help = cli::keys_help())]
struct Cli {
    /// Parent of the per-run output directories.
    #[arg(long, global = true, default_value = "runs")]
    runs_root: PathBuf,
    /// Exact output directory instead of a timestamped one.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic impression log with spurious clicks.
    SynthGen {
        #[arg(long, default_value_t = 200_000)]
        rows: usize,
        #[arg(long, default_value_t = 6)]
        fields: usize,
        #[arg(long, default_value_t = 50)]
        vocab: usize,
        #[arg(long, default_value_t = 0.1)]
        noise_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        valid_fraction: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model from a key=value config file plus overrides.
    #[command(after_help = cli::keys_help())]
    Train {
        /// Config file; defaults apply to every missing key.
        #[arg(long)]
        config: Option<PathBuf>,
        /// key=value overrides applied after the file.
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a canonical TSV file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated feature columns; all non-label columns when empty.
        #[arg(long, default_value = "")]
        schema: String,
        #[arg(long, default_value = "coerce")]
        policy: LabelPolicy,
    },
    /// Compare analytic and finite-difference gradients on tiny models.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time the naive and sorted pairwise kernels.
    BenchLoss {
        /// Size of each scenario group.
        #[arg(long, value_delimiter = ',', default_values_t = [1024, 4096, 16384, 32768])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        /// Largest group size timed with the naive kernel.
        #[arg(long, default_value_t = 16384)]
        naive_cap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model per (lambda, m1, m2) cell, ranked by validation CTR AUC.
    #[command(after_help = cli::keys_help())]
    Gridsearch {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        lambda: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        m1: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        m2: Vec<f64>,
        overrides: Vec<String>,
    },
    /// Impression / click / conversion counts of raw files.
    Stats {
        /// tsv | aliexpress | aliccp
        #[arg(long, default_value = "tsv")]
        preset: String,
        files: Vec<PathBuf>,
    },
}

fn run_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    print!("effective configuration:\n{}", cfg.render());
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let run_dir = |name: &str| cli::create_run_dir(&cli.runs_root, name, cli.run_dir.as_deref());
    match &cli.command {
        Command::SynthGen {
            rows,
            fields,
            vocab,
            noise_rate,
            seed,
            valid_fraction,
            out_dir,
        } => {
            let args = SynthGenArgs {
                rows: *rows,
                fields: *fields,
                vocab: *vocab,
                noise_rate: *noise_rate,
                seed: *seed,
                valid_fraction: *valid_fraction,
            };
            let (noisy, clean) = cli::cmd_synth_gen(&args, out_dir)?;
            println!("wrote {}", out_dir.display());
            println!("noisy labels:\n{noisy}\nclean labels:\n{clean}");
        }
        Command::Train { config, overrides } => {
            let cfg = run_config(config.as_deref(), overrides)?;
            let dir = run_dir("train")?;
            let summary = cli::cmd_train(&cfg, &dir)?;
            println!(
                "epochs = {}\nbest_epoch = {}",
                summary.config.epochs, summary.best_epoch
            );
            print!("{}", summary.report.to_kv());
            println!("artifacts in {}", dir.display());
        }
        Command::Eval {
            checkpoint,
            data,
            schema,
            policy,
        } => {
            let schema: Vec<String> = schema
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect();
            let dir = run_dir("eval")?;
            let report = cli::cmd_eval(checkpoint, data, &schema, *policy, &dir)?;
            print!("{}", report.to_kv());
            let undefined = std::iter::once(&report.auc_ctr)
                .chain(&report.auc_ctcvr)
                .find_map(|r| r.as_ref().err());
            if let Some(msg) = undefined {
                return Err(Error::UndefinedMetric(
                    msg.trim_start_matches("metric undefined: ").to_string(),
                ));
            }
        }
        Command::Gradcheck { seed } => {
            let report = cli::cmd_gradcheck(*seed, &run_dir("gradcheck")?)?;
            print!("{}", report.to_tsv());
            println!("max_rel_error = {:.3e}", report.max_rel_error());
        }
        Command::BenchLoss {
            sizes,
            reps,
            naive_cap,
            seed,
        } => {
            let rows =
                cli::cmd_bench_loss(sizes, *reps, *naive_cap, *seed, &run_dir("bench-loss")?)?;
            print!("{}", pwiser::loss::bench::bench_tsv(&rows));
        }
        Command::Gridsearch {
            config,
            lambda,
            m1,
            m2,
            overrides,
        } => {
            let cfg = run_config(config.as_deref(), overrides)?;
            let cells = cli::cmd_gridsearch(&cfg, lambda, m1, m2, &run_dir("gridsearch")?)?;
            print!("{}", pwiser::trainer::grid_tsv(&cells));
            if let Some(best) = cells.first().filter(|c| c.result.is_ok()) {
                println!("best: lambda={} m1={} m2={}", best.lambda, best.m1, best.m2);
            }
        }
        Command::Stats { preset, files } => {
            let counts = cli::cmd_stats(preset, files)?;
            println!("{}", counts.stats());
            println!("violations={}", counts.violations);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
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
