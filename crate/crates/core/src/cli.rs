//! Run configuration files, run directories and the command implementations
//! behind the `pwiser` binary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::adapter::{scan_counts, LabelCounts, Layout};
use crate::data::{load_tsv, stats, Dataset, DatasetStats, LabelPolicy};
use crate::error::{Error, Result};
use crate::loss::bench::{bench_loss, bench_tsv, BenchRow};
use crate::loss::{Kernel, LossConfig, MarginRule, PwiserTarget};
use crate::metrics::{evaluate, EvalReport};
use crate::models::{Arch, Model, ModelConfig};
use crate::synth::{generate, SynthParams, SynthSpec};
use crate::trainer::{self, EarlyStop, GradcheckReport, GridCell, TrainConfig, EVAL_CHUNK};

/// Training sets up to this many rows default to 10 epochs, larger ones to 1.
pub const SMALL_DATA_ROWS: usize = 1_000_000;

pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

pub const KEYS: &[KeySpec] = &[
    KeySpec {
        key: "model.arch",
        default: "mmoe",
        help: "shared_bottom | mmoe | ple | dnn",
    },
    KeySpec {
        key: "model.embed_dim",
        default: "128",
        help: "embedding width per field",
    },
    KeySpec {
        key: "model.num_experts",
        default: "8",
        help: "MMoE experts",
    },
    KeySpec {
        key: "model.num_shared_experts",
        default: "4",
        help: "PLE shared experts",
    },
    KeySpec {
        key: "model.num_task_experts",
        default: "2",
        help: "PLE experts per task",
    },
    KeySpec {
        key: "model.expert_widths",
        default: "128",
        help: "comma-separated expert / bottom hidden widths",
    },
    KeySpec {
        key: "model.tower_widths",
        default: "256,128",
        help: "comma-separated tower (dnn: MLP) hidden widths",
    },
    KeySpec {
        key: "loss.lambda",
        default: "0.1",
        help: "weight of the pairwise term",
    },
    KeySpec {
        key: "loss.m1",
        default: "0.3",
        help: "margin against clicked, unconverted samples",
    },
    KeySpec {
        key: "loss.m2",
        default: "0.3",
        help: "margin against unclicked samples",
    },
    KeySpec {
        key: "loss.pwiser_target",
        default: "ctr",
        help: "ctr | ctcvr | both",
    },
    KeySpec {
        key: "loss.kernel",
        default: "fast",
        help: "fast | naive",
    },
    KeySpec {
        key: "loss.margin_rule",
        default: "hinge",
        help: "hinge | literal",
    },
    KeySpec {
        key: "train.batch_size",
        default: "2048",
        help: "samples per optimizer step",
    },
    KeySpec {
        key: "train.lr",
        default: "0.001",
        help: "Adam learning rate",
    },
    KeySpec {
        key: "train.weight_decay",
        default: "0.000001",
        help: "L2 coefficient on weights and embeddings",
    },
    KeySpec {
        key: "train.epochs",
        default: "auto",
        help: "positive integer, or auto (10 up to 1M rows, else 1)",
    },
    KeySpec {
        key: "train.seed",
        default: "0",
        help: "initialisation and shuffling seed",
    },
    KeySpec {
        key: "train.early_stop_patience",
        default: "0",
        help: "epochs without validation gain; 0 disables",
    },
    KeySpec {
        key: "data.train_path",
        default: "",
        help: "canonical TSV with training rows (required)",
    },
    KeySpec {
        key: "data.valid_path",
        default: "",
        help: "canonical TSV with validation rows",
    },
    KeySpec {
        key: "data.schema",
        default: "",
        help: "comma-separated feature columns; empty uses all",
    },
    KeySpec {
        key: "data.policy",
        default: "coerce",
        help: "conversion without click: coerce | reject",
    },
    KeySpec {
        key: "data.vocab_size",
        default: "100003",
        help: "hash buckets per field",
    },
];

/// Help text listing every configuration key with its default.
pub fn keys_help() -> String {
    let mut s = String::from("configuration keys (key=value, default in brackets):\n");
    for k in KEYS {
        let _ = writeln!(s, "  {:<28} [{}] {}", k.key, k.default, k.help);
    }
    s
}

/// Effective run configuration: every known key with a value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS
                .iter()
                .map(|k| (k.key, k.default.to_string()))
                .collect(),
        }
    }
}

fn key_err(key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key}: {msg}"))
}

fn parse_list(key: &str, raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|e| key_err(key, format!("'{t}': {e}")))
        })
        .collect()
}

impl RunConfig {
    /// Parse `key=value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got '{line}'", n + 1))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let spec = KEYS
            .iter()
            .find(|k| k.key == key)
            .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
        self.values.insert(spec.key, value.to_string());
        Ok(())
    }

    /// Apply `key=value` overrides given on the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key).parse().map_err(|e| key_err(key, e))
    }

    /// `key = value` lines in key-table order.
    pub fn render(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{} = {}\n", k.key, self.get(k.key)))
            .collect()
    }

    pub fn train_path(&self) -> Result<PathBuf> {
        match self.get("data.train_path") {
            "" => Err(key_err("data.train_path", "required")),
            p => Ok(PathBuf::from(p)),
        }
    }

    pub fn valid_path(&self) -> Option<PathBuf> {
        Some(self.get("data.valid_path"))
            .filter(|p| !p.is_empty())
            .map(PathBuf::from)
    }

    pub fn schema(&self) -> Vec<String> {
        self.get("data.schema")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect()
    }

    pub fn policy(&self) -> Result<LabelPolicy> {
        self.parsed("data.policy")
    }

    pub fn vocab_size(&self) -> Result<usize> {
        self.parsed("data.vocab_size")
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        let cfg = LossConfig {
            lambda: self.parsed("loss.lambda")?,
            m1: self.parsed("loss.m1")?,
            m2: self.parsed("loss.m2")?,
            pwiser_target: self.parsed::<PwiserTarget>("loss.pwiser_target")?,
            kernel: self.parsed::<Kernel>("loss.kernel")?,
            margin_rule: self.parsed::<MarginRule>("loss.margin_rule")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full training configuration for data with `field_vocab_sizes` and
    /// `train_rows` training samples.
    pub fn train_config(
        &self,
        field_vocab_sizes: Vec<usize>,
        train_rows: usize,
    ) -> Result<TrainConfig> {
        let arch: Arch = self.parsed("model.arch")?;
        let mut model = ModelConfig::new(arch, field_vocab_sizes);
        model.embed_dim = self.parsed("model.embed_dim")?;
        model.num_experts = self.parsed("model.num_experts")?;
        model.num_shared_experts = self.parsed("model.num_shared_experts")?;
        model.num_task_experts = self.parsed("model.num_task_experts")?;
        model.expert_widths = parse_list("model.expert_widths", self.get("model.expert_widths"))?;
        model.tower_widths = parse_list("model.tower_widths", self.get("model.tower_widths"))?;

        let mut cfg = TrainConfig::new(model);
        cfg.loss = self.loss_config()?;
        cfg.batch_size = self.parsed("train.batch_size")?;
        cfg.lr = self.parsed("train.lr")?;
        cfg.weight_decay = self.parsed("train.weight_decay")?;
        cfg.seed = self.parsed("train.seed")?;
        cfg.epochs = match self.get("train.epochs") {
            "auto" if train_rows <= SMALL_DATA_ROWS => 10,
            "auto" => 1,
            _ => self.parsed("train.epochs")?,
        };
        let patience: usize = self.parsed("train.early_stop_patience")?;
        cfg.early_stop = (patience > 0).then_some(EarlyStop { patience });
        cfg.validate()?;
        Ok(cfg)
    }

    /// Validate every key before any data is read, so that a bad value is
    /// reported as a config error rather than masked by a missing file.
    pub fn check(&self) -> Result<()> {
        self.train_config(vec![self.vocab_size()?], 1).map(|_| ())
    }
}

/// Create `explicit`, or a fresh timestamped directory under `root`.
pub fn create_run_dir(root: &Path, command: &str, explicit: Option<&Path>) -> Result<PathBuf> {
    let dir = match explicit {
        Some(d) => d.to_path_buf(),
        None => {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S%.3f");
            let base = root.join(format!("{stamp}-{command}"));
            let mut dir = base.clone();
            let mut k = 1;
            while dir.exists() {
                dir = PathBuf::from(format!("{}-{k}", base.display()));
                k += 1;
            }
            dir
        }
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Write `MANIFEST` listing every other file in `dir` with its SHA-256.
pub fn write_manifest(dir: &Path) -> Result<()> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_ok_and(|t| t.is_file()))
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != "MANIFEST")
        .collect();
    names.sort();
    let mut out = String::new();
    for name in names {
        let _ = writeln!(out, "{}  {name}", sha256_file(&dir.join(&name))?);
    }
    write_file(&dir.join("MANIFEST"), out)
}

#[derive(Debug, Clone)]
pub struct SynthGenArgs {
    pub rows: usize,
    pub fields: usize,
    pub vocab: usize,
    pub noise_rate: f64,
    pub seed: u64,
    /// Share of rows written to the validation files.
    pub valid_fraction: f64,
}

impl Default for SynthGenArgs {
    fn default() -> Self {
        let p = SynthParams::default();
        SynthGenArgs {
            rows: p.rows,
            fields: p.num_fields,
            vocab: p.vocab,
            noise_rate: p.noise_rate,
            seed: p.seed,
            valid_fraction: 0.1,
        }
    }
}

/// Generated files: noisy and clean copies of the training and validation
/// split, plus sidecars with the clean labels and true probabilities.
pub fn cmd_synth_gen(args: &SynthGenArgs, out_dir: &Path) -> Result<(DatasetStats, DatasetStats)> {
    if !(0.0..1.0).contains(&args.valid_fraction) {
        return Err(Error::Argument("valid fraction must lie in [0, 1)".into()));
    }
    let spec = SynthSpec::calibrated(&SynthParams {
        rows: args.rows,
        num_fields: args.fields,
        vocab: args.vocab,
        noise_rate: args.noise_rate,
        seed: args.seed,
        ..SynthParams::default()
    })?;
    let out = generate(&spec)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let n_valid = (args.rows as f64 * args.valid_fraction).round() as usize;
    let split = args.rows - n_valid;
    for (name, range) in [("train", 0..split), ("valid", split..args.rows)] {
        out.write_tsv(&out_dir.join(format!("{name}.tsv")), false, range.clone())?;
        out.write_tsv(
            &out_dir.join(format!("{name}_clean.tsv")),
            true,
            range.clone(),
        )?;
        out.write_sidecar(&out_dir.join(format!("{name}_truth.tsv")), range)?;
    }
    write_manifest(out_dir)?;
    Ok((stats(&out.noisy), stats(&out.clean)))
}

pub fn load_data(
    path: &Path,
    schema: &[String],
    policy: LabelPolicy,
    vocab: usize,
) -> Result<Dataset> {
    let outcome = load_tsv(path, schema, policy, vocab)?;
    if outcome.violations > 0 {
        eprintln!(
            "{}: {} rows converted without a click ({policy})",
            path.display(),
            outcome.violations
        );
    }
    if outcome.dataset.is_empty() {
        return Err(Error::Argument(format!(
            "{} has no usable rows",
            path.display()
        )));
    }
    Ok(outcome.dataset)
}

fn write_report(dir: &Path, stem: &str, report: &EvalReport) -> Result<()> {
    write_file(&dir.join(format!("{stem}.txt")), report.to_kv())?;
    let (header, row) = report.to_row();
    write_file(
        &dir.join(format!("{stem}.tsv")),
        format!("{header}\n{row}\n"),
    )
}

pub struct TrainSummary {
    pub config: TrainConfig,
    pub best_epoch: usize,
    pub report: EvalReport,
}

/// Train, then write the effective config, history, best checkpoint and a
/// final report (on validation data when given, else training data).
pub fn cmd_train(cfg: &RunConfig, run_dir: &Path) -> Result<TrainSummary> {
    cfg.check()?;
    let vocab = cfg.vocab_size()?;
    let (schema, policy) = (cfg.schema(), cfg.policy()?);
    let train_data = load_data(&cfg.train_path()?, &schema, policy, vocab)?;
    let valid_data = cfg
        .valid_path()
        .map(|p| load_data(&p, &schema, policy, vocab))
        .transpose()?;
    let tc = cfg.train_config(train_data.vocab_sizes.clone(), train_data.len())?;

    write_file(&run_dir.join("config.txt"), cfg.render())?;
    let outcome = trainer::train(&train_data, valid_data.as_ref(), &tc)?;
    write_file(
        &run_dir.join("history_steps.tsv"),
        outcome.history.steps_tsv(),
    )?;
    write_file(
        &run_dir.join("history_epochs.tsv"),
        outcome.history.epochs_tsv(),
    )?;
    outcome.model.save(&run_dir.join("model.ckpt"))?;
    let report = evaluate(
        &outcome.model,
        valid_data.as_ref().unwrap_or(&train_data),
        EVAL_CHUNK,
    )?;
    write_report(run_dir, "report", &report)?;
    write_manifest(run_dir)?;
    Ok(TrainSummary {
        config: tc,
        best_epoch: outcome.best_epoch,
        report,
    })
}

/// Score `data` with a saved model. The data must have the model's field count.
pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    schema: &[String],
    policy: LabelPolicy,
    run_dir: &Path,
) -> Result<EvalReport> {
    let model = Model::load(checkpoint)?;
    let vocabs = &model.config().field_vocab_sizes;
    let vocab = vocabs[0];
    if vocabs.iter().any(|&v| v != vocab) {
        return Err(Error::Checkpoint(
            "per-field vocabularies differ; cannot hash the data uniformly".into(),
        ));
    }
    let dataset = load_data(data, schema, policy, vocab)?;
    if dataset.num_fields() != model.config().num_fields() {
        return Err(Error::Config(format!(
            "checkpoint expects {} feature fields, {} has {}",
            model.config().num_fields(),
            data.display(),
            dataset.num_fields()
        )));
    }
    let report = evaluate(&model, &dataset, EVAL_CHUNK)?;
    write_report(run_dir, "report", &report)?;
    write_manifest(run_dir)?;
    Ok(report)
}

pub fn cmd_gradcheck(seed: u64, run_dir: &Path) -> Result<GradcheckReport> {
    let report = trainer::gradcheck(seed)?;
    write_file(&run_dir.join("gradcheck.tsv"), report.to_tsv())?;
    write_manifest(run_dir)?;
    Ok(report)
}

pub fn cmd_bench_loss(
    sizes: &[usize],
    reps: usize,
    naive_cap: usize,
    seed: u64,
    run_dir: &Path,
) -> Result<Vec<BenchRow>> {
    let rows = bench_loss(sizes, reps, naive_cap, seed)?;
    write_file(&run_dir.join("bench_loss.tsv"), bench_tsv(&rows))?;
    write_manifest(run_dir)?;
    Ok(rows)
}

/// Grid over `lambda x m1 x m2`; an empty axis uses the configured value.
pub fn cmd_gridsearch(
    cfg: &RunConfig,
    lambdas: &[f64],
    m1s: &[f64],
    m2s: &[f64],
    run_dir: &Path,
) -> Result<Vec<GridCell>> {
    cfg.check()?;
    let vocab = cfg.vocab_size()?;
    let (schema, policy) = (cfg.schema(), cfg.policy()?);
    let train_data = load_data(&cfg.train_path()?, &schema, policy, vocab)?;
    let valid_path = cfg
        .valid_path()
        .ok_or_else(|| key_err("data.valid_path", "required for grid search"))?;
    let valid_data = load_data(&valid_path, &schema, policy, vocab)?;
    let base = cfg.train_config(train_data.vocab_sizes.clone(), train_data.len())?;
    let or_base = |axis: &[f64], v: f64| {
        if axis.is_empty() {
            vec![v]
        } else {
            axis.to_vec()
        }
    };

    write_file(&run_dir.join("config.txt"), cfg.render())?;
    let cells = trainer::grid_search(
        &train_data,
        &valid_data,
        &base,
        &or_base(lambdas, base.loss.lambda),
        &or_base(m1s, base.loss.m1),
        &or_base(m2s, base.loss.m2),
    );
    write_file(&run_dir.join("grid.tsv"), trainer::grid_tsv(&cells))?;
    write_manifest(run_dir)?;
    Ok(cells)
}

/// Label counts of raw files under an adapter layout.
pub fn cmd_stats(preset: &str, files: &[PathBuf]) -> Result<LabelCounts> {
    if files.is_empty() {
        return Err(Error::Argument("no input files".into()));
    }
    scan_counts(files, &Layout::preset(preset)?)
}
