//! Training loop, gradient verification and hyper-parameter grid search.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{batch_iter, Batch, Dataset};
use crate::error::{Error, Result};
use crate::loss::{combined_loss, CombinedLoss, LossConfig};
use crate::metrics::{auc, evaluate, predict_dataset, EvalReport};
use crate::models::{Arch, Model, ModelConfig};
use crate::nn::checkpoint::NamedTensor;
use crate::nn::{OptimizerState, Tape};
use crate::synth::{generate, SynthParams, SynthSpec};

/// Rows scored per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EarlyStop {
    /// Evaluations without a validation CTR AUC improvement before stopping.
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub seed: u64,
    /// Validate every this many epochs; the last epoch is always validated.
    pub eval_every: usize,
    pub early_stop: Option<EarlyStop>,
    pub shuffle: bool,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 2048,
            lr: 1e-3,
            weight_decay: 1e-6,
            loss: LossConfig::default(),
            model,
            seed: 0,
            eval_every: 1,
            early_stop: None,
            shuffle: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "epochs, batch_size and eval_every must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.early_stop.is_some_and(|e| e.patience == 0) {
            return Err(Error::Config("early-stop patience must be positive".into()));
        }
        self.loss.validate()?;
        self.model.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    /// Global batch index, counted from 0 over the whole run.
    pub batch: usize,
    pub bce: f64,
    pub pwiser: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Means over the epoch's batches.
    pub bce: f64,
    pub pwiser: f64,
    pub total: f64,
    /// Validation AUC percentages; `None` when not evaluated or undefined.
    pub valid_auc_ctr: Option<f64>,
    pub valid_auc_ctcvr: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

impl History {
    pub fn steps_tsv(&self) -> String {
        let mut s = String::from("epoch\tbatch\tbce\tpwiser\ttotal\n");
        for r in &self.steps {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}",
                r.epoch, r.batch, r.bce, r.pwiser, r.total
            );
        }
        s
    }

    pub fn epochs_tsv(&self) -> String {
        let mut s = String::from("epoch\tbce\tpwiser\ttotal\tvalid_auc_ctr\tvalid_auc_ctcvr\n");
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.epoch,
                r.bce,
                r.pwiser,
                r.total,
                opt(r.valid_auc_ctr),
                opt(r.valid_auc_ctcvr)
            );
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation CTR AUC, or the final ones
    /// when no validation set was given.
    pub model: Model,
    /// 1-based epoch of `model`.
    pub best_epoch: usize,
    pub history: History,
}

fn check_finite(loss: &CombinedLoss, batch: usize) -> Result<()> {
    let parts = [
        ("bce_ctr", Some(loss.bce_ctr)),
        ("bce_ctcvr", loss.bce_ctcvr),
        ("pwiser", Some(loss.pwiser)),
        ("total", Some(loss.value)),
    ];
    for (component, v) in parts {
        if v.is_some_and(|v| !v.is_finite()) {
            return Err(Error::NonFinite { component, batch });
        }
    }
    Ok(())
}

/// Forward pass and combined loss for one batch, without touching gradients.
pub fn batch_loss(model: &Model, batch: &Batch, loss_cfg: &LossConfig) -> Result<CombinedLoss> {
    let mut tape = Tape::new(model.params());
    let heads = model.forward_tape(&mut tape, &batch.fields)?;
    combined_loss(
        &heads.predictions(&tape),
        &batch.y_ctr,
        &batch.y_cvr,
        loss_cfg,
    )
}

/// Forward, loss, backward and accumulation into the parameter gradients.
/// Returns the loss; the caller applies the optimizer step.
pub fn accumulate_batch(
    model: &mut Model,
    batch: &Batch,
    loss_cfg: &LossConfig,
    index: usize,
) -> Result<CombinedLoss> {
    let (loss, grads) = {
        let mut tape = Tape::new(model.params());
        let heads = model.forward_tape(&mut tape, &batch.fields)?;
        let preds = heads.predictions(&tape);
        let outputs = [
            ("ctr_output", Some(&preds.p_ctr)),
            ("ctcvr_output", preds.p_ctcvr.as_ref()),
        ];
        for (component, p) in outputs {
            if p.is_some_and(|p| p.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite {
                    component,
                    batch: index,
                });
            }
        }
        let loss = combined_loss(&preds, &batch.y_ctr, &batch.y_cvr, loss_cfg)?;
        check_finite(&loss, index)?;
        let seeds = heads.seeds(&loss)?;
        (loss, tape.backward(&seeds)?)
    };
    model.params_mut().accumulate(&grads);
    Ok(loss)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(epoch as u64 + 1);
    r.random()
}

fn check_layout(cfg: &ModelConfig, data: &Dataset, what: &str) -> Result<()> {
    if data.vocab_sizes != cfg.field_vocab_sizes {
        return Err(Error::Config(format!(
            "{what} data has field vocabularies {:?}, model expects {:?}",
            data.vocab_sizes, cfg.field_vocab_sizes
        )));
    }
    Ok(())
}

pub fn train(
    train_data: &Dataset,
    valid_data: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_data.is_empty() || valid_data.is_some_and(Dataset::is_empty) {
        return Err(Error::Argument(
            "training and validation data must be non-empty".into(),
        ));
    }
    check_layout(&cfg.model, train_data, "training")?;
    if let Some(v) = valid_data {
        check_layout(&cfg.model, v, "validation")?;
    }

    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut optimizer = OptimizerState::adam(model.params(), cfg.lr, cfg.weight_decay);
    let mut history = History::default();
    let mut best: Option<(f64, usize, Vec<NamedTensor>)> = None;
    let mut since_best = 0;
    let mut batch_index = 0;

    for epoch in 1..=cfg.epochs {
        let (mut bce_sum, mut pw_sum, mut total_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for batch in batch_iter(
            train_data,
            cfg.batch_size,
            epoch_seed(cfg.seed, epoch),
            cfg.shuffle,
        )? {
            let loss = accumulate_batch(&mut model, &batch, &cfg.loss, batch_index)?;
            optimizer.step(model.params_mut())?;
            history.steps.push(StepRecord {
                epoch,
                batch: batch_index,
                bce: loss.bce(),
                pwiser: loss.pwiser,
                total: loss.value,
            });
            bce_sum += loss.bce();
            pw_sum += loss.pwiser;
            total_sum += loss.value;
            batches += 1;
            batch_index += 1;
        }

        let mut record = EpochRecord {
            epoch,
            bce: bce_sum / batches as f64,
            pwiser: pw_sum / batches as f64,
            total: total_sum / batches as f64,
            valid_auc_ctr: None,
            valid_auc_ctcvr: None,
        };
        let due = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
        let mut stop = false;
        if let (Some(valid), true) = (valid_data, due) {
            let report = evaluate(&model, valid, EVAL_CHUNK)?;
            record.valid_auc_ctr = report.auc_ctr();
            record.valid_auc_ctcvr = report.auc_ctcvr();
            // an undefined AUC never counts as an improvement
            let score = record.valid_auc_ctr.unwrap_or(f64::NEG_INFINITY);
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, epoch, model.to_tensors()));
                since_best = 0;
            } else {
                since_best += 1;
                stop = cfg.early_stop.is_some_and(|e| since_best >= e.patience);
            }
        }
        history.epochs.push(record);
        if stop {
            break;
        }
    }

    let (model, best_epoch) = match best {
        Some((_, epoch, tensors)) => (Model::from_tensors(&tensors)?, epoch),
        None => (model, history.epochs.len()),
    };
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
    })
}

/// Configuration small enough for exhaustive finite differences.
pub fn tiny_model_config(arch: Arch) -> ModelConfig {
    ModelConfig {
        arch,
        embed_dim: 4,
        num_experts: 2,
        num_shared_experts: 2,
        num_task_experts: 1,
        expert_widths: vec![4],
        tower_widths: vec![4],
        field_vocab_sizes: vec![8, 8],
    }
}

pub const GRADCHECK_MAX_PARAMS: usize = 5_000;
/// Step of the central difference `(f(x+h) - f(x-h)) / 2h`.
pub const GRADCHECK_STEP: f64 = 1e-6;
/// Denominator floor of the relative error, so that gradients that are zero
/// up to rounding do not dominate the report.
pub const GRADCHECK_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckCase {
    pub arch: Arch,
    pub lambda: f64,
    pub num_params: usize,
    pub max_rel_error: f64,
    /// Parameter tensor and flat offset of the worst entry.
    pub worst_param: String,
    pub worst_offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub cases: Vec<GradcheckCase>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.cases
            .iter()
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn to_tsv(&self) -> String {
        let mut s =
            String::from("arch\tlambda\tparams\tmax_rel_error\tworst_param\tworst_offset\n");
        for c in &self.cases {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:.3e}\t{}\t{}",
                c.arch, c.lambda, c.num_params, c.max_rel_error, c.worst_param, c.worst_offset
            );
        }
        s
    }
}

/// Batch covering all three label scenarios, with features drawn from `seed`.
pub fn gradcheck_batch(cfg: &ModelConfig, rows: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fields = cfg
        .field_vocab_sizes
        .iter()
        .map(|&v| (0..rows).map(|_| rng.random_range(0..v)).collect())
        .collect();
    // cycle cvr, ctNocvr, zeros, zeros
    let y_ctr = (0..rows).map(|i| (i % 4 < 2) as u8).collect();
    let y_cvr = (0..rows).map(|i| (i % 4 == 0) as u8).collect();
    Batch {
        rows: (0..rows).collect(),
        fields,
        y_ctr,
        y_cvr,
    }
}

/// Tiny model with every parameter (biases included) drawn from `U(-0.5, 0.5)`
/// so that no ReLU or gradient path is trivially inactive.
pub fn perturbed_model(cfg: ModelConfig, seed: u64) -> Result<Model> {
    let mut model = Model::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for id in model.params().ids() {
        model
            .params_mut()
            .get_mut(id)
            .value
            .mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    Ok(model)
}

/// Analytic gradients of the combined loss for every parameter tensor, in id order.
pub fn analytic_gradients(
    model: &Model,
    batch: &Batch,
    loss_cfg: &LossConfig,
) -> Result<Vec<Array2<f64>>> {
    let mut tape = Tape::new(model.params());
    let heads = model.forward_tape(&mut tape, &batch.fields)?;
    let loss = combined_loss(
        &heads.predictions(&tape),
        &batch.y_ctr,
        &batch.y_cvr,
        loss_cfg,
    )?;
    let seeds = heads.seeds(&loss)?;
    let grads = tape.backward(&seeds)?;
    Ok(model
        .params()
        .ids()
        .into_iter()
        .map(|id| {
            grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(model.params().get(id).value.raw_dim()))
        })
        .collect())
}

pub fn gradcheck_case(arch: Arch, lambda: f64, seed: u64) -> Result<GradcheckCase> {
    let cfg = tiny_model_config(arch);
    let mut model = perturbed_model(cfg.clone(), seed)?;
    let num_params = model.params().num_scalars();
    if num_params > GRADCHECK_MAX_PARAMS {
        return Err(Error::Config(format!(
            "gradient check model has {num_params} parameters"
        )));
    }
    let batch = gradcheck_batch(&cfg, 24, seed);
    let loss_cfg = LossConfig {
        lambda,
        ..LossConfig::default()
    };
    let analytic = analytic_gradients(&model, &batch, &loss_cfg)?;

    let mut worst = (0.0, String::new(), 0);
    for (k, id) in model.params().ids().into_iter().enumerate() {
        let (rows, cols) = model.params().get(id).value.dim();
        for offset in 0..rows * cols {
            let at = [offset / cols, offset % cols];
            let mut probe = |delta: f64| -> Result<f64> {
                let saved = model.params().get(id).value[at];
                model.params_mut().get_mut(id).value[at] = saved + delta;
                let loss = batch_loss(&model, &batch, &loss_cfg).map(|l| l.value);
                model.params_mut().get_mut(id).value[at] = saved;
                loss
            };
            let numeric =
                (probe(GRADCHECK_STEP)? - probe(-GRADCHECK_STEP)?) / (2.0 * GRADCHECK_STEP);
            let a = analytic[k][at];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            if rel > worst.0 || worst.1.is_empty() {
                worst = (rel, model.params().get(id).name.clone(), offset);
            }
        }
    }
    Ok(GradcheckCase {
        arch,
        lambda,
        num_params,
        max_rel_error: worst.0,
        worst_param: worst.1,
        worst_offset: worst.2,
    })
}

/// Every architecture with and without the pairwise term.
pub fn gradcheck(seed: u64) -> Result<GradcheckReport> {
    let mut cases = Vec::new();
    for arch in Arch::ALL {
        for lambda in [0.0, 0.1] {
            cases.push(gradcheck_case(arch, lambda, seed)?);
        }
    }
    Ok(GradcheckReport { cases })
}

#[derive(Debug, Clone)]
pub struct GridCell {
    pub lambda: f64,
    pub m1: f64,
    pub m2: f64,
    /// Validation report, or the error that ended the cell.
    pub result: std::result::Result<EvalReport, String>,
}

impl GridCell {
    pub fn auc_ctr(&self) -> Option<f64> {
        self.result.as_ref().ok().and_then(EvalReport::auc_ctr)
    }
}

/// One training run per `(lambda, m1, m2)` cell, ranked by validation CTR AUC.
/// Failed cells are kept and sorted last.
pub fn grid_search(
    train_data: &Dataset,
    valid_data: &Dataset,
    base: &TrainConfig,
    lambdas: &[f64],
    m1s: &[f64],
    m2s: &[f64],
) -> Vec<GridCell> {
    let mut cells = Vec::new();
    for &lambda in lambdas {
        for &m1 in m1s {
            for &m2 in m2s {
                let mut cfg = base.clone();
                cfg.loss.lambda = lambda;
                cfg.loss.m1 = m1;
                cfg.loss.m2 = m2;
                let result = train(train_data, Some(valid_data), &cfg)
                    .and_then(|out| evaluate(&out.model, valid_data, EVAL_CHUNK))
                    .map_err(|e| e.to_string());
                cells.push(GridCell {
                    lambda,
                    m1,
                    m2,
                    result,
                });
            }
        }
    }
    // stable sort keeps grid order among equal scores
    cells.sort_by(|a, b| {
        let key = |c: &GridCell| c.auc_ctr().unwrap_or(f64::NEG_INFINITY);
        key(b).total_cmp(&key(a))
    });
    cells
}

pub fn grid_tsv(cells: &[GridCell]) -> String {
    let mut s = String::from("rank\tlambda\tm1\tm2\tvalid_auc_ctr\tvalid_auc_ctcvr\terror\n");
    for (i, c) in cells.iter().enumerate() {
        let (ctr, ctcvr, err) = match &c.result {
            Ok(r) => (r.auc_ctr(), r.auc_ctcvr(), String::new()),
            Err(e) => (None, None, e.clone()),
        };
        let pct = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.3}"));
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            i + 1,
            c.lambda,
            c.m1,
            c.m2,
            pct(ctr),
            pct(ctcvr),
            err
        );
    }
    s
}

/// Paired comparison of BCE-only and pairwise training under click noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTrial {
    pub seed: u64,
    /// CTR AUC (percent) of the true click probabilities on the clean test rows.
    pub bayes_auc: f64,
    /// Clean-label test CTR AUC (percent) with `lambda = 0`.
    pub auc_bce: f64,
    /// Clean-label test CTR AUC (percent) with the configured `lambda`.
    pub auc_pwiser: f64,
}

impl NoiseTrial {
    pub fn pwiser_wins(&self) -> bool {
        self.auc_pwiser > self.auc_bce
    }
}

/// Generate a noisy log from `params` (with `seed`), split it 80/10/10 into
/// noisy training, noisy validation and clean test rows, and train `base`
/// twice: once with `lambda = 0` and once as configured. Both runs share the
/// seed, hence initialisation and batch order.
pub fn noise_trial(params: &SynthParams, base: &TrainConfig, seed: u64) -> Result<NoiseTrial> {
    let spec = SynthSpec::calibrated(&SynthParams {
        seed,
        ..params.clone()
    })?;
    let out = generate(&spec)?;
    let n = out.noisy.len();
    let (train_end, valid_end) = (n * 8 / 10, n * 9 / 10);
    let train_data = out.noisy.slice(0..train_end);
    let valid_data = out.noisy.slice(train_end..valid_end);
    let test_data = out.clean.slice(valid_end..n);
    let test_labels = test_data.y_ctr();
    let bayes_auc = 100.0 * auc(&out.p_ctr[valid_end..], &test_labels)?;

    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.model.field_vocab_sizes = train_data.vocab_sizes.clone();
    let mut run = |lambda: f64| -> Result<f64> {
        cfg.loss.lambda = lambda;
        let outcome = train(&train_data, Some(&valid_data), &cfg)?;
        let preds = predict_dataset(&outcome.model, &test_data, EVAL_CHUNK)?;
        Ok(100.0 * auc(&preds.p_ctr, &test_labels)?)
    };
    let lambda = base.loss.lambda;
    let auc_bce = run(0.0)?;
    let auc_pwiser = run(lambda)?;
    Ok(NoiseTrial {
        seed,
        bayes_auc,
        auc_bce,
        auc_pwiser,
    })
}
