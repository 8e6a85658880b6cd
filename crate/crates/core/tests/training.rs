use pwiser::data::{stats, Dataset};
use pwiser::loss::{bce, CombinedLoss, LossConfig};
use pwiser::metrics::{evaluate, logloss};
use pwiser::models::{Arch, Model, ModelConfig};
use pwiser::nn::OptimizerState;
use pwiser::nn::Tape;
use pwiser::synth::{generate, SynthParams, SynthSpec};
use pwiser::trainer::{self, train, TrainConfig, EVAL_CHUNK};
use pwiser::Error;

fn flat_spec(rows: usize, ctr: f64, noise: f64, seed: u64) -> SynthSpec {
    let vocab = vec![4, 3];
    SynthSpec {
        rows,
        click_weights: vocab.iter().map(|&v| vec![0.0; v]).collect(),
        conv_weights: vocab.iter().map(|&v| vec![0.0; v]).collect(),
        vocab,
        click_bias: (ctr / (1.0 - ctr)).ln(),
        conv_bias: 0.0,
        noise_rate: noise,
        seed,
        hash_vocab: 31,
    }
}

#[test]
fn zero_weight_generator_hits_the_bias_rate() {
    let rows = 200_000;
    let p = 0.02;
    let out = generate(&flat_spec(rows, p, 0.0, 1)).unwrap();
    let clicks = stats(&out.clean).clicks as f64;
    let sigma = (rows as f64 * p * (1.0 - p)).sqrt();
    assert!(
        (clicks - rows as f64 * p).abs() < 3.0 * sigma,
        "{clicks} clicks"
    );
    // conversion logit 0: half the clicks convert
    let conv = stats(&out.clean).conversions as f64;
    let sigma_c = (clicks * 0.25).sqrt();
    assert!((conv - clicks / 2.0).abs() < 3.0 * sigma_c);
}

#[test]
fn noise_flips_the_expected_share_of_non_clicks() {
    let rows = 200_000;
    let (p, rho) = (0.05, 0.1);
    let out = generate(&flat_spec(rows, p, rho, 2)).unwrap();
    let flipped = out.flipped.iter().filter(|&&f| f).count() as f64;
    let expect = rows as f64 * rho * (1.0 - p);
    let sigma = (rows as f64 * rho * (1.0 - p) * (1.0 - rho * (1.0 - p))).sqrt();
    assert!(
        (flipped - expect).abs() < 3.0 * sigma,
        "{flipped} vs {expect}"
    );
    for ((noisy, clean), flip) in out
        .noisy
        .samples
        .iter()
        .zip(&out.clean.samples)
        .zip(&out.flipped)
    {
        assert_eq!(noisy.y_cvr, clean.y_cvr);
        assert_eq!(noisy.feature_indices, clean.feature_indices);
        assert_eq!(noisy.y_ctr, clean.y_ctr | *flip as u8);
        assert!(!*flip || clean.y_ctr == 0);
    }
}

#[test]
fn clean_labels_do_not_depend_on_noise() {
    let a = generate(&flat_spec(5_000, 0.1, 0.0, 3)).unwrap();
    let b = generate(&flat_spec(5_000, 0.1, 0.4, 3)).unwrap();
    assert_eq!(a.clean, b.clean);
    assert_eq!(a.noisy, a.clean);
    assert_ne!(b.noisy, b.clean);
}

#[test]
fn calibration_reaches_target_rates() {
    let params = SynthParams {
        rows: 100_000,
        ..SynthParams::default()
    };
    let out = generate(&SynthSpec::calibrated(&params).unwrap()).unwrap();
    let s = stats(&out.clean);
    let ctr = s.ctr_ratio.unwrap();
    let cvr = s.cvr_ratio.unwrap();
    assert!((ctr - params.target_ctr).abs() < 0.004, "ctr {ctr}");
    assert!((cvr - params.target_cvr).abs() < 0.02, "cvr {cvr}");
}

#[test]
fn invalid_noise_rate_is_rejected() {
    assert!(generate(&flat_spec(10, 0.1, 1.0, 0)).is_err());
    assert!(generate(&flat_spec(10, 0.1, -0.1, 0)).is_err());
}

fn tiny_data(seed: u64) -> (Dataset, Dataset) {
    let params = SynthParams {
        rows: 3_000,
        num_fields: 3,
        vocab: 12,
        target_ctr: 0.25,
        target_cvr: 0.3,
        noise_rate: 0.0,
        seed,
        hash_vocab: 53,
        ..SynthParams::default()
    };
    let out = generate(&SynthSpec::calibrated(&params).unwrap()).unwrap();
    (out.clean.slice(0..2_400), out.clean.slice(2_400..3_000))
}

fn small_cfg(arch: Arch, data: &Dataset) -> TrainConfig {
    let mut model = ModelConfig::new(arch, data.vocab_sizes.clone());
    model.embed_dim = 4;
    model.num_experts = 3;
    model.num_shared_experts = 2;
    model.num_task_experts = 1;
    model.expert_widths = vec![8];
    model.tower_widths = vec![6];
    TrainConfig {
        epochs: 3,
        batch_size: 256,
        lr: 5e-3,
        ..TrainConfig::new(model)
    }
}

#[test]
fn lambda_zero_matches_a_plain_bce_loop() {
    let (train_set, _) = tiny_data(5);
    let mut cfg = small_cfg(Arch::Mmoe, &train_set);
    cfg.loss.lambda = 0.0;
    cfg.shuffle = false;
    let trained = train(&train_set, None, &cfg).unwrap();

    let mut model = Model::new(cfg.model.clone(), cfg.seed).unwrap();
    let mut opt = OptimizerState::adam(model.params(), cfg.lr, cfg.weight_decay);
    let rows: Vec<usize> = (0..train_set.len()).collect();
    for _ in 0..cfg.epochs {
        for chunk in rows.chunks(cfg.batch_size) {
            let batch = train_set.batch(chunk);
            let grads = {
                let mut tape = Tape::new(model.params());
                let heads = model.forward_tape(&mut tape, &batch.fields).unwrap();
                let preds = heads.predictions(&tape);
                let y_ctcvr: Vec<u8> = batch
                    .y_ctr
                    .iter()
                    .zip(&batch.y_cvr)
                    .map(|(c, v)| c & v)
                    .collect();
                let ctr = bce(&preds.p_ctr, &batch.y_ctr).unwrap();
                let ctcvr = bce(preds.p_ctcvr.as_ref().unwrap(), &y_ctcvr).unwrap();
                let loss = CombinedLoss {
                    value: ctr.value + ctcvr.value,
                    bce_ctr: ctr.value,
                    bce_ctcvr: Some(ctcvr.value),
                    pwiser: 0.0,
                    grad_ctr: ctr.grad,
                    grad_ctcvr: Some(ctcvr.grad),
                };
                let seeds = heads.seeds(&loss).unwrap();
                tape.backward(&seeds).unwrap()
            };
            model.params_mut().accumulate(&grads);
            opt.step(model.params_mut()).unwrap();
        }
    }
    assert_eq!(model.to_tensors(), trained.model.to_tensors());
}

#[test]
fn history_has_one_record_per_epoch_and_non_negative_pairwise_term() {
    let (train_set, valid) = tiny_data(6);
    let cfg = small_cfg(Arch::Ple, &train_set);
    let out = train(&train_set, Some(&valid), &cfg).unwrap();
    assert_eq!(out.history.epochs.len(), cfg.epochs);
    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    assert_eq!(out.history.steps.len(), cfg.epochs * per_epoch);
    for s in &out.history.steps {
        assert!(s.pwiser >= 0.0);
        assert!((s.total - (s.bce + cfg.loss.lambda * s.pwiser)).abs() < 1e-12);
    }
    assert!(out.history.epochs.iter().all(|e| e.valid_auc_ctr.is_some()));
    assert_eq!(out.history.epochs_tsv().lines().count(), cfg.epochs + 1);
    // best model is the epoch with the highest validation CTR AUC
    let best = out
        .history
        .epochs
        .iter()
        .max_by(|a, b| a.valid_auc_ctr.partial_cmp(&b.valid_auc_ctr).unwrap())
        .unwrap();
    let report = evaluate(&out.model, &valid, EVAL_CHUNK).unwrap();
    assert_eq!(report.auc_ctr(), best.valid_auc_ctr);
}

#[test]
fn training_is_deterministic() {
    let (train_set, valid) = tiny_data(7);
    let cfg = small_cfg(Arch::SharedBottom, &train_set);
    let a = train(&train_set, Some(&valid), &cfg).unwrap();
    let b = train(&train_set, Some(&valid), &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.to_tensors(), b.model.to_tensors());
}

#[test]
fn training_lowers_the_loss() {
    let (train_set, valid) = tiny_data(8);
    let mut cfg = small_cfg(Arch::Dnn, &train_set);
    cfg.epochs = 5;
    let untrained = Model::new(cfg.model.clone(), cfg.seed).unwrap();
    let out = train(&train_set, Some(&valid), &cfg).unwrap();
    let before = pwiser::metrics::predict_dataset(&untrained, &valid, EVAL_CHUNK).unwrap();
    let after = pwiser::metrics::predict_dataset(&out.model, &valid, EVAL_CHUNK).unwrap();
    let y = valid.y_ctr();
    assert!(logloss(&after.p_ctr, &y).unwrap() < logloss(&before.p_ctr, &y).unwrap());
}

#[test]
fn checkpoint_reproduces_the_report() {
    let (train_set, valid) = tiny_data(9);
    let cfg = small_cfg(Arch::Mmoe, &train_set);
    let out = train(&train_set, Some(&valid), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    out.model.save(&path).unwrap();
    let loaded = Model::load(&path).unwrap();
    assert_eq!(
        evaluate(&loaded, &valid, EVAL_CHUNK).unwrap(),
        evaluate(&out.model, &valid, EVAL_CHUNK).unwrap()
    );
}

#[test]
fn exploding_learning_rate_reports_non_finite() {
    let (train_set, _) = tiny_data(10);
    let mut cfg = small_cfg(Arch::Mmoe, &train_set);
    cfg.lr = 1e300;
    let err = train(&train_set, None, &cfg).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn mismatched_vocabulary_layout_is_a_config_error() {
    let (train_set, _) = tiny_data(11);
    let mut cfg = small_cfg(Arch::Dnn, &train_set);
    cfg.model.field_vocab_sizes = vec![7; train_set.num_fields()];
    assert_eq!(train(&train_set, None, &cfg).unwrap_err().exit_code(), 2);
}

#[test]
fn single_task_model_rejects_ctcvr_pairwise_target() {
    let (train_set, _) = tiny_data(12);
    let mut cfg = small_cfg(Arch::Dnn, &train_set);
    cfg.loss = LossConfig {
        pwiser_target: pwiser::loss::PwiserTarget::Ctcvr,
        ..LossConfig::default()
    };
    assert_eq!(train(&train_set, None, &cfg).unwrap_err().exit_code(), 2);
}

#[test]
fn gradient_check_passes_for_every_architecture() {
    let report = trainer::gradcheck(0).unwrap();
    assert_eq!(report.cases.len(), 8);
    assert!(report.max_rel_error() < 1e-5, "{}", report.to_tsv());
}

#[test]
fn one_cell_grid_equals_plain_training() {
    let (train_set, valid) = tiny_data(13);
    let cfg = small_cfg(Arch::Mmoe, &train_set);
    let grid = trainer::grid_search(&train_set, &valid, &cfg, &[0.1], &[0.3], &[0.3]);
    assert_eq!(grid.len(), 1);
    let direct = train(&train_set, Some(&valid), &cfg).unwrap();
    let report = evaluate(&direct.model, &valid, EVAL_CHUNK).unwrap();
    assert_eq!(grid[0].result.as_ref().unwrap(), &report);
}

#[test]
fn grid_covers_every_cell_best_first() {
    let (train_set, valid) = tiny_data(14);
    let mut cfg = small_cfg(Arch::SharedBottom, &train_set);
    cfg.epochs = 1;
    let lambdas = [0.0, 0.1];
    let margins = [0.1, 0.3];
    let grid = trainer::grid_search(&train_set, &valid, &cfg, &lambdas, &margins, &[0.3]);
    assert_eq!(grid.len(), 4);
    assert!(grid
        .iter()
        .any(|c| (c.lambda, c.m1, c.m2) == (0.1, 0.3, 0.3)));
    let aucs: Vec<f64> = grid.iter().map(|c| c.auc_ctr().unwrap()).collect();
    assert!(aucs.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(trainer::grid_tsv(&grid).lines().count(), 5);
}
