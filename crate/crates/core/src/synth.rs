//! Synthetic impression logs with a known click / conversion model.
//!
//! Each row draws one value per field uniformly from that field's vocabulary.
//! The click logit is `click_bias + sum_f click_weights[f][value_f]`, the
//! conversion logit is built the same way from the conversion parameters.
//! Labels are `y_ctr ~ Bernoulli(p_ctr)` and `y_cvr = y_ctr * Bernoulli(p_cvr)`.
//!
//! Noise only adds spurious clicks: each clean non-click row flips to
//! `y_ctr = 1` with probability `noise_rate`. Conversions are never touched.

use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{hash_feature, Dataset, Sample, LABEL_CTR, LABEL_CVR};
use crate::error::{Error, Result};

const WEIGHT_STREAM: u64 = 1;
const ROW_STREAM: u64 = 2;
const CALIBRATION_STREAM: u64 = 3;
const CALIBRATION_DRAWS: usize = 50_000;

/// Fully specified generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub rows: usize,
    pub vocab: Vec<usize>,
    pub click_bias: f64,
    pub click_weights: Vec<Vec<f64>>,
    pub conv_bias: f64,
    pub conv_weights: Vec<Vec<f64>>,
    pub noise_rate: f64,
    pub seed: u64,
    /// Hash buckets per field for the in-memory datasets.
    pub hash_vocab: usize,
}

/// Knobs from which [`SynthSpec::calibrated`] draws weights and solves biases.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub rows: usize,
    pub num_fields: usize,
    pub vocab: usize,
    /// Mean clean click rate over impressions.
    pub target_ctr: f64,
    /// Mean conversion rate among clean clicks.
    pub target_cvr: f64,
    /// Std-dev of each per-value click weight.
    pub click_scale: f64,
    /// Std-dev of each per-value conversion weight.
    pub conv_scale: f64,
    /// Correlation between a value's click and conversion weights.
    pub conv_click_correlation: f64,
    pub noise_rate: f64,
    pub seed: u64,
    pub hash_vocab: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            rows: 200_000,
            num_fields: 6,
            vocab: 50,
            target_ctr: 0.04,
            target_cvr: 0.10,
            click_scale: 0.5,
            conv_scale: 0.5,
            conv_click_correlation: 0.5,
            noise_rate: 0.1,
            seed: 0,
            hash_vocab: 1009,
        }
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Root of an increasing function on `[lo, hi]` by bisection.
fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

impl SynthSpec {
    pub fn calibrated(p: &SynthParams) -> Result<SynthSpec> {
        let in_unit = |x: f64| x > 0.0 && x < 1.0;
        if p.num_fields == 0 || p.vocab == 0 || !in_unit(p.target_ctr) || !in_unit(p.target_cvr) {
            return Err(Error::Argument(
                "synthetic spec needs fields, vocab and target rates in (0, 1)".into(),
            ));
        }
        if !(-1.0..=1.0).contains(&p.conv_click_correlation) {
            return Err(Error::Argument(
                "conversion/click correlation must lie in [-1, 1]".into(),
            ));
        }
        let mut wr = rng(p.seed, WEIGHT_STREAM);
        let std = Normal::new(0.0, 1.0).expect("unit normal");
        let rho = p.conv_click_correlation;
        let mut click_weights = Vec::with_capacity(p.num_fields);
        let mut conv_weights = Vec::with_capacity(p.num_fields);
        for _ in 0..p.num_fields {
            let mut cw = Vec::with_capacity(p.vocab);
            let mut vw = Vec::with_capacity(p.vocab);
            for _ in 0..p.vocab {
                let a: f64 = std.sample(&mut wr);
                let b: f64 = std.sample(&mut wr);
                cw.push(p.click_scale * a);
                vw.push(p.conv_scale * (rho * a + (1.0 - rho * rho).sqrt() * b));
            }
            click_weights.push(cw);
            conv_weights.push(vw);
        }

        // Monte-Carlo draws of the feature-dependent logit parts.
        let mut cr = rng(p.seed, CALIBRATION_STREAM);
        let draws: Vec<(f64, f64)> = (0..CALIBRATION_DRAWS)
            .map(|_| {
                (0..p.num_fields).fold((0.0, 0.0), |(c, v), f| {
                    let k = cr.random_range(0..p.vocab);
                    (c + click_weights[f][k], v + conv_weights[f][k])
                })
            })
            .collect();
        let n = draws.len() as f64;
        let click_bias = bisect(-40.0, 40.0, |b| {
            draws.iter().map(|(c, _)| logistic(b + c)).sum::<f64>() / n - p.target_ctr
        });
        let clicks: f64 = draws.iter().map(|(c, _)| logistic(click_bias + c)).sum();
        let conv_bias = bisect(-40.0, 40.0, |b| {
            draws
                .iter()
                .map(|(c, v)| logistic(click_bias + c) * logistic(b + v))
                .sum::<f64>()
                / clicks
                - p.target_cvr
        });

        let spec = SynthSpec {
            rows: p.rows,
            vocab: vec![p.vocab; p.num_fields],
            click_bias,
            click_weights,
            conv_bias,
            conv_weights,
            noise_rate: p.noise_rate,
            seed: p.seed,
            hash_vocab: p.hash_vocab,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn num_fields(&self) -> usize {
        self.vocab.len()
    }

    pub fn field_names(&self) -> Vec<String> {
        (0..self.num_fields()).map(|f| format!("f{f}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::Argument(format!(
                "noise rate must lie in [0, 1), got {}",
                self.noise_rate
            )));
        }
        if self.vocab.is_empty() || self.vocab.contains(&0) || self.hash_vocab == 0 {
            return Err(Error::Argument(
                "synthetic spec needs non-empty vocabularies".into(),
            ));
        }
        let shapes_ok =
            self.click_weights.len() == self.vocab.len()
                && self.conv_weights.len() == self.vocab.len()
                && self.vocab.iter().enumerate().all(|(f, &v)| {
                    self.click_weights[f].len() == v && self.conv_weights[f].len() == v
                });
        if !shapes_ok {
            return Err(Error::Argument(
                "weight tables must match the per-field vocabularies".into(),
            ));
        }
        Ok(())
    }
}

/// Generated log: noisy and clean label copies aligned row for row.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub noisy: Dataset,
    pub clean: Dataset,
    /// Raw value id per row and field.
    pub values: Vec<Vec<usize>>,
    pub p_ctr: Vec<f64>,
    pub p_cvr: Vec<f64>,
    /// Rows whose click label was flipped by noise.
    pub flipped: Vec<bool>,
}

pub fn raw_token(value: usize) -> String {
    format!("v{value}")
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let names = spec.field_names();
    let hashed: Vec<Vec<usize>> = names
        .iter()
        .zip(&spec.vocab)
        .map(|(name, &v)| {
            (0..v)
                .map(|k| hash_feature(name, &raw_token(k), spec.hash_vocab))
                .collect()
        })
        .collect();

    let mut clean = Dataset::new(names.clone(), vec![spec.hash_vocab; names.len()]);
    let mut noisy = clean.clone();
    let mut out_values = Vec::with_capacity(spec.rows);
    let mut p_ctr = Vec::with_capacity(spec.rows);
    let mut p_cvr = Vec::with_capacity(spec.rows);
    let mut flipped = Vec::with_capacity(spec.rows);

    let mut r = rng(spec.seed, ROW_STREAM);
    for _ in 0..spec.rows {
        let values: Vec<usize> = spec.vocab.iter().map(|&v| r.random_range(0..v)).collect();
        let (mut zc, mut zv) = (spec.click_bias, spec.conv_bias);
        for (f, &k) in values.iter().enumerate() {
            zc += spec.click_weights[f][k];
            zv += spec.conv_weights[f][k];
        }
        let (pc, pv) = (logistic(zc), logistic(zv));
        // the three uniforms are always drawn so the clean labels do not depend on the noise rate
        let (u_click, u_conv, u_noise): (f64, f64, f64) = (r.random(), r.random(), r.random());
        let y_ctr = (u_click < pc) as u8;
        let y_cvr = y_ctr & (u_conv < pv) as u8;
        let flip = y_ctr == 0 && u_noise < spec.noise_rate;

        let feature_indices: Vec<usize> = values
            .iter()
            .enumerate()
            .map(|(f, &k)| hashed[f][k])
            .collect();
        clean.samples.push(Sample {
            feature_indices: feature_indices.clone(),
            y_ctr,
            y_cvr,
        });
        noisy.samples.push(Sample {
            feature_indices,
            y_ctr: y_ctr | flip as u8,
            y_cvr,
        });
        out_values.push(values);
        p_ctr.push(pc);
        p_cvr.push(pv);
        flipped.push(flip);
    }
    Ok(SynthOutput {
        noisy,
        clean,
        values: out_values,
        p_ctr,
        p_cvr,
        flipped,
    })
}

impl SynthOutput {
    /// Canonical TSV for rows `range` of the noisy (or clean) copy.
    pub fn write_tsv(&self, path: &Path, clean: bool, range: std::ops::Range<usize>) -> Result<()> {
        let data = if clean { &self.clean } else { &self.noisy };
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(
            w,
            "{}\t{LABEL_CTR}\t{LABEL_CVR}",
            data.field_names.join("\t")
        )
        .map_err(io)?;
        for i in range {
            for &k in &self.values[i] {
                write!(w, "{}\t", raw_token(k)).map_err(io)?;
            }
            let s = &data.samples[i];
            writeln!(w, "{}\t{}", s.y_ctr, s.y_cvr).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Sidecar with clean labels, true probabilities and the noise flag.
    pub fn write_sidecar(&self, path: &Path, range: std::ops::Range<usize>) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(w, "row\tclean_y_ctr\tclean_y_cvr\tp_ctr\tp_cvr\tflipped").map_err(io)?;
        for i in range {
            let s = &self.clean.samples[i];
            writeln!(
                w,
                "{i}\t{}\t{}\t{}\t{}\t{}",
                s.y_ctr, s.y_cvr, self.p_ctr[i], self.p_cvr[i], self.flipped[i] as u8
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(noise: f64, seed: u64) -> SynthSpec {
        SynthSpec::calibrated(&SynthParams {
            rows: 5_000,
            noise_rate: noise,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn no_noise_means_identical_copies() {
        let out = generate(&small(0.0, 3)).unwrap();
        assert_eq!(out.noisy, out.clean);
        assert!(out.flipped.iter().all(|f| !f));
    }

    #[test]
    fn noise_adds_clicks_only() {
        let out = generate(&small(0.3, 4)).unwrap();
        let conv = |d: &Dataset| d.samples.iter().filter(|s| s.y_cvr == 1).count();
        assert_eq!(conv(&out.noisy), conv(&out.clean));
        for ((n, c), &flip) in out
            .noisy
            .samples
            .iter()
            .zip(&out.clean.samples)
            .zip(&out.flipped)
        {
            assert!(c.y_cvr <= c.y_ctr && n.y_cvr <= n.y_ctr);
            assert_eq!(n.feature_indices, c.feature_indices);
            assert_eq!(n.y_ctr, c.y_ctr | flip as u8);
            if flip {
                assert_eq!((c.y_ctr, n.y_cvr), (0, 0));
            }
        }
    }

    #[test]
    fn clean_labels_ignore_the_noise_rate() {
        assert_eq!(
            generate(&small(0.0, 5)).unwrap().clean,
            generate(&small(0.5, 5)).unwrap().clean
        );
    }

    #[test]
    fn deterministic_under_seed() {
        assert_eq!(
            generate(&small(0.1, 6)).unwrap(),
            generate(&small(0.1, 6)).unwrap()
        );
        assert_ne!(
            generate(&small(0.1, 6)).unwrap().clean,
            generate(&small(0.1, 7)).unwrap().clean
        );
    }

    #[test]
    fn rejects_noise_rate_of_one() {
        let mut spec = small(0.0, 1);
        spec.noise_rate = 1.0;
        assert!(matches!(generate(&spec), Err(Error::Argument(_))));
    }
}
