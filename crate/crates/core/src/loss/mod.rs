//! Loss kernels for joint click / conversion training.
//!
//! Every kernel returns the loss value together with the derivative of the
//! value with respect to each input score, so callers can chain the result
//! into the model tape without re-deriving anything.

mod bce;
pub mod bench;
mod combined;
mod pairwise;

pub use bce::{bce, BCE_EPS};
pub use combined::{combined_loss, CombinedLoss};
pub use pairwise::{pwiser, pwiser_fast, pwiser_fast_with, pwiser_naive, pwiser_naive_with};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which prediction head the pairwise ranking term is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PwiserTarget {
    Ctr,
    Ctcvr,
    Both,
}

/// Evaluation strategy for the pairwise term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    /// Literal double loop over every outer/conversion pair.
    Naive,
    /// Sorted prefix sums, `O(n log n)`.
    Fast,
}

/// Activation rule deciding whether an (outer, conversion) pair is penalised.
///
/// Both rules charge `(outer - conv + m)^2` on an active pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginRule {
    /// Active when `conv < outer + m`: the squared hinge `max(0, outer - conv + m)^2`,
    /// continuous and continuously differentiable.
    Hinge,
    /// Active when `conv < outer - m`, exactly as the indicator is written in the
    /// original formulation. The penalty jumps from 0 to `(2m)^2` at the boundary.
    Literal,
}

macro_rules! impl_enum_text {
    ($ty:ty, $what:literal, { $($variant:path => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = match self { $($variant => $text),+ };
                f.write_str(s)
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($text => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", $what, " '{}'"),
                        other
                    ))),
                }
            }
        }
    };
}

impl_enum_text!(PwiserTarget, "pwiser target", {
    PwiserTarget::Ctr => "ctr",
    PwiserTarget::Ctcvr => "ctcvr",
    PwiserTarget::Both => "both",
});

impl_enum_text!(Kernel, "loss kernel", {
    Kernel::Naive => "naive",
    Kernel::Fast => "fast",
});

impl_enum_text!(MarginRule, "margin rule", {
    MarginRule::Hinge => "hinge",
    MarginRule::Literal => "literal",
});

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the pairwise term relative to BCE.
    pub lambda: f64,
    /// Margin between click-without-conversion and conversion scores.
    pub m1: f64,
    /// Margin between non-click and conversion scores.
    pub m2: f64,
    pub pwiser_target: PwiserTarget,
    pub kernel: Kernel,
    pub margin_rule: MarginRule,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.1,
            m1: 0.3,
            m2: 0.3,
            pwiser_target: PwiserTarget::Ctr,
            kernel: Kernel::Fast,
            margin_rule: MarginRule::Hinge,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        check_margin("m1", self.m1).map_err(|e| Error::Config(e.to_string()))?;
        check_margin("m2", self.m2).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

pub(crate) fn check_margin(name: &str, m: f64) -> Result<()> {
    if (0.0..1.0).contains(&m) {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "margin {name} must lie in [0, 1), got {m}"
        )))
    }
}

/// A loss value and its derivative with respect to every input score.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Scores of one batch split into the three label scenarios.
///
/// * `ct_nocvr`: clicked without conversion (`y_ctr = 1, y_cvr = 0`)
/// * `cvr`: converted (`y_cvr = 1`)
/// * `zeros`: not clicked (`y_ctr = 0`)
///
/// Each group keeps the positions of its members in the originating batch so
/// gradients can be scattered back in batch order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioPartition {
    pub scores_ct_nocvr: Vec<f64>,
    pub scores_cvr: Vec<f64>,
    pub scores_zeros: Vec<f64>,
    pub idx_ct_nocvr: Vec<usize>,
    pub idx_cvr: Vec<usize>,
    pub idx_zeros: Vec<usize>,
    batch_len: usize,
}

impl ScenarioPartition {
    /// Partition `scores` by the label pair of each sample.
    pub fn from_labels(scores: &[f64], y_ctr: &[u8], y_cvr: &[u8]) -> Result<Self> {
        if scores.len() != y_ctr.len() || scores.len() != y_cvr.len() {
            return Err(Error::Argument(format!(
                "partition needs aligned inputs: {} scores, {} click labels, {} conversion labels",
                scores.len(),
                y_ctr.len(),
                y_cvr.len()
            )));
        }
        let mut part = ScenarioPartition {
            scores_ct_nocvr: Vec::new(),
            scores_cvr: Vec::new(),
            scores_zeros: Vec::new(),
            idx_ct_nocvr: Vec::new(),
            idx_cvr: Vec::new(),
            idx_zeros: Vec::new(),
            batch_len: scores.len(),
        };
        for (i, ((&s, &c), &v)) in scores.iter().zip(y_ctr).zip(y_cvr).enumerate() {
            if c > 1 || v > 1 {
                return Err(Error::Argument(format!("non-binary label at position {i}")));
            }
            if v == 1 {
                part.scores_cvr.push(s);
                part.idx_cvr.push(i);
            } else if c == 1 {
                part.scores_ct_nocvr.push(s);
                part.idx_ct_nocvr.push(i);
            } else {
                part.scores_zeros.push(s);
                part.idx_zeros.push(i);
            }
        }
        Ok(part)
    }

    /// Build a partition directly from group scores. The implied batch order is
    /// `ct_nocvr`, then `cvr`, then `zeros`.
    pub fn from_groups(ct_nocvr: Vec<f64>, cvr: Vec<f64>, zeros: Vec<f64>) -> Self {
        let a = ct_nocvr.len();
        let c = cvr.len();
        let z = zeros.len();
        ScenarioPartition {
            idx_ct_nocvr: (0..a).collect(),
            idx_cvr: (a..a + c).collect(),
            idx_zeros: (a + c..a + c + z).collect(),
            scores_ct_nocvr: ct_nocvr,
            scores_cvr: cvr,
            scores_zeros: zeros,
            batch_len: a + c + z,
        }
    }

    pub fn batch_len(&self) -> usize {
        self.batch_len
    }

    /// Group sizes `(ct_nocvr, cvr, zeros)`.
    pub fn sizes(&self) -> (usize, usize, usize) {
        (
            self.scores_ct_nocvr.len(),
            self.scores_cvr.len(),
            self.scores_zeros.len(),
        )
    }

    fn validate_scores(&self) -> Result<()> {
        let all = self
            .scores_ct_nocvr
            .iter()
            .chain(&self.scores_cvr)
            .chain(&self.scores_zeros);
        for &s in all {
            if !(s > 0.0 && s < 1.0) {
                return Err(Error::Argument(format!("score {s} outside (0, 1)")));
            }
        }
        Ok(())
    }
}
