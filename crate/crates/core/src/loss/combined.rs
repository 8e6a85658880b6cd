use super::{bce, pairwise::pwiser, LossConfig, PwiserTarget, ScenarioPartition};
use crate::error::{Error, Result};
use crate::models::TaskPredictions;

/// Value, components and per-head score gradients of `BCE + lambda * PWiseR`.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub value: f64,
    pub bce_ctr: f64,
    /// Present in multi-task mode only.
    pub bce_ctcvr: Option<f64>,
    /// Unweighted pairwise term, summed over the target heads.
    pub pwiser: f64,
    pub grad_ctr: Vec<f64>,
    pub grad_ctcvr: Option<Vec<f64>>,
}

impl CombinedLoss {
    /// Sum of the BCE components.
    pub fn bce(&self) -> f64 {
        self.bce_ctr + self.bce_ctcvr.unwrap_or(0.0)
    }
}

/// Multi-task mode is selected by the presence of `p_ctcvr`; otherwise only the
/// CTR head is trained and the pairwise term must target it.
pub fn combined_loss(
    preds: &TaskPredictions,
    y_ctr: &[u8],
    y_cvr: &[u8],
    cfg: &LossConfig,
) -> Result<CombinedLoss> {
    cfg.validate()?;
    let n = preds.p_ctr.len();
    if y_ctr.len() != n || y_cvr.len() != n {
        return Err(Error::Argument(format!(
            "{n} predictions but {} click / {} conversion labels",
            y_ctr.len(),
            y_cvr.len()
        )));
    }

    let on_ctr = matches!(cfg.pwiser_target, PwiserTarget::Ctr | PwiserTarget::Both);
    let on_ctcvr = matches!(cfg.pwiser_target, PwiserTarget::Ctcvr | PwiserTarget::Both);
    if preds.p_ctcvr.is_none() && on_ctcvr {
        return Err(Error::Config(format!(
            "pwiser target '{}' needs a CTCVR head; single-task models only support 'ctr'",
            cfg.pwiser_target
        )));
    }

    let pairwise = |scores: &[f64]| -> Result<_> {
        let part = ScenarioPartition::from_labels(scores, y_ctr, y_cvr)?;
        pwiser(&part, cfg.m1, cfg.m2, cfg.margin_rule, cfg.kernel)
    };

    let ctr = bce(&preds.p_ctr, y_ctr)?;
    let mut pw_total = 0.0;
    let mut grad_ctr = ctr.grad;
    if on_ctr {
        let pw = pairwise(&preds.p_ctr)?;
        pw_total += pw.value;
        axpy(cfg.lambda, &pw.grad, &mut grad_ctr);
    }

    let (bce_ctcvr, grad_ctcvr) = match &preds.p_ctcvr {
        Some(p_ctcvr) => {
            let y_ctcvr: Vec<u8> = y_ctr.iter().zip(y_cvr).map(|(c, v)| c & v).collect();
            let head = bce(p_ctcvr, &y_ctcvr)?;
            let mut grad = head.grad;
            if on_ctcvr {
                let pw = pairwise(p_ctcvr)?;
                pw_total += pw.value;
                axpy(cfg.lambda, &pw.grad, &mut grad);
            }
            (Some(head.value), Some(grad))
        }
        None => (None, None),
    };

    let bce_sum = ctr.value + bce_ctcvr.unwrap_or(0.0);
    Ok(CombinedLoss {
        value: bce_sum + cfg.lambda * pw_total,
        bce_ctr: ctr.value,
        bce_ctcvr,
        pwiser: pw_total,
        grad_ctr,
        grad_ctcvr,
    })
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
