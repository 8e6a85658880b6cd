//! AUC, log loss and evaluation reports.

use std::fmt::Write as _;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::bce;
use crate::models::{Model, TaskPredictions};

/// Area under the ROC curve via the Mann-Whitney rank statistic.
///
/// Tied scores receive their average rank, so a tied positive/negative pair
/// counts one half. Runs in `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::Argument("labels must be 0 or 1".into()));
    }
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes ({positives} positives, {negatives} negatives)"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end share their mean
        let mean_rank = (start + 1 + end) as f64 / 2.0;
        let pos_in_group = order[start..end]
            .iter()
            .filter(|&&i| labels[i] == 1)
            .count();
        rank_sum += mean_rank * pos_in_group as f64;
        start = end;
    }
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// Mean log loss with the BCE probability clamp.
pub fn logloss(scores: &[f64], labels: &[u8]) -> Result<f64> {
    Ok(bce(scores, labels)?.value)
}

/// Per-task evaluation summary. AUCs are percentages.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub zeros: usize,
    pub ct_nocvr: usize,
    pub cvr: usize,
    pub auc_ctr: std::result::Result<f64, String>,
    pub logloss_ctr: f64,
    /// Multi-task models only.
    pub auc_ctcvr: Option<std::result::Result<f64, String>>,
    pub logloss_ctcvr: Option<f64>,
}

impl EvalReport {
    pub fn auc_ctr(&self) -> Option<f64> {
        self.auc_ctr.as_ref().ok().copied()
    }

    pub fn auc_ctcvr(&self) -> Option<f64> {
        self.auc_ctcvr
            .as_ref()
            .and_then(|r| r.as_ref().ok().copied())
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        let pct = |r: &std::result::Result<f64, String>| match r {
            Ok(v) => format!("{v:.3}"),
            Err(_) => "undefined".to_string(),
        };
        let mut kv = vec![
            ("samples", self.samples.to_string()),
            ("scenario_zeros", self.zeros.to_string()),
            ("scenario_ct_nocvr", self.ct_nocvr.to_string()),
            ("scenario_cvr", self.cvr.to_string()),
            ("auc_ctr", pct(&self.auc_ctr)),
            ("logloss_ctr", format!("{:.6}", self.logloss_ctr)),
        ];
        if let Some(a) = &self.auc_ctcvr {
            kv.push(("auc_ctcvr", pct(a)));
        }
        if let Some(l) = self.logloss_ctcvr {
            kv.push(("logloss_ctcvr", format!("{l:.6}")));
        }
        kv
    }

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            writeln!(s, "{k}={v}").unwrap();
        }
        for (task, r) in [
            ("ctr", Some(&self.auc_ctr)),
            ("ctcvr", self.auc_ctcvr.as_ref()),
        ] {
            if let Some(Err(msg)) = r {
                writeln!(s, "error_{task}={msg}").unwrap();
            }
        }
        s
    }

    /// Tab-separated header and value rows for aggregation.
    pub fn to_row(&self) -> (String, String) {
        let kv = self.pairs();
        let header = kv.iter().map(|(k, _)| *k).collect::<Vec<_>>().join("\t");
        let row = kv
            .iter()
            .map(|(_, v)| v.as_str())
            .collect::<Vec<_>>()
            .join("\t");
        (header, row)
    }
}

/// Score a dataset in chunks of `chunk` rows.
pub fn predict_dataset(model: &Model, dataset: &Dataset, chunk: usize) -> Result<TaskPredictions> {
    let chunk = chunk.max(1);
    let mut out: Option<TaskPredictions> = None;
    for start in (0..dataset.len()).step_by(chunk) {
        let end = (start + chunk).min(dataset.len());
        let rows: Vec<usize> = (start..end).collect();
        let p = model.predict(&dataset.batch(&rows).fields)?;
        match &mut out {
            None => out = Some(p),
            Some(acc) => {
                acc.p_ctr.extend(p.p_ctr);
                if let (Some(a), Some(b)) = (&mut acc.p_cvr, p.p_cvr) {
                    a.extend(b);
                }
                if let (Some(a), Some(b)) = (&mut acc.p_ctcvr, p.p_ctcvr) {
                    a.extend(b);
                }
            }
        }
    }
    out.ok_or_else(|| Error::Argument("cannot score an empty dataset".into()))
}

/// Build a report from predictions and labels. CTCVR is evaluated on
/// `y_ctr * y_cvr` over every impression.
pub fn evaluate_predictions(
    preds: &TaskPredictions,
    y_ctr: &[u8],
    y_cvr: &[u8],
) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty dataset".into()));
    }
    let y_ctcvr: Vec<u8> = y_ctr.iter().zip(y_cvr).map(|(c, v)| c & v).collect();
    let cvr = y_cvr.iter().filter(|&&v| v == 1).count();
    let zeros = y_ctr
        .iter()
        .zip(y_cvr)
        .filter(|&(&c, &v)| c == 0 && v == 0)
        .count();
    let pct = |r: Result<f64>| r.map(|a| 100.0 * a).map_err(|e| e.to_string());

    let (auc_ctcvr, logloss_ctcvr) = match &preds.p_ctcvr {
        Some(p) => (Some(pct(auc(p, &y_ctcvr))), Some(logloss(p, &y_ctcvr)?)),
        None => (None, None),
    };
    Ok(EvalReport {
        samples: preds.len(),
        zeros,
        ct_nocvr: preds.len() - zeros - cvr,
        cvr,
        auc_ctr: pct(auc(&preds.p_ctr, y_ctr)),
        logloss_ctr: logloss(&preds.p_ctr, y_ctr)?,
        auc_ctcvr,
        logloss_ctcvr,
    })
}

pub fn evaluate(model: &Model, dataset: &Dataset, chunk: usize) -> Result<EvalReport> {
    let preds = predict_dataset(model, dataset, chunk)?;
    evaluate_predictions(
        &preds,
        &dataset.y_ctr(),
        &dataset.samples.iter().map(|s| s.y_cvr).collect::<Vec<_>>(),
    )
}
