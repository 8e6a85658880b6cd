//! Pairwise conversion-ranking term.
//!
//! ```text
//! value = 1/A * sum_{a in ct_nocvr} sum_{b in cvr} [active(a, b, m1)] (a - b + m1)^2
//!       + 1/Z * sum_{z in zeros}    sum_{b in cvr} [active(z, b, m2)] (z - b + m2)^2
//! ```
//!
//! A term whose outer group or the conversion group is empty contributes 0.

use super::{check_margin, Kernel, LossResult, MarginRule, ScenarioPartition};
use crate::error::Result;

/// Dispatch on `kernel`.
pub fn pwiser(
    part: &ScenarioPartition,
    m1: f64,
    m2: f64,
    rule: MarginRule,
    kernel: Kernel,
) -> Result<LossResult> {
    match kernel {
        Kernel::Naive => pwiser_naive_with(part, m1, m2, rule),
        Kernel::Fast => pwiser_fast_with(part, m1, m2, rule),
    }
}

/// Reference double-loop evaluation with the squared-hinge rule.
pub fn pwiser_naive(part: &ScenarioPartition, m1: f64, m2: f64) -> Result<LossResult> {
    pwiser_naive_with(part, m1, m2, MarginRule::Hinge)
}

/// Sorted prefix-sum evaluation with the squared-hinge rule.
pub fn pwiser_fast(part: &ScenarioPartition, m1: f64, m2: f64) -> Result<LossResult> {
    pwiser_fast_with(part, m1, m2, MarginRule::Hinge)
}

pub fn pwiser_naive_with(
    part: &ScenarioPartition,
    m1: f64,
    m2: f64,
    rule: MarginRule,
) -> Result<LossResult> {
    evaluate(part, m1, m2, rule, naive_term)
}

pub fn pwiser_fast_with(
    part: &ScenarioPartition,
    m1: f64,
    m2: f64,
    rule: MarginRule,
) -> Result<LossResult> {
    evaluate(part, m1, m2, rule, fast_term)
}

type TermFn = fn(&[f64], &[f64], f64, MarginRule, &mut [f64], &mut [f64]) -> f64;

fn evaluate(
    part: &ScenarioPartition,
    m1: f64,
    m2: f64,
    rule: MarginRule,
    term: TermFn,
) -> Result<LossResult> {
    check_margin("m1", m1)?;
    check_margin("m2", m2)?;
    part.validate_scores()?;

    let (a, c, z) = part.sizes();
    let mut grad = vec![0.0; part.batch_len()];
    let mut g_outer1 = vec![0.0; a];
    let mut g_outer2 = vec![0.0; z];
    let mut g_cvr = vec![0.0; c];

    let mut value = 0.0;
    if c > 0 {
        value += term(
            &part.scores_ct_nocvr,
            &part.scores_cvr,
            m1,
            rule,
            &mut g_outer1,
            &mut g_cvr,
        );
        value += term(
            &part.scores_zeros,
            &part.scores_cvr,
            m2,
            rule,
            &mut g_outer2,
            &mut g_cvr,
        );
    }

    for (&i, g) in part.idx_ct_nocvr.iter().zip(&g_outer1) {
        grad[i] += g;
    }
    for (&i, g) in part.idx_zeros.iter().zip(&g_outer2) {
        grad[i] += g;
    }
    for (&i, g) in part.idx_cvr.iter().zip(&g_cvr) {
        grad[i] += g;
    }
    Ok(LossResult { value, grad })
}

/// Activation threshold and penalty shift for an outer score.
///
/// A pair is active when `conv < threshold`; its penalty is `(shift - conv)^2`.
#[inline]
fn threshold_and_shift(outer: f64, m: f64, rule: MarginRule) -> (f64, f64) {
    let shift = outer + m;
    match rule {
        MarginRule::Hinge => (shift, shift),
        MarginRule::Literal => (outer - m, shift),
    }
}

/// One term, normalised by `outer.len()`. Adds outer gradients into
/// `g_outer` and conversion gradients into `g_inner`.
fn naive_term(
    outer: &[f64],
    inner: &[f64],
    m: f64,
    rule: MarginRule,
    g_outer: &mut [f64],
    g_inner: &mut [f64],
) -> f64 {
    if outer.is_empty() || inner.is_empty() {
        return 0.0;
    }
    let norm = 1.0 / outer.len() as f64;
    let mut total = 0.0;
    for (&a, ga) in outer.iter().zip(g_outer.iter_mut()) {
        let (t, shift) = threshold_and_shift(a, m, rule);
        let mut row = 0.0;
        let mut row_grad = 0.0;
        for (&b, gb) in inner.iter().zip(g_inner.iter_mut()) {
            if b < t {
                let d = shift - b;
                row += d * d;
                row_grad += d;
                *gb -= 2.0 * norm * d;
            }
        }
        total += row;
        *ga += 2.0 * norm * row_grad;
    }
    total * norm
}

fn fast_term(
    outer: &[f64],
    inner: &[f64],
    m: f64,
    rule: MarginRule,
    g_outer: &mut [f64],
    g_inner: &mut [f64],
) -> f64 {
    if outer.is_empty() || inner.is_empty() {
        return 0.0;
    }
    let norm = 1.0 / outer.len() as f64;

    // Outer pass: sorted conversion scores with prefix count / sum / sum of squares.
    let mut sorted_inner = inner.to_vec();
    sorted_inner.sort_unstable_by(f64::total_cmp);
    let mut s1 = Vec::with_capacity(inner.len() + 1);
    let mut s2 = Vec::with_capacity(inner.len() + 1);
    s1.push(0.0);
    s2.push(0.0);
    for &b in &sorted_inner {
        s1.push(s1.last().unwrap() + b);
        s2.push(s2.last().unwrap() + b * b);
    }

    let mut total = 0.0;
    for (&a, ga) in outer.iter().zip(g_outer.iter_mut()) {
        let (t, shift) = threshold_and_shift(a, m, rule);
        let k = sorted_inner.partition_point(|&b| b < t);
        if k == 0 {
            continue;
        }
        let kf = k as f64;
        total += kf * shift * shift - 2.0 * shift * s1[k] + s2[k];
        *ga += 2.0 * norm * (kf * shift - s1[k]);
    }

    // Inner pass: outer entries sorted by threshold, suffix sums of their shifts.
    let mut by_threshold: Vec<(f64, f64)> = outer
        .iter()
        .map(|&a| threshold_and_shift(a, m, rule))
        .collect();
    by_threshold.sort_unstable_by(|x, y| x.0.total_cmp(&y.0));
    let n = by_threshold.len();
    let mut suffix = vec![0.0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + by_threshold[i].1;
    }
    for (&b, gb) in inner.iter().zip(g_inner.iter_mut()) {
        // active outers are exactly those with b < threshold
        let first = by_threshold.partition_point(|&(t, _)| t <= b);
        let cnt = (n - first) as f64;
        if cnt > 0.0 {
            *gb -= 2.0 * norm * (suffix[first] - cnt * b);
        }
    }

    total * norm
}
