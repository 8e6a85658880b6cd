//! Wall-clock comparison of the naive and sorted pairwise kernels.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{pwiser_fast, pwiser_naive, LossResult, ScenarioPartition};
use crate::error::{Error, Result};

/// Timings in seconds for one group size.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    /// Size of each of the three scenario groups.
    pub n: usize,
    pub fast_mean: f64,
    pub fast_min: f64,
    /// Naive columns are absent above the naive size cap.
    pub naive_mean: Option<f64>,
    pub naive_min: Option<f64>,
    /// Largest relative difference over the value and every gradient entry.
    pub max_deviation: Option<f64>,
}

impl BenchRow {
    pub fn speedup(&self) -> Option<f64> {
        self.naive_mean.map(|t| t / self.fast_mean)
    }
}

/// Three groups of `n` scores each, uniform in `(0.01, 0.99)`.
pub fn balanced_partition(n: usize, rng: &mut impl Rng) -> ScenarioPartition {
    let mut draw = || {
        (0..n)
            .map(|_| rng.random_range(0.01..0.99))
            .collect::<Vec<f64>>()
    };
    let (a, c, z) = (draw(), draw(), draw());
    ScenarioPartition::from_groups(a, c, z)
}

/// `|x - y| / max(|x|, |y|, 1)`, maximised over the value and gradients.
pub fn max_deviation(x: &LossResult, y: &LossResult) -> f64 {
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);
    x.grad
        .iter()
        .zip(&y.grad)
        .map(|(&a, &b)| rel(a, b))
        .fold(rel(x.value, y.value), f64::max)
}

fn time<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<(f64, f64, T)> {
    let mut total = 0.0;
    let mut min = f64::INFINITY;
    let mut last = None;
    for _ in 0..reps {
        let start = Instant::now();
        let out = f()?;
        let secs = start.elapsed().as_secs_f64();
        total += secs;
        min = min.min(secs);
        last = Some(out);
    }
    Ok((
        total / reps as f64,
        min,
        last.expect("at least one repetition"),
    ))
}

/// Default margins; the naive kernel only runs for `n <= naive_cap`.
pub fn bench_loss(
    sizes: &[usize],
    reps: usize,
    naive_cap: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if reps == 0 || sizes.contains(&0) {
        return Err(Error::Argument(
            "sizes and repetitions must be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m1, m2) = (0.3, 0.3);
    sizes
        .iter()
        .map(|&n| {
            let part = balanced_partition(n, &mut rng);
            let (fast_mean, fast_min, fast) = time(reps, || pwiser_fast(&part, m1, m2))?;
            let mut row = BenchRow {
                n,
                fast_mean,
                fast_min,
                naive_mean: None,
                naive_min: None,
                max_deviation: None,
            };
            if n <= naive_cap {
                let (mean, min, naive) = time(reps, || pwiser_naive(&part, m1, m2))?;
                row.naive_mean = Some(mean);
                row.naive_min = Some(min);
                row.max_deviation = Some(max_deviation(&naive, &fast));
            }
            Ok(row)
        })
        .collect()
}

pub fn bench_tsv(rows: &[BenchRow]) -> String {
    let opt = |v: Option<f64>, prec: usize| {
        v.map_or_else(|| "NA".to_string(), |x| format!("{x:.prec$e}"))
    };
    let mut s = String::from(
        "n\tnaive_mean_s\tnaive_min_s\tfast_mean_s\tfast_min_s\tspeedup\tmax_deviation\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{:.4e}\t{:.4e}\t{}\t{}",
            r.n,
            opt(r.naive_mean, 4),
            opt(r.naive_min, 4),
            r.fast_mean,
            r.fast_min,
            r.speedup()
                .map_or_else(|| "NA".to_string(), |x| format!("{x:.1}")),
            opt(r.max_deviation, 2)
        );
    }
    s
}
