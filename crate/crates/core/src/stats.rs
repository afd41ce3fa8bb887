//! Correlation statistics and table arithmetic.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 3 observations, got {0}")]
    TooFew(usize),
    #[error("correlation undefined: {0} series is constant")]
    ConstantSeries(&'static str),
    #[error("non-finite observation at index {0}")]
    NonFinite(usize),
    #[error("percent change from a zero baseline")]
    ZeroBaseline,
}

pub type Result<T> = std::result::Result<T, StatsError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Correlation {
    pub r: f64,
    /// Two-tailed p-value of the t statistic with `n - 2` degrees of freedom.
    pub p: f64,
    pub n: usize,
}

fn check_series(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 3 {
        return Err(StatsError::TooFew(xs.len()));
    }
    if let Some(i) = xs
        .iter()
        .zip(ys)
        .position(|(x, y)| !x.is_finite() || !y.is_finite())
    {
        return Err(StatsError::NonFinite(i));
    }
    Ok(())
}

fn sample_r(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(StatsError::ConstantSeries("x"));
    }
    if syy == 0.0 {
        return Err(StatsError::ConstantSeries("y"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Two-tailed p-value for a correlation `r` over `n` observations.
pub fn correlation_p_value(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let t = r * df.sqrt() / (1.0 - r * r).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
    (2.0 * dist.cdf(-t.abs())).min(1.0)
}

/// Sample Pearson correlation with its t-test p-value.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    check_series(xs, ys)?;
    let r = sample_r(xs, ys)?;
    Ok(Correlation {
        r,
        p: correlation_p_value(r, xs.len()),
        n: xs.len(),
    })
}

/// Ranks starting at 1, ties share their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation; the p-value uses the same t approximation.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    check_series(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// `100 * (post - pre) / pre`.
pub fn percent_change(pre: f64, post: f64) -> Result<f64> {
    if pre == 0.0 {
        return Err(StatsError::ZeroBaseline);
    }
    Ok(100.0 * (post - pre) / pre)
}

/// Rounds to `digits` significant figures.
pub fn round_sig(x: f64, digits: u32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let magnitude = x.abs().log10().floor() as i32;
    let scale = 10f64.powi(digits as i32 - 1 - magnitude);
    (x * scale).round() / scale
}

/// Signed, three significant figures, e.g. `+26.6`, `-5.51`, `+139`.
pub fn format_percent_change(change: f64) -> String {
    let rounded = round_sig(change, 3);
    let magnitude = if rounded == 0.0 {
        0
    } else {
        rounded.abs().log10().floor() as i32
    };
    let decimals = (2 - magnitude).max(0) as usize;
    let sign = if rounded > 0.0 { "+" } else { "" };
    format!("{sign}{rounded:.decimals$}")
}
