//! Reverse contrast attention (RCA) numerics.
//!
//! The pipeline takes post-softmax multi-head attention, collapses it to the
//! elementwise head-max map, reweights every entry by its distance to a
//! central value `m`, renormalizes rows and aggregates value vectors with the
//! resulting map. The flooring side (`floor_states`, `partition_by_threshold`,
//! `flooring_lower_bound`, `subthreshold_count`) relates the aggregated states
//! to a floor `theta`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Row-sum tolerance for attention produced in 64-bit arithmetic.
pub const ROW_SUM_TOL: f64 = 1e-6;
/// Row-sum tolerance after renormalization.
pub const RENORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttnError {
    #[error("empty attention stack: {heads} heads x {tokens} tokens")]
    Empty { heads: usize, tokens: usize },
    #[error("attention must be heads x n x n, got {0:?}")]
    NotSquare(Vec<usize>),
    #[error("attention weight at head {head}, row {row}, column {col} is {value}")]
    InvalidWeight {
        head: usize,
        row: usize,
        col: usize,
        value: f64,
    },
    #[error("row {row} of head {head} sums to {sum}, expected 1")]
    RowSum { head: usize, row: usize, sum: f64 },
    #[error("row {row} has no positive mass after clamping")]
    DegenerateRow { row: usize },
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite entry in {what} at ({row}, {col})")]
    NonFinite {
        what: &'static str,
        row: usize,
        col: usize,
    },
    #[error("gamma must be positive and finite, got {0}")]
    InvalidGamma(f64),
    #[error("central value must be finite, got {0}")]
    InvalidCentralValue(f64),
    #[error("{what} index {index} out of range (size {len})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
}

pub type Result<T> = std::result::Result<T, AttnError>;

/// H x n x n post-softmax attention, one row-stochastic n x n map per head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    weights: Array3<f64>,
}

impl AttentionStack {
    pub fn new(weights: Array3<f64>) -> Result<Self> {
        Self::with_tolerance(weights, ROW_SUM_TOL)
    }

    /// Validates rows against a caller-chosen tolerance. Dumps stored as f32
    /// are checked at 1e-4.
    pub fn with_tolerance(weights: Array3<f64>, row_tol: f64) -> Result<Self> {
        let (heads, rows, cols) = weights.dim();
        if heads == 0 || rows == 0 {
            return Err(AttnError::Empty {
                heads,
                tokens: rows,
            });
        }
        if rows != cols {
            return Err(AttnError::NotSquare(weights.shape().to_vec()));
        }
        for (head, map) in weights.outer_iter().enumerate() {
            for (row, r) in map.outer_iter().enumerate() {
                let mut sum = 0.0;
                for (col, &value) in r.iter().enumerate() {
                    if !value.is_finite() || !(0.0..=1.0 + row_tol).contains(&value) {
                        return Err(AttnError::InvalidWeight {
                            head,
                            row,
                            col,
                            value,
                        });
                    }
                    sum += value;
                }
                if (sum - 1.0).abs() > row_tol {
                    return Err(AttnError::RowSum { head, row, sum });
                }
            }
        }
        Ok(Self { weights })
    }

    pub fn heads(&self) -> usize {
        self.weights.dim().0
    }

    pub fn tokens(&self) -> usize {
        self.weights.dim().1
    }

    pub fn weights(&self) -> &Array3<f64> {
        &self.weights
    }

    pub fn head(&self, h: usize) -> ArrayView2<'_, f64> {
        self.weights.index_axis(Axis(0), h)
    }

    /// Elementwise maximum over heads.
    pub fn head_max(&self) -> Array2<f64> {
        let mut out = self.weights.index_axis(Axis(0), 0).to_owned();
        for map in self.weights.outer_iter().skip(1) {
            out.zip_mut_with(&map, |acc, &w| *acc = acc.max(w));
        }
        out
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.weights
    }
}

/// Single n x n row-stochastic map after RCA.
#[derive(Debug, Clone, PartialEq)]
pub struct ReweightedAttention {
    weights: Array2<f64>,
}

impl ReweightedAttention {
    /// Wraps an existing row-stochastic matrix, e.g. one read back from disk.
    pub fn from_row_stochastic(weights: Array2<f64>, row_tol: f64) -> Result<Self> {
        let stack = AttentionStack::with_tolerance(weights.insert_axis(Axis(0)), row_tol)?;
        Ok(Self {
            weights: stack.into_inner().index_axis_move(Axis(0), 0),
        })
    }

    pub fn tokens(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.weights.row(i)
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.weights
    }
}

fn check_finite(what: &'static str, m: &Array2<f64>) -> Result<()> {
    for ((row, col), v) in m.indexed_iter() {
        if !v.is_finite() {
            return Err(AttnError::NonFinite { what, row, col });
        }
    }
    Ok(())
}

macro_rules! token_matrix {
    ($(#[$doc:meta])* $name:ident, $label:literal) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name(Array2<f64>);

        impl $name {
            pub fn new(values: Array2<f64>) -> Result<Self> {
                check_finite($label, &values)?;
                Ok(Self(values))
            }

            pub fn tokens(&self) -> usize {
                self.0.nrows()
            }

            pub fn dims(&self) -> usize {
                self.0.ncols()
            }

            pub fn as_array(&self) -> &Array2<f64> {
                &self.0
            }

            pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
                self.0.row(i)
            }

            pub fn into_inner(self) -> Array2<f64> {
                self.0
            }
        }
    };
}

token_matrix!(
    /// n x d_v value vectors, one row per key token.
    ValueMatrix,
    "value matrix"
);
token_matrix!(
    /// n x d_v hidden states, one row per query token.
    HiddenStates,
    "hidden states"
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    InverseDistance,
    Gaussian,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::InverseDistance => f.write_str("inverse"),
            Scheme::Gaussian => f.write_str("gaussian"),
        }
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "inverse" | "inverse_distance" | "inverse-distance" => Ok(Scheme::InverseDistance),
            "gaussian" => Ok(Scheme::Gaussian),
            other => Err(format!("unknown scheme {other:?}, expected inverse or gaussian")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentralValue {
    Explicit(f64),
    DeriveFromStack,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RcaConfig {
    pub scheme: Scheme,
    pub gamma: f64,
    pub floor_theta: f64,
    pub central_value: CentralValue,
}

impl RcaConfig {
    pub const DEFAULT_GAMMA: f64 = 1.0;

    /// `gamma = 1`, central value derived from the stack.
    pub fn new(scheme: Scheme, floor_theta: f64) -> Self {
        Self {
            scheme,
            gamma: Self::DEFAULT_GAMMA,
            floor_theta,
            central_value: CentralValue::DeriveFromStack,
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_central_value(mut self, m: f64) -> Self {
        self.central_value = CentralValue::Explicit(m);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(AttnError::InvalidGamma(self.gamma));
        }
        if let CentralValue::Explicit(m) = self.central_value {
            if !m.is_finite() {
                return Err(AttnError::InvalidCentralValue(m));
            }
        }
        Ok(())
    }

    pub fn resolve_central_value(&self, stack: &AttentionStack) -> f64 {
        match self.central_value {
            CentralValue::Explicit(m) => m,
            CentralValue::DeriveFromStack => central_value(stack),
        }
    }
}

/// Mean over key columns of the column maximum of the head-max map.
pub fn central_value(stack: &AttentionStack) -> f64 {
    let head_max = stack.head_max();
    let n = head_max.ncols() as f64;
    head_max
        .axis_iter(Axis(1))
        .map(|col| col.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / n
}

/// Nonmonotonic weight peaking at `alpha == m` with value 1.
#[inline]
pub fn reweight(alpha: f64, m: f64, gamma: f64, scheme: Scheme) -> f64 {
    reweight_offset(alpha - m, gamma, scheme)
}

/// Reweighting as a function of the signed offset `alpha - m`.
#[inline]
pub fn reweight_offset(delta: f64, gamma: f64, scheme: Scheme) -> f64 {
    match scheme {
        Scheme::InverseDistance => 1.0 / (1.0 + gamma * delta.abs()),
        Scheme::Gaussian => (-gamma * delta * delta).exp(),
    }
}

/// Clamps negatives to zero and divides every row by its clamped sum.
pub fn renormalize_rows(raw: &Array2<f64>) -> Result<ReweightedAttention> {
    let (rows, cols) = raw.dim();
    if rows != cols {
        return Err(AttnError::NotSquare(vec![rows, cols]));
    }
    check_finite("reweighted attention", raw)?;
    let mut out = raw.mapv(|w| w.max(0.0));
    for (row, mut r) in out.outer_iter_mut().enumerate() {
        let sum: f64 = r.sum();
        if sum <= 0.0 {
            return Err(AttnError::DegenerateRow { row });
        }
        r.mapv_inplace(|w| w / sum);
    }
    Ok(ReweightedAttention { weights: out })
}

fn reweight_map(map: &Array2<f64>, m: f64, cfg: &RcaConfig) -> Array2<f64> {
    map.mapv(|alpha| reweight(alpha, m, cfg.gamma, cfg.scheme))
}

/// RCA on the head-max map: resolve `m`, reweight, renormalize.
pub fn apply_rca(stack: &AttentionStack, cfg: &RcaConfig) -> Result<ReweightedAttention> {
    cfg.validate()?;
    let m = cfg.resolve_central_value(stack);
    renormalize_rows(&reweight_map(&stack.head_max(), m, cfg))
}

/// Per-head variant: every head is reweighted around the same `m` and
/// renormalized on its own.
pub fn apply_rca_per_head(
    stack: &AttentionStack,
    cfg: &RcaConfig,
) -> Result<Vec<ReweightedAttention>> {
    cfg.validate()?;
    let m = cfg.resolve_central_value(stack);
    stack
        .weights()
        .outer_iter()
        .map(|head| renormalize_rows(&reweight_map(&head.to_owned(), m, cfg)))
        .collect()
}

/// `z_i = sum_j attn_ij v_j` for every query token.
pub fn aggregate(attn: &ReweightedAttention, values: &ValueMatrix) -> Result<HiddenStates> {
    if attn.tokens() != values.tokens() {
        return Err(AttnError::DimensionMismatch {
            what: "value tokens",
            expected: attn.tokens(),
            got: values.tokens(),
        });
    }
    Ok(HiddenStates(attn.weights().dot(values.as_array())))
}

/// Hidden state of a single query token.
pub fn aggregate_row(
    attn: &ReweightedAttention,
    values: &ValueMatrix,
    token: usize,
) -> Result<Array1<f64>> {
    if attn.tokens() != values.tokens() {
        return Err(AttnError::DimensionMismatch {
            what: "value tokens",
            expected: attn.tokens(),
            got: values.tokens(),
        });
    }
    if token >= attn.tokens() {
        return Err(AttnError::OutOfRange {
            what: "token",
            index: token,
            len: attn.tokens(),
        });
    }
    Ok(attn.row(token).dot(values.as_array()))
}

/// Elementwise `max(z, theta)`.
pub fn floor_states(states: &HiddenStates, theta: f64) -> HiddenStates {
    HiddenStates(states.as_array().mapv(|z| z.max(theta)))
}

/// Split of key tokens by whether `v_j(dim)` dips below `theta`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenPartition {
    pub below: Vec<usize>,
    pub at_or_above: Vec<usize>,
    pub dim: usize,
    pub theta: f64,
    /// Minimum component among `below`; `None` when `below` is empty.
    pub v_minus: Option<f64>,
}

impl TokenPartition {
    pub fn tokens(&self) -> usize {
        self.below.len() + self.at_or_above.len()
    }
}

pub fn partition_by_threshold(
    values: &ValueMatrix,
    theta: f64,
    dim: usize,
) -> Result<TokenPartition> {
    if dim >= values.dims() {
        return Err(AttnError::OutOfRange {
            what: "dimension",
            index: dim,
            len: values.dims(),
        });
    }
    let mut below = Vec::new();
    let mut at_or_above = Vec::new();
    let mut v_minus: Option<f64> = None;
    for (j, &v) in values.as_array().column(dim).iter().enumerate() {
        if v < theta {
            below.push(j);
            v_minus = Some(v_minus.map_or(v, |cur| cur.min(v)));
        } else {
            at_or_above.push(j);
        }
    }
    Ok(TokenPartition {
        below,
        at_or_above,
        dim,
        theta,
        v_minus,
    })
}

/// `theta + (v_minus - theta) * sum_{j in below} attn_row[j]`, a lower bound on
/// the aggregated component `sum_j attn_row[j] v_j(dim)`.
pub fn flooring_lower_bound(attn_row: ArrayView1<'_, f64>, partition: &TokenPartition) -> Result<f64> {
    if attn_row.len() != partition.tokens() {
        return Err(AttnError::DimensionMismatch {
            what: "attention row length",
            expected: partition.tokens(),
            got: attn_row.len(),
        });
    }
    let sum = attn_row.sum();
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(AttnError::RowSum { head: 0, row: 0, sum });
    }
    let theta = partition.theta;
    Ok(match partition.v_minus {
        None => theta,
        Some(v_minus) => {
            let penalty: f64 = partition.below.iter().map(|&j| attn_row[j]).sum();
            theta + (v_minus - theta) * penalty
        }
    })
}

/// Number of components of token `token`'s hidden state strictly below `theta`.
pub fn subthreshold_count(states: &HiddenStates, theta: f64, token: usize) -> Result<usize> {
    if token >= states.tokens() {
        return Err(AttnError::OutOfRange {
            what: "token",
            index: token,
            len: states.tokens(),
        });
    }
    Ok(states.row(token).iter().filter(|&&z| z < theta).count())
}
