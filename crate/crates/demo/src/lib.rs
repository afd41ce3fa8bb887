//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each export takes plain numbers or strings and returns a JSON string, so
//! the page needs no generated TypeScript glue beyond `wasm-bindgen --target web`.
//! The same functions are callable natively, which is how they are tested.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use rca_core::analysis::{gen_synthetic_attention, SyntheticFamilyConfig};
use rca_core::attn::{apply_rca, central_value, reweight, RcaConfig, Scheme};
use rca_core::fitap::{average_precision, envelope, pr_curve, Outcome, PrPoint};

/// Largest attention map the page will draw.
pub const MAX_TOKENS: usize = 64;
pub const MAX_HEADS: usize = 16;

fn parse_scheme(scheme: &str) -> Result<Scheme, String> {
    scheme.parse().map_err(|_| format!("unknown scheme {scheme:?}"))
}

fn to_json(value: &impl Serialize) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
pub struct Curve {
    pub alpha: Vec<f64>,
    pub weight: Vec<f64>,
}

/// Reweighting function sampled on `[0, 1]`.
pub fn reweight_curve(scheme: &str, gamma: f64, m: f64, samples: usize) -> Result<Curve, String> {
    let scheme = parse_scheme(scheme)?;
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(format!("gamma must be positive, got {gamma}"));
    }
    if !(2..=10_000).contains(&samples) {
        return Err(format!("samples must be in 2..=10000, got {samples}"));
    }
    let alpha: Vec<f64> = (0..samples).map(|k| k as f64 / (samples - 1) as f64).collect();
    let weight = alpha.iter().map(|&a| reweight(a, m, gamma, scheme)).collect();
    Ok(Curve { alpha, weight })
}

#[derive(Debug, Serialize)]
pub struct Heatmaps {
    pub tokens: usize,
    pub m: f64,
    /// Row-major `tokens x tokens`.
    pub head_max: Vec<f64>,
    pub rca: Vec<f64>,
}

/// One synthetic stack: head-max attention next to its RCA map.
pub fn attention_heatmaps(
    tokens: usize,
    heads: usize,
    tau: f64,
    seed: u64,
    scheme: &str,
    gamma: f64,
) -> Result<Heatmaps, String> {
    if !(1..=MAX_TOKENS).contains(&tokens) || !(1..=MAX_HEADS).contains(&heads) {
        return Err(format!("need 1..={MAX_TOKENS} tokens and 1..={MAX_HEADS} heads"));
    }
    let cfg = SyntheticFamilyConfig {
        tokens,
        heads,
        dims: 1,
        tau,
        seed,
        stream: 0,
    };
    let (stack, _) = gen_synthetic_attention(&cfg).map_err(|e| e.to_string())?;
    let rca_cfg = RcaConfig::new(parse_scheme(scheme)?, 0.0).with_gamma(gamma);
    let rca = apply_rca(&stack, &rca_cfg).map_err(|e| e.to_string())?;
    Ok(Heatmaps {
        tokens,
        m: central_value(&stack),
        head_max: stack.head_max().iter().copied().collect(),
        rca: rca.weights().iter().copied().collect(),
    })
}

#[derive(Debug, Serialize)]
pub struct PrDemo {
    pub curve: Vec<PrPoint>,
    pub envelope: Vec<PrPoint>,
    pub ap: f64,
}

/// `labels` is the ranked outcome string, `T` for a true positive and `F`
/// for a false positive; whitespace and commas are ignored.
pub fn pr_from_labels(labels: &str, n_gt: usize) -> Result<PrDemo, String> {
    let outcomes = labels
        .chars()
        .filter(|c| !c.is_whitespace() && *c != ',')
        .map(|c| match c.to_ascii_uppercase() {
            'T' | '1' => Ok(Outcome::TruePositive),
            'F' | '0' => Ok(Outcome::FalsePositive),
            other => Err(format!("label {other:?} is not T or F")),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let tps = outcomes.iter().filter(|o| o.is_tp()).count();
    if tps > n_gt {
        return Err(format!("{tps} true positives but only {n_gt} ground-truth boxes"));
    }
    let curve = pr_curve(&outcomes, n_gt).map_err(|e| e.to_string())?;
    Ok(PrDemo {
        ap: average_precision(&curve),
        envelope: envelope(&curve).points,
        curve: curve.points,
    })
}

#[wasm_bindgen(js_name = reweightCurve)]
pub fn reweight_curve_js(scheme: &str, gamma: f64, m: f64, samples: usize) -> Result<String, JsValue> {
    reweight_curve(scheme, gamma, m, samples)
        .and_then(|c| to_json(&c))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = attentionHeatmaps)]
pub fn attention_heatmaps_js(
    tokens: usize,
    heads: usize,
    tau: f64,
    seed: u32,
    scheme: &str,
    gamma: f64,
) -> Result<String, JsValue> {
    attention_heatmaps(tokens, heads, tau, u64::from(seed), scheme, gamma)
        .and_then(|h| to_json(&h))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = prFromLabels)]
pub fn pr_from_labels_js(labels: &str, n_gt: usize) -> Result<String, JsValue> {
    pr_from_labels(labels, n_gt)
        .and_then(|p| to_json(&p))
        .map_err(|e| JsValue::from_str(&e))
}
