//! Loop-only reference implementation of the FitAP pipeline, used as a test
//! oracle. Shares no code with `fitap` beyond the input types; scores are
//! recomputed from the raw boxes.

use crate::fitap::{Detection, GroundTruthBox};

fn area(b: [f64; 4]) -> f64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

fn overlap(a: [f64; 4], b: [f64; 4]) -> f64 {
    let mut w = a[2].min(b[2]) - a[0].max(b[0]);
    let mut h = a[3].min(b[3]) - a[1].max(b[1]);
    if w < 0.0 {
        w = 0.0;
    }
    if h < 0.0 {
        h = 0.0;
    }
    let inter = w * h;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (area(a) + area(b) - inter)
}

/// AP for one category at one threshold.
fn category_ap(dets: &[([f64; 4], u64)], gts: &[([f64; 4], u64)], theta: f64) -> f64 {
    // score every detection
    let mut scored: Vec<(usize, f64)> = Vec::new();
    for (k, (b, img)) in dets.iter().enumerate() {
        let mut best = 0.0f64;
        for (g, gimg) in gts {
            if gimg == img {
                best = best.max(overlap(*b, *g));
            }
        }
        scored.push((k, area(*b) * best));
    }
    // stable insertion sort, descending
    for i in 1..scored.len() {
        let mut j = i;
        while j > 0 && scored[j - 1].1 < scored[j].1 {
            scored.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut used = vec![false; gts.len()];
    let mut labels = Vec::new();
    for &(k, _) in &scored {
        let (b, img) = dets[k];
        let mut best: Option<(usize, f64)> = None;
        for (g, (gb, gimg)) in gts.iter().enumerate() {
            if used[g] || *gimg != img {
                continue;
            }
            let v = overlap(b, *gb);
            match best {
                Some((_, bv)) if bv >= v => {}
                _ => best = Some((g, v)),
            }
        }
        let mut tp = false;
        if let Some((g, v)) = best {
            if v >= theta {
                used[g] = true;
                tp = true;
            }
        }
        labels.push(tp);
    }
    let n_gt = gts.len() as f64;
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    let mut tps = 0usize;
    for (k, &tp) in labels.iter().enumerate() {
        if tp {
            tps += 1;
        }
        recall.push(tps as f64 / n_gt);
        precision.push(tps as f64 / (k + 1) as f64);
    }
    // envelope straight from the definition
    let mut env = vec![0.0; recall.len()];
    for i in 0..recall.len() {
        let mut best = f64::NEG_INFINITY;
        for j in 0..recall.len() {
            if recall[j] >= recall[i] && precision[j] > best {
                best = precision[j];
            }
        }
        env[i] = best;
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for i in 0..recall.len() {
        ap += (recall[i] - prev) * env[i];
        prev = recall[i];
    }
    ap
}

/// Reference FitAP: per-category AP averaged over categories, then over
/// thresholds. Categories are visited in sorted order.
pub fn fitap(dets: &[Detection], gts: &[GroundTruthBox], thresholds: &[f64]) -> f64 {
    let mut categories: Vec<&str> = Vec::new();
    for g in gts {
        if !categories.contains(&g.category.as_str()) {
            categories.push(&g.category);
        }
    }
    categories.sort();
    let mut per_theta = Vec::new();
    for &theta in thresholds {
        let mut aps = Vec::new();
        for &cat in &categories {
            let d: Vec<([f64; 4], u64)> = dets
                .iter()
                .filter(|d| d.category == cat)
                .map(|d| (d.bbox.coords(), d.image_id))
                .collect();
            let g: Vec<([f64; 4], u64)> = gts
                .iter()
                .filter(|g| g.category == cat)
                .map(|g| (g.bbox.coords(), g.image_id))
                .collect();
            aps.push(category_ap(&d, &g, theta));
        }
        per_theta.push(offset_mean(&aps));
    }
    offset_mean(&per_theta)
}

// first + mean of offsets from first
fn offset_mean(xs: &[f64]) -> f64 {
    let mut offsets = 0.0;
    for x in xs {
        offsets += x - xs[0];
    }
    xs[0] + offsets / xs.len() as f64
}
