//! Confidence-free average precision.
//!
//! Detections parsed from free-form text carry no confidence, so they are
//! ranked by `A_box * IoU`: normalized box area times the best IoU against
//! same-image, same-category ground truth. From that ranking the usual
//! machinery follows: greedy matching at an IoU threshold, a precision-recall
//! curve, its monotone envelope and the all-point area under it. FitAP is the
//! mean AP over the threshold ladder `0.50:0.05:0.95`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detparse::{parse_response, NormalizedBox, RawResponse};
use crate::stats::{self, StatsError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("no ground truth boxes in the dataset")]
    NoGroundTruth,
    #[error("recall undefined without ground truth")]
    UndefinedRecall,
    #[error("need at least 3 matched detection/ground-truth pairs, got {0}")]
    TooFewPairs(usize),
    #[error("invalid threshold ladder: {0}")]
    InvalidThresholds(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub image_id: u64,
    pub category: String,
    pub bbox: NormalizedBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub category: String,
    pub bbox: NormalizedBox,
    /// `A_box * IoU`, in `[0, 1]`.
    pub fit_score: f64,
}

impl Detection {
    /// Builds a detection and scores it against `gts`.
    pub fn scored(image_id: u64, category: &str, bbox: NormalizedBox, gts: &[GroundTruthBox]) -> Self {
        let fit = fit_score(
            &bbox,
            gts.iter()
                .filter(|g| g.image_id == image_id && g.category == category)
                .map(|g| &g.bbox),
        );
        Self {
            image_id,
            category: category.to_owned(),
            bbox,
            fit_score: fit,
        }
    }
}

pub fn iou(a: &NormalizedBox, b: &NormalizedBox) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Box area times the best IoU over `gts` (0 when there are none).
pub fn fit_score<'a>(det: &NormalizedBox, gts: impl IntoIterator<Item = &'a NormalizedBox>) -> f64 {
    let best = gts.into_iter().map(|g| iou(det, g)).fold(0.0, f64::max);
    det.area() * best
}

/// Parses every response and scores the resulting boxes.
pub fn detections_from_responses(
    responses: &[RawResponse],
    gts: &[GroundTruthBox],
) -> Vec<Detection> {
    responses
        .iter()
        .flat_map(|resp| {
            parse_response(resp)
                .into_iter()
                .map(|b| Detection::scored(resp.image_id, &resp.category, b, gts))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
}

impl Outcome {
    pub fn is_tp(self) -> bool {
        self == Outcome::TruePositive
    }
}

/// One ranked detection after matching.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Match {
    /// Index into the detection slice that was matched.
    pub index: usize,
    pub outcome: Outcome,
    /// IoU with the best unmatched candidate (0 if none was left).
    pub iou: f64,
    pub gt: Option<usize>,
}

/// Indices sorted by fit score, descending; ties keep input order.
pub fn rank_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].fit_score.total_cmp(&dets[a].fit_score));
    order
}

/// Greedy one-to-one matching in rank order. Each detection takes the
/// unmatched same-image, same-category ground truth with the highest IoU and
/// is a true positive iff that IoU reaches `theta`.
pub fn match_at_threshold(dets: &[Detection], gts: &[GroundTruthBox], theta: f64) -> Vec<Match> {
    let mut taken = vec![false; gts.len()];
    rank_order(dets)
        .into_iter()
        .map(|index| {
            let det = &dets[index];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] || gt.image_id != det.image_id || gt.category != det.category {
                    continue;
                }
                let v = iou(&det.bbox, &gt.bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, v)) if v >= theta => {
                    taken[g] = true;
                    Match {
                        index,
                        outcome: Outcome::TruePositive,
                        iou: v,
                        gt: Some(g),
                    }
                }
                other => Match {
                    index,
                    outcome: Outcome::FalsePositive,
                    iou: other.map_or(0.0, |(_, v)| v),
                    gt: None,
                },
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Precision-recall points in rank order; recall is non-decreasing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub n_gt: usize,
}

pub fn pr_curve(labels: &[Outcome], n_gt: usize) -> Result<PrCurve> {
    if n_gt == 0 {
        return Err(EvalError::UndefinedRecall);
    }
    let mut tp = 0usize;
    let points = labels
        .iter()
        .enumerate()
        .map(|(k, label)| {
            tp += usize::from(label.is_tp());
            PrPoint {
                recall: tp as f64 / n_gt as f64,
                precision: tp as f64 / (k + 1) as f64,
            }
        })
        .collect();
    Ok(PrCurve { points, n_gt })
}

/// Replaces each precision with the maximum precision over all points whose
/// recall is at least as large.
pub fn envelope(curve: &PrCurve) -> PrCurve {
    let pts = &curve.points;
    let mut suffix_max = vec![0.0f64; pts.len()];
    let mut running = f64::NEG_INFINITY;
    for k in (0..pts.len()).rev() {
        running = running.max(pts[k].precision);
        suffix_max[k] = running;
    }
    // points sharing a recall value all see the first one's suffix maximum
    let mut points = Vec::with_capacity(pts.len());
    let mut group_start = 0;
    for (k, p) in pts.iter().enumerate() {
        if p.recall != pts[group_start].recall {
            group_start = k;
        }
        points.push(PrPoint {
            recall: p.recall,
            precision: suffix_max[group_start],
        });
    }
    PrCurve {
        points,
        n_gt: curve.n_gt,
    }
}

/// All-point area under the envelope, starting from recall 0.
pub fn average_precision(curve: &PrCurve) -> f64 {
    let env = envelope(curve);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for p in &env.points {
        area += (p.recall - prev_recall) * p.precision;
        prev_recall = p.recall;
    }
    area
}

/// IoU thresholds at which AP is evaluated.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdLadder(Vec<f64>);

impl ThresholdLadder {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(EvalError::InvalidThresholds("empty ladder".into()));
        }
        if let Some(t) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(EvalError::InvalidThresholds(format!("{t} outside [0, 1]")));
        }
        Ok(Self(thresholds))
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.0
    }
}

impl Default for ThresholdLadder {
    /// `0.50, 0.55, ..., 0.95`.
    fn default() -> Self {
        Self((0..10).map(|k| f64::from(50 + 5 * k) / 100.0).collect())
    }
}

impl fmt::Display for ThresholdLadder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|t| format!("{t:.2}")).collect();
        f.write_str(&parts.join(","))
    }
}

/// Accepts `start:step:stop` or a comma-separated list.
impl FromStr for ThresholdLadder {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: &str| EvalError::InvalidThresholds(format!("{s:?}: {msg}"));
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad("not a number"));
        if s.contains(':') {
            let parts: Vec<&str> = s.split(':').collect();
            let [start, step, stop] = parts[..] else {
                return Err(bad("expected start:step:stop"));
            };
            let (start, step, stop) = (num(start)?, num(step)?, num(stop)?);
            if step <= 0.0 || stop < start {
                return Err(bad("step must be positive and stop >= start"));
            }
            let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
            // round to 1e-9 so 0.5 + 2 * 0.05 reads back as 0.6
            let ladder = (0..count)
                .map(|k| ((start + k as f64 * step) * 1e9).round() / 1e9)
                .collect();
            Self::new(ladder)
        } else {
            Self::new(s.split(',').map(num).collect::<Result<Vec<_>>>()?)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdAp {
    pub theta: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryReport {
    pub n_gt: usize,
    pub n_det: usize,
    /// AP per threshold, in ladder order.
    pub aps: Vec<f64>,
    pub fitap: f64,
}

/// Curve for one (category, threshold) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRecord {
    pub category: String,
    pub theta: f64,
    pub curve: PrCurve,
    pub envelope: PrCurve,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_threshold: Vec<ThresholdAp>,
    /// Mean of `per_threshold` APs.
    pub fitap: f64,
    pub per_category: BTreeMap<String, CategoryReport>,
    #[serde(skip)]
    pub curves: Vec<CurveRecord>,
}

/// Arithmetic mean, accumulated as offsets from the first value so that a
/// constant series averages to exactly that constant.
pub fn mean_ap(aps: &[f64]) -> f64 {
    let Some(&first) = aps.first() else {
        return 0.0;
    };
    first + aps.iter().map(|a| a - first).sum::<f64>() / aps.len() as f64
}

/// Per-category AP at every threshold, averaged with equal category weight,
/// then averaged over thresholds. Categories without ground truth are skipped.
pub fn fitap(dets: &[Detection], gts: &[GroundTruthBox], ladder: &ThresholdLadder) -> Result<EvalReport> {
    if gts.is_empty() {
        return Err(EvalError::NoGroundTruth);
    }
    let categories: BTreeSet<&str> = gts.iter().map(|g| g.category.as_str()).collect();
    for orphan in dets
        .iter()
        .map(|d| d.category.as_str())
        .filter(|c| !categories.contains(c))
        .collect::<BTreeSet<_>>()
    {
        log::warn!("ignoring detections for category {orphan:?} with no ground truth");
    }

    let mut per_category = BTreeMap::new();
    let mut curves = Vec::new();
    for &cat in &categories {
        let cat_dets: Vec<Detection> = dets.iter().filter(|d| d.category == cat).cloned().collect();
        let cat_gts: Vec<GroundTruthBox> = gts.iter().filter(|g| g.category == cat).cloned().collect();
        let mut aps = Vec::with_capacity(ladder.thresholds().len());
        for &theta in ladder.thresholds() {
            let labels: Vec<Outcome> = match_at_threshold(&cat_dets, &cat_gts, theta)
                .iter()
                .map(|m| m.outcome)
                .collect();
            let curve = pr_curve(&labels, cat_gts.len())?;
            let ap = average_precision(&curve);
            aps.push(ap);
            curves.push(CurveRecord {
                category: cat.to_owned(),
                theta,
                envelope: envelope(&curve),
                curve,
                ap,
            });
        }
        per_category.insert(
            cat.to_owned(),
            CategoryReport {
                n_gt: cat_gts.len(),
                n_det: cat_dets.len(),
                fitap: mean_ap(&aps),
                aps,
            },
        );
    }

    let per_threshold: Vec<ThresholdAp> = ladder
        .thresholds()
        .iter()
        .enumerate()
        .map(|(k, &theta)| {
            let cat_aps: Vec<f64> = per_category.values().map(|c| c.aps[k]).collect();
            ThresholdAp {
                theta,
                ap: mean_ap(&cat_aps),
            }
        })
        .collect();
    let fitap = mean_ap(&per_threshold.iter().map(|t| t.ap).collect::<Vec<_>>());
    Ok(EvalReport {
        per_threshold,
        fitap,
        per_category,
        curves,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AreaPair {
    pub gt_area: f64,
    pub det_area: f64,
    pub fit_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AreaCorrelation {
    /// GT area vs detection area.
    pub r_area: f64,
    /// GT area vs `A_box * IoU`.
    pub r_fit: f64,
    pub pairs: Vec<AreaPair>,
}

/// Correlates ground-truth area with detection area and with the fit score
/// over best-IoU pairs (detections overlapping no ground truth are dropped).
pub fn area_correlation_report(dets: &[Detection], gts: &[GroundTruthBox]) -> Result<AreaCorrelation> {
    let mut pairs = Vec::new();
    for det in dets {
        let best = gts
            .iter()
            .filter(|g| g.image_id == det.image_id && g.category == det.category)
            .map(|g| (g, iou(&det.bbox, &g.bbox)))
            .fold(None, |acc: Option<(&GroundTruthBox, f64)>, (g, v)| match acc {
                Some((_, b)) if b >= v => acc,
                _ => Some((g, v)),
            });
        if let Some((g, v)) = best.filter(|&(_, v)| v > 0.0) {
            pairs.push(AreaPair {
                gt_area: g.bbox.area(),
                det_area: det.bbox.area(),
                fit_score: det.bbox.area() * v,
            });
        }
    }
    if pairs.len() < 3 {
        return Err(EvalError::TooFewPairs(pairs.len()));
    }
    let gt: Vec<f64> = pairs.iter().map(|p| p.gt_area).collect();
    let area: Vec<f64> = pairs.iter().map(|p| p.det_area).collect();
    let fit: Vec<f64> = pairs.iter().map(|p| p.fit_score).collect();
    Ok(AreaCorrelation {
        r_area: stats::pearson(&gt, &area)?.r,
        r_fit: stats::pearson(&gt, &fit)?.r,
        pairs,
    })
}
