//! Center-distance detection metrics: per-class AP at several BEV distance
//! thresholds, true-positive errors at 2 m, and the NDS-lite composite.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::geom::{bev_center_distance, yaw_difference, Box3D};

pub const DIST_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Threshold at which true-positive errors are measured.
pub const TP_THRESHOLD: f64 = 2.0;
pub const RECALL_POINTS: usize = 101;
/// Translation errors are normalized by this distance in the composite.
pub const ATE_CAP: f64 = 4.0;

/// Predictions and ground truth of one scene.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Frame {
    pub preds: Vec<Box3D>,
    pub gts: Vec<Box3D>,
}

/// A prediction matched to a ground-truth box.
#[derive(Clone, Debug, PartialEq)]
pub struct Match {
    pub pred: Box3D,
    pub gt: Box3D,
}

struct Matched {
    /// Per prediction in score order: whether it is a true positive.
    tp: Vec<bool>,
    n_gt: usize,
    pairs: Vec<Match>,
}

/// Greedy matching over all frames for one class: predictions in descending
/// score order (ties keep input order) take the nearest unmatched ground
/// truth of their own frame within `thresh`.
fn greedy_match(frames: &[Frame], class_id: usize, thresh: f64) -> Matched {
    let mut preds: Vec<(usize, &Box3D)> = frames
        .iter()
        .enumerate()
        .flat_map(|(f, fr)| fr.preds.iter().filter(|b| b.class_id == class_id).map(move |b| (f, b)))
        .collect();
    preds.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let gts: Vec<Vec<&Box3D>> = frames
        .iter()
        .map(|fr| fr.gts.iter().filter(|b| b.class_id == class_id).collect())
        .collect();
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(preds.len());
    let mut pairs = Vec::new();
    for (f, p) in preds {
        let best = gts[f]
            .iter()
            .enumerate()
            .filter(|(j, _)| !taken[f][*j])
            .map(|(j, g)| (j, bev_center_distance(p, g)))
            .filter(|&(_, d)| d <= thresh)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((j, _)) => {
                taken[f][j] = true;
                tp.push(true);
                pairs.push(Match {
                    pred: p.clone(),
                    gt: gts[f][j].clone(),
                });
            }
            None => tp.push(false),
        }
    }
    Matched {
        tp,
        n_gt: gts.iter().map(Vec::len).sum(),
        pairs,
    }
}

/// Area under the 101-point interpolated precision-recall curve.
fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut curve = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        curve.push((hits as f64 / n_gt as f64, hits as f64 / (i + 1) as f64));
    }
    // Interpolated precision: best precision at any recall >= r.
    let mut best_from = vec![0.0f64; curve.len() + 1];
    for i in (0..curve.len()).rev() {
        best_from[i] = best_from[i + 1].max(curve[i].1);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for step in 0..RECALL_POINTS {
        let r = step as f64 / (RECALL_POINTS - 1) as f64;
        while k < curve.len() && curve[k].0 < r - 1e-12 {
            k += 1;
        }
        sum += best_from[k];
    }
    sum / RECALL_POINTS as f64
}

/// AP of one class at one threshold; `None` when the class has neither
/// predictions nor ground truth.
pub fn match_and_ap(frames: &[Frame], class_id: usize, thresh: f64) -> Option<f64> {
    let m = greedy_match(frames, class_id, thresh);
    if m.tp.is_empty() && m.n_gt == 0 {
        return None;
    }
    Some(average_precision(&m.tp, m.n_gt))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
}

impl TpErrors {
    pub const WORST: TpErrors = TpErrors {
        ate: 1.0,
        ase: 1.0,
        aoe: 1.0,
    };
}

/// 1 - IoU of the two boxes after aligning centers and headings.
pub fn scale_error(a: &Box3D, b: &Box3D) -> f64 {
    let inter: f64 = (0..3).map(|i| a.size[i].min(b.size[i])).product();
    let va: f64 = a.size.iter().product();
    let vb: f64 = b.size.iter().product();
    1.0 - inter / (va + vb - inter)
}

/// Mean translation, scale and orientation errors; all 1.0 when empty.
pub fn tp_error_metrics(matches: &[Match]) -> TpErrors {
    if matches.is_empty() {
        return TpErrors::WORST;
    }
    let n = matches.len() as f64;
    TpErrors {
        ate: matches.iter().map(|m| bev_center_distance(&m.pred, &m.gt)).sum::<f64>() / n,
        ase: matches.iter().map(|m| scale_error(&m.pred, &m.gt)).sum::<f64>() / n,
        aoe: matches
            .iter()
            .map(|m| yaw_difference(m.pred.yaw, m.gt.yaw))
            .sum::<f64>()
            / n,
    }
}

/// `(3 mAP + sum of clipped complements of normalized errors) / 6`.
pub fn composite_score(map: f64, e: &TpErrors) -> f64 {
    let term = |x: f64| (1.0 - x).max(0.0);
    (3.0 * map + term(e.ate / ATE_CAP) + term(e.ase) + term(e.aoe / PI)) / 6.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    /// AP per threshold in [`DIST_THRESHOLDS`] order; `None` if undefined.
    pub ap: Vec<Option<f64>>,
    pub errors: TpErrors,
    pub matches: usize,
    pub gts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub nds_lite: f64,
    #[serde(rename = "mATE")]
    pub mate: f64,
    #[serde(rename = "mASE")]
    pub mase: f64,
    #[serde(rename = "mAOE")]
    pub maoe: f64,
    pub per_class: BTreeMap<String, ClassResult>,
}

/// Full metric set. Means run over defined APs and over classes present in
/// predictions or ground truth; with nothing to score, mAP is 0 and errors
/// take their worst value.
pub fn evaluate(frames: &[Frame], class_names: &[&str]) -> EvalResult {
    let mut per_class = BTreeMap::new();
    let mut aps = Vec::new();
    let mut errs = Vec::new();
    for (k, name) in class_names.iter().enumerate() {
        let ap: Vec<Option<f64>> = DIST_THRESHOLDS.iter().map(|&t| match_and_ap(frames, k, t)).collect();
        let m = greedy_match(frames, k, TP_THRESHOLD);
        let errors = tp_error_metrics(&m.pairs);
        if ap.iter().any(Option::is_some) {
            errs.push(errors);
        }
        aps.extend(ap.iter().flatten().copied());
        per_class.insert(
            name.to_string(),
            ClassResult {
                ap,
                errors,
                matches: m.pairs.len(),
                gts: m.n_gt,
            },
        );
    }
    let mean = |v: &[f64], empty: f64| {
        if v.is_empty() {
            empty
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let map = mean(&aps, 0.0);
    let e = TpErrors {
        ate: mean(&errs.iter().map(|e| e.ate).collect::<Vec<_>>(), 1.0),
        ase: mean(&errs.iter().map(|e| e.ase).collect::<Vec<_>>(), 1.0),
        aoe: mean(&errs.iter().map(|e| e.aoe).collect::<Vec<_>>(), 1.0),
    };
    EvalResult {
        map,
        nds_lite: composite_score(map, &e),
        mate: e.ate,
        mase: e.ase,
        maoe: e.aoe,
        per_class,
    }
}
