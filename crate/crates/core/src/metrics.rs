//! Center-distance detection metrics: greedy matching, 101-point AP,
//! true-positive errors and the composite detection score.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::write_atomic;
use crate::error::{Error, Result};
use crate::geometry::Box3D;

pub const DIST_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Threshold at which true-positive errors are measured.
pub const TP_THRESHOLD: f64 = 2.0;
pub const MIN_RECALL: f64 = 0.1;
pub const MIN_PRECISION: f64 = 0.1;
pub const RECALL_POINTS: usize = 101;

/// One prediction's outcome, in descending score order.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchEntry {
    pub score: f64,
    pub sample: usize,
    pub pred: usize,
    /// `(sample, gt index)` of the matched ground truth.
    pub gt: Option<(usize, usize)>,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub class_id: usize,
    pub threshold: f64,
    pub n_gt: usize,
    pub entries: Vec<MatchEntry>,
}

impl MatchResult {
    pub fn tp_count(&self) -> usize {
        self.entries.iter().filter(|e| e.gt.is_some()).count()
    }
}

/// Greedy matching over a set of samples: predictions in descending score
/// order take the nearest unmatched same-class ground truth of their sample
/// when it lies within `threshold` (2D center distance).
pub fn match_predictions(preds: &[Vec<Box3D>], gts: &[Vec<Box3D>], threshold: f64, class_id: usize) -> MatchResult {
    let mut order: Vec<(f64, usize, usize)> = preds
        .iter()
        .enumerate()
        .flat_map(|(s, ps)| {
            ps.iter()
                .enumerate()
                .filter(|(_, p)| p.class_id == class_id)
                .map(move |(k, p)| (p.score.unwrap_or(0.0), s, k))
        })
        .collect();
    // stable: ties keep sample/prediction order
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let n_gt = gts.iter().flatten().filter(|g| g.class_id == class_id).count();
    let mut entries = Vec::with_capacity(order.len());
    for (score, s, k) in order {
        let p = &preds[s][k];
        let mut best: Option<(usize, f64)> = None;
        if let Some(cands) = gts.get(s) {
            for (j, gt) in cands.iter().enumerate() {
                if gt.class_id != class_id || taken[s][j] {
                    continue;
                }
                let d = p.center_distance_2d(gt);
                if best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
        }
        let (gt, distance) = match best {
            Some((j, d)) if d <= threshold => {
                taken[s][j] = true;
                (Some((s, j)), d)
            }
            Some((_, d)) => (None, d),
            None => (None, f64::INFINITY),
        };
        entries.push(MatchEntry {
            score,
            sample: s,
            pred: k,
            gt,
            distance,
        });
    }
    MatchResult {
        class_id,
        threshold,
        n_gt,
        entries,
    }
}

/// Precision on the 101-point recall grid `k / 100`: the best precision
/// reached at any recall >= the grid value, 0 past the final recall.
pub fn precision_curve(m: &MatchResult) -> Vec<f64> {
    let mut curve = vec![0.0; RECALL_POINTS];
    if m.n_gt == 0 {
        return curve;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(m.entries.len());
    for (i, e) in m.entries.iter().enumerate() {
        if e.gt.is_some() {
            tp += 1;
        }
        points.push((tp as f64 / m.n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut best = 0.0f64;
    let mut idx = points.len();
    for k in (0..RECALL_POINTS).rev() {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        while idx > 0 && points[idx - 1].0 >= r - 1e-12 {
            idx -= 1;
            best = best.max(points[idx].1);
        }
        curve[k] = best;
    }
    curve
}

/// AP from a precision curve: mean over grid recalls >= 0.1 of
/// `max(0, p - 0.1) / 0.9`.
pub fn ap_from_curve(curve: &[f64]) -> f64 {
    let first = (MIN_RECALL * (RECALL_POINTS - 1) as f64).round() as usize;
    let tail = &curve[first..];
    tail.iter()
        .map(|p| (p - MIN_PRECISION).max(0.0) / (1.0 - MIN_PRECISION))
        .sum::<f64>()
        / tail.len() as f64
}

/// `None` when the class has no ground truth.
pub fn average_precision(m: &MatchResult) -> Option<f64> {
    (m.n_gt > 0).then(|| ap_from_curve(&precision_curve(m)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
}

impl TpErrors {
    pub const UNMATCHED: TpErrors = TpErrors {
        ate: 1.0,
        ase: 1.0,
        aoe: 1.0,
    };

    pub fn as_array(&self) -> [f64; 3] {
        [self.ate, self.ase, self.aoe]
    }
}

/// `1 - IoU` of two boxes sharing center and yaw.
pub fn scale_error(a: &Box3D, b: &Box3D) -> f64 {
    let inter: f64 = (0..3).map(|k| a.size[k].min(b.size[k])).product();
    let va: f64 = a.size.iter().product();
    let vb: f64 = b.size.iter().product();
    1.0 - inter / (va + vb - inter)
}

/// Smallest absolute yaw difference, in `[0, pi]`.
pub fn yaw_error(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// Mean errors over the true positives of `m`; 1.0 each without matches.
pub fn tp_errors(m: &MatchResult, preds: &[Vec<Box3D>], gts: &[Vec<Box3D>]) -> TpErrors {
    let pairs: Vec<(&Box3D, &Box3D)> = m
        .entries
        .iter()
        .filter_map(|e| e.gt.map(|(s, j)| (&preds[e.sample][e.pred], &gts[s][j])))
        .collect();
    if pairs.is_empty() {
        return TpErrors::UNMATCHED;
    }
    let n = pairs.len() as f64;
    TpErrors {
        ate: pairs.iter().map(|(p, g)| p.center_distance_2d(g)).sum::<f64>() / n,
        ase: pairs.iter().map(|(p, g)| scale_error(p, g)).sum::<f64>() / n,
        aoe: pairs.iter().map(|(p, g)| yaw_error(p.yaw, g.yaw)).sum::<f64>() / n,
    }
}

/// `(5 mAP + sum_t (1 - min(1, err_t))) / (5 + T)`.
pub fn nds(map: f64, errors: &[f64]) -> f64 {
    let tp: f64 = errors.iter().map(|e| 1.0 - e.min(1.0)).sum();
    (5.0 * map + tp) / (5.0 + errors.len() as f64)
}

/// Running mean of each TP error against recall, one row per true positive.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurve {
    pub recall: Vec<f64>,
    pub ate: Vec<f64>,
    pub ase: Vec<f64>,
    pub aoe: Vec<f64>,
}

fn error_curve(m: &MatchResult, preds: &[Vec<Box3D>], gts: &[Vec<Box3D>]) -> ErrorCurve {
    let mut c = ErrorCurve::default();
    let (mut sa, mut ss, mut so) = (0.0, 0.0, 0.0);
    for e in &m.entries {
        let Some((s, j)) = e.gt else { continue };
        let (p, g) = (&preds[e.sample][e.pred], &gts[s][j]);
        sa += p.center_distance_2d(g);
        ss += scale_error(p, g);
        so += yaw_error(p.yaw, g.yaw);
        let n = c.recall.len() as f64 + 1.0;
        c.recall.push(n / m.n_gt as f64);
        c.ate.push(sa / n);
        c.ase.push(ss / n);
        c.aoe.push(so / n);
    }
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    pub n_gt: usize,
    /// AP per distance threshold; absent when the class has no ground truth.
    pub ap: Option<[f64; 4]>,
    pub mean_ap: Option<f64>,
    pub tp_errors: TpErrors,
    /// Precision on the 101-point recall grid, per threshold.
    pub pr_curves: Vec<Vec<f64>>,
    pub error_curve: ErrorCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub thresholds: Vec<f64>,
    pub classes: Vec<ClassReport>,
    pub map: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub nds: f64,
}

pub fn evaluate(model: &str, preds: &[Vec<Box3D>], gts: &[Vec<Box3D>], class_names: &[&str]) -> Result<MetricsReport> {
    if preds.len() != gts.len() {
        return Err(Error::Invalid(format!(
            "evaluate: {} prediction sets for {} samples",
            preds.len(),
            gts.len()
        )));
    }
    let mut classes = Vec::with_capacity(class_names.len());
    for (c, name) in class_names.iter().enumerate() {
        let matches: Vec<MatchResult> = DIST_THRESHOLDS
            .iter()
            .map(|&t| match_predictions(preds, gts, t, c))
            .collect();
        let n_gt = matches[0].n_gt;
        let pr_curves: Vec<Vec<f64>> = matches.iter().map(precision_curve).collect();
        let ap = (n_gt > 0).then(|| [0, 1, 2, 3].map(|k| ap_from_curve(&pr_curves[k])));
        let at_tp = matches
            .iter()
            .find(|m| m.threshold == TP_THRESHOLD)
            .expect("2 m is a matching threshold");
        classes.push(ClassReport {
            name: name.to_string(),
            n_gt,
            mean_ap: ap.map(|a| a.iter().sum::<f64>() / 4.0),
            ap,
            tp_errors: tp_errors(at_tp, preds, gts),
            pr_curves,
            error_curve: error_curve(at_tp, preds, gts),
        });
    }
    let present: Vec<&ClassReport> = classes.iter().filter(|c| c.mean_ap.is_some()).collect();
    let mean = |f: &dyn Fn(&ClassReport) -> f64, default: f64| {
        if present.is_empty() {
            default
        } else {
            present.iter().map(|c| f(c)).sum::<f64>() / present.len() as f64
        }
    };
    let map = mean(&|c| c.mean_ap.unwrap_or(0.0), 0.0);
    let mate = mean(&|c| c.tp_errors.ate, 1.0);
    let mase = mean(&|c| c.tp_errors.ase, 1.0);
    let maoe = mean(&|c| c.tp_errors.aoe, 1.0);
    Ok(MetricsReport {
        model: model.to_string(),
        thresholds: DIST_THRESHOLDS.to_vec(),
        classes,
        map,
        mate,
        mase,
        maoe,
        nds: nds(map, &[mate, mase, maoe]),
    })
}

impl MetricsReport {
    pub fn class_ap(&self, name: &str) -> Option<f64> {
        self.classes.iter().find(|c| c.name == name).and_then(|c| c.mean_ap)
    }

    pub fn csv_header(&self) -> String {
        let mut h = String::from("model,mAP,NDS,mATE,mASE,mAOE");
        for c in &self.classes {
            h.push_str(&format!(",AP_{}", c.name));
        }
        h
    }

    /// One row; absent class APs are left empty.
    pub fn csv_row(&self) -> String {
        let mut r = format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.model, self.map, self.nds, self.mate, self.mase, self.maoe
        );
        for c in &self.classes {
            match c.mean_ap {
                Some(a) => r.push_str(&format!(",{a:.6}")),
                None => r.push(','),
            }
        }
        r
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::Invalid(e.to_string()))?;
        write_atomic(&dir.join("report.json"), &json)?;
        let csv = format!("{}\n{}\n", self.csv_header(), self.csv_row());
        write_atomic(&dir.join("report.csv"), csv.as_bytes())
    }
}
