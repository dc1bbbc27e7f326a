//! Position errors in millimeters and PCK area under the curve.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{procrustes_align, Vec3};
use crate::hand::ROOT_JOINT;

/// Steps of the trapezoidal PCK integral.
pub const AUC_STEPS: usize = 100;

fn check(pred: &[Vec3], gt: &[Vec3]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::shape("metric", &[pred.len(), 3], &[gt.len(), 3]));
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("metric over zero points".into()));
    }
    Ok(())
}

/// Per-point Euclidean errors in millimeters.
pub fn point_errors(pred: &[Vec3], gt: &[Vec3]) -> Result<Vec<f64>> {
    check(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).norm() * 1000.0).collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean per-point position error in millimeters (MPJPE over joints, MPVPE over vertices).
pub fn mpjpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    Ok(mean(&point_errors(pred, gt)?))
}

fn recentered(points: &[Vec3], root: &Vec3) -> Vec<Vec3> {
    points.iter().map(|p| p - root).collect()
}

/// Root-relative errors: both sets re-centered on their own root before comparison.
pub fn rr_errors(pred: &[Vec3], gt: &[Vec3], pred_root: &Vec3, gt_root: &Vec3) -> Result<Vec<f64>> {
    point_errors(&recentered(pred, pred_root), &recentered(gt, gt_root))
}

/// Root-relative MPJPE over 21 joints, re-centered on `root_index`.
pub fn rr(pred: &[Vec3], gt: &[Vec3], root_index: usize) -> Result<f64> {
    check(pred, gt)?;
    if root_index >= pred.len() {
        return Err(Error::InvalidInput(format!("root index {root_index} out of {} points", pred.len())));
    }
    Ok(mean(&rr_errors(pred, gt, &pred[root_index], &gt[root_index])?))
}

/// Errors after similarity (Procrustes) alignment of `pred` onto `gt`.
pub fn pa_errors(pred: &[Vec3], gt: &[Vec3]) -> Result<Vec<f64>> {
    check(pred, gt)?;
    let aligned = procrustes_align(pred, gt)?.aligned;
    point_errors(&aligned, gt)
}

pub fn pa(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    Ok(mean(&pa_errors(pred, gt)?))
}

/// Normalized area under PCK(t) for `t` in `[lo, hi]` mm, trapezoidal over `n_steps` intervals.
pub fn auc(errors: &[f64], lo: f64, hi: f64, n_steps: usize) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::InvalidInput("AUC of an empty error list".into()));
    }
    if !(hi > lo && lo >= 0.0) || n_steps == 0 {
        return Err(Error::InvalidInput(format!("AUC range [{lo}, {hi}] with {n_steps} steps")));
    }
    let n = errors.len() as f64;
    let pck = |t: f64| errors.iter().filter(|&&e| e <= t).count() as f64 / n;
    let h = (hi - lo) / n_steps as f64;
    let values: Vec<f64> = (0..=n_steps).map(|i| pck(lo + h * i as f64)).collect();
    // Trapezoid rule with the interval width factored out of the normalization.
    let inner: f64 = values.iter().sum::<f64>() - 0.5 * (values[0] + values[n_steps]);
    Ok(inner / n_steps as f64)
}

/// Dataset-level summary; errors in millimeters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mpvpe: f64,
    pub rr_v: f64,
    pub pa_v: f64,
    pub auc_v: f64,
    pub mpjpe: f64,
    pub rr_j: f64,
    pub pa_j: f64,
    pub auc_j: f64,
    pub threshold_range: (f64, f64),
    pub n_frames: usize,
}

/// Metrics of one frame; AUC is computed per frame then averaged.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMetrics {
    pub mpvpe: f64,
    pub rr_v: f64,
    pub pa_v: f64,
    pub auc_v: f64,
    pub mpjpe: f64,
    pub rr_j: f64,
    pub pa_j: f64,
    pub auc_j: f64,
}

/// Scores one frame. Root-relative vertex errors re-center on the root joint too.
pub fn frame_metrics(
    pred_vertices: &[Vec3],
    pred_joints: &[Vec3],
    gt_vertices: &[Vec3],
    gt_joints: &[Vec3],
    range: (f64, f64),
) -> Result<FrameMetrics> {
    check(pred_joints, gt_joints)?;
    let (pr, gr) = (&pred_joints[ROOT_JOINT], &gt_joints[ROOT_JOINT]);
    let ej = point_errors(pred_joints, gt_joints)?;
    let ev = point_errors(pred_vertices, gt_vertices)?;
    Ok(FrameMetrics {
        mpvpe: mean(&ev),
        rr_v: mean(&rr_errors(pred_vertices, gt_vertices, pr, gr)?),
        pa_v: pa(pred_vertices, gt_vertices)?,
        auc_v: auc(&ev, range.0, range.1, AUC_STEPS)?,
        mpjpe: mean(&ej),
        rr_j: mean(&rr_errors(pred_joints, gt_joints, pr, gr)?),
        pa_j: pa(pred_joints, gt_joints)?,
        auc_j: auc(&ej, range.0, range.1, AUC_STEPS)?,
    })
}

impl EvalReport {
    pub fn from_frames(frames: &[FrameMetrics], range: (f64, f64)) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidInput("evaluation over zero frames".into()));
        }
        let avg = |f: fn(&FrameMetrics) -> f64| frames.iter().map(f).sum::<f64>() / frames.len() as f64;
        Ok(Self {
            mpvpe: avg(|m| m.mpvpe),
            rr_v: avg(|m| m.rr_v),
            pa_v: avg(|m| m.pa_v),
            auc_v: avg(|m| m.auc_v),
            mpjpe: avg(|m| m.mpjpe),
            rr_j: avg(|m| m.rr_j),
            pa_j: avg(|m| m.pa_j),
            auc_j: avg(|m| m.auc_j),
            threshold_range: range,
            n_frames: frames.len(),
        })
    }

    pub const COLUMNS: [&'static str; 8] = ["MPVPE", "RR_V", "PA_V", "AUC_V", "MPJPE", "RR_J", "PA_J", "AUC_J"];

    /// Fixed-column text table: header row then one value row.
    pub fn table(&self) -> String {
        let vals = [
            self.mpvpe, self.rr_v, self.pa_v, self.auc_v, self.mpjpe, self.rr_j, self.pa_j, self.auc_j,
        ];
        let head: Vec<String> = Self::COLUMNS.iter().map(|c| format!("{c:>8}")).collect();
        let row: Vec<String> = vals
            .iter()
            .enumerate()
            .map(|(i, v)| if i % 4 == 3 { format!("{v:>8.3}") } else { format!("{v:>8.2}") })
            .collect();
        format!("{}\n{}\n", head.join(" "), row.join(" "))
    }
}
