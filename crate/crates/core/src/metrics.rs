//! MPJPE, Stress and relative 3-D error, with the per-frame depth-flip protocol.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mpjpe,
    Stress,
    E3d,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Mpjpe, Metric::Stress, Metric::E3d];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Mpjpe => "mpjpe",
            Metric::Stress => "stress",
            Metric::E3d => "e3d",
        }
    }

    pub fn eval(self, pred: &DMatrix<f64>, gt: &DMatrix<f64>) -> Result<f64> {
        match self {
            Metric::Mpjpe => mpjpe(pred, gt),
            Metric::Stress => stress(pred, gt),
            Metric::E3d => e3d(pred, gt),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown metric {s:?}")))
    }
}

fn check_pair(op: &'static str, pred: &DMatrix<f64>, gt: &DMatrix<f64>) -> Result<()> {
    if pred.shape() != gt.shape() || pred.nrows() != 3 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: pred.shape(),
            rhs: gt.shape(),
        });
    }
    Ok(())
}

/// Mean Euclidean joint error.
pub fn mpjpe(pred: &DMatrix<f64>, gt: &DMatrix<f64>) -> Result<f64> {
    check_pair("mpjpe", pred, gt)?;
    let p = pred.ncols();
    if p == 0 {
        return Err(Error::InvalidArgument("mpjpe of zero joints".into()));
    }
    Ok((pred - gt).column_iter().map(|c| c.norm()).sum::<f64>() / p as f64)
}

/// Pairwise-distance discrepancy over `j < k`, divided by `P(P-1)`.
pub fn stress(pred: &DMatrix<f64>, gt: &DMatrix<f64>) -> Result<f64> {
    check_pair("stress", pred, gt)?;
    let p = pred.ncols();
    if p < 2 {
        return Err(Error::InvalidArgument(format!(
            "stress needs at least 2 joints, got {p}"
        )));
    }
    let mut sum = 0.0;
    for j in 0..p {
        for k in j + 1..p {
            let dp = (pred.column(j) - pred.column(k)).norm();
            let dg = (gt.column(j) - gt.column(k)).norm();
            sum += (dp - dg).abs();
        }
    }
    Ok(sum / (p * (p - 1)) as f64)
}

/// `||pred - gt||_F / ||gt||_F`.
pub fn e3d(pred: &DMatrix<f64>, gt: &DMatrix<f64>) -> Result<f64> {
    check_pair("e3d", pred, gt)?;
    let n = gt.norm();
    if n == 0.0 {
        return Err(Error::InvalidArgument(
            "e3d against an all-zero ground truth".into(),
        ));
    }
    Ok((pred - gt).norm() / n)
}

/// Negates the depth row.
pub fn flip_depth(frame: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = frame.clone();
    out.row_mut(2).neg_mut();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub metric: Metric,
    pub per_frame: Vec<f64>,
    pub mean: f64,
    /// Fraction of frames where the depth-flipped prediction scored strictly lower.
    pub flip_ratio: Option<f64>,
}

/// Scores each frame, optionally keeping the better of the prediction and its depth flip.
pub fn depth_flip_eval(
    pred: &[DMatrix<f64>],
    gt: &[DMatrix<f64>],
    metric: Metric,
    flip: bool,
) -> Result<MetricSeries> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predicted frames vs {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("no frames to evaluate".into()));
    }
    let mut per_frame = Vec::with_capacity(pred.len());
    let mut flips = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        let plain = metric.eval(p, g)?;
        if flip {
            let flipped = metric.eval(&flip_depth(p), g)?;
            if flipped < plain {
                flips += 1;
                per_frame.push(flipped);
                continue;
            }
        }
        per_frame.push(plain);
    }
    let mean = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    Ok(MetricSeries {
        metric,
        per_frame,
        mean,
        flip_ratio: flip.then(|| flips as f64 / pred.len() as f64),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub frames: usize,
    pub points: usize,
    pub chunks: usize,
    pub flip: bool,
    pub metrics: Vec<MetricSeries>,
    /// `RMS(W - proj) / RMS(W)` over all evaluated frames.
    pub reprojection_rmse: f64,
}

impl EvalReport {
    pub fn mean(&self, metric: Metric) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.metric == metric)
            .map(|m| m.mean)
    }
}
