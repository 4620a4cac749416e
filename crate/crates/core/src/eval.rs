//! Pose-error metrics, buffer reprojection statistics, the radius-ablation
//! score and report emission.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{reprojection_residual, Pose};
use crate::sampler::TrainingBuffer;
use crate::scr_head::{HeadError, ScrHead};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no successfully localized frames")]
    NoSuccessfulFrames,
    #[error("ablation errors must be finite and positive (sequence {sequence}, radius {radius})")]
    NonPositiveError { sequence: usize, radius: usize },
    #[error("ablation matrix is empty or ragged")]
    BadShape,
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub rotation_deg: f64,
    pub translation: f64,
}

/// Rotation angle of `R_gtᵀ R_est` and distance between camera centres.
pub fn pose_error(est: &Pose, gt: &Pose) -> PoseError {
    let r_rel = gt.rotation_matrix().transpose() * est.rotation_matrix();
    let c = ((r_rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    PoseError {
        rotation_deg: c.acos().to_degrees(),
        translation: (est.camera_center() - gt.camera_center()).norm(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    /// Errors of the successfully localized frames.
    pub errors: Vec<PoseError>,
    pub failures: usize,
}

impl SequenceResult {
    pub fn frames(&self) -> usize {
        self.errors.len() + self.failures
    }
}

/// Median with the even-count rule (mean of the middle pair).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Median rotation (degrees) and translation over successful frames.
pub fn median_errors(results: &SequenceResult) -> Result<(f64, f64), EvalError> {
    let rot: Vec<f64> = results.errors.iter().map(|e| e.rotation_deg).collect();
    let trans: Vec<f64> = results.errors.iter().map(|e| e.translation).collect();
    match (median(&rot), median(&trans)) {
        (Some(r), Some(t)) => Ok((r, t)),
        _ => Err(EvalError::NoSuccessfulFrames),
    }
}

/// Fraction of all frames (failures included) under both thresholds.
pub fn accuracy(results: &SequenceResult, rot_thresh_deg: f64, trans_thresh: f64) -> f64 {
    let frames = results.frames();
    if frames == 0 {
        return 0.0;
    }
    let good = results
        .errors
        .iter()
        .filter(|e| e.rotation_deg < rot_thresh_deg && e.translation < trans_thresh)
        .count();
    good as f64 / frames as f64
}

pub const DEFAULT_ROT_THRESH_DEG: f64 = 5.0;
pub const DEFAULT_TRANS_THRESH: f64 = 0.05;

/// Unclamped reprojection error of every instance of `buffer` under `head`.
/// Predictions behind the camera count as the frame diagonal.
pub fn buffer_reprojection_errors(head: &ScrHead, buffer: &TrainingBuffer) -> Result<Vec<f64>, EvalError> {
    let descriptors: Vec<_> = buffer.instances.iter().map(|i| i.descriptor.clone()).collect();
    let preds = head.predict_batch(&descriptors)?;
    Ok(buffer
        .instances
        .iter()
        .zip(preds)
        .map(|(inst, x)| {
            reprojection_residual(&x, &inst.pixel, &inst.intrinsics, &inst.pose)
                .unwrap_or_else(|| inst.intrinsics.diagonal())
        })
        .collect())
}

/// (mean, median) of [`buffer_reprojection_errors`].
pub fn buffer_reprojection_stats(head: &ScrHead, buffer: &TrainingBuffer) -> Result<(f64, f64), EvalError> {
    let errs = buffer_reprojection_errors(head, buffer)?;
    let Some(med) = median(&errs) else {
        return Ok((0.0, 0.0));
    };
    Ok((errs.iter().sum::<f64>() / errs.len() as f64, med))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spread {
    #[default]
    Population,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationScore {
    pub radii: Vec<f64>,
    /// Per-sequence errors divided by the sequence minimum.
    pub normalized: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    pub argmin: usize,
}

impl AblationScore {
    pub fn best_radius(&self) -> f64 {
        self.radii[self.argmin]
    }
}

/// Normalizes each sequence by its minimum error, then scores each radius by
/// mean plus one standard deviation across sequences. Ties go to the first
/// (smallest) radius.
pub fn rho_ablation_aggregate(
    errors: &[Vec<f64>],
    radii: &[f64],
    spread: Spread,
) -> Result<AblationScore, EvalError> {
    let n_r = radii.len();
    if errors.is_empty() || n_r == 0 || errors.iter().any(|row| row.len() != n_r) {
        return Err(EvalError::BadShape);
    }
    for (s, row) in errors.iter().enumerate() {
        if let Some(r) = row.iter().position(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(EvalError::NonPositiveError { sequence: s, radius: r });
        }
    }
    let normalized: Vec<Vec<f64>> = errors
        .iter()
        .map(|row| {
            let m = row.iter().copied().fold(f64::INFINITY, f64::min);
            row.iter().map(|e| e / m).collect()
        })
        .collect();
    let n_s = errors.len() as f64;
    let scores: Vec<f64> = (0..n_r)
        .map(|r| {
            let col: Vec<f64> = normalized.iter().map(|row| row[r]).collect();
            let mean = col.iter().sum::<f64>() / n_s;
            let ss: f64 = col.iter().map(|x| (x - mean).powi(2)).sum();
            let denom = match spread {
                Spread::Population => n_s,
                Spread::Sample => (n_s - 1.0).max(1.0),
            };
            mean + (ss / denom).sqrt()
        })
        .collect();
    let mut argmin = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s < scores[argmin] {
            argmin = i;
        }
    }
    Ok(AblationScore {
        radii: radii.to_vec(),
        normalized,
        scores,
        argmin,
    })
}

/// One report line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub sequence: String,
    /// Empty for the random strategy.
    pub rho: Option<f64>,
    pub strategy: String,
    pub median_rot_deg: Option<f64>,
    pub median_trans: Option<f64>,
    pub accuracy: f64,
    pub mean_reproj_px: f64,
    pub median_reproj_px: f64,
    pub frames: usize,
    pub failures: usize,
}

impl ReportRow {
    pub fn new(
        sequence: impl Into<String>,
        rho: Option<f64>,
        strategy: impl Into<String>,
        result: &SequenceResult,
        reproj: (f64, f64),
    ) -> Self {
        let med = median_errors(result).ok();
        Self {
            sequence: sequence.into(),
            rho,
            strategy: strategy.into(),
            median_rot_deg: med.map(|m| m.0),
            median_trans: med.map(|m| m.1),
            accuracy: accuracy(result, DEFAULT_ROT_THRESH_DEG, DEFAULT_TRANS_THRESH),
            mean_reproj_px: reproj.0,
            median_reproj_px: reproj.1,
            frames: result.frames(),
            failures: result.failures,
        }
    }
}

pub const CSV_HEADER: &str =
    "sequence,rho,strategy,median_rot_deg,median_trans,accuracy,mean_reproj_px,median_reproj_px,frames,failures";

pub fn write_csv(rows: &[ReportRow], w: impl Write) -> Result<(), EvalError> {
    let mut wr = csv::Writer::from_writer(w);
    if rows.is_empty() {
        wr.write_record(CSV_HEADER.split(','))?;
    }
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_csv(r: impl std::io::Read) -> Result<Vec<ReportRow>, EvalError> {
    let mut rd = csv::Reader::from_reader(r);
    Ok(rd.deserialize().collect::<Result<_, _>>()?)
}
