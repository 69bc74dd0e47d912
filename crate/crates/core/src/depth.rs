//! Monocular depth evaluation with per-frame median scaling.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub const DELTA_THRESHOLD: f64 = 1.25;

#[derive(Debug, Error)]
pub enum DepthError {
    #[error("prediction shape {pred:?} differs from ground truth {gt:?}")]
    ShapeMismatch { pred: Vec<usize>, gt: Vec<usize> },
    #[error("depth map must be H×W, got {0:?}")]
    NotTwoDimensional(Vec<usize>),
    #[error("no valid pixels")]
    EmptyFrame,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}:{line}: {detail}")]
    Manifest { path: String, line: usize, detail: String },
}

/// A prediction/GT pair of equal-shape depth maps. A pixel is valid when
/// both values are finite and positive.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthFrame {
    pub shape: Vec<usize>,
    pub pred: Vec<f64>,
    pub gt: Vec<f64>,
}

fn valid(p: f64, g: f64) -> bool {
    p.is_finite() && g.is_finite() && p > 0.0 && g > 0.0
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl DepthFrame {
    pub fn new(pred: Vec<f64>, gt: Vec<f64>) -> Result<Self, DepthError> {
        if pred.len() != gt.len() {
            return Err(DepthError::ShapeMismatch {
                pred: vec![pred.len()],
                gt: vec![gt.len()],
            });
        }
        Ok(Self {
            shape: vec![pred.len()],
            pred,
            gt,
        })
    }

    pub fn from_tensors(pred: &Tensor, gt: &Tensor) -> Result<Self, DepthError> {
        for t in [pred, gt] {
            if t.shape().len() != 2 {
                return Err(DepthError::NotTwoDimensional(t.shape().to_vec()));
            }
        }
        if pred.shape() != gt.shape() {
            return Err(DepthError::ShapeMismatch {
                pred: pred.shape().to_vec(),
                gt: gt.shape().to_vec(),
            });
        }
        Ok(Self {
            shape: pred.shape().to_vec(),
            pred: pred.to_f64_vec(),
            gt: gt.to_f64_vec(),
        })
    }

    pub fn valid_count(&self) -> usize {
        self.pred.iter().zip(&self.gt).filter(|(p, g)| valid(**p, **g)).count()
    }

    fn valid_pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.pred.iter().zip(&self.gt).map(|(p, g)| (*p, *g)).filter(|(p, g)| valid(*p, *g))
    }
}

/// `median(gt_valid) / median(pred_valid)`.
pub fn median_scale_factor(frame: &DepthFrame) -> Result<f64, DepthError> {
    let (p, g): (Vec<f64>, Vec<f64>) = frame.valid_pairs().unzip();
    if p.is_empty() {
        return Err(DepthError::EmptyFrame);
    }
    Ok(median(g) / median(p))
}

/// Frame with the prediction multiplied by its median scale factor.
pub fn median_scale(frame: &DepthFrame) -> Result<(DepthFrame, f64), DepthError> {
    let s = median_scale_factor(frame)?;
    let scaled = DepthFrame {
        shape: frame.shape.clone(),
        pred: frame.pred.iter().map(|p| p * s).collect(),
        gt: frame.gt.clone(),
    };
    Ok((scaled, s))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthScores {
    pub abs_rel: f64,
    pub delta1: f64,
    pub valid_pixels: usize,
}

/// AbsRel and δ₁ over valid pixels, without rescaling.
pub fn depth_metrics(frame: &DepthFrame) -> Result<DepthScores, DepthError> {
    let mut n = 0usize;
    let mut rel = 0.0;
    let mut hits = 0usize;
    for (p, g) in frame.valid_pairs() {
        n += 1;
        rel += (p - g).abs() / g;
        if (p / g).max(g / p) < DELTA_THRESHOLD {
            hits += 1;
        }
    }
    if n == 0 {
        return Err(DepthError::EmptyFrame);
    }
    Ok(DepthScores {
        abs_rel: rel / n as f64,
        delta1: hits as f64 / n as f64,
        valid_pixels: n,
    })
}

/// Median-scales the frame, then scores it.
pub fn evaluate_frame(frame: &DepthFrame) -> Result<(DepthScores, f64), DepthError> {
    let (scaled, s) = median_scale(frame)?;
    Ok((depth_metrics(&scaled)?, s))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub scene: String,
    pub image: String,
    pub pred_path: PathBuf,
    pub gt_path: PathBuf,
}

/// CSV `scene,image,pred_path,gt_path`; relative paths resolve against the
/// manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DepthError> {
    let p = path.display().to_string();
    let err = |line: usize, detail: String| DepthError::Manifest { path: p.clone(), line, detail };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| err(0, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["scene", "image", "pred_path", "gt_path"] {
        return Err(err(1, "expected header scene,image,pred_path,gt_path".into()));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| err(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 4 {
            return Err(err(line, "expected 4 fields".into()));
        }
        out.push(ManifestEntry {
            scene: rec[0].to_string(),
            image: rec[1].to_string(),
            pred_path: base.join(&rec[2]),
            gt_path: base.join(&rec[3]),
        });
    }
    Ok(out)
}
