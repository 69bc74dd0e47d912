//! Relative-pose evaluation: per-pair rotation/translation errors against
//! curated pairs, and MRE / RA / MTE / TA / AUC aggregates with per-category
//! buckets.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pairs::{ImagePair, OverlapCategory};
use crate::so3::{geodesic_deg, relative_rotation, translation_angle_deg, RotationSO3, Translation3, UnitQuaternion};

pub const DEFAULT_THRESHOLDS: [f64; 2] = [15.0, 30.0];
pub const DEFAULT_AUC_MAX: u32 = 30;

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("no records to summarize")]
    EmptyInput,
    #[error("record {0} has no translation error")]
    MissingTranslation(usize),
    #[error("invalid threshold {0}")]
    BadThreshold(f64),
    #[error("prediction for ({scene}, {a}, {b}) does not reference the pair")]
    PairMismatch { scene: String, a: u32, b: u32 },
    #[error("degenerate predicted quaternion for ({scene}, {a}, {b})")]
    DegenerateQuaternion { scene: String, a: u32, b: u32 },
    #[error("{} pairs have no prediction, first: {}", .0.len(), .0[0])]
    Unmatched(Vec<PairKey>),
    #[error("{} malformed prediction rows, first: {}", .0.len(), .0[0])]
    Rows(Vec<RowError>),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairKey {
    pub scene: String,
    pub image_a: u32,
    pub image_b: u32,
}

impl std::fmt::Display for PairKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}-{}", self.scene, self.image_a, self.image_b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowError {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for RowError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

/// Predicted absolute world→camera poses for both images of a pair, in the
/// prediction's own frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairPrediction {
    pub scene: String,
    pub image_a: u32,
    pub image_b: u32,
    pub qa: [f64; 4],
    pub ta: [f64; 3],
    pub qb: [f64; 4],
    pub tb: [f64; 3],
}

impl PairPrediction {
    /// Canonical key with `image_a < image_b`.
    pub fn key(&self) -> PairKey {
        PairKey {
            scene: self.scene.clone(),
            image_a: self.image_a.min(self.image_b),
            image_b: self.image_a.max(self.image_b),
        }
    }

    fn check(&self) -> Result<(), String> {
        if self.image_a == self.image_b {
            return Err("image_a equals image_b".into());
        }
        let finite = self.qa.iter().chain(&self.qb).chain(&self.ta).chain(&self.tb).all(|v| v.is_finite());
        if !finite {
            return Err("non-finite pose value".into());
        }
        for q in [self.qa, self.qb] {
            if UnitQuaternion::from_array(q).normalized().is_err() {
                return Err(format!("zero-norm quaternion {q:?}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExcludedReason {
    DegeneratePrediction,
    DegenerateGroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorRecord {
    pub key: PairKey,
    pub category: OverlapCategory,
    pub rot_err: f64,
    pub trans_err: Option<f64>,
    pub excluded_reason: Option<ExcludedReason>,
}

/// `(R_b R_aᵀ, t_b − R_rel t_a)` from absolute world→camera poses.
pub fn relative_pose(ra: &RotationSO3, ta: &Translation3, rb: &RotationSO3, tb: &Translation3) -> (RotationSO3, Translation3) {
    let r_rel = relative_rotation(ra, rb);
    let t_rel = tb.0 - r_rel.matrix() * ta.0;
    (r_rel, Translation3(t_rel))
}

pub fn pair_errors(pred: &PairPrediction, gt: &ImagePair) -> Result<PoseErrorRecord, PoseError> {
    let key = PairKey {
        scene: gt.scene_id.clone(),
        image_a: gt.image_a,
        image_b: gt.image_b,
    };
    let mismatch = || PoseError::PairMismatch {
        scene: pred.scene.clone(),
        a: pred.image_a,
        b: pred.image_b,
    };
    if pred.scene != gt.scene_id {
        return Err(mismatch());
    }
    // predictions may list the pair in either order
    let (qa, ta, qb, tb) = if (pred.image_a, pred.image_b) == (gt.image_a, gt.image_b) {
        (pred.qa, pred.ta, pred.qb, pred.tb)
    } else if (pred.image_b, pred.image_a) == (gt.image_a, gt.image_b) {
        (pred.qb, pred.tb, pred.qa, pred.ta)
    } else {
        return Err(mismatch());
    };
    let degenerate = || PoseError::DegenerateQuaternion {
        scene: pred.scene.clone(),
        a: pred.image_a,
        b: pred.image_b,
    };
    let ra = UnitQuaternion::from_array(qa).to_rotation().map_err(|_| degenerate())?;
    let rb = UnitQuaternion::from_array(qb).to_rotation().map_err(|_| degenerate())?;
    let (r_pred, t_pred) = relative_pose(&ra, &Translation3::from(ta), &rb, &Translation3::from(tb));
    let rot_err = geodesic_deg(&r_pred, &gt.r_rel_gt);
    let (trans_err, excluded_reason) = if gt.t_rel_gt.norm() < crate::so3::MIN_TRANSLATION_NORM || !gt.t_rel_gt.is_finite() {
        (None, Some(ExcludedReason::DegenerateGroundTruth))
    } else {
        match translation_angle_deg(&t_pred, &gt.t_rel_gt) {
            Ok(e) => (Some(e), None),
            Err(_) => (None, Some(ExcludedReason::DegeneratePrediction)),
        }
    };
    Ok(PoseErrorRecord {
        key,
        category: gt.category,
        rot_err,
        trans_err,
        excluded_reason,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub threshold: f64,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n_pairs: usize,
    pub n_excluded: usize,
    pub mre: f64,
    pub ra: Vec<Accuracy>,
    pub mte: Option<f64>,
    pub ta: Option<Vec<Accuracy>>,
    pub auc: Option<f64>,
}

impl MetricSummary {
    pub fn ra_at(&self, threshold: f64) -> Option<f64> {
        self.ra.iter().find(|a| a.threshold == threshold).map(|a| a.fraction)
    }

    pub fn ta_at(&self, threshold: f64) -> Option<f64> {
        self.ta.as_ref()?.iter().find(|a| a.threshold == threshold).map(|a| a.fraction)
    }
}

/// Median of an ascending slice; even counts average the middle two.
fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn accuracies(sorted: &[f64], thresholds: &[f64]) -> Vec<Accuracy> {
    thresholds
        .iter()
        .map(|&t| Accuracy {
            threshold: t,
            fraction: sorted.partition_point(|&e| e < t) as f64 / sorted.len() as f64,
        })
        .collect()
}

fn check_thresholds(thresholds: &[f64]) -> Result<(), PoseError> {
    match thresholds.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        Some(t) => Err(PoseError::BadThreshold(*t)),
        None => Ok(()),
    }
}

/// Aggregates per-pair errors. Inputs are sorted first, so the result does
/// not depend on record order.
pub fn summarize(records: &[PoseErrorRecord], thresholds: &[f64]) -> Result<MetricSummary, PoseError> {
    summarize_with(records, thresholds, DEFAULT_AUC_MAX)
}

pub fn summarize_with(records: &[PoseErrorRecord], thresholds: &[f64], auc_max: u32) -> Result<MetricSummary, PoseError> {
    if records.is_empty() {
        return Err(PoseError::EmptyInput);
    }
    check_thresholds(thresholds)?;
    let mut rot: Vec<f64> = records.iter().map(|r| r.rot_err).collect();
    rot.sort_by(f64::total_cmp);
    let mut trans: Vec<f64> = records.iter().filter_map(|r| r.trans_err).collect();
    trans.sort_by(f64::total_cmp);
    let with_trans: Vec<PoseErrorRecord> = records.iter().filter(|r| r.trans_err.is_some()).cloned().collect();
    let (mte, ta, auc) = if trans.is_empty() {
        (None, None, None)
    } else {
        (
            Some(median_sorted(&trans)),
            Some(accuracies(&trans, thresholds)),
            Some(auc_at(&with_trans, auc_max)?),
        )
    };
    Ok(MetricSummary {
        n_pairs: records.len(),
        n_excluded: records.iter().filter(|r| r.excluded_reason.is_some()).count(),
        mre: median_sorted(&rot),
        ra: accuracies(&rot, thresholds),
        mte,
        ta,
        auc,
    })
}

/// Mean over integer thresholds `τ = 1..=tau_max` of the fraction of records
/// whose `max(rot_err, trans_err) < τ`.
pub fn auc_at(records: &[PoseErrorRecord], tau_max: u32) -> Result<f64, PoseError> {
    if records.is_empty() {
        return Err(PoseError::EmptyInput);
    }
    if tau_max == 0 {
        return Err(PoseError::BadThreshold(0.0));
    }
    let mut worst = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let t = r.trans_err.ok_or(PoseError::MissingTranslation(i))?;
        worst.push(r.rot_err.max(t));
    }
    worst.sort_by(f64::total_cmp);
    let hits: u64 = (1..=tau_max)
        .map(|tau| worst.partition_point(|&e| e < tau as f64) as u64)
        .sum();
    Ok(hits as f64 / (worst.len() as f64 * tau_max as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub thresholds: Vec<f64>,
    pub auc_max: u32,
    /// Proceed past malformed rows and missing pairs instead of failing.
    pub permissive: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            auc_max: DEFAULT_AUC_MAX,
            permissive: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseReport {
    /// `all`, `large`, `small`, `none`; an empty bucket maps to null.
    pub buckets: BTreeMap<String, Option<MetricSummary>>,
    pub unmatched: Vec<PairKey>,
    pub row_errors: Vec<RowError>,
    /// Predictions whose key is not in the pair set.
    pub unexpected: Vec<PairKey>,
    pub records: Vec<PoseErrorRecord>,
}

/// Parsed prediction rows plus per-line failures.
#[derive(Clone, Debug, Default)]
pub struct PredictionSet {
    pub rows: Vec<(usize, PairPrediction)>,
    pub errors: Vec<RowError>,
}

pub fn parse_predictions<R: BufRead>(reader: R) -> std::io::Result<PredictionSet> {
    let mut set = PredictionSet::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let n = i + 1;
        match serde_json::from_str::<PairPrediction>(&line) {
            Ok(p) => match p.check() {
                Ok(()) => set.rows.push((n, p)),
                Err(message) => set.errors.push(RowError { line: n, message }),
            },
            Err(e) => set.errors.push(RowError { line: n, message: e.to_string() }),
        }
    }
    Ok(set)
}

pub fn read_predictions(path: &Path) -> Result<PredictionSet, PoseError> {
    let io = |source| PoseError::Io {
        path: path.display().to_string(),
        source,
    };
    let f = std::fs::File::open(path).map_err(io)?;
    parse_predictions(std::io::BufReader::new(f)).map_err(io)
}

/// Evaluates every pair against its prediction. Records keep the pair
/// order of `pairs`; summaries are order-independent.
pub fn evaluate_pairs(pairs: &[ImagePair], preds: &PredictionSet, opts: &EvalOptions) -> Result<PoseReport, PoseError> {
    check_thresholds(&opts.thresholds)?;
    let mut row_errors = preds.errors.clone();
    let mut by_key: HashMap<PairKey, &PairPrediction> = HashMap::with_capacity(preds.rows.len());
    for (line, p) in &preds.rows {
        if by_key.insert(p.key(), p).is_some() {
            row_errors.push(RowError {
                line: *line,
                message: format!("duplicate prediction for {}", p.key()),
            });
        }
    }
    row_errors.sort_by_key(|e| e.line);
    if !row_errors.is_empty() && !opts.permissive {
        return Err(PoseError::Rows(row_errors));
    }
    let pair_keys: std::collections::HashSet<PairKey> = pairs
        .iter()
        .map(|p| PairKey {
            scene: p.scene_id.clone(),
            image_a: p.image_a,
            image_b: p.image_b,
        })
        .collect();
    let mut unexpected: Vec<PairKey> = by_key.keys().filter(|k| !pair_keys.contains(*k)).cloned().collect();
    unexpected.sort();

    let results: Vec<Result<PoseErrorRecord, PairKey>> = pairs
        .par_iter()
        .map(|gt| {
            let key = PairKey {
                scene: gt.scene_id.clone(),
                image_a: gt.image_a,
                image_b: gt.image_b,
            };
            match by_key.get(&key) {
                Some(pred) => pair_errors(pred, gt).map_err(|_| key),
                None => Err(key),
            }
        })
        .collect();
    let mut records = Vec::with_capacity(results.len());
    let mut unmatched = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(key) => unmatched.push(key),
        }
    }
    unmatched.sort();
    if !unmatched.is_empty() && !opts.permissive {
        return Err(PoseError::Unmatched(unmatched));
    }

    let mut buckets = BTreeMap::new();
    let bucket = |filter: Option<OverlapCategory>| -> Result<Option<MetricSummary>, PoseError> {
        let subset: Vec<PoseErrorRecord> = records
            .iter()
            .filter(|r| filter.map_or(true, |c| r.category == c))
            .cloned()
            .collect();
        if subset.is_empty() {
            return Ok(None);
        }
        summarize_with(&subset, &opts.thresholds, opts.auc_max).map(Some)
    };
    buckets.insert("all".to_string(), bucket(None)?);
    for c in OverlapCategory::ALL {
        buckets.insert(c.as_str().to_string(), bucket(Some(c))?);
    }
    Ok(PoseReport {
        buckets,
        unmatched,
        row_errors,
        unexpected,
        records,
    })
}

/// Per-pair CSV: `scene,image_a,image_b,category,rot_err,trans_err,excluded_reason`.
pub fn write_records_csv<W: Write>(w: W, records: &[PoseErrorRecord]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["scene", "image_a", "image_b", "category", "rot_err", "trans_err", "excluded_reason"])?;
    for r in records {
        let reason = match r.excluded_reason {
            Some(ExcludedReason::DegeneratePrediction) => "degenerate_prediction",
            Some(ExcludedReason::DegenerateGroundTruth) => "degenerate_ground_truth",
            None => "",
        };
        out.write_record([
            r.key.scene.clone(),
            r.key.image_a.to_string(),
            r.key.image_b.to_string(),
            r.category.as_str().to_string(),
            r.rot_err.to_string(),
            r.trans_err.map(|t| t.to_string()).unwrap_or_default(),
            reason.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
