//! Dense reconstruction evaluation: depth unprojection, Umeyama similarity
//! alignment, point-to-point ICP, and ACC / CMP in meters.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colmap::PinholeCamera;
use crate::so3::{RotationSO3, Translation3};
use crate::spatial::KdTree;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ReconError {
    #[error("depth map is {actual:?}, expected {expected:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("empty point cloud: {0}")]
    EmptyCloud(&'static str),
    #[error("scale must be positive and finite, got {0}")]
    BadScale(f64),
    #[error("point {0} is not finite")]
    NonFinite(usize),
    #[error("point-map tensor must have a trailing dimension of 3, got {0:?}")]
    BadPointMap(Vec<usize>),
    #[error("invalid ICP parameters: {0}")]
    BadParams(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    #[default]
    Model,
    Meters,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub unit: Unit,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self, ReconError> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(ReconError::NonFinite(i));
        }
        Ok(Self { points, unit: Unit::Model })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points from an `(..., 3)` tensor; rows with any non-finite value are
    /// skipped.
    pub fn from_tensor(t: &Tensor) -> Result<Self, ReconError> {
        if t.shape().last() != Some(&3) {
            return Err(ReconError::BadPointMap(t.shape().to_vec()));
        }
        let v = t.to_f64_vec();
        let points = v
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0], c[1], c[2]))
            .filter(|p| p.iter().all(|x| x.is_finite()))
            .collect();
        Ok(Self { points, unit: Unit::Model })
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        Tensor::from_f64(vec![self.points.len(), 3], data).expect("n×3 payload")
    }

    pub fn transformed(&self, sim: &Sim3) -> Self {
        Self {
            points: self.points.iter().map(|p| sim.apply(p)).collect(),
            unit: self.unit,
        }
    }

    /// Seeded uniform subsample without replacement, original order kept.
    pub fn subsample(&self, cap: usize, seed: u64) -> Self {
        if self.points.len() <= cap {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, self.points.len(), cap).into_vec();
        idx.sort_unstable();
        Self {
            points: idx.into_iter().map(|i| self.points[i]).collect(),
            unit: self.unit,
        }
    }
}

/// `x ↦ s·R·x + t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sim3 {
    pub s: f64,
    pub r: RotationSO3,
    pub t: Translation3,
}

impl Default for Sim3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Sim3 {
    pub fn identity() -> Self {
        Self {
            s: 1.0,
            r: RotationSO3::identity(),
            t: Translation3::zeros(),
        }
    }

    pub fn new(s: f64, r: RotationSO3, t: Vector3<f64>) -> Result<Self, ReconError> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(ReconError::BadScale(s));
        }
        Ok(Self { s, r, t: Translation3(t) })
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.s * (self.r.matrix() * p) + self.t.0
    }

    pub fn inverse(&self) -> Self {
        let rt = self.r.transpose();
        let t = -(rt.matrix() * self.t.0) / self.s;
        Self {
            s: 1.0 / self.s,
            r: rt,
            t: Translation3(t),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Sim3) -> Self {
        Self {
            s: self.s * other.s,
            r: self.r.clone() * other.r.clone(),
            t: Translation3(self.apply(&other.t.0)),
        }
    }
}

/// World points for every pixel with positive finite depth. The depth map
/// may be the camera resolution divided by an integer `downscale`; the
/// intrinsics are scaled to match. Pixel `(row, col)` maps to `(u, v) =
/// (col, row)`. Only the pinhole part of the camera model is used.
pub fn unproject_depth(
    depth: &Tensor,
    cam: &PinholeCamera,
    r: &RotationSO3,
    t: &Translation3,
    downscale: u32,
) -> Result<PointCloud, ReconError> {
    let f = downscale.max(1) as u64;
    let expected = vec![(cam.height / f) as usize, (cam.width / f) as usize];
    if depth.shape() != expected.as_slice() || cam.height % f != 0 || cam.width % f != 0 {
        return Err(ReconError::ShapeMismatch {
            expected,
            actual: depth.shape().to_vec(),
        });
    }
    let k = f as f64;
    let (fx, fy, cx, cy) = (cam.fx() / k, cam.fy() / k, cam.cx() / k, cam.cy() / k);
    let w = expected[1];
    let rt = r.matrix().transpose();
    let points = depth
        .to_f64_vec()
        .iter()
        .enumerate()
        .filter(|(_, d)| d.is_finite() && **d > 0.0)
        .map(|(i, &d)| {
            let (v, u) = ((i / w) as f64, (i % w) as f64);
            let cam_pt = Vector3::new((u - cx) / fx * d, (v - cy) / fy * d, d);
            rt * (cam_pt - t.0)
        })
        .collect();
    Ok(PointCloud { points, unit: Unit::Model })
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

/// Least-squares similarity taking `src[i]` onto `dst[i]`.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> Result<Sim3, ReconError> {
    if src.len() != dst.len() {
        return Err(ReconError::Degenerate(format!("{} source vs {} target points", src.len(), dst.len())));
    }
    let n = src.len();
    if n < 3 {
        return Err(ReconError::Degenerate(format!("{n} correspondences, need 3")));
    }
    let (mu_s, mu_d) = (centroid(src), centroid(dst));
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - mu_s, d - mu_d);
        cov += b * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= n as f64;
    var_s /= n as f64;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sv = svd.singular_values;
    // singular values from nalgebra are not guaranteed sorted
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if !(var_s > 0.0) || sorted[1] <= 1e-12 * sorted[0].max(f64::MIN_POSITIVE) {
        return Err(ReconError::Degenerate("source points are collinear or coincident".into()));
    }
    let mut d = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        let smallest = sv.imin();
        d[(smallest, smallest)] = -1.0;
    }
    let r = u * d * v_t;
    let s = if with_scale { (Matrix3::from_diagonal(&sv) * d).trace() / var_s } else { 1.0 };
    let t = mu_d - s * r * mu_s;
    Sim3::new(s, RotationSO3::from_matrix_unchecked(r), t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpParams {
    pub max_iters: usize,
    pub rmse_tol: f64,
    /// Correspondence gate in target units; unset means `gate_factor ×`
    /// the target's median nearest-neighbour spacing.
    pub gate: Option<f64>,
    pub gate_factor: f64,
    pub with_scale: bool,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iters: 50,
            rmse_tol: 1e-6,
            gate: None,
            gate_factor: 10.0,
            with_scale: true,
        }
    }
}

impl IcpParams {
    pub fn validate(&self) -> Result<(), ReconError> {
        if self.max_iters == 0 {
            return Err(ReconError::BadParams("max_iters must be at least 1".into()));
        }
        if !(self.rmse_tol >= 0.0) {
            return Err(ReconError::BadParams("rmse_tol must be non-negative".into()));
        }
        if let Some(g) = self.gate {
            if !(g > 0.0 && g.is_finite()) {
                return Err(ReconError::BadParams("gate must be positive".into()));
            }
        }
        if !(self.gate_factor > 0.0 && self.gate_factor.is_finite()) {
            return Err(ReconError::BadParams("gate_factor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcpResult {
    pub transform: Sim3,
    pub iterations: usize,
    /// Gated RMSE before the first update, then after each accepted update.
    pub rmse_history: Vec<f64>,
    pub gate: f64,
    /// Set when no source point fell within the gate; `transform` is the
    /// initial guess.
    pub no_correspondences: bool,
}

impl IcpResult {
    pub fn final_rmse(&self) -> f64 {
        *self.rmse_history.last().unwrap()
    }
}

/// Median distance from each point to its nearest other point.
pub fn median_nn_spacing(tree: &KdTree, points: &[Vector3<f64>]) -> f64 {
    let mut d: Vec<f64> = points
        .par_iter()
        .enumerate()
        .filter_map(|(i, p)| tree.nearest_excluding(p, i).map(|(_, d2)| d2.sqrt()))
        .collect();
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    if n % 2 == 1 {
        d[n / 2]
    } else {
        (d[n / 2 - 1] + d[n / 2]) / 2.0
    }
}

struct Matches {
    src: Vec<Vector3<f64>>,
    dst: Vec<Vector3<f64>>,
    /// RMSE with every distance capped at the gate, over all source points.
    capped_rmse: f64,
}

fn match_points(src: &[Vector3<f64>], tree: &KdTree, dst: &[Vector3<f64>], sim: &Sim3, gate: f64) -> Matches {
    let g2 = gate * gate;
    let found: Vec<(Vector3<f64>, usize, f64)> = src
        .par_iter()
        .map(|p| {
            let q = sim.apply(p);
            let (j, d2) = tree.nearest(&q).expect("non-empty target");
            (*p, j, d2)
        })
        .collect();
    let mut m = Matches {
        src: Vec::new(),
        dst: Vec::new(),
        capped_rmse: 0.0,
    };
    let mut sum = 0.0;
    for (p, j, d2) in found {
        if d2 <= g2 {
            m.src.push(p);
            m.dst.push(dst[j]);
            sum += d2;
        } else {
            sum += g2;
        }
    }
    m.capped_rmse = (sum / src.len() as f64).sqrt();
    m
}

/// Point-to-point ICP from `init`. Each iteration gates nearest-neighbour
/// correspondences and re-solves with Umeyama. The tracked error is the
/// RMSE with distances capped at the gate, which cannot increase when an
/// update is accepted.
pub fn icp_refine(src: &PointCloud, dst: &PointCloud, init: &Sim3, params: &IcpParams) -> Result<IcpResult, ReconError> {
    params.validate()?;
    if src.is_empty() {
        return Err(ReconError::EmptyCloud("source"));
    }
    if dst.is_empty() {
        return Err(ReconError::EmptyCloud("target"));
    }
    let tree = KdTree::new(&dst.points);
    let gate = match params.gate {
        Some(g) => g,
        None => {
            let spacing = median_nn_spacing(&tree, &dst.points);
            if spacing > 0.0 {
                params.gate_factor * spacing
            } else {
                f64::INFINITY
            }
        }
    };
    icp_with_tree(&src.points, &tree, &dst.points, init, params, gate)
}

fn icp_with_tree(
    src: &[Vector3<f64>],
    tree: &KdTree,
    dst: &[Vector3<f64>],
    init: &Sim3,
    params: &IcpParams,
    gate: f64,
) -> Result<IcpResult, ReconError> {
    let mut current = init.clone();
    let mut matches = match_points(src, tree, dst, &current, gate);
    let mut history = vec![matches.capped_rmse];
    if matches.src.is_empty() {
        log::warn!("icp: no correspondences within gate {gate}");
        return Ok(IcpResult {
            transform: current,
            iterations: 0,
            rmse_history: history,
            gate,
            no_correspondences: true,
        });
    }
    let mut iterations = 0;
    while iterations < params.max_iters {
        iterations += 1;
        let Ok(candidate) = umeyama(&matches.src, &matches.dst, params.with_scale) else {
            break;
        };
        let next = match_points(src, tree, dst, &candidate, gate);
        let prev = matches.capped_rmse;
        if !(next.capped_rmse < prev) {
            break;
        }
        current = candidate;
        history.push(next.capped_rmse);
        matches = next;
        if prev - matches.capped_rmse < params.rmse_tol || matches.src.is_empty() {
            break;
        }
    }
    Ok(IcpResult {
        transform: current,
        iterations,
        rmse_history: history,
        gate,
        no_correspondences: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconSummary {
    pub acc_mean: f64,
    pub acc_median: f64,
    pub cmp_mean: f64,
    pub cmp_median: f64,
}

fn nn_distances(from: &[Vector3<f64>], tree: &KdTree) -> Vec<f64> {
    from.par_iter().map(|p| tree.nearest(p).expect("non-empty").1.sqrt()).collect()
}

fn mean_median(mut d: Vec<f64>) -> (f64, f64) {
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let median = if n % 2 == 1 { d[n / 2] } else { (d[n / 2 - 1] + d[n / 2]) / 2.0 };
    (mean, median)
}

/// ACC: predicted → GT nearest distances; CMP: GT → predicted. Both clouds
/// must already share a frame; distances are multiplied by `scale_to_meters`.
pub fn acc_cmp(pred: &PointCloud, gt: &PointCloud, scale_to_meters: f64) -> Result<ReconSummary, ReconError> {
    if !(scale_to_meters > 0.0 && scale_to_meters.is_finite()) {
        return Err(ReconError::BadScale(scale_to_meters));
    }
    if pred.is_empty() {
        return Err(ReconError::EmptyCloud("prediction"));
    }
    if gt.is_empty() {
        return Err(ReconError::EmptyCloud("ground truth"));
    }
    let (gt_tree, pred_tree) = rayon::join(|| KdTree::new(&gt.points), || KdTree::new(&pred.points));
    let (acc_mean, acc_median) = mean_median(nn_distances(&pred.points, &gt_tree));
    let (cmp_mean, cmp_median) = mean_median(nn_distances(&gt.points, &pred_tree));
    Ok(ReconSummary {
        acc_mean: acc_mean * scale_to_meters,
        acc_median: acc_median * scale_to_meters,
        cmp_mean: cmp_mean * scale_to_meters,
        cmp_median: cmp_median * scale_to_meters,
    })
}

pub fn apply_metric_scale(cloud: &PointCloud, s: f64) -> Result<PointCloud, ReconError> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(ReconError::BadScale(s));
    }
    Ok(PointCloud {
        points: cloud.points.iter().map(|p| p * s).collect(),
        unit: Unit::Meters,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub icp: IcpParams,
    /// Predicted points kept for alignment; metrics always use all points.
    pub max_align_points: usize,
    /// ICP iterations spent scoring each coarse rotation candidate.
    pub candidate_iters: usize,
    pub seed: u64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            icp: IcpParams::default(),
            max_align_points: 1_000_000,
            candidate_iters: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconOutcome {
    pub summary: ReconSummary,
    pub alignment: Sim3,
    pub coarse: Sim3,
    pub icp: IcpResult,
    pub n_pred: usize,
    pub n_gt: usize,
    pub n_align: usize,
}

fn principal_axes(points: &[Vector3<f64>], c: &Vector3<f64>) -> Matrix3<f64> {
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov / points.len() as f64);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axes = Matrix3::from_columns(&[
        eig.eigenvectors.column(order[0]).into_owned(),
        eig.eigenvectors.column(order[1]).into_owned(),
        eig.eigenvectors.column(order[2]).into_owned(),
    ]);
    if axes.determinant() < 0.0 {
        axes.column_mut(2).neg_mut();
    }
    axes
}

/// Coarse similarities from centroid + RMS-radius normalization, paired
/// with rotations that map principal axes onto each other (the four proper
/// sign choices) and the identity.
pub fn coarse_candidates(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Vec<Sim3> {
    let (cs, cd) = (centroid(src), centroid(dst));
    let rms = |pts: &[Vector3<f64>], c: &Vector3<f64>| (pts.iter().map(|p| (p - c).norm_squared()).sum::<f64>() / pts.len() as f64).sqrt();
    let (rs, rd) = (rms(src, &cs), rms(dst, &cd));
    let s = if rs > 0.0 && rd > 0.0 { rd / rs } else { 1.0 };
    let (ps, pd) = (principal_axes(src, &cs), principal_axes(dst, &cd));
    let mut rotations = vec![Matrix3::identity()];
    for signs in [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]] {
        let flip = Matrix3::from_diagonal(&Vector3::from(signs));
        rotations.push(pd * flip * ps.transpose());
    }
    rotations
        .into_iter()
        .map(|r| {
            let t = cd - s * r * cs;
            Sim3 {
                s,
                r: RotationSO3::from_matrix_unchecked(r),
                t: Translation3(t),
            }
        })
        .collect()
}

/// Aligns `pred` to `gt` without correspondences and reports ACC/CMP in
/// meters: coarse candidates scored by short ICP runs on a seeded
/// subsample, full ICP from the best, then metrics on the complete clouds.
pub fn evaluate_recon(pred: &PointCloud, gt: &PointCloud, scale_to_meters: f64, cfg: &ReconConfig) -> Result<ReconOutcome, ReconError> {
    cfg.icp.validate()?;
    if !(scale_to_meters > 0.0 && scale_to_meters.is_finite()) {
        return Err(ReconError::BadScale(scale_to_meters));
    }
    if pred.is_empty() {
        return Err(ReconError::EmptyCloud("prediction"));
    }
    if gt.is_empty() {
        return Err(ReconError::EmptyCloud("ground truth"));
    }
    let align = pred.subsample(cfg.max_align_points.max(3), cfg.seed);
    log::info!("recon: {} predicted points ({} for alignment), {} reference points", pred.len(), align.len(), gt.len());
    let tree = KdTree::new(&gt.points);
    let gate = match cfg.icp.gate {
        Some(g) => g,
        None => {
            let spacing = median_nn_spacing(&tree, &gt.points);
            if spacing > 0.0 {
                cfg.icp.gate_factor * spacing
            } else {
                f64::INFINITY
            }
        }
    };
    let short = IcpParams {
        max_iters: cfg.candidate_iters.max(1),
        ..cfg.icp.clone()
    };
    let mut best: Option<IcpResult> = None;
    for (i, cand) in coarse_candidates(&align.points, &gt.points).iter().enumerate() {
        let r = icp_with_tree(&align.points, &tree, &gt.points, cand, &short, gate)?;
        log::debug!("recon: coarse candidate {i} capped rmse {}", r.final_rmse());
        if best.as_ref().map_or(true, |b| r.final_rmse() < b.final_rmse()) {
            best = Some(r);
        }
    }
    let coarse = best.expect("at least one candidate").transform;
    let icp = icp_with_tree(&align.points, &tree, &gt.points, &coarse, &cfg.icp, gate)?;
    log::info!(
        "recon: icp {} iterations, capped rmse {} -> {}",
        icp.iterations,
        icp.rmse_history[0],
        icp.final_rmse()
    );
    let aligned = pred.transformed(&icp.transform);
    let summary = acc_cmp(&aligned, gt, scale_to_meters)?;
    Ok(ReconOutcome {
        summary,
        alignment: icp.transform.clone(),
        coarse,
        n_pred: pred.len(),
        n_gt: gt.len(),
        n_align: align.len(),
        icp,
    })
}
