//! Pair-set curation from a sparse reconstruction: mutual K-NN candidate
//! graph, overlap classification, optional scale-consistency filtering and
//! correspondence verification, then per-scene capping and category
//! balancing.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colmap::{camera_fov_deg, ImageRecord, PinholeCamera, SparseScene};
use crate::so3::{relative_rotation, yaw_pitch_deg_with, EulerConvention, RotationSO3, Translation3};

#[derive(Debug, Error)]
pub enum PairsError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Parse { path: String, line: usize, detail: String },
    #[error("invalid curation config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapCategory {
    Large,
    Small,
    None,
}

impl OverlapCategory {
    pub const ALL: [OverlapCategory; 3] = [OverlapCategory::Large, OverlapCategory::Small, OverlapCategory::None];

    pub fn as_str(self) -> &'static str {
        match self {
            OverlapCategory::Large => "large",
            OverlapCategory::Small => "small",
            OverlapCategory::None => "none",
        }
    }
}

/// Which per-image position the K-NN graph measures distances between.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnDistance {
    /// Camera centers `−Rᵀt`.
    #[default]
    CameraCenter,
    /// Raw world→camera translation vectors `t`.
    Translation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationConfig {
    pub k: usize,
    /// 0 disables the cap.
    pub max_pairs_per_scene: usize,
    pub balance: bool,
    /// Applies the FoV / focal / resolution consistency checks.
    pub scale_filter: bool,
    pub fov_delta_max: f64,
    pub focal_ratio_max: f64,
    pub resolution_ratio_max: f64,
    /// Minimum grid coverage for a verified pair to keep its Large label.
    pub coverage_threshold: f64,
    pub knn_distance: KnnDistance,
    pub euler: EulerConvention,
    pub seed: u64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            k: 5,
            max_pairs_per_scene: 40,
            balance: false,
            scale_filter: false,
            fov_delta_max: 15.0,
            focal_ratio_max: 2.5,
            resolution_ratio_max: 3.0,
            coverage_threshold: 0.25,
            knn_distance: KnnDistance::CameraCenter,
            euler: EulerConvention::Yxz,
            seed: 0,
        }
    }
}

impl CurationConfig {
    /// Settings for the larger-translation variant: K = 50 with scale checks.
    pub fn wide_baseline() -> Self {
        Self {
            k: 50,
            scale_filter: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PairsError> {
        if self.k < 1 {
            return Err(PairsError::Config("k must be at least 1".into()));
        }
        for (name, v) in [
            ("fov_delta_max", self.fov_delta_max),
            ("focal_ratio_max", self.focal_ratio_max),
            ("resolution_ratio_max", self.resolution_ratio_max),
            ("coverage_threshold", self.coverage_threshold),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PairsError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagePair {
    pub scene_id: String,
    pub image_a: u32,
    pub image_b: u32,
    pub name_a: String,
    pub name_b: String,
    /// `R_b R_aᵀ` from the reference poses, row-major.
    pub r_rel_gt: RotationSO3,
    /// `t_b − R_rel t_a`.
    pub t_rel_gt: Translation3,
    pub category: OverlapCategory,
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub verified: bool,
}

impl ImagePair {
    pub fn key(&self) -> (String, u32, u32) {
        (self.scene_id.clone(), self.image_a, self.image_b)
    }
}

fn knn_position(img: &ImageRecord, mode: KnnDistance) -> Vector3<f64> {
    match mode {
        KnnDistance::CameraCenter => img.center(),
        KnnDistance::Translation => img.tvec.0,
    }
}

/// Mutual K-nearest-neighbour pairs by Euclidean distance between camera
/// positions. Ties are broken by the smaller image id. Pairs come back as
/// `(smaller id, larger id)`, sorted.
pub fn mutual_knn_pairs(scene: &SparseScene, k: usize, mode: KnnDistance) -> Vec<(u32, u32)> {
    let nodes: Vec<(u32, Vector3<f64>)> = scene
        .images
        .values()
        .map(|img| (img.image_id, knn_position(img, mode)))
        .collect();
    mutual_knn_from_positions(&nodes, k)
}

pub fn mutual_knn_from_positions(nodes: &[(u32, Vector3<f64>)], k: usize) -> Vec<(u32, u32)> {
    let n = nodes.len();
    if n < 2 || k == 0 {
        return Vec::new();
    }
    let k = k.min(n - 1);
    let neighbours: Vec<BTreeSet<u32>> = nodes
        .iter()
        .map(|(id, p)| {
            let mut cands: Vec<(f64, u32)> = nodes
                .iter()
                .filter(|(other, _)| other != id)
                .map(|(other, q)| ((p - q).norm_squared(), *other))
                .collect();
            let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < cands.len() {
                cands.select_nth_unstable_by(k - 1, cmp);
                cands.truncate(k);
            }
            cands.into_iter().map(|(_, other)| other).collect()
        })
        .collect();
    let index: HashMap<u32, usize> = nodes.iter().enumerate().map(|(i, (id, _))| (*id, i)).collect();
    let mut pairs = Vec::new();
    for (i, (a, _)) in nodes.iter().enumerate() {
        for b in &neighbours[i] {
            if a < b && neighbours[index[b]].contains(a) {
                pairs.push((*a, *b));
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// The overlap case rule on yaw/pitch magnitudes (degrees) and the two
/// cameras' `(fov_x, fov_y)`. Inequalities are strict; equality falls to
/// `Small`.
pub fn classify_angles(yaw_deg: f64, pitch_deg: f64, fov_a: (f64, f64), fov_b: (f64, f64)) -> OverlapCategory {
    let (g, b) = (yaw_deg.abs(), pitch_deg.abs());
    let sum_x = fov_a.0 + fov_b.0;
    let sum_y = fov_a.1 + fov_b.1;
    if g < sum_x / 4.0 && b < sum_y / 4.0 {
        OverlapCategory::Large
    } else if g > sum_x / 2.0 && b > sum_y / 2.0 {
        OverlapCategory::None
    } else {
        OverlapCategory::Small
    }
}

pub fn classify_overlap(r_rel: &RotationSO3, fov_a: (f64, f64), fov_b: (f64, f64)) -> OverlapCategory {
    classify_overlap_with(r_rel, fov_a, fov_b, EulerConvention::Yxz)
}

pub fn classify_overlap_with(
    r_rel: &RotationSO3,
    fov_a: (f64, f64),
    fov_b: (f64, f64),
    convention: EulerConvention,
) -> OverlapCategory {
    let yp = yaw_pitch_deg_with(r_rel, convention);
    classify_angles(yp.yaw_deg, yp.pitch_deg, fov_a, fov_b)
}

/// FoV, focal-ratio and resolution-ratio consistency between two cameras.
pub fn scale_consistent(cam_a: &PinholeCamera, cam_b: &PinholeCamera, cfg: &CurationConfig) -> bool {
    let (ax, ay) = camera_fov_deg(cam_a);
    let (bx, by) = camera_fov_deg(cam_b);
    let fx_hi = cam_a.fx().max(cam_b.fx());
    let fx_lo = cam_a.fx().min(cam_b.fx());
    let area_a = cam_a.width as f64 * cam_a.height as f64;
    let area_b = cam_b.width as f64 * cam_b.height as f64;
    (ax - bx).abs() < cfg.fov_delta_max
        && (ay - by).abs() < cfg.fov_delta_max
        && fx_hi / fx_lo < cfg.focal_ratio_max
        && area_a.max(area_b) / area_a.min(area_b) < cfg.resolution_ratio_max
}

/// Fraction of `grid × grid` image cells containing at least one keypoint.
pub fn grid_coverage(keypoints: &[[f64; 2]], width: u64, height: u64, grid: usize) -> f64 {
    if grid == 0 || width == 0 || height == 0 {
        return 0.0;
    }
    let mut cells = BTreeSet::new();
    for [x, y] in keypoints {
        if !(x.is_finite() && y.is_finite()) || *x < 0.0 || *y < 0.0 {
            continue;
        }
        let cx = ((x / width as f64) * grid as f64).floor() as usize;
        let cy = ((y / height as f64) * grid as f64).floor() as usize;
        if cx < grid && cy < grid {
            cells.insert((cx, cy));
        }
    }
    cells.len() as f64 / (grid * grid) as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerificationEntry {
    pub match_count: u64,
    /// Fraction of 4×4 image cells holding at least one verified match.
    pub coverage: f64,
}

/// Verified match counts keyed by unordered image-name pairs.
#[derive(Clone, Debug, Default)]
pub struct VerificationTable {
    entries: HashMap<(String, String), VerificationEntry>,
}

fn unordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl VerificationTable {
    pub fn insert(&mut self, a: &str, b: &str, entry: VerificationEntry) {
        self.entries.insert(unordered(a, b), entry);
    }

    pub fn get(&self, a: &str, b: &str) -> Option<&VerificationEntry> {
        self.entries.get(&unordered(a, b))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// CSV with header `image_a,image_b,match_count,coverage` (image names).
    pub fn read_csv(path: &Path) -> Result<Self, PairsError> {
        let p = path.display().to_string();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| PairsError::Parse {
            path: p.clone(),
            line: 0,
            detail: e.to_string(),
        })?;
        let headers = rdr
            .headers()
            .map_err(|e| PairsError::Parse { path: p.clone(), line: 1, detail: e.to_string() })?
            .clone();
        let expected = ["image_a", "image_b", "match_count", "coverage"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(PairsError::Parse {
                path: p,
                line: 1,
                detail: format!("expected header {}", expected.join(",")),
            });
        }
        let mut table = Self::default();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| PairsError::Parse {
                path: p.clone(),
                line: e.position().map(|pos| pos.line() as usize).unwrap_or(0),
                detail: e.to_string(),
            })?;
            let line = rec.position().map(|pos| pos.line() as usize).unwrap_or(0);
            let bad = |detail: String| PairsError::Parse { path: p.clone(), line, detail };
            let match_count: u64 = rec[2].trim().parse().map_err(|_| bad(format!("bad match_count {:?}", &rec[2])))?;
            let coverage: f64 = rec[3].trim().parse().map_err(|_| bad(format!("bad coverage {:?}", &rec[3])))?;
            if !(0.0..=1.0).contains(&coverage) {
                return Err(bad(format!("coverage {coverage} outside [0, 1]")));
            }
            table.insert(rec[0].trim(), rec[1].trim(), VerificationEntry { match_count, coverage });
        }
        Ok(table)
    }
}

/// Pairs removed by manual review: `scene_id,image_a,image_b` per line
/// (image names). Blank lines and `#` comments are ignored.
#[derive(Clone, Debug, Default)]
pub struct ExclusionList {
    entries: BTreeSet<(String, String, String)>,
}

impl ExclusionList {
    pub fn insert(&mut self, scene: &str, a: &str, b: &str) {
        let (a, b) = unordered(a, b);
        self.entries.insert((scene.to_string(), a, b));
    }

    pub fn contains(&self, scene: &str, a: &str, b: &str) -> bool {
        let (a, b) = unordered(a, b);
        self.entries.contains(&(scene.to_string(), a, b))
    }

    pub fn parse(text: &str, path: &str) -> Result<Self, PairsError> {
        let mut list = Self::default();
        for (i, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = t.split(',').map(str::trim).collect();
            if parts.len() != 3 || parts.iter().any(|s| s.is_empty()) {
                return Err(PairsError::Parse {
                    path: path.to_string(),
                    line: i + 1,
                    detail: "expected scene_id,image_a,image_b".into(),
                });
            }
            list.insert(parts[0], parts[1], parts[2]);
        }
        Ok(list)
    }

    pub fn read(path: &Path) -> Result<Self, PairsError> {
        let text = std::fs::read_to_string(path).map_err(|source| PairsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurationStats {
    pub registered_images: usize,
    pub candidates: usize,
    pub dropped_scale: usize,
    pub dropped_verification: usize,
    pub dropped_excluded: usize,
    pub dropped_cap: usize,
    pub dropped_balance: usize,
    pub kept: BTreeMap<OverlapCategory, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Curation {
    pub pairs: Vec<ImagePair>,
    pub stats: CurationStats,
}

/// Stable 64-bit mix of the user seed and a label, so each scene and each
/// category draws from its own stream.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Seeded uniform subsample of `keep` items, preserving input order.
fn subsample<T: Clone>(items: &[T], keep: usize, seed: u64) -> Vec<T> {
    if keep >= items.len() {
        return items.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, items.len(), keep).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i].clone()).collect()
}

fn sort_pairs(pairs: &mut [ImagePair]) {
    pairs.sort_by(|a, b| {
        (a.scene_id.as_str(), a.image_a, a.image_b).cmp(&(b.scene_id.as_str(), b.image_a, b.image_b))
    });
}

/// Builds one reference pair for images `a < b`.
pub fn make_pair(scene_id: &str, scene: &SparseScene, a: u32, b: u32, convention: EulerConvention) -> Option<ImagePair> {
    let (a, b) = (a.min(b), a.max(b));
    let ia = scene.images.get(&a)?;
    let ib = scene.images.get(&b)?;
    let ca = scene.camera_of(ia)?;
    let cb = scene.camera_of(ib)?;
    let (ra, rb) = (ia.rotation(), ib.rotation());
    let r_rel = relative_rotation(&ra, &rb);
    let t_rel = ib.tvec.0 - r_rel.matrix() * ia.tvec.0;
    let yp = yaw_pitch_deg_with(&r_rel, convention);
    let category = classify_angles(yp.yaw_deg, yp.pitch_deg, camera_fov_deg(ca), camera_fov_deg(cb));
    Some(ImagePair {
        scene_id: scene_id.to_string(),
        image_a: a,
        image_b: b,
        name_a: ia.name.clone(),
        name_b: ib.name.clone(),
        r_rel_gt: r_rel,
        t_rel_gt: Translation3(t_rel),
        category,
        yaw_deg: yp.yaw_deg,
        pitch_deg: yp.pitch_deg,
        verified: false,
    })
}

fn verification_keeps(pair: &ImagePair, entry: Option<&VerificationEntry>, threshold: f64) -> bool {
    let Some(e) = entry else { return false };
    match pair.category {
        OverlapCategory::None => e.match_count == 0,
        OverlapCategory::Large => e.match_count > 0 && e.coverage >= threshold,
        OverlapCategory::Small => e.match_count > 0 && e.coverage < threshold,
    }
}

/// Runs the full curation pipeline on one scene.
///
/// With a verification table, pairs missing from it are dropped, `None`
/// pairs must have zero verified matches, and `Large`/`Small` labels must
/// agree with the coverage threshold. The cap and the balancing step both
/// subsample with seeds derived from `cfg.seed`.
pub fn curate(
    scene_id: &str,
    scene: &SparseScene,
    cfg: &CurationConfig,
    verification: Option<&VerificationTable>,
    exclusions: Option<&ExclusionList>,
) -> Result<Curation, PairsError> {
    cfg.validate()?;
    let mut stats = CurationStats {
        registered_images: scene.images.len(),
        ..Default::default()
    };
    let candidates = mutual_knn_pairs(scene, cfg.k, cfg.knn_distance);
    stats.candidates = candidates.len();

    let mut pairs = Vec::with_capacity(candidates.len());
    for (a, b) in candidates {
        let Some(mut pair) = make_pair(scene_id, scene, a, b, cfg.euler) else {
            continue;
        };
        if cfg.scale_filter {
            let ca = &scene.cameras[&scene.images[&a].camera_id];
            let cb = &scene.cameras[&scene.images[&b].camera_id];
            if !scale_consistent(ca, cb, cfg) {
                stats.dropped_scale += 1;
                continue;
            }
        }
        if let Some(table) = verification {
            if !verification_keeps(&pair, table.get(&pair.name_a, &pair.name_b), cfg.coverage_threshold) {
                stats.dropped_verification += 1;
                continue;
            }
            pair.verified = true;
        }
        if let Some(ex) = exclusions {
            if ex.contains(scene_id, &pair.name_a, &pair.name_b) {
                stats.dropped_excluded += 1;
                continue;
            }
        }
        pairs.push(pair);
    }

    if cfg.max_pairs_per_scene > 0 && pairs.len() > cfg.max_pairs_per_scene {
        stats.dropped_cap = pairs.len() - cfg.max_pairs_per_scene;
        pairs = subsample(&pairs, cfg.max_pairs_per_scene, derive_seed(cfg.seed, scene_id));
    }
    if cfg.balance {
        let before = pairs.len();
        pairs = balance_categories(&pairs, cfg.seed);
        stats.dropped_balance = before - pairs.len();
    }
    sort_pairs(&mut pairs);
    for p in &pairs {
        *stats.kept.entry(p.category).or_default() += 1;
    }
    Ok(Curation { pairs, stats })
}

/// Subsamples every category to the smallest category count.
pub fn balance_categories(pairs: &[ImagePair], seed: u64) -> Vec<ImagePair> {
    let mut by_cat: BTreeMap<OverlapCategory, Vec<ImagePair>> = OverlapCategory::ALL.iter().map(|c| (*c, Vec::new())).collect();
    for p in pairs {
        by_cat.get_mut(&p.category).unwrap().push(p.clone());
    }
    let min = by_cat.values().map(Vec::len).min().unwrap_or(0);
    let mut out = Vec::with_capacity(min * 3);
    for (cat, mut list) in by_cat {
        sort_pairs(&mut list);
        out.extend(subsample(&list, min, derive_seed(seed, cat.as_str())));
    }
    sort_pairs(&mut out);
    out
}

pub fn write_pairs_jsonl<W: Write>(mut w: W, pairs: &[ImagePair]) -> std::io::Result<()> {
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_pairs_jsonl(path: &Path) -> Result<Vec<ImagePair>, PairsError> {
    let p = path.display().to_string();
    let f = std::fs::File::open(path).map_err(|source| PairsError::Io { path: p.clone(), source })?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|source| PairsError::Io { path: p.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: ImagePair = serde_json::from_str(&line).map_err(|e| PairsError::Parse {
            path: p.clone(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        if pair.image_a >= pair.image_b {
            return Err(PairsError::Parse {
                path: p.clone(),
                line: i + 1,
                detail: "image_a must be smaller than image_b".into(),
            });
        }
        out.push(pair);
    }
    Ok(out)
}
