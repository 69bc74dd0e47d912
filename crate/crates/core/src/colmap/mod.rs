//! COLMAP sparse model reading and writing.
//!
//! Both the binary (`cameras.bin`, `images.bin`, `points3D.bin`) and text
//! (`*.txt`) variants are supported. Binary files are little-endian with
//! 64-bit unsigned counts, NUL-terminated image names, scalar-first
//! quaternions and world→camera poses. Text files print every float in its
//! shortest round-trip form, so converting binary → text → binary is exact.
//!
//! Every parse failure carries the file and the byte offset or line number
//! at which it was detected. No partially parsed scene is ever returned.

mod binary;
mod text;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::so3::{quat_to_matrix, RotationSO3, Translation3, UnitQuaternion, QUAT_NORM_TOL};

pub use binary::{decode_binary_model, encode_binary_model};
pub use text::{decode_text_model, encode_text_model};

/// Where in a file a problem was detected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Location {
    Byte(u64),
    Line(usize),
    /// Scene built in memory rather than parsed.
    Unknown,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Byte(o) => write!(f, "byte offset {o}"),
            Location::Line(l) => write!(f, "line {l}"),
            Location::Unknown => write!(f, "in-memory scene"),
        }
    }
}

#[derive(Debug, Error)]
pub enum ColmapError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing model file {0}")]
    MissingFile(PathBuf),
    #[error("{file}: truncated at {location}")]
    Truncated { file: String, location: Location },
    #[error("{file}: unknown or unsupported camera model {model} at {location}")]
    UnknownCameraModel {
        file: String,
        location: Location,
        model: String,
    },
    #[error("{file}: duplicate {kind} id {id} at {location}")]
    DuplicateId {
        file: String,
        location: Location,
        kind: &'static str,
        id: u64,
    },
    #[error("{file}: dangling reference at {location}: {detail}")]
    DanglingReference {
        file: String,
        location: Location,
        detail: String,
    },
    #[error("{file}: malformed record at {location}: {detail}")]
    Malformed {
        file: String,
        location: Location,
        detail: String,
    },
    #[error("{file}: invalid value at {location}: {detail}")]
    Invalid {
        file: String,
        location: Location,
        detail: String,
    },
}

impl ColmapError {
    pub fn location(&self) -> Option<Location> {
        match self {
            ColmapError::Truncated { location, .. }
            | ColmapError::UnknownCameraModel { location, .. }
            | ColmapError::DuplicateId { location, .. }
            | ColmapError::DanglingReference { location, .. }
            | ColmapError::Malformed { location, .. }
            | ColmapError::Invalid { location, .. } => Some(*location),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CameraModel {
    SimplePinhole,
    Pinhole,
    SimpleRadial,
    Radial,
    #[serde(rename = "OPENCV")]
    OpenCv,
}

impl CameraModel {
    pub fn id(self) -> i32 {
        match self {
            CameraModel::SimplePinhole => 0,
            CameraModel::Pinhole => 1,
            CameraModel::SimpleRadial => 2,
            CameraModel::Radial => 3,
            CameraModel::OpenCv => 4,
        }
    }

    pub fn from_id(id: i32) -> Option<Self> {
        Some(match id {
            0 => CameraModel::SimplePinhole,
            1 => CameraModel::Pinhole,
            2 => CameraModel::SimpleRadial,
            3 => CameraModel::Radial,
            4 => CameraModel::OpenCv,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            CameraModel::SimplePinhole => "SIMPLE_PINHOLE",
            CameraModel::Pinhole => "PINHOLE",
            CameraModel::SimpleRadial => "SIMPLE_RADIAL",
            CameraModel::Radial => "RADIAL",
            CameraModel::OpenCv => "OPENCV",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [
            CameraModel::SimplePinhole,
            CameraModel::Pinhole,
            CameraModel::SimpleRadial,
            CameraModel::Radial,
            CameraModel::OpenCv,
        ]
        .into_iter()
        .find(|m| m.name() == name)
    }

    pub fn num_params(self) -> usize {
        match self {
            CameraModel::SimplePinhole => 3,
            CameraModel::Pinhole => 4,
            CameraModel::SimpleRadial => 4,
            CameraModel::Radial => 5,
            CameraModel::OpenCv => 8,
        }
    }

    fn single_focal(self) -> bool {
        matches!(
            self,
            CameraModel::SimplePinhole | CameraModel::SimpleRadial | CameraModel::Radial
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PinholeCamera {
    pub camera_id: u32,
    pub model: CameraModel,
    pub width: u64,
    pub height: u64,
    pub params: Vec<f64>,
}

impl PinholeCamera {
    pub fn pinhole(camera_id: u32, width: u64, height: u64, fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            camera_id,
            model: CameraModel::Pinhole,
            width,
            height,
            params: vec![fx, fy, cx, cy],
        }
    }

    pub fn fx(&self) -> f64 {
        self.params[0]
    }

    pub fn fy(&self) -> f64 {
        if self.model.single_focal() {
            self.params[0]
        } else {
            self.params[1]
        }
    }

    pub fn cx(&self) -> f64 {
        if self.model.single_focal() {
            self.params[1]
        } else {
            self.params[2]
        }
    }

    pub fn cy(&self) -> f64 {
        if self.model.single_focal() {
            self.params[2]
        } else {
            self.params[3]
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.params.len() != self.model.num_params() {
            return Err(format!(
                "camera {}: {} expects {} params, got {}",
                self.camera_id,
                self.model.name(),
                self.model.num_params(),
                self.params.len()
            ));
        }
        if self.width < 1 || self.height < 1 {
            return Err(format!("camera {}: zero image size", self.camera_id));
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(format!("camera {}: non-finite parameter", self.camera_id));
        }
        if !(self.fx() > 0.0 && self.fy() > 0.0) {
            return Err(format!("camera {}: focal length must be positive", self.camera_id));
        }
        Ok(())
    }
}

/// Horizontal and vertical field of view in degrees.
pub fn camera_fov_deg(cam: &PinholeCamera) -> (f64, f64) {
    let fov_x = 2.0 * (cam.width as f64 / (2.0 * cam.fx())).atan();
    let fov_y = 2.0 * (cam.height as f64 / (2.0 * cam.fy())).atan();
    (fov_x.to_degrees(), fov_y.to_degrees())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub xy: [f64; 2],
    pub point3d_id: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub image_id: u32,
    pub name: String,
    pub camera_id: u32,
    /// World→camera rotation, stored exactly as read.
    pub qvec: UnitQuaternion,
    /// World→camera translation.
    pub tvec: Translation3,
    pub observations: Vec<Observation>,
}

impl ImageRecord {
    pub fn rotation(&self) -> RotationSO3 {
        // validated on load; fall back to identity for hand-built records
        quat_to_matrix(&self.qvec).unwrap_or_default()
    }

    /// Camera center `C = −Rᵀ t` in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().matrix().transpose() * self.tvec.0)
    }

    pub fn num_registered_observations(&self) -> usize {
        self.observations.iter().filter(|o| o.point3d_id.is_some()).count()
    }

    fn point_ids(&self) -> BTreeSet<u64> {
        self.observations.iter().filter_map(|o| o.point3d_id).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrackElement {
    pub image_id: u32,
    pub point2d_idx: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Point3D {
    pub xyz: [f64; 3],
    pub rgb: [u8; 3],
    pub error: f64,
    pub track: Vec<TrackElement>,
}

/// A COLMAP-equivalent sparse reconstruction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseScene {
    pub cameras: BTreeMap<u32, PinholeCamera>,
    pub images: BTreeMap<u32, ImageRecord>,
    pub points3d: BTreeMap<u64, Point3D>,
    /// Model units → meters, when an annotation provides it.
    pub scale_to_meters: Option<f64>,
}

impl SparseScene {
    pub fn camera_of(&self, image: &ImageRecord) -> Option<&PinholeCamera> {
        self.cameras.get(&image.camera_id)
    }

    pub fn image_by_name(&self, name: &str) -> Option<&ImageRecord> {
        self.images.values().find(|i| i.name == name)
    }

    /// Checks every scene invariant. Used for in-memory scenes; parsed scenes
    /// are checked during parsing with precise locations.
    pub fn validate(&self) -> Result<(), ColmapError> {
        let invalid = |detail: String| ColmapError::Invalid {
            file: "scene".into(),
            location: Location::Unknown,
            detail,
        };
        for (id, cam) in &self.cameras {
            if *id != cam.camera_id {
                return Err(invalid(format!("camera key {id} != id {}", cam.camera_id)));
            }
            cam.validate().map_err(invalid)?;
        }
        for (id, img) in &self.images {
            if *id != img.image_id {
                return Err(invalid(format!("image key {id} != id {}", img.image_id)));
            }
            validate_image_fields(img).map_err(invalid)?;
            if !self.cameras.contains_key(&img.camera_id) {
                return Err(ColmapError::DanglingReference {
                    file: "scene".into(),
                    location: Location::Unknown,
                    detail: format!("image {id} references missing camera {}", img.camera_id),
                });
            }
            for obs in &img.observations {
                if let Some(pid) = obs.point3d_id {
                    if !self.points3d.contains_key(&pid) {
                        return Err(ColmapError::DanglingReference {
                            file: "scene".into(),
                            location: Location::Unknown,
                            detail: format!("image {id} observes missing point {pid}"),
                        });
                    }
                }
            }
        }
        for (pid, p) in &self.points3d {
            validate_point_fields(p).map_err(invalid)?;
            for el in &p.track {
                check_track_element(&self.images, *pid, el).map_err(|detail| {
                    ColmapError::DanglingReference {
                        file: "scene".into(),
                        location: Location::Unknown,
                        detail,
                    }
                })?;
            }
        }
        if let Some(s) = self.scale_to_meters {
            if !(s > 0.0 && s.is_finite()) {
                return Err(invalid(format!("scale_to_meters must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

pub(crate) fn validate_name(name: &str) -> Result<(), String> {
    if name.is_empty() {
        return Err("empty image name".into());
    }
    if name.chars().any(|c| c.is_control()) {
        return Err("image name contains control characters".into());
    }
    if name.trim() != name {
        return Err("image name has leading or trailing whitespace".into());
    }
    Ok(())
}

pub(crate) fn validate_image_fields(img: &ImageRecord) -> Result<(), String> {
    validate_name(&img.name)?;
    let q = img.qvec;
    if !q.to_array().iter().all(|v| v.is_finite()) || (q.norm() - 1.0).abs() > QUAT_NORM_TOL {
        return Err(format!("image {}: quaternion is not unit norm", img.image_id));
    }
    if !img.tvec.is_finite() {
        return Err(format!("image {}: non-finite translation", img.image_id));
    }
    if !img.center().iter().all(|v| v.is_finite()) {
        return Err(format!("image {}: non-finite camera center", img.image_id));
    }
    if img.observations.iter().any(|o| !(o.xy[0].is_finite() && o.xy[1].is_finite())) {
        return Err(format!("image {}: non-finite keypoint", img.image_id));
    }
    if img.observations.len() > u32::MAX as usize {
        return Err(format!("image {}: too many observations", img.image_id));
    }
    Ok(())
}

pub(crate) fn validate_point_fields(p: &Point3D) -> Result<(), String> {
    if !p.xyz.iter().all(|v| v.is_finite()) {
        return Err("non-finite point position".into());
    }
    if !p.error.is_finite() {
        return Err("non-finite reprojection error".into());
    }
    Ok(())
}

pub(crate) fn check_track_element(
    images: &BTreeMap<u32, ImageRecord>,
    point_id: u64,
    el: &TrackElement,
) -> Result<(), String> {
    let img = images
        .get(&el.image_id)
        .ok_or_else(|| format!("point {point_id} track references missing image {}", el.image_id))?;
    let obs = img.observations.get(el.point2d_idx as usize).ok_or_else(|| {
        format!(
            "point {point_id} track references observation {} of image {} (has {})",
            el.point2d_idx,
            el.image_id,
            img.observations.len()
        )
    })?;
    if obs.point3d_id != Some(point_id) {
        return Err(format!(
            "point {point_id} track entry ({}, {}) does not point back to it",
            el.image_id, el.point2d_idx
        ));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFormat {
    Binary,
    Text,
    Auto,
}

impl std::str::FromStr for ModelFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "binary" | "bin" => Ok(ModelFormat::Binary),
            "text" | "txt" => Ok(ModelFormat::Text),
            "auto" => Ok(ModelFormat::Auto),
            other => Err(format!("unknown model format {other:?}")),
        }
    }
}

const FILE_STEMS: [&str; 3] = ["cameras", "images", "points3D"];

fn model_paths(dir: &Path, ext: &str) -> [PathBuf; 3] {
    FILE_STEMS.map(|stem| dir.join(format!("{stem}.{ext}")))
}

fn read_file(path: &Path) -> Result<Vec<u8>, ColmapError> {
    std::fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            ColmapError::MissingFile(path.to_path_buf())
        } else {
            ColmapError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })
}

/// Resolves `Auto` by looking for `cameras.bin`, then `cameras.txt`.
pub fn detect_format(dir: &Path) -> Result<ModelFormat, ColmapError> {
    if dir.join("cameras.bin").is_file() {
        Ok(ModelFormat::Binary)
    } else if dir.join("cameras.txt").is_file() {
        Ok(ModelFormat::Text)
    } else {
        Err(ColmapError::MissingFile(dir.join("cameras.{bin,txt}")))
    }
}

pub fn read_sparse_model(dir: &Path, format: ModelFormat) -> Result<SparseScene, ColmapError> {
    let format = match format {
        ModelFormat::Auto => detect_format(dir)?,
        f => f,
    };
    match format {
        ModelFormat::Binary => {
            let [c, i, p] = model_paths(dir, "bin");
            decode_binary_model(&read_file(&c)?, &read_file(&i)?, &read_file(&p)?)
        }
        ModelFormat::Text => {
            let [c, i, p] = model_paths(dir, "txt");
            let read_text = |path: &Path| -> Result<String, ColmapError> {
                String::from_utf8(read_file(path)?).map_err(|e| ColmapError::Malformed {
                    file: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
                    location: Location::Byte(e.utf8_error().valid_up_to() as u64),
                    detail: "invalid UTF-8".into(),
                })
            };
            decode_text_model(&read_text(&c)?, &read_text(&i)?, &read_text(&p)?)
        }
        ModelFormat::Auto => unreachable!(),
    }
}

/// Writes the three model files. `Auto` writes binary.
pub fn write_sparse_model(scene: &SparseScene, dir: &Path, format: ModelFormat) -> Result<(), ColmapError> {
    scene.validate()?;
    std::fs::create_dir_all(dir).map_err(|source| ColmapError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let (paths, blobs): ([PathBuf; 3], [Vec<u8>; 3]) = match format {
        ModelFormat::Text => {
            let [c, i, p] = encode_text_model(scene);
            (model_paths(dir, "txt"), [c.into_bytes(), i.into_bytes(), p.into_bytes()])
        }
        _ => (model_paths(dir, "bin"), encode_binary_model(scene)),
    };
    for (path, blob) in paths.iter().zip(blobs.iter()) {
        std::fs::write(path, blob).map_err(|source| ColmapError::Io {
            path: path.clone(),
            source,
        })?;
    }
    Ok(())
}

#[derive(Debug, Error, PartialEq)]
#[error("unknown image id {0}")]
pub struct UnknownImage(pub u32);

/// Number of distinct 3D points observed by both images.
pub fn shared_points(scene: &SparseScene, a: u32, b: u32) -> Result<usize, UnknownImage> {
    let ia = scene.images.get(&a).ok_or(UnknownImage(a))?;
    let ib = scene.images.get(&b).ok_or(UnknownImage(b))?;
    let pa = ia.point_ids();
    if a == b {
        return Ok(pa.len());
    }
    Ok(ib.point_ids().intersection(&pa).count())
}

/// Builds the scene's point cloud (N×3) from `points3D`.
pub fn scene_points(scene: &SparseScene) -> Vec<Vector3<f64>> {
    scene
        .points3d
        .values()
        .map(|p| Vector3::new(p.xyz[0], p.xyz[1], p.xyz[2]))
        .collect()
}
