//! Metric-scale annotations: validation and a flat-file store with an
//! append-only history log.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance when checking a stored scale against its fields.
pub const SCALE_RTOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Good,
    Bad,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub scene_id: String,
    pub quality: Quality,
    /// Endpoints in model units.
    pub line: Option<[[f64; 3]; 2]>,
    pub measured_meters: Option<f64>,
    pub scale_to_meters: Option<f64>,
    pub annotator: String,
    /// RFC 3339.
    pub timestamp: String,
}

/// Body of an annotation post. The server fills in the scale and, when
/// missing, the timestamp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationSubmission {
    #[serde(default)]
    pub scene_id: Option<String>,
    pub quality: Quality,
    #[serde(default)]
    pub line: Option<[[f64; 3]; 2]>,
    #[serde(default)]
    pub measured_meters: Option<f64>,
    #[serde(default)]
    pub scale_to_meters: Option<f64>,
    pub annotator: String,
    #[serde(default)]
    pub timestamp: Option<String>,
}

#[derive(Debug, Error, PartialEq, Serialize)]
#[error("{field}: {message}")]
pub struct ValidationError {
    pub field: &'static str,
    pub message: String,
}

fn invalid(field: &'static str, message: impl Into<String>) -> ValidationError {
    ValidationError {
        field,
        message: message.into(),
    }
}

pub fn line_length(line: &[[f64; 3]; 2]) -> f64 {
    let [a, b] = line;
    ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt()
}

/// `measured / ‖line[1] − line[0]‖` after checking both inputs.
pub fn scale_from_line(line: &[[f64; 3]; 2], measured_meters: f64) -> Result<f64, ValidationError> {
    if !line.iter().flatten().all(|v| v.is_finite()) {
        return Err(invalid("line", "endpoints must be finite"));
    }
    if !(measured_meters > 0.0 && measured_meters.is_finite()) {
        return Err(invalid("measured_meters", "must be a positive number"));
    }
    let len = line_length(line);
    if len <= 0.0 {
        return Err(invalid("line", "endpoints must be distinct"));
    }
    Ok(measured_meters / len)
}

fn scales_agree(a: f64, b: f64) -> bool {
    (a - b).abs() <= SCALE_RTOL * a.abs().max(b.abs())
}

fn check_id(id: &str) -> Result<(), ValidationError> {
    let ok = !id.is_empty() && !id.starts_with('.') && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
    if ok {
        Ok(())
    } else {
        Err(invalid("scene_id", format!("invalid scene id {id:?}")))
    }
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<(), ValidationError> {
        check_id(&self.scene_id)?;
        if self.annotator.trim().is_empty() {
            return Err(invalid("annotator", "must not be empty"));
        }
        chrono::DateTime::parse_from_rfc3339(&self.timestamp).map_err(|e| invalid("timestamp", e.to_string()))?;
        match (&self.line, self.measured_meters) {
            (Some(line), Some(m)) => {
                let s = scale_from_line(line, m)?;
                match self.scale_to_meters {
                    Some(stored) if scales_agree(stored, s) => Ok(()),
                    Some(stored) => Err(invalid("scale_to_meters", format!("{stored} does not match measured/length = {s}"))),
                    None => Err(invalid("scale_to_meters", "missing")),
                }
            }
            (None, None) if self.quality == Quality::Bad => match self.scale_to_meters {
                None => Ok(()),
                Some(_) => Err(invalid("scale_to_meters", "set without a measurement")),
            },
            (None, None) => Err(invalid("line", "a good reconstruction needs a measured line")),
            (None, Some(_)) => Err(invalid("line", "missing")),
            (Some(_), None) => Err(invalid("measured_meters", "missing")),
        }
    }
}

impl AnnotationSubmission {
    /// Record for scene `scene_id`, stamped with `now` when no timestamp
    /// was posted.
    pub fn into_record(self, scene_id: &str, now: &str) -> Result<AnnotationRecord, ValidationError> {
        if let Some(id) = &self.scene_id {
            if id != scene_id {
                return Err(invalid("scene_id", format!("body names {id:?} but the URL names {scene_id:?}")));
            }
        }
        let scale = match (&self.line, self.measured_meters) {
            (Some(line), Some(m)) => Some(scale_from_line(line, m)?),
            _ => None,
        };
        if let (Some(posted), Some(s)) = (self.scale_to_meters, scale) {
            if !scales_agree(posted, s) {
                return Err(invalid("scale_to_meters", format!("{posted} does not match measured/length = {s}")));
            }
        }
        let rec = AnnotationRecord {
            scene_id: scene_id.to_string(),
            quality: self.quality,
            line: self.line,
            measured_meters: self.measured_meters,
            scale_to_meters: scale.or(self.scale_to_meters),
            annotator: self.annotator,
            timestamp: self.timestamp.unwrap_or_else(|| now.to_string()),
        };
        rec.validate()?;
        Ok(rec)
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: corrupt record: {detail}")]
    Corrupt { path: String, detail: String },
    #[error(transparent)]
    Invalid(#[from] ValidationError),
    #[error("injected fault after temp write")]
    Injected,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One JSON file per scene under `annotations/`, plus `history.log`.
pub struct AnnotationStore {
    root: PathBuf,
    scene_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    log_lock: Mutex<()>,
    fail_before_rename: AtomicBool,
}

impl AnnotationStore {
    pub fn open(root: &Path) -> Result<Self, StoreError> {
        let dir = root.join("annotations");
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(Self {
            root: root.to_path_buf(),
            scene_locks: Mutex::new(HashMap::new()),
            log_lock: Mutex::new(()),
            fail_before_rename: AtomicBool::new(false),
        })
    }

    pub fn record_path(&self, scene_id: &str) -> PathBuf {
        self.root.join("annotations").join(format!("{scene_id}.json"))
    }

    pub fn history_path(&self) -> PathBuf {
        self.root.join("history.log")
    }

    /// Fault injection: the next saves stop after writing the temp file.
    pub fn inject_rename_failure(&self, on: bool) {
        self.fail_before_rename.store(on, Ordering::SeqCst);
    }

    fn scene_lock(&self, scene_id: &str) -> Arc<Mutex<()>> {
        let mut locks = self.scene_locks.lock().unwrap_or_else(|e| e.into_inner());
        locks.entry(scene_id.to_string()).or_default().clone()
    }

    pub fn load(&self, scene_id: &str) -> Result<Option<AnnotationRecord>, StoreError> {
        check_id(scene_id)?;
        let path = self.record_path(scene_id);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let corrupt = |detail: String| StoreError::Corrupt {
            path: path.display().to_string(),
            detail,
        };
        let rec: AnnotationRecord = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
        rec.validate().map_err(|e| corrupt(e.to_string()))?;
        if rec.scene_id != scene_id {
            return Err(corrupt(format!("record names scene {:?}", rec.scene_id)));
        }
        Ok(Some(rec))
    }

    pub fn is_annotated(&self, scene_id: &str) -> bool {
        self.record_path(scene_id).is_file()
    }

    /// Temp file, fsync, rename; then one line appended to the history log.
    pub fn save(&self, rec: &AnnotationRecord) -> Result<(), StoreError> {
        rec.validate()?;
        let lock = self.scene_lock(&rec.scene_id);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        let path = self.record_path(&rec.scene_id);
        let tmp = path.with_extension("json.tmp");
        let mut body = serde_json::to_vec_pretty(rec).expect("record serializes");
        body.push(b'\n');
        {
            let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
            f.write_all(&body).map_err(io_err(&tmp))?;
            f.sync_all().map_err(io_err(&tmp))?;
        }
        if self.fail_before_rename.load(Ordering::SeqCst) {
            return Err(StoreError::Injected);
        }
        if let Err(e) = std::fs::rename(&tmp, &path) {
            let _ = std::fs::remove_file(&tmp);
            return Err(io_err(&path)(e));
        }
        let _log = self.log_lock.lock().unwrap_or_else(|e| e.into_inner());
        let log = self.history_path();
        let mut f = OpenOptions::new().create(true).append(true).open(&log).map_err(io_err(&log))?;
        let mut line = serde_json::to_vec(rec).expect("record serializes");
        line.push(b'\n');
        f.write_all(&line).map_err(io_err(&log))?;
        Ok(())
    }

    /// Every saved record in write order, optionally for one scene.
    pub fn history(&self, scene_id: Option<&str>) -> Result<Vec<AnnotationRecord>, StoreError> {
        let log = self.history_path();
        let f = match File::open(&log) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&log)(e)),
        };
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(io_err(&log))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
                path: format!("{}:{}", log.display(), i + 1),
                detail: e.to_string(),
            })?;
            if scene_id.map_or(true, |s| s == rec.scene_id) {
                out.push(rec);
            }
        }
        Ok(out)
    }
}
