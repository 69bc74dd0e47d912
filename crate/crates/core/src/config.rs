//! Tool configuration: TOML file, `EVB_*` environment variables and
//! `--section.key value` flags, applied in that order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::loss::TranslationMode;
use crate::pairs::CurationConfig;
use crate::pose_metrics::EvalOptions;
use crate::recon::ReconConfig;
use crate::repr::{ModelFamily, SoftmaxScope};
use crate::sampler::SamplerConfig;

pub const ENV_PREFIX: &str = "EVB_";

/// Keys that are absent from a dump when unset.
const OPTIONAL_KEYS: [&str; 1] = ["recon.icp.gate"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}:{col}: {message}")]
    Parse { path: String, line: usize, col: usize, message: String },
    #[error("{}{key}: {message}", .line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Invalid { key: String, line: Option<usize>, message: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReprConfig {
    pub delta: usize,
    pub family: ModelFamily,
    pub scope: SoftmaxScope,
}

impl Default for ReprConfig {
    fn default() -> Self {
        Self {
            delta: 2,
            family: ModelFamily::Vggt,
            scope: SoftmaxScope::AllKeys,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_t: f64,
    pub translation_mode: TranslationMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_t: 1.0,
            translation_mode: TranslationMode::AnchoredAbsolute,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub max_points: usize,
    pub seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            max_points: 100_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    /// Worker threads; 0 picks the number of cores.
    pub threads: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolConfig {
    pub curation: CurationConfig,
    pub pose: EvalOptions,
    pub recon: ReconConfig,
    pub sampler: SamplerConfig,
    pub repr: ReprConfig,
    pub loss: LossConfig,
    pub service: ServiceConfig,
    pub runtime: RuntimeConfig,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

/// Line of `key` inside `[section]` (or of the header when `key` is None).
fn locate(text: &str, section: &str, key: Option<&str>) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = h.trim().to_string();
            if key.is_none() && current == section {
                return Some(i + 1);
            }
            continue;
        }
        if let Some(k) = key {
            let lhs = line.split('=').next().unwrap_or("").trim();
            if current == section && lhs == k && line.contains('=') {
                return Some(i + 1);
            }
        }
    }
    None
}

fn leaf_paths(v: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaf_paths(v, &p, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

/// Every settable dotted key, sorted.
pub fn known_keys() -> Vec<String> {
    let v = toml::Value::try_from(ToolConfig::default()).expect("default config serializes");
    let mut out = Vec::new();
    leaf_paths(&v, "", &mut out);
    out.extend(OPTIONAL_KEYS.iter().map(|s| s.to_string()));
    out.sort();
    out
}

pub fn env_var_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.replace('.', "_").to_ascii_uppercase())
}

/// A TOML literal when it parses as one, otherwise a bare string.
pub fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut t = table;
    for p in parts {
        let entry = t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        if !entry.is_table() {
            *entry = toml::Value::Table(toml::Table::new());
        }
        t = entry.as_table_mut().expect("table");
    }
    t.insert(last.to_string(), value);
}

impl ToolConfig {
    pub fn from_toml_str(text: &str, path: &str) -> Result<Self, ConfigError> {
        let cfg: ToolConfig = toml::from_str(text).map_err(|e| {
            let (line, col) = e.span().map_or((0, 0), |s| line_col(text, s.start));
            ConfigError::Parse {
                path: path.to_string(),
                line,
                col,
                message: e.message().to_string(),
            }
        })?;
        cfg.validate_located(Some(text))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    /// File, then environment, then explicit `(key, value)` overrides.
    pub fn resolve<I>(file: Option<&Path>, env: I, overrides: &[(String, String)]) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let (text, label) = match file {
            Some(p) => (
                std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.display().to_string(),
                    source,
                })?,
                p.display().to_string(),
            ),
            None => (String::new(), "<defaults>".to_string()),
        };
        // parse once for located errors before merging
        Self::from_toml_str(&text, &label)?;
        let mut table: toml::Table = toml::from_str(&text).expect("validated above");
        let keys = known_keys();
        let env: std::collections::BTreeMap<String, String> = env.into_iter().collect();
        for key in &keys {
            if let Some(v) = env.get(&env_var_name(key)) {
                set_path(&mut table, key, parse_override_value(v));
            }
        }
        for (key, v) in overrides {
            if !keys.contains(key) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
            set_path(&mut table, key, parse_override_value(v));
        }
        let cfg: ToolConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| ConfigError::Invalid {
            key: "override".into(),
            line: None,
            message: e.message().to_string(),
        })?;
        cfg.validate_located(None)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_located(None)
    }

    fn validate_located(&self, text: Option<&str>) -> Result<(), ConfigError> {
        let fail = |section: &str, key: Option<&str>, message: String| ConfigError::Invalid {
            key: key.map_or(section.to_string(), |k| format!("{section}.{k}")),
            line: text.and_then(|t| locate(t, section, key).or_else(|| locate(t, section, None))),
            message,
        };
        self.curation.validate().map_err(|e| fail("curation", None, e.to_string()))?;
        if self.pose.thresholds.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(fail("pose", Some("thresholds"), "thresholds must be positive".into()));
        }
        if self.pose.auc_max == 0 {
            return Err(fail("pose", Some("auc_max"), "must be at least 1".into()));
        }
        self.recon.icp.validate().map_err(|e| fail("recon.icp", None, e.to_string()))?;
        if self.recon.max_align_points == 0 {
            return Err(fail("recon", Some("max_align_points"), "must be at least 1".into()));
        }
        self.sampler.validate().map_err(|e| fail("sampler", None, e.to_string()))?;
        if !(self.loss.lambda_t >= 0.0 && self.loss.lambda_t.is_finite()) {
            return Err(fail("loss", Some("lambda_t"), "must be non-negative".into()));
        }
        if self.service.max_points == 0 {
            return Err(fail("service", Some("max_points"), "must be at least 1".into()));
        }
        Ok(())
    }

    pub fn dump(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical dump.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.dump().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn no_env() -> Vec<(String, String)> {
        Vec::new()
    }

    #[test]
    fn dump_load_roundtrip() {
        let mut cfg = ToolConfig::default();
        cfg.recon.icp.gate = Some(0.25);
        cfg.pose.thresholds = vec![5.0, 15.0, 30.0];
        cfg.curation.k = 50;
        for c in [ToolConfig::default(), cfg] {
            let back = ToolConfig::from_toml_str(&c.dump(), "dump").unwrap();
            assert_eq!(back, c);
            assert_eq!(back.dump(), c.dump());
        }
    }

    #[test]
    fn parse_error_has_line() {
        let text = "[curation]\nk = 5\nbogus = 1\n";
        match ToolConfig::from_toml_str(text, "c.toml") {
            Err(ConfigError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let text = "[sampler]\nn = 4\nw_conn = \"x\"\n";
        match ToolConfig::from_toml_str(text, "c.toml") {
            Err(ConfigError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn validation_error_has_line() {
        let text = "[pose]\n\nauc_max = 0\n";
        match ToolConfig::from_toml_str(text, "c.toml") {
            Err(ConfigError::Invalid { line, key, .. }) => {
                assert_eq!(line, Some(3));
                assert_eq!(key, "pose.auc_max");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn precedence_file_env_cli() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "[curation]\nk = 7\nseed = 1\n[sampler]\nn = 3").unwrap();
        let env = vec![
            ("EVB_CURATION_K".to_string(), "9".to_string()),
            ("EVB_SAMPLER_N".to_string(), "4".to_string()),
            ("EVB_RECON_ICP_MAX_ITERS".to_string(), "12".to_string()),
            ("UNRELATED".to_string(), "1".to_string()),
        ];
        let cli = vec![("curation.k".to_string(), "11".to_string()), ("repr.family".to_string(), "pi3".to_string())];
        let cfg = ToolConfig::resolve(Some(f.path()), env, &cli).unwrap();
        assert_eq!(cfg.curation.k, 11);
        assert_eq!(cfg.curation.seed, 1);
        assert_eq!(cfg.sampler.n, 4);
        assert_eq!(cfg.recon.icp.max_iters, 12);
        assert_eq!(cfg.repr.family, ModelFamily::Pi3);
    }

    #[test]
    fn optional_and_unknown_overrides() {
        let cli = vec![("recon.icp.gate".to_string(), "0.5".to_string())];
        assert_eq!(ToolConfig::resolve(None, no_env(), &cli).unwrap().recon.icp.gate, Some(0.5));
        let cli = vec![("curation.nope".to_string(), "1".to_string())];
        assert!(matches!(ToolConfig::resolve(None, no_env(), &cli), Err(ConfigError::UnknownKey(_))));
        let cli = vec![("curation.k".to_string(), "many".to_string())];
        assert!(matches!(ToolConfig::resolve(None, no_env(), &cli), Err(ConfigError::Invalid { .. })));
    }

    #[test]
    fn env_names_and_hash() {
        assert_eq!(env_var_name("curation.max_pairs_per_scene"), "EVB_CURATION_MAX_PAIRS_PER_SCENE");
        assert!(known_keys().contains(&"loss.lambda_t".to_string()));
        let a = ToolConfig::default();
        let mut b = a.clone();
        b.sampler.seed = 1;
        assert_eq!(a.hash(), ToolConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
