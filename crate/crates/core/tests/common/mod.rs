#![allow(dead_code)]

use std::path::{Path, PathBuf};

use evb_core::pairs::OverlapCategory;
use evb_core::pose_metrics::{PairKey, PoseErrorRecord};
use evb_core::so3::RotationSO3;
use nalgebra::{Matrix3, Vector3};
use serde::Deserialize;

pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures").join(rel)
}

#[derive(Deserialize)]
struct ErrorRow {
    scene: String,
    image_a: u32,
    image_b: u32,
    category: OverlapCategory,
    rot_err: f64,
    trans_err: f64,
}

pub fn load_error_records(path: &Path) -> Vec<PoseErrorRecord> {
    let mut rdr = csv::Reader::from_path(path).expect("fixture readable");
    rdr.deserialize::<ErrorRow>()
        .map(|r| {
            let r = r.expect("fixture row");
            PoseErrorRecord {
                key: PairKey {
                    scene: r.scene,
                    image_a: r.image_a,
                    image_b: r.image_b,
                },
                category: r.category,
                rot_err: r.rot_err,
                trans_err: Some(r.trans_err),
                excluded_reason: None,
            }
        })
        .collect()
}

#[derive(Deserialize, Clone)]
pub struct SyntheticRow {
    pub r1: [f64; 9],
    pub r2: [f64; 9],
    pub t1: [f64; 3],
    pub t2: [f64; 3],
    pub rot_err: f64,
    pub trans_err: f64,
}

impl SyntheticRow {
    pub fn rotations(&self) -> (RotationSO3, RotationSO3) {
        let m = |v: &[f64; 9]| RotationSO3::from_matrix_unchecked(Matrix3::from_row_slice(v));
        (m(&self.r1), m(&self.r2))
    }

    pub fn translations(&self) -> (Vector3<f64>, Vector3<f64>) {
        (Vector3::from(self.t1), Vector3::from(self.t2))
    }
}

pub fn load_synthetic() -> Vec<SyntheticRow> {
    std::fs::read_to_string(fixture("synthetic_1000.jsonl"))
        .expect("fixture readable")
        .lines()
        .map(|l| serde_json::from_str(l).expect("fixture row"))
        .collect()
}

#[derive(Deserialize, Debug, Clone, PartialEq)]
pub struct OracleSummary {
    pub n: usize,
    pub mre: f64,
    pub ra15: f64,
    pub ra30: f64,
    pub mte: f64,
    pub ta15: f64,
    pub ta30: f64,
    pub auc30: f64,
}

pub fn load_json<T: for<'de> Deserialize<'de>>(rel: &str) -> T {
    serde_json::from_str(&std::fs::read_to_string(fixture(rel)).expect("fixture readable")).expect("fixture json")
}

/// Plain-array geodesic angle in degrees, independent of the library.
pub fn oracle_geodesic_deg(a: &[f64; 9], b: &[f64; 9]) -> f64 {
    // tr(aᵀb) = Σ a_ij b_ij
    let tr: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

pub fn oracle_trans_deg(t: &[f64; 3], s: &[f64; 3]) -> f64 {
    let dot = t[0] * s[0] + t[1] * s[1] + t[2] * s[2];
    let n = (t.iter().map(|v| v * v).sum::<f64>()).sqrt() * (s.iter().map(|v| v * v).sum::<f64>()).sqrt();
    (dot.abs() / n).clamp(0.0, 1.0).acos().to_degrees()
}

pub fn oracle_median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn oracle_frac_below(v: &[f64], tau: f64) -> f64 {
    v.iter().filter(|e| **e < tau).count() as f64 / v.len() as f64
}

pub fn oracle_auc(rot: &[f64], trans: &[f64], tau_max: u32) -> f64 {
    let worst: Vec<f64> = rot.iter().zip(trans).map(|(r, t)| r.max(*t)).collect();
    let mut hits = 0u64;
    for tau in 1..=tau_max {
        hits += worst.iter().filter(|e| **e < tau as f64).count() as u64;
    }
    hits as f64 / (worst.len() as f64 * tau_max as f64)
}

pub fn fixture_scene_dirs() -> Vec<PathBuf> {
    (0..10).map(|k| fixture(&format!("colmap/scene_{k:02}"))).collect()
}

#[derive(Debug, Default)]
pub struct FuzzStats {
    pub runs: usize,
    pub accepted: usize,
    pub violations: Vec<String>,
}

fn mutate(rng: &mut rand_chacha::ChaCha8Rng, mut bytes: Vec<u8>, text: bool) -> Vec<u8> {
    use rand::Rng;
    let tokens: &[&[u8]] = &[b" ", b"\n", b"-1", b"nan", b"inf", b"1e309", b"0", b"#", b"PINHOLE", b"4294967296"];
    for _ in 0..rng.gen_range(1..=4) {
        let len = bytes.len();
        match rng.gen_range(0..6) {
            0 if len > 0 => {
                let i = rng.gen_range(0..len);
                bytes[i] ^= 1 << rng.gen_range(0..8);
            }
            1 if len > 0 => {
                let i = rng.gen_range(0..len);
                bytes[i] = rng.gen();
            }
            2 => bytes.truncate(rng.gen_range(0..=len)),
            3 if len > 0 => {
                let i = rng.gen_range(0..len);
                let j = rng.gen_range(i..=len.min(i + 16));
                bytes.drain(i..j);
            }
            4 => {
                let i = rng.gen_range(0..=len);
                if text {
                    let t = tokens[rng.gen_range(0..tokens.len())];
                    bytes.splice(i..i, t.iter().copied());
                } else {
                    let n = rng.gen_range(1..9);
                    let junk: Vec<u8> = (0..n).map(|_| rng.gen()).collect();
                    bytes.splice(i..i, junk);
                }
            }
            _ if len > 8 => {
                // overwrite a count or id field with an extreme value
                let i = rng.gen_range(0..len - 8);
                let v: u64 = [0, 1, u32::MAX as u64, u64::MAX, 1 << 40][rng.gen_range(0..5)];
                bytes[i..i + 8].copy_from_slice(&v.to_le_bytes());
            }
            _ => {}
        }
    }
    bytes
}

/// Byte-level mutations of fixture models. Every accepted scene must pass
/// `validate` and survive a binary round trip unchanged.
pub fn fuzz_colmap(n: usize, seed: u64) -> FuzzStats {
    use evb_core::colmap::{decode_binary_model, decode_text_model, encode_binary_model, encode_text_model, read_sparse_model, ModelFormat};
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let scenes: Vec<_> = fixture_scene_dirs().iter().map(|d| read_sparse_model(d, ModelFormat::Text).expect("fixture")).collect();
    let bins: Vec<[Vec<u8>; 3]> = scenes.iter().map(encode_binary_model).collect();
    let texts: Vec<[String; 3]> = scenes.iter().map(encode_text_model).collect();
    let mut stats = FuzzStats::default();
    for run in 0..n {
        let k = rng.gen_range(0..scenes.len());
        let which = rng.gen_range(0..3);
        let text = rng.gen_bool(0.5);
        let parsed = if text {
            let mut files: Vec<Vec<u8>> = texts[k].iter().map(|s| s.clone().into_bytes()).collect();
            files[which] = mutate(&mut rng, std::mem::take(&mut files[which]), true);
            let s: Vec<String> = files.into_iter().map(|b| String::from_utf8_lossy(&b).into_owned()).collect();
            decode_text_model(&s[0], &s[1], &s[2])
        } else {
            let mut files = bins[k].clone();
            files[which] = mutate(&mut rng, std::mem::take(&mut files[which]), false);
            decode_binary_model(&files[0], &files[1], &files[2])
        };
        stats.runs += 1;
        if let Ok(scene) = parsed {
            stats.accepted += 1;
            if let Err(e) = scene.validate() {
                stats.violations.push(format!("run {run}: accepted invalid scene: {e}"));
                continue;
            }
            let b = encode_binary_model(&scene);
            match decode_binary_model(&b[0], &b[1], &b[2]) {
                Ok(again) if again == scene => {}
                Ok(_) => stats.violations.push(format!("run {run}: round trip changed the scene")),
                Err(e) => stats.violations.push(format!("run {run}: re-encoded scene rejected: {e}")),
            }
        }
    }
    stats
}
