mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;

use common::*;
use evb_core::colmap::{camera_fov_deg, read_sparse_model, ModelFormat};
use evb_core::pairs::{classify_overlap, read_pairs_jsonl, ImagePair};
use evb_core::so3::{matrix_to_quat, relative_rotation};
use evb_core::tensor::{read_tensor, write_tensor, Tensor};
use serde_json::Value;

struct Out {
    code: i32,
    stdout: Vec<u8>,
    stderr: String,
}

fn evb_env(args: &[&str], env: &[(&str, &str)]) -> Out {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_evb"));
    for (k, _) in std::env::vars() {
        if k.starts_with("EVB_") {
            cmd.env_remove(k);
        }
    }
    cmd.args(args).envs(env.iter().copied());
    let o = cmd.output().expect("binary runs");
    Out {
        code: o.status.code().unwrap_or(-1),
        stdout: o.stdout,
        stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
    }
}

fn evb(args: &[&str]) -> Out {
    evb_env(args, &[])
}

fn ok(o: &Out) {
    assert_eq!(o.code, 0, "stderr: {}", o.stderr);
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn curate_matches_module_oracle_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let model = fixture("scene_ring/sparse");
    let (p1, p2, st1, st2) = (dir.path().join("p1.jsonl"), dir.path().join("p2.jsonl"), dir.path().join("s1.json"), dir.path().join("s2.json"));
    ok(&evb(&["pairs", "curate", "--model", s(&model), "--scene-id", "ring", "--out", s(&p1), "--stats", s(&st1)]));
    ok(&evb(&["pairs", "curate", "--model", s(&model), "--scene-id", "ring", "--out", s(&p2), "--stats", s(&st2)]));
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(std::fs::read(&st1).unwrap(), std::fs::read(&st2).unwrap());

    let scene = read_sparse_model(&model, ModelFormat::Text).unwrap();
    let pairs: Vec<ImagePair> = read_pairs_jsonl(&p1).unwrap();
    assert!(!pairs.is_empty());
    // brute-force mutual 5-NN on camera centers
    let ids: Vec<u32> = scene.images.keys().copied().collect();
    let knn = |a: u32| -> BTreeSet<u32> {
        let ca = scene.images[&a].center();
        let mut d: Vec<(f64, u32)> = ids.iter().filter(|&&b| b != a).map(|&b| ((scene.images[&b].center() - ca).norm(), b)).collect();
        d.sort_by(|x, y| x.partial_cmp(y).unwrap());
        d.iter().take(5).map(|x| x.1).collect()
    };
    for p in &pairs {
        assert!(p.image_a < p.image_b);
        assert!(knn(p.image_a).contains(&p.image_b) && knn(p.image_b).contains(&p.image_a));
        let (ia, ib) = (&scene.images[&p.image_a], &scene.images[&p.image_b]);
        let rel = relative_rotation(&ia.rotation(), &ib.rotation());
        let fa = camera_fov_deg(scene.camera_of(ia).unwrap());
        let fb = camera_fov_deg(scene.camera_of(ib).unwrap());
        assert_eq!(p.category, classify_overlap(&rel, fa, fb));
    }
    let stats = json(&st1);
    assert_eq!(stats["result"]["n_pairs"], pairs.len());
    assert_eq!(stats["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn missing_model_is_input_error_naming_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = evb(&["pairs", "curate", "--model", s(dir.path()), "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("cameras"), "{}", o.stderr);
    let diag: Value = serde_json::from_str(o.stderr.lines().last().unwrap()).unwrap();
    assert_eq!(diag["error"], "input");
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(evb(&["frobnicate"]).code, 1);
    assert_eq!(evb(&["eval", "pose"]).code, 1);
    assert_eq!(evb(&["config", "dump", "--curation.nope", "3"]).code, 1);
    assert_eq!(evb(&["config", "dump", "--curation.k"]).code, 1);
    ok(&evb(&["--help"]));
}

#[test]
fn eval_pose_fixture_matches_oracle_across_threads() {
    let dir = tempfile::tempdir().unwrap();
    let (pairs, preds) = (fixture("pairs_100.jsonl"), fixture("preds_100.jsonl"));
    let mut outs = Vec::new();
    for t in ["1", "4", "8", "8"] {
        let out = dir.path().join(format!("r{}.json", outs.len()));
        ok(&evb(&["eval", "pose", "--pairs", s(&pairs), "--preds", s(&preds), "--out", s(&out), "--runtime.threads", t]));
        outs.push(std::fs::read(&out).unwrap());
    }
    // the thread count is part of the config hash, so compare results only
    let results: Vec<Value> = outs.iter().map(|b| serde_json::from_slice::<Value>(b).unwrap()["result"].clone()).collect();
    assert!(results.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(outs[2], outs[3]);
    let oracle: Value = serde_json::from_str(&std::fs::read_to_string(fixture("pose_100_oracle.json")).unwrap()).unwrap();
    let all = &results[0]["buckets"]["all"];
    assert!((all["mre"].as_f64().unwrap() - oracle["buckets"]["all"]["mre"].as_f64().unwrap()).abs() < 1e-7);
    assert_eq!(all["auc"], oracle["buckets"]["all"]["auc30"]);
    assert_eq!(all["ra"][0]["fraction"], oracle["buckets"]["all"]["ra15"]);
}

#[test]
fn eval_pose_strict_and_permissive() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("preds.jsonl");
    let text = std::fs::read_to_string(fixture("preds_100.jsonl")).unwrap();
    let kept: Vec<&str> = text.lines().skip(1).collect();
    std::fs::write(&preds, kept.join("\n") + "\nnot json\n").unwrap();
    let o = evb(&["eval", "pose", "--pairs", s(&fixture("pairs_100.jsonl")), "--preds", s(&preds)]);
    assert_eq!(o.code, 2);
    let o = evb(&["eval", "pose", "--pairs", s(&fixture("pairs_100.jsonl")), "--preds", s(&preds), "--pose.permissive", "true"]);
    ok(&o);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["result"]["unmatched"].as_array().unwrap().len(), 1);
    assert_eq!(v["result"]["row_errors"].as_array().unwrap().len(), 1);
    assert_eq!(v["result"]["buckets"]["all"]["n_pairs"], 99);
}

fn perfect_preds(pairs: &[ImagePair]) -> String {
    let mut out = String::new();
    for p in pairs {
        let q = matrix_to_quat(&p.r_rel_gt).to_array();
        let t = p.t_rel_gt.0;
        out += &serde_json::json!({
            "scene": p.scene_id, "image_a": p.image_a, "image_b": p.image_b,
            "qa": [1.0, 0.0, 0.0, 0.0], "ta": [0.0, 0.0, 0.0],
            "qb": q, "tb": [t.x, t.y, t.z],
        })
        .to_string();
        out.push('\n');
    }
    out
}

#[test]
fn perfect_predictions_give_zero_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // pose
    let pairs = read_pairs_jsonl(&fixture("pairs_100.jsonl")).unwrap();
    std::fs::write(d.join("perfect.jsonl"), perfect_preds(&pairs)).unwrap();
    let o = evb(&["eval", "pose", "--pairs", s(&fixture("pairs_100.jsonl")), "--preds", s(&d.join("perfect.jsonl"))]);
    ok(&o);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let all = &v["result"]["buckets"]["all"];
    // arccos near 1 resolves angles only to about 1e-8 rad
    assert!(all["mre"].as_f64().unwrap() < 1e-5);
    assert!(all["mte"].as_f64().unwrap() < 1e-5);
    assert_eq!(all["ra"][0]["fraction"], 1.0);
    assert_eq!(all["auc"], 1.0);

    // recon: prediction is the reference cloud itself
    let scene = read_sparse_model(&fixture("scene_ring/sparse"), ModelFormat::Text).unwrap();
    let pts: Vec<f32> = evb_core::colmap::scene_points(&scene).iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect();
    let n = pts.len() / 3;
    write_tensor(&d.join("pred.evbt"), &Tensor::from_f32(vec![n, 3], pts.clone()).unwrap()).unwrap();
    write_tensor(&d.join("gt.evbt"), &Tensor::from_f32(vec![n, 3], pts).unwrap()).unwrap();
    std::fs::write(d.join("recon.csv"), "scene,pred,gt,scale\nring,pred.evbt,gt.evbt,2.5\n").unwrap();
    let o = evb(&["eval", "recon", "--manifest", s(&d.join("recon.csv"))]);
    ok(&o);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let agg = &v["result"]["aggregate"];
    for k in ["acc_mean", "acc_median", "cmp_mean", "cmp_median"] {
        assert!(agg[k].as_f64().unwrap() < 1e-6, "{k} = {}", agg[k]);
    }

    // depth
    let gt: Vec<f32> = (0..48).map(|i| 1.0 + i as f32 * 0.25).collect();
    write_tensor(&d.join("d_gt.evbt"), &Tensor::from_f32(vec![6, 8], gt.clone()).unwrap()).unwrap();
    write_tensor(&d.join("d_pred.evbt"), &Tensor::from_f32(vec![6, 8], gt.iter().map(|v| v * 3.0).collect()).unwrap()).unwrap();
    std::fs::write(d.join("depth.csv"), "scene,image,pred_path,gt_path\nring,0001.jpg,d_pred.evbt,d_gt.evbt\n").unwrap();
    let o = evb(&["eval", "depth", "--manifest", s(&d.join("depth.csv"))]);
    ok(&o);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["result"]["all"]["abs_rel"].as_f64().unwrap() < 1e-7);
    assert_eq!(v["result"]["all"]["delta1"], 1.0);
}

#[test]
fn recon_scale_from_annotation_store() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let store = evb_core::annotation::AnnotationStore::open(&d.join("state")).unwrap();
    let rec = evb_core::annotation::AnnotationSubmission {
        scene_id: None,
        quality: evb_core::annotation::Quality::Good,
        line: Some([[0.0; 3], [2.0, 0.0, 0.0]]),
        measured_meters: Some(4.0),
        scale_to_meters: None,
        annotator: "t".into(),
        timestamp: Some("2026-01-01T00:00:00Z".into()),
    }
    .into_record("ring", "2026-01-01T00:00:00Z")
    .unwrap();
    store.save(&rec).unwrap();
    let gt: Vec<f32> = (0..60).map(|i| ((i * 7919) % 97) as f32 * 0.1).collect();
    let pred: Vec<f32> = gt.chunks(3).flat_map(|p| [p[0] + 0.01, p[1], p[2]]).collect();
    write_tensor(&d.join("gt.evbt"), &Tensor::from_f32(vec![20, 3], gt).unwrap()).unwrap();
    write_tensor(&d.join("pred.evbt"), &Tensor::from_f32(vec![20, 3], pred).unwrap()).unwrap();
    std::fs::write(d.join("m.csv"), "scene,pred,gt,scale\nring,pred.evbt,gt.evbt,\nother,pred.evbt,gt.evbt,\n").unwrap();
    let o = evb(&["eval", "recon", "--manifest", s(&d.join("m.csv")), "--state-dir", s(&d.join("state"))]);
    ok(&o);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["result"]["scenes"][0]["scale_to_meters"], 2.0);
    assert!(v["result"]["scenes"][1]["error"].as_str().unwrap().contains("scale"));
    assert_eq!(v["result"]["n_failed"], 1);
}

#[test]
fn sample_outputs_names_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let model = fixture("scene_ring/sparse");
    let run = |seed: &str| {
        let o = evb(&["sample", "--model", s(&model), "--scale", "2.0", "--sampler.n", "6", "--sampler.min_shared", "20", "--sampler.seed", seed]);
        ok(&o);
        o.stdout
    };
    let a = run("3");
    assert_eq!(a, run("3"));
    let names: Vec<String> = serde_json::from_slice(&a).unwrap();
    assert!(!names.is_empty() && names.len() <= 6);
    assert!(names.iter().all(|n| n.ends_with(".jpg")));
    let o = evb(&["sample", "--model", s(&model), "--state-dir", s(dir.path())]);
    assert_eq!(o.code, 2, "missing scale must be an input error");
}

fn write_traces(d: &Path) -> std::path::PathBuf {
    // per-layer similarity 0.9, 0.9, 0.2, 0.9, 0.3, 0.9
    let sims = [0.9f64, 0.9, 0.2, 0.9, 0.3, 0.9];
    let mut layers = Vec::new();
    for (l, &c) in sims.iter().enumerate() {
        let input = Tensor::from_f64(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let output = Tensor::from_f64(vec![1, 2], vec![c, (1.0 - c * c).sqrt()]).unwrap();
        let (i, o) = (format!("in{l}.evbt"), format!("out{l}.evbt"));
        write_tensor(&d.join(&i), &input).unwrap();
        write_tensor(&d.join(&o), &output).unwrap();
        layers.push(serde_json::json!({"layer": l, "input": i, "output": o}));
    }
    let m = d.join("traces.json");
    std::fs::write(&m, serde_json::json!({"kind": "global", "traces": [{"layers": layers}]}).to_string()).unwrap();
    m
}

#[test]
fn repr_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let traces = write_traces(d);
    let o = evb(&["repr", "similarity", "--traces", s(&traces), "--out", s(&d.join("curve.json"))]);
    ok(&o);
    let curve = json(&d.join("curve.json"));
    assert_eq!(curve["result"]["curve"]["layers"].as_array().unwrap().len(), 6);
    let o = evb(&["repr", "select", "--curve", s(&d.join("curve.json")), "--repr.delta", "1", "--out", s(&d.join("sel.json"))]);
    ok(&o);
    let layers: Vec<usize> = serde_json::from_value(json(&d.join("sel.json"))["result"]["layers"].clone()).unwrap();
    assert_eq!(layers, vec![2, 4]);
    let o = evb(&["repr", "mask", "--layers", s(&d.join("sel.json")), "--kind", "frame"]);
    ok(&o);
    let mask: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(mask[0]["layer"], 2);
    assert_eq!(mask[0]["kind"], "frame");
    assert_eq!(mask[0]["parameter_names"][0], "frame_blocks.2.attn.qkv.bias");
    let o = evb(&["repr", "select", "--family", "vggt"]);
    ok(&o);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["result"]["layers"], serde_json::json!([4, 11, 17, 23]));
    assert_eq!(evb(&["repr", "select", "--family", "pi3"]).code, 2);
}

#[test]
fn repr_attention_map() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // 1 head, 2 + 4 tokens, d_h = 2
    let q = Tensor::from_f64(vec![1, 6, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.0, 0.0, 2.0, 0.0]).unwrap();
    write_tensor(&d.join("q.evbt"), &q).unwrap();
    write_tensor(&d.join("k.evbt"), &q).unwrap();
    let out = d.join("map.evbt");
    ok(&evb(&["repr", "attention", "--q", s(&d.join("q.evbt")), "--k", s(&d.join("k.evbt")), "--grid1", "1x2", "--grid2", "2x2", "--query", "0", "--out", s(&out)]));
    let map = read_tensor(&out).unwrap();
    assert_eq!(map.shape(), &[2, 2]);
    let total: f64 = map.to_f64_vec().iter().sum();
    assert!(total > 0.0 && total < 1.0);
    ok(&evb(&["repr", "attention", "--q", s(&d.join("q.evbt")), "--k", s(&d.join("k.evbt")), "--grid1", "1x2", "--grid2", "2x2", "--query", "0", "--out", s(&out), "--repr.scope", "second_image"]));
    let total: f64 = read_tensor(&out).unwrap().to_f64_vec().iter().sum();
    assert!((total - 1.0).abs() < 1e-12);
    let bad = evb(&["repr", "attention", "--q", s(&d.join("q.evbt")), "--k", s(&d.join("k.evbt")), "--grid1", "3x3", "--grid2", "2x2", "--query", "0", "--out", s(&out)]);
    assert_eq!(bad.code, 2);
}

#[test]
fn loss_rows() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("rows.jsonl");
    let h = std::f64::consts::FRAC_1_SQRT_2;
    std::fs::write(
        &input,
        format!(
            "{}\n{}\n",
            serde_json::json!({"q1p": [1, 0, 0, 0], "q2p": [1, 0, 0, 0], "q1g": [1, 0, 0, 0], "q2g": [1, 0, 0, 0]}),
            serde_json::json!({"q1p": [1, 0, 0, 0], "q2p": [h, 0, 0, h], "q1g": [1, 0, 0, 0], "q2g": [1, 0, 0, 0], "anchor": true}),
        ),
    )
    .unwrap();
    let o = evb(&["loss", "--input", s(&input)]);
    ok(&o);
    let lines: Vec<Value> = o.stdout.split(|b| *b == b'\n').filter(|l| !l.is_empty()).map(|l| serde_json::from_slice(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["rotation"], 0.0);
    assert!((lines[1]["rotation"].as_f64().unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-9);
    std::fs::write(&input, "{\"q1p\": [1,0,0,0]}\n").unwrap();
    let o = evb(&["loss", "--input", s(&input)]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains(":1:"), "{}", o.stderr);
}

#[test]
fn convert_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let src = fixture("colmap/scene_03");
    let (b, t) = (dir.path().join("bin"), dir.path().join("txt"));
    ok(&evb(&["convert", "--input", s(&src), "--output", s(&b), "--format", "binary"]));
    ok(&evb(&["convert", "--input", s(&b), "--output", s(&t), "--format", "text"]));
    let a = read_sparse_model(&src, ModelFormat::Text).unwrap();
    assert_eq!(read_sparse_model(&b, ModelFormat::Binary).unwrap(), a);
    assert_eq!(read_sparse_model(&t, ModelFormat::Text).unwrap(), a);
    assert_eq!(evb(&["convert", "--input", s(&src), "--output", s(&b), "--format", "auto"]).code, 1);
}

#[test]
fn config_dump_roundtrip_and_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[curation]\nk = 7\n[sampler]\nn = 3\n").unwrap();
    let o = evb_env(&["config", "dump", "--config", s(&cfg), "--sampler.n", "9"], &[("EVB_CURATION_K", "8"), ("EVB_SAMPLER_N", "4")]);
    ok(&o);
    let dumped = String::from_utf8(o.stdout).unwrap();
    let v: toml::Table = toml::from_str(&dumped).unwrap();
    assert_eq!(v["curation"]["k"].as_integer(), Some(8));
    assert_eq!(v["sampler"]["n"].as_integer(), Some(9));
    let again = dir.path().join("again.toml");
    std::fs::write(&again, &dumped).unwrap();
    let o2 = evb(&["config", "dump", "--config", s(&again)]);
    ok(&o2);
    assert_eq!(String::from_utf8(o2.stdout).unwrap(), dumped);

    std::fs::write(&cfg, "[curation]\nk = 7\n\n[recon.icp]\nmax_iters = \"many\"\n").unwrap();
    let o = evb(&["config", "dump", "--config", s(&cfg)]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains(":5:"), "{}", o.stderr);
}

#[test]
fn reports_are_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let traces = write_traces(d);
    let cmds: Vec<Vec<String>> = vec![
        vec!["eval", "pose", "--pairs", s(&fixture("pairs_100.jsonl")), "--preds", s(&fixture("preds_100.jsonl"))],
        vec!["repr", "similarity", "--traces", s(&traces)],
        vec!["repr", "mask", "--family", "wm"],
        vec!["sample", "--model", s(&fixture("scene_ring/sparse")), "--scale", "1.5", "--sampler.min_trans_m", "2"],
        vec!["config", "dump"],
    ]
    .into_iter()
    .map(|v| v.into_iter().map(String::from).collect())
    .collect();
    for c in &cmds {
        let args: Vec<&str> = c.iter().map(String::as_str).collect();
        let a = evb(&args);
        ok(&a);
        assert_eq!(a.stdout, evb(&args).stdout, "{c:?}");
    }
}
