use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hfprune::cli::RunManifest;
use hfprune::model::{load_model, model_bytes, Model, ModelConfig};
use hfprune::pruning::{rho_from_overall, PrunePlan};
use serde_json::Value;
use tempfile::TempDir;

fn hfprune(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hfprune"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn hfprune_threads(dir: &Path, threads: &str, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hfprune"))
        .current_dir(dir)
        .env("HFPRUNE_THREADS", threads)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Tiny model with d_hidden = 10 plus calibration and prompt files.
fn fixture() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(hfprune(d, &[
        "gen-model", "--d-model", "16", "--layers", "2", "--heads", "2", "--d-hidden", "10", "--vocab", "32",
        "--max-seq", "16", "--seed", "3", "--out", "m.hfpw",
    ]));
    ok(hfprune(d, &["gen-tokens", "--vocab", "32", "--seq-len", "8", "--count", "12", "--seed", "1", "--out", "calib.tok"]));
    ok(hfprune(d, &["gen-tokens", "--vocab", "32", "--seq-len", "6", "--count", "9", "--seed", "2", "--out", "prompts.tok"]));
    dir
}

fn p(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

#[test]
fn score_writes_report_matching_model_shape() {
    let dir = fixture();
    ok(hfprune(dir.path(), &["score", "--model", "m.hfpw", "--calib", "calib.tok", "--criterion", "ie", "--out", "r.json"]));
    let r = json(&p(&dir, "r.json"));
    let layers = r["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 2);
    assert!(layers.iter().all(|l| l.as_array().unwrap().len() == 10));
    assert_eq!(r["token_count"], 96);
    assert_eq!(r["normalizer"], "token_positions");
    assert_eq!(r["criterion"], "ie");

    let m: RunManifest = serde_json::from_value(json(&p(&dir, "r.json.manifest.json"))).unwrap();
    assert_eq!(m.command, "score");
    assert_eq!(m.inputs["model"], load_model(p(&dir, "m.hfpw")).unwrap().digest());
    assert!(m.inputs.contains_key("calib"));
}

#[test]
fn sd_scores_vanish_with_warning() {
    let dir = fixture();
    let out = ok(hfprune(dir.path(), &["score", "--model", "m.hfpw", "--calib", "calib.tok", "--criterion", "sd", "--out", "r.json"]));
    assert!(stderr(&out).contains("zero gradient"));
    let r = json(&p(&dir, "r.json"));
    let max = r["layers"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|l| l.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()))
        .fold(0.0, f64::max);
    assert!(max <= 1e-6);
}

#[test]
fn missing_argument_and_bad_files_exit_two() {
    let dir = fixture();
    let out = hfprune(dir.path(), &["score", "--model", "m.hfpw", "--out", "r.json"]);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(p(&dir, "bad.hfpw"), b"HFPX\x01\0\0\0").unwrap();
    let out = hfprune(dir.path(), &["score", "--model", "bad.hfpw", "--calib", "calib.tok", "--out", "r.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("magic"), "{}", stderr(&out));
    assert_eq!(stderr(&out).lines().count(), 1);

    let out = hfprune(dir.path(), &["score", "--model", "nope.hfpw", "--calib", "calib.tok", "--out", "r.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn vocab_mismatch_exits_three() {
    let dir = fixture();
    ok(hfprune(dir.path(), &["gen-tokens", "--vocab", "64", "--seq-len", "8", "--count", "40", "--seed", "1", "--out", "wide.tok"]));
    let out = hfprune(dir.path(), &["score", "--model", "m.hfpw", "--calib", "wide.tok", "--out", "r.json"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn prune_rho_zero_is_byte_identical_and_floor_counts() {
    let dir = fixture();
    ok(hfprune(dir.path(), &["score", "--model", "m.hfpw", "--calib", "calib.tok", "--out", "r.json"]));
    ok(hfprune(dir.path(), &["prune", "--model", "m.hfpw", "--report", "r.json", "--rho", "0", "--out", "p0.hfpw"]));
    assert_eq!(std::fs::read(p(&dir, "p0.hfpw")).unwrap(), std::fs::read(p(&dir, "m.hfpw")).unwrap());

    ok(hfprune(dir.path(), &["prune", "--model", "m.hfpw", "--report", "r.json", "--rho", "0.25", "--out", "p.hfpw"]));
    let plan = PrunePlan::from_json(&std::fs::read_to_string(p(&dir, "p.hfpw.plan.json")).unwrap()).unwrap();
    assert!(plan.layers.iter().all(|l| l.removed.len() == 2 && l.kept.len() == 8));
    assert_eq!(load_model(p(&dir, "p.hfpw")).unwrap().config.d_hidden, vec![8, 8]);
    let m: RunManifest = serde_json::from_value(json(&p(&dir, "p.hfpw.manifest.json"))).unwrap();
    assert_eq!(m.rho, Some(0.25));
    assert_eq!(m.outputs["model"], load_model(p(&dir, "p.hfpw")).unwrap().digest());
}

#[test]
fn prune_overall_records_derived_rho() {
    let dir = fixture();
    ok(hfprune(dir.path(), &["score", "--model", "m.hfpw", "--calib", "calib.tok", "--out", "r.json"]));
    ok(hfprune(dir.path(), &["prune", "--model", "m.hfpw", "--report", "r.json", "--overall", "0.2", "--out", "p.hfpw"]));
    let model = load_model(p(&dir, "m.hfpw")).unwrap();
    let counts = model.param_counts();
    let expected = 0.2 * counts.total as f64 / counts.mlp as f64;
    let m: RunManifest = serde_json::from_value(json(&p(&dir, "p.hfpw.manifest.json"))).unwrap();
    assert!((m.rho.unwrap() - expected).abs() < 1e-12);
    assert_eq!(m.rho.unwrap(), rho_from_overall(&model, 0.2).unwrap());
    assert_eq!(m.overall, Some(0.2));
}

#[test]
fn infeasible_overall_exits_four() {
    let dir = fixture();
    ok(hfprune(dir.path(), &["score", "--model", "m.hfpw", "--calib", "calib.tok", "--out", "r.json"]));
    let out = hfprune(dir.path(), &["prune", "--model", "m.hfpw", "--report", "r.json", "--overall", "0.9", "--out", "p.hfpw"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    let out = hfprune(dir.path(), &["prune", "--model", "m.hfpw", "--report", "r.json", "--rho", "0.2", "--overall", "0.2", "--out", "p.hfpw"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn prune_rejects_report_for_other_shape() {
    let dir = fixture();
    ok(hfprune(dir.path(), &["score", "--model", "m.hfpw", "--calib", "calib.tok", "--out", "r.json"]));
    ok(hfprune(dir.path(), &[
        "gen-model", "--d-model", "16", "--layers", "2", "--heads", "2", "--d-hidden", "12", "--vocab", "32",
        "--max-seq", "16", "--out", "other.hfpw",
    ]));
    let out = hfprune(dir.path(), &["prune", "--model", "other.hfpw", "--report", "r.json", "--rho", "0.2", "--out", "p.hfpw"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn eval_identical_models() {
    let dir = fixture();
    ok(hfprune(dir.path(), &["eval", "--original", "m.hfpw", "--pruned", "m.hfpw", "--prompts", "prompts.tok", "--out", "f.json", "--csv", "rows.csv"]));
    let f = json(&p(&dir, "f.json"));
    assert_eq!(f["mean_js"], 0.0);
    assert_eq!(f["mean_topk_jaccard"], 1.0);
    assert_eq!(f["k"], 15);
    assert_eq!(f["prompt_count"], 9);
    assert_eq!(f["positions_per_prompt"], 1);
    assert_eq!(f["js_log_base"], 2);
    assert_eq!(f["ppl_original"], f["ppl_pruned"]);
    let csv = std::fs::read_to_string(p(&dir, "rows.csv")).unwrap();
    assert_eq!(csv.lines().count(), 10);
}

#[test]
fn eval_warns_on_broken_provenance() {
    let dir = fixture();
    ok(hfprune(dir.path(), &["score", "--model", "m.hfpw", "--calib", "calib.tok", "--out", "r.json"]));
    ok(hfprune(dir.path(), &["prune", "--model", "m.hfpw", "--report", "r.json", "--rho", "0.3", "--out", "p.hfpw"]));
    let good = ok(hfprune(dir.path(), &["eval", "--original", "m.hfpw", "--pruned", "p.hfpw", "--prompts", "prompts.tok", "--out", "f.json"]));
    assert!(!stderr(&good).contains("warning"));
    let f = json(&p(&dir, "f.json"));
    assert!(f["mean_js"].as_f64().unwrap() > 0.0);

    ok(hfprune(dir.path(), &[
        "gen-model", "--d-model", "16", "--layers", "2", "--heads", "2", "--d-hidden", "10", "--vocab", "32",
        "--max-seq", "16", "--seed", "99", "--out", "other.hfpw",
    ]));
    let bad = ok(hfprune(dir.path(), &["eval", "--original", "other.hfpw", "--pruned", "p.hfpw", "--prompts", "prompts.tok", "--out", "f2.json"]));
    assert!(stderr(&bad).contains("digest mismatch"));
}

#[test]
fn compare_builds_cells_and_flags_sd() {
    let dir = fixture();
    ok(hfprune(dir.path(), &[
        "compare", "--model", "m.hfpw", "--calib", "calib.tok", "--prompts", "prompts.tok", "--criteria", "ie,ce",
        "--rhos", "0.2,0.3", "--out", "t.json",
    ]));
    let t = json(&p(&dir, "t.json"));
    let cells = t["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 4);
    for c in cells {
        for key in ["mean_js", "mean_topk_jaccard", "ppl"] {
            assert!(c[key].is_number(), "{key}");
        }
        assert!(c["flag"].is_null());
    }

    ok(hfprune(dir.path(), &[
        "compare", "--model", "m.hfpw", "--calib", "calib.tok", "--criteria", "ie,sd", "--rhos", "0.3",
        "--random-baseline", "--out", "t2.json",
    ]));
    let t = json(&p(&dir, "t2.json"));
    let cells = t["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 3);
    assert_eq!(cells[1]["criterion"], "sd");
    assert_eq!(cells[1]["flag"], "degenerate: zero scores");
    assert_eq!(cells[2]["criterion"], "random");
}

#[test]
fn compare_cell_matches_manual_pipeline() {
    let dir = fixture();
    ok(hfprune(dir.path(), &["compare", "--model", "m.hfpw", "--calib", "calib.tok", "--prompts", "prompts.tok", "--criteria", "ce", "--rhos", "0.3", "--out", "t.json"]));
    ok(hfprune(dir.path(), &["score", "--model", "m.hfpw", "--calib", "calib.tok", "--criterion", "ce", "--out", "r.json"]));
    ok(hfprune(dir.path(), &["prune", "--model", "m.hfpw", "--report", "r.json", "--rho", "0.3", "--out", "p.hfpw"]));
    ok(hfprune(dir.path(), &["eval", "--original", "m.hfpw", "--pruned", "p.hfpw", "--prompts", "prompts.tok", "--out", "f.json"]));
    let cell = &json(&p(&dir, "t.json"))["cells"][0];
    let f = json(&p(&dir, "f.json"));
    assert_eq!(cell["mean_js"], f["mean_js"]);
    assert_eq!(cell["mean_topk_jaccard"], f["mean_topk_jaccard"]);
    assert_eq!(cell["ppl"], f["ppl_pruned"]);
}

#[test]
fn gradcheck_healthy_and_corrupted() {
    let dir = fixture();
    let out = ok(hfprune(dir.path(), &["gradcheck", "--model", "m.hfpw", "--criterion", "ce", "--samples", "40"]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("max relative error"));

    let out = hfprune(dir.path(), &["gradcheck", "--model", "m.hfpw", "--samples", "40", "--corrupt-layer", "1"]);
    assert_eq!(out.status.code(), Some(5));
    assert!(stderr(&out).contains("layer 1"), "{}", stderr(&out));

    let out = hfprune(dir.path(), &["gradcheck", "--model", "m.hfpw", "--samples", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_thread_setting_is_a_usage_error() {
    let dir = fixture();
    let out = hfprune_threads(dir.path(), "zero", &["gen-tokens", "--vocab", "4", "--seq-len", "2", "--count", "1", "--out", "x.tok"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn outputs_identical_across_runs_and_thread_counts() {
    let dir = fixture();
    let d = dir.path();
    for threads in ["1", "4", "4"] {
        let tag = format!("{threads}-{}", std::fs::read_dir(d).unwrap().count());
        let r = format!("r{tag}.json");
        let m = format!("p{tag}.hfpw");
        let f = format!("f{tag}.json");
        ok(hfprune_threads(d, threads, &["score", "--model", "m.hfpw", "--calib", "calib.tok", "--out", &r]));
        ok(hfprune_threads(d, threads, &["prune", "--model", "m.hfpw", "--report", &r, "--rho", "0.3", "--out", &m]));
        ok(hfprune_threads(d, threads, &["eval", "--original", "m.hfpw", "--pruned", &m, "--prompts", "prompts.tok", "--out", &f]));
    }
    let mut groups: Vec<Vec<Vec<u8>>> = vec![vec![]; 4];
    for entry in std::fs::read_dir(d).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        if name.contains("manifest") {
            continue;
        }
        let slot = if name.starts_with('r') && name.ends_with(".json") {
            0
        } else if name.ends_with(".plan.json") {
            1
        } else if name.starts_with('p') && name.ends_with(".hfpw") {
            2
        } else if name.starts_with('f') {
            3
        } else {
            continue;
        };
        groups[slot].push(std::fs::read(d.join(&name)).unwrap());
    }
    for g in &groups {
        assert_eq!(g.len(), 3);
        assert!(g.iter().all(|b| b == &g[0]));
    }
}

#[test]
fn generated_model_matches_library() {
    let dir = fixture();
    let expected = Model::random(ModelConfig::uniform(16, 2, 2, 10, 32, 16), 3).unwrap();
    assert_eq!(std::fs::read(p(&dir, "m.hfpw")).unwrap(), model_bytes(&expected));
}
