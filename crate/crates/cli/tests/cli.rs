//! Integration tests driving the compiled binary end to end.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qmamba_core::mamba::{Container, TensorData};
use qmamba_core::RealTensor;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qmamba"))
}

fn run_ok(args: &[&str], dir: &Path) -> Output {
    let out = bin().args(args).current_dir(dir).output().expect("spawn qmamba");
    assert!(
        out.status.success(),
        "qmamba {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json_of(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn fit_approx_segment_budgets() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_ok(
        &["--json", "fit-approx", "--fn", "silu", "--out", "silu.pwl.json"],
        dir.path(),
    );
    let v = json_of(&out);
    assert!(v["segments"].as_u64().unwrap() <= 20);
    assert!(dir.path().join("silu.pwl.json").exists());
    assert!(dir.path().join("silu.pwl.json.manifest.json").exists());

    let out = run_ok(
        &["--json", "fit-approx", "--fn", "exp", "--out", "exp.pwl.json"],
        dir.path(),
    );
    let v = json_of(&out);
    let segs = v["segments"].as_u64().unwrap();
    assert!((8..=13).contains(&segs), "exp fitted {segs} segments");

    let out = run_ok(
        &["--json", "fit-approx", "--fn", "identity", "--out", "id.pwl.json"],
        dir.path(),
    );
    assert_eq!(json_of(&out)["segments"], 1);
}

#[test]
fn fit_approx_failure_reports_achieved_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "fit-approx",
            "--fn",
            "silu",
            "--max-err",
            "1e-9",
            "--metric",
            "absolute",
            "--out",
            "nope.json",
        ])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("achieved"), "stderr: {err}");
    assert!(!dir.path().join("nope.json").exists());
}

fn make_model_and_frames(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    run_ok(
        &["gen-model", "--config", "mars", "--seed", "42", "--out", "model.fp.qmc"],
        dir,
    );
    run_ok(
        &[
            "gen-frames", "--config", "mars", "--count", "10", "--seed", "7",
            "--out", "frames.qmc", "--labels-from", "model.fp.qmc",
            "--labels-out", "labels.qmc",
        ],
        dir,
    );
    (
        dir.join("model.fp.qmc"),
        dir.join("frames.qmc"),
        dir.join("labels.qmc"),
    )
}

#[test]
fn quantize_infer_eval_flow() {
    let dir = tempfile::tempdir().unwrap();
    let (model, frames, labels) = make_model_and_frames(dir.path());
    run_ok(
        &[
            "quantize", "--model-in", model.to_str().unwrap(), "--calib",
            frames.to_str().unwrap(), "--out", "model.q.qmc",
        ],
        dir.path(),
    );

    // quantized weights dequantize within half an LSB of the reference copy
    let c = Container::load(&dir.path().join("model.q.qmc")).unwrap();
    let mut checked = 0;
    for (name, t) in &c.tensors {
        if let (Some(stripped), TensorData::Quant(q)) = (name.strip_prefix("q/"), t) {
            let real = c.real_tensor(&format!("ref/{stripped}")).unwrap();
            let half_lsb = (q.scale_exp() as f64 - 1.0).exp2();
            let deq = qmamba_core::qnum::dequantize(q);
            let (lo, hi) = (
                -(1i64 << (q.bits() - 1)) as f64,
                ((1i64 << (q.bits() - 1)) - 1) as f64,
            );
            for (d, r) in deq.data.iter().zip(real.data.iter()) {
                // inside the clip range the round-trip error is half an LSB
                let clipped = (*r as f64 / (q.scale_exp() as f64).exp2()).round() < lo
                    || (*r as f64 / (q.scale_exp() as f64).exp2()).round() > hi;
                if !clipped {
                    assert!(
                        (*d as f64 - *r as f64).abs() <= half_lsb + 1e-9,
                        "{name}: {d} vs {r}"
                    );
                }
            }
            checked += 1;
        }
    }
    assert!(checked > 30, "only {checked} quantized tensors found");

    // 10 frames through the MARS head give 10 x 57 outputs
    let out = run_ok(
        &[
            "--json", "infer", "--model", "model.q.qmc", "--input",
            frames.to_str().unwrap(), "--compare-float", "--out", "preds.json",
        ],
        dir.path(),
    );
    let v = json_of(&out);
    assert_eq!(v["frames"], 10);
    assert_eq!(v["out_dim"], 57);
    assert_eq!(v["predictions"].as_array().unwrap().len(), 10);
    assert_eq!(v["predictions"][0].as_array().unwrap().len(), 57);
    // bounded divergence from the float path
    let lsbs = v["float_divergence"]["max_abs_in_lsb"].as_f64().unwrap();
    assert!(lsbs <= 4.0, "divergence {lsbs} LSBs");

    // eval against float-path labels: tiny but nonzero quantization error
    let out = run_ok(
        &[
            "--json", "eval", "--model", "model.q.qmc", "--input",
            frames.to_str().unwrap(), "--labels", labels.to_str().unwrap(),
            "--task", "regression",
        ],
        dir.path(),
    );
    let v = json_of(&out);
    assert!(v["mae"].as_f64().unwrap() < 0.05);
    assert_eq!(v["per_axis"].as_array().unwrap().len(), 3);
}

#[test]
fn eval_of_identical_predictions_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (model, frames, _) = make_model_and_frames(dir.path());
    run_ok(
        &[
            "quantize", "--model-in", model.to_str().unwrap(), "--calib",
            frames.to_str().unwrap(), "--out", "model.q.qmc",
        ],
        dir.path(),
    );
    let out = run_ok(
        &[
            "--json", "infer", "--model", "model.q.qmc", "--input",
            frames.to_str().unwrap(),
        ],
        dir.path(),
    );
    let v = json_of(&out);
    // write the model's own predictions back as the label container
    let preds = v["predictions"].as_array().unwrap();
    let mut flat = Vec::new();
    for row in preds {
        for x in row.as_array().unwrap() {
            flat.push(x.as_f64().unwrap() as f32);
        }
    }
    let labels = RealTensor::new(flat, vec![preds.len(), 57]).unwrap();
    let lc = Container {
        tensors: vec![("labels".into(), TensorData::Real(labels))],
        ..Default::default()
    };
    lc.save(&dir.path().join("self_labels.qmc")).unwrap();

    let out = run_ok(
        &[
            "--json", "eval", "--model", "model.q.qmc", "--input",
            frames.to_str().unwrap(), "--labels", "self_labels.qmc",
        ],
        dir.path(),
    );
    let v = json_of(&out);
    assert_eq!(v["mae"].as_f64().unwrap(), 0.0);
    assert_eq!(v["rmse"].as_f64().unwrap(), 0.0);
}

#[test]
fn quantize_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (model, frames, _) = make_model_and_frames(dir.path());
    for out in ["a.qmc", "b.qmc"] {
        run_ok(
            &[
                "quantize", "--model-in", model.to_str().unwrap(), "--calib",
                frames.to_str().unwrap(), "--out", out,
            ],
            dir.path(),
        );
    }
    let a = std::fs::read(dir.path().join("a.qmc")).unwrap();
    let b = std::fs::read(dir.path().join("b.qmc")).unwrap();
    assert_eq!(a, b, "requantization is not bitwise reproducible");
}

#[test]
fn simulate_hits_published_cycle_targets() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_ok(
        &["--json", "simulate", "--preset", "emamba", "--units", "20"],
        dir.path(),
    );
    let v = json_of(&out);
    let cycles = v["report"]["frame_latency_cycles"].as_f64().unwrap();
    assert!((cycles - 1643.0).abs() <= 0.15 * 1643.0, "emamba {cycles}");

    let out = run_ok(
        &["--json", "simulate", "--preset", "naive-mamba", "--units", "20"],
        dir.path(),
    );
    let v = json_of(&out);
    let cycles = v["report"]["frame_latency_cycles"].as_f64().unwrap();
    assert!((cycles - 10220.0).abs() <= 0.15 * 10220.0, "naive {cycles}");
}

#[test]
fn simulate_units_sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(
        &[
            "simulate", "--preset", "emamba", "--units", "20",
            "--units-sweep", "1,2,4,5,10,20", "--csv", "curve.csv",
        ],
        dir.path(),
    );
    let csv = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    let mut lats: Vec<u64> = Vec::new();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        lats.push(cols[2].parse().unwrap());
    }
    assert_eq!(lats.len(), 6);
    assert!(lats.windows(2).all(|w| w[1] < w[0]), "latency curve {lats:?}");
}

#[test]
fn compare_presets_reports_all_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_ok(&["--json", "compare-presets", "--units", "20"], dir.path());
    let v = json_of(&out);
    let rows = v.as_array().unwrap();
    assert_eq!(rows.len(), 3);
    let lat = |i: usize| rows[i]["frame_latency_cycles"].as_f64().unwrap();
    assert!((lat(2) - 2480.0).abs() <= 0.15 * 2480.0, "ablation {}", lat(2));
    // baseline-to-accelerated gain near the published 6.22x
    let gain = lat(1) / lat(0);
    assert!((gain - 6.22).abs() < 1.0, "gain {gain}");
}

#[test]
fn sweep_front_flags_match_dominance_oracle() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["sweep", "--out", "sweep.csv"], dir.path());
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let mut rows: Vec<(f64, f64, bool)> = Vec::new();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        rows.push((
            cols[5].parse().unwrap(),               // params
            cols[7].parse().unwrap(),               // latency
            cols[9].parse().unwrap(),               // on_front
        ));
    }
    assert!(rows.len() > 50);
    for (i, &(p, l, flag)) in rows.iter().enumerate() {
        let dominated = rows.iter().enumerate().any(|(j, &(p2, l2, _))| {
            j != i && p2 <= p && l2 <= l && (p2 < p || l2 < l)
        });
        assert_eq!(flag, !dominated, "row {i}: on_front {flag}, dominated {dominated}");
    }
}

#[test]
fn truncated_container_fails_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let (model, frames, _) = make_model_and_frames(dir.path());
    let bytes = std::fs::read(&model).unwrap();
    std::fs::write(dir.path().join("broken.qmc"), &bytes[..bytes.len() / 2]).unwrap();
    let out = bin()
        .args([
            "quantize", "--model-in", "broken.qmc", "--calib",
            frames.to_str().unwrap(), "--out", "x.qmc",
        ])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("truncated") || err.contains("parse"), "stderr: {err}");
}

#[test]
fn out_dir_env_var_redirects_default_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let manifests = dir.path().join("manifests");
    std::fs::create_dir(&manifests).unwrap();
    let out = bin()
        .args(["simulate", "--preset", "emamba", "--units", "20"])
        .current_dir(dir.path())
        .env("QMAMBA_OUT_DIR", &manifests)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(manifests.join("simulate.manifest.json").exists());
}
