use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use foem_cli::commands::{quantized_file_name, COMPARE_CSV, COMPARE_SUMMARY};
use foem_cli::config::EFFECTIVE_CONFIG;
use foem_cli::{exit, run};
use foem_core::tensorio::{hessian_file_name, load_hessian, load_quantized, save_hessian, ElementKind, HessianMeta, TensorFile};
use foem_core::{DenseMatrix, HessianState};

fn weights(dir: &Path, layers: &[(&str, usize, usize)]) -> PathBuf {
    let mut f = TensorFile::new();
    for (i, &(name, d_out, d_in)) in layers.iter().enumerate() {
        let w = DenseMatrix::from_fn(d_out, d_in, |r, c| ((r * 31 + c * 17 + i * 7) as f64 * 0.61).sin());
        f.insert_matrix(&format!("{name}.weight"), &w, ElementKind::F32).unwrap();
    }
    let path = dir.join("weights.safetensors");
    f.save(&path).unwrap();
    path
}

fn activations(d: usize, n: usize, offset: usize) -> DenseMatrix {
    DenseMatrix::from_fn(d, n, |r, c| ((r * 13 + (c + offset) * 5) as f64 * 0.37).cos() + 0.1 * r as f64)
}

fn foem(args: &[&str]) -> i32 {
    run(std::iter::once("foem").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Weights for two layers plus synthetic Hessians in `out`.
fn calibrated(dir: &Path, out: &Path) -> PathBuf {
    let w = weights(dir, &[("blk.0.q", 8, 16), ("blk.1.q", 6, 16)]);
    let code = foem(&["--out", s(out), "calibrate", "--weights", s(&w), "--synthetic-tokens", "64"]);
    assert_eq!(code, exit::OK);
    w
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(foem(&["--help"]), exit::OK);
    assert_eq!(foem(&["quantize", "--no-such-flag"]), exit::CONFIG);
    assert_eq!(foem(&[]), exit::CONFIG);
}

#[test]
fn calibrate_then_quantize_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let w = calibrated(dir.path(), &out);
    assert!(out.join(hessian_file_name("blk.0.q")).exists());
    let code = foem(&["--out", s(&out), "quantize", "--weights", s(&w), "--bits", "3", "--group-size", "8"]);
    assert_eq!(code, exit::OK);
    for layer in ["blk.0.q", "blk.1.q"] {
        let q = load_quantized(out.join(quantized_file_name(layer))).unwrap();
        assert_eq!(q.meta.bits, 3);
        assert_eq!(q.meta.group_size, Some(8));
        assert_eq!(q.meta.engine, "foem");
        assert!(out.join(format!("{layer}.report.json")).exists());
    }
    let eff: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(EFFECTIVE_CONFIG)).unwrap()).unwrap();
    assert_eq!(eff["engine"]["bits"], 3);
}

#[test]
fn layer_filter_and_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let w = calibrated(dir.path(), &out);
    let code = foem(&["--out", s(&out), "quantize", "--weights", s(&w), "--layer", "blk.1.*"]);
    assert_eq!(code, exit::OK);
    assert!(!out.join(quantized_file_name("blk.0.q")).exists());
    assert!(out.join(quantized_file_name("blk.1.q")).exists());

    assert_eq!(foem(&["--out", s(&out), "quantize", "--weights", s(&w), "--layer", "attn*"]), exit::CONFIG);
    let empty = dir.path().join("empty");
    assert_eq!(foem(&["--out", s(&empty), "quantize", "--weights", s(&w)]), exit::CONFIG, "no Hessians");
    assert_eq!(foem(&["--out", s(&out), "quantize"]), exit::CONFIG, "no weights");
    assert_eq!(foem(&["--out", s(&out), "calibrate", "--weights", s(&w)]), exit::CONFIG, "no calibration source");
}

#[test]
fn invalid_settings_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let w = calibrated(dir.path(), &out);
    for bad in [
        &["--bits", "1"][..],
        &["--bits", "9"],
        &["--group-size", "0"],
        &["--block-size", "0"],
        &["--beta", "-1"],
        &["--damping", "-0.5"],
        &["--engine", "awq"],
        &["--sign", "sideways"],
        &["--scale-source", "median"],
    ] {
        let mut args = vec!["--out", s(&out), "quantize", "--weights", s(&w)];
        args.extend_from_slice(bad);
        assert_eq!(foem(&args), exit::CONFIG, "{bad:?}");
    }
    assert_eq!(foem(&["--jobs", "0", "--out", s(&out), "quantize", "--weights", s(&w)]), exit::CONFIG);
}

#[test]
fn corrupt_weights_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.safetensors");
    fs::write(&bad, b"\x10\0\0\0\0\0\0\0{\"oops\": 1}").unwrap();
    let out = dir.path().join("out");
    assert_eq!(foem(&["--out", s(&out), "quantize", "--weights", s(&bad)]), exit::RUNTIME);
    let absent = dir.path().join("absent.safetensors");
    assert_eq!(foem(&["--out", s(&out), "quantize", "--weights", s(&absent)]), exit::RUNTIME);
}

#[test]
fn singular_hessian_without_damping_is_numerical() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let w = weights(dir.path(), &[("l", 4, 6)]);
    // rank two
    let x = DenseMatrix::from_fn(6, 2, |r, c| (r + c) as f64 + 1.0);
    let mut h = HessianState::new(6);
    h.accumulate(&x).unwrap();
    fs::create_dir_all(&out).unwrap();
    save_hessian(
        out.join(hessian_file_name("l")),
        &h,
        &HessianMeta {
            layer: "l".into(),
            n_samples: 0,
            damping: 0.0,
            config: serde_json::Value::Null,
        },
    )
    .unwrap();
    let args = ["--out", s(&out), "quantize", "--weights", s(&w), "--engine", "gptq"];
    assert_eq!(foem(&[&args[..], &["--damping", "0"]].concat()), exit::NUMERICAL);
    assert_eq!(foem(&args), exit::OK);
}

#[test]
fn shards_in_two_files_add_up() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (activations(8, 20, 0), activations(8, 12, 20));
    let mut f1 = TensorFile::new();
    f1.insert_matrix("l.input", &a, ElementKind::F64).unwrap();
    let mut f2 = TensorFile::new();
    f2.insert_matrix("l.input.1", &b, ElementKind::F64).unwrap();
    let mut whole = TensorFile::new();
    let ab = DenseMatrix::from_fn(8, 32, |r, c| if c < 20 { a[(r, c)] } else { b[(r, c - 20)] });
    whole.insert_matrix("l.input", &ab, ElementKind::F64).unwrap();
    let paths: Vec<PathBuf> = ["s1", "s2", "whole"].iter().map(|n| dir.path().join(format!("{n}.safetensors"))).collect();
    f1.save(&paths[0]).unwrap();
    f2.save(&paths[1]).unwrap();
    whole.save(&paths[2]).unwrap();

    let (o1, o2) = (dir.path().join("o1"), dir.path().join("o2"));
    let code = foem(&["--out", s(&o1), "calibrate", "--activations", s(&paths[0]), s(&paths[1])]);
    assert_eq!(code, exit::OK);
    assert_eq!(foem(&["--out", s(&o2), "calibrate", "--activations", s(&paths[2])]), exit::OK);
    let (h1, m1) = load_hessian(o1.join(hessian_file_name("l"))).unwrap();
    let (h2, m2) = load_hessian(o2.join(hessian_file_name("l"))).unwrap();
    assert_eq!((m1.n_samples, m2.n_samples), (32, 32));
    assert!(h1.matrix().rel_frobenius_diff(h2.matrix()) < 1e-14);

    let w = weights(dir.path(), &[("l", 4, 5)]);
    let code = foem(&["--out", s(&o1), "calibrate", "--weights", s(&w), "--activations", s(&paths[2])]);
    assert_eq!(code, exit::CONFIG, "channel count disagrees with weights");
}

#[test]
fn zero_beta_foem_writes_gptq_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let w = calibrated(dir.path(), &out);
    let (g, f) = (dir.path().join("g"), dir.path().join("f"));
    let hd = ["--hessian-dir", s(&out)];
    let base = |o: &Path| vec!["--out".to_string(), s(o).to_string(), "quantize".into(), "--weights".into(), s(&w).into()];
    let mut ga = base(&g);
    ga.extend(["--engine", "gptq", "--block-size", "4"].iter().chain(&hd).map(|a| a.to_string()));
    let mut fa = base(&f);
    fa.extend(["--engine", "foem", "--beta", "0", "--block-size", "16"].iter().chain(&hd).map(|a| a.to_string()));
    assert_eq!(run(std::iter::once("foem".to_string()).chain(ga)), exit::OK);
    assert_eq!(run(std::iter::once("foem".to_string()).chain(fa)), exit::OK);
    for layer in ["blk.0.q", "blk.1.q"] {
        let a = TensorFile::load(g.join(quantized_file_name(layer))).unwrap();
        let b = TensorFile::load(f.join(quantized_file_name(layer))).unwrap();
        assert_eq!(a.entry("codes").unwrap().bytes(), b.entry("codes").unwrap().bytes());
        assert_eq!(a.entry("scales").unwrap().bytes(), b.entry("scales").unwrap().bytes());
    }
}

#[test]
fn embedded_config_reproduces_the_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let w = calibrated(dir.path(), &out);
    let args = ["--out", s(&out), "quantize", "--weights", s(&w), "--bits", "3", "--beta", "0.01", "--sign", "plus_alg1"];
    assert_eq!(foem(&args), exit::OK);
    let path = out.join(quantized_file_name("blk.0.q"));
    let first = fs::read(&path).unwrap();
    let meta = load_quantized(&path).unwrap().meta;
    let cfg = dir.path().join("from_meta.json");
    fs::write(&cfg, serde_json::to_string(&meta.config).unwrap()).unwrap();
    fs::remove_file(&path).unwrap();
    assert_eq!(foem(&["--config", s(&cfg), "quantize"]), exit::OK);
    assert_eq!(fs::read(&path).unwrap(), first);
}

#[test]
fn compare_ties_on_identity_hessian() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let w = weights(dir.path(), &[("a", 6, 16), ("b", 3, 16)]);
    fs::create_dir_all(&out).unwrap();
    for layer in ["a", "b"] {
        let h = HessianState::from_matrix(DenseMatrix::identity(16), 16).unwrap();
        let meta = HessianMeta {
            layer: layer.into(),
            n_samples: 0,
            damping: 0.01,
            config: serde_json::Value::Null,
        };
        save_hessian(out.join(hessian_file_name(layer)), &h, &meta).unwrap();
    }
    let code = foem(&["--out", s(&out), "compare", "--weights", s(&w), "--group-size", "8", "--engines", "rtn,gptq"]);
    assert_eq!(code, exit::OK);
    let csv = fs::read_to_string(out.join(COMPARE_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 2 + 4);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(COMPARE_SUMMARY)).unwrap()).unwrap();
    let pair = &summary["pairwise"][0];
    assert_eq!(pair["ties"], 2, "{summary}");
    assert_eq!(pair["mean_ratio"], 1.0);

    let one = ["--out", s(&out), "compare", "--weights", s(&w), "--engines", "gptq"];
    assert_eq!(foem(&one), exit::CONFIG);
}

#[test]
fn verify_exit_codes() {
    assert_eq!(foem(&["verify"]), exit::OK);
    assert_eq!(foem(&["verify", "--flip-sign"]), exit::VERIFICATION);
    assert_eq!(foem(&["verify", "--tol", "iterative_inverse_route=0"]), exit::VERIFICATION);
    assert_eq!(foem(&["verify", "--tol", "lagrangian_optimality=1e3", "--flip-sign"]), exit::OK);
    assert_eq!(foem(&["verify", "--tol", "no_such_check=1"]), exit::CONFIG);
    assert_eq!(foem(&["verify", "--tol", "missing-equals"]), exit::CONFIG);
}

#[test]
fn out_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let env_out = dir.path().join("env-out");
    let w = weights(dir.path(), &[("l", 4, 8)]);
    let status = Command::new(env!("CARGO_BIN_EXE_foem"))
        .args(["calibrate", "--weights", s(&w), "--synthetic-tokens", "32"])
        .env("FOEM_OUT_DIR", &env_out)
        .current_dir(dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(exit::OK));
    assert!(env_out.join(hessian_file_name("l")).exists());

    let status = Command::new(env!("CARGO_BIN_EXE_foem"))
        .args(["quantize", "--bits", "1"])
        .current_dir(dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(exit::CONFIG));
}
