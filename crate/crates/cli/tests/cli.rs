use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fvinv::network::save_network;
use fvinv::{Layer, Network, Padding, Tensor};

fn fvinv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fvinv"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn smoke_run_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("smoke.toml");
    let out = fvinv(&["--threads", "1", "run", s(&cfg), "--output", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["manifest.json", "samples.csv", "samples.json", "predictions.json", "timings.json"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let rep = fvinv(&["report", s(dir.path())]);
    assert_eq!(code(&rep), 0);
    assert!(String::from_utf8_lossy(&rep.stdout).contains("median angle x_hat"));
}

#[test]
fn bad_inputs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = \"not a number\"\n").unwrap();
    assert_eq!(code(&fvinv(&["run", s(&bad)])), 1);
    assert_eq!(code(&fvinv(&["run", s(&dir.path().join("missing.toml"))])), 1);
    assert_eq!(code(&fvinv(&["report", s(dir.path())])), 1);
    let cfg = configs().join("smoke.toml");
    assert_eq!(code(&fvinv(&["fv", s(&cfg), "--objective", "1,2"])), 1);
    assert_eq!(code(&fvinv(&["fv", s(&cfg), "--objective", "canonical:7"])), 1);
}

#[test]
fn fv_then_invert_then_scan() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("smoke.toml");
    let reals = dir.path().join("reals");
    fs::create_dir(&reals).unwrap();
    for (i, obj) in ["canonical:0", "0.2,0.5,1", "1,1,0"].iter().enumerate() {
        let path = reals.join(format!("r{i}.json"));
        let out = fvinv(&["fv", s(&cfg), "--objective", obj, "--output", s(&path), "--seed", &i.to_string()]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let inv = fvinv(&["invert", s(&reals.join("r1.json"))]);
    assert_eq!(code(&inv), 0);
    let text = String::from_utf8_lossy(&inv.stdout);
    assert!(text.contains("x_hat") && text.contains("angular distance to the stored objective"));

    let scan_out = dir.path().join("scan.json");
    let scan = fvinv(&["rho-scan", s(&reals), "--output", s(&scan_out)]);
    assert_eq!(code(&scan), 0, "{}", String::from_utf8_lossy(&scan.stderr));
    assert!(String::from_utf8_lossy(&scan.stdout).contains("3 Jacobians, 3 features"));
    assert!(scan_out.is_file());

    let basis = dir.path().join("basis.json");
    fs::write(&basis, r#"{"ambient_dim": 3, "vectors": [[1, 0, 0], [0, 1, 0]]}"#).unwrap();
    let inv = fvinv(&["invert", s(&reals.join("r2.json")), "--k", "1", "--critical-space", s(&basis)]);
    assert_eq!(code(&inv), 0, "{}", String::from_utf8_lossy(&inv.stderr));
}

#[test]
fn overflowing_network_fails_the_samples() {
    let dir = tempfile::tempdir().unwrap();
    let net = Network::new(
        vec![6, 6, 1],
        vec![
            Layer::Conv2d {
                weight: Tensor::filled(&[3, 3, 3, 1], 1e300),
                padding: Padding::Valid,
            },
            Layer::Relu,
        ],
    )
    .unwrap();
    save_network(&net, &dir.path().join("huge.json")).unwrap();
    let cfg = dir.path().join("huge.toml");
    fs::write(
        &cfg,
        r#"
seed = 1
output_dir = "out"
aggregation = "mean"
k = 2
reopt_steps = 5

[image]
height = 6
width = 6
channels = 1
parametrization = "rgb"

[network]
path = "huge.json"

[samples]
random = 3
canonical = 0

[fv]
adam_steps = 5
lbfgs_steps = 0
"#,
    )
    .unwrap();
    let out = fvinv(&["run", s(&cfg), "--output", s(&dir.path().join("out"))]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}
