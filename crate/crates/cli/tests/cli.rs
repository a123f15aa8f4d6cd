use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_cdl");

fn cdl(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn cdl")
}

fn ok(args: &[&str]) -> Output {
    let o = cdl(args);
    assert!(
        o.status.success(),
        "cdl {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

/// File name -> bytes for everything in `dir` except the timing sidecar.
fn outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "timing.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn data_rows(path: &Path) -> usize {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .count()
}

const SMALL_TRAIN: &[&str] = &[
    "--set",
    "dataset.n=400",
    "--set",
    "training.steps=60",
    "--set",
    "training.batch=32",
    "--set",
    "training.checkpoint_every=30",
    "--set",
    "model.hidden=[16,16]",
];

const MIXTURE: &[&str] = &["--set", "dataset.kind=\"mixture\""];

fn joint(extra: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = SMALL_TRAIN.iter().map(|s| s.to_string()).collect();
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

/// Runs the same command at 1 and 4 threads and checks the files match.
fn deterministic(name: &str, args: &[String]) -> (PathBuf, tempfile::TempDir) {
    let root = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for threads in ["1", "4"] {
        let out = root.path().join(format!("{name}-{threads}"));
        let mut a: Vec<&str> = vec!["--threads", threads, "--out", out.to_str().unwrap()];
        a.extend(args.iter().map(|s| s.as_str()));
        ok(&a);
        runs.push(outputs(&out));
    }
    assert!(!runs[0].is_empty());
    assert_eq!(runs[0].keys().collect::<Vec<_>>(), runs[1].keys().collect::<Vec<_>>());
    for (k, v) in &runs[0] {
        assert!(v == &runs[1][k], "{name}: {k} differs between thread counts");
    }
    (root.path().join(format!("{name}-1")), root)
}

#[test]
fn train_is_deterministic_and_logs_every_step() {
    let mut args = joint(&["--set", "training.mode={kind=\"joint\", lambda=1.0}", "--set", "training.cdl_items=4"]);
    args.push("train".into());
    let (dir, _keep) = deterministic("train", &args);
    assert_eq!(data_rows(&dir.join("loss.csv")), 61);
    assert_eq!(data_rows(&dir.join("val.csv")), 3);
    assert!(dir.join("checkpoint_step00000030.json").exists());
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["train_points"], 360);
    let cfg = fs::read_to_string(dir.join("config.toml")).unwrap();
    assert!(cfg.starts_with("# config_hash="));
}

#[test]
fn every_sampler_is_deterministic() {
    let root = tempfile::tempdir().unwrap();
    let ck_dir = root.path().join("model");
    let mut a: Vec<&str> = vec!["--out", ck_dir.to_str().unwrap()];
    a.extend(SMALL_TRAIN);
    a.push("train");
    ok(&a);
    let ck = ck_dir.join("checkpoint_final.json");
    for sampler in ["ddpm", "flow-euler", "flow-heun", "churn", "parallel"] {
        let mut args = joint(&["--set", "schedule.steps=50", "--set", "sampler.s_churn=5.0"]);
        args.extend(["sample", "--checkpoint", ck.to_str().unwrap(), "--sampler", sampler, "--n", "37"].map(String::from));
        let (dir, _keep) = deterministic(sampler, &args);
        assert_eq!(data_rows(&dir.join("samples.csv")), 37, "{sampler}");
    }
}

#[test]
fn oracle_parallel_sampling_converges_with_mmd_trace() {
    let root = tempfile::tempdir().unwrap();
    let reference = root.path().join("ref.csv");
    let mut text = String::from("x0\n");
    for i in 0..300 {
        let s = if i % 2 == 0 { -5.0 } else { 5.0 };
        text.push_str(&format!("{}\n", s + 0.1 * ((i as f64) * 0.37).sin()));
    }
    fs::write(&reference, text).unwrap();
    let mut args: Vec<String> = MIXTURE.iter().map(|s| s.to_string()).collect();
    args.extend(
        [
            "sample",
            "--oracle",
            "--sampler",
            "parallel",
            "--n",
            "64",
            "--tol",
            "1e-6",
            "--reference",
            reference.to_str().unwrap(),
        ]
        .map(String::from),
    );
    let (dir, _keep) = deterministic("picard", &args);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("sampler_report.json")).unwrap()).unwrap();
    assert_eq!(report["converged"], true);
    let iters = report["picard_iterations"].as_u64().unwrap();
    assert!(iters <= 1000);
    assert_eq!(report["nfe"].as_u64().unwrap(), 1000 * iters);
    assert_eq!(data_rows(&dir.join("mmd_trace.csv")), iters as usize + 1);
}

#[test]
fn windowed_sampling_and_iid_init_run() {
    let mut args: Vec<String> = MIXTURE.iter().map(|s| s.to_string()).collect();
    args.extend(
        [
            "sample",
            "--oracle",
            "--sampler",
            "parallel",
            "--n",
            "16",
            "--window",
            "100",
            "--init-policy",
            "iid-gaussian",
        ]
        .map(String::from),
    );
    let (dir, _keep) = deterministic("window", &args);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("sampler_report.json")).unwrap()).unwrap();
    assert_eq!(report["converged"], true);
    assert_eq!(report["peak_parallel_steps"], 100);
}

#[test]
fn eval_heatmap_sweep_and_llr_are_deterministic() {
    let root = tempfile::tempdir().unwrap();
    let a = root.path().join("a.csv");
    let b = root.path().join("b.csv");
    let pts = |off: f64| -> String {
        let mut s = String::from("x,y\n");
        for i in 0..200 {
            let t = i as f64 * 0.1;
            s.push_str(&format!("{},{}\n", t.sin() + off, t.cos()));
        }
        s
    };
    fs::write(&a, pts(0.0)).unwrap();
    fs::write(&b, pts(0.05)).unwrap();

    let args: Vec<String> = ["eval-mmd", "--samples", a.to_str().unwrap(), "--reference", b.to_str().unwrap()]
        .map(String::from)
        .to_vec();
    let (dir, _k1) = deterministic("mmd", &args);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("mmd.json")).unwrap()).unwrap();
    assert!(m["mmd"].as_f64().unwrap().is_finite());
    assert_eq!(m["bandwidth"], 0.03);

    let mut auto = args.clone();
    auto.push("--auto-bandwidth".into());
    deterministic("mmd-auto", &auto);

    let sweep = ["--set", "dataset.n=500", "bandwidth-sweep"].map(String::from).to_vec();
    let (dir, _k2) = deterministic("sweep", &sweep);
    assert_eq!(data_rows(&dir.join("bandwidth_sweep.csv")), 26);

    let mut heat: Vec<String> = MIXTURE.iter().map(|s| s.to_string()).collect();
    heat.extend(["--set", "eval.heatmap_columns=20", "heatmap", "--oracle"].map(String::from));
    let (dir, _k3) = deterministic("heatmap", &heat);
    assert!(fs::read_to_string(dir.join("error_field.svg")).unwrap().contains("<svg"));
    let band: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("band_error.json")).unwrap()).unwrap();
    assert_eq!(band["out_band_mean"], 0.0);

    let mut llr: Vec<String> = MIXTURE.iter().map(|s| s.to_string()).collect();
    llr.extend(
        ["--set", "eval.llr_nodes=32", "--set", "eval.llr_draws=16", "llr", "--oracle", "--x", "-5;5", "--zeta", "8"]
            .map(String::from),
    );
    let (dir, _k4) = deterministic("llr", &llr);
    assert_eq!(data_rows(&dir.join("llr.csv")), 3);
}

#[test]
fn bad_input_exits_with_code_2() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().to_str().unwrap();
    let codes = [
        cdl(&["--out", out, "--set", "training.steps=abc", "train"]),
        cdl(&["--out", out, "--set", "no_such_key=1", "train"]),
        cdl(&["--out", out, "sample", "--checkpoint", "/nonexistent/ck.json"]),
        cdl(&["--out", out, "sample", "--oracle", "--sampler", "bogus"]),
        cdl(&["--out", out, "eval-mmd", "--samples", "/nonexistent/a.csv", "--reference", "/nonexistent/b.csv"]),
        cdl(&["--out", out, "--set", "sampler.s_noise=5.0", "sample", "--oracle", "--sampler", "churn"]),
        cdl(&["--out", out, "heatmap", "--oracle", "--set", "dataset.mixture={dim=2, components=[{weight=1.0, mean=[0.0, 0.0], sigma_data=1.0}]}"]),
    ];
    for (i, o) in codes.iter().enumerate() {
        assert_eq!(o.status.code(), Some(2), "case {i}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn diverging_training_exits_with_code_3() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().to_str().unwrap();
    let mut a = vec!["--out", out, "--set", "training.lr=1e200"];
    a.extend(SMALL_TRAIN);
    a.push("train");
    let o = cdl(&a);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn version_flag_prints_name() {
    let o = ok(&["--version"]);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("cdl "));
}
