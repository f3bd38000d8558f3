use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn msnic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msnic")).args(args).current_dir(workspace()).output().expect("binary runs")
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

fn write_rd(dir: &Path, name: &str, rows: &[(f64, f64)]) -> PathBuf {
    let mut s = String::from("bpp,psnr\n");
    for (r, q) in rows {
        s.push_str(&format!("{r},{q}\n"));
    }
    let p = dir.join(name);
    std::fs::write(&p, s).unwrap();
    p
}

const CURVE: [(f64, f64); 4] = [(0.1, 28.0), (0.2, 30.5), (0.4, 33.0), (0.8, 35.2)];

#[test]
fn bd_of_a_curve_against_itself_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let a = write_rd(tmp.path(), "a.csv", &CURVE);
    let out = tmp.path().join("out");
    let o =
        msnic(&["bd", "--anchor", a.to_str().unwrap(), "--test", a.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let bd: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("bd.json")).unwrap()).unwrap();
    assert!(bd["bd_br_percent"].as_f64().unwrap().abs() < 1e-9);
    assert!(bd["bd_metric"].as_f64().unwrap().abs() < 1e-9);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["passed"], true);
    assert!(out.join("manifest.json").exists());
}

#[test]
fn demo_prints_score_pathwise_and_truth() {
    let o = msnic(&["demo-gradients", "--f", "square", "--theta", "1.5", "--n", "100000", "--seed", "3"]);
    assert!(o.status.success());
    let line = stdout(&o);
    let nums: Vec<f64> = line.split(|c: char| c == ',' || c.is_whitespace()).filter_map(|w| w.parse().ok()).collect();
    assert!(line.starts_with("score 0.0, pathwise "), "{line}");
    let [score, pathwise, se, truth] = nums[..] else { panic!("{line}") };
    assert_eq!(score, 0.0);
    assert!((truth - 3.0).abs() < 1e-9, "{line}");
    assert!((pathwise - truth).abs() <= 3.0 * se, "{line}");
}

#[test]
fn unknown_config_key_exits_with_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "lamda = 0.01\n").unwrap();
    let o = msnic(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lamda"));
}

#[test]
fn invalid_override_exits_with_config_error() {
    let o = msnic(&["stats", "--set", "size=20"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn non_empty_output_dir_needs_resume() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("stray.txt"), "x").unwrap();
    let o = msnic(&["stats", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn short_training_run_writes_logs_and_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = msnic(&["train", "--out", out.to_str().unwrap(), "--set", "max_steps=3", "--set", "count=4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(header(&out.join("metrics.csv")), "step,mode,k,l,lambda,loss,bpp_est,mse,lr,seed");
    assert_eq!(std::fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 4);
    assert!(out.join("model.ckpt").exists());
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "train");
    assert_eq!(m["config"]["max_steps"], 3);

    let rd = tmp.path().join("rd");
    let ckpt = format!("checkpoint=\"{}\"", out.join("model.ckpt").display());
    let o = msnic(&["eval-rd", "--out", rd.to_str().unwrap(), "--set", &ckpt, "--set", "eval_count=2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        header(&rd.join("rd.csv")),
        "image,lambda,quant_mode,bpp_estimated,bpp_actual,bpp_continuous,mse_255,psnr_db,rd_cost"
    );

    let uq = tmp.path().join("uq");
    let o = msnic(&["uq-compare", "--out", uq.to_str().unwrap(), "--set", &ckpt, "--set", "eval_count=2"]);
    assert!(o.status.code().is_some_and(|c| c <= 1), "{}", String::from_utf8_lossy(&o.stderr));
    let mut totals = Vec::new();
    for mode in ["round", "uq"] {
        let path = uq.join(format!("quant_error_{mode}.csv"));
        assert_eq!(header(&path), "bin_lo,bin_hi,count");
        let text = std::fs::read_to_string(&path).unwrap();
        let counts: Vec<u64> = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
        assert_eq!(counts.len(), 50);
        totals.push(counts.iter().sum::<u64>());
    }
    assert!(totals[0] > 0 && totals[0] == totals[1], "{totals:?}");
}

#[test]
fn micro_bounds_check_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("b");
    let o = msnic(&[
        "bounds-check",
        "--micro",
        "--k",
        "1,4",
        "--l",
        "1,4",
        "--replicates",
        "1000",
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("bounds.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "bound,mode,k,l,mean,se,ci_lo,ci_hi");
    assert!(csv.lines().last().unwrap().starts_with("log_evidence,quadrature"));
}

#[test]
fn shipped_configs_parse() {
    for entry in std::fs::read_dir(workspace().join("configs")).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        if let Err(e) = msnic_core::harness::ExperimentConfig::parse(&text, &[]) {
            panic!("{}: {e}", path.display());
        }
    }
}
