use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qprop::calibrate::{optimize_spacing, DEFAULT_COARSE_POINTS, DEFAULT_REFINE_TOL};
use qprop::ntk::{synthetic_two_class, LabeledGram};
use serde_json::Value;

fn qprop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qprop"))
        .args(args)
        .output()
        .expect("spawn qprop")
}

fn json_out(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn error_json(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|_| panic!("stderr is not JSON: {text}"))
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("qprop-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn csv_matrix(text: &str) -> Vec<Vec<f64>> {
    text.lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn analyze_sign() {
    let v = json_out(&qprop(&["analyze", "--act", "sign", "--sw", "1", "--sb", "0"]));
    let chi = v["chi"].as_f64().unwrap();
    assert!((chi - 2.0 / std::f64::consts::PI).abs() < 1e-12);
    assert!((v["xi"].as_f64().unwrap() - 2.2144338).abs() < 1e-6);
    assert_eq!(v["q_star"].as_f64(), Some(1.0));
    assert!(v["solver"]["iterations_q"].is_u64());
}

#[test]
fn analyze_auto_init_reaches_chi_max() {
    let v = json_out(&qprop(&[
        "analyze",
        "--act",
        r#"{"kind":"constant","states":10}"#,
        "--auto-init",
    ]));
    let want = optimize_spacing(10, DEFAULT_COARSE_POINTS, DEFAULT_REFINE_TOL)
        .unwrap()
        .chi_max;
    assert!((v["chi"].as_f64().unwrap() - want).abs() < 1e-4, "{v}");
    assert!(v["auto_init"]["recommendation"]["rho"].is_f64());
    let o = qprop(&[
        "analyze",
        "--act",
        r#"{"kind":"linear","states":4,"d0":0.5,"d1":0.1}"#,
        "--auto-init",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_activation_is_a_usage_error() {
    let o = qprop(&["analyze", "--sw", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--act"));
    assert_eq!(qprop(&["analyze", "--act", "nonsense"]).status.code(), Some(1));
    assert_eq!(qprop(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(qprop(&["--help"]).status.code(), Some(0));
}

#[test]
fn non_convergence_exits_with_two() {
    let o = qprop(&["analyze", "--act", "constant:10", "--max-iter", "1", "--tol", "1e-30"]);
    assert_eq!(o.status.code(), Some(2));
    let e = error_json(&o);
    assert_eq!(e["error"]["kind"], "convergence");
    assert_eq!(e["error"]["exit_code"], 2);
}

#[test]
fn unwritable_output_exits_with_three() {
    let d = scratch("io");
    let blocker = d.join("file");
    std::fs::write(&blocker, "x").unwrap();
    let o = qprop(&[
        "spacing",
        "--states",
        "4",
        "--out",
        blocker.join("sub").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_json(&o)["error"]["kind"], "io");
    let o = qprop(&[
        "analyze",
        "--act",
        "sign",
        "--out",
        d.join("missing/x.json").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    let o = qprop(&["ntk", "--act", "sign", "--data", d.join("absent.csv").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn spacing_single_n_skips_fit() {
    let d = scratch("spacing1");
    let o = qprop(&["spacing", "--states", "6", "--out", d.to_str().unwrap()]);
    let v = json_out(&o);
    assert!(v["fit"].is_null());
    assert!(v["notice"].is_string());
    assert!(String::from_utf8_lossy(&o.stderr).contains("skipped"));
    let csv = read(&d.join("spacing.csv"));
    assert_eq!(csv.lines().next(), Some("n_states,d_tilde,chi"));
    assert_eq!(csv.lines().count(), 1 + DEFAULT_COARSE_POINTS);
}

#[test]
fn spacing_fit_matches_library() {
    let d = scratch("spacing2");
    let v = json_out(&qprop(&["spacing", "--states", "3,5,9", "--out", d.to_str().unwrap()]));
    let pts: Vec<(usize, f64)> = [3usize, 5, 9]
        .iter()
        .map(|&n| {
            (
                n,
                optimize_spacing(n, DEFAULT_COARSE_POINTS, DEFAULT_REFINE_TOL)
                    .unwrap()
                    .chi_max,
            )
        })
        .collect();
    let fit = qprop::calibrate::fit_power_law(&pts).unwrap();
    assert_eq!(v["fit"]["exponent"].as_f64(), Some(fit.exponent));
    let saved: Value = serde_json::from_str(&read(&d.join("spacing_fit.json"))).unwrap();
    assert_eq!(saved, v);
}

#[test]
fn init_recommendation() {
    let v = json_out(&qprop(&[
        "init",
        "--states",
        "3",
        "--fan-in",
        "784",
        "--fan-out",
        "2048",
    ]));
    let alpha = v["alpha"].as_f64().unwrap();
    assert!((alpha - 1.1201).abs() < 1e-4);
    let sw = v["xavier"]["sigma_w"].as_f64().unwrap();
    assert!((sw - alpha * (2.0f64 / 2832.0).sqrt()).abs() < 1e-15);
    assert!(v["rho"].as_f64().unwrap() > 0.0);
    assert_eq!(qprop(&["init", "--states", "1"]).status.code(), Some(1));
    assert_eq!(
        qprop(&["init", "--states", "4", "--fan-in", "3"]).status.code(),
        Some(1)
    );
}

#[test]
fn init_continuum_limit() {
    let v = json_out(&qprop(&["init", "--states", "1000000"]));
    assert!((v["alpha"].as_f64().unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn ntk_depth_zero_is_the_affine_gram() {
    let d = scratch("ntk0");
    let args = [
        "ntk",
        "--act",
        "constant:4",
        "--sw",
        "1.3",
        "--sb",
        "0.2",
        "--depths",
        "0",
        "--points",
        "6",
        "--dim",
        "5",
    ];
    let v = json_out(&qprop(&[&args[..], &["--out", d.to_str().unwrap()]].concat()));
    assert!(v["cv_by_depth"].is_null());
    let k = csv_matrix(&read(&d.join("kernel_depth_0.csv")));
    let g = LabeledGram::from_dataset(&synthetic_two_class(6, 5, 1.0, 0).unwrap()).unwrap();
    for (i, row) in k.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert_eq!(*v, 1.3f64.powi(2) * g.gram[[i, j]] + 0.2f64.powi(2));
        }
    }
}

#[test]
fn ntk_sweep_loses_structure_with_depth() {
    let d = scratch("ntk_sweep");
    let v = json_out(&qprop(&[
        "ntk",
        "--act",
        "constant:8",
        "--sw",
        "2",
        "--sb",
        "0.1",
        "--depths",
        "5,30,100",
        "--out",
        d.to_str().unwrap(),
    ]));
    let cv: Vec<f64> = v["cv_by_depth"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    assert!(cv[0] > cv[1] && cv[1] > cv[2], "{cv:?}");
    for l in [5, 30, 100] {
        assert_eq!(csv_matrix(&read(&d.join(format!("kernel_depth_{l}.csv")))).len(), 40);
    }
    let metrics: Value = serde_json::from_str(&read(&d.join("ntk_metrics.json"))).unwrap();
    for key in ["S", "SNR", "alpha", "beta", "dispersion_by_depth"] {
        assert!(metrics[key].is_array(), "{key}");
    }
}

#[test]
fn ntk_reads_data_and_names_bad_rows() {
    let d = scratch("ntk_data");
    let good = d.join("good.csv");
    std::fs::write(&good, "x,y,label\n1,0.5,a\n-1,0.2,b\n0.3,-0.7,a\n").unwrap();
    let out = d.join("out");
    let v = json_out(&qprop(&[
        "ntk",
        "--act",
        "sign",
        "--depths",
        "1,2",
        "--data",
        good.to_str().unwrap(),
        "--header",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(v["S"].as_array().unwrap().len(), 2);
    let bad = d.join("bad.csv");
    std::fs::write(&bad, "1,0.5,a\n-1,zz,b\n").unwrap();
    let o = qprop(&[
        "ntk",
        "--act",
        "sign",
        "--data",
        bad.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let msg = error_json(&o)["error"]["message"].as_str().unwrap().to_string();
    assert!(msg.contains("row 2"), "{msg}");
}

#[test]
fn simulate_is_deterministic() {
    let args = |d: &Path| -> Vec<String> {
        [
            "simulate",
            "--seeds",
            "1",
            "--width",
            "50",
            "--input-dim",
            "40",
            "--depth",
            "8",
            "--samples",
            "12",
            "--out",
        ]
        .iter()
        .map(|s| s.to_string())
        .chain([d.to_str().unwrap().to_string()])
        .collect()
    };
    let (a, b) = (scratch("sim_a"), scratch("sim_b"));
    let run = |d: &Path| {
        let v = args(d);
        json_out(&qprop(&v.iter().map(String::as_str).collect::<Vec<_>>()))
    };
    let va = run(&a);
    run(&b);
    assert_eq!(
        std::fs::read(a.join("manifold.csv")).unwrap(),
        std::fs::read(b.join("manifold.csv")).unwrap()
    );
    assert_eq!(
        read(&a.join("manifold_summary.json")),
        read(&b.join("manifold_summary.json"))
    );
    assert_eq!(va["runs"].as_array().unwrap().len(), 3);
    assert_eq!(
        read(&a.join("manifold.csv")).lines().next(),
        Some("sigma_w,layer,delta_theta,c_emp,c_theory")
    );
}

#[test]
fn simulate_rejects_zero_width() {
    let o = qprop(&["simulate", "--width", "0", "--out", scratch("sim0").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_json(&o)["error"]["kind"], "domain");
}

#[test]
fn config_file_and_overrides() {
    let d = scratch("config");
    let cfg = d.join("run.json");
    std::fs::write(&cfg, r#"{"command":"analyze","act":{"kind":"sign"},"sw":2.0,"sb":0.5}"#).unwrap();
    let v = json_out(&qprop(&["--config", cfg.to_str().unwrap()]));
    assert_eq!(v["sigma_w"].as_f64(), Some(2.0));
    assert_eq!(v["sigma_b"].as_f64(), Some(0.5));
    let v = json_out(&qprop(&["--config", cfg.to_str().unwrap(), "--sb", "0"]));
    assert_eq!(v["sigma_b"].as_f64(), Some(0.0));
    let v = json_out(&qprop(&["--config", cfg.to_str().unwrap(), "analyze", "--sw", "1.5"]));
    assert_eq!(v["sigma_w"].as_f64(), Some(1.5));
    std::fs::write(&cfg, "not json").unwrap();
    assert_eq!(qprop(&["--config", cfg.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(
        qprop(&["--config", d.join("none.json").to_str().unwrap()])
            .status
            .code(),
        Some(3)
    );
}

#[test]
fn thread_cap_does_not_change_output() {
    let run = |threads: &str, name: &str| {
        let d = scratch(name);
        let o = Command::new(env!("CARGO_BIN_EXE_qprop"))
            .env("QPROP_THREADS", threads)
            .args([
                "grid",
                "--states",
                "6",
                "--resolution",
                "8",
                "--out",
                d.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        (o, d)
    };
    let (a, da) = run("1", "thr1");
    let (b, db) = run("3", "thr3");
    assert!(a.status.success() && b.status.success());
    assert_eq!(
        read(&da.join("grid_depthscale.csv")),
        read(&db.join("grid_depthscale.csv"))
    );
    let (bad, _) = run("zero", "thr_bad");
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn grid_and_cq_outputs() {
    let d = scratch("grid");
    json_out(&qprop(&[
        "grid",
        "--kind",
        "linear",
        "--states",
        "4",
        "--resolution",
        "5",
        "--out",
        d.to_str().unwrap(),
    ]));
    let text = read(&d.join("grid_linear.csv"));
    assert!(text.starts_with("d0\\d1,"));
    assert_eq!(text.lines().count(), 6);
    let v = json_out(&qprop(&[
        "cq-compare",
        "--states",
        "4",
        "--beta",
        "0,1",
        "--points",
        "5",
        "--out",
        d.to_str().unwrap(),
    ]));
    assert_eq!(v["chi_c_ge_chi_q"], true);
    let cq = read(&d.join("cq_compare.csv"));
    assert_eq!(cq.lines().next(), Some("n_states,beta,sigma_w,chi_c,chi_q"));
    assert_eq!(cq.lines().count(), 1 + 2 * 5);
}
