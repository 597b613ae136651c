use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use qprop::activations::{ActivationDescriptor, QuantizedActivation};
use qprop::calibrate::{
    fit_power_law, grid_cq_comparison, grid_depthscale, grid_linear_spacing, init_params, lin_space, optimize_spacing,
    ste_rho, write_spacing_csv, xavier_factor, InitRecommendation, SpacingCurve,
};
use qprop::meanfield::{analyze, solve_q_star, HyperParams, SolverOptions};
use qprop::ntk::{
    deep_limit_structure, ntk_by_depth, read_dataset_csv, snr_metrics, synthetic_two_class, DerivativeKind, LabeledGram,
};
use qprop::simulate::{manifold_experiment, write_manifold_csv, ManifoldExperiment};
use qprop::{fmt17, Error};
use serde_json::{json, Value};

use crate::*;

type Res<T = ()> = Result<T, Failure>;

pub fn dispatch(cmd: Cmd) -> Res {
    match cmd {
        Cmd::Analyze(a) => cmd_analyze(a),
        Cmd::Spacing(a) => cmd_spacing(a),
        Cmd::Grid(a) => cmd_grid(a),
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Init(a) => cmd_init(a),
        Cmd::Ntk(a) => cmd_ntk(a),
        Cmd::CqCompare(a) => cmd_cq(a),
    }
}

fn create(path: &Path) -> Res<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::io(format!("creating {}: {e}", path.display())))
}

fn out_dir(dir: &Path) -> Res {
    fs::create_dir_all(dir).map_err(|e| Failure::io(format!("creating {}: {e}", dir.display())))
}

fn write_json(path: &Path, v: &Value) -> Res {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, v).map_err(|e| Failure::io(e.to_string()))?;
    writeln!(w)
        .and_then(|_| w.flush())
        .map_err(|e| Failure::io(format!("writing {}: {e}", path.display())))
}

/// Prints `v` and, when given, also writes it to `out`.
fn emit(v: &Value, out: Option<&Path>) -> Res {
    let text = serde_json::to_string_pretty(v).expect("serialisable");
    let mut stdout = std::io::stdout().lock();
    match writeln!(stdout, "{text}").and_then(|_| stdout.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(Failure::io(format!("stdout: {e}"))),
        _ => {}
    }
    match out {
        Some(p) => write_json(p, v),
        None => Ok(()),
    }
}

fn descriptor(act: Option<String>) -> Res<ActivationDescriptor> {
    let text = act.ok_or_else(|| Failure::usage("an activation is required (--act)"))?;
    ActivationDescriptor::parse(&text).map_err(|e| Failure::usage(e.to_string()))
}

fn pair(v: &[f64]) -> (f64, f64) {
    (v[0], v[1])
}

fn curve(n: usize, s: &SpacingSearch) -> Res<SpacingCurve> {
    Ok(optimize_spacing(n, s.points, s.refine_tol)?)
}

fn recommendation(n: usize, s: &SpacingSearch) -> Res<(SpacingCurve, InitRecommendation)> {
    let c = curve(n, s)?;
    let rec = init_params(n, c.d_tilde_opt)?;
    Ok((c, rec))
}

fn cmd_analyze(a: AnalyzeArgs) -> Res {
    let desc = descriptor(a.act)?;
    let act = desc.build()?;
    let (hp, init) = if a.auto_init {
        let n = match desc {
            ActivationDescriptor::Sign => 2,
            ActivationDescriptor::Constant { states } => states,
            _ => return Err(Failure::usage("--auto-init needs a sign or constant-spaced activation")),
        };
        let (c, rec) = recommendation(n, &a.search)?;
        let v = json!({ "d_tilde_opt": c.d_tilde_opt, "chi_max": c.chi_max, "recommendation": rec });
        (HyperParams::from_std(rec.sigma_w, rec.sigma_b)?, v)
    } else {
        (HyperParams::from_std(a.hp.sw, a.hp.sb)?, Value::Null)
    };
    let opts = SolverOptions {
        tol: a.solver.tol,
        max_iter: a.solver.max_iter,
    };
    let r = analyze(&act, hp, opts)?;
    let v = json!({
        "activation": desc,
        "sigma_w": hp.sigma_w2.sqrt(),
        "sigma_b": hp.sigma_b2.sqrt(),
        "q_star": r.q_star,
        "q_hat_star": r.q_hat_star,
        "mu_star": r.mu_star,
        "c_star": r.c_star,
        "chi": r.chi,
        "xi": r.xi,
        "solver": {
            "iterations_q": r.iterations_q,
            "iterations_c": r.iterations_c,
            "chi_clamped": r.chi_clamped,
            "tol": opts.tol,
            "max_iter": opts.max_iter,
        },
        "auto_init": init,
    });
    emit(&v, a.out.as_deref())
}

fn cmd_spacing(a: SpacingArgs) -> Res {
    if a.states.is_empty() {
        return Err(Failure::usage("--states needs at least one value"));
    }
    out_dir(&a.out)?;
    let curves = a.states.iter().map(|&n| curve(n, &a.search)).collect::<Res<Vec<_>>>()?;
    write_spacing_csv(&curves, create(&a.out.join("spacing.csv"))?)?;
    let (fit, notice) = if curves.len() < 2 {
        eprintln!("notice: one state count given, power-law fit skipped");
        (Value::Null, json!("power-law fit needs two or more state counts"))
    } else {
        let pts: Vec<(usize, f64)> = curves.iter().map(|c| (c.n_states, c.chi_max)).collect();
        (json!(fit_power_law(&pts)?), Value::Null)
    };
    let summary: Vec<Value> = curves
        .iter()
        .map(|c| json!({ "n_states": c.n_states, "d_tilde_opt": c.d_tilde_opt, "chi_max": c.chi_max, "degenerate": c.degenerate }))
        .collect();
    let v = json!({ "curves": summary, "fit": fit, "notice": notice });
    write_json(&a.out.join("spacing_fit.json"), &v)?;
    emit(&v, None)
}

fn cmd_grid(a: GridArgs) -> Res {
    out_dir(&a.out)?;
    let (g, name) = match a.kind {
        GridKind::Depthscale => (
            grid_depthscale(a.states, pair(&a.sw_range), pair(&a.sb_range), a.resolution)?,
            "grid_depthscale.csv",
        ),
        GridKind::Linear => (
            grid_linear_spacing(a.states, pair(&a.d0_range), pair(&a.d1_range), a.resolution)?,
            "grid_linear.csv",
        ),
    };
    g.write_csv(create(&a.out.join(name))?)?;
    let best = g
        .argmax()
        .map(|(i, j, v)| json!({ g.row_name.clone(): g.rows[i], g.col_name.clone(): g.cols[j], "xi": v }));
    emit(
        &json!({ "file": name, "rows": g.rows.len(), "cols": g.cols.len(), "max": best }),
        None,
    )
}

fn cmd_simulate(a: SimulateArgs) -> Res {
    let cfg = ManifoldExperiment {
        n_states: a.states,
        input_dim: a.input_dim,
        width: a.width,
        depth: a.depth,
        num_samples: a.samples,
        multipliers: a.multipliers,
        n_seeds: a.seeds,
        seed: a.seed,
        mae_layers: a.mae_layers,
    };
    let res = manifold_experiment(&cfg)?;
    out_dir(&a.out)?;
    write_manifold_csv(&res, create(&a.out.join("manifold.csv"))?)?;
    let runs: Vec<Value> = res
        .runs
        .iter()
        .map(|r| {
            json!({
                "sigma_w": r.sigma_w,
                "q_star": r.q_star,
                "chi": r.chi,
                "mae": r.mae,
                "final_retention": r.final_retention,
                "q_emp_first": r.q_emp.first(),
                "q_emp_last": r.q_emp.last(),
            })
        })
        .collect();
    let v = json!({ "config": res.config, "sigma_w_opt": res.sigma_w_opt, "runs": runs });
    write_json(&a.out.join("manifold_summary.json"), &v)?;
    emit(&v, None)
}

fn cmd_init(a: InitArgs) -> Res {
    if a.states < 2 {
        return Err(Failure::usage(format!("--states must be at least 2, got {}", a.states)));
    }
    let alpha = xavier_factor(a.states);
    let xavier = match (a.fan_in, a.fan_out) {
        (Some(i), Some(o)) if i + o > 0 => json!({
            "fan_in": i,
            "fan_out": o,
            "sigma_w": alpha * (2.0 / (i + o) as f64).sqrt(),
        }),
        (Some(_), Some(_)) => return Err(Failure::usage("fan-in + fan-out must be positive")),
        _ => Value::Null,
    };
    let (c, rec) = recommendation(a.states, &a.search)?;
    let v = json!({
        "n_states": a.states,
        "alpha": alpha,
        "xavier": xavier,
        "d_tilde_opt": c.d_tilde_opt,
        "chi_max": c.chi_max,
        "mean_field": rec,
        "rho": rec.rho,
    });
    emit(&v, a.out.as_deref())
}

fn cmd_ntk(a: NtkArgs) -> Res {
    if a.depths.is_empty() {
        return Err(Failure::usage("--depths needs at least one value"));
    }
    let act: QuantizedActivation = descriptor(a.act)?.build()?;
    let hp = HyperParams::from_std(a.hp.sw, a.hp.sb)?;
    let data = match &a.data {
        Some(p) => {
            let f = File::open(p).map_err(|e| Failure::io(format!("opening {}: {e}", p.display())))?;
            read_dataset_csv(f, a.header)?
        }
        None => synthetic_two_class(a.points, a.dim, a.separation, a.seed)?,
    };
    let g = LabeledGram::from_dataset(&data)?;
    let kind = match a.derivative {
        Derivative::Ste => {
            let rho = match a.rho {
                Some(r) => r,
                None => ste_rho(a.hp.sw, solve_q_star(&act, hp, SolverOptions::default())?.q_star)?,
            };
            DerivativeKind::Ste { rho }
        }
        Derivative::Smooth => DerivativeKind::Smooth { width: a.smooth_width },
    };
    let ks = ntk_by_depth(&g, &act, kind, hp, &a.depths)?;
    out_dir(&a.out)?;
    let mut s = Vec::new();
    let mut snr = Vec::new();
    let mut files = Vec::new();
    for k in &ks {
        let name = format!("kernel_depth_{}.csv", k.depth);
        k.write_csv(create(&a.out.join(&name))?)?;
        files.push(name);
        let m = snr_metrics(k, &g.labels)?;
        s.push(m.s);
        snr.push(m.snr);
    }
    let deep = if ks.len() >= 2 {
        Some(deep_limit_structure(&ks)?)
    } else {
        None
    };
    let v = json!({
        "depths": a.depths,
        "derivative": kind,
        "files": files,
        "S": s,
        "SNR": snr,
        "alpha": deep.as_ref().map(|d| d.alpha.clone()),
        "beta": deep.as_ref().map(|d| d.beta.clone()),
        "dispersion_by_depth": deep.as_ref().map(|d| d.dispersion.clone()),
        "cv_by_depth": deep.as_ref().map(|d| d.cv.clone()),
    });
    write_json(&a.out.join("ntk_metrics.json"), &v)?;
    emit(&v, None)
}

fn cmd_cq(a: CqArgs) -> Res {
    let (lo, hi) = pair(&a.sw_range);
    if !(lo > 0.0 && hi >= lo) || a.points == 0 {
        return Err(Failure::usage(
            "--sw-range must be positive and increasing, --points >= 1",
        ));
    }
    let sw: Vec<f64> = lin_space(lo.ln(), hi.ln(), a.points).iter().map(|v| v.exp()).collect();
    out_dir(&a.out)?;
    let path = a.out.join("cq_compare.csv");
    let mut w = create(&path)?;
    let io = |e: std::io::Error| Failure::from(Error::Io(e));
    writeln!(w, "n_states,beta,sigma_w,chi_c,chi_q").map_err(io)?;
    let mut ordered = true;
    for &n in &a.states {
        for &beta in &a.beta {
            for p in grid_cq_comparison(n, beta, &sw)? {
                ordered &= p.chi_c >= p.chi_q;
                writeln!(
                    w,
                    "{n},{},{},{},{}",
                    fmt17(beta),
                    fmt17(p.sigma_w),
                    fmt17(p.chi_c),
                    fmt17(p.chi_q)
                )
                .map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)?;
    emit(&json!({ "file": "cq_compare.csv", "chi_c_ge_chi_q": ordered }), None)
}
