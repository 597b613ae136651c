//! Optimal spacing, the χ_max(N) power law and initialization advice.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::activations::QuantizedActivation;
use crate::error::{domain, Error, Result};
use crate::gauss_kernel::cdf;
use crate::meanfield::{
    approx_chi_star, chi, chi_constant_spaced, chi_normalized, chi_q, depth_scale, solve_q_star, HyperParams,
    SolverOptions,
};
use crate::output::{csv_writer, fmt17, write_row};
use crate::{make_linear_spaced, parallel};

/// Search interval for the normalized spacing.
pub const D_TILDE_RANGE: (f64, f64) = (1e-2, 1e1);
pub const DEFAULT_COARSE_POINTS: usize = 200;
pub const DEFAULT_REFINE_TOL: f64 = 1e-6;
/// Variance iterations used by grid cells.
pub const GRID_Q_ITERS: usize = 200;

/// χ as a function of the normalized spacing, and its maximum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpacingCurve {
    pub n_states: usize,
    pub samples: Vec<(f64, f64)>,
    pub d_tilde_opt: f64,
    pub chi_max: f64,
    /// Set when χ does not depend on the spacing (two states).
    pub degenerate: bool,
}

/// `ln(1 − χ_max) ≈ log_intercept + exponent · ln(N + shift)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub exponent: f64,
    pub log_intercept: f64,
    /// RMS residual in log space.
    pub residual: f64,
    pub shift: f64,
}

impl PowerLawFit {
    /// The published constants (exponent −1.82, intercept 0.71).
    pub fn published() -> Self {
        Self {
            exponent: -1.82,
            log_intercept: 0.71,
            residual: 0.0,
            shift: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthPrediction {
    /// `−1/ln(1 − e^b (N+1)^p)`.
    pub exact: f64,
    /// Large-N form `e^{−b} (N+1)^{−p}`.
    pub approx: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitRecommendation {
    pub n_states: usize,
    pub sigma_w: f64,
    pub sigma_b: f64,
    pub rho: f64,
    pub q_star: f64,
    pub q_hat_star: f64,
    pub xavier_factor: f64,
}

fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// `n` evenly spaced points from `lo` to `hi`; a single point is `lo`.
pub fn lin_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn golden_max<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - r * (b - a);
    let mut x2 = a + r * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while b - a > tol {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + r * (b - a);
            f2 = f(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - r * (b - a);
            f1 = f(x1);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

/// Scans χ over log-spaced normalized spacings, then refines the best
/// bracket by golden-section search.
pub fn optimize_spacing(n_states: usize, coarse_points: usize, refine_tol: f64) -> Result<SpacingCurve> {
    if n_states < 2 {
        return domain(format!("need at least 2 states, got {n_states}"));
    }
    if coarse_points < 3 || !(refine_tol > 0.0) {
        return domain("need >= 3 coarse points and a positive refine tolerance");
    }
    let grid = log_space(D_TILDE_RANGE.0, D_TILDE_RANGE.1, coarse_points);
    let samples = grid
        .iter()
        .map(|&d| Ok((d, chi_constant_spaced(n_states, d)?)))
        .collect::<Result<Vec<_>>>()?;
    let (lo, hi) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), s| (l.min(s.1), h.max(s.1)));
    if hi - lo <= 1e-12 {
        let mid = (D_TILDE_RANGE.0 * D_TILDE_RANGE.1).sqrt();
        return Ok(SpacingCurve {
            n_states,
            samples,
            d_tilde_opt: mid,
            chi_max: hi,
            degenerate: true,
        });
    }
    let k = samples
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .map(|(i, _)| i)
        .unwrap();
    let a = grid[k.saturating_sub(1)];
    let b = grid[(k + 1).min(grid.len() - 1)];
    let f = |d: f64| chi_constant_spaced(n_states, d).unwrap_or(f64::NEG_INFINITY);
    let (d, v) = golden_max(f, a, b, refine_tol);
    let (d_tilde_opt, chi_max) = if v >= samples[k].1 { (d, v) } else { samples[k] };
    Ok(SpacingCurve {
        n_states,
        samples,
        d_tilde_opt,
        chi_max,
        degenerate: false,
    })
}

/// Least-squares line through `(ln x, ln y)`; returns (slope, intercept, rms).
pub fn fit_log_log(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::Fit(format!(
            "need >= 3 paired points, got {}",
            xs.len().min(ys.len())
        )));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Fit("log-log fit needs positive finite data".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 1e-12 * n {
        return Err(Error::Fit("degenerate design: all abscissae equal".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let rss: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - icpt - slope * x).powi(2)).sum();
    Ok((slope, icpt, (rss / n).sqrt()))
}

/// Fits `ln(1 − χ_max)` against `ln(N + 1)`.
pub fn fit_power_law(points: &[(usize, f64)]) -> Result<PowerLawFit> {
    if points.iter().any(|p| !(p.1 > 0.0 && p.1 < 1.0)) {
        return Err(Error::Fit("every chi_max must lie in (0, 1)".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0 as f64 + 1.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| 1.0 - p.1).collect();
    let (exponent, log_intercept, residual) = fit_log_log(&xs, &ys)?;
    Ok(PowerLawFit {
        exponent,
        log_intercept,
        residual,
        shift: 1.0,
    })
}

/// Depth scale implied by a power-law fit.
pub fn predicted_depth_scale(n_states: usize, fit: &PowerLawFit) -> Result<DepthPrediction> {
    let x = n_states as f64 + fit.shift;
    let gap = fit.log_intercept.exp() * x.powf(fit.exponent);
    if !(gap > 0.0 && gap < 1.0) {
        return domain(format!("1 - chi = {gap} is outside (0, 1) for N = {n_states}"));
    }
    Ok(DepthPrediction {
        exact: -1.0 / (1.0 - gap).ln(),
        approx: 1.0 / gap,
    })
}

/// Modified Xavier factor `1 + a/(N − b)²` with the published `a = 1.23`, `b = −0.2`.
pub fn xavier_factor(n_states: usize) -> f64 {
    xavier_factor_with(n_states, 1.23, -0.2)
}

pub fn xavier_factor_with(n_states: usize, a: f64, b: f64) -> f64 {
    1.0 + a / (n_states as f64 - b).powi(2)
}

/// STE slope giving a unit Jacobian moment: `1/(σ_w √erf(1/√(2Q*)))`.
pub fn ste_rho(sigma_w: f64, q_star: f64) -> Result<f64> {
    if !(sigma_w > 0.0 && q_star > 0.0) {
        return domain(format!("need sigma_w > 0 and q_star > 0, got {sigma_w}, {q_star}"));
    }
    Ok(1.0 / (sigma_w * erf_inv_sqrt2q(q_star).sqrt()))
}

// erf(1/√(2Q)) = P(|u| ≤ 1) for u ~ N(0, Q).
fn erf_inv_sqrt2q(q: f64) -> f64 {
    let s = q.sqrt();
    cdf(1.0 / s) - cdf(-1.0 / s)
}

/// Unit-variance second moment of the constant-spaced activation at
/// normalized spacing `d_tilde`.
fn q_hat_at_spacing(n_states: usize, d_tilde: f64) -> Result<f64> {
    let d = 2.0 / (n_states as f64 - 1.0);
    let half = n_states as f64 / 2.0;
    let g: Vec<f64> = (1..n_states).map(|i| d_tilde * (i as f64 - half)).collect();
    let act = QuantizedActivation::new(-1.0, g, vec![d; n_states - 1])?;
    crate::meanfield::q_hat(&act, 1.0)
}

/// Weight scale that puts the constant-spaced activation at the given
/// normalized spacing, with `σ_b = 0`.
pub fn init_params(n_states: usize, d_tilde_opt: f64) -> Result<InitRecommendation> {
    if n_states < 2 || !(d_tilde_opt > 0.0) {
        return domain(format!(
            "need n_states >= 2 and d_tilde_opt > 0, got {n_states}, {d_tilde_opt}"
        ));
    }
    let d = 2.0 / (n_states as f64 - 1.0);
    let q_hat_star = q_hat_at_spacing(n_states, d_tilde_opt)?;
    let sigma_w = d / d_tilde_opt / q_hat_star.sqrt();
    let q_star = (d / d_tilde_opt).powi(2);
    Ok(InitRecommendation {
        n_states,
        sigma_w,
        sigma_b: 0.0,
        rho: ste_rho(sigma_w, q_star)?,
        q_star,
        q_hat_star,
        xavier_factor: xavier_factor(n_states),
    })
}

/// Re-derives the Xavier-factor constants `(a, b)` by fitting
/// `σ_w(N) = 1 + a/(N − b)²` to [`init_params`] over `n_range`.
pub fn refit_xavier_factor(n_range: std::ops::RangeInclusive<usize>) -> Result<(f64, f64)> {
    let ns: Vec<usize> = n_range.filter(|n| *n >= 3).collect();
    if ns.len() < 3 {
        return Err(Error::Fit("need at least three state counts >= 3".into()));
    }
    let sw = parallel::map(&ns, |&n| -> Result<f64> {
        let curve = optimize_spacing(n, DEFAULT_COARSE_POINTS, 1e-8)?;
        Ok(init_params(n, curve.d_tilde_opt)?.sigma_w)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    // For fixed b the best a is linear least squares; b by golden section.
    let fit_a = |b: f64| {
        let (mut num, mut den) = (0.0, 0.0);
        for (n, s) in ns.iter().zip(&sw) {
            let x = 1.0 / (*n as f64 - b).powi(2);
            num += x * (s - 1.0);
            den += x * x;
        }
        num / den
    };
    let sse = |b: f64| {
        let a = fit_a(b);
        ns.iter()
            .zip(&sw)
            .map(|(n, s)| (s - xavier_factor_with(*n, a, b)).powi(2))
            .sum::<f64>()
    };
    let (b, _) = golden_max(|b| -sse(b), -2.5, 2.5, 1e-9);
    Ok((fit_a(b), b))
}

/// Values over a rectangular parameter grid, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub row_name: String,
    pub col_name: String,
    pub rows: Vec<f64>,
    pub cols: Vec<f64>,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols.len() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols.len()..(i + 1) * self.cols.len()]
    }

    /// Largest finite value and its (row, col).
    pub fn argmax(&self) -> Option<(usize, usize, f64)> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k / self.cols.len(), k % self.cols.len(), *v))
    }

    /// CSV with a header row of column values and the row value first on
    /// each line.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv_writer(w);
        let mut head = vec![format!("{}\\{}", self.row_name, self.col_name)];
        head.extend(self.cols.iter().map(|v| fmt17(*v)));
        write_row(&mut out, &head)?;
        for (i, r) in self.rows.iter().enumerate() {
            let mut line = vec![fmt17(*r)];
            line.extend(self.row(i).iter().map(|v| fmt17(*v)));
            write_row(&mut out, &line)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn check_range(name: &str, r: (f64, f64), positive: bool) -> Result<()> {
    let ok = r.0.is_finite() && r.1.is_finite() && r.0 <= r.1 && (!positive || r.0 > 0.0) && r.0 >= 0.0;
    if ok {
        Ok(())
    } else {
        domain(format!("bad {name} range {r:?}"))
    }
}

/// Unit-spaced, unit-height staircase (`D = 1`) used by the depth-scale grid.
pub fn unit_staircase(n_states: usize) -> Result<QuantizedActivation> {
    if n_states < 2 {
        return domain(format!("need at least 2 states, got {n_states}"));
    }
    let half = n_states as f64 / 2.0;
    let g = (1..n_states).map(|i| i as f64 - half).collect();
    QuantizedActivation::new(-(n_states as f64 - 1.0) / 2.0, g, vec![1.0; n_states - 1])
}

/// ξ over a (σ_w, σ_b) grid from [`approx_chi_star`] on the `D = 1`
/// staircase. Cells where the first-order estimate is invalid hold NaN;
/// cells with χ ≤ 0 hold 0.
pub fn grid_depthscale(
    n_states: usize,
    sigma_w_range: (f64, f64),
    sigma_b_range: (f64, f64),
    resolution: usize,
) -> Result<Grid> {
    check_range("sigma_w", sigma_w_range, true)?;
    check_range("sigma_b", sigma_b_range, false)?;
    if resolution == 0 {
        return domain("resolution must be >= 1");
    }
    let act = unit_staircase(n_states)?;
    let rows = lin_space(sigma_w_range.0, sigma_w_range.1, resolution);
    let cols = lin_space(sigma_b_range.0, sigma_b_range.1, resolution);
    let cells: Vec<(f64, f64)> = rows.iter().flat_map(|w| cols.iter().map(move |b| (*w, *b))).collect();
    let values = parallel::map(&cells, |&(w, b)| -> Result<f64> {
        let a = approx_chi_star(&act, HyperParams::from_std(w, b)?, GRID_Q_ITERS)?;
        Ok(if !a.valid {
            f64::NAN
        } else if a.chi <= 0.0 {
            0.0
        } else {
            depth_scale(a.chi).unwrap_or(f64::NAN)
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(Grid {
        row_name: "sigma_w".into(),
        col_name: "sigma_b".into(),
        rows,
        cols,
        values,
    })
}

/// ξ at `σ_b = 0` over a (D̃₀, D̃₁) grid of linearly growing spacings.
/// Orderings that break monotonicity are marked NaN.
pub fn grid_linear_spacing(
    n_states: usize,
    d0_range: (f64, f64),
    d1_range: (f64, f64),
    resolution: usize,
) -> Result<Grid> {
    check_range("d0", d0_range, true)?;
    if !(d1_range.0.is_finite() && d1_range.1.is_finite() && d1_range.0 <= d1_range.1) {
        return domain(format!("bad d1 range {d1_range:?}"));
    }
    if resolution == 0 || n_states < 2 {
        return domain("need resolution >= 1 and n_states >= 2");
    }
    let rows = lin_space(d0_range.0, d0_range.1, resolution);
    let cols = lin_space(d1_range.0, d1_range.1, resolution);
    let cells: Vec<(f64, f64)> = rows.iter().flat_map(|a| cols.iter().map(move |b| (*a, *b))).collect();
    let values = parallel::map(&cells, |&(d0, d1)| match make_linear_spaced(n_states, d0, d1) {
        Ok(act) => chi_normalized(act.offsets(), act.heights())
            .and_then(depth_scale)
            .unwrap_or(f64::NAN),
        Err(_) => f64::NAN,
    });
    Ok(Grid {
        row_name: "d0".into(),
        col_name: "d1".into(),
        rows,
        cols,
        values,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CqPoint {
    pub sigma_w: f64,
    pub chi_c: f64,
    pub chi_q: f64,
}

/// Staircase with offsets `(2/(n−1))(i − n/2)(1 + (β/n²)|i − n/2|)`.
pub fn cq_activation(n_states: usize, beta: f64) -> Result<QuantizedActivation> {
    if n_states < 2 {
        return domain(format!("need at least 2 states, got {n_states}"));
    }
    let n = n_states as f64;
    let d = 2.0 / (n - 1.0);
    let g = (1..n_states)
        .map(|i| {
            let m = i as f64 - n / 2.0;
            d * m * (1.0 + beta / (n * n) * m.abs())
        })
        .collect();
    QuantizedActivation::new(-1.0, g, vec![d; n_states - 1])
}

/// χ of the correlation map at `C = 0` and of the variance map at `Q*`,
/// with `σ_b = 0`, for each σ_w.
pub fn grid_cq_comparison(n_states: usize, beta: f64, sigma_w: &[f64]) -> Result<Vec<CqPoint>> {
    let act = cq_activation(n_states, beta)?;
    parallel::map(sigma_w, |&w| -> Result<CqPoint> {
        let hp = HyperParams::from_std(w, 0.0)?;
        let q = solve_q_star(&act, hp, SolverOptions::default())?.q_star;
        Ok(CqPoint {
            sigma_w: w,
            chi_c: chi(&act, q, 0.0, hp)?,
            chi_q: chi_q(&act, q, hp.sigma_w2)?,
        })
    })
    .into_iter()
    .collect()
}

/// Writes `n_states,d_tilde,chi` rows for each curve.
pub fn write_spacing_csv<W: Write>(curves: &[SpacingCurve], w: W) -> Result<()> {
    let mut out = csv_writer(w);
    write_row(&mut out, &["n_states".into(), "d_tilde".into(), "chi".into()])?;
    for c in curves {
        for (d, x) in &c.samples {
            write_row(&mut out, &[c.n_states.to_string(), fmt17(*d), fmt17(*x)])?;
        }
    }
    out.flush()?;
    Ok(())
}
