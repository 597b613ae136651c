//! The layer-to-layer covariance map of a wide random network and its fixed
//! points, slopes and depth scales.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::activations::QuantizedActivation;
use crate::error::{domain, Error, Result};
use crate::gauss_kernel::{cdf, orthant_excess, pdf, Bivariate};

/// Correlations closer than this to ±1 are pulled back before evaluating χ.
pub const CORR_CLAMP: f64 = 1.0 - 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub sigma_w2: f64,
    pub sigma_b2: f64,
}

impl HyperParams {
    pub fn new(sigma_w2: f64, sigma_b2: f64) -> Result<Self> {
        if !(sigma_w2 > 0.0 && sigma_w2.is_finite()) {
            return domain(format!("sigma_w2 must be positive, got {sigma_w2}"));
        }
        if !(sigma_b2 >= 0.0 && sigma_b2.is_finite()) {
            return domain(format!("sigma_b2 must be >= 0, got {sigma_b2}"));
        }
        Ok(Self { sigma_w2, sigma_b2 })
    }

    /// From standard deviations. A negative σ is rejected rather than squared away.
    pub fn from_std(sigma_w: f64, sigma_b: f64) -> Result<Self> {
        if sigma_w < 0.0 || sigma_b < 0.0 {
            return domain(format!(
                "standard deviations must be >= 0, got sigma_w={sigma_w}, sigma_b={sigma_b}"
            ));
        }
        Self::new(sigma_w * sigma_w, sigma_b * sigma_b)
    }
}

/// Pre-activation variance and correlation of a pair of inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovState {
    pub q: f64,
    pub c: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 10_000,
        }
    }
}

impl SolverOptions {
    fn check(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return domain("solver needs tol > 0 and max_iter >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QStar {
    pub q_star: f64,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CStar {
    pub q_star: f64,
    pub c_star: f64,
    pub chi: f64,
    pub iterations: usize,
    /// Whether χ was evaluated at a clamped correlation.
    pub clamped: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldReport {
    pub q_star: f64,
    pub q_hat_star: f64,
    pub mu_star: f64,
    pub c_star: f64,
    pub chi: f64,
    /// `None` when χ is 0.
    pub xi: Option<f64>,
    pub iterations_q: usize,
    pub iterations_c: usize,
    pub chi_clamped: bool,
}

fn check_q(q: f64) -> Result<()> {
    if q > 0.0 && q.is_finite() {
        Ok(())
    } else {
        domain(format!("variance must be positive and finite, got {q}"))
    }
}

fn check_c(c: f64) -> Result<()> {
    if c.abs() <= 1.0 {
        Ok(())
    } else {
        domain(format!("correlation must lie in [-1, 1], got {c}"))
    }
}

/// Post-activation mean `A + Σ h_i Φ(−g_i/√q)`.
pub fn mu(act: &QuantizedActivation, q: f64) -> Result<f64> {
    check_q(q)?;
    Ok(mu_unchecked(act, q))
}

fn mu_unchecked(act: &QuantizedActivation, q: f64) -> f64 {
    let s = q.sqrt();
    act.base()
        + act
            .offsets()
            .iter()
            .zip(act.heights())
            .map(|(g, h)| h * cdf(-g / s))
            .sum::<f64>()
}

/// Post-activation variance `ΣΣ h_i h_j Φ(−max/√q) Φ(min/√q)`.
pub fn q_hat(act: &QuantizedActivation, q: f64) -> Result<f64> {
    check_q(q)?;
    Ok(q_hat_normalized(&act.normalized_offsets(q)?, act.heights()))
}

// Offsets must be sorted ascending.
fn q_hat_normalized(g: &[f64], h: &[f64]) -> f64 {
    let mut below = 0.0; // Σ_{i<j} h_i Φ(g_i)
    let mut total = 0.0;
    for (gj, hj) in g.iter().zip(h) {
        let up = cdf(-gj);
        total += hj * up * (hj * cdf(*gj) + 2.0 * below);
        below += hj * cdf(*gj);
    }
    total
}

/// One step of the variance recursion, `σ_w²(Q̂ + μ²) + σ_b²`.
pub fn q_next(act: &QuantizedActivation, q: f64, hp: HyperParams) -> Result<f64> {
    let m = mu(act, q)?;
    Ok(hp.sigma_w2 * (q_hat(act, q)? + m * m) + hp.sigma_b2)
}

/// Iterates [`q_next`] from `σ_w² + σ_b²` to its fixed point.
pub fn solve_q_star(act: &QuantizedActivation, hp: HyperParams, opts: SolverOptions) -> Result<QStar> {
    opts.check()?;
    let mut q = hp.sigma_w2 + hp.sigma_b2;
    for it in 1..=opts.max_iter {
        let next = q_next(act, q, hp).map_err(|_| Error::Convergence {
            msg: "variance left the positive reals".into(),
            last: q,
        })?;
        let done = (next - q).abs() <= opts.tol * q.max(1.0);
        q = next;
        if done {
            return Ok(QStar {
                q_star: q,
                iterations: it,
            });
        }
    }
    Err(Error::Convergence {
        msg: format!("Q recursion after {} iterations", opts.max_iter),
        last: q,
    })
}

/// One step of the full two-dimensional (Q, C) system.
pub fn cov_step(act: &QuantizedActivation, state: CovState, hp: HyperParams) -> Result<CovState> {
    check_q(state.q)?;
    check_c(state.c)?;
    let q = q_next(act, state.q, hp)?;
    let s = act.staircase();
    let e = crate::gauss_kernel::expect_2d_steps(s, s, Bivariate::new(state.q, state.q, state.c)?)?;
    Ok(CovState {
        q,
        c: (hp.sigma_w2 * e + hp.sigma_b2) / q,
    })
}

/// `ΣΣ h_i h_j T(g_i, g_j, c)` with `T` the orthant excess.
fn excess_sum(g: &[f64], h: &[f64], c: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..g.len() {
        total += h[i] * h[i] * orthant_excess(g[i], g[i], c);
        for j in i + 1..g.len() {
            total += 2.0 * h[i] * h[j] * orthant_excess(g[i], g[j], c);
        }
    }
    total
}

/// Exact correlation map at variance `q_star`.
pub fn c_map(act: &QuantizedActivation, q_star: f64, c: f64, hp: HyperParams) -> Result<f64> {
    check_q(q_star)?;
    check_c(c)?;
    let g = act.normalized_offsets(q_star)?;
    let m = mu_unchecked(act, q_star);
    Ok((hp.sigma_w2 * (m * m + excess_sum(&g, act.heights(), c)) + hp.sigma_b2) / q_star)
}

/// Pre-activation correlation matching a post-activation correlation `ĉ`.
pub fn pre_from_post(act: &QuantizedActivation, q_star: f64, c_hat: f64, hp: HyperParams) -> Result<f64> {
    check_q(q_star)?;
    let m = mu_unchecked(act, q_star);
    let qh = q_hat(act, q_star)?;
    Ok((hp.sigma_w2 * (qh * c_hat + m * m) + hp.sigma_b2) / q_star)
}

/// Map of post-activation correlations, `Ĉ ↦ Cov(φ, φ)/Q̂` one layer up.
pub fn post_activation_map(act: &QuantizedActivation, hp: HyperParams, q_star: f64, c_hat: f64) -> Result<f64> {
    check_c(c_hat)?;
    let c = pre_from_post(act, q_star, c_hat, hp)?;
    check_c(c)?;
    let g = act.normalized_offsets(q_star)?;
    Ok(excess_sum(&g, act.heights(), c) / q_hat_normalized(&g, act.heights()))
}

/// Slope of [`post_activation_map`]; by the chain rule this is χ at the
/// matching pre-activation correlation.
pub fn post_activation_slope(act: &QuantizedActivation, hp: HyperParams, q_star: f64, c_hat: f64) -> Result<f64> {
    check_c(c_hat)?;
    let c = pre_from_post(act, q_star, c_hat, hp)?;
    chi(act, q_star, c, hp)
}

/// Result of the closed-form approximation to the post-activation map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproxMap {
    pub value: f64,
    /// False when some offset reaches `√Q*`, where the approximation degrades.
    pub in_regime: bool,
}

/// Closed-form approximation of [`post_activation_map`], accurate for small
/// correlations and offsets well inside `√Q*`.
pub fn c_map_approx(act: &QuantizedActivation, q_star: f64, c_hat: f64, hp: HyperParams) -> Result<ApproxMap> {
    check_c(c_hat)?;
    let c = pre_from_post(act, q_star, c_hat, hp)?.clamp(-CORR_CLAMP, CORR_CLAMP);
    let g = act.normalized_offsets(q_star)?;
    let h = act.heights();
    let asin = c.asin();
    let root = (1.0 - c * c).sqrt();
    let kappa = if c.abs() < 1e-8 { 1.0 } else { c / (asin * root) };
    let cross = 2.0 * c / (1.0 + root);
    let mut total = 0.0;
    for i in 0..g.len() {
        for j in 0..g.len() {
            let e = g[i] * g[i] + g[j] * g[j] - g[i] * g[j] * cross;
            total += h[i] * h[j] * (-0.5 * kappa * e).exp();
        }
    }
    let value = asin / (2.0 * PI) * total / q_hat_normalized(&g, h);
    Ok(ApproxMap {
        value,
        in_regime: g.iter().all(|x| x.abs() < 1.0),
    })
}

fn chi_sum(g: &[f64], h: &[f64], c: f64) -> f64 {
    let om = 1.0 - c * c;
    let mut total = 0.0;
    for i in 0..g.len() {
        total += h[i] * h[i] * (-(g[i] * g[i]) * (1.0 - c) / om).exp();
        for j in i + 1..g.len() {
            let e = (g[i] * g[i] - 2.0 * c * g[i] * g[j] + g[j] * g[j]) / (2.0 * om);
            total += 2.0 * h[i] * h[j] * (-e).exp();
        }
    }
    total / (2.0 * PI * om.sqrt())
}

/// Returns χ and whether `c` had to be clamped.
pub fn chi_with_clamp(act: &QuantizedActivation, q_star: f64, c: f64, hp: HyperParams) -> Result<(f64, bool)> {
    check_q(q_star)?;
    if !(c.abs() < 1.0) {
        return Err(Error::Singularity(format!("slope diverges at |C| = 1 (got {c})")));
    }
    let clamped = c.abs() > CORR_CLAMP;
    let c = c.clamp(-CORR_CLAMP, CORR_CLAMP);
    let g = act.normalized_offsets(q_star)?;
    Ok((hp.sigma_w2 / q_star * chi_sum(&g, act.heights(), c), clamped))
}

/// Slope `M'(C)` of the correlation map, in closed form.
pub fn chi(act: &QuantizedActivation, q_star: f64, c: f64, hp: HyperParams) -> Result<f64> {
    chi_with_clamp(act, q_star, c, hp).map(|r| r.0)
}

/// Slope at `C* = 0`, `σ_b = 0`, from normalized offsets alone.
pub fn chi_normalized(norm_offsets: &[f64], heights: &[f64]) -> Result<f64> {
    if norm_offsets.is_empty() || norm_offsets.len() != heights.len() {
        return domain("need matching, non-empty offsets and heights");
    }
    if heights.iter().any(|h| !(*h > 0.0)) || norm_offsets.iter().any(|g| !g.is_finite()) {
        return domain("heights must be positive and offsets finite");
    }
    let mut pairs: Vec<(f64, f64)> = norm_offsets.iter().copied().zip(heights.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (g, h): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let num: f64 = g.iter().zip(&h).map(|(g, h)| h * (-0.5 * g * g).exp()).sum();
    Ok(num * num / (2.0 * PI) / q_hat_normalized(&g, &h))
}

/// [`chi_normalized`] for evenly spaced offsets `d̃·(k − N/2)`, `k = 1..N−1`.
pub fn chi_constant_spaced(n_states: usize, d_tilde: f64) -> Result<f64> {
    if n_states < 2 || !(d_tilde > 0.0) {
        return domain(format!("need n_states >= 2 and d_tilde > 0, got {n_states}, {d_tilde}"));
    }
    let half = n_states as f64 / 2.0;
    let g: Vec<f64> = (1..n_states).map(|k| d_tilde * (k as f64 - half)).collect();
    chi_normalized(&g, &vec![1.0; n_states - 1])
}

/// Stable fixed point of [`c_map`] in `[0, 1)`.
///
/// Iterates from `C = 0`. If the step size stops shrinking (slope near 1)
/// it switches to Newton on `M(C) − C`, which stays below the root because
/// the map is convex there.
pub fn solve_c_star(act: &QuantizedActivation, hp: HyperParams, opts: SolverOptions) -> Result<CStar> {
    let qs = solve_q_star(act, hp, opts)?;
    let q = qs.q_star;
    let m0 = c_map(act, q, 0.0, hp)?;
    if m0.abs() <= 1e-15 {
        let (chi, clamped) = chi_with_clamp(act, q, 0.0, hp)?;
        return Ok(CStar {
            q_star: q,
            c_star: 0.0,
            chi,
            iterations: 0,
            clamped,
        });
    }
    let mut c = 0.0;
    let mut iterations = 0;
    let mut window_start = f64::INFINITY;
    let mut converged = false;
    while iterations < opts.max_iter {
        iterations += 1;
        let next = c_map(act, q, c, hp)?;
        if !(-1e-12..=1.0 + 1e-12).contains(&next) {
            return Err(Error::Convergence {
                msg: "correlation left [0, 1]".into(),
                last: next,
            });
        }
        let delta = (next - c).abs();
        c = next;
        if delta <= opts.tol * c.abs().max(1.0) {
            converged = true;
            break;
        }
        if iterations % 100 == 0 {
            if delta > 0.5 * window_start {
                break;
            }
            window_start = delta;
        }
    }
    // Newton from below; also polishes a converged iterate.
    let newton_steps = if converged { 2 } else { 200 };
    for _ in 0..newton_steps {
        if c >= CORR_CLAMP {
            break;
        }
        let slope = chi(act, q, c, hp)?;
        if !(slope < 1.0) {
            break;
        }
        let step = (c_map(act, q, c, hp)? - c) / (1.0 - slope);
        c = (c + step).min(1.0);
        iterations += 1;
        if step.abs() <= opts.tol * c.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Convergence {
            msg: "C fixed point not reached".into(),
            last: c,
        });
    }
    if c >= 1.0 {
        return Err(Error::Singularity("stable fixed point collapsed onto C = 1".into()));
    }
    let (chi, clamped) = chi_with_clamp(act, q, c, hp)?;
    Ok(CStar {
        q_star: q,
        c_star: c,
        chi,
        iterations,
        clamped,
    })
}

/// `ξ = −1/ln χ`.
pub fn depth_scale(chi: f64) -> Result<f64> {
    if !(chi > 0.0 && chi < 1.0) {
        return domain(format!("depth scale needs 0 < chi < 1, got {chi}"));
    }
    Ok(-1.0 / chi.ln())
}

/// Closed forms for the sign activation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignClosedForm {
    pub q_star: f64,
    pub map: f64,
    /// Absent at `|C| = 1`.
    pub chi: Option<f64>,
}

pub fn sign_closed_forms(hp: HyperParams, c: f64) -> Result<SignClosedForm> {
    check_c(c)?;
    let q = hp.sigma_w2 + hp.sigma_b2;
    let map = (2.0 * hp.sigma_w2 / PI * c.asin() + hp.sigma_b2) / q;
    let chi = (c.abs() < 1.0).then(|| 2.0 * hp.sigma_w2 / (PI * q * (1.0 - c * c).sqrt()));
    Ok(SignClosedForm { q_star: q, map, chi })
}

/// Sign activation with Gaussian input noise of standard deviation `a`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StochasticSign {
    pub b_factor: f64,
    pub map: f64,
    pub chi: f64,
    /// Expansion of the fixed point around `Ĉ = 1`.
    pub c_hat_star_taylor: f64,
}

pub fn stochastic_sign(hp: HyperParams, a: f64, c_hat: f64) -> Result<StochasticSign> {
    if !(a >= 0.0 && a.is_finite()) {
        return domain(format!("noise std must be >= 0, got {a}"));
    }
    check_c(c_hat)?;
    let q = hp.sigma_w2 + hp.sigma_b2;
    let b = (1.0 + (a / q).powi(2) * (2.0 * q + a * a)).sqrt();
    let c = (c_hat * hp.sigma_w2 + hp.sigma_b2) / q;
    let map = 2.0 / PI * (c / b).asin();
    let gap = b * b - c * c;
    if !(gap > 0.0) {
        return Err(Error::Singularity("noiseless slope diverges at C = 1".into()));
    }
    let chi = 2.0 * hp.sigma_w2 / (PI * q * gap.sqrt());
    let r = q / hp.sigma_w2;
    let taylor = 1.0
        - 4.0 / (PI * PI) * (hp.sigma_w2 / (q * b)) * (1.0 + (1.0 + (PI / 2.0).powi(4) * (b * b - b) * r * r).sqrt());
    Ok(StochasticSign {
        b_factor: b,
        map,
        chi,
        c_hat_star_taylor: taylor,
    })
}

/// Fixed point `Ĉ*` of the stochastic-sign map and the slope there.
pub fn stochastic_sign_fixed_point(hp: HyperParams, a: f64, opts: SolverOptions) -> Result<(f64, f64)> {
    opts.check()?;
    let mut c = 0.0;
    for _ in 0..opts.max_iter {
        let s = stochastic_sign(hp, a, c)?;
        // Newton on the concave-up branch below the root, plain step otherwise.
        let step = if s.chi < 1.0 {
            (s.map - c) / (1.0 - s.chi)
        } else {
            s.map - c
        };
        c = (c + step).min(1.0);
        if step.abs() <= opts.tol {
            let s = stochastic_sign(hp, a, c)?;
            return Ok((c, s.chi));
        }
    }
    Err(Error::Convergence {
        msg: "stochastic sign fixed point".into(),
        last: c,
    })
}

/// Outcome of the four-step fixed-point-slope approximation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproxChi {
    pub chi: f64,
    pub c_hat_star: f64,
    pub c_star: f64,
    pub q_star: f64,
    pub chi_zero: f64,
    /// Approximate post-activation map at `Ĉ = 0`.
    pub m_hat_zero: f64,
    pub in_regime: bool,
    /// False when `χ(Ĉ = 0) ≥ 1`, where the first-order estimate breaks down.
    pub valid: bool,
}

/// Approximate fixed-point slope for `σ_b ≥ 0` without solving for `C*`:
/// `T` variance iterations, then a single linearisation around `Ĉ = 0`.
pub fn approx_chi_star(act: &QuantizedActivation, hp: HyperParams, t_iters: usize) -> Result<ApproxChi> {
    let mut q = hp.sigma_w2 + hp.sigma_b2;
    for _ in 0..t_iters {
        q = q_next(act, q, hp)?;
    }
    let approx = c_map_approx(act, q, 0.0, hp)?;
    let c0 = pre_from_post(act, q, 0.0, hp)?;
    let chi_zero = chi(act, q, c0, hp)?;
    let valid = chi_zero < 1.0;
    let c_hat_star = if valid {
        (c0 / (1.0 - chi_zero)).clamp(0.0, CORR_CLAMP)
    } else {
        CORR_CLAMP
    };
    let c_star = pre_from_post(act, q, c_hat_star, hp)?.clamp(-CORR_CLAMP, CORR_CLAMP);
    let chi = chi(act, q, c_star, hp)?;
    Ok(ApproxChi {
        chi,
        c_hat_star,
        c_star,
        q_star: q,
        chi_zero,
        m_hat_zero: approx.value,
        in_regime: approx.in_regime,
        valid,
    })
}

/// Slope `dQ_{l+1}/dQ_l` of the variance recursion at `q`.
pub fn chi_q(act: &QuantizedActivation, q: f64, sigma_w2: f64) -> Result<f64> {
    check_q(q)?;
    let g = act.normalized_offsets(q)?;
    let h = act.heights();
    let mut dqh = 0.0;
    for i in 0..g.len() {
        for j in 0..g.len() {
            let (hi, lo) = if g[i] >= g[j] { (g[i], g[j]) } else { (g[j], g[i]) };
            dqh += h[i] * h[j] * (hi * pdf(hi) * cdf(lo) - lo * pdf(lo) * cdf(-hi));
        }
    }
    // Non-centred activations also move μ².
    let m = mu_unchecked(act, q);
    let dmu: f64 = g.iter().zip(h).map(|(g, h)| h * g * pdf(*g)).sum();
    Ok(sigma_w2 / (2.0 * q) * (dqh + 2.0 * m * dmu))
}

/// Solves for `Q*` and `C*` and collects everything into a report.
pub fn analyze(act: &QuantizedActivation, hp: HyperParams, opts: SolverOptions) -> Result<MeanFieldReport> {
    let qs = solve_q_star(act, hp, opts)?;
    let cs = solve_c_star(act, hp, opts)?;
    let q = cs.q_star;
    let xi = if cs.chi > 0.0 { Some(depth_scale(cs.chi)?) } else { None };
    Ok(MeanFieldReport {
        q_star: q,
        q_hat_star: q_hat(act, q)?,
        mu_star: mu(act, q)?,
        c_star: cs.c_star,
        chi: cs.chi,
        xi,
        iterations_q: qs.iterations,
        iterations_c: cs.iterations,
        chi_clamped: cs.clamped,
    })
}
