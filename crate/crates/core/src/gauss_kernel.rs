//! Normal-distribution primitives and Gaussian expectations.
//!
//! Staircase integrands are handled in closed form through [`std_normal_cdf`]
//! and [`orthant_prob`]; smooth integrands go through Gauss–Hermite.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, domain, Result};
use crate::quad;

/// Nodes per axis for Gauss–Hermite quadrature.
pub const HERMITE_ORDER: usize = 128;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub(crate) fn cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

#[inline]
pub(crate) fn pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF Φ(x).
pub fn std_normal_cdf(x: f64) -> Result<f64> {
    check_finite("x", x)?;
    Ok(cdf(x))
}

/// Standard normal density.
pub fn std_normal_pdf(x: f64) -> Result<f64> {
    check_finite("x", x)?;
    Ok(pdf(x))
}

/// Variance and correlation of an equal-variance centred bivariate normal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BivariateSpec {
    pub q: f64,
    pub c: f64,
}

impl BivariateSpec {
    pub fn new(q: f64, c: f64) -> Result<Self> {
        Bivariate::new(q, q, c)?;
        Ok(Self { q, c })
    }
}

/// Centred bivariate normal with possibly unequal variances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bivariate {
    pub q1: f64,
    pub q2: f64,
    pub c: f64,
}

impl Bivariate {
    pub fn new(q1: f64, q2: f64, c: f64) -> Result<Self> {
        if !(q1 >= 0.0 && q2 >= 0.0 && q1.is_finite() && q2.is_finite()) {
            return domain(format!("variances must be finite and >= 0, got {q1}, {q2}"));
        }
        if !(c.abs() <= 1.0) {
            return domain(format!("correlation must lie in [-1, 1], got {c}"));
        }
        Ok(Self { q1, q2, c })
    }
}

impl From<BivariateSpec> for Bivariate {
    fn from(s: BivariateSpec) -> Self {
        Self {
            q1: s.q,
            q2: s.q,
            c: s.c,
        }
    }
}

/// A borrowed staircase `base + Σ h_i H(x − g_i)` with `H(0) = 1`.
#[derive(Clone, Copy, Debug)]
pub struct Staircase<'a> {
    pub base: f64,
    pub offsets: &'a [f64],
    pub heights: &'a [f64],
}

impl Staircase<'_> {
    pub fn eval(&self, x: f64) -> f64 {
        self.base
            + self
                .offsets
                .iter()
                .zip(self.heights)
                .filter(|(g, _)| **g <= x)
                .map(|(_, h)| h)
                .sum::<f64>()
    }

    fn same_as(&self, other: &Staircase<'_>) -> bool {
        self.base == other.base && self.offsets == other.offsets && self.heights == other.heights
    }
}

/// Excess of the bivariate orthant probability over independence:
/// `P(U1>a, U2>b; c) − Φ(−a)Φ(−b)`.
///
/// Uses `dP/dc = φ₂(a, b; c)` and substitutes `c = sin θ`, which leaves a
/// bounded smooth integrand all the way to `|c| = 1`.
pub(crate) fn orthant_excess(a: f64, b: f64, c: f64) -> f64 {
    if c == 0.0 {
        return 0.0;
    }
    let s = a * a + b * b;
    let p = 2.0 * a * b;
    let upper = c.clamp(-1.0, 1.0).asin();
    let f = |t: f64| {
        let (sn, cs) = t.sin_cos();
        (-(s - p * sn) / (2.0 * cs * cs)).exp()
    };
    quad::integrate(f, 0.0, upper, 1e-15) / (2.0 * PI)
}

/// `P(U1 > a, U2 > b)` for standard normals with correlation `c`.
///
/// Infinite thresholds are allowed.
pub fn orthant_prob(a: f64, b: f64, c: f64) -> Result<f64> {
    if a.is_nan() || b.is_nan() || !(c.abs() <= 1.0) {
        return domain(format!(
            "orthant_prob needs |c| <= 1 and non-NaN thresholds, got ({a}, {b}, {c})"
        ));
    }
    if a == f64::INFINITY || b == f64::INFINITY {
        return Ok(0.0);
    }
    if a == f64::NEG_INFINITY {
        return Ok(cdf(-b));
    }
    if b == f64::NEG_INFINITY {
        return Ok(cdf(-a));
    }
    Ok(orthant(a, b, c))
}

#[inline]
pub(crate) fn orthant(a: f64, b: f64, c: f64) -> f64 {
    (cdf(-a) * cdf(-b) + orthant_excess(a, b, c)).clamp(0.0, 1.0)
}

/// `P(l1 < U1 ≤ h1, l2 < U2 ≤ h2)` for standard normals with correlation `c`.
pub(crate) fn rect_prob(l1: f64, h1: f64, l2: f64, h2: f64, c: f64) -> f64 {
    let o = |a: f64, b: f64| orthant_prob(a, b, c).unwrap_or(0.0);
    (o(l1, l2) - o(l1, h2) - o(h1, l2) + o(h1, h2)).max(0.0)
}

/// Density of a centred bivariate normal at `(x, y)`.
pub fn bivariate_density(x: f64, y: f64, biv: Bivariate) -> Result<f64> {
    let det = biv.q1 * biv.q2 * (1.0 - biv.c * biv.c);
    if !(det > 0.0) {
        return Err(crate::Error::Singularity(
            "bivariate density needs a non-degenerate covariance".into(),
        ));
    }
    let (s1, s2) = (biv.q1.sqrt(), biv.q2.sqrt());
    let (zx, zy) = (x / s1, y / s2);
    let om = 1.0 - biv.c * biv.c;
    let e = (zx * zx - 2.0 * biv.c * zx * zy + zy * zy) / (2.0 * om);
    Ok((-e).exp() / (2.0 * PI * det.sqrt()))
}

/// Standard-normal Gauss–Hermite rule: nodes `z_i` and weights summing to 1.
pub fn hermite_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| {
        let (x, w) = physicists_hermite(HERMITE_ORDER);
        let z = x.iter().map(|v| v * std::f64::consts::SQRT_2).collect();
        let w = w.iter().map(|v| v / PI.sqrt()).collect();
        (z, w)
    })
}

// Newton on the orthonormal Hermite recurrence, seeded with the usual
// asymptotic root guesses.
fn physicists_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let pim4 = PI.powf(-0.25);
    let nf = n as f64;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut z = 0.0f64;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let jf = j as f64;
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// `E f(u)` for `u ~ N(0, q)` by Gauss–Hermite quadrature.
pub fn expect_1d<F: Fn(f64) -> f64>(f: F, q: f64) -> Result<f64> {
    if !(q >= 0.0 && q.is_finite()) {
        return domain(format!("variance must be finite and >= 0, got {q}"));
    }
    if q == 0.0 {
        return Ok(f(0.0));
    }
    let (z, w) = hermite_rule();
    let s = q.sqrt();
    Ok(z.iter().zip(w).map(|(zi, wi)| wi * f(s * zi)).sum())
}

/// `E s(u)` for a staircase, exactly.
pub fn expect_1d_steps(s: Staircase<'_>, q: f64) -> Result<f64> {
    if !(q >= 0.0 && q.is_finite()) {
        return domain(format!("variance must be finite and >= 0, got {q}"));
    }
    if q == 0.0 {
        return Ok(s.eval(0.0));
    }
    let sd = q.sqrt();
    Ok(s.base
        + s.offsets
            .iter()
            .zip(s.heights)
            .map(|(g, h)| h * cdf(-g / sd))
            .sum::<f64>())
}

/// `E f(u1) g(u2)` by tensor Gauss–Hermite (HERMITE_ORDER² evaluations).
pub fn expect_2d<F, G>(f: F, g: G, biv: impl Into<Bivariate>) -> Result<f64>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    let b = biv.into();
    let b = Bivariate::new(b.q1, b.q2, b.c)?;
    let (z, w) = hermite_rule();
    let (s1, s2) = (b.q1.sqrt(), b.q2.sqrt());
    let r = (1.0 - b.c * b.c).max(0.0).sqrt();
    let mut total = 0.0;
    for (z1, w1) in z.iter().zip(w) {
        let fv = f(s1 * z1);
        if fv == 0.0 {
            continue;
        }
        let inner: f64 = z.iter().zip(w).map(|(z2, w2)| w2 * g(s2 * (b.c * z1 + r * z2))).sum();
        total += w1 * fv * inner;
    }
    Ok(total)
}

/// `E f(u1) g(u2)` for two staircases, in closed form via orthant probabilities.
pub fn expect_2d_steps(f: Staircase<'_>, g: Staircase<'_>, biv: impl Into<Bivariate>) -> Result<f64> {
    let b = biv.into();
    let b = Bivariate::new(b.q1, b.q2, b.c)?;
    if b.q1 == 0.0 {
        return Ok(f.eval(0.0) * expect_1d_steps(g, b.q2)?);
    }
    if b.q2 == 0.0 {
        return Ok(g.eval(0.0) * expect_1d_steps(f, b.q1)?);
    }
    let (s1, s2) = (b.q1.sqrt(), b.q2.sqrt());
    let fa: Vec<f64> = f.offsets.iter().map(|v| v / s1).collect();
    let ga: Vec<f64> = g.offsets.iter().map(|v| v / s2).collect();
    let mf: f64 = fa.iter().zip(f.heights).map(|(a, h)| h * cdf(-a)).sum();
    let mg: f64 = ga.iter().zip(g.heights).map(|(a, h)| h * cdf(-a)).sum();
    let mut cross = 0.0;
    if b.q1 == b.q2 && f.same_as(&g) {
        for i in 0..fa.len() {
            cross += f.heights[i] * f.heights[i] * orthant(fa[i], fa[i], b.c);
            for j in i + 1..fa.len() {
                cross += 2.0 * f.heights[i] * f.heights[j] * orthant(fa[i], fa[j], b.c);
            }
        }
    } else {
        for (a, hi) in fa.iter().zip(f.heights) {
            for (bb, hj) in ga.iter().zip(g.heights) {
                cross += hi * hj * orthant(*a, *bb, b.c);
            }
        }
    }
    Ok(f.base * g.base + f.base * mg + g.base * mf + cross)
}

/// Same expectation as [`expect_2d_steps`], computed by integrating the
/// conditional law of `u2` given `u1` with adaptive quadrature.
///
/// Slower; kept as an independent route for cross-checking.
pub fn expect_2d_steps_by_conditioning(f: Staircase<'_>, g: Staircase<'_>, biv: impl Into<Bivariate>) -> Result<f64> {
    let b = biv.into();
    let b = Bivariate::new(b.q1, b.q2, b.c)?;
    if b.q1 == 0.0 || b.q2 == 0.0 {
        return expect_2d_steps(f, g, b);
    }
    let (s1, s2) = (b.q1.sqrt(), b.q2.sqrt());
    let r = (1.0 - b.c * b.c).max(0.0).sqrt();
    let ga: Vec<f64> = g.offsets.iter().map(|v| v / s2).collect();
    // E[g(u2) | z1 = z]
    let cond = |z: f64| -> f64 {
        g.base
            + ga.iter()
                .zip(g.heights)
                .map(|(a, h)| {
                    let m = b.c * z - a;
                    let p = if r == 0.0 {
                        if m >= 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        cdf(m / r)
                    };
                    h * p
                })
                .sum::<f64>()
    };
    let lim = 12.0;
    let mut breaks = vec![-lim, lim];
    breaks.extend(f.offsets.iter().map(|v| v / s1));
    if b.c != 0.0 {
        breaks.extend(ga.iter().map(|a| a / b.c));
    }
    breaks.retain(|x| x.abs() <= lim);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let mut total = 0.0;
    for w in breaks.windows(2) {
        let fv = f.eval(s1 * 0.5 * (w[0] + w[1]));
        if fv == 0.0 {
            continue;
        }
        total += fv * quad::integrate(|z| pdf(z) * cond(z), w[0], w[1], 1e-14);
    }
    Ok(total)
}
