//! Staircase activations and the straight-through surrogate.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, domain, Error, Result};
use crate::gauss_kernel::Staircase;

/// `φ(x) = A + Σ h_i H(x − g_i)` with strictly increasing offsets and
/// positive heights. `H(0) = 1`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuantizedActivation {
    base: f64,
    offsets: Vec<f64>,
    heights: Vec<f64>,
    #[serde(skip)]
    levels: Vec<f64>,
}

impl QuantizedActivation {
    /// Builds an activation, merging coincident offsets by summing heights.
    pub fn new(base: f64, offsets: Vec<f64>, heights: Vec<f64>) -> Result<Self> {
        check_finite("base", base)?;
        if offsets.is_empty() {
            return domain("an activation needs at least one offset");
        }
        if offsets.len() != heights.len() {
            return domain(format!("{} offsets but {} heights", offsets.len(), heights.len()));
        }
        let mut pairs = Vec::with_capacity(offsets.len());
        for (i, (&g, &h)) in offsets.iter().zip(&heights).enumerate() {
            check_finite("offset", g)?;
            if !(h > 0.0 && h.is_finite()) {
                return domain(format!("height {i} must be positive and finite, got {h}"));
            }
            pairs.push((g, h));
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut offsets: Vec<f64> = Vec::with_capacity(pairs.len());
        let mut heights: Vec<f64> = Vec::with_capacity(pairs.len());
        for (g, h) in pairs {
            if offsets.last() == Some(&g) {
                *heights.last_mut().unwrap() += h;
            } else {
                offsets.push(g);
                heights.push(h);
            }
        }
        let mut levels = Vec::with_capacity(offsets.len() + 1);
        let mut acc = base;
        levels.push(acc);
        for h in &heights {
            acc += h;
            levels.push(acc);
        }
        Ok(Self {
            base,
            offsets,
            heights,
            levels,
        })
    }

    /// The sign function (−1 below zero, +1 from zero on).
    pub fn sign() -> Self {
        Self::new(-1.0, vec![0.0], vec![2.0]).expect("valid")
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    /// Number of output states.
    pub fn n_states(&self) -> usize {
        self.offsets.len() + 1
    }

    /// Output values from lowest to highest.
    pub fn states(&self) -> &[f64] {
        &self.levels
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.levels[self.offsets.partition_point(|g| *g <= x)]
    }

    pub fn staircase(&self) -> Staircase<'_> {
        Staircase {
            base: self.base,
            offsets: &self.offsets,
            heights: &self.heights,
        }
    }

    /// Offsets divided by `√q_star`.
    pub fn normalized_offsets(&self, q_star: f64) -> Result<Vec<f64>> {
        if !(q_star > 0.0 && q_star.is_finite()) {
            return domain(format!("q_star must be positive, got {q_star}"));
        }
        let s = q_star.sqrt();
        Ok(self.offsets.iter().map(|g| g / s).collect())
    }

    /// True when `φ(−x) = −φ(x)` away from the offsets.
    pub fn is_odd(&self) -> bool {
        let n = self.offsets.len();
        let tol = 1e-12 * (1.0 + self.levels.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        (0..n).all(|i| {
            (self.offsets[i] + self.offsets[n - 1 - i]).abs() <= tol
                && (self.heights[i] - self.heights[n - 1 - i]).abs() <= tol
        }) && (self.base + self.levels[n]).abs() <= tol
    }
}

/// Evenly spaced staircase with states `{−1, …, +1}`:
/// offsets `(2/(N−1))(i − N/2)`, all heights `2/(N−1)`.
pub fn make_constant_spaced(n_states: usize) -> Result<QuantizedActivation> {
    if n_states < 2 {
        return domain(format!("need at least 2 states, got {n_states}"));
    }
    let d = 2.0 / (n_states as f64 - 1.0);
    let half = n_states as f64 / 2.0;
    let offsets = (1..n_states).map(|i| d * (i as f64 - half)).collect();
    QuantizedActivation::new(-1.0, offsets, vec![d; n_states - 1])
}

/// Staircase with spacing growing linearly away from the centre:
/// offsets `d0·m·(1 + d1·|m|)`, `m = i − N/2`, heights `2/(N−1)`.
pub fn make_linear_spaced(n_states: usize, d0: f64, d1: f64) -> Result<QuantizedActivation> {
    if n_states < 2 {
        return domain(format!("need at least 2 states, got {n_states}"));
    }
    if !(d0 > 0.0 && d0.is_finite()) {
        return domain(format!("d0 must be positive, got {d0}"));
    }
    check_finite("d1", d1)?;
    let half = n_states as f64 / 2.0;
    let offsets: Vec<f64> = (1..n_states)
        .map(|i| {
            let m = i as f64 - half;
            d0 * m * (1.0 + d1 * m.abs())
        })
        .collect();
    if let Some(i) = offsets.windows(2).position(|w| w[1] <= w[0]) {
        return domain(format!(
            "linear spacing with d1 = {d1} breaks ordering at offset index {}",
            i + 2
        ));
    }
    let h = 2.0 / (n_states as f64 - 1.0);
    QuantizedActivation::new(-1.0, offsets, vec![h; n_states - 1])
}

/// JSON form of an activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ActivationDescriptor {
    Sign,
    Constant {
        states: usize,
    },
    Linear {
        states: usize,
        d0: f64,
        d1: f64,
    },
    General {
        base: f64,
        offsets: Vec<f64>,
        heights: Vec<f64>,
    },
}

impl ActivationDescriptor {
    pub fn build(&self) -> Result<QuantizedActivation> {
        match self {
            Self::Sign => Ok(QuantizedActivation::sign()),
            Self::Constant { states } => make_constant_spaced(*states),
            Self::Linear { states, d0, d1 } => make_linear_spaced(*states, *d0, *d1),
            Self::General { base, offsets, heights } => {
                QuantizedActivation::new(*base, offsets.clone(), heights.clone())
            }
        }
    }

    /// Accepts a JSON object or one of the shorthands `sign` and `constant:N`.
    pub fn parse(text: &str) -> Result<Self> {
        let t = text.trim();
        if t == "sign" {
            return Ok(Self::Sign);
        }
        if let Some(n) = t.strip_prefix("constant:") {
            let states = n
                .parse()
                .map_err(|_| Error::Parse(format!("bad state count in {t:?}")))?;
            return Ok(Self::Constant { states });
        }
        serde_json::from_str(t).map_err(|e| Error::Parse(format!("activation descriptor: {e}")))
    }
}

/// Hard-tanh backward surrogate: derivative `ρ` on `|x| < clip`, else 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteSurrogate {
    pub rho: f64,
    pub clip: f64,
}

impl SteSurrogate {
    pub fn new(rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) {
            return domain(format!("rho must be positive, got {rho}"));
        }
        Ok(Self { rho, clip: 1.0 })
    }

    pub fn derivative(&self, x: f64) -> f64 {
        if x.abs() < self.clip {
            self.rho
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_spaced_small_cases() {
        let s = make_constant_spaced(2).unwrap();
        assert_eq!((s.base(), s.offsets(), s.heights()), (-1.0, &[0.0][..], &[2.0][..]));
        let t = make_constant_spaced(3).unwrap();
        assert_eq!(t.offsets(), &[-0.5, 0.5]);
        assert_eq!(t.states(), &[-1.0, 0.0, 1.0]);
        assert_eq!(t.eval(0.0), 0.0);
        assert!(make_constant_spaced(1).is_err());
        for n in [2, 5, 16] {
            let a = make_constant_spaced(n).unwrap();
            assert!((a.eval(1e9) - 1.0).abs() < 1e-12 && a.is_odd());
        }
    }

    #[test]
    fn sign_uses_right_continuity() {
        let s = QuantizedActivation::sign();
        assert_eq!(s.eval(0.0), 1.0);
        assert_eq!(s.eval(-0.1), -1.0);
    }

    #[test]
    fn linear_spacing() {
        let a = make_linear_spaced(4, 1.0, 0.5).unwrap();
        // m = -1, 0, 1
        assert_eq!(a.offsets(), &[-1.5, 0.0, 1.5]);
        let flat = make_linear_spaced(6, 0.3, 0.0).unwrap();
        let c = make_constant_spaced(6).unwrap();
        for (x, y) in flat.offsets().iter().zip(c.offsets()) {
            assert!((x - y * 0.3 * 5.0 / 2.0).abs() < 1e-15);
        }
        let err = make_linear_spaced(6, 1.0, -0.6).unwrap_err().to_string();
        assert!(err.contains("index"), "{err}");
    }

    #[test]
    fn merging_and_validation() {
        let a = QuantizedActivation::new(0.0, vec![1.0, 0.0, 1.0], vec![1.0, 2.0, 0.5]).unwrap();
        assert_eq!(a.offsets(), &[0.0, 1.0]);
        assert_eq!(a.heights(), &[2.0, 1.5]);
        assert!(QuantizedActivation::new(0.0, vec![0.0], vec![0.0]).is_err());
        assert!(a.normalized_offsets(0.0).is_err());
        assert_eq!(a.normalized_offsets(4.0).unwrap(), vec![0.0, 0.5]);
    }

    #[test]
    fn descriptors() {
        for text in [
            r#"{"kind":"constant","states":10}"#,
            r#"{"kind":"linear","states":4,"d0":0.5,"d1":0.1}"#,
            r#"{"kind":"sign"}"#,
            r#"{"kind":"general","base":0,"offsets":[0.1],"heights":[1]}"#,
            "sign",
            "constant:7",
        ] {
            ActivationDescriptor::parse(text).unwrap().build().unwrap();
        }
        assert!(ActivationDescriptor::parse(r#"{"kind":"tanh"}"#).is_err());
    }

    #[test]
    fn ste_derivative() {
        let s = SteSurrogate::new(1.5).unwrap();
        assert_eq!((s.derivative(0.99), s.derivative(1.0)), (1.5, 0.0));
        assert!(SteSurrogate::new(0.0).is_err());
    }
}
