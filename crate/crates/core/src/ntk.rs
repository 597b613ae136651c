//! Infinite-width Neural Tangent Kernel for staircase networks trained with
//! a surrogate derivative, and diagnostics of its deep-network structure.

use std::io::{Read, Write};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::activations::QuantizedActivation;
use crate::error::{domain, Error, Result};
use crate::gauss_kernel::{bivariate_density, cdf, expect_2d_steps, rect_prob, Bivariate};
use crate::meanfield::{mu, q_hat, HyperParams};
use crate::output::{csv_err, csv_writer, fmt17, write_row};
use crate::parallel;

/// Feature vectors with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<String>,
}

/// Input inner products `x_iᵀ x_j / n₀` with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledGram {
    pub gram: Array2<f64>,
    pub labels: Vec<String>,
}

impl LabeledGram {
    pub fn new(gram: Array2<f64>, labels: Vec<String>) -> Result<Self> {
        let n = gram.nrows();
        if gram.ncols() != n || labels.len() != n || n == 0 {
            return domain(format!("gram is {:?} with {} labels", gram.dim(), labels.len()));
        }
        let scale = gram.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for i in 0..n {
            if !(gram[[i, i]] > 0.0) {
                return domain(format!("gram diagonal entry {i} is not positive"));
            }
            for j in 0..i {
                if (gram[[i, j]] - gram[[j, i]]).abs() > 1e-12 * scale || !gram[[i, j]].is_finite() {
                    return domain(format!("gram is not symmetric at ({i}, {j})"));
                }
            }
        }
        Ok(Self { gram, labels })
    }

    pub fn from_dataset(d: &Dataset) -> Result<Self> {
        let n0 = d.features.ncols() as f64;
        Self::new(d.features.dot(&d.features.t()) / n0, d.labels.clone())
    }
}

/// Two Gaussian clusters in `dim` dimensions with means `±(separation/2)·√dim·e`
/// along a random unit direction `e`; labels alternate `0`, `1`.
pub fn synthetic_two_class(n_points: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if n_points < 2 || dim < 1 || !separation.is_finite() {
        return domain("need at least 2 points, dim >= 1 and a finite separation");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let ne = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    e.iter_mut().for_each(|v| *v /= ne);
    let shift = 0.5 * separation * (dim as f64).sqrt();
    let mut features = Array2::zeros((n_points, dim));
    let mut labels = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let sign = if i % 2 == 0 { -1.0 } else { 1.0 };
        for j in 0..dim {
            features[[i, j]] = sign * shift * e[j] + rng.sample::<f64, _>(StandardNormal);
        }
        labels.push((i % 2).to_string());
    }
    Ok(Dataset { features, labels })
}

/// Reads rows of numeric features followed by a label.
pub fn read_dataset_csv<R: Read>(reader: R, has_header: bool) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(has_header).from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::Parse(format!("row {line}: {}", csv_err(e)))
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() < 2 {
            return Err(Error::Parse(format!(
                "row {line}: need at least one feature and a label"
            )));
        }
        let mut feats = Vec::with_capacity(rec.len() - 1);
        for (col, field) in rec.iter().take(rec.len() - 1).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("row {line}: column {} value {field:?} is not numeric", col + 1)))?;
            feats.push(v);
        }
        rows.push(feats);
        labels.push(rec[rec.len() - 1].trim().to_string());
    }
    if rows.is_empty() {
        return Err(Error::Parse("dataset has no rows".into()));
    }
    let dim = rows[0].len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let features = Array2::from_shape_vec((labels.len(), dim), flat).map_err(|e| Error::Parse(e.to_string()))?;
    Ok(Dataset { features, labels })
}

/// Backward surrogate used inside the kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DerivativeKind {
    /// `ρ·𝟙{|u| ≤ 1}`.
    Ste { rho: f64 },
    /// The staircase's derivative smoothed by a Gaussian of std `width`:
    /// `Σ h_k N(u; g_k, width²)`.
    Smooth { width: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelMatrix {
    pub entries: Array2<f64>,
    /// Number of hidden layers `L`; the kernel sums `L + 1` terms.
    pub depth: usize,
}

impl KernelMatrix {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv_writer(w);
        for row in self.entries.rows() {
            write_row(&mut out, &row.iter().map(|v| fmt17(*v)).collect::<Vec<_>>())?;
        }
        out.flush()?;
        Ok(())
    }
}

fn pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect()
}

fn fill(n: usize, idx: &[(usize, usize)], vals: Vec<f64>) -> Array2<f64> {
    let mut m = Array2::zeros((n, n));
    for (&(i, j), v) in idx.iter().zip(vals) {
        m[[i, j]] = v;
        m[[j, i]] = v;
    }
    m
}

fn geometry(s: &Array2<f64>, i: usize, j: usize) -> Bivariate {
    let (q1, q2) = (s[[i, i]], s[[j, j]]);
    let c = if i == j {
        1.0
    } else {
        (s[[i, j]] / (q1 * q2).sqrt()).clamp(-1.0, 1.0)
    };
    Bivariate { q1, q2, c }
}

fn next_sigma(
    s: &Array2<f64>,
    act: &QuantizedActivation,
    hp: HyperParams,
    idx: &[(usize, usize)],
) -> Result<Array2<f64>> {
    let st = act.staircase();
    let vals = parallel::map(idx, |&(i, j)| -> Result<f64> {
        let e = if i == j {
            let q = s[[i, i]];
            let m = mu(act, q)?;
            q_hat(act, q)? + m * m
        } else {
            expect_2d_steps(st, st, geometry(s, i, j))?
        };
        Ok(hp.sigma_w2 * e + hp.sigma_b2)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(fill(s.nrows(), idx, vals))
}

fn derivative_pair(act: &QuantizedActivation, kind: DerivativeKind, b: Bivariate) -> Result<f64> {
    match kind {
        DerivativeKind::Ste { rho } => {
            let (s1, s2) = (b.q1.sqrt(), b.q2.sqrt());
            let p = if b.c == 1.0 && b.q1 == b.q2 {
                cdf(1.0 / s1) - cdf(-1.0 / s1)
            } else {
                rect_prob(-1.0 / s1, 1.0 / s1, -1.0 / s2, 1.0 / s2, b.c)
            };
            Ok(rho * rho * p)
        }
        DerivativeKind::Smooth { width } => {
            let w2 = width * width;
            let cov = b.c * (b.q1 * b.q2).sqrt();
            let (v1, v2) = (b.q1 + w2, b.q2 + w2);
            let noisy = Bivariate {
                q1: v1,
                q2: v2,
                c: cov / (v1 * v2).sqrt(),
            };
            let (g, h) = (act.offsets(), act.heights());
            let mut total = 0.0;
            for k in 0..g.len() {
                for m in 0..g.len() {
                    total += h[k] * h[m] * bivariate_density(g[k], g[m], noisy)?;
                }
            }
            Ok(total)
        }
    }
}

fn next_sigma_dot(
    s: &Array2<f64>,
    act: &QuantizedActivation,
    kind: DerivativeKind,
    hp: HyperParams,
    idx: &[(usize, usize)],
) -> Result<Array2<f64>> {
    let vals = parallel::map(idx, |&(i, j)| {
        derivative_pair(act, kind, geometry(s, i, j)).map(|v| hp.sigma_w2 * v)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(fill(s.nrows(), idx, vals))
}

fn check_kind(kind: DerivativeKind) -> Result<()> {
    match kind {
        DerivativeKind::Ste { rho } if !(rho > 0.0 && rho.is_finite()) => domain("rho must be positive"),
        DerivativeKind::Smooth { width } if !(width > 0.0 && width.is_finite()) => domain("width must be positive"),
        _ => Ok(()),
    }
}

/// `Σ^(1), …, Σ^(depth)`, starting from `σ_w²·gram + σ_b²`.
pub fn sigma_recursion(
    g: &LabeledGram,
    act: &QuantizedActivation,
    hp: HyperParams,
    depth: usize,
) -> Result<Vec<Array2<f64>>> {
    if depth < 1 {
        return domain("depth must be >= 1");
    }
    LabeledGram::new(g.gram.clone(), g.labels.clone())?;
    let idx = pairs(g.gram.nrows());
    let mut out = vec![g.gram.mapv(|v| hp.sigma_w2 * v + hp.sigma_b2)];
    for _ in 1..depth {
        let next = next_sigma(out.last().unwrap(), act, hp, &idx)?;
        out.push(next);
    }
    Ok(out)
}

/// Derivative covariances `Σ'^(l)` for `l = 2..=depth`, each computed from
/// `Σ^(l−1)`.
pub fn sigma_dot_recursion(
    sigmas: &[Array2<f64>],
    act: &QuantizedActivation,
    kind: DerivativeKind,
    hp: HyperParams,
) -> Result<Vec<Array2<f64>>> {
    check_kind(kind)?;
    let n = sigmas.first().map(|s| s.nrows()).unwrap_or(0);
    let idx = pairs(n);
    sigmas[..sigmas.len().saturating_sub(1)]
        .iter()
        .map(|s| next_sigma_dot(s, act, kind, hp, &idx))
        .collect()
}

/// Kernels for `L` hidden layers at each requested depth, from one pass
/// of `Θ^(l+1) = Σ'^(l+1) ⊙ Θ^(l) + Σ^(l+1)`.
pub fn ntk_by_depth(
    g: &LabeledGram,
    act: &QuantizedActivation,
    kind: DerivativeKind,
    hp: HyperParams,
    depths: &[usize],
) -> Result<Vec<KernelMatrix>> {
    check_kind(kind)?;
    LabeledGram::new(g.gram.clone(), g.labels.clone())?;
    let max = depths.iter().copied().max().unwrap_or(0);
    let idx = pairs(g.gram.nrows());
    let mut sigma = g.gram.mapv(|v| hp.sigma_w2 * v + hp.sigma_b2);
    let mut theta = sigma.clone();
    let mut snapshots = vec![None; max + 1];
    snapshots[0] = Some(theta.clone());
    for (l, snap) in snapshots.iter_mut().enumerate().skip(1) {
        let dot = next_sigma_dot(&sigma, act, kind, hp, &idx)?;
        sigma = next_sigma(&sigma, act, hp, &idx)?;
        theta = &dot * &theta + &sigma;
        if depths.contains(&l) {
            *snap = Some(theta.clone());
        }
    }
    Ok(depths
        .iter()
        .map(|&d| KernelMatrix {
            entries: snapshots[d].clone().expect("filled"),
            depth: d,
        })
        .collect())
}

pub fn ntk_asymptotic(
    g: &LabeledGram,
    act: &QuantizedActivation,
    kind: DerivativeKind,
    hp: HyperParams,
    depth: usize,
) -> Result<KernelMatrix> {
    Ok(ntk_by_depth(g, act, kind, hp, &[depth])?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrMetrics {
    pub signal: Vec<f64>,
    pub noise: Vec<f64>,
    /// Mean same-label off-diagonal mass.
    pub s: f64,
    /// Mean of `S_i/N_i` over points with `N_i ≠ 0`.
    pub snr: f64,
    /// Points left out of the SNR because `N_i = 0`.
    pub excluded: Vec<usize>,
}

pub fn snr_metrics(k: &KernelMatrix, labels: &[String]) -> Result<SnrMetrics> {
    let n = k.entries.nrows();
    if labels.len() != n {
        return domain(format!("{} labels for a {n}x{n} kernel", labels.len()));
    }
    let mut signal = vec![0.0; n];
    let mut noise = vec![0.0; n];
    for i in 0..n {
        let l1: f64 = k.entries.row(i).iter().map(|v| v.abs()).sum();
        signal[i] = (0..n)
            .filter(|&j| j != i && labels[j] == labels[i])
            .map(|j| k.entries[[i, j]])
            .sum();
        noise[i] = l1 - signal[i];
    }
    let excluded: Vec<usize> = (0..n).filter(|&i| noise[i] == 0.0).collect();
    let ratios: Vec<f64> = (0..n)
        .filter(|&i| noise[i] != 0.0)
        .map(|i| signal[i] / noise[i])
        .collect();
    let snr = if ratios.is_empty() {
        f64::NAN
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    };
    let s = signal.iter().sum::<f64>() / n as f64;
    Ok(SnrMetrics {
        signal,
        noise,
        s,
        snr,
        excluded,
    })
}

/// Summary of `Θ/(L+1)` per depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeepLimit {
    pub depths: Vec<usize>,
    /// Mean diagonal.
    pub alpha: Vec<f64>,
    /// Mean off-diagonal.
    pub beta: Vec<f64>,
    /// Standard deviation of the off-diagonal entries.
    pub dispersion: Vec<f64>,
    /// `dispersion/|β|`, the off-diagonal coefficient of variation.
    pub cv: Vec<f64>,
}

/// Off-diagonal pairs equal to both their diagonal entries (duplicated
/// inputs) are left out of β and the dispersion.
pub fn deep_limit_structure(ks: &[KernelMatrix]) -> Result<DeepLimit> {
    if ks.len() < 2 {
        return domain("need kernels at two or more depths");
    }
    let mut out = DeepLimit {
        depths: vec![],
        alpha: vec![],
        beta: vec![],
        dispersion: vec![],
        cv: vec![],
    };
    for k in ks {
        let e = &k.entries / (k.depth as f64 + 1.0);
        let n = e.nrows();
        let alpha = (0..n).map(|i| e[[i, i]]).sum::<f64>() / n as f64;
        let mut off = Vec::new();
        for i in 0..n {
            for j in 0..i {
                let same = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs());
                if same(e[[i, j]], e[[i, i]]) && same(e[[i, j]], e[[j, j]]) {
                    continue;
                }
                off.push(e[[i, j]]);
            }
        }
        let m = off.len().max(1) as f64;
        let beta = off.iter().sum::<f64>() / m;
        let disp = (off.iter().map(|v| (v - beta).powi(2)).sum::<f64>() / m).sqrt();
        out.depths.push(k.depth);
        out.alpha.push(alpha);
        out.beta.push(beta);
        out.dispersion.push(disp);
        out.cv.push(disp / beta.abs());
    }
    Ok(out)
}
