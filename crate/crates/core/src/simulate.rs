//! Finite-width random networks, used to check mean-field predictions.
//!
//! Weights are never stored for the whole network. Layer `l` is regenerated
//! on demand from `(seed, l, row)`, so results do not depend on evaluation
//! order or thread count.

use std::f64::consts::PI;
use std::io::Write;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::activations::{ActivationDescriptor, QuantizedActivation, SteSurrogate};
use crate::error::{domain, Error, Result};
use crate::meanfield::{c_map, solve_c_star, solve_q_star, HyperParams, SolverOptions};
use crate::output::{csv_writer, fmt17, write_row};
use crate::parallel;

/// Default cap on a single layer's weight matrix plus activations.
pub const DEFAULT_MEMORY_BUDGET: u64 = 2 << 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub hp: HyperParams,
    pub activation: ActivationDescriptor,
    pub seed: u64,
}

impl NetworkSpec {
    fn validate(&self) -> Result<()> {
        if self.input_dim < 2 || self.width < 1 || self.depth < 1 {
            return domain(format!(
                "need input_dim >= 2, width >= 1, depth >= 1; got {}, {}, {}",
                self.input_dim, self.width, self.depth
            ));
        }
        HyperParams::new(self.hp.sigma_w2, self.hp.sigma_b2)?;
        Ok(())
    }

    fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// A random network whose layers are materialised one at a time.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    act: QuantizedActivation,
}

pub fn build_network(spec: &NetworkSpec) -> Result<Network> {
    build_network_with_budget(spec, DEFAULT_MEMORY_BUDGET)
}

pub fn build_network_with_budget(spec: &NetworkSpec, budget: u64) -> Result<Network> {
    spec.validate()?;
    let fan_in = if spec.depth > 1 {
        spec.input_dim.max(spec.width)
    } else {
        spec.input_dim
    } as u64;
    let required = (spec.width as u64).saturating_mul(fan_in).saturating_mul(8);
    if required > budget {
        return Err(Error::Resource { required, budget });
    }
    Ok(Network {
        spec: spec.clone(),
        act: spec.activation.build()?,
    })
}

impl Network {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn activation(&self) -> &QuantizedActivation {
        &self.act
    }

    fn fan_in(&self, layer: usize) -> usize {
        if layer == 1 {
            self.spec.input_dim
        } else {
            self.spec.width
        }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.spec.seed);
        r.set_stream(stream);
        r
    }

    /// Weight matrix of layer `layer` (1-based), shape `(width, fan_in)`.
    pub fn weights(&self, layer: usize) -> Array2<f64> {
        let (n, m) = (self.spec.width, self.fan_in(layer));
        let scale = (self.spec.hp.sigma_w2 / m as f64).sqrt();
        let mut rng = self.rng(2 * layer as u64);
        let mut data = Vec::with_capacity(n * m);
        for row in 0..n {
            rng.set_word_pos((row as u128) << 32);
            data.extend((0..m).map(|_| scale * rng.sample::<f64, _>(StandardNormal)));
        }
        Array2::from_shape_vec((n, m), data).expect("shape")
    }

    pub fn biases(&self, layer: usize) -> Array1<f64> {
        let sb = self.spec.hp.sigma_b2.sqrt();
        if sb == 0.0 {
            return Array1::zeros(self.spec.width);
        }
        let mut rng = self.rng(2 * layer as u64 + 1);
        (0..self.spec.width)
            .map(|_| sb * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Runs `inputs` (one row per sample) forward and hands each layer's
    /// pre-activations to `visit` along with the layer's weights.
    pub fn forward_each<F>(&self, inputs: &Array2<f64>, mut visit: F) -> Result<()>
    where
        F: FnMut(usize, &Array2<f64>, &Array2<f64>) -> Result<()>,
    {
        if inputs.ncols() != self.spec.input_dim {
            return domain(format!(
                "inputs have {} columns, network expects {}",
                inputs.ncols(),
                self.spec.input_dim
            ));
        }
        let mut h = inputs.clone();
        for l in 1..=self.spec.depth {
            let w = self.weights(l);
            let mut pre = h.dot(&w.t());
            pre += &self.biases(l);
            visit(l, &pre, &w)?;
            if l < self.spec.depth {
                h = pre.mapv(|x| self.act.eval(x));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSpec {
    pub num_samples: usize,
    /// Squared norm of every input point.
    pub q_star_s: f64,
    pub seed: u64,
}

/// `r` points `√q_s (u⁰ cos θ_i + u¹ sin θ_i)`, `θ_i = 2πi/r`, on the circle
/// spanned by two random orthonormal vectors.
pub fn manifold_inputs(n0: usize, m: &ManifoldSpec) -> Result<Array2<f64>> {
    if n0 < 2 || m.num_samples < 2 || !(m.q_star_s > 0.0) {
        return domain("need n0 >= 2, at least 2 samples and a positive squared norm");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(m.seed);
    let mut u0: Vec<f64> = (0..n0).map(|_| rng.sample(StandardNormal)).collect();
    let mut u1: Vec<f64> = (0..n0).map(|_| rng.sample(StandardNormal)).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let n = norm(&u0);
    u0.iter_mut().for_each(|x| *x /= n);
    let d: f64 = u0.iter().zip(&u1).map(|(a, b)| a * b).sum();
    u1.iter_mut().zip(&u0).for_each(|(b, a)| *b -= d * a);
    let n = norm(&u1);
    u1.iter_mut().for_each(|x| *x /= n);
    let s = m.q_star_s.sqrt();
    let r = m.num_samples;
    Ok(Array2::from_shape_fn((r, n0), |(i, j)| {
        let t = 2.0 * PI * i as f64 / r as f64;
        s * (u0[j] * t.cos() + u1[j] * t.sin())
    }))
}

/// Empirical statistics of one layer's pre-activations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    /// Mean over samples of `‖α‖²/n`.
    pub q_emp: f64,
    /// Mean correlation of samples `k` apart (cyclically), `k = 0..=r/2`.
    pub c_emp: Vec<f64>,
}

fn layer_stats(layer: usize, pre: &Array2<f64>) -> LayerStats {
    let (r, n) = pre.dim();
    let norms: Vec<f64> = pre.axis_iter(Axis(0)).map(|row| row.dot(&row)).collect();
    let q_emp = norms.iter().sum::<f64>() / (r * n) as f64;
    let mut unit = pre.clone();
    for (mut row, nn) in unit.axis_iter_mut(Axis(0)).zip(&norms) {
        if *nn > 0.0 {
            row /= nn.sqrt();
        }
    }
    let gram = unit.dot(&unit.t());
    let c_emp = (0..=r / 2)
        .map(|k| (0..r).map(|i| gram[[i, (i + k) % r]]).sum::<f64>() / r as f64)
        .collect();
    LayerStats { layer, q_emp, c_emp }
}

/// Per-layer variance and cyclic-lag correlations of the pre-activations.
/// Rows of `inputs` are taken to be evenly spaced around a closed curve.
pub fn forward_collect(net: &Network, inputs: &Array2<f64>) -> Result<Vec<LayerStats>> {
    let mut out = Vec::with_capacity(net.spec.depth);
    net.forward_each(inputs, |l, pre, _| {
        out.push(layer_stats(l, pre));
        Ok(())
    })?;
    Ok(out)
}

/// Squared input norm that puts layer-1 variance at `q_star`.
pub fn input_scale_for(q_star: f64, hp: HyperParams, n0: usize) -> Result<f64> {
    let s = (q_star - hp.sigma_b2) / hp.sigma_w2 * n0 as f64;
    if s > 0.0 {
        Ok(s)
    } else {
        domain("fixed-point variance does not exceed the bias variance")
    }
}

/// Mean and standard error over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
    pub per_seed: Vec<f64>,
    /// Mean-field value the estimate targets.
    pub theory: f64,
}

fn summarise(per_seed: Vec<f64>, theory: f64) -> Estimate {
    let n = per_seed.len() as f64;
    let mean = per_seed.iter().sum::<f64>() / n;
    let var = if per_seed.len() > 1 {
        per_seed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Estimate {
        mean,
        std_err: (var / n).sqrt(),
        per_seed,
        theory,
    }
}

fn seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|s| base.wrapping_add(s)).collect()
}

/// Regression estimate of the fixed-point slope from simulated input pairs
/// started at the two correlations in `c0_window`.
///
/// Pairs live in orthogonal coordinate planes (`input_dim/2` of them), half
/// at each starting correlation. Per seed, `C̄^{l+1} − C*` is regressed on
/// `C̄^{l} − C*` through the origin, using layers whose deviation is still
/// above the sampling noise floor `3/√(width · pairs)`.
pub fn empirical_chi(spec: &NetworkSpec, c0_window: (f64, f64), n_seeds: usize) -> Result<Estimate> {
    spec.validate()?;
    if n_seeds == 0 || spec.input_dim < 4 {
        return domain("need at least one seed and input_dim >= 4");
    }
    if !(c0_window.0.abs() < 1.0 && c0_window.1.abs() < 1.0) {
        return domain("starting correlations must lie in (-1, 1)");
    }
    let act = spec.activation.build()?;
    let cs = solve_c_star(&act, spec.hp, SolverOptions::default())?;
    let pairs = spec.input_dim / 2;
    let qs = input_scale_for(cs.q_star, spec.hp, spec.input_dim)?.sqrt();
    let mut x = Array2::zeros((2 * pairs, spec.input_dim));
    let mut side = vec![0usize; pairs];
    for p in 0..pairs {
        side[p] = p % 2;
        let c0 = if side[p] == 0 { c0_window.0 } else { c0_window.1 };
        x[[2 * p, 2 * p]] = qs;
        x[[2 * p + 1, 2 * p]] = qs * c0;
        x[[2 * p + 1, 2 * p + 1]] = qs * (1.0 - c0 * c0).sqrt();
    }
    let counts = [pairs.div_ceil(2), pairs / 2];
    let floor = 3.0 / ((spec.width * pairs) as f64).sqrt();
    let seed_list = seeds(spec.seed, n_seeds);
    let per_seed = parallel::map(&seed_list, |&s| -> Result<f64> {
        let net = build_network(&spec.with_seed(s))?;
        let mut curves = vec![Vec::new(), Vec::new()];
        net.forward_each(&x, |_, pre, _| {
            let mut sums = [0.0; 2];
            for p in 0..pairs {
                let a = pre.row(2 * p);
                let b = pre.row(2 * p + 1);
                sums[side[p]] += a.dot(&b) / (a.dot(&a) * b.dot(&b)).sqrt();
            }
            for k in 0..2 {
                if counts[k] > 0 {
                    curves[k].push(sums[k] / counts[k] as f64 - cs.c_star);
                }
            }
            Ok(())
        })?;
        let (mut sxy, mut sxx, mut used) = (0.0, 0.0, 0);
        for c in &curves {
            for w in c.windows(2) {
                if w[0].abs() >= floor {
                    sxy += w[0] * w[1];
                    sxx += w[0] * w[0];
                    used += 1;
                }
            }
        }
        if used < 2 {
            return Err(Error::Estimation(format!(
                "only {used} layer transitions above the noise floor {floor:.3e}; widen the window or add depth"
            )));
        }
        Ok(sxy / sxx)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(summarise(per_seed, cs.chi))
}

/// Monte Carlo estimate of `(1/n) tr(J Jᵀ)` for the straight-through
/// Jacobian `∂α^{l+1}/∂α^l = W^{l+1} diag(φ'_STE(α^l))`, averaged over the
/// `L − 1` layer transitions.
pub fn jacobian_moment_mc(spec: &NetworkSpec, ste: SteSurrogate, n_seeds: usize) -> Result<Estimate> {
    spec.validate()?;
    if spec.depth < 2 || n_seeds == 0 {
        return domain("need depth >= 2 and at least one seed");
    }
    let act = spec.activation.build()?;
    let q = solve_q_star(&act, spec.hp, SolverOptions::default())?.q_star;
    let scale = input_scale_for(q, spec.hp, spec.input_dim)?.sqrt();
    let seed_list = seeds(spec.seed, n_seeds);
    let per_seed = parallel::map(&seed_list, |&s| -> Result<f64> {
        let net = build_network(&spec.with_seed(s))?;
        let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x9e37_79b9_7f4a_7c15);
        let mut x: Vec<f64> = (0..spec.input_dim).map(|_| rng.sample(StandardNormal)).collect();
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        x.iter_mut().for_each(|v| *v *= scale / nx);
        let input = Array2::from_shape_vec((1, spec.input_dim), x).expect("shape");
        let (mut total, mut layers) = (0.0, 0);
        let mut d2: Vec<f64> = Vec::new();
        net.forward_each(&input, |l, pre, w| {
            if l >= 2 {
                let m: f64 = w.axis_iter(Axis(1)).zip(&d2).map(|(col, d)| d * col.dot(&col)).sum();
                total += m / spec.width as f64;
                layers += 1;
            }
            d2 = pre.row(0).iter().map(|u| ste.derivative(*u).powi(2)).collect();
            Ok(())
        })?;
        Ok(total / layers as f64)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let s = q.sqrt();
    let p_inside = crate::gauss_kernel::cdf(1.0 / s) - crate::gauss_kernel::cdf(-1.0 / s);
    let theory = spec.hp.sigma_w2 * ste.rho * ste.rho * p_inside;
    Ok(summarise(per_seed, theory))
}

/// Settings for the manifold propagation experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldExperiment {
    pub n_states: usize,
    pub input_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub num_samples: usize,
    /// Weight scales as multiples of the optimal σ_w.
    pub multipliers: Vec<f64>,
    pub n_seeds: usize,
    pub seed: u64,
    /// Layers `1..=mae_layers` enter the theory-vs-simulation error.
    pub mae_layers: usize,
}

impl Default for ManifoldExperiment {
    fn default() -> Self {
        Self {
            n_states: 16,
            input_dim: 1000,
            width: 1000,
            depth: 100,
            num_samples: 500,
            multipliers: vec![0.5, 1.0, 2.0],
            n_seeds: 5,
            seed: 0,
            mae_layers: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldRun {
    pub sigma_w: f64,
    pub q_star: f64,
    pub chi: f64,
    /// `[layer][lag]`, seed-averaged.
    pub c_emp: Vec<Vec<f64>>,
    pub c_theory: Vec<Vec<f64>>,
    pub q_emp: Vec<f64>,
    /// Mean absolute theory-vs-simulation gap over the first layers.
    pub mae: f64,
    /// Mean |C| at the last layer over lags strictly between 0 and π.
    /// Those two lags are pinned at ±1 for odd activations without bias, so
    /// they carry no information about decay.
    pub final_retention: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldResult {
    pub config: ManifoldExperiment,
    pub sigma_w_opt: f64,
    pub delta_theta: Vec<f64>,
    pub runs: Vec<ManifoldRun>,
}

/// Propagates a circle of inputs through random networks at several weight
/// scales and overlays the iterated correlation map.
pub fn manifold_experiment(cfg: &ManifoldExperiment) -> Result<ManifoldResult> {
    if cfg.width == 0 || cfg.depth == 0 || cfg.n_seeds == 0 || cfg.multipliers.is_empty() {
        return domain("width, depth, seeds and multipliers must all be non-empty");
    }
    let curve = crate::calibrate::optimize_spacing(
        cfg.n_states,
        crate::calibrate::DEFAULT_COARSE_POINTS,
        crate::calibrate::DEFAULT_REFINE_TOL,
    )?;
    let opt = crate::calibrate::init_params(cfg.n_states, curve.d_tilde_opt)?.sigma_w;
    let act = crate::make_constant_spaced(cfg.n_states)?;
    let r = cfg.num_samples;
    let delta_theta: Vec<f64> = (0..=r / 2).map(|k| 2.0 * PI * k as f64 / r as f64).collect();
    let mut runs = Vec::new();
    for &mult in &cfg.multipliers {
        let sigma_w = mult * opt;
        let hp = HyperParams::from_std(sigma_w, 0.0)?;
        let q_star = solve_q_star(&act, hp, SolverOptions::default())?.q_star;
        let chi = solve_c_star(&act, hp, SolverOptions::default())?.chi;
        let spec = NetworkSpec {
            input_dim: cfg.input_dim,
            width: cfg.width,
            depth: cfg.depth,
            hp,
            activation: ActivationDescriptor::Constant { states: cfg.n_states },
            seed: cfg.seed,
        };
        let q_s = input_scale_for(q_star, hp, cfg.input_dim)?;
        let seed_list = seeds(cfg.seed, cfg.n_seeds);
        let per_seed = parallel::map(&seed_list, |&s| -> Result<Vec<LayerStats>> {
            let inputs = manifold_inputs(
                cfg.input_dim,
                &ManifoldSpec {
                    num_samples: r,
                    q_star_s: q_s,
                    seed: s,
                },
            )?;
            forward_collect(&build_network(&spec.with_seed(s))?, &inputs)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let ns = per_seed.len() as f64;
        let c_emp: Vec<Vec<f64>> = (0..cfg.depth)
            .map(|l| {
                (0..delta_theta.len())
                    .map(|k| per_seed.iter().map(|p| p[l].c_emp[k]).sum::<f64>() / ns)
                    .collect()
            })
            .collect();
        let q_emp = (0..cfg.depth)
            .map(|l| per_seed.iter().map(|p| p[l].q_emp).sum::<f64>() / ns)
            .collect();
        let c_theory = theory_curves(&act, hp, q_star, q_s / cfg.input_dim as f64, &delta_theta, cfg.depth)?;
        let upto = cfg.mae_layers.min(cfg.depth);
        let mae = (0..upto)
            .flat_map(|l| c_emp[l].iter().zip(&c_theory[l]).map(|(a, b)| (a - b).abs()))
            .sum::<f64>()
            / (upto * delta_theta.len()) as f64;
        let last = &c_emp[cfg.depth - 1];
        let interior: Vec<f64> = (1..delta_theta.len())
            .filter(|k| 2 * k != r)
            .map(|k| last[k].abs())
            .collect();
        let final_retention = interior.iter().sum::<f64>() / interior.len().max(1) as f64;
        runs.push(ManifoldRun {
            sigma_w,
            q_star,
            chi,
            c_emp,
            c_theory,
            q_emp,
            mae,
            final_retention,
        });
    }
    Ok(ManifoldResult {
        config: cfg.clone(),
        sigma_w_opt: opt,
        delta_theta,
        runs,
    })
}

fn theory_curves(
    act: &QuantizedActivation,
    hp: HyperParams,
    q_star: f64,
    input_var: f64,
    delta_theta: &[f64],
    depth: usize,
) -> Result<Vec<Vec<f64>>> {
    let per_lag = parallel::map(delta_theta, |&t| -> Result<Vec<f64>> {
        let mut c = ((hp.sigma_w2 * input_var * t.cos() + hp.sigma_b2) / q_star).clamp(-1.0, 1.0);
        let mut out = Vec::with_capacity(depth);
        for _ in 0..depth {
            out.push(c);
            c = c_map(act, q_star, c, hp)?.clamp(-1.0, 1.0);
        }
        Ok(out)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok((0..depth).map(|l| per_lag.iter().map(|v| v[l]).collect()).collect())
}

/// Writes `sigma_w,layer,delta_theta,c_emp,c_theory` rows.
pub fn write_manifold_csv<W: Write>(res: &ManifoldResult, w: W) -> Result<()> {
    let mut out = csv_writer(w);
    let head = ["sigma_w", "layer", "delta_theta", "c_emp", "c_theory"];
    write_row(&mut out, &head.map(String::from))?;
    for run in &res.runs {
        for (l, (emp, th)) in run.c_emp.iter().zip(&run.c_theory).enumerate() {
            for (k, t) in res.delta_theta.iter().enumerate() {
                write_row(
                    &mut out,
                    &[
                        fmt17(run.sigma_w),
                        (l + 1).to_string(),
                        fmt17(*t),
                        fmt17(emp[k]),
                        fmt17(th[k]),
                    ],
                )?;
            }
        }
    }
    out.flush()?;
    Ok(())
}
