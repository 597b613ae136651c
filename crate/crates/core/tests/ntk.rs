use ndarray::{array, Array2};
use proptest::prelude::*;
use qprop::activations::{make_constant_spaced, QuantizedActivation};
use qprop::meanfield::{cov_step, q_next, CovState, HyperParams};
use qprop::ntk::*;
use qprop::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;

fn labels(n: usize) -> Vec<String> {
    (0..n).map(|i| (i % 2).to_string()).collect()
}

fn gram_of(x: &Array2<f64>) -> LabeledGram {
    LabeledGram::new(x.dot(&x.t()) / x.ncols() as f64, labels(x.nrows())).unwrap()
}

fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / 2f64.sqrt())
}

// MC estimate of E[f(u1, u2)] for a centred bivariate normal.
fn mc_pair(q1: f64, q2: f64, c: f64, n: usize, seed: u64, f: impl Fn(f64, f64) -> f64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let u1 = q1.sqrt() * z1;
        let u2 = q2.sqrt() * (c * z1 + (1.0 - c * c).sqrt() * z2);
        let v = f(u1, u2);
        s += v;
        s2 += v * v;
    }
    let m = s / n as f64;
    (m, ((s2 / n as f64 - m * m) / n as f64).sqrt())
}

#[test]
fn sign_second_layer_matches_arcsine_law_with_unequal_norms() {
    let hp = HyperParams::new(1.7, 0.2).unwrap();
    let g = LabeledGram::new(array![[0.5, 0.3, -0.1], [0.3, 2.0, 0.4], [-0.1, 0.4, 1.0]], labels(3)).unwrap();
    let s = sigma_recursion(&g, &QuantizedActivation::sign(), hp, 2).unwrap();
    for i in 0..3 {
        assert!((s[1][[i, i]] - (1.7 + 0.2)).abs() < 1e-12);
        for j in 0..3 {
            if i != j {
                let s1 = &s[0];
                let c = s1[[i, j]] / (s1[[i, i]] * s1[[j, j]]).sqrt();
                let want = 1.7 * 2.0 / PI * c.asin() + 0.2;
                assert!((s[1][[i, j]] - want).abs() < 1e-9, "{i}{j}: {} vs {want}", s[1][[i, j]]);
            }
        }
    }
}

#[test]
fn equal_norm_inputs_follow_the_scalar_maps() {
    let act = make_constant_spaced(6).unwrap();
    let hp = HyperParams::new(1.3, 0.05).unwrap();
    let g = LabeledGram::new(array![[1.0, 0.6], [0.6, 1.0]], labels(2)).unwrap();
    let s = sigma_recursion(&g, &act, hp, 6).unwrap();
    let mut st = CovState {
        q: s[0][[0, 0]],
        c: s[0][[0, 1]] / s[0][[0, 0]],
    };
    let mut q = st.q;
    for (l, sl) in s.iter().enumerate().skip(1) {
        st = cov_step(&act, st, hp).unwrap();
        q = q_next(&act, q, hp).unwrap();
        assert!((sl[[0, 0]] - q).abs() < 1e-10 * q);
        assert!((sl[[1, 1]] - q).abs() < 1e-10 * q);
        assert!((sl[[0, 1]] / sl[[0, 0]] - st.c).abs() < 1e-9, "layer {l}");
    }
}

#[test]
fn depth_zero_is_the_affine_gram() {
    let g = LabeledGram::new(array![[1.0, 0.2], [0.2, 0.7]], labels(2)).unwrap();
    let hp = HyperParams::new(2.0, 0.1).unwrap();
    let k = ntk_asymptotic(
        &g,
        &QuantizedActivation::sign(),
        DerivativeKind::Ste { rho: 1.0 },
        hp,
        0,
    )
    .unwrap();
    assert_eq!(k.depth, 0);
    assert_eq!(k.entries, g.gram.mapv(|v| 2.0 * v + 0.1));
}

#[test]
fn duplicated_inputs_give_off_diagonal_equal_to_diagonal() {
    let act = make_constant_spaced(4).unwrap();
    let hp = HyperParams::new(1.2, 0.01).unwrap();
    let x = array![[1.0, 0.5, -0.3], [1.0, 0.5, -0.3], [0.2, -1.0, 0.4]];
    let g = gram_of(&x);
    for kind in [DerivativeKind::Ste { rho: 1.1 }, DerivativeKind::Smooth { width: 0.3 }] {
        let k = ntk_asymptotic(&g, &act, kind, hp, 5).unwrap();
        let e = &k.entries;
        assert!((e[[0, 1]] - e[[0, 0]]).abs() < 1e-7 * e[[0, 0]], "{kind:?}");
        assert!((e[[1, 1]] - e[[0, 0]]).abs() < 1e-12 * e[[0, 0]]);
        assert!(e[[0, 2]] < e[[0, 0]]);
    }
}

#[test]
fn kernel_equals_sum_of_products() {
    let act = make_constant_spaced(5).unwrap();
    let hp = HyperParams::new(1.1, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Array2::from_shape_fn((4, 6), |_| rng.sample::<f64, _>(StandardNormal));
    let g = gram_of(&x);
    let kind = DerivativeKind::Ste { rho: 0.9 };
    let depth = 6;
    let sig = sigma_recursion(&g, &act, hp, depth + 1).unwrap();
    let dot = sigma_dot_recursion(&sig, &act, kind, hp).unwrap();
    assert_eq!(dot.len(), depth);
    // Θ = Σ_l Σ^(l) ⊙ Π_{j>l} Σ'^(j), with dot[j-2] holding Σ'^(j).
    let mut want = Array2::<f64>::zeros((4, 4));
    for l in 1..=depth + 1 {
        let mut term = sig[l - 1].clone();
        for j in l + 1..=depth + 1 {
            term = &term * &dot[j - 2];
        }
        want = want + term;
    }
    let ks = ntk_by_depth(&g, &act, kind, hp, &[2, depth]).unwrap();
    assert_eq!(ks[1].depth, depth);
    let err = (&ks[1].entries - &want).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(err < 1e-10 * want[[0, 0]], "{err}");
    let single = ntk_asymptotic(&g, &act, kind, hp, 2).unwrap();
    assert_eq!(single.entries, ks[0].entries);
}

#[test]
fn ste_derivative_covariance_matches_monte_carlo() {
    let act = QuantizedActivation::sign();
    let hp = HyperParams::new(1.5, 0.0).unwrap();
    let g = LabeledGram::new(array![[0.8, 0.5], [0.5, 1.4]], labels(2)).unwrap();
    let sig = sigma_recursion(&g, &act, hp, 2).unwrap();
    let rho = 1.3;
    let dot = sigma_dot_recursion(&sig, &act, DerivativeKind::Ste { rho }, hp).unwrap();
    let s = &sig[0];
    let c = s[[0, 1]] / (s[[0, 0]] * s[[1, 1]]).sqrt();
    let box1 = |a: f64, b: f64| if a.abs() <= 1.0 && b.abs() <= 1.0 { 1.0 } else { 0.0 };
    let (m, se) = mc_pair(s[[0, 0]], s[[1, 1]], c, 2_000_000, 7, box1);
    let got = dot[0][[0, 1]] / (1.5 * rho * rho);
    assert!((got - m).abs() < 4.0 * se, "{got} vs {m} ± {se}");
    let diag = 2.0 * phi(1.0 / s[[0, 0]].sqrt()) - 1.0;
    assert!((dot[0][[0, 0]] / (1.5 * rho * rho) - diag).abs() < 1e-12);
}

#[test]
fn smooth_derivative_covariance_matches_monte_carlo() {
    let act = make_constant_spaced(4).unwrap();
    let hp = HyperParams::new(1.0, 0.0).unwrap();
    let g = LabeledGram::new(array![[1.0, -0.4], [-0.4, 0.6]], labels(2)).unwrap();
    let sig = sigma_recursion(&g, &act, hp, 2).unwrap();
    let w = 0.25;
    let dot = sigma_dot_recursion(&sig, &act, DerivativeKind::Smooth { width: w }, hp).unwrap();
    let d = |u: f64| -> f64 {
        act.offsets()
            .iter()
            .zip(act.heights())
            .map(|(gk, hk)| hk * (-(u - gk).powi(2) / (2.0 * w * w)).exp() / (w * (2.0 * PI).sqrt()))
            .sum()
    };
    let s = &sig[0];
    for (i, j) in [(0, 1), (0, 0)] {
        let c = s[[i, j]] / (s[[i, i]] * s[[j, j]]).sqrt();
        let (m, se) = mc_pair(s[[i, i]], s[[j, j]], c, 1_000_000, 11, |a, b| d(a) * d(b));
        assert!(
            (dot[0][[i, j]] - m).abs() < 4.0 * se,
            "({i},{j}) {} vs {m} ± {se}",
            dot[0][[i, j]]
        );
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    let bad = LabeledGram::new(array![[1.0, 0.3], [0.2, 1.0]], labels(2));
    assert!(matches!(bad, Err(Error::Domain(_))));
    assert!(LabeledGram::new(array![[1.0, 0.3], [0.3, 1.0]], labels(3)).is_err());
    assert!(LabeledGram::new(array![[0.0, 0.0], [0.0, 1.0]], labels(2)).is_err());
    let g = LabeledGram::new(array![[1.0]], labels(1)).unwrap();
    let hp = HyperParams::new(1.0, 0.0).unwrap();
    let act = QuantizedActivation::sign();
    assert!(sigma_recursion(&g, &act, hp, 0).is_err());
    assert!(ntk_asymptotic(&g, &act, DerivativeKind::Ste { rho: 0.0 }, hp, 1).is_err());
    assert!(ntk_asymptotic(&g, &act, DerivativeKind::Smooth { width: -1.0 }, hp, 1).is_err());
}

#[test]
fn snr_on_uniform_off_diagonal() {
    let m = 3;
    let (diag, beta) = (2.0, 0.5);
    let n = 2 * m;
    let entries = Array2::from_shape_fn((n, n), |(i, j)| if i == j { diag } else { beta });
    let k = KernelMatrix { entries, depth: 1 };
    let r = snr_metrics(&k, &labels(n)).unwrap();
    for i in 0..n {
        assert!((r.signal[i] - (m as f64 - 1.0) * beta).abs() < 1e-15);
        assert!((r.noise[i] - (diag + m as f64 * beta)).abs() < 1e-15);
    }
    assert!((r.snr - 1.0 / 3.5).abs() < 1e-15);
    assert!(r.excluded.is_empty());
}

#[test]
fn snr_flags_points_without_noise() {
    // Point 2 has no kernel mass outside its own class.
    let entries = array![[0.0, 0.0, 0.0], [0.0, 1.0, 0.5], [0.0, 0.5, 1.0]];
    let k = KernelMatrix { entries, depth: 0 };
    let lab = vec!["a".to_string(), "b".to_string(), "a".to_string()];
    let r = snr_metrics(&k, &lab).unwrap();
    assert_eq!(r.excluded, vec![0]);
    assert!(r.snr.is_finite());
    assert!(snr_metrics(&k, &lab[..2]).is_err());
}

#[test]
fn deep_limit_summary_excludes_duplicates() {
    let mk = |depth, beta: f64| {
        let mut e = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 3.0 } else { beta + 0.01 * (i + j) as f64 });
        e[[0, 1]] = 3.0;
        e[[1, 0]] = 3.0;
        KernelMatrix {
            entries: e * (depth as f64 + 1.0),
            depth,
        }
    };
    let d = deep_limit_structure(&[mk(1, 1.0), mk(4, 2.0)]).unwrap();
    assert_eq!(d.depths, vec![1, 4]);
    assert!((d.alpha[0] - 3.0).abs() < 1e-12 && (d.alpha[1] - 3.0).abs() < 1e-12);
    // Remaining pairs (0,2) (0,3) (1,2) (1,3) (2,3) carry offsets 0.02..0.05.
    let want = 1.0 + 0.01 * (2 + 3 + 3 + 4 + 5) as f64 / 5.0;
    assert!((d.beta[0] - want).abs() < 1e-12, "{}", d.beta[0]);
    assert!(d.cv[1] < d.cv[0]);
    assert!(deep_limit_structure(&[mk(1, 1.0)]).is_err());
}

#[test]
fn csv_ingestion_round_trip_and_errors() {
    let ok = "a,b,label\n1.0,2.0,x\n-0.5,3e-1,y\n";
    let d = read_dataset_csv(ok.as_bytes(), true).unwrap();
    assert_eq!(d.features, array![[1.0, 2.0], [-0.5, 0.3]]);
    assert_eq!(d.labels, vec!["x", "y"]);
    let bad = "1.0,2.0,x\n1.0,oops,y\n";
    match read_dataset_csv(bad.as_bytes(), false) {
        Err(Error::Parse(m)) => assert!(m.contains("row 2") && m.contains("oops"), "{m}"),
        other => panic!("{other:?}"),
    }
    let ragged = "1.0,2.0,x\n1.0,y\n";
    match read_dataset_csv(ragged.as_bytes(), false) {
        Err(Error::Parse(m)) => assert!(m.contains("row 2"), "{m}"),
        other => panic!("{other:?}"),
    }
    assert!(read_dataset_csv("".as_bytes(), false).is_err());
}

#[test]
fn kernel_csv_is_square_and_full_precision() {
    let k = KernelMatrix {
        entries: array![[1.0 / 3.0, 0.1], [0.1, 2.0]],
        depth: 2,
    };
    let mut buf = Vec::new();
    k.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], 1.0 / 3.0);
    assert_eq!(rows[1][1], 2.0);
}

#[test]
fn synthetic_data_is_deterministic_and_separated() {
    let a = synthetic_two_class(40, 50, 2.0, 9).unwrap();
    let b = synthetic_two_class(40, 50, 2.0, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.labels.iter().filter(|l| *l == "0").count(), 20);
    let g = LabeledGram::from_dataset(&a).unwrap();
    let (mut same, mut diff, mut ns, mut nd) = (0.0, 0.0, 0, 0);
    for i in 0..40 {
        for j in 0..i {
            if a.labels[i] == a.labels[j] {
                same += g.gram[[i, j]];
                ns += 1;
            } else {
                diff += g.gram[[i, j]];
                nd += 1;
            }
        }
    }
    assert!(same / ns as f64 > 0.5 && diff / (nd as f64) < -0.5);
    assert!(synthetic_two_class(1, 5, 1.0, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kernel_is_symmetric_and_cauchy_schwarz(
        seed in 0u64..1000,
        sw in 0.6f64..2.0,
        sb in 0.0f64..0.3,
        n in 2usize..7,
        rho in 0.5f64..1.5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((4, 5), |_| rng.sample::<f64, _>(StandardNormal));
        let g = gram_of(&x);
        let act = make_constant_spaced(n).unwrap();
        let hp = HyperParams::from_std(sw, sb).unwrap();
        let ks = ntk_by_depth(&g, &act, DerivativeKind::Ste { rho }, hp, &[3, 4]).unwrap();
        let e = &ks[1].entries;
        for i in 0..4 {
            prop_assert!(e[[i, i]] > 0.0);
            for j in 0..4 {
                prop_assert_eq!(e[[i, j]], e[[j, i]]);
                prop_assert!(e[[i, j]].abs() <= (e[[i, i]] * e[[j, j]]).sqrt() * (1.0 + 1e-9));
            }
        }
    }
}

fn deep_cv(sw: f64, depths: &[usize]) -> Vec<f64> {
    let act = make_constant_spaced(8).unwrap();
    let hp = HyperParams::from_std(sw, 0.01).unwrap();
    let q = qprop::meanfield::solve_q_star(&act, hp, Default::default())
        .unwrap()
        .q_star;
    let rho = qprop::calibrate::ste_rho(sw, q).unwrap();
    let g = LabeledGram::from_dataset(&synthetic_two_class(12, 30, 1.0, 4).unwrap()).unwrap();
    let ks = ntk_by_depth(&g, &act, DerivativeKind::Ste { rho }, hp, depths).unwrap();
    deep_limit_structure(&ks).unwrap().cv
}

#[test]
fn detuned_init_forgets_structure_with_depth() {
    // σ_w = 2 is twice the critical scale for eight states.
    let cv = deep_cv(2.0, &[10, 50, 200]);
    assert!(cv[0] > cv[1] && cv[1] > cv[2], "{cv:?}");
    assert!(cv[2] < 1e-6);
}

#[test]
fn critical_init_retains_more_structure() {
    let critical = deep_cv(1.019, &[100, 200]);
    let detuned = deep_cv(2.0, &[100, 200]);
    assert!(critical[1] > 5.0 * detuned[1], "{critical:?} {detuned:?}");
}
