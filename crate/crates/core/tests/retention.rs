use proptest::prelude::*;
use retline_core::retention::{
    build_decay, build_decay_bidirectional, build_decay_gated, gate, retention_parallel, retention_recurrent, GammaSchedule,
    GammaStrategy, PhaseConfig, RetentionProj,
};
use retline_core::tensor::Tensor;

fn mat(rows: usize, cols: usize, vals: &[f64]) -> Tensor {
    Tensor::new(&[rows, cols], vals[..rows * cols].to_vec()).unwrap()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Direct evaluation of the schedule formulas.
fn schedule_oracle(strategy: GammaStrategy, l: usize, h: usize, layers: usize, heads: usize, sub: f64) -> f64 {
    let lin = |h: usize| {
        let (a, b) = ((1.0f64 / 32.0).ln(), (1.0f64 / 512.0).ln());
        if heads == 1 {
            a
        } else {
            a + (b - a) * h as f64 / (heads - 1) as f64
        }
    };
    match strategy {
        GammaStrategy::Original => 1.0 - lin(h).exp(),
        GammaStrategy::SmallGammaOnly => 1.0 - lin(h).exp() - sub,
        GammaStrategy::HeadWise => {
            let f = if heads == 1 { 0.0 } else { h as f64 / (heads - 1) as f64 };
            1.0 - sub - 1.0 / 32.0 + f * sub
        }
        GammaStrategy::LayerWise => {
            let f = if layers == 1 { 1.0 } else { l as f64 / (layers - 1) as f64 };
            1.0 - sub * (1.0 - f) - lin(h).exp()
        }
        GammaStrategy::Gated => unreachable!(),
    }
}

#[test]
fn schedules_match_closed_forms() {
    for strategy in [GammaStrategy::Original, GammaStrategy::SmallGammaOnly, GammaStrategy::HeadWise, GammaStrategy::LayerWise] {
        for layers in 1..=12 {
            for heads in 1..=12 {
                let sub = if strategy == GammaStrategy::SmallGammaOnly { 0.5 } else { 0.86 };
                let s = GammaSchedule {
                    gamma_subtractor: sub,
                    ..GammaSchedule::new(strategy, layers, heads)
                };
                let t = s.gamma_table().unwrap();
                for (l, row) in t.iter().enumerate() {
                    for (h, &g) in row.iter().enumerate() {
                        let o = schedule_oracle(strategy, l, h, layers, heads, sub);
                        assert!((g - o).abs() <= 1e-12, "{strategy:?} L={layers} H={heads} [{l}][{h}]: {g} vs {o}");
                        assert!(g > 0.0 && g < 1.0);
                    }
                }
            }
        }
    }
}

#[test]
fn layerwise_last_layer_is_original_and_min_value() {
    let lw = GammaSchedule::new(GammaStrategy::LayerWise, 3, 2).gamma_table().unwrap();
    let orig = GammaSchedule::new(GammaStrategy::Original, 3, 2).gamma_table().unwrap();
    assert_eq!(lw[2], orig[2]);
    assert!((lw[0][0] - 0.10875).abs() < 1e-15);
    let min = lw.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
    assert!((min - 0.10875).abs() < 1e-15);
    for h in 0..2 {
        assert!(lw[0][h] <= lw[1][h] && lw[1][h] <= lw[2][h]);
    }
    let hw = GammaSchedule::new(GammaStrategy::HeadWise, 1, 2).gamma_table().unwrap();
    assert!((hw[0][0] - 0.10875).abs() < 1e-15 && (hw[0][1] - 0.96875).abs() < 1e-15);
    assert!(GammaSchedule::new(GammaStrategy::Gated, 2, 2).gamma_table().is_err());
    let bad = GammaSchedule {
        gamma_subtractor: 0.99,
        ..GammaSchedule::new(GammaStrategy::SmallGammaOnly, 1, 4)
    };
    assert!(bad.gamma_table().is_err());
}

#[test]
fn constant_gate_equals_fixed_decay_bitwise() {
    let g = gate(0.7, 16.0);
    for n in 1..20 {
        assert_eq!(build_decay_gated(&vec![g; n]).unwrap().entries(), build_decay(n, g).unwrap().entries());
    }
}

#[test]
fn bidirectional_is_symmetric() {
    let d = build_decay_bidirectional(7, 0.6).unwrap();
    for i in 0..7 {
        for j in 0..7 {
            assert_eq!(d.at(i, j), d.at(j, i));
        }
    }
}

fn config() -> impl Strategy<Value = (usize, usize, f64, bool, Vec<f64>)> {
    (1usize..=32, 1usize..=16, prop::sample::select(vec![0.1, 0.5, 0.96875]), any::<bool>())
        .prop_flat_map(|(n, d, g, ph)| (Just(n), Just(d), Just(g), Just(ph), prop::collection::vec(-1.0f64..1.0, n * d + 3 * d * d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parallel_equals_recurrent((n, d, g, ph, vals) in config()) {
        let x = mat(n, d, &vals);
        let w = &vals[n * d..];
        let proj = RetentionProj {
            w_q: mat(d, d, w),
            w_k: mat(d, d, &w[d * d..]),
            w_v: mat(d, d, &w[2 * d * d..]),
        };
        let phases = PhaseConfig::new(d, ph);
        let p = retention_parallel(&x, &proj, &build_decay(n, g).unwrap(), &phases).unwrap();
        let r = retention_recurrent(&x, &proj, &vec![g; n], &phases).unwrap();
        prop_assert!(max_diff(&p, &r) <= 1e-10);
    }

    #[test]
    fn gated_parallel_equals_recurrent(n in 1usize..=24, d in 1usize..=8, z in prop::collection::vec(-4.0f64..4.0, 24), vals in prop::collection::vec(-1.0f64..1.0, 24 * 8)) {
        let x = mat(n, d, &vals);
        let gammas: Vec<f64> = z[..n].iter().map(|&zi| gate(zi, 16.0)).collect();
        let proj = RetentionProj::identity(d);
        let phases = PhaseConfig::disabled(d);
        let p = retention_parallel(&x, &proj, &build_decay_gated(&gammas).unwrap(), &phases).unwrap();
        let r = retention_recurrent(&x, &proj, &gammas, &phases).unwrap();
        prop_assert!(max_diff(&p, &r) <= 1e-10);
    }

    #[test]
    fn decay_is_lower_triangular_with_unit_diagonal(n in 1usize..=20, g in 0.01f64..0.99) {
        let d = build_decay(n, g).unwrap();
        for i in 0..n {
            prop_assert_eq!(d.at(i, i), 1.0);
            for j in (i + 1)..n {
                prop_assert_eq!(d.at(i, j), 0.0);
            }
            for j in 0..i {
                prop_assert!((d.at(i, j) - g.powi((i - j) as i32)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gate_in_unit_interval(z in -50.0f64..50.0, tau in 1.0f64..64.0) {
        let g = gate(z, tau);
        prop_assert!((0.0..=1.0).contains(&g));
    }
}
