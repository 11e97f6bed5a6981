mod common;

use common::{max_abs_diff, one_hot, random_topology, random_vec, Dense};
use edgeproc::arith::Real;
use edgeproc::engine::{build_maps, NetOptions, Network};
use edgeproc::rng::SplitMix64;
use edgeproc::topology::{HardwareConfig, TopologySpec};

fn random_net(spec: &TopologySpec, seed: u64) -> Network<Real> {
    let maps = build_maps(spec, None, seed).unwrap();
    let mut net = Network::new(
        Real,
        spec.clone(),
        maps,
        NetOptions {
            init_seed: seed,
            learning_rate: 0.7,
            ..NetOptions::default()
        },
    )
    .unwrap();
    // Non-zero biases so the bias paths are exercised too.
    let mut rng = SplitMix64::new(seed ^ 0xb1a5);
    for j in net.junctions_mut() {
        for b in j.biases_mut() {
            *b = rng.symmetric(0.5);
        }
    }
    net
}

#[test]
fn sparse_passes_match_dense_masked_reference() {
    let mut rng = SplitMix64::new(2024);
    for case in 0..100 {
        let spec = random_topology(&mut rng);
        let mut net = random_net(&spec, case);
        let mut dense = Dense::from_network(&net);
        let sizes = spec.layer_sizes();
        let x = random_vec(&mut rng, sizes[0]);
        let y = one_hot(*sizes.last().unwrap(), case as usize);

        let (acts, derivs) = net.forward_all(&x).unwrap();
        let ref_acts = dense.forward(&x);
        for (a, r) in acts.iter().zip(&ref_acts) {
            assert!(max_abs_diff(a, r) <= 1e-12, "case {case} {spec}");
        }
        let deltas = net.backward(&acts, &derivs, &y).unwrap();
        let ref_deltas = dense.backward(&ref_acts, &y);
        for (d, r) in deltas.iter().zip(&ref_deltas) {
            assert!(max_abs_diff(d, r) <= 1e-12, "case {case} {spec}");
        }

        net.run_sequential(&x, &y).unwrap();
        dense.update(&ref_acts, &ref_deltas, 0.7, true);
        let updated = Dense::from_network(&net);
        for j in 0..spec.junctions() {
            for (row, ref_row) in updated.w[j].iter().zip(&dense.w[j]) {
                assert!(max_abs_diff(row, ref_row) <= 1e-12, "case {case} {spec}");
            }
            assert!(max_abs_diff(&updated.b[j], &dense.b[j]) <= 1e-12);
        }
    }
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = SplitMix64::new(77);
    for case in 0..20 {
        let spec = random_topology(&mut rng);
        let mut net = random_net(&spec, 500 + case);
        let sizes = spec.layer_sizes();
        let x = random_vec(&mut rng, sizes[0]);
        let y = one_hot(*sizes.last().unwrap(), case as usize + 1);
        let (acts, derivs) = net.forward_all(&x).unwrap();
        let deltas = net.backward(&acts, &derivs, &y).unwrap();
        let base = Dense::from_network(&net);

        for j in 0..spec.junctions() {
            let junction = &net.junctions()[j];
            let dims = junction.map().dims();
            for e in 0..dims.edges {
                let o = e / dims.fan_in;
                let s = junction.map().sources()[e] as usize;
                let analytic = deltas[j][o] * acts[j][s];
                let numeric = common::numeric_weight_gradient(&base, j, o, s, &x, &y);
                let err = relative_error(analytic, numeric);
                assert!(err <= 1e-6, "case {case} junction {j} edge {e}: {analytic} vs {numeric}");
            }
            for o in 0..dims.n_out {
                let numeric = common::numeric_bias_gradient(&base, j, o, &x, &y);
                assert!(relative_error(deltas[j][o], numeric) <= 1e-6);
            }
        }
    }
}

#[test]
fn banked_and_unbanked_execution_agree() {
    let spec = TopologySpec::new(&[64, 32, 16], &[4, 4]).unwrap();
    let hw = HardwareConfig::new(vec![16, 16], 1.0);
    let maps = build_maps(&spec, Some(&hw), 5).unwrap();
    let mk = |banked| {
        Network::new(
            Real,
            spec.clone(),
            maps.clone(),
            NetOptions {
                banked,
                init_seed: 3,
                learning_rate: 0.5,
                ..NetOptions::default()
            },
        )
        .unwrap()
    };
    let (mut a, mut b) = (mk(true), mk(false));
    let mut rng = SplitMix64::new(9);
    for k in 0..30 {
        let x = random_vec(&mut rng, 64);
        let y = one_hot(16, k);
        assert_eq!(a.run_sequential(&x, &y).unwrap(), b.run_sequential(&x, &y).unwrap());
    }
    for (ja, jb) in a.junctions().iter().zip(b.junctions()) {
        assert_eq!(ja.weights(), jb.weights());
    }
    assert!(a.permuted_accesses() > 0);
}

#[test]
fn functional_maps_are_rejected_by_banked_networks() {
    let spec = TopologySpec::new(&[64, 32, 16], &[4, 4]).unwrap();
    let maps = build_maps(&spec, None, 5).unwrap();
    let opts = NetOptions {
        banked: true,
        ..NetOptions::default()
    };
    assert!(Network::new(Real, spec, maps, opts).is_err());
}

#[test]
fn zero_learning_rate_leaves_weights_alone() {
    let spec = TopologySpec::new(&[12, 6, 4], &[2, 2]).unwrap();
    let mut net = random_net(&spec, 1);
    net.set_learning_rate(0.0);
    let before = Dense::from_network(&net);
    net.run_sequential(&vec![0.3; 12], &one_hot(4, 2)).unwrap();
    let after = Dense::from_network(&net);
    assert_eq!(before.w, after.w);
    assert_eq!(before.b, after.b);
}

#[test]
fn loss_difference_matches_direct_subtraction() {
    let mut rng = SplitMix64::new(31);
    for case in 0..50 {
        let spec = random_topology(&mut rng);
        let base = Dense::from_network(&random_net(&spec, 900 + case));
        let sizes = spec.layer_sizes();
        let x = random_vec(&mut rng, sizes[0]);
        let y = one_hot(*sizes.last().unwrap(), case as usize);
        let (mut p, mut m) = (base.clone(), base.clone());
        let j = rng.index(spec.junctions());
        let o = rng.index(p.w[j].len());
        let i = rng.index(p.w[j][o].len());
        p.w[j][o][i] += 0.3;
        m.b[j][o] -= 0.2;
        let direct = p.loss(&x, &y) - m.loss(&x, &y);
        assert!((common::loss_difference(&p, &m, &x, &y) - direct).abs() < 1e-13, "case {case}");
    }
}
