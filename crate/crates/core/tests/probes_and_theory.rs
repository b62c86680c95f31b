mod common;

use common::{reference_output, SplitMix};
use ntk_spectrum::experiments::{check_instance, derivatives_bounded};
use ntk_spectrum::linalg::singular_values;
use ntk_spectrum::network::{forward, forward_batch, ActivationSpec};
use ntk_spectrum::probes::{
    empirical_lipschitz, gershgorin_bounds, monte_carlo_moments, probe_centred_features,
    InputJacobian,
};
use ntk_spectrum::theory::gaussian_activation_moments;
use ntk_spectrum::{
    init_network, sample_dataset, ArchitectureSpec, DenseMatrix, NetworkState, SamplerKind,
};
use proptest::prelude::*;

fn net(
    widths: Vec<usize>,
    act: ActivationSpec,
    seed: u64,
    n: usize,
) -> (NetworkState, ntk_spectrum::Dataset) {
    let n0 = widths[0];
    let arch = ArchitectureSpec::he(widths, act).unwrap();
    (
        init_network(&arch, seed).unwrap(),
        sample_dataset(n0, n, SamplerKind::GaussianIid, seed).unwrap(),
    )
}

#[test]
fn moments_agree_with_closed_forms() {
    for (i, &s) in [0.5, 2.0].iter().enumerate() {
        for &sigma in &[0.25, 1.0] {
            let mc = monte_carlo_moments(s, sigma, 200_000, 40 + i as u64).unwrap();
            let exact = gaussian_activation_moments(s, sigma);
            assert!((mc.mean_cos_sq - exact.mean_cos_sq).abs() <= 4.0 * mc.se_cos_sq + 1e-15);
            assert!((mc.mean_sin_sq - exact.mean_sin_sq).abs() <= 4.0 * mc.se_sin_sq + 1e-15);
        }
    }
}

/// Layer-`k` features of the same reference network as the output oracle.
fn reference_features(state: &NetworkState, x: &[f64], k: usize) -> Vec<f64> {
    let act = *state.activation();
    let mut f = x.to_vec();
    for l in 1..=k {
        let w = state.weight(l);
        let g: Vec<f64> = (0..w.cols())
            .map(|j| (0..w.rows()).map(|i| w[(i, j)] * f[i]).sum())
            .collect();
        f = if l < state.depth() {
            g.into_iter().map(|t| act.value(t)).collect()
        } else {
            g
        };
    }
    f
}

#[test]
fn input_jacobian_matches_finite_differences() {
    let (state, data) = net(vec![4, 7, 6, 1], ActivationSpec::cosine(2.0), 12, 2);
    let h = 1e-6;
    for layer in 1..=3 {
        let x = data.sample(0).to_vec();
        let trace = forward(&state, &x).unwrap();
        let dense = InputJacobian::new(&state, &trace, layer)
            .unwrap()
            .to_dense()
            .unwrap();
        for c in 0..4 {
            let mut xp = x.clone();
            xp[c] += h;
            let mut xm = x.clone();
            xm[c] -= h;
            let fp = reference_features(&state, &xp, layer);
            let fm = reference_features(&state, &xm, layer);
            for r in 0..dense.rows() {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                assert!((dense[(r, c)] - fd).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
    }
    let w: Vec<Vec<Vec<f64>>> = state
        .weights()
        .iter()
        .map(|m| (0..m.rows()).map(|i| m.row(i).to_vec()).collect())
        .collect();
    let out = reference_output(&w, data.sample(1), |t| state.activation().value(t));
    assert!((reference_features(&state, data.sample(1), 3)[0] - out).abs() < 1e-12);
}

#[test]
fn lipschitz_is_max_of_dense_operator_norms() {
    let (state, data) = net(vec![5, 16, 12, 20, 1], ActivationSpec::cosine(4.0), 3, 6);
    let lip = empirical_lipschitz(&state, &data, 3).unwrap();
    let mut best = 0.0_f64;
    for i in 0..data.len() {
        let trace = forward(&state, data.sample(i)).unwrap();
        let dense = InputJacobian::new(&state, &trace, 3)
            .unwrap()
            .to_dense()
            .unwrap();
        best = best.max(singular_values(&dense).unwrap()[0]);
    }
    assert!((lip - best).abs() <= 1e-6 * best);
}

#[test]
fn small_instances_satisfy_every_inequality() {
    for seed in 0..5 {
        for act in [ActivationSpec::cosine(5.0), ActivationSpec::relu()] {
            let (state, data) = net(vec![6, 24, 12, 1], act, seed, 8);
            let checks = check_instance(&state, &data, 1000).unwrap();
            assert!(checks.all_hold(), "{checks:?}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gershgorin_brackets_spectrum(seed in any::<u64>(), n in 1usize..8) {
        let m = DenseMatrix::from_rows(&SplitMix(seed).symmetric_matrix(n)).unwrap();
        let (lo, hi) = gershgorin_bounds(&m).unwrap();
        let spectrum = ntk_spectrum::linalg::sym_eigen(&m).unwrap();
        prop_assert!(lo <= spectrum.min() + 1e-12 && spectrum.max() <= hi + 1e-12);
    }

    #[test]
    fn derivatives_never_exceed_frequency(seed in 0u64..10_000, s in 0.1f64..40.0) {
        let (state, data) = net(vec![3, 16, 16, 1], ActivationSpec::cosine(s), seed, 4);
        let traces = forward_batch(&state, &data.samples).unwrap();
        prop_assert!(derivatives_bounded(&state, &traces));
    }

    #[test]
    fn centred_feature_inequality(seed in 0u64..10_000, n in 1usize..10) {
        let (state, data) = net(vec![4, 12, 1], ActivationSpec::cosine(1.5), seed, n);
        let probe = probe_centred_features(&state, &data, 1, 1000).unwrap();
        prop_assert_ne!(probe.inequality_holds(), Some(false));
    }
}
