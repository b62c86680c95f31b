mod common;

use common::reference_output;
use ntk_spectrum::network::{forward_batch, ActivationSpec, Dataset};
use ntk_spectrum::ntk::{build_g_matrices, feature_matrix, finite_difference_jacobian};
use ntk_spectrum::{
    empirical_ntk, init_network, jacobian, jacobian_gram, ntk_diagnostics, sample_dataset,
    ArchitectureSpec, DenseMatrix, NetworkState, SamplerKind,
};
use proptest::prelude::*;

fn nested_weights(state: &NetworkState) -> Vec<Vec<Vec<f64>>> {
    state
        .weights()
        .iter()
        .map(|w| (0..w.rows()).map(|i| w.row(i).to_vec()).collect())
        .collect()
}

fn scalar_activation(spec: ActivationSpec) -> impl Fn(f64) -> f64 {
    move |t| spec.value(t)
}

/// Jacobian by central differences of an independent forward pass.
fn reference_jacobian(state: &NetworkState, data: &Dataset, h: f64) -> DenseMatrix {
    let w = nested_weights(state);
    let act = scalar_activation(*state.activation());
    let mut cols = Vec::new();
    for (k, layer) in w.iter().enumerate() {
        for i in 0..layer.len() {
            for j in 0..layer[0].len() {
                let mut plus = w.clone();
                plus[k][i][j] += h;
                let mut minus = w.clone();
                minus[k][i][j] -= h;
                let col: Vec<f64> = (0..data.len())
                    .map(|n| {
                        (reference_output(&plus, data.sample(n), &act)
                            - reference_output(&minus, data.sample(n), &act))
                            / (2.0 * h)
                    })
                    .collect();
                cols.push(col);
            }
        }
    }
    DenseMatrix::from_fn(data.len(), cols.len(), |i, j| cols[j][i])
}

fn relative(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm()
}

fn net(widths: Vec<usize>, act: ActivationSpec, seed: u64, n: usize) -> (NetworkState, Dataset) {
    let n0 = widths[0];
    let arch = ArchitectureSpec::he(widths, act).unwrap();
    (
        init_network(&arch, seed).unwrap(),
        sample_dataset(n0, n, SamplerKind::GaussianIid, seed + 1000).unwrap(),
    )
}

#[test]
fn forward_matches_reference() {
    for act in [
        ActivationSpec::cosine(3.0),
        ActivationSpec::sine(2.0),
        ActivationSpec::relu(),
    ] {
        let (state, data) = net(vec![4, 7, 5, 1], act, 9, 6);
        let w = nested_weights(&state);
        let traces = forward_batch(&state, &data.samples).unwrap();
        for (i, t) in traces.iter().enumerate() {
            let expected = reference_output(&w, data.sample(i), scalar_activation(act));
            assert!((t.output() - expected).abs() <= 1e-12 * expected.abs().max(1.0));
        }
    }
}

#[test]
fn small_cosine_kernel_matches_jacobian_gram() {
    let (state, data) = net(vec![2, 3, 3, 1], ActivationSpec::cosine(3.0), 5, 4);
    let k = empirical_ntk(&state, &data).unwrap();
    assert!(relative(&k.kernel, &jacobian_gram(&state, &data).unwrap()) <= 1e-10);
}

#[test]
fn jacobian_matches_independent_finite_differences() {
    for act in [
        ActivationSpec::cosine(2.0),
        ActivationSpec::sine(1.0),
        ActivationSpec::relu(),
    ] {
        for seed in 0..4 {
            let (state, data) = net(vec![3, 6, 5, 1], act, seed, 5);
            let j = jacobian(&state, &data).unwrap();
            let reference = reference_jacobian(&state, &data, 1e-6);
            assert!(relative(&j, &reference) <= 1e-6, "{act:?} seed {seed}");
            let own = finite_difference_jacobian(&state, &data, 1e-6).unwrap();
            assert!(relative(&own, &reference) <= 1e-6);
        }
    }
}

#[test]
fn sensitivity_rows_match_jacobian_blocks() {
    let (state, data) = net(vec![3, 6, 5, 4, 1], ActivationSpec::cosine(2.0), 3, 4);
    let traces = forward_batch(&state, &data.samples).unwrap();
    let g = build_g_matrices(&state, &traces).unwrap();
    let j = jacobian(&state, &data).unwrap();
    let widths = state.widths().to_vec();
    let mut offset = 0;
    for k in 1..=state.depth() {
        for (i, trace) in traces.iter().enumerate() {
            let f = trace.feature(k - 1);
            let a = (0..f.len())
                .max_by(|&x, &y| f[x].abs().partial_cmp(&f[y].abs()).unwrap())
                .unwrap();
            for b in 0..widths[k] {
                let from_jacobian = j[(i, offset + a * widths[k] + b)] / f[a];
                assert!(
                    (g.g(k)[(i, b)] - from_jacobian).abs() <= 1e-10 * (1.0 + from_jacobian.abs())
                );
            }
        }
        offset += widths[k - 1] * widths[k];
    }
    assert!(g.g(state.depth()).as_slice().iter().all(|&v| v == 1.0));
}

#[test]
fn layer_terms_sum_to_kernel_and_bounds_hold() {
    for seed in 0..10 {
        let (state, data) = net(vec![5, 8, 8, 1], ActivationSpec::cosine(4.0), seed, 6);
        let k = empirical_ntk(&state, &data).unwrap();
        let mut sum = DenseMatrix::zeros(6, 6);
        for t in &k.layer_terms {
            sum.add_assign(t).unwrap();
        }
        assert!(sum.sub(&k.kernel).unwrap().frobenius_norm() <= 1e-10 * k.kernel.frobenius_norm());
        assert!(k.lambda_min() >= -1e-8 * k.lambda_max());
        assert!(ntk_diagnostics(&k).unwrap().chain_holds());
        let traces = forward_batch(&state, &data.samples).unwrap();
        assert_eq!(feature_matrix(&traces, 0).unwrap(), data.samples);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kernel_is_permutation_equivariant(seed in 0u64..1000, shift in 1usize..5) {
        let (state, data) = net(vec![3, 6, 4, 1], ActivationSpec::cosine(2.5), seed, 5);
        let perm: Vec<usize> = (0..5).map(|i| (i + shift) % 5).collect();
        let permuted = Dataset { samples: data.samples.permute_rows(&perm), ..data.clone() };
        let k = empirical_ntk(&state, &data).unwrap().kernel;
        let kp = empirical_ntk(&state, &permuted).unwrap().kernel;
        for i in 0..5 {
            for j in 0..5 {
                prop_assert!((kp[(i, j)] - k[(perm[i], perm[j])]).abs() <= 1e-12 * k.max_abs());
            }
        }
    }

    #[test]
    fn kernel_equals_jacobian_gram(seed in 0u64..10_000, depth in 1usize..4, n in 1usize..6) {
        let mut widths = vec![3];
        widths.extend(std::iter::repeat(6).take(depth - 1));
        widths.push(1);
        for act in [ActivationSpec::cosine(3.0), ActivationSpec::relu()] {
            let (state, data) = net(widths.clone(), act, seed, n);
            let k = empirical_ntk(&state, &data).unwrap();
            let reference = jacobian_gram(&state, &data).unwrap();
            prop_assert!(relative(&k.kernel, &reference) <= 1e-10);
        }
    }
}
