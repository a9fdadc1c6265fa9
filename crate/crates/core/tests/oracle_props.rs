use ndarray::{array, Array2};
use predprop::oracle::{
    backprop_reference, check_gradients, compare_with_backprop, empirical_error_covariance, fd_gradient,
    precision_convergence, random_equivalence_case, random_network, EquivalenceConfig, Fault, GradCheckConfig,
    RandomNetConfig, VariableSelector,
};
use predprop::{build_network, Activation, NetworkSpec, Orientation};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cosines_are_bounded(seed in any::<u64>(), depth in 1usize..4, relu in any::<bool>()) {
        let hidden = if relu { Activation::Relu } else { Activation::Linear };
        let (net, x, t) = random_equivalence_case(seed, depth, hidden, 1e-3).unwrap();
        let report = compare_with_backprop(&net, &x, &t, &EquivalenceConfig::default()).unwrap();
        for g in &report.gaps {
            if let Some(c) = g.cosine {
                prop_assert!((-1.0..=1.0).contains(&c), "cosine {c}");
            } else {
                prop_assert!(g.predprop_norm == 0.0 || g.backprop_norm == 0.0);
            }
        }
    }

    #[test]
    fn injected_fault_is_caught(seed in any::<u64>()) {
        let net = random_network(seed, &RandomNetConfig::default()).unwrap();
        let cfg = GradCheckConfig {
            fault: Some(Fault::ScaleWeightGradient { gap: 0, sublayer: 0, factor: 1.1 }),
            ..GradCheckConfig::default()
        };
        let report = check_gradients(&net, &cfg).unwrap();
        // A fault on an all-zero gradient is invisible.
        let touched = report.variables.iter().any(|v| v.variable.starts_with("theta[0.0]") && v.max_rel_error > 0.0);
        if touched {
            prop_assert!(!report.pass);
        }
    }
}

#[test]
fn single_gap_update_is_the_backprop_update() {
    for seed in 0..20 {
        let (net, x, t) = random_equivalence_case(seed, 1, Activation::Linear, 1e-3).unwrap();
        let report = compare_with_backprop(&net, &x, &t, &EquivalenceConfig::default()).unwrap();
        assert!(report.converged);
        assert!(report.min_cosine() >= 1.0 - 1e-12, "seed {seed}: {}", report.min_cosine());
    }
}

#[test]
fn low_output_precision_recovers_backprop_direction() {
    let cfg = EquivalenceConfig {
        output_precision: 1e-3,
        ..EquivalenceConfig::default()
    };
    for seed in 0..20 {
        let (net, x, t) = random_equivalence_case(seed, 2 + (seed % 2) as usize, Activation::Linear, 1e-3).unwrap();
        let report = compare_with_backprop(&net, &x, &t, &cfg).unwrap();
        assert!(report.converged, "seed {seed}");
        assert!(report.min_cosine() >= 0.99, "seed {seed}: {}", report.min_cosine());
    }
}

#[test]
fn backprop_reference_matches_finite_differences_of_its_loss() {
    let spec = NetworkSpec::layered(&[1, 2, 2], Activation::Linear, Activation::Linear)
        .with_orientation(Orientation::Discriminative)
        .with_seed(5);
    let net = build_network(spec).unwrap();
    let x = array![[0.3, -0.7]];
    let t = array![[0.2]];
    let g = backprop_reference(&net, &x, &t).unwrap();
    let h = 1e-6;
    for gap in 0..2 {
        let w = net.predictor(gap).sublayers[0].weights.clone();
        for ((r, c), _) in w.indexed_iter() {
            let mut plus = net.clone();
            let mut minus = net.clone();
            let mut wp = w.clone();
            wp[[r, c]] += h;
            plus.set_weights(gap, 0, wp).unwrap();
            let mut wm = w.clone();
            wm[[r, c]] -= h;
            minus.set_weights(gap, 0, wm).unwrap();
            let fd = (backprop_reference(&plus, &x, &t).unwrap().loss - backprop_reference(&minus, &x, &t).unwrap().loss)
                / (2.0 * h);
            assert!((fd - g.weights[gap][[r, c]]).abs() < 1e-7, "gap {gap} [{r},{c}]");
        }
    }
}

#[test]
fn fd_gradient_of_scalar_activity() {
    // F = ½(7 − 2μ)² + const at the prior-free top; dF/dμ = −2(7 − 2μ) = −2 at μ = 3.
    let mut net = build_network(NetworkSpec::layered(&[1, 1], Activation::Linear, Activation::Linear)).unwrap();
    net.set_weights(0, 0, array![[2.0]]).unwrap();
    net.clamp_layer(0, Some(array![[7.0]])).unwrap();
    net.clamp_layer(1, Some(array![[3.0]])).unwrap();
    net.clamp_layer(1, None).unwrap();
    net.refresh_errors().unwrap();
    let fd = fd_gradient(&net, &VariableSelector::Activity { layer: 1 }, 1e-5).unwrap();
    // Prior term ½μ² adds 3.
    assert!((fd.values[0] - (-2.0 + 3.0)).abs() < 1e-8, "{:?}", fd.values);
}

#[test]
fn empirical_covariance_of_known_errors() {
    let e = array![[1.0, 0.0], [-1.0, 0.0], [0.0, 2.0], [0.0, -2.0]];
    let c = empirical_error_covariance(&e).unwrap();
    assert_eq!(c, array![[0.5, 0.0], [0.0, 2.0]]);
}

#[test]
fn precision_learning_converges_to_the_error_covariance() {
    let cov: Array2<f64> = array![[1.0, 0.3], [0.3, 0.5]];
    let r = precision_convergence(&cov, 2, 5000, 300, 0.1, 3).unwrap();
    assert_eq!(r.samples, 10_000);
    assert!(r.relative_error <= 0.05, "{}", r.relative_error);
}
