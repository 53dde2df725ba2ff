use ndarray::Array2;
use proptest::prelude::*;

use wflow::diffnet::{Activation, InitScheme};
use wflow::flow::{simplex_base, FlowConfig, FlowModel};
use wflow::metrics;

fn flow(dim: usize, n_layers: usize, init: InitScheme, modes: usize, seed: u64) -> FlowModel {
    let cfg = FlowConfig {
        n_layers,
        hidden_dims: vec![8, 8],
        activation: Activation::Tanh,
        scale_clamp: 3.0,
        init,
    };
    FlowModel::build(dim, &cfg, simplex_base(dim, modes, 4.0).unwrap(), seed).unwrap()
}

#[test]
fn identity_flow_reproduces_base() {
    for dim in [2, 3] {
        let f = flow(dim, 6, InitScheme::ZeroLastLayer, 3, 1);
        let n = 100_000;
        let xs = f.sample(n, 2).unwrap();
        let zs = f.base().sample(n, 3);
        for w in metrics::w1_marginals(xs.view(), zs.view()).unwrap() {
            assert!(w <= 0.05, "dim {dim}: marginal W1 {w}");
        }
    }
}

#[test]
fn own_samples_have_finite_log_prob() {
    for dim in [2, 3] {
        let f = flow(dim, 8, InitScheme::Xavier, 2, 11);
        let xs = f.sample(10_000, 12).unwrap();
        let lp = f.log_prob_batch(xs.view()).unwrap();
        assert!(lp.iter().all(|v| v.is_finite()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip(seed in 0u64..10_000, dim in 2usize..=3, pts in prop::collection::vec(-6.0f64..6.0, 12)) {
        let f = flow(dim, 5, InitScheme::Xavier, 1, seed);
        let z = Array2::from_shape_vec((12 / dim, dim), pts[..12 / dim * dim].to_vec()).unwrap();
        let (x, a) = f.forward_batch(z.view()).unwrap();
        let (back, b) = f.inverse_batch(x.view()).unwrap();
        for (u, v) in back.iter().zip(z.iter()) {
            prop_assert!((u - v).abs() <= 1e-8);
        }
        for (u, v) in a.iter().zip(b.iter()) {
            prop_assert!((u + v).abs() <= 1e-8);
        }
    }

    #[test]
    fn log_prob_ignores_batch_order(seed in 0u64..10_000, rot in 0usize..40) {
        let f = flow(2, 4, InitScheme::Xavier, 2, seed);
        let x = f.sample(40, seed + 1).unwrap();
        let lp = f.log_prob_batch(x.view()).unwrap();
        let order: Vec<usize> = (0..40).map(|i| (i + rot) % 40).collect();
        let shuffled = x.select(ndarray::Axis(0), &order);
        let lp2 = f.log_prob_batch(shuffled.view()).unwrap();
        for (i, &j) in order.iter().enumerate() {
            prop_assert_eq!(lp2[i].to_bits(), lp[j].to_bits());
        }
    }
}
