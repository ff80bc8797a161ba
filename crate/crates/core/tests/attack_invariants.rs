mod common;

use proptest::prelude::*;

use common::{BoxWatch, NoiseSource};
use uap_sga::attack::{
    run_attack, AttackConfig, Momentum, MomentumPlacement, PerturbationState, TraceRecorder, Variant,
};
use uap_sga::data::{plan_batches, InnerIterations};
use uap_sga::diagnostics::ScriptedGradients;
use uap_sga::Tensor;

fn variant() -> impl Strategy<Value = Variant> {
    prop_oneof![
        Just(Variant::Spgd),
        Just(Variant::Sga),
        Just(Variant::SgaPerturbationAggregation)
    ]
}

fn momentum() -> impl Strategy<Value = Momentum> {
    prop_oneof![Just(Momentum::None), Just(Momentum::Momentum), Just(Momentum::Nesterov)]
}

fn inner() -> impl Strategy<Value = InnerIterations> {
    prop_oneof![
        (1usize..4).prop_map(InnerIterations::Traversals),
        (1usize..6).prop_map(InnerIterations::Count)
    ]
}

prop_compose! {
    fn attack_config()(
        variant in variant(),
        momentum in momentum(),
        inner_placement in any::<bool>(),
        decay in 0.0f32..1.0,
        epsilon in 1e-3f32..0.5,
        alpha in 0.0f32..1.0,
        epochs in 1usize..4,
        small in 1usize..5,
        ratio in 1usize..5,
        inner in inner(),
        seed in any::<u64>(),
    ) -> AttackConfig {
        AttackConfig {
            variant,
            momentum,
            placement: if inner_placement { MomentumPlacement::Inner } else { MomentumPlacement::Outer },
            decay,
            epsilon,
            alpha,
            epochs,
            large_batch: small * ratio,
            small_batch: small,
            inner,
            seed,
            ..AttackConfig::default()
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn every_state_stays_in_the_box(config in attack_config(), n in 1usize..25, dims in 1usize..16, key in any::<u64>()) {
        let source = NoiseSource { n, shape: vec![dims], seed: key };
        let mut watch = BoxWatch::new(config.epsilon);
        let out = run_attack(&config, &source, &mut watch).unwrap();
        prop_assert_eq!(watch.violations, 0);
        prop_assert!(out.state.delta.max_abs() <= config.epsilon);
    }

    #[test]
    fn sign_counts_follow_the_schedule(config in attack_config(), n in 1usize..25) {
        let source = NoiseSource { n, shape: vec![3], seed: 1 };
        let out = run_attack(&config, &source, &mut ()).unwrap();
        let plan = plan_batches(n, &config).unwrap();
        let batches = plan.epoch_batches(0);
        let outer = (config.epochs * batches.len()) as u64;
        let inner: usize = config.epochs * batches.iter().map(|b| plan.inner_batches(0, 0, b).len()).sum::<usize>();
        match config.variant {
            Variant::Spgd => {
                prop_assert_eq!(out.outer_sign_count, outer);
                prop_assert_eq!(out.inner_sign_count, 0);
            }
            Variant::Sga => {
                prop_assert_eq!(out.outer_sign_count, outer);
                prop_assert_eq!(out.inner_sign_count, inner as u64);
            }
            Variant::SgaPerturbationAggregation => {
                prop_assert_eq!(out.outer_sign_count, 0);
                prop_assert_eq!(out.inner_sign_count, inner as u64);
            }
        }
        prop_assert_eq!(out.metrics.len() as u64, outer);
    }

    #[test]
    fn single_inner_step_over_whole_batch_is_spgd(
        config in attack_config(),
        n in 1usize..25,
        key in any::<u64>(),
    ) {
        let config = AttackConfig {
            small_batch: config.large_batch,
            inner: InnerIterations::Count(1),
            momentum: Momentum::None,
            ..config
        };
        let source = NoiseSource { n, shape: vec![5], seed: key };
        let mut a = TraceRecorder::default();
        let mut b = TraceRecorder::default();
        run_attack(&AttackConfig { variant: Variant::Spgd, ..config.clone() }, &source, &mut a).unwrap();
        run_attack(&AttackConfig { variant: Variant::Sga, ..config }, &source, &mut b).unwrap();
        prop_assert_eq!(a.deltas, b.deltas);
    }

    #[test]
    fn reruns_are_bit_identical(config in attack_config(), n in 1usize..25, key in any::<u64>()) {
        let source = NoiseSource { n, shape: vec![4], seed: key };
        let a = run_attack(&config, &source, &mut ()).unwrap();
        let b = run_attack(&config, &source, &mut ()).unwrap();
        let bits = |s: &PerturbationState| s.delta.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a.state), bits(&b.state));
    }

    /// A constant gradient walks every coordinate α per outer step towards
    /// its sign until the box stops it, with or without momentum.
    #[test]
    fn constant_gradient_has_closed_form(
        g in prop::collection::vec(prop_oneof![-1.0f32..-0.01, 0.01f32..1.0], 1..8),
        momentum in momentum(),
        epsilon in 0.01f32..0.2,
        alpha in 0.001f32..0.05,
        epochs in 1usize..6,
        n in 1usize..12,
    ) {
        let grads = (0..n).map(|_| Tensor::vector(&g)).collect();
        let source = ScriptedGradients::new(grads).unwrap();
        let config = AttackConfig { variant: Variant::Spgd, momentum, epsilon, alpha, epochs, large_batch: 4, ..AttackConfig::default() };
        let out = run_attack(&config, &source, &mut ()).unwrap();
        let steps = (epochs * n.div_ceil(4)) as f64;
        for (d, gi) in out.state.delta.data().iter().zip(&g) {
            let expected = (steps * alpha as f64).min(epsilon as f64) * (gi.signum() as f64);
            prop_assert!((*d as f64 - expected).abs() <= 1e-5 * (1.0 + steps), "{} vs {}", d, expected);
        }
    }
}
