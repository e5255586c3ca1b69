//! Randomized invariants over configs, paths, samplers, metrics and oracles.

use hybridflow::flowcore::{interpolate, meanflow_target, TimeDistribution, TimeSamplingConfig};
use hybridflow::harness::{ExperimentConfig, ModelConfig};
use hybridflow::metrics::energy_distance;
use hybridflow::net::{Activation, ConstantField, NetworkArch, NetworkParams};
use hybridflow::numkit::{column_cov, gauss, mean_var, RealArray, RngState};
use hybridflow::samplers::{renoise, sample, SamplerMode, SamplerSpec};
use hybridflow::tasks::TaskSpec;
use proptest::prelude::*;

fn array(seed: u64, n: usize, d: usize) -> RealArray {
    gauss(&mut RngState::new(seed), n, d)
}

fn spec_strategy() -> impl Strategy<Value = SamplerSpec> {
    prop_oneof![
        (1usize..40).prop_map(SamplerSpec::euler),
        Just(SamplerSpec::meanflow_1step()),
        (1usize..40, any::<bool>())
            .prop_map(|(k, s)| SamplerSpec::meanflow_multistep(k).with_displacement_scaling(s)),
        (0.01f64..0.99, any::<bool>(), any::<bool>()).prop_map(|(a, s, f)| {
            SamplerSpec::hybridflow(a).with_displacement_scaling(s).with_fresh_noise(f)
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_survives_a_json_round_trip(
        task in 0usize..3,
        hidden in prop::collection::vec(1usize..300, 1..5),
        act in 0usize..4,
        embed in 0usize..5,
        p_deg in 0.0f64..=1.0,
        logit in any::<bool>(),
        lr in 1e-6f64..1.0,
        steps in 0usize..100_000,
        batch in 1usize..4096,
        seed in any::<u64>(),
    ) {
        let mut cfg = ExperimentConfig {
            task: [TaskSpec::default_gauss(), TaskSpec::default_gmm(), TaskSpec::default_spline()][task].clone(),
            model: ModelConfig {
                hidden,
                activation: [Activation::Silu, Activation::Softplus, Activation::Tanh, Activation::Identity][act],
                time_embed_dim: 2 * embed,
            },
            time_sampling: TimeSamplingConfig {
                p_degenerate: p_deg,
                distribution: if logit {
                    TimeDistribution::LogitNormal { mean: -0.4, std: 1.0 }
                } else {
                    TimeDistribution::Uniform
                },
            },
            steps,
            batch_size: batch,
            seed,
            ..Default::default()
        };
        cfg.optimizer.adam.lr = lr;
        let back = ExperimentConfig::parse(&cfg.render()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn path_hits_its_endpoints(seed in any::<u64>(), n in 1usize..20, d in 1usize..5) {
        let x0 = array(seed, n, d);
        let z1 = array(seed ^ 1, n, d);
        prop_assert_eq!(interpolate(&x0, &z1, &vec![0.0; n]).unwrap(), x0.clone());
        prop_assert_eq!(interpolate(&x0, &z1, &vec![1.0; n]).unwrap(), z1);
    }

    #[test]
    fn renoise_is_the_stated_mixture(seed in any::<u64>(), n in 2usize..200, alpha in 0.001f64..0.999) {
        let x = array(seed, n, 2);
        let z = array(seed.wrapping_add(7), n, 2);
        let mixed = renoise(&x, &z, alpha).unwrap();
        let direct = z.lincomb(alpha, &x, 1.0 - alpha).unwrap();
        prop_assert!(mixed.max_abs_diff(&direct) < 1e-12);
        // Sample moments obey the bilinear variance identity exactly.
        let (_, vm) = mean_var(&mixed).unwrap();
        let (_, vx) = mean_var(&x).unwrap();
        let (_, vz) = mean_var(&z).unwrap();
        let cov = column_cov(&x, &z).unwrap();
        for j in 0..2 {
            let want = alpha * alpha * vz[j] + (1.0 - alpha).powi(2) * vx[j] + 2.0 * alpha * (1.0 - alpha) * cov[j];
            prop_assert!((vm[j] - want).abs() <= 1e-10 * (1.0 + want.abs()), "{} vs {}", vm[j], want);
        }
        prop_assert_eq!(renoise(&x, &x, alpha).unwrap(), x);
    }

    #[test]
    fn energy_distance_is_a_symmetric_nonnegative_gap(
        seed in any::<u64>(), n in 2usize..60, m in 2usize..60, d in 1usize..4, shift in -2.0f64..2.0,
    ) {
        let a = array(seed, n, d);
        let b = array(seed ^ 0x55, m, d).map(|v| v + shift);
        let ab = energy_distance(&a, &b).unwrap();
        let ba = energy_distance(&b, &a).unwrap();
        prop_assert!(ab >= -1e-12);
        prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab.abs()));
        prop_assert!(energy_distance(&a, &a).unwrap().abs() < 1e-12);
        prop_assert!(energy_distance(&a, &array(seed, 1, d)).is_err());
    }

    #[test]
    fn sampler_labels_parse_back(spec in spec_strategy()) {
        let back = SamplerSpec::parse(&spec.label()).unwrap();
        prop_assert_eq!(back.mode, spec.mode);
        prop_assert_eq!(back.nfe(), spec.nfe());
        if spec.mode == SamplerMode::Hybridflow {
            prop_assert!((back.alpha - spec.alpha).abs() < 1e-12);
        }
    }

    #[test]
    fn counted_evaluations_equal_the_declared_nfe(spec in spec_strategy(), seed in any::<u64>()) {
        let net = NetworkParams::zeros(&NetworkArch::mlp(2, 3, vec![4])).unwrap();
        let z1 = array(seed, 5, 2);
        let c = array(seed ^ 9, 5, 3);
        let (_, trace) = sample(&net, &z1, &c, &spec, &mut RngState::new(seed)).unwrap();
        let want = match spec.mode {
            SamplerMode::MeanflowOneStep | SamplerMode::Hybridflow => spec.nfe(),
            _ => spec.steps,
        };
        prop_assert_eq!(trace.nfe, want);
        prop_assert_eq!(spec.nfe(), want);
    }

    #[test]
    fn zero_field_leaves_deterministic_samplers_at_rest(spec in spec_strategy(), seed in any::<u64>()) {
        prop_assume!(spec.mode != SamplerMode::Hybridflow);
        let zero = ConstantField { value: vec![0.0; 3], cond_dim: 1 };
        let z1 = array(seed, 7, 3);
        let c = RealArray::zeros(7, 1);
        let (x, _) = sample(&zero, &z1, &c, &spec, &mut RngState::new(seed)).unwrap();
        prop_assert_eq!(x, z1);
    }

    #[test]
    fn zero_field_hybrid_returns_the_renoised_start(alpha in 0.01f64..0.99, seed in any::<u64>()) {
        // With no drift, coarse = z1, so reused-noise ReNoise is the identity too.
        let zero = ConstantField { value: vec![0.0; 2], cond_dim: 1 };
        let z1 = array(seed, 6, 2);
        let c = RealArray::zeros(6, 1);
        let (x, _) = sample(&zero, &z1, &c, &SamplerSpec::hybridflow(alpha), &mut RngState::new(seed)).unwrap();
        prop_assert!(x.max_abs_diff(&z1) < 1e-12);
    }

    #[test]
    fn oracle_average_velocity_solves_its_own_target(
        seed in any::<u64>(), t in 0.05f64..1.0, frac in 0.0f64..1.0,
    ) {
        // u = v - (t - r) du/dt with du/dt taken along the true flow.
        let oracle = TaskSpec::default_gauss().gaussian_oracle().unwrap();
        let r = t * frac;
        let n = 4;
        let z = array(seed, n, 2);
        let c = array(seed ^ 3, n, 2);
        let (rs, ts) = (vec![r; n], vec![t; n]);
        let u = oracle.average_velocity(&z, &rs, &ts, &c).unwrap();
        let v = oracle.instantaneous_velocity(&z, &ts, &c).unwrap();
        let h = 1e-5;
        let moved = |s: f64| {
            let zs = z.lincomb(1.0, &v, s).unwrap();
            let tt = vec![t + s; n];
            oracle.average_velocity(&zs, &rs, &tt, &c).unwrap()
        };
        let du = moved(h).lincomb(1.0 / (2.0 * h), &moved(-h), -1.0 / (2.0 * h)).unwrap();
        let target = meanflow_target(&v, &rs, &ts, &du).unwrap();
        prop_assert!(target.max_abs_diff(&u) < 1e-6, "{}", target.max_abs_diff(&u));
    }
}
