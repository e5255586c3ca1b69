//! End-to-end checks that need a trained network. Models are small enough to
//! train in a few seconds each and are shared across tests.

use std::sync::OnceLock;

use hybridflow::harness::demo::lipschitz_profile;
use hybridflow::harness::{gauss_config, measure_latencies, train, ExperimentConfig, TrainOutcome};
use hybridflow::net::{init_params, AdamConfig, NetworkParams};
use hybridflow::numkit::{column_means, gauss, RngState};
use hybridflow::samplers::{sample, SamplerSpec};
use hybridflow::tasks::TaskSpec;

/// Plain flow matching (`r = t` always) on the conditional Gaussian.
fn smoke_config() -> ExperimentConfig {
    let mut cfg = gauss_config(0);
    cfg.steps = 2000;
    cfg.time_sampling.p_degenerate = 1.0;
    cfg
}

fn train_in_tmp(cfg: &ExperimentConfig) -> TrainOutcome {
    let dir = tempfile::tempdir().unwrap();
    train(cfg, dir.path()).unwrap()
}

fn smoke_model() -> &'static TrainOutcome {
    static M: OnceLock<TrainOutcome> = OnceLock::new();
    M.get_or_init(|| train_in_tmp(&smoke_config()))
}

#[test]
fn short_gaussian_run_reaches_a_low_reflow_loss() {
    let out = smoke_model();
    let val = out.final_val();
    assert!(val.reflow <= 1e-3, "reflow-mode validation loss {:e}", val.reflow);
    assert_eq!(out.checkpoint.network().unwrap().flat(), out.params.flat());
}

#[test]
fn hybrid_costs_two_evaluations_and_beats_sixteen_euler_steps_on_time() {
    // Latency depends on architecture, not weights, so an untrained net will do.
    let cfg = ExperimentConfig::default();
    let params: NetworkParams = init_params(&cfg.arch(), &mut RngState::new(0)).unwrap();
    let hybrid = SamplerSpec::hybridflow(0.15);
    let euler = SamplerSpec::euler(16);
    assert_eq!(hybrid.nfe(), 2);
    let ms = measure_latencies(&params, &cfg.task, &[hybrid, euler], 300, 0).unwrap();
    assert!(ms[0] < ms[1], "hybrid {:.4} ms vs euler16 {:.4} ms", ms[0], ms[1]);
}

#[test]
fn fresh_renoise_noise_is_uncorrelated_with_the_coarse_state() {
    let task = TaskSpec::default_gauss();
    let params = &smoke_model().params;
    let n = 10_000;
    let alpha = 0.15;
    let mut rng = RngState::new(3);
    let data = task.draw(&mut rng, n).unwrap();
    let z1 = gauss(&mut rng, n, task.dim());
    let spec = SamplerSpec::hybridflow(alpha).with_fresh_noise(true);
    let (_, trace) = sample(params, &z1, &data.c, &spec, &mut rng).unwrap();
    let coarse = &trace.stage("coarse").unwrap().state;
    let renoised = &trace.stage("renoised").unwrap().state;
    // Recover the injected noise from renoised = x + alpha (noise - x).
    let noise = renoised.lincomb(1.0 / alpha, coarse, 1.0 - 1.0 / alpha).unwrap();
    let (mn, mx) = (column_means(&noise), column_means(coarse));
    for j in 0..task.dim() {
        let prods: Vec<f64> = noise
            .iter_rows()
            .zip(coarse.iter_rows())
            .map(|(a, b)| (a[j] - mn[j]) * (b[j] - mx[j]))
            .collect();
        let cov = prods.iter().sum::<f64>() / (n - 1) as f64;
        let sd = (prods.iter().map(|p| (p - cov).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let half = 1.96 * sd / (n as f64).sqrt();
        assert!(cov.abs() <= half, "column {j}: cov {cov:.4} outside +-{half:.4}");
    }
}

#[test]
fn field_is_rougher_near_the_data_end() {
    let mut cfg = ExperimentConfig::default();
    cfg.model.hidden = vec![64, 64];
    cfg.steps = 3000;
    cfg.optimizer.adam = AdamConfig {
        lr: 3e-3,
        ..Default::default()
    };
    let out = train_in_tmp(&cfg);
    let wins = (0..10)
        .filter(|&s| {
            let l = lipschitz_profile(&out.params, &cfg.task, &[0.1, 0.9], s).unwrap();
            l[0].1 > l[1].1
        })
        .count();
    assert!(wins >= 8, "L(0.1) > L(0.9) on only {wins}/10 probe seeds");
}
