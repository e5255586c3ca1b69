//! The default end-to-end pipeline: train on the mixture task, evaluate every
//! sampler family, sweep alpha and NFE, and run the Gaussian-oracle
//! diagnostics on a second small model.

use std::path::{Path, PathBuf};

use super::checkpoint::Checkpoint;
use super::config::{ExperimentConfig, ModelConfig, OptimizerConfig};
use super::eval::{entry, evaluate, latency_report, write_sampler_dump, EvalDraw, SamplerOptions};
use super::sweep::{eval_seeds, sweep_alpha, sweep_nfe, AlphaSweep, NfeSweep, DEFAULT_ALPHA_GRID};
use super::train::{train, TrainOutcome, ValLosses};
use crate::error::{Error, Result};
use crate::flowcore::PathBatch;
use crate::metrics::{
    error_accumulation_audit, limit_identity_fraction, lipschitz_estimate, shift_audit, ErrorAudit, MetricEntry,
    MetricReport, ShiftEstimate,
};
use crate::net::{AdamConfig, NetworkParams};
use crate::numkit::{gauss, RngState};
use crate::samplers::{sample, SamplerSpec, DEFAULT_ALPHA};
use crate::tasks::{write_dataset, TaskSpec};

#[derive(Debug, Clone)]
pub struct DemoOptions {
    pub seed: u64,
    pub sampler: SamplerOptions,
    pub main: ExperimentConfig,
    pub gauss: ExperimentConfig,
    pub eval_n: usize,
    pub eval_seeds: usize,
    pub latency_calls: usize,
}

impl DemoOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            sampler: SamplerOptions::default(),
            main: ExperimentConfig {
                seed,
                ..Default::default()
            },
            gauss: gauss_config(seed),
            eval_n: 2000,
            eval_seeds: 5,
            latency_calls: 1000,
        }
    }
}

/// Small model on the Gaussian task, used where an exact oracle is required.
pub fn gauss_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        task: TaskSpec::default_gauss(),
        model: ModelConfig {
            hidden: vec![64, 64],
            ..Default::default()
        },
        steps: 3000,
        batch_size: 512,
        optimizer: OptimizerConfig {
            adam: AdamConfig {
                lr: 1e-2,
                ..Default::default()
            },
            ..Default::default()
        },
        seed,
        ..Default::default()
    }
}

#[derive(Debug, Clone)]
pub struct GaussDiagnostics {
    pub train: TrainOutcome,
    pub limit_identity: f64,
    pub audit: ErrorAudit,
    pub shifts: Vec<(SamplerSpec, Vec<ShiftEstimate>)>,
}

#[derive(Debug, Clone)]
pub struct DemoSummary {
    pub out_dir: PathBuf,
    pub train: TrainOutcome,
    /// Mean of the last three logged validation losses.
    pub plateau: ValLosses,
    pub metrics: MetricReport,
    pub latency: MetricReport,
    pub nfe: NfeSweep,
    pub alpha: AlphaSweep,
    pub lipschitz: Vec<(f64, f64)>,
    pub gauss: GaussDiagnostics,
}

impl DemoSummary {
    pub fn latency_ms(&self, spec: &SamplerSpec) -> Option<f64> {
        self.latency.get("wall_ms_per_sample", &spec.label())
    }
}

pub fn plateau(train: &TrainOutcome) -> ValLosses {
    let tail: Vec<_> = train.log.iter().rev().take(3).collect();
    let k = tail.len() as f64;
    ValLosses {
        reflow: tail.iter().map(|r| r.val.reflow).sum::<f64>() / k,
        meanflow: tail.iter().map(|r| r.val.meanflow).sum::<f64>() / k,
    }
}

fn diag_entry(metric: String, value: f64, task: &TaskSpec, sampler: &str, seed: u64, n: usize) -> MetricEntry {
    MetricEntry {
        metric,
        value,
        task: task.name().into(),
        sampler: sampler.into(),
        k: None,
        alpha: None,
        seed,
        n,
    }
}

/// Fraction of trained-model probes obeying the r -> t limit, probes drawn
/// from the training marginal with `t` in `[0.05, 1]`.
pub fn limit_identity_probe(params: &NetworkParams, task: &TaskSpec, n: usize, seed: u64) -> Result<f64> {
    let mut rng = RngState::with_stream(seed, 31);
    let b = PathBatch::draw(task, &mut rng, n, &Default::default())?;
    let t: Vec<f64> = b.t.iter().map(|t| 0.05 + 0.95 * t).collect();
    let z = crate::flowcore::interpolate(&b.x0, &b.z1, &t)?;
    limit_identity_fraction(params, &z, &t, &b.c, &[1e-2, 1e-3, 1e-4])
}

/// Lipschitz estimate of the r = t field at several times.
pub fn lipschitz_profile(params: &NetworkParams, task: &TaskSpec, times: &[f64], seed: u64) -> Result<Vec<(f64, f64)>> {
    let mut rng = RngState::with_stream(seed, 32);
    let data = task.draw(&mut rng, 64)?;
    let z1 = gauss(&mut rng, 64, task.dim());
    times
        .iter()
        .map(|&t| {
            let z = crate::flowcore::interpolate(&data.x0, &z1, &vec![t; 64])?;
            Ok((t, lipschitz_estimate(params, &z, t, &data.c, 1e-3, 64, &mut rng)?))
        })
        .collect()
}

fn gauss_diagnostics(cfg: &ExperimentConfig, dir: &Path, sampler: SamplerOptions) -> Result<GaussDiagnostics> {
    let out = train(cfg, dir)?;
    let task = &cfg.task;
    let p = &out.params;
    let limit_identity = limit_identity_probe(p, task, 1000, cfg.seed)?;
    let audit = error_accumulation_audit(p, task, 8, 1000, &mut RngState::with_stream(cfg.seed, 33))?;
    let mut shifts = Vec::new();
    for spec in [
        SamplerSpec::meanflow_multistep(8),
        SamplerSpec::euler(16),
        SamplerSpec::hybridflow(DEFAULT_ALPHA),
    ] {
        let spec = sampler.apply(spec);
        let s = shift_audit(p, &spec, task, 4000, &mut RngState::with_stream(cfg.seed, 34))?;
        shifts.push((spec, s));
    }
    let mut report = MetricReport::new(cfg.hash(), cfg.seed);
    report.push(diag_entry("limit_identity_fraction".into(), limit_identity, task, "reflow_mode", cfg.seed, 1000))?;
    for row in &audit.rows {
        for (name, v) in [
            ("audit_error", row.mean_error),
            ("audit_deviation", row.mean_deviation),
            ("audit_stretch", row.stretch),
            ("audit_holds", row.holds),
        ] {
            report.push(MetricEntry {
                k: Some(row.step),
                ..diag_entry(name.into(), v, task, "meanflow_multistep_k8", cfg.seed, 1000)
            })?;
        }
    }
    report.push(diag_entry(
        "audit_trajectory_fraction".into(),
        audit.trajectory_fraction,
        task,
        "meanflow_multistep_k8",
        cfg.seed,
        1000,
    ))?;
    for (spec, list) in &shifts {
        for s in list {
            report.push(MetricEntry {
                k: Some(s.step),
                ..diag_entry(format!("shift_kl_proxy_{}", s.label), s.kl, task, &spec.label(), cfg.seed, 4000)
            })?;
        }
    }
    report.write(&dir.join("diagnostics.csv"))?;
    Ok(GaussDiagnostics {
        train: out,
        limit_identity,
        audit,
        shifts,
    })
}

/// Runs the whole pipeline into `out_dir`.
pub fn run_demo(out_dir: &Path, opts: &DemoOptions, mut log: impl FnMut(&str)) -> Result<DemoSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg = &opts.main;
    let hash = cfg.hash();
    let task = &cfg.task;

    log(&format!("training {} for {} steps", task.name(), cfg.steps));
    let main_dir = out_dir.join("main");
    let trained = train(cfg, &main_dir)?;
    let params = Checkpoint::load(&trained.checkpoint_path)?.network()?;

    let mut rng = RngState::with_stream(opts.seed, 41);
    let comment = format!("hybridflow-dataset/1 config_hash={hash} seed={}", opts.seed);
    write_dataset(&out_dir.join("dataset.csv"), &task.draw(&mut rng, 1000)?, &comment)?;

    log("evaluating samplers");
    let alpha = DEFAULT_ALPHA;
    let headline: Vec<SamplerSpec> = [
        SamplerSpec::meanflow_1step(),
        SamplerSpec::meanflow_multistep(4),
        SamplerSpec::euler(16),
        SamplerSpec::hybridflow(alpha),
    ]
    .into_iter()
    .map(|s| opts.sampler.apply(s))
    .collect();
    let metrics = evaluate(&params, task, &headline, opts.eval_n, opts.seed, &hash)?;
    metrics.write(&out_dir.join("metrics.csv"))?;
    let latency = latency_report(&params, task, &headline, opts.latency_calls, opts.seed, &hash)?;
    latency.write(&out_dir.join("latency.csv"))?;

    let hybrid = opts.sampler.apply(SamplerSpec::hybridflow(alpha));
    let draw = EvalDraw::new(task, 512, opts.seed)?;
    let (_, trace) = sample(&params, &draw.z1, &draw.c, &hybrid, &mut RngState::with_stream(opts.seed, 42))?;
    write_sampler_dump(&out_dir.join("samples.csv"), &trace, &hybrid, opts.seed, &hash)?;

    log("sweeping NFE and alpha");
    let seeds = eval_seeds(opts.seed, opts.eval_seeds);
    let nfe = sweep_nfe(&params, task, alpha, opts.eval_n, &seeds, opts.sampler)?;
    nfe.write(out_dir, &hash)?;
    let alpha_sweep = sweep_alpha(&params, task, &DEFAULT_ALPHA_GRID, opts.eval_n, &seeds, opts.sampler)?;
    alpha_sweep.write(out_dir, &hash)?;

    let lipschitz = lipschitz_profile(&params, task, &[0.1, 0.3, 0.5, 0.7, 0.9], opts.seed)?;
    let plateau = plateau(&trained);
    let mut head = MetricReport::new(hash.clone(), opts.seed);
    let n_eval = cfg.eval_size;
    head.push(diag_entry("val_plateau_reflow_mode".into(), plateau.reflow, task, "reflow_mode", opts.seed, n_eval))?;
    head.push(diag_entry("val_plateau_meanflow_mode".into(), plateau.meanflow, task, "meanflow_mode", opts.seed, n_eval))?;
    head.push(diag_entry(
        "val_plateau_ratio".into(),
        plateau.meanflow / plateau.reflow,
        task,
        "meanflow_over_reflow",
        opts.seed,
        n_eval,
    ))?;
    for &(t, l) in &lipschitz {
        head.push(diag_entry(format!("lipschitz_t{t:.1}"), l, task, "reflow_mode", opts.seed, 64))?;
    }
    for row in &nfe.rows {
        head.push(entry("energy_distance_median", row.median, task, &row.spec, opts.seed, opts.eval_n))?;
    }
    head.write(&out_dir.join("headline.csv"))?;

    log(&format!("oracle diagnostics on {}", opts.gauss.task.name()));
    let gauss = gauss_diagnostics(&opts.gauss, &out_dir.join("gauss"), opts.sampler)?;

    Ok(DemoSummary {
        out_dir: out_dir.to_path_buf(),
        train: trained,
        plateau,
        metrics,
        latency,
        nfe,
        alpha: alpha_sweep,
        lipschitz,
        gauss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_demo_writes_every_artifact() {
        let mut opts = DemoOptions::new(1);
        opts.main.steps = 20;
        opts.main.model.hidden = vec![16];
        opts.main.eval_every = 10;
        opts.main.eval_size = 32;
        opts.gauss.steps = 20;
        opts.gauss.model.hidden = vec![8];
        opts.gauss.eval_size = 32;
        opts.eval_n = 64;
        opts.eval_seeds = 2;
        opts.latency_calls = 5;
        let dir = tempfile::tempdir().unwrap();
        let s = run_demo(dir.path(), &opts, |_| {}).unwrap();
        for f in [
            "main/checkpoint.json",
            "main/train_log.csv",
            "dataset.csv",
            "metrics.csv",
            "latency.csv",
            "samples.csv",
            "samples.csv.meta.json",
            "nfe_sweep.csv",
            "nfe_sweep.svg",
            "alpha_sweep.csv",
            "alpha_sweep.svg",
            "headline.csv",
            "gauss/checkpoint.json",
            "gauss/diagnostics.csv",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert_eq!(s.gauss.audit.rows.len(), 8);
        assert_eq!(s.alpha.rows.len(), DEFAULT_ALPHA_GRID.len());
    }
}
