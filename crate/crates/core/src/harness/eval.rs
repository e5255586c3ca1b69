use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::clock::Stopwatch;
use crate::error::{Error, Result};
use crate::metrics::{energy_distance, median_bandwidth, mmd_rbf, MetricEntry, MetricReport};
use crate::net::{NetworkParams, VelocityField};
use crate::numkit::{gauss, median, RealArray, RngState};
use crate::samplers::{sample, SampleTrace, SamplerMode, SamplerSpec};
use crate::tasks::TaskSpec;

const EVAL_STREAM: u64 = 11;
const SAMPLER_STREAM: u64 = 12;
const LATENCY_STREAM: u64 = 13;

/// Flags applied on top of parsed sampler identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerOptions {
    pub displacement_scaling: bool,
    pub fresh_noise: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            displacement_scaling: true,
            fresh_noise: false,
        }
    }
}

impl SamplerOptions {
    pub fn apply(&self, spec: SamplerSpec) -> SamplerSpec {
        let spec = spec.with_displacement_scaling(self.displacement_scaling);
        if spec.mode == SamplerMode::Hybridflow {
            spec.with_fresh_noise(self.fresh_noise)
        } else {
            spec
        }
    }
}

pub fn check_compatible<F: VelocityField>(field: &F, task: &TaskSpec) -> Result<()> {
    if field.dim() != task.dim() || field.cond_dim() != task.cond_dim() {
        return Err(Error::Arch(format!(
            "network is ({}, {}) but task {} is ({}, {})",
            field.dim(),
            field.cond_dim(),
            task.name(),
            task.dim(),
            task.cond_dim()
        )));
    }
    Ok(())
}

/// Shared reference draw: data, conditions, and the noise every sampler starts from.
#[derive(Debug, Clone)]
pub struct EvalDraw {
    pub reference: RealArray,
    pub c: RealArray,
    pub z1: RealArray,
    pub seed: u64,
    joint: RealArray,
    bandwidth: f64,
}

impl EvalDraw {
    pub fn new(task: &TaskSpec, n: usize, seed: u64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Domain("evaluation needs n >= 2".into()));
        }
        let mut rng = RngState::with_stream(seed, EVAL_STREAM);
        let data = task.draw(&mut rng, n)?;
        let z1 = gauss(&mut rng, n, task.dim());
        let joint = data.x0.hcat(&data.c)?;
        // Bandwidth from a second, independent reference draw.
        let other = task.draw(&mut rng, n)?;
        let bandwidth = median_bandwidth(&joint, &other.x0.hcat(&other.c)?)?;
        Ok(Self {
            reference: data.x0,
            c: data.c,
            z1,
            seed,
            joint,
            bandwidth,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quality {
    pub energy_distance: f64,
    pub mmd: f64,
    pub nfe: usize,
    /// Fraction of samples whose nearest mixture component matches the
    /// condition (mixture task only).
    pub class_agreement: Option<f64>,
}

pub fn quality<F: VelocityField>(
    field: &F,
    task: &TaskSpec,
    spec: &SamplerSpec,
    draw: &EvalDraw,
) -> Result<(Quality, RealArray, SampleTrace)> {
    check_compatible(field, task)?;
    let mut rng = RngState::with_stream(draw.seed, SAMPLER_STREAM);
    let (x, trace) = sample(field, &draw.z1, &draw.c, spec, &mut rng)?;
    let joint = x.hcat(&draw.c)?;
    let class_agreement = match task {
        TaskSpec::CondGmm2d { .. } => {
            let hits = (0..x.rows())
                .filter(|&i| {
                    let comp = task.nearest_component(x.row(i));
                    comp.and_then(|k| task.class_of_component(k)) == task.class_of_condition(draw.c.row(i))
                })
                .count();
            Some(hits as f64 / x.rows() as f64)
        }
        _ => None,
    };
    let q = Quality {
        energy_distance: energy_distance(&joint, &draw.joint)?,
        mmd: mmd_rbf(&joint, &draw.joint, draw.bandwidth)?,
        nfe: trace.nfe,
        class_agreement,
    };
    Ok((q, x, trace))
}

pub(crate) fn entry(metric: &str, value: f64, task: &TaskSpec, spec: &SamplerSpec, seed: u64, n: usize) -> MetricEntry {
    let hybrid = spec.mode == SamplerMode::Hybridflow;
    MetricEntry {
        metric: metric.into(),
        value,
        task: task.name().into(),
        sampler: spec.label(),
        k: (!hybrid).then_some(spec.steps),
        alpha: hybrid.then_some(spec.alpha),
        seed,
        n,
    }
}

/// Quality rows (energy distance, MMD, NFE, class agreement) for each spec.
pub fn evaluate<F: VelocityField>(
    field: &F,
    task: &TaskSpec,
    specs: &[SamplerSpec],
    n: usize,
    seed: u64,
    config_hash: &str,
) -> Result<MetricReport> {
    check_compatible(field, task)?;
    for s in specs {
        s.validate()?;
    }
    let draw = EvalDraw::new(task, n, seed)?;
    let mut report = MetricReport::new(config_hash, seed);
    for spec in specs {
        let (q, _, _) = quality(field, task, spec, &draw)?;
        report.push(entry("energy_distance", q.energy_distance, task, spec, seed, n))?;
        report.push(entry("mmd_rbf", q.mmd, task, spec, seed, n))?;
        report.push(entry("nfe", q.nfe as f64, task, spec, seed, n))?;
        if let Some(a) = q.class_agreement {
            report.push(entry("class_agreement", a, task, spec, seed, n))?;
        }
    }
    Ok(report)
}

/// Median wall time in milliseconds of `calls` single-sample invocations.
pub fn measure_latency(
    params: &NetworkParams,
    task: &TaskSpec,
    spec: &SamplerSpec,
    calls: usize,
    seed: u64,
) -> Result<f64> {
    Ok(measure_latencies(params, task, std::slice::from_ref(spec), calls, seed)?[0])
}

/// Median per-sample wall time of each spec. Calls are interleaved across
/// specs so that background load hits every spec alike.
pub fn measure_latencies(
    params: &NetworkParams,
    task: &TaskSpec,
    specs: &[SamplerSpec],
    calls: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_compatible(params, task)?;
    if calls == 0 {
        return Err(Error::Domain("latency needs at least one call".into()));
    }
    let mut rng = RngState::with_stream(seed, LATENCY_STREAM);
    let data = task.draw(&mut rng, calls)?;
    let z1 = gauss(&mut rng, calls, task.dim());
    let mut times = vec![Vec::with_capacity(calls); specs.len()];
    for i in 0..calls {
        let (z, c) = (z1.select_rows(&[i]), data.c.select_rows(&[i]));
        for (spec, t) in specs.iter().zip(times.iter_mut()) {
            let sw = Stopwatch::start();
            let out = sample(params, &z, &c, spec, &mut rng)?;
            t.push(sw.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(out);
        }
    }
    Ok(times.iter().map(|t| median(t)).collect())
}

pub fn latency_report(
    params: &NetworkParams,
    task: &TaskSpec,
    specs: &[SamplerSpec],
    calls: usize,
    seed: u64,
    config_hash: &str,
) -> Result<MetricReport> {
    let mut report = MetricReport::new(config_hash, seed);
    for (spec, ms) in specs.iter().zip(measure_latencies(params, task, specs, calls, seed)?) {
        report.push(entry("wall_ms_per_sample", ms, task, spec, seed, calls))?;
    }
    Ok(report)
}

#[derive(Serialize)]
struct DumpMeta<'a> {
    spec: &'a SamplerSpec,
    sampler: String,
    nfe: usize,
    seed: u64,
    stage_wall_ms: Vec<(String, f64)>,
}

pub const DUMP_SCHEMA: &str = "hybridflow-samples/1";

/// Writes every stage of `trace` as `sample_id, stage, dim_*` rows, plus a
/// `.meta.json` sidecar with the spec, NFE, and per-stage wall times.
pub fn write_sampler_dump(
    path: &Path,
    trace: &SampleTrace,
    spec: &SamplerSpec,
    seed: u64,
    config_hash: &str,
) -> Result<()> {
    let d = trace.initial.cols();
    let mut s = format!("# {DUMP_SCHEMA} config_hash={config_hash} seed={seed}\nsample_id,stage");
    for j in 0..d {
        let _ = write!(s, ",dim_{j}");
    }
    s.push('\n');
    let stages = std::iter::once(("initial", &trace.initial))
        .chain(trace.stages.iter().map(|st| (st.label.as_str(), &st.state)));
    for (label, state) in stages {
        for i in 0..state.rows() {
            let _ = write!(s, "{i},{label}");
            for v in state.row(i) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))?;
    let meta = DumpMeta {
        spec,
        sampler: spec.label(),
        nfe: trace.nfe,
        seed,
        stage_wall_ms: trace
            .stages
            .iter()
            .map(|st| (st.label.clone(), st.wall.as_secs_f64() * 1e3))
            .collect(),
    };
    let mut meta_path = path.as_os_str().to_owned();
    meta_path.push(".meta.json");
    let meta_path = std::path::PathBuf::from(meta_path);
    let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    std::fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))
}
