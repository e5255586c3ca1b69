//! Inference procedures over a single average-velocity field.
//!
//! All samplers integrate from noise at `t = 1` to data at `t = 0` and return a
//! [`SampleTrace`] with every intermediate state. Network evaluations are
//! counted by wrapping the field, so the reported NFE is what actually ran.

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::Stopwatch;
use crate::error::{Error, Result};
use crate::net::{CountingField, VelocityField};
use crate::numkit::{gauss, RealArray, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    EulerReflow,
    #[serde(rename = "meanflow_1step")]
    MeanflowOneStep,
    MeanflowMultistep,
    Hybridflow,
}

impl SamplerMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerMode::EulerReflow => "euler_reflow",
            SamplerMode::MeanflowOneStep => "meanflow_1step",
            SamplerMode::MeanflowMultistep => "meanflow_multistep",
            SamplerMode::Hybridflow => "hybridflow",
        }
    }
}

/// Declarative description of one sampling procedure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub mode: SamplerMode,
    /// Step count for `euler_reflow` and `meanflow_multistep`.
    pub steps: usize,
    /// ReNoise mixing coefficient (hybrid only).
    pub alpha: f64,
    /// Refinement time (hybrid only); equals `alpha` unless overridden.
    pub t_refine: f64,
    /// Scale each jump by its interval length `t - r`.
    pub displacement_scaling: bool,
    /// Draw new noise for ReNoise instead of reusing the initial sample.
    pub fresh_noise_renoise: bool,
}

pub const DEFAULT_ALPHA: f64 = 0.15;

impl SamplerSpec {
    fn base(mode: SamplerMode, steps: usize) -> Self {
        Self {
            mode,
            steps,
            alpha: 0.0,
            t_refine: 0.0,
            displacement_scaling: true,
            fresh_noise_renoise: false,
        }
    }

    pub fn euler(steps: usize) -> Self {
        Self::base(SamplerMode::EulerReflow, steps)
    }

    pub fn meanflow_1step() -> Self {
        Self::base(SamplerMode::MeanflowOneStep, 1)
    }

    pub fn meanflow_multistep(steps: usize) -> Self {
        Self::base(SamplerMode::MeanflowMultistep, steps)
    }

    /// HybridFlow with `t_refine = alpha`.
    pub fn hybridflow(alpha: f64) -> Self {
        Self {
            alpha,
            t_refine: alpha,
            ..Self::base(SamplerMode::Hybridflow, 2)
        }
    }

    pub fn with_displacement_scaling(mut self, on: bool) -> Self {
        self.displacement_scaling = on;
        self
    }

    pub fn with_fresh_noise(mut self, on: bool) -> Self {
        self.fresh_noise_renoise = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            SamplerMode::EulerReflow | SamplerMode::MeanflowMultistep if self.steps == 0 => {
                Err(Error::Domain(format!("{} requires steps >= 1", self.mode.as_str())))
            }
            SamplerMode::Hybridflow => {
                check_open_unit(self.alpha, "alpha")?;
                check_open_unit(self.t_refine, "t_refine")
            }
            _ => Ok(()),
        }
    }

    /// Network evaluations per sample.
    pub fn nfe(&self) -> usize {
        match self.mode {
            SamplerMode::MeanflowOneStep => 1,
            SamplerMode::EulerReflow | SamplerMode::MeanflowMultistep => self.steps,
            SamplerMode::Hybridflow => 2,
        }
    }

    /// Short identifier, e.g. `euler_reflow_k16` or `hybridflow_a0.15`.
    pub fn label(&self) -> String {
        self.to_string()
    }

    /// Parses the identifiers produced by [`SamplerSpec::label`]; a bare
    /// `hybridflow` uses the default alpha.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("unrecognized sampler '{s}'"));
        if s == "meanflow_1step" {
            return Ok(Self::meanflow_1step());
        }
        if s == "hybridflow" {
            return Ok(Self::hybridflow(DEFAULT_ALPHA));
        }
        if let Some(a) = s.strip_prefix("hybridflow_a") {
            let alpha = a.parse().map_err(|_| bad())?;
            let spec = Self::hybridflow(alpha);
            spec.validate()?;
            return Ok(spec);
        }
        for (prefix, ctor) in [
            ("euler_reflow_k", Self::euler as fn(usize) -> Self),
            ("meanflow_multistep_k", Self::meanflow_multistep),
        ] {
            if let Some(k) = s.strip_prefix(prefix) {
                let spec = ctor(k.parse().map_err(|_| bad())?);
                spec.validate()?;
                return Ok(spec);
            }
        }
        Err(bad())
    }
}

impl fmt::Display for SamplerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mode {
            SamplerMode::MeanflowOneStep => write!(f, "meanflow_1step"),
            SamplerMode::EulerReflow | SamplerMode::MeanflowMultistep => {
                write!(f, "{}_k{}", self.mode.as_str(), self.steps)
            }
            SamplerMode::Hybridflow => write!(f, "hybridflow_a{}", self.alpha),
        }
    }
}

fn check_open_unit(v: f64, name: &str) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} = {v} must lie in (0, 1)")))
    }
}

/// One recorded state of a sampling run.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    /// `coarse`, `renoised`, `final`, or `step_k`.
    pub label: String,
    /// Path time the state nominally lives at.
    pub time: f64,
    pub state: RealArray,
    pub wall: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub initial: RealArray,
    pub stages: Vec<Stage>,
    pub nfe: usize,
}

impl SampleTrace {
    pub fn stage(&self, label: &str) -> Option<&Stage> {
        self.stages.iter().find(|s| s.label == label)
    }

    pub fn total_wall(&self) -> Duration {
        self.stages.iter().map(|s| s.wall).sum()
    }
}

fn check_batch<F: VelocityField>(field: &F, z1: &RealArray, c: &RealArray) -> Result<()> {
    if z1.cols() != field.dim() {
        return Err(Error::Shape(format!(
            "noise has {} columns, field dimension is {}",
            z1.cols(),
            field.dim()
        )));
    }
    if c.rows() != z1.rows() || c.cols() != field.cond_dim() {
        return Err(Error::Shape(format!(
            "condition is {:?}, expected ({}, {})",
            c.shape(),
            z1.rows(),
            field.cond_dim()
        )));
    }
    Ok(())
}

/// `z - h * u(z, r, t, c)` with constant `(r, t)` across the batch.
fn jump<F: VelocityField>(field: &F, z: &RealArray, r: f64, t: f64, h: f64, c: &RealArray) -> Result<RealArray> {
    let n = z.rows();
    let u = field.eval(z, &vec![r; n], &vec![t; n], c)?;
    z.lincomb(1.0, &u, -h)
}

/// Global jump `x = z1 - u(z1, 0, 1, c)`.
pub fn sample_meanflow_1step<F: VelocityField>(
    field: &F,
    z1: &RealArray,
    c: &RealArray,
) -> Result<(RealArray, SampleTrace)> {
    check_batch(field, z1, c)?;
    let counted = CountingField::new(field);
    let sw = Stopwatch::start();
    let x = jump(&counted, z1, 0.0, 1.0, 1.0, c)?;
    let trace = SampleTrace {
        initial: z1.clone(),
        stages: vec![Stage {
            label: "final".into(),
            time: 0.0,
            state: x.clone(),
            wall: sw.elapsed(),
        }],
        nfe: counted.calls(),
    };
    Ok((x, trace))
}

/// Euler integration of the `r = t` field on the grid `t_k = 1 - k / K`.
pub fn sample_euler_reflow<F: VelocityField>(
    field: &F,
    z1: &RealArray,
    c: &RealArray,
    steps: usize,
) -> Result<(RealArray, SampleTrace)> {
    SamplerSpec::euler(steps).validate()?;
    check_batch(field, z1, c)?;
    let counted = CountingField::new(field);
    let h = 1.0 / steps as f64;
    let mut z = z1.clone();
    let mut stages = Vec::with_capacity(steps);
    for k in 0..steps {
        let sw = Stopwatch::start();
        let tk = grid(k, steps);
        z = jump(&counted, &z, tk, tk, h, c)?;
        stages.push(Stage {
            label: format!("step_{}", k + 1),
            time: grid(k + 1, steps),
            state: z.clone(),
            wall: sw.elapsed(),
        });
    }
    Ok((
        z,
        SampleTrace {
            initial: z1.clone(),
            stages,
            nfe: counted.calls(),
        },
    ))
}

/// `t_k = (K - k) / K`, exact at both ends.
fn grid(k: usize, steps: usize) -> f64 {
    (steps - k) as f64 / steps as f64
}

/// Repeated average-velocity jumps over `[t_{k+1}, t_k]`.
///
/// With displacement scaling each jump moves by `(t_k - t_{k+1}) u`; without
/// it, by `u` (the unscaled update).
pub fn sample_meanflow_multistep<F: VelocityField>(
    field: &F,
    z1: &RealArray,
    c: &RealArray,
    steps: usize,
    displacement_scaling: bool,
) -> Result<(RealArray, SampleTrace)> {
    SamplerSpec::meanflow_multistep(steps).validate()?;
    check_batch(field, z1, c)?;
    let counted = CountingField::new(field);
    let mut z = z1.clone();
    let mut stages = Vec::with_capacity(steps);
    for k in 0..steps {
        let sw = Stopwatch::start();
        let (t_hi, t_lo) = (grid(k, steps), grid(k + 1, steps));
        let h = if displacement_scaling { t_hi - t_lo } else { 1.0 };
        z = jump(&counted, &z, t_lo, t_hi, h, c)?;
        stages.push(Stage {
            label: format!("step_{}", k + 1),
            time: t_lo,
            state: z.clone(),
            wall: sw.elapsed(),
        });
    }
    Ok((
        z,
        SampleTrace {
            initial: z1.clone(),
            stages,
            nfe: counted.calls(),
        },
    ))
}

/// `alpha z1 + (1 - alpha) x_coarse`, evaluated as `x + alpha (z1 - x)` so
/// that `z1 == x` is reproduced exactly.
pub fn renoise(x_coarse: &RealArray, z1: &RealArray, alpha: f64) -> Result<RealArray> {
    check_open_unit(alpha, "alpha")?;
    x_coarse.lincomb(1.0, &z1.lincomb(1.0, x_coarse, -1.0)?, alpha)
}

/// Global Jump, ReNoise, Local Refine: two network evaluations.
pub fn sample_hybridflow<F: VelocityField>(
    field: &F,
    z1: &RealArray,
    c: &RealArray,
    spec: &SamplerSpec,
    rng: &mut RngState,
) -> Result<(RealArray, SampleTrace)> {
    if spec.mode != SamplerMode::Hybridflow {
        return Err(Error::Config(format!(
            "sample_hybridflow called with mode {}",
            spec.mode.as_str()
        )));
    }
    spec.validate()?;
    check_batch(field, z1, c)?;
    let counted = CountingField::new(field);

    let (x_coarse, coarse_trace) = sample_meanflow_1step(&counted, z1, c)?;

    let sw = Stopwatch::start();
    let noise = if spec.fresh_noise_renoise {
        gauss(rng, z1.rows(), z1.cols())
    } else {
        z1.clone()
    };
    let z_refine = renoise(&x_coarse, &noise, spec.alpha)?;
    let renoise_wall = sw.elapsed();

    let sw = Stopwatch::start();
    let h = if spec.displacement_scaling {
        spec.t_refine
    } else {
        1.0
    };
    let x = jump(&counted, &z_refine, spec.t_refine, spec.t_refine, h, c)?;
    let refine_wall = sw.elapsed();

    let trace = SampleTrace {
        initial: z1.clone(),
        stages: vec![
            Stage {
                label: "coarse".into(),
                time: 0.0,
                state: x_coarse,
                wall: coarse_trace.total_wall(),
            },
            Stage {
                label: "renoised".into(),
                time: spec.t_refine,
                state: z_refine,
                wall: renoise_wall,
            },
            Stage {
                label: "final".into(),
                time: 0.0,
                state: x.clone(),
                wall: refine_wall,
            },
        ],
        nfe: counted.calls(),
    };
    Ok((x, trace))
}

/// Dispatches on `spec.mode`.
pub fn sample<F: VelocityField>(
    field: &F,
    z1: &RealArray,
    c: &RealArray,
    spec: &SamplerSpec,
    rng: &mut RngState,
) -> Result<(RealArray, SampleTrace)> {
    spec.validate()?;
    match spec.mode {
        SamplerMode::MeanflowOneStep => sample_meanflow_1step(field, z1, c),
        SamplerMode::EulerReflow => sample_euler_reflow(field, z1, c, spec.steps),
        SamplerMode::MeanflowMultistep => {
            sample_meanflow_multistep(field, z1, c, spec.steps, spec.displacement_scaling)
        }
        SamplerMode::Hybridflow => sample_hybridflow(field, z1, c, spec, rng),
    }
}
