//! Conditional average-velocity MLP `u(z, r, t, c)`.
//!
//! The input row is `[z | c | feat(r) | feat(t)]` where `feat(s)` is the raw
//! scalar followed by `time_embed_dim` sinusoidal features
//! `sin(pi 2^j s), cos(pi 2^j s)`. Every hidden layer is affine followed by the
//! activation; the output layer is affine.
//!
//! Three passes share one code path so the primal output is bit-identical
//! between them: plain evaluation, evaluation with a forward-mode tangent
//! (JVP with respect to `(z, r, t)`), and evaluation with a cached trace for
//! reverse-mode parameter gradients.

use std::cell::Cell;
use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{RealArray, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Softplus,
    Tanh,
    /// Only useful for hand-built linear test networks.
    Identity,
}

impl Activation {
    #[inline]
    fn value(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Softplus => {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Softplus => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => {
                let th = x.tanh();
                1.0 - th * th
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkArch {
    /// Sample dimension `d`; also the output dimension.
    pub input_dim: usize,
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Number of sinusoidal features per time scalar (even).
    pub time_embed_dim: usize,
}

impl NetworkArch {
    pub fn mlp(input_dim: usize, cond_dim: usize, hidden: Vec<usize>) -> Self {
        Self {
            input_dim,
            cond_dim,
            hidden,
            activation: Activation::Silu,
            time_embed_dim: 6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.cond_dim == 0 {
            return Err(Error::Arch("input_dim and cond_dim must be >= 1".into()));
        }
        if self.hidden.is_empty() {
            return Err(Error::Arch("at least one hidden layer is required".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Arch("hidden widths must be >= 1".into()));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::Arch("time_embed_dim must be even".into()));
        }
        Ok(())
    }

    fn time_features(&self) -> usize {
        1 + self.time_embed_dim
    }

    /// Width of the network's input row.
    pub fn feature_dim(&self) -> usize {
        self.input_dim + self.cond_dim + 2 * self.time_features()
    }

    /// `(fan_in, fan_out)` for each affine layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.feature_dim()];
        widths.extend(&self.hidden);
        widths.push(self.input_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// One affine layer; `weight` is `fan_out x fan_in`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkParams {
    pub arch: NetworkArch,
    pub layers: Vec<Dense>,
    /// Identifies this parameter state for trace validation.
    #[serde(skip, default = "next_generation")]
    generation: u64,
}

impl PartialEq for NetworkParams {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.layers == other.layers
    }
}

/// Weight standard deviation is `sqrt(INIT_GAIN / fan_in)`.
pub const INIT_GAIN: f64 = 1.0;

/// Draws weights from `N(0, INIT_GAIN / fan_in)`; biases start at zero.
pub fn init_params(arch: &NetworkArch, rng: &mut RngState) -> Result<NetworkParams> {
    arch.validate()?;
    let layers = arch
        .layer_shapes()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let std = (INIT_GAIN / fan_in as f64).sqrt();
            Dense {
                fan_in,
                fan_out,
                weight: (0..fan_in * fan_out).map(|_| std * rng.normal()).collect(),
                bias: vec![0.0; fan_out],
            }
        })
        .collect();
    Ok(NetworkParams {
        arch: arch.clone(),
        layers,
        generation: next_generation(),
    })
}

impl NetworkParams {
    /// Parameters with every weight and bias zero.
    pub fn zeros(arch: &NetworkArch) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| Dense {
                fan_in,
                fan_out,
                weight: vec![0.0; fan_in * fan_out],
                bias: vec![0.0; fan_out],
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            layers,
            generation: next_generation(),
        })
    }

    /// Rebuilds parameters from explicit layers, checking shapes against `arch`.
    pub fn from_layers(arch: NetworkArch, layers: Vec<Dense>) -> Result<Self> {
        let p = Self {
            arch,
            layers,
            generation: next_generation(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let shapes = self.arch.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::Arch(format!(
                "expected {} layers, found {}",
                shapes.len(),
                self.layers.len()
            )));
        }
        for (k, ((fan_in, fan_out), layer)) in shapes.iter().zip(&self.layers).enumerate() {
            if layer.fan_in != *fan_in
                || layer.fan_out != *fan_out
                || layer.weight.len() != fan_in * fan_out
                || layer.bias.len() != *fan_out
            {
                return Err(Error::Arch(format!("layer {k} has inconsistent shape")));
            }
            if !layer.weight.iter().chain(&layer.bias).all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {k} parameters")));
            }
        }
        Ok(())
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// All parameters, layer by layer, weights (row-major) then biases.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "flat parameter vector of length {} for {} parameters",
                values.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&values[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&values[off..off + nb]);
            off += nb;
        }
        self.generation = next_generation();
        Ok(())
    }

    /// Mutable access to the layers; invalidates outstanding traces.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.generation = next_generation();
        &mut self.layers
    }
}

/// Tangent of the `(z, r, t)` inputs; the condition is held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTangent {
    pub dz: RealArray,
    pub dr: f64,
    pub dt: f64,
}

impl InputTangent {
    /// `(v, 0, 1)`: the total time derivative along the straight path.
    pub fn along_path(v: &RealArray) -> Self {
        Self {
            dz: v.clone(),
            dr: 0.0,
            dt: 1.0,
        }
    }
}

/// Cached activations of one batch, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    generation: u64,
    batch: usize,
    /// `acts[0]` is the feature matrix, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients laid out like [`NetworkParams::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<DenseGrad>,
}

impl ParamGrads {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| DenseGrad {
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// `c[m x n] = a[m x k] * b^T` where `b` is `n x k` row-major.
fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    // SAFETY: bounds asserted above; strides describe dense row-major buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m x n] = a[m x k] * b[k x n]`, all row-major.
fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m x n] = a^T * b` where `a` is `k x m` and `b` is `k x n`.
fn matmul_at(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, c: &mut [f64]) {
    assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_inputs(
    arch: &NetworkArch,
    z: &RealArray,
    r: &[f64],
    t: &[f64],
    c: &RealArray,
) -> Result<usize> {
    let n = z.rows();
    if z.cols() != arch.input_dim {
        return Err(Error::Shape(format!(
            "z has {} columns, network expects {}",
            z.cols(),
            arch.input_dim
        )));
    }
    if c.cols() != arch.cond_dim || c.rows() != n {
        return Err(Error::Shape(format!(
            "condition is {:?}, expected ({n}, {})",
            c.shape(),
            arch.cond_dim
        )));
    }
    if r.len() != n || t.len() != n {
        return Err(Error::Shape(format!(
            "time arrays have lengths ({}, {}), expected {n}",
            r.len(),
            t.len()
        )));
    }
    for (i, (&ri, &ti)) in r.iter().zip(t).enumerate() {
        if !(0.0..=1.0).contains(&ri) || !(0.0..=1.0).contains(&ti) {
            return Err(Error::Domain(format!("row {i}: (r, t) = ({ri}, {ti}) outside [0, 1]")));
        }
        if ri > ti {
            return Err(Error::Domain(format!("row {i}: r = {ri} > t = {ti}")));
        }
    }
    Ok(n)
}

/// Writes `feat(s)` into `out` and, when requested, its derivative in `s`.
fn time_features(s: f64, embed: usize, out: &mut [f64], deriv: Option<&mut [f64]>) {
    out[0] = s;
    let pairs = embed / 2;
    for j in 0..pairs {
        let w = PI * (1u64 << j) as f64;
        out[1 + 2 * j] = (w * s).sin();
        out[2 + 2 * j] = (w * s).cos();
    }
    if let Some(d) = deriv {
        d[0] = 1.0;
        for j in 0..pairs {
            let w = PI * (1u64 << j) as f64;
            d[1 + 2 * j] = w * (w * s).cos();
            d[2 + 2 * j] = -w * (w * s).sin();
        }
    }
}

fn build_features(
    arch: &NetworkArch,
    z: &RealArray,
    r: &[f64],
    t: &[f64],
    c: &RealArray,
    tangent: Option<&InputTangent>,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let n = z.rows();
    let f = arch.feature_dim();
    let d = arch.input_dim;
    let k = arch.cond_dim;
    let tf = arch.time_features();
    let mut x = vec![0.0; n * f];
    let mut dx = tangent.map(|_| vec![0.0; n * f]);
    let mut dr_buf = vec![0.0; tf];
    let mut dt_buf = vec![0.0; tf];
    for i in 0..n {
        let row = &mut x[i * f..(i + 1) * f];
        row[..d].copy_from_slice(z.row(i));
        row[d..d + k].copy_from_slice(c.row(i));
        let (r_slot, t_slot) = row[d + k..].split_at_mut(tf);
        let want_deriv = tangent.is_some();
        time_features(
            r[i],
            arch.time_embed_dim,
            r_slot,
            want_deriv.then_some(&mut dr_buf[..]),
        );
        time_features(
            t[i],
            arch.time_embed_dim,
            t_slot,
            want_deriv.then_some(&mut dt_buf[..]),
        );
        if let (Some(tan), Some(dx)) = (tangent, dx.as_mut()) {
            let drow = &mut dx[i * f..(i + 1) * f];
            drow[..d].copy_from_slice(tan.dz.row(i));
            for j in 0..tf {
                drow[d + k + j] = dr_buf[j] * tan.dr;
                drow[d + k + tf + j] = dt_buf[j] * tan.dt;
            }
        }
    }
    (x, dx)
}

struct PassOutput {
    u: Vec<f64>,
    du: Option<Vec<f64>>,
    trace: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
}

fn run(
    params: &NetworkParams,
    z: &RealArray,
    r: &[f64],
    t: &[f64],
    c: &RealArray,
    tangent: Option<&InputTangent>,
    keep_trace: bool,
) -> Result<PassOutput> {
    let arch = &params.arch;
    let n = check_inputs(arch, z, r, t, c)?;
    if let Some(tan) = tangent {
        if tan.dz.shape() != z.shape() {
            return Err(Error::Shape(format!(
                "tangent dz is {:?}, z is {:?}",
                tan.dz.shape(),
                z.shape()
            )));
        }
    }
    let act = arch.activation;
    let (mut x, mut dx) = build_features(arch, z, r, t, c, tangent);
    let mut acts = Vec::new();
    let mut pres = Vec::new();
    let last = params.layers.len() - 1;
    for (li, layer) in params.layers.iter().enumerate() {
        let (fi, fo) = (layer.fan_in, layer.fan_out);
        let mut h = vec![0.0; n * fo];
        matmul_bt(&x, &layer.weight, n, fi, fo, &mut h);
        for row in h.chunks_exact_mut(fo) {
            for (v, b) in row.iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        let mut dh = dx.as_ref().map(|dx| {
            let mut dh = vec![0.0; n * fo];
            matmul_bt(dx, &layer.weight, n, fi, fo, &mut dh);
            dh
        });
        if li < last {
            if let Some(dh) = dh.as_mut() {
                for (d, &p) in dh.iter_mut().zip(&h) {
                    *d *= act.derivative(p);
                }
            }
            let out: Vec<f64> = h.iter().map(|&p| act.value(p)).collect();
            if keep_trace {
                pres.push(h);
                acts.push(std::mem::replace(&mut x, out));
            } else {
                x = out;
            }
        } else {
            if keep_trace {
                acts.push(std::mem::take(&mut x));
            }
            x = h;
        }
        dx = dh;
    }
    if keep_trace {
        acts.push(x.clone());
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("network output".into()));
    }
    Ok(PassOutput {
        u: x,
        du: dx,
        trace: keep_trace.then_some((acts, pres)),
    })
}

/// Evaluates the network without recording a trace.
pub fn evaluate(
    params: &NetworkParams,
    z: &RealArray,
    r: &[f64],
    t: &[f64],
    c: &RealArray,
) -> Result<RealArray> {
    let out = run(params, z, r, t, c, None, false)?;
    Ok(RealArray::from_raw(z.rows(), params.arch.input_dim, out.u))
}

pub fn forward(
    params: &NetworkParams,
    z: &RealArray,
    r: &[f64],
    t: &[f64],
    c: &RealArray,
) -> Result<(RealArray, ForwardTrace)> {
    let out = run(params, z, r, t, c, None, true)?;
    let (acts, pre) = out.trace.expect("trace requested");
    let trace = ForwardTrace {
        generation: params.generation,
        batch: z.rows(),
        acts,
        pre,
    };
    Ok((
        RealArray::from_raw(z.rows(), params.arch.input_dim, out.u),
        trace,
    ))
}

/// Primal output and its directional derivative along `tangent`, in one pass.
pub fn forward_jvp(
    params: &NetworkParams,
    z: &RealArray,
    r: &[f64],
    t: &[f64],
    c: &RealArray,
    tangent: &InputTangent,
) -> Result<(RealArray, RealArray)> {
    let (u, du, _) = forward_jvp_traced(params, z, r, t, c, tangent)?;
    Ok((u, du))
}

/// [`forward_jvp`] that also records the primal trace for [`backward`].
pub fn forward_jvp_traced(
    params: &NetworkParams,
    z: &RealArray,
    r: &[f64],
    t: &[f64],
    c: &RealArray,
    tangent: &InputTangent,
) -> Result<(RealArray, RealArray, ForwardTrace)> {
    let out = run(params, z, r, t, c, Some(tangent), true)?;
    let (acts, pre) = out.trace.expect("trace requested");
    let d = params.arch.input_dim;
    let n = z.rows();
    let du = out.du.expect("tangent requested");
    if !du.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("network tangent output".into()));
    }
    Ok((
        RealArray::from_raw(n, d, out.u),
        RealArray::from_raw(n, d, du),
        ForwardTrace {
            generation: params.generation,
            batch: n,
            acts,
            pre,
        },
    ))
}

/// Gradient of `<u, cotangent>` with respect to every parameter.
pub fn backward(
    params: &NetworkParams,
    trace: &ForwardTrace,
    cotangent: &RealArray,
) -> Result<ParamGrads> {
    if trace.generation != params.generation {
        return Err(Error::Trace(
            "trace was recorded with a different parameter state".into(),
        ));
    }
    let n = trace.batch;
    if cotangent.shape() != (n, params.arch.input_dim) {
        return Err(Error::Trace(format!(
            "cotangent {:?} does not match trace batch ({n}, {})",
            cotangent.shape(),
            params.arch.input_dim
        )));
    }
    if trace.acts.len() != params.layers.len() + 1 {
        return Err(Error::Trace("trace depth does not match network".into()));
    }
    let act = params.arch.activation;
    let mut grads = ParamGrads::zeros_like(params);
    let mut delta = cotangent.as_slice().to_vec();
    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let (fi, fo) = (layer.fan_in, layer.fan_out);
        let input = &trace.acts[li];
        let g = &mut grads.layers[li];
        matmul_at(&delta, input, n, fo, fi, &mut g.weight);
        for row in delta.chunks_exact(fo) {
            for (b, d) in g.bias.iter_mut().zip(row) {
                *b += d;
            }
        }
        if li > 0 {
            let mut prev = vec![0.0; n * fi];
            matmul(&delta, &layer.weight, n, fo, fi, &mut prev);
            for (p, &z) in prev.iter_mut().zip(&trace.pre[li - 1]) {
                *p *= act.derivative(z);
            }
            delta = prev;
        }
    }
    Ok(grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(params: &NetworkParams, config: AdamConfig) -> Self {
        let n = params.param_count();
        Self {
            config,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Bias-corrected Adam update at the configured learning rate.
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &ParamGrads,
    state: &mut AdamState,
) -> Result<()> {
    let lr = state.config.lr;
    adam_step_with_lr(params, grads, state, lr)
}

/// Adam update with an explicit learning rate (for schedules).
pub fn adam_step_with_lr(
    params: &mut NetworkParams,
    grads: &ParamGrads,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if state.m.len() != params.param_count() || grads.layers.len() != params.layers.len() {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    let AdamConfig {
        beta1, beta2, eps, ..
    } = state.config;
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    let mut off = 0;
    for (layer, g) in params.layers.iter_mut().zip(&grads.layers) {
        if g.weight.len() != layer.weight.len() || g.bias.len() != layer.bias.len() {
            return Err(Error::Shape("gradient does not match parameters".into()));
        }
        for (p, gi) in layer
            .weight
            .iter_mut()
            .chain(layer.bias.iter_mut())
            .zip(g.weight.iter().chain(&g.bias))
        {
            let m = &mut state.m[off];
            let v = &mut state.v[off];
            *m = beta1 * *m + (1.0 - beta1) * gi;
            *v = beta2 * *v + (1.0 - beta2) * gi * gi;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
            off += 1;
        }
    }
    params.generation = next_generation();
    Ok(())
}

/// Anything that can be queried as an average-velocity field `u(z, r, t, c)`.
///
/// Implemented by trained networks and by the closed-form task oracles so the
/// samplers and metrics run unchanged on either.
pub trait VelocityField {
    fn dim(&self) -> usize;
    fn cond_dim(&self) -> usize;
    fn eval(&self, z: &RealArray, r: &[f64], t: &[f64], c: &RealArray) -> Result<RealArray>;
}

impl VelocityField for NetworkParams {
    fn dim(&self) -> usize {
        self.arch.input_dim
    }

    fn cond_dim(&self) -> usize {
        self.arch.cond_dim
    }

    fn eval(&self, z: &RealArray, r: &[f64], t: &[f64], c: &RealArray) -> Result<RealArray> {
        evaluate(self, z, r, t, c)
    }
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn cond_dim(&self) -> usize {
        (**self).cond_dim()
    }

    fn eval(&self, z: &RealArray, r: &[f64], t: &[f64], c: &RealArray) -> Result<RealArray> {
        (**self).eval(z, r, t, c)
    }
}

/// Wraps a field and counts evaluation calls.
pub struct CountingField<F> {
    inner: F,
    calls: Cell<usize>,
}

impl<F: VelocityField> CountingField<F> {
    pub fn new(inner: F) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<F: VelocityField> VelocityField for CountingField<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn cond_dim(&self) -> usize {
        self.inner.cond_dim()
    }

    fn eval(&self, z: &RealArray, r: &[f64], t: &[f64], c: &RealArray) -> Result<RealArray> {
        self.calls.set(self.calls.get() + 1);
        self.inner.eval(z, r, t, c)
    }
}

/// Field that returns the same vector everywhere; handy for sampler tests.
#[derive(Debug, Clone)]
pub struct ConstantField {
    pub value: Vec<f64>,
    pub cond_dim: usize,
}

impl VelocityField for ConstantField {
    fn dim(&self) -> usize {
        self.value.len()
    }

    fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    fn eval(&self, z: &RealArray, _r: &[f64], _t: &[f64], _c: &RealArray) -> Result<RealArray> {
        if z.cols() != self.value.len() {
            return Err(Error::Shape("constant field dimension".into()));
        }
        let data = (0..z.rows()).flat_map(|_| self.value.iter().copied()).collect();
        Ok(RealArray::from_raw(z.rows(), self.value.len(), data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{gauss, mean_var};

    fn small_arch() -> NetworkArch {
        NetworkArch {
            input_dim: 3,
            cond_dim: 2,
            hidden: vec![16, 12],
            activation: Activation::Silu,
            time_embed_dim: 4,
        }
    }

    fn batch(rng: &mut RngState, n: usize, d: usize, k: usize) -> (RealArray, Vec<f64>, Vec<f64>, RealArray) {
        let z = gauss(rng, n, d);
        let c = gauss(rng, n, k);
        let mut r = Vec::new();
        let mut t = Vec::new();
        for _ in 0..n {
            let a = rng.uniform();
            let b = rng.uniform();
            r.push(a.min(b));
            t.push(a.max(b));
        }
        (z, r, t, c)
    }

    /// Network with one identity hidden layer, so `u = A [z; c; r; t]`.
    fn linear_net(a: &[f64], d: usize, k: usize) -> NetworkParams {
        let arch = NetworkArch {
            input_dim: d,
            cond_dim: k,
            hidden: vec![d + k + 2],
            activation: Activation::Identity,
            time_embed_dim: 0,
        };
        let f = arch.feature_dim();
        let mut eye = vec![0.0; f * f];
        for i in 0..f {
            eye[i * f + i] = 1.0;
        }
        NetworkParams::from_layers(
            arch,
            vec![
                Dense {
                    fan_in: f,
                    fan_out: f,
                    weight: eye,
                    bias: vec![0.0; f],
                },
                Dense {
                    fan_in: f,
                    fan_out: d,
                    weight: a.to_vec(),
                    bias: vec![0.0; d],
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn arch_validation() {
        let mut a = small_arch();
        a.hidden.clear();
        assert!(matches!(init_params(&a, &mut RngState::new(0)), Err(Error::Arch(_))));
        let mut b = small_arch();
        b.hidden = vec![4, 0];
        assert!(b.validate().is_err());
        let mut c = small_arch();
        c.time_embed_dim = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(&small_arch(), &mut RngState::new(11)).unwrap();
        let b = init_params(&small_arch(), &mut RngState::new(11)).unwrap();
        assert_eq!(a.flat(), b.flat());
    }

    #[test]
    fn init_fan_in_scaling() {
        let arch = NetworkArch {
            input_dim: 2,
            cond_dim: 2,
            hidden: vec![128, 128],
            activation: Activation::Silu,
            time_embed_dim: 6,
        };
        let p = init_params(&arch, &mut RngState::new(5)).unwrap();
        for l in &p.layers {
            let w = RealArray::new(l.weight.len(), 1, l.weight.clone()).unwrap();
            let (_, var) = mean_var(&w).unwrap();
            let expected = INIT_GAIN / l.fan_in as f64;
            assert!(
                (var[0] / expected - 1.0).abs() < 0.2,
                "fan_in {} var {} expected {}",
                l.fan_in,
                var[0],
                expected
            );
            assert!(l.bias.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = NetworkParams::zeros(&small_arch()).unwrap();
        let (z, r, t, c) = batch(&mut RngState::new(1), 5, 3, 2);
        let (u, _) = forward(&p, &z, &r, &t, &c).unwrap();
        assert!(u.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_reversed_interval_and_bad_shapes() {
        let p = init_params(&small_arch(), &mut RngState::new(0)).unwrap();
        let z = RealArray::zeros(1, 3);
        let c = RealArray::zeros(1, 2);
        assert!(matches!(forward(&p, &z, &[0.6], &[0.4], &c), Err(Error::Domain(_))));
        assert!(matches!(forward(&p, &z, &[0.1], &[1.4], &c), Err(Error::Domain(_))));
        let bad_z = RealArray::zeros(1, 4);
        assert!(matches!(forward(&p, &bad_z, &[0.1], &[0.4], &c), Err(Error::Shape(_))));
        assert!(matches!(forward(&p, &z, &[0.1, 0.2], &[0.4, 0.5], &c), Err(Error::Shape(_))));
    }

    #[test]
    fn batch_rows_are_independent() {
        let p = init_params(&small_arch(), &mut RngState::new(3)).unwrap();
        let (z, r, t, c) = batch(&mut RngState::new(4), 9, 3, 2);
        let (u, _) = forward(&p, &z, &r, &t, &c).unwrap();
        let perm: Vec<usize> = vec![4, 2, 8, 0, 1, 7, 3, 6, 5];
        let zp = z.select_rows(&perm);
        let cp = c.select_rows(&perm);
        let rp: Vec<f64> = perm.iter().map(|&i| r[i]).collect();
        let tp: Vec<f64> = perm.iter().map(|&i| t[i]).collect();
        let (up, _) = forward(&p, &zp, &rp, &tp, &cp).unwrap();
        assert_eq!(up, u.select_rows(&perm));
    }

    #[test]
    fn linear_network_matches_matrix_product() {
        let (d, k) = (2, 2);
        let f = d + k + 2;
        let mut rng = RngState::new(9);
        let a: Vec<f64> = (0..d * f).map(|_| rng.normal()).collect();
        let p = linear_net(&a, d, k);
        let (z, r, t, c) = batch(&mut rng, 4, d, k);
        let (u, _) = forward(&p, &z, &r, &t, &c).unwrap();
        for i in 0..4 {
            let mut x = z.row(i).to_vec();
            x.extend_from_slice(c.row(i));
            x.push(r[i]);
            x.push(t[i]);
            for o in 0..d {
                let expect: f64 = (0..f).map(|j| a[o * f + j] * x[j]).sum();
                assert!((u.get(i, o) - expect).abs() < 1e-12);
            }
        }
        // Jacobian of a linear map applied to [dz; dr; dt; 0].
        let dz = gauss(&mut rng, 4, d);
        let tan = InputTangent {
            dz: dz.clone(),
            dr: 0.3,
            dt: -1.2,
        };
        let (_, du) = forward_jvp(&p, &z, &r, &t, &c, &tan).unwrap();
        for i in 0..4 {
            let mut dx = dz.row(i).to_vec();
            dx.extend([0.0, 0.0, 0.3, -1.2]);
            for o in 0..d {
                let expect: f64 = (0..f).map(|j| a[o * f + j] * dx[j]).sum();
                assert!((du.get(i, o) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jvp_primal_is_bit_identical_and_zero_tangent_gives_zero() {
        let p = init_params(&small_arch(), &mut RngState::new(2)).unwrap();
        let (z, r, t, c) = batch(&mut RngState::new(6), 7, 3, 2);
        let (u, _) = forward(&p, &z, &r, &t, &c).unwrap();
        let tan = InputTangent {
            dz: RealArray::zeros(7, 3),
            dr: 0.0,
            dt: 0.0,
        };
        let (u2, du) = forward_jvp(&p, &z, &r, &t, &c, &tan).unwrap();
        assert_eq!(u, u2);
        assert_eq!(evaluate(&p, &z, &r, &t, &c).unwrap(), u);
        assert!(du.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_zero_cotangent_and_stale_trace() {
        let mut p = init_params(&small_arch(), &mut RngState::new(2)).unwrap();
        let (z, r, t, c) = batch(&mut RngState::new(6), 4, 3, 2);
        let (_, trace) = forward(&p, &z, &r, &t, &c).unwrap();
        let g = backward(&p, &trace, &RealArray::zeros(4, 3)).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
        assert!(matches!(
            backward(&p, &trace, &RealArray::zeros(5, 3)),
            Err(Error::Trace(_))
        ));
        p.layers_mut()[0].bias[0] += 1.0;
        assert!(matches!(
            backward(&p, &trace, &RealArray::zeros(4, 3)),
            Err(Error::Trace(_))
        ));
    }

    #[test]
    fn single_weight_chain_rule() {
        // d = 1, one hidden unit of width 1; only one weight nonzero:
        // u = w2 * silu(w1 * z), du/dw1 = w2 * silu'(w1 z) * z.
        let arch = NetworkArch {
            input_dim: 1,
            cond_dim: 1,
            hidden: vec![1],
            activation: Activation::Silu,
            time_embed_dim: 0,
        };
        let mut p = NetworkParams::zeros(&arch).unwrap();
        let (w1, w2, z0) = (0.7, -1.3, 0.9);
        p.layers_mut()[0].weight[0] = w1;
        p.layers_mut()[1].weight[0] = w2;
        let z = RealArray::new(1, 1, vec![z0]).unwrap();
        let c = RealArray::zeros(1, 1);
        let (_, trace) = forward(&p, &z, &[0.2], &[0.5], &c).unwrap();
        let g = backward(&p, &trace, &RealArray::new(1, 1, vec![1.0]).unwrap()).unwrap();
        let s = 1.0 / (1.0 + (-w1 * z0 as f64).exp());
        let dsilu = s * (1.0 + w1 * z0 * (1.0 - s));
        assert!((g.layers[0].weight[0] - w2 * dsilu * z0).abs() < 1e-14);
        assert!((g.layers[1].weight[0] - w1 * z0 * s).abs() < 1e-14);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = init_params(&small_arch(), &mut RngState::new(2)).unwrap();
        let before = p.flat();
        let mut st = AdamState::new(&p, AdamConfig::default());
        let zero = ParamGrads::zeros_like(&p);
        adam_step(&mut p, &zero, &mut st).unwrap();
        assert_eq!(p.flat(), before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_constant_gradient_step_approaches_lr() {
        let mut p = init_params(&small_arch(), &mut RngState::new(2)).unwrap();
        let mut g = ParamGrads::zeros_like(&p);
        g.layers[0].weight[0] = 0.25;
        g.layers[1].bias[0] = -3.0;
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(&p, cfg);
        let mut last = (0.0, 0.0);
        for _ in 0..2000 {
            let a = p.layers[0].weight[0];
            let b = p.layers[1].bias[0];
            adam_step(&mut p, &g, &mut st).unwrap();
            last = (p.layers[0].weight[0] - a, p.layers[1].bias[0] - b);
        }
        // With constant g, m_hat = g and v_hat = g^2 exactly after bias correction.
        assert!((last.0 + cfg.lr).abs() < 1e-9, "{}", last.0);
        assert!((last.1 - cfg.lr).abs() < 1e-9, "{}", last.1);
    }

    #[test]
    fn counting_field_counts_calls() {
        let f = CountingField::new(ConstantField {
            value: vec![1.0, 2.0],
            cond_dim: 1,
        });
        let z = RealArray::zeros(3, 2);
        let c = RealArray::zeros(3, 1);
        f.eval(&z, &[0.0; 3], &[1.0; 3], &c).unwrap();
        f.eval(&z, &[0.0; 3], &[1.0; 3], &c).unwrap();
        assert_eq!(f.calls(), 2);
    }
}
