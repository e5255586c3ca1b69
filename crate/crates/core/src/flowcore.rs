//! Straight-line paths, `(r, t)` sampling and the unified MeanFlow loss.
//!
//! One network serves both objectives: rows with `r = t` regress the
//! instantaneous velocity directly, rows with `r < t` regress the average
//! velocity through the target `v - (t - r) du/dt`, where `du/dt` comes from a
//! forward-mode JVP with tangent `(v, 0, 1)` and is held constant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{self, AdamState, InputTangent, NetworkParams, ParamGrads};
use crate::numkit::{gauss, RealArray, RngState};
use crate::tasks::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimePair {
    pub r: f64,
    pub t: f64,
}

impl TimePair {
    pub fn new(r: f64, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&r) || !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("time pair ({r}, {t}) outside [0, 1]")));
        }
        if r > t {
            return Err(Error::Domain(format!("time pair has r = {r} > t = {t}")));
        }
        Ok(Self { r, t })
    }

    pub fn is_degenerate(&self) -> bool {
        self.r == self.t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeDistribution {
    Uniform,
    LogitNormal { mean: f64, std: f64 },
}

impl TimeDistribution {
    fn draw(&self, rng: &mut RngState) -> f64 {
        match *self {
            TimeDistribution::Uniform => rng.uniform(),
            TimeDistribution::LogitNormal { mean, std } => {
                let x = mean + std * rng.normal();
                1.0 / (1.0 + (-x).exp())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeSamplingConfig {
    /// Probability that a pair is drawn with `r = t`.
    pub p_degenerate: f64,
    pub distribution: TimeDistribution,
}

impl Default for TimeSamplingConfig {
    fn default() -> Self {
        Self {
            p_degenerate: 0.5,
            distribution: TimeDistribution::Uniform,
        }
    }
}

impl TimeSamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_degenerate) {
            return Err(Error::Config(format!(
                "p_degenerate = {} outside [0, 1]",
                self.p_degenerate
            )));
        }
        if let TimeDistribution::LogitNormal { std, .. } = self.distribution {
            if std <= 0.0 || !std.is_finite() {
                return Err(Error::Config("logit-normal std must be positive".into()));
            }
        }
        Ok(())
    }
}

pub fn sample_time_pair(rng: &mut RngState, cfg: &TimeSamplingConfig) -> TimePair {
    if rng.bernoulli(cfg.p_degenerate) {
        let t = cfg.distribution.draw(rng);
        TimePair { r: t, t }
    } else {
        let a = cfg.distribution.draw(rng);
        let b = cfg.distribution.draw(rng);
        TimePair {
            r: a.min(b),
            t: a.max(b),
        }
    }
}

/// `(1 - t_i) x0_i + t_i z1_i` for every row.
pub fn interpolate(x0: &RealArray, z1: &RealArray, t: &[f64]) -> Result<RealArray> {
    x0.ensure_same_shape(z1, "interpolate")?;
    if t.len() != x0.rows() {
        return Err(Error::Shape(format!(
            "{} times for {} rows",
            t.len(),
            x0.rows()
        )));
    }
    if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("interpolation time {bad} outside [0, 1]")));
    }
    let d = x0.cols();
    let mut out = Vec::with_capacity(x0.rows() * d);
    for (i, &ti) in t.iter().enumerate() {
        for (a, b) in x0.row(i).iter().zip(z1.row(i)) {
            out.push((1.0 - ti) * a + ti * b);
        }
    }
    Ok(RealArray::from_raw(x0.rows(), d, out))
}

/// A batch of training tuples on the straight path between data and noise.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    pub x0: RealArray,
    pub z1: RealArray,
    pub c: RealArray,
    pub r: Vec<f64>,
    pub t: Vec<f64>,
    pub z_t: RealArray,
    /// Conditional velocity `z1 - x0`.
    pub v_star: RealArray,
}

impl PathBatch {
    pub fn new(x0: RealArray, z1: RealArray, c: RealArray, times: &[TimePair]) -> Result<Self> {
        if c.rows() != x0.rows() {
            return Err(Error::Shape("condition rows do not match data rows".into()));
        }
        let r: Vec<f64> = times.iter().map(|p| p.r).collect();
        let t: Vec<f64> = times.iter().map(|p| p.t).collect();
        for p in times {
            TimePair::new(p.r, p.t)?;
        }
        let z_t = interpolate(&x0, &z1, &t)?;
        let v_star = z1.lincomb(1.0, &x0, -1.0)?;
        Ok(Self {
            x0,
            z1,
            c,
            r,
            t,
            z_t,
            v_star,
        })
    }

    pub fn len(&self) -> usize {
        self.x0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn times(&self) -> Vec<TimePair> {
        self.r
            .iter()
            .zip(&self.t)
            .map(|(&r, &t)| TimePair { r, t })
            .collect()
    }

    /// Draws data from `task`, fresh noise, and time pairs from `cfg`.
    pub fn draw(
        task: &TaskSpec,
        rng: &mut RngState,
        n: usize,
        cfg: &TimeSamplingConfig,
    ) -> Result<Self> {
        let data = task.draw(rng, n)?;
        let z1 = gauss(rng, n, task.dim());
        let times: Vec<TimePair> = (0..n).map(|_| sample_time_pair(rng, cfg)).collect();
        Self::new(data.x0, z1, data.c, &times)
    }
}

/// `v - (t - r) du_dt`, row by row.
pub fn meanflow_target(
    v: &RealArray,
    r: &[f64],
    t: &[f64],
    du_dt: &RealArray,
) -> Result<RealArray> {
    v.ensure_same_shape(du_dt, "meanflow_target")?;
    if r.len() != v.rows() || t.len() != v.rows() {
        return Err(Error::Shape("time arrays do not match rows".into()));
    }
    let d = v.cols();
    let mut out = Vec::with_capacity(v.rows() * d);
    for i in 0..v.rows() {
        let h = t[i] - r[i];
        for (vi, gi) in v.row(i).iter().zip(du_dt.row(i)) {
            out.push(if h == 0.0 { *vi } else { vi - h * gi });
        }
    }
    Ok(RealArray::from_raw(v.rows(), d, out))
}

/// Mean squared error over batch and dimensions.
pub fn mse(a: &RealArray, b: &RealArray) -> Result<f64> {
    a.ensure_same_shape(b, "mse")?;
    let s: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.as_slice().len() as f64)
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: ParamGrads,
    /// The frozen regression target.
    pub target: RealArray,
}

/// Loss and parameter gradient of `mean ||u - stopgrad(u_tgt)||^2`.
pub fn loss_and_grads(params: &NetworkParams, batch: &PathBatch) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::Domain("empty training batch".into()));
    }
    let tangent = InputTangent::along_path(&batch.v_star);
    let (u, du_dt, trace) =
        net::forward_jvp_traced(params, &batch.z_t, &batch.r, &batch.t, &batch.c, &tangent)?;
    let target = meanflow_target(&batch.v_star, &batch.r, &batch.t, &du_dt)?;
    let loss = mse(&u, &target)?;
    let scale = 2.0 / u.as_slice().len() as f64;
    let cot = u.lincomb(scale, &target, -scale)?;
    let grads = net::backward(params, &trace, &cot)?;
    Ok(LossOutput {
        loss,
        grads,
        target,
    })
}

/// Loss only, no gradient; same arithmetic as [`loss_and_grads`].
pub fn batch_loss(params: &NetworkParams, batch: &PathBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let tangent = InputTangent::along_path(&batch.v_star);
    let (u, du_dt) = net::forward_jvp(params, &batch.z_t, &batch.r, &batch.t, &batch.c, &tangent)?;
    let target = meanflow_target(&batch.v_star, &batch.r, &batch.t, &du_dt)?;
    mse(&u, &target)
}

/// One optimizer step on `batch`; returns the loss before the update.
pub fn unified_loss_step(
    params: &mut NetworkParams,
    batch: &PathBatch,
    opt: &mut AdamState,
    lr: f64,
) -> Result<f64> {
    let out = loss_and_grads(params, batch)?;
    if !out.loss.is_finite() || !out.grads.is_finite() {
        return Err(Error::NonFinite(format!("training loss {}", out.loss)));
    }
    net::adam_step_with_lr(params, &out.grads, opt, lr)?;
    Ok(out.loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, AdamConfig, NetworkArch};
    use crate::tasks::TaskSpec;

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let x0 = RealArray::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let z1 = RealArray::from_rows(&[vec![2.0, -2.0]]).unwrap();
        assert_eq!(interpolate(&x0, &z1, &[0.0]).unwrap(), x0);
        assert_eq!(interpolate(&x0, &z1, &[1.0]).unwrap(), z1);
        assert_eq!(
            interpolate(&x0, &z1, &[0.5]).unwrap().as_slice(),
            &[1.0, -1.0]
        );
        assert!(matches!(interpolate(&x0, &z1, &[1.5]), Err(Error::Domain(_))));
    }

    #[test]
    fn time_pair_sampling_limits() {
        let mut rng = RngState::new(4);
        let all_deg = TimeSamplingConfig {
            p_degenerate: 1.0,
            ..Default::default()
        };
        assert!((0..1000).all(|_| sample_time_pair(&mut rng, &all_deg).is_degenerate()));
        let none = TimeSamplingConfig {
            p_degenerate: 0.0,
            ..Default::default()
        };
        let pairs: Vec<TimePair> = (0..10_000).map(|_| sample_time_pair(&mut rng, &none)).collect();
        assert!(pairs.iter().all(|p| p.r < p.t));
        // E|a - b| = 1/3 for independent uniforms.
        let gap = pairs.iter().map(|p| p.t - p.r).sum::<f64>() / pairs.len() as f64;
        assert!((gap - 1.0 / 3.0).abs() < 0.05 / 3.0, "{gap}");
    }

    #[test]
    fn logit_normal_pairs_are_ordered() {
        let cfg = TimeSamplingConfig {
            p_degenerate: 0.2,
            distribution: TimeDistribution::LogitNormal {
                mean: -0.4,
                std: 1.0,
            },
        };
        let mut rng = RngState::new(1);
        for _ in 0..1000 {
            let p = sample_time_pair(&mut rng, &cfg);
            assert!(p.r <= p.t && p.r > 0.0 && p.t < 1.0);
        }
        assert!(TimeSamplingConfig {
            p_degenerate: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn meanflow_target_arithmetic() {
        let v = RealArray::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let du = RealArray::from_rows(&[vec![2.0, 2.0]]).unwrap();
        let tgt = meanflow_target(&v, &[0.25], &[0.75], &du).unwrap();
        assert_eq!(tgt.as_slice(), &[0.0, -1.0]);
        let same = meanflow_target(&v, &[0.4], &[0.4], &du).unwrap();
        assert_eq!(same, v);
    }

    #[test]
    fn path_batch_is_exact() {
        let task = TaskSpec::default_gauss();
        let mut rng = RngState::new(8);
        let b = PathBatch::draw(&task, &mut rng, 64, &TimeSamplingConfig::default()).unwrap();
        assert_eq!(interpolate(&b.x0, &b.z1, &b.t).unwrap(), b.z_t);
        assert_eq!(b.z1.lincomb(1.0, &b.x0, -1.0).unwrap(), b.v_star);
        assert!(b.r.iter().zip(&b.t).all(|(r, t)| r <= t));
    }

    #[test]
    fn degenerate_batch_loss_is_plain_regression() {
        let task = TaskSpec::default_gauss();
        let arch = NetworkArch::mlp(task.dim(), task.cond_dim(), vec![16, 16]);
        let params = init_params(&arch, &mut RngState::new(0)).unwrap();
        let cfg = TimeSamplingConfig {
            p_degenerate: 1.0,
            ..Default::default()
        };
        let b = PathBatch::draw(&task, &mut RngState::new(1), 32, &cfg).unwrap();
        let u = net::evaluate(&params, &b.z_t, &b.r, &b.t, &b.c).unwrap();
        let plain = mse(&u, &b.v_star).unwrap();
        assert_eq!(batch_loss(&params, &b).unwrap(), plain);
        assert_eq!(loss_and_grads(&params, &b).unwrap().loss, plain);
    }

    #[test]
    fn zero_network_initial_loss_matches_moments() {
        // u = 0 so the loss is E||z1 - x0||^2 / d = 1 + sigma^2 + E[mu(c)^2] per dimension.
        let task = TaskSpec::CondGauss {
            dim: 2,
            cond_dim: 2,
            mean: vec![0.0, 0.0],
            cond_scale: 0.0,
            sigma: 1.0,
        };
        let arch = NetworkArch::mlp(2, 2, vec![8]);
        let params = NetworkParams::zeros(&arch).unwrap();
        let b = PathBatch::draw(&task, &mut RngState::new(3), 20_000, &TimeSamplingConfig::default())
            .unwrap();
        let loss = batch_loss(&params, &b).unwrap();
        assert!((loss - 2.0).abs() < 0.05, "{loss}");
    }

    #[test]
    fn training_reduces_loss_on_gaussian_task() {
        let task = TaskSpec::default_gauss();
        let arch = NetworkArch::mlp(task.dim(), task.cond_dim(), vec![32, 32]);
        let mut params = init_params(&arch, &mut RngState::new(0)).unwrap();
        let mut opt = AdamState::new(&params, AdamConfig::default());
        let cfg = TimeSamplingConfig::default();
        let mut rng = RngState::new(5);
        let eval = PathBatch::draw(&task, &mut RngState::new(77), 4096, &cfg).unwrap();
        let initial = batch_loss(&params, &eval).unwrap();
        for _ in 0..500 {
            let b = PathBatch::draw(&task, &mut rng, 128, &cfg).unwrap();
            unified_loss_step(&mut params, &b, &mut opt, 1e-3).unwrap();
        }
        let fin = batch_loss(&params, &eval).unwrap();
        assert!(fin < 0.5 * initial, "initial {initial} final {fin}");
    }
}
