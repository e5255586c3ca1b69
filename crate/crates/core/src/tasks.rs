//! Synthetic conditional data distributions and their velocity oracles.
//!
//! With independent coupling `z1 ~ N(0, I)` and an isotropic Gaussian data law
//! `x0 ~ N(m, s^2 I)`, every quantity along the straight path is affine in `z`:
//!
//! ```text
//! q_t          = N((1 - t) m, S_t^2 I),    S_t^2 = (1 - t)^2 s^2 + t^2
//! v*(z, t)     = -m + A_t (z - (1 - t) m),  A_t   = (t - (1 - t) s^2) / S_t^2
//! flow t -> r  : z_r = (1 - r) m + (S_r / S_t) (z_t - (1 - t) m)
//! ```
//!
//! The mixture oracle weights the component fields by their posterior
//! responsibilities and integrates the ODE numerically for average velocities.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::VelocityField;
use crate::numkit::{RealArray, RngState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum TaskSpec {
    /// `x0 | c ~ N(mean + cond_scale * P c, sigma^2 I)` with `c ~ U[-1, 1]^cond_dim`;
    /// `P` copies `c[j % cond_dim]` into coordinate `j`.
    CondGauss {
        dim: usize,
        cond_dim: usize,
        mean: Vec<f64>,
        cond_scale: f64,
        sigma: f64,
    },
    /// Equal-weight isotropic components on a circle. Component `k` belongs to
    /// class `k % classes`; the condition is the class one-hot.
    CondGmm2d {
        components: usize,
        classes: usize,
        radius: f64,
        sigma: f64,
    },
    /// Natural cubic spline through `knots` knots sampled at `horizon` points
    /// per degree of freedom. The condition is `[start | goal]`.
    ActionChunkSpline {
        horizon: usize,
        dof: usize,
        knots: usize,
        knot_noise: f64,
    },
}

/// Interior spline knots are clipped to `[-KNOT_BOUND, KNOT_BOUND]`.
pub const KNOT_BOUND: f64 = 1.5;

/// A batch of `(x0, c)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub x0: RealArray,
    pub c: RealArray,
    /// Mixture component of each row, when the task has one.
    pub components: Option<Vec<usize>>,
}

impl TaskSpec {
    pub fn default_gauss() -> Self {
        TaskSpec::CondGauss {
            dim: 2,
            cond_dim: 2,
            mean: vec![0.5, -0.5],
            cond_scale: 0.5,
            sigma: 0.2,
        }
    }

    pub fn default_gmm() -> Self {
        TaskSpec::CondGmm2d {
            components: 4,
            classes: 4,
            radius: 2.0,
            sigma: 0.15,
        }
    }

    pub fn default_spline() -> Self {
        TaskSpec::ActionChunkSpline {
            horizon: 16,
            dof: 2,
            knots: 4,
            knot_noise: 0.5,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "cond_gauss" => Ok(Self::default_gauss()),
            "cond_gmm2d" => Ok(Self::default_gmm()),
            "action_chunk_spline" => Ok(Self::default_spline()),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::CondGauss { .. } => "cond_gauss",
            TaskSpec::CondGmm2d { .. } => "cond_gmm2d",
            TaskSpec::ActionChunkSpline { .. } => "action_chunk_spline",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TaskSpec::CondGauss { dim, .. } => *dim,
            TaskSpec::CondGmm2d { .. } => 2,
            TaskSpec::ActionChunkSpline { horizon, dof, .. } => horizon * dof,
        }
    }

    pub fn cond_dim(&self) -> usize {
        match self {
            TaskSpec::CondGauss { cond_dim, .. } => *cond_dim,
            TaskSpec::CondGmm2d { classes, .. } => *classes,
            TaskSpec::ActionChunkSpline { dof, .. } => 2 * dof,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TaskSpec::CondGauss {
                dim,
                cond_dim,
                mean,
                cond_scale,
                sigma,
            } => {
                if *dim == 0 || *cond_dim == 0 {
                    return Err(Error::Config("cond_gauss dimensions must be >= 1".into()));
                }
                if mean.len() != *dim {
                    return Err(Error::Config("cond_gauss mean length must equal dim".into()));
                }
                if !(*sigma > 0.0) || !cond_scale.is_finite() {
                    return Err(Error::Config("cond_gauss sigma must be > 0".into()));
                }
            }
            TaskSpec::CondGmm2d {
                components,
                classes,
                radius,
                sigma,
            } => {
                if *classes == 0 || *components < *classes || components % classes != 0 {
                    return Err(Error::Config(
                        "cond_gmm2d components must be a positive multiple of classes".into(),
                    ));
                }
                if !(*sigma > 0.0) || !(*radius > 0.0) {
                    return Err(Error::Config("cond_gmm2d sigma and radius must be > 0".into()));
                }
            }
            TaskSpec::ActionChunkSpline {
                horizon,
                dof,
                knots,
                knot_noise,
            } => {
                if *horizon < 3 || *dof == 0 || *knots < 2 || *knot_noise < 0.0 {
                    return Err(Error::Config(
                        "spline task needs horizon >= 3, dof >= 1, knots >= 2".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// `n` i.i.d. `(x0, c)` pairs.
    pub fn draw(&self, rng: &mut RngState, n: usize) -> Result<TaskBatch> {
        self.validate()?;
        if n == 0 {
            return Err(Error::Domain("draw requires n >= 1".into()));
        }
        let d = self.dim();
        let k = self.cond_dim();
        let mut x0 = Vec::with_capacity(n * d);
        let mut c = Vec::with_capacity(n * k);
        let mut comps = Vec::new();
        match self {
            TaskSpec::CondGauss {
                sigma, ..
            } => {
                let oracle = self.gaussian_oracle()?;
                for _ in 0..n {
                    let ci: Vec<f64> = (0..k).map(|_| 2.0 * rng.uniform() - 1.0).collect();
                    let m = oracle.mean_for(&ci);
                    x0.extend(m.iter().map(|mj| mj + sigma * rng.normal()));
                    c.extend(ci);
                }
            }
            TaskSpec::CondGmm2d {
                components,
                classes,
                sigma,
                ..
            } => {
                let means = self.component_means();
                let per_class = components / classes;
                for _ in 0..n {
                    let class = rng.below(*classes);
                    let comp = class + classes * rng.below(per_class);
                    let m = means[comp];
                    x0.push(m[0] + sigma * rng.normal());
                    x0.push(m[1] + sigma * rng.normal());
                    c.extend((0..*classes).map(|j| if j == class { 1.0 } else { 0.0 }));
                    comps.push(comp);
                }
            }
            TaskSpec::ActionChunkSpline {
                horizon,
                dof,
                knots,
                knot_noise,
            } => {
                let basis = spline_basis(*knots, *horizon);
                for _ in 0..n {
                    let start: Vec<f64> = (0..*dof).map(|_| 2.0 * rng.uniform() - 1.0).collect();
                    let goal: Vec<f64> = (0..*dof).map(|_| 2.0 * rng.uniform() - 1.0).collect();
                    // knot_values[j][q]
                    let mut knot_values = vec![vec![0.0; *dof]; *knots];
                    for (j, kv) in knot_values.iter_mut().enumerate() {
                        let s = j as f64 / (*knots - 1) as f64;
                        for q in 0..*dof {
                            kv[q] = if j == 0 {
                                start[q]
                            } else if j == knots - 1 {
                                goal[q]
                            } else {
                                let base = start[q] + (goal[q] - start[q]) * s;
                                (base + knot_noise * rng.normal()).clamp(-KNOT_BOUND, KNOT_BOUND)
                            };
                        }
                    }
                    for row in basis.iter() {
                        for q in 0..*dof {
                            x0.push(row.iter().zip(&knot_values).map(|(w, kv)| w * kv[q]).sum());
                        }
                    }
                    c.extend(start);
                    c.extend(goal);
                }
            }
        }
        Ok(TaskBatch {
            x0: RealArray::new(n, d, x0)?,
            c: RealArray::new(n, k, c)?,
            components: (!comps.is_empty()).then_some(comps),
        })
    }

    /// Centers of the mixture components (empty for other tasks).
    pub fn component_means(&self) -> Vec<[f64; 2]> {
        match self {
            TaskSpec::CondGmm2d {
                components, radius, ..
            } => (0..*components)
                .map(|k| {
                    let a = 2.0 * PI * k as f64 / *components as f64;
                    [radius * a.cos(), radius * a.sin()]
                })
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Index of the component whose center is closest to `x`.
    pub fn nearest_component(&self, x: &[f64]) -> Option<usize> {
        let means = self.component_means();
        means
            .iter()
            .enumerate()
            .map(|(k, m)| (k, (x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
    }

    /// Class selected by a condition row.
    pub fn class_of_condition(&self, c: &[f64]) -> Option<usize> {
        match self {
            TaskSpec::CondGmm2d { .. } => c
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(j, _)| j),
            _ => None,
        }
    }

    pub fn class_of_component(&self, comp: usize) -> Option<usize> {
        match self {
            TaskSpec::CondGmm2d { classes, .. } => Some(comp % classes),
            _ => None,
        }
    }

    /// Upper bound on `|x[i+1] - 2 x[i] + x[i-1]|` along any spline trajectory.
    pub fn smoothness_cap(&self) -> Option<f64> {
        match self {
            TaskSpec::ActionChunkSpline { horizon, knots, .. } => {
                let basis = spline_basis(*knots, *horizon);
                let worst = (1..horizon - 1)
                    .map(|i| {
                        (0..*knots)
                            .map(|j| (basis[i + 1][j] - 2.0 * basis[i][j] + basis[i - 1][j]).abs())
                            .sum::<f64>()
                    })
                    .fold(0.0, f64::max);
                Some(KNOT_BOUND * worst)
            }
            _ => None,
        }
    }

    pub fn gaussian_oracle(&self) -> Result<GaussianOracle> {
        match self {
            TaskSpec::CondGauss {
                dim,
                cond_dim,
                mean,
                cond_scale,
                sigma,
            } => Ok(GaussianOracle {
                dim: *dim,
                cond_dim: *cond_dim,
                base_mean: mean.clone(),
                cond_scale: *cond_scale,
                sigma: *sigma,
                coeff_perturbation: 0.0,
            }),
            _ => Err(Error::Unsupported(format!(
                "task '{}' has no Gaussian oracle",
                self.name()
            ))),
        }
    }

    /// Exact conditional velocity fields, when the task admits them.
    pub fn oracle(&self) -> Option<TaskOracle> {
        match self {
            TaskSpec::CondGauss { .. } => self.gaussian_oracle().ok().map(TaskOracle::Gaussian),
            TaskSpec::CondGmm2d {
                classes, sigma, ..
            } => Some(TaskOracle::Mixture(MixtureOracle {
                means: self.component_means(),
                classes: *classes,
                sigma: *sigma,
                steps_per_unit: 512,
            })),
            TaskSpec::ActionChunkSpline { .. } => None,
        }
    }
}

/// Natural cubic spline weights: `basis[i][j]` is the contribution of knot `j`
/// (at `j / (knots - 1)`) to sample `i` (at `i / (horizon - 1)`).
fn spline_basis(knots: usize, horizon: usize) -> Vec<Vec<f64>> {
    let mut basis = vec![vec![0.0; knots]; horizon];
    for j in 0..knots {
        let mut y = vec![0.0; knots];
        y[j] = 1.0;
        let m = natural_second_derivatives(&y);
        let h = 1.0 / (knots - 1) as f64;
        for (i, row) in basis.iter_mut().enumerate() {
            let s = i as f64 / (horizon - 1) as f64;
            let seg = ((s / h).floor() as usize).min(knots - 2);
            let a = (seg as f64 + 1.0) * h - s;
            let b = s - seg as f64 * h;
            row[j] = m[seg] * a.powi(3) / (6.0 * h)
                + m[seg + 1] * b.powi(3) / (6.0 * h)
                + (y[seg] / h - m[seg] * h / 6.0) * a
                + (y[seg + 1] / h - m[seg + 1] * h / 6.0) * b;
        }
    }
    basis
}

/// Second derivatives at uniformly spaced knots with natural end conditions.
fn natural_second_derivatives(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    let h = 1.0 / (n - 1) as f64;
    // Tridiagonal system for interior points: h m[i-1] + 4h m[i] + h m[i+1] = 6 (y[i+1] - 2y[i] + y[i-1]) / h
    let k = n - 2;
    let mut diag = vec![4.0 * h; k];
    let mut rhs: Vec<f64> = (1..n - 1)
        .map(|i| 6.0 * (y[i + 1] - 2.0 * y[i] + y[i - 1]) / h)
        .collect();
    for i in 1..k {
        let w = h / diag[i - 1];
        diag[i] -= w * h;
        rhs[i] -= w * rhs[i - 1];
    }
    let mut sol = vec![0.0; k];
    sol[k - 1] = rhs[k - 1] / diag[k - 1];
    for i in (0..k - 1).rev() {
        sol[i] = (rhs[i] - h * sol[i + 1]) / diag[i];
    }
    m[1..n - 1].copy_from_slice(&sol);
    m
}

/// Closed-form fields for the isotropic conditional Gaussian task.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOracle {
    pub dim: usize,
    pub cond_dim: usize,
    pub base_mean: Vec<f64>,
    pub cond_scale: f64,
    pub sigma: f64,
    /// Relative error injected into the velocity coefficient; zero except in
    /// sensitivity tests.
    pub coeff_perturbation: f64,
}

impl GaussianOracle {
    /// Unconditional oracle with mean `mean` and scale `sigma`.
    pub fn isotropic(mean: Vec<f64>, sigma: f64) -> Self {
        Self {
            dim: mean.len(),
            cond_dim: 1,
            base_mean: mean,
            cond_scale: 0.0,
            sigma,
            coeff_perturbation: 0.0,
        }
    }

    /// Data mean `mu(c)`.
    pub fn mean_for(&self, c: &[f64]) -> Vec<f64> {
        self.base_mean
            .iter()
            .enumerate()
            .map(|(j, m)| m + self.cond_scale * c[j % self.cond_dim])
            .collect()
    }

    /// Per-coordinate variance of `q_t`.
    pub fn marginal_var(&self, t: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        (1.0 - t).powi(2) * s2 + t * t
    }

    /// Regression coefficient `A_t` of the instantaneous velocity on `z`.
    pub fn velocity_coeff(&self, t: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        (1.0 + self.coeff_perturbation) * (t - (1.0 - t) * s2) / self.marginal_var(t)
    }

    fn check_rows(&self, z: &RealArray, times: &[&[f64]], c: &RealArray) -> Result<()> {
        if z.cols() != self.dim {
            return Err(Error::Shape(format!("oracle expects dim {}", self.dim)));
        }
        if c.rows() != z.rows() || c.cols() != self.cond_dim {
            return Err(Error::Shape("oracle condition shape".into()));
        }
        for ts in times {
            if ts.len() != z.rows() {
                return Err(Error::Shape("oracle time array length".into()));
            }
            if let Some(bad) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
                return Err(Error::Domain(format!("oracle time {bad} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// `E[z1 - x0 | z_t = z, c]`.
    pub fn instantaneous_velocity(&self, z: &RealArray, t: &[f64], c: &RealArray) -> Result<RealArray> {
        self.check_rows(z, &[t], c)?;
        let mut out = Vec::with_capacity(z.rows() * self.dim);
        for i in 0..z.rows() {
            let m = self.mean_for(c.row(i));
            let a = self.velocity_coeff(t[i]);
            for (zj, mj) in z.row(i).iter().zip(&m) {
                out.push(-mj + a * (zj - (1.0 - t[i]) * mj));
            }
        }
        RealArray::new(z.rows(), self.dim, out)
    }

    /// Exact flow map from time `t` to time `r`.
    pub fn transport(&self, z: &RealArray, t: &[f64], r: &[f64], c: &RealArray) -> Result<RealArray> {
        self.check_rows(z, &[t, r], c)?;
        let mut out = Vec::with_capacity(z.rows() * self.dim);
        for i in 0..z.rows() {
            let m = self.mean_for(c.row(i));
            let ratio = (self.marginal_var(r[i]) / self.marginal_var(t[i])).sqrt();
            for (zj, mj) in z.row(i).iter().zip(&m) {
                out.push((1.0 - r[i]) * mj + ratio * (zj - (1.0 - t[i]) * mj));
            }
        }
        RealArray::new(z.rows(), self.dim, out)
    }

    /// Exact average velocity over `[r, t]`; the instantaneous velocity when `r = t`.
    pub fn average_velocity(&self, z: &RealArray, r: &[f64], t: &[f64], c: &RealArray) -> Result<RealArray> {
        self.check_rows(z, &[r, t], c)?;
        if let Some(i) = (0..r.len()).find(|&i| r[i] > t[i]) {
            return Err(Error::Domain(format!("row {i}: r > t")));
        }
        let v = self.instantaneous_velocity(z, t, c)?;
        let zr = self.transport(z, t, r, c)?;
        let mut out = Vec::with_capacity(z.rows() * self.dim);
        for i in 0..z.rows() {
            let h = t[i] - r[i];
            for j in 0..self.dim {
                out.push(if h == 0.0 {
                    v.get(i, j)
                } else {
                    (z.get(i, j) - zr.get(i, j)) / h
                });
            }
        }
        RealArray::new(z.rows(), self.dim, out)
    }

    /// Mean and per-coordinate variance of `q_t` given condition `c`.
    pub fn marginal(&self, t: f64, c: &[f64]) -> Result<(Vec<f64>, f64)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("marginal time {t} outside [0, 1]")));
        }
        let m = self.mean_for(c).into_iter().map(|v| (1.0 - t) * v).collect();
        Ok((m, self.marginal_var(t)))
    }
}

/// Oracle for the circular mixture: posterior-weighted component fields.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureOracle {
    pub means: Vec<[f64; 2]>,
    pub classes: usize,
    pub sigma: f64,
    /// RK4 steps per unit time for average velocities.
    pub steps_per_unit: usize,
}

impl MixtureOracle {
    fn velocity_row(&self, z: [f64; 2], t: f64, class: usize) -> [f64; 2] {
        let s2 = self.sigma * self.sigma;
        let var = (1.0 - t).powi(2) * s2 + t * t;
        let a = (t - (1.0 - t) * s2) / var;
        let mut best = f64::NEG_INFINITY;
        let mut terms = Vec::with_capacity(self.means.len() / self.classes);
        for (k, m) in self.means.iter().enumerate() {
            if k % self.classes != class {
                continue;
            }
            let dx = z[0] - (1.0 - t) * m[0];
            let dy = z[1] - (1.0 - t) * m[1];
            let logw = -(dx * dx + dy * dy) / (2.0 * var);
            best = best.max(logw);
            terms.push((logw, [-m[0] + a * dx, -m[1] + a * dy]));
        }
        let mut wsum = 0.0;
        let mut v = [0.0; 2];
        for (logw, vk) in terms {
            let w = (logw - best).exp();
            wsum += w;
            v[0] += w * vk[0];
            v[1] += w * vk[1];
        }
        [v[0] / wsum, v[1] / wsum]
    }

    fn class(&self, c: &[f64]) -> usize {
        c.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(j, _)| j)
            .unwrap_or(0)
    }

    pub fn instantaneous_velocity(&self, z: &RealArray, t: &[f64], c: &RealArray) -> Result<RealArray> {
        if z.cols() != 2 || c.cols() != self.classes || c.rows() != z.rows() || t.len() != z.rows() {
            return Err(Error::Shape("mixture oracle input shapes".into()));
        }
        let mut out = Vec::with_capacity(z.rows() * 2);
        for i in 0..z.rows() {
            let v = self.velocity_row([z.get(i, 0), z.get(i, 1)], t[i], self.class(c.row(i)));
            out.extend(v);
        }
        RealArray::new(z.rows(), 2, out)
    }

    /// RK4 integration of the oracle ODE from `t` down to `r`.
    pub fn transport(&self, z: &RealArray, t: &[f64], r: &[f64], c: &RealArray) -> Result<RealArray> {
        if z.cols() != 2 || c.rows() != z.rows() || t.len() != z.rows() || r.len() != z.rows() {
            return Err(Error::Shape("mixture oracle input shapes".into()));
        }
        let mut out = Vec::with_capacity(z.rows() * 2);
        for i in 0..z.rows() {
            let class = self.class(c.row(i));
            let span = r[i] - t[i];
            let steps = ((span.abs() * self.steps_per_unit as f64).ceil() as usize).max(1);
            let h = span / steps as f64;
            let mut y = [z.get(i, 0), z.get(i, 1)];
            let mut s = t[i];
            let f = |y: [f64; 2], s: f64| self.velocity_row(y, s, class);
            for _ in 0..steps {
                let k1 = f(y, s);
                let k2 = f([y[0] + 0.5 * h * k1[0], y[1] + 0.5 * h * k1[1]], s + 0.5 * h);
                let k3 = f([y[0] + 0.5 * h * k2[0], y[1] + 0.5 * h * k2[1]], s + 0.5 * h);
                let k4 = f([y[0] + h * k3[0], y[1] + h * k3[1]], s + h);
                for q in 0..2 {
                    y[q] += h / 6.0 * (k1[q] + 2.0 * k2[q] + 2.0 * k3[q] + k4[q]);
                }
                s += h;
            }
            out.extend(y);
        }
        RealArray::new(z.rows(), 2, out)
    }

    pub fn average_velocity(&self, z: &RealArray, r: &[f64], t: &[f64], c: &RealArray) -> Result<RealArray> {
        let v = self.instantaneous_velocity(z, t, c)?;
        let zr = self.transport(z, t, r, c)?;
        let mut out = Vec::with_capacity(z.rows() * 2);
        for i in 0..z.rows() {
            let h = t[i] - r[i];
            if h < 0.0 {
                return Err(Error::Domain(format!("row {i}: r > t")));
            }
            for j in 0..2 {
                out.push(if h == 0.0 {
                    v.get(i, j)
                } else {
                    (z.get(i, j) - zr.get(i, j)) / h
                });
            }
        }
        RealArray::new(z.rows(), 2, out)
    }
}

/// Oracle velocity fields for tasks that have them.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskOracle {
    Gaussian(GaussianOracle),
    Mixture(MixtureOracle),
}

impl TaskOracle {
    pub fn instantaneous_velocity(&self, z: &RealArray, t: &[f64], c: &RealArray) -> Result<RealArray> {
        match self {
            TaskOracle::Gaussian(g) => g.instantaneous_velocity(z, t, c),
            TaskOracle::Mixture(m) => m.instantaneous_velocity(z, t, c),
        }
    }

    pub fn average_velocity(&self, z: &RealArray, r: &[f64], t: &[f64], c: &RealArray) -> Result<RealArray> {
        match self {
            TaskOracle::Gaussian(g) => g.average_velocity(z, r, t, c),
            TaskOracle::Mixture(m) => m.average_velocity(z, r, t, c),
        }
    }

    pub fn transport(&self, z: &RealArray, t: &[f64], r: &[f64], c: &RealArray) -> Result<RealArray> {
        match self {
            TaskOracle::Gaussian(g) => g.transport(z, t, r, c),
            TaskOracle::Mixture(m) => m.transport(z, t, r, c),
        }
    }
}

impl VelocityField for GaussianOracle {
    fn dim(&self) -> usize {
        self.dim
    }

    fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    fn eval(&self, z: &RealArray, r: &[f64], t: &[f64], c: &RealArray) -> Result<RealArray> {
        self.average_velocity(z, r, t, c)
    }
}

impl VelocityField for TaskOracle {
    fn dim(&self) -> usize {
        match self {
            TaskOracle::Gaussian(g) => g.dim,
            TaskOracle::Mixture(_) => 2,
        }
    }

    fn cond_dim(&self) -> usize {
        match self {
            TaskOracle::Gaussian(g) => g.cond_dim,
            TaskOracle::Mixture(m) => m.classes,
        }
    }

    fn eval(&self, z: &RealArray, r: &[f64], t: &[f64], c: &RealArray) -> Result<RealArray> {
        self.average_velocity(z, r, t, c)
    }
}

/// Writes a dataset as CSV with header `c_0..c_{k-1},x_0..x_{d-1}`.
/// Writes `c_*, x_*` columns under a `# ...` comment line carrying `comment`.
pub fn write_dataset(path: &Path, batch: &TaskBatch, comment: &str) -> Result<()> {
    let mut s = format!("# {comment}\n");
    let header: Vec<String> = (0..batch.c.cols())
        .map(|j| format!("c_{j}"))
        .chain((0..batch.x0.cols()).map(|j| format!("x_{j}")))
        .collect();
    s.push_str(&header.join(","));
    s.push('\n');
    for i in 0..batch.x0.rows() {
        let row: Vec<String> = batch
            .c
            .row(i)
            .iter()
            .chain(batch.x0.row(i))
            .map(|v| v.to_string())
            .collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(path: &Path) -> Result<TaskBatch> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty dataset file".into()))?;
    let names: Vec<&str> = header.split(',').collect();
    let k = names.iter().filter(|h| h.starts_with("c_")).count();
    let d = names.iter().filter(|h| h.starts_with("x_")).count();
    if k + d != names.len() || k == 0 || d == 0 {
        return Err(Error::Parse(format!("unexpected dataset header '{header}'")));
    }
    let mut c = Vec::new();
    let mut x = Vec::new();
    let mut rows = 0;
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("line {}: {e}", ln + 2)))?;
        if vals.len() != k + d {
            return Err(Error::Parse(format!("line {}: expected {} fields", ln + 2, k + d)));
        }
        c.extend_from_slice(&vals[..k]);
        x.extend_from_slice(&vals[k..]);
        rows += 1;
    }
    Ok(TaskBatch {
        x0: RealArray::new(rows, d, x)?,
        c: RealArray::new(rows, k, c)?,
        components: None,
    })
}
