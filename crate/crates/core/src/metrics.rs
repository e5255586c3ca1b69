//! Two-sample quality metrics, validation losses, and the diagnostics used to
//! study off-trajectory error: a finite-difference Lipschitz estimate, a
//! Gaussian moment-fit shift proxy, and a per-step error-recursion audit.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flowcore::{self, mse, PathBatch, TimePair};
use crate::net::{NetworkParams, VelocityField};
use crate::numkit::{gauss, mean_var, median, RealArray, RngState};
use crate::samplers::{sample, SamplerSpec};
use crate::tasks::{GaussianOracle, TaskSpec};

fn check_pair(a: &RealArray, b: &RealArray) -> Result<()> {
    if a.rows() < 2 || b.rows() < 2 {
        return Err(Error::Domain(format!(
            "two-sample metrics need at least 2 rows per side, got {} and {}",
            a.rows(),
            b.rows()
        )));
    }
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!("{} vs {} columns", a.cols(), b.cols())));
    }
    Ok(())
}

/// Orders the pair canonically so cross sums do not depend on argument order.
fn canonical<'a>(a: &'a RealArray, b: &'a RealArray) -> (&'a RealArray, &'a RealArray) {
    let ord = a
        .rows()
        .cmp(&b.rows())
        .then_with(|| {
            a.as_slice()
                .iter()
                .zip(b.as_slice())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
        });
    if ord == Ordering::Greater {
        (b, a)
    } else {
        (a, b)
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean of `f(a_i, b_j)` over all pairs, summed in row-major order.
fn pair_mean(a: &RealArray, b: &RealArray, f: impl Fn(&[f64], &[f64]) -> f64) -> f64 {
    let mut total = 0.0;
    for x in a.iter_rows() {
        let mut row = 0.0;
        for y in b.iter_rows() {
            row += f(x, y);
        }
        total += row;
    }
    total / (a.rows() * b.rows()) as f64
}

/// V-statistic energy distance `2 E|a-b| - E|a-a'| - E|b-b'|`.
pub fn energy_distance(a: &RealArray, b: &RealArray) -> Result<f64> {
    check_pair(a, b)?;
    let (a, b) = canonical(a, b);
    let cross = pair_mean(a, b, dist);
    let within = pair_mean(a, a, dist) + pair_mean(b, b, dist);
    Ok(2.0 * cross - within)
}

/// Biased MMD^2 with kernel `exp(-|x-y|^2 / (2 h^2))`.
pub fn mmd_rbf(a: &RealArray, b: &RealArray, bandwidth: f64) -> Result<f64> {
    check_pair(a, b)?;
    if !(bandwidth > 0.0) {
        return Err(Error::Domain(format!("bandwidth {bandwidth} must be positive")));
    }
    let (a, b) = canonical(a, b);
    let g = 1.0 / (2.0 * bandwidth * bandwidth);
    let k = |x: &[f64], y: &[f64]| {
        let d2: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
        (-g * d2).exp()
    };
    let within = pair_mean(a, a, k) + pair_mean(b, b, k);
    Ok(within - 2.0 * pair_mean(a, b, k))
}

/// Median pairwise distance of the pooled sample (first 500 rows of each side).
pub fn median_bandwidth(a: &RealArray, b: &RealArray) -> Result<f64> {
    check_pair(a, b)?;
    let take = |m: &RealArray| m.select_rows(&(0..m.rows().min(500)).collect::<Vec<_>>());
    let pooled = take(a).vcat(&take(b))?;
    let mut d = Vec::with_capacity(pooled.rows() * (pooled.rows() - 1) / 2);
    for i in 0..pooled.rows() {
        for j in i + 1..pooled.rows() {
            d.push(dist(pooled.row(i), pooled.row(j)));
        }
    }
    let h = median(&d);
    if h > 0.0 {
        Ok(h)
    } else {
        Err(Error::Domain("all pooled points coincide".into()))
    }
}

/// Network mode a validation set probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// `r = t`: the network is an instantaneous-velocity regressor.
    Reflow,
    /// `r < t`: the network is an average-velocity regressor.
    Meanflow,
}

/// A fixed held-out batch with mode-appropriate time pairs and, when the task
/// has an oracle, the exact regression target at every point.
#[derive(Debug, Clone)]
pub struct Heldout {
    pub mode: LossMode,
    pub batch: PathBatch,
    pub oracle_target: Option<RealArray>,
}

impl Heldout {
    pub fn build(task: &TaskSpec, mode: LossMode, n: usize, rng: &mut RngState) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("empty held-out set".into()));
        }
        let data = task.draw(rng, n)?;
        let z1 = gauss(rng, n, task.dim());
        let times: Vec<TimePair> = (0..n)
            .map(|_| match mode {
                LossMode::Reflow => {
                    let t = rng.uniform();
                    TimePair { r: t, t }
                }
                LossMode::Meanflow => loop {
                    let (a, b) = (rng.uniform(), rng.uniform());
                    if a != b {
                        break TimePair {
                            r: a.min(b),
                            t: a.max(b),
                        };
                    }
                },
            })
            .collect();
        let batch = PathBatch::new(data.x0, z1, data.c, &times)?;
        let oracle_target = match task.oracle() {
            Some(o) => Some(o.average_velocity(&batch.z_t, &batch.r, &batch.t, &batch.c)?),
            None => None,
        };
        Ok(Self {
            mode,
            batch,
            oracle_target,
        })
    }
}

/// Mean squared residual against the training target; no parameter update.
pub fn validation_loss(params: &NetworkParams, heldout: &Heldout) -> Result<f64> {
    flowcore::batch_loss(params, &heldout.batch)
}

/// Mean squared distance to the exact velocity, or `None` without an oracle.
pub fn oracle_validation_loss(params: &NetworkParams, heldout: &Heldout) -> Result<Option<f64>> {
    let Some(target) = &heldout.oracle_target else {
        return Ok(None);
    };
    let b = &heldout.batch;
    let u = params.eval(&b.z_t, &b.r, &b.t, &b.c)?;
    mse(&u, target).map(Some)
}

/// Largest observed `|u(z + eps w, t, t, c) - u(z, t, t, c)| / eps` over
/// probes and random unit directions `w`.
pub fn lipschitz_estimate<F: VelocityField>(
    field: &F,
    probes: &RealArray,
    t: f64,
    c: &RealArray,
    eps: f64,
    directions: usize,
    rng: &mut RngState,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("eps {eps} must be positive")));
    }
    if directions == 0 || probes.rows() == 0 {
        return Err(Error::Domain("need at least one probe and direction".into()));
    }
    let (n, d) = probes.shape();
    let base = field.eval(probes, &vec![t; n], &vec![t; n], c)?;
    let mut moved = Vec::with_capacity(n * directions * d);
    let mut conds = Vec::with_capacity(n * directions * c.cols());
    for i in 0..n {
        for _ in 0..directions {
            let w: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            moved.extend(probes.row(i).iter().zip(&w).map(|(z, wj)| z + eps * wj / norm));
            conds.extend_from_slice(c.row(i));
        }
    }
    let m = n * directions;
    let moved = RealArray::new(m, d, moved)?;
    let conds = RealArray::new(m, c.cols(), conds)?;
    let out = field.eval(&moved, &vec![t; m], &vec![t; m], &conds)?;
    let mut best: f64 = 0.0;
    for i in 0..n {
        for k in 0..directions {
            best = best.max(dist(out.row(i * directions + k), base.row(i)) / eps);
        }
    }
    Ok(best)
}

/// Fraction of probes for which `|u(z, t - eps, t) - u(z, t, t)|` strictly
/// decreases along the given (decreasing) `eps` sequence. Probes need
/// `t >= max(eps)`.
pub fn limit_identity_fraction<F: VelocityField>(
    field: &F,
    z: &RealArray,
    t: &[f64],
    c: &RealArray,
    eps: &[f64],
) -> Result<f64> {
    if eps.len() < 2 || eps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Domain("eps must be a decreasing sequence of length >= 2".into()));
    }
    let n = z.rows();
    if n == 0 || t.len() != n {
        return Err(Error::Shape("probe times must match probe rows".into()));
    }
    if t.iter().any(|&ti| ti < eps[0] || ti > 1.0) {
        return Err(Error::Domain("probe times must lie in [max eps, 1]".into()));
    }
    let at_t = field.eval(z, t, t, c)?;
    let gaps: Vec<Vec<f64>> = eps
        .iter()
        .map(|e| {
            let r: Vec<f64> = t.iter().map(|ti| ti - e).collect();
            Ok(field.eval(z, &r, t, c)?.lincomb(1.0, &at_t, -1.0)?.row_norms())
        })
        .collect::<Result<_>>()?;
    let ok = (0..n)
        .filter(|&i| gaps.windows(2).all(|w| w[1][i] < w[0][i]))
        .count();
    Ok(ok as f64 / n as f64)
}

/// `KL(N(m1, diag v1) || N(m2, diag v2))`.
pub fn gaussian_kl(m1: &[f64], v1: &[f64], m2: &[f64], v2: &[f64]) -> Result<f64> {
    let d = m1.len();
    if v1.len() != d || m2.len() != d || v2.len() != d {
        return Err(Error::Shape("moment vectors differ in length".into()));
    }
    if v1.iter().chain(v2).any(|v| !(*v > 0.0)) {
        return Err(Error::Domain("variances must be positive".into()));
    }
    let mut kl = 0.0;
    for j in 0..d {
        let ratio = v1[j] / v2[j];
        kl += ratio + (m1[j] - m2[j]).powi(2) / v2[j] - 1.0 - ratio.ln();
    }
    Ok(0.5 * kl.max(0.0))
}

/// Moment-fit KL between a sampler state and the training marginal at its time.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftEstimate {
    pub step: usize,
    pub label: String,
    pub time: f64,
    pub kl: f64,
}

/// Standardizes states by the conditional marginal at `t` and returns the KL
/// of their diagonal-Gaussian fit from `N(0, I)`.
pub fn marginal_shift(oracle: &GaussianOracle, z: &RealArray, t: f64, c: &RealArray) -> Result<f64> {
    let s = oracle.marginal_var(t).sqrt();
    let mut xi = Vec::with_capacity(z.rows() * z.cols());
    for i in 0..z.rows() {
        let (m, _) = oracle.marginal(t, c.row(i))?;
        xi.extend(z.row(i).iter().zip(&m).map(|(zj, mj)| (zj - mj) / s));
    }
    let xi = RealArray::new(z.rows(), z.cols(), xi)?;
    let (m, v) = mean_var(&xi)?;
    let d = z.cols();
    gaussian_kl(&m, &v, &vec![0.0; d], &vec![1.0; d])
}

/// Runs `spec` from fresh noise and reports the shift of every recorded state,
/// starting with the noise itself at step 0.
pub fn shift_audit<F: VelocityField>(
    field: &F,
    spec: &SamplerSpec,
    task: &TaskSpec,
    n: usize,
    rng: &mut RngState,
) -> Result<Vec<ShiftEstimate>> {
    let oracle = task.gaussian_oracle()?;
    let data = task.draw(rng, n)?;
    let z1 = gauss(rng, n, task.dim());
    let (_, trace) = sample(field, &z1, &data.c, spec, rng)?;
    let mut out = vec![ShiftEstimate {
        step: 0,
        label: "noise".into(),
        time: 1.0,
        kl: marginal_shift(&oracle, &z1, 1.0, &data.c)?,
    }];
    for (k, st) in trace.stages.iter().enumerate() {
        out.push(ShiftEstimate {
            step: k + 1,
            label: st.label.clone(),
            time: st.time,
            kl: marginal_shift(&oracle, &st.state, st.time, &data.c)?,
        });
    }
    Ok(out)
}

/// One step of the error-recursion audit.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub step: usize,
    /// Mean one-step displacement error at the visited state.
    pub mean_error: f64,
    /// Mean distance to the exact trajectory after the step.
    pub mean_deviation: f64,
    /// Lipschitz constant of the exact one-step map, `1 + L`.
    pub stretch: f64,
    /// Fraction of trajectories satisfying the recursion bound at this step.
    pub holds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorAudit {
    pub rows: Vec<AuditRow>,
    /// Fraction of trajectories satisfying the bound at every step.
    pub trajectory_fraction: f64,
}

/// Multi-step average-velocity sampling alongside the exact trajectory from
/// the same noise.
///
/// With `e_k = h (u(z_k) - u*(z_k))` measured at the visited state and the
/// exact step map `Phi_k`, `z_{k+1} - z*_{k+1} = Phi_k(z_k) - Phi_k(z*_k) - e_k`,
/// so `dev_{k+1} <= (1 + L) dev_k + |e_k|` where `1 + L` is the stretch of
/// `Phi_k`. For the Gaussian oracle that stretch is `S_{t_{k+1}} / S_{t_k}`.
pub fn error_accumulation_audit<F: VelocityField>(
    field: &F,
    task: &TaskSpec,
    steps: usize,
    n: usize,
    rng: &mut RngState,
) -> Result<ErrorAudit> {
    if steps == 0 || n == 0 {
        return Err(Error::Domain("audit needs steps >= 1 and n >= 1".into()));
    }
    let oracle = task.gaussian_oracle()?;
    let data = task.draw(rng, n)?;
    let c = data.c;
    let mut z = gauss(rng, n, task.dim());
    let mut z_star = z.clone();
    let mut dev = vec![0.0; n];
    let mut ok_all = vec![true; n];
    let mut rows = Vec::with_capacity(steps);
    for k in 0..steps {
        let t_hi = (steps - k) as f64 / steps as f64;
        let t_lo = (steps - k - 1) as f64 / steps as f64;
        let h = t_hi - t_lo;
        let (r, t) = (vec![t_lo; n], vec![t_hi; n]);
        let u = field.eval(&z, &r, &t, &c)?;
        let u_exact = oracle.average_velocity(&z, &r, &t, &c)?;
        let err = u.lincomb(h, &u_exact, -h)?.row_norms();
        let next = z.lincomb(1.0, &u, -h)?;
        let u_on = oracle.average_velocity(&z_star, &r, &t, &c)?;
        z_star = z_star.lincomb(1.0, &u_on, -h)?;
        let new_dev = next.lincomb(1.0, &z_star, -1.0)?.row_norms();
        let stretch = (oracle.marginal_var(t_lo) / oracle.marginal_var(t_hi)).sqrt();
        let mut holds = 0usize;
        for i in 0..n {
            let bound = stretch * dev[i] + err[i];
            let ok = new_dev[i] <= bound + 1e-12 * (1.0 + bound);
            holds += ok as usize;
            ok_all[i] &= ok;
        }
        rows.push(AuditRow {
            step: k,
            mean_error: err.iter().sum::<f64>() / n as f64,
            mean_deviation: new_dev.iter().sum::<f64>() / n as f64,
            stretch,
            holds: holds as f64 / n as f64,
        });
        z = next;
        dev = new_dev;
    }
    Ok(ErrorAudit {
        rows,
        trajectory_fraction: ok_all.iter().filter(|b| **b).count() as f64 / n as f64,
    })
}

/// One row of a metric report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricEntry {
    pub metric: String,
    pub value: f64,
    pub task: String,
    pub sampler: String,
    pub k: Option<usize>,
    pub alpha: Option<f64>,
    pub seed: u64,
    pub n: usize,
}

pub const REPORT_SCHEMA: &str = "hybridflow-metrics/1";
const REPORT_COLUMNS: &str = "metric,value,task,sampler,K,alpha,seed,n";

/// Flat metric table tagged with the producing configuration.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub config_hash: String,
    pub seed: u64,
    pub entries: Vec<MetricEntry>,
}

impl MetricReport {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, entry: MetricEntry) -> Result<()> {
        if !entry.value.is_finite() {
            return Err(Error::NonFinite(format!("metric {} = {}", entry.metric, entry.value)));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn get(&self, metric: &str, sampler: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.metric == metric && e.sampler == sampler)
            .map(|e| e.value)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# {REPORT_SCHEMA} config_hash={} seed={}\n{REPORT_COLUMNS}\n",
            self.config_hash, self.seed
        );
        for e in &self.entries {
            let k = e.k.map(|v| v.to_string()).unwrap_or_default();
            let a = e.alpha.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                e.metric, e.value, e.task, e.sampler, k, a, e.seed, e.n
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let head = lines.next().unwrap_or_default();
        let meta = head
            .strip_prefix("# ")
            .and_then(|h| h.strip_prefix(REPORT_SCHEMA))
            .ok_or_else(|| Error::Parse(format!("missing report header, found '{head}'")))?;
        let mut report = MetricReport::default();
        for kv in meta.split_whitespace() {
            match kv.split_once('=') {
                Some(("config_hash", v)) => report.config_hash = v.to_string(),
                Some(("seed", v)) => report.seed = v.parse().map_err(|_| Error::Parse(kv.into()))?,
                _ => {}
            }
        }
        if lines.next() != Some(REPORT_COLUMNS) {
            return Err(Error::Parse("unexpected report columns".into()));
        }
        let p = |s: &str| Error::Parse(format!("bad report field '{s}'"));
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(p(line));
            }
            report.entries.push(MetricEntry {
                metric: f[0].into(),
                value: f[1].parse().map_err(|_| p(f[1]))?,
                task: f[2].into(),
                sampler: f[3].into(),
                k: if f[4].is_empty() { None } else { Some(f[4].parse().map_err(|_| p(f[4]))?) },
                alpha: if f[5].is_empty() { None } else { Some(f[5].parse().map_err(|_| p(f[5]))?) },
                seed: f[6].parse().map_err(|_| p(f[6]))?,
                n: f[7].parse().map_err(|_| p(f[7]))?,
            });
        }
        Ok(report)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, Activation, Dense, NetworkArch};
    use crate::numkit::RngState;
    use crate::samplers::SamplerSpec;

    fn normal(seed: u64, n: usize, shift: f64) -> RealArray {
        gauss(&mut RngState::new(seed), n, 1).map(|v| v + shift)
    }

    #[test]
    fn energy_distance_hand_values() {
        let a = RealArray::from_rows(&[vec![0.0], vec![0.0]]).unwrap();
        let b = RealArray::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(energy_distance(&a, &b).unwrap(), 2.0);
        assert_eq!(energy_distance(&a, &a).unwrap(), 0.0);
        let one = RealArray::from_rows(&[vec![0.0]]).unwrap();
        assert!(matches!(energy_distance(&one, &a), Err(Error::Domain(_))));
    }

    #[test]
    fn energy_distance_is_symmetric_bitwise() {
        let mut rng = RngState::new(4);
        let a = gauss(&mut rng, 37, 3);
        let b = gauss(&mut rng, 51, 3).map(|v| 0.7 * v + 0.2);
        assert_eq!(energy_distance(&a, &b).unwrap(), energy_distance(&b, &a).unwrap());
        assert_eq!(mmd_rbf(&a, &b, 0.8).unwrap(), mmd_rbf(&b, &a, 0.8).unwrap());
    }

    #[test]
    fn energy_distance_separates_shifted_normals() {
        let mut wins = 0;
        for s in 0..20 {
            let base = normal(100 + s, 1000, 0.0);
            let same = energy_distance(&base, &normal(200 + s, 1000, 0.0)).unwrap();
            let far = energy_distance(&base, &normal(300 + s, 1000, 3.0)).unwrap();
            wins += (far > same) as usize;
        }
        assert_eq!(wins, 20);
    }

    #[test]
    fn mmd_properties() {
        let a = normal(1, 300, 0.0);
        assert!(mmd_rbf(&a, &a, 1.0).unwrap().abs() <= 1e-12);
        let b = normal(2, 300, 1.0);
        assert!(mmd_rbf(&a, &b, 1e6).unwrap() < 1e-9);
        assert!(matches!(mmd_rbf(&a, &b, 0.0), Err(Error::Domain(_))));
        let h = median_bandwidth(&a, &b).unwrap();
        let mut wins = 0;
        for s in 0..20 {
            let x = normal(10 + s, 300, 0.0);
            let same = mmd_rbf(&x, &normal(40 + s, 300, 0.0), h).unwrap();
            let far = mmd_rbf(&x, &normal(70 + s, 300, 1.0), h).unwrap();
            wins += (far > same) as usize;
        }
        assert_eq!(wins, 20);
    }

    #[test]
    fn reflow_validation_equals_training_loss_on_degenerate_batch() {
        let task = TaskSpec::default_gauss();
        let p = init_params(&NetworkArch::mlp(2, 2, vec![16]), &mut RngState::new(1)).unwrap();
        let held = Heldout::build(&task, LossMode::Reflow, 64, &mut RngState::new(2)).unwrap();
        assert!(held.batch.times().iter().all(TimePair::is_degenerate));
        let train = flowcore::loss_and_grads(&p, &held.batch).unwrap().loss;
        assert_eq!(validation_loss(&p, &held).unwrap(), train);
        let mf = Heldout::build(&task, LossMode::Meanflow, 64, &mut RngState::new(2)).unwrap();
        assert!(mf.batch.times().iter().all(|p| p.r < p.t));
    }

    #[test]
    fn zero_network_loss_is_velocity_second_moment() {
        // E|z1 - x0|^2 / d = 1 + E[x0^2] per coordinate.
        let task = TaskSpec::CondGauss {
            dim: 2,
            cond_dim: 1,
            mean: vec![0.0, 0.0],
            cond_scale: 0.0,
            sigma: 0.5,
        };
        let p = NetworkParams::zeros(&NetworkArch::mlp(2, 1, vec![4])).unwrap();
        let held = Heldout::build(&task, LossMode::Reflow, 20_000, &mut RngState::new(3)).unwrap();
        let loss = validation_loss(&p, &held).unwrap();
        assert!((loss - 1.25).abs() < 0.03, "{loss}");
        // The oracle target is much smaller in magnitude than the path target.
        let ol = oracle_validation_loss(&p, &held).unwrap().unwrap();
        assert!(ol < loss);
    }

    #[test]
    fn spline_task_has_no_oracle_loss() {
        let task = TaskSpec::default_spline();
        let arch = NetworkArch::mlp(task.dim(), task.cond_dim(), vec![8]);
        let p = NetworkParams::zeros(&arch).unwrap();
        let held = Heldout::build(&task, LossMode::Meanflow, 8, &mut RngState::new(3)).unwrap();
        assert_eq!(oracle_validation_loss(&p, &held).unwrap(), None);
    }

    #[test]
    fn lipschitz_of_zero_and_linear_networks() {
        let mut rng = RngState::new(5);
        let probes = gauss(&mut rng, 4, 3);
        let c = RealArray::zeros(4, 1);
        let arch = NetworkArch {
            activation: Activation::Identity,
            ..NetworkArch::mlp(3, 1, vec![3])
        };
        let zero = NetworkParams::zeros(&arch).unwrap();
        assert_eq!(lipschitz_estimate(&zero, &probes, 0.3, &c, 1e-3, 64, &mut rng).unwrap(), 0.0);

        // Hidden layer copies z, output layer applies diag(3, 1, 0.5).
        let fan_in = arch.feature_dim();
        let mut w1 = vec![0.0; 3 * fan_in];
        let mut w2 = vec![0.0; 9];
        for (j, s) in [3.0, 1.0, 0.5].into_iter().enumerate() {
            w1[j * fan_in + j] = 1.0;
            w2[j * 3 + j] = s;
        }
        let dense = |fan_in, weight| Dense {
            fan_in,
            fan_out: 3,
            weight,
            bias: vec![0.0; 3],
        };
        let lin = NetworkParams::from_layers(arch, vec![dense(fan_in, w1), dense(3, w2)]).unwrap();
        let l = lipschitz_estimate(&lin, &probes, 0.3, &c, 1e-3, 256, &mut rng).unwrap();
        assert!(l <= 3.0 + 1e-9 && l >= 2.7, "{l}");
    }

    #[test]
    fn limit_identity_on_smooth_and_constant_fields() {
        let task = TaskSpec::default_gauss();
        let oracle = task.gaussian_oracle().unwrap();
        let n = 200;
        let mut rng = RngState::new(12);
        let b = PathBatch::draw(&task, &mut rng, n, &Default::default()).unwrap();
        let t: Vec<f64> = b.t.iter().map(|t| 0.05 + 0.95 * t).collect();
        let eps = [1e-2, 1e-3, 1e-4];
        let f = limit_identity_fraction(&oracle, &b.z_t, &t, &b.c, &eps).unwrap();
        assert!(f >= 0.99, "{f}");
        let zero = NetworkParams::zeros(&NetworkArch::mlp(2, 2, vec![4])).unwrap();
        assert_eq!(limit_identity_fraction(&zero, &b.z_t, &t, &b.c, &eps).unwrap(), 0.0);
        assert!(limit_identity_fraction(&zero, &b.z_t, &t, &b.c, &[1e-3, 1e-2]).is_err());
    }

    #[test]
    fn kl_proxy_properties() {
        assert_eq!(gaussian_kl(&[0.0, 1.0], &[1.0, 2.0], &[0.0, 1.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(gaussian_kl(&[0.1], &[1.0], &[0.0], &[1.0]).unwrap() > 0.0);
        assert!(gaussian_kl(&[0.0], &[1.1], &[0.0], &[1.0]).unwrap() > 0.0);
        // KL(N(1, 1) || N(0, 1)) = 1/2.
        assert!((gaussian_kl(&[1.0], &[1.0], &[0.0], &[1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(gaussian_kl(&[0.0], &[0.0], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn oracle_euler_has_no_shift() {
        let task = TaskSpec::default_gauss();
        let oracle = task.gaussian_oracle().unwrap();
        let shifts =
            shift_audit(&oracle, &SamplerSpec::euler(64), &task, 10_000, &mut RngState::new(6)).unwrap();
        assert_eq!(shifts.len(), 65);
        assert!(shifts[0].kl <= 0.01);
        for s in &shifts {
            assert!(s.kl <= 0.01, "{s:?}");
        }
    }

    #[test]
    fn shift_audit_rejects_non_gaussian_task() {
        let task = TaskSpec::default_gmm();
        let arch = NetworkArch::mlp(2, task.cond_dim(), vec![4]);
        let p = NetworkParams::zeros(&arch).unwrap();
        let r = shift_audit(&p, &SamplerSpec::euler(2), &task, 10, &mut RngState::new(0));
        assert!(matches!(r, Err(Error::Unsupported(_))));
    }

    #[test]
    fn oracle_field_audit_is_error_free() {
        let task = TaskSpec::default_gauss();
        let oracle = task.gaussian_oracle().unwrap();
        let audit = error_accumulation_audit(&oracle, &task, 8, 200, &mut RngState::new(7)).unwrap();
        for row in &audit.rows {
            assert!(row.mean_error <= 1e-6 && row.mean_deviation <= 1e-5, "{row:?}");
        }
        assert_eq!(audit.trajectory_fraction, 1.0);
    }

    #[test]
    fn single_step_audit_deviation_is_the_error() {
        let task = TaskSpec::default_gauss();
        let p = init_params(&NetworkArch::mlp(2, 2, vec![8]), &mut RngState::new(8)).unwrap();
        let audit = error_accumulation_audit(&p, &task, 1, 100, &mut RngState::new(9)).unwrap();
        assert_eq!(audit.rows.len(), 1);
        let row = &audit.rows[0];
        assert!((row.mean_deviation - row.mean_error).abs() <= 1e-12 * row.mean_error.max(1.0));
        assert_eq!(audit.trajectory_fraction, 1.0);
    }

    #[test]
    fn report_round_trip() {
        let mut r = MetricReport::new("abc123", 7);
        r.push(MetricEntry {
            metric: "energy_distance".into(),
            value: 0.012345678901234,
            task: "cond_gmm2d".into(),
            sampler: SamplerSpec::hybridflow(0.15).label(),
            k: None,
            alpha: Some(0.15),
            seed: 7,
            n: 2000,
        })
        .unwrap();
        r.push(MetricEntry {
            metric: "nfe".into(),
            value: 16.0,
            task: "cond_gmm2d".into(),
            sampler: "euler_reflow_k16".into(),
            k: Some(16),
            alpha: None,
            seed: 7,
            n: 2000,
        })
        .unwrap();
        let text = r.to_csv();
        assert!(text.starts_with("# hybridflow-metrics/1 config_hash=abc123 seed=7\n"));
        assert_eq!(MetricReport::from_csv(&text).unwrap(), r);
        let mut bad = r.clone();
        assert!(bad
            .push(MetricEntry {
                value: f64::NAN,
                ..r.entries[0].clone()
            })
            .is_err());
    }
}
