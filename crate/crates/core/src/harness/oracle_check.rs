//! Independent numerical cross-checks of the differentiable network and the
//! closed-form oracles.

use std::fmt::Write as _;

use crate::error::Result;
use crate::flowcore::{interpolate, mse};
use crate::metrics::energy_distance;
use crate::net::{self, init_params, Activation, InputTangent, NetworkArch, NetworkParams};
use crate::numkit::{gauss, mean_var, RealArray, RngState};
use crate::samplers::{sample_hybridflow, SamplerSpec};
use crate::tasks::{GaussianOracle, MixtureOracle};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub family: &'static str,
    pub name: String,
    /// Worst observed discrepancy, in the units of `tolerance`.
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OracleReport {
    pub checks: Vec<CheckResult>,
}

impl OracleReport {
    fn add(&mut self, family: &'static str, name: impl Into<String>, value: f64, tolerance: f64) {
        self.checks.push(CheckResult {
            family,
            name: name.into(),
            value,
            tolerance,
            passed: value.is_finite() && value <= tolerance,
        });
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn families(&self) -> Vec<&'static str> {
        let mut f: Vec<_> = self.checks.iter().map(|c| c.family).collect();
        f.dedup();
        f
    }

    pub fn family_passed(&self, family: &str) -> bool {
        self.checks.iter().filter(|c| c.family == family).all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{:<5} {:<22} {:<44} value={:.3e} tol={:.1e}",
                if c.passed { "PASS" } else { "FAIL" },
                c.family,
                c.name,
                c.value,
                c.tolerance
            );
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        let _ = writeln!(
            s,
            "{} checks in {} families, {failed} failed",
            self.checks.len(),
            self.families().len()
        );
        s
    }
}

/// Knobs for sensitivity testing; the default runs the real checks.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OracleCheckOptions {
    /// Relative error injected into the Gaussian velocity coefficient.
    pub coeff_perturbation: f64,
    pub seed: u64,
}

/// Forward-mode JVP and reverse-mode gradients against central differences
/// on `cases` random networks and inputs each.
pub fn finite_difference_checks(seed: u64, cases: usize) -> Result<OracleReport> {
    let mut report = OracleReport::default();
    let mut rng = RngState::with_stream(seed, 21);
    jvp_vs_finite_differences(&mut report, &mut rng, cases)?;
    grad_vs_finite_differences(&mut report, &mut rng, cases)?;
    Ok(report)
}

/// Runs every check family.
pub fn oracle_check(opts: OracleCheckOptions) -> Result<OracleReport> {
    let mut report = finite_difference_checks(opts.seed, 100)?;
    let mut rng = RngState::with_stream(opts.seed, 22);
    let oracle = GaussianOracle {
        coeff_perturbation: opts.coeff_perturbation,
        ..GaussianOracle::isotropic(vec![0.8, -0.4], 0.3)
    };
    velocity_vs_monte_carlo(&mut report, &oracle, &mut rng)?;
    average_vs_fine_euler(&mut report, &oracle, &mut rng)?;
    transport_marginal(&mut report, &oracle, &mut rng)?;
    interpolation_marginal(&mut report, &oracle, &mut rng)?;
    mixture_reduces_to_gaussian(&mut report, &mut rng)?;
    hybrid_affine_composition(&mut report, &oracle, &mut rng)?;
    energy_distance_hand_value(&mut report)?;
    Ok(report)
}

pub(crate) fn random_case(rng: &mut RngState) -> Result<(NetworkParams, RealArray, Vec<f64>, Vec<f64>, RealArray)> {
    let acts = [Activation::Silu, Activation::Softplus, Activation::Tanh];
    let d = 1 + rng.below(4);
    let k = 1 + rng.below(3);
    let hidden: Vec<usize> = (0..1 + rng.below(2)).map(|_| 3 + rng.below(6)).collect();
    let arch = NetworkArch {
        activation: acts[rng.below(acts.len())],
        ..NetworkArch::mlp(d, k, hidden)
    };
    let params = init_params(&arch, rng)?;
    let n = 1 + rng.below(3);
    let z = gauss(rng, n, d);
    let c = gauss(rng, n, k);
    let t: Vec<f64> = (0..n).map(|_| 0.1 + 0.8 * rng.uniform()).collect();
    let r: Vec<f64> = t.iter().map(|t| t * rng.uniform()).collect();
    Ok((params, z, r, t, c))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn jvp_vs_finite_differences(report: &mut OracleReport, rng: &mut RngState, cases: usize) -> Result<()> {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (p, z, r, t, c) = random_case(rng)?;
        let n = z.rows();
        let tan = InputTangent {
            dz: gauss(rng, n, z.cols()),
            dr: rng.normal() * 0.05,
            dt: rng.normal() * 0.05,
        };
        let (_, jvp) = net::forward_jvp(&p, &z, &r, &t, &c, &tan)?;
        let shift = |s: f64| -> Result<RealArray> {
            let zs = z.lincomb(1.0, &tan.dz, s)?;
            let rs: Vec<f64> = r.iter().map(|a| a + s * tan.dr).collect();
            let ts: Vec<f64> = t.iter().map(|a| a + s * tan.dt).collect();
            net::evaluate(&p, &zs, &rs, &ts, &c)
        };
        let fd = shift(h)?.lincomb(0.5 / h, &shift(-h)?, -0.5 / h)?;
        worst = worst.max(rel_err(jvp.as_slice(), fd.as_slice()));
    }
    report.add("jvp_finite_difference", format!("{cases} random networks"), worst, 1e-5);
    Ok(())
}

fn grad_vs_finite_differences(report: &mut OracleReport, rng: &mut RngState, cases: usize) -> Result<()> {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (p, z, r, t, c) = random_case(rng)?;
        let target = gauss(rng, z.rows(), z.cols());
        let (u, trace) = net::forward(&p, &z, &r, &t, &c)?;
        let scale = 2.0 / u.as_slice().len() as f64;
        let grads = net::backward(&p, &trace, &u.lincomb(scale, &target, -scale)?)?;
        let dir: Vec<f64> = (0..p.param_count()).map(|_| rng.normal()).collect();
        let analytic: f64 = grads.flat().iter().zip(&dir).map(|(g, d)| g * d).sum();
        let base = p.flat();
        let loss_at = |s: f64| -> Result<f64> {
            let mut q = p.clone();
            let moved: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| b + s * d).collect();
            q.set_flat(&moved)?;
            mse(&net::evaluate(&q, &z, &r, &t, &c)?, &target)
        };
        let fd = (loss_at(h)? - loss_at(-h)?) / (2.0 * h);
        worst = worst.max(rel_err(&[analytic], &[fd]));
    }
    report.add("gradient_finite_difference", format!("{cases} random networks"), worst, 1e-5);
    Ok(())
}

/// Self-normalized importance estimate of `E[z1 - x0 | z_t = z]`, drawing
/// `x0` from the data law and weighting by the noise density of the implied `z1`.
/// Returns (estimate, standard error) per coordinate.
pub fn monte_carlo_velocity(
    oracle: &GaussianOracle,
    z: &[f64],
    t: f64,
    c: &[f64],
    draws: usize,
    rng: &mut RngState,
) -> (Vec<f64>, Vec<f64>) {
    let mu = oracle.mean_for(c);
    let d = z.len();
    let mut w = Vec::with_capacity(draws);
    let mut v = Vec::with_capacity(draws * d);
    for _ in 0..draws {
        let mut log_w = 0.0;
        for j in 0..d {
            let x0 = mu[j] + oracle.sigma * rng.normal();
            let z1 = (z[j] - (1.0 - t) * x0) / t;
            log_w -= 0.5 * z1 * z1;
            v.push(z1 - x0);
        }
        w.push(log_w);
    }
    let max = w.iter().cloned().fold(f64::MIN, f64::max);
    let w: Vec<f64> = w.iter().map(|l| (l - max).exp()).collect();
    let sw: f64 = w.iter().sum();
    let mut est = vec![0.0; d];
    let mut se = vec![0.0; d];
    for j in 0..d {
        est[j] = (0..draws).map(|i| w[i] * v[i * d + j]).sum::<f64>() / sw;
        let var: f64 = (0..draws)
            .map(|i| (w[i] / sw).powi(2) * (v[i * d + j] - est[j]).powi(2))
            .sum();
        se[j] = var.sqrt();
    }
    (est, se)
}

fn velocity_vs_monte_carlo(report: &mut OracleReport, oracle: &GaussianOracle, rng: &mut RngState) -> Result<()> {
    let c = RealArray::zeros(1, 1);
    let mut worst: f64 = 0.0;
    for &t in &[0.3, 0.5, 0.7, 0.9] {
        let (mean, var) = oracle.marginal(t, c.row(0))?;
        let z: Vec<f64> = mean.iter().map(|m| m + var.sqrt() * rng.normal()).collect();
        let v = oracle.instantaneous_velocity(&RealArray::new(1, z.len(), z.clone())?, &[t], &c)?;
        let (est, se) = monte_carlo_velocity(oracle, &z, t, c.row(0), 400_000, rng);
        for j in 0..z.len() {
            worst = worst.max((v.get(0, j) - est[j]).abs() / se[j]);
        }
    }
    report.add("gaussian_velocity_mc", "closed form vs importance-weighted MC (SE)", worst, 3.0);
    Ok(())
}

/// Backward Euler transport from `t` to `r` in `steps` steps.
fn euler_transport(oracle: &GaussianOracle, z: &RealArray, r: f64, t: f64, steps: usize, c: &RealArray) -> Result<RealArray> {
    let h = (t - r) / steps as f64;
    let mut s = z.clone();
    for k in 0..steps {
        let v = oracle.instantaneous_velocity(&s, &[t - k as f64 * h], c)?;
        s = s.lincomb(1.0, &v, -h)?;
    }
    Ok(s)
}

fn average_vs_fine_euler(report: &mut OracleReport, oracle: &GaussianOracle, rng: &mut RngState) -> Result<()> {
    let steps = 4096;
    let c = RealArray::zeros(1, 1);
    let mut worst: f64 = 0.0;
    for _ in 0..6 {
        let t = 0.2 + 0.8 * rng.uniform();
        let r = t * rng.uniform();
        let z = gauss(rng, 1, oracle.dim);
        let u = oracle.average_velocity(&z, &[r], &[t], &c)?;
        // Euler's first-order error is the same size as the tolerance, so
        // extrapolate it away with a half-resolution run.
        let fine = euler_transport(oracle, &z, r, t, steps, &c)?;
        let coarse = euler_transport(oracle, &z, r, t, steps / 2, &c)?;
        let s = fine.lincomb(2.0, &coarse, -1.0)?;
        let avg = z.lincomb(1.0 / (t - r), &s, -1.0 / (t - r))?;
        worst = worst.max(rel_err(u.as_slice(), avg.as_slice()));
    }
    report.add(
        "gaussian_average_velocity",
        "closed form vs 4096-step Euler transport, extrapolated",
        worst,
        1e-4,
    );
    Ok(())
}

fn transport_marginal(report: &mut OracleReport, oracle: &GaussianOracle, rng: &mut RngState) -> Result<()> {
    let n = 100_000;
    let z1 = gauss(rng, n, oracle.dim);
    let c = RealArray::zeros(n, 1);
    let x = oracle.transport(&z1, &vec![1.0; n], &vec![0.0; n], &c)?;
    let (m, v) = mean_var(&x)?;
    let mut worst: f64 = 0.0;
    for j in 0..oracle.dim {
        worst = worst.max((m[j] - oracle.base_mean[j]).abs() / oracle.base_mean[j].abs());
        worst = worst.max((v[j] / oracle.sigma.powi(2) - 1.0).abs());
    }
    report.add("gaussian_transport", "noise pushed to data marginal (rel.)", worst, 0.02);
    Ok(())
}

fn interpolation_marginal(report: &mut OracleReport, oracle: &GaussianOracle, rng: &mut RngState) -> Result<()> {
    let n = 100_000;
    let mut worst: f64 = 0.0;
    for &t in &[0.1, 0.5, 0.9] {
        let noise = gauss(rng, n, oracle.dim);
        let x0: Vec<f64> = noise
            .iter_rows()
            .flat_map(|row| row.iter().zip(&oracle.base_mean).map(|(e, m)| m + oracle.sigma * e))
            .collect();
        let x0 = RealArray::new(n, oracle.dim, x0)?;
        let zt = interpolate(&x0, &gauss(rng, n, oracle.dim), &vec![t; n])?;
        let (m, v) = mean_var(&zt)?;
        let (em, ev) = oracle.marginal(t, &[0.0])?;
        for j in 0..oracle.dim {
            worst = worst.max((m[j] - em[j]).abs() / ev.sqrt());
            worst = worst.max((v[j] / ev - 1.0).abs());
        }
    }
    report.add("interpolation_marginal", "path samples vs marginal law (rel.)", worst, 0.03);
    Ok(())
}

fn mixture_reduces_to_gaussian(report: &mut OracleReport, rng: &mut RngState) -> Result<()> {
    let (mean, sigma) = ([0.7, -1.2], 0.25);
    let g = GaussianOracle::isotropic(mean.to_vec(), sigma);
    let m = MixtureOracle {
        means: vec![mean],
        classes: 1,
        sigma,
        steps_per_unit: 512,
    };
    let n = 16;
    let z = gauss(rng, n, 2);
    let t: Vec<f64> = (0..n).map(|_| 0.05 + 0.95 * rng.uniform()).collect();
    let r: Vec<f64> = t.iter().map(|t| t * rng.uniform()).collect();
    let (cg, cm) = (RealArray::zeros(n, 1), RealArray::filled(n, 1, 1.0));
    let a = g.average_velocity(&z, &r, &t, &cg)?;
    let b = m.average_velocity(&z, &r, &t, &cm)?;
    report.add("mixture_oracle", "one-component mixture equals Gaussian", a.max_abs_diff(&b), 1e-8);
    Ok(())
}

fn hybrid_affine_composition(report: &mut OracleReport, oracle: &GaussianOracle, rng: &mut RngState) -> Result<()> {
    let n = 64;
    let alpha = 0.15;
    let z1 = gauss(rng, n, oracle.dim);
    let c = RealArray::zeros(n, 1);
    let (x, _) = sample_hybridflow(oracle, &z1, &c, &SamplerSpec::hybridflow(alpha), rng)?;
    // Each stage is affine in z1: coarse = m + s z1 (the exact jump), then
    // renoise and one exact-velocity Euler step over [0, alpha].
    let s = oracle.sigma;
    let a_t = oracle.velocity_coeff(alpha);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..oracle.dim {
            let m = oracle.base_mean[j];
            let coarse = m + s * z1.get(i, j);
            let zr = alpha * z1.get(i, j) + (1.0 - alpha) * coarse;
            let v = -m + a_t * (zr - (1.0 - alpha) * m);
            worst = worst.max((x.get(i, j) - (zr - alpha * v)).abs());
        }
    }
    report.add("hybrid_composition", "sampler vs hand-composed affine stages", worst, 1e-10);
    Ok(())
}

fn energy_distance_hand_value(report: &mut OracleReport) -> Result<()> {
    let a = RealArray::from_rows(&[vec![0.0], vec![0.0]])?;
    let b = RealArray::from_rows(&[vec![1.0], vec![1.0]])?;
    let e = energy_distance(&a, &b)?;
    report.add("energy_distance", "duplicated points at 0 and 1", (e - 2.0).abs(), 0.0);
    Ok(())
}
