//! Plain-Rust state behind the browser bindings, kept free of JS types so it
//! can be tested natively.

use hybridflow::harness::{ExperimentConfig, ModelConfig, Trainer};
use hybridflow::metrics::energy_distance;
use hybridflow::net::VelocityField;
use hybridflow::numkit::{gauss, RealArray, RngState};
use hybridflow::samplers::{sample, SamplerSpec};
use hybridflow::tasks::{TaskOracle, TaskSpec};
use hybridflow::{Error, Result};

pub struct Session {
    trainer: Trainer,
    oracle: TaskOracle,
    task: TaskSpec,
}

/// Sampler output: every recorded stage, stage-major, each `n x 2`.
pub struct Trajectory {
    pub labels: Vec<String>,
    pub states: Vec<f64>,
    pub n: usize,
    pub nfe: usize,
    pub energy_distance: f64,
}

impl Session {
    pub fn new(seed: u64, width: usize, total_steps: usize) -> Result<Self> {
        let task = TaskSpec::default_gmm();
        let config = ExperimentConfig {
            task: task.clone(),
            model: ModelConfig {
                hidden: vec![width, width],
                ..Default::default()
            },
            steps: total_steps,
            batch_size: 128,
            eval_size: 256,
            seed,
            ..Default::default()
        };
        let oracle = task.oracle().ok_or_else(|| Error::Unsupported("task has no oracle".into()))?;
        Ok(Self {
            trainer: Trainer::new(config)?,
            oracle,
            task,
        })
    }

    pub fn classes(&self) -> usize {
        self.task.cond_dim()
    }

    pub fn step(&self) -> usize {
        self.trainer.step()
    }

    pub fn total_steps(&self) -> usize {
        self.trainer.config.steps
    }

    /// Up to `steps` optimizer steps; returns their mean loss (NaN if none ran).
    pub fn train(&mut self, steps: usize) -> Result<f64> {
        let (mut acc, mut k) = (0.0, 0);
        while k < steps && !self.trainer.is_done() {
            acc += self.trainer.step_once()?;
            k += 1;
        }
        Ok(if k == 0 { f64::NAN } else { acc / k as f64 })
    }

    /// `[reflow mode, meanflow mode]` validation losses.
    pub fn validation(&self) -> Result<[f64; 2]> {
        let v = self.trainer.validation()?;
        Ok([v.reflow, v.meanflow])
    }

    fn one_hot(&self, class: usize, n: usize) -> Result<RealArray> {
        let k = self.classes();
        if class >= k {
            return Err(Error::Domain(format!("class {class} outside 0..{k}")));
        }
        let mut c = vec![0.0; n * k];
        for i in 0..n {
            c[i * k + class] = 1.0;
        }
        RealArray::new(n, k, c)
    }

    /// Average velocity over `[r, t]` on a `grid x grid` lattice spanning
    /// `[-extent, extent]^2`, as `(x, y, u, v)` quadruples. `oracle` selects
    /// the exact field instead of the network.
    pub fn field(&self, oracle: bool, r: f64, t: f64, class: usize, grid: usize, extent: f64) -> Result<Vec<f64>> {
        if grid < 2 || !(extent > 0.0) {
            return Err(Error::Domain("grid needs >= 2 points and a positive extent".into()));
        }
        if !(0.0..=1.0).contains(&r) || !(r..=1.0).contains(&t) {
            return Err(Error::Domain(format!("need 0 <= r <= t <= 1, got r = {r}, t = {t}")));
        }
        let n = grid * grid;
        let step = 2.0 * extent / (grid - 1) as f64;
        let pts: Vec<f64> = (0..n)
            .flat_map(|i| [-extent + step * (i % grid) as f64, -extent + step * (i / grid) as f64])
            .collect();
        let z = RealArray::new(n, 2, pts.clone())?;
        let c = self.one_hot(class, n)?;
        let (rs, ts) = (vec![r; n], vec![t; n]);
        let u = if oracle {
            self.oracle.average_velocity(&z, &rs, &ts, &c)?
        } else {
            self.trainer.params.eval(&z, &rs, &ts, &c)?
        };
        Ok(pts
            .chunks(2)
            .zip(u.as_slice().chunks(2))
            .flat_map(|(p, v)| [p[0], p[1], v[0], v[1]])
            .collect())
    }

    /// `n` data points of one class.
    pub fn reference(&self, n: usize, class: usize, seed: u64) -> Result<RealArray> {
        self.one_hot(class, 1)?;
        let mut rng = RngState::with_stream(seed, 7);
        let mut out = Vec::with_capacity(2 * n);
        while out.len() < 2 * n {
            let b = self.task.draw(&mut rng, n.max(16))?;
            for i in 0..b.x0.rows() {
                if out.len() < 2 * n && self.task.class_of_condition(b.c.row(i)) == Some(class) {
                    out.extend_from_slice(b.x0.row(i));
                }
            }
        }
        RealArray::new(n, 2, out)
    }

    pub fn sample(&self, sampler: &str, n: usize, class: usize, seed: u64) -> Result<Trajectory> {
        if n < 2 {
            return Err(Error::Domain("need at least 2 samples".into()));
        }
        let spec = SamplerSpec::parse(sampler)?;
        let c = self.one_hot(class, n)?;
        let mut rng = RngState::with_stream(seed, 8);
        let z1 = gauss(&mut rng, n, 2);
        let (x, trace) = sample(&self.trainer.params, &z1, &c, &spec, &mut rng)?;
        let ed = energy_distance(&x, &self.reference(n, class, seed)?)?;
        let mut labels = vec!["noise".to_string()];
        let mut states = trace.initial.as_slice().to_vec();
        for st in &trace.stages {
            labels.push(st.label.clone());
            states.extend_from_slice(st.state.as_slice());
        }
        Ok(Trajectory {
            labels,
            states,
            n,
            nfe: trace.nfe,
            energy_distance: ed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn training_lowers_validation_loss() {
        let mut s = Session::new(0, 16, 200).unwrap();
        let before = s.validation().unwrap();
        assert!(s.train(150).unwrap().is_finite());
        assert_eq!(s.step(), 150);
        s.train(500).unwrap();
        assert_eq!(s.step(), 200);
        assert!(s.train(1).unwrap().is_nan());
        let after = s.validation().unwrap();
        assert!(after[0] < before[0], "{after:?} vs {before:?}");
    }

    #[test]
    fn field_layout_and_oracle_limit() {
        let s = Session::new(0, 8, 10).unwrap();
        let f = s.field(true, 0.5, 0.5, 1, 5, 3.0).unwrap();
        assert_eq!(f.len(), 4 * 25);
        assert_eq!((f[0], f[1]), (-3.0, -3.0));
        assert_eq!((f[4 * 24], f[4 * 24 + 1]), (3.0, 3.0));
        assert!(f.iter().all(|v| v.is_finite()));
        assert_eq!(s.field(false, 0.2, 0.6, 0, 3, 1.0).unwrap().len(), 36);
        assert!(s.field(true, 0.7, 0.5, 0, 5, 3.0).is_err());
        assert!(s.field(true, 0.5, 0.5, 9, 5, 3.0).is_err());
    }

    #[test]
    fn hybrid_trajectory_has_three_stages() {
        let s = Session::new(0, 8, 10).unwrap();
        let tr = s.sample("hybridflow_a0.2", 32, 2, 1).unwrap();
        assert_eq!(tr.labels, ["noise", "coarse", "renoised", "final"]);
        assert_eq!(tr.states.len(), 4 * 32 * 2);
        assert_eq!(tr.nfe, 2);
        assert!(tr.energy_distance >= 0.0);
        let eu = s.sample("euler_reflow_k4", 32, 2, 1).unwrap();
        assert_eq!(eu.nfe, 4);
        assert!(s.sample("nope", 32, 0, 1).is_err());
    }

    #[test]
    fn reference_respects_class() {
        let s = Session::new(0, 8, 10).unwrap();
        let means = TaskSpec::default_gmm().component_means();
        let r = s.reference(50, 3, 0).unwrap();
        for row in r.iter_rows() {
            let d = ((row[0] - means[3][0]).powi(2) + (row[1] - means[3][1]).powi(2)).sqrt();
            assert!(d < 1.5, "{row:?}");
        }
    }
}
