use std::path::{Path, PathBuf};

use super::eval::{check_compatible, entry, quality, EvalDraw, SamplerOptions};
use super::svg::{Chart, Series};
use crate::error::{Error, Result};
use crate::metrics::{MetricEntry, MetricReport};
use crate::net::VelocityField;
use crate::numkit::median;
use crate::samplers::{SamplerMode, SamplerSpec};
use crate::tasks::TaskSpec;

pub const DEFAULT_ALPHA_GRID: [f64; 7] = [0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.40];
pub const DEFAULT_EVAL_SEEDS: usize = 5;

/// Evaluation seeds derived from a base seed.
pub fn eval_seeds(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base.wrapping_add(7919 * i)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub spec: SamplerSpec,
    /// Energy distance per evaluation seed.
    pub values: Vec<f64>,
    pub median: f64,
}

/// Energy distance of every spec under every seed, sharing draws across specs.
fn run<F: VelocityField>(
    field: &F,
    task: &TaskSpec,
    specs: &[SamplerSpec],
    n: usize,
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    check_compatible(field, task)?;
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one evaluation seed".into()));
    }
    let mut values = vec![Vec::with_capacity(seeds.len()); specs.len()];
    for &seed in seeds {
        let draw = EvalDraw::new(task, n, seed)?;
        for (k, spec) in specs.iter().enumerate() {
            values[k].push(quality(field, task, spec, &draw)?.0.energy_distance);
        }
    }
    Ok(specs
        .iter()
        .zip(values)
        .map(|(spec, values)| SweepRow {
            spec: *spec,
            median: median(&values),
            values,
        })
        .collect())
}

fn rows_report(rows: &[SweepRow], task: &TaskSpec, seeds: &[u64], n: usize, hash: &str) -> Result<MetricReport> {
    let base = seeds[0];
    let mut report = MetricReport::new(hash, base);
    for row in rows {
        for (v, &s) in row.values.iter().zip(seeds) {
            report.push(entry("energy_distance", *v, task, &row.spec, s, n))?;
        }
        report.push(entry("energy_distance_median", row.median, task, &row.spec, base, n))?;
        report.push(entry("nfe", row.spec.nfe() as f64, task, &row.spec, base, n))?;
    }
    Ok(report)
}

fn write_pair(dir: &Path, stem: &str, csv: &str, svg: &str) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let c = dir.join(format!("{stem}.csv"));
    let s = dir.join(format!("{stem}.svg"));
    std::fs::write(&c, csv).map_err(|e| Error::io(&c, e))?;
    std::fs::write(&s, svg).map_err(|e| Error::io(&s, e))?;
    Ok((c, s))
}

pub fn validate_alpha_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("alpha grid is empty".into()));
    }
    if let Some(a) = grid.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
        return Err(Error::Domain(format!("alpha {a} outside (0, 1)")));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("alpha grid must be strictly increasing".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSweep {
    pub task: TaskSpec,
    pub seeds: Vec<u64>,
    pub n: usize,
    pub rows: Vec<SweepRow>,
}

impl AlphaSweep {
    /// Index of the lowest median; `None` for a single-value grid.
    pub fn argmin(&self) -> Option<usize> {
        if self.rows.len() < 2 {
            return None;
        }
        self.rows
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.median.total_cmp(&b.1.median))
            .map(|(i, _)| i)
    }

    pub fn is_interior(&self) -> Option<bool> {
        self.argmin().map(|i| i > 0 && i + 1 < self.rows.len())
    }

    pub fn median_at(&self, alpha: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.spec.alpha == alpha).map(|r| r.median)
    }

    pub fn report(&self, hash: &str) -> Result<MetricReport> {
        let mut r = rows_report(&self.rows, &self.task, &self.seeds, self.n, hash)?;
        if let Some(i) = self.argmin() {
            r.push(MetricEntry {
                metric: "argmin_alpha".into(),
                value: self.rows[i].spec.alpha,
                task: self.task.name().into(),
                sampler: "hybridflow".into(),
                k: None,
                alpha: Some(self.rows[i].spec.alpha),
                seed: self.seeds[0],
                n: self.n,
            })?;
        }
        Ok(r)
    }

    pub fn chart(&self) -> Chart {
        Chart {
            title: format!("HybridFlow ReNoise ratio ({})", self.task.name()),
            x_label: "alpha (= t_refine)".into(),
            y_label: "energy distance (median)".into(),
            log_x: false,
            series: vec![Series {
                name: "hybridflow".into(),
                points: self.rows.iter().map(|r| (r.spec.alpha, r.median)).collect(),
            }],
        }
    }

    pub fn write(&self, dir: &Path, hash: &str) -> Result<(PathBuf, PathBuf)> {
        write_pair(dir, "alpha_sweep", &self.report(hash)?.to_csv(), &self.chart().render())
    }
}

/// HybridFlow quality across ReNoise ratios, with `t_refine = alpha`.
pub fn sweep_alpha<F: VelocityField>(
    field: &F,
    task: &TaskSpec,
    grid: &[f64],
    n: usize,
    seeds: &[u64],
    options: SamplerOptions,
) -> Result<AlphaSweep> {
    validate_alpha_grid(grid)?;
    let specs: Vec<_> = grid.iter().map(|&a| options.apply(SamplerSpec::hybridflow(a))).collect();
    Ok(AlphaSweep {
        task: task.clone(),
        seeds: seeds.to_vec(),
        n,
        rows: run(field, task, &specs, n, seeds)?,
    })
}

/// Multistep MeanFlow at K = 1, 2, 4, 8, Euler ReFlow at K = 1..16, and HybridFlow.
pub fn nfe_specs(alpha: f64, options: SamplerOptions) -> Vec<SamplerSpec> {
    let mut v: Vec<_> = [1, 2, 4, 8].iter().map(|&k| SamplerSpec::meanflow_multistep(k)).collect();
    v.extend([1, 2, 4, 8, 16].iter().map(|&k| SamplerSpec::euler(k)));
    v.push(SamplerSpec::hybridflow(alpha));
    v.into_iter().map(|s| options.apply(s)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NfeSweep {
    pub task: TaskSpec,
    pub seeds: Vec<u64>,
    pub n: usize,
    pub rows: Vec<SweepRow>,
}

impl NfeSweep {
    pub fn median_of(&self, mode: SamplerMode, steps: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.spec.mode == mode && (mode == SamplerMode::Hybridflow || r.spec.steps == steps))
            .map(|r| r.median)
    }

    pub fn report(&self, hash: &str) -> Result<MetricReport> {
        rows_report(&self.rows, &self.task, &self.seeds, self.n, hash)
    }

    pub fn chart(&self) -> Chart {
        let family = |mode: SamplerMode, name: &str| Series {
            name: name.into(),
            points: self
                .rows
                .iter()
                .filter(|r| r.spec.mode == mode)
                .map(|r| (r.spec.nfe() as f64, r.median))
                .collect(),
        };
        Chart {
            title: format!("Quality vs function evaluations ({})", self.task.name()),
            x_label: "NFE (log scale)".into(),
            y_label: "energy distance (median)".into(),
            log_x: true,
            series: vec![
                family(SamplerMode::MeanflowMultistep, "meanflow multistep"),
                family(SamplerMode::EulerReflow, "euler reflow"),
                family(SamplerMode::Hybridflow, "hybridflow"),
            ],
        }
    }

    pub fn write(&self, dir: &Path, hash: &str) -> Result<(PathBuf, PathBuf)> {
        write_pair(dir, "nfe_sweep", &self.report(hash)?.to_csv(), &self.chart().render())
    }
}

pub fn sweep_nfe<F: VelocityField>(
    field: &F,
    task: &TaskSpec,
    alpha: f64,
    n: usize,
    seeds: &[u64],
    options: SamplerOptions,
) -> Result<NfeSweep> {
    let specs = nfe_specs(alpha, options);
    Ok(NfeSweep {
        task: task.clone(),
        seeds: seeds.to_vec(),
        n,
        rows: run(field, task, &specs, n, seeds)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, NetworkArch};
    use crate::numkit::RngState;

    #[test]
    fn grid_validation() {
        validate_alpha_grid(&DEFAULT_ALPHA_GRID).unwrap();
        assert!(validate_alpha_grid(&[0.2, 0.1]).is_err());
        assert!(validate_alpha_grid(&[0.0, 0.1]).is_err());
        assert!(validate_alpha_grid(&[]).is_err());
    }

    #[test]
    fn single_alpha_has_no_argmin() {
        let task = TaskSpec::default_gauss();
        let p = init_params(&NetworkArch::mlp(2, 2, vec![8]), &mut RngState::new(0)).unwrap();
        let s = sweep_alpha(&p, &task, &[0.15], 32, &[0], SamplerOptions::default()).unwrap();
        assert_eq!(s.argmin(), None);
        let report = s.report("h").unwrap();
        assert!(report.entries.iter().all(|e| e.metric != "argmin_alpha"));
        assert_eq!(report.entries.iter().filter(|e| e.metric == "energy_distance_median").count(), 1);
    }

    #[test]
    fn nfe_rows_match_analytic_counts_and_k1_equivalence() {
        let task = TaskSpec::default_gauss();
        let p = init_params(&NetworkArch::mlp(2, 2, vec![8]), &mut RngState::new(0)).unwrap();
        let s = sweep_nfe(&p, &task, 0.15, 32, &eval_seeds(0, 2), SamplerOptions::default()).unwrap();
        assert_eq!(s.rows.len(), 10);
        let report = s.report("h").unwrap();
        for row in &s.rows {
            assert_eq!(report.get("nfe", &row.spec.label()), Some(row.spec.nfe() as f64));
        }
        let one = super::super::eval::evaluate(&p, &task, &[SamplerSpec::meanflow_1step()], 32, 0, "h").unwrap();
        assert_eq!(
            s.rows[0].values[0],
            one.get("energy_distance", "meanflow_1step").unwrap()
        );
        let dir = tempfile::tempdir().unwrap();
        let (csv, svg) = s.write(dir.path(), "h").unwrap();
        assert!(csv.exists() && svg.exists());
    }
}
