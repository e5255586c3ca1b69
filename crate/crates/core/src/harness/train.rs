use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use crate::clock::Stopwatch;
use crate::error::{Error, Result};
use crate::flowcore::{unified_loss_step, PathBatch};
use crate::metrics::{oracle_validation_loss, validation_loss, Heldout, LossMode};
use crate::net::{init_params, AdamState, NetworkParams};
use crate::numkit::RngState;

const INIT_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 2;
const HELDOUT_STREAM: u64 = 3;

pub const LOG_SCHEMA: &str = "hybridflow-trainlog/1";

/// Validation losses in both network modes. Against the oracle's exact
/// velocity when the task has one, otherwise against the path target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValLosses {
    pub reflow: f64,
    pub meanflow: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub wall_ms: f64,
    /// Mean training loss since the previous row.
    pub train_loss: f64,
    pub val: ValLosses,
    pub seed: u64,
}

/// Stepwise training state; `train` drives it to completion.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: ExperimentConfig,
    pub params: NetworkParams,
    opt: AdamState,
    batch_rng: RngState,
    heldout: [Heldout; 2],
    step: usize,
    last_batch: Option<PathBatch>,
}

impl Trainer {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config.arch(), &mut RngState::with_stream(config.seed, INIT_STREAM))?;
        let opt = AdamState::new(&params, config.optimizer.adam);
        let mut h_rng = RngState::with_stream(config.seed, HELDOUT_STREAM);
        let heldout = [
            Heldout::build(&config.task, LossMode::Reflow, config.eval_size, &mut h_rng)?,
            Heldout::build(&config.task, LossMode::Meanflow, config.eval_size, &mut h_rng)?,
        ];
        Ok(Self {
            batch_rng: RngState::with_stream(config.seed, BATCH_STREAM),
            config,
            params,
            opt,
            heldout,
            step: 0,
            last_batch: None,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.steps
    }

    /// One optimizer step; returns the pre-update loss.
    pub fn step_once(&mut self) -> Result<f64> {
        let cfg = &self.config;
        let batch = PathBatch::draw(&cfg.task, &mut self.batch_rng, cfg.batch_size, &cfg.time_sampling)?;
        let lr = cfg.optimizer.lr_at(self.step, cfg.steps);
        let loss = unified_loss_step(&mut self.params, &batch, &mut self.opt, lr);
        self.last_batch = Some(batch);
        let loss = loss?;
        self.step += 1;
        Ok(loss)
    }

    /// The batch used by the most recent step, kept for failure dumps.
    pub fn last_batch(&self) -> Option<&PathBatch> {
        self.last_batch.as_ref()
    }

    pub fn validation(&self) -> Result<ValLosses> {
        let eval = |h: &Heldout| -> Result<f64> {
            match oracle_validation_loss(&self.params, h)? {
                Some(v) => Ok(v),
                None => validation_loss(&self.params, h),
            }
        };
        Ok(ValLosses {
            reflow: eval(&self.heldout[0])?,
            meanflow: eval(&self.heldout[1])?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub log: Vec<LogRow>,
}

impl TrainOutcome {
    pub fn final_val(&self) -> ValLosses {
        self.log.last().expect("log has a final row").val
    }
}

pub fn render_log(config: &ExperimentConfig, rows: &[LogRow]) -> String {
    let mut s = format!(
        "# {LOG_SCHEMA} config_hash={} seed={}\nstep,wall_ms,train_loss,val_loss_reflow_mode,val_loss_meanflow_mode,seed\n",
        config.hash(),
        config.seed
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.3},{},{},{},{}",
            r.step, r.wall_ms, r.train_loss, r.val.reflow, r.val.meanflow, r.seed
        );
    }
    s
}

/// Trains per `config`, writing `checkpoint.json` and `train_log.csv` into `out_dir`.
///
/// A non-finite loss aborts the run after dumping the offending batch to
/// `nan_batch.csv`.
pub fn train(config: &ExperimentConfig, out_dir: &Path) -> Result<TrainOutcome> {
    train_with_progress(config, out_dir, |_| {})
}

pub fn train_with_progress(
    config: &ExperimentConfig,
    out_dir: &Path,
    mut progress: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut tr = Trainer::new(config.clone())?;
    let sw = Stopwatch::start();
    let mut log: Vec<LogRow> = Vec::new();
    let (mut acc, mut count) = (0.0, 0usize);
    let row = |tr: &Trainer, acc: f64, count: usize| -> Result<LogRow> {
        Ok(LogRow {
            step: tr.step(),
            wall_ms: sw.elapsed().as_secs_f64() * 1e3,
            train_loss: if count == 0 { f64::NAN } else { acc / count as f64 },
            val: tr.validation()?,
            seed: config.seed,
        })
    };
    while !tr.is_done() {
        match tr.step_once() {
            Ok(loss) => {
                acc += loss;
                count += 1;
            }
            Err(Error::NonFinite(msg)) => {
                let dump = out_dir.join("nan_batch.csv");
                if let Some(b) = tr.last_batch() {
                    write_batch(&dump, b, &format!("nan-batch config_hash={} seed={} step={}", config.hash(), config.seed, tr.step()))?;
                }
                return Err(Error::NonFinite(format!(
                    "{msg} at step {}; batch written to {}",
                    tr.step(),
                    dump.display()
                )));
            }
            Err(e) => return Err(e),
        }
        if tr.step() % config.eval_every == 0 || tr.is_done() {
            let r = row(&tr, acc, count)?;
            progress(&r);
            log.push(r);
            (acc, count) = (0.0, 0);
        }
    }
    if log.is_empty() {
        let r = row(&tr, acc, count)?;
        progress(&r);
        log.push(r);
    }
    let checkpoint = Checkpoint::new(&tr.params, config, tr.step());
    let checkpoint_path = out_dir.join("checkpoint.json");
    checkpoint.save(&checkpoint_path)?;
    let log_path = out_dir.join("train_log.csv");
    std::fs::write(&log_path, render_log(config, &log)).map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainOutcome {
        params: tr.params,
        checkpoint,
        checkpoint_path,
        log_path,
        log,
    })
}

fn write_batch(path: &Path, b: &PathBatch, comment: &str) -> Result<()> {
    let d = b.x0.cols();
    let k = b.c.cols();
    let mut s = format!("# {comment}\nr,t");
    for (prefix, n) in [("x0_", d), ("z1_", d), ("c_", k)] {
        for j in 0..n {
            let _ = write!(s, ",{prefix}{j}");
        }
    }
    s.push('\n');
    for i in 0..b.len() {
        let _ = write!(s, "{},{}", b.r[i], b.t[i]);
        for v in b.x0.row(i).iter().chain(b.z1.row(i)).chain(b.c.row(i)) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ModelConfig;
    use crate::tasks::TaskSpec;

    fn small(steps: usize) -> ExperimentConfig {
        ExperimentConfig {
            task: TaskSpec::default_gauss(),
            model: ModelConfig {
                hidden: vec![16, 16],
                ..Default::default()
            },
            steps,
            batch_size: 32,
            eval_every: 10,
            eval_size: 64,
            ..Default::default()
        }
    }

    #[test]
    fn zero_steps_saves_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(0);
        let out = train(&cfg, dir.path()).unwrap();
        let init = init_params(&cfg.arch(), &mut RngState::with_stream(cfg.seed, INIT_STREAM)).unwrap();
        assert_eq!(out.params, init);
        assert_eq!(out.log.len(), 1);
        assert_eq!(Checkpoint::load(&out.checkpoint_path).unwrap().network().unwrap(), init);
    }

    #[test]
    fn runs_are_bit_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = small(25);
        let ra = train(&cfg, a.path()).unwrap();
        let rb = train(&cfg, b.path()).unwrap();
        assert_eq!(
            std::fs::read(&ra.checkpoint_path).unwrap(),
            std::fs::read(&rb.checkpoint_path).unwrap()
        );
        assert_eq!(ra.log.len(), 3);
        let text = std::fs::read_to_string(&ra.log_path).unwrap();
        assert!(text.starts_with(&format!("# {LOG_SCHEMA} config_hash={} seed=0\n", cfg.hash())));
    }

    #[test]
    fn nan_loss_dumps_batch() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(5);
        cfg.optimizer.adam.lr = 1e300;
        cfg.optimizer.schedule = super::super::config::LrSchedule::Constant;
        let err = train(&cfg, dir.path()).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
        assert!(dir.path().join("nan_batch.csv").exists());
    }

    #[test]
    fn unwritable_output_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("blocker");
        std::fs::write(&file, "x").unwrap();
        assert!(matches!(train(&small(1), &file.join("sub")), Err(Error::Io { .. })));
    }
}
