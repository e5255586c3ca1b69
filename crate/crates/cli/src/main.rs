use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hybridflow::harness::{
    evaluate, latency_report, oracle_check, run_demo, sweep::validate_alpha_grid, sweep_alpha, sweep_nfe,
    train_with_progress, Checkpoint, DemoOptions, ExperimentConfig, OracleCheckOptions, SamplerOptions,
    DEFAULT_ALPHA_GRID,
};
use hybridflow::samplers::{SamplerSpec, DEFAULT_ALPHA};
use hybridflow::tasks::TaskSpec;
use hybridflow::Error;

#[derive(Parser)]
#[command(name = "hybridflow", version, about = "MeanFlow / HybridFlow training and evaluation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Seed for evaluation draws; for `train` it overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Use the unscaled refinement step instead of scaling it by t_refine.
    #[arg(long = "literal-eq12", global = true)]
    literal: bool,
    /// Draw fresh noise for ReNoise instead of reusing the initial noise.
    #[arg(long, global = true)]
    fresh_renoise: bool,
}

impl Common {
    fn sampler(&self) -> SamplerOptions {
        SamplerOptions {
            displacement_scaling: !self.literal,
            fresh_noise: self.fresh_renoise,
        }
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn out(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate samplers on a checkpoint and write metrics.csv.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Task name; defaults to the checkpoint's own task.
        #[arg(long)]
        task: Option<String>,
        /// Comma-separated sampler labels, e.g. meanflow_1step,euler_reflow_k16,hybridflow_a0.15
        #[arg(long, value_delimiter = ',', required = true)]
        samplers: Vec<String>,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// Single-sample calls per spec for the wall-time column; 0 skips timing.
        #[arg(long, default_value_t = 1000)]
        latency_calls: usize,
    },
    /// HybridFlow quality over ReNoise ratios.
    SweepAlpha {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Quality against function evaluations for every sampler family.
    SweepNfe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Check closed forms and derivatives against independent references.
    OracleCheck,
    /// Run the full default pipeline.
    Demo,
}

enum Failure {
    Error(Error),
    Oracle(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn exit_code(f: &Failure) -> u8 {
    match f {
        Failure::Oracle(_) => 2,
        Failure::Error(Error::Io { .. }) => 3,
        Failure::Error(_) => 1,
    }
}

fn load(ckpt: &Path) -> Result<(Checkpoint, hybridflow::net::NetworkParams), Error> {
    let ck = Checkpoint::load(ckpt)?;
    let params = ck.network()?;
    Ok((ck, params))
}

fn seeds(common: &Common, count: usize) -> Result<Vec<u64>, Error> {
    if count == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    Ok(hybridflow::harness::eval_seeds(common.seed(), count))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = &cli.common;
    match cli.command {
        Command::Train { config } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
            let outcome = train_with_progress(&cfg, &out, |r| {
                eprintln!(
                    "step {:>6}  train {:.4e}  val reflow {:.4e}  meanflow {:.4e}",
                    r.step, r.train_loss, r.val.reflow, r.val.meanflow
                );
            })?;
            println!("{}", outcome.checkpoint_path.display());
            println!("{}", outcome.log_path.display());
        }
        Command::Evaluate {
            ckpt,
            task,
            samplers,
            n,
            latency_calls,
        } => {
            let (ck, params) = load(&ckpt)?;
            let task = match task {
                Some(name) if name != ck.config.task.name() => TaskSpec::by_name(&name)?,
                _ => ck.config.task.clone(),
            };
            let specs = samplers
                .iter()
                .map(|s| SamplerSpec::parse(s).map(|s| common.sampler().apply(s)))
                .collect::<Result<Vec<_>, _>>()?;
            let hash = ck.config.hash();
            let mut report = evaluate(&params, &task, &specs, n, common.seed(), &hash)?;
            if latency_calls > 0 {
                report
                    .entries
                    .extend(latency_report(&params, &task, &specs, latency_calls, common.seed(), &hash)?.entries);
            }
            let out = common.out();
            std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            let path = out.join("metrics.csv");
            report.write(&path)?;
            print!("{}", report.to_csv());
        }
        Command::SweepAlpha { ckpt, grid, n, seeds: count } => {
            let (ck, params) = load(&ckpt)?;
            let grid = grid.unwrap_or_else(|| DEFAULT_ALPHA_GRID.to_vec());
            validate_alpha_grid(&grid)?;
            let s = sweep_alpha(&params, &ck.config.task, &grid, n, &seeds(common, count)?, common.sampler())?;
            let (csv, svg) = s.write(&common.out(), &ck.config.hash())?;
            for row in &s.rows {
                println!("alpha {:<5} energy distance {:.4e}", row.spec.alpha, row.median);
            }
            match s.argmin() {
                Some(i) => println!(
                    "argmin alpha {} ({})",
                    s.rows[i].spec.alpha,
                    if s.is_interior() == Some(true) { "interior" } else { "at grid edge" }
                ),
                None => println!("single grid value, no argmin"),
            }
            println!("{}\n{}", csv.display(), svg.display());
        }
        Command::SweepNfe { ckpt, alpha, n, seeds: count } => {
            let (ck, params) = load(&ckpt)?;
            let s = sweep_nfe(&params, &ck.config.task, alpha, n, &seeds(common, count)?, common.sampler())?;
            let (csv, svg) = s.write(&common.out(), &ck.config.hash())?;
            for row in &s.rows {
                println!("{:<24} nfe {:>2}  energy distance {:.4e}", row.spec.label(), row.spec.nfe(), row.median);
            }
            println!("{}\n{}", csv.display(), svg.display());
        }
        Command::OracleCheck => {
            let report = oracle_check(OracleCheckOptions {
                seed: common.seed(),
                ..Default::default()
            })?;
            print!("{}", report.render());
            if !report.all_passed() {
                return Err(Failure::Oracle("oracle check failed".into()));
            }
        }
        Command::Demo => {
            let mut opts = DemoOptions::new(common.seed());
            opts.sampler = common.sampler();
            let s = run_demo(&common.out(), &opts, |m| eprintln!("{m}"))?;
            println!(
                "plateau val loss: reflow mode {:.4e}, meanflow mode {:.4e}",
                s.plateau.reflow, s.plateau.meanflow
            );
            for row in &s.nfe.rows {
                println!("{:<24} nfe {:>2}  energy distance {:.4e}", row.spec.label(), row.spec.nfe(), row.median);
            }
            if let Some(i) = s.alpha.argmin() {
                println!("alpha argmin {}", s.alpha.rows[i].spec.alpha);
            }
            println!("limit identity fraction {:.3}", s.gauss.limit_identity);
            println!("error audit trajectory fraction {:.3}", s.gauss.audit.trajectory_fraction);
            println!("{}", s.out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Error(e) => eprintln!("error: {e}"),
                Failure::Oracle(m) => eprintln!("{m}"),
            }
            ExitCode::from(exit_code(&f))
        }
    }
}
