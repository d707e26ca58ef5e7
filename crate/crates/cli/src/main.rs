use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use apen::data::{gen_articulated, gen_toy2d, load_dataset, save_dataset, Dataset};
use apen::geom::{HardPartition, PointCloud, SoftPartition};
use apen::metrics::{equiv_error, lambda_estimate, LambdaMode, Sampler};
use apen::net::{apen_layer, load_model, save_model, FeatureField, ModelParams, Task};
use apen::train::{evaluate, format_log, gradcheck_model, train, LossWeights, TrainConfig};
use apen::{ApenError, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "apen", version, about = "Piecewise E(d) equivariant point networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Toy2d,
    Articulated,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Seg,
    Cls,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerKind {
    Uniform,
    Fps,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Gen {
        kind: Kind,
        #[arg(long, default_value_t = 3)]
        parts: usize,
        /// Points per part.
        #[arg(long, default_value_t = 85)]
        points: usize,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 3)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest per-part translation.
        #[arg(long, default_value_t = 0.1)]
        motion_scale: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write it with its per-epoch log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch CSV log; defaults to the model path with `.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Per-sample task scores as CSV.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Equivariance audit of the first encoder layer under the partition
    /// distribution it predicts.
    Equiv {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest translation of the random motions.
        #[arg(long, default_value_t = 1.0)]
        translation: f64,
        /// Audit only this sample.
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bad-partition probability of a reference sampler for k = 1..=kmax.
    Lambda {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        kmax: usize,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, value_enum, default_value_t = SamplerKind::Uniform)]
        sampler: SamplerKind,
        #[arg(long)]
        exact: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the full loss gradient of a freshly
    /// initialized model.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &ApenError) -> u8 {
    match e {
        ApenError::InvalidArgument(_) | ApenError::InvalidConfiguration(_) | ApenError::Io(_) => 2,
        ApenError::NumericFailure(_) => 3,
        ApenError::Parse { .. } => 4,
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => Ok(std::fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn pick(ds: &Dataset, i: usize) -> Result<&apen::geom::LabeledCloud> {
    ds.samples
        .get(i)
        .ok_or_else(|| ApenError::InvalidArgument(format!("sample {i} out of range ({} samples)", ds.len())))
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Gen {
            kind,
            parts,
            points,
            samples,
            dim,
            seed,
            motion_scale,
            out,
        } => {
            let ds = match kind {
                Kind::Toy2d => Dataset::new(vec![gen_toy2d()], 2, 3)?,
                Kind::Articulated => gen_articulated(parts, points, samples, dim, seed, motion_scale)?,
            };
            save_dataset(&ds, &out)?;
            println!("samples = {}", ds.len());
        }
        Command::Train { config, data, out, log } => {
            let cfg = TrainConfig::load(&config)?;
            let ds = load_dataset(&data)?;
            let result = train(&cfg, &ds)?;
            save_model(&result.params, &out)?;
            let log = log.unwrap_or_else(|| out.with_extension("log.csv"));
            std::fs::write(&log, format_log(&result.log))?;
            if let Some(last) = result.log.last() {
                println!("epochs = {}", result.log.len());
                println!("final_loss = {}", last.loss);
            }
            if let Some(why) = result.aborted {
                eprintln!("training stopped early, kept the last good parameters: {why}");
                return Ok(ExitCode::from(3));
            }
        }
        Command::Eval { model, data, mode, out } => {
            let params = load_model(&model)?;
            let want = match mode {
                Mode::Seg => Task::Segmentation,
                Mode::Cls => Task::Classification,
            };
            if params.config.task != want {
                return Err(ApenError::InvalidArgument(format!(
                    "model was trained for {}, not {want}",
                    params.config.task
                )));
            }
            let ds = load_dataset(&data)?;
            let report = evaluate(&params, &ds)?;
            let header = match want {
                Task::Segmentation => "sample,miou",
                Task::Classification => "sample,correct",
            };
            let mut csv = format!("{header}\n");
            for (i, v) in report.per_sample.iter().enumerate() {
                let _ = writeln!(csv, "{i},{v}");
            }
            emit(out.as_deref(), &csv)?;
            eprintln!("mean = {}", report.mean);
        }
        Command::Equiv {
            model,
            data,
            trials,
            seed,
            translation,
            sample,
            out,
        } => {
            let params = load_model(&model)?;
            let ds = load_dataset(&data)?;
            let which: Vec<usize> = match sample {
                Some(i) => vec![i],
                None => (0..ds.len()).collect(),
            };
            let mut csv = String::from(
                "sample,trials,mean_error,mean_scalar_error,conditional_error,conditional_count,count_a,count_b,lambda,delta,m_hat,bound_m,bound_2m\n",
            );
            for i in which {
                let s = pick(&ds, i)?;
                let q = params.predict(&s.cloud)?.partitions.remove(0);
                let r = equiv_error(first_layer(&params), &s.cloud, &q, &s.gt_parts, translation, trials, seed)?;
                let _ = writeln!(
                    csv,
                    "{i},{},{},{},{},{},{},{},{},{},{},{},{}",
                    r.trials,
                    r.mean_error,
                    r.mean_scalar_error,
                    r.conditional_error,
                    r.conditional_count,
                    r.count_a,
                    r.count_b,
                    r.lambda,
                    r.delta,
                    r.m_hat,
                    r.bound_m,
                    r.bound_2m
                );
            }
            emit(out.as_deref(), &csv)?;
        }
        Command::Lambda {
            data,
            kmax,
            trials,
            sampler,
            exact,
            seed,
            sample,
            out,
        } => {
            let ds = load_dataset(&data)?;
            let s = pick(&ds, sample)?;
            let n = s.cloud.n();
            if kmax == 0 || kmax > n {
                return Err(ApenError::InvalidArgument(format!("kmax must be in 1..={n}")));
            }
            let mode = if exact { LambdaMode::Exact } else { LambdaMode::MonteCarlo };
            let mut csv = String::from("k,lambda,ci95,trials,mode\n");
            for k in 1..=kmax {
                let smp = match sampler {
                    SamplerKind::Uniform => Sampler::Uniform { n, k },
                    SamplerKind::Fps => Sampler::Fps { cloud: &s.cloud, k },
                };
                let est = lambda_estimate(&smp, &s.gt_parts, trials, seed, mode)?;
                let tag = if exact { "exact" } else { "monte-carlo" };
                let _ = writeln!(csv, "{k},{},{},{},{tag}", est.value, est.ci95, est.trials);
            }
            emit(out.as_deref(), &csv)?;
        }
        Command::Gradcheck {
            config,
            data,
            sample,
            step,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let ds = load_dataset(&data)?;
            let params = cfg.init_model(&ds)?;
            let w = LossWeights {
                vote: cfg.weight_vote,
                task: cfg.weight_task,
            };
            let r = gradcheck_model(&params, pick(&ds, sample)?, w, step)?;
            println!("max_rel_error = {}", r.max_rel_error);
            println!("floor = {}", r.floor);
            println!("checked = {}", r.checked);
            println!("excluded = {}", r.excluded);
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// The first encoder layer evaluated with a fixed hard partition.
fn first_layer(params: &ModelParams) -> impl Fn(&PointCloud, &HardPartition) -> Result<FeatureField> + Sync + '_ {
    move |x, z| {
        let q = SoftPartition::from_hard(z);
        Ok(apen_layer(params, 0, x, &FeatureField::empty(x.n(), x.d()), &q)?.features)
    }
}
