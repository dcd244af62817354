use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use faq::checkpoint::Checkpoint;
use faq::config::{self, Overrides, RunConfig};
use faq::experiments::{self, Init};
use faq::{intfile, reports, Error, Result};
use faq_core::train::evaluate;

#[derive(Parser)]
#[command(name = "faq", version, about = "Fixed-point fine-tuning after quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Float checkpoint to start from.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Internal bit width (32 = float).
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Train on the first N training images only.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Attach gradient-noise probes and write noise.csv.
    #[arg(long)]
    noise_probe: bool,
    /// Replace existing outputs.
    #[arg(long)]
    overwrite: bool,
}

impl RunArgs {
    fn resolve(&self, no_calibration: bool) -> Result<RunConfig> {
        let mut c = RunConfig::load(&self.config)?;
        c.apply(&Overrides {
            seed: self.seed,
            output_dir: self.out.clone(),
            baseline: self.baseline.clone(),
            data_dir: self.data_dir.clone(),
            bits: self.bits,
            epochs: self.epochs,
            lr: self.lr,
            weight_decay: self.weight_decay,
            train_limit: self.train_limit,
            no_calibration,
            noise_probe: self.noise_probe,
        })?;
        Ok(c)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Recipe {
    MnistBaseline,
    MnistFaq8,
    MnistFaq4,
    MnistScratch4,
    MnistNoise,
}

#[derive(Subcommand)]
enum Command {
    /// Print a starting configuration.
    InitConfig {
        #[arg(value_enum)]
        recipe: Recipe,
        #[arg(long, default_value = "data/mnist")]
        data_dir: PathBuf,
        #[arg(long, default_value = "runs/out")]
        out: PathBuf,
        /// Baseline checkpoint referenced by fine-tuning recipes.
        #[arg(long, default_value = "runs/baseline/checkpoint.safetensors")]
        baseline: PathBuf,
        /// Fine-tuning epochs for the 4-bit recipe.
        #[arg(long, default_value_t = 8)]
        epochs: usize,
    },
    /// Train the float baseline.
    TrainBaseline(RunArgs),
    /// Calibrate activation ranges of the baseline and write the report.
    Calibrate(RunArgs),
    /// Calibrate, quantize, fine-tune, evaluate and lower.
    Faq {
        #[command(flatten)]
        run: RunArgs,
        /// Use the fixed uncalibrated activation ceilings.
        #[arg(long)]
        no_calibration: bool,
        /// Start from a random initialization instead of the baseline.
        #[arg(long)]
        scratch: bool,
    },
    /// Test accuracy of a checkpoint, and of its integer model if given.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        integer: Option<PathBuf>,
    },
    /// Lower a quantized checkpoint to an integer model.
    Lower {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation grid and write its table.
    Ablate {
        /// TOML grid: a `[base]` run config and `[[cells]]`.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    #[command(subcommand)]
    Diagnose(Diagnose),
}

#[derive(Subcommand)]
enum Diagnose {
    /// Network similarity of two checkpoints.
    Similarity {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Noise cosines per layer across precisions.
    Noise {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,32")]
        precisions: Vec<u32>,
    },
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn load_for(cfg: &mut RunConfig) -> Result<experiments::Data> {
    let d = experiments::load_data(cfg)?;
    cfg.persist()?;
    Ok(d)
}

fn eval_data(ck: &Checkpoint<f32>, dir: Option<&Path>) -> Result<faq_core::data::Dataset> {
    let kind = match ck.meta.model {
        Some(faq_core::models::ModelSpec::CifarResnet { .. }) => faq::datasets::DatasetKind::Cifar10,
        _ => faq::datasets::DatasetKind::Mnist,
    };
    let dir = dir.map(Path::to_path_buf).unwrap_or_else(faq::mnist_dir);
    faq::datasets::load_dataset(&dir, kind, faq_core::data::Split::Test)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitConfig {
            recipe,
            data_dir,
            out,
            baseline,
            epochs,
        } => {
            let base = config::mnist_baseline(&data_dir, &out);
            let c = match recipe {
                Recipe::MnistBaseline => base,
                Recipe::MnistFaq8 => config::mnist_faq8(&base, &baseline, &out),
                Recipe::MnistFaq4 => config::mnist_faq4(&base, &baseline, &out, epochs),
                Recipe::MnistScratch4 => config::mnist_scratch4(&base, &out),
                Recipe::MnistNoise => config::mnist_noise(&base, &baseline, &out),
            };
            print!("{}", c.to_toml());
        }
        Command::TrainBaseline(a) => {
            let mut c = a.resolve(false)?;
            experiments::prepare_output(&c.output_dir, a.overwrite)?;
            let data = load_for(&mut c)?;
            let o = experiments::train_baseline(&c, &data)?;
            print_json(&o.summary);
        }
        Command::Calibrate(a) => {
            let mut c = a.resolve(false)?;
            let data = load_for(&mut c)?;
            let net = experiments::load_baseline(&c)?;
            let r = experiments::calibrate_network(&c, &data, &net)?;
            let p = c.output_dir.join(experiments::CALIBRATION_FILE);
            reports::write_calibration(&r, &p)?;
            print!("{}", reports::calibration_to_jsonl(&r));
        }
        Command::Faq {
            run,
            no_calibration,
            scratch,
        } => {
            let mut c = run.resolve(no_calibration)?;
            experiments::prepare_output(&c.output_dir, run.overwrite)?;
            let data = load_for(&mut c)?;
            let init = if scratch {
                Init::Scratch
            } else {
                Init::Pretrained(experiments::load_baseline(&c)?)
            };
            let o = experiments::run_faq(&c, &data, init)?;
            print_json(&o.summary);
        }
        Command::Eval {
            checkpoint,
            data_dir,
            integer,
        } => {
            let ck = Checkpoint::<f32>::load(&checkpoint)?;
            let test = eval_data(&ck, data_dir.as_deref())?;
            let norm = &ck.meta.normalization;
            let (loss, acc) = evaluate(&ck.state.qnet, &test, norm, experiments::EVAL_BATCH)?;
            println!("test_loss {loss:.6}\ntest_acc {acc:.6}");
            if let Some(p) = integer {
                let m = intfile::load(&p)?;
                println!("integer_test_acc {:.6}", experiments::integer_accuracy(&m, &test, norm)?);
            }
        }
        Command::Lower { checkpoint, out } => {
            let ck = Checkpoint::<f32>::load(&checkpoint)?;
            if ck.state.qnet.is_float() {
                return Err(Error::Config("checkpoint is not quantized".into()));
            }
            let m = faq_core::int_infer::lower(&ck.state.qnet)?;
            intfile::save(&m, &out)?;
            println!("wrote {} ({} layers)", out.display(), m.layers.len());
        }
        Command::Ablate { grid, overwrite } => {
            let g = experiments::AblationGrid::load(&grid)?;
            let rows = experiments::ablate(&g, None, overwrite)?;
            std::fs::create_dir_all(&g.base.output_dir).map_err(|e| Error::io(&g.base.output_dir, e))?;
            let p = g.base.output_dir.join("ablation.csv");
            experiments::write_ablation_table(&rows, &p)?;
            for r in &rows {
                println!("{:<24} {:>10} {}", r.cell, r.test_acc.map(|a| format!("{a:.4}")).unwrap_or_default(), r.status);
            }
            if rows.iter().any(|r| r.status != "ok") {
                return Err(Error::Format("some ablation cells failed; see the table".into()));
            }
        }
        Command::Diagnose(Diagnose::Similarity { a, b, out }) => {
            let r = experiments::checkpoint_similarity(&a, &b)?;
            if let Some(p) = out {
                reports::write_json(&r, &p)?;
            }
            print_json(&r);
        }
        Command::Diagnose(Diagnose::Noise { run, precisions }) => {
            let mut c = run.resolve(false)?;
            let data = load_for(&mut c)?;
            let net = experiments::load_baseline(&c)?;
            let rows = experiments::noise_sweep(&c, &data, &net, &precisions)?;
            experiments::write_noise_table(&rows, &c.output_dir.join("noise_table.csv"))?;
            print_json(&rows);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
