use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use thin_core::battery::{negative_control, run_battery};
use thin_core::config::{
    DatasetName, ExoTarget, ExperimentConfig, GatingChoice, Limits, Schedule, Variant, LAMBDA_GRID,
};
use thin_core::data::Split;
use thin_harness::{exit_code, experiments, generate, introspect, Harness, ResultTable, RunTemplate};

#[derive(Parser)]
#[command(
    name = "thin",
    version,
    about = "Tree-gated exogenous ensembles: training and experiment harness"
)]
struct Cli {
    /// Root of all outputs.
    #[arg(long, global = true, default_value = "results")]
    out_dir: PathBuf,
    /// Directory with the MNIST IDX files.
    #[arg(long, global = true, env = "THIN_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Runs executed concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Recompute cached runs and pretrained networks.
    #[arg(long, global = true)]
    force: bool,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Training steps between validation passes.
    #[arg(long, global = true)]
    eval_every: Option<usize>,
    /// Training samples held out for model selection; 0 disables selection.
    #[arg(long, global = true)]
    val_size: Option<usize>,
    #[arg(long, global = true)]
    max_steps: Option<usize>,
    /// Use only the first N training samples.
    #[arg(long, global = true)]
    train_limit: Option<usize>,
    /// Use only the first N test samples.
    #[arg(long, global = true)]
    test_limit: Option<usize>,
}

impl ScheduleArgs {
    fn template(&self) -> RunTemplate {
        let d = Schedule::default();
        RunTemplate {
            schedule: Schedule {
                epochs: self.epochs.unwrap_or(d.epochs),
                batch_size: self.batch_size.unwrap_or(d.batch_size),
                lr: self.lr.unwrap_or(d.lr),
                eval_every: self.eval_every.unwrap_or(d.eval_every),
                val_size: self.val_size.unwrap_or(d.val_size),
                max_steps: self.max_steps.or(d.max_steps),
            },
            limits: Limits {
                train: self.train_limit,
                test: self.test_limit,
            },
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a dataset as archives plus a statistics report.
    GenerateData {
        #[arg(long)]
        dataset: DatasetName,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Pretrain (or load) the frozen network for one exogenous variable.
    PretrainExo {
        #[arg(long)]
        dataset: DatasetName,
        /// Defaults to the dataset's primary variable.
        #[arg(long)]
        target: Option<ExoTarget>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
    },
    /// Train and evaluate one configuration.
    Train {
        #[arg(long)]
        dataset: DatasetName,
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        gating: Option<GatingChoice>,
        /// Dispelling weight; defaults to 0.005 for thin and 0 otherwise.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Evaluate a saved model.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// All six variants over several seeds.
    Ladder {
        #[arg(long)]
        dataset: DatasetName,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
    /// Tree-gated ensembles on mnist_rs with each gate input.
    GatingCompare {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
    /// Accuracy and |cos| as a function of the dispelling weight.
    SweepLambda {
        #[arg(long)]
        dataset: DatasetName,
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
    /// Histogram, tree-node, leaf-usage and embedding exports for a model.
    Introspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Samples written to the embedding CSV.
        #[arg(long, default_value_t = 1000)]
        embed_limit: usize,
        /// Defaults to `exports/` next to the checkpoint.
        #[arg(long)]
        exports_dir: Option<PathBuf>,
    },
    /// Finite-difference check of every op, layer and the full model.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Run the check against a deliberately broken sigmoid instead.
        #[arg(long)]
        negative_control: bool,
    },
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn finish_table(h: &Harness, t: &ResultTable) -> Result<ExitCode> {
    let path = t.write(&h.out_dir.join("tables"))?;
    print!("{}", t.to_text());
    println!("\ntable written to {}", path.display());
    Ok(if t.success() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    let tpl = cli.schedule.template();
    let mut h = Harness::new(&cli.out_dir, cli.data_dir.clone(), cli.jobs);
    h.force = cli.force;
    match cli.command {
        Command::GenerateData { dataset, seed } => {
            print_json(&generate::generate(&h, dataset, seed, &tpl.limits)?)?;
        }
        Command::PretrainExo { dataset, target, seeds } => {
            let target = target.unwrap_or(dataset.primary_exo());
            let mut out = Vec::new();
            for s in seeds {
                out.push(h.ensure_exo(dataset, target, s, &tpl)?.1);
            }
            print_json(&out)?;
        }
        Command::Train {
            dataset,
            variant,
            gating,
            lambda,
            seed,
        } => {
            let mut cfg: ExperimentConfig = tpl.config(dataset, variant, seed);
            cfg.gating = gating;
            if let Some(l) = lambda {
                cfg.lambda = l;
            }
            let r = h.run(&cfg)?;
            print_json(&r)?;
            eprintln!("run directory: {}", h.run_dir(&r.digest).display());
            if !r.ok() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Eval { checkpoint, split } => {
            print_json(&h.evaluate_checkpoint(&checkpoint, split.into())?)?;
        }
        Command::Ladder { dataset, seeds } => {
            return finish_table(&h, &experiments::ladder(&h, dataset, &seeds, &tpl)?);
        }
        Command::GatingCompare { seeds } => {
            return finish_table(&h, &experiments::gating_compare(&h, &seeds, &tpl)?);
        }
        Command::SweepLambda {
            dataset,
            lambdas,
            seeds,
        } => {
            let lambdas = lambdas.unwrap_or_else(|| LAMBDA_GRID.to_vec());
            return finish_table(&h, &experiments::sweep_lambda(&h, dataset, &lambdas, &seeds, &tpl)?);
        }
        Command::Introspect {
            checkpoint,
            split,
            embed_limit,
            exports_dir,
        } => {
            print_json(&introspect::introspect(
                &h,
                &checkpoint,
                split.into(),
                embed_limit,
                exports_dir,
            )?)?;
        }
        Command::Gradcheck {
            seed,
            negative_control: true,
        } => {
            let r = negative_control(seed);
            println!(
                "{}: max rel error {:.3e} (tol {:.0e}), {} mismatches: {}",
                r.name,
                r.max_rel_error,
                r.tol,
                r.failures.len(),
                if r.passed() { "pass" } else { "FAIL" }
            );
            if !r.passed() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Gradcheck {
            seed,
            negative_control: false,
        } => {
            let report = run_battery(seed);
            print!("{}", report.table());
            if !report.passed() {
                eprintln!("{} checks failed", report.failures().count());
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
