use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sslseg::config::{ExperimentConfig, Method};
use sslseg::dataset::{generate_data, load_dataset};
use sslseg::experiment::{self, cohort_mean};
use sslseg::{report, Result};
use sslseg_core::data::save_checkpoint;
use sslseg_core::par;

#[derive(Parser)]
#[command(name = "sslseg", version, about = "Self-supervised pretraining and segmentation finetuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the pretraining seed and the finetuning seed list.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a backbone with `pretrain.method`.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Overrides `pretrain.method`.
        #[arg(long)]
        method: Option<String>,
    },
    /// Finetune a checkpoint on the full training split.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Starting weights; random initialization when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-subject volume Dice of a segmentation checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Full method x N x seed matrix with results table and plot.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Write the phantom dataset as volume files plus a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
}

fn setup(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        config.output.dir = out.clone();
    }
    if let Some(seed) = common.seed {
        config.pretrain.seed = seed;
        config.finetune.seeds = vec![seed];
    }
    let out = config.output.dir.clone();
    std::fs::create_dir_all(&out)?;
    Ok((config, out))
}

fn print_table(rows: &[experiment::SubjectDice], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["subject", "class", "dice"])?;
    for r in rows {
        for (c, d) in r.dice.iter().enumerate() {
            println!("{}\tclass {}\t{d:.4}", r.subject, c + 1);
            w.write_record([r.subject.clone(), (c + 1).to_string(), d.to_string()])?;
        }
    }
    for (c, d) in cohort_mean(rows).iter().enumerate() {
        println!("mean\tclass {}\t{d:.4}", c + 1);
        w.write_record(["mean".to_string(), (c + 1).to_string(), d.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common, method } => {
            let (mut config, out) = setup(&common)?;
            if let Some(m) = method {
                config.pretrain.method = m.parse()?;
            }
            let data = load_dataset(&config)?;
            let method = config.pretrain.method;
            experiment::pretrain_and_save(&config, method, &data, &out)?;
            println!("{}", experiment::pretrain_checkpoint_path(&out, method).display());
        }
        Command::Finetune { common, checkpoint } => {
            let (config, out) = setup(&common)?;
            let data = load_dataset(&config)?;
            let init = match &checkpoint {
                Some(p) => experiment::load_model(&config, p)?,
                None => experiment::pretrain(&config, Method::None, &data)?.model,
            };
            let seed = config.finetune.seeds[0];
            let tuned = experiment::finetune_from(&config, &init, &data.train, &data.val, seed)?;
            save_checkpoint(&out.join("finetuned.ckpt"), &tuned.model)?;
            report::write_csv(&out.join("finetune_history.csv"), &tuned.history)?;
            let scores = experiment::evaluate(&tuned.model, &data.test)?;
            print_table(&scores, &out.join("eval.csv"))?;
        }
        Command::Eval { common, checkpoint } => {
            let (config, out) = setup(&common)?;
            let model = experiment::load_model(&config, &checkpoint)?;
            let data = load_dataset(&config)?;
            let scores = experiment::evaluate(&model, &data.test)?;
            print_table(&scores, &out.join("eval.csv"))?;
        }
        Command::Sweep { common } => {
            let (config, out) = setup(&common)?;
            let data = load_dataset(&config)?;
            let rows = experiment::sweep(&config, &data, &out)?;
            for s in report::summarize(&rows) {
                println!("{}\tN={}\tclass {}\t{:.4} +- {:.4} ({} runs)", s.method, s.n, s.class, s.mean, s.std, s.runs);
            }
        }
        Command::GenData { common } => {
            let (config, out) = setup(&common)?;
            let manifest = generate_data(&config, &out)?;
            println!("{} subjects written to {}", manifest.records.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let threads = match std::env::var("SSLSEG_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => Some(n),
            _ => {
                eprintln!("error: SSLSEG_THREADS={v:?} is not a positive integer");
                return ExitCode::from(2);
            }
        },
        Err(_) => None,
    };
    match par::with_thread_cap(threads, || run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
