//! The `icsid` command-line tool.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, OUTPUT_ROOT_ENV, RESOLVED_CONFIG};
use crate::datagen::{write_atomic, TestSet};
use crate::error::{Error, Result};
use crate::eval::{evaluate, export_traces};
use crate::model::{Checkpoint, MetaModel};
use crate::train::{self, TrainRun, LATEST_CHECKPOINT};

#[derive(Parser, Debug)]
#[command(name = "icsid", version, about = "In-context identification of Wiener-Hammerstein systems")]
pub struct Cli {
    /// Root for default output directories.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    pub output_root: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a fixed test set from the stream configuration.
    Generate {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        /// Test-set file; relative paths land in the output directory.
        #[arg(long)]
        out: PathBuf,
        /// Also write a CSV dump next to the test set.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train a meta-model from scratch.
    Train {
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Continue from `latest.ckpt` in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Continue training a checkpoint on the configured stream.
    Finetune {
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Parent checkpoint.
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on a test set.
    Eval {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        testset: PathBuf,
        /// Per-position CSV; relative paths land in the output directory.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Print a checkpoint's configuration, parameter counts and hashes.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

struct Env {
    cfg: RunConfig,
    out_dir: PathBuf,
}

impl Env {
    fn load(config: Option<&Path>, root: Option<&Path>) -> Result<Env> {
        let cfg = match config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let name = config
            .and_then(|p| p.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "default".into());
        let out_dir = cfg.output_dir(&name, root);
        write_atomic(&out_dir.join(RESOLVED_CONFIG), cfg.to_toml().as_bytes())?;
        Ok(Env { cfg, out_dir })
    }

    fn output(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }
}

fn stop_flag() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    if let Err(e) = ctrlc::set_handler(move || f.store(true, Ordering::SeqCst)) {
        eprintln!("warning: cannot install interrupt handler: {e}");
    }
    flag
}

fn model_conflicts(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.model.config() == &cfg.model {
        return Ok(());
    }
    let a = serde_json::to_value(&cfg.model).expect("config serializes");
    let b = serde_json::to_value(ckpt.model.config()).expect("config serializes");
    let conflicts = a
        .as_object()
        .into_iter()
        .flatten()
        .filter(|(k, v)| b.get(k.as_str()) != Some(v))
        .map(|(k, v)| format!("model.{k}: config {v} vs checkpoint {}", b[k.as_str()]))
        .collect();
    Err(Error::Incompatible { conflicts })
}

fn run_training(env: &Env, parent: Option<&Checkpoint>, resume: bool) -> Result<()> {
    let cfg = &env.cfg;
    let val = TestSet::generate(&cfg.validation_stream(), cfg.validation.count, false)?;
    let mut run = TrainRun::new(cfg.stream.clone(), cfg.train.clone(), &val, &env.out_dir);
    run.stop = Some(stop_flag());
    run.verbose = true;
    println!("output directory: {}", env.out_dir.display());
    let summary = if resume {
        let latest = Checkpoint::load(&env.out_dir.join(LATEST_CHECKPOINT))?;
        model_conflicts(cfg, &latest)?;
        train::resume(&run)?
    } else if let Some(p) = parent {
        model_conflicts(cfg, p)?;
        train::fine_tune(p, &run)?
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        train::train(MetaModel::init(&cfg.model, &mut rng)?, &run)?
    };
    println!(
        "iterations {} of {}{}",
        summary.iterations,
        cfg.train.total_iters,
        if summary.interrupted { " (interrupted)" } else { "" }
    );
    if let Some(r) = summary.best_val_rmse {
        println!("best validation RMSE {r:.6}");
    }
    println!("latest checkpoint: {}", summary.latest.display());
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    let root = cli.output_root.as_deref();
    match cli.command {
        Command::Generate {
            config,
            count,
            out,
            csv,
        } => {
            let env = Env::load(config.as_deref(), root)?;
            let set = TestSet::generate(&env.cfg.stream, count, false)?;
            let path = env.output(&out);
            set.write(&path)?;
            if let Some(c) = csv {
                set.export_csv(&env.output(&c))?;
            }
            let s = &set.cfg;
            println!(
                "wrote {} samples (m={}, N={}, n_in={}, seed={}) to {}",
                set.len(),
                s.m,
                s.n,
                s.n_in,
                s.seed,
                path.display()
            );
            println!("sha256 {}", set.content_hash());
        }
        Command::Train { config, resume } => {
            let env = Env::load(config.as_deref(), root)?;
            run_training(&env, None, resume)?;
        }
        Command::Finetune {
            config,
            from,
            resume,
        } => {
            let env = Env::load(config.as_deref(), root)?;
            if resume {
                run_training(&env, None, true)?;
            } else {
                let parent = Checkpoint::load(&from)?;
                run_training(&env, Some(&parent), false)?;
            }
        }
        Command::Eval {
            config,
            checkpoint,
            testset,
            traces,
        } => {
            let env = Env::load(config.as_deref(), root)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let set = TestSet::read(&testset)?;
            let report = match traces {
                Some(t) => export_traces(&ckpt, &set, &env.cfg.eval, &env.output(&t))?,
                None => evaluate(&ckpt, &set, &env.cfg.eval)?,
            };
            report.write(&env.out_dir.join(format!("eval_{}.json", env.cfg.eval.label)))?;
            println!("{}", report.to_json());
        }
        Command::Inspect { checkpoint } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let cfg = ckpt.model.config();
            print!("{}", toml::to_string_pretty(cfg).expect("config serializes"));
            println!("parameters: {}", ckpt.model.param_count());
            for (name, n) in ckpt.model.module_counts() {
                println!("  {name:<16} {n}");
            }
            let cfg_json = serde_json::to_vec(cfg).expect("config serializes");
            println!("config hash:  {}", hex::encode(<sha2::Sha256 as sha2::Digest>::digest(&cfg_json)));
            println!("weights hash: {}", ckpt.weights_hash());
            println!(
                "parent hash:  {}",
                ckpt.lineage.parent_hash.as_deref().unwrap_or("none")
            );
            if let Some(c) = &ckpt.lineage.change {
                println!("change:       {c}");
            }
            match &ckpt.optim {
                Some(o) => println!("optimizer step: {}", o.step),
                None => println!("optimizer state: none"),
            }
        }
    }
    Ok(())
}

/// Parses `args` and runs the command, mapping errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
