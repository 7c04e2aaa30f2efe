use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pointmode::checkpoint::{Checkpoint, DType};
use pointmode::config::{fingerprint, Precision, RunConfig};
use pointmode::downstream::{eval_classify, eval_localize, finetune_classify, EvalReport};
use pointmode::error::{Error, Result};
use pointmode::gradcheck::run_suite;
use pointmode::io::{gen_dataset, load_dataset, save_dataset, write_atomic};
use pointmode::model::{ModeModel, Task};
use pointmode::pretrain::{pretrain_run, StepStats, TrainState};

#[derive(Parser)]
#[command(name = "pointmode", version, about = "Point-cloud mixture of domain experts: data, pretraining, transfer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Checkpoint storage precision. Arithmetic is always 64-bit.
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate scenes and labeled shapes with a checksummed manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Block-to-scene pretraining; writes a checkpoint and a key:value metrics log.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/checkpoint.pmck`.
        #[arg(long)]
        resume: bool,
    },
    /// Fine-tune for a downstream task and write the evaluation report.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        task: Task,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a downstream task.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: Task,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every primitive and the joint loss.
    GradCheck {
        /// Corrupt the backward rule of this primitive (demonstrates failure).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = cli.precision {
        cfg.precision = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_report(out: &Path, rep: &EvalReport, echo: &str) -> Result<()> {
    let text = format!("{}\n# resolved configuration\n{}", rep.to_toml(), echo.lines().map(|l| format!("# {l}\n")).collect::<String>());
    write_atomic(&out.join(format!("report_{}.toml", rep.task)), text.as_bytes())?;
    print!("{}", rep.to_toml());
    Ok(())
}

fn evaluate(model: &ModeModel, cfg: &RunConfig, data: &Path, task: Task) -> Result<EvalReport> {
    let (ds, _) = load_dataset(data)?;
    let fp = cfg.fingerprint();
    match task {
        Task::ObjectClassify => eval_classify(model, &ds.shapes_test, &fp),
        Task::SceneLocalize => eval_localize(model, &ds.test, &cfg.pretrain(), cfg.eval.seed, &fp),
        Task::ObjectReconstruct => Err(Error::invalid("object_reconstruct is a pretraining task, not an evaluation")),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli)?;
    let echo = cfg.echo();
    match cli.cmd {
        Cmd::GenData { out } => {
            let ds = gen_dataset(&cfg)?;
            let m = save_dataset(&out, &ds, &cfg)?;
            println!(
                "wrote {} scenes ({} train / {} val / {} test) and {} shapes to {}",
                m.scenes.len(),
                m.scene_count("train"),
                m.scene_count("val"),
                m.scene_count("test"),
                m.shapes.len(),
                out.display()
            );
        }
        Cmd::Pretrain { data, out, resume } => {
            let (ds, _) = load_dataset(&data)?;
            let pcfg = cfg.pretrain();
            let ck_path = out.join("checkpoint.pmck");
            let mut state = if resume {
                let ck = Checkpoint::load(&ck_path)?;
                if fingerprint(&ck.config) != cfg.fingerprint() {
                    eprintln!("warning: resuming with a configuration that differs from the checkpoint's");
                }
                ck.restore(&cfg.model, pcfg.optimizer)?
            } else {
                TrainState::new(ModeModel::new(&cfg.model, cfg.seed)?, pcfg.optimizer)
            };
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let dtype = DType::from(cfg.precision);
            let metrics_path = out.join("metrics.log");
            let mut metrics = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&metrics_path)
                .map_err(|e| Error::io(&metrics_path, e))?;
            if !resume {
                metrics.set_len(0).map_err(|e| Error::io(&metrics_path, e))?;
                Checkpoint::from_state(&state, cfg.seed, echo.clone(), dtype).save(&ck_path)?;
            }
            let every = pcfg.checkpoint_every;
            let mut hook = |s: &StepStats, st: &TrainState| -> Result<()> {
                writeln!(metrics, "{s}").map_err(|e| Error::io(&metrics_path, e))?;
                if every > 0 && st.step % every == 0 {
                    Checkpoint::from_state(st, cfg.seed, echo.clone(), dtype).save(&ck_path)?;
                }
                Ok(())
            };
            let trace = pretrain_run(&mut state, &ds.train, &pcfg, &mut hook)?;
            Checkpoint::from_state(&state, cfg.seed, echo.clone(), dtype).save(&ck_path)?;
            match (trace.first(), trace.last()) {
                (Some(a), Some(b)) => println!(
                    "steps {}..{}: loss {:.6} -> {:.6}; checkpoint {}",
                    a.step,
                    b.step,
                    a.loss_total,
                    b.loss_total,
                    ck_path.display()
                ),
                _ => println!("no steps to run; checkpoint {}", ck_path.display()),
            }
        }
        Cmd::Finetune {
            data,
            checkpoint,
            task,
            out,
        } => {
            let mut model = match &checkpoint {
                Some(p) => Checkpoint::load(p)?.model(&cfg.model)?,
                None => ModeModel::new(&cfg.model, cfg.seed)?,
            };
            match task {
                Task::ObjectClassify => {
                    let (ds, _) = load_dataset(&data)?;
                    let losses = finetune_classify(&mut model, &ds.shapes_train, &cfg.finetune, cfg.seed)?;
                    if let Some(l) = losses.last() {
                        eprintln!("final epoch loss {l:.6}");
                    }
                }
                Task::SceneLocalize => {
                    eprintln!("scene_localize uses the pretrained scene pipeline as is; evaluating without further training");
                }
                Task::ObjectReconstruct => return Err(Error::invalid("object_reconstruct is trained by `pretrain`")),
            }
            Checkpoint::capture(&model, None, 0, cfg.seed, echo.clone(), DType::from(cfg.precision)).save(&out.join("finetuned.pmck"))?;
            let rep = evaluate(&model, &cfg, &data, task)?;
            write_report(&out, &rep, &echo)?;
        }
        Cmd::Eval {
            data,
            checkpoint,
            task,
            out,
        } => {
            let model = Checkpoint::load(&checkpoint)?.model(&cfg.model)?;
            let rep = evaluate(&model, &cfg, &data, task)?;
            write_report(&out, &rep, &echo)?;
        }
        Cmd::GradCheck { inject_fault } => {
            let fault: Option<&'static str> = inject_fault.map(|s| &*Box::leak(s.into_boxed_str()));
            let rep = run_suite(fault)?;
            print!("{}", rep.render());
            if !rep.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("POINTMODE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // an already-initialised pool is fine to keep
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
