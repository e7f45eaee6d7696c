//! The `mixmoe` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{encode_example, Item};
use crate::error::{Error, Result};
use crate::eval::{interference_probe, perplexity, route_stats};
use crate::model::ForwardOptions;
use crate::pipeline::{self, AblationAxis, Datasets};
use crate::train::{load_checkpoint, run, save_checkpoint, write_loss_csv, Checkpoint, LossRecord};

pub const THREADS_ENV: &str = "MIXMOE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "mixmoe", version, about = "Dual-group MoE upcycling on toy translation data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Corpus directory from `gen-data`. Regenerated from the config if absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic corpora and their manifest.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage and write a checkpoint plus a loss log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Stage 1: a dense base checkpoint (built and pretrained if omitted).
        /// Stage 2: the stage-1 checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue an interrupted run of the same stage.
        #[arg(long, conflicts_with = "init")]
        resume: Option<PathBuf>,
        /// Stop once this many optimizer steps have been taken. The schedule
        /// still follows the configured step count.
        #[arg(long)]
        steps: Option<u64>,
        /// Also save the dense base when stage 1 builds it.
        #[arg(long)]
        base_out: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate checkpoints and write a report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Second checkpoint (stage 2) for the interference probe.
        #[arg(long)]
        ckpt2: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: EvalMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one axis through full two-stage runs and write a CSV table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: String,
        /// Subset of the axis grid (comma separated).
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Bleu,
    Ppl,
    Routes,
    Interference,
}

/// Parses `MIXMOE_THREADS`. There is no worker pool, so the value is only
/// validated and recorded.
pub fn threads_from(value: Option<&str>) -> Result<usize> {
    match value {
        None => Ok(1),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

#[derive(Debug, Serialize)]
struct TrainSummary<'a> {
    stage: u8,
    step: u64,
    lineage: &'a str,
    config_hash: String,
    seed: u64,
    threads: usize,
    final_loss: Option<&'a LossRecord>,
}

fn load_data(common: &Common, cfg: &RunConfig) -> Result<Datasets> {
    match &common.data {
        Some(dir) => Datasets::read(dir, cfg),
        None => Datasets::generate(cfg),
    }
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    out.with_file_name(name)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn progress(stage: &str, r: &LossRecord, total: u64) {
    if r.step.is_multiple_of(100) || r.step + 1 == total {
        eprintln!("[{stage}] step {} lr {:.3e} loss {:.6}", r.step, r.lr, r.loss.total);
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    common: &Common,
    stage: u8,
    init: Option<&Path>,
    resume: Option<&Path>,
    steps: Option<u64>,
    base_out: Option<&Path>,
    out: &Path,
    threads: usize,
) -> Result<()> {
    let cfg = RunConfig::load(&common.config)?;
    if stage == 2 && init.is_none() && resume.is_none() {
        return Err(Error::Usage("stage 2 needs --init pointing at a stage-1 checkpoint".into()));
    }
    if base_out.is_some() && (stage != 1 || init.is_some() || resume.is_some()) {
        return Err(Error::Usage("--base-out only applies when stage 1 builds the base".into()));
    }
    let data = load_data(common, &cfg)?;
    let (mut state, lineage) = match (resume, init) {
        (Some(path), _) => {
            let ck = load_checkpoint(path)?;
            if ck.meta.stage != stage {
                return Err(Error::Lineage(format!(
                    "cannot resume stage {stage} from a stage-{} checkpoint",
                    ck.meta.stage
                )));
            }
            let lineage = ck.meta.lineage.clone();
            (ck.into_state()?, lineage)
        }
        (None, Some(path)) => {
            let ck = load_checkpoint(path)?;
            let expected = stage - 1;
            if ck.meta.stage != expected {
                return Err(Error::Lineage(format!(
                    "stage {stage} starts from a stage-{expected} checkpoint, got stage {}",
                    ck.meta.stage
                )));
            }
            let state = if stage == 1 {
                pipeline::start_stage1(&cfg, &ck.model)?
            } else {
                pipeline::start_stage2(&cfg, &ck.model, Some(ck.meta.stage))?
            };
            (state, ck.meta.lineage)
        }
        (None, None) => {
            let total = cfg.pretrain.steps;
            let base = pipeline::build_base(&cfg, &data, |r| progress("pretrain", r, total))?;
            let lineage = pipeline::lineage_of(&base);
            if let Some(p) = base_out {
                save_checkpoint(&Checkpoint::from_model(base.clone(), 0, lineage.clone()), p)?;
            }
            (pipeline::start_stage1(&cfg, &base)?, lineage)
        }
    };
    let examples = if stage == 1 {
        data.mono_examples()?
    } else {
        data.parallel_examples()?
    };
    let total = state.config.steps;
    let mut losses = Vec::new();
    run(&mut state, &examples, steps, |r| {
        progress(&format!("stage{stage}"), r, total);
        losses.push(*r);
    })?;
    save_checkpoint(&Checkpoint::from_state(&state, lineage.clone()), out)?;
    write_loss_csv(&sidecar(out, ".losses.csv"), &losses)?;
    let summary = TrainSummary {
        stage,
        step: state.step,
        lineage: &lineage,
        config_hash: cfg.hash()?,
        seed: cfg.seed,
        threads,
        final_loss: losses.last(),
    };
    write_json(&sidecar(out, ".run.json"), &summary)?;
    match losses.last() {
        Some(r) => println!(
            "stage {stage} finished at step {}: total {:.6} ce {:.6} lb_lm {} lb_mt {}",
            state.step,
            r.loss.total,
            r.loss.ce,
            r.loss.lb_lm.map_or("-".into(), |v| format!("{v:.6}")),
            r.loss.lb_mt.map_or("-".into(), |v| format!("{v:.6}")),
        ),
        None => println!("stage {stage} at step {}: no steps taken", state.step),
    }
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn cmd_eval(common: &Common, ckpt: &Path, ckpt2: Option<&Path>, mode: EvalMode, out: &Path) -> Result<()> {
    if mode == EvalMode::Interference && ckpt2.is_none() {
        return Err(Error::Usage("interference mode needs --ckpt (stage 1) and --ckpt2 (stage 2)".into()));
    }
    if mode != EvalMode::Interference && ckpt2.is_some() {
        return Err(Error::Usage("--ckpt2 only applies to interference mode".into()));
    }
    let cfg = RunConfig::load(&common.config)?;
    let data = load_data(common, &cfg)?;
    let ck = load_checkpoint(ckpt)?;
    match mode {
        EvalMode::Bleu => {
            if data.test.records.is_empty() {
                return Err(Error::Usage("data holds no held-out parallel pairs".into()));
            }
            let report = pipeline::bleu(&cfg, &ck.model, &data)?;
            println!("toy-BLEU {:.2}", report.overall.score);
            write_json(out, &report)
        }
        EvalMode::Ppl => {
            #[derive(Serialize)]
            struct PplReport {
                mono_eval: f64,
                parallel_test: f64,
            }
            let test: Vec<_> = data
                .test
                .records
                .iter()
                .map(|r| encode_example(&data.set, Item::Parallel(r), 2))
                .collect::<Result<_>>()?;
            let report = PplReport {
                mono_eval: perplexity(&ck.model, &data.mono_eval_examples()?, ForwardOptions::default())?,
                parallel_test: perplexity(&ck.model, &test, ForwardOptions::default())?,
            };
            println!("perplexity mono {:.6} parallel {:.6}", report.mono_eval, report.parallel_test);
            write_json(out, &report)
        }
        EvalMode::Routes => {
            if ck.model.is_dense() {
                return Err(Error::Usage("routes mode needs a Mix-MoE checkpoint".into()));
            }
            let mut labelled = Vec::new();
            for r in &data.mono_eval.records {
                labelled.push((r.lang.clone(), encode_example(&data.set, Item::Mono(r), 1)?));
            }
            if ck.model.has_mt() {
                for r in &data.test.records {
                    labelled.push((r.direction.clone(), encode_example(&data.set, Item::Parallel(r), 2)?));
                }
            }
            let stats = route_stats(&ck.model, &labelled)?;
            stats.write_csv(out)?;
            stats.write_label_csv(&sidecar(out, ".by_label.csv"))?;
            println!("max expert share {:.4}", stats.max_share());
            Ok(())
        }
        EvalMode::Interference => {
            let second = load_checkpoint(ckpt2.expect("checked above"))?;
            let report = interference_probe(&ck, &second, &data.mono_eval_examples()?)?;
            println!(
                "mono perplexity: stage 1 {:.9}, stage 2 {:.9}, stage 2 with MT disabled {:.9}",
                report.stage1_ppl, report.stage2_ppl, report.stage2_mt_disabled_ppl
            );
            write_json(out, &report)
        }
    }
}

fn cmd_ablate(common: &Common, axis: &str, values: Option<&[String]>, out: &Path) -> Result<()> {
    let axis = AblationAxis::parse(axis)?;
    let values = values.map_or_else(|| axis.grid(), |v| v.to_vec());
    let cfg = RunConfig::load(&common.config)?;
    let data = load_data(common, &cfg)?;
    println!("{}", pipeline::AblationRow::CSV_HEADER);
    let rows = pipeline::ablate(&cfg, &data, axis, &values, |row| println!("{}", row.csv_row()))?;
    pipeline::write_ablation_csv(out, &rows)
}

fn cmd_gen_data(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let manifest = Datasets::generate(&cfg)?.write(out, cfg.seed)?;
    for (name, f) in &manifest.files {
        println!("{name}: {} records, sha256 {}", f.records, f.sha256);
    }
    Ok(())
}

pub fn execute(cli: Cli, threads: usize) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => cmd_gen_data(&config, &out),
        Command::Train {
            common,
            stage,
            init,
            resume,
            steps,
            base_out,
            out,
        } => cmd_train(
            &common,
            stage,
            init.as_deref(),
            resume.as_deref(),
            steps,
            base_out.as_deref(),
            &out,
            threads,
        ),
        Command::Eval {
            common,
            ckpt,
            ckpt2,
            mode,
            out,
        } => cmd_eval(&common, &ckpt, ckpt2.as_deref(), mode, &out),
        Command::Ablate {
            common,
            axis,
            values,
            out,
        } => cmd_ablate(&common, &axis, values.as_deref(), &out),
    }
}

/// Parses arguments, runs the command, reports errors on stderr, and returns
/// the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let threads = match threads_from(std::env::var(THREADS_ENV).ok().as_deref()) {
        Ok(n) => n,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    match execute(cli, threads) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
