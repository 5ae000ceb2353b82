//! The `mgrcl` command line: data generation, pre-training, episodic
//! evaluation, gradient verification and embedding export.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error, 3 a
//! verification check failed.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use mgrcl::dataset::{self, generate_synthetic};
use mgrcl::fewshot::{run_eval, save_report, write_embeddings};
use mgrcl::gradient_suite::{run_suite, LossKind, SuiteConfig};
use mgrcl::losses::{Ablation, LossWeights};
use mgrcl::model::{load_checkpoint, save_checkpoint};
use mgrcl::trainer::{pretrain_with, save_history};

use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

pub const BASE_FILE: &str = "base.mgrclds";
pub const NOVEL_FILE: &str = "novel.mgrclds";
pub const CHECKPOINT_FILE: &str = "checkpoint.mgrclck";
pub const HISTORY_FILE: &str = "history.tsv";

/// Environment variable capping worker threads; defaults to 1.
pub const THREADS_ENV: &str = "MGRCL_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "mgrcl",
    version,
    about = "Few-shot pre-training with transformation and class relations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic base and novel containers.
    GenData(GenDataArgs),
    /// Pre-train on a base container; writes a checkpoint and a history TSV.
    Pretrain(PretrainArgs),
    /// Episodic N-way K-shot evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Compare every loss gradient against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write image_id, category and the 64 feature values of every image.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    base_classes: usize,
    #[arg(long, default_value_t = 5)]
    novel_classes: usize,
    #[arg(long, default_value_t = 40)]
    per_class: usize,
    /// Image side, 16 or 32.
    #[arg(long, default_value_t = 16)]
    size: usize,
    /// Output directory; receives base.mgrclds and novel.mgrclds.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Base-split container.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint.mgrclck and history.tsv.
    #[arg(long)]
    out: PathBuf,
    /// key = value run configuration applied before the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training schedule preset.
    #[arg(long, value_parser = ["desk", "paper-protocol"])]
    preset: Option<String>,
    /// Loss terms to train with.
    #[arg(long, value_parser = ["base", "ss", "tcl", "ccl", "all"])]
    ablation: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Novel-split container.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    k_shot: Option<usize>,
    #[arg(long)]
    q_query: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the per-episode report TSV here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Restrict to one loss.
    #[arg(long, value_parser = ["cls", "ss", "tcl", "ccl", "total", "all"], default_value = "all")]
    loss: String,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coordinates sampled per parameter tensor.
    #[arg(long, default_value_t = 24)]
    coords: usize,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output TSV.
    #[arg(long)]
    out: PathBuf,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<mgrcl::Error> for Failure {
    fn from(e: mgrcl::Error) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: format!("error: {e}"),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        mgrcl::Error::from(e).into()
    }
}

type CmdResult = Result<i32, Failure>;

/// Parses `args` (including the program name) and runs the command,
/// writing normal output to `out`. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    if let Err(f) = init_threads() {
        let _ = writeln!(err, "{}", f.message);
        return f.code;
    }
    let result = match cli.command {
        Command::GenData(a) => gen_data(a, out),
        Command::Pretrain(a) => pretrain(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::ExportEmbeddings(a) => export(a, out),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "{}", f.message);
            f.code
        }
    }
}

fn init_threads() -> Result<(), Failure> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Failure::usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?,
        Err(_) => 1,
    };
    // A second initialization in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

fn read_config(path: &Option<PathBuf>) -> Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            RunConfig::parse(&text).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))
        }
    }
}

fn gen_data(a: GenDataArgs, out: &mut dyn Write) -> CmdResult {
    let (base, novel) = generate_synthetic(a.base_classes, a.novel_classes, a.per_class, a.size, a.seed)
        .map_err(|e| Failure::usage(e.to_string()))?;
    fs::create_dir_all(&a.out)?;
    let (bp, np) = (a.out.join(BASE_FILE), a.out.join(NOVEL_FILE));
    dataset::save(&base, &bp)?;
    dataset::save(&novel, &np)?;
    writeln!(out, "wrote {} ({} images)", bp.display(), base.len())?;
    writeln!(out, "wrote {} ({} images)", np.display(), novel.len())?;
    Ok(EXIT_OK)
}

fn pretrain(a: PretrainArgs, out: &mut dyn Write) -> CmdResult {
    let mut rc = read_config(&a.config)?;
    if let Some(p) = &a.preset {
        let weights = rc.train.loss_weights;
        let seed = rc.train.seed;
        rc.train = config::preset(p).expect("validated by clap");
        rc.train.loss_weights = weights;
        rc.train.seed = seed;
    }
    if let Some(name) = &a.ablation {
        let ab = Ablation::parse(name).expect("validated by clap");
        let w = LossWeights::for_ablation(ab);
        rc.train.loss_weights = LossWeights {
            tau1: rc.train.loss_weights.tau1,
            tau2: rc.train.loss_weights.tau2,
            ..w
        };
    }
    if let Some(e) = a.epochs {
        rc.train.epochs = e;
        rc.train.lr_decay_epochs.retain(|&d| d < e);
    }
    if let Some(b) = a.batch_size {
        rc.train.batch_size = b;
    }
    if let Some(s) = a.seed {
        rc.train.seed = s;
    }
    rc.train.validate().map_err(|e| Failure::usage(e.to_string()))?;
    let base = dataset::load(&a.data)?;
    let cfg = rc.train.clone();
    let quiet = a.quiet;
    let (params, history) = pretrain_with(&base, &cfg, |s| {
        if !quiet {
            eprintln!(
                "epoch {}/{} lr {} cls {:.4} ss {:.4} tcl {:.5} ccl {:.4} total {:.4} ({:.1} img/s)",
                s.epoch + 1,
                cfg.epochs,
                s.lr,
                s.mean.cls,
                s.mean.ss,
                s.mean.tcl,
                s.mean.ccl,
                s.mean.total,
                s.images_per_second()
            );
        }
    })?;
    fs::create_dir_all(&a.out)?;
    let (cp, hp) = (a.out.join(CHECKPOINT_FILE), a.out.join(HISTORY_FILE));
    save_checkpoint(&params, &cp)?;
    save_history(&history, &hp)?;
    writeln!(out, "wrote {}", cp.display())?;
    writeln!(out, "wrote {} ({} epochs)", hp.display(), history.len())?;
    Ok(EXIT_OK)
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> CmdResult {
    let mut p = read_config(&a.config)?.eval;
    if let Some(v) = a.n_way {
        p.n_way = v;
    }
    if let Some(v) = a.k_shot {
        p.k_shot = v;
    }
    if let Some(v) = a.q_query {
        p.q_query = v;
    }
    if let Some(v) = a.episodes {
        p.episodes = v;
    }
    if let Some(v) = a.seed {
        p.seed = v;
    }
    if p.n_way == 0 || p.k_shot == 0 || p.q_query == 0 || p.episodes == 0 {
        return Err(Failure::usage("n-way, k-shot, q-query and episodes must be >= 1"));
    }
    let params = load_checkpoint(&a.checkpoint)?;
    let novel = dataset::load(&a.data)?;
    let report = run_eval(&params, &novel, &p)?;
    if let Some(path) = &a.report {
        save_report(&report, path)?;
    }
    writeln!(
        out,
        "{}-way {}-shot: {} ({} episodes)",
        p.n_way,
        p.k_shot,
        report.summary(),
        report.n_episodes
    )?;
    Ok(EXIT_OK)
}

fn gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> CmdResult {
    if a.eps.is_nan() || a.eps <= 0.0 || a.tolerance.is_nan() || a.tolerance <= 0.0 || a.coords == 0 {
        return Err(Failure::usage("eps and tolerance must be > 0 and coords >= 1"));
    }
    let kinds: Vec<LossKind> = match LossKind::parse(&a.loss) {
        Some(k) => vec![k],
        None => LossKind::ALL.to_vec(),
    };
    let cfg = SuiteConfig {
        seed: a.seed,
        eps: a.eps,
        tolerance: a.tolerance,
        coords_per_tensor: a.coords,
        ..SuiteConfig::default()
    };
    let checks = run_suite(&cfg, &kinds)?;
    let mut ok = true;
    for c in &checks {
        let pass = c.passed(a.tolerance);
        ok &= pass;
        writeln!(
            out,
            "{} l_{}: max rel err {:.3e} at {} over {} coordinates ({} skipped at ReLU kinks)",
            if pass { "PASS" } else { "FAIL" },
            c.kind.name(),
            c.max_rel_error,
            c.worst,
            c.coordinates,
            c.kink_skips
        )?;
    }
    Ok(if ok { EXIT_OK } else { EXIT_VERIFY })
}

fn export(a: ExportArgs, out: &mut dyn Write) -> CmdResult {
    let params = load_checkpoint(&a.checkpoint)?;
    let ds = dataset::load(&a.data)?;
    write_embeddings(&params, &ds, BufWriter::new(fs::File::create(&a.out)?))?;
    writeln!(out, "wrote {} ({} rows)", a.out.display(), ds.len())?;
    Ok(EXIT_OK)
}
