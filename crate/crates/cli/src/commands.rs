//! Subcommands and their exit codes.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mmnets::data::{read_image, read_labels, write_image, ImageFormat};
use mmnets::gradsuite::{self, SUITE_TOLERANCE};
use mmnets::losses::{argmax_labels, Slot};
use mmnets::metrics::{self, MetricRow, ReportFormat};
use mmnets::networks::Modality;
use mmnets::tensor::Tensor;
use mmnets::trainer::eval::{evaluate, EvalOptions, Route};
use mmnets::trainer::{
    load_checkpoint, run_schedule, save_checkpoint, ModalityData, MonitorConfig, StageConfig, TaskData,
    TrainState, LOG_HEADER,
};

use crate::config::{parse_config, parse_config_str, render_config, ConfigError, ExperimentConfig, TaskKind};
use crate::dataset::Dataset;
use crate::palette::colorize;

/// Exit code for a run that completed but failed a check.
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_ERROR: i32 = 1;

/// A check that ran and failed, as opposed to a usage or runtime error.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ValidationFailure(pub String);

#[derive(Parser, Debug)]
#[command(name = "mmnets", version, about = "Zero-pair cross-modal translation with mix-and-match encoders and decoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Experiment configuration file; all keys are optional.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Overrides `paths.out_dir`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Cascade,
    Fusion,
    #[value(name = "no_pp")]
    NoPp,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset and its manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Target directory; defaults to `paths.data_dir`, then `<out>/data`.
        #[arg(long, value_name = "DIR")]
        dir: Option<PathBuf>,
    },
    /// Run the staged schedule, writing checkpoints, metrics.csv and sample images.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from `checkpoints/latest.ckpt` of the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score the trained translators and write report.txt and report.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Comparisons to include; overrides the `eval.*` switches.
        #[arg(long, value_enum, value_delimiter = ',')]
        baselines: Option<Vec<Baseline>>,
        /// Checkpoint to score; defaults to `checkpoints/final.ckpt`.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Translate one image file through an encoder/decoder pair.
    Translate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        from: Modality,
        #[arg(long)]
        to: Modality,
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// `.mmt` writes raw values; anything else writes PPM/PGM.
        #[arg(long, value_name = "PATH")]
        output: PathBuf,
        /// Defaults to `checkpoints/final.ckpt`.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Run the gradient suite in 64-bit mode.
    Gradcheck {
        /// Random seeds per case.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Render a metrics CSV as a table.
    Report {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/report.csv`.
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
        #[arg(long, default_value = "text")]
        format: ReportFormat,
        /// Defaults to standard output.
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { 0 };
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return EXIT_ERROR;
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> i32 {
    if e.downcast_ref::<ValidationFailure>().is_some() {
        return EXIT_VALIDATION;
    }
    match e.downcast_ref::<ConfigError>() {
        Some(ConfigError::Io { .. }) | None => EXIT_ERROR,
        Some(_) => EXIT_VALIDATION,
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("MMNETS_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("MMNETS_THREADS must be a positive integer, got {v:?}"))?;
    mmnets::parallel::init_threads(n);
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { common, dir } => gen_data(&load_config(&common)?, dir),
        Command::Train { common, resume } => train(&load_config(&common)?, resume),
        Command::Eval {
            common,
            baselines,
            checkpoint,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(b) = baselines {
                cfg.eval.cascade = b.contains(&Baseline::Cascade);
                cfg.eval.fusion = b.contains(&Baseline::Fusion);
                cfg.eval.no_pp = b.contains(&Baseline::NoPp);
            }
            eval(&cfg, checkpoint)
        }
        Command::Translate {
            common,
            from,
            to,
            input,
            output,
            checkpoint,
        } => translate(&load_config(&common)?, from, to, &input, &output, checkpoint),
        Command::Gradcheck { seeds } => gradcheck(seeds),
        Command::Report {
            common,
            input,
            format,
            output,
        } => {
            let cfg = load_config(&common)?;
            let input = input.unwrap_or_else(|| cfg.paths.out_dir.join("report.csv"));
            report(&input, format, output.as_deref())
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => parse_config(p)?,
        None => parse_config_str("")?,
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.paths.out_dir = o.clone();
    }
    Ok(cfg)
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write_file(p: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(p, bytes).with_context(|| format!("writing {}", p.display()))
}

fn gen_data(cfg: &ExperimentConfig, dir: Option<PathBuf>) -> Result<()> {
    let dir = dir
        .or_else(|| cfg.paths.data_dir.clone())
        .unwrap_or_else(|| cfg.paths.out_dir.join("data"));
    create_dir(&dir)?;
    let n = Dataset::generate(cfg).write(&dir)?;
    println!("wrote {n} {} samples to {}", cfg.data.task.name(), dir.display());
    Ok(())
}

fn ckpt_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.paths.out_dir.join("checkpoints")
}

fn fresh_state(cfg: &ExperimentConfig) -> Result<TrainState> {
    Ok(TrainState::new(cfg.task_spec(), &cfg.arch, cfg.train.batch, cfg.seed)?)
}

fn state_from(cfg: &ExperimentConfig, ckpt: &Path) -> Result<TrainState> {
    let mut st = fresh_state(cfg)?;
    load_checkpoint(ckpt, &mut st).with_context(|| format!("loading {}", ckpt.display()))?;
    Ok(st)
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Log rows already on disk up to `iteration`, for appending after a resume.
fn kept_rows(path: &Path, iteration: u64) -> Vec<String> {
    let Ok(text) = fs::read_to_string(path) else { return Vec::new() };
    text.lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|v| v.parse::<u64>().ok())
                .is_some_and(|i| i <= iteration)
        })
        .map(str::to_string)
        .collect()
}

fn write_rows(path: &Path, rows: &[String]) -> Result<()> {
    let mut text = String::from(LOG_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    write_file(path, text)
}

/// Trains `state` through `stages`, pausing at every stage end and every
/// `checkpoint_every` iterations to write `latest.ckpt`, the stage
/// checkpoints, and the log.
fn drive(
    cfg: &ExperimentConfig,
    state: &mut TrainState,
    stages: &[StageConfig],
    data: &TaskData,
    log_path: &Path,
    rows: &mut Vec<String>,
    stage_prefix: &str,
) -> Result<()> {
    let dir = ckpt_dir(cfg);
    let ends: Vec<u64> = stages
        .iter()
        .scan(0, |acc, s| {
            *acc += s.iterations;
            Some(*acc)
        })
        .collect();
    let total = ends.last().copied().unwrap_or(0);
    let mut stops: BTreeSet<u64> = ends.iter().copied().collect();
    if cfg.train.checkpoint_every > 0 {
        stops.extend((1..).map(|k| k * cfg.train.checkpoint_every).take_while(|&i| i < total));
    }
    let monitor = MonitorConfig {
        log_every: cfg.train.log_every,
        samples: cfg.train.monitor_samples,
    };
    while state.iteration < total {
        let next = *stops.range(state.iteration + 1..).next().expect("total is a stop");
        run_schedule(state, stages, data, &monitor, Some(next), |row| {
            println!("{stage_prefix}iter {:>6}  stage {}  loss {:.5}", row.iteration, row.stage, row.report.total);
            rows.push(row.csv());
        })?;
        for (k, _) in ends.iter().enumerate().filter(|(_, &e)| e == state.iteration) {
            save_checkpoint(&dir.join(format!("{stage_prefix}stage{}.ckpt", k + 1)), state)?;
        }
        save_checkpoint(&dir.join(format!("{stage_prefix}latest.ckpt")), state)?;
        write_rows(log_path, rows)?;
    }
    Ok(())
}

/// The schedule with pseudo-pairs removed, and the index of the first
/// stage that used them.
fn without_pseudo_pairs(stages: &[StageConfig]) -> Option<(usize, Vec<StageConfig>)> {
    let first = stages.iter().position(|s| s.pseudo_pairs)?;
    let mut out = stages.to_vec();
    for s in &mut out[first..] {
        s.pseudo_pairs = false;
        s.weights.pp = 0.0;
    }
    Some((first, out))
}

fn train(cfg: &ExperimentConfig, resume: bool) -> Result<()> {
    let out = &cfg.paths.out_dir;
    let started = unix_now();
    let dir = ckpt_dir(cfg);
    create_dir(&dir)?;
    create_dir(&out.join("images"))?;
    let snapshot = out.join("config.snapshot");
    let rendered = render_config(cfg);
    if resume {
        if let Ok(prev) = fs::read_to_string(&snapshot) {
            if prev != rendered {
                bail!("configuration differs from the run in {}; resume needs the same config", out.display());
            }
        }
    }
    write_file(&snapshot, &rendered)?;

    let data = Dataset::obtain(cfg)?.task_data(cfg.data.classes)?;
    let latest = dir.join("latest.ckpt");
    let mut state = if resume && latest.exists() {
        let st = state_from(cfg, &latest)?;
        println!("resuming at iteration {}", st.iteration);
        st
    } else {
        fresh_state(cfg)?
    };
    let log_path = out.join("metrics.csv");
    let mut rows = if resume { kept_rows(&log_path, state.iteration) } else { Vec::new() };
    drive(cfg, &mut state, &cfg.stages, &data, &log_path, &mut rows, "")?;
    save_checkpoint(&dir.join("final.ckpt"), &state)?;
    dump_images(&out.join("images"), &state, &data, "")?;

    if cfg.eval.no_pp {
        match without_pseudo_pairs(&cfg.stages) {
            Some((first, stages)) => {
                let final_no_pp = dir.join("final_no_pp.ckpt");
                if !(resume && final_no_pp.exists()) {
                    let mut branch = if first == 0 {
                        fresh_state(cfg)?
                    } else {
                        state_from(cfg, &dir.join(format!("stage{first}.ckpt")))?
                    };
                    let log = out.join("metrics_no_pp.csv");
                    let mut rows = Vec::new();
                    drive(cfg, &mut branch, &stages, &data, &log, &mut rows, "no_pp_")?;
                    save_checkpoint(&final_no_pp, &branch)?;
                    dump_images(&out.join("images"), &branch, &data, "no_pp_")?;
                }
            }
            None => println!("eval.no_pp is set but no stage uses pseudo-pairs; skipping the ablation branch"),
        }
    }
    write_file(
        &out.join("run-info.txt"),
        format!("started_unix = {started}\nfinished_unix = {}\n", unix_now()),
    )?;
    println!("finished at iteration {}; outputs in {}", state.iteration, out.display());
    Ok(())
}

/// Writes one `(1, c, h, w)` image of modality `m`: segmentations through
/// the palette, opponent channels shifted from `[-1, 1]` into `[0, 1]`.
fn write_modality(path: &Path, m: Modality, image: &Tensor<f32>) -> Result<()> {
    if ImageFormat::from_path(path) == Some(ImageFormat::Raw) {
        write_image(path, image, ImageFormat::Raw)?;
        return Ok(());
    }
    let s = image.shape();
    let (img, fmt) = match m {
        Modality::Seg => (colorize(&argmax_labels(image), s.h(), s.w()), ImageFormat::P6),
        Modality::Theta1 | Modality::Theta2 => {
            let data = image.data().iter().map(|v| (v + 1.0) / 2.0).collect();
            (Tensor::from_vec(s, data)?, ImageFormat::P5)
        }
        _ if s.c() == 3 => (image.clone(), ImageFormat::P6),
        _ => (image.clone(), ImageFormat::P5),
    };
    write_image(path, &img, fmt)?;
    Ok(())
}

fn image_ext(m: Modality, c: usize) -> &'static str {
    if m == Modality::Seg || c == 3 {
        "ppm"
    } else {
        "pgm"
    }
}

const DUMP_SAMPLES: usize = 4;

/// Ground truth and both zero-pair translations of the first test samples.
fn dump_images(dir: &Path, state: &TrainState, data: &TaskData, prefix: &str) -> Result<()> {
    let task = &state.task;
    let n = DUMP_SAMPLES.min(data.test[0].len());
    for i in 0..n {
        let sample = |slot: Slot| data.test[slot.index()].input.gather_samples(&[i]);
        // Ground truth is shared by every branch of the run.
        for slot in [Slot::Anchor, Slot::First, Slot::Second].into_iter().filter(|_| prefix.is_empty()) {
            let m = task.modality(slot);
            let x = sample(slot);
            let name = format!("{prefix}{i:02}_{}_gt.{}", m.name(), image_ext(m, x.shape().c()));
            write_modality(&dir.join(name), m, &x)?;
        }
        for (from, to) in [(Slot::Second, Slot::First), (Slot::First, Slot::Second)] {
            let (mf, mt) = (task.modality(from), task.modality(to));
            let y = state.nets.translate(mf, mt, &sample(from))?;
            let name = format!("{prefix}{i:02}_{}_to_{}.{}", mf.name(), mt.name(), image_ext(mt, y.shape().c()));
            write_modality(&dir.join(name), mt, &y)?;
        }
    }
    Ok(())
}

fn with_method(row: MetricRow, f: impl FnOnce(&str) -> String) -> MetricRow {
    match row {
        MetricRow::Seg { method, metrics } => MetricRow::Seg {
            method: f(&method),
            metrics,
        },
        MetricRow::Depth { method, metrics } => MetricRow::Depth {
            method: f(&method),
            metrics,
        },
        MetricRow::Accuracy { method, accuracy } => MetricRow::Accuracy {
            method: f(&method),
            accuracy,
        },
    }
}

fn report_classes(cfg: &ExperimentConfig) -> usize {
    match cfg.data.task {
        TaskKind::Scenes => cfg.data.classes,
        TaskKind::Opponent => 0,
    }
}

fn eval(cfg: &ExperimentConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let out = &cfg.paths.out_dir;
    let ckpt = checkpoint.unwrap_or_else(|| ckpt_dir(cfg).join("final.ckpt"));
    if !ckpt.exists() {
        bail!("no checkpoint at {}; run `mmnets train` with the same config first", ckpt.display());
    }
    let ds = Dataset::obtain(cfg)?;
    let data = ds.task_data(cfg.data.classes)?;
    let oracle = ds.oracle()?;
    let task = cfg.task_spec();
    let opts = EvalOptions {
        alpha: cfg.eval.alpha,
        cascade: cfg.eval.cascade,
        fusion: cfg.eval.fusion,
    };
    let score = |ckpt: &Path, opts: &EvalOptions| -> Result<_> {
        let state = state_from(cfg, ckpt)?;
        Ok(evaluate(&state.nets, &task, &data.test, data.test_classes.as_deref(), oracle.as_ref(), opts)?)
    };
    let mut rows = score(&ckpt, &opts)?.rows();
    if cfg.eval.no_pp {
        let branch = ckpt_dir(cfg).join("final_no_pp.ckpt");
        if !branch.exists() {
            bail!(
                "no ablation checkpoint at {}; train with `eval.no_pp = true` to produce it",
                branch.display()
            );
        }
        let direct_only = EvalOptions {
            cascade: false,
            fusion: false,
            ..opts
        };
        let ablation = score(&branch, &direct_only)?;
        rows.extend(
            ablation
                .entries
                .into_iter()
                .filter(|e| zero_pair(e.route))
                .map(|e| with_method(e.row, |m| format!("{m} no-PP"))),
        );
    }
    let classes = report_classes(cfg);
    let text = metrics::render_report(&rows, classes, ReportFormat::TextTable);
    create_dir(out)?;
    write_file(&out.join("report.txt"), &text)?;
    write_file(&out.join("report.csv"), metrics::render_report(&rows, classes, ReportFormat::Csv))?;
    print!("{text}");
    Ok(())
}

/// Routes between the two partners, which never co-occur in training.
fn zero_pair(route: Route) -> bool {
    matches!(route, Route::Direct { from, .. } if from != Slot::Anchor)
}

fn read_input(cfg: &ExperimentConfig, m: Modality, path: &Path) -> Result<Tensor<f32>> {
    let (h, w) = cfg.arch.input_hw;
    let image = if m == Modality::Seg {
        let (lh, lw, ids) = read_labels(path)?;
        if (lh, lw) != (h, w) {
            bail!("{}: label map is {lh}x{lw}, expected {h}x{w}", path.display());
        }
        let k = cfg.data.classes;
        if let Some(bad) = ids.iter().find(|&&v| v as usize >= k) {
            bail!("{}: label {bad} out of range for {k} classes", path.display());
        }
        ModalityData::from_labels(ids.iter().map(|&v| v as usize).collect(), 1, k, h, w)?.input
    } else {
        read_image(path)?
    };
    let s = image.shape();
    if (s.h(), s.w()) != (h, w) {
        bail!("{}: image is {}x{}, expected {h}x{w}", path.display(), s.h(), s.w());
    }
    Ok(image)
}

fn translate(cfg: &ExperimentConfig, from: Modality, to: Modality, input: &Path, output: &Path, checkpoint: Option<PathBuf>) -> Result<()> {
    let task = cfg.task_spec();
    let known: Vec<Modality> = task.specs.iter().map(|s| s.modality).collect();
    for m in [from, to] {
        if !known.contains(&m) {
            let names: Vec<&str> = known.iter().map(|m| m.name()).collect();
            bail!("modality {m} is not part of the {} task ({})", cfg.data.task.name(), names.join(", "));
        }
    }
    let ckpt = checkpoint.unwrap_or_else(|| ckpt_dir(cfg).join("final.ckpt"));
    let state = state_from(cfg, &ckpt)?;
    let x = read_input(cfg, from, input)?;
    let want = state.nets.spec(from)?.channels;
    if x.shape().c() != want {
        bail!("{}: {from} input needs {want} channels, file has {}", input.display(), x.shape().c());
    }
    let y = state.nets.translate(from, to, &x)?;
    write_modality(output, to, &y)?;
    println!("wrote {} ({from} to {to})", output.display());
    Ok(())
}

fn gradcheck(seeds: u64) -> Result<()> {
    if seeds == 0 {
        bail!("--seeds must be positive");
    }
    let results = gradsuite::run_suite(0..seeds)?;
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for name in gradsuite::case_names() {
        let mine: Vec<_> = results.iter().filter(|r| r.case == name).collect();
        let err = mine.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max);
        let checked: usize = mine.iter().map(|r| r.report.checked).sum();
        let ok = mine.iter().all(|r| r.passed());
        println!("{name:<32} {err:.3e}  {checked:>6} checked  {}", if ok { "ok" } else { "FAIL" });
        worst = worst.max(err);
        if !ok {
            failed.push(name);
        }
    }
    println!("max relative error {worst:.3e} (tolerance {SUITE_TOLERANCE:e}) over {} cases x {seeds} seeds", gradsuite::case_names().len());
    if !failed.is_empty() {
        return Err(ValidationFailure(format!("gradient check failed for {}", failed.join(", "))).into());
    }
    Ok(())
}

fn report(input: &Path, format: ReportFormat, output: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(input).with_context(|| format!("reading {}; run `mmnets eval` first", input.display()))?;
    let rows = metrics::parse_report_csv(&text).with_context(|| format!("parsing {}", input.display()))?;
    let classes = rows
        .iter()
        .filter_map(|r| match r {
            MetricRow::Seg { metrics, .. } => Some(metrics.per_class_iou.len()),
            _ => None,
        })
        .max()
        .unwrap_or(0);
    let rendered = metrics::render_report(&rows, classes, format);
    match output {
        Some(p) => write_file(p, rendered)?,
        None => print!("{rendered}"),
    }
    Ok(())
}
