//! The `nerf-id` command line: `train`, `render`, `eval` and `sweep`.
//!
//! Exit codes: 0 on success, 2 for user errors (bad flags, configs, paths),
//! 3 for numerical failures.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{SecondsFormat, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, load_model, save_model, save_trainer};
use crate::error::{Error, Result};
use crate::gradcore::Real;
use crate::scenes::{Dataset, Split, View};
use crate::trainer::{evaluate, render_view, Model, RunConfig, Sampler, StepRecord, Trainer, TrainingMode, METRICS_HEADER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const MANIFEST_NAME: &str = "run.toml";
pub const METRICS_NAME: &str = "metrics.csv";
pub const MODEL_NAME: &str = "model.ckpt";
pub const STATE_NAME: &str = "state.ckpt";

/// Package version plus the source revision it was built from.
pub fn version() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), env!("NERF_ID_SOURCE_REV"))
}

#[derive(Debug, Parser)]
#[command(name = "nerf-id", version = env!("CARGO_PKG_VERSION"), about = "Train and render NeRF models with learnt sample proposers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints and metrics.csv.
    Train(TrainArgs),
    /// Render the views of a split to PPM images.
    Render(RenderArgs),
    /// Per-image and mean PSNR/SSIM of a split.
    Eval(EvalArgs),
    /// Quality against fine-sample budget over importance thresholds.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in configuration: desk-spheres, desk-boxes, micro or full-scale.
    #[arg(long)]
    pub preset: Option<String>,
    /// Training seed (initialisation and ray batches; the scene is fixed by its own seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// heuristic, transformer, pool, mlpmix, blind, pool_no_position, pool_concat or pool_learnt_position.
    #[arg(long)]
    pub proposer: Option<Sampler>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Skip stage 1 and train the proposer from scratch.
    #[arg(long)]
    pub scratch: bool,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing run directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ViewArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub view: ViewArgs,
    /// Query the fine network only on samples with predicted importance >= threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub view: ViewArgs,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Also write eval.csv and a manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub view: ViewArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.02,0.03,0.05,0.1,0.2,0.3,0.5,0.7,0.9")]
    pub thresholds: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

/// Written as `run.toml` into every output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub started: String,
    pub finished: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub config: RunConfig,
}

impl RunManifest {
    fn new(command: &str, config: &RunConfig, checkpoint: Option<&Path>) -> Self {
        Self {
            command: command.into(),
            version: version(),
            seed: config.train.seed,
            started: now(),
            finished: None,
            checkpoint: checkpoint.map(Path::to_path_buf),
            outputs: Vec::new(),
            config: config.clone(),
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string(self).expect("manifest serializes");
        checkpoint::write_atomic(&dir.join(MANIFEST_NAME), text.as_bytes())
    }

    fn finish(&mut self, dir: &Path) -> Result<()> {
        self.finished = Some(now());
        self.write(dir)
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USER } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_USER
            }
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Render(a) => by_width(&a.view.checkpoint, || cmd_render::<f32>(&a), || cmd_render::<f64>(&a)),
        Command::Eval(a) => by_width(&a.view.checkpoint, || cmd_eval::<f32>(&a), || cmd_eval::<f64>(&a)),
        Command::Sweep(a) => by_width(&a.view.checkpoint, || cmd_sweep::<f32>(&a), || cmd_sweep::<f64>(&a)),
    }
}

fn by_width(path: &Path, f32: impl FnOnce() -> Result<()>, f64: impl FnOnce() -> Result<()>) -> Result<()> {
    match checkpoint::element_width(path)? {
        4 => f32(),
        8 => f64(),
        w => Err(Error::Invalid(format!("{}: unsupported element width {w}", path.display()))),
    }
}

/// Builds the run configuration from a preset or file plus flag overrides.
pub fn resolve_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
                _ => e.into(),
            })?;
            RunConfig::from_toml(&text).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
                e => e,
            })?
        }
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(sampler) = args.proposer {
        cfg.model.sampler = sampler;
    }
    if let Some(steps) = args.steps {
        cfg.train.total_steps = steps;
    }
    if args.scratch {
        cfg.train.mode = TrainingMode::Scratch;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates `dir`, or clears a previous run directory when `force` is set.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Error::Invalid(format!("{} is not a directory", dir.display())));
        }
        let empty = fs::read_dir(dir)?.next().is_none();
        if !empty {
            if !force {
                return Err(Error::Invalid(format!(
                    "output directory {} already exists; pass --force to replace it",
                    dir.display()
                )));
            }
            if !dir.join(MANIFEST_NAME).is_file() {
                return Err(Error::Invalid(format!(
                    "refusing to clear {}: it holds no {MANIFEST_NAME}",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    prepare_out_dir(&args.out, args.force)?;
    let mut manifest = RunManifest::new("train", &cfg, None);
    manifest.write(&args.out)?;
    let dataset = cfg.scene.dataset()?;
    match args.precision {
        Precision::F32 => train_with::<f32>(cfg, &dataset, &args.out, &mut manifest),
        Precision::F64 => train_with::<f64>(cfg, &dataset, &args.out, &mut manifest),
    }
}

fn train_with<T: Real>(cfg: RunConfig, dataset: &Dataset, out: &Path, manifest: &mut RunManifest) -> Result<()> {
    let metrics_path = out.join(METRICS_NAME);
    let state_path = out.join(STATE_NAME);
    let model_path = out.join(MODEL_NAME);
    let mut metrics = OpenOptions::new().create(true).append(true).open(&metrics_path)?;
    writeln!(metrics, "{METRICS_HEADER}")?;
    manifest.outputs = vec![metrics_path.clone(), state_path.clone(), model_path.clone()];
    manifest.write(out)?;

    let every = cfg.train.checkpoint_every;
    let mut trainer = Trainer::<T>::new(cfg, dataset)?;
    let started = Instant::now();
    trainer.run(|t, rec: &StepRecord| {
        writeln!(metrics, "{}", rec.csv_row())?;
        metrics.flush()?;
        if let Some(p) = rec.val_psnr {
            eprintln!(
                "step {:>6}  stage {}  loss {:.5}  lr {:.2e}  val psnr {p:.2} dB  ({:.0} s)",
                rec.step,
                rec.stage.number(),
                rec.losses.total,
                rec.lr,
                started.elapsed().as_secs_f64()
            );
        }
        if every > 0 && rec.step % every == 0 {
            save_trainer(&state_path, t)?;
        }
        Ok(())
    })?;
    save_trainer(&state_path, &trainer)?;
    save_model(&model_path, &trainer.config, &trainer.final_model())?;
    let p = &trainer.progress;
    match (p.best_val_psnr, p.best_step) {
        (Some(psnr), Some(step)) => eprintln!("final val psnr {psnr:.2} dB (best at step {step})"),
        _ => eprintln!("training finished without validation"),
    }
    manifest.finish(out)
}

fn load_for_views<T: Real>(args: &ViewArgs) -> Result<(RunConfig, Model<T>, Dataset)> {
    let (cfg, model) = load_model::<T>(&args.checkpoint)?;
    let dataset = cfg.scene.dataset()?;
    Ok((cfg, model, dataset))
}

fn check_threshold(threshold: Option<f64>) -> Result<()> {
    match threshold {
        Some(t) if !(0.0..=1.0).contains(&t) => Err(Error::Invalid(format!("threshold {t} outside [0, 1]"))),
        _ => Ok(()),
    }
}

fn cmd_render<T: Real>(args: &RenderArgs) -> Result<()> {
    check_threshold(args.threshold)?;
    let (cfg, model, dataset) = load_for_views::<T>(&args.view)?;
    let views = dataset.split(args.view.split);
    if views.is_empty() {
        return Err(Error::Invalid(format!("split `{}` is empty", args.view.split.as_str())));
    }
    prepare_out_dir(&args.out, args.force)?;
    let mut manifest = RunManifest::new("render", &cfg, Some(&args.view.checkpoint));
    manifest.write(&args.out)?;
    let bg = cfg.scene.background.rgb();
    let mut csv = String::from("image,kept_fraction,fine_evaluations,candidates,wall_seconds\n");
    let (mut evals, mut cands) = (0, 0);
    for v in views {
        let clock = Instant::now();
        let (img, out) = render_view(&model, v, bg, args.threshold)?;
        let wall = clock.elapsed().as_secs_f64();
        let path = args.out.join(&v.name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        img.write_ppm(&path)?;
        csv.push_str(&format!(
            "{},{:.6},{},{},{wall:.4}\n",
            v.name,
            out.kept_fraction(),
            out.fine_evaluations,
            out.candidates
        ));
        println!("{}  kept {:.4}  {wall:.2} s", v.name, out.kept_fraction());
        evals += out.fine_evaluations;
        cands += out.candidates;
        manifest.outputs.push(path);
    }
    println!("mean kept fraction {:.4}", evals as f64 / cands.max(1) as f64);
    let csv_path = args.out.join("render.csv");
    checkpoint::write_atomic(&csv_path, csv.as_bytes())?;
    manifest.outputs.push(csv_path);
    manifest.finish(&args.out)
}

fn cmd_eval<T: Real>(args: &EvalArgs) -> Result<()> {
    check_threshold(args.threshold)?;
    let (cfg, model, dataset) = load_for_views::<T>(&args.view)?;
    let views = dataset.split(args.view.split);
    if views.is_empty() {
        return Err(Error::Invalid(format!("split `{}` is empty", args.view.split.as_str())));
    }
    let mut manifest = RunManifest::new("eval", &cfg, Some(&args.view.checkpoint));
    if let Some(out) = &args.out {
        prepare_out_dir(out, args.force)?;
        manifest.write(out)?;
    }
    let report = evaluate(&model, views, cfg.scene.background.rgb(), args.threshold)?;
    let csv = report.to_csv();
    print!("{csv}");
    if let Some(out) = &args.out {
        let path = out.join("eval.csv");
        checkpoint::write_atomic(&path, csv.as_bytes())?;
        manifest.outputs.push(path);
        manifest.finish(out)?;
    }
    Ok(())
}

/// One operating point of a threshold sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub threshold: f64,
    pub kept_fraction: f64,
    /// Fine-network evaluations relative to the unpruned render.
    pub relative_time: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub wall_seconds: f64,
}

pub const SWEEP_HEADER: &str = "threshold,kept_fraction,relative_time,psnr,ssim,wall_seconds";

/// Evaluates `views` once unpruned and then once per threshold.
pub fn sweep<T: Real>(
    model: &Model<T>,
    views: &[View],
    background: [f64; 3],
    thresholds: &[f64],
) -> Result<(SweepRow, Vec<SweepRow>)> {
    if !model.has_importance() {
        return Err(Error::Invalid(
            "checkpoint has no importance head; sweeps need a learnt proposer trained with with_importance = true".into(),
        ));
    }
    for &t in thresholds {
        check_threshold(Some(t))?;
    }
    let point = |threshold: Option<f64>, base_evals: Option<usize>| -> Result<(SweepRow, usize)> {
        let clock = Instant::now();
        let r = evaluate(model, views, background, threshold)?;
        let wall = clock.elapsed().as_secs_f64();
        let base = base_evals.unwrap_or(r.fine_evaluations);
        let row = SweepRow {
            threshold: threshold.unwrap_or(0.0),
            kept_fraction: r.kept_fraction(),
            relative_time: r.fine_evaluations as f64 / base.max(1) as f64,
            psnr: r.mean_psnr,
            ssim: r.mean_ssim,
            wall_seconds: wall,
        };
        Ok((row, r.fine_evaluations))
    };
    let (base, evals) = point(None, None)?;
    let rows = thresholds.iter().map(|&t| point(Some(t), Some(evals)).map(|p| p.0)).collect::<Result<_>>()?;
    Ok((base, rows))
}

impl SweepRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.4}",
            self.threshold, self.kept_fraction, self.relative_time, self.psnr, self.ssim, self.wall_seconds
        )
    }
}

/// Standalone SVG plot of PSNR against relative fine-sample cost.
pub fn sweep_svg(base: &SweepRow, rows: &[SweepRow]) -> String {
    let (w, h, m) = (480.0, 320.0, 48.0);
    let mut lo = rows.iter().map(|r| r.psnr).fold(base.psnr, f64::min);
    let mut hi = rows.iter().map(|r| r.psnr).fold(base.psnr, f64::max);
    if hi - lo < 1e-6 {
        lo -= 0.5;
        hi += 0.5;
    }
    let x = |v: f64| m + v.clamp(0.0, 1.0) * (w - 2.0 * m);
    let y = |v: f64| h - m - (v - lo) / (hi - lo) * (h - 2.0 * m);
    let mut pts: Vec<&SweepRow> = rows.iter().collect();
    pts.sort_by(|a, b| a.relative_time.total_cmp(&b.relative_time));
    let line: Vec<String> = pts.iter().map(|r| format!("{:.1},{:.1}", x(r.relative_time), y(r.psnr))).collect();
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{lx}\" text-anchor=\"middle\">relative fine-sample cost</text>\n\
         <text x=\"12\" y=\"{cy}\" transform=\"rotate(-90 12 {cy})\" text-anchor=\"middle\">PSNR (dB)</text>\n\
         <text x=\"{m}\" y=\"{tx}\" text-anchor=\"middle\">0</text>\n\
         <text x=\"{r}\" y=\"{tx}\" text-anchor=\"middle\">1</text>\n\
         <text x=\"{ty}\" y=\"{m}\" text-anchor=\"end\">{hi:.2}</text>\n\
         <text x=\"{ty}\" y=\"{b}\" text-anchor=\"end\">{lo:.2}</text>\n\
         <line x1=\"{m}\" y1=\"{yb:.1}\" x2=\"{r}\" y2=\"{yb:.1}\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n\
         <polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"{pts}\"/>\n",
        b = h - m,
        r = w - m,
        cx = w / 2.0,
        cy = h / 2.0,
        lx = h - 10.0,
        tx = h - m + 14.0,
        ty = m - 4.0,
        yb = y(base.psnr),
        pts = line.join(" "),
    );
    for p in &pts {
        s.push_str(&format!(
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"steelblue\"><title>threshold {}</title></circle>\n",
            x(p.relative_time),
            y(p.psnr),
            p.threshold
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn cmd_sweep<T: Real>(args: &SweepArgs) -> Result<()> {
    let (cfg, model, dataset) = load_for_views::<T>(&args.view)?;
    let views = dataset.split(args.view.split);
    if views.is_empty() {
        return Err(Error::Invalid(format!("split `{}` is empty", args.view.split.as_str())));
    }
    if !model.has_importance() {
        return Err(Error::Invalid(format!(
            "{} has no importance head; sweeps need a learnt proposer trained with with_importance = true",
            args.view.checkpoint.display()
        )));
    }
    prepare_out_dir(&args.out, args.force)?;
    let mut manifest = RunManifest::new("sweep", &cfg, Some(&args.view.checkpoint));
    manifest.write(&args.out)?;
    let (base, rows) = sweep(&model, views, cfg.scene.background.rgb(), &args.thresholds)?;
    let mut csv = format!("{SWEEP_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    print!("{csv}");
    println!("unpruned psnr {:.4} ssim {:.4} ({:.2} s)", base.psnr, base.ssim, base.wall_seconds);
    let csv_path = args.out.join("sweep.csv");
    let svg_path = args.out.join("sweep.svg");
    checkpoint::write_atomic(&csv_path, csv.as_bytes())?;
    checkpoint::write_atomic(&svg_path, sweep_svg(&base, &rows).as_bytes())?;
    manifest.outputs = vec![csv_path, svg_path];
    manifest.finish(&args.out)
}
