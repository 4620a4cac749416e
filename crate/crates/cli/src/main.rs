//! Batch front end: scene generation, buffers, training, localization,
//! evaluation and the two comparative experiments.

mod artifacts;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use scrfocus::eval::{buffer_reprojection_stats, write_csv, ReportRow};
use scrfocus::experiment::{
    ablate, compare, localize_frames, sequence_result, AblationReport, CompareReport, SuiteConfig,
};
use scrfocus::sampler::{build_buffer, load_buffer, save_buffer, BufferConfig, Strategy};
use scrfocus::scene_map::generate_synthetic;
use scrfocus::scr_head::{load_head, save_head, train, TrainConfig};

use artifacts::{file_digest, load_scene, save_scene, Meta, Outputs};

#[derive(Parser, Debug)]
#[command(name = "scrfocus", version, about = "Focus-guided buffers for scene coordinate regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Seed of every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene directory.
    Synth(SynthArgs),
    /// Build a training buffer from a scene.
    Buffer(BufferArgs),
    /// Train a regression head on a buffer.
    Train(TrainArgs),
    /// Localize the held-out frames of a scene.
    Localize(LocalizeArgs),
    /// Pose accuracy and buffer reprojection statistics of a trained head.
    Eval(EvalArgs),
    /// Sweep the sampling radius over the synthetic suite.
    Ablate(AblateArgs),
    /// Focus against random sampling on the synthetic suite.
    Compare(CompareArgs),
    /// Render a JSON ablation or comparison report as SVG.
    Plot(PlotArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Focus,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl Format {
    fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BufferArgs {
    /// Scene directory written by `synth`.
    #[arg(long)]
    map: PathBuf,
    #[arg(long, value_enum, default_value_t = StrategyArg::Focus)]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 5.0)]
    rho: f64,
    #[arg(long, default_value_t = 100_000)]
    buffer_size: usize,
    /// Output buffer file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    buffer: PathBuf,
    /// Scene directory; its map fixes the output offset of the head.
    #[arg(long)]
    map: PathBuf,
    #[arg(long, default_value_t = 16)]
    passes: usize,
    #[arg(long, default_value_t = 5120)]
    batch: usize,
    /// Output head file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct LocalizeArgs {
    #[arg(long)]
    map: PathBuf,
    /// Head file; repeat for an ensemble.
    #[arg(long = "head", required = true)]
    heads: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    head: PathBuf,
    /// Buffer the head was trained on.
    #[arg(long)]
    buffer: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

/// Budget overrides of the synthetic suite.
#[derive(Args, Debug)]
struct SuiteArgs {
    #[arg(long)]
    buffer_size: Option<usize>,
    #[arg(long)]
    passes: Option<usize>,
    /// Training batch size; the suite profile uses 512.
    #[arg(long)]
    batch: Option<usize>,
}

impl SuiteArgs {
    fn config(&self, seed: u64) -> SuiteConfig {
        let mut cfg = SuiteConfig::default().with_seed(seed);
        if let Some(n) = self.buffer_size {
            cfg.buffer.target_size = n;
        }
        if let Some(p) = self.passes {
            cfg.train.passes = p;
        }
        if let Some(b) = self.batch {
            cfg.train.batch_size = Some(b);
        }
        cfg
    }
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20,1000")]
    radii: Vec<f64>,
    #[command(flatten)]
    suite: SuiteArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long, default_value_t = 5.0)]
    rho: f64,
    #[command(flatten)]
    suite: SuiteArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// JSON report written by `ablate` or `compare`.
    #[arg(long)]
    input: PathBuf,
    /// Output SVG file.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let mut outputs = Outputs::default();
    match run(&cli, &mut outputs) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            outputs.discard();
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli, out: &mut Outputs) -> Result<()> {
    let seed = cli.seed;
    match &cli.command {
        Command::Synth(a) => synth(a, seed, out),
        Command::Buffer(a) => buffer(a, seed, out),
        Command::Train(a) => train_head(a, seed, out),
        Command::Localize(a) => localize(a, seed, out),
        Command::Eval(a) => evaluate(a, seed, out),
        Command::Ablate(a) => run_ablation(a, seed, out),
        Command::Compare(a) => run_comparison(a, seed, out),
        Command::Plot(a) => plot(a, out),
    }
}

fn synth(a: &SynthArgs, seed: u64, out: &mut Outputs) -> Result<()> {
    let mut cfg = SuiteConfig::default().scene;
    cfg.rng_seed = seed;
    let scene = generate_synthetic(&cfg).context("generating scene")?;
    out.dir(&a.out)?;
    save_scene(&scene, &a.out, out)?;
    let meta = Meta::new("synth", seed, json!({ "scene": cfg }), json!({}));
    meta.write(&a.out.join("scene.meta.json"), out)
}

fn buffer(a: &BufferArgs, seed: u64, out: &mut Outputs) -> Result<()> {
    let scene = load_scene(&a.map)?;
    let strategy = match a.strategy {
        StrategyArg::Focus => Strategy::Focus { rho: a.rho },
        StrategyArg::Random => Strategy::Random,
    };
    let cfg = BufferConfig {
        target_size: a.buffer_size,
        seed,
        ..BufferConfig::default()
    };
    let buf = build_buffer(&scene.map, &scene.world, strategy, &cfg).context("building buffer")?;
    out.parent_of(&a.out)?;
    save_buffer(&buf, out.file(&a.out)).context("writing buffer")?;
    let meta = Meta::new(
        "buffer",
        seed,
        json!({ "strategy": strategy, "buffer": cfg }),
        json!({ "scene": artifacts::scene_digest(&a.map)? }),
    );
    meta.write(&Meta::sidecar(&a.out), out)
}

fn train_head(a: &TrainArgs, seed: u64, out: &mut Outputs) -> Result<()> {
    let scene = load_scene(&a.map)?;
    let buf = load_buffer(&a.buffer).with_context(|| format!("reading {}", a.buffer.display()))?;
    let cfg = TrainConfig {
        passes: a.passes,
        batch_size: Some(a.batch),
        rng_seed: seed,
        ..TrainConfig::default()
    };
    let (head, report) = train(&buf, &scene.map.scene_center, &cfg).context("training")?;
    log::info!("trained in {:.1}s", report.wall_time_s);
    out.parent_of(&a.out)?;
    save_head(&head, out.file(&a.out)).context("writing head")?;
    let summary = json!({
        "pass_losses": report.pass_losses,
        "steps": report.steps,
        "batch_size": report.batch_size,
        "d_target": report.d_target,
    });
    let mut meta = Meta::new(
        "train",
        seed,
        json!({ "train": cfg }),
        json!({ "scene": artifacts::scene_digest(&a.map)?, "buffer": file_digest(&a.buffer)? }),
    );
    meta.extra = Some(summary);
    meta.write(&Meta::sidecar(&a.out), out)
}

fn localize(a: &LocalizeArgs, seed: u64, out: &mut Outputs) -> Result<()> {
    let scene = load_scene(&a.map)?;
    let heads = a
        .heads
        .iter()
        .map(|p| load_head(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let suite = SuiteConfig::default();
    let frames = localize_frames(&scene, &heads, &suite.ransac, suite.query_cap, seed)?;
    out.parent_of(&a.out)?;
    let path = out.file(&a.out);
    match a.format {
        Format::Json => artifacts::write_json(&path, &frames)?,
        Format::Csv => artifacts::write_frames_csv(&path, &frames)?,
    }
    let mut inputs = serde_json::Map::new();
    inputs.insert("scene".into(), json!(artifacts::scene_digest(&a.map)?));
    for (i, p) in a.heads.iter().enumerate() {
        inputs.insert(format!("head{i}"), json!(file_digest(p)?));
    }
    let meta = Meta::new(
        "localize",
        seed,
        json!({ "ransac": suite.ransac, "query_cap": suite.query_cap }),
        serde_json::Value::Object(inputs),
    );
    meta.write(&Meta::sidecar(&a.out), out)
}

fn evaluate(a: &EvalArgs, seed: u64, out: &mut Outputs) -> Result<()> {
    let scene = load_scene(&a.map)?;
    let head = load_head(&a.head).with_context(|| format!("reading {}", a.head.display()))?;
    let buf = load_buffer(&a.buffer).with_context(|| format!("reading {}", a.buffer.display()))?;
    let suite = SuiteConfig::default();
    let frames =
        localize_frames(&scene, std::slice::from_ref(&head), &suite.ransac, suite.query_cap, seed)?;
    let reproj = buffer_reprojection_stats(&head, &buf)?;
    let strategy = buf.provenance.strategy;
    let row = ReportRow::new(
        scene_name(&a.map),
        strategy.rho(),
        strategy.name(),
        &sequence_result(&frames),
        reproj,
    );
    out.parent_of(&a.out)?;
    write_rows(&out.file(&a.out), std::slice::from_ref(&row), a.format)?;
    let meta = Meta::new(
        "eval",
        seed,
        json!({ "ransac": suite.ransac, "query_cap": suite.query_cap }),
        json!({
            "scene": artifacts::scene_digest(&a.map)?,
            "head": file_digest(&a.head)?,
            "buffer": file_digest(&a.buffer)?,
        }),
    );
    meta.write(&Meta::sidecar(&a.out), out)
}

fn scene_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".into())
}

fn write_rows(path: &Path, rows: &[ReportRow], format: Format) -> Result<()> {
    match format {
        Format::Json => artifacts::write_json(path, &rows),
        Format::Csv => {
            let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
            write_csv(rows, std::io::BufWriter::new(f))?;
            Ok(())
        }
    }
}

fn run_ablation(a: &AblateArgs, seed: u64, out: &mut Outputs) -> Result<()> {
    if a.radii.is_empty() || a.radii.iter().any(|r| !(r.is_finite() && *r >= 1.0)) {
        bail!("radii must be finite and at least 1 pixel");
    }
    let cfg = a.suite.config(seed);
    let report = ablate(&cfg, &a.radii)?;
    out.dir(&a.out)?;
    let path = a.out.join(format!("ablation.{}", a.format.extension()));
    match a.format {
        Format::Json => artifacts::write_json(&out.file(&path), &report)?,
        Format::Csv => {
            write_rows(&out.file(&path), &report.rows, Format::Csv)?;
            artifacts::write_scores_csv(&out.file(&a.out.join("ablation_scores.csv")), &report)?;
        }
    }
    suite_meta("ablate", &cfg, json!({ "radii": a.radii })).write(&Meta::sidecar(&path), out)
}

fn run_comparison(a: &CompareArgs, seed: u64, out: &mut Outputs) -> Result<()> {
    if !(a.rho.is_finite() && a.rho >= 1.0) {
        bail!("rho must be finite and at least 1 pixel");
    }
    let cfg = a.suite.config(seed);
    let report = compare(&cfg, a.rho)?;
    out.dir(&a.out)?;
    let path = a.out.join(format!("compare.{}", a.format.extension()));
    match a.format {
        Format::Json => artifacts::write_json(&out.file(&path), &report)?,
        Format::Csv => write_rows(&out.file(&path), &report.rows, Format::Csv)?,
    }
    suite_meta("compare", &cfg, json!({ "rho": a.rho })).write(&Meta::sidecar(&path), out)
}

fn suite_meta(command: &str, cfg: &SuiteConfig, params: serde_json::Value) -> Meta {
    let mut meta = Meta::new(command, cfg.seed, json!({ "suite": cfg, "params": params }), json!({}));
    // reports carry the suite hash, which the sidecar must agree with
    meta.config_hash = cfg.hash();
    meta
}

fn plot(a: &PlotArgs, out: &mut Outputs) -> Result<()> {
    let text = std::fs::read_to_string(&a.input)
        .with_context(|| format!("reading {}", a.input.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", a.input.display()))?;
    let doc = if value.get("score").is_some() {
        let report: AblationReport = serde_json::from_value(value)?;
        svg::ablation(&report)
    } else if value.get("rho").is_some() {
        let report: CompareReport = serde_json::from_value(value)?;
        svg::comparison(&report)
    } else {
        bail!("{} is neither an ablation nor a comparison report", a.input.display());
    };
    out.parent_of(&a.out)?;
    std::fs::write(out.file(&a.out), doc).with_context(|| format!("writing {}", a.out.display()))
}
