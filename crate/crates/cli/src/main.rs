//! `occ`: command-line front end for the occupancy pipeline.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use occupancy::grid::OccupancyGrid;
use occupancy::ingest::{Dataset, FrameIndex};
use occupancy::lift::WindowMode;
use occupancy::pipeline::{
    evaluate_dirs, grid_stats, run_pipeline, ConfigError, EvalError, GridStats, PipelineConfig,
    PipelineError, RunOptions, SampleReport,
};
use occupancy::synth::{write_dataset, Scene, SceneSpec, SemanticsMode};
use occupancy::taxonomy::Taxonomy;

#[derive(Parser, Debug)]
#[command(
    name = "occ",
    version,
    about = "Semantic and panoptic voxel occupancy from labeled multi-view geometry"
)]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the pipeline over a dataset and write one grid per sample.
    Run(RunArgs),
    /// Score prediction grids against ground-truth grids.
    Evaluate(EvalArgs),
    /// Generate a synthetic dataset with ground truth.
    Synth(SynthArgs),
    /// Write the occupied voxels of a grid as a point list.
    Export(ExportArgs),
    /// Print per-stage statistics for one sample, or label counts of grid files.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Pipeline configuration (TOML); built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override the window mode of the configuration.
    #[arg(long, value_enum)]
    window: Option<Window>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Window {
    Causal,
    NonCausal,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Dataset root.
    dataset: Option<PathBuf>,
    /// Output directory for `<t>.grid` files.
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated frame indices; all frames when omitted.
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<FrameIndex>>,
    /// Also write `<t>.stageN.grid` after stage N (0 = voxelized, 1-4 = refinement).
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=4))]
    dump_stage: Option<u8>,
    /// Worker threads for sample-level parallelism.
    #[arg(long, env = "OCC_WORKERS")]
    workers: Option<usize>,
    /// Write the run report (JSON) here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Directory of predicted grids.
    pred: PathBuf,
    /// Directory of ground-truth grids.
    gt: PathBuf,
    /// Directory of `<t>.mask` files restricting voxel metrics.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory receiving `report.txt` and `summary.json`.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long, env = "OCC_WORKERS")]
    workers: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Semantics {
    Priors,
    Candidates,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Dataset root to create.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Scene specification (TOML); built-in defaults when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, value_enum)]
    semantics: Option<Semantics>,
    /// Translation noise of the stored ego poses (meters).
    #[arg(long)]
    pose_sigma: Option<f64>,
    /// Print the effective scene specification as TOML and exit.
    #[arg(long)]
    print_spec: bool,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Grid file.
    grid: PathBuf,
    /// Output file; stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Taxonomy used for class names.
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    /// Also export ignore voxels.
    #[arg(long)]
    include_ignore: bool,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// Dataset root (with --target) or grid files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Run the pipeline for this frame of the dataset and report every stage.
    #[arg(long)]
    target: Option<FrameIndex>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Where the sample grid is written in dataset mode.
    #[arg(long, short, default_value = "inspect")]
    out: PathBuf,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

/// Errors tagged with the exit code they map to.
enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Invalid(e) | Failure::Runtime(e) => e,
        }
    }
}

fn invalid(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Invalid(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn from_config(e: ConfigError) -> Failure {
    invalid(e)
}

fn from_pipeline(e: PipelineError) -> Failure {
    match e {
        PipelineError::Config(e) => from_config(e),
        e @ PipelineError::UnknownTarget(_) => invalid(e),
        e => runtime(e),
    }
}

fn from_eval(e: EvalError) -> Failure {
    match e {
        EvalError::Config(e) => from_config(e),
        e => runtime(e),
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Synth(a) => synth(a),
        Command::Export(a) => export(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => PipelineConfig::load(path).map_err(from_config)?,
        None => PipelineConfig::default(),
    };
    if let Some(w) = args.window {
        cfg.window = match w {
            Window::Causal => WindowMode::Causal,
            Window::NonCausal => WindowMode::NonCausal,
        };
    }
    cfg.validate().map_err(from_config)?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    fs::write(path, text + "\n")
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime)
}

fn open_dataset(path: &Path) -> Result<Dataset, Failure> {
    Dataset::open(path)
        .with_context(|| format!("opening dataset {}", path.display()))
        .map_err(invalid)
}

fn run(a: RunArgs) -> Outcome {
    let cfg = load_config(&a.config)?;
    if a.print_config {
        print!("{}", cfg.to_toml_string());
        return Ok(());
    }
    let root = a
        .dataset
        .ok_or_else(|| invalid(anyhow!("a dataset root is required")))?;
    if a.workers == Some(0) {
        return Err(invalid(anyhow!("--workers must be positive")));
    }
    let ds = open_dataset(&root)?;
    let options = RunOptions {
        targets: a.targets,
        dump_stage: a.dump_stage.map(usize::from),
        workers: a.workers,
    };
    let report = run_pipeline(&ds, &cfg, &a.out, &options).map_err(from_pipeline)?;
    for s in &report.samples {
        println!(
            "frame {}: {} points, {} instances -> {}",
            s.t,
            s.lifted,
            s.instances,
            s.output.display()
        );
    }
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    if report.failures.is_empty() {
        Ok(())
    } else {
        let list: Vec<String> = report
            .failures
            .iter()
            .map(|f| format!("frame {} at {}: {}", f.t, f.stage, f.message))
            .collect();
        Err(runtime(anyhow!(
            "{} sample(s) failed: {}",
            list.len(),
            list.join("; ")
        )))
    }
}

fn evaluate(a: EvalArgs) -> Outcome {
    let cfg = load_config(&a.config)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = a.workers {
        if n == 0 {
            return Err(invalid(anyhow!("--workers must be positive")));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(runtime)?;
    let report = pool
        .install(|| evaluate_dirs(&a.pred, &a.gt, a.mask.as_deref(), &cfg))
        .map_err(from_eval)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(runtime)?;
        fs::write(dir.join("report.txt"), &text)
            .with_context(|| format!("writing {}", dir.join("report.txt").display()))
            .map_err(runtime)?;
        write_json(&dir.join("summary.json"), &report)?;
    }
    if report.evaluated.is_empty() {
        return Err(invalid(anyhow!(
            "no sample has both a prediction and a ground-truth grid"
        )));
    }
    if !report.is_complete() {
        return Err(invalid(anyhow!(
            "{} prediction(s) and {} ground-truth grid(s) missing",
            report.missing_pred.len(),
            report.missing_gt.len()
        )));
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Outcome {
    let mut spec = match &a.spec {
        Some(path) => SceneSpec::load(path).map_err(invalid)?,
        None => SceneSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    if let Some(frames) = a.frames {
        spec.frames = frames;
        spec.trajectory.clear();
    }
    if let Some(s) = a.semantics {
        spec.semantics = match s {
            Semantics::Priors => SemanticsMode::Priors,
            Semantics::Candidates => SemanticsMode::Candidates,
        };
    }
    if let Some(sigma) = a.pose_sigma {
        spec.noise.pose_sigma = sigma;
    }
    spec.validate().map_err(invalid)?;
    if a.print_spec {
        print!("{}", spec.to_toml_string());
        return Ok(());
    }
    let out = a.out.ok_or_else(|| invalid(anyhow!("--out is required")))?;
    let taxonomy = Taxonomy::occ3d_nuscenes();
    let scene = Scene::generate(&spec, &taxonomy).map_err(invalid)?;
    write_dataset(&scene, &out).map_err(runtime)?;
    println!(
        "wrote {} frames, {} objects to {}",
        scene.num_frames(),
        scene.objects.len(),
        out.display()
    );
    Ok(())
}

fn load_taxonomy(path: Option<&Path>) -> Result<Taxonomy, Failure> {
    match path {
        Some(p) => Taxonomy::load(p).map_err(invalid),
        None => Ok(Taxonomy::occ3d_nuscenes()),
    }
}

fn read_grid(path: &Path) -> Result<OccupancyGrid, Failure> {
    OccupancyGrid::read(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(invalid)
}

fn export(a: ExportArgs) -> Outcome {
    let taxonomy = load_taxonomy(a.taxonomy.as_deref())?;
    let grid = read_grid(&a.grid)?;
    let mut text = String::from("# x y z class_id class instance\n");
    for v in 0..grid.len() {
        let sem = grid.sem[v];
        if sem == taxonomy.free_id() || (sem == taxonomy.ignore_id() && !a.include_ignore) {
            continue;
        }
        let [x, y, z] = grid.spec.voxel_center(grid.spec.unlinear(v));
        let _ = writeln!(
            text,
            "{x:.3} {y:.3} {z:.3} {sem} {} {}",
            taxonomy.class_name(sem),
            grid.inst[v]
        );
    }
    match &a.out {
        Some(path) => fs::write(path, text)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(runtime),
        None => match std::io::stdout().write_all(text.as_bytes()) {
            Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(runtime(e)),
            _ => Ok(()),
        },
    }
}

fn stats_table(rows: &[(String, GridStats)]) -> String {
    let mut classes: Vec<&String> = rows.iter().flat_map(|(_, s)| s.per_class.keys()).collect();
    classes.sort();
    classes.dedup();
    let mut out = String::new();
    let _ = write!(out, "{:<24}", "");
    for (name, _) in rows {
        let _ = write!(out, "{name:>12}");
    }
    out.push('\n');
    let mut line = |label: &str, f: &dyn Fn(&GridStats) -> usize| {
        let _ = write!(out, "{label:<24}");
        for (_, s) in rows {
            let _ = write!(out, "{:>12}", f(s));
        }
        out.push('\n');
    };
    line("occupied", &|s| s.occupied);
    line("free", &|s| s.free);
    line("ignore", &|s| s.ignore);
    line("instances", &|s| s.instances);
    for c in classes {
        line(&format!("  {c}"), &|s| {
            s.per_class.get(c).copied().unwrap_or(0)
        });
    }
    out
}

fn sample_summary(s: &SampleReport) -> String {
    format!(
        "frame {} window {:?}\n\
         points {} reliable {} lifted {} non-finite {}\n\
         candidates {} rejected {} instances {}\n\
         reassigned: contained {} nearest {} ignored {}\n",
        s.t,
        s.window,
        s.points,
        s.reliable,
        s.lifted,
        s.non_finite,
        s.candidates,
        s.rejected,
        s.instances,
        s.contained,
        s.nearest,
        s.ignored
    )
}

fn inspect(a: InspectArgs) -> Outcome {
    if let Some(t) = a.target {
        let [root] = a.inputs.as_slice() else {
            return Err(invalid(anyhow!("--target takes exactly one dataset root")));
        };
        let cfg = load_config(&a.config)?;
        let ds = open_dataset(root)?;
        let options = RunOptions {
            targets: Some(vec![t]),
            ..RunOptions::default()
        };
        let report = run_pipeline(&ds, &cfg, &a.out, &options).map_err(from_pipeline)?;
        if let Some(f) = report.failures.first() {
            return Err(runtime(anyhow!(
                "frame {} failed at {}: {}",
                f.t,
                f.stage,
                f.message
            )));
        }
        let s = &report.samples[0];
        if a.json {
            println!("{}", serde_json::to_string_pretty(s).map_err(runtime)?);
        } else {
            print!("{}\n{}", sample_summary(s), stats_table(&s.stages));
        }
        return Ok(());
    }
    let taxonomy = load_config(&a.config)?
        .load_taxonomy()
        .map_err(from_config)?;
    let mut rows = Vec::new();
    for path in &a.inputs {
        let grid = read_grid(path)?;
        let name = path.file_name().map_or_else(
            || path.display().to_string(),
            |n| n.to_string_lossy().into_owned(),
        );
        rows.push((name, grid_stats(&grid, &taxonomy)));
    }
    if a.json {
        let map: std::collections::BTreeMap<&String, &GridStats> =
            rows.iter().map(|(n, s)| (n, s)).collect();
        println!("{}", serde_json::to_string_pretty(&map).map_err(runtime)?);
    } else {
        print!("{}", stats_table(&rows));
    }
    Ok(())
}
