//! End-to-end runner: configuration, per-sample pipeline and evaluation over
//! directories of grid files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridSpec, OccupancyGrid};
use crate::ingest::{Dataset, EgoPose, FrameIndex};
use crate::instances::{
    identify_instances, reassign_points, InstanceParams, ReassignStats, SizeTable,
};
use crate::lift::{
    fuse_window, lift_view, reliability_filter, stabilize_raster, LabeledPoint, LiftDiagnostics,
    ReliabilityParams, WindowMode, WindowSpec,
};
use crate::metrics::{
    evaluate_pair, voxel_tally, EvalSummary, EvalTally, RayPattern, DEFAULT_THRESHOLDS,
};
use crate::refine::{refine_all, RefineContext, RefineParams, STAGE_NAMES};
use crate::taxonomy::{Taxonomy, TaxonomyError};
use crate::voxelize::{voxelize, VoxelizeParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("config: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

/// All pipeline knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Taxonomy and prompt rules; the built-in Occ3D taxonomy when absent.
    pub taxonomy: Option<PathBuf>,
    pub window: WindowMode,
    /// Keep only the most recent frames of a causal window (0 = no limit).
    pub window_frames: usize,
    pub reliability: ReliabilityParams,
    pub grid: GridSpec,
    pub voxelize: VoxelizeParams,
    pub instances: InstanceParams,
    pub refine: RefineParams,
    pub rays: RayPattern,
    pub thresholds: Vec<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            taxonomy: None,
            window: WindowMode::Causal,
            window_frames: 0,
            reliability: ReliabilityParams::default(),
            grid: GridSpec::default(),
            voxelize: VoxelizeParams::default(),
            instances: InstanceParams::default(),
            refine: RefineParams::default(),
            rays: RayPattern::default(),
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
        }
    }
}

fn check(ok: bool, msg: &str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::Invalid(msg.to_string()))
    }
}

fn unit(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a config; a relative taxonomy path is resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            ConfigError::Invalid(msg) => ConfigError::Parse {
                path: path.to_path_buf(),
                msg,
            },
            e => e,
        })?;
        if let (Some(t), Some(dir)) = (&cfg.taxonomy, path.parent()) {
            if t.is_relative() {
                cfg.taxonomy = Some(dir.join(t));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let r = &self.reliability;
        check(r.tau_c.is_finite(), "reliability.tau_c must be finite")?;
        check(
            r.d_min >= 0.0 && r.d_min <= r.d_max && r.d_max.is_finite(),
            "reliability needs 0 <= d_min <= d_max",
        )?;
        self.grid
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let v = &self.voxelize;
        check(
            v.alpha > 0.0 && v.alpha.is_finite(),
            "voxelize.alpha must be positive",
        )?;
        check(
            v.lambda > 0.0 && v.lambda.is_finite(),
            "voxelize.lambda must be positive",
        )?;
        let i = &self.instances;
        check(unit(i.tau_ov), "instances.tau_ov must lie in [0, 1]")?;
        check(
            i.d_nn >= 0.0 && i.d_nn.is_finite(),
            "instances.d_nn must be non-negative",
        )?;
        check(i.iqr_factor > 0.0, "instances.iqr_factor must be positive")?;
        check(
            i.deviation_k > 0.0,
            "instances.deviation_k must be positive",
        )?;
        check(
            i.tighten > 0.0 && i.tighten <= 1.0,
            "instances.tighten must lie in (0, 1]",
        )?;
        check(i.max_passes >= 1, "instances.max_passes must be at least 1")?;
        check(i.min_points >= 1, "instances.min_points must be at least 1")?;
        let f = &self.refine;
        for (name, v) in [
            ("pinhole_support", f.pinhole_support),
            ("cavity_n_occ", f.cavity_n_occ),
            ("cavity_support", f.cavity_support),
            ("coherence_support", f.coherence_support),
            ("cleanup_support", f.cleanup_support),
        ] {
            check(v <= 26, &format!("refine.{name} must not exceed 26"))?;
        }
        check(unit(f.freeze_conf), "refine.freeze_conf must lie in [0, 1]")?;
        check(
            unit(f.freeze_p_occ),
            "refine.freeze_p_occ must lie in [0, 1]",
        )?;
        check(
            unit(f.coherence_ratio),
            "refine.coherence_ratio must lie in [0, 1]",
        )?;
        check(f.r_ego >= 0.0, "refine.r_ego must be non-negative")?;
        check(
            f.dilation_radius >= 0.0 && f.dilation_radius <= 8.0,
            "refine.dilation_radius must lie in [0, 8]",
        )?;
        self.rays
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        check(
            !self.thresholds.is_empty()
                && self.thresholds.iter().all(|t| *t > 0.0 && t.is_finite()),
            "thresholds must be positive",
        )?;
        Ok(())
    }

    pub fn load_taxonomy(&self) -> Result<Taxonomy, ConfigError> {
        match &self.taxonomy {
            Some(p) => Ok(Taxonomy::load(p)?),
            None => Ok(Taxonomy::occ3d_nuscenes()),
        }
    }

    /// Window of `target` over the dataset frames.
    pub fn window_for(&self, frames: &[FrameIndex], target: FrameIndex) -> WindowSpec {
        match self.window {
            WindowMode::NonCausal => WindowSpec::non_causal(frames),
            WindowMode::Causal => {
                let mut w = WindowSpec::causal(frames, target);
                if self.window_frames > 0 {
                    while w.indices.len() > self.window_frames {
                        let first = *w.indices.iter().next().expect("non-empty");
                        w.indices.remove(&first);
                    }
                }
                w
            }
        }
    }
}

/// Pipeline stage, for error reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Lift,
    Fuse,
    Instances,
    Voxelize,
    Refine,
    Write,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Ingest => "ingest",
            Stage::Lift => "lift",
            Stage::Fuse => "fuse",
            Stage::Instances => "instances",
            Stage::Voxelize => "voxelize",
            Stage::Refine => "refine",
            Stage::Write => "write",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("dataset: {0}")]
    Dataset(#[from] crate::ingest::IngestError),
    #[error("{stage} failed for frame {t}: {msg}")]
    Stage {
        stage: Stage,
        t: FrameIndex,
        msg: String,
    },
    #[error("frame {0} is not in the dataset")]
    UnknownTarget(FrameIndex),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Frames to produce; every dataset frame when `None`.
    pub targets: Option<Vec<FrameIndex>>,
    /// Also write the grid after this stage (0 = voxelized, 1-4 = refinement stages).
    pub dump_stage: Option<usize>,
    /// Worker threads; the rayon default when `None`.
    pub workers: Option<usize>,
}

/// Per-stage label counts of a grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GridStats {
    pub occupied: usize,
    pub free: usize,
    pub ignore: usize,
    pub per_class: BTreeMap<String, usize>,
    /// Distinct thing instance ids.
    pub instances: usize,
}

pub fn grid_stats(grid: &OccupancyGrid, taxonomy: &Taxonomy) -> GridStats {
    let mut per_class: BTreeMap<String, usize> = BTreeMap::new();
    let (mut free, mut ignore) = (0, 0);
    let mut ids = BTreeSet::new();
    for (s, i) in grid.sem.iter().zip(&grid.inst) {
        if *s == taxonomy.free_id() {
            free += 1;
        } else if taxonomy.is_class(*s) {
            *per_class
                .entry(taxonomy.class_name(*s).to_string())
                .or_default() += 1;
            if taxonomy.is_thing(*s) && *i != 0 {
                ids.insert(*i);
            }
        } else {
            ignore += 1;
        }
    }
    GridStats {
        occupied: grid.len() - free - ignore,
        free,
        ignore,
        per_class,
        instances: ids.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleReport {
    pub t: FrameIndex,
    pub window: Vec<FrameIndex>,
    pub points: usize,
    pub reliable: usize,
    pub lifted: usize,
    pub non_finite: usize,
    pub candidates: usize,
    pub rejected: usize,
    pub instances: usize,
    pub contained: usize,
    pub nearest: usize,
    pub ignored: usize,
    /// Stats after voxelization and after each refinement stage.
    pub stages: Vec<(String, GridStats)>,
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleFailure {
    pub t: FrameIndex,
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub samples: Vec<SampleReport>,
    pub failures: Vec<SampleFailure>,
}

/// A sample report, or the stage that failed with its message.
type SampleResult = Result<SampleReport, (Stage, String)>;

struct LiftedFrame {
    ego: EgoPose,
    points: Vec<LabeledPoint>,
    diag: LiftDiagnostics,
}

type FrameSlot = OnceLock<Result<LiftedFrame, (Stage, String)>>;

struct Runner<'a> {
    config: &'a PipelineConfig,
    taxonomy: Taxonomy,
    sizes: SizeTable,
    dataset: &'a Dataset,
    cache: BTreeMap<FrameIndex, FrameSlot>,
    out_dir: &'a Path,
    dump_stage: Option<usize>,
}

impl Runner<'_> {
    /// Loads and lifts a frame once; later calls reuse the result.
    fn lifted(&self, f: FrameIndex) -> Result<&LiftedFrame, (Stage, String)> {
        let slot = self
            .cache
            .get(&f)
            .ok_or((Stage::Ingest, format!("frame {f} unknown")))?;
        slot.get_or_init(|| self.lift_frame(f))
            .as_ref()
            .map_err(Clone::clone)
    }

    fn lift_frame(&self, f: FrameIndex) -> Result<LiftedFrame, (Stage, String)> {
        let sample = self
            .dataset
            .load_sample(f, &self.taxonomy)
            .map_err(|e| (Stage::Ingest, e.to_string()))?;
        let per_view: Vec<_> = sample
            .views
            .par_iter()
            .map(|v| {
                let stab = stabilize_raster(&v.geometry.confidence);
                let omega = reliability_filter(&v.geometry.depth, &stab, &self.config.reliability);
                lift_view(
                    &v.camera,
                    f,
                    &v.priors,
                    &v.geometry,
                    &sample.ego,
                    &omega,
                    &self.taxonomy,
                )
            })
            .collect();
        let mut points = Vec::new();
        let mut diag = LiftDiagnostics::default();
        for r in per_view {
            let (pts, d) = r.map_err(|e| (Stage::Lift, e.to_string()))?;
            points.extend(pts);
            diag.reliable += d.reliable;
            diag.lifted += d.lifted;
            diag.non_finite += d.non_finite;
        }
        Ok(LiftedFrame {
            ego: sample.ego,
            points,
            diag,
        })
    }

    fn write(&self, grid: &OccupancyGrid, name: String) -> Result<PathBuf, (Stage, String)> {
        let path = self.out_dir.join(name);
        grid.write(&path)
            .map_err(|e| (Stage::Write, format!("{}: {e}", path.display())))?;
        Ok(path)
    }

    fn run_sample(&self, t: FrameIndex) -> SampleResult {
        let start = Instant::now();
        let cfg = self.config;
        let window = cfg.window_for(self.dataset.frames(), t);
        let mut frames = BTreeMap::new();
        let (mut reliable, mut lifted, mut non_finite) = (0, 0, 0);
        for &f in &window.indices {
            let l = self.lifted(f)?;
            reliable += l.diag.reliable;
            lifted += l.diag.lifted;
            non_finite += l.diag.non_finite;
            frames.insert(f, l.points.clone());
        }
        let ego = self.lifted(t)?.ego.clone();
        let world = fuse_window(&frames, &window, t).map_err(|e| (Stage::Fuse, e.to_string()))?;
        drop(frames);
        let cloud = world.to_ego_frame(&ego);

        let tax = &self.taxonomy;
        let (cloud, summary, stats) = if cfg.instances.enabled {
            let summary = identify_instances(&cloud, t, tax, &self.sizes, &cfg.instances);
            let (c, s) = reassign_points(&cloud, &summary.boxes, cfg.instances.d_nn, tax);
            (c, Some(summary), s)
        } else {
            // Semantic-only: stuff gets its class-level id, things none.
            let mut c = cloud;
            for p in &mut c.points {
                p.inst = if tax.is_class(p.sem) && !tax.is_thing(p.sem) {
                    tax.stuff_instance_id(p.sem)
                } else {
                    0
                };
            }
            (c, None, ReassignStats::default())
        };

        let grid = voxelize(&cloud, &cfg.grid, &cfg.voxelize, tax);
        let mut stages = vec![("voxelize".to_string(), grid_stats(&grid, tax))];
        if self.dump_stage == Some(0) {
            self.write(&grid, format!("{t}.stage0.grid"))?;
        }
        let ctx = RefineContext {
            window_len: window.len(),
            causal: window.mode == WindowMode::Causal,
        };
        let mut dump_err = None;
        let refined = refine_all(&grid, &cfg.refine, ctx, tax, |stage, g| {
            stages.push((STAGE_NAMES[stage - 1].to_string(), grid_stats(g, tax)));
            if self.dump_stage == Some(stage) {
                if let Err(e) = self.write(g, format!("{t}.stage{stage}.grid")) {
                    dump_err = Some(e);
                }
            }
        })
        .map_err(|e| (Stage::Refine, e.to_string()))?;
        if let Some(e) = dump_err {
            return Err(e);
        }
        let output = self.write(&refined, format!("{t}.grid"))?;
        let report = SampleReport {
            t,
            window: window.indices.iter().copied().collect(),
            points: cloud.len(),
            reliable,
            lifted,
            non_finite,
            candidates: summary.as_ref().map_or(0, |s| s.candidates),
            rejected: summary.as_ref().map_or(0, |s| s.rejected),
            instances: summary.as_ref().map_or(0, |s| s.boxes.len()),
            contained: stats.contained,
            nearest: stats.nearest,
            ignored: stats.ignored,
            stages,
            output,
        };
        log::info!(
            "frame {t}: window {:?}, {} points, {} instances, {:.2?}",
            report.window,
            report.points,
            report.instances,
            start.elapsed()
        );
        Ok(report)
    }
}

fn build_pool(workers: Option<usize>) -> Result<rayon::ThreadPool, PipelineError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| PipelineError::Pool(e.to_string()))
}

/// Runs the pipeline for every target frame and writes `<out>/<t>.grid`.
///
/// Frames are read lazily: a target only loads the frames of its window, so
/// in causal mode no file of a later frame is read on its behalf. Per-sample
/// failures are collected in the report; the remaining samples still run.
pub fn run_pipeline(
    dataset: &Dataset,
    config: &PipelineConfig,
    out_dir: &Path,
    options: &RunOptions,
) -> Result<RunReport, PipelineError> {
    config.validate()?;
    let taxonomy = config.load_taxonomy()?;
    let sizes = SizeTable::resolve(&config.instances.size_intervals, &taxonomy)
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    crate::refine::RefineClasses::resolve(&config.refine, &taxonomy).map_err(ConfigError::from)?;
    fs::create_dir_all(out_dir).map_err(|source| PipelineError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let targets: Vec<FrameIndex> = match &options.targets {
        Some(t) => {
            for f in t {
                if !dataset.frames().contains(f) {
                    return Err(PipelineError::UnknownTarget(*f));
                }
            }
            t.clone()
        }
        None => dataset.frames().to_vec(),
    };
    let runner = Runner {
        config,
        taxonomy,
        sizes,
        dataset,
        cache: dataset
            .frames()
            .iter()
            .map(|&f| (f, OnceLock::new()))
            .collect(),
        out_dir,
        dump_stage: options.dump_stage,
    };
    let pool = build_pool(options.workers)?;
    let results: Vec<(FrameIndex, SampleResult)> = pool.install(|| {
        targets
            .par_iter()
            .map(|&t| (t, runner.run_sample(t)))
            .collect()
    });
    let mut report = RunReport {
        samples: Vec::new(),
        failures: Vec::new(),
    };
    for (t, r) in results {
        match r {
            Ok(s) => report.samples.push(s),
            Err((stage, message)) => {
                log::error!("frame {t}: {stage} failed: {message}");
                report.failures.push(SampleFailure { t, stage, message });
            }
        }
    }
    Ok(report)
}

/// Result of evaluating a prediction directory against a ground-truth directory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub evaluated: Vec<String>,
    pub missing_pred: Vec<String>,
    pub missing_gt: Vec<String>,
    pub per_sample: Vec<SampleScores>,
    pub summary: EvalSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleScores {
    pub name: String,
    pub miou: f64,
    pub iou_occ: f64,
    pub rayiou: f64,
    pub raypq: f64,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {msg}")]
    Grid { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{name}: {source}")]
    Metrics {
        name: String,
        source: crate::metrics::MetricsError,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

fn grid_names(dir: &Path) -> Result<BTreeSet<String>, EvalError> {
    let entries = fs::read_dir(dir).map_err(|source| EvalError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut out = BTreeSet::new();
    for e in entries {
        let e = e.map_err(|source| EvalError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let name = e.file_name().to_string_lossy().into_owned();
        // Stage dumps (`<t>.stageN.grid`) are not samples.
        if name.ends_with(".grid") && !name.contains(".stage") {
            out.insert(name);
        }
    }
    Ok(out)
}

fn read_grid(path: &Path) -> Result<OccupancyGrid, EvalError> {
    OccupancyGrid::read(path).map_err(|e| EvalError::Grid {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn read_mask(path: &Path) -> Result<Vec<bool>, EvalError> {
    let bytes = fs::read(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(bytes.into_iter().map(|b| b != 0).collect())
}

/// Aggregates metrics over the grid files present in both directories.
/// Tallies are summed over samples before scores are formed.
///
/// With `mask_dir`, voxel metrics of `<t>.grid` only count voxels whose byte
/// in `<mask_dir>/<t>.mask` is non-zero; ray metrics are unaffected.
pub fn evaluate_dirs(
    pred_dir: &Path,
    gt_dir: &Path,
    mask_dir: Option<&Path>,
    config: &PipelineConfig,
) -> Result<EvalReport, EvalError> {
    let taxonomy = config.load_taxonomy()?;
    let rays = config.rays.build();
    let pred = grid_names(pred_dir)?;
    let gt = grid_names(gt_dir)?;
    let evaluated: Vec<String> = gt.intersection(&pred).cloned().collect();
    let tallies: Vec<Result<(String, EvalTally), EvalError>> = evaluated
        .par_iter()
        .map(|name| {
            let p = read_grid(&pred_dir.join(name))?;
            let g = read_grid(&gt_dir.join(name))?;
            let metrics_err = |source| EvalError::Metrics {
                name: name.clone(),
                source,
            };
            let mut tally =
                evaluate_pair(&p, &g, &rays, &config.thresholds, &taxonomy).map_err(metrics_err)?;
            if let Some(dir) = mask_dir {
                let mask = read_mask(&dir.join(name.replace(".grid", ".mask")))?;
                tally.voxels = voxel_tally(&p, &g, Some(&mask), &taxonomy).map_err(metrics_err)?;
            }
            Ok((name.clone(), tally))
        })
        .collect();
    let mut total = EvalTally::new(&config.thresholds);
    let mut per_sample = Vec::new();
    for r in tallies {
        let (name, tally) = r?;
        let s = tally.summary(&taxonomy);
        per_sample.push(SampleScores {
            name,
            miou: s.miou,
            iou_occ: s.iou_occ,
            rayiou: s.rayiou,
            raypq: s.raypq,
        });
        total.add(&tally);
    }
    Ok(EvalReport {
        evaluated,
        missing_pred: gt.difference(&pred).cloned().collect(),
        missing_gt: pred.difference(&gt).cloned().collect(),
        per_sample,
        summary: total.summary(&taxonomy),
    })
}

impl EvalReport {
    pub fn is_complete(&self) -> bool {
        self.missing_pred.is_empty() && self.missing_gt.is_empty()
    }

    /// Human-readable report.
    pub fn to_text(&self) -> String {
        let s = &self.summary;
        let mut out = String::new();
        let _ = writeln!(out, "samples evaluated: {}", self.evaluated.len());
        for m in &self.missing_pred {
            let _ = writeln!(out, "missing prediction: {m}");
        }
        for m in &self.missing_gt {
            let _ = writeln!(out, "missing ground truth: {m}");
        }
        let _ = writeln!(out, "\nper-class IoU");
        for (c, v) in &s.per_class_iou {
            let _ = writeln!(out, "  {c:<22} {:>7.4}", v);
        }
        let _ = writeln!(out, "\nmIoU     {:.4}\nIoU_occ  {:.4}", s.miou, s.iou_occ);
        let _ = writeln!(out, "\nRayIoU");
        for (t, v) in &s.rayiou_at {
            let _ = writeln!(out, "  @{t:<6} {v:.4}");
        }
        let _ = writeln!(out, "  mean    {:.4}", s.rayiou);
        let _ = writeln!(out, "\nRayPQ");
        for (t, v) in &s.raypq_at {
            let _ = writeln!(out, "  @{t:<6} {v:.4}");
        }
        let _ = writeln!(out, "  mean    {:.4}", s.raypq);
        out
    }
}
