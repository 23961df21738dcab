//! Voxel and ray-based evaluation metrics.
//!
//! Every metric is computed from additive tallies, so scores over a dataset
//! are obtained by summing per-sample tallies before dividing.

mod ray;
mod scores;

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

pub use ray::{cast_ray, RayHit, RayPattern, RaySet};
pub use scores::{
    cast_all, rayiou, rayiou_tally, raypq, raypq_tally, PqCounts, RayCounts, RayIouTally,
    RayPqTally, DEFAULT_THRESHOLDS,
};

use crate::grid::OccupancyGrid;
use crate::taxonomy::{ClassId, Taxonomy};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("grid specs differ between prediction and ground truth")]
    SpecMismatch,
    #[error("mask has {mask} entries, grid has {grid}")]
    MaskLength { mask: usize, grid: usize },
    #[error("invalid rays: {0}")]
    InvalidRays(String),
}

fn check_specs(pred: &OccupancyGrid, gt: &OccupancyGrid) -> Result<(), MetricsError> {
    if pred.spec != gt.spec || pred.len() != gt.len() {
        return Err(MetricsError::SpecMismatch);
    }
    Ok(())
}

/// Mean of the values, or 1 for an empty set (nothing to disagree on).
pub(crate) fn mean_or_one<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        1.0
    } else {
        sum / n as f64
    }
}

/// Per-class intersection and union voxel counts plus binary occupancy counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct VoxelTally {
    pub intersection: BTreeMap<ClassId, u64>,
    pub union: BTreeMap<ClassId, u64>,
    pub occ_intersection: u64,
    pub occ_union: u64,
}

impl VoxelTally {
    pub fn add(&mut self, other: &VoxelTally) {
        for (c, v) in &other.intersection {
            *self.intersection.entry(*c).or_default() += v;
        }
        for (c, v) in &other.union {
            *self.union.entry(*c).or_default() += v;
        }
        self.occ_intersection += other.occ_intersection;
        self.occ_union += other.occ_union;
    }

    /// IoU of every evaluated class present in either grid.
    pub fn per_class(&self, taxonomy: &Taxonomy) -> BTreeMap<ClassId, f64> {
        self.union
            .iter()
            .filter(|(c, u)| **u > 0 && taxonomy.is_class(**c) && !taxonomy.is_eval_excluded(**c))
            .map(|(c, u)| {
                (
                    *c,
                    self.intersection.get(c).copied().unwrap_or(0) as f64 / *u as f64,
                )
            })
            .collect()
    }

    pub fn miou(&self, taxonomy: &Taxonomy) -> f64 {
        mean_or_one(self.per_class(taxonomy).into_values())
    }

    pub fn iou_occ(&self) -> f64 {
        if self.occ_union == 0 {
            1.0
        } else {
            self.occ_intersection as f64 / self.occ_union as f64
        }
    }
}

/// Counts voxels for mIoU and IoU_occ, optionally restricted to `mask`.
pub fn voxel_tally(
    pred: &OccupancyGrid,
    gt: &OccupancyGrid,
    mask: Option<&[bool]>,
    taxonomy: &Taxonomy,
) -> Result<VoxelTally, MetricsError> {
    check_specs(pred, gt)?;
    if let Some(m) = mask {
        if m.len() != gt.len() {
            return Err(MetricsError::MaskLength {
                mask: m.len(),
                grid: gt.len(),
            });
        }
    }
    let free = taxonomy.free_id();
    let mut t = VoxelTally::default();
    for v in 0..gt.len() {
        if mask.is_some_and(|m| !m[v]) {
            continue;
        }
        let (p, g) = (pred.sem[v], gt.sem[v]);
        let (po, go) = (p != free, g != free);
        t.occ_intersection += u64::from(po && go);
        t.occ_union += u64::from(po || go);
        if p == g {
            if po {
                *t.intersection.entry(p).or_default() += 1;
                *t.union.entry(p).or_default() += 1;
            }
        } else {
            if po {
                *t.union.entry(p).or_default() += 1;
            }
            if go {
                *t.union.entry(g).or_default() += 1;
            }
        }
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiouReport {
    pub per_class: BTreeMap<ClassId, f64>,
    pub mean: f64,
}

pub fn miou(
    pred: &OccupancyGrid,
    gt: &OccupancyGrid,
    taxonomy: &Taxonomy,
) -> Result<MiouReport, MetricsError> {
    let t = voxel_tally(pred, gt, None, taxonomy)?;
    Ok(MiouReport {
        per_class: t.per_class(taxonomy),
        mean: t.miou(taxonomy),
    })
}

/// mIoU over the voxels where `mask` is true.
pub fn miou_masked(
    pred: &OccupancyGrid,
    gt: &OccupancyGrid,
    mask: &[bool],
    taxonomy: &Taxonomy,
) -> Result<MiouReport, MetricsError> {
    let t = voxel_tally(pred, gt, Some(mask), taxonomy)?;
    Ok(MiouReport {
        per_class: t.per_class(taxonomy),
        mean: t.miou(taxonomy),
    })
}

pub fn iou_occ(
    pred: &OccupancyGrid,
    gt: &OccupancyGrid,
    taxonomy: &Taxonomy,
) -> Result<f64, MetricsError> {
    Ok(voxel_tally(pred, gt, None, taxonomy)?.iou_occ())
}

/// All tallies for one or more prediction/ground-truth pairs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalTally {
    pub voxels: VoxelTally,
    pub rays: RayIouTally,
    pub pq: RayPqTally,
}

impl EvalTally {
    pub fn new(thresholds: &[f64]) -> Self {
        Self {
            voxels: VoxelTally::default(),
            rays: RayIouTally::new(thresholds),
            pq: RayPqTally::new(thresholds),
        }
    }

    pub fn add(&mut self, other: &EvalTally) {
        self.voxels.add(&other.voxels);
        self.rays.add(&other.rays);
        self.pq.add(&other.pq);
    }

    pub fn summary(&self, taxonomy: &Taxonomy) -> EvalSummary {
        EvalSummary {
            miou: self.voxels.miou(taxonomy),
            iou_occ: self.voxels.iou_occ(),
            per_class_iou: self
                .voxels
                .per_class(taxonomy)
                .into_iter()
                .map(|(c, v)| (taxonomy.class_name(c).to_string(), v))
                .collect(),
            rayiou: self.rays.mean(taxonomy),
            rayiou_at: self
                .rays
                .thresholds
                .iter()
                .zip(self.rays.scores(taxonomy))
                .map(|(t, s)| (format!("{t}m"), s))
                .collect(),
            raypq: self.pq.mean(taxonomy),
            raypq_at: self
                .pq
                .thresholds
                .iter()
                .zip(self.pq.scores(taxonomy))
                .map(|(t, s)| (format!("{t}m"), s))
                .collect(),
        }
    }
}

/// Scores for a report; keys of the maps are class names or thresholds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub miou: f64,
    pub iou_occ: f64,
    pub per_class_iou: BTreeMap<String, f64>,
    pub rayiou: f64,
    pub rayiou_at: BTreeMap<String, f64>,
    pub raypq: f64,
    pub raypq_at: BTreeMap<String, f64>,
}

/// Voxel and ray tallies for one pair of grids.
pub fn evaluate_pair(
    pred: &OccupancyGrid,
    gt: &OccupancyGrid,
    rays: &RaySet,
    thresholds: &[f64],
    taxonomy: &Taxonomy,
) -> Result<EvalTally, MetricsError> {
    let voxels = voxel_tally(pred, gt, None, taxonomy)?;
    let pred_hits = cast_all(pred, rays, taxonomy);
    let gt_hits = cast_all(gt, rays, taxonomy);
    Ok(EvalTally {
        voxels,
        rays: rayiou_tally(&pred_hits, &gt_hits, thresholds, taxonomy),
        pq: raypq_tally(&pred_hits, &gt_hits, thresholds, taxonomy),
    })
}
