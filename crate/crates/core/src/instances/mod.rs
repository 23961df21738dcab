//! Instance identification from current-sample instance priors.
//!
//! Candidates (points sharing one per-view instance prior) are filtered and
//! boxed, same-class boxes are merged conservatively by IoSV, and finally
//! every thing point of the fused cloud is re-assigned to a final box or
//! demoted to `ignore`.

mod boxes;
mod robust;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use boxes::{
    fit_box_with_yaw, fit_yaw_box, iosv, normalize_yaw, principal_yaw, yaw_distance, YawBox,
    MIN_EXTENT,
};
pub use robust::{
    deviation_prune, iqr_depth_filter, median, quantile_sorted, refine_candidate, CandidatePoint,
    Refined, Rejection, MAD_TO_SIGMA,
};

use crate::ingest::FrameIndex;
use crate::lift::{LabeledPoint, LabeledPointCloud};
use crate::taxonomy::{ClassId, Taxonomy, TaxonomyError};

/// First final instance id handed to thing boxes; stuff ids stay below it.
pub const THING_ID_BASE: u32 = 1000;

/// Class-wise plausible box size, as (length, width, height) with length ≥ width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeInterval {
    pub class_id: ClassId,
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeIntervalEntry {
    pub class: String,
    #[serde(default = "default_min_size")]
    pub min: [f64; 3],
    pub max: [f64; 3],
}

fn default_min_size() -> [f64; 3] {
    [MIN_EXTENT; 3]
}

fn entry(class: &str, max: [f64; 3]) -> SizeIntervalEntry {
    SizeIntervalEntry {
        class: class.to_string(),
        min: default_min_size(),
        max,
    }
}

/// Default maximum sizes for the Occ3D thing classes.
pub fn default_size_intervals() -> Vec<SizeIntervalEntry> {
    vec![
        entry("car", [6.0, 2.5, 2.5]),
        entry("truck", [14.0, 3.2, 4.5]),
        entry("bus", [15.0, 3.2, 4.5]),
        entry("trailer", [18.0, 3.5, 4.5]),
        entry("construction_vehicle", [12.0, 4.0, 5.0]),
        entry("motorcycle", [3.0, 1.2, 2.0]),
        entry("bicycle", [3.0, 1.2, 2.0]),
        entry("pedestrian", [1.2, 1.2, 2.2]),
        entry("traffic_cone", [0.8, 0.8, 1.2]),
        entry("barrier", [20.0, 1.0, 2.0]),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InstanceParams {
    pub enabled: bool,
    /// IoSV merge threshold.
    pub tau_ov: f64,
    /// Maximum point-to-box distance for nearest-box re-assignment (meters).
    pub d_nn: f64,
    pub iqr_factor: f64,
    pub deviation_k: f64,
    /// Multiplier applied to both robust thresholds per tightening pass.
    pub tighten: f64,
    pub max_passes: usize,
    pub min_points: usize,
    /// Filter candidates whose raw box is already plausible.
    pub always_filter: bool,
    pub size_intervals: Vec<SizeIntervalEntry>,
}

impl Default for InstanceParams {
    fn default() -> Self {
        Self {
            enabled: true,
            tau_ov: 0.45,
            d_nn: 2.0,
            iqr_factor: 1.5,
            deviation_k: 3.0,
            tighten: 0.8,
            max_passes: 4,
            min_points: 5,
            always_filter: false,
            size_intervals: default_size_intervals(),
        }
    }
}

/// Size intervals resolved against a taxonomy.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeTable(BTreeMap<ClassId, SizeInterval>);

#[derive(Debug, thiserror::Error)]
pub enum SizeTableError {
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("class {0} has no size interval")]
    Missing(String),
    #[error("size interval of {0} must satisfy 0 < min <= max")]
    Invalid(String),
}

impl SizeTable {
    pub fn resolve(
        entries: &[SizeIntervalEntry],
        taxonomy: &Taxonomy,
    ) -> Result<Self, SizeTableError> {
        let mut map = BTreeMap::new();
        for e in entries {
            let id = taxonomy.class_by_name(&e.class)?;
            let ok = e
                .min
                .iter()
                .zip(&e.max)
                .all(|(lo, hi)| *lo > 0.0 && lo <= hi);
            if !ok {
                return Err(SizeTableError::Invalid(e.class.clone()));
            }
            map.insert(
                id,
                SizeInterval {
                    class_id: id,
                    min: e.min,
                    max: e.max,
                },
            );
        }
        for c in taxonomy.thing_classes() {
            if !map.contains_key(&c) {
                return Err(SizeTableError::Missing(taxonomy.class_name(c).to_string()));
            }
        }
        Ok(Self(map))
    }

    pub fn get(&self, class: ClassId) -> Option<&SizeInterval> {
        self.0.get(&class)
    }
}

/// A boxed instance candidate with the points (indices into the shared
/// candidate-point slice) that support it.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub class_id: ClassId,
    pub points: Vec<usize>,
    pub bbox: YawBox,
}

fn refine_subset(
    all: &[CandidatePoint],
    subset: &[usize],
    class_id: ClassId,
    sizes: &SizeTable,
    params: &InstanceParams,
) -> Result<Candidate, Rejection> {
    let interval = sizes.get(class_id).ok_or(Rejection::Implausible)?;
    let pts: Vec<CandidatePoint> = subset.iter().map(|&i| all[i]).collect();
    let refined = refine_candidate(&pts, class_id, interval, params)?;
    Ok(Candidate {
        class_id,
        points: refined.kept.iter().map(|&k| subset[k]).collect(),
        bbox: refined.bbox,
    })
}

/// Greedy conservative merging of same-class candidates.
///
/// Repeatedly merges the same-class pair with the highest IoSV at or above
/// `tau_ov` (ties: larger combined support, then lower indices). The union of
/// the two point sets is re-refined; if the union is rejected, the candidate
/// with less support is dropped instead. Survivors receive fresh ids starting
/// at [`THING_ID_BASE`], in list order.
pub fn merge_boxes(
    mut cands: Vec<Candidate>,
    all: &[CandidatePoint],
    sizes: &SizeTable,
    params: &InstanceParams,
) -> Vec<Candidate> {
    loop {
        let mut best: Option<(f64, usize, usize, usize)> = None;
        for i in 0..cands.len() {
            for j in i + 1..cands.len() {
                if cands[i].class_id != cands[j].class_id {
                    continue;
                }
                let ov = iosv(&cands[i].bbox, &cands[j].bbox);
                if ov < params.tau_ov {
                    continue;
                }
                let support = cands[i].points.len() + cands[j].points.len();
                let better = match best {
                    None => true,
                    Some((bo, bs, _, _)) => ov > bo || (ov == bo && support > bs),
                };
                if better {
                    best = Some((ov, support, i, j));
                }
            }
        }
        let Some((_, _, i, j)) = best else { break };
        let mut union: Vec<usize> = cands[i]
            .points
            .iter()
            .chain(&cands[j].points)
            .copied()
            .collect();
        union.sort_unstable();
        union.dedup();
        match refine_subset(all, &union, cands[i].class_id, sizes, params) {
            Ok(merged) => {
                cands[i] = merged;
                cands.remove(j);
            }
            Err(_) => {
                let drop = if cands[j].points.len() > cands[i].points.len() {
                    i
                } else {
                    j
                };
                cands.remove(drop);
            }
        }
    }
    for (n, c) in cands.iter_mut().enumerate() {
        c.bbox.instance_id = THING_ID_BASE + n as u32;
        c.bbox.support = c.points.len();
    }
    cands
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReassignStats {
    pub contained: usize,
    pub nearest: usize,
    pub ignored: usize,
}

const CONTAIN_TOL: f64 = 1e-6;

/// Gives every thing point a final instance id.
///
/// Points inside a box take its id and class (several containers: nearest
/// center, then smaller id). Other thing points go to the nearest same-class
/// box closer than `d_nn`, else become `ignore` with id 0. Stuff points get
/// their class-level id; ignore points keep id 0.
pub fn reassign_points(
    cloud: &LabeledPointCloud,
    boxes: &[YawBox],
    d_nn: f64,
    taxonomy: &Taxonomy,
) -> (LabeledPointCloud, ReassignStats) {
    #[derive(Clone, Copy)]
    enum Outcome {
        Other,
        Contained,
        Nearest,
        Ignored,
    }
    let assign = |p: &LabeledPoint| -> (LabeledPoint, Outcome) {
        let mut q = *p;
        if !taxonomy.is_class(p.sem) {
            q.inst = 0;
            return (q, Outcome::Other);
        }
        if !taxonomy.is_thing(p.sem) {
            q.inst = taxonomy.stuff_instance_id(p.sem);
            return (q, Outcome::Other);
        }
        let key = |b: &YawBox, d: f64| (d, b.instance_id);
        let container = boxes
            .iter()
            .filter(|b| b.contains(&p.xyz, CONTAIN_TOL))
            .map(|b| (key(b, (p.xyz - b.center).norm()), b))
            .min_by(|a, b| a.0 .0.total_cmp(&b.0 .0).then(a.0 .1.cmp(&b.0 .1)));
        if let Some((_, b)) = container {
            q.inst = b.instance_id;
            q.sem = b.class_id;
            return (q, Outcome::Contained);
        }
        let nearest = boxes
            .iter()
            .filter(|b| b.class_id == p.sem)
            .map(|b| (key(b, b.distance(&p.xyz)), b))
            .filter(|(k, _)| k.0 < d_nn)
            .min_by(|a, b| a.0 .0.total_cmp(&b.0 .0).then(a.0 .1.cmp(&b.0 .1)));
        match nearest {
            Some((_, b)) => {
                q.inst = b.instance_id;
                (q, Outcome::Nearest)
            }
            None => {
                q.sem = taxonomy.ignore_id();
                q.inst = 0;
                (q, Outcome::Ignored)
            }
        }
    };
    let results: Vec<(LabeledPoint, Outcome)> = cloud.points.par_iter().map(assign).collect();
    let mut stats = ReassignStats::default();
    let points = results
        .into_iter()
        .map(|(p, o)| {
            match o {
                Outcome::Contained => stats.contained += 1,
                Outcome::Nearest => stats.nearest += 1,
                Outcome::Ignored => stats.ignored += 1,
                Outcome::Other => {}
            }
            p
        })
        .collect();
    (LabeledPointCloud { points }, stats)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InstanceSummary {
    pub boxes: Vec<YawBox>,
    pub candidates: usize,
    pub rejected: usize,
}

/// Builds final instance boxes from the thing points of frame `target` that
/// carry an instance prior.
pub fn identify_instances(
    cloud: &LabeledPointCloud,
    target: FrameIndex,
    taxonomy: &Taxonomy,
    sizes: &SizeTable,
    params: &InstanceParams,
) -> InstanceSummary {
    let mut groups: BTreeMap<u32, Vec<&LabeledPoint>> = BTreeMap::new();
    for p in &cloud.points {
        if p.t == target && p.inst != 0 && taxonomy.is_thing(p.sem) {
            groups.entry(p.inst).or_default().push(p);
        }
    }
    let mut all = Vec::new();
    let mut seeds = Vec::with_capacity(groups.len());
    for pts in groups.values() {
        let mut votes: BTreeMap<ClassId, usize> = BTreeMap::new();
        for p in pts {
            *votes.entry(p.sem).or_default() += 1;
        }
        // Majority class; BTreeMap order makes ties go to the smaller id.
        let class = votes
            .iter()
            .fold((0, 0), |b, (&c, &n)| if n > b.1 { (c, n) } else { b })
            .0;
        let start = all.len();
        all.extend(
            pts.iter()
                .filter(|p| p.sem == class)
                .map(|p| CandidatePoint {
                    xyz: p.xyz,
                    cam: p.cam,
                    depth: f64::from(p.depth),
                }),
        );
        seeds.push((class, (start..all.len()).collect::<Vec<usize>>()));
    }
    let refined: Vec<Option<Candidate>> = seeds
        .par_iter()
        .map(|(class, idx)| refine_subset(&all, idx, *class, sizes, params).ok())
        .collect();
    let candidates = refined.len();
    let accepted: Vec<Candidate> = refined.into_iter().flatten().collect();
    let rejected = candidates - accepted.len();
    let merged = merge_boxes(accepted, &all, sizes, params);
    InstanceSummary {
        boxes: merged.into_iter().map(|c| c.bbox).collect(),
        candidates,
        rejected,
    }
}

/// Text table of boxes: id, class, center, yaw, extents, support.
pub fn box_table(boxes: &[YawBox], taxonomy: &Taxonomy) -> String {
    let mut out = String::from("# id class cx cy cz yaw l w h support\n");
    for b in boxes {
        let _ = writeln!(
            out,
            "{} {} {:.4} {:.4} {:.4} {:.6} {:.4} {:.4} {:.4} {}",
            b.instance_id,
            taxonomy.class_name(b.class_id),
            b.center.x,
            b.center.y,
            b.center.z,
            b.yaw,
            b.extents.x,
            b.extents.y,
            b.extents.z,
            b.support
        );
    }
    out
}
