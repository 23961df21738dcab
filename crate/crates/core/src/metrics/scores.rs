//! RayIoU and RayPQ tallies.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use super::{cast_ray, check_specs, mean_or_one, MetricsError, RayHit, RaySet};
use crate::grid::OccupancyGrid;
use crate::taxonomy::{ClassId, Taxonomy};

pub const DEFAULT_THRESHOLDS: [f64; 3] = [1.0, 2.0, 4.0];

/// First hits of every ray, in ray order.
pub fn cast_all(grid: &OccupancyGrid, rays: &RaySet, taxonomy: &Taxonomy) -> Vec<RayHit> {
    rays.directions
        .par_iter()
        .map(|d| cast_ray(grid, rays.origin, *d, taxonomy.free_id()))
        .collect()
}

fn scored(c: ClassId, taxonomy: &Taxonomy) -> bool {
    taxonomy.is_class(c) && !taxonomy.is_eval_excluded(c)
}

/// Hit pairs that enter the tallies: rays whose ground-truth hit is an
/// excluded class are dropped, as are rays missing in both grids.
fn kept_pairs<'a>(
    pred: &'a [RayHit],
    gt: &'a [RayHit],
    taxonomy: &'a Taxonomy,
) -> impl Iterator<Item = (&'a RayHit, &'a RayHit)> + 'a {
    pred.iter().zip(gt).filter(|(p, g)| match g {
        RayHit::Hit { class_id, .. } => !taxonomy.is_eval_excluded(*class_id),
        RayHit::Miss => !matches!(p, RayHit::Miss),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RayCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RayIouTally {
    pub thresholds: Vec<f64>,
    pub counts: Vec<BTreeMap<ClassId, RayCounts>>,
}

impl RayIouTally {
    pub fn new(thresholds: &[f64]) -> Self {
        Self {
            thresholds: thresholds.to_vec(),
            counts: vec![BTreeMap::new(); thresholds.len()],
        }
    }

    pub fn add(&mut self, other: &RayIouTally) {
        assert_eq!(self.thresholds, other.thresholds, "threshold sets differ");
        for (mine, theirs) in self.counts.iter_mut().zip(&other.counts) {
            for (c, k) in theirs {
                let e = mine.entry(*c).or_default();
                e.tp += k.tp;
                e.fp += k.fp;
                e.fn_ += k.fn_;
            }
        }
    }

    /// Per-class IoU at threshold index `i`.
    pub fn per_class(&self, i: usize, taxonomy: &Taxonomy) -> BTreeMap<ClassId, f64> {
        self.counts[i]
            .iter()
            .filter(|(c, k)| scored(**c, taxonomy) && k.tp + k.fp + k.fn_ > 0)
            .map(|(c, k)| (*c, k.tp as f64 / (k.tp + k.fp + k.fn_) as f64))
            .collect()
    }

    pub fn scores(&self, taxonomy: &Taxonomy) -> Vec<f64> {
        (0..self.thresholds.len())
            .map(|i| mean_or_one(self.per_class(i, taxonomy).into_values()))
            .collect()
    }

    pub fn mean(&self, taxonomy: &Taxonomy) -> f64 {
        mean_or_one(self.scores(taxonomy))
    }
}

/// A ray counts as a true positive for class c at threshold τ when both
/// first hits have class c and their depths differ by at most τ; otherwise it
/// is a false positive for the predicted class and a false negative for the
/// ground-truth class.
pub fn rayiou_tally(
    pred: &[RayHit],
    gt: &[RayHit],
    thresholds: &[f64],
    taxonomy: &Taxonomy,
) -> RayIouTally {
    let mut tally = RayIouTally::new(thresholds);
    for (p, g) in kept_pairs(pred, gt, taxonomy) {
        for (i, &tau) in thresholds.iter().enumerate() {
            let counts = &mut tally.counts[i];
            match (p, g) {
                (
                    RayHit::Hit {
                        class_id: cp,
                        depth: dp,
                        ..
                    },
                    RayHit::Hit {
                        class_id: cg,
                        depth: dg,
                        ..
                    },
                ) if cp == cg && (dp - dg).abs() <= tau => {
                    counts.entry(*cp).or_default().tp += 1;
                }
                _ => {
                    if let RayHit::Hit { class_id, .. } = p {
                        counts.entry(*class_id).or_default().fp += 1;
                    }
                    if let RayHit::Hit { class_id, .. } = g {
                        counts.entry(*class_id).or_default().fn_ += 1;
                    }
                }
            }
        }
    }
    tally
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RayScores {
    pub thresholds: Vec<f64>,
    pub per_threshold: Vec<f64>,
    pub mean: f64,
}

pub fn rayiou(
    pred: &OccupancyGrid,
    gt: &OccupancyGrid,
    rays: &RaySet,
    thresholds: &[f64],
    taxonomy: &Taxonomy,
) -> Result<RayScores, MetricsError> {
    check_specs(pred, gt)?;
    rays.validate()?;
    let t = rayiou_tally(
        &cast_all(pred, rays, taxonomy),
        &cast_all(gt, rays, taxonomy),
        thresholds,
        taxonomy,
    );
    Ok(RayScores {
        thresholds: thresholds.to_vec(),
        per_threshold: t.scores(taxonomy),
        mean: t.mean(taxonomy),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PqCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub iou_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RayPqTally {
    pub thresholds: Vec<f64>,
    pub counts: Vec<BTreeMap<ClassId, PqCounts>>,
}

impl RayPqTally {
    pub fn new(thresholds: &[f64]) -> Self {
        Self {
            thresholds: thresholds.to_vec(),
            counts: vec![BTreeMap::new(); thresholds.len()],
        }
    }

    pub fn add(&mut self, other: &RayPqTally) {
        assert_eq!(self.thresholds, other.thresholds, "threshold sets differ");
        for (mine, theirs) in self.counts.iter_mut().zip(&other.counts) {
            for (c, k) in theirs {
                let e = mine.entry(*c).or_default();
                e.tp += k.tp;
                e.fp += k.fp;
                e.fn_ += k.fn_;
                e.iou_sum += k.iou_sum;
            }
        }
    }

    pub fn per_class(&self, i: usize, taxonomy: &Taxonomy) -> BTreeMap<ClassId, f64> {
        self.counts[i]
            .iter()
            .filter(|(c, k)| scored(**c, taxonomy) && k.tp + k.fp + k.fn_ > 0)
            .map(|(c, k)| {
                (
                    *c,
                    k.iou_sum / (k.tp as f64 + 0.5 * k.fp as f64 + 0.5 * k.fn_ as f64),
                )
            })
            .collect()
    }

    pub fn scores(&self, taxonomy: &Taxonomy) -> Vec<f64> {
        (0..self.thresholds.len())
            .map(|i| mean_or_one(self.per_class(i, taxonomy).into_values()))
            .collect()
    }

    pub fn mean(&self, taxonomy: &Taxonomy) -> f64 {
        mean_or_one(self.scores(taxonomy))
    }
}

type Segment = (ClassId, u32);

fn segment(hit: &RayHit, taxonomy: &Taxonomy) -> Option<(Segment, f64)> {
    match hit {
        RayHit::Hit {
            class_id,
            instance,
            depth,
            ..
        } if taxonomy.is_class(*class_id) => {
            let inst = if taxonomy.is_thing(*class_id) {
                *instance
            } else {
                0
            };
            Some(((*class_id, inst), *depth))
        }
        _ => None,
    }
}

/// Segments are the rays sharing a first-hit (class, instance); stuff classes
/// form one segment each. A ray lies in the intersection of a predicted and a
/// ground-truth segment when both hits agree in class and their depths differ
/// by at most τ. Segments match when their ray IoU is strictly above 0.5.
pub fn raypq_tally(
    pred: &[RayHit],
    gt: &[RayHit],
    thresholds: &[f64],
    taxonomy: &Taxonomy,
) -> RayPqTally {
    let mut tally = RayPqTally::new(thresholds);
    let mut pred_size: BTreeMap<Segment, u64> = BTreeMap::new();
    let mut gt_size: BTreeMap<Segment, u64> = BTreeMap::new();
    let mut pairs: Vec<(Segment, Segment, f64)> = Vec::new();
    for (p, g) in kept_pairs(pred, gt, taxonomy) {
        let ps = segment(p, taxonomy);
        let gs = segment(g, taxonomy);
        if let Some((s, _)) = ps {
            *pred_size.entry(s).or_default() += 1;
        }
        if let Some((s, _)) = gs {
            *gt_size.entry(s).or_default() += 1;
        }
        if let (Some((a, da)), Some((b, db))) = (ps, gs) {
            if a.0 == b.0 {
                pairs.push((a, b, (da - db).abs()));
            }
        }
    }

    for (i, &tau) in thresholds.iter().enumerate() {
        let mut inter: BTreeMap<(Segment, Segment), u64> = BTreeMap::new();
        for &(a, b, err) in &pairs {
            if err <= tau {
                *inter.entry((a, b)).or_default() += 1;
            }
        }
        let counts = &mut tally.counts[i];
        let mut matched_pred: BTreeMap<Segment, ()> = BTreeMap::new();
        let mut matched_gt: BTreeMap<Segment, ()> = BTreeMap::new();
        for (&(a, b), &n) in &inter {
            let union = pred_size[&a] + gt_size[&b] - n;
            let iou = n as f64 / union as f64;
            if iou > 0.5 {
                let e = counts.entry(a.0).or_default();
                e.tp += 1;
                e.iou_sum += iou;
                matched_pred.insert(a, ());
                matched_gt.insert(b, ());
            }
        }
        for s in pred_size.keys().filter(|s| !matched_pred.contains_key(s)) {
            counts.entry(s.0).or_default().fp += 1;
        }
        for s in gt_size.keys().filter(|s| !matched_gt.contains_key(s)) {
            counts.entry(s.0).or_default().fn_ += 1;
        }
    }
    tally
}

pub fn raypq(
    pred: &OccupancyGrid,
    gt: &OccupancyGrid,
    rays: &RaySet,
    thresholds: &[f64],
    taxonomy: &Taxonomy,
) -> Result<RayScores, MetricsError> {
    check_specs(pred, gt)?;
    rays.validate()?;
    let t = raypq_tally(
        &cast_all(pred, rays, taxonomy),
        &cast_all(gt, rays, taxonomy),
        thresholds,
        taxonomy,
    );
    Ok(RayScores {
        thresholds: thresholds.to_vec(),
        per_threshold: t.scores(taxonomy),
        mean: t.mean(taxonomy),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hit(c: ClassId, inst: u32, depth: f64) -> RayHit {
        RayHit::Hit {
            voxel: [0; 3],
            class_id: c,
            instance: inst,
            depth,
        }
    }

    #[test]
    fn displaced_surface() {
        let t = Taxonomy::occ3d_nuscenes();
        let gt = vec![hit(15, 16, 10.0); 20];
        let pred = vec![hit(15, 16, 11.5); 20];
        let tally = rayiou_tally(&pred, &gt, &DEFAULT_THRESHOLDS, &t);
        assert_eq!(
            tally.counts[0][&15],
            RayCounts {
                tp: 0,
                fp: 20,
                fn_: 20
            }
        );
        assert_eq!(
            tally.counts[1][&15],
            RayCounts {
                tp: 20,
                fp: 0,
                fn_: 0
            }
        );
        assert_eq!(tally.scores(&t), vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn excluded_ground_truth_rays_are_dropped() {
        let t = Taxonomy::occ3d_nuscenes();
        let gt = vec![hit(0, 1, 5.0), RayHit::Miss, RayHit::Miss];
        let pred = vec![hit(4, 1000, 5.0), RayHit::Miss, hit(4, 1000, 3.0)];
        let tally = rayiou_tally(&pred, &gt, &[1.0], &t);
        assert_eq!(tally.counts[0].len(), 1);
        assert_eq!(
            tally.counts[0][&4],
            RayCounts {
                tp: 0,
                fp: 1,
                fn_: 0
            }
        );
    }

    #[test]
    fn equal_split_is_not_a_match() {
        let t = Taxonomy::occ3d_nuscenes();
        let gt = vec![hit(4, 1000, 8.0); 10];
        let mut pred = vec![hit(4, 1001, 8.0); 5];
        pred.extend(vec![hit(4, 1002, 8.0); 5]);
        let tally = raypq_tally(&pred, &gt, &[1.0], &t);
        let c = tally.counts[0][&4];
        assert_eq!((c.tp, c.fp, c.fn_), (0, 2, 1));
        assert_eq!(tally.scores(&t), vec![0.0]);

        // 6/4 split: the larger part matches with IoU 0.6.
        let mut pred = vec![hit(4, 7, 8.0); 6];
        pred.extend(vec![hit(4, 9, 8.0); 4]);
        let c = raypq_tally(&pred, &gt, &[1.0], &t).counts[0][&4];
        assert_eq!((c.tp, c.fp, c.fn_), (1, 1, 0));
        assert!((c.iou_sum - 0.6).abs() < 1e-15);
    }

    #[test]
    fn relabeling_instances_does_not_change_pq() {
        let t = Taxonomy::occ3d_nuscenes();
        let gt: Vec<_> = (0..12)
            .map(|i| hit(4, 1000 + (i % 3), 5.0 + i as f64))
            .collect();
        let pred: Vec<_> = (0..12)
            .map(|i| hit(4, 1000 + (i % 3), 5.0 + i as f64))
            .collect();
        let relabeled: Vec<_> = (0..12)
            .map(|i| hit(4, 50 - (i % 3), 5.0 + i as f64))
            .collect();
        let a = raypq_tally(&pred, &gt, &DEFAULT_THRESHOLDS, &t);
        let b = raypq_tally(&relabeled, &gt, &DEFAULT_THRESHOLDS, &t);
        assert_eq!(a.scores(&t), vec![1.0; 3]);
        assert_eq!(a.scores(&t), b.scores(&t));
    }

    #[test]
    fn no_predicted_things_scores_zero() {
        let t = Taxonomy::occ3d_nuscenes();
        let gt = vec![hit(4, 1000, 5.0), hit(4, 1001, 6.0)];
        let pred = vec![RayHit::Miss; 2];
        let tally = raypq_tally(&pred, &gt, &DEFAULT_THRESHOLDS, &t);
        assert_eq!(tally.per_class(0, &t)[&4], 0.0);
    }
}
