//! Robust per-candidate filtering: per-camera IQR depth gate, MAD-based
//! deviation pruning in the principal frame, and iterative tightening.

use std::collections::BTreeMap;

use nalgebra::Vector3;

use super::boxes::{fit_box_with_yaw, fit_yaw_box, YawBox};
use super::{InstanceParams, SizeInterval};
use crate::ingest::CameraId;
use crate::taxonomy::ClassId;

/// Scale from the median absolute deviation to a normal standard deviation.
pub const MAD_TO_SIGMA: f64 = 1.4826;

/// A current-sample point considered for an instance candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidatePoint {
    pub xyz: Vector3<f64>,
    pub cam: CameraId,
    pub depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    TooFewPoints,
    Implausible,
    TooSmall,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    /// Indices (into the candidate point slice) that survived filtering.
    pub kept: Vec<usize>,
    pub bbox: YawBox,
    /// Filtering passes run; 0 when the raw box was accepted.
    pub passes: usize,
}

/// Linearly interpolated quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

/// Drops points outside `[Q1 - f*IQR, Q3 + f*IQR]` of depth, per camera.
pub fn iqr_depth_filter(points: &[CandidatePoint], idx: &[usize], factor: f64) -> Vec<usize> {
    let mut by_cam: BTreeMap<CameraId, Vec<f64>> = BTreeMap::new();
    for &i in idx {
        by_cam
            .entry(points[i].cam)
            .or_default()
            .push(points[i].depth);
    }
    let gates: BTreeMap<CameraId, (f64, f64)> = by_cam
        .into_iter()
        .map(|(cam, mut d)| {
            d.sort_by(f64::total_cmp);
            let (q1, q3) = (quantile_sorted(&d, 0.25), quantile_sorted(&d, 0.75));
            let iqr = q3 - q1;
            (cam, (q1 - factor * iqr, q3 + factor * iqr))
        })
        .collect();
    idx.iter()
        .copied()
        .filter(|&i| {
            let (lo, hi) = gates[&points[i].cam];
            (lo..=hi).contains(&points[i].depth)
        })
        .collect()
}

/// Drops points deviating more than `k` robust sigmas from the median along
/// any axis of the principal frame (horizontal PCA axes and z). Axes with zero
/// spread are not tested.
pub fn deviation_prune(points: &[CandidatePoint], idx: &[usize], k: f64) -> Vec<usize> {
    if idx.is_empty() {
        return Vec::new();
    }
    let xyz: Vec<Vector3<f64>> = idx.iter().map(|&i| points[i].xyz).collect();
    let yaw = fit_yaw_box(&xyz).yaw;
    let (s, c) = yaw.sin_cos();
    let local: Vec<[f64; 3]> = xyz
        .iter()
        .map(|p| [c * p.x + s * p.y, -s * p.x + c * p.y, p.z])
        .collect();
    let mut keep = vec![true; idx.len()];
    for axis in 0..3 {
        let vals: Vec<f64> = local.iter().map(|l| l[axis]).collect();
        let med = median(&vals);
        let dev: Vec<f64> = vals.iter().map(|v| (v - med).abs()).collect();
        let sigma = MAD_TO_SIGMA * median(&dev);
        if sigma <= 1e-9 {
            continue;
        }
        for (kp, d) in keep.iter_mut().zip(&dev) {
            if *d > k * sigma {
                *kp = false;
            }
        }
    }
    idx.iter()
        .zip(keep)
        .filter_map(|(&i, k)| k.then_some(i))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Plausibility {
    Ok,
    TooLarge,
    TooSmall,
}

fn plausibility(b: &YawBox, interval: &SizeInterval) -> Plausibility {
    let long = b.extents.x.max(b.extents.y);
    let short = b.extents.x.min(b.extents.y);
    let dims = [long, short, b.extents.z];
    if dims.iter().zip(interval.max).any(|(d, m)| *d > m) {
        Plausibility::TooLarge
    } else if dims.iter().zip(interval.min).any(|(d, m)| *d < m) {
        Plausibility::TooSmall
    } else {
        Plausibility::Ok
    }
}

/// Filters one instance candidate and fits its box.
///
/// A candidate whose raw box already fits the class size interval is accepted
/// unchanged unless `params.always_filter` is set. Otherwise each pass applies
/// the per-camera IQR depth gate and the deviation prune to the survivors of
/// the previous pass, then refits. While the box exceeds the
/// class size interval, both thresholds are multiplied by the tightening
/// factor, for at most `max_passes` passes. A refit never grows the box: if
/// the new principal yaw gives a larger volume the previous yaw is kept.
pub fn refine_candidate(
    points: &[CandidatePoint],
    class_id: ClassId,
    interval: &SizeInterval,
    params: &InstanceParams,
) -> Result<Refined, Rejection> {
    let mut kept: Vec<usize> = (0..points.len()).collect();
    let mut prev: Option<YawBox> = None;
    if !params.always_filter && points.len() >= params.min_points {
        let xyz: Vec<Vector3<f64>> = points.iter().map(|p| p.xyz).collect();
        let mut bbox = fit_yaw_box(&xyz);
        bbox.class_id = class_id;
        bbox.support = kept.len();
        if plausibility(&bbox, interval) == Plausibility::Ok {
            return Ok(Refined {
                kept,
                bbox,
                passes: 0,
            });
        }
        prev = Some(bbox);
    }
    let mut factor = params.iqr_factor;
    let mut k = params.deviation_k;
    for pass in 1..=params.max_passes {
        kept = iqr_depth_filter(points, &kept, factor);
        kept = deviation_prune(points, &kept, k);
        if kept.len() < params.min_points {
            return Err(Rejection::TooFewPoints);
        }
        let xyz: Vec<Vector3<f64>> = kept.iter().map(|&i| points[i].xyz).collect();
        let mut bbox = fit_yaw_box(&xyz);
        if let Some(p) = prev {
            let same_yaw = fit_box_with_yaw(&xyz, p.yaw);
            if bbox.volume() > same_yaw.volume() {
                bbox = same_yaw;
            }
        }
        bbox.class_id = class_id;
        bbox.support = kept.len();
        match plausibility(&bbox, interval) {
            Plausibility::Ok => {
                return Ok(Refined {
                    kept,
                    bbox,
                    passes: pass,
                })
            }
            Plausibility::TooSmall => return Err(Rejection::TooSmall),
            Plausibility::TooLarge => {}
        }
        factor *= params.tighten;
        k *= params.tighten;
        prev = Some(bbox);
    }
    Err(Rejection::Implausible)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&v, 0.25), 2.0);
        assert_eq!(quantile_sorted(&v, 0.5), 3.0);
        assert_eq!(quantile_sorted(&[1.0, 2.0], 0.5), 1.5);
        assert_eq!(quantile_sorted(&[7.0], 0.75), 7.0);
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), 2.5);
    }

    fn cp(x: f64, depth: f64, cam: CameraId) -> CandidatePoint {
        CandidatePoint {
            xyz: Vector3::new(x, 0.0, 0.0),
            cam,
            depth,
        }
    }

    #[test]
    fn iqr_is_per_camera() {
        // Camera 0 sees depths around 10, camera 1 around 30; neither is an outlier in its own view.
        let mut pts: Vec<_> = (0..10).map(|i| cp(0.0, 10.0 + i as f64 * 0.1, 0)).collect();
        pts.extend((0..10).map(|i| cp(0.0, 30.0 + i as f64 * 0.1, 1)));
        pts.push(cp(0.0, 20.0, 0));
        let idx: Vec<usize> = (0..pts.len()).collect();
        let kept = iqr_depth_filter(&pts, &idx, 1.5);
        assert_eq!(kept, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn deviation_prune_drops_far_points() {
        let mut pts: Vec<_> = (0..20)
            .map(|i| CandidatePoint {
                xyz: Vector3::new(
                    (i % 5) as f64 * 0.5,
                    (i / 5) as f64 * 0.3,
                    (i % 3) as f64 * 0.4,
                ),
                cam: 0,
                depth: 10.0,
            })
            .collect();
        pts.push(CandidatePoint {
            xyz: Vector3::new(1.0, 0.5, 9.0),
            cam: 0,
            depth: 10.0,
        });
        let idx: Vec<usize> = (0..pts.len()).collect();
        let kept = deviation_prune(&pts, &idx, 3.0);
        assert_eq!(kept.len(), 20);
        assert!(!kept.contains(&20));
    }
}
