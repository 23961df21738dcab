//! Vote-based voxelization of a labeled point cloud.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::{GridSpec, OccupancyGrid};
use crate::lift::LabeledPointCloud;
use crate::taxonomy::{ClassId, Taxonomy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoxelizeParams {
    /// Dirichlet smoothing of the vote confidence.
    pub alpha: f64,
    /// Rate of the saturating reliability score.
    pub lambda: f64,
    /// Minimum non-ignore votes for a voxel to be occupied.
    pub n_min: u32,
}

impl Default for VoxelizeParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            lambda: 0.35,
            n_min: 1,
        }
    }
}

/// `(n_win + alpha) / (n_votes + alpha * num_classes)`.
pub fn vote_confidence(n_win: u32, n_votes: u32, alpha: f64, num_classes: usize) -> f64 {
    (f64::from(n_win) + alpha) / (f64::from(n_votes) + alpha * num_classes as f64)
}

/// `1 - exp(-lambda * n)`.
pub fn occupancy_reliability(n: u32, lambda: f64) -> f64 {
    1.0 - (-lambda * f64::from(n)).exp()
}

struct VoxelResult {
    lin: usize,
    sem: ClassId,
    inst: u32,
    n: u32,
    conf: f32,
    p_occ: f32,
}

/// Bins the cloud into `spec` and assigns each voxel the majority non-ignore
/// class.
///
/// `n` counts every point in the voxel (ignore included); the confidence uses
/// non-ignore votes only. Class ties go to the smaller class id, instance ties
/// (among winning-class points) to the smaller id. Points outside the bounds
/// are cropped.
pub fn voxelize(
    cloud: &LabeledPointCloud,
    spec: &GridSpec,
    params: &VoxelizeParams,
    taxonomy: &Taxonomy,
) -> OccupancyGrid {
    let k = taxonomy.num_classes();
    let ignore = taxonomy.ignore_id();
    let mut grid = OccupancyGrid::empty(*spec, taxonomy.free_id(), k);

    let mut binned: Vec<(usize, ClassId, u32)> = cloud
        .points
        .par_iter()
        .filter_map(|p| {
            let idx = spec.voxel_index([p.xyz.x, p.xyz.y, p.xyz.z])?;
            // Anything outside the voting classes is an ignore vote.
            let sem = if taxonomy.is_class(p.sem) {
                p.sem
            } else {
                ignore
            };
            Some((spec.linear(idx), sem, p.inst))
        })
        .collect();
    binned.par_sort_unstable();

    let mut starts: Vec<usize> = (0..binned.len())
        .filter(|&i| i == 0 || binned[i].0 != binned[i - 1].0)
        .collect();
    starts.push(binned.len());

    let results: Vec<VoxelResult> = starts
        .par_windows(2)
        .map(|w| {
            let run = &binned[w[0]..w[1]];
            let n = run.len() as u32;
            let mut counts = vec![0u32; k];
            for &(_, sem, _) in run {
                if (sem as usize) < k {
                    counts[sem as usize] += 1;
                }
            }
            let votes: u32 = counts.iter().sum();
            let (win, &n_win) =
                counts.iter().enumerate().fold(
                    (0, &0u32),
                    |best, cur| if cur.1 > best.1 { cur } else { best },
                );
            let occupied = votes > 0 && votes >= params.n_min;
            let (sem, inst) = if occupied {
                let win = win as ClassId;
                // Winning-class points are contiguous and sorted by instance id.
                let mut best = (0u32, 0u32);
                let mut i = 0;
                let wpts: Vec<u32> = run.iter().filter(|r| r.1 == win).map(|r| r.2).collect();
                while i < wpts.len() {
                    let j = wpts[i..].iter().take_while(|&&x| x == wpts[i]).count();
                    if j as u32 > best.1 {
                        best = (wpts[i], j as u32);
                    }
                    i += j;
                }
                (win, best.0)
            } else {
                (taxonomy.free_id(), 0)
            };
            let conf = if occupied {
                vote_confidence(n_win, votes, params.alpha, k)
            } else {
                vote_confidence(0, 0, params.alpha, k)
            };
            VoxelResult {
                lin: run[0].0,
                sem,
                inst,
                n,
                conf: conf as f32,
                p_occ: occupancy_reliability(n, params.lambda) as f32,
            }
        })
        .collect();

    for r in results {
        grid.sem[r.lin] = r.sem;
        grid.inst[r.lin] = r.inst;
        grid.n[r.lin] = r.n;
        grid.conf[r.lin] = r.conf;
        grid.p_occ[r.lin] = r.p_occ;
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lift::LabeledPoint;
    use nalgebra::Vector3;

    fn spec() -> GridSpec {
        GridSpec {
            bounds: [[0.0, 4.0], [0.0, 4.0], [0.0, 4.0]],
            voxel_size: 1.0,
            z_offset: 0.0,
        }
    }

    fn pt(x: f64, y: f64, z: f64, sem: ClassId, inst: u32) -> LabeledPoint {
        LabeledPoint {
            xyz: Vector3::new(x, y, z),
            sem,
            inst,
            conf: 1.0,
            t: 0,
            cam: 0,
            depth: 5.0,
        }
    }

    #[test]
    fn formula_examples() {
        assert!((vote_confidence(10, 10, 0.5, 17) - 10.5 / 18.5).abs() < 1e-15);
        assert!((vote_confidence(10, 10, 0.5, 17) - 0.5676).abs() < 1e-4);
        assert!((occupancy_reliability(1, 0.35) - 0.2953).abs() < 1e-4);
        assert_eq!(occupancy_reliability(0, 0.35), 0.0);
    }

    #[test]
    fn majority_vote_and_evidence() {
        let t = Taxonomy::occ3d_nuscenes();
        let mut points: Vec<_> = (0..10).map(|_| pt(0.5, 0.5, 0.5, 4, 7)).collect();
        points.push(pt(0.5, 0.5, 0.5, t.ignore_id(), 0));
        points.push(pt(0.5, 0.5, 0.5, 11, 12));
        let g = voxelize(
            &LabeledPointCloud { points },
            &spec(),
            &VoxelizeParams::default(),
            &t,
        );
        let v = spec().linear([0, 0, 0]);
        assert_eq!(g.sem[v], 4);
        assert_eq!(g.inst[v], 7);
        assert_eq!(g.n[v], 12);
        assert_eq!(g.conf[v], (10.5f64 / (11.0 + 8.5)) as f32);
        assert_eq!(g.p_occ[v], occupancy_reliability(12, 0.35) as f32);
    }

    #[test]
    fn ignore_only_voxel_is_free() {
        let t = Taxonomy::occ3d_nuscenes();
        let points = vec![pt(1.5, 1.5, 1.5, t.ignore_id(), 0); 3];
        let g = voxelize(
            &LabeledPointCloud { points },
            &spec(),
            &VoxelizeParams::default(),
            &t,
        );
        let v = spec().linear([1, 1, 1]);
        assert_eq!(g.sem[v], t.free_id());
        assert_eq!(g.n[v], 3);
        assert!(g.p_occ[v] > 0.0);
    }

    #[test]
    fn ties_prefer_smaller_ids() {
        let t = Taxonomy::occ3d_nuscenes();
        let points = vec![
            pt(0.5, 0.5, 0.5, 13, 0),
            pt(0.5, 0.5, 0.5, 11, 0),
            pt(2.5, 0.5, 0.5, 4, 9),
            pt(2.5, 0.5, 0.5, 4, 3),
        ];
        let g = voxelize(
            &LabeledPointCloud { points },
            &spec(),
            &VoxelizeParams::default(),
            &t,
        );
        assert_eq!(g.sem[spec().linear([0, 0, 0])], 11);
        assert_eq!(g.inst[spec().linear([2, 0, 0])], 3);
    }

    #[test]
    fn out_of_bounds_points_are_cropped() {
        let t = Taxonomy::occ3d_nuscenes();
        let points = vec![pt(4.0, 0.5, 0.5, 4, 1), pt(-0.1, 0.5, 0.5, 4, 1)];
        let g = voxelize(
            &LabeledPointCloud { points },
            &spec(),
            &VoxelizeParams::default(),
            &t,
        );
        assert!(g.n.iter().all(|&n| n == 0));
    }

    #[test]
    fn n_min_gates_occupancy() {
        let t = Taxonomy::occ3d_nuscenes();
        let points = vec![pt(0.5, 0.5, 0.5, 4, 1)];
        let params = VoxelizeParams {
            n_min: 2,
            ..Default::default()
        };
        let g = voxelize(&LabeledPointCloud { points }, &spec(), &params, &t);
        assert_eq!(g.sem[0], t.free_id());
    }
}
