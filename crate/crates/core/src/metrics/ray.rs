//! Ray sets and voxel traversal.

use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::grid::OccupancyGrid;
use crate::taxonomy::ClassId;

/// Rays sharing one ego-frame origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaySet {
    pub origin: [f64; 3],
    pub directions: Vec<[f64; 3]>,
}

/// Azimuth/elevation pattern of a [`RaySet`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RayPattern {
    pub origin: [f64; 3],
    pub azimuth_step_deg: f64,
    pub rows: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
}

impl Default for RayPattern {
    fn default() -> Self {
        Self {
            origin: [0.0; 3],
            azimuth_step_deg: 1.0,
            rows: 32,
            elevation_min_deg: -30.0,
            elevation_max_deg: 10.0,
        }
    }
}

impl RayPattern {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let ok = self.azimuth_step_deg > 0.0
            && self.azimuth_step_deg <= 360.0
            && self.rows >= 1
            && self.elevation_min_deg <= self.elevation_max_deg
            && self.elevation_min_deg > -90.0
            && self.elevation_max_deg < 90.0
            && self.origin.iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(MetricsError::InvalidRays("bad ray pattern".into()))
        }
    }

    pub fn build(&self) -> RaySet {
        let n_az = (360.0 / self.azimuth_step_deg).round().max(1.0) as usize;
        let mut directions = Vec::with_capacity(n_az * self.rows);
        for r in 0..self.rows {
            let el = if self.rows == 1 {
                self.elevation_min_deg
            } else {
                self.elevation_min_deg
                    + (self.elevation_max_deg - self.elevation_min_deg) * r as f64
                        / (self.rows - 1) as f64
            }
            .to_radians();
            for a in 0..n_az {
                let az = (a as f64 * self.azimuth_step_deg).to_radians();
                directions.push([el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]);
            }
        }
        RaySet {
            origin: self.origin,
            directions,
        }
    }
}

impl RaySet {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if !self.origin.iter().all(|v| v.is_finite()) {
            return Err(MetricsError::InvalidRays("origin not finite".into()));
        }
        for (i, d) in self.directions.iter().enumerate() {
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if !((n - 1.0).abs() <= 1e-9) {
                return Err(MetricsError::InvalidRays(format!(
                    "direction {i} has norm {n}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RayHit {
    Hit {
        voxel: [usize; 3],
        class_id: ClassId,
        instance: u32,
        /// Distance along the ray at which it enters the voxel.
        depth: f64,
    },
    Miss,
}

impl RayHit {
    pub fn voxel(&self) -> Option<[usize; 3]> {
        match self {
            RayHit::Hit { voxel, .. } => Some(*voxel),
            RayHit::Miss => None,
        }
    }
}

/// First non-free voxel along the ray.
///
/// The ray is clipped to the grid box and walked voxel by voxel from the
/// entry point. When the origin lies inside the grid, the voxel containing it
/// is not reported (its entry depth would be zero).
pub fn cast_ray(grid: &OccupancyGrid, origin: [f64; 3], dir: [f64; 3], free_id: ClassId) -> RayHit {
    let spec = &grid.spec;
    let dims = spec.dims();
    let lo = spec.origin();
    let s = spec.voxel_size;
    let hi: [f64; 3] = std::array::from_fn(|a| lo[a] + dims[a] as f64 * s);

    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a] == 0.0 {
            if origin[a] < lo[a] || origin[a] >= hi[a] {
                return RayHit::Miss;
            }
        } else {
            let ta = (lo[a] - origin[a]) / dir[a];
            let tb = (hi[a] - origin[a]) / dir[a];
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    if !(t0 < t1) {
        return RayHit::Miss;
    }

    let mut idx = [0isize; 3];
    let mut step = [0isize; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let p = origin[a] + t0 * dir[a];
        // On a cell boundary, the cell the ray moves into.
        let q = (p - lo[a]) / s;
        let i = if dir[a] < 0.0 {
            q.ceil() - 1.0
        } else {
            q.floor()
        } as isize;
        idx[a] = i.clamp(0, dims[a] as isize - 1);
        if dir[a] > 0.0 {
            step[a] = 1;
            t_max[a] = (lo[a] + (idx[a] + 1) as f64 * s - origin[a]) / dir[a];
            t_delta[a] = s / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            t_max[a] = (lo[a] + idx[a] as f64 * s - origin[a]) / dir[a];
            t_delta[a] = -s / dir[a];
        }
    }

    let mut t_entry = t0;
    loop {
        let v = [idx[0] as usize, idx[1] as usize, idx[2] as usize];
        if t_entry > 0.0 {
            let lin = spec.linear(v);
            if grid.sem[lin] != free_id {
                return RayHit::Hit {
                    voxel: v,
                    class_id: grid.sem[lin],
                    instance: grid.inst[lin],
                    depth: t_entry,
                };
            }
        }
        let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        if !t_max[a].is_finite() {
            return RayHit::Miss;
        }
        t_entry = t_max[a];
        idx[a] += step[a];
        if idx[a] < 0 || idx[a] >= dims[a] as isize {
            return RayHit::Miss;
        }
        t_max[a] += t_delta[a];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;

    fn grid() -> OccupancyGrid {
        let spec = GridSpec {
            bounds: [[-8.0, 8.0], [-8.0, 8.0], [-2.0, 2.0]],
            voxel_size: 0.4,
            z_offset: 0.0,
        };
        OccupancyGrid::empty(spec, 17, 17)
    }

    #[test]
    fn empty_grid_misses() {
        let g = grid();
        assert_eq!(cast_ray(&g, [0.0; 3], [1.0, 0.0, 0.0], 17), RayHit::Miss);
        assert_eq!(
            cast_ray(&g, [100.0, 0.0, 0.0], [1.0, 0.0, 0.0], 17),
            RayHit::Miss
        );
    }

    #[test]
    fn straight_ahead_depth() {
        let mut g = grid();
        let v = g.spec.voxel_index([4.2, 0.1, 0.1]).unwrap();
        let l = g.spec.linear(v);
        g.sem[l] = 4;
        g.inst[l] = 1000;
        match cast_ray(&g, [0.0, 0.1, 0.1], [1.0, 0.0, 0.0], 17) {
            RayHit::Hit {
                voxel,
                class_id,
                instance,
                depth,
            } => {
                assert_eq!((voxel, class_id, instance), (v, 4, 1000));
                assert!((depth - 4.0).abs() < 1e-6);
            }
            RayHit::Miss => panic!("expected a hit"),
        }
        // Backwards: nothing.
        assert_eq!(
            cast_ray(&g, [0.0, 0.1, 0.1], [-1.0, 0.0, 0.0], 17),
            RayHit::Miss
        );
    }

    #[test]
    fn origin_voxel_is_skipped_and_outside_origin_enters() {
        let mut g = grid();
        let v = g.spec.voxel_index([0.1, 0.1, 0.1]).unwrap();
        let l = g.spec.linear(v);
        g.sem[l] = 11;
        assert_eq!(
            cast_ray(&g, [0.1, 0.1, 0.1], [0.0, 1.0, 0.0], 17),
            RayHit::Miss
        );
        let hit = cast_ray(&g, [20.1, 0.1, 0.1], [-1.0, 0.0, 0.0], 17);
        match hit {
            RayHit::Hit { voxel, depth, .. } => {
                assert_eq!(voxel, v);
                assert!((depth - 19.7).abs() < 1e-9);
            }
            RayHit::Miss => panic!("expected a hit"),
        }
    }

    #[test]
    fn pattern_is_normalized() {
        let rays = RayPattern::default().build();
        assert_eq!(rays.directions.len(), 360 * 32);
        rays.validate().unwrap();
        let bad = RaySet {
            origin: [0.0; 3],
            directions: vec![[1.0, 1.0, 0.0]],
        };
        assert!(bad.validate().is_err());
    }
}
