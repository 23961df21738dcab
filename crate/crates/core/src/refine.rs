//! Four-stage deterministic grid refinement.
//!
//! 1. pinhole filling through morphological closing, then dense-cavity filling
//! 2. warmup completion of the near-ego ground with driveable surface
//! 3. a single conservative coherence pass over ambiguous occupied voxels
//! 4. ignore cleanup and class-constrained instance dilation
//!
//! Every step reads a snapshot of the previous grid and writes a new one, so
//! results do not depend on iteration order or thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::OccupancyGrid;
use crate::taxonomy::{ClassId, Taxonomy, TaxonomyError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineParams {
    pub fill: bool,
    pub warmup: bool,
    pub coherence: bool,
    pub cleanup: bool,

    pub pinhole_support: u8,
    pub cavity_n_occ: u8,
    pub cavity_support: u8,

    /// Horizontal radius around the ego considered for completion (meters).
    pub r_ego: f64,
    /// Number of voxel layers above the vertical offset treated as near-ground.
    pub ground_layers: usize,
    /// Planar (same-layer) dilation radius around driveable voxels, in voxels.
    pub planar_radius: usize,
    /// 3D dilation radius around thing voxels that blocks completion, in voxels.
    pub object_radius: usize,
    /// Completion runs while the causal window holds fewer frames than this.
    pub warmup_frames: usize,
    pub fill_class: String,

    pub freeze_conf: f64,
    pub freeze_p_occ: f64,
    pub coherence_support: u8,
    pub coherence_ratio: f64,
    /// Classes never overwritten by coherence, in addition to all thing classes.
    pub protected: Vec<String>,

    pub cleanup_support: u8,
    /// Instance dilation radius in voxels (Euclidean).
    pub dilation_radius: f64,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self {
            fill: true,
            warmup: true,
            coherence: true,
            cleanup: true,
            pinhole_support: 4,
            cavity_n_occ: 10,
            cavity_support: 5,
            r_ego: 10.0,
            ground_layers: 3,
            planar_radius: 2,
            object_radius: 1,
            warmup_frames: 5,
            fill_class: "driveable_surface".into(),
            freeze_conf: 0.75,
            freeze_p_occ: 0.85,
            coherence_support: 5,
            coherence_ratio: 0.6,
            protected: vec!["barrier".into(), "traffic_cone".into()],
            cleanup_support: 2,
            dilation_radius: 2.0,
        }
    }
}

impl RefineParams {
    pub fn disabled() -> Self {
        Self {
            fill: false,
            warmup: false,
            coherence: false,
            cleanup: false,
            ..Self::default()
        }
    }
}

/// Evidence about the run that gates the warmup stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefineContext {
    pub window_len: usize,
    pub causal: bool,
}

/// Class sets resolved from names in [`RefineParams`].
#[derive(Debug, Clone)]
pub struct RefineClasses {
    protected: Vec<bool>,
    fill_class: ClassId,
}

impl RefineClasses {
    pub fn resolve(params: &RefineParams, taxonomy: &Taxonomy) -> Result<Self, TaxonomyError> {
        let mut protected = vec![false; taxonomy.num_classes()];
        for c in taxonomy.thing_classes() {
            protected[c as usize] = true;
        }
        for name in &params.protected {
            protected[taxonomy.class_by_name(name)? as usize] = true;
        }
        Ok(Self {
            protected,
            fill_class: taxonomy.class_by_name(&params.fill_class)?,
        })
    }

    pub fn is_protected(&self, c: ClassId) -> bool {
        self.protected.get(c as usize).copied().unwrap_or(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeighborhoodStats {
    /// Most frequent occupied label among the 26 neighbors (ties: smaller id).
    pub modal: Option<ClassId>,
    pub modal_support: u8,
    /// Neighbors carrying a semantic class (neither free nor ignore).
    pub n_occ: u8,
}

#[derive(Clone, Copy)]
struct Lattice {
    dims: [usize; 3],
}

impl Lattice {
    fn of(grid: &OccupancyGrid) -> Self {
        Self { dims: grid.dims() }
    }

    fn len(&self) -> usize {
        self.dims.iter().product()
    }

    fn unlinear(&self, lin: usize) -> [usize; 3] {
        let [_, ny, nz] = self.dims;
        [lin / (ny * nz), (lin / nz) % ny, lin % nz]
    }

    fn linear(&self, [i, j, k]: [usize; 3]) -> usize {
        let [_, ny, nz] = self.dims;
        (i * ny + j) * nz + k
    }

    fn offset(&self, v: [usize; 3], d: [isize; 3]) -> Option<usize> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let c = v[a] as isize + d[a];
            if c < 0 || c >= self.dims[a] as isize {
                return None;
            }
            out[a] = c as usize;
        }
        Some(self.linear(out))
    }

    fn neighbors(&self, lin: usize) -> impl Iterator<Item = usize> + '_ {
        let v = self.unlinear(lin);
        (-1isize..=1)
            .flat_map(|a| (-1isize..=1).flat_map(move |b| (-1isize..=1).map(move |c| [a, b, c])))
            .filter(|d| *d != [0, 0, 0])
            .filter_map(move |d| self.offset(v, d))
    }
}

fn stats_at(sem: &[ClassId], lat: Lattice, lin: usize, taxonomy: &Taxonomy) -> NeighborhoodStats {
    let mut counts: [(ClassId, u8); 26] = [(0, 0); 26];
    let mut used = 0;
    let mut n_occ = 0u8;
    for nb in lat.neighbors(lin) {
        let s = sem[nb];
        if !taxonomy.is_class(s) {
            continue;
        }
        n_occ += 1;
        match counts[..used].iter_mut().find(|c| c.0 == s) {
            Some(c) => c.1 += 1,
            None => {
                counts[used] = (s, 1);
                used += 1;
            }
        }
    }
    let best = counts[..used]
        .iter()
        .copied()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
    NeighborhoodStats {
        modal: best.map(|b| b.0),
        modal_support: best.map_or(0, |b| b.1),
        n_occ,
    }
}

/// Neighborhood statistics of voxel `v` (truncated at the grid border).
pub fn neighborhood_stats(
    grid: &OccupancyGrid,
    v: [usize; 3],
    taxonomy: &Taxonomy,
) -> NeighborhoodStats {
    let lat = Lattice::of(grid);
    stats_at(&grid.sem, lat, lat.linear(v), taxonomy)
}

/// Separable box dilation (`erode = false`) or erosion of a mask with
/// per-axis radii; out-of-grid voxels are ignored.
fn morph(mask: &[bool], lat: Lattice, radius: [usize; 3], erode: bool) -> Vec<bool> {
    let mut cur = mask.to_vec();
    for axis in 0..3 {
        let r = radius[axis] as isize;
        if r == 0 {
            continue;
        }
        let src = cur.clone();
        cur = (0..lat.len())
            .into_par_iter()
            .map(|lin| {
                let v = lat.unlinear(lin);
                let mut d = [0isize; 3];
                let mut hits = (-r..=r).filter_map(|o| {
                    d[axis] = o;
                    lat.offset(v, d).map(|n| src[n])
                });
                if erode {
                    hits.all(|b| b)
                } else {
                    hits.any(|b| b)
                }
            })
            .collect();
    }
    cur
}

fn set_filled(out: &mut OccupancyGrid, lin: usize, class: ClassId, conf: f64, taxonomy: &Taxonomy) {
    out.sem[lin] = class;
    out.inst[lin] = if taxonomy.is_thing(class) {
        0
    } else {
        taxonomy.stuff_instance_id(class)
    };
    out.n[lin] = 0;
    out.p_occ[lin] = 0.0;
    out.conf[lin] = conf as f32;
}

fn modal_fraction(s: &NeighborhoodStats) -> f64 {
    f64::from(s.modal_support) / f64::from(s.n_occ.max(1))
}

/// Stage 1: closing-based pinhole filling, then dense-cavity filling.
pub fn fill_pinholes_and_cavities(
    grid: &OccupancyGrid,
    params: &RefineParams,
    taxonomy: &Taxonomy,
) -> OccupancyGrid {
    let lat = Lattice::of(grid);
    let occ: Vec<bool> = grid.sem.iter().map(|&s| taxonomy.is_class(s)).collect();
    let closed = morph(&morph(&occ, lat, [1; 3], false), lat, [1; 3], true);

    let mut out = grid.clone();
    let fills: Vec<(usize, NeighborhoodStats)> = (0..lat.len())
        .into_par_iter()
        .filter(|&v| closed[v] && !occ[v])
        .filter_map(|v| {
            let s = stats_at(&grid.sem, lat, v, taxonomy);
            (s.modal.is_some() && s.modal_support >= params.pinhole_support).then_some((v, s))
        })
        .collect();
    for (v, s) in fills {
        set_filled(
            &mut out,
            v,
            s.modal.expect("checked"),
            modal_fraction(&s),
            taxonomy,
        );
    }

    let snapshot = out.clone();
    let fills: Vec<(usize, NeighborhoodStats)> = (0..lat.len())
        .into_par_iter()
        .filter(|&v| !taxonomy.is_class(snapshot.sem[v]))
        .filter_map(|v| {
            let s = stats_at(&snapshot.sem, lat, v, taxonomy);
            (s.modal.is_some()
                && s.n_occ >= params.cavity_n_occ
                && s.modal_support >= params.cavity_support)
                .then_some((v, s))
        })
        .collect();
    for (v, s) in fills {
        set_filled(
            &mut out,
            v,
            s.modal.expect("checked"),
            modal_fraction(&s),
            taxonomy,
        );
    }
    out
}

/// Stage 2: fills unknown near-ground voxels around the ego with the fill
/// class when they lie within the planar dilation of existing fill-class
/// voxels and outside the 3D dilation of thing voxels.
pub fn warmup_ego_completion(
    grid: &OccupancyGrid,
    params: &RefineParams,
    classes: &RefineClasses,
    taxonomy: &Taxonomy,
) -> OccupancyGrid {
    let lat = Lattice::of(grid);
    let spec = &grid.spec;
    let nz = lat.dims[2];
    let ground = (-spec.bounds[2][0] / spec.voxel_size).round();
    if ground < 0.0 || ground >= nz as f64 {
        return grid.clone();
    }
    let k0 = ground as usize;
    let k1 = (k0 + params.ground_layers).min(nz);
    let fill = classes.fill_class;
    let surface: Vec<bool> = grid.sem.iter().map(|&s| s == fill).collect();
    let near_surface = morph(
        &surface,
        lat,
        [params.planar_radius, params.planar_radius, 0],
        false,
    );
    let things: Vec<bool> = grid.sem.iter().map(|&s| taxonomy.is_thing(s)).collect();
    let near_things = morph(&things, lat, [params.object_radius; 3], false);

    let r2 = params.r_ego * params.r_ego;
    let mut out = grid.clone();
    let fills: Vec<usize> = (0..lat.len())
        .into_par_iter()
        .filter(|&v| {
            let [i, j, k] = lat.unlinear(v);
            if k < k0 || k >= k1 || taxonomy.is_class(grid.sem[v]) {
                return false;
            }
            let c = spec.voxel_center([i, j, k]);
            c[0] * c[0] + c[1] * c[1] <= r2 && near_surface[v] && !near_things[v]
        })
        .collect();
    for v in fills {
        let s = stats_at(&grid.sem, lat, v, taxonomy);
        set_filled(
            &mut out,
            v,
            fill,
            modal_fraction(&s).max(1.0 / taxonomy.num_classes() as f64),
            taxonomy,
        );
    }
    out
}

fn frozen(grid: &OccupancyGrid, v: usize, params: &RefineParams) -> bool {
    f64::from(grid.conf[v]) >= params.freeze_conf || f64::from(grid.p_occ[v]) >= params.freeze_p_occ
}

/// Stage 3: one pass switching ambiguous occupied voxels to the modal class
/// when the modal support is both strong and dominant.
pub fn coherence_pass(
    grid: &OccupancyGrid,
    params: &RefineParams,
    classes: &RefineClasses,
    taxonomy: &Taxonomy,
) -> OccupancyGrid {
    let lat = Lattice::of(grid);
    let flips: Vec<(usize, ClassId)> = (0..lat.len())
        .into_par_iter()
        .filter(|&v| {
            let s = grid.sem[v];
            taxonomy.is_class(s) && !classes.is_protected(s) && !frozen(grid, v, params)
        })
        .filter_map(|v| {
            let s = stats_at(&grid.sem, lat, v, taxonomy);
            let modal = s.modal?;
            let strong = s.modal_support >= params.coherence_support;
            let dominant =
                f64::from(s.modal_support) + 1e-9 >= params.coherence_ratio * f64::from(s.n_occ);
            (strong && dominant && modal != grid.sem[v]).then_some((v, modal))
        })
        .collect();
    let mut out = grid.clone();
    for (v, c) in flips {
        out.sem[v] = c;
        out.inst[v] = if taxonomy.is_thing(c) {
            0
        } else {
            taxonomy.stuff_instance_id(c)
        };
    }
    out
}

/// Stage 4: ignore cleanup, then class-constrained instance dilation.
pub fn cleanup_and_instance_dilation(
    grid: &OccupancyGrid,
    params: &RefineParams,
    taxonomy: &Taxonomy,
) -> OccupancyGrid {
    let lat = Lattice::of(grid);
    let ignore = taxonomy.ignore_id();
    let mut out = grid.clone();
    let cleaned: Vec<(usize, Option<NeighborhoodStats>)> = (0..lat.len())
        .into_par_iter()
        .filter(|&v| grid.sem[v] == ignore)
        .map(|v| {
            let s = stats_at(&grid.sem, lat, v, taxonomy);
            (
                v,
                (s.modal.is_some() && s.modal_support >= params.cleanup_support).then_some(s),
            )
        })
        .collect();
    for (v, s) in cleaned {
        match s {
            Some(s) => set_filled(
                &mut out,
                v,
                s.modal.expect("checked"),
                modal_fraction(&s),
                taxonomy,
            ),
            None => {
                out.sem[v] = taxonomy.free_id();
                out.inst[v] = 0;
            }
        }
    }

    // Offsets within the dilation radius, grouped by squared distance.
    let r = params.dilation_radius.max(0.0);
    let ri = r.floor() as isize;
    let mut offsets: Vec<(isize, [isize; 3])> = Vec::new();
    for a in -ri..=ri {
        for b in -ri..=ri {
            for c in -ri..=ri {
                let d2 = a * a + b * b + c * c;
                if d2 > 0 && (d2 as f64) <= r * r + 1e-9 {
                    offsets.push((d2, [a, b, c]));
                }
            }
        }
    }
    offsets.sort_by_key(|o| o.0);

    let snapshot = out.clone();
    let inherits: Vec<(usize, u32)> = (0..lat.len())
        .into_par_iter()
        .filter(|&v| snapshot.inst[v] == 0 && taxonomy.is_thing(snapshot.sem[v]))
        .filter_map(|v| {
            let class = snapshot.sem[v];
            let p = lat.unlinear(v);
            let mut best: Option<(isize, u32)> = None;
            for &(d2, d) in &offsets {
                if best.is_some_and(|b| d2 > b.0) {
                    break;
                }
                let Some(n) = lat.offset(p, d) else { continue };
                let id = snapshot.inst[n];
                if id != 0 && snapshot.sem[n] == class && best.is_none_or(|b| id < b.1) {
                    best = Some((d2, id));
                }
            }
            best.map(|b| (v, b.1))
        })
        .collect();
    for (v, id) in inherits {
        out.inst[v] = id;
    }
    out
}

/// Stage indices used when reporting intermediate grids.
pub const STAGE_NAMES: [&str; 4] = ["fill", "warmup", "coherence", "cleanup"];

/// Applies the enabled stages in order. `observe` sees the grid after every
/// stage (1-based stage number), including disabled ones.
pub fn refine_all(
    grid: &OccupancyGrid,
    params: &RefineParams,
    ctx: RefineContext,
    taxonomy: &Taxonomy,
    mut observe: impl FnMut(usize, &OccupancyGrid),
) -> Result<OccupancyGrid, TaxonomyError> {
    let classes = RefineClasses::resolve(params, taxonomy)?;
    let mut g = grid.clone();
    if params.fill {
        g = fill_pinholes_and_cavities(&g, params, taxonomy);
    }
    observe(1, &g);
    if params.warmup && ctx.causal && ctx.window_len < params.warmup_frames {
        g = warmup_ego_completion(&g, params, &classes, taxonomy);
    }
    observe(2, &g);
    if params.coherence {
        g = coherence_pass(&g, params, &classes, taxonomy);
    }
    observe(3, &g);
    if params.cleanup {
        g = cleanup_and_instance_dilation(&g, params, taxonomy);
    }
    observe(4, &g);
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;

    const ROAD: ClassId = 11;
    const SIDEWALK: ClassId = 13;
    const CAR: ClassId = 4;
    const MANMADE: ClassId = 15;

    fn grid(n: usize) -> (OccupancyGrid, Taxonomy) {
        let t = Taxonomy::occ3d_nuscenes();
        let spec = GridSpec {
            bounds: [[0.0, n as f64], [0.0, n as f64], [0.0, n as f64]],
            voxel_size: 1.0,
            z_offset: 0.0,
        };
        (OccupancyGrid::empty(spec, t.free_id(), t.num_classes()), t)
    }

    fn set(g: &mut OccupancyGrid, v: [usize; 3], c: ClassId) {
        let l = g.spec.linear(v);
        g.sem[l] = c;
    }

    fn at(g: &OccupancyGrid, v: [usize; 3]) -> ClassId {
        g.sem[g.spec.linear(v)]
    }

    #[test]
    fn stats_examples() {
        let (mut g, t) = grid(3);
        assert_eq!(
            neighborhood_stats(&g, [1, 1, 1], &t),
            NeighborhoodStats {
                modal: None,
                modal_support: 0,
                n_occ: 0
            }
        );
        for v in 0..27 {
            g.sem[v] = CAR;
        }
        g.sem[g.spec.linear([1, 1, 1])] = t.free_id();
        assert_eq!(
            neighborhood_stats(&g, [1, 1, 1], &t),
            NeighborhoodStats {
                modal: Some(CAR),
                modal_support: 26,
                n_occ: 26
            }
        );
        // 13 road + 13 sidewalk: road has the smaller id.
        let mut n = 0;
        for v in 0..27 {
            if v == g.spec.linear([1, 1, 1]) {
                continue;
            }
            g.sem[v] = if n < 13 { SIDEWALK } else { ROAD };
            n += 1;
        }
        let s = neighborhood_stats(&g, [1, 1, 1], &t);
        assert_eq!((s.modal, s.modal_support, s.n_occ), (Some(ROAD), 13, 26));
        // Corner voxels see a truncated neighborhood of 7, one of which is the free center.
        assert_eq!(neighborhood_stats(&g, [0, 0, 0], &t).n_occ, 6);
    }

    #[test]
    fn enclosed_pinhole_is_filled() {
        let (mut g, t) = grid(5);
        for i in 1..4 {
            for j in 1..4 {
                for k in 1..4 {
                    set(&mut g, [i, j, k], ROAD);
                }
            }
        }
        set(&mut g, [2, 2, 2], t.free_id());
        let out = fill_pinholes_and_cavities(&g, &RefineParams::default(), &t);
        assert_eq!(at(&out, [2, 2, 2]), ROAD);
        let l = g.spec.linear([2, 2, 2]);
        assert_eq!((out.n[l], out.p_occ[l], out.conf[l]), (0, 0.0, 1.0));
        assert_eq!(out.inst[l], t.stuff_instance_id(ROAD));
        // Occupied voxels are untouched.
        assert_eq!(at(&out, [1, 1, 1]), ROAD);
    }

    #[test]
    fn sparse_voxel_is_not_filled() {
        let (mut g, t) = grid(5);
        set(&mut g, [1, 2, 2], ROAD);
        set(&mut g, [3, 2, 2], ROAD);
        set(&mut g, [2, 1, 2], SIDEWALK);
        let out = fill_pinholes_and_cavities(&g, &RefineParams::default(), &t);
        assert_eq!(at(&out, [2, 2, 2]), t.free_id());
    }

    #[test]
    fn cavity_in_wall_is_filled() {
        let (mut g, t) = grid(6);
        for i in 1..5 {
            for j in 1..5 {
                for k in 1..4 {
                    set(&mut g, [i, j, k], MANMADE);
                }
            }
        }
        set(&mut g, [2, 2, 2], t.free_id());
        set(&mut g, [3, 2, 2], t.free_id());
        let out = fill_pinholes_and_cavities(&g, &RefineParams::default(), &t);
        assert_eq!(at(&out, [2, 2, 2]), MANMADE);
        assert_eq!(at(&out, [3, 2, 2]), MANMADE);
    }

    #[test]
    fn coherence_flips_ambiguous_voxel() {
        let (mut g, t) = grid(3);
        let c = g.spec.linear([1, 1, 1]);
        // 10 sidewalk + 2 road neighbors.
        let mut placed = 0;
        for v in 0..27 {
            if v == c || placed >= 12 {
                continue;
            }
            g.sem[v] = if placed < 10 { SIDEWALK } else { ROAD };
            placed += 1;
        }
        g.sem[c] = ROAD;
        g.conf[c] = 0.5;
        g.p_occ[c] = 0.3;
        let classes = RefineClasses::resolve(&RefineParams::default(), &t).unwrap();
        let out = coherence_pass(&g, &RefineParams::default(), &classes, &t);
        assert_eq!(out.sem[c], SIDEWALK);

        let mut frozen = g.clone();
        frozen.conf[c] = 0.9;
        assert_eq!(
            coherence_pass(&frozen, &RefineParams::default(), &classes, &t).sem[c],
            ROAD
        );

        let mut car = g.clone();
        car.sem[c] = CAR;
        assert_eq!(
            coherence_pass(&car, &RefineParams::default(), &classes, &t).sem[c],
            CAR
        );
    }

    #[test]
    fn cleanup_examples() {
        let (mut g, t) = grid(3);
        let c = g.spec.linear([1, 1, 1]);
        g.sem[c] = t.ignore_id();
        g.sem[0] = 16;
        g.sem[1] = 16;
        let out = cleanup_and_instance_dilation(&g, &RefineParams::default(), &t);
        assert_eq!(out.sem[c], 16);
        g.sem[1] = t.free_id();
        let out = cleanup_and_instance_dilation(&g, &RefineParams::default(), &t);
        assert_eq!(out.sem[c], t.free_id());
    }

    #[test]
    fn instance_dilation_radius() {
        let (mut g, t) = grid(8);
        for i in 0..8 {
            set(&mut g, [i, 0, 0], CAR);
        }
        let src = g.spec.linear([0, 0, 0]);
        g.inst[src] = 1005;
        let out = cleanup_and_instance_dilation(&g, &RefineParams::default(), &t);
        assert_eq!(out.inst[g.spec.linear([1, 0, 0])], 1005);
        assert_eq!(out.inst[g.spec.linear([2, 0, 0])], 1005);
        assert_eq!(out.inst[g.spec.linear([3, 0, 0])], 0);
        // Semantics unchanged.
        assert_eq!(out.sem, g.sem);
    }

    #[test]
    fn dilation_ties_prefer_smaller_id_and_respect_class() {
        let (mut g, t) = grid(5);
        set(&mut g, [0, 0, 0], CAR);
        set(&mut g, [1, 0, 0], CAR);
        set(&mut g, [2, 0, 0], CAR);
        set(&mut g, [1, 1, 0], 10);
        g.inst[g.spec.linear([0, 0, 0])] = 1007;
        g.inst[g.spec.linear([2, 0, 0])] = 1003;
        g.inst[g.spec.linear([1, 1, 0])] = 1001;
        let out = cleanup_and_instance_dilation(&g, &RefineParams::default(), &t);
        assert_eq!(out.inst[g.spec.linear([1, 0, 0])], 1003);
    }

    fn ego_grid() -> (OccupancyGrid, Taxonomy) {
        let t = Taxonomy::occ3d_nuscenes();
        let spec = GridSpec {
            bounds: [[-40.0, 40.0], [-40.0, 40.0], [-2.0, 2.0]],
            voxel_size: 0.4,
            z_offset: 0.0,
        };
        (OccupancyGrid::empty(spec, t.free_id(), t.num_classes()), t)
    }

    #[test]
    fn warmup_completion_guards() {
        let (mut g, t) = ego_grid();
        let params = RefineParams::default();
        let classes = RefineClasses::resolve(&params, &t).unwrap();
        // Ground layer: relative z 0 -> k = 5.
        let k = 5;
        let spec = g.spec;
        let idx = |x: f64, y: f64| spec.voxel_index([x, y, 0.1]).unwrap();
        assert_eq!(idx(0.0, 0.0)[2], k);
        // Driveable voxel near the ego, unknown neighbor next to it.
        let road = idx(2.1, 0.1);
        set(&mut g, road, ROAD);
        let next = [road[0] + 1, road[1], k];
        // Driveable near a car at 30 m: beyond r_ego.
        let far_road = idx(30.1, 0.1);
        set(&mut g, far_road, ROAD);
        let far_next = [far_road[0] + 1, far_road[1], k];
        // A car voxel next to another driveable voxel.
        let road2 = idx(-4.1, 0.1);
        set(&mut g, road2, ROAD);
        let car = [road2[0] + 2, road2[1], k + 1];
        set(&mut g, car, CAR);
        let next_to_car = [road2[0] + 1, road2[1], k];

        let out = warmup_ego_completion(&g, &params, &classes, &t);
        assert_eq!(at(&out, next), ROAD);
        assert_eq!(at(&out, far_next), t.free_id());
        assert_eq!(at(&out, next_to_car), t.free_id());
        // Layers above the band are untouched.
        assert_eq!(at(&out, [next[0], next[1], k + 3]), t.free_id());
    }

    #[test]
    fn warmup_gated_by_window() {
        let (mut g, t) = ego_grid();
        let road = g.spec.voxel_index([2.1, 0.1, 0.1]).unwrap();
        set(&mut g, road, ROAD);
        let params = RefineParams {
            fill: false,
            coherence: false,
            cleanup: false,
            ..RefineParams::default()
        };
        let early = refine_all(
            &g,
            &params,
            RefineContext {
                window_len: 2,
                causal: true,
            },
            &t,
            |_, _| {},
        )
        .unwrap();
        let late = refine_all(
            &g,
            &params,
            RefineContext {
                window_len: 5,
                causal: true,
            },
            &t,
            |_, _| {},
        )
        .unwrap();
        let offline = refine_all(
            &g,
            &params,
            RefineContext {
                window_len: 2,
                causal: false,
            },
            &t,
            |_, _| {},
        )
        .unwrap();
        assert_ne!(early, g);
        assert_eq!(late, g);
        assert_eq!(offline, g);
    }

    #[test]
    fn disabled_stages_are_identity() {
        let (mut g, t) = grid(4);
        set(&mut g, [1, 1, 1], CAR);
        set(&mut g, [2, 1, 1], t.ignore_id());
        let mut seen = Vec::new();
        let out = refine_all(
            &g,
            &RefineParams::disabled(),
            RefineContext {
                window_len: 1,
                causal: true,
            },
            &t,
            |s, _| seen.push(s),
        )
        .unwrap();
        assert_eq!(out, g);
        assert_eq!(seen, vec![1, 2, 3, 4]);
        let (empty, _) = grid(4);
        let out = refine_all(
            &empty,
            &RefineParams::default(),
            RefineContext {
                window_len: 1,
                causal: true,
            },
            &t,
            |_, _| {},
        )
        .unwrap();
        assert_eq!(out, empty);
    }
}
