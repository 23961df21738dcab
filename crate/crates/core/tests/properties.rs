//! Property tests for cross-module invariants.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use occupancy::grid::{GridSpec, OccupancyGrid};
use occupancy::ingest::{fuse_masks, pack_instance, MaskCandidate};
use occupancy::instances::{
    default_size_intervals, fit_yaw_box, identify_instances, iosv, reassign_points,
    refine_candidate, CandidatePoint, InstanceParams, SizeTable,
};
use occupancy::lift::{LabeledPoint, LabeledPointCloud};
use occupancy::metrics::{evaluate_pair, RaySet};
use occupancy::raster::Raster;
use occupancy::refine::{
    cleanup_and_instance_dilation, coherence_pass, fill_pinholes_and_cavities, refine_all,
    RefineClasses, RefineContext, RefineParams,
};
use occupancy::taxonomy::{ClassId, Taxonomy};
use occupancy::voxelize::{voxelize, VoxelizeParams};

fn tax() -> Taxonomy {
    Taxonomy::occ3d_nuscenes()
}

fn small_spec() -> GridSpec {
    GridSpec {
        bounds: [[0.0, 8.0], [0.0, 8.0], [0.0, 8.0]],
        voxel_size: 1.0,
        z_offset: 0.0,
    }
}

/// Random grid with a mix of free, ignore, stuff and thing voxels.
fn grid_strategy() -> impl Strategy<Value = OccupancyGrid> {
    let n = small_spec().len();
    proptest::collection::vec((0u8..24, 0u32..3, 0.0f32..1.0, 0.0f32..1.0), n).prop_map(|cells| {
        let t = tax();
        let mut g = OccupancyGrid::empty(small_spec(), t.free_id(), t.num_classes());
        for (v, (c, i, conf, p)) in cells.into_iter().enumerate() {
            let sem = match c {
                0..=5 => t.free_id(),
                6 => t.ignore_id(),
                // Bias towards a few classes so neighbourhoods have clear modes.
                7..=10 => 11,
                11..=13 => 15,
                c => ClassId::from(c - 13),
            };
            g.sem[v] = sem;
            g.inst[v] = if t.is_thing(sem) {
                if i == 0 {
                    0
                } else {
                    999 + i
                }
            } else if t.is_class(sem) {
                t.stuff_instance_id(sem)
            } else {
                0
            };
            g.conf[v] = conf;
            g.p_occ[v] = p;
            g.n[v] = u32::from(sem != t.free_id());
        }
        g
    })
}

fn cloud_strategy(max: usize) -> impl Strategy<Value = Vec<LabeledPoint>> {
    proptest::collection::vec(
        (
            (-1.0f64..9.0, -1.0f64..9.0, -1.0f64..9.0),
            prop_oneof![Just(255u16), 0u16..17],
            0u32..4,
        ),
        1..max,
    )
    .prop_map(|v| {
        v.into_iter()
            .map(|((x, y, z), sem, inst)| LabeledPoint {
                xyz: Vector3::new(x, y, z),
                sem,
                inst,
                conf: 1.0,
                t: 0,
                cam: 0,
                depth: 1.0,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fuse_masks_ignores_candidate_order(
        cands in proptest::collection::vec((0usize..12, 0u32..3, 0u8..3, proptest::collection::vec(any::<bool>(), 24)), 0..8),
        seed in any::<u64>(),
    ) {
        let t = tax();
        let n_prompts = t.rules().len();
        let mut seen = BTreeSet::new();
        let list: Vec<MaskCandidate> = cands
            .into_iter()
            .filter(|(p, c, _, _)| seen.insert((*p % n_prompts, *c)))
            .map(|(p, c, s, m)| MaskCandidate {
                prompt_id: p % n_prompts,
                candidate_id: c,
                // Few distinct scores so ties are frequent.
                score: 0.5 + 0.1 * f64::from(s),
                mask: Raster::from_vec(6, 4, 1, m.into_iter().map(u8::from).collect()).unwrap(),
            })
            .collect();
        let mut shuffled = list.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = fuse_masks(6, 4, &list, &t).unwrap();
        let b = fuse_masks(6, 4, &shuffled, &t).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn voxelize_ignores_point_order(points in cloud_strategy(400), seed in any::<u64>()) {
        let t = tax();
        let params = VoxelizeParams::default();
        let mut shuffled = points.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = voxelize(&LabeledPointCloud { points }, &small_spec(), &params, &t);
        let b = voxelize(&LabeledPointCloud { points: shuffled }, &small_spec(), &params, &t);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn adding_a_point_never_lowers_evidence(points in cloud_strategy(200), extra in cloud_strategy(2)) {
        let t = tax();
        let spec = small_spec();
        let params = VoxelizeParams::default();
        let before = voxelize(&LabeledPointCloud { points: points.clone() }, &spec, &params, &t);
        let p = extra[0];
        let mut more = points;
        more.push(p);
        let after = voxelize(&LabeledPointCloud { points: more }, &spec, &params, &t);
        if let Some(v) = spec.voxel_index([p.xyz.x, p.xyz.y, p.xyz.z]) {
            let lin = spec.linear(v);
            prop_assert_eq!(after.n[lin], before.n[lin] + 1);
            prop_assert!(after.p_occ[lin] >= before.p_occ[lin]);
        } else {
            prop_assert_eq!(after, before);
        }
    }

    #[test]
    fn fill_only_touches_unoccupied_voxels(g in grid_strategy()) {
        let t = tax();
        let out = fill_pinholes_and_cavities(&g, &RefineParams::default(), &t);
        for v in 0..g.len() {
            if t.is_class(g.sem[v]) {
                prop_assert_eq!(out.sem[v], g.sem[v]);
                prop_assert_eq!(out.inst[v], g.inst[v]);
            }
        }
    }

    #[test]
    fn coherence_respects_frozen_protected_and_free(g in grid_strategy()) {
        let t = tax();
        let params = RefineParams::default();
        let classes = RefineClasses::resolve(&params, &t).unwrap();
        let out = coherence_pass(&g, &params, &classes, &t);
        for v in 0..g.len() {
            let frozen = f64::from(g.conf[v]) >= params.freeze_conf || f64::from(g.p_occ[v]) >= params.freeze_p_occ;
            if frozen || classes.is_protected(g.sem[v]) || !t.is_class(g.sem[v]) {
                prop_assert_eq!(out.sem[v], g.sem[v]);
            }
        }
    }

    #[test]
    fn dilation_keeps_semantics_and_class_boundaries(g in grid_strategy()) {
        let t = tax();
        let out = cleanup_and_instance_dilation(&g, &RefineParams::default(), &t);
        let spec = g.spec;
        for v in 0..g.len() {
            if g.sem[v] != t.ignore_id() {
                prop_assert_eq!(out.sem[v], g.sem[v]);
            }
            if out.inst[v] != g.inst[v] && t.is_thing(g.sem[v]) {
                // The new id must come from a voxel of the same class within the radius.
                let c = spec.unlinear(v);
                let source = (0..g.len()).any(|u| {
                    let d = spec.unlinear(u);
                    let d2: i64 = (0..3).map(|a| (c[a] as i64 - d[a] as i64).pow(2)).sum();
                    d2 <= 4 && g.sem[u] == g.sem[v] && g.inst[u] == out.inst[v]
                });
                prop_assert!(source, "voxel {:?} took id {} from nowhere", c, out.inst[v]);
            }
        }
    }

    #[test]
    fn refinement_does_not_depend_on_worker_count(g in grid_strategy(), window_len in 1usize..7) {
        let t = tax();
        let ctx = RefineContext { window_len, causal: true };
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| refine_all(&g, &RefineParams::default(), ctx, &t, |_, _| {}).unwrap())
        };
        prop_assert_eq!(run(1), run(4));
    }

    #[test]
    fn metrics_are_bounded_and_identity_scores_one(pred in grid_strategy(), gt in grid_strategy()) {
        let t = tax();
        let rays = ray_set();
        let th = [1.0, 2.0, 4.0];
        let s = evaluate_pair(&pred, &gt, &rays, &th, &t).unwrap().summary(&t);
        for x in [s.miou, s.iou_occ, s.rayiou, s.raypq].into_iter()
            .chain(s.per_class_iou.values().copied())
            .chain(s.rayiou_at.values().copied())
            .chain(s.raypq_at.values().copied())
        {
            prop_assert!((0.0..=1.0).contains(&x), "score {} out of range", x);
        }
        let same = evaluate_pair(&gt, &gt, &rays, &th, &t).unwrap().summary(&t);
        prop_assert_eq!((same.miou, same.iou_occ, same.rayiou, same.raypq), (1.0, 1.0, 1.0, 1.0));
        let differs = (0..gt.len()).any(|v| {
            pred.sem[v] != gt.sem[v] && [pred.sem[v], gt.sem[v]].iter().any(|c| t.is_class(*c) && !t.is_eval_excluded(*c))
        });
        if differs {
            prop_assert!(s.miou < 1.0);
        }
    }

    #[test]
    fn metrics_ignore_instance_labels_and_storage_order(pred in grid_strategy(), gt in grid_strategy(), shift in 1u32..500) {
        let t = tax();
        let rays = ray_set();
        let th = [1.0, 2.0, 4.0];
        let base = evaluate_pair(&pred, &gt, &rays, &th, &t).unwrap().summary(&t);

        // Bijective relabeling of thing instance ids.
        let mut relabeled = pred.clone();
        for (s, i) in relabeled.sem.iter().zip(relabeled.inst.iter_mut()) {
            if t.is_thing(*s) && *i != 0 {
                *i += shift;
            }
        }
        let r = evaluate_pair(&relabeled, &gt, &rays, &th, &t).unwrap().summary(&t);
        prop_assert_eq!(&r, &base);

        // Mirror both grids and the rays along x.
        let (mp, mg) = (mirror_x(&pred), mirror_x(&gt));
        let mirrored_rays = RaySet {
            origin: [8.0 - rays.origin[0], rays.origin[1], rays.origin[2]],
            directions: rays.directions.iter().map(|d| [-d[0], d[1], d[2]]).collect(),
        };
        let m = evaluate_pair(&mp, &mg, &mirrored_rays, &th, &t).unwrap().summary(&t);
        prop_assert_eq!(m.per_class_iou, base.per_class_iou);
        prop_assert_eq!(m.iou_occ, base.iou_occ);
        prop_assert!((m.rayiou - base.rayiou).abs() < 1e-12);
        prop_assert!((m.raypq - base.raypq).abs() < 1e-12);
    }
}

fn ray_set() -> RaySet {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let directions = (0..64)
        .map(|_| {
            let v: [f64; 3] = [0; 3].map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0));
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            v.map(|x| x / n)
        })
        .collect();
    RaySet {
        origin: [4.13, 3.87, 4.21],
        directions,
    }
}

fn mirror_x(g: &OccupancyGrid) -> OccupancyGrid {
    let mut out = g.clone();
    let [nx, _, _] = g.dims();
    for v in 0..g.len() {
        let [i, j, k] = g.spec.unlinear(v);
        let u = g.spec.linear([nx - 1 - i, j, k]);
        out.sem[u] = g.sem[v];
        out.inst[u] = g.inst[v];
        out.n[u] = g.n[v];
        out.conf[u] = g.conf[v];
        out.p_occ[u] = g.p_occ[v];
    }
    out
}

#[test]
fn every_prompt_resolves_to_a_class() {
    let t = tax();
    for p in 0..t.rules().len() {
        let c = t
            .rules()
            .resolve_prompt(p)
            .expect("total over the rule set");
        assert!(t.is_class(c));
        assert_eq!(t.rules().resolve_prompt(p), Some(c));
    }
}

/// Clusters of thing points split over two cameras, some offset into overlap.
fn instance_cloud_strategy() -> impl Strategy<Value = Vec<LabeledPoint>> {
    proptest::collection::vec(
        (
            0usize..3,
            -15.0f64..15.0,
            -15.0f64..15.0,
            -3.0f64..3.0,
            20usize..80,
            any::<u64>(),
        ),
        1..6,
    )
    .prop_map(|objs| {
        let t = tax();
        let classes = [
            t.class_by_name("car").unwrap(),
            t.class_by_name("pedestrian").unwrap(),
            t.class_by_name("barrier").unwrap(),
        ];
        let sizes = [[4.4, 1.8, 1.5], [0.6, 0.6, 1.7], [3.0, 0.5, 1.0]];
        let mut points = Vec::new();
        let mut local = 0u16;
        for (kind, x, y, yaw, n, seed) in objs {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = sizes[kind];
            for cam in 0..2u8 {
                local += 1;
                for _ in 0..n {
                    let l = [0, 1, 2].map(|a| rand::Rng::random_range(&mut rng, -0.5..0.5) * s[a]);
                    let (sn, cs) = yaw.sin_cos();
                    let xyz = Vector3::new(
                        x + cs * l[0] - sn * l[1],
                        y + sn * l[0] + cs * l[1],
                        l[2] + s[2] / 2.0,
                    );
                    points.push(LabeledPoint {
                        xyz,
                        sem: classes[kind],
                        inst: pack_instance(0, cam, local),
                        conf: 1.0,
                        t: 0,
                        cam,
                        depth: xyz.norm() as f32,
                    });
                }
            }
        }
        points
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn final_boxes_do_not_overlap_and_ids_are_final(points in instance_cloud_strategy()) {
        let t = tax();
        let params = InstanceParams::default();
        let sizes = SizeTable::resolve(&default_size_intervals(), &t).unwrap();
        let cloud = LabeledPointCloud { points };
        let summary = identify_instances(&cloud, 0, &t, &sizes, &params);
        for (i, a) in summary.boxes.iter().enumerate() {
            for b in &summary.boxes[i + 1..] {
                if a.class_id == b.class_id {
                    prop_assert!(iosv(a, b) < params.tau_ov);
                }
            }
        }
        let ids: BTreeSet<u32> = summary.boxes.iter().map(|b| b.instance_id).collect();
        prop_assert_eq!(ids.len(), summary.boxes.len());
        let (out, _) = reassign_points(&cloud, &summary.boxes, params.d_nn, &t);
        for p in &out.points {
            if t.is_thing(p.sem) {
                prop_assert!(ids.contains(&p.inst), "stale id {}", p.inst);
            } else {
                prop_assert!(p.sem == t.ignore_id() && p.inst == 0);
            }
        }
    }

    #[test]
    fn filtering_never_grows_the_box(
        pts in proptest::collection::vec((-3.0f64..3.0, -1.0f64..1.0, 0.0f64..1.5, 0u8..2), 10..200),
        outliers in proptest::collection::vec((-20.0f64..20.0, -20.0f64..20.0, 0.0f64..3.0), 0..20),
        always in any::<bool>(),
    ) {
        let t = tax();
        let car = t.class_by_name("car").unwrap();
        let sizes = SizeTable::resolve(&default_size_intervals(), &t).unwrap();
        let params = InstanceParams { always_filter: always, ..InstanceParams::default() };
        let cam_pos = Vector3::new(-10.0, 0.0, 1.5);
        let cands: Vec<CandidatePoint> = pts
            .iter()
            .map(|&(x, y, z, cam)| (Vector3::new(x, y, z), cam))
            .chain(outliers.iter().map(|&(x, y, z)| (Vector3::new(x, y, z), 0)))
            .map(|(xyz, cam)| CandidatePoint { xyz, cam, depth: (xyz - cam_pos).norm() })
            .collect();
        let raw = fit_yaw_box(&cands.iter().map(|c| c.xyz).collect::<Vec<_>>());
        if let Ok(r) = refine_candidate(&cands, car, sizes.get(car).unwrap(), &params) {
            prop_assert!(r.bbox.volume() <= raw.volume() + 1e-9);
            let kept: BTreeMap<usize, ()> = r.kept.iter().map(|&k| (k, ())).collect();
            prop_assert_eq!(kept.len(), r.kept.len());
        }
    }
}
