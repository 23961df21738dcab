//! Seeded fixtures shared by the kernel benchmarks.

use occupancy::grid::{GridSpec, OccupancyGrid};
use occupancy::lift::{LabeledPoint, LabeledPointCloud};
use occupancy::nalgebra::Vector3;
use occupancy::taxonomy::Taxonomy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` points on a ground plane plus a few upright slabs, labeled like a street scene.
pub fn street_cloud(n: usize, seed: u64) -> LabeledPointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            let (x, y): (f64, f64) = (rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0));
            let (xyz, sem, inst) = match rng.random_range(0..10) {
                0..=5 => (
                    Vector3::new(x, y, -0.8),
                    if y.abs() < 6.0 { 11 } else { 14 },
                    0,
                ),
                6 | 7 => {
                    let car = rng.random_range(0..16u32);
                    let c = Vector3::new(f64::from(car) * 4.5 - 36.0, 3.0, -0.2);
                    let l = Vector3::new(
                        rng.random_range(-2.2..2.2),
                        rng.random_range(-0.9..0.9),
                        rng.random_range(0.0..1.5),
                    );
                    (c + l, 4, 1000 + car)
                }
                _ => (Vector3::new(x, 12.0, rng.random_range(-0.8..6.0)), 15, 0),
            };
            LabeledPoint {
                xyz,
                sem,
                inst,
                conf: 1.0,
                t: 0,
                cam: 0,
                depth: xyz.norm() as f32,
            }
        })
        .collect();
    LabeledPointCloud { points }
}

/// Default-sized grid with a noisy street scene: ground, walls, cars and scattered labels.
pub fn street_grid(taxonomy: &Taxonomy, seed: u64) -> OccupancyGrid {
    let spec = GridSpec::default();
    let mut g = OccupancyGrid::empty(spec, taxonomy.free_id(), taxonomy.num_classes());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [nx, ny, nz] = spec.dims();
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                let v = spec.linear([i, j, k]);
                let sem = if k == 25 {
                    if rng.random_bool(0.05) {
                        taxonomy.free_id()
                    } else if j.abs_diff(100) < 15 {
                        11
                    } else {
                        14
                    }
                } else if k > 25 && k < 40 && j == 130 {
                    15
                } else if k > 25 && k < 30 && j == 110 && i % 12 < 10 {
                    4
                } else if k > 25 && rng.random_bool(0.002) {
                    rng.random_range(1..17)
                } else {
                    continue;
                };
                g.sem[v] = sem;
                g.inst[v] = if taxonomy.is_thing(sem) {
                    1000 + (i / 12) as u32
                } else if taxonomy.is_class(sem) {
                    taxonomy.stuff_instance_id(sem)
                } else {
                    0
                };
                g.n[v] = 1;
                g.conf[v] = rng.random_range(0.1..1.0);
                g.p_occ[v] = rng.random_range(0.1..1.0);
            }
        }
    }
    g
}
