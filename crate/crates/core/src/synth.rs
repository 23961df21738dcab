//! Synthetic urban scenes with exact ground truth.
//!
//! A scene is a ground plane (road, sidewalk and terrain bands along the x
//! axis), axis-aligned or yawed boxes for things, walls and vegetation blobs,
//! observed by a camera rig moving along a trajectory. Views are rendered by
//! casting one ray per pixel against the analytic scene.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`) seeded with
//! `seed_from_u64(seed)`, using separate streams: 0 for the random roster, 1
//! for pose noise and `16 + 64 * t + camera` for the pixel noise of a view.
//! Every pixel draws the same four numbers (dropout, flip, flip class, depth
//! error) whatever the noise levels, so scenes differing only in noise
//! magnitude share their random draws.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridError, GridSpec, OccupancyGrid};
use crate::ingest::{
    write_manifest, write_sample, CameraView, EgoPose, FrameIndex, IngestError, Manifest,
    ManifestCamera, MaskCandidate, SemanticInput, ViewPriors, ViewRecord,
};
use crate::instances::THING_ID_BASE;
use crate::lift::{GeometryMaps, ReliabilityParams};
use crate::raster::Raster;
use crate::taxonomy::{ClassId, Taxonomy, TaxonomyError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scene spec: {0}")]
    Invalid(String),
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("object {index} ({class}) lies outside the scene extents")]
    OutsideExtents { index: usize, class: String },
    #[error("class {0} has no prompt in the rule set")]
    NoPrompt(String),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub class: String,
    /// Box center in the world frame (the ego frame of the first pose).
    pub center: [f64; 3],
    pub size: [f64; 3],
    #[serde(default)]
    pub yaw_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomRoster {
    pub cars: usize,
    pub pedestrians: usize,
    pub traffic_cones: usize,
    pub barriers: usize,
    pub walls: usize,
    pub vegetation: usize,
}

impl Default for RandomRoster {
    fn default() -> Self {
        Self {
            cars: 8,
            pedestrians: 6,
            traffic_cones: 4,
            barriers: 3,
            walls: 6,
            vegetation: 4,
        }
    }
}

impl RandomRoster {
    pub fn none() -> Self {
        Self {
            cars: 0,
            pedestrians: 0,
            traffic_cones: 0,
            barriers: 0,
            walls: 0,
            vegetation: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundSpec {
    /// Height of the ground plane in the world frame.
    pub height: f64,
    /// Road band `|y| <= road_half_width`; sidewalk up to `+ sidewalk_width`; terrain beyond.
    pub road_half_width: f64,
    pub sidewalk_width: f64,
}

impl Default for GroundSpec {
    fn default() -> Self {
        Self {
            height: -0.8,
            road_half_width: 6.0,
            sidewalk_width: 3.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    /// Mount position in the ego frame.
    pub position: [f64; 3],
    pub yaw_deg: f64,
    /// Positive values tilt the optical axis down.
    #[serde(default)]
    pub pitch_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigSpec {
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    /// Ring of `count` cameras at `mount_height`, evenly spaced in yaw,
    /// used when `cameras` is empty.
    pub count: usize,
    pub mount_height: f64,
    pub cameras: Vec<CameraSpec>,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            width: 160,
            height: 96,
            hfov_deg: 70.0,
            count: 6,
            mount_height: 0.7,
            cameras: Vec::new(),
        }
    }
}

impl RigSpec {
    fn resolved(&self) -> Vec<CameraSpec> {
        if !self.cameras.is_empty() {
            return self.cameras.clone();
        }
        (0..self.count)
            .map(|i| CameraSpec {
                position: [0.0, 0.0, self.mount_height],
                yaw_deg: i as f64 * 360.0 / self.count as f64,
                pitch_deg: 0.0,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// Standard deviation of the depth error (meters).
    pub depth_sigma: f64,
    /// Probability that a pixel label is replaced by a random other class.
    pub label_flip: f64,
    /// Probability that a pixel loses its geometry.
    pub dropout: f64,
    /// Standard deviation of the translation error of the stored ego poses (meters).
    pub pose_sigma: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            depth_sigma: 0.0,
            label_flip: 0.0,
            dropout: 0.0,
            pose_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticsMode {
    /// Fused per-view priors (`sem.u16` / `inst.u16`).
    Priors,
    /// Raw overlapping mask candidates per object.
    Candidates,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSpec {
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub z: f64,
    #[serde(default)]
    pub yaw_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    pub grid: GridSpec,
    /// World-frame `[[xmin, xmax], [ymin, ymax]]` that must contain every object.
    pub extents: [[f64; 2]; 2],
    /// Number of frames when `trajectory` is empty; the ego then advances
    /// `ego_step` meters along x per frame.
    pub frames: usize,
    pub ego_step: f64,
    pub trajectory: Vec<PoseSpec>,
    pub ground: GroundSpec,
    pub roster: Vec<ObjectSpec>,
    pub random: RandomRoster,
    pub rig: RigSpec,
    pub noise: NoiseSpec,
    pub semantics: SemanticsMode,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: GridSpec::default(),
            extents: [[-36.0, 36.0], [-36.0, 36.0]],
            frames: 5,
            ego_step: 0.8,
            trajectory: Vec::new(),
            ground: GroundSpec::default(),
            roster: Vec::new(),
            random: RandomRoster::default(),
            rig: RigSpec::default(),
            noise: NoiseSpec::default(),
            semantics: SemanticsMode::Priors,
        }
    }
}

impl SceneSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, SynthError> {
        let spec: Self = toml::from_str(text).map_err(|e| SynthError::Invalid(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let text = fs::read_to_string(path).map_err(|source| SynthError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            SynthError::Invalid(msg) => SynthError::Parse {
                path: path.to_path_buf(),
                msg,
            },
            e => e,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("scene spec serializes")
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Invalid(m.to_string()));
        self.grid.validate()?;
        let n = &self.noise;
        for (name, rate) in [("label_flip", n.label_flip), ("dropout", n.dropout)] {
            if !(0.0..=1.0).contains(&rate) {
                return bad(&format!("noise.{name} must lie in [0, 1]"));
            }
        }
        if !(n.depth_sigma >= 0.0 && n.pose_sigma >= 0.0) {
            return bad("noise sigmas must be non-negative");
        }
        let frames = self.num_frames();
        if frames == 0 || frames > 4096 {
            return bad("frame count must lie in [1, 4096]");
        }
        let cams = self.rig.resolved();
        if cams.is_empty() || cams.len() > 16 {
            return bad("the rig needs between 1 and 16 cameras");
        }
        if self.rig.width == 0 || self.rig.height == 0 || self.rig.width > u16::MAX as usize {
            return bad("camera dims must be positive");
        }
        if !(self.rig.hfov_deg > 0.0 && self.rig.hfov_deg < 180.0) {
            return bad("hfov_deg must lie in (0, 180)");
        }
        for [lo, hi] in self.extents {
            if !(lo < hi) {
                return bad("extents must satisfy min < max");
            }
        }
        if !self.ego_step.is_finite() {
            return bad("ego_step must be finite");
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        if self.trajectory.is_empty() {
            self.frames
        } else {
            self.trajectory.len()
        }
    }
}

/// A resolved scene object.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub class_id: ClassId,
    pub center: Vector3<f64>,
    pub size: Vector3<f64>,
    pub yaw: f64,
    /// Ground-truth instance id: things from [`THING_ID_BASE`], stuff `class + 1`.
    pub instance: u32,
}

impl SceneObject {
    fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        let d = p - self.center;
        Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    fn contains(&self, p: &Vector3<f64>, tol: f64) -> bool {
        let l = self.to_local(p);
        (0..3).all(|a| l[a].abs() <= 0.5 * self.size[a] + tol)
    }

    /// Entry distance of the ray, if it hits the box in front of the origin.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let lo = self.to_local(o);
        let (s, c) = self.yaw.sin_cos();
        let ld = Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z);
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for a in 0..3 {
            let h = 0.5 * self.size[a];
            if ld[a] == 0.0 {
                if lo[a].abs() > h {
                    return None;
                }
            } else {
                let ta = (-h - lo[a]) / ld[a];
                let tb = (h - lo[a]) / ld[a];
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
        }
        (t0 <= t1 && t0 > 0.0).then_some(t0)
    }

    fn corners_xy(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hx, hy) = (0.5 * self.size.x, 0.5 * self.size.y);
        [[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]]
            .map(|[x, y]| [self.center.x + c * x - s * y, self.center.y + s * x + c * y])
    }

    fn aabb(&self) -> [[f64; 2]; 3] {
        let cs = self.corners_xy();
        let fold = |a: usize| {
            cs.iter()
                .fold([f64::INFINITY, f64::NEG_INFINITY], |[lo, hi], p| {
                    [lo.min(p[a]), hi.max(p[a])]
                })
        };
        [
            fold(0),
            fold(1),
            [
                self.center.z - 0.5 * self.size.z,
                self.center.z + 0.5 * self.size.z,
            ],
        ]
    }
}

/// Surface hit of a pixel ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceHit {
    /// Distance along the (unnormalized) ray direction.
    pub t: f64,
    pub class_id: ClassId,
    /// Index into [`Scene::objects`], `None` for the ground.
    pub object: Option<usize>,
}

/// A resolved scene: objects, true and stored poses, rig.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub taxonomy: Taxonomy,
    pub objects: Vec<SceneObject>,
    /// True ego-to-world poses.
    pub poses: Vec<Matrix4<f64>>,
    /// Poses written to the dataset (true poses plus translation noise).
    pub noisy_poses: Vec<Matrix4<f64>>,
    pub cameras: Vec<CameraView>,
    ground: [ClassId; 3],
}

fn pose_matrix(x: f64, y: f64, z: f64, yaw: f64) -> Matrix4<f64> {
    let mut m = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).to_homogeneous();
    m[(0, 3)] = x;
    m[(1, 3)] = y;
    m[(2, 3)] = z;
    m
}

fn camera_view(id: u8, cam: &CameraSpec, rig: &RigSpec) -> CameraView {
    let fx = 0.5 * rig.width as f64 / (0.5 * rig.hfov_deg.to_radians()).tan();
    let intrinsics = Matrix3::new(
        fx,
        0.0,
        0.5 * rig.width as f64,
        0.0,
        fx,
        0.5 * rig.height as f64,
        0.0,
        0.0,
        1.0,
    );
    // Camera axes (right, down, forward) expressed in the ego frame at zero yaw.
    let base = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    let r = Rotation3::from_axis_angle(&Vector3::z_axis(), cam.yaw_deg.to_radians())
        * Rotation3::from_axis_angle(&Vector3::y_axis(), cam.pitch_deg.to_radians());
    let rot = r.matrix() * base;
    let mut cam_to_ego = Matrix4::identity();
    cam_to_ego.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
    for a in 0..3 {
        cam_to_ego[(a, 3)] = cam.position[a];
    }
    CameraView {
        camera_id: id,
        width: rig.width,
        height: rig.height,
        intrinsics,
        cam_to_ego,
    }
}

struct Placer<'a> {
    spec: &'a SceneSpec,
    placed: Vec<[[f64; 2]; 3]>,
}

impl Placer<'_> {
    /// Nearest voxel-center plane of the world lattice along `axis`.
    fn snap(&self, v: f64, axis: usize) -> f64 {
        let o = self.spec.grid.origin()[axis];
        let s = self.spec.grid.voxel_size;
        o + (((v - o) / s - 0.5).round() + 0.5) * s
    }

    fn free(&self, b: &[[f64; 2]; 3], margin: f64) -> bool {
        let [ex, ey] = self.spec.extents;
        let inside = b[0][0] >= ex[0] && b[0][1] <= ex[1] && b[1][0] >= ey[0] && b[1][1] <= ey[1];
        inside
            && self
                .placed
                .iter()
                .all(|p| (0..2).any(|a| b[a][1] + margin <= p[a][0] || p[a][1] + margin <= b[a][0]))
    }

    /// Tries to place an axis-aligned box with its bottom one voxel above the
    /// ground; `size` is in voxel steps and `y_band` bounds `|y|` of the footprint.
    #[allow(clippy::too_many_arguments)]
    fn place(
        &mut self,
        rng: &mut ChaCha8Rng,
        class_id: ClassId,
        steps: [usize; 3],
        y_band: [f64; 2],
        rotate: bool,
    ) -> Option<SceneObject> {
        let s = self.spec.grid.voxel_size;
        let [ex, _] = self.spec.extents;
        let mut size = Vector3::new(
            steps[0] as f64 * s,
            steps[1] as f64 * s,
            steps[2] as f64 * s,
        );
        if rotate && rng.random::<bool>() {
            size = Vector3::new(size.y, size.x, size.z);
        }
        let bottom = self.snap(self.spec.ground.height, 2) + s;
        for _ in 0..200 {
            let x0 = self.snap(rng.random_range(ex[0]..ex[1] - size.x), 0);
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let inner = rng.random_range(y_band[0]..y_band[1].max(y_band[0] + 1e-9));
            let y_near = self.snap(inner, 1);
            let (y0, y1) = if side > 0.0 {
                (y_near, y_near + size.y)
            } else {
                (-y_near - size.y, -y_near)
            };
            let (y0, y1) = (self.snap(y0, 1), self.snap(y1, 1));
            let b = [[x0, x0 + size.x], [y0, y1], [bottom, bottom + size.z]];
            if y1.abs().max(y0.abs()) > y_band[1] + size.y || !self.free(&b, 1.2) {
                continue;
            }
            self.placed.push(b);
            return Some(SceneObject {
                class_id,
                center: Vector3::new(
                    0.5 * (b[0][0] + b[0][1]),
                    0.5 * (y0 + y1),
                    0.5 * (b[2][0] + b[2][1]),
                ),
                size: Vector3::new(size.x, y1 - y0, size.z),
                yaw: 0.0,
                instance: 0,
            });
        }
        None
    }
}

fn random_roster(
    spec: &SceneSpec,
    taxonomy: &Taxonomy,
    fixed: &[SceneObject],
) -> Result<Vec<SceneObject>, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);
    let mut placer = Placer {
        spec,
        placed: fixed.iter().map(|o| o.aabb()).collect(),
    };
    let g = spec.ground;
    let road = g.road_half_width;
    let walk = road + g.sidewalk_width;
    let r = spec.random;
    let mut out = Vec::new();
    let class = |name: &str| taxonomy.class_by_name(name);
    let mut add = |o: Option<SceneObject>| out.extend(o);
    for _ in 0..r.cars {
        let steps = [
            rng.random_range(9..=11),
            rng.random_range(4..=5),
            rng.random_range(3..=4),
        ];
        let o = placer.place(&mut rng, class("car")?, steps, [2.0, road - 2.0], false);
        add(o);
    }
    for _ in 0..r.pedestrians {
        let o = placer.place(
            &mut rng,
            class("pedestrian")?,
            [1, 1, 4],
            [road + 0.4, walk - 0.8],
            false,
        );
        add(o);
    }
    for _ in 0..r.traffic_cones {
        let o = placer.place(
            &mut rng,
            class("traffic_cone")?,
            [1, 1, 2],
            [road - 1.2, road - 0.4],
            false,
        );
        add(o);
    }
    for _ in 0..r.barriers {
        let steps = [rng.random_range(5..=10), 1, 2];
        let o = placer.place(
            &mut rng,
            class("barrier")?,
            steps,
            [road - 0.8, road - 0.4],
            false,
        );
        add(o);
    }
    for _ in 0..r.walls {
        let steps = [rng.random_range(10..=25), 2, rng.random_range(6..=12)];
        let o = placer.place(
            &mut rng,
            class("manmade")?,
            steps,
            [walk + 1.2, walk + 8.0],
            false,
        );
        add(o);
    }
    for _ in 0..r.vegetation {
        let steps = [
            rng.random_range(4..=8),
            rng.random_range(4..=8),
            rng.random_range(4..=8),
        ];
        let o = placer.place(
            &mut rng,
            class("vegetation")?,
            steps,
            [walk + 1.2, walk + 10.0],
            true,
        );
        add(o);
    }
    Ok(out)
}

impl Scene {
    /// Resolves the roster, trajectory, noise draws and rig of `spec`.
    pub fn generate(spec: &SceneSpec, taxonomy: &Taxonomy) -> Result<Self, SynthError> {
        spec.validate()?;
        let mut objects = Vec::new();
        for (index, o) in spec.roster.iter().enumerate() {
            let class_id = taxonomy.class_by_name(&o.class)?;
            if !o.size.iter().all(|v| *v > 0.0) {
                return Err(SynthError::Invalid(format!(
                    "object {index} needs a positive size"
                )));
            }
            let obj = SceneObject {
                class_id,
                center: Vector3::from(o.center),
                size: Vector3::from(o.size),
                yaw: o.yaw_deg.to_radians(),
                instance: 0,
            };
            let [ex, ey] = spec.extents;
            let inside = obj
                .corners_xy()
                .iter()
                .all(|p| (ex[0]..=ex[1]).contains(&p[0]) && (ey[0]..=ey[1]).contains(&p[1]));
            if !inside {
                return Err(SynthError::OutsideExtents {
                    index,
                    class: o.class.clone(),
                });
            }
            objects.push(obj);
        }
        let extra = random_roster(spec, taxonomy, &objects)?;
        objects.extend(extra);
        let mut next_thing = THING_ID_BASE;
        for o in &mut objects {
            o.instance = if taxonomy.is_thing(o.class_id) {
                next_thing += 1;
                next_thing - 1
            } else {
                taxonomy.stuff_instance_id(o.class_id)
            };
        }

        let poses: Vec<Matrix4<f64>> = if spec.trajectory.is_empty() {
            (0..spec.frames)
                .map(|t| pose_matrix(t as f64 * spec.ego_step, 0.0, 0.0, 0.0))
                .collect()
        } else {
            spec.trajectory
                .iter()
                .map(|p| pose_matrix(p.x, p.y, p.z, p.yaw_deg.to_radians()))
                .collect()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(1);
        let noisy_poses = poses
            .iter()
            .map(|p| {
                let mut q = *p;
                for a in 0..3 {
                    let z: f64 = rng.sample(StandardNormal);
                    q[(a, 3)] += spec.noise.pose_sigma * z;
                }
                q
            })
            .collect();
        let cameras: Vec<CameraView> = spec
            .rig
            .resolved()
            .iter()
            .enumerate()
            .map(|(i, c)| camera_view(i as u8, c, &spec.rig))
            .collect();

        for (t, pose) in poses.iter().enumerate() {
            for cam in &cameras {
                let m = pose * cam.cam_to_ego;
                let c = Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
                if let Some(i) = objects.iter().position(|o| o.contains(&c, 0.0)) {
                    return Err(SynthError::Invalid(format!(
                        "camera {} at frame {t} lies inside object {i}",
                        cam.camera_id
                    )));
                }
            }
        }

        Ok(Self {
            spec: spec.clone(),
            taxonomy: taxonomy.clone(),
            objects,
            poses,
            noisy_poses,
            cameras,
            ground: [
                taxonomy.class_by_name("driveable_surface")?,
                taxonomy.class_by_name("sidewalk")?,
                taxonomy.class_by_name("terrain")?,
            ],
        })
    }

    pub fn num_frames(&self) -> usize {
        self.poses.len()
    }

    fn ground_class(&self, y: f64) -> ClassId {
        let g = &self.spec.ground;
        if y.abs() <= g.road_half_width {
            self.ground[0]
        } else if y.abs() <= g.road_half_width + g.sidewalk_width {
            self.ground[1]
        } else {
            self.ground[2]
        }
    }

    /// Nearest surface along `o + t d`, `t > 0`.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<SurfaceHit> {
        let mut best: Option<SurfaceHit> = None;
        for (i, obj) in self.objects.iter().enumerate() {
            if let Some(t) = obj.intersect(o, d) {
                if best.is_none_or(|b| t < b.t) {
                    best = Some(SurfaceHit {
                        t,
                        class_id: obj.class_id,
                        object: Some(i),
                    });
                }
            }
        }
        if d.z != 0.0 {
            let t = (self.spec.ground.height - o.z) / d.z;
            if t > 0.0 && best.is_none_or(|b| t < b.t) {
                let y = o.y + t * d.y;
                best = Some(SurfaceHit {
                    t,
                    class_id: self.ground_class(y),
                    object: None,
                });
            }
        }
        best
    }

    /// Ground-truth grid in the ego frame of frame `t`.
    ///
    /// A voxel takes the first object containing its center; otherwise it is
    /// ground when the ground plane crosses its vertical extent.
    pub fn gt_grid(&self, t: usize) -> OccupancyGrid {
        let spec = self.spec.grid;
        let tax = &self.taxonomy;
        let mut grid = OccupancyGrid::empty(spec, tax.free_id(), tax.num_classes());
        let pose = self.poses[t];
        let s = spec.voxel_size;
        let gz = self.spec.ground.height;
        let labels: Vec<Option<(ClassId, u32)>> = (0..spec.len())
            .into_par_iter()
            .map(|lin| {
                let c = spec.voxel_center(spec.unlinear(lin));
                let w = (pose * Vector3::from(c).push(1.0)).xyz();
                if let Some(o) = self.objects.iter().find(|o| o.contains(&w, 1e-6)) {
                    return Some((o.class_id, o.instance));
                }
                if gz >= w.z - 0.5 * s && gz < w.z + 0.5 * s {
                    let class = self.ground_class(w.y);
                    return Some((class, tax.stuff_instance_id(class)));
                }
                None
            })
            .collect();
        for (lin, l) in labels.into_iter().enumerate() {
            if let Some((c, i)) = l {
                grid.sem[lin] = c;
                grid.inst[lin] = i;
                grid.p_occ[lin] = 1.0;
            }
            grid.conf[lin] = 1.0;
        }
        grid
    }

    fn pixel_ray(
        &self,
        t: usize,
        cam: &CameraView,
        u: usize,
        v: usize,
    ) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let k = &cam.intrinsics;
        let dc = Vector3::new(
            (u as f64 + 0.5 - k[(0, 2)]) / k[(0, 0)],
            (v as f64 + 0.5 - k[(1, 2)]) / k[(1, 1)],
            1.0,
        );
        let m = self.poses[t] * cam.cam_to_ego;
        let r = m.fixed_view::<3, 3>(0, 0);
        let o = Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
        (o, r * dc, dc)
    }

    /// Noiseless surface hits of every pixel of a view, row-major.
    pub fn trace_view(&self, t: usize, camera: usize) -> Vec<Option<SurfaceHit>> {
        let cam = &self.cameras[camera];
        (0..cam.width * cam.height)
            .map(|p| {
                let (o, d, _) = self.pixel_ray(t, cam, p % cam.width, p / cam.width);
                self.intersect(&o, &d)
            })
            .collect()
    }

    /// Renders one view with the configured noise.
    pub fn render_view(&self, t: usize, camera: usize) -> Result<RenderedView, SynthError> {
        let tax = &self.taxonomy;
        let cam = &self.cameras[camera];
        let (w, h) = (cam.width, cam.height);
        let noise = self.spec.noise;
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(16 + 64 * t as u64 + camera as u64);
        let classes: Vec<ClassId> = tax.classes().iter().map(|c| c.id).collect();

        let mut points = Raster::filled(w, h, 3, f32::NAN);
        let mut depth = Raster::filled(w, h, 1, f32::NAN);
        let mut confidence = Raster::filled(w, h, 1, 1e-3f32);
        let mut sem = Raster::filled(w, h, 1, tax.ignore_id());
        let mut inst: Raster<u16> = Raster::new(w, h, 1);
        let truth = self.trace_view(t, camera);
        for (p, hit) in truth.iter().enumerate() {
            let u_drop: f64 = rng.random();
            let u_flip: f64 = rng.random();
            let flip_pick = rng.random_range(0..classes.len().max(2) - 1);
            let z: f64 = rng.sample(StandardNormal);
            let Some(hit) = hit else { continue };

            let mut label = hit.class_id;
            let mut local = match hit.object {
                Some(i) if tax.is_thing(label) => (i + 1) as u16,
                _ => 0,
            };
            if u_flip < noise.label_flip {
                let others: Vec<ClassId> =
                    classes.iter().copied().filter(|&c| c != label).collect();
                if !others.is_empty() {
                    label = others[flip_pick % others.len()];
                    local = 0;
                }
            }
            sem.data_mut()[p] = label;
            inst.data_mut()[p] = local;

            if u_drop < noise.dropout {
                continue;
            }
            let (_, _, dc) = self.pixel_ray(t, cam, p % w, p / w);
            let err = noise.depth_sigma * z;
            let d = hit.t + err;
            let q = dc * d;
            points
                .pixel_mut(p)
                .copy_from_slice(&[q.x as f32, q.y as f32, q.z as f32]);
            depth.data_mut()[p] = d as f32;
            confidence.data_mut()[p] = if noise.depth_sigma > 0.0 {
                10f64.powf(1.0 - 0.5 * z.abs()) as f32
            } else {
                10.0
            };
        }

        let candidates = match self.spec.semantics {
            SemanticsMode::Priors => None,
            SemanticsMode::Candidates => Some(build_candidates(&sem, &inst, tax)?),
        };
        Ok(RenderedView {
            camera: cam.clone(),
            geometry: GeometryMaps {
                points,
                depth,
                confidence,
            },
            priors: ViewPriors {
                score: Raster::filled(w, h, 1, 1.0),
                sem,
                inst,
            },
            candidates,
            truth,
        })
    }

    /// Renders every view of frame `t`, in camera order.
    pub fn render_views(&self, t: usize) -> Result<Vec<RenderedView>, SynthError> {
        (0..self.cameras.len())
            .into_par_iter()
            .map(|c| self.render_view(t, c))
            .collect()
    }

    /// Voxels (in the ego frame of `t`) containing a noiseless surface point
    /// seen from any frame of `window` at a depth passing the reliability
    /// filter.
    pub fn observed_mask(
        &self,
        t: usize,
        window: &[usize],
        reliability: &ReliabilityParams,
    ) -> Vec<bool> {
        let spec = self.spec.grid;
        let to_ego = crate::ingest::rigid_inverse(&self.poses[t]);
        let mut mask = vec![false; spec.len()];
        for &f in window {
            for c in 0..self.cameras.len() {
                let cam = &self.cameras[c];
                let hits = self.trace_view(f, c);
                for (p, hit) in hits.iter().enumerate() {
                    let Some(hit) = hit else { continue };
                    if !(reliability.d_min <= hit.t && hit.t <= reliability.d_max) {
                        continue;
                    }
                    let (o, d, _) = self.pixel_ray(f, cam, p % cam.width, p / cam.width);
                    let w = o + d * hit.t;
                    let e = crate::ingest::transform_point(&to_ego, &w);
                    if let Some(v) = spec.voxel_index([e.x, e.y, e.z]) {
                        mask[spec.linear(v)] = true;
                    }
                }
            }
        }
        mask
    }

    /// Ego poses as stored in the dataset.
    pub fn stored_pose(&self, t: usize) -> EgoPose {
        EgoPose {
            t: t as FrameIndex,
            ego_to_world: self.noisy_poses[t],
        }
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            samples: (0..self.num_frames() as FrameIndex).collect(),
            cameras: self
                .cameras
                .iter()
                .map(|c| ManifestCamera {
                    id: c.camera_id,
                    width: c.width,
                    height: c.height,
                })
                .collect(),
        }
    }
}

/// One rendered view.
#[derive(Debug, Clone)]
pub struct RenderedView {
    pub camera: CameraView,
    pub geometry: GeometryMaps,
    /// Noisy labels with per-view instance ids (roster index + 1 for things).
    pub priors: ViewPriors,
    /// Raw candidates, in candidate mode.
    pub candidates: Option<Vec<MaskCandidate>>,
    /// Noiseless hits.
    pub truth: Vec<Option<SurfaceHit>>,
}

impl RenderedView {
    pub fn record(&self) -> ViewRecord {
        ViewRecord {
            camera: self.camera.clone(),
            semantics: match &self.candidates {
                Some(c) => SemanticInput::Candidates(c.clone()),
                None => SemanticInput::Priors(self.priors.clone()),
            },
            geometry: self.geometry.clone(),
        }
    }
}

/// Two candidates per thing (the full mask at score 0.9 and its left half at
/// 0.5) and one per stuff region (score 0.8). Masks of different groups are
/// disjoint, so fusion reproduces the label raster.
fn build_candidates(
    sem: &Raster<ClassId>,
    inst: &Raster<u16>,
    taxonomy: &Taxonomy,
) -> Result<Vec<MaskCandidate>, SynthError> {
    let (w, h) = (sem.width(), sem.height());
    let mut groups: BTreeMap<(ClassId, u16), Vec<usize>> = BTreeMap::new();
    for p in 0..w * h {
        let s = sem.data()[p];
        if taxonomy.is_class(s) {
            groups.entry((s, inst.data()[p])).or_default().push(p);
        }
    }
    let mut out = Vec::new();
    for ((class, _), pixels) in groups {
        let prompt_id = taxonomy
            .rules()
            .prompt_for_class(class)
            .ok_or_else(|| SynthError::NoPrompt(taxonomy.class_name(class).to_string()))?;
        let mut full = Raster::new(w, h, 1);
        for &p in &pixels {
            full.data_mut()[p] = 1u8;
        }
        let thing = taxonomy.is_thing(class);
        out.push(MaskCandidate {
            prompt_id,
            candidate_id: out.len() as u32,
            score: if thing { 0.9 } else { 0.8 },
            mask: full,
        });
        if thing {
            let mut cols: Vec<usize> = pixels.iter().map(|p| p % w).collect();
            cols.sort_unstable();
            let mid = cols[cols.len() / 2];
            let mut part = Raster::new(w, h, 1);
            for &p in pixels.iter().filter(|&&p| p % w <= mid) {
                part.data_mut()[p] = 1u8;
            }
            out.push(MaskCandidate {
                prompt_id,
                candidate_id: out.len() as u32,
                score: 0.5,
                mask: part,
            });
        }
    }
    Ok(out)
}

/// Ground-truth grids for every frame of a generated scene.
pub fn generate_scene(
    spec: &SceneSpec,
    taxonomy: &Taxonomy,
) -> Result<(Scene, Vec<OccupancyGrid>), SynthError> {
    let scene = Scene::generate(spec, taxonomy)?;
    let grids = (0..scene.num_frames()).map(|t| scene.gt_grid(t)).collect();
    Ok((scene, grids))
}

/// Writes the dataset (manifest and samples), ground-truth grids under
/// `gt/<t>.grid` and causal observation masks under `gt/<t>.mask` (one byte
/// per voxel).
pub fn write_dataset(scene: &Scene, root: &Path) -> Result<(), SynthError> {
    write_manifest(root, &scene.manifest())?;
    let gt_dir = root.join("gt");
    fs::create_dir_all(&gt_dir).map_err(|source| SynthError::Io {
        path: gt_dir.clone(),
        source,
    })?;
    let reliability = ReliabilityParams::default();
    for t in 0..scene.num_frames() {
        let views = scene.render_views(t)?;
        let records: Vec<ViewRecord> = views.iter().map(RenderedView::record).collect();
        write_sample(root, t as FrameIndex, &scene.stored_pose(t), &records)?;
        scene.gt_grid(t).write(&gt_dir.join(format!("{t}.grid")))?;
        let window: Vec<usize> = (0..=t).collect();
        let mask: Vec<u8> = scene
            .observed_mask(t, &window, &reliability)
            .into_iter()
            .map(u8::from)
            .collect();
        let path = gt_dir.join(format!("{t}.mask"));
        fs::write(&path, mask).map_err(|source| SynthError::Io { path, source })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_spec() -> SceneSpec {
        SceneSpec {
            random: RandomRoster::none(),
            frames: 1,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn empty_roster_is_ground_only() {
        let t = Taxonomy::occ3d_nuscenes();
        let (_, grids) = generate_scene(&empty_spec(), &t).unwrap();
        let g = &grids[0];
        let [nx, ny, _] = g.dims();
        let occupied: Vec<usize> = (0..g.len()).filter(|&v| g.sem[v] != t.free_id()).collect();
        assert_eq!(occupied.len(), nx * ny);
        assert!(occupied.iter().all(|&v| g.spec.unlinear(v)[2] == 25));
        let road = (0..g.len()).filter(|&v| g.sem[v] == 11).count();
        assert_eq!(road, nx * 30);
    }

    #[test]
    fn car_voxel_count() {
        let t = Taxonomy::occ3d_nuscenes();
        let mut spec = empty_spec();
        // Faces on voxel-center planes: 4.0 x 2.0 x 1.6 m spans 11 x 6 x 5 voxel centers.
        spec.roster.push(ObjectSpec {
            class: "car".into(),
            center: [10.2, 4.0, 0.4],
            size: [4.0, 2.0, 1.6],
            yaw_deg: 0.0,
        });
        let (_, grids) = generate_scene(&spec, &t).unwrap();
        let cars = grids[0].sem.iter().filter(|&&s| s == 4).count();
        assert_eq!(cars, 11 * 6 * 5);
        // Within one voxel shell of the analytic volume.
        let s = 0.4f64;
        let inner = ((4.0 - s) * (2.0 - s) * (1.6 - s) / s.powi(3)) as usize;
        let outer =
            ((4.0 + 2.0 * s) * (2.0 + 2.0 * s) * (1.6 + 2.0 * s) / s.powi(3)).ceil() as usize;
        assert!(inner <= cars && cars <= outer);
        assert!(grids[0].inst.contains(&THING_ID_BASE));
    }

    #[test]
    fn roster_outside_extents_is_an_error() {
        let t = Taxonomy::occ3d_nuscenes();
        let mut spec = empty_spec();
        spec.roster.push(ObjectSpec {
            class: "car".into(),
            center: [35.0, 0.0, 0.0],
            size: [4.0, 2.0, 1.6],
            yaw_deg: 0.0,
        });
        assert!(matches!(
            Scene::generate(&spec, &t).unwrap_err(),
            SynthError::OutsideExtents { index: 0, .. }
        ));
    }

    #[test]
    fn same_seed_same_scene() {
        let t = Taxonomy::occ3d_nuscenes();
        let spec = SceneSpec {
            frames: 1,
            ..SceneSpec::default()
        };
        let (a, ga) = generate_scene(&spec, &t).unwrap();
        let (b, gb) = generate_scene(&spec, &t).unwrap();
        assert_eq!(a.objects, b.objects);
        assert_eq!(ga, gb);
        assert!(a.objects.len() >= 20);
    }

    #[test]
    fn zero_noise_points_lie_on_surfaces() {
        let t = Taxonomy::occ3d_nuscenes();
        let spec = SceneSpec {
            frames: 1,
            rig: RigSpec {
                width: 48,
                height: 32,
                ..RigSpec::default()
            },
            ..SceneSpec::default()
        };
        let scene = Scene::generate(&spec, &t).unwrap();
        for v in scene.render_views(0).unwrap() {
            assert_eq!(v.geometry.inconsistent_depth_pixels(), 0);
            let m = scene.poses[0] * v.camera.cam_to_ego;
            for (p, hit) in v.truth.iter().enumerate() {
                let Some(hit) = hit else {
                    assert_eq!(v.priors.sem.data()[p], t.ignore_id());
                    continue;
                };
                assert_eq!(v.priors.sem.data()[p], hit.class_id);
                let q = v.geometry.points.pixel(p);
                let w = crate::ingest::transform_point(
                    &m,
                    &Vector3::new(f64::from(q[0]), f64::from(q[1]), f64::from(q[2])),
                );
                let dist = match hit.object {
                    None => (w.z - spec.ground.height).abs(),
                    Some(i) => {
                        let o = &scene.objects[i];
                        let l = o.to_local(&w);
                        (0..3)
                            .map(|a| (l[a].abs() - 0.5 * o.size[a]).abs())
                            .fold(f64::INFINITY, f64::min)
                    }
                };
                assert!(dist < 1e-4, "pixel {p}: {dist}");
            }
        }
    }

    #[test]
    fn dropout_pixels_are_filtered() {
        let t = Taxonomy::occ3d_nuscenes();
        let spec = SceneSpec {
            frames: 1,
            noise: NoiseSpec {
                dropout: 1.0,
                ..NoiseSpec::default()
            },
            rig: RigSpec {
                width: 16,
                height: 8,
                ..RigSpec::default()
            },
            ..SceneSpec::default()
        };
        let scene = Scene::generate(&spec, &t).unwrap();
        let v = scene.render_view(0, 0).unwrap();
        let omega = crate::lift::reliability_filter(
            &v.geometry.depth,
            &crate::lift::stabilize_raster(&v.geometry.confidence),
            &ReliabilityParams::default(),
        );
        assert!(v.geometry.depth.data().iter().all(|d| d.is_nan()));
        assert!(omega.iter().all(|k| !k));
    }

    #[test]
    fn confidence_falls_with_depth_error() {
        let t = Taxonomy::occ3d_nuscenes();
        let spec = SceneSpec {
            frames: 1,
            noise: NoiseSpec {
                depth_sigma: 0.1,
                ..NoiseSpec::default()
            },
            rig: RigSpec {
                width: 64,
                height: 32,
                ..RigSpec::default()
            },
            ..SceneSpec::default()
        };
        let scene = Scene::generate(&spec, &t).unwrap();
        let v = scene.render_view(0, 0).unwrap();
        let (mut errs, mut confs) = (Vec::new(), Vec::new());
        for (p, hit) in v.truth.iter().enumerate() {
            if let Some(hit) = hit {
                errs.push((f64::from(v.geometry.depth.data()[p]) - hit.t).abs());
                confs.push(crate::lift::stabilize_confidence(f64::from(
                    v.geometry.confidence.data()[p],
                )));
            }
        }
        let n = errs.len() as f64;
        let (me, mc) = (errs.iter().sum::<f64>() / n, confs.iter().sum::<f64>() / n);
        let cov: f64 = errs
            .iter()
            .zip(&confs)
            .map(|(e, c)| (e - me) * (c - mc))
            .sum();
        assert!(cov < 0.0);
    }

    #[test]
    fn candidates_fuse_back_to_labels() {
        let t = Taxonomy::occ3d_nuscenes();
        let spec = SceneSpec {
            frames: 1,
            semantics: SemanticsMode::Candidates,
            rig: RigSpec {
                width: 64,
                height: 32,
                ..RigSpec::default()
            },
            ..SceneSpec::default()
        };
        let scene = Scene::generate(&spec, &t).unwrap();
        for v in scene.render_views(0).unwrap() {
            let cands = v.candidates.as_ref().unwrap();
            let fused = crate::ingest::fuse_masks(64, 32, cands, &t).unwrap();
            assert_eq!(fused.sem, v.priors.sem);
        }
    }

    #[test]
    fn spec_round_trip_and_validation() {
        let spec = SceneSpec::default();
        let back = SceneSpec::from_toml_str(&spec.to_toml_string()).unwrap();
        assert_eq!(back, spec);
        assert!(SceneSpec::from_toml_str("[noise]\ndropout = 1.5\n").is_err());
        assert!(SceneSpec::from_toml_str("unknown = 1\n").is_err());
    }
}
