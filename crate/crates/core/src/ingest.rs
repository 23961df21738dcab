//! On-disk sample format, camera/pose types and mask-candidate fusion.
//!
//! Layout of a dataset root:
//!
//! ```text
//! <root>/manifest                 TOML: samples, cameras (id, width, height)
//! <root>/<t>/ego.txt              16 floats, ego-to-world, row-major
//! <root>/<t>/<cam>/camera.txt     9 floats K, then 16 floats camera-to-ego
//! <root>/<t>/<cam>/depth.f32      H×W   f32 LE, meters
//! <root>/<t>/<cam>/conf.f32       H×W   f32 LE, raw confidence
//! <root>/<t>/<cam>/points.f32     H×W×3 f32 LE, camera frame, meters
//! <root>/<t>/<cam>/sem.u16        H×W   u16 LE (fused priors, optional)
//! <root>/<t>/<cam>/inst.u16       H×W   u16 LE, per-view instance ids, 0 = none
//! <root>/<t>/<cam>/candidates/<n>/mask.u8  H×W u8, nonzero = covered
//! <root>/<t>/<cam>/candidates/<n>/meta.txt prompt_id, candidate_id, score
//! ```
//!
//! A view carries either fused priors (`sem.u16` + `inst.u16`) or raw
//! candidates; raw candidates are fused on load.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lift::GeometryMaps;
use crate::raster::{decode_slice, LeScalar, Raster};
use crate::taxonomy::{ClassId, Taxonomy, Winner};

pub type FrameIndex = u16;
pub type CameraId = u8;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: expected {expected} bytes, found {found}")]
    Size {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("dimension mismatch between {a} and {b}")]
    DimMismatch { a: PathBuf, b: PathBuf },
    #[error("{path}: malformed: {msg}")]
    Malformed { path: PathBuf, msg: String },
    #[error("invalid camera or pose: {0}")]
    InvalidPose(String),
    #[error("invalid mask candidate: {0}")]
    Candidate(String),
    #[error("frame {0} is not listed in the manifest")]
    UnknownFrame(FrameIndex),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn check_rotation(m: &Matrix4<f64>, what: &str) -> Result<(), IngestError> {
    let bottom = m.row(3);
    if bottom[0] != 0.0 || bottom[1] != 0.0 || bottom[2] != 0.0 || bottom[3] != 1.0 {
        return Err(IngestError::InvalidPose(format!(
            "{what}: bottom row must be (0,0,0,1)"
        )));
    }
    let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if !(err <= 1e-6) {
        return Err(IngestError::InvalidPose(format!(
            "{what}: rotation block not orthonormal (deviation {err:e})"
        )));
    }
    if r.determinant() <= 0.0 {
        return Err(IngestError::InvalidPose(format!(
            "{what}: rotation is a reflection"
        )));
    }
    Ok(())
}

/// Rigid transform applied to a point.
pub fn transform_point(m: &Matrix4<f64>, p: &Vector3<f64>) -> Vector3<f64> {
    m.fixed_view::<3, 3>(0, 0) * p + m.fixed_view::<3, 1>(0, 3)
}

/// Inverse of a rigid transform (rotation + translation).
pub fn rigid_inverse(m: &Matrix4<f64>) -> Matrix4<f64> {
    let rt = m.fixed_view::<3, 3>(0, 0).transpose();
    let t = -(rt * m.fixed_view::<3, 1>(0, 3));
    let mut out = Matrix4::identity();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
    out.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    out
}

/// One camera: pixel dims, intrinsics and camera-to-ego extrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub camera_id: CameraId,
    pub width: usize,
    pub height: usize,
    pub intrinsics: Matrix3<f64>,
    pub cam_to_ego: Matrix4<f64>,
}

impl CameraView {
    pub fn validate(&self) -> Result<(), IngestError> {
        let k = &self.intrinsics;
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(IngestError::InvalidPose(format!(
                "camera {}: focal lengths must be positive",
                self.camera_id
            )));
        }
        check_rotation(&self.cam_to_ego, &format!("camera {}", self.camera_id))
    }
}

/// Ego-to-world transform at frame `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoPose {
    pub t: FrameIndex,
    pub ego_to_world: Matrix4<f64>,
}

impl EgoPose {
    pub fn identity(t: FrameIndex) -> Self {
        Self {
            t,
            ego_to_world: Matrix4::identity(),
        }
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        check_rotation(&self.ego_to_world, &format!("ego pose {}", self.t))
    }
}

/// A binary mask proposed for one prompt, with its score.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskCandidate {
    pub prompt_id: usize,
    pub candidate_id: u32,
    pub score: f64,
    pub mask: Raster<u8>,
}

/// Per-view semantic and instance priors.
///
/// `inst` holds per-view instance ids (0 = none); they are namespaced into
/// sample-wide ids with [`pack_instance`] when pixels are lifted.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPriors {
    pub sem: Raster<ClassId>,
    pub inst: Raster<u16>,
    pub score: Raster<f32>,
}

impl ViewPriors {
    pub fn ignore(width: usize, height: usize, taxonomy: &Taxonomy) -> Self {
        Self {
            sem: Raster::filled(width, height, 1, taxonomy.ignore_id()),
            inst: Raster::new(width, height, 1),
            score: Raster::new(width, height, 1),
        }
    }
}

const FRAME_BITS: u32 = 12;
const CAMERA_BITS: u32 = 4;
const LOCAL_BITS: u32 = 16;

/// Packs (frame, camera, per-view id) into one sample-wide instance id.
///
/// Injective for `t < 4096`, `camera < 16`; a zero local id stays zero.
pub fn pack_instance(t: FrameIndex, camera: CameraId, local: u16) -> u32 {
    if local == 0 {
        return 0;
    }
    debug_assert!(u32::from(t) < (1 << FRAME_BITS) && u32::from(camera) < (1 << CAMERA_BITS));
    (u32::from(t) << (CAMERA_BITS + LOCAL_BITS))
        | (u32::from(camera) << LOCAL_BITS)
        | u32::from(local)
}

pub fn unpack_instance(id: u32) -> (FrameIndex, CameraId, u16) {
    (
        (id >> (CAMERA_BITS + LOCAL_BITS)) as FrameIndex,
        ((id >> LOCAL_BITS) & ((1 << CAMERA_BITS) - 1)) as CameraId,
        (id & ((1 << LOCAL_BITS) - 1)) as u16,
    )
}

/// Fuses raw candidates into per-view priors.
///
/// Each covered pixel goes to the highest-scoring covering candidate, except
/// that candidates whose prompt is dominated by another covering prompt
/// (declared `over`/`under` precedence) are discarded first. Score ties break
/// by lower prompt id, then lower candidate id. Per-view instance ids are the
/// 1-based rank of the candidate in (prompt id, candidate id) order, so the
/// result does not depend on the input order.
pub fn fuse_masks(
    width: usize,
    height: usize,
    candidates: &[MaskCandidate],
    taxonomy: &Taxonomy,
) -> Result<ViewPriors, IngestError> {
    let rules = taxonomy.rules();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by_key(|&i| (candidates[i].prompt_id, candidates[i].candidate_id));
    for w in order.windows(2) {
        let (a, b) = (&candidates[w[0]], &candidates[w[1]]);
        if (a.prompt_id, a.candidate_id) == (b.prompt_id, b.candidate_id) {
            return Err(IngestError::Candidate(format!(
                "duplicate candidate (prompt {}, id {})",
                a.prompt_id, a.candidate_id
            )));
        }
    }
    if candidates.len() >= u16::MAX as usize {
        return Err(IngestError::Candidate(
            "too many candidates in one view".into(),
        ));
    }
    let mut targets = Vec::with_capacity(order.len());
    for &i in &order {
        let c = &candidates[i];
        if c.mask.width() != width || c.mask.height() != height || c.mask.channels() != 1 {
            return Err(IngestError::Candidate(format!(
                "mask of candidate (prompt {}, id {}) is {}x{}, view is {width}x{height}",
                c.prompt_id,
                c.candidate_id,
                c.mask.width(),
                c.mask.height()
            )));
        }
        if !c.score.is_finite() {
            return Err(IngestError::Candidate(format!(
                "non-finite score for candidate (prompt {}, id {})",
                c.prompt_id, c.candidate_id
            )));
        }
        let target = rules
            .resolve_prompt(c.prompt_id)
            .ok_or_else(|| IngestError::Candidate(format!("unknown prompt id {}", c.prompt_id)))?;
        targets.push(target);
    }

    let mut priors = ViewPriors::ignore(width, height, taxonomy);
    let mut covering: Vec<usize> = Vec::new();
    for p in 0..width * height {
        covering.clear();
        covering.extend((0..order.len()).filter(|&r| candidates[order[r]].mask.data()[p] != 0));
        if covering.is_empty() {
            continue;
        }
        let mut best: Option<usize> = None;
        for &r in &covering {
            let c = &candidates[order[r]];
            let dominated = covering.iter().any(|&o| {
                o != r
                    && rules.precedence_wins(candidates[order[o]].prompt_id, c.prompt_id)
                        == Winner::A
            });
            if dominated {
                continue;
            }
            // Ranks are in (prompt, candidate) order, so strict > keeps the lower rank on ties.
            if best.is_none_or(|b| c.score > candidates[order[b]].score) {
                best = Some(r);
            }
        }
        // Acyclic precedence always leaves at least one undominated candidate.
        let r = best.expect("precedence is acyclic");
        priors.sem.data_mut()[p] = targets[r];
        priors.inst.data_mut()[p] = (r + 1) as u16;
        priors.score.data_mut()[p] = candidates[order[r]].score as f32;
    }
    Ok(priors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestCamera {
    pub id: CameraId,
    pub width: usize,
    pub height: usize,
}

/// Dataset manifest: frame indices and camera dims.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub samples: Vec<FrameIndex>,
    pub cameras: Vec<ManifestCamera>,
}

/// Semantic content written for a view.
#[derive(Debug, Clone, PartialEq)]
pub enum SemanticInput {
    Priors(ViewPriors),
    Candidates(Vec<MaskCandidate>),
}

/// One view of a sample as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewRecord {
    pub camera: CameraView,
    pub semantics: SemanticInput,
    pub geometry: GeometryMaps,
}

/// A loaded view: camera, fused priors, geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedView {
    pub camera: CameraView,
    pub priors: ViewPriors,
    pub geometry: GeometryMaps,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: FrameIndex,
    pub ego: EgoPose,
    pub views: Vec<LoadedView>,
}

fn format_floats(values: impl IntoIterator<Item = f64>, per_line: usize) -> String {
    let v: Vec<String> = values.into_iter().map(|x| format!("{x:?}")).collect();
    v.chunks(per_line)
        .map(|c| c.join(" "))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}

fn parse_floats(path: &Path, expected: usize) -> Result<Vec<f64>, IngestError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let values: Result<Vec<f64>, _> = text.split_whitespace().map(str::parse::<f64>).collect();
    let values = values.map_err(|e| IngestError::Malformed {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if values.len() != expected {
        return Err(IngestError::Malformed {
            path: path.to_path_buf(),
            msg: format!("expected {expected} numbers, found {}", values.len()),
        });
    }
    Ok(values)
}

fn mat4_row_major(v: &[f64]) -> Matrix4<f64> {
    Matrix4::from_row_slice(v)
}

fn mat_rows<const R: usize, const C: usize>(
    m: &nalgebra::SMatrix<f64, R, C>,
) -> impl Iterator<Item = f64> + '_ {
    (0..R).flat_map(move |r| (0..C).map(move |c| m[(r, c)]))
}

fn read_raster<T: LeScalar>(
    path: &Path,
    width: usize,
    height: usize,
    channels: usize,
) -> Result<Raster<T>, IngestError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let expected = width * height * channels * T::SIZE;
    if bytes.len() != expected {
        return Err(IngestError::Size {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let data = decode_slice(&bytes).expect("length checked");
    Ok(Raster::from_vec(width, height, channels, data).expect("length checked"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IngestError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn frame_dir(root: &Path, t: FrameIndex) -> PathBuf {
    root.join(t.to_string())
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct CandidateMeta {
    prompt_id: usize,
    candidate_id: u32,
    score: f64,
}

/// Writes the manifest file at `<root>/manifest`.
pub fn write_manifest(root: &Path, manifest: &Manifest) -> Result<(), IngestError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    let path = root.join("manifest");
    let text = toml::to_string_pretty(manifest).expect("manifest serializes");
    write_file(&path, text.as_bytes())
}

/// Writes one sample in the on-disk layout.
pub fn write_sample(
    root: &Path,
    t: FrameIndex,
    ego: &EgoPose,
    views: &[ViewRecord],
) -> Result<(), IngestError> {
    let dir = frame_dir(root, t);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_file(
        &dir.join("ego.txt"),
        format_floats(mat_rows(&ego.ego_to_world), 4).as_bytes(),
    )?;
    for v in views {
        let cdir = dir.join(v.camera.camera_id.to_string());
        fs::create_dir_all(&cdir).map_err(io_err(&cdir))?;
        let cam_text = format_floats(mat_rows(&v.camera.intrinsics), 3)
            + &format_floats(mat_rows(&v.camera.cam_to_ego), 4);
        write_file(&cdir.join("camera.txt"), cam_text.as_bytes())?;
        write_file(&cdir.join("depth.f32"), &v.geometry.depth.to_le_bytes())?;
        write_file(&cdir.join("conf.f32"), &v.geometry.confidence.to_le_bytes())?;
        write_file(&cdir.join("points.f32"), &v.geometry.points.to_le_bytes())?;
        match &v.semantics {
            SemanticInput::Priors(p) => {
                write_file(&cdir.join("sem.u16"), &p.sem.to_le_bytes())?;
                write_file(&cdir.join("inst.u16"), &p.inst.to_le_bytes())?;
            }
            SemanticInput::Candidates(cands) => {
                for (n, c) in cands.iter().enumerate() {
                    let kdir = cdir.join("candidates").join(n.to_string());
                    fs::create_dir_all(&kdir).map_err(io_err(&kdir))?;
                    write_file(&kdir.join("mask.u8"), &c.mask.to_le_bytes())?;
                    let meta = CandidateMeta {
                        prompt_id: c.prompt_id,
                        candidate_id: c.candidate_id,
                        score: c.score,
                    };
                    write_file(
                        &kdir.join("meta.txt"),
                        toml::to_string(&meta).expect("meta serializes").as_bytes(),
                    )?;
                }
            }
        }
    }
    Ok(())
}

/// Read access to a dataset root. Records which frames have been read.
#[derive(Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
    accessed: Mutex<BTreeSet<FrameIndex>>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, IngestError> {
        let path = root.join("manifest");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut manifest: Manifest = toml::from_str(&text).map_err(|e| IngestError::Malformed {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        manifest.samples.sort_unstable();
        manifest.samples.dedup();
        for c in &manifest.cameras {
            if c.width == 0 || c.height == 0 {
                return Err(IngestError::Malformed {
                    path: path.clone(),
                    msg: format!("camera {} has zero dims", c.id),
                });
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            accessed: Mutex::new(BTreeSet::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn frames(&self) -> &[FrameIndex] {
        &self.manifest.samples
    }

    /// Frames read so far through [`Dataset::load_sample`].
    pub fn accessed_frames(&self) -> BTreeSet<FrameIndex> {
        self.accessed.lock().expect("access log").clone()
    }

    /// Loads all views of frame `t`, fusing raw candidates when no priors are stored.
    pub fn load_sample(&self, t: FrameIndex, taxonomy: &Taxonomy) -> Result<Sample, IngestError> {
        if !self.manifest.samples.contains(&t) {
            return Err(IngestError::UnknownFrame(t));
        }
        self.accessed.lock().expect("access log").insert(t);
        let dir = frame_dir(&self.root, t);
        let ego_vals = parse_floats(&dir.join("ego.txt"), 16)?;
        let ego = EgoPose {
            t,
            ego_to_world: mat4_row_major(&ego_vals),
        };
        ego.validate()?;
        let mut views = Vec::with_capacity(self.manifest.cameras.len());
        for cam in &self.manifest.cameras {
            views.push(self.load_view(&dir.join(cam.id.to_string()), cam, taxonomy)?);
        }
        Ok(Sample { t, ego, views })
    }

    fn load_view(
        &self,
        dir: &Path,
        cam: &ManifestCamera,
        taxonomy: &Taxonomy,
    ) -> Result<LoadedView, IngestError> {
        let (w, h) = (cam.width, cam.height);
        let vals = parse_floats(&dir.join("camera.txt"), 25)?;
        let camera = CameraView {
            camera_id: cam.id,
            width: w,
            height: h,
            intrinsics: Matrix3::from_row_slice(&vals[..9]),
            cam_to_ego: mat4_row_major(&vals[9..]),
        };
        camera.validate()?;

        let depth_path = dir.join("depth.f32");
        let depth: Raster<f32> = read_raster(&depth_path, w, h, 1)?;
        let confidence: Raster<f32> = read_raster(&dir.join("conf.f32"), w, h, 1)?;
        let points: Raster<f32> = read_raster(&dir.join("points.f32"), w, h, 3)?;
        let geometry = GeometryMaps {
            points,
            depth,
            confidence,
        };

        let sem_path = dir.join("sem.u16");
        let priors = if sem_path.exists() {
            let mut sem: Raster<u16> = read_raster(&sem_path, w, h, 1).map_err(|e| match e {
                IngestError::Size { .. } => IngestError::DimMismatch {
                    a: depth_path.clone(),
                    b: sem_path.clone(),
                },
                e => e,
            })?;
            let mut inst: Raster<u16> = read_raster(&dir.join("inst.u16"), w, h, 1)?;
            taxonomy.sanitize_labels(sem.data_mut());
            for (s, i) in sem.data().iter().zip(inst.data_mut()) {
                if *s == taxonomy.ignore_id() {
                    *i = 0;
                }
            }
            ViewPriors {
                sem,
                inst,
                score: Raster::new(w, h, 1),
            }
        } else {
            let cdir = dir.join("candidates");
            let candidates = read_candidates(&cdir, w, h)?;
            fuse_masks(w, h, &candidates, taxonomy)?
        };
        Ok(LoadedView {
            camera,
            priors,
            geometry,
        })
    }
}

fn read_candidates(dir: &Path, w: usize, h: usize) -> Result<Vec<MaskCandidate>, IngestError> {
    if !dir.exists() {
        return Err(IngestError::Malformed {
            path: dir.parent().unwrap_or(dir).to_path_buf(),
            msg: "view has neither sem.u16 nor candidates/".into(),
        });
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    let mut out = Vec::with_capacity(entries.len());
    for kdir in entries {
        let meta_path = kdir.join("meta.txt");
        let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
        let meta: CandidateMeta = toml::from_str(&text).map_err(|e| IngestError::Malformed {
            path: meta_path.clone(),
            msg: e.to_string(),
        })?;
        let mask = read_raster(&kdir.join("mask.u8"), w, h, 1)?;
        out.push(MaskCandidate {
            prompt_id: meta.prompt_id,
            candidate_id: meta.candidate_id,
            score: meta.score,
            mask,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(w: usize, h: usize, on: impl Fn(usize, usize) -> bool) -> Raster<u8> {
        let mut m = Raster::new(w, h, 1);
        for y in 0..h {
            for x in 0..w {
                m.set(x, y, on(x, y) as u8);
            }
        }
        m
    }

    fn cand(prompt: &str, id: u32, score: f64, m: Raster<u8>, t: &Taxonomy) -> MaskCandidate {
        MaskCandidate {
            prompt_id: t.rules().prompt_id(prompt).unwrap(),
            candidate_id: id,
            score,
            mask: m,
        }
    }

    #[test]
    fn score_argmax_on_overlap() {
        let t = Taxonomy::occ3d_nuscenes();
        let car = cand("car", 0, 0.9, mask(4, 1, |x, _| x < 3), &t);
        let truck = cand("truck", 0, 0.4, mask(4, 1, |x, _| x >= 1), &t);
        let p = fuse_masks(4, 1, &[car, truck], &t).unwrap();
        let (car_id, truck_id) = (
            t.class_by_name("car").unwrap(),
            t.class_by_name("truck").unwrap(),
        );
        assert_eq!(p.sem.data(), &[car_id, car_id, car_id, truck_id]);
        assert_eq!(p.inst.data()[0], p.inst.data()[2]);
        assert_ne!(p.inst.data()[0], p.inst.data()[3]);
    }

    #[test]
    fn precedence_overrides_score() {
        let t = Taxonomy::occ3d_nuscenes();
        let road = cand("road", 0, 0.95, mask(3, 1, |_, _| true), &t);
        let lane = cand("lane marking", 0, 0.6, mask(3, 1, |x, _| x == 1), &t);
        let p = fuse_masks(3, 1, &[road.clone(), lane.clone()], &t).unwrap();
        assert_eq!(p.score.data(), &[0.95, 0.6, 0.95]);
        let lane_rank = p.inst.data()[1];
        assert_ne!(lane_rank, p.inst.data()[0]);
        // Order of the input list does not matter.
        let q = fuse_masks(3, 1, &[lane, road], &t).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn empty_candidates_all_ignore() {
        let t = Taxonomy::occ3d_nuscenes();
        let p = fuse_masks(5, 2, &[], &t).unwrap();
        assert!(p.sem.data().iter().all(|&s| s == t.ignore_id()));
        assert!(p.inst.data().iter().all(|&i| i == 0));
    }

    #[test]
    fn score_ties_prefer_lower_prompt_then_candidate() {
        let t = Taxonomy::occ3d_nuscenes();
        let a = cand("truck", 1, 0.5, mask(1, 1, |_, _| true), &t);
        let b = cand("car", 3, 0.5, mask(1, 1, |_, _| true), &t);
        let c = cand("car", 2, 0.5, mask(1, 1, |_, _| true), &t);
        let p = fuse_masks(1, 1, &[a, b, c], &t).unwrap();
        assert_eq!(p.sem.data()[0], t.class_by_name("car").unwrap());
        // "car" candidate 2 has the lowest rank.
        assert_eq!(p.inst.data()[0], 1);
    }

    #[test]
    fn fuse_errors() {
        let t = Taxonomy::occ3d_nuscenes();
        let bad_dims = cand("car", 0, 0.5, mask(2, 2, |_, _| true), &t);
        assert!(fuse_masks(3, 3, &[bad_dims], &t).is_err());
        let nan = cand("car", 0, f64::NAN, mask(1, 1, |_, _| true), &t);
        assert!(fuse_masks(1, 1, &[nan], &t).is_err());
        let mut unknown = cand("car", 0, 0.5, mask(1, 1, |_, _| true), &t);
        unknown.prompt_id = 1000;
        assert!(fuse_masks(1, 1, &[unknown], &t).is_err());
        let dup = cand("car", 0, 0.5, mask(1, 1, |_, _| true), &t);
        assert!(fuse_masks(1, 1, &[dup.clone(), dup], &t).is_err());
    }

    #[test]
    fn instance_packing_is_injective() {
        let mut seen = BTreeSet::new();
        for t in [0u16, 1, 4095] {
            for c in [0u8, 5, 15] {
                for l in [1u16, 2, 65535] {
                    let id = pack_instance(t, c, l);
                    assert!(seen.insert(id));
                    assert_eq!(unpack_instance(id), (t, c, l));
                }
            }
        }
        assert_eq!(pack_instance(7, 3, 0), 0);
    }

    #[test]
    fn rigid_inverse_round_trip() {
        let m =
            nalgebra::Isometry3::new(Vector3::new(1.0, -2.0, 3.0), Vector3::new(0.1, 0.2, -0.3))
                .to_homogeneous();
        let p = Vector3::new(0.3, 0.7, -1.1);
        let back = transform_point(&rigid_inverse(&m), &transform_point(&m, &p));
        assert!((back - p).norm() < 1e-12);
    }

    #[test]
    fn pose_validation() {
        let mut e = EgoPose::identity(0);
        assert!(e.validate().is_ok());
        e.ego_to_world[(0, 0)] = 2.0;
        assert!(e.validate().is_err());
        let mut e = EgoPose::identity(0);
        e.ego_to_world[(3, 0)] = 1.0;
        assert!(e.validate().is_err());
    }
}
