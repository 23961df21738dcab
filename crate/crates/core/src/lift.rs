//! Confidence stabilization, reliability filtering, lifting of labeled pixels
//! into world-frame points, and temporal fusion over a frame window.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::Path;

use nalgebra::{Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{
    pack_instance, rigid_inverse, transform_point, CameraId, CameraView, EgoPose, FrameIndex,
    ViewPriors,
};
use crate::raster::{LeScalar, Raster};
use crate::taxonomy::{ClassId, Taxonomy};

#[derive(Debug, Error)]
pub enum LiftError {
    #[error("raster dims of camera {0} do not match the camera view")]
    DimMismatch(CameraId),
    #[error("causal window for frame {target} contains future frame {frame}")]
    NonCausal {
        target: FrameIndex,
        frame: FrameIndex,
    },
    #[error("frame {0} in the window has not been lifted")]
    MissingFrame(FrameIndex),
}

/// Geometry rasters for one view: points (camera frame), depth, raw confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryMaps {
    pub points: Raster<f32>,
    pub depth: Raster<f32>,
    pub confidence: Raster<f32>,
}

impl GeometryMaps {
    pub fn dims_match(&self, width: usize, height: usize) -> bool {
        let ok = |w: usize, h: usize| w == width && h == height;
        ok(self.points.width(), self.points.height())
            && self.points.channels() == 3
            && ok(self.depth.width(), self.depth.height())
            && ok(self.confidence.width(), self.confidence.height())
    }

    /// Pixels where depth and the z coordinate of the point disagree by more than 1e-4 m.
    pub fn inconsistent_depth_pixels(&self) -> usize {
        (0..self.depth.len_pixels())
            .filter(|&p| {
                let d = self.depth.data()[p];
                let z = self.points.pixel(p)[2];
                d.is_finite() && z.is_finite() && (d - z).abs() > 1e-4
            })
            .count()
    }
}

/// `log10(c) + 1` for finite positive `c`, `1` otherwise.
pub fn stabilize_confidence(c: f64) -> f64 {
    if c.is_finite() && c > 0.0 {
        c.log10() + 1.0
    } else {
        1.0
    }
}

pub fn stabilize_raster(conf: &Raster<f32>) -> Raster<f32> {
    let data = conf
        .data()
        .iter()
        .map(|&c| stabilize_confidence(f64::from(c)) as f32)
        .collect();
    Raster::from_vec(conf.width(), conf.height(), 1, data).expect("same dims")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReliabilityParams {
    pub tau_c: f64,
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for ReliabilityParams {
    fn default() -> Self {
        Self {
            tau_c: 1e-5,
            d_min: 1.0,
            d_max: 50.0,
        }
    }
}

impl ReliabilityParams {
    pub fn keeps(&self, depth: f64, stabilized_conf: f64) -> bool {
        stabilized_conf >= self.tau_c && self.d_min <= depth && depth <= self.d_max
    }
}

/// Pixel mask of reliable pixels: stabilized confidence at least `tau_c` and
/// depth within the closed interval `[d_min, d_max]`.
pub fn reliability_filter(
    depth: &Raster<f32>,
    stabilized: &Raster<f32>,
    params: &ReliabilityParams,
) -> Vec<bool> {
    assert!(
        depth.same_dims(stabilized),
        "depth and confidence dims differ"
    );
    depth
        .data()
        .iter()
        .zip(stabilized.data())
        .map(|(&d, &c)| params.keeps(f64::from(d), f64::from(c)))
        .collect()
}

/// A lifted pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPoint {
    pub xyz: Vector3<f64>,
    pub sem: ClassId,
    /// Sample-wide instance id (0 = none).
    pub inst: u32,
    /// Stabilized confidence.
    pub conf: f32,
    pub t: FrameIndex,
    pub cam: CameraId,
    /// Original depth of the source pixel.
    pub depth: f32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LiftDiagnostics {
    pub reliable: usize,
    pub lifted: usize,
    pub non_finite: usize,
}

/// Lifts every pixel of `omega` to a world-frame point, `T_ego · T_cam · P(u)`.
///
/// Ignore-labeled pixels are lifted as geometry evidence without an instance
/// prior. Pixels with a non-finite point are skipped and counted.
pub fn lift_view(
    view: &CameraView,
    t: FrameIndex,
    priors: &ViewPriors,
    geometry: &GeometryMaps,
    ego: &EgoPose,
    omega: &[bool],
    taxonomy: &Taxonomy,
) -> Result<(Vec<LabeledPoint>, LiftDiagnostics), LiftError> {
    let (w, h) = (view.width, view.height);
    if !geometry.dims_match(w, h)
        || priors.sem.width() != w
        || priors.sem.height() != h
        || !priors.sem.same_dims(&priors.inst)
        || omega.len() != w * h
    {
        return Err(LiftError::DimMismatch(view.camera_id));
    }
    let to_world: Matrix4<f64> = ego.ego_to_world * view.cam_to_ego;
    let mut diag = LiftDiagnostics::default();
    let mut out = Vec::new();
    for p in (0..w * h).filter(|&p| omega[p]) {
        diag.reliable += 1;
        let q = geometry.points.pixel(p);
        if !q.iter().all(|v| v.is_finite()) {
            diag.non_finite += 1;
            continue;
        }
        let cam = Vector3::new(f64::from(q[0]), f64::from(q[1]), f64::from(q[2]));
        let sem = priors.sem.data()[p];
        let inst = if sem == taxonomy.ignore_id() {
            0
        } else {
            pack_instance(t, view.camera_id, priors.inst.data()[p])
        };
        out.push(LabeledPoint {
            xyz: transform_point(&to_world, &cam),
            sem,
            inst,
            conf: stabilize_confidence(f64::from(geometry.confidence.data()[p])) as f32,
            t,
            cam: view.camera_id,
            depth: geometry.depth.data()[p],
        });
    }
    diag.lifted = out.len();
    Ok((out, diag))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowMode {
    Causal,
    NonCausal,
}

/// Frames contributing 3D evidence to one target frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSpec {
    pub mode: WindowMode,
    pub indices: BTreeSet<FrameIndex>,
}

impl WindowSpec {
    /// All listed frames up to and including `target`.
    pub fn causal(frames: &[FrameIndex], target: FrameIndex) -> Self {
        Self {
            mode: WindowMode::Causal,
            indices: frames.iter().copied().filter(|&f| f <= target).collect(),
        }
    }

    pub fn non_causal(frames: &[FrameIndex]) -> Self {
        Self {
            mode: WindowMode::NonCausal,
            indices: frames.iter().copied().collect(),
        }
    }

    pub fn singleton(target: FrameIndex) -> Self {
        Self {
            mode: WindowMode::Causal,
            indices: BTreeSet::from([target]),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn check(&self, target: FrameIndex) -> Result<(), LiftError> {
        if self.mode == WindowMode::Causal {
            if let Some(&frame) = self.indices.iter().find(|&&f| f > target) {
                return Err(LiftError::NonCausal { target, frame });
            }
        }
        Ok(())
    }
}

/// Labeled points of one or more frames.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledPointCloud {
    pub points: Vec<LabeledPoint>,
}

/// Concatenates the lifted points of every frame in the window, in frame order.
pub fn fuse_window(
    frames: &BTreeMap<FrameIndex, Vec<LabeledPoint>>,
    spec: &WindowSpec,
    target: FrameIndex,
) -> Result<LabeledPointCloud, LiftError> {
    spec.check(target)?;
    let mut points = Vec::with_capacity(
        spec.indices
            .iter()
            .filter_map(|f| frames.get(f))
            .map(Vec::len)
            .sum(),
    );
    for f in &spec.indices {
        let pts = frames.get(f).ok_or(LiftError::MissingFrame(*f))?;
        points.extend_from_slice(pts);
    }
    Ok(LabeledPointCloud { points })
}

/// Bytes per exported point record.
pub const POINT_RECORD_SIZE: usize = 29;

impl LabeledPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Re-expresses world-frame points in the ego frame of `ego`.
    pub fn to_ego_frame(&self, ego: &EgoPose) -> Self {
        let inv = rigid_inverse(&ego.ego_to_world);
        Self {
            points: self
                .points
                .iter()
                .map(|p| LabeledPoint {
                    xyz: transform_point(&inv, &p.xyz),
                    ..*p
                })
                .collect(),
        }
    }

    /// Flat little-endian table: xyz f32×3, sem u16, inst u32, conf f32, t u16, cam u8, depth f32.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.points.len() * POINT_RECORD_SIZE);
        for p in &self.points {
            for c in p.xyz.iter() {
                (*c as f32).write_le(&mut out);
            }
            p.sem.write_le(&mut out);
            p.inst.write_le(&mut out);
            p.conf.write_le(&mut out);
            p.t.write_le(&mut out);
            p.cam.write_le(&mut out);
            p.depth.write_le(&mut out);
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Option<Self> {
        if !bytes.len().is_multiple_of(POINT_RECORD_SIZE) {
            return None;
        }
        let points = bytes
            .chunks_exact(POINT_RECORD_SIZE)
            .map(|r| {
                let f = |o: usize| f32::read_le(&r[o..o + 4]);
                LabeledPoint {
                    xyz: Vector3::new(f(0).into(), f(4).into(), f(8).into()),
                    sem: u16::read_le(&r[12..14]),
                    inst: u32::read_le(&r[14..18]),
                    conf: f(18),
                    t: u16::read_le(&r[22..24]),
                    cam: r[24],
                    depth: f(25),
                }
            })
            .collect();
        Some(Self { points })
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.to_le_bytes())
    }

    pub fn read(path: &Path) -> io::Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_le_bytes(&bytes).ok_or_else(|| {
            io::Error::new(
                io::ErrorKind::InvalidData,
                "point table size is not a whole number of records",
            )
        })
    }
}
