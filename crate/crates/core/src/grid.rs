//! Voxel lattice geometry and the dense occupancy grid with its file format.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{decode_slice, encode_slice, LeScalar};
use crate::taxonomy::ClassId;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error("grid file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Voxel lattice: metric bounds, voxel size and vertical offset.
///
/// Bounds are relative to the vertical offset on the z axis: the lattice
/// spans `[zmin + z_offset, zmax + z_offset)` in the ego frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub bounds: [[f64; 2]; 3],
    pub voxel_size: f64,
    pub z_offset: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            bounds: [[-40.0, 40.0], [-40.0, 40.0], [-10.0, 10.0]],
            voxel_size: 0.4,
            z_offset: -1.0,
        }
    }
}

const SNAP_TOL: f64 = 1e-9;

impl GridSpec {
    pub fn validate(&self) -> Result<(), GridError> {
        if !(self.voxel_size.is_finite() && self.voxel_size > 0.0) {
            return Err(GridError::InvalidSpec("voxel size must be positive".into()));
        }
        if !self.z_offset.is_finite() {
            return Err(GridError::InvalidSpec("z offset must be finite".into()));
        }
        for (axis, [lo, hi]) in self.bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(GridError::InvalidSpec(format!(
                    "axis {axis}: bounds must satisfy min < max"
                )));
            }
            if ((hi - lo) / self.voxel_size).round() < 1.0 {
                return Err(GridError::InvalidSpec(format!(
                    "axis {axis}: extent smaller than one voxel"
                )));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.bounds
            .map(|[lo, hi]| ((hi - lo) / self.voxel_size).round() as usize)
    }

    pub fn len(&self) -> usize {
        let [nx, ny, nz] = self.dims();
        nx * ny * nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Ego-frame coordinates of the lattice corner with the smallest indices.
    pub fn origin(&self) -> [f64; 3] {
        [
            self.bounds[0][0],
            self.bounds[1][0],
            self.bounds[2][0] + self.z_offset,
        ]
    }

    /// Index of the voxel containing `xyz`, or `None` outside the half-open bounds.
    ///
    /// Coordinates within a relative 1e-9 of a voxel boundary snap onto it, so
    /// `min + k * voxel_size` lands in voxel `k` despite rounding.
    pub fn voxel_index(&self, xyz: [f64; 3]) -> Option<[usize; 3]> {
        let origin = self.origin();
        let dims = self.dims();
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let mut q = (xyz[a] - origin[a]) / self.voxel_size;
            if !q.is_finite() {
                return None;
            }
            let r = q.round();
            if (q - r).abs() <= SNAP_TOL * r.abs().max(1.0) {
                q = r;
            }
            let f = q.floor();
            if f < 0.0 || f >= dims[a] as f64 {
                return None;
            }
            idx[a] = f as usize;
        }
        Some(idx)
    }

    /// Row-major linear index with x the slowest axis.
    pub fn linear(&self, [i, j, k]: [usize; 3]) -> usize {
        let [_, ny, nz] = self.dims();
        (i * ny + j) * nz + k
    }

    pub fn unlinear(&self, lin: usize) -> [usize; 3] {
        let [_, ny, nz] = self.dims();
        [lin / (ny * nz), (lin / nz) % ny, lin % nz]
    }

    pub fn voxel_center(&self, [i, j, k]: [usize; 3]) -> [f64; 3] {
        let o = self.origin();
        let s = self.voxel_size;
        [
            o[0] + (i as f64 + 0.5) * s,
            o[1] + (j as f64 + 0.5) * s,
            o[2] + (k as f64 + 0.5) * s,
        ]
    }
}

/// Dense voxel grid with labels and per-voxel evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub spec: GridSpec,
    pub sem: Vec<ClassId>,
    pub inst: Vec<u32>,
    /// Point support.
    pub n: Vec<u32>,
    /// Smoothed vote confidence of the winning class.
    pub conf: Vec<f32>,
    /// Saturating reliability from point support.
    pub p_occ: Vec<f32>,
}

const MAGIC: &[u8; 8] = b"OCCGRID\0";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 * 8 + 3 * 4;

impl OccupancyGrid {
    /// All voxels free with zero support and the uniform-prior confidence `1/num_classes`.
    pub fn empty(spec: GridSpec, free_id: ClassId, num_classes: usize) -> Self {
        let n = spec.len();
        Self {
            spec,
            sem: vec![free_id; n],
            inst: vec![0; n],
            n: vec![0; n],
            conf: vec![(1.0 / num_classes.max(1) as f64) as f32; n],
            p_occ: vec![0.0; n],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.spec.dims()
    }

    pub fn len(&self) -> usize {
        self.sem.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sem.is_empty()
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * 18);
        out.extend_from_slice(MAGIC);
        VERSION.write_le(&mut out);
        for [lo, hi] in self.spec.bounds {
            lo.write_le(&mut out);
            hi.write_le(&mut out);
        }
        self.spec.voxel_size.write_le(&mut out);
        self.spec.z_offset.write_le(&mut out);
        for d in self.dims() {
            (d as u32).write_le(&mut out);
        }
        encode_slice(&self.sem, &mut out);
        encode_slice(&self.inst, &mut out);
        encode_slice(&self.n, &mut out);
        encode_slice(&self.conf, &mut out);
        encode_slice(&self.p_occ, &mut out);
        out
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self, GridError> {
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(GridError::Format("bad magic".into()));
        }
        let version = u32::read_le(&bytes[8..12]);
        if version != VERSION {
            return Err(GridError::Format(format!("unsupported version {version}")));
        }
        let f = |i: usize| f64::read_le(&bytes[12 + 8 * i..20 + 8 * i]);
        let spec = GridSpec {
            bounds: [[f(0), f(1)], [f(2), f(3)], [f(4), f(5)]],
            voxel_size: f(6),
            z_offset: f(7),
        };
        spec.validate()?;
        let dims: Vec<usize> = (0..3)
            .map(|i| u32::read_le(&bytes[76 + 4 * i..80 + 4 * i]) as usize)
            .collect();
        if dims != spec.dims() {
            return Err(GridError::Format("dims disagree with the spec".into()));
        }
        let n = spec.len();
        let body = &bytes[HEADER_LEN..];
        if body.len() != n * 18 {
            return Err(GridError::Format(format!(
                "expected {} body bytes, found {}",
                n * 18,
                body.len()
            )));
        }
        let (sem, rest) = body.split_at(2 * n);
        let (inst, rest) = rest.split_at(4 * n);
        let (cnt, rest) = rest.split_at(4 * n);
        let (conf, p_occ) = rest.split_at(4 * n);
        Ok(Self {
            spec,
            sem: decode_slice(sem).expect("sized"),
            inst: decode_slice(inst).expect("sized"),
            n: decode_slice(cnt).expect("sized"),
            conf: decode_slice(conf).expect("sized"),
            p_occ: decode_slice(p_occ).expect("sized"),
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), GridError> {
        std::fs::write(path, self.to_le_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, GridError> {
        Self::from_le_bytes(&std::fs::read(path)?)
    }
}
