//! Truncated signed distance volumes, their file format, and voxel/world mapping.
//!
//! A volume stores `N³` values in `[0, 1]`, index order `i` slowest and `k`
//! fastest. Signed distances `d` (negative inside) are encoded as
//! `clamp(d, −trunc, trunc) / (2·trunc) + 0.5`: surfaces sit at 0.5, deep
//! interiors at 0 and free space at 1.
//!
//! File layout (little-endian): `"TSDF" | version u32 | N u32 | side_length f32 |
//! trunc f32 | N³ × f32`.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Reader;
use crate::error::{at_path, Error, Result};
use crate::quat::Quaternion;
use crate::tensor::Tensor;

pub const TSDF_MAGIC: &[u8; 4] = b"TSDF";
pub const TSDF_VERSION: u32 = 1;
/// Workspace edge length used when none is given.
pub const DEFAULT_SIDE_LENGTH: f64 = 0.3;
/// Truncation band, in voxels.
pub const DEFAULT_TRUNC_VOXELS: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TsdfVolume {
    pub n: usize,
    pub side_length: f32,
    pub trunc: f32,
    pub values: Vec<f32>,
}

impl TsdfVolume {
    pub fn new(n: usize, side_length: f32, trunc: f32, values: Vec<f32>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("volume resolution must be positive".into()));
        }
        if values.len() != n * n * n {
            return Err(Error::SizeMismatch(format!("{} values for N = {}", values.len(), n)));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Config(format!("TSDF value {} outside [0, 1]", bad)));
        }
        Ok(TsdfVolume { n, side_length, trunc, values })
    }

    pub fn filled(n: usize, side_length: f32, trunc: f32, value: f32) -> Self {
        TsdfVolume { n, side_length, trunc, values: vec![value; n * n * n] }
    }

    pub fn voxel_size(&self) -> f64 {
        self.side_length as f64 / self.n as f64
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.n + j) * self.n + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[self.index(i, j, k)]
    }

    /// `[i, j, k]` of a flat voxel index.
    pub fn unflatten(n: usize, flat: usize) -> [usize; 3] {
        [flat / (n * n), (flat / n) % n, flat % n]
    }

    /// The volume as a `1×N×N×N` network input.
    pub fn to_tensor<T: crate::tensor::Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(&[1, self.n, self.n, self.n], self.values.iter().map(|&v| T::lit(v as f64)).collect())
            .expect("volume extents are consistent")
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.values.len());
        out.extend_from_slice(TSDF_MAGIC);
        out.extend_from_slice(&TSDF_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&self.side_length.to_le_bytes());
        out.extend_from_slice(&self.trunc.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic")? != TSDF_MAGIC {
            return Err(Error::FormatMismatch("not a TSDF file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != TSDF_VERSION {
            return Err(Error::FormatMismatch(format!("unsupported TSDF version {}", version)));
        }
        let n = r.u32("resolution")? as usize;
        let side_length = r.f32("side length")?;
        let trunc = r.f32("truncation")?;
        let count =
            n.checked_mul(n).and_then(|v| v.checked_mul(n)).ok_or_else(|| Error::SizeMismatch(format!("resolution {} overflows", n)))?;
        let payload = bytes.len() - r.pos;
        if payload < count * 4 {
            return Err(Error::TruncatedPayload(format!("{} of {} value bytes present", payload, count * 4)));
        }
        if payload != count * 4 {
            return Err(Error::SizeMismatch(format!("payload holds {} bytes, N³ = {} values", payload, count)));
        }
        let values = r.take(count * 4, "values")?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        TsdfVolume::new(n, side_length, trunc, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(at_path(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path).map_err(at_path(path))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
}

/// A sphere or box placed in the workspace frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenePrimitive {
    pub shape: Shape,
    pub position: [f64; 3],
    pub orientation: Quaternion,
}

impl ScenePrimitive {
    pub fn sphere(center: [f64; 3], radius: f64) -> Self {
        ScenePrimitive { shape: Shape::Sphere { radius }, position: center, orientation: Quaternion::IDENTITY }
    }

    pub fn cuboid(center: [f64; 3], half_extents: [f64; 3], orientation: Quaternion) -> Self {
        ScenePrimitive { shape: Shape::Box { half_extents }, position: center, orientation }
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::from(self.position)
    }

    /// Radius of the smallest sphere about the center enclosing the primitive.
    pub fn bounding_radius(&self) -> f64 {
        match self.shape {
            Shape::Sphere { radius } => radius,
            Shape::Box { half_extents: h } => (h[0] * h[0] + h[1] * h[1] + h[2] * h[2]).sqrt(),
        }
    }

    /// Point expressed in the primitive's local frame.
    pub fn to_local(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.orientation.conjugate().rotate(p - self.center())
    }

    /// Exact signed distance to the surface, negative inside.
    pub fn signed_distance(&self, p: Vector3<f64>) -> f64 {
        match self.shape {
            Shape::Sphere { radius } => (p - self.center()).norm() - radius,
            Shape::Box { half_extents: h } => {
                let l = self.to_local(p);
                let q = Vector3::new(l.x.abs() - h[0], l.y.abs() - h[1], l.z.abs() - h[2]);
                let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
                outside + q.x.max(q.y).max(q.z).min(0.0)
            }
        }
    }

    pub fn validate(&self, side_length: f64) -> Result<()> {
        let dims_ok = match self.shape {
            Shape::Sphere { radius } => radius > 0.0,
            Shape::Box { half_extents } => half_extents.iter().all(|&h| h > 0.0),
        };
        if !dims_ok {
            return Err(Error::Config(format!("primitive dimensions must be positive: {:?}", self.shape)));
        }
        if (self.orientation.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::NonUnitQuaternion(self.orientation.norm()));
        }
        let r = self.bounding_radius();
        if self.position.iter().any(|&c| c - r < 0.0 || c + r > side_length) {
            return Err(Error::Config(format!("primitive at {:?} leaves the workspace cube", self.position)));
        }
        Ok(())
    }
}

/// Signed distance of `p` to the union of `prims`; `+∞` for an empty scene.
pub fn scene_distance(prims: &[ScenePrimitive], p: Vector3<f64>) -> f64 {
    prims.iter().map(|s| s.signed_distance(p)).fold(f64::INFINITY, f64::min)
}

/// Encodes a signed distance into the `[0, 1]` TSDF range.
pub fn encode_distance(d: f64, trunc: f64) -> f32 {
    (d.clamp(-trunc, trunc) / (2.0 * trunc) + 0.5) as f32
}

/// Samples the union of `prims` at voxel centers.
pub fn tsdf_from_primitives(prims: &[ScenePrimitive], n: usize, side_length: f64, trunc: f64) -> Result<TsdfVolume> {
    if trunc <= 0.0 {
        return Err(Error::Config(format!("truncation distance must be positive, got {}", trunc)));
    }
    if n == 0 || side_length <= 0.0 {
        return Err(Error::Config("resolution and side length must be positive".into()));
    }
    for p in prims {
        p.validate(side_length)?;
    }
    let voxel = side_length / n as f64;
    let mut values = Vec::with_capacity(n * n * n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let p = Vector3::new((i as f64 + 0.5) * voxel, (j as f64 + 0.5) * voxel, (k as f64 + 0.5) * voxel);
                values.push(encode_distance(scene_distance(prims, p), trunc));
            }
        }
    }
    TsdfVolume::new(n, side_length as f32, trunc as f32, values)
}

/// Rigid placement of the volume in the robot base frame plus its resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkspaceTransform {
    pub rotation: Quaternion,
    pub translation: [f64; 3],
    /// Voxels per meter, `N / side_length`.
    pub voxels_per_meter: f64,
}

impl WorkspaceTransform {
    pub fn new(rotation: Quaternion, translation: [f64; 3], voxels_per_meter: f64) -> Result<Self> {
        if (rotation.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::NonUnitQuaternion(rotation.norm()));
        }
        if !(voxels_per_meter > 0.0) {
            return Err(Error::Config(format!("voxels per meter must be positive, got {}", voxels_per_meter)));
        }
        Ok(WorkspaceTransform { rotation, translation, voxels_per_meter })
    }

    pub fn identity(n: usize, side_length: f64) -> Self {
        WorkspaceTransform { rotation: Quaternion::IDENTITY, translation: [0.0; 3], voxels_per_meter: n as f64 / side_length }
    }

    /// Applies the rigid part to a point.
    pub fn apply(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + Vector3::from(self.translation)
    }

    /// `G ∘ T`: this transform followed by the rigid motion `(rot, trans)`.
    pub fn then(&self, rot: Quaternion, trans: [f64; 3]) -> Self {
        let t = rot.rotate(Vector3::from(self.translation)) + Vector3::from(trans);
        WorkspaceTransform {
            rotation: (rot * self.rotation).normalized(),
            translation: [t.x, t.y, t.z],
            voxels_per_meter: self.voxels_per_meter,
        }
    }

    /// Center of voxel `(i, j, k)` in meters, rigidly transformed.
    pub fn voxel_to_world(&self, index: [usize; 3], n: usize) -> Result<Vector3<f64>> {
        if index.iter().any(|&c| c >= n) {
            return Err(Error::OutOfRange(format!("voxel {:?} outside a {}³ grid", index, n)));
        }
        let local = Vector3::new(index[0] as f64 + 0.5, index[1] as f64 + 0.5, index[2] as f64 + 0.5) / self.voxels_per_meter;
        Ok(self.apply(local))
    }
}
