//! Grasp supervision: quality cross-entropy plus wrist-symmetric rotation and
//! width regression, applied at labelled voxels only.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::Var;
use crate::decoder::{GraspMaps, MapVars};
use crate::error::{at_path, Error, Result};
use crate::quat::Quaternion;
use crate::tensor::{Scalar, Tensor};
use crate::tsdf::TsdfVolume;

/// Predictions are clamped to `[BCE_CLAMP, 1 − BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;
/// Largest accepted deviation of `|r|` from 1.
pub const UNIT_TOLERANCE: f64 = 1e-3;

fn check_unit(q: Quaternion) -> Result<()> {
    let n = q.norm();
    if (n - 1.0).abs() > UNIT_TOLERANCE || !n.is_finite() {
        return Err(Error::NonUnitQuaternion(n));
    }
    Ok(())
}

/// `1 − |r̂·r|`.
pub fn quat_loss(pred: Quaternion, target: Quaternion) -> Result<f64> {
    check_unit(pred)?;
    check_unit(target)?;
    Ok((1.0 - pred.dot(target).abs()).clamp(0.0, 1.0))
}

/// Half turn about the gripper's local z (wrist) axis: `r ⊗ (0,0,0,1)`.
pub fn rotate_pi_wrist(r: Quaternion) -> Quaternion {
    r * Quaternion::new(0.0, 0.0, 0.0, 1.0)
}

pub fn rotation_loss(pred: Quaternion, target: Quaternion) -> Result<f64> {
    Ok(quat_loss(pred, target)?.min(quat_loss(pred, rotate_pi_wrist(target))?))
}

pub fn bce(pred: f64, target: f64) -> f64 {
    let p = pred.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Ground truth at one voxel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspLabel {
    pub index: [usize; 3],
    /// 1 for a successful grasp, 0 otherwise.
    pub q: f64,
    pub r: Quaternion,
    /// Opening width in voxels.
    pub w: f64,
}

impl GraspLabel {
    pub fn positive(index: [usize; 3], r: Quaternion, w: f64) -> Self {
        GraspLabel { index, q: 1.0, r, w }
    }

    /// Rotation and width are placeholders that the loss never reads.
    pub fn negative(index: [usize; 3]) -> Self {
        GraspLabel { index, q: 0.0, r: Quaternion::IDENTITY, w: 0.0 }
    }

    pub fn is_positive(&self) -> bool {
        self.q == 1.0
    }

    pub fn flat(&self, n: usize) -> Result<usize> {
        let [i, j, k] = self.index;
        if i >= n || j >= n || k >= n {
            return Err(Error::OutOfRange(format!("label voxel {:?} outside a {}³ grid", self.index, n)));
        }
        Ok((i * n + j) * n + k)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        self.flat(n)?;
        if self.q != 0.0 && self.q != 1.0 {
            return Err(Error::Dataset(format!("label quality {} is not 0 or 1", self.q)));
        }
        if self.is_positive() {
            check_unit(self.r)?;
            if !(self.w >= 0.0) || !self.w.is_finite() {
                return Err(Error::Dataset(format!("label width {} is not a non-negative number", self.w)));
            }
        }
        Ok(())
    }
}

/// Per-voxel loss for predicted `(q̂, r̂, ŵ)` against a label.
pub fn grasp_loss(q_hat: f64, r_hat: Quaternion, w_hat: f64, label: &GraspLabel) -> Result<f64> {
    let mut l = bce(q_hat, label.q);
    if label.q != 0.0 {
        l += label.q * (rotation_loss(r_hat, label.r)? + (w_hat - label.w).powi(2));
    }
    Ok(l)
}

/// Mean per-voxel loss evaluated directly on finished maps.
pub fn batch_loss(maps: &GraspMaps, labels: &[GraspLabel]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyLabels);
    }
    let mut total = 0.0;
    for l in labels {
        let v = l.flat(maps.n)?;
        let r = Quaternion::from_array(maps.quaternion(v).map(|c| c as f64));
        total += grasp_loss(maps.quality[v] as f64, r, maps.width[v] as f64, l)?;
    }
    Ok(total / labels.len() as f64)
}

/// The same loss recorded on the tape, differentiable through the heads.
pub fn batch_loss_var<'t, T: Scalar>(maps: &MapVars<'t, T>, n: usize, labels: &[GraspLabel]) -> Result<Var<'t, T>> {
    if labels.is_empty() {
        return Err(Error::EmptyLabels);
    }
    let idx = labels.iter().map(|l| l.flat(n)).collect::<Result<Vec<_>>>()?;
    let b = labels.len();
    let tape = maps.quality.tape();
    let row = |f: &dyn Fn(&GraspLabel) -> f64| Tensor::from_vec(&[1, b], labels.iter().map(|l| T::lit(f(l))).collect());
    let quats = |f: &dyn Fn(&GraspLabel) -> Quaternion| -> Result<Tensor<T>> {
        let mut v = vec![T::zero(); 4 * b];
        for (c, l) in labels.iter().enumerate() {
            for (i, x) in f(l).to_array().iter().enumerate() {
                v[i * b + c] = T::lit(*x);
            }
        }
        Tensor::from_vec(&[4, b], v)
    };
    let q_target = row(&|l| l.q)?;
    let q_mask = tape.constant(q_target.clone());
    let w_target = tape.constant(row(&|l| l.w)?);
    let r_target = tape.constant(quats(&|l| l.r)?);
    let r_flip = tape.constant(quats(&|l| rotate_pi_wrist(l.r))?);

    let q_hat = maps.quality.gather_cols(&idx)?;
    let r_hat = maps.rotation.gather_cols(&idx)?;
    let w_hat = maps.width.gather_cols(&idx)?;

    let quality = q_hat.bce(&q_target, BCE_CLAMP)?;
    let direct = r_hat.mul(r_target)?.sum_rows()?.abs().affine(-1.0, 1.0);
    let flipped = r_hat.mul(r_flip)?.sum_rows()?.abs().affine(-1.0, 1.0);
    let rotation = direct.minimum(flipped)?;
    let width = w_hat.sub(w_target)?.square();
    let regress = rotation.add(width)?.mul(q_mask)?;
    Ok(quality.add(regress)?.mean())
}

/// Plain-text label records: `i j k q rw rx ry rz w_vox`, one per line.
pub fn format_labels(labels: &[GraspLabel]) -> String {
    let mut s = String::new();
    for l in labels {
        let [i, j, k] = l.index;
        let r = l.r;
        let _ = writeln!(s, "{} {} {} {} {} {} {} {} {}", i, j, k, l.q, r.w, r.x, r.y, r.z, l.w);
    }
    s
}

/// Parses label records, validating each against a grid of `n` voxels per axis.
pub fn parse_labels(text: &str, n: usize) -> Result<Vec<GraspLabel>> {
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: &str| Error::Dataset(format!("label line {}: {}", line_no + 1, m));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 9 {
            return Err(bad(&format!("expected 9 fields, found {}", f.len())));
        }
        let idx = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad index `{}`", s)));
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number `{}`", s)));
        let label = GraspLabel {
            index: [idx(f[0])?, idx(f[1])?, idx(f[2])?],
            q: num(f[3])?,
            r: Quaternion::new(num(f[4])?, num(f[5])?, num(f[6])?, num(f[7])?),
            w: num(f[8])?,
        };
        label.validate(n).map_err(|e| bad(&e.to_string()))?;
        out.push(label);
    }
    Ok(out)
}

pub fn save_labels(path: impl AsRef<Path>, labels: &[GraspLabel]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_labels(labels)).map_err(at_path(path))
}

pub fn load_labels(path: impl AsRef<Path>, n: usize) -> Result<Vec<GraspLabel>> {
    let path = path.as_ref();
    parse_labels(&fs::read_to_string(path).map_err(at_path(path))?, n)
}

/// Checks that a label list fits the volume it annotates.
pub fn check_labels(vol: &TsdfVolume, labels: &[GraspLabel]) -> Result<()> {
    labels.iter().try_for_each(|l| l.validate(vol.n))
}
