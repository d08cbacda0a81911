//! Turning predicted maps into executable gripper poses, and the success metrics.

use serde::{Deserialize, Serialize};

use crate::decoder::GraspMaps;
use crate::error::{Error, Result};
use crate::quat::Quaternion;
use crate::tsdf::{TsdfVolume, WorkspaceTransform};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractionConfig {
    /// Voxels with quality strictly above this are candidates.
    pub threshold: f64,
    /// Odd window edge for local-maximum filtering; 0 disables it.
    pub local_max_window: usize,
    /// Keep at most this many candidates (highest quality first).
    pub max_candidates: Option<usize>,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig { threshold: 0.9, local_max_window: 0, max_candidates: None }
    }
}

impl ExtractionConfig {
    pub fn with_threshold(threshold: f64) -> Self {
        ExtractionConfig { threshold, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} must lie in (0, 1)", self.threshold)));
        }
        if self.local_max_window != 0 && self.local_max_window % 2 == 0 {
            return Err(Error::Config(format!("local maximum window {} must be odd", self.local_max_window)));
        }
        Ok(())
    }
}

/// A thresholded voxel with its predicted orientation and width (voxel units).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub index: [usize; 3],
    pub quality: f64,
    pub rotation: Quaternion,
    pub width: f64,
}

fn is_local_max(maps: &GraspMaps, index: [usize; 3], half: usize) -> bool {
    let n = maps.n;
    let q = maps.quality[(index[0] * n + index[1]) * n + index[2]];
    let range = |c: usize| c.saturating_sub(half)..=(c + half).min(n - 1);
    for i in range(index[0]) {
        for j in range(index[1]) {
            for k in range(index[2]) {
                if maps.quality[(i * n + j) * n + k] > q {
                    return false;
                }
            }
        }
    }
    true
}

/// Voxels with `q > ε`, best first, ties broken by ascending `(i, j, k)`.
pub fn extract_candidates(maps: &GraspMaps, cfg: &ExtractionConfig) -> Result<Vec<Candidate>> {
    cfg.validate()?;
    let n = maps.n;
    let mut out = Vec::new();
    for (flat, &q) in maps.quality.iter().enumerate() {
        if (q as f64) <= cfg.threshold {
            continue;
        }
        let index = TsdfVolume::unflatten(n, flat);
        if cfg.local_max_window > 1 && !is_local_max(maps, index, cfg.local_max_window / 2) {
            continue;
        }
        let r = maps.quaternion(flat);
        out.push(Candidate {
            index,
            quality: q as f64,
            rotation: Quaternion::new(r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64),
            width: maps.width[flat] as f64,
        });
    }
    // flat order is ascending (i, j, k), and the sort is stable
    out.sort_by(|a, b| b.quality.total_cmp(&a.quality));
    if let Some(cap) = cfg.max_candidates {
        out.truncate(cap);
    }
    Ok(out)
}

/// Gripper configuration in the base frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspPose {
    #[serde(rename = "position_m")]
    pub position: [f64; 3],
    #[serde(rename = "quaternion_wxyz")]
    pub rotation: [f64; 4],
    #[serde(rename = "width_m")]
    pub width: f64,
    pub quality: f64,
}

impl GraspPose {
    pub fn quaternion(&self) -> Quaternion {
        Quaternion::from_array(self.rotation)
    }
}

/// `p = T·(idx + ½)/v`, `r = rot(T) ⊗ r̂`, `w = ŵ / v`.
pub fn to_gripper_config(c: &Candidate, xf: &WorkspaceTransform, n: usize) -> Result<GraspPose> {
    let norm = c.rotation.norm();
    if (norm - 1.0).abs() > 1e-3 || !norm.is_finite() {
        return Err(Error::NonUnitQuaternion(norm));
    }
    let p = xf.voxel_to_world(c.index, n)?;
    let r = (xf.rotation * c.rotation).normalized();
    Ok(GraspPose { position: [p.x, p.y, p.z], rotation: r.to_array(), width: c.width.max(0.0) / xf.voxels_per_meter, quality: c.quality })
}

/// Thresholds the maps and converts every surviving voxel to a pose.
pub fn detect(maps: &GraspMaps, cfg: &ExtractionConfig, xf: &WorkspaceTransform) -> Result<Vec<GraspPose>> {
    extract_candidates(maps, cfg)?.iter().map(|c| to_gripper_config(c, xf, maps.n)).collect()
}

/// Grasp success rate `n_suc / n_pred`.
pub fn gsr(successes: usize, predicted: usize) -> Result<f64> {
    if predicted == 0 {
        return Err(Error::NoGraspsPredicted);
    }
    if successes > predicted {
        return Err(Error::OutOfRange(format!("{} successes out of {} grasps", successes, predicted)));
    }
    Ok(successes as f64 / predicted as f64)
}

/// Declutter rate `n_rem / n_obj`.
pub fn dr(removed: usize, objects: usize) -> Result<f64> {
    if objects == 0 {
        return Err(Error::NoObjects);
    }
    if removed > objects {
        return Err(Error::OutOfRange(format!("{} removed out of {} objects", removed, objects)));
    }
    Ok(removed as f64 / objects as f64)
}
