//! Synthetic clutter scenes, analytic grasp labels and a geometric grasp checker.
//!
//! The gripper is a parallel jaw: the closing direction is the local `y` axis,
//! the approach direction the local `z` axis, and the grasp point sits between
//! the fingertips. Fingers are capsules reaching back from the tips towards the
//! wrist, joined by a capsule palm.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::detect::GraspPose;
use crate::error::{Error, Result};
use crate::objective::GraspLabel;
use crate::quat::Quaternion;
use crate::tsdf::{tsdf_from_primitives, ScenePrimitive, Shape, TsdfVolume, WorkspaceTransform};

/// Largest allowed angle between the closing axis and an antipodal axis.
pub const ANTIPODAL_TOLERANCE_DEG: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gripper {
    pub max_width: f64,
    pub finger_thickness: f64,
    /// Finger length from tip to palm.
    pub finger_length: f64,
}

impl Default for Gripper {
    fn default() -> Self {
        Gripper { max_width: 0.08, finger_thickness: 0.01, finger_length: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Randomly rotated spheres and boxes.
    Pile,
    /// Upright boxes turned only about the vertical axis.
    Packed,
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pile" => Ok(Scenario::Pile),
            "packed" => Ok(Scenario::Packed),
            other => Err(Error::Config(format!("unknown scenario `{}` (pile, packed)", other))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Pile => "pile",
            Scenario::Packed => "packed",
        })
    }
}

/// Grid, object-count and labelling parameters for generated scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub n: usize,
    pub side_length: f64,
    pub trunc_voxels: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Extra clearance between bounding spheres.
    pub gap: f64,
    pub gripper: Gripper,
    /// Negatives drawn from voxels with TSDF value 1.
    pub free_negatives: usize,
    /// Negatives drawn from voxels near surfaces where the checker rejects the grasp.
    pub surface_negatives: usize,
    pub max_attempts: usize,
}

impl SceneConfig {
    pub fn for_model(cfg: &ModelConfig) -> Self {
        SceneConfig {
            n: cfg.n(),
            side_length: cfg.side_length,
            trunc_voxels: cfg.trunc_voxels,
            min_objects: 1,
            max_objects: 4,
            gap: 0.005,
            gripper: Gripper::default(),
            free_negatives: 32,
            surface_negatives: 32,
            max_attempts: 50,
        }
    }

    pub fn voxel_size(&self) -> f64 {
        self.side_length / self.n as f64
    }

    pub fn voxels_per_meter(&self) -> f64 {
        self.n as f64 / self.side_length
    }

    pub fn transform(&self) -> WorkspaceTransform {
        WorkspaceTransform::identity(self.n, self.side_length)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config(format!("object count range {}..={} is empty", self.min_objects, self.max_objects)));
        }
        if self.n == 0 || !(self.side_length > 0.0) || !(self.trunc_voxels > 0.0) {
            return Err(Error::Config("grid parameters must be positive".into()));
        }
        Ok(())
    }
}

/// Primitives of one scene plus how they were generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyScene {
    pub seed: u64,
    pub scenario: Scenario,
    pub primitives: Vec<ScenePrimitive>,
}

impl ToyScene {
    pub fn volume(&self, cfg: &SceneConfig) -> Result<TsdfVolume> {
        tsdf_from_primitives(&self.primitives, cfg.n, cfg.side_length, cfg.trunc_voxels * cfg.voxel_size())
    }

    pub fn without(&self, index: usize) -> ToyScene {
        let mut s = self.clone();
        s.primitives.remove(index);
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedScene {
    pub scene: ToyScene,
    pub volume: TsdfVolume,
    pub labels: Vec<GraspLabel>,
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Quaternion {
    loop {
        let v: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let q = Quaternion::from_array(v);
        if q.norm() > 1e-6 {
            let q = q.normalized();
            return if q.w < 0.0 { -q } else { q };
        }
    }
}

fn random_primitive(rng: &mut ChaCha8Rng, scenario: Scenario) -> ScenePrimitive {
    let sphere = scenario == Scenario::Pile && rng.random_bool(0.5);
    if sphere {
        ScenePrimitive::sphere([0.0; 3], rng.random_range(0.02..0.035))
    } else {
        let h = std::array::from_fn(|_| rng.random_range(0.015..0.035));
        let rot = match scenario {
            Scenario::Pile => random_rotation(rng),
            Scenario::Packed => Quaternion::from_axis_angle(Vector3::z(), rng.random_range(0.0..2.0 * PI)),
        };
        ScenePrimitive::cuboid([0.0; 3], h, rot)
    }
}

/// Center of voxel `idx` along one axis.
fn voxel_center(cfg: &SceneConfig, idx: usize) -> f64 {
    (idx as f64 + 0.5) * cfg.voxel_size()
}

/// Voxel whose center is `c` (primitives are always placed on voxel centers).
pub fn center_voxel(cfg: &SceneConfig, c: Vector3<f64>) -> Option<[usize; 3]> {
    let v = cfg.voxels_per_meter();
    let mut out = [0; 3];
    for a in 0..3 {
        let f = c[a] * v - 0.5;
        let r = f.round();
        if (f - r).abs() > 1e-6 || r < 0.0 || r >= cfg.n as f64 {
            return None;
        }
        out[a] = r as usize;
    }
    Some(out)
}

fn place(rng: &mut ChaCha8Rng, cfg: &SceneConfig, scenario: Scenario, count: usize) -> Option<Vec<ScenePrimitive>> {
    let mut placed: Vec<ScenePrimitive> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut ok = false;
        for _ in 0..cfg.max_attempts {
            let mut prim = random_primitive(rng, scenario);
            let r = prim.bounding_radius();
            let valid: Vec<usize> =
                (0..cfg.n).filter(|&i| voxel_center(cfg, i) - r >= 0.0 && voxel_center(cfg, i) + r <= cfg.side_length).collect();
            if valid.is_empty() {
                continue;
            }
            prim.position = std::array::from_fn(|_| voxel_center(cfg, valid[rng.random_range(0..valid.len())]));
            let clear = placed.iter().all(|o| (o.center() - prim.center()).norm() >= o.bounding_radius() + r + cfg.gap);
            if clear {
                placed.push(prim);
                ok = true;
                break;
            }
        }
        if !ok {
            return None;
        }
    }
    Some(placed)
}

/// Candidate `(closing, approach)` axis pairs for grasping `prim`, preferred first.
fn grasp_axes(prim: &ScenePrimitive) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let mut out = Vec::new();
    match prim.shape {
        Shape::Sphere { .. } => {
            let axes: [Vector3<f64>; 3] = [Vector3::x(), Vector3::y(), Vector3::z()];
            for approach in [-Vector3::z(), Vector3::x(), -Vector3::x(), Vector3::y(), -Vector3::y(), Vector3::z()] {
                for c in axes {
                    if c.dot(&approach).abs() < 0.5 {
                        out.push((c, approach));
                    }
                }
            }
        }
        Shape::Box { half_extents: h } => {
            let m = prim.orientation.to_matrix();
            let close = (0..3).min_by(|&a, &b| h[a].total_cmp(&h[b])).expect("three axes");
            let closing = m.column(close).into_owned();
            for a in (0..3).filter(|&a| a != close) {
                for s in [1.0, -1.0] {
                    out.push((closing, m.column(a) * s));
                }
            }
            // most downward approach first
            out.sort_by(|x, y| x.1.z.total_cmp(&y.1.z));
        }
    }
    out
}

/// Opening needed to span `prim` along its grasp axis, in meters.
fn grasp_width(prim: &ScenePrimitive) -> f64 {
    match prim.shape {
        Shape::Sphere { radius } => 2.0 * radius,
        Shape::Box { half_extents: h } => 2.0 * h.iter().copied().fold(f64::INFINITY, f64::min),
    }
}

/// The first checker-approved grasp of primitive `index`, as a pose at its center.
pub fn canonical_grasp(scene: &ToyScene, index: usize, gripper: &Gripper) -> Option<GraspPose> {
    let prim = &scene.primitives[index];
    let c = prim.center();
    let width = grasp_width(prim);
    grasp_axes(prim).into_iter().find_map(|(closing, approach)| {
        let r = Quaternion::from_yz(closing, approach);
        let pose = GraspPose { position: [c.x, c.y, c.z], rotation: r.to_array(), width, quality: 1.0 };
        (grasp_target(&pose, &scene.primitives, gripper) == Some(index)).then_some(pose)
    })
}

/// Positive label at each primitive's center voxel; `None` entries mark primitives without a valid grasp.
pub fn positive_labels(scene: &ToyScene, cfg: &SceneConfig) -> Vec<Option<GraspLabel>> {
    let v = cfg.voxels_per_meter();
    (0..scene.primitives.len())
        .map(|i| {
            let pose = canonical_grasp(scene, i, &cfg.gripper)?;
            let idx = center_voxel(cfg, scene.primitives[i].center())?;
            Some(GraspLabel::positive(idx, pose.quaternion(), pose.width * v))
        })
        .collect()
}

/// Scene, volume and labels for `seed`; identical seeds give identical output.
pub fn gen_scene(seed: u64, scenario: Scenario, cfg: &SceneConfig) -> Result<GeneratedScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.max_attempts {
        let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
        let Some(primitives) = place(&mut rng, cfg, scenario, count) else { continue };
        let scene = ToyScene { seed, scenario, primitives };
        let positives: Option<Vec<GraspLabel>> = positive_labels(&scene, cfg).into_iter().collect();
        let Some(positives) = positives else { continue };
        let volume = scene.volume(cfg)?;
        let labels = negatives(&mut rng, &scene, &volume, &positives, cfg);
        return Ok(GeneratedScene { scene, volume, labels: positives.into_iter().chain(labels).collect() });
    }
    Err(Error::GenerationFailed { seed, reason: format!("no feasible scene in {} attempts", cfg.max_attempts) })
}

fn negatives(rng: &mut ChaCha8Rng, scene: &ToyScene, vol: &TsdfVolume, positives: &[GraspLabel], cfg: &SceneConfig) -> Vec<GraspLabel> {
    let n = cfg.n;
    let xf = cfg.transform();
    let mut free = Vec::new();
    let mut near = Vec::new();
    for (flat, &v) in vol.values.iter().enumerate() {
        let idx = TsdfVolume::unflatten(n, flat);
        if positives.iter().any(|l| l.index == idx) {
            continue;
        }
        if v == 1.0 {
            free.push(idx);
        } else {
            near.push(idx);
        }
    }
    free.shuffle(rng);
    near.shuffle(rng);
    let mut out: Vec<GraspLabel> = free.into_iter().take(cfg.free_negatives).map(GraspLabel::negative).collect();
    // A near-surface voxel is a negative only if the nearest object's grasp, moved there, fails.
    let mut taken = 0;
    for idx in near {
        if taken == cfg.surface_negatives {
            break;
        }
        let p = xf.voxel_to_world(idx, n).expect("index from the grid");
        let nearest = (0..positives.len())
            .min_by(|&a, &b| {
                let da = scene.primitives[a].signed_distance(p);
                let db = scene.primitives[b].signed_distance(p);
                da.total_cmp(&db)
            })
            .expect("scene has objects");
        let l = &positives[nearest];
        let pose = GraspPose { position: [p.x, p.y, p.z], rotation: l.r.to_array(), width: l.w / cfg.voxels_per_meter(), quality: 1.0 };
        if !success_check(&pose, scene, &cfg.gripper) {
            out.push(GraspLabel::negative(idx));
            taken += 1;
        }
    }
    out
}

/// Minimum of the (convex) signed distance of `prim` over the segment from `a` to `b`.
fn segment_distance(prim: &ScenePrimitive, a: Vector3<f64>, b: Vector3<f64>) -> f64 {
    let f = |t: f64| prim.signed_distance(a + (b - a) * t);
    let (mut lo, mut hi) = (0.0, 1.0);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..80 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    f(0.0).min(f(1.0)).min(f1).min(f2)
}

fn is_antipodal(prim: &ScenePrimitive, p: Vector3<f64>, closing: Vector3<f64>) -> bool {
    let cos_tol = ANTIPODAL_TOLERANCE_DEG.to_radians().cos();
    match prim.shape {
        Shape::Sphere { radius } => {
            // surface normals at the two contacts make angle asin(offset / r) with the line
            let d = prim.center() - p;
            let offset = (d - closing * d.dot(&closing)).norm();
            offset <= radius * ANTIPODAL_TOLERANCE_DEG.to_radians().sin()
        }
        Shape::Box { half_extents: h } => {
            let y = prim.orientation.conjugate().rotate(closing);
            let l = prim.to_local(p);
            let a = (0..3).max_by(|&i, &j| y[i].abs().total_cmp(&y[j].abs())).expect("three axes");
            if y[a].abs() < cos_tol {
                return false;
            }
            // the closing line must enter and leave through the two faces normal to axis a
            [h[a], -h[a]].iter().all(|&face| {
                let t = (face - l[a]) / y[a];
                let hit = l + y * t;
                (0..3).filter(|&b| b != a).all(|b| hit[b].abs() <= h[b])
            })
        }
    }
}

/// Index of the primitive a grasp would pick up, or `None` if the grasp fails.
pub fn grasp_target(pose: &GraspPose, prims: &[ScenePrimitive], gripper: &Gripper) -> Option<usize> {
    if !(pose.width <= gripper.max_width) || !(pose.width >= 0.0) {
        return None;
    }
    let r = pose.quaternion();
    if !((r.norm() - 1.0).abs() <= 1e-3) {
        return None;
    }
    let m = r.normalized().to_matrix();
    let closing = m.column(1).into_owned();
    let approach = m.column(2).into_owned();
    let p = Vector3::from(pose.position);

    let half = 0.5 * pose.width;
    let (a, b) = (p - closing * half, p + closing * half);
    let mut hit = None;
    for (i, prim) in prims.iter().enumerate() {
        if segment_distance(prim, a, b) <= 0.0 {
            if hit.is_some() {
                return None;
            }
            hit = Some(i);
        }
    }
    let target = hit?;

    let offset = 0.5 * (gripper.max_width + gripper.finger_thickness);
    let radius = 0.5 * gripper.finger_thickness;
    let back = approach * gripper.finger_length;
    let tips = [p - closing * offset, p + closing * offset];
    let capsules = [(tips[0], tips[0] - back), (tips[1], tips[1] - back), (tips[0] - back, tips[1] - back)];
    for prim in prims {
        if capsules.iter().any(|&(s, e)| segment_distance(prim, s, e) < radius) {
            return None;
        }
    }

    is_antipodal(&prims[target], p, closing).then_some(target)
}

pub fn success_check(pose: &GraspPose, scene: &ToyScene, gripper: &Gripper) -> bool {
    grasp_target(pose, &scene.primitives, gripper).is_some()
}
