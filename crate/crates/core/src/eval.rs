//! Declutter evaluation: repeated grasp-and-remove rounds on generated scenes.

use serde::Serialize;

use crate::detect::{detect, dr, gsr, ExtractionConfig, GraspPose};
use crate::error::{Error, Result};
use crate::model::GraspNet;
use crate::quat::Quaternion;
use crate::scene::{gen_scene, grasp_target, positive_labels, Scenario, SceneConfig, ToyScene};
use crate::train::mix_seed;
use crate::tsdf::TsdfVolume;

/// Something that proposes grasps for the current scene, best first.
pub trait Agent {
    fn propose(&mut self, scene: &ToyScene, vol: &TsdfVolume, cfg: &SceneConfig) -> Result<Vec<GraspPose>>;
}

/// Network predictions thresholded into poses.
pub struct ModelAgent {
    pub net: GraspNet,
    pub extraction: ExtractionConfig,
}

impl Agent for ModelAgent {
    fn propose(&mut self, _: &ToyScene, vol: &TsdfVolume, cfg: &SceneConfig) -> Result<Vec<GraspPose>> {
        let maps = self.net.predict(vol)?;
        detect(&maps, &self.extraction, &cfg.transform())
    }
}

/// Replays the analytic ground-truth grasps of the current scene.
pub struct OracleAgent;

impl Agent for OracleAgent {
    fn propose(&mut self, scene: &ToyScene, _: &TsdfVolume, cfg: &SceneConfig) -> Result<Vec<GraspPose>> {
        let xf = cfg.transform();
        positive_labels(scene, cfg)
            .into_iter()
            .flatten()
            .map(|l| {
                let p = xf.voxel_to_world(l.index, cfg.n)?;
                Ok(GraspPose { position: [p.x, p.y, p.z], rotation: l.r.to_array(), width: l.w / xf.voxels_per_meter, quality: 1.0 })
            })
            .collect()
    }
}

/// Always grasps at the first empty voxel.
pub struct FreeSpaceAgent;

impl Agent for FreeSpaceAgent {
    fn propose(&mut self, _: &ToyScene, vol: &TsdfVolume, cfg: &SceneConfig) -> Result<Vec<GraspPose>> {
        let xf = cfg.transform();
        let Some(flat) = vol.values.iter().position(|&v| v == 1.0) else { return Ok(Vec::new()) };
        let p = xf.voxel_to_world(TsdfVolume::unflatten(vol.n, flat), vol.n)?;
        Ok(vec![GraspPose {
            position: [p.x, p.y, p.z],
            rotation: Quaternion::IDENTITY.to_array(),
            width: 0.5 * cfg.gripper.max_width,
            quality: 1.0,
        }])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub rounds: usize,
    pub seed: u64,
    pub scenario: Scenario,
    pub scene: SceneConfig,
    /// A round ends after this many failed grasps in a row.
    pub max_consecutive_failures: usize,
}

impl EvalConfig {
    pub fn new(scene: SceneConfig, rounds: usize, seed: u64) -> Self {
        EvalConfig { rounds, seed, scenario: Scenario::Pile, scene, max_consecutive_failures: 2 }
    }
}

/// Counts pooled over all rounds of one evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct EvalCounts {
    pub rounds: usize,
    pub grasps: usize,
    pub successes: usize,
    pub objects: usize,
    pub removed: usize,
}

impl EvalCounts {
    pub fn gsr(&self) -> Result<f64> {
        gsr(self.successes, self.grasps)
    }

    pub fn dr(&self) -> Result<f64> {
        dr(self.removed, self.objects)
    }

    /// Success rate, with an evaluation that attempted no grasps scoring 0.
    pub fn gsr_or_zero(&self) -> f64 {
        self.gsr().unwrap_or(0.0)
    }
}

/// Runs `cfg.rounds` declutter rounds; each round's scene depends only on `(seed, round)`.
pub fn eval_rounds(agent: &mut dyn Agent, cfg: &EvalConfig) -> Result<EvalCounts> {
    let mut c = EvalCounts::default();
    for round in 0..cfg.rounds {
        let mut scene = gen_scene(mix_seed(cfg.seed, 0xe7a1_0000 + round as u64), cfg.scenario, &cfg.scene)?.scene;
        c.rounds += 1;
        c.objects += scene.primitives.len();
        let mut failures = 0;
        while !scene.primitives.is_empty() && failures < cfg.max_consecutive_failures {
            let vol = scene.volume(&cfg.scene)?;
            let poses = agent.propose(&scene, &vol, &cfg.scene)?;
            let Some(best) = poses.first() else { break };
            c.grasps += 1;
            match grasp_target(best, &scene.primitives, &cfg.scene.gripper) {
                Some(i) => {
                    c.successes += 1;
                    c.removed += 1;
                    scene = scene.without(i);
                    failures = 0;
                }
                None => failures += 1,
            }
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub sd: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Config("no values to summarise".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Ok(Summary {
        mean,
        sd: var.sqrt(),
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        count: values.len(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub seeds: Vec<u64>,
    pub per_seed: Vec<EvalCounts>,
    /// Success rate over seeds; seeds without any attempted grasp count as 0.
    pub gsr: Summary,
    pub dr: Summary,
}

/// [`eval_rounds`] for seeds `seed, seed + 1, …`, summarised over seeds.
pub fn eval_repeats(agent: &mut dyn Agent, cfg: &EvalConfig, repeats: usize) -> Result<EvalReport> {
    let seeds: Vec<u64> = (0..repeats as u64).map(|r| cfg.seed + r).collect();
    let per_seed = seeds.iter().map(|&seed| eval_rounds(agent, &EvalConfig { seed, ..cfg.clone() })).collect::<Result<Vec<_>>>()?;
    let gsrs: Vec<f64> = per_seed.iter().map(EvalCounts::gsr_or_zero).collect();
    let drs = per_seed.iter().map(EvalCounts::dr).collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { seeds, gsr: summarize(&gsrs)?, dr: summarize(&drs)?, per_seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn cfg() -> EvalConfig {
        EvalConfig::new(SceneConfig::for_model(&ModelConfig::toy()), 10, 3)
    }

    #[test]
    fn oracle_clears_every_scene() {
        for scenario in [Scenario::Pile, Scenario::Packed] {
            let c = eval_rounds(&mut OracleAgent, &EvalConfig { scenario, ..cfg() }).unwrap();
            assert_eq!(c.gsr().unwrap(), 1.0);
            assert_eq!(c.dr().unwrap(), 1.0);
            assert_eq!(c.grasps, c.objects);
        }
    }

    #[test]
    fn free_space_agent_never_succeeds() {
        let c = eval_rounds(&mut FreeSpaceAgent, &cfg()).unwrap();
        assert_eq!(c.gsr().unwrap(), 0.0);
        assert_eq!(c.removed, 0);
        // two failures end each round
        assert_eq!(c.grasps, 2 * c.rounds);
    }

    #[test]
    fn silent_agent_has_no_success_rate() {
        struct Silent;
        impl Agent for Silent {
            fn propose(&mut self, _: &ToyScene, _: &TsdfVolume, _: &SceneConfig) -> Result<Vec<GraspPose>> {
                Ok(Vec::new())
            }
        }
        let c = eval_rounds(&mut Silent, &cfg()).unwrap();
        assert!(matches!(c.gsr(), Err(Error::NoGraspsPredicted)));
        assert_eq!(c.gsr_or_zero(), 0.0);
        assert_eq!(c.dr().unwrap(), 0.0);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let a = eval_repeats(&mut OracleAgent, &cfg(), 2).unwrap();
        let b = eval_repeats(&mut OracleAgent, &cfg(), 2).unwrap();
        assert_eq!(a.per_seed, b.per_seed);
        assert_eq!(a.seeds, vec![3, 4]);
    }

    #[test]
    fn summary_statistics() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(s.min <= s.mean && s.mean <= s.max);
        assert_eq!(summarize(&[7.0]).unwrap().sd, 0.0);
    }
}
