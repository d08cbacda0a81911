//! On-disk datasets and the deterministic training loop.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::AdamState;
use crate::config::{ModelConfig, TrainRunConfig};
use crate::error::{at_path, Error, Result};
use crate::model::GraspNet;
use crate::objective::{load_labels, save_labels, GraspLabel};
use crate::scene::{gen_scene, Scenario, SceneConfig};
use crate::tsdf::TsdfVolume;

/// SplitMix64 finaliser, used to derive independent seeds from `(seed, stream)`.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub volume: TsdfVolume,
    pub labels: Vec<GraspLabel>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Records that could not be read, with the reason.
    pub skipped: Vec<(String, String)>,
}

fn scene_stem(i: usize) -> String {
    format!("scene_{:05}", i)
}

/// Generates `count` scenes into `dir` as `scene_XXXXX.{tsdf,labels,json}`.
pub fn write_dataset(dir: &Path, scenario: Scenario, count: usize, seed: u64, cfg: &SceneConfig) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(at_path(dir))?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let g = gen_scene(mix_seed(seed, i as u64), scenario, cfg)?;
        let stem = dir.join(scene_stem(i));
        g.volume.save(stem.with_extension("tsdf"))?;
        save_labels(stem.with_extension("labels"), &g.labels)?;
        let json = serde_json::to_string_pretty(&g.scene).map_err(|e| Error::Dataset(e.to_string()))?;
        let json_path = stem.with_extension("json");
        fs::write(&json_path, json).map_err(at_path(&json_path))?;
        out.push(stem.with_extension("tsdf"));
    }
    Ok(out)
}

impl Dataset {
    /// Generates scenes in memory with the same seeding as [`write_dataset`].
    pub fn generate(scenario: Scenario, count: usize, seed: u64, cfg: &SceneConfig) -> Result<Self> {
        let samples = (0..count)
            .map(|i| {
                let g = gen_scene(mix_seed(seed, i as u64), scenario, cfg)?;
                Ok(Sample { name: scene_stem(i), volume: g.volume, labels: g.labels })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { samples, skipped: Vec::new() })
    }

    /// Reads every `*.tsdf` with a matching `.labels` file, skipping unreadable records.
    pub fn load(dir: &Path, n: usize) -> Result<Self> {
        let mut stems: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::Dataset(format!("cannot read {}: {}", dir.display(), e)))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "tsdf"))
            .collect();
        stems.sort();
        let mut data = Dataset::default();
        for path in stems {
            let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            match read_sample(&path, n) {
                Ok((volume, labels)) => data.samples.push(Sample { name, volume, labels }),
                Err(e) => {
                    warn!("skipping {}: {}", path.display(), e);
                    data.skipped.push((name, e.to_string()));
                }
            }
        }
        if data.samples.is_empty() {
            return Err(Error::Dataset(format!("no usable records in {} ({} skipped)", dir.display(), data.skipped.len())));
        }
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean loss of `net` over every sample.
    pub fn mean_loss(&self, net: &GraspNet) -> Result<f64> {
        let batch: Vec<_> = self.samples.iter().map(|s| (&s.volume, &s.labels[..])).collect();
        Ok(net.loss_and_grad(&batch)?.0)
    }
}

fn read_sample(path: &Path, n: usize) -> Result<(TsdfVolume, Vec<GraspLabel>)> {
    let volume = TsdfVolume::load(path)?;
    if volume.n != n {
        return Err(Error::SizeMismatch(format!("volume has N = {}, model expects {}", volume.n, n)));
    }
    let labels = load_labels(path.with_extension("labels"), n)?;
    if labels.is_empty() {
        return Err(Error::EmptyLabels);
    }
    Ok((volume, labels))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
}

pub struct TrainOutcome {
    pub net: GraspNet,
    pub adam: AdamState<f32>,
    pub log: Vec<LossRecord>,
}

/// Sample order for `epoch`, a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5eed_0000 + epoch as u64)));
    order
}

/// Number of optimiser steps the run will have taken when it finishes.
pub fn total_steps(run: &TrainRunConfig, samples: usize) -> u64 {
    let per_epoch = samples.div_ceil(run.batch_size) as u64;
    let all = per_epoch * run.epochs as u64;
    if run.max_steps == 0 {
        all
    } else {
        all.min(run.max_steps as u64)
    }
}

/// Runs (or resumes) training; `on_step` sees every update after it is applied.
///
/// Batch `b` of epoch `e` is always the same samples, so a run resumed from
/// the state after step `s` continues exactly as the unbroken run would.
pub fn train(
    data: &Dataset,
    model: &ModelConfig,
    run: &TrainRunConfig,
    resume: Option<(GraspNet, AdamState<f32>)>,
    mut on_step: impl FnMut(&LossRecord, &GraspNet, &AdamState<f32>) -> Result<()>,
) -> Result<TrainOutcome> {
    run.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let (mut net, mut adam) = match resume {
        Some((net, adam)) => {
            if &net.config != model {
                return Err(Error::Config(format!("checkpoint model ({}) differs from the configured one ({})", net.config, model)));
            }
            (net, adam)
        }
        None => {
            let net = GraspNet::new(model.clone(), run.seed)?;
            let adam = AdamState::new(&net.params, run.adam);
            (net, adam)
        }
    };
    adam.config = run.adam;
    let per_epoch = data.len().div_ceil(run.batch_size);
    let total = total_steps(run, data.len());
    let mut log = Vec::new();
    let mut order: Option<(usize, Vec<usize>)> = None;
    while adam.step < total {
        let step = adam.step as usize;
        let (epoch, pos) = (step / per_epoch, step % per_epoch);
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            order = Some((epoch, epoch_order(run.seed, epoch, data.len())));
        }
        let idx = &order.as_ref().expect("set above").1;
        let end = ((pos + 1) * run.batch_size).min(idx.len());
        let batch: Vec<_> =
            idx[pos * run.batch_size..end].iter().map(|&i| (&data.samples[i].volume, &data.samples[i].labels[..])).collect();
        let (loss, grad) = net.loss_and_grad(&batch)?;
        if !grad.all_finite() {
            return Err(Error::Numerical(format!("non-finite gradient at step {}", step + 1)));
        }
        adam.step(&mut net.params, &grad)?;
        if !net.params.all_finite() {
            return Err(Error::Numerical(format!("non-finite parameters after step {}", step + 1)));
        }
        let rec = LossRecord { step: adam.step, epoch, loss };
        on_step(&rec, &net, &adam)?;
        log.push(rec);
    }
    Ok(TrainOutcome { net, adam, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adam::AdamConfig;

    fn setup() -> (Dataset, ModelConfig) {
        let cfg = ModelConfig::tiny();
        let data = Dataset::generate(Scenario::Pile, 5, 1, &SceneConfig::for_model(&cfg)).unwrap();
        (data, cfg)
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let mut o = epoch_order(3, 2, 10);
        assert_eq!(o, epoch_order(3, 2, 10));
        assert_ne!(o, epoch_order(3, 3, 10));
        o.sort();
        assert_eq!(o, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (data, cfg) = setup();
        let run = TrainRunConfig { max_steps: 1, adam: AdamConfig { lr: 0.0, ..AdamConfig::default() }, ..TrainRunConfig::default() };
        let init = GraspNet::new(cfg.clone(), run.seed).unwrap();
        let out = train(&data, &cfg, &run, None, |_, _, _| Ok(())).unwrap();
        assert_eq!(out.log.len(), 1);
        assert!(out.log[0].loss.is_finite());
        assert_eq!(out.net.params, init.params);
    }

    #[test]
    fn step_count_respects_epochs_and_cap() {
        let (data, cfg) = setup();
        let run = TrainRunConfig { epochs: 2, batch_size: 2, ..TrainRunConfig::default() };
        assert_eq!(total_steps(&run, data.len()), 6);
        let out = train(&data, &cfg, &run, None, |_, _, _| Ok(())).unwrap();
        assert_eq!(out.log.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn resume_matches_unbroken_run() {
        let (data, cfg) = setup();
        let run = TrainRunConfig {
            epochs: 3,
            batch_size: 2,
            adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            ..TrainRunConfig::default()
        };
        let full = train(&data, &cfg, &run, None, |_, _, _| Ok(())).unwrap();
        let mut saved = None;
        let _ = train(&data, &cfg, &run, None, |r, net, adam| {
            if r.step == 4 {
                saved = Some(net.to_checkpoint(Some(adam)).encode()?);
            }
            Ok(())
        })
        .unwrap();
        let ck = crate::checkpoint::Checkpoint::decode(&saved.unwrap()).unwrap();
        let (net, adam) = GraspNet::from_checkpoint(&ck, run.adam).unwrap();
        let rest = train(&data, &cfg, &run, Some((net, adam.unwrap())), |_, _, _| Ok(())).unwrap();
        assert_eq!(rest.net.params, full.net.params);
        assert_eq!(rest.adam, full.adam);
        let tail: Vec<_> = full.log[4..].to_vec();
        assert_eq!(rest.log, tail);
    }

    #[test]
    fn corrupt_records_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::tiny();
        write_dataset(dir.path(), Scenario::Packed, 3, 4, &SceneConfig::for_model(&cfg)).unwrap();
        fs::write(dir.path().join("scene_00001.tsdf"), b"TSDF garbage").unwrap();
        fs::write(dir.path().join("scene_00002.labels"), "1 2 3\n").unwrap();
        let data = Dataset::load(dir.path(), cfg.n()).unwrap();
        assert_eq!(data.len(), 1);
        assert_eq!(data.skipped.len(), 2);
        fs::write(dir.path().join("scene_00000.tsdf"), b"").unwrap();
        assert!(matches!(Dataset::load(dir.path(), cfg.n()), Err(Error::Dataset(_))));
    }
}
