//! Dataset on disk → training → checkpoint → detection → evaluation.

use graspformer::adam::AdamConfig;
use graspformer::config::{ModelConfig, TrainRunConfig};
use graspformer::detect::{detect, ExtractionConfig, GraspPose};
use graspformer::eval::{eval_repeats, EvalConfig, ModelAgent};
use graspformer::scene::{Scenario, SceneConfig};
use graspformer::train::{train, write_dataset, Dataset};
use graspformer::{Checkpoint, Error, GraspNet};

#[test]
fn end_to_end_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let model = ModelConfig::tiny();
    let scene_cfg = SceneConfig::for_model(&model);
    let data_dir = dir.path().join("data");
    let files = write_dataset(&data_dir, Scenario::Packed, 4, 9, &scene_cfg).unwrap();
    assert_eq!(files.len(), 4);

    let data = Dataset::load(&data_dir, model.n()).unwrap();
    assert_eq!(data.len(), 4);
    assert!(data.skipped.is_empty());
    assert_eq!(data.samples[0].name, "scene_00000");
    let in_memory = Dataset::generate(Scenario::Packed, 4, 9, &scene_cfg).unwrap();
    for (a, b) in data.samples.iter().zip(&in_memory.samples) {
        assert_eq!(a.volume, b.volume);
        assert_eq!(a.labels.len(), b.labels.len());
    }

    let run = TrainRunConfig { max_steps: 3, adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() }, ..TrainRunConfig::default() };
    let mut seen = Vec::new();
    let out = train(&data, &model, &run, None, |r, _, _| {
        seen.push(r.step);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![1, 2, 3]);

    let path = dir.path().join("net.gfck");
    out.net.to_checkpoint(Some(&out.adam)).save(&path).unwrap();
    let (net, adam) = GraspNet::from_checkpoint(&Checkpoint::load(&path).unwrap(), run.adam).unwrap();
    assert_eq!(net, out.net);
    assert_eq!(adam.unwrap().step, 3);

    let vol = &data.samples[1].volume;
    let poses = detect(&net.predict(vol).unwrap(), &ExtractionConfig::with_threshold(0.2), &scene_cfg.transform()).unwrap();
    let json = serde_json::to_string(&poses).unwrap();
    let back: Vec<GraspPose> = serde_json::from_str(&json).unwrap();
    assert_eq!(back.len(), poses.len());
    for (a, b) in back.iter().zip(&poses) {
        let (fa, fb) = (
            [a.position.as_slice(), &a.rotation, &[a.width, a.quality]].concat(),
            [b.position.as_slice(), &b.rotation, &[b.width, b.quality]].concat(),
        );
        assert!(fa.iter().zip(&fb).all(|(x, y)| (x - y).abs() <= 1e-12 * y.abs().max(1.0)));
    }
    for p in &poses {
        assert!((p.quaternion().norm() - 1.0).abs() < 1e-5);
        assert!(p.width >= 0.0 && p.quality > 0.2);
        assert!(p.position.iter().all(|&c| (0.0..=scene_cfg.side_length).contains(&c)));
    }

    let report =
        eval_repeats(&mut ModelAgent { net, extraction: ExtractionConfig::default() }, &EvalConfig::new(scene_cfg, 3, 5), 2).unwrap();
    assert_eq!(report.seeds, vec![5, 6]);
    for s in [&report.gsr, &report.dr] {
        assert!(0.0 <= s.min && s.max <= 1.0);
    }
}

#[test]
fn corrupt_records_are_skipped_and_empty_directories_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = ModelConfig::tiny();
    write_dataset(dir.path(), Scenario::Pile, 3, 1, &SceneConfig::for_model(&model)).unwrap();
    std::fs::write(dir.path().join("scene_00001.tsdf"), b"TSDF\x01").unwrap();
    let data = Dataset::load(dir.path(), model.n()).unwrap();
    assert_eq!(data.len(), 2);
    assert_eq!(data.skipped.len(), 1);
    assert_eq!(data.skipped[0].0, "scene_00001");

    let other = ModelConfig::toy();
    assert!(matches!(Dataset::load(dir.path(), other.n()), Err(Error::Dataset(_))));
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(Dataset::load(empty.path(), model.n()), Err(Error::Dataset(_))));
}

#[test]
fn resume_requires_matching_model() {
    let model = ModelConfig::tiny();
    let data = Dataset::generate(Scenario::Pile, 2, 0, &SceneConfig::for_model(&model)).unwrap();
    let run = TrainRunConfig { max_steps: 1, ..TrainRunConfig::default() };
    let out = train(&data, &model, &run, None, |_, _, _| Ok(())).unwrap();
    let mut other = model.clone();
    other.decoder.features = 6;
    assert!(matches!(train(&data, &other, &run, Some((out.net, out.adam)), |_, _, _| Ok(())), Err(Error::Config(_))));
}
