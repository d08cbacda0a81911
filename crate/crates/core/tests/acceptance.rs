//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use graspformer::autodiff::Tape;
use graspformer::config::{GradCheckConfig, ModelConfig, RunConfig, TrainRunConfig};
use graspformer::conv::{conv3d, deconv3d};
use graspformer::decoder::GraspMaps;
use graspformer::detect::{extract_candidates, ExtractionConfig};
use graspformer::encoder::{attention_head, deserialize_patches, ffn_block, msa_block, serialize_patches, BlockVars};
use graspformer::eval::{eval_rounds, EvalConfig, ModelAgent, OracleAgent};
use graspformer::gradcheck::{model_check, op_suite};
use graspformer::model::{forward, init_params, loss_and_grad, param_layout};
use graspformer::nn::layernorm;
use graspformer::objective::{grasp_loss, rotate_pi_wrist, rotation_loss, GraspLabel};
use graspformer::params::ParamSet;
use graspformer::scene::{gen_scene, Scenario, SceneConfig};
use graspformer::tensor::matmul;
use graspformer::train::{train, Dataset};
use graspformer::{Checkpoint, GraspNet, Quaternion, Tensor, TsdfVolume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_unit(rng: &mut ChaCha8Rng) -> Quaternion {
    loop {
        let q = Quaternion::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if q.norm() > 0.1 {
            return q.normalized();
        }
    }
}

fn shape_theorem() -> Check {
    let cfg = ModelConfig::full();
    ensure(cfg.encoder.tokens() == 125, || format!("M = {}", cfg.encoder.tokens()))?;
    let scene = gen_scene(1, Scenario::Pile, &SceneConfig::for_model(&cfg)).map_err(err)?;
    let params = init_params::<f32>(&cfg, 0).map_err(err)?;
    let start = Instant::now();
    let tape = Tape::inference();
    let maps = forward(&cfg, &scene.volume, &params.bind(&tape)).map_err(err)?;
    let elapsed = start.elapsed();
    let s = 40 * 40 * 40;
    let shapes = [maps.quality.shape(), maps.rotation.shape(), maps.width.shape()];
    ensure(shapes == [vec![1, s], vec![4, s], vec![1, s]], || format!("head shapes {:?}", shapes))?;
    let grid = GraspMaps::from_vars(40, &maps);
    grid.check_invariants(1e-4).map_err(err)?;
    ensure(elapsed < Duration::from_secs(60), || format!("forward took {:.1?}", elapsed))?;
    Ok(format!("{} parameters, Q 1x40^3, R 4x40^3, W 1x40^3 in {:.2?}", params.numel(), elapsed))
}

fn gradient_suite() -> Check {
    let start = Instant::now();
    let cfg = GradCheckConfig::default();
    ensure(cfg.probes >= 10, || format!("{} probes", cfg.probes))?;
    let ops = op_suite(&cfg, 7).map_err(err)?;
    let worst_op = ops.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).expect("ops");
    for r in &ops {
        ensure(r.passed() && r.tolerance <= 1e-4, || format!("op {}: rel error {:.2e}", r.name, r.max_rel_error))?;
    }
    let model = ModelConfig::tiny();
    let report = model_check(&model, &cfg, 3).map_err(err)?;
    let expected: usize = param_layout(&model).map_err(err)?.iter().map(|(_, s, _)| s.iter().product::<usize>().min(10)).sum();
    ensure(report.probes == expected, || format!("{} probes, expected {}", report.probes, expected))?;
    ensure(report.passed() && report.tolerance <= 1e-3, || format!("model rel error {:.2e} at {:?}", report.max_rel_error, report.worst))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(300), || format!("took {:.1?}", elapsed))?;
    Ok(format!(
        "{} ops (worst {} {:.1e}), tiny model {} probes max {:.1e}, {:.1?}",
        ops.len(),
        worst_op.name,
        worst_op.max_rel_error,
        report.probes,
        report.max_rel_error,
        elapsed
    ))
}

fn block_params(k: usize, hidden: usize, rng: &mut ChaCha8Rng, zero: bool) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    let mut t = |name: &str, shape: &[usize], std: f64| {
        let v = if zero { Tensor::zeros(shape) } else { Tensor::randn(shape, std, rng) };
        p.insert(format!("enc.block1.{}", name), v);
    };
    t("ln1.g", &[k], 1.0);
    t("ln1.b", &[k], 0.5);
    for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
        t(w, &[k, k], 1.0 / (k as f64).sqrt());
    }
    t("ln2.g", &[k], 1.0);
    t("ln2.b", &[k], 0.5);
    t("mlp.w1", &[hidden, k], 0.5);
    t("mlp.b1", &[hidden], 0.5);
    t("mlp.w2", &[k, hidden], 0.5);
    t("mlp.b2", &[k], 0.5);
    p
}

fn rows(t: &Tensor<f64>, start: usize, len: usize) -> Tensor<f64> {
    let cols = t.shape()[1];
    Tensor::from_vec(&[len, cols], t.data()[start * cols..(start + len) * cols].to_vec()).expect("row block")
}

fn attention_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let heads = rng.random_range(1..=4usize);
        let k = heads * rng.random_range(1..=4usize);
        let m = rng.random_range(1..=9usize);
        let z = Tensor::<f64>::randn(&[k, m], 1.0, &mut rng);
        let p = block_params(k, 2 * k, &mut rng, false);
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let vars = BlockVars::bind(&bound, 1).map_err(err)?;
        let out = msa_block(tape.constant(z.clone()), &vars, heads).map_err(err)?.value();

        let g = |s: &str| p.get(&format!("enc.block1.{}", s)).map(|t| (**t).clone()).map_err(err);
        let h = layernorm(&z, &g("ln1.g")?, &g("ln1.b")?).map_err(err)?;
        let dh = k / heads;
        let (wq, wk, wv, wo) = (g("attn.wq")?, g("attn.wk")?, g("attn.wv")?, g("attn.wo")?);
        let mut concat = vec![0.0; k * m];
        for head in 0..heads {
            let (q, kk, v) = (rows(&wq, head * dh, dh), rows(&wk, head * dh, dh), rows(&wv, head * dh, dh));
            for j in 0..m {
                for (r, val) in attention_head(&h, &kk, &q, &v, j).map_err(err)?.into_iter().enumerate() {
                    concat[(head * dh + r) * m + j] = val;
                }
            }
        }
        let mixed = matmul(&wo, &Tensor::from_vec(&[k, m], concat).map_err(err)?).map_err(err)?;
        let expected = mixed.zip_map(&z, "residual", |a, b| a + b).map_err(err)?;
        worst = worst.max(out.max_abs_diff(&expected));
    }
    ensure(worst <= 1e-6, || format!("max abs error {:.2e}", worst))?;
    Ok(format!("20 random configs, max abs error {:.1e}", worst))
}

fn structural_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (k, m) = (8, 6);
    let z = Tensor::<f64>::randn(&[k, m], 1.0, &mut rng);
    let p = block_params(k, 16, &mut rng, true);
    let tape = Tape::new();
    let bound = p.bind(&tape);
    let vars = BlockVars::bind(&bound, 1).map_err(err)?;
    let zc = tape.constant(z.clone());
    ensure(*msa_block(zc, &vars, 2).map_err(err)?.value() == z, || "zero MSA block is not the identity".into())?;
    ensure(*ffn_block(zc, &vars).map_err(err)?.value() == z, || "zero FFN block is not the identity".into())?;

    for (n, c) in [(8usize, 4usize), (40, 8), (16, 4)] {
        let values: Vec<f32> = (0..n * n * n).map(|_| rng.random_range(0.0f32..=1.0)).collect();
        let vol = TsdfVolume::new(n, 0.3, 0.03, values.clone()).map_err(err)?;
        let patches = serialize_patches::<f32>(&vol, c).map_err(err)?;
        ensure(deserialize_patches(&patches, n, c).map_err(err)? == values, || format!("patch round trip failed at N={} C={}", n, c))?;
    }

    let mut worst = 0.0f64;
    for (n, kernel, stride, pad) in [(5usize, 3usize, 1usize, 1usize), (4, 2, 2, 0), (6, 3, 1, 0), (6, 2, 2, 0)] {
        let (cin, cout) = (3, 2);
        let x = Tensor::<f64>::randn(&[cin, n, n, n], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[cout, cin, kernel, kernel, kernel], 1.0, &mut rng);
        let y = conv3d(&x, &w, stride, pad).map_err(err)?;
        let r = Tensor::<f64>::randn(y.shape(), 1.0, &mut rng);
        let back = deconv3d(&r, &w, stride, pad).map_err(err)?;
        ensure(back.shape() == x.shape(), || format!("adjoint shape {:?} vs {:?}", back.shape(), x.shape()))?;
        let (lhs, rhs) = (y.dot(&r), x.dot(&back));
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(1.0));
    }
    ensure(worst <= 1e-5, || format!("conv/deconv adjoint mismatch {:.2e}", worst))?;
    Ok(format!("zero blocks exact, patch round trips exact, adjoint error {:.1e}", worst))
}

fn loss_identities() -> Check {
    let r = Quaternion::new(0.5, 0.5, -0.5, 0.5);
    let label = GraspLabel::positive([0, 0, 0], r, 3.0);
    let l = grasp_loss(0.5, r, 3.0, &label).map_err(err)?;
    ensure((l - 2f64.ln()).abs() <= 1e-6, || format!("grasp_loss = {}", l))?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (a, b) = (random_unit(&mut rng), random_unit(&mut rng));
        let d = (rotation_loss(a, b).map_err(err)? - rotation_loss(a, rotate_pi_wrist(b)).map_err(err)?).abs();
        worst = worst.max(d);
    }
    ensure(worst <= 1e-12, || format!("wrist symmetry error {:.2e}", worst))?;

    let cfg = ModelConfig::tiny();
    let scene = gen_scene(4, Scenario::Pile, &SceneConfig::for_model(&cfg)).map_err(err)?;
    let negatives: Vec<GraspLabel> = scene.labels.iter().filter(|l| !l.is_positive()).cloned().collect();
    ensure(!negatives.is_empty(), || "scene has no negatives".into())?;
    let params = init_params::<f64>(&cfg, 1).map_err(err)?;
    let (_, grad) = loss_and_grad(&cfg, &params, &[(&scene.volume, &negatives[..])]).map_err(err)?;
    for name in ["head.r.w", "head.r.b", "head.w.w", "head.w.b"] {
        let g = grad.get(name).map_err(err)?;
        ensure(g.data().iter().all(|&v| v == 0.0), || format!("{} receives gradient with q = 0 everywhere", name))?;
    }
    ensure(grad.get("head.q.w").map_err(err)?.data().iter().any(|&v| v != 0.0), || "quality head has no gradient".into())?;
    Ok(format!("ln2 exact to {:.1e}, wrist symmetry {:.1e}, rotation/width heads untouched by q = 0", (l - 2f64.ln()).abs(), worst))
}

/// The toy preset with the ten-fold learning rate allowed at this scale.
fn toy_run(steps: usize) -> Result<RunConfig, String> {
    RunConfig::parse(&format!("preset = toy\nlr = 0.001\nbatch_size = 4\nepochs = 100000\nmax_steps = {}\nseed = 0\n", steps)).map_err(err)
}

fn toy_overfit() -> Check {
    let cfg = toy_run(500)?;
    let data = Dataset::generate(Scenario::Pile, 8, 21, &SceneConfig::for_model(&cfg.model)).map_err(err)?;
    let start = Instant::now();
    let initial = data.mean_loss(&GraspNet::new(cfg.model.clone(), cfg.train.seed).map_err(err)?).map_err(err)?;
    let out = train(&data, &cfg.model, &cfg.train, None, |_, _, _| Ok(())).map_err(err)?;
    let fin = data.mean_loss(&out.net).map_err(err)?;
    let elapsed = start.elapsed();
    ensure(out.adam.step == 500, || format!("ran {} steps", out.adam.step))?;
    ensure(fin < 0.1 * initial, || format!("loss {:.4} -> {:.4} (ratio {:.3})", initial, fin, fin / initial))?;
    ensure(elapsed < Duration::from_secs(600), || format!("took {:.1?}", elapsed))?;
    Ok(format!(
        "{} 8 scenes, loss {:.4} -> {:.5} ({:.2}%) in 500 steps, {:.1?}",
        cfg.model.fingerprint(),
        initial,
        fin,
        100.0 * fin / initial,
        elapsed
    ))
}

const BENCH_TRAIN_SCENES: usize = 100;
const BENCH_TRAIN_STEPS: usize = 1000;

fn toy_benchmark() -> Check {
    let cfg = toy_run(BENCH_TRAIN_STEPS)?;
    let scene_cfg = SceneConfig::for_model(&cfg.model);
    let data = Dataset::generate(Scenario::Pile, BENCH_TRAIN_SCENES, 77, &scene_cfg).map_err(err)?;
    let trained = train(&data, &cfg.model, &cfg.train, None, |_, _, _| Ok(())).map_err(err)?.net;
    let untrained = GraspNet::new(cfg.model.clone(), cfg.train.seed).map_err(err)?;
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for seed in 1000..1005u64 {
        let ec = EvalConfig::new(scene_cfg.clone(), 20, seed);
        let a = eval_rounds(&mut ModelAgent { net: trained.clone(), extraction: ExtractionConfig::default() }, &ec).map_err(err)?;
        let b = eval_rounds(&mut ModelAgent { net: untrained.clone(), extraction: ExtractionConfig::default() }, &ec).map_err(err)?;
        let (ga, gb) = (a.gsr_or_zero(), b.gsr_or_zero());
        lines.push(format!("{}:{:.2}>{:.2}", seed, ga, gb));
        if ga <= gb {
            failures.push(format!(
                "seed {}: trained {:.3} ({}/{}) vs untrained {:.3} ({}/{})",
                seed, ga, a.successes, a.grasps, gb, b.successes, b.grasps
            ));
        }
        let o = eval_rounds(&mut OracleAgent, &ec).map_err(err)?;
        if o.gsr().map_err(err)? != 1.0 || o.dr().map_err(err)? != 1.0 {
            failures.push(format!("seed {}: oracle {:?}", seed, o));
        }
    }
    ensure(failures.is_empty(), || failures.join("; "))?;
    Ok(format!("GSR trained>untrained per seed [{}], oracle GSR = DR = 1", lines.join(" ")))
}

fn random_maps(rng: &mut ChaCha8Rng) -> GraspMaps {
    let n = rng.random_range(1..=6usize);
    let s = n * n * n;
    // coarse levels force ties
    let quality = (0..s).map(|_| if rng.random_bool(0.3) { rng.random_range(0..=10) as f32 / 10.0 } else { rng.random::<f32>() }).collect();
    let mut rotation = vec![0.0f32; 4 * s];
    for v in 0..s {
        let q = random_unit(rng).to_array();
        for c in 0..4 {
            rotation[c * s + v] = q[c] as f32;
        }
    }
    let width = (0..s).map(|_| rng.random_range(0.0f32..10.0)).collect();
    GraspMaps { n, quality, rotation, width }
}

fn extraction_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut candidates = 0;
    for case in 0..100 {
        let maps = random_maps(&mut rng);
        let eps = rng.random_range(0.05..0.95);
        let got = extract_candidates(&maps, &ExtractionConfig::with_threshold(eps)).map_err(err)?;
        let flat = |c: &graspformer::detect::Candidate| (c.index[0] * maps.n + c.index[1]) * maps.n + c.index[2];
        let got_set: BTreeSet<usize> = got.iter().map(flat).collect();
        let scan: BTreeSet<usize> = (0..maps.voxels()).filter(|&v| maps.quality[v] as f64 > eps).collect();
        ensure(got_set == scan && got.len() == scan.len(), || format!("case {}: {:?} vs {:?}", case, got_set, scan))?;
        ensure(got.windows(2).all(|w| w[0].quality > w[1].quality || (w[0].quality == w[1].quality && flat(&w[0]) < flat(&w[1]))), || {
            format!("case {}: order violated", case)
        })?;
        let eps2 = rng.random_range(eps..0.99);
        let tighter: BTreeSet<usize> =
            extract_candidates(&maps, &ExtractionConfig::with_threshold(eps2)).map_err(err)?.iter().map(flat).collect();
        ensure(tighter.is_subset(&got_set), || format!("case {}: not monotone in threshold", case))?;
        candidates += got.len();
    }
    Ok(format!("100 random maps set-exact ({} candidates), monotone in threshold", candidates))
}

fn persistence() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let cfg = ModelConfig::tiny();
    let scene_cfg = SceneConfig::for_model(&cfg);
    let vol = gen_scene(2, Scenario::Packed, &scene_cfg).map_err(err)?.volume;
    let vpath = dir.path().join("a.tsdf");
    vol.save(&vpath).map_err(err)?;
    let bytes = std::fs::read(&vpath).map_err(err)?;
    let back = TsdfVolume::load(&vpath).map_err(err)?;
    ensure(back == vol && back.encode() == bytes, || "TSDF round trip differs".into())?;

    let data = Dataset::generate(Scenario::Pile, 6, 4, &scene_cfg).map_err(err)?;
    let run = TrainRunConfig { max_steps: 7, batch_size: 2, ..TrainRunConfig::default() };
    let full = train(&data, &cfg, &run, None, |_, _, _| Ok(())).map_err(err)?;

    let cpath = dir.path().join("mid.gfck");
    let half = TrainRunConfig { max_steps: 4, ..run.clone() };
    let first = train(&data, &cfg, &half, None, |_, _, _| Ok(())).map_err(err)?;
    first.net.to_checkpoint(Some(&first.adam)).save(&cpath).map_err(err)?;
    let ck_bytes = std::fs::read(&cpath).map_err(err)?;
    let ck = Checkpoint::load(&cpath).map_err(err)?;
    ensure(ck.encode().map_err(err)? == ck_bytes, || "checkpoint round trip differs".into())?;
    let (net, adam) = GraspNet::from_checkpoint(&ck, run.adam).map_err(err)?;
    let adam = adam.ok_or("optimiser state lost")?;
    ensure(net == first.net && adam.step == 4, || "restored state differs".into())?;
    let resumed = train(&data, &cfg, &run, Some((net, adam)), |_, _, _| Ok(())).map_err(err)?;

    let bits =
        |p: &ParamSet<f32>| p.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<u32>>();
    ensure(bits(&resumed.net.params) == bits(&full.net.params), || "resumed parameters differ from the unbroken run".into())?;
    ensure(resumed.adam == full.adam, || "resumed optimiser differs".into())?;
    let losses = |log: &[graspformer::train::LossRecord]| log.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
    ensure(losses(&resumed.log) == losses(&full.log[4..]), || "resumed loss log differs".into())?;
    Ok(format!("TSDF {} bytes and checkpoint {} bytes byte-exact; 4+3 resumed steps bit-identical to 7", bytes.len(), ck_bytes.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("shape theorem (full config forward)", shape_theorem),
        ("gradient suite", gradient_suite),
        ("attention oracle", attention_oracle),
        ("structural identities", structural_identities),
        ("loss identities", loss_identities),
        ("toy overfit", toy_overfit),
        ("toy benchmark", toy_benchmark),
        ("extraction oracle", extraction_oracle),
        ("persistence", persistence),
    ];
    let only: Vec<usize> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect()).unwrap_or_default();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let number = i + 1;
        if !only.is_empty() && !only.contains(&number) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        match result {
            Ok(detail) => println!("criterion {}: PASS  {} ({:.1?}): {}", number, name, start.elapsed(), detail),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL  {} ({:.1?}): {}", number, name, start.elapsed(), why);
            }
        }
    }
    if failed > 0 {
        println!("{} of {} criteria failed", failed, criteria.len());
        std::process::exit(1);
    }
}
