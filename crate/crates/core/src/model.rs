//! The full network: parameter layout, initialisation, forward pass, loss and
//! checkpoint conversion.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::{AdamConfig, AdamState};
use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::decoder::{self, ConvVars, GraspMaps, HeadVars, MapVars, StageVars};
use crate::encoder;
use crate::error::{Error, Result};
use crate::objective::{batch_loss_var, GraspLabel};
use crate::params::{BoundParams, ParamSet};
use crate::tensor::{Scalar, Tensor};
use crate::tsdf::TsdfVolume;

const META_KEY: &str = "meta.model";
const ADAM_STEP_KEY: &str = "adam.step";

/// How a parameter tensor is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Name, shape and initialiser of every parameter, in a fixed order.
pub fn param_layout(cfg: &ModelConfig) -> Result<Vec<(String, Vec<usize>, Init)>> {
    cfg.validate()?;
    let e = &cfg.encoder;
    let d = &cfg.decoder;
    let (k, dp, m) = (e.width, e.patch_dim(), e.tokens());
    let hidden = e.mlp_ratio * k;
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    let linear = |fan_in: usize| Init::Normal(1.0 / (fan_in as f64).sqrt());
    let he = |fan_in: usize| Init::Normal((2.0 / fan_in as f64).sqrt());

    add("enc.embed.W".into(), vec![k, dp], linear(dp));
    add("enc.embed.P".into(), vec![k, m], Init::Normal(0.02));
    for b in 1..=e.blocks {
        let p = |s: &str| format!("enc.block{}.{}", b, s);
        add(p("ln1.g"), vec![k], Init::Ones);
        add(p("ln1.b"), vec![k], Init::Zeros);
        for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
            add(p(w), vec![k, k], linear(k));
        }
        add(p("ln2.g"), vec![k], Init::Ones);
        add(p("ln2.b"), vec![k], Init::Zeros);
        add(p("mlp.w1"), vec![hidden, k], linear(k));
        add(p("mlp.b1"), vec![hidden], Init::Zeros);
        add(p("mlp.w2"), vec![k, hidden], linear(hidden));
        add(p("mlp.b2"), vec![k], Init::Zeros);
    }

    let mut conv = |name: String, cout: usize, cin: usize, transposed: bool| {
        if transposed {
            // stride-2, kernel-2 deconvolution: each output voxel sees one input voxel per channel
            add(format!("{}.w", name), vec![cin, cout, 2, 2, 2], he(cin));
        } else {
            add(format!("{}.w", name), vec![cout, cin, 3, 3, 3], he(cin * 27));
        }
        add(format!("{}.b", name), vec![cout], Init::Zeros);
    };
    let mut cin = k;
    for (s, &c) in d.stage_channels.iter().enumerate() {
        let pre = format!("dec.stage{}", s + 1);
        conv(format!("{}.up", pre), c, cin, true);
        let mut fuse_in = c;
        if cfg.tap_for_stage(s).is_some() {
            for i in 0..=s {
                conv(format!("{}.skip{}", pre, i), c, if i == 0 { k } else { c }, true);
            }
            fuse_in += c;
        }
        conv(format!("{}.fuse", pre), c, fuse_in, false);
        cin = c;
    }
    conv("dec.tsdf".into(), d.tsdf_channels, 1, false);
    conv("dec.out".into(), d.features, cin + d.tsdf_channels, false);
    conv("head.q".into(), 1, d.features, false);
    conv("head.r".into(), 4, d.features, false);
    conv("head.w".into(), 1, d.features, false);
    Ok(out)
}

/// Seeded initial parameters; identical seeds give identical sets.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamSet<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    for (name, shape, init) in param_layout(cfg)? {
        let t = match init {
            Init::Zeros => Tensor::zeros(&shape),
            Init::Ones => Tensor::ones(&shape),
            Init::Normal(std) => Tensor::randn(&shape, std, &mut rng),
        };
        set.insert(name, t);
    }
    Ok(set)
}

/// Records the whole network on the tape of `params`.
pub fn forward<'t, T: Scalar>(cfg: &ModelConfig, vol: &TsdfVolume, params: &BoundParams<'t, T>) -> Result<MapVars<'t, T>> {
    let enc = encoder::encode(vol, &cfg.encoder, params)?;
    let mut y = decoder::project_tokens_to_volume(enc.last)?;
    for s in 0..cfg.decoder.stages() {
        let stage = StageVars::bind(params, cfg, s + 1)?;
        let tap = cfg.tap_for_stage(s).map(|b| enc.tap(b).expect("validated tap"));
        y = decoder::decode_stage(y, tap, &stage)?;
    }
    let tape = y.tape();
    let x: Var<'t, T> = tape.constant(vol.to_tensor::<T>());
    let y = decoder::final_fuse(y, x, &ConvVars::bind(params, "dec.tsdf")?, &ConvVars::bind(params, "dec.out")?)?;
    decoder::heads(y, &HeadVars::bind(params)?)
}

/// Mean loss over a batch of `(volume, labels)` pairs and its gradient.
///
/// Samples are differentiated one at a time and their gradients summed in
/// order, so the result does not depend on scheduling.
pub fn loss_and_grad<T: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<T>,
    batch: &[(&TsdfVolume, &[GraspLabel])],
) -> Result<(f64, ParamSet<T>)> {
    if batch.is_empty() {
        return Err(Error::EmptyLabels);
    }
    let mut total = 0.0;
    let mut grad: Option<ParamSet<T>> = None;
    for (vol, labels) in batch {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let maps = forward(cfg, vol, &bound)?;
        let loss = batch_loss_var(&maps, cfg.n(), labels)?;
        total += loss.value().item().as_f64();
        let g = bound.gradient(&tape, loss)?;
        grad = Some(match grad {
            None => g,
            Some(acc) => acc.add(&g)?,
        });
    }
    let scale = 1.0 / batch.len() as f64;
    let grad = grad.expect("non-empty batch").scale(T::lit(scale));
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("loss is {}", loss)));
    }
    Ok((loss, grad))
}

/// Network configuration together with its `f32` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GraspNet {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
}

impl GraspNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(GraspNet { config, params })
    }

    /// Wraps existing weights after checking them against the layout of `config`.
    pub fn from_params(config: ModelConfig, params: ParamSet<f32>) -> Result<Self> {
        let layout = param_layout(&config)?;
        if layout.len() != params.len() {
            return Err(Error::SizeMismatch(format!("{} parameter tensors, expected {}", params.len(), layout.len())));
        }
        for (name, shape, _) in &layout {
            let t = params.get(name).map_err(|_| Error::FormatMismatch(format!("missing parameter `{}`", name)))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::SizeMismatch(format!("`{}` has shape {:?}, expected {:?}", name, t.shape(), shape)));
            }
        }
        Ok(GraspNet { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Inference without recording gradients.
    pub fn predict(&self, vol: &TsdfVolume) -> Result<GraspMaps> {
        let tape = Tape::inference();
        let bound = self.params.bind(&tape);
        let maps = forward(&self.config, vol, &bound)?;
        let out = GraspMaps::from_vars(self.config.n(), &maps);
        if !out.quality.iter().chain(&out.rotation).chain(&out.width).all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite network output".into()));
        }
        Ok(out)
    }

    pub fn loss_and_grad(&self, batch: &[(&TsdfVolume, &[GraspLabel])]) -> Result<(f64, ParamSet<f32>)> {
        loss_and_grad(&self.config, &self.params, batch)
    }

    /// Weights, configuration and (optionally) optimiser state as a checkpoint.
    pub fn to_checkpoint(&self, adam: Option<&AdamState<f32>>) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push(META_KEY, self.config.to_meta());
        for (name, t) in self.params.iter() {
            ck.push(name, (**t).clone());
        }
        if let Some(a) = adam {
            ck.push(ADAM_STEP_KEY, step_tensor(a.step));
            for (name, t) in a.first.iter() {
                ck.push(format!("adam.m.{}", name), (**t).clone());
            }
            for (name, t) in a.second.iter() {
                ck.push(format!("adam.v.{}", name), (**t).clone());
            }
        }
        ck
    }

    /// Inverse of [`GraspNet::to_checkpoint`]; `adam` supplies the optimiser hyper-parameters.
    pub fn from_checkpoint(ck: &Checkpoint, adam: AdamConfig) -> Result<(Self, Option<AdamState<f32>>)> {
        let meta = ck.get(META_KEY).ok_or_else(|| Error::FormatMismatch("checkpoint has no model metadata".into()))?;
        let config = ModelConfig::from_meta(meta)?;
        let mut params = ParamSet::new();
        let mut first = ParamSet::new();
        let mut second = ParamSet::new();
        let mut step = None;
        for (name, t) in &ck.tensors {
            if name == META_KEY {
                continue;
            } else if name == ADAM_STEP_KEY {
                step = Some(read_step(t)?);
            } else if let Some(rest) = name.strip_prefix("adam.m.") {
                first.insert(rest, t.clone());
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                second.insert(rest, t.clone());
            } else {
                params.insert(name.clone(), t.clone());
            }
        }
        let net = GraspNet::from_params(config, params)?;
        let state = match step {
            None if first.is_empty() && second.is_empty() => None,
            None => return Err(Error::FormatMismatch("optimiser moments without a step counter".into())),
            Some(step) => {
                net.params.check_layout(&first, "checkpoint").map_err(|e| Error::FormatMismatch(e.to_string()))?;
                net.params.check_layout(&second, "checkpoint").map_err(|e| Error::FormatMismatch(e.to_string()))?;
                Some(AdamState { config: adam, step, first, second })
            }
        };
        Ok((net, state))
    }
}

// Step counters are stored as two 16-bit halves so every value is exact in f32.
fn step_tensor(step: u64) -> Tensor<f32> {
    let step = step.min(u32::MAX as u64) as u32;
    Tensor::from_vec(&[2], vec![(step >> 16) as f32, (step & 0xffff) as f32]).expect("two elements")
}

fn read_step(t: &Tensor<f32>) -> Result<u64> {
    match t.data() {
        [hi, lo] if hi.fract() == 0.0 && lo.fract() == 0.0 && *hi >= 0.0 && *lo >= 0.0 && *lo < 65536.0 => {
            Ok(((*hi as u64) << 16) | *lo as u64)
        }
        _ => Err(Error::FormatMismatch("malformed optimiser step counter".into())),
    }
}
