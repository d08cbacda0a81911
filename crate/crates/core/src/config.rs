//! Model and training configuration, including the flat `key = value` file format.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys are rejected.
//! A `preset` key (`full`, `toy`, `tiny`) selects the base model before the
//! remaining keys override individual fields, regardless of line order.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::adam::AdamConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tsdf::{DEFAULT_SIDE_LENGTH, DEFAULT_TRUNC_VOXELS};

/// Transformer encoder hyper-parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Voxels per axis.
    pub n: usize,
    /// Patch edge `C`.
    pub patch: usize,
    /// Token width `K`.
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    /// 1-based block numbers whose outputs feed skip connections, ascending.
    pub taps: Vec<usize>,
    /// MLP hidden width as a multiple of `K`.
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    /// Patches per axis, `N / C`.
    pub fn grid(&self) -> usize {
        self.n / self.patch
    }

    /// Token count `M = (N/C)³`.
    pub fn tokens(&self) -> usize {
        self.grid().pow(3)
    }

    /// Flattened patch length `D' = C³`.
    pub fn patch_dim(&self) -> usize {
        self.patch.pow(3)
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.n == 0 || self.n % self.patch != 0 {
            return bad(format!("patch size {} must divide N = {}", self.patch, self.n));
        }
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 {
            return bad(format!("heads {} must divide width {}", self.heads, self.width));
        }
        if self.blocks == 0 || self.mlp_ratio == 0 {
            return bad("blocks and mlp_ratio must be positive".into());
        }
        if self.taps.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("taps {:?} must be strictly increasing", self.taps));
        }
        if self.taps.iter().any(|&t| t == 0 || t >= self.blocks) {
            return bad(format!("taps {:?} must lie in 1..{}", self.taps, self.blocks));
        }
        Ok(())
    }
}

/// Decoder hyper-parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderConfig {
    /// Output channels of each up-sampling stage; its length is `L'`.
    pub stage_channels: Vec<usize>,
    /// Channels of the convolved input-TSDF branch.
    pub tsdf_channels: usize,
    /// Per-voxel feature width `D`.
    pub features: usize,
}

impl DecoderConfig {
    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub side_length: f64,
    /// Truncation band in voxels.
    pub trunc_voxels: f64,
}

impl ModelConfig {
    /// N=40, C=8, K=768, H=12, L=12, taps 4 and 7, three decoder stages, D=16.
    pub fn full() -> Self {
        ModelConfig {
            encoder: EncoderConfig { n: 40, patch: 8, width: 768, heads: 12, blocks: 12, taps: vec![4, 7], mlp_ratio: 4 },
            decoder: DecoderConfig { stage_channels: vec![256, 128, 64], tsdf_channels: 16, features: 16 },
            side_length: DEFAULT_SIDE_LENGTH,
            trunc_voxels: DEFAULT_TRUNC_VOXELS,
        }
    }

    /// Desk-scale model used for training runs on a CPU.
    pub fn toy() -> Self {
        ModelConfig {
            encoder: EncoderConfig { n: 16, patch: 4, width: 64, heads: 4, blocks: 4, taps: vec![2, 3], mlp_ratio: 4 },
            decoder: DecoderConfig { stage_channels: vec![32, 16], tsdf_channels: 8, features: 8 },
            side_length: DEFAULT_SIDE_LENGTH,
            trunc_voxels: DEFAULT_TRUNC_VOXELS,
        }
    }

    /// Smallest meaningful model, for gradient checks. The truncation band is
    /// two voxels so that coarse scenes still contain free space.
    pub fn tiny() -> Self {
        ModelConfig {
            encoder: EncoderConfig { n: 8, patch: 4, width: 8, heads: 2, blocks: 2, taps: vec![1], mlp_ratio: 4 },
            decoder: DecoderConfig { stage_channels: vec![4, 4], tsdf_channels: 2, features: 4 },
            side_length: DEFAULT_SIDE_LENGTH,
            trunc_voxels: 2.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "toy" => Ok(Self::toy()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown preset `{}` (full, toy, tiny)", other))),
        }
    }

    pub fn n(&self) -> usize {
        self.encoder.n
    }

    pub fn voxel_size(&self) -> f64 {
        self.side_length / self.encoder.n as f64
    }

    pub fn trunc(&self) -> f64 {
        self.trunc_voxels * self.voxel_size()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let d = &self.decoder;
        let stages = d.stages();
        if stages == 0 {
            return Err(Error::Config("decoder needs at least one stage".into()));
        }
        if d.stage_channels.iter().any(|&c| c == 0) || d.tsdf_channels == 0 || d.features == 0 {
            return Err(Error::Config("decoder channel counts must be positive".into()));
        }
        if self.encoder.grid() << stages != self.encoder.n {
            return Err(Error::Config(format!(
                "{} stride-2 stages from a {}³ token grid do not reach N = {}",
                stages,
                self.encoder.grid(),
                self.encoder.n
            )));
        }
        if self.encoder.taps.len() > stages {
            return Err(Error::Config(format!("{} taps but only {} decoder stages", self.encoder.taps.len(), stages)));
        }
        if !(self.side_length > 0.0) || !(self.trunc_voxels > 0.0) {
            return Err(Error::Config("side_length and trunc_voxels must be positive".into()));
        }
        Ok(())
    }

    /// Tap (1-based block number) feeding decoder stage `stage`, deepest tap first.
    pub fn tap_for_stage(&self, stage: usize) -> Option<usize> {
        let taps = &self.encoder.taps;
        (stage < taps.len()).then(|| taps[taps.len() - 1 - stage])
    }

    /// Compact identity string: `N,C,K,H,L`.
    pub fn fingerprint(&self) -> String {
        let e = &self.encoder;
        format!("N={} C={} K={} H={} L={}", e.n, e.patch, e.width, e.heads, e.blocks)
    }

    /// Serialises the configuration into a small tensor stored alongside the weights.
    pub fn to_meta(&self) -> Tensor<f32> {
        let e = &self.encoder;
        let d = &self.decoder;
        let mut v: Vec<f32> = vec![1.0, e.n as f32, e.patch as f32, e.width as f32, e.heads as f32, e.blocks as f32, e.mlp_ratio as f32];
        v.push(e.taps.len() as f32);
        v.extend(e.taps.iter().map(|&t| t as f32));
        v.push(d.stages() as f32);
        v.extend(d.stage_channels.iter().map(|&c| c as f32));
        v.push(d.tsdf_channels as f32);
        v.push(d.features as f32);
        for x in [self.side_length, self.trunc_voxels] {
            let bits = x.to_bits();
            v.extend((0..4).rev().map(|i| ((bits >> (16 * i)) & 0xffff) as f32));
        }
        let len = v.len();
        Tensor::from_vec(&[len], v).expect("non-empty")
    }

    pub fn from_meta(t: &Tensor<f32>) -> Result<Self> {
        let v = t.data();
        let mut pos = 0;
        let mut next = || -> Result<f32> {
            let x = *v.get(pos).ok_or_else(|| Error::FormatMismatch("model metadata too short".into()))?;
            pos += 1;
            Ok(x)
        };
        if next()? != 1.0 {
            return Err(Error::FormatMismatch("unknown model metadata version".into()));
        }
        let mut int = || -> Result<usize> {
            let x = next()?;
            if x < 0.0 || x.fract() != 0.0 {
                return Err(Error::FormatMismatch(format!("non-integral metadata entry {}", x)));
            }
            Ok(x as usize)
        };
        let (n, patch, width, heads, blocks, mlp_ratio) = (int()?, int()?, int()?, int()?, int()?, int()?);
        let nt = int()?;
        let taps = (0..nt).map(|_| int()).collect::<Result<Vec<_>>>()?;
        let ns = int()?;
        let stage_channels = (0..ns).map(|_| int()).collect::<Result<Vec<_>>>()?;
        let tsdf_channels = int()?;
        let features = int()?;
        let mut real = || -> Result<f64> {
            let mut bits = 0u64;
            for _ in 0..4 {
                let h = int()?;
                if h > 0xffff {
                    return Err(Error::FormatMismatch("malformed real in model metadata".into()));
                }
                bits = (bits << 16) | h as u64;
            }
            Ok(f64::from_bits(bits))
        };
        let side_length = real()?;
        let trunc_voxels = real()?;
        let cfg = ModelConfig {
            encoder: EncoderConfig { n, patch, width, heads, blocks, taps, mlp_ratio },
            decoder: DecoderConfig { stage_channels, tsdf_channels, features },
            side_length,
            trunc_voxels,
        };
        cfg.validate().map_err(|e| Error::FormatMismatch(format!("invalid model metadata: {}", e)))?;
        Ok(cfg)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} taps={:?} stages={:?} D={}",
            self.fingerprint(),
            self.encoder.taps,
            self.decoder.stage_channels,
            self.decoder.features
        )
    }
}

/// Training-loop settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRunConfig {
    pub epochs: usize,
    /// Stop after this many optimiser steps (0 = run all epochs).
    pub max_steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig { epochs: 21, max_steps: 0, batch_size: 4, adam: AdamConfig::default(), seed: 0, checkpoint_every: 0 }
    }
}

impl TrainRunConfig {
    /// Full-scale defaults: learning rate 1e-4 with batches of 64.
    pub fn full_scale() -> Self {
        TrainRunConfig { batch_size: 64, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.adam.lr >= 0.0) || !(self.adam.eps > 0.0) {
            return Err(Error::Config("lr must be non-negative and eps positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Finite-difference checker settings.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub probes: usize,
    pub step: f64,
    pub op_tolerance: f64,
    pub model_tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { probes: 10, step: 1e-5, op_tolerance: 1e-4, model_tolerance: 1e-3 }
    }
}

/// Everything a config file can set.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainRunConfig,
    pub gradcheck: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { model: ModelConfig::toy(), train: TrainRunConfig::default(), gradcheck: GradCheckConfig::default() }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("`{}`: cannot parse `{}`", key, v)))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            pairs.push((k.trim().to_owned(), v.trim().to_owned()));
        }
        let mut cfg = RunConfig::default();
        if let Some((_, p)) = pairs.iter().rev().find(|(k, _)| k == "preset") {
            cfg.model = ModelConfig::preset(p)?;
        }
        for (k, v) in &pairs {
            let (k, v) = (k.as_str(), v.as_str());
            let m = &mut cfg.model;
            let t = &mut cfg.train;
            let g = &mut cfg.gradcheck;
            match k {
                "preset" => {}
                "n" => m.encoder.n = parse_num(k, v)?,
                "patch" => m.encoder.patch = parse_num(k, v)?,
                "width" => m.encoder.width = parse_num(k, v)?,
                "heads" => m.encoder.heads = parse_num(k, v)?,
                "blocks" => m.encoder.blocks = parse_num(k, v)?,
                "taps" => m.encoder.taps = parse_list(k, v)?,
                "mlp_ratio" => m.encoder.mlp_ratio = parse_num(k, v)?,
                "stage_channels" => m.decoder.stage_channels = parse_list(k, v)?,
                "tsdf_channels" => m.decoder.tsdf_channels = parse_num(k, v)?,
                "features" => m.decoder.features = parse_num(k, v)?,
                "side_length" => m.side_length = parse_num(k, v)?,
                "trunc_voxels" => m.trunc_voxels = parse_num(k, v)?,
                "epochs" => t.epochs = parse_num(k, v)?,
                "max_steps" => t.max_steps = parse_num(k, v)?,
                "batch_size" => t.batch_size = parse_num(k, v)?,
                "lr" => t.adam.lr = parse_num(k, v)?,
                "beta1" => t.adam.beta1 = parse_num(k, v)?,
                "beta2" => t.adam.beta2 = parse_num(k, v)?,
                "adam_eps" => t.adam.eps = parse_num(k, v)?,
                "seed" => t.seed = parse_num(k, v)?,
                "checkpoint_every" => t.checkpoint_every = parse_num(k, v)?,
                "probes" => g.probes = parse_num(k, v)?,
                "fd_step" => g.step = parse_num(k, v)?,
                "op_tolerance" => g.op_tolerance = parse_num(k, v)?,
                "model_tolerance" => g.model_tolerance = parse_num(k, v)?,
                other => return Err(Error::Config(format!("unknown key `{}`", other))),
            }
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        Self::parse(&text)
    }
}
