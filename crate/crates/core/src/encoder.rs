//! Patch serialisation and the pre-norm transformer encoder.
//!
//! Token sequences are `K×M` matrices: one column per patch, in serialisation
//! order `a·g² + b·g + c` for patch `(a, b, c)` of a `g³` patch grid.

use crate::autodiff::Var;
use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::params::BoundParams;
use crate::tensor::{Scalar, Tensor};
use crate::tsdf::TsdfVolume;

/// Flattens every non-overlapping `C³` patch into a column of a `C³×M` matrix.
///
/// Within a patch voxels are ordered `i`-major, `k`-fastest.
pub fn serialize_patches<T: Scalar>(vol: &TsdfVolume, patch: usize) -> Result<Tensor<T>> {
    let n = vol.n;
    if patch == 0 || n % patch != 0 {
        return Err(Error::Config(format!("patch size {} does not divide N = {}", patch, n)));
    }
    let g = n / patch;
    let m = g * g * g;
    let d = patch * patch * patch;
    let mut out = vec![T::zero(); d * m];
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let token = ((i / patch) * g + j / patch) * g + k / patch;
                let within = ((i % patch) * patch + j % patch) * patch + k % patch;
                out[within * m + token] = T::lit(vol.get(i, j, k) as f64);
            }
        }
    }
    Tensor::from_vec(&[d, m], out)
}

/// Inverse of [`serialize_patches`]: voxel values in `i`-major order.
pub fn deserialize_patches<T: Scalar>(patches: &Tensor<T>, n: usize, patch: usize) -> Result<Vec<f32>> {
    let (d, m) = patches.dims2()?;
    if patch == 0 || n % patch != 0 || d != patch.pow(3) || m != (n / patch).pow(3) {
        return Err(Error::Shape { op: "deserialize_patches", detail: format!("{:?} for N = {}, C = {}", patches.shape(), n, patch) });
    }
    let g = n / patch;
    let mut out = vec![0.0f32; n * n * n];
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let token = ((i / patch) * g + j / patch) * g + k / patch;
                let within = ((i % patch) * patch + j % patch) * patch + k % patch;
                out[(i * n + j) * n + k] = patches.data()[within * m + token].as_f64() as f32;
            }
        }
    }
    Ok(out)
}

/// `z⁽⁰⁾ = W·x' + P`: linear patch projection plus learned position table.
pub fn embed<'t, T: Scalar>(patches: Var<'t, T>, w: Var<'t, T>, pos: Var<'t, T>) -> Result<Var<'t, T>> {
    w.matmul(patches)?.add(pos)
}

/// One attention head evaluated for token `j`, returning a `K/H` vector.
///
/// `wk`, `wq`, `wv` are `(K/H)×K`; attention runs over all `M` tokens.
pub fn attention_head<T: Scalar>(z: &Tensor<T>, wk: &Tensor<T>, wq: &Tensor<T>, wv: &Tensor<T>, j: usize) -> Result<Vec<T>> {
    let (k, m) = z.dims2()?;
    let (dh, kk) = wq.dims2()?;
    if kk != k || wk.shape() != wq.shape() || wv.shape() != wq.shape() {
        return Err(Error::Shape {
            op: "attention_head",
            detail: format!("z {:?}, wq {:?}, wk {:?}, wv {:?}", z.shape(), wq.shape(), wk.shape(), wv.shape()),
        });
    }
    if j >= m {
        return Err(Error::OutOfRange(format!("token {} of {}", j, m)));
    }
    let zc = |col: usize| -> Vec<T> { (0..k).map(|r| z.data()[r * m + col]).collect() };
    let project = |w: &Tensor<T>, v: &[T]| -> Vec<T> { (0..dh).map(|r| (0..k).map(|c| w.data()[r * k + c] * v[c]).sum()).collect() };
    let q = project(wq, &zc(j));
    let scale = T::lit((dh as f64).sqrt());
    let keys: Vec<Vec<T>> = (0..m).map(|mm| project(wk, &zc(mm))).collect();
    let logits = Tensor::from_vec(&[m], keys.iter().map(|kv| q.iter().zip(kv).map(|(&a, &b)| a * b).sum::<T>() / scale).collect())?;
    let alpha = crate::nn::softmax_last_axis(&logits);
    let mut out = vec![T::zero(); dh];
    for (mm, &a) in alpha.data().iter().enumerate() {
        for (o, v) in out.iter_mut().zip(project(wv, &zc(mm))) {
            *o = *o + a * v;
        }
    }
    Ok(out)
}

/// Tape handles of one transformer block's parameters.
#[derive(Clone, Copy)]
pub struct BlockVars<'t, T: Scalar> {
    pub ln1_gain: Var<'t, T>,
    pub ln1_bias: Var<'t, T>,
    /// `K×K`; rows `[h·K/H, (h+1)·K/H)` are head `h`'s query projection.
    pub wq: Var<'t, T>,
    pub wk: Var<'t, T>,
    pub wv: Var<'t, T>,
    pub wo: Var<'t, T>,
    pub ln2_gain: Var<'t, T>,
    pub ln2_bias: Var<'t, T>,
    pub mlp_w1: Var<'t, T>,
    pub mlp_b1: Var<'t, T>,
    pub mlp_w2: Var<'t, T>,
    pub mlp_b2: Var<'t, T>,
}

impl<'t, T: Scalar> BlockVars<'t, T> {
    /// Looks up `enc.block{number}.*`.
    pub fn bind(p: &BoundParams<'t, T>, number: usize) -> Result<Self> {
        let v = |s: &str| p.var(&format!("enc.block{}.{}", number, s));
        Ok(BlockVars {
            ln1_gain: v("ln1.g")?,
            ln1_bias: v("ln1.b")?,
            wq: v("attn.wq")?,
            wk: v("attn.wk")?,
            wv: v("attn.wv")?,
            wo: v("attn.wo")?,
            ln2_gain: v("ln2.g")?,
            ln2_bias: v("ln2.b")?,
            mlp_w1: v("mlp.w1")?,
            mlp_b1: v("mlp.b1")?,
            mlp_w2: v("mlp.w2")?,
            mlp_b2: v("mlp.b2")?,
        })
    }
}

/// `z' = MSA(LN(z)) + z`.
pub fn msa_block<'t, T: Scalar>(z: Var<'t, T>, p: &BlockVars<'t, T>, heads: usize) -> Result<Var<'t, T>> {
    let width = z.shape()[0];
    if heads == 0 || width % heads != 0 {
        return Err(Error::Config(format!("{} heads do not divide width {}", heads, width)));
    }
    let dh = width / heads;
    let h = z.layernorm(p.ln1_gain, p.ln1_bias)?;
    let q = p.wq.matmul(h)?;
    let k = p.wk.matmul(h)?;
    let v = p.wv.matmul(h)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = q.slice0(head * dh, dh)?;
        let kh = k.slice0(head * dh, dh)?;
        let vh = v.slice0(head * dh, dh)?;
        // logits[j, m] = q_jᵀ k_m / √(K/H); softmax over m
        let alpha = qh.matmul_ex(true, kh, false)?.affine(scale, 0.0).softmax_last();
        outs.push(vh.matmul_ex(false, alpha, true)?);
    }
    let mixed = p.wo.matmul(Var::concat0(&outs)?)?;
    mixed.add(z)
}

/// `z' = MLP(LN(z)) + z`, with a GELU hidden layer.
pub fn ffn_block<'t, T: Scalar>(z: Var<'t, T>, p: &BlockVars<'t, T>) -> Result<Var<'t, T>> {
    let h = z.layernorm(p.ln2_gain, p.ln2_bias)?;
    let hidden = p.mlp_w1.matmul(h)?.add_channel_bias(p.mlp_b1)?.gelu();
    p.mlp_w2.matmul(hidden)?.add_channel_bias(p.mlp_b2)?.add(z)
}

/// Encoder outputs: the tapped block outputs (ascending block number) and the last block's output.
pub struct Encoded<'t, T: Scalar> {
    pub taps: Vec<(usize, Var<'t, T>)>,
    pub last: Var<'t, T>,
}

impl<'t, T: Scalar> Encoded<'t, T> {
    pub fn tap(&self, block: usize) -> Option<Var<'t, T>> {
        self.taps.iter().find(|(b, _)| *b == block).map(|(_, v)| *v)
    }
}

/// Serialise, embed and run all blocks, collecting the outputs of the tapped blocks.
pub fn encode<'t, T: Scalar>(vol: &TsdfVolume, cfg: &EncoderConfig, params: &BoundParams<'t, T>) -> Result<Encoded<'t, T>> {
    cfg.validate()?;
    if vol.n != cfg.n {
        return Err(Error::Config(format!("volume N = {} but encoder expects {}", vol.n, cfg.n)));
    }
    let w = params.var("enc.embed.W")?;
    let tape = w.tape();
    let patches = tape.constant(serialize_patches::<T>(vol, cfg.patch)?);
    let mut z = embed(patches, w, params.var("enc.embed.P")?)?;
    let mut taps = Vec::with_capacity(cfg.taps.len());
    for number in 1..=cfg.blocks {
        let b = BlockVars::bind(params, number)?;
        z = ffn_block(msa_block(z, &b, cfg.heads)?, &b)?;
        if cfg.taps.contains(&number) {
            taps.push((number, z));
        }
    }
    Ok(Encoded { taps, last: z })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn ramp(n: usize) -> TsdfVolume {
        let values = (0..n * n * n).map(|i| i as f32 / (n * n * n) as f32).collect();
        TsdfVolume::new(n, 0.3, 0.03, values).unwrap()
    }

    #[test]
    fn full_token_count() {
        let p = serialize_patches::<f32>(&TsdfVolume::filled(40, 0.3, 0.03, 0.5), 8).unwrap();
        assert_eq!(p.shape(), &[512, 125]);
    }

    #[test]
    fn constant_volume_constant_columns() {
        let p = serialize_patches::<f32>(&TsdfVolume::filled(8, 0.3, 0.03, 0.25), 4).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn round_trip_and_layout() {
        let vol = ramp(8);
        let p = serialize_patches::<f32>(&vol, 4).unwrap();
        assert_eq!(deserialize_patches(&p, 8, 4).unwrap(), vol.values);
        // voxel (5, 2, 7) lives in patch (1, 0, 1) = token 5, within-patch (1, 2, 3) = row 27
        assert_eq!(p.data()[27 * 8 + 5], vol.get(5, 2, 7));
    }

    #[test]
    fn indivisible_patch_rejected() {
        assert!(serialize_patches::<f32>(&ramp(8), 3).is_err());
    }

    #[test]
    fn zero_projection_gives_position_table() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[8, 3]));
        let w = tape.param(Tensor::zeros(&[4, 8]));
        let pos = Tensor::from_vec(&[4, 3], (0..12).map(|i| i as f64).collect()).unwrap();
        let p = tape.param(pos.clone());
        assert_eq!(*embed(x, w, p).unwrap().value(), pos);
    }

    #[test]
    fn one_hot_selects_weight_column() {
        let tape = Tape::<f64>::new();
        let mut x = Tensor::zeros(&[3, 2]);
        x.data_mut()[2 * 2 + 1] = 1.0; // column 1 = e_2
        let wt = Tensor::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let z = embed(tape.constant(x), tape.param(wt), tape.param(Tensor::zeros(&[2, 2]))).unwrap();
        assert_eq!(z.value().data()[1], 3.0);
        assert_eq!(z.value().data()[3], 6.0);
    }

    #[test]
    fn singleton_attention_returns_value() {
        let z = Tensor::<f64>::from_vec(&[2, 1], vec![0.3, -1.2]).unwrap();
        let wv = Tensor::from_vec(&[1, 2], vec![2.0, 1.0]).unwrap();
        let wk = Tensor::from_vec(&[1, 2], vec![7.0, 1.0]).unwrap();
        let out = attention_head(&z, &wk, &wk, &wv, 0).unwrap();
        assert!((out[0] - (0.6 - 1.2)).abs() < 1e-15);
    }

    #[test]
    fn two_token_attention() {
        let z = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let eye = Tensor::eye(2);
        let out = attention_head(&z, &eye, &eye, &eye, 0).unwrap();
        assert!((out[0] - 0.66986).abs() < 1e-4);
        assert!((out[1] - 0.33014).abs() < 1e-4);
    }

    #[test]
    fn identical_tokens_average_to_value() {
        let z = Tensor::<f64>::from_vec(&[2, 3], vec![0.5, 0.5, 0.5, -2.0, -2.0, -2.0]).unwrap();
        let wv = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let wk = Tensor::from_vec(&[2, 2], vec![0.1, -0.7, 1.3, 0.2]).unwrap();
        let out = attention_head(&z, &wk, &wk, &wv, 1).unwrap();
        assert!((out[0] - (0.5 - 4.0)).abs() < 1e-12);
        assert!((out[1] - (1.5 - 8.0)).abs() < 1e-12);
    }
}
