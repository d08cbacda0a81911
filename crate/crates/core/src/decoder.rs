//! Deconvolution decoder with skip connections, input fusion, and grasp heads.
//!
//! Stage `s` (1-based in parameter names) maps `y` at extent `g·2ˢ⁻¹` to
//! `g·2ˢ`:
//!
//! ```text
//! up   = ReLU(DECONV₂(y))
//! skip = ReLU(DECONV₂(… ReLU(DECONV₂(Proj(z_tap)))))      (s deconvolutions)
//! y'   = ReLU(CONV₃(up ⊕ skip))                           (skip omitted if no tap)
//! ```
//!
//! where `DECONV₂` is kernel 2 / stride 2 and `CONV₃` kernel 3 / pad 1. The
//! full-resolution output is fused with the input as
//! `y = CONV₃(y_last ⊕ ReLU(CONV₃(x)))` (linear output), and the heads are
//! `Q = σ(CONV₃(y))`, `R = normalise(CONV₃(y))`, `W = softplus(CONV₃(y))`.

use crate::autodiff::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::BoundParams;
use crate::tensor::Scalar;

/// Reshapes a `K×M` token matrix to a `K×g×g×g` volume, `M = g³`.
pub fn project_tokens_to_volume<'t, T: Scalar>(z: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = z.shape();
    let (k, m) = match shape.as_slice() {
        [k, m] => (*k, *m),
        _ => return Err(Error::Shape { op: "project_tokens", detail: format!("expected K×M, got {:?}", shape) }),
    };
    let g = (m as f64).cbrt().round() as usize;
    if g * g * g != m {
        return Err(Error::Shape { op: "project_tokens", detail: format!("{} tokens is not a perfect cube", m) });
    }
    z.reshape(&[k, g, g, g])
}

/// Kernel plus per-channel bias.
#[derive(Clone, Copy)]
pub struct ConvVars<'t, T: Scalar> {
    pub w: Var<'t, T>,
    pub b: Var<'t, T>,
}

impl<'t, T: Scalar> ConvVars<'t, T> {
    pub fn bind(p: &BoundParams<'t, T>, prefix: &str) -> Result<Self> {
        Ok(ConvVars { w: p.var(&format!("{}.w", prefix))?, b: p.var(&format!("{}.b", prefix))? })
    }

    fn conv(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv3d(self.w, 1, 1)?.add_channel_bias(self.b)
    }

    fn up(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.deconv3d(self.w, 2, 0)?.add_channel_bias(self.b)
    }
}

pub struct StageVars<'t, T: Scalar> {
    pub up: ConvVars<'t, T>,
    /// Deconvolution chain applied to the projected tap, empty when the stage has no tap.
    pub skip: Vec<ConvVars<'t, T>>,
    pub fuse: ConvVars<'t, T>,
}

impl<'t, T: Scalar> StageVars<'t, T> {
    /// Looks up `dec.stage{number}.*` (1-based).
    pub fn bind(p: &BoundParams<'t, T>, cfg: &ModelConfig, number: usize) -> Result<Self> {
        let pre = format!("dec.stage{}", number);
        let skip = if cfg.tap_for_stage(number - 1).is_some() {
            (0..number).map(|i| ConvVars::bind(p, &format!("{}.skip{}", pre, i))).collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(StageVars { up: ConvVars::bind(p, &format!("{}.up", pre))?, skip, fuse: ConvVars::bind(p, &format!("{}.fuse", pre))? })
    }
}

fn extent(v: &Var<'_, impl Scalar>) -> Vec<usize> {
    v.shape()[1..].to_vec()
}

/// One up-sampling stage; `tap` is the encoder state routed to it, if any.
pub fn decode_stage<'t, T: Scalar>(y: Var<'t, T>, tap: Option<Var<'t, T>>, p: &StageVars<'t, T>) -> Result<Var<'t, T>> {
    let up = p.up.up(y)?.relu();
    let merged = match tap {
        Some(z) => {
            if p.skip.is_empty() {
                return Err(Error::Config("stage received a tap but has no skip path".into()));
            }
            let mut s = project_tokens_to_volume(z)?;
            for d in &p.skip {
                s = d.up(s)?.relu();
            }
            if extent(&s) != extent(&up) {
                return Err(Error::Shape {
                    op: "decode_stage",
                    detail: format!("skip path extent {:?} vs up-sampled extent {:?}", extent(&s), extent(&up)),
                });
            }
            Var::concat0(&[up, s])?
        }
        None => up,
    };
    Ok(p.fuse.conv(merged)?.relu())
}

/// `y = CONV(y_last ⊕ ReLU(CONV(x)))`, `D` output channels at full resolution.
pub fn final_fuse<'t, T: Scalar>(
    y_last: Var<'t, T>,
    x: Var<'t, T>,
    tsdf_branch: &ConvVars<'t, T>,
    out: &ConvVars<'t, T>,
) -> Result<Var<'t, T>> {
    if extent(&y_last) != extent(&x) {
        return Err(Error::Shape {
            op: "final_fuse",
            detail: format!("decoder extent {:?} vs input extent {:?}", extent(&y_last), extent(&x)),
        });
    }
    let cx = tsdf_branch.conv(x)?.relu();
    out.conv(Var::concat0(&[y_last, cx])?)
}

/// Head outputs on the tape, each flattened to `channels × N³`.
#[derive(Clone, Copy)]
pub struct MapVars<'t, T: Scalar> {
    pub quality: Var<'t, T>,
    pub rotation: Var<'t, T>,
    pub width: Var<'t, T>,
}

pub struct HeadVars<'t, T: Scalar> {
    pub q: ConvVars<'t, T>,
    pub r: ConvVars<'t, T>,
    pub w: ConvVars<'t, T>,
}

impl<'t, T: Scalar> HeadVars<'t, T> {
    pub fn bind(p: &BoundParams<'t, T>) -> Result<Self> {
        Ok(HeadVars { q: ConvVars::bind(p, "head.q")?, r: ConvVars::bind(p, "head.r")?, w: ConvVars::bind(p, "head.w")? })
    }
}

pub fn heads<'t, T: Scalar>(y: Var<'t, T>, p: &HeadVars<'t, T>) -> Result<MapVars<'t, T>> {
    let s: usize = y.shape()[1..].iter().product();
    let quality = p.q.conv(y)?.reshape(&[1, s])?.sigmoid();
    let rotation = p.r.conv(y)?.reshape(&[4, s])?.normalize_cols()?;
    let width = p.w.conv(y)?.reshape(&[1, s])?.softplus();
    Ok(MapVars { quality, rotation, width })
}

/// Quality, orientation and width per voxel, flattened `i`-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GraspMaps {
    pub n: usize,
    /// `N³` values in `[0, 1]`.
    pub quality: Vec<f32>,
    /// Channel-major `4×N³` unit quaternions (w, x, y, z).
    pub rotation: Vec<f32>,
    /// `N³` non-negative widths in voxel units.
    pub width: Vec<f32>,
}

impl GraspMaps {
    pub fn from_vars<T: Scalar>(n: usize, m: &MapVars<'_, T>) -> Self {
        let f = |v: &Var<'_, T>| v.value().data().iter().map(|x| x.as_f64() as f32).collect::<Vec<f32>>();
        GraspMaps { n, quality: f(&m.quality), rotation: f(&m.rotation), width: f(&m.width) }
    }

    pub fn voxels(&self) -> usize {
        self.n * self.n * self.n
    }

    pub fn quaternion(&self, flat: usize) -> [f32; 4] {
        let s = self.voxels();
        [self.rotation[flat], self.rotation[s + flat], self.rotation[2 * s + flat], self.rotation[3 * s + flat]]
    }

    /// Range, norm and sign invariants of the head outputs.
    pub fn check_invariants(&self, norm_tol: f64) -> Result<()> {
        let s = self.voxels();
        if self.quality.len() != s || self.width.len() != s || self.rotation.len() != 4 * s {
            return Err(Error::SizeMismatch(format!("maps do not match N = {}", self.n)));
        }
        if let Some((i, q)) = self.quality.iter().enumerate().find(|(_, q)| !(0.0..=1.0).contains(*q)) {
            return Err(Error::Numerical(format!("quality {} at voxel {} outside [0, 1]", q, i)));
        }
        if let Some((i, w)) = self.width.iter().enumerate().find(|(_, w)| !(**w >= 0.0)) {
            return Err(Error::Numerical(format!("width {} at voxel {} is negative", w, i)));
        }
        for v in 0..s {
            let n = self.quaternion(v).iter().map(|&c| (c as f64).powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > norm_tol {
                return Err(Error::Numerical(format!("quaternion norm {} at voxel {}", n, v)));
            }
        }
        Ok(())
    }
}
