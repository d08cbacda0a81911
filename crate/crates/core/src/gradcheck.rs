//! Central finite-difference checks of tape gradients in 64-bit precision.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::config::{GradCheckConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::model::{init_params, loss_and_grad};
use crate::params::ParamSet;
use crate::scene::{gen_scene, Scenario, SceneConfig};
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so vanishing gradients compare absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub probes: usize,
    pub max_rel_error: f64,
    /// Tensor and flat index of the worst probe.
    pub worst: Option<(String, usize)>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Compares `analytic` against central differences of `f` at up to `cfg.probes`
/// distinct random entries of every tensor in `params`.
pub fn check_gradient(
    name: &str,
    params: &ParamSet<f64>,
    analytic: &ParamSet<f64>,
    f: impl Fn(&ParamSet<f64>) -> Result<f64>,
    cfg: &GradCheckConfig,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    params.check_layout(analytic, "gradcheck")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = cfg.step;
    let mut report = GradCheckReport { name: name.to_owned(), probes: 0, max_rel_error: 0.0, worst: None, tolerance };
    for (tensor, value) in params.iter() {
        let count = cfg.probes.min(value.numel());
        let mut picks = sample(&mut rng, value.numel(), count).into_vec();
        picks.sort_unstable();
        for i in picks {
            let shifted = |delta: f64| -> Result<f64> {
                let mut p = params.clone();
                p.get_mut(tensor)?.data_mut()[i] += delta;
                f(&p)
            };
            let numeric = (shifted(h)? - shifted(-h)?) / (2.0 * h);
            let a = analytic.get(tensor)?.data()[i];
            let err = relative_error(a, numeric);
            if !err.is_finite() {
                return Err(Error::Numerical(format!("{}: non-finite gradient at {}[{}]", name, tensor, i)));
            }
            report.probes += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((tensor.to_owned(), i));
            }
        }
    }
    Ok(report)
}

/// Checks `op` on the given inputs through the scalar `Σ op(x) ⊙ R` with fixed random `R`.
pub fn check_op<F>(name: &str, inputs: Vec<Tensor<f64>>, op: F, cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let params: ParamSet<f64> = inputs.into_iter().enumerate().map(|(i, t)| (format!("x{}", i), t)).collect();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    let shape = {
        let tape = Tape::new();
        let b = params.bind(&tape);
        let vars = names.iter().map(|n| b.var(n)).collect::<Result<Vec<_>>>()?;
        op(&vars)?.shape()
    };
    let weights = Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x77));
    let objective = |p: &ParamSet<f64>, grad: bool| -> Result<(f64, Option<ParamSet<f64>>)> {
        let tape = Tape::new();
        let b = p.bind(&tape);
        let vars = names.iter().map(|n| b.var(n)).collect::<Result<Vec<_>>>()?;
        let loss = op(&vars)?.mul(tape.constant(weights.clone()))?.sum();
        let g = if grad { Some(b.gradient(&tape, loss)?) } else { None };
        Ok((loss.value().item(), g))
    };
    let analytic = objective(&params, true)?.1.expect("requested");
    check_gradient(name, &params, &analytic, |p| Ok(objective(p, false)?.0), cfg, cfg.op_tolerance, seed)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Pushes entries at least `margin` away from zero, keeping their sign.
fn away_from_zero(t: Tensor<f64>, margin: f64) -> Tensor<f64> {
    t.map(|x| if x < 0.0 { x - margin } else { x + margin })
}

/// Every differentiable tape operation on small random inputs.
pub fn op_suite(cfg: &GradCheckConfig, seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor<f64>>, op: &dyn for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>| -> Result<()> {
        out.push(check_op(name, inputs, op, cfg, seed)?);
        Ok(())
    };
    run("matmul", vec![randn(&[3, 4], r), randn(&[4, 5], r)], &|v| v[0].matmul(v[1]))?;
    run("matmul_transposed", vec![randn(&[4, 3], r), randn(&[5, 4], r)], &|v| v[0].matmul_ex(true, v[1], true))?;
    run("add", vec![randn(&[3, 4], r), randn(&[3, 4], r)], &|v| v[0].add(v[1]))?;
    run("sub", vec![randn(&[3, 4], r), randn(&[3, 4], r)], &|v| v[0].sub(v[1]))?;
    run("mul", vec![randn(&[3, 4], r), randn(&[3, 4], r)], &|v| v[0].mul(v[1]))?;
    run("affine", vec![randn(&[3, 4], r)], &|v| Ok(v[0].affine(1.7, -0.3)))?;
    run("relu", vec![away_from_zero(randn(&[3, 4], r), 0.1)], &|v| Ok(v[0].relu()))?;
    run("gelu", vec![randn(&[3, 4], r)], &|v| Ok(v[0].gelu()))?;
    run("sigmoid", vec![randn(&[3, 4], r)], &|v| Ok(v[0].sigmoid()))?;
    run("softplus", vec![randn(&[3, 4], r)], &|v| Ok(v[0].softplus()))?;
    run("abs", vec![away_from_zero(randn(&[3, 4], r), 0.1)], &|v| Ok(v[0].abs()))?;
    run("square", vec![randn(&[3, 4], r)], &|v| Ok(v[0].square()))?;
    let a = randn(&[3, 4], r);
    let b = a.zip_map(&away_from_zero(randn(&[3, 4], r), 0.1), "minimum", |x, d| x + d)?;
    run("minimum", vec![a, b], &|v| v[0].minimum(v[1]))?;
    run("reshape", vec![randn(&[3, 4], r)], &|v| v[0].reshape(&[2, 6])?.square().reshape(&[12]))?;
    run("add_channel_bias", vec![randn(&[3, 2, 2, 2], r), randn(&[3], r)], &|v| v[0].add_channel_bias(v[1]))?;
    run("concat0", vec![randn(&[2, 3], r), randn(&[4, 3], r)], &|v| Var::concat0(&[v[0], v[1]]))?;
    run("slice0", vec![randn(&[5, 3], r)], &|v| v[0].slice0(1, 3))?;
    run("gather_cols", vec![randn(&[3, 6], r)], &|v| v[0].gather_cols(&[4, 0, 4, 2]))?;
    run("softmax_last", vec![randn(&[3, 5], r)], &|v| Ok(v[0].softmax_last()))?;
    run("layernorm", vec![randn(&[4, 6], r), randn(&[4], r), randn(&[4], r)], &|v| v[0].layernorm(v[1], v[2]))?;
    run("conv3d_pad", vec![randn(&[2, 4, 4, 4], r), randn(&[3, 2, 3, 3, 3], r)], &|v| v[0].conv3d(v[1], 1, 1))?;
    run("conv3d_stride", vec![randn(&[2, 4, 4, 4], r), randn(&[3, 2, 2, 2, 2], r)], &|v| v[0].conv3d(v[1], 2, 0))?;
    run("deconv3d", vec![randn(&[3, 2, 2, 2], r), randn(&[3, 2, 2, 2, 2], r)], &|v| v[0].deconv3d(v[1], 2, 0))?;
    run("deconv3d_pad", vec![randn(&[2, 3, 3, 3], r), randn(&[2, 3, 3, 3, 3], r)], &|v| v[0].deconv3d(v[1], 1, 1))?;
    run("normalize_cols", vec![randn(&[4, 5], r)], &|v| v[0].normalize_cols())?;
    run("sum_rows", vec![randn(&[3, 4], r)], &|v| v[0].sum_rows())?;
    run("sum", vec![randn(&[3, 4], r)], &|v| Ok(v[0].sum()))?;
    run("mean", vec![randn(&[3, 4], r)], &|v| Ok(v[0].mean()))?;
    let target = Tensor::from_vec(&[1, 6], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0])?;
    let p = Tensor::uniform(&[1, 6], 0.05, 0.95, r);
    run("bce", vec![p], &move |v| v[0].bce(&target, 1e-7))?;
    Ok(out)
}

/// Full-network loss on a generated scene, with every parameter entry nudged off its initial value.
pub fn model_check(model: &ModelConfig, cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // zero biases would put ReLU inputs exactly on the kink
    let mut params = init_params::<f64>(model, seed)?;
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let t = params.get_mut(&name)?;
        let noise = Tensor::randn(t.shape(), 0.05, &mut rng);
        t.add_assign(&noise);
    }
    let scene = gen_scene(seed, Scenario::Pile, &SceneConfig::for_model(model))?;
    let batch = [(&scene.volume, &scene.labels[..])];
    let (_, analytic) = loss_and_grad(model, &params, &batch)?;
    check_gradient("model_loss", &params, &analytic, |p| Ok(loss_and_grad(model, p, &batch)?.0), cfg, cfg.model_tolerance, seed)
}
