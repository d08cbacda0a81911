//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Leaves are
//! either parameters (gradients flow to them) or constants. Calling
//! [`Tape::gradient`] replays the tape backwards from a scalar objective.
//! Nodes that no parameter reaches carry no backward closure at all, so
//! inference on an untracked tape records values only.

use std::cell::RefCell;
use std::sync::Arc;

use crate::conv;
use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{matmul_ex, Scalar, Tensor};

type Grads<T> = Vec<Option<Tensor<T>>>;
type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Result<Grads<T>>>;

struct Node<T: Scalar> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    tracked: bool,
}

pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    record: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), record: true }
    }

    /// A tape that never records backward closures; parameters are treated as constants.
    pub fn inference() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), record: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, value: Arc<Tensor<T>>, tracked: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents: Vec::new(), backward: None, tracked: tracked && self.record });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A leaf whose gradient is requested.
    pub fn param(&self, value: impl Into<Arc<Tensor<T>>>) -> Var<'_, T> {
        self.leaf(value.into(), true)
    }

    pub fn constant(&self, value: impl Into<Arc<Tensor<T>>>) -> Var<'_, T> {
        self.leaf(value.into(), false)
    }

    fn push<'t>(&'t self, value: Tensor<T>, parents: &[Var<'t, T>], backward: BackwardFn<T>) -> Var<'t, T> {
        let mut nodes = self.nodes.borrow_mut();
        let tracked = parents.iter().any(|p| nodes[p.id].tracked);
        if cfg!(debug_assertions) && !value.all_finite() {
            log::warn!("non-finite value recorded on tape (shape {:?})", value.shape());
        }
        nodes.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if tracked { Some(backward) } else { None },
            tracked,
        });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// ∂objective/∂v for every `v` in `wrt`. Untracked entries receive zeros.
    pub fn gradient(&self, objective: Var<'_, T>, wrt: &[Var<'_, T>]) -> Result<Vec<Tensor<T>>> {
        let nodes = self.nodes.borrow();
        let out = &nodes[objective.id].value;
        if !out.is_scalar() {
            return Err(Error::NotScalar(out.shape().to_vec()));
        }
        let mut wanted = vec![false; objective.id + 1];
        for v in wrt {
            if v.id <= objective.id {
                wanted[v.id] = true;
            }
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=objective.id).map(|_| None).collect();
        grads[objective.id] = Some(Tensor::full(out.shape(), T::one()));
        for id in (0..=objective.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else { continue };
            let Some(g) = (if wanted[id] { grads[id].clone() } else { grads[id].take() }) else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].tracked).collect();
            let parent_grads = backward(&g, &needs)?;
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].tracked {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(wrt
            .iter()
            .map(|v| grads.get(v.id).and_then(|g| g.clone()).unwrap_or_else(|| Tensor::zeros(nodes[v.id].value.shape())))
            .collect())
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Self> {
        self.matmul_ex(false, other, false)
    }

    /// `op(self) · op(other)` with optional transposes.
    pub fn matmul_ex(self, ta: bool, other: Var<'t, T>, tb: bool) -> Result<Self> {
        let (a, b) = (self.value(), other.value());
        let out = matmul_ex(&a, ta, &b, tb)?;
        Ok(self.tape.push(
            out,
            &[self, other],
            Box::new(move |g, needs| {
                let da = if !needs[0] {
                    None
                } else if ta {
                    Some(matmul_ex(&b, tb, g, true)?)
                } else {
                    Some(matmul_ex(g, false, &b, !tb)?)
                };
                let db = if !needs[1] {
                    None
                } else if tb {
                    Some(matmul_ex(g, true, &a, ta)?)
                } else {
                    Some(matmul_ex(&a, !ta, g, false)?)
                };
                Ok(vec![da, db])
            }),
        ))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Self> {
        let out = self.value().zip_map(&other.value(), "add", |a, b| a + b)?;
        Ok(self.tape.push(out, &[self, other], Box::new(|g, _| Ok(vec![Some(g.clone()), Some(g.clone())]))))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Self> {
        let out = self.value().zip_map(&other.value(), "sub", |a, b| a - b)?;
        Ok(self.tape.push(out, &[self, other], Box::new(|g, _| Ok(vec![Some(g.clone()), Some(g.scale(-T::one()))]))))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Self> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, "mul", |x, y| x * y)?;
        Ok(self.tape.push(
            out,
            &[self, other],
            Box::new(move |g, needs| {
                let da = if needs[0] { Some(g.zip_map(&b, "mul", |x, y| x * y)?) } else { None };
                let db = if needs[1] { Some(g.zip_map(&a, "mul", |x, y| x * y)?) } else { None };
                Ok(vec![da, db])
            }),
        ))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(self, scale: f64, shift: f64) -> Self {
        let (s, c) = (T::lit(scale), T::lit(shift));
        let out = self.value().map(|x| s * x + c);
        self.tape.push(out, &[self], Box::new(move |g, _| Ok(vec![Some(g.scale(s))])))
    }

    /// Elementwise map with a pointwise derivative evaluated at the input.
    fn pointwise(self, f: impl Fn(T) -> T, df: impl Fn(T) -> T + 'static) -> Self {
        let x = self.value();
        let out = x.map(f);
        self.tape.push(out, &[self], Box::new(move |g, _| Ok(vec![Some(g.zip_map(&x, "pointwise", |gv, xv| gv * df(xv))?)])))
    }

    pub fn relu(self) -> Self {
        self.pointwise(|x| x.max(T::zero()), |x| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn gelu(self) -> Self {
        self.pointwise(nn::gelu, nn::gelu_grad)
    }

    pub fn sigmoid(self) -> Self {
        self.pointwise(nn::sigmoid, |x| {
            let s = nn::sigmoid(x);
            s * (T::one() - s)
        })
    }

    pub fn softplus(self) -> Self {
        self.pointwise(nn::softplus, nn::sigmoid)
    }

    /// `|x|`; the derivative at 0 is taken as 0.
    pub fn abs(self) -> Self {
        self.pointwise(
            |x| x.abs(),
            |x| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn square(self) -> Self {
        self.pointwise(|x| x * x, |x| x + x)
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn minimum(self, other: Var<'t, T>) -> Result<Self> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, "minimum", |x, y| if x <= y { x } else { y })?;
        Ok(self.tape.push(
            out,
            &[self, other],
            Box::new(move |g, _| {
                let mut da = g.clone();
                let mut db = g.clone();
                for ((pa, pb), (&x, &y)) in da.data_mut().iter_mut().zip(db.data_mut().iter_mut()).zip(a.data().iter().zip(b.data())) {
                    if x <= y {
                        *pb = T::zero();
                    } else {
                        *pa = T::zero();
                    }
                }
                Ok(vec![Some(da), Some(db)])
            }),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let orig = self.shape();
        let out = self.value().reshape(shape)?;
        Ok(self.tape.push(out, &[self], Box::new(move |g, _| Ok(vec![Some(g.reshape(&orig)?)]))))
    }

    /// Adds `bias[c]` to every element of channel `c` (axis 0).
    pub fn add_channel_bias(self, bias: Var<'t, T>) -> Result<Self> {
        let x = self.value();
        let b = bias.value();
        let c = x.shape()[0];
        if b.numel() != c {
            return Err(shape_err("add_channel_bias", format!("input {:?}, bias {:?}", x.shape(), b.shape())));
        }
        let per = x.numel() / c;
        let mut out = (*x).clone();
        for (ch, chunk) in out.data_mut().chunks_mut(per).enumerate() {
            let bv = b.data()[ch];
            chunk.iter_mut().for_each(|v| *v = *v + bv);
        }
        let bshape = b.shape().to_vec();
        Ok(self.tape.push(
            out,
            &[self, bias],
            Box::new(move |g, needs| {
                let db = if needs[1] {
                    let sums: Vec<T> = g.data().chunks(per).map(|ch| ch.iter().copied().sum()).collect();
                    Some(Tensor::from_vec(&bshape, sums)?)
                } else {
                    None
                };
                Ok(vec![Some(g.clone()), db])
            }),
        ))
    }

    /// Concatenation along axis 0; trailing extents must agree.
    pub fn concat0(parts: &[Var<'t, T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err("concat0", "no inputs".into()))?;
        let tail = first.shape()[1..].to_vec();
        let mut lead = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for p in parts {
            let v = p.value();
            if v.shape()[1..] != tail[..] {
                return Err(shape_err("concat0", format!("{:?} vs {:?}", first.shape(), v.shape())));
            }
            lead.push(v.shape()[0]);
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead.iter().sum()];
        shape.extend_from_slice(&tail);
        let per: usize = tail.iter().product();
        let out = Tensor::from_vec(&shape, data)?;
        Ok(first.tape.push(
            out,
            parts,
            Box::new(move |g, needs| {
                let mut off = 0;
                let mut grads = Vec::with_capacity(lead.len());
                for (i, &l) in lead.iter().enumerate() {
                    let mut s = vec![l];
                    s.extend_from_slice(&tail);
                    grads.push(if needs[i] { Some(Tensor::from_vec(&s, g.data()[off * per..(off + l) * per].to_vec())?) } else { None });
                    off += l;
                }
                Ok(grads)
            }),
        ))
    }

    /// Rows `[start, start+len)` along axis 0.
    pub fn slice0(self, start: usize, len: usize) -> Result<Self> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if len == 0 || start + len > shape[0] {
            return Err(shape_err("slice0", format!("[{}, {}) of {:?}", start, start + len, shape)));
        }
        let per = x.numel() / shape[0];
        let mut s = shape.clone();
        s[0] = len;
        let out = Tensor::from_vec(&s, x.data()[start * per..(start + len) * per].to_vec())?;
        Ok(self.tape.push(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut full = Tensor::zeros(&shape);
                full.data_mut()[start * per..(start + len) * per].copy_from_slice(g.data());
                Ok(vec![Some(full)])
            }),
        ))
    }

    pub fn softmax_last(self) -> Self {
        let y = Arc::new(nn::softmax_last_axis(&self.value()));
        let y2 = y.clone();
        let n = *y.shape().last().expect("rank >= 1");
        self.tape.push(
            (*y).clone(),
            &[self],
            Box::new(move |g, _| {
                let mut dx = g.clone();
                for (dr, yr) in dx.data_mut().chunks_mut(n).zip(y2.data().chunks(n)) {
                    let dot: T = dr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (d, &yv) in dr.iter_mut().zip(yr) {
                        *d = yv * (*d - dot);
                    }
                }
                Ok(vec![Some(dx)])
            }),
        )
    }

    /// Per-token layer normalisation of a `K×M` token matrix (see [`nn::layernorm`]).
    pub fn layernorm(self, gain: Var<'t, T>, bias: Var<'t, T>) -> Result<Self> {
        let gv = gain.value();
        let (out, cache) = nn::layernorm_cached(&self.value(), &gv, &bias.value())?;
        let gshape = gv.shape().to_vec();
        Ok(self.tape.push(
            out,
            &[self, gain, bias],
            Box::new(move |g, needs| {
                let (k, m) = g.dims2()?;
                let h = cache.normalized.data();
                let gd = g.data();
                let mut dgain = vec![T::zero(); k];
                let mut dbias = vec![T::zero(); k];
                for r in 0..k {
                    for j in 0..m {
                        dgain[r] = dgain[r] + gd[r * m + j] * h[r * m + j];
                        dbias[r] = dbias[r] + gd[r * m + j];
                    }
                }
                let dx = if needs[0] {
                    let kk = T::lit(k as f64);
                    let mut dx = vec![T::zero(); k * m];
                    for j in 0..m {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for r in 0..k {
                            let dh = gd[r * m + j] * gv.data()[r];
                            s1 = s1 + dh;
                            s2 = s2 + dh * h[r * m + j];
                        }
                        for r in 0..k {
                            let dh = gd[r * m + j] * gv.data()[r];
                            dx[r * m + j] = cache.inv_std[j] * (dh - s1 / kk - h[r * m + j] * s2 / kk);
                        }
                    }
                    Some(Tensor::from_vec(&[k, m], dx)?)
                } else {
                    None
                };
                Ok(vec![dx, Some(Tensor::from_vec(&gshape, dgain)?), Some(Tensor::from_vec(&gshape, dbias)?)])
            }),
        ))
    }

    pub fn conv3d(self, kernel: Var<'t, T>, stride: usize, pad: usize) -> Result<Self> {
        let (x, w) = (self.value(), kernel.value());
        let out = conv::conv3d(&x, &w, stride, pad)?;
        Ok(self.tape.push(
            out,
            &[self, kernel],
            Box::new(move |g, needs| {
                let (dx, dw) = conv::conv3d_backward(&x, &w, g, stride, pad, needs[0], needs[1])?;
                Ok(vec![dx, dw])
            }),
        ))
    }

    pub fn deconv3d(self, kernel: Var<'t, T>, stride: usize, pad: usize) -> Result<Self> {
        let (x, w) = (self.value(), kernel.value());
        let out = conv::deconv3d(&x, &w, stride, pad)?;
        Ok(self.tape.push(
            out,
            &[self, kernel],
            Box::new(move |g, needs| {
                let (dx, dw) = conv::deconv3d_backward(&x, &w, g, stride, pad, needs[0], needs[1])?;
                Ok(vec![dx, dw])
            }),
        ))
    }

    /// Normalises every column of an `R×S` matrix to unit length.
    ///
    /// An exactly-zero column maps to the first basis vector with zero gradient.
    pub fn normalize_cols(self) -> Result<Self> {
        let x = self.value();
        let (r, s) = x.dims2()?;
        let xd = x.data();
        let mut norms = vec![T::zero(); s];
        let mut out = vec![T::zero(); r * s];
        for j in 0..s {
            let n = (0..r).map(|i| xd[i * s + j] * xd[i * s + j]).sum::<T>().sqrt();
            norms[j] = n;
            if n > T::zero() {
                for i in 0..r {
                    out[i * s + j] = xd[i * s + j] / n;
                }
            } else {
                out[j] = T::one();
            }
        }
        let y = Arc::new(Tensor::from_vec(&[r, s], out)?);
        let y2 = y.clone();
        Ok(self.tape.push(
            (*y).clone(),
            &[self],
            Box::new(move |g, _| {
                let gd = g.data();
                let yd = y2.data();
                let mut dx = vec![T::zero(); r * s];
                for j in 0..s {
                    if norms[j] == T::zero() {
                        continue;
                    }
                    let dot: T = (0..r).map(|i| yd[i * s + j] * gd[i * s + j]).sum();
                    for i in 0..r {
                        dx[i * s + j] = (gd[i * s + j] - yd[i * s + j] * dot) / norms[j];
                    }
                }
                Ok(vec![Some(Tensor::from_vec(&[r, s], dx)?)])
            }),
        ))
    }

    /// Columns `idx` of an `R×S` matrix, in order.
    pub fn gather_cols(self, idx: &[usize]) -> Result<Self> {
        let x = self.value();
        let (r, s) = x.dims2()?;
        if idx.is_empty() {
            return Err(shape_err("gather_cols", "empty index list".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s) {
            return Err(Error::OutOfRange(format!("column {} of {:?}", bad, x.shape())));
        }
        let n = idx.len();
        let mut out = vec![T::zero(); r * n];
        for i in 0..r {
            for (c, &j) in idx.iter().enumerate() {
                out[i * n + c] = x.data()[i * s + j];
            }
        }
        let idx = idx.to_vec();
        Ok(self.tape.push(
            Tensor::from_vec(&[r, n], out)?,
            &[self],
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); r * s];
                for i in 0..r {
                    for (c, &j) in idx.iter().enumerate() {
                        dx[i * s + j] = dx[i * s + j] + g.data()[i * n + c];
                    }
                }
                Ok(vec![Some(Tensor::from_vec(&[r, s], dx)?)])
            }),
        ))
    }

    /// Sum over axis 0 of an `R×C` matrix, giving `1×C`.
    pub fn sum_rows(self) -> Result<Self> {
        let x = self.value();
        let (r, c) = x.dims2()?;
        let mut out = vec![T::zero(); c];
        for row in x.data().chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        Ok(self.tape.push(
            Tensor::from_vec(&[1, c], out)?,
            &[self],
            Box::new(move |g, _| {
                let mut dx = Vec::with_capacity(r * c);
                for _ in 0..r {
                    dx.extend_from_slice(g.data());
                }
                Ok(vec![Some(Tensor::from_vec(&[r, c], dx)?)])
            }),
        ))
    }

    pub fn sum(self) -> Self {
        let shape = self.shape();
        let out = Tensor::scalar(self.value().sum());
        self.tape.push(out, &[self], Box::new(move |g, _| Ok(vec![Some(Tensor::full(&shape, g.item()))])))
    }

    pub fn mean(self) -> Self {
        let n = self.value().numel();
        self.sum().affine(1.0 / n as f64, 0.0)
    }

    /// Binary cross-entropy of predictions in (0,1) against fixed targets.
    ///
    /// Predictions are clamped to `[clamp, 1 − clamp]` before the logarithm;
    /// clamped entries receive zero gradient.
    pub fn bce(self, target: &Tensor<T>, clamp: f64) -> Result<Self> {
        let p = self.value();
        p.expect_same_shape(target, "bce")?;
        let lo = T::lit(clamp);
        let hi = T::one() - lo;
        let out = p.zip_map(target, "bce", |pv, t| {
            let pc = pv.max(lo).min(hi);
            -(t * pc.ln() + (T::one() - t) * (T::one() - pc).ln())
        })?;
        let target = target.clone();
        Ok(self.tape.push(
            out,
            &[self],
            Box::new(move |g, _| {
                let mut dx =
                    p.zip_map(&target, "bce", |pv, t| if pv < lo || pv > hi { T::zero() } else { (pv - t) / (pv * (T::one() - pv)) })?;
                for (d, &gv) in dx.data_mut().iter_mut().zip(g.data()) {
                    *d = *d * gv;
                }
                Ok(vec![Some(dx)])
            }),
        ))
    }
}
