//! Reverse-mode differentiation over a recorded operation list.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to run its vector-Jacobian product. `backward` walks the list once in
//! reverse, so a node is always visited after every consumer of its value.

use crate::error::{shape_err, NumericsError, Result};
use crate::real::{gemm, MatView, Real};
use crate::tensor::{numel, split_axis, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Layer norm epsilon.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        shared: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Softplus(Var),
    L1(Var, Var),
    SmoothL1 {
        a: Var,
        b: Var,
        beta: T,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum {
        x: Var,
        axis: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Repeat {
        x: Var,
        n: usize,
    },
    ScaleBatch {
        x: Var,
        factors: Vec<T>,
    },
    Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Cross(Var, Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Acos(Var),
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A differentiation graph confined to one worker.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(shape_err(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn check_suffix(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(shape_err(
            op,
            format!("{b:?} is not a trailing sub-shape of {a:?}"),
        ));
    }
    Ok(())
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(NumericsError::Axis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    Ok(())
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// `tanh` through one `exp`; libm's `tanhf` dominates GELU cost otherwise.
fn tanh_exp<T: Real>(u: T) -> T {
    let e = (-(u + u).abs()).exp();
    let t = (T::one() - e) / (T::one() + e);
    if u < T::zero() {
        -t
    } else {
        t
    }
}

fn softplus<T: Real>(x: T) -> T {
    // max(x, 0) + log1p(exp(-|x|))
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn permute_data<T: Real>(src: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out_shape, out);
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    // Innermost run is copied with a strided loop.
    let last = rank - 1;
    let run = out_shape[last];
    let run_stride = out_strides[last];
    loop {
        for j in 0..run {
            out.push(src[offset + j * run_stride]);
        }
        // Advance the outer multi-index.
        let mut d = last;
        loop {
            if d == 0 {
                return (out_shape, out);
            }
            d -= 1;
            idx[d] += 1;
            offset += out_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= out_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient buffer populated by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    // ---- elementwise -------------------------------------------------

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same(op, av.shape(), bv.shape())?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `a + b` where `b`'s shape is a trailing sub-shape of `a`'s.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_suffix("add_bcast", av.shape(), bv.shape())?;
        let w = bv.len().max(1);
        let bd = bv.data();
        let data = av
            .data()
            .chunks(w)
            .flat_map(|c| c.iter().zip(bd).map(|(&x, &y)| x + y))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::AddBcast(a, b), rg))
    }

    /// `a * b` where `b`'s shape is a trailing sub-shape of `a`'s.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_suffix("mul_bcast", av.shape(), bv.shape())?;
        let w = bv.len().max(1);
        let bd = bv.data();
        let data = av
            .data()
            .chunks(w)
            .flat_map(|c| c.iter().zip(bd).map(|(&x, &y)| x * y))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MulBcast(a, b), rg))
    }

    /// Scales each last-axis row of `x` (`[.., n]`) by the matching entry of `s` (`[.., 1]`).
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let xs = xv.shape();
        let ss = sv.shape();
        if xs.is_empty()
            || ss.len() != xs.len()
            || ss[..xs.len() - 1] != xs[..xs.len() - 1]
            || ss[xs.len() - 1] != 1
        {
            return Err(shape_err("mul_col", format!("{xs:?} vs {ss:?}")));
        }
        let n = xs[xs.len() - 1];
        let sd = sv.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sd[i / n.max(1)])
            .collect();
        let t = Tensor::new(xs.to_vec(), data)?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(t, Op::MulCol(x, s), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg)
    }

    /// `x * c + d` with `d` a constant offset.
    pub fn affine(&mut self, x: Var, c: T, d: T) -> Result<Var> {
        let scaled = self.scale(x, c);
        if d == T::zero() {
            return Ok(scaled);
        }
        // A scalar is the empty trailing sub-shape of any tensor.
        let off = self.constant(Tensor::scalar(d));
        self.add_bcast(scaled, off)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
        let half = T::lit(0.5);
        let t = self
            .value(x)
            .map(|v| half * v * (T::one() + tanh_exp(c * (v + a * v * v * v))));
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.value(x).map(softplus);
        let rg = self.rg(&[x]);
        self.push(t, Op::Softplus(x), rg)
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let t = self.value(x).map(|v| v.max(lo).min(hi));
        let rg = self.rg(&[x]);
        self.push(t, Op::Clamp { x, lo, hi }, rg)
    }

    pub fn acos(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.acos());
        let rg = self.rg(&[x]);
        self.push(t, Op::Acos(x), rg)
    }

    /// Multiplies every slice `x[i, ..]` by the constant `factors[i]`.
    pub fn scale_batch(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 || xv.shape()[0] != factors.len() {
            return Err(shape_err(
                "scale_batch",
                format!("{:?} with {} factors", xv.shape(), factors.len()),
            ));
        }
        let w = xv.len() / factors.len().max(1);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * factors[i / w.max(1)])
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::ScaleBatch { x, factors }, rg))
    }

    // ---- linear algebra ----------------------------------------------

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[.., m, k]`; `b` is either `[k, n]` (shared across the
    /// leading axes of `a`) or `[.., k, n]` with the same leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ash, bsh) = (av.shape(), bv.shape());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(shape_err(
                "matmul",
                format!("operands must be at least 2-d, got {ash:?} and {bsh:?}"),
            ));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if k != kb {
            return Err(shape_err(
                "matmul",
                format!("inner extents differ: {ash:?} x {bsh:?} ({k} != {kb})"),
            ));
        }
        let lead = &ash[..ash.len() - 2];
        let batch = numel(lead);
        let shared = bsh.len() == 2;
        if !shared && bsh[..bsh.len() - 2] != *lead {
            return Err(shape_err(
                "matmul",
                format!("batch extents differ: {ash:?} x {bsh:?}"),
            ));
        }
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        if shared {
            gemm(
                av.data(),
                MatView::row_major(0, batch * m, k),
                bv.data(),
                MatView::row_major(0, k, n),
                T::zero(),
                &mut out,
                MatView::row_major(0, batch * m, n),
            );
        } else {
            for bi in 0..batch {
                gemm(
                    av.data(),
                    MatView::row_major(bi * m * k, m, k),
                    bv.data(),
                    MatView::row_major(bi * k * n, k, n),
                    T::zero(),
                    &mut out,
                    MatView::row_major(bi * m * n, m, n),
                );
            }
        }
        let t = Tensor::new(out_shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            t,
            Op::MatMul {
                a,
                b,
                shared,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// `x @ w + b` for `x: [.., in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bcast(y, b)
    }

    // ---- normalization / activation over an axis ---------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        check_axis("softmax", xv.shape(), axis)?;
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for l in 0..len {
                    mx = mx.max(src[base + l * inner]);
                }
                let mut s = T::zero();
                for l in 0..len {
                    let e = (src[base + l * inner] - mx).exp();
                    out[base + l * inner] = e;
                    s += e;
                }
                let inv = T::one() / s;
                for l in 0..len {
                    out[base + l * inner] *= inv;
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        check_axis("log_softmax", xv.shape(), axis)?;
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for l in 0..len {
                    mx = mx.max(src[base + l * inner]);
                }
                let mut s = T::zero();
                for l in 0..len {
                    s += (src[base + l * inner] - mx).exp();
                }
                let lse = mx + s.ln();
                for l in 0..len {
                    out[base + l * inner] = src[base + l * inner] - lse;
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LogSoftmax { x, axis }, rg))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias` (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let sh = xv.shape().to_vec();
        let d = *sh
            .last()
            .ok_or_else(|| shape_err("layer_norm", "scalar input"))?;
        check_same("layer_norm", &[d], self.value(gain).shape())?;
        check_same("layer_norm", &[d], self.value(bias).shape())?;
        let rows = xv.len() / d.max(1);
        let eps = T::lit(LN_EPS);
        let dn = T::from_usize(d).unwrap();
        let src = xv.data();
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
        let t = Tensor::new(sh, out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Divides each last-axis row by its Euclidean norm.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv
            .shape()
            .last()
            .ok_or_else(|| shape_err("normalize", "scalar input"))?;
        let rows = xv.len() / d.max(1);
        let src = xv.data();
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms.push(nrm);
            for j in 0..d {
                out[r * d + j] = row[j] / nrm;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Normalize { x, norms }, rg))
    }

    /// Row-wise 3-vector cross product over the last axis.
    pub fn cross(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same("cross", av.shape(), bv.shape())?;
        if av.shape().last() != Some(&3) {
            return Err(shape_err(
                "cross",
                format!("last axis must be 3, got {:?}", av.shape()),
            ));
        }
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![T::zero(); ad.len()];
        for r in 0..ad.len() / 3 {
            let (x, y) = (&ad[3 * r..3 * r + 3], &bd[3 * r..3 * r + 3]);
            out[3 * r] = x[1] * y[2] - x[2] * y[1];
            out[3 * r + 1] = x[2] * y[0] - x[0] * y[2];
            out[3 * r + 2] = x[0] * y[1] - x[1] * y[0];
        }
        let t = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Cross(a, b), rg))
    }

    // ---- reductions and losses ---------------------------------------

    fn reduce_axis(&self, op: &'static str, x: Var, axis: usize, mean: bool) -> Result<Tensor<T>> {
        let xv = self.value(x);
        check_axis(op, xv.shape(), axis)?;
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            let inv = T::one() / T::from_usize(len.max(1)).unwrap();
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        Tensor::new(shape, out)
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.reduce_axis("sum", x, axis, false)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Sum { x, axis }, rg))
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.reduce_axis("mean", x, axis, true)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Mean { x, axis }, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum_all(x);
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    /// Mean absolute difference, a scalar.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same("l1", av.shape(), bv.shape())?;
        let n = T::from_usize(av.len().max(1)).unwrap();
        let s = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y).abs())
            .sum::<T>()
            / n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::L1(a, b), rg))
    }

    /// Mean smoothed-L1 (Huber with threshold `beta`) of `a - b`, a scalar.
    pub fn smooth_l1(&mut self, a: Var, b: Var, beta: T) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same("smooth_l1", av.shape(), bv.shape())?;
        let n = T::from_usize(av.len().max(1)).unwrap();
        let half = T::lit(0.5);
        let s = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| {
                let d = (x - y).abs();
                if d < beta {
                    half * d * d / beta
                } else {
                    d - half * beta
                }
            })
            .sum::<T>()
            / n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::SmoothL1 { a, b, beta }, rg))
    }

    /// Selects `x[r, idx[r]]` along the last axis for every leading row `r`.
    pub fn pick(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let sh = xv.shape();
        let k = *sh.last().ok_or_else(|| shape_err("pick", "scalar input"))?;
        let rows = xv.len() / k.max(1);
        if idx.len() != rows {
            return Err(shape_err(
                "pick",
                format!("{rows} rows but {} indices", idx.len()),
            ));
        }
        let mut out = Vec::with_capacity(rows);
        for (r, &i) in idx.iter().enumerate() {
            if i >= k {
                return Err(NumericsError::Index {
                    op: "pick",
                    index: i,
                    extent: k,
                });
            }
            out.push(xv.data()[r * k + i]);
        }
        let t = Tensor::new(sh[..sh.len() - 1].to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Pick { x, idx }, rg))
    }

    // ---- layout ------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(shape_err(
                    "concat",
                    format!("{s:?} incompatible with {base:?} on axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let w = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(parts);
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, range: std::ops::Range<usize>) -> Result<Var> {
        let xv = self.value(x);
        check_axis("slice", xv.shape(), axis)?;
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        if range.start > range.end || range.end > len {
            return Err(shape_err(
                "slice",
                format!("range {range:?} outside extent {len} of {:?}", xv.shape()),
            ));
        }
        let w = range.end - range.start;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let s = (o * len + range.start) * inner;
            out.extend_from_slice(&xv.data()[s..s + w * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = w;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::Slice {
                x,
                axis,
                start: range.start,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(shape_err(
                "permute",
                format!("{perm:?} is not a permutation of rank {rank}"),
            ));
        }
        let (shape, data) = permute_data(xv.data(), xv.shape(), perm);
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(shape_err("transpose", format!("rank {r}")));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    /// Gathers slices `x[idx[j], ..]` along the first axis.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(shape_err("gather_rows", "scalar input"));
        }
        let rows = xv.shape()[0];
        let w = xv.len() / rows.max(1);
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in &idx {
            if i >= rows {
                return Err(NumericsError::Index {
                    op: "gather_rows",
                    index: i,
                    extent: rows,
                });
            }
            out.extend_from_slice(&xv.data()[i * w..(i + 1) * w]);
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = idx.len();
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::GatherRows { x, idx }, rg))
    }

    /// Stacks `n` copies of `x` along a new leading axis.
    pub fn repeat(&mut self, x: Var, n: usize) -> Var {
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * xv.len());
        for _ in 0..n {
            out.extend_from_slice(xv.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(xv.shape());
        let t = Tensor::new(shape, out).expect("repeat shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Repeat { x, n }, rg)
    }

    // ---- reverse sweep -----------------------------------------------

    /// Populates gradients of every `requires_grad` ancestor of `loss`.
    ///
    /// Gradients from repeated uses of a value are summed. Calling this twice
    /// on the same graph accumulates into the existing buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(NumericsError::NonScalarLoss(ls.to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let seed = self.grads[loss.0].get_or_insert_with(|| vec![T::zero()]);
        seed[0] += T::one();
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(
            self.grads[v.0]
                .get_or_insert_with(|| vec![T::zero(); n])
                .as_mut_slice(),
        )
    }

    fn acc_with(&mut self, v: Var, f: impl FnOnce(&mut [T], &[Node<T>])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(buf, &self.nodes);
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        // Detach the op so parents' buffers can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = self.acc(*b) {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = self.acc(*b) {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.acc_with(a, |ga, nodes| {
                    let bv = nodes[b.0].value.data();
                    for j in 0..ga.len() {
                        ga[j] += g[j] * bv[j];
                    }
                });
                self.acc_with(b, |gb, nodes| {
                    let av = nodes[a.0].value.data();
                    for j in 0..gb.len() {
                        gb[j] += g[j] * av[j];
                    }
                });
            }
            Op::AddBcast(a, b) => {
                if let Some(ga) = self.acc(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = self.acc(*b) {
                    let w = gb.len().max(1);
                    for (j, &y) in g.iter().enumerate() {
                        gb[j % w] += y;
                    }
                }
            }
            Op::MulBcast(a, b) => {
                let (a, b) = (*a, *b);
                self.acc_with(a, |ga, nodes| {
                    let bv = nodes[b.0].value.data();
                    let w = bv.len().max(1);
                    for j in 0..ga.len() {
                        ga[j] += g[j] * bv[j % w];
                    }
                });
                self.acc_with(b, |gb, nodes| {
                    let av = nodes[a.0].value.data();
                    let w = gb.len().max(1);
                    for j in 0..g.len() {
                        gb[j % w] += g[j] * av[j];
                    }
                });
            }
            Op::MulCol(x, s) => {
                let (x, s) = (*x, *s);
                let n = *self.nodes[x.0].value.shape().last().unwrap();
                self.acc_with(x, |gx, nodes| {
                    let sv = nodes[s.0].value.data();
                    for j in 0..gx.len() {
                        gx[j] += g[j] * sv[j / n.max(1)];
                    }
                });
                self.acc_with(s, |gs, nodes| {
                    let xv = nodes[x.0].value.data();
                    for j in 0..g.len() {
                        gs[j / n.max(1)] += g[j] * xv[j];
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                if let Some(gx) = self.acc(*x) {
                    gx.iter_mut().zip(g).for_each(|(v, &y)| *v += y * c);
                }
            }
            &Op::MatMul {
                a,
                b,
                shared,
                batch,
                m,
                k,
                n,
            } => {
                self.acc_with(a, |ga, nodes| {
                    let bv = nodes[b.0].value.data();
                    if shared {
                        // dA = dC @ B^T
                        gemm(
                            g,
                            MatView::row_major(0, batch * m, n),
                            bv,
                            MatView::row_major(0, k, n).t(),
                            T::one(),
                            ga,
                            MatView::row_major(0, batch * m, k),
                        );
                    } else {
                        for bi in 0..batch {
                            gemm(
                                g,
                                MatView::row_major(bi * m * n, m, n),
                                bv,
                                MatView::row_major(bi * k * n, k, n).t(),
                                T::one(),
                                ga,
                                MatView::row_major(bi * m * k, m, k),
                            );
                        }
                    }
                });
                self.acc_with(b, |gb, nodes| {
                    let av = nodes[a.0].value.data();
                    if shared {
                        // dB = A^T @ dC
                        gemm(
                            av,
                            MatView::row_major(0, batch * m, k).t(),
                            g,
                            MatView::row_major(0, batch * m, n),
                            T::one(),
                            gb,
                            MatView::row_major(0, k, n),
                        );
                    } else {
                        for bi in 0..batch {
                            gemm(
                                av,
                                MatView::row_major(bi * m * k, m, k).t(),
                                g,
                                MatView::row_major(bi * m * n, m, n),
                                T::one(),
                                gb,
                                MatView::row_major(bi * k * n, k, n),
                            );
                        }
                    }
                });
            }
            &Op::Softmax { x, axis } => {
                let y = self.nodes[i].value.data().to_vec();
                let (outer, len, inner) = split_axis(self.nodes[i].value.shape(), axis);
                if let Some(gx) = self.acc(x) {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let mut dot = T::zero();
                            for l in 0..len {
                                dot += g[base + l * inner] * y[base + l * inner];
                            }
                            for l in 0..len {
                                let p = base + l * inner;
                                gx[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            &Op::LogSoftmax { x, axis } => {
                let y = self.nodes[i].value.data().to_vec();
                let (outer, len, inner) = split_axis(self.nodes[i].value.shape(), axis);
                if let Some(gx) = self.acc(x) {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let mut gs = T::zero();
                            for l in 0..len {
                                gs += g[base + l * inner];
                            }
                            for l in 0..len {
                                let p = base + l * inner;
                                gx[p] += g[p] - y[p].exp() * gs;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.nodes[gain.0].value.len();
                let rows = rstd.len();
                let gainv = self.nodes[gain.0].value.data().to_vec();
                if let Some(gg) = self.acc(*gain) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(*bias) {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(gx) = self.acc(*x) {
                    let dn = T::from_usize(d).unwrap();
                    for r in 0..rows {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let gh = g[r * d + j] * gainv[j];
                            m1 += gh;
                            m2 += gh * xhat[r * d + j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            let gh = g[r * d + j] * gainv[j];
                            gx[r * d + j] += rstd[r] * (gh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let x = *x;
                let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                self.acc_with(x, |gx, nodes| {
                    let xv = nodes[x.0].value.data();
                    for j in 0..gx.len() {
                        let v = xv[j];
                        let t = tanh_exp(c * (v + a * v * v * v));
                        let dt = (T::one() - t * t) * c * (T::one() + three * a * v * v);
                        gx[j] += g[j] * (half * (T::one() + t) + half * v * dt);
                    }
                });
            }
            Op::Softplus(x) => {
                let x = *x;
                self.acc_with(x, |gx, nodes| {
                    let xv = nodes[x.0].value.data();
                    for j in 0..gx.len() {
                        gx[j] += g[j] * sigmoid(xv[j]);
                    }
                });
            }
            Op::L1(a, b) => {
                let (a, b) = (*a, *b);
                let n = T::from_usize(self.nodes[a.0].value.len().max(1)).unwrap();
                let s: Vec<T> = self.nodes[a.0]
                    .value
                    .data()
                    .iter()
                    .zip(self.nodes[b.0].value.data())
                    .map(|(&x, &y)| sign(x - y) * g[0] / n)
                    .collect();
                if let Some(ga) = self.acc(a) {
                    ga.iter_mut().zip(&s).for_each(|(v, &d)| *v += d);
                }
                if let Some(gb) = self.acc(b) {
                    gb.iter_mut().zip(&s).for_each(|(v, &d)| *v -= d);
                }
            }
            &Op::SmoothL1 { a, b, beta } => {
                let n = T::from_usize(self.nodes[a.0].value.len().max(1)).unwrap();
                let s: Vec<T> = self.nodes[a.0]
                    .value
                    .data()
                    .iter()
                    .zip(self.nodes[b.0].value.data())
                    .map(|(&x, &y)| {
                        let d = x - y;
                        let dd = if d.abs() < beta { d / beta } else { sign(d) };
                        dd * g[0] / n
                    })
                    .collect();
                if let Some(ga) = self.acc(a) {
                    ga.iter_mut().zip(&s).for_each(|(v, &d)| *v += d);
                }
                if let Some(gb) = self.acc(b) {
                    gb.iter_mut().zip(&s).for_each(|(v, &d)| *v -= d);
                }
            }
            Op::Concat { parts, axis } => {
                let shape = self.nodes[i].value.shape().to_vec();
                let (outer, total, inner) = split_axis(&shape, *axis);
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis];
                    if let Some(gp) = self.acc(*p) {
                        let w = len * inner;
                        for o in 0..outer {
                            let src = (o * total + off) * inner;
                            for j in 0..w {
                                gp[o * w + j] += g[src + j];
                            }
                        }
                    }
                    off += len;
                }
            }
            &Op::Slice { x, axis, start } => {
                let (outer, w, inner) = split_axis(self.nodes[i].value.shape(), axis);
                let len = self.nodes[x.0].value.shape()[axis];
                if let Some(gx) = self.acc(x) {
                    for o in 0..outer {
                        let dst = (o * len + start) * inner;
                        for j in 0..w * inner {
                            gx[dst + j] += g[o * w * inner + j];
                        }
                    }
                }
            }
            &Op::Sum { x, axis } | &Op::Mean { x, axis } => {
                let is_mean = matches!(op, Op::Mean { .. });
                let (outer, len, inner) = split_axis(self.nodes[x.0].value.shape(), axis);
                let scale = if is_mean {
                    T::one() / T::from_usize(len.max(1)).unwrap()
                } else {
                    T::one()
                };
                if let Some(gx) = self.acc(x) {
                    for o in 0..outer {
                        for l in 0..len {
                            for ii in 0..inner {
                                gx[(o * len + l) * inner + ii] += g[o * inner + ii] * scale;
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = self.acc(*x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(*x) {
                    gx.iter_mut().zip(g).for_each(|(v, &y)| *v += y);
                }
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (j, &p) in perm.iter().enumerate() {
                    inv[p] = j;
                }
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (_, back) = permute_data(g, &out_shape, &inv);
                if let Some(gx) = self.acc(*x) {
                    gx.iter_mut().zip(&back).for_each(|(v, &y)| *v += y);
                }
            }
            Op::GatherRows { x, idx } => {
                let rows = self.nodes[x.0].value.shape()[0];
                let w = self.nodes[x.0].value.len() / rows.max(1);
                if let Some(gx) = self.acc(*x) {
                    for (j, &r) in idx.iter().enumerate() {
                        for c in 0..w {
                            gx[r * w + c] += g[j * w + c];
                        }
                    }
                }
            }
            &Op::Repeat { x, n } => {
                if let Some(gx) = self.acc(x) {
                    let w = gx.len();
                    for r in 0..n {
                        for j in 0..w {
                            gx[j] += g[r * w + j];
                        }
                    }
                }
            }
            Op::ScaleBatch { x, factors } => {
                if let Some(gx) = self.acc(*x) {
                    let w = gx.len() / factors.len().max(1);
                    for j in 0..gx.len() {
                        gx[j] += g[j] * factors[j / w.max(1)];
                    }
                }
            }
            Op::Normalize { x, norms } => {
                let y = self.nodes[i].value.data().to_vec();
                let d = *self.nodes[i].value.shape().last().unwrap();
                if let Some(gx) = self.acc(*x) {
                    for (r, &nrm) in norms.iter().enumerate() {
                        let mut dot = T::zero();
                        for j in 0..d {
                            dot += y[r * d + j] * g[r * d + j];
                        }
                        for j in 0..d {
                            gx[r * d + j] += (g[r * d + j] - y[r * d + j] * dot) / nrm;
                        }
                    }
                }
            }
            Op::Cross(a, b) => {
                let (a, b) = (*a, *b);
                // d/da (a x b) . g = b x g ; d/db = g x a
                self.acc_with(a, |ga, nodes| {
                    let bv = nodes[b.0].value.data();
                    for r in 0..ga.len() / 3 {
                        let (y, gg) = (&bv[3 * r..3 * r + 3], &g[3 * r..3 * r + 3]);
                        ga[3 * r] += y[1] * gg[2] - y[2] * gg[1];
                        ga[3 * r + 1] += y[2] * gg[0] - y[0] * gg[2];
                        ga[3 * r + 2] += y[0] * gg[1] - y[1] * gg[0];
                    }
                });
                self.acc_with(b, |gb, nodes| {
                    let av = nodes[a.0].value.data();
                    for r in 0..gb.len() / 3 {
                        let (x, gg) = (&av[3 * r..3 * r + 3], &g[3 * r..3 * r + 3]);
                        gb[3 * r] += gg[1] * x[2] - gg[2] * x[1];
                        gb[3 * r + 1] += gg[2] * x[0] - gg[0] * x[2];
                        gb[3 * r + 2] += gg[0] * x[1] - gg[1] * x[0];
                    }
                });
            }
            &Op::Clamp { x, lo, hi } => {
                self.acc_with(x, |gx, nodes| {
                    let xv = nodes[x.0].value.data();
                    for j in 0..gx.len() {
                        if xv[j] > lo && xv[j] < hi {
                            gx[j] += g[j];
                        }
                    }
                });
            }
            Op::Acos(x) => {
                let x = *x;
                self.acc_with(x, |gx, nodes| {
                    let xv = nodes[x.0].value.data();
                    for j in 0..gx.len() {
                        gx[j] -= g[j] / (T::one() - xv[j] * xv[j]).sqrt();
                    }
                });
            }
            Op::Pick { x, idx } => {
                let k = *self.nodes[x.0].value.shape().last().unwrap();
                if let Some(gx) = self.acc(*x) {
                    for (r, &c) in idx.iter().enumerate() {
                        gx[r * k + c] += g[r];
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }
}
