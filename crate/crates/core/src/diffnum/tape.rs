//! Tensor-level reverse-mode tape.
//!
//! A [`Tape`] records one forward computation (one mini-batch). Every op
//! stores its output value and whatever it needs for the reverse sweep;
//! [`Tape::backward`] walks the nodes in reverse insertion order, so gradient
//! accumulation order is fixed and results replay bit-for-bit.

use super::kernels::{axpy, dot, gelu_grad_with, gelu_tanh, gemm_nn, gemm_nt, gemm_tn, sign, split_axis};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, T),
    Abs(Var),
    Relu(Var),
    Gelu {
        x: Var,
        tanh: Vec<T>,
    },
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var, usize),
    Mean(Var, usize),
    Sum(Var, usize),
    SumAll(Var),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        start: usize,
    },
    TransposeLast2(Var),
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    L1Norm(Var, usize),
    L2Normalize {
        x: Var,
        axis: usize,
        norms: Vec<T>,
    },
    SlidingDistance(Var, Var),
    SoftminPool(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    track_frozen: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(what: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn check_axis(what: &str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!("{what}: axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

impl<T: Scalar> Tape<T> {
    /// A tape that differentiates trainable parameters only.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            track_frozen: false,
        }
    }

    /// A tape that also differentiates frozen parameters (gradient checks).
    pub fn tracking_all() -> Self {
        Tape {
            nodes: Vec::new(),
            track_frozen: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Records an input. `requires_grad` makes its gradient available.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter; gradients flow to it if it is trainable
    /// (or always, on a [`Tape::tracking_all`] tape).
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let requires_grad = self.track_frozen || store.is_trainable(id);
        self.nodes.push(Node {
            value: store.value(id).clone(),
            requires_grad,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        same_shape(what, self.shape(a), self.shape(b))?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape(format!("add_broadcast: {sa:?} with {sb:?}")));
        }
        let n = self.value(b).numel().max(1);
        let bd = self.data(b);
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % n])
            .collect();
        let value = Tensor::new(sa, data)?;
        Ok(self.push(value, Op::AddBroadcast(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data = self.data(a).iter().map(|&x| x * c).collect();
        let value = Tensor::new(self.shape(a), data).expect("same shape");
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let value = Tensor::new(self.shape(a), data).expect("same shape");
        self.push(value, op, &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let xd = self.data(a);
        let tanh: Vec<T> = xd.iter().map(|&x| gelu_tanh(x)).collect();
        let half = T::lit(0.5);
        let data = xd.iter().zip(&tanh).map(|(&x, &t)| half * x * (T::one() + t)).collect();
        let value = Tensor::new(self.shape(a), data).expect("same shape");
        self.push(value, Op::Gelu { x: a, tanh }, &[a])
    }

    /// `[m,k] × [k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul: {sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Affine map over the last axis: `x[..., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w);
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(Error::Shape(format!("linear: input {sx:?}, weight {sw:?}")));
        }
        let (din, dout) = (sw[0], sw[1]);
        if let Some(b) = b {
            same_shape("linear bias", self.shape(b), &[dout])?;
        }
        let rows = sx.iter().product::<usize>() / din;
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bd = self.data(b);
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bd);
            }
        }
        gemm_nn(self.data(x), self.data(w), &mut out, rows, din, dout);
        let mut shape = sx;
        *shape.last_mut().expect("nonempty") = dout;
        let value = Tensor::new(&shape, out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &parents))
    }

    /// 1-D convolution: `x[B, Cin, T]`, `w[Cout, Cin, K]`, `b[Cout]` with
    /// zero padding `pad` on both ends.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x);
        let sw = self.shape(w);
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || stride == 0 {
            return Err(Error::Shape(format!("conv1d: input {sx:?}, weight {sw:?}, stride {stride}")));
        }
        let (bsz, cin, len) = (sx[0], sx[1], sx[2]);
        let (cout, ksz) = (sw[0], sw[2]);
        if len + 2 * pad < ksz {
            return Err(Error::Shape(format!("conv1d: kernel {ksz} longer than padded input {len}+2·{pad}")));
        }
        if let Some(b) = b {
            same_shape("conv1d bias", self.shape(b), &[cout])?;
        }
        let lout = (len + 2 * pad - ksz) / stride + 1;
        let mut out = vec![T::zero(); bsz * cout * lout];
        let (xd, wd) = (self.data(x), self.data(w));
        let bd = b.map(|b| self.data(b));
        let geo = ConvGeometry { cin, len, ksz, stride, pad, lout };
        let mut cols = vec![T::zero(); cin * ksz * lout];
        for bi in 0..bsz {
            let ob = &mut out[bi * cout * lout..(bi + 1) * cout * lout];
            if let Some(bd) = bd {
                for (co, orow) in ob.chunks_mut(lout).enumerate() {
                    orow.iter_mut().for_each(|o| *o = bd[co]);
                }
            }
            im2col(&xd[bi * cin * len..(bi + 1) * cin * len], &geo, &mut cols);
            gemm_nn(wd, &cols, ob, cout, cin * ksz, lout);
        }
        let value = Tensor::new(&[bsz, cout, lout], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Conv1d { x, w, b, stride, pad }, &parents))
    }

    /// Layer normalization over the last axis (ε = 1e-5 inside the root).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().unwrap_or(&0);
        if n == 0 {
            return Err(Error::Shape("layer_norm over a zero-length axis".into()));
        }
        same_shape("layer_norm gamma", self.shape(gamma), &[n])?;
        same_shape("layer_norm beta", self.shape(beta), &[n])?;
        let rows = self.value(x).numel() / n;
        let eps = T::lit(1e-5);
        let inv_n = T::one() / T::lit(n as f64);
        let (xd, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); rows * n];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * n];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = gd[j] * h + bd[j];
            }
        }
        let value = Tensor::new(&sx, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax", &shape, axis)?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| xd[at(j)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..n {
                    let e = (xd[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Softmax(x, axis), &[x]))
    }

    fn reduce(&mut self, x: Var, axis: usize, what: &str, scale_by_len: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(what, &shape, axis)?;
        let (outer, n, inner) = split_axis(&shape, axis);
        if n == 0 && scale_by_len {
            return Err(Error::Shape(format!("{what} over a zero-length axis")));
        }
        let xd = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &xd[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if scale_by_len {
            let inv = T::one() / T::lit(n as f64);
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::new(&removed_axis(&shape, axis), out)?;
        let op = if scale_by_len { Op::Mean(x, axis) } else { Op::Sum(x, axis) };
        Ok(self.push(value, op, &[x]))
    }

    /// Mean along `axis` (the axis is removed).
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, "mean", true)
    }

    /// Sum along `axis` (the axis is removed).
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, "sum", false)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::Shape(format!("concat along {axis}: {base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                out.extend_from_slice(&self.data(p)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(Error::Shape(format!("narrow {start}..{} of {shape:?}", start + len)));
        }
        let row: usize = shape[1..].iter().product();
        let out = self.data(x)[start * row..(start + len) * row].to_vec();
        let mut s = shape;
        s[0] = len;
        let value = Tensor::new(&s, out)?;
        Ok(self.push(value, Op::Narrow { x, start }, &[x]))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!("transpose of {shape:?}")));
        }
        let (a, b) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch = self.value(x).numel() / (a * b).max(1);
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for n in 0..batch {
            let off = n * a * b;
            for i in 0..a {
                for j in 0..b {
                    out[off + j * a + i] = xd[off + i * b + j];
                }
            }
        }
        let mut s = shape;
        let l = s.len();
        s.swap(l - 2, l - 1);
        let value = Tensor::new(&s, out)?;
        Ok(self.push(value, Op::TransposeLast2(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Multi-head scaled dot-product attention over `[B, L, D]` inputs,
    /// bidirectional (no mask). Heads split `D` into contiguous slices.
    pub fn scaled_dot_product_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let s = self.shape(q).to_vec();
        same_shape("attention k", self.shape(k), &s)?;
        same_shape("attention v", self.shape(v), &s)?;
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(Error::Shape(format!("attention: shape {s:?} with {heads} heads")));
        }
        let (bsz, len, dim) = (s[0], s[1], s[2]);
        let dk = dim / heads;
        let scale = T::one() / T::lit(dk as f64).sqrt();
        let mut probs = vec![T::zero(); bsz * heads * len * len];
        let mut out = vec![T::zero(); bsz * len * dim];
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut qh = vec![T::zero(); len * dk];
        let mut kh = vec![T::zero(); len * dk];
        let mut vh = vec![T::zero(); len * dk];
        let mut oh = vec![T::zero(); len * dk];
        for b in 0..bsz {
            for h in 0..heads {
                gather_head(qd, &mut qh, b, h, len, dim, dk);
                gather_head(kd, &mut kh, b, h, len, dim, dk);
                gather_head(vd, &mut vh, b, h, len, dim, dk);
                let p = &mut probs[(b * heads + h) * len * len..(b * heads + h + 1) * len * len];
                gemm_nt(&qh, &kh, p, len, dk, len);
                for i in 0..len {
                    let row = &mut p[i * len..(i + 1) * len];
                    let m = row.iter().fold(T::neg_infinity(), |a, &x| a.max(x * scale));
                    let mut z = T::zero();
                    for x in row.iter_mut() {
                        *x = (*x * scale - m).exp();
                        z += *x;
                    }
                    row.iter_mut().for_each(|x| *x /= z);
                }
                oh.iter_mut().for_each(|x| *x = T::zero());
                gemm_nn(p, &vh, &mut oh, len, len, dk);
                scatter_head(&oh, &mut out, b, h, len, dim, dk);
            }
        }
        let value = Tensor::new(&s, out)?;
        Ok(self.push(value, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    /// Mean cross-entropy of `[B, C]` logits against class labels.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::Shape(format!(
                "cross_entropy: logits {s:?} with {} labels",
                labels.len()
            )));
        }
        let (bsz, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {c} classes")));
        }
        let ld = self.data(logits);
        let mut probs = vec![T::zero(); bsz * c];
        let mut total = T::zero();
        for i in 0..bsz {
            let row = &ld[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..c {
                let e = (row[j] - m).exp();
                probs[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                probs[i * c + j] /= z;
            }
            total += z.ln() + m - row[labels[i]];
        }
        let value = Tensor::scalar(total / T::lit(bsz as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// L1 norm along `axis` (the axis is removed).
    pub fn l1_norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("l1_norm", &shape, axis)?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += xd[(o * n + j) * inner + i].abs();
                }
            }
        }
        let value = Tensor::new(&removed_axis(&shape, axis), out)?;
        Ok(self.push(value, Op::L1Norm(x, axis), &[x]))
    }

    /// Scales slices along `axis` to unit L2 norm; slices with norm below
    /// `1e-12` map to zero.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("l2_normalize", &shape, axis)?;
        let (outer, n, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut norms = vec![T::zero(); outer * inner];
        let mut out = vec![T::zero(); xd.len()];
        let floor = T::lit(1e-12);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let nrm = (0..n).map(|j| xd[at(j)] * xd[at(j)]).sum::<T>().sqrt();
                norms[o * inner + i] = nrm;
                if nrm >= floor {
                    for j in 0..n {
                        out[at(j)] = xd[at(j)] / nrm;
                    }
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::L2Normalize { x, axis, norms }, &[x]))
    }

    /// Euclidean distance between `s[R, L]` and every length-`L` window of
    /// `x[B, R, T]`, spanning all `R` rows: output `[B, T - L + 1]`.
    pub fn sliding_distance(&mut self, x: Var, s: Var) -> Result<Var> {
        let sx = self.shape(x);
        let ss = self.shape(s);
        if sx.len() != 3 || ss.len() != 2 || sx[1] != ss[0] {
            return Err(Error::Shape(format!("sliding_distance: input {sx:?}, shapelet {ss:?}")));
        }
        let (bsz, rows, len) = (sx[0], sx[1], sx[2]);
        let l = ss[1];
        if l == 0 || l > len {
            return Err(Error::Shape(format!("shapelet length {l} does not fit frame length {len}")));
        }
        let j = len - l + 1;
        let (xd, sd) = (self.data(x), self.data(s));
        let mut out = vec![T::zero(); bsz * j];
        for b in 0..bsz {
            window_distances(
                &xd[b * rows * len..(b + 1) * rows * len],
                rows,
                len,
                sd,
                l,
                &mut out[b * j..(b + 1) * j],
            );
        }
        let value = Tensor::new(&[bsz, j], out)?;
        Ok(self.push(value, Op::SlidingDistance(x, s), &[x, s]))
    }

    /// Softmax pooling of negated distances along the last axis:
    /// `a = Σ_j w_j·(−d_j)` with `w = softmax(−d)`. Output keeps the axis
    /// with length 1.
    pub fn softmin_pool(&mut self, d: Var) -> Result<Var> {
        let shape = self.shape(d).to_vec();
        let n = *shape.last().ok_or_else(|| Error::Shape("softmin_pool of a scalar".into()))?;
        if n == 0 {
            return Err(Error::Shape("softmin_pool over a zero-length axis".into()));
        }
        let dd = self.data(d);
        let rows = dd.len() / n;
        let out: Vec<T> = (0..rows).map(|r| soft_activation(&dd[r * n..(r + 1) * n])).collect();
        let mut s = shape;
        *s.last_mut().expect("nonempty") = 1;
        let value = Tensor::new(&s, out)?;
        Ok(self.push(value, Op::SoftminPool(d), &[d]))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let bd = self.data(*b);
                let out = node.value.data();
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] / bd[i];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] -= g[i] * out[i] / bd[i];
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let n = gb.len().max(1);
                    for (i, &y) in g.iter().enumerate() {
                        gb[i % n] += y;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *c);
                }
            }
            Op::Abs(a) => {
                let ad = self.data(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * sign(ad[i]);
                    }
                }
            }
            Op::Relu(a) => {
                let ad = self.data(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        if ad[i] > T::zero() {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Gelu { x: a, tanh } => {
                let ad = self.data(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu_grad_with(ad[i], tanh[i]);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    gemm_nt(g, bd, ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm_tn(ad, g, gb, m, k, n);
                }
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (din, dout) = (sw[0], sw[1]);
                let rows = g.len() / dout;
                let (xd, wd) = (self.data(*x), self.data(*w));
                if let Some(gx) = self.slot(grads, *x) {
                    gemm_nt(g, wd, gx, rows, dout, din);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    gemm_tn(xd, g, gw, rows, din, dout);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        for r in 0..rows {
                            gb.iter_mut()
                                .zip(&g[r * dout..(r + 1) * dout])
                                .for_each(|(x, &y)| *x += y);
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, stride, pad } => {
                let (stride, pad) = (*stride, *pad);
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let (bsz, cin, len) = (sx[0], sx[1], sx[2]);
                let (cout, ksz) = (sw[0], sw[2]);
                let lout = node.value.shape()[2];
                let (xd, wd) = (self.data(*x), self.data(*w));
                let geo = ConvGeometry { cin, len, ksz, stride, pad, lout };
                let mut cols = vec![T::zero(); cin * ksz * lout];
                if let Some(gx) = self.slot(grads, *x) {
                    for bi in 0..bsz {
                        cols.iter_mut().for_each(|c| *c = T::zero());
                        gemm_tn(wd, &g[bi * cout * lout..(bi + 1) * cout * lout], &mut cols, cout, cin * ksz, lout);
                        col2im_add(&cols, &geo, &mut gx[bi * cin * len..(bi + 1) * cin * len]);
                    }
                }
                if let Some(gw) = self.slot(grads, *w) {
                    for bi in 0..bsz {
                        im2col(&xd[bi * cin * len..(bi + 1) * cin * len], &geo, &mut cols);
                        gemm_nt(&g[bi * cout * lout..(bi + 1) * cout * lout], &cols, gw, cout, lout, cin * ksz);
                    }
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        for bi in 0..bsz {
                            for co in 0..cout {
                                let grow = &g[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
                                gb[co] += grow.iter().copied().sum::<T>();
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.shape(*gamma)[0];
                let rows = g.len() / n;
                let gd = self.data(*gamma);
                if let Some(gx) = self.slot(grads, *x) {
                    let inv_n = T::one() / T::lit(n as f64);
                    for r in 0..rows {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_dh = T::zero();
                        let mut mean_dhh = T::zero();
                        for j in 0..n {
                            let dh = gr[j] * gd[j];
                            mean_dh += dh;
                            mean_dhh += dh * hr[j];
                        }
                        mean_dh *= inv_n;
                        mean_dhh *= inv_n;
                        for j in 0..n {
                            let dh = gr[j] * gd[j];
                            gx[r * n + j] += rstd[r] * (dh - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..n {
                            gg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for r in 0..rows {
                        for j in 0..n {
                            gb[j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::Softmax(x, axis) => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let y = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let s = (0..n).map(|j| g[at(j)] * y[at(j)]).sum::<T>();
                            for j in 0..n {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - s);
                            }
                        }
                    }
                }
            }
            Op::Mean(x, axis) | Op::Sum(x, axis) => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let c = match node.op {
                    Op::Mean(..) => T::one() / T::lit(n as f64),
                    _ => T::one(),
                };
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..n {
                            axpy(c, src, &mut gx[(o * n + j) * inner..(o * n + j + 1) * inner]);
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    if let Some(gp) = self.slot(grads, p) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            gp[o * n * inner..(o + 1) * n * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, &y)| *x += y);
                        }
                    }
                    offset += n;
                }
            }
            Op::Narrow { x, start } => {
                let row: usize = self.shape(*x)[1..].iter().product();
                if let Some(gx) = self.slot(grads, *x) {
                    gx[start * row..start * row + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, &y)| *x += y);
                }
            }
            Op::TransposeLast2(x) => {
                let s = self.shape(*x);
                let (a, b) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = g.len() / (a * b).max(1);
                if let Some(gx) = self.slot(grads, *x) {
                    for n in 0..batch {
                        let off = n * a * b;
                        for i in 0..a {
                            for j in 0..b {
                                gx[off + i * b + j] += g[off + j * a + i];
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, g, grads);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.shape(*logits)[1];
                let inv_b = g[0] / T::lit(labels.len() as f64);
                if let Some(gl) = self.slot(grads, *logits) {
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let target = if j == y { T::one() } else { T::zero() };
                            gl[i * c + j] += (probs[i * c + j] - target) * inv_b;
                        }
                    }
                }
            }
            Op::L1Norm(x, axis) => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let xd = self.data(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                let at = (o * n + j) * inner + i;
                                gx[at] += g[o * inner + i] * sign(xd[at]);
                            }
                        }
                    }
                }
            }
            Op::L2Normalize { x, axis, norms } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let y = node.value.data();
                let floor = T::lit(1e-12);
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let nrm = norms[o * inner + i];
                            if nrm < floor {
                                continue;
                            }
                            let at = |j: usize| (o * n + j) * inner + i;
                            let s = (0..n).map(|j| g[at(j)] * y[at(j)]).sum::<T>();
                            for j in 0..n {
                                gx[at(j)] += (g[at(j)] - y[at(j)] * s) / nrm;
                            }
                        }
                    }
                }
            }
            Op::SlidingDistance(x, s) => {
                let sx = self.shape(*x);
                let (bsz, rows, len) = (sx[0], sx[1], sx[2]);
                let l = self.shape(*s)[1];
                let j = len - l + 1;
                let (xd, sd) = (self.data(*x), self.data(*s));
                let dist = node.value.data();
                let want_x = self.nodes[x.0].requires_grad;
                let want_s = self.nodes[s.0].requires_grad;
                let mut gs_acc = vec![T::zero(); if want_s { rows * l } else { 0 }];
                let mut gx_acc = vec![T::zero(); if want_x { xd.len() } else { 0 }];
                for b in 0..bsz {
                    for jj in 0..j {
                        let d = dist[b * j + jj];
                        let gv = g[b * j + jj];
                        if d <= T::zero() || gv == T::zero() {
                            continue;
                        }
                        let coef = gv / d;
                        for r in 0..rows {
                            let xo = (b * rows + r) * len + jj;
                            for t in 0..l {
                                let diff = coef * (sd[r * l + t] - xd[xo + t]);
                                if want_s {
                                    gs_acc[r * l + t] += diff;
                                }
                                if want_x {
                                    gx_acc[xo + t] -= diff;
                                }
                            }
                        }
                    }
                }
                if let Some(gs) = self.slot(grads, *s) {
                    gs.iter_mut().zip(&gs_acc).for_each(|(a, &b)| *a += b);
                }
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(&gx_acc).for_each(|(a, &b)| *a += b);
                }
            }
            Op::SoftminPool(d) => {
                let n = *self.shape(*d).last().expect("nonempty");
                let dd = self.data(*d);
                let act = node.value.data();
                if let Some(gd) = self.slot(grads, *d) {
                    for (r, (&a, &gv)) in act.iter().zip(g).enumerate() {
                        let row = &dd[r * n..(r + 1) * n];
                        let m = row.iter().copied().fold(T::infinity(), T::min);
                        let z = row.iter().map(|&x| (m - x).exp()).sum::<T>();
                        for (jj, &x) in row.iter().enumerate() {
                            let w = (m - x).exp() / z;
                            gd[r * n + jj] += gv * w * (x + a - T::one());
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let s = self.shape(q);
        let (bsz, len, dim) = (s[0], s[1], s[2]);
        let dk = dim / heads;
        let scale = T::one() / T::lit(dk as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let want = [q, k, v].map(|x| self.nodes[x.0].requires_grad);
        let mut gq = vec![T::zero(); if want[0] { qd.len() } else { 0 }];
        let mut gk = vec![T::zero(); if want[1] { kd.len() } else { 0 }];
        let mut gv = vec![T::zero(); if want[2] { vd.len() } else { 0 }];
        let mut qh = vec![T::zero(); len * dk];
        let mut kh = vec![T::zero(); len * dk];
        let mut vh = vec![T::zero(); len * dk];
        let mut goh = vec![T::zero(); len * dk];
        let mut dp = vec![T::zero(); len * len];
        let mut tmp = vec![T::zero(); len * dk];
        for b in 0..bsz {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * len * len..(b * heads + h + 1) * len * len];
                gather_head(qd, &mut qh, b, h, len, dim, dk);
                gather_head(kd, &mut kh, b, h, len, dim, dk);
                gather_head(vd, &mut vh, b, h, len, dim, dk);
                gather_head(g, &mut goh, b, h, len, dim, dk);
                if want[2] {
                    tmp.iter_mut().for_each(|x| *x = T::zero());
                    gemm_tn(p, &goh, &mut tmp, len, len, dk);
                    scatter_add_head(&tmp, &mut gv, b, h, len, dim, dk);
                }
                if !(want[0] || want[1]) {
                    continue;
                }
                dp.iter_mut().for_each(|x| *x = T::zero());
                gemm_nt(&goh, &vh, &mut dp, len, dk, len);
                for i in 0..len {
                    let pr = &p[i * len..(i + 1) * len];
                    let dr = &mut dp[i * len..(i + 1) * len];
                    let s = dot(pr, dr);
                    for jj in 0..len {
                        dr[jj] = pr[jj] * (dr[jj] - s) * scale;
                    }
                }
                if want[0] {
                    tmp.iter_mut().for_each(|x| *x = T::zero());
                    gemm_nn(&dp, &kh, &mut tmp, len, len, dk);
                    scatter_add_head(&tmp, &mut gq, b, h, len, dim, dk);
                }
                if want[1] {
                    tmp.iter_mut().for_each(|x| *x = T::zero());
                    gemm_tn(&dp, &qh, &mut tmp, len, len, dk);
                    scatter_add_head(&tmp, &mut gk, b, h, len, dim, dk);
                }
            }
        }
        for (var, acc) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(slot) = self.slot(grads, var) {
                slot.iter_mut().zip(&acc).for_each(|(a, &b)| *a += b);
            }
        }
    }
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    cin: usize,
    len: usize,
    ksz: usize,
    stride: usize,
    pad: usize,
    lout: usize,
}

/// Unfolds one `[cin, len]` sample into `[cin·ksz, lout]` columns (zero padded).
fn im2col<T: Scalar>(x: &[T], geo: &ConvGeometry, cols: &mut [T]) {
    let ConvGeometry { cin, len, ksz, stride, pad, lout } = *geo;
    for ci in 0..cin {
        let xrow = &x[ci * len..(ci + 1) * len];
        for k in 0..ksz {
            let crow = &mut cols[(ci * ksz + k) * lout..(ci * ksz + k + 1) * lout];
            let (t0, t1) = conv_range(len, lout, stride, pad, k);
            crow[..t0].iter_mut().for_each(|c| *c = T::zero());
            crow[t1..].iter_mut().for_each(|c| *c = T::zero());
            for t in t0..t1 {
                crow[t] = xrow[t * stride + k - pad];
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto a sample.
fn col2im_add<T: Scalar>(cols: &[T], geo: &ConvGeometry, gx: &mut [T]) {
    let ConvGeometry { cin, len, ksz, stride, pad, lout } = *geo;
    for ci in 0..cin {
        let grow = &mut gx[ci * len..(ci + 1) * len];
        for k in 0..ksz {
            let crow = &cols[(ci * ksz + k) * lout..(ci * ksz + k + 1) * lout];
            let (t0, t1) = conv_range(len, lout, stride, pad, k);
            for t in t0..t1 {
                grow[t * stride + k - pad] += crow[t];
            }
        }
    }
}

/// Output positions `t` for which input index `t·stride + k − pad` is in range.
#[inline]
fn conv_range(len: usize, lout: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let t0 = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let t1 = if len + pad > k {
        ((len + pad - k - 1) / stride + 1).min(lout)
    } else {
        0
    };
    (t0, t1.max(t0))
}

#[inline]
fn gather_head<T: Scalar>(src: &[T], dst: &mut [T], b: usize, h: usize, len: usize, dim: usize, dk: usize) {
    for i in 0..len {
        let o = (b * len + i) * dim + h * dk;
        dst[i * dk..(i + 1) * dk].copy_from_slice(&src[o..o + dk]);
    }
}

#[inline]
fn scatter_head<T: Scalar>(src: &[T], dst: &mut [T], b: usize, h: usize, len: usize, dim: usize, dk: usize) {
    for i in 0..len {
        let o = (b * len + i) * dim + h * dk;
        dst[o..o + dk].copy_from_slice(&src[i * dk..(i + 1) * dk]);
    }
}

#[inline]
fn scatter_add_head<T: Scalar>(src: &[T], dst: &mut [T], b: usize, h: usize, len: usize, dim: usize, dk: usize) {
    for i in 0..len {
        let o = (b * len + i) * dim + h * dk;
        dst[o..o + dk]
            .iter_mut()
            .zip(&src[i * dk..(i + 1) * dk])
            .for_each(|(a, &b)| *a += b);
    }
}

/// Euclidean distances between `s[rows, l]` and each window of one
/// `x[rows, len]` sample; `out` holds `len - l + 1` entries.
pub fn window_distances<T: Scalar>(x: &[T], rows: usize, len: usize, s: &[T], l: usize, out: &mut [T]) {
    for (jj, o) in out.iter_mut().enumerate() {
        let mut acc = T::zero();
        for r in 0..rows {
            let xw = &x[r * len + jj..r * len + jj + l];
            let sr = &s[r * l..(r + 1) * l];
            for (&a, &c) in sr.iter().zip(xw) {
                let diff = a - c;
                acc += diff * diff;
            }
        }
        *o = acc.sqrt();
    }
}

/// Softmax-pooled activation of one distance vector.
pub fn soft_activation<T: Scalar>(d: &[T]) -> T {
    let m = d.iter().copied().fold(T::infinity(), T::min);
    let mut z = T::zero();
    let mut acc = T::zero();
    for &x in d {
        let e = (m - x).exp();
        z += e;
        acc += e * x;
    }
    -(acc / z)
}

/// Gradients produced by [`Tape::backward`], indexed by tape node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<T: Scalar> Tape<T> {
    /// Adds the gradients of every bound trainable (or tracked) parameter
    /// into the store's gradient slots.
    pub fn write_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if !node.requires_grad {
                    continue;
                }
                match grads.get(Var(i)) {
                    Some(g) => store.accumulate_grad(id, g)?,
                    None => {
                        let zeros = vec![T::zero(); node.value.numel()];
                        store.accumulate_grad(id, &zeros)?;
                    }
                }
            }
        }
        Ok(())
    }
}
