//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and the rule
//! needed to push gradients back to its inputs. [`Tape::backward`] walks the
//! nodes in exact reverse recording order.

use super::kernels::{self, MatRef};
use super::{check_perm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `y = scale * x + shift`
    Affine { x: Var, scale: f64 },
    /// Scales each leading-axis slice by its own constant.
    ScaleOuter { x: Var, coeffs: Vec<f64> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, b: Var, trans_b: bool },
    Sum(Var),
    ReduceAxis { x: Var, axis: usize, scale: f64 },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Expand { x: Var, axis: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Gelu(Var),
    Silu(Var),
    Abs(Var),
    Square(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    L2Normalize { x: Var, norms: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: gradients of the loss w.r.t. every leaf
/// that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Node indices whose backward rule ran, in the order they ran.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a leaf; it tracks gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        self.push_leaf(Tensor::from_parts(t.shape().to_vec(), t.data().to_vec()), rg)
    }

    /// Record a gradient-tracking leaf regardless of the tensor's flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push_leaf(Tensor::from_parts(t.shape().to_vec(), t.data().to_vec()), true)
    }

    /// Record a constant (never receives gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t.with_requires_grad(false), false)
    }

    fn push_leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        value.clear_grad();
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        self.value(a).same_shape(self.value(b), what)
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), &[a, b]))
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let data = self.data(x).iter().map(|v| scale * v + shift).collect();
        self.push(self.shape(x).to_vec(), data, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, 1.0, c)
    }

    /// Multiply slice `i` along the leading axis by `coeffs[i]`.
    pub fn scale_outer(&mut self, x: Var, coeffs: &[f64]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.first() != Some(&coeffs.len()) {
            return Err(Error::dim(format!(
                "scale_outer: {} coefficients for shape {shape:?}",
                coeffs.len()
            )));
        }
        let inner = self.value(x).numel() / coeffs.len();
        let data = self
            .data(x)
            .chunks(inner)
            .zip(coeffs)
            .flat_map(|(chunk, &c)| chunk.iter().map(move |v| v * c))
            .collect();
        Ok(self.push(
            shape,
            data,
            Op::ScaleOuter {
                x,
                coeffs: coeffs.to_vec(),
            },
            &[x],
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        self.push(self.shape(x).to_vec(), data, op, &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * kernels::sigmoid(v), Op::Silu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Clamp to `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    // ---- linear algebra ---------------------------------------------------

    /// `x · w (+ b)` over the last axis of `x`; leading axes are batch.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let k = *xs
            .last()
            .ok_or_else(|| Error::dim("linear: scalar input"))?;
        if ws.len() != 2 || ws[0] != k {
            return Err(Error::dim(format!(
                "linear: input {xs:?} incompatible with weight {ws:?}"
            )));
        }
        let n = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::dim(format!(
                    "linear: bias {:?} for weight {ws:?}",
                    self.shape(b)
                )));
            }
        }
        let m = self.value(x).numel() / k;
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        kernels::gemm(
            MatRef::row_major(self.data(x), m, k),
            MatRef::row_major(self.data(w), k, n),
            &mut out,
            b.is_some(),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(shape, out, Op::Linear { x, w, b }, &inputs))
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!(
                "matmul: shapes {sa:?} and {sb:?} do not chain"
            )));
        }
        self.linear(a, b, None)
    }

    /// Batched product over matching leading axes: `[.., m, k] · [.., k, n]`,
    /// or `[.., m, k] · [.., n, k]ᵀ` when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::dim(format!("bmm: shapes {sa:?} and {sb:?} (trans_b={trans_b})"));
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(err());
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(err());
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..batch {
            let am = MatRef::row_major(&da[i * m * k..(i + 1) * m * k], m, k);
            let bslice = &db[i * k * n..(i + 1) * k * n];
            let bm = if trans_b {
                MatRef::row_major(bslice, n, k).t()
            } else {
                MatRef::row_major(bslice, k, n)
            };
            kernels::gemm(am, bm, &mut out[i * m * n..(i + 1) * m * n], false);
        }
        let mut shape = sa;
        shape[r - 1] = n;
        Ok(self.push(shape, out, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, 1.0)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::dim(format!("mean_axis: axis {axis} out of range")))?;
        self.reduce_axis(x, axis, 1.0 / len as f64)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, scale: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!(
                "reduce: axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, len, inner) = kernels::around_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let s = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                dst.iter_mut().zip(s).for_each(|(d, v)| *d += v);
            }
            dst.iter_mut().for_each(|d| *d *= scale);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(out_shape, out, Op::ReduceAxis { x, axis, scale }, &[x]))
    }

    // ---- structural -------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() || shape.contains(&0) {
            return Err(Error::dim(format!(
                "reshape {:?} -> {shape:?}",
                self.shape(x)
            )));
        }
        let data = self.data(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_perm(&shape, perm)?;
        let data = kernels::permute(self.data(x), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        Ok(self.push(
            out_shape,
            data,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    /// Swap the two trailing axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::dim("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat: axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim(format!(
                    "concat: shape {s:?} incompatible with {base:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::around_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                out.extend_from_slice(&self.data(v)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim(format!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = kernels::around_axis(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(out_shape, out, Op::Slice { x, axis, start }, &[x]))
    }

    /// Split the last axis into equal chunks of width `width`.
    pub fn chunk_last(&mut self, x: Var, width: usize) -> Result<Vec<Var>> {
        let shape = self.shape(x);
        let axis = shape.len().checked_sub(1).ok_or_else(|| Error::dim("chunk of scalar"))?;
        if width == 0 || shape[axis] % width != 0 {
            return Err(Error::dim(format!("chunk width {width} for {shape:?}")));
        }
        (0..shape[axis] / width)
            .map(|i| self.slice(x, axis, i * width, width))
            .collect()
    }

    /// Insert a new axis of extent `n` at `axis`, repeating the data.
    pub fn expand(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis > shape.len() || n == 0 {
            return Err(Error::dim(format!("expand at axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let chunk = &src[o * inner..(o + 1) * inner];
            for _ in 0..n {
                out.extend_from_slice(chunk);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, n);
        Ok(self.push(out_shape, out, Op::Expand { x, axis }, &[x]))
    }

    /// Rows `idx` of a rank-2 tensor.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || idx.is_empty() {
            return Err(Error::dim(format!("gather_rows on {shape:?}")));
        }
        let d = shape[1];
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= shape[0] {
                return Err(Error::dim(format!("gather_rows: row {i} of {}", shape[0])));
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![idx.len(), d],
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    // ---- normalization ----------------------------------------------------

    /// Normalize the last axis to zero mean / unit variance, then apply the
    /// optional affine `gain`, `bias` (both of length `d`).
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = match shape.last() {
            Some(&d) if d > 0 => d,
            _ => return Err(Error::dim(format!("layer_norm on {shape:?}"))),
        };
        for p in [gain, bias].into_iter().flatten() {
            if self.shape(p) != [d] {
                return Err(Error::dim(format!(
                    "layer_norm: affine shape {:?} for width {d}",
                    self.shape(p)
                )));
            }
        }
        let rows = self.value(x).numel() / d;
        let src = self.data(x);
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gain {
            let g = self.data(g);
            out.chunks_mut(d)
                .for_each(|row| row.iter_mut().zip(g).for_each(|(o, g)| *o *= g));
        }
        if let Some(b) = bias {
            let b = self.data(b);
            out.chunks_mut(d)
                .for_each(|row| row.iter_mut().zip(b).for_each(|(o, b)| *o += b));
        }
        let inputs: Vec<Var> = [Some(x), gain, bias].into_iter().flatten().collect();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &inputs,
        ))
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = match shape.last() {
            Some(&n) if n > 0 => n,
            _ => return Err(Error::dim(format!("softmax on {shape:?}"))),
        };
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        Ok(self.push(shape, out, Op::Softmax(x), &[x]))
    }

    /// Scale each last-axis vector to unit L2 norm: `x / sqrt(|x|² + eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = match shape.last() {
            Some(&d) if d > 0 => d,
            _ => return Err(Error::dim(format!("l2_normalize on {shape:?}"))),
        };
        let mut out = self.data(x).to_vec();
        let mut norms = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let n = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(self.push(shape, out, Op::L2Normalize { x, norms }, &[x]))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut visited = Vec::new();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited.push(i);
            self.backprop(i, &g, &mut grads);
        }
        Ok(Gradients { grads, visited })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
            slot => *slot = Some(delta),
        }
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.to_vec());
                if self.needs(*b) {
                    self.acc(grads, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = g.iter().zip(self.data(*b)).map(|(g, y)| g * y).collect();
                    self.acc(grads, *a, d);
                }
                if self.needs(*b) {
                    let d = g.iter().zip(self.data(*a)).map(|(g, x)| g * x).collect();
                    self.acc(grads, *b, d);
                }
            }
            Op::Affine { x, scale } => {
                self.acc(grads, *x, g.iter().map(|v| v * scale).collect());
            }
            Op::ScaleOuter { x, coeffs } => {
                let inner = g.len() / coeffs.len();
                let d = g
                    .chunks(inner)
                    .zip(coeffs)
                    .flat_map(|(chunk, &c)| chunk.iter().map(move |v| v * c))
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::Linear { x, w, b } => {
                let k = *self.shape(*x).last().unwrap();
                let n = self.shape(*w)[1];
                let m = g.len() / n;
                let gm = MatRef::row_major(g, m, n);
                if self.needs(*x) {
                    let mut dx = vec![0.0; m * k];
                    let wm = MatRef::row_major(self.data(*w), k, n);
                    kernels::gemm(gm, wm.t(), &mut dx, false);
                    self.acc(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; k * n];
                    let xm = MatRef::row_major(self.data(*x), m, k);
                    kernels::gemm(xm.t(), gm, &mut dw, false);
                    self.acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![0.0; n];
                        for row in g.chunks(n) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                        self.acc(grads, *b, db);
                    }
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.shape(*a);
                let r = sa.len();
                let (m, k) = (sa[r - 2], sa[r - 1]);
                let n = *node.value.shape().last().unwrap();
                let batch = g.len() / (m * n);
                let (da_src, db_src) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        let gi = MatRef::row_major(&g[i * m * n..(i + 1) * m * n], m, n);
                        let bs = &db_src[i * k * n..(i + 1) * k * n];
                        // trans_b: y = a·bsᵀ, bs is n×k -> da = g·bs
                        let bm = if *trans_b {
                            MatRef::row_major(bs, n, k)
                        } else {
                            MatRef::row_major(bs, k, n).t()
                        };
                        kernels::gemm(gi, bm, &mut da[i * m * k..(i + 1) * m * k], false);
                    }
                    self.acc(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let gi = MatRef::row_major(&g[i * m * n..(i + 1) * m * n], m, n);
                        let am = MatRef::row_major(&da_src[i * m * k..(i + 1) * m * k], m, k);
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            kernels::gemm(gi.t(), am, out, false);
                        } else {
                            kernels::gemm(am.t(), gi, out, false);
                        }
                    }
                    self.acc(grads, *b, db);
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.acc(grads, *x, vec![g[0]; n]);
            }
            Op::ReduceAxis { x, axis, scale } => {
                let (outer, len, inner) = kernels::around_axis(self.shape(*x), *axis);
                let mut d = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for _ in 0..len {
                        d.extend(src.iter().map(|v| v * scale));
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::Reshape(x) => self.acc(grads, *x, g.to_vec()),
            Op::Permute { x, perm } => {
                let d = kernels::permute(g, node.value.shape(), &kernels::inverse_perm(perm));
                self.acc(grads, *x, d);
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = kernels::around_axis(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.needs(v) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            d.extend_from_slice(&g[from..from + len * inner]);
                        }
                        self.acc(grads, v, d);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, full, inner) = kernels::around_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let to = (o * full + start) * inner;
                    d[to..to + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, *x, d);
            }
            Op::Expand { x, axis } => {
                let xs = self.shape(*x);
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis..].iter().product();
                let n = node.value.shape()[*axis];
                let mut d = vec![0.0; outer * inner];
                for o in 0..outer {
                    let dst = &mut d[o * inner..(o + 1) * inner];
                    for j in 0..n {
                        let src = &g[(o * n + j) * inner..(o * n + j + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::GatherRows { x, idx } => {
                let d = self.shape(*x)[1];
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (r, &i) in idx.iter().enumerate() {
                    dx[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
                self.acc(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *node.value.shape().last().unwrap();
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let mut db = vec![0.0; d];
                        for row in g.chunks(d) {
                            db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                        self.acc(grads, *b, db);
                    }
                }
                if let Some(gn) = gain {
                    if self.needs(*gn) {
                        let mut dg = vec![0.0; d];
                        for (row, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                dg[j] += row[j] * xh[j];
                            }
                        }
                        self.acc(grads, *gn, dg);
                    }
                }
                if self.needs(*x) {
                    let gain_v = gain.map(|gn| self.data(gn));
                    let mut dx = vec![0.0; g.len()];
                    let mut dxhat = vec![0.0; d];
                    for (r, (row, xh)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dxhat[j] = row[j] * gain_v.map_or(1.0, |gv| gv[j]);
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>()
                            / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap();
                let y = node.value.data();
                let mut d = vec![0.0; g.len()];
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::Gelu(x) => {
                let d = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(g, &v)| g * kernels::gelu_grad(v))
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::Silu(x) => {
                let d = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(g, &v)| {
                        let s = kernels::sigmoid(v);
                        g * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::Abs(x) => {
                let d = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(g, &v)| if v > 0.0 { *g } else if v < 0.0 { -g } else { 0.0 })
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::Square(x) => {
                let d = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(g, v)| 2.0 * g * v)
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::Clamp { x, lo, hi } => {
                let d = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(g, v)| if v >= lo && v <= hi { *g } else { 0.0 })
                    .collect();
                self.acc(grads, *x, d);
            }
            Op::L2Normalize { x, norms } => {
                let dlen = *node.value.shape().last().unwrap();
                let y = node.value.data();
                let mut d = vec![0.0; g.len()];
                for (r, ((dr, gr), yr)) in d
                    .chunks_mut(dlen)
                    .zip(g.chunks(dlen))
                    .zip(y.chunks(dlen))
                    .enumerate()
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..dlen {
                        dr[j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                self.acc(grads, *x, d);
            }
        }
    }
}
