//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every op appends one node holding its output value. Nodes are created in
//! dependency order, so walking the tape backwards is a valid topological
//! order for the adjoint pass.

use crate::error::{shape_err, Error, Result};

use super::tensor::{numel, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a training-mode batch norm, used to update the
/// running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddBcast(Var, Var),
    Scale(Var, T),
    MulConst(Var, Tensor<T>),
    /// Keeps the local slope `dy/dx` when a gradient is needed.
    Gelu { x: Var, slope: Vec<T> },
    Reshape(Var),
    Narrow {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    ExpandLead(Var, usize),
    IndexSelect {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
        index: Vec<usize>,
    },
    UnfoldTime {
        x: Var,
        window: usize,
        stride: usize,
    },
    ConvTemporal {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ConvSpatial {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    MeanAxis {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    WeightedSum(Var, Tensor<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub const NORM_EPS: f64 = 1e-5;

/// Operation tape. One graph per forward pass.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints of every differentiable leaf after [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // Eight independent partial sums let the compiler vectorize.
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut acc = T::zero();
    for (&x, &y) in ar.iter().zip(br) {
        acc += x * y;
    }
    lanes.iter().fold(T::zero(), |s, &v| s + v) + acc
}

#[inline]
pub(crate) fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    x * half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_pdf<T: Real>(x: T) -> T {
    T::lit(0.398_942_280_401_432_7) * (-(x * x) * T::lit(0.5)).exp()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        value.ensure_finite("graph op output")?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err!("add: {:?} vs {:?}", va.shape(), vb.shape()));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s shape.
    pub fn add_bcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (vx, vy) = (self.value(x), self.value(y));
        let (sx, sy) = (vx.shape(), vy.shape());
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(shape_err!("add_bcast: {sy:?} is not a suffix of {sx:?}"));
        }
        let mut out = vx.clone();
        let n = vy.len();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, &b) in chunk.iter_mut().zip(vy.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, y]);
        self.push(out, Op::AddBcast(x, y), rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Elementwise product with a constant tensor (e.g. a dropout mask).
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape() != c.shape() {
            return Err(shape_err!("mul_const: {:?} vs {:?}", vx.shape(), c.shape()));
        }
        let data = vx.data().iter().zip(c.data()).map(|(&a, &b)| a * b).collect();
        let out = Tensor::from_parts_unchecked(vx.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(out, Op::MulConst(x, c), rg)
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let rg = self.rg(&[x]);
        let vx = self.value(x);
        let half = T::lit(0.5);
        let cdf: Vec<T> = vx
            .data()
            .iter()
            .map(|&v| half * (T::one() + (v * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf()))
            .collect();
        let data = vx.data().iter().zip(&cdf).map(|(&v, &c)| v * c).collect();
        let slope = if rg {
            vx.data().iter().zip(&cdf).map(|(&v, &c)| c + v * gelu_pdf(v)).collect()
        } else {
            Vec::new()
        };
        let out = Tensor::from_parts_unchecked(vx.shape().to_vec(), data);
        self.push(out, Op::Gelu { x, slope }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(shape_err!(
                "narrow: axis {axis} [{start}, {}) out of {shape:?}",
                start + len
            ));
        }
        let (outer, axis_len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts_unchecked(out_shape, data),
            Op::Narrow {
                x,
                outer,
                axis_len,
                inner,
                start,
                len,
            },
            rg,
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base_shape = self.shape(*first).to_vec();
        if axis >= base_shape.len() {
            return Err(shape_err!("concat: axis {axis} out of {base_shape:?}"));
        }
        let mut total = 0;
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base_shape.len()
                || s[..axis] != base_shape[..axis]
                || s[axis + 1..] != base_shape[axis + 1..]
            {
                return Err(shape_err!("concat: {s:?} incompatible with {base_shape:?}"));
            }
            lens.push(s[axis]);
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &l) in parts.iter().zip(&lens) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = base_shape;
        out_shape[axis] = total;
        let rg = self.rg(parts);
        self.push(
            Tensor::from_parts_unchecked(out_shape, data),
            Op::Concat {
                parts: parts.iter().copied().zip(lens).collect(),
                outer,
                inner,
            },
            rg,
        )
    }

    /// Repeat `x` along a new leading axis of extent `n`.
    pub fn expand_lead(&mut self, x: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(shape_err!("expand_lead: zero extent"));
        }
        let vx = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(vx.shape());
        let mut data = Vec::with_capacity(n * vx.len());
        for _ in 0..n {
            data.extend_from_slice(vx.data());
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts_unchecked(shape, data), Op::ExpandLead(x, n), rg)
    }

    /// Gather entries `index` along `axis`.
    pub fn index_select(&mut self, x: Var, axis: usize, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("index_select: axis {axis} out of {shape:?}"));
        }
        if index.is_empty() || index.iter().any(|&i| i >= shape[axis]) {
            return Err(shape_err!(
                "index_select: bad index {index:?} for extent {}",
                shape[axis]
            ));
        }
        let (outer, axis_len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &i in index {
                let base = (o * axis_len + i) * inner;
                data.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = index.len();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts_unchecked(out_shape, data),
            Op::IndexSelect {
                x,
                outer,
                axis_len,
                inner,
                index: index.to_vec(),
            },
            rg,
        )
    }

    /// Sliding windows along time: `[B, C, T] -> [B * S, C, window]` with
    /// `S = (T - window) / stride + 1`, segments of one batch item contiguous.
    pub fn unfold_time(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [b, c, t] = shape[..] else {
            return Err(shape_err!("unfold_time expects [B, C, T], got {shape:?}"));
        };
        if window == 0 || stride == 0 || window > t {
            return Err(shape_err!(
                "unfold_time: window {window} stride {stride} over {t} samples"
            ));
        }
        let s = (t - window) / stride + 1;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(b * s * c * window);
        for bi in 0..b {
            for si in 0..s {
                for ci in 0..c {
                    let base = (bi * c + ci) * t + si * stride;
                    data.extend_from_slice(&src[base..base + window]);
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts_unchecked(vec![b * s, c, window], data),
            Op::UnfoldTime { x, window, stride },
            rg,
        )
    }

    /// Cross-correlation along the last (time) axis with valid padding.
    ///
    /// `x: [N, C_in, H, T]`, `w: [C_out, C_in, K]`, `b: [C_out]` gives
    /// `[N, C_out, H, T - K + 1]`. The kernel has extent 1 on the `H` axis.
    pub fn conv_temporal(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (&[n, ci, h, t], &[co, wci, k]) = (&xs[..], &ws[..]) else {
            return Err(shape_err!("conv_temporal: x {xs:?}, kernel {ws:?}"));
        };
        if wci != ci {
            return Err(shape_err!("conv_temporal: kernel expects {wci} input maps, got {ci}"));
        }
        if t < k {
            return Err(shape_err!("conv_temporal: {t} samples shorter than kernel {k}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(shape_err!("conv_temporal: bias {:?}", self.shape(b)));
            }
        }
        let to = t - k + 1;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); n * co * h * to];
        for ni in 0..n {
            for o in 0..co {
                let bias = bv.map_or(T::zero(), |bv| bv[o]);
                for hi in 0..h {
                    let dst = &mut out[((ni * co + o) * h + hi) * to..][..to];
                    dst.fill(bias);
                    for c in 0..ci {
                        let src = &xv[((ni * ci + c) * h + hi) * t..][..t];
                        let kern = &wv[(o * ci + c) * k..][..k];
                        for (kk, &wk) in kern.iter().enumerate() {
                            axpy(wk, &src[kk..kk + to], dst);
                        }
                    }
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        self.push(
            Tensor::from_parts_unchecked(vec![n, co, h, to], out),
            Op::ConvTemporal { x, w, b },
            rg,
        )
    }

    /// Mixing across the full channel axis at each time step.
    ///
    /// `x: [N, C_in, H, T]`, `w: [C_out, C_in, H]`, `b: [C_out]` gives
    /// `[N, C_out, 1, T]`.
    pub fn conv_spatial(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (&[n, ci, h, t], &[co, wci, wh]) = (&xs[..], &ws[..]) else {
            return Err(shape_err!("conv_spatial: x {xs:?}, kernel {ws:?}"));
        };
        if wci != ci || wh != h {
            return Err(shape_err!(
                "conv_spatial: kernel spans {wci}x{wh}, input has {ci}x{h}"
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(shape_err!("conv_spatial: bias {:?}", self.shape(b)));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); n * co * t];
        for ni in 0..n {
            for o in 0..co {
                let dst = &mut out[(ni * co + o) * t..][..t];
                dst.fill(bv.map_or(T::zero(), |bv| bv[o]));
                for c in 0..ci {
                    for hi in 0..h {
                        let src = &xv[((ni * ci + c) * h + hi) * t..][..t];
                        axpy(wv[(o * ci + c) * h + hi], src, dst);
                    }
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        self.push(
            Tensor::from_parts_unchecked(vec![n, co, 1, t], out),
            Op::ConvSpatial { x, w, b },
            rg,
        )
    }

    /// Batch norm over axis 1 of `[N, C, ...]` using the batch's own statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, BatchStats)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err!("batch_norm: needs [N, C, ...], got {shape:?}"));
        }
        let (n, c, inner) = split_axis(&shape, 1);
        self.check_affine(gamma, beta, c)?;
        let pop = n * inner;
        if pop < 2 {
            return Err(Error::Numeric(
                "batch_norm: batch-and-time population of 1 has undefined variance".into(),
            ));
        }
        let xv = self.value(x).data();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for ci in 0..c {
            let mut s = 0.0;
            for ni in 0..n {
                s += xv[(ni * c + ci) * inner..][..inner]
                    .iter()
                    .map(|v| v.as_f64())
                    .sum::<f64>();
            }
            let m = s / pop as f64;
            let mut ss = 0.0;
            for ni in 0..n {
                ss += xv[(ni * c + ci) * inner..][..inner]
                    .iter()
                    .map(|v| (v.as_f64() - m).powi(2))
                    .sum::<f64>();
            }
            mean[ci] = m;
            var[ci] = ss / pop as f64;
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::lit(1.0 / (v + NORM_EPS).sqrt()))
            .collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::lit(m)).collect();
        let stats = BatchStats {
            mean,
            var: var.iter().map(|v| v * pop as f64 / (pop - 1) as f64).collect(),
        };
        let out = self.bn_apply(x, gamma, beta, &mean_t, inv_std, true)?;
        Ok((out, stats))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err!("batch_norm: needs [N, C, ...], got {shape:?}"));
        }
        let c = shape[1];
        self.check_affine(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err!("batch_norm: running stats for {c} maps"));
        }
        let inv_std = running_var
            .iter()
            .map(|&v| T::one() / (v + T::lit(NORM_EPS)).sqrt())
            .collect();
        self.bn_apply(x, gamma, beta, running_mean, inv_std, false)
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!(
                "affine params {:?}/{:?} for {c} features",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        Ok(())
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: Vec<T>,
        batch_stats: bool,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, inner) = split_axis(&shape, 1);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for ni in 0..n {
            for ci in 0..c {
                for &v in &xv[(ni * c + ci) * inner..][..inner] {
                    let h = (v - mean[ci]) * inv_std[ci];
                    xhat.push(h);
                    out.push(gv[ci] * h + bv[ci]);
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            Tensor::from_parts_unchecked(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        )
    }

    /// Non-overlapping max pooling over the last axis; remainder dropped.
    pub fn max_pool_time(&mut self, x: Var, window: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let t = *shape
            .last()
            .ok_or_else(|| shape_err!("max_pool_time on a scalar"))?;
        if window == 0 || t < window {
            return Err(shape_err!("max_pool_time: window {window} over {t} samples"));
        }
        let to = t / window;
        let xv = self.value(x).data();
        let rows = xv.len() / t;
        let mut out = Vec::with_capacity(rows * to);
        let mut argmax = Vec::with_capacity(rows * to);
        for r in 0..rows {
            for j in 0..to {
                let base = r * t + j * window;
                let (mut bi, mut bv) = (base, xv[base]);
                for i in base + 1..base + window {
                    if xv[i] > bv {
                        bi = i;
                        bv = xv[i];
                    }
                }
                out.push(bv);
                argmax.push(bi);
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = to;
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts_unchecked(out_shape, out),
            Op::MaxPool { x, argmax },
            rg,
        )
    }

    /// Maximum over the whole last axis, which is removed; a preceding unit
    /// axis (`[N, F, 1, T]`) is squeezed as well.
    pub fn global_max_pool_time(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let t = *shape
            .last()
            .ok_or_else(|| shape_err!("global_max_pool_time on a scalar"))?;
        let xv = self.value(x).data();
        let rows = xv.len() / t;
        let mut out = Vec::with_capacity(rows);
        let mut argmax = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * t..][..t];
            let (mut bi, mut bv) = (0, row[0]);
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > bv {
                    bi = i;
                    bv = v;
                }
            }
            out.push(bv);
            argmax.push(r * t + bi);
        }
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.len() >= 2 && out_shape.last() == Some(&1) {
            out_shape.pop();
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts_unchecked(out_shape, out),
            Op::MaxPool { x, argmax },
            rg,
        )
    }

    /// `x @ w + b` over the last axis. `x: [..., D_in]`, `w: [D_in, D_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (Some(&din), [wi, dout]) = (xs.last(), &ws[..]) else {
            return Err(shape_err!("linear: x {xs:?}, w {ws:?}"));
        };
        if din != *wi {
            return Err(shape_err!("linear: x {xs:?} against w {ws:?}"));
        }
        let dout = *dout;
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err!("linear: bias {:?}", self.shape(b)));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let rows = xv.len() / din;
        let mut out = vec![T::zero(); rows * dout];
        for r in 0..rows {
            let dst = &mut out[r * dout..][..dout];
            if let Some(b) = b {
                dst.copy_from_slice(self.nodes[b.0].value.data());
            }
            for (i, &xi) in xv[r * din..][..din].iter().enumerate() {
                if xi != T::zero() {
                    axpy(xi, &wv[i * dout..][..dout], dst);
                }
            }
        }
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = dout;
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        self.push(
            Tensor::from_parts_unchecked(out_shape, out),
            Op::Linear { x, w, b },
            rg,
        )
    }

    /// Scaled dot-product attention over `[B, L, D]` projections, split into
    /// `heads` heads of width `D / heads`; head outputs are concatenated.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        let [b, l, d] = qs[..] else {
            return Err(shape_err!("attention expects [B, L, D], got {qs:?}"));
        };
        if self.shape(k) != qs.as_slice() || self.shape(v) != qs.as_slice() {
            return Err(shape_err!("attention: q/k/v shapes differ"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![T::zero(); b * heads * l * l];
        let mut out = vec![T::zero(); b * l * d];
        for bi in 0..b {
            for hh in 0..heads {
                let p = &mut probs[(bi * heads + hh) * l * l..][..l * l];
                for i in 0..l {
                    let qi = &qv[(bi * l + i) * d + hh * dh..][..dh];
                    let row = &mut p[i * l..][..l];
                    let mut mx = T::neg_infinity();
                    for (j, r) in row.iter_mut().enumerate() {
                        let kj = &kv[(bi * l + j) * d + hh * dh..][..dh];
                        *r = dot(qi, kj) * scale;
                        mx = mx.max(*r);
                    }
                    let mut z = T::zero();
                    for r in row.iter_mut() {
                        *r = (*r - mx).exp();
                        z += *r;
                    }
                    for r in row.iter_mut() {
                        *r = *r / z;
                    }
                    let dst = &mut out[(bi * l + i) * d + hh * dh..][..dh];
                    for (j, &pij) in row.iter().enumerate() {
                        axpy(pij, &vv[(bi * l + j) * d + hh * dh..][..dh], dst);
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            Tensor::from_parts_unchecked(qs, out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Attention probabilities of an attention node, laid out `[B, H, L, L]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| shape_err!("layer_norm on a scalar"))?;
        if d < 2 {
            return Err(Error::Numeric(
                "layer_norm: feature extent 1 has undefined variance".into(),
            ));
        }
        self.check_affine(gamma, beta, d)?;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        let eps = T::lit(NORM_EPS);
        let dn = T::lit(d as f64);
        for r in 0..rows {
            let row = &xv[r * d..][..d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (i, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(gv[i] * h + bv[i]);
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            Tensor::from_parts_unchecked(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Mean over `axis`, which is removed.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("mean_axis: axis {axis} out of {shape:?}"));
        }
        let (outer, axis_len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let scale = T::one() / T::lit(axis_len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..][..inner];
            for a in 0..axis_len {
                axpy(scale, &xv[(o * axis_len + a) * inner..][..inner], dst);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts_unchecked(out_shape, out),
            Op::MeanAxis {
                x,
                outer,
                axis_len,
                inner,
            },
            rg,
        )
    }

    /// Mean softmax cross-entropy of `[B, C]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [b, c] = shape[..] else {
            return Err(shape_err!("cross_entropy expects [B, C], got {shape:?}"));
        };
        if labels.len() != b {
            return Err(shape_err!("cross_entropy: {} labels for batch {b}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = 0.0f64;
        for (r, &y) in labels.iter().enumerate() {
            let row = &lv[r * c..][..c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: f64 = row.iter().map(|&v| (v - mx).as_f64().exp()).sum();
            let lse = mx.as_f64() + z.ln();
            loss += lse - row[y].as_f64();
            probs.extend(row.iter().map(|&v| T::lit((v.as_f64() - lse).exp())));
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(T::lit(loss / b as f64)),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Scalar `sum(x * w)` for a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, w: Tensor<T>) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape() != w.shape() {
            return Err(shape_err!("weighted_sum: {:?} vs {:?}", vx.shape(), w.shape()));
        }
        let s = dot(vx.data(), w.data());
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::WeightedSum(x, w), rg)
    }

    /// Adjoints of `loss` (a one-element node) with respect to every leaf that
    /// requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &gout, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(
        &self,
        grads: &mut [Option<Tensor<T>>],
        v: Var,
        f: impl FnOnce(&mut [T]),
    ) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backward_node(&self, node: &Node<T>, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let go = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, gout.clone());
                self.acc(grads, *b, gout.clone());
            }
            Op::AddBcast(x, y) => {
                self.acc(grads, *x, gout.clone());
                self.acc_with(grads, *y, |gy| {
                    let n = gy.len();
                    for chunk in go.chunks(n) {
                        for (a, &g) in gy.iter_mut().zip(chunk) {
                            *a += g;
                        }
                    }
                });
            }
            Op::Scale(x, c) => self.acc(grads, *x, gout.map(|g| g * *c)),
            Op::MulConst(x, m) => {
                let data = go.iter().zip(m.data()).map(|(&g, &mv)| g * mv).collect();
                self.acc(grads, *x, Tensor::from_parts_unchecked(gout.shape().to_vec(), data));
            }
            Op::Gelu { x, slope } => {
                let data = go.iter().zip(slope).map(|(&g, &s)| g * s).collect();
                self.acc(grads, *x, Tensor::from_parts_unchecked(xv_shape(self, *x), data));
            }
            Op::Reshape(x) => {
                let g = Tensor::from_parts_unchecked(xv_shape(self, *x), go.to_vec());
                self.acc(grads, *x, g);
            }
            Op::Narrow {
                x,
                outer,
                axis_len,
                inner,
                start,
                len,
            } => self.acc_with(grads, *x, |gx| {
                for o in 0..*outer {
                    let dst = &mut gx[(o * axis_len + start) * inner..][..len * inner];
                    for (a, &g) in dst.iter_mut().zip(&go[o * len * inner..][..len * inner]) {
                        *a += g;
                    }
                }
            }),
            Op::Concat {
                parts,
                outer,
                inner,
            } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, l) in parts {
                    self.acc_with(grads, p, |gp| {
                        for o in 0..*outer {
                            let src = &go[(o * total + offset) * inner..][..l * inner];
                            for (a, &g) in gp[o * l * inner..][..l * inner].iter_mut().zip(src) {
                                *a += g;
                            }
                        }
                    });
                    offset += l;
                }
            }
            Op::ExpandLead(x, n) => self.acc_with(grads, *x, |gx| {
                let m = gx.len();
                for i in 0..*n {
                    for (a, &g) in gx.iter_mut().zip(&go[i * m..][..m]) {
                        *a += g;
                    }
                }
            }),
            Op::IndexSelect {
                x,
                outer,
                axis_len,
                inner,
                index,
            } => self.acc_with(grads, *x, |gx| {
                let k = index.len();
                for o in 0..*outer {
                    for (j, &i) in index.iter().enumerate() {
                        let src = &go[(o * k + j) * inner..][..*inner];
                        let dst = &mut gx[(o * axis_len + i) * inner..][..*inner];
                        for (a, &g) in dst.iter_mut().zip(src) {
                            *a += g;
                        }
                    }
                }
            }),
            Op::UnfoldTime { x, window, stride } => {
                let xs = xv_shape(self, *x);
                let (b, c, t) = (xs[0], xs[1], xs[2]);
                let s = (t - window) / stride + 1;
                self.acc_with(grads, *x, |gx| {
                    for bi in 0..b {
                        for si in 0..s {
                            for ci in 0..c {
                                let src = &go[((bi * s + si) * c + ci) * window..][..*window];
                                let dst = &mut gx[(bi * c + ci) * t + si * stride..][..*window];
                                for (a, &g) in dst.iter_mut().zip(src) {
                                    *a += g;
                                }
                            }
                        }
                    }
                });
            }
            Op::ConvTemporal { x, w, b } => self.conv_temporal_backward(*x, *w, *b, gout, grads),
            Op::ConvSpatial { x, w, b } => self.conv_spatial_backward(*x, *w, *b, gout, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = gout.shape();
                let (n, c, inner) = split_axis(shape, 1);
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * inner;
                        for i in off..off + inner {
                            dgamma[ci] += go[i] * xhat[i];
                            dbeta[ci] += go[i];
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let pop = T::lit((n * inner) as f64);
                    let mut dx = vec![T::zero(); go.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * inner;
                            for i in off..off + inner {
                                let dxhat = go[i] * gv[ci];
                                dx[i] = if *batch_stats {
                                    // dbeta = sum(dy), dgamma = sum(dy * xhat)
                                    inv_std[ci] / pop
                                        * (pop * dxhat
                                            - dbeta[ci] * gv[ci]
                                            - xhat[i] * dgamma[ci] * gv[ci])
                                } else {
                                    dxhat * inv_std[ci]
                                };
                            }
                        }
                    }
                    self.acc(grads, *x, Tensor::from_parts_unchecked(shape.to_vec(), dx));
                }
                self.acc(grads, *gamma, Tensor::from_parts_unchecked(vec![c], dgamma));
                self.acc(grads, *beta, Tensor::from_parts_unchecked(vec![c], dbeta));
            }
            Op::MaxPool { x, argmax } => self.acc_with(grads, *x, |gx| {
                for (&i, &g) in argmax.iter().zip(go) {
                    gx[i] += g;
                }
            }),
            Op::Linear { x, w, b } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let ws = self.shape(*w);
                let (din, dout) = (ws[0], ws[1]);
                let rows = xv.len() / din;
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![T::zero(); xv.len()];
                    for r in 0..rows {
                        let gr = &go[r * dout..][..dout];
                        for i in 0..din {
                            dx[r * din + i] = dot(gr, &wv[i * dout..][..dout]);
                        }
                    }
                    self.acc(grads, *x, Tensor::from_parts_unchecked(xv_shape(self, *x), dx));
                }
                self.acc_with(grads, *w, |gw| {
                    for r in 0..rows {
                        let gr = &go[r * dout..][..dout];
                        for i in 0..din {
                            let xi = xv[r * din + i];
                            if xi != T::zero() {
                                axpy(xi, gr, &mut gw[i * dout..][..dout]);
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    self.acc_with(grads, *b, |gb| {
                        for gr in go.chunks(dout) {
                            for (a, &g) in gb.iter_mut().zip(gr) {
                                *a += g;
                            }
                        }
                    });
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, gout, grads),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = *gout.shape().last().unwrap();
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = vec![T::zero(); go.len()];
                let dn = T::lit(d as f64);
                for (r, &is) in inv_std.iter().enumerate() {
                    let g = &go[r * d..][..d];
                    let h = &xhat[r * d..][..d];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for i in 0..d {
                        dgamma[i] += g[i] * h[i];
                        dbeta[i] += g[i];
                        let dh = g[i] * gv[i];
                        s1 += dh;
                        s2 += dh * h[i];
                    }
                    for i in 0..d {
                        let dh = g[i] * gv[i];
                        dx[r * d + i] = is / dn * (dn * dh - s1 - h[i] * s2);
                    }
                }
                self.acc(grads, *x, Tensor::from_parts_unchecked(gout.shape().to_vec(), dx));
                self.acc(grads, *gamma, Tensor::from_parts_unchecked(vec![d], dgamma));
                self.acc(grads, *beta, Tensor::from_parts_unchecked(vec![d], dbeta));
            }
            Op::MeanAxis {
                x,
                outer,
                axis_len,
                inner,
            } => {
                let scale = T::one() / T::lit(*axis_len as f64);
                self.acc_with(grads, *x, |gx| {
                    for o in 0..*outer {
                        let src = &go[o * inner..][..*inner];
                        for a in 0..*axis_len {
                            axpy(scale, src, &mut gx[(o * axis_len + a) * inner..][..*inner]);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = go[0] / T::lit(b as f64);
                let mut d = probs.iter().map(|&p| p * scale).collect::<Vec<_>>();
                for (r, &y) in labels.iter().enumerate() {
                    d[r * c + y] -= scale;
                }
                self.acc(grads, *logits, Tensor::from_parts_unchecked(vec![b, c], d));
            }
            Op::WeightedSum(x, w) => self.acc(grads, *x, w.map(|v| v * go[0])),
        }
    }

    fn conv_temporal_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        gout: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xs = self.shape(x);
        let (n, ci, h, t) = (xs[0], xs[1], xs[2], xs[3]);
        let ws = self.shape(w);
        let (co, k) = (ws[0], ws[2]);
        let to = t - k + 1;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let go = gout.data();
        self.acc_with(grads, w, |gw| {
            for ni in 0..n {
                for o in 0..co {
                    for hi in 0..h {
                        let g = &go[((ni * co + o) * h + hi) * to..][..to];
                        for c in 0..ci {
                            let src = &xv[((ni * ci + c) * h + hi) * t..][..t];
                            let dst = &mut gw[(o * ci + c) * k..][..k];
                            for (kk, d) in dst.iter_mut().enumerate() {
                                *d += dot(g, &src[kk..kk + to]);
                            }
                        }
                    }
                }
            }
        });
        if let Some(b) = b {
            self.acc_with(grads, b, |gb| {
                for ni in 0..n {
                    for (o, d) in gb.iter_mut().enumerate() {
                        *d += go[(ni * co + o) * h * to..][..h * to].iter().copied().sum::<T>();
                    }
                }
            });
        }
        self.acc_with(grads, x, |gx| {
            for ni in 0..n {
                for o in 0..co {
                    for hi in 0..h {
                        let g = &go[((ni * co + o) * h + hi) * to..][..to];
                        for c in 0..ci {
                            let dst = &mut gx[((ni * ci + c) * h + hi) * t..][..t];
                            let kern = &wv[(o * ci + c) * k..][..k];
                            for (kk, &wk) in kern.iter().enumerate() {
                                axpy(wk, g, &mut dst[kk..kk + to]);
                            }
                        }
                    }
                }
            }
        });
    }

    fn conv_spatial_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        gout: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xs = self.shape(x);
        let (n, ci, h, t) = (xs[0], xs[1], xs[2], xs[3]);
        let co = self.shape(w)[0];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let go = gout.data();
        self.acc_with(grads, w, |gw| {
            for ni in 0..n {
                for o in 0..co {
                    let g = &go[(ni * co + o) * t..][..t];
                    for c in 0..ci {
                        for hi in 0..h {
                            let src = &xv[((ni * ci + c) * h + hi) * t..][..t];
                            gw[(o * ci + c) * h + hi] += dot(g, src);
                        }
                    }
                }
            }
        });
        if let Some(b) = b {
            self.acc_with(grads, b, |gb| {
                for ni in 0..n {
                    for (o, d) in gb.iter_mut().enumerate() {
                        *d += go[(ni * co + o) * t..][..t].iter().copied().sum::<T>();
                    }
                }
            });
        }
        self.acc_with(grads, x, |gx| {
            for ni in 0..n {
                for o in 0..co {
                    let g = &go[(ni * co + o) * t..][..t];
                    for c in 0..ci {
                        for hi in 0..h {
                            let dst = &mut gx[((ni * ci + c) * h + hi) * t..][..t];
                            axpy(wv[(o * ci + c) * h + hi], g, dst);
                        }
                    }
                }
            }
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        gout: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let s = gout.shape();
        let (b, l, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let go = gout.data();
        let mut dq = vec![T::zero(); qv.len()];
        let mut dk = vec![T::zero(); kv.len()];
        let mut dv = vec![T::zero(); vv.len()];
        let mut dp = vec![T::zero(); l];
        for bi in 0..b {
            for hh in 0..heads {
                let p = &probs[(bi * heads + hh) * l * l..][..l * l];
                for i in 0..l {
                    let goi = &go[(bi * l + i) * d + hh * dh..][..dh];
                    let row = &p[i * l..][..l];
                    for j in 0..l {
                        let vj = &vv[(bi * l + j) * d + hh * dh..][..dh];
                        dp[j] = dot(goi, vj);
                        axpy(row[j], goi, &mut dv[(bi * l + j) * d + hh * dh..][..dh]);
                    }
                    let rowdot = dot(row, &dp[..l]);
                    let qi = &qv[(bi * l + i) * d + hh * dh..][..dh];
                    for j in 0..l {
                        let ds = row[j] * (dp[j] - rowdot) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let kj = &kv[(bi * l + j) * d + hh * dh..][..dh];
                        axpy(ds, kj, &mut dq[(bi * l + i) * d + hh * dh..][..dh]);
                        axpy(ds, qi, &mut dk[(bi * l + j) * d + hh * dh..][..dh]);
                    }
                }
            }
        }
        self.acc(grads, q, Tensor::from_parts_unchecked(s.to_vec(), dq));
        self.acc(grads, k, Tensor::from_parts_unchecked(s.to_vec(), dk));
        self.acc(grads, v, Tensor::from_parts_unchecked(s.to_vec(), dv));
    }
}

fn xv_shape<T: Real>(g: &Graph<T>, v: Var) -> Vec<usize> {
    g.shape(v).to_vec()
}
