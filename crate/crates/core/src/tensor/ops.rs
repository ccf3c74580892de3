use super::kernels::{self, broadcast_map, broadcast_shapes, expand, reduce};
use super::{numel, strides, Result, Tensor, TensorError};

fn axis_check(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis < rank {
        Ok(())
    } else {
        Err(TensorError::AxisOutOfRange { op, axis, rank })
    }
}

/// (outer, extent, inner) decomposition of a shape around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl Tensor {
    fn broadcast_with(&self, other: &Tensor, op: &'static str) -> Result<Vec<usize>> {
        broadcast_shapes(self.shape(), other.shape()).ok_or_else(|| TensorError::ShapeMismatch {
            op,
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        })
    }

    fn zip_broadcast(
        &self,
        other: &Tensor,
        out_shape: &[usize],
        f: impl Fn(f64, f64) -> f64,
    ) -> Vec<f64> {
        let (a, b) = (self.data(), other.data());
        if self.shape() == out_shape && other.shape() == out_shape {
            return a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
        }
        let am = broadcast_map(self.shape(), out_shape);
        let bm = broadcast_map(other.shape(), out_shape);
        am.iter().zip(&bm).map(|(&i, &j)| f(a[i], b[j])).collect()
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let out_shape = self.broadcast_with(other, "add")?;
        let data = self.zip_broadcast(other, &out_shape, |x, y| x + y);
        let (sa, sb, so) = (self.shape().to_vec(), other.shape().to_vec(), out_shape.clone());
        Tensor::from_op("add", out_shape, data, vec![self.clone(), other.clone()], move |g| {
            vec![Some(reduce(g, &sa, &so)), Some(reduce(g, &sb, &so))]
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let out_shape = self.broadcast_with(other, "sub")?;
        let data = self.zip_broadcast(other, &out_shape, |x, y| x - y);
        let (sa, sb, so) = (self.shape().to_vec(), other.shape().to_vec(), out_shape.clone());
        Tensor::from_op("sub", out_shape, data, vec![self.clone(), other.clone()], move |g| {
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            vec![Some(reduce(g, &sa, &so)), Some(reduce(&neg, &sb, &so))]
        })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let out_shape = self.broadcast_with(other, "mul")?;
        let data = self.zip_broadcast(other, &out_shape, |x, y| x * y);
        let (pa, pb, so) = (self.clone(), other.clone(), out_shape.clone());
        Tensor::from_op("mul", out_shape, data, vec![self.clone(), other.clone()], move |g| {
            let ea = expand(&pa.data(), pa.shape(), &so);
            let eb = expand(&pb.data(), pb.shape(), &so);
            let ga: Vec<f64> = g.iter().zip(&eb).map(|(g, b)| g * b).collect();
            let gb: Vec<f64> = g.iter().zip(&ea).map(|(g, a)| g * a).collect();
            vec![
                pa.requires_grad().then(|| reduce(&ga, pa.shape(), &so)),
                pb.requires_grad().then(|| reduce(&gb, pb.shape(), &so)),
            ]
        })
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op("scale", self.shape().to_vec(), data, vec![self.clone()], move |g| {
            vec![Some(g.iter().map(|v| v * factor).collect())]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v + c).collect();
        Tensor::from_op("add_scalar", self.shape().to_vec(), data, vec![self.clone()], |g| {
            vec![Some(g.to_vec())]
        })
    }

    /// `max(x, 0)`; the subgradient at exactly zero is taken as zero.
    pub fn relu(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.data().iter().map(|&v| v.max(0.0)).collect();
        let mask: Vec<bool> = self.data().iter().map(|&v| v > 0.0).collect();
        Tensor::from_op("relu", self.shape().to_vec(), data, vec![self.clone()], move |g| {
            vec![Some(
                g.iter()
                    .zip(&mask)
                    .map(|(&g, &m)| if m { g } else { 0.0 })
                    .collect(),
            )]
        })
    }

    pub fn square(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|v| v * v).collect();
        let p = self.clone();
        Tensor::from_op("square", self.shape().to_vec(), data, vec![self.clone()], move |g| {
            let x = p.data();
            vec![Some(g.iter().zip(x.iter()).map(|(g, x)| 2.0 * g * x).collect())]
        })
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k, n) = match (self.shape(), other.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: self.shape().to_vec(),
                    rhs: other.shape().to_vec(),
                })
            }
        };
        let data = kernels::matmul(&self.data(), &other.data(), m, k, n);
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op("matmul", vec![m, n], data, vec![self.clone(), other.clone()], move |g| {
            vec![
                pa.requires_grad()
                    .then(|| kernels::matmul_bt(g, &pb.data(), m, n, k)),
                pb.requires_grad()
                    .then(|| kernels::matmul_at(&pa.data(), g, m, k, n)),
            ]
        })
    }

    /// `self · otherᵀ` for `self` (m×k) and `other` (n×k).
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k, n) = match (self.shape(), other.shape()) {
            ([m, k], [n, k2]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul_t",
                    lhs: self.shape().to_vec(),
                    rhs: other.shape().to_vec(),
                })
            }
        };
        let data = kernels::matmul_bt(&self.data(), &other.data(), m, k, n);
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op("matmul_t", vec![m, n], data, vec![self.clone(), other.clone()], move |g| {
            vec![
                pa.requires_grad()
                    .then(|| kernels::matmul(g, &pb.data(), m, n, k)),
                pb.requires_grad()
                    .then(|| kernels::matmul_at(g, &pa.data(), m, n, k)),
            ]
        })
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        axis_check("softmax", axis, self.rank())?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    y[at(j)] /= total;
                }
            }
        }
        drop(x);
        let saved = y.clone();
        Tensor::from_op("softmax", self.shape().to_vec(), y, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let dot: f64 = (0..len).map(|j| g[at(j)] * saved[at(j)]).sum();
                    for j in 0..len {
                        gx[at(j)] = saved[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Concatenate along `axis`. Inputs share a rank; on every other axis each
    /// extent is either the common extent or 1, and singleton extents are
    /// broadcast.
    pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of an empty list".into()))?;
        let rank = first.rank();
        axis_check("concat", axis, rank)?;
        let mut target = first.shape().to_vec();
        for t in tensors {
            if t.rank() != rank {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            for d in (0..rank).filter(|&d| d != axis) {
                target[d] = target[d].max(t.shape()[d]);
            }
        }
        for t in tensors {
            for d in (0..rank).filter(|&d| d != axis) {
                let e = t.shape()[d];
                if e != 1 && e != target[d] {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: target.clone(),
                        rhs: t.shape().to_vec(),
                    });
                }
            }
        }
        let extents: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let total_axis: usize = extents.iter().sum();
        let mut out_shape = target.clone();
        out_shape[axis] = total_axis;
        let outer = numel(&out_shape[..axis]);
        let inner = numel(&out_shape[axis + 1..]);

        let mut data = vec![0.0; numel(&out_shape)];
        let mut offset = 0;
        let mut part_shapes = Vec::with_capacity(tensors.len());
        for (t, &ext) in tensors.iter().zip(&extents) {
            let mut part_shape = target.clone();
            part_shape[axis] = ext;
            let expanded = expand(&t.data(), t.shape(), &part_shape);
            let block = ext * inner;
            for o in 0..outer {
                let dst = o * total_axis * inner + offset * inner;
                data[dst..dst + block].copy_from_slice(&expanded[o * block..(o + 1) * block]);
            }
            offset += ext;
            part_shapes.push(part_shape);
        }

        let in_shapes: Vec<Vec<usize>> = tensors.iter().map(|t| t.shape().to_vec()).collect();
        let needs: Vec<bool> = tensors.iter().map(Tensor::requires_grad).collect();
        Tensor::from_op("concat", out_shape, data, tensors.to_vec(), move |g| {
            let mut grads = Vec::with_capacity(extents.len());
            let mut offset = 0;
            for (i, &ext) in extents.iter().enumerate() {
                if !needs[i] {
                    grads.push(None);
                    offset += ext;
                    continue;
                }
                let block = ext * inner;
                let mut part = Vec::with_capacity(outer * block);
                for o in 0..outer {
                    let src = o * total_axis * inner + offset * inner;
                    part.extend_from_slice(&g[src..src + block]);
                }
                grads.push(Some(reduce(&part, &in_shapes[i], &part_shapes[i])));
                offset += ext;
            }
            grads
        })
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        axis_check("narrow", axis, self.rank())?;
        let (outer, extent, inner) = split_at_axis(self.shape(), axis);
        if len == 0 || start + len > extent {
            return Err(TensorError::Invalid(format!(
                "narrow [{start}, {}) outside extent {extent} of axis {axis}",
                start + len
            )));
        }
        let x = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = (o * extent + start) * inner;
            data.extend_from_slice(&x[src..src + len * inner]);
        }
        drop(x);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let in_len = self.numel();
        Tensor::from_op("narrow", shape, data, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; in_len];
            for o in 0..outer {
                let dst = (o * extent + start) * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.contains(&0) || numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Tensor::from_op("reshape", shape.to_vec(), self.to_vec(), vec![self.clone()], |g| {
            vec![Some(g.to_vec())]
        })
    }

    /// Reorder axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        let valid = perm.len() == rank
            && perm.iter().all(|&p| p < rank && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::Invalid(format!(
                "{perm:?} is not a permutation of {rank} axes"
            )));
        }
        let in_strides = strides(self.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let map = kernels::gather_map(&out_shape, &eff);
        let x = self.data();
        let data = map.iter().map(|&i| x[i]).collect();
        drop(x);
        let in_len = self.numel();
        Tensor::from_op("permute", out_shape, data, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; in_len];
            for (gv, &i) in g.iter().zip(&map) {
                gx[i] = *gv;
            }
            vec![Some(gx)]
        })
    }

    /// Window bookkeeping shared by the pooling ops. The window covers the
    /// leading `window.len()` axes; trailing axes pass through untouched.
    fn pool_plan(
        &self,
        op: &'static str,
        window: &[usize],
        stride: &[usize],
    ) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>, usize)> {
        let shape = self.shape();
        let bad = || TensorError::BadWindow {
            op,
            window: window.to_vec(),
            shape: shape.to_vec(),
        };
        if window.len() != stride.len()
            || window.len() > shape.len()
            || window.iter().chain(stride).any(|&w| w == 0)
        {
            return Err(bad());
        }
        let k = window.len();
        if window.iter().zip(shape).any(|(w, n)| w > n) {
            return Err(bad());
        }
        let in_strides = strides(shape);
        let mut out_shape = shape.to_vec();
        for d in 0..k {
            out_shape[d] = (shape[d] - window[d]) / stride[d] + 1;
        }
        let inner = numel(&shape[k..]);
        let lead_out = &out_shape[..k];
        let step: Vec<usize> = (0..k).map(|d| stride[d] * in_strides[d]).collect();
        let bases = kernels::gather_map(lead_out, &step);
        let deltas = kernels::gather_map(window, &in_strides[..k]);
        Ok((out_shape, bases, deltas, inner))
    }

    /// Max pooling; gradient is routed to the first maximal element in
    /// row-major window order.
    pub fn pool_max(&self, window: &[usize], stride: &[usize]) -> Result<Tensor> {
        let (out_shape, bases, deltas, inner) = self.pool_plan("pool_max", window, stride)?;
        let x = self.data();
        let n_out = bases.len() * inner;
        let mut out = vec![f64::NEG_INFINITY; n_out];
        let mut arg = vec![0usize; n_out];
        for (ol, &base) in bases.iter().enumerate() {
            let dst = &mut out[ol * inner..(ol + 1) * inner];
            let dst_arg = &mut arg[ol * inner..(ol + 1) * inner];
            for &delta in &deltas {
                let start = base + delta;
                for j in 0..inner {
                    let v = x[start + j];
                    if v > dst[j] {
                        dst[j] = v;
                        dst_arg[j] = start + j;
                    }
                }
            }
        }
        drop(x);
        let in_len = self.numel();
        Tensor::from_op("pool_max", out_shape, out, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; in_len];
            for (gv, &i) in g.iter().zip(&arg) {
                gx[i] += gv;
            }
            vec![Some(gx)]
        })
    }

    /// Average pooling over the same windows as [`Tensor::pool_max`].
    pub fn pool_avg(&self, window: &[usize], stride: &[usize]) -> Result<Tensor> {
        let (out_shape, bases, deltas, inner) = self.pool_plan("pool_avg", window, stride)?;
        let x = self.data();
        let count = deltas.len() as f64;
        let mut out = vec![0.0; bases.len() * inner];
        for (ol, &base) in bases.iter().enumerate() {
            let dst = &mut out[ol * inner..(ol + 1) * inner];
            for &delta in &deltas {
                kernels::add_assign(dst, &x[base + delta..base + delta + inner]);
            }
            for v in dst.iter_mut() {
                *v /= count;
            }
        }
        drop(x);
        let in_len = self.numel();
        Tensor::from_op("pool_avg", out_shape, out, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; in_len];
            for (ol, &base) in bases.iter().enumerate() {
                let src = &g[ol * inner..(ol + 1) * inner];
                for &delta in &deltas {
                    for (d, s) in gx[base + delta..base + delta + inner].iter_mut().zip(src) {
                        *d += s / count;
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn sum(&self) -> Result<Tensor> {
        let total = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![], vec![total], vec![self.clone()], move |g| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        let total: f64 = self.data().iter().sum();
        Tensor::from_op("mean", vec![], vec![total / n as f64], vec![self.clone()], move |g| {
            vec![Some(vec![g[0] / n as f64; n])]
        })
    }

    /// Normalize every slice along the last axis to zero mean and unit
    /// variance (biased estimator, `eps` added to the variance).
    pub fn layer_norm(&self, eps: f64) -> Result<Tensor> {
        let width = *self
            .shape()
            .last()
            .ok_or_else(|| TensorError::Invalid("layer_norm of a scalar".into()))?;
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(x.len() / width);
        for (xr, yr) in x.chunks_exact(width).zip(y.chunks_exact_mut(width)) {
            let mean = xr.iter().sum::<f64>() / width as f64;
            let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
            let s = 1.0 / (var + eps).sqrt();
            for (o, v) in yr.iter_mut().zip(xr) {
                *o = (v - mean) * s;
            }
            inv_std.push(s);
        }
        drop(x);
        let saved = y.clone();
        Tensor::from_op("layer_norm", self.shape().to_vec(), y, vec![self.clone()], move |g| {
            let mut gx = vec![0.0; g.len()];
            let n = width as f64;
            for (r, ((gr, yr), gxr)) in g
                .chunks_exact(width)
                .zip(saved.chunks_exact(width))
                .zip(gx.chunks_exact_mut(width))
                .enumerate()
            {
                let g_mean = gr.iter().sum::<f64>() / n;
                let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                for ((o, gv), yv) in gxr.iter_mut().zip(gr).zip(yr) {
                    *o = inv_std[r] * (gv - g_mean - yv * gy_mean);
                }
            }
            vec![Some(gx)]
        })
    }
}
