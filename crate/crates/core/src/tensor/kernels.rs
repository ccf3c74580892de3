//! Raw buffer kernels shared by the differentiable ops.

use super::strides;

pub(crate) fn add_assign(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// `a (m×k) · b (k×n)`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (m×k) · bᵀ` where `b` is stored as (n×k).
pub(crate) fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (o, b_row) in out_row.iter_mut().zip(b.chunks_exact(k)) {
            *o = dot(a_row, b_row);
        }
    }
    out
}

/// `aᵀ · b` where `a` is stored as (m×k) and `b` as (m×n); result (k×n).
pub(crate) fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without reassociating.
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Numpy-style broadcast of two shapes (right-aligned).
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out_shape`, the flat index in a tensor of
/// `in_shape` that broadcasts onto it. `in_shape` must be broadcast-compatible
/// with `out_shape` and have rank no greater.
pub(crate) fn broadcast_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let in_strides = strides(in_shape);
    let mut eff = vec![0usize; rank];
    for d in 0..in_shape.len() {
        if in_shape[d] != 1 {
            eff[d + offset] = in_strides[d];
        }
    }
    gather_map(out_shape, &eff)
}

/// Flat source offsets for walking `out_shape` in row-major order when dim
/// `d` advances the source by `eff_strides[d]`.
pub(crate) fn gather_map(out_shape: &[usize], eff_strides: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..total {
        map.push(cur);
        for d in (0..rank).rev() {
            idx[d] += 1;
            cur += eff_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            cur -= eff_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// Broadcast `data` of `in_shape` up to `out_shape`.
pub(crate) fn expand(data: &[f64], in_shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if in_shape == out_shape {
        return data.to_vec();
    }
    broadcast_map(in_shape, out_shape)
        .into_iter()
        .map(|i| data[i])
        .collect()
}

/// Adjoint of [`expand`]: sum a gradient of `out_shape` back onto `in_shape`.
pub(crate) fn reduce(grad: &[f64], in_shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if in_shape == out_shape {
        return grad.to_vec();
    }
    let mut out = vec![0.0; in_shape.iter().product()];
    for (g, i) in grad.iter().zip(broadcast_map(in_shape, out_shape)) {
        out[i] += g;
    }
    out
}
