//! Raw kernels shared by the forward primitives and their vector-Jacobian
//! products. All loops run in a fixed order so results are reproducible.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::{numel, strides, Tensor};

/// Numpy-style broadcast of two shapes (trailing alignment, extent 1 stretches).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
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

/// Strides of `src` viewed with shape `out` (0 on stretched axes).
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(src);
    let offset = out.len() - src.len();
    (0..out.len())
        .map(|i| {
            if i < offset || src[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Visits every output index of `out_shape` in row-major order together with
/// the matching flat offsets into two broadcast operands.
fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

pub(crate) fn binary_map<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let out_shape = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| TensorError::shape(op, a.shape(), b.shape()))?;
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<T> = if a.shape() == b.shape() {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else if a.shape() == out_shape.as_slice() && is_suffix(b.shape(), &out_shape) {
        let nb = bd.len();
        ad.chunks_exact(nb)
            .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect()
    } else if b.shape() == out_shape.as_slice() && is_suffix(a.shape(), &out_shape) {
        let na = ad.len();
        bd.chunks_exact(na)
            .flat_map(|row| ad.iter().zip(row).map(|(&x, &y)| f(x, y)))
            .collect()
    } else {
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        let mut data = vec![T::zero(); numel(&out_shape)];
        for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
        data
    };
    Tensor::new(out_shape, data)
}

pub(crate) fn broadcast_to<T: Real>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    match broadcast_shape(x.shape(), shape) {
        Some(s) if s == shape => {}
        _ => return Err(TensorError::shape("broadcast_to", x.shape(), shape)),
    }
    let sx = broadcast_strides(x.shape(), shape);
    let zero = vec![0; shape.len()];
    let xd = x.data();
    let mut data = vec![T::zero(); numel(shape)];
    for_each_broadcast(shape, &sx, &zero, |o, ix, _| data[o] = xd[ix]);
    Tensor::new(shape.to_vec(), data)
}

/// Sums `grad` (shaped like a broadcast result) back down to `target`.
pub(crate) fn reduce_to_shape<T: Real>(grad: &Tensor<T>, target: &[usize]) -> Result<Tensor<T>> {
    if grad.shape() == target {
        return Ok(grad.clone());
    }
    let gd = grad.data();
    let mut out = vec![T::zero(); numel(target)];
    if is_suffix(target, grad.shape()) {
        let n = out.len();
        for row in gd.chunks_exact(n) {
            for (o, &g) in out.iter_mut().zip(row) {
                *o = *o + g;
            }
        }
    } else {
        let st = broadcast_strides(target, grad.shape());
        let zero = vec![0; grad.rank()];
        for_each_broadcast(grad.shape(), &st, &zero, |o, it, _| out[it] = out[it] + gd[o]);
    }
    Tensor::new(target.to_vec(), out)
}

/// Split of a matmul operand shape into (batch, rows, cols).
fn matrix_dims(op: &'static str, shape: &[usize], other: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(TensorError::shape(op, shape, other));
    }
    let r = shape.len();
    Ok((numel(&shape[..r - 2]), shape[r - 2], shape[r - 1]))
}

/// `[..., m, k] x [k, n]` (shared right operand) or `[B.., m, k] x [B.., k, n]`.
pub(crate) fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, m, k) = matrix_dims("matmul", a.shape(), b.shape())?;
    let (bb, k2, n) = matrix_dims("matmul", b.shape(), a.shape())?;
    if k != k2 {
        return Err(TensorError::shape("matmul", a.shape(), b.shape()));
    }
    let mut shape = a.shape()[..a.rank() - 2].to_vec();
    shape.extend([m, n]);
    let mut out = vec![T::zero(); batch * m * n];
    if b.rank() == 2 {
        T::gemm(
            batch * m,
            k,
            n,
            a.data(),
            (k as isize, 1),
            b.data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
    } else {
        if a.shape()[..a.rank() - 2] != b.shape()[..b.rank() - 2] || bb != batch {
            return Err(TensorError::shape("matmul", a.shape(), b.shape()));
        }
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
                &b.data()[i * k * n..(i + 1) * k * n],
                (n as isize, 1),
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                (n as isize, 1),
            );
        }
    }
    Tensor::new(shape, out)
}

/// Gradients of `c = a x b` given `dc`.
pub(crate) fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let r = a.rank();
    let (m, k) = (a.shape()[r - 2], a.shape()[r - 1]);
    let n = b.shape()[b.rank() - 1];
    let batch = numel(&a.shape()[..r - 2]);
    let mut da = need_a.then(|| vec![T::zero(); a.len()]);
    let mut db = need_b.then(|| vec![T::zero(); b.len()]);
    if b.rank() == 2 {
        let rows = batch * m;
        if let Some(da) = da.as_mut() {
            // da = dc . b^T
            T::gemm(rows, n, k, dc.data(), (n as isize, 1), b.data(), (1, n as isize), T::zero(), da, (k as isize, 1));
        }
        if let Some(db) = db.as_mut() {
            // db = a^T . dc
            T::gemm(k, rows, n, a.data(), (1, k as isize), dc.data(), (n as isize, 1), T::zero(), db, (n as isize, 1));
        }
    } else {
        for i in 0..batch {
            let ab = &a.data()[i * m * k..(i + 1) * m * k];
            let bb = &b.data()[i * k * n..(i + 1) * k * n];
            let cb = &dc.data()[i * m * n..(i + 1) * m * n];
            if let Some(da) = da.as_mut() {
                T::gemm(m, n, k, cb, (n as isize, 1), bb, (1, n as isize), T::zero(), &mut da[i * m * k..(i + 1) * m * k], (k as isize, 1));
            }
            if let Some(db) = db.as_mut() {
                T::gemm(k, m, n, ab, (1, k as isize), cb, (n as isize, 1), T::zero(), &mut db[i * k * n..(i + 1) * k * n], (n as isize, 1));
            }
        }
    }
    (
        da.map(|d| Tensor::new(a.shape().to_vec(), d).expect("shape of a")),
        db.map(|d| Tensor::new(b.shape().to_vec(), d).expect("shape of b")),
    )
}

pub(crate) fn permute<T: Real>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(TensorError::invalid(
            "permute",
            format!("{axes:?} is not a permutation of the axes of {:?}", x.shape()),
        ));
    }
    let src_strides = strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let permuted: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let zero = vec![0; rank];
    let xd = x.data();
    let mut data = vec![T::zero(); x.len()];
    for_each_broadcast(&out_shape, &permuted, &zero, |o, ix, _| data[o] = xd[ix]);
    Tensor::new(out_shape, data)
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// `(outer, extent, inner)` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

pub(crate) fn sum_axis<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(TensorError::invalid(
            "sum_axis",
            format!("axis {axis} out of range for {:?}", x.shape()),
        ));
    }
    let (outer, extent, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for e in 0..extent {
            let src = &xd[(o * extent + e) * inner..(o * extent + e + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Tensor::new(shape, out)
}

/// Repeats `g` (shape of `shape` without `axis`) along `axis`.
pub(crate) fn expand_axis<T: Real>(g: &Tensor<T>, shape: &[usize], axis: usize, scale: T) -> Tensor<T> {
    let (outer, extent, inner) = axis_split(shape, axis);
    let gd = g.data();
    let mut out = Vec::with_capacity(outer * extent * inner);
    for o in 0..outer {
        let src = &gd[o * inner..(o + 1) * inner];
        for _ in 0..extent {
            out.extend(src.iter().map(|&v| v * scale));
        }
    }
    Tensor::new(shape.to_vec(), out).expect("expand_axis shape")
}

pub(crate) fn last_dim<T: Real>(op: &'static str, x: &Tensor<T>) -> Result<usize> {
    x.shape()
        .last()
        .copied()
        .ok_or_else(|| TensorError::invalid(op, "requires rank >= 1"))
}

pub(crate) fn softmax<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let d = last_dim("softmax", x)?;
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(d) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Per-row mean and reciprocal standard deviation (biased variance).
pub(crate) fn row_moments<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::lit(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, (var + eps).sqrt().recip())
}

pub(crate) fn layer_norm<T: Real>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let d = last_dim("layer_norm", x)?;
    if scale.shape() != [d] || shift.shape() != [d] {
        return Err(TensorError::shape("layer_norm", x.shape(), scale.shape()));
    }
    let (g, b) = (scale.data(), shift.data());
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(d) {
        let (mean, rstd) = row_moments(row, eps);
        for ((v, &gi), &bi) in row.iter_mut().zip(g).zip(b) {
            *v = (*v - mean) * rstd * gi + bi;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn gelu<T: Real>(v: T) -> T {
    let half = T::lit(0.5);
    half * v * (T::one() + (v * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<T: Real>(v: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (v * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(v * v) * T::lit(0.5)).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + v * pdf
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        (T::one() + (-v).exp()).recip()
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn concat<T: Real>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
    if axis >= first.rank() {
        return Err(TensorError::invalid(
            "concat",
            format!("axis {axis} out of range for {:?}", first.shape()),
        ));
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for x in xs {
        let ok = x.rank() == first.rank()
            && x.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(TensorError::shape("concat", first.shape(), x.shape()));
        }
        shape[axis] += x.shape()[axis];
    }
    let (outer, _, inner) = axis_split(first.shape(), axis);
    let mut out = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for x in xs {
            let chunk = x.shape()[axis] * inner;
            out.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(shape, out)
}

pub(crate) fn slice_axis<T: Real>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
        return Err(TensorError::invalid(
            "slice",
            format!("[{start}, {}) along axis {axis} of {:?}", start + len, x.shape()),
        ));
    }
    let (outer, extent, inner) = axis_split(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, out)
}

pub(crate) fn gather_rows<T: Real>(table: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    if table.rank() != 2 {
        return Err(TensorError::invalid(
            "gather_rows",
            format!("table must be rank 2, got {:?}", table.shape()),
        ));
    }
    let (n, d) = (table.shape()[0], table.shape()[1]);
    if rows.is_empty() {
        return Err(TensorError::invalid("gather_rows", "empty index list"));
    }
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        if r >= n {
            return Err(TensorError::invalid(
                "gather_rows",
                format!("row {r} out of range for table with {n} rows"),
            ));
        }
        out.extend_from_slice(&table.data()[r * d..(r + 1) * d]);
    }
    Tensor::new(vec![rows.len(), d], out)
}
