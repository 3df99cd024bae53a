//! Vector-Jacobian products for every primitive.

use crate::error::Result;
use crate::kernels;
use crate::primitive::Primitive;
use crate::real::Real;
use crate::tensor::Tensor;

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Gradient of each input given the gradient of the output.
///
/// Entries for inputs with `needs[i] == false` are `None`.
pub(crate) fn vjp<T: Real>(
    prim: &Primitive,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    grad: &Tensor<T>,
    needs: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let x = inputs[0];
    let one = |g: Tensor<T>| vec![Some(g)];
    let grads = match prim {
        Primitive::MatMul => {
            let (da, db) = kernels::matmul_backward(x, inputs[1], grad, needs[0], needs[1]);
            vec![da, db]
        }
        Primitive::Add | Primitive::Sub => {
            let b = inputs[1];
            let da = if needs[0] { Some(kernels::reduce_to_shape(grad, x.shape())?) } else { None };
            let db = if needs[1] {
                let g = kernels::reduce_to_shape(grad, b.shape())?;
                Some(if *prim == Primitive::Sub { g.map(|v| -v) } else { g })
            } else {
                None
            };
            vec![da, db]
        }
        Primitive::Mul => {
            let b = inputs[1];
            let da = if needs[0] {
                let full = kernels::binary_map("mul", grad, b, |g, y| g * y)?;
                Some(kernels::reduce_to_shape(&full, x.shape())?)
            } else {
                None
            };
            let db = if needs[1] {
                let full = kernels::binary_map("mul", grad, x, |g, y| g * y)?;
                Some(kernels::reduce_to_shape(&full, b.shape())?)
            } else {
                None
            };
            vec![da, db]
        }
        Primitive::Div => {
            let b = inputs[1];
            let da = if needs[0] {
                let full = kernels::binary_map("div", grad, b, |g, y| g / y)?;
                Some(kernels::reduce_to_shape(&full, x.shape())?)
            } else {
                None
            };
            let db = if needs[1] {
                // d(a/b)/db = -(a/b)/b = -out/b
                let q = kernels::binary_map("div", output, b, |o, y| o / y)?;
                let full = zip_map(grad, &q, |g, v| -g * v);
                Some(kernels::reduce_to_shape(&full, b.shape())?)
            } else {
                None
            };
            vec![da, db]
        }
        Primitive::AddScalar(_) | Primitive::Reshape(_) => {
            one(grad.clone().reshape(x.shape().to_vec())?)
        }
        Primitive::MulScalar(s) => {
            let s = T::lit(*s);
            one(grad.map(|g| g * s))
        }
        Primitive::Transpose => one(kernels::permute(grad, &{
            let r = grad.rank();
            let mut axes: Vec<usize> = (0..r).collect();
            axes.swap(r - 2, r - 1);
            axes
        })?),
        Primitive::Permute(axes) => one(kernels::permute(grad, &kernels::inverse_permutation(axes))?),
        Primitive::BroadcastTo(_) => one(kernels::reduce_to_shape(grad, x.shape())?),
        Primitive::Concat { axis } => {
            let mut start = 0;
            let mut out = Vec::with_capacity(inputs.len());
            for (input, &need) in inputs.iter().zip(needs) {
                let len = input.shape()[*axis];
                out.push(if need {
                    Some(kernels::slice_axis(grad, *axis, start, len)?)
                } else {
                    None
                });
                start += len;
            }
            out
        }
        Primitive::Slice { axis, start, len } => {
            let (outer, extent, inner) = kernels::axis_split(x.shape(), *axis);
            let mut dx = vec![T::zero(); x.len()];
            let gd = grad.data();
            for o in 0..outer {
                let dst = (o * extent + start) * inner;
                dx[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            one(Tensor::new(x.shape().to_vec(), dx)?)
        }
        Primitive::GatherRows(rows) => {
            let d = x.shape()[1];
            let mut dx = vec![T::zero(); x.len()];
            for (i, &r) in rows.iter().enumerate() {
                let src = &grad.data()[i * d..(i + 1) * d];
                for (acc, &g) in dx[r * d..(r + 1) * d].iter_mut().zip(src) {
                    *acc = *acc + g;
                }
            }
            one(Tensor::new(x.shape().to_vec(), dx)?)
        }
        Primitive::Softmax => {
            let d = kernels::last_dim("softmax", x)?;
            let mut dx = Vec::with_capacity(x.len());
            for (y, g) in output.data().chunks_exact(d).zip(grad.data().chunks_exact(d)) {
                let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                dx.extend(y.iter().zip(g).map(|(&yi, &gi)| yi * (gi - dot)));
            }
            one(Tensor::new(x.shape().to_vec(), dx)?)
        }
        Primitive::LayerNorm { eps } => layer_norm_vjp(x, inputs[1], grad, T::lit(*eps), needs)?,
        Primitive::Gelu => one(zip_map(grad, x, |g, v| g * kernels::gelu_grad(v))),
        Primitive::Sigmoid => one(zip_map(grad, output, |g, y| g * y * (T::one() - y))),
        Primitive::Sqrt => one(zip_map(grad, output, |g, y| g / (y + y))),
        Primitive::Relu => one(zip_map(grad, x, |g, v| if v > T::zero() { g } else { T::zero() })),
        Primitive::Sum => {
            let g = grad.item()?;
            one(Tensor::full(x.shape().to_vec(), g))
        }
        Primitive::Mean => {
            let g = grad.item()? / T::lit(x.len() as f64);
            one(Tensor::full(x.shape().to_vec(), g))
        }
        Primitive::SumAxis(axis) => one(kernels::expand_axis(grad, x.shape(), *axis, T::one())),
        Primitive::MeanAxis(axis) => {
            let scale = T::lit(x.shape()[*axis] as f64).recip();
            one(kernels::expand_axis(grad, x.shape(), *axis, scale))
        }
    };
    Ok(grads
        .into_iter()
        .zip(needs)
        .map(|(g, &need)| if need { g } else { None })
        .collect())
}

fn layer_norm_vjp<T: Real>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    grad: &Tensor<T>,
    eps: T,
    needs: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let d = kernels::last_dim("layer_norm", x)?;
    let n = T::lit(d as f64);
    let gamma = scale.data();
    let mut dx = vec![T::zero(); x.len()];
    let mut dscale = vec![T::zero(); d];
    let mut dshift = vec![T::zero(); d];
    let mut xhat = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for ((row, g), out) in x
        .data()
        .chunks_exact(d)
        .zip(grad.data().chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
    {
        let (mean, rstd) = kernels::row_moments(row, eps);
        for i in 0..d {
            xhat[i] = (row[i] - mean) * rstd;
            dxhat[i] = g[i] * gamma[i];
            dscale[i] = dscale[i] + g[i] * xhat[i];
            dshift[i] = dshift[i] + g[i];
        }
        let mean_dxhat = dxhat.iter().copied().sum::<T>() / n;
        let mean_dxhat_xhat = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / n;
        for i in 0..d {
            out[i] = rstd * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
        }
    }
    Ok(vec![
        needs[0].then(|| Tensor::new(x.shape().to_vec(), dx)).transpose()?,
        needs[1].then(|| Tensor::new(vec![d], dscale)).transpose()?,
        needs[2].then(|| Tensor::new(vec![d], dshift)).transpose()?,
    ])
}
