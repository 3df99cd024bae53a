use crate::error::{Result, TensorError};
use crate::kernels;
use crate::real::Real;
use crate::tensor::Tensor;

/// The catalog of differentiable operations.
///
/// Axis arguments refer to the input shape. `Transpose` swaps the two
/// trailing axes; `Softmax` and `LayerNorm` act on the last axis.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar(f64),
    MulScalar(f64),
    Transpose,
    Permute(Vec<usize>),
    Reshape(Vec<usize>),
    BroadcastTo(Vec<usize>),
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    /// Rows of a rank-2 table; the index list is part of the tag.
    GatherRows(Vec<usize>),
    Softmax,
    /// Inputs: `x`, `scale`, `shift`.
    LayerNorm { eps: f64 },
    Gelu,
    Sigmoid,
    Sqrt,
    Relu,
    Sum,
    Mean,
    SumAxis(usize),
    MeanAxis(usize),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::AddScalar(_) => "add_scalar",
            Primitive::MulScalar(_) => "mul_scalar",
            Primitive::Transpose => "transpose",
            Primitive::Permute(_) => "permute",
            Primitive::Reshape(_) => "reshape",
            Primitive::BroadcastTo(_) => "broadcast_to",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::GatherRows(_) => "gather_rows",
            Primitive::Softmax => "softmax",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::Gelu => "gelu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Sqrt => "sqrt",
            Primitive::Relu => "relu",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::SumAxis(_) => "sum_axis",
            Primitive::MeanAxis(_) => "mean_axis",
        }
    }

    /// Number of inputs, `None` for variadic primitives.
    pub fn arity(&self) -> Option<usize> {
        match self {
            Primitive::MatMul
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Div => Some(2),
            Primitive::LayerNorm { .. } => Some(3),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

fn unary<T: Real>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    x.map(f)
}

/// Evaluates one primitive on concrete inputs.
///
/// Pure: identical inputs give bit-identical outputs. A non-finite result on
/// finite inputs is reported as an error rather than returned.
pub fn eval_primitive<T: Real>(prim: &Primitive, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if let Some(n) = prim.arity() {
        if inputs.len() != n {
            return Err(TensorError::Arity {
                op: prim.name(),
                expected: n,
                got: inputs.len(),
            });
        }
    }
    let x = inputs[0];
    let out = match prim {
        Primitive::MatMul => kernels::matmul(x, inputs[1])?,
        Primitive::Add => kernels::binary_map("add", x, inputs[1], |a, b| a + b)?,
        Primitive::Sub => kernels::binary_map("sub", x, inputs[1], |a, b| a - b)?,
        Primitive::Mul => kernels::binary_map("mul", x, inputs[1], |a, b| a * b)?,
        Primitive::Div => kernels::binary_map("div", x, inputs[1], |a, b| a / b)?,
        Primitive::AddScalar(s) => {
            let s = T::lit(*s);
            unary(x, |v| v + s)
        }
        Primitive::MulScalar(s) => {
            let s = T::lit(*s);
            unary(x, |v| v * s)
        }
        Primitive::Transpose => {
            let r = x.rank();
            if r < 2 {
                return Err(TensorError::invalid("transpose", "requires rank >= 2"));
            }
            let mut axes: Vec<usize> = (0..r).collect();
            axes.swap(r - 2, r - 1);
            kernels::permute(x, &axes)?
        }
        Primitive::Permute(axes) => kernels::permute(x, axes)?,
        Primitive::Reshape(shape) => {
            if shape.iter().product::<usize>() != x.len() {
                return Err(TensorError::shape("reshape", x.shape(), shape));
            }
            x.clone().reshape(shape.clone())?
        }
        Primitive::BroadcastTo(shape) => kernels::broadcast_to(x, shape)?,
        Primitive::Concat { axis } => kernels::concat(inputs, *axis)?,
        Primitive::Slice { axis, start, len } => kernels::slice_axis(x, *axis, *start, *len)?,
        Primitive::GatherRows(rows) => kernels::gather_rows(x, rows)?,
        Primitive::Softmax => kernels::softmax(x)?,
        Primitive::LayerNorm { eps } => kernels::layer_norm(x, inputs[1], inputs[2], T::lit(*eps))?,
        Primitive::Gelu => unary(x, kernels::gelu),
        Primitive::Sigmoid => unary(x, kernels::sigmoid),
        Primitive::Sqrt => unary(x, |v| v.sqrt()),
        Primitive::Relu => unary(x, |v| if v > T::zero() { v } else { T::zero() }),
        Primitive::Sum => Tensor::scalar(x.data().iter().copied().sum()),
        Primitive::Mean => Tensor::scalar(x.data().iter().copied().sum::<T>() / T::lit(x.len() as f64)),
        Primitive::SumAxis(axis) => kernels::sum_axis(x, *axis)?,
        Primitive::MeanAxis(axis) => {
            let s = kernels::sum_axis(x, *axis)?;
            let n = T::lit(x.shape()[*axis] as f64);
            s.map(|v| v / n)
        }
    };
    if !out.all_finite() && inputs.iter().all(|t| t.all_finite()) {
        return Err(TensorError::NonFinite {
            op: prim.name(),
            node: None,
        });
    }
    Ok(out)
}
