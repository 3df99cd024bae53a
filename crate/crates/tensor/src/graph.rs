use std::borrow::Cow;

use crate::error::{Result, TensorError};
use crate::primitive::{eval_primitive, Primitive};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::vjp::vjp;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<'a, T: Real> {
    prim: Option<Primitive>,
    inputs: Vec<Var>,
    value: Cow<'a, Tensor<T>>,
    requires_grad: bool,
}

/// Eagerly evaluated computation record.
///
/// Nodes are appended in evaluation order, so the node list is a topological
/// order and the graph is acyclic by construction. Leaves may borrow their
/// tensors (model weights) for the lifetime of the graph.
pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            prim: None,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed leaf that receives a gradient.
    pub fn param(&mut self, value: &'a Tensor<T>) -> Var {
        self.push_leaf(Cow::Borrowed(value), true)
    }

    /// Owned leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(Cow::Owned(value), true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(Cow::Owned(value), false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.push_leaf(Cow::Borrowed(value), false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn primitive(&self, v: Var) -> Option<&Primitive> {
        self.nodes[v.0].prim.as_ref()
    }

    /// Evaluates `prim` on the values of `inputs` and records the result.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let node = self.nodes.len();
        let value = {
            let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
            eval_primitive(&prim, &values).map_err(|e| match e {
                TensorError::NonFinite { op, .. } => TensorError::NonFinite { op, node: Some(node) },
                other => other,
            })?
        };
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            prim: Some(prim),
            inputs: inputs.to_vec(),
            value: Cow::Owned(value),
            requires_grad,
        });
        Ok(Var(node))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Div, &[a, b])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.apply(Primitive::AddScalar(s), &[x])
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.apply(Primitive::MulScalar(s), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Transpose, &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Primitive::Permute(axes.to_vec()), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[x])
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::BroadcastTo(shape.to_vec()), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat { axis }, xs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Primitive::Slice { axis, start, len }, &[x])
    }

    /// Splits `x` along `axis` into pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let v = self.slice(x, axis, start, len);
                start += len;
                v
            })
            .collect()
    }

    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        self.apply(Primitive::GatherRows(rows.to_vec()), &[table])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        self.apply(Primitive::LayerNorm { eps }, &[x, scale, shift])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Gelu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sqrt, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[x])
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::SumAxis(axis), &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::MeanAxis(axis), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    ///
    /// Gradients are retained for leaves only; intermediate gradients are
    /// released as soon as they have been propagated.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let out = self.value(loss);
        if out.len() != 1 {
            return Err(TensorError::NonScalarLoss(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(out.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(prim) = node.prim.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| self.value(*v)).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = vjp(prim, &inputs, &node.value, &grad, &needs)?;
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !g.all_finite() {
                    return Err(TensorError::NonFiniteGradient {
                        op: prim.name(),
                        node: i,
                    });
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zeros of `like`'s shape when `v` was not reached.
    pub fn take_or_zeros(&mut self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.grads
            .get_mut(v.0)
            .and_then(|g| g.take())
            .unwrap_or_else(|| Tensor::zeros_like(like))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::new([1], vec![3.0]).unwrap());
        let sq = g.square(x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::new([4], vec![0.3, -1.0, 2.0, 0.7]).unwrap());
        let y = g.softmax(x).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.variable(Tensor::ones([3]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn untouched_leaf_gets_zeros() {
        let mut g = Graph::<f32>::new();
        let w = Tensor::ones([2]);
        let used = g.param(&w);
        let unused = g.param(&w);
        let loss = g.sum(used).unwrap();
        let mut grads = g.backward(loss).unwrap();
        assert_eq!(grads.take_or_zeros(unused, &w).data(), &[0.0, 0.0]);
        assert_eq!(grads.take_or_zeros(used, &w).data(), &[1.0, 1.0]);
    }

    #[test]
    fn constants_are_not_differentiated() {
        let mut g = Graph::<f32>::new();
        let c = g.constant(Tensor::ones([2]));
        let x = g.variable(Tensor::ones([2]));
        let y = g.mul(c, x).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn forward_nan_names_node() {
        let mut g = Graph::<f32>::new();
        let x = g.variable(Tensor::new([1], vec![-1.0]).unwrap());
        let err = g.sqrt(x).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "sqrt", node: Some(1) });
    }

    #[test]
    fn nan_gradient_is_reported() {
        let mut g = Graph::<f32>::new();
        let x = g.variable(Tensor::new([1], vec![0.0]).unwrap());
        let y = g.sqrt(x).unwrap();
        let loss = g.sum(y).unwrap();
        assert!(matches!(
            g.backward(loss),
            Err(TensorError::NonFiniteGradient { op: "sqrt", .. })
        ));
    }
}
