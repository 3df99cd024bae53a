//! Every primitive's backward rule against central finite differences.

use intra_tensor::{
    eval_primitive, finite_diff_gradient, max_relative_error, Graph, Primitive, Result, Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-3;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// `sum(weights * prim(inputs))`, a generic scalar probe of the primitive.
fn probe(prim: &Primitive, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> Result<f64> {
    let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
    let y = eval_primitive(prim, &refs)?;
    Ok(y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
}

fn check(prim: Primitive, inputs: Vec<Tensor<f64>>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
    let out_shape = eval_primitive(&prim, &refs).unwrap().shape().to_vec();
    let weights = random(&mut rng, &out_shape, -1.0, 1.0);

    let mut g = Graph::<f64>::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.param(t)).collect();
    let y = g.apply(prim.clone(), &vars).unwrap();
    let w = g.constant(weights.clone());
    let prod = g.mul(y, w).unwrap();
    let loss = g.sum(prod).unwrap();
    let mut grads = g.backward(loss).unwrap();
    let analytic: Vec<_> = vars
        .iter()
        .zip(&inputs)
        .map(|(v, t)| grads.take_or_zeros(*v, t))
        .collect();

    let numeric = finite_diff_gradient(|p| probe(&prim, p, &weights), &inputs, STEP).unwrap();
    let err = max_relative_error(&analytic, &numeric, FLOOR);
    assert!(err < TOL, "{}: max relative error {err:e}", prim.name());
}

#[test]
fn matmul_shared_rhs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    check(
        Primitive::MatMul,
        vec![random(&mut rng, &[2, 3, 4], -1.0, 1.0), random(&mut rng, &[4, 5], -1.0, 1.0)],
        11,
    );
}

#[test]
fn matmul_batched() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    check(
        Primitive::MatMul,
        vec![random(&mut rng, &[3, 2, 4], -1.0, 1.0), random(&mut rng, &[3, 4, 2], -1.0, 1.0)],
        12,
    );
}

#[test]
fn elementwise_binary_with_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for prim in [Primitive::Add, Primitive::Sub, Primitive::Mul] {
        check(
            prim.clone(),
            vec![random(&mut rng, &[2, 3, 4], -1.0, 1.0), random(&mut rng, &[3, 1], -1.0, 1.0)],
            13,
        );
        check(
            prim,
            vec![random(&mut rng, &[4], -1.0, 1.0), random(&mut rng, &[2, 4], -1.0, 1.0)],
            14,
        );
    }
    check(
        Primitive::Div,
        vec![random(&mut rng, &[2, 3], -1.0, 1.0), random(&mut rng, &[3], 0.5, 2.0)],
        15,
    );
}

#[test]
fn scalar_and_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[2, 3, 4], -1.0, 1.0);
    for prim in [
        Primitive::AddScalar(0.7),
        Primitive::MulScalar(-1.3),
        Primitive::Transpose,
        Primitive::Permute(vec![1, 2, 0]),
        Primitive::Reshape(vec![6, 4]),
        Primitive::Slice { axis: 2, start: 1, len: 2 },
        Primitive::Sum,
        Primitive::Mean,
        Primitive::SumAxis(1),
        Primitive::MeanAxis(0),
    ] {
        check(prim, vec![x.clone()], 16);
    }
    check(
        Primitive::BroadcastTo(vec![2, 3, 4]),
        vec![random(&mut rng, &[3, 1], -1.0, 1.0)],
        17,
    );
    check(
        Primitive::Concat { axis: 1 },
        vec![random(&mut rng, &[2, 1, 3], -1.0, 1.0), random(&mut rng, &[2, 2, 3], -1.0, 1.0)],
        18,
    );
    check(
        Primitive::GatherRows(vec![3, 0, 3, 1]),
        vec![random(&mut rng, &[5, 3], -1.0, 1.0)],
        19,
    );
}

#[test]
fn nonlinearities() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[3, 5], -3.0, 3.0);
    for prim in [Primitive::Softmax, Primitive::Gelu, Primitive::Sigmoid] {
        check(prim, vec![x.clone()], 20);
    }
    // keep away from the kinks / singularities
    let pos = random(&mut rng, &[3, 5], 0.2, 2.0);
    check(Primitive::Sqrt, vec![pos.clone()], 21);
    let signed = pos.map(|v| if v > 1.0 { v } else { -v });
    check(Primitive::Relu, vec![signed], 22);
}

#[test]
fn layer_norm_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    check(
        Primitive::LayerNorm { eps: 1e-5 },
        vec![
            random(&mut rng, &[4, 6], -2.0, 2.0),
            random(&mut rng, &[6], 0.5, 1.5),
            random(&mut rng, &[6], -0.5, 0.5),
        ],
        23,
    );
}

#[test]
fn random_quadratic_agrees_to_1e8() {
    // f(p) = 0.5 p^T A p + b^T p with analytic gradient 0.5 (A + A^T) p + b
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, &[5, 5], -1.0, 1.0);
    let b = random(&mut rng, &[5], -1.0, 1.0);
    let p = random(&mut rng, &[5], -1.0, 1.0);

    let f = |p: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let pv = g.constant(p[0].clone().reshape([1, 5])?);
        let av = g.constant(a.clone());
        let ap = g.matmul(pv, av)?;
        let quad = g.mul(ap, pv)?;
        let half = g.mul_scalar(quad, 0.5)?;
        let bv = g.constant(b.clone());
        let lin = g.mul(pv, bv)?;
        let s1 = g.sum(half)?;
        let s2 = g.sum(lin)?;
        let total = g.add(s1, s2)?;
        g.value(total).item()
    };

    let mut g = Graph::new();
    let pv0 = g.param(&p);
    let pv = g.reshape(pv0, &[1, 5]).unwrap();
    let av = g.constant(a.clone());
    let ap = g.matmul(pv, av).unwrap();
    let quad = g.mul(ap, pv).unwrap();
    let half = g.mul_scalar(quad, 0.5).unwrap();
    let bv = g.constant(b.clone());
    let lin = g.mul(pv, bv).unwrap();
    let s1 = g.sum(half).unwrap();
    let s2 = g.sum(lin).unwrap();
    let total = g.add(s1, s2).unwrap();
    let grads = g.backward(total).unwrap();
    let backward = grads.get(pv0).unwrap().clone();

    let numeric = finite_diff_gradient(f, std::slice::from_ref(&p), 1e-3).unwrap();
    for i in 0..5 {
        let exact: f64 = (0..5)
            .map(|j| 0.5 * (a.data()[i * 5 + j] + a.data()[j * 5 + i]) * p.data()[j])
            .sum::<f64>()
            + b.data()[i];
        assert!((backward.data()[i] - exact).abs() < 1e-12);
        assert!((numeric[0].data()[i] - backward.data()[i]).abs() < 1e-8);
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f32>::from_fn([rows, cols], |_| (rng.gen_range(-1.0..1.0) * scale) as f32);
        let y = eval_primitive(&Primitive::Softmax, &[&x]).unwrap();
        for row in y.data().chunks(cols) {
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn primitives_are_pure(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f32>::from_fn([4, 6], |_| rng.gen_range(-2.0..2.0));
        let w = Tensor::<f32>::from_fn([6, 3], |_| rng.gen_range(-2.0..2.0));
        for prim in [Primitive::Softmax, Primitive::Gelu, Primitive::Sigmoid, Primitive::Transpose] {
            let a = eval_primitive(&prim, &[&x]).unwrap();
            let b = eval_primitive(&prim, &[&x]).unwrap();
            prop_assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
        let a = eval_primitive(&Primitive::MatMul, &[&x, &w]).unwrap();
        let b = eval_primitive(&Primitive::MatMul, &[&x, &w]).unwrap();
        prop_assert_eq!(a, b);
    }
}
