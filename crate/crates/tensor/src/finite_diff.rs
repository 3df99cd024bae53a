use crate::error::Result;
use crate::real::Real;
use crate::tensor::Tensor;

/// Central-difference gradient `(f(p + h) - f(p - h)) / 2h`, one coordinate
/// at a time.
pub fn finite_diff_gradient<T, F>(mut f: F, params: &[Tensor<T>], step: T) -> Result<Vec<Tensor<T>>>
where
    T: Real,
    F: FnMut(&[Tensor<T>]) -> Result<T>,
{
    assert!(step > T::zero(), "finite-difference step must be positive");
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Tensor::zeros_like(&params[p]);
        for i in 0..params[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let plus = f(&work)?;
            work[p].data_mut()[i] = orig - step;
            let minus = f(&work)?;
            work[p].data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (step + step);
        }
        out.push(grad);
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps coordinates whose true gradient is ~0 from dividing
/// round-off by round-off.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_relative_error<T: Real>(analytic: &[Tensor<T>], numeric: &[Tensor<T>], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(&a, &n)| relative_error(a.to_f64().unwrap_or(f64::NAN), n.to_f64().unwrap_or(f64::NAN), floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let p = vec![Tensor::new([1], vec![3.0f64]).unwrap()];
        let g = finite_diff_gradient(|p| Ok(p[0].data()[0] * p[0].data()[0]), &p, 1e-3).unwrap();
        assert!((g[0].data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let p = vec![Tensor::<f64>::from_fn([2, 3], |i| i as f64)];
        let g = finite_diff_gradient(|_| Ok(4.2), &p, 1e-3).unwrap();
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }
}
