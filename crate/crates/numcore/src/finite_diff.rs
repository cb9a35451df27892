use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Central-difference gradient `(f(p + h) - f(p - h)) / 2h` of `f` with
/// respect to every coordinate of every tensor in `params`.
pub fn finite_diff<F>(mut f: F, params: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if !(h > 0.0) {
        return contract(format!("finite difference step must be positive, got {h}"));
    }
    let mut probe = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut grad = Tensor::zeros(params[t].shape());
        for i in 0..params[t].len() {
            let orig = params[t].data()[i];
            probe[t].data_mut()[i] = orig + h;
            let up = f(&probe)?;
            probe[t].data_mut()[i] = orig - h;
            let down = f(&probe)?;
            probe[t].data_mut()[i] = orig;
            grad.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff(|p| Ok(p[0].item()?.powi(2)), &[Tensor::scalar(3.0)], 1e-5).unwrap();
        assert!((g[0].item().unwrap() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_is_flat() {
        let g = finite_diff(|_| Ok(7.0), &[Tensor::vector(&[1.0, -2.0, 3.0])], 1e-5).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sine_at_zero() {
        let g = finite_diff(|p| Ok(p[0].item()?.sin()), &[Tensor::scalar(0.0)], 1e-5).unwrap();
        // sin(h)/h = 1 - h^2/6
        assert!((g[0].item().unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert!(finite_diff(|_| Ok(0.0), &[Tensor::scalar(0.0)], 0.0).is_err());
    }
}
