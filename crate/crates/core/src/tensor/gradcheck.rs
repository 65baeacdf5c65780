//! Central finite differences, used as an independent oracle for autodiff.

use super::Tensor;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate `i`.
pub fn finite_difference_grad<F>(f: F, x: &Tensor, h: f64) -> Tensor
where
    F: Fn(&Tensor) -> f64,
{
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape as input")
}

/// Largest relative error between two gradients, with `abs_floor` guarding
/// coordinates where both are near zero.
pub fn max_rel_error(autodiff: &Tensor, numeric: &Tensor, abs_floor: f64) -> f64 {
    autodiff
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(abs_floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_difference_grad(|x| x.item() * x.item(), &Tensor::scalar(3.0), 1e-5);
        assert!((g.item() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.0, 0.0]);
        let f = |x: &Tensor| {
            let max = x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = x.data().iter().map(|v| (v - max).exp()).sum();
            x.data().iter().map(|v| (v - max).exp() / z).sum::<f64>()
        };
        let g = finite_difference_grad(f, &x, 1e-5);
        assert!(g.data().iter().all(|v| v.abs() < 1e-9));
    }
}
