//! Elementwise activations and their gradients.

use crate::losses::softplus;
use ndarray::ArrayD;

pub fn relu(x: &ArrayD<f64>) -> ArrayD<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient w.r.t. the input, masked by the pre-activation sign.
pub fn relu_grad(x: &ArrayD<f64>, dy: &ArrayD<f64>) -> ArrayD<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn sigmoid(x: &ArrayD<f64>) -> ArrayD<f64> {
    x.mapv(|v| {
        if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        }
    })
}

/// Gradient through a sigmoid given its output y: dy * y * (1 - y).
pub fn sigmoid_grad_from_y(y: &ArrayD<f64>, dy: &ArrayD<f64>) -> ArrayD<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &yv| *d *= yv * (1.0 - yv));
    dx
}

pub fn softplus_arr(x: &ArrayD<f64>) -> ArrayD<f64> {
    x.mapv(softplus)
}

/// d softplus(x)/dx = sigmoid(x).
pub fn softplus_grad(x: &ArrayD<f64>, dy: &ArrayD<f64>) -> ArrayD<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        let s = if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        };
        *d *= s;
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn fd_check(f: impl Fn(&ArrayD<f64>) -> ArrayD<f64>, g: impl Fn(&ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64>) {
        let x = arr1(&[-1.5, -0.3, 0.2, 2.0, 5.0]).into_dyn();
        let dy = arr1(&[0.7, -1.1, 0.4, 1.0, -0.2]).into_dyn();
        let dx = g(&x, &dy);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (&f(&xp) - &f(&xm)).mapv(|v| v / (2.0 * h));
            let expected = fd[i] * dy[i];
            assert!(
                (dx[i] - expected).abs() < 1e-6,
                "idx {i}: analytic {} vs fd {}",
                dx[i],
                expected
            );
        }
    }

    #[test]
    fn relu_gradient_matches_fd() {
        fd_check(relu, relu_grad);
    }

    #[test]
    fn sigmoid_gradient_matches_fd() {
        fd_check(sigmoid, |x, dy| sigmoid_grad_from_y(&sigmoid(x), dy));
    }

    #[test]
    fn softplus_gradient_matches_fd() {
        fd_check(softplus_arr, softplus_grad);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let y = sigmoid(&arr1(&[-750.0, 750.0]).into_dyn());
        assert!(y[0] >= 0.0 && y[0] < 1e-300);
        assert!((y[1] - 1.0).abs() < 1e-15);
    }
}
