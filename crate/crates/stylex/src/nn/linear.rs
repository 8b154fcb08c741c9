//! Fully-connected layer.

use ndarray::{Array2, ArrayView2, Ix2};
use rand_chacha::ChaCha8Rng;

use super::{init::kaiming_uniform, Param, Parameterized};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param, // (out, in)
    pub b: Param, // (out,)
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = kaiming_uniform(rng, &[out_dim, in_dim], in_dim);
        let b = kaiming_uniform(rng, &[out_dim], in_dim);
        Linear {
            w: Param::new(format!("{name}.w"), w),
            b: Param::new(format!("{name}.b"), b),
            in_dim,
            out_dim,
        }
    }

    fn w2(&self) -> ArrayView2<'_, f64> {
        self.w.value.view().into_dimensionality::<Ix2>().unwrap()
    }

    /// x: (N, in) -> (N, out)
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.ncols(), self.in_dim, "linear input width");
        let mut y = x.dot(&self.w2().t());
        let b = &self.b.value;
        for mut row in y.rows_mut() {
            for (v, bv) in row.iter_mut().zip(b.iter()) {
                *v += bv;
            }
        }
        y
    }

    /// Accumulates dW, db; returns dx.
    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        let dw = dy.t().dot(x); // (out, in)
        let db = dy.sum_axis(ndarray::Axis(0)); // (out,)
        self.w.grad += &dw.into_dyn();
        self.b.grad += &db.into_dyn();
        dy.dot(&self.w2())
    }
}

impl Parameterized for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}
