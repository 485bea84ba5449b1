//! Token-wise linear layer on `[B, T, C]` tensors.

use super::{join, xavier_normal, ParamMut, Params};
use crate::elem::Elem;
use ndarray::{Array1, Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub struct Linear<F: Elem> {
    pub in_dim: usize,
    pub out_dim: usize,
    w: Array2<F>,
    b: Array1<F>,
    gw: Array2<F>,
    gb: Array1<F>,
    x: Array3<F>,
}

impl<F: Elem> Linear<F> {
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Self {
        let w = Array2::from_shape_simple_fn((out_dim, in_dim), || {
            xavier_normal(rng, in_dim, out_dim)
        });
        Self {
            in_dim,
            out_dim,
            w,
            b: Array1::zeros(out_dim),
            gw: Array2::zeros((out_dim, in_dim)),
            gb: Array1::zeros(out_dim),
            x: Array3::zeros((0, 0, 0)),
        }
    }

    /// Zero-initialized variant: the layer starts as the zero map, so a
    /// residual branch through it starts as the identity.
    pub fn new_zeroed(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            w: Array2::zeros((out_dim, in_dim)),
            b: Array1::zeros(out_dim),
            gw: Array2::zeros((out_dim, in_dim)),
            gb: Array1::zeros(out_dim),
            x: Array3::zeros((0, 0, 0)),
        }
    }

    pub fn forward(&mut self, x: &Array3<F>, train: bool) -> Array3<F> {
        let (bsz, t, c) = x.dim();
        assert_eq!(c, self.in_dim, "feature dim mismatch");
        let per_image: Vec<Array2<F>> = (0..bsz)
            .into_par_iter()
            .map(|b| {
                let mut y = x.index_axis(Axis(0), b).dot(&self.w.t());
                for mut row in y.axis_iter_mut(Axis(0)) {
                    row += &self.b;
                }
                y
            })
            .collect();
        let mut out = Array3::<F>::zeros((bsz, t, self.out_dim));
        for (b, y) in per_image.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), b).assign(&y);
        }
        if train {
            self.x = x.clone();
        }
        out
    }

    pub fn backward(&mut self, dy: &Array3<F>) -> Array3<F> {
        let (bsz, t, _) = dy.dim();
        assert_eq!(self.x.dim().0, bsz, "backward requires a training-mode forward");
        let per_image: Vec<(Array2<F>, Array1<F>, Array2<F>)> = (0..bsz)
            .into_par_iter()
            .map(|b| {
                let dy_b = dy.index_axis(Axis(0), b);
                let x_b = self.x.index_axis(Axis(0), b);
                let dw = dy_b.t().dot(&x_b);
                let db = dy_b.sum_axis(Axis(0));
                let dx = dy_b.dot(&self.w);
                (dw, db, dx)
            })
            .collect();
        let mut dx = Array3::<F>::zeros((bsz, t, self.in_dim));
        for (b, (dw, db, dxi)) in per_image.into_iter().enumerate() {
            self.gw += &dw;
            self.gb += &db;
            dx.index_axis_mut(Axis(0), b).assign(&dxi);
        }
        dx
    }
}

impl<F: Elem> Params<F> for Linear<F> {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>) {
        out.push(ParamMut {
            name: join(prefix, "weight"),
            value: self.w.view_mut().into_dyn(),
            grad: self.gw.view_mut().into_dyn(),
        });
        out.push(ParamMut {
            name: join(prefix, "bias"),
            value: self.b.view_mut().into_dyn(),
            grad: self.gb.view_mut().into_dyn(),
        });
    }
}
