//! 2-D convolution (stride 1, configurable padding and dilation) via
//! im2col + GEMM, parallelized over the batch dimension.

use super::{he_normal, join, ParamMut, Params};
use crate::elem::Elem;
use ndarray::{s, Array1, Array2, Array4, ArrayView3, Axis};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub struct Conv2d<F: Elem> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    pub dilation: usize,
    w: Array4<F>,
    b: Array1<F>,
    gw: Array4<F>,
    gb: Array1<F>,
    // Training-mode caches.
    cols: Vec<Array2<F>>,
    in_hw: (usize, usize),
}

impl<F: Elem> Conv2d<F> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        dilation: usize,
    ) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        let fan_in = in_channels * kernel * kernel;
        let w = Array4::from_shape_simple_fn((out_channels, in_channels, kernel, kernel), || {
            he_normal(rng, fan_in)
        });
        Self {
            out_channels,
            in_channels,
            kernel,
            padding,
            dilation,
            w,
            b: Array1::zeros(out_channels),
            gw: Array4::zeros((out_channels, in_channels, kernel, kernel)),
            gb: Array1::zeros(out_channels),
            cols: Vec::new(),
            in_hw: (0, 0),
        }
    }

    pub fn set_bias_constant(&mut self, value: F) {
        self.b.fill(value);
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1);
        (h + 2 * self.padding - span, w + 2 * self.padding - span)
    }

    fn w_mat(&self) -> Array2<F> {
        let k = self.kernel;
        self.w
            .view()
            .into_shape_with_order((self.out_channels, self.in_channels * k * k))
            .expect("contiguous weight")
            .to_owned()
    }

    fn im2col(&self, x: &ArrayView3<F>) -> Array2<F> {
        let (h, w) = (x.dim().1, x.dim().2);
        let (ho, wo) = self.out_hw(h, w);
        let k = self.kernel;
        let (p, d) = (self.padding as i64, self.dilation as i64);
        let mut col = Array2::<F>::zeros((self.in_channels * k * k, ho * wo));
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let mut col_row = col.row_mut(row);
                    let dst = col_row.as_slice_mut().expect("row contiguous");
                    for oy in 0..ho {
                        let iy = oy as i64 + ky as i64 * d - p;
                        if iy < 0 || iy >= h as i64 {
                            continue; // stays zero
                        }
                        // Valid ox range so that ix = ox + kx*d - p lies in [0, w).
                        let off = kx as i64 * d - p;
                        let lo = (-off).max(0) as usize;
                        let hi = ((w as i64 - off).min(wo as i64)).max(0) as usize;
                        if lo >= hi {
                            continue;
                        }
                        let src = x.slice(s![c, iy as usize, (lo as i64 + off) as usize..(hi as i64 + off) as usize]);
                        let src = src.to_slice().expect("input row contiguous");
                        dst[oy * wo + lo..oy * wo + hi].copy_from_slice(src);
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, dcol: &Array2<F>, h: usize, w: usize) -> ndarray::Array3<F> {
        let (ho, wo) = self.out_hw(h, w);
        let k = self.kernel;
        let (p, d) = (self.padding as i64, self.dilation as i64);
        let mut dx = ndarray::Array3::<F>::zeros((self.in_channels, h, w));
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src_row = dcol.row(row);
                    let src = src_row.to_slice().expect("row contiguous");
                    for oy in 0..ho {
                        let iy = oy as i64 + ky as i64 * d - p;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        let off = kx as i64 * d - p;
                        let lo = (-off).max(0) as usize;
                        let hi = ((w as i64 - off).min(wo as i64)).max(0) as usize;
                        if lo >= hi {
                            continue;
                        }
                        let mut dst = dx.slice_mut(s![
                            c,
                            iy as usize,
                            (lo as i64 + off) as usize..(hi as i64 + off) as usize
                        ]);
                        let dst = dst.as_slice_mut().expect("contiguous");
                        for (d_v, s_v) in dst.iter_mut().zip(&src[oy * wo + lo..oy * wo + hi]) {
                            *d_v += *s_v;
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let (bsz, cin, h, w) = x.dim();
        assert_eq!(cin, self.in_channels, "channel mismatch");
        let (ho, wo) = self.out_hw(h, w);
        let w_mat = self.w_mat();

        let per_image: Vec<(Array2<F>, Array2<F>)> = (0..bsz)
            .into_par_iter()
            .map(|b| {
                let col = self.im2col(&x.index_axis(Axis(0), b));
                let mut y = w_mat.dot(&col);
                for (mut row, &bias) in y.axis_iter_mut(Axis(0)).zip(self.b.iter()) {
                    row.mapv_inplace(|v| v + bias);
                }
                (y, col)
            })
            .collect();

        let mut out = Array4::<F>::zeros((bsz, self.out_channels, ho, wo));
        self.cols.clear();
        for (b, (y, col)) in per_image.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), b).assign(
                &y.into_shape_with_order((self.out_channels, ho, wo)).expect("shape"),
            );
            if train {
                self.cols.push(col);
            }
        }
        self.in_hw = (h, w);
        out
    }

    pub fn backward(&mut self, dy: &Array4<F>) -> Array4<F> {
        let (bsz, cout, ho, wo) = dy.dim();
        assert_eq!(cout, self.out_channels);
        assert_eq!(bsz, self.cols.len(), "backward requires a training-mode forward");
        let (h, w) = self.in_hw;
        let w_mat = self.w_mat();
        let k = self.kernel;

        let per_image: Vec<(Array2<F>, Array1<F>, ndarray::Array3<F>)> = (0..bsz)
            .into_par_iter()
            .map(|b| {
                let dy_mat = dy
                    .index_axis(Axis(0), b)
                    .into_shape_with_order((cout, ho * wo))
                    .expect("contiguous dy");
                let col = &self.cols[b];
                let dw = dy_mat.dot(&col.t());
                let db = dy_mat.sum_axis(Axis(1));
                let dcol = w_mat.t().dot(&dy_mat);
                let dx = self.col2im(&dcol, h, w);
                (dw, db, dx)
            })
            .collect();

        let mut dx = Array4::<F>::zeros((bsz, self.in_channels, h, w));
        for (b, (dw, db, dxi)) in per_image.into_iter().enumerate() {
            let dw4 = dw
                .into_shape_with_order((self.out_channels, self.in_channels, k, k))
                .expect("shape");
            self.gw += &dw4;
            self.gb += &db;
            dx.index_axis_mut(Axis(0), b).assign(&dxi);
        }
        dx
    }
}

impl<F: Elem> Params<F> for Conv2d<F> {
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
