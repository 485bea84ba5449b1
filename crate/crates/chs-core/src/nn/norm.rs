//! Batch normalization (2-D) and layer normalization.
//!
//! Batch statistics are accumulated in f64 in a fixed (batch-major) order
//! and per-channel work runs on contiguous slices, parallel over channels or
//! rows; every reduction has a fixed grouping, so results are bit-identical
//! regardless of thread count. Training mode normalizes with per-batch
//! statistics (biased variance) and updates the running estimates;
//! evaluation mode normalizes with the running estimates.

use super::{join, ParamMut, Params};
use crate::elem::Elem;
use ndarray::{Array1, Array2, Array3, Array4};
use rayon::prelude::*;

pub struct BatchNorm2d<F: Elem> {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    gamma: Array1<F>,
    beta: Array1<F>,
    g_gamma: Array1<F>,
    g_beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    // Caches from a training-mode forward.
    xhat: Array4<F>,
    inv_std: Vec<f64>,
}

impl<F: Elem> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            eps: 1e-5,
            momentum: 0.1,
            gamma: Array1::from_elem(channels, F::one()),
            beta: Array1::zeros(channels),
            g_gamma: Array1::zeros(channels),
            g_beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::from_elem(channels, F::one()),
            xhat: Array4::zeros((0, 0, 0, 0)),
            inv_std: Vec::new(),
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let (bsz, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "channel mismatch");
        let hw = h * w;
        let xs = x.as_slice().expect("standard layout");
        let mut y = Array4::<F>::zeros((bsz, c, h, w));

        if train {
            let n = (bsz * hw) as f64;
            // Two-pass per-channel statistics, batch-major accumulation.
            let stats: Vec<(f64, f64)> = (0..c)
                .into_par_iter()
                .map(|ch| {
                    let mut sum = 0.0;
                    for b in 0..bsz {
                        for &v in &xs[(b * c + ch) * hw..(b * c + ch) * hw + hw] {
                            sum += v.f64();
                        }
                    }
                    let mean = sum / n;
                    let mut var = 0.0;
                    for b in 0..bsz {
                        for &v in &xs[(b * c + ch) * hw..(b * c + ch) * hw + hw] {
                            var += (v.f64() - mean).powi(2);
                        }
                    }
                    (mean, 1.0 / (var / n + self.eps).sqrt())
                })
                .collect();

            let mut xhat = Array4::<F>::zeros((bsz, c, h, w));
            {
                let ys = y.as_slice_mut().expect("standard layout");
                let xh = xhat.as_slice_mut().expect("standard layout");
                ys.par_chunks_mut(hw)
                    .zip(xh.par_chunks_mut(hw))
                    .zip(xs.par_chunks(hw))
                    .enumerate()
                    .for_each(|(i, ((yc, xhc), xc))| {
                        let ch = i % c;
                        let (mean, istd) = stats[ch];
                        let mean = F::of(mean);
                        let istd = F::of(istd);
                        let g = self.gamma[ch];
                        let b = self.beta[ch];
                        for j in 0..hw {
                            let hat = (xc[j] - mean) * istd;
                            xhc[j] = hat;
                            yc[j] = g * hat + b;
                        }
                    });
            }
            for ch in 0..c {
                let (mean, istd) = stats[ch];
                let var = 1.0 / (istd * istd) - self.eps;
                let rm = self.running_mean[ch].f64();
                let rv = self.running_var[ch].f64();
                self.running_mean[ch] = F::of((1.0 - self.momentum) * rm + self.momentum * mean);
                self.running_var[ch] = F::of((1.0 - self.momentum) * rv + self.momentum * var);
            }
            self.xhat = xhat;
            self.inv_std = stats.iter().map(|&(_, istd)| istd).collect();
        } else {
            let ys = y.as_slice_mut().expect("standard layout");
            ys.par_chunks_mut(hw).zip(xs.par_chunks(hw)).enumerate().for_each(|(i, (yc, xc))| {
                let ch = i % c;
                let mean = self.running_mean[ch];
                let istd = F::of(1.0 / (self.running_var[ch].f64() + self.eps).sqrt());
                let g = self.gamma[ch];
                let b = self.beta[ch];
                for j in 0..hw {
                    yc[j] = g * (xc[j] - mean) * istd + b;
                }
            });
        }
        y
    }

    pub fn backward(&mut self, dy: &Array4<F>) -> Array4<F> {
        let (bsz, c, h, w) = dy.dim();
        assert_eq!(self.xhat.dim(), dy.dim(), "backward requires a training-mode forward");
        let hw = h * w;
        let n = (bsz * hw) as f64;
        let dys = dy.as_slice().expect("standard layout");
        let xhs = self.xhat.as_slice().expect("standard layout");

        let stats: Vec<(f64, f64)> = (0..c)
            .into_par_iter()
            .map(|ch| {
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for b in 0..bsz {
                    let base = (b * c + ch) * hw;
                    for j in 0..hw {
                        let d = dys[base + j].f64();
                        s1 += d;
                        s2 += d * xhs[base + j].f64();
                    }
                }
                (s1, s2)
            })
            .collect();

        let mut dx = Array4::<F>::zeros((bsz, c, h, w));
        {
            let dxs = dx.as_slice_mut().expect("standard layout");
            dxs.par_chunks_mut(hw)
                .zip(dys.par_chunks(hw))
                .zip(xhs.par_chunks(hw))
                .enumerate()
                .for_each(|(i, ((dxc, dyc), xhc))| {
                    let ch = i % c;
                    let (s1, s2) = stats[ch];
                    let scale = F::of(self.gamma[ch].f64() * self.inv_std[ch]);
                    let a = F::of(s1 / n);
                    let b2 = F::of(s2 / n);
                    for j in 0..hw {
                        dxc[j] = scale * (dyc[j] - a - xhc[j] * b2);
                    }
                });
        }
        for ch in 0..c {
            let (s1, s2) = stats[ch];
            self.g_beta[ch] += F::of(s1);
            self.g_gamma[ch] += F::of(s2);
        }
        dx
    }
}

impl<F: Elem> Params<F> for BatchNorm2d<F> {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>) {
        out.push(ParamMut {
            name: join(prefix, "gamma"),
            value: self.gamma.view_mut().into_dyn(),
            grad: self.g_gamma.view_mut().into_dyn(),
        });
        out.push(ParamMut {
            name: join(prefix, "beta"),
            value: self.beta.view_mut().into_dyn(),
            grad: self.g_beta.view_mut().into_dyn(),
        });
    }
}

/// Layer normalization over the last (feature) axis of `[B, T, C]` tokens.
pub struct LayerNorm<F: Elem> {
    pub dim: usize,
    pub eps: f64,
    gamma: Array1<F>,
    beta: Array1<F>,
    g_gamma: Array1<F>,
    g_beta: Array1<F>,
    xhat: Array3<F>,
    inv_std: Array2<F>,
}

impl<F: Elem> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            eps: 1e-5,
            gamma: Array1::from_elem(dim, F::one()),
            beta: Array1::zeros(dim),
            g_gamma: Array1::zeros(dim),
            g_beta: Array1::zeros(dim),
            xhat: Array3::zeros((0, 0, 0)),
            inv_std: Array2::zeros((0, 0)),
        }
    }

    pub fn forward(&mut self, x: &Array3<F>, train: bool) -> Array3<F> {
        let (bsz, t, c) = x.dim();
        assert_eq!(c, self.dim, "feature dim mismatch");
        let xs = x.as_slice().expect("standard layout");
        let mut y = Array3::<F>::zeros((bsz, t, c));
        let mut xhat = Array3::<F>::zeros((bsz, t, c));
        let mut inv = vec![F::zero(); bsz * t];
        {
            let ys = y.as_slice_mut().expect("standard layout");
            let xh = xhat.as_slice_mut().expect("standard layout");
            let gamma = &self.gamma;
            let beta = &self.beta;
            let eps = self.eps;
            ys.par_chunks_mut(c)
                .zip(xh.par_chunks_mut(c))
                .zip(xs.par_chunks(c))
                .zip(inv.par_iter_mut())
                .for_each(|(((yr, xhr), xr), inv_out)| {
                    let mut sum = 0.0;
                    for &v in xr {
                        sum += v.f64();
                    }
                    let mean = sum / c as f64;
                    let mut var = 0.0;
                    for &v in xr {
                        var += (v.f64() - mean).powi(2);
                    }
                    let istd = 1.0 / (var / c as f64 + eps).sqrt();
                    *inv_out = F::of(istd);
                    let mean = F::of(mean);
                    let istd = F::of(istd);
                    for i in 0..c {
                        let hat = (xr[i] - mean) * istd;
                        xhr[i] = hat;
                        yr[i] = gamma[i] * hat + beta[i];
                    }
                });
        }
        if train {
            self.xhat = xhat;
            self.inv_std = Array2::from_shape_vec((bsz, t), inv).expect("shape");
        }
        y
    }

    pub fn backward(&mut self, dy: &Array3<F>) -> Array3<F> {
        let (bsz, t, c) = dy.dim();
        assert_eq!(self.xhat.dim(), dy.dim(), "backward requires a training-mode forward");
        let dys = dy.as_slice().expect("standard layout");
        let xhs = self.xhat.as_slice().expect("standard layout");
        let mut dx = Array3::<F>::zeros((bsz, t, c));

        // Per-image partial gradients for gamma/beta keep the reduction
        // grouping fixed.
        struct Partial {
            dgamma: Vec<f64>,
            dbeta: Vec<f64>,
        }
        let partials: Vec<Partial> = {
            let dxs = dx.as_slice_mut().expect("standard layout");
            let gamma = &self.gamma;
            let inv_std = &self.inv_std;
            dxs.par_chunks_mut(t * c)
                .enumerate()
                .map(|(b, dxb)| {
                    let mut dgamma = vec![0.0f64; c];
                    let mut dbeta = vec![0.0f64; c];
                    for tok in 0..t {
                        let base = (b * t + tok) * c;
                        let dyr = &dys[base..base + c];
                        let xhr = &xhs[base..base + c];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for i in 0..c {
                            let d = dyr[i].f64();
                            let xh = xhr[i].f64();
                            dgamma[i] += d * xh;
                            dbeta[i] += d;
                            let dg = d * gamma[i].f64();
                            s1 += dg;
                            s2 += dg * xh;
                        }
                        let istd = inv_std[[b, tok]];
                        let a = F::of(s1 / c as f64);
                        let b2 = F::of(s2 / c as f64);
                        let dxr = &mut dxb[tok * c..(tok + 1) * c];
                        for i in 0..c {
                            dxr[i] = istd * (dyr[i] * gamma[i] - a - xhr[i] * b2);
                        }
                    }
                    Partial { dgamma, dbeta }
                })
                .collect()
        };
        for p in partials {
            for i in 0..c {
                self.g_gamma[i] += F::of(p.dgamma[i]);
                self.g_beta[i] += F::of(p.dbeta[i]);
            }
        }
        dx
    }
}

impl<F: Elem> Params<F> for LayerNorm<F> {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>) {
        out.push(ParamMut {
            name: join(prefix, "gamma"),
            value: self.gamma.view_mut().into_dyn(),
            grad: self.g_gamma.view_mut().into_dyn(),
        });
        out.push(ParamMut {
            name: join(prefix, "beta"),
            value: self.beta.view_mut().into_dyn(),
            grad: self.g_beta.view_mut().into_dyn(),
        });
    }
}
