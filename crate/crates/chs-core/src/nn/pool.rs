//! 2x2 max pooling and nearest-neighbor upsampling, slice-based and
//! parallel over the (batch, channel) planes.

use crate::elem::Elem;
use ndarray::Array4;
use rayon::prelude::*;

/// 2x2 max pooling with stride 2. Ties go to the first cell in scan order
/// (top-left, top-right, bottom-left, bottom-right).
pub struct MaxPool2d {
    argmax: Vec<u8>,
    in_hw: (usize, usize),
    planes: usize,
}

impl MaxPool2d {
    pub fn new() -> Self {
        Self { argmax: Vec::new(), in_hw: (0, 0), planes: 0 }
    }

    pub fn forward<F: Elem>(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let (bsz, c, h, w) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even spatial dims, got {h}x{w}");
        let (ho, wo) = (h / 2, w / 2);
        let xs = x.as_slice().expect("standard layout");
        let mut y = Array4::<F>::zeros((bsz, c, ho, wo));
        let mut argmax = vec![0u8; bsz * c * ho * wo];
        {
            let ys = y.as_slice_mut().expect("standard layout");
            ys.par_chunks_mut(ho * wo)
                .zip(argmax.par_chunks_mut(ho * wo))
                .zip(xs.par_chunks(h * w))
                .for_each(|((yc, ac), xc)| {
                    for oy in 0..ho {
                        let top = &xc[2 * oy * w..2 * oy * w + w];
                        let bot = &xc[(2 * oy + 1) * w..(2 * oy + 1) * w + w];
                        for ox in 0..wo {
                            let cand = [top[2 * ox], top[2 * ox + 1], bot[2 * ox], bot[2 * ox + 1]];
                            let mut best = cand[0];
                            let mut arg = 0u8;
                            for (i, &v) in cand.iter().enumerate().skip(1) {
                                if v > best {
                                    best = v;
                                    arg = i as u8;
                                }
                            }
                            yc[oy * wo + ox] = best;
                            ac[oy * wo + ox] = arg;
                        }
                    }
                });
        }
        if train {
            self.argmax = argmax;
            self.in_hw = (h, w);
            self.planes = bsz * c;
        }
        y
    }

    pub fn backward<F: Elem>(&mut self, dy: &Array4<F>) -> Array4<F> {
        let (bsz, c, ho, wo) = dy.dim();
        assert_eq!(self.planes, bsz * c, "backward requires a training-mode forward");
        let (h, w) = self.in_hw;
        let dys = dy.as_slice().expect("standard layout");
        let mut dx = Array4::<F>::zeros((bsz, c, h, w));
        {
            let dxs = dx.as_slice_mut().expect("standard layout");
            dxs.par_chunks_mut(h * w)
                .zip(dys.par_chunks(ho * wo))
                .zip(self.argmax.par_chunks(ho * wo))
                .for_each(|((dxc, dyc), ac)| {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let arg = ac[oy * wo + ox] as usize;
                            let iy = 2 * oy + arg / 2;
                            let ix = 2 * ox + arg % 2;
                            dxc[iy * w + ix] += dyc[oy * wo + ox];
                        }
                    }
                });
        }
        dx
    }
}

impl Default for MaxPool2d {
    fn default() -> Self {
        Self::new()
    }
}

/// Nearest-neighbor upsampling by an integer factor.
pub struct UpsampleNearest2d {
    pub factor: usize,
}

impl UpsampleNearest2d {
    pub fn new(factor: usize) -> Self {
        assert!(factor >= 1);
        Self { factor }
    }

    pub fn forward<F: Elem>(&self, x: &Array4<F>) -> Array4<F> {
        let u = self.factor;
        if u == 1 {
            return x.clone();
        }
        let (bsz, c, h, w) = x.dim();
        let xs = x.as_slice().expect("standard layout");
        let mut y = Array4::<F>::zeros((bsz, c, h * u, w * u));
        {
            let ys = y.as_slice_mut().expect("standard layout");
            ys.par_chunks_mut(h * u * w * u).zip(xs.par_chunks(h * w)).for_each(|(yc, xc)| {
                for oy in 0..h * u {
                    let src = &xc[(oy / u) * w..(oy / u) * w + w];
                    let dst = &mut yc[oy * w * u..(oy + 1) * w * u];
                    for (ox, slot) in dst.iter_mut().enumerate() {
                        *slot = src[ox / u];
                    }
                }
            });
        }
        y
    }

    pub fn backward<F: Elem>(&self, dy: &Array4<F>) -> Array4<F> {
        let u = self.factor;
        if u == 1 {
            return dy.clone();
        }
        let (bsz, c, h, w) = dy.dim();
        assert!(h % u == 0 && w % u == 0);
        let dys = dy.as_slice().expect("standard layout");
        let mut dx = Array4::<F>::zeros((bsz, c, h / u, w / u));
        {
            let dxs = dx.as_slice_mut().expect("standard layout");
            dxs.par_chunks_mut((h / u) * (w / u)).zip(dys.par_chunks(h * w)).for_each(
                |(dxc, dyc)| {
                    for oy in 0..h {
                        let src = &dyc[oy * w..(oy + 1) * w];
                        let dst = &mut dxc[(oy / u) * (w / u)..(oy / u + 1) * (w / u)];
                        for (ox, &v) in src.iter().enumerate() {
                            dst[ox / u] += v;
                        }
                    }
                },
            );
        }
        dx
    }
}
