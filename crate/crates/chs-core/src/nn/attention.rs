//! Multi-head self-attention over `[B, T, C]` token tensors.

use super::{join, xavier_normal, ParamMut, Params};
use crate::elem::Elem;
use ndarray::{s, Array1, Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

struct Proj<F: Elem> {
    w: Array2<F>,
    b: Array1<F>,
    gw: Array2<F>,
    gb: Array1<F>,
}

impl<F: Elem> Proj<F> {
    fn new(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        let w = Array2::from_shape_simple_fn((dim, dim), || xavier_normal(rng, dim, dim));
        Self { w, b: Array1::zeros(dim), gw: Array2::zeros((dim, dim)), gb: Array1::zeros(dim) }
    }

    fn new_zeroed(dim: usize) -> Self {
        Self {
            w: Array2::zeros((dim, dim)),
            b: Array1::zeros(dim),
            gw: Array2::zeros((dim, dim)),
            gb: Array1::zeros(dim),
        }
    }

    fn apply(&self, x: &ndarray::ArrayView2<F>) -> Array2<F> {
        let mut y = x.dot(&self.w.t());
        for mut row in y.axis_iter_mut(Axis(0)) {
            row += &self.b;
        }
        y
    }
}

/// Per-image cache produced by a training-mode forward.
struct AttnCache<F: Elem> {
    x: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Array3<F>,
    concat: Array2<F>,
}

pub struct MultiHeadSelfAttention<F: Elem> {
    pub dim: usize,
    pub n_heads: usize,
    wq: Proj<F>,
    wk: Proj<F>,
    wv: Proj<F>,
    wo: Proj<F>,
    cache: Vec<AttnCache<F>>,
}

fn softmax_rows<F: Elem>(x: &mut Array2<F>) {
    for mut row in x.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = F::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Jacobian-vector product of row-wise softmax: `dx = (dp - <dp, p>) * p`.
fn softmax_backward_rows<F: Elem>(
    dp: &Array2<F>,
    p: &ndarray::ArrayView2<F>,
) -> Array2<F> {
    let mut dx = Array2::<F>::zeros(dp.dim());
    for ((mut dx_row, dp_row), p_row) in
        dx.axis_iter_mut(Axis(0)).zip(dp.axis_iter(Axis(0))).zip(p.axis_iter(Axis(0)))
    {
        let dot = dp_row.iter().zip(p_row.iter()).map(|(&a, &b)| a * b).sum::<F>();
        for ((o, &d), &pv) in dx_row.iter_mut().zip(dp_row.iter()).zip(p_row.iter()) {
            *o = (d - dot) * pv;
        }
    }
    dx
}

impl<F: Elem> MultiHeadSelfAttention<F> {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, n_heads: usize) -> Self {
        assert!(dim % n_heads == 0, "dim {dim} not divisible by heads {n_heads}");
        // Zero output projection: each attention block starts as the
        // identity residual and cannot swamp the regression block early.
        Self {
            dim,
            n_heads,
            wq: Proj::new(rng, dim),
            wk: Proj::new(rng, dim),
            wv: Proj::new(rng, dim),
            wo: Proj::new_zeroed(dim),
            cache: Vec::new(),
        }
    }

    pub fn forward(&mut self, x: &Array3<F>, train: bool) -> Array3<F> {
        let (bsz, t, c) = x.dim();
        assert_eq!(c, self.dim);
        let dk = self.dim / self.n_heads;
        let scale = F::of(1.0 / (dk as f64).sqrt());

        let per_image: Vec<(Array2<F>, Option<AttnCache<F>>)> = (0..bsz)
            .into_par_iter()
            .map(|b| {
                let x_b = x.index_axis(Axis(0), b);
                let q = self.wq.apply(&x_b);
                let k = self.wk.apply(&x_b);
                let v = self.wv.apply(&x_b);
                let mut probs = Array3::<F>::zeros((self.n_heads, t, t));
                let mut concat = Array2::<F>::zeros((t, c));
                for h in 0..self.n_heads {
                    let cols = s![.., h * dk..(h + 1) * dk];
                    // Contiguous per-head copies keep the GEMMs packed.
                    let qh = q.slice(cols).to_owned();
                    let kh = k.slice(cols).to_owned();
                    let vh = v.slice(cols).to_owned();
                    let mut scores = qh.dot(&kh.t());
                    scores.mapv_inplace(|v| v * scale);
                    softmax_rows(&mut scores);
                    let oh = scores.dot(&vh);
                    concat.slice_mut(cols).assign(&oh);
                    probs.index_axis_mut(Axis(0), h).assign(&scores);
                }
                let out = self.wo.apply(&concat.view());
                let cache = train.then(|| AttnCache {
                    x: x_b.to_owned(),
                    q,
                    k,
                    v,
                    probs,
                    concat,
                });
                (out, cache)
            })
            .collect();

        let mut out = Array3::<F>::zeros((bsz, t, c));
        self.cache.clear();
        for (b, (y, cache)) in per_image.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), b).assign(&y);
            if let Some(cache) = cache {
                self.cache.push(cache);
            }
        }
        out
    }

    pub fn backward(&mut self, dy: &Array3<F>) -> Array3<F> {
        let (bsz, t, c) = dy.dim();
        assert_eq!(bsz, self.cache.len(), "backward requires a training-mode forward");
        let dk = self.dim / self.n_heads;
        let scale = F::of(1.0 / (dk as f64).sqrt());

        struct Partial<F: Elem> {
            dwq: Array2<F>,
            dbq: Array1<F>,
            dwk: Array2<F>,
            dbk: Array1<F>,
            dwv: Array2<F>,
            dbv: Array1<F>,
            dwo: Array2<F>,
            dbo: Array1<F>,
            dx: Array2<F>,
        }

        let per_image: Vec<Partial<F>> = (0..bsz)
            .into_par_iter()
            .map(|b| {
                let cache = &self.cache[b];
                let dy_b = dy.index_axis(Axis(0), b);

                // Output projection.
                let dwo = dy_b.t().dot(&cache.concat);
                let dbo = dy_b.sum_axis(Axis(0));
                let dconcat = dy_b.dot(&self.wo.w);

                let mut dq = Array2::<F>::zeros((t, c));
                let mut dkm = Array2::<F>::zeros((t, c));
                let mut dv = Array2::<F>::zeros((t, c));
                for h in 0..self.n_heads {
                    let cols = s![.., h * dk..(h + 1) * dk];
                    let doh = dconcat.slice(cols).to_owned();
                    let p = cache.probs.index_axis(Axis(0), h);
                    let vh = cache.v.slice(cols).to_owned();
                    let qh = cache.q.slice(cols).to_owned();
                    let kh = cache.k.slice(cols).to_owned();

                    let dp = doh.dot(&vh.t());
                    let dvh = p.t().dot(&doh);
                    let mut ds = softmax_backward_rows(&dp, &p);
                    ds.mapv_inplace(|v| v * scale);
                    let dqh = ds.dot(&kh);
                    let dkh = ds.t().dot(&qh);

                    dq.slice_mut(cols).assign(&dqh);
                    dkm.slice_mut(cols).assign(&dkh);
                    dv.slice_mut(cols).assign(&dvh);
                }

                let dwq = dq.t().dot(&cache.x);
                let dbq = dq.sum_axis(Axis(0));
                let dwk = dkm.t().dot(&cache.x);
                let dbk = dkm.sum_axis(Axis(0));
                let dwv = dv.t().dot(&cache.x);
                let dbv = dv.sum_axis(Axis(0));
                let dx = dq.dot(&self.wq.w) + dkm.dot(&self.wk.w) + dv.dot(&self.wv.w);

                Partial { dwq, dbq, dwk, dbk, dwv, dbv, dwo, dbo, dx }
            })
            .collect();

        let mut dx = Array3::<F>::zeros((bsz, t, c));
        for (b, p) in per_image.into_iter().enumerate() {
            self.wq.gw += &p.dwq;
            self.wq.gb += &p.dbq;
            self.wk.gw += &p.dwk;
            self.wk.gb += &p.dbk;
            self.wv.gw += &p.dwv;
            self.wv.gb += &p.dbv;
            self.wo.gw += &p.dwo;
            self.wo.gb += &p.dbo;
            dx.index_axis_mut(Axis(0), b).assign(&p.dx);
        }
        dx
    }
}

impl<F: Elem> Params<F> for MultiHeadSelfAttention<F> {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>) {
        for (name, proj) in [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
        ] {
            out.push(ParamMut {
                name: join(prefix, &format!("{name}.weight")),
                value: proj.w.view_mut().into_dyn(),
                grad: proj.gw.view_mut().into_dyn(),
            });
            out.push(ParamMut {
                name: join(prefix, &format!("{name}.bias")),
                value: proj.b.view_mut().into_dyn(),
                grad: proj.gb.view_mut().into_dyn(),
            });
        }
    }
}
