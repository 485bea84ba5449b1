//! Transformer layer (pre-norm self-attention + feed-forward) and spatial
//! positional encodings for tokens flattened from a feature map.

use super::{join, ParamMut, Params};
use super::{LayerNorm, Linear, MultiHeadSelfAttention};
use crate::elem::Elem;
use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Two-layer feed-forward block with ReLU.
pub struct FeedForward<F: Elem> {
    lin1: Linear<F>,
    lin2: Linear<F>,
    mask: Array3<F>,
}

impl<F: Elem> FeedForward<F> {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, multiplier: usize) -> Self {
        // The output projection starts at zero so the residual branch is the
        // identity at initialization; training moves it off zero immediately.
        Self {
            lin1: Linear::new(rng, dim, dim * multiplier),
            lin2: Linear::new_zeroed(dim * multiplier, dim),
            mask: Array3::zeros((0, 0, 0)),
        }
    }

    pub fn forward(&mut self, x: &Array3<F>, train: bool) -> Array3<F> {
        let mut h = self.lin1.forward(x, train);
        let mask = h.mapv(|v| if v > F::zero() { F::one() } else { F::zero() });
        h.zip_mut_with(&mask, |a, &m| *a *= m);
        if train {
            self.mask = mask;
        }
        self.lin2.forward(&h, train)
    }

    pub fn backward(&mut self, dy: &Array3<F>) -> Array3<F> {
        let mut dh = self.lin2.backward(dy);
        dh.zip_mut_with(&self.mask, |a, &m| *a *= m);
        self.lin1.backward(&dh)
    }
}

impl<F: Elem> Params<F> for FeedForward<F> {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>) {
        self.lin1.visit_params(&join(prefix, "lin1"), out);
        self.lin2.visit_params(&join(prefix, "lin2"), out);
    }
}

/// Pre-norm transformer layer:
/// `x = x + attn(ln1(x)); x = x + ffn(ln2(x))`.
pub struct TransformerLayer<F: Elem> {
    ln1: LayerNorm<F>,
    attn: MultiHeadSelfAttention<F>,
    ln2: LayerNorm<F>,
    ffn: FeedForward<F>,
}

impl<F: Elem> TransformerLayer<F> {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, n_heads: usize, ffn_multiplier: usize) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            attn: MultiHeadSelfAttention::new(rng, dim, n_heads),
            ln2: LayerNorm::new(dim),
            ffn: FeedForward::new(rng, dim, ffn_multiplier),
        }
    }

    pub fn forward(&mut self, x: &Array3<F>, train: bool) -> Array3<F> {
        let a = self.attn.forward(&self.ln1.forward(x, train), train);
        let mid = x + &a;
        let f = self.ffn.forward(&self.ln2.forward(&mid, train), train);
        mid + f
    }

    pub fn backward(&mut self, dy: &Array3<F>) -> Array3<F> {
        let d_mid = dy + &self.ln2.backward(&self.ffn.backward(dy));
        &d_mid + &self.ln1.backward(&self.attn.backward(&d_mid))
    }
}

impl<F: Elem> Params<F> for TransformerLayer<F> {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>) {
        self.ln1.visit_params(&join(prefix, "ln1"), out);
        self.attn.visit_params(&join(prefix, "attn"), out);
        self.ln2.visit_params(&join(prefix, "ln2"), out);
        self.ffn.visit_params(&join(prefix, "ffn"), out);
    }
}

/// Positional-encoding flavor for the transformer head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalEncodingKind {
    #[serde(rename = "sinusoidal_2d")]
    Sinusoidal2d,
    Learned,
}

/// Adds position information to `[B, T, C]` tokens laid out row-major from an
/// `H x W` feature map.
pub enum PositionalEncoding<F: Elem> {
    /// Fixed 2-D sinusoidal table: half the channels encode x, half encode
    /// y. The table is cached per feature shape.
    Sinusoidal2d { cache: Option<((usize, usize), Array2<F>)> },
    /// Trainable table bound to a fixed token grid.
    Learned { grid: (usize, usize), table: Array2<F>, grad: Array2<F> },
}

impl<F: Elem> PositionalEncoding<F> {
    pub fn new(
        kind: PositionalEncodingKind,
        dim: usize,
        grid: (usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Self {
        match kind {
            PositionalEncodingKind::Sinusoidal2d => {
                assert!(dim % 4 == 0, "sinusoidal 2-D encoding needs channels divisible by 4");
                Self::Sinusoidal2d { cache: None }
            }
            PositionalEncodingKind::Learned => {
                let table = Array2::from_shape_simple_fn((grid.0 * grid.1, dim), || {
                    let z: f64 = StandardNormal.sample(rng);
                    F::of(z * 0.02)
                });
                Self::Learned { grid, table, grad: Array2::zeros((grid.0 * grid.1, dim)) }
            }
        }
    }

    pub fn sinusoidal_table(dim: usize, h: usize, w: usize) -> Array2<F> {
        let quarter = dim / 4;
        let freqs: Vec<f64> =
            (0..quarter).map(|q| (10000.0f64).powf(-(q as f64) / quarter as f64)).collect();
        let mut pe = Array2::<F>::zeros((h * w, dim));
        for i in 0..h {
            for j in 0..w {
                let t = i * w + j;
                for (q, &freq) in freqs.iter().enumerate() {
                    pe[[t, 2 * q]] = F::of((j as f64 * freq).sin());
                    pe[[t, 2 * q + 1]] = F::of((j as f64 * freq).cos());
                    pe[[t, dim / 2 + 2 * q]] = F::of((i as f64 * freq).sin());
                    pe[[t, dim / 2 + 2 * q + 1]] = F::of((i as f64 * freq).cos());
                }
            }
        }
        pe
    }

    /// Adds the encoding in place. `hw` is the feature-map shape the tokens
    /// were flattened from.
    pub fn forward(&mut self, x: &mut Array3<F>, hw: (usize, usize)) {
        let (_, t, c) = x.dim();
        assert_eq!(t, hw.0 * hw.1, "token count does not match feature shape");
        match self {
            Self::Sinusoidal2d { cache } => {
                if cache.as_ref().map(|(shape, _)| *shape) != Some(hw) {
                    *cache = Some((hw, Self::sinusoidal_table(c, hw.0, hw.1)));
                }
                let pe = &cache.as_ref().expect("just filled").1;
                for mut img in x.outer_iter_mut() {
                    img += pe;
                }
            }
            Self::Learned { grid, table, .. } => {
                assert_eq!(
                    *grid, hw,
                    "learned positional encoding is bound to grid {grid:?}, got {hw:?}"
                );
                for mut img in x.outer_iter_mut() {
                    img += &*table;
                }
            }
        }
    }

    /// Accumulates the table gradient (learned variant); the token gradient
    /// passes through unchanged either way.
    pub fn backward(&mut self, dy: &Array3<F>) {
        if let Self::Learned { table: _, grad, .. } = self {
            for img in dy.outer_iter() {
                *grad += &img;
            }
        }
    }
}

impl<F: Elem> Params<F> for PositionalEncoding<F> {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>) {
        if let Self::Learned { table, grad, .. } = self {
            out.push(ParamMut {
                name: join(prefix, "table"),
                value: table.view_mut().into_dyn(),
                grad: grad.view_mut().into_dyn(),
            });
        }
    }
}
