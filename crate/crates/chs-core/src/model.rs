//! The counting network: one shared encoder feeding a convolution head and a
//! transformer head, each ending in a regression block of the same
//! architecture (upsampling, three convolution blocks, final ReLU).

use crate::density::DensityMap;
use crate::elem::Elem;
use crate::nn::{
    join, BatchNorm2d, Conv2d, LayerNorm, MaxPool2d, Params, PositionalEncoding, Relu4,
    TransformerLayer, UpsampleNearest2d,
};
pub use crate::nn::{ParamMut, PositionalEncodingKind};
use crate::rng::{derive_seed, rng_from_seed};
use ndarray::{Array3, Array4, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error(
        "input {height}x{width} not divisible by encoder stride {stride}; \
         pad to {pad_h}x{pad_w}"
    )]
    NonDivisibleInput { height: usize, width: usize, stride: u32, pad_h: usize, pad_w: usize },
    #[error("input must have 3 channels, got {0}")]
    BadChannels(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    ToyCnn,
    Vgg16Style,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ConvHeadConfig {
    pub n_blocks: usize,
    pub dilation: usize,
    /// Output channels of each head block.
    pub channel_schedule: Vec<usize>,
}

fn default_pe_grid() -> (usize, usize) {
    (16, 16)
}

impl Default for ConvHeadConfig {
    fn default() -> Self {
        ModelConfig::vgg16().conv_head
    }
}

impl Default for TranHeadConfig {
    fn default() -> Self {
        ModelConfig::vgg16().tran_head
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TranHeadConfig {
    pub n_layers: usize,
    pub n_attention_heads: usize,
    pub ffn_multiplier: usize,
    pub positional_encoding: PositionalEncodingKind,
    /// Token grid a learned positional table is bound to; unused for the
    /// sinusoidal encoding.
    #[serde(default = "default_pe_grid")]
    pub learned_pe_grid: (usize, usize),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub encoder_stride: u32,
    /// Optional override of the encoder channel ramp (one conv per stage);
    /// `None` selects the built-in plan for the encoder kind.
    #[serde(default)]
    pub encoder_channels: Option<Vec<usize>>,
    pub conv_head: ConvHeadConfig,
    pub tran_head: TranHeadConfig,
    pub regression_upsample: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::vgg16()
    }
}

impl ModelConfig {
    /// Paper-style profile: VGG16 feature stack without its last maxpool,
    /// predicting at 1/8 input resolution.
    pub fn vgg16() -> Self {
        Self {
            encoder: EncoderKind::Vgg16Style,
            encoder_stride: 16,
            encoder_channels: None,
            conv_head: ConvHeadConfig {
                n_blocks: 4,
                dilation: 2,
                channel_schedule: vec![512, 256, 128, 128],
            },
            tran_head: TranHeadConfig {
                n_layers: 2,
                n_attention_heads: 4,
                ffn_multiplier: 2,
                positional_encoding: PositionalEncodingKind::Sinusoidal2d,
                learned_pe_grid: default_pe_grid(),
            },
            regression_upsample: 2,
        }
    }

    /// Desk-scale profile used by tests and the synthetic experiments:
    /// 4-block encoder, stride 8, 128 channels, maps at encoder resolution.
    pub fn toy() -> Self {
        Self {
            encoder: EncoderKind::ToyCnn,
            encoder_stride: 8,
            encoder_channels: None,
            conv_head: ConvHeadConfig {
                n_blocks: 4,
                dilation: 2,
                channel_schedule: vec![64, 32, 32, 32],
            },
            tran_head: TranHeadConfig {
                n_layers: 2,
                n_attention_heads: 4,
                ffn_multiplier: 2,
                positional_encoding: PositionalEncodingKind::Sinusoidal2d,
                learned_pe_grid: default_pe_grid(),
            },
            regression_upsample: 1,
        }
    }

    /// Tiny profile for gradient checking.
    pub fn micro() -> Self {
        Self {
            encoder: EncoderKind::ToyCnn,
            encoder_stride: 4,
            encoder_channels: Some(vec![4, 8]),
            conv_head: ConvHeadConfig { n_blocks: 2, dilation: 2, channel_schedule: vec![8, 4] },
            tran_head: TranHeadConfig {
                n_layers: 1,
                n_attention_heads: 2,
                ffn_multiplier: 2,
                positional_encoding: PositionalEncodingKind::Sinusoidal2d,
                learned_pe_grid: default_pe_grid(),
            },
            regression_upsample: 2,
        }
    }

    /// Per-stage conv plans of the encoder; `true` marks a trailing maxpool.
    fn encoder_plan(&self) -> Result<Vec<(Vec<usize>, bool)>, ModelError> {
        let stride = self.encoder_stride;
        if stride == 0 || !stride.is_power_of_two() {
            return Err(ModelError::BadConfig(format!(
                "encoder_stride must be a power of two, got {stride}"
            )));
        }
        let n_pools = stride.trailing_zeros() as usize;
        let stages: Vec<Vec<usize>> = match &self.encoder_channels {
            Some(channels) => {
                if channels.is_empty() {
                    return Err(ModelError::BadConfig("encoder_channels is empty".into()));
                }
                channels.iter().map(|&c| vec![c]).collect()
            }
            None => match self.encoder {
                EncoderKind::ToyCnn => vec![vec![16], vec![32], vec![64], vec![128]],
                EncoderKind::Vgg16Style => vec![
                    vec![64, 64],
                    vec![128, 128],
                    vec![256, 256, 256],
                    vec![512, 512, 512],
                    vec![512, 512, 512],
                ],
            },
        };
        if n_pools > stages.len() {
            return Err(ModelError::BadConfig(format!(
                "encoder_stride {stride} needs {n_pools} pools but the encoder has only {} stages",
                stages.len()
            )));
        }
        Ok(stages.into_iter().enumerate().map(|(i, s)| (s, i < n_pools)).collect())
    }

    /// Encoder output channels.
    pub fn feature_channels(&self) -> usize {
        self.encoder_plan()
            .map(|plan| *plan.last().expect("non-empty plan").0.last().expect("non-empty stage"))
            .unwrap_or(0)
    }

    /// Stride of the predicted density maps relative to the input image.
    pub fn output_stride(&self) -> u32 {
        self.encoder_stride / self.regression_upsample
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let plan = self.encoder_plan()?;
        let c = *plan.last().unwrap().0.last().unwrap();
        let head = &self.conv_head;
        if head.n_blocks == 0 || head.n_blocks != head.channel_schedule.len() {
            return Err(ModelError::BadConfig(format!(
                "conv head: n_blocks {} must match channel_schedule length {}",
                head.n_blocks,
                head.channel_schedule.len()
            )));
        }
        if head.dilation == 0 {
            return Err(ModelError::BadConfig("conv head dilation must be >= 1".into()));
        }
        let last = *head.channel_schedule.last().unwrap();
        if last < 4 {
            return Err(ModelError::BadConfig(format!(
                "conv head must end with >= 4 channels for the regression block, got {last}"
            )));
        }
        let tran = &self.tran_head;
        if tran.n_layers == 0 || tran.n_attention_heads == 0 || tran.ffn_multiplier == 0 {
            return Err(ModelError::BadConfig("transformer head sizes must be >= 1".into()));
        }
        if c % tran.n_attention_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "feature channels {c} not divisible by {} attention heads",
                tran.n_attention_heads
            )));
        }
        if tran.positional_encoding == PositionalEncodingKind::Sinusoidal2d && c % 4 != 0 {
            return Err(ModelError::BadConfig(format!(
                "sinusoidal 2-D positional encoding needs channels divisible by 4, got {c}"
            )));
        }
        if self.regression_upsample == 0
            || self.encoder_stride % self.regression_upsample != 0
        {
            return Err(ModelError::BadConfig(format!(
                "regression_upsample {} must divide encoder_stride {}",
                self.regression_upsample, self.encoder_stride
            )));
        }
        Ok(())
    }
}

/// Encoder features for a batch: `[B, C, H, W]`.
pub struct FeatureMap<F: Elem>(pub Array4<F>);

impl<F: Elem> FeatureMap<F> {
    pub fn batch(&self) -> usize {
        self.0.dim().0
    }
    pub fn channels(&self) -> usize {
        self.0.dim().1
    }
    pub fn height(&self) -> usize {
        self.0.dim().2
    }
    pub fn width(&self) -> usize {
        self.0.dim().3
    }
}

/// Per-image prediction pair.
pub struct Prediction<F: Elem> {
    pub conv_map: DensityMap<F>,
    pub tran_map: DensityMap<F>,
}

/// Convolution + batch norm + ReLU.
struct ConvBnRelu<F: Elem> {
    conv: Conv2d<F>,
    bn: BatchNorm2d<F>,
    relu: Relu4<F>,
}

impl<F: Elem> ConvBnRelu<F> {
    fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, dilation: usize) -> Self {
        Self {
            conv: Conv2d::new(rng, cin, cout, 3, dilation, dilation),
            bn: BatchNorm2d::new(cout),
            relu: Relu4::new(),
        }
    }

    fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let y = self.conv.forward(x, train);
        let y = self.bn.forward(&y, train);
        self.relu.forward(&y, train)
    }

    fn backward(&mut self, dy: &Array4<F>) -> Array4<F> {
        let d = self.relu.backward(dy);
        let d = self.bn.backward(&d);
        self.conv.backward(&d)
    }
}

impl<F: Elem> Params<F> for ConvBnRelu<F> {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>) {
        self.conv.visit_params(&join(prefix, "conv"), out);
        self.bn.visit_params(&join(prefix, "bn"), out);
    }
}

struct EncoderStage<F: Elem> {
    blocks: Vec<ConvBnRelu<F>>,
    pool: Option<MaxPool2d>,
}

pub struct Encoder<F: Elem> {
    stages: Vec<EncoderStage<F>>,
    pub stride: u32,
    pub out_channels: usize,
}

impl<F: Elem> Encoder<F> {
    fn new(rng: &mut ChaCha8Rng, config: &ModelConfig) -> Result<Self, ModelError> {
        let plan = config.encoder_plan()?;
        let mut cin = 3;
        let mut stages = Vec::new();
        for (channels, pool) in &plan {
            let mut blocks = Vec::new();
            for &cout in channels {
                blocks.push(ConvBnRelu::new(rng, cin, cout, 1));
                cin = cout;
            }
            stages.push(EncoderStage { blocks, pool: pool.then(MaxPool2d::new) });
        }
        Ok(Self { stages, stride: config.encoder_stride, out_channels: cin })
    }

    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let mut h = x.clone();
        for stage in &mut self.stages {
            for block in &mut stage.blocks {
                h = block.forward(&h, train);
            }
            if let Some(pool) = &mut stage.pool {
                h = pool.forward(&h, train);
            }
        }
        h
    }

    pub fn backward(&mut self, dy: &Array4<F>) -> Array4<F> {
        let mut d = dy.clone();
        for stage in self.stages.iter_mut().rev() {
            if let Some(pool) = &mut stage.pool {
                d = pool.backward(&d);
            }
            for block in stage.blocks.iter_mut().rev() {
                d = block.backward(&d);
            }
        }
        d
    }
}

impl<F: Elem> Params<F> for Encoder<F> {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>) {
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (j, block) in stage.blocks.iter_mut().enumerate() {
                block.visit_params(&join(prefix, &format!("stage{i}.conv{j}")), out);
            }
        }
    }
}

/// Upsampling layer, three convolution blocks, final ReLU; shared by both
/// heads (same architecture, width adapted to the head's channel count).
struct RegressionBlock<F: Elem> {
    up: UpsampleNearest2d,
    conv1: Conv2d<F>,
    relu1: Relu4<F>,
    conv2: Conv2d<F>,
    relu2: Relu4<F>,
    conv3: Conv2d<F>,
    relu_out: Relu4<F>,
}

impl<F: Elem> RegressionBlock<F> {
    fn new(rng: &mut ChaCha8Rng, cin: usize, upsample: u32) -> Self {
        let c1 = (cin / 2).max(1);
        let c2 = (cin / 4).max(1);
        // A small positive output bias keeps the final ReLU alive while the
        // head learns where the density belongs; sparse targets otherwise
        // push every pre-activation negative within a few optimizer steps.
        let mut conv3 = Conv2d::new(rng, c2, 1, 3, 1, 1);
        conv3.set_bias_constant(F::of(0.1));
        Self {
            up: UpsampleNearest2d::new(upsample as usize),
            conv1: Conv2d::new(rng, cin, c1, 3, 1, 1),
            relu1: Relu4::new(),
            conv2: Conv2d::new(rng, c1, c2, 3, 1, 1),
            relu2: Relu4::new(),
            conv3,
            relu_out: Relu4::new(),
        }
    }

    fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let h = self.up.forward(x);
        let h = self.relu1.forward(&self.conv1.forward(&h, train), train);
        let h = self.relu2.forward(&self.conv2.forward(&h, train), train);
        self.relu_out.forward(&self.conv3.forward(&h, train), train)
    }

    fn backward(&mut self, dy: &Array4<F>) -> Array4<F> {
        let d = self.conv3.backward(&self.relu_out.backward(dy));
        let d = self.conv2.backward(&self.relu2.backward(&d));
        let d = self.conv1.backward(&self.relu1.backward(&d));
        self.up.backward(&d)
    }
}

impl<F: Elem> Params<F> for RegressionBlock<F> {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>) {
        self.conv1.visit_params(&join(prefix, "conv1"), out);
        self.conv2.visit_params(&join(prefix, "conv2"), out);
        self.conv3.visit_params(&join(prefix, "conv3"), out);
    }
}

/// Dilated-convolution head modeling local context.
pub struct ConvHead<F: Elem> {
    blocks: Vec<ConvBnRelu<F>>,
    reg: RegressionBlock<F>,
}

impl<F: Elem> ConvHead<F> {
    fn new(rng: &mut ChaCha8Rng, cin: usize, config: &ModelConfig) -> Self {
        let mut blocks = Vec::new();
        let mut c = cin;
        for &cout in &config.conv_head.channel_schedule {
            blocks.push(ConvBnRelu::new(rng, c, cout, config.conv_head.dilation));
            c = cout;
        }
        Self { blocks, reg: RegressionBlock::new(rng, c, config.regression_upsample) }
    }

    pub fn forward(&mut self, features: &Array4<F>, train: bool) -> Array4<F> {
        let mut h = features.clone();
        for block in &mut self.blocks {
            h = block.forward(&h, train);
        }
        self.reg.forward(&h, train)
    }

    pub fn backward(&mut self, dy: &Array4<F>) -> Array4<F> {
        let mut d = self.reg.backward(dy);
        for block in self.blocks.iter_mut().rev() {
            d = block.backward(&d);
        }
        d
    }
}

impl<F: Elem> Params<F> for ConvHead<F> {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_params(&join(prefix, &format!("block{i}")), out);
        }
        self.reg.visit_params(&join(prefix, "reg"), out);
    }
}

/// Transformer head modeling global context over flattened feature tokens.
/// Pre-norm layers need a closing normalization before the regression block,
/// otherwise the unnormalized residual stream drives its ReLUs into the
/// all-negative regime early in training.
pub struct TranHead<F: Elem> {
    pe: PositionalEncoding<F>,
    layers: Vec<TransformerLayer<F>>,
    ln_final: LayerNorm<F>,
    reg: RegressionBlock<F>,
    feat_hw: (usize, usize),
}

impl<F: Elem> TranHead<F> {
    fn new(rng: &mut ChaCha8Rng, cin: usize, config: &ModelConfig) -> Self {
        let t = &config.tran_head;
        let pe = PositionalEncoding::new(t.positional_encoding, cin, t.learned_pe_grid, rng);
        let layers = (0..t.n_layers)
            .map(|_| TransformerLayer::new(rng, cin, t.n_attention_heads, t.ffn_multiplier))
            .collect();
        Self {
            pe,
            layers,
            ln_final: LayerNorm::new(cin),
            reg: RegressionBlock::new(rng, cin, config.regression_upsample),
            feat_hw: (0, 0),
        }
    }

    fn to_tokens(features: &Array4<F>) -> Array3<F> {
        let (b, c, h, w) = features.dim();
        let flat = features
            .view()
            .into_shape_with_order((b, c, h * w))
            .expect("contiguous features");
        flat.permuted_axes([0, 2, 1]).as_standard_layout().to_owned()
    }

    pub fn forward(&mut self, features: &Array4<F>, train: bool) -> Array4<F> {
        let (_, _, h, w) = features.dim();
        self.feat_hw = (h, w);
        let mut tokens = Self::to_tokens(features);
        self.pe.forward(&mut tokens, (h, w));
        for layer in &mut self.layers {
            tokens = layer.forward(&tokens, train);
        }
        let tokens = self.ln_final.forward(&tokens, train);
        let grid = Self::tokens_to_grid(&tokens, (h, w));
        self.reg.forward(&grid, train)
    }

    fn tokens_to_grid(tokens: &Array3<F>, hw: (usize, usize)) -> Array4<F> {
        let (b, _, c) = tokens.dim();
        let chw = tokens.view().permuted_axes([0, 2, 1]).as_standard_layout().to_owned();
        chw.into_shape_with_order((b, c, hw.0, hw.1)).expect("token count matches")
    }

    fn grid_to_tokens(grid: &Array4<F>) -> Array3<F> {
        Self::to_tokens(grid)
    }

    pub fn backward(&mut self, dy: &Array4<F>) -> Array4<F> {
        let d_grid = self.reg.backward(dy);
        let mut d_tokens = self.ln_final.backward(&Self::grid_to_tokens(&d_grid));
        for layer in self.layers.iter_mut().rev() {
            d_tokens = layer.backward(&d_tokens);
        }
        self.pe.backward(&d_tokens);
        Self::tokens_to_grid(&d_tokens, self.feat_hw)
    }
}

impl<F: Elem> Params<F> for TranHead<F> {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>) {
        self.pe.visit_params(&join(prefix, "pe"), out);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params(&join(prefix, &format!("layer{i}")), out);
        }
        self.ln_final.visit_params(&join(prefix, "ln_final"), out);
        self.reg.visit_params(&join(prefix, "reg"), out);
    }
}

/// The full two-head network.
pub struct ChsNet<F: Elem> {
    pub config: ModelConfig,
    encoder: Encoder<F>,
    conv_head: ConvHead<F>,
    tran_head: TranHead<F>,
}

impl<F: Elem> ChsNet<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = rng_from_seed(derive_seed(seed, "model-init"));
        let encoder = Encoder::new(&mut rng, &config)?;
        let c = encoder.out_channels;
        let conv_head = ConvHead::new(&mut rng, c, &config);
        let tran_head = TranHead::new(&mut rng, c, &config);
        Ok(Self { config, encoder, conv_head, tran_head })
    }

    fn check_input(&self, x: &Array4<F>) -> Result<(), ModelError> {
        let (_, c, h, w) = x.dim();
        if c != 3 {
            return Err(ModelError::BadChannels(c));
        }
        let s = self.config.encoder_stride as usize;
        if h % s != 0 || w % s != 0 {
            return Err(ModelError::NonDivisibleInput {
                height: h,
                width: w,
                stride: self.config.encoder_stride,
                pad_h: h.div_ceil(s) * s,
                pad_w: w.div_ceil(s) * s,
            });
        }
        Ok(())
    }

    /// Encoder features for a batch of images.
    pub fn encode_batch(&mut self, x: &Array4<F>, train: bool) -> Result<FeatureMap<F>, ModelError> {
        self.check_input(x)?;
        Ok(FeatureMap(self.encoder.forward(x, train)))
    }

    /// Both heads on precomputed features; returns `[B, h, w]` maps.
    pub fn heads_forward(
        &mut self,
        features: &FeatureMap<F>,
        train: bool,
    ) -> (Array3<F>, Array3<F>) {
        let conv = self.conv_head.forward(&features.0, train);
        let tran = self.tran_head.forward(&features.0, train);
        (squeeze_channel(conv), squeeze_channel(tran))
    }

    /// Single encoder evaluation shared by both heads.
    pub fn forward_batch(
        &mut self,
        x: &Array4<F>,
        train: bool,
    ) -> Result<(Array3<F>, Array3<F>), ModelError> {
        let features = self.encode_batch(x, train)?;
        Ok(self.heads_forward(&features, train))
    }

    /// Backward for both heads from density-map gradients `[B, h, w]`.
    pub fn backward(&mut self, d_conv: &Array3<F>, d_tran: &Array3<F>) {
        let d_feat_conv = self.conv_head.backward(&unsqueeze_channel(d_conv));
        let d_feat_tran = self.tran_head.backward(&unsqueeze_channel(d_tran));
        self.encoder.backward(&(d_feat_conv + d_feat_tran));
    }

    /// Single-image convenience wrapper around the batch path (evaluation
    /// mode): one shared encode, two head maps.
    pub fn forward(&mut self, image: &Array3<F>) -> Result<Prediction<F>, ModelError> {
        let x = unsqueeze_batch(image);
        let (conv, tran) = self.forward_batch(&x, false)?;
        let stride = self.config.output_stride();
        Ok(Prediction {
            conv_map: DensityMap::new(conv.index_axis(Axis(0), 0).to_owned(), stride),
            tran_map: DensityMap::new(tran.index_axis(Axis(0), 0).to_owned(), stride),
        })
    }

    /// Single-image encoder features.
    pub fn encode(&mut self, image: &Array3<F>) -> Result<FeatureMap<F>, ModelError> {
        self.encode_batch(&unsqueeze_batch(image), false)
    }

    /// Convolution head on single-image features.
    pub fn conv_head_forward(&mut self, features: &FeatureMap<F>) -> DensityMap<F> {
        let y = self.conv_head.forward(&features.0, false);
        DensityMap::new(
            squeeze_channel(y).index_axis(Axis(0), 0).to_owned(),
            self.config.output_stride(),
        )
    }

    /// Transformer head on single-image features.
    pub fn tran_head_forward(&mut self, features: &FeatureMap<F>) -> DensityMap<F> {
        let y = self.tran_head.forward(&features.0, false);
        DensityMap::new(
            squeeze_channel(y).index_axis(Axis(0), 0).to_owned(),
            self.config.output_stride(),
        )
    }

    pub fn params(&mut self) -> Vec<ParamMut<'_, F>> {
        let mut out = Vec::new();
        self.encoder.visit_params("encoder", &mut out);
        self.conv_head.visit_params("conv_head", &mut out);
        self.tran_head.visit_params("tran_head", &mut out);
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params() {
            let mut grad = p.grad;
            grad.fill(F::zero());
        }
    }

    /// Running batch-norm statistics by name, for checkpointing.
    pub fn bn_stats(&mut self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        let mut out = Vec::new();
        let mut visit = |prefix: String, bn: &BatchNorm2d<F>| {
            out.push((
                prefix,
                bn.running_mean.iter().map(|v| v.f64()).collect(),
                bn.running_var.iter().map(|v| v.f64()).collect(),
            ));
        };
        for (i, stage) in self.encoder.stages.iter().enumerate() {
            for (j, block) in stage.blocks.iter().enumerate() {
                visit(format!("encoder.stage{i}.conv{j}.bn"), &block.bn);
            }
        }
        for (i, block) in self.conv_head.blocks.iter().enumerate() {
            visit(format!("conv_head.block{i}.bn"), &block.bn);
        }
        out
    }

    /// Restores running batch-norm statistics saved by [`Self::bn_stats`].
    pub fn set_bn_stats(&mut self, stats: &[(String, Vec<f64>, Vec<f64>)]) -> Result<(), ModelError> {
        let mut lookup: std::collections::HashMap<&str, (&[f64], &[f64])> = stats
            .iter()
            .map(|(name, m, v)| (name.as_str(), (m.as_slice(), v.as_slice())))
            .collect();
        let mut apply = |name: String, bn: &mut BatchNorm2d<F>| -> Result<(), ModelError> {
            let (m, v) = lookup.remove(name.as_str()).ok_or_else(|| {
                ModelError::BadConfig(format!("checkpoint misses batch-norm stats for {name}"))
            })?;
            if m.len() != bn.channels || v.len() != bn.channels {
                return Err(ModelError::BadConfig(format!("batch-norm stat size mismatch at {name}")));
            }
            for (dst, src) in bn.running_mean.iter_mut().zip(m) {
                *dst = F::of(*src);
            }
            for (dst, src) in bn.running_var.iter_mut().zip(v) {
                *dst = F::of(*src);
            }
            Ok(())
        };
        for (i, stage) in self.encoder.stages.iter_mut().enumerate() {
            for (j, block) in stage.blocks.iter_mut().enumerate() {
                apply(format!("encoder.stage{i}.conv{j}.bn"), &mut block.bn)?;
            }
        }
        for (i, block) in self.conv_head.blocks.iter_mut().enumerate() {
            apply(format!("conv_head.block{i}.bn"), &mut block.bn)?;
        }
        Ok(())
    }
}

fn squeeze_channel<F: Elem>(x: Array4<F>) -> Array3<F> {
    let (b, c, h, w) = x.dim();
    assert_eq!(c, 1);
    x.into_shape_with_order((b, h, w)).expect("contiguous")
}

fn unsqueeze_channel<F: Elem>(x: &Array3<F>) -> Array4<F> {
    let (b, h, w) = x.dim();
    x.clone().into_shape_with_order((b, 1, h, w)).expect("contiguous")
}

fn unsqueeze_batch<F: Elem>(x: &Array3<F>) -> Array4<F> {
    let (c, h, w) = x.dim();
    x.clone().into_shape_with_order((1, c, h, w)).expect("contiguous")
}
