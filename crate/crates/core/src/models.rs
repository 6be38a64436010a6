//! The five networks: two residual generators, two patch discriminators and
//! a segmenter (attention U-Net or nested U-Net).

use std::str::FromStr;

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, invalid, Error, Result};
use crate::losses::ProbMap;
use crate::nn::{instance_norm, leaky_relu, reflect_pad, Conv2d, GroupNorm, ParamStore, UpConv2d};

/// Number of resolution levels in both segmenters (three poolings).
pub const SEGMENTER_LEVELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmenterKind {
    AttentionUnet,
    NestedUnet,
}

impl FromStr for SegmenterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention_unet" => Ok(Self::AttentionUnet),
            "nested_unet" => Ok(Self::NestedUnet),
            other => Err(invalid(format!("unknown segmenter kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_channels: usize,
    /// Segmenter output channels: 1 for binary, otherwise the class count
    /// including background.
    pub num_classes: usize,
    pub segmenter_kind: SegmenterKind,
    pub base_width: usize,
    pub generator_blocks: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            num_classes: 1,
            segmenter_kind: SegmenterKind::AttentionUnet,
            base_width: 64,
            generator_blocks: 9,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 {
            return Err(invalid("image_channels must be >= 1"));
        }
        if self.num_classes == 0 {
            return Err(invalid("num_classes must be >= 1"));
        }
        if self.base_width < 4 {
            return Err(invalid("base_width must be >= 4"));
        }
        if self.generator_blocks == 0 {
            return Err(invalid("generator_blocks must be >= 1"));
        }
        Ok(())
    }

    /// Number of label values a mask may take (background included).
    pub fn label_classes(&self) -> usize {
        if self.num_classes == 1 {
            2
        } else {
            self.num_classes
        }
    }
}

/// Residual encoder-decoder generator with a tanh output.
#[derive(Debug, Clone)]
pub struct Generator {
    params: ParamStore,
    stem: Conv2d,
    down: [Conv2d; 2],
    blocks: Vec<(Conv2d, Conv2d)>,
    up: [UpConv2d; 2],
    head: Conv2d,
}

impl Generator {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(dim_err(format!(
                "generator input {h}x{w} is not divisible by 4"
            )));
        }
        // residual blocks reflect-pad the quarter-resolution map by one pixel
        if h < 8 || w < 8 {
            return Err(dim_err(format!(
                "generator input {h}x{w} is smaller than 8x8"
            )));
        }
        let mut x = self.stem.forward(&reflect_pad(x, 3)?)?;
        x = instance_norm(&x)?.relu()?;
        for conv in &self.down {
            x = instance_norm(&conv.forward(&x)?)?.relu()?;
        }
        for (c1, c2) in &self.blocks {
            let r = instance_norm(&c1.forward(&reflect_pad(&x, 1)?)?)?.relu()?;
            let r = instance_norm(&c2.forward(&reflect_pad(&r, 1)?)?)?;
            x = (x + r)?;
        }
        for up in &self.up {
            x = instance_norm(&up.forward(&x)?)?.relu()?;
        }
        Ok(self.head.forward(&reflect_pad(&x, 3)?)?.tanh()?)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }
}

pub fn build_generator(cfg: &ModelConfig, device: &Device) -> Result<Generator> {
    cfg.validate()?;
    let ps = ParamStore::new(device);
    let (c, w) = (cfg.image_channels, cfg.base_width);
    let stem = Conv2d::new(&ps.pp("stem"), c, w, 7, 1, 0, false)?;
    let down = [
        Conv2d::new(&ps.pp("down0"), w, 2 * w, 3, 2, 1, false)?,
        Conv2d::new(&ps.pp("down1"), 2 * w, 4 * w, 3, 2, 1, false)?,
    ];
    let blocks = (0..cfg.generator_blocks)
        .map(|i| {
            let p = ps.pp(format!("res{i}"));
            Ok((
                Conv2d::new(&p.pp("conv0"), 4 * w, 4 * w, 3, 1, 0, false)?,
                Conv2d::new(&p.pp("conv1"), 4 * w, 4 * w, 3, 1, 0, false)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let up = [
        UpConv2d::new(&ps.pp("up0"), 4 * w, 2 * w)?,
        UpConv2d::new(&ps.pp("up1"), 2 * w, w)?,
    ];
    let head = Conv2d::new(&ps.pp("head"), w, c, 7, 1, 0, true)?;
    Ok(Generator {
        params: ps,
        stem,
        down,
        blocks,
        up,
        head,
    })
}

/// Convolutional patch classifier emitting a grid of unbounded scores.
#[derive(Debug, Clone)]
pub struct Discriminator {
    params: ParamStore,
    layers: Vec<Conv2d>,
}

/// `(kernel, stride)` of each discriminator layer; padding is 1 throughout.
/// The receptive field of this chain is 70 pixels.
const DISC_CHAIN: [(usize, usize); 5] = [(4, 2), (4, 2), (4, 2), (4, 1), (4, 1)];

impl Discriminator {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if discriminator_grid(h).is_none() || discriminator_grid(w).is_none() {
            return Err(dim_err(format!(
                "discriminator input {h}x{w} is too small for its stride chain"
            )));
        }
        let last = self.layers.len() - 1;
        let mut x = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x)?;
            if i == last {
                break;
            }
            if i > 0 {
                x = instance_norm(&x)?;
            }
            x = leaky_relu(&x)?;
        }
        Ok(x)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }
}

/// Side length of the score grid for an input side length, if positive.
pub fn discriminator_grid(mut side: usize) -> Option<usize> {
    for (k, s) in DISC_CHAIN {
        if side + 2 < k {
            return None;
        }
        side = (side + 2 - k) / s + 1;
    }
    (side >= 1).then_some(side)
}

pub fn build_discriminator(cfg: &ModelConfig, device: &Device) -> Result<Discriminator> {
    cfg.validate()?;
    let ps = ParamStore::new(device);
    let w = cfg.base_width;
    let widths = [cfg.image_channels, w, 2 * w, 4 * w, 8 * w, 1];
    let layers = DISC_CHAIN
        .iter()
        .enumerate()
        .map(|(i, &(k, s))| {
            // normalized layers drop the bias, it would be cancelled anyway
            let bias = i == 0 || i == DISC_CHAIN.len() - 1;
            Conv2d::new(&ps.pp(format!("conv{i}")), widths[i], widths[i + 1], k, s, 1, bias)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Discriminator { params: ps, layers })
}

/// Two 3x3 convolutions, each followed by group norm and ReLU.
#[derive(Debug, Clone)]
struct ConvBlock {
    conv0: Conv2d,
    norm0: GroupNorm,
    conv1: Conv2d,
    norm1: GroupNorm,
}

impl ConvBlock {
    fn new(ps: &ParamStore, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            conv0: Conv2d::new(&ps.pp("conv0"), c_in, c_out, 3, 1, 1, false)?,
            norm0: GroupNorm::new(&ps.pp("norm0"), c_out)?,
            conv1: Conv2d::new(&ps.pp("conv1"), c_out, c_out, 3, 1, 1, false)?,
            norm1: GroupNorm::new(&ps.pp("norm1"), c_out)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = leaky_relu(&self.norm0.forward(&self.conv0.forward(x)?)?)?;
        leaky_relu(&self.norm1.forward(&self.conv1.forward(&x)?)?)
    }
}

fn upsample_to(x: &Tensor, like: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = like.dims4()?;
    Ok(x.upsample_nearest2d(h, w)?)
}

/// Additive attention gate: `skip * sigmoid(psi(relu(Wg g + Wx skip)))`.
#[derive(Debug, Clone)]
struct AttentionGate {
    w_gate: Conv2d,
    w_skip: Conv2d,
    psi: Conv2d,
}

impl AttentionGate {
    fn new(ps: &ParamStore, gate_ch: usize, skip_ch: usize, inter_ch: usize) -> Result<Self> {
        Ok(Self {
            w_gate: Conv2d::new(&ps.pp("w_gate"), gate_ch, inter_ch, 1, 1, 0, true)?,
            w_skip: Conv2d::new(&ps.pp("w_skip"), skip_ch, inter_ch, 1, 1, 0, false)?,
            psi: Conv2d::new(&ps.pp("psi"), inter_ch, 1, 1, 1, 0, true)?,
        })
    }

    fn forward(&self, gate: &Tensor, skip: &Tensor) -> Result<Tensor> {
        let a = (self.w_gate.forward(gate)? + self.w_skip.forward(skip)?)?.relu()?;
        let coeff = candle_nn::ops::sigmoid(&self.psi.forward(&a)?)?;
        Ok(skip.broadcast_mul(&coeff)?)
    }
}

#[derive(Debug, Clone)]
struct DecoderStage {
    up: Conv2d,
    up_norm: GroupNorm,
    gate: AttentionGate,
    block: ConvBlock,
}

#[derive(Debug, Clone)]
struct AttentionUnet {
    encoder: Vec<ConvBlock>,
    decoder: Vec<DecoderStage>,
}

impl AttentionUnet {
    fn new(ps: &ParamStore, c_in: usize, widths: &[usize]) -> Result<Self> {
        let mut encoder = Vec::with_capacity(widths.len());
        let mut prev = c_in;
        for (i, &w) in widths.iter().enumerate() {
            encoder.push(ConvBlock::new(&ps.pp(format!("enc{i}")), prev, w)?);
            prev = w;
        }
        let decoder = (0..widths.len() - 1)
            .rev()
            .map(|i| {
                let p = ps.pp(format!("dec{i}"));
                let (fine, coarse) = (widths[i], widths[i + 1]);
                Ok(DecoderStage {
                    up: Conv2d::new(&p.pp("up"), coarse, fine, 3, 1, 1, false)?,
                    up_norm: GroupNorm::new(&p.pp("up_norm"), fine)?,
                    gate: AttentionGate::new(&p.pp("gate"), fine, fine, (fine / 2).max(1))?,
                    block: ConvBlock::new(&p.pp("block"), 2 * fine, fine)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { encoder, decoder })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut x = x.clone();
        for (i, block) in self.encoder.iter().enumerate() {
            if i > 0 {
                x = x.max_pool2d(2)?;
            }
            x = block.forward(&x)?;
            skips.push(x.clone());
        }
        skips.pop();
        for stage in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder stage");
            let up = upsample_to(&x, &skip)?;
            let up = leaky_relu(&stage.up_norm.forward(&stage.up.forward(&up)?)?)?;
            let gated = stage.gate.forward(&up, &skip)?;
            x = stage.block.forward(&Tensor::cat(&[&gated, &up], 1)?)?;
        }
        Ok(x)
    }
}

/// Nested U-Net with dense skip pathways and a single output head.
#[derive(Debug, Clone)]
struct NestedUnet {
    // nodes[i][j] is node X(i, j); row i holds levels - i nodes.
    nodes: Vec<Vec<ConvBlock>>,
}

impl NestedUnet {
    fn new(ps: &ParamStore, c_in: usize, widths: &[usize]) -> Result<Self> {
        let levels = widths.len();
        let mut nodes = Vec::with_capacity(levels);
        for i in 0..levels {
            let mut row = Vec::with_capacity(levels - i);
            for j in 0..levels - i {
                let c_node_in = if j == 0 {
                    if i == 0 {
                        c_in
                    } else {
                        widths[i - 1]
                    }
                } else {
                    j * widths[i] + widths[i + 1]
                };
                row.push(ConvBlock::new(&ps.pp(format!("x{i}_{j}")), c_node_in, widths[i])?);
            }
            nodes.push(row);
        }
        Ok(Self { nodes })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let levels = self.nodes.len();
        let mut out: Vec<Vec<Tensor>> = vec![Vec::new(); levels];
        let mut x = x.clone();
        for i in 0..levels {
            if i > 0 {
                x = x.max_pool2d(2)?;
            }
            x = self.nodes[i][0].forward(&x)?;
            out[i].push(x.clone());
        }
        for j in 1..levels {
            for i in 0..levels - j {
                let up = upsample_to(&out[i + 1][j - 1], &out[i][0])?;
                let mut inputs: Vec<&Tensor> = out[i].iter().collect();
                inputs.push(&up);
                let node = self.nodes[i][j].forward(&Tensor::cat(&inputs, 1)?)?;
                out[i].push(node);
            }
        }
        Ok(out[0][levels - 1].clone())
    }
}

#[derive(Debug, Clone)]
enum SegmenterBody {
    Attention(AttentionUnet),
    Nested(NestedUnet),
}

/// Encoder-decoder segmenter producing a probability map.
#[derive(Debug, Clone)]
pub struct Segmenter {
    params: ParamStore,
    kind: SegmenterKind,
    body: SegmenterBody,
    head: Conv2d,
    num_classes: usize,
}

impl Segmenter {
    pub fn forward(&self, x: &Tensor) -> Result<ProbMap> {
        let (_, _, h, w) = x.dims4()?;
        let min_side = 1 << (SEGMENTER_LEVELS - 1);
        if h < min_side || w < min_side {
            return Err(dim_err(format!(
                "segmenter input {h}x{w} is smaller than {min_side}x{min_side}"
            )));
        }
        let features = match &self.body {
            SegmenterBody::Attention(net) => net.forward(x)?,
            SegmenterBody::Nested(net) => net.forward(x)?,
        };
        let logits = self.head.forward(&features)?;
        let probs = if self.num_classes == 1 {
            candle_nn::ops::sigmoid(&logits)?
        } else {
            candle_nn::ops::softmax(&logits, 1)?
        };
        Ok(ProbMap::from_network(probs))
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn kind(&self) -> SegmenterKind {
        self.kind
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}

pub fn build_segmenter(cfg: &ModelConfig, device: &Device) -> Result<Segmenter> {
    cfg.validate()?;
    let ps = ParamStore::new(device);
    let widths: Vec<usize> = (0..SEGMENTER_LEVELS).map(|i| cfg.base_width << i).collect();
    let body = match cfg.segmenter_kind {
        SegmenterKind::AttentionUnet => {
            SegmenterBody::Attention(AttentionUnet::new(&ps.pp("body"), cfg.image_channels, &widths)?)
        }
        SegmenterKind::NestedUnet => {
            SegmenterBody::Nested(NestedUnet::new(&ps.pp("body"), cfg.image_channels, &widths)?)
        }
    };
    let head = Conv2d::new(&ps.pp("head"), widths[0], cfg.num_classes, 1, 1, 0, true)?;
    Ok(Segmenter {
        params: ps,
        kind: cfg.segmenter_kind,
        body,
        head,
        num_classes: cfg.num_classes,
    })
}

/// Generators `g` (source to target) and `f` (target to source), a
/// discriminator per domain, and the optional co-trained segmenter.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub g: Generator,
    pub f: Generator,
    pub d_x: Discriminator,
    pub d_y: Discriminator,
    pub u: Option<Segmenter>,
}

impl ModelBundle {
    /// Builds all five networks and initializes them from `cfg.init_seed`.
    pub fn new(cfg: &ModelConfig, device: &Device) -> Result<Self> {
        Self::build(cfg, true, device)
    }

    /// Same as [`ModelBundle::new`] but without the segmenter.
    pub fn without_segmenter(cfg: &ModelConfig, device: &Device) -> Result<Self> {
        Self::build(cfg, false, device)
    }

    fn build(cfg: &ModelConfig, with_segmenter: bool, device: &Device) -> Result<Self> {
        let bundle = Self {
            config: cfg.clone(),
            g: build_generator(cfg, device)?,
            f: build_generator(cfg, device)?,
            d_x: build_discriminator(cfg, device)?,
            d_y: build_discriminator(cfg, device)?,
            u: if with_segmenter {
                Some(build_segmenter(cfg, device)?)
            } else {
                None
            },
        };
        init_weights(&bundle, cfg.init_seed)?;
        Ok(bundle)
    }

    /// Parameter stores in a fixed order, with their archive prefixes.
    pub fn networks(&self) -> Vec<(&'static str, &ParamStore)> {
        let mut nets = vec![
            ("g", self.g.params()),
            ("f", self.f.params()),
            ("d_x", self.d_x.params()),
            ("d_y", self.d_y.params()),
        ];
        if let Some(u) = &self.u {
            nets.push(("u", u.params()));
        }
        nets
    }
}

/// Redraws every parameter of the bundle from `seed`. Networks are visited
/// in the order g, f, d_x, d_y, u, so bundles with and without a segmenter
/// share their GAN weights.
pub fn init_weights(bundle: &ModelBundle, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, params) in bundle.networks() {
        params.reinitialize(&mut rng)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    fn tiny(kind: SegmenterKind, channels: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            image_channels: channels,
            num_classes: classes,
            segmenter_kind: kind,
            base_width: 4,
            generator_blocks: 1,
            init_seed: 3,
        }
    }

    fn randn(shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::randn(0f32, 1.0, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn generator_preserves_shape_and_bounds() {
        let cfg = tiny(SegmenterKind::AttentionUnet, 3, 1);
        let g = build_generator(&cfg, &Device::Cpu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        g.params().reinitialize(&mut rng).unwrap();
        let y = g.forward(&randn((1, 3, 64, 64))).unwrap();
        assert_eq!(y.dims(), &[1, 3, 64, 64]);
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| (-1.0..=1.0).contains(x)));
        assert!(matches!(g.forward(&randn((1, 3, 62, 64))), Err(Error::Dimension(_))));
    }

    #[test]
    fn discriminator_grid_matches_stride_chain() {
        assert_eq!(discriminator_grid(192), Some(22));
        assert_eq!(discriminator_grid(64), Some(6));
        assert_eq!(discriminator_grid(16), None);
        let cfg = tiny(SegmenterKind::AttentionUnet, 3, 1);
        let d = build_discriminator(&cfg, &Device::Cpu).unwrap();
        let s1 = d.forward(&randn((1, 3, 64, 64))).unwrap();
        let s2 = d.forward(&randn((2, 3, 64, 64))).unwrap();
        assert_eq!(s1.dims(), &[1, 1, 6, 6]);
        assert_eq!(s2.dims(), &[2, 1, 6, 6]);
        assert!(matches!(d.forward(&randn((1, 3, 16, 16))), Err(Error::Dimension(_))));
    }

    #[test]
    fn segmenters_emit_prob_maps() {
        let dev = Device::Cpu;
        let att = build_segmenter(&tiny(SegmenterKind::AttentionUnet, 3, 1), &dev).unwrap();
        let p = att.forward(&randn((2, 3, 36, 44))).unwrap();
        assert_eq!(p.tensor().dims(), &[2, 1, 36, 44]);
        let nested = build_segmenter(&tiny(SegmenterKind::NestedUnet, 1, 3), &dev).unwrap();
        let p = nested.forward(&randn((2, 1, 40, 40))).unwrap();
        assert_eq!(p.tensor().dims(), &[2, 3, 40, 40]);
        let sums = p.tensor().sum(1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
        ProbMap::new(p.into_tensor()).unwrap();
    }

    #[test]
    fn unknown_segmenter_kind_is_rejected() {
        assert!(matches!("segformer".parse::<SegmenterKind>(), Err(Error::Validation(_))));
        assert_eq!("nested_unet".parse::<SegmenterKind>().unwrap(), SegmenterKind::NestedUnet);
    }

    fn flat_params(bundle: &ModelBundle) -> Vec<f32> {
        bundle
            .networks()
            .into_iter()
            .flat_map(|(_, ps)| ps.named())
            .flat_map(|(_, p)| p.var.flatten_all().unwrap().to_vec1::<f32>().unwrap())
            .collect()
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = tiny(SegmenterKind::AttentionUnet, 3, 1);
        let a = ModelBundle::new(&cfg, &Device::Cpu).unwrap();
        let b = ModelBundle::new(&cfg, &Device::Cpu).unwrap();
        assert_eq!(flat_params(&a), flat_params(&b));
        init_weights(&b, 4).unwrap();
        assert_ne!(flat_params(&a), flat_params(&b));

        // conv weights ~ N(0, 0.02), biases zero
        for (name, p) in a.g.params().named() {
            let v = p.var.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            if name.ends_with("bias") {
                assert!(v.iter().all(|x| *x == 0.0));
            }
        }
        let y = a.g.forward(&randn((1, 3, 32, 32))).unwrap();
        let s = y.sum_all().unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
        assert!(s.is_finite());
    }

    #[test]
    fn bundle_without_segmenter_shares_gan_weights() {
        let cfg = tiny(SegmenterKind::AttentionUnet, 3, 1);
        let full = ModelBundle::new(&cfg, &Device::Cpu).unwrap();
        let gan = ModelBundle::without_segmenter(&cfg, &Device::Cpu).unwrap();
        let n = flat_params(&gan).len();
        assert_eq!(flat_params(&full)[..n], flat_params(&gan)[..]);
    }
}
