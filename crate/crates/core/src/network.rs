//! The two-stream segmentation network.
//!
//! An appearance encoder embeds the RGB frame and an architecture-identical,
//! parameter-independent motion encoder embeds the motion input (a flow
//! rendering or the RGB frame itself). The two feature pyramids are summed
//! level by level and a refining decoder turns the fused pyramid into
//! background/foreground logits at input resolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    avg_pool, avg_pool_backward, join, relu, relu_backward, upsample2x, upsample2x_backward,
    BatchNorm2d, Cbam, CbamCache, Conv2d, ConvCache, Module, NormCache, NormMode, Param, ParamKind,
};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_BLOCKS: usize = 4;
pub const DEFAULT_CHANNELS: [usize; 4] = [16, 32, 64, 128];
pub const DEFAULT_DECODER_WIDTH: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    /// Channel count of each encoder block; its length is the block count K.
    pub channels: Vec<usize>,
    pub decoder_width: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            channels: DEFAULT_CHANNELS.to_vec(),
            decoder_width: DEFAULT_DECODER_WIDTH,
        }
    }
}

impl NetConfig {
    pub fn blocks(&self) -> usize {
        self.channels.len()
    }

    /// Input sides must be multiples of this: the deepest level sits at 1/2^(K+1).
    pub fn size_divisor(&self) -> usize {
        1 << (self.blocks() + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks() < 2 {
            return Err(Error::invalid(format!(
                "encoder needs at least 2 blocks, got {}",
                self.blocks()
            )));
        }
        if self.channels.contains(&0) || self.decoder_width == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        Ok(())
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let d = self.size_divisor();
        if height == 0 || height % d != 0 {
            return Err(Error::Indivisible {
                what: "input height",
                size: height,
                divisor: d,
            });
        }
        if width == 0 || width % d != 0 {
            return Err(Error::Indivisible {
                what: "input width",
                size: width,
                divisor: d,
            });
        }
        Ok(())
    }
}

/// Which encoder embeds an input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Appearance,
    Motion,
}

/// Per-level feature maps; level `k` (0-based here) sits at scale 1/2^(k+2).
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<Tensor<T>>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn zeros_like(other: &Self) -> Self {
        FeaturePyramid {
            levels: other.levels.iter().map(|l| Tensor::zeros(l.shape())).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        FeaturePyramid {
            levels: self.levels.iter().map(|l| l.scale(s)).collect(),
        }
    }
}

/// Level-wise sum of appearance and motion features.
pub fn fuse<T: Scalar>(
    appearance: &FeaturePyramid<T>,
    motion: &FeaturePyramid<T>,
) -> Result<FeaturePyramid<T>> {
    if appearance.levels.len() != motion.levels.len() {
        return Err(Error::shape(format!(
            "pyramids have {} and {} levels",
            appearance.levels.len(),
            motion.levels.len()
        )));
    }
    let mut levels = Vec::with_capacity(appearance.levels.len());
    for (k, (a, m)) in appearance.levels.iter().zip(&motion.levels).enumerate() {
        if !a.same_shape(m) {
            return Err(Error::shape(format!(
                "level {}: {:?} vs {:?}",
                k + 1,
                a.shape(),
                m.shape()
            )));
        }
        levels.push(a.add(m));
    }
    Ok(FeaturePyramid { levels })
}

#[derive(Clone, Debug)]
struct EncoderBlock<T> {
    pool: usize,
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
}

struct EncoderBlockCache<T> {
    conv1: ConvCache<T>,
    bn1: NormCache<T>,
    act1: Tensor<T>,
    conv2: ConvCache<T>,
    bn2: NormCache<T>,
    act2: Tensor<T>,
}

impl<T: Scalar> EncoderBlock<T> {
    fn new(pool: usize, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        EncoderBlock {
            pool,
            conv1: Conv2d::new(cin, cout, 3, rng),
            bn1: BatchNorm2d::new(cout),
            conv2: Conv2d::new(cout, cout, 3, rng),
            bn2: BatchNorm2d::new(cout),
        }
    }

    fn forward(&self, x: &Tensor<T>, mode: NormMode) -> (Tensor<T>, EncoderBlockCache<T>) {
        let pooled = avg_pool(x, self.pool);
        let (y, conv1) = self.conv1.forward(&pooled);
        let (y, bn1) = self.bn1.forward(&y, mode);
        let act1 = relu(&y);
        let (y, conv2) = self.conv2.forward(&act1);
        let (y, bn2) = self.bn2.forward(&y, mode);
        let act2 = relu(&y);
        (
            act2.clone(),
            EncoderBlockCache {
                conv1,
                bn1,
                act1,
                conv2,
                bn2,
                act2,
            },
        )
    }

    fn backward(&mut self, cache: &EncoderBlockCache<T>, grad: &Tensor<T>) -> Tensor<T> {
        let g = relu_backward(&cache.act2, grad);
        let g = self.bn2.backward(&cache.bn2, &g);
        let g = self.conv2.backward(&cache.conv2, &g);
        let g = relu_backward(&cache.act1, &g);
        let g = self.bn1.backward(&cache.bn1, &g);
        let g = self.conv1.backward(&cache.conv1, &g);
        avg_pool_backward(&g, self.pool)
    }
}

impl<T: Scalar> Module<T> for EncoderBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Param<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Param<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
    }
}

/// Stack of K blocks. Block 1 downsamples 4×, every later block 2×, so the
/// output of block k sits at 1/2^(k+1) of the input resolution.
#[derive(Clone, Debug)]
pub struct Encoder<T> {
    blocks: Vec<EncoderBlock<T>>,
}

pub struct EncoderCache<T> {
    blocks: Vec<EncoderBlockCache<T>>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let mut cin = 3;
        let blocks = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let b = EncoderBlock::new(if k == 0 { 4 } else { 2 }, cin, c, rng);
                cin = c;
                b
            })
            .collect();
        Encoder { blocks }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: NormMode) -> (FeaturePyramid<T>, EncoderCache<T>) {
        let mut levels = Vec::with_capacity(self.blocks.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for block in &self.blocks {
            let (y, cache) = block.forward(&cur, mode);
            levels.push(y.clone());
            caches.push(cache);
            cur = y;
        }
        (FeaturePyramid { levels }, EncoderCache { blocks: caches })
    }

    /// Backpropagates per-level gradients to the encoder input.
    pub fn backward(&mut self, cache: &EncoderCache<T>, grads: &FeaturePyramid<T>) -> Tensor<T> {
        let mut carry: Option<Tensor<T>> = None;
        for k in (0..self.blocks.len()).rev() {
            let mut g = grads.levels[k].clone();
            if let Some(c) = &carry {
                g.add_assign(c);
            }
            carry = Some(self.blocks[k].backward(&cache.blocks[k], &g));
        }
        carry.expect("at least one block")
    }
}

impl<T: Scalar> Module<T> for Encoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Param<T>)) {
        for (k, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{}", k + 1)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Param<T>)) {
        for (k, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{}", k + 1)), f);
        }
    }
}

/// One refining block: blending 3×3 convolution, ReLU, CBAM, 2× bilinear upsampling.
#[derive(Clone, Debug)]
struct DecoderBlock<T> {
    blend: Conv2d<T>,
    cbam: Cbam<T>,
}

struct DecoderBlockCache<T> {
    blend: ConvCache<T>,
    act: Tensor<T>,
    cbam: CbamCache<T>,
}

impl<T: Scalar> DecoderBlock<T> {
    fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, DecoderBlockCache<T>) {
        let (y, blend) = self.blend.forward(x);
        let act = relu(&y);
        let (y, cbam) = self.cbam.forward(&act);
        (upsample2x(&y), DecoderBlockCache { blend, act, cbam })
    }

    fn backward(&mut self, cache: &DecoderBlockCache<T>, grad: &Tensor<T>) -> Tensor<T> {
        let g = upsample2x_backward(grad);
        let g = self.cbam.backward(&cache.cbam, &g);
        let g = relu_backward(&cache.act, &g);
        self.blend.backward(&cache.blend, &g)
    }
}

/// Decoder: `D_1 = Ψ_1(X_K)`, `D_k = Ψ_k(D_{k-1} ⊕ X_{K-k+1})`, then a 1×1
/// projection to two channels and a final 2× upsampling to input resolution.
#[derive(Clone, Debug)]
pub struct Decoder<T> {
    blocks: Vec<DecoderBlock<T>>,
    head: Conv2d<T>,
    width: usize,
}

pub struct DecoderCache<T> {
    blocks: Vec<DecoderBlockCache<T>>,
    head: ConvCache<T>,
    /// Channel count of the skip level concatenated into each block (0 for block 1).
    skip_channels: Vec<usize>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let k_total = cfg.blocks();
        let width = cfg.decoder_width;
        let blocks = (1..=k_total)
            .map(|k| {
                let skip = cfg.channels[k_total - k];
                let cin = if k == 1 { skip } else { width + skip };
                DecoderBlock {
                    blend: Conv2d::new(cin, width, 3, rng),
                    cbam: Cbam::new(width, rng),
                }
            })
            .collect();
        Decoder {
            blocks,
            head: Conv2d::new(width, 2, 1, rng),
            width,
        }
    }

    pub fn forward(&self, fused: &FeaturePyramid<T>) -> Result<(Tensor<T>, DecoderCache<T>)> {
        let k_total = self.blocks.len();
        if fused.levels.len() != k_total {
            return Err(Error::shape(format!(
                "decoder expects {k_total} levels, got {}",
                fused.levels.len()
            )));
        }
        let mut caches = Vec::with_capacity(k_total);
        let mut skip_channels = Vec::with_capacity(k_total);
        let mut d: Option<Tensor<T>> = None;
        for (k, block) in self.blocks.iter().enumerate() {
            let x = &fused.levels[k_total - 1 - k];
            let input = match &d {
                None => {
                    skip_channels.push(0);
                    x.clone()
                }
                Some(prev) => {
                    if prev.shape()[2..] != x.shape()[2..] {
                        return Err(Error::shape(format!(
                            "decoder block {}: D is {:?} but X is {:?}",
                            k + 1,
                            prev.shape(),
                            x.shape()
                        )));
                    }
                    skip_channels.push(x.c());
                    Tensor::concat_channels(prev, x)
                }
            };
            if input.c() != block.blend.in_channels {
                return Err(Error::shape(format!(
                    "decoder block {} expects {} channels, got {}",
                    k + 1,
                    block.blend.in_channels,
                    input.c()
                )));
            }
            let (y, cache) = block.forward(&input);
            caches.push(cache);
            d = Some(y);
        }
        let (logits, head) = self.head.forward(&d.expect("at least one block"));
        Ok((
            upsample2x(&logits),
            DecoderCache {
                blocks: caches,
                head,
                skip_channels,
            },
        ))
    }

    /// Returns gradients for every fused level.
    pub fn backward(&mut self, cache: &DecoderCache<T>, grad: &Tensor<T>) -> FeaturePyramid<T> {
        let k_total = self.blocks.len();
        let g = upsample2x_backward(grad);
        let mut g = self.head.backward(&cache.head, &g);
        let mut levels: Vec<Option<Tensor<T>>> = vec![None; k_total];
        for k in (0..k_total).rev() {
            let gin = self.blocks[k].backward(&cache.blocks[k], &g);
            let level = k_total - 1 - k;
            if k == 0 {
                levels[level] = Some(gin);
            } else {
                let (gd, gx) = gin.split_channels(self.width);
                debug_assert_eq!(gx.c(), cache.skip_channels[k]);
                levels[level] = Some(gx);
                g = gd;
            }
        }
        FeaturePyramid {
            levels: levels.into_iter().map(|l| l.expect("every level visited")).collect(),
        }
    }
}

impl<T: Scalar> Module<T> for Decoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Param<T>)) {
        for (k, b) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("psi{}", k + 1));
            b.blend.visit(&join(&p, "blend"), f);
            b.cbam.visit(&join(&p, "cbam"), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Param<T>)) {
        for (k, b) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &format!("psi{}", k + 1));
            b.blend.visit_mut(&join(&p, "blend"), f);
            b.cbam.visit_mut(&join(&p, "cbam"), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// A named tensor as stored in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    cfg: NetConfig,
    pub appearance: Encoder<T>,
    pub motion: Encoder<T>,
    pub decoder: Decoder<T>,
}

pub struct ForwardCache<T> {
    app: EncoderCache<T>,
    mot: EncoderCache<T>,
    dec: DecoderCache<T>,
}

impl<T: Scalar> Network<T> {
    pub fn new(cfg: NetConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let appearance = Encoder::new(&cfg, rng);
        let motion = Encoder::new(&cfg, rng);
        let decoder = Decoder::new(&cfg, rng);
        Ok(Network {
            cfg,
            appearance,
            motion,
            decoder,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    fn check_batch(&self, x: &Tensor<T>) -> Result<()> {
        if x.c() != 3 {
            return Err(Error::shape(format!("expected 3 input channels, got {}", x.c())));
        }
        self.cfg.check_input(x.h(), x.w())
    }

    pub fn encode(&self, x: &Tensor<T>, stream: Stream) -> Result<FeaturePyramid<T>> {
        self.check_batch(x)?;
        let enc = match stream {
            Stream::Appearance => &self.appearance,
            Stream::Motion => &self.motion,
        };
        Ok(enc.forward(x, NormMode::Frozen).0)
    }

    pub fn decode(&self, fused: &FeaturePyramid<T>) -> Result<Tensor<T>> {
        Ok(self.decoder.forward(fused)?.0)
    }

    /// Background/foreground logits (`N×2×H×W`) for a batch.
    pub fn forward(&self, image: &Tensor<T>, motion: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_train(image, motion, NormMode::Frozen)?.0)
    }

    /// Forward pass that keeps everything needed by [`Network::backward`].
    pub fn forward_train(
        &self,
        image: &Tensor<T>,
        motion: &Tensor<T>,
        norm: NormMode,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_batch(image)?;
        self.check_batch(motion)?;
        if image.shape() != motion.shape() {
            return Err(Error::shape(format!(
                "image {:?} and motion input {:?} differ",
                image.shape(),
                motion.shape()
            )));
        }
        let (a, app) = self.appearance.forward(image, norm);
        let (m, mot) = self.motion.forward(motion, norm);
        let fused = fuse(&a, &m)?;
        let (logits, dec) = self.decoder.forward(&fused)?;
        Ok((logits, ForwardCache { app, mot, dec }))
    }

    /// Accumulates parameter gradients for `grad` = dLoss/dlogits.
    pub fn backward(&mut self, cache: &ForwardCache<T>, grad: &Tensor<T>) {
        let dfused = self.decoder.backward(&cache.dec, grad);
        // the sum passes the same gradient to both streams
        self.appearance.backward(&cache.app, &dfused);
        self.motion.backward(&cache.mot, &dfused);
    }

    pub fn state(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        self.visit("", &mut |name, kind, p| {
            out.push(NamedTensor {
                name: name.to_string(),
                kind,
                shape: p.shape.clone(),
                data: p.value.iter().map(|v| v.as_f64() as f32).collect(),
            })
        });
        out
    }

    /// Overwrites every tensor from `state`; names and shapes must match exactly.
    pub fn load_state(&mut self, state: &[NamedTensor]) -> Result<()> {
        let mut expected = 0;
        let mut err: Option<Error> = None;
        self.visit_mut("", &mut |name, _, p| {
            expected += 1;
            if err.is_some() {
                return;
            }
            match state.iter().find(|t| t.name == name) {
                None => err = Some(Error::shape(format!("state is missing `{name}`"))),
                Some(t) if t.shape != p.shape => {
                    err = Some(Error::shape(format!(
                        "`{name}`: stored shape {:?}, model shape {:?}",
                        t.shape, p.shape
                    )))
                }
                Some(t) => {
                    for (dst, &src) in p.value.iter_mut().zip(&t.data) {
                        *dst = T::lit(src as f64);
                    }
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if state.len() != expected {
            return Err(Error::shape(format!(
                "state has {} tensors, model has {expected}",
                state.len()
            )));
        }
        Ok(())
    }

    /// Same network in another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Network::<U>::new(self.cfg.clone(), &mut rng).expect("config already validated");
        let mut src = Vec::new();
        self.visit("", &mut |_, _, p| src.push(p.value.iter().map(|v| v.as_f64()).collect::<Vec<_>>()));
        let mut i = 0;
        net.visit_mut("", &mut |_, _, p| {
            for (dst, &v) in p.value.iter_mut().zip(&src[i]) {
                *dst = U::lit(v);
            }
            i += 1;
        });
        net
    }
}

impl<T: Scalar> Module<T> for Network<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Param<T>)) {
        self.appearance.visit(&join(prefix, "app"), f);
        self.motion.visit(&join(prefix, "mot"), f);
        self.decoder.visit(&join(prefix, "dec"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Param<T>)) {
        self.appearance.visit_mut(&join(prefix, "app"), f);
        self.motion.visit_mut(&join(prefix, "mot"), f);
        self.decoder.visit_mut(&join(prefix, "dec"), f);
    }
}
