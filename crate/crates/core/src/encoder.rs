//! MobileNet-style image encoder.
//!
//! Stem (3×3, stride 2) → four stages of inverted-residual blocks, the first
//! block of each stage downsampling by 2 → optional multi-query attention
//! bottlenecks after chosen late blocks → multi-scale fusion of the last two
//! stage outputs → 3×3 stride-3 average pool → row-major flatten into tokens.

use serde::{Deserialize, Serialize};

use crate::calib::{collect_ranges, CalibMethod, Calibrate, RangeBook};
use crate::error::{Error, Result};
use crate::impl_params;
use crate::init::Init;
use crate::nn::{
    attend, attention_probs, depthwise_conv2d, gelu_tanh, linear, pointwise_conv2d, conv2d_direct, avg_pool2d,
    rmsnorm, rmsnorm_channels, upsample_nearest, AttentionSpec, Conv2dSpec, Linear, Mask, DEFAULT_RMS_EPS,
};
use crate::probe::{Observer, OpEvent, Scope, SiteId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub num_blocks: usize,
    pub channels: usize,
    pub expansion: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageConfig>,
    /// `(stage, block)` pairs, zero-based, after which an MQA bottleneck runs.
    /// Only the last two stages (indices 2 and 3) may carry one.
    pub mqa_positions: Vec<(usize, usize)>,
    pub mqa_heads: usize,
    pub msfa_out_channels: usize,
    pub msfa_expansion: usize,
    pub dw_kernel: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
}

impl EncoderConfig {
    /// Desk-scale default: 96 px input, four tokens.
    pub fn toy() -> Self {
        Self {
            input_size: 96,
            in_channels: 3,
            stem_channels: 16,
            stages: [32, 64, 96, 128]
                .into_iter()
                .map(|channels| StageConfig {
                    num_blocks: 2,
                    channels,
                    expansion: 4,
                })
                .collect(),
            mqa_positions: vec![(3, 1)],
            mqa_heads: 4,
            msfa_out_channels: 256,
            msfa_expansion: 2,
            dw_kernel: 3,
            pool_kernel: 3,
            pool_stride: 3,
        }
    }

    /// 768 px input fused to a 16×16×2048 map, with narrow internal stages
    /// so a forward pass stays cheap.
    pub fn paper_shape() -> Self {
        Self {
            input_size: 768,
            stem_channels: 8,
            stages: [8, 16, 24, 32]
                .into_iter()
                .map(|channels| StageConfig {
                    num_blocks: 1,
                    channels,
                    expansion: 2,
                })
                .collect(),
            mqa_positions: vec![(3, 0)],
            msfa_out_channels: 2048,
            msfa_expansion: 1,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str, r: String| Err(Error::config(format!("encoder.{f}"), r));
        if self.stages.len() != 4 {
            return field("stages", format!("need 4 stages, got {}", self.stages.len()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.num_blocks == 0 || s.channels == 0 || s.expansion == 0 {
                return field(&format!("stages[{i}]"), "blocks, channels and expansion must be positive".into());
            }
        }
        if self.in_channels == 0 || self.stem_channels == 0 || self.msfa_out_channels == 0 || self.msfa_expansion == 0 {
            return field("channels", "channel counts must be positive".into());
        }
        if self.dw_kernel % 2 == 0 {
            return field("dw_kernel", format!("{} is not odd", self.dw_kernel));
        }
        for &(st, b) in &self.mqa_positions {
            if st < 2 || st > 3 || b >= self.stages[st].num_blocks {
                return field("mqa_positions", format!("({st}, {b}) is not a block of stage 2 or 3"));
            }
            if self.mqa_heads == 0 || self.stages[st].channels % self.mqa_heads != 0 {
                return field("mqa_heads", format!("{} heads do not divide {} channels", self.mqa_heads, self.stages[st].channels));
            }
        }
        let unit = 16 * self.pool_stride;
        if self.input_size == 0 || self.input_size % unit != 0 {
            return field("input_size", format!("{} is not a positive multiple of {unit}", self.input_size));
        }
        let side3 = self.input_size / 16;
        if self.pool_kernel == 0 || side3 < self.pool_kernel || (side3 - self.pool_kernel) % self.pool_stride != 0 {
            return field("pool_kernel", format!("{side3}x{side3} fused map not tiled by pool"));
        }
        Ok(())
    }

    /// Side lengths after the stem and after each stage.
    pub fn sides(&self) -> (usize, [usize; 4]) {
        let half = |s: usize| s.div_ceil(2);
        let stem = half(self.input_size);
        let s1 = half(stem);
        let s2 = half(s1);
        let s3 = half(s2);
        (stem, [s1, s2, s3, half(s3)])
    }

    pub fn token_side(&self) -> usize {
        (self.sides().1[2] - self.pool_kernel) / self.pool_stride + 1
    }

    pub fn num_tokens(&self) -> usize {
        self.token_side().pow(2)
    }

    pub fn has_mqa(&self, stage: usize, block: usize) -> bool {
        self.mqa_positions.contains(&(stage, block))
    }

    pub fn msfa_in_channels(&self) -> usize {
        self.stages[2].channels + self.stages[3].channels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}
impl_params!(ConvLayer { weight, bias });

impl ConvLayer {
    fn init(init: &mut Init, spec: &Conv2dSpec) -> Self {
        let shape = spec.weight_shape();
        let fan_in = shape[1] * shape[2] * shape[3];
        Self {
            weight: init.he(&shape, fan_in),
            bias: Tensor::zeros(&[spec.out_channels]),
        }
    }
}

/// Universal inverted residual: pointwise expand → depthwise → pointwise project.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrBlockWeights {
    pub expand: ConvLayer,
    pub dw: ConvLayer,
    pub project: ConvLayer,
    pub norm: Tensor,
}
impl_params!(IrBlockWeights { expand, dw, project, norm });

impl IrBlockWeights {
    pub fn init(init: &mut Init, cin: usize, hidden: usize, cout: usize, k: usize) -> Self {
        Self {
            expand: ConvLayer::init(init, &Conv2dSpec::pointwise(cin, hidden)),
            dw: ConvLayer::init(init, &Conv2dSpec::depthwise(hidden, k, 1, k / 2)),
            project: ConvLayer::init(init, &Conv2dSpec::pointwise(hidden, cout)),
            norm: Tensor::full(&[cout], 1.0),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.expand.weight.dim(1)
    }

    pub fn hidden(&self) -> usize {
        self.expand.weight.dim(0)
    }

    pub fn out_channels(&self) -> usize {
        self.project.weight.dim(0)
    }

    pub fn kernel(&self) -> usize {
        self.dw.weight.dim(2)
    }

    pub fn has_residual(&self, stride: usize) -> bool {
        stride == 1 && self.in_channels() == self.out_channels()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MqaWeights {
    pub norm: Tensor,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}
impl_params!(MqaWeights { norm, q, k, v, o });

impl MqaWeights {
    fn init(init: &mut Init, channels: usize, heads: usize) -> Self {
        let hd = channels / heads;
        let mut lin = |o: usize, i: usize| Linear::new(init.lecun(&[o, i], i), Some(Tensor::zeros(&[o])));
        Self {
            q: lin(channels, channels),
            k: lin(hd, channels),
            v: lin(hd, channels),
            o: lin(channels, channels),
            norm: Tensor::full(&[channels], 1.0),
        }
    }

    fn spec(&self) -> AttentionSpec {
        let c = self.q.out_dim();
        let hd = self.k.out_dim();
        AttentionSpec {
            d_model: c,
            n_heads: c / hd,
            n_kv_heads: 1,
            head_dim: hd,
            causal: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderBlock {
    pub ir: IrBlockWeights,
    pub mqa: Option<MqaWeights>,
}
impl_params!(EncoderBlock { ir, mqa });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stem {
    pub conv: ConvLayer,
    pub norm: Tensor,
}
impl_params!(Stem { conv, norm });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub stem: Stem,
    pub blocks: Vec<Vec<EncoderBlock>>,
    pub msfa: IrBlockWeights,
}
impl_params!(Encoder { stem, blocks, msfa });

#[derive(Debug, Clone, PartialEq)]
pub struct VisualTokens {
    /// `[num_tokens, token_dim]`
    pub tokens: Tensor,
}

/// Emits the standard per-op traffic event for a convolution.
fn conv_event(obs: &mut dyn Observer, layer: u16, op: &'static str, spec: &Conv2dSpec, h: usize, w: usize, extra_weights: usize) -> Result<()> {
    let (oh, ow) = spec.out_hw(h, w)?;
    let ws = spec.weight_shape();
    let weights = ws.iter().product::<usize>() + spec.out_channels + extra_weights;
    let inputs = [(spec.in_channels * h * w) as u64];
    let outputs = [(spec.out_channels * oh * ow) as u64];
    obs.op(&OpEvent::compute(Scope::Encoder, layer, op, spec.macs(h, w)?, weights as u64, &inputs, &outputs));
    Ok(())
}

fn site(obs: &mut dyn Observer, layer: u16, name: &'static str, t: &mut Tensor) {
    obs.activation(SiteId::new(Scope::Encoder, layer, name), t.data_mut());
}

/// Site and op names of one inverted-residual layer.
struct IrNames {
    input: Option<&'static str>,
    expand: &'static str,
    expand_act: &'static str,
    dw: &'static str,
    dw_act: &'static str,
    project: &'static str,
    norm: &'static str,
}

const BLOCK_NAMES: IrNames = IrNames {
    input: Some("ir.in"),
    expand: "ir.expand",
    expand_act: "ir.expand_act",
    dw: "ir.dw",
    dw_act: "ir.dw_act",
    project: "ir.project",
    norm: "ir.norm",
};

const MSFA_NAMES: IrNames = IrNames {
    input: None,
    expand: "msfa.expand",
    expand_act: "msfa.expand_act",
    dw: "msfa.dw",
    dw_act: "msfa.dw_act",
    project: "msfa.project",
    norm: "msfa.norm",
};

/// Runs one inverted-residual block on `[1, C, H, W]`. GELU follows the
/// expand and depthwise convs; RMSNorm (over channels) follows the project.
/// The skip path is added when the stride is 1 and channels are unchanged.
pub fn ir_block(x: &Tensor, w: &IrBlockWeights, stride: usize, layer: u16, obs: &mut dyn Observer) -> Result<Tensor> {
    ir_layer(x, w, stride, w.has_residual(stride), layer, &BLOCK_NAMES, obs)
}

fn ir_layer(x: &Tensor, w: &IrBlockWeights, stride: usize, residual: bool, layer: u16, names: &IrNames, obs: &mut dyn Observer) -> Result<Tensor> {
    if x.rank() != 4 || x.dim(0) != 1 || x.dim(1) != w.in_channels() {
        return Err(Error::shape(format!("ir block input {:?} for {} channels", x.shape(), w.in_channels())));
    }
    let (h, wd) = (x.dim(2), x.dim(3));
    let k = w.kernel();
    let mut input = x.clone();
    if let Some(n) = names.input {
        site(obs, layer, n, &mut input);
    }

    let mut e = gelu_tanh(&pointwise_conv2d(&input, &w.expand.weight, Some(&w.expand.bias))?);
    conv_event(obs, layer, names.expand, &Conv2dSpec::pointwise(w.in_channels(), w.hidden()), h, wd, 0)?;
    site(obs, layer, names.expand_act, &mut e);

    let dw_spec = Conv2dSpec::depthwise(w.hidden(), k, stride, k / 2);
    let mut d = gelu_tanh(&depthwise_conv2d(&e, &w.dw.weight, Some(&w.dw.bias), &dw_spec)?);
    conv_event(obs, layer, names.dw, &dw_spec, h, wd, 0)?;
    site(obs, layer, names.dw_act, &mut d);

    let (oh, ow) = (d.dim(2), d.dim(3));
    let p = pointwise_conv2d(&d, &w.project.weight, Some(&w.project.bias))?;
    let mut y = rmsnorm_channels(&p, &w.norm, DEFAULT_RMS_EPS)?;
    conv_event(obs, layer, names.project, &Conv2dSpec::pointwise(w.hidden(), w.out_channels()), oh, ow, w.out_channels())?;
    site(obs, layer, names.norm, &mut y);

    if residual {
        y.add_assign(&input)?;
    }
    Ok(y)
}

fn map_to_seq(x: &Tensor) -> Result<Tensor> {
    let (c, hw) = (x.dim(1), x.dim(2) * x.dim(3));
    let src = x.data();
    Tensor::new(vec![hw, c], (0..hw * c).map(|i| src[(i % c) * hw + i / c]).collect())
}

fn seq_to_map(s: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (hw, c) = (s.dim(0), s.dim(1));
    let src = s.data();
    Tensor::new(vec![1, c, h, w], (0..hw * c).map(|i| src[(i % hw) * c + i / hw]).collect())
}

/// Pre-norm multi-query self-attention over all pixels, with residual.
pub fn mqa_bottleneck(x: &Tensor, w: &MqaWeights, layer: u16, obs: &mut dyn Observer) -> Result<Tensor> {
    let (h, wd) = (x.dim(2), x.dim(3));
    let seq = map_to_seq(x)?;
    let spec = w.spec();
    let (t, c, hd, heads) = (seq.dim(0), spec.d_model, spec.head_dim, spec.n_heads);
    if seq.dim(1) != c {
        return Err(Error::shape(format!("mqa over {c} channels got {:?}", x.shape())));
    }
    let mut n = rmsnorm(&seq, &w.norm, DEFAULT_RMS_EPS)?;
    site(obs, layer, "mqa.norm", &mut n);
    let mut q = w.q.forward(&n)?;
    let mut k = w.k.forward(&n)?;
    let mut v = w.v.forward(&n)?;
    let qkv_w = w.norm.len() + w.q.param_count() + w.k.param_count() + w.v.param_count();
    obs.op(&OpEvent::compute(Scope::Encoder, layer, "mqa.qkv", (t * c * (c + 2 * hd)) as u64, qkv_w as u64, &[(t * c) as u64], &[(t * (c + 2 * hd)) as u64]));
    site(obs, layer, "mqa.q", &mut q);
    site(obs, layer, "mqa.k", &mut k);
    site(obs, layer, "mqa.v", &mut v);

    let mut probs = attention_probs(&q, &k, &v, &spec, Mask::None)?;
    let score_elems = (heads * t * t) as u64;
    obs.op(&OpEvent::compute(Scope::Encoder, layer, "mqa.scores", (heads * t * t * hd) as u64, 0, &[(t * c) as u64, (t * hd) as u64], &[score_elems]));
    obs.op(&OpEvent::compute(Scope::Encoder, layer, "mqa.softmax", 0, 0, &[score_elems], &[score_elems]));
    site(obs, layer, "mqa.probs", &mut probs);

    let mut ctx = attend(&probs, &v, &spec)?;
    obs.op(&OpEvent::compute(Scope::Encoder, layer, "mqa.av", (heads * t * t * hd) as u64, 0, &[score_elems, (t * hd) as u64], &[(t * c) as u64]));
    site(obs, layer, "mqa.ctx", &mut ctx);

    let o = linear(&ctx, &w.o.weight, w.o.bias.as_ref())?;
    obs.op(&OpEvent::compute(Scope::Encoder, layer, "mqa.out", (t * c * c) as u64, w.o.param_count() as u64, &[(t * c) as u64], &[(t * c) as u64]));
    let out = seq.add(&o)?;
    seq_to_map(&out, h, wd)
}

/// Upsamples the coarser tap to the finer tap's side (nearest, factor 2,
/// cropped when the finer side is odd) and concatenates channels.
fn fuse_taps(fine: &Tensor, coarse: &Tensor) -> Result<Tensor> {
    let side = fine.dim(2);
    if fine.rank() != 4 || coarse.rank() != 4 || coarse.dim(2) != side.div_ceil(2) || coarse.dim(3) != fine.dim(3).div_ceil(2) {
        return Err(Error::shape(format!("msfa taps {:?} and {:?}", fine.shape(), coarse.shape())));
    }
    let up = upsample_nearest(coarse, 2)?;
    let (uh, uw) = (up.dim(2), up.dim(3));
    let (fh, fw) = (fine.dim(2), fine.dim(3));
    let mut data = fine.data().to_vec();
    for plane in up.data().chunks(uh * uw) {
        for y in 0..fh {
            data.extend_from_slice(&plane[y * uw..y * uw + fw]);
        }
    }
    Tensor::new(vec![1, fine.dim(1) + coarse.dim(1), fh, fw], data)
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let k = cfg.dw_kernel;
        let stem_spec = Conv2dSpec::dense(cfg.in_channels, cfg.stem_channels, 3, 2, 1);
        let stem = Stem {
            conv: ConvLayer::init(&mut init, &stem_spec),
            norm: Tensor::full(&[cfg.stem_channels], 1.0),
        };
        let mut cin = cfg.stem_channels;
        let mut blocks = Vec::new();
        for (si, st) in cfg.stages.iter().enumerate() {
            let mut stage = Vec::new();
            for b in 0..st.num_blocks {
                let ir = IrBlockWeights::init(&mut init, cin, cin * st.expansion, st.channels, k);
                let mqa = cfg.has_mqa(si, b).then(|| MqaWeights::init(&mut init, st.channels, cfg.mqa_heads));
                stage.push(EncoderBlock { ir, mqa });
                cin = st.channels;
            }
            blocks.push(stage);
        }
        let fin = cfg.msfa_in_channels();
        let msfa = IrBlockWeights::init(&mut init, fin, fin * cfg.msfa_expansion, cfg.msfa_out_channels, k);
        Ok(Self { cfg, stem, blocks, msfa })
    }

    /// Layer id of the fusion stage (after stem and all blocks).
    pub fn msfa_layer(&self) -> u16 {
        1 + self.blocks.iter().map(Vec::len).sum::<usize>() as u16
    }

    fn check_image(&self, img: &Tensor) -> Result<Tensor> {
        let s = self.cfg.input_size;
        let ok = match img.shape() {
            [c, h, w] => *c == self.cfg.in_channels && *h == s && *w == s,
            [1, c, h, w] => *c == self.cfg.in_channels && *h == s && *w == s,
            _ => false,
        };
        if !ok {
            return Err(Error::shape(format!(
                "image {:?}, encoder expects [{}, {s}, {s}]",
                img.shape(),
                self.cfg.in_channels
            )));
        }
        img.clone().reshape(&[1, self.cfg.in_channels, s, s])
    }

    /// Stem and the four stages; returns every stage output.
    pub fn features(&self, img: &Tensor, obs: &mut dyn Observer) -> Result<Vec<Tensor>> {
        let mut x = self.check_image(img)?;
        site(obs, 0, "stem.in", &mut x);
        let spec = Conv2dSpec::dense(self.cfg.in_channels, self.cfg.stem_channels, 3, 2, 1);
        let c = conv2d_direct(&x, &self.stem.conv.weight, Some(&self.stem.conv.bias), &spec)?;
        conv_event(obs, 0, "stem.conv", &spec, x.dim(2), x.dim(3), self.cfg.stem_channels)?;
        let mut n = rmsnorm_channels(&c, &self.stem.norm, DEFAULT_RMS_EPS)?;
        site(obs, 0, "stem.norm", &mut n);
        let mut x = gelu_tanh(&n);
        site(obs, 0, "stem.act", &mut x);

        let mut layer = 1u16;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.blocks {
            for (b, block) in stage.iter().enumerate() {
                let stride = if b == 0 { 2 } else { 1 };
                x = ir_block(&x, &block.ir, stride, layer, obs)?;
                if let Some(m) = &block.mqa {
                    x = mqa_bottleneck(&x, m, layer, obs)?;
                }
                layer += 1;
            }
            outs.push(x.clone());
        }
        Ok(outs)
    }

    /// Fuses stage-3 and stage-4 maps into the pooled `[1, C, s, s]` map.
    pub fn msfa_fuse(&self, stage3: &Tensor, stage4: &Tensor, obs: &mut dyn Observer) -> Result<Tensor> {
        let layer = self.msfa_layer();
        let mut fused = fuse_taps(stage3, stage4)?;
        let (h, w) = (fused.dim(2), fused.dim(3));
        obs.op(&OpEvent::compute(
            Scope::Encoder,
            layer,
            "msfa.upsample",
            0,
            0,
            &[stage4.len() as u64],
            &[(stage4.dim(1) * h * w) as u64],
        ));
        site(obs, layer, "msfa.in", &mut fused);
        let y = ir_layer(&fused, &self.msfa, 1, false, layer, &MSFA_NAMES, obs)?;
        let pooled = avg_pool2d(&y, self.cfg.pool_kernel, self.cfg.pool_stride)?;
        obs.op(&OpEvent::compute(Scope::Encoder, layer, "msfa.pool", 0, 0, &[y.len() as u64], &[pooled.len() as u64]));
        Ok(pooled)
    }

    pub fn encode(&self, img: &Tensor, obs: &mut dyn Observer) -> Result<VisualTokens> {
        let feats = self.features(img, obs)?;
        let pooled = self.msfa_fuse(&feats[2], &feats[3], obs)?;
        let mut tokens = map_to_seq(&pooled)?;
        site(obs, self.msfa_layer(), "tokens", &mut tokens);
        Ok(VisualTokens { tokens })
    }
}

impl Calibrate for Encoder {
    type Input = Tensor;

    fn run_observed(&self, input: &Tensor, obs: &mut dyn Observer) -> Result<()> {
        self.encode(input, obs).map(|_| ())
    }

    fn probe_input(&self) -> Tensor {
        let s = self.cfg.input_size;
        Tensor::zeros(&[self.cfg.in_channels, s, s])
    }

    fn param_prefix(&self) -> &'static str {
        "enc"
    }
}

/// Records activation extrema and magnitude histograms at every site of the
/// encoder over a batch of images.
pub fn activation_range_probe(enc: &Encoder, images: &[Tensor]) -> Result<RangeBook> {
    collect_ranges(enc, images, CalibMethod::MinMax)
}
