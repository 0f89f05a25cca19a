//! Plain ViT encoder used as the quantization and traffic baseline:
//! patch embedding + learned positions, pre-LayerNorm MHSA/MLP blocks, final
//! LayerNorm and an optional projection head to a target width.

use serde::{Deserialize, Serialize};

use crate::calib::Calibrate;
use crate::error::{Error, Result};
use crate::impl_params;
use crate::init::Init;
use crate::nn::{attend, attention_probs, gelu_tanh, layernorm, AttentionSpec, Linear, Mask};
use crate::probe::{Observer, OpEvent, Scope, SiteId};
use crate::tensor::Tensor;

pub const LN_EPS: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    /// Width of the projection head; 0 disables it.
    pub out_dim: usize,
}

impl VitConfig {
    pub fn toy() -> Self {
        Self {
            image_size: 96,
            patch_size: 16,
            in_channels: 3,
            d_model: 192,
            n_layers: 4,
            n_heads: 4,
            mlp_ratio: 4,
            out_dim: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, r: String| Err(Error::config(format!("vit.{f}"), r));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad("patch_size", format!("{} does not tile image_size {}", self.patch_size, self.image_size));
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return bad("n_heads", format!("{} heads do not divide d_model {}", self.n_heads, self.d_model));
        }
        if self.n_layers == 0 || self.mlp_ratio == 0 || self.in_channels == 0 {
            return bad("n_layers", "layers, mlp_ratio and in_channels must be positive".into());
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn output_dim(&self) -> usize {
        if self.out_dim == 0 {
            self.d_model
        } else {
            self.out_dim
        }
    }

    pub fn attention_spec(&self) -> AttentionSpec {
        AttentionSpec {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_kv_heads: self.n_heads,
            head_dim: self.head_dim(),
            causal: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormWeights {
    pub gain: Tensor,
    pub bias: Tensor,
}
impl_params!(LayerNormWeights { gain, bias });

impl LayerNormWeights {
    fn unit(d: usize) -> Self {
        Self {
            gain: Tensor::full(&[d], 1.0),
            bias: Tensor::zeros(&[d]),
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        layernorm(x, &self.gain, &self.bias, LN_EPS)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitBlock {
    pub ln1: LayerNormWeights,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNormWeights,
    pub fc1: Linear,
    pub fc2: Linear,
}
impl_params!(VitBlock { ln1, q, k, v, o, ln2, fc1, fc2 });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vit {
    pub cfg: VitConfig,
    pub patch_embed: Linear,
    pub pos_embed: Tensor,
    pub blocks: Vec<VitBlock>,
    pub final_ln: LayerNormWeights,
    pub proj: Option<Linear>,
}
impl_params!(Vit { patch_embed, pos_embed, blocks, final_ln, proj });

/// `[C, S, S]` image to `[num_patches, C·p·p]`, patches in row-major order,
/// features ordered (channel, y, x).
pub fn patchify(img: &Tensor, patch: usize) -> Result<Tensor> {
    let (c, h, w) = match img.shape() {
        [c, h, w] | [1, c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape(format!("patchify needs [C, H, W], got {s:?}"))),
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!("{h}x{w} image not tiled by patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for y in 0..patch {
                    let base = ch * h * w + (py * patch + y) * w + px * patch;
                    out.extend_from_slice(&src[base..base + patch]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, c * patch * patch], out)
}

fn site(obs: &mut dyn Observer, layer: usize, name: &'static str, t: &mut Tensor) {
    obs.activation(SiteId::new(Scope::Vit, layer as u16, name), t.data_mut());
}

fn event(obs: &mut dyn Observer, layer: usize, op: &'static str, macs: usize, weights: usize, inputs: &[u64], outputs: &[u64]) {
    obs.op(&OpEvent::compute(Scope::Vit, layer as u16, op, macs as u64, weights as u64, inputs, outputs));
}

impl Vit {
    pub fn new(cfg: VitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let d = cfg.d_model;
        let lin = |init: &mut Init, o: usize, i: usize| Linear::new(init.lecun(&[o, i], i), Some(Tensor::zeros(&[o])));
        let patch_embed = lin(&mut init, d, cfg.patch_dim());
        let pos_embed = init.normal(&[cfg.num_tokens(), d], 0.02);
        let blocks = (0..cfg.n_layers)
            .map(|_| VitBlock {
                ln1: LayerNormWeights::unit(d),
                q: lin(&mut init, d, d),
                k: lin(&mut init, d, d),
                v: lin(&mut init, d, d),
                o: lin(&mut init, d, d),
                ln2: LayerNormWeights::unit(d),
                fc1: lin(&mut init, d * cfg.mlp_ratio, d),
                fc2: lin(&mut init, d, d * cfg.mlp_ratio),
            })
            .collect();
        let proj = (cfg.out_dim != 0).then(|| lin(&mut init, cfg.out_dim, d));
        Ok(Self {
            cfg,
            patch_embed,
            pos_embed,
            blocks,
            final_ln: LayerNormWeights::unit(d),
            proj,
        })
    }

    pub fn final_layer(&self) -> usize {
        self.cfg.n_layers + 1
    }

    /// `[num_tokens, output_dim]`
    pub fn encode(&self, img: &Tensor, obs: &mut dyn Observer) -> Result<Tensor> {
        let cfg = &self.cfg;
        let s = cfg.image_size;
        if img.len() != cfg.in_channels * s * s || img.shape().iter().rev().take(2).any(|&v| v != s) {
            return Err(Error::shape(format!("image {:?}, vit expects [{}, {s}, {s}]", img.shape(), cfg.in_channels)));
        }
        let (n, d, hd, heads) = (cfg.num_tokens(), cfg.d_model, cfg.head_dim(), cfg.n_heads);
        let mut patches = patchify(img, cfg.patch_size)?;
        site(obs, 0, "patch_in", &mut patches);
        let mut x = self.patch_embed.forward(&patches)?;
        x.add_assign(&self.pos_embed)?;
        event(obs, 0, "patch_embed", n * cfg.patch_dim() * d, self.patch_embed.param_count() + self.pos_embed.len(), &[patches.len() as u64], &[x.len() as u64]);

        let spec = cfg.attention_spec();
        let tok = (n * d) as u64;
        let scores = (heads * n * n) as u64;
        for (i, b) in self.blocks.iter().enumerate() {
            let l = i + 1;
            let mut h = b.ln1.apply(&x)?;
            site(obs, l, "ln1", &mut h);
            let mut q = b.q.forward(&h)?;
            let mut k = b.k.forward(&h)?;
            let mut v = b.v.forward(&h)?;
            let qkv_w = b.ln1.gain.len() * 2 + b.q.param_count() + b.k.param_count() + b.v.param_count();
            event(obs, l, "attn.qkv", n * d * 3 * d, qkv_w, &[tok], &[3 * tok]);
            site(obs, l, "q", &mut q);
            site(obs, l, "k", &mut k);
            site(obs, l, "v", &mut v);
            let mut p = attention_probs(&q, &k, &v, &spec, Mask::None)?;
            event(obs, l, "attn.scores", heads * n * n * hd, 0, &[tok, tok], &[scores]);
            event(obs, l, "attn.softmax", 0, 0, &[scores], &[scores]);
            site(obs, l, "probs", &mut p);
            let mut ctx = attend(&p, &v, &spec)?;
            event(obs, l, "attn.av", heads * n * n * hd, 0, &[scores, tok], &[tok]);
            site(obs, l, "ctx", &mut ctx);
            let a = b.o.forward(&ctx)?;
            event(obs, l, "attn.out", n * d * d, b.o.param_count(), &[tok], &[tok]);
            x.add_assign(&a)?;

            let mut h2 = b.ln2.apply(&x)?;
            site(obs, l, "ln2", &mut h2);
            let mut m = gelu_tanh(&b.fc1.forward(&h2)?);
            let inner = b.fc1.out_dim();
            event(obs, l, "mlp.fc1", n * d * inner, b.ln2.gain.len() * 2 + b.fc1.param_count(), &[tok], &[(n * inner) as u64]);
            site(obs, l, "mlp.act", &mut m);
            let y = b.fc2.forward(&m)?;
            event(obs, l, "mlp.fc2", n * inner * d, b.fc2.param_count(), &[(n * inner) as u64], &[tok]);
            x.add_assign(&y)?;
        }
        let fl = self.final_layer();
        let mut out = self.final_ln.apply(&x)?;
        site(obs, fl, "final_ln", &mut out);
        if let Some(p) = &self.proj {
            let y = p.forward(&out)?;
            event(obs, fl, "proj", n * d * p.out_dim(), p.param_count() + 2 * d, &[tok], &[y.len() as u64]);
            out = y;
        }
        site(obs, fl, "tokens", &mut out);
        Ok(out)
    }
}

impl Calibrate for Vit {
    type Input = Tensor;

    fn run_observed(&self, input: &Tensor, obs: &mut dyn Observer) -> Result<()> {
        self.encode(input, obs).map(|_| ())
    }

    fn probe_input(&self) -> Tensor {
        let s = self.cfg.image_size;
        Tensor::zeros(&[self.cfg.in_channels, s, s])
    }

    fn param_prefix(&self) -> &'static str {
        "vit"
    }
}
