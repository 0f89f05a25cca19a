//! Hybrid decoder: gated short-kernel convolution layers with a rolling
//! state, interleaved with grouped-query attention layers with a KV cache.
//! Every layer is pre-RMSNorm → mixer → residual → pre-RMSNorm → SwiGLU → residual.
//!
//! Prefill and decode share one chunked forward, so a prompt processed in
//! one call or token by token produces bitwise-identical logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::impl_params;
use crate::init::Init;
use crate::nn::{attend, attention_probs, linear, rmsnorm, silu, AttentionSpec, Linear, Mask, DEFAULT_RMS_EPS};
use crate::params::{join, Params};
use crate::probe::{Observer, OpEvent, Scope, SiteId, StateKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    Attn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub n_layers: usize,
    /// One char per layer: `C` gated conv, `A` attention.
    pub layer_pattern: String,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub conv_kernel: usize,
    pub ffn_inner: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub rope_base: f64,
    pub tie_embeddings: bool,
}

pub const DEFAULT_PATTERN: &str = "CCACCACCACCACCAA";

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl BackboneConfig {
    pub fn toy() -> Self {
        Self {
            n_layers: 16,
            layer_pattern: DEFAULT_PATTERN.to_string(),
            d_model: 256,
            n_heads: 4,
            n_kv_heads: 1,
            head_dim: 64,
            conv_kernel: 3,
            ffn_inner: 1024,
            vocab_size: 4096,
            max_context: 4096,
            rope_base: 1e4,
            tie_embeddings: false,
        }
    }

    /// Same dims with every layer attention.
    pub fn pure_transformer(&self) -> Self {
        Self {
            layer_pattern: "A".repeat(self.n_layers),
            ..self.clone()
        }
    }

    pub fn kinds(&self) -> Vec<LayerKind> {
        self.layer_pattern
            .chars()
            .map(|c| if c == 'C' { LayerKind::Conv } else { LayerKind::Attn })
            .collect()
    }

    pub fn count(&self, kind: LayerKind) -> usize {
        self.kinds().into_iter().filter(|&k| k == kind).count()
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn attention_spec(&self) -> AttentionSpec {
        AttentionSpec {
            d_model: self.n_heads * self.head_dim,
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            head_dim: self.head_dim,
            causal: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, r: String| Err(Error::config(format!("backbone.{f}"), r));
        if self.layer_pattern.chars().any(|c| c != 'C' && c != 'A') {
            return bad("layer_pattern", format!("`{}` must contain only C and A", self.layer_pattern));
        }
        if self.layer_pattern.len() != self.n_layers || self.n_layers == 0 {
            return bad("layer_pattern", format!("length {} != n_layers {}", self.layer_pattern.len(), self.n_layers));
        }
        if !(2..=8).contains(&self.conv_kernel) {
            return bad("conv_kernel", format!("{} outside 2..=8", self.conv_kernel));
        }
        for (f, v) in [
            ("d_model", self.d_model),
            ("ffn_inner", self.ffn_inner),
            ("vocab_size", self.vocab_size),
            ("max_context", self.max_context),
            ("head_dim", self.head_dim),
            ("n_kv_heads", self.n_kv_heads),
        ] {
            if v == 0 {
                return bad(f, "must be positive".into());
            }
        }
        if self.n_heads * self.head_dim != self.d_model {
            return bad("n_heads", format!("{} × head_dim {} != d_model {}", self.n_heads, self.head_dim, self.d_model));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return bad("n_kv_heads", format!("{} does not divide n_heads {}", self.n_kv_heads, self.n_heads));
        }
        if self.head_dim % 2 != 0 {
            return bad("head_dim", "rotary embedding needs an even head_dim".into());
        }
        if !(self.rope_base > 1.0) {
            return bad("rope_base", format!("{} must exceed 1", self.rope_base));
        }
        Ok(())
    }
}

/// `u = in_proj·x` split into (gate, cand); a causal depthwise conv over the
/// cand history; `out_proj·(silu(gate) ⊙ conv)`. The last kernel tap
/// multiplies the current input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvMixer {
    pub in_proj: Linear,
    /// `[d_model, conv_kernel]`
    pub kernel: Tensor,
    pub out_proj: Linear,
}
impl_params!(ConvMixer { in_proj, kernel, out_proj });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnMixer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}
impl_params!(AttnMixer { q, k, v, o });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Mixer {
    Conv(ConvMixer),
    Attn(AttnMixer),
}

impl Params for Mixer {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        match self {
            Mixer::Conv(m) => m.collect(&join(prefix, "conv"), out),
            Mixer::Attn(m) => m.collect(&join(prefix, "attn"), out),
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        match self {
            Mixer::Conv(m) => m.collect_mut(&join(prefix, "conv"), out),
            Mixer::Attn(m) => m.collect_mut(&join(prefix, "attn"), out),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ffn {
    pub gate: Tensor,
    pub up: Tensor,
    pub down: Tensor,
}
impl_params!(Ffn { gate, up, down });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub norm1: Tensor,
    pub mixer: Mixer,
    pub norm2: Tensor,
    pub ffn: Ffn,
}
impl_params!(DecoderLayer { norm1, mixer, norm2, ffn });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub embed: Tensor,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: Tensor,
    /// Absent when tied to `embed`.
    pub head: Option<Tensor>,
}
impl_params!(Backbone { embed, layers, final_norm, head });

/// Ring buffer of the last `conv_kernel - 1` cand vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct RollingState {
    buf: Vec<f32>,
    slots: usize,
    width: usize,
    cursor: usize,
}

impl RollingState {
    pub fn new(slots: usize, width: usize) -> Self {
        Self {
            buf: vec![0.0; slots * width],
            slots,
            width,
            cursor: 0,
        }
    }

    /// `i`-th oldest entry.
    pub fn get(&self, i: usize) -> &[f32] {
        let s = (self.cursor + i) % self.slots;
        &self.buf[s * self.width..(s + 1) * self.width]
    }

    pub fn push(&mut self, v: &[f32]) {
        let s = self.cursor;
        self.buf[s * self.width..(s + 1) * self.width].copy_from_slice(v);
        self.cursor = (s + 1) % self.slots;
    }

    pub fn elems(&self) -> usize {
        self.buf.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    k: Vec<f32>,
    v: Vec<f32>,
    kv_dim: usize,
    len: usize,
}

impl KvCache {
    pub fn new(kv_dim: usize) -> Self {
        Self {
            k: Vec::new(),
            v: Vec::new(),
            kv_dim,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn elems(&self) -> usize {
        self.k.len() + self.v.len()
    }

    fn append(&mut self, k: &Tensor, v: &Tensor) {
        self.k.extend_from_slice(k.data());
        self.v.extend_from_slice(v.data());
        self.len += k.dim(0);
    }

    fn tensors(&self) -> Result<(Tensor, Tensor)> {
        Ok((
            Tensor::new(vec![self.len, self.kv_dim], self.k.clone())?,
            Tensor::new(vec![self.len, self.kv_dim], self.v.clone())?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerState {
    Conv(RollingState),
    Attn(KvCache),
}

/// Per-sequence decode state. One writer at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeSession {
    pub states: Vec<LayerState>,
    pub position: usize,
    pub max_context: usize,
}

impl DecodeSession {
    pub fn rolling_state_bytes(&self, elem_bytes: usize) -> usize {
        self.states
            .iter()
            .map(|s| match s {
                LayerState::Conv(r) => r.elems() * elem_bytes,
                LayerState::Attn(_) => 0,
            })
            .sum()
    }

    pub fn kv_bytes(&self, elem_bytes: usize) -> usize {
        self.states
            .iter()
            .map(|s| match s {
                LayerState::Attn(c) => c.elems() * elem_bytes,
                LayerState::Conv(_) => 0,
            })
            .sum()
    }

    pub fn kv_lengths(&self) -> Vec<usize> {
        self.states
            .iter()
            .filter_map(|s| match s {
                LayerState::Attn(c) => Some(c.len()),
                LayerState::Conv(_) => None,
            })
            .collect()
    }
}

/// Rotates consecutive pairs of every head in place; row `i` is at
/// position `start + i`.
pub fn apply_rope(x: &mut Tensor, head_dim: usize, start: usize, base: f64) {
    let width = x.last_dim();
    let half = head_dim / 2;
    let inv: Vec<f64> = (0..half).map(|i| base.powf(-2.0 * i as f64 / head_dim as f64)).collect();
    for r in 0..x.rows() {
        let pos = (start + r) as f64;
        let row = x.row_mut(r);
        for h in 0..width / head_dim {
            let seg = &mut row[h * head_dim..(h + 1) * head_dim];
            for (i, &f) in inv.iter().enumerate() {
                let (s, c) = (pos * f).sin_cos();
                let (a, b) = (seg[2 * i] as f64, seg[2 * i + 1] as f64);
                seg[2 * i] = (a * c - b * s) as f32;
                seg[2 * i + 1] = (a * s + b * c) as f32;
            }
        }
    }
}

fn site(obs: &mut dyn Observer, layer: usize, name: &'static str, t: &mut Tensor) {
    obs.activation(SiteId::new(Scope::Lm, layer as u16, name), t.data_mut());
}

fn split_cols(u: &Tensor, at: usize) -> Result<(Tensor, Tensor)> {
    let (n, w) = (u.rows(), u.last_dim());
    let mut a = Vec::with_capacity(n * at);
    let mut b = Vec::with_capacity(n * (w - at));
    for r in 0..n {
        let row = u.row(r);
        a.extend_from_slice(&row[..at]);
        b.extend_from_slice(&row[at..]);
    }
    Ok((Tensor::new(vec![n, at], a)?, Tensor::new(vec![n, w - at], b)?))
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let d = cfg.d_model;
        let embed = init.normal(&[cfg.vocab_size, d], 1.0);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for kind in cfg.kinds() {
            let mut lin = |o: usize, i: usize| Linear::new(init.lecun(&[o, i], i), None);
            let mixer = match kind {
                LayerKind::Conv => {
                    let in_proj = lin(2 * d, d);
                    let out_proj = lin(d, d);
                    let kernel = init.lecun(&[d, cfg.conv_kernel], cfg.conv_kernel);
                    Mixer::Conv(ConvMixer { in_proj, kernel, out_proj })
                }
                LayerKind::Attn => Mixer::Attn(AttnMixer {
                    q: lin(d, d),
                    k: lin(cfg.kv_dim(), d),
                    v: lin(cfg.kv_dim(), d),
                    o: lin(d, d),
                }),
            };
            let ffn = Ffn {
                gate: init.lecun(&[cfg.ffn_inner, d], d),
                up: init.lecun(&[cfg.ffn_inner, d], d),
                down: init.lecun(&[d, cfg.ffn_inner], cfg.ffn_inner),
            };
            layers.push(DecoderLayer {
                norm1: Tensor::full(&[d], 1.0),
                mixer,
                norm2: Tensor::full(&[d], 1.0),
                ffn,
            });
        }
        let head = (!cfg.tie_embeddings).then(|| init.lecun(&[cfg.vocab_size, d], d));
        Ok(Self {
            final_norm: Tensor::full(&[d], 1.0),
            cfg,
            embed,
            layers,
            head,
        })
    }

    pub fn head_weight(&self) -> &Tensor {
        self.head.as_ref().unwrap_or(&self.embed)
    }

    pub fn new_session(&self) -> DecodeSession {
        let states = self
            .cfg
            .kinds()
            .into_iter()
            .map(|k| match k {
                LayerKind::Conv => LayerState::Conv(RollingState::new(self.cfg.conv_kernel - 1, self.cfg.d_model)),
                LayerKind::Attn => LayerState::Attn(KvCache::new(self.cfg.kv_dim())),
            })
            .collect();
        DecodeSession {
            states,
            position: 0,
            max_context: self.cfg.max_context,
        }
    }

    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Tensor> {
        let d = self.cfg.d_model;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= self.cfg.vocab_size {
                return Err(Error::shape(format!("token id {id} >= vocab {}", self.cfg.vocab_size)));
            }
            out.extend_from_slice(self.embed.row(id as usize));
        }
        Tensor::new(vec![ids.len(), d], out)
    }

    /// Full-sequence pass; fills `session` for continuation.
    pub fn prefill(&self, emb: &Tensor, session: &mut DecodeSession, obs: &mut dyn Observer) -> Result<Tensor> {
        self.forward(emb, session, obs)
    }

    /// One position. `emb` is `[d_model]` or `[1, d_model]`.
    pub fn decode_step(&self, emb: &Tensor, session: &mut DecodeSession, obs: &mut dyn Observer) -> Result<Tensor> {
        if emb.len() != self.cfg.d_model {
            return Err(Error::shape(format!("decode step expects {} features, got {:?}", self.cfg.d_model, emb.shape())));
        }
        let x = emb.clone().reshape(&[1, self.cfg.d_model])?;
        self.forward(&x, session, obs)
    }

    /// Runs `x` (`[T, d_model]`) at positions `session.position..+T`.
    pub fn forward(&self, x: &Tensor, session: &mut DecodeSession, obs: &mut dyn Observer) -> Result<Tensor> {
        let cfg = &self.cfg;
        if x.rank() != 2 || x.dim(1) != cfg.d_model {
            return Err(Error::shape(format!("backbone expects [T, {}], got {:?}", cfg.d_model, x.shape())));
        }
        if session.states.len() != self.layers.len() {
            return Err(Error::shape("session does not belong to this backbone"));
        }
        let t = x.dim(0);
        if session.position + t > session.max_context {
            return Err(Error::ContextOverflow {
                step: session.max_context + 1,
                max_context: session.max_context,
            });
        }
        let mut h = x.clone();
        for (li, (layer, state)) in self.layers.iter().zip(session.states.iter_mut()).enumerate() {
            let mut n = rmsnorm(&h, &layer.norm1, DEFAULT_RMS_EPS)?;
            site(obs, li, "norm1", &mut n);
            let mixed = match (&layer.mixer, state) {
                (Mixer::Conv(m), LayerState::Conv(s)) => self.conv_mix(&n, m, s, li, obs)?,
                (Mixer::Attn(m), LayerState::Attn(c)) => self.attn_mix(&n, m, c, session.position, li, obs)?,
                _ => return Err(Error::shape(format!("layer {li} state does not match its mixer"))),
            };
            h.add_assign(&mixed)?;
            let mut n2 = rmsnorm(&h, &layer.norm2, DEFAULT_RMS_EPS)?;
            site(obs, li, "norm2", &mut n2);
            let f = self.ffn(&n2, &layer.ffn, li, obs)?;
            h.add_assign(&f)?;
        }
        session.position += t;
        let last = self.layers.len();
        let mut n = rmsnorm(&h, &self.final_norm, DEFAULT_RMS_EPS)?;
        site(obs, last, "final_norm", &mut n);
        let w = self.head_weight();
        let logits = linear(&n, w, None)?;
        obs.op(&OpEvent::compute(
            Scope::Lm,
            last as u16,
            "head",
            (t * cfg.d_model * cfg.vocab_size) as u64,
            (w.len() + cfg.d_model) as u64,
            &[n.len() as u64],
            &[logits.len() as u64],
        ));
        Ok(logits)
    }

    fn conv_mix(&self, x: &Tensor, m: &ConvMixer, state: &mut RollingState, li: usize, obs: &mut dyn Observer) -> Result<Tensor> {
        let d = self.cfg.d_model;
        let k = self.cfg.conv_kernel;
        let t = x.rows();
        let u = m.in_proj.forward(x)?;
        obs.op(&OpEvent::compute(
            Scope::Lm,
            li as u16,
            "conv.in_proj",
            (t * d * 2 * d) as u64,
            (m.in_proj.param_count() + d) as u64,
            &[x.len() as u64],
            &[u.len() as u64],
        ));
        let (gate, mut cand) = split_cols(&u, d)?;
        site(obs, li, "cand", &mut cand);

        let slots = (k - 1) * d;
        obs.op(&OpEvent::state(Scope::Lm, li as u16, "conv.state", StateKind::RollingConv, slots as u64, slots as u64));
        let kern = m.kernel.data();
        let mut c = vec![0f32; t * d];
        for step in 0..t {
            let out = &mut c[step * d..(step + 1) * d];
            for j in 0..k {
                // tap j sees the input k-1-j steps back
                let back = k - 1 - j;
                let src: &[f32] = if back <= step {
                    cand.row(step - back)
                } else {
                    state.get(k - 1 - (back - step))
                };
                for ch in 0..d {
                    out[ch] += kern[ch * k + j] * src[ch];
                }
            }
        }
        for step in t.saturating_sub(k - 1)..t {
            state.push(cand.row(step));
        }
        obs.op(&OpEvent::compute(
            Scope::Lm,
            li as u16,
            "conv.core",
            (t * d * k) as u64,
            m.kernel.len() as u64,
            &[(2 * t * d) as u64],
            &[(t * d) as u64],
        ));

        let mut g = gate.map(silu);
        site(obs, li, "gate_act", &mut g);
        let mut mix = Tensor::new(vec![t, d], g.data().iter().zip(&c).map(|(a, b)| a * b).collect())?;
        site(obs, li, "mix", &mut mix);
        let y = m.out_proj.forward(&mix)?;
        obs.op(&OpEvent::compute(
            Scope::Lm,
            li as u16,
            "conv.out_proj",
            (t * d * d) as u64,
            m.out_proj.param_count() as u64,
            &[mix.len() as u64],
            &[y.len() as u64],
        ));
        Ok(y)
    }

    fn attn_mix(&self, x: &Tensor, m: &AttnMixer, cache: &mut KvCache, start: usize, li: usize, obs: &mut dyn Observer) -> Result<Tensor> {
        let cfg = &self.cfg;
        let (d, kv, hd) = (cfg.d_model, cfg.kv_dim(), cfg.head_dim);
        let t = x.rows();
        let mut q = m.q.forward(x)?;
        let mut k = m.k.forward(x)?;
        let mut v = m.v.forward(x)?;
        obs.op(&OpEvent::compute(
            Scope::Lm,
            li as u16,
            "attn.qkv",
            (t * d * (d + 2 * kv)) as u64,
            (m.q.param_count() + m.k.param_count() + m.v.param_count() + d) as u64,
            &[x.len() as u64],
            &[(t * (d + 2 * kv)) as u64],
        ));
        apply_rope(&mut q, hd, start, cfg.rope_base);
        apply_rope(&mut k, hd, start, cfg.rope_base);
        site(obs, li, "q", &mut q);
        site(obs, li, "k", &mut k);
        site(obs, li, "v", &mut v);

        obs.op(&OpEvent::state(
            Scope::Lm,
            li as u16,
            "attn.kv",
            StateKind::KvCache,
            (2 * cache.len() * kv) as u64,
            (2 * t * kv) as u64,
        ));
        cache.append(&k, &v);
        let (kc, vc) = cache.tensors()?;
        let spec = cfg.attention_spec();
        let mut probs = attention_probs(&q, &kc, &vc, &spec, Mask::Causal)?;
        site(obs, li, "probs", &mut probs);
        let mut ctx = attend(&probs, &vc, &spec)?;
        site(obs, li, "ctx", &mut ctx);
        // each query i attends to start + i + 1 keys
        let visible = (t * start + t * (t + 1) / 2) as u64;
        obs.op(&OpEvent::compute(
            Scope::Lm,
            li as u16,
            "attn.core",
            2 * visible * (cfg.n_heads * hd) as u64,
            0,
            &[q.len() as u64],
            &[ctx.len() as u64],
        ));
        let y = m.o.forward(&ctx)?;
        obs.op(&OpEvent::compute(
            Scope::Lm,
            li as u16,
            "attn.out",
            (t * d * d) as u64,
            m.o.param_count() as u64,
            &[ctx.len() as u64],
            &[y.len() as u64],
        ));
        Ok(y)
    }

    fn ffn(&self, x: &Tensor, f: &Ffn, li: usize, obs: &mut dyn Observer) -> Result<Tensor> {
        let t = x.rows();
        let (d, inner) = (self.cfg.d_model, self.cfg.ffn_inner);
        let mut g = linear(x, &f.gate, None)?.map(silu);
        site(obs, li, "ffn.gate_act", &mut g);
        let u = linear(x, &f.up, None)?;
        let mut mix = Tensor::new(vec![t, inner], g.data().iter().zip(u.data()).map(|(a, b)| a * b).collect())?;
        site(obs, li, "ffn.mix", &mut mix);
        let y = linear(&mix, &f.down, None)?;
        obs.op(&OpEvent::compute(
            Scope::Lm,
            li as u16,
            "ffn",
            (3 * t * d * inner) as u64,
            (3 * d * inner + d) as u64,
            &[x.len() as u64],
            &[y.len() as u64],
        ));
        Ok(y)
    }

    /// Greedy decoding: prefill the prompt, then feed back each argmax.
    /// Returns `n_steps` token ids.
    pub fn generate_greedy(&self, prompt: &Tensor, n_steps: usize, session: &mut DecodeSession, obs: &mut dyn Observer) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(n_steps);
        if n_steps == 0 {
            return Ok(out);
        }
        let logits = self.prefill(prompt, session, obs)?;
        let mut next = argmax(logits.row(logits.rows() - 1));
        out.push(next);
        while out.len() < n_steps {
            let e = self.embed_tokens(&[next])?;
            let logits = self.decode_step(&e, session, obs)?;
            next = argmax(logits.row(0));
            out.push(next);
        }
        Ok(out)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Logit-only reference: recomputes the whole prefix from scratch each step.
pub fn generate_by_recompute(bb: &Backbone, prompt: &Tensor, n_steps: usize) -> Result<Vec<u32>> {
    let mut seq = prompt.clone();
    let mut out = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let mut s = bb.new_session();
        let logits = bb.prefill(&seq, &mut s, &mut crate::probe::NoObserver)?;
        let next = argmax(logits.row(logits.rows() - 1));
        out.push(next);
        seq = Tensor::concat_rows(&[&seq, &bb.embed_tokens(&[next])?])?;
    }
    Ok(out)
}
