//! Byte-traffic and MAC accounting, closed-form decode traffic, and a
//! roofline latency model driven by the ledger.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbone::{argmax, Backbone, BackboneConfig, DecodeSession, LayerKind};
use crate::calib::{PrecisionPlan, ScopePrecision};
use crate::error::{Error, Result};
use crate::experiments::ImageEncoder;
use crate::probe::{Observer, OpEvent, Scope, SiteId, StateKind};
use crate::tensor::Tensor;
use crate::vlm::{Vlm, VlmInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Vision,
    Prefill,
    Decode,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Vision, Phase::Prefill, Phase::Decode];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Vision => "vision",
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
        }
    }
}

/// Byte and MAC counters for one operator (or any sum of them).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub macs: u64,
    pub weight_read: u64,
    pub act_read: u64,
    pub act_written: u64,
    pub kv_read: u64,
    pub kv_written: u64,
    pub state_read: u64,
    pub state_written: u64,
}

impl Counters {
    pub fn bytes_read(&self) -> u64 {
        self.weight_read + self.act_read + self.kv_read + self.state_read
    }

    pub fn bytes_written(&self) -> u64 {
        self.act_written + self.kv_written + self.state_written
    }

    pub fn bytes(&self) -> u64 {
        self.bytes_read() + self.bytes_written()
    }

    pub fn add(&mut self, o: &Counters) {
        self.macs += o.macs;
        self.weight_read += o.weight_read;
        self.act_read += o.act_read;
        self.act_written += o.act_written;
        self.kv_read += o.kv_read;
        self.kv_written += o.kv_written;
        self.state_read += o.state_read;
        self.state_written += o.state_written;
    }
}

impl std::iter::Sum for Counters {
    fn sum<I: Iterator<Item = Counters>>(iter: I) -> Self {
        iter.fold(Counters::default(), |mut a, c| {
            a.add(&c);
            a
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LedgerKey {
    pub phase: Phase,
    pub scope: Scope,
    pub layer: u16,
    pub op: String,
}

/// Additive per-(phase, scope, layer, op) counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrafficLedger {
    entries: BTreeMap<LedgerKey, Counters>,
    decode_steps: u64,
}

impl TrafficLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, key: LedgerKey, c: &Counters) {
        self.entries.entry(key).or_default().add(c);
    }

    pub fn note_decode_step(&mut self) {
        self.decode_steps += 1;
    }

    pub fn decode_steps(&self) -> u64 {
        self.decode_steps
    }

    pub fn merge(&mut self, other: &TrafficLedger) {
        for (k, c) in &other.entries {
            self.record(k.clone(), c);
        }
        self.decode_steps += other.decode_steps;
    }

    pub fn entries(&self) -> impl Iterator<Item = (&LedgerKey, &Counters)> {
        self.entries.iter()
    }

    pub fn total(&self) -> Counters {
        self.entries.values().copied().sum()
    }

    pub fn phase_total(&self, phase: Phase) -> Counters {
        self.entries.iter().filter(|(k, _)| k.phase == phase).map(|(_, c)| *c).sum()
    }

    /// Totals per (scope, layer) within one phase.
    pub fn layer_totals(&self, phase: Phase) -> BTreeMap<(Scope, u16), Counters> {
        let mut out: BTreeMap<(Scope, u16), Counters> = BTreeMap::new();
        for (k, c) in self.entries.iter().filter(|(k, _)| k.phase == phase) {
            out.entry((k.scope, k.layer)).or_default().add(c);
        }
        out
    }

    /// One row per (phase, scope, layer).
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "phase,scope,layer,macs,bytes_read,bytes_written,weight_read,act_read,act_written,kv_read,kv_written,state_read,state_written\n",
        );
        for phase in Phase::ALL {
            for ((scope, layer), c) in self.layer_totals(phase) {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                    phase.as_str(),
                    scope.prefix(),
                    layer,
                    c.macs,
                    c.bytes_read(),
                    c.bytes_written(),
                    c.weight_read,
                    c.act_read,
                    c.act_written,
                    c.kv_read,
                    c.kv_written,
                    c.state_read,
                    c.state_written
                );
            }
        }
        s
    }

    pub fn summary(&self) -> LedgerSummary {
        LedgerSummary {
            vision: self.phase_total(Phase::Vision),
            prefill: self.phase_total(Phase::Prefill),
            decode: self.phase_total(Phase::Decode),
            decode_steps: self.decode_steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub vision: Counters,
    pub prefill: Counters,
    pub decode: Counters,
    pub decode_steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub peak_macs_per_s: f64,
    pub dram_bytes_per_s: f64,
    pub onchip_buffer_bytes: u64,
}

impl HardwareProfile {
    /// Edge NPU class: 8 TMAC/s, 51.2 GB/s LPDDR5, 4 MiB on-chip SRAM.
    pub fn edge_npu() -> Self {
        Self {
            peak_macs_per_s: 8e12,
            dram_bytes_per_s: 51.2e9,
            onchip_buffer_bytes: 4 << 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.peak_macs_per_s) {
            return Err(Error::config("hw.peak_macs_per_s", "must be positive"));
        }
        if !ok(self.dram_bytes_per_s) {
            return Err(Error::config("hw.dram_bytes_per_s", "must be positive"));
        }
        if self.onchip_buffer_bytes == 0 {
            return Err(Error::config("hw.onchip_buffer_bytes", "must be positive"));
        }
        Ok(())
    }
}

/// How op-event element counts become bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryModel {
    /// Precision per scope, indexed by [`Scope`] order.
    pub precision: [ScopePrecision; 4],
    /// Activation tensors larger than this spill to DRAM.
    pub onchip_buffer_bytes: u64,
    /// Weights stay on chip and cost no DRAM reads.
    pub weights_resident: bool,
}

fn scope_index(s: Scope) -> usize {
    match s {
        Scope::Encoder => 0,
        Scope::Connector => 1,
        Scope::Lm => 2,
        Scope::Vit => 3,
    }
}

impl MemoryModel {
    pub fn new(plan: &PrecisionPlan, onchip_buffer_bytes: u64) -> Result<Self> {
        let p = |s: Scope| plan.resolve(s.prefix());
        Ok(Self {
            precision: [p(Scope::Encoder)?, p(Scope::Connector)?, p(Scope::Lm)?, p(Scope::Vit)?],
            onchip_buffer_bytes,
            weights_resident: false,
        })
    }

    /// Same precision everywhere.
    pub fn uniform(p: ScopePrecision, onchip_buffer_bytes: u64) -> Self {
        Self {
            precision: [p; 4],
            onchip_buffer_bytes,
            weights_resident: false,
        }
    }

    pub fn with_resident_weights(mut self, on: bool) -> Self {
        self.weights_resident = on;
        self
    }

    pub fn precision(&self, s: Scope) -> ScopePrecision {
        self.precision[scope_index(s)]
    }

    pub fn act_bytes(&self, s: Scope) -> u64 {
        u64::from(self.precision(s).activation_bits.div_ceil(8))
    }

    pub fn weight_bytes(&self, s: Scope, elems: u64) -> u64 {
        if self.weights_resident {
            0
        } else {
            (elems * u64::from(self.precision(s).weight_bits)).div_ceil(8)
        }
    }

    /// DRAM bytes for one activation tensor of `elems` elements.
    pub fn spill(&self, s: Scope, elems: u64) -> u64 {
        let b = elems * self.act_bytes(s);
        if b > self.onchip_buffer_bytes {
            b
        } else {
            0
        }
    }

    pub fn counters(&self, e: &OpEvent<'_>) -> Counters {
        let eb = self.act_bytes(e.scope);
        let mut c = Counters {
            macs: e.macs,
            weight_read: self.weight_bytes(e.scope, e.weight_elems),
            act_read: e.inputs.iter().map(|&n| self.spill(e.scope, n)).sum(),
            act_written: e.outputs.iter().map(|&n| self.spill(e.scope, n)).sum(),
            ..Counters::default()
        };
        match e.state_kind {
            StateKind::None => {}
            StateKind::KvCache => {
                c.kv_read = e.state_read * eb;
                c.kv_written = e.state_write * eb;
            }
            StateKind::RollingConv => {
                c.state_read = e.state_read * eb;
                c.state_written = e.state_write * eb;
            }
        }
        c
    }
}

/// Records every op event into a ledger under the current phase.
#[derive(Debug, Clone)]
pub struct LedgerObserver {
    pub ledger: TrafficLedger,
    pub phase: Phase,
    pub memory: MemoryModel,
}

impl LedgerObserver {
    pub fn new(memory: MemoryModel) -> Self {
        Self {
            ledger: TrafficLedger::new(),
            phase: Phase::Vision,
            memory,
        }
    }
}

impl Observer for LedgerObserver {
    fn activation(&mut self, _site: SiteId, _values: &mut [f32]) {}

    fn op(&mut self, e: &OpEvent<'_>) {
        let key = LedgerKey {
            phase: self.phase,
            scope: e.scope,
            layer: e.layer,
            op: e.op.to_string(),
        };
        self.ledger.record(key, &self.memory.counters(e));
    }
}

/// Closed-form traffic of one backbone layer for a single decode step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTraffic {
    pub layer: u16,
    /// `None` for the final norm + output head.
    pub kind: Option<LayerKind>,
    pub counters: Counters,
}

/// Per-layer traffic of decoding one token when `position` tokens are
/// already cached.
pub fn decode_step_traffic(cfg: &BackboneConfig, position: usize, mem: &MemoryModel) -> Vec<LayerTraffic> {
    let s = Scope::Lm;
    let eb = mem.act_bytes(s);
    let (d, kv, k, inner) = (cfg.d_model as u64, cfg.kv_dim() as u64, cfg.conv_kernel as u64, cfg.ffn_inner as u64);
    let heads_dim = (cfg.n_heads * cfg.head_dim) as u64;
    let p = position as u64;
    let w = |elems: u64| mem.weight_bytes(s, elems);
    let io = |inp: u64, out: u64| (mem.spill(s, inp), mem.spill(s, out));
    let op = |c: &mut Counters, macs: u64, weights: u64, inp: u64, out: u64| {
        let (r, wr) = io(inp, out);
        c.macs += macs;
        c.weight_read += w(weights);
        c.act_read += r;
        c.act_written += wr;
    };
    let ffn = |c: &mut Counters| op(c, 3 * d * inner, 3 * d * inner + d, d, d);

    let mut out: Vec<LayerTraffic> = cfg
        .kinds()
        .into_iter()
        .enumerate()
        .map(|(li, kind)| {
            let mut c = Counters::default();
            match kind {
                LayerKind::Conv => {
                    op(&mut c, 2 * d * d, 2 * d * d + d, d, 2 * d);
                    c.state_read = (k - 1) * d * eb;
                    c.state_written = (k - 1) * d * eb;
                    op(&mut c, d * k, d * k, 2 * d, d);
                    op(&mut c, d * d, d * d, d, d);
                }
                LayerKind::Attn => {
                    op(&mut c, d * (d + 2 * kv), d * (d + 2 * kv) + d, d, d + 2 * kv);
                    c.kv_read = 2 * p * kv * eb;
                    c.kv_written = 2 * kv * eb;
                    op(&mut c, 2 * (p + 1) * heads_dim, 0, heads_dim, heads_dim);
                    op(&mut c, d * d, d * d, d, d);
                }
            }
            ffn(&mut c);
            LayerTraffic {
                layer: li as u16,
                kind: Some(kind),
                counters: c,
            }
        })
        .collect();
    let v = cfg.vocab_size as u64;
    let mut head = Counters::default();
    op(&mut head, d * v, d * v + d, d, v);
    out.push(LayerTraffic {
        layer: cfg.n_layers as u16,
        kind: None,
        counters: head,
    });
    out
}

/// Closed-form decode ledger totals for steps at positions `start..start+steps`.
pub fn decode_traffic_sum(cfg: &BackboneConfig, start: usize, steps: usize, mem: &MemoryModel) -> Counters {
    (start..start + steps)
        .flat_map(|p| decode_step_traffic(cfg, p, mem))
        .map(|l| l.counters)
        .sum()
}

/// Hybrid vs pure-attention decode read traffic at one position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KvComparison {
    pub position: usize,
    pub hybrid_kv_read: u64,
    pub pure_kv_read: u64,
    /// `1 − hybrid_kv_read / pure_kv_read`.
    pub kv_only_reduction: f64,
    pub hybrid_bytes_read: u64,
    pub pure_bytes_read: u64,
    /// Same ratio over all decode-step reads (weights, state and KV).
    pub weights_included_reduction: f64,
}

pub fn kv_comparison(cfg: &BackboneConfig, position: usize, mem: &MemoryModel) -> KvComparison {
    let total = |c: &BackboneConfig| -> Counters { decode_step_traffic(c, position, mem).iter().map(|l| l.counters).sum() };
    let h = total(cfg);
    let p = total(&cfg.pure_transformer());
    let reduction = |a: u64, b: u64| if b == 0 { 0.0 } else { 1.0 - a as f64 / b as f64 };
    KvComparison {
        position,
        hybrid_kv_read: h.kv_read,
        pure_kv_read: p.kv_read,
        kv_only_reduction: reduction(h.kv_read, p.kv_read),
        hybrid_bytes_read: h.bytes_read(),
        pure_bytes_read: p.bytes_read(),
        weights_included_reduction: reduction(h.bytes_read(), p.bytes_read()),
    }
}

/// Prefills `prompt` (`[T, d_model]`) then greedily decodes `steps` tokens,
/// recording prefill and decode traffic.
pub fn instrumented_decode(lm: &Backbone, prompt: &Tensor, steps: usize, mem: MemoryModel) -> Result<TrafficLedger> {
    let mut obs = LedgerObserver::new(mem);
    let mut session = lm.new_session();
    obs.phase = Phase::Prefill;
    let logits = lm.prefill(prompt, &mut session, &mut obs)?;
    obs.phase = Phase::Decode;
    let mut next = argmax(logits.row(logits.rows() - 1));
    for _ in 0..steps {
        let l = lm.decode_step(&lm.embed_tokens(&[next])?, &mut session, &mut obs)?;
        obs.ledger.note_decode_step();
        next = argmax(l.row(0));
    }
    Ok(obs.ledger)
}

/// Full VLM run: vision (encoder + connector), prefill, then `steps` decode steps.
pub fn instrumented_run(model: &Vlm, input: &VlmInput, steps: usize, mem: MemoryModel) -> Result<TrafficLedger> {
    let mut obs = LedgerObserver::new(mem);
    let tokens = model.enc.encode(&input.image, &mut obs)?.tokens;
    let emb = model.conn.project_tokens(&tokens, &mut obs)?;
    let seq = if input.prompt.is_empty() {
        emb
    } else {
        Tensor::concat_rows(&[&emb, &model.lm.embed_tokens(&input.prompt)?])?
    };
    let mut ledger = instrumented_decode(&model.lm, &seq, steps, mem)?;
    ledger.merge(&obs.ledger);
    Ok(ledger)
}

/// Outcome of [`instrumented_generate`].
#[derive(Debug, Clone)]
pub struct GenerateRun {
    pub ledger: TrafficLedger,
    pub ids: Vec<u32>,
    pub session: DecodeSession,
}

/// Greedy generation of `steps` ids (the first from prefill, so `steps − 1`
/// decode steps) with traffic recorded per phase; `extra` sees every
/// callback after the ledger, e.g. a quantization observer.
pub fn instrumented_generate(model: &Vlm, input: &VlmInput, steps: usize, mem: MemoryModel, extra: &mut dyn Observer) -> Result<GenerateRun> {
    let mut led = LedgerObserver::new(mem);
    let lm = &model.lm;
    let mut session = lm.new_session();
    let mut ids = Vec::with_capacity(steps);
    {
        let mut obs = (&mut led, &mut *extra);
        let tokens = model.enc.encode(&input.image, &mut obs)?.tokens;
        let emb = model.conn.project_tokens(&tokens, &mut obs)?;
        let seq = if input.prompt.is_empty() {
            emb
        } else {
            Tensor::concat_rows(&[&emb, &lm.embed_tokens(&input.prompt)?])?
        };
        obs.0.phase = Phase::Prefill;
        let logits = lm.prefill(&seq, &mut session, &mut obs)?;
        obs.0.phase = Phase::Decode;
        let mut next = argmax(logits.row(logits.rows() - 1));
        for step in 0..steps {
            ids.push(next);
            if step + 1 == steps {
                break;
            }
            let l = lm.decode_step(&lm.embed_tokens(&[next])?, &mut session, &mut obs)?;
            obs.0.ledger.note_decode_step();
            next = argmax(l.row(0));
        }
    }
    Ok(GenerateRun {
        ledger: led.ledger,
        ids,
        session,
    })
}

/// Ledger of one image through a vision encoder, all under [`Phase::Vision`].
pub fn encoder_ledger<E: ImageEncoder>(enc: &E, img: &Tensor, mem: MemoryModel) -> Result<TrafficLedger> {
    let mut obs = LedgerObserver::new(mem);
    enc.encode_tokens(img, &mut obs)?;
    Ok(obs.ledger)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseLatency {
    pub macs: u64,
    pub bytes: u64,
    pub compute_s: f64,
    pub memory_s: f64,
    pub latency_s: f64,
    pub memory_bound: bool,
}

impl PhaseLatency {
    pub fn of(c: &Counters, hw: &HardwareProfile) -> Self {
        let compute_s = c.macs as f64 / hw.peak_macs_per_s;
        let memory_s = c.bytes() as f64 / hw.dram_bytes_per_s;
        Self {
            macs: c.macs,
            bytes: c.bytes(),
            compute_s,
            memory_s,
            latency_s: compute_s.max(memory_s),
            memory_bound: memory_s > compute_s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Roofline {
    pub vision: PhaseLatency,
    pub prefill: PhaseLatency,
    pub decode_total: PhaseLatency,
    /// Mean over decode steps; 0 when nothing was decoded.
    pub decode_step_s: f64,
}

pub fn roofline_latency(ledger: &TrafficLedger, hw: &HardwareProfile) -> Result<Roofline> {
    hw.validate()?;
    let decode_total = PhaseLatency::of(&ledger.phase_total(Phase::Decode), hw);
    let steps = ledger.decode_steps();
    Ok(Roofline {
        vision: PhaseLatency::of(&ledger.phase_total(Phase::Vision), hw),
        prefill: PhaseLatency::of(&ledger.phase_total(Phase::Prefill), hw),
        decode_total,
        decode_step_s: if steps == 0 { 0.0 } else { decode_total.latency_s / steps as f64 },
    })
}
