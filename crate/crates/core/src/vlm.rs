//! Encoder → connector → backbone, plus end-to-end quantization evaluation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{argmax, Backbone, BackboneConfig, DecodeSession};
use crate::calib::{Calibrate, QuantEvalReport, QuantObserver, QuantizedModel};
use crate::connector::{Connector, ConnectorConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::impl_params;
use crate::probe::{NoObserver, Observer};
use crate::qtensor::{ErrorAccumulator, QuantParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmConfig {
    pub encoder: EncoderConfig,
    pub connector_bias: bool,
    pub backbone: BackboneConfig,
}

impl VlmConfig {
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig::toy(),
            connector_bias: true,
            backbone: BackboneConfig::toy(),
        }
    }

    pub fn connector(&self) -> ConnectorConfig {
        ConnectorConfig {
            bias: self.connector_bias,
            ..ConnectorConfig::new(self.encoder.msfa_out_channels, self.backbone.d_model)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.backbone.validate()?;
        self.connector().validate()?;
        let visual = self.encoder.num_tokens();
        if visual >= self.backbone.max_context {
            return Err(Error::config(
                "backbone.max_context",
                format!("{} leaves no room after {visual} visual tokens", self.backbone.max_context),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vlm {
    pub enc: Encoder,
    pub conn: Connector,
    pub lm: Backbone,
}
impl_params!(Vlm { enc, conn, lm });

/// One image plus text-prompt token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct VlmInput {
    pub image: Tensor,
    pub prompt: Vec<u32>,
    /// Greedy steps to run after the prompt when this input drives
    /// calibration, so decode-time activations are covered too.
    pub decode_steps: usize,
}

/// Intermediate outputs of one prefill.
#[derive(Debug, Clone, PartialEq)]
pub struct VlmOutputs {
    pub tokens: Tensor,
    pub embeddings: Tensor,
    pub logits: Tensor,
}

/// Deterministic prompt ids for input `index` under `seed`.
pub fn synthetic_prompt(seed: u64, index: u64, len: usize, vocab: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

impl Vlm {
    /// Each component draws from its own stream derived from `seed`.
    pub fn new(cfg: &VlmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            enc: Encoder::new(cfg.encoder.clone(), seed)?,
            conn: Connector::new(cfg.connector(), seed.wrapping_add(1))?,
            lm: Backbone::new(cfg.backbone.clone(), seed.wrapping_add(2))?,
        })
    }

    pub fn config(&self) -> VlmConfig {
        VlmConfig {
            encoder: self.enc.cfg.clone(),
            connector_bias: self.conn.w1.bias.is_some(),
            backbone: self.lm.cfg.clone(),
        }
    }

    /// Encodes the image and prefills `[visual ‖ prompt]` into `session`.
    pub fn prefill(&self, input: &VlmInput, session: &mut DecodeSession, obs: &mut dyn Observer) -> Result<VlmOutputs> {
        let tokens = self.enc.encode(&input.image, obs)?.tokens;
        let embeddings = self.conn.project_tokens(&tokens, obs)?;
        let seq = if input.prompt.is_empty() {
            embeddings.clone()
        } else {
            Tensor::concat_rows(&[&embeddings, &self.lm.embed_tokens(&input.prompt)?])?
        };
        let logits = self.lm.prefill(&seq, session, obs)?;
        Ok(VlmOutputs { tokens, embeddings, logits })
    }

    /// Greedy generation of `n_steps` ids; also returns the logits row each
    /// id was chosen from.
    pub fn generate(&self, input: &VlmInput, n_steps: usize, obs: &mut dyn Observer) -> Result<(VlmOutputs, Vec<u32>, Vec<Vec<f32>>)> {
        self.decode_with(input, n_steps, None, obs)
    }

    /// Like [`generate`](Self::generate) but feeds `forced` ids back instead
    /// of its own choices; the returned ids are still its own argmaxes.
    pub fn teacher_forced(&self, input: &VlmInput, forced: &[u32], obs: &mut dyn Observer) -> Result<(VlmOutputs, Vec<u32>, Vec<Vec<f32>>)> {
        self.decode_with(input, forced.len(), Some(forced), obs)
    }

    fn decode_with(&self, input: &VlmInput, n_steps: usize, forced: Option<&[u32]>, obs: &mut dyn Observer) -> Result<(VlmOutputs, Vec<u32>, Vec<Vec<f32>>)> {
        let mut session = self.lm.new_session();
        let out = self.prefill(input, &mut session, obs)?;
        let mut ids = Vec::with_capacity(n_steps);
        let mut rows = Vec::with_capacity(n_steps);
        let mut row = out.logits.row(out.logits.rows() - 1).to_vec();
        for step in 0..n_steps {
            let id = argmax(&row);
            ids.push(id);
            rows.push(std::mem::take(&mut row));
            if step + 1 < n_steps {
                let feed = forced.map_or(id, |f| f[step]);
                let logits = self.lm.decode_step(&self.lm.embed_tokens(&[feed])?, &mut session, obs)?;
                row = logits.into_data();
            }
        }
        Ok((out, ids, rows))
    }
}

impl Calibrate for Vlm {
    type Input = VlmInput;

    fn run_observed(&self, input: &VlmInput, obs: &mut dyn Observer) -> Result<()> {
        self.generate(input, input.decode_steps, obs).map(|_| ())
    }

    fn probe_input(&self) -> VlmInput {
        let s = self.enc.cfg.input_size;
        VlmInput {
            image: Tensor::zeros(&[self.enc.cfg.in_channels, s, s]),
            prompt: vec![0],
            decode_steps: 0,
        }
    }
}

/// Runs float and quantized models over `inputs`, generating `n_steps`
/// tokens per input. The quantized model is teacher-forced on the float
/// model's tokens so agreement counts per-step decisions, not divergence.
pub fn evaluate_quantization(float: &Vlm, q: &QuantizedModel<Vlm>, inputs: &[VlmInput], n_steps: usize) -> Result<QuantEvalReport> {
    evaluate_pair(float, &q.model, Some(&q.activations), inputs, n_steps)
}

/// Like [`evaluate_quantization`] for any test model; `activations`, when
/// given, are fake-quantized at every site of the test run.
pub fn evaluate_pair(
    float: &Vlm,
    test: &Vlm,
    activations: Option<&BTreeMap<String, QuantParams>>,
    inputs: &[VlmInput],
    n_steps: usize,
) -> Result<QuantEvalReport> {
    if float.config() != test.config() {
        return Err(Error::config("model", "float and quantized configs differ"));
    }
    if inputs.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let (mut enc, mut conn, mut logits) = (ErrorAccumulator::default(), ErrorAccumulator::default(), ErrorAccumulator::default());
    let (mut agree, mut total) = (0usize, 0usize);
    for input in inputs {
        let (fo, fids, frows) = float.generate(input, n_steps, &mut NoObserver)?;
        let (qo, qids, qrows) = match activations {
            Some(a) => {
                let mut obs = QuantObserver::new(a);
                let r = test.teacher_forced(input, &fids, &mut obs)?;
                obs.take_missing()?;
                r
            }
            None => test.teacher_forced(input, &fids, &mut NoObserver)?,
        };
        enc.add(&fo.tokens, &qo.tokens)?;
        conn.add(&fo.embeddings, &qo.embeddings)?;
        for (a, b) in frows.iter().zip(&qrows) {
            logits.add_slice(a, b)?;
        }
        agree += fids.iter().zip(&qids).filter(|(a, b)| a == b).count();
        total += fids.len();
    }
    Ok(QuantEvalReport {
        encoder: enc.report()?,
        connector: conn.report()?,
        logits: logits.report()?,
        agreement: if total == 0 { 1.0 } else { agree as f64 / total as f64 },
        tokens_compared: total,
        inputs: inputs.len(),
    })
}
