//! Norm-free two-layer MLP from visual tokens to the language embedding space.

use serde::{Deserialize, Serialize};

use crate::calib::Calibrate;
use crate::error::{Error, Result};
use crate::impl_params;
use crate::init::Init;
use crate::nn::{gelu_tanh, Linear};
use crate::probe::{Observer, OpEvent, Scope, SiteId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectorConfig {
    pub token_dim: usize,
    pub hidden: usize,
    pub d_model: usize,
    pub bias: bool,
}

impl ConnectorConfig {
    /// Hidden width follows the language model.
    pub fn new(token_dim: usize, d_model: usize) -> Self {
        Self {
            token_dim,
            hidden: d_model,
            d_model,
            bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (f, v) in [("token_dim", self.token_dim), ("hidden", self.hidden), ("d_model", self.d_model)] {
            if v == 0 {
                return Err(Error::config(format!("connector.{f}"), "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Connector {
    pub w1: Linear,
    pub w2: Linear,
}
impl_params!(Connector { w1, w2 });

impl Connector {
    pub fn new(cfg: ConnectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let bias = |n: usize| cfg.bias.then(|| Tensor::zeros(&[n]));
        Ok(Self {
            w1: Linear::new(init.lecun(&[cfg.hidden, cfg.token_dim], cfg.token_dim), bias(cfg.hidden)),
            w2: Linear::new(init.lecun(&[cfg.d_model, cfg.hidden], cfg.hidden), bias(cfg.d_model)),
        })
    }

    pub fn config(&self) -> ConnectorConfig {
        ConnectorConfig {
            token_dim: self.w1.in_dim(),
            hidden: self.w1.out_dim(),
            d_model: self.w2.out_dim(),
            bias: self.w1.bias.is_some(),
        }
    }

    /// `w2·gelu(w1·t + b1) + b2` for every token row independently.
    pub fn project_tokens(&self, tokens: &Tensor, obs: &mut dyn Observer) -> Result<Tensor> {
        if tokens.rank() != 2 || tokens.dim(1) != self.w1.in_dim() {
            return Err(Error::shape(format!(
                "connector expects [n, {}], got {:?}",
                self.w1.in_dim(),
                tokens.shape()
            )));
        }
        let n = tokens.dim(0);
        let mut x = tokens.clone();
        obs.activation(SiteId::new(Scope::Connector, 0, "in"), x.data_mut());
        let mut h = gelu_tanh(&self.w1.forward(&x)?);
        obs.op(&OpEvent::compute(
            Scope::Connector,
            0,
            "fc1",
            (n * self.w1.in_dim() * self.w1.out_dim()) as u64,
            self.w1.param_count() as u64,
            &[x.len() as u64],
            &[h.len() as u64],
        ));
        obs.activation(SiteId::new(Scope::Connector, 0, "act"), h.data_mut());
        let y = self.w2.forward(&h)?;
        obs.op(&OpEvent::compute(
            Scope::Connector,
            0,
            "fc2",
            (n * self.w2.in_dim() * self.w2.out_dim()) as u64,
            self.w2.param_count() as u64,
            &[h.len() as u64],
            &[y.len() as u64],
        ));
        Ok(y)
    }
}

impl Calibrate for Connector {
    type Input = Tensor;

    fn run_observed(&self, input: &Tensor, obs: &mut dyn Observer) -> Result<()> {
        self.project_tokens(input, obs).map(|_| ())
    }

    fn probe_input(&self) -> Tensor {
        Tensor::zeros(&[1, self.w1.in_dim()])
    }

    fn param_prefix(&self) -> &'static str {
        "conn"
    }
}
