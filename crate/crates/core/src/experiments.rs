//! Paired measurements: static-range coverage of the connector and the
//! conv-vs-ViT quantization brittleness comparison.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StudentT};
use serde::{Deserialize, Serialize};

use crate::calib::{quantize_model, CalibMethod, Calibrate, PrecisionPlan, RangeBook, RangeRecorder};
use crate::connector::Connector;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::impl_params;
use crate::nn::{gelu_tanh, rmsnorm, DEFAULT_RMS_EPS};
use crate::probe::{Observer, Scope, SiteId};
use crate::qtensor::{ErrorAccumulator, ErrorReport};
use crate::tensor::Tensor;
use crate::vit::Vit;

/// Fraction of activation values that fell inside their calibrated range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageStats {
    pub overall: f64,
    pub worst_site: Option<String>,
    pub worst: f64,
    pub values: u64,
    pub sites: BTreeMap<String, f64>,
}

struct CoverageCounter<'a> {
    book: &'a RangeBook,
    counts: BTreeMap<String, (u64, u64)>,
    missing: Option<String>,
}

impl Observer for CoverageCounter<'_> {
    fn activation(&mut self, site: SiteId, values: &mut [f32]) {
        let key = site.to_string();
        let Some((lo, hi)) = self.book.range(&key) else {
            self.missing.get_or_insert(key);
            return;
        };
        let inside = values.iter().filter(|&&v| v >= lo && v <= hi).count() as u64;
        let e = self.counts.entry(key).or_default();
        e.0 += inside;
        e.1 += values.len() as u64;
    }
}

impl CoverageCounter<'_> {
    fn stats(self) -> Result<CoverageStats> {
        if let Some(site) = self.missing {
            return Err(Error::MissingRange(site));
        }
        let (inside, total) = self.counts.values().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        if total == 0 {
            return Err(Error::Empty("coverage evaluation set"));
        }
        let sites: BTreeMap<String, f64> = self.counts.into_iter().map(|(k, (i, t))| (k, i as f64 / t as f64)).collect();
        let worst = sites.iter().min_by(|a, b| a.1.total_cmp(b.1));
        Ok(CoverageStats {
            overall: inside as f64 / total as f64,
            worst_site: worst.map(|w| w.0.clone()),
            worst: worst.map_or(1.0, |w| *w.1),
            values: total,
            sites,
        })
    }
}

/// Coverage of `book`'s ranges over the activations `model` produces on `inputs`.
pub fn range_coverage<M: Calibrate>(model: &M, book: &RangeBook, inputs: &[M::Input]) -> Result<CoverageStats> {
    let mut c = CoverageCounter {
        book,
        counts: BTreeMap::new(),
        missing: None,
    };
    for x in inputs {
        model.run_observed(x, &mut c)?;
    }
    c.stats()
}

/// The connector MLP with a dynamic RMSNorm on its input. Exists only as the
/// contrast arm of [`connector_coverage_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct NormedMlp {
    pub norm: Tensor,
    pub mlp: Connector,
}
impl_params!(NormedMlp { norm, mlp });

impl NormedMlp {
    pub fn new(mlp: Connector) -> Self {
        Self {
            norm: Tensor::full(&[mlp.w1.in_dim()], 1.0),
            mlp,
        }
    }

    pub fn forward(&self, tokens: &Tensor, obs: &mut dyn Observer) -> Result<Tensor> {
        let mut x = tokens.clone();
        obs.activation(SiteId::new(Scope::Connector, 0, "in"), x.data_mut());
        let mut n = rmsnorm(&x, &self.norm, DEFAULT_RMS_EPS)?;
        obs.activation(SiteId::new(Scope::Connector, 0, "norm"), n.data_mut());
        let mut h = gelu_tanh(&self.mlp.w1.forward(&n)?);
        obs.activation(SiteId::new(Scope::Connector, 0, "act"), h.data_mut());
        self.mlp.w2.forward(&h)
    }
}

impl Calibrate for NormedMlp {
    type Input = Tensor;

    fn run_observed(&self, input: &Tensor, obs: &mut dyn Observer) -> Result<()> {
        self.forward(input, obs).map(|_| ())
    }

    fn probe_input(&self) -> Tensor {
        Tensor::zeros(&[1, self.mlp.w1.in_dim()])
    }

    fn param_prefix(&self) -> &'static str {
        "conn"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectorCoverageReport {
    pub calibration_inputs: usize,
    pub eval_inputs: usize,
    pub norm_free: CoverageStats,
    pub with_rmsnorm: CoverageStats,
}

/// Min-max ranges from `calib`, coverage measured on `eval`, for the
/// connector as built and for the same weights behind an RMSNorm.
pub fn connector_coverage_experiment(conn: &Connector, calib: &[Tensor], eval: &[Tensor]) -> Result<ConnectorCoverageReport> {
    let plain_book = crate::calib::collect_ranges(conn, calib, CalibMethod::MinMax)?;
    let normed = NormedMlp::new(conn.clone());
    let normed_book = crate::calib::collect_ranges(&normed, calib, CalibMethod::MinMax)?;
    Ok(ConnectorCoverageReport {
        calibration_inputs: calib.len(),
        eval_inputs: eval.len(),
        norm_free: range_coverage(conn, &plain_book, eval)?,
        with_rmsnorm: range_coverage(&normed, &normed_book, eval)?,
    })
}

/// Adds heavy-tailed noise to a fixed subset of activation sites.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierInjection {
    /// Fraction of sites perturbed, chosen by a seeded hash of the site id.
    pub site_fraction: f64,
    /// Student-t noise scale, relative to the RMS of the perturbed tensor.
    pub scale: f32,
    pub dof: f64,
    pub seed: u64,
}

impl Default for OutlierInjection {
    fn default() -> Self {
        Self {
            site_fraction: 0.25,
            scale: 10.0,
            dof: 2.0,
            seed: 0x5eed,
        }
    }
}

/// Observer applying an [`OutlierInjection`]. The noise at a site depends
/// only on (seed, site, sample).
pub struct Injector {
    cfg: OutlierInjection,
    pub sample: u64,
}

impl Injector {
    pub fn new(cfg: OutlierInjection) -> Self {
        Self { cfg, sample: 0 }
    }

    fn site_hash(&self, site: &SiteId) -> u64 {
        // FNV-1a over the seed and the printed site id
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for b in self.cfg.seed.to_le_bytes().into_iter().chain(site.to_string().into_bytes()) {
            h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
        }
        h
    }

    pub fn selects(&self, site: &SiteId) -> bool {
        (self.site_hash(site) >> 11) as f64 / (1u64 << 53) as f64 <= self.cfg.site_fraction
    }
}

impl Observer for Injector {
    fn activation(&mut self, site: SiteId, values: &mut [f32]) {
        if !self.selects(&site) {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.site_hash(&site));
        rng.set_stream(self.sample);
        let t = StudentT::new(self.cfg.dof).expect("positive dof");
        let rms = (values.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / values.len().max(1) as f64).sqrt();
        let scale = self.cfg.scale as f64 * rms;
        for v in values {
            *v += (scale * t.sample(&mut rng)) as f32;
        }
    }
}

/// An image encoder that maps `[C, S, S]` to `[tokens, width]`.
pub trait ImageEncoder: Calibrate<Input = Tensor> + Clone {
    fn encode_tokens(&self, img: &Tensor, obs: &mut dyn Observer) -> Result<Tensor>;
    fn output_dim(&self) -> usize;
}

impl ImageEncoder for Encoder {
    fn encode_tokens(&self, img: &Tensor, obs: &mut dyn Observer) -> Result<Tensor> {
        Ok(self.encode(img, obs)?.tokens)
    }

    fn output_dim(&self) -> usize {
        self.cfg.msfa_out_channels
    }
}

impl ImageEncoder for Vit {
    fn encode_tokens(&self, img: &Tensor, obs: &mut dyn Observer) -> Result<Tensor> {
        self.encode(img, obs)
    }

    fn output_dim(&self) -> usize {
        self.cfg.output_dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub params: usize,
    pub sites: usize,
    pub output: ErrorReport,
    pub coverage: CoverageStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrittlenessReport {
    pub plan: String,
    pub method: CalibMethod,
    pub injection: Option<OutlierInjection>,
    pub calibration_inputs: usize,
    pub eval_inputs: usize,
    pub conv: ArmReport,
    pub vit: ArmReport,
    /// ViT output RMS error over conv output RMS error.
    pub rms_ratio: f64,
}

fn run_arm<E: ImageEncoder>(enc: &E, calib: &[Tensor], eval: &[Tensor], plan: &PrecisionPlan, method: CalibMethod, injection: Option<OutlierInjection>) -> Result<ArmReport> {
    let mut inj = injection.map(Injector::new);
    let mut rec = RangeRecorder::new(method);
    for (i, img) in calib.iter().enumerate() {
        match inj.as_mut() {
            Some(j) => {
                j.sample = i as u64;
                enc.run_observed(img, &mut (&mut *j, &mut rec))?;
            }
            None => enc.run_observed(img, &mut rec)?,
        }
    }
    let book = rec.book;
    let q = quantize_model(enc, plan, &book)?;
    let mut acc = ErrorAccumulator::default();
    let mut cov = CoverageCounter {
        book: &book,
        counts: BTreeMap::new(),
        missing: None,
    };
    for img in eval {
        let mut qobs = q.observer();
        let reference = enc.encode_tokens(img, &mut cov)?;
        let test = q.model.encode_tokens(img, &mut qobs)?;
        qobs.take_missing()?;
        acc.add(&reference, &test)?;
    }
    Ok(ArmReport {
        params: enc.param_count(),
        sites: book.sites.len(),
        output: acc.report()?,
        coverage: cov.stats()?,
    })
}

/// Quantizes both encoders under `plan`, calibrating on `calib` and
/// measuring output error against each float model on `eval`. With
/// `injection`, calibration activations are contaminated with heavy-tailed
/// noise; evaluation always runs on clean activations.
pub fn brittleness_experiment<A: ImageEncoder, B: ImageEncoder>(
    conv: &A,
    vit: &B,
    calib: &[Tensor],
    eval: &[Tensor],
    plan: &PrecisionPlan,
    method: CalibMethod,
    injection: Option<OutlierInjection>,
) -> Result<BrittlenessReport> {
    if conv.output_dim() != vit.output_dim() {
        return Err(Error::shape(format!(
            "encoder widths differ: {} vs {}",
            conv.output_dim(),
            vit.output_dim()
        )));
    }
    if calib.is_empty() || eval.is_empty() {
        return Err(Error::Empty("brittleness input set"));
    }
    let c = run_arm(conv, calib, eval, plan, method, injection)?;
    let v = run_arm(vit, calib, eval, plan, method, injection)?;
    Ok(BrittlenessReport {
        plan: plan.name.clone(),
        method,
        injection,
        calibration_inputs: calib.len(),
        eval_inputs: eval.len(),
        rms_ratio: v.output.rms_error_percent / c.output.rms_error_percent,
        conv: c,
        vit: v,
    })
}

/// A ViT of `base`'s depth and head count whose width puts its parameter
/// count within `tol` of `target`. Returns the closest width.
pub fn match_vit_params(base: crate::vit::VitConfig, target: usize, tol: f64) -> Result<crate::vit::VitConfig> {
    let best = (1..=4096 / base.n_heads)
        .map(|m| crate::vit::VitConfig { d_model: m * base.n_heads, ..base })
        .map(|cfg| ((vit_param_count(&cfg) as f64 - target as f64).abs() / target as f64, cfg))
        .min_by(|a, b| a.0.total_cmp(&b.0));
    match best {
        Some((err, cfg)) if err <= tol => Ok(cfg),
        Some((err, _)) => Err(Error::config("vit", format!("no width within {tol} of {target} params (best {err:.3})"))),
        None => Err(Error::config("vit", "empty search space")),
    }
}

/// Closed-form parameter count of [`Vit::new`].
pub fn vit_param_count(c: &crate::vit::VitConfig) -> usize {
    let d = c.d_model;
    let inner = d * c.mlp_ratio;
    let block = 2 * d + 4 * (d * d + d) + 2 * d + (d * inner + inner) + (inner * d + d);
    let proj = if c.out_dim == 0 { 0 } else { d * c.out_dim + c.out_dim };
    (c.patch_dim() * d + d) + c.num_tokens() * d + c.n_layers * block + 2 * d + proj
}
