//! Static calibration and mixed-precision quantization.
//!
//! Activation ranges are recorded at every quantization site while the float
//! model runs over a calibration set, then frozen into per-tensor parameters.
//! Weights are quantized from their own extrema. Execution stays in the float
//! domain with fake quantization applied to weights (once) and to activations
//! at every site.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::Params;
use crate::probe::{Observer, SiteId};
use crate::qtensor::{compute_quant_params, dequantize, quantize, weight_params, ErrorReport, QTensor, QuantParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CalibMethod {
    MinMax,
    /// Clip to the given percentile of absolute values.
    Percentile(f64),
}

impl fmt::Display for CalibMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CalibMethod::MinMax => write!(f, "minmax"),
            CalibMethod::Percentile(p) => write!(f, "percentile:{p}"),
        }
    }
}

impl FromStr for CalibMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "minmax" {
            return Ok(CalibMethod::MinMax);
        }
        let bad = || Error::config("method", format!("`{s}` is not `minmax` or `percentile:<p>`"));
        let p: f64 = s
            .strip_prefix("percentile:")
            .ok_or_else(bad)?
            .parse()
            .map_err(|_| bad())?;
        if !(p > 0.0 && p <= 100.0) {
            return Err(Error::config("method", format!("percentile {p} outside (0, 100]")));
        }
        Ok(CalibMethod::Percentile(p))
    }
}

impl Serialize for CalibMethod {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for CalibMethod {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Buckets per octave of the magnitude histogram (≈2.2% relative width).
const SUB_OCTAVE: f64 = 32.0;

/// Mergeable histogram of `|x|` on a logarithmic grid.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbsSketch {
    pub zeros: u64,
    #[serde(with = "bucket_pairs")]
    pub buckets: BTreeMap<i32, u64>,
}

mod bucket_pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<i32, u64>, s: S) -> Result<S::Ok, S::Error> {
        m.iter().map(|(k, v)| (*k, *v)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<i32, u64>, D::Error> {
        Ok(Vec::<(i32, u64)>::deserialize(d)?.into_iter().collect())
    }
}

impl AbsSketch {
    fn bucket(a: f64) -> i32 {
        (a.log2() * SUB_OCTAVE).floor() as i32
    }

    fn upper(k: i32) -> f64 {
        ((k + 1) as f64 / SUB_OCTAVE).exp2()
    }

    pub fn add(&mut self, x: f32) {
        let a = x.abs() as f64;
        if a == 0.0 {
            self.zeros += 1;
        } else {
            *self.buckets.entry(Self::bucket(a)).or_insert(0) += 1;
        }
    }

    pub fn merge(&mut self, other: &AbsSketch) {
        self.zeros += other.zeros;
        for (k, c) in &other.buckets {
            *self.buckets.entry(*k).or_insert(0) += c;
        }
    }

    /// Upper bucket edge below which at least `p`% of magnitudes fall.
    pub fn quantile_upper(&self, p: f64, count: u64) -> f64 {
        let target = ((p / 100.0) * count as f64).ceil().max(1.0) as u64;
        let mut cum = self.zeros;
        if cum >= target {
            return 0.0;
        }
        for (&k, &c) in &self.buckets {
            cum += c;
            if cum >= target {
                return Self::upper(k);
            }
        }
        f64::INFINITY
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRange {
    pub min: f32,
    pub max: f32,
    pub count: u64,
    pub sketch: AbsSketch,
}

impl SiteRange {
    fn new() -> Self {
        Self {
            min: f32::INFINITY,
            max: f32::NEG_INFINITY,
            count: 0,
            sketch: AbsSketch::default(),
        }
    }

    fn observe(&mut self, values: &[f32]) {
        for &x in values {
            if x.is_nan() {
                continue;
            }
            self.min = self.min.min(x);
            self.max = self.max.max(x);
            self.count += 1;
            self.sketch.add(x);
        }
    }

    fn merge(&mut self, other: &SiteRange) {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.count += other.count;
        self.sketch.merge(&other.sketch);
    }

    pub fn max_abs(&self) -> f32 {
        self.min.abs().max(self.max.abs())
    }

    /// Upper bound of the `p`-th percentile of `|x|`, capped at the observed
    /// extreme.
    pub fn abs_percentile(&self, p: f64) -> f32 {
        if p >= 100.0 {
            return self.max_abs();
        }
        self.sketch.quantile_upper(p, self.count).min(self.max_abs() as f64) as f32
    }

    /// Calibrated range under `method`; always a subset of `[min, max]`.
    pub fn range(&self, method: CalibMethod) -> (f32, f32) {
        match method {
            CalibMethod::MinMax => (self.min, self.max),
            CalibMethod::Percentile(p) if p >= 100.0 => (self.min, self.max),
            CalibMethod::Percentile(p) => {
                let t = self.abs_percentile(p);
                (self.min.max(-t), self.max.min(t))
            }
        }
    }
}

/// Per-site activation statistics collected during calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeBook {
    pub method: CalibMethod,
    pub sites: BTreeMap<String, SiteRange>,
}

impl RangeBook {
    pub fn new(method: CalibMethod) -> Self {
        Self {
            method,
            sites: BTreeMap::new(),
        }
    }

    pub fn observe(&mut self, site: &str, values: &[f32]) {
        if values.is_empty() {
            return;
        }
        self.sites
            .entry(site.to_string())
            .or_insert_with(SiteRange::new)
            .observe(values);
    }

    pub fn merge(&mut self, other: &RangeBook) -> Result<()> {
        if self.method != other.method {
            return Err(Error::config(
                "method",
                format!("cannot merge {} ranges into {}", other.method, self.method),
            ));
        }
        for (site, r) in &other.sites {
            match self.sites.get_mut(site) {
                Some(mine) => mine.merge(r),
                None => {
                    self.sites.insert(site.clone(), r.clone());
                }
            }
        }
        Ok(())
    }

    pub fn range(&self, site: &str) -> Option<(f32, f32)> {
        self.sites.get(site).map(|r| r.range(self.method))
    }

    pub fn with_method(mut self, method: CalibMethod) -> Self {
        self.method = method;
        self
    }

    pub fn to_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        v["schema_version"] = crate::report::SCHEMA_VERSION.into();
        Ok(crate::report::canonical_json(&v)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s)?;
        crate::report::check_schema_version(&v)?;
        Ok(serde_json::from_value(v)?)
    }
}

/// Records every site into a [`RangeBook`].
pub struct RangeRecorder {
    pub book: RangeBook,
    names: HashMap<SiteId, String>,
}

impl RangeRecorder {
    pub fn new(method: CalibMethod) -> Self {
        Self {
            book: RangeBook::new(method),
            names: HashMap::new(),
        }
    }
}

impl Observer for RangeRecorder {
    fn activation(&mut self, site: SiteId, values: &mut [f32]) {
        let name = self.names.entry(site).or_insert_with(|| site.to_string());
        self.book.observe(name, values);
    }
}

/// Lists site names in first-visit order.
#[derive(Default)]
pub struct SiteLister {
    pub sites: Vec<String>,
    seen: std::collections::HashSet<SiteId>,
}

impl Observer for SiteLister {
    fn activation(&mut self, site: SiteId, _values: &mut [f32]) {
        if self.seen.insert(site) {
            self.sites.push(site.to_string());
        }
    }
}

/// A model that can be driven over calibration inputs.
pub trait Calibrate: Params {
    type Input;

    fn run_observed(&self, input: &Self::Input, obs: &mut dyn Observer) -> Result<()>;

    /// Smallest valid input, used to enumerate quantization sites.
    fn probe_input(&self) -> Self::Input;

    /// Prefix under which weight names are resolved against a plan.
    fn param_prefix(&self) -> &'static str {
        ""
    }

    fn sites(&self) -> Result<Vec<String>> {
        let mut lister = SiteLister::default();
        self.run_observed(&self.probe_input(), &mut lister)?;
        Ok(lister.sites)
    }
}

pub fn collect_ranges<M: Calibrate>(model: &M, inputs: &[M::Input], method: CalibMethod) -> Result<RangeBook> {
    if inputs.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    let mut rec = RangeRecorder::new(method);
    for x in inputs {
        model.run_observed(x, &mut rec)?;
    }
    Ok(rec.book)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScopePrecision {
    pub weight_bits: u32,
    pub activation_bits: u32,
}

impl ScopePrecision {
    pub const fn new(weight_bits: u32, activation_bits: u32) -> Self {
        Self {
            weight_bits,
            activation_bits,
        }
    }

    fn validate(&self, at: &str) -> Result<()> {
        if !matches!(self.weight_bits, 4 | 8 | 16) {
            return Err(Error::config(format!("{at}.weight_bits"), format!("{} not in {{4, 8, 16}}", self.weight_bits)));
        }
        if !matches!(self.activation_bits, 8 | 16) {
            return Err(Error::config(format!("{at}.activation_bits"), format!("{} not in {{8, 16}}", self.activation_bits)));
        }
        Ok(())
    }
}

/// Bit-width assignment per module scope (`enc`, `conn`, `lm`, `vit`), with
/// exact-name overrides for individual weights or sites.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionPlan {
    pub name: String,
    pub scopes: BTreeMap<String, ScopePrecision>,
    #[serde(default)]
    pub overrides: BTreeMap<String, ScopePrecision>,
}

pub const PRESETS: [&str; 4] = ["paper", "fp-ref", "w8a16", "w4a16"];

impl PrecisionPlan {
    pub fn preset(name: &str) -> Result<Self> {
        let (vision, lm) = match name {
            "paper" => (ScopePrecision::new(8, 16), ScopePrecision::new(4, 16)),
            "fp-ref" => (ScopePrecision::new(16, 16), ScopePrecision::new(16, 16)),
            "w8a16" => (ScopePrecision::new(8, 16), ScopePrecision::new(8, 16)),
            "w4a16" => (ScopePrecision::new(4, 16), ScopePrecision::new(4, 16)),
            other => {
                return Err(Error::config("plan", format!("unknown preset `{other}` (known: {})", PRESETS.join(", "))))
            }
        };
        let scopes = [("enc", vision), ("conn", vision), ("vit", vision), ("lm", lm)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        Ok(Self {
            name: name.to_string(),
            scopes,
            overrides: BTreeMap::new(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in self.scopes.iter().chain(&self.overrides) {
            v.validate(k)?;
        }
        Ok(())
    }

    /// Exact override first, else the longest scope that prefixes `name` at a
    /// `.` boundary.
    pub fn resolve(&self, name: &str) -> Result<ScopePrecision> {
        if let Some(p) = self.overrides.get(name) {
            return Ok(*p);
        }
        self.scopes
            .iter()
            .filter(|(scope, _)| name == scope.as_str() || name.starts_with(&format!("{scope}.")))
            .max_by_key(|(scope, _)| scope.len())
            .map(|(_, p)| *p)
            .ok_or_else(|| Error::Uncovered(name.to_string()))
    }

    pub fn check_covers<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for n in names {
            self.resolve(n)?;
        }
        Ok(())
    }
}

/// Fake-quantizes every site with frozen parameters.
#[derive(Debug, Clone)]
pub struct QuantObserver {
    params: HashMap<String, QuantParams>,
    cache: HashMap<SiteId, Option<QuantParams>>,
    missing: Option<String>,
}

impl QuantObserver {
    pub fn new(params: &BTreeMap<String, QuantParams>) -> Self {
        Self {
            params: params.iter().map(|(k, v)| (k.clone(), *v)).collect(),
            cache: HashMap::new(),
            missing: None,
        }
    }

    /// First site seen at run time that had no frozen parameters.
    pub fn take_missing(&mut self) -> Result<()> {
        match self.missing.take() {
            Some(site) => Err(Error::MissingRange(site)),
            None => Ok(()),
        }
    }
}

impl Observer for QuantObserver {
    fn activation(&mut self, site: SiteId, values: &mut [f32]) {
        let params = &self.params;
        let p = *self
            .cache
            .entry(site)
            .or_insert_with(|| params.get(&site.to_string()).copied());
        match p {
            Some(p) => p.fake_quant_slice(values),
            None => {
                if self.missing.is_none() {
                    self.missing = Some(site.to_string());
                }
            }
        }
    }
}

/// A model with pre-quantized weights and frozen activation parameters.
/// `model` holds the dequantized weights that are actually executed.
#[derive(Debug, Clone)]
pub struct QuantizedModel<M> {
    pub model: M,
    pub weights: Vec<(String, QTensor)>,
    pub activations: BTreeMap<String, QuantParams>,
    pub plan: PrecisionPlan,
}

impl<M> QuantizedModel<M> {
    pub fn observer(&self) -> QuantObserver {
        QuantObserver::new(&self.activations)
    }

    /// SHA-256 over the frozen activation parameters.
    pub fn activation_digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, p) in &self.activations {
            h.update(k.as_bytes());
            h.update(p.scale.to_le_bytes());
            h.update(p.zero_point.to_le_bytes());
            h.update(p.bits.to_le_bytes());
            h.update([p.symmetric as u8]);
        }
        format!("{:x}", h.finalize())
    }
}

/// Activation parameters for every site of `sites` from `ranges` under `plan`.
pub fn activation_params(sites: &[String], plan: &PrecisionPlan, ranges: &RangeBook) -> Result<BTreeMap<String, QuantParams>> {
    let mut out = BTreeMap::new();
    for site in sites {
        let prec = plan.resolve(site)?;
        let (lo, hi) = ranges.range(site).ok_or_else(|| Error::MissingRange(site.clone()))?;
        out.insert(site.clone(), compute_quant_params(lo as f64, hi as f64, prec.activation_bits, true)?);
    }
    Ok(out)
}

pub fn quantize_model<M: Calibrate + Clone>(model: &M, plan: &PrecisionPlan, ranges: &RangeBook) -> Result<QuantizedModel<M>> {
    plan.validate()?;
    let sites = model.sites()?;
    let activations = activation_params(&sites, plan, ranges)?;
    let mut executed = model.clone();
    let prefix = model.param_prefix();
    let mut weights = Vec::new();
    for (name, w) in executed.named_params_mut(prefix) {
        let prec = plan.resolve(&name)?;
        let q = quantize(w, &weight_params(w, prec.weight_bits)?)?;
        *w = dequantize(&q);
        weights.push((name, q));
    }
    Ok(QuantizedModel {
        model: executed,
        weights,
        activations,
        plan: plan.clone(),
    })
}

/// Per-stage quantization quality of a VLM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantEvalReport {
    pub encoder: ErrorReport,
    pub connector: ErrorReport,
    pub logits: ErrorReport,
    pub agreement: f64,
    pub tokens_compared: usize,
    pub inputs: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::Scope;
    use proptest::prelude::*;

    #[test]
    fn method_parse() {
        assert_eq!("minmax".parse::<CalibMethod>().unwrap(), CalibMethod::MinMax);
        assert_eq!("percentile:99.99".parse::<CalibMethod>().unwrap(), CalibMethod::Percentile(99.99));
        assert!("percentile:0".parse::<CalibMethod>().is_err());
        assert!("percentile:abc".parse::<CalibMethod>().is_err());
        assert!("median".parse::<CalibMethod>().is_err());
        let m = CalibMethod::Percentile(99.9);
        assert_eq!(m.to_string().parse::<CalibMethod>().unwrap(), m);
    }

    #[test]
    fn zero_input_zero_range() {
        let mut b = RangeBook::new(CalibMethod::MinMax);
        b.observe("a", &[0.0; 16]);
        assert_eq!(b.range("a"), Some((0.0, 0.0)));
        let p = compute_quant_params(0.0, 0.0, 16, true).unwrap();
        assert_eq!(p.scale, 1.0);
    }

    #[test]
    fn percentile_100_is_minmax() {
        let vals: Vec<f32> = (0..1000).map(|i| ((i * 7919) % 1000) as f32 / 100.0 - 3.0).collect();
        let mut b = RangeBook::new(CalibMethod::Percentile(100.0));
        b.observe("s", &vals);
        let mm = b.clone().with_method(CalibMethod::MinMax);
        assert_eq!(b.range("s"), mm.range("s"));
    }

    #[test]
    fn percentile_clips_outlier() {
        let mut vals = vec![1.0f32; 100_000];
        vals[17] = 1000.0;
        let mut b = RangeBook::new(CalibMethod::Percentile(99.99));
        b.observe("s", &vals);
        let (lo, hi) = b.range("s").unwrap();
        assert!(hi < 1.1 && hi >= 1.0, "hi = {hi}");
        assert_eq!(lo, 1.0f32.max(-hi));
    }

    #[test]
    fn plan_presets_and_resolution() {
        let p = PrecisionPlan::preset("paper").unwrap();
        assert_eq!(p.resolve("enc.stem.conv.weight").unwrap(), ScopePrecision::new(8, 16));
        assert_eq!(p.resolve("conn.w1.weight").unwrap(), ScopePrecision::new(8, 16));
        assert_eq!(p.resolve("lm.layers.0.ffn.up").unwrap(), ScopePrecision::new(4, 16));
        assert!(matches!(p.resolve("encoder.x"), Err(Error::Uncovered(_))));

        let f = PrecisionPlan::preset("fp-ref").unwrap();
        for s in ["enc.1.x", "conn.0.in", "lm.3.q"] {
            assert_eq!(f.resolve(s).unwrap(), ScopePrecision::new(16, 16));
        }
        assert!(PrecisionPlan::preset("int2").is_err());

        let mut custom = p.clone();
        custom.scopes.remove("conn");
        match custom.check_covers(["enc.0.in", "conn.0.in"]) {
            Err(Error::Uncovered(site)) => assert_eq!(site, "conn.0.in"),
            other => panic!("expected coverage error, got {other:?}"),
        }
        custom.overrides.insert("conn.0.in".into(), ScopePrecision::new(8, 8));
        assert!(custom.check_covers(["enc.0.in", "conn.0.in"]).is_ok());
    }

    #[test]
    fn plan_json_round_trip() {
        let p = PrecisionPlan::preset("paper").unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<PrecisionPlan>(&s).unwrap(), p);
        let bad = PrecisionPlan {
            scopes: [("lm".to_string(), ScopePrecision::new(3, 16))].into(),
            ..p
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn quant_observer_reports_missing() {
        let mut params = BTreeMap::new();
        params.insert("lm.0.a".to_string(), QuantParams::new(0.5, 0, 8, true).unwrap());
        let mut obs = QuantObserver::new(&params);
        let mut v = [0.3f32, 0.8];
        obs.activation(SiteId::new(Scope::Lm, 0, "a"), &mut v);
        assert_eq!(v, [0.5, 1.0]);
        assert!(obs.take_missing().is_ok());
        obs.activation(SiteId::new(Scope::Lm, 1, "a"), &mut v);
        assert!(matches!(obs.take_missing(), Err(Error::MissingRange(s)) if s == "lm.1.a"));
    }

    fn book_of(chunks: &[Vec<f32>]) -> RangeBook {
        let mut b = RangeBook::new(CalibMethod::MinMax);
        for (i, c) in chunks.iter().enumerate() {
            b.observe(if i % 2 == 0 { "even" } else { "odd" }, c);
        }
        b
    }

    proptest! {
        #[test]
        fn merge_is_associative_and_commutative(
            data in proptest::collection::vec(proptest::collection::vec(-1e3f32..1e3, 1..40), 3..12),
            cut1 in 0usize..12, cut2 in 0usize..12,
        ) {
            let n = data.len();
            let (a, b) = (cut1.min(n), cut2.min(n));
            let (a, b) = (a.min(b), a.max(b));
            let whole = book_of(&data);
            // books keyed by absolute chunk index parity; rebuild partitions consistently
            let part = |r: std::ops::Range<usize>| {
                let mut bk = RangeBook::new(CalibMethod::MinMax);
                for i in r {
                    bk.observe(if i % 2 == 0 { "even" } else { "odd" }, &data[i]);
                }
                bk
            };
            let (p1, p2, p3) = (part(0..a), part(a..b), part(b..n));
            let mut left = p1.clone();
            left.merge(&p2).unwrap();
            left.merge(&p3).unwrap();
            let mut right = p3.clone();
            let mut mid = p2.clone();
            mid.merge(&p1).unwrap();
            right.merge(&mid).unwrap();
            prop_assert_eq!(&left, &whole);
            prop_assert_eq!(&right, &whole);
        }

        #[test]
        fn percentile_never_widens(vals in proptest::collection::vec(-50f32..50.0, 1..500), p in 50f64..100.0) {
            let mut b = RangeBook::new(CalibMethod::Percentile(p));
            b.observe("s", &vals);
            let (lo, hi) = b.range("s").unwrap();
            let r = &b.sites["s"];
            prop_assert!(lo >= r.min && hi <= r.max && lo <= hi);
        }
    }
}
