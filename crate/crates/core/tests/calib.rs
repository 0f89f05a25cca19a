use anrl::backbone::BackboneConfig;
use anrl::calib::*;
use anrl::connector::{Connector, ConnectorConfig};
use anrl::data::{synthetic_image, ImageKind};
use anrl::init::Init;
use anrl::params::Params;
use anrl::qtensor::sqnr_db;
use anrl::vlm::{evaluate_quantization, synthetic_prompt, Vlm, VlmConfig, VlmInput};
use anrl::{Error, Tensor};
use proptest::prelude::*;

fn small_vlm() -> VlmConfig {
    VlmConfig {
        backbone: BackboneConfig {
            d_model: 64,
            n_heads: 2,
            head_dim: 32,
            ffn_inner: 128,
            vocab_size: 61,
            max_context: 64,
            ..BackboneConfig::toy()
        },
        ..VlmConfig::toy()
    }
}

fn inputs(seed: u64, n: u64, decode_steps: usize) -> Vec<VlmInput> {
    (0..n)
        .map(|i| VlmInput {
            image: synthetic_image(ImageKind::Structured, seed, i, 3, 96),
            prompt: synthetic_prompt(seed, i, 6, 61),
            decode_steps,
        })
        .collect()
}

fn token_batches(seed: u64, n: u64) -> Vec<Tensor> {
    (0..n).map(|i| Init::new(seed * 1000 + i).normal(&[4, 16], 1.0 + i as f32)).collect()
}

fn plan_with_weight_bits(bits: u32) -> PrecisionPlan {
    let mut p = PrecisionPlan::preset("fp-ref").unwrap();
    for s in p.scopes.values_mut() {
        s.weight_bits = bits;
    }
    p.name = format!("w{bits}a16");
    p
}

#[test]
fn empty_calibration_set_is_an_error() {
    let c = Connector::new(ConnectorConfig::new(16, 8), 0).unwrap();
    assert!(collect_ranges(&c, &[], CalibMethod::MinMax).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn merging_is_associative_and_commutative(seed in 0u64..1000, (i, j) in (1usize..7).prop_flat_map(|i| (Just(i), i + 1..8))) {
        let c = Connector::new(ConnectorConfig::new(16, 8), seed).unwrap();
        let batch = token_batches(seed, 8);
        let book = |xs: &[Tensor]| collect_ranges(&c, xs, CalibMethod::MinMax).unwrap();
        let (a, b, d) = (book(&batch[..i]), book(&batch[i..j]), book(&batch[j..]));
        let whole = book(&batch);

        let mut left = a.clone();
        left.merge(&b).unwrap();
        left.merge(&d).unwrap();
        let mut bd = b.clone();
        bd.merge(&d).unwrap();
        let mut right = a.clone();
        right.merge(&bd).unwrap();
        let mut rev = d.clone();
        rev.merge(&b).unwrap();
        rev.merge(&a).unwrap();
        prop_assert_eq!(&left, &whole);
        prop_assert_eq!(&right, &whole);
        prop_assert_eq!(&rev, &whole);
    }

    #[test]
    fn percentile_never_widens_the_range(
        values in prop::collection::vec(-50f32..50.0, 1..400),
        spikes in prop::collection::vec(-1e4f32..1e4, 0..4),
        p in 50f64..100.0,
    ) {
        let mut book = RangeBook::new(CalibMethod::MinMax);
        book.observe("s", &values);
        book.observe("s", &spikes);
        let (lo, hi) = book.range("s").unwrap();
        let (plo, phi) = book.clone().with_method(CalibMethod::Percentile(p)).range("s").unwrap();
        prop_assert!(lo <= plo && phi <= hi, "[{}, {}] vs [{}, {}]", plo, phi, lo, hi);
        prop_assert_eq!(book.clone().with_method(CalibMethod::Percentile(100.0)).range("s").unwrap(), (lo, hi));
    }
}

#[test]
fn percentile_clips_a_lone_outlier() {
    let mut book = RangeBook::new(CalibMethod::Percentile(99.0));
    let mut v: Vec<f32> = (0..10_000).map(|i| (i % 200) as f32 / 100.0 - 1.0).collect();
    v.push(500.0);
    book.observe("s", &v);
    let (_, hi) = book.range("s").unwrap();
    assert!(hi < 2.0, "{hi}");
}

#[test]
fn presets_assign_the_documented_widths() {
    let paper = PrecisionPlan::preset("paper").unwrap();
    for s in ["enc", "conn", "vit"] {
        assert_eq!(paper.resolve(&format!("{s}.x.weight")).unwrap(), ScopePrecision::new(8, 16));
    }
    assert_eq!(paper.resolve("lm.3.ffn.up").unwrap(), ScopePrecision::new(4, 16));
    let fp = PrecisionPlan::preset("fp-ref").unwrap();
    assert!(fp.scopes.values().all(|s| *s == ScopePrecision::new(16, 16)));
    assert!(PrecisionPlan::preset("w2").is_err());
}

#[test]
fn overrides_win_over_scopes() {
    let mut p = PrecisionPlan::preset("paper").unwrap();
    p.overrides.insert("lm.head".into(), ScopePrecision::new(8, 16));
    assert_eq!(p.resolve("lm.head").unwrap().weight_bits, 8);
    assert_eq!(p.resolve("lm.headx").unwrap().weight_bits, 4);
    // prefix match must stop at a dot
    assert!(p.resolve("lmx.0").is_err());
}

#[test]
fn missing_scope_names_the_uncovered_site() {
    let m = Vlm::new(&small_vlm(), 0).unwrap();
    let book = collect_ranges(&m, &inputs(1, 1, 0), CalibMethod::MinMax).unwrap();
    let mut plan = PrecisionPlan::preset("paper").unwrap();
    plan.scopes.remove("conn");
    match quantize_model(&m, &plan, &book) {
        Err(Error::Uncovered(site)) => assert!(site.starts_with("conn."), "{site}"),
        other => panic!("{other:?}"),
    }
    let mut short = book.clone();
    short.sites.remove("lm.1.cand");
    match quantize_model(&m, &PrecisionPlan::preset("paper").unwrap(), &short) {
        Err(Error::MissingRange(site)) => assert_eq!(site, "lm.1.cand"),
        other => panic!("{other:?}"),
    }
    let mut bad = PrecisionPlan::preset("paper").unwrap();
    bad.scopes.insert("lm".into(), ScopePrecision::new(3, 16));
    assert!(matches!(quantize_model(&m, &bad, &book), Err(Error::Config { .. })));
}

#[test]
fn weights_on_the_8_bit_grid_quantize_exactly() {
    let mut c = Connector::new(ConnectorConfig::new(24, 16), 3).unwrap();
    for (_, w) in c.named_params_mut("") {
        let n = w.len();
        *w = Tensor::from_fn(w.shape(), |i| ((i * 37 % 255) as i32 - 127) as f32 / 128.0);
        // pin the extreme so the scale lands on the grid step
        w.data_mut()[n - 1] = 127.0 / 128.0;
    }
    let batch: Vec<Tensor> = (0..2).map(|i| Init::new(i).normal(&[4, 24], 1.0)).collect();
    let book = collect_ranges(&c, &batch, CalibMethod::MinMax).unwrap();
    let q = quantize_model(&c, &PrecisionPlan::preset("w8a16").unwrap(), &book).unwrap();
    for ((name, a), (_, b)) in c.named_params("").into_iter().zip(q.model.named_params("")) {
        assert_eq!(a, b, "{name}");
        assert!(sqnr_db(a, b).unwrap().is_infinite());
    }
}

#[test]
fn activation_parameters_are_frozen_across_inferences() {
    let m = Vlm::new(&small_vlm(), 4).unwrap();
    let book = collect_ranges(&m, &inputs(5, 2, 4), CalibMethod::MinMax).unwrap();
    let q = quantize_model(&m, &PrecisionPlan::preset("paper").unwrap(), &book).unwrap();
    let before = q.activation_digest();
    let mut obs = q.observer();
    for input in inputs(6, 3, 0) {
        q.model.generate(&input, 4, &mut obs).unwrap();
    }
    obs.take_missing().unwrap();
    evaluate_quantization(&m, &q, &inputs(7, 2, 0), 3).unwrap();
    assert_eq!(q.activation_digest(), before);
}

#[test]
fn logits_error_does_not_grow_with_more_weight_bits() {
    for seed in 0..5 {
        let m = Vlm::new(&small_vlm(), seed).unwrap();
        let book = collect_ranges(&m, &inputs(100 + seed, 4, 8), CalibMethod::MinMax).unwrap();
        let eval = inputs(200 + seed, 2, 0);
        let rms: Vec<f64> = [4, 8, 16]
            .iter()
            .map(|&b| {
                let q = quantize_model(&m, &plan_with_weight_bits(b), &book).unwrap();
                evaluate_quantization(&m, &q, &eval, 8).unwrap().logits.rms_error_percent
            })
            .collect();
        println!("seed {seed}: logits RMS% at W4/W8/W16 = {rms:?}");
        assert!(rms[0] >= rms[1] && rms[1] >= rms[2], "seed {seed}: {rms:?}");
    }
}

#[test]
fn paper_preset_runs_end_to_end() {
    let m = Vlm::new(&small_vlm(), 8).unwrap();
    let book = collect_ranges(&m, &inputs(9, 4, 8), CalibMethod::MinMax).unwrap();
    let q = quantize_model(&m, &PrecisionPlan::preset("paper").unwrap(), &book).unwrap();
    let r = evaluate_quantization(&m, &q, &inputs(10, 2, 0), 8).unwrap();
    for stage in [&r.encoder, &r.connector, &r.logits] {
        assert!(stage.sqnr_db.is_finite() && stage.rms_error_percent > 0.0, "{stage:?}");
    }
    assert_eq!(r.tokens_compared, 16);
    assert_eq!(r.inputs, 2);
    let back: QuantEvalReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(back, r);
    // every LM weight is stored at 4 bits, everything else at 8
    for (name, w) in &q.weights {
        let bits = if name.starts_with("lm.") { 4 } else { 8 };
        assert_eq!(w.params().bits, bits, "{name}");
    }
}

#[test]
fn identical_models_report_zero_error() {
    let m = Vlm::new(&small_vlm(), 11).unwrap();
    let r = anrl::vlm::evaluate_pair(&m, &m, None, &inputs(12, 2, 0), 6).unwrap();
    assert_eq!(r.logits.rms_error_percent, 0.0);
    assert_eq!(r.agreement, 1.0);
    let other = Vlm::new(&VlmConfig { connector_bias: false, ..small_vlm() }, 11).unwrap();
    assert!(anrl::vlm::evaluate_pair(&m, &other, None, &inputs(12, 1, 0), 2).is_err());
}

#[test]
fn fp_ref_output_sqnr_is_at_least_80_db() {
    let m = Vlm::new(&small_vlm(), 13).unwrap();
    // ranges cover the evaluated activations so only rounding noise remains
    let book = collect_ranges(&m, &inputs(14, 4, 8), CalibMethod::MinMax).unwrap();
    let q = quantize_model(&m, &PrecisionPlan::preset("fp-ref").unwrap(), &book).unwrap();
    let r = evaluate_quantization(&m, &q, &inputs(14, 4, 0), 8).unwrap();
    println!(
        "fp-ref SQNR: encoder {:.1} dB, connector {:.1} dB, logits {:.1} dB",
        r.encoder.sqnr_db, r.connector.sqnr_db, r.logits.sqnr_db
    );
    assert!(r.logits.sqnr_db >= 80.0, "fp-ref logits SQNR {:.1} dB < 80 dB", r.logits.sqnr_db);
}
