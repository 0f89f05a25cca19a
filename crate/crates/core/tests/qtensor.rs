use anrl::qtensor::*;
use anrl::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn params() -> impl Strategy<Value = QuantParams> {
    (prop::sample::select(vec![4u32, 8, 16]), any::<bool>(), -6.0f64..3.0, 0.0f64..=1.0).prop_map(|(bits, sym, log_scale, zp_frac)| {
        let hi = qrange(bits, sym).unwrap().1;
        let zp = if sym { 0 } else { (zp_frac * hi as f64).round() as i32 };
        QuantParams::new(10f64.powf(log_scale), zp, bits, sym).unwrap()
    })
}

/// Independent reference: f64 division, ties to even, saturate.
fn oracle(x: f32, p: &QuantParams) -> i32 {
    let (lo, hi) = qrange(p.bits, p.symmetric).unwrap();
    let q = (x as f64 / p.scale).round_ties_even() + p.zero_point as f64;
    q.clamp(lo as f64, hi as f64) as i32
}

#[test]
fn saturation_holds_for_many_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100_000 {
        let bits = [4, 8, 16][rng.gen_range(0..3)];
        let sym = rng.gen::<bool>();
        let lo = rng.gen_range(-100.0..0.0f64);
        let hi = rng.gen_range(0.0..100.0f64);
        let p = compute_quant_params(lo, hi, bits, sym).unwrap();
        let x = rng.gen_range(-1000.0..1000.0f32);
        let q = p.quantize_value(x);
        assert!(q >= p.qmin() && q <= p.qmax(), "{x} {p:?}");
        assert_eq!(q, oracle(x, &p), "{x} {p:?}");
    }
}

#[test]
fn symmetric_grids_drop_the_most_negative_code() {
    assert_eq!(qrange(4, true).unwrap(), (-7, 7));
    assert_eq!(qrange(8, true).unwrap(), (-127, 127));
    assert_eq!(qrange(16, true).unwrap(), (-32767, 32767));
    assert_eq!(qrange(8, false).unwrap(), (0, 255));
    assert!(qrange(3, true).is_err());
}

#[test]
fn int4_pack_is_a_bijection_for_short_sequences() {
    let mut seqs: Vec<Vec<i32>> = vec![vec![]];
    for _ in 0..4 {
        let prev = seqs.clone();
        seqs.clear();
        for s in prev {
            for v in -8..=7 {
                let mut n = s.clone();
                n.push(v);
                seqs.push(n);
            }
        }
        for s in &seqs {
            let packed = pack_int4(s).unwrap();
            assert_eq!(packed.len(), s.len().div_ceil(2));
            assert_eq!(unpack_int4(&packed, s.len()), *s);
        }
    }
    assert!(pack_int4(&[8]).is_err());
    assert!(pack_int4(&[-9]).is_err());
    // odd length pads the high nibble with zero
    assert_eq!(pack_int4(&[-1]).unwrap(), vec![0x0f]);
}

#[test]
fn uniform_full_scale_sqnr_follows_six_db_per_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::from_fn(&[200_000], |_| rng.gen_range(-1.0..=1.0f32));
    for bits in [4u32, 8, 16] {
        let p = compute_quant_params(-1.0, 1.0, bits, true).unwrap();
        let s = sqnr_db(&x, &fake_quant(&x, &p).unwrap()).unwrap();
        let law = 6.02 * bits as f64;
        assert!((s - law).abs() <= 1.5, "{bits}-bit: {s:.2} dB vs {law:.2}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn quantize_is_monotone(p in params(), a in -1e4f32..1e4, b in -1e4f32..1e4) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(p.quantize_value(lo) <= p.quantize_value(hi));
    }

    #[test]
    fn quantize_matches_oracle(p in params(), x in -1e4f32..1e4) {
        prop_assert_eq!(p.quantize_value(x), oracle(x, &p));
    }

    #[test]
    fn int4_pack_round_trips(v in prop::collection::vec(-8i32..=7, 0..300)) {
        prop_assert_eq!(unpack_int4(&pack_int4(&v).unwrap(), v.len()), v);
    }

    #[test]
    fn fake_quant_is_idempotent(p in params(), v in prop::collection::vec(-1e3f32..1e3, 1..64)) {
        let t = Tensor::vector(v);
        let once = fake_quant(&t, &p).unwrap();
        let twice = fake_quant(&once, &p).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&once), bits(&twice));
    }

    #[test]
    fn stored_values_stay_in_range(p in params(), v in prop::collection::vec(-1e5f32..1e5, 1..64)) {
        let q = quantize(&Tensor::vector(v), &p).unwrap();
        prop_assert!(q.values().iter().all(|&x| x >= p.qmin() && x <= p.qmax()));
        prop_assert_eq!(q.payload().len(), payload_len(q.len(), p.bits));
    }

    #[test]
    fn sqnr_and_rms_error_agree(
        r in prop::collection::vec(-10f32..10.0, 2..64),
        noise in prop::collection::vec(-1f32..1.0, 64),
        amp in 1e-4f32..3.0,
    ) {
        prop_assume!(r.iter().any(|&x| x != 0.0));
        let reference = Tensor::vector(r.clone());
        let test = Tensor::vector(r.iter().zip(&noise).map(|(a, n)| a + amp * n).collect());
        let s = sqnr_db(&reference, &test).unwrap();
        let rms = rms_error_percent(&reference, &test).unwrap();
        if s.is_infinite() {
            prop_assert_eq!(rms, 0.0);
        } else {
            let via = 100.0 * 10f64.powf(-s / 20.0);
            prop_assert!((rms - via).abs() <= 1e-6 * rms.max(1e-12), "{} vs {}", rms, via);
        }
    }
}
