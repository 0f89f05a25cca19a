use anrl::nn::*;
use anrl::qtensor::{quantize, weight_params};
use anrl::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0f32))
}

/// Gather-form grouped convolution written independently of the library.
fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, s: &Conv2dSpec) -> Tensor {
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let oh = (h + 2 * s.padding - s.kernel_h) / s.stride + 1;
    let ow = (wd + 2 * s.padding - s.kernel_w) / s.stride + 1;
    let cpg = c / s.groups;
    let opg = s.out_channels / s.groups;
    let mut out = vec![0f64; n * s.out_channels * oh * ow];
    for ni in 0..n {
        for o in 0..s.out_channels {
            let g = o / opg;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o] as f64);
                    for ci in 0..cpg {
                        for i in 0..s.kernel_h {
                            for j in 0..s.kernel_w {
                                let iy = (y * s.stride + i) as isize - s.padding as isize;
                                let ix = (xx * s.stride + j) as isize - s.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((ni * c + g * cpg + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((o * cpg + ci) * s.kernel_h + i) * s.kernel_w + j];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((ni * s.out_channels + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, s.out_channels, oh, ow], out.into_iter().map(|v| v as f32).collect()).unwrap()
}

fn assert_close(a: &Tensor, b: &Tensor, rel: f32) {
    assert_eq!(a.shape(), b.shape());
    let scale = b.data().iter().fold(1e-3f32, |m, v| m.max(v.abs()));
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        assert!((x - y).abs() <= rel * scale, "at {i}: {x} vs {y}");
    }
}

#[test]
fn strided_padded_conv_matches_gather_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let spec = Conv2dSpec::dense(3, 4, 3, 2, 1);
    let x = random(&mut rng, &[1, 3, 5, 5]);
    let w = random(&mut rng, &spec.weight_shape());
    let b = random(&mut rng, &[4]);
    let y = conv2d_direct(&x, &w, Some(&b), &spec).unwrap();
    assert_eq!(y.shape(), [1, 4, 3, 3]);
    assert_close(&y, &naive_conv(&x, &w, Some(&b), &spec), 1e-5);
}

#[test]
fn depthwise_then_pointwise_equals_rank_factorized_dense_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (c, o, k) = (4, 6, 3);
    let x = random(&mut rng, &[2, c, 7, 7]);
    let w_dw = random(&mut rng, &[c, 1, k, k]);
    let w_pw = random(&mut rng, &[o, c, 1, 1]);
    for stride in [1, 2] {
        let dw = depthwise_conv2d(&x, &w_dw, None, &Conv2dSpec::depthwise(c, k, stride, 1)).unwrap();
        let y = pointwise_conv2d(&dw, &w_pw, None).unwrap();
        let dense = Tensor::from_fn(&[o, c, k, k], |idx| {
            let (oo, rest) = (idx / (c * k * k), idx % (c * k * k));
            let (cc, ij) = (rest / (k * k), rest % (k * k));
            w_pw.data()[oo * c + cc] * w_dw.data()[cc * k * k + ij]
        });
        let direct = conv2d_direct(&x, &dense, None, &Conv2dSpec::dense(c, o, k, stride, 1)).unwrap();
        assert_close(&y, &direct, 1e-5);
    }
}

#[test]
fn avg_pool_then_upsample_restores_a_constant_map() {
    let x = Tensor::full(&[1, 2, 48, 48], 0.75);
    let p = avg_pool2d(&x, 3, 3).unwrap();
    assert_eq!(p.shape(), [1, 2, 16, 16]);
    assert_eq!(upsample_nearest(&p, 3).unwrap(), x);
    assert!(avg_pool2d(&Tensor::zeros(&[1, 1, 4, 4]), 3, 3).is_err());
}

#[test]
fn gelu_of_three() {
    assert!((gelu_scalar(3.0) - 2.9964).abs() < 1e-4);
    assert_eq!(gelu_scalar(0.0), 0.0);
}

#[test]
fn softmax_is_stable_for_large_inputs() {
    let s = softmax_rows(&Tensor::new(vec![1, 2], vec![1000.0, 1000.0]).unwrap());
    assert_eq!(s.data(), [0.5, 0.5]);
}

/// Scalar loops, f64 throughout.
fn naive_swiglu(x: &[f32], g: &Tensor, u: &Tensor, d: &Tensor) -> Vec<f64> {
    let (inner, dm) = (g.dim(0), g.dim(1));
    let mut h = vec![0f64; inner];
    for (i, hv) in h.iter_mut().enumerate() {
        let mut a = 0f64;
        let mut b = 0f64;
        for j in 0..dm {
            a += g.data()[i * dm + j] as f64 * x[j] as f64;
            b += u.data()[i * dm + j] as f64 * x[j] as f64;
        }
        *hv = a / (1.0 + (-a).exp()) * b;
    }
    (0..d.dim(0)).map(|o| (0..inner).map(|i| d.data()[o * inner + i] as f64 * h[i]).sum()).collect()
}

#[test]
fn swiglu_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[1, 4]);
    let (g, u, d) = (random(&mut rng, &[8, 4]), random(&mut rng, &[8, 4]), random(&mut rng, &[4, 8]));
    let y = swiglu_ffn(&x, &g, &u, &d).unwrap();
    for (a, b) in y.data().iter().zip(naive_swiglu(x.data(), &g, &u, &d)) {
        assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
    }
    assert!(swiglu_ffn(&x, &g, &random(&mut rng, &[7, 4]), &d).is_err());
}

#[test]
fn swiglu_with_saturated_gate_is_bilinear() {
    // gate pre-activation 20·x with x > 0 keeps silu(z) ≈ z
    let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
    let g = Tensor::new(vec![2, 2], vec![20.0, 0.0, 0.0, 20.0]).unwrap();
    let u = Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.5, -1.0]).unwrap();
    let d = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
    let y = swiglu_ffn(&x, &g, &u, &d).unwrap();
    let expect = 20.0 * 3.0 + 40.0 * -1.5;
    assert!((y.data()[0] - expect).abs() < 1e-4 * 60.0, "{}", y.data()[0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn factorized_convs_equal_dense_oracle(
        seed in any::<u64>(),
        n in 1usize..=2,
        c in 1usize..=4,
        o in 1usize..=4,
        h in 1usize..=8,
        w in 1usize..=8,
        k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..=2,
        pad in 0usize..=2,
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[n, c, h, w]);
        let b = random(&mut rng, &[c]);

        let dws = Conv2dSpec::depthwise(c, k, stride, pad);
        let wd = random(&mut rng, &dws.weight_shape());
        let y = depthwise_conv2d(&x, &wd, Some(&b), &dws).unwrap();
        assert_close(&y, &naive_conv(&x, &wd, Some(&b), &dws), 1e-5);
        assert_close(&conv2d_direct(&x, &wd, Some(&b), &dws).unwrap(), &y, 1e-5);
        // the same map as a dense kernel with zero cross-channel taps
        let dense = Tensor::from_fn(&[c, c, k, k], |i| {
            let (oo, rest) = (i / (c * k * k), i % (c * k * k));
            if rest / (k * k) == oo { wd.data()[oo * k * k + rest % (k * k)] } else { 0.0 }
        });
        assert_close(&conv2d_direct(&x, &dense, Some(&b), &Conv2dSpec::dense(c, c, k, stride, pad)).unwrap(), &y, 1e-5);

        let pws = Conv2dSpec::pointwise(c, o);
        let wp = random(&mut rng, &pws.weight_shape());
        let bo = random(&mut rng, &[o]);
        let yp = pointwise_conv2d(&x, &wp, Some(&bo)).unwrap();
        assert_close(&yp, &naive_conv(&x, &wp, Some(&bo), &pws), 1e-5);
    }

    #[test]
    fn conv_is_shape_total(
        c in 1usize..=4, cs in 1usize..=4, o in 1usize..=4, g in 1usize..=4,
        h in 0usize..=6, k in 1usize..=4, stride in 0usize..=2, pad in 0usize..=2, wk in 1usize..=4,
    ) {
        let spec = Conv2dSpec { in_channels: cs, out_channels: o, kernel_h: k, kernel_w: k, stride, padding: pad, groups: g };
        let x = Tensor::zeros(&[1, c, h.max(1), h.max(1)]);
        let w = Tensor::zeros(&[o, wk, k, k]);
        match conv2d_direct(&x, &w, None, &spec) {
            Ok(y) => {
                let oh = (h.max(1) + 2 * pad - k) / stride + 1;
                prop_assert_eq!(y.shape(), &[1, o, oh, oh][..]);
                prop_assert_eq!(y.len(), y.data().len());
            }
            Err(e) => prop_assert!(matches!(e, anrl::Error::Shape(_))),
        }
    }

    #[test]
    fn gelu_odd_part_is_identity(x in -20f32..20.0) {
        // 0.5x(1+t) + 0.5x(1-t) = x; the sum gelu(x) + gelu(-x) is x·t instead
        let d = gelu_scalar(x) as f64 - gelu_scalar(-x) as f64;
        prop_assert!((d - x as f64).abs() <= 1e-6 * x.abs().max(1.0) as f64, "{} vs {}", d, x);
    }

    #[test]
    fn rmsnorm_is_scale_invariant(v in prop::collection::vec(-5f32..5.0, 2..32), alpha in 0.01f32..100.0) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-2));
        let n = v.len();
        let x = Tensor::new(vec![1, n], v.clone()).unwrap();
        let ax = x.scale(alpha);
        let gain = Tensor::full(&[n], 1.0);
        let a = rmsnorm(&x, &gain, 0.0).unwrap();
        let b = rmsnorm(&ax, &gain, 0.0).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() <= 1e-5 * p.abs().max(1.0));
        }
    }

    #[test]
    fn softmax_is_shift_invariant(v in prop::collection::vec(-30f32..30.0, 1..16), c in -100f32..100.0) {
        let n = v.len();
        let a = softmax_rows(&Tensor::new(vec![1, n], v.clone()).unwrap());
        let b = softmax_rows(&Tensor::new(vec![1, n], v.iter().map(|x| x + c).collect()).unwrap());
        prop_assert!((a.data().iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() <= 1e-5);
        }
    }

    #[test]
    fn causal_attention_ignores_future_inputs(seed in any::<u64>(), t in 2usize..8, kvh in prop::sample::select(vec![1usize, 2]), cut in 0usize..7) {
        let cut = cut % (t - 1);
        let spec = AttentionSpec { d_model: 16, n_heads: 4, n_kv_heads: kvh, head_dim: 4, causal: true };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random(&mut rng, &[t, 16]);
        let k = random(&mut rng, &[t, kvh * 4]);
        let v = random(&mut rng, &[t, kvh * 4]);
        let probs = attention_probs(&q, &k, &v, &spec, Mask::Causal).unwrap();
        for row in probs.data().chunks(t) {
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
        let y = attention(&q, &k, &v, &spec, Mask::Causal).unwrap();
        let perturb = |x: &Tensor, rng: &mut ChaCha8Rng| {
            let mut x = x.clone();
            let w = x.dim(1);
            for r in cut + 1..t {
                for e in &mut x.data_mut()[r * w..(r + 1) * w] {
                    *e += rng.gen_range(-5.0..5.0f32);
                }
            }
            x
        };
        let y2 = attention(&perturb(&q, &mut rng), &perturb(&k, &mut rng), &perturb(&v, &mut rng), &spec, Mask::Causal).unwrap();
        prop_assert_eq!(&y.data()[..(cut + 1) * 16], &y2.data()[..(cut + 1) * 16]);
    }

    #[test]
    fn int_matmul_is_within_one_step_per_term(seed in any::<u64>(), m in 1usize..6, kd in 1usize..40, n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[m, kd]).scale(3.0);
        let b = random(&mut rng, &[kd, n]);
        let qa = quantize(&a, &weight_params(&a, 8).unwrap()).unwrap();
        let qb = quantize(&b, &weight_params(&b, 8).unwrap()).unwrap();
        let r = int_matmul_i32(&qa, &qb).unwrap();
        let (da, db) = (anrl::qtensor::dequantize(&qa), anrl::qtensor::dequantize(&qb));
        let step = qa.params().scale * qb.params().scale;
        let out = r.dequantize();
        for i in 0..m {
            for j in 0..n {
                let f: f64 = (0..kd).map(|p| da.data()[i * kd + p] as f64 * db.data()[p * n + j] as f64).sum();
                prop_assert!((out.data()[i * n + j] as f64 - f).abs() <= kd as f64 * step);
            }
        }
    }
}
