use anrl::calib::{CalibMethod, PrecisionPlan};
use anrl::data::{synthetic_image, ImageKind};
use anrl::encoder::{Encoder, EncoderConfig};
use anrl::experiments::{brittleness_experiment, match_vit_params, vit_param_count, OutlierInjection};
use anrl::params::Params;
use anrl::probe::NoObserver;
use anrl::vit::{patchify, Vit, VitConfig};
use anrl::Tensor;

fn images(seed: u64, n: u64) -> Vec<Tensor> {
    (0..n).map(|i| synthetic_image(ImageKind::Structured, seed, i, 3, 96)).collect()
}

fn matched(enc: &Encoder) -> VitConfig {
    match_vit_params(VitConfig::toy(), enc.param_count(), 0.05).unwrap()
}

#[test]
fn bias_only_patch_embedding_gives_identical_tokens() {
    let mut v = Vit::new(VitConfig::toy(), 0).unwrap();
    for (_, t) in v.named_params_mut("") {
        *t = Tensor::zeros(t.shape());
    }
    v.patch_embed.bias = Some(Tensor::from_fn(&[192], |i| (i as f32 * 0.37).sin()));
    let out = v.encode(&synthetic_image(ImageKind::Gaussian, 0, 0, 3, 96), &mut NoObserver).unwrap();
    for r in 1..out.rows() {
        assert_eq!(out.row(r), out.row(0));
    }
}

#[test]
fn token_count_is_patches_squared() {
    let cfg = VitConfig { image_size: 512, ..VitConfig::toy() };
    assert_eq!(cfg.num_tokens(), 1024);
    let small = VitConfig { image_size: 512, d_model: 16, n_layers: 1, out_dim: 0, ..VitConfig::toy() };
    let out = Vit::new(small, 0).unwrap().encode(&Tensor::zeros(&[3, 512, 512]), &mut NoObserver).unwrap();
    assert_eq!(out.shape(), [1024, 16]);
    assert!(VitConfig { image_size: 100, ..VitConfig::toy() }.validate().is_err());
    assert!(Vit::new(VitConfig::toy(), 0).unwrap().encode(&Tensor::zeros(&[3, 64, 64]), &mut NoObserver).is_err());
}

#[test]
fn patchify_orders_patches_row_major() {
    let img = Tensor::from_fn(&[2, 4, 4], |i| i as f32);
    let p = patchify(&img, 2).unwrap();
    assert_eq!(p.shape(), [4, 8]);
    assert_eq!(p.row(1), [2.0, 3.0, 6.0, 7.0, 18.0, 19.0, 22.0, 23.0]);
}

#[test]
fn permuting_patches_with_positions_permutes_tokens() {
    let mut v = Vit::new(VitConfig::toy(), 3).unwrap();
    v.pos_embed = Tensor::from_fn(v.pos_embed.shape(), |i| ((i * 7919) % 101) as f32 / 50.0 - 1.0);
    let img = synthetic_image(ImageKind::Gaussian, 1, 0, 3, 96);
    let (g, p) = (6, 16);
    // reverse the patch grid
    let perm: Vec<usize> = (0..g * g).rev().collect();
    let mut moved = Tensor::zeros(img.shape());
    let mut pos = Tensor::zeros(v.pos_embed.shape());
    for (dst, &src) in perm.iter().enumerate() {
        let (dy, dx, sy, sx) = (dst / g, dst % g, src / g, src % g);
        for c in 0..3 {
            for y in 0..p {
                for x in 0..p {
                    moved.data_mut()[c * 96 * 96 + (dy * p + y) * 96 + dx * p + x] = img.data()[c * 96 * 96 + (sy * p + y) * 96 + sx * p + x];
                }
            }
        }
        pos.row_mut(dst).copy_from_slice(v.pos_embed.row(src));
    }
    let a = v.encode(&img, &mut NoObserver).unwrap();
    let mut w = v.clone();
    w.pos_embed = pos;
    let b = w.encode(&moved, &mut NoObserver).unwrap();
    for (dst, &src) in perm.iter().enumerate() {
        for (x, y) in b.row(dst).iter().zip(a.row(src)) {
            assert!((x - y).abs() <= 1e-4 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }
}

#[test]
fn closed_form_parameter_count_matches_the_model() {
    for cfg in [VitConfig::toy(), VitConfig { out_dim: 0, n_layers: 2, d_model: 64, ..VitConfig::toy() }] {
        assert_eq!(vit_param_count(&cfg), Vit::new(cfg, 0).unwrap().param_count());
    }
    let enc = Encoder::new(EncoderConfig::toy(), 0).unwrap();
    let v = matched(&enc);
    let ratio = vit_param_count(&v) as f64 / enc.param_count() as f64;
    assert!((ratio - 1.0).abs() <= 0.05, "{ratio}");
    assert!(match_vit_params(VitConfig::toy(), 10, 0.05).is_err());
}

#[test]
fn identical_encoders_on_both_arms_report_identical_metrics() {
    let enc = Encoder::new(EncoderConfig::toy(), 4).unwrap();
    let plan = PrecisionPlan::preset("w8a16").unwrap();
    let r = brittleness_experiment(&enc, &enc, &images(5, 3), &images(6, 2), &plan, CalibMethod::MinMax, None).unwrap();
    assert_eq!(r.conv, r.vit);
    assert_eq!(r.rms_ratio, 1.0);
    let v = Vit::new(VitConfig { out_dim: 128, ..VitConfig::toy() }, 0).unwrap();
    assert!(brittleness_experiment(&enc, &v, &images(5, 1), &images(6, 1), &plan, CalibMethod::MinMax, None).is_err());
    assert!(brittleness_experiment(&enc, &enc, &images(5, 1), &[], &plan, CalibMethod::MinMax, None).is_err());
}

#[test]
fn injection_raises_error_and_is_reproducible() {
    let enc = Encoder::new(EncoderConfig::toy(), 4).unwrap();
    let plan = PrecisionPlan::preset("w8a16").unwrap();
    let inj = OutlierInjection { seed: 1, ..OutlierInjection::default() };
    let clean = brittleness_experiment(&enc, &enc, &images(5, 2), &images(6, 2), &plan, CalibMethod::MinMax, None).unwrap();
    let dirty = brittleness_experiment(&enc, &enc, &images(5, 2), &images(6, 2), &plan, CalibMethod::MinMax, Some(inj)).unwrap();
    assert!(dirty.conv.output.rms_error_percent > clean.conv.output.rms_error_percent);
    let again = brittleness_experiment(&enc, &enc, &images(5, 2), &images(6, 2), &plan, CalibMethod::MinMax, Some(inj)).unwrap();
    assert_eq!(dirty, again);
}

#[test]
fn conv_encoder_is_less_brittle_than_the_vit_on_64_images() {
    let enc = Encoder::new(EncoderConfig::toy(), 0).unwrap();
    let v = Vit::new(matched(&enc), 0).unwrap();
    let plan = PrecisionPlan::preset("w8a16").unwrap();
    let r = brittleness_experiment(&enc, &v, &images(10, 16), &images(20, 64), &plan, CalibMethod::MinMax, None).unwrap();
    println!(
        "conv {:.3}% vs vit {:.3}% (ratio {:.3})",
        r.conv.output.rms_error_percent, r.vit.output.rms_error_percent, r.rms_ratio
    );
    assert!(r.conv.output.rms_error_percent < r.vit.output.rms_error_percent);
}

#[test]
fn percentile_calibration_reduces_vit_error_under_injection() {
    let plan = PrecisionPlan::preset("w8a16").unwrap();
    let (mut minmax, mut pct) = (0.0, 0.0);
    for seed in 0..5 {
        let enc = Encoder::new(EncoderConfig::toy(), seed).unwrap();
        let v = Vit::new(matched(&enc), seed).unwrap();
        let inj = Some(OutlierInjection { seed, ..OutlierInjection::default() });
        let (calib, eval) = (images(100 + seed, 8), images(200 + seed, 8));
        let a = brittleness_experiment(&enc, &v, &calib, &eval, &plan, CalibMethod::MinMax, inj).unwrap();
        let b = brittleness_experiment(&enc, &v, &calib, &eval, &plan, CalibMethod::Percentile(99.99), inj).unwrap();
        println!(
            "seed {seed}: vit minmax {:.3}% percentile {:.3}%",
            a.vit.output.rms_error_percent, b.vit.output.rms_error_percent
        );
        minmax += a.vit.output.rms_error_percent / 5.0;
        pct += b.vit.output.rms_error_percent / 5.0;
    }
    println!("mean over seeds: minmax {minmax:.3}% percentile {pct:.3}%");
    assert!(pct < minmax);
}
