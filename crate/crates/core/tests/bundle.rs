use anrl::backbone::BackboneConfig;
use anrl::bundle::*;
use anrl::calib::{collect_ranges, quantize_model, CalibMethod, PrecisionPlan};
use anrl::data::{synthetic_image, ImageKind};
use anrl::params::Params;
use anrl::probe::NoObserver;
use anrl::vit::{Vit, VitConfig};
use anrl::vlm::{synthetic_prompt, Vlm, VlmConfig, VlmInput};
use anrl::Error;

fn small_cfg() -> VlmConfig {
    VlmConfig {
        backbone: BackboneConfig {
            d_model: 64,
            n_heads: 2,
            head_dim: 32,
            ffn_inner: 128,
            vocab_size: 61,
            max_context: 128,
            ..BackboneConfig::toy()
        },
        ..VlmConfig::toy()
    }
}

fn inputs(seed: u64, n: u64) -> Vec<VlmInput> {
    (0..n)
        .map(|i| VlmInput {
            image: synthetic_image(ImageKind::Structured, seed, i, 3, 96),
            prompt: synthetic_prompt(seed, i, 4, 61),
            decode_steps: 4,
        })
        .collect()
}

fn quantized(m: &Vlm, preset: &str) -> ModelBundle {
    let book = collect_ranges(m, &inputs(1, 2), CalibMethod::MinMax).unwrap();
    let q = quantize_model(m, &PrecisionPlan::preset(preset).unwrap(), &book).unwrap();
    ModelBundle::from_quantized_vlm(&q, 7).unwrap()
}

#[test]
fn float_bundle_round_trips_byte_identically() {
    let m = Vlm::new(&small_cfg(), 3).unwrap();
    let b = ModelBundle::from_vlm(&m, 3).unwrap();
    let bytes = b.to_bytes().unwrap();
    let back = ModelBundle::from_bytes(&bytes).unwrap();
    assert_eq!(back, b);
    assert_eq!(back.to_bytes().unwrap(), bytes);
    let LoadedModel::Vlm(m2) = back.load_model().unwrap() else { panic!("kind") };
    assert_eq!(m2, m);
}

#[test]
fn quantized_bundle_round_trips_and_runs_identically() {
    let m = Vlm::new(&small_cfg(), 4).unwrap();
    let b = quantized(&m, "paper");
    let bytes = b.to_bytes().unwrap();
    let back = ModelBundle::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let book = collect_ranges(&m, &inputs(1, 2), CalibMethod::MinMax).unwrap();
    let q = quantize_model(&m, &PrecisionPlan::preset("paper").unwrap(), &book).unwrap();
    let LoadedModel::QuantVlm(q2) = back.load_model().unwrap() else { panic!("kind") };
    assert_eq!(q2.model, q.model);
    assert_eq!(q2.activations, q.activations);
    assert_eq!(q2.weights, q.weights);
    let input = &inputs(9, 1)[0];
    let a = q.model.generate(input, 3, &mut q.observer()).unwrap();
    let b = q2.model.generate(input, 3, &mut q2.observer()).unwrap();
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn paper_preset_stores_lm_as_int4_and_vision_as_int8() {
    let b = quantized(&Vlm::new(&small_cfg(), 5).unwrap(), "paper");
    for (name, s) in &b.tensors {
        let want = if name.starts_with("lm.") { DType::I4 } else { DType::I8 };
        assert_eq!(s.dtype(), want, "{name}");
    }
}

#[test]
fn fp_ref_stores_every_tensor_as_int16() {
    let b = quantized(&Vlm::new(&small_cfg(), 5).unwrap(), "fp-ref");
    assert!(b.tensors.iter().all(|(_, s)| s.dtype() == DType::I16));
}

#[test]
fn quantizing_twice_gives_identical_bytes() {
    let m = Vlm::new(&small_cfg(), 6).unwrap();
    assert_eq!(quantized(&m, "paper").to_bytes().unwrap(), quantized(&m, "paper").to_bytes().unwrap());
}

#[test]
fn same_seed_gives_same_checksum() {
    let a = ModelBundle::from_vlm(&Vlm::new(&small_cfg(), 11).unwrap(), 11).unwrap();
    let b = ModelBundle::from_vlm(&Vlm::new(&small_cfg(), 11).unwrap(), 11).unwrap();
    let c = ModelBundle::from_vlm(&Vlm::new(&small_cfg(), 12).unwrap(), 12).unwrap();
    assert_eq!(a.payload_crc(), b.payload_crc());
    assert_ne!(a.payload_crc(), c.payload_crc());
}

#[test]
fn stored_crc_is_the_crc_of_the_payload() {
    let b = ModelBundle::from_vit(&Vit::new(VitConfig::toy(), 1).unwrap(), 1).unwrap();
    let bytes = b.to_bytes().unwrap();
    let n = b.tensors.iter().map(|(_, s)| s.shape().iter().product::<usize>() * 4).sum::<usize>();
    let payload = &bytes[bytes.len() - n..];
    let crc_at = bytes.len() - n - 4;
    assert_eq!(u32::from_le_bytes(bytes[crc_at..crc_at + 4].try_into().unwrap()), crc32fast::hash(payload));
    assert_eq!(b.payload_crc(), crc32fast::hash(payload));
}

#[test]
fn corruption_is_detected() {
    let b = ModelBundle::from_vit(&Vit::new(VitConfig::toy(), 1).unwrap(), 1).unwrap();
    let bytes = b.to_bytes().unwrap();

    let mut flipped = bytes.clone();
    *flipped.last_mut().unwrap() ^= 1;
    assert!(matches!(ModelBundle::from_bytes(&flipped), Err(Error::Format(m)) if m.contains("checksum")));

    assert!(matches!(ModelBundle::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(ModelBundle::from_bytes(&magic), Err(Error::Format(_))));

    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(ModelBundle::from_bytes(&version), Err(Error::SchemaVersion { expected: 1, found: 9 })));

    let mut trailing = bytes;
    trailing.push(0);
    assert!(ModelBundle::from_bytes(&trailing).is_err());
}

#[test]
fn header_layout_is_as_documented() {
    let b = ModelBundle::from_vit(&Vit::new(VitConfig::toy(), 2).unwrap(), 2).unwrap();
    let bytes = b.to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"ANRL");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
    assert_eq!(header["kind"], "vit");
    assert_eq!(header["seed"], 2);
    let n = u32::from_le_bytes(bytes[12 + hlen..16 + hlen].try_into().unwrap()) as usize;
    assert_eq!(n, b.tensors.len());
    // first entry: name, dtype f32, rank, dims, offset 0
    let mut p = 16 + hlen;
    let name_len = u16::from_le_bytes(bytes[p..p + 2].try_into().unwrap()) as usize;
    p += 2;
    assert_eq!(&bytes[p..p + name_len], b"patch_embed.weight");
    p += name_len;
    assert_eq!(bytes[p], 0);
    assert_eq!(bytes[p + 1], 2);
    p += 2 + 8;
    assert_eq!(u64::from_le_bytes(bytes[p..p + 8].try_into().unwrap()), 0);
}

#[test]
fn vit_bundle_round_trips() {
    let v = Vit::new(VitConfig::toy(), 8).unwrap();
    let b = ModelBundle::from_vit(&v, 8).unwrap();
    let back = ModelBundle::from_bytes(&b.to_bytes().unwrap()).unwrap();
    let LoadedModel::Vit(v2) = back.load_model().unwrap() else { panic!("kind") };
    let img = synthetic_image(ImageKind::Gaussian, 0, 0, 3, 96);
    assert_eq!(v.encode(&img, &mut NoObserver).unwrap(), v2.encode(&img, &mut NoObserver).unwrap());
}

#[test]
fn wrong_kind_is_rejected() {
    let b = ModelBundle::from_vit(&Vit::new(VitConfig::toy(), 8).unwrap(), 8).unwrap();
    assert!(b.vlm_config().is_err());
}

#[test]
fn toy_bundle_size_follows_parameter_count() {
    let m = Vlm::new(&VlmConfig::toy(), 0).unwrap();
    let b = ModelBundle::from_vlm(&m, 0).unwrap();
    let bytes = b.to_bytes().unwrap();
    let table: usize = b.tensors.iter().map(|(n, s)| 2 + n.len() + 2 + 4 * s.shape().len() + 16).sum();
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    assert_eq!(bytes.len(), 12 + hlen + 4 + table + 12 + 4 * m.param_count());
    // 4-bit LM, 8-bit vision
    let cfg = VlmConfig::toy();
    let book = collect_ranges(&m, &[VlmInput {
        image: synthetic_image(ImageKind::Structured, 0, 0, 3, 96),
        prompt: vec![1, 2],
        decode_steps: 1,
    }], CalibMethod::MinMax)
    .unwrap();
    let q = quantize_model(&m, &PrecisionPlan::preset("paper").unwrap(), &book).unwrap();
    let qb = ModelBundle::from_quantized_vlm(&q, 0).unwrap().to_bytes().unwrap();
    assert!(qb.len() < 50 << 20, "{} bytes", qb.len());
    assert_eq!(cfg.backbone.d_model, 256);
}
