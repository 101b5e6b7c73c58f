use candle_core::{DType, Device, Tensor};

use super::*;
use crate::rng::{normal_tensor, seeded};
use crate::schedule::{make_schedule, ScheduleKind};

fn small_arch() -> ArchConfig {
    ArchConfig {
        image_size: 16,
        channels: 3,
        patch: 2,
        widths: vec![8, 16],
        groups: 4,
        time_dim: 16,
        freq_dim: 8,
    }
}

fn small_system(seed: u64) -> RestorationSystem {
    RestorationSystem::init(&small_arch(), make_schedule(10, ScheduleKind::Cosine).unwrap(), seed).unwrap()
}

fn to_vec(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_dtype(DType::F32).unwrap().to_vec1::<f32>().unwrap()
}

fn bits(t: &Tensor) -> Vec<u32> {
    to_vec(t).into_iter().map(f32::to_bits).collect()
}

fn noisy(seed: u64, b: usize, arch: &ArchConfig) -> Tensor {
    let mut rng = seeded(seed);
    normal_tensor(&mut rng, (arch.channels, b, arch.image_size, arch.image_size), DType::F32, &Device::Cpu).unwrap()
}

#[test]
fn init_is_seed_deterministic() {
    let a = small_system(3);
    let b = small_system(3);
    let c = small_system(4);
    assert_eq!(a.denoiser_hash().unwrap(), b.denoiser_hash().unwrap());
    assert_eq!(a.encoder_hash().unwrap(), b.encoder_hash().unwrap());
    assert_ne!(a.denoiser_hash().unwrap(), c.denoiser_hash().unwrap());
    assert!(a.all_finite().unwrap());
}

#[test]
fn parameter_count_matches_closed_form() {
    let arch = ArchConfig {
        widths: vec![16, 32, 64],
        ..ArchConfig::default()
    };
    let g = init_denoiser(&arch, &mut seeded(0)).unwrap();
    // walk the construction by hand: D = 128 embedding, F = 32 sinusoids,
    // P = 3 * 4 * 4 = 48 patch channels
    let (d, f, p) = (128usize, 32usize, 48usize);
    let conv3 = |ci: usize, co: usize| co * ci * 9 + co;
    let lin = |di: usize, dout: usize| di * dout + dout;
    let norm = |c: usize| 2 * c;
    let res = |ci: usize, co: usize| {
        norm(ci) + conv3(ci, co) + lin(d, co) + norm(co) + conv3(co, co) + if ci != co { ci * co + co } else { 0 }
    };
    let expected = lin(f, d) + lin(d, d)      // timestep MLP
        + 2 * d                                 // null + class token rows
        + conv3(p, 16)                          // stem
        + res(16, 16) + res(16, 32) + res(32, 64)
        + res(64, 64)                           // middle
        + res(64 + 32, 32) + res(32 + 16, 16)   // decoder
        + norm(16) + conv3(16 + p, p); // head, with the input skip
    assert_eq!(g.params.param_count(), expected);
    assert_eq!(expected, 286_064);
}

#[test]
fn single_level_rejected() {
    let arch = ArchConfig {
        widths: vec![32],
        ..ArchConfig::default()
    };
    assert!(matches!(init_denoiser(&arch, &mut seeded(0)), Err(Error::InvalidArgument(_))));
    assert!(matches!(init_encoder(&arch, &mut seeded(0)), Err(Error::InvalidArgument(_))));
}

#[test]
fn encoder_projections_start_at_zero() {
    for seed in [0, 1, 99] {
        let e = init_encoder(&small_arch(), &mut seeded(seed)).unwrap();
        for name in e.projection_names() {
            let t = e.params.get(&name).unwrap();
            let max = t.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(max, 0.0, "{name}");
        }
    }
    let a = init_encoder(&small_arch(), &mut seeded(5)).unwrap();
    let b = init_encoder(&small_arch(), &mut seeded(5)).unwrap();
    assert_eq!(a.params.content_hash().unwrap(), b.params.content_hash().unwrap());
}

#[test]
fn mismatched_architectures_rejected() {
    let g = init_denoiser(&small_arch(), &mut seeded(0)).unwrap();
    let other = ArchConfig {
        widths: vec![8, 24],
        ..small_arch()
    };
    let e = init_encoder(&other, &mut seeded(0)).unwrap();
    let s = make_schedule(10, ScheduleKind::Cosine).unwrap();
    assert!(matches!(RestorationSystem::new(g, e, s), Err(Error::InvalidArgument(_))));
}

#[test]
fn fresh_encoder_features_are_zero_and_shaped_per_level() {
    let sys = small_system(1);
    let cond = noisy(2, 3, sys.arch());
    let f = sys.encode(&cond, 4).unwrap();
    assert_eq!(f.maps.len(), 2);
    assert_eq!(f.maps[0].dims4().unwrap(), (8, 3, 8, 8));
    assert_eq!(f.maps[1].dims4().unwrap(), (16, 3, 4, 4));
    for m in &f.maps {
        assert!(to_vec(m).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn encode_rejects_wrong_image_size() {
    let sys = small_system(1);
    let img = Image::filled(12, 12, 3, 0.5);
    assert!(matches!(sys.encode_images(&[img], 1), Err(Error::InvalidArgument(_))));
}

#[test]
fn encode_batch_preserves_order() {
    let mut sys = small_system(1);
    // give the projections weight so features are nonzero
    for name in sys.encoder.projection_names() {
        let t = sys.encoder.params.get(&name).unwrap();
        let mut rng = seeded(11);
        let r = normal_tensor(&mut rng, t.shape().clone(), DType::F32, &Device::Cpu).unwrap();
        sys.encoder.params.insert(name, r).unwrap();
    }
    let cond = noisy(3, 4, sys.arch());
    let all = sys.encode(&cond, 5).unwrap();
    assert_eq!(all.batch_size().unwrap(), 4);
    for i in 0..4 {
        let one = sys.encode(&cond.narrow(1, i, 1).unwrap(), 5).unwrap();
        for (a, b) in all.narrow(i, 1).unwrap().maps.iter().zip(one.maps.iter()) {
            let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert!(d < 1e-4, "item {i} differs by {d}");
        }
    }
    let a = sys.encode(&cond.narrow(1, 0, 1).unwrap(), 5).unwrap();
    let b = sys.encode(&cond.narrow(1, 1, 1).unwrap(), 5).unwrap();
    let gap: f32 = a
        .maps
        .iter()
        .zip(&b.maps)
        .map(|(x, y)| (x - y).unwrap().sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap())
        .sum();
    assert!(gap > 0.0);
}

#[test]
fn zero_init_guidance_is_a_no_op() {
    let sys = small_system(7);
    let x = noisy(8, 2, sys.arch());
    let cond = noisy(9, 2, sys.arch());
    let st = crate::schedule::NoisyState { x_t: x, t: 6 };
    let f = sys.encode(&cond, 6).unwrap();
    let with = sys.denoise(&st, CLASS_TOKEN, Some(&f)).unwrap();
    let without = sys.denoise(&st, CLASS_TOKEN, None).unwrap();
    assert_eq!(with.dims(), st.x_t.dims());
    assert_eq!(bits(&with), bits(&without));
    let again = sys.denoise(&st, CLASS_TOKEN, Some(&f)).unwrap();
    assert_eq!(bits(&with), bits(&again));
}

#[test]
fn unknown_token_rejected() {
    let sys = small_system(7);
    let st = crate::schedule::NoisyState {
        x_t: noisy(1, 1, sys.arch()),
        t: 2,
    };
    assert!(matches!(sys.denoise(&st, TokenId(9), None), Err(Error::UnknownToken(_))));
    assert!(matches!(sys.token("nobody"), Err(Error::UnknownToken(_))));
}

#[test]
fn identity_token_copy_conflict_and_isolation() {
    let mut sys = small_system(7);
    let st = crate::schedule::NoisyState {
        x_t: noisy(1, 2, sys.arch()),
        t: 3,
    };
    let before_class = bits(&sys.denoise(&st, CLASS_TOKEN, None).unwrap());
    let before_null = bits(&sys.denoise(&st, NULL_TOKEN, None).unwrap());
    let table_before = bits(&sys.denoiser.params.get("tokens").unwrap());
    let id = sys.add_identity_token("v1", TokenInit::ClassCopy, &mut seeded(0)).unwrap();
    assert_eq!(id, TokenId(2));
    assert_eq!(
        bits(&sys.denoiser.token_embedding(id).unwrap()),
        bits(&sys.denoiser.token_embedding(CLASS_TOKEN).unwrap())
    );
    let table_after = bits(&sys.denoiser.params.get("tokens").unwrap());
    assert_eq!(&table_after[..table_before.len()], &table_before[..]);
    assert_eq!(bits(&sys.denoise(&st, CLASS_TOKEN, None).unwrap()), before_class);
    assert_eq!(bits(&sys.denoise(&st, NULL_TOKEN, None).unwrap()), before_null);
    assert!(matches!(
        sys.add_identity_token("v1", TokenInit::ClassCopy, &mut seeded(0)),
        Err(Error::Conflict(_))
    ));
    let r = sys.add_identity_token("v2", TokenInit::Random, &mut seeded(0)).unwrap();
    assert_eq!(sys.token("v2").unwrap(), r);
}

#[test]
fn checkpoint_round_trip_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let mut sys = small_system(12);
    sys.add_identity_token("v1", TokenInit::ClassCopy, &mut seeded(0)).unwrap();
    let path = dir.path().join("sys.safetensors");
    let manifest = save_system(&sys, &path).unwrap();
    assert_eq!(manifest.version, CHECKPOINT_VERSION);
    let back = load_system(&path).unwrap();
    assert_eq!(back.denoiser_hash().unwrap(), sys.denoiser_hash().unwrap());
    assert_eq!(back.encoder_hash().unwrap(), sys.encoder_hash().unwrap());
    assert_eq!(back.token_map(), sys.token_map());
    assert_eq!(back.schedule().spec(), sys.schedule().spec());

    // corrupt one byte of payload: hash check must fail
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0x40;
    let bad = dir.path().join("bad.safetensors");
    std::fs::write(&bad, &bytes).unwrap();
    assert!(matches!(load_system(&bad), Err(Error::Checkpoint { .. })));
}

#[test]
fn deep_clone_does_not_alias() {
    let sys = small_system(1);
    let copy = sys.deep_clone().unwrap();
    let h = sys.denoiser_hash().unwrap();
    let v = copy.denoiser.params.var("in.b").unwrap();
    v.set(&(v.as_tensor() + 1.0).unwrap()).unwrap();
    assert_eq!(sys.denoiser_hash().unwrap(), h);
    assert_ne!(copy.denoiser_hash().unwrap(), h);
}
