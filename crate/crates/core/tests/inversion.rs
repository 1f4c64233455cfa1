mod common;

use common::*;
use dragedit_core::backend::{Denoiser, RiggedDenoiser};
use dragedit_core::bank::{read_bank, write_bank, Manifest};
use dragedit_core::guidance::GuidanceConfig;
use dragedit_core::inversion::{invert, InversionInput};
use dragedit_core::mask::Mask;
use dragedit_core::sampler::{NoObserver, Sampler};
use dragedit_core::tasks::{build_moving, Offset};
use dragedit_core::tensor::Latent;
use ndarray::Array3;

#[test]
fn zero_noise_inversion_only_rescales() {
    let rig = RiggedDenoiser::zero();
    let s = schedule(&rig, 20);
    let z0 = random_latent(1);
    let bank = invert(
        &rig,
        &s,
        InversionInput {
            z0: &z0,
            z0_ref: None,
            prompt: "",
        },
    )
    .unwrap();
    for t in 1..=20 {
        let ratio = (s.alpha_bar(t).unwrap() / s.alpha_bar(t - 1).unwrap()).sqrt();
        let prev = if t == 1 { z0.clone() } else { bank.lookup(t - 1).unwrap().z_gud.clone() };
        let expected = Latent::new(&prev.data * ratio);
        assert!(bank.lookup(t).unwrap().z_gud.max_abs_diff(&expected) < 1e-14);
    }
    let z_t = Latent::new(&z0.data * s.alpha_bar(20).unwrap().sqrt());
    assert!(bank.z_t_gen.max_abs_diff(&z_t) < 1e-13);
}

#[test]
fn reference_stream_mirrors_token_counts() {
    let b = toy();
    let bank = bank(&b, 10, 4, true);
    assert!(bank.has_reference);
    for e in bank.entries() {
        let kv_ref = e.kv_ref.as_ref().unwrap();
        assert_eq!(kv_ref.token_counts(), e.kv_gud.token_counts());
        assert_eq!(e.kv_gud.token_counts(), vec![4, 16, 64, 256]);
    }
}

#[test]
fn inversion_is_bitwise_deterministic() {
    let b = toy();
    let a = bank(&b, 8, 2, true);
    let c = bank(&b, 8, 2, true);
    assert_eq!(a, c);
}

#[test]
fn lookup_is_total_on_one_to_t() {
    let b = toy();
    let bank = bank(&b, 6, 3, false);
    assert_eq!(bank.steps(), 6);
    assert_eq!(bank.lookup(6).unwrap().z_gud, bank.z_t_gen);
    assert_eq!(bank.lookup(0).unwrap_err().field(), Some("t"));
    assert_eq!(bank.lookup(7).unwrap_err().field(), Some("t"));
}

#[test]
fn mismatched_reference_shape_is_rejected() {
    let b = toy();
    let z0 = random_latent(0);
    let wrong = Latent::new(Array3::zeros((4, 8, 8)));
    let err = invert(
        &b,
        &schedule(&b, 4),
        InversionInput {
            z0: &z0,
            z0_ref: Some(&wrong),
            prompt: "",
        },
    )
    .unwrap_err();
    assert_eq!(err.field(), Some("z0_ref"));
}

#[test]
fn bank_container_round_trips_bitwise() {
    let b = toy();
    let bank = bank(&b, 5, 9, true);
    let dir = tempfile::tempdir().unwrap();
    write_bank(&bank, dir.path()).unwrap();
    let manifest = Manifest::read(dir.path()).unwrap();
    assert_eq!(manifest.steps, 5);
    assert_eq!(manifest.profile_hash, b.profile().hash());
    assert!(manifest.has_reference);
    let back = read_bank(dir.path()).unwrap();
    assert_eq!(back, bank);
    for t in 1..=5 {
        assert_eq!(back.lookup(t).unwrap(), bank.lookup(t).unwrap());
    }
}

#[test]
fn corrupted_blob_is_a_format_error() {
    let b = toy();
    let bank = bank(&b, 3, 1, false);
    let dir = tempfile::tempdir().unwrap();
    write_bank(&bank, dir.path()).unwrap();
    let path = dir.path().join("step_0002.bin");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(
        read_bank(dir.path()),
        Err(dragedit_core::Error::Format(_))
    ));
}

#[test]
fn invert_then_sample_reconstructs() {
    let b = toy();
    let s = schedule(&b, 50);
    let spec = build_moving(&Mask::rect(N, N, 4, 4, 8, 8), Offset::default(), None).unwrap();
    let cfg = GuidanceConfig {
        n_gated: 0,
        cfg_scale: 1.0,
        ..GuidanceConfig::for_spec(&spec).unwrap()
    };
    for seed in 20..23 {
        let bank = bank(&b, 50, seed, false);
        let out = Sampler::new(&b, &s)
            .run_edit(&bank, &spec, &cfg, &mut NoObserver)
            .unwrap();
        let err = out.z0.max_abs_diff(&random_latent(seed));
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}
