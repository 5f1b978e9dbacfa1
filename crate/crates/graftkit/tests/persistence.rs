//! On-disk format checks: bit-exact round trips, integrity failures, and
//! artifact-kind confusion.

use graftkit::diffusion::{BlobDataset, NoiseSchedule};
use graftkit::graft::capture_activations;
use graftkit::model::{build_model, CaptureTarget, DiTConfig, Slot};
use graftkit::params::Binding;
use graftkit::persistence::{
    decode_container, encode_container, load_activations, load_checkpoint, load_dataset,
    save_activations, save_checkpoint, save_dataset, Manifest,
};
use graftkit::rng::Rng;
use graftkit::tensor::{Buf, Tensor};
use graftkit::{DType, Error};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};

static DIR_SEQ: AtomicU64 = AtomicU64::new(0);

fn scratch_dir() -> PathBuf {
    let dir = std::env::temp_dir().join(format!(
        "graftkit-persist-{}-{}",
        std::process::id(),
        DIR_SEQ.fetch_add(1, Ordering::Relaxed)
    ));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn container_reencode_is_byte_identical() {
    let mut rng = Rng::new(1);
    let tensors = vec![
        (
            "a".to_string(),
            vec![2, 3],
            Buf::F32(Tensor::randn(&[2, 3], 1.0, &mut rng, DType::F32).buf().as_f32().to_vec()),
        ),
        (
            "b.weights".to_string(),
            vec![4],
            Buf::F64(rng.normal_vec(4, 1.0)),
        ),
    ];
    let bytes = encode_container(&tensors);
    let decoded = decode_container(&bytes, "mem").unwrap();
    assert_eq!(decoded.len(), 2);
    assert_eq!(decoded[0].0, "a");
    assert_eq!(decoded[1].1, vec![4]);
    let reencoded = encode_container(&decoded);
    assert_eq!(bytes, reencoded);
}

#[test]
fn truncated_container_reports_format_error() {
    let tensors = vec![("t".to_string(), vec![4], Buf::F32(vec![1.0; 4]))];
    let bytes = encode_container(&tensors);
    match decode_container(&bytes[..bytes.len() - 3], "mem") {
        Err(Error::Format { reason, .. }) => assert!(reason.contains("truncated")),
        other => panic!("expected Format error, got {other:?}"),
    }
}

#[test]
fn checkpoint_roundtrip_preserves_forward_outputs_bitwise() {
    let dir = scratch_dir();
    let cfg = DiTConfig::xs(5);
    let model = build_model(&cfg).unwrap();
    let path = dir.join("teacher.grft");
    save_checkpoint(&model, &path).unwrap();

    // Manifest echoes the structure, including depth.
    let manifest: Manifest =
        serde_json::from_slice(&std::fs::read(dir.join("teacher.grft.json")).unwrap()).unwrap();
    assert_eq!(manifest.kind, "checkpoint");
    assert_eq!(manifest.config["config"]["depth"], 8);

    let loaded = load_checkpoint(&path).unwrap();
    let mut rng = Rng::new(6);
    let z = Tensor::randn(&[2, 1, 16, 16], 1.0, &mut rng, DType::F32);
    let ts = vec![10, 500];
    let cs = vec![0, 7];
    let y0 = model.forward(&Binding::frozen(), &z, &ts, &cs).unwrap();
    let y1 = loaded.forward(&Binding::frozen(), &z, &ts, &cs).unwrap();
    assert_eq!(y0.buf().as_f32(), y1.buf().as_f32());
}

#[test]
fn rewired_checkpoint_roundtrips_too() {
    let dir = scratch_dir();
    let model = build_model(&DiTConfig::xs(7)).unwrap().parallelize_pairs().unwrap();
    let path = dir.join("wide.grft");
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.effective_depth(), 4);
    let mut rng = Rng::new(8);
    let z = Tensor::randn(&[1, 1, 16, 16], 1.0, &mut rng, DType::F32);
    let y0 = model.forward(&Binding::frozen(), &z, &[3], &[2]).unwrap();
    let y1 = loaded.forward(&Binding::frozen(), &z, &[3], &[2]).unwrap();
    assert_eq!(y0.buf().as_f32(), y1.buf().as_f32());
}

#[test]
fn corrupted_payload_byte_fails_the_hash_check() {
    let dir = scratch_dir();
    let model = build_model(&DiTConfig::xs(9)).unwrap();
    let path = dir.join("ckpt.grft");
    save_checkpoint(&model, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    match load_checkpoint(&path) {
        Err(Error::HashMismatch { .. }) => {}
        other => panic!("expected HashMismatch, got {other:?}"),
    }
}

#[test]
fn version_mismatch_is_reported_distinctly() {
    let dir = scratch_dir();
    let model = build_model(&DiTConfig::xs(10)).unwrap();
    let path = dir.join("ckpt.grft");
    save_checkpoint(&model, &path).unwrap();
    let mpath = dir.join("ckpt.grft.json");
    let mut manifest: Manifest =
        serde_json::from_slice(&std::fs::read(&mpath).unwrap()).unwrap();
    manifest.format_version = 99;
    std::fs::write(&mpath, serde_json::to_vec(&manifest).unwrap()).unwrap();
    match load_checkpoint(&path) {
        Err(Error::VersionMismatch { found: 99, .. }) => {}
        other => panic!("expected VersionMismatch, got {other:?}"),
    }
}

#[test]
fn loading_activations_as_checkpoint_is_a_kind_error() {
    let dir = scratch_dir();
    let cfg = DiTConfig {
        depth: 2,
        dim: 16,
        heads: 2,
        patch: 4,
        ..DiTConfig::xs(11)
    };
    let teacher = build_model(&cfg).unwrap();
    let data = BlobDataset::generate(12, 32);
    let s = NoiseSchedule::default();
    let acts = capture_activations(
        &teacher,
        &data,
        &s,
        &CaptureTarget::Operator { layer: 0, slot: Slot::Mha, modulation_aware: false },
        8,
        13,
    )
    .unwrap();
    let path = dir.join("acts.grft");
    save_activations(&acts, &path).unwrap();
    match load_checkpoint(&path) {
        Err(Error::KindMismatch { expected, found, .. }) => {
            assert_eq!(expected, "checkpoint");
            assert_eq!(found, "activations");
        }
        other => panic!("expected KindMismatch, got {other:?}"),
    }
}

#[test]
fn activation_roundtrip_is_byte_identical_on_disk() {
    let dir = scratch_dir();
    let cfg = DiTConfig {
        depth: 2,
        dim: 16,
        heads: 2,
        patch: 4,
        ..DiTConfig::xs(14)
    };
    let teacher = build_model(&cfg).unwrap();
    let data = BlobDataset::generate(15, 32);
    let s = NoiseSchedule::default();
    let acts = capture_activations(
        &teacher,
        &data,
        &s,
        &CaptureTarget::Operator { layer: 1, slot: Slot::Mlp, modulation_aware: false },
        12,
        16,
    )
    .unwrap();
    let p1 = dir.join("a1.grft");
    save_activations(&acts, &p1).unwrap();
    let loaded = load_activations(&p1).unwrap();
    assert_eq!(loaded.len(), acts.len());
    assert_eq!(loaded.inputs_raw(), acts.inputs_raw());
    assert_eq!(loaded.ts_raw(), acts.ts_raw());
    let p2 = dir.join("a2.grft");
    save_activations(&loaded, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn empty_activation_save_rejected() {
    // Construction itself refuses inconsistent parts; an empty set is
    // refused at save time.
    let acts = graftkit::graft::ActivationDataset::from_parts(
        0,
        graftkit::graft::CaptureSlot::Mha,
        false,
        "none".into(),
        4,
        4,
        vec![],
        vec![],
        vec![],
        vec![],
    )
    .unwrap();
    let dir = scratch_dir();
    assert!(save_activations(&acts, &dir.join("empty.grft")).is_err());
}

#[test]
fn dataset_roundtrip_and_manifest_seed() {
    let dir = scratch_dir();
    let data = BlobDataset::generate(99, 64);
    let path = dir.join("data.grft");
    save_dataset(&data, &path).unwrap();
    let manifest: Manifest =
        serde_json::from_slice(&std::fs::read(dir.join("data.grft.json")).unwrap()).unwrap();
    assert_eq!(manifest.config["seed"], 99);
    assert_eq!(manifest.config["size"], 64);
    let loaded = load_dataset(&path).unwrap();
    assert_eq!(loaded.pixels(), data.pixels());
    assert_eq!(loaded.labels(), data.labels());
    // Saving the loaded copy reproduces the same bytes.
    let p2 = dir.join("data2.grft");
    save_dataset(&loaded, &p2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&p2).unwrap());
}
