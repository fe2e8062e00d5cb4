mod common;

use common::tiny_config;
use fusepose::checkpoint::*;
use fusepose::fusion::PoseModel;
use fusepose::tensor::Tensor;
use proptest::prelude::*;

fn model() -> PoseModel<f32> {
    PoseModel::init(&tiny_config(), 3).unwrap()
}

#[test]
fn round_trip_is_bit_exact() {
    let m = model();
    let buf = encode_checkpoint(&m);
    assert_eq!(&buf[..4], b"FPCK");
    assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), CHECKPOINT_VERSION);
    let back: PoseModel<f32> = decode_checkpoint(&buf).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(back.basis.b, m.basis.b);
    for id in m.store.ids() {
        assert_eq!(back.store.name(id), m.store.name(id));
        assert_eq!(back.store.get(id), m.store.get(id));
    }
    assert_eq!(encode_checkpoint(&back), buf);
}

#[test]
fn save_and_load_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.fpck");
    let m = model();
    save_checkpoint(&m, &path).unwrap();
    let back: PoseModel<f64> = load_checkpoint(&path).unwrap();
    for id in m.store.ids() {
        assert_eq!(back.store.get(id).cast::<f32>(), *m.store.get(id));
    }
    assert!(matches!(load_checkpoint::<f32>(&dir.path().join("missing")), Err(CheckpointError::Io(_))));
}

#[test]
fn corrupt_inputs_are_rejected() {
    let buf = encode_checkpoint(&model());
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint::<f32>(&bad), Err(CheckpointError::BadMagic)));
    let mut bad = buf.clone();
    bad[4..8].copy_from_slice(&9u32.to_le_bytes());
    assert!(matches!(decode_checkpoint::<f32>(&bad), Err(CheckpointError::Version(9))));
    for cut in [0, 2, 7, 20, buf.len() / 2, buf.len() - 1] {
        assert!(matches!(decode_checkpoint::<f32>(&buf[..cut]), Err(CheckpointError::Truncated)), "cut {cut}");
    }
    let mut bad = buf.clone();
    let mid = buf.len() - 10;
    bad[mid] ^= 0x40;
    assert!(matches!(decode_checkpoint::<f32>(&bad), Err(CheckpointError::Checksum)));
    let mut long = buf.clone();
    long.push(0);
    assert!(decode_checkpoint::<f32>(&long).is_err());
}

#[test]
fn schema_errors() {
    let m = model();
    let config = serde_json::to_string(&m.config).unwrap();
    // Parameters without the basis.
    let arrays: Vec<(String, Tensor<f32>)> = m.store.ids().map(|id| (m.store.name(id).to_string(), m.store.get(id).clone())).collect();
    assert!(matches!(decode_checkpoint::<f32>(&encode_arrays(&config, &arrays)), Err(CheckpointError::Schema(_))));
    assert!(matches!(decode_checkpoint::<f32>(&encode_arrays("{not json", &[])), Err(CheckpointError::Schema(_))));
    // A parameter with the wrong shape.
    let mut arrays = arrays;
    arrays.push(("rff.B".into(), m.basis.b.clone()));
    arrays[0].1 = Tensor::zeros(&[1]);
    assert!(decode_checkpoint::<f32>(&encode_arrays(&config, &arrays)).is_err());
}

proptest! {
    #[test]
    fn arrays_round_trip(shapes in prop::collection::vec(prop::collection::vec(0usize..4, 0..4), 0..5), seed in 0u64..1000) {
        let arrays: Vec<(String, Tensor<f32>)> = shapes.iter().enumerate().map(|(i, s)| {
            (format!("a{i}"), Tensor::from_fn(s, |k| (k as f32 + seed as f32) * 0.37 - 1.0))
        }).collect();
        let buf = encode_arrays("{\"x\":1}", &arrays);
        let (cfg, back) = decode_arrays(&buf).unwrap();
        prop_assert_eq!(cfg, "{\"x\":1}");
        prop_assert_eq!(back, arrays);
    }
}
