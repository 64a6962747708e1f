//! Bit-exact checkpoint round-trips and format error reporting.

use numcore::{checkpoint_bytes, parse_checkpoint, NumError, ParameterSet, TensorBuffer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_params(seed: u64) -> ParameterSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    params.add_weight("pose.lstm.w", 8, 5, &mut rng).unwrap();
    params.add_bias("pose.lstm.b", 8).unwrap();
    params.add_weight("rel.out.w", 3, 4, &mut rng).unwrap();
    params
        .insert(
            "scalarish",
            TensorBuffer::from_values(&[1], vec![rng.random_range(-1.0..1.0)]).unwrap(),
        )
        .unwrap();
    params
}

#[test]
fn roundtrip_is_bit_exact() {
    let params = random_params(42);
    let bytes = checkpoint_bytes(&params);
    let loaded = parse_checkpoint::<f64>(&bytes).unwrap();

    let names: Vec<&str> = params.names().collect();
    let loaded_names: Vec<&str> = loaded.names().collect();
    assert_eq!(names, loaded_names);
    for name in names {
        assert!(
            params.get(name).unwrap().values_bits_eq(loaded.get(name).unwrap()),
            "tensor {name} not bit-identical"
        );
    }

    // serializing again reproduces the same bytes
    let bytes2 = checkpoint_bytes(&loaded);
    assert_eq!(bytes, bytes2);
}

#[test]
fn bad_magic_is_reported_at_offset_zero() {
    let mut bytes = checkpoint_bytes(&random_params(1));
    bytes[0] = b'X';
    match parse_checkpoint::<f64>(&bytes) {
        Err(NumError::CheckpointFormat { offset: 0, .. }) => {}
        other => panic!("expected format error at offset 0, got {other:?}"),
    }
}

#[test]
fn truncation_is_reported_with_offset() {
    let bytes = checkpoint_bytes(&random_params(2));
    let cut = bytes.len() - 5;
    match parse_checkpoint::<f64>(&bytes[..cut]) {
        Err(NumError::CheckpointFormat { offset, details }) => {
            assert!(offset <= cut, "offset {offset} beyond cut {cut}");
            assert!(details.contains("truncated"));
        }
        other => panic!("expected truncation error, got {other:?}"),
    }
}

#[test]
fn empty_set_roundtrips() {
    let params = ParameterSet::<f64>::new();
    let bytes = checkpoint_bytes(&params);
    assert_eq!(bytes.len(), 12); // magic + version
    let loaded = parse_checkpoint::<f64>(&bytes).unwrap();
    assert!(loaded.is_empty());
}

#[test]
fn f32_params_roundtrip_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut params = ParameterSet::<f32>::new();
    params.add_weight("w", 3, 3, &mut rng).unwrap();
    let bytes = checkpoint_bytes(&params);
    let loaded = parse_checkpoint::<f32>(&bytes).unwrap();
    assert!(params.get("w").unwrap().values_bits_eq(loaded.get("w").unwrap()));
}
