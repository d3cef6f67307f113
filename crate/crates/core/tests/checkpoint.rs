use proptest::prelude::*;
use slens::checkpoint::{Dtype, SafetensorsWriter, TensorStore, PRESETS};
use slens::synth::{gen_planted_model, PlantedSpec};
use slens::{load_model_bundle, Error, ModelSpec};

fn tensor_strategy() -> impl Strategy<Value = (String, Vec<usize>, Vec<f32>)> {
    (prop::collection::vec(1usize..5, 1..4), "[a-z]{1,6}(\\.[a-z0-9]{1,4}){0,2}").prop_flat_map(|(shape, name)| {
        let n: usize = shape.iter().product();
        (Just(name), Just(shape), prop::collection::vec(-1e6f32..1e6, n))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn write_parse_round_trip(tensors in prop::collection::vec(tensor_strategy(), 1..6)) {
        let mut w = SafetensorsWriter::new();
        let mut seen = std::collections::BTreeMap::new();
        for (name, shape, vals) in &tensors {
            if seen.contains_key(name) {
                continue;
            }
            w.add_f32(name, shape.clone(), vals).unwrap();
            seen.insert(name.clone(), (shape.clone(), vals.clone()));
        }
        w.metadata("format", "pt");
        let bytes = w.finish();
        let store = TensorStore::parse(bytes.clone()).unwrap();
        prop_assert_eq!(store.len(), seen.len());
        for (name, (shape, vals)) in &seen {
            let v = store.get(name).unwrap();
            prop_assert_eq!(v.shape(), shape.as_slice());
            prop_assert_eq!(v.dtype(), Dtype::F32);
            prop_assert_eq!(&v.to_f32().unwrap(), vals);
        }
        // Re-serializing is a fixed point.
        prop_assert_eq!(store.serialize(), TensorStore::parse(store.serialize()).unwrap().serialize());
    }

    #[test]
    fn garbage_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = TensorStore::parse(bytes);
    }

    #[test]
    fn truncation_is_a_format_error(cut in 0usize..1000) {
        let mut w = SafetensorsWriter::new();
        w.add_f32("a", vec![4, 4], &[1.0; 16]).unwrap();
        w.add_f32("b", vec![8], &[2.0; 8]).unwrap();
        let bytes = w.finish();
        let cut = cut % bytes.len();
        let r = TensorStore::parse(bytes[..cut].to_vec());
        prop_assert!(matches!(r, Err(Error::Format { .. })), "cut at {} gave {:?}", cut, r.map(|s| s.len()));
    }
}

fn raw_file(header: &str, data: &[u8]) -> Vec<u8> {
    let mut out = (header.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(data);
    out
}

#[test]
fn half_precision_decodes() {
    let f16 = half::f16::from_f32(1.5).to_le_bytes();
    let bf16 = half::bf16::from_f32(-2.0).to_le_bytes();
    let header = r#"{"h":{"dtype":"F16","shape":[1],"data_offsets":[0,2]},"b":{"dtype":"BF16","shape":[1],"data_offsets":[2,4]}}"#;
    let store = TensorStore::parse(raw_file(header, &[f16[0], f16[1], bf16[0], bf16[1]])).unwrap();
    assert_eq!(store.get("h").unwrap().to_f32().unwrap(), vec![1.5]);
    assert_eq!(store.get("b").unwrap().to_f32().unwrap(), vec![-2.0]);
}

#[test]
fn scalar_and_integer_tensors() {
    let header = r#"{"s":{"dtype":"F32","shape":[],"data_offsets":[0,4]},"i":{"dtype":"I64","shape":[1],"data_offsets":[4,12]}}"#;
    let mut data = 3.0f32.to_le_bytes().to_vec();
    data.extend_from_slice(&7i64.to_le_bytes());
    let store = TensorStore::parse(raw_file(header, &data)).unwrap();
    assert_eq!(store.get("s").unwrap().shape(), &[1]);
    assert!(matches!(store.get("i").unwrap().to_f32(), Err(Error::UnsupportedDtype(_))));
}

#[test]
fn bad_headers_are_rejected() {
    let cases = [
        r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,4]}}"#,
        r#"{"a":{"dtype":"Q4","shape":[1],"data_offsets":[0,4]}}"#,
        r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"b":{"dtype":"F32","shape":[1],"data_offsets":[2,6]}}"#,
        r#"not json"#,
    ];
    for h in cases {
        let r = TensorStore::parse(raw_file(h, &[0u8; 8]));
        assert!(matches!(r, Err(Error::Format { .. }) | Err(Error::UnsupportedDtype(_))), "{h}");
    }
}

#[test]
fn presets_parse_and_validate() {
    for (name, _) in PRESETS {
        let spec = ModelSpec::preset(name).unwrap();
        spec.validate().unwrap();
        assert_eq!(ModelSpec::from_json_str(&spec.to_json()).unwrap().to_json(), spec.to_json());
    }
    assert!(ModelSpec::preset("no-such-model").is_err());
}

#[test]
fn bundle_loads_from_generated_checkpoint_and_reports_missing_names() {
    let m = gen_planted_model(&PlantedSpec::new(32, 64, 4, 16, 1, 2, 50.0, -1.0, 0), 0).unwrap();
    let store = m.store().unwrap();
    let b = load_model_bundle(&m.spec, &[store]).unwrap();
    assert_eq!((b.d(), b.n_layers()), (32, 4));

    // Drop one tensor: the bundle must name it.
    let full = m.store().unwrap();
    let mut w = SafetensorsWriter::new();
    for t in full.tensors().filter(|t| t.name != "layers.3.mlp.w2.weight") {
        w.add_raw(t.name, t.dtype(), t.shape().to_vec(), t.bytes.to_vec()).unwrap();
    }
    let partial = TensorStore::parse(w.finish()).unwrap();
    match load_model_bundle(&m.spec, &[partial]) {
        Err(Error::Resolution(names)) => assert!(names.iter().any(|n| n.contains("layers.3.mlp.w2")), "{names:?}"),
        other => panic!("expected a resolution error, got {:?}", other.map(|b| b.n_layers())),
    }
}

#[test]
fn sharded_checkpoints_merge() {
    let m = gen_planted_model(&PlantedSpec::new(32, 64, 4, 16, 1, 2, 50.0, -1.0, 0), 0).unwrap();
    let full = m.store().unwrap();
    let (mut a, mut b) = (SafetensorsWriter::new(), SafetensorsWriter::new());
    for (i, t) in full.tensors().enumerate() {
        let w = if i % 2 == 0 { &mut a } else { &mut b };
        w.add_raw(t.name, t.dtype(), t.shape().to_vec(), t.bytes.to_vec()).unwrap();
    }
    let shards = [TensorStore::parse(a.finish()).unwrap(), TensorStore::parse(b.finish()).unwrap()];
    let merged = load_model_bundle(&m.spec, &shards).unwrap();
    let whole = m.bundle().unwrap();
    assert_eq!(merged.layers[2].w2, whole.layers[2].w2);
}
