use ndcore::{Container, ParameterTree, Tensor};
use proptest::prelude::*;

fn tensor_strategy() -> impl Strategy<Value = Tensor<f32>> {
    prop::collection::vec(1usize..5, 1..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), n)
            .prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
    })
}

proptest! {
    #[test]
    fn container_round_trip_is_bit_exact(tensors in prop::collection::vec(tensor_strategy(), 1..5)) {
        let mut c = Container::new(serde_json::json!({"seed": 7}));
        for (i, t) in tensors.iter().enumerate() {
            c.push(format!("t{i}"), t.clone());
        }
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        prop_assert_eq!(back.tensors.len(), tensors.len());
        for ((_, a, _), b) in back.tensors.iter().zip(&tensors) {
            prop_assert_eq!(a.shape(), b.shape());
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        prop_assert_eq!(back.meta, serde_json::json!({"seed": 7}));
    }
}

#[test]
fn parameter_tree_file_round_trip_keeps_flags_and_bits() {
    let mut tree = ParameterTree::<f32>::new();
    tree.insert("a.weight", Tensor::from_fn(&[3, 2], |i| (i as f32).sin() * 1e-3), true).unwrap();
    tree.insert("b.bias", Tensor::from_fn(&[4], |i| -(i as f32) / 7.0), false).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("params.ndt");
    tree.save(&path, serde_json::json!({"kind": "unet"})).unwrap();
    let (back, meta) = ParameterTree::<f32>::load(&path).unwrap();
    assert_eq!(meta["kind"], "unet");
    assert_eq!(back.canonical_bytes(), tree.canonical_bytes());
    assert!(!back.get("b.bias").unwrap().trainable);
    assert!(back.get("a.weight").unwrap().trainable);
}
