use combinet_core::data::{make_slice, slice_grid, synth_dataset, LabeledDataset, SynthSpec};
use combinet_core::Tensor;
use proptest::prelude::*;

fn two_classes(n0: usize, n1: usize) -> LabeledDataset {
    let images = (0..n0 + n1).map(|i| Tensor::scalar(i as f32)).collect();
    let labels = (0..n0 + n1).map(|i| usize::from(i >= n0)).rev().collect();
    LabeledDataset::new(images, labels, vec!["a".into(), "b".into()], "toy").unwrap()
}

proptest! {
    #[test]
    fn slices_stay_in_class(n0 in 1usize..60, n1 in 1usize..60, seed in any::<u64>(), raw in prop::collection::vec(1usize..60, 1..4)) {
        let d = two_classes(n0, n1);
        let members = d.indices_of(1);
        let sizes: Vec<usize> = raw.iter().map(|s| 1 + s % members.len()).collect();
        for spec in slice_grid(1, &sizes, 3, seed) {
            let s = make_slice(&d, spec).unwrap();
            prop_assert_eq!(s.indices.len(), spec.size);
            let mut sorted = s.indices.clone();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), spec.size);
            prop_assert!(s.indices.iter().all(|i| members.contains(i)));
            prop_assert_eq!(make_slice(&d, spec).unwrap(), s);
        }
    }
}

#[test]
fn blend_sits_between_its_parents() {
    let base = |classes| SynthSpec::ShapeTemplates {
        classes,
        per_class: 1,
        shape: vec![1, 6, 6],
        noise: 0.0,
        template_seed: 4,
        max_shift: 0,
    };
    let parents = synth_dataset(&base(5), 0).unwrap();
    let blend = synth_dataset(
        &SynthSpec::Blend {
            classes: 5,
            shape: vec![1, 6, 6],
            noise: 0.0,
            template_seed: 4,
            max_shift: 0,
            class_a: 1,
            class_b: 3,
            weight: 0.25,
            count: 3,
            label: "mix".into(),
        },
        0,
    )
    .unwrap();
    assert_eq!(blend.class_names, ["mix"]);
    let (a, b) = (&parents.images_of(1)[0], &parents.images_of(3)[0]);
    for x in &blend.images {
        for ((v, p), q) in x.data().iter().zip(a.data()).zip(b.data()) {
            assert!((v - (0.25 * p + 0.75 * q)).abs() < 1e-6);
        }
    }
}
