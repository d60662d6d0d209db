//! Property-based invariants over randomized inputs.

use std::collections::BTreeSet;

use proptest::prelude::*;

use protoshot::augment::mixup;
use protoshot::dataset::{split_longtail, LabeledExample, LongTailDataset};
use protoshot::eval::aggregate;
use protoshot::tensor::Payload;

fn dataset_from_sizes(sizes: &[usize]) -> LongTailDataset {
    let mut examples = Vec::new();
    for (c, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            examples.push(LabeledExample {
                source_id: format!("c{c}_{i}"),
                label: format!("class{c:02}"),
                payload: Payload::Features(vec![c as f32, i as f32]),
            });
        }
    }
    LongTailDataset::from_examples(examples).unwrap()
}

proptest! {
    // The three partition buckets are pairwise disjoint, cover every
    // non-excluded class, and each class lands in the bucket its size dictates.
    #[test]
    fn partition_is_disjoint_and_exhaustive(
        sizes in proptest::collection::vec(1usize..60, 2..12),
        novel_max in 2usize..20,
        extra in 1usize..20,
    ) {
        let val_max = novel_max + extra;
        let data = dataset_from_sizes(&sizes);
        let part = split_longtail(&data, novel_max, val_max, &[]).unwrap();

        let mut seen = BTreeSet::new();
        for bucket in [&part.base_train, &part.base_val, &part.novel] {
            for label in bucket {
                prop_assert!(seen.insert(label.clone()), "class {label} in two buckets");
            }
        }
        prop_assert_eq!(seen.len(), sizes.len());

        for (c, &n) in sizes.iter().enumerate() {
            let label = format!("class{c:02}");
            let expected = if n < novel_max {
                &part.novel
            } else if n <= val_max {
                &part.base_val
            } else {
                &part.base_train
            };
            prop_assert!(expected.contains(&label), "class {} (size {}) misplaced", label, n);
        }
    }

    // Mixup output is the exact convex blend of inputs, and the soft label is
    // a probability vector concentrated on the two source classes.
    #[test]
    fn mixup_blend_is_convex_and_label_normalized(
        a in proptest::collection::vec(-10.0f32..10.0, 4..32),
        lambda in 0.0f64..=1.0,
        y_a in 0usize..5,
        y_b in 0usize..5,
    ) {
        let b: Vec<f32> = a.iter().map(|x| x * 0.5 + 1.0).collect();
        let pa = Payload::Features(a.clone());
        let pb = Payload::Features(b.clone());
        let mixed = mixup(&pa, y_a, &pb, y_b, 5, lambda).unwrap();

        for ((m, &xa), &xb) in mixed.payload.values().iter().zip(&a).zip(&b) {
            let expect = lambda * xa as f64 + (1.0 - lambda) * xb as f64;
            prop_assert!((*m as f64 - expect).abs() < 1e-5);
        }
        let sum: f64 = mixed.soft_label.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        for (k, &w) in mixed.soft_label.iter().enumerate() {
            prop_assert!(w >= 0.0);
            if k != y_a && k != y_b {
                prop_assert_eq!(w, 0.0);
            }
        }
    }

    // Aggregation: mean lies within the sample hull; half-width is
    // non-negative and absent only for E < 2.
    #[test]
    fn aggregate_mean_in_hull(values in proptest::collection::vec(0.0f64..=1.0, 1..200)) {
        let (mean, hw) = aggregate(&values);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(mean >= lo - 1e-12 && mean <= hi + 1e-12);
        match hw {
            Some(h) => {
                prop_assert!(values.len() >= 2);
                prop_assert!(h >= 0.0);
            }
            None => prop_assert_eq!(values.len(), 1),
        }
    }
}
