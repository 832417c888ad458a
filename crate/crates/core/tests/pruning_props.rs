use proptest::prelude::*;
use rewindlab::engine::{NamedTensor, Tensor};
use rewindlab::prune::{
    decode_mask, encode_mask, prune_structured, prune_unstructured, PruneKind, PruneOptions,
    PruneScope,
};

fn kernels(shapes: &[(usize, usize)], values: &[i8]) -> Vec<NamedTensor> {
    let mut it = values.iter().cycle();
    shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| {
            let data = (0..r * c).map(|_| f32::from(*it.next().unwrap()) / 16.0).collect();
            NamedTensor::new(format!("w{i}"), Tensor::new(vec![r, c], data).unwrap())
        })
        .collect()
}

fn setup() -> impl Strategy<Value = (Vec<NamedTensor>, f64)> {
    (
        prop::collection::vec((1usize..12, 1usize..12), 1..4),
        prop::collection::vec(any::<i8>(), 1..64),
        0.0f64..0.99,
    )
        .prop_map(|(shapes, values, s)| (kernels(&shapes, &values), s))
}

proptest! {
    #[test]
    fn global_count_and_magnitude_order((ks, s) in setup()) {
        let refs: Vec<&NamedTensor> = ks.iter().collect();
        let mask = prune_unstructured(&refs, s, &PruneOptions::default(), None).unwrap();
        let total: usize = ks.iter().map(|k| k.tensor.len()).sum();
        prop_assert_eq!(mask.pruned_count(), (s * total as f64 + 1e-9).floor() as usize);
        let mut max_pruned = f32::NEG_INFINITY;
        let mut min_kept = f32::INFINITY;
        for (k, m) in ks.iter().zip(mask.tensors()) {
            for (w, &keep) in k.tensor.data().iter().zip(&m.keep) {
                if keep { min_kept = min_kept.min(w.abs()) } else { max_pruned = max_pruned.max(w.abs()) }
            }
        }
        prop_assert!(max_pruned <= min_kept);
    }

    #[test]
    fn pruning_further_keeps_earlier_mask((ks, s) in setup(), extra in 0.0f64..0.5) {
        let refs: Vec<&NamedTensor> = ks.iter().collect();
        let opts = PruneOptions::default();
        let first = prune_unstructured(&refs, s * 0.5, &opts, None).unwrap();
        let second = prune_unstructured(&refs, (s * 0.5 + extra).min(0.99), &opts, Some(&first)).unwrap();
        prop_assert!(second.is_subset_of(&first));
    }

    #[test]
    fn per_layer_prunes_each_tensor_to_target((ks, s) in setup()) {
        let refs: Vec<&NamedTensor> = ks.iter().collect();
        let opts = PruneOptions { scope: PruneScope::PerLayer, ..Default::default() };
        let mask = prune_unstructured(&refs, s, &opts, None).unwrap();
        for (k, m) in ks.iter().zip(mask.tensors()) {
            let pruned = m.keep.iter().filter(|&&x| !x).count();
            prop_assert_eq!(pruned, (s * k.tensor.len() as f64 + 1e-9).floor() as usize);
        }
    }

    #[test]
    fn structured_masks_whole_rows((ks, s) in setup()) {
        let refs: Vec<&NamedTensor> = ks.iter().collect();
        let opts = PruneOptions { kind: PruneKind::Structured, ..Default::default() };
        let mask = prune_structured(&refs, s, &opts, None).unwrap();
        prop_assert!(mask.sparsity() + 1e-9 >= s);
        for (k, m) in ks.iter().zip(mask.tensors()) {
            let width = k.tensor.shape()[1];
            for row in m.keep.chunks(width) {
                prop_assert!(row.iter().all(|&x| x) || row.iter().all(|&x| !x));
            }
        }
    }

    #[test]
    fn mask_bytes_round_trip((ks, s) in setup()) {
        let refs: Vec<&NamedTensor> = ks.iter().collect();
        let mask = prune_unstructured(&refs, s, &PruneOptions::default(), None).unwrap();
        let back = decode_mask(&encode_mask(&mask), std::path::Path::new("m")).unwrap();
        prop_assert_eq!(back, mask);
    }
}

#[test]
fn exempt_tensors_are_untouched() {
    let ks = kernels(&[(4, 4), (4, 4)], &[1, -3, 7, 2, -9, 5]);
    let refs: Vec<&NamedTensor> = ks.iter().collect();
    let opts = PruneOptions {
        exempt: vec!["w0".into()],
        ..Default::default()
    };
    let mask = prune_unstructured(&refs, 0.4, &opts, None).unwrap();
    assert!(mask.tensors()[0].keep.iter().all(|&k| k));
    assert_eq!(mask.pruned_count(), 12);
}

#[test]
fn corrupt_mask_bytes_are_rejected() {
    let ks = kernels(&[(2, 3)], &[1, 2, 3]);
    let mask = prune_unstructured(&[&ks[0]], 0.5, &PruneOptions::default(), None).unwrap();
    let mut bytes = encode_mask(&mask);
    bytes[0] = b'X';
    assert!(decode_mask(&bytes, std::path::Path::new("m")).is_err());
    let bytes = encode_mask(&mask);
    assert!(decode_mask(&bytes[..bytes.len() - 1], std::path::Path::new("m")).is_err());
}
