use std::collections::HashMap;

use proptest::prelude::*;

use trifuse::data::{decode_dataset, encode_dataset, Dataset, FeatureDims, FeatureRecord};
use trifuse::nn::ParamStore;
use trifuse::tensor::kernels::{matmul, scaled_attention, softmax_rows};
use trifuse::tensor::Tensor;
use trifuse::train::{adam_step, AdamConfig, AdamState, Confusion, Metrics};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn sized_matrix() -> impl Strategy<Value = Tensor> {
    (1usize..6, 1usize..6).prop_flat_map(|(r, c)| matrix(r, c))
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in sized_matrix()) {
        let p = softmax_rows(&x);
        for r in 0..p.rows() {
            let row = p.row(r);
            prop_assert!(row.iter().all(|&v| v > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_by_identity_is_exact(x in sized_matrix()) {
        let i = Tensor::eye(x.cols());
        prop_assert_eq!(matmul(&x, &i).unwrap(), x.clone());
        let i = Tensor::eye(x.rows());
        prop_assert_eq!(matmul(&i, &x).unwrap(), x);
    }

    #[test]
    fn attention_is_invariant_to_key_order(
        (q, k, v, perm) in (1usize..4, 2usize..6, 1usize..5).prop_flat_map(|(lq, lk, d)| {
            (matrix(lq, d), matrix(lk, d), matrix(lk, 3), Just((0..lk).collect::<Vec<_>>()).prop_shuffle())
        })
    ) {
        let permute = |t: &Tensor| {
            let rows: Vec<&[f64]> = perm.iter().map(|&i| t.row(i)).collect();
            Tensor::from_rows(&rows)
        };
        let a = scaled_attention(&q, &k, &v).unwrap();
        let b = scaled_attention(&q, &permute(&k), &permute(&v)).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn ttbf_round_trip_is_bit_exact(
        seed in any::<u64>(),
        n in 0usize..6,
        dims in (1usize..3, 1usize..4, 1usize..3, 1usize..4, 1usize..3, 1usize..4),
    ) {
        let dims = FeatureDims {
            len_text: dims.0, d_text: dims.1, len_image: dims.2,
            d_image: dims.3, len_imgtext: dims.4, d_imgtext: dims.5,
        };
        let mut s = seed;
        let mut next = move || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); f32::from_bits(((s >> 40) as u32) | 0x3f00_0000) - 1.0 };
        let records: Vec<FeatureRecord> = (0..n).map(|i| FeatureRecord {
            id: seed.wrapping_add(i as u64),
            label: (i % 2) as u8,
            text: (0..dims.text_len()).map(|_| next()).collect(),
            image: (0..dims.image_len()).map(|_| next()).collect(),
            imgtext: (0..dims.imgtext_len()).map(|_| next()).collect(),
        }).collect();
        let ds = Dataset::new(dims, records);
        let bytes = encode_dataset(&ds).unwrap();
        let back = decode_dataset(&bytes).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(encode_dataset(&back).unwrap(), bytes);
    }

    #[test]
    fn metrics_match_brute_force(
        pairs in prop::collection::vec((0.0f64..1.0, 0u8..2), 1..60)
    ) {
        let (probs, labels): (Vec<f64>, Vec<u8>) = pairs.into_iter().unzip();
        let m = Metrics::from_predictions(&probs, &labels).unwrap();
        let count = |pred: bool, y: u8| probs.iter().zip(&labels).filter(|(&p, &l)| (p >= 0.5) == pred && l == y).count();
        let c = Confusion { tp: count(true, 1), fp: count(true, 0), tn: count(false, 0), fn_: count(false, 1) };
        prop_assert_eq!(m.confusion, c);
        prop_assert_eq!(m, Metrics::from_confusion(c));
    }

    #[test]
    fn adam_ignores_registration_order(
        a in prop::collection::vec(-2.0f64..2.0, 3),
        b in prop::collection::vec(-2.0f64..2.0, 2),
        ga in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..4),
        gb in prop::collection::vec(-1.0f64..1.0, 2),
    ) {
        let cfg = AdamConfig::default();
        let run = |order: &[(&str, &Vec<f64>)]| {
            let mut store = ParamStore::new();
            for (n, v) in order {
                store.add(*n, Tensor::vector((*v).clone()));
            }
            let mut st = AdamState::default();
            for g in &ga {
                let grads: HashMap<String, Tensor> = [
                    ("a".to_string(), Tensor::vector(g.clone())),
                    ("b".to_string(), Tensor::vector(gb.clone())),
                ].into_iter().collect();
                adam_step(&mut store, &grads, &mut st, &cfg).unwrap();
            }
            let get = |n: &str| store.get(store.id(n).unwrap()).clone();
            (get("a"), get("b"))
        };
        prop_assert_eq!(run(&[("a", &a), ("b", &b)]), run(&[("b", &b), ("a", &a)]));
    }
}

#[test]
fn adam_matches_scalar_oracle() {
    let cfg = AdamConfig::default();
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![0.5]));
    let mut st = AdamState::default();
    let (mut w, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
    for t in 1..=20 {
        let g = 2.0 * w - 0.3 * t as f64;
        let grads: HashMap<String, Tensor> = [("w".to_string(), Tensor::vector(vec![g]))].into_iter().collect();
        adam_step(&mut store, &grads, &mut st, &cfg).unwrap();
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        w -= 1e-3 * mh / (vh.sqrt() + 1e-8);
        assert!((store.get(id).data()[0] - w).abs() < 1e-12, "step {t}");
    }
}

#[test]
fn adam_first_step_moves_by_lr_against_gradient_sign() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![1.0, 1.0]));
    let grads: HashMap<String, Tensor> = [("w".to_string(), Tensor::vector(vec![3.0, -0.01]))]
        .into_iter()
        .collect();
    adam_step(&mut store, &grads, &mut AdamState::default(), &AdamConfig::default()).unwrap();
    let w = store.get(id).data();
    assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
    assert!((w[1] - (1.0 + 1e-3)).abs() < 1e-6);
}
