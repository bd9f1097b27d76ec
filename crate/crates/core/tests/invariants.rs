use proptest::prelude::*;
use zkd_core::{
    cross_entropy, entropy, general_softmax, kl_div, softmax_t, zscore, LogitVector, SoftmaxParams,
};

fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 2..100)
        .prop_filter("non-constant", |v| v.iter().any(|x| (x - v[0]).abs() > 1e-6))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn zscore_moments_and_bound(z in logits(), tau in 0.1f64..10.0) {
        let k = z.len() as f64;
        let s = zscore(&LogitVector::new(z).unwrap(), tau).unwrap();
        let mean = s.values.iter().sum::<f64>() / k;
        let std = (s.values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / k).sqrt();
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((std - 1.0 / tau).abs() < 1e-9);
        let bound = (k - 1.0).sqrt() / tau + 1e-12;
        prop_assert!(s.values.iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn zscore_keeps_order(z in logits(), tau in 0.1f64..10.0) {
        let s = zscore(&LogitVector::new(z.clone()).unwrap(), tau).unwrap();
        for i in 0..z.len() {
            for j in 0..z.len() {
                if z[i] < z[j] {
                    prop_assert!(s.values[i] <= s.values[j]);
                }
            }
        }
    }

    #[test]
    fn zscore_ignores_positive_affine_maps(
        z in logits(), tau in 0.1f64..10.0, a in 0.01f64..100.0, b in -100.0f64..100.0
    ) {
        let v = LogitVector::new(z).unwrap();
        let s = zscore(&v, tau).unwrap();
        let t = zscore(&v.affine(a, b).unwrap(), tau).unwrap();
        for (x, y) in s.values.iter().zip(&t.values) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_ignores_shifts(z in logits(), t in 0.1f64..10.0, c in -1e3f64..1e3) {
        let v = LogitVector::new(z).unwrap();
        let p = softmax_t(&v, t).unwrap();
        let q = softmax_t(&v.affine(1.0, c).unwrap(), t).unwrap();
        for (x, y) in p.values().iter().zip(q.values()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        let sum: f64 = p.values().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn general_softmax_reduces_to_temperature(z in logits(), a in -5.0f64..5.0, b in 0.1f64..10.0) {
        let v = LogitVector::new(z).unwrap();
        let g = general_softmax(&v, SoftmaxParams { a, b }).unwrap();
        let p = softmax_t(&v, b).unwrap();
        for (x, y) in g.values().iter().zip(p.values()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_minus_kl_is_entropy(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2..40)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let p = softmax_t(&LogitVector::new(a).unwrap(), 1.0).unwrap();
        let q = softmax_t(&LogitVector::new(b).unwrap(), 1.0).unwrap();
        let kl = kl_div(&p, &q).unwrap();
        prop_assert!(kl >= 0.0);
        prop_assert!((cross_entropy(&p, &q).unwrap() - kl - entropy(&p)).abs() < 1e-9);
    }
}
