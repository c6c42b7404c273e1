use std::collections::HashSet;

use esmm::baselines::{aman_augment, oversample_positives, unbias_weight};
use esmm::feature::{Dataset, Feature, FieldSchema, SparseSample};
use esmm::io::{parse_log, write_log};
use esmm::metrics::{auc, auc_bruteforce, spearman};
use esmm::models::{division_cvr, esmm_loss, ModelOutput, DIVISION_FLOOR};
use esmm::nn::{cross_entropy, PROB_CLAMP};
use proptest::prelude::*;

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec((0u8..8).prop_map(|x| x as f64 / 8.0 - 0.3), n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

fn both_classes(labels: &[bool]) -> bool {
    labels.iter().any(|&l| l) && labels.iter().any(|&l| !l)
}

fn dataset() -> impl Strategy<Value = Dataset> {
    let schema = FieldSchema::new(vec![4, 7, 3], 2).unwrap();
    let sample = (
        0i64..5,
        any::<bool>(),
        any::<bool>(),
        prop::collection::vec((0u32..3).prop_flat_map(|f| (Just(f), 0u32..[4, 7, 3][f as usize])), 0..5),
    );
    prop::collection::vec(sample, 0..40).prop_map(move |raw| {
        let mut t = 0;
        let samples = raw
            .into_iter()
            .map(|(dt, y, z, feats)| {
                t += dt;
                let features = feats.into_iter().map(|(f, id)| Feature::new(f, id)).collect();
                SparseSample::new(t, features, y, y && z)
            })
            .collect();
        Dataset::new(schema.clone(), samples).unwrap()
    })
}

proptest! {
    #[test]
    fn auc_matches_pairwise_oracle((s, l) in scored_labels()) {
        prop_assume!(both_classes(&l));
        prop_assert_eq!(auc(&s, &l).unwrap(), auc_bruteforce(&s, &l).unwrap());
    }

    #[test]
    fn auc_ignores_increasing_transforms((s, l) in scored_labels()) {
        prop_assume!(both_classes(&l));
        let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() + 1.0).collect();
        prop_assert_eq!(auc(&s, &l).unwrap(), auc(&t, &l).unwrap());
    }

    #[test]
    fn negated_scores_complement((s, l) in scored_labels()) {
        prop_assume!(both_classes(&l));
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        let sum = auc(&s, &l).unwrap() + auc(&neg, &l).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auc_in_unit_interval((s, l) in scored_labels()) {
        prop_assume!(both_classes(&l));
        let a = auc(&s, &l).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn spearman_bounded(a in prop::collection::vec(-5.0f64..5.0, 2..40)) {
        let b: Vec<f64> = a.iter().rev().copied().collect();
        let r = spearman(&a, &b);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        let want = if a.iter().all(|&x| x == a[0]) { 0.0 } else { 1.0 };
        prop_assert!((spearman(&a, &a) - want).abs() < 1e-12);
    }

    #[test]
    fn log_round_trip(d in dataset()) {
        let mut first = Vec::new();
        write_log(&d, &mut first).unwrap();
        let back = parse_log(first.as_slice(), false).unwrap();
        prop_assert_eq!(&back, &d);
        let mut second = Vec::new();
        write_log(&back, &mut second).unwrap();
        prop_assert_eq!(first, second);
    }

    #[test]
    fn aman_keeps_clicks_and_never_duplicates(d in dataset(), rate in 0.01f64..=1.0, seed in any::<u64>()) {
        let a = aman_augment(&d, rate, seed).unwrap();
        let pool = d.samples().iter().filter(|s| !s.y).count();
        prop_assert_eq!(a.click_count(), d.click_count());
        prop_assert_eq!(a.len() - a.click_count(), (rate * pool as f64).round() as usize);
        prop_assert_eq!(a.conversion_count(), d.conversion_count());
        // Every kept sample comes from the input, in order, at most once.
        let mut it = d.samples().iter();
        for s in a.samples() {
            prop_assert!(it.any(|t| t == s));
        }
        prop_assert_eq!(a, aman_augment(&d, rate, seed).unwrap());
    }

    #[test]
    fn oversampling_keeps_every_sample(d in dataset(), k in 1usize..6) {
        let c = d.clicked_subset();
        let o = oversample_positives(&c, k).unwrap();
        prop_assert_eq!(o.len(), c.len() + (k - 1) * c.conversion_count());
        prop_assert_eq!(o.conversion_count(), k * c.conversion_count());
        let kept: HashSet<String> = o.samples().iter().map(|s| format!("{s:?}")).collect();
        for s in c.samples() {
            let key = format!("{s:?}");
            prop_assert!(kept.contains(&key));
        }
    }

    #[test]
    fn unbias_weight_bounds(p in PROB_CLAMP..=1.0, cap in 1.0f64..1e6) {
        let w = unbias_weight(p, cap);
        prop_assert!(w >= 1.0 - 1e-12 && w <= cap);
    }

    #[test]
    fn division_flag_matches_value(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let d = division_cvr(a, b, DIVISION_FLOOR);
        prop_assert_eq!(d.exceeded_one, d.pcvr > 1.0);
        prop_assert!(d.pcvr >= 0.0);
    }

    #[test]
    fn loss_is_sum_of_terms(p in PROB_CLAMP..1.0 - PROB_CLAMP, q in PROB_CLAMP..1.0 - PROB_CLAMP, y in any::<bool>(), z in any::<bool>()) {
        let z = y && z;
        let o = ModelOutput::from_factors(p, q);
        let want = cross_entropy(y, p) + cross_entropy(y && z, p * q);
        prop_assert!((esmm_loss(&[o], &[(y, z)]) - want).abs() <= 1e-12 * want.max(1.0));
        prop_assert_eq!(o.pctcvr, p * q);
        prop_assert!(o.pctcvr <= p && o.pctcvr <= q);
    }
}
