use moon::metrics::{accuracy, aggregate_cv, auc, MetricSet, TaskMetrics};
use proptest::prelude::*;

/// Direct pairwise concordance count.
fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

fn labelled_scores() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            // Few distinct levels so ties are common.
            prop::collection::vec((0u8..8).prop_map(|k| k as f64 / 7.0), n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn auc_equals_pairwise_count((scores, mut labels) in labelled_scores()) {
        labels[0] = true;
        labels[1] = false;
        let got = auc(&scores, &labels).unwrap();
        prop_assert!((got - brute_auc(&scores, &labels)).abs() <= 1e-12);
    }

    #[test]
    fn auc_flips_with_the_scores((scores, mut labels) in labelled_scores()) {
        labels[0] = true;
        labels[1] = false;
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let a = auc(&scores, &labels).unwrap();
        let b = auc(&neg, &labels).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_matches_counting(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..50)) {
        let (p, l): (Vec<bool>, Vec<bool>) = pairs.iter().cloned().unzip();
        let hits = pairs.iter().filter(|(a, b)| a == b).count();
        prop_assert_eq!(accuracy(&p, &l).unwrap(), 100.0 * hits as f64 / pairs.len() as f64);
    }

    #[test]
    fn aggregation_matches_sample_statistics(vals in prop::collection::vec(0.0f64..1.0, 2..10)) {
        let runs: Vec<MetricSet> = vals
            .iter()
            .map(|&v| MetricSet { ge_g2: TaskMetrics { acc: v, auc: v }, g3: TaskMetrics { acc: v, auc: v }, acc3: v })
            .collect();
        let agg = aggregate_cv(&runs).unwrap();
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        let s = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        prop_assert!((agg.mean.g3.auc - m).abs() < 1e-12);
        prop_assert!((agg.std.g3.auc - s).abs() < 1e-12);
    }
}
