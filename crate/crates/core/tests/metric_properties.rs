use memos_core::eval::{self, PixelPool, ScoreMap};
use memos_core::{ClassTaxonomy, Grid};
use proptest::prelude::*;

/// Direct enumeration: every unique score as a threshold, counting hits.
fn oracle(scores: &[f64], labels: &[u8]) -> (f64, f64) {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let (mut ap, mut prev_recall, mut fpr95) = (0.0, 0.0, None);
    for t in thresholds {
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l == 1).count() as f64;
        let fp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l == 0).count() as f64;
        let recall = tp / pos;
        ap += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
        if fpr95.is_none() && recall >= 0.95 {
            fpr95 = Some(fp / neg);
        }
    }
    (ap, fpr95.unwrap())
}

fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..120).prop_flat_map(|n| {
        (prop::collection::vec(0u8..20, n), prop::collection::vec(prop::bool::ANY, n)).prop_filter_map(
            "both classes",
            |(raw, flags)| {
                let labels: Vec<u8> = flags.iter().map(|&f| u8::from(f)).collect();
                let pos = labels.iter().filter(|&&l| l == 1).count();
                (pos > 0 && pos < labels.len()).then(|| (raw.iter().map(|&r| f64::from(r) / 20.0).collect(), labels))
            },
        )
    })
}

proptest! {
    #[test]
    fn metrics_match_enumeration((scores, labels) in instance()) {
        let (ap, fpr) = oracle(&scores, &labels);
        prop_assert!((eval::auprc(&scores, &labels).unwrap() - ap).abs() < 1e-9);
        prop_assert!((eval::fpr_at_95_tpr(&scores, &labels).unwrap() - fpr).abs() < 1e-9);
    }

    #[test]
    fn joint_shuffle_changes_nothing((scores, labels) in instance(), seed in any::<u64>()) {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        let mut s = seed | 1;
        for i in (1..idx.len()).rev() {
            s ^= s << 13; s ^= s >> 7; s ^= s << 17;
            idx.swap(i, (s % (i as u64 + 1)) as usize);
        }
        let ps: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let pl: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        prop_assert_eq!(eval::auprc(&scores, &labels).unwrap(), eval::auprc(&ps, &pl).unwrap());
        prop_assert_eq!(eval::fpr_at_95_tpr(&scores, &labels).unwrap(), eval::fpr_at_95_tpr(&ps, &pl).unwrap());
    }

    #[test]
    fn increasing_transform_changes_nothing((scores, labels) in instance()) {
        let warped: Vec<f64> = scores.iter().map(|&s| (3.0 * s).exp() + s).collect();
        prop_assert!((eval::auprc(&scores, &labels).unwrap() - eval::auprc(&warped, &labels).unwrap()).abs() < 1e-12);
        prop_assert_eq!(eval::fpr_at_95_tpr(&scores, &labels).unwrap(), eval::fpr_at_95_tpr(&warped, &labels).unwrap());
    }

    #[test]
    fn miou_of_a_map_with_itself_is_one(data in prop::collection::vec(prop_oneof![0u8..4, Just(255u8)], 16)) {
        prop_assume!(data.iter().any(|&v| v != 255));
        let tax = ClassTaxonomy::from_names(["a", "b", "c", "d"]).unwrap();
        let a = Grid::from_vec(4, 4, data).unwrap();
        prop_assert_eq!(eval::miou(&a, &a, &tax).unwrap(), 1.0);
    }

    #[test]
    fn scores_at_ignore_pixels_are_irrelevant(noise in prop::collection::vec(-5.0f64..5.0, 9)) {
        let labels = Grid::from_vec(3, 3, vec![0, 1, 255, 1, 0, 255, 0, 1, 255]).unwrap();
        let base = Grid::from_vec(3, 3, vec![0.1, 0.9, 0.5, 0.7, 0.2, 0.5, 0.4, 0.6, 0.5]).unwrap();
        let mut moved = base.clone();
        for (i, n) in noise.iter().enumerate() {
            if labels.as_slice()[i] == 255 {
                moved.as_mut_slice()[i] += n;
            }
        }
        let (mut a, mut b) = (PixelPool::default(), PixelPool::default());
        a.add(&ScoreMap(base), &labels).unwrap();
        b.add(&ScoreMap(moved), &labels).unwrap();
        prop_assert_eq!(a.auprc().unwrap(), b.auprc().unwrap());
        prop_assert_eq!(a.fpr95().unwrap(), b.fpr95().unwrap());
    }
}

#[test]
fn random_scores_sit_near_prevalence() {
    let mut rng = memos_core::rng::rng(17);
    let mut total = 0.0;
    for _ in 0..10 {
        let n = 20_000;
        let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 100 == 0)).collect();
        let scores: Vec<f64> = (0..n).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
        let ap = eval::auprc(&scores, &labels).unwrap();
        assert!((ap - 0.01).abs() < 0.01, "{ap}");
        total += ap;
    }
    assert!((total / 10.0 - 0.01).abs() < 0.005);
}

#[test]
fn single_class_labels_are_undefined() {
    assert!(matches!(eval::auprc(&[0.1, 0.2], &[0, 0]), Err(memos_core::Error::MetricUndefined(_))));
    assert!(matches!(eval::fpr_at_95_tpr(&[0.1, 0.2], &[1, 1]), Err(memos_core::Error::MetricUndefined(_))));
}
