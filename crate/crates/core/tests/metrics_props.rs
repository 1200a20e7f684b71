use std::collections::BTreeMap;
use std::path::Path;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surgline_core::metrics::{confusion, evaluate};
use surgline_core::zeroshot::{read_predictions_csv, FrameRef, Prediction};

fn ids(c: usize) -> Vec<String> {
    (1..=c).map(|i| format!("G{i}")).collect()
}

fn random_preds(rng: &mut ChaCha8Rng, n: usize, c: usize, k: usize) -> Vec<Prediction> {
    (0..n)
        .map(|i| {
            let mut order: Vec<usize> = (0..c).collect();
            order.shuffle(rng);
            order.truncate(k);
            Prediction {
                frame: FrameRef {
                    video_id: "v".into(),
                    frame_index: i,
                    timestamp_s: i as f64,
                    true_label: Some(format!("G{}", rng.random_range(1..=c))),
                },
                ranking: order.iter().map(|j| format!("G{}", j + 1)).collect(),
                scores: vec![1.0 / k as f64; k],
                cosines: vec![],
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn metric_identities_hold(seed in any::<u64>(), n in 1usize..120, c in 5usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let preds = random_preds(&mut rng, n, c, 5);
        let r = evaluate(&preds, &ids(c), &[1, 5]).unwrap();
        let top5 = r.overall_top5.unwrap();
        prop_assert!((0.0..=1.0).contains(&r.overall_top1) && (0.0..=1.0).contains(&top5));
        prop_assert!(top5 >= r.overall_top1);
        prop_assert_eq!(r.recall, r.overall_top1);
        let cm = confusion(&preds, &ids(c), true).unwrap();
        prop_assert_eq!(cm.total(), n);
        prop_assert_eq!(cm.trace() as f64 / n as f64, r.overall_top1);
        for (i, row) in cm.normalized.as_ref().unwrap().iter().enumerate() {
            let s: f64 = row.iter().sum();
            if cm.counts[i].iter().sum::<usize>() > 0 {
                prop_assert!((s - 1.0).abs() < 1e-12);
            } else {
                prop_assert_eq!(s, 0.0);
            }
        }
        let mut shuffled = preds.clone();
        shuffled.shuffle(&mut rng);
        let r2 = evaluate(&shuffled, &ids(c), &[1, 5]).unwrap();
        prop_assert_eq!(r2.overall_top1, r.overall_top1);
        prop_assert!((r2.precision - r.precision).abs() < 1e-12);
        prop_assert!((r2.f1 - r.f1).abs() < 1e-12);
    }
}

#[test]
fn confusion_of_random_toy_set_matches_tally() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let preds = random_preds(&mut rng, 200, 7, 1);
    let cm = confusion(&preds, &ids(7), false).unwrap();
    assert_eq!(cm.total(), 200);
    let mut tally: BTreeMap<(String, String), usize> = BTreeMap::new();
    for p in &preds {
        *tally
            .entry((p.frame.true_label.clone().unwrap(), p.ranking[0].clone()))
            .or_default() += 1;
    }
    for (i, t) in ids(7).iter().enumerate() {
        for (j, q) in ids(7).iter().enumerate() {
            assert_eq!(cm.counts[i][j], tally.get(&(t.clone(), q.clone())).copied().unwrap_or(0));
        }
        let support = preds.iter().filter(|p| p.frame.true_label.as_deref() == Some(t)).count();
        assert_eq!(cm.support(t), Some(support));
    }
}

/// Recount of weighted precision/F1 straight from the CSV rows.
fn brute_force(path: &Path) -> (f64, f64, f64, f64) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.unwrap();
        let top: Vec<String> = (4..9).map(|i| rec[i].to_string()).collect();
        rows.push((rec[3].to_string(), top));
    }
    let n = rows.len() as f64;
    let classes: Vec<String> = ids(15);
    let (mut acc, mut top5, mut wp, mut wf) = (0.0, 0.0, 0.0, 0.0);
    for c in &classes {
        let support = rows.iter().filter(|(t, _)| t == c).count() as f64;
        let predicted = rows.iter().filter(|(_, p)| &p[0] == c).count() as f64;
        let tp = rows.iter().filter(|(t, p)| t == c && &p[0] == c).count() as f64;
        let prec = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let rec = if support > 0.0 { tp / support } else { 0.0 };
        let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
        acc += tp;
        wp += support * prec;
        wf += support * f1;
    }
    for (t, p) in &rows {
        if p.contains(t) {
            top5 += 1.0;
        }
    }
    (acc / n, wp / n, wf / n, top5 / n)
}

fn pct(x: f64) -> f64 {
    (x * 10000.0).round() / 100.0
}

#[test]
fn table3_fixture_reproduces_marginals() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/table3_preds.csv");
    let preds = read_predictions_csv(&path).unwrap();
    let r = evaluate(&preds, &ids(15), &[1, 5]).unwrap();
    assert_eq!(pct(r.overall_top1), 59.17);
    assert_eq!(pct(r.precision), 65.29);
    assert_eq!(pct(r.recall), 59.17);
    assert_eq!(pct(r.f1), 61.10);
    let (acc, p, f, t5) = brute_force(&path);
    assert!((acc - r.overall_top1).abs() < 1e-12);
    assert!((p - r.precision).abs() < 1e-12);
    assert!((f - r.f1).abs() < 1e-12);
    assert!((t5 - r.overall_top5.unwrap()).abs() < 1e-12);
    assert!(r.overall_top5.unwrap() >= r.overall_top1);
}
