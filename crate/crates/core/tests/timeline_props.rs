use proptest::prelude::*;
use surgline_core::timeline::{build_timeline, export_phase_diagram, smooth_labels, truth_timeline};
use surgline_core::vocab::ClassVocabulary;
use surgline_core::zeroshot::{FrameRef, Prediction};

fn stream(pred: &[usize], truth: &[usize], fps: f64) -> Vec<Prediction> {
    pred.iter()
        .zip(truth)
        .enumerate()
        .map(|(i, (&p, &t))| Prediction {
            frame: FrameRef {
                video_id: "vid".into(),
                frame_index: i * 3,
                timestamp_s: 1.5 + i as f64 / fps,
                true_label: Some(format!("P{}", t + 1)),
            },
            ranking: vec![format!("P{}", p + 1)],
            scores: vec![0.2 + 0.1 * (i % 7) as f64],
            cosines: vec![],
        })
        .collect()
}

fn refs(p: &[Prediction]) -> Vec<FrameRef> {
    p.iter().map(|p| p.frame.clone()).collect()
}

/// Runs of length 1..8 over 7 phases.
fn label_stream() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec((0usize..7, 1usize..8), 1..30)
        .prop_map(|runs| runs.into_iter().flat_map(|(l, n)| std::iter::repeat_n(l, n)).collect::<Vec<_>>())
        .prop_filter("two frames", |v| v.len() >= 2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn segments_cover_span_without_gaps(labels in label_stream(), w in 0usize..7, fps in 1.0f64..30.0) {
        let window = 2 * w + 1;
        let vocab = ClassVocabulary::builtin_phases();
        let preds = stream(&labels, &labels, fps);
        let tl = build_timeline(&refs(&preds), &preds, window, &vocab).unwrap();
        let first = preds[0].frame.timestamp_s;
        let last = preds[preds.len() - 1].frame.timestamp_s;
        prop_assert_eq!(tl.segments[0].start_s, first);
        prop_assert_eq!(tl.segments[tl.segments.len() - 1].end_s, last);
        for pair in tl.segments.windows(2) {
            prop_assert_eq!(pair[0].end_s, pair[1].start_s);
            prop_assert_ne!(&pair[0].class_id, &pair[1].class_id);
        }
        for s in &tl.segments {
            prop_assert!(s.end_s > s.start_s);
            prop_assert!((0.0..=1.0).contains(&s.confidence));
        }
        let total: f64 = tl.segments.iter().map(|s| s.duration_s()).sum();
        prop_assert!((total - (last - first)).abs() <= 1.0 / fps);
        let frames: usize = tl.segments.iter().map(|s| s.n_frames).sum();
        prop_assert_eq!(frames, preds.len());
        prop_assert_eq!(tl.narrative.len(), tl.segments.len() + 1);
    }

    #[test]
    fn window_one_is_identity(labels in label_stream()) {
        let s: Vec<String> = labels.iter().map(|l| format!("P{}", l + 1)).collect();
        prop_assert_eq!(smooth_labels(&s, 1).unwrap(), s);
    }

    #[test]
    fn smoothing_never_invents_labels(labels in label_stream(), w in 0usize..7) {
        let window = 2 * w + 1;
        let s: Vec<String> = labels.iter().map(|l| format!("P{}", l + 1)).collect();
        let out = smooth_labels(&s, window).unwrap();
        prop_assert_eq!(out.len(), s.len());
        for (i, l) in out.iter().enumerate() {
            let lo = i.saturating_sub(w);
            let hi = (i + w).min(s.len() - 1);
            prop_assert!(s[lo..=hi].contains(l));
        }
        let constant = vec![s[0].clone(); s.len()];
        prop_assert_eq!(smooth_labels(&constant, window).unwrap(), constant);
    }
}

#[test]
fn agreement_equals_smoothed_frame_accuracy() {
    // 100 frames: truth in five blocks, predictions with scattered errors.
    let truth: Vec<usize> = (0..100).map(|i| i / 20).collect();
    let pred: Vec<usize> = (0..100)
        .map(|i| if i % 7 == 3 || (40..46).contains(&i) { (truth[i] + 1) % 7 } else { truth[i] })
        .collect();
    let vocab = ClassVocabulary::builtin_phases();
    let preds = stream(&pred, &truth, 5.0);
    let tl = build_timeline(&refs(&preds), &preds, 5, &vocab).unwrap();
    let gt = truth_timeline(&preds, &vocab).unwrap();
    let grid: Vec<f64> = preds.iter().map(|p| p.frame.timestamp_s).collect();
    let diagram = export_phase_diagram(&tl, &gt, &grid).unwrap();

    let raw: Vec<String> = pred.iter().map(|p| format!("P{}", p + 1)).collect();
    let smoothed = smooth_labels(&raw, 5).unwrap();
    let hits = smoothed
        .iter()
        .zip(&truth)
        .filter(|(s, t)| **s == format!("P{}", *t + 1))
        .count();
    assert_eq!(diagram.overall_agreement, hits as f64 / 100.0);
    assert!(diagram.overall_agreement < 1.0);
}
