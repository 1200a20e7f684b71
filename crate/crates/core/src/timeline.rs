//! Smoothed, gap-free timelines from per-frame predictions, with narrative
//! text and phase-diagram export.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{format_hms, write_atomic, write_json};
use crate::vocab::ClassVocabulary;
use crate::zeroshot::Prediction;

pub const DEFAULT_WINDOW: usize = 11;

/// Sliding majority vote over a centred window, clipped at the ends.
///
/// Ties go to the previous smoothed label when it is among the leaders,
/// then to the centre frame's own label, then to whichever leader occurs
/// first in the window.
pub fn smooth_labels<S: AsRef<str>>(labels: &[S], window: usize) -> Result<Vec<String>> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("cannot smooth an empty label stream".into()));
    }
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidInput(format!("window must be odd and >= 1, got {window}")));
    }
    let half = window / 2;
    let n = labels.len();
    let mut out: Vec<String> = Vec::with_capacity(n);
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(n - 1);
        let win = &labels[lo..=hi];
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for l in win {
            *counts.entry(l.as_ref()).or_default() += 1;
        }
        let top = *counts.values().max().expect("non-empty window");
        let leads = |l: &str| counts.get(l) == Some(&top);
        let choice = match out.last() {
            Some(prev) if leads(prev) => prev.clone(),
            _ if leads(labels[i].as_ref()) => labels[i].as_ref().to_string(),
            _ => win
                .iter()
                .map(AsRef::as_ref)
                .find(|l| leads(l))
                .expect("a leader is in the window")
                .to_string(),
        };
        out.push(choice);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineSegment {
    #[serde(rename = "class")]
    pub class_id: String,
    pub start_s: f64,
    pub end_s: f64,
    /// Mean top-1 score of the frames in the segment.
    pub confidence: f64,
    /// First and last frame index.
    pub frame_span: (usize, usize),
    pub n_frames: usize,
}

impl TimelineSegment {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub video_id: String,
    pub window: usize,
    pub segments: Vec<TimelineSegment>,
    /// Summary header followed by one line per segment.
    pub narrative: Vec<String>,
}

impl Timeline {
    pub fn start_s(&self) -> f64 {
        self.segments[0].start_s
    }

    pub fn end_s(&self) -> f64 {
        self.segments[self.segments.len() - 1].end_s
    }

    /// Segment label at `t`; segments are half-open except the last.
    pub fn label_at(&self, t: f64) -> Option<&str> {
        if t < self.start_s() || t > self.end_s() {
            return None;
        }
        let i = self.segments.partition_point(|s| s.end_s <= t);
        Some(&self.segments[i.min(self.segments.len() - 1)].class_id)
    }

    pub fn narrative_text(&self) -> String {
        let mut s = self.narrative.join("\n");
        s.push('\n');
        s
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn save_narrative(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.narrative_text().as_bytes())
    }
}

/// One sampled frame of a label stream.
struct Point<'a> {
    frame_index: usize,
    t: f64,
    label: &'a str,
    score: f64,
}

fn segments_from(points: &[Point<'_>]) -> Vec<TimelineSegment> {
    let n = points.len();
    let mut segs: Vec<TimelineSegment> = Vec::new();
    let mut start = 0;
    for i in 1..=n {
        if i < n && points[i].label == points[start].label {
            continue;
        }
        let run = &points[start..i];
        let start_s = if start == 0 {
            points[0].t
        } else {
            0.5 * (points[start - 1].t + points[start].t)
        };
        let end_s = if i == n {
            points[n - 1].t
        } else {
            0.5 * (points[i - 1].t + points[i].t)
        };
        segs.push(TimelineSegment {
            class_id: points[start].label.to_string(),
            start_s,
            end_s,
            confidence: run.iter().map(|p| p.score).sum::<f64>() / run.len() as f64,
            frame_span: (run[0].frame_index, run[run.len() - 1].frame_index),
            n_frames: run.len(),
        });
        start = i;
    }
    segs
}

fn narrative(video_id: &str, segs: &[TimelineSegment], vocab: &ClassVocabulary) -> Result<Vec<String>> {
    let distinct: std::collections::BTreeSet<&str> = segs.iter().map(|s| s.class_id.as_str()).collect();
    let span = segs[segs.len() - 1].end_s - segs[0].start_s;
    let mut lines = vec![format!(
        "Video {video_id}: {} distinct {}s over {} segments, total duration {}",
        distinct.len(),
        vocab.task,
        segs.len(),
        format_hms(span)
    )];
    for s in segs {
        lines.push(format!(
            "[{}\u{2013}{}] {}",
            format_hms(s.start_s),
            format_hms(s.end_s),
            vocab.narrative_for(&s.class_id)?
        ));
    }
    Ok(lines)
}

fn check_stream(preds: &[Prediction]) -> Result<()> {
    if preds.len() < 2 {
        return Err(Error::InvalidInput("a timeline needs at least two frames".into()));
    }
    let vid = &preds[0].frame.video_id;
    for w in preds.windows(2) {
        if &w[1].frame.video_id != vid {
            return Err(Error::InvalidInput(format!(
                "timeline mixes videos {vid} and {}",
                w[1].frame.video_id
            )));
        }
        if !(w[1].frame.timestamp_s > w[0].frame.timestamp_s) {
            return Err(Error::InvalidInput(format!(
                "frames not strictly time-ordered at frame {}",
                w[1].frame.frame_index
            )));
        }
    }
    Ok(())
}

/// Timeline of one video's predictions after smoothing with `window`.
/// `frames` must list the same frames as `preds`, in the same order.
pub fn build_timeline(
    frames: &[crate::zeroshot::FrameRef],
    preds: &[Prediction],
    window: usize,
    vocab: &ClassVocabulary,
) -> Result<Timeline> {
    if frames.len() != preds.len() {
        return Err(Error::InvalidInput(format!(
            "{} frames but {} predictions",
            frames.len(),
            preds.len()
        )));
    }
    for (f, p) in frames.iter().zip(preds) {
        if f.video_id != p.frame.video_id || f.frame_index != p.frame.frame_index {
            return Err(Error::InvalidInput(format!(
                "frame {}:{} paired with prediction for {}:{}",
                f.video_id, f.frame_index, p.frame.video_id, p.frame.frame_index
            )));
        }
    }
    check_stream(preds)?;
    let raw: Vec<&str> = preds.iter().map(|p| p.top1()).collect();
    for l in &raw {
        vocab.entry(l)?;
    }
    let smoothed = smooth_labels(&raw, window)?;
    let points: Vec<Point<'_>> = preds
        .iter()
        .zip(&smoothed)
        .map(|(p, l)| Point {
            frame_index: p.frame.frame_index,
            t: p.frame.timestamp_s,
            label: l,
            score: p.scores.first().copied().unwrap_or(0.0),
        })
        .collect();
    let segments = segments_from(&points);
    let video_id = preds[0].frame.video_id.clone();
    Ok(Timeline {
        narrative: narrative(&video_id, &segments, vocab)?,
        video_id,
        window,
        segments,
    })
}

/// Ground-truth timeline from the predictions' true labels, unsmoothed,
/// confidence 1.
pub fn truth_timeline(preds: &[Prediction], vocab: &ClassVocabulary) -> Result<Timeline> {
    check_stream(preds)?;
    let points = preds
        .iter()
        .map(|p| {
            let label = p.frame.true_label.as_deref().ok_or_else(|| {
                Error::InvalidInput(format!("frame {} has no true label", p.frame.frame_index))
            })?;
            vocab.entry(label)?;
            Ok(Point {
                frame_index: p.frame.frame_index,
                t: p.frame.timestamp_s,
                label,
                score: 1.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let segments = segments_from(&points);
    let video_id = preds[0].frame.video_id.clone();
    Ok(Timeline {
        narrative: narrative(&video_id, &segments, vocab)?,
        video_id,
        window: 1,
        segments,
    })
}

/// Predicted and true labels on a shared time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseDiagram {
    pub video_id: String,
    pub times: Vec<f64>,
    pub predicted: Vec<String>,
    pub truth: Vec<String>,
    /// Per true class: fraction of its grid points where the prediction
    /// agrees. Only classes present in the truth ribbon appear.
    pub agreement: BTreeMap<String, f64>,
    pub overall_agreement: f64,
}

/// Samples both timelines at `grid` (seconds, inside the common span).
pub fn export_phase_diagram(predicted: &Timeline, truth: &Timeline, grid: &[f64]) -> Result<PhaseDiagram> {
    const TOL: f64 = 1e-9;
    if (predicted.start_s() - truth.start_s()).abs() > TOL || (predicted.end_s() - truth.end_s()).abs() > TOL {
        return Err(Error::InvalidInput(format!(
            "span mismatch: predicted [{}, {}] vs truth [{}, {}]",
            predicted.start_s(),
            predicted.end_s(),
            truth.start_s(),
            truth.end_s()
        )));
    }
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty time grid".into()));
    }
    let mut p_lab = Vec::with_capacity(grid.len());
    let mut t_lab = Vec::with_capacity(grid.len());
    for &t in grid {
        match (predicted.label_at(t), truth.label_at(t)) {
            (Some(p), Some(q)) => {
                p_lab.push(p.to_string());
                t_lab.push(q.to_string());
            }
            _ => return Err(Error::InvalidInput(format!("grid time {t} outside the timeline span"))),
        }
    }
    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (p, q) in p_lab.iter().zip(&t_lab) {
        let e = tally.entry(q.clone()).or_default();
        e.1 += 1;
        if p == q {
            e.0 += 1;
        }
    }
    let agree: usize = tally.values().map(|v| v.0).sum();
    Ok(PhaseDiagram {
        video_id: predicted.video_id.clone(),
        times: grid.to_vec(),
        predicted: p_lab,
        truth: t_lab,
        agreement: tally.into_iter().map(|(k, (a, n))| (k, a as f64 / n as f64)).collect(),
        overall_agreement: agree as f64 / grid.len() as f64,
    })
}

/// Uniform grid from `start` to `end` inclusive with spacing `step`.
pub fn uniform_grid(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(end >= start) {
        return Err(Error::InvalidInput(format!("bad grid [{start}, {end}] step {step}")));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

impl PhaseDiagram {
    /// `time_s,predicted,truth`.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| Error::parse(path.display().to_string(), e);
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["time_s", "predicted", "truth"]).map_err(err)?;
        for ((t, p), q) in self.times.iter().zip(&self.predicted).zip(&self.truth) {
            w.write_record([t.to_string().as_str(), p, q]).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::parse(path.display().to_string(), e))?;
        write_atomic(path, &bytes)
    }
}
