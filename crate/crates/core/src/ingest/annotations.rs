use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::VideoMeta;
use crate::error::{Error, Result};
use crate::util::read_json;
use crate::vocab::ClassVocabulary;

const PHASE_MAP: &str = include_str!("../../data/cholec80_phase_map.json");

/// Inclusive frame range carrying one gesture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GestureInterval {
    pub start_frame: usize,
    pub end_frame: usize,
    pub class_id: String,
}

pub fn parse_gesture_transcript(
    path: &Path,
    video: &VideoMeta,
    vocab: &ClassVocabulary,
) -> Result<Vec<GestureInterval>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_gesture_transcript_str(&text, path, video, vocab)
}

/// Parses `start end Gk` lines. `path` is only used in error messages.
pub fn parse_gesture_transcript_str(
    text: &str,
    path: &Path,
    video: &VideoMeta,
    vocab: &ClassVocabulary,
) -> Result<Vec<GestureInterval>> {
    let err = |line: usize, message: String| Error::Annotation {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut out: Vec<(usize, GestureInterval)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let [start, end, code] = fields[..] else {
            return Err(err(line_no, format!("expected `start end class`, got {raw:?}")));
        };
        let start: usize = start
            .parse()
            .map_err(|_| err(line_no, format!("bad start frame {start:?}")))?;
        let end: usize = end
            .parse()
            .map_err(|_| err(line_no, format!("bad end frame {end:?}")))?;
        if vocab.index_of(code).is_none() {
            return Err(err(
                line_no,
                format!("unknown class id {code:?} for {} vocabulary", vocab.task),
            ));
        }
        if start > end {
            return Err(err(line_no, format!("interval {start}..{end} is reversed")));
        }
        if end >= video.frame_count {
            return Err(err(
                line_no,
                format!(
                    "interval {start}..{end} exceeds {} frames of {}",
                    video.frame_count, video.video_id
                ),
            ));
        }
        out.push((
            line_no,
            GestureInterval {
                start_frame: start,
                end_frame: end,
                class_id: code.to_string(),
            },
        ));
    }
    out.sort_by_key(|(_, iv)| (iv.start_frame, iv.end_frame));
    for pair in out.windows(2) {
        let (_, a) = &pair[0];
        let (line, b) = &pair[1];
        if b.start_frame <= a.end_frame {
            return Err(err(
                *line,
                format!(
                    "interval {}..{} overlaps {}..{}",
                    b.start_frame, b.end_frame, a.start_frame, a.end_frame
                ),
            ));
        }
    }
    Ok(out.into_iter().map(|(_, iv)| iv).collect())
}

/// Per-frame labels; frames outside every interval stay unlabeled.
pub fn labels_from_intervals(intervals: &[GestureInterval], frame_count: usize) -> Vec<Option<String>> {
    let mut labels = vec![None; frame_count];
    for iv in intervals {
        for slot in labels
            .iter_mut()
            .take(iv.end_frame + 1)
            .skip(iv.start_frame)
        {
            *slot = Some(iv.class_id.clone());
        }
    }
    labels
}

/// Phase name as written in annotation files → class id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhaseNameMap(pub BTreeMap<String, String>);

impl PhaseNameMap {
    /// Dataset order mapped onto P1..P7.
    pub fn builtin() -> Self {
        serde_json::from_str(PHASE_MAP).expect("bundled phase map is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }
}

/// What to do when an annotation has more rows than the video has frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowCountPolicy {
    #[default]
    Strict,
    /// Drop surplus rows with a warning. Missing rows are still an error.
    Truncate,
}

pub fn parse_phase_annotation(
    path: &Path,
    video: &VideoMeta,
    name_map: &PhaseNameMap,
    policy: RowCountPolicy,
) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_phase_annotation_str(&text, path, video, name_map, policy)
}

/// Parses a `Frame<TAB>Phase` table with one row per source frame.
pub fn parse_phase_annotation_str(
    text: &str,
    path: &Path,
    video: &VideoMeta,
    name_map: &PhaseNameMap,
    policy: RowCountPolicy,
) -> Result<Vec<String>> {
    let err = |line: usize, message: String| Error::Annotation {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| err(1, e.to_string()))?
        .clone();
    if headers.len() != 2 || &headers[0] != "Frame" || &headers[1] != "Phase" {
        return Err(err(1, format!("expected header Frame<TAB>Phase, got {headers:?}")));
    }
    let mut labels = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| err(line, e.to_string()))?;
        let frame: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| err(line, format!("bad frame index {:?}", &rec[0])))?;
        if frame != row {
            return Err(err(line, format!("expected frame {row}, got {frame}")));
        }
        let name = rec[1].trim();
        let id = name_map
            .get(name)
            .ok_or_else(|| err(line, format!("unmapped phase name {name:?}")))?;
        labels.push(id.to_string());
    }
    let rows = labels.len();
    if rows != video.frame_count {
        if rows > video.frame_count && policy == RowCountPolicy::Truncate {
            log::warn!(
                "{}: {rows} annotation rows for {} frames; truncating",
                path.display(),
                video.frame_count
            );
            labels.truncate(video.frame_count);
        } else {
            return Err(err(
                rows + 1,
                format!(
                    "row count mismatch: {rows} rows for {} frames of {}",
                    video.frame_count, video.video_id
                ),
            ));
        }
    }
    Ok(labels)
}
