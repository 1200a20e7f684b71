//! Text banks: class identifiers with a canonical description and four
//! paraphrases per class, for the gesture and phase tasks.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

/// Number of paraphrases every class carries besides its canonical text.
pub const PARAPHRASES_PER_CLASS: usize = 4;
/// Canonical plus paraphrases.
pub const TEXTS_PER_CLASS: usize = PARAPHRASES_PER_CLASS + 1;

const GESTURE_BANK: &str = include_str!("../data/jigsaws_gestures.json");
const PHASE_BANK: &str = include_str!("../data/cholec80_phases.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Gesture,
    Phase,
}

impl Task {
    /// Exact number of classes a vocabulary for this task must hold.
    pub fn class_count(self) -> usize {
        match self {
            Task::Gesture => 15,
            Task::Phase => 7,
        }
    }

    pub fn id_prefix(self) -> char {
        match self {
            Task::Gesture => 'G',
            Task::Phase => 'P',
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Gesture => f.write_str("gesture"),
            Task::Phase => f.write_str("phase"),
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gesture" => Ok(Task::Gesture),
            "phase" => Ok(Task::Phase),
            other => Err(Error::InvalidInput(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    #[serde(rename = "id")]
    pub class_id: String,
    pub canonical: String,
    pub paraphrases: Vec<String>,
}

/// Which texts of a class to hand to the text encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    CanonicalOnly,
    AllTexts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassVocabulary {
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
    #[serde(rename = "classes")]
    pub entries: Vec<ClassEntry>,
}

impl ClassVocabulary {
    /// Builds and validates a vocabulary.
    pub fn new(task: Task, entries: Vec<ClassEntry>) -> Result<Self> {
        let vocab = Self {
            task,
            notes: None,
            entries,
        };
        vocab.validate()?;
        Ok(vocab)
    }

    /// The bundled JIGSAWS gesture bank (G1..G15).
    pub fn builtin_gestures() -> Self {
        Self::from_json_str(GESTURE_BANK).expect("bundled gesture bank is valid")
    }

    /// The bundled Cholec80 phase bank (P1..P7).
    pub fn builtin_phases() -> Self {
        Self::from_json_str(PHASE_BANK).expect("bundled phase bank is valid")
    }

    pub fn builtin(task: Task) -> Self {
        match task {
            Task::Gesture => Self::builtin_gestures(),
            Task::Phase => Self::builtin_phases(),
        }
    }

    pub fn from_json_str(json: &str) -> Result<Self> {
        let vocab: ClassVocabulary =
            serde_json::from_str(json).map_err(|e| Error::parse("vocabulary", e))?;
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocabulary serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        util::write_atomic(path.as_ref(), self.to_json_string().as_bytes())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn class_ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.class_id.clone()).collect()
    }

    pub fn index_of(&self, class_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.class_id == class_id)
    }

    pub fn entry(&self, class_id: &str) -> Result<&ClassEntry> {
        self.entries
            .iter()
            .find(|e| e.class_id == class_id)
            .ok_or_else(|| Error::UnknownClass {
                class_id: class_id.to_string(),
                task: self.task.to_string(),
            })
    }

    /// `CanonicalOnly` yields `[canonical]`; `AllTexts` yields the canonical
    /// followed by the four paraphrases.
    pub fn prompts_for_class(&self, class_id: &str, mode: PromptMode) -> Result<Vec<String>> {
        let entry = self.entry(class_id)?;
        let mut out = vec![entry.canonical.clone()];
        if mode == PromptMode::AllTexts {
            out.extend(entry.paraphrases.iter().cloned());
        }
        Ok(out)
    }

    /// Narrative sentence used in reports: always the canonical description.
    pub fn narrative_for(&self, class_id: &str) -> Result<&str> {
        Ok(self.entry(class_id)?.canonical.as_str())
    }

    fn validate(&self) -> Result<()> {
        let expected = self.task.class_count();
        if self.entries.len() != expected {
            return Err(Error::vocab(
                None,
                format!(
                    "wrong entry count: expected {expected}, got {}",
                    self.entries.len()
                ),
            ));
        }
        let mut seen = HashSet::new();
        for entry in &self.entries {
            let id = entry.class_id.as_str();
            if id.is_empty() {
                return Err(Error::vocab(None, "missing class_id"));
            }
            if !is_class_code(id) {
                return Err(Error::vocab(
                    Some(id),
                    "class_id must be a letter followed by an integer",
                ));
            }
            if !id.starts_with(self.task.id_prefix()) {
                return Err(Error::vocab(
                    Some(id),
                    format!("class_id does not belong to the {} task", self.task),
                ));
            }
            if !seen.insert(id) {
                return Err(Error::vocab(Some(id), "duplicate class_id"));
            }
            if entry.canonical.trim().is_empty() {
                return Err(Error::vocab(Some(id), "canonical description is empty"));
            }
            if entry.paraphrases.len() != PARAPHRASES_PER_CLASS {
                return Err(Error::vocab(
                    Some(id),
                    format!(
                        "paraphrase count: expected {PARAPHRASES_PER_CLASS}, got {}",
                        entry.paraphrases.len()
                    ),
                ));
            }
            let mut texts = HashSet::new();
            texts.insert(entry.canonical.as_str());
            for p in &entry.paraphrases {
                if p.trim().is_empty() {
                    return Err(Error::vocab(Some(id), "empty paraphrase"));
                }
                if !texts.insert(p.as_str()) {
                    return Err(Error::vocab(
                        Some(id),
                        format!("paraphrase {p:?} duplicates another text of the class"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// `letter + integer`, e.g. `G12`.
pub fn is_class_code(id: &str) -> bool {
    let mut chars = id.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() => {}
        _ => return false,
    }
    let rest = chars.as_str();
    !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit())
}

/// Loads and validates a vocabulary file.
pub fn load_vocabulary(path: impl AsRef<Path>) -> Result<ClassVocabulary> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ClassVocabulary::from_json_str(&text)
}
