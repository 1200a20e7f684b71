//! Text tokenizers feeding the text tower.

use std::collections::HashMap;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token ids for a batch, padded to a common context length.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub context_length: usize,
    /// `batch × context_length` ids, row-major.
    pub ids: Vec<usize>,
    /// Number of real (non-padding) tokens per sequence, at least 1.
    pub lengths: Vec<usize>,
    /// Index of the pooling token (end-of-text) per sequence.
    pub eot_positions: Vec<usize>,
}

impl TokenBatch {
    pub fn batch(&self) -> usize {
        self.lengths.len()
    }
}

/// Lowercased alphanumeric words hashed into a fixed vocabulary.
///
/// Id 0 is padding and id 1 a start token present in every sequence, so no
/// sequence is empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashTokenizer {
    pub vocab_size: usize,
    pub context_length: usize,
}

impl HashTokenizer {
    pub const PAD: usize = 0;
    pub const START: usize = 1;

    pub fn token_id(&self, word: &str) -> usize {
        // FNV-1a, stable across platforms and toolchains.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in word.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        2 + (h % (self.vocab_size as u64 - 2)) as usize
    }

    pub fn encode(&self, texts: &[String]) -> TokenBatch {
        let t = self.context_length;
        let mut ids = vec![Self::PAD; texts.len() * t];
        let mut lengths = Vec::with_capacity(texts.len());
        for (b, text) in texts.iter().enumerate() {
            let row = &mut ids[b * t..(b + 1) * t];
            row[0] = Self::START;
            let mut n = 1;
            let lower = text.to_lowercase();
            for word in lower
                .split(|c: char| !c.is_alphanumeric())
                .filter(|w| !w.is_empty())
            {
                if n == t {
                    break;
                }
                row[n] = self.token_id(word);
                n += 1;
            }
            lengths.push(n);
        }
        let eot_positions = lengths.iter().map(|&n| n - 1).collect();
        TokenBatch {
            context_length: t,
            ids,
            lengths,
            eot_positions,
        }
    }
}

/// Byte-level BPE compatible with the CLIP tokenizer files
/// (`vocab.json` + `merges.txt`).
#[derive(Debug, Clone)]
pub struct BpeTokenizer {
    encoder: HashMap<String, usize>,
    ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    pattern: Regex,
    start_id: usize,
    end_id: usize,
    pub context_length: usize,
}

const START_TOKEN: &str = "<|startoftext|>";
const END_TOKEN: &str = "<|endoftext|>";

impl BpeTokenizer {
    pub fn from_files(vocab: &Path, merges: &Path, context_length: usize) -> Result<Self> {
        let vocab_text = std::fs::read_to_string(vocab).map_err(|e| Error::io(vocab, e))?;
        let merges_text = std::fs::read_to_string(merges).map_err(|e| Error::io(merges, e))?;
        Self::from_strs(&vocab_text, &merges_text, context_length)
    }

    pub fn from_strs(vocab_json: &str, merges_txt: &str, context_length: usize) -> Result<Self> {
        let encoder: HashMap<String, usize> =
            serde_json::from_str(vocab_json).map_err(|e| Error::parse("vocab.json", e))?;
        let mut ranks = HashMap::new();
        for (rank, line) in merges_txt
            .lines()
            .filter(|l| !l.starts_with("#version") && !l.trim().is_empty())
            .enumerate()
        {
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next()) {
                (Some(a), Some(b)) => {
                    ranks.insert((a.to_string(), b.to_string()), rank);
                }
                _ => return Err(Error::parse("merges.txt", format!("bad line {line:?}"))),
            }
        }
        let lookup = |tok: &str| {
            encoder
                .get(tok)
                .copied()
                .ok_or_else(|| Error::parse("vocab.json", format!("missing {tok}")))
        };
        let start_id = lookup(START_TOKEN)?;
        let end_id = lookup(END_TOKEN)?;
        if context_length < 2 {
            return Err(Error::InvalidInput("context length must be >= 2".into()));
        }
        let pattern = Regex::new(
            r"(?i)<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+",
        )
        .expect("static regex");
        Ok(Self {
            encoder,
            ranks,
            byte_encoder: bytes_to_unicode(),
            pattern,
            start_id,
            end_id,
            context_length,
        })
    }

    fn bpe(&self, token: &str) -> Vec<String> {
        let chars: Vec<char> = token.chars().collect();
        let mut word: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
        if let Some(last) = word.last_mut() {
            last.push_str("</w>");
        }
        loop {
            let best = word
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len()
                    && self.ranks.get(&(word[i].clone(), word[i + 1].clone())) == Some(&rank)
                {
                    merged.push(format!("{}{}", word[i], word[i + 1]));
                    i += 2;
                } else {
                    merged.push(word[i].clone());
                    i += 1;
                }
            }
            word = merged;
            if word.len() == 1 {
                break;
            }
        }
        word
    }

    /// Token ids of one text without start/end markers.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let cleaned = text.split_whitespace().collect::<Vec<_>>().join(" ");
        let lower = cleaned.to_lowercase();
        let mut out = Vec::new();
        for m in self.pattern.find_iter(&lower) {
            let mapped: String = m
                .as_str()
                .bytes()
                .map(|b| self.byte_encoder[b as usize])
                .collect();
            for piece in self.bpe(&mapped) {
                if let Some(&id) = self.encoder.get(&piece) {
                    out.push(id);
                }
            }
        }
        out
    }

    /// `[start] tokens… [end]`, truncated to the context and padded with the
    /// end token.
    pub fn encode(&self, texts: &[String]) -> TokenBatch {
        let t = self.context_length;
        let mut ids = vec![self.end_id; texts.len() * t];
        let mut lengths = Vec::with_capacity(texts.len());
        let mut eot_positions = Vec::with_capacity(texts.len());
        for (b, text) in texts.iter().enumerate() {
            let mut toks = self.tokenize(text);
            toks.truncate(t - 2);
            let row = &mut ids[b * t..(b + 1) * t];
            row[0] = self.start_id;
            row[1..1 + toks.len()].copy_from_slice(&toks);
            row[1 + toks.len()] = self.end_id;
            lengths.push(toks.len() + 2);
            eot_positions.push(toks.len() + 1);
        }
        TokenBatch {
            context_length: t,
            ids,
            lengths,
            eot_positions,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder.values().max().map_or(0, |m| m + 1)
    }
}

/// Reversible byte → printable-char table used by byte-level BPE.
fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let printable = |b: u32| {
        (u32::from('!')..=u32::from('~')).contains(&b)
            || (0xA1..=0xAC).contains(&b)
            || (0xAE..=0xFF).contains(&b)
    };
    let mut extra = 0u32;
    for b in 0..256u32 {
        table[b as usize] = if printable(b) {
            char::from_u32(b).expect("latin-1")
        } else {
            let c = char::from_u32(256 + extra).expect("valid codepoint");
            extra += 1;
            c
        };
    }
    table
}
