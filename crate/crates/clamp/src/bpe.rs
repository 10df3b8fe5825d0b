//! CLIP's byte-level BPE tokenizer, read from its merges file.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use clamp_core::prompt::Tokenizer;

use crate::error::{read, Error, Result};

/// Merges used by CLIP: the vocabulary holds 49408 entries in total.
pub const CLIP_MERGES: usize = 49152 - 256 - 2;

#[derive(Clone, Debug)]
pub struct BpeTokenizer {
    encoder: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    sot: u32,
    eot: u32,
}

/// Reversible byte-to-printable-character table.
fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let printable = |b: u32| (33..=126).contains(&b) || (161..=172).contains(&b) || (174..=255).contains(&b);
    let mut extra = 0;
    for b in 0..256u32 {
        let c = if printable(b) {
            b
        } else {
            extra += 1;
            255 + extra
        };
        table[b as usize] = char::from_u32(c).expect("valid scalar");
    }
    table
}

/// Vocabulary order: single characters by byte-table order of the
/// printable range first, then the rest.
fn byte_order(table: &[char; 256]) -> Vec<char> {
    let mut printable: Vec<(u32, char)> = Vec::new();
    let mut rest = Vec::new();
    for &c in table {
        if (c as u32) < 256 {
            printable.push((c as u32, c));
        } else {
            rest.push(c);
        }
    }
    printable.sort();
    printable.into_iter().map(|(_, c)| c).chain(rest).collect()
}

impl BpeTokenizer {
    /// Reads a merges file (plain text or gzip); the first line is a header.
    /// At most `max_merges` merges are used.
    pub fn from_file(path: &Path, max_merges: usize) -> Result<Self> {
        let bytes = read(path)?;
        let text = if bytes.starts_with(&[0x1f, 0x8b]) {
            let mut s = String::new();
            flate2::read::GzDecoder::new(&bytes[..])
                .read_to_string(&mut s)
                .map_err(|e| Error::format(path, format!("gzip: {e}")))?;
            s
        } else {
            String::from_utf8(bytes).map_err(|e| Error::format(path, e.to_string()))?
        };
        Self::from_merges(&text, max_merges).map_err(|msg| Error::format(path, msg))
    }

    pub fn from_merges(text: &str, max_merges: usize) -> std::result::Result<Self, String> {
        let byte_encoder = bytes_to_unicode();
        let mut vocab: Vec<String> = byte_order(&byte_encoder).into_iter().map(String::from).collect();
        let singles = vocab.clone();
        vocab.extend(singles.iter().map(|s| format!("{s}</w>")));
        let mut ranks = HashMap::new();
        for (i, line) in text.lines().skip(1).filter(|l| !l.trim().is_empty()).take(max_merges).enumerate() {
            let mut parts = line.split_whitespace();
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(format!("merge line {} is not a pair: {line:?}", i + 2));
            };
            vocab.push(format!("{a}{b}"));
            ranks.insert((a.to_string(), b.to_string()), i);
        }
        vocab.push("<|startoftext|>".into());
        vocab.push("<|endoftext|>".into());
        let encoder: HashMap<String, u32> = vocab.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Ok(BpeTokenizer {
            sot: encoder["<|startoftext|>"],
            eot: encoder["<|endoftext|>"],
            encoder,
            ranks,
            byte_encoder,
        })
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let chars: Vec<char> = word.chars().collect();
        let mut parts: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
        if let Some(last) = parts.last_mut() {
            last.push_str("</w>");
        }
        loop {
            let best = parts
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((_, _)) = best else { break };
            let (rank, _) = best.expect("checked");
            let mut merged = Vec::with_capacity(parts.len());
            let mut i = 0;
            while i < parts.len() {
                if i + 1 < parts.len() && self.ranks.get(&(parts[i].clone(), parts[i + 1].clone())) == Some(&rank) {
                    merged.push(format!("{}{}", parts[i], parts[i + 1]));
                    i += 2;
                } else {
                    merged.push(parts[i].clone());
                    i += 1;
                }
            }
            parts = merged;
        }
        parts
    }
}

/// Pre-tokenization: contractions, letter runs, single digits, and runs of
/// other non-space characters.
fn pieces(text: &str) -> Vec<String> {
    let lower = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '\'' {
            let rest: String = chars[i + 1..].iter().take(2).collect();
            if let Some(suffix) = ["re", "ve", "ll", "s", "t", "m", "d"].iter().find(|s| rest.starts_with(**s)) {
                out.push(format!("'{suffix}"));
                i += 1 + suffix.len();
                continue;
            }
        }
        let start = i;
        if c.is_alphabetic() {
            while i < chars.len() && chars[i].is_alphabetic() {
                i += 1;
            }
        } else if c.is_numeric() {
            i += 1;
        } else {
            while i < chars.len() && !chars[i].is_whitespace() && !chars[i].is_alphanumeric() {
                i += 1;
            }
        }
        out.push(chars[start..i].iter().collect());
    }
    out
}

impl Tokenizer for BpeTokenizer {
    fn sot(&self) -> u32 {
        self.sot
    }

    fn eot(&self) -> u32 {
        self.eot
    }

    fn vocab_size(&self) -> usize {
        self.encoder.len()
    }

    fn tokenize(&self, text: &str) -> clamp_core::Result<Vec<u32>> {
        let mut ids = Vec::new();
        for piece in pieces(text) {
            let mapped: String = piece.bytes().map(|b| self.byte_encoder[b as usize]).collect();
            for tok in self.bpe(&mapped) {
                let id = self.encoder.get(&tok).ok_or_else(|| clamp_core::Error::Untokenizable {
                    name: text.to_string(),
                    reason: format!("token {tok:?} is not in the vocabulary"),
                })?;
                ids.push(*id);
            }
        }
        Ok(ids)
    }
}
