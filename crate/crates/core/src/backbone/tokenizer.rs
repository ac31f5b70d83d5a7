//! Text tokenizers producing vocabulary ids for the text tower.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use regex::Regex;

use crate::error::{Error, Result};

const WORD_PATTERN: &str =
    r"<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+";

pub trait Tokenizer: Send + Sync {
    /// Ids for `text` without start/end sentinels.
    fn encode(&self, text: &str) -> Vec<u32>;
    fn start_of_text(&self) -> u32;
    fn end_of_text(&self) -> u32;
}

fn clean(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Byte-level BPE compatible with the CLIP merges file
/// (`bpe_simple_vocab_16e6.txt`, plain or gzip-compressed).
pub struct ClipBpeTokenizer {
    pattern: Regex,
    byte_encoder: [char; 256],
    encoder: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    sot: u32,
    eot: u32,
}

/// The reversible byte → printable-char table used by CLIP's BPE, in
/// vocabulary order.
fn bytes_to_unicode() -> Vec<(u8, char)> {
    let mut printable: Vec<u32> = (u32::from(b'!')..=u32::from(b'~'))
        .chain(0xA1..=0xAC)
        .chain(0xAE..=0xFF)
        .collect();
    let mut chars = printable.clone();
    let mut extra = 0;
    for b in 0..256u32 {
        if !printable.contains(&b) {
            printable.push(b);
            chars.push(256 + extra);
            extra += 1;
        }
    }
    printable
        .into_iter()
        .zip(chars)
        .map(|(b, c)| (b as u8, char::from_u32(c).expect("valid code point")))
        .collect()
}

impl ClipBpeTokenizer {
    pub fn from_file(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
            Box::new(GzDecoder::new(file))
        } else {
            Box::new(file)
        };
        let lines: Vec<String> = BufReader::new(reader)
            .lines()
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(path, e))?;
        Self::from_merge_lines(&lines)
    }

    /// `lines[0]` is the version header; the merge list follows.
    pub fn from_merge_lines(lines: &[String]) -> Result<Self> {
        const MERGES: usize = 49152 - 256 - 2;
        let end = (MERGES + 1).min(lines.len());
        let mut merges = Vec::with_capacity(end.saturating_sub(1));
        for line in lines.iter().take(end).skip(1) {
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) => merges.push((a.to_string(), b.to_string())),
                _ => return Err(Error::input(format!("malformed BPE merge line '{line}'"))),
            }
        }
        let table = bytes_to_unicode();
        let mut byte_encoder = ['\0'; 256];
        let mut vocab: Vec<String> = Vec::with_capacity(2 * 256 + merges.len() + 2);
        for &(b, c) in &table {
            byte_encoder[b as usize] = c;
            vocab.push(c.to_string());
        }
        for &(_, c) in &table {
            vocab.push(format!("{c}</w>"));
        }
        for (a, b) in &merges {
            vocab.push(format!("{a}{b}"));
        }
        let sot = vocab.len() as u32;
        vocab.push("<|startoftext|>".into());
        let eot = vocab.len() as u32;
        vocab.push("<|endoftext|>".into());
        let encoder = vocab
            .into_iter()
            .enumerate()
            .map(|(i, v)| (v, i as u32))
            .collect();
        let ranks = merges.into_iter().enumerate().map(|(i, m)| (m, i)).collect();
        Ok(Self {
            pattern: Regex::new(WORD_PATTERN).expect("static pattern"),
            byte_encoder,
            encoder,
            ranks,
            sot,
            eot,
        })
    }

    fn bpe(&self, word: &str) -> Vec<u32> {
        if let Some(&id) = self.encoder.get(word) {
            // sentinels pass through whole
            if word.starts_with("<|") {
                return vec![id];
            }
        }
        let mut parts: Vec<String> = word
            .bytes()
            .map(|b| self.byte_encoder[b as usize].to_string())
            .collect();
        if parts.is_empty() {
            return Vec::new();
        }
        if let Some(last) = parts.last_mut() {
            last.push_str("</w>");
        }
        while parts.len() > 1 {
            let best = parts
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((_, at)) = best else { break };
            let (first, second) = (parts[at].clone(), parts[at + 1].clone());
            let mut merged = Vec::with_capacity(parts.len());
            let mut i = 0;
            while i < parts.len() {
                if i + 1 < parts.len() && parts[i] == first && parts[i + 1] == second {
                    merged.push(format!("{first}{second}"));
                    i += 2;
                } else {
                    merged.push(parts[i].clone());
                    i += 1;
                }
            }
            parts = merged;
        }
        parts
            .iter()
            .filter_map(|p| self.encoder.get(p).copied())
            .collect()
    }
}

impl Tokenizer for ClipBpeTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        let text = clean(text);
        self.pattern
            .find_iter(&text)
            .flat_map(|m| self.bpe(m.as_str()))
            .collect()
    }

    fn start_of_text(&self) -> u32 {
        self.sot
    }

    fn end_of_text(&self) -> u32 {
        self.eot
    }
}

/// Word-level tokenizer hashing each word into a fixed vocabulary. Used
/// with randomly initialized towers, where no merges file exists.
#[derive(Debug, Clone)]
pub struct HashTokenizer {
    pattern: Regex,
    vocab_size: u32,
}

impl HashTokenizer {
    pub fn new(vocab_size: usize) -> Result<Self> {
        if vocab_size < 3 {
            return Err(Error::input("hash tokenizer needs a vocabulary of at least 3"));
        }
        Ok(Self {
            pattern: Regex::new(WORD_PATTERN).expect("static pattern"),
            vocab_size: vocab_size as u32,
        })
    }

    fn fnv1a(word: &str) -> u64 {
        word.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
            (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
        })
    }
}

impl Tokenizer for HashTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        let text = clean(text);
        let buckets = u64::from(self.vocab_size - 2);
        self.pattern
            .find_iter(&text)
            .map(|m| (Self::fnv1a(m.as_str()) % buckets) as u32)
            .collect()
    }

    fn start_of_text(&self) -> u32 {
        self.vocab_size - 2
    }

    fn end_of_text(&self) -> u32 {
        self.vocab_size - 1
    }
}
