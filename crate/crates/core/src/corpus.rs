//! Token corpora: on-disk formats and the synthetic training language.
//!
//! Two file formats are accepted by [`load_corpus`]:
//!
//! * text: one sequence per line, space-separated unsigned decimal token ids
//!   (blank lines are skipped);
//! * binary: magic `LMTS`, u32 version, then per sequence a u64 length
//!   followed by that many little-endian u32 ids, until end of file.
//!
//! Id [`SENTENCE_SEPARATOR`] marks sentence boundaries for ROUGE-LSum.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{substream, CORPUS_STREAM};

pub const SENTENCE_SEPARATOR: u32 = 0xFFFF_FFFE;
const BINARY_MAGIC: &[u8; 4] = b"LMTS";
const BINARY_VERSION: u32 = 1;

pub type Sequence = Vec<u32>;

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Sequence>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&bytes)
}

/// Parses either corpus format, detected by the binary magic.
pub fn parse_corpus(bytes: &[u8]) -> Result<Vec<Sequence>> {
    if bytes.starts_with(BINARY_MAGIC) {
        parse_binary(bytes)
    } else {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
            location: format!("byte {}", e.valid_up_to()),
            message: "corpus text is not valid UTF-8".into(),
        })?;
        parse_text(text)
    }
}

pub fn parse_text(text: &str) -> Result<Vec<Sequence>> {
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut seq = Vec::new();
        for field in line.split_whitespace() {
            let id = field.parse::<u32>().map_err(|_| Error::Parse {
                location: format!("line {}", line_no + 1),
                message: format!("malformed token id `{field}`"),
            })?;
            seq.push(id);
        }
        out.push(seq);
    }
    Ok(out)
}

fn parse_binary(bytes: &[u8]) -> Result<Vec<Sequence>> {
    let truncated = |offset: usize| Error::Parse {
        location: format!("byte {offset}"),
        message: "truncated binary corpus".into(),
    };
    let mut offset = 4;
    let version = bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| truncated(offset))?;
    if version != BINARY_VERSION {
        return Err(Error::Parse {
            location: format!("byte {offset}"),
            message: format!("unsupported corpus version {version}"),
        });
    }
    offset += 4;
    let mut out = Vec::new();
    while offset < bytes.len() {
        let len = bytes
            .get(offset..offset + 8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| truncated(offset))? as usize;
        offset += 8;
        let end = len
            .checked_mul(4)
            .and_then(|n| n.checked_add(offset))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| truncated(offset))?;
        out.push(
            bytes[offset..end]
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
        offset = end;
    }
    Ok(out)
}

pub fn to_binary(corpus: &[Sequence]) -> Vec<u8> {
    let total: usize = corpus.iter().map(|s| 8 + 4 * s.len()).sum();
    let mut out = Vec::with_capacity(8 + total);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    for seq in corpus {
        out.extend_from_slice(&(seq.len() as u64).to_le_bytes());
        for id in seq {
            out.extend_from_slice(&id.to_le_bytes());
        }
    }
    out
}

pub fn to_text(corpus: &[Sequence]) -> String {
    let mut out = String::new();
    for seq in corpus {
        let line: Vec<String> = seq.iter().map(u32::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Writes the binary format when the extension is `.bin`, text otherwise.
pub fn save_corpus(path: impl AsRef<Path>, corpus: &[Sequence]) -> Result<()> {
    let path = path.as_ref();
    let bytes = if path.extension().is_some_and(|e| e == "bin") {
        to_binary(corpus)
    } else {
        to_text(corpus).into_bytes()
    };
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))
}

/// Splits a token stream at [`SENTENCE_SEPARATOR`], dropping empty sentences.
pub fn split_sentences(tokens: &[u32]) -> Vec<&[u32]> {
    tokens
        .split(|&t| t == SENTENCE_SEPARATOR)
        .filter(|s| !s.is_empty())
        .collect()
}

/// A stochastic regular language of noisy repeating motifs.
///
/// A language owns a fixed inventory of `motifs` random motifs. Each sequence
/// is a run of segments; a segment picks an inventory motif and repeats it from
/// a random phase, and every token is independently replaced by a uniform
/// random token with probability `noise`. With `motifs == 0` each segment draws
/// a fresh motif instead. With `bos`, id [`BOS`] is reserved and opens every
/// sequence. Apart from that first token, statistics do not depend on absolute
/// position.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLanguage {
    pub vocab_size: u32,
    pub motif_len: (usize, usize),
    pub segment_len: (usize, usize),
    pub noise: f64,
    pub motifs: usize,
    pub bos: bool,
}

/// Start-of-sequence id of the synthetic language.
pub const BOS: u32 = 0;

impl Default for SyntheticLanguage {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            motif_len: (4, 12),
            segment_len: (24, 96),
            noise: 0.1,
            motifs: 64,
            bos: true,
        }
    }
}

impl SyntheticLanguage {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 + self.bos as u32 {
            return Err(Error::invalid(
                "synthetic vocabulary needs at least 2 content tokens",
            ));
        }
        if self.motif_len.0 == 0 || self.motif_len.0 > self.motif_len.1 {
            return Err(Error::invalid("bad motif length range"));
        }
        if self.segment_len.0 == 0 || self.segment_len.0 > self.segment_len.1 {
            return Err(Error::invalid("bad segment length range"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::invalid("noise must be a probability"));
        }
        Ok(())
    }

    fn content_token<R: Rng>(&self, rng: &mut R) -> u32 {
        rng.random_range(self.bos as u32..self.vocab_size)
    }

    fn random_motif<R: Rng>(&self, rng: &mut R) -> Vec<u32> {
        let period = rng.random_range(self.motif_len.0..=self.motif_len.1);
        (0..period).map(|_| self.content_token(rng)).collect()
    }

    /// Draws the motif inventory; empty when `motifs == 0`.
    pub fn inventory<R: Rng>(&self, rng: &mut R) -> Vec<Vec<u32>> {
        (0..self.motifs).map(|_| self.random_motif(rng)).collect()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, inventory: &[Vec<u32>], len: usize) -> Sequence {
        let mut seq = Vec::with_capacity(len);
        if self.bos && len > 0 {
            seq.push(BOS);
        }
        while seq.len() < len {
            let fresh;
            let motif = if inventory.is_empty() {
                fresh = self.random_motif(rng);
                &fresh
            } else {
                &inventory[rng.random_range(0..inventory.len())]
            };
            let period = motif.len();
            let seg_len = rng.random_range(self.segment_len.0..=self.segment_len.1);
            let phase = rng.random_range(0..period);
            for t in 0..seg_len.min(len - seq.len()) {
                let token = if rng.random_bool(self.noise) {
                    self.content_token(rng)
                } else {
                    motif[(t + phase) % period]
                };
                seq.push(token);
            }
        }
        seq
    }

    /// `count` sequences of `len` tokens from the synthetic-corpus stream of `seed`.
    pub fn generate(&self, seed: u64, count: usize, len: usize) -> Result<Vec<Sequence>> {
        Ok(self.generate_groups(seed, &[(count, len)])?.remove(0))
    }

    /// One group of `count` sequences of `len` tokens per `(count, len)` entry,
    /// all drawn from one stream after the shared motif inventory: groups speak
    /// the same language and never repeat each other's samples.
    pub fn generate_groups(
        &self,
        seed: u64,
        groups: &[(usize, usize)],
    ) -> Result<Vec<Vec<Sequence>>> {
        self.validate()?;
        let mut rng = substream(seed, CORPUS_STREAM);
        let inventory = self.inventory(&mut rng);
        Ok(groups
            .iter()
            .map(|&(count, len)| {
                (0..count)
                    .map(|_| self.sample(&mut rng, &inventory, len))
                    .collect()
            })
            .collect())
    }
}

/// Entropy (nats) of the empirical unigram distribution.
pub fn unigram_entropy(corpus: &[Sequence]) -> f64 {
    let mut counts = std::collections::HashMap::<u32, usize>::new();
    let mut total = 0usize;
    for &t in corpus.iter().flatten() {
        *counts.entry(t).or_default() += 1;
        total += 1;
    }
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_format() {
        assert!(parse_corpus(b"").unwrap().is_empty());
        assert_eq!(parse_corpus(b"1 2 3").unwrap(), vec![vec![1, 2, 3]]);
        assert_eq!(
            parse_corpus(b"4 5\n\n6\n").unwrap(),
            vec![vec![4, 5], vec![6]]
        );
        match parse_corpus(b"1 2\n3 x 4\n") {
            Err(Error::Parse { location, .. }) => assert_eq!(location, "line 2"),
            other => panic!("{other:?}"),
        }
        assert!(parse_corpus(b"-1").is_err());
    }

    #[test]
    fn binary_truncation_reports_offset() {
        let bytes = to_binary(&[vec![1, 2, 3]]);
        match parse_corpus(&bytes[..bytes.len() - 2]) {
            Err(Error::Parse { location, .. }) => assert_eq!(location, "byte 16"),
            other => panic!("{other:?}"),
        }
        assert!(parse_corpus(b"LMTS").is_err());
    }

    #[test]
    fn sentences() {
        let s = SENTENCE_SEPARATOR;
        let toks = [1, 2, s, 3, s, s, 4];
        assert_eq!(split_sentences(&toks), vec![&[1, 2][..], &[3], &[4]]);
    }

    #[test]
    fn synthetic_is_deterministic_and_in_vocab() {
        let lang = SyntheticLanguage::default();
        let a = lang.generate(5, 3, 300).unwrap();
        let b = lang.generate(5, 3, 300).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.len() == 300));
        assert!(a.iter().flatten().all(|&t| t < 256));
        assert_ne!(a, lang.generate(6, 3, 300).unwrap());
    }

    #[test]
    fn bos_opens_every_sequence_and_nowhere_else() {
        let lang = SyntheticLanguage::default();
        for seq in lang.generate(2, 4, 200).unwrap() {
            assert_eq!(seq[0], BOS);
            assert!(seq[1..].iter().all(|&t| t != BOS));
        }
        let plain = SyntheticLanguage {
            bos: false,
            ..SyntheticLanguage::default()
        };
        assert!(plain
            .generate(2, 4, 200)
            .unwrap()
            .iter()
            .flatten()
            .any(|&t| t == BOS));
    }

    #[test]
    fn groups_share_a_language_without_repeating() {
        let lang = SyntheticLanguage::default();
        let groups = lang.generate_groups(3, &[(2, 40), (1, 90)]).unwrap();
        assert_eq!(groups[0], lang.generate(3, 2, 40).unwrap());
        assert_eq!(groups[1][0].len(), 90);
        assert_ne!(groups[1][0][..40], groups[0][0][..]);
    }

    #[test]
    fn unigram_entropy_of_uniform_stream() {
        let corpus = vec![(0..8).collect::<Vec<u32>>()];
        assert!((unigram_entropy(&corpus) - 8f64.ln()).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn binary_round_trip(corpus in proptest::collection::vec(proptest::collection::vec(any::<u32>(), 0..40), 0..8)) {
                prop_assert_eq!(parse_corpus(&to_binary(&corpus)).unwrap(), corpus.clone());
                let non_empty: Vec<Sequence> = corpus.into_iter().filter(|s| !s.is_empty()).collect();
                prop_assert_eq!(parse_corpus(to_text(&non_empty).as_bytes()).unwrap(), non_empty);
            }
        }
    }
}
