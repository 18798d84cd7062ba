//! Corpus preprocessing, vocabularies and contiguous block streams.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";

/// Lowercases and replaces every character outside `a..z` by one space.
/// Runs of spaces are kept as they are.
pub fn preprocess_text8(raw: &[u8]) -> String {
    String::from_utf8_lossy(raw)
        .chars()
        .map(|c| {
            let c = c.to_ascii_lowercase();
            if c.is_ascii_lowercase() {
                c
            } else {
                ' '
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMode {
    /// Unicode scalar values.
    Char,
    /// Raw bytes.
    Byte,
    /// Whitespace-separated words.
    Word,
}

impl TokenMode {
    pub fn name(self) -> &'static str {
        match self {
            TokenMode::Char => "char",
            TokenMode::Byte => "byte",
            TokenMode::Word => "word",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(TokenMode::Char),
            "byte" => Ok(TokenMode::Byte),
            "word" => Ok(TokenMode::Word),
            _ => Err(Error::Config(format!(
                "unknown token mode `{s}` (char, byte, word)"
            ))),
        }
    }

    /// Splits `raw` into tokens, each as its byte string.
    pub fn tokenize<'a>(self, raw: &'a [u8]) -> Box<dyn Iterator<Item = &'a [u8]> + 'a> {
        match self {
            TokenMode::Byte => Box::new(raw.chunks(1)),
            TokenMode::Char => Box::new(CharSplit(raw)),
            TokenMode::Word => Box::new(
                raw.split(|b| b.is_ascii_whitespace())
                    .filter(|w| !w.is_empty()),
            ),
        }
    }
}

/// UTF-8 characters as byte slices; an invalid byte stands alone.
struct CharSplit<'a>(&'a [u8]);

impl<'a> Iterator for CharSplit<'a> {
    type Item = &'a [u8];

    fn next(&mut self) -> Option<&'a [u8]> {
        let first = *self.0.first()?;
        let width = match first {
            0x00..=0x7f => 1,
            0xc0..=0xdf => 2,
            0xe0..=0xef => 3,
            0xf0..=0xf7 => 4,
            _ => 1,
        };
        let width = if width <= self.0.len() && std::str::from_utf8(&self.0[..width]).is_ok() {
            width
        } else {
            1
        };
        let (head, rest) = self.0.split_at(width);
        self.0 = rest;
        Some(head)
    }
}

/// Frequency-ranked vocabulary: id 0 is the most frequent token.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pub mode: TokenMode,
    pub tokens: Vec<Vec<u8>>,
    pub freqs: Vec<u64>,
    pub unk: Option<usize>,
    index: HashMap<Vec<u8>, usize>,
}

impl Vocabulary {
    fn from_ranked(mode: TokenMode, ranked: Vec<(Vec<u8>, u64)>) -> Self {
        let index = ranked
            .iter()
            .enumerate()
            .map(|(i, (t, _))| (t.clone(), i))
            .collect();
        let unk = ranked
            .iter()
            .position(|(t, _)| mode == TokenMode::Word && t == UNK.as_bytes());
        let (tokens, freqs) = ranked.into_iter().unzip();
        Self {
            mode,
            tokens,
            freqs,
            unk,
            index,
        }
    }

    /// Counts tokens of `stream` and ranks them by frequency, ties broken by
    /// byte order. In word mode, tokens seen fewer than `min_count` times are
    /// pooled into an unknown token.
    pub fn build(stream: &[u8], mode: TokenMode, min_count: u64) -> Result<Self> {
        let mut counts: HashMap<&[u8], u64> = HashMap::new();
        for t in mode.tokenize(stream) {
            *counts.entry(t).or_default() += 1;
        }
        if counts.is_empty() {
            return Err(Error::Data(
                "cannot build a vocabulary from an empty stream".into(),
            ));
        }
        let mut ranked: Vec<(Vec<u8>, u64)> = Vec::with_capacity(counts.len());
        let mut unk = 0;
        for (t, c) in counts {
            if mode == TokenMode::Word && (c < min_count || t == UNK.as_bytes()) {
                unk += c;
            } else {
                ranked.push((t.to_vec(), c));
            }
        }
        if unk > 0 {
            ranked.push((UNK.as_bytes().to_vec(), unk));
        }
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_ranked(mode, ranked))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &[u8]) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Token ids of `stream`. Out-of-vocabulary words map to the unknown
    /// token when there is one; otherwise the first unseen token is an error.
    pub fn encode(&self, stream: &[u8]) -> Result<Vec<usize>> {
        self.mode
            .tokenize(stream)
            .enumerate()
            .map(|(i, t)| {
                self.id(t).or(self.unk).ok_or_else(|| {
                    Error::Data(format!(
                        "token {:?} at index {i} is not in the vocabulary",
                        String::from_utf8_lossy(t)
                    ))
                })
            })
            .collect()
    }

    /// Inverse of [`encode`](Self::encode) for in-vocabulary tokens; words
    /// are joined by single spaces.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for (i, &id) in ids.iter().enumerate() {
            let t = self.tokens.get(id).ok_or_else(|| {
                Error::Data(format!(
                    "id {id} out of range for vocabulary of {}",
                    self.len()
                ))
            })?;
            if self.mode == TokenMode::Word && i > 0 {
                out.push(b' ');
            }
            out.extend_from_slice(t);
        }
        Ok(out)
    }

    /// One `token<TAB>frequency` line per entry in rank order, preceded by a
    /// `#mode` line. Backslash, tab, newline, carriage return and bytes that
    /// are not valid UTF-8 are escaped.
    pub fn to_text(&self) -> String {
        let mut s = format!("#{}\n", self.mode.name());
        for (t, f) in self.tokens.iter().zip(&self.freqs) {
            let _ = writeln!(s, "{}\t{f}", escape(t));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, m: &str| Error::Data(format!("vocabulary line {line}: {m}"));
        let mut lines = text.lines();
        let mode = lines
            .next()
            .and_then(|l| l.strip_prefix('#'))
            .ok_or_else(|| bad(1, "missing #mode header"))?;
        let mode = TokenMode::parse(mode).map_err(|_| bad(1, "unknown mode"))?;
        let mut ranked = Vec::new();
        for (i, line) in lines.enumerate() {
            let (tok, freq) = line
                .rsplit_once('\t')
                .ok_or_else(|| bad(i + 2, "expected token<TAB>frequency"))?;
            let freq = freq.parse().map_err(|_| bad(i + 2, "bad frequency"))?;
            ranked.push((unescape(tok).ok_or_else(|| bad(i + 2, "bad escape"))?, freq));
        }
        if ranked.is_empty() {
            return Err(Error::Data("vocabulary file has no entries".into()));
        }
        Ok(Self::from_ranked(mode, ranked))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read vocabulary {}: {e}", path.display())))?;
        Self::from_text(&text)
    }
}

fn escape(t: &[u8]) -> String {
    let mut s = String::new();
    for chunk in t.utf8_chunks() {
        for c in chunk.valid().chars() {
            match c {
                '\\' => s.push_str("\\\\"),
                '\t' => s.push_str("\\t"),
                '\n' => s.push_str("\\n"),
                '\r' => s.push_str("\\r"),
                c => s.push(c),
            }
        }
        for b in chunk.invalid() {
            let _ = write!(s, "\\x{b:02x}");
        }
    }
    s
}

fn unescape(s: &str) -> Option<Vec<u8>> {
    let mut out = Vec::new();
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            let mut buf = [0; 4];
            out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            continue;
        }
        match chars.next()? {
            '\\' => out.push(b'\\'),
            't' => out.push(b'\t'),
            'n' => out.push(b'\n'),
            'r' => out.push(b'\r'),
            'x' => {
                let hex: String = chars.by_ref().take(2).collect();
                out.push(u8::from_str_radix(&hex, 16).ok()?);
            }
            _ => return None,
        }
    }
    Some(out)
}

/// One step of a stream: `lanes × len` inputs and the next-token targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub lanes: usize,
    pub len: usize,
}

/// The corpus cut into `lanes` contiguous segments of equal length (the tail
/// that does not fit is dropped), read block by block in parallel.
#[derive(Debug, Clone)]
pub struct CorpusStream {
    data: Vec<usize>,
    lanes: usize,
    lane_len: usize,
    block: usize,
    cursor: usize,
}

impl CorpusStream {
    pub fn new(ids: &[usize], lanes: usize, block: usize) -> Result<Self> {
        if lanes == 0 || block == 0 {
            return Err(Error::Config(
                "lanes and block size must be positive".into(),
            ));
        }
        if ids.len() < lanes * block {
            return Err(Error::Data(format!(
                "corpus of {} tokens is shorter than {lanes} lanes × {block} tokens",
                ids.len()
            )));
        }
        let lane_len = ids.len() / lanes;
        Ok(Self {
            data: ids[..lanes * lane_len].to_vec(),
            lanes,
            lane_len,
            block,
            cursor: 0,
        })
    }

    pub fn lanes(&self) -> usize {
        self.lanes
    }

    pub fn lane(&self, l: usize) -> &[usize] {
        &self.data[l * self.lane_len..(l + 1) * self.lane_len]
    }

    /// Position of the next block's first input within each lane.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn set_cursor(&mut self, cursor: usize) -> Result<()> {
        if cursor >= self.lane_len {
            return Err(Error::Data(format!(
                "cursor {cursor} beyond lane length {}",
                self.lane_len
            )));
        }
        self.cursor = cursor;
        Ok(())
    }

    pub fn reset(&mut self) {
        self.cursor = 0;
    }

    /// Number of predicted tokens over a full pass.
    pub fn tokens_per_pass(&self) -> usize {
        self.lanes * (self.lane_len - 1)
    }

    /// The next block; the final one may be shorter. `None` at the end of a pass.
    pub fn next_batch(&mut self) -> Option<Batch> {
        let len = self
            .block
            .min(self.lane_len - 1 - self.cursor.min(self.lane_len - 1));
        if len == 0 {
            return None;
        }
        let mut inputs = Vec::with_capacity(self.lanes * len);
        let mut targets = Vec::with_capacity(self.lanes * len);
        for l in 0..self.lanes {
            let lane = self.lane(l);
            inputs.extend_from_slice(&lane[self.cursor..self.cursor + len]);
            targets.extend_from_slice(&lane[self.cursor + 1..self.cursor + len + 1]);
        }
        self.cursor += len;
        Some(Batch {
            inputs,
            targets,
            lanes: self.lanes,
            len,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text8_examples() {
        assert_eq!(preprocess_text8(b"Hello, World!"), "hello  world ");
        assert_eq!(preprocess_text8(b"abc"), "abc");
        assert_eq!(preprocess_text8("naïve\n".as_bytes()), "na ve ");
    }

    #[test]
    fn char_vocab_ranks_by_frequency() {
        let v = Vocabulary::build(b"aab", TokenMode::Char, 1).unwrap();
        assert_eq!(v.id(b"a"), Some(0));
        assert_eq!(v.id(b"b"), Some(1));
        assert_eq!(v.freqs, vec![2, 1]);
    }

    #[test]
    fn ties_are_lexicographic() {
        let v = Vocabulary::build(b"cba cab", TokenMode::Char, 1).unwrap();
        assert_eq!(
            v.tokens,
            vec![b"a".to_vec(), b"b".to_vec(), b"c".to_vec(), b" ".to_vec()]
        );
    }

    #[test]
    fn rare_words_become_unknown() {
        let text = b"the the the cat cat dog dog dog";
        let v = Vocabulary::build(text, TokenMode::Word, 3).unwrap();
        assert_eq!(
            v.tokens,
            vec![b"dog".to_vec(), b"the".to_vec(), UNK.as_bytes().to_vec()]
        );
        assert_eq!(v.unk, Some(2));
        assert_eq!(v.encode(b"cat dog zebra").unwrap(), vec![2, 0, 2]);
    }

    #[test]
    fn empty_stream_is_an_error() {
        assert!(matches!(
            Vocabulary::build(b"", TokenMode::Char, 1),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            Vocabulary::build(b"  \n", TokenMode::Word, 1),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn unknown_char_is_an_error() {
        let v = Vocabulary::build(b"ab", TokenMode::Char, 1).unwrap();
        assert!(matches!(v.encode(b"abc"), Err(Error::Data(_))));
    }

    #[test]
    fn vocab_file_round_trip() {
        let raw = b"a\tb\\c\nd\xffe\x00 \r";
        let v = Vocabulary::build(raw, TokenMode::Byte, 1).unwrap();
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        let w = Vocabulary::build("z\u{e9}ro un un".as_bytes(), TokenMode::Word, 1).unwrap();
        assert_eq!(Vocabulary::from_text(&w.to_text()).unwrap(), w);
        assert!(w.to_text().contains("z\u{e9}ro\t1"));
    }

    #[test]
    fn batchify_example() {
        let ids: Vec<usize> = (0..10).collect();
        let mut s = CorpusStream::new(&ids, 2, 2).unwrap();
        assert_eq!(s.lane(0), &[0, 1, 2, 3, 4]);
        assert_eq!(s.lane(1), &[5, 6, 7, 8, 9]);
        let b = s.next_batch().unwrap();
        assert_eq!(b.inputs, vec![0, 1, 5, 6]);
        assert_eq!(b.targets, vec![1, 2, 6, 7]);
        let b = s.next_batch().unwrap();
        assert_eq!(b.inputs, vec![2, 3, 7, 8]);
        assert!(s.next_batch().is_none());
        assert!(matches!(CorpusStream::new(&ids, 3, 4), Err(Error::Data(_))));
    }

    #[test]
    fn final_block_is_shorter() {
        let ids: Vec<usize> = (0..12).collect();
        let mut s = CorpusStream::new(&ids, 1, 5).unwrap();
        assert_eq!(s.next_batch().unwrap().len, 5);
        assert_eq!(s.next_batch().unwrap().len, 5);
        let last = s.next_batch().unwrap();
        assert_eq!(
            (last.inputs.clone(), last.targets.clone()),
            (vec![10], vec![11])
        );
        assert!(s.next_batch().is_none());
        s.reset();
        assert_eq!(s.next_batch().unwrap().inputs, vec![0, 1, 2, 3, 4]);
    }
}
