//! Word-level vocabulary built from cleaned training text.
//!
//! Tokens are maximal runs of alphanumeric characters; every other
//! non-whitespace character is a token of its own. Ids 0, 1 and 2 are
//! reserved for padding, unknown and sequence-start.
//!
//! Persisted form (UTF-8, tab-separated):
//!
//! ```text
//! #vocab	max_len=256	pad=0	unk=1	start=2
//! token	id
//! the	3
//! ...
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const START_ID: u32 = 2;
pub const RESERVED: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub min_count: usize,
    pub max_size: usize,
    pub max_len: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            min_count: 1,
            max_size: 30_000,
            max_len: 256,
        }
    }
}

/// Splits cleaned text into word and punctuation tokens.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut tokens = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            word_start.get_or_insert(i);
            continue;
        }
        if let Some(start) = word_start.take() {
            tokens.push(&text[start..i]);
        }
        if !ch.is_whitespace() {
            tokens.push(&text[i..i + ch.len_utf8()]);
        }
    }
    if let Some(start) = word_start {
        tokens.push(&text[start..]);
    }
    tokens
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    /// Surface tokens; `tokens[i]` has id `i + RESERVED`.
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    max_len: usize,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, max_len: usize) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), (i + RESERVED) as u32))
            .collect();
        Vocabulary {
            tokens,
            ids,
            max_len: max_len.max(1),
        }
    }

    /// Most frequent tokens first (ties lexicographic), keeping those seen at
    /// least `min_count` times, capped at `max_size - 3` surface tokens.
    pub fn build<S: AsRef<str>>(texts: &[S], min_count: usize, max_size: usize, max_len: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for token in tokenize(text.as_ref()) {
                *counts.entry(token).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, n)| n >= min_count.max(1))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size.saturating_sub(RESERVED));
        Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()).collect(), max_len)
    }

    pub fn with_config<S: AsRef<str>>(texts: &[S], config: &TokenizerConfig) -> Self {
        Vocabulary::build(texts, config.min_count, config.max_size, config.max_len)
    }

    /// Total id count including reserved ids.
    pub fn size(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        match id {
            PAD_ID => Some("[PAD]"),
            UNK_ID => Some("[UNK]"),
            START_ID => Some("[START]"),
            _ => self.tokens.get(id as usize - RESERVED).map(String::as_str),
        }
    }

    /// Surface tokens in id order.
    pub fn surface_tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Sequence-start id followed by token ids, cut at `max_len`.
    pub fn encode(&self, text: &str) -> Encoded {
        let tokens = tokenize(text);
        let mut ids = Vec::with_capacity((tokens.len() + 1).min(self.max_len));
        ids.push(START_ID);
        let mut unknown = 0;
        for (i, token) in tokens.iter().enumerate() {
            let id = self.id(token).unwrap_or(UNK_ID);
            if id == UNK_ID {
                unknown += 1;
            }
            if i + 1 < self.max_len {
                ids.push(id);
            }
        }
        Encoded {
            ids,
            truncated: tokens.len() + 1 > self.max_len,
            token_count: tokens.len(),
            unknown_count: unknown,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(
            out,
            "#vocab\tmax_len={}\tpad={PAD_ID}\tunk={UNK_ID}\tstart={START_ID}",
            self.max_len
        )
        .map_err(io)?;
        writeln!(out, "token\tid").map_err(io)?;
        for (i, token) in self.tokens.iter().enumerate() {
            writeln!(out, "{token}\t{}", i + RESERVED).map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let parse_err = |line: usize, message: String| Error::Parse { line, message };

        let header = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing header".into()))?
            .map_err(|e| Error::io(path, e))?;
        let mut fields = header.split('\t');
        if fields.next() != Some("#vocab") {
            return Err(parse_err(1, "header must start with #vocab".into()));
        }
        let mut max_len = None;
        for field in fields {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| parse_err(1, format!("bad header field `{field}`")))?;
            let value: usize = value
                .parse()
                .map_err(|_| parse_err(1, format!("bad header value `{field}`")))?;
            let expected = match key {
                "max_len" => {
                    max_len = Some(value);
                    continue;
                }
                "pad" => PAD_ID,
                "unk" => UNK_ID,
                "start" => START_ID,
                _ => return Err(parse_err(1, format!("unknown header key `{key}`"))),
            };
            if value != expected as usize {
                return Err(parse_err(1, format!("reserved id {key}={value} unsupported")));
            }
        }
        let max_len = max_len.ok_or_else(|| parse_err(1, "header lacks max_len".into()))?;

        let mut tokens = Vec::new();
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line_no == 2 {
                continue;
            }
            let (token, id) = line
                .split_once('\t')
                .ok_or_else(|| parse_err(line_no, "expected `token<TAB>id`".into()))?;
            let id: usize = id
                .parse()
                .map_err(|_| parse_err(line_no, format!("bad id `{id}`")))?;
            if id != tokens.len() + RESERVED {
                return Err(parse_err(line_no, format!("ids must be dense, found {id}")));
            }
            tokens.push(token.to_string());
        }
        Ok(Vocabulary::from_tokens(tokens, max_len))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<u32>,
    pub truncated: bool,
    /// Word tokens before truncation (sequence-start excluded).
    pub token_count: usize,
    pub unknown_count: usize,
}

/// One-hot encoded target plus input ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedExample {
    pub ids: Vec<u32>,
    pub truncated: bool,
    pub target: Vec<f64>,
}

impl TokenizedExample {
    pub fn new(encoded: Encoded, labels: &std::collections::BTreeSet<usize>, classes: usize) -> Self {
        let mut target = vec![0.0; classes];
        for &l in labels {
            target[l] = 1.0;
        }
        TokenizedExample {
            ids: encoded.ids,
            truncated: encoded.truncated,
            target,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CorpusStats {
    pub mean_tokens: f64,
    pub truncation_rate: f64,
    pub unknown_rate: f64,
}

/// Mean pre-truncation token count, fraction of truncated texts and fraction
/// of tokens that map to the unknown id.
pub fn corpus_stats<S: AsRef<str>>(vocab: &Vocabulary, texts: &[S]) -> CorpusStats {
    if texts.is_empty() {
        return CorpusStats::default();
    }
    let (mut tokens, mut truncated, mut unknown) = (0usize, 0usize, 0usize);
    for text in texts {
        let e = vocab.encode(text.as_ref());
        tokens += e.token_count;
        truncated += e.truncated as usize;
        unknown += e.unknown_count;
    }
    CorpusStats {
        mean_tokens: tokens as f64 / texts.len() as f64,
        truncation_rate: truncated as f64 / texts.len() as f64,
        unknown_rate: if tokens == 0 { 0.0 } else { unknown as f64 / tokens as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn surface(v: &Vocabulary) -> Vec<&str> {
        v.surface_tokens().iter().map(String::as_str).collect()
    }

    #[test]
    fn tokenize_words_and_punctuation() {
        assert_eq!(tokenize("otitis, ext-erna  (l)"), ["otitis", ",", "ext", "-", "erna", "(", "l", ")"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("r/o 3.5cm"), ["r", "/", "o", "3", ".", "5cm"]);
    }

    #[test]
    fn frequency_order() {
        let v = Vocabulary::build(&["a b a"], 1, 100, 8);
        assert_eq!(surface(&v), ["a", "b"]);
        assert_eq!(v.id("a"), Some(3));
    }

    #[test]
    fn min_count_threshold() {
        let v = Vocabulary::build(&["a b"], 2, 100, 8);
        assert!(surface(&v).is_empty());
        assert_eq!(v.size(), 3);
    }

    #[test]
    fn size_cap_uses_tie_rule() {
        let v = Vocabulary::build(&["a b c a b c"], 1, 4, 8);
        assert_eq!(surface(&v), ["a"]);
        assert_eq!(v.size(), 4);
    }

    #[test]
    fn encode_examples() {
        let v = Vocabulary::from_tokens(vec!["a".into(), "b".into()], 3);
        let e = v.encode("a b a");
        assert_eq!(e.ids, [2, 3, 4]);
        assert!(e.truncated);
        let z = v.encode("z");
        assert_eq!(z.ids, [2, 1]);
        assert!(!z.truncated);
        let empty = v.encode("");
        assert_eq!(empty.ids, [2]);
        assert!(!empty.truncated);
        assert!(!v.encode("a b").truncated, "exactly max_len is not truncated");
    }

    #[test]
    fn stats_examples() {
        let v = Vocabulary::build(&["a b"], 1, 100, 10);
        let s = corpus_stats(&v, &["a b"]);
        assert_eq!(s, CorpusStats { mean_tokens: 2.0, truncation_rate: 0.0, unknown_rate: 0.0 });

        let short = Vocabulary::build(&["a b c d"], 1, 100, 3);
        let s = corpus_stats(&short, &["a", "a b c d"]);
        assert_eq!(s.truncation_rate, 0.5);
        assert_eq!(s.mean_tokens, 2.5);

        let s = corpus_stats(&v, &["a z z q"]);
        assert_eq!(s.unknown_rate, 0.75);
        let empty: [&str; 0] = [];
        assert_eq!(corpus_stats(&v, &empty), CorpusStats::default());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        let v = Vocabulary::build(&["the cat sat on the mat ; & < >"], 1, 100, 17);
        v.save(&path).unwrap();
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(back, v);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("#vocab\tmax_len=17\tpad=0\tunk=1\tstart=2\ntoken\tid\nthe\t3\n"));
    }

    proptest! {
        #[test]
        fn encode_bounds(texts in proptest::collection::vec("[a-e ,.]{0,30}", 1..5),
                         probe in "[a-h ,.]{0,40}", max_len in 1usize..12) {
            let v = Vocabulary::build(&texts, 1, 6, max_len);
            let e = v.encode(&probe);
            prop_assert!(e.ids.len() <= max_len);
            prop_assert!(e.ids.iter().all(|&id| (id as usize) < v.size()));
            prop_assert_eq!(e.ids[0], START_ID);
            prop_assert_eq!(e.truncated, e.token_count + 1 > max_len);
            prop_assert_eq!(v.encode(&probe), e);
        }

        #[test]
        fn known_tokens_decode(text in "[a-d ]{0,30}") {
            let v = Vocabulary::build(&[text.as_str()], 1, 100, 64);
            let e = v.encode(&text);
            let decoded: Vec<&str> = e.ids[1..].iter().map(|&id| v.token(id).unwrap()).collect();
            prop_assert_eq!(decoded, tokenize(&text));
        }
    }
}
