//! Corpus and dataset ingestion: vocabulary, tokenizer, STS files, batching.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::SeqLayout;
use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    ids: HashMap<String, usize>,
    tokens: Vec<String>,
    min_count: usize,
}

impl Vocabulary {
    /// Tokens seen at least `min_count` times, most frequent first (ties by
    /// token), truncated so that the vocabulary including PAD and UNK holds at
    /// most `max_size` entries.
    pub fn build<S: AsRef<str>>(lines: &[S], min_count: usize, max_size: usize) -> Result<Self> {
        if min_count < 1 {
            return Err(Error::Contract("min_count must be at least 1".into()));
        }
        if max_size < 2 {
            return Err(Error::Contract(
                "max_size must leave room for PAD and UNK".into(),
            ));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in lines {
            for tok in split_tokens(line.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Data(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - 2);
        let mut vocab = Self::from_tokens(ranked.into_iter().map(|(t, _)| t))?;
        vocab.min_count = min_count;
        Ok(vocab)
    }

    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut v = Self {
            ids: HashMap::new(),
            tokens: Vec::new(),
            min_count: 1,
        };
        for t in [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()]
            .into_iter()
            .chain(tokens)
        {
            if v.ids.insert(t.clone(), v.tokens.len()).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
            v.tokens.push(t);
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Regular (non-reserved) tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[2..]
    }

    /// One token per line; line `k` holds id `k + 2`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in self.words() {
            writeln!(s, "{t}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()).map(str::to_string))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn split_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Lowercased whitespace tokenization; never returns an empty sequence.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_seq_len: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = split_tokens(text)
        .take(max_seq_len.max(1))
        .map(|t| vocab.id(&t).unwrap_or(UNK_ID))
        .collect();
    if ids.is_empty() {
        ids.push(UNK_ID);
    }
    ids
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_sentences: usize,
    pub n_tokens: usize,
    pub vocab_size: usize,
    pub max_length: usize,
}

impl CorpusStats {
    pub fn compute<S: AsRef<str>>(lines: &[S], vocab: &Vocabulary) -> Self {
        let lengths: Vec<usize> = lines
            .iter()
            .map(|l| l.as_ref().split_whitespace().count())
            .collect();
        Self {
            n_sentences: lines.len(),
            n_tokens: lengths.iter().sum(),
            vocab_size: vocab.len(),
            max_length: lengths.iter().copied().max().unwrap_or(0),
        }
    }
}

/// Non-blank lines of a UTF-8 corpus file.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StsExample {
    pub sentence_a: String,
    pub sentence_b: String,
    pub gold_score: f64,
}

/// Parses `sentence_a \t sentence_b \t score` lines; blank lines are skipped.
pub fn parse_sts(text: &str) -> Result<Vec<StsExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Data(format!(
                "line {line_no}: expected 3 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let score: f64 = fields[2].trim().parse().map_err(|_| {
            Error::Data(format!(
                "line {line_no}: score {:?} is not a number",
                fields[2]
            ))
        })?;
        if !score.is_finite() {
            return Err(Error::Data(format!("line {line_no}: score is not finite")));
        }
        out.push(StsExample {
            sentence_a: fields[0].to_string(),
            sentence_b: fields[1].to_string(),
            gold_score: score,
        });
    }
    Ok(out)
}

pub fn parse_sts_tsv(path: &Path) -> Result<Vec<StsExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sts(&text).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_sts_tsv(path: &Path, examples: &[StsExample]) -> Result<()> {
    let mut s = String::new();
    for ex in examples {
        writeln!(s, "{}\t{}\t{}", ex.sentence_a, ex.sentence_b, ex.gold_score).unwrap();
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Padded token-id matrix for one mini-batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Row-major `[sentences × width]`.
    pub token_ids: Vec<usize>,
    /// 1 for real tokens, 0 for padding; always a prefix of ones.
    pub attention_mask: Vec<u8>,
    pub lengths: Vec<usize>,
    pub width: usize,
}

impl Batch {
    /// Pads each sequence with PAD to the longest one.
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Result<Self> {
        Self::padded_to(seqs, seqs.iter().map(Vec::len).max().unwrap_or(0))
    }

    /// Pads every sequence to exactly `width` tokens.
    pub fn padded_to(seqs: &[Vec<usize>], width: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        if let Some(i) = seqs.iter().position(Vec::is_empty) {
            return Err(Error::Data(format!("sentence {i} is empty")));
        }
        if seqs.iter().any(|s| s.len() > width) {
            return Err(Error::Data("sequence longer than padded width".into()));
        }
        let mut token_ids = Vec::with_capacity(seqs.len() * width);
        let mut attention_mask = Vec::with_capacity(seqs.len() * width);
        for s in seqs {
            token_ids.extend_from_slice(s);
            token_ids.extend(std::iter::repeat_n(PAD_ID, width - s.len()));
            attention_mask.extend(std::iter::repeat_n(1, s.len()));
            attention_mask.extend(std::iter::repeat_n(0, width - s.len()));
        }
        Ok(Self {
            token_ids,
            attention_mask,
            lengths: seqs.iter().map(Vec::len).collect(),
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn layout(&self) -> SeqLayout {
        SeqLayout {
            sentences: self.len(),
            max_len: self.width,
            lengths: self.lengths.clone(),
        }
    }

    /// Unpadded ids of sentence `i`.
    pub fn sentence(&self, i: usize) -> &[usize] {
        &self.token_ids[i * self.width..i * self.width + self.lengths[i]]
    }
}

/// Sentence order for one epoch, split into batches; the final partial
/// batch is kept.
pub fn batch_indices(
    n: usize,
    batch_size: usize,
    shuffle: Option<&RngStream>,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(stream) = shuffle {
        order.shuffle(&mut stream.clone());
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn make_batches<S: AsRef<str>>(
    sentences: &[S],
    vocab: &Vocabulary,
    batch_size: usize,
    max_seq_len: usize,
    shuffle: Option<&RngStream>,
) -> Result<Vec<Batch>> {
    let ids: Vec<Vec<usize>> = sentences
        .iter()
        .map(|s| tokenize(s.as_ref(), vocab, max_seq_len))
        .collect();
    batch_indices(ids.len(), batch_size, shuffle)?
        .into_iter()
        .map(|idx| {
            let seqs: Vec<Vec<usize>> = idx.iter().map(|&i| ids[i].clone()).collect();
            Batch::from_sequences(&seqs)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_order_and_min_count() {
        let v = Vocabulary::build(&["a a b"], 1, 100).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("a"), Some(2));
        assert_eq!(v.id("b"), Some(3));
        assert_eq!(v.token(PAD_ID), Some(PAD_TOKEN));
        assert_eq!(v.token(UNK_ID), Some(UNK_TOKEN));

        let v = Vocabulary::build(&["a a b"], 2, 100).unwrap();
        assert_eq!(v.words(), &["a".to_string()]);
    }

    #[test]
    fn vocab_tie_break_and_truncation() {
        let v = Vocabulary::build(&["z a"], 1, 100).unwrap();
        assert!(v.id("a").unwrap() < v.id("z").unwrap());
        let v = Vocabulary::build(&["c c c b b a"], 1, 4).unwrap();
        assert_eq!(v.words(), &["c".to_string(), "b".to_string()]);
    }

    #[test]
    fn vocab_errors() {
        assert!(matches!(
            Vocabulary::build(&["", "  "], 1, 10),
            Err(Error::Data(_))
        ));
        assert!(Vocabulary::build(&["a"], 0, 10).is_err());
    }

    #[test]
    fn vocab_text_round_trip() {
        let v = Vocabulary::build(&["the cat sat on the mat"], 1, 100).unwrap();
        let text = v.to_text();
        assert_eq!(text.lines().next(), Some("the"));
        let back = Vocabulary::from_text(&text).unwrap();
        assert_eq!(back.words(), v.words());
        for w in v.words() {
            assert_eq!(back.id(w), v.id(w));
        }
    }

    #[test]
    fn tokenize_examples() {
        let v = Vocabulary::build(&["a"], 1, 10).unwrap();
        let a = v.id("a").unwrap();
        assert_eq!(tokenize("A a", &v, 32), vec![a, a]);
        assert_eq!(tokenize("qqq", &v, 32), vec![UNK_ID]);
        assert_eq!(tokenize("", &v, 32), vec![UNK_ID]);
        let long = vec!["a"; 100].join(" ");
        assert_eq!(tokenize(&long, &v, 32).len(), 32);
    }

    #[test]
    fn sts_parsing() {
        let ex = parse_sts("a cat\ta feline\t4.5\n").unwrap();
        assert_eq!(
            ex,
            vec![StsExample {
                sentence_a: "a cat".into(),
                sentence_b: "a feline".into(),
                gold_score: 4.5
            }]
        );
        let err = parse_sts("x\ty\t1\n\nonly\ttwo\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = parse_sts("x\ty\tnope\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        assert_eq!(parse_sts("a\tb\t1\n\n").unwrap().len(), 1);
    }

    #[test]
    fn batches_sizes_padding_and_determinism() {
        let v = Vocabulary::build(&["a b c d e"], 1, 10).unwrap();
        let sents = ["a", "a b", "a b c", "d", "e e e e"];
        let stream = RngStream::new(3);
        let batches = make_batches(&sents, &v, 2, 32, Some(&stream)).unwrap();
        assert_eq!(
            batches.iter().map(Batch::len).collect::<Vec<_>>(),
            vec![2, 2, 1]
        );
        assert_eq!(
            batches,
            make_batches(&sents, &v, 2, 32, Some(&stream)).unwrap()
        );
        for b in &batches {
            for (i, &len) in b.lengths.iter().enumerate() {
                for t in 0..b.width {
                    let k = i * b.width + t;
                    assert_eq!(b.attention_mask[k] == 1, t < len);
                    if t >= len {
                        assert_eq!(b.token_ids[k], PAD_ID);
                    }
                }
            }
        }
    }

    #[test]
    fn epoch_is_partitioned() {
        let idx = batch_indices(37, 8, Some(&RngStream::new(1))).unwrap();
        let mut all: Vec<usize> = idx.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
    }
}
