//! Synthetic corpora and Jaccard-scored STS pairs for desk-scale runs.

use std::collections::HashMap;

use crate::data::{StsExample, Vocabulary};
use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const WORDS: [&str; 64] = [
    "the", "a", "cat", "dog", "bird", "fish", "horse", "child", "teacher", "farmer", "river",
    "city", "forest", "garden", "house", "road", "bridge", "market", "school", "window", "runs",
    "sleeps", "eats", "watches", "finds", "builds", "carries", "paints", "sings", "reads", "opens",
    "crosses", "red", "quiet", "old", "young", "bright", "small", "large", "green", "happy",
    "tired", "near", "under", "over", "behind", "with", "without", "today", "slowly", "quickly",
    "often", "never", "stone", "apple", "letter", "song", "boat", "train", "music", "rain", "snow",
    "light", "shadow",
];

fn pick<'a>(words: &'a [String], s: &mut RngStream) -> &'a str {
    &words[(s.next_u64() % words.len() as u64) as usize]
}

fn range(s: &mut RngStream, lo: usize, hi: usize) -> usize {
    lo + (s.next_u64() % (hi - lo + 1) as u64) as usize
}

/// `n` sentences of `min_len..=max_len` words drawn from a fixed word list.
pub fn make_synthetic_corpus(
    stream: &RngStream,
    n: usize,
    min_len: usize,
    max_len: usize,
) -> Vec<String> {
    let words: Vec<String> = WORDS.iter().map(|w| w.to_string()).collect();
    let mut s = stream.clone();
    (0..n)
        .map(|_| {
            let len = range(&mut s, min_len.max(1), max_len.max(min_len.max(1)));
            (0..len)
                .map(|_| pick(&words, &mut s))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

/// `5 · |A ∩ B| / |A ∪ B|` over token multisets.
pub fn jaccard_score(a: &str, b: &str) -> f64 {
    let count = |t: &str| {
        let mut m: HashMap<String, usize> = HashMap::new();
        for w in t.split_whitespace() {
            *m.entry(w.to_lowercase()).or_default() += 1;
        }
        m
    };
    let (ca, cb) = (count(a), count(b));
    let mut inter = 0;
    let mut union = 0;
    for (w, &x) in &ca {
        let y = cb.get(w).copied().unwrap_or(0);
        inter += x.min(y);
        union += x.max(y);
    }
    union += cb
        .iter()
        .filter(|(w, _)| !ca.contains_key(*w))
        .map(|(_, &y)| y)
        .sum::<usize>();
    if union == 0 {
        return 5.0;
    }
    5.0 * inter as f64 / union as f64
}

/// Sentence pairs built by copying a random sentence and replacing a
/// uniformly chosen number of its positions with random words, so gold
/// scores cover the whole `[0, 5]` range.
pub fn make_synthetic_sts(
    stream: &RngStream,
    n_pairs: usize,
    vocab: &Vocabulary,
) -> Result<Vec<StsExample>> {
    let words = vocab.words();
    if words.len() < 2 {
        return Err(Error::Data(
            "vocabulary too small for synthetic pairs".into(),
        ));
    }
    let mut s = stream.clone();
    let mut out = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let len = range(&mut s, 4, 10);
        let a: Vec<&str> = (0..len).map(|_| pick(words, &mut s)).collect();
        let mut b = a.clone();
        let k = range(&mut s, 0, len);
        let mut positions: Vec<usize> = (0..len).collect();
        for i in 0..k {
            let j = range(&mut s, i, len - 1);
            positions.swap(i, j);
            b[positions[i]] = pick(words, &mut s);
        }
        let (sa, sb) = (a.join(" "), b.join(" "));
        let gold_score = jaccard_score(&sa, &sb);
        out.push(StsExample {
            sentence_a: sa,
            sentence_b: sb,
            gold_score,
        });
    }
    Ok(out)
}
