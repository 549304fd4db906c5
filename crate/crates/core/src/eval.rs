//! STS evaluation: cosine scoring of sentence pairs and Spearman correlation
//! against gold similarity scores.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{tokenize, Batch, StsExample, Vocabulary};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::loss::cosine_sim;
use crate::rng::RngStream;
use crate::scalar::Scalar;

const EVAL_BATCH: usize = 64;

/// Fractional ranks (1-based); tied values share the mean of their ranks.
pub fn rank_average_ties(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::Contract(format!(
            "ranking needs n >= 2, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("cannot rank non-finite values".into()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold 1-based ranks start+1 ..= end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    Ok(ranks)
}

/// Pearson correlation; fails when either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim("pearson", &[x.len()], &[y.len()]));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "an input has no variance".into(),
        ));
    }
    // sqrt of the product keeps identical rank vectors at exactly ±1
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation: Pearson correlation of tie-averaged ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim("spearman", &[x.len()], &[y.len()]));
    }
    let rx = rank_average_ties(x)?;
    let ry = rank_average_ties(y)?;
    pearson(&rx, &ry).map_err(|e| match e {
        Error::UndefinedCorrelation(_) => {
            Error::UndefinedCorrelation("spearman of a constant list".into())
        }
        other => other,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub dataset: String,
    pub spearman: f64,
    pub n_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub datasets: Vec<DatasetScore>,
    /// Mean of the per-dataset Spearman values; `None` when nothing scored.
    pub aggregate: Option<f64>,
    pub seed: u64,
    pub config_fingerprint: String,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["dataset", "spearman", "n_pairs"])?;
        for d in &self.datasets {
            w.write_record([
                d.dataset.clone(),
                format!("{:?}", d.spearman),
                d.n_pairs.to_string(),
            ])?;
        }
        let total: usize = self.datasets.iter().map(|d| d.n_pairs).sum();
        let agg = self
            .aggregate
            .map_or_else(String::new, |a| format!("{a:?}"));
        w.write_record(["__aggregate__".to_string(), agg, total.to_string()])?;
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is UTF-8"))
    }

    /// Writes `<stem>.json` and `<stem>.csv`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let json = self.to_json()?;
        let csv = self.to_csv()?;
        let jp = dir.join(format!("{stem}.json"));
        fs::write(&jp, json).map_err(|e| Error::io(&jp, e))?;
        let cp = dir.join(format!("{stem}.csv"));
        fs::write(&cp, csv).map_err(|e| Error::io(&cp, e))
    }
}

/// Eval-mode embeddings of `sentences`, one `Vec<T>` per sentence.
pub fn embed_sentences<T: Scalar, S: AsRef<str> + Sync>(
    encoder: &Encoder<T>,
    vocab: &Vocabulary,
    sentences: &[S],
) -> Result<Vec<Vec<T>>> {
    // The stream is unused in eval mode; any value gives the same output.
    let stream = RngStream::new(0);
    let chunks: Vec<Vec<Vec<T>>> = sentences
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let seqs: Vec<Vec<usize>> = chunk
                .iter()
                .map(|s| tokenize(s.as_ref(), vocab, encoder.config.max_seq_len))
                .collect();
            let batch = Batch::from_sequences(&seqs)?;
            let (emb, _) = encoder.encode(&batch, &stream, false)?;
            Ok((0..emb.rows()).map(|i| emb.row(i).to_vec()).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// `sentence,e0,…,e{d-1}` rows of eval-mode embeddings.
pub fn embeddings_csv<T: Scalar, S: AsRef<str> + Sync>(
    encoder: &Encoder<T>,
    vocab: &Vocabulary,
    sentences: &[S],
) -> Result<String> {
    let rows = embed_sentences(encoder, vocab, sentences)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sentence".to_string()];
    header.extend((0..encoder.config.d_model).map(|i| format!("e{i}")));
    w.write_record(&header)?;
    for (s, row) in sentences.iter().zip(&rows) {
        let mut rec = vec![s.as_ref().to_string()];
        rec.extend(row.iter().map(|v| format!("{:?}", v.to_f64_lossy())));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is UTF-8"))
}

/// Cosine similarity of each example's two sentences under `encoder`.
pub fn predict_similarities<T: Scalar>(
    encoder: &Encoder<T>,
    vocab: &Vocabulary,
    examples: &[StsExample],
) -> Result<Vec<f64>> {
    let a: Vec<&str> = examples.iter().map(|e| e.sentence_a.as_str()).collect();
    let b: Vec<&str> = examples.iter().map(|e| e.sentence_b.as_str()).collect();
    let ea = embed_sentences(encoder, vocab, &a)?;
    let eb = embed_sentences(encoder, vocab, &b)?;
    ea.iter()
        .zip(&eb)
        .map(|(x, y)| cosine_sim(x, y).map(Scalar::to_f64_lossy))
        .collect()
}

/// Scores every dataset, in name order. Datasets that cannot produce a
/// correlation (fewer than two pairs, constant scores) are skipped with a
/// warning in the report.
pub fn evaluate<T: Scalar>(
    encoder: &Encoder<T>,
    vocab: &Vocabulary,
    datasets: &BTreeMap<String, Vec<StsExample>>,
    seed: u64,
    config_fingerprint: &str,
) -> Result<EvalReport> {
    let mut scores = Vec::new();
    let mut warnings = Vec::new();
    for (name, examples) in datasets {
        if examples.len() < 2 {
            warnings.push(format!("{name}: skipped, only {} pair(s)", examples.len()));
            continue;
        }
        let predicted = predict_similarities(encoder, vocab, examples)?;
        let gold: Vec<f64> = examples.iter().map(|e| e.gold_score).collect();
        match spearman(&predicted, &gold) {
            Ok(rho) => scores.push(DatasetScore {
                dataset: name.clone(),
                spearman: rho,
                n_pairs: examples.len(),
            }),
            Err(Error::UndefinedCorrelation(msg)) => {
                warnings.push(format!("{name}: skipped, {msg}"));
            }
            Err(e) => return Err(e),
        }
    }
    let aggregate = (!scores.is_empty())
        .then(|| scores.iter().map(|s| s.spearman).sum::<f64>() / scores.len() as f64);
    Ok(EvalReport {
        datasets: scores,
        aggregate,
        seed,
        config_fingerprint: config_fingerprint.to_string(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks() {
        assert_eq!(
            rank_average_ties(&[10., 20., 30.]).unwrap(),
            vec![1., 2., 3.]
        );
        assert_eq!(rank_average_ties(&[5., 5.]).unwrap(), vec![1.5, 1.5]);
        assert_eq!(
            rank_average_ties(&[3., 1., 3., 2.]).unwrap(),
            vec![3.5, 1., 3.5, 2.]
        );
        assert!(matches!(rank_average_ties(&[1.]), Err(Error::Contract(_))));
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1., 2., 3.], &[10., 20., 30.]).unwrap(), 1.0);
        assert_eq!(spearman(&[1., 2., 3.], &[3., 2., 1.]).unwrap(), -1.0);
        assert!((spearman(&[1., 2., 3., 4.], &[1., 3., 2., 4.]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(
            spearman(&[1., 1., 1.], &[1., 2., 3.]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(spearman(&[1., 2.], &[1., 2., 3.]).is_err());
    }

    #[test]
    fn csv_has_aggregate_row() {
        let r = EvalReport {
            datasets: vec![
                DatasetScore {
                    dataset: "a".into(),
                    spearman: 0.5,
                    n_pairs: 10,
                },
                DatasetScore {
                    dataset: "b".into(),
                    spearman: 0.25,
                    n_pairs: 4,
                },
            ],
            aggregate: Some(0.375),
            seed: 3,
            config_fingerprint: "abc".into(),
            warnings: vec![],
        };
        let csv = r.to_csv().unwrap();
        assert_eq!(
            csv,
            "dataset,spearman,n_pairs\na,0.5,10\nb,0.25,4\n__aggregate__,0.375,14\n"
        );
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(json["datasets"][0]["dataset"], "a");
        assert_eq!(json["config_fingerprint"], "abc");
        assert_eq!(json["seed"], 3);
    }
}
