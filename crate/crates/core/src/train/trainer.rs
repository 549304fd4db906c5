use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::Optimizer;
use crate::autodiff::Graph;
use crate::data::{
    batch_indices, read_corpus, tokenize, Batch, CorpusStats, StsExample, Vocabulary,
};
use crate::encoder::{load_checkpoint, save_checkpoint, Encoder};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::loss::{cosine_sim, info_nce_loss};
use crate::rng::{label, RngStream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.sscse";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const RUN_FILE: &str = "run.json";

/// Sentences used to probe positive-pair agreement before and after training.
const PROBE_SENTENCES: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    /// Mean of every dropout rate sampled in the step's two passes.
    pub mean_rate: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub steps: Vec<StepLog>,
    pub evals: Vec<(usize, EvalReport)>,
    pub corpus: CorpusStats,
    /// Mean cosine between two dropout-masked embeddings of the same
    /// sentence, on a fixed probe set with fixed masks.
    pub initial_positive_cosine: f64,
    pub final_positive_cosine: f64,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<PathBuf>,
}

impl RunRecord {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    pub fn final_eval(&self) -> Option<&EvalReport> {
        self.evals.last().map(|(_, r)| r)
    }

    /// `step,loss,mean_rate` lines.
    pub fn log_csv(&self) -> String {
        let mut s = String::from("step,loss,mean_rate\n");
        for l in &self.steps {
            writeln!(s, "{},{:?},{:?}", l.step, l.loss, l.mean_rate).unwrap();
        }
        s
    }
}

pub struct TrainOutcome<T> {
    pub encoder: Encoder<T>,
    pub vocab: Vocabulary,
    pub record: RunRecord,
}

/// Mean cosine between the two embeddings of each sentence produced by
/// [`Encoder::dual_forward`].
pub fn mean_positive_cosine<T: Scalar>(
    encoder: &Encoder<T>,
    batch: &Batch,
    stream: &RngStream,
) -> Result<f64> {
    let out = encoder.dual_forward(batch, stream)?;
    let mut total = 0.0;
    for i in 0..batch.len() {
        total += cosine_sim(out.h.row(i), out.h_plus.row(i))?.to_f64_lossy();
    }
    Ok(total / batch.len() as f64)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Trains on in-memory data. When `out_dir` is given, the vocabulary, loss
/// log, checkpoints and evaluation reports are written there.
pub fn train_on<T: Scalar>(
    cfg: &TrainConfig,
    corpus: &[String],
    datasets: &BTreeMap<String, Vec<StsExample>>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let started = Instant::now();
    let root = RngStream::new(cfg.seed);

    let vocab = Vocabulary::build(corpus, cfg.vocab_min_count, cfg.vocab_max_size)?;
    let stats = CorpusStats::compute(corpus, &vocab);
    let mut encoder = Encoder::<T>::init(cfg.encoder_config(vocab.len()), &root.fork(label::INIT))?;
    let ids: Vec<Vec<usize>> = corpus
        .iter()
        .map(|s| tokenize(s, &vocab, cfg.max_seq_len))
        .collect();
    info!(
        "training {} parameters on {} sentences ({} tokens, vocab {})",
        encoder.num_parameters(),
        stats.n_sentences,
        stats.n_tokens,
        stats.vocab_size
    );

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        vocab.save(&dir.join(VOCAB_FILE))?;
    }

    let probe = Batch::from_sequences(&ids[..ids.len().min(PROBE_SENTENCES)])?;
    let probe_stream = root.fork(label::EVAL);
    let initial_positive_cosine = mean_positive_cosine(&encoder, &probe, &probe_stream)?;

    let loss_cfg = cfg.loss_config();
    let fingerprint = cfg.fingerprint();
    let mut optimizer = Optimizer::from_config(cfg);
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let mut last_finite = None;
    let mut epoch = 0u64;
    let mut pending = Vec::new().into_iter();

    for step in 1..=cfg.steps {
        let idx = match pending.next() {
            Some(idx) => idx,
            None => {
                let shuffle = root.fork(label::SHUFFLE).fork(epoch);
                epoch += 1;
                pending = batch_indices(ids.len(), cfg.batch_size, Some(&shuffle))?.into_iter();
                pending.next().expect("non-empty corpus")
            }
        };
        let seqs: Vec<Vec<usize>> = idx.iter().map(|&i| ids[i].clone()).collect();
        let batch = Batch::from_sequences(&seqs)?;

        let mut graph = Graph::new();
        let params = encoder.register(&mut graph);
        let step_stream = root.fork(label::STEP).fork(step as u64);
        let (h, hp, records) =
            encoder.dual_forward_graph(&mut graph, &params, &batch, &step_stream)?;
        let loss = info_nce_loss(&mut graph, h, hp, &loss_cfg)?;
        let loss_value = graph.value(loss).item().to_f64_lossy();
        if !loss_value.is_finite() {
            return Err(Error::Divergence {
                step,
                last_finite_loss: last_finite,
            });
        }
        last_finite = Some(loss_value);
        graph.backward(loss)?;

        let grads: Vec<Tensor<T>> = params
            .iter()
            .zip(encoder.weights.iter())
            .map(|(&v, w)| graph.grad(v).unwrap_or_else(|| Tensor::zeros_like(w)))
            .collect();
        optimizer.step(encoder.weights.iter_mut(), &grads)?;

        let rates: Vec<f64> = records.iter().flat_map(|r| r.rates()).collect();
        let mean_rate = rates.iter().sum::<f64>() / rates.len().max(1) as f64;
        steps.push(StepLog {
            step,
            loss: loss_value,
            mean_rate,
        });

        let periodic = cfg.eval_every > 0 && step % cfg.eval_every == 0 && step != cfg.steps;
        if periodic {
            if !datasets.is_empty() {
                let report = evaluate(&encoder, &vocab, datasets, cfg.seed, &fingerprint)?;
                info!(
                    "step {step}: loss {loss_value:.4}, aggregate {:?}",
                    report.aggregate
                );
                evals.push((step, report));
            }
            if let Some(dir) = out_dir {
                save_checkpoint(&encoder, &dir.join(format!("checkpoint_step{step}.sscse")))?;
            }
        }
    }

    if !datasets.is_empty() {
        let report = evaluate(&encoder, &vocab, datasets, cfg.seed, &fingerprint)?;
        for w in &report.warnings {
            warn!("{w}");
        }
        evals.push((cfg.steps, report));
    }
    let final_positive_cosine = mean_positive_cosine(&encoder, &probe, &probe_stream)?;

    let mut record = RunRecord {
        steps,
        evals,
        corpus: stats,
        initial_positive_cosine,
        final_positive_cosine,
        wall_clock_secs: 0.0,
        checkpoint: None,
    };
    if let Some(dir) = out_dir {
        let ckpt = dir.join(CHECKPOINT_FILE);
        save_checkpoint(&encoder, &ckpt)?;
        record.checkpoint = Some(ckpt);
        write_file(&dir.join(LOG_FILE), record.log_csv())?;
        write_file(&dir.join("config.txt"), cfg.to_text())?;
        if let Some(report) = record.final_eval() {
            report.write(dir, "eval")?;
        }
    }
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    if let Some(dir) = out_dir {
        write_file(&dir.join(RUN_FILE), serde_json::to_string_pretty(&record)?)?;
    }
    Ok(TrainOutcome {
        encoder,
        vocab,
        record,
    })
}

pub fn load_datasets(
    paths: &BTreeMap<String, PathBuf>,
) -> Result<BTreeMap<String, Vec<StsExample>>> {
    paths
        .iter()
        .map(|(name, p)| Ok((name.clone(), crate::data::parse_sts_tsv(p)?)))
        .collect()
}

/// Reads the corpus and datasets named in `cfg`, trains in 64-bit
/// precision and writes all artifacts to `cfg.output_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome<f64>> {
    cfg.validate()?;
    cfg.validate_paths()?;
    let corpus = read_corpus(&cfg.corpus)?;
    let datasets = load_datasets(&cfg.sts)?;
    train_on(cfg, &corpus, &datasets, Some(&cfg.output_dir))
}

/// Loads a checkpoint and its vocabulary and scores `datasets` in eval mode.
/// Reports are written to `out_dir` as `eval.json` and `eval.csv` only
/// after every dataset has been scored.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    vocab: &Path,
    datasets: &BTreeMap<String, Vec<StsExample>>,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    let encoder: Encoder<f64> = load_checkpoint(checkpoint)?;
    let vocab = Vocabulary::load(vocab)?;
    if vocab.len() != encoder.config.vocab_size {
        return Err(Error::Data(format!(
            "vocabulary has {} entries but the checkpoint expects {}",
            vocab.len(),
            encoder.config.vocab_size
        )));
    }
    let fingerprint = encoder_fingerprint(&encoder.config.to_kv());
    let report = evaluate(&encoder, &vocab, datasets, seed, &fingerprint)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        report.write(dir, "eval")?;
    }
    Ok(report)
}

fn encoder_fingerprint(text: &str) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(text.as_bytes())
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}
