//! `sscse` command-line driver.
//!
//! Failures print a single `error:<kind>:<message>` line on stderr and exit
//! with status 1 (2 for usage errors).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::LevelFilter;

use sscse::data::{parse_sts_tsv, read_corpus, write_sts_tsv, Vocabulary};
use sscse::dropout::DropoutSpec;
use sscse::encoder::{load_checkpoint, EncoderConfig};
use sscse::eval::embeddings_csv;
use sscse::rng::{label, RngStream};
use sscse::train::{
    ablate, evaluate_checkpoint, gradcheck_model, load_datasets, make_synthetic_corpus,
    make_synthetic_sts, toy_gradcheck_config, train, GradcheckOptions, Method, TrainConfig,
    VOCAB_FILE,
};
use sscse::{Error, Result};

#[derive(Parser)]
#[command(
    name = "sscse",
    version,
    about = "Contrastive sentence embeddings with sampled dropout rates"
)]
struct Cli {
    /// Log verbosity on stderr
    #[arg(long, global = true, default_value = "warn")]
    log_level: LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder from a config file
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },

    /// Evaluate a checkpoint on STS datasets
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to vocab.txt next to the checkpoint
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Dataset as NAME=PATH; repeatable
        #[arg(long = "sts", value_name = "NAME=PATH")]
        sts: Vec<String>,
        /// Take the datasets from a training config instead
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where eval.json and eval.csv go; defaults to the checkpoint's directory
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },

    /// Train and evaluate every (method, seed) cell and summarize
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "fixed,sampled,sampled_sentence_wise"
        )]
        methods: Vec<Method>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7")]
        seeds: Vec<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },

    /// Compare analytic and finite-difference gradients of the full model
    Gradcheck {
        /// Model dimensions and dropout settings come from this training config
        #[arg(long)]
        config: Option<PathBuf>,
        /// Apply the config's dropout with frozen masks
        #[arg(long)]
        dropout: bool,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scale the GELU backward rule by this factor (negative control)
        #[arg(long, hide = true)]
        corrupt_gelu: Option<f64>,
    },

    /// Write Jaccard-scored sentence pairs over a corpus vocabulary as TSV
    MakeSynthSts {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        vocab_min_count: usize,
    },

    /// Write a random-word corpus, one sentence per line
    MakeSynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        min_len: usize,
        #[arg(long, default_value_t = 12)]
        max_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },

    /// Dump eval-mode embeddings of a sentence file as CSV
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// One sentence per line
        #[arg(long)]
        input: PathBuf,
        /// Defaults to stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn sibling_vocab(checkpoint: &Path, vocab: Option<PathBuf>) -> PathBuf {
    vocab.unwrap_or_else(|| {
        checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(VOCAB_FILE)
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_sts_args(args: &[String]) -> Result<BTreeMap<String, PathBuf>> {
    args.iter()
        .map(|a| {
            let (name, path) = a
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--sts expects NAME=PATH, got {a:?}")))?;
            Ok((name.to_string(), PathBuf::from(path)))
        })
        .collect()
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            config,
            seed,
            output_dir,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            let out = train(&cfg)?;
            let rec = &out.record;
            println!(
                "steps={} first_loss={:?} final_loss={:?} aggregate={} output_dir={}",
                rec.steps.len(),
                rec.steps[0].loss,
                rec.final_loss().unwrap_or(f64::NAN),
                rec.final_eval()
                    .and_then(|r| r.aggregate)
                    .map_or_else(|| "none".to_string(), |a| format!("{a:?}")),
                cfg.output_dir.display()
            );
        }
        Command::Eval {
            checkpoint,
            vocab,
            sts,
            config,
            output_dir,
            seed,
        } => {
            let mut paths = parse_sts_args(&sts)?;
            if let Some(c) = config {
                paths.extend(TrainConfig::load(&c)?.sts);
            }
            if paths.is_empty() {
                return Err(Error::Config("no STS datasets given".into()));
            }
            let datasets = load_datasets(&paths)?;
            let vocab = sibling_vocab(&checkpoint, vocab);
            let out_dir = output_dir.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .unwrap_or_else(|| Path::new("."))
                    .to_path_buf()
            });
            let report = evaluate_checkpoint(&checkpoint, &vocab, &datasets, seed, Some(&out_dir))?;
            print!("{}", report.to_csv()?);
            for w in &report.warnings {
                log::warn!("{w}");
            }
        }
        Command::Ablate {
            config,
            methods,
            seeds,
            output_dir,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            let table = ablate(&cfg, &methods, &seeds)?;
            print!("{}", table.to_csv());
            let failed = table.cells.iter().filter(|c| c.error.is_some()).count();
            if failed > 0 {
                log::warn!(
                    "{failed} of {} cells failed; see cells.csv",
                    table.cells.len()
                );
            }
        }
        Command::Gradcheck {
            config,
            dropout,
            h,
            tol,
            seed,
            corrupt_gelu,
        } => {
            let (enc, spec, loss) = match config {
                Some(path) => {
                    let cfg = TrainConfig::load(&path)?;
                    let toy = toy_gradcheck_config();
                    let enc = EncoderConfig {
                        vocab_size: toy.vocab_size,
                        max_seq_len: toy.max_seq_len.min(cfg.max_seq_len).max(4),
                        ..cfg.encoder_config(toy.vocab_size)
                    };
                    (enc, cfg.dropout_spec(), Some(cfg.loss_config()))
                }
                None => (toy_gradcheck_config(), DropoutSpec::default(), None),
            };
            let mut opts = GradcheckOptions {
                dropout: dropout.then_some(spec),
                corrupt_gelu,
                h,
                tol,
                seed,
                ..GradcheckOptions::default()
            };
            if let Some(l) = loss {
                opts.loss.denominator_mode = l.denominator_mode;
            }
            let report = gradcheck_model(&enc, &opts)?;
            for p in &report.params {
                println!(
                    "{} {} max_rel_err={:.3e}",
                    if p.passed { "pass" } else { "FAIL" },
                    p.name,
                    p.max_rel_err
                );
            }
            if !report.passed() {
                let w = report.worst().expect("at least one parameter");
                return Err(Error::Contract(format!(
                    "gradient check failed: worst parameter {} index {} relative error {:.3e} (analytic {:e}, numeric {:e})",
                    w.name, w.worst_index, w.max_rel_err, w.analytic, w.numeric
                )));
            }
        }
        Command::MakeSynthSts {
            corpus,
            out,
            n_pairs,
            seed,
            vocab_min_count,
        } => {
            let lines = read_corpus(&corpus)?;
            let vocab = Vocabulary::build(&lines, vocab_min_count, usize::MAX)?;
            let stream = RngStream::new(seed).fork(label::SYNTH);
            let pairs = make_synthetic_sts(&stream, n_pairs, &vocab)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            write_sts_tsv(&out, &pairs)?;
            // round-trip guard: the file must parse back
            parse_sts_tsv(&out)?;
        }
        Command::MakeSynthCorpus {
            out,
            n,
            min_len,
            max_len,
            seed,
        } => {
            if min_len == 0 || min_len > max_len {
                return Err(Error::Config(format!(
                    "need 1 <= min_len <= max_len, got {min_len} and {max_len}"
                )));
            }
            let stream = RngStream::new(seed).fork(label::SYNTH);
            let mut text = make_synthetic_corpus(&stream, n, min_len, max_len).join("\n");
            text.push('\n');
            write(&out, &text)?;
        }
        Command::Embed {
            checkpoint,
            vocab,
            input,
            out,
        } => {
            let encoder = load_checkpoint::<f64>(&checkpoint)?;
            let vocab = Vocabulary::load(&sibling_vocab(&checkpoint, vocab))?;
            let sentences = read_corpus(&input)?;
            let csv = embeddings_csv(&encoder, &vocab, &sentences)?;
            match out {
                Some(p) => write(&p, &csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!(
                "error:usage:{}",
                one_line(first.trim_start_matches("error: "))
            );
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error:{}:{}", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
