use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dropout::{DropoutDistribution, DropoutSpec, RateScope, Scaling};
use crate::encoder::{EncoderConfig, Pooling};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::loss::{DenominatorMode, LossConfig};

/// The three rows of the ablation: fixed-rate dropout, sampled rates, and
/// sampled rates with per-sentence masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fixed,
    Sampled,
    SampledSentenceWise,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Fixed, Method::Sampled, Method::SampledSentenceWise];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Fixed => "fixed",
            Method::Sampled => "sampled",
            Method::SampledSentenceWise => "sampled_sentence_wise",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Method::Fixed),
            "sampled" => Ok(Method::Sampled),
            "sampled_sentence_wise" => Ok(Method::SampledSentenceWise),
            _ => Err(Error::Config(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

/// Everything a training run depends on.
///
/// Read from flat `key = value` files; STS datasets are given as
/// `sts.<name> = <path>`. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub corpus: PathBuf,
    pub sts: BTreeMap<String, PathBuf>,
    pub vocab_min_count: usize,
    pub vocab_max_size: usize,

    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub pooling: Pooling,

    pub method: Method,
    /// Rate used by `method = fixed`.
    pub dropout_rate: f64,
    /// Bounds of the uniform rate distribution for the sampled methods.
    pub dropout_lo: f64,
    pub dropout_hi: f64,
    pub rate_scope: RateScope,
    pub scaling: Scaling,

    pub temperature: f64,
    pub denominator_mode: DenominatorMode,

    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,

    pub batch_size: usize,
    pub steps: usize,
    /// Evaluate and checkpoint every this many steps; 0 means only at the end.
    pub eval_every: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        Self {
            corpus: PathBuf::from("corpus.txt"),
            sts: BTreeMap::new(),
            vocab_min_count: 1,
            vocab_max_size: 10_000,
            d_model: enc.d_model,
            n_layers: enc.n_layers,
            n_heads: enc.n_heads,
            d_ff: enc.d_ff,
            max_seq_len: enc.max_seq_len,
            pooling: enc.pooling,
            method: Method::SampledSentenceWise,
            dropout_rate: 0.1,
            dropout_lo: 0.0,
            dropout_hi: 0.2,
            rate_scope: RateScope::PerLayer,
            scaling: Scaling::Inverted,
            temperature: 0.05,
            denominator_mode: DenominatorMode::PositivesOfAll,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            steps: 200,
            eval_every: 0,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl TrainConfig {
    /// Parses config text. Relative paths are resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let d = Self::default();
        let resolve = |p: String| -> PathBuf {
            let p = PathBuf::from(p);
            match base_dir {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            }
        };
        let sts = kv
            .take_prefixed("sts.")
            .into_iter()
            .map(|(name, path)| (name, resolve(path)))
            .collect();
        let cfg = Self {
            corpus: kv.take("corpus").map(resolve).unwrap_or(d.corpus),
            sts,
            vocab_min_count: kv.take_parsed("vocab_min_count", d.vocab_min_count)?,
            vocab_max_size: kv.take_parsed("vocab_max_size", d.vocab_max_size)?,
            d_model: kv.take_parsed("d_model", d.d_model)?,
            n_layers: kv.take_parsed("n_layers", d.n_layers)?,
            n_heads: kv.take_parsed("n_heads", d.n_heads)?,
            d_ff: kv.take_parsed("d_ff", d.d_ff)?,
            max_seq_len: kv.take_parsed("max_seq_len", d.max_seq_len)?,
            pooling: kv.take_parsed("pooling", d.pooling)?,
            method: kv.take_parsed("method", d.method)?,
            dropout_rate: kv.take_parsed("dropout_rate", d.dropout_rate)?,
            dropout_lo: kv.take_parsed("dropout_lo", d.dropout_lo)?,
            dropout_hi: kv.take_parsed("dropout_hi", d.dropout_hi)?,
            rate_scope: kv.take_parsed("rate_scope", d.rate_scope)?,
            scaling: kv.take_parsed("scaling", d.scaling)?,
            temperature: kv.take_parsed("temperature", d.temperature)?,
            denominator_mode: kv.take_parsed("denominator_mode", d.denominator_mode)?,
            optimizer: kv.take_parsed("optimizer", d.optimizer)?,
            lr: kv.take_parsed("lr", d.lr)?,
            beta1: kv.take_parsed("beta1", d.beta1)?,
            beta2: kv.take_parsed("beta2", d.beta2)?,
            eps: kv.take_parsed("eps", d.eps)?,
            batch_size: kv.take_parsed("batch_size", d.batch_size)?,
            steps: kv.take_parsed("steps", d.steps)?,
            eval_every: kv.take_parsed("eval_every", d.eval_every)?,
            seed: kv.take_parsed("seed", d.seed)?,
            output_dir: kv.take("output_dir").map(resolve).unwrap_or(d.output_dir),
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent())
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        line("corpus", self.corpus.display().to_string());
        for (name, path) in &self.sts {
            line(&format!("sts.{name}"), path.display().to_string());
        }
        line("vocab_min_count", self.vocab_min_count.to_string());
        line("vocab_max_size", self.vocab_max_size.to_string());
        line("d_model", self.d_model.to_string());
        line("n_layers", self.n_layers.to_string());
        line("n_heads", self.n_heads.to_string());
        line("d_ff", self.d_ff.to_string());
        line("max_seq_len", self.max_seq_len.to_string());
        line("pooling", self.pooling.to_string());
        line("method", self.method.to_string());
        line("dropout_rate", format!("{:?}", self.dropout_rate));
        line("dropout_lo", format!("{:?}", self.dropout_lo));
        line("dropout_hi", format!("{:?}", self.dropout_hi));
        line("rate_scope", self.rate_scope.to_string());
        line("scaling", self.scaling.to_string());
        line("temperature", format!("{:?}", self.temperature));
        line("denominator_mode", self.denominator_mode.to_string());
        line("optimizer", self.optimizer.to_string());
        line("lr", format!("{:?}", self.lr));
        line("beta1", format!("{:?}", self.beta1));
        line("beta2", format!("{:?}", self.beta2));
        line("eps", format!("{:?}", self.eps));
        line("batch_size", self.batch_size.to_string());
        line("steps", self.steps.to_string());
        line("eval_every", self.eval_every.to_string());
        line("seed", self.seed.to_string());
        line("output_dir", self.output_dir.display().to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return bad("eps must be positive");
        }
        self.loss_config().validate()?;
        self.dropout_spec().validate()?;
        let mut enc = self.encoder_config(16);
        enc.vocab_size = enc.vocab_size.max(3);
        enc.validate()
    }

    /// Checks that every referenced input file exists.
    pub fn validate_paths(&self) -> Result<()> {
        for p in std::iter::once(&self.corpus).chain(self.sts.values()) {
            if !p.is_file() {
                return Err(Error::Config(format!(
                    "input file {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn dropout_spec(&self) -> DropoutSpec {
        let (distribution, sentence_wise) = match self.method {
            Method::Fixed => (
                DropoutDistribution::Degenerate {
                    rate: self.dropout_rate,
                },
                false,
            ),
            Method::Sampled => (
                DropoutDistribution::Uniform {
                    lo: self.dropout_lo,
                    hi: self.dropout_hi,
                },
                false,
            ),
            Method::SampledSentenceWise => (
                DropoutDistribution::Uniform {
                    lo: self.dropout_lo,
                    hi: self.dropout_hi,
                },
                true,
            ),
        };
        DropoutSpec {
            distribution,
            rate_scope: self.rate_scope,
            sentence_wise,
            scaling: self.scaling,
        }
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            pooling: self.pooling,
            dropout: self.dropout_spec(),
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            temperature: self.temperature,
            denominator_mode: self.denominator_mode,
        }
    }

    /// Short digest of every setting except seed and output location.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        c.output_dir = PathBuf::new();
        let digest = Sha256::digest(c.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let cfg = TrainConfig::parse("", None).unwrap();
        assert_eq!(cfg, TrainConfig::default());
        let mut c = TrainConfig::default();
        c.sts.insert("synth".into(), "data/synth.tsv".into());
        c.method = Method::Fixed;
        c.dropout_rate = 0.15;
        c.seed = 42;
        assert_eq!(TrainConfig::parse(&c.to_text(), None).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = TrainConfig::parse("lr = 0.01\nlearning_rate = 0.1\n", None).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn fixed_method_forces_degenerate() {
        let cfg = TrainConfig::parse("method = fixed\ndropout_rate = 0.1\n", None).unwrap();
        let spec = cfg.dropout_spec();
        assert_eq!(
            spec.distribution,
            DropoutDistribution::Degenerate { rate: 0.1 }
        );
        assert!(!spec.sentence_wise);
        let cfg = TrainConfig::parse("method = sampled_sentence_wise\n", None).unwrap();
        assert!(cfg.dropout_spec().sentence_wise);
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let cfg = TrainConfig::parse(
            "corpus = c.txt\nsts.a = /abs/a.tsv\n",
            Some(Path::new("/cfg")),
        )
        .unwrap();
        assert_eq!(cfg.corpus, PathBuf::from("/cfg/c.txt"));
        assert_eq!(cfg.sts["a"], PathBuf::from("/abs/a.tsv"));
    }

    #[test]
    fn invalid_values() {
        assert!(TrainConfig::parse("d_model = 30\nn_heads = 4\n", None).is_err());
        assert!(TrainConfig::parse("dropout_lo = 0.3\ndropout_hi = 0.1\n", None).is_err());
        assert!(TrainConfig::parse("temperature = 0\n", None).is_err());
        assert!(TrainConfig::parse("method = bogus\n", None).is_err());
    }

    #[test]
    fn fingerprint_ignores_seed() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.seed = 9;
        b.output_dir = "elsewhere".into();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.lr = 0.5;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
