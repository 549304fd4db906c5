//! Toy transformer sentence encoder.
//!
//! Post-norm BERT-style blocks over learned token and position embeddings:
//!
//! ```text
//! x = LN(tok[ids] + pos[t])
//! per layer:
//!     a = Attention(xWq + bq, xWk + bk, xWv + bv)
//!     x = LN1(x + drop(a)·Wo + bo)
//!     h = GELU(drop(x)·W1 + b1)
//!     x = LN2(x + drop(h)·W2 + b2)
//! h_i = pool(x over sentence i)
//! ```
//!
//! Dropout sits only in front of fully connected layers: the attention output
//! projection and both feed-forward projections, three sites per layer.

mod checkpoint;
mod params;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use params::{EncoderParams, LayerParams};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, SeqLayout, Var};
use crate::data::Batch;
use crate::dropout::{
    dropout_in_graph, forward_rates, DropoutDistribution, DropoutSpec, MaskRecord, RateScope,
    Scaling,
};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::rng::{label, RngStream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Dropout applications per transformer block.
pub const DROPOUT_SITES_PER_LAYER: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    MeanOverTokens,
    FirstToken,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::MeanOverTokens => "mean_over_tokens",
            Pooling::FirstToken => "first_token",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_over_tokens" | "mean" => Ok(Pooling::MeanOverTokens),
            "first_token" | "first" => Ok(Pooling::FirstToken),
            _ => Err(Error::Config(format!("unknown pooling {s:?}"))),
        }
    }
}

impl fmt::Display for RateScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RateScope::PerForward => "per_forward",
            RateScope::PerLayer => "per_layer",
        })
    }
}

impl FromStr for RateScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_forward" => Ok(RateScope::PerForward),
            "per_layer" => Ok(RateScope::PerLayer),
            _ => Err(Error::Config(format!("unknown rate scope {s:?}"))),
        }
    }
}

impl fmt::Display for Scaling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scaling::Inverted => "inverted",
            Scaling::None => "none",
        })
    }
}

impl FromStr for Scaling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inverted" => Ok(Scaling::Inverted),
            "none" => Ok(Scaling::None),
            _ => Err(Error::Config(format!("unknown scaling {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub pooling: Pooling,
    pub dropout: DropoutSpec,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
            max_seq_len: 32,
            pooling: Pooling::MeanOverTokens,
            dropout: DropoutSpec::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size < 3 {
            return bad(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.d_model < 2 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be >= 2 and divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return bad("n_layers, d_ff and max_seq_len must be positive".into());
        }
        self.dropout.validate()
    }

    /// `key = value` lines, as embedded in checkpoints.
    pub fn to_kv(&self) -> String {
        let mut s = format!(
            "vocab_size = {}\nd_model = {}\nn_layers = {}\nn_heads = {}\nd_ff = {}\n\
             max_seq_len = {}\npooling = {}\n",
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.max_seq_len,
            self.pooling
        );
        match self.dropout.distribution {
            DropoutDistribution::Degenerate { rate } => {
                s += &format!("dropout.distribution = degenerate\ndropout.rate = {rate:?}\n");
            }
            DropoutDistribution::Uniform { lo, hi } => {
                s += &format!(
                    "dropout.distribution = uniform\ndropout.lo = {lo:?}\ndropout.hi = {hi:?}\n"
                );
            }
        }
        s += &format!(
            "dropout.rate_scope = {}\ndropout.sentence_wise = {}\ndropout.scaling = {}\n",
            self.dropout.rate_scope, self.dropout.sentence_wise, self.dropout.scaling
        );
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let d = Self::default();
        let distribution = match kv.take("dropout.distribution").as_deref() {
            Some("degenerate") => DropoutDistribution::Degenerate {
                rate: kv.take_parsed("dropout.rate", 0.0)?,
            },
            Some("uniform") | None => DropoutDistribution::Uniform {
                lo: kv.take_parsed("dropout.lo", 0.0)?,
                hi: kv.take_parsed("dropout.hi", 0.2)?,
            },
            Some(other) => return Err(Error::Config(format!("unknown distribution {other:?}"))),
        };
        let cfg = Self {
            vocab_size: kv.take_parsed("vocab_size", d.vocab_size)?,
            d_model: kv.take_parsed("d_model", d.d_model)?,
            n_layers: kv.take_parsed("n_layers", d.n_layers)?,
            n_heads: kv.take_parsed("n_heads", d.n_heads)?,
            d_ff: kv.take_parsed("d_ff", d.d_ff)?,
            max_seq_len: kv.take_parsed("max_seq_len", d.max_seq_len)?,
            pooling: kv.take_parsed("pooling", d.pooling)?,
            dropout: DropoutSpec {
                distribution,
                rate_scope: kv.take_parsed("dropout.rate_scope", d.dropout.rate_scope)?,
                sentence_wise: kv.take_parsed("dropout.sentence_wise", d.dropout.sentence_wise)?,
                scaling: kv.take_parsed("dropout.scaling", d.dropout.scaling)?,
            },
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Expected shape of every named parameter, in canonical order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut shapes = vec![
            vec![self.vocab_size, d],
            vec![self.max_seq_len, d],
            vec![d],
            vec![d],
        ];
        for _ in 0..self.n_layers {
            shapes.extend([
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, f],
                vec![f],
                vec![f, d],
                vec![d],
                vec![d],
                vec![d],
            ]);
        }
        shapes
    }
}

pub type EncoderWeights<T> = EncoderParams<Tensor<T>>;

/// Encoder configuration together with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub weights: EncoderWeights<T>,
}

/// Embeddings of a batch from two independently masked passes.
#[derive(Clone, Debug)]
pub struct DualForward<T> {
    pub h: Tensor<T>,
    pub h_plus: Tensor<T>,
    pub records: [MaskRecord; 2],
}

impl<T: Scalar> Encoder<T> {
    /// Random init: matrices `U(-1/√fan_in, 1/√fan_in)`, embeddings
    /// `U(-1/√d, 1/√d)`, biases 0, layer-norm gains 1.
    pub fn init(config: EncoderConfig, stream: &RngStream) -> Result<Self> {
        config.validate()?;
        let names = EncoderParams::<()>::names(config.n_layers);
        let tensors = config
            .param_shapes()
            .into_iter()
            .zip(&names)
            .enumerate()
            .map(|(i, (shape, name))| {
                let mut s = stream.fork(i as u64);
                let field = name.rsplit('.').next().unwrap();
                let n: usize = shape.iter().product();
                let data: Vec<T> = if field.contains("gain") {
                    vec![T::one(); n]
                } else if shape.len() == 1 {
                    vec![T::zero(); n]
                } else {
                    let fan_in = if field.ends_with("embedding") {
                        shape[1]
                    } else {
                        shape[0]
                    };
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| T::of(s.uniform(-bound, bound))).collect()
                };
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        let weights = EncoderParams::from_vec(config.n_layers, tensors)?;
        Ok(Self { config, weights })
    }

    pub fn from_parts(config: EncoderConfig, weights: EncoderWeights<T>) -> Result<Self> {
        config.validate()?;
        for ((name, t), shape) in weights.named().into_iter().zip(config.param_shapes()) {
            if t.shape() != shape.as_slice() {
                return Err(Error::dim("encoder weights", t.shape(), &shape));
            }
            if !t.is_finite() {
                return Err(Error::Data(format!(
                    "parameter {name} has non-finite values"
                )));
            }
        }
        Ok(Self { config, weights })
    }

    /// Registers every weight as a trainable graph leaf.
    pub fn register(&self, graph: &mut Graph<T>) -> EncoderParams<Var> {
        self.weights.map(|t| graph.param(t.clone()))
    }

    fn register_constants(&self, graph: &mut Graph<T>) -> EncoderParams<Var> {
        self.weights.map(|t| graph.constant(t.clone()))
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.width > self.config.max_seq_len {
            return Err(Error::Data(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.width, self.config.max_seq_len
            )));
        }
        if let Some(&id) = batch
            .token_ids
            .iter()
            .find(|&&id| id >= self.config.vocab_size)
        {
            return Err(Error::Data(format!(
                "token id {id} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Records the encoder on `graph` and returns the `[N × d_model]` pooled
    /// embeddings plus the masks that were applied.
    pub fn forward(
        &self,
        graph: &mut Graph<T>,
        params: &EncoderParams<Var>,
        batch: &Batch,
        stream: &RngStream,
        training: bool,
    ) -> Result<(Var, MaskRecord)> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let layout = batch.layout();
        let n = batch.len();
        let eps = T::of(LAYER_NORM_EPS);

        let tok = graph.gather_rows(params.token_embedding, &batch.token_ids)?;
        let pos_ids: Vec<usize> = (0..n).flat_map(|_| 0..batch.width).collect();
        let pos = graph.gather_rows(params.position_embedding, &pos_ids)?;
        let x = graph.add(tok, pos)?;
        let mut x = graph.layer_norm(x, params.embed_ln_gain, params.embed_ln_bias, eps)?;

        let shared = if training {
            forward_rates(&cfg.dropout, stream, n)
        } else {
            None
        };
        let mut record = MaskRecord::default();
        let mut drop = |graph: &mut Graph<T>, v: Var, layer: usize, site: usize| -> Result<Var> {
            if !training {
                return Ok(v);
            }
            let site_stream = stream.fork(label::LAYER + layer as u64).fork(site as u64);
            let (out, rec) = dropout_in_graph(
                graph,
                v,
                n,
                &cfg.dropout,
                &site_stream,
                shared.as_ref(),
                (layer, site),
            )?;
            record.sites.push(rec);
            Ok(out)
        };

        for (l, lp) in params.layers.iter().enumerate() {
            let q = linear(graph, x, lp.wq, lp.bq)?;
            let k = linear(graph, x, lp.wk, lp.bk)?;
            let v = linear(graph, x, lp.wv, lp.bv)?;
            let a = graph.attention(q, k, v, &layout, cfg.n_heads)?;
            let a = drop(graph, a, l, 0)?;
            let o = linear(graph, a, lp.wo, lp.bo)?;
            let r = graph.add(x, o)?;
            x = graph.layer_norm(r, lp.ln1_gain, lp.ln1_bias, eps)?;

            let f = drop(graph, x, l, 1)?;
            let h = linear(graph, f, lp.w1, lp.b1)?;
            let h = graph.gelu(h);
            let h = drop(graph, h, l, 2)?;
            let o = linear(graph, h, lp.w2, lp.b2)?;
            let r = graph.add(x, o)?;
            x = graph.layer_norm(r, lp.ln2_gain, lp.ln2_bias, eps)?;
        }

        let pooled = match cfg.pooling {
            Pooling::MeanOverTokens => graph.mean_pool(x, &layout)?,
            Pooling::FirstToken => graph.first_token(x, &layout)?,
        };
        Ok((pooled, record))
    }

    /// Two passes over the same batch with streams forked at forward index
    /// 0 and 1, always in training mode.
    pub fn dual_forward_graph(
        &self,
        graph: &mut Graph<T>,
        params: &EncoderParams<Var>,
        batch: &Batch,
        stream: &RngStream,
    ) -> Result<(Var, Var, [MaskRecord; 2])> {
        let (h, r0) = self.forward(graph, params, batch, &stream.fork(0), true)?;
        let (hp, r1) = self.forward(graph, params, batch, &stream.fork(1), true)?;
        Ok((h, hp, [r0, r1]))
    }

    /// Embeds a batch without recording gradients.
    pub fn encode(
        &self,
        batch: &Batch,
        stream: &RngStream,
        training: bool,
    ) -> Result<(Tensor<T>, MaskRecord)> {
        let mut graph = Graph::new();
        let params = self.register_constants(&mut graph);
        let (out, rec) = self.forward(&mut graph, &params, batch, stream, training)?;
        Ok((graph.value(out).clone(), rec))
    }

    pub fn dual_forward(&self, batch: &Batch, stream: &RngStream) -> Result<DualForward<T>> {
        let mut graph = Graph::new();
        let params = self.register_constants(&mut graph);
        let (h, hp, records) = self.dual_forward_graph(&mut graph, &params, batch, stream)?;
        Ok(DualForward {
            h: graph.value(h).clone(),
            h_plus: graph.value(hp).clone(),
            records,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().map(Tensor::numel).sum()
    }
}

fn linear<T: Scalar>(graph: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let z = graph.matmul(x, w)?;
    graph.add(z, b)
}

/// Pools `[N × T × d]` hidden states under a prefix attention mask.
pub fn pool<T: Scalar>(hidden: &Tensor<T>, mask: &[u8], mode: Pooling) -> Result<Tensor<T>> {
    let &[n, t, d] = hidden.shape() else {
        return Err(Error::Contract(format!(
            "pool expects [N, T, d] hidden states, got {:?}",
            hidden.shape()
        )));
    };
    if mask.len() != n * t {
        return Err(Error::dim("pool", hidden.shape(), &[mask.len()]));
    }
    let mut lengths = Vec::with_capacity(n);
    for row in mask.chunks(t) {
        let len = row.iter().take_while(|&&m| m == 1).count();
        if row[len..].iter().any(|&m| m != 0) {
            return Err(Error::Data("attention mask is not a prefix of ones".into()));
        }
        lengths.push(len);
    }
    let layout = SeqLayout {
        sentences: n,
        max_len: t,
        lengths,
    };
    let mut graph = Graph::new();
    let x = graph.constant(hidden.reshape(vec![n * t, d])?);
    let out = match mode {
        Pooling::MeanOverTokens => graph.mean_pool(x, &layout)?,
        Pooling::FirstToken => graph.first_token(x, &layout)?,
    };
    Ok(graph.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(dropout: DropoutSpec) -> Encoder<f64> {
        let cfg = EncoderConfig {
            vocab_size: 20,
            max_seq_len: 8,
            dropout,
            ..EncoderConfig::default()
        };
        Encoder::init(cfg, &RngStream::new(11)).unwrap()
    }

    fn batch() -> Batch {
        Batch::from_sequences(&[vec![2, 3, 4], vec![5, 6], vec![7, 8, 9, 10]]).unwrap()
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let enc = toy(DropoutSpec::default());
        let a = enc.encode(&batch(), &RngStream::new(1), false).unwrap().0;
        let b = enc.encode(&batch(), &RngStream::new(2), false).unwrap().0;
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[3, 32]);
    }

    #[test]
    fn zero_rate_training_matches_eval() {
        let enc = toy(DropoutSpec::fixed(0.0));
        let (train, rec) = enc.encode(&batch(), &RngStream::new(1), true).unwrap();
        let eval = enc.encode(&batch(), &RngStream::new(1), false).unwrap().0;
        assert_eq!(train, eval);
        assert!(rec.rates().all(|r| r == 0.0));
    }

    #[test]
    fn dropout_site_count() {
        let enc = toy(DropoutSpec::default());
        let (_, rec) = enc.encode(&batch(), &RngStream::new(1), true).unwrap();
        assert_eq!(rec.len(), enc.config.n_layers * DROPOUT_SITES_PER_LAYER);
        let (_, rec) = enc.encode(&batch(), &RngStream::new(1), false).unwrap();
        assert!(rec.is_empty());
    }

    #[test]
    fn out_of_range_inputs() {
        let enc = toy(DropoutSpec::default());
        let bad = Batch::from_sequences(&[vec![2, 99]]).unwrap();
        assert!(matches!(
            enc.encode(&bad, &RngStream::new(1), false),
            Err(Error::Data(_))
        ));
        let long = Batch::from_sequences(&[vec![2; 9]]).unwrap();
        assert!(matches!(
            enc.encode(&long, &RngStream::new(1), false),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn single_token_first_token_pooling() {
        let mut enc = toy(DropoutSpec::disabled());
        enc.config.pooling = Pooling::FirstToken;
        let b = Batch::from_sequences(&[vec![4]]).unwrap();
        let first = enc.encode(&b, &RngStream::new(1), false).unwrap().0;
        enc.config.pooling = Pooling::MeanOverTokens;
        let mean = enc.encode(&b, &RngStream::new(1), false).unwrap().0;
        assert_eq!(first, mean);
    }

    #[test]
    fn pool_examples() {
        let hidden = Tensor::new(vec![1, 3, 2], vec![1., 2., 3., 4., 50., 60.]).unwrap();
        let mean = pool(&hidden, &[1, 1, 0], Pooling::MeanOverTokens).unwrap();
        assert_eq!(mean.data(), &[2., 3.]);
        let first = pool(&hidden, &[1, 1, 0], Pooling::FirstToken).unwrap();
        assert_eq!(first.data(), &[1., 2.]);

        let one = Tensor::new(vec![1, 1, 2], vec![7., 8.]).unwrap();
        for mode in [Pooling::MeanOverTokens, Pooling::FirstToken] {
            assert_eq!(pool(&one, &[1], mode).unwrap().data(), &[7., 8.]);
        }

        let c = Tensor::new(vec![2, 3, 2], vec![0.5; 12]).unwrap();
        let out = pool(&c, &[1, 0, 0, 1, 1, 1], Pooling::MeanOverTokens).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));

        assert!(matches!(
            pool(&hidden, &[0, 0, 0], Pooling::MeanOverTokens),
            Err(Error::Data(_))
        ));
        assert!(pool(&hidden, &[1, 0, 1], Pooling::MeanOverTokens).is_err());
    }

    #[test]
    fn config_kv_round_trip() {
        let mut cfg = EncoderConfig::default();
        cfg.dropout.sentence_wise = true;
        cfg.dropout.distribution = DropoutDistribution::Uniform { lo: 0.05, hi: 0.15 };
        assert_eq!(EncoderConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        cfg.dropout = DropoutSpec::fixed(0.1);
        cfg.pooling = Pooling::FirstToken;
        assert_eq!(EncoderConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn generic_over_f32() {
        let cfg = EncoderConfig {
            vocab_size: 20,
            max_seq_len: 8,
            ..EncoderConfig::default()
        };
        let enc = Encoder::<f32>::init(cfg, &RngStream::new(3)).unwrap();
        let out = enc.dual_forward(&batch(), &RngStream::new(4)).unwrap();
        assert!(out.h.is_finite() && out.h_plus.is_finite());
        assert_ne!(out.h, out.h_plus);
    }
}
