use crate::error::{Error, Result};

/// Learnable parameters of one transformer block, generic over the slot
/// type so the same layout serves for tensors, graph handles and optimizer
/// state.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<P> {
    pub wq: P,
    pub bq: P,
    pub wk: P,
    pub bk: P,
    pub wv: P,
    pub bv: P,
    pub wo: P,
    pub bo: P,
    pub ln1_gain: P,
    pub ln1_bias: P,
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
    pub ln2_gain: P,
    pub ln2_bias: P,
}

pub(crate) const LAYER_FIELDS: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_gain", "ln1_bias", "w1", "b1", "w2", "b2",
    "ln2_gain", "ln2_bias",
];

pub(crate) const TOP_FIELDS: [&str; 4] = [
    "token_embedding",
    "position_embedding",
    "embed_ln_gain",
    "embed_ln_bias",
];

impl<P> LayerParams<P> {
    fn into_vec(self) -> Vec<P> {
        vec![
            self.wq,
            self.bq,
            self.wk,
            self.bk,
            self.wv,
            self.bv,
            self.wo,
            self.bo,
            self.ln1_gain,
            self.ln1_bias,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
            self.ln2_gain,
            self.ln2_bias,
        ]
    }

    fn refs(&self) -> [&P; 16] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    fn refs_mut(&mut self) -> [&mut P; 16] {
        let Self {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln1_gain,
            ln1_bias,
            w1,
            b1,
            w2,
            b2,
            ln2_gain,
            ln2_bias,
        } = self;
        [
            wq, bq, wk, bk, wv, bv, wo, bo, ln1_gain, ln1_bias, w1, b1, w2, b2, ln2_gain, ln2_bias,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = P>) -> Option<Self> {
        Some(Self {
            wq: it.next()?,
            bq: it.next()?,
            wk: it.next()?,
            bk: it.next()?,
            wv: it.next()?,
            bv: it.next()?,
            wo: it.next()?,
            bo: it.next()?,
            ln1_gain: it.next()?,
            ln1_bias: it.next()?,
            w1: it.next()?,
            b1: it.next()?,
            w2: it.next()?,
            b2: it.next()?,
            ln2_gain: it.next()?,
            ln2_bias: it.next()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<P> {
    pub token_embedding: P,
    pub position_embedding: P,
    pub embed_ln_gain: P,
    pub embed_ln_bias: P,
    pub layers: Vec<LayerParams<P>>,
}

impl<P> EncoderParams<P> {
    /// Canonical parameter names, in serialization order.
    pub fn names(n_layers: usize) -> Vec<String> {
        let mut names: Vec<String> = TOP_FIELDS.iter().map(|s| s.to_string()).collect();
        for l in 0..n_layers {
            names.extend(LAYER_FIELDS.iter().map(|f| format!("layers.{l}.{f}")));
        }
        names
    }

    pub fn iter(&self) -> impl Iterator<Item = &P> {
        [
            &self.token_embedding,
            &self.position_embedding,
            &self.embed_ln_gain,
            &self.embed_ln_bias,
        ]
        .into_iter()
        .chain(self.layers.iter().flat_map(LayerParams::refs))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut P> {
        [
            &mut self.token_embedding,
            &mut self.position_embedding,
            &mut self.embed_ln_gain,
            &mut self.embed_ln_bias,
        ]
        .into_iter()
        .chain(self.layers.iter_mut().flat_map(LayerParams::refs_mut))
    }

    pub fn named(&self) -> Vec<(String, &P)> {
        Self::names(self.layers.len())
            .into_iter()
            .zip(self.iter())
            .collect()
    }

    pub fn into_vec(self) -> Vec<P> {
        let mut out = vec![
            self.token_embedding,
            self.position_embedding,
            self.embed_ln_gain,
            self.embed_ln_bias,
        ];
        for l in self.layers {
            out.extend(l.into_vec());
        }
        out
    }

    pub fn from_vec(n_layers: usize, items: Vec<P>) -> Result<Self> {
        let expected = TOP_FIELDS.len() + n_layers * LAYER_FIELDS.len();
        if items.len() != expected {
            return Err(Error::Contract(format!(
                "expected {expected} parameter slots, got {}",
                items.len()
            )));
        }
        let mut it = items.into_iter();
        let token_embedding = it.next().unwrap();
        let position_embedding = it.next().unwrap();
        let embed_ln_gain = it.next().unwrap();
        let embed_ln_bias = it.next().unwrap();
        let layers = (0..n_layers)
            .map(|_| LayerParams::from_iter(&mut it).unwrap())
            .collect();
        Ok(Self {
            token_embedding,
            position_embedding,
            embed_ln_gain,
            embed_ln_bias,
            layers,
        })
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> EncoderParams<Q> {
        let items: Vec<Q> = self.iter().map(&mut f).collect();
        EncoderParams::from_vec(self.layers.len(), items).expect("same layout")
    }
}
