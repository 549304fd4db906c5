//! Dropout whose rate is itself a random variable.
//!
//! Rates are always *drop* probabilities: an element is zeroed when its unit
//! deviate falls below the rate, so the keep probability is `1 - rate`.
//!
//! Each dropout call draws from two children of its stream: one for rates and
//! one for masks. Masks are counter-based per group (sentence): element `e` of
//! group `s` is decided by output `e` of `mask_stream.fork(s)`. A sentence's
//! mask therefore never depends on how much padding follows it or on how many
//! other sentences share the batch.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{label, RngStream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DropoutDistribution {
    Degenerate { rate: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl DropoutDistribution {
    pub fn validate(&self) -> Result<()> {
        let in_range = |r: f64| (0.0..1.0).contains(&r);
        match *self {
            DropoutDistribution::Degenerate { rate } if in_range(rate) => Ok(()),
            DropoutDistribution::Uniform { lo, hi } if in_range(lo) && in_range(hi) && lo <= hi => {
                Ok(())
            }
            other => Err(Error::Contract(format!(
                "invalid dropout distribution {other:?}"
            ))),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            DropoutDistribution::Degenerate { rate } => rate,
            DropoutDistribution::Uniform { lo, hi } => 0.5 * (lo + hi),
        }
    }

    pub fn std_dev(&self) -> f64 {
        match *self {
            DropoutDistribution::Degenerate { .. } => 0.0,
            DropoutDistribution::Uniform { lo, hi } => (hi - lo) / 12f64.sqrt(),
        }
    }
}

/// How often a fresh rate is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateScope {
    /// One draw per forward pass, shared by every dropout site.
    PerForward,
    /// A fresh draw at every dropout site.
    PerLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// Kept elements are multiplied by `1 / (1 - rate)`.
    Inverted,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub distribution: DropoutDistribution,
    pub rate_scope: RateScope,
    /// Draw an independent rate (and mask) for every sentence.
    pub sentence_wise: bool,
    pub scaling: Scaling,
}

impl Default for DropoutSpec {
    fn default() -> Self {
        Self {
            distribution: DropoutDistribution::Uniform { lo: 0.0, hi: 0.2 },
            rate_scope: RateScope::PerLayer,
            sentence_wise: false,
            scaling: Scaling::Inverted,
        }
    }
}

impl DropoutSpec {
    /// Classic fixed-rate dropout.
    pub fn fixed(rate: f64) -> Self {
        Self {
            distribution: DropoutDistribution::Degenerate { rate },
            rate_scope: RateScope::PerForward,
            sentence_wise: false,
            scaling: Scaling::Inverted,
        }
    }

    pub fn disabled() -> Self {
        Self::fixed(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        self.distribution.validate()
    }
}

/// What one dropout application sampled.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteRecord {
    /// `(layer, site)` inside the encoder, or `None` for standalone calls.
    pub site: Option<(usize, usize)>,
    /// One rate per group when sentence-wise, otherwise a single rate.
    pub rates: Vec<f64>,
    /// Keep flags over the whole tensor, row-major.
    pub mask: Vec<bool>,
    pub shape: Vec<usize>,
    pub groups: usize,
    pub rate_stream: u64,
    pub mask_stream: u64,
}

impl SiteRecord {
    /// Rate that governed element `e`.
    pub fn rate_for_element(&self, e: usize) -> f64 {
        if self.rates.len() == 1 {
            self.rates[0]
        } else {
            self.rates[e / (self.mask.len() / self.groups)]
        }
    }

    pub fn drop_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&k| !k).count() as f64 / self.mask.len() as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskRecord {
    pub sites: Vec<SiteRecord>,
}

impl MaskRecord {
    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn rates(&self) -> impl Iterator<Item = f64> + '_ {
        self.sites.iter().flat_map(|s| s.rates.iter().copied())
    }

    pub fn mean_rate(&self) -> Option<f64> {
        let (sum, n) = self.rates().fold((0.0, 0usize), |(s, n), r| (s + r, n + 1));
        (n > 0).then(|| sum / n as f64)
    }
}

/// Draws one rate. `Degenerate(p)` returns `p` without consuming the stream.
pub fn sample_rate(dist: &DropoutDistribution, stream: &mut RngStream) -> f64 {
    match *dist {
        DropoutDistribution::Degenerate { rate } => rate,
        DropoutDistribution::Uniform { lo, hi } => stream.uniform(lo, hi),
    }
}

/// Rates for one scope: `groups` draws when sentence-wise, otherwise one.
pub fn sample_rates(spec: &DropoutSpec, rate_stream: &RngStream, groups: usize) -> Vec<f64> {
    let mut s = rate_stream.clone();
    let n = if spec.sentence_wise { groups } else { 1 };
    (0..n)
        .map(|_| sample_rate(&spec.distribution, &mut s))
        .collect()
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "dropout rate {rate} outside [0, 1)"
        )))
    }
}

/// Binary keep mask: element `e` is 0 with probability `rate`.
pub fn sample_mask<T: Scalar>(rate: f64, shape: &[usize], stream: &RngStream) -> Result<Tensor<T>> {
    check_rate(rate)?;
    let n: usize = shape.iter().product();
    let data = (0..n as u64)
        .map(|e| {
            if stream.unit_at(e) >= rate {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

fn scale_for(spec: &DropoutSpec, rate: f64) -> f64 {
    match spec.scaling {
        Scaling::Inverted => 1.0 / (1.0 - rate),
        Scaling::None => 1.0,
    }
}

/// Builds the multiplier for a tensor of `numel` elements split into
/// `groups` contiguous groups.
fn multiplier<T: Scalar>(
    numel: usize,
    groups: usize,
    rates: &[f64],
    spec: &DropoutSpec,
    mask_stream: &RngStream,
) -> Result<(Vec<T>, Vec<bool>)> {
    for &r in rates {
        check_rate(r)?;
    }
    let per = numel / groups;
    let mut mult = Vec::with_capacity(numel);
    let mut mask = Vec::with_capacity(numel);
    for s in 0..groups {
        let rate = if rates.len() == 1 { rates[0] } else { rates[s] };
        let keep_value = T::of(scale_for(spec, rate));
        let stream = mask_stream.fork(s as u64);
        for e in 0..per as u64 {
            let keep = stream.unit_at(e) >= rate;
            mask.push(keep);
            mult.push(if keep { keep_value } else { T::zero() });
        }
    }
    Ok((mult, mask))
}

fn check_groups(shape: &[usize], groups: usize, spec: &DropoutSpec) -> Result<()> {
    if spec.sentence_wise && shape.len() < 2 {
        return Err(Error::Contract(
            "sentence-wise dropout needs batch-major input of rank >= 2".into(),
        ));
    }
    let numel: usize = shape.iter().product();
    if groups == 0 || !numel.is_multiple_of(groups) {
        return Err(Error::dim("dropout", shape, &[groups]));
    }
    Ok(())
}

/// Applies dropout to `x`, treating its leading dimension as sentences.
///
/// Rates come from `stream.fork(RATE)` and masks from `stream.fork(MASK)`.
/// With `training == false` the input is returned unchanged together with an
/// empty record.
pub fn apply_dropout<T: Scalar>(
    x: &Tensor<T>,
    spec: &DropoutSpec,
    stream: &RngStream,
    training: bool,
) -> Result<(Tensor<T>, MaskRecord)> {
    spec.validate()?;
    if !training {
        return Ok((x.clone(), MaskRecord::default()));
    }
    let groups = x.shape()[0];
    check_groups(x.shape(), groups, spec)?;
    let rate_stream = stream.fork(label::RATE);
    let rates = sample_rates(spec, &rate_stream, groups);
    let mask_stream = stream.fork(label::MASK);
    let (mult, mask) = multiplier::<T>(x.numel(), groups, &rates, spec, &mask_stream)?;
    let data = x.data().iter().zip(&mult).map(|(&v, &m)| v * m).collect();
    let out = Tensor::new(x.shape().to_vec(), data)?;
    let record = SiteRecord {
        site: None,
        rates,
        mask,
        shape: x.shape().to_vec(),
        groups,
        rate_stream: rate_stream.key(),
        mask_stream: mask_stream.key(),
    };
    Ok((
        out,
        MaskRecord {
            sites: vec![record],
        },
    ))
}

/// Rates shared by every site of one forward pass, if the scope asks for it.
pub(crate) fn forward_rates(
    spec: &DropoutSpec,
    forward_stream: &RngStream,
    groups: usize,
) -> Option<(Vec<f64>, u64)> {
    match spec.rate_scope {
        RateScope::PerForward => {
            let rs = forward_stream.fork(label::RATE);
            Some((sample_rates(spec, &rs, groups), rs.key()))
        }
        RateScope::PerLayer => None,
    }
}

/// Graph-level dropout used by the encoder. `groups` is the number of
/// sentences; `site_stream` identifies this dropout site.
pub(crate) fn dropout_in_graph<T: Scalar>(
    graph: &mut Graph<T>,
    x: Var,
    groups: usize,
    spec: &DropoutSpec,
    site_stream: &RngStream,
    shared_rates: Option<&(Vec<f64>, u64)>,
    site: (usize, usize),
) -> Result<(Var, SiteRecord)> {
    let shape = graph.value(x).shape().to_vec();
    check_groups(&shape, groups, spec)?;
    let (rates, rate_key) = match shared_rates {
        Some((r, key)) => (r.clone(), *key),
        None => {
            let rs = site_stream.fork(label::RATE);
            (sample_rates(spec, &rs, groups), rs.key())
        }
    };
    let mask_stream = site_stream.fork(label::MASK);
    let numel = graph.value(x).numel();
    let (mult, mask) = multiplier::<T>(numel, groups, &rates, spec, &mask_stream)?;
    let out = graph.mul_const(x, mult)?;
    Ok((
        out,
        SiteRecord {
            site: Some(site),
            rates,
            mask,
            shape,
            groups,
            rate_stream: rate_key,
            mask_stream: mask_stream.key(),
        },
    ))
}
