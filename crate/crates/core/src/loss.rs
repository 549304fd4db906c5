//! Cosine similarity and the temperature-scaled InfoNCE objective.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which embeddings the softmax denominator ranges over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorMode {
    /// `Σ_j exp(sim(h_i, h_j⁺)/τ)`: in-batch negatives from the second pass.
    PositivesOfAll,
    /// `Σ_j exp(sim(h_i, h_j)/τ)`: same-pass embeddings, including `j = i`.
    LiteralHj,
}

impl fmt::Display for DenominatorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DenominatorMode::PositivesOfAll => "positives_of_all",
            DenominatorMode::LiteralHj => "literal_hj",
        })
    }
}

impl FromStr for DenominatorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positives_of_all" => Ok(DenominatorMode::PositivesOfAll),
            "literal_hj" => Ok(DenominatorMode::LiteralHj),
            _ => Err(Error::Config(format!("unknown denominator mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub denominator_mode: DenominatorMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.05,
            denominator_mode: DenominatorMode::PositivesOfAll,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature > 0.0 && self.temperature.is_finite() {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "temperature {} must be positive",
                self.temperature
            )))
        }
    }
}

/// `aᵀb / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine_sim<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine_sim", &[a.len()], &[b.len()]));
    }
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na <= T::zero() || nb <= T::zero() {
        return Err(Error::Contract("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (na * nb)).max(-T::one()).min(T::one()))
}

/// Records the batch-mean InfoNCE loss on `graph`.
///
/// Per row: `logsumexp_j(sim(h_i, c_j)/τ) − sim(h_i, h_i⁺)/τ`, where `c` is
/// `h⁺` or `h` depending on the denominator mode.
pub fn info_nce_loss<T: Scalar>(
    graph: &mut Graph<T>,
    h: Var,
    h_plus: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let (sh, sp) = (graph.value(h).shape(), graph.value(h_plus).shape());
    if sh != sp || sh.len() != 2 {
        return Err(Error::dim("info_nce_loss", sh, sp));
    }
    let inv_t = T::of(1.0 / cfg.temperature);
    let hn = graph.l2_normalize_rows(h)?;
    let hpn = graph.l2_normalize_rows(h_plus)?;
    let pos = graph.row_dot(hn, hpn)?;
    let pos = graph.scale(pos, inv_t);
    let candidates = match cfg.denominator_mode {
        DenominatorMode::PositivesOfAll => hpn,
        DenominatorMode::LiteralHj => hn,
    };
    let ct = graph.transpose(candidates)?;
    let sims = graph.matmul(hn, ct)?;
    let logits = graph.scale(sims, inv_t);
    let lse = graph.logsumexp_rows(logits)?;
    let per_row = graph.sub(lse, pos)?;
    Ok(graph.mean(per_row))
}

/// Loss value for plain tensors.
pub fn info_nce<T: Scalar>(h: &Tensor<T>, h_plus: &Tensor<T>, cfg: &LossConfig) -> Result<T> {
    let mut g = Graph::new();
    let a = g.constant(h.clone());
    let b = g.constant(h_plus.clone());
    let loss = info_nce_loss(&mut g, a, b, cfg)?;
    Ok(g.value(loss).item())
}

/// Scalar double-loop evaluation without any log-sum-exp shift.
pub fn info_nce_oracle<T: Scalar>(
    h: &Tensor<T>,
    h_plus: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<f64> {
    cfg.validate()?;
    if h.shape() != h_plus.shape() || h.rank() != 2 {
        return Err(Error::dim("info_nce_oracle", h.shape(), h_plus.shape()));
    }
    let to64 = |r: &[T]| r.iter().map(|v| v.to_f64_lossy()).collect::<Vec<f64>>();
    let n = h.rows();
    let mut total = 0.0;
    for i in 0..n {
        let hi = to64(h.row(i));
        let numer = (cosine_sim(&hi, &to64(h_plus.row(i)))? / cfg.temperature).exp();
        let mut denom = 0.0;
        for j in 0..n {
            let other = match cfg.denominator_mode {
                DenominatorMode::PositivesOfAll => to64(h_plus.row(j)),
                DenominatorMode::LiteralHj => to64(h.row(j)),
            };
            denom += (cosine_sim(&hi, &other)? / cfg.temperature).exp();
        }
        total += -(numer / denom).ln();
    }
    Ok(total / n as f64)
}
