use crate::autodiff::{grad_check, GradCheckReport, Graph, Var};
use crate::data::Batch;
use crate::dropout::DropoutSpec;
use crate::encoder::{Encoder, EncoderConfig, EncoderParams};
use crate::error::Result;
use crate::loss::{info_nce_loss, LossConfig};
use crate::rng::{label, RngStream};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Dropout applied with masks frozen by a fixed stream; `None` disables it.
    pub dropout: Option<DropoutSpec>,
    /// Scales the GELU backward rule, to confirm the check can fail.
    pub corrupt_gelu: Option<f64>,
    pub h: f64,
    pub tol: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            dropout: None,
            corrupt_gelu: None,
            h: 1e-5,
            tol: 1e-4,
            seed: 0,
            // A saturated softmax at low temperature leaves most gradients
            // below what central differences resolve in f64.
            loss: LossConfig {
                temperature: 1.0,
                ..LossConfig::default()
            },
        }
    }
}

/// Small model used when no configuration is given.
pub fn toy_gradcheck_config() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 12,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 6,
        ..EncoderConfig::default()
    }
}

/// Three sentences of different lengths, so padding and key masking are
/// exercised.
fn gradcheck_batch(vocab_size: usize, max_len: usize) -> Result<Batch> {
    let lens = [4.min(max_len), 2.min(max_len), 3.min(max_len)];
    let mut next = 2;
    let seqs: Vec<Vec<usize>> = lens
        .iter()
        .map(|&n| {
            (0..n)
                .map(|_| {
                    let id = next;
                    next = if next + 1 >= vocab_size { 2 } else { next + 1 };
                    id
                })
                .collect()
        })
        .collect();
    Batch::from_sequences(&seqs)
}

/// Finite-difference check of every encoder parameter under the InfoNCE loss
/// of a two-pass forward.
pub fn gradcheck_model(config: &EncoderConfig, opts: &GradcheckOptions) -> Result<GradCheckReport> {
    let mut config = config.clone();
    config.dropout = opts.dropout.unwrap_or_else(DropoutSpec::disabled);
    let root = RngStream::new(opts.seed);
    let encoder = Encoder::<f64>::init(config, &root.fork(label::INIT))?;
    let batch = gradcheck_batch(encoder.config.vocab_size, encoder.config.max_seq_len)?;
    let step_stream = root.fork(label::STEP);
    let n_layers = encoder.config.n_layers;
    let params: Vec<(String, _)> = encoder
        .weights
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let build = |graph: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
        if let Some(f) = opts.corrupt_gelu {
            graph.corrupt_gelu_grad(f);
        }
        let p = EncoderParams::from_vec(n_layers, vars.to_vec())?;
        let (h, hp, _) = encoder.dual_forward_graph(graph, &p, &batch, &step_stream)?;
        info_nce_loss(graph, h, hp, &opts.loss)
    };
    grad_check(build, &params, opts.h, opts.tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_rule_fails() {
        let opts = GradcheckOptions {
            corrupt_gelu: Some(1.5),
            ..GradcheckOptions::default()
        };
        let cfg = EncoderConfig {
            n_layers: 1,
            ..toy_gradcheck_config()
        };
        let report = gradcheck_model(&cfg, &opts).unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_err() > 1e-2);
    }
}
