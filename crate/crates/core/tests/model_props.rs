use std::collections::BTreeMap;

use proptest::prelude::*;

use sscse::data::{tokenize, Batch, StsExample, Vocabulary};
use sscse::dropout::{apply_dropout, sample_mask, DropoutDistribution, DropoutSpec, RateScope};
use sscse::encoder::{decode_checkpoint, encode_checkpoint, Encoder};
use sscse::eval::{evaluate, predict_similarities, spearman};
use sscse::loss::{info_nce, DenominatorMode, LossConfig};
use sscse::rng::{label, RngStream};
use sscse::train::{make_synthetic_corpus, make_synthetic_sts, train_on, Method, TrainConfig};
use sscse::{EncoderConfig, Tensor64};

fn small_config(dropout: DropoutSpec) -> EncoderConfig {
    EncoderConfig {
        vocab_size: 20,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 10,
        dropout,
        ..EncoderConfig::default()
    }
}

fn small_encoder(dropout: DropoutSpec, seed: u64) -> Encoder<f64> {
    Encoder::init(
        small_config(dropout),
        &RngStream::new(seed).fork(label::INIT),
    )
    .unwrap()
}

fn sequences() -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::collection::vec(2usize..20, 1..7), 1..5)
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor64> {
    prop::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_filter("rows must be nonzero", move |d| {
            d.chunks(cols)
                .all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-3)
        })
        .prop_map(move |d| Tensor64::matrix(rows, cols, d).unwrap())
}

/// Plain fixed-rate inverted dropout, one mask stream per sentence.
fn reference_dropout(x: &Tensor64, p: f64, stream: &RngStream) -> Vec<f64> {
    let per = x.numel() / x.shape()[0];
    let masks = stream.fork(label::MASK);
    let keep = 1.0 / (1.0 - p);
    x.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let u = masks.fork((i / per) as u64).unit_at((i % per) as u64);
            if u < p {
                0.0
            } else {
                v * keep
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn degenerate_spec_is_plain_dropout(
        x in matrix(3, 5), p in 0.0f64..0.9, seed in any::<u64>(), sentence_wise in any::<bool>()
    ) {
        let spec = DropoutSpec { sentence_wise, ..DropoutSpec::fixed(p) };
        let stream = RngStream::new(seed);
        let (out, _) = apply_dropout(&x, &spec, &stream, true).unwrap();
        let want = reference_dropout(&x, p, &stream);
        prop_assert_eq!(out.data(), &want[..]);
    }

    #[test]
    fn collapsed_interval_matches_fixed_rate_encoder(p in 0.0f64..0.5, seed in any::<u64>(), seqs in sequences()) {
        let fixed = small_encoder(DropoutSpec::fixed(p), 3);
        let collapsed = Encoder::from_parts(
            small_config(DropoutSpec {
                distribution: DropoutDistribution::Uniform { lo: p, hi: p },
                rate_scope: RateScope::PerLayer,
                ..DropoutSpec::fixed(p)
            }),
            fixed.weights.clone(),
        ).unwrap();
        let batch = Batch::from_sequences(&seqs).unwrap();
        let stream = RngStream::new(seed);
        let a = fixed.dual_forward(&batch, &stream).unwrap();
        let b = collapsed.dual_forward(&batch, &stream).unwrap();
        prop_assert_eq!(a.h.data(), b.h.data());
        prop_assert_eq!(a.h_plus.data(), b.h_plus.data());
    }

    #[test]
    fn mask_drop_fraction_within_five_sigma(p in 0.0f64..0.95, seed in any::<u64>()) {
        let n = 4000;
        let mask = sample_mask::<f64>(p, &[n], &RngStream::new(seed)).unwrap();
        let dropped = mask.data().iter().filter(|&&m| m == 0.0).count() as f64 / n as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        prop_assert!((dropped - p).abs() <= 5.0 * sigma + 1e-12, "{dropped} vs {p}");
    }

    #[test]
    fn padding_does_not_change_embeddings(seqs in sequences(), extra in 0usize..4, seed in 0u64..50) {
        let enc = small_encoder(DropoutSpec::default(), seed);
        let tight = Batch::from_sequences(&seqs).unwrap();
        let wide = Batch::padded_to(&seqs, tight.width + extra).unwrap();
        let stream = RngStream::new(seed);
        for training in [false, true] {
            let (a, _) = enc.encode(&tight, &stream, training).unwrap();
            let (b, _) = enc.encode(&wide, &stream, training).unwrap();
            prop_assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn loss_is_nonnegative_and_permutation_invariant(
        h in matrix(5, 6), hp in matrix(5, 6), tau in 0.05f64..1.0, rot in 1usize..5, literal in any::<bool>()
    ) {
        let cfg = LossConfig {
            temperature: tau,
            denominator_mode: if literal { DenominatorMode::LiteralHj } else { DenominatorMode::PositivesOfAll },
        };
        let loss = info_nce(&h, &hp, &cfg).unwrap();
        if !literal {
            prop_assert!(loss >= -1e-12);
        }
        let perm = |t: &Tensor64| {
            let rows: Vec<f64> = (0..5).flat_map(|i| t.row((i + rot) % 5).to_vec()).collect();
            Tensor64::matrix(5, 6, rows).unwrap()
        };
        let permuted = info_nce(&perm(&h), &perm(&hp), &cfg).unwrap();
        prop_assert!((loss - permuted).abs() < 1e-12);
    }

    #[test]
    fn loss_ignores_row_scale(h in matrix(4, 6), hp in matrix(4, 6), scales in prop::collection::vec(0.1f64..10.0, 8)) {
        let cfg = LossConfig { temperature: 0.1, ..LossConfig::default() };
        let scale = |t: &Tensor64, s: &[f64]| {
            let d: Vec<f64> = (0..4).flat_map(|i| t.row(i).iter().map(|v| v * s[i]).collect::<Vec<_>>()).collect();
            Tensor64::matrix(4, 6, d).unwrap()
        };
        let a = info_nce(&h, &hp, &cfg).unwrap();
        let b = info_nce(&scale(&h, &scales[..4]), &scale(&hp, &scales[4..]), &cfg).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn spearman_symmetric_and_rank_only(x in prop::collection::vec(-5.0f64..5.0, 3..30), seed in any::<u64>()) {
        let mut s = RngStream::new(seed);
        let y: Vec<f64> = x.iter().map(|_| s.uniform(-1.0, 1.0)).collect();
        prop_assume!(x.windows(2).any(|w| w[0] != w[1]));
        let r = spearman(&x, &y).unwrap();
        prop_assert!((r - spearman(&y, &x).unwrap()).abs() < 1e-12);
        // strictly increasing transforms
        let fx: Vec<f64> = x.iter().map(|v| v.powi(3) + v.exp()).collect();
        prop_assert!((r - spearman(&fx, &y).unwrap()).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        prop_assert!((r + spearman(&neg, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn tokenize_round_trips_vocab_words(picks in prop::collection::vec(0usize..50, 1..12)) {
        let corpus = make_synthetic_corpus(&RngStream::new(5), 100, 3, 9);
        let vocab = Vocabulary::build(&corpus, 1, usize::MAX).unwrap();
        let words: Vec<&str> = picks.iter().map(|&i| vocab.words()[i % vocab.words().len()].as_str()).collect();
        let text = words.join(" ");
        let ids = tokenize(&text, &vocab, 64);
        let back: Vec<&str> = ids.iter().map(|&i| vocab.token(i).unwrap()).collect();
        prop_assert_eq!(back.join(" "), text);
    }
}

#[test]
fn zero_rate_passes_agree_and_sampled_rates_differ() {
    let batch = Batch::from_sequences(&[vec![2, 3, 4], vec![5, 6]]).unwrap();
    let off = small_encoder(DropoutSpec::fixed(0.0), 1);
    let on = small_encoder(DropoutSpec::default(), 1);
    for trial in 0..10 {
        let stream = RngStream::new(trial);
        let d = off.dual_forward(&batch, &stream).unwrap();
        assert_eq!(d.h.data(), d.h_plus.data());
        let d = on.dual_forward(&batch, &stream).unwrap();
        assert_ne!(d.h.data(), d.h_plus.data(), "trial {trial}");
    }
}

#[test]
fn loss_falls_as_positive_similarity_rises() {
    // Only the positive term depends on h⁺ when candidates are the h rows,
    // so rotating h⁺_0 toward h_0 isolates the positive similarity.
    let cfg = LossConfig {
        temperature: 0.2,
        denominator_mode: DenominatorMode::LiteralHj,
    };
    let h = Tensor64::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.3]).unwrap();
    let mut last = f64::INFINITY;
    for k in 0..=8 {
        let angle = std::f64::consts::PI * (1.0 - k as f64 / 8.0);
        let hp =
            Tensor64::matrix(3, 2, vec![angle.cos(), angle.sin(), 0.2, 1.0, -1.0, 0.0]).unwrap();
        let loss = info_nce(&h, &hp, &cfg).unwrap();
        assert!(loss < last, "step {k}: {loss} >= {last}");
        last = loss;
    }
}

fn eval_fixture() -> (Encoder<f64>, Vocabulary, Vec<StsExample>) {
    let corpus = make_synthetic_corpus(&RngStream::new(11), 80, 3, 9);
    let vocab = Vocabulary::build(&corpus, 1, usize::MAX).unwrap();
    let sts = make_synthetic_sts(&RngStream::new(12), 60, &vocab).unwrap();
    let cfg = EncoderConfig {
        vocab_size: vocab.len(),
        ..small_config(DropoutSpec::default())
    };
    let enc = Encoder::init(cfg, &RngStream::new(13)).unwrap();
    (enc, vocab, sts)
}

#[test]
fn evaluation_ignores_example_order_and_checkpointing() {
    let (enc, vocab, sts) = eval_fixture();
    let sets = |examples: Vec<StsExample>| BTreeMap::from([("synth".to_string(), examples)]);
    let base = evaluate(&enc, &vocab, &sets(sts.clone()), 0, "fp").unwrap();
    assert_eq!(
        base.to_json().unwrap(),
        evaluate(&enc, &vocab, &sets(sts.clone()), 0, "fp")
            .unwrap()
            .to_json()
            .unwrap()
    );

    let mut shuffled = sts.clone();
    shuffled.reverse();
    shuffled.rotate_left(17);
    let other = evaluate(&enc, &vocab, &sets(shuffled), 0, "fp").unwrap();
    assert!((base.aggregate.unwrap() - other.aggregate.unwrap()).abs() < 1e-12);

    let restored: Encoder<f64> = decode_checkpoint(&encode_checkpoint(&enc)).unwrap();
    let again = evaluate(&restored, &vocab, &sets(sts), 0, "fp").unwrap();
    assert_eq!(base.to_json().unwrap(), again.to_json().unwrap());
}

#[test]
fn gold_equal_to_model_cosine_scores_one() {
    let (enc, vocab, sts) = eval_fixture();
    let predicted = predict_similarities(&enc, &vocab, &sts).unwrap();
    let relabeled: Vec<StsExample> = sts
        .into_iter()
        .zip(&predicted)
        .map(|(e, &p)| StsExample { gold_score: p, ..e })
        .collect();
    let report = evaluate(
        &enc,
        &vocab,
        &BTreeMap::from([("s".to_string(), relabeled)]),
        0,
        "",
    )
    .unwrap();
    assert_eq!(report.aggregate, Some(1.0));
}

#[test]
fn logged_rates_average_to_distribution_mean() {
    let corpus = make_synthetic_corpus(&RngStream::new(21), 60, 3, 8);
    let vocab = Vocabulary::build(&corpus, 1, usize::MAX).unwrap();
    let sts = make_synthetic_sts(&RngStream::new(22), 20, &vocab).unwrap();
    let cfg = TrainConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 10,
        batch_size: 8,
        steps: 40,
        eval_every: 0,
        method: Method::Sampled,
        seed: 4,
        ..TrainConfig::default()
    };
    let dist = cfg.dropout_spec().distribution;
    let out = train_on::<f64>(
        &cfg,
        &corpus,
        &BTreeMap::from([("s".to_string(), sts)]),
        None,
    )
    .unwrap();
    let n = out.record.steps.len() as f64;
    let mean = out.record.steps.iter().map(|s| s.mean_rate).sum::<f64>() / n;
    let bound = 3.0 * dist.std_dev() / n.sqrt();
    assert!(
        (mean - dist.mean()).abs() <= bound,
        "{mean} vs {} ± {bound}",
        dist.mean()
    );
}
