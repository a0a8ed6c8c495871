//! Invariants checked over random inputs.

mod common;

use bcaf::data::{Batch, Conversation};
use bcaf::model::{forward, init_params, Ctx, ModelConfig, ModelInputs};
use bcaf::train::Confusion;
use bcaf::{Graph, RngState, Tensor};
use proptest::prelude::*;

fn config() -> ModelConfig {
    ModelConfig {
        d_model: 6,
        d_latent: 3,
        d_ff: 12,
        num_classes: 3,
        num_layers: 2,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn conversations(lengths: &[usize], seed: u64) -> Vec<Conversation> {
    let mut rng = RngState::new(seed);
    lengths
        .iter()
        .enumerate()
        .map(|(i, &n)| common::conversation(&format!("c{i}"), n, 6, 3, &mut rng))
        .collect()
}

fn logits_and_connection(inputs: &ModelInputs, seed: u64) -> (Tensor<f64>, f64) {
    let cfg = config();
    let store = init_params(&cfg, seed).unwrap();
    let g = Graph::<f64>::new();
    let out = forward(&Ctx::eval(&g, &store, cfg), inputs).unwrap();
    let lc = out.connection_loss.as_ref().unwrap().total.item();
    ((*out.logits_m.value()).clone(), lc)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn masked_softmax_rows_sum_to_one(lengths in prop::collection::vec(1usize..5, 1..4), seed in 0u64..1000) {
        let rows: usize = lengths.iter().sum();
        let mut rng = RngState::new(seed);
        let scores = common::tensor_of(&common::random(&mut rng, rows, rows));
        let layout = bcaf::model::AttnLayout::packed(&lengths).unwrap();
        let g = Graph::<f64>::new();
        let w = g.constant(scores).scale(10.0).softmax_rows(Some(layout.key_mask())).unwrap().value();
        let owners = common::owners(&lengths);
        for (i, row) in w.data().chunks(rows).enumerate() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (j, &v) in row.iter().enumerate() {
                if owners[i] != owners[j] {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn utterance_order_only_permutes_outputs(len in 2usize..6, seed in 0u64..1000) {
        let convs = conversations(&[len], seed);
        let mut rng = RngState::new(seed + 1);
        let mut order: Vec<usize> = (0..len).collect();
        rng.shuffle(&mut order);
        let mut permuted = convs[0].clone();
        permuted.utterances = order.iter().map(|&i| convs[0].utterances[i].clone()).collect();

        let (base, lc) = logits_and_connection(&ModelInputs::from_conversations(&[&convs[0]]).unwrap(), seed);
        let (shuffled, lc_shuffled) = logits_and_connection(&ModelInputs::from_conversations(&[&permuted]).unwrap(), seed);
        let c = base.shape()[1];
        for (r, &i) in order.iter().enumerate() {
            for k in 0..c {
                prop_assert!((shuffled.data()[r * c + k] - base.data()[i * c + k]).abs() < 1e-9);
            }
        }
        prop_assert!((lc - lc_shuffled).abs() < 1e-9);
    }

    #[test]
    fn padded_and_packed_batches_agree(lengths in prop::collection::vec(1usize..6, 1..5), seed in 0u64..1000) {
        let convs = conversations(&lengths, seed);
        let refs: Vec<&Conversation> = convs.iter().collect();
        let max_len = *lengths.iter().max().unwrap();
        let batch = Batch::from_conversations(&refs, max_len).unwrap();
        let (packed, lc_packed) = logits_and_connection(&ModelInputs::packed(&batch).unwrap(), seed);
        let (padded, lc_padded) = logits_and_connection(&ModelInputs::padded(&batch).unwrap(), seed);
        prop_assert_eq!(packed.shape(), padded.shape());
        for (a, b) in packed.data().iter().zip(padded.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        prop_assert!((lc_packed - lc_padded).abs() < 1e-9);
    }

    #[test]
    fn weighted_f1_is_bounded_and_rows_sum_to_support(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 1..80),
    ) {
        let (y_true, y_pred): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let c = Confusion::from_pairs(&y_true, &y_pred, 5).unwrap();
        let f1 = c.weighted_f1();
        prop_assert!((0.0..=1.0).contains(&f1));
        prop_assert!((f1 - common::weighted_f1_oracle(&y_true, &y_pred, 5)).abs() < 1e-12);
        for (class, row) in c.rows().iter().enumerate() {
            let support = y_true.iter().filter(|&&t| t == class).count() as u64;
            prop_assert_eq!(row.iter().sum::<u64>(), support);
            prop_assert_eq!(c.support(class), support);
        }
        let accuracy = y_true.iter().zip(&y_pred).filter(|(t, p)| t == p).count() as f64 / y_true.len() as f64;
        prop_assert!((c.accuracy() - accuracy).abs() < 1e-15);
    }
}
