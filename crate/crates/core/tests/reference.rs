//! The library's forward pass against the straight-line 64-bit reference.

mod common;

use bcaf::data::Conversation;
use bcaf::model::{forward, init_params, Ctx, ModelConfig, ModelInputs};
use bcaf::train::total_loss;
use bcaf::{Graph, ParamStore, RngState};

fn jittered(store: &ParamStore, seed: u64) -> ParamStore {
    let mut rng = RngState::new(seed);
    let mut out = store.clone();
    for (_, t) in out.iter_mut() {
        for v in t.data_mut() {
            *v += (0.1 * rng.normal()) as f32;
        }
    }
    out
}

fn config() -> ModelConfig {
    ModelConfig {
        d_model: 6,
        d_latent: 4,
        d_ff: 12,
        num_classes: 3,
        num_layers: 1,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

#[test]
fn full_model_matches_reference_across_seeds() {
    let cfg = config();
    for seed in 0..8 {
        let store = jittered(&init_params(&cfg, seed).unwrap(), seed + 100);
        let mut rng = RngState::new(seed + 200);
        let convs: Vec<Conversation> = [4, 1, 3]
            .iter()
            .enumerate()
            .map(|(i, &n)| common::conversation(&format!("c{i}"), n, 6, 3, &mut rng))
            .collect();
        let (h_a, h_l, labels, lengths) = common::stacked(&convs);
        let reference = common::full_model(&h_a, &h_l, &labels, &lengths, &store, 0.3, 0.3, cfg.mu, cfg.layer_norm_eps);

        let g = Graph::<f64>::new();
        let ctx = Ctx::eval(&g, &store, cfg.clone());
        let refs: Vec<&Conversation> = convs.iter().collect();
        let inputs = ModelInputs::from_conversations(&refs).unwrap();
        let out = forward(&ctx, &inputs).unwrap();
        let target: Vec<Option<usize>> = labels.iter().map(|&y| Some(y)).collect();
        let total = total_loss(
            out.logits_a,
            out.logits_l,
            out.logits_m,
            &target,
            out.connection_loss.as_ref().map(|c| c.total),
            0.3,
            0.3,
        )
        .unwrap()
        .total
        .item();

        assert!(common::max_diff(&reference.logits_a, &out.logits_a.value()) < 1e-9, "seed {seed}");
        assert!(common::max_diff(&reference.logits_l, &out.logits_l.value()) < 1e-9, "seed {seed}");
        assert!(common::max_diff(&reference.logits_m, &out.logits_m.value()) < 1e-9, "seed {seed}");
        assert!((total - reference.total).abs() < 1e-9, "seed {seed}: {total} vs {}", reference.total);
    }
}

#[test]
fn unnormalized_connection_loss_matches_reference() {
    let cfg = ModelConfig {
        normalized_connection: false,
        ..config()
    };
    let store = jittered(&init_params(&cfg, 1).unwrap(), 2);
    let mut rng = RngState::new(3);
    let h_a = common::random(&mut rng, 5, 6);
    let h_l = common::random(&mut rng, 5, 6);
    let reference = common::connection(&h_a, &h_l, &store, cfg.mu, false);

    let g = Graph::<f64>::new();
    let ctx = Ctx::eval(&g, &store, cfg.clone());
    let (a, l) = (g.constant(common::tensor_of(&h_a)), g.constant(common::tensor_of(&h_l)));
    let out = bcaf::model::connection::forward(&ctx, a, l).unwrap();
    let loss = bcaf::model::connection::connection_loss(a, l, &out, (&cfg).into()).unwrap();
    assert!((loss.total.item() - reference.loss).abs() < 1e-9);
}

#[test]
fn uniform_rows_give_log_class_count() {
    let logits = vec![vec![0.0; 5]; 3];
    assert!((common::cross_entropy(&logits, &[0, 3, 4]) - 5f64.ln()).abs() < 1e-15);
}
