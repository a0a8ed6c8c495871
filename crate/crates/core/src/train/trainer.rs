use super::config::TrainConfig;
use super::loss::{total_loss, LossBreakdown};
use super::metrics::{Confusion, EpochRecord, MetricsReport};
use crate::data::{Batch, Conversation, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{forward, init_params, Ctx, ModelInputs};
use crate::params::ParamStore;
use crate::tensor::{Adam, Graph, RngState, Tensor};

pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation weighted F1.
    pub params: ParamStore,
    /// Validation metrics of `params`, plus the per-epoch history.
    pub report: MetricsReport,
}

/// Class predictions for the real utterances of one input, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    pub predicted: Vec<usize>,
    pub loss: LossBreakdown,
}

fn check_split(convs: &[Conversation], cfg: &TrainConfig, split: Split) -> Result<()> {
    if convs.is_empty() {
        return Err(Error::Config(format!("the {} split is empty", split.as_str())));
    }
    let d = cfg.model.d_model;
    let c = cfg.model.num_classes;
    for conv in convs {
        if conv.dim() != Some(d) {
            return Err(Error::Config(format!(
                "conversation `{}` has feature dimension {:?} but d_model = {d}",
                conv.conversation_id,
                conv.dim()
            )));
        }
        if let Some(u) = conv.utterances.iter().find(|u| u.label >= c) {
            return Err(Error::Validation(format!(
                "utterance `{}` has label {} but the model has {c} classes",
                u.utterance_id, u.label
            )));
        }
    }
    Ok(())
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn softmax(row: &[f32]) -> Vec<f32> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f32 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn row_predictions(m: &Tensor<f32>, a: &Tensor<f32>, l: &Tensor<f32>, combine: bool) -> Vec<usize> {
    (0..m.shape()[0])
        .map(|r| {
            if combine {
                let avg: Vec<f32> = [softmax(m.row(r)), softmax(a.row(r)), softmax(l.row(r))]
                    .iter()
                    .fold(vec![0.0; m.shape()[1]], |acc, p| acc.iter().zip(p).map(|(x, y)| x + y / 3.0).collect());
                argmax(&avg)
            } else {
                argmax(m.row(r))
            }
        })
        .collect()
}

/// Eval-mode forward pass on one input.
pub fn predict(params: &ParamStore, cfg: &TrainConfig, inputs: &ModelInputs) -> Result<Prediction> {
    let graph = Graph::<f32>::new();
    let ctx = Ctx::eval(&graph, params, cfg.model.clone());
    let out = forward(&ctx, inputs)?;
    let labels: Vec<Option<usize>> = inputs.labels.iter().map(|&l| Some(l)).collect();
    let terms = total_loss(
        out.logits_a,
        out.logits_l,
        out.logits_m,
        &labels,
        out.connection_loss.as_ref().map(|c| c.total),
        cfg.effective_alpha(),
        cfg.beta,
    )?;
    let predicted = row_predictions(&out.logits_m.value(), &out.logits_a.value(), &out.logits_l.value(), cfg.combine_heads);
    Ok(Prediction {
        labels: inputs.labels.clone(),
        predicted,
        loss: terms.breakdown(),
    })
}

/// Metrics of the bimodal head (or the combiner) over `convs`.
pub fn evaluate(convs: &[Conversation], params: &ParamStore, cfg: &TrainConfig) -> Result<MetricsReport> {
    if convs.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    check_split(convs, cfg, convs[0].split)?;
    let mut confusion = Confusion::new(cfg.model.num_classes);
    let mut losses = Vec::new();
    for chunk in convs.chunks(cfg.batch_size) {
        let refs: Vec<&Conversation> = chunk.iter().collect();
        let p = predict(params, cfg, &ModelInputs::from_conversations(&refs)?)?;
        for (&t, &y) in p.labels.iter().zip(&p.predicted) {
            confusion.add(t, y)?;
        }
        losses.push((p.loss, p.labels.len() as f64));
    }
    Ok(MetricsReport::from_confusion(&confusion, LossBreakdown::weighted_mean(&losses)))
}

pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(dataset, cfg, |_| {})
}

/// Train with Adam and early stopping on validation weighted F1.
///
/// `on_epoch` sees each epoch's record as soon as it is complete.
pub fn train_with_progress(dataset: &Dataset, cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set = dataset.split(Split::Train);
    let val_set = dataset.split(Split::Validation);
    check_split(&train_set, cfg, Split::Train)?;
    check_split(&val_set, cfg, Split::Validation)?;

    let mut params = init_params(&cfg.model, cfg.seed)?;
    let mut adam = Adam::new(cfg.adam(), &params);
    let mut rng = RngState::new(cfg.seed.wrapping_add(1));
    let alpha = cfg.effective_alpha();

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut stale = 0;
    let mut early_stop_epoch = None;

    for epoch in 1..=cfg.max_epochs {
        rng.shuffle(&mut order);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&Conversation> = chunk.iter().map(|&i| &train_set[i]).collect();
            let max_len = refs.iter().map(|c| c.len()).max().unwrap_or(0);
            let inputs = ModelInputs::packed(&Batch::from_conversations(&refs, max_len)?)?;
            let graph = Graph::<f32>::new();
            let ctx = Ctx::new(&graph, &params, cfg.model.clone(), true, rng.fork());
            let out = forward(&ctx, &inputs)?;
            let labels: Vec<Option<usize>> = inputs.labels.iter().map(|&l| Some(l)).collect();
            let terms = total_loss(
                out.logits_a,
                out.logits_l,
                out.logits_m,
                &labels,
                out.connection_loss.as_ref().map(|c| c.total),
                alpha,
                cfg.beta,
            )?;
            let b = terms.breakdown();
            if !b.total.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss in epoch {epoch}")));
            }
            graph.backward(terms.total)?;
            adam.step(&mut params, &ctx.params.grads())?;
            losses.push((b, inputs.num_valid() as f64));
        }
        if !params.is_finite() {
            return Err(Error::Numeric(format!("non-finite parameters after epoch {epoch}")));
        }

        let val = evaluate(&val_set, &params, cfg)?;
        let train_accuracy = if cfg.track_train_accuracy {
            Some(evaluate(&train_set, &params, cfg)?.accuracy)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            train: LossBreakdown::weighted_mean(&losses),
            validation_weighted_f1: val.weighted_f1,
            validation_accuracy: val.accuracy,
            train_accuracy,
        };
        on_epoch(&record);
        history.push(record);

        if best.as_ref().is_none_or(|(f, _, _)| val.weighted_f1 > *f) {
            best = Some((val.weighted_f1, epoch, params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                early_stop_epoch = Some(epoch);
                break;
            }
        }
    }

    let (_, best_epoch, params) = best.expect("at least one epoch runs");
    let mut report = evaluate(&val_set, &params, cfg)?;
    report.epochs = history.len();
    report.loss_history = history;
    report.early_stop_epoch = early_stop_epoch;
    report.best_epoch = Some(best_epoch);
    Ok(TrainOutcome { params, report })
}
