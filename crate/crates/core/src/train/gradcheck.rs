use std::collections::BTreeMap;

use serde::Serialize;

use super::loss::total_loss;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::attention::{self, cross_attention_block, self_attention_block};
use crate::model::connection::{self, connection_loss};
use crate::model::correlative::{self, correlation_coefficients, correlative_scale, joint_attention};
use crate::model::{forward, init_params, AttnLayout, Bindings, Ctx, ModelConfig, ModelInputs};
use crate::params::ParamStore;
use crate::tensor::{Graph, RngState, Tensor, Var};

pub type TensorMap = BTreeMap<String, Tensor<f64>>;

/// Element-wise acceptance: pass if within `abs` or within `rel` relative error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub step: f64,
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            step: 1e-3,
            rel: 1e-3,
            abs: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub elements: usize,
    pub failures: usize,
    pub max_abs_err: f64,
    /// Largest relative error among elements outside the absolute tolerance;
    /// 0 when every element is within it.
    pub max_rel_err: f64,
    /// `name[index]` of that element.
    pub worst: Option<String>,
    /// Smallest |ReLU input| at the unperturbed point.
    pub relu_margin: f64,
    /// Elements whose ±step probe flipped a ReLU and were re-probed with a
    /// smaller step.
    pub refined: usize,
    /// Elements still straddling a kink at the smallest step tried.
    pub unresolved: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Smallest step tried, relative to `Tolerance::step`, when a probe crosses a ReLU kink.
const MIN_STEP_FACTOR: f64 = 1e-4;

/// Compare reverse-mode gradients of `loss` against central differences for
/// every element of every tensor in `params`. Probes run through `exec`.
///
/// A central difference is only an oracle where the function is smooth over
/// `[p − h, p + h]`. When either probe changes the ReLU activation pattern,
/// the element is re-probed with `h/10`, `h/100`, … until both probes keep
/// the unperturbed pattern.
pub fn check<F>(name: &str, params: &TensorMap, tol: Tolerance, exec: Exec, loss: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, Bindings<'g, f64>) -> Result<Var<'g, f64>> + Sync,
{
    let graph = Graph::<f64>::new();
    let bindings = Bindings::from_tensors(&graph, params);
    let leaves: Vec<(String, Var<'_, f64>)> = params
        .keys()
        .map(|k| bindings.get(k).map(|v| (k.clone(), v)))
        .collect::<Result<_>>()?;
    let value = loss(&graph, bindings)?;
    let relu_margin = graph.relu_margin();
    let pattern = graph.relu_pattern();
    graph.backward(value)?;
    let analytic: Vec<f64> = leaves
        .iter()
        .flat_map(|(k, v)| match v.grad() {
            Some(g) => g.into_data(),
            None => vec![0.0; params[k].numel()],
        })
        .collect();

    let probes: Vec<(&String, usize)> = params
        .iter()
        .flat_map(|(k, t)| (0..t.numel()).map(move |i| (k, i)))
        .collect();
    let eval = |key: &String, idx: usize, delta: f64| -> Result<(f64, bool)> {
        let mut shifted = params.clone();
        shifted.get_mut(key).expect("probe key exists").data_mut()[idx] += delta;
        let g = Graph::<f64>::new();
        let b = Bindings::from_tensors(&g, &shifted);
        let v = loss(&g, b)?.item();
        Ok((v, g.relu_pattern() == pattern))
    };
    let numeric = exec.map(&probes, |&(k, i)| -> Result<(f64, u32)> {
        let mut h = tol.step;
        let mut refinements = 0;
        loop {
            let (plus, same_plus) = eval(k, i, h)?;
            let (minus, same_minus) = eval(k, i, -h)?;
            let smooth = same_plus && same_minus;
            if smooth || h <= tol.step * MIN_STEP_FACTOR {
                let flag = if smooth { refinements } else { u32::MAX };
                return Ok(((plus - minus) / (2.0 * h), flag));
            }
            h /= 10.0;
            refinements += 1;
        }
    });

    let mut report = GradCheckReport {
        name: name.to_string(),
        elements: probes.len(),
        failures: 0,
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst: None,
        relu_margin,
        refined: 0,
        unresolved: 0,
    };
    for (((k, i), n), a) in probes.iter().zip(numeric).zip(&analytic) {
        let (n, refinements) = n?;
        match refinements {
            0 => {}
            u32::MAX => report.unresolved += 1,
            _ => report.refined += 1,
        }
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(f64::MIN_POSITIVE);
        if !(abs <= tol.abs || rel <= tol.rel) {
            report.failures += 1;
        }
        report.max_abs_err = report.max_abs_err.max(abs);
        if abs > tol.abs && rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some(format!("{k}[{i}]"));
        }
    }
    Ok(report)
}

/// Sizes used by the gradient suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradDims {
    pub d_model: usize,
    pub d_latent: usize,
    pub max_len: usize,
    pub batch: usize,
    pub classes: usize,
}

impl Default for GradDims {
    fn default() -> Self {
        GradDims {
            d_model: 8,
            d_latent: 4,
            max_len: 3,
            batch: 2,
            classes: 4,
        }
    }
}

impl std::str::FromStr for GradDims {
    type Err = Error;

    /// `d=8,dl=4,T=3,B=2,C=4`; omitted keys keep their defaults.
    fn from_str(s: &str) -> Result<Self> {
        let mut dims = GradDims::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad dimension `{part}`")))?;
            let v: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad dimension `{part}`")))?;
            match k.trim() {
                "d" | "d_model" => dims.d_model = v,
                "dl" | "d_latent" => dims.d_latent = v,
                "T" | "t" => dims.max_len = v,
                "B" | "b" => dims.batch = v,
                "C" | "c" => dims.classes = v,
                other => return Err(Error::Config(format!("unknown dimension `{other}`"))),
            }
        }
        if dims.d_model == 0 || dims.d_latent == 0 || dims.max_len == 0 || dims.batch == 0 || dims.classes < 2 {
            return Err(Error::Config(format!("dimensions out of range: {s}")));
        }
        Ok(dims)
    }
}

fn random(rng: &mut RngState, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

/// Parameters moved off their initial values by `N(0, 0.1²)` noise, so that
/// zero-initialized biases do not put ReLU inputs exactly on the kink.
fn generic_point(store: &ParamStore, rng: &mut RngState) -> TensorMap {
    store
        .iter()
        .map(|(k, t)| {
            let mut t: Tensor<f64> = t.cast();
            for v in t.data_mut() {
                *v += 0.1 * rng.normal();
            }
            (k.to_string(), t)
        })
        .collect()
}

/// `Σ x ⊙ w` against a fixed random `w`, so every output element matters.
fn probe<'g>(x: Var<'g, f64>, w: &Tensor<f64>) -> Result<Var<'g, f64>> {
    Ok(x.mul(x.graph().constant(w.clone()))?.sum())
}

/// Lengths `T, T-1, …` (at least 1) so padding is exercised.
fn suite_lengths(dims: GradDims) -> Vec<usize> {
    (0..dims.batch).map(|b| dims.max_len.saturating_sub(b).max(1)).collect()
}

fn eval_ctx<'g>(g: &'g Graph<f64>, b: Bindings<'g, f64>, cfg: &ModelConfig) -> Ctx<'g, f64> {
    Ctx::with_bindings(g, b, cfg.clone(), false, RngState::new(0))
}

fn suite_config(dims: GradDims) -> ModelConfig {
    ModelConfig {
        d_model: dims.d_model,
        d_latent: dims.d_latent,
        d_ff: 2 * dims.d_model,
        num_classes: dims.classes,
        num_layers: 1,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

/// Gradient checks of the connection loss, the self/cross attention blocks,
/// joint attention (λ included), correlative scaling and the full objective.
pub fn gradient_suite(dims: GradDims, seed: u64, tol: Tolerance, exec: Exec) -> Result<Vec<GradCheckReport>> {
    let cfg = suite_config(dims);
    let mut rng = RngState::new(seed);
    let lengths = suite_lengths(dims);
    let rows: usize = lengths.iter().sum();
    let packed = AttnLayout::packed(&lengths)?;
    let (d, dl) = (dims.d_model, dims.d_latent);
    let h_a = random(&mut rng, rows, d);
    let h_l = random(&mut rng, rows, d);
    let w1 = random(&mut rng, rows, d);
    let w2 = random(&mut rng, rows, d);
    let wl1 = random(&mut rng, rows, dl);
    let wl2 = random(&mut rng, rows, dl);
    let mut reports = Vec::new();

    let mut store = ParamStore::new();
    connection::init_params(&mut store, &cfg, &mut rng);
    reports.push(check("connection_loss", &generic_point(&store, &mut rng), tol, exec, |g, b| {
        let ctx = eval_ctx(g, b, &cfg);
        let (a, l) = (g.constant(h_a.clone()), g.constant(h_l.clone()));
        let out = connection::forward(&ctx, a, l)?;
        Ok(connection_loss(a, l, &out, (&cfg).into())?.total)
    })?);

    let mut store = ParamStore::new();
    attention::init_block(&mut store, &mut rng, "blk", &cfg, true);
    reports.push(check("self_attention_block", &generic_point(&store, &mut rng), tol, exec, |g, b| {
        let ctx = eval_ctx(g, b, &cfg);
        probe(self_attention_block(&ctx, g.constant(h_a.clone()), &packed, "blk")?, &w1)
    })?);

    let mut store = ParamStore::new();
    attention::init_block(&mut store, &mut rng, "xa", &cfg, true);
    attention::init_block(&mut store, &mut rng, "xl", &cfg, true);
    reports.push(check("cross_attention_block", &generic_point(&store, &mut rng), tol, exec, |g, b| {
        let ctx = eval_ctx(g, b, &cfg);
        let (ca, cl) = cross_attention_block(&ctx, g.constant(h_a.clone()), g.constant(h_l.clone()), &packed, "xa", "xl")?;
        probe(ca, &w1)?.add(probe(cl, &w2)?)
    })?);

    let mut store = ParamStore::new();
    correlative::init_joint(&mut store, &mut rng, "joint", &cfg);
    store.insert("joint.lambda", Tensor::vector(vec![0.5]));
    reports.push(check("joint_attention", &generic_point(&store, &mut rng), tol, exec, |g, b| {
        let ctx = eval_ctx(g, b, &cfg);
        probe(joint_attention(&ctx, g.constant(h_a.clone()), g.constant(h_l.clone()), &packed, "joint")?, &w1)
    })?);

    let mut store = ParamStore::new();
    correlative::init_params(&mut store, &cfg, &mut rng);
    store.retain(|k| !k.starts_with("can.joint"));
    let (e_a, e_l, h_star) = (random(&mut rng, rows, dl), random(&mut rng, rows, dl), random(&mut rng, rows, d));
    reports.push(check("correlative_scale", &generic_point(&store, &mut rng), tol, exec, |g, b| {
        let ctx = eval_ctx(g, b, &cfg);
        let (_, cor_a, cor_l) = correlation_coefficients(&ctx, g.constant(e_a.clone()), g.constant(e_l.clone()), g.constant(h_star.clone()))?;
        let (hs_a, hs_l) = correlative_scale(&ctx, g.constant(h_a.clone()), g.constant(h_l.clone()), cor_a, cor_l)?;
        probe(hs_a, &wl1)?.add(probe(hs_l, &wl2)?)
    })?);

    let mut store = init_params(&cfg, rng.fork().seed())?;
    store.insert("can.joint.lambda", Tensor::vector(vec![0.5]));
    let inputs = suite_inputs(dims, &mut rng)?;
    reports.push(check("total_loss", &generic_point(&store, &mut rng), tol, exec, |g, b| {
        let ctx = eval_ctx(g, b, &cfg);
        let out = forward(&ctx, &inputs)?;
        let labels: Vec<Option<usize>> = inputs.labels.iter().map(|&l| Some(l)).collect();
        let conn = out.connection_loss.as_ref().map(|c| c.total);
        Ok(total_loss(out.logits_a, out.logits_l, out.logits_m, &labels, conn, 0.3, 0.3)?.total)
    })?);
    Ok(reports)
}

/// Padded `B×T` inputs with random features and labels.
fn suite_inputs(dims: GradDims, rng: &mut RngState) -> Result<ModelInputs> {
    use crate::data::{Batch, Conversation, Split, Utterance};
    let convs: Vec<Conversation> = suite_lengths(dims)
        .into_iter()
        .enumerate()
        .map(|(b, len)| Conversation {
            conversation_id: format!("g{b}"),
            split: Split::Train,
            utterances: (0..len)
                .map(|t| Utterance {
                    utterance_id: format!("g{b}#{t}"),
                    audio: (0..dims.d_model).map(|_| rng.normal() as f32).collect(),
                    text: (0..dims.d_model).map(|_| rng.normal() as f32).collect(),
                    label: rng.below(dims.classes),
                })
                .collect(),
        })
        .collect();
    let refs: Vec<&Conversation> = convs.iter().collect();
    ModelInputs::padded(&Batch::from_conversations(&refs, dims.max_len)?)
}
