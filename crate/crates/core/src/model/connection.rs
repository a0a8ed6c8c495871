//! Interactive connection network: per-modality encoder/decoder pairs and
//! the connection loss tying the two modalities' latent and reconstructed
//! spaces together.

use super::{init, Ctx, ModelConfig};
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{RngState, Scalar, Tensor, Var};

/// Encoder widths `d_model → h1 → h2 → d_latent`. The hidden widths keep the
/// 1024 → 768 → 640 ratios for any `d_model`.
pub fn hidden_widths(d_model: usize) -> (usize, usize) {
    let h1 = ((d_model as f64) * 0.75).round().max(1.0) as usize;
    let h2 = ((d_model as f64) * 0.625).round().max(1.0) as usize;
    (h1, h2)
}

fn widths(cfg: &ModelConfig) -> [usize; 4] {
    let (h1, h2) = hidden_widths(cfg.d_model);
    [cfg.d_model, h1, h2, cfg.d_latent]
}

pub fn init_params(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut RngState) {
    let w = widths(cfg);
    for m in Modality::BOTH {
        for i in 0..3 {
            init::linear(store, rng, &format!("icn.{}.enc{i}", m.name()), w[i], w[i + 1]);
        }
        for i in 0..3 {
            init::linear(store, rng, &format!("icn.{}.dec{i}", m.name()), w[3 - i], w[2 - i]);
        }
    }
}

/// Latent code `e_m`: three affine + ReLU stages, dropout after the hidden two.
pub fn encode<'g, T: Scalar>(ctx: &Ctx<'g, T>, h: Var<'g, T>, modality: Modality) -> Result<Var<'g, T>> {
    let d = ctx.config.d_model;
    if h.shape().last() != Some(&d) {
        return Err(Error::shape("encode", &h.shape(), &[d]));
    }
    let mut x = h;
    for i in 0..3 {
        x = ctx.linear(x, &format!("icn.{}.enc{i}", modality.name()))?.relu();
        if i < 2 {
            x = ctx.dropout(x)?;
        }
    }
    Ok(x)
}

/// Reconstruction `d_m`. The last layer is linear unless `final_decoder_relu`.
pub fn decode<'g, T: Scalar>(ctx: &Ctx<'g, T>, e: Var<'g, T>, modality: Modality) -> Result<Var<'g, T>> {
    let dl = ctx.config.d_latent;
    if e.shape().last() != Some(&dl) {
        return Err(Error::shape("decode", &e.shape(), &[dl]));
    }
    let mut x = e;
    for i in 0..3 {
        x = ctx.linear(x, &format!("icn.{}.dec{i}", modality.name()))?;
        if i < 2 {
            x = ctx.dropout(x.relu())?;
        } else if ctx.config.final_decoder_relu {
            x = x.relu();
        }
    }
    Ok(x)
}

pub struct ConnectionOutput<'g, T: Scalar> {
    pub e_a: Var<'g, T>,
    pub e_l: Var<'g, T>,
    pub d_a: Var<'g, T>,
    pub d_l: Var<'g, T>,
}

pub fn forward<'g, T: Scalar>(ctx: &Ctx<'g, T>, h_a: Var<'g, T>, h_l: Var<'g, T>) -> Result<ConnectionOutput<'g, T>> {
    let e_a = encode(ctx, h_a, Modality::Audio)?;
    let e_l = encode(ctx, h_l, Modality::Text)?;
    let d_a = decode(ctx, e_a, Modality::Audio)?;
    let d_l = decode(ctx, e_l, Modality::Text)?;
    Ok(ConnectionOutput { e_a, e_l, d_a, d_l })
}

/// Options of the connection loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConnectionLossConfig {
    pub mu: f64,
    pub normalized: bool,
    pub clip: Option<f64>,
}

impl From<&ModelConfig> for ConnectionLossConfig {
    fn from(c: &ModelConfig) -> Self {
        ConnectionLossConfig {
            mu: c.mu,
            normalized: c.normalized_connection,
            clip: c.connection_loss_clip,
        }
    }
}

/// The connection loss and its four Frobenius terms (after optional
/// element-count normalization).
pub struct ConnectionLoss<'g, T: Scalar> {
    pub total: Var<'g, T>,
    pub recon_a: Var<'g, T>,
    pub recon_l: Var<'g, T>,
    pub gram_latent: Var<'g, T>,
    pub gram_output: Var<'g, T>,
}

/// `|H_a − d_a|² + |H_l − d_l|² + μ(|I_e − e_aᵀe_l|² − |I_d − d_aᵀd_l|²)`,
/// Frobenius norms over the rows given (the batch's real utterances).
pub fn connection_loss<'g, T: Scalar>(
    h_a: Var<'g, T>,
    h_l: Var<'g, T>,
    out: &ConnectionOutput<'g, T>,
    cfg: ConnectionLossConfig,
) -> Result<ConnectionLoss<'g, T>> {
    if cfg.mu.is_nan() || cfg.mu < 0.0 {
        return Err(Error::Config(format!("mu must be >= 0, got {}", cfg.mu)));
    }
    let g = h_a.graph();
    let norm = |v: Var<'g, T>, count: usize| {
        if cfg.normalized {
            v.scale(1.0 / count as f64)
        } else {
            v
        }
    };
    let sq = |a: Var<'g, T>, b: Var<'g, T>| -> Result<Var<'g, T>> {
        let n = a.value().numel();
        Ok(norm(a.sub(b)?.frobenius_sq(), n))
    };
    let recon_a = sq(h_a, out.d_a)?;
    let recon_l = sq(h_l, out.d_l)?;

    let gram = |x: Var<'g, T>, y: Var<'g, T>| -> Result<Var<'g, T>> {
        let m = x.transpose()?.matmul(y)?;
        let k = m.shape()[0];
        let eye = g.constant(Tensor::identity(k));
        Ok(norm(eye.sub(m)?.frobenius_sq(), k * k))
    };
    let gram_latent = gram(out.e_a, out.e_l)?;
    let mut gram_output = gram(out.d_a, out.d_l)?;
    if let Some(cap) = cfg.clip {
        gram_output = gram_output.clamp(f64::NEG_INFINITY, cap);
    }

    let cross = gram_latent.sub(gram_output)?.scale(cfg.mu);
    let total = recon_a.add(recon_l)?.add(cross)?;
    Ok(ConnectionLoss {
        total,
        recon_a,
        recon_l,
        gram_latent,
        gram_output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn cfg(d: usize, dl: usize) -> ModelConfig {
        ModelConfig {
            d_latent: dl,
            dropout: 0.0,
            ..ModelConfig::desk(d, 4, 1)
        }
    }

    fn store(c: &ModelConfig, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_params(&mut s, c, &mut RngState::new(seed));
        s
    }

    #[test]
    fn default_widths() {
        assert_eq!(hidden_widths(1024), (768, 640));
        assert_eq!(widths(&ModelConfig::default()), [1024, 768, 640, 512]);
    }

    #[test]
    fn encode_decode_shapes() {
        let c = cfg(16, 8);
        let s = store(&c, 1);
        let g = Graph::<f32>::new();
        let ctx = Ctx::eval(&g, &s, c);
        let h = g.constant(Tensor::filled(&[4, 16], 0.5));
        let e = encode(&ctx, h, Modality::Audio).unwrap();
        assert_eq!(e.shape(), vec![4, 8]);
        assert_eq!(decode(&ctx, e, Modality::Audio).unwrap().shape(), vec![4, 16]);
        let bad = g.constant(Tensor::zeros(&[4, 15]));
        assert!(encode(&ctx, bad, Modality::Text).is_err());
    }

    #[test]
    fn zero_params_give_zero_outputs() {
        let c = cfg(16, 8);
        let mut s = store(&c, 2);
        for (_, t) in s.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let g = Graph::<f32>::new();
        let ctx = Ctx::eval(&g, &s, c);
        let h = g.constant(Tensor::zeros(&[3, 16]));
        let e = encode(&ctx, h, Modality::Audio).unwrap();
        assert!(e.value().data().iter().all(|&v| v == 0.0));
        let d = decode(&ctx, e, Modality::Audio).unwrap();
        assert!(d.value().data().iter().all(|&v| v == 0.0));
    }

    fn manual_output<'g>(g: &'g Graph<f64>, h_a: &Tensor<f64>, h_l: &Tensor<f64>, e_a: &Tensor<f64>, e_l: &Tensor<f64>) -> ConnectionOutput<'g, f64> {
        ConnectionOutput {
            e_a: g.constant(e_a.clone()),
            e_l: g.constant(e_l.clone()),
            d_a: g.constant(h_a.clone()),
            d_l: g.constant(h_l.clone()),
        }
    }

    #[test]
    fn perfect_case_is_zero() {
        // N = 2 rows, e_aᵀe_l = I and d_aᵀd_l = H_aᵀH_l = I with d_model = 2.
        let g = Graph::<f64>::new();
        let eye = Tensor::<f64>::identity(2);
        let out = manual_output(&g, &eye, &eye, &eye, &eye);
        let (ha, hl) = (g.constant(eye.clone()), g.constant(eye.clone()));
        for normalized in [true, false] {
            let c = ConnectionLossConfig { mu: 0.7, normalized, clip: None };
            assert_eq!(connection_loss(ha, hl, &out, c).unwrap().total.item(), 0.0);
        }
    }

    #[test]
    fn mu_zero_is_reconstruction_only_and_negative_mu_rejected() {
        let g = Graph::<f64>::new();
        let h = Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let d = Tensor::from_f64(&[2, 2], &[1.5, 2.0, 3.0, 3.0]).unwrap();
        let e = Tensor::from_f64(&[2, 1], &[5.0, -1.0]).unwrap();
        let out = ConnectionOutput {
            e_a: g.constant(e.clone()),
            e_l: g.constant(e.clone()),
            d_a: g.constant(d.clone()),
            d_l: g.constant(d.clone()),
        };
        let (ha, hl) = (g.constant(h.clone()), g.constant(h.clone()));
        let c = ConnectionLossConfig { mu: 0.0, normalized: false, clip: None };
        // (0.25 + 1) per modality
        assert_eq!(connection_loss(ha, hl, &out, c).unwrap().total.item(), 2.5);
        let bad = ConnectionLossConfig { mu: -1.0, ..c };
        assert!(matches!(connection_loss(ha, hl, &out, bad), Err(Error::Config(_))));
    }

    #[test]
    fn clip_caps_the_output_gram_term() {
        let g = Graph::<f64>::new();
        let h = Tensor::from_f64(&[2, 2], &[3.0, 0.0, 0.0, 3.0]).unwrap();
        let out = manual_output(&g, &h, &h, &Tensor::identity(2), &Tensor::identity(2));
        let (ha, hl) = (g.constant(h.clone()), g.constant(h.clone()));
        let c = ConnectionLossConfig { mu: 1.0, normalized: false, clip: None };
        // |I - 9I|² = 2·64 = 128, subtracted.
        assert_eq!(connection_loss(ha, hl, &out, c).unwrap().total.item(), -128.0);
        let clipped = ConnectionLossConfig { clip: Some(10.0), ..c };
        assert_eq!(connection_loss(ha, hl, &out, clipped).unwrap().total.item(), -10.0);
    }
}
