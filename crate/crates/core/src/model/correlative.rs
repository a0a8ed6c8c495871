//! Correlative attention network: dual-softmax joint attention, bimodal
//! correlation coefficients, correlative scaling and the final aggregation.

use super::{init, AttnLayout, Ctx, ModelConfig};
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{RngState, Scalar, Tensor, Var};

/// λ is clamped to this range inside the joint attention.
pub const LAMBDA_RANGE: (f64, f64) = (-2.0, 2.0);

/// Joint-attention projections `{prefix}.{audio,text}.{wq,wk,wv}` and `{prefix}.lambda`.
pub fn init_joint(store: &mut ParamStore, rng: &mut RngState, prefix: &str, cfg: &ModelConfig) {
    let d = cfg.d_model;
    for m in Modality::BOTH {
        for p in ["wq", "wk", "wv"] {
            init::projection(store, rng, &format!("{prefix}.{}.{p}", m.name()), d, d);
        }
    }
    store.insert(format!("{prefix}.lambda"), Tensor::vector(vec![0.0]));
}

pub fn init_params(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut RngState) {
    init_joint(store, rng, "can.joint", cfg);
    init::linear(store, rng, "can.bimodal", cfg.d_model, cfg.d_latent);
    for m in Modality::BOTH {
        init::linear(store, rng, &format!("can.half.{}", m.name()), cfg.d_model, cfg.d_latent);
    }
}

/// Pieces of one joint-attention evaluation.
pub struct JointAttention<'g, T: Scalar> {
    /// `h*`
    pub output: Var<'g, T>,
    /// `softmax((Q_a K_aᵀ + Q_l K_lᵀ)/√d_k)`
    pub intra: Var<'g, T>,
    /// `softmax(Q_a K_lᵀ/√d_k)` (averaged with the mirrored term when symmetric)
    pub cross: Var<'g, T>,
    /// Clamped λ.
    pub lambda: Var<'g, T>,
}

/// `h* = (softmax((Q_aK_aᵀ + Q_lK_lᵀ)/√d_k) − λ softmax(Q_aK_lᵀ/√d_k)) · (V_a + V_l)/2`
pub fn joint_attention_parts<'g, T: Scalar>(
    ctx: &Ctx<'g, T>,
    s_a: Var<'g, T>,
    s_l: Var<'g, T>,
    layout: &AttnLayout,
    prefix: &str,
) -> Result<JointAttention<'g, T>> {
    if s_a.shape() != s_l.shape() || s_a.shape()[0] != layout.rows() {
        return Err(Error::shape("joint_attention", &s_a.shape(), &s_l.shape()));
    }
    let proj = |x: Var<'g, T>, m: &str, p: &str| -> Result<Var<'g, T>> { x.matmul(ctx.p(&format!("{prefix}.{m}.{p}"))?) };
    let (q_a, k_a, v_a) = (proj(s_a, "audio", "wq")?, proj(s_a, "audio", "wk")?, proj(s_a, "audio", "wv")?);
    let (q_l, k_l, v_l) = (proj(s_l, "text", "wq")?, proj(s_l, "text", "wk")?, proj(s_l, "text", "wv")?);
    let scale = 1.0 / (s_a.shape()[1] as f64).sqrt();
    let mask = Some(layout.key_mask());

    let scores = q_a.matmul(k_a.transpose()?)?.add(q_l.matmul(k_l.transpose()?)?)?;
    let intra = scores.scale(scale).softmax_rows(mask)?;
    let mut cross = q_a.matmul(k_l.transpose()?)?.scale(scale).softmax_rows(mask)?;
    if ctx.config.symmetric_joint {
        let mirrored = q_l.matmul(k_a.transpose()?)?.scale(scale).softmax_rows(mask)?;
        cross = cross.add(mirrored)?.scale(0.5);
    }
    let lambda = ctx.p(&format!("{prefix}.lambda"))?.clamp(LAMBDA_RANGE.0, LAMBDA_RANGE.1);
    let weights = intra.sub(cross.scale_by(lambda)?)?;
    let value = v_a.add(v_l)?.scale(0.5);
    let mut output = weights.matmul(value)?;
    if layout.has_padding() {
        output = output.mask_rows(layout.row_valid())?;
    }
    Ok(JointAttention {
        output,
        intra,
        cross,
        lambda,
    })
}

pub fn joint_attention<'g, T: Scalar>(
    ctx: &Ctx<'g, T>,
    s_a: Var<'g, T>,
    s_l: Var<'g, T>,
    layout: &AttnLayout,
    prefix: &str,
) -> Result<Var<'g, T>> {
    Ok(joint_attention_parts(ctx, s_a, s_l, layout, prefix)?.output)
}

/// `h_b = affine(h*)` and per-utterance `cos(e_a, h_b)`, `cos(e_l, h_b)`.
pub fn correlation_coefficients<'g, T: Scalar>(
    ctx: &Ctx<'g, T>,
    e_a: Var<'g, T>,
    e_l: Var<'g, T>,
    h_star: Var<'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>, Var<'g, T>)> {
    let h_b = ctx.linear(h_star, "can.bimodal")?;
    let eps = ctx.config.cosine_eps;
    let cor_a = e_a.cosine_rows(h_b, eps)?;
    let cor_l = e_l.cosine_rows(h_b, eps)?;
    Ok((h_b, cor_a, cor_l))
}

/// `h*_m = affine_m(h^s_m) · cor_m`, one scalar per utterance.
pub fn correlative_scale<'g, T: Scalar>(
    ctx: &Ctx<'g, T>,
    s_a: Var<'g, T>,
    s_l: Var<'g, T>,
    cor_a: Var<'g, T>,
    cor_l: Var<'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let hs_a = ctx.linear(s_a, "can.half.audio")?.row_scale(cor_a)?;
    let hs_l = ctx.linear(s_l, "can.half.text")?.row_scale(cor_l)?;
    Ok((hs_a, hs_l))
}

/// `h^c_a ⊕ h^c_l ⊕ h*_a ⊕ h*_l` along the feature axis.
pub fn aggregate<'g, T: Scalar>(
    c_a: Var<'g, T>,
    c_l: Var<'g, T>,
    hs_a: Var<'g, T>,
    hs_l: Var<'g, T>,
) -> Result<Var<'g, T>> {
    if c_a.shape() != c_l.shape() {
        return Err(Error::shape("aggregate", &c_a.shape(), &c_l.shape()));
    }
    if hs_a.shape() != hs_l.shape() {
        return Err(Error::shape("aggregate", &hs_a.shape(), &hs_l.shape()));
    }
    Var::concat_cols(&[c_a, c_l, hs_a, hs_l])
}

pub struct CorrelativeOutput<'g, T: Scalar> {
    pub h_b: Var<'g, T>,
    pub cor_a: Var<'g, T>,
    pub cor_l: Var<'g, T>,
    pub hs_a: Var<'g, T>,
    pub hs_l: Var<'g, T>,
    pub h_m: Var<'g, T>,
}

/// Correlation, scaling and aggregation over per-utterance rows.
#[allow(clippy::too_many_arguments)]
pub fn forward<'g, T: Scalar>(
    ctx: &Ctx<'g, T>,
    s_a: Var<'g, T>,
    s_l: Var<'g, T>,
    c_a: Var<'g, T>,
    c_l: Var<'g, T>,
    e_a: Var<'g, T>,
    e_l: Var<'g, T>,
    h_star: Var<'g, T>,
) -> Result<CorrelativeOutput<'g, T>> {
    let (h_b, cor_a, cor_l) = correlation_coefficients(ctx, e_a, e_l, h_star)?;
    let (hs_a, hs_l) = correlative_scale(ctx, s_a, s_l, cor_a, cor_l)?;
    let h_m = aggregate(c_a, c_l, hs_a, hs_l)?;
    Ok(CorrelativeOutput {
        h_b,
        cor_a,
        cor_l,
        hs_a,
        hs_l,
        h_m,
    })
}
