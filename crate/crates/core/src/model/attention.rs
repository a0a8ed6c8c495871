//! Bimodal attention network: per-modality self-attention blocks and
//! bidirectional cross-attention blocks, stacked in layers.
//!
//! Attention runs over the utterances of each conversation (rows sharing a
//! conversation in the [`AttnLayout`]); there is no token axis. Every block
//! is
//!
//! ```text
//! ζ  = softmax(Q Kᵀ / √d_k) V          Q from the query source, K/V from the key source
//! Hˢ = LayerNorm(H + ζ)                 H is the block's own modality
//! h  = LayerNorm(Hˢ + FFN(Hˢ))          FFN = W₂ relu(W₁ x + b₁) + b₂
//! ```
//!
//! Self-attention takes Q, K, V and H from one modality. The cross block that
//! updates audio takes Q from text and K, V, H from audio, and vice versa.

use super::{correlative, init, AttnLayout, Ctx, ModelConfig, Variant};
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{RngState, Scalar, Var};

/// Projections (no bias), two layer norms and the feed-forward pair.
pub fn init_block(store: &mut ParamStore, rng: &mut RngState, prefix: &str, cfg: &ModelConfig, projections: bool) {
    let d = cfg.d_model;
    if projections {
        for p in ["wq", "wk", "wv"] {
            init::projection(store, rng, &format!("{prefix}.{p}"), d, d);
        }
    }
    init::layer_norm(store, &format!("{prefix}.ln1"), d);
    init::linear(store, rng, &format!("{prefix}.ff1"), d, cfg.d_ff);
    init::linear(store, rng, &format!("{prefix}.ff2"), cfg.d_ff, d);
    init::layer_norm(store, &format!("{prefix}.ln2"), d);
}

pub fn init_params(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut RngState) {
    for layer in 0..cfg.num_layers {
        let base = format!("ban.l{layer}");
        let (self_branch, cross_branch) = match cfg.variant {
            Variant::Ban => (true, true),
            Variant::BanSa => (true, false),
            Variant::BanCa => (false, true),
            Variant::Jan => {
                correlative::init_joint(store, rng, &format!("{base}.joint"), cfg);
                for m in Modality::BOTH {
                    init_block(store, rng, &format!("{base}.jpost.{}", m.name()), cfg, false);
                }
                continue;
            }
        };
        for m in Modality::BOTH {
            if self_branch {
                init_block(store, rng, &format!("{base}.self.{}", m.name()), cfg, true);
            }
            if cross_branch {
                init_block(store, rng, &format!("{base}.cross.{}", m.name()), cfg, true);
            }
        }
    }
}

/// Attention output and the per-head weight matrices that produced it.
pub struct Attended<'g, T: Scalar> {
    pub output: Var<'g, T>,
    pub weights: Vec<Var<'g, T>>,
}

/// `softmax(Q Kᵀ / √d_k) V` with `Q = query_src·W^Q`, `K = key_src·W^K`,
/// `V = key_src·W^V`, split across `num_heads` column groups.
pub fn attend<'g, T: Scalar>(
    ctx: &Ctx<'g, T>,
    query_src: Var<'g, T>,
    key_src: Var<'g, T>,
    layout: &AttnLayout,
    prefix: &str,
) -> Result<Attended<'g, T>> {
    let rows = layout.rows();
    if query_src.shape()[0] != rows || key_src.shape()[0] != rows {
        return Err(Error::shape("attention", &query_src.shape(), &key_src.shape()));
    }
    let q = query_src.matmul(ctx.p(&format!("{prefix}.wq"))?)?;
    let k = key_src.matmul(ctx.p(&format!("{prefix}.wk"))?)?;
    let v = key_src.matmul(ctx.p(&format!("{prefix}.wv"))?)?;
    let heads = ctx.config.num_heads;
    let d = q.shape()[1];
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let mut outputs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (q.slice_cols(h * dk, dk)?, k.slice_cols(h * dk, dk)?, v.slice_cols(h * dk, dk)?)
        };
        let scores = qh.matmul(kh.transpose()?)?.scale(scale);
        let a = scores.softmax_rows(Some(layout.key_mask()))?;
        outputs.push(a.matmul(vh)?);
        weights.push(a);
    }
    let mut output = if heads == 1 {
        outputs[0]
    } else {
        Var::concat_cols(&outputs)?
    };
    if layout.has_padding() {
        output = output.mask_rows(layout.row_valid())?;
    }
    Ok(Attended { output, weights })
}

/// `LayerNorm(Hˢ + FFN(Hˢ))` with `Hˢ = LayerNorm(residual + update)`.
pub fn add_norm_ffn<'g, T: Scalar>(
    ctx: &Ctx<'g, T>,
    residual: Var<'g, T>,
    update: Var<'g, T>,
    layout: &AttnLayout,
    prefix: &str,
) -> Result<Var<'g, T>> {
    let x = residual.add(ctx.dropout(update)?)?;
    let x = ctx.layer_norm(x, &format!("{prefix}.ln1"))?;
    let f = ctx.linear(x, &format!("{prefix}.ff1"))?.relu();
    let f = ctx.linear(ctx.dropout(f)?, &format!("{prefix}.ff2"))?;
    let mut h = ctx.layer_norm(x.add(ctx.dropout(f)?)?, &format!("{prefix}.ln2"))?;
    if layout.has_padding() {
        h = h.mask_rows(layout.row_valid())?;
    }
    Ok(h)
}

/// Intra-modal block: queries, keys and values all from `h`.
pub fn self_attention_block<'g, T: Scalar>(
    ctx: &Ctx<'g, T>,
    h: Var<'g, T>,
    layout: &AttnLayout,
    prefix: &str,
) -> Result<Var<'g, T>> {
    let z = attend(ctx, h, h, layout, prefix)?.output;
    add_norm_ffn(ctx, h, z, layout, prefix)
}

/// Inter-modal blocks. Audio is updated with text queries over audio keys
/// and values (`prefix_a`); text with audio queries over text keys and values
/// (`prefix_l`).
pub fn cross_attention_block<'g, T: Scalar>(
    ctx: &Ctx<'g, T>,
    h_a: Var<'g, T>,
    h_l: Var<'g, T>,
    layout: &AttnLayout,
    prefix_a: &str,
    prefix_l: &str,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    if h_a.shape() != h_l.shape() {
        return Err(Error::shape("cross_attention", &h_a.shape(), &h_l.shape()));
    }
    let z_la = attend(ctx, h_l, h_a, layout, prefix_a)?.output;
    let c_a = add_norm_ffn(ctx, h_a, z_la, layout, prefix_a)?;
    let z_al = attend(ctx, h_a, h_l, layout, prefix_l)?.output;
    let c_l = add_norm_ffn(ctx, h_l, z_al, layout, prefix_l)?;
    Ok((c_a, c_l))
}

/// Self-branch (`s_*`) and cross-branch (`c_*`) outputs of the last layer.
#[derive(Clone, Copy)]
pub struct BanOutput<'g, T: Scalar> {
    pub s_a: Var<'g, T>,
    pub s_l: Var<'g, T>,
    pub c_a: Var<'g, T>,
    pub c_l: Var<'g, T>,
}

/// Run the configured attention stack.
///
/// Layer ℓ+1 consumes layer ℓ's self outputs in its self branch and cross
/// outputs in its cross branch. BAN-SA has no cross branch and reports its
/// self outputs as cross outputs; BAN-CA has no self branch and reports its
/// cross outputs as self outputs. JAN updates each modality with one shared
/// joint-attention map per layer and reports the result for both branches.
pub fn ban_forward<'g, T: Scalar>(
    ctx: &Ctx<'g, T>,
    h_a: Var<'g, T>,
    h_l: Var<'g, T>,
    layout: &AttnLayout,
) -> Result<BanOutput<'g, T>> {
    let cfg = &ctx.config;
    let (mut s_a, mut s_l, mut c_a, mut c_l) = (h_a, h_l, h_a, h_l);
    for layer in 0..cfg.num_layers {
        let base = format!("ban.l{layer}");
        match cfg.variant {
            Variant::Ban | Variant::BanSa | Variant::BanCa => {
                if cfg.variant != Variant::BanCa {
                    s_a = self_attention_block(ctx, s_a, layout, &format!("{base}.self.audio"))?;
                    s_l = self_attention_block(ctx, s_l, layout, &format!("{base}.self.text"))?;
                }
                if cfg.variant != Variant::BanSa {
                    (c_a, c_l) = cross_attention_block(
                        ctx,
                        c_a,
                        c_l,
                        layout,
                        &format!("{base}.cross.audio"),
                        &format!("{base}.cross.text"),
                    )?;
                }
            }
            Variant::Jan => {
                let j = correlative::joint_attention(ctx, s_a, s_l, layout, &format!("{base}.joint"))?;
                s_a = add_norm_ffn(ctx, s_a, j, layout, &format!("{base}.jpost.audio"))?;
                s_l = add_norm_ffn(ctx, s_l, j, layout, &format!("{base}.jpost.text"))?;
            }
        }
    }
    match cfg.variant {
        Variant::Ban => {}
        Variant::BanSa | Variant::Jan => (c_a, c_l) = (s_a, s_l),
        Variant::BanCa => (s_a, s_l) = (c_a, c_l),
    }
    Ok(BanOutput { s_a, s_l, c_a, c_l })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    fn cfg(variant: Variant, layers: usize) -> ModelConfig {
        ModelConfig {
            variant,
            dropout: 0.0,
            ..ModelConfig::desk(4, 3, layers)
        }
    }

    fn params(c: &ModelConfig, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_params(&mut s, c, &mut RngState::new(seed));
        s
    }

    fn random(rows: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut r = RngState::new(seed);
        Tensor::new(vec![rows, d], (0..rows * d).map(|_| r.normal()).collect()).unwrap()
    }

    #[test]
    fn single_utterance_attention_is_value_projection() {
        let c = cfg(Variant::Ban, 1);
        let s = params(&c, 1);
        let g = Graph::<f64>::new();
        let ctx = Ctx::eval(&g, &s, c);
        let layout = AttnLayout::packed(&[1]).unwrap();
        let h = g.constant(random(1, 4, 2));
        let att = attend(&ctx, h, h, &layout, "ban.l0.self.audio").unwrap();
        assert_eq!(att.weights[0].value().data(), &[1.0]);
        let v = h.matmul(ctx.p("ban.l0.self.audio.wv").unwrap()).unwrap();
        assert_eq!(att.output.value().data(), v.value().data());
    }

    #[test]
    fn identical_utterances_get_identical_rows() {
        let c = cfg(Variant::Ban, 1);
        let mut s = params(&c, 3);
        *s.get_mut("ban.l0.self.audio.wv").unwrap() = Tensor::identity(4);
        let g = Graph::<f64>::new();
        let ctx = Ctx::eval(&g, &s, c);
        let row = random(1, 4, 4);
        let both = Tensor::new(vec![2, 4], [row.data(), row.data()].concat()).unwrap();
        let h = g.constant(both);
        let layout = AttnLayout::packed(&[2]).unwrap();
        let z = attend(&ctx, h, h, &layout, "ban.l0.self.audio").unwrap().output.value();
        assert_eq!(z.row(0), z.row(1));
    }

    #[test]
    fn cross_equals_self_for_identical_inputs_and_shared_params() {
        let c = cfg(Variant::Ban, 1);
        let mut s = params(&c, 5);
        let names: Vec<String> = s.names().filter(|n| n.starts_with("ban.l0.self.audio")).map(String::from).collect();
        for n in names {
            let t = s.get(&n).unwrap().clone();
            s.insert(n.replace("self.audio", "cross.audio"), t.clone());
            s.insert(n.replace("self.audio", "cross.text"), t);
        }
        let g = Graph::<f64>::new();
        let ctx = Ctx::eval(&g, &s, c);
        let layout = AttnLayout::packed(&[3]).unwrap();
        let h = g.constant(random(3, 4, 6));
        let self_out = self_attention_block(&ctx, h, &layout, "ban.l0.self.audio").unwrap();
        let (c_a, c_l) = cross_attention_block(&ctx, h, h, &layout, "ban.l0.cross.audio", "ban.l0.cross.text").unwrap();
        assert_eq!(self_out.value().data(), c_a.value().data());
        assert_eq!(self_out.value().data(), c_l.value().data());
    }

    #[test]
    fn multi_head_output_shape() {
        let c = ModelConfig {
            num_heads: 2,
            ..cfg(Variant::Ban, 1)
        };
        let s = params(&c, 9);
        let g = Graph::<f64>::new();
        let ctx = Ctx::eval(&g, &s, c);
        let layout = AttnLayout::packed(&[2, 3]).unwrap();
        let h = g.constant(random(5, 4, 1));
        let att = attend(&ctx, h, h, &layout, "ban.l0.self.text").unwrap();
        assert_eq!(att.weights.len(), 2);
        assert_eq!(att.output.shape(), vec![5, 4]);
    }

    #[test]
    fn variant_reductions() {
        let layout = AttnLayout::packed(&[3, 2]).unwrap();
        let ha = random(5, 4, 10);
        let hl = random(5, 4, 11);
        let run = |variant| {
            let c = cfg(variant, 2);
            // every variant draws from the same BAN parameter set
            let s = params(&cfg(Variant::Ban, 2), 12);
            let g = Graph::<f64>::new();
            let ctx = Ctx::eval(&g, &s, c);
            let out = ban_forward(&ctx, g.constant(ha.clone()), g.constant(hl.clone()), &layout).unwrap();
            [out.s_a, out.s_l, out.c_a, out.c_l].map(|v| v.value().data().to_vec())
        };
        let ban = run(Variant::Ban);
        let sa = run(Variant::BanSa);
        let ca = run(Variant::BanCa);
        assert_eq!(sa[0], ban[0]);
        assert_eq!(sa[1], ban[1]);
        assert_eq!(sa[2], sa[0]);
        assert_eq!(ca[2], ban[2]);
        assert_eq!(ca[3], ban[3]);
        assert_eq!(ca[0], ca[2]);
    }

    #[test]
    fn jan_stack_runs() {
        let c = cfg(Variant::Jan, 2);
        let s = params(&c, 13);
        assert!(s.contains("ban.l1.joint.lambda"));
        let g = Graph::<f64>::new();
        let ctx = Ctx::eval(&g, &s, c);
        let layout = AttnLayout::packed(&[3]).unwrap();
        let out = ban_forward(&ctx, g.constant(random(3, 4, 1)), g.constant(random(3, 4, 2)), &layout).unwrap();
        assert_eq!(out.s_a.shape(), vec![3, 4]);
        assert_eq!(out.c_l.value().data(), out.s_l.value().data());
    }
}
