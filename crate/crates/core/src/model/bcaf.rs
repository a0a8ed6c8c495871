use super::attention::{self, BanOutput};
use super::connection::{self, ConnectionLoss, ConnectionOutput};
use super::correlative::{self, CorrelativeOutput};
use super::{init, AttnLayout, Ctx, ModelConfig, Positional};
use crate::data::{Batch, Conversation, Modality};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{RngState, Scalar, Tensor, Var};

/// Fresh parameters for `cfg`. Only components the configuration actually
/// uses are created, so every stored tensor receives a gradient.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = RngState::new(seed);
    let mut store = ParamStore::new();
    let (d, dl, c) = (cfg.d_model, cfg.d_latent, cfg.num_classes);
    if !cfg.ablations.icn {
        connection::init_params(&mut store, cfg, &mut rng);
    } else if !cfg.ablations.can {
        for m in Modality::BOTH {
            init::linear(&mut store, &mut rng, &format!("icn_bypass.{}", m.name()), d, dl);
        }
    }
    if !cfg.ablations.ban {
        attention::init_params(&mut store, cfg, &mut rng);
    }
    if !cfg.ablations.can {
        correlative::init_params(&mut store, cfg, &mut rng);
    }
    init::linear(&mut store, &mut rng, "head.audio", d, c);
    init::linear(&mut store, &mut rng, "head.text", d, c);
    init::linear(&mut store, &mut rng, "head.bimodal", cfg.fused_width(), c);
    Ok(store)
}

/// Stacked utterance features ready for a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInputs {
    /// `[R×d]`, R = rows of `layout` (padding included for padded inputs).
    pub audio: Tensor<f32>,
    pub text: Tensor<f32>,
    pub layout: AttnLayout,
    /// Labels of the real rows, in `layout.valid_rows()` order.
    pub labels: Vec<usize>,
    /// Position `b*T + t` of each real row in the originating padded batch.
    pub batch_slots: Vec<usize>,
    /// `(B, T)` of the originating padded batch.
    pub batch_dims: (usize, usize),
}

impl ModelInputs {
    /// Real utterances only, conversations back to back.
    pub fn packed(batch: &Batch) -> Result<Self> {
        let rows = batch.valid_rows();
        let d = batch.dim();
        let flat = |t: &Tensor<f32>| t.clone().reshape(&[batch.batch_size() * batch.max_len(), d]);
        Ok(ModelInputs {
            audio: flat(&batch.audio)?.gather_rows(&rows),
            text: flat(&batch.text)?.gather_rows(&rows),
            layout: AttnLayout::packed(&batch.lengths())?,
            labels: batch.valid_labels(),
            batch_slots: rows,
            batch_dims: (batch.batch_size(), batch.max_len()),
        })
    }

    /// All `B×T` slots; padding excluded from attention by the layout mask.
    pub fn padded(batch: &Batch) -> Result<Self> {
        let (b, t, d) = (batch.batch_size(), batch.max_len(), batch.dim());
        Ok(ModelInputs {
            audio: batch.audio.clone().reshape(&[b * t, d])?,
            text: batch.text.clone().reshape(&[b * t, d])?,
            layout: AttnLayout::padded(b, t, &batch.mask)?,
            labels: batch.valid_labels(),
            batch_slots: batch.valid_rows(),
            batch_dims: (b, t),
        })
    }

    pub fn from_conversations(convs: &[&Conversation]) -> Result<Self> {
        let t = convs.iter().map(|c| c.len()).max().unwrap_or(0);
        Self::packed(&Batch::from_conversations(convs, t)?)
    }

    pub fn num_valid(&self) -> usize {
        self.labels.len()
    }

    /// Place per-utterance rows `[N×k]` back into a zero-padded `[B×T×k]`.
    pub fn to_padded<'g, T: Scalar>(&self, rows: Var<'g, T>) -> Result<Var<'g, T>> {
        let (b, t) = self.batch_dims;
        let k = rows.shape()[1];
        rows.scatter_rows(&self.batch_slots, b * t)?.reshape(&[b, t, k])
    }
}

/// Outputs of one forward pass, all over the real utterances in order.
pub struct ForwardOutput<'g, T: Scalar> {
    pub logits_a: Var<'g, T>,
    pub logits_l: Var<'g, T>,
    pub logits_m: Var<'g, T>,
    /// Absent when the connection network is ablated.
    pub connection_loss: Option<ConnectionLoss<'g, T>>,
    pub connection: Option<ConnectionOutput<'g, T>>,
    pub ban: BanOutput<'g, T>,
    /// Absent when the correlative network is ablated.
    pub correlative: Option<CorrelativeOutput<'g, T>>,
    pub h_star: Option<Var<'g, T>>,
    /// Input to the bimodal head.
    pub h_m: Var<'g, T>,
}

fn sinusoidal(positions: &[usize], d: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = p as f64 * freq;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32);
        }
    }
    Tensor::new(vec![positions.len(), d], data).expect("shape matches")
}

/// Full BCAF forward pass.
///
/// Ablation bypasses: without the connection network the latent codes used
/// for correlation come from a learned affine map of the inputs and no
/// connection loss is produced; without the bimodal attention network both
/// branches pass the inputs through unchanged; without the correlative
/// network the bimodal head reads `h^c_a ⊕ h^c_l`.
pub fn forward<'g, T: Scalar>(ctx: &Ctx<'g, T>, inputs: &ModelInputs) -> Result<ForwardOutput<'g, T>> {
    let cfg = &ctx.config;
    let layout = &inputs.layout;
    if inputs.audio.shape() != [layout.rows(), cfg.d_model] || inputs.text.shape() != inputs.audio.shape() {
        return Err(Error::shape("forward", inputs.audio.shape(), &[layout.rows(), cfg.d_model]));
    }
    let h_a = ctx.constant(&inputs.audio);
    let h_l = ctx.constant(&inputs.text);
    let valid = layout.valid_rows();
    let padded = layout.has_padding();
    let real = |v: Var<'g, T>| if padded { v.gather_rows(&valid) } else { Ok(v) };
    let (ha_v, hl_v) = (real(h_a)?, real(h_l)?);

    let (connection, connection_loss) = if cfg.ablations.icn {
        (None, None)
    } else {
        let out = connection::forward(ctx, ha_v, hl_v)?;
        let loss = connection::connection_loss(ha_v, hl_v, &out, cfg.into())?;
        (Some(out), Some(loss))
    };

    let ban_rows = if cfg.ablations.ban {
        BanOutput {
            s_a: h_a,
            s_l: h_l,
            c_a: h_a,
            c_l: h_l,
        }
    } else {
        let (mut pa, mut pl) = (h_a, h_l);
        if cfg.positional == Positional::Sinusoidal {
            let mut pe = sinusoidal(layout.positions(), cfg.d_model);
            if padded {
                for (r, &ok) in layout.row_valid().iter().enumerate() {
                    if !ok {
                        pe.data_mut()[r * cfg.d_model..(r + 1) * cfg.d_model].fill(0.0);
                    }
                }
            }
            let pe = ctx.constant(&pe);
            pa = pa.add(pe)?;
            pl = pl.add(pe)?;
        }
        attention::ban_forward(ctx, pa, pl, layout)?
    };
    let ban = BanOutput {
        s_a: real(ban_rows.s_a)?,
        s_l: real(ban_rows.s_l)?,
        c_a: real(ban_rows.c_a)?,
        c_l: real(ban_rows.c_l)?,
    };

    let (h_m, correlative, h_star) = if cfg.ablations.can {
        (Var::concat_cols(&[ban.c_a, ban.c_l])?, None, None)
    } else {
        let h_star = real(correlative::joint_attention(ctx, ban_rows.s_a, ban_rows.s_l, layout, "can.joint")?)?;
        let (e_a, e_l) = match &connection {
            Some(c) => (c.e_a, c.e_l),
            None => (ctx.linear(ha_v, "icn_bypass.audio")?, ctx.linear(hl_v, "icn_bypass.text")?),
        };
        let out = correlative::forward(ctx, ban.s_a, ban.s_l, ban.c_a, ban.c_l, e_a, e_l, h_star)?;
        (out.h_m, Some(out), Some(h_star))
    };

    let logits_a = ctx.linear(ctx.dropout(ban.s_a)?, "head.audio")?;
    let logits_l = ctx.linear(ctx.dropout(ban.s_l)?, "head.text")?;
    let logits_m = ctx.linear(ctx.dropout(h_m)?, "head.bimodal")?;
    Ok(ForwardOutput {
        logits_a,
        logits_l,
        logits_m,
        connection_loss,
        connection,
        ban,
        correlative,
        h_star,
        h_m,
    })
}
