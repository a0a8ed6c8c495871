//! The BCAF network: interactive connection network, bimodal attention
//! network, correlative attention network, and classification heads.

pub mod attention;
mod bcaf;
pub mod connection;
pub mod correlative;
mod layout;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

pub use bcaf::{forward, init_params, ForwardOutput, ModelInputs};
pub use layout::AttnLayout;

use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};
use crate::tensor::{Graph, RngState, Scalar, Tensor, Var};

/// Attention wiring of the bimodal attention stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Parallel self- and cross-attention branches.
    Ban,
    /// Joint dual-softmax attention in place of both branches.
    Jan,
    /// Self-attention only.
    BanSa,
    /// Cross-attention only.
    BanCa,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ban, Variant::Jan, Variant::BanSa, Variant::BanCa];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Ban => "BAN",
            Variant::Jan => "JAN",
            Variant::BanSa => "BAN-SA",
            Variant::BanCa => "BAN-CA",
        }
    }

    /// Layer counts used for each variant in the reference attention comparison.
    pub fn table_layers(self, profile: LayerProfile) -> usize {
        match (self, profile) {
            (Variant::Ban, LayerProfile::Meld) => 5,
            (Variant::Ban, LayerProfile::Iemocap) => 3,
            (Variant::Jan, LayerProfile::Meld) => 3,
            (Variant::Jan, LayerProfile::Iemocap) => 4,
            (Variant::BanSa, LayerProfile::Meld) => 7,
            (Variant::BanSa, LayerProfile::Iemocap) => 5,
            (Variant::BanCa, LayerProfile::Meld) => 7,
            (Variant::BanCa, LayerProfile::Iemocap) => 6,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('_', "-").as_str() {
            "BAN" => Ok(Variant::Ban),
            "JAN" => Ok(Variant::Jan),
            "BAN-SA" => Ok(Variant::BanSa),
            "BAN-CA" => Ok(Variant::BanCa),
            _ => Err(Error::Config(format!("unknown attention variant `{s}`"))),
        }
    }
}

/// Which dataset column of the layer-count table to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LayerProfile {
    #[default]
    Meld,
    Iemocap,
}

impl FromStr for LayerProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "meld" => Ok(LayerProfile::Meld),
            "iemocap" => Ok(LayerProfile::Iemocap),
            _ => Err(Error::Config(format!("unknown layer profile `{s}`"))),
        }
    }
}

impl fmt::Display for LayerProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerProfile::Meld => "meld",
            LayerProfile::Iemocap => "iemocap",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Positional {
    #[default]
    None,
    Sinusoidal,
}

impl FromStr for Positional {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Positional::None),
            "sinusoidal" => Ok(Positional::Sinusoidal),
            _ => Err(Error::Config(format!("unknown positional encoding `{s}`"))),
        }
    }
}

impl fmt::Display for Positional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Positional::None => "none",
            Positional::Sinusoidal => "sinusoidal",
        })
    }
}

/// Components removed from the full model. Each removal is replaced by a
/// shape-preserving bypass (see [`forward`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash, PartialOrd, Ord)]
pub struct Ablations {
    pub icn: bool,
    pub ban: bool,
    pub can: bool,
}

impl Ablations {
    pub const NONE: Ablations = Ablations {
        icn: false,
        ban: false,
        can: false,
    };

    pub fn is_empty(&self) -> bool {
        !(self.icn || self.ban || self.can)
    }
}

impl fmt::Display for Ablations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.icn, "icn"), (self.ban, "ban"), (self.can, "can")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

impl FromStr for Ablations {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = Ablations::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "none" => {}
                "icn" => out.icn = true,
                "ban" => out.ban = true,
                "can" => out.can = true,
                other => return Err(Error::Config(format!("unknown ablation `{other}`"))),
            }
        }
        Ok(out)
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_latent: usize,
    pub d_ff: usize,
    pub num_classes: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub variant: Variant,
    pub positional: Positional,
    pub dropout: f64,
    /// Weight of the cross-Gram terms inside the connection loss.
    pub mu: f64,
    /// Divide each Frobenius term of the connection loss by its element count.
    pub normalized_connection: bool,
    /// Apply ReLU after the last decoder layer too.
    pub final_decoder_relu: bool,
    /// Upper bound on the subtracted decoder cross-Gram term.
    pub connection_loss_clip: Option<f64>,
    /// Average the mirrored cross softmax into the joint attention.
    pub symmetric_joint: bool,
    /// Denominator floor for the correlation cosines; `None` errors on zero norms.
    pub cosine_eps: Option<f64>,
    pub layer_norm_eps: f64,
    pub ablations: Ablations,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 1024,
            d_latent: 512,
            d_ff: 4096,
            num_classes: 7,
            num_layers: 5,
            num_heads: 1,
            variant: Variant::Ban,
            positional: Positional::None,
            dropout: 0.3,
            mu: 0.1,
            normalized_connection: true,
            final_decoder_relu: false,
            connection_loss_clip: None,
            symmetric_joint: false,
            cosine_eps: Some(1e-8),
            layer_norm_eps: 1e-5,
            ablations: Ablations::NONE,
        }
    }
}

impl ModelConfig {
    /// Small-width configuration with `d_latent = d/2` and `d_ff = 4d`.
    pub fn desk(d_model: usize, num_classes: usize, num_layers: usize) -> Self {
        ModelConfig {
            d_model,
            d_latent: (d_model / 2).max(1),
            d_ff: 4 * d_model,
            num_classes,
            num_layers,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.d_latent == 0 || self.d_ff == 0 {
            return fail("d_model, d_latent and d_ff must be positive".into());
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.num_layers == 0 {
            return fail("num_layers must be >= 1".into());
        }
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return fail(format!(
                "num_heads ({}) must divide d_model ({})",
                self.num_heads, self.d_model
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.mu.is_nan() || self.mu < 0.0 {
            return fail(format!("mu must be >= 0, got {}", self.mu));
        }
        if self.layer_norm_eps <= 0.0 {
            return fail("layer_norm_eps must be > 0".into());
        }
        Ok(())
    }

    /// Width of the input to the bimodal head.
    pub fn fused_width(&self) -> usize {
        if self.ablations.can {
            2 * self.d_model
        } else {
            2 * self.d_model + 2 * self.d_latent
        }
    }
}

/// Parameters of one graph, bound as leaves by name.
pub struct Bindings<'g, T: Scalar> {
    vars: BTreeMap<String, Var<'g, T>>,
}

impl<'g, T: Scalar> Bindings<'g, T> {
    /// Bind every stored tensor as a gradient-carrying leaf.
    pub fn bind(graph: &'g Graph<T>, store: &ParamStore) -> Self {
        let vars = store
            .iter()
            .map(|(name, t)| (name.to_string(), graph.param(t.cast())))
            .collect();
        Bindings { vars }
    }

    /// Bind tensors already in the graph's precision.
    pub fn from_tensors(graph: &'g Graph<T>, tensors: &BTreeMap<String, Tensor<T>>) -> Self {
        let vars = tensors
            .iter()
            .map(|(name, t)| (name.clone(), graph.param(t.clone())))
            .collect();
        Bindings { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var<'g, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Gradients of every bound parameter after `backward`, cast to `f32`.
    pub fn grads(&self) -> Grads {
        self.vars
            .iter()
            .filter_map(|(name, v)| v.grad().map(|g| (name.clone(), g.cast())))
            .collect()
    }

    /// Gradients in the graph's own precision.
    pub fn grads_native(&self) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter_map(|(name, v)| v.grad().map(|g| (name.clone(), g)))
            .collect()
    }
}

/// Everything a forward pass needs besides its inputs.
pub struct Ctx<'g, T: Scalar> {
    pub graph: &'g Graph<T>,
    pub params: Bindings<'g, T>,
    pub config: ModelConfig,
    pub train: bool,
    rng: RefCell<RngState>,
}

impl<'g, T: Scalar> Ctx<'g, T> {
    pub fn new(graph: &'g Graph<T>, store: &ParamStore, config: ModelConfig, train: bool, rng: RngState) -> Self {
        Self::with_bindings(graph, Bindings::bind(graph, store), config, train, rng)
    }

    pub fn with_bindings(graph: &'g Graph<T>, params: Bindings<'g, T>, config: ModelConfig, train: bool, rng: RngState) -> Self {
        Ctx {
            graph,
            params,
            config,
            train,
            rng: RefCell::new(rng),
        }
    }

    /// Evaluation-mode context (dropout off).
    pub fn eval(graph: &'g Graph<T>, store: &ParamStore, config: ModelConfig) -> Self {
        Self::new(graph, store, config, false, RngState::new(0))
    }

    pub fn p(&self, name: &str) -> Result<Var<'g, T>> {
        self.params.get(name)
    }

    pub fn dropout(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.dropout(self.config.dropout, self.train, &mut self.rng.borrow_mut())
    }

    /// `x · {prefix}.w + {prefix}.b`, the bias being optional.
    pub fn linear(&self, x: Var<'g, T>, prefix: &str) -> Result<Var<'g, T>> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b_name = format!("{prefix}.b");
        let b = if self.params.has(&b_name) {
            Some(self.p(&b_name)?)
        } else {
            None
        };
        x.linear(w, b)
    }

    pub fn layer_norm(&self, x: Var<'g, T>, prefix: &str) -> Result<Var<'g, T>> {
        let g = self.p(&format!("{prefix}.g"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        x.layer_norm(g, b, self.config.layer_norm_eps)
    }

    pub fn constant(&self, t: &Tensor<f32>) -> Var<'g, T> {
        self.graph.constant(t.cast())
    }
}

/// Parameter initializers.
pub(crate) mod init {
    use super::*;

    /// Glorot-uniform weight `[fan_in×fan_out]`.
    pub fn xavier(rng: &mut RngState, fan_in: usize, fan_out: usize) -> Tensor<f32> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.uniform_range(-limit, limit) as f32)
            .collect();
        Tensor::new(vec![fan_in, fan_out], data).expect("shape matches")
    }

    pub fn linear(store: &mut ParamStore, rng: &mut RngState, prefix: &str, fan_in: usize, fan_out: usize) {
        store.insert(format!("{prefix}.w"), xavier(rng, fan_in, fan_out));
        store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    }

    pub fn projection(store: &mut ParamStore, rng: &mut RngState, name: &str, fan_in: usize, fan_out: usize) {
        store.insert(name.to_string(), xavier(rng, fan_in, fan_out));
    }

    pub fn layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
        store.insert(format!("{prefix}.g"), Tensor::filled(&[d], 1.0));
        store.insert(format!("{prefix}.b"), Tensor::zeros(&[d]));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_and_ablation_parsing() {
        assert_eq!("ban-sa".parse::<Variant>().unwrap(), Variant::BanSa);
        assert_eq!("BAN_CA".parse::<Variant>().unwrap(), Variant::BanCa);
        assert!("XAN".parse::<Variant>().is_err());
        let a: Ablations = "icn, can".parse().unwrap();
        assert!(a.icn && a.can && !a.ban);
        assert_eq!(a.to_string(), "icn,can");
        assert_eq!("none".parse::<Ablations>().unwrap(), Ablations::NONE);
    }

    #[test]
    fn table_layer_counts() {
        let meld: Vec<_> = Variant::ALL.iter().map(|v| v.table_layers(LayerProfile::Meld)).collect();
        let iemocap: Vec<_> = Variant::ALL.iter().map(|v| v.table_layers(LayerProfile::Iemocap)).collect();
        assert_eq!(meld, vec![5, 3, 7, 7]);
        assert_eq!(iemocap, vec![3, 4, 5, 6]);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            mu: -0.1,
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ModelConfig {
            num_heads: 3,
            ..ModelConfig::desk(8, 4, 1)
        };
        assert!(bad.validate().is_err());
        assert_eq!(ModelConfig::default().fused_width(), 3072);
    }
}
