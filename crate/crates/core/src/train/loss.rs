use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Var};

/// The composite objective and its parts.
pub struct LossTerms<'g, T: Scalar> {
    pub total: Var<'g, T>,
    pub connection: Option<Var<'g, T>>,
    pub audio: Var<'g, T>,
    pub text: Var<'g, T>,
    pub bimodal: Var<'g, T>,
}

impl<T: Scalar> LossTerms<'_, T> {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            connection: self.connection.map_or(0.0, |v| v.item().f64()),
            audio: self.audio.item().f64(),
            text: self.text.item().f64(),
            bimodal: self.bimodal.item().f64(),
            total: self.total.item().f64(),
        }
    }
}

/// Plain values of [`LossTerms`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub connection: f64,
    pub audio: f64,
    pub text: f64,
    pub bimodal: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Weighted mean of several breakdowns.
    pub fn weighted_mean(items: &[(LossBreakdown, f64)]) -> LossBreakdown {
        let w: f64 = items.iter().map(|(_, w)| w).sum();
        if w == 0.0 {
            return LossBreakdown::default();
        }
        let f = |get: fn(&LossBreakdown) -> f64| items.iter().map(|(b, wi)| get(b) * wi).sum::<f64>() / w;
        LossBreakdown {
            connection: f(|b| b.connection),
            audio: f(|b| b.audio),
            text: f(|b| b.text),
            bimodal: f(|b| b.bimodal),
            total: f(|b| b.total),
        }
    }
}

/// `α·L_c + β·(L_a + L_l) + L_m`, each head term being the cross-entropy
/// averaged over rows with `Some` label.
pub fn total_loss<'g, T: Scalar>(
    logits_a: Var<'g, T>,
    logits_l: Var<'g, T>,
    logits_m: Var<'g, T>,
    labels: &[Option<usize>],
    connection: Option<Var<'g, T>>,
    alpha: f64,
    beta: f64,
) -> Result<LossTerms<'g, T>> {
    if !(alpha >= 0.0 && beta >= 0.0) {
        return Err(Error::Config(format!("loss weights must be >= 0, got alpha={alpha} beta={beta}")));
    }
    let audio = logits_a.cross_entropy_mean(labels)?;
    let text = logits_l.cross_entropy_mean(labels)?;
    let bimodal = logits_m.cross_entropy_mean(labels)?;
    let mut total = audio.add(text)?.scale(beta).add(bimodal)?;
    if let Some(lc) = connection {
        total = lc.scale(alpha).add(total)?;
    }
    Ok(LossTerms {
        total,
        connection,
        audio,
        text,
        bimodal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    fn logits<'g>(g: &'g Graph<f64>, vals: &[f64]) -> Var<'g, f64> {
        g.constant(Tensor::from_f64(&[vals.len() / 4, 4], vals).unwrap())
    }

    #[test]
    fn zero_weights_isolate_bimodal_term() {
        let g = Graph::<f64>::new();
        let a = logits(&g, &[1.0, 2.0, 3.0, 4.0, 0.0, 1.0, 0.0, 1.0]);
        let m = logits(&g, &[0.5, -1.0, 2.0, 0.0, 3.0, 1.0, 0.0, 0.0]);
        let lc = g.scalar(7.0);
        let labels = [Some(2), Some(0)];
        let t = total_loss(a, a, m, &labels, Some(lc), 0.0, 0.0).unwrap();
        assert_eq!(t.total.item(), t.bimodal.item());
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let g = Graph::<f64>::new();
        let z = logits(&g, &[0.0; 12]);
        let t = total_loss(z, z, z, &[Some(0), None, Some(3)], None, 0.3, 0.3).unwrap();
        let ln4 = 4f64.ln();
        for v in [t.audio.item(), t.text.item(), t.bimodal.item()] {
            assert!((v - ln4).abs() < 1e-15);
        }
        assert!((t.total.item() - 1.6 * ln4).abs() < 1e-14);
    }

    #[test]
    fn negative_weights_rejected() {
        let g = Graph::<f64>::new();
        let z = logits(&g, &[0.0; 4]);
        assert!(total_loss(z, z, z, &[Some(0)], None, -0.1, 0.3).is_err());
    }
}
