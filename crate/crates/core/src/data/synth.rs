use super::{Conversation, Split, Utterance};
use crate::tensor::RngState;

/// Parameters of the synthetic bimodal generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub conversations: usize,
    pub mean_len: usize,
    pub d_model: usize,
    /// Norm of every class center. 0 makes all classes identically distributed.
    pub separation: f64,
    /// Fraction of classes whose text center is borrowed from the next class,
    /// so audio and text disagree for those labels.
    pub conflict_fraction: f64,
    pub train_fraction: f64,
    pub validation_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 4,
            conversations: 64,
            mean_len: 8,
            d_model: 16,
            separation: 10.0,
            conflict_fraction: 0.0,
            train_fraction: 0.7,
            validation_fraction: 0.15,
        }
    }
}

impl SynthConfig {
    /// Number of conversations assigned to (train, validation, test).
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.conversations;
        let mut train = ((n as f64) * self.train_fraction).round() as usize;
        let mut val = ((n as f64) * self.validation_fraction).round() as usize;
        if n >= 3 {
            train = train.clamp(1, n - 2);
            val = val.clamp(1, n - train - 1);
        } else {
            train = train.min(n);
            val = val.min(n - train);
        }
        (train, val, n - train - val)
    }
}

fn unit_vector(rng: &mut RngState, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Gaussian class clusters per modality with unit isotropic noise.
///
/// Conversation lengths are uniform on `[ceil(mean/2), mean + (mean - ceil(mean/2))]`
/// and labels are uniform over classes. Splits are assigned by position:
/// first train, then validation, then test.
pub fn make_synthetic_dataset(rng: &mut RngState, cfg: &SynthConfig) -> Vec<Conversation> {
    let (c, d) = (cfg.num_classes.max(1), cfg.d_model);
    let sep = cfg.separation.max(0.0);
    let audio_centers: Vec<Vec<f64>> = (0..c)
        .map(|_| unit_vector(rng, d).into_iter().map(|x| x * sep).collect())
        .collect();
    let mut text_centers: Vec<Vec<f64>> = (0..c)
        .map(|_| unit_vector(rng, d).into_iter().map(|x| x * sep).collect())
        .collect();
    let conflicted = ((c as f64) * cfg.conflict_fraction.clamp(0.0, 1.0)).round() as usize;
    if conflicted > 0 && c > 1 {
        let original = text_centers.clone();
        for k in 0..conflicted {
            text_centers[k] = original[(k + 1) % c].clone();
        }
    }

    let (train, val, _) = cfg.split_sizes();
    let mean = cfg.mean_len.max(1);
    let lo = mean.div_ceil(2);
    let hi = mean + (mean - lo);

    (0..cfg.conversations)
        .map(|i| {
            let split = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Validation
            } else {
                Split::Test
            };
            let len = rng.int_inclusive(lo, hi);
            let id = format!("syn{i:04}");
            let utterances = (0..len)
                .map(|t| {
                    let label = rng.below(c);
                    let audio = audio_centers[label].iter().map(|&m| (m + rng.normal()) as f32).collect();
                    let text = text_centers[label].iter().map(|&m| (m + rng.normal()) as f32).collect();
                    Utterance {
                        utterance_id: format!("{id}#{t}"),
                        audio,
                        text,
                        label,
                    }
                })
                .collect();
            Conversation {
                conversation_id: id,
                split,
                utterances,
            }
        })
        .collect()
}
