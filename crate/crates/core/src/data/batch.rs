use super::Conversation;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label stored in padded slots. Losses only read labels under a true mask.
pub const LABEL_PAD: usize = usize::MAX;

/// Zero-padded stack of conversations.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B×T×d]`
    pub audio: Tensor<f32>,
    /// `[B×T×d]`
    pub text: Tensor<f32>,
    /// Row-major `[B×T]`; false marks padding.
    pub mask: Vec<bool>,
    /// Row-major `[B×T]`; [`LABEL_PAD`] under padding.
    pub labels: Vec<usize>,
    pub conversation_ids: Vec<String>,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.audio.shape()[0]
    }

    pub fn max_len(&self) -> usize {
        self.audio.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.audio.shape()[2]
    }

    /// True utterance count per conversation.
    pub fn lengths(&self) -> Vec<usize> {
        self.mask
            .chunks(self.max_len().max(1))
            .map(|row| row.iter().filter(|&&m| m).count())
            .collect()
    }

    /// Flat `b*T + t` indices of real utterances, in conversation order.
    pub fn valid_rows(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn num_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Labels of real utterances, in `valid_rows` order.
    pub fn valid_labels(&self) -> Vec<usize> {
        self.valid_rows().into_iter().map(|i| self.labels[i]).collect()
    }

    /// Build one batch from conversations, padding every row to `max_len`.
    pub fn from_conversations(convs: &[&Conversation], max_len: usize) -> Result<Self> {
        let first = convs
            .first()
            .ok_or_else(|| Error::Validation("empty batch".into()))?;
        let d = first
            .dim()
            .ok_or_else(|| Error::Validation(format!("conversation `{}` is empty", first.conversation_id)))?;
        let b = convs.len();
        let mut audio = vec![0.0f32; b * max_len * d];
        let mut text = vec![0.0f32; b * max_len * d];
        let mut mask = vec![false; b * max_len];
        let mut labels = vec![LABEL_PAD; b * max_len];
        for (bi, conv) in convs.iter().enumerate() {
            if conv.is_empty() {
                return Err(Error::Validation(format!("conversation `{}` is empty", conv.conversation_id)));
            }
            if conv.len() > max_len {
                return Err(Error::shape("batch", &[conv.len()], &[max_len]));
            }
            for (t, u) in conv.utterances.iter().enumerate() {
                if u.audio.len() != d || u.text.len() != d {
                    return Err(Error::shape("batch", &[d], &[u.audio.len(), u.text.len()]));
                }
                let row = bi * max_len + t;
                audio[row * d..(row + 1) * d].copy_from_slice(&u.audio);
                text[row * d..(row + 1) * d].copy_from_slice(&u.text);
                mask[row] = true;
                labels[row] = u.label;
            }
        }
        Ok(Batch {
            audio: Tensor::new(vec![b, max_len, d], audio)?,
            text: Tensor::new(vec![b, max_len, d], text)?,
            mask,
            labels,
            conversation_ids: convs.iter().map(|c| c.conversation_id.clone()).collect(),
        })
    }
}

/// Split conversations into consecutive batches of `batch_size`.
///
/// With `pad_to_longest` each batch is padded to its own longest
/// conversation; otherwise every batch uses the global maximum length.
pub fn batch_conversations(convs: &[Conversation], batch_size: usize, pad_to_longest: bool) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let dims: Vec<Option<usize>> = convs.iter().map(Conversation::dim).collect();
    if let Some(Some(d)) = dims.first() {
        if let Some(bad) = dims.iter().position(|x| *x != Some(*d)) {
            return Err(Error::shape("batch_conversations", &[*d], &[dims[bad].unwrap_or(0)]));
        }
    }
    let global = convs.iter().map(Conversation::len).max().unwrap_or(0);
    convs
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&Conversation> = chunk.iter().collect();
            let t = if pad_to_longest {
                chunk.iter().map(Conversation::len).max().unwrap_or(0)
            } else {
                global
            };
            Batch::from_conversations(&refs, t)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Split, Utterance};

    pub(crate) fn conv(id: &str, len: usize, d: usize) -> Conversation {
        Conversation {
            conversation_id: id.into(),
            split: Split::Train,
            utterances: (0..len)
                .map(|t| Utterance {
                    utterance_id: format!("{id}#{t}"),
                    audio: vec![t as f32 + 1.0; d],
                    text: vec![-(t as f32) - 1.0; d],
                    label: t % 3,
                })
                .collect(),
        }
    }

    #[test]
    fn pads_to_longest_with_mask() {
        let b = &batch_conversations(&[conv("a", 3, 2), conv("b", 5, 2)], 4, true).unwrap()[0];
        assert_eq!(b.max_len(), 5);
        assert_eq!(
            b.mask,
            vec![true, true, true, false, false, true, true, true, true, true]
        );
        assert_eq!(b.labels[3], LABEL_PAD);
        assert_eq!(b.audio.at(&[0, 4, 1]), 0.0);
        assert_eq!(b.num_valid(), 8);
        assert_eq!(b.lengths(), vec![3, 5]);
    }

    #[test]
    fn single_conversation_all_true() {
        let b = &batch_conversations(&[conv("a", 4, 3)], 8, true).unwrap()[0];
        assert!(b.mask.iter().all(|&m| m));
    }

    #[test]
    fn batch_sizes_and_global_padding() {
        let convs: Vec<_> = (0..7).map(|i| conv(&format!("c{i}"), i + 1, 2)).collect();
        let batches = batch_conversations(&convs, 3, false).unwrap();
        let sizes: Vec<_> = batches.iter().map(Batch::batch_size).collect();
        assert_eq!(sizes, vec![3, 3, 1]);
        assert!(batches.iter().all(|b| b.max_len() == 7));
        let total: usize = batches.iter().map(Batch::num_valid).sum();
        assert_eq!(total, (1..=7).sum::<usize>());
    }

    #[test]
    fn heterogeneous_dims_rejected() {
        let err = batch_conversations(&[conv("a", 2, 2), conv("b", 2, 3)], 2, true).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }
}
