use crate::error::{Error, Result};

/// Which rows may attend to which, for a stack of conversations laid out as
/// rows of one matrix.
///
/// Attention never crosses a conversation boundary. In a padded layout the
/// padding rows are excluded as keys; a padding query row may only see
/// itself so its softmax is defined, and its output is zeroed afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnLayout {
    rows: usize,
    key_mask: Vec<bool>,
    row_valid: Vec<bool>,
    positions: Vec<usize>,
}

impl AttnLayout {
    /// Conversations stored back to back, no padding.
    pub fn packed(lengths: &[usize]) -> Result<Self> {
        if let Some(i) = lengths.iter().position(|&l| l == 0) {
            return Err(Error::Masking { row: lengths[..i].iter().sum() });
        }
        let rows: usize = lengths.iter().sum();
        let mut key_mask = vec![false; rows * rows];
        let mut positions = Vec::with_capacity(rows);
        let mut start = 0;
        for &len in lengths {
            for i in start..start + len {
                key_mask[i * rows + start..i * rows + start + len].fill(true);
                positions.push(i - start);
            }
            start += len;
        }
        Ok(AttnLayout {
            rows,
            key_mask,
            row_valid: vec![true; rows],
            positions,
        })
    }

    /// `[B×T]` padded layout from a row-major validity mask.
    pub fn padded(batch: usize, max_len: usize, mask: &[bool]) -> Result<Self> {
        if mask.len() != batch * max_len {
            return Err(Error::shape("attention layout", &[batch, max_len], &[mask.len()]));
        }
        let rows = batch * max_len;
        let mut key_mask = vec![false; rows * rows];
        for b in 0..batch {
            let conv = &mask[b * max_len..(b + 1) * max_len];
            if !conv.iter().any(|&m| m) {
                return Err(Error::Masking { row: b * max_len });
            }
            for t in 0..max_len {
                let i = b * max_len + t;
                if conv[t] {
                    for s in 0..max_len {
                        key_mask[i * rows + b * max_len + s] = conv[s];
                    }
                } else {
                    key_mask[i * rows + i] = true;
                }
            }
        }
        Ok(AttnLayout {
            rows,
            key_mask,
            row_valid: mask.to_vec(),
            positions: (0..rows).map(|i| i % max_len.max(1)).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Row-major `[rows×rows]` key mask.
    pub fn key_mask(&self) -> &[bool] {
        &self.key_mask
    }

    pub fn row_valid(&self) -> &[bool] {
        &self.row_valid
    }

    pub fn has_padding(&self) -> bool {
        self.row_valid.iter().any(|&v| !v)
    }

    /// Position of each row within its conversation.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Indices of real (non-padding) rows.
    pub fn valid_rows(&self) -> Vec<usize> {
        (0..self.rows).filter(|&i| self.row_valid[i]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packed_blocks() {
        let l = AttnLayout::packed(&[2, 1]).unwrap();
        #[rustfmt::skip]
        let want = vec![
            true, true, false,
            true, true, false,
            false, false, true,
        ];
        assert_eq!(l.key_mask(), &want[..]);
        assert_eq!(l.positions(), &[0, 1, 0]);
        assert!(!l.has_padding());
    }

    #[test]
    fn padded_rows_see_only_themselves() {
        let l = AttnLayout::padded(1, 3, &[true, true, false]).unwrap();
        #[rustfmt::skip]
        let want = vec![
            true, true, false,
            true, true, false,
            false, false, true,
        ];
        assert_eq!(l.key_mask(), &want[..]);
        assert_eq!(l.valid_rows(), vec![0, 1]);
    }

    #[test]
    fn fully_masked_conversation_is_an_error() {
        let err = AttnLayout::padded(2, 2, &[true, false, false, false]).unwrap_err();
        assert!(matches!(err, Error::Masking { row: 2 }));
        assert!(AttnLayout::packed(&[3, 0]).is_err());
    }
}
