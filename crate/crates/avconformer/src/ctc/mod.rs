//! CTC loss (log-domain forward algorithm with an exact brute-force oracle),
//! joint loss weighting, greedy and LM-fused prefix beam decoding, n-gram
//! language modelling and WER scoring.

mod decode;
mod lm;
mod loss;

pub use decode::{beam_search, edit_distance, greedy_decode, wer, BeamParams, Hypothesis};
pub use lm::NgramLm;
pub use loss::{ctc_brute_force, ctc_log_prob, ctc_loss, joint_loss, min_alignment_frames};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Probability floor applied to posteriors before taking logs in decoding.
pub const PROB_FLOOR: f64 = 1e-12;

/// Token inventory with the CTC blank reserved at index 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    pub const BLANK: usize = 0;

    /// `tokens[0]` must be the blank symbol and no other entry may equal it.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::Param(format!(
                "vocab needs blank plus at least one token, got {}",
                tokens.len()
            )));
        }
        if tokens[1..].iter().any(|t| *t == tokens[0]) {
            return Err(Error::Param("blank symbol duplicated in vocab".into()));
        }
        Ok(Self { tokens })
    }

    /// Build from non-blank symbols, reserving index 0 for the blank.
    pub fn from_symbols<S: Into<String>>(symbols: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut tokens = vec!["<blk>".to_string()];
        tokens.extend(symbols.into_iter().map(Into::into));
        Self::new(tokens)
    }

    /// Synthetic vocab "t1".."tN" for toy tasks.
    pub fn synthetic(num_tokens: usize) -> Self {
        Self::from_symbols((1..=num_tokens).map(|i| format!("t{i}"))).expect("num_tokens >= 1")
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn decode_string(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Target token sequence; never contains the blank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSeq(Vec<usize>);

impl LabelSeq {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&i| i == 0 || i >= vocab_size) {
            return Err(Error::Param(format!(
                "label id {bad} outside [1, {vocab_size})"
            )));
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-frame token distribution: a T x V row-stochastic matrix plus the
/// valid frame count.
#[derive(Debug, Clone)]
pub struct Posteriors {
    pub z: Tensor,
    pub length: usize,
}

impl Posteriors {
    pub fn new(z: Tensor, length: usize) -> Result<Self> {
        if z.rank() != 2 {
            return Err(Error::Param(format!("posteriors must be (T, V), got {:?}", z.shape)));
        }
        if length > z.shape[0] {
            return Err(Error::Param(format!(
                "length {} exceeds {} frames",
                length, z.shape[0]
            )));
        }
        Ok(Self { z, length })
    }

    pub fn frames(&self) -> usize {
        self.length
    }

    pub fn vocab_size(&self) -> usize {
        self.z.shape[1]
    }

    pub fn row(&self, t: usize) -> &[f32] {
        let v = self.vocab_size();
        &self.z.data[t * v..(t + 1) * v]
    }

    /// Rows sum to 1 within `tol` over the valid length.
    pub fn validate(&self, tol: f32) -> Result<()> {
        for t in 0..self.length {
            let s: f32 = self.row(t).iter().sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::Input(format!(
                    "posterior row {t} sums to {s}, expected 1"
                )));
            }
        }
        Ok(())
    }

    /// Natural-log posteriors with the probability floor applied.
    pub fn floored_log(&self) -> Vec<f64> {
        let v = self.vocab_size();
        self.z.data[..self.length * v]
            .iter()
            .map(|&p| (p as f64).max(PROB_FLOOR).ln())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_blank_reserved() {
        let v = Vocab::synthetic(3);
        assert_eq!(v.size(), 4);
        assert_eq!(v.token(0), "<blk>");
        assert!(Vocab::new(vec!["<blk>".into()]).is_err());
        assert!(Vocab::new(vec!["<blk>".into(), "<blk>".into()]).is_err());
    }

    #[test]
    fn label_seq_rejects_blank_and_oob() {
        assert!(LabelSeq::new(vec![0], 4).is_err());
        assert!(LabelSeq::new(vec![4], 4).is_err());
        assert!(LabelSeq::new(vec![1, 3], 4).is_ok());
    }
}
