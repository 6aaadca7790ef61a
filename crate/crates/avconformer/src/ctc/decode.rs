//! Greedy collapse decoding, CTC prefix beam search with optional n-gram LM
//! fusion, and word-error-rate scoring.

use std::collections::BTreeMap;

use super::lm::NgramLm;
use super::Posteriors;
use crate::{Error, Result};

/// Decoded token sequence with its combined acoustic+LM log score.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_score: f64,
}

/// Argmax per frame, merge adjacent repeats, drop blanks.
pub fn greedy_decode(post: &Posteriors) -> Vec<usize> {
    let v = post.vocab_size();
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for t in 0..post.frames() {
        let row = post.row(t);
        let mut best = 0usize;
        for c in 1..v {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best != prev && best != 0 {
            out.push(best);
        }
        prev = best;
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct BeamParams {
    pub beam_width: usize,
    /// LM weight (alpha); ignored when no LM is supplied.
    pub lm_weight: f64,
    /// Per-token length bonus (beta).
    pub length_bonus: f64,
}

impl Default for BeamParams {
    fn default() -> Self {
        Self {
            beam_width: 16,
            lm_weight: 0.6,
            length_bonus: 0.5,
        }
    }
}

const NEG_INF: f64 = f64::NEG_INFINITY;

fn lse2(a: f64, b: f64) -> f64 {
    if a == NEG_INF {
        return b;
    }
    if b == NEG_INF {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[derive(Debug, Clone, Copy)]
struct PrefixScore {
    /// log prob. of emitting this prefix with the last frame blank
    p_blank: f64,
    /// ... with the last frame equal to the prefix's final token
    p_token: f64,
    /// accumulated LM log prob of the prefix tokens
    lm: f64,
}

impl PrefixScore {
    fn total(&self, params: &BeamParams, with_lm: bool, len: usize) -> f64 {
        let lm_term = if with_lm { params.lm_weight * self.lm } else { 0.0 };
        lse2(self.p_blank, self.p_token) + lm_term + params.length_bonus * len as f64
    }
}

/// CTC prefix beam search. Maintains per-prefix (blank, non-blank)
/// probabilities in the log domain; hypotheses are scored as
/// log P_ctc + alpha * log P_lm + beta * |tokens| and returned best-first.
pub fn beam_search(
    post: &Posteriors,
    params: &BeamParams,
    lm: Option<&NgramLm>,
) -> Result<Vec<Hypothesis>> {
    if params.beam_width == 0 {
        return Err(Error::Param("beam_width must be >= 1".into()));
    }
    let v = post.vocab_size();
    let log_z = post.floored_log();
    let mut beams: BTreeMap<Vec<usize>, PrefixScore> = BTreeMap::new();
    beams.insert(
        Vec::new(),
        PrefixScore {
            p_blank: 0.0,
            p_token: NEG_INF,
            lm: 0.0,
        },
    );

    for t in 0..post.frames() {
        let row = &log_z[t * v..(t + 1) * v];
        let mut next: BTreeMap<Vec<usize>, PrefixScore> = BTreeMap::new();
        for (prefix, score) in &beams {
            let p_any = lse2(score.p_blank, score.p_token);
            // stay on the same prefix via a blank frame
            {
                let e = next.entry(prefix.clone()).or_insert(PrefixScore {
                    p_blank: NEG_INF,
                    p_token: NEG_INF,
                    lm: score.lm,
                });
                e.p_blank = lse2(e.p_blank, p_any + row[0]);
            }
            // stay via repeating the final token (no new emission)
            if let Some(&last) = prefix.last() {
                let e = next.entry(prefix.clone()).or_insert(PrefixScore {
                    p_blank: NEG_INF,
                    p_token: NEG_INF,
                    lm: score.lm,
                });
                e.p_token = lse2(e.p_token, score.p_token + row[last]);
            }
            // extend by a non-blank token
            for c in 1..v {
                let base = if Some(&c) == prefix.last() {
                    // same token again only counts as new after a blank
                    score.p_blank
                } else {
                    p_any
                };
                if base == NEG_INF {
                    continue;
                }
                let mut ext = prefix.clone();
                ext.push(c);
                let lm_score = score.lm
                    + lm.map_or(0.0, |m| m.log_prob(c, prefix));
                let e = next.entry(ext).or_insert(PrefixScore {
                    p_blank: NEG_INF,
                    p_token: NEG_INF,
                    lm: lm_score,
                });
                e.p_token = lse2(e.p_token, base + row[c]);
            }
        }
        // prune; ties broken by prefix order for determinism
        let mut ranked: Vec<(Vec<usize>, PrefixScore)> = next.into_iter().collect();
        ranked.sort_by(|a, b| {
            let sa = a.1.total(params, lm.is_some(), a.0.len());
            let sb = b.1.total(params, lm.is_some(), b.0.len());
            sb.partial_cmp(&sa).unwrap().then_with(|| a.0.cmp(&b.0))
        });
        ranked.truncate(params.beam_width);
        beams = ranked.into_iter().collect();
    }

    let mut hyps: Vec<Hypothesis> = beams
        .into_iter()
        .map(|(tokens, score)| {
            let log_score = score.total(params, lm.is_some(), tokens.len());
            Hypothesis { tokens, log_score }
        })
        .collect();
    hyps.sort_by(|a, b| {
        b.log_score
            .partial_cmp(&a.log_score)
            .unwrap()
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    Ok(hyps)
}

/// Unit-cost Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ai) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, bj) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ai != bj);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word error rate: edit distance / |reference|. The reference must be
/// non-empty.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Input("WER undefined for an empty reference".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}
