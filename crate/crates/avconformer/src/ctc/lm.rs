//! Count-based n-gram language model with additive smoothing and
//! interpolated backoff.
//!
//! Unigram base: P(w) = (c(w) + d) / (N + d*V) over real tokens.
//! Higher orders: P_k(w|h) = (c(hw) + d*V*P_{k-1}(w|tail h)) / (ctx(h) + d*V)
//! where ctx(h) counts h followed by any token within an utterance. Each
//! conditional sums to 1 over the vocabulary, an empty-context history backs
//! off exactly, and every token keeps nonzero smoothed mass.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};

use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct NgramLm {
    order: usize,
    delta: f64,
    /// scoreable token ids are 1..vocab_size (blank excluded)
    vocab_size: usize,
    /// counts[k-1]: k-gram -> occurrences
    counts: Vec<BTreeMap<Vec<usize>, u64>>,
    /// context totals per history length 0..order-1 (sum over continuations)
    contexts: Vec<BTreeMap<Vec<usize>, u64>>,
    unigram_total: u64,
}

impl NgramLm {
    /// Train on token-id sequences (ids in [1, vocab_size)).
    pub fn train(corpus: &[Vec<usize>], order: usize, vocab_size: usize, delta: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::Param("n-gram order must be >= 1".into()));
        }
        if corpus.iter().all(|s| s.is_empty()) {
            return Err(Error::Input("empty corpus".into()));
        }
        let mut counts = vec![BTreeMap::new(); order];
        for seq in corpus {
            for (i, _) in seq.iter().enumerate() {
                for k in 1..=order.min(i + 1) {
                    let gram = seq[i + 1 - k..=i].to_vec();
                    *counts[k - 1].entry(gram).or_insert(0) += 1;
                }
            }
        }
        let mut lm = Self {
            order,
            delta,
            vocab_size,
            counts,
            contexts: Vec::new(),
            unigram_total: 0,
        };
        lm.rebuild_contexts();
        Ok(lm)
    }

    fn rebuild_contexts(&mut self) {
        self.unigram_total = self.counts[0].values().sum();
        self.contexts = vec![BTreeMap::new(); self.order.saturating_sub(1)];
        for k in 2..=self.order {
            for (gram, &c) in &self.counts[k - 1] {
                *self.contexts[k - 2]
                    .entry(gram[..k - 1].to_vec())
                    .or_insert(0) += c;
            }
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Smoothed-interpolated log P(token | history), natural log. Uses the
    /// last order-1 history tokens.
    pub fn log_prob(&self, token: usize, history: &[usize]) -> f64 {
        self.prob(token, history).ln()
    }

    pub fn prob(&self, token: usize, history: &[usize]) -> f64 {
        let v = (self.vocab_size - 1) as f64; // scoreable tokens
        let dv = self.delta * v;
        // unigram base
        let c1 = *self.counts[0].get(&vec![token]).unwrap_or(&0) as f64;
        let mut p = (c1 + self.delta) / (self.unigram_total as f64 + dv);
        // interpolate upward through orders
        let max_k = self.order.min(history.len() + 1);
        for k in 2..=max_k {
            let h = &history[history.len() - (k - 1)..];
            let mut gram = h.to_vec();
            gram.push(token);
            let c = *self.counts[k - 1].get(&gram).unwrap_or(&0) as f64;
            let ctx = *self.contexts[k - 2].get(h).unwrap_or(&0) as f64;
            p = (c + dv * p) / (ctx + dv);
        }
        p
    }

    pub fn sequence_log_prob(&self, seq: &[usize]) -> f64 {
        seq.iter()
            .enumerate()
            .map(|(i, &w)| self.log_prob(w, &seq[..i]))
            .sum()
    }

    /// exp(mean negative log prob) over the corpus tokens.
    pub fn perplexity(&self, corpus: &[Vec<usize>]) -> f64 {
        let mut nll = 0.0;
        let mut n = 0usize;
        for seq in corpus {
            nll -= self.sequence_log_prob(seq);
            n += seq.len();
        }
        (nll / n as f64).exp()
    }

    /// Serialize as sorted (n-gram, count) text records with a small header.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "order\t{}", self.order)?;
        writeln!(w, "delta\t{}", self.delta)?;
        writeln!(w, "vocab\t{}", self.vocab_size)?;
        for k_counts in &self.counts {
            for (gram, c) in k_counts {
                let ids: Vec<String> = gram.iter().map(|i| i.to_string()).collect();
                writeln!(w, "{}\t{}", ids.join(" "), c)?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let mut header = BTreeMap::new();
        for _ in 0..3 {
            let line = lines
                .next()
                .ok_or_else(|| Error::Input("truncated LM header".into()))??;
            let (key, val) = line
                .split_once('\t')
                .ok_or_else(|| Error::Input(format!("bad LM header line: {line}")))?;
            header.insert(key.to_string(), val.to_string());
        }
        let order: usize = parse_header(&header, "order")?;
        let delta: f64 = parse_header(&header, "delta")?;
        let vocab_size: usize = parse_header(&header, "vocab")?;
        let mut counts = vec![BTreeMap::new(); order];
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (gram_s, c_s) = line
                .split_once('\t')
                .ok_or_else(|| Error::Input(format!("bad LM record: {line}")))?;
            let gram: Vec<usize> = gram_s
                .split(' ')
                .map(|t| t.parse().map_err(|_| Error::Input(format!("bad id {t}"))))
                .collect::<Result<_>>()?;
            let c: u64 = c_s
                .parse()
                .map_err(|_| Error::Input(format!("bad count {c_s}")))?;
            if gram.is_empty() || gram.len() > order {
                return Err(Error::Input(format!("n-gram length {} outside 1..={order}", gram.len())));
            }
            counts[gram.len() - 1].insert(gram, c);
        }
        let mut lm = Self {
            order,
            delta,
            vocab_size,
            counts,
            contexts: Vec::new(),
            unigram_total: 0,
        };
        lm.rebuild_contexts();
        Ok(lm)
    }
}

fn parse_header<T: std::str::FromStr>(h: &BTreeMap<String, String>, key: &str) -> Result<T> {
    h.get(key)
        .ok_or_else(|| Error::Input(format!("missing LM header {key}")))?
        .parse()
        .map_err(|_| Error::Input(format!("bad LM header value for {key}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unigram_counts_match_documented_formula() {
        // corpus "a a b" with a=1, b=2, vocab {blank, a, b} (V-1 = 2 scoreable)
        let lm = NgramLm::train(&[vec![1, 1, 2]], 1, 3, 0.1).unwrap();
        // pre-smoothing P(a) = 2/3; smoothed (2 + 0.1) / (3 + 0.2)
        assert!((lm.prob(1, &[]) - 2.1 / 3.2).abs() < 1e-12);
        assert!((lm.prob(2, &[]) - 1.1 / 3.2).abs() < 1e-12);
    }

    #[test]
    fn unseen_token_gets_nonzero_mass() {
        let lm = NgramLm::train(&[vec![1, 1, 1]], 3, 4, 0.1).unwrap();
        assert!(lm.prob(2, &[1, 1]) > 0.0);
        assert!(lm.prob(3, &[]) > 0.0);
    }

    #[test]
    fn conditionals_sum_to_one() {
        let corpus = vec![vec![1, 2, 3, 1, 2], vec![2, 2, 1], vec![3, 1, 2, 2]];
        let lm = NgramLm::train(&corpus, 3, 4, 0.1).unwrap();
        for history in [vec![], vec![1], vec![1, 2], vec![3, 3]] {
            let total: f64 = (1..4).map(|w| lm.prob(w, &history)).sum();
            assert!((total - 1.0).abs() < 1e-9, "history {history:?}: {total}");
        }
    }

    #[test]
    fn train_perplexity_beats_uniform() {
        let corpus = vec![
            vec![1, 2, 1, 2, 1, 2, 3],
            vec![1, 2, 1, 2],
            vec![3, 1, 2, 1, 2],
        ];
        let lm = NgramLm::train(&corpus, 6, 4, 0.1).unwrap();
        let uniform = 3.0; // V-1 equiprobable tokens
        assert!(lm.perplexity(&corpus) < uniform);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(NgramLm::train(&[vec![]], 2, 4, 0.1).is_err());
        assert!(NgramLm::train(&[], 2, 4, 0.1).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let corpus = vec![vec![1, 2, 3, 2, 1], vec![2, 3, 2]];
        let lm = NgramLm::train(&corpus, 3, 4, 0.1).unwrap();
        let mut buf = Vec::new();
        lm.save(&mut buf).unwrap();
        let back = NgramLm::load(&buf[..]).unwrap();
        for h in [vec![], vec![2], vec![3, 2]] {
            for w in 1..4 {
                assert!((lm.prob(w, &h) - back.prob(w, &h)).abs() < 1e-15);
            }
        }
    }
}
