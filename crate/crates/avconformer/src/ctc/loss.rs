//! CTC loss: log-domain forward recursion over the blank-interleaved target,
//! an analytic alpha-beta gradient, and the exact path-enumeration oracle.
//!
//! The recursion runs in f64 regardless of graph precision so the loss can be
//! compared against the brute-force oracle at 1e-10 relative.

use super::LabelSeq;
use crate::tensor::{Graph, NodeId, Real, Tensor};
use crate::{Error, Result};

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

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    lse2(lse2(a, b), c)
}

/// Fewest frames that can carry `labels`: one per label plus one separating
/// blank per adjacent repeat.
pub fn min_alignment_frames(labels: &[usize]) -> usize {
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    labels.len() + repeats
}

fn extended_targets(labels: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(0);
    for &l in labels {
        ext.push(l);
        ext.push(0);
    }
    ext
}

fn check_inputs(t_len: usize, v: usize, labels: &[usize]) -> Result<()> {
    if t_len == 0 {
        return Err(Error::Input("ctc loss over zero frames".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l >= v) {
        return Err(Error::Param(format!("label id {bad} outside [1, {v})")));
    }
    let required = min_alignment_frames(labels);
    if t_len < required {
        return Err(Error::Infeasible {
            required,
            given: t_len,
        });
    }
    Ok(())
}

fn alpha_pass(log_z: &[f64], t_len: usize, v: usize, ext: &[usize]) -> Vec<f64> {
    let s_len = ext.len();
    let mut alpha = vec![NEG_INF; t_len * s_len];
    alpha[0] = log_z[ext[0]];
    if s_len > 1 {
        alpha[1] = log_z[ext[1]];
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let stay = prev[s];
            let step = if s >= 1 { prev[s - 1] } else { NEG_INF };
            let skip = if s >= 2 && ext[s] != 0 && ext[s] != ext[s - 2] {
                prev[s - 2]
            } else {
                NEG_INF
            };
            let acc = lse3(stay, step, skip);
            cur[s] = if acc == NEG_INF {
                NEG_INF
            } else {
                acc + log_z[t * v + ext[s]]
            };
        }
    }
    alpha
}

fn beta_pass(log_z: &[f64], t_len: usize, v: usize, ext: &[usize]) -> Vec<f64> {
    let s_len = ext.len();
    let mut beta = vec![NEG_INF; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let stay = beta[(t + 1) * s_len + s] + log_z[(t + 1) * v + ext[s]];
            let step = if s + 1 < s_len {
                beta[(t + 1) * s_len + s + 1] + log_z[(t + 1) * v + ext[s + 1]]
            } else {
                NEG_INF
            };
            let skip = if s + 2 < s_len && ext[s + 2] != 0 && ext[s + 2] != ext[s] {
                beta[(t + 1) * s_len + s + 2] + log_z[(t + 1) * v + ext[s + 2]]
            } else {
                NEG_INF
            };
            beta[t * s_len + s] = lse3(stay, step, skip);
        }
    }
    beta
}

/// log P(y | Z) from natural-log posteriors laid out (t_len, v) row-major.
pub fn ctc_log_prob(log_z: &[f64], t_len: usize, v: usize, labels: &[usize]) -> Result<f64> {
    check_inputs(t_len, v, labels)?;
    let ext = extended_targets(labels);
    let s_len = ext.len();
    let alpha = alpha_pass(log_z, t_len, v, &ext);
    let tail = &alpha[(t_len - 1) * s_len..];
    let logp = if s_len > 1 {
        lse2(tail[s_len - 1], tail[s_len - 2])
    } else {
        tail[0]
    };
    Ok(logp)
}

/// d(-log P)/d(log Z), laid out like log_z.
fn ctc_grad(log_z: &[f64], t_len: usize, v: usize, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    check_inputs(t_len, v, labels)?;
    let ext = extended_targets(labels);
    let s_len = ext.len();
    let alpha = alpha_pass(log_z, t_len, v, &ext);
    let beta = beta_pass(log_z, t_len, v, &ext);
    let tail = &alpha[(t_len - 1) * s_len..];
    let logp = if s_len > 1 {
        lse2(tail[s_len - 1], tail[s_len - 2])
    } else {
        tail[0]
    };
    let mut grad = vec![0.0f64; t_len * v];
    for t in 0..t_len {
        for (s, &tok) in ext.iter().enumerate() {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s];
            if occ != NEG_INF {
                grad[t * v + tok] -= (occ - logp).exp();
            }
        }
    }
    Ok((logp, grad))
}

/// Differentiable -log P(y|Z) on the graph; `log_z` is a (T, V) node of
/// log-posteriors. The recursion runs in f64 internally.
pub fn ctc_loss<F: Real>(g: &mut Graph<F>, log_z: NodeId, labels: &LabelSeq) -> Result<NodeId> {
    let shape = g.shape(log_z).to_vec();
    if shape.len() != 2 {
        return Err(Error::Param(format!("ctc_loss expects (T, V), got {shape:?}")));
    }
    let (t_len, v) = (shape[0], shape[1]);
    let lz64: Vec<f64> = g.data(log_z).iter().map(|x| x.to_f64()).collect();
    let logp = ctc_log_prob(&lz64, t_len, v, labels.ids())?;
    let ids = labels.ids().to_vec();
    Ok(g.custom_op(
        Tensor::scalar(F::from_f64(-logp)),
        &[log_z],
        move |_, gout, pg, _| {
            let (_, grad) = ctc_grad(&lz64, t_len, v, &ids).expect("validated at forward");
            let go = gout[0];
            for (dst, &gv) in pg[0].iter_mut().zip(&grad) {
                *dst += go * F::from_f64(gv);
            }
        },
    ))
}

/// Exact P(y|Z) by enumerating every path in V^T and collapsing (merge
/// adjacent repeats, then drop blanks). Refuses instances with V^T > 10^7.
pub fn ctc_brute_force(z: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    if z.rank() != 2 {
        return Err(Error::Param(format!("expected (T, V), got {:?}", z.shape)));
    }
    let (t_len, v) = (z.shape[0], z.shape[1]);
    let paths = (v as f64).powi(t_len as i32);
    if paths > 1e7 {
        return Err(Error::TooLarge(format!(
            "V^T = {v}^{t_len} exceeds 10^7 paths"
        )));
    }
    let mut total = 0.0f64;
    let mut path = vec![0usize; t_len];
    let n_paths = paths as u64;
    let mut collapsed = Vec::with_capacity(t_len);
    for idx in 0..n_paths {
        let mut rem = idx;
        for p in path.iter_mut() {
            *p = (rem % v as u64) as usize;
            rem /= v as u64;
        }
        collapsed.clear();
        let mut prev = usize::MAX;
        for &tok in &path {
            if tok != prev && tok != 0 {
                collapsed.push(tok);
            }
            prev = tok;
        }
        if collapsed == labels {
            let mut p = 1.0f64;
            for (t, &tok) in path.iter().enumerate() {
                p *= z.data[t * v + tok];
            }
            total += p;
        }
    }
    Ok(total)
}

/// L = (1 - lambda) * final + lambda * mean(inters); K = 0 degenerates to
/// the final loss alone.
pub fn joint_loss<F: Real>(
    g: &mut Graph<F>,
    final_loss: NodeId,
    inter_losses: &[NodeId],
    lambda: f32,
) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Param(format!("lambda {lambda} outside [0, 1]")));
    }
    if inter_losses.is_empty() {
        return Ok(final_loss);
    }
    let k = inter_losses.len() as f32;
    let mut inter_sum = inter_losses[0];
    for &l in &inter_losses[1..] {
        inter_sum = g.add(inter_sum, l)?;
    }
    let scaled_final = g.scale(final_loss, 1.0 - lambda);
    g.add_scaled(scaled_final, inter_sum, lambda / k)
}
