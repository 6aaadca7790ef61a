//! Reverse-mode autodiff over a flat tape.
//!
//! Nodes are appended in topological order (parents always precede children),
//! so the backward pass is a single reverse sweep. Interior gradients are
//! consumed as they propagate; leaf gradients stay on the tape until read.
//! Calling `backward` twice without clearing accumulates leaf gradients.
//!
//! The graph is generic over the scalar: `Graph` alone means f32 (production
//! numerics); gradient checks re-run the same forward as `Graph<f64>`.

use super::kernels as k;
use super::param::ParamSet;
use super::{ceil_div, Real, Rng, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// (graph, grad_out, per-parent grad buffers, which parents need grads)
type BackwardFn<F> = Box<dyn Fn(&Graph<F>, &[F], &mut [Vec<F>], &[bool])>;

struct Node<F: Real> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    parents: Vec<NodeId>,
    backward: Option<BackwardFn<F>>,
}

pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
    training: bool,
    no_grad: bool,
    bindings: Vec<(usize, NodeId)>,
}

impl<F: Real> Graph<F> {
    /// Graph for a training step: records the tape, augmentation-style ops
    /// are live.
    pub fn train() -> Self {
        Self {
            nodes: Vec::new(),
            training: true,
            no_grad: false,
            bindings: Vec::new(),
        }
    }

    /// Evaluation graph that still records the tape (usable for gradient
    /// checks of eval-mode behaviour).
    pub fn eval() -> Self {
        Self {
            nodes: Vec::new(),
            training: false,
            no_grad: false,
            bindings: Vec::new(),
        }
    }

    /// Forward-only evaluation graph: no backward closures are recorded.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            training: false,
            no_grad: true,
            bindings: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── Node access ────────────────────────────────────────────────────

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[F] {
        &self.nodes[id.0].data
    }

    pub fn value(&self, id: NodeId) -> Tensor<F> {
        Tensor {
            shape: self.nodes[id.0].shape.clone(),
            data: self.nodes[id.0].data.clone(),
        }
    }

    /// Value as an f32 tensor regardless of graph precision.
    pub fn value_f32(&self, id: NodeId) -> Tensor<f32> {
        Tensor {
            shape: self.nodes[id.0].shape.clone(),
            data: self.nodes[id.0].data.iter().map(|v| v.to_f32()).collect(),
        }
    }

    pub fn scalar_value(&self, id: NodeId) -> F {
        self.nodes[id.0].data[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.nodes[id.0].grad.as_deref()
    }

    // ── Leaves ─────────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: Tensor<F>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            shape: t.shape,
            data: t.data,
            grad: None,
            requires_grad: requires_grad && !self.no_grad,
            parents: Vec::new(),
            backward: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> NodeId {
        self.leaf(t, false)
    }

    /// Bind a named parameter (f32 storage) as a differentiable leaf at this
    /// graph's precision; `read_grads` later accumulates the gradient back.
    pub fn param_leaf(&mut self, params: &ParamSet, id: usize) -> NodeId {
        let entry = params.entry(id);
        let node = self.leaf(entry.value.cast::<F>(), entry.trainable);
        self.bindings.push((id, node));
        node
    }

    /// Accumulate leaf gradients of bound parameters into the set (as f32).
    pub fn read_grads(&self, params: &mut ParamSet) {
        for &(pid, node) in &self.bindings {
            if let Some(g) = self.grad(node) {
                let g32: Vec<f32> = g.iter().map(|v| v.to_f32()).collect();
                params.accumulate_grad(pid, &g32);
            }
        }
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<F>,
        parents: Vec<NodeId>,
        backward: BackwardFn<F>,
    ) -> NodeId {
        let requires_grad = !self.no_grad && parents.iter().any(|&p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            parents: if requires_grad { parents } else { Vec::new() },
            backward: if requires_grad { Some(backward) } else { None },
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Escape hatch for modules that define their own differentiable ops.
    pub fn custom_op(
        &mut self,
        out: Tensor<F>,
        parents: &[NodeId],
        backward: impl Fn(&Graph<F>, &[F], &mut [Vec<F>], &[bool]) + 'static,
    ) -> NodeId {
        self.push(out.shape, out.data, parents.to_vec(), Box::new(backward))
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse-mode accumulation from a scalar loss to every reachable
    /// differentiable leaf.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.no_grad {
            return Err(Error::Usage(
                "backward on an inference graph (no tape recorded)".into(),
            ));
        }
        let n = self.nodes[loss.0].data.len();
        if n != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got {n} elements"
            )));
        }
        match &mut self.nodes[loss.0].grad {
            Some(g) => g[0] += F::ONE,
            slot => *slot = Some(vec![F::ONE]),
        }
        for i in (0..=loss.0).rev() {
            if self.nodes[i].backward.is_none() || self.nodes[i].grad.is_none() {
                continue;
            }
            let gout = self.nodes[i].grad.take().unwrap();
            let bw = self.nodes[i].backward.take().unwrap();
            let parents = std::mem::take(&mut self.nodes[i].parents);
            let needs: Vec<bool> = parents
                .iter()
                .map(|&p| self.nodes[p.0].requires_grad)
                .collect();
            let mut pgrads: Vec<Vec<F>> = parents
                .iter()
                .map(|&p| vec![F::ZERO; self.nodes[p.0].data.len()])
                .collect();
            bw(self, &gout, &mut pgrads, &needs);
            self.nodes[i].backward = Some(bw);
            for ((&p, g), &need) in parents.iter().zip(pgrads).zip(&needs) {
                if !need {
                    continue;
                }
                match &mut self.nodes[p.0].grad {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += *b;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
            self.nodes[i].parents = parents;
        }
        Ok(())
    }

    // ── Elementwise ────────────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_scaled(a, b, 1.0)
    }

    /// a + c * b
    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, c: f32) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let cf = F::from_f32(c);
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + cf * y)
            .collect();
        Ok(self.push(
            self.shape(a).to_vec(),
            data,
            vec![a, b],
            Box::new(move |_, gout, pg, needs| {
                if needs[0] {
                    pg[0].copy_from_slice(gout);
                }
                if needs[1] {
                    for (g, &go) in pg[1].iter_mut().zip(gout) {
                        *g = cf * go;
                    }
                }
            }),
        ))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_scaled(a, b, -1.0)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(
            self.shape(a).to_vec(),
            data,
            vec![a, b],
            Box::new(move |g, gout, pg, needs| {
                if needs[0] {
                    for ((ga, &go), &bv) in pg[0].iter_mut().zip(gout).zip(g.data(b)) {
                        *ga = go * bv;
                    }
                }
                if needs[1] {
                    for ((gb, &go), &av) in pg[1].iter_mut().zip(gout).zip(g.data(a)) {
                        *gb = go * av;
                    }
                }
            }),
        ))
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> NodeId {
        let cf = F::from_f32(c);
        let data = self.data(a).iter().map(|&x| x * cf).collect();
        self.push(
            self.shape(a).to_vec(),
            data,
            vec![a],
            Box::new(move |_, gout, pg, _| {
                for (g, &go) in pg[0].iter_mut().zip(gout) {
                    *g = cf * go;
                }
            }),
        )
    }

    /// x (..., d) + bias (d), broadcast over leading rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(bias) != [d] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bdata = self.data(bias);
        let data = self
            .data(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(bdata).map(|(&v, &b)| v + b))
            .collect();
        Ok(self.push(
            self.shape(x).to_vec(),
            data,
            vec![x, bias],
            Box::new(move |_, gout, pg, needs| {
                if needs[0] {
                    pg[0].copy_from_slice(gout);
                }
                if needs[1] {
                    for row in gout.chunks(d) {
                        for (g, &go) in pg[1].iter_mut().zip(row) {
                            *g += go;
                        }
                    }
                }
            }),
        ))
    }

    // ── Matmul ─────────────────────────────────────────────────────────

    fn mm_dims(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        transpose_b: bool,
    ) -> Result<(usize, usize, usize, usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let err = || Error::Shape {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if !(sa.len() == 2 || sa.len() == 3) || !(sb.len() == 2 || sb.len() == 3) {
            return Err(err());
        }
        let (bm, m, p) = match sa.len() {
            2 => (1, sa[0], sa[1]),
            _ => (sa[0], sa[1], sa[2]),
        };
        let (bb, r, c) = match sb.len() {
            2 => (1, sb[0], sb[1]),
            _ => (sb[0], sb[1], sb[2]),
        };
        let (ip, q) = if transpose_b { (c, r) } else { (r, c) };
        if ip != p || (bb != bm && bb != 1) {
            return Err(err());
        }
        Ok((bm, m, p, q, bb))
    }

    /// Standard matrix product with optional leading batch axis; the batch
    /// extent of `b` may be 1 (broadcast).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// a @ b^T (b stored row-major as (q, p)); the layout used by linear
    /// layers holding weights as (out, in).
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let (bm, m, p, q, bb) = self.mm_dims("matmul", a, b, transpose_b)?;
        let mut data = vec![F::ZERO; bm * m * q];
        k::matmul(self.data(a), self.data(b), bm, m, p, q, bb, transpose_b, &mut data);
        let shape = if self.shape(a).len() == 3 {
            vec![bm, m, q]
        } else {
            vec![m, q]
        };
        Ok(self.push(
            shape,
            data,
            vec![a, b],
            Box::new(move |g, gout, pg, needs| {
                let (adata, bdata) = (g.data(a), g.data(b));
                if needs[0] {
                    // ga = gout @ b^T (plain) or gout @ b (nt)
                    k::matmul(gout, bdata, bm, m, q, p, bb, !transpose_b, &mut pg[0]);
                }
                if needs[1] {
                    // Per batch: plain gb += a^T @ gout; nt gb += gout^T @ a.
                    // Broadcast b accumulates over all batches.
                    let mut tmp = vec![F::ZERO; p * q];
                    for batch in 0..bm {
                        let a_b = &adata[batch * m * p..][..m * p];
                        let go_b = &gout[batch * m * q..][..m * q];
                        let gb = if bb == 1 {
                            &mut pg[1][..]
                        } else {
                            &mut pg[1][batch * p * q..]
                        };
                        if transpose_b {
                            // gb (q,p) += gout^T (q,m) @ a (m,p)
                            let gt = transpose2d(go_b, m, q);
                            tmp.fill(F::ZERO);
                            k::matmul(&gt, a_b, 1, q, m, p, 1, false, &mut tmp[..q * p]);
                            for (dst, &v) in gb[..q * p].iter_mut().zip(&tmp[..q * p]) {
                                *dst += v;
                            }
                        } else {
                            // gb (p,q) += a^T (p,m) @ gout (m,q)
                            let at = transpose2d(a_b, m, p);
                            tmp.fill(F::ZERO);
                            k::matmul(&at, go_b, 1, p, m, q, 1, false, &mut tmp[..p * q]);
                            for (dst, &v) in gb[..p * q].iter_mut().zip(&tmp[..p * q]) {
                                *dst += v;
                            }
                        }
                    }
                }
            }),
        ))
    }

    // ── Layout ─────────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: NodeId, new_shape: &[usize]) -> Result<NodeId> {
        let n: usize = new_shape.iter().product();
        if n != self.data(x).len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: new_shape.to_vec(),
            });
        }
        let data = self.data(x).to_vec();
        Ok(self.push(
            new_shape.to_vec(),
            data,
            vec![x],
            Box::new(|_, gout, pg, _| pg[0].copy_from_slice(gout)),
        ))
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axes.len() != shape.len() {
            return Err(Error::Param(format!(
                "permute axes {axes:?} do not match rank {}",
                shape.len()
            )));
        }
        let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let data = permute_copy(self.data(x), &shape, axes);
        let axes_owned = axes.to_vec();
        let ns = new_shape.clone();
        Ok(self.push(
            new_shape,
            data,
            vec![x],
            Box::new(move |_, gout, pg, _| {
                let mut inv = vec![0usize; axes_owned.len()];
                for (i, &a) in axes_owned.iter().enumerate() {
                    inv[a] = i;
                }
                let back = permute_copy(gout, &ns, &inv);
                pg[0].copy_from_slice(&back);
            }),
        ))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Param("concat of zero tensors".into()));
        }
        let base = self.shape(parts[0]).to_vec();
        let rank = base.len();
        if axis >= rank {
            return Err(Error::Param(format!("concat axis {axis} out of range")));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != rank
                || s.iter()
                    .enumerate()
                    .any(|(i, &e)| i != axis && e != base[i])
            {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let mut data = vec![F::ZERO; outer * axis_total * inner];
        let mut offset = 0usize;
        let mut extents = Vec::with_capacity(parts.len());
        for &p in parts {
            let e = self.shape(p)[axis];
            let src = self.data(p);
            for o in 0..outer {
                let dst = &mut data[(o * axis_total + offset) * inner..][..e * inner];
                dst.copy_from_slice(&src[o * e * inner..][..e * inner]);
            }
            extents.push(e);
            offset += e;
        }
        Ok(self.push(
            shape,
            data,
            parts.to_vec(),
            Box::new(move |_, gout, pg, needs| {
                let mut offset = 0usize;
                for (pi, &e) in extents.iter().enumerate() {
                    if needs[pi] {
                        for o in 0..outer {
                            let src = &gout[(o * axis_total + offset) * inner..][..e * inner];
                            pg[pi][o * e * inner..][..e * inner].copy_from_slice(src);
                        }
                    }
                    offset += e;
                }
            }),
        ))
    }

    /// Slice `len` indices starting at `start` along `axis`.
    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::Param(format!(
                "narrow [{start}, {start}+{len}) out of range for axis {axis} of {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut out_shape = shape;
        out_shape[axis] = len;
        let src = self.data(x);
        let mut data = vec![F::ZERO; outer * len * inner];
        for o in 0..outer {
            data[o * len * inner..][..len * inner]
                .copy_from_slice(&src[(o * full + start) * inner..][..len * inner]);
        }
        Ok(self.push(
            out_shape,
            data,
            vec![x],
            Box::new(move |_, gout, pg, _| {
                for o in 0..outer {
                    let dst = &mut pg[0][(o * full + start) * inner..][..len * inner];
                    dst.copy_from_slice(&gout[o * len * inner..][..len * inner]);
                }
            }),
        ))
    }

    // ── Softmax family ─────────────────────────────────────────────────

    pub fn softmax_last(&mut self, x: NodeId) -> Result<NodeId> {
        let d = *self.shape(x).last().unwrap();
        let mut data = vec![F::ZERO; self.data(x).len()];
        k::softmax_rows(self.data(x), d, &mut data)
            .map_err(|row| Error::Input(format!("softmax row {row} fully masked (-inf)")))?;
        let shape = self.shape(x).to_vec();
        let saved = data.clone();
        Ok(self.push(
            shape,
            data,
            vec![x],
            Box::new(move |_, gout, pg, _| {
                k::softmax_rows_bwd(&saved, gout, d, &mut pg[0]);
            }),
        ))
    }

    pub fn log_softmax_last(&mut self, x: NodeId) -> Result<NodeId> {
        let d = *self.shape(x).last().unwrap();
        let mut data = vec![F::ZERO; self.data(x).len()];
        k::log_softmax_rows(self.data(x), d, &mut data)
            .map_err(|row| Error::Input(format!("log_softmax row {row} fully masked (-inf)")))?;
        let shape = self.shape(x).to_vec();
        let saved = data.clone();
        Ok(self.push(
            shape,
            data,
            vec![x],
            Box::new(move |_, gout, pg, _| {
                k::log_softmax_rows_bwd(&saved, gout, d, &mut pg[0]);
            }),
        ))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let data: Vec<F> = self.data(x).iter().map(|v| v.exp()).collect();
        let saved = data.clone();
        self.push(
            self.shape(x).to_vec(),
            data,
            vec![x],
            Box::new(move |_, gout, pg, _| {
                for ((g, &go), &y) in pg[0].iter_mut().zip(gout).zip(&saved) {
                    *g = go * y;
                }
            }),
        )
    }

    // ── Activations ────────────────────────────────────────────────────

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<F> = self
            .data(x)
            .iter()
            .map(|&v| v.maximum(F::ZERO))
            .collect();
        let mask: Vec<bool> = self.data(x).iter().map(|&v| v > F::ZERO).collect();
        self.push(
            self.shape(x).to_vec(),
            data,
            vec![x],
            Box::new(move |_, gout, pg, _| {
                for ((g, &go), &m) in pg[0].iter_mut().zip(gout).zip(&mask) {
                    *g = if m { go } else { F::ZERO };
                }
            }),
        )
    }

    /// swish(x) = x * sigmoid(x)
    pub fn swish(&mut self, x: NodeId) -> NodeId {
        let xs: Vec<F> = self.data(x).to_vec();
        let data: Vec<F> = xs.iter().map(|&v| v * k::sigmoid(v)).collect();
        self.push(
            self.shape(x).to_vec(),
            data,
            vec![x],
            Box::new(move |_, gout, pg, _| {
                for ((g, &go), &v) in pg[0].iter_mut().zip(gout).zip(&xs) {
                    let s = k::sigmoid(v);
                    *g = go * s * (F::ONE + v * (F::ONE - s));
                }
            }),
        )
    }

    /// Gated linear unit over the last axis: (..., 2d) -> (..., d).
    pub fn glu_last(&mut self, x: NodeId) -> Result<NodeId> {
        let last = *self.shape(x).last().unwrap();
        if last % 2 != 0 {
            return Err(Error::Param(format!("glu needs even last axis, got {last}")));
        }
        let d = last / 2;
        let xd = self.data(x).to_vec();
        let rows = xd.len() / last;
        let mut data = vec![F::ZERO; rows * d];
        for r in 0..rows {
            for c in 0..d {
                let a = xd[r * last + c];
                let b = xd[r * last + d + c];
                data[r * d + c] = a * k::sigmoid(b);
            }
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = d;
        Ok(self.push(
            shape,
            data,
            vec![x],
            Box::new(move |_, gout, pg, _| {
                for r in 0..rows {
                    for c in 0..d {
                        let a = xd[r * last + c];
                        let b = xd[r * last + d + c];
                        let s = k::sigmoid(b);
                        let go = gout[r * d + c];
                        pg[0][r * last + c] += go * s;
                        pg[0][r * last + d + c] += go * a * s * (F::ONE - s);
                    }
                }
            }),
        ))
    }

    // ── Normalization ──────────────────────────────────────────────────

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let mut data = vec![F::ZERO; self.data(x).len()];
        let mut stats = Vec::with_capacity(data.len() / d);
        k::layer_norm_fwd(self.data(x), self.data(gamma), self.data(beta), d, &mut data, &mut stats);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            data,
            vec![x, gamma, beta],
            Box::new(move |g, gout, pg, _| {
                let xd = g.data(x);
                let gammad = g.data(gamma);
                let (gx, rest) = pg.split_at_mut(1);
                let (gg, gb) = rest.split_at_mut(1);
                k::layer_norm_bwd(xd, gammad, gout, &stats, d, &mut gx[0], &mut gg[0], &mut gb[0]);
            }),
        ))
    }

    /// Batch norm normalizing over every axis except `channel_axis`.
    /// Training mode uses batch statistics and updates the running buffers in
    /// place (momentum, unbiased variance for the running estimate); eval
    /// mode normalizes with the running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        channel_axis: usize,
        running_mean: &mut [f32],
        running_var: &mut [f32],
        momentum: f32,
    ) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let ch = shape[channel_axis];
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] || running_mean.len() != ch {
            return Err(Error::Shape {
                op: "batch_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let outer: usize = shape[..channel_axis].iter().product();
        let inner: usize = shape[channel_axis + 1..].iter().product();
        let m = F::from_f64((outer * inner) as f64);
        let xd = self.data(x).to_vec();
        let gammad = self.data(gamma).to_vec();
        let betad = self.data(beta).to_vec();

        let mut mean = vec![F::ZERO; ch];
        let mut var = vec![F::ZERO; ch];
        if self.training {
            let mf = (outer * inner) as f64;
            for c in 0..ch {
                let mut s = F::ZERO;
                for o in 0..outer {
                    let base = (o * ch + c) * inner;
                    for i in 0..inner {
                        s += xd[base + i];
                    }
                }
                mean[c] = s / m;
                let mut v = F::ZERO;
                for o in 0..outer {
                    let base = (o * ch + c) * inner;
                    for i in 0..inner {
                        let d = xd[base + i] - mean[c];
                        v += d * d;
                    }
                }
                var[c] = v / m;
                let unbiased = if mf > 1.0 {
                    var[c].to_f32() * (mf / (mf - 1.0)) as f32
                } else {
                    var[c].to_f32()
                };
                running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mean[c].to_f32();
                running_var[c] = (1.0 - momentum) * running_var[c] + momentum * unbiased;
            }
        } else {
            for c in 0..ch {
                mean[c] = F::from_f32(running_mean[c]);
                var[c] = F::from_f32(running_var[c]);
            }
        }

        let eps = F::from_f64(k::LN_EPS);
        let inv_std: Vec<F> = var.iter().map(|&v| F::ONE / (v + eps).sqrt()).collect();
        let mut data = vec![F::ZERO; xd.len()];
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                for i in 0..inner {
                    data[base + i] = (xd[base + i] - mean[c]) * inv_std[c] * gammad[c] + betad[c];
                }
            }
        }
        let training = self.training;
        let out_shape = self.shape(x).to_vec();
        Ok(self.push(
            out_shape,
            data,
            vec![x, gamma, beta],
            Box::new(move |_, gout, pg, _| {
                for c in 0..ch {
                    let mut sum_g = F::ZERO;
                    let mut sum_gx = F::ZERO;
                    for o in 0..outer {
                        let base = (o * ch + c) * inner;
                        for i in 0..inner {
                            let xhat = (xd[base + i] - mean[c]) * inv_std[c];
                            let go = gout[base + i];
                            sum_g += go;
                            sum_gx += go * xhat;
                        }
                    }
                    pg[1][c] += sum_gx;
                    pg[2][c] += sum_g;
                    let scale = gammad[c] * inv_std[c];
                    for o in 0..outer {
                        let base = (o * ch + c) * inner;
                        for i in 0..inner {
                            let xhat = (xd[base + i] - mean[c]) * inv_std[c];
                            let go = gout[base + i];
                            pg[0][base + i] += if training {
                                scale * (go - sum_g / m - xhat * sum_gx / m)
                            } else {
                                scale * go
                            };
                        }
                    }
                }
            }),
        ))
    }

    // ── Dropout ────────────────────────────────────────────────────────

    /// Inverted dropout: training scales kept activations by 1/(1-p); eval is
    /// the identity.
    pub fn dropout(&mut self, x: NodeId, p: f32, rng: &mut Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Param(format!("dropout p={p} outside [0, 1)")));
        }
        if !self.training || p == 0.0 {
            let data = self.data(x).to_vec();
            return Ok(self.push(
                self.shape(x).to_vec(),
                data,
                vec![x],
                Box::new(|_, gout, pg, _| pg[0].copy_from_slice(gout)),
            ));
        }
        let scale = F::from_f32(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..self.data(x).len())
            .map(|_| if rng.uniform01() < p { F::ZERO } else { scale })
            .collect();
        let data = self
            .data(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        Ok(self.push(
            self.shape(x).to_vec(),
            data,
            vec![x],
            Box::new(move |_, gout, pg, _| {
                for ((g, &go), &m) in pg[0].iter_mut().zip(gout).zip(&mask) {
                    *g = go * m;
                }
            }),
        ))
    }

    // ── Convolution & pooling ──────────────────────────────────────────

    fn conv_input_dims(
        &self,
        x: NodeId,
        spatial_rank: usize,
    ) -> Result<(usize, usize, Vec<usize>, bool)> {
        let s = self.shape(x);
        if s.len() == spatial_rank + 1 {
            Ok((1, s[0], s[1..].to_vec(), false))
        } else if s.len() == spatial_rank + 2 {
            Ok((s[0], s[1], s[2..].to_vec(), true))
        } else {
            Err(Error::Param(format!(
                "conv{spatial_rank}d input rank {} not {} or {}",
                s.len(),
                spatial_rank + 1,
                spatial_rank + 2
            )))
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_check(
        &self,
        op: &'static str,
        cin: usize,
        w: NodeId,
        spatial: &[usize],
        kernel: &[usize],
        stride: &[usize],
        pad: &[usize],
        groups: usize,
    ) -> Result<Vec<usize>> {
        let ws = self.shape(w);
        if cin % groups != 0 || ws[0] % groups != 0 || ws[1] != cin / groups {
            return Err(Error::Shape {
                op,
                lhs: vec![cin],
                rhs: ws.to_vec(),
            });
        }
        k::conv_out_shape(spatial, kernel, stride, pad).ok_or_else(|| Error::Shape {
            op,
            lhs: spatial.to_vec(),
            rhs: kernel.to_vec(),
        })
    }

    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<NodeId> {
        let (n, cin, spatial, batched) = self.conv_input_dims(x, 1)?;
        let ws = self.shape(w).to_vec(); // (cout, cin/g, k)
        let out_sp =
            self.conv_check("conv1d", cin, w, &spatial, &ws[2..], &[stride], &[pad], groups)?;
        let (l, cout, kk, lo) = (spatial[0], ws[0], ws[2], out_sp[0]);
        let mut data = vec![F::ZERO; n * cout * lo];
        let bias_data = bias.map(|b| self.data(b).to_vec());
        k::conv1d_fwd(
            self.data(x),
            self.data(w),
            bias_data.as_deref(),
            n,
            cin,
            l,
            cout,
            kk,
            stride,
            pad,
            groups,
            &mut data,
        );
        let shape = if batched {
            vec![n, cout, lo]
        } else {
            vec![cout, lo]
        };
        let mut parents = vec![x, w];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(self.push(
            shape,
            data,
            parents,
            Box::new(move |g, gout, pg, needs| {
                let has_bias = pg.len() == 3;
                let (gx_s, rest) = pg.split_at_mut(1);
                let (gw_s, gb_s) = rest.split_at_mut(1);
                k::conv1d_bwd(
                    g.data(x),
                    g.data(w),
                    gout,
                    n,
                    cin,
                    l,
                    cout,
                    kk,
                    stride,
                    pad,
                    groups,
                    &mut gx_s[0],
                    &mut gw_s[0],
                    if has_bias && needs[2] {
                        Some(&mut gb_s[0])
                    } else {
                        None
                    },
                );
            }),
        ))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: (usize, usize),
        pad: (usize, usize),
        groups: usize,
    ) -> Result<NodeId> {
        let (n, cin, spatial, batched) = self.conv_input_dims(x, 2)?;
        let ws = self.shape(w).to_vec(); // (cout, cin/g, kh, kw)
        let out_sp = self.conv_check(
            "conv2d",
            cin,
            w,
            &spatial,
            &ws[2..],
            &[stride.0, stride.1],
            &[pad.0, pad.1],
            groups,
        )?;
        let hw = (spatial[0], spatial[1]);
        let khw = (ws[2], ws[3]);
        let cout = ws[0];
        let (ho, wo) = (out_sp[0], out_sp[1]);
        let mut data = vec![F::ZERO; n * cout * ho * wo];
        let bias_data = bias.map(|b| self.data(b).to_vec());
        k::conv2d_fwd(
            self.data(x),
            self.data(w),
            bias_data.as_deref(),
            n,
            cin,
            hw,
            cout,
            khw,
            stride,
            pad,
            groups,
            &mut data,
        );
        let shape = if batched {
            vec![n, cout, ho, wo]
        } else {
            vec![cout, ho, wo]
        };
        let mut parents = vec![x, w];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(self.push(
            shape,
            data,
            parents,
            Box::new(move |g, gout, pg, needs| {
                let has_bias = pg.len() == 3;
                let (gx_s, rest) = pg.split_at_mut(1);
                let (gw_s, gb_s) = rest.split_at_mut(1);
                k::conv2d_bwd(
                    g.data(x),
                    g.data(w),
                    gout,
                    n,
                    cin,
                    hw,
                    cout,
                    khw,
                    stride,
                    pad,
                    groups,
                    &mut gx_s[0],
                    &mut gw_s[0],
                    if has_bias && needs[2] {
                        Some(&mut gb_s[0])
                    } else {
                        None
                    },
                );
            }),
        ))
    }

    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
    ) -> Result<NodeId> {
        let (n, cin, spatial, batched) = self.conv_input_dims(x, 3)?;
        let ws = self.shape(w).to_vec();
        let out_sp = self.conv_check(
            "conv3d",
            cin,
            w,
            &spatial,
            &ws[2..],
            &[stride.0, stride.1, stride.2],
            &[pad.0, pad.1, pad.2],
            1,
        )?;
        let dhw = (spatial[0], spatial[1], spatial[2]);
        let kdhw = (ws[2], ws[3], ws[4]);
        let cout = ws[0];
        let vol_o = out_sp.iter().product::<usize>();
        let mut data = vec![F::ZERO; n * cout * vol_o];
        let bias_data = bias.map(|b| self.data(b).to_vec());
        k::conv3d_fwd(
            self.data(x),
            self.data(w),
            bias_data.as_deref(),
            n,
            cin,
            dhw,
            cout,
            kdhw,
            stride,
            pad,
            &mut data,
        );
        let mut shape = if batched { vec![n, cout] } else { vec![cout] };
        shape.extend_from_slice(&out_sp);
        let mut parents = vec![x, w];
        if let Some(b) = bias {
            parents.push(b);
        }
        Ok(self.push(
            shape,
            data,
            parents,
            Box::new(move |g, gout, pg, needs| {
                let has_bias = pg.len() == 3;
                let (gx_s, rest) = pg.split_at_mut(1);
                let (gw_s, gb_s) = rest.split_at_mut(1);
                k::conv3d_bwd(
                    g.data(x),
                    g.data(w),
                    gout,
                    n,
                    cin,
                    dhw,
                    cout,
                    kdhw,
                    stride,
                    pad,
                    &mut gx_s[0],
                    &mut gw_s[0],
                    if has_bias && needs[2] {
                        Some(&mut gb_s[0])
                    } else {
                        None
                    },
                );
            }),
        ))
    }

    pub fn max_pool2d(
        &mut self,
        x: NodeId,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<NodeId> {
        let (n, c, spatial, batched) = self.conv_input_dims(x, 2)?;
        let out_sp = k::conv_out_shape(
            &spatial,
            &[kernel.0, kernel.1],
            &[stride.0, stride.1],
            &[pad.0, pad.1],
        )
        .ok_or(Error::Shape {
            op: "max_pool2d",
            lhs: spatial.clone(),
            rhs: vec![kernel.0, kernel.1],
        })?;
        let (ho, wo) = (out_sp[0], out_sp[1]);
        let mut data = vec![F::ZERO; n * c * ho * wo];
        let mut argmax = vec![0usize; data.len()];
        k::max_pool2d_fwd(
            self.data(x),
            n,
            c,
            (spatial[0], spatial[1]),
            kernel,
            stride,
            pad,
            &mut data,
            &mut argmax,
        );
        let shape = if batched {
            vec![n, c, ho, wo]
        } else {
            vec![c, ho, wo]
        };
        Ok(self.push(
            shape,
            data,
            vec![x],
            Box::new(move |_, gout, pg, _| {
                k::max_pool2d_bwd(gout, &argmax, &mut pg[0]);
            }),
        ))
    }

    /// (n, d) -> (ceil(n/k), d); the final partial window is averaged over
    /// its actual length.
    pub fn avg_pool1d(&mut self, x: NodeId, k_size: usize) -> Result<NodeId> {
        if k_size == 0 {
            return Err(Error::Param("avg_pool1d k must be >= 1".into()));
        }
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Param(format!("avg_pool1d expects (n, d), got {s:?}")));
        }
        let (rows, d) = (s[0], s[1]);
        let rows_out = ceil_div(rows, k_size);
        let mut data = vec![F::ZERO; rows_out * d];
        k::avg_pool1d_fwd(self.data(x), rows, d, k_size, &mut data);
        Ok(self.push(
            vec![rows_out, d],
            data,
            vec![x],
            Box::new(move |_, gout, pg, _| {
                k::avg_pool1d_bwd(gout, rows, d, k_size, &mut pg[0]);
            }),
        ))
    }

    /// (m, d) -> (target_len, d), each row repeated k times then truncated.
    pub fn upsample_nearest1d(
        &mut self,
        x: NodeId,
        k_size: usize,
        target_len: usize,
    ) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Param(format!(
                "upsample_nearest1d expects (m, d), got {s:?}"
            )));
        }
        let (m, d) = (s[0], s[1]);
        if k_size == 0 || target_len < (m - 1) * k_size + 1 || target_len > m * k_size {
            return Err(Error::Param(format!(
                "upsample target_len {target_len} outside [{}, {}] for m={m}, k={k_size}",
                (m - 1) * k_size + 1,
                m * k_size
            )));
        }
        let mut data = vec![F::ZERO; target_len * d];
        k::upsample_nearest1d_fwd(self.data(x), d, k_size, target_len, &mut data);
        Ok(self.push(
            vec![target_len, d],
            data,
            vec![x],
            Box::new(move |_, gout, pg, _| {
                k::upsample_nearest1d_bwd(gout, d, k_size, target_len, &mut pg[0]);
            }),
        ))
    }

    // ── Reductions ─────────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut s = F::ZERO;
        for &v in self.data(x) {
            s += v;
        }
        self.push(
            vec![1],
            vec![s],
            vec![x],
            Box::new(|_, gout, pg, _| {
                let g = gout[0];
                pg[0].fill(g);
            }),
        )
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = F::from_f64(self.data(x).len() as f64);
        let mut s = F::ZERO;
        for &v in self.data(x) {
            s += v;
        }
        s = s / n;
        self.push(
            vec![1],
            vec![s],
            vec![x],
            Box::new(move |_, gout, pg, _| {
                let g = gout[0] / n;
                pg[0].fill(g);
            }),
        )
    }

    /// Mean over the trailing two axes: (..., h, w) -> (...).
    pub fn mean_last2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::Param(format!("mean_last2 needs rank >= 3, got {s:?}")));
        }
        let spatial = s[s.len() - 2] * s[s.len() - 1];
        let lead: usize = s[..s.len() - 2].iter().product();
        let inv = F::ONE / F::from_f64(spatial as f64);
        let mut data = vec![F::ZERO; lead];
        for (o, chunk) in data.iter_mut().zip(self.data(x).chunks(spatial)) {
            let mut acc = F::ZERO;
            for &v in chunk {
                acc += v;
            }
            *o = acc * inv;
        }
        Ok(self.push(
            s[..s.len() - 2].to_vec(),
            data,
            vec![x],
            Box::new(move |_, gout, pg, _| {
                for (chunk, &go) in pg[0].chunks_mut(spatial).zip(gout) {
                    chunk.fill(go * inv);
                }
            }),
        ))
    }
}

fn transpose2d<F: Real>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::ZERO; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn permute_copy<F: Real>(data: &[F], shape: &[usize], axes: &[usize]) -> Vec<F> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = vec![F::ZERO; data.len()];
    let mut idx = vec![0usize; rank];
    for o in out.iter_mut() {
        let mut src = 0usize;
        for (i, &ix) in idx.iter().enumerate() {
            src += ix * src_strides[i];
        }
        *o = data[src];
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < new_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    out
}
