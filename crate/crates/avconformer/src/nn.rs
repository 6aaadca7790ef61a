//! Shared layer-parameter helpers used by the front-ends and the back-end.

use crate::tensor::{Graph, NodeId, ParamSet, Real, Rng};
use crate::Result;

pub const BN_MOMENTUM: f32 = 0.1;

/// Weight + bias of a linear layer, stored (out, in).
#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub w: usize,
    pub b: usize,
}

impl LinearParams {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let w = params.weight(&format!("{name}.w"), &[out_dim, in_dim], in_dim, rng);
        let b = params.zeros(&format!("{name}.b"), &[out_dim], true);
        Self { w, b }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &ParamSet,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = g.param_leaf(params, self.w);
        let b = g.param_leaf(params, self.b);
        let y = g.matmul_nt(x, w)?;
        g.add_bias(y, b)
    }
}

/// Affine + running statistics of a batch-norm layer.
#[derive(Debug, Clone, Copy)]
pub struct BnParams {
    pub gamma: usize,
    pub beta: usize,
    pub mean: usize,
    pub var: usize,
}

impl BnParams {
    pub fn new(params: &mut ParamSet, name: &str, channels: usize) -> Self {
        let gamma = params.ones(&format!("{name}.gamma"), &[channels], true);
        let beta = params.zeros(&format!("{name}.beta"), &[channels], true);
        let mean = params.zeros(&format!("{name}.running_mean"), &[channels], false);
        let var = params.ones(&format!("{name}.running_var"), &[channels], false);
        Self {
            gamma,
            beta,
            mean,
            var,
        }
    }

    /// Batch norm over every axis except `channel_axis`; updates running
    /// stats in place when the graph is in training mode.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &mut ParamSet,
        x: NodeId,
        channel_axis: usize,
    ) -> Result<NodeId> {
        let gamma = g.param_leaf(params, self.gamma);
        let beta = g.param_leaf(params, self.beta);
        let (m, v) = params.two_mut(self.mean, self.var);
        g.batch_norm(
            x,
            gamma,
            beta,
            channel_axis,
            &mut m.value.data,
            &mut v.value.data,
            BN_MOMENTUM,
        )
    }
}

/// Gain + offset of a layer norm.
#[derive(Debug, Clone, Copy)]
pub struct LnParams {
    pub gamma: usize,
    pub beta: usize,
}

impl LnParams {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        let gamma = params.ones(&format!("{name}.gamma"), &[dim], true);
        let beta = params.zeros(&format!("{name}.beta"), &[dim], true);
        Self { gamma, beta }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        params: &ParamSet,
        x: NodeId,
    ) -> Result<NodeId> {
        let gamma = g.param_leaf(params, self.gamma);
        let beta = g.param_leaf(params, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}
