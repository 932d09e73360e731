use rand::Rng;

use super::conv::ConvSpec;
use super::graph::{Graph, Var};
use super::params::{ParamId, ParamKind, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

pub const LEAKY_SLOPE: f32 = 0.01;

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: ConvSpec,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv3d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        ci: usize,
        co: usize,
        spec: ConvSpec,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add_conv_weight(format!("{name}.weight"), co, ci, spec.kernel, rng);
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[co]), ParamKind::Bias));
        Conv3d {
            w,
            b,
            spec,
            in_ch: ci,
            out_ch: co,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        g.conv(x, self.w, self.b, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl InstanceNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        InstanceNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[c], 1.0), ParamKind::Norm),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c]), ParamKind::Norm),
        }
    }
}

/// Convolution, instance norm, leaky ReLU. The conv has no bias since the
/// norm's shift replaces it.
#[derive(Clone, Debug)]
pub struct ConvNormAct {
    pub conv: Conv3d,
    pub norm: InstanceNorm,
}

impl ConvNormAct {
    pub fn new(store: &mut ParamStore, name: &str, ci: usize, co: usize, spec: ConvSpec, rng: &mut impl Rng) -> Self {
        ConvNormAct {
            conv: Conv3d::new(store, &format!("{name}.conv"), ci, co, spec, false, rng),
            norm: InstanceNorm::new(store, &format!("{name}.norm"), co),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let c = self.conv.forward(g, x);
        let n = g.instance_norm(c, self.norm.gamma, self.norm.beta);
        g.leaky_relu(n, LEAKY_SLOPE)
    }
}

/// How an SE block applies its channel gate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateMode {
    /// Rescale channels by the learned gate.
    #[default]
    Learned,
    /// Compute the gate branch but multiply by ones instead.
    ForcedOpen,
    /// Skip the block entirely.
    Bypass,
}

/// Squeeze-and-excitation: global average pool, bottleneck 1x1x1 conv with
/// ReLU, expanding 1x1x1 conv with sigmoid, channelwise rescale.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub squeeze: Conv3d,
    pub excite: Conv3d,
}

impl SeBlock {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        let mid = (c / reduction).max(1);
        SeBlock {
            squeeze: Conv3d::new(store, &format!("{name}.squeeze"), c, mid, ConvSpec::point(), true, rng),
            excite: Conv3d::new(store, &format!("{name}.excite"), mid, c, ConvSpec::point(), true, rng),
        }
    }

    /// Returns the gated output and the gate variable (if one was computed).
    pub fn forward(&self, g: &mut Graph, x: Var, mode: GateMode) -> Result<(Var, Option<Var>)> {
        if mode == GateMode::Bypass {
            return Ok((x, None));
        }
        let pooled = g.global_avg_pool(x);
        let s = self.squeeze.forward(g, pooled);
        let s = g.relu(s);
        let e = self.excite.forward(g, s);
        let gate = g.sigmoid(e);
        let applied = match mode {
            GateMode::ForcedOpen => {
                let ones = Tensor::filled(g.value(gate).shape(), 1.0);
                g.input(ones)
            }
            _ => gate,
        };
        Ok((g.channel_scale(x, applied)?, Some(gate)))
    }
}
