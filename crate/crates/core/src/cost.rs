//! Multiply-accumulate and parameter counting.
//!
//! One multiply-add counts as one FLOP. Batch-norm and activations are not
//! counted, pooling is free, and only convolution/classifier weights count as
//! parameters (no biases). Convolutions use "same" padding, so every kernel
//! tap is counted at every output position.

use serde::{Deserialize, Serialize};

use crate::space::{
    conv_output_side, Architecture, FixedLayer, FixedOp, LayerGene, Mode, SearchSpaceSpec,
};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub label: String,
    pub input_side: u32,
    pub c_in: u32,
    pub c_out: u32,
    pub macs: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub per_layer: Vec<LayerCost>,
    pub total_macs: u64,
    pub total_params: u64,
}

/// (macs, params, output side) of a dense k×k convolution.
pub fn conv_cost(side: u32, c_in: u32, c_out: u32, kernel: u32, stride: u32) -> (u64, u64, u32) {
    let out = conv_output_side(side, kernel, stride, kernel / 2);
    let taps = u64::from(kernel) * u64::from(kernel);
    let params = u64::from(c_in) * u64::from(c_out) * taps;
    (u64::from(out) * u64::from(out) * params, params, out)
}

/// (macs, params, output side) of a depthwise k×k convolution.
pub fn depthwise_cost(side: u32, channels: u32, kernel: u32, stride: u32) -> (u64, u64, u32) {
    let out = conv_output_side(side, kernel, stride, kernel / 2);
    let params = u64::from(channels) * u64::from(kernel) * u64::from(kernel);
    (u64::from(out) * u64::from(out) * params, params, out)
}

/// Inverted residual block: pointwise expansion to `t·c_in` (skipped when
/// that equals `c_in`), depthwise k×k with the block stride, linear pointwise
/// projection to `c_out`.
pub fn inverted_residual_cost(
    side: u32,
    c_in: u32,
    expansion: u32,
    kernel: u32,
    stride: u32,
    c_out: u32,
) -> (u64, u64, u32) {
    let hidden = expansion * c_in;
    let (mut macs, mut params) = (0, 0);
    if hidden != c_in {
        let (m, p, _) = conv_cost(side, c_in, hidden, 1, 1);
        macs += m;
        params += p;
    }
    let (m, p, out) = depthwise_cost(side, hidden, kernel, stride);
    macs += m;
    params += p;
    let (m, p, _) = conv_cost(out, hidden, c_out, 1, 1);
    (macs + m, params + p, out)
}

fn fixed_cost(layer: &FixedLayer, side: u32, c_in: u32) -> (u64, u64, u32, u32) {
    match layer.op {
        FixedOp::Conv => {
            let c_out = layer.out_channels.unwrap_or(c_in);
            let (m, p, out) = conv_cost(side, c_in, c_out, layer.kernel, layer.stride);
            (m, p, out, c_out)
        }
        FixedOp::Separable => {
            let c_out = layer.out_channels.unwrap_or(c_in);
            let (m, p, out) =
                inverted_residual_cost(side, c_in, 1, layer.kernel, layer.stride, c_out);
            (m, p, out, c_out)
        }
        FixedOp::AvgPool => (0, 0, layer.output_side(side), c_in),
    }
}

/// Per-layer and total cost of `arch` in its own mode.
pub fn flops(space: &SearchSpaceSpec, arch: &Architecture) -> Result<CostBreakdown> {
    space.check(arch)?;
    let mut per_layer = Vec::new();
    let mut side = space.input_size();
    let mut width = space.in_channels();
    for (i, l) in space.stem().iter().enumerate() {
        let (macs, params, out, c_out) = fixed_cost(l, side, width);
        per_layer.push(LayerCost {
            label: format!("stem.{i}"),
            input_side: side,
            c_in: width,
            c_out,
            macs,
            params,
        });
        side = out;
        width = c_out;
    }
    let plan = space.channel_plan(arch);
    for (l, (info, &(c_in, c_out))) in space.layers().iter().zip(&plan).enumerate() {
        let LayerGene { kernel, expansion } = arch.layer_genes[l];
        let (macs, params, out) =
            inverted_residual_cost(info.input_side, c_in, expansion, kernel, info.stride, c_out);
        per_layer.push(LayerCost {
            label: format!("block.{}", l + 1),
            input_side: info.input_side,
            c_in,
            c_out,
            macs,
            params,
        });
        side = out;
        width = c_out;
    }
    for (i, l) in space.tail().iter().enumerate() {
        let (macs, params, out, c_out) = fixed_cost(l, side, width);
        per_layer.push(LayerCost {
            label: format!("tail.{i}"),
            input_side: side,
            c_in: width,
            c_out,
            macs,
            params,
        });
        side = out;
        width = c_out;
    }
    let total_macs = per_layer.iter().map(|l| l.macs).sum();
    let total_params = per_layer.iter().map(|l| l.params).sum();
    Ok(CostBreakdown {
        per_layer,
        total_macs,
        total_params,
    })
}

pub fn params(space: &SearchSpaceSpec, arch: &Architecture) -> Result<u64> {
    Ok(flops(space, arch)?.total_params)
}

/// Smallest and largest released-mode architectures: every gene at its
/// minimum or maximum choice.
pub fn extreme_architectures(space: &SearchSpaceSpec) -> (Architecture, Architecture) {
    let pick = |max: bool| {
        let layer_genes = (0..space.layer_count())
            .map(|l| {
                let ch = space.layer_choices(l);
                if max {
                    LayerGene::new(*ch.kernels.last().unwrap(), *ch.expansions.last().unwrap())
                } else {
                    LayerGene::new(ch.kernels[0], ch.expansions[0])
                }
            })
            .collect();
        let cluster_genes = space
            .clusters()
            .iter()
            .map(|c| {
                if max {
                    c.spring_output()
                } else {
                    c.channel_choices[0]
                }
            })
            .collect();
        Architecture::new(layer_genes, cluster_genes).with_mode(Mode::Released)
    };
    (pick(false), pick(true))
}

/// `(min, max)` MACs over all released architectures. Cost is monotone in
/// every gene, so the extremes are attained by the all-min and all-max
/// architectures.
pub fn flops_bounds(space: &SearchSpaceSpec) -> (u64, u64) {
    let (lo, hi) = extreme_architectures(space);
    let cost = |a: &Architecture| {
        flops(space, a)
            .expect("extreme architectures are valid")
            .total_macs
    };
    (cost(&lo), cost(&hi))
}
