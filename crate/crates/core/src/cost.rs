//! Parameter and multiply-accumulate accounting.
//!
//! MAC convention: a convolution costs `out_h·out_w·out_c·k²·in_c`, a dense
//! layer `fan_in·fan_out`; pooling, activations, dropout and the softmax cost
//! nothing. A sample visits one unit per block plus every router, so the
//! per-sample cost is the same whichever path it takes when units within a
//! block are identical.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::LayerSpec;
use crate::trellis::TrellisConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackCost {
    pub params: u64,
    pub macs: u64,
}

/// Parameters and MACs of one layer list applied to a per-sample input shape.
pub fn stack_cost(layers: &[LayerSpec], input: &[usize]) -> Result<(StackCost, Vec<usize>)> {
    let mut cost = StackCost::default();
    let mut shape = input.to_vec();
    for layer in layers {
        let out = layer.output_shape(&shape)?;
        match *layer {
            LayerSpec::Conv2d { out_channels, kernel, .. } => {
                let (in_c, k, o) = (shape[0] as u64, kernel as u64, out_channels as u64);
                cost.params += o * in_c * k * k + o;
                cost.macs += (out[1] * out[2]) as u64 * o * k * k * in_c;
            }
            LayerSpec::Dense { units } => {
                let (fin, fout) = (shape[0] as u64, units as u64);
                cost.params += fin * fout + fout;
                cost.macs += fin * fout;
            }
            _ => {}
        }
        shape = out;
    }
    Ok((cost, shape))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    /// Parameters of a single unit in each block.
    pub per_unit: Vec<u64>,
    /// All units of each block.
    pub per_block: Vec<u64>,
    pub routers: Vec<u64>,
    pub head: u64,
    pub total: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacReport {
    /// MACs of the single unit a sample visits in each block.
    pub per_block: Vec<u64>,
    pub routers: Vec<u64>,
    pub head: u64,
    /// Per-sample total along one root-to-leaf path, routers included.
    pub per_sample: u64,
}

pub fn count_params(config: &TrellisConfig) -> Result<ParamReport> {
    Ok(costs(config, &config.input_shape)?.0)
}

pub fn count_macs(config: &TrellisConfig, input_shape: &[usize]) -> Result<MacReport> {
    Ok(costs(config, input_shape)?.1)
}

fn costs(config: &TrellisConfig, input_shape: &[usize]) -> Result<(ParamReport, MacReport)> {
    config.validate()?;
    let mut shape = input_shape.to_vec();
    let (mut per_unit, mut per_block, mut block_macs) = (Vec::new(), Vec::new(), Vec::new());
    let (mut router_params, mut router_macs) = (Vec::new(), Vec::new());
    for (l, block) in config.blocks.iter().enumerate() {
        let (cost, out) = stack_cost(&block.layers, &shape)?;
        per_unit.push(cost.params);
        per_block.push(cost.params * block.units as u64);
        block_macs.push(cost.macs);
        shape = out;
        if let Some(router) = &block.router {
            let (mut rc, feat) = stack_cost(&router.transform, &shape)?;
            let hyper = [LayerSpec::Dense { units: config.blocks[l + 1].units }];
            let (hc, _) = stack_cost(&hyper, &feat)?;
            rc.params += hc.params;
            rc.macs += hc.macs;
            router_params.push(rc.params);
            router_macs.push(rc.macs);
        }
    }
    let (head, _) = stack_cost(&config.head, &shape)?;
    let total = per_block.iter().sum::<u64>() + router_params.iter().sum::<u64>() + head.params;
    let per_sample = block_macs.iter().sum::<u64>() + router_macs.iter().sum::<u64>() + head.macs;
    Ok((
        ParamReport { per_unit, per_block, routers: router_params, head: head.params, total },
        MacReport { per_block: block_macs, routers: router_macs, head: head.macs, per_sample },
    ))
}
