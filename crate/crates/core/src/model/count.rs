//! Closed-form parameter and operation counts.
//!
//! Operations are counted as multiply-accumulates of convolutions, matrix
//! products, attention scores and weighted sums, and kNN distances.
//! Normalizations, activations, pooling and elementwise arithmetic are free.
//! The same quantities are reported at runtime by [`crate::Tape::macs`].

use serde::{Deserialize, Serialize};

use super::{Architecture, ModelConfig};
use crate::error::Result;
use crate::layers::StageGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopConvention {
    /// One multiply-accumulate is one operation.
    #[default]
    MultiplyAccumulate,
    /// One multiply-accumulate is two operations.
    TwoPerMac,
}

/// Exact number of learnable scalars.
pub fn count_params(config: &ModelConfig) -> Result<u64> {
    let arch = Architecture::new(config)?;
    let mut total = arch.stem.param_count() + arch.head.param_count();
    for stage in &arch.stages {
        total += stage.downsample.as_ref().map_or(0, |d| d.param_count());
        total += stage.irbs.iter().map(|b| b.param_count()).sum::<usize>();
        total += stage.graphers.iter().map(|g| g.param_count()).sum::<usize>();
    }
    Ok(total as u64)
}

/// Multiply-accumulates of one `height × width` image.
pub fn count_macs(config: &ModelConfig, height: usize, width: usize) -> Result<u64> {
    let arch = Architecture::new(config)?;
    let grids = config.stage_grids(height, width);
    let mut total = arch.stem.macs(1, height, width);
    let mut prev = grids[0];
    for (stage, &(h, w)) in arch.stages.iter().zip(&grids) {
        if let Some(d) = &stage.downsample {
            total += d.macs(1, prev.0, prev.1);
        }
        total += stage.irbs.iter().map(|b| b.macs(1, h, w)).sum::<u64>();
        let graph = StageGraph::new(config.graph, h, w)?;
        total += stage.graphers.iter().map(|g| g.macs(1, &graph)).sum::<u64>();
        prev = (h, w);
    }
    Ok(total + arch.head.macs(1))
}

/// Operations of one square `resolution × resolution` image.
pub fn count_flops(config: &ModelConfig, resolution: usize) -> Result<u64> {
    count_flops_with(config, resolution, resolution, FlopConvention::default())
}

pub fn count_flops_with(config: &ModelConfig, height: usize, width: usize, convention: FlopConvention) -> Result<u64> {
    let macs = count_macs(config, height, width)?;
    Ok(match convention {
        FlopConvention::MultiplyAccumulate => macs,
        FlopConvention::TwoPerMac => 2 * macs,
    })
}
