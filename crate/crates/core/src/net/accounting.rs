//! Parameter and FLOP accounting.
//!
//! One multiply-accumulate counts as 2 FLOPs; activations, pooling and the
//! input difference are not counted.

use super::{LayerKind, NetworkSpec, ParameterSet};
use crate::error::Result;
use crate::tensor::Real;

/// Total (or exactly-nonzero) entries across every weight and bias tensor.
pub fn count_params<T: Real>(params: &ParameterSet<T>, nonzero_only: bool) -> u64 {
    params
        .tensors()
        .iter()
        .map(|t| {
            if nonzero_only {
                t.count_nonzero() as u64
            } else {
                t.len() as u64
            }
        })
        .sum()
}

/// FLOPs of each layer for one branch evaluation of a single patch pair.
pub fn layer_flops(spec: &NetworkSpec) -> Result<Vec<u64>> {
    let extents = spec.conv_extents()?;
    Ok(spec
        .layers
        .iter()
        .zip(extents)
        .map(|(layer, extent)| {
            let (cin, cout) = (layer.in_channels as u64, layer.out_channels as u64);
            match (layer.kind, extent) {
                (LayerKind::Conv2d { kernel, .. }, Some(e)) => {
                    let k = kernel as u64;
                    2 * k * k * cin * cout * (e.out_height * e.out_width) as u64
                }
                _ => 2 * cin * cout,
            }
        })
        .collect())
}

/// FLOPs for scoring one `(reference, distorted)` patch.
pub fn count_flops(spec: &NetworkSpec) -> Result<u64> {
    Ok(layer_flops(spec)?.iter().sum())
}
