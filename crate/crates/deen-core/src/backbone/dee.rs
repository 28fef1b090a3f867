//! Diverse embedding expansion: a multi-branch convolutional generator that
//! produces extra embeddings from one feature map.

use crate::error::{DeenError, Result};
use crate::tensor::{add, concat, conv2d, relu, scale, Tensor};

/// Weights for one DEE branch: three dilated 3x3 convolutions (each C -> C/4,
/// dilation 1/2/3) and a 1x1 projection back to C channels.
pub struct DeeBranch {
    pub phi: [Tensor; 3],
    pub theta: Tensor,
}

pub struct DeeWeights {
    pub branches: Vec<DeeBranch>,
}

/// One generated feature map per branch, each shaped like the input.
pub fn dee_forward(f: &Tensor, weights: &DeeWeights) -> Result<Vec<Tensor>> {
    let c = f
        .shape()
        .get(1)
        .copied()
        .ok_or_else(|| DeenError::Dim(format!("dee_forward: NCHW expected, got {:?}", f.shape())))?;
    if c % 4 != 0 {
        return Err(DeenError::Config(format!(
            "dee_forward: channel count {c} not divisible by 4"
        )));
    }
    let mut outputs = Vec::with_capacity(weights.branches.len());
    for branch in &weights.branches {
        // padding == dilation keeps the 3x3 output spatially aligned with f
        let mut acc = conv2d(f, &branch.phi[0], 1, 1, 1)?;
        for (d, phi) in [(2usize, &branch.phi[1]), (3usize, &branch.phi[2])] {
            acc = add(&acc, &conv2d(f, phi, 1, d, d)?)?;
        }
        // average the dilation paths so the bottleneck keeps unit scale
        let acc = scale(&acc, 1.0 / 3.0);
        let out = conv2d(&relu(&acc), &branch.theta, 1, 0, 1)?;
        debug_assert_eq!(out.shape(), f.shape());
        outputs.push(out);
    }
    Ok(outputs)
}

/// Stack the original batch and every generated branch along the sample axis,
/// replicating per-sample labels. Branch tags: 0 = original, 1..=B = branch.
pub fn dee_expand_batch(
    f: &Tensor,
    labels: &[usize],
    modalities: &[crate::data::Modality],
    weights: &DeeWeights,
) -> Result<(Tensor, Vec<usize>, Vec<crate::data::Modality>, Vec<usize>)> {
    let n = f.shape()[0];
    assert_eq!(labels.len(), n);
    assert_eq!(modalities.len(), n);
    let generated = dee_forward(f, weights)?;
    let mut parts = vec![f.clone()];
    parts.extend(generated);
    let expanded = concat(&parts, 0)?;
    let copies = 1 + weights.branches.len();
    let mut out_labels = Vec::with_capacity(n * copies);
    let mut out_modalities = Vec::with_capacity(n * copies);
    let mut tags = Vec::with_capacity(n * copies);
    for tag in 0..copies {
        out_labels.extend_from_slice(labels);
        out_modalities.extend_from_slice(modalities);
        tags.extend(std::iter::repeat(tag).take(n));
    }
    Ok((expanded, out_labels, out_modalities, tags))
}
