//! Multistage feature aggregation: channel-wise attention over compact
//! embeddings of a stage's input and output, followed by the spatial analog.
//! Output projections initialized to zero make the block an exact identity.

use crate::error::{DeenError, Result};
use crate::tensor::{
    adaptive_avg_pool, add, bmm, conv2d, reshape, softmax, transpose12, Tensor,
};

pub struct MfaWeights {
    pub psi1_q: Tensor,
    pub psi1_k: Tensor,
    pub psi1_v: Tensor,
    pub omega_c: Tensor,
    pub psi2_q: Tensor,
    pub psi2_k: Tensor,
    pub psi2_v: Tensor,
    pub omega_s: Tensor,
}

pub struct MfaOutputs {
    /// Aggregated feature map, shaped like the high-level input.
    pub output: Tensor,
    /// Channel similarity matrix, N x C' x C'; rows are probability vectors.
    pub m_channel: Tensor,
    /// Spatial similarity matrix, N x S x S; rows are probability vectors.
    pub m_spatial: Tensor,
}

pub fn mfa_forward(f_l: &Tensor, f_h: &Tensor, weights: &MfaWeights) -> Result<MfaOutputs> {
    let (sl, sh) = (f_l.shape(), f_h.shape());
    if sl.len() != 4 || sh.len() != 4 || sl[0] != sh[0] {
        return Err(DeenError::Dim(format!(
            "mfa_forward: NCHW pair expected, got {sl:?} and {sh:?}"
        )));
    }
    if sl[2] < sh[2] || sl[3] < sh[3] {
        return Err(DeenError::Config(format!(
            "mfa_forward: low-level spatial size {}x{} smaller than high-level {}x{}",
            sl[2], sl[3], sh[2], sh[3]
        )));
    }
    let (n, _c_h, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let s = h * w;
    let c_prime = weights.psi1_q.shape()[0];

    // token counts must agree for the similarity products, so the low-level
    // map is average-pooled to the high-level spatial size first
    let pooled = adaptive_avg_pool(f_l, h, w)?;

    // channel path
    let q = reshape(&conv2d(f_h, &weights.psi1_q, 1, 0, 1)?, &[n, c_prime, s])?;
    let k = reshape(&conv2d(&pooled, &weights.psi1_k, 1, 0, 1)?, &[n, c_prime, s])?;
    let v = reshape(&conv2d(&pooled, &weights.psi1_v, 1, 0, 1)?, &[n, c_prime, s])?;
    let m_channel = softmax(&bmm(&q, &transpose12(&k)?)?, 2)?;
    let agg_c = reshape(&bmm(&m_channel, &v)?, &[n, c_prime, h, w])?;
    let f_h_c = add(&conv2d(&agg_c, &weights.omega_c, 1, 0, 1)?, f_h)?;

    // spatial path: queries come from the channel-aggregated map
    let q2 = reshape(&conv2d(&f_h_c, &weights.psi2_q, 1, 0, 1)?, &[n, c_prime, s])?;
    let k2 = reshape(&conv2d(&pooled, &weights.psi2_k, 1, 0, 1)?, &[n, c_prime, s])?;
    let v2 = reshape(&conv2d(&pooled, &weights.psi2_v, 1, 0, 1)?, &[n, c_prime, s])?;
    let m_spatial = softmax(&bmm(&transpose12(&q2)?, &k2)?, 2)?;
    let agg_s = transpose12(&bmm(&m_spatial, &transpose12(&v2)?)?)?;
    let agg_s = reshape(&agg_s, &[n, c_prime, h, w])?;
    let output = add(&conv2d(&agg_s, &weights.omega_s, 1, 0, 1)?, &f_h_c)?;

    Ok(MfaOutputs {
        output,
        m_channel,
        m_spatial,
    })
}
