//! Forward operations and their gradient rules.
//!
//! Shapes are checked eagerly; no implicit broadcasting except bias-add and
//! per-channel affine, so wiring mistakes surface as dimension errors.

use std::cell::RefCell;

use crate::error::{DeenError, Result};

use super::{Inner, Tensor};

/// Inside-sqrt epsilon for Euclidean distances; keeps the gradient defined
/// at coincident points. The sqrt of the floor is subtracted from the forward
/// value so that coincident points measure exactly zero.
pub const DIST_EPS: f64 = 1e-12;

fn dist_floor() -> f64 {
    DIST_EPS.sqrt()
}

fn dim_err(msg: String) -> DeenError {
    DeenError::Dim(msg)
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

pub fn relu(x: &Tensor) -> Tensor {
    let values = x.values().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_op(
        x.shape().to_vec(),
        values,
        vec![x.clone()],
        Box::new(|node: &Inner, g: &[f64]| {
            let x = &node.parents[0].inner.values;
            vec![g
                .iter()
                .zip(x.iter())
                .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                .collect()]
        }),
    )
}

pub fn add(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.shape() != y.shape() {
        return Err(dim_err(format!(
            "add: shapes {:?} and {:?} differ",
            x.shape(),
            y.shape()
        )));
    }
    let values = x
        .values()
        .iter()
        .zip(y.values())
        .map(|(a, b)| a + b)
        .collect();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        values,
        vec![x.clone(), y.clone()],
        Box::new(|_node, g| vec![g.to_vec(), g.to_vec()]),
    ))
}

pub fn sub(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.shape() != y.shape() {
        return Err(dim_err(format!(
            "sub: shapes {:?} and {:?} differ",
            x.shape(),
            y.shape()
        )));
    }
    let values = x
        .values()
        .iter()
        .zip(y.values())
        .map(|(a, b)| a - b)
        .collect();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        values,
        vec![x.clone(), y.clone()],
        Box::new(|_node, g| vec![g.to_vec(), g.iter().map(|v| -v).collect()]),
    ))
}

pub fn mul(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.shape() != y.shape() {
        return Err(dim_err(format!(
            "mul: shapes {:?} and {:?} differ",
            x.shape(),
            y.shape()
        )));
    }
    let values = x
        .values()
        .iter()
        .zip(y.values())
        .map(|(a, b)| a * b)
        .collect();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        values,
        vec![x.clone(), y.clone()],
        Box::new(|node: &Inner, g| {
            let x = &node.parents[0].inner.values;
            let y = &node.parents[1].inner.values;
            vec![
                g.iter().zip(y.iter()).map(|(gi, yi)| gi * yi).collect(),
                g.iter().zip(x.iter()).map(|(gi, xi)| gi * xi).collect(),
            ]
        }),
    ))
}

pub fn scale(x: &Tensor, a: f64) -> Tensor {
    let values = x.values().iter().map(|v| v * a).collect();
    Tensor::from_op(
        x.shape().to_vec(),
        values,
        vec![x.clone()],
        Box::new(move |_node, g| vec![g.iter().map(|v| v * a).collect()]),
    )
}

pub fn add_scalar(x: &Tensor, a: f64) -> Tensor {
    let values = x.values().iter().map(|v| v + a).collect();
    Tensor::from_op(
        x.shape().to_vec(),
        values,
        vec![x.clone()],
        Box::new(|_node, g| vec![g.to_vec()]),
    )
}

pub fn sum(x: &Tensor) -> Tensor {
    let s: f64 = x.values().iter().sum();
    let n = x.numel();
    Tensor::from_op(
        vec![1],
        vec![s],
        vec![x.clone()],
        Box::new(move |_node, g| vec![vec![g[0]; n]]),
    )
}

pub fn mean_all(x: &Tensor) -> Tensor {
    let n = x.numel();
    let s: f64 = x.values().iter().sum();
    Tensor::from_op(
        vec![1],
        vec![s / n as f64],
        vec![x.clone()],
        Box::new(move |_node, g| vec![vec![g[0] / n as f64; n]]),
    )
}

// ---------------------------------------------------------------------------
// shape manipulation
// ---------------------------------------------------------------------------

pub fn reshape(x: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
    let numel: usize = new_shape.iter().product();
    if numel != x.numel() {
        return Err(dim_err(format!(
            "reshape: {:?} -> {:?} changes element count",
            x.shape(),
            new_shape
        )));
    }
    Ok(Tensor::from_op(
        new_shape.to_vec(),
        x.values().to_vec(),
        vec![x.clone()],
        Box::new(|_node, g| vec![g.to_vec()]),
    ))
}

pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(dim_err("concat: empty input list".into()));
    }
    let first = parts[0].shape();
    if axis >= first.len() {
        return Err(dim_err(format!(
            "concat: axis {axis} out of range for rank {}",
            first.len()
        )));
    }
    for p in parts.iter().skip(1) {
        if p.shape().len() != first.len()
            || p.shape()
                .iter()
                .zip(first)
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(dim_err(format!(
                "concat: shape {:?} incompatible with {:?} on axis {axis}",
                p.shape(),
                first
            )));
        }
    }
    let mut out_shape = first.to_vec();
    out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let axis_sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    let out_axis: usize = axis_sizes.iter().sum();

    let mut values = vec![0.0; outer * out_axis * inner];
    let mut offset = 0usize;
    for (p, &asz) in parts.iter().zip(&axis_sizes) {
        let pv = p.values();
        for o in 0..outer {
            let src = o * asz * inner;
            let dst = (o * out_axis + offset) * inner;
            values[dst..dst + asz * inner].copy_from_slice(&pv[src..src + asz * inner]);
        }
        offset += asz;
    }
    Ok(Tensor::from_op(
        out_shape,
        values,
        parts.to_vec(),
        Box::new(move |node: &Inner, g| {
            let mut grads = Vec::with_capacity(node.parents.len());
            let mut offset = 0usize;
            for (p, &asz) in node.parents.iter().zip(&axis_sizes) {
                let mut pg = vec![0.0; p.numel()];
                for o in 0..outer {
                    let dst = o * asz * inner;
                    let src = (o * out_axis + offset) * inner;
                    pg[dst..dst + asz * inner].copy_from_slice(&g[src..src + asz * inner]);
                }
                grads.push(pg);
                offset += asz;
            }
            grads
        }),
    ))
}

/// Gather rows of a 2-D tensor; duplicated indices accumulate gradient.
pub fn select_rows(x: &Tensor, indices: &[usize]) -> Result<Tensor> {
    if x.shape().len() != 2 {
        return Err(dim_err(format!("select_rows: rank-2 expected, got {:?}", x.shape())));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(dim_err(format!("select_rows: index {bad} out of range {n}")));
    }
    let mut values = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        values.extend_from_slice(&x.values()[i * d..(i + 1) * d]);
    }
    let idx = indices.to_vec();
    Ok(Tensor::from_op(
        vec![indices.len(), d],
        values,
        vec![x.clone()],
        Box::new(move |node: &Inner, g| {
            let mut pg = vec![0.0; node.parents[0].numel()];
            for (k, &i) in idx.iter().enumerate() {
                for j in 0..d {
                    pg[i * d + j] += g[k * d + j];
                }
            }
            vec![pg]
        }),
    ))
}

/// Gather individual elements by flat index.
pub fn select_elems(x: &Tensor, flat_indices: &[usize]) -> Result<Tensor> {
    let n = x.numel();
    if let Some(&bad) = flat_indices.iter().find(|&&i| i >= n) {
        return Err(dim_err(format!("select_elems: index {bad} out of range {n}")));
    }
    let values = flat_indices.iter().map(|&i| x.values()[i]).collect();
    let idx = flat_indices.to_vec();
    Ok(Tensor::from_op(
        vec![flat_indices.len()],
        values,
        vec![x.clone()],
        Box::new(move |node: &Inner, g| {
            let mut pg = vec![0.0; node.parents[0].numel()];
            for (k, &i) in idx.iter().enumerate() {
                pg[i] += g[k];
            }
            vec![pg]
        }),
    ))
}

/// Mean of the selected rows of an N×D tensor; result is a D-vector.
pub fn mean_rows(x: &Tensor, indices: &[usize]) -> Result<Tensor> {
    if indices.is_empty() {
        return Err(DeenError::Contract("mean_rows: empty index set".into()));
    }
    let rows = select_rows(x, indices)?;
    let d = x.shape()[1];
    let k = indices.len() as f64;
    let mut values = vec![0.0; d];
    for r in 0..indices.len() {
        for j in 0..d {
            values[j] += rows.values()[r * d + j] / k;
        }
    }
    let nrows = indices.len();
    Ok(Tensor::from_op(
        vec![d],
        values,
        vec![rows],
        Box::new(move |_node, g| {
            let mut pg = vec![0.0; nrows * d];
            for r in 0..nrows {
                for j in 0..d {
                    pg[r * d + j] = g[j] / k;
                }
            }
            vec![pg]
        }),
    ))
}

// ---------------------------------------------------------------------------
// normalization / distances
// ---------------------------------------------------------------------------

pub fn l2_normalize(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    if axis >= shape.len() {
        return Err(dim_err(format!("l2_normalize: axis {axis} out of range")));
    }
    let alen = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let xv = x.values();
    let mut values = vec![0.0; xv.len()];
    let mut norms = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let mut sq = DIST_EPS;
            for a in 0..alen {
                let v = xv[(o * alen + a) * inner + i];
                sq += v * v;
            }
            let nrm = sq.sqrt();
            norms[o * inner + i] = nrm;
            for a in 0..alen {
                let idx = (o * alen + a) * inner + i;
                values[idx] = xv[idx] / nrm;
            }
        }
    }
    let y = values.clone();
    Ok(Tensor::from_op(
        shape,
        values,
        vec![x.clone()],
        Box::new(move |_node, g| {
            let mut pg = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let nrm = norms[o * inner + i];
                    let mut dot = 0.0;
                    for a in 0..alen {
                        let idx = (o * alen + a) * inner + i;
                        dot += y[idx] * g[idx];
                    }
                    for a in 0..alen {
                        let idx = (o * alen + a) * inner + i;
                        pg[idx] = (g[idx] - y[idx] * dot) / nrm;
                    }
                }
            }
            vec![pg]
        }),
    ))
}

/// sqrt(Σ(uᵢ−vᵢ)² + εd) as a scalar tensor.
pub fn euclidean_distance(u: &Tensor, v: &Tensor) -> Result<Tensor> {
    if u.numel() != v.numel() {
        return Err(dim_err(format!(
            "euclidean_distance: lengths {} and {} differ",
            u.numel(),
            v.numel()
        )));
    }
    let mut sq = DIST_EPS;
    for (a, b) in u.values().iter().zip(v.values()) {
        sq += (a - b) * (a - b);
    }
    let d = sq.sqrt();
    Ok(Tensor::from_op(
        vec![1],
        vec![d - dist_floor()],
        vec![u.clone(), v.clone()],
        Box::new(move |node: &Inner, g| {
            let u = &node.parents[0].inner.values;
            let v = &node.parents[1].inner.values;
            let c = g[0] / d;
            let du: Vec<f64> = u.iter().zip(v.iter()).map(|(a, b)| c * (a - b)).collect();
            let dv: Vec<f64> = du.iter().map(|x| -x).collect();
            vec![du, dv]
        }),
    ))
}

/// All pairwise Euclidean distances between the rows of an N×D matrix.
pub fn pairwise_distances(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 {
        return Err(dim_err(format!(
            "pairwise_distances: rank-2 expected, got {:?}",
            x.shape()
        )));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let xv = x.values();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut sq = DIST_EPS;
            for k in 0..d {
                let diff = xv[i * d + k] - xv[j * d + k];
                sq += diff * diff;
            }
            dist[i * n + j] = sq.sqrt();
        }
    }
    let values: Vec<f64> = dist.iter().map(|&v| v - dist_floor()).collect();
    Ok(Tensor::from_op(
        vec![n, n],
        values,
        vec![x.clone()],
        Box::new(move |node: &Inner, g| {
            let xv = &node.parents[0].inner.values;
            let mut pg = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..n {
                    let gij = g[i * n + j];
                    if gij == 0.0 {
                        continue;
                    }
                    let c = gij / dist[i * n + j];
                    for k in 0..d {
                        let diff = xv[i * d + k] - xv[j * d + k];
                        pg[i * d + k] += c * diff;
                        pg[j * d + k] -= c * diff;
                    }
                }
            }
            vec![pg]
        }),
    ))
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if x.shape().len() != 2 || w.shape().len() != 2 || x.shape()[1] != w.shape()[0] {
        return Err(dim_err(format!(
            "linear: {:?} x {:?} inner dims disagree",
            x.shape(),
            w.shape()
        )));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let m = w.shape()[1];
    if let Some(b) = bias {
        if b.shape() != [m] {
            return Err(dim_err(format!(
                "linear: bias shape {:?}, expected [{m}]",
                b.shape()
            )));
        }
    }
    let xv = x.values();
    let wv = w.values();
    let mut values = vec![0.0; n * m];
    for i in 0..n {
        for k in 0..d {
            let xik = xv[i * d + k];
            if xik == 0.0 {
                continue;
            }
            for j in 0..m {
                values[i * m + j] += xik * wv[k * m + j];
            }
        }
    }
    if let Some(b) = bias {
        for i in 0..n {
            for j in 0..m {
                values[i * m + j] += b.values()[j];
            }
        }
    }
    let mut parents = vec![x.clone(), w.clone()];
    let has_bias = bias.is_some();
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(
        vec![n, m],
        values,
        parents,
        Box::new(move |node: &Inner, g| {
            let xv = &node.parents[0].inner.values;
            let wv = &node.parents[1].inner.values;
            let mut dx = vec![0.0; n * d];
            let mut dw = vec![0.0; d * m];
            for i in 0..n {
                for j in 0..m {
                    let gij = g[i * m + j];
                    if gij == 0.0 {
                        continue;
                    }
                    for k in 0..d {
                        dx[i * d + k] += gij * wv[k * m + j];
                        dw[k * m + j] += gij * xv[i * d + k];
                    }
                }
            }
            let mut grads = vec![dx, dw];
            if has_bias {
                let mut db = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        db[j] += g[i * m + j];
                    }
                }
                grads.push(db);
            }
            grads
        }),
    ))
}

/// Batched matrix multiply: (B,n,m) × (B,m,p) → (B,n,p).
pub fn bmm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
        return Err(dim_err(format!("bmm: {sa:?} x {sb:?} incompatible")));
    }
    let (bt, n, m, p) = (sa[0], sa[1], sa[2], sb[2]);
    let av = a.values();
    let bv = b.values();
    let mut values = vec![0.0; bt * n * p];
    for t in 0..bt {
        let ao = t * n * m;
        let bo = t * m * p;
        let co = t * n * p;
        for i in 0..n {
            for k in 0..m {
                let aik = av[ao + i * m + k];
                if aik == 0.0 {
                    continue;
                }
                for j in 0..p {
                    values[co + i * p + j] += aik * bv[bo + k * p + j];
                }
            }
        }
    }
    Ok(Tensor::from_op(
        vec![bt, n, p],
        values,
        vec![a.clone(), b.clone()],
        Box::new(move |node: &Inner, g| {
            let av = &node.parents[0].inner.values;
            let bv = &node.parents[1].inner.values;
            let mut da = vec![0.0; bt * n * m];
            let mut db = vec![0.0; bt * m * p];
            for t in 0..bt {
                let ao = t * n * m;
                let bo = t * m * p;
                let co = t * n * p;
                for i in 0..n {
                    for j in 0..p {
                        let gij = g[co + i * p + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..m {
                            da[ao + i * m + k] += gij * bv[bo + k * p + j];
                            db[bo + k * p + j] += gij * av[ao + i * m + k];
                        }
                    }
                }
            }
            vec![da, db]
        }),
    ))
}

/// Swap the last two axes of a rank-3 tensor.
pub fn transpose12(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 3 {
        return Err(dim_err(format!("transpose12: rank-3 expected, got {:?}", x.shape())));
    }
    let (b, n, m) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xv = x.values();
    let mut values = vec![0.0; xv.len()];
    for t in 0..b {
        for i in 0..n {
            for j in 0..m {
                values[t * m * n + j * n + i] = xv[t * n * m + i * m + j];
            }
        }
    }
    Ok(Tensor::from_op(
        vec![b, m, n],
        values,
        vec![x.clone()],
        Box::new(move |_node, g| {
            let mut pg = vec![0.0; g.len()];
            for t in 0..b {
                for i in 0..n {
                    for j in 0..m {
                        pg[t * n * m + i * m + j] = g[t * m * n + j * n + i];
                    }
                }
            }
            vec![pg]
        }),
    ))
}

// ---------------------------------------------------------------------------
// convolution and pooling
// ---------------------------------------------------------------------------

/// 2-D cross-correlation, NCHW input and OCKK weight, square kernels.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<Tensor> {
    let si = input.shape();
    let sw = weight.shape();
    if si.len() != 4 || sw.len() != 4 {
        return Err(dim_err(format!("conv2d: NCHW/OCKK expected, got {si:?} and {sw:?}")));
    }
    if sw[2] != sw[3] {
        return Err(dim_err(format!("conv2d: non-square kernel {:?}", &sw[2..])));
    }
    if si[1] != sw[1] {
        return Err(dim_err(format!(
            "conv2d: input has {} channels, weight expects {}",
            si[1], sw[1]
        )));
    }
    if stride == 0 || dilation == 0 {
        return Err(DeenError::Contract("conv2d: stride/dilation must be >= 1".into()));
    }
    let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
    let (o, k) = (sw[0], sw[2]);
    let span = dilation * (k - 1) + 1;
    if h + 2 * padding < span || w + 2 * padding < span {
        return Err(dim_err(format!(
            "conv2d: padded input {}x{} smaller than dilated kernel span {span}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    let oh = (h + 2 * padding - span) / stride + 1;
    let ow = (w + 2 * padding - span) / stride + 1;

    let xv = input.values();
    let wv = weight.values();
    let mut values = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            let iy = (y * stride + ky * dilation) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (x * stride + kx * dilation) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += xv[((ni * c + ci) * h + iy as usize) * w + ix as usize]
                                    * wv[((oi * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    values[((ni * o + oi) * oh + y) * ow + x] = acc;
                }
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, o, oh, ow],
        values,
        vec![input.clone(), weight.clone()],
        Box::new(move |node: &Inner, g| {
            let xv = &node.parents[0].inner.values;
            let wv = &node.parents[1].inner.values;
            let mut dx = vec![0.0; n * c * h * w];
            let mut dw = vec![0.0; o * c * k * k];
            for ni in 0..n {
                for oi in 0..o {
                    for y in 0..oh {
                        for x in 0..ow {
                            let go = g[((ni * o + oi) * oh + y) * ow + x];
                            if go == 0.0 {
                                continue;
                            }
                            for ci in 0..c {
                                for ky in 0..k {
                                    let iy =
                                        (y * stride + ky * dilation) as isize - padding as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (x * stride + kx * dilation) as isize
                                            - padding as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let xi =
                                            ((ni * c + ci) * h + iy as usize) * w + ix as usize;
                                        let wi = ((oi * c + ci) * k + ky) * k + kx;
                                        dx[xi] += go * wv[wi];
                                        dw[wi] += go * xv[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![dx, dw]
        }),
    ))
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(dim_err(format!("global_avg_pool: NCHW expected, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = (h * w) as f64;
    let xv = x.values();
    let mut values = vec![0.0; n * c];
    for i in 0..n * c {
        let base = i * h * w;
        values[i] = xv[base..base + h * w].iter().sum::<f64>() / hw;
    }
    Ok(Tensor::from_op(
        vec![n, c],
        values,
        vec![x.clone()],
        Box::new(move |_node, g| {
            let mut pg = vec![0.0; n * c * h * w];
            for i in 0..n * c {
                let gi = g[i] / hw;
                for p in 0..h * w {
                    pg[i * h * w + p] = gi;
                }
            }
            vec![pg]
        }),
    ))
}

/// Adaptive average pooling to a target spatial size (requires H >= out_h).
pub fn adaptive_avg_pool(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(dim_err(format!("adaptive_avg_pool: NCHW expected, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(DeenError::Config(format!(
            "adaptive_avg_pool: target {out_h}x{out_w} invalid for input {h}x{w}"
        )));
    }
    let bin = |i: usize, len: usize, olen: usize| -> (usize, usize) {
        (i * len / olen, (i + 1) * len / olen)
    };
    let xv = x.values();
    let mut values = vec![0.0; n * c * out_h * out_w];
    for i in 0..n * c {
        for oy in 0..out_h {
            let (y0, y1) = bin(oy, h, out_h);
            for ox in 0..out_w {
                let (x0, x1) = bin(ox, w, out_w);
                let mut acc = 0.0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += xv[i * h * w + y * w + xx];
                    }
                }
                values[i * out_h * out_w + oy * out_w + ox] =
                    acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, c, out_h, out_w],
        values,
        vec![x.clone()],
        Box::new(move |_node, g| {
            let mut pg = vec![0.0; n * c * h * w];
            for i in 0..n * c {
                for oy in 0..out_h {
                    let (y0, y1) = bin(oy, h, out_h);
                    for ox in 0..out_w {
                        let (x0, x1) = bin(ox, w, out_w);
                        let share = g[i * out_h * out_w + oy * out_w + ox]
                            / ((y1 - y0) * (x1 - x0)) as f64;
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                pg[i * h * w + y * w + xx] += share;
                            }
                        }
                    }
                }
            }
            vec![pg]
        }),
    ))
}

// ---------------------------------------------------------------------------
// softmax / cross entropy
// ---------------------------------------------------------------------------

/// Numerically stable softmax along `axis` (max-subtraction per slice).
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    if axis >= shape.len() {
        return Err(dim_err(format!("softmax: axis {axis} out of range")));
    }
    let alen = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let xv = x.values();
    let mut values = vec![0.0; xv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let mut mx = f64::NEG_INFINITY;
            for a in 0..alen {
                mx = mx.max(xv[(o * alen + a) * inner + i]);
            }
            let mut z = 0.0;
            for a in 0..alen {
                let idx = (o * alen + a) * inner + i;
                let e = (xv[idx] - mx).exp();
                values[idx] = e;
                z += e;
            }
            for a in 0..alen {
                values[(o * alen + a) * inner + i] /= z;
            }
        }
    }
    let y = values.clone();
    Ok(Tensor::from_op(
        shape,
        values,
        vec![x.clone()],
        Box::new(move |_node, g| {
            let mut pg = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let mut dot = 0.0;
                    for a in 0..alen {
                        let idx = (o * alen + a) * inner + i;
                        dot += y[idx] * g[idx];
                    }
                    for a in 0..alen {
                        let idx = (o * alen + a) * inner + i;
                        pg[idx] = y[idx] * (g[idx] - dot);
                    }
                }
            }
            vec![pg]
        }),
    ))
}

/// Mean negative log softmax probability of the true class.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if logits.shape().len() != 2 {
        return Err(dim_err(format!(
            "cross_entropy: N x K logits expected, got {:?}",
            logits.shape()
        )));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(DeenError::Contract(format!(
            "cross_entropy: {n} rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(DeenError::Contract(format!(
            "cross_entropy: label {bad} out of range 0..{k}"
        )));
    }
    let lv = logits.values();
    let mut probs = vec![0.0; n * k];
    let mut loss = 0.0;
    for i in 0..n {
        let row = &lv[i * k..(i + 1) * k];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..k {
            let e = (row[j] - mx).exp();
            probs[i * k + j] = e;
            z += e;
        }
        for j in 0..k {
            probs[i * k + j] /= z;
        }
        loss += mx + z.ln() - row[labels[i]];
    }
    loss /= n as f64;
    let labels = labels.to_vec();
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        vec![logits.clone()],
        Box::new(move |_node, g| {
            let c = g[0] / n as f64;
            let mut pg = vec![0.0; n * k];
            for i in 0..n {
                for j in 0..k {
                    let indicator = if labels[i] == j { 1.0 } else { 0.0 };
                    pg[i * k + j] = c * (probs[i * k + j] - indicator);
                }
            }
            vec![pg]
        }),
    ))
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel batch normalization over NCHW input. Train mode normalizes by
/// batch statistics (population variance) and updates the running stats in
/// place with the given momentum; eval mode uses the running stats.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &RefCell<Vec<f64>>,
    running_var: &RefCell<Vec<f64>>,
    mode: BnMode,
    momentum: f64,
    epsilon: f64,
) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(dim_err(format!("batchnorm2d: NCHW expected, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(dim_err(format!(
            "batchnorm2d: scale/shift must be [{c}], got {:?}/{:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if running_mean.borrow().len() != c || running_var.borrow().len() != c {
        return Err(dim_err(format!("batchnorm2d: running stats must have length {c}")));
    }
    let m = n * h * w;
    if mode == BnMode::Train && m < 2 {
        return Err(DeenError::Contract(
            "batchnorm2d: train mode needs N*H*W >= 2 (degenerate batch)".into(),
        ));
    }
    let xv = x.values();
    let (mean, var) = match mode {
        BnMode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let mut acc = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    acc += xv[base..base + h * w].iter().sum::<f64>();
                }
                mean[ci] = acc / m as f64;
                let mut vacc = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for p in 0..h * w {
                        let d = xv[base + p] - mean[ci];
                        vacc += d * d;
                    }
                }
                var[ci] = vacc / m as f64;
            }
            {
                let mut rm = running_mean.borrow_mut();
                let mut rv = running_var.borrow_mut();
                for ci in 0..c {
                    rm[ci] = (1.0 - momentum) * rm[ci] + momentum * mean[ci];
                    rv[ci] = (1.0 - momentum) * rv[ci] + momentum * var[ci];
                }
            }
            (mean, var)
        }
        BnMode::Eval => (running_mean.borrow().clone(), running_var.borrow().clone()),
    };

    let mut xhat = vec![0.0; xv.len()];
    let mut values = vec![0.0; xv.len()];
    let gv = gamma.values();
    let bv = beta.values();
    for ni in 0..n {
        for ci in 0..c {
            let inv = 1.0 / (var[ci] + epsilon).sqrt();
            let base = (ni * c + ci) * h * w;
            for p in 0..h * w {
                let xh = (xv[base + p] - mean[ci]) * inv;
                xhat[base + p] = xh;
                values[base + p] = gv[ci] * xh + bv[ci];
            }
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + epsilon).sqrt()).collect();
    let train = mode == BnMode::Train;
    Ok(Tensor::from_op(
        s.to_vec(),
        values,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |node: &Inner, g| {
            let gv = &node.parents[1].inner.values;
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    for p in 0..h * w {
                        dgamma[ci] += g[base + p] * xhat[base + p];
                        dbeta[ci] += g[base + p];
                    }
                }
            }
            let mut dx = vec![0.0; n * c * h * w];
            if train {
                // dx = gamma*inv_std * (g - mean(g) - xhat*mean(g*xhat)) per channel
                for ci in 0..c {
                    let mg = dbeta[ci] / m as f64;
                    let mgx = dgamma[ci] / m as f64;
                    let coeff = gv[ci] * inv_std[ci];
                    for ni in 0..n {
                        let base = (ni * c + ci) * h * w;
                        for p in 0..h * w {
                            dx[base + p] =
                                coeff * (g[base + p] - mg - xhat[base + p] * mgx);
                        }
                    }
                }
            } else {
                for ci in 0..c {
                    let coeff = gv[ci] * inv_std[ci];
                    for ni in 0..n {
                        let base = (ni * c + ci) * h * w;
                        for p in 0..h * w {
                            dx[base + p] = coeff * g[base + p];
                        }
                    }
                }
            }
            vec![dx, dgamma, dbeta]
        }),
    ))
}
