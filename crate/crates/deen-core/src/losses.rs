//! The four training losses: identity cross-entropy, batch-hard triplet,
//! center-guided pair mining over modality centers, and the orthogonality
//! penalty on generated branch embeddings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::ForwardBundle;
use crate::data::Modality;
use crate::error::{DeenError, Result};
use crate::tensor::{
    add, add_scalar, concat, cross_entropy, euclidean_distance, l2_normalize, mean_all, mean_rows,
    mul, pairwise_distances, relu, reshape, scale, select_elems, select_rows, sub, sum, Tensor,
};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    /// CPM loss coefficient.
    pub lambda1: f64,
    /// Orthogonal loss coefficient.
    pub lambda2: f64,
    /// CPM margin.
    pub alpha: f64,
    pub triplet_margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.8,
            lambda2: 0.1,
            alpha: 0.2,
            triplet_margin: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.alpha < 0.0 || self.triplet_margin < 0.0
        {
            return Err(DeenError::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// How the CPM hinge is reduced over identity pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CpmReduction {
    /// Arithmetic mean over all (branch, j, k != j) triples.
    MeanOverTriples,
    /// Per (branch, j): keep only the closest negative center k.
    HardestNegative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OrthoMode {
    /// Mean over samples of sum_{m<n} (normalized dot)^2; bounded in [0, B(B-1)/2].
    SquaredCosine,
    /// Raw inner products, exactly as written; unbounded below.
    Literal,
}

/// Per-identity, per-modality embedding centers for one batch.
pub struct CenterSet {
    /// Identities with original samples in both modalities, ascending.
    pub identities: Vec<usize>,
    /// Generated branch tags present (1..=B), ascending.
    pub branches: Vec<usize>,
    /// (identity, modality) -> center of original embeddings.
    pub original: BTreeMap<(usize, Modality), Tensor>,
    /// (branch, identity, modality) -> center of generated embeddings.
    pub generated: BTreeMap<(usize, usize, Modality), Tensor>,
    /// Identities dropped for having originals in only one modality.
    pub excluded: Vec<usize>,
}

/// Group the pooled embeddings into per-class, per-modality centers.
/// Centers are graph nodes, so gradients distribute 1/n to the members.
pub fn class_centers(
    pooled: &Tensor,
    identities: &[usize],
    modalities: &[Modality],
    branch_tags: &[usize],
) -> Result<CenterSet> {
    if pooled.shape().len() != 2 {
        return Err(DeenError::Dim(format!(
            "class_centers: N x D expected, got {:?}",
            pooled.shape()
        )));
    }
    let n = pooled.shape()[0];
    if identities.len() != n || modalities.len() != n || branch_tags.len() != n {
        return Err(DeenError::Contract(format!(
            "class_centers: {n} rows but {}/{}/{} labels",
            identities.len(),
            modalities.len(),
            branch_tags.len()
        )));
    }
    let mut groups: BTreeMap<(usize, usize, Modality), Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        groups
            .entry((branch_tags[i], identities[i], modalities[i]))
            .or_default()
            .push(i);
    }
    // eligibility is decided on the original embeddings
    let mut id_modalities: BTreeMap<usize, (bool, bool)> = BTreeMap::new();
    for (&(tag, id, m), _) in &groups {
        if tag == 0 {
            let e = id_modalities.entry(id).or_default();
            match m {
                Modality::Vis => e.0 = true,
                Modality::Ir => e.1 = true,
            }
        }
    }
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for (&id, &(v, ir)) in &id_modalities {
        if v && ir {
            kept.push(id);
        } else {
            excluded.push(id);
        }
    }
    let mut branches: Vec<usize> = groups
        .keys()
        .map(|&(tag, _, _)| tag)
        .filter(|&t| t > 0)
        .collect();
    branches.sort_unstable();
    branches.dedup();

    let mut original = BTreeMap::new();
    let mut generated = BTreeMap::new();
    for (&(tag, id, m), rows) in &groups {
        if !kept.contains(&id) {
            continue;
        }
        let center = mean_rows(pooled, rows)?;
        if tag == 0 {
            original.insert((id, m), center);
        } else {
            generated.insert((tag, id, m), center);
        }
    }
    Ok(CenterSet {
        identities: kept,
        branches,
        original,
        generated,
        excluded,
    })
}

fn hinge_mean(hinges: Vec<Tensor>) -> Result<Tensor> {
    if hinges.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    Ok(mean_all(&concat(&hinges, 0)?))
}

/// Center-guided pair mining loss: both modality directions summed.
pub fn cpm_loss(centers: &CenterSet, alpha: f64) -> Result<Tensor> {
    cpm_loss_with(centers, alpha, CpmReduction::MeanOverTriples)
}

pub fn cpm_loss_with(centers: &CenterSet, alpha: f64, reduction: CpmReduction) -> Result<Tensor> {
    if centers.identities.len() < 2 {
        return Err(DeenError::Protocol(format!(
            "cpm_loss: needs >= 2 identities with both modalities, got {}",
            centers.identities.len()
        )));
    }
    if centers.branches.is_empty() {
        return Err(DeenError::Protocol(
            "cpm_loss: no generated branch centers present".into(),
        ));
    }
    let mut total: Option<Tensor> = None;
    for direction in [Modality::Vis, Modality::Ir] {
        // "source" is the modality whose generated embeddings are constrained;
        // its generated centers are pulled toward the opposite modality.
        let opp = direction.opposite();
        let mut hinges = Vec::new();
        for &branch in &centers.branches {
            for &j in &centers.identities {
                let c_gen = centers
                    .generated
                    .get(&(branch, j, direction))
                    .ok_or_else(|| {
                        DeenError::Protocol(format!(
                            "cpm_loss: missing generated center (branch {branch}, id {j}, {})",
                            direction.as_str()
                        ))
                    })?;
                let c_same = &centers.original[&(j, direction)];
                let c_opp = &centers.original[&(j, opp)];
                let pull = euclidean_distance(c_opp, c_gen)?;
                let push = euclidean_distance(c_same, c_gen)?;
                let base = sub(&pull, &push)?;
                let mut pair_hinges = Vec::new();
                for &k in &centers.identities {
                    if k == j {
                        continue;
                    }
                    let inter = euclidean_distance(c_same, &centers.original[&(k, direction)])?;
                    pair_hinges.push(relu(&add_scalar(&sub(&base, &inter)?, alpha)));
                }
                match reduction {
                    CpmReduction::MeanOverTriples => hinges.extend(pair_hinges),
                    CpmReduction::HardestNegative => {
                        // hardest negative = largest hinge value
                        let best = pair_hinges
                            .into_iter()
                            .max_by(|a, b| a.item().partial_cmp(&b.item()).unwrap())
                            .unwrap();
                        hinges.push(best);
                    }
                }
            }
        }
        let dir_loss = hinge_mean(hinges)?;
        total = Some(match total {
            Some(t) => add(&t, &dir_loss)?,
            None => dir_loss,
        });
    }
    Ok(total.unwrap())
}

/// Mean distance between two sample sets (all cross pairs).
fn mean_set_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (na, nb) = (a.shape()[0], b.shape()[0]);
    let mut ds = Vec::with_capacity(na * nb);
    for i in 0..na {
        let ra = reshape(&select_rows(a, &[i])?, &[a.shape()[1]])?;
        for j in 0..nb {
            let rb = reshape(&select_rows(b, &[j])?, &[b.shape()[1]])?;
            ds.push(euclidean_distance(&ra, &rb)?);
        }
    }
    hinge_mean(ds)
}

/// Pre-center formulation evaluated on raw embeddings: set distances replace
/// the single-embedding distances, so singleton sets reduce to the center
/// form with zero margin. Provided for ablation parity; not part of the
/// default objective.
#[allow(clippy::too_many_arguments)]
pub fn cpm_loss_samplewise(
    vis: &Tensor,
    ir: &Tensor,
    vis_generated: &[(usize, Tensor)],
    ir_generated: &[(usize, Tensor)],
    vis_labels: &[usize],
    ir_labels: &[usize],
    gen_labels: &[usize],
    alpha: Option<f64>,
) -> Result<Tensor> {
    let margin = alpha.unwrap_or(0.0);
    let by_label = |labels: &[usize]| -> BTreeMap<usize, Vec<usize>> {
        let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            m.entry(l).or_default().push(i);
        }
        m
    };
    let vis_by = by_label(vis_labels);
    let ir_by = by_label(ir_labels);
    let gen_by = by_label(gen_labels);
    let ids: Vec<usize> = vis_by
        .keys()
        .filter(|id| ir_by.contains_key(id) && gen_by.contains_key(id))
        .copied()
        .collect();
    if ids.len() < 2 {
        return Err(DeenError::Protocol(
            "cpm_loss_samplewise: needs >= 2 identities in both modalities".into(),
        ));
    }
    let mut total: Option<Tensor> = None;
    for (same, opp, generated, same_by, opp_by) in [
        (vis, ir, vis_generated, &vis_by, &ir_by),
        (ir, vis, ir_generated, &ir_by, &vis_by),
    ] {
        let mut hinges = Vec::new();
        for (_branch, gen) in generated {
            for &j in &ids {
                let gen_rows = select_rows(gen, &gen_by[&j])?;
                let same_rows = select_rows(same, &same_by[&j])?;
                let opp_rows = select_rows(opp, &opp_by[&j])?;
                let pull = mean_set_distance(&opp_rows, &gen_rows)?;
                let push = mean_set_distance(&same_rows, &gen_rows)?;
                let base = sub(&pull, &push)?;
                for &k in &ids {
                    if k == j {
                        continue;
                    }
                    let other = select_rows(same, &same_by[&k])?;
                    let inter = mean_set_distance(&same_rows, &other)?;
                    hinges.push(relu(&add_scalar(&sub(&base, &inter)?, margin)));
                }
            }
        }
        let dir_loss = hinge_mean(hinges)?;
        total = Some(match total {
            Some(t) => add(&t, &dir_loss)?,
            None => dir_loss,
        });
    }
    Ok(total.unwrap())
}

/// Orthogonality penalty between branch embeddings of the same sample.
/// `branch_groups` holds, per original sample, the B branch vectors as rows
/// of a B x D tensor.
pub fn orthogonal_loss(branch_groups: &[Tensor], mode: OrthoMode) -> Result<Tensor> {
    if branch_groups.is_empty() {
        return Err(DeenError::Protocol("orthogonal_loss: no branch groups".into()));
    }
    let b = branch_groups[0].shape()[0];
    if b < 2 {
        return Err(DeenError::Protocol(format!(
            "orthogonal_loss: needs >= 2 branches, got {b}"
        )));
    }
    let mut per_sample = Vec::with_capacity(branch_groups.len());
    for group in branch_groups {
        if group.shape().len() != 2 || group.shape()[0] != b {
            return Err(DeenError::Dim(format!(
                "orthogonal_loss: group shape {:?}, expected [{b}, D]",
                group.shape()
            )));
        }
        let basis = match mode {
            // a zero-norm vector normalizes to ~0 and contributes nothing
            OrthoMode::SquaredCosine => l2_normalize(group, 1)?,
            OrthoMode::Literal => group.clone(),
        };
        let mut acc: Option<Tensor> = None;
        for m in 0..b {
            let um = select_rows(&basis, &[m])?;
            for nn in m + 1..b {
                let un = select_rows(&basis, &[nn])?;
                let dot = sum(&mul(&um, &un)?);
                let term = match mode {
                    OrthoMode::SquaredCosine => mul(&dot, &dot)?,
                    OrthoMode::Literal => dot,
                };
                acc = Some(match acc {
                    Some(a) => add(&a, &term)?,
                    None => term,
                });
            }
        }
        per_sample.push(acc.unwrap());
    }
    hinge_mean(per_sample)
}

/// Batch-hard triplet loss: per anchor, hardest positive minus hardest
/// negative plus margin, hinged and averaged.
pub fn batch_hard_triplet(pooled: &Tensor, labels: &[usize], margin: f64) -> Result<Tensor> {
    if pooled.shape().len() != 2 {
        return Err(DeenError::Dim(format!(
            "batch_hard_triplet: N x D expected, got {:?}",
            pooled.shape()
        )));
    }
    let n = pooled.shape()[0];
    if labels.len() != n {
        return Err(DeenError::Contract(format!(
            "batch_hard_triplet: {n} rows but {} labels",
            labels.len()
        )));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(DeenError::Protocol(
            "batch_hard_triplet: needs >= 2 identities in the batch".into(),
        ));
    }
    if let Some((&id, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(DeenError::Protocol(format!(
            "batch_hard_triplet: identity {id} has fewer than 2 samples"
        )));
    }
    let dist = pairwise_distances(pooled)?;
    let dv = dist.values();
    let mut hard_pos = Vec::with_capacity(n);
    let mut hard_neg = Vec::with_capacity(n);
    for i in 0..n {
        let mut best_pos = (0usize, f64::NEG_INFINITY);
        let mut best_neg = (0usize, f64::INFINITY);
        for j in 0..n {
            if j == i {
                continue;
            }
            let d = dv[i * n + j];
            if labels[j] == labels[i] {
                if d > best_pos.1 {
                    best_pos = (j, d);
                }
            } else if d < best_neg.1 {
                best_neg = (j, d);
            }
        }
        hard_pos.push(i * n + best_pos.0);
        hard_neg.push(i * n + best_neg.0);
    }
    let pos = select_elems(&dist, &hard_pos)?;
    let neg = select_elems(&dist, &hard_neg)?;
    Ok(mean_all(&relu(&add_scalar(&sub(&pos, &neg)?, margin))))
}

/// Identity cross-entropy over classifier logits.
pub fn identity_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    cross_entropy(logits, labels)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub triplet: f64,
    pub cpm: f64,
    pub orthogonal: f64,
    pub total: f64,
}

/// L_total = L_ce + L_tri + lambda1 * L_cpm + lambda2 * L_ort.
///
/// CE and triplet consume every sample (originals and generated copies, with
/// replicated labels); CPM consumes the batch centers; the orthogonality term
/// consumes per-sample branch groups. When no generated branches are present
/// the CPM and orthogonal terms are zero only if their weights are zero.
pub fn total_loss(bundle: &ForwardBundle, weights: &LossWeights) -> Result<(Tensor, LossBreakdown)> {
    weights.validate()?;
    let labels = &bundle.identity_of_sample;
    let ce = identity_cross_entropy(&bundle.logits, labels)?;
    let tri = batch_hard_triplet(&bundle.pooled_pre_bn, labels, weights.triplet_margin)?;

    let has_branches = bundle.branch_of_sample.iter().any(|&t| t > 0);
    let cpm = if weights.lambda1 > 0.0 {
        if !has_branches {
            return Err(DeenError::Protocol(
                "total_loss: lambda1 > 0 but the bundle has no generated branches".into(),
            ));
        }
        let centers = class_centers(
            &bundle.pooled_pre_bn,
            labels,
            &bundle.modality_of_sample,
            &bundle.branch_of_sample,
        )?;
        cpm_loss(&centers, weights.alpha)?
    } else {
        Tensor::scalar(0.0)
    };

    let ort = if weights.lambda2 > 0.0 {
        if !has_branches {
            return Err(DeenError::Protocol(
                "total_loss: lambda2 > 0 but the bundle has no generated branches".into(),
            ));
        }
        let groups = branch_groups(bundle)?;
        orthogonal_loss(&groups, OrthoMode::SquaredCosine)?
    } else {
        Tensor::scalar(0.0)
    };

    let total = add(
        &add(&ce, &tri)?,
        &add(&scale(&cpm, weights.lambda1), &scale(&ort, weights.lambda2))?,
    )?;
    let breakdown = LossBreakdown {
        ce: ce.item(),
        triplet: tri.item(),
        cpm: cpm.item(),
        orthogonal: ort.item(),
        total: total.item(),
    };
    Ok((total, breakdown))
}

/// Rows of the generated copies of each original sample, one B x D tensor per
/// original sample.
pub fn branch_groups(bundle: &ForwardBundle) -> Result<Vec<Tensor>> {
    let tags = &bundle.branch_of_sample;
    let mut by_tag: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &t) in tags.iter().enumerate() {
        by_tag.entry(t).or_default().push(i);
    }
    let n_orig = by_tag.get(&0).map(|v| v.len()).unwrap_or(0);
    let branches: Vec<&Vec<usize>> = by_tag
        .iter()
        .filter(|(&t, _)| t > 0)
        .map(|(_, v)| v)
        .collect();
    if branches.iter().any(|v| v.len() != n_orig) {
        return Err(DeenError::Contract(
            "branch_groups: branch copies do not align with originals".into(),
        ));
    }
    let mut groups = Vec::with_capacity(n_orig);
    for s in 0..n_orig {
        let rows: Vec<usize> = branches.iter().map(|v| v[s]).collect();
        groups.push(select_rows(&bundle.pooled_pre_bn, &rows)?);
    }
    Ok(groups)
}
