//! Cross-modality retrieval evaluation: CMC / mAP scoring, the repeated
//! random-gallery protocol, and feature extraction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Model;
use crate::data::{Modality, SampleRecord};
use crate::error::{DeenError, Result};
use crate::tensor::{concat, Tensor};
use crate::trainer::resize_bilinear;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// VIS queries against an IR gallery.
    VisToIr,
    /// IR queries against a VIS gallery.
    IrToVis,
}

impl Direction {
    pub fn query_modality(&self) -> Modality {
        match self {
            Direction::VisToIr => Modality::Vis,
            Direction::IrToVis => Modality::Ir,
        }
    }

    pub fn gallery_modality(&self) -> Modality {
        self.query_modality().opposite()
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::VisToIr => "vis-to-ir",
            Direction::IrToVis => "ir-to-vis",
        }
    }

    pub fn parse(s: &str) -> Result<Direction> {
        match s {
            "vis-to-ir" => Ok(Direction::VisToIr),
            "ir-to-vis" => Ok(Direction::IrToVis),
            other => Err(DeenError::Config(format!("unknown direction {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RankingResult {
    /// cmc[k] = fraction of scored queries whose first correct match is at
    /// rank <= k+1; length = gallery size; non-decreasing.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Queries actually scored (identity present in the gallery).
    pub num_queries: usize,
    /// Queries skipped because their identity has no gallery image.
    pub num_excluded: usize,
}

impl RankingResult {
    pub fn rank_k(&self, k: usize) -> f64 {
        self.cmc.get(k - 1).copied().unwrap_or(1.0)
    }
}

fn l2_rows(x: &Tensor) -> Result<Vec<Vec<f64>>> {
    if x.shape().len() != 2 {
        return Err(DeenError::Dim(format!(
            "features: N x D expected, got {:?}",
            x.shape()
        )));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let v = x.values();
    Ok((0..n)
        .map(|i| {
            let row = &v[i * d..(i + 1) * d];
            let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            row.iter().map(|a| a / norm).collect()
        })
        .collect())
}

/// Score a query set against a gallery. Features are L2-normalized per row
/// and compared with the Euclidean distance; distance ties break toward the
/// lower gallery index.
pub fn rank_and_score(
    query: &Tensor,
    query_ids: &[usize],
    gallery: &Tensor,
    gallery_ids: &[usize],
) -> Result<RankingResult> {
    let q = l2_rows(query)?;
    let g = l2_rows(gallery)?;
    if q.len() != query_ids.len() || g.len() != gallery_ids.len() {
        return Err(DeenError::Contract(
            "feature row count does not match label count".into(),
        ));
    }
    if g.is_empty() {
        return Err(DeenError::Protocol("empty gallery".into()));
    }
    let ng = g.len();
    let mut first_hits = vec![0usize; ng];
    let mut ap_sum = 0.0;
    let mut scored = 0usize;
    let mut excluded = 0usize;
    for (qi, qrow) in q.iter().enumerate() {
        let qid = query_ids[qi];
        if !gallery_ids.contains(&qid) {
            excluded += 1;
            continue;
        }
        let mut order: Vec<usize> = (0..ng).collect();
        let dists: Vec<f64> = g
            .iter()
            .map(|grow| {
                qrow.iter()
                    .zip(grow)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        order.sort_by(|&a, &b| {
            dists[a]
                .partial_cmp(&dists[b])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first: Option<usize> = None;
        for (rank0, &gi) in order.iter().enumerate() {
            if gallery_ids[gi] == qid {
                hits += 1;
                precision_sum += hits as f64 / (rank0 + 1) as f64;
                if first.is_none() {
                    first = Some(rank0);
                }
            }
        }
        first_hits[first.expect("gallery contains the identity")] += 1;
        ap_sum += precision_sum / hits as f64;
        scored += 1;
    }
    if scored == 0 {
        return Err(DeenError::Protocol(
            "no query identity appears in the gallery".into(),
        ));
    }
    let mut cmc = Vec::with_capacity(ng);
    let mut cum = 0usize;
    for &h in &first_hits {
        cum += h;
        cmc.push(cum as f64 / scored as f64);
    }
    Ok(RankingResult {
        cmc,
        map: ap_sum / scored as f64,
        num_queries: scored,
        num_excluded: excluded,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialConfig {
    pub direction: Direction,
    pub num_trials: usize,
    pub seed: u64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        TrialConfig {
            direction: Direction::IrToVis,
            num_trials: 10,
            seed: 0,
        }
    }
}

/// One trial's scores plus the pool indices that formed its gallery.
#[derive(Clone, Debug, Serialize)]
pub struct TrialOutcome {
    pub result: RankingResult,
    pub gallery: Vec<usize>,
}

/// Repeated-trial protocol: per trial the gallery holds exactly one random
/// image per (identity, camera) pair of the gallery modality, and every image
/// of the query modality is a query. Returns the per-trial results and their
/// arithmetic mean.
pub fn trial_eval(
    features: &Tensor,
    ids: &[usize],
    modalities: &[Modality],
    cameras: &[usize],
    cfg: &TrialConfig,
) -> Result<(RankingResult, Vec<TrialOutcome>)> {
    let n = features.shape()[0];
    if ids.len() != n || modalities.len() != n || cameras.len() != n {
        return Err(DeenError::Contract("label arrays must match feature rows".into()));
    }
    if cfg.num_trials == 0 {
        return Err(DeenError::Config("num_trials must be >= 1".into()));
    }
    let qm = cfg.direction.query_modality();
    let gm = cfg.direction.gallery_modality();
    let query_idx: Vec<usize> = (0..n).filter(|&i| modalities[i] == qm).collect();
    if query_idx.is_empty() {
        return Err(DeenError::Protocol(format!("no {} query images", qm.as_str())));
    }
    // candidate gallery images grouped by (identity, camera), ordered
    let mut groups: std::collections::BTreeMap<(usize, usize), Vec<usize>> = Default::default();
    for i in 0..n {
        if modalities[i] == gm {
            groups.entry((ids[i], cameras[i])).or_default().push(i);
        }
    }
    if groups.is_empty() {
        return Err(DeenError::Protocol(format!("no {} gallery images", gm.as_str())));
    }
    let d = features.shape()[1];
    let v = features.values();
    let rows = |idx: &[usize]| -> Result<Tensor> {
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&v[i * d..(i + 1) * d]);
        }
        Tensor::new(&[idx.len(), d], out)
    };
    let query_feats = rows(&query_idx)?;
    let query_ids: Vec<usize> = query_idx.iter().map(|&i| ids[i]).collect();

    let mut trials = Vec::with_capacity(cfg.num_trials);
    for t in 0..cfg.num_trials {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(t as u64));
        let gallery_idx: Vec<usize> = groups
            .values()
            .map(|pool| pool[rng.gen_range(0..pool.len())])
            .collect();
        let gallery_ids: Vec<usize> = gallery_idx.iter().map(|&i| ids[i]).collect();
        let result = rank_and_score(
            &query_feats,
            &query_ids,
            &rows(&gallery_idx)?,
            &gallery_ids,
        )?;
        trials.push(TrialOutcome {
            result,
            gallery: gallery_idx,
        });
    }
    let ng = trials[0].result.cmc.len();
    let mut mean = RankingResult {
        cmc: vec![0.0; ng],
        map: 0.0,
        num_queries: trials[0].result.num_queries,
        num_excluded: trials[0].result.num_excluded,
    };
    for t in &trials {
        let t = &t.result;
        if t.cmc.len() != ng {
            return Err(DeenError::Protocol("gallery size varies across trials".into()));
        }
        for (m, &c) in mean.cmc.iter_mut().zip(&t.cmc) {
            *m += c;
        }
        mean.map += t.map;
    }
    let k = trials.len() as f64;
    for m in &mut mean.cmc {
        *m /= k;
    }
    mean.map /= k;
    Ok((mean, trials))
}

#[derive(Clone, Debug, Serialize)]
pub struct DistanceStats {
    /// Mean distance between same-identity, opposite-modality pairs.
    pub mean_intra: Option<f64>,
    /// Mean distance between different-identity, opposite-modality pairs.
    pub mean_inter: Option<f64>,
    /// `mean_inter - mean_intra`; positive means identities separate.
    pub gap: Option<f64>,
    pub num_intra_pairs: usize,
    pub num_inter_pairs: usize,
    /// Raw per-pair distances backing the means.
    pub intra: Vec<f64>,
    pub inter: Vec<f64>,
}

/// Summarize cross-modality pair distances on L2-normalized features.
pub fn distance_stats(
    features: &Tensor,
    ids: &[usize],
    modalities: &[Modality],
) -> Result<DistanceStats> {
    let rows = l2_rows(features)?;
    if rows.len() != ids.len() || rows.len() != modalities.len() {
        return Err(DeenError::Contract("label arrays must match feature rows".into()));
    }
    let mut intra = Vec::new();
    let mut inter = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            if modalities[i] == modalities[j] {
                continue;
            }
            let dist = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if ids[i] == ids[j] {
                intra.push(dist);
            } else {
                inter.push(dist);
            }
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let mean_intra = mean(&intra);
    let mean_inter = mean(&inter);
    Ok(DistanceStats {
        gap: match (mean_intra, mean_inter) {
            (Some(a), Some(b)) => Some(b - a),
            _ => None,
        },
        mean_intra,
        mean_inter,
        num_intra_pairs: intra.len(),
        num_inter_pairs: inter.len(),
        intra,
        inter,
    })
}

/// Post-BN embeddings for a pool of labeled images, L2-normalized, in pool
/// order. Images are resized to the model geometry if needed.
pub fn extract_features(model: &Model, pool: &[SampleRecord], batch_size: usize) -> Result<Tensor> {
    if pool.is_empty() {
        return Err(DeenError::Data("empty evaluation pool".into()));
    }
    let bs = batch_size.max(1);
    let (h, w) = model.config.input_hw;
    let d = model.config.embedding_dim();
    let mut out = vec![0.0; pool.len() * d];
    for modality in [Modality::Vis, Modality::Ir] {
        let positions: Vec<usize> = (0..pool.len())
            .filter(|&i| pool[i].modality == modality)
            .collect();
        for chunk in positions.chunks(bs) {
            let imgs: Vec<Tensor> = chunk
                .iter()
                .map(|&i| {
                    let img = resize_bilinear(&pool[i].image, (h, w))?;
                    crate::tensor::reshape(&img, &[1, 3, h, w])
                })
                .collect::<Result<_>>()?;
            let batch = concat(&imgs, 0)?;
            let feats = model.embed(&batch, modality)?;
            let fv = feats.values();
            for (row, &i) in chunk.iter().enumerate() {
                let src = &fv[row * d..(row + 1) * d];
                let norm = src.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
                for (k, &s) in src.iter().enumerate() {
                    out[i * d + k] = s / norm;
                }
            }
        }
    }
    Tensor::new(&[pool.len(), d], out)
}
