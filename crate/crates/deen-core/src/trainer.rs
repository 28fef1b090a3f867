//! Identity-balanced batch sampling, the staged learning-rate schedule,
//! train-time augmentation, and the SGD training loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Mode, Model};
use crate::data::DatasetIndex;
use crate::error::{DeenError, Result};
use crate::losses::{total_loss, LossBreakdown, LossWeights};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::{concat, reshape, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub ids_per_batch: usize,
    pub vis_per_id: usize,
    pub ir_per_id: usize,
    pub epochs: usize,
    /// Warm-up start learning rate; also the value at epoch 0.
    pub base_lr: f64,
    /// Plateau learning rate reached after the 10-epoch linear warm-up.
    pub peak_lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub flip_prob: f64,
    pub erase_prob: f64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            ids_per_batch: 6,
            vis_per_id: 4,
            ir_per_id: 4,
            epochs: 150,
            base_lr: 1e-2,
            peak_lr: 1e-1,
            momentum: 0.9,
            seed: 0,
            flip_prob: 0.5,
            erase_prob: 0.5,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.ids_per_batch * (self.vis_per_id + self.ir_per_id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ids_per_batch < 2 || self.vis_per_id == 0 || self.ir_per_id == 0 {
            return Err(DeenError::Config(
                "batch needs >= 2 identities and >= 1 sample per modality".into(),
            ));
        }
        if self.base_lr <= 0.0 || self.peak_lr <= 0.0 {
            return Err(DeenError::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(DeenError::Config("momentum must lie in [0, 1)".into()));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("erase_prob", self.erase_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(DeenError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        self.weights.validate()
    }
}

/// Staged schedule: 10-epoch linear warm-up from `base_lr` to `peak_lr`, then
/// the plateau, then decade drops at epochs 20, 60 and 120.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(DeenError::Contract(format!(
            "epoch {epoch} outside schedule of {} epochs",
            cfg.epochs
        )));
    }
    Ok(match epoch {
        e if e < 10 => cfg.base_lr + (cfg.peak_lr - cfg.base_lr) * e as f64 / 10.0,
        e if e < 20 => cfg.peak_lr,
        e if e < 60 => cfg.peak_lr / 10.0,
        e if e < 120 => cfg.peak_lr / 100.0,
        _ => cfg.peak_lr / 1000.0,
    })
}

/// Record indices of one identity-balanced batch.
pub struct Batch {
    pub vis: Vec<usize>,
    pub ir: Vec<usize>,
}

/// Draw `ids_per_batch` distinct identities, then `vis_per_id` VIS and
/// `ir_per_id` IR samples of each; an identity with fewer samples than
/// requested is sampled with replacement.
pub fn sample_batch(
    index: &DatasetIndex,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let ids: Vec<usize> = index.by_identity.keys().copied().collect();
    if ids.len() < cfg.ids_per_batch {
        return Err(DeenError::Protocol(format!(
            "batch wants {} identities but dataset has {}",
            cfg.ids_per_batch,
            ids.len()
        )));
    }
    let chosen: Vec<usize> = ids
        .choose_multiple(rng, cfg.ids_per_batch)
        .copied()
        .collect();
    let mut batch = Batch {
        vis: Vec::new(),
        ir: Vec::new(),
    };
    for id in chosen {
        let (vis_pool, ir_pool) = &index.by_identity[&id];
        draw(vis_pool, cfg.vis_per_id, rng, &mut batch.vis);
        draw(ir_pool, cfg.ir_per_id, rng, &mut batch.ir);
    }
    Ok(batch)
}

fn draw(pool: &[usize], k: usize, rng: &mut ChaCha8Rng, out: &mut Vec<usize>) {
    if pool.len() >= k {
        out.extend(pool.choose_multiple(rng, k));
    } else {
        out.extend((0..k).map(|_| pool[rng.gen_range(0..pool.len())]));
    }
}

pub fn flip_horizontal(img: &Tensor) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(DeenError::Dim(format!("flip: C x H x W expected, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let v = img.values();
    let mut out = vec![0.0; v.len()];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[ci * h * w + y * w + x] = v[ci * h * w + y * w + (w - 1 - x)];
            }
        }
    }
    Tensor::new(s, out)
}

pub fn resize_bilinear(img: &Tensor, out_hw: (usize, usize)) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(DeenError::Dim(format!("resize: C x H x W expected, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (oh, ow) = out_hw;
    if (h, w) == (oh, ow) {
        return Ok(img.clone());
    }
    let v = img.values();
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            // align-corners-free mapping of output pixel centers
            let fy = ((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, h as f64 - 1.0);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let ty = fy - y0 as f64;
            for ox in 0..ow {
                let fx =
                    ((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, w as f64 - 1.0);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let tx = fx - x0 as f64;
                let p = |y: usize, x: usize| v[ci * h * w + y * w + x];
                out[ci * oh * ow + oy * ow + ox] = (1.0 - ty) * (1.0 - tx) * p(y0, x0)
                    + (1.0 - ty) * tx * p(y0, x1)
                    + ty * (1.0 - tx) * p(y1, x0)
                    + ty * tx * p(y1, x1);
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

pub fn erase_rect(
    img: &Tensor,
    y0: usize,
    x0: usize,
    eh: usize,
    ew: usize,
    fill: &[f64],
) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 || fill.len() != s[0] {
        return Err(DeenError::Dim(format!(
            "erase: C x H x W image with per-channel fill expected, got {s:?} / {} fills",
            fill.len()
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if y0 + eh > h || x0 + ew > w {
        return Err(DeenError::Dim(format!(
            "erase: rect {eh}x{ew} at ({y0},{x0}) exceeds {h}x{w}"
        )));
    }
    let mut out = img.values().to_vec();
    for ci in 0..c {
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                out[ci * h * w + y * w + x] = fill[ci];
            }
        }
    }
    Tensor::new(s, out)
}

/// Train-time pipeline: resize to the model geometry, random horizontal flip,
/// random erasing (area 2%-40%, aspect 0.3-3.33, per-channel-mean fill).
pub fn augment(
    img: &Tensor,
    target_hw: (usize, usize),
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let mut out = resize_bilinear(img, target_hw)?;
    if rng.gen_range(0.0..1.0) < cfg.flip_prob {
        out = flip_horizontal(&out)?;
    }
    if rng.gen_range(0.0..1.0) < cfg.erase_prob {
        let (c, h, w) = (out.shape()[0], out.shape()[1], out.shape()[2]);
        let hw = h * w;
        let fill: Vec<f64> = (0..c)
            .map(|ci| out.values()[ci * hw..(ci + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        for _attempt in 0..10 {
            let area = rng.gen_range(0.02..0.4) * hw as f64;
            let aspect = rng.gen_range(0.3..10.0 / 3.0);
            let eh = (area * aspect).sqrt().round() as usize;
            let ew = (area / aspect).sqrt().round() as usize;
            if eh == 0 || ew == 0 || eh > h || ew > w {
                continue;
            }
            let y0 = rng.gen_range(0..=h - eh);
            let x0 = rng.gen_range(0..=w - ew);
            out = erase_rect(&out, y0, x0, eh, ew, &fill)?;
            break;
        }
    }
    Ok(out)
}

/// One momentum-SGD step over all bound parameters:
/// `v <- momentum * v + g`, `p <- p - lr * v`.
pub fn sgd_step(store: &ParamStore, bound: &BoundParams, lr: f64, momentum: f64) -> Result<()> {
    let mut grads: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (idx, t) in &bound.bound {
        let g = t.grad().ok_or_else(|| {
            DeenError::Contract(format!(
                "parameter {} has no gradient; backward() not run?",
                store.entry(*idx).name
            ))
        })?;
        match grads.entry(*idx) {
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(g);
            }
            std::collections::btree_map::Entry::Occupied(mut e) => {
                for (a, b) in e.get_mut().iter_mut().zip(&g) {
                    *a += b;
                }
            }
        }
    }
    for (idx, g) in grads {
        let e = store.entry(idx);
        if !e.trainable {
            continue;
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(DeenError::Numeric(format!(
                "non-finite gradient in parameter {}",
                e.name
            )));
        }
        let mut vel = e.velocity.borrow_mut();
        let mut data = e.data.borrow_mut();
        for i in 0..g.len() {
            vel[i] = momentum * vel[i] + g[i];
            data[i] -= lr * vel[i];
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub struct FitReport {
    pub steps: Vec<StepLog>,
}

pub fn fit(model: &Model, index: &DatasetIndex, cfg: &TrainConfig) -> Result<FitReport> {
    fit_with(model, index, cfg, |_, _| Ok(()))
}

/// Full training loop; `on_epoch_end(epoch, model)` runs after each epoch's
/// parameter updates (checkpointing hook). Deterministic given the config.
pub fn fit_with(
    model: &Model,
    index: &DatasetIndex,
    cfg: &TrainConfig,
    mut on_epoch_end: impl FnMut(usize, &Model) -> Result<()>,
) -> Result<FitReport> {
    cfg.validate()?;
    if model.config.dee_stage.is_none()
        && (cfg.weights.lambda1 > 0.0 || cfg.weights.lambda2 > 0.0)
    {
        return Err(DeenError::Config(
            "expansion losses enabled but the expansion module is disabled".into(),
        ));
    }
    if model.config.num_identities != index.num_identities() {
        return Err(DeenError::Config(format!(
            "classifier sized for {} identities but dataset has {}",
            model.config.num_identities,
            index.num_identities()
        )));
    }
    let steps_per_epoch = index.num_samples() / cfg.batch_size();
    if steps_per_epoch == 0 {
        return Err(DeenError::Protocol(format!(
            "dataset of {} samples smaller than one batch of {}",
            index.num_samples(),
            cfg.batch_size()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = FitReport { steps: Vec::new() };
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg)?;
        for step in 0..steps_per_epoch {
            let batch = sample_batch(index, cfg, &mut rng)?;
            let (vis, vis_labels) = assemble(model, index, cfg, &batch.vis, &mut rng)?;
            let (ir, ir_labels) = assemble(model, index, cfg, &batch.ir, &mut rng)?;
            let (bundle, bound) =
                model.forward(&vis, &ir, &vis_labels, &ir_labels, Mode::Train)?;
            let (loss, breakdown) = total_loss(&bundle, &cfg.weights)?;
            if !breakdown.total.is_finite() {
                return Err(DeenError::Numeric(format!(
                    "non-finite loss at epoch {epoch} step {step}: {breakdown:?}; \
                     batch identities {:?}",
                    bundle.identity_of_sample
                )));
            }
            loss.backward()?;
            sgd_step(&model.store, &bound, lr, cfg.momentum)?;
            report.steps.push(StepLog {
                epoch,
                step,
                lr,
                loss: breakdown,
            });
        }
        on_epoch_end(epoch, model)?;
    }
    Ok(report)
}

fn assemble(
    model: &Model,
    index: &DatasetIndex,
    cfg: &TrainConfig,
    record_indices: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<usize>)> {
    let (h, w) = model.config.input_hw;
    let mut rows = Vec::with_capacity(record_indices.len());
    let mut labels = Vec::with_capacity(record_indices.len());
    for &i in record_indices {
        let rec = &index.records[i];
        let img = augment(&rec.image, (h, w), cfg, rng)?;
        rows.push(reshape(&img, &[1, 3, h, w])?);
        labels.push(index.class_of_identity[&rec.identity]);
    }
    let refs: Vec<Tensor> = rows;
    Ok((concat(&refs, 0)?, labels))
}
