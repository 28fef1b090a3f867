//! Two-stream staged backbone with configurable embedding expansion and
//! multistage feature aggregation.
//!
//! Stage-0 weights are modality-specific; stages 1..=4 are shared. Each stage
//! is two 3x3 conv + BN + ReLU blocks, with stride-2 downsampling at the
//! entry of stages 1..=4. The metric losses consume pooled features before
//! the BN neck; the classifier consumes post-BN features.

pub mod dee;
pub mod mfa;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::error::{DeenError, Result};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::{
    batchnorm2d, concat, conv2d, global_avg_pool, linear, relu, reshape, BnMode, Tensor,
};

use dee::{dee_expand_batch, DeeBranch, DeeWeights};
use mfa::{mfa_forward, MfaWeights};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Output channels of stage-0 .. stage-4.
    pub stage_channels: Vec<usize>,
    pub input_hw: (usize, usize),
    pub num_identities: usize,
    /// Stage after which the expansion module is inserted; None disables it.
    pub dee_stage: Option<usize>,
    pub dee_branches: usize,
    pub mfa_stages: Vec<usize>,
    /// RegDB-style variant: drop stage-4 entirely.
    pub drop_stage4: bool,
    /// C' = C_h / reduction_ratio in the aggregation block.
    pub reduction_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stage_channels: vec![8, 16, 32, 64, 128],
            input_hw: (64, 32),
            num_identities: 20,
            dee_stage: Some(3),
            dee_branches: 3,
            mfa_stages: vec![1, 2, 3],
            drop_stage4: false,
            reduction_ratio: 4,
        }
    }
}

impl ModelConfig {
    /// Index of the last stage, honoring the stage-4 drop.
    pub fn last_stage(&self) -> usize {
        if self.drop_stage4 {
            3
        } else {
            4
        }
    }

    /// Dimension of the pooled embedding.
    pub fn embedding_dim(&self) -> usize {
        self.stage_channels[self.last_stage()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != 5 {
            return Err(DeenError::Config(format!(
                "stage_channels must list 5 stages, got {}",
                self.stage_channels.len()
            )));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(DeenError::Config("stage channel count of 0".into()));
        }
        if self.num_identities == 0 {
            return Err(DeenError::Config("num_identities must be positive".into()));
        }
        let last = self.last_stage();
        if let Some(s) = self.dee_stage {
            if s > last {
                return Err(DeenError::Config(format!(
                    "dee_stage {s} beyond last stage {last}"
                )));
            }
            if self.stage_channels[s] % 4 != 0 {
                return Err(DeenError::Config(format!(
                    "stage-{s} channels {} not divisible by 4",
                    self.stage_channels[s]
                )));
            }
            if self.dee_branches < 2 {
                return Err(DeenError::Config("dee_branches must be >= 2".into()));
            }
        }
        for &s in &self.mfa_stages {
            if s == 0 || s > last {
                return Err(DeenError::Config(format!(
                    "mfa stage {s} out of range 1..={last}"
                )));
            }
        }
        if self.reduction_ratio == 0 {
            return Err(DeenError::Config("reduction_ratio must be >= 1".into()));
        }
        let (h, w) = self.input_hw;
        // each of stages 1..=last halves the spatial size; it must stay >= 1
        if h >> last == 0 || w >> last == 0 {
            return Err(DeenError::Config(format!(
                "input {h}x{w} too small for {last} downsampling stages"
            )));
        }
        Ok(())
    }

    fn mfa_c_prime(&self, stage: usize) -> usize {
        (self.stage_channels[stage] / self.reduction_ratio).max(1)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Embeddings and labels produced by one forward pass.
pub struct ForwardBundle {
    /// N_total x D pooled features before the BN neck.
    pub pooled_pre_bn: Tensor,
    /// N_total x D pooled features after the BN neck.
    pub pooled_post_bn: Tensor,
    /// N_total x num_identities classifier outputs.
    pub logits: Tensor,
    /// 0 = original sample, 1..=B = generated branch.
    pub branch_of_sample: Vec<usize>,
    pub identity_of_sample: Vec<usize>,
    pub modality_of_sample: Vec<Modality>,
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ch = &config.stage_channels;

        for stream in ["vis", "ir"] {
            add_stage(&mut store, &format!("stage0.{stream}"), 3, ch[0], &mut rng);
        }
        for s in 1..=config.last_stage() {
            add_stage(&mut store, &format!("stage{s}"), ch[s - 1], ch[s], &mut rng);
        }
        for &s in &config.mfa_stages {
            let c_l = ch[s - 1];
            let c_h = ch[s];
            let cp = config.mfa_c_prime(s);
            let p = format!("mfa{s}");
            store.add_conv(&format!("{p}.psi1_q"), &[cp, c_h, 1, 1], &mut rng);
            store.add_conv(&format!("{p}.psi1_k"), &[cp, c_l, 1, 1], &mut rng);
            store.add_conv(&format!("{p}.psi1_v"), &[cp, c_l, 1, 1], &mut rng);
            store.add_zeros(&format!("{p}.omega_c"), &[c_h, cp, 1, 1]);
            store.add_conv(&format!("{p}.psi2_q"), &[cp, c_h, 1, 1], &mut rng);
            store.add_conv(&format!("{p}.psi2_k"), &[cp, c_l, 1, 1], &mut rng);
            store.add_conv(&format!("{p}.psi2_v"), &[cp, c_l, 1, 1], &mut rng);
            store.add_zeros(&format!("{p}.omega_s"), &[c_h, cp, 1, 1]);
        }
        if let Some(s) = config.dee_stage {
            let c = ch[s];
            for b in 0..config.dee_branches {
                let p = format!("dee.branch{b}");
                for (i, _) in [1, 2, 3].iter().enumerate() {
                    store.add_conv(&format!("{p}.phi{}", i + 1), &[c / 4, c, 3, 3], &mut rng);
                }
                store.add_conv(&format!("{p}.theta"), &[c, c / 4, 1, 1], &mut rng);
            }
        }
        let d = config.embedding_dim();
        store.add_batchnorm("neck.bn", d);
        store.add_conv("classifier.weight", &[d, config.num_identities], &mut rng);
        Ok(Model { config, store })
    }

    /// Run both modality batches through the network.
    ///
    /// Returns the bundle plus the leaf parameter bindings of this pass so the
    /// optimizer can collect gradients after `backward()`.
    pub fn forward(
        &self,
        vis_batch: &Tensor,
        ir_batch: &Tensor,
        vis_labels: &[usize],
        ir_labels: &[usize],
        mode: Mode,
    ) -> Result<(ForwardBundle, BoundParams)> {
        let (h, w) = self.config.input_hw;
        for (name, b, labels) in [
            ("vis", vis_batch, vis_labels),
            ("ir", ir_batch, ir_labels),
        ] {
            let s = b.shape();
            if s.len() != 4 || s[1] != 3 || (s[2], s[3]) != (h, w) {
                return Err(DeenError::Config(format!(
                    "{name} batch shape {s:?} does not match configured geometry 3x{h}x{w}"
                )));
            }
            if s[0] == 0 || s[0] != labels.len() {
                return Err(DeenError::Contract(format!(
                    "{name} batch has {} samples but {} labels",
                    s[0],
                    labels.len()
                )));
            }
        }
        let bn_mode = match mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval,
        };
        let mut bound = BoundParams::new();

        let vis0 = self.run_stage_blocks(&mut bound, "stage0.vis", vis_batch, 1, bn_mode)?;
        let ir0 = self.run_stage_blocks(&mut bound, "stage0.ir", ir_batch, 1, bn_mode)?;
        let mut x = concat(&[vis0, ir0], 0)?;

        let mut identities: Vec<usize> = vis_labels.iter().chain(ir_labels).copied().collect();
        let mut modalities: Vec<Modality> = std::iter::repeat(Modality::Vis)
            .take(vis_labels.len())
            .chain(std::iter::repeat(Modality::Ir).take(ir_labels.len()))
            .collect();
        let mut branches: Vec<usize> = vec![0; identities.len()];

        let maybe_dee = |stage: usize,
                             x: Tensor,
                             bound: &mut BoundParams,
                             identities: &mut Vec<usize>,
                             modalities: &mut Vec<Modality>,
                             branches: &mut Vec<usize>|
         -> Result<Tensor> {
            if mode == Mode::Train && self.config.dee_stage == Some(stage) {
                let weights = self.bind_dee(bound)?;
                let (expanded, labels, mods, tags) =
                    dee_expand_batch(&x, identities, modalities, &weights)?;
                *identities = labels;
                *modalities = mods;
                *branches = tags;
                Ok(expanded)
            } else {
                Ok(x)
            }
        };

        x = maybe_dee(0, x, &mut bound, &mut identities, &mut modalities, &mut branches)?;
        for s in 1..=self.config.last_stage() {
            let f_l = x.clone();
            let f_h = self.run_stage_blocks(&mut bound, &format!("stage{s}"), &x, 2, bn_mode)?;
            x = if self.config.mfa_stages.contains(&s) {
                let weights = self.bind_mfa(&mut bound, s)?;
                mfa_forward(&f_l, &f_h, &weights)?.output
            } else {
                f_h
            };
            x = maybe_dee(s, x, &mut bound, &mut identities, &mut modalities, &mut branches)?;
        }

        let pooled_pre_bn = global_avg_pool(&x)?;
        let n_total = pooled_pre_bn.shape()[0];
        let d = pooled_pre_bn.shape()[1];

        // BN neck as a 2-D batch norm over N x D x 1 x 1
        let gamma = bound.bind(&self.store, "neck.bn.gamma")?;
        let beta = bound.bind(&self.store, "neck.bn.beta")?;
        let rm = self.store.buffer("neck.bn.running_mean")?;
        let rv = self.store.buffer("neck.bn.running_var")?;
        let as_maps = reshape(&pooled_pre_bn, &[n_total, d, 1, 1])?;
        let normed = batchnorm2d(
            &as_maps, &gamma, &beta, &rm, &rv, bn_mode, BN_MOMENTUM, BN_EPSILON,
        )?;
        let pooled_post_bn = reshape(&normed, &[n_total, d])?;

        let cls = bound.bind(&self.store, "classifier.weight")?;
        let logits = linear(&pooled_post_bn, &cls, None)?;

        Ok((
            ForwardBundle {
                pooled_pre_bn,
                pooled_post_bn,
                logits,
                branch_of_sample: branches,
                identity_of_sample: identities,
                modality_of_sample: modalities,
            },
            bound,
        ))
    }

    /// Single-modality evaluation pass: N x D post-BN features. No expansion,
    /// batch norm in inference mode, so the output of a sample does not
    /// depend on its batch.
    pub fn embed(&self, batch: &Tensor, modality: Modality) -> Result<Tensor> {
        let (h, w) = self.config.input_hw;
        let s = batch.shape();
        if s.len() != 4 || s[1] != 3 || (s[2], s[3]) != (h, w) {
            return Err(DeenError::Config(format!(
                "batch shape {s:?} does not match configured geometry 3x{h}x{w}"
            )));
        }
        if s[0] == 0 {
            return Err(DeenError::Contract("empty batch".into()));
        }
        let stream = match modality {
            Modality::Vis => "stage0.vis",
            Modality::Ir => "stage0.ir",
        };
        let mut bound = BoundParams::new();
        let mut x = self.run_stage_blocks(&mut bound, stream, batch, 1, BnMode::Eval)?;
        for stage in 1..=self.config.last_stage() {
            let f_l = x.clone();
            let f_h =
                self.run_stage_blocks(&mut bound, &format!("stage{stage}"), &x, 2, BnMode::Eval)?;
            x = if self.config.mfa_stages.contains(&stage) {
                let weights = self.bind_mfa(&mut bound, stage)?;
                mfa_forward(&f_l, &f_h, &weights)?.output
            } else {
                f_h
            };
        }
        let pooled = global_avg_pool(&x)?;
        let n = pooled.shape()[0];
        let d = pooled.shape()[1];
        let gamma = bound.bind(&self.store, "neck.bn.gamma")?;
        let beta = bound.bind(&self.store, "neck.bn.beta")?;
        let rm = self.store.buffer("neck.bn.running_mean")?;
        let rv = self.store.buffer("neck.bn.running_var")?;
        let as_maps = reshape(&pooled, &[n, d, 1, 1])?;
        let normed = batchnorm2d(
            &as_maps, &gamma, &beta, &rm, &rv, BnMode::Eval, BN_MOMENTUM, BN_EPSILON,
        )?;
        reshape(&normed, &[n, d])
    }

    fn run_stage_blocks(
        &self,
        bound: &mut BoundParams,
        prefix: &str,
        x: &Tensor,
        entry_stride: usize,
        bn_mode: BnMode,
    ) -> Result<Tensor> {
        let mut out = x.clone();
        for b in 0..2 {
            let stride = if b == 0 { entry_stride } else { 1 };
            let wname = format!("{prefix}.b{b}.conv");
            let weight = bound.bind(&self.store, &wname)?;
            let conv = conv2d(&out, &weight, stride, 1, 1)?;
            let bnp = format!("{prefix}.b{b}.bn");
            let gamma = bound.bind(&self.store, &format!("{bnp}.gamma"))?;
            let beta = bound.bind(&self.store, &format!("{bnp}.beta"))?;
            let rm = self.store.buffer(&format!("{bnp}.running_mean"))?;
            let rv = self.store.buffer(&format!("{bnp}.running_var"))?;
            let normed = batchnorm2d(
                &conv, &gamma, &beta, &rm, &rv, bn_mode, BN_MOMENTUM, BN_EPSILON,
            )?;
            out = relu(&normed);
        }
        Ok(out)
    }

    fn bind_dee(&self, bound: &mut BoundParams) -> Result<DeeWeights> {
        let mut branches = Vec::with_capacity(self.config.dee_branches);
        for b in 0..self.config.dee_branches {
            let p = format!("dee.branch{b}");
            branches.push(DeeBranch {
                phi: [
                    bound.bind(&self.store, &format!("{p}.phi1"))?,
                    bound.bind(&self.store, &format!("{p}.phi2"))?,
                    bound.bind(&self.store, &format!("{p}.phi3"))?,
                ],
                theta: bound.bind(&self.store, &format!("{p}.theta"))?,
            });
        }
        Ok(DeeWeights { branches })
    }

    fn bind_mfa(&self, bound: &mut BoundParams, stage: usize) -> Result<MfaWeights> {
        let p = format!("mfa{stage}");
        Ok(MfaWeights {
            psi1_q: bound.bind(&self.store, &format!("{p}.psi1_q"))?,
            psi1_k: bound.bind(&self.store, &format!("{p}.psi1_k"))?,
            psi1_v: bound.bind(&self.store, &format!("{p}.psi1_v"))?,
            omega_c: bound.bind(&self.store, &format!("{p}.omega_c"))?,
            psi2_q: bound.bind(&self.store, &format!("{p}.psi2_q"))?,
            psi2_k: bound.bind(&self.store, &format!("{p}.psi2_k"))?,
            psi2_v: bound.bind(&self.store, &format!("{p}.psi2_v"))?,
            omega_s: bound.bind(&self.store, &format!("{p}.omega_s"))?,
        })
    }
}

fn add_stage(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) {
    store.add_conv(&format!("{prefix}.b0.conv"), &[c_out, c_in, 3, 3], rng);
    store.add_batchnorm(&format!("{prefix}.b0.bn"), c_out);
    store.add_conv(&format!("{prefix}.b1.conv"), &[c_out, c_out, 3, 3], rng);
    store.add_batchnorm(&format!("{prefix}.b1.bn"), c_out);
}
