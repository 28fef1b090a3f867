//! Plain-text `key = value` run configuration.
//!
//! One assignment per line; `#` starts a comment; whitespace around keys and
//! values is ignored. Unknown keys are configuration errors. Values of list
//! keys are comma-separated; `none` disables an optional feature.
//!
//! Resolution order: built-in defaults, then the config file, then
//! `--set key=value` flag overrides (later wins).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use deen_core::backbone::ModelConfig;
use deen_core::evalproto::{Direction, TrialConfig};
use deen_core::losses::LossWeights;
use deen_core::synthdata::SyntheticConfig;
use deen_core::trainer::TrainConfig;
use deen_core::{DeenError, Result};

/// `(key, default, description)` for every recognized key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data.identities", "30", "number of identities to generate"),
    ("data.samples_per_id", "12", "images per identity per modality"),
    ("data.height", "64", "generated image height"),
    ("data.width", "32", "generated image width"),
    ("data.cameras", "2", "cameras per modality"),
    ("data.modality_gap", "0.6", "IR channel-remix strength in [0, 1]"),
    ("data.noise_sigma", "0.05", "per-pixel Gaussian noise sigma"),
    ("data.seed", "0", "dataset generation seed"),
    ("model.channels", "8,16,32,64,128", "stage output channels (5 values)"),
    ("model.height", "", "network input height (default: data.height)"),
    ("model.width", "", "network input width (default: data.width)"),
    ("model.dee_stage", "3", "stage after which expansion runs, or 'none'"),
    ("model.branches", "3", "expansion branch count"),
    ("model.mfa_stages", "1,2,3", "stages with feature aggregation, or 'none'"),
    ("model.drop_stage4", "false", "drop stage 4 entirely"),
    ("model.reduction", "4", "attention channel reduction ratio"),
    ("model.seed", "0", "weight initialization seed"),
    ("train.epochs", "150", "training epochs"),
    ("train.ids_per_batch", "6", "identities per batch"),
    ("train.vis_per_id", "4", "VIS images per identity per batch"),
    ("train.ir_per_id", "4", "IR images per identity per batch"),
    ("train.base_lr", "0.01", "warm-up start learning rate"),
    ("train.peak_lr", "0.1", "post-warm-up learning rate"),
    ("train.momentum", "0.9", "SGD momentum"),
    ("train.flip_prob", "0.5", "random horizontal flip probability"),
    ("train.erase_prob", "0.5", "random erasing probability"),
    ("train.lambda1", "0.8", "center-mining loss weight"),
    ("train.lambda2", "0.1", "orthogonality loss weight"),
    ("train.alpha", "0.2", "center-mining margin"),
    ("train.margin", "0.3", "triplet margin"),
    ("train.seed", "0", "training seed (sampling + augmentation)"),
    ("train.checkpoint_every", "0", "epochs between checkpoints (0 = final only)"),
    ("eval.direction", "both", "both | vis-to-ir | ir-to-vis"),
    ("eval.trials", "10", "gallery resampling trials"),
    ("eval.seed", "0", "gallery sampling seed"),
    ("eval.batch_size", "16", "feature extraction batch size"),
];

#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn defaults() -> RunConfig {
        RunConfig {
            values: KEYS
                .iter()
                .map(|&(k, d, _)| (k.to_string(), d.to_string()))
                .collect(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.iter().any(|&(k, _, _)| k == key) {
            return Err(DeenError::Config(format!("unknown config key {key:?}")));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                DeenError::Config(format!("{origin} line {}: expected key = value", lineno + 1))
            })?;
            self.set(key.trim(), value)
                .map_err(|e| DeenError::Config(format!("{origin} line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DeenError::Config(format!("cannot read {}: {e}", path.display())))?;
        self.merge_text(&text, &path.display().to_string())
    }

    /// `--set key=value` overrides.
    pub fn merge_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for pair in pairs {
            let (key, value) = pair.split_once('=').ok_or_else(|| {
                DeenError::Config(format!("override {pair:?}: expected key=value"))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Canonical serialization (sorted keys), written into every run directory.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.raw(key)
            .parse()
            .map_err(|_| DeenError::Config(format!("bad value for {key}: {:?}", self.raw(key))))
    }

    fn parse_list(&self, key: &str) -> Result<Vec<usize>> {
        if self.raw(key).eq_ignore_ascii_case("none") {
            return Ok(Vec::new());
        }
        self.raw(key)
            .split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| {
                    DeenError::Config(format!("bad value for {key}: {:?}", self.raw(key)))
                })
            })
            .collect()
    }

    pub fn synthetic(&self) -> Result<SyntheticConfig> {
        let cfg = SyntheticConfig {
            num_identities: self.parse("data.identities")?,
            samples_per_id_per_modality: self.parse("data.samples_per_id")?,
            image_hw: (self.parse("data.height")?, self.parse("data.width")?),
            num_cameras_per_modality: self.parse("data.cameras")?,
            modality_gap: self.parse("data.modality_gap")?,
            noise_sigma: self.parse("data.noise_sigma")?,
            seed: self.parse("data.seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model(&self, num_identities: usize) -> Result<ModelConfig> {
        let h = if self.raw("model.height").is_empty() {
            self.parse("data.height")?
        } else {
            self.parse("model.height")?
        };
        let w = if self.raw("model.width").is_empty() {
            self.parse("data.width")?
        } else {
            self.parse("model.width")?
        };
        let dee_stage = if self.raw("model.dee_stage").eq_ignore_ascii_case("none") {
            None
        } else {
            Some(self.parse("model.dee_stage")?)
        };
        let cfg = ModelConfig {
            stage_channels: self.parse_list("model.channels")?,
            input_hw: (h, w),
            num_identities,
            dee_stage,
            dee_branches: self.parse("model.branches")?,
            mfa_stages: self.parse_list("model.mfa_stages")?,
            drop_stage4: self.parse("model.drop_stage4")?,
            reduction_ratio: self.parse("model.reduction")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            ids_per_batch: self.parse("train.ids_per_batch")?,
            vis_per_id: self.parse("train.vis_per_id")?,
            ir_per_id: self.parse("train.ir_per_id")?,
            epochs: self.parse("train.epochs")?,
            base_lr: self.parse("train.base_lr")?,
            peak_lr: self.parse("train.peak_lr")?,
            momentum: self.parse("train.momentum")?,
            seed: self.parse("train.seed")?,
            flip_prob: self.parse("train.flip_prob")?,
            erase_prob: self.parse("train.erase_prob")?,
            weights: LossWeights {
                lambda1: self.parse("train.lambda1")?,
                lambda2: self.parse("train.lambda2")?,
                alpha: self.parse("train.alpha")?,
                triplet_margin: self.parse("train.margin")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_seed(&self) -> Result<u64> {
        self.parse("model.seed")
    }

    pub fn checkpoint_every(&self) -> Result<usize> {
        self.parse("train.checkpoint_every")
    }

    pub fn eval_batch_size(&self) -> Result<usize> {
        self.parse("eval.batch_size")
    }

    /// Directions requested by `eval.direction` (`both` expands to two).
    pub fn directions(&self) -> Result<Vec<Direction>> {
        match self.raw("eval.direction") {
            "both" => Ok(vec![Direction::VisToIr, Direction::IrToVis]),
            one => Ok(vec![Direction::parse(one)?]),
        }
    }

    pub fn trial(&self, direction: Direction) -> Result<TrialConfig> {
        let cfg = TrialConfig {
            direction,
            num_trials: self.parse("eval.trials")?,
            seed: self.parse("eval.seed")?,
        };
        if cfg.num_trials == 0 {
            return Err(DeenError::Config("eval.trials must be >= 1".into()));
        }
        Ok(cfg)
    }

    /// Named ablation presets mapping onto the architecture axes.
    pub fn apply_ablation(&mut self, name: &str) -> Result<()> {
        let assignments: &[(&str, &str)] = match name {
            // plain CE + triplet network
            "baseline" => &[
                ("model.dee_stage", "none"),
                ("model.mfa_stages", "none"),
                ("train.lambda1", "0"),
                ("train.lambda2", "0"),
            ],
            // expansion + center mining, no aggregation
            "dee-cpm" => &[("model.mfa_stages", "none")],
            // aggregation only
            "mfa" => &[
                ("model.dee_stage", "none"),
                ("train.lambda1", "0"),
                ("train.lambda2", "0"),
            ],
            "full" => &[],
            other => {
                return Err(DeenError::Config(format!(
                    "unknown ablation {other:?}; expected baseline | dee-cpm | mfa | full"
                )))
            }
        };
        for (k, v) in assignments {
            self.set(k, v)?;
        }
        Ok(())
    }
}
