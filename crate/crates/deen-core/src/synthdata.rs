//! Deterministic synthetic two-modality benchmark.
//!
//! Each identity is a fixed low-frequency spatial template whose
//! discriminative content is mostly channel-specific ("color"), with a weaker
//! channel-shared component ("shape"). VIS samples add per-sample jitter and
//! noise; IR samples additionally pass through a per-sample channel-mixing +
//! brightness transform whose strength is the modality gap. The mixing
//! collapses cross-channel structure, so only the shared component survives
//! reliably across modalities -- matching cross-modality pairs requires
//! modality-invariant features rather than the easy channel cues.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetIndex, Modality, SampleRecord};
use crate::error::{DeenError, Result};
use crate::tensor::{read_snapshot, write_snapshot, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SyntheticConfig {
    pub num_identities: usize,
    pub samples_per_id_per_modality: usize,
    pub image_hw: (usize, usize),
    pub num_cameras_per_modality: usize,
    /// Strength of the IR channel remix + brightness shift, in [0, 1].
    pub modality_gap: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_identities: 30,
            samples_per_id_per_modality: 12,
            image_hw: (64, 32),
            num_cameras_per_modality: 2,
            modality_gap: 0.6,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 4 {
            return Err(DeenError::Config(
                "num_identities must be >= 4 for a train/test split".into(),
            ));
        }
        if self.samples_per_id_per_modality == 0 || self.num_cameras_per_modality == 0 {
            return Err(DeenError::Config("sample and camera counts must be positive".into()));
        }
        let (h, w) = self.image_hw;
        if h < 4 || w < 4 {
            return Err(DeenError::Config(format!("degenerate image geometry {h}x{w}")));
        }
        if self.modality_gap < 0.0 || self.modality_gap > 1.0 {
            return Err(DeenError::Config("modality_gap must lie in [0, 1]".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(DeenError::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    /// ~2:1 identity split; identities are disjoint between train and test.
    pub fn num_train_identities(&self) -> usize {
        (self.num_identities * 2) / 3
    }
}

fn mix_seed(seed: u64, a: u64, b: u64, c: u64) -> u64 {
    // splitmix64 over the packed coordinates; independent per-record streams
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(b.wrapping_mul(0xBF58476D1CE4E5B9))
        .wrapping_add(c.wrapping_mul(0x94D049BB133111EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Share of the channel-shared "shape" component in each template channel;
/// the remaining weight is channel-specific "color" structure.
const SHAPE_SHARE: f64 = 0.4;

/// One low-frequency h*w pattern: a few Gaussian blobs plus oriented stripes,
/// scaled to roughly [0, 1].
fn pattern(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.0..h as f64),
                rng.gen_range(0.0..w as f64),
                rng.gen_range(0.15..0.45) * h.min(w) as f64,
                rng.gen_range(0.4..1.0),
            )
        })
        .collect();
    let freq_y = rng.gen_range(0.5..2.0);
    let freq_x = rng.gen_range(0.5..2.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let stripe_amp = rng.gen_range(0.1..0.3);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.0;
            for &(cy, cx, sigma, amp) in &blobs {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            v += stripe_amp
                * (std::f64::consts::TAU
                    * (freq_y * y as f64 / h as f64 + freq_x * x as f64 / w as f64)
                    + phase)
                    .sin();
            out[y * w + x] = 0.5 * v + 0.25;
        }
    }
    out
}

/// Per-identity template: one shared pattern blended into all three channels
/// plus an independent pattern per channel.
fn identity_template(cfg: &SyntheticConfig, identity: usize) -> Vec<f64> {
    let (h, w) = cfg.image_hw;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, identity as u64, 0xA11CE, 0));
    let shape = pattern(&mut rng, h, w);
    let mut img = vec![0.0; 3 * h * w];
    for c in 0..3 {
        let color = pattern(&mut rng, h, w);
        for i in 0..h * w {
            img[c * h * w + i] = SHAPE_SHARE * shape[i] + (1.0 - SHAPE_SHARE) * color[i];
        }
    }
    img
}

fn render_sample(
    cfg: &SyntheticConfig,
    template: &[f64],
    identity: usize,
    modality: Modality,
    sample_idx: usize,
) -> SampleRecord {
    let (h, w) = cfg.image_hw;
    let mod_tag = match modality {
        Modality::Vis => 1u64,
        Modality::Ir => 2u64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
        cfg.seed,
        identity as u64,
        mod_tag,
        sample_idx as u64 + 1,
    ));
    // per-sample jitter: integer circular shift plus a small brightness wobble
    let dy = rng.gen_range(-2i64..=2) as i64;
    let dx = rng.gen_range(-2i64..=2) as i64;
    let wobble = rng.gen_range(-0.05..0.05);
    let camera = rng.gen_range(0..cfg.num_cameras_per_modality);
    let cam_offset = 0.02 * camera as f64;

    // per-sample rank-one channel mix: every sensor response sees its own
    // random combination of the source channels, so channel-specific identity
    // cues do not survive into the IR rendering
    let mut mix = [0.0; 3];
    let mut total = 0.0;
    for v in &mut mix {
        *v = rng.gen_range(0.05..1.0);
        total += *v;
    }
    for v in &mut mix {
        *v /= total;
    }

    let g = cfg.modality_gap;
    let mut img = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let sy = ((y as i64 + dy).rem_euclid(h as i64)) as usize;
            let sx = ((x as i64 + dx).rem_euclid(w as i64)) as usize;
            let px = [
                template[sy * w + sx],
                template[h * w + sy * w + sx],
                template[2 * h * w + sy * w + sx],
            ];
            for c in 0..3 {
                let base = match modality {
                    Modality::Vis => px[c],
                    Modality::Ir => {
                        let mixed: f64 = (0..3).map(|k| mix[k] * px[k]).sum();
                        (1.0 - g) * px[c] + g * (mixed + 0.3)
                    }
                };
                img[c * h * w + y * w + x] =
                    base + wobble + cam_offset + cfg.noise_sigma * gauss(&mut rng);
            }
        }
    }
    SampleRecord {
        image: Tensor::new(&[3, h, w], img).unwrap(),
        identity,
        modality,
        camera,
    }
}

/// Generate the full benchmark: a training index over the first ~2/3 of the
/// identities and a held-out test pool over the rest. Fully deterministic
/// given the config.
pub fn generate_dataset(cfg: &SyntheticConfig) -> Result<(DatasetIndex, Vec<SampleRecord>)> {
    cfg.validate()?;
    let n_train = cfg.num_train_identities();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for id in 0..cfg.num_identities {
        let template = identity_template(cfg, id);
        for modality in [Modality::Vis, Modality::Ir] {
            for k in 0..cfg.samples_per_id_per_modality {
                let rec = render_sample(cfg, &template, id, modality, k);
                if id < n_train {
                    train.push(rec);
                } else {
                    test.push(rec);
                }
            }
        }
    }
    Ok((DatasetIndex::build(train)?, test))
}

#[derive(Debug, Default, Serialize)]
pub struct DatasetStats {
    pub total: usize,
    pub per_identity: BTreeMap<usize, usize>,
    pub per_modality: BTreeMap<String, usize>,
    pub per_camera: BTreeMap<String, usize>,
}

pub fn dataset_stats(pool: &[SampleRecord]) -> DatasetStats {
    let mut stats = DatasetStats {
        total: pool.len(),
        ..Default::default()
    };
    for r in pool {
        *stats.per_identity.entry(r.identity).or_default() += 1;
        *stats
            .per_modality
            .entry(r.modality.as_str().to_string())
            .or_default() += 1;
        *stats
            .per_camera
            .entry(format!("{}/{}", r.modality.as_str(), r.camera))
            .or_default() += 1;
    }
    stats
}

/// On-disk layout: `manifest.tsv` with one record per line
/// (`split<TAB>identity<TAB>modality<TAB>camera<TAB>path`) plus one tensor
/// snapshot file per image under `images/`.
pub fn save_dataset(dir: &Path, train: &DatasetIndex, test: &[SampleRecord]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    let mut manifest = BufWriter::new(fs::File::create(dir.join("manifest.tsv"))?);
    let mut write_records = |split: &str, records: &[SampleRecord], offset: usize| -> Result<()> {
        for (i, r) in records.iter().enumerate() {
            let rel = format!("images/{:06}.dtsn", offset + i);
            let mut f = BufWriter::new(fs::File::create(dir.join(&rel))?);
            write_snapshot(&mut f, &r.image)?;
            writeln!(
                manifest,
                "{split}\t{}\t{}\t{}\t{rel}",
                r.identity,
                r.modality.as_str(),
                r.camera
            )?;
        }
        Ok(())
    };
    write_records("train", &train.records, 0)?;
    write_records("test", test, train.records.len())?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetIndex, Vec<SampleRecord>)> {
    let manifest = fs::File::open(dir.join("manifest.tsv"))
        .map_err(|e| DeenError::Data(format!("cannot open manifest in {}: {e}", dir.display())))?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (lineno, line) in BufReader::new(manifest).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(DeenError::Data(format!(
                "manifest line {}: expected 5 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let identity: usize = fields[1]
            .parse()
            .map_err(|_| DeenError::Data(format!("manifest line {}: bad identity", lineno + 1)))?;
        let modality = Modality::parse(fields[2])?;
        let camera: usize = fields[3]
            .parse()
            .map_err(|_| DeenError::Data(format!("manifest line {}: bad camera", lineno + 1)))?;
        let mut f = BufReader::new(fs::File::open(dir.join(fields[4]))?);
        let image = read_snapshot(&mut f)?;
        let rec = SampleRecord {
            image,
            identity,
            modality,
            camera,
        };
        match fields[0] {
            "train" => train.push(rec),
            "test" => test.push(rec),
            other => {
                return Err(DeenError::Data(format!(
                    "manifest line {}: unknown split {other:?}",
                    lineno + 1
                )))
            }
        }
    }
    Ok((DatasetIndex::build(train)?, test))
}
