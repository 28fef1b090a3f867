//! Python bindings for the core library: dataset generation, model
//! construction, training, feature extraction and retrieval evaluation.

use std::path::{Path, PathBuf};

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use deen_core::backbone::{Model, ModelConfig};
use deen_core::checkpoint::{load_checkpoint, save_checkpoint};
use deen_core::data::{Modality, SampleRecord};
use deen_core::evalproto::{distance_stats, extract_features, trial_eval, Direction, TrialConfig};
use deen_core::losses::LossWeights;
use deen_core::synthdata::{generate_dataset, load_dataset, save_dataset, SyntheticConfig};
use deen_core::tensor::Tensor;
use deen_core::trainer::{fit, TrainConfig};
use deen_core::DeenError;

fn err(e: DeenError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Generate a synthetic two-modality dataset on disk.
#[pyfunction]
#[pyo3(signature = (out_dir, num_identities=30, samples_per_id=12, height=64, width=32,
                    cameras=2, modality_gap=0.6, noise_sigma=0.05, seed=0))]
#[allow(clippy::too_many_arguments)]
fn generate(
    out_dir: PathBuf,
    num_identities: usize,
    samples_per_id: usize,
    height: usize,
    width: usize,
    cameras: usize,
    modality_gap: f64,
    noise_sigma: f64,
    seed: u64,
) -> PyResult<(usize, usize)> {
    let cfg = SyntheticConfig {
        num_identities,
        samples_per_id_per_modality: samples_per_id,
        image_hw: (height, width),
        num_cameras_per_modality: cameras,
        modality_gap,
        noise_sigma,
        seed,
    };
    let (train, test) = generate_dataset(&cfg).map_err(err)?;
    std::fs::create_dir_all(&out_dir)?;
    save_dataset(&out_dir, &train, &test).map_err(err)?;
    Ok((train.num_samples(), test.len()))
}

// parameter storage is reference-counted and single-threaded
#[pyclass(unsendable)]
struct DeenModel {
    inner: Model,
}

fn parse_modality(s: &str) -> PyResult<Modality> {
    Modality::parse(s).map_err(err)
}

fn test_pool(data_dir: &Path) -> PyResult<Vec<SampleRecord>> {
    let (_, test) = load_dataset(data_dir).map_err(err)?;
    Ok(test)
}

#[pymethods]
impl DeenModel {
    /// Build a freshly initialized model.
    #[new]
    #[pyo3(signature = (num_identities, height=64, width=32,
                        channels=vec![8, 16, 32, 64, 128], dee_stage=Some(3),
                        dee_branches=3, mfa_stages=vec![1, 2, 3],
                        drop_stage4=false, reduction=4, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        num_identities: usize,
        height: usize,
        width: usize,
        channels: Vec<usize>,
        dee_stage: Option<usize>,
        dee_branches: usize,
        mfa_stages: Vec<usize>,
        drop_stage4: bool,
        reduction: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = ModelConfig {
            stage_channels: channels,
            input_hw: (height, width),
            num_identities,
            dee_stage,
            dee_branches,
            mfa_stages,
            drop_stage4,
            reduction_ratio: reduction,
        };
        Ok(DeenModel {
            inner: Model::new(cfg, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(DeenModel {
            inner: load_checkpoint(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.inner).map_err(err)
    }

    fn embedding_dim(&self) -> usize {
        self.inner.config.embedding_dim()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner
            .store
            .entries()
            .iter()
            .map(|e| e.name.clone())
            .collect()
    }

    /// Train in place on a dataset directory; returns per-step total losses.
    #[pyo3(signature = (data_dir, epochs=1, ids_per_batch=6, vis_per_id=4, ir_per_id=4,
                        base_lr=0.01, peak_lr=0.1, momentum=0.9, seed=0,
                        lambda1=0.8, lambda2=0.1, alpha=0.2, margin=0.3))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &self,
        data_dir: PathBuf,
        epochs: usize,
        ids_per_batch: usize,
        vis_per_id: usize,
        ir_per_id: usize,
        base_lr: f64,
        peak_lr: f64,
        momentum: f64,
        seed: u64,
        lambda1: f64,
        lambda2: f64,
        alpha: f64,
        margin: f64,
    ) -> PyResult<Vec<f64>> {
        let (index, _) = load_dataset(&data_dir).map_err(err)?;
        let cfg = TrainConfig {
            ids_per_batch,
            vis_per_id,
            ir_per_id,
            epochs,
            base_lr,
            peak_lr,
            momentum,
            seed,
            flip_prob: 0.5,
            erase_prob: 0.5,
            weights: LossWeights {
                lambda1,
                lambda2,
                alpha,
                triplet_margin: margin,
            },
        };
        let report = fit(&self.inner, &index, &cfg).map_err(err)?;
        Ok(report.steps.iter().map(|s| s.loss.total).collect())
    }

    /// L2-normalized embeddings for raw images (flat, n * 3 * height * width).
    #[pyo3(signature = (images, height, width, modality))]
    fn embed(
        &self,
        images: Vec<f64>,
        height: usize,
        width: usize,
        modality: &str,
    ) -> PyResult<Vec<Vec<f64>>> {
        let modality = parse_modality(modality)?;
        let per = 3 * height * width;
        if per == 0 || images.len() % per != 0 {
            return Err(PyValueError::new_err(format!(
                "image buffer length {} is not a multiple of 3*{height}*{width}",
                images.len()
            )));
        }
        let pool: Vec<SampleRecord> = images
            .chunks(per)
            .map(|c| SampleRecord {
                image: Tensor::new(&[3, height, width], c.to_vec()).unwrap(),
                identity: 0,
                modality,
                camera: 0,
            })
            .collect();
        let f = extract_features(&self.inner, &pool, 16).map_err(err)?;
        let d = f.shape()[1];
        Ok(f.values().chunks(d).map(|r| r.to_vec()).collect())
    }

    /// Repeated-gallery retrieval metrics on the test pool of a dataset
    /// directory. Returns {"rank1", "rank10", "rank20", "map"}.
    #[pyo3(signature = (data_dir, direction="ir-to-vis", trials=10, seed=0))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        data_dir: PathBuf,
        direction: &str,
        trials: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let pool = test_pool(&data_dir)?;
        let features = extract_features(&self.inner, &pool, 16).map_err(err)?;
        let ids: Vec<usize> = pool.iter().map(|r| r.identity).collect();
        let mods: Vec<Modality> = pool.iter().map(|r| r.modality).collect();
        let cams: Vec<usize> = pool.iter().map(|r| r.camera).collect();
        let cfg = TrialConfig {
            direction: Direction::parse(direction).map_err(err)?,
            num_trials: trials,
            seed,
        };
        let (mean, _) = trial_eval(&features, &ids, &mods, &cams, &cfg).map_err(err)?;
        let out = PyDict::new_bound(py);
        out.set_item("rank1", mean.rank_k(1))?;
        out.set_item("rank10", mean.rank_k(10))?;
        out.set_item("rank20", mean.rank_k(20))?;
        out.set_item("map", mean.map)?;
        out.set_item("num_queries", mean.num_queries)?;
        Ok(out)
    }

    /// Cross-modality intra/inter distance means and their gap on the
    /// test pool. Returns {"mean_intra", "mean_inter", "gap"}.
    fn distance_gap<'py>(
        &self,
        py: Python<'py>,
        data_dir: PathBuf,
    ) -> PyResult<Bound<'py, PyDict>> {
        let pool = test_pool(&data_dir)?;
        let features = extract_features(&self.inner, &pool, 16).map_err(err)?;
        let ids: Vec<usize> = pool.iter().map(|r| r.identity).collect();
        let mods: Vec<Modality> = pool.iter().map(|r| r.modality).collect();
        let stats = distance_stats(&features, &ids, &mods).map_err(err)?;
        let out = PyDict::new_bound(py);
        out.set_item("mean_intra", stats.mean_intra)?;
        out.set_item("mean_inter", stats.mean_inter)?;
        out.set_item("gap", stats.gap)?;
        Ok(out)
    }
}

#[pymodule]
fn deen_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_class::<DeenModel>()?;
    Ok(())
}
