//! Command-line entry point: dataset generation, training, retrieval
//! evaluation, and distance analysis. Every run directory receives the
//! resolved configuration and a content hash of its inputs so runs are
//! reproducible byte-for-byte.

mod config;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use deen_core::backbone::Model;
use deen_core::checkpoint::{load_checkpoint, save_checkpoint};
use deen_core::data::{Modality, SampleRecord};
use deen_core::evalproto::{distance_stats, extract_features, trial_eval, RankingResult};
use deen_core::synthdata::{dataset_stats, generate_dataset, load_dataset, save_dataset};
use deen_core::trainer::fit_with;
use deen_core::{DeenError, Result};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "deen", about = "Cross-modality metric learning workbench", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic two-modality dataset.
    Generate {
        /// Config file (key = value lines).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Override a config key, e.g. --set data.identities=12 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory produced by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for config, logs and checkpoints.
        #[arg(long)]
        run_dir: PathBuf,
        /// Named preset: baseline | dee-cpm | mfa | full.
        #[arg(long)]
        ablate: Option<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate a checkpoint with the repeated-gallery retrieval protocol.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Cross-modality distance statistics of a checkpoint on the test pool.
    Analyze {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Generate { config, out, set } => {
            let cfg = resolve(config.as_deref(), &set, None)?;
            cmd_generate(&cfg, &out)
        }
        Cmd::Train {
            config,
            data,
            run_dir,
            ablate,
            set,
        } => {
            let cfg = resolve(config.as_deref(), &set, ablate.as_deref())?;
            cmd_train(&cfg, &data, &run_dir)
        }
        Cmd::Eval {
            config,
            checkpoint,
            data,
            run_dir,
            set,
        } => {
            let cfg = resolve(config.as_deref(), &set, None)?;
            cmd_eval(&cfg, &checkpoint, &data, &run_dir)
        }
        Cmd::Analyze {
            config,
            checkpoint,
            data,
            run_dir,
            set,
        } => {
            let cfg = resolve(config.as_deref(), &set, None)?;
            cmd_analyze(&cfg, &checkpoint, &data, &run_dir)
        }
    }
}

/// defaults <- file <- ablation preset <- --set overrides
fn resolve(file: Option<&Path>, set: &[String], ablate: Option<&str>) -> Result<RunConfig> {
    let mut cfg = RunConfig::defaults();
    if let Some(path) = file {
        cfg.merge_file(path)?;
    }
    if let Some(name) = ablate {
        cfg.apply_ablation(name)?;
    }
    cfg.merge_overrides(set)?;
    Ok(cfg)
}

/// SHA-256 over every file under `dir` (sorted relative path + contents).
fn hash_dir(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in &files {
        hasher.update(rel.as_bytes());
        hasher.update([0u8]);
        hasher.update(fs::read(dir.join(rel))?);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(
                path.strip_prefix(root)
                    .expect("path under root")
                    .to_string_lossy()
                    .into_owned(),
            );
        }
    }
    Ok(())
}

fn prepare_run_dir(run_dir: &Path, cfg: &RunConfig, inputs: Option<&Path>) -> Result<()> {
    fs::create_dir_all(run_dir)?;
    fs::write(run_dir.join("config.resolved"), cfg.render())?;
    if let Some(data) = inputs {
        fs::write(run_dir.join("inputs.sha256"), hash_dir(data)? + "\n")?;
    }
    Ok(())
}

fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let synthetic = cfg.synthetic()?;
    let (train, test) = generate_dataset(&synthetic)?;
    fs::create_dir_all(out)?;
    save_dataset(out, &train, &test)?;
    fs::write(out.join("config.resolved"), cfg.render())?;
    let stats = serde_json::json!({
        "train": dataset_stats(&train.records),
        "test": dataset_stats(&test),
    });
    fs::write(out.join("stats.json"), serde_json::to_string_pretty(&stats).unwrap())?;
    println!(
        "generated {} train + {} test samples ({} identities) in {}",
        train.num_samples(),
        test.len(),
        synthetic.num_identities,
        out.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, data: &Path, run_dir: &Path) -> Result<()> {
    let (index, _test) = load_dataset(data)?;
    let model_cfg = cfg.model(index.num_identities())?;
    let train_cfg = cfg.train()?;
    let checkpoint_every = cfg.checkpoint_every()?;
    prepare_run_dir(run_dir, cfg, Some(data))?;

    let model = Model::new(model_cfg, cfg.model_seed()?)?;
    let report = fit_with(&model, &index, &train_cfg, |epoch, m| {
        if checkpoint_every > 0 && (epoch + 1) % checkpoint_every == 0 {
            save_checkpoint(&run_dir.join(format!("checkpoint_epoch{epoch}.dckp")), m)?;
        }
        Ok(())
    })?;

    let mut csv = BufWriter::new(fs::File::create(run_dir.join("loss.csv"))?);
    writeln!(csv, "epoch,step,lr,ce,triplet,cpm,orthogonal,total")?;
    for s in &report.steps {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            s.epoch, s.step, s.lr, s.loss.ce, s.loss.triplet, s.loss.cpm, s.loss.orthogonal,
            s.loss.total
        )?;
    }
    csv.flush()?;
    save_checkpoint(&run_dir.join("checkpoint.dckp"), &model)?;
    if let Some(last) = report.steps.last() {
        println!(
            "trained {} epochs ({} steps); final total loss {:.6}",
            train_cfg.epochs,
            report.steps.len(),
            last.loss.total
        );
    } else {
        println!("trained 0 epochs; checkpoint equals initialization");
    }
    Ok(())
}

struct LabeledFeatures {
    features: deen_core::Tensor,
    ids: Vec<usize>,
    modalities: Vec<Modality>,
    cameras: Vec<usize>,
}

fn features_of_pool(cfg: &RunConfig, model: &Model, pool: &[SampleRecord]) -> Result<LabeledFeatures> {
    let features = extract_features(model, pool, cfg.eval_batch_size()?)?;
    Ok(LabeledFeatures {
        features,
        ids: pool.iter().map(|r| r.identity).collect(),
        modalities: pool.iter().map(|r| r.modality).collect(),
        cameras: pool.iter().map(|r| r.camera).collect(),
    })
}

fn write_features(run_dir: &Path, lf: &LabeledFeatures) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(run_dir.join("features.dtsn"))?);
    deen_core::tensor::write_snapshot(&mut f, &lf.features)?;
    let mut labels = BufWriter::new(fs::File::create(run_dir.join("labels.tsv"))?);
    for i in 0..lf.ids.len() {
        writeln!(
            labels,
            "{}\t{}\t{}",
            lf.ids[i],
            lf.modalities[i].as_str(),
            lf.cameras[i]
        )?;
    }
    Ok(())
}

fn csv_row(direction: &str, trial: &str, r: &RankingResult) -> String {
    format!(
        "{direction},{trial},{},{},{},{}",
        r.rank_k(1),
        r.rank_k(10),
        r.rank_k(20),
        r.map
    )
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data: &Path, run_dir: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let (_, test) = load_dataset(data)?;
    prepare_run_dir(run_dir, cfg, Some(data))?;
    let lf = features_of_pool(cfg, &model, &test)?;
    write_features(run_dir, &lf)?;

    let mut json = serde_json::Map::new();
    let mut csv_lines = vec!["direction,trial,rank1,rank10,rank20,map".to_string()];
    for direction in cfg.directions()? {
        let trial_cfg = cfg.trial(direction)?;
        let (mean, trials) =
            trial_eval(&lf.features, &lf.ids, &lf.modalities, &lf.cameras, &trial_cfg)?;
        for (t, outcome) in trials.iter().enumerate() {
            csv_lines.push(csv_row(direction.as_str(), &t.to_string(), &outcome.result));
        }
        csv_lines.push(csv_row(direction.as_str(), "mean", &mean));
        println!(
            "{}: rank-1 {:.4}  rank-10 {:.4}  mAP {:.4}  ({} queries, {} trials)",
            direction.as_str(),
            mean.rank_k(1),
            mean.rank_k(10),
            mean.map,
            mean.num_queries,
            trials.len()
        );
        json.insert(
            direction.as_str().to_string(),
            serde_json::json!({ "mean": mean, "trials": trials }),
        );
    }
    fs::write(
        run_dir.join("metrics.json"),
        serde_json::to_string_pretty(&serde_json::Value::Object(json)).unwrap(),
    )?;
    fs::write(run_dir.join("metrics.csv"), csv_lines.join("\n") + "\n")?;
    Ok(())
}

fn cmd_analyze(cfg: &RunConfig, checkpoint: &Path, data: &Path, run_dir: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let (_, test) = load_dataset(data)?;
    prepare_run_dir(run_dir, cfg, Some(data))?;
    let lf = features_of_pool(cfg, &model, &test)?;
    let has = |m: Modality| lf.modalities.iter().any(|&x| x == m);
    if !has(Modality::Vis) || !has(Modality::Ir) {
        return Err(DeenError::Protocol(
            "distance analysis needs both modalities in the test pool".into(),
        ));
    }
    let stats = distance_stats(&lf.features, &lf.ids, &lf.modalities)?;
    let mut csv = BufWriter::new(fs::File::create(run_dir.join("distances.csv"))?);
    writeln!(csv, "kind,distance")?;
    for d in &stats.intra {
        writeln!(csv, "intra,{d}")?;
    }
    for d in &stats.inter {
        writeln!(csv, "inter,{d}")?;
    }
    csv.flush()?;
    let summary = serde_json::json!({
        "mean_intra": stats.mean_intra,
        "mean_inter": stats.mean_inter,
        "gap": stats.gap,
        "num_intra_pairs": stats.num_intra_pairs,
        "num_inter_pairs": stats.num_inter_pairs,
    });
    fs::write(
        run_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).unwrap(),
    )?;
    match (stats.mean_intra, stats.mean_inter, stats.gap) {
        (Some(a), Some(b), Some(g)) => {
            println!("mean intra {a:.4}  mean inter {b:.4}  gap {g:.4}")
        }
        _ => println!(
            "incomplete pair sets: {} intra, {} inter pairs",
            stats.num_intra_pairs, stats.num_inter_pairs
        ),
    }
    Ok(())
}
