//! Batch command-line workflows. Every command reads a JSON config plus
//! positional paths, writes its outputs into a run directory, and records a
//! `manifest.json` from which `rerun` reproduces the run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::em::{em_fit, init_params, EmSettings};
use crate::error::{Error, ErrorKind, Result};
use crate::io;
use crate::likelihood::{GaussianParams, ModelConfig};
use crate::map_oracle::{map_fit, OptimizerSettings};
use crate::network::{build_network, NetworkDescriptor, NetworkParams};
use crate::segment::{dice, outlier_count, segment, segment_warped, DEFAULT_OUTLIER_THRESHOLD};
use crate::synth::{self, SynthConfig};
use crate::trainer::{train_with, CheckpointKind, TrainConfig, TrainingSet};
use crate::volume::{LabelMap, ProbAtlas, Volume};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "atlasseg", version, about = "Unsupervised atlas-based Bayesian segmentation")]
pub struct Cli {
    /// Worker threads for per-scan parallelism (1 = serial).
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic dataset (atlas, scans, ground truth).
    Synth { config: PathBuf, out: PathBuf },
    /// Fit Gaussian parameters with EM under the undeformed atlas.
    EmFit {
        config: PathBuf,
        atlas: PathBuf,
        out: PathBuf,
        #[arg(required = true)]
        scans: Vec<PathBuf>,
    },
    /// Per-scan MAP fit of velocity and Gaussian parameters.
    MapFit {
        config: PathBuf,
        atlas: PathBuf,
        out: PathBuf,
        #[arg(required = true)]
        scans: Vec<PathBuf>,
    },
    /// Train the network on unlabeled scans.
    Train {
        config: PathBuf,
        atlas: PathBuf,
        out: PathBuf,
        #[arg(required = true)]
        scans: Vec<PathBuf>,
    },
    /// Segment scans with a checkpoint or fixed parameters.
    Segment {
        config: PathBuf,
        atlas: PathBuf,
        out: PathBuf,
        #[arg(required = true)]
        scans: Vec<PathBuf>,
    },
    /// Dice scores of (prediction, truth) label-map pairs.
    Eval {
        config: PathBuf,
        out: PathBuf,
        /// Alternating prediction and ground-truth paths.
        #[arg(required = true)]
        pairs: Vec<PathBuf>,
    },
    /// synth -> train -> segment -> eval from a single config.
    Pipeline { config: PathBuf, out: PathBuf },
    /// Re-run the command recorded in a manifest.
    Rerun {
        manifest: PathBuf,
        /// Output directory (defaults to the manifest's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Everything needed to reproduce a run. Holds no timestamps or output
/// locations, so reruns produce byte-identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config: Value,
    pub inputs: Vec<PathBuf>,
}

// ---------------------------------------------------------------- configs

/// Model settings as they appear in run configs. The variance floor is
/// relative: each scan uses `var_floor_scale * (intensity range)^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub lambda: f64,
    pub ss_steps: usize,
    pub velocity_stride: usize,
    pub var_floor_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            lambda: m.lambda,
            ss_steps: m.ss_steps,
            velocity_stride: m.velocity_stride,
            var_floor_scale: 1e-6,
        }
    }
}

impl ModelSection {
    pub fn for_range(&self, range: f64) -> Result<ModelConfig> {
        let range = if range > 0.0 { range } else { 1.0 };
        let cfg = ModelConfig {
            lambda: self.lambda,
            ss_steps: self.ss_steps,
            velocity_stride: self.velocity_stride,
            var_floor: self.var_floor_scale * range * range,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn for_scan(&self, img: &Volume) -> Result<ModelConfig> {
        let (lo, hi) = img.range();
        self.for_range((hi - lo) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmRun {
    pub max_iter: usize,
    /// Absolute data-term tolerance; `null` means `1e-6 * voxels`.
    pub tol: Option<f64>,
    pub model: ModelSection,
}

impl Default for EmRun {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: None,
            model: ModelSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct MapRun {
    pub model: ModelSection,
    pub optimizer: OptimizerSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub depth: usize,
    pub filters: Vec<usize>,
    pub kernel: usize,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            depth: 3,
            filters: vec![32; 3],
            kernel: 3,
            leaky_slope: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub checkpoint_interval: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            seed: t.seed,
            checkpoint_interval: t.checkpoint_interval,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRun {
    pub model: ModelSection,
    pub network: NetworkSection,
    pub train: TrainSection,
    /// The last this-many positional scans are held out for validation.
    pub validation_scans: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentRun {
    /// Network checkpoint; exclusive with `params`.
    pub checkpoint: Option<PathBuf>,
    /// Gaussian parameters JSON, used with `velocity` (zero when absent).
    pub params: Option<PathBuf>,
    pub velocity: Option<PathBuf>,
    pub model: ModelSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRun {
    pub threshold: f64,
    /// Labels to score; all labels of the truth maps when empty.
    pub labels: Vec<u32>,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_OUTLIER_THRESHOLD,
            labels: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineRun {
    /// Drives the synthesizer, the network initialization and the shuffles.
    pub seed: u64,
    pub synth: SynthConfig,
    pub num_train: usize,
    pub num_validation: usize,
    pub num_test: usize,
    pub model: ModelSection,
    pub network: NetworkSection,
    pub train: TrainSection,
    pub eval: EvalRun,
}

impl Default for PipelineRun {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthConfig::default(),
            num_train: 8,
            num_validation: 2,
            num_test: 2,
            model: ModelSection::default(),
            network: NetworkSection::default(),
            train: TrainSection::default(),
            eval: EvalRun::default(),
        }
    }
}

// ---------------------------------------------------------------- helpers

/// Parses a run config and returns it with every default filled in, as
/// recorded in the manifest.
fn resolve<T: DeserializeOwned + Serialize>(config: &Value) -> Result<(T, Value)> {
    let parsed: T = serde_json::from_value(config.clone()).map_err(|e| Error::Config(e.to_string()))?;
    let full = serde_json::to_value(&parsed).expect("config serializes");
    Ok((parsed, full))
}

fn read_config(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).expect("serializable");
    text.push('\n');
    write(path, &text)
}

/// Scan identifier: the file name without its `.vol`/`.json`/`.raw` suffix.
pub fn scan_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| "scan".into(), |s| s.to_string_lossy().into_owned())
}

fn unique_ids(paths: &[PathBuf]) -> Result<Vec<String>> {
    let ids: Vec<String> = paths.iter().map(|p| scan_id(p)).collect();
    let mut seen = std::collections::BTreeSet::new();
    for id in &ids {
        if !seen.insert(id) {
            return Err(Error::InvalidArgument(format!("duplicate scan id `{id}`")));
        }
    }
    Ok(ids)
}

fn history_csv(header: &str, values: impl IntoIterator<Item = f64>) -> String {
    let mut s = format!("{header}\n");
    for (i, v) in values.into_iter().enumerate() {
        let _ = writeln!(s, "{i},{v}");
    }
    s
}

fn load_scans(atlas: &ProbAtlas, paths: &[PathBuf]) -> Result<Vec<Volume>> {
    paths
        .par_iter()
        .map(|p| {
            let v = io::read_volume(p)?;
            v.shape().same_dims(atlas.shape(), &format!("scan {}", p.display()))?;
            Ok(v)
        })
        .collect()
}

// ---------------------------------------------------------------- commands

/// Writes a synthetic dataset; returns nothing beyond the files:
/// `atlas`, `scans/`, `labels/`, `velocities/`, `truth.json`.
fn cmd_synth(cfg: &SynthConfig, out: &Path) -> Result<()> {
    let atlas = synth::synth_atlas(cfg)?;
    for sub in ["scans", "labels", "velocities"] {
        mkdir(&out.join(sub))?;
    }
    io::write_atlas(&atlas, &out.join("atlas.vol"))?;
    let truth: Vec<(String, GaussianParams)> = (0..cfg.num_scans)
        .into_par_iter()
        .map(|i| {
            let scan = synth::synth_scan(cfg, &atlas, i)?;
            let id = format!("scan_{i:03}");
            io::write_volume(&scan.image, &out.join("scans").join(format!("{id}.vol")))?;
            io::write_labels(&scan.labels, &out.join("labels").join(format!("{id}.vol")))?;
            io::write_velocity(&scan.velocity, &out.join("velocities").join(format!("{id}.vol")))?;
            Ok((id, scan.params))
        })
        .collect::<Result<_>>()?;
    let truth: BTreeMap<String, GaussianParams> = truth.into_iter().collect();
    write_json(&out.join("truth.json"), &truth)
}

fn cmd_em_fit(cfg: &EmRun, atlas_path: &Path, scans: &[PathBuf], out: &Path) -> Result<()> {
    let atlas = io::read_atlas(atlas_path)?;
    let ids = unique_ids(scans)?;
    let images = load_scans(&atlas, scans)?;
    ids.par_iter().zip(images.par_iter()).try_for_each(|(id, img)| {
        let model = cfg.model.for_scan(img)?;
        let settings = EmSettings {
            max_iter: cfg.max_iter,
            tol: cfg.tol,
            var_floor: model.var_floor,
        };
        let init = init_params(img, &atlas, model.var_floor)?;
        let state = em_fit(img, &atlas, &init, &settings)?;
        let seg = segment_warped(img, &atlas, &state.params)?;
        let dir = out.join(id);
        mkdir(&dir)?;
        io::write_params(&state.params, &dir.join("params.json"))?;
        io::write_labels(&seg, &dir.join("seg.vol"))?;
        write(
            &dir.join("history.csv"),
            &history_csv("iteration,data_term", state.data_term_history.iter().copied()),
        )
    })
}

fn cmd_map_fit(cfg: &MapRun, atlas_path: &Path, scans: &[PathBuf], out: &Path) -> Result<()> {
    let atlas = io::read_atlas(atlas_path)?;
    let ids = unique_ids(scans)?;
    let images = load_scans(&atlas, scans)?;
    ids.par_iter().zip(images.par_iter()).try_for_each(|(id, img)| {
        let model = cfg.model.for_scan(img)?;
        let fit = map_fit(img, &atlas, &model, &cfg.optimizer)?;
        if let Some(msg) = fit.diagnostic {
            return Err(Error::Numerical(format!("{id}: {msg}")));
        }
        let seg = segment(img, &atlas, &fit.velocity, &fit.params, &model)?;
        let dir = out.join(id);
        mkdir(&dir)?;
        io::write_params(&fit.params, &dir.join("params.json"))?;
        io::write_velocity(&fit.velocity, &dir.join("velocity.vol"))?;
        io::write_labels(&seg, &dir.join("seg.vol"))?;
        write(&dir.join("history.csv"), &history_csv("iteration,loss", fit.loss_history.iter().copied()))
    })
}

fn train_on(cfg: &TrainRun, atlas: ProbAtlas, mut images: Vec<Volume>, out: &Path) -> Result<NetworkParams> {
    if cfg.validation_scans >= images.len() && cfg.train.epochs > 0 {
        return Err(Error::Config(format!(
            "{} validation scans leave nothing to train on",
            cfg.validation_scans
        )));
    }
    let val = images.split_off(images.len() - cfg.validation_scans.min(images.len()));
    let range = images
        .iter()
        .chain(&val)
        .map(|v| {
            let (lo, hi) = v.range();
            (hi - lo) as f64
        })
        .fold(0.0, f64::max);
    let model = cfg.model.for_range(range)?;
    let n = &cfg.network;
    let descriptor = NetworkDescriptor {
        dims: atlas.shape().dims().to_vec(),
        label_groups: atlas.label_groups().to_vec(),
        depth: n.depth,
        filters: n.filters.clone(),
        kernel: n.kernel,
        leaky_slope: n.leaky_slope,
        velocity_stride: model.velocity_stride,
        var_floor: model.var_floor,
        seed: n.seed,
    };
    let net = build_network(&descriptor)?;
    let t = &cfg.train;
    let tc = TrainConfig {
        epochs: t.epochs,
        batch_size: t.batch_size,
        learning_rate: t.learning_rate,
        seed: t.seed,
        checkpoint_interval: t.checkpoint_interval,
        model,
    };
    let train_set = TrainingSet::new(atlas.clone(), images)?;
    let val_set = TrainingSet::new(atlas, val)?;
    let ckpt_dir = out.join("checkpoints");
    mkdir(&ckpt_dir)?;
    let outcome = train_with(
        &net,
        &train_set,
        (!val_set.is_empty()).then_some(&val_set),
        &tc,
        |kind, epoch, params| match kind {
            CheckpointKind::Periodic => params.save(&ckpt_dir.join(format!("epoch_{epoch:05}.ckpt"))),
            CheckpointKind::BestValidation => params.save(&out.join("best.ckpt")),
        },
    )?;
    let mut csv = String::from("epoch,mean_loss,validation_loss\n");
    for r in &outcome.history {
        let val = r.validation_loss.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(csv, "{},{},{}", r.epoch, r.mean_loss, val);
    }
    write(&out.join("loss.csv"), &csv)?;
    outcome.params.save(&out.join("final.ckpt"))?;
    if let Some(msg) = outcome.diagnostic {
        return Err(Error::Numerical(msg));
    }
    Ok(outcome.params)
}

fn cmd_train(cfg: &TrainRun, atlas_path: &Path, scans: &[PathBuf], out: &Path) -> Result<()> {
    let atlas = io::read_atlas(atlas_path)?;
    let images = load_scans(&atlas, scans)?;
    train_on(cfg, atlas, images, out).map(|_| ())
}

enum Segmenter {
    Network(NetworkParams),
    Fixed(GaussianParams, Option<crate::deformation::VelocityField>),
}

fn segment_all(
    seg: &Segmenter,
    model: &ModelSection,
    atlas: &ProbAtlas,
    ids: &[String],
    images: &[Volume],
    out: &Path,
) -> Result<()> {
    ids.par_iter().zip(images.par_iter()).try_for_each(|(id, img)| {
        let cfg = model.for_scan(img)?;
        let dir = out.join(id);
        mkdir(&dir)?;
        let labels = match seg {
            Segmenter::Network(net) => {
                let (v, params) = net.forward(img, atlas)?;
                io::write_params(&params, &dir.join("params.json"))?;
                io::write_velocity(&v, &dir.join("velocity.vol"))?;
                segment(img, atlas, &v, &params, &cfg)?
            }
            Segmenter::Fixed(params, Some(v)) => segment(img, atlas, v, params, &cfg)?,
            Segmenter::Fixed(params, None) => segment_warped(img, atlas, params)?,
        };
        io::write_labels(&labels, &dir.join("seg.vol"))
    })
}

fn cmd_segment(cfg: &SegmentRun, atlas_path: &Path, scans: &[PathBuf], out: &Path) -> Result<()> {
    let seg = match (&cfg.checkpoint, &cfg.params) {
        (Some(c), None) => Segmenter::Network(NetworkParams::load(c)?),
        (None, Some(p)) => {
            let v = cfg.velocity.as_deref().map(io::read_velocity).transpose()?;
            Segmenter::Fixed(io::read_params(p)?, v)
        }
        _ => {
            return Err(Error::Config(
                "segment needs exactly one of `checkpoint` or `params`".into(),
            ))
        }
    };
    let atlas = io::read_atlas(atlas_path)?;
    let ids = unique_ids(scans)?;
    let images = load_scans(&atlas, scans)?;
    segment_all(&seg, &cfg.model, &atlas, &ids, &images, out)
}

/// Writes `dice.csv` (scan_id,label,dice) and `outliers.csv`
/// (label,mean_dice,outliers).
fn evaluate(cfg: &EvalRun, ids: &[String], pairs: &[(LabelMap, LabelMap)], out: &Path) -> Result<()> {
    let num_labels = pairs.iter().map(|(_, t)| t.num_labels()).max().unwrap_or(0) as u32;
    let labels: Vec<u32> = if cfg.labels.is_empty() {
        (0..num_labels).collect()
    } else {
        cfg.labels.clone()
    };
    let scores: Vec<Vec<f64>> = pairs
        .par_iter()
        .map(|(p, t)| labels.iter().map(|&l| dice(p, t, l)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let mut csv = String::from("scan_id,label,dice\n");
    for (id, row) in ids.iter().zip(&scores) {
        for (l, d) in labels.iter().zip(row) {
            let _ = writeln!(csv, "{id},{l},{d}");
        }
    }
    write(&out.join("dice.csv"), &csv)?;
    let mut summary = String::from("label,mean_dice,outliers\n");
    for (k, l) in labels.iter().enumerate() {
        let col: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let mean = if col.is_empty() { f64::NAN } else { col.iter().sum::<f64>() / col.len() as f64 };
        let _ = writeln!(summary, "{l},{mean},{}", outlier_count(&col, cfg.threshold));
    }
    write(&out.join("outliers.csv"), &summary)
}

fn cmd_eval(cfg: &EvalRun, paths: &[PathBuf], out: &Path) -> Result<()> {
    if !paths.len().is_multiple_of(2) {
        return Err(Error::InvalidArgument("eval takes (prediction, truth) pairs".into()));
    }
    let truth_paths: Vec<PathBuf> = paths.iter().skip(1).step_by(2).cloned().collect();
    let ids = unique_ids(&truth_paths)?;
    let pairs = paths
        .par_chunks(2)
        .map(|c| Ok((io::read_labels(&c[0])?, io::read_labels(&c[1])?)))
        .collect::<Result<Vec<_>>>()?;
    evaluate(cfg, &ids, &pairs, out)
}

fn cmd_pipeline(cfg: &PipelineRun, out: &Path) -> Result<()> {
    let total = cfg.num_train + cfg.num_validation + cfg.num_test;
    let synth_cfg = SynthConfig {
        seed: cfg.seed,
        num_scans: total,
        ..cfg.synth.clone()
    };
    let data = out.join("data");
    mkdir(&data)?;
    info!("pipeline: sampling {total} scans");
    cmd_synth(&synth_cfg, &data)?;
    let atlas = io::read_atlas(&data.join("atlas.vol"))?;
    let ids: Vec<String> = (0..total).map(|i| format!("scan_{i:03}")).collect();
    let scan_path = |id: &String| data.join("scans").join(format!("{id}.vol"));
    let images = load_scans(&atlas, &ids.iter().map(scan_path).collect::<Vec<_>>())?;

    info!("pipeline: training");
    let train_dir = out.join("train");
    mkdir(&train_dir)?;
    let train_cfg = TrainRun {
        model: cfg.model.clone(),
        network: NetworkSection {
            seed: cfg.seed,
            ..cfg.network.clone()
        },
        train: TrainSection {
            seed: cfg.seed,
            ..cfg.train.clone()
        },
        validation_scans: cfg.num_validation,
    };
    let split = cfg.num_train + cfg.num_validation;
    let net = train_on(&train_cfg, atlas.clone(), images[..split].to_vec(), &train_dir)?;

    info!("pipeline: segmenting {} test scans", cfg.num_test);
    let seg_dir = out.join("segment");
    mkdir(&seg_dir)?;
    let test_ids = &ids[split..];
    segment_all(&Segmenter::Network(net), &cfg.model, &atlas, test_ids, &images[split..], &seg_dir)?;

    let eval_dir = out.join("eval");
    mkdir(&eval_dir)?;
    let pairs = test_ids
        .iter()
        .map(|id| {
            Ok((
                io::read_labels(&seg_dir.join(id).join("seg.vol"))?,
                io::read_labels(&data.join("labels").join(format!("{id}.vol")))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(&cfg.eval, test_ids, &pairs, &eval_dir)
}

fn seed_of(command: &str, config: &Value) -> Option<u64> {
    let field = |v: &Value, k: &str| v.get(k).and_then(Value::as_u64);
    match command {
        "synth" | "pipeline" => field(config, "seed"),
        "train" => config.get("train").and_then(|t| field(t, "seed")),
        _ => None,
    }
}

/// Runs `command` with its config, then writes the manifest.
pub fn execute(command: &str, config: &Value, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let need = |n: usize| -> Result<()> {
        if inputs.len() < n {
            return Err(Error::InvalidArgument(format!("{command} needs at least {n} input paths")));
        }
        Ok(())
    };
    mkdir(out)?;
    let resolved = match command {
        "synth" => {
            let (c, v) = resolve::<SynthConfig>(config)?;
            cmd_synth(&c, out)?;
            v
        }
        "em-fit" => {
            need(2)?;
            let (c, v) = resolve::<EmRun>(config)?;
            cmd_em_fit(&c, &inputs[0], &inputs[1..], out)?;
            v
        }
        "map-fit" => {
            need(2)?;
            let (c, v) = resolve::<MapRun>(config)?;
            cmd_map_fit(&c, &inputs[0], &inputs[1..], out)?;
            v
        }
        "train" => {
            need(2)?;
            let (c, v) = resolve::<TrainRun>(config)?;
            cmd_train(&c, &inputs[0], &inputs[1..], out)?;
            v
        }
        "segment" => {
            need(2)?;
            let (c, v) = resolve::<SegmentRun>(config)?;
            cmd_segment(&c, &inputs[0], &inputs[1..], out)?;
            v
        }
        "eval" => {
            need(2)?;
            let (c, v) = resolve::<EvalRun>(config)?;
            cmd_eval(&c, inputs, out)?;
            v
        }
        "pipeline" => {
            let (c, v) = resolve::<PipelineRun>(config)?;
            cmd_pipeline(&c, out)?;
            v
        }
        other => return Err(Error::InvalidArgument(format!("unknown command `{other}`"))),
    };
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        seed: seed_of(command, &resolved),
        config: resolved,
        inputs: inputs.to_vec(),
    };
    write_json(&out.join(MANIFEST), &manifest)
}

pub fn rerun(manifest_path: &Path, out: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
    let default_out = manifest_path.parent().unwrap_or(Path::new("."));
    execute(&m.command, &m.config, &m.inputs, out.unwrap_or(default_out))
}

/// Dispatches parsed arguments on a pool of `cli.jobs` threads.
pub fn run(cli: Cli) -> Result<()> {
    if cli.jobs == 0 {
        return Err(Error::InvalidArgument("--jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| {
        let (name, config, inputs, out): (&str, &PathBuf, Vec<PathBuf>, &PathBuf) = match &cli.command {
            Command::Rerun { manifest, out } => return rerun(manifest, out.as_deref()),
            Command::Synth { config, out } => ("synth", config, Vec::new(), out),
            Command::Pipeline { config, out } => ("pipeline", config, Vec::new(), out),
            Command::EmFit { config, atlas, out, scans } => ("em-fit", config, with_atlas(atlas, scans), out),
            Command::MapFit { config, atlas, out, scans } => ("map-fit", config, with_atlas(atlas, scans), out),
            Command::Train { config, atlas, out, scans } => ("train", config, with_atlas(atlas, scans), out),
            Command::Segment { config, atlas, out, scans } => ("segment", config, with_atlas(atlas, scans), out),
            Command::Eval { config, out, pairs } => ("eval", config, pairs.clone(), out),
        };
        execute(name, &read_config(config)?, &inputs, out)
    })
}

fn with_atlas(atlas: &Path, scans: &[PathBuf]) -> Vec<PathBuf> {
    std::iter::once(atlas.to_path_buf()).chain(scans.iter().cloned()).collect()
}

/// One-line, tab-separated diagnostic: `error<TAB>code=N<TAB>kind=K<TAB>message=...`.
pub fn diagnostic(code: i32, kind: &str, message: &str) -> String {
    let flat: String = message.split_whitespace().collect::<Vec<_>>().join(" ");
    format!("error\tcode={code}\tkind={kind}\tmessage={flat}")
}

pub fn error_diagnostic(e: &Error) -> String {
    let kind = match e.kind() {
        ErrorKind::Usage => "usage",
        ErrorKind::Data => "data",
        ErrorKind::Numerical => "numerical",
    };
    diagnostic(e.exit_code(), kind, &e.to_string())
}

/// Entry point shared by the binary and tests: parses `args`, runs, and
/// returns the process exit code, printing diagnostics to stderr.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            eprintln!("{}", diagnostic(1, "usage", &e.to_string()));
            return 1;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_diagnostic(&e));
            e.exit_code()
        }
    }
}
