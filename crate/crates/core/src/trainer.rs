//! Unsupervised training of the network on a pool of unlabeled scans by
//! minimizing the per-scan loss averaged over minibatches.

use log::{error, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real};
use crate::error::{Error, Result};
use crate::likelihood::{build_loss, ModelConfig, ScanContext};
use crate::network::NetworkParams;
use crate::optim::Adam;
use crate::volume::{ProbAtlas, Volume};

/// Unlabeled scans sharing one atlas grid. Label maps never enter training.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    atlas: ProbAtlas,
    scans: Vec<Volume>,
}

impl TrainingSet {
    pub fn new(atlas: ProbAtlas, scans: Vec<Volume>) -> Result<Self> {
        for s in &scans {
            s.shape().same_dims(atlas.shape(), "training scan")?;
        }
        Ok(Self { atlas, scans })
    }

    pub fn atlas(&self) -> &ProbAtlas {
        &self.atlas
    }

    pub fn scans(&self) -> &[Volume] {
        &self.scans
    }

    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 disables periodic saves.
    pub checkpoint_interval: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 0,
            checkpoint_interval: 50,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-scan loss over the epoch, each evaluated before its batch's update.
    pub mean_loss: f64,
    pub validation_loss: Option<f64>,
}

/// Why a checkpoint is being offered to the caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Periodic,
    BestValidation,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub history: Vec<EpochRecord>,
    /// Set when training stopped on a non-finite loss; `params` are then
    /// the last finite ones.
    pub diagnostic: Option<String>,
}

fn check_compat(net: &NetworkParams, atlas: &ProbAtlas, model: &ModelConfig) -> Result<()> {
    let d = net.descriptor();
    if d.velocity_stride != model.velocity_stride {
        return Err(Error::Config(format!(
            "network velocity stride {} differs from the model's {}",
            d.velocity_stride, model.velocity_stride
        )));
    }
    if atlas.shape().dims() != d.dims.as_slice() || atlas.label_groups() != d.label_groups.as_slice() {
        return Err(Error::Shape("atlas does not match the network descriptor".into()));
    }
    Ok(())
}

/// Loss of one scan under the network, and optionally its gradient with
/// respect to every network parameter (flat, declaration order). `values`
/// overrides the stored parameters, e.g. with `f64` values.
pub fn scan_objective<T: Real>(
    net: &NetworkParams,
    values: Option<&[f64]>,
    ctx: &ScanContext<T>,
    img: &Volume,
    atlas: &ProbAtlas,
    model: &ModelConfig,
    with_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::<T>::new();
    let leaves = match values {
        Some(v) => net.leaves_from(&mut g, v, with_grad)?,
        None => net.leaves(&mut g, with_grad)?,
    };
    let out = net.forward_graph(&mut g, &leaves, img, atlas)?;
    let terms = build_loss(&mut g, ctx, out.velocity, out.mu, out.var, model)?;
    let value = g.value(terms.loss).item().as_f64();
    if !with_grad || !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let grads = g.backward(terms.loss)?;
    let mut flat = Vec::with_capacity(net.num_parameters());
    for &leaf in &leaves {
        flat.extend(grads.wrt(leaf).data().iter().map(|x| x.as_f64()));
    }
    Ok((value, flat))
}

fn contexts(data: &TrainingSet) -> Result<Vec<ScanContext<f32>>> {
    data.scans
        .par_iter()
        .map(|s| ScanContext::new(s, &data.atlas))
        .collect()
}

/// Per-scan losses of the network, without updates.
pub fn evaluate_pool(net: &NetworkParams, data: &TrainingSet, model: &ModelConfig) -> Result<Vec<f64>> {
    check_compat(net, &data.atlas, model)?;
    let ctxs = contexts(data)?;
    data.scans
        .par_iter()
        .zip(ctxs.par_iter())
        .map(|(img, ctx)| Ok(scan_objective(net, None, ctx, img, &data.atlas, model, false)?.0))
        .collect()
}

/// [`train_with`] without validation or checkpoint hooks.
pub fn train(net: &NetworkParams, data: &TrainingSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(net, data, None, cfg, |_, _, _| Ok(()))
}

/// Minibatch Adam on the mean batch loss. Batches are drawn from a
/// per-epoch shuffle seeded by `cfg.seed`; the last short batch is kept.
/// Per-scan gradients may be computed in parallel but are summed in batch
/// order, so results do not depend on the thread count.
///
/// `on_checkpoint(kind, epoch, params)` is called every
/// `checkpoint_interval` epochs and whenever the validation loss improves.
pub fn train_with(
    net: &NetworkParams,
    data: &TrainingSet,
    validation: Option<&TrainingSet>,
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(CheckpointKind, usize, &NetworkParams) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut params = net.clone();
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            params,
            history: Vec::new(),
            diagnostic: None,
        });
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one scan".into()));
    }
    check_compat(net, &data.atlas, &cfg.model)?;
    if let Some(v) = validation {
        check_compat(net, &v.atlas, &cfg.model)?;
    }
    let ctxs = contexts(data)?;
    let mut flat = params.flat();
    let mut adam = Adam::uniform(flat.len(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = f64::INFINITY;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, Vec<f64>)>> = batch
                .par_iter()
                .map(|&i| scan_objective(&params, None, &ctxs[i], &data.scans[i], &data.atlas, &cfg.model, true))
                .collect();
            let mut grad = vec![0.0; flat.len()];
            let scale = 1.0 / batch.len() as f64;
            for (r, &i) in results.into_iter().zip(batch) {
                let (loss, g) = r?;
                if !loss.is_finite() || g.iter().any(|x| !x.is_finite()) {
                    let msg = format!("train: non-finite loss or gradient on scan {i} in epoch {epoch}");
                    error!("{msg}");
                    return Ok(TrainOutcome {
                        params,
                        history,
                        diagnostic: Some(msg),
                    });
                }
                total += loss;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += scale * b;
                }
            }
            adam.step_f32(&mut flat, &grad);
            if let Err(e) = params.set_flat(&flat) {
                let msg = format!("train: parameters became non-finite in epoch {epoch}: {e}");
                error!("{msg}");
                return Ok(TrainOutcome {
                    params,
                    history,
                    diagnostic: Some(msg),
                });
            }
        }
        let mean_loss = total / data.len() as f64;
        let validation_loss = match validation {
            Some(v) if !v.is_empty() => {
                let losses = evaluate_pool(&params, v, &cfg.model)?;
                Some(losses.iter().sum::<f64>() / losses.len() as f64)
            }
            _ => None,
        };
        info!("epoch {epoch}: loss {mean_loss:.4} validation {validation_loss:?}");
        history.push(EpochRecord {
            epoch,
            mean_loss,
            validation_loss,
        });
        if cfg.checkpoint_interval > 0 && epoch % cfg.checkpoint_interval == 0 {
            on_checkpoint(CheckpointKind::Periodic, epoch, &params)?;
        }
        if let Some(vl) = validation_loss {
            if vl < best {
                best = vl;
                on_checkpoint(CheckpointKind::BestValidation, epoch, &params)?;
            }
        }
    }
    Ok(TrainOutcome {
        params,
        history,
        diagnostic: None,
    })
}
