//! EM point estimation of the Gaussian parameters under an undeformed atlas.
//!
//! Works on the merged classes: the prior of class `c` at a voxel is the sum
//! of the probabilities of the labels grouped into `c`.

use std::f64::consts::PI;

use log::warn;

use crate::error::{Error, Result};
use crate::likelihood::{data_term, GaussianParams};
use crate::volume::{ProbAtlas, Volume};

/// Classes whose total responsibility falls below this keep their parameters.
pub const MIN_CLASS_MASS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct EmSettings {
    pub max_iter: usize,
    /// Absolute tolerance on the change of the data term; `None` means
    /// `1e-6 * |Omega|`.
    pub tol: Option<f64>,
    pub var_floor: f64,
}

impl Default for EmSettings {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: None,
            var_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmState {
    pub params: GaussianParams,
    /// Planar `[C][N]` class posteriors.
    pub responsibilities: Vec<f64>,
    pub data_term_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Classes that were starved of responsibility at some iteration.
    pub starved_classes: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct MStep {
    pub params: GaussianParams,
    pub starved: Vec<usize>,
}

/// Class posteriors `gamma[c][j] ∝ Ã(c, x_j) N(I_j; mu_c, var_c)`.
pub fn e_step(img: &Volume, atlas: &ProbAtlas, params: &GaussianParams) -> Result<Vec<f64>> {
    img.shape().same_dims(atlas.shape(), "e_step")?;
    params.check_against(atlas)?;
    let n = img.shape().num_voxels();
    let c = params.num_classes();
    let priors = atlas.class_priors();
    let norms: Vec<f64> = params.var.iter().map(|v| -0.5 * (2.0 * PI * v).ln()).collect();
    let mut resp = vec![0.0; c * n];
    let mut logs = vec![0.0; c];
    for j in 0..n {
        let x = img.data()[j] as f64;
        let mut m = f64::NEG_INFINITY;
        for k in 0..c {
            let p = priors[k * n + j];
            logs[k] = if p > 0.0 {
                p.ln() + norms[k] - (x - params.mu[k]).powi(2) / (2.0 * params.var[k])
            } else {
                f64::NEG_INFINITY
            };
            m = m.max(logs[k]);
        }
        if m == f64::NEG_INFINITY {
            return Err(Error::Atlas(format!("zero prior mass at voxel {j}")));
        }
        let z: f64 = logs.iter().map(|l| (l - m).exp()).sum();
        for k in 0..c {
            resp[k * n + j] = (logs[k] - m).exp() / z;
        }
    }
    Ok(resp)
}

/// Weighted means and variances. Classes with (near) zero mass keep the
/// values from `prev` and are reported in [`MStep::starved`].
pub fn m_step(img: &Volume, resp: &[f64], prev: &GaussianParams, var_floor: f64) -> Result<MStep> {
    let n = img.shape().num_voxels();
    let c = prev.num_classes();
    if resp.len() != c * n {
        return Err(Error::Shape(format!(
            "{} responsibilities for {c} classes over {n} voxels",
            resp.len()
        )));
    }
    let mut params = prev.clone();
    let mut starved = Vec::new();
    for k in 0..c {
        let r = &resp[k * n..(k + 1) * n];
        let mass: f64 = r.iter().sum();
        if mass < MIN_CLASS_MASS {
            warn!("class {k} received no responsibility; keeping its previous parameters");
            starved.push(k);
            continue;
        }
        let mu = r.iter().zip(img.data()).map(|(g, &x)| g * x as f64).sum::<f64>() / mass;
        let var = r
            .iter()
            .zip(img.data())
            .map(|(g, &x)| g * (x as f64 - mu).powi(2))
            .sum::<f64>()
            / mass;
        params.mu[k] = mu;
        params.var[k] = var.max(var_floor);
    }
    Ok(MStep { params, starved })
}

/// Atlas-weighted initialization: an M-step with the class priors as
/// responsibilities.
pub fn init_params(img: &Volume, atlas: &ProbAtlas, var_floor: f64) -> Result<GaussianParams> {
    img.shape().same_dims(atlas.shape(), "init_params")?;
    let c = atlas.num_classes();
    let (lo, hi) = img.range();
    let spread = ((hi - lo) as f64).powi(2).max(var_floor);
    let seed = GaussianParams::new(vec![0.5 * (lo + hi) as f64; c], vec![spread; c], atlas.label_groups().to_vec())?;
    Ok(m_step(img, &atlas.class_priors(), &seed, var_floor)?.params)
}

pub fn em_fit(img: &Volume, atlas: &ProbAtlas, init: &GaussianParams, settings: &EmSettings) -> Result<EmState> {
    if settings.max_iter == 0 {
        return Err(Error::Config("EM needs max_iter >= 1".into()));
    }
    let tol = settings
        .tol
        .unwrap_or(1e-6 * img.shape().num_voxels() as f64);
    if !(tol > 0.0) {
        return Err(Error::Config("EM tolerance must be positive".into()));
    }
    let mut params = init.clone();
    let mut history = vec![data_term(img, atlas, &params)?];
    let mut starved = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut resp = Vec::new();
    while iterations < settings.max_iter {
        iterations += 1;
        resp = e_step(img, atlas, &params)?;
        let step = m_step(img, &resp, &params, settings.var_floor)?;
        for k in step.starved {
            if !starved.contains(&k) {
                starved.push(k);
            }
        }
        params = step.params;
        let dt = data_term(img, atlas, &params)?;
        if !dt.is_finite() {
            return Err(Error::Numerical(format!("EM data term became {dt} at iteration {iterations}")));
        }
        let prev = *history.last().expect("history starts non-empty");
        history.push(dt);
        if (prev - dt).abs() < tol {
            converged = true;
            break;
        }
    }
    // responsibilities consistent with the returned parameters
    if converged || !resp.is_empty() {
        resp = e_step(img, atlas, &params)?;
    }
    Ok(EmState {
        params,
        responsibilities: resp,
        data_term_history: history,
        iterations,
        converged,
        starved_classes: starved,
    })
}
