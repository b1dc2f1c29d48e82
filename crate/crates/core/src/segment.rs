//! Voxel-wise MAP labels, label posteriors, and overlap metrics.

use std::f64::consts::PI;

use crate::deformation::{densify, exp_ss, warp_atlas, DeformationField, VelocityField};
use crate::error::{Error, Result};
use crate::likelihood::{GaussianParams, ModelConfig};
use crate::volume::{LabelMap, ProbAtlas, Volume};

/// Dice scores below this count as outliers.
pub const DEFAULT_OUTLIER_THRESHOLD: f64 = 0.5;

/// Unnormalized log posterior of every label at voxel `j`, into `out`.
fn label_scores(img: &Volume, atlas: &ProbAtlas, params: &GaussianParams, norms: &[f64], j: usize, out: &mut [f64]) {
    let x = img.data()[j] as f64;
    for (l, s) in out.iter_mut().enumerate() {
        let p = atlas.prob(l, j) as f64;
        *s = if p > 0.0 {
            let c = atlas.label_groups()[l];
            p.ln() + norms[c] - (x - params.mu[c]).powi(2) / (2.0 * params.var[c])
        } else {
            f64::NEG_INFINITY
        };
    }
}

fn prepare(img: &Volume, atlas: &ProbAtlas, params: &GaussianParams) -> Result<Vec<f64>> {
    img.shape().same_dims(atlas.shape(), "segment")?;
    params.check_against(atlas)?;
    Ok(params.var.iter().map(|v| -0.5 * (2.0 * PI * v).ln()).collect())
}

/// Argmax over the original labels of `log A(l) + log N(I; mu_c(l), var_c(l))`
/// for an already-warped atlas. Ties go to the lowest label index.
pub fn segment_warped(img: &Volume, warped: &ProbAtlas, params: &GaussianParams) -> Result<LabelMap> {
    let norms = prepare(img, warped, params)?;
    let n = img.shape().num_voxels();
    let mut scores = vec![0.0; warped.num_labels()];
    let mut labels = Vec::with_capacity(n);
    for j in 0..n {
        label_scores(img, warped, params, &norms, j, &mut scores);
        let mut best = 0;
        for l in 1..scores.len() {
            if scores[l] > scores[best] {
                best = l;
            }
        }
        if scores[best] == f64::NEG_INFINITY {
            return Err(Error::Atlas(format!("zero prior mass at voxel {j}")));
        }
        labels.push(best as u32);
    }
    LabelMap::new(img.shape().clone(), warped.num_labels(), labels)
}

/// Per-voxel normalized label posterior, planar `[L][N]`.
pub fn posterior_warped(img: &Volume, warped: &ProbAtlas, params: &GaussianParams) -> Result<Vec<f64>> {
    let norms = prepare(img, warped, params)?;
    let n = img.shape().num_voxels();
    let l_count = warped.num_labels();
    let mut scores = vec![0.0; l_count];
    let mut out = vec![0.0; l_count * n];
    for j in 0..n {
        label_scores(img, warped, params, &norms, j, &mut scores);
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return Err(Error::Atlas(format!("zero total mass at voxel {j}")));
        }
        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
        for l in 0..l_count {
            out[l * n + j] = (scores[l] - m).exp() / z;
        }
    }
    Ok(out)
}

/// The warp `exp(v)` on the atlas grid, for a velocity of any stride.
pub fn warp_from_velocity(atlas: &ProbAtlas, v: &VelocityField, cfg: &ModelConfig) -> Result<DeformationField> {
    let dense = densify(v, atlas.shape())?;
    exp_ss(&dense, cfg.ss_steps)
}

pub fn segment(
    img: &Volume,
    atlas: &ProbAtlas,
    v: &VelocityField,
    params: &GaussianParams,
    cfg: &ModelConfig,
) -> Result<LabelMap> {
    let phi = warp_from_velocity(atlas, v, cfg)?;
    segment_warped(img, &warp_atlas(atlas, &phi)?, params)
}

pub fn posterior(
    img: &Volume,
    atlas: &ProbAtlas,
    v: &VelocityField,
    params: &GaussianParams,
    cfg: &ModelConfig,
) -> Result<Vec<f64>> {
    let phi = warp_from_velocity(atlas, v, cfg)?;
    posterior_warped(img, &warp_atlas(atlas, &phi)?, params)
}

/// `2 |X ∩ Y| / (|X| + |Y|)` for the voxels labelled `label`; 1 when both are empty.
pub fn dice(a: &LabelMap, b: &LabelMap, label: u32) -> Result<f64> {
    a.shape().same_dims(b.shape(), "dice")?;
    let (mut x, mut y, mut both) = (0usize, 0usize, 0usize);
    for (&p, &q) in a.labels().iter().zip(b.labels()) {
        let (ip, iq) = (p == label, q == label);
        x += ip as usize;
        y += iq as usize;
        both += (ip && iq) as usize;
    }
    if x + y == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (x + y) as f64)
}

/// Dice for every label `0..L`.
pub fn dice_per_label(a: &LabelMap, b: &LabelMap) -> Result<Vec<f64>> {
    let l = a.num_labels().max(b.num_labels());
    (0..l as u32).map(|k| dice(a, b, k)).collect()
}

pub fn outlier_count(scores: &[f64], threshold: f64) -> usize {
    scores.iter().filter(|&&s| s < threshold).count()
}
