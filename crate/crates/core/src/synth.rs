//! Sampling from the generative model: synthetic atlases, smooth velocity
//! fields, label maps drawn from a warped atlas, and Gaussian intensities.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::deformation::{exp_ss, warp_atlas, DeformationField, VelocityField, DEFAULT_SS_STEPS};
use crate::error::{Error, Result};
use crate::likelihood::GaussianParams;
use crate::volume::{normalize_atlas, GridShape, LabelMap, ProbAtlas, Volume};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Separable Gaussian blur of each channel of a planar `[C][N]` buffer,
/// replicate boundary, kernel truncated at `3 sigma`.
pub fn gaussian_blur(data: &mut [f64], channels: usize, shape: &GridShape, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let dims = shape.dims();
    let strides = shape.strides();
    let n = shape.num_voxels();
    let mut scratch = vec![0.0; n];
    for c in 0..channels {
        let chan = &mut data[c * n..(c + 1) * n];
        for (axis, (&len, &stride)) in dims.iter().zip(&strides).enumerate() {
            for j in 0..n {
                let pos = (j / stride) % len;
                let base = j - pos * stride;
                let mut acc = 0.0;
                for (t, &k) in kernel.iter().enumerate() {
                    let p = (pos as isize + t as isize - radius).clamp(0, len as isize - 1) as usize;
                    acc += k * chan[base + p * stride];
                }
                scratch[j] = acc;
            }
            let _ = axis;
            chan.copy_from_slice(&scratch);
        }
    }
}

/// `L` nested ellipses (label 0 is the background), one-hot encoded and
/// blurred by `smoothness` voxels. Labels are ungrouped; regroup with
/// [`ProbAtlas::with_label_groups`].
pub fn make_atlas(shape: &GridShape, num_labels: usize, smoothness: f64, seed: u64) -> Result<ProbAtlas> {
    if num_labels < 2 {
        return Err(Error::InvalidArgument("a synthetic atlas needs at least 2 labels".into()));
    }
    if !(smoothness >= 0.0 && smoothness.is_finite()) {
        return Err(Error::InvalidArgument("smoothness must be nonnegative".into()));
    }
    let dims = shape.dims();
    let min_dim = *dims.iter().min().expect("nonempty dims") as f64;
    if min_dim < 4.0 {
        return Err(Error::Shape("synthetic atlases need at least 4 samples per axis".into()));
    }
    let mut r = rng(seed);
    let center: Vec<f64> = dims
        .iter()
        .map(|&d| (d as f64 - 1.0) / 2.0 + r.gen_range(-0.05..0.05) * d as f64)
        .collect();
    let aspect: Vec<f64> = dims.iter().map(|_| r.gen_range(0.85..1.0)).collect();
    let outer = 0.42 * min_dim;
    let fg = num_labels - 1;
    let radii: Vec<f64> = (0..fg)
        .map(|k| outer * (1.0 - 0.75 * k as f64 / fg as f64))
        .collect();

    let n = shape.num_voxels();
    let mut weights = vec![0.0; num_labels * n];
    for j in 0..n {
        let x = shape.coords(j);
        let rho = x
            .iter()
            .zip(&center)
            .zip(&aspect)
            .map(|((&xi, ci), ai)| ((xi as f64 - ci) / ai).powi(2))
            .sum::<f64>()
            .sqrt();
        let label = radii.iter().take_while(|&&rad| rho <= rad).count();
        weights[label * n + j] = 1.0;
    }
    gaussian_blur(&mut weights, num_labels, shape, smoothness);
    normalize_atlas(shape.clone(), num_labels, &weights, (0..num_labels).collect())
}

/// Gaussian-filtered white noise rescaled so that `max |v| = amplitude`.
pub fn sample_velocity(shape: &GridShape, amplitude: f64, smoothness: f64, seed: u64) -> Result<VelocityField> {
    if !(amplitude >= 0.0 && amplitude.is_finite()) {
        return Err(Error::InvalidArgument("amplitude must be nonnegative".into()));
    }
    let d = shape.ndim();
    let n = shape.num_voxels();
    if amplitude == 0.0 {
        return Ok(VelocityField::zeros(shape.clone(), 1));
    }
    let mut r = rng(seed);
    let mut data: Vec<f64> = (0..d * n).map(|_| r.sample(StandardNormal)).collect();
    gaussian_blur(&mut data, d, shape, smoothness);
    let peak = data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { amplitude / peak } else { 0.0 };
    VelocityField::new(shape.clone(), 1, data.iter().map(|v| (v * scale) as f32).collect())
}

/// Draws each voxel's label from the atlas column at `phi(x_j)`.
pub fn sample_segmentation(atlas: &ProbAtlas, phi: &DeformationField, seed: u64) -> Result<LabelMap> {
    let warped = warp_atlas(atlas, phi)?;
    let n = atlas.shape().num_voxels();
    let mut r = rng(seed);
    let mut labels = Vec::with_capacity(n);
    let mut col = vec![0.0f64; atlas.num_labels()];
    for j in 0..n {
        for (l, w) in col.iter_mut().enumerate() {
            *w = warped.prob(l, j) as f64;
        }
        let dist = WeightedIndex::new(&col)
            .map_err(|e| Error::Atlas(format!("cannot sample voxel {j}: {e}")))?;
        labels.push(dist.sample(&mut r) as u32);
    }
    LabelMap::new(atlas.shape().clone(), atlas.num_labels(), labels)
}

/// Independent draws `I_j ~ N(mu_c(S_j), var_c(S_j))`.
pub fn sample_image(s: &LabelMap, params: &GaussianParams, label_groups: &[usize], seed: u64) -> Result<Volume> {
    params.validate()?;
    if label_groups.len() != s.num_labels() {
        return Err(Error::InvalidArgument(format!(
            "{} label groups for {} labels",
            label_groups.len(),
            s.num_labels()
        )));
    }
    let mut r = rng(seed);
    let data = s
        .labels()
        .iter()
        .map(|&l| {
            let c = label_groups[l as usize];
            let z: f64 = r.sample(StandardNormal);
            (params.mu[c] + params.var[c].sqrt() * z) as f32
        })
        .collect();
    Volume::new(s.shape().clone(), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub dims: Vec<usize>,
    pub num_labels: usize,
    /// Label -> class map; identity when empty.
    pub label_groups: Vec<usize>,
    pub atlas_smoothness: f64,
    pub num_scans: usize,
    pub warp_amplitude: f64,
    pub warp_smoothness: f64,
    /// Class means and standard deviations.
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Per-scan uniform jitter of each class mean, as a fraction of the
    /// mean range.
    pub mean_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: vec![32, 32],
            num_labels: 4,
            label_groups: vec![0, 1, 1, 2],
            atlas_smoothness: 1.5,
            num_scans: 10,
            warp_amplitude: 2.0,
            warp_smoothness: 4.0,
            means: vec![5.0, 15.0, 25.0],
            stds: vec![1.5, 1.5, 1.5],
            mean_jitter: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn groups(&self) -> Vec<usize> {
        if self.label_groups.is_empty() {
            (0..self.num_labels).collect()
        } else {
            self.label_groups.clone()
        }
    }

    pub fn base_params(&self) -> Result<GaussianParams> {
        GaussianParams::new(
            self.means.clone(),
            self.stds.iter().map(|s| s * s).collect(),
            self.groups(),
        )
    }
}

/// One scan with its full ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticScan {
    pub velocity: VelocityField,
    pub warp: DeformationField,
    pub labels: LabelMap,
    pub image: Volume,
    pub params: GaussianParams,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub atlas: ProbAtlas,
    pub scans: Vec<SyntheticScan>,
}

pub fn synth_atlas(cfg: &SynthConfig) -> Result<ProbAtlas> {
    let shape = GridShape::new(&cfg.dims)?;
    let mut master = rng(cfg.seed);
    make_atlas(&shape, cfg.num_labels, cfg.atlas_smoothness, master.gen())?.with_label_groups(cfg.groups())
}

/// Scan `index` of the dataset described by `cfg`. Scans are independent,
/// so any subset can be regenerated.
pub fn synth_scan(cfg: &SynthConfig, atlas: &ProbAtlas, index: usize) -> Result<SyntheticScan> {
    let base = cfg.base_params()?;
    let mut r = rng(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    r.set_stream(index as u64 + 1);
    let (sv, ss, si): (u64, u64, u64) = (r.gen(), r.gen(), r.gen());
    let lo = base.mu.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = base.mu.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let jitter = cfg.mean_jitter * (hi - lo);
    let mu = base
        .mu
        .iter()
        .map(|m| m + if jitter > 0.0 { r.gen_range(-jitter..=jitter) } else { 0.0 })
        .collect();
    let params = GaussianParams::new(mu, base.var.clone(), base.label_groups.clone())?;

    let velocity = sample_velocity(atlas.shape(), cfg.warp_amplitude, cfg.warp_smoothness, sv)?;
    let warp = exp_ss(&velocity, DEFAULT_SS_STEPS)?;
    let labels = sample_segmentation(atlas, &warp, ss)?;
    let image = sample_image(&labels, &params, atlas.label_groups(), si)?;
    Ok(SyntheticScan {
        velocity,
        warp,
        labels,
        image,
        params,
    })
}

pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.means.len() != cfg.stds.len() {
        return Err(Error::Config("means and stds must have the same length".into()));
    }
    let atlas = synth_atlas(cfg)?;
    let scans = (0..cfg.num_scans)
        .map(|i| synth_scan(cfg, &atlas, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { atlas, scans })
}
