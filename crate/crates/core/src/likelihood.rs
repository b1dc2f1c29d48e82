//! Gaussian intensity likelihoods and the unsupervised loss
//! `-sum_j log sum_l N(I_j; mu_c(l), var_c(l)) A(l, phi(x_j)) + lambda ||grad u||^2`.
//!
//! Additive constants (the log-partition of the deformation prior and the
//! flat prior on the Gaussian parameters) are dropped throughout.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::deformation::{self, identity_grid, VelocityField};
use crate::error::{Error, Result};
use crate::volume::{validate_groups, ProbAtlas, Volume};

/// Per-class means and variances, with the label -> class grouping they
/// were fitted under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
    pub label_groups: Vec<usize>,
}

impl GaussianParams {
    pub fn new(mu: Vec<f64>, var: Vec<f64>, label_groups: Vec<usize>) -> Result<Self> {
        let p = Self { mu, var, label_groups };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.is_empty() || self.mu.len() != self.var.len() {
            return Err(Error::InvalidArgument(format!(
                "{} means for {} variances",
                self.mu.len(),
                self.var.len()
            )));
        }
        if self.mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("means must be finite".into()));
        }
        if self.var.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument("variances must be positive and finite".into()));
        }
        let c = validate_groups(self.label_groups.len(), &self.label_groups)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        if c != self.mu.len() {
            return Err(Error::InvalidArgument(format!(
                "label_groups name {c} classes but {} are parameterized",
                self.mu.len()
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.mu.len()
    }

    /// Parameters after the intensity map `I -> a I + b`.
    pub fn affine(&self, a: f64, b: f64) -> Self {
        Self {
            mu: self.mu.iter().map(|m| a * m + b).collect(),
            var: self.var.iter().map(|v| a * a * v).collect(),
            label_groups: self.label_groups.clone(),
        }
    }

    pub(crate) fn check_against(&self, atlas: &ProbAtlas) -> Result<()> {
        if self.label_groups != atlas.label_groups() {
            return Err(Error::Shape(format!(
                "parameters group labels as {:?} but the atlas uses {:?}",
                self.label_groups,
                atlas.label_groups()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Weight of the deformation penalty.
    pub lambda: f64,
    pub ss_steps: usize,
    pub velocity_stride: usize,
    /// Lower bound added to every variance, in intensity units squared.
    pub var_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            ss_steps: deformation::DEFAULT_SS_STEPS,
            velocity_stride: 1,
            var_floor: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be a finite nonnegative number".into()));
        }
        if self.ss_steps == 0 || self.velocity_stride == 0 {
            return Err(Error::Config("ss_steps and velocity_stride must be at least 1".into()));
        }
        if !(self.var_floor > 0.0 && self.var_floor.is_finite()) {
            return Err(Error::Config("var_floor must be positive".into()));
        }
        Ok(())
    }

    /// Sets the variance floor to `1e-6 * range^2`.
    pub fn with_intensity_range(mut self, range: f64) -> Self {
        self.var_floor = 1e-6 * (range * range).max(f64::MIN_POSITIVE);
        self
    }
}

/// Voxel-wise `log N(I_j; mu_c, var_c)`.
pub fn log_gauss_map(img: &Volume, params: &GaussianParams, class: usize, var_floor: f64) -> Result<Volume> {
    if class >= params.num_classes() {
        return Err(Error::InvalidArgument(format!("class {class} out of range")));
    }
    let (mu, var) = (params.mu[class], params.var[class]);
    if var < var_floor {
        return Err(Error::Numerical(format!(
            "variance {var} of class {class} is below the floor {var_floor}"
        )));
    }
    let norm = -0.5 * (2.0 * PI * var).ln();
    let data = img
        .data()
        .iter()
        .map(|&x| (norm - (x as f64 - mu).powi(2) / (2.0 * var)) as f32)
        .collect();
    Volume::new(img.shape().clone(), data)
}

/// `-sum_j logsumexp_l [log A(l, j) + log N(I_j; mu_c(l), var_c(l))]`, with
/// zero-probability labels excluded.
pub fn data_term(img: &Volume, warped: &ProbAtlas, params: &GaussianParams) -> Result<f64> {
    img.shape().same_dims(warped.shape(), "data_term")?;
    params.check_against(warped)?;
    let n = img.shape().num_voxels();
    let groups = warped.label_groups();
    let norms: Vec<f64> = params.var.iter().map(|v| -0.5 * (2.0 * PI * v).ln()).collect();
    let mut terms = vec![0.0f64; warped.num_labels()];
    let mut total = 0.0;
    for j in 0..n {
        let x = img.data()[j] as f64;
        let mut m = f64::NEG_INFINITY;
        for (l, t) in terms.iter_mut().enumerate() {
            let p = warped.prob(l, j) as f64;
            *t = if p > 0.0 {
                let c = groups[l];
                p.ln() + norms[c] - (x - params.mu[c]).powi(2) / (2.0 * params.var[c])
            } else {
                f64::NEG_INFINITY
            };
            m = m.max(*t);
        }
        if m == f64::NEG_INFINITY {
            return Err(Error::Atlas(format!("every label has zero prior at voxel {j}")));
        }
        let s: f64 = terms.iter().map(|t| (t - m).exp()).sum();
        total -= m + s.ln();
    }
    Ok(total)
}

/// Per-scan constants of the loss graph.
pub struct ScanContext<T: Real> {
    /// Image replicated once per class, `[C, dims..]`.
    image: Tensor<T>,
    /// Planar atlas, `[L, dims..]`.
    atlas: Tensor<T>,
    id: Tensor<T>,
    groups: Vec<usize>,
    dims: Vec<usize>,
}

impl<T: Real> ScanContext<T> {
    pub fn new(img: &Volume, atlas: &ProbAtlas) -> Result<Self> {
        img.shape().same_dims(atlas.shape(), "loss")?;
        let dims = img.shape().dims().to_vec();
        let c = atlas.num_classes();
        let mut shape = vec![c];
        shape.extend_from_slice(&dims);
        let rep: Vec<f32> = (0..c).flat_map(|_| img.data().iter().copied()).collect();
        let image = Tensor::from_f32(&shape, &rep)?;
        shape[0] = atlas.num_labels();
        let atlas_t = Tensor::from_f32(&shape, atlas.probs())?;
        Ok(Self {
            image,
            atlas: atlas_t,
            id: identity_grid(img.shape()),
            groups: atlas.label_groups().to_vec(),
            dims,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.image.shape()[0]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub loss: Var,
    pub data: Var,
    pub penalty: Var,
    /// Dense displacement `u` of the warp.
    pub displacement: Var,
}

/// `var = exp(s) + floor`.
pub fn variance_from_log<T: Real>(g: &mut Graph<T>, s: Var, floor: f64) -> Result<Var> {
    let e = g.exp(s);
    g.shift(e, floor)
}

/// Builds the loss for velocity `v` (`[D, sample dims..]` at `stride`), class
/// means `mu: [C]` and variances `var: [C]`.
pub fn build_loss<T: Real>(
    g: &mut Graph<T>,
    ctx: &ScanContext<T>,
    v: Var,
    mu: Var,
    var: Var,
    cfg: &ModelConfig,
) -> Result<LossTerms> {
    let c = ctx.num_classes();
    if g.shape(mu) != [c] || g.shape(var) != [c] {
        return Err(Error::Shape(format!(
            "expected {c} class means/variances, got {:?} and {:?}",
            g.shape(mu),
            g.shape(var)
        )));
    }
    let id = g.constant(ctx.id.clone());
    let v_full = deformation::upsample_graph(g, v, cfg.velocity_stride, &ctx.dims)?;
    let u = deformation::exp_ss_graph(g, v_full, id, cfg.ss_steps)?;
    let atlas = g.constant(ctx.atlas.clone());
    let warped = deformation::warp_graph(g, atlas, u, id)?;
    let log_prior = g.log(warped);

    // log N per class over the grid, then spread to labels
    let image = g.constant(ctx.image.clone());
    let diff = g.sub(image, mu)?;
    let sq = g.square(diff);
    let two_var = g.scale(var, 2.0)?;
    let quad = g.div(sq, two_var)?;
    let log_var = {
        let tv = g.scale(var, 2.0 * std::f64::consts::PI)?;
        g.log(tv)
    };
    let half_log = g.scale(log_var, -0.5)?;
    let log_n_class = g.sub(half_log, quad)?;
    let log_n = g.gather(log_n_class, &ctx.groups)?;

    let joint = g.add(log_prior, log_n)?;
    let lse = g.logsumexp_labels(joint)?;
    let total = g.sum(lse);
    let data = g.neg(total);
    let penalty = deformation::grad_penalty_graph(g, u)?;
    let weighted = g.scale(penalty, cfg.lambda)?;
    let loss = g.add(data, weighted)?;
    Ok(LossTerms {
        loss,
        data,
        penalty,
        displacement: u,
    })
}

/// Loss value for fixed parameters, evaluated in `f64`.
pub fn loss(
    img: &Volume,
    atlas: &ProbAtlas,
    v: &VelocityField,
    params: &GaussianParams,
    cfg: &ModelConfig,
) -> Result<f64> {
    cfg.validate()?;
    params.check_against(atlas)?;
    if v.stride() != cfg.velocity_stride {
        return Err(Error::Shape(format!(
            "velocity stride {} does not match the configured {}",
            v.stride(),
            cfg.velocity_stride
        )));
    }
    let ctx = ScanContext::<f64>::new(img, atlas)?;
    let mut g = Graph::<f64>::new();
    let vv = g.constant(v.tensor());
    let mu = g.constant(Tensor::new(&[params.num_classes()], params.mu.clone())?);
    let var = g.constant(Tensor::new(&[params.num_classes()], params.var.clone())?);
    let terms = build_loss(&mut g, &ctx, vv, mu, var, cfg)?;
    let value = g.value(terms.loss).item();
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss evaluated to {value}")));
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::GridShape;

    fn one_voxel_img(x: f32) -> Volume {
        // grids need two samples per axis; replicate the voxel
        Volume::filled(GridShape::new(&[2, 2]).unwrap(), x).unwrap()
    }

    fn uniform_atlas(probs: &[f32], groups: Vec<usize>) -> ProbAtlas {
        let planar = probs.iter().flat_map(|&p| std::iter::repeat_n(p, 4)).collect();
        ProbAtlas::new(GridShape::new(&[2, 2]).unwrap(), probs.len(), planar, groups).unwrap()
    }

    #[test]
    fn log_gauss_examples() {
        let img = one_voxel_img(2.0);
        let p = GaussianParams::new(vec![2.0], vec![1.0], vec![0]).unwrap();
        let v = log_gauss_map(&img, &p, 0, 1e-6).unwrap();
        assert!((v.data()[0] as f64 + 0.918_938_533).abs() < 1e-6);
        let p = GaussianParams::new(vec![2.0], vec![1.0 / (2.0 * PI)], vec![0]).unwrap();
        assert!(log_gauss_map(&img, &p, 0, 1e-6).unwrap().data()[0].abs() < 1e-6);
        let p = GaussianParams::new(vec![1.5], vec![0.25], vec![0]).unwrap();
        let peak = -0.5 * (2.0 * PI * 0.25f64).ln();
        assert!((log_gauss_map(&img, &p, 0, 1e-6).unwrap().data()[0] as f64 - (peak - 0.5)).abs() < 1e-6);
        assert!(matches!(log_gauss_map(&img, &p, 0, 0.5), Err(Error::Numerical(_))));
    }

    #[test]
    fn data_term_examples() {
        let img = one_voxel_img(3.0);
        let a = uniform_atlas(&[1.0], vec![0]);
        let p = GaussianParams::new(vec![3.0], vec![1.0 / (2.0 * PI)], vec![0]).unwrap();
        assert!(data_term(&img, &a, &p).unwrap().abs() < 1e-9);

        let a = uniform_atlas(&[0.5, 0.5], vec![0, 1]);
        let p = GaussianParams::new(vec![2.0, 4.0], vec![1.0, 1.0], vec![0, 1]).unwrap();
        let logp = -0.5 * (2.0 * PI).ln() - 0.5;
        assert!((data_term(&img, &a, &p).unwrap() - 4.0 * -logp).abs() < 1e-9);

        let a = uniform_atlas(&[1.0, 0.0], vec![0, 1]);
        let p1 = GaussianParams::new(vec![3.0, -50.0], vec![2.0, 1e-3], vec![0, 1]).unwrap();
        let p2 = GaussianParams::new(vec![3.0, 80.0], vec![2.0, 7.0], vec![0, 1]).unwrap();
        let expect = 4.0 * 0.5 * (2.0 * PI * 2.0f64).ln();
        assert!((data_term(&img, &a, &p1).unwrap() - expect).abs() < 1e-9);
        assert_eq!(data_term(&img, &a, &p1).unwrap(), data_term(&img, &a, &p2).unwrap());
    }

    #[test]
    fn zero_velocity_loss_is_data_term() {
        let shape = GridShape::new(&[4, 5]).unwrap();
        let n = shape.num_voxels();
        let img = Volume::new(shape.clone(), (0..n).map(|j| (j % 7) as f32).collect()).unwrap();
        let probs: Vec<f32> = (0..n).map(|j| 0.2 + 0.6 * (j % 3) as f32 / 2.0).collect();
        let planar = [probs.iter().map(|p| 1.0 - p).collect::<Vec<_>>(), probs].concat();
        let a = ProbAtlas::ungrouped(shape.clone(), 2, planar).unwrap();
        let p = GaussianParams::new(vec![1.0, 5.0], vec![2.0, 3.0], vec![0, 1]).unwrap();
        let v = VelocityField::zeros(shape, 1);
        let dt = data_term(&img, &a, &p).unwrap();
        for lambda in [0.0, 10.0] {
            let cfg = ModelConfig {
                lambda,
                ..Default::default()
            };
            assert!((loss(&img, &a, &v, &p, &cfg).unwrap() - dt).abs() < 1e-9 * dt.abs());
        }
    }

    #[test]
    fn params_validation() {
        assert!(GaussianParams::new(vec![0.0], vec![0.0], vec![0]).is_err());
        assert!(GaussianParams::new(vec![0.0, 1.0], vec![1.0], vec![0, 1]).is_err());
        assert!(GaussianParams::new(vec![0.0, 1.0], vec![1.0, 1.0], vec![0, 0]).is_err());
        let p = GaussianParams::new(vec![0.0, 1.0], vec![1.0, 2.0], vec![0, 1, 1]).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.contains("\"mu\"") && json.contains("\"var\"") && json.contains("\"label_groups\""));
    }
}
