//! Per-scan MAP estimation of `(v, mu, var)` by joint gradient descent on the
//! loss: the slow, network-free reference that amortization replaces.

use log::error;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::deformation::{velocity_grid, VelocityField};
use crate::em::init_params;
use crate::error::{Error, Result};
use crate::likelihood::{build_loss, variance_from_log, GaussianParams, ModelConfig, ScanContext};
use crate::optim::Adam;
use crate::volume::{ProbAtlas, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub iterations: usize,
    /// Step size for the velocity, in voxels.
    pub lr_velocity: f64,
    /// Step size for the means (in units of the image intensity range) and
    /// the log-variances.
    pub lr_params: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            iterations: 200,
            lr_velocity: 1e-1,
            lr_params: 1e-2,
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_velocity > 0.0 && self.lr_params > 0.0) {
            return Err(Error::Config("optimizer step sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MapFit {
    pub velocity: VelocityField,
    pub params: GaussianParams,
    /// Loss before every step, followed by the loss at the returned point.
    pub loss_history: Vec<f64>,
    /// Set when the fit stopped early on a non-finite loss; the returned
    /// point is then the last one with a finite loss.
    pub diagnostic: Option<String>,
}

/// `v = 0` at the configured stride and the EM initialization of the
/// Gaussian parameters.
pub fn init_map(img: &Volume, atlas: &ProbAtlas, cfg: &ModelConfig) -> Result<(VelocityField, GaussianParams)> {
    let grid = velocity_grid(atlas.shape(), cfg.velocity_stride)?;
    let params = init_params(img, atlas, cfg.var_floor)?;
    Ok((VelocityField::zeros(grid, cfg.velocity_stride), params))
}

/// Optimization variables. Means are held as `(mu - lo) / range` so the
/// fit commutes with affine intensity maps.
struct State {
    v: Vec<f64>,
    mu: Vec<f64>,
    s: Vec<f64>,
}

struct Frame {
    lo: f64,
    range: f64,
    floor: f64,
}

impl Frame {
    fn params(&self, st: &State, groups: &[usize]) -> Result<GaussianParams> {
        GaussianParams::new(
            st.mu.iter().map(|m| self.lo + self.range * m).collect(),
            st.s.iter().map(|s| s.exp() + self.floor).collect(),
            groups.to_vec(),
        )
    }
}

/// Loss and its gradient with respect to `(v, mu, s)`, flattened in that order.
fn evaluate(
    ctx: &ScanContext<f64>,
    v_shape: &[usize],
    st: &State,
    frame: &Frame,
    cfg: &ModelConfig,
    with_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let c = st.mu.len();
    let mut g = Graph::<f64>::new();
    let v = g.param(Tensor::new(v_shape, st.v.clone())?);
    let mu_n = g.param(Tensor::new(&[c], st.mu.clone())?);
    let s = g.param(Tensor::new(&[c], st.s.clone())?);
    let mu_scaled = g.scale(mu_n, frame.range)?;
    let mu = g.shift(mu_scaled, frame.lo)?;
    let var = variance_from_log(&mut g, s, frame.floor)?;
    let terms = build_loss(&mut g, ctx, v, mu, var, cfg)?;
    let value = g.value(terms.loss).item();
    if !with_grad || !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let grads = g.backward(terms.loss)?;
    let mut flat = grads.wrt(v).into_data();
    flat.extend(grads.wrt(mu_n).into_data());
    flat.extend(grads.wrt(s).into_data());
    Ok((value, flat))
}

fn check_inputs(
    img: &Volume,
    atlas: &ProbAtlas,
    v: &VelocityField,
    params: &GaussianParams,
    cfg: &ModelConfig,
) -> Result<()> {
    cfg.validate()?;
    params.validate()?;
    img.shape().same_dims(atlas.shape(), "map_fit")?;
    let grid = velocity_grid(atlas.shape(), cfg.velocity_stride)?;
    if v.stride() != cfg.velocity_stride {
        return Err(Error::Shape(format!(
            "velocity stride {} does not match the configured {}",
            v.stride(),
            cfg.velocity_stride
        )));
    }
    v.shape().same_dims(&grid, "map_fit velocity")?;
    if params.var.iter().any(|&x| x <= cfg.var_floor) {
        return Err(Error::InvalidArgument(
            "initial variances must exceed the variance floor".into(),
        ));
    }
    Ok(())
}

/// Gradient of the loss at `(v, params)` with respect to `(v, mu, log(var - floor))`.
pub fn loss_gradient(
    img: &Volume,
    atlas: &ProbAtlas,
    v: &VelocityField,
    params: &GaussianParams,
    cfg: &ModelConfig,
) -> Result<Vec<f64>> {
    check_inputs(img, atlas, v, params, cfg)?;
    let ctx = ScanContext::<f64>::new(img, atlas)?;
    let frame = Frame {
        lo: 0.0,
        range: 1.0,
        floor: cfg.var_floor,
    };
    let st = State {
        v: v.components().iter().map(|&x| x as f64).collect(),
        mu: params.mu.clone(),
        s: params.var.iter().map(|x| (x - cfg.var_floor).ln()).collect(),
    };
    let mut shape = vec![v.shape().ndim()];
    shape.extend_from_slice(v.shape().dims());
    let (value, grad) = evaluate(&ctx, &shape, &st, &frame, cfg, true)?;
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss evaluated to {value}")));
    }
    Ok(grad)
}

/// Joint adaptive-moment descent from the [`init_map`] point.
pub fn map_fit(img: &Volume, atlas: &ProbAtlas, cfg: &ModelConfig, opt: &OptimizerSettings) -> Result<MapFit> {
    let (v, params) = init_map(img, atlas, cfg)?;
    map_fit_from(img, atlas, &v, &params, cfg, opt)
}

pub fn map_fit_from(
    img: &Volume,
    atlas: &ProbAtlas,
    v0: &VelocityField,
    params0: &GaussianParams,
    cfg: &ModelConfig,
    opt: &OptimizerSettings,
) -> Result<MapFit> {
    opt.validate()?;
    check_inputs(img, atlas, v0, params0, cfg)?;
    let ctx = ScanContext::<f64>::new(img, atlas)?;
    let (lo, hi) = img.range();
    let range = if hi > lo { (hi - lo) as f64 } else { 1.0 };
    let frame = Frame {
        lo: lo as f64,
        range,
        floor: cfg.var_floor,
    };
    let groups = params0.label_groups.clone();
    let mut st = State {
        v: v0.components().iter().map(|&x| x as f64).collect(),
        mu: params0.mu.iter().map(|m| (m - frame.lo) / range).collect(),
        s: params0.var.iter().map(|x| (x - cfg.var_floor).ln()).collect(),
    };
    let mut v_shape = vec![v0.shape().ndim()];
    v_shape.extend_from_slice(v0.shape().dims());
    let nv = st.v.len();
    let c = st.mu.len();
    let mut lr = vec![opt.lr_velocity; nv];
    lr.extend(std::iter::repeat_n(opt.lr_params, 2 * c));
    let mut adam = Adam::new(lr);

    let finish = |st: &State, history: Vec<f64>, diagnostic: Option<String>| -> Result<MapFit> {
        Ok(MapFit {
            velocity: VelocityField::new(
                v0.shape().clone(),
                v0.stride(),
                st.v.iter().map(|&x| x as f32).collect(),
            )?,
            params: frame.params(st, &groups)?,
            loss_history: history,
            diagnostic,
        })
    };

    let mut history = Vec::with_capacity(opt.iterations + 1);
    for it in 0..=opt.iterations {
        let last = it == opt.iterations;
        let (value, grad) = evaluate(&ctx, &v_shape, &st, &frame, cfg, !last)?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            let msg = format!("map_fit: non-finite loss or gradient at iteration {it}");
            error!("{msg}");
            return finish(&st, history, Some(msg));
        }
        history.push(value);
        if last {
            break;
        }
        let prev = State {
            v: st.v.clone(),
            mu: st.mu.clone(),
            s: st.s.clone(),
        };
        let mut flat = std::mem::take(&mut st.v);
        flat.extend_from_slice(&st.mu);
        flat.extend_from_slice(&st.s);
        adam.step(&mut flat, &grad);
        st.s = flat.split_off(nv + c);
        st.mu = flat.split_off(nv);
        st.v = flat;
        if st.v.iter().chain(&st.mu).chain(&st.s).any(|x| !x.is_finite()) {
            let msg = format!("map_fit: parameters became non-finite at iteration {it}");
            error!("{msg}");
            return finish(&prev, history, Some(msg));
        }
    }
    finish(&st, history, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::GridShape;

    fn scene() -> (Volume, ProbAtlas) {
        let shape = GridShape::new(&[8, 8]).unwrap();
        let mut probs = vec![0.0f32; 128];
        let mut img = vec![0.0f32; 64];
        for j in 0..64 {
            let left = j % 8 < 4;
            probs[j] = if left { 0.9 } else { 0.1 };
            probs[64 + j] = 1.0 - probs[j];
            img[j] = if left { 1.0 } else { 5.0 } + 0.1 * ((j * 7 % 5) as f32 - 2.0);
        }
        (
            Volume::new(shape.clone(), img).unwrap(),
            ProbAtlas::ungrouped(shape, 2, probs).unwrap(),
        )
    }

    #[test]
    fn zero_iterations_return_init() {
        let (img, atlas) = scene();
        let cfg = ModelConfig::default();
        let (v0, p0) = init_map(&img, &atlas, &cfg).unwrap();
        let opt = OptimizerSettings {
            iterations: 0,
            ..Default::default()
        };
        let fit = map_fit(&img, &atlas, &cfg, &opt).unwrap();
        assert_eq!(fit.velocity, v0);
        for (a, b) in fit.params.mu.iter().zip(&p0.mu) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in fit.params.var.iter().zip(&p0.var) {
            assert!((a - b).abs() < 1e-9 * b);
        }
        assert_eq!(fit.loss_history.len(), 1);
    }

    #[test]
    fn init_is_zero_velocity_and_deterministic() {
        let (img, atlas) = scene();
        let cfg = ModelConfig {
            velocity_stride: 2,
            ..Default::default()
        };
        let (v, p) = init_map(&img, &atlas, &cfg).unwrap();
        assert!(v.components().iter().all(|&x| x == 0.0));
        assert_eq!(v.shape().dims(), &[4, 4]);
        let (v2, p2) = init_map(&img, &atlas, &cfg).unwrap();
        assert_eq!((v, p), (v2, p2));
        let flat = Volume::filled(img.shape().clone(), 3.0).unwrap();
        let (_, p) = init_map(&flat, &atlas, &cfg).unwrap();
        assert!(p.mu.iter().all(|&m| (m - 3.0).abs() < 1e-9));
    }

    #[test]
    fn loss_decreases() {
        let (img, atlas) = scene();
        let cfg = ModelConfig::default();
        let opt = OptimizerSettings {
            iterations: 50,
            ..Default::default()
        };
        let fit = map_fit(&img, &atlas, &cfg, &opt).unwrap();
        assert!(fit.diagnostic.is_none());
        assert_eq!(fit.loss_history.len(), 51);
        assert!(fit.loss_history[50] < fit.loss_history[0]);
    }

    /// The penalty only sees forward differences, so a huge lambda forces
    /// the warp towards a rigid translation (its null space), not to zero.
    #[test]
    fn huge_lambda_flattens_the_warp() {
        let (img, atlas) = scene();
        let cfg = ModelConfig {
            lambda: 1e6,
            ..Default::default()
        };
        let fit = map_fit(&img, &atlas, &cfg, &OptimizerSettings::default()).unwrap();
        let phi = crate::segment::warp_from_velocity(&atlas, &fit.velocity, &cfg).unwrap();
        let u = phi.displacement();
        for k in 0..2 {
            let comp = &u[k * 64..(k + 1) * 64];
            for j in 0..64 {
                if j % 8 < 7 {
                    assert!((comp[j + 1] - comp[j]).abs() < 0.01);
                }
                if j < 56 {
                    assert!((comp[j + 8] - comp[j]).abs() < 0.01);
                }
            }
        }
    }
}
