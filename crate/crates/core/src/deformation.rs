//! Stationary velocity fields, their exponentials, and atlas/image warping.
//!
//! Fields are planar `[D][N]` with component `k` measured along grid axis
//! `k`, in voxel units. A warp `phi = Id + u` is always held as its
//! displacement `u`, so the two can never disagree.

use crate::autodiff::{Graph, Real, Tensor, UpsampleMode, Var};
use crate::error::{Error, Result};
use crate::volume::{GridShape, ProbAtlas, Volume};

pub const DEFAULT_SS_STEPS: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    shape: GridShape,
    stride: usize,
    components: Vec<f32>,
}

impl VelocityField {
    /// `shape` is the sample grid; sample `i` sits at full-resolution
    /// position `i * stride`.
    pub fn new(shape: GridShape, stride: usize, components: Vec<f32>) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("velocity stride must be positive".into()));
        }
        let expected = shape.ndim() * shape.num_voxels();
        if components.len() != expected {
            return Err(Error::PayloadLength {
                expected,
                found: components.len(),
            });
        }
        if let Some(i) = components.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            shape,
            stride,
            components,
        })
    }

    pub fn zeros(shape: GridShape, stride: usize) -> Self {
        let n = shape.ndim() * shape.num_voxels();
        Self {
            shape,
            stride,
            components: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn components(&self) -> &[f32] {
        &self.components
    }

    /// Component `k` over all samples.
    pub fn component(&self, k: usize) -> &[f32] {
        let n = self.shape.num_voxels();
        &self.components[k * n..(k + 1) * n]
    }

    pub fn negated(&self) -> Self {
        Self {
            components: self.components.iter().map(|v| -v).collect(),
            ..self.clone()
        }
    }

    /// Largest absolute component.
    pub fn max_abs(&self) -> f32 {
        self.components.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn tensor<T: Real>(&self) -> Tensor<T> {
        let mut shape = vec![self.shape.ndim()];
        shape.extend_from_slice(self.shape.dims());
        Tensor::from_f32(&shape, &self.components).expect("consistent field")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    shape: GridShape,
    displacement: Vec<f32>,
}

impl DeformationField {
    pub fn identity(shape: GridShape) -> Self {
        let n = shape.ndim() * shape.num_voxels();
        Self {
            shape,
            displacement: vec![0.0; n],
        }
    }

    pub fn from_displacement(shape: GridShape, displacement: Vec<f32>) -> Result<Self> {
        let expected = shape.ndim() * shape.num_voxels();
        if displacement.len() != expected {
            return Err(Error::PayloadLength {
                expected,
                found: displacement.len(),
            });
        }
        if let Some(i) = displacement.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            shape,
            displacement,
        })
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    /// `u = phi - Id`, planar.
    pub fn displacement(&self) -> &[f32] {
        &self.displacement
    }

    /// Target coordinates `phi(x) = x + u(x)`, planar.
    pub fn map(&self) -> Vec<f64> {
        let id = identity_grid::<f64>(&self.shape);
        id.data()
            .iter()
            .zip(&self.displacement)
            .map(|(&x, &u)| x + u as f64)
            .collect()
    }

    pub fn tensor<T: Real>(&self) -> Tensor<T> {
        let mut shape = vec![self.shape.ndim()];
        shape.extend_from_slice(self.shape.dims());
        Tensor::from_f32(&shape, &self.displacement).expect("consistent field")
    }

    fn from_tensor<T: Real>(shape: GridShape, t: &Tensor<T>) -> Result<Self> {
        Self::from_displacement(shape, t.to_f32())
    }
}

/// Voxel coordinates of every grid point, `[D, dims..]`.
pub fn identity_grid<T: Real>(shape: &GridShape) -> Tensor<T> {
    let d = shape.ndim();
    let n = shape.num_voxels();
    let mut data = vec![T::zero(); d * n];
    for j in 0..n {
        for (k, c) in shape.coords(j).into_iter().enumerate() {
            data[k * n + j] = T::lit(c as f64);
        }
    }
    let mut dims = vec![d];
    dims.extend_from_slice(shape.dims());
    Tensor::from_parts(dims, data)
}

/// Linear interpolation of a strided field onto `full_dims`; identity when
/// the factor is 1 and the dims already agree.
pub fn upsample_graph<T: Real>(g: &mut Graph<T>, v: Var, factor: usize, full_dims: &[usize]) -> Result<Var> {
    if factor == 1 && &g.shape(v)[1..] == full_dims {
        return Ok(v);
    }
    g.upsample(v, factor, full_dims, UpsampleMode::Linear)
}

/// Scaling and squaring. Takes a dense velocity `[D, dims..]` and the
/// identity grid; returns the displacement of `exp(v)`.
pub fn exp_ss_graph<T: Real>(g: &mut Graph<T>, v: Var, id: Var, steps: usize) -> Result<Var> {
    if steps == 0 {
        return Err(Error::InvalidArgument("scaling and squaring needs at least one step".into()));
    }
    let mut u = g.scale(v, 0.5f64.powi(steps as i32))?;
    for _ in 0..steps {
        let coords = g.add(id, u)?;
        let moved = g.grid_resample(u, coords)?;
        u = g.add(u, moved)?;
    }
    Ok(u)
}

/// Samples `src: [C, dims..]` at `Id + u`.
pub fn warp_graph<T: Real>(g: &mut Graph<T>, src: Var, u: Var, id: Var) -> Result<Var> {
    let coords = g.add(id, u)?;
    g.grid_resample(src, coords)
}

/// Sum over voxels, components and axes of squared forward differences of `u`.
pub fn grad_penalty_graph<T: Real>(g: &mut Graph<T>, u: Var) -> Result<Var> {
    let nd = g.shape(u).len() - 1;
    let mut total: Option<Var> = None;
    for axis in 1..=nd {
        let d = g.forward_diff(u, axis)?;
        let sq = g.square(d);
        let s = g.sum(sq);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    Ok(total.expect("at least one axis"))
}

fn check_dense(v: &VelocityField) -> Result<()> {
    if v.stride() != 1 {
        return Err(Error::InvalidArgument(
            "scaling and squaring needs a dense velocity; upsample the strided field first".into(),
        ));
    }
    Ok(())
}

/// `phi = exp(v)` by scaling and squaring.
pub fn exp_ss(v: &VelocityField, steps: usize) -> Result<DeformationField> {
    check_dense(v)?;
    let mut g = Graph::<f64>::new();
    let vv = g.constant(v.tensor());
    let id = g.constant(identity_grid(v.shape()));
    let u = exp_ss_graph(&mut g, vv, id, steps)?;
    DeformationField::from_tensor(v.shape().clone(), g.value(u))
}

/// `(f o g)(x) = f(g(x))`.
pub fn compose(f: &DeformationField, g: &DeformationField) -> Result<DeformationField> {
    f.shape().same_dims(g.shape(), "compose")?;
    let mut gr = Graph::<f64>::new();
    let uf = gr.constant(f.tensor());
    let ug = gr.constant(g.tensor());
    let id = gr.constant(identity_grid(f.shape()));
    let sampled = warp_graph(&mut gr, uf, ug, id)?;
    let u = gr.add(ug, sampled)?;
    DeformationField::from_tensor(f.shape().clone(), gr.value(u))
}

fn warp_planar(data: &[f32], channels: usize, phi: &DeformationField) -> Result<Vec<f64>> {
    let mut g = Graph::<f64>::new();
    let mut shape = vec![channels];
    shape.extend_from_slice(phi.shape().dims());
    let src = g.constant(Tensor::from_f32(&shape, data)?);
    let u = g.constant(phi.tensor());
    let id = g.constant(identity_grid(phi.shape()));
    let out = warp_graph(&mut g, src, u, id)?;
    Ok(g.value(out).to_f64())
}

/// Channel `l` of the result at voxel `j` samples channel `l` of `a` at `phi(x_j)`.
pub fn warp_atlas(a: &ProbAtlas, phi: &DeformationField) -> Result<ProbAtlas> {
    a.shape().same_dims(phi.shape(), "warp_atlas")?;
    let warped = warp_planar(a.probs(), a.num_labels(), phi)?;
    ProbAtlas::new(
        a.shape().clone(),
        a.num_labels(),
        warped.into_iter().map(|p| p as f32).collect(),
        a.label_groups().to_vec(),
    )
}

pub fn warp_image(img: &Volume, phi: &DeformationField) -> Result<Volume> {
    img.shape().same_dims(phi.shape(), "warp_image")?;
    let warped = warp_planar(img.data(), 1, phi)?;
    Volume::new(img.shape().clone(), warped.into_iter().map(|p| p as f32).collect())
}

/// Squared norm of the forward-difference gradient of the displacement.
pub fn grad_penalty(phi: &DeformationField) -> f64 {
    let mut g = Graph::<f64>::new();
    let u = g.constant(phi.tensor());
    let p = grad_penalty_graph(&mut g, u).expect("field axes have 2+ samples");
    g.value(p).item()
}

/// Sample grid of a velocity at `stride` over `full`: `ceil(n / stride)`
/// samples per axis.
pub fn velocity_grid(full: &GridShape, stride: usize) -> Result<GridShape> {
    if stride == 0 {
        return Err(Error::InvalidArgument("velocity stride must be positive".into()));
    }
    let dims: Vec<usize> = full.dims().iter().map(|&n| n.div_ceil(stride)).collect();
    GridShape::new(&dims)
}

/// Dense grid of `(n - 1) * factor + 1` samples per axis.
pub fn upsample_velocity(v: &VelocityField, factor: usize) -> Result<VelocityField> {
    if factor == 0 {
        return Err(Error::InvalidArgument("upsampling factor must be at least 1".into()));
    }
    let dims: Vec<usize> = v.shape().dims().iter().map(|&n| (n - 1) * factor + 1).collect();
    upsample_velocity_to(v, factor, &dims)
}

/// Upsamples onto explicit full-resolution dims (e.g. even image sizes,
/// where the last sample row is clamped).
pub fn upsample_velocity_to(v: &VelocityField, factor: usize, dims: &[usize]) -> Result<VelocityField> {
    if factor == 0 {
        return Err(Error::InvalidArgument("upsampling factor must be at least 1".into()));
    }
    let shape = GridShape::new(dims)?;
    let mut g = Graph::<f64>::new();
    let vv = g.constant(v.tensor());
    let up = upsample_graph(&mut g, vv, factor, dims)?;
    let stride = (v.stride() / factor).max(1);
    VelocityField::new(shape, stride, g.value(up).to_f32())
}

/// Dense velocity on `full` from a field of any stride.
pub fn densify(v: &VelocityField, full: &GridShape) -> Result<VelocityField> {
    if v.stride() == 1 {
        v.shape().same_dims(full, "velocity")?;
        return Ok(v.clone());
    }
    let out = upsample_velocity_to(v, v.stride(), full.dims())?;
    Ok(VelocityField { stride: 1, ..out })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(d: &[usize]) -> GridShape {
        GridShape::new(d).unwrap()
    }

    fn const_field(shape: &GridShape, comps: &[f32]) -> VelocityField {
        let n = shape.num_voxels();
        let data = comps.iter().flat_map(|&c| std::iter::repeat_n(c, n)).collect();
        VelocityField::new(shape.clone(), 1, data).unwrap()
    }

    #[test]
    fn zero_velocity_is_identity_exactly() {
        let s = grid(&[6, 7]);
        let phi = exp_ss(&VelocityField::zeros(s.clone(), 1), 7).unwrap();
        assert!(phi.displacement().iter().all(|&u| u == 0.0));
    }

    #[test]
    fn strided_velocity_must_be_upsampled() {
        let v = VelocityField::zeros(grid(&[4, 4]), 2);
        assert!(exp_ss(&v, 7).is_err());
        assert!(exp_ss(&VelocityField::zeros(grid(&[4, 4]), 1), 0).is_err());
    }

    #[test]
    fn integer_translations_compose() {
        let s = grid(&[8, 8]);
        let n = s.num_voxels();
        let f = DeformationField::from_displacement(s.clone(), [vec![1.0; n], vec![0.0; n]].concat()).unwrap();
        let g = DeformationField::from_displacement(s.clone(), [vec![0.0; n], vec![2.0; n]].concat()).unwrap();
        let fg = compose(&f, &g).unwrap();
        for j in 0..n {
            let c = s.coords(j);
            if c[0] < 6 && c[1] < 5 {
                assert_eq!(fg.displacement()[j], 1.0);
                assert_eq!(fg.displacement()[n + j], 2.0);
            }
        }
        let id = DeformationField::identity(s);
        assert_eq!(compose(&id, &g).unwrap(), g);
    }

    #[test]
    fn compose_rejects_grid_mismatch() {
        let a = DeformationField::identity(grid(&[4, 4]));
        let b = DeformationField::identity(grid(&[4, 5]));
        assert!(compose(&a, &b).is_err());
    }

    #[test]
    fn translation_shifts_atlas_with_replicate_boundary() {
        let s = grid(&[4, 3]);
        let n = s.num_voxels();
        let ramp: Vec<f32> = (0..n).map(|j| (s.coords(j)[0] as f32) / 4.0).collect();
        let probs = [ramp.iter().map(|p| 1.0 - p).collect::<Vec<_>>(), ramp.clone()].concat();
        let a = ProbAtlas::ungrouped(s.clone(), 2, probs).unwrap();
        let phi = DeformationField::from_displacement(s.clone(), [vec![1.0; n], vec![0.0; n]].concat()).unwrap();
        let w = warp_atlas(&a, &phi).unwrap();
        for j in 0..n {
            let row = s.coords(j)[0];
            let expect = ((row + 1).min(3) as f32) / 4.0;
            assert_eq!(w.prob(1, j), expect);
        }
        assert_eq!(warp_atlas(&a, &DeformationField::identity(s)).unwrap(), a);
    }

    #[test]
    fn image_warps() {
        let s = grid(&[5, 5]);
        let img = Volume::filled(s.clone(), 3.25).unwrap();
        let n = s.num_voxels();
        let phi = DeformationField::from_displacement(
            s.clone(),
            (0..2 * n).map(|i| ((i * 7) % 5) as f32 * 0.37 - 0.6).collect(),
        )
        .unwrap();
        assert!(warp_image(&img, &phi).unwrap().data().iter().all(|&v| (v - 3.25).abs() < 1e-6));
        let ramp = Volume::new(s.clone(), (0..n).map(|j| j as f32).collect()).unwrap();
        let shift = DeformationField::from_displacement(s.clone(), [vec![0.0; n], vec![1.0; n]].concat()).unwrap();
        let out = warp_image(&ramp, &shift).unwrap();
        assert_eq!(out.data()[0], 1.0);
        assert_eq!(out.data()[4], 4.0);
        assert_eq!(warp_image(&ramp, &DeformationField::identity(s)).unwrap(), ramp);
    }

    #[test]
    fn penalty_examples() {
        let s = grid(&[4, 4]);
        let n = s.num_voxels();
        assert_eq!(grad_penalty(&DeformationField::identity(s.clone())), 0.0);
        let c = DeformationField::from_displacement(s.clone(), [vec![0.7; n], vec![-2.0; n]].concat()).unwrap();
        assert_eq!(grad_penalty(&c), 0.0);
        let lin: Vec<f32> = (0..n).map(|j| 0.1 * s.coords(j)[0] as f32).collect();
        let f = DeformationField::from_displacement(s, [lin, vec![0.0; n]].concat()).unwrap();
        assert!((grad_penalty(&f) - 0.12).abs() < 1e-6);
    }

    #[test]
    fn upsample_examples() {
        let s = grid(&[2, 2]);
        let v = VelocityField::new(s.clone(), 2, vec![0.0, 2.0, 0.0, 2.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let up = upsample_velocity(&v, 2).unwrap();
        assert_eq!(up.shape().dims(), &[3, 3]);
        assert_eq!(&up.component(0)[..3], &[0.0, 1.0, 2.0]);
        assert!(up.component(1).iter().all(|&x| x == 1.0));
        assert_eq!(up.stride(), 1);
        let same = upsample_velocity(&const_field(&grid(&[3, 4]), &[0.5, -1.0]), 1).unwrap();
        assert_eq!(same, const_field(&grid(&[3, 4]), &[0.5, -1.0]));
    }

    #[test]
    fn even_grid_densify_clamps_last_row() {
        let coarse = VelocityField::new(grid(&[2, 2]), 2, vec![0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let dense = densify(&coarse, &grid(&[4, 4])).unwrap();
        let rows: Vec<f32> = (0..4).map(|r| dense.component(0)[r * 4]).collect();
        assert_eq!(rows, vec![0.0, 1.0, 2.0, 2.0]);
    }
}
