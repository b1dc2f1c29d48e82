//! Encoder–decoder network mapping an image and the atlas to the model
//! parameters `(v, mu, var)` in one forward pass.
//!
//! The encoder is a stack of stride-2 convolutions; the decoder mirrors it
//! with nearest-neighbor upsampling, skip concatenation and a convolution,
//! stopping at the resolution of the velocity grid. Two heads read the last
//! decoder features: a single convolution emitting the velocity, and two
//! convolutions followed by a global max pool emitting `(mu, s)` per class.
//!
//! Intensities enter the network normalized to `[0, 1]` by the scan's own
//! range, and the means and variances are mapped back, so the output
//! follows any affine change of contrast of the input.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, UpsampleMode, Var};
use crate::deformation::{velocity_grid, VelocityField};
use crate::error::{Error, Result};
use crate::likelihood::{variance_from_log, GaussianParams};
use crate::volume::{validate_groups, GridShape, ProbAtlas, Volume};

const CHECKPOINT_MAGIC: &[u8; 8] = b"ATLSNET1";

/// Initial value of the normalized log-variance bias: a standard deviation
/// of 10% of the intensity range.
const INIT_LOG_VAR: f64 = -4.605_170_185_988_091;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDescriptor {
    /// Image grid the network runs on.
    pub dims: Vec<usize>,
    /// Label -> class map of the atlas; its length is the number of labels.
    pub label_groups: Vec<usize>,
    /// Number of stride-2 encoder levels.
    pub depth: usize,
    /// Filters per encoder level (decoder level `i` reuses `filters[i]`).
    pub filters: Vec<usize>,
    pub kernel: usize,
    pub leaky_slope: f64,
    /// Velocity grid stride; a power of two no larger than `2^depth`.
    pub velocity_stride: usize,
    pub var_floor: f64,
    pub seed: u64,
}

impl NetworkDescriptor {
    /// Defaults: 32 filters per level, 3-wide kernels, slope 0.2, stride 1.
    pub fn new(dims: &[usize], label_groups: Vec<usize>, depth: usize) -> Self {
        Self {
            dims: dims.to_vec(),
            label_groups,
            depth,
            filters: vec![32; depth],
            kernel: 3,
            leaky_slope: 0.2,
            velocity_stride: 1,
            var_floor: 1e-6,
            seed: 0,
        }
    }

    pub fn num_labels(&self) -> usize {
        self.label_groups.len()
    }

    pub fn num_classes(&self) -> usize {
        self.label_groups.iter().max().map_or(0, |m| m + 1)
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    /// Decoder level at which the velocity grid lives.
    fn head_level(&self) -> usize {
        self.velocity_stride.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return bad("network depth must be at least 1".into());
        }
        if self.filters.len() != self.depth || self.filters.contains(&0) {
            return bad(format!("need {} positive filter counts, got {:?}", self.depth, self.filters));
        }
        if self.kernel.is_multiple_of(2) {
            return bad("kernel width must be odd".into());
        }
        if !(self.leaky_slope.is_finite() && self.var_floor > 0.0 && self.var_floor.is_finite()) {
            return bad("leaky_slope must be finite and var_floor positive".into());
        }
        if !self.velocity_stride.is_power_of_two() || self.head_level() > self.depth {
            return bad(format!(
                "velocity stride {} must be a power of two at most 2^depth",
                self.velocity_stride
            ));
        }
        GridShape::new(&self.dims)?;
        let factor = 1usize << self.depth;
        if let Some(n) = self.dims.iter().find(|&&n| n % factor != 0) {
            return Err(Error::Shape(format!(
                "input size {n} is not divisible by 2^depth = {factor}"
            )));
        }
        velocity_grid(&GridShape::new(&self.dims)?, self.velocity_stride)?;
        validate_groups(self.num_labels(), &self.label_groups)?;
        Ok(())
    }

    /// `(name, shape)` of every tensor in declaration order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let k = vec![self.kernel; self.ndim()];
        let mut out = Vec::new();
        let mut conv = |name: String, cout: usize, cin: usize| {
            let mut w = vec![cout, cin];
            w.extend_from_slice(&k);
            out.push((format!("{name}.w"), w));
            out.push((format!("{name}.b"), vec![cout]));
        };
        let input = 1 + self.num_labels();
        for i in 0..self.depth {
            let cin = if i == 0 { input } else { self.filters[i - 1] };
            conv(format!("enc{i}"), self.filters[i], cin);
        }
        let mut ch = self.filters[self.depth - 1];
        for i in (self.head_level()..self.depth).rev() {
            let skip = if i == 0 { input } else { self.filters[i - 1] };
            conv(format!("dec{i}"), self.filters[i], ch + skip);
            ch = self.filters[i];
        }
        conv("vel".into(), self.ndim(), ch);
        conv("par1".into(), ch, ch);
        conv("par2".into(), 2 * self.num_classes(), ch);
        out
    }
}

/// Convolution kernels and biases in declaration order, with their
/// architecture descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    descriptor: NetworkDescriptor,
    tensors: Vec<Tensor<f32>>,
}

/// Glorot-uniform kernels from a seeded generator; zero biases except the
/// parameter head, which starts at mid-range means and a 10%-of-range
/// standard deviation. Velocity kernels are scaled by 0.1.
pub fn build_network(descriptor: &NetworkDescriptor) -> Result<NetworkParams> {
    descriptor.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(descriptor.seed);
    let c = descriptor.num_classes();
    let tensors = descriptor
        .layout()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = if shape.len() == 1 {
                if name == "par2.b" {
                    (0..n).map(|i| if i < c { 0.5 } else { INIT_LOG_VAR as f32 }).collect()
                } else {
                    vec![0.0; n]
                }
            } else {
                let taps: usize = shape[2..].iter().product();
                let bound = (6.0 / ((shape[0] + shape[1]) * taps) as f64).sqrt();
                let scale = if name == "vel.w" { 0.1 } else { 1.0 };
                (0..n)
                    .map(|_| (scale * rng.gen_range(-bound..bound)) as f32)
                    .collect()
            };
            Tensor::new(&shape, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NetworkParams {
        descriptor: descriptor.clone(),
        tensors,
    })
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct NetOutputs {
    /// Velocity on the strided grid, `[D, sample dims..]`.
    pub velocity: Var,
    pub mu: Var,
    pub var: Var,
}

impl NetworkParams {
    pub fn from_tensors(descriptor: NetworkDescriptor, tensors: Vec<Tensor<f32>>) -> Result<Self> {
        descriptor.validate()?;
        let layout = descriptor.layout();
        if layout.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "descriptor declares {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
            if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(i));
            }
        }
        Ok(Self { descriptor, tensors })
    }

    pub fn descriptor(&self) -> &NetworkDescriptor {
        &self.descriptor
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Every parameter value, concatenated in declaration order.
    pub fn flat(&self) -> Vec<f32> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.num_parameters() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_parameters()
            )));
        }
        if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Inserts every tensor as a graph leaf (differentiable when `trainable`).
    pub fn leaves<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| {
                let v = Tensor::from_f32(t.shape(), t.data())?;
                Ok(if trainable { g.param(v) } else { g.constant(v) })
            })
            .collect()
    }

    /// Like [`Self::leaves`] but with explicit parameter values (flat, in
    /// declaration order), e.g. for `f64` finite-difference checks.
    pub fn leaves_from<T: Real>(&self, g: &mut Graph<T>, flat: &[f64], trainable: bool) -> Result<Vec<Var>> {
        if flat.len() != self.num_parameters() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_parameters()
            )));
        }
        let mut off = 0;
        self.tensors
            .iter()
            .map(|t| {
                let v = Tensor::from_f64(t.shape(), &flat[off..off + t.numel()])?;
                off += t.numel();
                Ok(if trainable { g.param(v) } else { g.constant(v) })
            })
            .collect()
    }

    fn check_inputs(&self, img: &Volume, atlas: &ProbAtlas) -> Result<()> {
        let d = &self.descriptor;
        img.shape().same_dims(atlas.shape(), "network input")?;
        if img.shape().dims() != d.dims.as_slice() {
            return Err(Error::Shape(format!(
                "network expects dims {:?}, got {:?}",
                d.dims,
                img.shape().dims()
            )));
        }
        if atlas.label_groups() != d.label_groups.as_slice() {
            return Err(Error::Shape(format!(
                "network expects label groups {:?}, atlas has {:?}",
                d.label_groups,
                atlas.label_groups()
            )));
        }
        Ok(())
    }

    /// Builds the forward pass on `g` from the given leaves (see [`Self::leaves`]).
    pub fn forward_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        leaves: &[Var],
        img: &Volume,
        atlas: &ProbAtlas,
    ) -> Result<NetOutputs> {
        self.check_inputs(img, atlas)?;
        let d = &self.descriptor;
        if leaves.len() != self.tensors.len() {
            return Err(Error::Shape("wrong number of parameter leaves".into()));
        }
        let (lo, hi) = img.range();
        let (lo, range) = (lo as f64, if hi > lo { (hi - lo) as f64 } else { 1.0 });

        let mut input = Vec::with_capacity((1 + d.num_labels()) * img.data().len());
        input.extend(img.data().iter().map(|&x| T::lit((x as f64 - lo) / range)));
        input.extend(atlas.probs().iter().map(|&p| T::lit(p as f64)));
        let mut shape = vec![1 + d.num_labels()];
        shape.extend_from_slice(&d.dims);
        let x0 = g.constant(Tensor::new(&shape, input)?);

        let mut next = leaves.iter().copied();
        let mut layer = |g: &mut Graph<T>, x: Var, stride: usize, act: bool| -> Result<Var> {
            let (w, b) = (next.next().expect("layout"), next.next().expect("layout"));
            let y = g.conv(x, w, stride)?;
            let y = g.add(y, b)?;
            Ok(if act { g.leaky_relu(y, d.leaky_slope) } else { y })
        };

        let mut skips = vec![x0];
        let mut h = x0;
        for _ in 0..d.depth {
            h = layer(g, h, 2, true)?;
            skips.push(h);
        }
        for i in (d.head_level()..d.depth).rev() {
            let skip = skips[i];
            let sp = g.shape(skip)[1..].to_vec();
            let up = g.upsample(h, 2, &sp, UpsampleMode::Nearest)?;
            let cat = g.concat(&[up, skip])?;
            h = layer(g, cat, 1, true)?;
        }
        let velocity = layer(g, h, 1, false)?;
        let p1 = layer(g, h, 1, true)?;
        let p2 = layer(g, p1, 1, false)?;
        let pooled = g.global_max_pool(p2)?;

        let c = d.num_classes();
        let mu_n = g.slice(pooled, 0, c)?;
        let mu_s = g.scale(mu_n, range)?;
        let mu = g.shift(mu_s, lo)?;
        let s_n = g.slice(pooled, c, c)?;
        let s = g.shift(s_n, 2.0 * range.ln())?;
        let var = variance_from_log(g, s, d.var_floor)?;
        Ok(NetOutputs { velocity, mu, var })
    }

    /// One deterministic forward pass in `f32`.
    pub fn forward(&self, img: &Volume, atlas: &ProbAtlas) -> Result<(VelocityField, GaussianParams)> {
        let mut g = Graph::<f32>::new();
        let leaves = self.leaves(&mut g, false)?;
        let out = self.forward_graph(&mut g, &leaves, img, atlas)?;
        let d = &self.descriptor;
        let grid = velocity_grid(atlas.shape(), d.velocity_stride)?;
        let v = VelocityField::new(grid, d.velocity_stride, g.value(out.velocity).to_f32())
            .map_err(|e| Error::Numerical(format!("network velocity: {e}")))?;
        let params = GaussianParams::new(
            g.value(out.mu).to_f64(),
            g.value(out.var).to_f64(),
            d.label_groups.clone(),
        )
        .map_err(|e| Error::Numerical(format!("network parameters: {e}")))?;
        Ok((v, params))
    }

    /// Magic, little-endian `u32` descriptor length, descriptor JSON, then
    /// every tensor as little-endian `f32` in declaration order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.descriptor).expect("descriptor serializes");
        let mut out = Vec::with_capacity(12 + json.len() + 4 * self.num_parameters());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = |m: &str| Error::Header(format!("checkpoint: {m}"));
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(header("missing magic"));
        }
        let n = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(12..12 + n).ok_or_else(|| header("truncated descriptor"))?;
        let descriptor: NetworkDescriptor =
            serde_json::from_slice(json).map_err(|e| header(&e.to_string()))?;
        descriptor.validate()?;
        let payload = &bytes[12 + n..];
        let layout = descriptor.layout();
        let expected: usize = layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if payload.len() != 4 * expected {
            return Err(Error::PayloadLength {
                expected: expected * 4,
                found: payload.len(),
            });
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let tensors = layout
            .iter()
            .map(|(_, s)| Tensor::new(s, values.by_ref().take(s.iter().product()).collect()))
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(descriptor, tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
