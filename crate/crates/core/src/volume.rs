//! Grid data types: shapes, scalar volumes, label maps and probabilistic atlases.
//!
//! Every multi-channel type is stored planar in memory (`channel * num_voxels +
//! voxel`), with voxels in row-major order over `dims`. The on-disk format
//! interleaves channels instead; see [`crate::io`].

use crate::error::{Error, Result};

/// Tolerance on the per-voxel probability sum of an atlas.
pub const ATLAS_SUM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GridShape {
    dims: Vec<usize>,
    spacing: Vec<f64>,
}

impl GridShape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        Self::with_spacing(dims, &vec![1.0; dims.len()])
    }

    pub fn with_spacing(dims: &[usize], spacing: &[f64]) -> Result<Self> {
        if !(2..=3).contains(&dims.len()) {
            return Err(Error::Shape(format!(
                "grids must be 2D or 3D, got {} axes",
                dims.len()
            )));
        }
        if let Some(d) = dims.iter().find(|&&d| d < 2) {
            return Err(Error::Shape(format!("every axis needs at least 2 samples, got {d}")));
        }
        if spacing.len() != dims.len() {
            return Err(Error::Shape(format!(
                "spacing has {} entries for {} axes",
                spacing.len(),
                dims.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Shape("spacing must be positive and finite".into()));
        }
        Ok(Self {
            dims: dims.to_vec(),
            spacing: spacing.to_vec(),
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Row-major strides in voxels.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dims.len()];
        for k in (0..self.dims.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * self.dims[k + 1];
        }
        strides
    }

    /// Grid coordinates of a flat voxel index.
    pub fn coords(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.dims.len()];
        for k in (0..self.dims.len()).rev() {
            out[k] = index % self.dims[k];
            index /= self.dims[k];
        }
        out
    }

    pub(crate) fn same_dims(&self, other: &GridShape, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "{what}: grid {:?} does not match {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: GridShape,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: GridShape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.num_voxels() {
            return Err(Error::PayloadLength {
                expected: shape.num_voxels(),
                found: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: GridShape, value: f32) -> Result<Self> {
        let n = shape.num_voxels();
        Self::new(shape, vec![value; n])
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// (min, max) of the intensities.
    pub fn range(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Applies `I -> a * I + b` voxel-wise.
    pub fn affine(&self, a: f64, b: f64) -> Result<Volume> {
        let data = self.data.iter().map(|&v| (a * v as f64 + b) as f32).collect();
        Volume::new(self.shape.clone(), data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    shape: GridShape,
    num_labels: usize,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(shape: GridShape, num_labels: usize, labels: Vec<u32>) -> Result<Self> {
        if num_labels == 0 {
            return Err(Error::InvalidArgument("a label map needs at least one label".into()));
        }
        if labels.len() != shape.num_voxels() {
            return Err(Error::PayloadLength {
                expected: shape.num_voxels(),
                found: labels.len(),
            });
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= num_labels) {
            return Err(Error::InvalidArgument(format!(
                "label {l} at voxel {i} is outside [0, {num_labels})"
            )));
        }
        Ok(Self {
            shape,
            num_labels,
            labels,
        })
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }
}

/// Per-voxel label probabilities plus the label -> Gaussian class grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbAtlas {
    shape: GridShape,
    num_labels: usize,
    num_classes: usize,
    probs: Vec<f32>,
    label_groups: Vec<usize>,
}

impl ProbAtlas {
    /// Builds an atlas from planar probabilities (`label * num_voxels + voxel`).
    pub fn new(
        shape: GridShape,
        num_labels: usize,
        probs: Vec<f32>,
        label_groups: Vec<usize>,
    ) -> Result<Self> {
        let num_classes = validate_groups(num_labels, &label_groups)?;
        let n = shape.num_voxels();
        if probs.len() != n * num_labels {
            return Err(Error::PayloadLength {
                expected: n * num_labels,
                found: probs.len(),
            });
        }
        for j in 0..n {
            let mut sum = 0.0f64;
            for l in 0..num_labels {
                let p = probs[l * n + j];
                if !p.is_finite() {
                    return Err(Error::NonFinite(l * n + j));
                }
                if p < 0.0 {
                    return Err(Error::Atlas(format!(
                        "negative probability {p} for label {l} at voxel {j}"
                    )));
                }
                sum += p as f64;
            }
            if (sum - 1.0).abs() > ATLAS_SUM_TOL {
                return Err(Error::Atlas(format!(
                    "probabilities at voxel {j} sum to {sum}, not 1"
                )));
            }
        }
        Ok(Self {
            shape,
            num_labels,
            num_classes,
            probs,
            label_groups,
        })
    }

    /// Identity grouping: one Gaussian class per label.
    pub fn ungrouped(shape: GridShape, num_labels: usize, probs: Vec<f32>) -> Result<Self> {
        Self::new(shape, num_labels, probs, (0..num_labels).collect())
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn label_groups(&self) -> &[usize] {
        &self.label_groups
    }

    /// Planar probabilities, `label * num_voxels + voxel`.
    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn prob(&self, label: usize, voxel: usize) -> f32 {
        self.probs[label * self.shape.num_voxels() + voxel]
    }

    /// Channel `label` as a slice over voxels.
    pub fn channel(&self, label: usize) -> &[f32] {
        let n = self.shape.num_voxels();
        &self.probs[label * n..(label + 1) * n]
    }

    /// Prior mass per Gaussian class, planar `class * num_voxels + voxel`.
    pub fn class_priors(&self) -> Vec<f64> {
        let n = self.shape.num_voxels();
        let mut out = vec![0.0; self.num_classes * n];
        for (l, &c) in self.label_groups.iter().enumerate() {
            for (dst, &p) in out[c * n..(c + 1) * n].iter_mut().zip(self.channel(l)) {
                *dst += p as f64;
            }
        }
        out
    }

    pub fn with_label_groups(&self, label_groups: Vec<usize>) -> Result<Self> {
        let num_classes = validate_groups(self.num_labels, &label_groups)?;
        Ok(Self {
            num_classes,
            label_groups,
            ..self.clone()
        })
    }
}

/// Checks that `groups` maps every label onto a contiguous class range
/// `[0, C)` and returns `C`.
pub(crate) fn validate_groups(num_labels: usize, groups: &[usize]) -> Result<usize> {
    if num_labels == 0 {
        return Err(Error::Atlas("an atlas needs at least one label".into()));
    }
    if groups.len() != num_labels {
        return Err(Error::Atlas(format!(
            "label_groups has {} entries for {num_labels} labels",
            groups.len()
        )));
    }
    let num_classes = groups.iter().max().map_or(0, |&c| c + 1);
    let mut seen = vec![false; num_classes];
    for &c in groups {
        seen[c] = true;
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(Error::Atlas(format!("class {c} has no label assigned")));
    }
    Ok(num_classes)
}

/// Normalizes nonnegative planar weights into an atlas. Never called
/// implicitly by readers.
pub fn normalize_atlas(
    shape: GridShape,
    num_labels: usize,
    weights: &[f64],
    label_groups: Vec<usize>,
) -> Result<ProbAtlas> {
    let n = shape.num_voxels();
    if weights.len() != n * num_labels {
        return Err(Error::PayloadLength {
            expected: n * num_labels,
            found: weights.len(),
        });
    }
    let mut probs = vec![0.0f32; weights.len()];
    for j in 0..n {
        let mut sum = 0.0;
        for l in 0..num_labels {
            let w = weights[l * n + j];
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Atlas(format!(
                    "weight {w} for label {l} at voxel {j} is not a finite nonnegative number"
                )));
            }
            sum += w;
        }
        if sum <= 0.0 {
            return Err(Error::Atlas(format!("all weights are zero at voxel {j}")));
        }
        for l in 0..num_labels {
            probs[l * n + j] = (weights[l * n + j] / sum) as f32;
        }
    }
    ProbAtlas::new(shape, num_labels, probs, label_groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g2(a: usize, b: usize) -> GridShape {
        GridShape::new(&[a, b]).unwrap()
    }

    #[test]
    fn shape_rules() {
        assert!(GridShape::new(&[1, 4]).is_err());
        assert!(GridShape::new(&[4]).is_err());
        assert!(GridShape::with_spacing(&[2, 2], &[1.0, 0.0]).is_err());
        let s = GridShape::new(&[2, 3, 4]).unwrap();
        assert_eq!(s.strides(), vec![12, 4, 1]);
        assert_eq!(s.coords(23), vec![1, 2, 3]);
    }

    #[test]
    fn normalize_examples() {
        let a = normalize_atlas(g2(2, 2), 2, &[2.0, 1.0, 1.0, 1.0, 2.0, 3.0, 3.0, 3.0], vec![0, 1])
            .unwrap();
        assert_eq!(a.prob(0, 0), 0.5);
        assert_eq!(a.prob(1, 0), 0.5);
        assert_eq!(a.prob(0, 1), 0.25);
        assert_eq!(a.prob(1, 1), 0.75);
        let err = normalize_atlas(g2(2, 2), 2, &[0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0], vec![0, 1]);
        assert!(matches!(err, Err(Error::Atlas(_))));
    }

    #[test]
    fn atlas_rejects_bad_vectors() {
        let shape = g2(2, 2);
        let mut probs = vec![0.5f32; 8];
        probs[4] = 0.6;
        assert!(matches!(
            ProbAtlas::ungrouped(shape.clone(), 2, probs),
            Err(Error::Atlas(m)) if m.contains("sum")
        ));
        let mut probs = vec![0.5f32; 8];
        probs[0] = -0.1;
        probs[4] = 1.1;
        assert!(matches!(
            ProbAtlas::ungrouped(shape, 2, probs),
            Err(Error::Atlas(m)) if m.contains("negative")
        ));
    }

    #[test]
    fn groups_must_be_surjective() {
        assert!(validate_groups(3, &[0, 2, 2]).is_err());
        assert!(validate_groups(3, &[0, 1]).is_err());
        assert_eq!(validate_groups(4, &[0, 1, 1, 0]).unwrap(), 2);
    }

    #[test]
    fn class_priors_merge_labels() {
        let a = ProbAtlas::new(g2(2, 2), 3, vec![0.2; 4].into_iter().chain(vec![0.3; 4]).chain(vec![0.5; 4]).collect(), vec![0, 1, 0])
            .unwrap();
        let cp = a.class_priors();
        assert!((cp[0] - 0.7).abs() < 1e-6);
        assert!((cp[4] - 0.3).abs() < 1e-6);
    }

    #[test]
    fn label_range_checked() {
        assert!(LabelMap::new(g2(2, 2), 2, vec![0, 1, 2, 0]).is_err());
        assert!(LabelMap::new(g2(2, 2), 3, vec![0, 1, 2, 0]).is_ok());
    }
}
