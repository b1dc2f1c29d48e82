//! `.vol` file pairs: a JSON header `<name>.json` next to a raw payload
//! `<name>.raw` of little-endian `f32` values in row-major voxel order.
//!
//! Multi-channel payloads (atlases, vector fields) interleave the channel
//! vector per voxel, channel index varying fastest. Label maps store label
//! indices as `f32`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::deformation::{DeformationField, VelocityField};
use crate::error::{Error, Result};
use crate::likelihood::GaussianParams;
use crate::volume::{GridShape, LabelMap, ProbAtlas, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Volume,
    Labels,
    Atlas,
    Field,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
    pub dtype: String,
    pub kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_labels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_groups: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
}

impl Header {
    fn new(shape: &GridShape, kind: Kind) -> Self {
        Self {
            dims: shape.dims().to_vec(),
            spacing: shape.spacing().to_vec(),
            dtype: "f32".into(),
            kind,
            num_labels: None,
            label_groups: None,
            stride: None,
        }
    }

    fn shape(&self) -> Result<GridShape> {
        GridShape::with_spacing(&self.dims, &self.spacing).map_err(|e| Error::Header(e.to_string()))
    }

    fn channels(&self) -> Result<usize> {
        Ok(match self.kind {
            Kind::Volume | Kind::Labels => 1,
            Kind::Atlas => self.num_labels.ok_or_else(|| missing("num_labels"))?,
            Kind::Field => self.dims.len(),
        })
    }
}

fn missing(key: &str) -> Error {
    Error::Header(format!("missing key `{key}`"))
}

/// Header and payload paths for a `.vol` base path. Any extension on `path`
/// is replaced.
pub fn file_pair(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("json"), path.with_extension("raw"))
}

pub fn read_header(path: &Path) -> Result<Header> {
    let (json, _) = file_pair(path);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let header: Header =
        serde_json::from_str(&text).map_err(|e| Error::Header(format!("{}: {e}", json.display())))?;
    if header.dtype != "f32" {
        return Err(Error::Header(format!("unsupported dtype `{}`", header.dtype)));
    }
    Ok(header)
}

fn read_raw(path: &Path, header: &Header) -> Result<(GridShape, Vec<f32>)> {
    let shape = header.shape()?;
    let (_, raw) = file_pair(path);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let expected = shape.num_voxels() * header.channels()?;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
        return Err(Error::PayloadLength {
            expected,
            found: bytes.len() / 4,
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect::<Vec<_>>();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    Ok((shape, data))
}

fn write_pair(path: &Path, header: &Header, data: &[f32]) -> Result<()> {
    let (json, raw) = file_pair(path);
    let text = serde_json::to_string_pretty(header).expect("header serializes");
    fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))
}

fn expect_kind(header: &Header, kind: Kind) -> Result<()> {
    if header.kind != kind {
        return Err(Error::Header(format!(
            "expected kind {kind:?}, found {:?}",
            header.kind
        )));
    }
    Ok(())
}

/// Planar `[C][N]` -> interleaved `[N][C]`.
fn interleave(planar: &[f32], channels: usize) -> Vec<f32> {
    let n = planar.len() / channels;
    let mut out = vec![0.0; planar.len()];
    for c in 0..channels {
        for j in 0..n {
            out[j * channels + c] = planar[c * n + j];
        }
    }
    out
}

fn deinterleave(interleaved: &[f32], channels: usize) -> Vec<f32> {
    let n = interleaved.len() / channels;
    let mut out = vec![0.0; interleaved.len()];
    for j in 0..n {
        for c in 0..channels {
            out[c * n + j] = interleaved[j * channels + c];
        }
    }
    out
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let header = read_header(path)?;
    expect_kind(&header, Kind::Volume)?;
    let (shape, data) = read_raw(path, &header)?;
    Volume::new(shape, data)
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    write_pair(path, &Header::new(v.shape(), Kind::Volume), v.data())
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let header = read_header(path)?;
    expect_kind(&header, Kind::Labels)?;
    let num_labels = header.num_labels.ok_or_else(|| missing("num_labels"))?;
    let (shape, data) = read_raw(path, &header)?;
    let labels = data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v >= 0.0 && v.fract() == 0.0 && v < num_labels as f32 {
                Ok(v as u32)
            } else {
                Err(Error::InvalidArgument(format!(
                    "voxel {i} holds {v}, not a label in [0, {num_labels})"
                )))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    LabelMap::new(shape, num_labels, labels)
}

pub fn write_labels(s: &LabelMap, path: &Path) -> Result<()> {
    let mut header = Header::new(s.shape(), Kind::Labels);
    header.num_labels = Some(s.num_labels());
    let data: Vec<f32> = s.labels().iter().map(|&l| l as f32).collect();
    write_pair(path, &header, &data)
}

pub fn read_atlas(path: &Path) -> Result<ProbAtlas> {
    let header = read_header(path)?;
    expect_kind(&header, Kind::Atlas)?;
    let num_labels = header.num_labels.ok_or_else(|| missing("num_labels"))?;
    let groups = header
        .label_groups
        .clone()
        .ok_or_else(|| missing("label_groups"))?;
    let (shape, data) = read_raw(path, &header)?;
    ProbAtlas::new(shape, num_labels, deinterleave(&data, num_labels), groups)
}

pub fn write_atlas(a: &ProbAtlas, path: &Path) -> Result<()> {
    let mut header = Header::new(a.shape(), Kind::Atlas);
    header.num_labels = Some(a.num_labels());
    header.label_groups = Some(a.label_groups().to_vec());
    write_pair(path, &header, &interleave(a.probs(), a.num_labels()))
}

fn read_field(path: &Path) -> Result<(GridShape, usize, Vec<f32>)> {
    let header = read_header(path)?;
    expect_kind(&header, Kind::Field)?;
    let (shape, data) = read_raw(path, &header)?;
    let d = shape.ndim();
    Ok((shape, header.stride.unwrap_or(1), deinterleave(&data, d)))
}

pub fn read_velocity(path: &Path) -> Result<VelocityField> {
    let (shape, stride, data) = read_field(path)?;
    VelocityField::new(shape, stride, data)
}

pub fn write_velocity(v: &VelocityField, path: &Path) -> Result<()> {
    let mut header = Header::new(v.shape(), Kind::Field);
    header.stride = Some(v.stride());
    write_pair(path, &header, &interleave(v.components(), v.shape().ndim()))
}

/// Stores the displacement `u = phi - Id`.
pub fn write_deformation(f: &DeformationField, path: &Path) -> Result<()> {
    let mut header = Header::new(f.shape(), Kind::Field);
    header.stride = Some(1);
    write_pair(path, &header, &interleave(f.displacement(), f.shape().ndim()))
}

pub fn read_deformation(path: &Path) -> Result<DeformationField> {
    let (shape, stride, data) = read_field(path)?;
    if stride != 1 {
        return Err(Error::Header("deformation fields are always dense".into()));
    }
    DeformationField::from_displacement(shape, data)
}

pub fn read_params(path: &Path) -> Result<GaussianParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let params: GaussianParams = serde_json::from_str(&text)
        .map_err(|e| Error::Header(format!("{}: {e}", path.display())))?;
    params.validate()?;
    Ok(params)
}

pub fn write_params(p: &GaussianParams, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(p).expect("params serialize");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn reads_row_major_payload() {
        let dir = tmp();
        let base = dir.path().join("v.vol");
        fs::write(
            dir.path().join("v.json"),
            r#"{"dims":[2,2],"spacing":[1.0,1.0],"dtype":"f32","kind":"volume"}"#,
        )
        .unwrap();
        let bytes: Vec<u8> = [0.0f32, 1.0, 2.0, 3.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.path().join("v.raw"), bytes).unwrap();
        let v = read_volume(&base).unwrap();
        assert_eq!(v.data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn short_payload_is_rejected() {
        let dir = tmp();
        let base = dir.path().join("v");
        fs::write(
            dir.path().join("v.json"),
            r#"{"dims":[4,4],"spacing":[1.0,1.0],"dtype":"f32","kind":"volume"}"#,
        )
        .unwrap();
        fs::write(dir.path().join("v.raw"), vec![0u8; 15 * 4]).unwrap();
        let err = read_volume(&base).unwrap_err();
        assert!(err.to_string().contains("payload length mismatch"), "{err}");
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let dir = tmp();
        let base = dir.path().join("v");
        let shape = GridShape::new(&[2, 2]).unwrap();
        write_pair(&base, &Header::new(&shape, Kind::Volume), &[0.0, f32::NAN, 1.0, 2.0]).unwrap();
        assert!(matches!(read_volume(&base), Err(Error::NonFinite(1))));
    }

    #[test]
    fn malformed_header_is_rejected() {
        let dir = tmp();
        let base = dir.path().join("v");
        fs::write(dir.path().join("v.json"), "{\"dims\": [2,2]").unwrap();
        assert!(matches!(read_volume(&base), Err(Error::Header(_))));
        fs::write(
            dir.path().join("v.json"),
            r#"{"dims":[2,2],"spacing":[1.0,1.0],"dtype":"f64","kind":"volume"}"#,
        )
        .unwrap();
        assert!(matches!(read_volume(&base), Err(Error::Header(_))));
    }

    #[test]
    fn three_d_payload_has_one_scalar_per_voxel() {
        let dir = tmp();
        let base = dir.path().join("cube");
        let v = Volume::filled(GridShape::new(&[2, 2, 2]).unwrap(), 1.5).unwrap();
        write_volume(&v, &base).unwrap();
        assert_eq!(fs::metadata(dir.path().join("cube.raw")).unwrap().len(), 8 * 4);
    }

    #[test]
    fn unwritable_path_surfaces_io_error() {
        let v = Volume::filled(GridShape::new(&[2, 2]).unwrap(), 0.0).unwrap();
        let err = write_volume(&v, Path::new("/nonexistent-dir/sub/v")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn atlas_payload_interleaves_labels() {
        let dir = tmp();
        let base = dir.path().join("a");
        let shape = GridShape::new(&[2, 2]).unwrap();
        let atlas = ProbAtlas::new(
            shape,
            2,
            vec![1.0, 0.25, 0.5, 0.0, 0.0, 0.75, 0.5, 1.0],
            vec![0, 1],
        )
        .unwrap();
        write_atlas(&atlas, &base).unwrap();
        let bytes = fs::read(dir.path().join("a.raw")).unwrap();
        let vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(vals, vec![1.0, 0.0, 0.25, 0.75, 0.5, 0.5, 0.0, 1.0]);
        assert_eq!(read_atlas(&base).unwrap(), atlas);
    }

    #[test]
    fn atlas_read_checks_normalization() {
        let dir = tmp();
        let base = dir.path().join("a");
        let shape = GridShape::new(&[2, 2]).unwrap();
        let mut header = Header::new(&shape, Kind::Atlas);
        header.num_labels = Some(2);
        header.label_groups = Some(vec![0, 1]);
        write_pair(&base, &header, &[0.5, 0.6, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap();
        assert!(matches!(read_atlas(&base), Err(Error::Atlas(_))));
        write_pair(&base, &header, &[-0.1, 1.1, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap();
        assert!(matches!(read_atlas(&base), Err(Error::Atlas(m)) if m.contains("negative")));
    }

    #[test]
    fn labels_roundtrip() {
        let dir = tmp();
        let base = dir.path().join("s");
        let s = LabelMap::new(GridShape::new(&[2, 3]).unwrap(), 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        write_labels(&s, &base).unwrap();
        assert_eq!(read_labels(&base).unwrap(), s);
    }

    #[test]
    fn velocity_roundtrip_keeps_stride() {
        let dir = tmp();
        let base = dir.path().join("v");
        let shape = GridShape::new(&[2, 3]).unwrap();
        let v = VelocityField::new(shape, 2, (0..12).map(|i| i as f32 * 0.5 - 1.0).collect())
            .unwrap();
        write_velocity(&v, &base).unwrap();
        assert_eq!(read_velocity(&base).unwrap(), v);
    }
}
