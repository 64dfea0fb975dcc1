//! On-disk formats: the `IQT1` tensor container, checkpoints, annotation
//! and mixture JSON, flat `key=value` configs and binary PGM/PPM images.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! "IQT1" | u32 count | count x ( u16 name_len | name | u8 rank | u32 dims[rank] | f32 values[prod(dims)] )
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::assign::Instance;
use crate::error::{Error, Result};
use crate::geometry::{BBox, PyramidSpec};
use crate::gridops::FeatureGrid;
use crate::qdist::QualityGmm;
use crate::Real;

pub const MAGIC: &[u8; 4] = b"IQT1";

/// File names inside a checkpoint directory.
pub const CHECKPOINT_TENSORS: &str = "checkpoint.iqt";
pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::Shape(format!("tensor name of {} bytes is too long", name.len())));
        }
        if shape.len() > u8::MAX as usize {
            return Err(Error::Shape(format!("tensor {name} has rank {}", shape.len())));
        }
        if shape.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Shape(format!("tensor {name} has a dimension above u32::MAX")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("tensor {name}: shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { name, shape, data })
    }

    /// Narrows to `f32`.
    pub fn from_real<T: Real>(name: impl Into<String>, shape: Vec<usize>, data: &[T]) -> Result<Self> {
        Self::new(name, shape, data.iter().map(|v| v.to_f64_lossy() as f32).collect())
    }

    pub fn to_real<T: Real>(&self) -> Vec<T> {
        self.data.iter().map(|&v| T::of(v as f64)).collect()
    }

    fn encoded_len(&self) -> usize {
        2 + self.name.len() + 1 + 4 * self.shape.len() + 4 * self.data.len()
    }
}

pub fn encode_tensors(tensors: &[Tensor]) -> Result<Vec<u8>> {
    if tensors.len() > u32::MAX as usize {
        return Err(Error::Shape("too many tensors".into()));
    }
    let mut out = Vec::with_capacity(8 + tensors.iter().map(Tensor::encoded_len).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let t = Tensor::new(t.name.clone(), t.shape.clone(), t.data.clone())?;
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Parse(format!("container truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Parse("not an IQT1 container".into()));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Parse(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Parse(format!("tensor {name}: element count overflows")))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Parse("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(Tensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse(format!("{} trailing bytes after the last tensor", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn write_tensor_file(path: &Path, tensors: &[Tensor]) -> Result<()> {
    fs::write(path, encode_tensors(tensors)?)?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<Vec<Tensor>> {
    decode_tensors(&fs::read(path)?)
}

/// A `C x H x W` grid as a rank-3 tensor.
pub fn grid_to_tensor<T: Real>(name: impl Into<String>, grid: &FeatureGrid<T>) -> Result<Tensor> {
    Tensor::from_real(name, vec![grid.channels(), grid.height(), grid.width()], grid.data())
}

pub fn tensor_to_grid<T: Real>(tensor: &Tensor, stride: T) -> Result<FeatureGrid<T>> {
    match tensor.shape[..] {
        [c, h, w] => FeatureGrid::new(c, h, w, stride, tensor.to_real()),
        _ => Err(Error::Shape(format!("grid {} must have rank 3, got shape {:?}", tensor.name, tensor.shape))),
    }
}

/// Looks up one grid per pyramid level by level name.
pub fn grids_for_pyramid<T: Real>(tensors: &[Tensor], pyramid: &PyramidSpec) -> Result<Vec<FeatureGrid<T>>> {
    pyramid
        .levels()
        .iter()
        .enumerate()
        .map(|(l, lvl)| {
            let t = tensors
                .iter()
                .find(|t| t.name == lvl.name)
                .ok_or_else(|| Error::Parse(format!("no tensor named {} in the feature file", lvl.name)))?;
            tensor_to_grid(t, pyramid.stride::<T>(l))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub tensors_file: String,
    pub tensors: Vec<ManifestEntry>,
    /// Free-form run description (config, step count).
    pub meta: BTreeMap<String, String>,
}

/// Writes `checkpoint.iqt` and `manifest.json` into `dir`.
pub fn write_checkpoint(dir: &Path, tensors: &[Tensor], meta: BTreeMap<String, String>) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    write_tensor_file(&dir.join(CHECKPOINT_TENSORS), tensors)?;
    let manifest = Manifest {
        format: "IQT1".into(),
        tensors_file: CHECKPOINT_TENSORS.into(),
        tensors: tensors.iter().map(|t| ManifestEntry { name: t.name.clone(), shape: t.shape.clone() }).collect(),
        meta,
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    text.push('\n');
    fs::write(dir.join(CHECKPOINT_MANIFEST), text)?;
    Ok(dir.to_path_buf())
}

/// Reads a checkpoint directory and checks the tensors against the manifest.
pub fn read_checkpoint(dir: &Path) -> Result<(Manifest, Vec<Tensor>)> {
    let text = fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("manifest: {e}")))?;
    if manifest.format != "IQT1" {
        return Err(Error::Parse(format!("unknown checkpoint format {}", manifest.format)));
    }
    let tensors = read_tensor_file(&dir.join(&manifest.tensors_file))?;
    let listed: Vec<(&str, &[usize])> = manifest.tensors.iter().map(|e| (e.name.as_str(), &e.shape[..])).collect();
    let found: Vec<(&str, &[usize])> = tensors.iter().map(|t| (t.name.as_str(), &t.shape[..])).collect();
    if listed != found {
        return Err(Error::Parse("checkpoint tensors do not match the manifest".into()));
    }
    Ok((manifest, tensors))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedInstance {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    /// `[width, height]` in pixels.
    pub image_size: [u32; 2],
    pub instances: Vec<AnnotatedInstance>,
}

impl AnnotationFile {
    pub fn parse(text: &str) -> Result<Self> {
        let a: Self = serde_json::from_str(text).map_err(|e| Error::Parse(format!("annotations: {e}")))?;
        a.validate()?;
        Ok(a)
    }

    /// Boxes must be valid and lie inside the image.
    pub fn validate(&self) -> Result<()> {
        let [w, h] = self.image_size;
        if w == 0 || h == 0 {
            return Err(Error::Domain("image size must be positive".into()));
        }
        for (n, inst) in self.instances.iter().enumerate() {
            let [x1, y1, x2, y2] = inst.bbox;
            BBox::new(x1, y1, x2, y2).map_err(|e| Error::Domain(format!("instance {n}: {e}")))?;
            if x1 < 0.0 || y1 < 0.0 || x2 > w as f64 || y2 > h as f64 {
                return Err(Error::Domain(format!("instance {n}: box {:?} leaves the {w}x{h} image", inst.bbox)));
            }
        }
        Ok(())
    }

    pub fn instances<T: Real>(&self) -> Result<Vec<Instance<T>>> {
        self.instances
            .iter()
            .map(|i| {
                let [x1, y1, x2, y2] = i.bbox.map(T::of);
                Ok(Instance { bbox: BBox::new(x1, y1, x2, y2)?, class: i.class })
            })
            .collect()
    }
}

pub fn parse_gmm(text: &str) -> Result<QualityGmm<f64>> {
    let g: QualityGmm<f64> = serde_json::from_str(text).map_err(|e| Error::Parse(format!("mixture: {e}")))?;
    g.validate().map_err(|e| Error::Parse(format!("mixture: {e}")))?;
    Ok(g)
}

/// Flat `key = value` configuration. `#` starts a comment; keys are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key=value", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Parse(format!("line {}: duplicate key {k}", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    pub fn parsed<V: FromStr>(&self, key: &str) -> Result<Option<V>>
    where
        V::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<V>().map_err(|e| Error::Parse(format!("{key}={v}: {e}"))))
            .transpose()
    }

    pub fn parsed_or<V: FromStr>(&self, key: &str, default: V) -> Result<V>
    where
        V::Err: std::fmt::Display,
    {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    /// Rejects keys outside `known`.
    pub fn ensure_known(&self, known: &[&str]) -> Result<()> {
        match self.entries.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::Parse(format!("unknown config key {k}"))),
            None => Ok(()),
        }
    }
}

/// Parses `P3:8,P4:16`.
pub fn parse_levels(text: &str) -> Result<PyramidSpec> {
    let pairs = text
        .split(',')
        .map(|item| {
            let (name, stride) = item
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::Parse(format!("level {item:?}: expected NAME:STRIDE")))?;
            let stride = stride.trim().parse::<u32>().map_err(|e| Error::Parse(format!("level {item:?}: {e}")))?;
            Ok((name.trim().to_string(), stride))
        })
        .collect::<Result<Vec<_>>>()?;
    PyramidSpec::from_pairs(pairs)
}

pub fn format_levels(pyramid: &PyramidSpec) -> String {
    pyramid.levels().iter().map(|l| format!("{}:{}", l.name, l.stride)).collect::<Vec<_>>().join(",")
}

/// Binary greyscale image (P5, maxval 255).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::Shape(format!("{} pixels for a {width}x{height} image", pixels.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Binary colour image (P6, maxval 255).
pub fn encode_ppm(width: usize, height: usize, pixels: &[[u8; 3]]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::Shape(format!("{} pixels for a {width}x{height} image", pixels.len())));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().flatten());
    Ok(out)
}

/// Header and payload of a binary PNM file: `(magic, width, height, maxval, data)`.
pub fn decode_pnm(bytes: &[u8]) -> Result<(String, usize, usize, u32, &[u8])> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse("PNM header truncated".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("PNM header field {s:?}: {e}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])? as u32);
    let depth = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Parse(format!("unsupported PNM magic {m}"))),
    };
    let data = bytes.get(pos..).unwrap_or(&[]);
    if data.len() != w * h * depth {
        return Err(Error::Parse(format!("PNM raster has {} bytes, expected {}", data.len(), w * h * depth)));
    }
    Ok((fields[0].clone(), w, h, maxval, data))
}
