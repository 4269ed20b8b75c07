//! Volume IO (NIfTI-1 and raw + JSON header), dataset manifests, seeded pair
//! sampling and a synthetic generator of pairs with known deformations.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{compose_fields, warp_nearest, warp_trilinear, DisplacementField, LabelMap, Volume};
use crate::tensor::{Dims3, Tensor};

/// Element type on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Uint8,
    Int16,
    Uint16,
    Int32,
    Uint32,
    Float32,
    Float64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::Uint8 => 1,
            Dtype::Int16 | Dtype::Uint16 => 2,
            Dtype::Int32 | Dtype::Uint32 | Dtype::Float32 => 4,
            Dtype::Float64 => 8,
        }
    }

    fn nifti_code(self) -> i16 {
        match self {
            Dtype::Uint8 => 2,
            Dtype::Int16 => 4,
            Dtype::Int32 => 8,
            Dtype::Float32 => 16,
            Dtype::Float64 => 64,
            Dtype::Uint16 => 512,
            Dtype::Uint32 => 768,
        }
    }

    fn from_nifti(code: i16) -> Option<Self> {
        Some(match code {
            2 => Dtype::Uint8,
            4 => Dtype::Int16,
            8 => Dtype::Int32,
            16 => Dtype::Float32,
            64 => Dtype::Float64,
            512 => Dtype::Uint16,
            768 => Dtype::Uint32,
            _ => return None,
        })
    }

    fn decode(self, bytes: &[u8], little: bool) -> Vec<f64> {
        macro_rules! read {
            ($t:ty) => {
                bytes
                    .chunks_exact(std::mem::size_of::<$t>())
                    .map(|c| {
                        let a = c.try_into().expect("chunk size");
                        (if little { <$t>::from_le_bytes(a) } else { <$t>::from_be_bytes(a) }) as f64
                    })
                    .collect()
            };
        }
        match self {
            Dtype::Uint8 => bytes.iter().map(|&b| b as f64).collect(),
            Dtype::Int16 => read!(i16),
            Dtype::Uint16 => read!(u16),
            Dtype::Int32 => read!(i32),
            Dtype::Uint32 => read!(u32),
            Dtype::Float32 => read!(f32),
            Dtype::Float64 => read!(f64),
        }
    }

    fn encode(self, values: &[f64]) -> Vec<u8> {
        let mut out = Vec::with_capacity(values.len() * self.size());
        for &v in values {
            match self {
                Dtype::Uint8 => out.push(v as u8),
                Dtype::Int16 => out.extend((v as i16).to_le_bytes()),
                Dtype::Uint16 => out.extend((v as u16).to_le_bytes()),
                Dtype::Int32 => out.extend((v as i32).to_le_bytes()),
                Dtype::Uint32 => out.extend((v as u32).to_le_bytes()),
                Dtype::Float32 => out.extend((v as f32).to_le_bytes()),
                Dtype::Float64 => out.extend(v.to_le_bytes()),
            }
        }
        out
    }
}

/// Raw voxel grid as stored on disk, before normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RawGrid {
    pub dims: Dims3,
    pub spacing: [f64; 3],
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Nifti { gz: bool },
    Raw,
}

fn detect(path: &Path) -> Result<Format> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_ascii_lowercase();
    if name.ends_with(".nii.gz") {
        Ok(Format::Nifti { gz: true })
    } else if name.ends_with(".nii") {
        Ok(Format::Nifti { gz: false })
    } else if name.ends_with(".json") {
        Ok(Format::Raw)
    } else {
        Err(Error::format(path, "unknown volume format (expected .nii, .nii.gz or a .json raw header)"))
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

const NIFTI_HEADER: usize = 348;
const NIFTI_OFFSET: usize = 352;

fn parse_nifti(path: &Path, buf: &[u8]) -> Result<RawGrid> {
    let bad = |m: String| Error::format(path, m);
    if buf.len() < NIFTI_HEADER {
        return Err(bad(format!("file too short for a NIfTI-1 header ({} bytes)", buf.len())));
    }
    let little = match (i32::from_le_bytes(buf[0..4].try_into().expect("4")), i32::from_be_bytes(buf[0..4].try_into().expect("4"))) {
        (348, _) => true,
        (_, 348) => false,
        _ => return Err(bad("sizeof_hdr is not 348; not a NIfTI-1 file".into())),
    };
    if &buf[344..347] != b"n+1" && &buf[344..347] != b"ni1" {
        return Err(bad("missing NIfTI-1 magic".into()));
    }
    let i16_at = |o: usize| {
        let a = buf[o..o + 2].try_into().expect("2");
        if little { i16::from_le_bytes(a) } else { i16::from_be_bytes(a) }
    };
    let f32_at = |o: usize| {
        let a = buf[o..o + 4].try_into().expect("4");
        if little { f32::from_le_bytes(a) } else { f32::from_be_bytes(a) }
    };
    let ndim = i16_at(40);
    if !(3..=7).contains(&ndim) {
        return Err(bad(format!("expected a 3D volume, header has {ndim} dimensions")));
    }
    let ext: Vec<i16> = (1..=ndim as usize).map(|i| i16_at(40 + 2 * i)).collect();
    if ext[..3].iter().any(|&n| n < 1) || ext[3..].iter().any(|&n| n > 1) {
        return Err(bad(format!("unsupported extents {ext:?}")));
    }
    let dims = Dims3::new(ext[0] as usize, ext[1] as usize, ext[2] as usize);
    let code = i16_at(70);
    let dtype = Dtype::from_nifti(code).ok_or_else(|| bad(format!("unsupported datatype code {code}")))?;
    let spacing = [1, 2, 3].map(|i| {
        let p = f32_at(76 + 4 * i).abs() as f64;
        if p > 0.0 && p.is_finite() { p } else { 1.0 }
    });
    let offset = f32_at(108);
    if !(offset >= NIFTI_OFFSET as f32) {
        return Err(bad(format!("invalid vox_offset {offset}")));
    }
    let offset = offset as usize;
    let need = offset + dims.len() * dtype.size();
    if buf.len() < need {
        return Err(bad(format!("data truncated: need {need} bytes, have {}", buf.len())));
    }
    let mut values = dtype.decode(&buf[offset..need], little);
    let (slope, inter) = (f32_at(112) as f64, f32_at(116) as f64);
    if slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0) {
        values.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    Ok(RawGrid { dims, spacing, values })
}

fn nifti_bytes(g: &RawGrid, dtype: Dtype) -> Vec<u8> {
    let mut h = vec![0u8; NIFTI_OFFSET];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    let dim: [i16; 8] = [3, g.dims.nx as i16, g.dims.ny as i16, g.dims.nz as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    h[70..72].copy_from_slice(&dtype.nifti_code().to_le_bytes());
    h[72..74].copy_from_slice(&((dtype.size() * 8) as i16).to_le_bytes());
    let pixdim = [1.0f32, g.spacing[0] as f32, g.spacing[1] as f32, g.spacing[2] as f32, 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }
    h[108..112].copy_from_slice(&(NIFTI_OFFSET as f32).to_le_bytes());
    h[112..116].copy_from_slice(&1.0f32.to_le_bytes());
    // xyzt_units: millimetres.
    h[123] = 2;
    h[344..348].copy_from_slice(b"n+1\0");
    h.extend(dtype.encode(&g.values));
    h
}

/// Header of the raw float32 + JSON fixture format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    /// `[nx, ny, nz]`, x fastest in the data file.
    pub shape: [usize; 3],
    pub dtype: Dtype,
    #[serde(default = "unit_spacing")]
    pub spacing: [f64; 3],
    #[serde(default = "little")]
    pub byte_order: String,
    /// Data file relative to the header; defaults to the header name with `.raw`.
    #[serde(default)]
    pub data_file: Option<String>,
}

fn unit_spacing() -> [f64; 3] {
    [1.0; 3]
}

fn little() -> String {
    "little".into()
}

fn raw_data_path(header_path: &Path, h: &RawHeader) -> PathBuf {
    match &h.data_file {
        Some(f) => header_path.parent().unwrap_or(Path::new("")).join(f),
        None => header_path.with_extension("raw"),
    }
}

fn parse_raw(path: &Path) -> Result<RawGrid> {
    let h: RawHeader = serde_json::from_slice(&read_bytes(path)?)
        .map_err(|e| Error::format(path, format!("corrupt raw header: {e}")))?;
    let little = match h.byte_order.as_str() {
        "little" | "le" => true,
        "big" | "be" => false,
        o => return Err(Error::format(path, format!("unknown byte order '{o}'"))),
    };
    let dims = Dims3::from_array(h.shape);
    if dims.is_empty() {
        return Err(Error::format(path, "raw header has an empty shape"));
    }
    let data_path = raw_data_path(path, &h);
    let bytes = read_bytes(&data_path)?;
    if bytes.len() != dims.len() * h.dtype.size() {
        return Err(Error::format(
            &data_path,
            format!("expected {} bytes for {dims} {:?}, found {}", dims.len() * h.dtype.size(), h.dtype, bytes.len()),
        ));
    }
    Ok(RawGrid { dims, spacing: h.spacing, values: h.dtype.decode(&bytes, little) })
}

/// Read a grid in any supported format without normalization.
pub fn read_grid(path: &Path) -> Result<RawGrid> {
    match detect(path)? {
        Format::Nifti { gz } => {
            let buf = read_bytes(path)?;
            let buf = if gz {
                let mut out = Vec::new();
                GzDecoder::new(&buf[..])
                    .read_to_end(&mut out)
                    .map_err(|e| Error::format(path, format!("gzip stream: {e}")))?;
                out
            } else {
                buf
            };
            parse_nifti(path, &buf)
        }
        Format::Raw => parse_raw(path),
    }
}

/// Write a grid; the format follows the extension.
pub fn write_grid(path: &Path, g: &RawGrid, dtype: Dtype) -> Result<()> {
    match detect(path)? {
        Format::Nifti { gz } => {
            let bytes = nifti_bytes(g, dtype);
            if gz {
                let mut enc = GzEncoder::new(Vec::new(), Compression::default());
                enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
                write_bytes(path, &enc.finish().map_err(|e| Error::io(path, e))?)
            } else {
                write_bytes(path, &bytes)
            }
        }
        Format::Raw => {
            let h = RawHeader {
                shape: g.dims.as_array(),
                dtype,
                spacing: g.spacing,
                byte_order: little(),
                data_file: None,
            };
            write_bytes(&raw_data_path(path, &h), &dtype.encode(&g.values))?;
            write_bytes(path, &serde_json::to_vec_pretty(&h)?)
        }
    }
}

/// Per-volume min-max scaling to `[0, 1]`; a constant volume maps to zeros.
pub fn normalize_min_max(values: &mut [f64]) {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = hi - lo;
    for v in values.iter_mut() {
        *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
    }
}

/// Load and min-max normalize an intensity volume.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let mut g = read_grid(path)?;
    if let Some(i) = g.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(path, format!("non-finite intensity at flat index {i}")));
    }
    normalize_min_max(&mut g.values);
    Volume::new(g.dims, g.values)
        .and_then(|v| v.with_spacing(g.spacing))
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Load a label map; values must be non-negative integers.
pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let g = read_grid(path)?;
    let data = g
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as u32)
            } else {
                Err(Error::format(path, format!("label value {v} at flat index {i} is not a non-negative integer")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    LabelMap::new(g.dims, data).map_err(|e| Error::format(path, e.to_string()))
}

/// Save intensities as float32.
pub fn save_volume(path: &Path, v: &Volume) -> Result<()> {
    write_grid(path, &RawGrid { dims: v.dims(), spacing: v.spacing(), values: v.data().to_vec() }, Dtype::Float32)
}

/// Save labels as uint32.
pub fn save_labels(path: &Path, l: &LabelMap) -> Result<()> {
    let values = l.data().iter().map(|&v| v as f64).collect();
    write_grid(path, &RawGrid { dims: l.dims(), spacing: [1.0; 3], values }, Dtype::Uint32)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[default]
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub id: String,
    pub volume: PathBuf,
    #[serde(default)]
    pub labels: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    #[serde(default)]
    pub split: Split,
    pub entries: Vec<Entry>,
    /// Free-form preprocessing notes carried with the manifest.
    #[serde(default)]
    pub notes: Option<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ManifestFile {
    Full(Dataset),
    List(Vec<Entry>),
}

impl Dataset {
    /// Read a JSON manifest (an object with `entries`, or a bare list of
    /// entries). Relative paths resolve against the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let parsed: ManifestFile = serde_json::from_slice(&read_bytes(path)?)
            .map_err(|e| Error::format(path, format!("invalid manifest: {e}")))?;
        let mut ds = match parsed {
            ManifestFile::Full(d) => d,
            ManifestFile::List(entries) => Dataset {
                name: path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset").to_string(),
                split: Split::Test,
                entries,
                notes: None,
            },
        };
        let base = path.parent().unwrap_or(Path::new(""));
        for e in &mut ds.entries {
            e.volume = base.join(&e.volume);
            e.labels = e.labels.as_ref().map(|l| base.join(l));
            for p in std::iter::once(&e.volume).chain(e.labels.as_ref()) {
                if !p.exists() {
                    return Err(Error::format(path, format!("entry '{}' points to missing file {}", e.id, p.display())));
                }
            }
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Load one entry, checking that volume and labels share extents.
    pub fn load_entry(&self, i: usize) -> Result<(Volume, Option<LabelMap>)> {
        let e = self.entries.get(i).ok_or_else(|| Error::config(format!("no entry {i}")))?;
        let v = load_volume(&e.volume)?;
        let l = e.labels.as_deref().map(load_labels).transpose()?;
        if let Some(l) = &l {
            l.check_pairs_with(&v)?;
        }
        Ok((v, l))
    }
}

/// Seeded `(target, source)` index pairs without self-pairs.
pub fn sample_pair_indices(n_entries: usize, n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if n_entries < 2 {
        return Err(Error::config(format!("pair sampling needs at least 2 subjects, got {n_entries}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let t = rng.gen_range(0..n_entries);
            let mut s = rng.gen_range(0..n_entries - 1);
            if s >= t {
                s += 1;
            }
            (t, s)
        })
        .collect())
}

/// Seeded `(target id, source id)` pairs.
pub fn sample_pairs(ds: &Dataset, n: usize, seed: u64) -> Result<Vec<(String, String)>> {
    Ok(sample_pair_indices(ds.len(), n, seed)?
        .into_iter()
        .map(|(t, s)| (ds.entries[t].id.clone(), ds.entries[s].id.clone()))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub shape: Dims3,
    /// Largest velocity component, in voxels.
    pub svf_amplitude: f64,
    pub svf_smoothing_sigma: f64,
    pub integration_steps: u32,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            shape: Dims3::cube(32),
            svf_amplitude: 3.0,
            svf_smoothing_sigma: 2.0,
            integration_steps: 7,
            noise_sigma: 0.01,
            seed: 2023,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.svf_amplitude >= 0.0 && self.svf_amplitude.is_finite()) {
            return Err(Error::config("svf_amplitude must be finite and non-negative"));
        }
        if self.integration_steps < 1 {
            return Err(Error::config("integration_steps must be at least 1"));
        }
        if !(self.svf_smoothing_sigma >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::config("sigmas must be non-negative"));
        }
        if self.shape.as_array().iter().any(|&n| n < 8) {
            return Err(Error::config(format!("synthetic volumes need extents of at least 8, got {}", self.shape)));
        }
        Ok(())
    }
}

/// A generated pair. `source = warp(target, gt_field)`, so the field that
/// registers source onto target is `inverse_field = exp(-v)`.
#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub target: Volume,
    pub source: Volume,
    pub target_labels: LabelMap,
    pub source_labels: LabelMap,
    pub gt_field: DisplacementField,
    pub inverse_field: DisplacementField,
}

/// Separable Gaussian smoothing with replicated borders.
pub fn gaussian_smooth(values: &[f64], d: Dims3, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return values.to_vec();
    }
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let ks: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / ks).collect();
    let mut cur = values.to_vec();
    let dims = d.as_array();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for (x, y, z) in d.iter() {
            let p = [x, y, z];
            let mut acc = 0.0;
            for (j, w) in k.iter().enumerate() {
                let mut q = p;
                q[axis] = (p[axis] as i64 + j as i64 - r).clamp(0, dims[axis] as i64 - 1) as usize;
                acc += w * cur[d.index(q[0], q[1], q[2])];
            }
            next[d.index(x, y, z)] = acc;
        }
        cur = next;
    }
    cur
}

/// `exp(v)` by scaling and squaring: `v / 2^steps`, then self-composition.
pub fn integrate_svf(v: &DisplacementField, steps: u32) -> Result<DisplacementField> {
    let scale = 0.5f64.powi(steps as i32);
    let mut phi = DisplacementField::new(v.tensor().map(|x| x * scale), v.level())?;
    for _ in 0..steps {
        phi = compose_fields(&phi, &phi)?;
    }
    Ok(phi)
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    label: u32,
    intensity: f64,
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

/// Nested ellipsoids: an outer shell, two lobes inside it and a core in each lobe.
fn phantom(d: Dims3, rng: &mut ChaCha8Rng) -> Vec<Ellipsoid> {
    let ext = d.as_array().map(|n| n as f64);
    let mid = ext.map(|n| (n - 1.0) / 2.0);
    let mut jit = |s: f64| rng.gen_range(-s..s);
    let outer = [0.40, 0.42, 0.38].map(|f| f * (1.0 + jit(0.05)));
    let mut shapes = vec![Ellipsoid {
        center: [mid[0] + jit(0.5), mid[1] + jit(0.5), mid[2] + jit(0.5)],
        radii: [outer[0] * ext[0], outer[1] * ext[1], outer[2] * ext[2]],
        label: 1,
        intensity: 0.35,
    }];
    for (i, side) in [-1.0f64, 1.0].into_iter().enumerate() {
        let c = [
            mid[0] + side * 0.17 * ext[0] + jit(0.5),
            mid[1] + jit(0.5),
            mid[2] + jit(0.5),
        ];
        let r = [0.15, 0.26, 0.24].map(|f| f * (1.0 + jit(0.08)));
        shapes.push(Ellipsoid {
            center: c,
            radii: [r[0] * ext[0], r[1] * ext[1], r[2] * ext[2]],
            label: 2 + i as u32,
            intensity: 0.6 + 0.1 * i as f64,
        });
        let rc = [0.07, 0.10, 0.09].map(|f| f * (1.0 + jit(0.1)));
        shapes.push(Ellipsoid {
            center: [c[0] + jit(0.8), c[1] + side * 0.06 * ext[1] + jit(0.8), c[2] + jit(0.8)],
            radii: [rc[0] * ext[0], rc[1] * ext[1], rc[2] * ext[2]],
            label: 4 + i as u32,
            intensity: 0.95 - 0.1 * i as f64,
        });
    }
    shapes
}

fn std_normal_field(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Intensity outside every shape, before normalization.
const BACKGROUND: f64 = 0.1;
/// Peak amplitude of the intensity texture, everywhere including background.
const TEXTURE_AMPLITUDE: f64 = 0.3;
const TEXTURE_SIGMA: f64 = 1.5;
/// Spacing of the velocity noise lattice, in voxels.
const VELOCITY_LATTICE: usize = 8;

/// Smoothed noise with the same statistics at every voxel. Samples are drawn
/// on a lattice `spacing` voxels apart, interpolated trilinearly and smoothed
/// with `sigma`; the grid is padded by the kernel radius and cropped, so no
/// border replication inflates the corners.
fn smooth_noise(rng: &mut ChaCha8Rng, d: Dims3, sigma: f64, spacing: usize) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as usize;
    let pd = Dims3::new(d.nx + 2 * r, d.ny + 2 * r, d.nz + 2 * r);
    let cd = Dims3::from_array(pd.as_array().map(|n| n.div_ceil(spacing) + 1));
    let coarse = std_normal_field(rng, cd.len());
    let h = spacing as f64;
    let fine: Vec<f64> = pd
        .iter()
        .map(|(x, y, z)| {
            let p = [x as f64 / h, y as f64 / h, z as f64 / h];
            let i0 = p.map(|v| v.floor() as usize);
            let f = [p[0] - i0[0] as f64, p[1] - i0[1] as f64, p[2] - i0[2] as f64];
            let mut acc = 0.0;
            for corner in 0..8 {
                let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
                let w: f64 = (0..3).map(|a| if o[a] == 1 { f[a] } else { 1.0 - f[a] }).product();
                if w > 0.0 {
                    acc += w * coarse[cd.index(i0[0] + o[0], i0[1] + o[1], i0[2] + o[2])];
                }
            }
            acc
        })
        .collect();
    let full = gaussian_smooth(&fine, pd, sigma);
    d.iter().map(|(x, y, z)| full[pd.index(x + r, y + r, z + r)]).collect()
}

/// Generate a seeded pair with a diffeomorphic ground-truth deformation.
pub fn generate_synthetic_pair(spec: &SyntheticSpec) -> Result<SyntheticPair> {
    spec.validate()?;
    let d = spec.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shapes = phantom(d, &mut rng);

    let mut labels = vec![0u32; d.len()];
    let mut base = vec![BACKGROUND; d.len()];
    for (x, y, z) in d.iter() {
        let p = [x as f64, y as f64, z as f64];
        // Later shapes sit inside earlier ones and take precedence.
        for s in shapes.iter().filter(|s| s.contains(p)) {
            labels[d.index(x, y, z)] = s.label;
            base[d.index(x, y, z)] = s.intensity;
        }
    }
    let texture = smooth_noise(&mut rng, d, TEXTURE_SIGMA, 1);
    let tmax = texture.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let mut intensity: Vec<f64> = base.iter().zip(&texture).map(|(b, t)| b + TEXTURE_AMPLITUDE * t / tmax).collect();
    normalize_min_max(&mut intensity);
    let target = Volume::new(d, intensity)?;
    let target_labels = LabelMap::new(d, labels)?;

    let mut vel = Vec::with_capacity(3 * d.len());
    for _ in 0..3 {
        vel.extend(smooth_noise(&mut rng, d, spec.svf_smoothing_sigma, VELOCITY_LATTICE));
    }
    let vmax = vel.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let k = if vmax > 0.0 { spec.svf_amplitude / vmax } else { 0.0 };
    let vel = Tensor::from_parts(d.shape_with_channels(3), vel.iter().map(|v| v * k).collect());
    let v = DisplacementField::new(vel, 0)?;
    let gt_field = integrate_svf(&v, spec.integration_steps)?;
    let inverse_field = integrate_svf(&DisplacementField::new(v.tensor().map(|x| -x), 0)?, spec.integration_steps)?;

    let warped = warp_trilinear(&target, &gt_field)?;
    let noisy: Vec<f64> = warped
        .data()
        .iter()
        .map(|&x| {
            let n: f64 = StandardNormal.sample(&mut rng);
            (x + spec.noise_sigma * n).clamp(0.0, 1.0)
        })
        .collect();
    let source = Volume::new(d, noisy)?;
    let source_labels = warp_nearest(&target_labels, &gt_field)?;
    Ok(SyntheticPair { target, source, target_labels, source_labels, gt_field, inverse_field })
}

/// Mean endpoint error `|a - b|` over the mask (all voxels when `None`).
pub fn endpoint_error(a: &DisplacementField, b: &DisplacementField, mask: Option<&[bool]>) -> Result<f64> {
    if a.dims() != b.dims() || a.level() != b.level() {
        return Err(Error::shape(format!("fields differ: {} level {} vs {} level {}", a.dims(), a.level(), b.dims(), b.level())));
    }
    let d = a.dims();
    let (ta, tb) = (a.tensor().data(), b.tensor().data());
    let (mut acc, mut n) = (0.0, 0usize);
    for i in 0..d.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        acc += (0..3).map(|c| (ta[c * d.len() + i] - tb[c * d.len() + i]).powi(2)).sum::<f64>().sqrt();
        n += 1;
    }
    if n == 0 {
        return Err(Error::value("endpoint error over an empty mask"));
    }
    Ok(acc / n as f64)
}
