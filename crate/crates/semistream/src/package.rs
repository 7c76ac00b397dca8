//! Model package: a directory holding a JSON `manifest` plus one raw
//! little-endian blob per weight and bias tensor, each with a SHA-256
//! checksum recorded in the manifest.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use semistream_core::engines::AddParams;
use semistream_core::model::{
    Dims, LayerDesc, LayerKind, ModelGraph, PreparedModel, QFilterSet, QuantParams, Shortcut,
};
use semistream_core::quant::{MultShift, RequantParams, Rounding};

/// Version written by [`save_package`] and accepted by [`load_package`].
pub const FORMAT_VERSION: u32 = 1;

pub const MANIFEST_NAME: &str = "manifest";

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("unsupported package format version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("blob {name} is truncated: expected {expected} bytes, found {found}")]
    Truncated { name: String, expected: u64, found: u64 },
    #[error("blob {name} fails its checksum")]
    Checksum { name: String },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("invalid model: {0}")]
    Model(#[from] semistream_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DimsRecord {
    height: usize,
    width: usize,
    channels: usize,
}

impl From<Dims> for DimsRecord {
    fn from(d: Dims) -> Self {
        DimsRecord { height: d.height, width: d.width, channels: d.channels }
    }
}

impl From<&DimsRecord> for Dims {
    fn from(d: &DimsRecord) -> Self {
        Dims::new(d.height, d.width, d.channels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct QuantRecord {
    scale: f64,
    zero_point: u8,
}

impl From<QuantParams> for QuantRecord {
    fn from(q: QuantParams) -> Self {
        QuantRecord { scale: q.scale, zero_point: q.zero_point }
    }
}

impl From<&QuantRecord> for QuantParams {
    fn from(q: &QuantRecord) -> Self {
        QuantParams::new(q.scale, q.zero_point)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct MultShiftRecord {
    mult: u32,
    shift: u8,
}

impl From<MultShift> for MultShiftRecord {
    fn from(m: MultShift) -> Self {
        MultShiftRecord { mult: m.mult, shift: m.shift }
    }
}

impl MultShiftRecord {
    fn load(&self) -> Result<MultShift, FormatError> {
        Ok(MultShift::from_parts(self.mult, self.shift)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RequantRecord {
    mult: u32,
    shift: u8,
    out_zero: i32,
    out_min: i32,
    out_max: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AddRecord {
    mult1: MultShiftRecord,
    mult2: MultShiftRecord,
    mult3: MultShiftRecord,
    in1_zero: u8,
    in2_zero: u8,
    out_zero: u8,
    pre_shift: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlobRecord {
    file: String,
    bytes: u64,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FilterRecord {
    kernel_h: usize,
    kernel_w: usize,
    in_channels: usize,
    out_channels: usize,
    weight_zero_points: Vec<u8>,
    weight_scales: Vec<f64>,
    /// Logical bias width; stored widened to 32-bit two's complement.
    bias_bits: u32,
    weights: BlobRecord,
    biases: BlobRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerRecord {
    name: String,
    kind: String,
    input: DimsRecord,
    output: DimsRecord,
    stride: usize,
    input_quant: QuantRecord,
    output_quant: QuantRecord,
    shortcut_quant: Option<QuantRecord>,
    residual: bool,
    apass: usize,
    fpass: usize,
    requant: Vec<RequantRecord>,
    add: Option<AddRecord>,
    filters: Option<FilterRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ShortcutRecord {
    add: usize,
    source: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    rounding: String,
    input: DimsRecord,
    input_quant: QuantRecord,
    num_classes: usize,
    shortcuts: Vec<ShortcutRecord>,
    layers: Vec<LayerRecord>,
}

fn checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_blob(dir: &Path, file: String, bytes: &[u8]) -> Result<BlobRecord, FormatError> {
    let path = dir.join(&file);
    fs::write(&path, bytes).map_err(io_err(&path))?;
    Ok(BlobRecord { file, bytes: bytes.len() as u64, sha256: checksum(bytes) })
}

fn read_blob(dir: &Path, blob: &BlobRecord) -> Result<Vec<u8>, FormatError> {
    if blob.file.contains(['/', '\\']) || blob.file.starts_with('.') {
        return Err(FormatError::Manifest(format!("blob name {:?} is not a plain file name", blob.file)));
    }
    let path = dir.join(&blob.file);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    if bytes.len() as u64 != blob.bytes {
        return Err(FormatError::Truncated {
            name: blob.file.clone(),
            expected: blob.bytes,
            found: bytes.len() as u64,
        });
    }
    if checksum(&bytes) != blob.sha256 {
        return Err(FormatError::Checksum { name: blob.file.clone() });
    }
    Ok(bytes)
}

/// Writes a prepared model into directory `dir`, creating it if needed.
pub fn save_package(model: &PreparedModel, dir: &Path) -> Result<(), FormatError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let g = &model.graph;
    let mut layers = Vec::with_capacity(g.layers.len());
    for (i, l) in g.layers.iter().enumerate() {
        let filters = match &l.filters {
            None => None,
            Some(f) => {
                let biases: Vec<u8> = f.biases.iter().flat_map(|b| b.to_le_bytes()).collect();
                Some(FilterRecord {
                    kernel_h: f.kernel_h,
                    kernel_w: f.kernel_w,
                    in_channels: f.in_channels,
                    out_channels: f.out_channels,
                    weight_zero_points: f.weight_zero_points.clone(),
                    weight_scales: f.weight_scales.clone(),
                    bias_bits: l.kind.bias_width().bits(),
                    weights: write_blob(dir, format!("layer{i:03}.weights"), &f.weights)?,
                    biases: write_blob(dir, format!("layer{i:03}.biases"), &biases)?,
                })
            }
        };
        layers.push(LayerRecord {
            name: l.name.clone(),
            kind: l.kind.as_str().to_string(),
            input: l.input.into(),
            output: l.output.into(),
            stride: l.stride,
            input_quant: l.input_quant.into(),
            output_quant: l.output_quant.into(),
            shortcut_quant: l.shortcut_quant.map(Into::into),
            residual: l.residual,
            apass: l.apass,
            fpass: l.fpass,
            requant: l
                .requant
                .iter()
                .map(|r| RequantRecord {
                    mult: r.ms.mult,
                    shift: r.ms.shift,
                    out_zero: r.out_zero,
                    out_min: r.out_min,
                    out_max: r.out_max,
                })
                .collect(),
            add: l.add.map(|a| AddRecord {
                mult1: a.mult1.into(),
                mult2: a.mult2.into(),
                mult3: a.mult3.into(),
                in1_zero: a.in1_zero,
                in2_zero: a.in2_zero,
                out_zero: a.out_zero,
                pre_shift: a.pre_shift,
            }),
            filters,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        rounding: model.rounding.as_str().to_string(),
        input: g.input.into(),
        input_quant: g.input_quant.into(),
        num_classes: g.num_classes,
        shortcuts: g.shortcuts.iter().map(|s| ShortcutRecord { add: s.add, source: s.source }).collect(),
        layers,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| FormatError::Manifest(e.to_string()))?;
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

fn load_layer(dir: &Path, r: &LayerRecord) -> Result<LayerDesc, FormatError> {
    let kind = LayerKind::parse(&r.kind)?;
    let filters = match &r.filters {
        None => None,
        Some(f) => {
            if f.bias_bits != kind.bias_width().bits() {
                return Err(FormatError::Manifest(format!(
                    "layer {}: {}-bit biases declared for a {} layer",
                    r.name, f.bias_bits, r.kind
                )));
            }
            let raw = read_blob(dir, &f.biases)?;
            if raw.len() % 4 != 0 {
                return Err(FormatError::Manifest(format!("layer {}: bias blob is not 32-bit", r.name)));
            }
            let biases = raw.chunks_exact(4).map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let set = QFilterSet {
                kernel_h: f.kernel_h,
                kernel_w: f.kernel_w,
                in_channels: f.in_channels,
                out_channels: f.out_channels,
                weights: read_blob(dir, &f.weights)?,
                weight_zero_points: f.weight_zero_points.clone(),
                weight_scales: f.weight_scales.clone(),
                biases,
            };
            set.validate()?;
            Some(set)
        }
    };
    let requant = r
        .requant
        .iter()
        .map(|q| {
            let ms = MultShift::from_parts(q.mult, q.shift)?;
            RequantParams::new(ms, q.out_zero, q.out_min, q.out_max)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let add = match &r.add {
        None => None,
        Some(a) => Some(AddParams {
            mult1: a.mult1.load()?,
            mult2: a.mult2.load()?,
            mult3: a.mult3.load()?,
            in1_zero: a.in1_zero,
            in2_zero: a.in2_zero,
            out_zero: a.out_zero,
            pre_shift: a.pre_shift,
        }),
    };
    Ok(LayerDesc {
        name: r.name.clone(),
        kind,
        input: (&r.input).into(),
        output: (&r.output).into(),
        stride: r.stride,
        filters,
        input_quant: (&r.input_quant).into(),
        output_quant: (&r.output_quant).into(),
        shortcut_quant: r.shortcut_quant.as_ref().map(Into::into),
        residual: r.residual,
        requant,
        add,
        apass: r.apass,
        fpass: r.fpass,
    })
}

/// Reads a package written by [`save_package`], verifying every checksum.
pub fn load_package(dir: &Path) -> Result<PreparedModel, FormatError> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| FormatError::Manifest(e.to_string()))?;
    // Check the version before the schema so newer packages fail clearly.
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| FormatError::Manifest("missing format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(FormatError::Version(u32::try_from(version).unwrap_or(u32::MAX)));
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| FormatError::Manifest(e.to_string()))?;
    let rounding: Rounding = manifest.rounding.parse()?;
    let layers = manifest.layers.iter().map(|r| load_layer(dir, r)).collect::<Result<Vec<_>, _>>()?;
    let graph = ModelGraph {
        input: (&manifest.input).into(),
        input_quant: (&manifest.input_quant).into(),
        layers,
        shortcuts: manifest.shortcuts.iter().map(|s| Shortcut { add: s.add, source: s.source }).collect(),
        num_classes: manifest.num_classes,
    };
    graph.validate()?;
    Ok(PreparedModel { graph, rounding })
}

#[cfg(test)]
mod tests {
    use super::*;
    use semistream_core::model::{build_model, prepare, Topology};

    fn model() -> PreparedModel {
        prepare(&build_model(&Topology::tiny(16), 4).unwrap(), Rounding::Nearest).unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        save_package(&m, dir.path()).unwrap();
        assert_eq!(load_package(dir.path()).unwrap(), m);
    }

    #[test]
    fn detects_truncation_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        save_package(&model(), dir.path()).unwrap();
        let blob = dir.path().join("layer001.weights");
        let mut bytes = fs::read(&blob).unwrap();
        bytes[0] ^= 1;
        fs::write(&blob, &bytes).unwrap();
        assert!(matches!(load_package(dir.path()), Err(FormatError::Checksum { .. })));
        bytes.pop();
        fs::write(&blob, &bytes).unwrap();
        assert!(matches!(load_package(dir.path()), Err(FormatError::Truncated { .. })));
    }

    #[test]
    fn rejects_other_versions() {
        let dir = tempfile::tempdir().unwrap();
        save_package(&model(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_NAME);
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replace("\"format_version\": 1", "\"format_version\": 99")).unwrap();
        let err = load_package(dir.path()).unwrap_err();
        assert!(matches!(err, FormatError::Version(99)));
        assert!(err.to_string().contains("99"));
    }
}
