//! On-disk formats: JSON with fixed-precision floats, edge lists, model
//! binaries, partition manifests and IDX image/label files.

use std::io;
use std::path::Path;

use fsdadmm_core::data::{label_kl_from_uniform, Dataset, Partition};
use fsdadmm_core::nnmodel::{ModelSpec, ModelState};
use fsdadmm_core::Topology;
use serde::{Deserialize, Serialize};
use serde_json::ser::Formatter;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    EdgeList { line: usize, message: String },
    #[error("bad model file: {0}")]
    Model(String),
    #[error("bad IDX file: {0}")]
    Idx(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// JSON formatter that writes every float with 17 significant digits.
#[derive(Debug, Clone, Copy, Default)]
pub struct Precise;

impl Formatter for Precise {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(fmt_f64(value).as_bytes())
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }
}

/// `v` with 17 significant digits, in scientific notation.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Compact JSON with [`Precise`] floats.
pub fn to_json<T: Serialize>(value: &T) -> Result<String, FormatError> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Precise);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

/// `n=<devices>` then one `i j` line per undirected edge.
pub fn write_edge_list(t: &Topology) -> String {
    let mut s = format!("n={}\n", t.num_devices());
    for &(i, j) in t.edges() {
        s.push_str(&format!("{i} {j}\n"));
    }
    s
}

/// Parses [`write_edge_list`] output. Blank lines and `#` comments are skipped.
pub fn read_edge_list(text: &str) -> Result<Topology, FormatError> {
    let mut n = None;
    let mut edges = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        let err = |message: &str| FormatError::EdgeList {
            line: line_no,
            message: message.to_string(),
        };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if n.is_none() {
            let count = line
                .strip_prefix("n=")
                .and_then(|v| v.trim().parse::<usize>().ok())
                .ok_or_else(|| err("expected header `n=<devices>`"))?;
            n = Some(count);
            continue;
        }
        let mut parts = line.split_whitespace().map(str::parse::<usize>);
        match (parts.next(), parts.next(), parts.next()) {
            (Some(Ok(i)), Some(Ok(j)), None) => edges.push((i, j)),
            _ => return Err(err("expected two device indices")),
        }
    }
    let n = n.ok_or(FormatError::EdgeList {
        line: 0,
        message: "missing header".into(),
    })?;
    Topology::new(n, edges).map_err(|e| FormatError::EdgeList {
        line: 0,
        message: e.to_string(),
    })
}

const MODEL_MAGIC: &[u8; 4] = b"FSDM";

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    spec: ModelSpec,
    num_params: usize,
}

/// `FSDM`, little-endian `u32` header length, JSON header, then the
/// parameters as little-endian `f64`.
pub fn encode_model(model: &ModelState) -> Vec<u8> {
    let header = serde_json::to_vec(&ModelHeader {
        spec: model.spec.clone(),
        num_params: model.num_params(),
    })
    .expect("header is serializable");
    let mut out = Vec::with_capacity(8 + header.len() + 8 * model.num_params());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for p in &model.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelState, FormatError> {
    let bad = |m: &str| FormatError::Model(m.to_string());
    if bytes.len() < 8 || &bytes[..4] != MODEL_MAGIC {
        return Err(bad("missing magic"));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: ModelHeader = serde_json::from_slice(body)?;
    let data = &bytes[8 + hlen..];
    if data.len() != 8 * header.num_params {
        return Err(bad("parameter block has the wrong length"));
    }
    let params = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    ModelState::from_params(header.spec, params).map_err(|e| FormatError::Model(e.to_string()))
}

pub fn write_model(path: &Path, model: &ModelState) -> Result<(), FormatError> {
    std::fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<ModelState, FormatError> {
    decode_model(&std::fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceManifest {
    pub device: usize,
    pub samples: usize,
    pub label_histogram: Vec<usize>,
    pub kl_from_uniform: f64,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub num_classes: usize,
    pub devices: Vec<DeviceManifest>,
}

impl PartitionManifest {
    pub fn new(partition: &Partition, d: &Dataset) -> Self {
        let kl = label_kl_from_uniform(partition, d);
        let devices = partition
            .assignment()
            .iter()
            .zip(kl)
            .enumerate()
            .map(|(device, (idx, kl_from_uniform))| DeviceManifest {
                device,
                samples: idx.len(),
                label_histogram: d.class_histogram(idx),
                kl_from_uniform,
                indices: idx.clone(),
            })
            .collect();
        Self {
            num_classes: d.num_classes(),
            devices,
        }
    }

    /// Fixed-width text table without the index lists.
    pub fn table(&self) -> String {
        let mut s = String::from("device  samples  kl_from_uniform  label_histogram\n");
        for d in &self.devices {
            let hist: Vec<String> = d.label_histogram.iter().map(|c| c.to_string()).collect();
            s.push_str(&format!(
                "{:>6}  {:>7}  {:>15.6}  {}\n",
                d.device,
                d.samples,
                d.kl_from_uniform,
                hist.join(" ")
            ));
        }
        s
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<usize, FormatError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")) as usize)
        .ok_or_else(|| FormatError::Idx("truncated header".into()))
}

/// Images from an IDX3 (`0x00000803`) file, flattened and scaled to `[0, 1]`.
/// Returns `(count, pixels per image, features)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>), FormatError> {
    if be_u32(bytes, 0)? != 0x0803 {
        return Err(FormatError::Idx("not an unsigned-byte rank-3 IDX file".into()));
    }
    let (count, rows, cols) = (be_u32(bytes, 4)?, be_u32(bytes, 8)?, be_u32(bytes, 12)?);
    let dim = rows * cols;
    let data = &bytes[16..];
    if data.len() != count * dim {
        return Err(FormatError::Idx("pixel block has the wrong length".into()));
    }
    Ok((count, dim, data.iter().map(|&b| f64::from(b) / 255.0).collect()))
}

/// Labels from an IDX1 (`0x00000801`) file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, FormatError> {
    if be_u32(bytes, 0)? != 0x0801 {
        return Err(FormatError::Idx("not an unsigned-byte rank-1 IDX file".into()));
    }
    let count = be_u32(bytes, 4)?;
    let data = &bytes[8..];
    if data.len() != count {
        return Err(FormatError::Idx("label block has the wrong length".into()));
    }
    Ok(data.iter().map(|&b| usize::from(b)).collect())
}

pub fn read_idx_dataset(images: &Path, labels: &Path, num_classes: usize) -> Result<Dataset, FormatError> {
    let (count, dim, features) = parse_idx_images(&std::fs::read(images)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels)?)?;
    if labels.len() != count {
        return Err(FormatError::Idx("image and label counts differ".into()));
    }
    Dataset::new(dim, features, labels, num_classes).map_err(|e| FormatError::Idx(e.to_string()))
}
