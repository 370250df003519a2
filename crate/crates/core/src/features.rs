//! Multi-layer pooled feature records, per-layer Z-score normalization and
//! the `LFOD` binary feature file.
//!
//! Layout of a feature file (little-endian):
//!
//! ```text
//! "LFOD" | u16 version=1 | u16 M | M x u32 c_m | u32 flags | u64 N
//! N x ( u16 id_len | id bytes | [u8 label if flags&1] | c x f32 raw values )
//! ```
//!
//! Values are stored raw (pre-normalization) in layer order. A JSON sidecar
//! `<file>.meta.json` repeats the layout and carries the encoder tag.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"LFOD";
pub const FEATURE_VERSION: u16 = 1;
pub const DEFAULT_DELTA: f64 = 1e-5;

const FLAG_HAS_LABELS: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLayout {
    layer_channel_counts: Vec<usize>,
    total_dim: usize,
    encoder_tag: String,
}

impl LayerLayout {
    pub fn new(layer_channel_counts: Vec<usize>, encoder_tag: impl Into<String>) -> Result<Self> {
        let total_dim = layer_channel_counts.iter().sum();
        Self::with_total_dim(layer_channel_counts, total_dim, encoder_tag)
    }

    /// Builds a layout from an externally declared total, rejecting it when it
    /// disagrees with the per-layer counts.
    pub fn with_total_dim(
        layer_channel_counts: Vec<usize>,
        total_dim: usize,
        encoder_tag: impl Into<String>,
    ) -> Result<Self> {
        if layer_channel_counts.is_empty() {
            return Err(Error::structure("layout needs at least one layer"));
        }
        if layer_channel_counts.contains(&0) {
            return Err(Error::structure("every layer needs at least one channel"));
        }
        let sum: usize = layer_channel_counts.iter().sum();
        if sum != total_dim {
            return Err(Error::structure(format!(
                "total_dim {total_dim} != sum of layer channels {sum}"
            )));
        }
        Ok(Self {
            layer_channel_counts,
            total_dim,
            encoder_tag: encoder_tag.into(),
        })
    }

    pub fn layer_channel_counts(&self) -> &[usize] {
        &self.layer_channel_counts
    }

    pub fn num_layers(&self) -> usize {
        self.layer_channel_counts.len()
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn encoder_tag(&self) -> &str {
        &self.encoder_tag
    }

    /// Index ranges of each layer inside a concatenated vector.
    pub fn ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.layer_channel_counts
            .iter()
            .map(|&c| {
                let r = start..start + c;
                start += c;
                r
            })
            .collect()
    }

    /// Same channel split, ignoring the encoder tag.
    pub fn same_shape(&self, other: &LayerLayout) -> bool {
        self.layer_channel_counts == other.layer_channel_counts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub sample_id: String,
    /// Pooled, un-normalized features, one vector per layer.
    pub raw_layers: Vec<Vec<f32>>,
}

impl FeatureRecord {
    pub fn new(sample_id: impl Into<String>, raw_layers: Vec<Vec<f32>>) -> Self {
        Self {
            sample_id: sample_id.into(),
            raw_layers,
        }
    }

    /// Splits a concatenated raw vector according to `layout`.
    pub fn from_concatenated(
        sample_id: impl Into<String>,
        values: &[f32],
        layout: &LayerLayout,
    ) -> Result<Self> {
        if values.len() != layout.total_dim() {
            return Err(Error::structure(format!(
                "expected {} values, got {}",
                layout.total_dim(),
                values.len()
            )));
        }
        let raw_layers = layout
            .ranges()
            .into_iter()
            .map(|r| values[r].to_vec())
            .collect();
        Ok(Self::new(sample_id, raw_layers))
    }

    pub fn check_layout(&self, layout: &LayerLayout) -> Result<()> {
        if self.raw_layers.len() != layout.num_layers() {
            return Err(Error::structure(format!(
                "sample `{}` has {} layers, layout declares {}",
                self.sample_id,
                self.raw_layers.len(),
                layout.num_layers()
            )));
        }
        for (m, (layer, &c)) in self
            .raw_layers
            .iter()
            .zip(layout.layer_channel_counts())
            .enumerate()
        {
            if layer.len() != c {
                return Err(Error::structure(format!(
                    "sample `{}` layer {} has {} channels, layout declares {}",
                    self.sample_id,
                    m + 1,
                    layer.len(),
                    c
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetLabel {
    Id,
    Ood,
    Unlabeled,
}

impl SetLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SetLabel::Id => "id",
            SetLabel::Ood => "ood",
            SetLabel::Unlabeled => "unlabeled",
        }
    }

    fn to_byte(self) -> Option<u8> {
        match self {
            SetLabel::Id => Some(0),
            SetLabel::Ood => Some(1),
            SetLabel::Unlabeled => None,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(SetLabel::Id),
            1 => Some(SetLabel::Ood),
            _ => None,
        }
    }
}

impl std::str::FromStr for SetLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "id" => Ok(SetLabel::Id),
            "ood" => Ok(SetLabel::Ood),
            "unlabeled" | "" => Ok(SetLabel::Unlabeled),
            other => Err(Error::config(format!("unknown label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    layout: LayerLayout,
    records: Vec<FeatureRecord>,
    label: SetLabel,
}

impl FeatureSet {
    pub fn new(layout: LayerLayout, records: Vec<FeatureRecord>, label: SetLabel) -> Result<Self> {
        for r in &records {
            r.check_layout(&layout)?;
        }
        Ok(Self {
            layout,
            records,
            label,
        })
    }

    pub fn layout(&self) -> &LayerLayout {
        &self.layout
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn label(&self) -> SetLabel {
        self.label
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Normalized `z_0` vectors for every record, in file order.
    pub fn assemble_all(&self, delta: f64) -> Result<Vec<Vec<f64>>> {
        self.records
            .iter()
            .map(|r| assemble_z0(r, &self.layout, delta))
            .collect()
    }
}

/// `(f - mean) / sqrt(var + delta)` with the population variance over the
/// vector's channels.
pub fn zscore_normalize(raw_layer: &[f64], delta: f64) -> Result<Vec<f64>> {
    if delta.is_nan() || delta <= 0.0 {
        return Err(Error::config(format!(
            "delta must be positive, got {delta}"
        )));
    }
    if raw_layer.is_empty() {
        return Err(Error::structure("cannot normalize an empty layer"));
    }
    if let Some(i) = raw_layer.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation {
            sample_id: String::new(),
            message: format!("non-finite value {} at channel {i}", raw_layer[i]),
        });
    }
    let n = raw_layer.len() as f64;
    let mean = raw_layer.iter().sum::<f64>() / n;
    let var = raw_layer.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + delta).sqrt();
    Ok(raw_layer.iter().map(|v| (v - mean) * inv).collect())
}

/// Concatenation of the normalized layers of `record`.
pub fn assemble_z0(record: &FeatureRecord, layout: &LayerLayout, delta: f64) -> Result<Vec<f64>> {
    record.check_layout(layout)?;
    let mut z0 = Vec::with_capacity(layout.total_dim());
    for (m, layer) in record.raw_layers.iter().enumerate() {
        let raw: Vec<f64> = layer.iter().map(|&v| f64::from(v)).collect();
        let normalized = zscore_normalize(&raw, delta).map_err(|e| match e {
            Error::Validation { message, .. } => Error::Validation {
                sample_id: record.sample_id.clone(),
                message: format!("layer {}: {message}", m + 1),
            },
            other => other,
        })?;
        z0.extend(normalized);
    }
    Ok(z0)
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    format: String,
    version: u16,
    encoder_tag: String,
    layer_channel_counts: Vec<usize>,
    total_dim: usize,
    num_records: u64,
    label: SetLabel,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

pub fn encode_feature_set(set: &FeatureSet) -> Result<Vec<u8>> {
    let layout = set.layout();
    let m = u16::try_from(layout.num_layers())
        .map_err(|_| Error::structure("too many layers for the file format"))?;
    let per_record = 2 + 16 + layout.total_dim() * 4;
    let mut out = Vec::with_capacity(24 + layout.num_layers() * 4 + set.len() * per_record);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&m.to_le_bytes());
    for &c in layout.layer_channel_counts() {
        let c = u32::try_from(c).map_err(|_| Error::structure("layer too wide"))?;
        out.extend_from_slice(&c.to_le_bytes());
    }
    let label_byte = set.label().to_byte();
    let flags = if label_byte.is_some() {
        FLAG_HAS_LABELS
    } else {
        0
    };
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    for r in set.records() {
        let id = r.sample_id.as_bytes();
        let id_len = u16::try_from(id.len()).map_err(|_| {
            Error::structure(format!(
                "sample id longer than 65535 bytes: {}",
                r.sample_id
            ))
        })?;
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(id);
        if let Some(b) = label_byte {
            out.push(b);
        }
        for layer in &r.raw_layers {
            for v in layer {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Decodes a feature file body. `encoder_tag` comes from the sidecar, since
/// the binary header does not carry it.
pub fn decode_feature_set(bytes: &[u8], encoder_tag: &str) -> Result<FeatureSet> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != FEATURE_MAGIC {
        return Err(Error::format(0, "bad magic, expected LFOD"));
    }
    let version = cur.u16("version")?;
    if version != FEATURE_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let m_offset = cur.pos as u64;
    let m = cur.u16("layer count")? as usize;
    if m == 0 {
        return Err(Error::format(m_offset, "layer count is zero"));
    }
    let mut counts = Vec::with_capacity(m);
    for _ in 0..m {
        let off = cur.pos as u64;
        let c = cur.u32("layer channel count")? as usize;
        if c == 0 {
            return Err(Error::format(off, "zero-width layer"));
        }
        counts.push(c);
    }
    let flags_offset = cur.pos as u64;
    let flags = cur.u32("flags")?;
    if flags & !FLAG_HAS_LABELS != 0 {
        return Err(Error::format(
            flags_offset,
            format!("unknown flag bits {flags:#x}"),
        ));
    }
    let has_labels = flags & FLAG_HAS_LABELS != 0;
    let n = cur.u64("record count")?;
    let layout = LayerLayout::new(counts, encoder_tag)
        .map_err(|e| Error::format(m_offset, e.to_string()))?;
    let c = layout.total_dim();

    let min_record = 2 + usize::from(has_labels) + 4 * c;
    let remaining = (bytes.len() - cur.pos) as u64;
    if n.saturating_mul(min_record as u64) > remaining {
        return Err(Error::format(
            cur.pos as u64,
            format!("header declares {n} records but only {remaining} payload bytes remain"),
        ));
    }

    let mut label = if has_labels {
        None
    } else {
        Some(SetLabel::Unlabeled)
    };
    let mut records = Vec::with_capacity(n as usize);
    let mut values = vec![0f32; c];
    for _ in 0..n {
        let id_len = cur.u16("sample id length")? as usize;
        let id_offset = cur.pos as u64;
        let id = std::str::from_utf8(cur.take(id_len, "sample id")?)
            .map_err(|_| Error::format(id_offset, "sample id is not UTF-8"))?
            .to_owned();
        if has_labels {
            let off = cur.pos as u64;
            let b = cur.u8("label")?;
            let l = SetLabel::from_byte(b)
                .ok_or_else(|| Error::format(off, format!("invalid label byte {b}")))?;
            match label {
                None => label = Some(l),
                Some(prev) if prev != l => {
                    return Err(Error::format(off, "records carry mixed labels"));
                }
                _ => {}
            }
        }
        let payload = cur.take(4 * c, "feature values")?;
        for (v, chunk) in values.iter_mut().zip(payload.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        records.push(FeatureRecord::from_concatenated(id, &values, &layout)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(
            cur.pos as u64,
            "trailing bytes after last record",
        ));
    }
    // A labeled file with zero records has no evidence of its label.
    let label = label.unwrap_or(SetLabel::Unlabeled);
    FeatureSet::new(layout, records, label)
}

pub fn write_feature_file(set: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_feature_set(set)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let layout = set.layout();
    let sidecar = Sidecar {
        format: "LFOD".into(),
        version: FEATURE_VERSION,
        encoder_tag: layout.encoder_tag().to_owned(),
        layer_channel_counts: layout.layer_channel_counts().to_vec(),
        total_dim: layout.total_dim(),
        num_records: set.len() as u64,
        label: set.label(),
    };
    let meta = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&meta, json + "\n").map_err(|e| Error::io(&meta, e))
}

/// Reads a feature file. The sidecar is optional; when present it must agree
/// with the binary header.
pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let meta_path = sidecar_path(path);
    let sidecar = match fs::read_to_string(&meta_path) {
        Ok(text) => Some(
            serde_json::from_str::<Sidecar>(&text)
                .map_err(|e| Error::format(0, format!("sidecar {}: {e}", meta_path.display())))?,
        ),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(Error::io(meta_path, e)),
    };
    let tag = sidecar
        .as_ref()
        .map_or("unknown", |s| s.encoder_tag.as_str());
    let set = decode_feature_set(&bytes, tag)?;
    if let Some(meta) = &sidecar {
        LayerLayout::with_total_dim(meta.layer_channel_counts.clone(), meta.total_dim, tag)
            .map_err(|e| Error::format(0, format!("sidecar layout: {e}")))?;
        if meta.layer_channel_counts != set.layout().layer_channel_counts() {
            return Err(Error::format(
                8,
                "sidecar layer counts disagree with the binary header",
            ));
        }
        if meta.num_records != set.len() as u64 {
            return Err(Error::format(
                0,
                "sidecar record count disagrees with the file",
            ));
        }
    }
    Ok(set)
}
