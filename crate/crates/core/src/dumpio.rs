//! On-disk formats: RCAD attention dumps, dump manifests and the detection
//! dataset fixtures (COCO-style ground truth + JSON-lines responses).
//!
//! RCAD layout, all integers little-endian:
//!
//! ```text
//! "RCAD"            4 bytes magic
//! version           u32
//! n, H, d_v         3 x u32
//! flags             u8   bit 0: values, bit 1: hidden, bit 2: theta hint
//! meta_len          u32
//! meta              meta_len bytes of JSON
//! attention         H*n*n f32
//! values            n*d_v f32 (if flagged)
//! hidden            n*d_v f32 (if flagged)
//! ```
//!
//! The JSON block holds the image id, category, theta hint, free-form
//! metadata and a SHA-256 of the float payload.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attn::{AttentionStack, AttnError, HiddenStates, ValueMatrix};
use crate::detparse::{NormalizedBox, RawResponse};
use crate::fitap::GroundTruthBox;

pub const MAGIC: [u8; 4] = *b"RCAD";
pub const SCHEMA_VERSION: u32 = 1;
/// Row-sum tolerance for attention stored as f32.
pub const F32_ROW_TOL: f64 = 1e-4;

const FLAG_VALUES: u8 = 1;
const FLAG_HIDDEN: u8 = 1 << 1;
const FLAG_THETA: u8 = 1 << 2;
const FIXED_HEADER_LEN: usize = 4 + 4 + 13;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("dump not found: {0}")]
    NotFound(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic {0:?}, expected \"RCAD\"")]
    BadMagic([u8; 4]),
    #[error("unsupported schema version {0}")]
    UnsupportedVersion(u32),
    #[error("length mismatch: header implies {expected} bytes, found {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("payload checksum mismatch: expected {expected}, computed {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("malformed metadata block: {0}")]
    Metadata(String),
    #[error("dump invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Attention(#[from] AttnError),
}

pub type Result<T> = std::result::Result<T, DumpError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DumpError + '_ {
    move |source| {
        if source.kind() == io::ErrorKind::NotFound {
            DumpError::NotFound(path.to_path_buf())
        } else {
            DumpError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

/// Attention, values and hidden states captured for one (image, query) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    pub schema_version: u32,
    pub image_id: u64,
    pub category: String,
    pub tokens: usize,
    pub heads: usize,
    pub dims: usize,
    /// H x n x n, row-major.
    pub attention: Vec<f32>,
    /// n x d_v, row-major.
    pub values: Option<Vec<f32>>,
    /// n x d_v, row-major.
    pub hidden: Option<Vec<f32>>,
    pub theta_hint: Option<f64>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaBlock {
    image_id: u64,
    category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    theta_hint: Option<f64>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    payload_sha256: String,
}

fn narrow<'a>(it: impl IntoIterator<Item = &'a f64>) -> Vec<f32> {
    it.into_iter().map(|&v| v as f32).collect()
}

impl AttentionDump {
    /// Narrows 64-bit arrays to the 32-bit storage layout.
    pub fn from_arrays(
        image_id: u64,
        category: impl Into<String>,
        stack: &AttentionStack,
        values: Option<&ValueMatrix>,
        hidden: Option<&HiddenStates>,
    ) -> Self {
        let dims = values
            .map(ValueMatrix::dims)
            .or(hidden.map(HiddenStates::dims))
            .unwrap_or(0);
        Self {
            schema_version: SCHEMA_VERSION,
            image_id,
            category: category.into(),
            tokens: stack.tokens(),
            heads: stack.heads(),
            dims,
            attention: narrow(stack.weights().iter()),
            values: values.map(|v| narrow(v.as_array().iter())),
            hidden: hidden.map(|h| narrow(h.as_array().iter())),
            theta_hint: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_theta_hint(mut self, theta: f64) -> Self {
        self.theta_hint = Some(theta);
        self
    }

    pub fn with_metadata(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    fn flags(&self) -> u8 {
        let mut flags = 0;
        if self.values.is_some() {
            flags |= FLAG_VALUES;
        }
        if self.hidden.is_some() {
            flags |= FLAG_HIDDEN;
        }
        if self.theta_hint.is_some() {
            flags |= FLAG_THETA;
        }
        flags
    }

    fn payload_floats(&self) -> usize {
        let side = self.tokens * self.dims;
        self.heads * self.tokens * self.tokens
            + self.values.as_ref().map_or(0, |_| side)
            + self.hidden.as_ref().map_or(0, |_| side)
    }

    /// Shape and row-sum checks.
    pub fn validate(&self) -> Result<()> {
        let expect = |what: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(DumpError::Invariant(format!(
                    "{what} holds {got} floats, dimensions imply {want}"
                )))
            }
        };
        expect("attention", self.attention.len(), self.heads * self.tokens * self.tokens)?;
        if let Some(v) = &self.values {
            expect("values", v.len(), self.tokens * self.dims)?;
        }
        if let Some(h) = &self.hidden {
            expect("hidden", h.len(), self.tokens * self.dims)?;
        }
        self.stack()?;
        self.value_matrix().transpose()?;
        self.hidden_states().transpose()?;
        Ok(())
    }

    /// Widened attention, validated at the f32 row-sum tolerance.
    pub fn stack(&self) -> Result<AttentionStack> {
        let arr = Array3::from_shape_vec(
            (self.heads, self.tokens, self.tokens),
            self.attention.iter().map(|&v| f64::from(v)).collect(),
        )
        .map_err(|e| DumpError::Invariant(e.to_string()))?;
        Ok(AttentionStack::with_tolerance(arr, F32_ROW_TOL)?)
    }

    fn matrix(&self, data: &[f32]) -> Result<Array2<f64>> {
        Array2::from_shape_vec(
            (self.tokens, self.dims),
            data.iter().map(|&v| f64::from(v)).collect(),
        )
        .map_err(|e| DumpError::Invariant(e.to_string()))
    }

    pub fn value_matrix(&self) -> Option<Result<ValueMatrix>> {
        self.values
            .as_deref()
            .map(|v| Ok(ValueMatrix::new(self.matrix(v)?)?))
    }

    pub fn hidden_states(&self) -> Option<Result<HiddenStates>> {
        self.hidden
            .as_deref()
            .map(|h| Ok(HiddenStates::new(self.matrix(h)?)?))
    }

    fn payload_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * self.payload_floats());
        let sections = [Some(&self.attention), self.values.as_ref(), self.hidden.as_ref()];
        for section in sections.into_iter().flatten() {
            for v in section {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let payload = self.payload_bytes();
        let meta = serde_json::to_vec(&MetaBlock {
            image_id: self.image_id,
            category: self.category.clone(),
            theta_hint: self.theta_hint,
            metadata: self.metadata.clone(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        })
        .map_err(|e| DumpError::Metadata(e.to_string()))?;

        let dim = |v: usize| {
            u32::try_from(v).map_err(|_| DumpError::Invariant(format!("dimension {v} exceeds u32")))
        };
        let mut out = Vec::with_capacity(FIXED_HEADER_LEN + 4 + meta.len() + payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.schema_version.to_le_bytes());
        for v in [self.tokens, self.heads, self.dims] {
            out.extend_from_slice(&dim(v)?.to_le_bytes());
        }
        out.push(self.flags());
        out.extend_from_slice(&dim(meta.len())?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let short = |expected: usize| DumpError::LengthMismatch {
            expected,
            actual: bytes.len(),
        };
        if bytes.len() < 4 {
            return Err(short(FIXED_HEADER_LEN + 4));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(DumpError::BadMagic(magic));
        }
        if bytes.len() < FIXED_HEADER_LEN + 4 {
            return Err(short(FIXED_HEADER_LEN + 4));
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != SCHEMA_VERSION {
            return Err(DumpError::UnsupportedVersion(version));
        }
        let (tokens, heads, dims) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
        let flags = bytes[20];
        if flags & !(FLAG_VALUES | FLAG_HIDDEN | FLAG_THETA) != 0 {
            return Err(DumpError::Metadata(format!("unknown flag bits {flags:#04x}")));
        }
        let meta_len = u32_at(21) as usize;
        let meta_start = FIXED_HEADER_LEN + 4;
        let payload_start = meta_start + meta_len;

        // u32 dimensions can overflow usize products on hostile headers
        let sections = u64::from(flags & FLAG_VALUES != 0) + u64::from(flags & FLAG_HIDDEN != 0);
        let side = tokens as u64 * dims as u64;
        let attn_len = (heads as u64 * tokens as u64).checked_mul(tokens as u64);
        let expected = attn_len
            .and_then(|a| side.checked_mul(sections)?.checked_add(a))
            .and_then(|f| f.checked_mul(4)?.checked_add(payload_start as u64));
        match expected {
            Some(e) if e == bytes.len() as u64 => {}
            Some(e) => return Err(short(usize::try_from(e).unwrap_or(usize::MAX))),
            None => return Err(short(usize::MAX)),
        }
        let (side, attn_len) = (side as usize, attn_len.unwrap_or(0) as usize);

        let meta: MetaBlock = serde_json::from_slice(&bytes[meta_start..payload_start])
            .map_err(|e| DumpError::Metadata(e.to_string()))?;
        if meta.theta_hint.is_some() != (flags & FLAG_THETA != 0) {
            return Err(DumpError::Metadata(
                "theta flag disagrees with metadata block".into(),
            ));
        }
        let payload = &bytes[payload_start..];
        let actual = hex::encode(Sha256::digest(payload));
        if actual != meta.payload_sha256 {
            return Err(DumpError::ChecksumMismatch {
                expected: meta.payload_sha256,
                actual,
            });
        }

        let mut chunks = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let mut take = |count: usize| chunks.by_ref().take(count).collect::<Vec<f32>>();
        let attention = take(attn_len);
        let values = (flags & FLAG_VALUES != 0).then(|| take(side));
        let hidden = (flags & FLAG_HIDDEN != 0).then(|| take(side));
        let dump = Self {
            schema_version: version,
            image_id: meta.image_id,
            category: meta.category,
            tokens,
            heads,
            dims,
            attention,
            values,
            hidden,
            theta_hint: meta.theta_hint,
            metadata: meta.metadata,
        };
        dump.validate()?;
        Ok(dump)
    }
}

/// Refuses to write dumps that fail validation.
pub fn write_dump(dump: &AttentionDump, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = dump.to_bytes()?;
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<AttentionDump> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    AttentionDump::from_bytes(&bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub image_id: u64,
    pub category: String,
    pub byte_length: u64,
    /// SHA-256 of the whole file, hex.
    pub checksum: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DumpManifest {
    /// Writes `dump` under `dir` and records it.
    pub fn add(&mut self, dir: &Path, file_name: &str, dump: &AttentionDump) -> Result<()> {
        let bytes = dump.to_bytes()?;
        let path = dir.join(file_name);
        fs::write(&path, &bytes).map_err(io_err(&path))?;
        self.entries.push(ManifestEntry {
            path: file_name.to_owned(),
            image_id: dump.image_id,
            category: dump.category.clone(),
            byte_length: bytes.len() as u64,
            checksum: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| DumpError::Metadata(e.to_string()))?;
        fs::write(path, json + "\n").map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| DumpError::Metadata(format!("{}: {e}", path.display())))
    }

    /// Reads every entry, verifying length and checksum first.
    pub fn read_all(&self, dir: &Path) -> Result<Vec<AttentionDump>> {
        self.entries
            .iter()
            .map(|entry| {
                let path = dir.join(&entry.path);
                let bytes = fs::read(&path).map_err(io_err(&path))?;
                if bytes.len() as u64 != entry.byte_length {
                    return Err(DumpError::LengthMismatch {
                        expected: entry.byte_length as usize,
                        actual: bytes.len(),
                    });
                }
                let actual = hex::encode(Sha256::digest(&bytes));
                if actual != entry.checksum {
                    return Err(DumpError::ChecksumMismatch {
                        expected: entry.checksum.clone(),
                        actual,
                    });
                }
                AttentionDump::from_bytes(&bytes)
            })
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset file not found: {0}")]
    NotFound(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: u64,
    width: f64,
    height: f64,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    #[serde(default)]
    category_id: Option<u64>,
    #[serde(default)]
    category: Option<String>,
    bbox: [f64; 4],
}

#[derive(Debug, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Debug, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetCounts {
    pub images: usize,
    pub annotations: usize,
    pub categories: usize,
    pub responses: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ground_truth: Vec<GroundTruthBox>,
    pub responses: Vec<RawResponse>,
    pub counts: DatasetCounts,
}

/// COCO `[x, y, w, h]` in pixels to unit `[x1, y1, x2, y2]`.
pub fn coco_bbox_to_normalized(bbox: [f64; 4], width: f64, height: f64) -> Option<NormalizedBox> {
    let [x, y, w, h] = bbox;
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    NormalizedBox::new(
        clamp(x / width),
        clamp(y / height),
        clamp((x + w) / width),
        clamp((y + h) / height),
    )
}

fn read_text(path: &Path) -> std::result::Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|source| {
        if source.kind() == io::ErrorKind::NotFound {
            DatasetError::NotFound(path.to_path_buf())
        } else {
            DatasetError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })
}

pub fn load_ground_truth(path: &Path) -> std::result::Result<(Vec<GroundTruthBox>, DatasetCounts), DatasetError> {
    let schema = |message: String| DatasetError::Schema {
        path: path.to_path_buf(),
        message,
    };
    let coco: CocoFile = serde_json::from_str(&read_text(path)?).map_err(|e| schema(e.to_string()))?;

    let mut images = HashMap::new();
    for (k, img) in coco.images.iter().enumerate() {
        if !(img.width > 0.0 && img.height > 0.0) {
            return Err(schema(format!("images[{k}]: width and height must be positive")));
        }
        images.insert(img.id, (img.width, img.height));
    }
    let names: HashMap<u64, &str> = coco.categories.iter().map(|c| (c.id, c.name.as_str())).collect();

    let mut gts = Vec::with_capacity(coco.annotations.len());
    for (k, ann) in coco.annotations.iter().enumerate() {
        let &(w, h) = images
            .get(&ann.image_id)
            .ok_or_else(|| schema(format!("annotations[{k}].image_id: unknown image {}", ann.image_id)))?;
        let category = match (&ann.category, ann.category_id) {
            (Some(name), _) => name.clone(),
            (None, Some(id)) => names
                .get(&id)
                .ok_or_else(|| schema(format!("annotations[{k}].category_id: unknown category {id}")))?
                .to_string(),
            (None, None) => return Err(schema(format!("annotations[{k}]: missing category"))),
        };
        let bbox = coco_bbox_to_normalized(ann.bbox, w, h)
            .ok_or_else(|| schema(format!("annotations[{k}].bbox: degenerate box {:?}", ann.bbox)))?;
        gts.push(GroundTruthBox {
            image_id: ann.image_id,
            category,
            bbox,
        });
    }
    let mut cats: Vec<&str> = gts.iter().map(|g| g.category.as_str()).collect();
    cats.sort_unstable();
    cats.dedup();
    let counts = DatasetCounts {
        images: coco.images.len(),
        annotations: gts.len(),
        categories: cats.len(),
        responses: 0,
    };
    Ok((gts, counts))
}

pub fn load_responses(path: &Path) -> std::result::Result<Vec<RawResponse>, DatasetError> {
    let mut out = Vec::new();
    for (k, line) in read_text(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| DatasetError::Schema {
            path: path.to_path_buf(),
            message: format!("line {}: {message}", k + 1),
        };
        let resp: RawResponse = serde_json::from_str(line).map_err(|e| schema(e.to_string()))?;
        if !(resp.width > 0.0 && resp.height > 0.0) {
            return Err(schema("width and height must be positive".into()));
        }
        out.push(resp);
    }
    Ok(out)
}

pub fn load_dataset(gt_path: &Path, responses_path: &Path) -> std::result::Result<Dataset, DatasetError> {
    let (ground_truth, mut counts) = load_ground_truth(gt_path)?;
    let responses = load_responses(responses_path)?;
    counts.responses = responses.len();
    log::info!(
        "loaded {} images, {} annotations in {} categories, {} responses",
        counts.images,
        counts.annotations,
        counts.categories,
        counts.responses
    );
    Ok(Dataset {
        ground_truth,
        responses,
        counts,
    })
}
