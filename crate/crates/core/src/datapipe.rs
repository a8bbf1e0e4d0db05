//! Offline preprocessing and binarization of multi-modal volumes.
//!
//! Raw volumes hold four modalities interleaved channels-last
//! (`h, w, d, c`) next to an integer label volume. Preprocessing
//! standardizes each channel, crops the depth axis, moves channels to the
//! front and joins the tumour classes into one binary mask. Processed
//! samples are then packed into a single record file:
//!
//! ```text
//! file    := "DMIS" version:u16 record*
//! record  := body_len:u32 id_len:u16 id dtype:u8 dims:u32[4] payload_len:u64 payload crc32:u32
//! payload := image (4,H,W,D) f32 ++ mask (1,H,W,D) f32
//! ```
//!
//! All integers are little-endian. `dims` is `(5, H, W, D)`, the image
//! channels plus the mask channel, so `dims` product times 4 is the payload
//! length. `body_len` counts every byte after itself.

use std::f64::consts::PI;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"DMIS";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;
pub const MODALITIES: usize = 4;
pub const MAX_LABEL: u8 = 3;
pub const DEFAULT_TARGET_DEPTH: usize = 152;
pub const DEFAULT_RATIOS: [f64; 3] = [0.70, 0.15, 0.15];

const HEADER_LEN: usize = 6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dims {0:?}: every axis needs at least 8 voxels")]
    InvalidDims([usize; 3]),
    #[error("CropError: target depth {target} exceeds depth {depth}")]
    Crop { target: usize, depth: usize },
    #[error("LayoutError: expected {MODALITIES} channels, found {0}")]
    Layout(usize),
    #[error("LabelError: label {0} outside 0..={MAX_LABEL}")]
    Label(u8),
    #[error("SplitError: {0}")]
    Split(String),
    #[error("invalid worker count {0}")]
    InvalidWorkers(usize),
    #[error("CorruptRecord: checksum mismatch in record `{id}`")]
    CorruptRecord { id: String },
    #[error("malformed record file: {0}")]
    Format(String),
    #[error("IoError: {0}")]
    Io(#[from] io::Error),
}

/// Unprocessed volume: four modalities interleaved channels-last.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVolume {
    pub id: String,
    /// `(h, w, d)`.
    pub dims: [usize; 3],
    pub channels: usize,
    /// Index `((h * W + w) * D + d) * C + c`.
    pub image: Vec<f32>,
    /// Index `(h * W + w) * D + d`.
    pub labels: Vec<u8>,
}

impl RawVolume {
    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    fn check(&self) -> Result<(), DataError> {
        if self.image.len() != self.voxels() * self.channels || self.labels.len() != self.voxels() {
            return Err(DataError::Format(format!(
                "volume `{}` buffers do not match its dims",
                self.id
            )));
        }
        Ok(())
    }
}

/// Model-ready sample, channels-first.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedSample {
    pub id: String,
    /// `(h, w, d)`.
    pub dims: [usize; 3],
    /// `(4, h, w, d)` row-major.
    pub image: Vec<f32>,
    /// `(1, h, w, d)` of 0/1.
    pub mask: Vec<u8>,
}

impl ProcessedSample {
    pub fn image_shape(&self) -> [usize; 4] {
        [MODALITIES, self.dims[0], self.dims[1], self.dims[2]]
    }

    pub fn mask_shape(&self) -> [usize; 4] {
        [1, self.dims[0], self.dims[1], self.dims[2]]
    }
}

/// Deterministic stand-in for one multi-modal scan: smooth random fields per
/// channel and `blobs` ellipsoids labelled 1..=3.
pub fn synth_volume(seed: u64, dims: [usize; 3], blobs: usize) -> Result<RawVolume, DataError> {
    if dims.iter().any(|&d| d < 8) {
        return Err(DataError::InvalidDims(dims));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [hn, wn, dn] = dims;
    let voxels = hn * wn * dn;

    // three low-frequency plane waves per channel
    struct Wave {
        amp: f64,
        freq: [f64; 3],
        phase: f64,
    }
    let fields: Vec<(f64, f64, Vec<Wave>)> = (0..MODALITIES)
        .map(|_| {
            let offset = rng.gen_range(50.0..500.0);
            let scale = rng.gen_range(10.0..100.0);
            let waves = (0..3)
                .map(|_| Wave {
                    amp: rng.gen_range(0.2..1.0),
                    freq: [
                        rng.gen_range(0.5..2.0) / hn as f64,
                        rng.gen_range(0.5..2.0) / wn as f64,
                        rng.gen_range(0.5..2.0) / dn as f64,
                    ],
                    phase: rng.gen_range(0.0..2.0 * PI),
                })
                .collect();
            (offset, scale, waves)
        })
        .collect();

    let mut labels = vec![0u8; voxels];
    for _ in 0..blobs {
        let center = dims.map(|n| rng.gen_range(0.0..n as f64));
        let radius = dims.map(|n| rng.gen_range(1.5f64.max(n as f64 / 10.0)..n as f64 / 4.0));
        let label = rng.gen_range(1..=MAX_LABEL);
        for h in 0..hn {
            for w in 0..wn {
                for d in 0..dn {
                    let p = [h as f64, w as f64, d as f64];
                    let r2: f64 = (0..3).map(|i| ((p[i] - center[i]) / radius[i]).powi(2)).sum();
                    if r2 <= 1.0 {
                        labels[(h * wn + w) * dn + d] = label;
                    }
                }
            }
        }
    }

    let mut image = vec![0f32; voxels * MODALITIES];
    for h in 0..hn {
        for w in 0..wn {
            for d in 0..dn {
                let v = (h * wn + w) * dn + d;
                let p = [h as f64, w as f64, d as f64];
                for (c, (offset, scale, waves)) in fields.iter().enumerate() {
                    let s: f64 = waves
                        .iter()
                        .map(|wv| wv.amp * (2.0 * PI * (0..3).map(|i| wv.freq[i] * p[i]).sum::<f64>() + wv.phase).sin())
                        .sum();
                    let lesion = 0.5 * labels[v] as f64;
                    image[v * MODALITIES + c] = (offset + scale * (s + lesion)) as f32;
                }
            }
        }
    }
    Ok(RawVolume {
        id: format!("synth-{seed}"),
        dims,
        channels: MODALITIES,
        image,
        labels,
    })
}

/// Per-channel zero mean, unit population variance. Constant channels
/// become zero.
pub fn standardize(volume: &RawVolume) -> Result<RawVolume, DataError> {
    volume.check()?;
    let c = volume.channels;
    let n = volume.voxels() as f64;
    let mut out = volume.clone();
    for ch in 0..c {
        let values = || volume.image.iter().skip(ch).step_by(c).map(|&x| x as f64);
        let mean = values().sum::<f64>() / n;
        let var = values().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        for (dst, x) in out.image.iter_mut().skip(ch).step_by(c).zip(values()) {
            *dst = if std > 0.0 { ((x - mean) / std) as f32 } else { 0.0 };
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    /// Keep slices `[0, target)`.
    #[default]
    Leading,
    /// Keep the middle `target` slices, extra slice dropped at the end.
    Center,
}

impl std::str::FromStr for CropMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "leading" => Ok(CropMode::Leading),
            "center" => Ok(CropMode::Center),
            other => Err(format!("unknown crop mode `{other}` (leading|center)")),
        }
    }
}

/// Crops the depth axis of image and labels identically.
pub fn crop_depth(volume: &RawVolume, target: usize, mode: CropMode) -> Result<RawVolume, DataError> {
    volume.check()?;
    let [hn, wn, dn] = volume.dims;
    if target > dn {
        return Err(DataError::Crop { target, depth: dn });
    }
    let start = match mode {
        CropMode::Leading => 0,
        CropMode::Center => (dn - target) / 2,
    };
    let c = volume.channels;
    let mut image = Vec::with_capacity(hn * wn * target * c);
    let mut labels = Vec::with_capacity(hn * wn * target);
    for row in 0..hn * wn {
        let base = row * dn + start;
        image.extend_from_slice(&volume.image[base * c..(base + target) * c]);
        labels.extend_from_slice(&volume.labels[base..base + target]);
    }
    Ok(RawVolume {
        id: volume.id.clone(),
        dims: [hn, wn, target],
        channels: c,
        image,
        labels,
    })
}

/// `(h, w, d, c)` to `(c, h, w, d)`.
pub fn to_channels_first(volume: &RawVolume) -> Result<Vec<f32>, DataError> {
    volume.check()?;
    if volume.channels != MODALITIES {
        return Err(DataError::Layout(volume.channels));
    }
    let v = volume.voxels();
    let mut out = vec![0f32; v * MODALITIES];
    for (i, px) in volume.image.chunks_exact(MODALITIES).enumerate() {
        for (c, &x) in px.iter().enumerate() {
            out[c * v + i] = x;
        }
    }
    Ok(out)
}

/// Inverse of [`to_channels_first`].
pub fn to_channels_last(image: &[f32], dims: [usize; 3]) -> Result<Vec<f32>, DataError> {
    let v: usize = dims.iter().product();
    if v == 0 || image.len() != MODALITIES * v {
        return Err(DataError::Layout(image.len().checked_div(v).unwrap_or(0)));
    }
    let mut out = vec![0f32; image.len()];
    for c in 0..MODALITIES {
        for i in 0..v {
            out[i * MODALITIES + c] = image[c * v + i];
        }
    }
    Ok(out)
}

/// Joins classes 1..=3 into foreground.
pub fn collapse_labels(labels: &[u8]) -> Result<Vec<u8>, DataError> {
    labels
        .iter()
        .map(|&l| match l {
            0 => Ok(0),
            1..=MAX_LABEL => Ok(1),
            _ => Err(DataError::Label(l)),
        })
        .collect()
}

/// Standardize, crop, transpose and collapse one raw volume.
pub fn preprocess(volume: &RawVolume, target_depth: usize, mode: CropMode) -> Result<ProcessedSample, DataError> {
    let v = crop_depth(&standardize(volume)?, target_depth, mode)?;
    Ok(ProcessedSample {
        id: v.id.clone(),
        dims: v.dims,
        image: to_channels_first(&v)?,
        mask: collapse_labels(&v.labels)?,
    })
}

/// `count` synthetic volumes with ids `vol0000..`, volume `i` seeded with
/// `seed + i`.
pub fn synth_dataset(count: usize, dims: [usize; 3], seed: u64, blobs: usize) -> Result<Vec<RawVolume>, DataError> {
    (0..count)
        .map(|i| {
            let mut v = synth_volume(seed.wrapping_add(i as u64), dims, blobs)?;
            v.id = format!("vol{i:04}");
            Ok(v)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    /// Split name per index `0..n`.
    pub fn assignment(&self) -> Vec<SplitName> {
        let n = self.train.len() + self.val.len() + self.test.len();
        let mut out = vec![SplitName::Test; n];
        for &i in &self.train {
            out[i] = SplitName::Train;
        }
        for &i in &self.val {
            out[i] = SplitName::Val;
        }
        out
    }
}

fn check_ratios(ratios: [f64; 3]) -> Result<(), DataError> {
    if ratios.iter().any(|r| !(*r >= 0.0 && r.is_finite())) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::Split(format!(
            "ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    Ok(())
}

/// Train and validation sizes are floored, the remainder goes to test.
/// Indices are assigned by a seeded shuffle; each list is sorted.
pub fn split_dataset(n: usize, ratios: [f64; 3], seed: u64) -> Result<Split, DataError> {
    if n < 3 {
        return Err(DataError::Split(format!("need at least 3 samples, got {n}")));
    }
    check_ratios(ratios)?;
    // the epsilon keeps products like 0.7 * 20 from flooring to 13
    let floor = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
    let train = floor(ratios[0]);
    let val = floor(ratios[1]).min(n - train);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let part = |range: std::ops::Range<usize>| {
        let mut v = order[range].to_vec();
        v.sort_unstable();
        v
    };
    Ok(Split {
        train: part(0..train),
        val: part(train..train + val),
        test: part(train + val..n),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Byte offset of the record's length prefix.
    pub offset: u64,
    /// Record size including the length prefix.
    pub length: u64,
    pub split: SplitName,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u16,
    pub entries: Vec<ManifestEntry>,
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl DatasetManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        serde_json::from_str(text).map_err(|e| DataError::Format(format!("manifest: {e}")))
    }

    pub fn ids(&self, split: SplitName) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id.as_str())
            .collect()
    }
}

/// Manifest location for a record file: `x.dmis` -> `x.manifest.json`.
pub fn manifest_path(data: &Path) -> PathBuf {
    data.with_extension("manifest.json")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratios: DEFAULT_RATIOS,
            seed: 0,
        }
    }
}

fn encode_record(s: &ProcessedSample) -> Result<Vec<u8>, DataError> {
    let v: usize = s.dims.iter().product();
    if s.image.len() != MODALITIES * v || s.mask.len() != v {
        return Err(DataError::Format(format!(
            "sample `{}` buffers do not match its dims",
            s.id
        )));
    }
    if let Some(&bad) = s.mask.iter().find(|&&m| m > 1) {
        return Err(DataError::Format(format!(
            "sample `{}` mask value {bad} is not binary",
            s.id
        )));
    }
    let id = s.id.as_bytes();
    let id_len = u16::try_from(id.len()).map_err(|_| DataError::Format("record id too long".into()))?;
    let dims = [MODALITIES + 1, s.dims[0], s.dims[1], s.dims[2]];
    let dims: Vec<u32> = dims
        .iter()
        .map(|&d| u32::try_from(d).map_err(|_| DataError::Format("dimension exceeds u32".into())))
        .collect::<Result<_, _>>()?;

    let mut payload = Vec::with_capacity((MODALITIES + 1) * v * 4);
    for x in &s.image {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    for &m in &s.mask {
        payload.extend_from_slice(&(m as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&payload);

    let body_len = 2 + id.len() + 1 + 16 + 8 + payload.len() + 4;
    let body_len = u32::try_from(body_len).map_err(|_| DataError::Format("record exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(body_len as usize + 4);
    out.extend_from_slice(&body_len.to_le_bytes());
    out.extend_from_slice(&id_len.to_le_bytes());
    out.extend_from_slice(id);
    out.push(DTYPE_F32);
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Serializes `samples` on `workers` threads and writes them in input order,
/// with the manifest next to the data file. Output bytes do not depend on
/// `workers`. An empty sample list gives an empty manifest.
pub fn pack_records(
    samples: &[ProcessedSample],
    workers: usize,
    path: &Path,
    split: SplitConfig,
) -> Result<DatasetManifest, DataError> {
    if workers == 0 {
        return Err(DataError::InvalidWorkers(workers));
    }
    check_ratios(split.ratios)?;
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = samples.iter().find(|s| !seen.insert(s.id.as_str())) {
        return Err(DataError::Format(format!("duplicate record id `{}`", dup.id)));
    }
    let assignment = if samples.is_empty() {
        Vec::new()
    } else {
        split_dataset(samples.len(), split.ratios, split.seed)?.assignment()
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| DataError::Io(io::Error::other(e)))?;
    let records: Vec<Vec<u8>> = pool.install(|| samples.par_iter().map(encode_record).collect::<Result<_, _>>())?;

    let mut bytes = Vec::with_capacity(HEADER_LEN + records.iter().map(Vec::len).sum::<usize>());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let mut entries = Vec::with_capacity(records.len());
    for ((rec, s), split) in records.iter().zip(samples).zip(assignment) {
        entries.push(ManifestEntry {
            id: s.id.clone(),
            offset: bytes.len() as u64,
            length: rec.len() as u64,
            split,
        });
        bytes.extend_from_slice(rec);
    }
    fs::write(path, &bytes)?;
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        entries,
        ratios: split.ratios,
        seed: split.seed,
    };
    fs::write(manifest_path(path), manifest.to_json())?;
    Ok(manifest)
}

fn truncated(what: &str) -> DataError {
    DataError::Io(io::Error::new(
        io::ErrorKind::UnexpectedEof,
        format!("truncated {what}"),
    ))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| truncated("record"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn check_header(bytes: &[u8]) -> Result<(), DataError> {
    if bytes.len() < HEADER_LEN {
        return Err(truncated("header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(DataError::Format("missing DMIS magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(DataError::Format(format!("unsupported format version {version}")));
    }
    Ok(())
}

fn decode_record(bytes: &[u8], offset: usize) -> Result<(ProcessedSample, usize), DataError> {
    let mut c = Cursor {
        buf: bytes,
        pos: offset,
    };
    let body_len = c.u32()? as usize;
    let end = offset + 4 + body_len;
    if end > bytes.len() {
        return Err(truncated("record"));
    }
    let mut c = Cursor {
        buf: &bytes[..end],
        pos: offset + 4,
    };
    let id_len = c.u16()? as usize;
    let id = std::str::from_utf8(c.take(id_len)?)
        .map_err(|_| DataError::Format("record id is not UTF-8".into()))?
        .to_string();
    let dtype = c.take(1)?[0];
    if dtype != DTYPE_F32 {
        return Err(DataError::Format(format!("record `{id}` has unknown dtype {dtype}")));
    }
    let dims = [c.u32()?, c.u32()?, c.u32()?, c.u32()?].map(|d| d as usize);
    let payload_len = c.u64()? as usize;
    let expected = dims.iter().try_fold(4usize, |acc, &d| acc.checked_mul(d));
    if dims[0] != MODALITIES + 1 || expected != Some(payload_len) {
        return Err(DataError::Format(format!(
            "record `{id}` dims {dims:?} disagree with payload length"
        )));
    }
    let payload = c.take(payload_len)?;
    let crc = c.u32()?;
    if c.pos != end {
        return Err(DataError::Format(format!(
            "record `{id}` length prefix is inconsistent"
        )));
    }
    if crc32fast::hash(payload) != crc {
        return Err(DataError::CorruptRecord { id });
    }
    let v = dims[1] * dims[2] * dims[3];
    let mut floats = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()));
    let image: Vec<f32> = floats.by_ref().take(MODALITIES * v).collect();
    let mask = floats
        .map(|m| match m {
            0.0 => Ok(0u8),
            1.0 => Ok(1u8),
            _ => Err(DataError::Format(format!("record `{id}` mask is not binary"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((
        ProcessedSample {
            id,
            dims: [dims[1], dims[2], dims[3]],
            image,
            mask,
        },
        end,
    ))
}

/// Reads the records listed in `manifest`, in manifest order, verifying
/// each checksum.
pub fn read_records(path: &Path, manifest: &DatasetManifest) -> Result<Vec<ProcessedSample>, DataError> {
    let bytes = fs::read(path)?;
    check_header(&bytes)?;
    manifest
        .entries
        .iter()
        .map(|e| {
            let offset = usize::try_from(e.offset).map_err(|_| truncated("file"))?;
            if offset < HEADER_LEN || offset > bytes.len() {
                return Err(truncated("file"));
            }
            let (sample, end) = decode_record(&bytes, offset)?;
            if sample.id != e.id || (end - offset) as u64 != e.length {
                return Err(DataError::Format(format!(
                    "manifest entry `{}` does not match the record at offset {}",
                    e.id, e.offset
                )));
            }
            Ok(sample)
        })
        .collect()
}

/// Walks the file front to back and returns `(id, offset, length)` for every
/// record, independently of any manifest.
pub fn scan_records(path: &Path) -> Result<Vec<(String, u64, u64)>, DataError> {
    let bytes = fs::read(path)?;
    check_header(&bytes)?;
    let mut pos = HEADER_LEN;
    let mut out = Vec::new();
    while pos < bytes.len() {
        let (sample, end) = decode_record(&bytes, pos)?;
        out.push((sample.id, pos as u64, (end - pos) as u64));
        pos = end;
    }
    Ok(out)
}
