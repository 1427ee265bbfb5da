//! IDX ingestion, binarisation, prior/bound splits and minibatching.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{RngStream, Substream, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Default binarisation threshold on the 0..=255 pixel scale.
pub const DEFAULT_THRESHOLD: f64 = 127.5;

/// Unsigned-byte IDX array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.data.len());
        out.extend_from_slice(&self.magic.to_be_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }
}

/// Parse an IDX buffer. Gzip input (leading `1f 8b`) is decompressed first;
/// error offsets then refer to the decompressed stream.
pub fn parse_idx(bytes: &[u8], expect_magic: u32) -> Result<IdxArray> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut raw = Vec::new();
        GzDecoder::new(bytes).read_to_end(&mut raw).map_err(|e| Error::Format {
            offset: 0,
            detail: format!("gzip stream: {e}"),
        })?;
        return parse_idx(&raw, expect_magic);
    }
    if bytes.len() < 4 {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            detail: "truncated header: missing magic number".into(),
        });
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if magic != expect_magic {
        return Err(Error::Format {
            offset: 0,
            detail: format!("expected magic 0x{expect_magic:08x}, found 0x{magic:08x}"),
        });
    }
    let ndims = (magic & 0xff) as usize;
    let header_len = 4 + 4 * ndims;
    if bytes.len() < header_len {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            detail: format!("truncated header: {ndims} dimensions need {header_len} bytes"),
        });
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let expected = dims.iter().product::<usize>();
    let payload = &bytes[header_len..];
    if payload.len() < expected {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            detail: format!("truncated payload: expected {expected} bytes, found {}", payload.len()),
        });
    }
    if payload.len() > expected {
        return Err(Error::Format {
            offset: (header_len + expected) as u64,
            detail: format!("{} trailing bytes after payload", payload.len() - expected),
        });
    }
    Ok(IdxArray {
        magic,
        dims,
        data: payload.to_vec(),
    })
}

pub fn load_idx(path: impl AsRef<Path>, expect_magic: u32) -> Result<IdxArray> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    parse_idx(&bytes, expect_magic)
}

pub fn write_idx(path: impl AsRef<Path>, array: &IdxArray) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, array.to_bytes()).map_err(|e| Error::file(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
    Prior,
    Bound,
}

/// Binary images stored row-major as `count × dim` bytes in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageDataset {
    examples: Vec<u8>,
    count: usize,
    dim: usize,
    source_name: String,
    split_tag: SplitTag,
}

impl ImageDataset {
    pub fn new(examples: Vec<u8>, dim: usize, source_name: impl Into<String>, split_tag: SplitTag) -> Result<Self> {
        if dim == 0 || examples.is_empty() || examples.len() % dim != 0 {
            return Err(Error::Validation(format!(
                "{} values cannot form a non-empty dataset of dimension {dim}",
                examples.len()
            )));
        }
        if let Some(i) = examples.iter().position(|&v| v > 1) {
            return Err(Error::Validation(format!("entry {i} is {} (expected 0 or 1)", examples[i])));
        }
        Ok(Self {
            count: examples.len() / dim,
            examples,
            dim,
            source_name: source_name.into(),
            split_tag,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source_name(&self) -> &str {
        &self.source_name
    }

    pub fn split_tag(&self) -> SplitTag {
        self.split_tag
    }

    pub fn examples(&self) -> &[u8] {
        &self.examples
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.examples[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows `indices` as a `(len, dim)` float tensor.
    pub fn rows_tensor(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend(self.row(i).iter().map(|&v| v as f64));
        }
        Tensor::from_raw(vec![indices.len(), self.dim], data)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_raw(
            vec![self.count, self.dim],
            self.examples.iter().map(|&v| v as f64).collect(),
        )
    }

    /// Consecutive row blocks of at most `size` rows, in storage order.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Tensor> + '_ {
        let size = size.max(1);
        (0..self.count).step_by(size).map(move |start| {
            let idx: Vec<usize> = (start..(start + size).min(self.count)).collect();
            self.rows_tensor(&idx)
        })
    }

    pub fn subset(&self, indices: &[usize], tag: SplitTag) -> Result<Self> {
        let mut examples = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.count {
                return Err(Error::Contract(format!("row {i} out of range for {} rows", self.count)));
            }
            examples.extend_from_slice(self.row(i));
        }
        Self::new(examples, self.dim, self.source_name.clone(), tag)
    }

    /// The first `n` rows (all rows when `n ≥ count`).
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.count)).collect();
        self.subset(&idx, self.split_tag)
    }

    /// Pixel view (`0` or `255`) for writing back out as IDX.
    pub fn to_idx(&self, rows: usize, cols: usize) -> Result<IdxArray> {
        if rows * cols != self.dim {
            return Err(Error::Shape(format!("{rows}×{cols} images do not have {} pixels", self.dim)));
        }
        Ok(IdxArray {
            magic: IDX_IMAGES_MAGIC,
            dims: vec![self.count, rows, cols],
            data: self.examples.iter().map(|&v| v * 255).collect(),
        })
    }
}

/// `1` where the pixel exceeds `threshold`, else `0`. The first dimension of
/// `raw` indexes examples; the rest are flattened.
pub fn binarise(raw: &IdxArray, threshold: f64, source_name: &str, tag: SplitTag) -> Result<ImageDataset> {
    if raw.dims.len() < 2 {
        return Err(Error::Validation(format!(
            "image array needs at least 2 dimensions, has {}",
            raw.dims.len()
        )));
    }
    let dim = raw.dims[1..].iter().product();
    let examples = raw.data.iter().map(|&p| (p as f64 > threshold) as u8).collect();
    ImageDataset::new(examples, dim, source_name, tag)
}

/// Load an IDX image file and binarise it at the default threshold.
pub fn load_binarised(path: impl AsRef<Path>, tag: SplitTag) -> Result<ImageDataset> {
    let path = path.as_ref();
    let raw = load_idx(path, IDX_IMAGES_MAGIC)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    binarise(&raw, DEFAULT_THRESHOLD, &name, tag)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub prior_fraction: f64,
    pub shuffle_seed: u64,
}

#[derive(Debug, Clone)]
pub struct DataSplit {
    /// `None` when `prior_fraction` rounds to zero rows.
    pub prior: Option<ImageDataset>,
    pub bound: ImageDataset,
    pub prior_indices: Vec<usize>,
    pub bound_indices: Vec<usize>,
}

/// Shuffle by seed, then cut at `⌊count · prior_fraction⌋`.
pub fn split(dataset: &ImageDataset, spec: &SplitSpec) -> Result<DataSplit> {
    if !(0.0..1.0).contains(&spec.prior_fraction) {
        return Err(Error::Config(format!(
            "prior_fraction {} outside [0, 1)",
            spec.prior_fraction
        )));
    }
    let mut perm: Vec<usize> = (0..dataset.count()).collect();
    RngStream::new(spec.shuffle_seed, Substream::Split).shuffle(&mut perm);
    let cut = (dataset.count() as f64 * spec.prior_fraction).floor() as usize;
    let bound_indices = perm.split_off(cut);
    if bound_indices.is_empty() {
        return Err(Error::Contract("split leaves the bound set empty".into()));
    }
    let prior = if perm.is_empty() {
        None
    } else {
        Some(dataset.subset(&perm, SplitTag::Prior)?)
    };
    Ok(DataSplit {
        prior,
        bound: dataset.subset(&bound_indices, SplitTag::Bound)?,
        prior_indices: perm,
        bound_indices,
    })
}

#[derive(Debug, Clone)]
pub struct Minibatch {
    pub indices: Vec<usize>,
    pub x: Tensor,
}

pub struct Minibatches<'a> {
    dataset: &'a ImageDataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Minibatches<'_> {
    type Item = Minibatch;

    fn next(&mut self) -> Option<Minibatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let x = self.dataset.rows_tensor(&indices);
        Some(Minibatch { indices, x })
    }
}

/// One epoch of shuffled batches; the last batch may be partial.
///
/// # Panics
/// If `batch_size` is zero.
pub fn minibatches(dataset: &ImageDataset, batch_size: usize, epoch_seed: u64) -> Minibatches<'_> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..dataset.count()).collect();
    RngStream::new(epoch_seed, Substream::DataShuffle).shuffle(&mut order);
    Minibatches {
        dataset,
        order,
        batch_size,
        pos: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(rows: usize, dim: usize) -> ImageDataset {
        let data = (0..rows * dim).map(|i| ((i * 7 + i / dim) % 3 == 0) as u8).collect();
        ImageDataset::new(data, dim, "synthetic", SplitTag::Train).unwrap()
    }

    #[test]
    fn threshold_boundary() {
        let raw = IdxArray {
            magic: IDX_IMAGES_MAGIC,
            dims: vec![1, 1, 3],
            data: vec![127, 128, 255],
        };
        let ds = binarise(&raw, DEFAULT_THRESHOLD, "t", SplitTag::Train).unwrap();
        assert_eq!(ds.row(0), &[0, 1, 1]);
    }

    #[test]
    fn all_zero_image_stays_zero() {
        let raw = IdxArray {
            magic: IDX_IMAGES_MAGIC,
            dims: vec![2, 2, 2],
            data: vec![0; 8],
        };
        let ds = binarise(&raw, DEFAULT_THRESHOLD, "t", SplitTag::Train).unwrap();
        assert!(ds.examples().iter().all(|&v| v == 0));
        assert_eq!((ds.count(), ds.dim()), (2, 4));
    }

    #[test]
    fn non_binary_entries_rejected() {
        assert!(ImageDataset::new(vec![0, 2], 2, "x", SplitTag::Train).is_err());
        assert!(ImageDataset::new(vec![], 2, "x", SplitTag::Train).is_err());
    }

    #[test]
    fn wrong_magic_names_both_values() {
        let err = parse_idx(&[0, 0, 8, 1, 0, 0, 0, 0], IDX_IMAGES_MAGIC).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("0x00000803") && msg.contains("0x00000801"), "{msg}");
    }

    #[test]
    fn zero_prior_fraction_keeps_everything_for_the_bound() {
        let ds = dataset(10, 3);
        let s = split(&ds, &SplitSpec { prior_fraction: 0.0, shuffle_seed: 1 }).unwrap();
        assert!(s.prior.is_none());
        assert_eq!(s.bound.count(), 10);
    }

    #[test]
    fn prior_fraction_must_stay_below_one() {
        let ds = dataset(1, 3);
        let r = split(&ds, &SplitSpec { prior_fraction: 0.99, shuffle_seed: 1 });
        assert!(r.is_ok());
        let ds = dataset(200, 3);
        let r = split(&ds, &SplitSpec { prior_fraction: 0.999, shuffle_seed: 1 });
        assert!(r.is_ok());
        assert!(matches!(
            split(&ds, &SplitSpec { prior_fraction: 1.0, shuffle_seed: 1 }),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn large_batch_is_single_batch() {
        let ds = dataset(7, 2);
        let batches: Vec<_> = minibatches(&ds, 100, 3).collect();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].x.rows(), 7);
    }

    #[test]
    fn epochs_shuffle_differently() {
        let ds = dataset(50, 2);
        let a: Vec<usize> = minibatches(&ds, 10, 1).flat_map(|b| b.indices).collect();
        let b: Vec<usize> = minibatches(&ds, 10, 2).flat_map(|b| b.indices).collect();
        assert_ne!(a, b);
    }

    #[test]
    fn chunks_cover_in_order() {
        let ds = dataset(11, 2);
        let rows: usize = ds.chunks(4).map(|t| t.rows()).sum();
        assert_eq!(rows, 11);
        assert_eq!(ds.chunks(4).next().unwrap().row(1), ds.rows_tensor(&[1]).row(0));
    }
}
