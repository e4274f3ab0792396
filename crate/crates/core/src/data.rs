//! IDX ingestion and deterministic batching.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::one_hot;

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;
pub const CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Column-major sample matrix with one-hot labels.
/// Input preprocessing applied after scaling pixels to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    None,
    /// One mean and standard deviation over all pixels.
    Global,
    /// Per-pixel mean and standard deviation.
    Pixel,
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::None => "none",
            Normalization::Global => "global",
            Normalization::Pixel => "pixel",
        })
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Normalization::None),
            "global" => Ok(Normalization::Global),
            "pixel" => Ok(Normalization::Pixel),
            other => Err(Error::Spec(format!("unknown normalization `{other}` (expected none, global or pixel)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n × m`, entries in `[0, 1]`
    pub inputs: Array2<f64>,
    /// `p × m` one-hot
    pub labels: Array2<f64>,
    /// Class index of every column.
    pub classes: Vec<usize>,
    pub split: Split,
    /// Image height and width, kept for re-encoding.
    pub rows: usize,
    pub cols: usize,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, classes: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if inputs.ncols() != classes.len() {
            return Err(Error::Shape(format!("{} samples but {} labels", inputs.ncols(), classes.len())));
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Idx(format!("label {c} out of range for {num_classes} classes")));
        }
        let labels = one_hot(&classes, num_classes);
        let n = inputs.nrows();
        Ok(Self { inputs, labels, classes, split, rows: n, cols: 1 })
    }

    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.nrows()
    }

    /// Columns `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select(Axis(1), idx),
            labels: self.labels.select(Axis(1), idx),
            classes: idx.iter().map(|&i| self.classes[i]).collect(),
            split: self.split,
            rows: self.rows,
            cols: self.cols,
        }
    }

    /// Samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.labels.nrows()];
        for &c in &self.classes {
            counts[c] += 1;
        }
        counts
    }

    /// Shifts every pixel row to zero mean and unit variance using the
    /// statistics of `reference`.
    pub fn standardize_with(&mut self, reference: &Dataset) {
        let mean = reference.inputs.mean_axis(Axis(1)).expect("nonempty reference");
        let std = reference.inputs.std_axis(Axis(1), 0.0).mapv(|s| if s > 1e-8 { s } else { 1.0 });
        for mut col in self.inputs.axis_iter_mut(Axis(1)) {
            col -= &mean;
            col /= &std;
        }
    }

    /// Shifts and scales all pixels by the single mean and standard
    /// deviation of `reference`.
    pub fn normalize_global_with(&mut self, reference: &Dataset) {
        let mean = reference.inputs.mean().expect("nonempty reference");
        let std = reference.inputs.std(0.0);
        let std = if std > 1e-8 { std } else { 1.0 };
        self.inputs.mapv_inplace(|x| (x - mean) / std);
    }

    pub fn normalize_with(&mut self, reference: &Dataset, how: Normalization) {
        match how {
            Normalization::None => {}
            Normalization::Global => self.normalize_global_with(reference),
            Normalization::Pixel => self.standardize_with(reference),
        }
    }

    /// Every label column has exactly one entry equal to one.
    pub fn labels_are_one_hot(&self) -> bool {
        self.labels.axis_iter(Axis(1)).zip(&self.classes).all(|(col, &c)| {
            col.iter().enumerate().all(|(i, &v)| if i == c { v == 1.0 } else { v == 0.0 })
        })
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .map_err(|e| Error::Idx(format!("{}: {e}", path.display())))?
        .read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Idx(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx(format!("{what}: truncated header")))
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Idx(format!("images: magic {magic}, expected {IMAGE_MAGIC}")));
    }
    let count = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Idx(format!("images: truncated, {} of {need} pixel bytes", body.len())));
    }
    Ok((count, rows, cols, &body[..need]))
}

pub fn parse_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Idx(format!("labels: magic {magic}, expected {LABEL_MAGIC}")));
    }
    let count = be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Idx(format!("labels: truncated, {} of {count} bytes", body.len())));
    }
    Ok(&body[..count])
}

/// Builds a dataset from raw IDX bytes; pixels are scaled by `1/255`.
pub fn decode_idx(images: &[u8], labels: &[u8], split: Split) -> Result<Dataset> {
    let (count, rows, cols, pixels) = parse_images(images)?;
    let labels = parse_labels(labels)?;
    if labels.len() != count {
        return Err(Error::Idx(format!("{count} images but {} labels", labels.len())));
    }
    let n = rows * cols;
    // pixels are stored sample-major, which is the transpose of our layout
    let inputs = Array2::from_shape_fn((n, count), |(i, j)| f64::from(pixels[j * n + i]) / 255.0);
    let classes: Vec<usize> = labels.iter().map(|&b| b as usize).collect();
    let mut ds = Dataset::new(inputs, classes, CLASSES, split)?;
    ds.rows = rows;
    ds.cols = cols;
    Ok(ds)
}

/// Loads an image/label IDX pair, gzip-compressed or not.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    decode_idx(&read_all(images)?, &read_all(labels)?, split)
}

/// IDX bytes `(images, labels)` for `ds`; pixels are mapped back with
/// `round(255·x)`.
pub fn encode_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let (n, m) = ds.inputs.dim();
    if ds.rows * ds.cols != n {
        return Err(Error::Shape(format!("{}×{} images do not have {n} pixels", ds.rows, ds.cols)));
    }
    let mut images = Vec::with_capacity(16 + n * m);
    for v in [IMAGE_MAGIC, m as u32, ds.rows as u32, ds.cols as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    for col in ds.inputs.axis_iter(Axis(1)) {
        for &x in col {
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::Idx(format!("pixel {x} outside [0, 1]")));
            }
            images.push((x * 255.0).round() as u8);
        }
    }
    let mut labels = Vec::with_capacity(8 + m);
    labels.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(m as u32).to_be_bytes());
    for &c in &ds.classes {
        labels.push(u8::try_from(c).map_err(|_| Error::Idx(format!("label {c} does not fit a byte")))?);
    }
    Ok((images, labels))
}

/// Writes `ds` as an IDX pair, gzip-compressed when the image path ends in
/// `.gz`.
pub fn write_idx(ds: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let (img, lab) = encode_idx(ds)?;
    for (path, bytes) in [(images, img), (labels, lab)] {
        let file = File::create(path)?;
        if path.extension().is_some_and(|e| e == "gz") {
            let mut enc = GzEncoder::new(file, Compression::default());
            enc.write_all(&bytes)?;
            enc.finish()?;
        } else {
            let mut file = file;
            file.write_all(&bytes)?;
        }
    }
    Ok(())
}

fn shuffled(m: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Shuffled partition of `0..m` into slices of `batch_size` for one epoch.
///
/// A batch size covering the whole dataset yields the identity order in a
/// single slice, so full-batch runs see the data exactly as loaded.
pub fn batches(m: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    if batch_size >= m {
        return vec![(0..m).collect()];
    }
    shuffled(m, seed, epoch as u64 + 1)
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

/// The first `k` columns of a seeded shuffle.
pub fn subset(ds: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    if k == 0 || k > ds.len() {
        return Err(Error::Shape(format!("subset size {k} not in 1..={}", ds.len())));
    }
    let idx = shuffled(ds.len(), seed, 0);
    Ok(ds.select(&idx[..k]))
}

/// FNV-1a over the label bytes and pixel bit patterns.
pub fn fingerprint(ds: &Dataset) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |b: u8| {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    };
    for &c in &ds.classes {
        eat(c as u8);
    }
    for col in ds.inputs.axis_iter(Axis(1)) {
        for &x in col {
            for b in x.to_bits().to_le_bytes() {
                eat(b);
            }
        }
    }
    h
}
