//! Dataset ingestion, dynamic binarization and labelled-subset draws.
//!
//! Images are stored as `f32` intensities in `[0, 1]`, one flattened image
//! per row. On disk every dataset uses the IDX container (optionally
//! gzipped), with unsigned-byte or big-endian `f32` payloads.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Environment variable naming the dataset cache directory.
pub const DATA_DIR_ENV: &str = "CAGEM_DATA_DIR";

const IDX_U8: u8 = 0x08;
const IDX_F32: u8 = 0x0D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    /// 60000 train (last 10000 held out for validation) + 10000 test.
    Mnist,
    /// A 10000-digit MNIST sample, split 8000/1000/1000.
    Mnist10k,
    /// 28x28 characters labelled by alphabet; last 10% of train held out.
    Omniglot,
}

impl DatasetName {
    pub fn classes(self) -> usize {
        match self {
            DatasetName::Mnist | DatasetName::Mnist10k => 10,
            DatasetName::Omniglot => 50,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::Mnist10k => "mnist10k",
            DatasetName::Omniglot => "omniglot",
        }
    }
}

impl fmt::Display for DatasetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetName::Mnist),
            "mnist10k" => Ok(DatasetName::Mnist10k),
            "omniglot" => Ok(DatasetName::Omniglot),
            _ => Err(Error::Config(format!("unknown dataset {s:?} (expected mnist, mnist10k or omniglot)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?} (expected train, valid or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Array2<f32>,
    pub labels: Option<Vec<usize>>,
    pub split: Split,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Array2<f32>, labels: Option<Vec<usize>>, split: Split, classes: usize) -> Result<Self> {
        if let Some(v) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel intensity {v} outside [0, 1]")));
        }
        if let Some(l) = &labels {
            if l.len() != images.nrows() {
                return Err(Error::dim("dataset labels", images.nrows(), l.len()));
            }
            if let Some(&bad) = l.iter().find(|&&c| c >= classes) {
                return Err(Error::IndexOutOfRange { index: bad, len: classes });
            }
        }
        Ok(Self { images, labels, split, classes })
    }

    pub fn len(&self) -> usize {
        self.images.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.images.nrows() == 0
    }

    pub fn x_dim(&self) -> usize {
        self.images.ncols()
    }

    /// Copies the given rows into a new intensity matrix.
    pub fn rows(&self, indices: &[usize]) -> Array2<f32> {
        self.images.select(Axis(0), indices)
    }

    pub fn labels_at(&self, indices: &[usize]) -> Result<Vec<usize>> {
        let l = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::DegenerateData(format!("{} split has no labels", self.split)))?;
        Ok(indices.iter().map(|&i| l[i]).collect())
    }

    /// The first `n` rows (all of them if there are fewer).
    pub fn head(&self, n: usize) -> Dataset {
        self.slice(0, n.min(self.len()), self.split)
    }

    fn slice(&self, lo: usize, hi: usize, split: Split) -> Dataset {
        Dataset {
            images: self.images.slice(ndarray::s![lo..hi, ..]).to_owned(),
            labels: self.labels.as_ref().map(|l| l[lo..hi].to_vec()),
            split,
            classes: self.classes,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Datasets {
    pub name: DatasetName,
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

impl Datasets {
    pub fn split(&self, s: Split) -> &Dataset {
        match s {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// Cache directory for a dataset: `$CAGEM_DATA_DIR/<name>`, else `data/<name>`.
pub fn default_data_dir(name: DatasetName) -> PathBuf {
    let root = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"));
    root.join(name.as_str())
}

/// Raw contents of an IDX file.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: IdxData,
}

#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl IdxData {
    fn len(&self) -> usize {
        match self {
            IdxData::U8(v) => v.len(),
            IdxData::F32(v) => v.len(),
        }
    }
}

fn format_err(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), offset, message: message.into() }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Reads an IDX file, transparently decompressing gzip input.
pub fn read_idx(path: &Path) -> Result<IdxArray> {
    let bytes = read_bytes(path)?;
    if bytes.len() < 4 {
        return Err(format_err(path, bytes.len() as u64, "truncated magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err(path, 0, format!("bad magic {:02x}{:02x}", bytes[0], bytes[1])));
    }
    let kind = bytes[2];
    let elem = match kind {
        IDX_U8 => 1,
        IDX_F32 => 4,
        t => return Err(format_err(path, 2, format!("unsupported element type 0x{t:02x}"))),
    };
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(format_err(path, 3, "zero dimensions"));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(format_err(path, bytes.len() as u64, "truncated dimension header"));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let expected = count
        .and_then(|c| c.checked_mul(elem))
        .and_then(|n| n.checked_add(header))
        .ok_or_else(|| format_err(path, 4, "dimension product overflows"))?;
    if bytes.len() != expected {
        let at = bytes.len().min(expected) as u64;
        return Err(format_err(
            path,
            at,
            format!("payload size mismatch: header {dims:?} implies {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let payload = &bytes[header..];
    let data = match kind {
        IDX_U8 => IdxData::U8(payload.to_vec()),
        _ => IdxData::F32(payload.chunks_exact(4).map(|c| f32::from_be_bytes(c.try_into().unwrap())).collect()),
    };
    Ok(IdxArray { dims, data })
}

/// Writes an IDX file; a `.gz` extension selects gzip compression.
pub fn write_idx(path: &Path, array: &IdxArray) -> Result<()> {
    let count: usize = array.dims.iter().product();
    if count != array.data.len() {
        return Err(Error::dim("idx payload", count, array.data.len()));
    }
    let mut buf = vec![0u8, 0, 0, array.dims.len() as u8];
    for &d in &array.dims {
        let d = u32::try_from(d).map_err(|_| Error::Config(format!("dimension {d} too large for idx")))?;
        buf.extend_from_slice(&d.to_be_bytes());
    }
    match &array.data {
        IdxData::U8(v) => {
            buf[2] = IDX_U8;
            buf.extend_from_slice(v);
        }
        IdxData::F32(v) => {
            buf[2] = IDX_F32;
            for x in v {
                buf.extend_from_slice(&x.to_be_bytes());
            }
        }
    }
    let gz = path.extension().is_some_and(|e| e == "gz");
    let out = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&buf).and_then(|_| enc.finish()).map_err(|e| Error::io(path, e))?
    } else {
        buf
    };
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Looks for `stem` or `stem.gz` in `dir`.
fn locate(dir: &Path, stem: &str) -> Result<PathBuf> {
    let plain = dir.join(stem);
    if plain.is_file() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    Err(Error::io(
        plain,
        std::io::Error::new(std::io::ErrorKind::NotFound, format!("missing dataset file (also tried {stem}.gz)")),
    ))
}

fn read_images(path: &Path) -> Result<Array2<f32>> {
    let idx = read_idx(path)?;
    if idx.dims.len() < 2 {
        return Err(format_err(path, 3, format!("images need at least 2 dimensions, found {}", idx.dims.len())));
    }
    let n = idx.dims[0];
    let d: usize = idx.dims[1..].iter().product();
    let header = 4 + 4 * idx.dims.len() as u64;
    let values: Vec<f32> = match idx.data {
        IdxData::U8(v) => v.into_iter().map(|b| b as f32 / 255.0).collect(),
        IdxData::F32(v) => {
            if let Some(i) = v.iter().position(|x| !(0.0..=1.0).contains(x)) {
                return Err(format_err(path, header + 4 * i as u64, format!("intensity {} outside [0, 1]", v[i])));
            }
            v
        }
    };
    Ok(Array2::from_shape_vec((n, d), values).expect("shape checked against header"))
}

fn read_labels(path: &Path, classes: usize) -> Result<Vec<usize>> {
    let idx = read_idx(path)?;
    let bytes = match (&idx.dims[..], idx.data) {
        ([_], IdxData::U8(v)) => v,
        _ => return Err(format_err(path, 2, "labels must be a 1-d unsigned byte array")),
    };
    if let Some(i) = bytes.iter().position(|&b| b as usize >= classes) {
        return Err(format_err(path, 8 + i as u64, format!("label {} outside [0, {classes})", bytes[i])));
    }
    Ok(bytes.into_iter().map(usize::from).collect())
}

fn read_pair(dir: &Path, images: &str, labels: &str, classes: usize, split: Split) -> Result<Dataset> {
    let ip = locate(dir, images)?;
    let lp = locate(dir, labels)?;
    let x = read_images(&ip)?;
    let y = read_labels(&lp, classes)?;
    if x.nrows() != y.len() {
        return Err(format_err(&lp, 4, format!("{} labels for {} images", y.len(), x.nrows())));
    }
    Dataset::new(x, Some(y), split, classes)
}

/// Splits off the trailing `held_out` rows of `train` as the validation set.
fn hold_out(train: Dataset, held_out: usize) -> Result<(Dataset, Dataset)> {
    let n = train.len();
    if held_out == 0 || held_out >= n {
        return Err(Error::DegenerateData(format!("cannot hold out {held_out} of {n} training rows")));
    }
    let cut = n - held_out;
    Ok((train.slice(0, cut, Split::Train), train.slice(cut, n, Split::Valid)))
}

/// Loads the train/valid/test triplet of a dataset from `dir`.
///
/// * `mnist`: `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
///   `t10k-images-idx3-ubyte`, `t10k-labels-idx1-ubyte`.
/// * `mnist10k`: `images-idx3-ubyte`, `labels-idx1-ubyte`.
/// * `omniglot`: `train-images-idx3`, `train-labels-idx1`, `test-images-idx3`,
///   `test-labels-idx1`, with alphabet ids as labels.
///
/// Each file may also be present with a `.gz` suffix.
pub fn load_dataset(name: DatasetName, dir: &Path) -> Result<Datasets> {
    let c = name.classes();
    let (train, valid, test) = match name {
        DatasetName::Mnist => {
            let full = read_pair(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte", c, Split::Train)?;
            let test = read_pair(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", c, Split::Test)?;
            let (train, valid) = hold_out(full, 10_000)?;
            (train, valid, test)
        }
        DatasetName::Mnist10k => {
            let all = read_pair(dir, "images-idx3-ubyte", "labels-idx1-ubyte", c, Split::Train)?;
            let n = all.len();
            if n < 10 {
                return Err(Error::DegenerateData(format!("{n} images are too few to split")));
            }
            let (a, b) = (n * 8 / 10, n * 9 / 10);
            (all.slice(0, a, Split::Train), all.slice(a, b, Split::Valid), all.slice(b, n, Split::Test))
        }
        DatasetName::Omniglot => {
            let full = read_pair(dir, "train-images-idx3", "train-labels-idx1", c, Split::Train)?;
            let test = read_pair(dir, "test-images-idx3", "test-labels-idx1", c, Split::Test)?;
            let held = full.len().div_ceil(10);
            let (train, valid) = hold_out(full, held)?;
            (train, valid, test)
        }
    };
    Ok(Datasets { name, train, valid, test })
}

/// Writes images (as bytes when every intensity is a multiple of 1/255,
/// otherwise as `f32`) and labels in the IDX container.
pub fn write_dataset(ds: &Dataset, side: Option<(usize, usize)>, images: &Path, labels: Option<&Path>) -> Result<()> {
    let n = ds.len();
    let dims = match side {
        Some((h, w)) if h * w == ds.x_dim() => vec![n, h, w],
        Some((h, w)) => return Err(Error::dim("image side", ds.x_dim(), h * w)),
        None => vec![n, ds.x_dim()],
    };
    let bytes: Option<Vec<u8>> = ds
        .images
        .iter()
        .map(|&v| {
            let b = (v * 255.0).round();
            (b as u8 as f32 / 255.0 == v).then_some(b as u8)
        })
        .collect();
    let data = match bytes {
        Some(b) => IdxData::U8(b),
        None => IdxData::F32(ds.images.iter().copied().collect()),
    };
    write_idx(images, &IdxArray { dims, data })?;
    if let Some(lp) = labels {
        let l = ds.labels.as_ref().ok_or_else(|| Error::DegenerateData("dataset has no labels to write".into()))?;
        let bytes = l
            .iter()
            .map(|&c| u8::try_from(c).map_err(|_| Error::IndexOutOfRange { index: c, len: 256 }))
            .collect::<Result<Vec<u8>>>()?;
        write_idx(lp, &IdxArray { dims: vec![n], data: IdxData::U8(bytes) })?;
    }
    Ok(())
}

/// Samples each pixel from `Bernoulli(intensity)`.
pub fn binarize<F: Real, R: Rng>(batch: ArrayView2<f32>, rng: &mut R) -> Result<Array2<F>> {
    if let Some(v) = batch.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("intensity {v} outside [0, 1]")));
    }
    Ok(batch.mapv(|p| if rng.random::<f32>() < p { F::one() } else { F::zero() }))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelledSubset {
    /// Row indices into the training split, sorted.
    pub indices: Vec<usize>,
    pub counts: BTreeMap<usize, usize>,
}

impl LabelledSubset {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Draws `n_labels / C` training indices per class, uniformly without
/// replacement.
pub fn draw_labelled_subset(ds: &Dataset, n_labels: usize, seed: u64) -> Result<LabelledSubset> {
    let c = ds.classes;
    if n_labels == 0 || n_labels % c != 0 {
        return Err(Error::Config(format!("{n_labels} labels cannot be split evenly over {c} classes")));
    }
    if ds.split != Split::Train {
        return Err(Error::Config(format!("labelled subsets come from the train split, not {}", ds.split)));
    }
    let labels = ds.labels.as_ref().ok_or_else(|| Error::DegenerateData("train split has no labels".into()))?;
    let per = n_labels / c;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = Vec::with_capacity(n_labels);
    let mut counts = BTreeMap::new();
    for (class, pool) in by_class.iter_mut().enumerate() {
        if pool.len() < per {
            return Err(Error::DegenerateData(format!(
                "class {class} has {} training examples, {per} requested",
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        indices.extend_from_slice(&pool[..per]);
        counts.insert(class, per);
    }
    indices.sort_unstable();
    Ok(LabelledSubset { indices, counts })
}
