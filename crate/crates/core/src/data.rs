//! Datasets: IDX ingestion, synthetic Gaussian blobs and batch sampling.
//!
//! Every dataset keeps its inputs in `[0, 1]`, which the attack projection
//! relies on.

use std::fs;
use std::io::{self, Cursor, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::dp::{poisson_subsample, NoiseSource};
use crate::nn::{Batch, NnError, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error("{file}: bad magic {found:#010x} at byte 0, expected {expected:#010x}")]
    BadMagic { file: String, found: u32, expected: u32 },

    #[error("{file}: truncated at byte {offset}, needed {needed} more bytes")]
    Truncated { file: String, offset: usize, needed: usize },

    #[error("{file}: {extra} trailing bytes after offset {offset}")]
    TrailingBytes { file: String, offset: usize, extra: usize },

    #[error("image count {images} does not match label count {labels} (count field at byte 4)")]
    CountMismatch { images: usize, labels: usize },

    #[error("empty dataset")]
    Empty,

    #[error("invalid dataset parameters: {0}")]
    InvalidParams(String),

    #[error(transparent)]
    Tensor(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, class_count: usize, name: &str) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(DataError::InvalidParams(format!(
                "{} rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(DataError::InvalidParams(format!(
                "label {bad} outside {class_count} classes"
            )));
        }
        if inputs.values().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DataError::InvalidParams("inputs outside [0, 1]".into()));
        }
        Ok(Self {
            inputs,
            labels,
            class_count,
            name: name.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(DataError::Empty);
        }
        Ok(Self {
            inputs: gather_rows(&self.inputs, indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            name: self.name.clone(),
        })
    }

    /// First `n` examples (or all of them if fewer).
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Ok(Batch::new(
            gather_rows(&self.inputs, indices)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        )?)
    }

    pub fn as_batch(&self) -> Batch {
        Batch {
            inputs: self.inputs.clone(),
            labels: self.labels.clone(),
        }
    }
}

fn gather_rows(t: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let cols = t.cols();
    let mut values = Vec::with_capacity(indices.len() * cols);
    for &i in indices {
        values.extend_from_slice(t.row(i));
    }
    Ok(Tensor::matrix(indices.len(), cols, values)?)
}

struct IdxReader<'a> {
    cur: Cursor<&'a [u8]>,
    file: &'a str,
}

impl IdxReader<'_> {
    fn offset(&self) -> usize {
        self.cur.position() as usize
    }

    fn truncated(&self, needed: usize) -> DataError {
        let remaining = self.cur.get_ref().len().saturating_sub(self.offset());
        DataError::Truncated {
            file: self.file.to_string(),
            offset: self.offset() + remaining,
            needed: needed - remaining,
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let at = self.offset();
        self.cur.read_u32::<BigEndian>().map_err(|_| {
            self.cur.set_position(at as u64);
            self.truncated(4)
        })
    }

    fn bytes(&mut self, n: usize) -> Result<&[u8]> {
        let at = self.offset();
        let data = *self.cur.get_ref();
        if data.len() < at + n {
            return Err(self.truncated(n));
        }
        self.cur.set_position((at + n) as u64);
        Ok(&data[at..at + n])
    }

    fn finish(&self) -> Result<()> {
        let extra = self.cur.get_ref().len() - self.offset();
        if extra > 0 {
            return Err(DataError::TrailingBytes {
                file: self.file.to_string(),
                offset: self.offset(),
                extra,
            });
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
    Ok(bytes)
}

/// Parses an IDX image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], file: &str) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut r = IdxReader {
        cur: Cursor::new(bytes),
        file,
    };
    let magic = r.u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            file: file.to_string(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let total = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| r.truncated(usize::MAX))?;
    let pixels = r.bytes(total)?.to_vec();
    r.finish()?;
    Ok((n, rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8], file: &str) -> Result<Vec<u8>> {
    let mut r = IdxReader {
        cur: Cursor::new(bytes),
        file,
    };
    let magic = r.u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            file: file.to_string(),
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n = r.u32()? as usize;
    let labels = r.bytes(n)?.to_vec();
    r.finish()?;
    Ok(labels)
}

/// Loads an IDX image/label pair. Pixels are scaled by `1/255` and each
/// image is flattened row-major. The class count is `max(label) + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_name = images_path.display().to_string();
    let lbl_name = labels_path.display().to_string();
    let (n, rows, cols, pixels) = parse_idx_images(&read_file(images_path)?, &img_name)?;
    let labels = parse_idx_labels(&read_file(labels_path)?, &lbl_name)?;
    if labels.len() != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    if n == 0 || rows * cols == 0 {
        return Err(DataError::Empty);
    }
    let values = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| img_name.clone());
    Dataset::new(Tensor::matrix(n, rows * cols, values)?, labels, class_count, &name)
}

pub fn write_idx_images<W: Write>(mut w: W, rows: usize, cols: usize, images: &[Vec<u8>]) -> io::Result<()> {
    w.write_u32::<BigEndian>(IDX_IMAGES_MAGIC)?;
    w.write_u32::<BigEndian>(images.len() as u32)?;
    w.write_u32::<BigEndian>(rows as u32)?;
    w.write_u32::<BigEndian>(cols as u32)?;
    for img in images {
        w.write_all(img)?;
    }
    Ok(())
}

pub fn write_idx_labels<W: Write>(mut w: W, labels: &[u8]) -> io::Result<()> {
    w.write_u32::<BigEndian>(IDX_LABELS_MAGIC)?;
    w.write_u32::<BigEndian>(labels.len() as u32)?;
    w.write_all(labels)
}

/// Parameters of the axis-aligned Gaussian blob generator.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    /// Class `c` is centred at `separation · e_c`.
    pub separation: f64,
    pub noise_std: f64,
    /// Share of each class that goes to the training split.
    pub train_fraction: f64,
    pub seed: u64,
}

impl BlobSpec {
    pub fn new(classes: usize, dim: usize, n_per_class: usize, separation: f64, noise_std: f64, seed: u64) -> Self {
        Self {
            classes,
            dim,
            n_per_class,
            separation,
            noise_std,
            train_fraction: 0.8,
            seed,
        }
    }
}

/// Draws a stratified train/test pair of blob datasets. Values are clamped
/// to `[0, 1]` after the noise is added.
pub fn synth_blobs(spec: &BlobSpec) -> Result<(Dataset, Dataset)> {
    let BlobSpec {
        classes: k,
        dim: d,
        n_per_class,
        separation,
        noise_std,
        train_fraction,
        seed,
    } = *spec;
    if k < 2 || d < 2 || k > d {
        return Err(DataError::InvalidParams(format!(
            "need 2 <= classes <= dim and dim >= 2, got classes={k} dim={d}"
        )));
    }
    if !(noise_std >= 0.0) || !separation.is_finite() || !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::InvalidParams(
            "noise_std >= 0, finite separation and train_fraction in (0, 1) required".into(),
        ));
    }
    let n_train = (n_per_class as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == n_per_class {
        return Err(DataError::InvalidParams(format!(
            "n_per_class={n_per_class} leaves an empty split"
        )));
    }
    let mut noise = NoiseSource::new(seed);
    let mut train: Vec<(Vec<f64>, usize)> = Vec::new();
    let mut test: Vec<(Vec<f64>, usize)> = Vec::new();
    for c in 0..k {
        for i in 0..n_per_class {
            let x: Vec<f64> = (0..d)
                .map(|j| {
                    let centre = if j == c { separation } else { 0.0 };
                    (centre + noise_std * noise.standard_normal()).clamp(0.0, 1.0)
                })
                .collect();
            if i < n_train {
                train.push((x, c));
            } else {
                test.push((x, c));
            }
        }
    }
    noise.shuffle(&mut train);
    noise.shuffle(&mut test);
    let build = |rows: Vec<(Vec<f64>, usize)>, split: &str| -> Result<Dataset> {
        let n = rows.len();
        let (xs, ys): (Vec<Vec<f64>>, Vec<usize>) = rows.into_iter().unzip();
        let inputs = Tensor::matrix(n, d, xs.into_iter().flatten().collect())?;
        Dataset::new(inputs, ys, k, &format!("blobs-{split}"))
    };
    Ok((build(train, "train")?, build(test, "test")?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchMode {
    /// Reshuffled every epoch; every example appears exactly once.
    ShuffledEpoch { batch_size: usize },
    /// Independent inclusion with probability `sample_rate`; one epoch is
    /// `round(1/q)` draws.
    Poisson { sample_rate: f64 },
}

/// Produces index batches for a dataset of size `n`. Indices inside each
/// batch are ascending so that gradient sums have a fixed order.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n: usize,
    mode: BatchMode,
    noise: NoiseSource,
}

impl BatchSampler {
    pub fn new(n: usize, mode: BatchMode, seed: u64) -> Result<Self> {
        Self::with_source(n, mode, NoiseSource::new(seed))
    }

    pub fn with_source(n: usize, mode: BatchMode, noise: NoiseSource) -> Result<Self> {
        if n == 0 {
            return Err(DataError::Empty);
        }
        match mode {
            BatchMode::ShuffledEpoch { batch_size: 0 } => {
                return Err(DataError::InvalidParams("batch_size must be >= 1".into()))
            }
            BatchMode::Poisson { sample_rate } if !(sample_rate > 0.0 && sample_rate <= 1.0) => {
                return Err(DataError::InvalidParams("sample_rate must lie in (0, 1]".into()))
            }
            _ => {}
        }
        Ok(Self { n, mode, noise })
    }

    /// The next epoch's batches.
    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        match self.mode {
            BatchMode::ShuffledEpoch { batch_size } => {
                let mut order: Vec<usize> = (0..self.n).collect();
                self.noise.shuffle(&mut order);
                order
                    .chunks(batch_size)
                    .map(|c| {
                        let mut b = c.to_vec();
                        b.sort_unstable();
                        b
                    })
                    .collect()
            }
            BatchMode::Poisson { sample_rate } => {
                let draws = crate::dp::iterations_per_epoch(sample_rate);
                (0..draws).map(|_| self.next_poisson(sample_rate)).collect()
            }
        }
    }

    fn next_poisson(&mut self, q: f64) -> Vec<usize> {
        poisson_subsample(self.n, q, &mut self.noise)
    }

    /// Gives the stream back, e.g. to continue drawing Gaussian noise from it.
    pub fn source_mut(&mut self) -> &mut NoiseSource {
        &mut self.noise
    }
}
