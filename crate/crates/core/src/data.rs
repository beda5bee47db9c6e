//! Datasets: IDX (MNIST) files, deterministic splits, and synthetic blobs.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Environment variable naming the MNIST directory.
pub const MNIST_ENV: &str = "CONTDROP_MNIST_DIR";
pub const DEFAULT_MNIST_DIR: &str = "/root/data/mnist";

#[derive(Debug, thiserror::Error)]
pub enum IdxError {
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: String, found: u32, expected: u32 },
    #[error("{path}: truncated, expected {expected} bytes, found {found}")]
    Truncated { path: String, expected: usize, found: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Row-per-example inputs with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::dims(format!(
                "{} inputs but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::invalid(format!("label {bad} >= n_classes {n_classes}")));
        }
        Ok(Self {
            inputs,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select(ndarray::Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

fn read(path: &Path) -> std::result::Result<Vec<u8>, IdxError> {
    std::fs::read(path).map_err(|source| IdxError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> std::result::Result<Vec<usize>, IdxError> {
    let name = path.display().to_string();
    let head = 4 + 4 * dims;
    if bytes.len() >= 4 {
        let found = be_u32(bytes, 0);
        if found != magic {
            return Err(IdxError::BadMagic {
                path: name,
                found,
                expected: magic,
            });
        }
    }
    if bytes.len() < head {
        return Err(IdxError::Truncated {
            path: name,
            expected: head,
            found: bytes.len(),
        });
    }
    let shape: Vec<usize> = (0..dims).map(|d| be_u32(bytes, 4 + 4 * d) as usize).collect();
    let expected = head + shape.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            path: name,
            expected,
            found: bytes.len(),
        });
    }
    Ok(shape)
}

/// Reads an IDX image file (`u8`, 3 dimensions) scaled to `[0, 1]`.
pub fn load_idx_images(path: &Path) -> std::result::Result<Array2<f64>, IdxError> {
    let bytes = read(path)?;
    let shape = header(path, &bytes, IMAGE_MAGIC, 3)?;
    let (n, dim) = (shape[0], shape[1] * shape[2]);
    let pixels = bytes[16..16 + n * dim].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Array2::from_shape_vec((n, dim), pixels).expect("shape checked"))
}

pub fn load_idx_labels(path: &Path) -> std::result::Result<Vec<usize>, IdxError> {
    let bytes = read(path)?;
    let shape = header(path, &bytes, LABEL_MAGIC, 1)?;
    Ok(bytes[8..8 + shape[0]].iter().map(|&b| b as usize).collect())
}

/// Pairs an image file with a label file; `n_classes` is one past the
/// largest label.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let inputs = load_idx_images(images)?;
    let labels = load_idx_labels(labels)?;
    if inputs.nrows() != labels.len() {
        return Err(IdxError::CountMismatch {
            images: inputs.nrows(),
            labels: labels.len(),
        }
        .into());
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(inputs, labels, n_classes)
}

/// Writes IDX files in the MNIST layout (used for test fixtures).
pub fn write_idx(images_path: &Path, labels_path: &Path, images: &[Vec<u8>], rows: usize, cols: usize, labels: &[u8]) -> Result<()> {
    let mut img = Vec::with_capacity(16 + images.len() * rows * cols);
    img.extend(IMAGE_MAGIC.to_be_bytes());
    img.extend((images.len() as u32).to_be_bytes());
    img.extend((rows as u32).to_be_bytes());
    img.extend((cols as u32).to_be_bytes());
    for im in images {
        if im.len() != rows * cols {
            return Err(Error::dims("image size does not match rows x cols"));
        }
        img.extend(im);
    }
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend(LABEL_MAGIC.to_be_bytes());
    lab.extend((labels.len() as u32).to_be_bytes());
    lab.extend(labels);
    std::fs::write(images_path, img)?;
    std::fs::write(labels_path, lab)?;
    Ok(())
}

/// The standard MNIST train and test sets, 10 classes each.
#[derive(Debug, Clone)]
pub struct Mnist {
    pub train: Dataset,
    pub test: Dataset,
}

/// Resolves the MNIST directory: explicit argument, then `CONTDROP_MNIST_DIR`,
/// then the default location.
pub fn mnist_dir(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(MNIST_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_MNIST_DIR))
}

pub fn load_mnist(dir: &Path) -> Result<Mnist> {
    let part = |prefix: &str| -> Result<Dataset> {
        let mut ds = load_idx(
            &dir.join(format!("{prefix}-images-idx3-ubyte")),
            &dir.join(format!("{prefix}-labels-idx1-ubyte")),
        )?;
        ds.n_classes = 10;
        Dataset::new(ds.inputs, ds.labels, 10)
    };
    Ok(Mnist {
        train: part("train")?,
        test: part("t10k")?,
    })
}

/// Shuffles `ds` with `rng` and cuts it into `(first n_first, rest)`; both
/// parts are non-empty.
pub fn split(ds: &Dataset, n_first: usize, rng: &RngStream) -> Result<(Dataset, Dataset)> {
    if n_first == 0 || n_first >= ds.len() {
        return Err(Error::invalid(format!(
            "cannot take {n_first} of {} examples",
            ds.len()
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut rng.generator());
    Ok((ds.subset(&idx[..n_first]), ds.subset(&idx[n_first..])))
}

/// Isotropic Gaussian classes in `dim` dimensions whose means sit on a
/// circle in the first two coordinates, neighbouring means `separation`
/// apart. Examples are interleaved by class.
pub fn synthetic_gaussian_blobs(
    n_per_class: usize,
    n_classes: usize,
    dim: usize,
    separation: f64,
    rng: &RngStream,
) -> Result<Dataset> {
    if n_classes < 2 || dim < 2 {
        return Err(Error::invalid("need at least 2 classes and 2 dimensions"));
    }
    let radius = separation / (2.0 * (std::f64::consts::PI / n_classes as f64).sin());
    let mut g = rng.generator();
    let n = n_per_class * n_classes;
    let mut inputs = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % n_classes;
        let angle = 2.0 * std::f64::consts::PI * c as f64 / n_classes as f64;
        for d in 0..dim {
            let centre = match d {
                0 => radius * angle.cos(),
                1 => radius * angle.sin(),
                _ => 0.0,
            };
            inputs[[i, d]] = centre + g.sample::<f64, _>(StandardNormal);
        }
        labels.push(c);
    }
    Dataset::new(inputs, labels, n_classes)
}
