//! Base image corpora: procedural glyphs, or cached copies of the real digit and object sets.

use std::path::{Path, PathBuf};

use rand::Rng;

use super::glyphs::{render_digit, render_texture};
use crate::error::{Error, Result};

/// Environment variable naming the cache root for downloaded corpora.
pub const DATA_DIR_ENV: &str = "IBSAL_DATA_DIR";

#[derive(Clone, Debug, PartialEq)]
pub enum BaseSource {
    Procedural,
    /// Directory holding `train-images-idx3-ubyte` and `train-labels-idx1-ubyte`.
    MnistIdx(PathBuf),
    /// Directory holding `data_batch_1.bin` in the binary CIFAR-10 layout.
    CifarBin(PathBuf),
}

impl BaseSource {
    pub fn mnist_cache() -> PathBuf {
        cache_root().join("mnist")
    }

    pub fn cifar_cache() -> PathBuf {
        cache_root().join("cifar-10-batches-bin")
    }
}

fn cache_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Loaded base images: single-channel 28x28 digits or RGB 32x32 objects.
#[derive(Clone, Debug)]
pub enum BaseImages {
    Procedural,
    Digits { images: Vec<Vec<f32>>, labels: Vec<usize> },
    Objects { images: Vec<Vec<f32>> },
}

impl BaseImages {
    pub fn load(source: &BaseSource) -> Result<Self> {
        match source {
            BaseSource::Procedural => Ok(BaseImages::Procedural),
            BaseSource::MnistIdx(dir) => read_mnist(dir),
            BaseSource::CifarBin(dir) => read_cifar(dir),
        }
    }

    /// A 28x28 digit and its class.
    pub fn digit<R: Rng>(&self, size: usize, rng: &mut R) -> (Vec<f32>, usize) {
        match self {
            BaseImages::Digits { images, labels } if size == 28 => {
                let i = rng.gen_range(0..images.len());
                (images[i].clone(), labels[i])
            }
            _ => {
                let d = rng.gen_range(0..10);
                (render_digit(d, size, rng), d)
            }
        }
    }

    /// A procedural digit of a chosen class, or a real one drawn from that class.
    pub fn digit_of_class<R: Rng>(&self, class: usize, size: usize, rng: &mut R) -> Vec<f32> {
        match self {
            BaseImages::Digits { images, labels } if size == 28 => {
                let candidates: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
                if candidates.is_empty() {
                    render_digit(class, size, rng)
                } else {
                    images[candidates[rng.gen_range(0..candidates.len())]].clone()
                }
            }
            _ => render_digit(class, size, rng),
        }
    }

    /// A 32x32 RGB object image (HWC).
    pub fn object<R: Rng>(&self, rng: &mut R) -> Vec<f32> {
        match self {
            BaseImages::Objects { images } => images[rng.gen_range(0..images.len())].clone(),
            _ => render_texture(32, rng),
        }
    }
}

fn missing(path: &Path, what: &str) -> Error {
    Error::MissingData {
        path: path.to_path_buf(),
        hint: format!("place the {what} files there or set {DATA_DIR_ENV} to the cache root"),
    }
}

fn read_be_u32(bytes: &[u8], at: usize) -> usize {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]) as usize
}

fn read_mnist(dir: &Path) -> Result<BaseImages> {
    let images_path = dir.join("train-images-idx3-ubyte");
    let labels_path = dir.join("train-labels-idx1-ubyte");
    let images = std::fs::read(&images_path).map_err(|_| missing(&images_path, "MNIST idx"))?;
    let labels = std::fs::read(&labels_path).map_err(|_| missing(&labels_path, "MNIST idx"))?;
    if images.len() < 16 || read_be_u32(&images, 0) != 2051 || labels.len() < 8 || read_be_u32(&labels, 0) != 2049 {
        return Err(Error::data(format!("{} is not an idx image/label pair", dir.display())));
    }
    let (n, h, w) = (read_be_u32(&images, 4), read_be_u32(&images, 8), read_be_u32(&images, 12));
    if h != 28 || w != 28 || images.len() < 16 + n * 784 || read_be_u32(&labels, 4) != n || labels.len() < 8 + n {
        return Err(Error::data(format!("{}: truncated or non-28x28 idx files", dir.display())));
    }
    Ok(BaseImages::Digits {
        images: (0..n)
            .map(|i| images[16 + i * 784..16 + (i + 1) * 784].iter().map(|&b| b as f32 / 255.0).collect())
            .collect(),
        labels: labels[8..8 + n].iter().map(|&b| b as usize).collect(),
    })
}

fn read_cifar(dir: &Path) -> Result<BaseImages> {
    let path = dir.join("data_batch_1.bin");
    let bytes = std::fs::read(&path).map_err(|_| missing(&path, "CIFAR-10 binary"))?;
    const RECORD: usize = 1 + 3072;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(Error::data(format!("{}: not a CIFAR-10 binary batch", path.display())));
    }
    let images = bytes
        .chunks(RECORD)
        .map(|r| {
            let planes = &r[1..];
            let mut hwc = vec![0.0f32; 3072];
            for c in 0..3 {
                for p in 0..1024 {
                    hwc[p * 3 + c] = planes[c * 1024 + p] as f32 / 255.0;
                }
            }
            hwc
        })
        .collect();
    Ok(BaseImages::Objects { images })
}
