//! MNIST IDX ingestion, a synthetic bars-and-blocks generator, and batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Environment variable naming the dataset root directory.
pub const DATA_DIR_ENV: &str = "DISCRETE_GRAD_DATA_DIR";

pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;

/// Synthetic images are drawn on a grid of `BLOCK x BLOCK` cells.
pub const BLOCK: usize = 4;
pub const GRID: usize = SIDE / BLOCK;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    IdxFile,
    Synthetic,
}

/// Immutable train/validation images with pixels in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct DatasetHandle {
    pub name: String,
    pub train: Tensor,
    pub validation: Tensor,
    pub train_labels: Option<Vec<u8>>,
    pub source: DataSource,
}

impl DatasetHandle {
    pub fn input_dim(&self) -> usize {
        self.train.shape()[1]
    }

    pub fn train_len(&self) -> usize {
        self.train.shape()[0]
    }

    pub fn validation_len(&self) -> usize {
        self.validation.shape()[0]
    }
}

/// Images plus labels from an IDX pair.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxSet {
    pub images: Tensor,
    pub labels: Vec<u8>,
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes(b.try_into().unwrap()))
}

fn truncated(path: &Path, expected: usize, found: usize) -> Error {
    Error::Truncated {
        path: path.to_path_buf(),
        expected,
        found,
    }
}

/// Parses an IDX3 image file into `[n, rows * cols]`, scaled by 1/255.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    let magic = read_u32(bytes, 0).ok_or_else(|| truncated(path, 16, bytes.len()))?;
    if magic != IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: IMAGES_MAGIC,
            found: magic,
        });
    }
    let header: Vec<usize> = (1..4)
        .map(|i| read_u32(bytes, 4 * i).map(|v| v as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| truncated(path, 16, bytes.len()))?;
    let (n, rows, cols) = (header[0], header[1], header[2]);
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(truncated(path, expected, bytes.len()));
    }
    let data = bytes[16..expected].iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(vec![n, rows * cols], data)
}

pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0).ok_or_else(|| truncated(path, 8, bytes.len()))?;
    if magic != LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: LABELS_MAGIC,
            found: magic,
        });
    }
    let n = read_u32(bytes, 4).ok_or_else(|| truncated(path, 8, bytes.len()))? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(truncated(path, expected, bytes.len()));
    }
    Ok(bytes[8..expected].to_vec())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<IdxSet> {
    let images = parse_idx_images(images_path, &fs::read(images_path)?)?;
    let labels = parse_idx_labels(labels_path, &fs::read(labels_path)?)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::CountMismatch {
            images: images.shape()[0],
            labels: labels.len(),
        });
    }
    Ok(IdxSet { images, labels })
}

/// Indices of the first `n` items taking an equal share from each class, in file order.
pub fn stratified_prefix(labels: &[u8], n: usize) -> Vec<usize> {
    let mut classes: Vec<u8> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Vec::new();
    }
    let n = n.min(labels.len());
    let base = n / classes.len();
    let extra = n % classes.len();
    let mut quota = [0usize; 256];
    for (i, &c) in classes.iter().enumerate() {
        quota[c as usize] = base + usize::from(i < extra);
    }
    let mut picked = Vec::with_capacity(n);
    for (i, &c) in labels.iter().enumerate() {
        if quota[c as usize] > 0 {
            quota[c as usize] -= 1;
            picked.push(i);
        }
    }
    // Classes with fewer items than their share leave slots; fill in file order.
    if picked.len() < n {
        let mut taken = vec![false; labels.len()];
        picked.iter().for_each(|&i| taken[i] = true);
        picked.extend((0..labels.len()).filter(|&i| !taken[i]).take(n - picked.len()));
        picked.sort_unstable();
    }
    picked
}

/// Dataset root: `$DISCRETE_GRAD_DATA_DIR`, else `./data`.
pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from)
}

/// Directory holding the MNIST IDX files under `root` (either `root` itself or `root/mnist`).
pub fn find_mnist(root: &Path) -> Option<PathBuf> {
    [root.to_path_buf(), root.join("mnist")]
        .into_iter()
        .find(|d| d.join("train-images-idx3-ubyte").is_file())
}

/// MNIST with its canonical test split as validation. `train_subset` /
/// `test_subset` take stratified prefixes.
pub fn mnist(root: &Path, train_subset: Option<usize>, test_subset: Option<usize>) -> Result<DatasetHandle> {
    let dir = find_mnist(root).ok_or_else(|| Error::MissingDataset(format!("mnist under {}", root.display())))?;
    let train = load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
    let test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
    let pick = |set: IdxSet, n: Option<usize>| -> (Tensor, Vec<u8>) {
        match n {
            Some(n) if n < set.labels.len() => {
                let idx = stratified_prefix(&set.labels, n);
                let labels = idx.iter().map(|&i| set.labels[i]).collect();
                (set.images.select_rows(&idx), labels)
            }
            _ => (set.images, set.labels),
        }
    };
    let (train_images, train_labels) = pick(train, train_subset);
    let (validation, _) = pick(test, test_subset);
    Ok(DatasetHandle {
        name: "mnist".into(),
        train: train_images,
        validation,
        train_labels: Some(train_labels),
        source: DataSource::IdxFile,
    })
}

/// One 28x28 image of random grid-aligned bars and blocks; pixels are 0 or 1.
fn synthetic_image(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let mut cells = [[false; GRID]; GRID];
    for _ in 0..rng.random_range(1..=2) {
        let band = rng.random_range(0..GRID);
        let horizontal = rng.random::<bool>();
        for j in 0..GRID {
            if horizontal {
                cells[band][j] = true;
            } else {
                cells[j][band] = true;
            }
        }
    }
    for _ in 0..rng.random_range(0..=3) {
        let (r, c) = (rng.random_range(0..GRID), rng.random_range(0..GRID));
        cells[r][c] = true;
    }
    for (y, px_row) in out.chunks_exact_mut(SIDE).enumerate() {
        for (x, px) in px_row.iter_mut().enumerate() {
            *px = if cells[y / BLOCK][x / BLOCK] { 1.0 } else { 0.0 };
        }
    }
}

/// `n` synthetic images, deterministic per seed. The last 10% (at least
/// one image when `n >= 2`) form the validation split.
pub fn synthetic(n: usize, seed: u64) -> Result<DatasetHandle> {
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; n * PIXELS];
    for img in data.chunks_exact_mut(PIXELS) {
        synthetic_image(&mut rng, img);
    }
    let all = Tensor::new(vec![n, PIXELS], data)?;
    let n_val = if n >= 2 { (n / 10).max(1) } else { 0 };
    Ok(DatasetHandle {
        name: "synthetic".into(),
        train: all.slice_rows(0, n - n_val),
        validation: all.slice_rows(n - n_val, n),
        train_labels: None,
        source: DataSource::Synthetic,
    })
}

/// Row order for one epoch: identity, or a permutation fixed by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch.wrapping_add(1));
        order.shuffle(&mut rng);
    }
    order
}

/// Mini-batches of `images` for one epoch; the last batch may be short.
pub fn batches(
    images: &Tensor,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    shuffle: bool,
) -> Result<impl Iterator<Item = Tensor> + '_> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let order = epoch_order(images.shape()[0], seed, epoch, shuffle);
    Ok((0..order.len().div_ceil(batch_size)).map(move |b| {
        let end = ((b + 1) * batch_size).min(order.len());
        images.select_rows(&order[b * batch_size..end])
    }))
}
