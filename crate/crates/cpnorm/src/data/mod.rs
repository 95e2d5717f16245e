//! Dataset ingestion from the canonical MNIST and CIFAR-10 binary formats,
//! deterministic batching, and fixture writers for synthetic data.
//!
//! Loaders parse strictly: magic numbers, declared counts, and exact file
//! lengths are all enforced, so a truncated or padded file is an error
//! rather than a silently short dataset. Pixels are scaled to `[0, 1]` and
//! standardized with the community constants for each dataset.

use crate::tensor::DenseTensor;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// MNIST standardization constants (mean, standard deviation of the
/// `[0, 1]`-scaled training pixels).
pub const MNIST_MEAN: f64 = 0.1307;
pub const MNIST_STD: f64 = 0.3081;

/// CIFAR-10 per-channel standardization constants.
pub const CIFAR10_MEANS: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STDS: [f64; 3] = [0.2470, 0.2435, 0.2616];

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;
const CLASSES: usize = 10;

/// An immutable labeled image collection.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `N x C x H x W`, standardized scalars.
    pub images: DenseTensor,
    /// Class per image, each in `[0, 10)`.
    pub labels: Vec<usize>,
    /// Human-readable split tag carried through subsetting ("train", …).
    pub split: String,
}

impl Dataset {
    pub fn new(images: DenseTensor, labels: Vec<usize>, split: impl Into<String>) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::shape(
                "dataset images",
                "N x C x H x W",
                format!("{shape:?}"),
            ));
        }
        if shape[0] != labels.len() {
            return Err(Error::shape(
                "dataset image/label counts",
                shape[0],
                labels.len(),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= CLASSES) {
            return Err(Error::Data(format!(
                "label {bad} outside the {CLASSES}-class range"
            )));
        }
        Ok(Dataset {
            images,
            labels,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one sample, `[C, H, W]`.
    pub fn sample_shape(&self) -> Vec<usize> {
        self.images.shape()[1..].to_vec()
    }

    /// Copies the given samples into a new dataset, preserving order.
    pub fn select(&self, indices: &[usize], split: impl Into<String>) -> Result<Dataset> {
        let shape = self.images.shape();
        let stride: usize = shape[1..].iter().product();
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!(
                "sample index {bad} out of range for {} images",
                self.len()
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        let mut new_shape = shape.to_vec();
        new_shape[0] = indices.len();
        Dataset::new(DenseTensor::new(new_shape, data)?, labels, split)
    }

    /// First `round(fraction * N)` samples (at least one), in stored order.
    pub fn subset_fraction(&self, fraction: f64) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "subset fraction must be in (0, 1], got {fraction}"
            )));
        }
        let n = (((self.len() as f64) * fraction).round() as usize)
            .clamp(1, self.len());
        let indices: Vec<usize> = (0..n).collect();
        self.select(&indices, self.split.clone())
    }

    /// Splits off the trailing `round(fraction * N)` samples as a validation
    /// set, returning `(head, tail)`.
    pub fn split_validation(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "validation fraction must be in (0, 1), got {fraction}"
            )));
        }
        let n_val = (((self.len() as f64) * fraction).round() as usize)
            .clamp(1, self.len().saturating_sub(1));
        let cut = self.len() - n_val;
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..self.len()).collect();
        Ok((
            self.select(&head, self.split.clone())?,
            self.select(&tail, "val")?,
        ))
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

/// Loads an MNIST-format image/label file pair.
///
/// Images: big-endian magic `0x00000803`, count, rows, cols, then one
/// unsigned byte per pixel. Labels: magic `0x00000801`, count, then one byte
/// per label. Counts must agree between the files and lengths must be exact.
pub fn load_mnist(image_path: &Path, label_path: &Path) -> Result<Dataset> {
    let img = read_file(image_path)?;
    if img.len() < 16 {
        return Err(Error::Data(format!(
            "{}: too short for an image header ({} bytes)",
            image_path.display(),
            img.len()
        )));
    }
    let magic = be_u32(&img, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "{}: image magic mismatch: expected {IDX_IMAGES_MAGIC:#010x}, got {magic:#010x}",
            image_path.display()
        )));
    }
    let count = be_u32(&img, 4) as usize;
    let rows = be_u32(&img, 8) as usize;
    let cols = be_u32(&img, 12) as usize;
    let expected = 16 + count * rows * cols;
    if img.len() != expected {
        return Err(Error::Data(format!(
            "{}: expected {expected} bytes for {count} images of {rows}x{cols}, got {}",
            image_path.display(),
            img.len()
        )));
    }

    let lbl = read_file(label_path)?;
    if lbl.len() < 8 {
        return Err(Error::Data(format!(
            "{}: too short for a label header ({} bytes)",
            label_path.display(),
            lbl.len()
        )));
    }
    let magic = be_u32(&lbl, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!(
            "{}: label magic mismatch: expected {IDX_LABELS_MAGIC:#010x}, got {magic:#010x}",
            label_path.display()
        )));
    }
    let lbl_count = be_u32(&lbl, 4) as usize;
    if lbl_count != count {
        return Err(Error::Data(format!(
            "image file declares {count} samples but label file declares {lbl_count}"
        )));
    }
    let expected = 8 + count;
    if lbl.len() != expected {
        return Err(Error::Data(format!(
            "{}: expected {expected} bytes for {count} labels, got {}",
            label_path.display(),
            lbl.len()
        )));
    }

    let mut data = Vec::with_capacity(count * rows * cols);
    for &p in &img[16..] {
        data.push((p as f64 / 255.0 - MNIST_MEAN) / MNIST_STD);
    }
    let labels = lbl[8..].iter().map(|&b| b as usize).collect();
    Dataset::new(
        DenseTensor::new(vec![count, 1, rows, cols], data)?,
        labels,
        "train",
    )
}

/// Loads CIFAR-10 binary batch files (concatenated in the given order).
///
/// Each record is 3073 bytes: one label byte then 3072 pixel bytes as three
/// 32x32 row-major planes (red, green, blue).
pub fn load_cifar10(batch_paths: &[impl AsRef<Path>]) -> Result<Dataset> {
    if batch_paths.is_empty() {
        return Err(Error::InvalidArgument(
            "load_cifar10 needs at least one batch file".into(),
        ));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in batch_paths {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Data(format!(
                "{}: length {} is not a positive multiple of the {CIFAR_RECORD}-byte record",
                path.display(),
                bytes.len()
            )));
        }
        for record in bytes.chunks_exact(CIFAR_RECORD) {
            let label = record[0] as usize;
            if label >= CLASSES {
                return Err(Error::Data(format!(
                    "{}: label byte {label} outside the {CLASSES}-class range",
                    path.display()
                )));
            }
            labels.push(label);
            for (c, plane) in record[1..].chunks_exact(1024).enumerate() {
                for &p in plane {
                    data.push((p as f64 / 255.0 - CIFAR10_MEANS[c]) / CIFAR10_STDS[c]);
                }
            }
        }
    }
    let n = labels.len();
    Dataset::new(
        DenseTensor::new(vec![n, 3, 32, 32], data)?,
        labels,
        "train",
    )
}

/// One batch gathered from a dataset.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: DenseTensor,
    pub labels: Vec<usize>,
}

/// Deterministic batch stream: a seeded permutation when `shuffle` is set,
/// stored order otherwise; the final partial batch is included.
pub fn batch_iter(
    dataset: &Dataset,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
) -> Result<impl Iterator<Item = Batch> + '_> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    let stride: usize = dataset.images.shape()[1..].iter().product();
    let sample_shape = dataset.sample_shape();
    Ok((0..dataset.len().div_ceil(batch_size)).map(move |b| {
        let ids = &order[b * batch_size..((b + 1) * batch_size).min(order.len())];
        let mut data = Vec::with_capacity(ids.len() * stride);
        let mut labels = Vec::with_capacity(ids.len());
        for &i in ids {
            data.extend_from_slice(&dataset.images.data()[i * stride..(i + 1) * stride]);
            labels.push(dataset.labels[i]);
        }
        let mut shape = vec![ids.len()];
        shape.extend_from_slice(&sample_shape);
        Batch {
            images: DenseTensor::new(shape, data).expect("consistent by construction"),
            labels,
        }
    }))
}

/// Writes an MNIST-format image file; the sample count is inferred from the
/// pixel buffer length.
pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    if rows == 0 || cols == 0 || pixels.len() % (rows * cols) != 0 {
        return Err(Error::InvalidArgument(format!(
            "pixel buffer of {} bytes does not tile {rows}x{cols} images",
            pixels.len()
        )));
    }
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(count as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes an MNIST-format label file.
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= CLASSES) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside the {CLASSES}-class range"
        )));
    }
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes a CIFAR-10 binary batch file from `(label, 3072 pixel bytes)`
/// records.
pub fn write_cifar_batch(path: &Path, records: &[(u8, Vec<u8>)]) -> Result<()> {
    let mut out = Vec::with_capacity(records.len() * CIFAR_RECORD);
    for (label, pixels) in records {
        if *label as usize >= CLASSES {
            return Err(Error::InvalidArgument(format!(
                "label {label} outside the {CLASSES}-class range"
            )));
        }
        if pixels.len() != CIFAR_RECORD - 1 {
            return Err(Error::InvalidArgument(format!(
                "CIFAR record needs {} pixel bytes, got {}",
                CIFAR_RECORD - 1,
                pixels.len()
            )));
        }
        out.push(*label);
        out.extend_from_slice(pixels);
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn fixture_mnist(dir: &Path, n: usize) -> (std::path::PathBuf, std::path::PathBuf) {
        let rows = 4;
        let cols = 3;
        let pixels: Vec<u8> = (0..n * rows * cols).map(|i| (i % 251) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let img = dir.join("images-idx3-ubyte");
        let lbl = dir.join("labels-idx1-ubyte");
        write_idx_images(&img, rows, cols, &pixels).unwrap();
        write_idx_labels(&lbl, &labels).unwrap();
        (img, lbl)
    }

    #[test]
    fn idx_round_trip_reproduces_pixels_exactly() {
        let dir = tempdir().unwrap();
        let (img, lbl) = fixture_mnist(dir.path(), 7);
        let ds = load_mnist(&img, &lbl).unwrap();
        assert_eq!(ds.images.shape(), &[7, 1, 4, 3]);
        assert_eq!(ds.labels, vec![0, 1, 2, 3, 4, 5, 6]);
        for (i, &x) in ds.images.data().iter().enumerate() {
            let p = (i % 251) as u8;
            let expect = (p as f64 / 255.0 - MNIST_MEAN) / MNIST_STD;
            assert_eq!(x, expect, "pixel {i}");
        }
    }

    #[test]
    fn label_file_passed_as_images_is_rejected() {
        let dir = tempdir().unwrap();
        let (img, lbl) = fixture_mnist(dir.path(), 12);
        let err = load_mnist(&lbl, &img).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn truncated_and_padded_image_files_are_rejected() {
        let dir = tempdir().unwrap();
        let (img, lbl) = fixture_mnist(dir.path(), 3);
        let bytes = std::fs::read(&img).unwrap();

        let truncated = dir.path().join("short");
        std::fs::write(&truncated, &bytes[..bytes.len() - 1]).unwrap();
        let err = load_mnist(&truncated, &lbl).unwrap_err();
        assert!(err.to_string().contains("expected"), "{err}");

        let padded = dir.path().join("padded");
        let mut long = bytes.clone();
        long.push(0);
        std::fs::write(&padded, &long).unwrap();
        let err = load_mnist(&padded, &lbl).unwrap_err();
        assert!(err.to_string().contains("expected"), "{err}");
    }

    #[test]
    fn image_label_count_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        let (img, _) = fixture_mnist(dir.path(), 3);
        let lbl = dir.path().join("short-labels");
        write_idx_labels(&lbl, &[1, 2]).unwrap();
        let err = load_mnist(&img, &lbl).unwrap_err();
        assert!(err.to_string().contains("declares"), "{err}");
    }

    #[test]
    fn cifar_round_trip_and_standardization() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let mut records = Vec::new();
        records.push((3u8, vec![0u8; 3072]));
        let mut bright = vec![255u8; 3072];
        bright[0] = 0;
        records.push((7u8, bright));
        write_cifar_batch(&path, &records).unwrap();

        let ds = load_cifar10(&[&path]).unwrap();
        assert_eq!(ds.images.shape(), &[2, 3, 32, 32]);
        assert_eq!(ds.labels, vec![3, 7]);
        // First image: standardized zero in every channel.
        for c in 0..3 {
            let expect = (0.0 - CIFAR10_MEANS[c]) / CIFAR10_STDS[c];
            assert_eq!(ds.images.at(&[0, c, 0, 0]), expect);
        }
        // Second image: first red pixel is 0, the rest saturate.
        let red0 = (0.0 - CIFAR10_MEANS[0]) / CIFAR10_STDS[0];
        assert_eq!(ds.images.at(&[1, 0, 0, 0]), red0);
        let red1 = (1.0 - CIFAR10_MEANS[0]) / CIFAR10_STDS[0];
        assert_eq!(ds.images.at(&[1, 0, 0, 1]), red1);
    }

    #[test]
    fn cifar_framing_violations_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, vec![0u8; 3074]).unwrap();
        assert!(load_cifar10(&[&path]).is_err());

        let bad_label = dir.path().join("bad-label.bin");
        let mut rec = vec![0u8; 3073];
        rec[0] = 10;
        std::fs::write(&bad_label, rec).unwrap();
        assert!(load_cifar10(&[&bad_label]).is_err());
    }

    fn tiny_dataset(n: usize) -> Dataset {
        let mut data = Vec::new();
        for i in 0..n {
            data.extend_from_slice(&[i as f64, i as f64 + 0.5]);
        }
        Dataset::new(
            DenseTensor::new(vec![n, 2, 1, 1], data).unwrap(),
            (0..n).map(|i| i % 10).collect(),
            "train",
        )
        .unwrap()
    }

    #[test]
    fn batch_iter_partitions_with_final_partial_batch() {
        let ds = tiny_dataset(10);
        let sizes: Vec<usize> = batch_iter(&ds, 4, false, 0)
            .unwrap()
            .map(|b| b.labels.len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn unshuffled_batches_preserve_order() {
        let ds = tiny_dataset(6);
        let first = batch_iter(&ds, 3, false, 9).unwrap().next().unwrap();
        assert_eq!(first.labels, vec![0, 1, 2]);
        assert_eq!(first.images.at(&[1, 0, 0, 0]), 1.0);
    }

    #[test]
    fn same_seed_gives_identical_shuffles() {
        let ds = tiny_dataset(32);
        let collect = |seed| -> Vec<usize> {
            batch_iter(&ds, 5, true, seed)
                .unwrap()
                .flat_map(|b| b.labels)
                .collect()
        };
        assert_eq!(collect(7), collect(7));
        assert_ne!(collect(7), collect(8));
        // A shuffle is a permutation: every sample appears exactly once.
        let mut seen = collect(7);
        seen.sort_unstable();
        let mut expect: Vec<usize> = (0..32).map(|i| i % 10).collect();
        expect.sort_unstable();
        assert_eq!(seen, expect);
    }

    #[test]
    fn subset_and_validation_split_carve_deterministically() {
        let ds = tiny_dataset(20);
        let sub = ds.subset_fraction(0.25).unwrap();
        assert_eq!(sub.len(), 5);
        assert_eq!(sub.labels, vec![0, 1, 2, 3, 4]);

        let (train, val) = ds.split_validation(0.1).unwrap();
        assert_eq!(train.len(), 18);
        assert_eq!(val.len(), 2);
        assert_eq!(val.labels, vec![8, 9]);
        assert_eq!(val.split, "val");
        assert_eq!(val.images.at(&[0, 0, 0, 0]), 18.0);
    }

    #[test]
    fn batch_size_zero_is_rejected() {
        let ds = tiny_dataset(4);
        assert!(batch_iter(&ds, 0, false, 0).is_err());
    }
}
