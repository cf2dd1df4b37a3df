//! Dataset ingestion: big-endian IDX files (the classic handwritten-digit
//! layout) and a deterministic synthetic-blob generator that keeps CI and
//! experiments hermetic.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images in [0,1] with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// N x C x H x W.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        (
            self.images.dim(1),
            self.images.dim(2),
            self.images.dim(3),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.dim(0) != self.labels.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                dimension: "image/label count",
                expected: self.images.dim(0),
                actual: self.labels.len(),
            });
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                class_count: self.classes,
            });
        }
        Ok(())
    }
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let slice = bytes
        .get(offset..offset + 4)
        .ok_or(Error::DatasetFormat {
            offset,
            reason: "file truncated while reading a 4-byte field".into(),
        })?;
    Ok(u32::from_be_bytes([slice[0], slice[1], slice[2], slice[3]]))
}

/// Parse big-endian IDX image and label files. Pixels are u8 scaled by
/// 1/255 into a single-channel image tensor.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images_path).map_err(|e| Error::Io {
        path: images_path.display().to_string(),
        reason: e.to_string(),
    })?;
    let lbl_bytes = fs::read(labels_path).map_err(|e| Error::Io {
        path: labels_path.display().to_string(),
        reason: e.to_string(),
    })?;

    let magic = read_be_u32(&img_bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::DatasetFormat {
            offset: 0,
            reason: format!("unexpected magic {magic:#010x}, image files use {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = read_be_u32(&img_bytes, 4)? as usize;
    let h = read_be_u32(&img_bytes, 8)? as usize;
    let w = read_be_u32(&img_bytes, 12)? as usize;
    let pixel_count = n * h * w;
    if img_bytes.len() < 16 + pixel_count {
        return Err(Error::DatasetFormat {
            offset: img_bytes.len(),
            reason: format!(
                "expected {} pixel bytes after the header, found {}",
                pixel_count,
                img_bytes.len() - 16
            ),
        });
    }

    let magic = read_be_u32(&lbl_bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::DatasetFormat {
            offset: 0,
            reason: format!("unexpected magic {magic:#010x}, label files use {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n_labels = read_be_u32(&lbl_bytes, 4)? as usize;
    if n_labels != n {
        return Err(Error::DatasetFormat {
            offset: 4,
            reason: format!("{n} images but {n_labels} labels"),
        });
    }
    if lbl_bytes.len() < 8 + n {
        return Err(Error::DatasetFormat {
            offset: lbl_bytes.len(),
            reason: format!(
                "expected {n} label bytes after the header, found {}",
                lbl_bytes.len() - 8
            ),
        });
    }

    let images = Tensor::from_vec(
        &[n, 1, h, w],
        img_bytes[16..16 + pixel_count]
            .iter()
            .map(|&b| f32::from(b) / 255.0)
            .collect(),
    )?;
    let labels: Vec<usize> = lbl_bytes[8..8 + n].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    let ds = Dataset {
        images,
        labels,
        classes,
        split: "idx".into(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Serialize a single-channel dataset back into a pair of IDX files,
/// quantizing pixels to u8.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (c, h, w) = dataset.input_shape();
    if c != 1 {
        return Err(Error::Config {
            reason: format!("idx image files are single-channel, dataset has {c}"),
        });
    }
    let n = dataset.len();
    let mut img = Vec::with_capacity(16 + n * h * w);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    img.extend(
        dataset
            .images
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut lbl = Vec::with_capacity(8 + n);
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(n as u32).to_be_bytes());
    lbl.extend(dataset.labels.iter().map(|&l| l as u8));
    atomic_write(images_path, &img)?;
    atomic_write(labels_path, &lbl)?;
    Ok(())
}

/// Write to a sibling temp file, then rename into place, so failed runs
/// never leave partial outputs behind.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    let io_err = |e: std::io::Error| Error::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    if let Err(e) = fs::write(&tmp, bytes).and_then(|()| fs::rename(&tmp, path)) {
        let _ = fs::remove_file(&tmp);
        return Err(io_err(e));
    }
    Ok(())
}

/// Pixel noise of the synthetic blobs.
pub const SYNTH_NOISE: f64 = 0.08;

/// Deterministic class-conditional blobs: each class lights up a Gaussian
/// bump at its own grid cell with a class-specific per-channel amplitude,
/// plus light pixel noise, so classes are separable by construction.
/// Labels round-robin so `n == classes` gives exactly one sample per class.
pub fn synth_data(
    seed: u64,
    n: usize,
    classes: usize,
    shape: (usize, usize, usize),
) -> Result<Dataset> {
    synth_data_with_noise(seed, n, classes, shape, SYNTH_NOISE)
}

pub fn synth_data_with_noise(
    seed: u64,
    n: usize,
    classes: usize,
    shape: (usize, usize, usize),
    noise: f64,
) -> Result<Dataset> {
    let (c, h, w) = shape;
    if classes == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::Config {
            reason: "classes and image dimensions must be positive".into(),
        });
    }
    if n < classes {
        return Err(Error::Config {
            reason: format!("need at least one sample per class: n={n} < classes={classes}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = (classes as f64).sqrt().ceil() as usize;
    let sigma = (h.min(w) as f64 / grid as f64) * 0.45;
    let centers: Vec<(f64, f64)> = (0..classes)
        .map(|k| {
            let row = k / grid;
            let col = k % grid;
            (
                (row as f64 + 0.5) * h as f64 / grid as f64 - 0.5,
                (col as f64 + 0.5) * w as f64 / grid as f64 - 0.5,
            )
        })
        .collect();

    let mut data = vec![0.0f32; n * c * h * w];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        labels.push(label);
        let (cy, cx) = centers[label];
        for ch in 0..c {
            // class-specific channel signature keeps channels informative
            let amp = 0.55 + 0.45 * (((label * 7 + ch * 3) % 5) as f64 / 4.0);
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let bump = amp * (-d2 / (2.0 * sigma * sigma)).exp();
                    let eps: f64 = rng.gen_range(-1.0..1.0) * noise;
                    let idx = ((i * c + ch) * h + y) * w + x;
                    data[idx] = (bump + eps).clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    let ds = Dataset {
        images: Tensor::from_vec(&[n, c, h, w], data)?,
        labels,
        classes,
        split: format!("synth-{seed}"),
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_image_bytes(n: usize, h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        b.extend_from_slice(&(n as u32).to_be_bytes());
        b.extend_from_slice(&(h as u32).to_be_bytes());
        b.extend_from_slice(&(w as u32).to_be_bytes());
        b.extend_from_slice(pixels);
        b
    }

    fn idx_label_bytes(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn idx_roundtrip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("img.idx");
        let lbl_path = dir.path().join("lbl.idx");
        std::fs::write(&img_path, idx_image_bytes(2, 2, 2, &[0, 51, 102, 255, 10, 20, 30, 40]))
            .unwrap();
        std::fs::write(&lbl_path, idx_label_bytes(&[3, 1])).unwrap();
        let ds = load_idx(&img_path, &lbl_path).unwrap();
        assert_eq!(ds.images.shape, vec![2, 1, 2, 2]);
        assert_eq!(ds.labels, vec![3, 1]);
        assert!((ds.images.data[1] - 51.0 / 255.0).abs() < 1e-6);
        assert!((ds.images.data[3] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn idx_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("img.idx");
        let lbl_path = dir.path().join("lbl.idx");
        let mut bytes = idx_image_bytes(1, 2, 2, &[0; 4]);
        bytes[3] = 0x02;
        std::fs::write(&img_path, bytes).unwrap();
        std::fs::write(&lbl_path, idx_label_bytes(&[0])).unwrap();
        let err = load_idx(&img_path, &lbl_path).unwrap_err();
        match err {
            Error::DatasetFormat { offset, reason } => {
                assert_eq!(offset, 0);
                assert!(reason.contains("unexpected magic"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn idx_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("img.idx");
        let lbl_path = dir.path().join("lbl.idx");
        std::fs::write(&img_path, idx_image_bytes(2, 2, 2, &[0; 8])).unwrap();
        std::fs::write(&lbl_path, idx_label_bytes(&[0, 1, 2])).unwrap();
        let err = load_idx(&img_path, &lbl_path).unwrap_err();
        assert!(matches!(err, Error::DatasetFormat { offset: 4, .. }));
    }

    #[test]
    fn idx_truncated_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("img.idx");
        let lbl_path = dir.path().join("lbl.idx");
        let mut bytes = idx_image_bytes(2, 2, 2, &[0; 8]);
        bytes.truncate(18);
        std::fs::write(&img_path, bytes).unwrap();
        std::fs::write(&lbl_path, idx_label_bytes(&[0, 1])).unwrap();
        let err = load_idx(&img_path, &lbl_path).unwrap_err();
        assert!(matches!(err, Error::DatasetFormat { offset: 18, .. }));
    }

    #[test]
    fn synth_is_bit_identical_per_seed() {
        let a = synth_data(0, 40, 4, (1, 8, 8)).unwrap();
        let b = synth_data(0, 40, 4, (1, 8, 8)).unwrap();
        assert_eq!(a, b);
        let c = synth_data(1, 40, 4, (1, 8, 8)).unwrap();
        assert_ne!(a.images.data, c.images.data);
    }

    #[test]
    fn synth_one_sample_per_class_when_minimal() {
        let ds = synth_data(7, 5, 5, (1, 8, 8)).unwrap();
        let mut seen = [0usize; 5];
        for &l in &ds.labels {
            seen[l] += 1;
        }
        assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn synth_rejects_fewer_samples_than_classes() {
        let err = synth_data(0, 3, 4, (1, 8, 8)).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn synth_survives_idx_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_data(3, 12, 3, (1, 8, 8)).unwrap();
        let img_path = dir.path().join("img.idx");
        let lbl_path = dir.path().join("lbl.idx");
        write_idx(&ds, &img_path, &lbl_path).unwrap();
        let back = load_idx(&img_path, &lbl_path).unwrap();
        assert_eq!(back.labels, ds.labels);
        for (a, b) in back.images.data.iter().zip(&ds.images.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.json");
        atomic_write(&path, b"{}").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"{}");
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.path() != path)
            .collect();
        assert!(leftovers.is_empty());
    }
}
