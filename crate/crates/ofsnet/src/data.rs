//! Datasets: the synthetic planted-scale generator, an IDX image/label
//! loader, and a small binary tensor file format.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Labeled sample collection: `samples` is (N, 1, H, W), labels are 0/1.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Tensor,
    pub labels: Vec<u8>,
    pub metadata: DatasetMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub source: String,
    pub seed: u64,
    /// Samples whose pixel variance was zero and were blanked during
    /// standardization.
    pub degenerate_samples: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.samples.shape[2], self.samples.shape[3])
    }

    /// Copy of sample `i` as a (1, 1, H, W) tensor.
    pub fn sample(&self, i: usize) -> Tensor {
        let (h, w) = self.resolution();
        let plane = h * w;
        Tensor {
            shape: vec![1, 1, h, w],
            data: self.samples.data[i * plane..(i + 1) * plane].to_vec(),
        }
    }

    /// Copy of the given samples stacked into a (B, 1, H, W) batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<u8>) {
        let (h, w) = self.resolution();
        let plane = h * w;
        let mut data = Vec::with_capacity(indices.len() * plane);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.samples.data[i * plane..(i + 1) * plane]);
            labels.push(self.labels[i]);
        }
        (
            Tensor {
                shape: vec![indices.len(), 1, h, w],
                data,
            },
            labels,
        )
    }
}

/// Configuration of the synthetic planted-scale task.
///
/// Each image is Gaussian noise plus unit-amplitude square blobs whose
/// extent depends on the class, so the spatial scale that separates the
/// classes is known by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedConfig {
    pub resolution: (usize, usize),
    pub positive_extent: usize,
    pub negative_extent: usize,
    pub blobs_per_image: usize,
    pub noise_sigma: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl PlantedConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.resolution;
        let lim = h.min(w);
        for (name, e) in [
            ("positive_extent", self.positive_extent),
            ("negative_extent", self.negative_extent),
        ] {
            if e % 2 == 0 || e == 0 {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be odd and >= 1, got {e}"
                )));
            }
            if e >= lim {
                return Err(Error::InvalidArgument(format!(
                    "{name} {e} does not fit inside a {h}x{w} image"
                )));
            }
        }
        if self.positive_extent == self.negative_extent {
            return Err(Error::InvalidArgument(
                "positive_extent and negative_extent must differ".into(),
            ));
        }
        if self.n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Generate the planted-scale dataset. Classes alternate 1, 0, 1, 0, ... so
/// label counts differ by at most one. Blobs land uniformly at random,
/// fully inside the image; every sample is standardized to zero mean and
/// unit variance.
pub fn generate_planted(cfg: &PlantedConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (h, w) = cfg.resolution;
    let plane = h * w;
    let mut rng = Stream::new(cfg.seed).derive("planted");
    let mut data = Vec::with_capacity(cfg.n_samples * plane);
    let mut labels = Vec::with_capacity(cfg.n_samples);
    let mut degenerate = 0usize;
    let mut image = vec![0.0f64; plane];

    for i in 0..cfg.n_samples {
        let label = u8::from(i % 2 == 0);
        let extent = if label == 1 {
            cfg.positive_extent
        } else {
            cfg.negative_extent
        };
        if cfg.noise_sigma > 0.0 {
            for v in image.iter_mut() {
                *v = cfg.noise_sigma * rng.normal();
            }
        } else {
            image.fill(0.0);
        }
        for _ in 0..cfg.blobs_per_image {
            let top = rng.below(h - extent + 1);
            let left = rng.below(w - extent + 1);
            for y in top..top + extent {
                for v in &mut image[y * w + left..y * w + left + extent] {
                    *v += 1.0;
                }
            }
        }
        if !standardize_in_place(&mut image) {
            degenerate += 1;
        }
        data.extend_from_slice(&image);
        labels.push(label);
    }

    Ok(Dataset {
        samples: Tensor::new(vec![cfg.n_samples, 1, h, w], data)?,
        labels,
        metadata: DatasetMeta {
            source: format!(
                "planted(res={}x{}, pos={}, neg={}, blobs={}, sigma={})",
                h, w, cfg.positive_extent, cfg.negative_extent, cfg.blobs_per_image, cfg.noise_sigma
            ),
            seed: cfg.seed,
            degenerate_samples: degenerate,
        },
    })
}

/// Zero-mean unit-variance in place. Returns false (and blanks the image)
/// when the variance is zero.
fn standardize_in_place(image: &mut [f64]) -> bool {
    let n = image.len() as f64;
    let mean = image.iter().sum::<f64>() / n;
    let var = image.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var == 0.0 {
        image.fill(0.0);
        return false;
    }
    let inv_sd = 1.0 / var.sqrt();
    for v in image.iter_mut() {
        *v = (*v - mean) * inv_sd;
    }
    true
}

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Load an IDX image/label file pair (the MNIST container format: big-endian
/// magic 0x00000803 for rank-3 u8 images, 0x00000801 for u8 labels). Pixels
/// are scaled to [0,1] then per-image standardized; labels are binarized
/// against `positive_class`.
pub fn load_idx(images_path: &Path, labels_path: &Path, positive_class: u8) -> Result<Dataset> {
    let image_bytes = fs::read(images_path)?;
    let label_bytes = fs::read(labels_path)?;

    let magic = read_u32_be(&image_bytes, 0, "image file magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "image file magic mismatch: expected {IDX_IMAGE_MAGIC:#010x}, found {magic:#010x}"
        )));
    }
    let n = read_u32_be(&image_bytes, 4, "image count")? as usize;
    let h = read_u32_be(&image_bytes, 8, "image rows")? as usize;
    let w = read_u32_be(&image_bytes, 12, "image cols")? as usize;
    let pixel_bytes = &image_bytes[16.min(image_bytes.len())..];
    if pixel_bytes.len() != n * h * w {
        return Err(Error::Format(format!(
            "image file truncated: header promises {} pixel bytes, found {}",
            n * h * w,
            pixel_bytes.len()
        )));
    }

    let magic = read_u32_be(&label_bytes, 0, "label file magic")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Format(format!(
            "label file magic mismatch: expected {IDX_LABEL_MAGIC:#010x}, found {magic:#010x}"
        )));
    }
    let n_labels = read_u32_be(&label_bytes, 4, "label count")? as usize;
    let label_payload = &label_bytes[8.min(label_bytes.len())..];
    if label_payload.len() != n_labels {
        return Err(Error::Format(format!(
            "label file truncated: header promises {n_labels} labels, found {}",
            label_payload.len()
        )));
    }
    if n != n_labels {
        return Err(Error::Format(format!(
            "image/label count mismatch: {n} images vs {n_labels} labels"
        )));
    }
    if n == 0 {
        return Err(Error::Format("IDX pair holds zero samples".into()));
    }

    let mut data = Vec::with_capacity(n * h * w);
    let mut degenerate = 0usize;
    let mut image = vec![0.0f64; h * w];
    for i in 0..n {
        for (v, &px) in image.iter_mut().zip(&pixel_bytes[i * h * w..(i + 1) * h * w]) {
            *v = f64::from(px) / 255.0;
        }
        if !standardize_in_place(&mut image) {
            degenerate += 1;
        }
        data.extend_from_slice(&image);
    }
    if degenerate > 0 {
        eprintln!("warning: {degenerate} constant-valued image(s) blanked during standardization");
    }

    let labels = label_payload
        .iter()
        .map(|&l| u8::from(l == positive_class))
        .collect();
    Ok(Dataset {
        samples: Tensor::new(vec![n, 1, h, w], data)?,
        labels,
        metadata: DatasetMeta {
            source: format!("idx({}, {})", images_path.display(), labels_path.display()),
            seed: 0,
            degenerate_samples: degenerate,
        },
    })
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format(format!(
            "file truncated while reading {what} (need {end} bytes, have {})",
            bytes.len()
        )));
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Write a hand-built IDX pair; test and tooling helper.
pub fn save_idx(
    images_path: &Path,
    labels_path: &Path,
    images: &[Vec<u8>],
    rows: usize,
    cols: usize,
    labels: &[u8],
) -> Result<()> {
    let mut img = Vec::new();
    img.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(images.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for im in images {
        img.extend_from_slice(im);
    }
    fs::write(images_path, img)?;

    let mut lab = Vec::new();
    lab.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    fs::write(labels_path, lab)?;
    Ok(())
}

const TENSOR_MAGIC: &[u8; 4] = b"OFST";
const TENSOR_VERSION: u16 = 1;

/// Serialize a tensor: magic "OFST", version u16, rank u16, dims as u64
/// each, payload as f64 — all little-endian.
pub fn write_tensor<W: Write>(out: &mut W, t: &Tensor) -> Result<()> {
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&TENSOR_VERSION.to_le_bytes())?;
    out.write_all(&(t.rank() as u16).to_le_bytes())?;
    for &d in &t.shape {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in &t.data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Inverse of [`write_tensor`].
pub fn read_tensor<R: Read>(input: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact(input, &mut magic, "tensor magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!(
            "tensor magic mismatch: expected {:?}, found {:?}",
            TENSOR_MAGIC, magic
        )));
    }
    let mut u16buf = [0u8; 2];
    read_exact(input, &mut u16buf, "tensor version")?;
    let version = u16::from_le_bytes(u16buf);
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!(
            "unsupported tensor format version {version} (expected {TENSOR_VERSION})"
        )));
    }
    read_exact(input, &mut u16buf, "tensor rank")?;
    let rank = u16::from_le_bytes(u16buf) as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut u64buf = [0u8; 8];
    for i in 0..rank {
        read_exact(input, &mut u64buf, "tensor dimension")?;
        let d = u64::from_le_bytes(u64buf);
        if d > (1 << 32) {
            return Err(Error::Format(format!("implausible dimension {d} at axis {i}")));
        }
        shape.push(d as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        if input.read_exact(&mut u64buf).is_err() {
            return Err(Error::Format(format!(
                "tensor payload truncated: expected {n} values ({} bytes), got fewer",
                n * 8
            )));
        }
        data.push(f64::from_le_bytes(u64buf));
    }
    Tensor::new(shape, data)
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input
        .read_exact(buf)
        .map_err(|_| Error::Format(format!("file truncated while reading {what}")))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let mut cursor: &[u8] = &bytes;
    let t = read_tensor(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor payload",
            cursor.len()
        )));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> PlantedConfig {
        PlantedConfig {
            resolution: (16, 12),
            positive_extent: 5,
            negative_extent: 3,
            blobs_per_image: 2,
            noise_sigma: 0.5,
            n_samples: 9,
            seed: 77,
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_planted(&small_cfg()).unwrap();
        let b = generate_planted(&small_cfg()).unwrap();
        assert_eq!(a.samples.data, b.samples.data);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn labels_alternate_and_balance() {
        let d = generate_planted(&small_cfg()).unwrap();
        let pos = d.labels.iter().filter(|&&l| l == 1).count();
        let neg = d.len() - pos;
        assert!(pos.abs_diff(neg) <= 1);
        assert_eq!(d.labels[0], 1);
        assert_eq!(d.labels[1], 0);
    }

    #[test]
    fn samples_are_standardized() {
        let d = generate_planted(&small_cfg()).unwrap();
        let (h, w) = d.resolution();
        let n = (h * w) as f64;
        for i in 0..d.len() {
            let s = d.sample(i);
            let mean = s.data.iter().sum::<f64>() / n;
            let var = s.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() <= 1e-9, "mean {mean}");
            assert!((var.sqrt() - 1.0).abs() <= 1e-9, "sd {}", var.sqrt());
        }
    }

    #[test]
    fn generator_rejects_bad_configs() {
        let mut cfg = small_cfg();
        cfg.positive_extent = 4;
        assert!(generate_planted(&cfg).is_err());

        let mut cfg = small_cfg();
        cfg.negative_extent = cfg.positive_extent;
        assert!(generate_planted(&cfg).is_err());

        let mut cfg = small_cfg();
        cfg.positive_extent = 13; // does not fit in 16x12
        assert!(generate_planted(&cfg).is_err());
    }

    /// Full width at half maximum of the central row of the 2-D
    /// autocorrelation, measured by brute-force shifting.
    fn autocorr_halfwidth(img: &[f64], h: usize, w: usize) -> usize {
        let corr = |dx: isize| -> f64 {
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let sx = x as isize + dx;
                    if sx >= 0 && (sx as usize) < w {
                        acc += img[y * w + x] * img[y * w + sx as usize];
                    }
                }
            }
            acc
        };
        let peak = corr(0);
        let mut width = 1;
        let mut dx = 1isize;
        while (dx as usize) < w && corr(dx) >= peak / 2.0 {
            width += 2;
            dx += 1;
        }
        width
    }

    #[test]
    fn larger_extent_widens_the_autocorrelation() {
        let cfg = PlantedConfig {
            resolution: (24, 24),
            positive_extent: 7,
            negative_extent: 3,
            blobs_per_image: 1,
            noise_sigma: 0.0,
            n_samples: 8,
            seed: 3,
        };
        let d = generate_planted(&cfg).unwrap();
        let (h, w) = d.resolution();
        for i in 0..d.len() {
            let s = d.sample(i);
            let width = autocorr_halfwidth(&s.data, h, w);
            if d.labels[i] == 1 {
                assert!(width > 3, "class 1 width {width}");
            } else {
                assert!(width <= 3, "class 0 width {width}");
            }
        }
    }

    #[test]
    fn idx_round_trip_before_standardization() {
        let dir = tempfile::tempdir().unwrap();
        let images = vec![
            (0u8..16).collect::<Vec<u8>>(),
            (100u8..116).collect::<Vec<u8>>(),
        ];
        let ip = dir.path().join("imgs.idx");
        let lp = dir.path().join("labs.idx");
        save_idx(&ip, &lp, &images, 4, 4, &[3, 5]).unwrap();

        let raw = fs::read(&ip).unwrap();
        assert_eq!(&raw[0..4], &[0, 0, 8, 3]);
        assert_eq!(&raw[16..32], images[0].as_slice());

        let d = load_idx(&ip, &lp, 5).unwrap();
        assert_eq!(d.labels, vec![0, 1]);
        assert_eq!(d.samples.shape, vec![2, 1, 4, 4]);
        // Pixel ordering survives standardization: values stay monotone.
        let s = d.sample(0);
        for pair in s.data.windows(2) {
            assert!(pair[0] < pair[1]);
        }
    }

    #[test]
    fn idx_rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs.idx");
        let lp = dir.path().join("labs.idx");
        save_idx(&ip, &lp, &[vec![0; 4]], 2, 2, &[1]).unwrap();
        let err = load_idx(&lp, &ip, 1).unwrap_err().to_string();
        assert!(err.contains("0x00000803"), "{err}");
        assert!(err.contains("0x00000801"), "{err}");
    }

    #[test]
    fn idx_rejects_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs.idx");
        let lp = dir.path().join("labs.idx");
        save_idx(&ip, &lp, &[vec![0; 4], vec![1; 4]], 2, 2, &[1]).unwrap();
        let err = load_idx(&ip, &lp, 1).unwrap_err().to_string();
        assert!(err.contains("2 images vs 1 labels"), "{err}");
    }

    #[test]
    fn idx_rejects_truncated_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs.idx");
        let lp = dir.path().join("labs.idx");
        save_idx(&ip, &lp, &[vec![0; 4]], 2, 2, &[1]).unwrap();
        let mut raw = fs::read(&ip).unwrap();
        raw.pop();
        fs::write(&ip, raw).unwrap();
        let err = load_idx(&ip, &lp, 1).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn idx_constant_image_blanks_to_zero() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs.idx");
        let lp = dir.path().join("labs.idx");
        save_idx(&ip, &lp, &[vec![9; 4]], 2, 2, &[1]).unwrap();
        let d = load_idx(&ip, &lp, 1).unwrap();
        assert!(d.sample(0).data.iter().all(|&v| v == 0.0));
        assert_eq!(d.metadata.degenerate_samples, 1);
    }

    #[test]
    fn tensor_file_scalar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ofst");
        let t = Tensor::scalar(-0.125);
        save_tensor(&p, &t).unwrap();
        assert_eq!(load_tensor(&p).unwrap(), t);
    }

    #[test]
    fn tensor_file_rejects_truncation_by_one_byte() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ofst");
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        save_tensor(&p, &t).unwrap();
        let mut raw = fs::read(&p).unwrap();
        raw.pop();
        fs::write(&p, raw).unwrap();
        let err = load_tensor(&p).unwrap_err().to_string();
        assert!(err.contains("payload truncated"), "{err}");
    }

    #[test]
    fn tensor_file_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ofst");
        save_tensor(&p, &Tensor::scalar(1.0)).unwrap();
        let mut raw = fs::read(&p).unwrap();
        raw[0] = b'X';
        fs::write(&p, raw).unwrap();
        assert!(load_tensor(&p).unwrap_err().to_string().contains("magic"));
    }
}
