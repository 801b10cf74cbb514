//! Datasets: the scalar sign task, IDX image files, and a synthetic
//! handwritten-digit generator that writes MNIST-format files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled examples stored as rows of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, D]`
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(
        inputs: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        if inputs.rank() != 2 || inputs.shape()[0] != labels.len() {
            return Err(Error::contract(format!(
                "inputs {:?} do not match {} labels",
                inputs.shape(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= num_classes) {
            return Err(Error::contract(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Features per example.
    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.inputs.data()[k * d..(k + 1) * d]
    }

    /// Rows at `indices` (in that order) as a `[len, D]` tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &k in indices {
            data.extend_from_slice(self.row(k));
            labels.push(self.labels[k]);
        }
        (Tensor::from_parts(vec![indices.len(), d], data), labels)
    }

    pub fn select(&self, indices: &[usize], name: impl Into<String>) -> Dataset {
        let (inputs, labels) = self.batch(indices);
        Dataset {
            inputs,
            labels,
            num_classes: self.num_classes,
            name: name.into(),
        }
    }

    /// Fraction of examples per class.
    pub fn class_fractions(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        let n = self.len().max(1) as f64;
        counts.into_iter().map(|c| c as f64 / n).collect()
    }
}

/// Scalars `x ~ U[-1, 1]`, labelled 0 when `x < 0` and 1 otherwise.
pub fn gen_sign_dataset(n: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::contract(format!(
            "sign dataset needs n >= 2, got {n}"
        )));
    }
    let mut rng = SeededRng::new(seed);
    let xs: Vec<f64> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let labels = xs.iter().map(|&x| sign_label(x)).collect();
    Dataset::new(Tensor::from_parts(vec![n, 1], xs), labels, 2, "sign")
}

pub fn sign_label(x: f64) -> usize {
    if x < 0.0 {
        0
    } else {
        1
    }
}

/// Seeded shuffle, then the first `n_train` and the next `n_test` rows.
pub fn split_subset(
    ds: &Dataset,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if n_train + n_test > ds.len() {
        return Err(Error::contract(format!(
            "cannot take {n_train} + {n_test} examples from {} rows",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    SeededRng::new(seed).shuffle(&mut order);
    let train = ds.select(&order[..n_train], format!("{}-train", ds.name));
    let test = ds.select(
        &order[n_train..n_train + n_test],
        format!("{}-test", ds.name),
    );
    Ok((train, test))
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads an IDX image file and its label file. Pixels are scaled to `[0, 1]`
/// and each image is flattened row-major.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;

    if images.len() < 16 {
        return Err(Error::format(images_path, "truncated header"));
    }
    let magic = read_u32(&images, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            images_path,
            format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = read_u32(&images, 4) as usize;
    let rows = read_u32(&images, 8) as usize;
    let cols = read_u32(&images, 12) as usize;
    let dim = rows * cols;
    let expected = 16 + count * dim;
    if images.len() < expected {
        return Err(Error::format(
            images_path,
            format!(
                "truncated: {} bytes for {count} images of {rows}x{cols}",
                images.len()
            ),
        ));
    }

    if labels.len() < 8 {
        return Err(Error::format(labels_path, "truncated header"));
    }
    let magic = read_u32(&labels, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            labels_path,
            format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let label_count = read_u32(&labels, 4) as usize;
    if label_count != count {
        return Err(Error::format(
            labels_path,
            format!("count mismatch: {count} images but {label_count} labels"),
        ));
    }
    if labels.len() < 8 + count {
        return Err(Error::format(
            labels_path,
            format!("truncated: {} bytes for {count} labels", labels.len()),
        ));
    }

    let pixels = images[16..expected]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let labels: Vec<usize> = labels[8..8 + count]
        .iter()
        .map(|&b| usize::from(b))
        .collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    let name = images_path
        .file_stem()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(
        Tensor::from_parts(vec![count, dim], pixels),
        labels,
        num_classes,
        name,
    )
}

/// Writes `ds` as an IDX image/label pair. Inputs must lie in `[0, 1]` and
/// are stored as `round(255 x)`; labels must fit in a byte.
pub fn write_idx(
    ds: &Dataset,
    rows: usize,
    cols: usize,
    images_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    if rows * cols != ds.dim() {
        return Err(Error::contract(format!(
            "{rows}x{cols} images do not match input width {}",
            ds.dim()
        )));
    }
    if ds.num_classes > 256 {
        return Err(Error::contract("labels must fit in one byte"));
    }
    let mut img = Vec::with_capacity(16 + ds.inputs.numel());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [ds.len(), rows, cols] {
        img.extend_from_slice(&(v as u32).to_be_bytes());
    }
    for &x in ds.inputs.data() {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::contract(format!("pixel value {x} outside [0, 1]")));
        }
        img.push((x * 255.0).round() as u8);
    }
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    std::fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    std::fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}

/// Side length of generated digit images.
pub const DIGIT_SIDE: usize = 28;

const GLYPHS: [[&str; 7]; 10] = [
    [
        "01110", "10001", "10011", "10101", "11001", "10001", "01110",
    ],
    [
        "00100", "01100", "00100", "00100", "00100", "00100", "01110",
    ],
    [
        "01110", "10001", "00001", "00010", "00100", "01000", "11111",
    ],
    [
        "11111", "00010", "00100", "00010", "00001", "10001", "01110",
    ],
    [
        "00010", "00110", "01010", "10010", "11111", "00010", "00010",
    ],
    [
        "11111", "10000", "11110", "00001", "00001", "10001", "01110",
    ],
    [
        "00110", "01000", "10000", "11110", "10001", "10001", "01110",
    ],
    [
        "11111", "00001", "00010", "00100", "01000", "01000", "01000",
    ],
    [
        "01110", "10001", "10001", "01110", "10001", "10001", "01110",
    ],
    [
        "01110", "10001", "10001", "01111", "00001", "00010", "01100",
    ],
];

fn glyph_value(digit: usize, gx: f64, gy: f64) -> f64 {
    // bilinear lookup on the 5x7 bitmap, zero outside
    let cell = |x: i64, y: i64| -> f64 {
        if !(0..5).contains(&x) || !(0..7).contains(&y) {
            return 0.0;
        }
        f64::from(u8::from(
            GLYPHS[digit][y as usize].as_bytes()[x as usize] == b'1',
        ))
    };
    let (x0, y0) = (gx.floor(), gy.floor());
    let (fx, fy) = (gx - x0, gy - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    cell(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + cell(x0 + 1, y0) * fx * (1.0 - fy)
        + cell(x0, y0 + 1) * (1.0 - fx) * fy
        + cell(x0 + 1, y0 + 1) * fx * fy
}

fn render_digit(digit: usize, rng: &mut SeededRng, out: &mut [f64]) {
    let scale = rng.uniform_range(2.6, 3.4);
    let aspect = rng.uniform_range(0.85, 1.15);
    let shear = rng.uniform_range(-0.25, 0.25);
    let angle = rng.uniform_range(-0.2, 0.2);
    let cx = 13.5 + rng.uniform_range(-2.5, 2.5);
    let cy = 13.5 + rng.uniform_range(-2.0, 2.0);
    let ink = rng.uniform_range(0.7, 1.0);
    let thickness = rng.uniform_range(0.45, 0.75);
    let (sin, cos) = angle.sin_cos();
    for y in 0..DIGIT_SIDE {
        for x in 0..DIGIT_SIDE {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let rx = cos * dx + sin * dy;
            let ry = -sin * dx + cos * dy;
            // glyph cell centres sit at integer coordinates 0..4 / 0..6
            let gx = (rx - shear * ry) / (scale * aspect) + 2.0;
            let gy = ry / scale + 3.0;
            let v = glyph_value(digit, gx, gy);
            let stroke = ((v - (1.0 - thickness)) / thickness).clamp(0.0, 1.0);
            let noise = 0.08 * rng.uniform();
            let p = (ink * stroke + noise).clamp(0.0, 1.0);
            out[y * DIGIT_SIDE + x] = (p * 255.0).round() / 255.0;
        }
    }
}

/// Synthetic 28x28 digits with balanced labels. Each image is a 5x7 bitmap
/// glyph under a random affine warp, stroke width, ink level and pixel noise,
/// quantized to bytes so that it survives an IDX round trip exactly.
pub fn gen_digits(n: usize, seed: u64) -> Dataset {
    let mut rng = SeededRng::new(seed);
    let dim = DIGIT_SIDE * DIGIT_SIDE;
    let mut data = vec![0.0; n * dim];
    let mut labels: Vec<usize> = (0..n).map(|k| k % 10).collect();
    rng.shuffle(&mut labels);
    for (k, &digit) in labels.iter().enumerate() {
        render_digit(digit, &mut rng, &mut data[k * dim..(k + 1) * dim]);
    }
    Dataset {
        inputs: Tensor::from_parts(vec![n, dim], data),
        labels,
        num_classes: 10,
        name: "digits".into(),
    }
}
