//! Desk-scale data: synthetic cluster and out-of-distribution generators,
//! an IDX loader for MNIST-format files, and stratified splitting.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::{seeded_rng, Matrix};
use crate::model::LabeledBatch;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Class center for gen_blobs: classes sit on a circle of radius two in
/// the first two coordinates, zero elsewhere.
pub fn blob_center(k: usize, class: usize, dim: usize) -> Vec<f64> {
    let angle = 2.0 * std::f64::consts::PI * class as f64 / k as f64;
    (0..dim)
        .map(|j| match j {
            0 => 2.0 * angle.cos(),
            1 => 2.0 * angle.sin(),
            _ => 0.0,
        })
        .collect()
}

/// k isotropic Gaussian clusters with means on a circle, n_per_class
/// samples each, laid out class by class. Deterministic in the seed.
pub fn gen_blobs(
    k: usize,
    n_per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledBatch> {
    assert!(k >= 2, "need at least two classes");
    assert!(dim >= 1 && n_per_class >= 1 && spread >= 0.0);
    let mut rng = seeded_rng(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n = k * n_per_class;
    let mut rows = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..k {
        let center = blob_center(k, c, dim);
        for _ in 0..n_per_class {
            for &m in &center {
                rows.push(m + spread * normal.sample(&mut rng));
            }
            labels.push(c);
        }
    }
    LabeledBatch::new(Matrix::from_vec(n, dim, rows), labels, k)
}

/// Unlabeled points drawn uniformly on the hypersphere of radius
/// radius_factor times the in-domain 95th-percentile norm, so the two
/// supports are disjoint in norm for any factor comfortably above one.
pub fn gen_ood_shell(in_domain: &LabeledBatch, radius_factor: f64, n: usize, seed: u64) -> Matrix {
    assert!(radius_factor > 1.0, "shell must sit outside the data");
    let dim = in_domain.input_dim();
    let mut norms: Vec<f64> = (0..in_domain.len())
        .map(|i| in_domain.input(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    norms.sort_by(|a, b| a.partial_cmp(b).expect("finite norms"));
    let rank = ((norms.len() as f64 * 0.95).ceil() as usize).clamp(1, norms.len());
    let radius = radius_factor * norms[rank - 1];

    let mut rng = seeded_rng(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rows = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let dir: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        rows.extend(dir.iter().map(|v| radius * v / len));
    }
    Matrix::from_vec(n, dim, rows)
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::TruncatedFile {
            path: path.display().to_string(),
            needed: end,
            have: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parse an IDX image/label file pair into a batch with pixels scaled to
/// [0, 1] and images flattened row-major.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledBatch> {
    let img_bytes = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let magic = read_u32_be(&img_bytes, 0, images_path)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: images_path.display().to_string(),
            got: magic,
            expected: IMAGES_MAGIC,
        });
    }
    let n_images = read_u32_be(&img_bytes, 4, images_path)? as usize;
    let rows = read_u32_be(&img_bytes, 8, images_path)? as usize;
    let cols = read_u32_be(&img_bytes, 12, images_path)? as usize;
    let pixel_count = n_images * rows * cols;
    let needed = 16 + pixel_count;
    if img_bytes.len() < needed {
        return Err(Error::TruncatedFile {
            path: images_path.display().to_string(),
            needed,
            have: img_bytes.len(),
        });
    }

    let lbl_bytes = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let magic = read_u32_be(&lbl_bytes, 0, labels_path)?;
    if magic != LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: labels_path.display().to_string(),
            got: magic,
            expected: LABELS_MAGIC,
        });
    }
    let n_labels = read_u32_be(&lbl_bytes, 4, labels_path)? as usize;
    let needed = 8 + n_labels;
    if lbl_bytes.len() < needed {
        return Err(Error::TruncatedFile {
            path: labels_path.display().to_string(),
            needed,
            have: lbl_bytes.len(),
        });
    }
    if n_images != n_labels {
        return Err(Error::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }

    let inputs = Matrix::from_fn(n_images, rows * cols, |i, j| {
        img_bytes[16 + i * rows * cols + j] as f64 / 255.0
    });
    let labels: Vec<usize> = lbl_bytes[8..8 + n_labels].iter().map(|&b| b as usize).collect();
    let k = labels.iter().copied().max().map_or(0, |m| m + 1).max(2);
    LabeledBatch::new(inputs, labels, k)
}

/// Write a batch as CSV: header x0..x{d-1},label then one row per sample.
pub fn save_csv(data: &LabeledBatch, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    let d = data.input_dim();
    let header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    writeln!(out, "{},label", header.join(",")).expect("in-memory write");
    for i in 0..data.len() {
        let row: Vec<String> = data.input(i).iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{},{}", row.join(","), data.label(i)).expect("in-memory write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Train/held-out/test partition of one dataset, with the index sets that
/// produced it retained for auditing.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    train: LabeledBatch,
    heldout: Option<LabeledBatch>,
    test: Option<LabeledBatch>,
    train_idx: Vec<usize>,
    heldout_idx: Vec<usize>,
    test_idx: Vec<usize>,
    split_seed: u64,
}

impl DatasetSplit {
    pub fn train(&self) -> &LabeledBatch {
        &self.train
    }

    pub fn heldout(&self) -> Option<&LabeledBatch> {
        self.heldout.as_ref()
    }

    /// The held-out split, or the error tuning paths report without one.
    pub fn require_heldout(&self) -> Result<&LabeledBatch> {
        self.heldout.as_ref().ok_or(Error::EmptyHeldout)
    }

    pub fn test(&self) -> Option<&LabeledBatch> {
        self.test.as_ref()
    }

    pub fn require_test(&self) -> Result<&LabeledBatch> {
        self.test.as_ref().ok_or(Error::EmptyInput("test split"))
    }

    pub fn indices(&self) -> (&[usize], &[usize], &[usize]) {
        (&self.train_idx, &self.heldout_idx, &self.test_idx)
    }

    pub fn split_seed(&self) -> u64 {
        self.split_seed
    }
}

/// Largest-remainder allocation of m samples across the three fractions.
fn allocate(m: usize, fractions: (f64, f64, f64)) -> [usize; 3] {
    let fs = [fractions.0, fractions.1, fractions.2];
    let mut alloc = [0usize; 3];
    let mut rema: Vec<(f64, usize)> = Vec::with_capacity(3);
    let mut used = 0;
    for (s, &f) in fs.iter().enumerate() {
        let target = m as f64 * f;
        let base = target.floor() as usize;
        alloc[s] = base;
        used += base;
        rema.push((target - base as f64, s));
    }
    rema.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for &(_, s) in rema.iter().take(m - used) {
        alloc[s] += 1;
    }
    alloc
}

/// Stratified split: per class, a seeded shuffle followed by
/// largest-remainder allocation to the three parts. Every class must
/// receive at least one sample in each part with a nonzero fraction.
pub fn split(data: &LabeledBatch, fractions: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let fs = [fractions.0, fractions.1, fractions.2];
    if fs.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::InvalidConfig(format!(
            "split fractions must lie in [0, 1], got {fs:?}"
        )));
    }
    let total: f64 = fs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split fractions must sum to 1, got {total}"
        )));
    }

    let k = data.k_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for i in 0..data.len() {
        by_class[data.label(i)].push(i);
    }

    let mut rng = seeded_rng(seed);
    let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (class, idx) in by_class.iter_mut().enumerate() {
        let alloc = allocate(idx.len(), fractions);
        for (s, &count) in alloc.iter().enumerate() {
            if fs[s] > 0.0 && count == 0 {
                return Err(Error::InsufficientSamples {
                    class,
                    count: idx.len(),
                });
            }
        }
        idx.shuffle(&mut rng);
        let mut offset = 0;
        for (s, &count) in alloc.iter().enumerate() {
            parts[s].extend_from_slice(&idx[offset..offset + count]);
            offset += count;
        }
    }
    for part in parts.iter_mut() {
        part.sort_unstable();
    }

    let make = |idx: &[usize]| -> Result<Option<LabeledBatch>> {
        if idx.is_empty() {
            Ok(None)
        } else {
            data.subset(idx).map(Some)
        }
    };
    let train = make(&parts[0])?.ok_or(Error::EmptyBatch("train split"))?;
    let heldout = make(&parts[1])?;
    let test = make(&parts[2])?;
    Ok(DatasetSplit {
        train,
        heldout,
        test,
        train_idx: parts[0].clone(),
        heldout_idx: parts[1].clone(),
        test_idx: parts[2].clone(),
        split_seed: seed,
    })
}

/// Subsample without replacement, deterministic in the seed; returns the
/// whole batch when n_keep is at least the batch size.
pub fn subsample(data: &LabeledBatch, n_keep: usize, seed: u64) -> Result<LabeledBatch> {
    if n_keep >= data.len() {
        return data.subset(&(0..data.len()).collect::<Vec<_>>());
    }
    if n_keep == 0 {
        return Err(Error::EmptyBatch("subsample"));
    }
    let mut rng = seeded_rng(seed);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(n_keep);
    idx.sort_unstable();
    data.subset(&idx)
}

/// Gaussian-perturbed copy of a batch, keeping labels; used to build
/// corrupted in-domain inputs for shift experiments.
pub fn perturb_inputs(data: &LabeledBatch, noise: f64, seed: u64) -> Result<LabeledBatch> {
    let mut rng = seeded_rng(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut values = Vec::with_capacity(data.len() * data.input_dim());
    for i in 0..data.len() {
        for &v in data.input(i) {
            values.push(v + noise * normal.sample(&mut rng));
        }
    }
    let inputs = Matrix::from_vec(data.len(), data.input_dim(), values);
    LabeledBatch::new(inputs, data.labels().to_vec(), data.k_classes())
}
