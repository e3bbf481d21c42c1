//! Datasets: MNIST IDX files, synthetic Gaussian blobs and uniform noise.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::rng::RngStream;

pub const MNIST_MEAN: f64 = 0.1307;
pub const MNIST_STD: f64 = 0.3081;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Label given to rows that have none (noise inputs).
pub const UNLABELED: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
    Synthetic,
    Noise,
}

/// Row-major `n × dim` inputs with one label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
    pub n_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, dim: usize, n_classes: usize, split: Split) -> Result<Self> {
        if dim == 0 || inputs.len() != labels.len() * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} input values do not form {} rows of width {dim}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= n_classes && y != UNLABELED) {
            return Err(Error::ShapeMismatch(format!(
                "label {y} out of range for {n_classes} classes"
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::InconsistentInputs("non-finite input value".into()));
        }
        Ok(Self {
            inputs,
            labels,
            dim,
            n_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// Contiguous rows `start..end` as a batch.
    pub fn slice(&self, start: usize, end: usize) -> (Batch<'_>, &[usize]) {
        (
            Batch::new(&self.inputs[start * self.dim..end * self.dim], self.dim),
            &self.labels[start..end],
        )
    }

    /// Copies the given rows into a fresh buffer.
    pub fn gather(&self, rows: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(rows.len() * self.dim);
        let mut y = Vec::with_capacity(rows.len());
        for &r in rows {
            x.extend_from_slice(self.row(r));
            y.push(self.labels[r]);
        }
        (x, y)
    }

    pub fn subset(&self, rows: &[usize], split: Split) -> Dataset {
        let (inputs, labels) = self.gather(rows);
        Dataset {
            inputs,
            labels,
            dim: self.dim,
            n_classes: self.n_classes,
            split,
        }
    }

    pub fn first(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            inputs: self.inputs[..n * self.dim].to_vec(),
            labels: self.labels[..n].to_vec(),
            dim: self.dim,
            n_classes: self.n_classes,
            split: self.split,
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.inputs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for &y in &self.labels {
            if y < self.n_classes {
                h[y] += 1;
            }
        }
        h
    }
}

/// Random split into (train, validation); `val_fraction` of the rows go to
/// the second part. Membership depends only on the seed and fraction.
pub fn train_val_split(ds: &Dataset, val_fraction: f64, rng: &mut RngStream) -> (Dataset, Dataset) {
    let n_val = ((ds.len() as f64) * val_fraction).round() as usize;
    let perm = rng.permutation(ds.len());
    let (val, train) = perm.split_at(n_val.min(ds.len()));
    let mut train = train.to_vec();
    let mut val = val.to_vec();
    train.sort_unstable();
    val.sort_unstable();
    (ds.subset(&train, Split::Train), ds.subset(&val, Split::Validation))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::TruncatedFile {
                offset: self.bytes.len(),
                needed: n - (self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_be(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn check_magic(r: &mut Reader<'_>, expected: u32) -> Result<()> {
    let found = r.take(4).map_err(|_| Error::BadMagic {
        expected: expected.to_be_bytes().to_vec(),
        found: r.bytes.to_vec(),
    })?;
    if found != expected.to_be_bytes() {
        return Err(Error::BadMagic {
            expected: expected.to_be_bytes().to_vec(),
            found: found.to_vec(),
        });
    }
    Ok(())
}

/// Parses IDX image bytes into normalized rows of `rows·cols` pixels.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Vec<f64>, usize, usize)> {
    let mut r = Reader { bytes, pos: 0 };
    check_magic(&mut r, IMAGES_MAGIC)?;
    let n = r.u32_be()? as usize;
    let h = r.u32_be()? as usize;
    let w = r.u32_be()? as usize;
    let pixels = r.take(n * h * w)?;
    let inputs = pixels
        .iter()
        .map(|&p| (p as f64 / 255.0 - MNIST_MEAN) / MNIST_STD)
        .collect();
    Ok((inputs, n, h * w))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = Reader { bytes, pos: 0 };
    check_magic(&mut r, LABELS_MAGIC)?;
    let n = r.u32_be()? as usize;
    Ok(r.take(n)?.iter().map(|&b| b as usize).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (inputs, n, dim) = parse_idx_images(&read(images)?)?;
    let labels = parse_idx_labels(&read(labels)?)?;
    if labels.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    Dataset::new(inputs, labels, dim, n_classes, Split::Train)
}

/// Loads the standard file pair (`train-*` or `t10k-*`) from a directory.
pub fn load_mnist_dir(dir: &Path, train: bool) -> Result<Dataset> {
    let prefix = if train { "train" } else { "t10k" };
    let mut ds = load_mnist_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )?;
    ds.split = if train { Split::Train } else { Split::Test };
    Ok(ds)
}

/// Generative parameters behind a blob dataset.
#[derive(Clone, Debug)]
pub struct BlobTruth {
    pub centers: Vec<Vec<f64>>,
    pub spread: f64,
}

/// `n` points, each from a uniformly chosen center plus isotropic noise of
/// standard deviation `spread`; the label is the center index.
pub fn synthetic_blobs(
    n: usize,
    centers: &[Vec<f64>],
    spread: f64,
    rng: &mut RngStream,
) -> Result<(Dataset, BlobTruth)> {
    if centers.len() < 2 {
        return Err(Error::InconsistentInputs(
            "synthetic blobs need at least two centers".into(),
        ));
    }
    let dim = centers[0].len();
    if centers.iter().any(|c| c.len() != dim) {
        return Err(Error::ShapeMismatch("blob centers differ in dimension".into()));
    }
    let mut inputs = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.below(centers.len());
        for &c in &centers[k] {
            inputs.push(c + spread * rng.standard_normal());
        }
        labels.push(k);
    }
    let ds = Dataset::new(inputs, labels, dim, centers.len(), Split::Synthetic)?;
    Ok((
        ds,
        BlobTruth {
            centers: centers.to_vec(),
            spread,
        },
    ))
}

/// `n` inputs drawn uniformly over the reference dataset's value range.
pub fn uniform_noise_like(reference: &Dataset, n: usize, rng: &mut RngStream) -> Dataset {
    let (lo, hi) = reference.min_max();
    let inputs = (0..n * reference.dim).map(|_| rng.uniform_range(lo, hi)).collect();
    Dataset {
        inputs,
        labels: vec![UNLABELED; n],
        dim: reference.dim,
        n_classes: reference.n_classes,
        split: Split::Noise,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, h: u32, w: u32, fill: u8) -> Vec<u8> {
        let mut b = IMAGES_MAGIC.to_be_bytes().to_vec();
        for v in [n, h, w] {
            b.extend(v.to_be_bytes());
        }
        b.extend(std::iter::repeat_n(fill, (n * h * w) as usize));
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = LABELS_MAGIC.to_be_bytes().to_vec();
        b.extend((labels.len() as u32).to_be_bytes());
        b.extend(labels);
        b
    }

    #[test]
    fn parses_small_idx_and_normalizes() {
        let (x, n, d) = parse_idx_images(&idx_images(2, 3, 3, 255)).unwrap();
        assert_eq!((n, d), (2, 9));
        let expect = (1.0 - MNIST_MEAN) / MNIST_STD;
        assert!(x.iter().all(|&v| (v - expect).abs() < 1e-15));
        assert_eq!(parse_idx_labels(&idx_labels(&[3, 7])).unwrap(), vec![3, 7]);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let mut b = idx_images(2, 3, 3, 0);
        b.truncate(b.len() - 5);
        match parse_idx_images(&b) {
            Err(Error::TruncatedFile { offset, needed }) => {
                assert_eq!(offset, 16 + 13);
                assert_eq!(needed, 5);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_magic_rejected() {
        assert!(matches!(
            parse_idx_labels(&idx_images(1, 1, 1, 0)),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(parse_idx_images(&[0, 0]), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn count_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = (dir.path().join("i"), dir.path().join("l"));
        std::fs::write(&i, idx_images(3, 2, 2, 1)).unwrap();
        std::fs::write(&l, idx_labels(&[1, 2])).unwrap();
        assert!(matches!(
            load_mnist_idx(&i, &l),
            Err(Error::CountMismatch { images: 3, labels: 2 })
        ));
    }

    #[test]
    fn blobs_are_reproducible_and_balanced() {
        let centers = vec![vec![0.0, 0.0], vec![10.0, 0.0], vec![0.0, 10.0]];
        let (a, _) = synthetic_blobs(3000, &centers, 1.0, &mut RngStream::new(9)).unwrap();
        let (b, _) = synthetic_blobs(3000, &centers, 1.0, &mut RngStream::new(9)).unwrap();
        assert_eq!(a, b);
        let (n, p) = (3000.0, 1.0 / 3.0);
        let var = n * p * (1.0 - p);
        for c in a.class_histogram() {
            assert!((c as f64 - n * p).abs() <= 3.0 * var.sqrt());
        }
    }

    #[test]
    fn separated_blobs_are_linearly_separable() {
        // Centers 10·spread apart: the perpendicular bisector misclassifies
        // with probability Φ(−5) ≈ 3e-7.
        let centers = vec![vec![0.0, 0.0], vec![10.0, 0.0]];
        let (ds, _) = synthetic_blobs(5000, &centers, 1.0, &mut RngStream::new(2)).unwrap();
        let correct = (0..ds.len())
            .filter(|&i| (ds.row(i)[0] > 5.0) as usize == ds.labels[i])
            .count();
        assert!(correct as f64 / ds.len() as f64 >= 0.999);
    }

    #[test]
    fn noise_matches_reference_range() {
        let centers = vec![vec![0.0, 1.0, 2.0], vec![5.0, 1.0, -2.0]];
        let (ds, _) = synthetic_blobs(200, &centers, 0.5, &mut RngStream::new(3)).unwrap();
        let noise = uniform_noise_like(&ds, 50, &mut RngStream::new(4));
        assert_eq!(noise.dim, 3);
        assert_eq!(noise.len(), 50);
        let (lo, hi) = ds.min_max();
        assert!(noise.inputs.iter().all(|&v| v >= lo && v <= hi));
        assert_eq!(noise, uniform_noise_like(&ds, 50, &mut RngStream::new(4)));
    }

    #[test]
    fn split_partitions_rows() {
        let centers = vec![vec![0.0], vec![3.0]];
        let (ds, _) = synthetic_blobs(101, &centers, 0.5, &mut RngStream::new(5)).unwrap();
        let (tr, va) = train_val_split(&ds, 0.2, &mut RngStream::new(6));
        assert_eq!(tr.len() + va.len(), 101);
        assert_eq!(va.len(), 20);
        let (tr2, _) = train_val_split(&ds, 0.2, &mut RngStream::new(6));
        assert_eq!(tr, tr2);
    }
}
