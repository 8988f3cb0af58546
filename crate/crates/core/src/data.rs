//! Dataset ingestion and synthesis: IDX (MNIST-style) parsing, subset
//! selection, one-hot / even-odd target encoding, and synthetic sets for
//! tests that must not depend on data files being present.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::Mat;

const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
const IDX_MAGIC_LABELS: u32 = 0x0000_0801;

/// Conventional file names looked up under `--data-dir`.
pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// How integer labels were turned into regression/classification targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    /// N x C one-hot rows.
    OneHot,
    /// Scalar +1 for even digits, -1 for odd.
    EvenOdd,
}

impl std::str::FromStr for TargetMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "onehot" => Ok(TargetMode::OneHot),
            "even_odd" => Ok(TargetMode::EvenOdd),
            other => Err(Error::UnknownMode(other.into())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// N x d inputs; pixels scaled into [0, 1] for IDX sources.
    pub inputs: Mat,
    /// Integer class labels (0-9 for digit data), kept for error metrics
    /// and for re-encoding.
    pub labels: Vec<u8>,
    /// Encoded targets, N x C (C = 1 for even/odd), present after
    /// [`Dataset::encode_targets`].
    pub targets: Option<Mat>,
    pub target_mode: Option<TargetMode>,
    /// Split tag: "train", "test", "synthetic", ...
    pub name: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Per-class sample counts (for logging subset composition).
    pub fn class_counts(&self) -> Vec<usize> {
        let c = usize::from(self.labels.iter().copied().max().unwrap_or(0)) + 1;
        let mut counts = vec![0usize; c];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Load an images/labels IDX pair. Pixels are scaled by 1/255; labels
    /// stay as integers until a target encoding is chosen.
    pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
        let (n_images, dims, pixels) = read_idx(images_path, IDX_MAGIC_IMAGES)?;
        let (n_labels, _, labels) = read_idx(labels_path, IDX_MAGIC_LABELS)?;
        if n_images != n_labels {
            return Err(Error::IdxCountMismatch { images: n_images, labels: n_labels });
        }
        let d: usize = dims.iter().product();
        let inputs = Mat::from_vec(
            n_images,
            d,
            pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
        )?;
        Ok(Dataset {
            inputs,
            labels,
            targets: None,
            target_mode: None,
            name: images_path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "idx".into()),
        })
    }

    /// Load the train/test pair from a directory using the conventional
    /// file names.
    pub fn load_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
        let mut train = Dataset::load_idx(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?;
        let mut test = Dataset::load_idx(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?;
        train.name = "train".into();
        test.name = "test".into();
        Ok((train, test))
    }

    /// First `n` items of a seed-deterministic permutation.
    pub fn subset(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n > self.len() {
            return Err(Error::SubsetTooLarge { n, available: self.len() });
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx.truncate(n);
        Ok(self.take(&idx))
    }

    fn take(&self, idx: &[usize]) -> Dataset {
        let d = self.dim();
        let mut inputs = Mat::zeros(idx.len(), d);
        let mut labels = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            inputs.row_mut(r).copy_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        let targets = self.targets.as_ref().map(|t| {
            let mut out = Mat::zeros(idx.len(), t.cols());
            for (r, &i) in idx.iter().enumerate() {
                out.row_mut(r).copy_from_slice(t.row(i));
            }
            out
        });
        Dataset {
            inputs,
            labels,
            targets,
            target_mode: self.target_mode,
            name: self.name.clone(),
        }
    }

    /// Encode integer labels as training targets.
    pub fn encode_targets(&mut self, mode: TargetMode) -> Result<()> {
        if self.labels.len() != self.len() {
            return Err(Error::NoRawLabels);
        }
        let targets = match mode {
            TargetMode::OneHot => {
                let c = 10;
                let mut t = Mat::zeros(self.len(), c);
                for (i, &l) in self.labels.iter().enumerate() {
                    t[(i, l as usize)] = 1.0;
                }
                t
            }
            TargetMode::EvenOdd => {
                let mut t = Mat::zeros(self.len(), 1);
                for (i, &l) in self.labels.iter().enumerate() {
                    // even -> +1, odd -> -1
                    t[(i, 0)] = if l % 2 == 0 { 1.0 } else { -1.0 };
                }
                t
            }
        };
        self.targets = Some(targets);
        self.target_mode = Some(mode);
        Ok(())
    }

    /// Gaussian inputs x ~ N(0, I_d/d) with labels from a random linear
    /// teacher, encoded as +1/-1 (even/odd-like scalar regression).
    /// `feature_scale` multiplies the inputs; 1.0 gives unit-norm inputs on
    /// average, larger values mimic the input norms of raw pixel data.
    pub fn synthetic_teacher(n: usize, d: usize, seed: u64, feature_scale: f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let teacher: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut inputs = Mat::zeros(n, d);
        let mut labels = Vec::with_capacity(n);
        let mut targets = Mat::zeros(n, 1);
        let sd = feature_scale / (d as f64).sqrt();
        for i in 0..n {
            let row = inputs.row_mut(i);
            for x in row.iter_mut() {
                *x = sd * rng.sample::<f64, _>(StandardNormal);
            }
            let y = crate::linalg::dot(inputs.row(i), &teacher);
            let sign = if y >= 0.0 { 1.0 } else { -1.0 };
            targets[(i, 0)] = sign;
            // label parity mirrors the sign so class_counts and even/odd
            // re-encoding stay meaningful
            labels.push(if sign > 0.0 { 0 } else { 1 });
        }
        Dataset {
            inputs,
            labels,
            targets: Some(targets),
            target_mode: Some(TargetMode::EvenOdd),
            name: "synthetic".into(),
        }
    }

    /// Gaussian mixture with `classes` components for classification tests:
    /// x = mu_class + noise, both scaled so that |x| is O(feature_scale).
    pub fn synthetic_classes(
        n: usize,
        d: usize,
        classes: usize,
        noise: f64,
        seed: u64,
        feature_scale: f64,
    ) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = feature_scale / (d as f64).sqrt();
        let means: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..d).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let mut inputs = Mat::zeros(n, d);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = rng.random_range(0..classes) as u8;
            labels.push(c);
            let row = inputs.row_mut(i);
            for (j, x) in row.iter_mut().enumerate() {
                *x = means[c as usize][j] + noise * sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Dataset {
            inputs,
            labels,
            targets: None,
            target_mode: None,
            name: "synthetic".into(),
        }
    }
}

/// Parse one IDX file; returns (item count, per-item dims, payload bytes).
fn read_idx(path: &Path, expected_magic: u32) -> Result<(usize, Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    if bytes.len() < 4 {
        return Err(Error::IdxTruncated { path: path.into(), expected: 4, got: bytes.len() });
    }
    let magic = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    if magic != expected_magic {
        return Err(Error::IdxBadMagic { path: path.into(), expected: expected_magic, got: magic });
    }
    let ndims = (magic & 0xff) as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::IdxTruncated { path: path.into(), expected: header, got: bytes.len() });
    }
    let mut dims = Vec::with_capacity(ndims);
    for i in 0..ndims {
        let off = 4 + 4 * i;
        dims.push(u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let n = dims[0];
    let item: usize = dims[1..].iter().product::<usize>().max(1);
    let expected = header + n * item;
    if bytes.len() != expected {
        return Err(Error::IdxTruncated { path: path.into(), expected, got: bytes.len() });
    }
    Ok((n, dims[1..].to_vec(), bytes[header..].to_vec()))
}

/// Write an images/labels IDX pair (testing and fixture generation).
pub fn write_idx_pair(
    images_path: &Path,
    labels_path: &Path,
    images: &[Vec<u8>],
    rows: usize,
    cols: usize,
    labels: &[u8],
) -> Result<()> {
    assert_eq!(images.len(), labels.len());
    let mut img = Vec::with_capacity(16 + images.len() * rows * cols);
    img.extend_from_slice(&IDX_MAGIC_IMAGES.to_be_bytes());
    img.extend_from_slice(&(images.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for im in images {
        assert_eq!(im.len(), rows * cols);
        img.extend_from_slice(im);
    }
    fs::write(images_path, img)?;

    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&IDX_MAGIC_LABELS.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    fs::write(labels_path, lab)?;
    Ok(())
}

/// Locate a digits data directory: `$L2FLOW_DATA_DIR`, then `./data`, then
/// the repository fixtures. Returns the first directory containing the
/// conventional IDX file names.
pub fn find_data_dir() -> Option<PathBuf> {
    let mut candidates: Vec<PathBuf> = Vec::new();
    if let Ok(env_dir) = std::env::var("L2FLOW_DATA_DIR") {
        candidates.push(PathBuf::from(env_dir));
    }
    candidates.push(PathBuf::from("data"));
    if let Ok(manifest) = std::env::var("CARGO_MANIFEST_DIR") {
        let ws = PathBuf::from(manifest);
        candidates.push(ws.join("fixtures/digits"));
        if let Some(parent) = ws.parent().and_then(|p| p.parent()) {
            candidates.push(parent.join("data"));
            candidates.push(parent.join("crates/core/fixtures/digits"));
        }
    }
    candidates
        .into_iter()
        .find(|dir| dir.join(TRAIN_IMAGES).is_file() && dir.join(TRAIN_LABELS).is_file())
}
