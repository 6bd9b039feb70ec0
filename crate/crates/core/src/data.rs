//! Desk-scale datasets: Gaussian blobs, IDX image files, splits and label noise.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SidError};
use crate::math::Mat;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Full,
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Mat,
    pub labels: Vec<usize>,
    pub m: usize,
    pub split: SplitTag,
}

impl Dataset {
    pub fn new(features: Mat, labels: Vec<usize>, m: usize, split: SplitTag) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(SidError::dim(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(SidError::input("dataset is empty"));
        }
        if m < 2 {
            return Err(SidError::input("need at least two classes"));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= m) {
            return Err(SidError::input(format!(
                "label {y} out of range for {m} classes"
            )));
        }
        if !features.is_finite() {
            return Err(SidError::input("non-finite feature"));
        }
        Ok(Dataset {
            features,
            labels,
            m,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize], split: SplitTag) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            m: self.m,
            split,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.m];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Header `f0..f{d-1},label`, one row per sample.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        writeln!(w, "{}", header.join(","))?;
        for (row, y) in self.features.iter_rows().zip(&self.labels) {
            let mut fields: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            fields.push(y.to_string());
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

/// Cluster centres with pairwise distance `separation`: vertices of a regular
/// simplex when `d >= m - 1`, otherwise evenly spaced along the first axis.
pub fn blob_centres(m: usize, d: usize, separation: f64) -> Vec<Vec<f64>> {
    let mut centres = vec![vec![0.0; d]; m];
    if d + 1 >= m {
        // Helmert basis of the sum-zero subspace: u_j = (1,..,1, -j, 0,..) / sqrt(j(j+1)).
        let scale = separation / std::f64::consts::SQRT_2;
        for j in 1..m {
            let norm = ((j * (j + 1)) as f64).sqrt();
            for (k, c) in centres.iter_mut().enumerate() {
                let u = match k.cmp(&j) {
                    std::cmp::Ordering::Less => 1.0,
                    std::cmp::Ordering::Equal => -(j as f64),
                    std::cmp::Ordering::Greater => 0.0,
                };
                c[j - 1] = scale * u / norm;
            }
        }
    } else {
        let mid = (m - 1) as f64 / 2.0;
        for (k, c) in centres.iter_mut().enumerate() {
            c[0] = (k as f64 - mid) * separation;
        }
    }
    centres
}

/// `m` unit-covariance Gaussian clusters, balanced labels (`i mod m`).
pub fn make_blobs(n: usize, m: usize, d: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if m < 2 || n < m || d == 0 {
        return Err(SidError::input(format!(
            "make_blobs needs m >= 2, n >= m, d >= 1 (got n={n}, m={m}, d={d})"
        )));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(SidError::input(format!(
            "separation {separation} must be finite and >= 0"
        )));
    }
    let centres = blob_centres(m, d, separation);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % m;
        for c in &centres[y] {
            let e: f64 = rng.sample(StandardNormal);
            data.push(c + e);
        }
        labels.push(y);
    }
    Dataset::new(Mat::from_vec(n, d, data)?, labels, m, SplitTag::Full)
}

/// Deterministic shuffled split into disjoint, exhaustive train/test parts.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(SidError::input(format!(
            "train_fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let n = ds.len();
    if n < 2 {
        return Err(SidError::input("cannot split fewer than two samples"));
    }
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((
        ds.subset(&idx[..n_train], SplitTag::Train),
        ds.subset(&idx[n_train..], SplitTag::Test),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub rate: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(SidError::input(format!("noise rate {rate} not in [0, 1]")));
        }
        Ok(NoiseSpec { rate, seed })
    }
}

/// Symmetric label noise: each sample is selected with probability `rate`
/// and its label redrawn uniformly among the other `m - 1` classes.
pub fn inject_label_noise(ds: &Dataset, noise: &NoiseSpec) -> Result<Dataset> {
    NoiseSpec::new(noise.rate, noise.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let mut out = ds.clone();
    for y in &mut out.labels {
        let flip = rng.random::<f64>() < noise.rate;
        if flip {
            let r = rng.random_range(0..ds.m - 1);
            *y = if r < *y { r } else { r + 1 };
        }
    }
    Ok(out)
}

/// Raw IDX image tensor (`u8`, count x rows x cols).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxLabels {
    pub labels: Vec<u8>,
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| SidError::Format {
            offset,
            msg: format!(
                "file truncated: need 4 bytes, have {}",
                bytes.len().saturating_sub(offset)
            ),
        })
}

impl IdxImages {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let magic = read_be_u32(bytes, 0)?;
        if magic != IDX_IMAGES_MAGIC {
            return Err(SidError::Format {
                offset: 0,
                msg: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
            });
        }
        let count = read_be_u32(bytes, 4)? as usize;
        let rows = read_be_u32(bytes, 8)? as usize;
        let cols = read_be_u32(bytes, 12)? as usize;
        let need = count * rows * cols;
        let body = &bytes[16..];
        if body.len() < need {
            return Err(SidError::Format {
                offset: 16 + body.len(),
                msg: format!(
                    "image data truncated: need {need} bytes, have {}",
                    body.len()
                ),
            });
        }
        if body.len() > need {
            return Err(SidError::Format {
                offset: 16 + need,
                msg: "trailing bytes after image data".into(),
            });
        }
        Ok(IdxImages {
            count,
            rows,
            cols,
            pixels: body.to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.pixels.len());
        for v in [
            IDX_IMAGES_MAGIC,
            self.count as u32,
            self.rows as u32,
            self.cols as u32,
        ] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out
    }
}

impl IdxLabels {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let magic = read_be_u32(bytes, 0)?;
        if magic != IDX_LABELS_MAGIC {
            return Err(SidError::Format {
                offset: 0,
                msg: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
            });
        }
        let count = read_be_u32(bytes, 4)? as usize;
        let body = &bytes[8..];
        if body.len() < count {
            return Err(SidError::Format {
                offset: 8 + body.len(),
                msg: format!(
                    "label data truncated: need {count} bytes, have {}",
                    body.len()
                ),
            });
        }
        if body.len() > count {
            return Err(SidError::Format {
                offset: 8 + count,
                msg: "trailing bytes after label data".into(),
            });
        }
        Ok(IdxLabels {
            labels: body.to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.labels.len());
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(self.labels.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.labels);
        out
    }
}

/// Builds a dataset from parsed IDX files, scaling pixels to `[0, 1]`.
pub fn dataset_from_idx(images: &IdxImages, labels: &IdxLabels) -> Result<Dataset> {
    if images.count != labels.labels.len() {
        return Err(SidError::Format {
            offset: 4,
            msg: format!("{} images but {} labels", images.count, labels.labels.len()),
        });
    }
    let d = images.rows * images.cols;
    let data = images.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let ys: Vec<usize> = labels.labels.iter().map(|&y| y as usize).collect();
    let m = ys.iter().copied().max().unwrap_or(0).max(1) + 1;
    Dataset::new(Mat::from_vec(images.count, d, data)?, ys, m, SplitTag::Full)
}

/// Reads an IDX image/label file pair. Pixels are scaled to `[0, 1]`;
/// standardize with [`Standardizer`] fitted on the training split.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = IdxImages::parse(&std::fs::read(images_path)?)?;
    let labels = IdxLabels::parse(&std::fs::read(labels_path)?)?;
    dataset_from_idx(&images, &labels)
}

/// Single-channel standardization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    pub fn fit(train: &Dataset) -> Self {
        let v = train.features.as_slice();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Standardizer { mean, std }
    }

    pub fn apply(&self, ds: &Dataset) -> Dataset {
        let mut out = ds.clone();
        let (mean, std) = (self.mean, self.std);
        out.features = ds.features.map(|x| (x - mean) / std);
        out
    }
}
