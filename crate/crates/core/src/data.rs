//! Synthetic datasets and the two-view augmentation pipeline.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::networks::write_atomic;
use crate::rng::Prng;

/// Fraction of samples assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

/// Labelled samples; rows `0..n_train` are the training split, the rest test.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Tensor,
    labels: Vec<usize>,
    n_classes: usize,
    n_train: usize,
}

impl Dataset {
    pub fn new(samples: Tensor, labels: Vec<usize>, n_classes: usize, n_train: usize) -> Result<Self> {
        if samples.shape().len() != 2 || samples.rows() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} labels for samples of shape {:?}",
                labels.len(),
                samples.shape()
            )));
        }
        if n_train > labels.len() {
            return Err(Error::Dataset(format!(
                "split boundary {n_train} beyond {} samples",
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Dataset(format!("label {l} outside 0..{n_classes}")));
        }
        Ok(Self {
            samples,
            labels,
            n_classes,
            n_train,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn train_samples(&self) -> Tensor {
        self.samples
            .gather_rows(&(0..self.n_train).collect::<Vec<_>>())
    }

    pub fn test_samples(&self) -> Tensor {
        self.samples
            .gather_rows(&(self.n_train..self.len()).collect::<Vec<_>>())
    }

    pub fn train_labels(&self) -> &[usize] {
        &self.labels[..self.n_train]
    }

    pub fn test_labels(&self) -> &[usize] {
        &self.labels[self.n_train..]
    }

    /// Write `data.bin` and `meta.json` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bytes: Vec<u8> = self
            .samples
            .data()
            .iter()
            .flat_map(|&x| (x as f32).to_le_bytes())
            .collect();
        let meta = DatasetMeta {
            n: self.len(),
            input_dim: self.input_dim(),
            k: self.n_classes,
            labels: self.labels.clone(),
            splits: Splits {
                train: [0, self.n_train],
                test: [self.n_train, self.len()],
            },
        };
        write_atomic(&dir.join(DATA_FILE), &bytes)?;
        write_atomic(
            &dir.join(META_FILE),
            &serde_json::to_vec_pretty(&meta).expect("meta serializes"),
        )
    }

    /// Read a dataset written by [`Dataset::export`].
    pub fn import(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let text = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta =
            serde_json::from_slice(&text).map_err(|e| Error::json(&meta_path, e))?;
        let data_path = dir.join(DATA_FILE);
        let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
        if bytes.len() != meta.n * meta.input_dim * 4 || meta.labels.len() != meta.n {
            return Err(Error::Dataset(format!(
                "{}: expected {}×{} f32 values and {} labels",
                dir.display(),
                meta.n,
                meta.input_dim,
                meta.n
            )));
        }
        if meta.splits.train != [0, meta.splits.test[0]] || meta.splits.test[1] != meta.n {
            return Err(Error::Dataset(format!(
                "{}: splits must be contiguous train then test",
                meta_path.display()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let samples = Tensor::matrix(meta.n, meta.input_dim, data)?;
        Self::new(samples, meta.labels, meta.k, meta.splits.train[1])
    }
}

pub const DATA_FILE: &str = "data.bin";
pub const META_FILE: &str = "meta.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Splits {
    train: [usize; 2],
    test: [usize; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DatasetMeta {
    n: usize,
    input_dim: usize,
    k: usize,
    labels: Vec<usize>,
    splits: Splits,
}

fn balanced_labels(k: usize, n: usize) -> Result<Vec<usize>> {
    if !n.is_multiple_of(k) {
        return Err(Error::Dataset(format!(
            "{n} samples cannot be split evenly over {k} classes"
        )));
    }
    Ok((0..n).map(|i| i % k).collect())
}

fn assemble(rows: Vec<Vec<f64>>, labels: Vec<usize>, k: usize, rng: &mut Prng) -> Result<Dataset> {
    let n = labels.len();
    let d = rows[0].len();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut data = Vec::with_capacity(n * d);
    let mut shuffled = Vec::with_capacity(n);
    for &i in &order {
        data.extend_from_slice(&rows[i]);
        shuffled.push(labels[i]);
    }
    let n_train = (n as f64 * TRAIN_FRACTION).round() as usize;
    Dataset::new(Tensor::matrix(n, d, data)?, shuffled, k, n_train)
}

fn unit_vector(d: usize, rng: &mut Prng) -> Vec<f64> {
    loop {
        let v = rng.normal_vec(d);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Random unit-norm class centers, pairwise at least `min_sep` apart.
pub fn blob_centers(k: usize, d: usize, min_sep: f64, rng: &mut Prng) -> Result<Vec<Vec<f64>>> {
    const RETRIES: usize = 100;
    for _ in 0..RETRIES {
        let centers: Vec<Vec<f64>> = (0..k).map(|_| unit_vector(d, rng)).collect();
        let ok = (0..k).all(|i| {
            (i + 1..k).all(|j| {
                let dist = centers[i]
                    .iter()
                    .zip(&centers[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                dist >= min_sep
            })
        });
        if ok {
            return Ok(centers);
        }
    }
    Err(Error::Dataset(format!(
        "no {k} unit centers in {d} dimensions separated by {min_sep} after {RETRIES} tries"
    )))
}

/// `k` isotropic Gaussian clusters of standard deviation `spread` around unit
/// centers that are at least `4·spread` apart.
pub fn make_blobs(k: usize, d: usize, n: usize, spread: f64, rng: &mut Prng) -> Result<Dataset> {
    if k < 2 || d < 2 {
        return Err(Error::Dataset(format!("blobs need k ≥ 2 and d ≥ 2, got k={k}, d={d}")));
    }
    if !(spread >= 0.0) {
        return Err(Error::Dataset(format!("spread must be non-negative, got {spread}")));
    }
    let labels = balanced_labels(k, n)?;
    let centers = blob_centers(k, d, 4.0 * spread, rng)?;
    let rows = labels
        .iter()
        .map(|&c| centers[c].iter().map(|m| m + spread * rng.normal()).collect())
        .collect();
    assemble(rows, labels, k, rng)
}

/// Random `d × 2` matrix with orthonormal columns.
fn orthonormal_pair(d: usize, rng: &mut Prng) -> [Vec<f64>; 2] {
    let u = unit_vector(d, rng);
    loop {
        let mut v = rng.normal_vec(d);
        let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(&u).for_each(|(x, a)| *x -= dot * a);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            return [u, v];
        }
    }
}

/// Concentric 2-D rings of radius `1..=k` with radial noise, embedded into
/// `input_dim` dimensions through a fixed random orthonormal map.
pub fn make_rings(k: usize, n: usize, noise: f64, input_dim: usize, rng: &mut Prng) -> Result<Dataset> {
    if k < 2 || input_dim < 2 {
        return Err(Error::Dataset(format!(
            "rings need k ≥ 2 and input_dim ≥ 2, got k={k}, input_dim={input_dim}"
        )));
    }
    let labels = balanced_labels(k, n)?;
    let [u, v] = orthonormal_pair(input_dim, rng);
    let rows = labels
        .iter()
        .map(|&c| {
            let theta = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
            let r = (c + 1) as f64 + noise * rng.normal();
            let (p, q) = (r * theta.cos(), r * theta.sin());
            u.iter().zip(&v).map(|(a, b)| p * a + q * b).collect()
        })
        .collect();
    assemble(rows, labels, k, rng)
}

/// Strengths of the vector-space augmentations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Standard deviation of additive Gaussian noise.
    pub noise_std: f64,
    /// Per-coordinate probability of zeroing.
    pub mask_p: f64,
    /// Global scale drawn from `[1 − j, 1 + j)`.
    pub scale_jitter: f64,
    /// Probability of negating the fixed flip subset.
    pub flip_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.1,
            mask_p: 0.1,
            scale_jitter: 0.1,
            flip_p: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Every augmentation switched off.
    pub fn identity() -> Self {
        Self {
            noise_std: 0.0,
            mask_p: 0.0,
            scale_jitter: 0.0,
            flip_p: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("augment.{name} must lie in [0, 1], got {p}")))
            }
        };
        unit("mask_p", self.mask_p)?;
        unit("flip_p", self.flip_p)?;
        unit("scale_jitter", self.scale_jitter)?;
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!(
                "augment.noise_std must be non-negative, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// Augmentation pipeline with its fixed sign-flip coordinate subset.
#[derive(Clone, Debug)]
pub struct Augmenter {
    cfg: AugmentConfig,
    flip_coords: Vec<usize>,
}

impl Augmenter {
    pub fn new(cfg: AugmentConfig, input_dim: usize, rng: &mut Prng) -> Result<Self> {
        cfg.validate()?;
        let flip_coords = (0..input_dim).filter(|_| rng.bernoulli(0.5)).collect();
        Ok(Self { cfg, flip_coords })
    }

    pub fn config(&self) -> &AugmentConfig {
        &self.cfg
    }

    fn view(&self, batch: &Tensor, rng: &mut Prng) -> Tensor {
        let cols = batch.cols();
        let mut out = batch.clone();
        for r in 0..batch.rows() {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            if self.cfg.noise_std > 0.0 {
                row.iter_mut()
                    .for_each(|x| *x += self.cfg.noise_std * rng.normal());
            }
            if self.cfg.mask_p > 0.0 {
                row.iter_mut().for_each(|x| {
                    if rng.bernoulli(self.cfg.mask_p) {
                        *x = 0.0;
                    }
                });
            }
            if self.cfg.scale_jitter > 0.0 {
                let j = self.cfg.scale_jitter;
                let u = rng.uniform_range(1.0 - j, 1.0 + j);
                row.iter_mut().for_each(|x| *x *= u);
            }
            if self.cfg.flip_p > 0.0 && rng.bernoulli(self.cfg.flip_p) {
                for &c in &self.flip_coords {
                    row[c] = -row[c];
                }
            }
        }
        out
    }
}

/// Two independently augmented views of the same rows. Carries no labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub x1: Tensor,
    pub x2: Tensor,
    pub indices: Vec<usize>,
}

impl ViewBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn augment_two_views(
    batch: &Tensor,
    indices: Vec<usize>,
    aug: &Augmenter,
    rng: &mut Prng,
) -> ViewBatch {
    assert_eq!(batch.rows(), indices.len());
    let x1 = aug.view(batch, rng);
    let x2 = aug.view(batch, rng);
    ViewBatch { x1, x2, indices }
}
