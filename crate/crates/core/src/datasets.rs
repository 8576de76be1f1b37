//! Labeled datasets, IDX ingestion, synthetic blobs and the quantity-skewed
//! label partitioner that produces per-learner shards.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::LearnerId;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Row-major feature matrix with one class label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    feature_dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, feature_dim: usize, num_classes: usize) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::InvalidParam("feature_dim must be positive".into()));
        }
        if features.len() != labels.len() * feature_dim {
            return Err(Error::ShapeMismatch {
                expected: labels.len() * feature_dim,
                found: features.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidParam(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            feature_dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Copies the selected rows, in order, into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.feature_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.features(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            labels,
            feature_dim: self.feature_dim,
            num_classes: self.num_classes,
        }
    }

    /// Indices of every sample, grouped by class.
    pub fn class_pools(&self) -> Vec<Vec<usize>> {
        let mut pools = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            pools[l].push(i);
        }
        pools
    }
}

/// One learner's private data.
#[derive(Clone, Debug)]
pub struct Shard {
    pub owner_id: LearnerId,
    pub train: Dataset,
    pub test: Dataset,
    pub classes_present: BTreeSet<usize>,
    /// Row indices into the source dataset, kept for disjointness audits.
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.train_ids.iter().chain(&self.test_ids).copied()
    }
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    let chunk = bytes.get(offset..offset + 4).ok_or(Error::TruncatedFile {
        needed: offset + 4,
        found: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("4-byte slice")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = read_u32_be(bytes, 0)?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

/// Parses an IDX image/label pair held in memory.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    check_magic(images, IDX_IMAGE_MAGIC)?;
    check_magic(labels, IDX_LABEL_MAGIC)?;
    let count = read_u32_be(images, 4)? as usize;
    let rows = read_u32_be(images, 8)? as usize;
    let cols = read_u32_be(images, 12)? as usize;
    let label_count = read_u32_be(labels, 4)? as usize;
    if count != label_count {
        return Err(Error::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let dim = rows * cols;
    let pixels = images.get(16..16 + count * dim).ok_or(Error::TruncatedFile {
        needed: 16 + count * dim,
        found: images.len(),
    })?;
    let raw_labels = labels.get(8..8 + count).ok_or(Error::TruncatedFile {
        needed: 8 + count,
        found: labels.len(),
    })?;
    if count == 0 {
        return Err(Error::InvalidParam("IDX files contain no samples".into()));
    }
    let features = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| usize::from(l)).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(features, labels, dim, num_classes)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    parse_idx(&images, &labels)
}

/// Encodes a dataset as an IDX pair. Features are mapped back to bytes with
/// `round(x * 255)`, so only datasets whose features are multiples of 1/255
/// survive a round-trip unchanged.
pub fn encode_idx(ds: &Dataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols != ds.feature_dim {
        return Err(Error::ShapeMismatch {
            expected: ds.feature_dim,
            found: rows * cols,
        });
    }
    if ds.num_classes > 256 {
        return Err(Error::InvalidParam("IDX labels are single bytes".into()));
    }
    let mut images = Vec::with_capacity(16 + ds.features.len());
    images.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    images.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    images.extend_from_slice(&(rows as u32).to_be_bytes());
    images.extend_from_slice(&(cols as u32).to_be_bytes());
    images.extend(ds.features.iter().map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    labels.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((images, labels))
}

pub fn write_idx(ds: &Dataset, rows: usize, cols: usize, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (images, labels) = encode_idx(ds, rows, cols)?;
    fs::write(images_path, images).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, labels).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}

/// Isotropic Gaussian blobs, one per class, with centers drawn from a
/// standard normal under the same seed. Samples are stored class-major.
pub fn synth_blobs(num_classes: usize, per_class: usize, feature_dim: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::InvalidParam("num_classes must be at least 2".into()));
    }
    if per_class == 0 || feature_dim == 0 {
        return Err(Error::InvalidParam("per_class and feature_dim must be positive".into()));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParam(format!("sigma must be positive, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<f64> = (0..num_classes * feature_dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut features = Vec::with_capacity(num_classes * per_class * feature_dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for c in 0..num_classes {
        let center = &centers[c * feature_dim..(c + 1) * feature_dim];
        for _ in 0..per_class {
            features.extend(
                center
                    .iter()
                    .map(|&mu| mu + sigma * rng.sample::<f64, _>(StandardNormal)),
            );
            labels.push(c);
        }
    }
    Dataset::new(features, labels, feature_dim, num_classes)
}

/// Draws a symmetric Dirichlet(alpha) weight vector via normalized gammas.
fn dirichlet_weights(k: usize, alpha: f64, rng: &mut impl Rng) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let mut w: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = w.iter().sum();
    if total > 0.0 && total.is_finite() {
        w.iter_mut().for_each(|x| *x /= total);
    } else {
        w.iter_mut().for_each(|x| *x = 1.0 / k as f64);
    }
    w
}

/// Quantity-based label skew: each learner draws `classes_per_device`
/// distinct classes, then every class pool is split among the learners that
/// drew it with Dirichlet(`concentration`) proportions and at least one sample
/// each. Each shard is shuffled and split 90/10 into train/test, with the test
/// size rounded down but never below one sample.
pub fn partition_quantity_label(
    ds: &Dataset,
    num_learners: usize,
    classes_per_device: usize,
    concentration: f64,
    seed: u64,
) -> Result<Vec<Shard>> {
    if num_learners == 0 {
        return Err(Error::InvalidParam("num_learners must be at least 1".into()));
    }
    if classes_per_device == 0 || classes_per_device > ds.num_classes() {
        return Err(Error::InvalidParam(format!(
            "classes_per_device must be in 1..={}, got {classes_per_device}",
            ds.num_classes()
        )));
    }
    if !(concentration > 0.0) {
        return Err(Error::InvalidParam("Dirichlet concentration must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<BTreeSet<usize>> = (0..num_learners)
        .map(|_| {
            rand::seq::index::sample(&mut rng, ds.num_classes(), classes_per_device)
                .into_iter()
                .collect()
        })
        .collect();

    let mut owned: Vec<Vec<usize>> = vec![Vec::new(); num_learners];
    for (class, mut pool) in ds.class_pools().into_iter().enumerate() {
        let takers: Vec<usize> = (0..num_learners).filter(|&l| classes[l].contains(&class)).collect();
        if takers.is_empty() {
            continue;
        }
        if takers.len() > pool.len() {
            return Err(Error::Infeasible(format!(
                "class {class} has {} samples for {} learners",
                pool.len(),
                takers.len()
            )));
        }
        pool.shuffle(&mut rng);
        let weights = dirichlet_weights(takers.len(), concentration, &mut rng);
        let spare = pool.len() - takers.len();
        let mut cursor = 0;
        for (&learner, w) in takers.iter().zip(&weights) {
            let take = 1 + (w * spare as f64).floor() as usize;
            owned[learner].extend_from_slice(&pool[cursor..cursor + take]);
            cursor += take;
        }
    }

    Ok(owned
        .into_iter()
        .zip(classes)
        .enumerate()
        .map(|(owner_id, (mut ids, classes_present))| {
            ids.shuffle(&mut rng);
            let test_len = (ids.len() / 10).max(1);
            let test_ids = ids.split_off(ids.len() - test_len);
            Shard {
                owner_id,
                train: ds.subset(&ids),
                test: ds.subset(&test_ids),
                classes_present,
                train_ids: ids,
                test_ids,
            }
        })
        .collect())
}
