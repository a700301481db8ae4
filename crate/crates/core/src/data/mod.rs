//! Image pools and the three-way dataset split.
//!
//! Training code only ever sees [`ImagePool`], which carries pixels and ids
//! and nothing else. Labels of the test set live in [`LabeledPool`]; the
//! anomaly flags of synthetic unlabeled pools are kept in
//! [`DatasetSpec::unlabeled_provenance`] for bookkeeping only.

mod ingest;
mod synthetic;

use ddad_autograd::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{DdadError, Result};

pub use ingest::{
    ingest_directory, ingest_test_pool, ingest_training_pools, read_image, read_pgm, read_png, resize_bilinear,
    write_pgm16, write_pgm8, GrayImage,
};
pub use synthetic::{export_dataset, generate_synthetic, synthesize_pair, SyntheticParams};

/// Side length every image is brought to.
pub const IMAGE_SIDE: usize = 64;

/// Unlabeled square grayscale images in `[0, 1]`, stored contiguously.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImagePool {
    side: usize,
    ids: Vec<String>,
    #[serde(skip)]
    pixels: Vec<f32>,
}

impl ImagePool {
    pub fn new(side: usize) -> Self {
        Self { side, ids: Vec::new(), pixels: Vec::new() }
    }

    pub fn push(&mut self, id: impl Into<String>, pixels: Vec<f32>) -> Result<()> {
        if pixels.len() != self.side * self.side {
            return Err(DdadError::Config(format!(
                "image has {} pixels, pool expects {}x{}",
                pixels.len(),
                self.side,
                self.side
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DdadError::Config(format!("pixel value {v} outside [0, 1]")));
        }
        self.ids.push(id.into());
        self.pixels.extend_from_slice(&pixels);
        Ok(())
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.side * self.side;
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// `self` followed by `other`.
    pub fn concat(&self, other: &ImagePool) -> Result<ImagePool> {
        if self.side != other.side && !self.is_empty() && !other.is_empty() {
            return Err(DdadError::Config("cannot concatenate pools of different sizes".into()));
        }
        let mut out = self.clone();
        out.ids.extend(other.ids.iter().cloned());
        out.pixels.extend_from_slice(&other.pixels);
        Ok(out)
    }

    /// Gathers the listed images into a `[n, 1, side, side]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<ImageBatch> {
        let mut pixels = Vec::with_capacity(indices.len() * self.side * self.side);
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(DdadError::Config(format!("image index {i} out of range")));
            }
            pixels.extend_from_slice(self.image(i));
            ids.push(self.ids[i].clone());
        }
        Ok(ImageBatch { pixels: Tensor::from_vec(pixels, &[indices.len(), 1, self.side, self.side])?, ids })
    }
}

/// A mini-batch ready for a forward pass.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    /// `[n, 1, side, side]`
    pub pixels: Tensor<f32>,
    pub ids: Vec<String>,
}

/// Images with binary labels (0 normal, 1 abnormal).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPool {
    pub images: ImagePool,
    pub labels: Vec<u8>,
}

impl LabeledPool {
    pub fn new(side: usize) -> Self {
        Self { images: ImagePool::new(side), labels: Vec::new() }
    }

    pub fn push(&mut self, id: impl Into<String>, pixels: Vec<f32>, label: u8) -> Result<()> {
        if label > 1 {
            return Err(DdadError::Config(format!("label {label} not in {{0, 1}}")));
        }
        self.images.push(id, pixels)?;
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Normal pool, unlabeled pool and labeled test set.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub normal: ImagePool,
    pub unlabeled: ImagePool,
    pub test: LabeledPool,
    /// True anomaly flag of each unlabeled image, when known (synthetic data).
    /// Never handed to training.
    pub unlabeled_provenance: Option<Vec<bool>>,
    /// Fraction of abnormal images in the unlabeled pool, when known.
    pub anomaly_rate: Option<f64>,
}

impl DatasetSpec {
    /// Pool for the normal-plus-unlabeled ensemble.
    pub fn combined_pool(&self) -> Result<ImagePool> {
        self.normal.concat(&self.unlabeled)
    }
}

/// Seeded permutation of `0..n` cut into consecutive batches; the last one may be short.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Shuffled mini-batches over `pool`.
pub fn batches(
    pool: &ImagePool,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<impl Iterator<Item = Result<ImageBatch>> + '_> {
    if pool.is_empty() {
        return Err(DdadError::Config("cannot batch an empty pool".into()));
    }
    if batch_size == 0 {
        return Err(DdadError::Config("batch size must be positive".into()));
    }
    Ok(batch_indices(pool.len(), batch_size, shuffle_seed).into_iter().map(move |idx| pool.batch(&idx)))
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(n: usize) -> ImagePool {
        let mut p = ImagePool::new(2);
        for i in 0..n {
            p.push(format!("img{i}"), vec![i as f32 / n as f32; 4]).unwrap();
        }
        p
    }

    #[test]
    fn batch_sizes_keep_last_partial() {
        let sizes: Vec<usize> = batches(&pool(10), 4, 7).unwrap().map(|b| b.unwrap().ids.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn same_seed_same_permutation() {
        assert_eq!(batch_indices(50, 8, 3), batch_indices(50, 8, 3));
        assert_ne!(batch_indices(50, 8, 3), batch_indices(50, 8, 4));
    }

    #[test]
    fn batches_cover_pool_once() {
        let p = pool(23);
        let mut ids: Vec<String> = batches(&p, 5, 11).unwrap().flat_map(|b| b.unwrap().ids).collect();
        ids.sort();
        let mut expected = p.ids().to_vec();
        expected.sort();
        assert_eq!(ids, expected);
    }

    #[test]
    fn empty_pool_is_rejected() {
        assert!(batches(&pool(0), 4, 0).is_err());
    }

    #[test]
    fn push_validates_pixels() {
        let mut p = ImagePool::new(2);
        assert!(p.push("a", vec![0.0; 3]).is_err());
        assert!(p.push("b", vec![1.5; 4]).is_err());
        let mut l = LabeledPool::new(2);
        assert!(l.push("c", vec![0.0; 4], 2).is_err());
    }

    #[test]
    fn training_pool_type_carries_no_labels() {
        // The pool handed to training serializes to exactly these fields.
        let json = serde_json::to_value(pool(1)).unwrap();
        let mut keys: Vec<&String> = json.as_object().unwrap().keys().collect();
        keys.sort();
        assert_eq!(keys, vec!["ids", "side"]);
    }
}
