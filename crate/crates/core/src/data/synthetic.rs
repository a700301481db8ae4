//! Deterministic synthetic stand-in for a screening dataset.
//!
//! A normal image is a smooth field (base level, gentle gradient and one or
//! two Gaussian bumps) plus pixel noise whose standard deviation is drawn
//! per image from `[0, 0.2)`. Noisy normals are hard to reconstruct, which
//! keeps plain reconstruction error a weak anomaly score. An
//! abnormal image is a normal image with one high-contrast rectangular or
//! elliptic patch, 8 to 16 pixels per side, at a random position.
//!
//! Each image draws from its own RNG stream derived from `(seed, pool, index)`,
//! so the base fields of the unlabeled pool are the same for every anomaly
//! rate; only which images receive a patch changes.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{mix_seed, write_pgm16, DatasetSpec, ImagePool, LabeledPool, IMAGE_SIDE};
use crate::error::{DdadError, Result};

const POOL_NORMAL: u64 = 1;
const POOL_UNLABELED: u64 = 2;
const POOL_TEST_NORMAL: u64 = 3;
const POOL_TEST_ABNORMAL: u64 = 4;
const SELECT_STREAM: u64 = 5;
const PATCH_STREAM: u64 = 0x5A7C;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub n_normal: usize,
    pub m_unlabeled: usize,
    /// fraction of abnormal images in the unlabeled pool
    pub anomaly_rate: f64,
    pub t_normal: usize,
    pub t_abnormal: usize,
    pub seed: u64,
}

impl SyntheticParams {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.anomaly_rate) {
            return Err(DdadError::Config(format!("anomaly rate {} outside [0, 1]", self.anomaly_rate)));
        }
        Ok(())
    }

    /// `round(AR * M)`.
    pub fn abnormal_unlabeled(&self) -> usize {
        (self.anomaly_rate * self.m_unlabeled as f64).round() as usize
    }
}

fn image_rng(seed: u64, pool: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, pool), index as u64))
}

/// Smooth field plus per-image noise.
fn normal_image(rng: &mut ChaCha8Rng, side: usize) -> Vec<f32> {
    let s = side as f64;
    let base = rng.gen_range(0.3..0.5);
    let gx = rng.gen_range(-0.15..0.15);
    let gy = rng.gen_range(-0.15..0.15);
    let bumps: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(1..=2))
        .map(|_| {
            (
                rng.gen_range(0.15..0.85) * s,
                rng.gen_range(0.15..0.85) * s,
                rng.gen_range(0.08..0.2) * s,
                rng.gen_range(-0.2..0.25),
            )
        })
        .collect();
    let noise_sigma = rng.gen_range(0.0..0.2);
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (u, v) = (x as f64 / s - 0.5, y as f64 / s - 0.5);
            let mut val = base + gx * u + gy * v;
            for &(cx, cy, w, a) in &bumps {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                val += a * (-d2 / (2.0 * w * w)).exp();
            }
            let z: f64 = StandardNormal.sample(rng);
            out.push((val + noise_sigma * z).clamp(0.0, 1.0) as f32);
        }
    }
    out
}

/// Adds one patch. Brightens unless that would saturate, then darkens.
fn insert_patch(rng: &mut ChaCha8Rng, img: &mut [f32], side: usize) {
    let w = rng.gen_range(8..=16usize);
    let h = rng.gen_range(8..=16usize);
    let x0 = rng.gen_range(0..=side - w);
    let y0 = rng.gen_range(0..=side - h);
    let elliptic = rng.gen_bool(0.5);
    let delta = rng.gen_range(0.3..0.45f32);
    let inside = |x: usize, y: usize| {
        if !elliptic {
            return true;
        }
        let dx = (x as f32 + 0.5 - w as f32 / 2.0) / (w as f32 / 2.0);
        let dy = (y as f32 + 0.5 - h as f32 / 2.0) / (h as f32 / 2.0);
        dx * dx + dy * dy <= 1.0
    };
    let mut sum = 0.0;
    let mut count = 0;
    for y in 0..h {
        for x in 0..w {
            if inside(x, y) {
                sum += img[(y0 + y) * side + x0 + x];
                count += 1;
            }
        }
    }
    let mean = sum / count as f32;
    let signed = if mean + delta <= 0.9 { delta } else { -delta };
    for y in 0..h {
        for x in 0..w {
            if inside(x, y) {
                let p = &mut img[(y0 + y) * side + x0 + x];
                *p = (*p + signed).clamp(0.0, 1.0);
            }
        }
    }
}

/// Base normal image and its patched counterpart for one RNG stream.
pub fn synthesize_pair(seed: u64, index: usize) -> (Vec<f32>, Vec<f32>) {
    let normal = normal_image(&mut image_rng(seed, POOL_TEST_ABNORMAL, index), IMAGE_SIDE);
    let mut abnormal = normal.clone();
    insert_patch(&mut image_rng(seed, PATCH_STREAM, index), &mut abnormal, IMAGE_SIDE);
    (normal, abnormal)
}

fn unlabeled_image(seed: u64, index: usize, abnormal: bool) -> Vec<f32> {
    let mut img = normal_image(&mut image_rng(seed, POOL_UNLABELED, index), IMAGE_SIDE);
    if abnormal {
        let patch_seed = mix_seed(seed, POOL_UNLABELED);
        insert_patch(&mut image_rng(patch_seed, PATCH_STREAM, index), &mut img, IMAGE_SIDE);
    }
    img
}

/// Builds all three pools. Exactly `round(AR * M)` unlabeled images are abnormal.
pub fn generate_synthetic(params: &SyntheticParams) -> Result<DatasetSpec> {
    params.validate()?;
    let seed = params.seed;

    let mut normal = ImagePool::new(IMAGE_SIDE);
    for i in 0..params.n_normal {
        normal.push(format!("normal/{i:05}"), normal_image(&mut image_rng(seed, POOL_NORMAL, i), IMAGE_SIDE))?;
    }

    let mut order: Vec<usize> = (0..params.m_unlabeled).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, SELECT_STREAM)));
    let mut flags = vec![false; params.m_unlabeled];
    for &i in &order[..params.abnormal_unlabeled()] {
        flags[i] = true;
    }
    let mut unlabeled = ImagePool::new(IMAGE_SIDE);
    for (i, &flag) in flags.iter().enumerate() {
        unlabeled.push(format!("unlabeled/{i:05}"), unlabeled_image(seed, i, flag))?;
    }

    let mut test = LabeledPool::new(IMAGE_SIDE);
    for i in 0..params.t_normal {
        test.push(
            format!("test/normal/{i:05}"),
            normal_image(&mut image_rng(seed, POOL_TEST_NORMAL, i), IMAGE_SIDE),
            0,
        )?;
    }
    for i in 0..params.t_abnormal {
        test.push(format!("test/abnormal/{i:05}"), synthesize_pair(seed, i).1, 1)?;
    }

    Ok(DatasetSpec {
        normal,
        unlabeled,
        test,
        unlabeled_provenance: Some(flags),
        anomaly_rate: Some(params.anomaly_rate),
    })
}

/// Writes a dataset in the directory layout read by
/// [`ingest_directory`](super::ingest_directory), as 16-bit PGM files.
///
/// Known unlabeled anomaly flags go to `provenance.csv` at the root, which
/// ingestion never reads.
pub fn export_dataset(spec: &DatasetSpec, root: &Path) -> Result<()> {
    for dir in ["normal", "unlabeled", "test/normal", "test/abnormal"] {
        fs::create_dir_all(root.join(dir))?;
    }
    let side = spec.normal.side();
    let write_pool = |pool: &ImagePool| -> Result<()> {
        for (i, id) in pool.ids().iter().enumerate() {
            write_pgm16(&root.join(format!("{id}.pgm")), side, side, pool.image(i))?;
        }
        Ok(())
    };
    write_pool(&spec.normal)?;
    write_pool(&spec.unlabeled)?;
    write_pool(&spec.test.images)?;
    if let Some(flags) = &spec.unlabeled_provenance {
        let mut f = fs::File::create(root.join("provenance.csv"))?;
        writeln!(f, "id,abnormal")?;
        for (id, flag) in spec.unlabeled.ids().iter().zip(flags) {
            writeln!(f, "{id}.pgm,{}", u8::from(*flag))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(ar: f64, m: usize) -> SyntheticParams {
        SyntheticParams { n_normal: 4, m_unlabeled: m, anomaly_rate: ar, t_normal: 2, t_abnormal: 2, seed: 9 }
    }

    #[test]
    fn zero_rate_has_no_anomalies() {
        let d = generate_synthetic(&params(0.0, 10)).unwrap();
        assert!(d.unlabeled_provenance.unwrap().iter().all(|f| !f));
    }

    #[test]
    fn sixty_percent_of_hundred() {
        let d = generate_synthetic(&params(0.6, 100)).unwrap();
        assert_eq!(d.unlabeled_provenance.unwrap().iter().filter(|f| **f).count(), 60);
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_synthetic(&params(0.5, 6)).unwrap();
        let b = generate_synthetic(&params(0.5, 6)).unwrap();
        assert_eq!(a, b);
        let mut other = params(0.5, 6);
        other.seed = 10;
        assert_ne!(a.normal.pixels(), generate_synthetic(&other).unwrap().normal.pixels());
    }

    #[test]
    fn base_fields_do_not_depend_on_rate() {
        let lo = generate_synthetic(&params(0.0, 20)).unwrap();
        let hi = generate_synthetic(&params(1.0, 20)).unwrap();
        assert_eq!(lo.normal, hi.normal);
        assert_eq!(lo.test, hi.test);
        let hi_flags = hi.unlabeled_provenance.unwrap();
        assert!(hi_flags.iter().all(|f| *f));
        assert!((0..20).all(|i| lo.unlabeled.image(i) != hi.unlabeled.image(i)));
    }

    #[test]
    fn invalid_rate() {
        assert!(generate_synthetic(&params(1.5, 4)).is_err());
    }

    #[test]
    fn anomalies_are_visible() {
        for i in 0..200 {
            let (normal, abnormal) = synthesize_pair(3, i);
            let changed = normal.iter().zip(&abnormal).filter(|(a, b)| (*a - *b).abs() >= 0.2).count();
            assert!(changed >= 32, "image {i}: only {changed} pixels changed");
        }
    }
}
