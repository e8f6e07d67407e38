//! Seeded Gaussian class blobs for desk-scale experiments.

use super::{DataError, Dataset};
use crate::nn::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Unit-variance noise around per-class means.
const NOISE_STD: f64 = 1.0;

/// Generates `num_classes * samples_per_class` samples of Gaussian blobs
/// whose class means are pairwise `separation` apart (exactly when the
/// flattened input dimension is at least `num_classes`, at least that far
/// otherwise). Sample order cycles through classes, so labels are balanced
/// over any prefix. Deterministic under `seed`.
pub fn generate_synthetic(
    num_classes: usize,
    samples_per_class: usize,
    input_shape: &[usize],
    separation: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if num_classes < 2 {
        return Err(DataError::TooFewClasses(num_classes));
    }
    if !(separation > 0.0) {
        return Err(DataError::NonPositiveSeparation(separation));
    }
    let dim: usize = input_shape.iter().product();
    if input_shape.is_empty() || dim == 0 {
        return Err(DataError::BadInputShape(input_shape.to_vec()));
    }
    if samples_per_class == 0 {
        return Err(DataError::Empty);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = class_means(num_classes, dim, separation, &mut rng);

    let n = num_classes * samples_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % num_classes;
        let mean = &means[class];
        for d in 0..dim {
            let noise: f64 = rng.sample(StandardNormal);
            data.push((mean[d] + NOISE_STD * noise) as f32);
        }
        labels.push(class as u32);
    }
    let mut shape = Vec::with_capacity(input_shape.len() + 1);
    shape.push(n);
    shape.extend_from_slice(input_shape);
    Dataset::new(Tensor::from_vec(&shape, data), labels, num_classes)
}

fn class_means(num_classes: usize, dim: usize, separation: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    if dim >= num_classes {
        // one axis per class: equal norms and orthogonal, so every pair is
        // exactly `separation` apart
        let scale = separation / 2.0f64.sqrt();
        (0..num_classes)
            .map(|c| {
                let mut m = vec![0.0; dim];
                m[c] = scale;
                m
            })
            .collect()
    } else {
        // random unit directions rescaled so the closest pair is `separation` apart
        let dirs: Vec<Vec<f64>> = (0..num_classes)
            .map(|_| {
                let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.iter_mut().for_each(|x| *x /= norm);
                v
            })
            .collect();
        let mut min_dist = f64::INFINITY;
        for i in 0..num_classes {
            for j in (i + 1)..num_classes {
                let d = dirs[i]
                    .iter()
                    .zip(&dirs[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                min_dist = min_dist.min(d);
            }
        }
        let scale = separation / min_dist.max(1e-9);
        dirs.into_iter()
            .map(|v| v.into_iter().map(|x| x * scale).collect())
            .collect()
    }
}
