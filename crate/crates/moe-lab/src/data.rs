//! Synthetic classification task: each image is a bag of tokens drawn from
//! its class's Gaussian cluster, so routing has class structure to exploit.

use moe_core::rng::Rng;
use moe_core::tensor::Tensor;

use crate::config::DataConfig;
use crate::HarnessError;

#[derive(Debug, Clone)]
pub struct Dataset {
    /// One `[tokens_per_image, token_dim]` matrix per image.
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    /// `[classes, token_dim]` cluster centers.
    pub centroids: Tensor,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Mean-pooled tokens of one image.
    pub fn pooled(&self, index: usize) -> Vec<f64> {
        let img = &self.images[index];
        let (t, d) = (img.shape()[0], img.shape()[1]);
        let mut out = vec![0.0; d];
        for row in 0..t {
            for col in 0..d {
                out[col] += img.at2(row, col) / t as f64;
            }
        }
        out
    }

    /// Nearest-centroid classification of mean-pooled tokens; the
    /// separability probe used by tests.
    pub fn nearest_centroid_accuracy(&self) -> f64 {
        let classes = self.centroids.shape()[0];
        let d = self.centroids.shape()[1];
        let mut correct = 0usize;
        for i in 0..self.len() {
            let pooled = self.pooled(i);
            let mut best = (f64::INFINITY, 0usize);
            for c in 0..classes {
                let mut dist = 0.0;
                for j in 0..d {
                    let delta = pooled[j] - self.centroids.at2(c, j);
                    dist += delta * delta;
                }
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            if best.1 == self.labels[i] {
                correct += 1;
            }
        }
        correct as f64 / self.len() as f64
    }
}

/// Class-conditional Gaussian clusters: label `c`'s tokens are
/// `centroid_c + spread * eta`. Deterministic given the generator.
pub fn generate_synthetic_task(
    cfg: &DataConfig,
    token_dim: usize,
    rng: &mut Rng,
) -> Result<Dataset, HarnessError> {
    if cfg.classes < 1 || cfg.tokens_per_image < 1 || cfg.train_images < 1 {
        return Err(HarnessError::config("dataset sizes must be >= 1"));
    }
    if !(cfg.cluster_spread >= 0.0) {
        return Err(HarnessError::config("cluster spread must be >= 0"));
    }
    let mut centroid_rng = rng.stream(1);
    let centroids = centroid_rng
        .normal_tensor(&[cfg.classes, token_dim], 1.0)
        .map_err(HarnessError::Core)?;

    let mut label_rng = rng.stream(2);
    let mut token_rng = rng.stream(3);
    let mut images = Vec::with_capacity(cfg.train_images);
    let mut labels = Vec::with_capacity(cfg.train_images);
    for _ in 0..cfg.train_images {
        let label = label_rng.below(cfg.classes);
        let noise = token_rng
            .normal_tensor(&[cfg.tokens_per_image, token_dim], cfg.cluster_spread)
            .map_err(HarnessError::Core)?;
        let mut tokens = noise;
        for row in 0..cfg.tokens_per_image {
            for col in 0..token_dim {
                let v = tokens.at2(row, col) + centroids.at2(label, col);
                tokens.set2(row, col, v);
            }
        }
        images.push(tokens);
        labels.push(label);
    }
    Ok(Dataset {
        images,
        labels,
        centroids,
    })
}
