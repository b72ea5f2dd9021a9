//! Labeled datasets and the seeded synthetic-blobs generator.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A labeled classification dataset; `inputs` is `[n, ...]` sample-major.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<u32>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<u32>, classes: usize) -> Result<Self> {
        if inputs.batch() != labels.len() {
            return Err(Error::Shape(format!(
                "{} inputs vs {} labels",
                inputs.batch(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Domain(format!("label {l} out of range for {classes} classes")));
        }
        Ok(Self { inputs, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies the given samples into a contiguous batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<u32>) {
        let sample_numel = self.inputs.sample_numel();
        let mut data = Vec::with_capacity(indices.len() * sample_numel);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.inputs.sample(i));
            labels.push(self.labels[i]);
        }
        let mut shape = self.inputs.shape.clone();
        shape[0] = indices.len();
        (Tensor { shape, data }, labels)
    }

    /// The first `n` samples as a fixed batch (used for calibration).
    pub fn head(&self, n: usize) -> (Tensor, Vec<u32>) {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        self.gather(&idx)
    }
}

/// Parameters for the Gaussian-blobs generator.
#[derive(Debug, Clone, Copy)]
pub struct BlobsSpec {
    pub classes: usize,
    pub dim: usize,
    pub samples: usize,
    /// Class centers are placed on a sphere of this radius.
    pub center_radius: f32,
    /// Per-coordinate noise standard deviation.
    pub noise: f32,
    pub seed: u64,
}

/// Seeded Gaussian blobs with round-robin labels, so class frequencies are
/// exactly balanced whenever `samples % classes == 0`.
pub fn make_blobs(spec: &BlobsSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.dim == 0 || spec.samples == 0 {
        return Err(Error::Config("blobs need classes, dim, and samples all positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut centers = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        let mut c: Vec<f32> = (0..spec.dim).map(|_| standard_normal(&mut rng)).collect();
        let norm = c.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
        for x in c.iter_mut() {
            *x *= spec.center_radius / norm;
        }
        centers.push(c);
    }
    let mut data = Vec::with_capacity(spec.samples * spec.dim);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let class = i % spec.classes;
        for d in 0..spec.dim {
            data.push(centers[class][d] + spec.noise * standard_normal(&mut rng));
        }
        labels.push(class as u32);
    }
    Dataset::new(
        Tensor {
            shape: vec![spec.samples, spec.dim],
            data,
        },
        labels,
        spec.classes,
    )
}

/// Box-Muller on the chacha stream; avoids pulling a distributions crate for
/// one sampler and keeps the byte stream identical across platforms.
fn standard_normal(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}
