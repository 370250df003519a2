//! Synthetic stand-in for encoder features.
//!
//! ID records come from a mixture of Gaussians living near a low-rank
//! subspace; OOD records come from the same mixture with its last component
//! dropped and every mean moved by `shift` along a random direction. Everything is a function of the
//! seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureRecord, FeatureSet, LayerLayout, SetLabel};

pub const SYNTH_ENCODER_TAG: &str = "synthetic";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub dim: usize,
    pub n_train: usize,
    /// Held-out ID records for evaluation.
    pub n_test_id: usize,
    pub n_ood: usize,
    /// Length of the OOD offset, in units of the in-subspace spread.
    pub shift: f64,
    pub seed: u64,
    pub components: usize,
    /// Subspace rank; 0 picks `max(2, dim / 8)`.
    pub rank: usize,
    /// Std of the isotropic noise added to every record.
    pub noise: f64,
    /// Spread of the component means inside the subspace.
    pub mean_scale: f64,
    /// Extra in-subspace std of each component, on top of `noise`.
    pub within: f64,
}

impl SynthParams {
    pub fn new(dim: usize, n_train: usize, n_ood: usize, shift: f64, seed: u64) -> Self {
        Self {
            dim,
            n_train,
            n_test_id: n_ood,
            n_ood,
            shift,
            seed,
            components: 4,
            rank: 0,
            noise: 0.1,
            mean_scale: 3.0,
            within: 1.0,
        }
    }

    fn effective_rank(&self) -> usize {
        if self.rank == 0 {
            (self.dim / 8).max(2)
        } else {
            self.rank
        }
    }

    pub fn layout(&self) -> Result<LayerLayout> {
        LayerLayout::new(
            vec![self.dim / 2, self.dim - self.dim / 2],
            SYNTH_ENCODER_TAG,
        )
    }

    fn validate(&self) -> Result<()> {
        if self.dim < 4 {
            return Err(Error::config("synthetic dim must be at least 4"));
        }
        if self.components < 2 {
            return Err(Error::config("need at least two mixture components"));
        }
        let r = self.effective_rank();
        if r >= self.dim {
            return Err(Error::config(format!(
                "rank {r} must be below dim {}",
                self.dim
            )));
        }
        if !(self.noise >= 0.0 && self.shift.is_finite() && self.mean_scale.is_finite()) {
            return Err(Error::config(
                "noise, shift and mean_scale must be finite, noise >= 0",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthBenchmark {
    pub train: FeatureSet,
    pub test_id: FeatureSet,
    pub test_ood: FeatureSet,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Gram-Schmidt on Gaussian draws.
fn orthonormal_basis(rng: &mut ChaCha8Rng, dim: usize, rank: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while basis.len() < rank {
        let mut v = normal_vec(rng, dim);
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        if dot(&v, &v) > 1e-6 {
            normalize(&mut v);
            basis.push(v);
        }
    }
    basis
}

struct Generator {
    basis: Vec<Vec<f64>>,
    means: Vec<Vec<f64>>,
    ood_offset: Vec<f64>,
    noise: f64,
    within: f64,
}

impl Generator {
    fn sample(&self, rng: &mut ChaCha8Rng, component: usize, ood: bool) -> Vec<f32> {
        let dim = self.ood_offset.len();
        let rank = self.basis.len();
        let coeffs: Vec<f64> = normal_vec(rng, rank)
            .iter()
            .zip(&self.means[component])
            .map(|(z, m)| m + self.within * z)
            .collect();
        let iso = normal_vec(rng, dim);
        (0..dim)
            .map(|j| {
                let mut x: f64 = (0..rank).map(|k| coeffs[k] * self.basis[k][j]).sum();
                x += self.noise * iso[j];
                if ood {
                    x += self.ood_offset[j];
                }
                x as f32
            })
            .collect()
    }
}

pub fn synth_benchmark(p: &SynthParams) -> Result<SynthBenchmark> {
    p.validate()?;
    let layout = p.layout()?;
    let rank = p.effective_rank();
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let basis = orthonormal_basis(&mut rng, p.dim, rank);
    let means = (0..p.components)
        .map(|_| {
            normal_vec(&mut rng, rank)
                .iter()
                .map(|v| v * p.mean_scale)
                .collect()
        })
        .collect();
    let mut dir = normal_vec(&mut rng, p.dim);
    normalize(&mut dir);
    let generator = Generator {
        basis,
        means,
        ood_offset: dir.iter().map(|v| v * p.shift).collect(),
        noise: p.noise,
        within: p.within,
    };
    let ood_components = p.components - 1;

    let make = |stream: u64, n: usize, label: SetLabel, prefix: &str| -> Result<FeatureSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        rng.set_stream(stream);
        let ood = label == SetLabel::Ood;
        let records = (0..n)
            .map(|i| {
                let comp = if ood {
                    rng.random_range(0..ood_components)
                } else {
                    rng.random_range(0..p.components)
                };
                let v = generator.sample(&mut rng, comp, ood);
                FeatureRecord::from_concatenated(format!("{prefix}-{i:06}"), &v, &layout)
            })
            .collect::<Result<Vec<_>>>()?;
        FeatureSet::new(layout.clone(), records, label)
    };

    Ok(SynthBenchmark {
        train: make(1, p.n_train, SetLabel::Id, "train")?,
        test_id: make(2, p.n_test_id, SetLabel::Id, "id")?,
        test_ood: make(3, p.n_ood, SetLabel::Ood, "ood")?,
    })
}
