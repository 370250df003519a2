//! Latent feature diffusion network: a stack of residual MLP blocks
//! conditioned on the diffusion step.
//!
//! Each block computes
//!
//! ```text
//! h = Linear1(SiLU(GroupNorm1(x))) + TimeProj(SiLU(temb))
//! x' = x + Linear2(SiLU(GroupNorm2(h)))
//! ```
//!
//! where `temb = Linear_b(SiLU(Linear_a(sinusoid(t))))` is shared by all
//! blocks. Parameters are held in `f64` but always carry `f32`-representable
//! values, so checkpoints written as `f32` reload bit-exactly.

mod embed;
mod net;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use embed::time_embed;
pub use net::{LfdnModel, GROUPNORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LfdnConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub groupnorm_groups: usize,
    pub time_embed_dim: usize,
}

impl LfdnConfig {
    /// Default architecture for features of width `input_dim`: 16 blocks,
    /// hidden width `2 * input_dim`, one norm group, 128-wide time embedding.
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: 2 * input_dim,
            num_blocks: 16,
            groupnorm_groups: 1,
            time_embed_dim: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_blocks", self.num_blocks),
            ("groupnorm_groups", self.groupnorm_groups),
            ("time_embed_dim", self.time_embed_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        for (name, dim) in [
            ("hidden_dim", self.hidden_dim),
            ("input_dim", self.input_dim),
        ] {
            if dim % self.groupnorm_groups != 0 {
                return Err(Error::config(format!(
                    "{name} {dim} is not divisible by {} groupnorm groups",
                    self.groupnorm_groups
                )));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (c, h, e) = (self.input_dim, self.hidden_dim, self.time_embed_dim);
        let time_mlp = 2 * (e * e + e);
        let block = 2 * c + (h * c + h) + (h * e + h) + 2 * h + (c * h + c);
        time_mlp + self.num_blocks * block
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeMlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Weights are `(out, in)` row-major, as in `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub norm1_gamma: Array1<f64>,
    pub norm1_beta: Array1<f64>,
    pub lin1_w: Array2<f64>,
    pub lin1_b: Array1<f64>,
    pub time_w: Array2<f64>,
    pub time_b: Array1<f64>,
    pub norm2_gamma: Array1<f64>,
    pub norm2_beta: Array1<f64>,
    pub lin2_w: Array2<f64>,
    pub lin2_b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LfdnParams {
    config: LfdnConfig,
    pub time_mlp: TimeMlp,
    pub blocks: Vec<ResBlock>,
}

/// Shape descriptor of one named parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

impl LfdnParams {
    /// All-zero parameters (also the layout of gradient and moment buffers).
    pub fn zeros(config: LfdnConfig) -> Result<Self> {
        config.validate()?;
        let (c, h, e) = (config.input_dim, config.hidden_dim, config.time_embed_dim);
        let block = || ResBlock {
            norm1_gamma: Array1::zeros(c),
            norm1_beta: Array1::zeros(c),
            lin1_w: Array2::zeros((h, c)),
            lin1_b: Array1::zeros(h),
            time_w: Array2::zeros((h, e)),
            time_b: Array1::zeros(h),
            norm2_gamma: Array1::zeros(h),
            norm2_beta: Array1::zeros(h),
            lin2_w: Array2::zeros((c, h)),
            lin2_b: Array1::zeros(c),
        };
        Ok(Self {
            config,
            time_mlp: TimeMlp {
                w1: Array2::zeros((e, e)),
                b1: Array1::zeros(e),
                w2: Array2::zeros((e, e)),
                b2: Array1::zeros(e),
            },
            blocks: (0..config.num_blocks).map(|_| block()).collect(),
        })
    }

    /// Seeded initialization. Linear layers draw from `U(-1/sqrt(fan_in),
    /// 1/sqrt(fan_in))` except each block's output linear, which starts at
    /// zero so the whole network is the identity map. Norm scales are 1.
    pub fn init(config: LfdnConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |xs: &mut [f64], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for x in xs {
                *x = to_f32_grid(rng.random_range(-bound..bound));
            }
        };
        let e = config.time_embed_dim;
        let tm = &mut p.time_mlp;
        fill(tm.w1.as_slice_mut().unwrap(), e);
        fill(tm.b1.as_slice_mut().unwrap(), e);
        fill(tm.w2.as_slice_mut().unwrap(), e);
        fill(tm.b2.as_slice_mut().unwrap(), e);
        for b in &mut p.blocks {
            b.norm1_gamma.fill(1.0);
            b.norm2_gamma.fill(1.0);
            fill(b.lin1_w.as_slice_mut().unwrap(), config.input_dim);
            fill(b.lin1_b.as_slice_mut().unwrap(), config.input_dim);
            fill(b.time_w.as_slice_mut().unwrap(), e);
            fill(b.time_b.as_slice_mut().unwrap(), e);
        }
        Ok(p)
    }

    pub fn config(&self) -> &LfdnConfig {
        &self.config
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config).expect("config already validated")
    }

    /// Names and shapes in canonical (checkpoint) order.
    pub fn tensor_specs(&self) -> Vec<TensorSpec> {
        tensor_specs(&self.config)
    }

    /// Flat views of every tensor, in [`tensor_specs`](Self::tensor_specs) order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let tm = &self.time_mlp;
        let mut out: Vec<&[f64]> = vec![
            tm.w1.as_slice().unwrap(),
            tm.b1.as_slice().unwrap(),
            tm.w2.as_slice().unwrap(),
            tm.b2.as_slice().unwrap(),
        ];
        for b in &self.blocks {
            out.extend([
                b.norm1_gamma.as_slice().unwrap(),
                b.norm1_beta.as_slice().unwrap(),
                b.lin1_w.as_slice().unwrap(),
                b.lin1_b.as_slice().unwrap(),
                b.time_w.as_slice().unwrap(),
                b.time_b.as_slice().unwrap(),
                b.norm2_gamma.as_slice().unwrap(),
                b.norm2_beta.as_slice().unwrap(),
                b.lin2_w.as_slice().unwrap(),
                b.lin2_b.as_slice().unwrap(),
            ]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let tm = &mut self.time_mlp;
        let mut out: Vec<&mut [f64]> = vec![
            tm.w1.as_slice_mut().unwrap(),
            tm.b1.as_slice_mut().unwrap(),
            tm.w2.as_slice_mut().unwrap(),
            tm.b2.as_slice_mut().unwrap(),
        ];
        for b in &mut self.blocks {
            out.extend([
                b.norm1_gamma.as_slice_mut().unwrap(),
                b.norm1_beta.as_slice_mut().unwrap(),
                b.lin1_w.as_slice_mut().unwrap(),
                b.lin1_b.as_slice_mut().unwrap(),
                b.time_w.as_slice_mut().unwrap(),
                b.time_b.as_slice_mut().unwrap(),
                b.norm2_gamma.as_slice_mut().unwrap(),
                b.norm2_beta.as_slice_mut().unwrap(),
                b.lin2_w.as_slice_mut().unwrap(),
                b.lin2_b.as_slice_mut().unwrap(),
            ]);
        }
        out
    }

    /// Rebuilds parameters from flat tensors in canonical order.
    pub fn from_tensors(config: LfdnConfig, tensors: Vec<Vec<f64>>) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let specs = p.tensor_specs();
        if tensors.len() != specs.len() {
            return Err(Error::structure(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for ((dst, src), spec) in p.tensors_mut().into_iter().zip(&tensors).zip(&specs) {
            if dst.len() != src.len() {
                return Err(Error::structure(format!(
                    "tensor {} has {} values, expected {}",
                    spec.name,
                    src.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(src);
        }
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn check_congruent(&self, other: &LfdnParams) -> Result<()> {
        if self.config != other.config {
            return Err(Error::structure(format!(
                "parameter sets disagree: {:?} vs {:?}",
                self.config, other.config
            )));
        }
        Ok(())
    }
}

pub fn tensor_specs(config: &LfdnConfig) -> Vec<TensorSpec> {
    let (c, h, e) = (config.input_dim, config.hidden_dim, config.time_embed_dim);
    let spec = |name: String, shape: Vec<usize>| TensorSpec { name, shape };
    let mut out = vec![
        spec("time_mlp.0.weight".into(), vec![e, e]),
        spec("time_mlp.0.bias".into(), vec![e]),
        spec("time_mlp.2.weight".into(), vec![e, e]),
        spec("time_mlp.2.bias".into(), vec![e]),
    ];
    for i in 0..config.num_blocks {
        let p = format!("blocks.{i}");
        out.extend([
            spec(format!("{p}.norm1.weight"), vec![c]),
            spec(format!("{p}.norm1.bias"), vec![c]),
            spec(format!("{p}.linear1.weight"), vec![h, c]),
            spec(format!("{p}.linear1.bias"), vec![h]),
            spec(format!("{p}.time_proj.weight"), vec![h, e]),
            spec(format!("{p}.time_proj.bias"), vec![h]),
            spec(format!("{p}.norm2.weight"), vec![h]),
            spec(format!("{p}.norm2.bias"), vec![h]),
            spec(format!("{p}.linear2.weight"), vec![c, h]),
            spec(format!("{p}.linear2.bias"), vec![c]),
        ]);
    }
    out
}

/// dL/dθ for every tensor of an [`LfdnParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer(pub LfdnParams);

impl GradientBuffer {
    pub fn zeros(config: LfdnConfig) -> Result<Self> {
        LfdnParams::zeros(config).map(GradientBuffer)
    }

    pub fn add_assign(&mut self, other: &GradientBuffer) {
        for (a, b) in self.0.tensors_mut().into_iter().zip(other.0.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.0.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.0
            .tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl std::ops::Deref for GradientBuffer {
    type Target = LfdnParams;

    fn deref(&self) -> &LfdnParams {
        &self.0
    }
}

/// Rounds to the nearest `f32` value.
pub(crate) fn to_f32_grid(v: f64) -> f64 {
    f64::from(v as f32)
}
