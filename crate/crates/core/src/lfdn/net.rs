use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::embed::fill_time_embed;
use super::{GradientBuffer, LfdnParams};
use crate::error::{Error, Result};

pub const GROUPNORM_EPS: f64 = 1e-5;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `x W^T + b` for row-major batches.
fn linear(x: &ArrayView2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w.t());
    y += b;
    y
}

struct NormOut {
    y: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array2<f64>,
}

fn group_norm(x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>, groups: usize) -> NormOut {
    let (rows, dim) = x.dim();
    let width = dim / groups;
    let mut xhat = Array2::zeros((rows, dim));
    let mut inv_std = Array2::zeros((rows, groups));
    for r in 0..rows {
        for g in 0..groups {
            let cols = g * width..(g + 1) * width;
            let seg = x.slice(s![r, cols.clone()]);
            let mean = seg.sum() / width as f64;
            let var = seg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
            let inv = 1.0 / (var + GROUPNORM_EPS).sqrt();
            inv_std[[r, g]] = inv;
            xhat.slice_mut(s![r, cols])
                .iter_mut()
                .zip(seg.iter())
                .for_each(|(o, v)| *o = (v - mean) * inv);
        }
    }
    let y = &xhat * gamma + beta;
    NormOut { y, xhat, inv_std }
}

/// Returns dx and accumulates dgamma/dbeta.
fn group_norm_backward(
    dy: &Array2<f64>,
    xhat: &Array2<f64>,
    inv_std: &Array2<f64>,
    gamma: &Array1<f64>,
    dgamma: &mut Array1<f64>,
    dbeta: &mut Array1<f64>,
) -> Array2<f64> {
    let (rows, dim) = dy.dim();
    let groups = inv_std.ncols();
    let width = dim / groups;
    *dgamma += &(dy * xhat).sum_axis(Axis(0));
    *dbeta += &dy.sum_axis(Axis(0));
    let dxhat = dy * gamma;
    let mut dx = Array2::zeros((rows, dim));
    for r in 0..rows {
        for g in 0..groups {
            let cols = g * width..(g + 1) * width;
            let dh = dxhat.slice(s![r, cols.clone()]);
            let xh = xhat.slice(s![r, cols.clone()]);
            let mean_dh = dh.sum() / width as f64;
            let mean_dh_xh =
                dh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / width as f64;
            let inv = inv_std[[r, g]];
            dx.slice_mut(s![r, cols])
                .iter_mut()
                .zip(dh.iter().zip(xh.iter()))
                .for_each(|(o, (d, x))| *o = inv * (d - mean_dh - x * mean_dh_xh));
        }
    }
    dx
}

struct TimeTape {
    embed: Array2<f64>,
    pre1: Array2<f64>,
    act1: Array2<f64>,
    temb: Array2<f64>,
    /// SiLU(temb), the input of every block's time projection.
    cond: Array2<f64>,
}

struct BlockTape {
    xhat1: Array2<f64>,
    inv1: Array2<f64>,
    a1: Array2<f64>,
    s1: Array2<f64>,
    xhat2: Array2<f64>,
    inv2: Array2<f64>,
    a2: Array2<f64>,
    s2: Array2<f64>,
}

impl LfdnParams {
    fn check_batch(&self, z: &ArrayView2<f64>, ts: &[usize]) -> Result<()> {
        if z.ncols() != self.config.input_dim {
            return Err(Error::structure(format!(
                "input width {} does not match network input_dim {}",
                z.ncols(),
                self.config.input_dim
            )));
        }
        if z.nrows() != ts.len() {
            return Err(Error::structure(format!(
                "{} inputs but {} timesteps",
                z.nrows(),
                ts.len()
            )));
        }
        Ok(())
    }

    fn time_tape(&self, ts: &[usize]) -> TimeTape {
        let e = self.config.time_embed_dim;
        let mut embed = Array2::zeros((ts.len(), e));
        for (mut row, &t) in embed.rows_mut().into_iter().zip(ts) {
            fill_time_embed(t, row.as_slice_mut().unwrap());
        }
        let tm = &self.time_mlp;
        let pre1 = linear(&embed.view(), &tm.w1, &tm.b1);
        let act1 = pre1.mapv(silu);
        let temb = linear(&act1.view(), &tm.w2, &tm.b2);
        let cond = temb.mapv(silu);
        TimeTape {
            embed,
            pre1,
            act1,
            temb,
            cond,
        }
    }

    fn time_projections(&self, cond: &Array2<f64>) -> Vec<Array2<f64>> {
        self.blocks
            .iter()
            .map(|b| linear(&cond.view(), &b.time_w, &b.time_b))
            .collect()
    }

    fn run_blocks(
        &self,
        z: &ArrayView2<f64>,
        time_proj: &[Array2<f64>],
        mut tape: Option<&mut Vec<BlockTape>>,
    ) -> Array2<f64> {
        let groups = self.config.groupnorm_groups;
        let mut x = z.to_owned();
        for (b, tp) in self.blocks.iter().zip(time_proj) {
            let n1 = group_norm(&x, &b.norm1_gamma, &b.norm1_beta, groups);
            let s1 = n1.y.mapv(silu);
            let mut h = linear(&s1.view(), &b.lin1_w, &b.lin1_b);
            h += tp;
            let n2 = group_norm(&h, &b.norm2_gamma, &b.norm2_beta, groups);
            let s2 = n2.y.mapv(silu);
            x += &linear(&s2.view(), &b.lin2_w, &b.lin2_b);
            if let Some(tape) = tape.as_deref_mut() {
                tape.push(BlockTape {
                    xhat1: n1.xhat,
                    inv1: n1.inv_std,
                    a1: n1.y,
                    s1,
                    xhat2: n2.xhat,
                    inv2: n2.inv_std,
                    a2: n2.y,
                    s2,
                });
            }
        }
        x
    }

    /// Prediction of the clean features from `z` at step `t`.
    pub fn forward(&self, z: &[f64], t: usize) -> Result<Vec<f64>> {
        let z = ArrayView2::from_shape((1, z.len()), z).expect("row view");
        Ok(self.forward_batch(z, &[t])?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, z: ArrayView2<f64>, ts: &[usize]) -> Result<Array2<f64>> {
        self.check_batch(&z, ts)?;
        let time = self.time_tape(ts);
        let tp = self.time_projections(&time.cond);
        Ok(self.run_blocks(&z, &tp, None))
    }

    /// Mean over the batch of `||z0 - LFDN(zt, t)||^2` and its gradient.
    pub fn backward(
        &self,
        zt: ArrayView2<f64>,
        ts: &[usize],
        z0: ArrayView2<f64>,
    ) -> Result<(f64, GradientBuffer)> {
        if zt.nrows() == 0 {
            return Err(Error::structure("empty batch"));
        }
        let n = zt.nrows() as f64;
        let (sum, mut grads) = self.backward_sum(zt, ts, z0)?;
        grads.scale(1.0 / n);
        Ok((sum / n, grads))
    }

    /// Summed (not averaged) squared error and gradient over the batch.
    /// Chunked callers add these in a fixed order before dividing.
    pub fn backward_sum(
        &self,
        zt: ArrayView2<f64>,
        ts: &[usize],
        z0: ArrayView2<f64>,
    ) -> Result<(f64, GradientBuffer)> {
        self.check_batch(&zt, ts)?;
        if z0.dim() != zt.dim() {
            return Err(Error::structure("targets and inputs differ in shape"));
        }
        let time = self.time_tape(ts);
        let tp = self.time_projections(&time.cond);
        let mut tape = Vec::with_capacity(self.blocks.len());
        let out = self.run_blocks(&zt, &tp, Some(&mut tape));

        let resid = &out - &z0;
        let loss: f64 = resid.iter().map(|v| v * v).sum();
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch: 0,
                step: 0,
                loss,
            });
        }

        let mut g = GradientBuffer::zeros(self.config)?;
        let grads = &mut g.0;
        let mut dx = resid * 2.0;
        let mut dcond = Array2::<f64>::zeros(time.cond.dim());
        for ((b, gb), bt) in self
            .blocks
            .iter()
            .zip(grads.blocks.iter_mut())
            .zip(&tape)
            .rev()
        {
            gb.lin2_w += &dx.t().dot(&bt.s2);
            gb.lin2_b += &dx.sum_axis(Axis(0));
            let ds2 = dx.dot(&b.lin2_w);
            let da2 = &ds2 * &bt.a2.mapv(silu_grad);
            let dh = group_norm_backward(
                &da2,
                &bt.xhat2,
                &bt.inv2,
                &b.norm2_gamma,
                &mut gb.norm2_gamma,
                &mut gb.norm2_beta,
            );
            gb.time_w += &dh.t().dot(&time.cond);
            gb.time_b += &dh.sum_axis(Axis(0));
            dcond += &dh.dot(&b.time_w);
            gb.lin1_w += &dh.t().dot(&bt.s1);
            gb.lin1_b += &dh.sum_axis(Axis(0));
            let ds1 = dh.dot(&b.lin1_w);
            let da1 = &ds1 * &bt.a1.mapv(silu_grad);
            let dbranch = group_norm_backward(
                &da1,
                &bt.xhat1,
                &bt.inv1,
                &b.norm1_gamma,
                &mut gb.norm1_gamma,
                &mut gb.norm1_beta,
            );
            dx += &dbranch;
        }

        let tm = &self.time_mlp;
        let gt = &mut grads.time_mlp;
        let dtemb = &dcond * &time.temb.mapv(silu_grad);
        gt.w2 += &dtemb.t().dot(&time.act1);
        gt.b2 += &dtemb.sum_axis(Axis(0));
        let dact1 = dtemb.dot(&tm.w2);
        let dpre1 = &dact1 * &time.pre1.mapv(silu_grad);
        gt.w1 += &dpre1.t().dot(&time.embed);
        gt.b1 += &dpre1.sum_axis(Axis(0));

        if !g.is_finite() {
            return Err(Error::Divergence {
                epoch: 0,
                step: 0,
                loss,
            });
        }
        Ok((loss, g))
    }
}

/// Inference wrapper that precomputes each block's time projection for the
/// steps `0..=max_t`.
#[derive(Debug, Clone)]
pub struct LfdnModel {
    params: LfdnParams,
    /// `time_proj[t][block]`, each of shape `(1, hidden_dim)`.
    time_proj: Vec<Vec<Array2<f64>>>,
}

impl LfdnModel {
    pub fn new(params: LfdnParams, max_t: usize) -> Self {
        let ts: Vec<usize> = (0..=max_t).collect();
        let cond = params.time_tape(&ts).cond;
        let per_block = params.time_projections(&cond);
        let time_proj = (0..=max_t)
            .map(|t| {
                per_block
                    .iter()
                    .map(|p| p.slice(s![t..t + 1, ..]).to_owned())
                    .collect()
            })
            .collect();
        Self { params, time_proj }
    }

    pub fn params(&self) -> &LfdnParams {
        &self.params
    }

    pub fn max_t(&self) -> usize {
        self.time_proj.len() - 1
    }

    pub fn forward(&self, z: &[f64], t: usize) -> Result<Vec<f64>> {
        let Some(tp) = self.time_proj.get(t) else {
            return self.params.forward(z, t);
        };
        if z.len() != self.params.config.input_dim {
            return Err(Error::structure(format!(
                "input width {} does not match network input_dim {}",
                z.len(),
                self.params.config.input_dim
            )));
        }
        let view = ArrayView2::from_shape((1, z.len()), z).expect("row view");
        Ok(self
            .params
            .run_blocks(&view, tp, None)
            .into_raw_vec_and_offset()
            .0)
    }
}
