/// Interleaved sinusoidal position encoding of a diffusion step.
///
/// Entry `2i` is `sin(t * w_i)` and entry `2i + 1` is `cos(t * w_i)` with
/// `w_i = 10000^(-i / (dim / 2))`. An odd trailing slot carries one more sine.
pub fn time_embed(t: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    fill_time_embed(t, &mut out);
    out
}

pub(crate) fn fill_time_embed(t: usize, out: &mut [f64]) {
    let dim = out.len();
    let pairs = dim.div_ceil(2);
    let half = (dim / 2).max(1) as f64;
    let t = t as f64;
    for i in 0..pairs {
        let freq = (-(10_000f64.ln()) * i as f64 / half).exp();
        let phase = t * freq;
        out[2 * i] = phase.sin();
        if 2 * i + 1 < dim {
            out[2 * i + 1] = phase.cos();
        }
    }
}
