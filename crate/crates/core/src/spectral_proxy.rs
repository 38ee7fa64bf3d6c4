//! Low-pass smoothing with an exact residual high-pass, band statistics and
//! the projection heads that carry each band into the embedding space.

use rand::Rng;

use crate::error::{Error, Result};
use crate::latent_teacher::LatentTensor;
use crate::linalg::{l2_normalize, l2_normalize_backward, norm};
use crate::nn::{Linear, Mlp, MlpTrace, NamedTensor, NamedTensorMut, ParamTensors};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    Low,
    High,
}

/// Additive split of a latent into a smoothed base and its residual detail.
#[derive(Debug, Clone, PartialEq)]
pub struct BandPair {
    pub base: LatentTensor,
    pub detail: LatentTensor,
    pub kernel: usize,
}

/// Unit-norm band embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct BandEmbedding {
    pub vector: Vec<f64>,
    pub band: Band,
}

fn check_kernel(z: &LatentTensor, k: usize) -> Result<()> {
    if k % 2 == 0 {
        return Err(Error::Parameter(format!("kernel must be odd, got {k}")));
    }
    let limit = z.height().min(z.width());
    if k > limit {
        return Err(Error::Parameter(format!(
            "kernel {k} exceeds min(h, w) = {limit}"
        )));
    }
    Ok(())
}

/// Stride-1 `k×k` box mean with replicate padding, per channel.
pub fn smooth_lowpass(z: &LatentTensor, k: usize) -> Result<LatentTensor> {
    check_kernel(z, k)?;
    let (c, h, w) = z.shape();
    let r = (k / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let inv = 1.0 / (k * k) as f64;
    let mut out = Vec::with_capacity(c * h * w);
    let mut rows = vec![0.0; h * w];
    for ch in 0..c {
        let src = z.channel(ch);
        // Horizontal window sums, then vertical sums of those.
        for i in 0..h {
            for j in 0..w {
                let mut s = 0.0;
                for dj in -r..=r {
                    s += src[i * w + clamp(j as isize + dj, w)];
                }
                rows[i * w + j] = s;
            }
        }
        for i in 0..h {
            for j in 0..w {
                let mut s = 0.0;
                for di in -r..=r {
                    s += rows[clamp(i as isize + di, h) * w + j];
                }
                out.push(s * inv);
            }
        }
    }
    Ok(z.with_data(out))
}

/// `base = S_k(z)`, `detail = z − base`.
///
/// The base is re-derived as `z − detail`, which moves it by at most one
/// rounding step of the detail value and makes `base + detail == z` hold
/// bitwise for single-precision latents.
pub fn factorize(z: &LatentTensor, k: usize) -> Result<BandPair> {
    let smooth = smooth_lowpass(z, k)?;
    let detail: Vec<f64> = z
        .data()
        .iter()
        .zip(smooth.data())
        .map(|(a, s)| a - s)
        .collect();
    let base = z.data().iter().zip(&detail).map(|(a, d)| a - d).collect();
    Ok(BandPair {
        base: z.with_data(base),
        detail: z.with_data(detail),
        kernel: k,
    })
}

/// Mean absolute activation of each channel.
pub fn band_stats(z: &LatentTensor) -> Vec<f64> {
    let n = (z.height() * z.width()) as f64;
    (0..z.channels())
        .map(|c| z.channel(c).iter().map(|v| v.abs()).sum::<f64>() / n)
        .collect()
}

/// Two-layer head `R^C → R^C → R^d`, output ℓ2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub mlp: Mlp,
    pub band: Band,
}

/// Saved activations for [`ProjectionHead::backward`].
#[derive(Debug, Clone)]
pub struct HeadTrace {
    mlp: MlpTrace,
    output: Vec<f64>,
    pre_norm: f64,
}

impl ProjectionHead {
    pub fn new<R: Rng>(channels: usize, dim: usize, band: Band, rng: &mut R) -> Self {
        ProjectionHead {
            mlp: Mlp::new(
                Linear::init_uniform(channels, channels, rng),
                Linear::init_uniform(channels, dim, rng),
            ),
            band,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    pub fn forward_traced(&self, stats: &[f64]) -> Result<(BandEmbedding, HeadTrace)> {
        if stats.len() != self.input_dim() {
            return Err(Error::Parameter(format!(
                "head expects {} stats, got {}",
                self.input_dim(),
                stats.len()
            )));
        }
        let (raw, mlp) = self.mlp.forward_traced(stats);
        let vector = l2_normalize(&raw)?;
        let trace = HeadTrace {
            mlp,
            output: vector.clone(),
            pre_norm: norm(&raw),
        };
        Ok((
            BandEmbedding {
                vector,
                band: self.band,
            },
            trace,
        ))
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the stats.
    pub fn backward(&self, trace: &HeadTrace, d_out: &[f64], grad: &mut ProjectionHead) -> Vec<f64> {
        let d_raw = l2_normalize_backward(&trace.output, trace.pre_norm, d_out);
        self.mlp.backward(&trace.mlp, &d_raw, &mut grad.mlp)
    }

    pub fn zeros_like(&self) -> Self {
        ProjectionHead {
            mlp: self.mlp.zeros_like(),
            band: self.band,
        }
    }
}

impl ParamTensors for ProjectionHead {
    fn named_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        self.mlp.named_tensors(prefix, out);
    }

    fn named_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a>>) {
        self.mlp.named_tensors_mut(prefix, out);
    }
}

pub fn project_band(head: &ProjectionHead, stats: &[f64]) -> Result<BandEmbedding> {
    head.forward_traced(stats).map(|(e, _)| e)
}
