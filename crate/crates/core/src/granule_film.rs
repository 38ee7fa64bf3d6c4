//! Training-only granule branch: shared/individual fusion, FiLM modulation of
//! the visual embedding, and counterfactual granule swapping.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{l2_normalize, l2_normalize_backward, norm};
use crate::nn::{
    LayerNorm, LayerNormTrace, Linear, Mlp, MlpTrace, NamedTensor, NamedTensorMut, ParamTensors,
};

/// Where the shared anchor `s_i` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SharedAnchorPolicy {
    #[default]
    RawTextByLabel,
    RefinedTextByLabel,
    ImageEmbedding,
}

impl std::str::FromStr for SharedAnchorPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw_text_by_label" => Ok(Self::RawTextByLabel),
            "refined_text_by_label" => Ok(Self::RefinedTextByLabel),
            "image_embedding" => Ok(Self::ImageEmbedding),
            other => Err(Error::Config(format!("unknown anchor policy `{other}`"))),
        }
    }
}

impl std::fmt::Display for SharedAnchorPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::RawTextByLabel => "raw_text_by_label",
            Self::RefinedTextByLabel => "refined_text_by_label",
            Self::ImageEmbedding => "image_embedding",
        })
    }
}

/// `c = LN(s + MLP_fuse([s; t_high]))`
#[derive(Debug, Clone, PartialEq)]
pub struct FusionNet {
    pub mlp: Mlp,
    pub ln: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct FuseTrace {
    mlp: MlpTrace,
    ln: LayerNormTrace,
}

impl FusionNet {
    /// Final layer starts at zero, so the granule is ignored at step 0.
    pub fn new<R: Rng>(dim: usize, rng: &mut R) -> Self {
        FusionNet {
            mlp: Mlp::new(Linear::init_uniform(2 * dim, dim, rng), Linear::zeros(dim, dim)),
            ln: LayerNorm::identity(dim),
        }
    }

    pub fn zero(dim: usize) -> Self {
        FusionNet {
            mlp: Mlp::new(Linear::zeros(2 * dim, dim), Linear::zeros(dim, dim)),
            ln: LayerNorm::identity(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mlp.out_dim()
    }

    pub fn forward_traced(&self, s: &[f64], t_high: &[f64]) -> (Vec<f64>, FuseTrace) {
        let joined: Vec<f64> = s.iter().chain(t_high).copied().collect();
        let (m, mlp) = self.mlp.forward_traced(&joined);
        let pre: Vec<f64> = s.iter().zip(&m).map(|(a, b)| a + b).collect();
        let (out, ln) = self.ln.forward_traced(&pre);
        (out, FuseTrace { mlp, ln })
    }

    /// Returns gradients w.r.t. `(s, t_high)`.
    pub fn backward(
        &self,
        trace: &FuseTrace,
        d_out: &[f64],
        grad: &mut FusionNet,
    ) -> (Vec<f64>, Vec<f64>) {
        let d_pre = self.ln.backward(&trace.ln, d_out, &mut grad.ln);
        let d_joined = self.mlp.backward(&trace.mlp, &d_pre, &mut grad.mlp);
        let d = d_pre.len();
        let ds = d_pre.iter().zip(&d_joined[..d]).map(|(a, b)| a + b).collect();
        (ds, d_joined[d..].to_vec())
    }

    pub fn zeros_like(&self) -> Self {
        FusionNet {
            mlp: self.mlp.zeros_like(),
            ln: self.ln.zeros_like(),
        }
    }
}

impl ParamTensors for FusionNet {
    fn named_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        self.mlp.named_tensors(&format!("{prefix}.mlp"), out);
        self.ln.named_tensors(&format!("{prefix}.ln"), out);
    }

    fn named_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a>>) {
        self.mlp.named_tensors_mut(&format!("{prefix}.mlp"), out);
        self.ln.named_tensors_mut(&format!("{prefix}.ln"), out);
    }
}

pub fn fuse(s: &[f64], t_high: &[f64], net: &FusionNet) -> Result<Vec<f64>> {
    if s.len() != net.dim() || t_high.len() != net.dim() {
        return Err(Error::Parameter("fuse input width mismatch".into()));
    }
    if !s.iter().chain(t_high).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("fuse input".into()));
    }
    Ok(net.forward_traced(s, t_high).0)
}

/// `[γ; β] = MLP_mod(c)`; first `d` outputs are γ, last `d` are β.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmNet {
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct FilmTrace {
    mlp: MlpTrace,
    tanh_gamma: Vec<f64>,
    v: Vec<f64>,
    output: Vec<f64>,
    pre_norm: f64,
}

impl FilmNet {
    /// Final layer starts at zero: identity modulation at step 0.
    pub fn new<R: Rng>(dim: usize, rng: &mut R) -> Self {
        FilmNet {
            mlp: Mlp::new(Linear::init_uniform(dim, dim, rng), Linear::zeros(dim, 2 * dim)),
        }
    }

    pub fn zero(dim: usize) -> Self {
        FilmNet {
            mlp: Mlp::new(Linear::zeros(dim, dim), Linear::zeros(dim, 2 * dim)),
        }
    }

    pub fn dim(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn forward_traced(&self, c: &[f64], v: &[f64]) -> Result<(Vec<f64>, FilmTrace)> {
        let d = self.dim();
        let (gb, mlp) = self.mlp.forward_traced(c);
        let tanh_gamma: Vec<f64> = gb[..d].iter().map(|g| g.tanh()).collect();
        let pre: Vec<f64> = (0..d)
            .map(|i| (1.0 + tanh_gamma[i]) * v[i] + gb[d + i])
            .collect();
        let output = l2_normalize(&pre)?;
        let pre_norm = norm(&pre);
        Ok((
            output.clone(),
            FilmTrace {
                mlp,
                tanh_gamma,
                v: v.to_vec(),
                output,
                pre_norm,
            },
        ))
    }

    /// Returns the gradient w.r.t. the conditioning vector `c`.
    pub fn backward(&self, trace: &FilmTrace, d_out: &[f64], grad: &mut FilmNet) -> Vec<f64> {
        let d = self.dim();
        let d_pre = l2_normalize_backward(&trace.output, trace.pre_norm, d_out);
        let mut d_gb = vec![0.0; 2 * d];
        for i in 0..d {
            let th = trace.tanh_gamma[i];
            d_gb[i] = d_pre[i] * trace.v[i] * (1.0 - th * th);
            d_gb[d + i] = d_pre[i];
        }
        self.mlp.backward(&trace.mlp, &d_gb, &mut grad.mlp)
    }

    pub fn zeros_like(&self) -> Self {
        FilmNet {
            mlp: self.mlp.zeros_like(),
        }
    }
}

impl ParamTensors for FilmNet {
    fn named_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        self.mlp.named_tensors(&format!("{prefix}.mlp"), out);
    }

    fn named_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a>>) {
        self.mlp.named_tensors_mut(&format!("{prefix}.mlp"), out);
    }
}

/// `Norm((1 + tanh γ) ⊙ v + β)` with `(γ, β)` produced from `c`.
pub fn film_modulate(c: &[f64], v: &[f64], net: &FilmNet) -> Result<Vec<f64>> {
    if c.len() != net.dim() || v.len() != net.dim() {
        return Err(Error::Parameter("film input width mismatch".into()));
    }
    net.forward_traced(c, v).map(|(o, _)| o)
}

/// Applies `(1 + tanh γ) ⊙ v + β` and normalizes, for explicit `(γ, β)`.
pub fn film_apply(gamma: &[f64], beta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let pre: Vec<f64> = gamma
        .iter()
        .zip(beta)
        .zip(v)
        .map(|((g, b), x)| (1.0 + g.tanh()) * x + b)
        .collect();
    l2_normalize(&pre)
}

/// A bijection on batch indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &i in &map {
            if i >= map.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Parameter(format!("not a permutation: {map:?}")));
            }
        }
        Ok(Permutation(map))
    }

    pub fn identity(n: usize) -> Self {
        Permutation((0..n).collect())
    }

    /// Uniform over all permutations; fixed points allowed.
    pub fn random<R: Rng>(n: usize, rng: &mut R) -> Self {
        let mut v: Vec<usize> = (0..n).collect();
        v.shuffle(rng);
        Permutation(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `π(i)`
    pub fn source(&self, i: usize) -> usize {
        self.0[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Element `i` of the output is element `π(i)` of the input; the same
/// gather applied to labels gives the granule-source targets.
pub fn counterfactual_swap<T: Clone>(items: &[T], pi: &Permutation) -> Result<Vec<T>> {
    if pi.len() != items.len() {
        return Err(Error::Parameter(format!(
            "permutation of {} applied to batch of {}",
            pi.len(),
            items.len()
        )));
    }
    Ok(pi.0.iter().map(|&j| items[j].clone()).collect())
}
