//! Class text features, residual refinement against the semantic bank, and
//! raw/refined mixing for inference.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{all_finite, Matrix};
use crate::nn::{
    LayerNorm, LayerNormTrace, Linear, Mlp, MlpTrace, NamedTensor, NamedTensorMut, ParamTensors,
};
use crate::semantic_bank::{RetrievalResult, SemanticBank};

/// `t̃ = LN(t + Agg([t; r]))` with `Agg: R^{2d} → R^d → R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregator {
    pub mlp: Mlp,
    pub ln: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct RefineTrace {
    mlp: MlpTrace,
    ln: LayerNormTrace,
}

impl Aggregator {
    pub fn new<R: Rng>(dim: usize, rng: &mut R) -> Self {
        Aggregator {
            mlp: Mlp::new(
                Linear::init_uniform(2 * dim, dim, rng),
                Linear::init_uniform(dim, dim, rng),
            ),
            ln: LayerNorm::identity(dim),
        }
    }

    /// All-zero MLP with identity layer norm.
    pub fn zero(dim: usize) -> Self {
        Aggregator {
            mlp: Mlp::new(Linear::zeros(2 * dim, dim), Linear::zeros(dim, dim)),
            ln: LayerNorm::identity(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mlp.out_dim()
    }

    pub fn refine_traced(&self, t: &[f64], r: &[f64]) -> (Vec<f64>, RefineTrace) {
        let joined: Vec<f64> = t.iter().chain(r).copied().collect();
        let (agg, mlp) = self.mlp.forward_traced(&joined);
        let pre: Vec<f64> = t.iter().zip(&agg).map(|(a, b)| a + b).collect();
        let (out, ln) = self.ln.forward_traced(&pre);
        (out, RefineTrace { mlp, ln })
    }

    /// Returns gradients w.r.t. `(t, r)`.
    pub fn refine_backward(
        &self,
        trace: &RefineTrace,
        d_out: &[f64],
        grad: &mut Aggregator,
    ) -> (Vec<f64>, Vec<f64>) {
        let d_pre = self.ln.backward(&trace.ln, d_out, &mut grad.ln);
        let d_joined = self.mlp.backward(&trace.mlp, &d_pre, &mut grad.mlp);
        let d = d_pre.len();
        let dt = d_pre
            .iter()
            .zip(&d_joined[..d])
            .map(|(a, b)| a + b)
            .collect();
        (dt, d_joined[d..].to_vec())
    }

    pub fn zeros_like(&self) -> Self {
        Aggregator {
            mlp: self.mlp.zeros_like(),
            ln: self.ln.zeros_like(),
        }
    }
}

impl ParamTensors for Aggregator {
    fn named_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        self.mlp.named_tensors(&format!("{prefix}.mlp"), out);
        self.ln.named_tensors(&format!("{prefix}.ln"), out);
    }

    fn named_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a>>) {
        self.mlp.named_tensors_mut(&format!("{prefix}.mlp"), out);
        self.ln.named_tensors_mut(&format!("{prefix}.ln"), out);
    }
}

pub fn refine(t: &[f64], r: &[f64], agg: &Aggregator) -> Result<Vec<f64>> {
    if t.len() != agg.dim() || r.len() != agg.dim() {
        return Err(Error::Parameter("refine input width mismatch".into()));
    }
    if !all_finite(t) || !all_finite(r) {
        return Err(Error::NonFinite("refine input".into()));
    }
    Ok(agg.refine_traced(t, r).0)
}

/// Per-class retrieval and refinement, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct RefineAllTrace {
    pub retrievals: Vec<RetrievalResult>,
    traces: Vec<RefineTrace>,
}

/// Refines every row of `raw` against the bank.
pub fn refine_all_traced(
    raw: &Matrix,
    bank: &SemanticBank,
    agg: &Aggregator,
) -> Result<(Matrix, RefineAllTrace)> {
    let mut refined = Matrix::zeros(raw.rows, raw.cols);
    let mut retrievals = Vec::with_capacity(raw.rows);
    let mut traces = Vec::with_capacity(raw.rows);
    for c in 0..raw.rows {
        let t = raw.row(c);
        let ret = bank.soft_retrieve(t)?;
        let (out, trace) = agg.refine_traced(t, &ret.context);
        refined.row_mut(c).copy_from_slice(&out);
        retrievals.push(ret);
        traces.push(trace);
    }
    Ok((refined, RefineAllTrace { retrievals, traces }))
}

pub fn refine_all(raw: &Matrix, bank: &SemanticBank, agg: &Aggregator) -> Result<Matrix> {
    refine_all_traced(raw, bank, agg).map(|(m, _)| m)
}

/// Backpropagates `d_refined` into `d_raw` (accumulated) and the aggregator.
pub fn refine_all_backward(
    bank: &SemanticBank,
    agg: &Aggregator,
    trace: &RefineAllTrace,
    d_refined: &Matrix,
    d_raw: &mut Matrix,
    grad: &mut Aggregator,
) {
    for c in 0..d_refined.rows {
        let (dt, dr) = agg.refine_backward(&trace.traces[c], d_refined.row(c), grad);
        let dq = bank.retrieve_backward(&trace.retrievals[c], &dr);
        for ((acc, a), b) in d_raw.row_mut(c).iter_mut().zip(&dt).zip(&dq) {
            *acc += a + b;
        }
    }
}

/// `(1−η)·raw + η·refined`, row by row.
pub fn mix(raw: &Matrix, refined: &Matrix, eta: f64) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Parameter(format!("eta must lie in [0,1], got {eta}")));
    }
    if raw.rows != refined.rows || raw.cols != refined.cols {
        return Err(Error::Parameter("raw/refined shape mismatch".into()));
    }
    // Exact endpoints, so η=0 reproduces raw-text logits bit for bit.
    if eta == 0.0 {
        return Ok(raw.clone());
    }
    if eta == 1.0 {
        return Ok(refined.clone());
    }
    let data = raw
        .data
        .iter()
        .zip(&refined.data)
        .map(|(a, b)| (1.0 - eta) * a + eta * b)
        .collect();
    Ok(Matrix {
        rows: raw.rows,
        cols: raw.cols,
        data,
    })
}

/// Raw, refined and mixed class features.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatureSet {
    pub raw: Matrix,
    pub refined: Matrix,
    pub mixed: Matrix,
    pub eta: f64,
}

impl TextFeatureSet {
    /// Builds all three views. Without a bank the refined view is the raw one.
    pub fn build(
        raw: Matrix,
        bank: Option<&SemanticBank>,
        agg: &Aggregator,
        eta: f64,
    ) -> Result<Self> {
        let refined = match bank {
            Some(b) => refine_all(&raw, b, agg)?,
            None => raw.clone(),
        };
        let mixed = mix(&raw, &refined, eta)?;
        Ok(TextFeatureSet {
            raw,
            refined,
            mixed,
            eta,
        })
    }
}
