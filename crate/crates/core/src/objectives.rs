//! Loss terms and their weighted total.
//!
//! All batch reductions are arithmetic means taken in sample order.

use crate::error::{Error, Result};
use crate::linalg::{cosine_with_grad, dot, l2_normalize, l2_normalize_backward, log_sum_exp, norm, softmax, Matrix};

/// Default weight for each auxiliary term.
pub const DEFAULT_AUX_WEIGHT: f64 = 0.1;
/// Default fixed logit scale.
pub const DEFAULT_LOGIT_SCALE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub sem: f64,
    pub granule_f: f64,
    pub granule_cf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            sem: DEFAULT_AUX_WEIGHT,
            granule_f: DEFAULT_AUX_WEIGHT,
            granule_cf: DEFAULT_AUX_WEIGHT,
        }
    }
}

/// Per-term losses. Disabled terms are `None` and contribute nothing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub sem: Option<f64>,
    pub granule_f: Option<f64>,
    pub granule_cf: Option<f64>,
    pub total: f64,
    pub weights: LossWeights,
    pub logit_scale: f64,
}

impl LossBreakdown {
    pub fn new(
        cls: f64,
        sem: Option<f64>,
        granule_f: Option<f64>,
        granule_cf: Option<f64>,
        weights: LossWeights,
        logit_scale: f64,
    ) -> Self {
        let mut parts = LossBreakdown {
            cls,
            sem,
            granule_f,
            granule_cf,
            total: 0.0,
            weights,
            logit_scale,
        };
        parts.total = total_loss(&parts);
        parts
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("cls", Some(self.cls)),
            ("sem", self.sem),
            ("granule_f", self.granule_f),
            ("granule_cf", self.granule_cf),
            ("total", Some(self.total)),
        ]
        .into_iter()
        .find(|(_, v)| v.is_some_and(|x| !x.is_finite()))
        .map(|(n, _)| n)
    }
}

/// `cls + λ1·sem + λ2·granule_f + λ3·granule_cf`, absent terms skipped.
pub fn total_loss(parts: &LossBreakdown) -> f64 {
    let w = parts.weights;
    let mut total = parts.cls;
    if let Some(v) = parts.sem {
        total += w.sem * v;
    }
    if let Some(v) = parts.granule_f {
        total += w.granule_f * v;
    }
    if let Some(v) = parts.granule_cf {
        total += w.granule_cf * v;
    }
    total
}

fn check_scale(s: f64) -> Result<()> {
    if s > 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("logit scale must be > 0, got {s}")))
    }
}

/// `s · v Tᵀ`
pub fn scaled_logits(v: &[f64], rows: &Matrix, s: f64) -> Vec<f64> {
    rows.iter_rows().map(|r| s * dot(v, r)).collect()
}

/// Cross-entropy of `softmax(s · v Tᵀ)` against `y`, with gradients
/// w.r.t. `v` and the rows of `T`.
pub fn scaled_cross_entropy(
    v: &[f64],
    rows: &Matrix,
    y: usize,
    s: f64,
) -> Result<(f64, Vec<f64>, Matrix)> {
    check_scale(s)?;
    if y >= rows.rows {
        return Err(Error::Parameter(format!(
            "label {y} out of range for {} classes",
            rows.rows
        )));
    }
    let logits = scaled_logits(v, rows, s);
    let loss = log_sum_exp(&logits) - logits[y];
    let mut d_logits = softmax(&logits);
    d_logits[y] -= 1.0;
    let mut dv = vec![0.0; v.len()];
    let mut d_rows = Matrix::zeros(rows.rows, rows.cols);
    for (c, g) in d_logits.iter().enumerate() {
        let gs = g * s;
        for (k, (dvk, tk)) in dv.iter_mut().zip(rows.row(c)).enumerate() {
            *dvk += gs * tk;
            d_rows.data[c * rows.cols + k] += gs * v[k];
        }
    }
    Ok((loss, dv, d_rows))
}

/// Classification loss against refined class features.
pub fn loss_cls(v: &[f64], t_tilde: &Matrix, y: usize, s: f64) -> Result<f64> {
    scaled_cross_entropy(v, t_tilde, y, s).map(|(l, _, _)| l)
}

/// Pseudo-label distribution. The result is a plain value: nothing
/// downstream differentiates through it.
pub fn pseudo_labels(v: &[f64], t_tilde: &Matrix, s: f64) -> Vec<f64> {
    softmax(&scaled_logits(v, t_tilde, s))
}

/// `1 − cos(Σ_c p_c Norm(t_c), t_low)` with gradients w.r.t. the raw rows
/// and `t_low`. `p` is a constant.
pub fn sem_with_grad(p: &[f64], t_raw: &Matrix, t_low: &[f64]) -> Result<(f64, Matrix, Vec<f64>)> {
    if p.len() != t_raw.rows {
        return Err(Error::Parameter("pseudo-label width mismatch".into()));
    }
    let normalized: Vec<Vec<f64>> = t_raw
        .iter_rows()
        .map(l2_normalize)
        .collect::<Result<_>>()?;
    let mut t_exp = vec![0.0; t_raw.cols];
    for (pc, n) in p.iter().zip(&normalized) {
        for (e, x) in t_exp.iter_mut().zip(n) {
            *e += pc * x;
        }
    }
    if norm(&t_exp) == 0.0 {
        return Err(Error::Degenerate("expected text direction is zero".into()));
    }
    let (cos, d_exp, d_low) = cosine_with_grad(&t_exp, t_low)?;
    let mut d_raw = Matrix::zeros(t_raw.rows, t_raw.cols);
    for (c, (pc, n)) in p.iter().zip(&normalized).enumerate() {
        let d_n: Vec<f64> = d_exp.iter().map(|g| -g * pc).collect();
        let d_row = l2_normalize_backward(n, norm(t_raw.row(c)), &d_n);
        d_raw.row_mut(c).copy_from_slice(&d_row);
    }
    Ok((1.0 - cos, d_raw, d_low.iter().map(|g| -g).collect()))
}

pub fn loss_sem(p: &[f64], t_raw: &Matrix, t_low: &[f64]) -> Result<f64> {
    sem_with_grad(p, t_raw, t_low).map(|(l, _, _)| l)
}

/// Factual granule loss: the modulated embedding against raw text, own label.
pub fn loss_granule_factual(v_g: &[f64], t_raw: &Matrix, y: usize, s: f64) -> Result<f64> {
    loss_cls(v_g, t_raw, y, s)
}

/// Counterfactual granule loss: target is the granule source label.
pub fn loss_granule_counterfactual(
    v_gcf: &[f64],
    t_raw: &Matrix,
    y_source: usize,
    s: f64,
) -> Result<f64> {
    loss_cls(v_gcf, t_raw, y_source, s)
}
