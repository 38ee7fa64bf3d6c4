//! Forward and backward pass of the full training objective.

use crate::error::{Error, Result};
use crate::granule_film::{Permutation, SharedAnchorPolicy};
use crate::linalg::{axpy, Matrix};
use crate::objectives::{pseudo_labels, scaled_cross_entropy, sem_with_grad, LossBreakdown};
use crate::semantic_bank::SemanticBank;
use crate::spectral_proxy::HeadTrace;
use crate::text_refinement::{refine_all_backward, refine_all_traced};

use super::{Model, SampleFeatures, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Cls,
    Sem,
    GranuleF,
    GranuleCf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradRequest {
    None,
    /// Gradient of the weighted total.
    Total,
    /// Gradient of one unweighted term.
    Term(Term),
}

#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub breakdown: LossBreakdown,
    /// Pseudo-labels used by the semantic term; empty when it is disabled.
    pub pseudo_labels: Vec<Vec<f64>>,
    /// Low-band embedding per sample; empty when neither bank nor semantic
    /// term needs it.
    pub t_low: Vec<Vec<f64>>,
    pub grad: Option<Model>,
}

/// Non-finite intermediate values inside a term surface as divergence of
/// that term.
fn diverged(term: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) | Error::Degenerate(_) => Error::Divergence { term },
        other => other,
    }
}

fn term_weight(request: GradRequest, term: Term, lambda: f64) -> f64 {
    match request {
        GradRequest::None => 0.0,
        GradRequest::Total => {
            if term == Term::Cls {
                1.0
            } else {
                lambda
            }
        }
        GradRequest::Term(t) => {
            if t == term {
                1.0
            } else {
                0.0
            }
        }
    }
}

type Embedded = Vec<(Vec<f64>, HeadTrace)>;

fn embed(
    head: &crate::spectral_proxy::ProjectionHead,
    stats: impl Iterator<Item = Vec<f64>>,
) -> Result<Embedded> {
    stats
        .map(|s| head.forward_traced(&s).map(|(e, t)| (e.vector, t)))
        .collect()
}

/// Evaluates the objective on `batch`.
///
/// `frozen_p` replaces the pseudo-labels with fixed values; finite-difference
/// probes use it to hold the stop-gradient branch at the base point.
pub fn evaluate_objective(
    model: &Model,
    bank: Option<&SemanticBank>,
    cfg: &TrainConfig,
    batch: &[SampleFeatures],
    pi: &Permutation,
    frozen_p: Option<&[Vec<f64>]>,
    request: GradRequest,
) -> Result<ObjectiveEval> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::Parameter("empty batch".into()));
    }
    if pi.len() != b {
        return Err(Error::Parameter(format!(
            "permutation over {} items for a batch of {b}",
            pi.len()
        )));
    }
    if cfg.use_bank != bank.is_some() {
        return Err(Error::State("bank presence disagrees with use_bank".into()));
    }
    let s = cfg.logit_scale;
    let inv_b = 1.0 / b as f64;
    let w = cfg.weights;
    let w_cls = term_weight(request, Term::Cls, 1.0) * inv_b;
    let w_sem = term_weight(request, Term::Sem, w.sem) * inv_b;
    let w_gf = term_weight(request, Term::GranuleF, w.granule_f) * inv_b;
    let w_gcf = term_weight(request, Term::GranuleCf, w.granule_cf) * inv_b;

    let raw = &model.text;
    let (t_tilde, refine_trace) = match bank {
        Some(bk) => {
            let (m, tr) = refine_all_traced(raw, bk, &model.aggregator)?;
            (m, Some(tr))
        }
        None => (raw.clone(), None),
    };

    let mut grad = model.zeros_like();
    let mut d_raw = Matrix::zeros(raw.rows, raw.cols);
    let mut d_tilde = Matrix::zeros(raw.rows, raw.cols);

    let mut cls = 0.0;
    for x in batch {
        let (l, _, d_rows) = scaled_cross_entropy(&x.v, &t_tilde, x.target, s)?;
        if !l.is_finite() {
            return Err(Error::Divergence { term: "cls" });
        }
        cls += l;
        if w_cls != 0.0 {
            axpy(w_cls, &d_rows.data, &mut d_tilde.data);
        }
    }
    cls /= b as f64;

    let low = if cfg.use_sem || cfg.use_bank {
        embed(&model.low_head, batch.iter().map(|x| x.stats_low.clone())).map_err(diverged("sem"))?
    } else {
        Vec::new()
    };

    let mut p_used = Vec::new();
    let sem = if cfg.use_sem {
        let mut total = 0.0;
        for (i, x) in batch.iter().enumerate() {
            let p = match frozen_p {
                Some(fp) => fp[i].clone(),
                None => pseudo_labels(&x.v, &t_tilde, s),
            };
            let (l, d_rows, d_low) = sem_with_grad(&p, raw, &low[i].0).map_err(diverged("sem"))?;
            total += l;
            if w_sem != 0.0 {
                axpy(w_sem, &d_rows.data, &mut d_raw.data);
                let d: Vec<f64> = d_low.iter().map(|g| g * w_sem).collect();
                model.low_head.backward(&low[i].1, &d, &mut grad.low_head);
            }
            p_used.push(p);
        }
        Some(total / b as f64)
    } else {
        None
    };

    let high = if cfg.use_gf || cfg.use_gcf {
        embed(&model.high_head, batch.iter().map(|x| x.stats_high.clone()))
            .map_err(diverged("granule_f"))?
    } else {
        Vec::new()
    };
    let anchors: Vec<Vec<f64>> = batch
        .iter()
        .map(|x| match cfg.anchor {
            SharedAnchorPolicy::RawTextByLabel => raw.row(x.target).to_vec(),
            SharedAnchorPolicy::RefinedTextByLabel => t_tilde.row(x.target).to_vec(),
            SharedAnchorPolicy::ImageEmbedding => x.v.clone(),
        })
        .collect();

    // One granule term: anchor of sample i, granule of sample j, target of j.
    let mut granule_term = |i: usize, j: usize, weight: f64, term: &'static str| -> Result<f64> {
        let x = &batch[i];
        let (c, fuse_trace) = model.fusion.forward_traced(&anchors[i], &high[j].0);
        let (v_g, film_trace) = model.film.forward_traced(&c, &x.v).map_err(diverged(term))?;
        let (l, dv, d_rows) = scaled_cross_entropy(&v_g, raw, batch[j].target, s)?;
        if weight != 0.0 {
            axpy(weight, &d_rows.data, &mut d_raw.data);
            let dv: Vec<f64> = dv.iter().map(|g| g * weight).collect();
            let dc = model.film.backward(&film_trace, &dv, &mut grad.film);
            let (ds, dh) = model.fusion.backward(&fuse_trace, &dc, &mut grad.fusion);
            match cfg.anchor {
                SharedAnchorPolicy::RawTextByLabel => {
                    axpy(1.0, &ds, d_raw.row_mut(x.target));
                }
                SharedAnchorPolicy::RefinedTextByLabel => {
                    axpy(1.0, &ds, d_tilde.row_mut(x.target));
                }
                SharedAnchorPolicy::ImageEmbedding => {}
            }
            model.high_head.backward(&high[j].1, &dh, &mut grad.high_head);
        }
        Ok(l)
    };

    let granule_f = if cfg.use_gf {
        let mut total = 0.0;
        for i in 0..b {
            total += granule_term(i, i, w_gf, "granule_f")?;
        }
        Some(total / b as f64)
    } else {
        None
    };
    let granule_cf = if cfg.use_gcf {
        let mut total = 0.0;
        for i in 0..b {
            total += granule_term(i, pi.source(i), w_gcf, "granule_cf")?;
        }
        Some(total / b as f64)
    } else {
        None
    };

    match (bank, &refine_trace) {
        (Some(bk), Some(tr)) => {
            refine_all_backward(bk, &model.aggregator, tr, &d_tilde, &mut d_raw, &mut grad.aggregator)
        }
        _ => axpy(1.0, &d_tilde.data, &mut d_raw.data),
    }
    grad.text = d_raw;

    let t_low = low.into_iter().map(|(v, _)| v).collect();
    Ok(ObjectiveEval {
        breakdown: LossBreakdown::new(cls, sem, granule_f, granule_cf, w, s),
        pseudo_labels: p_used,
        t_low,
        grad: (request != GradRequest::None).then_some(grad),
    })
}
