//! Central finite differences against the hand-written backward pass.

use std::fmt::Write as _;

use crate::error::Result;
use crate::granule_film::Permutation;
use crate::latent_teacher::LatentRecord;
use crate::nn::ParamTensors;

use super::graph::{evaluate_objective, GradRequest, Term};
use super::{
    assign_params, extract_features, flatten_params, stream_rng, SampleFeatures, TrainConfig,
    TrainState, STREAM_GRADCHECK, STREAM_GRADCHECK_PARAMS,
};
use crate::latent_teacher::LatentCache;

/// Denominator floor of the relative error `|a−n| / max(|a|, |n|, floor)`.
/// Below it the comparison is absolute: round-off in a central difference
/// is about `ε·|L|/h`, i.e. 1e-9 for losses near 100 at `h = 1e-5`.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

/// Worst relative error within one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub count: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// A non-trainable quantity probed by perturbation. Its analytic gradient
/// is zero by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcludedProbe {
    pub name: String,
    pub count: usize,
    pub analytic_max_abs: f64,
    pub numeric_max_abs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub step: f64,
    pub params: Vec<ParamCheck>,
    pub excluded: Vec<ExcludedProbe>,
    /// Largest |∂L_sem/∂θ| over aggregator parameters, analytic.
    pub sem_aggregator_analytic_max_abs: f64,
    /// Same, by central differences with pseudo-labels held fixed.
    pub sem_aggregator_numeric_max_abs: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn format(&self) -> String {
        let mut out = String::from("param\tcount\tmax_rel_error\tworst_index\tanalytic\tnumeric\n");
        for p in &self.params {
            let _ = writeln!(
                out,
                "{}\t{}\t{:e}\t{}\t{:e}\t{:e}",
                p.name, p.count, p.max_rel_error, p.worst_index, p.analytic, p.numeric
            );
        }
        out.push_str("excluded\tcount\tanalytic_max_abs\tnumeric_max_abs\n");
        for e in &self.excluded {
            let _ = writeln!(
                out,
                "{}\t{}\t{:e}\t{:e}",
                e.name, e.count, e.analytic_max_abs, e.numeric_max_abs
            );
        }
        let _ = writeln!(
            out,
            "sem_aggregator\tanalytic={:e}\tnumeric={:e}",
            self.sem_aggregator_analytic_max_abs, self.sem_aggregator_numeric_max_abs
        );
        if let Some(w) = self.worst() {
            let _ = writeln!(out, "worst\t{}[{}]\t{:e}", w.name, w.worst_index, w.max_rel_error);
        }
        out
    }
}

/// A state fit for checking: bank filled from `cache`, every trainable
/// scalar drawn from `uniform(-0.5, 0.5)`. Returns it with a batch of
/// `cfg.batch_size` records spread over the cache.
pub fn prepare_gradient_check(
    cache: &LatentCache,
    cfg: &TrainConfig,
) -> Result<(TrainState, Vec<LatentRecord>)> {
    let mut state = TrainState::init(cache, cfg)?;
    if state.bank.is_some() {
        let feats = state.cache_features(cache)?;
        state.absorb(&feats)?;
    }
    state
        .model
        .randomize(&mut stream_rng(cfg.seed, STREAM_GRADCHECK_PARAMS), 0.5);
    let stride = (cache.len() / cfg.batch_size.max(1)).max(1);
    let batch = cache
        .records
        .iter()
        .step_by(stride)
        .take(cfg.batch_size)
        .cloned()
        .collect();
    Ok((state, batch))
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Checks every trainable scalar of `state` on `batch`.
///
/// The pseudo-labels are frozen at the unperturbed point and the granule
/// permutation is fixed, so the probed function is exactly the one the
/// analytic gradient differentiates.
pub fn gradient_check(state: &TrainState, batch: &[LatentRecord], step: f64) -> Result<GradCheckReport> {
    let cfg = &state.config;
    let features: Vec<SampleFeatures> = batch
        .iter()
        .map(|r| state.features(&r.latent, r.class_label))
        .collect::<Result<_>>()?;
    let mut rng = stream_rng(cfg.seed, STREAM_GRADCHECK);
    let pi = Permutation::random(features.len(), &mut rng);
    let bank = state.bank.as_ref();

    let base = evaluate_objective(
        &state.model,
        bank,
        cfg,
        &features,
        &pi,
        None,
        GradRequest::Total,
    )?;
    let frozen = cfg.use_sem.then_some(base.pseudo_labels.as_slice());
    let analytic = flatten_params(base.grad.as_ref().expect("requested"));

    let total_at = |model: &super::Model,
                    bank: Option<&crate::semantic_bank::SemanticBank>,
                    feats: &[SampleFeatures]|
     -> Result<f64> {
        Ok(evaluate_objective(model, bank, cfg, feats, &pi, frozen, GradRequest::None)?
            .breakdown
            .total)
    };

    let theta = flatten_params(&state.model);
    let mut work = state.model.clone();
    let mut numeric = vec![0.0; theta.len()];
    let mut probe = theta.clone();
    for k in 0..theta.len() {
        probe[k] = theta[k] + step;
        assign_params(&mut work, &probe);
        let up = total_at(&work, bank, &features)?;
        probe[k] = theta[k] - step;
        assign_params(&mut work, &probe);
        let down = total_at(&work, bank, &features)?;
        probe[k] = theta[k];
        numeric[k] = (up - down) / (2.0 * step);
    }

    let mut params = Vec::new();
    let mut views = Vec::new();
    state.model.named_tensors("", &mut views);
    let mut offset = 0;
    for t in &views {
        let n = t.data.len();
        let mut check = ParamCheck {
            name: t.name.clone(),
            count: n,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: analytic[offset],
            numeric: numeric[offset],
        };
        for i in 0..n {
            let e = rel_error(analytic[offset + i], numeric[offset + i]);
            if e > check.max_rel_error {
                check.max_rel_error = e;
                check.worst_index = i;
                check.analytic = analytic[offset + i];
                check.numeric = numeric[offset + i];
            }
        }
        params.push(check);
        offset += n;
    }

    // Semantic term against aggregator parameters.
    let sem_grad = evaluate_objective(
        &state.model,
        bank,
        cfg,
        &features,
        &pi,
        frozen,
        GradRequest::Term(Term::Sem),
    )?
    .grad
    .expect("requested");
    let sem_analytic = flatten_params(&sem_grad.aggregator)
        .iter()
        .fold(0.0f64, |m, g| m.max(g.abs()));
    let mut sem_numeric = 0.0f64;
    let agg0 = flatten_params(&state.model.aggregator);
    let mut work = state.model.clone();
    let mut probe = agg0.clone();
    let sem_at = |m: &super::Model| -> Result<f64> {
        Ok(evaluate_objective(m, bank, cfg, &features, &pi, frozen, GradRequest::None)?
            .breakdown
            .sem
            .unwrap_or(0.0))
    };
    for k in 0..agg0.len() {
        probe[k] = agg0[k] + step;
        assign_params(&mut work.aggregator, &probe);
        let up = sem_at(&work)?;
        probe[k] = agg0[k] - step;
        assign_params(&mut work.aggregator, &probe);
        let down = sem_at(&work)?;
        probe[k] = agg0[k];
        sem_numeric = sem_numeric.max(((up - down) / (2.0 * step)).abs());
    }

    let mut excluded = Vec::new();
    if let Some(b) = bank {
        let mut work = b.clone();
        let mut max_abs = 0.0f64;
        let mut count = 0;
        for m in 0..b.fill_count() {
            for j in 0..b.dim() {
                let orig = b.entries()[m][j];
                work.entries_mut()[m][j] = orig + step;
                let up = total_at(&state.model, Some(&work), &features)?;
                work.entries_mut()[m][j] = orig - step;
                let down = total_at(&state.model, Some(&work), &features)?;
                work.entries_mut()[m][j] = orig;
                max_abs = max_abs.max(((up - down) / (2.0 * step)).abs());
                count += 1;
            }
        }
        excluded.push(ExcludedProbe {
            name: "bank.entries".into(),
            count,
            analytic_max_abs: 0.0,
            numeric_max_abs: max_abs,
        });
    }
    if let Some(first) = batch.first() {
        let z = &first.latent;
        let target = features[0].target;
        let mut feats = features.clone();
        let mut data = z.data().to_vec();
        let mut max_abs = 0.0f64;
        for k in 0..data.len() {
            let orig = data[k];
            data[k] = orig + step;
            feats[0] = extract_features(&state.encoder, &z.with_data(data.clone()), cfg.kernel, target)?;
            let up = total_at(&state.model, bank, &feats)?;
            data[k] = orig - step;
            feats[0] = extract_features(&state.encoder, &z.with_data(data.clone()), cfg.kernel, target)?;
            let down = total_at(&state.model, bank, &feats)?;
            data[k] = orig;
            max_abs = max_abs.max(((up - down) / (2.0 * step)).abs());
        }
        excluded.push(ExcludedProbe {
            name: format!("teacher.latent[{}]", z.sample_id),
            count: data.len(),
            analytic_max_abs: 0.0,
            numeric_max_abs: max_abs,
        });
    }

    Ok(GradCheckReport {
        step,
        params,
        excluded,
        sem_aggregator_analytic_max_abs: sem_analytic,
        sem_aggregator_numeric_max_abs: sem_numeric,
    })
}
