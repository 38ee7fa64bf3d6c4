//! Base-to-novel protocol, metrics and the inference path.

use std::fmt::Write as _;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::granule_film::{Permutation, SharedAnchorPolicy};
use crate::latent_teacher::{generate_dataset, LatentCache, LatentRecord, LatentTensor};
use crate::linalg::{argmax, dot, l2_normalize, Matrix};
use crate::semantic_bank::SemanticBank;
use crate::text_refinement::{Aggregator, TextFeatureSet};
use crate::trainer::{
    fit_with_validation, label_index, Checkpoint, SampleFeatures, ToyVisualEncoder, TrainState,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
    pub gap_percent: f64,
}

impl EvalResult {
    pub fn new(base_acc: f64, novel_acc: f64) -> Self {
        EvalResult {
            base_acc,
            novel_acc,
            hm: harmonic_mean(base_acc, novel_acc),
            gap_percent: generalization_gap(base_acc, novel_acc),
        }
    }
}

/// `2ab/(a+b)`, or 0 when both are 0.
pub fn harmonic_mean(base: f64, novel: f64) -> f64 {
    if base + novel > 0.0 {
        2.0 * base * novel / (base + novel)
    } else {
        0.0
    }
}

/// `100·(base − novel)/base`; 0 when base is 0.
pub fn generalization_gap(base: f64, novel: f64) -> f64 {
    if base > 0.0 {
        100.0 * (base - novel) / base
    } else {
        0.0
    }
}

/// Scaled similarities against the mixed text features and their argmax
/// (lowest index on ties).
pub fn predict(v: &[f64], text: &TextFeatureSet, s: f64) -> (Vec<f64>, usize) {
    let logits: Vec<f64> = text.mixed.iter_rows().map(|r| s * dot(v, r)).collect();
    let label = argmax(&logits);
    (logits, label)
}

/// Per-class partition of a cache into the protocol's subsets, in cache
/// order within each class.
#[derive(Debug, Clone, Default)]
pub struct Split {
    pub base_labels: Vec<u32>,
    pub novel_labels: Vec<u32>,
    pub train: LatentCache,
    pub validation: LatentCache,
    pub base_test: LatentCache,
    pub novel_prototypes: LatentCache,
    pub novel_test: LatentCache,
}

/// Even labels are base classes, odd labels novel. Per class, the first
/// `shots` records train (base) or define the prototype (novel); base
/// classes then give `val_per_class` records to validation; the rest is test.
pub fn split_base_novel(cache: &LatentCache, shots: usize, val_per_class: usize) -> Result<Split> {
    let labels = cache.labels();
    if labels.len() < 2 {
        return Err(Error::Protocol(format!(
            "base-to-novel needs at least 2 classes, got {}",
            labels.len()
        )));
    }
    let mut split = Split::default();
    for &label in &labels {
        let records: Vec<&LatentRecord> =
            cache.records.iter().filter(|r| r.class_label == label).collect();
        let base = label % 2 == 0;
        let (head, tail) = records.split_at(shots.min(records.len()));
        if base {
            split.base_labels.push(label);
            let (val, test) = tail.split_at(val_per_class.min(tail.len()));
            split.train.records.extend(head.iter().map(|r| (*r).clone()));
            split.validation.records.extend(val.iter().map(|r| (*r).clone()));
            split.base_test.records.extend(test.iter().map(|r| (*r).clone()));
        } else {
            split.novel_labels.push(label);
            split.novel_prototypes.records.extend(head.iter().map(|r| (*r).clone()));
            split.novel_test.records.extend(tail.iter().map(|r| (*r).clone()));
        }
    }
    if split.base_labels.is_empty() || split.novel_labels.is_empty() {
        return Err(Error::Protocol("need at least one base and one novel class".into()));
    }
    if split.train.is_empty() || split.novel_prototypes.is_empty() {
        return Err(Error::Protocol("shots must be ≥ 1".into()));
    }
    Ok(split)
}

/// Which class group a prediction is restricted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Base,
    Novel,
}

/// The inference path: frozen encoder, text features, bank and aggregator.
/// No teacher factorization and no granule branch.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceModel {
    pub encoder: ToyVisualEncoder,
    pub bank: Option<SemanticBank>,
    pub aggregator: Aggregator,
    pub eta: f64,
    pub logit_scale: f64,
    pub base_labels: Vec<u32>,
    pub base_text: TextFeatureSet,
    pub novel_labels: Vec<u32>,
    pub novel_text: TextFeatureSet,
}

/// ℓ2-normalized mean visual embedding per class, in label order.
pub fn class_prototypes(
    encoder: &ToyVisualEncoder,
    cache: &LatentCache,
) -> Result<(Vec<u32>, Matrix)> {
    let labels = cache.labels();
    let index = label_index(&labels);
    let mut sums = Matrix::zeros(labels.len(), encoder.dim());
    for r in &cache.records {
        let v = encoder.encode(&r.latent)?;
        for (s, x) in sums.row_mut(index[&r.class_label]).iter_mut().zip(&v) {
            *s += x;
        }
    }
    let rows: Vec<Vec<f64>> = sums.iter_rows().map(l2_normalize).collect::<Result<_>>()?;
    Ok((labels, Matrix::from_rows(&rows)?))
}

impl InferenceModel {
    /// Keeps only what inference needs from a checkpoint; novel rows are
    /// frozen prototypes of `novel_prototypes`.
    pub fn from_checkpoint(ckpt: &Checkpoint, novel_prototypes: &LatentCache) -> Result<Self> {
        let encoder = ckpt.encoder();
        let cfg = &ckpt.config;
        let (novel_labels, novel_raw) = class_prototypes(&encoder, novel_prototypes)?;
        let agg = ckpt.model.aggregator.clone();
        let base_text =
            TextFeatureSet::build(ckpt.model.text.clone(), ckpt.bank.as_ref(), &agg, cfg.eta)?;
        let novel_text = TextFeatureSet::build(novel_raw, ckpt.bank.as_ref(), &agg, cfg.eta)?;
        Ok(InferenceModel {
            encoder,
            bank: ckpt.bank.clone(),
            aggregator: agg,
            eta: cfg.eta,
            logit_scale: cfg.logit_scale,
            base_labels: ckpt.class_labels.clone(),
            base_text,
            novel_labels,
            novel_text,
        })
    }

    pub fn from_state(state: &TrainState, novel_prototypes: &LatentCache) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::from_state(state), novel_prototypes)
    }

    /// Logits and predicted cache label within `group`.
    pub fn predict_latent(&self, z: &LatentTensor, group: Group) -> Result<(Vec<f64>, u32)> {
        let v = self.encoder.encode(z)?;
        let (text, labels) = match group {
            Group::Base => (&self.base_text, &self.base_labels),
            Group::Novel => (&self.novel_text, &self.novel_labels),
        };
        let (logits, k) = predict(&v, text, self.logit_scale);
        Ok((logits, labels[k]))
    }

    /// Percent correct over `cache` within `group`.
    pub fn accuracy(&self, cache: &LatentCache, group: Group) -> Result<f64> {
        if cache.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0;
        for r in &cache.records {
            if self.predict_latent(&r.latent, group)?.1 == r.class_label {
                hits += 1;
            }
        }
        Ok(100.0 * hits as f64 / cache.len() as f64)
    }

    pub fn evaluate(&self, split: &Split) -> Result<EvalResult> {
        Ok(EvalResult::new(
            self.accuracy(&split.base_test, Group::Base)?,
            self.accuracy(&split.novel_test, Group::Novel)?,
        ))
    }
}

/// Percent of counterfactually paired samples (granule from a sample of a
/// different class) whose granule-branch prediction is the granule source
/// label. `None` when no such pair occurs.
pub fn granule_source_accuracy(
    state: &TrainState,
    samples: &[SampleFeatures],
    rounds: usize,
    seed: u64,
) -> Result<Option<f64>> {
    let model = &state.model;
    let s = state.config.logit_scale;
    let refined = state.refined_text()?;
    let highs: Vec<Vec<f64>> = samples
        .iter()
        .map(|x| model.high_head.forward_traced(&x.stats_high).map(|(e, _)| e.vector))
        .collect::<Result<_>>()?;
    let mut rng = crate::trainer::stream_rng(seed, crate::trainer::STREAM_GRANULE_EVAL);
    let (mut hits, mut total) = (0usize, 0usize);
    for _ in 0..rounds {
        let pi = Permutation::random(samples.len(), &mut rng);
        for (i, x) in samples.iter().enumerate() {
            let j = pi.source(i);
            if samples[j].target == x.target {
                continue;
            }
            let anchor = match state.config.anchor {
                SharedAnchorPolicy::RawTextByLabel => model.text.row(x.target).to_vec(),
                SharedAnchorPolicy::RefinedTextByLabel => refined.row(x.target).to_vec(),
                SharedAnchorPolicy::ImageEmbedding => x.v.clone(),
            };
            let c = crate::granule_film::fuse(&anchor, &highs[j], &model.fusion)?;
            let v_g = crate::granule_film::film_modulate(&c, &x.v, &model.film)?;
            let logits: Vec<f64> = model.text.iter_rows().map(|r| s * dot(&v_g, r)).collect();
            total += 1;
            if argmax(&logits) == samples[j].target {
                hits += 1;
            }
        }
    }
    Ok((total > 0).then(|| 100.0 * hits as f64 / total as f64))
}

/// Everything one base-to-novel run produces.
#[derive(Debug, Clone)]
pub struct BaseToNovel {
    pub result: EvalResult,
    pub granule_source_acc: Option<f64>,
    pub state: TrainState,
    pub inference: InferenceModel,
}

/// Trains on the base split of `cache` and evaluates both groups.
pub fn run_on_cache(cache: &LatentCache, cfg: &RunConfig) -> Result<BaseToNovel> {
    let split = split_base_novel(cache, cfg.shots, cfg.val_per_class)?;
    let state = fit_with_validation(&split.train, Some(&split.validation), &cfg.train)?;
    let inference = InferenceModel::from_state(&state, &split.novel_prototypes)?;
    let result = inference.evaluate(&split)?;
    let base_feats = state.cache_features(&split.base_test)?;
    let granule_source_acc =
        granule_source_accuracy(&state, &base_feats, cfg.granule_rounds, cfg.seed)?;
    Ok(BaseToNovel {
        result,
        granule_source_acc,
        state,
        inference,
    })
}

/// Generates the synthetic dataset described by `cfg` and runs the protocol.
pub fn run_base_to_novel(cfg: &RunConfig) -> Result<BaseToNovel> {
    if cfg.dataset.num_classes < 2 {
        return Err(Error::Protocol(format!(
            "base-to-novel needs at least 2 classes, got {}",
            cfg.dataset.num_classes
        )));
    }
    let cache = generate_dataset(&cfg.dataset, cfg.samples_per_class())?;
    run_on_cache(&cache, cfg)
}

/// Tab-delimited metric block.
pub fn format_eval(result: &EvalResult, granule_source_acc: Option<f64>) -> String {
    let mut out = String::from("metric\tvalue\n");
    let _ = writeln!(out, "base_acc\t{:.6}", result.base_acc);
    let _ = writeln!(out, "novel_acc\t{:.6}", result.novel_acc);
    let _ = writeln!(out, "hm\t{:.6}", result.hm);
    let _ = writeln!(out, "gap_percent\t{:.6}", result.gap_percent);
    if let Some(g) = granule_source_acc {
        let _ = writeln!(out, "granule_source_acc\t{g:.6}");
    }
    out
}
