//! Frozen toy visual encoder, trainable model, optimization loop and the
//! finite-difference harness.

mod checkpoint;
mod graph;
mod gradcheck;
mod optim;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use graph::{evaluate_objective, GradRequest, ObjectiveEval, Term};
pub use gradcheck::{gradient_check, prepare_gradient_check, ExcludedProbe, GradCheckReport, ParamCheck};
pub use optim::Adam;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::granule_film::{FilmNet, FusionNet, Permutation, SharedAnchorPolicy};
use crate::latent_teacher::{LatentCache, LatentTensor};
use crate::linalg::{dot, l2_normalize, Matrix};
use crate::nn::{NamedTensor, NamedTensorMut, ParamTensors};
use crate::objectives::{LossBreakdown, LossWeights, DEFAULT_LOGIT_SCALE};
use crate::semantic_bank::{
    SemanticBank, DEFAULT_BANK_SIZE, DEFAULT_MOMENTUM, DEFAULT_TEMPERATURE,
};
use crate::spectral_proxy::{band_stats, factorize, Band, ProjectionHead};
use crate::text_refinement::{refine_all, Aggregator};

// Independent ChaCha streams per purpose, all under one seed.
const STREAM_ENCODER: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_BATCH: u64 = 3;
const STREAM_GRADCHECK: u64 = 4;
pub(crate) const STREAM_GRANULE_EVAL: u64 = 5;
const STREAM_GRADCHECK_PARAMS: u64 = 6;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub kernel: usize,
    pub dim: usize,
    pub weights: LossWeights,
    pub bank_size: usize,
    pub bank_temperature: f64,
    pub bank_momentum: f64,
    pub eta: f64,
    pub logit_scale: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub use_bank: bool,
    pub use_sem: bool,
    pub use_gf: bool,
    pub use_gcf: bool,
    pub anchor: SharedAnchorPolicy,
    /// Re-absorb every training embedding into the bank after each epoch.
    pub bank_refresh: bool,
    /// Keep the epoch snapshot with the best base validation accuracy.
    pub select_checkpoint: bool,
    pub text_init_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            kernel: 7,
            dim: 16,
            weights: LossWeights::default(),
            bank_size: DEFAULT_BANK_SIZE,
            bank_temperature: DEFAULT_TEMPERATURE,
            bank_momentum: DEFAULT_MOMENTUM,
            eta: 1.0,
            logit_scale: DEFAULT_LOGIT_SCALE,
            epochs: 100,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            use_bank: true,
            use_sem: true,
            use_gf: true,
            use_gcf: true,
            anchor: SharedAnchorPolicy::default(),
            bank_refresh: false,
            select_checkpoint: false,
            text_init_noise: 0.01,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for key `{key}`")))
}

impl TrainConfig {
    /// Sets one key. Returns `Ok(false)` if the key is not a training key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "kernel" => self.kernel = parse_value(key, value)?,
            "dim" => self.dim = parse_value(key, value)?,
            "lambda_sem" => self.weights.sem = parse_value(key, value)?,
            "lambda_gf" => self.weights.granule_f = parse_value(key, value)?,
            "lambda_gcf" => self.weights.granule_cf = parse_value(key, value)?,
            "bank_size" => self.bank_size = parse_value(key, value)?,
            "bank_temperature" => self.bank_temperature = parse_value(key, value)?,
            "bank_momentum" => self.bank_momentum = parse_value(key, value)?,
            "eta" => self.eta = parse_value(key, value)?,
            "logit_scale" => self.logit_scale = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "use_bank" => self.use_bank = parse_value(key, value)?,
            "use_sem" => self.use_sem = parse_value(key, value)?,
            "use_gf" => self.use_gf = parse_value(key, value)?,
            "use_gcf" => self.use_gcf = parse_value(key, value)?,
            "anchor" => self.anchor = value.trim().parse()?,
            "bank_refresh" => self.bank_refresh = parse_value(key, value)?,
            "select_checkpoint" => self.select_checkpoint = parse_value(key, value)?,
            "text_init_noise" => self.text_init_noise = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every key with its current value, in a fixed order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("kernel", self.kernel.to_string()),
            ("dim", self.dim.to_string()),
            ("lambda_sem", format!("{:?}", self.weights.sem)),
            ("lambda_gf", format!("{:?}", self.weights.granule_f)),
            ("lambda_gcf", format!("{:?}", self.weights.granule_cf)),
            ("bank_size", self.bank_size.to_string()),
            ("bank_temperature", format!("{:?}", self.bank_temperature)),
            ("bank_momentum", format!("{:?}", self.bank_momentum)),
            ("eta", format!("{:?}", self.eta)),
            ("logit_scale", format!("{:?}", self.logit_scale)),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", format!("{:?}", self.learning_rate)),
            ("seed", self.seed.to_string()),
            ("use_bank", self.use_bank.to_string()),
            ("use_sem", self.use_sem.to_string()),
            ("use_gf", self.use_gf.to_string()),
            ("use_gcf", self.use_gcf.to_string()),
            ("anchor", self.anchor.to_string()),
            ("bank_refresh", self.bank_refresh.to_string()),
            ("select_checkpoint", self.select_checkpoint.to_string()),
            ("text_init_noise", format!("{:?}", self.text_init_noise)),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.kernel % 2 == 0 {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.dim == 0 || self.batch_size == 0 {
            return bad("dim and batch_size must be ≥ 1".into());
        }
        let w = self.weights;
        if [w.sem, w.granule_f, w.granule_cf].iter().any(|x| !(*x >= 0.0)) {
            return bad("loss weights must be ≥ 0".into());
        }
        if !(self.logit_scale > 0.0) {
            return bad(format!("logit_scale must be > 0, got {}", self.logit_scale));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta must lie in [0,1], got {}", self.eta));
        }
        if !(self.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be ≥ 0, got {}", self.learning_rate));
        }
        if !(self.text_init_noise >= 0.0) {
            return bad("text_init_noise must be ≥ 0".into());
        }
        if self.use_bank {
            SemanticBank::new(
                self.bank_size,
                self.dim,
                self.bank_momentum,
                self.bank_temperature,
            )?;
        }
        Ok(())
    }

    /// Plain prototype classifier: no bank and no auxiliary terms.
    pub fn baseline(&self) -> Self {
        TrainConfig {
            use_bank: false,
            use_sem: false,
            use_gf: false,
            use_gcf: false,
            weights: LossWeights {
                sem: 0.0,
                granule_f: 0.0,
                granule_cf: 0.0,
            },
            ..self.clone()
        }
    }
}

/// Fixed Gaussian projection `R^{C·h·w} → R^d` followed by ℓ2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyVisualEncoder {
    seed: u64,
    shape: (usize, usize, usize),
    weight: Matrix,
}

impl ToyVisualEncoder {
    pub fn new(seed: u64, shape: (usize, usize, usize), dim: usize) -> Self {
        let fan_in = shape.0 * shape.1 * shape.2;
        let scale = 1.0 / (fan_in as f64).sqrt();
        let mut rng = stream_rng(seed, STREAM_ENCODER);
        let data = (0..dim * fan_in)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g * scale
            })
            .collect();
        ToyVisualEncoder {
            seed,
            shape,
            weight: Matrix {
                rows: dim,
                cols: fan_in,
                data,
            },
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn dim(&self) -> usize {
        self.weight.rows
    }

    pub fn encode(&self, z: &LatentTensor) -> Result<Vec<f64>> {
        if z.shape() != self.shape {
            return Err(Error::Parameter(format!(
                "encoder expects {:?}, got {:?}",
                self.shape,
                z.shape()
            )));
        }
        l2_normalize(&self.weight.matvec(z.data()))
    }
}

/// Everything the objective needs from one sample. All of it is detached
/// from the teacher latent.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleFeatures {
    pub v: Vec<f64>,
    pub stats_low: Vec<f64>,
    pub stats_high: Vec<f64>,
    /// Row of the class in the text matrix.
    pub target: usize,
}

pub fn extract_features(
    encoder: &ToyVisualEncoder,
    z: &LatentTensor,
    kernel: usize,
    target: usize,
) -> Result<SampleFeatures> {
    let v = encoder.encode(z)?;
    let pair = factorize(z, kernel)?;
    Ok(SampleFeatures {
        v,
        stats_low: band_stats(&pair.base),
        stats_high: band_stats(&pair.detail),
        target,
    })
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    /// Raw class text features, one row per trained class.
    pub text: Matrix,
    pub low_head: ProjectionHead,
    pub high_head: ProjectionHead,
    pub aggregator: Aggregator,
    pub fusion: FusionNet,
    pub film: FilmNet,
}

impl ParamTensors for Matrix {
    fn named_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        out.push(NamedTensor {
            name: prefix.to_string(),
            rows: self.rows,
            cols: self.cols,
            data: &self.data,
        });
    }

    fn named_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a>>) {
        out.push(NamedTensorMut {
            name: prefix.to_string(),
            data: &mut self.data,
        });
    }
}

impl ParamTensors for Model {
    fn named_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        let p = |n: &str| if prefix.is_empty() { n.to_string() } else { format!("{prefix}.{n}") };
        self.text.named_tensors(&p("text"), out);
        self.low_head.named_tensors(&p("low_head"), out);
        self.high_head.named_tensors(&p("high_head"), out);
        self.aggregator.named_tensors(&p("aggregator"), out);
        self.fusion.named_tensors(&p("fusion"), out);
        self.film.named_tensors(&p("film"), out);
    }

    fn named_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensorMut<'a>>) {
        let p = |n: &str| if prefix.is_empty() { n.to_string() } else { format!("{prefix}.{n}") };
        self.text.named_tensors_mut(&p("text"), out);
        self.low_head.named_tensors_mut(&p("low_head"), out);
        self.high_head.named_tensors_mut(&p("high_head"), out);
        self.aggregator.named_tensors_mut(&p("aggregator"), out);
        self.fusion.named_tensors_mut(&p("fusion"), out);
        self.film.named_tensors_mut(&p("film"), out);
    }
}

/// Concatenates every tensor of `p` in registry order.
pub fn flatten_params<P: ParamTensors>(p: &P) -> Vec<f64> {
    let mut views = Vec::new();
    p.named_tensors("", &mut views);
    views.iter().flat_map(|t| t.data.iter().copied()).collect()
}

/// Inverse of [`flatten_params`].
pub fn assign_params<P: ParamTensors>(p: &mut P, values: &[f64]) {
    let mut views = Vec::new();
    p.named_tensors_mut("", &mut views);
    let mut offset = 0;
    for t in views {
        let n = t.data.len();
        t.data.copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
    debug_assert_eq!(offset, values.len());
}

impl Model {
    pub fn new<R: Rng>(text: Matrix, channels: usize, rng: &mut R) -> Self {
        let dim = text.cols;
        Model {
            low_head: ProjectionHead::new(channels, dim, Band::Low, rng),
            high_head: ProjectionHead::new(channels, dim, Band::High, rng),
            aggregator: Aggregator::new(dim, rng),
            fusion: FusionNet::new(dim, rng),
            film: FilmNet::new(dim, rng),
            text,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Model {
            text: Matrix::zeros(self.text.rows, self.text.cols),
            low_head: self.low_head.zeros_like(),
            high_head: self.high_head.zeros_like(),
            aggregator: self.aggregator.zeros_like(),
            fusion: self.fusion.zeros_like(),
            film: self.film.zeros_like(),
        }
    }

    pub fn num_params(&self) -> usize {
        let mut views = Vec::new();
        self.named_tensors("", &mut views);
        views.iter().map(|t| t.data.len()).sum()
    }

    /// Overwrites every scalar, zero-initialized layers included, with
    /// `uniform(-scale, scale)`. Layer-norm gains are kept near one.
    pub fn randomize<R: Rng>(&mut self, rng: &mut R, scale: f64) {
        let mut views = Vec::new();
        self.named_tensors_mut("", &mut views);
        for t in views {
            let is_gain = t.name.ends_with(".gain");
            for x in t.data.iter_mut() {
                let u = rng.gen_range(-scale..scale);
                *x = if is_gain { 1.0 + u } else { u };
            }
        }
    }
}

/// Losses of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: LossBreakdown,
}

/// Mean of each loss term over one epoch's optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub cls: f64,
    pub sem: Option<f64>,
    pub granule_f: Option<f64>,
    pub granule_cf: Option<f64>,
    pub total: f64,
}

impl EpochRecord {
    fn from_steps(epoch: usize, steps: &[StepRecord]) -> Self {
        let n = steps.len() as f64;
        let mean = |f: &dyn Fn(&LossBreakdown) -> Option<f64>| -> Option<f64> {
            let vals: Vec<f64> = steps.iter().filter_map(|s| f(&s.loss)).collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        EpochRecord {
            epoch,
            steps: steps.len(),
            cls: steps.iter().map(|s| s.loss.cls).sum::<f64>() / n,
            sem: mean(&|l| l.sem),
            granule_f: mean(&|l| l.granule_f),
            granule_cf: mean(&|l| l.granule_cf),
            total: steps.iter().map(|s| s.loss.total).sum::<f64>() / n,
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:?}"))
}

/// Tab-delimited per-step loss history.
pub fn format_history(history: &[StepRecord]) -> String {
    let mut out = String::from("step\tepoch\tcls\tsem\tgranule_f\tgranule_cf\ttotal\n");
    for r in history {
        let _ = writeln!(
            out,
            "{}\t{}\t{:?}\t{}\t{}\t{}\t{:?}",
            r.step,
            r.epoch,
            r.loss.cls,
            fmt_opt(r.loss.sem),
            fmt_opt(r.loss.granule_f),
            fmt_opt(r.loss.granule_cf),
            r.loss.total
        );
    }
    out
}

/// Encoder, parameters, bank and optimizer of one training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub encoder: ToyVisualEncoder,
    pub model: Model,
    /// Present exactly when `use_bank` is set. Never part of the trainable set.
    pub bank: Option<SemanticBank>,
    pub optimizer: Adam,
    pub step: u64,
    pub history: Vec<StepRecord>,
    pub epoch_history: Vec<EpochRecord>,
    /// Cache label of each text row.
    pub class_labels: Vec<u32>,
    rng: ChaCha8Rng,
}

impl TrainState {
    /// Builds the encoder and initial parameters for `cache`. Text rows start
    /// at the normalized class-mean visual embedding plus Gaussian noise.
    pub fn init(cache: &LatentCache, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let first = cache
            .records
            .first()
            .ok_or_else(|| Error::Parameter("training cache is empty".into()))?;
        let shape = first.latent.shape();
        let encoder = ToyVisualEncoder::new(cfg.seed, shape, cfg.dim);
        let class_labels = cache.labels();
        let index = label_index(&class_labels);

        let mut sums = Matrix::zeros(class_labels.len(), cfg.dim);
        for r in &cache.records {
            let v = encoder.encode(&r.latent)?;
            for (s, x) in sums.row_mut(index[&r.class_label]).iter_mut().zip(&v) {
                *s += x;
            }
        }
        let mut rng = stream_rng(cfg.seed, STREAM_INIT);
        let noise = Normal::new(0.0, cfg.text_init_noise.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::Parameter(e.to_string()))?;
        let mut text = Matrix::zeros(class_labels.len(), cfg.dim);
        for c in 0..class_labels.len() {
            let mean = l2_normalize(sums.row(c))?;
            for (t, m) in text.row_mut(c).iter_mut().zip(&mean) {
                *t = if cfg.text_init_noise > 0.0 {
                    m + noise.sample(&mut rng)
                } else {
                    *m
                };
            }
        }
        let model = Model::new(text, shape.0, &mut rng);
        let bank = if cfg.use_bank {
            Some(SemanticBank::new(
                cfg.bank_size,
                cfg.dim,
                cfg.bank_momentum,
                cfg.bank_temperature,
            )?)
        } else {
            None
        };
        let optimizer = Adam::new(model.num_params(), cfg.learning_rate);
        Ok(TrainState {
            config: cfg.clone(),
            encoder,
            model,
            bank,
            optimizer,
            step: 0,
            history: Vec::new(),
            epoch_history: Vec::new(),
            class_labels,
            rng: stream_rng(cfg.seed, STREAM_BATCH),
        })
    }

    /// Text row of a cache label.
    pub fn target_of(&self, label: u32) -> Result<usize> {
        self.class_labels
            .binary_search(&label)
            .map_err(|_| Error::Parameter(format!("label {label} is not a trained class")))
    }

    pub fn features(&self, z: &LatentTensor, label: u32) -> Result<SampleFeatures> {
        extract_features(&self.encoder, z, self.config.kernel, self.target_of(label)?)
    }

    pub fn cache_features(&self, cache: &LatentCache) -> Result<Vec<SampleFeatures>> {
        cache
            .records
            .iter()
            .map(|r| self.features(&r.latent, r.class_label))
            .collect()
    }

    /// Low-band embeddings under the current head.
    pub fn low_embeddings(&self, batch: &[SampleFeatures]) -> Result<Vec<Vec<f64>>> {
        batch
            .iter()
            .map(|x| {
                self.model
                    .low_head
                    .forward_traced(&x.stats_low)
                    .map(|(e, _)| e.vector)
            })
            .collect()
    }

    /// Absorbs a batch into the bank without touching parameters.
    pub fn absorb(&mut self, batch: &[SampleFeatures]) -> Result<()> {
        let lows = self.low_embeddings(batch)?;
        let bank = self
            .bank
            .as_mut()
            .ok_or_else(|| Error::State("no bank configured".into()))?;
        for t in &lows {
            bank.absorb(t)?;
        }
        Ok(())
    }

    /// Refined text (raw when there is no bank).
    pub fn refined_text(&self) -> Result<Matrix> {
        match &self.bank {
            Some(b) => refine_all(&self.model.text, b, &self.model.aggregator),
            None => Ok(self.model.text.clone()),
        }
    }

    /// One optimizer update on `batch` with a fresh random permutation.
    pub fn train_step(&mut self, batch: &[SampleFeatures]) -> Result<LossBreakdown> {
        let pi = Permutation::random(batch.len(), &mut self.rng);
        self.train_step_with(batch, &pi)
    }

    /// One optimizer update with an explicit granule permutation.
    pub fn train_step_with(
        &mut self,
        batch: &[SampleFeatures],
        pi: &Permutation,
    ) -> Result<LossBreakdown> {
        if let Some(b) = &self.bank {
            if !b.is_full() {
                return Err(Error::State(format!(
                    "train step with a bank holding {}/{} entries",
                    b.fill_count(),
                    b.capacity()
                )));
            }
        }
        let eval = evaluate_objective(
            &self.model,
            self.bank.as_ref(),
            &self.config,
            batch,
            pi,
            None,
            GradRequest::Total,
        )?;
        if let Some(term) = eval.breakdown.non_finite_term() {
            return Err(Error::Divergence { term });
        }
        let grad = eval.grad.expect("gradient requested");
        if !flatten_params(&grad).iter().all(|g| g.is_finite()) {
            return Err(Error::Divergence { term: "gradient" });
        }
        self.optimizer.step(&mut self.model, &grad);
        if let Some(bank) = self.bank.as_mut() {
            for t in &eval.t_low {
                bank.absorb(t)?;
            }
        }
        self.step += 1;
        Ok(eval.breakdown)
    }

    /// Class-stratified batch order for one epoch.
    fn epoch_batches(&mut self, features: &[SampleFeatures]) -> Vec<Vec<usize>> {
        let classes = self.class_labels.len();
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
        for (i, x) in features.iter().enumerate() {
            per_class[x.target].push(i);
        }
        for list in per_class.iter_mut() {
            list.shuffle(&mut self.rng);
        }
        let longest = per_class.iter().map(Vec::len).max().unwrap_or(0);
        let mut order = Vec::with_capacity(features.len());
        for round in 0..longest {
            for list in &per_class {
                if let Some(&i) = list.get(round) {
                    order.push(i);
                }
            }
        }
        order
            .chunks(self.config.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Runs one epoch. Batches seen while the bank is still filling are only
    /// absorbed.
    pub fn run_epoch(&mut self, epoch: usize, features: &[SampleFeatures]) -> Result<()> {
        let mut records = Vec::new();
        for idx in self.epoch_batches(features) {
            let batch: Vec<SampleFeatures> = idx.iter().map(|&i| features[i].clone()).collect();
            if self.bank.as_ref().is_some_and(|b| !b.is_full()) {
                self.absorb(&batch)?;
                continue;
            }
            let loss = self.train_step(&batch)?;
            records.push(StepRecord {
                epoch,
                step: self.step,
                loss,
            });
        }
        if self.config.bank_refresh && self.bank.as_ref().is_some_and(|b| b.is_full()) {
            let lows = self.low_embeddings(features)?;
            if let Some(bank) = self.bank.as_mut() {
                bank.refresh(lows.iter().map(Vec::as_slice))?;
            }
        }
        if !records.is_empty() {
            self.epoch_history.push(EpochRecord::from_steps(epoch, &records));
        }
        self.history.extend(records);
        Ok(())
    }
}

pub(crate) fn label_index(labels: &[u32]) -> BTreeMap<u32, usize> {
    labels.iter().enumerate().map(|(i, &l)| (l, i)).collect()
}

/// Trains on `cache` for `cfg.epochs` epochs.
pub fn fit(cache: &LatentCache, cfg: &TrainConfig) -> Result<TrainState> {
    fit_with_validation(cache, None, cfg)
}

/// As [`fit`]; with `select_checkpoint` set, the returned state is the epoch
/// snapshot with the highest accuracy on `validation` (earliest on ties).
pub fn fit_with_validation(
    cache: &LatentCache,
    validation: Option<&LatentCache>,
    cfg: &TrainConfig,
) -> Result<TrainState> {
    if cache.is_empty() {
        return Err(Error::Parameter("training cache is empty".into()));
    }
    let mut state = TrainState::init(cache, cfg)?;
    let features = state.cache_features(cache)?;
    let val = match (cfg.select_checkpoint, validation) {
        (true, Some(v)) => Some(state.cache_features(v)?),
        (true, None) => {
            return Err(Error::Parameter(
                "select_checkpoint needs a validation split".into(),
            ))
        }
        _ => None,
    };
    let mut best: Option<(f64, TrainState)> = None;
    for epoch in 0..cfg.epochs {
        state.run_epoch(epoch, &features)?;
        if let Some(val) = &val {
            let acc = state.accuracy(val)?;
            if best.as_ref().map_or(true, |(b, _)| acc > *b) {
                best = Some((acc, state.clone()));
            }
        }
    }
    Ok(match best {
        Some((_, snapshot)) => {
            let mut s = snapshot;
            s.history = state.history;
            s.epoch_history = state.epoch_history;
            s
        }
        None => state,
    })
}

impl TrainState {
    /// Percent of samples whose argmax over mixed text matches the target.
    pub fn accuracy(&self, samples: &[SampleFeatures]) -> Result<f64> {
        if samples.is_empty() {
            return Ok(0.0);
        }
        let refined = self.refined_text()?;
        let mixed = crate::text_refinement::mix(&self.model.text, &refined, self.config.eta)?;
        let s = self.config.logit_scale;
        let hits = samples
            .iter()
            .filter(|x| {
                let logits: Vec<f64> = mixed.iter_rows().map(|r| s * dot(&x.v, r)).collect();
                crate::linalg::argmax(&logits) == x.target
            })
            .count();
        Ok(100.0 * hits as f64 / samples.len() as f64)
    }
}

#[cfg(test)]
mod tests;
