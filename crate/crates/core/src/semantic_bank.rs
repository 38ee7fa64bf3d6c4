//! Frozen bank of unit-norm low-band prototypes.
//!
//! The bank is filled sequentially, then updated by nearest-neighbour EMA.
//! None of these updates are differentiable and the entries never appear in
//! a trainable parameter set. Retrieval is a temperature softmax over inner
//! products and is differentiable w.r.t. the query only.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::linalg::{all_finite, dot, l2_normalize, norm, softmax};

pub const DEFAULT_BANK_SIZE: usize = 64;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BankMode {
    Filling,
    Ema,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticBank {
    capacity: usize,
    dim: usize,
    momentum: f64,
    temperature: f64,
    entries: Vec<Vec<f64>>,
}

/// Soft retrieval weights over the bank and the resulting context vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub weights: Vec<f64>,
    pub context: Vec<f64>,
}

impl SemanticBank {
    pub fn new(capacity: usize, dim: usize, momentum: f64, temperature: f64) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Parameter("bank size and dim must be ≥ 1".into()));
        }
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Parameter(format!("momentum must lie in (0,1), got {momentum}")));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Parameter(format!("temperature must be > 0, got {temperature}")));
        }
        Ok(SemanticBank {
            capacity,
            dim,
            momentum,
            temperature,
            entries: Vec::with_capacity(capacity),
        })
    }

    /// A full bank built directly from unit-norm entries.
    pub fn from_entries(entries: Vec<Vec<f64>>, momentum: f64, temperature: f64) -> Result<Self> {
        let dim = entries.first().map_or(0, Vec::len);
        let mut bank = SemanticBank::new(entries.len(), dim, momentum, temperature)?;
        for e in entries {
            bank.absorb(&e)?;
        }
        Ok(bank)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn fill_count(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[Vec<f64>] {
        &self.entries
    }

    /// Raw entry access for perturbation probes; bypasses normalization.
    pub(crate) fn entries_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.entries
    }

    pub fn mode(&self) -> BankMode {
        if self.entries.len() < self.capacity {
            BankMode::Filling
        } else {
            BankMode::Ema
        }
    }

    pub fn is_full(&self) -> bool {
        self.mode() == BankMode::Ema
    }

    /// Nearest entry by inner product, lowest index on ties.
    pub fn nearest(&self, v: &[f64]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (m, e) in self.entries.iter().enumerate() {
            let s = dot(v, e);
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((m, s));
            }
        }
        best.map(|(m, _)| m)
    }

    /// Sequential fill, then nearest-neighbour EMA with re-normalization.
    pub fn absorb(&mut self, t_low: &[f64]) -> Result<()> {
        if t_low.len() != self.dim {
            return Err(Error::Parameter(format!(
                "bank dim {} but vector has {}",
                self.dim,
                t_low.len()
            )));
        }
        if !all_finite(t_low) {
            return Err(Error::NonFinite("bank input".into()));
        }
        if (norm(t_low) - 1.0).abs() > UNIT_TOL {
            return Err(Error::Parameter("bank input must be unit-norm".into()));
        }
        if self.mode() == BankMode::Filling {
            self.entries.push(t_low.to_vec());
            return Ok(());
        }
        let m = self.nearest(t_low).expect("full bank has entries");
        let mu = self.momentum;
        let blended: Vec<f64> = self.entries[m]
            .iter()
            .zip(t_low)
            .map(|(b, t)| (1.0 - mu) * b + mu * t)
            .collect();
        self.entries[m] = l2_normalize(&blended)?;
        Ok(())
    }

    /// Absorbs every element of `stream` in order.
    pub fn refresh<'a, I>(&mut self, stream: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        if !self.is_full() {
            return Err(Error::State("refresh requires a full bank".into()));
        }
        for v in stream {
            self.absorb(v)?;
        }
        Ok(())
    }

    /// `α = softmax(⟨t, b_m⟩ / τ)`, `r = Σ α_m b_m`.
    pub fn soft_retrieve(&self, query: &[f64]) -> Result<RetrievalResult> {
        if !self.is_full() {
            return Err(Error::State(format!(
                "retrieval from a bank holding {}/{} entries",
                self.fill_count(),
                self.capacity
            )));
        }
        if query.len() != self.dim {
            return Err(Error::Parameter(format!(
                "bank dim {} but query has {}",
                self.dim,
                query.len()
            )));
        }
        if !all_finite(query) {
            return Err(Error::NonFinite("retrieval query".into()));
        }
        let scores: Vec<f64> = self
            .entries
            .iter()
            .map(|b| dot(query, b) / self.temperature)
            .collect();
        let weights = softmax(&scores);
        let mut context = vec![0.0; self.dim];
        for (a, b) in weights.iter().zip(&self.entries) {
            for (c, bi) in context.iter_mut().zip(b) {
                *c += a * bi;
            }
        }
        Ok(RetrievalResult { weights, context })
    }

    /// Gradient of a loss w.r.t. the query, given its gradient w.r.t. the
    /// retrieved context. Entries are constants.
    pub fn retrieve_backward(&self, result: &RetrievalResult, d_context: &[f64]) -> Vec<f64> {
        let d_alpha: Vec<f64> = self.entries.iter().map(|b| dot(d_context, b)).collect();
        let mean: f64 = result
            .weights
            .iter()
            .zip(&d_alpha)
            .map(|(a, d)| a * d)
            .sum();
        let mut d_query = vec![0.0; self.dim];
        for ((a, d), b) in result.weights.iter().zip(&d_alpha).zip(&self.entries) {
            let d_score = a * (d - mean) / self.temperature;
            for (q, bi) in d_query.iter_mut().zip(b) {
                *q += d_score * bi;
            }
        }
        d_query
    }

    /// Plain-text dump: header `M d mu tau`, then one line per filled entry.
    pub fn dump(&self) -> String {
        let mut out = format!(
            "{} {} {:?} {:?}\n",
            self.capacity, self.dim, self.momentum, self.temperature
        );
        for e in &self.entries {
            let line: Vec<String> = e.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    /// Parses a dump produced by [`SemanticBank::dump`].
    pub fn parse_dump(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty bank dump".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Format(format!("bank header `{header}`")));
        }
        let parse_err = |what: &str| Error::Format(format!("bank header field {what}"));
        let capacity: usize = fields[0].parse().map_err(|_| parse_err("M"))?;
        let dim: usize = fields[1].parse().map_err(|_| parse_err("d"))?;
        let momentum: f64 = fields[2].parse().map_err(|_| parse_err("mu"))?;
        let temperature: f64 = fields[3].parse().map_err(|_| parse_err("tau"))?;
        let mut bank = SemanticBank::new(capacity, dim, momentum, temperature)?;
        for (i, line) in lines.enumerate() {
            let values: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Format(format!("bank entry {i}: bad number")))?;
            if values.len() != dim {
                return Err(Error::Format(format!(
                    "bank entry {i}: expected {dim} values, got {}",
                    values.len()
                )));
            }
            if bank.fill_count() == capacity {
                return Err(Error::Format("more bank entries than M".into()));
            }
            // Stored verbatim: re-normalizing would not round-trip bitwise.
            bank.entries.push(values);
        }
        Ok(bank)
    }
}
