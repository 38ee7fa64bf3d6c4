//! Plain-text checkpoints: training config, bank dump, then one block per
//! parameter tensor (`tensor <name> <rows> <cols>` and its row-major values).

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::ParamTensors;
use crate::semantic_bank::SemanticBank;

use super::{stream_rng, Adam, Model, ToyVisualEncoder, TrainConfig, TrainState, STREAM_BATCH};

const MAGIC: &str = "specpl-checkpoint 1";

/// What a trained run needs at evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub input_shape: (usize, usize, usize),
    pub class_labels: Vec<u32>,
    pub step: u64,
    pub model: Model,
    pub bank: Option<SemanticBank>,
}

impl TrainState {
    /// Restores parameters and bank. Optimizer moments are not saved, so
    /// training resumed from here starts with fresh moments.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        Ok(TrainState {
            config: ckpt.config.clone(),
            encoder: ckpt.encoder(),
            model: ckpt.model.clone(),
            bank: ckpt.bank.clone(),
            optimizer: Adam::new(ckpt.model.num_params(), ckpt.config.learning_rate),
            step: ckpt.step,
            history: Vec::new(),
            epoch_history: Vec::new(),
            class_labels: ckpt.class_labels.clone(),
            rng: stream_rng(ckpt.config.seed, STREAM_BATCH),
        })
    }
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        Checkpoint {
            config: state.config.clone(),
            input_shape: state.encoder.input_shape(),
            class_labels: state.class_labels.clone(),
            step: state.step,
            model: state.model.clone(),
            bank: state.bank.clone(),
        }
    }

    /// The frozen encoder is fully determined by seed, shape and width.
    pub fn encoder(&self) -> ToyVisualEncoder {
        ToyVisualEncoder::new(self.config.seed, self.input_shape, self.config.dim)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# resolved-config\n");
        for (k, v) in self.config.pairs() {
            let _ = writeln!(out, "# {k} = {v}");
        }
        let _ = writeln!(out, "{MAGIC}");
        for (k, v) in self.config.pairs() {
            let _ = writeln!(out, "config {k} {v}");
        }
        let (c, h, w) = self.input_shape;
        let _ = writeln!(out, "input {c} {h} {w}");
        let labels: Vec<String> = self.class_labels.iter().map(u32::to_string).collect();
        let _ = writeln!(out, "classes {}", labels.join(" "));
        let _ = writeln!(out, "step {}", self.step);
        match &self.bank {
            Some(b) => {
                let dump = b.dump();
                let _ = writeln!(out, "bank {}", dump.lines().count());
                out.push_str(&dump);
            }
            None => out.push_str("bank 0\n"),
        }
        let mut views = Vec::new();
        self.model.named_tensors("", &mut views);
        for t in views {
            let _ = writeln!(out, "tensor {} {} {}", t.name, t.rows, t.cols);
            let vals: Vec<String> = t.data.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", vals.join(" "));
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Format(format!("checkpoint ends before {what}")))
        };
        if next("header")? != MAGIC {
            return Err(Error::Format("not a checkpoint".into()));
        }
        let bad = |l: &str| Error::Format(format!("checkpoint line `{l}`"));
        let mut config = TrainConfig::default();
        let mut line = next("config")?;
        while let Some(rest) = line.strip_prefix("config ") {
            let (k, v) = rest.split_once(' ').ok_or_else(|| bad(line))?;
            if !config.set(k, v)? {
                return Err(Error::Format(format!("unknown config key `{k}`")));
            }
            line = next("input")?;
        }
        let dims: Vec<usize> = line
            .strip_prefix("input ")
            .ok_or_else(|| bad(line))?
            .split_whitespace()
            .map(|x| x.parse().map_err(|_| bad(line)))
            .collect::<Result<_>>()?;
        let [c, h, w] = dims[..] else {
            return Err(bad(line));
        };
        let line = next("classes")?;
        let class_labels: Vec<u32> = line
            .strip_prefix("classes")
            .ok_or_else(|| bad(line))?
            .split_whitespace()
            .map(|x| x.parse().map_err(|_| bad(line)))
            .collect::<Result<_>>()?;
        let line = next("step")?;
        let step: u64 = line
            .strip_prefix("step ")
            .and_then(|x| x.parse().ok())
            .ok_or_else(|| bad(line))?;
        let line = next("bank")?;
        let bank_lines: usize = line
            .strip_prefix("bank ")
            .and_then(|x| x.parse().ok())
            .ok_or_else(|| bad(line))?;
        let bank = if bank_lines > 0 {
            let mut dump = String::new();
            for _ in 0..bank_lines {
                dump.push_str(next("bank entries")?);
                dump.push('\n');
            }
            Some(SemanticBank::parse_dump(&dump)?)
        } else {
            None
        };

        let text = Matrix::zeros(class_labels.len(), config.dim);
        let mut model = Model::new(text, c, &mut ChaCha8Rng::seed_from_u64(0));
        let expected: Vec<(String, usize, usize)> = {
            let mut views = Vec::new();
            model.named_tensors("", &mut views);
            views.iter().map(|t| (t.name.clone(), t.rows, t.cols)).collect()
        };
        let mut views = Vec::new();
        model.named_tensors_mut("", &mut views);
        for (view, (name, rows, cols)) in views.into_iter().zip(expected) {
            let line = next("tensor")?;
            let head: Vec<&str> = line.split_whitespace().collect();
            if head.len() != 4 || head[0] != "tensor" || head[1] != name {
                return Err(Error::Format(format!("expected tensor `{name}`, got `{line}`")));
            }
            if head[2] != rows.to_string() || head[3] != cols.to_string() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {}x{}, expected {rows}x{cols}",
                    head[2], head[3]
                )));
            }
            let line = next("tensor values")?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|x| x.parse().map_err(|_| bad(line)))
                .collect::<Result<_>>()?;
            if vals.len() != view.data.len() {
                return Err(Error::Format(format!("tensor `{name}` value count")));
            }
            view.data.copy_from_slice(&vals);
        }
        if next("end")? != "end" {
            return Err(Error::Format("trailing data after tensors".into()));
        }
        Ok(Checkpoint {
            config,
            input_shape: (c, h, w),
            class_labels,
            step,
            model,
            bank,
        })
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_text()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::parse(&text)
}
