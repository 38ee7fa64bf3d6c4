//! Line-oriented `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::latent_teacher::SyntheticSpec;
use crate::spectral_diag::{DEFAULT_BANDS, DEFAULT_GRID};
use crate::trainer::TrainConfig;

pub const SEED_ENV: &str = "SPECPL_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: SyntheticSpec,
    /// Training samples per base class; prototype samples per novel class.
    pub shots: usize,
    /// Base validation samples per class, used by `select_checkpoint`.
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub train: TrainConfig,
    pub diag_kernel: usize,
    pub diag_bands: usize,
    pub diag_grid: usize,
    /// Random permutations used to score granule-source accuracy.
    pub granule_rounds: usize,
    pub cache: PathBuf,
    pub checkpoint: PathBuf,
    pub report: PathBuf,
    pub history: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: SyntheticSpec::default(),
            shots: 16,
            val_per_class: 8,
            test_per_class: 32,
            train: TrainConfig::default(),
            diag_kernel: 7,
            diag_bands: DEFAULT_BANDS,
            diag_grid: DEFAULT_GRID,
            granule_rounds: 4,
            cache: "specpl_cache.bin".into(),
            checkpoint: "specpl.ckpt".into(),
            report: "specpl_report.tsv".into(),
            history: "specpl_history.tsv".into(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for key `{key}`")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        match key {
            "seed" => self.seed = parse(key, value)?,
            "num_classes" => self.dataset.num_classes = parse(key, value)?,
            "base_modes" => self.dataset.base_modes = parse(key, value)?,
            "detail_modes" => self.dataset.detail_modes = parse(key, value)?,
            "noise_std" => self.dataset.noise_std = parse(key, value)?,
            "identity_band" => self.dataset.identity_band = value.parse()?,
            "channels" => self.dataset.channels = parse(key, value)?,
            "height" => self.dataset.height = parse(key, value)?,
            "width" => self.dataset.width = parse(key, value)?,
            "shots" => self.shots = parse(key, value)?,
            "val_per_class" => self.val_per_class = parse(key, value)?,
            "test_per_class" => self.test_per_class = parse(key, value)?,
            "diag_kernel" => self.diag_kernel = parse(key, value)?,
            "diag_bands" => self.diag_bands = parse(key, value)?,
            "diag_grid" => self.diag_grid = parse(key, value)?,
            "granule_rounds" => self.granule_rounds = parse(key, value)?,
            "cache" => self.cache = value.into(),
            "checkpoint" => self.checkpoint = value.into(),
            "report" => self.report = value.into(),
            "history" => self.history = value.into(),
            _ => {
                if !self.train.set(key, value)? {
                    return Err(Error::Config(format!("unknown key `{key}`")));
                }
            }
        }
        self.sync_seed();
        Ok(())
    }

    fn sync_seed(&mut self) {
        self.dataset.seed = self.seed;
        self.train.seed = self.seed;
    }

    /// Applies `key=value` (or `key = value`) assignment text.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{assignment}`")))?;
        self.set(k, v)
    }

    /// Parses config text on top of the defaults. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            cfg.set_assignment(line)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = parse(SEED_ENV, v.trim())?;
            self.sync_seed();
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        let d = &self.dataset;
        let mut out: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("num_classes".into(), d.num_classes.to_string()),
            ("base_modes".into(), d.base_modes.to_string()),
            ("detail_modes".into(), d.detail_modes.to_string()),
            ("noise_std".into(), format!("{:?}", d.noise_std)),
            ("identity_band".into(), d.identity_band.to_string()),
            ("channels".into(), d.channels.to_string()),
            ("height".into(), d.height.to_string()),
            ("width".into(), d.width.to_string()),
            ("shots".into(), self.shots.to_string()),
            ("val_per_class".into(), self.val_per_class.to_string()),
            ("test_per_class".into(), self.test_per_class.to_string()),
        ];
        out.extend(
            self.train
                .pairs()
                .into_iter()
                .filter(|(k, _)| *k != "seed")
                .map(|(k, v)| (k.to_string(), v)),
        );
        out.extend([
            ("diag_kernel".into(), self.diag_kernel.to_string()),
            ("diag_bands".into(), self.diag_bands.to_string()),
            ("diag_grid".into(), self.diag_grid.to_string()),
            ("granule_rounds".into(), self.granule_rounds.to_string()),
            ("cache".into(), self.cache.display().to_string()),
            ("checkpoint".into(), self.checkpoint.display().to_string()),
            ("report".into(), self.report.display().to_string()),
            ("history".into(), self.history.display().to_string()),
        ]);
        out
    }

    /// `# resolved-config` block, one `# key = value` line per key.
    pub fn resolved_header(&self) -> String {
        let mut out = String::from("# resolved-config\n");
        for (k, v) in self.pairs() {
            let _ = writeln!(out, "# {k} = {v}");
        }
        out
    }

    pub fn samples_per_class(&self) -> usize {
        self.shots + self.val_per_class + self.test_per_class
    }
}
