//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use mgre_core::fit::FitConfig;
use mgre_core::metrics::SsimConfig;
use mgre_core::motion::{CorruptionLevel, MotionScript};
use mgre_core::signal::EchoSchedule;
use mgre_learn::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Phantom,
    Simulate,
    Corrupt,
    Fit,
    Train,
    Infer,
    Evaluate,
    All,
}

impl Stage {
    pub const ORDER: [Stage; 7] =
        [Stage::Phantom, Stage::Simulate, Stage::Corrupt, Stage::Fit, Stage::Train, Stage::Infer, Stage::Evaluate];

    pub fn parse(s: &str) -> Option<Stage> {
        match s {
            "phantom" => Some(Stage::Phantom),
            "simulate" => Some(Stage::Simulate),
            "corrupt" => Some(Stage::Corrupt),
            "fit" => Some(Stage::Fit),
            "train" => Some(Stage::Train),
            "infer" => Some(Stage::Infer),
            "evaluate" => Some(Stage::Evaluate),
            "all" => Some(Stage::All),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    /// `(slices, ny, nz)`.
    pub dims: [usize; 3],
    /// Sub-grid points per axis for `F(t)`.
    pub subgrid: usize,
    /// Relative per-subject jitter of tissue geometry and values.
    pub jitter: f64,
    /// Complex Gaussian noise standard deviation, in signal units.
    pub noise_sigma: f64,
}

impl Default for PhantomSection {
    fn default() -> Self {
        Self { dims: [4, 64, 64], subgrid: 5, jitter: 0.1, noise_sigma: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionSection {
    /// Levels of the held-out test subjects.
    pub levels: Vec<CorruptionLevel>,
    pub seeds_per_level: usize,
    /// Training subjects; their level cycles through `train_levels`.
    pub train_subjects: usize,
    pub train_levels: Vec<CorruptionLevel>,
}

impl Default for MotionSection {
    fn default() -> Self {
        use CorruptionLevel::*;
        Self {
            levels: vec![Light, Moderate, Heavy],
            seeds_per_level: 3,
            train_subjects: 16,
            train_levels: vec![Light, Moderate, Heavy],
        }
    }
}

/// A motion script bound to the subject it corrupts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRecord {
    pub subject: String,
    pub script: MotionScript,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub stage: Stage,
    pub phantom: PhantomSection,
    pub echo: EchoSchedule,
    pub motion: MotionSection,
    pub fit: FitConfig,
    pub train: TrainConfig,
    pub ssim: SsimConfig,
    /// Motion scripts to replay instead of sampling. A manifest carries the
    /// scripts of its run here.
    pub scripts: Vec<ScriptRecord>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("run"),
            stage: Stage::All,
            phantom: PhantomSection::default(),
            echo: EchoSchedule::default(),
            motion: MotionSection::default(),
            fit: FitConfig::default(),
            train: TrainConfig {
                epochs: 200,
                batch_size: 4,
                learning_rate: 2e-3,
                schedule: mgre_learn::train::Schedule::Cosine,
                crop: Some(32),
                ..TrainConfig::default()
            },
            ssim: SsimConfig::default(),
            scripts: Vec::new(),
        }
    }
}

fn bad(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("field `{field}`: {msg}"))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let [l, ny, nz] = self.phantom.dims;
        if l == 0 || ny < 32 || nz < 32 {
            return Err(bad("phantom.dims", "needs at least [1, 32, 32]"));
        }
        if ny % 4 != 0 || nz % 4 != 0 {
            return Err(bad("phantom.dims", "ny and nz must be multiples of 4 for the network"));
        }
        if self.phantom.subgrid == 0 {
            return Err(bad("phantom.subgrid", "must be >= 1"));
        }
        if !(0.0..0.5).contains(&self.phantom.jitter) {
            return Err(bad("phantom.jitter", "must lie in [0, 0.5)"));
        }
        if !(self.phantom.noise_sigma >= 0.0 && self.phantom.noise_sigma.is_finite()) {
            return Err(bad("phantom.noise_sigma", "must be finite and >= 0"));
        }
        self.echo.validate().map_err(|e| bad("echo", e))?;
        if self.echo.n_echoes < 3 {
            return Err(bad("echo.n_echoes", "fitting needs at least 3 echoes"));
        }
        if self.motion.levels.is_empty() || self.motion.seeds_per_level == 0 {
            return Err(bad("motion.levels", "need at least one level and one seed per level"));
        }
        if self.motion.train_subjects == 0 || self.motion.train_levels.is_empty() {
            return Err(bad("motion.train_subjects", "need at least one training subject and level"));
        }
        self.fit.validate().map_err(|e| bad("fit", e))?;
        self.train.validate().map_err(|e| bad("train", e))?;
        if let Some(c) = self.train.crop {
            if c % 4 != 0 || c > ny.min(nz) {
                return Err(bad("train.crop", "must be a multiple of 4 no larger than the slice"));
            }
        }
        if self.ssim.window.is_multiple_of(2) || self.ssim.sigma <= 0.0 {
            return Err(bad("ssim", "window must be odd and sigma positive"));
        }
        Ok(())
    }
}
