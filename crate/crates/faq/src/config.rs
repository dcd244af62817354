//! Run configuration: a TOML file, overridden by command-line flags, and
//! always persisted in resolved form next to the outputs.

use std::fs;
use std::path::{Path, PathBuf};

use faq_core::data::Normalization;
use faq_core::models::ModelSpec;
use faq_core::optim::{LrSchedule, TrainPlan};
use faq_core::train::CalibrationSettings;
use faq_core::PrecisionPolicy;
use serde::{Deserialize, Serialize};

use crate::datasets::DatasetKind;
use crate::error::{Error, Result};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DatasetKind,
    pub dir: PathBuf,
    /// Training images held out for validation (taken from the end).
    #[serde(default)]
    pub validation: usize,
    /// Use only the first `n` training images.
    #[serde(default)]
    pub train_limit: Option<usize>,
    /// Computed from the training split on first use, then stored.
    #[serde(default)]
    pub normalization: Option<Normalization>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrecisionConfig {
    /// Internal bit width; 32 or more trains in float.
    pub bits: u32,
    #[serde(default = "default_clip")]
    pub weight_clip: f64,
}

fn default_clip() -> f64 {
    faq_core::quant::DEFAULT_WEIGHT_CLIP
}

impl PrecisionConfig {
    pub fn float() -> Self {
        Self {
            bits: 32,
            weight_clip: default_clip(),
        }
    }

    pub fn fixed(bits: u32) -> Self {
        Self {
            bits,
            weight_clip: default_clip(),
        }
    }

    pub fn policy(&self) -> PrecisionPolicy {
        let mut p = PrecisionPolicy::fixed(self.bits);
        p.weight_clip = self.weight_clip;
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub noise_probe: bool,
    pub smoothing: f64,
    /// Write every `log_every`-th probe sample.
    pub log_every: usize,
    /// Iterations averaged for the per-layer noise table, inclusive.
    pub window: [usize; 2],
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            noise_probe: false,
            smoothing: faq_core::diagnostics::DEFAULT_SMOOTHING,
            log_every: 10,
            window: [200, 500],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Float checkpoint to fine-tune from.
    #[serde(default)]
    pub baseline: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub precision: PrecisionConfig,
    pub plan: TrainPlan,
    #[serde(default)]
    pub calibration: CalibrationSettings,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
}

/// Flags that override file values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub baseline: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub bits: Option<u32>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub train_limit: Option<usize>,
    pub no_calibration: bool,
    pub noise_probe: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.plan.seed = c.seed;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        if self.precision.bits < 2 {
            return Err(Error::Config("precision.bits must be at least 2".into()));
        }
        if !(self.precision.weight_clip > 0.0) {
            return Err(Error::Config("precision.weight_clip must be positive".into()));
        }
        let s = self.diagnostics.smoothing;
        if !(s > 0.0 && s <= 1.0) {
            return Err(Error::Config("diagnostics.smoothing must be in (0, 1]".into()));
        }
        if self.diagnostics.window[0] > self.diagnostics.window[1] {
            return Err(Error::Config("diagnostics.window must be ordered".into()));
        }
        if let Some(n) = &self.data.normalization {
            n.check(self.model.input_shape()[0])?;
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        self.plan.seed = self.seed;
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        if let Some(b) = &o.baseline {
            self.baseline = Some(b.clone());
        }
        if let Some(d) = &o.data_dir {
            self.data.dir = d.clone();
        }
        if let Some(b) = o.bits {
            self.precision.bits = b;
        }
        if let Some(e) = o.epochs {
            self.plan.epochs = e;
        }
        if let Some(lr) = o.lr {
            self.plan.base_lr = lr;
        }
        if let Some(wd) = o.weight_decay {
            self.plan.weight_decay = wd;
        }
        if let Some(n) = o.train_limit {
            self.data.train_limit = Some(n);
        }
        if o.no_calibration {
            self.calibration.enabled = false;
        }
        if o.noise_probe {
            self.diagnostics.noise_probe = true;
        }
        self.validate()
    }

    /// Writes the resolved configuration into the output directory.
    pub fn persist(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.output_dir).map_err(|e| Error::io(&self.output_dir, e))?;
        let p = self.output_dir.join(RESOLVED_CONFIG);
        fs::write(&p, self.to_toml()).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}

/// Float MNIST baseline: step decay from 0.05, batch 64.
pub fn mnist_baseline(data_dir: &Path, output_dir: &Path) -> RunConfig {
    let seed = 1;
    RunConfig {
        seed,
        output_dir: output_dir.into(),
        baseline: None,
        data: DataConfig {
            kind: DatasetKind::Mnist,
            dir: data_dir.into(),
            validation: 5000,
            train_limit: None,
            normalization: None,
        },
        model: ModelSpec::MnistCnn,
        precision: PrecisionConfig::float(),
        plan: TrainPlan::constant_batch(
            5,
            0.02,
            LrSchedule::Step {
                milestones: vec![3, 4],
                factor: 0.1,
            },
            64,
            seed,
        ),
        calibration: CalibrationSettings::default(),
        diagnostics: DiagnosticsConfig::default(),
    }
}

/// 8-bit fine-tune: one epoch at 1e-4, otherwise the baseline recipe.
pub fn mnist_faq8(baseline: &RunConfig, checkpoint: &Path, output_dir: &Path) -> RunConfig {
    let mut c = baseline.clone();
    c.output_dir = output_dir.into();
    c.baseline = Some(checkpoint.into());
    c.precision = PrecisionConfig::fixed(8);
    c.plan.epochs = 1;
    c.plan.base_lr = 1e-4;
    c.plan.schedule = LrSchedule::Constant;
    c
}

/// 4-bit fine-tune: exponential decay from just above the baseline's final
/// rate down to 1e-6, with reduced weight decay.
pub fn mnist_faq4(baseline: &RunConfig, checkpoint: &Path, output_dir: &Path, epochs: usize) -> RunConfig {
    let mut c = baseline.clone();
    c.output_dir = output_dir.into();
    c.baseline = Some(checkpoint.into());
    c.precision = PrecisionConfig::fixed(4);
    c.plan.epochs = epochs;
    c.plan.base_lr = 0.0015;
    c.plan.schedule = LrSchedule::Exponential {
        decay: TrainPlan::exponential_decay_to(0.0015, 1e-6, epochs),
    };
    c.plan.weight_decay = 0.5e-4;
    c
}

/// 4-bit training from a random initialization, for comparison with
/// fine-tuning. Uses the uncalibrated activation ranges.
pub fn mnist_scratch4(baseline: &RunConfig, output_dir: &Path) -> RunConfig {
    let mut c = baseline.clone();
    c.output_dir = output_dir.into();
    c.baseline = None;
    c.precision = PrecisionConfig::fixed(4);
    c.calibration.enabled = false;
    c.plan.epochs = 8;
    c.plan.base_lr = 0.1;
    c.plan.weight_decay = 2e-3;
    c.plan.schedule = LrSchedule::Step {
        milestones: vec![6, 7],
        factor: 0.1,
    };
    c
}

/// Gradient-noise sweep: one short fine-tuning epoch per precision with the
/// probe attached. 33000 training images give 515 steps at batch 64, enough
/// to cover the averaging window. The rate is higher than for fine-tuning so
/// that steps are not swamped by the 2-bit grid.
pub fn mnist_noise(baseline: &RunConfig, checkpoint: &Path, output_dir: &Path) -> RunConfig {
    let mut c = mnist_faq4(baseline, checkpoint, output_dir, 1);
    c.data.train_limit = Some(38_000);
    c.plan.base_lr = 0.05;
    c.plan.schedule = LrSchedule::Constant;
    c.diagnostics.noise_probe = true;
    c
}
