//! Experiment configuration.
//!
//! The text format is TOML restricted to `[section]` tables of scalar and
//! array values. Every key is optional; an empty file yields the rotated
//! digit recipe (20 tasks, dynamic prototypes).
//!
//! ```toml
//! [stream]
//! kind = "rotation"        # rotation | highlight
//! tasks = 20
//! seed = 0
//! angles = "uniform"       # uniform | even
//! data_dir = "data/mnist"
//! train_limit = 0          # 0 keeps the full split
//! test_limit = 0
//!
//! [highlight]              # highlight streams only
//! domains = ["presentation", "eating", "ingredients", "cooking"]
//! sequences_per_task = [48, 16, 8, 4]
//! test_sequences = 60
//! sequence_length = 300
//!
//! [synth]                  # appearance model of highlight streams
//! feature_dim = 32
//!
//! [model]
//! hidden = [100, 100]
//! feature_dim = 128
//! mode = "dynamic"         # fixed | dynamic
//! prototypes_per_class = 5
//! growth_per_class = 5
//!
//! [optim]
//! learning_rate = 0.1
//! epochs = 1
//! batch_size = 128
//! lr_halve_every = 0       # epochs; 0 keeps the rate constant
//!
//! [constraint]
//! gamma = 0.01
//! lambda = 10.0
//! dual_step = 0.1          # defaults to the learning rate
//!
//! [replay]
//! scheme = "none"          # none | er | der
//! capacity = 0
//! alpha = 0.5
//! batch_size = 128         # defaults to optim.batch_size
//!
//! [run]
//! variant = "gpe"          # gpe | lower_bound | upper_bound
//! trace_sequences = 4
//! ```

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::constraint::PrototypeMode;
use crate::error::{Error, Result};
use crate::replay::ReplayScheme;
use crate::streams::synth::SynthProfile;
use crate::streams::{AngleScheme, HighlightStreamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Rotation,
    Highlight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Gpe,
    #[serde(alias = "lb")]
    LowerBound,
    #[serde(alias = "ub")]
    UpperBound,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Gpe => "gpe",
            Variant::LowerBound => "lower_bound",
            Variant::UpperBound => "upper_bound",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gpe" => Ok(Variant::Gpe),
            "lb" | "lower_bound" => Ok(Variant::LowerBound),
            "ub" | "upper_bound" => Ok(Variant::UpperBound),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub kind: StreamKind,
    pub tasks: usize,
    pub seed: u64,
    pub angles: AngleScheme,
    pub data_dir: PathBuf,
    pub train_limit: usize,
    pub test_limit: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            kind: StreamKind::Rotation,
            tasks: 20,
            seed: 0,
            angles: AngleScheme::Uniform,
            data_dir: PathBuf::from("data/mnist"),
            train_limit: 0,
            test_limit: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub mode: PrototypeMode,
    /// Rows per class at initialization.
    pub prototypes_per_class: usize,
    /// Rows appended per class at each later stage (dynamic mode).
    pub growth_per_class: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![100, 100],
            feature_dim: 128,
            mode: PrototypeMode::Dynamic,
            prototypes_per_class: 5,
            growth_per_class: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_halve_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 1,
            batch_size: 128,
            lr_halve_every: 0,
        }
    }
}

impl OptimConfig {
    /// Rate for a 0-based epoch within a stage.
    pub fn rate_at(&self, epoch: usize) -> f64 {
        match self.lr_halve_every {
            0 => self.learning_rate,
            n => self.learning_rate * 0.5f64.powi((epoch / n) as i32),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstraintConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub dual_step: Option<f64>,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            gamma: 1e-2,
            lambda: 10.0,
            dual_step: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplayConfig {
    pub scheme: ReplayScheme,
    pub capacity: usize,
    pub alpha: f64,
    pub batch_size: Option<usize>,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            scheme: ReplayScheme::None,
            capacity: 0,
            alpha: 0.5,
            batch_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub variant: Variant,
    /// Test sequences whose final-stage score traces are exported.
    pub trace_sequences: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Gpe,
            trace_sequences: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub stream: StreamConfig,
    pub highlight: HighlightStreamConfig,
    pub synth: SynthProfile,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub constraint: ConstraintConfig,
    pub replay: ReplayConfig,
    pub run: RunConfig,
}

/// A violated constraint, located by section and key.
struct Violation {
    section: &'static str,
    key: &'static str,
    message: String,
}

fn violation(section: &'static str, key: &'static str, message: impl Into<String>) -> Violation {
    Violation {
        section,
        key,
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn dual_step(&self) -> f64 {
        self.constraint.dual_step.unwrap_or(self.optim.learning_rate)
    }

    pub fn replay_batch(&self) -> usize {
        self.replay.batch_size.unwrap_or(self.optim.batch_size)
    }

    /// Highlight layout with the stream's task count and synth profile.
    pub fn highlight_stream(&self) -> HighlightStreamConfig {
        HighlightStreamConfig {
            tasks: self.stream.tasks,
            profile: self.synth.clone(),
            ..self.highlight.clone()
        }
    }

    fn violations(&self) -> Option<Violation> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if self.stream.tasks == 0 {
            return Some(violation("stream", "tasks", "tasks must be at least 1"));
        }
        if self.model.hidden.contains(&0) {
            return Some(violation("model", "hidden", "hidden widths must be positive"));
        }
        if self.model.feature_dim == 0 {
            return Some(violation("model", "feature_dim", "feature_dim must be positive"));
        }
        if self.model.prototypes_per_class == 0 {
            return Some(violation("model", "prototypes_per_class", "prototypes_per_class must be at least 1"));
        }
        if self.model.mode == PrototypeMode::Dynamic && self.model.growth_per_class == 0 {
            return Some(violation("model", "growth_per_class", "dynamic mode needs growth_per_class >= 1"));
        }
        if !positive(self.optim.learning_rate) {
            return Some(violation("optim", "learning_rate", "learning_rate must be positive"));
        }
        if self.optim.epochs == 0 {
            return Some(violation("optim", "epochs", "epochs must be at least 1"));
        }
        if self.optim.batch_size == 0 {
            return Some(violation("optim", "batch_size", "batch_size must be at least 1"));
        }
        // Upper-bound runs never consult the constraint settings.
        if self.run.variant != Variant::UpperBound {
            if !positive(self.constraint.gamma) {
                return Some(violation("constraint", "gamma", format!("gamma must be positive, got {}", self.constraint.gamma)));
            }
            if !(self.constraint.lambda >= 0.0 && self.constraint.lambda.is_finite()) {
                return Some(violation("constraint", "lambda", "lambda must be finite and >= 0"));
            }
            if self.constraint.dual_step.is_some_and(|s| !positive(s)) {
                return Some(violation("constraint", "dual_step", "dual_step must be positive"));
            }
        }
        if !(self.replay.alpha >= 0.0 && self.replay.alpha.is_finite()) {
            return Some(violation("replay", "alpha", "alpha must be finite and >= 0"));
        }
        if self.replay.batch_size == Some(0) {
            return Some(violation("replay", "batch_size", "replay batch_size must be at least 1"));
        }
        if self.stream.kind == StreamKind::Highlight {
            if self.stream.tasks > self.highlight.domains.len() {
                return Some(violation("stream", "tasks", "highlight streams need one domain per task"));
            }
            if let Err(e) = self.highlight_stream().validate() {
                return Some(violation("highlight", "", e.to_string()));
            }
        }
        None
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations() {
            Some(v) => Err(Error::Config(v.message)),
            None => Ok(()),
        }
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical text form, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Sets a numeric field by name, for sweeps.
    pub fn set_numeric(&mut self, axis: &str, value: f64) -> Result<()> {
        let count = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!("axis `{axis}` needs a whole number, got {v}")))
            }
        };
        match axis {
            "gamma" => self.constraint.gamma = value,
            "lambda" => self.constraint.lambda = value,
            "dual_step" => self.constraint.dual_step = Some(value),
            "k" | "prototypes_per_class" => self.model.prototypes_per_class = count(value)?,
            "growth_per_class" => self.model.growth_per_class = count(value)?,
            "feature_dim" => self.model.feature_dim = count(value)?,
            "learning_rate" => self.optim.learning_rate = value,
            "epochs" => self.optim.epochs = count(value)?,
            "batch_size" => self.optim.batch_size = count(value)?,
            "capacity" | "buffer" => self.replay.capacity = count(value)?,
            "alpha" => self.replay.alpha = value,
            "tasks" => self.stream.tasks = count(value)?,
            "seed" => self.stream.seed = count(value)? as u64,
            other => return Err(Error::Config(format!("unknown sweep axis `{other}`"))),
        }
        self.validate()
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line holding `key` inside `[section]`, or the section header, or 1.
fn locate(text: &str, section: &str, key: &str) -> usize {
    let mut current = String::new();
    let mut header = None;
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            current = name.trim().to_string();
            if current == section {
                header = Some(i + 1);
            }
            continue;
        }
        if current == section && !key.is_empty() {
            if let Some((k, _)) = t.split_once('=') {
                if k.trim() == key {
                    return i + 1;
                }
            }
        }
    }
    header.unwrap_or(1)
}

/// Parses and validates a configuration; errors carry a 1-based line.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::ConfigParse {
        line: e.span().map_or(1, |s| line_of(text, s.start)),
        message: e.message().to_string(),
    })?;
    if let Some(v) = cfg.violations() {
        return Err(Error::ConfigParse {
            line: locate(text, v.section, v.key),
            message: v.message,
        });
    }
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<std::path::Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
