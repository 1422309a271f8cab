//! Run configuration: one TOML file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use myopia_core::cohort::{check_pair, SynthParams};
use myopia_core::eval::parse_grid;
use myopia_core::explain::Target;
use myopia_core::imaging::PreprocessConfig;
use myopia_core::mmpn::{MmpnConfig, TrainSchedule};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Encoder {
    /// Three-stage residual stack sized for 64-pixel images.
    #[default]
    Reduced,
    /// ResNet34 stage layout.
    Resnet34,
    /// One 8-channel block; for smoke tests.
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub encoder: Encoder,
    pub lstm_hidden: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            encoder: Encoder::Reduced,
            lstm_hidden: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Input manifest; the training manifest for `train`.
    pub manifest: Option<PathBuf>,
    /// Validation manifest for `train`.
    pub val_manifest: Option<PathBuf>,
    /// Training manifest used by `eval` to fit the baseline-SER models.
    pub baseline_manifest: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ExplainMethod {
    Gradcam,
    Guided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSection {
    /// `p_myopia`, `p_high_myopia` or `serJ`.
    pub target: String,
    pub methods: Vec<ExplainMethod>,
    /// Samples explained when no ids are given.
    pub limit: usize,
    pub ids: Vec<String>,
}

impl Default for ExplainSection {
    fn default() -> Self {
        Self {
            target: "p_high_myopia".into(),
            methods: vec![ExplainMethod::Gradcam, ExplainMethod::Guided],
            limit: 4,
            ids: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub jobs: usize,
    pub n: usize,
    pub m: usize,
    pub synth: SynthParams,
    pub preprocess: PreprocessConfig,
    pub model: ModelSection,
    pub schedule: TrainSchedule,
    /// Cutoff grid of the threshold sweep, `start:end:step`.
    pub sweep_grid: String,
    pub explain: ExplainSection,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            jobs: 1,
            n: 1,
            m: 1,
            synth: SynthParams::default(),
            preprocess: PreprocessConfig::default(),
            model: ModelSection::default(),
            schedule: TrainSchedule::default(),
            sweep_grid: "-8:1:0.1".into(),
            explain: ExplainSection::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let bad = |e: &dyn std::fmt::Display| CliError::Usage(format!("{}: {e}", path.display()));
        let text = std::fs::read_to_string(path).map_err(|e| bad(&e))?;
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| bad(&e))?;
        // A resolved snapshot is itself a valid config.
        table.remove("tool_version");
        table.remove("command");
        toml::Value::Table(table).try_into().map_err(|e| bad(&e))
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.jobs == 0 {
            return Err(CliError::Usage("jobs must be at least 1".into()));
        }
        check_pair(self.n, self.m)?;
        self.synth.validate()?;
        self.preprocess.validate()?;
        self.schedule.validate()?;
        self.model_config().validate()?;
        parse_grid(&self.sweep_grid)?;
        self.explain_target()?;
        Ok(())
    }

    pub fn model_config(&self) -> MmpnConfig {
        let side = self.preprocess.side;
        let mut c = match self.model.encoder {
            Encoder::Reduced => MmpnConfig {
                side,
                n: self.n,
                m: self.m,
                ..MmpnConfig::default()
            },
            Encoder::Resnet34 => MmpnConfig::resnet34(side, self.n, self.m),
            Encoder::Tiny => MmpnConfig {
                side,
                ..MmpnConfig::tiny(self.n, self.m)
            },
        };
        if let Some(h) = self.model.lstm_hidden {
            c.lstm_hidden = h;
        }
        c
    }

    pub fn explain_target(&self) -> CliResult<Target> {
        Ok(self.explain.target.parse()?)
    }

    pub fn out_dir(&self) -> CliResult<&Path> {
        self.paths
            .out
            .as_deref()
            .ok_or_else(|| CliError::Usage("an output directory is required (--out)".into()))
    }

    pub fn manifest(&self) -> CliResult<&Path> {
        let p = self
            .paths
            .manifest
            .as_deref()
            .ok_or_else(|| CliError::Usage("a manifest is required (--manifest)".into()))?;
        require_file(p)?;
        Ok(p)
    }

    /// Image root: `paths.images`, else the manifest's directory.
    pub fn image_root(&self, manifest: &Path) -> CliResult<PathBuf> {
        let root = match &self.paths.images {
            Some(p) => p.clone(),
            None => manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        if !root.as_os_str().is_empty() && !root.is_dir() {
            return Err(CliError::Usage(format!("image directory {} does not exist", root.display())));
        }
        Ok(root)
    }
}

pub fn require_file(p: &Path) -> CliResult<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} does not exist", p.display())))
    }
}

#[derive(Serialize)]
struct Snapshot<'a> {
    tool_version: &'a str,
    command: &'a str,
    #[serde(flatten)]
    config: &'a RunConfig,
}

/// Creates `dir` and writes the resolved configuration into it.
pub fn prepare_out_dir(dir: &Path, command: &str, config: &RunConfig) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let text = toml::to_string(&Snapshot {
        tool_version: TOOL_VERSION,
        command,
        config,
    })
    .map_err(|e| CliError::Usage(format!("cannot serialize config: {e}")))?;
    let path = dir.join(RESOLVED_CONFIG);
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}
