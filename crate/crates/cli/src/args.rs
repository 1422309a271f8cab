use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use myopia_core::mmpn::TrainMode;

use crate::config::{Encoder, ExplainMethod, RunConfig};
use crate::error::{CliError, CliResult};

/// Myopia progression prediction from longitudinal fundus images.
#[derive(Debug, Parser)]
#[command(name = "myopia", version)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for preprocessing and inference.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort: manifest and fundus images.
    Synth(SynthArgs),
    /// Quality-filter and enhance every image of a manifest.
    Preprocess(PreprocessArgs),
    /// Stratified subject-level train/validation split.
    Split(SplitArgs),
    /// Baseline characteristics per split and nPm category.
    Stats(StatsArgs),
    /// Train an nPm model.
    Train(TrainArgs),
    /// Evaluate checkpoints on a labelled manifest.
    Eval(EvalArgs),
    /// Predict for every subject with the required images.
    Predict(PredictArgs),
    /// Threshold-classifier accuracy over a grid of SER cutoffs.
    Sweep(SweepArgs),
    /// Grad-CAM and guided-backpropagation overlays.
    Explain(ExplainArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Preprocess(_) => "preprocess",
            Command::Split(_) => "split",
            Command::Stats(_) => "stats",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Predict(_) => "predict",
            Command::Sweep(_) => "sweep",
            Command::Explain(_) => "explain",
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub subjects: Option<usize>,
    /// Rendered image side in pixels.
    #[arg(long)]
    pub side: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Image root; defaults to the manifest's directory.
    #[arg(long)]
    pub images: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PairArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Output image side in pixels.
    #[arg(long)]
    pub side: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub pair: PairArgs,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Manifest summarized as "All", or as "Train" when `--val` is given.
    #[arg(long, alias = "train")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[command(flatten)]
    pub pair: PairArgs,
    /// Epochs per phase, comma separated, e.g. `10,5,3`.
    #[arg(long, value_delimiter = ',')]
    pub epochs: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    pub encoder: Option<Encoder>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Input image side; must match the preprocessed images.
    #[arg(long)]
    pub side: Option<usize>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ModeArg {
    Joint,
    TwoStage,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Model checkpoint; repeat for several nPm models.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    /// Training manifest for the baseline-SER models.
    #[arg(long)]
    pub baseline_train: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Predictions CSV written by `eval` or `predict`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Cutoff grid `start:end:step`.
    #[arg(long, allow_hyphen_values = true)]
    pub grid: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// p_myopia, p_high_myopia or serJ.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long = "method", value_enum)]
    pub methods: Vec<ExplainMethod>,
    /// Sample ids to explain; defaults to the first `--limit`.
    #[arg(long = "id")]
    pub ids: Vec<String>,
    #[arg(long)]
    pub limit: Option<usize>,
}

fn set<T>(slot: &mut T, v: &Option<T>)
where
    T: Clone,
{
    if let Some(v) = v {
        *slot = v.clone();
    }
}

fn set_opt<T: Clone>(slot: &mut Option<T>, v: &Option<T>) {
    if v.is_some() {
        slot.clone_from(v);
    }
}

impl InputArgs {
    fn apply(&self, c: &mut RunConfig) {
        set_opt(&mut c.paths.manifest, &self.manifest);
        set_opt(&mut c.paths.images, &self.images);
    }
}

impl PairArgs {
    fn apply(&self, c: &mut RunConfig) {
        set(&mut c.n, &self.n);
        set(&mut c.m, &self.m);
    }
}

impl Cli {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut c = RunConfig::load(self.common.config.as_deref())?;
        set(&mut c.seed, &self.common.seed);
        set(&mut c.jobs, &self.common.jobs);
        set_opt(&mut c.paths.out, &self.common.out);
        match &self.command {
            Command::Synth(a) => {
                set(&mut c.synth.subjects, &a.subjects);
                set(&mut c.synth.image_side, &a.side);
            }
            Command::Preprocess(a) => {
                a.input.apply(&mut c);
                set(&mut c.preprocess.side, &a.side);
            }
            Command::Split(a) => {
                set_opt(&mut c.paths.manifest, &a.manifest);
                a.pair.apply(&mut c);
            }
            Command::Stats(a) => {
                set_opt(&mut c.paths.manifest, &a.manifest);
                set_opt(&mut c.paths.val_manifest, &a.val);
            }
            Command::Train(a) => {
                set_opt(&mut c.paths.manifest, &a.train);
                set_opt(&mut c.paths.val_manifest, &a.val);
                set_opt(&mut c.paths.images, &a.images);
                a.pair.apply(&mut c);
                set(&mut c.model.encoder, &a.encoder);
                set(&mut c.preprocess.side, &a.side);
                if let Some(mode) = a.mode {
                    c.schedule.mode = match mode {
                        ModeArg::Joint => TrainMode::Joint,
                        ModeArg::TwoStage => TrainMode::TwoStage,
                    };
                }
                if let Some(epochs) = &a.epochs {
                    if epochs.len() != c.schedule.phases.len() {
                        return Err(CliError::Usage(format!(
                            "--epochs needs {} values, one per phase",
                            c.schedule.phases.len()
                        )));
                    }
                    for (p, &e) in c.schedule.phases.iter_mut().zip(epochs) {
                        p.epochs = e;
                    }
                }
            }
            Command::Eval(a) => {
                a.input.apply(&mut c);
                if !a.checkpoints.is_empty() {
                    c.paths.checkpoints.clone_from(&a.checkpoints);
                }
                set_opt(&mut c.paths.baseline_manifest, &a.baseline_train);
            }
            Command::Predict(a) => {
                a.input.apply(&mut c);
                if let Some(p) = &a.checkpoint {
                    c.paths.checkpoints = vec![p.clone()];
                }
            }
            Command::Sweep(a) => {
                set_opt(&mut c.paths.predictions, &a.predictions);
                set(&mut c.sweep_grid, &a.grid);
            }
            Command::Explain(a) => {
                a.input.apply(&mut c);
                if let Some(p) = &a.checkpoint {
                    c.paths.checkpoints = vec![p.clone()];
                }
                set(&mut c.explain.target, &a.target);
                if !a.methods.is_empty() {
                    c.explain.methods.clone_from(&a.methods);
                }
                if !a.ids.is_empty() {
                    c.explain.ids.clone_from(&a.ids);
                }
                set(&mut c.explain.limit, &a.limit);
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("myopia").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.toml");
        std::fs::write(&cfg, "seed = 3\n[synth]\nsubjects = 50\nimage_side = 48\n").unwrap();
        let c = parse(&["synth", "--config", cfg.to_str().unwrap(), "--subjects", "20"])
            .resolve()
            .unwrap();
        assert_eq!(c.synth.subjects, 20);
        assert_eq!(c.synth.image_side, 48);
        assert_eq!(c.seed, 3);
        assert_eq!(c.jobs, 1);
        let c = parse(&["--seed", "9", "synth", "--config", cfg.to_str().unwrap()])
            .resolve()
            .unwrap();
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn epochs_replace_phase_lengths() {
        let c = parse(&["train", "--epochs", "10,5,3"]).resolve().unwrap();
        let e: Vec<usize> = c.schedule.phases.iter().map(|p| p.epochs).collect();
        assert_eq!(e, vec![10, 5, 3]);
        assert!(matches!(
            parse(&["train", "--epochs", "10,5"]).resolve(),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn negative_grid_parses() {
        let c = parse(&["sweep", "--grid", "-8:1:0.5"]).resolve().unwrap();
        assert_eq!(c.sweep_grid, "-8:1:0.5");
    }

    #[test]
    fn invalid_values_are_usage_errors() {
        let e = parse(&["split", "--n", "5", "--m", "2"]).resolve().unwrap_err();
        assert_eq!(e.exit_code(), 1);
        let e = parse(&["explain", "--target", "bogus"]).resolve().unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }
}
