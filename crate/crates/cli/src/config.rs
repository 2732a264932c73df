//! Experiment configuration: which model, which schemes, which step sizes,
//! and what to do with the traces.
//!
//! Paths inside the file resolve against the file's own directory.

use std::path::{Path, PathBuf};

use hhcable::channels::load_channels;
use hhcable::integrators::{RkGateMode, SimState};
use hhcable::morphology::load_morphology;
use hhcable::{Model, SchemeKind};
use serde::Deserialize;

use crate::CliError;

/// `1, 2, ..., 99` microseconds.
pub fn default_steps() -> Vec<f64> {
    (1..=99).map(|i| i as f64 * 1e-6).collect()
}

fn default_duration() -> f64 {
    3.0
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisToggles {
    #[serde(default = "yes")]
    pub traces: bool,
    #[serde(default = "yes")]
    pub accuracy: bool,
    #[serde(default = "yes")]
    pub psd: bool,
    #[serde(default = "yes")]
    pub growth_span: bool,
    #[serde(default = "skip")]
    pub skip: usize,
    #[serde(default = "skip")]
    pub cycle_index: usize,
    /// Step of the same-scheme accuracy reference.
    #[serde(default = "micro")]
    pub reference_step: f64,
}

fn skip() -> usize {
    hhcable::analysis::DEFAULT_SKIP
}

fn micro() -> f64 {
    1e-6
}

impl Default for AnalysisToggles {
    fn default() -> Self {
        AnalysisToggles {
            traces: true,
            accuracy: true,
            psd: true,
            growth_span: true,
            skip: skip(),
            cycle_index: skip(),
            reference_step: micro(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilitySettings {
    #[serde(default = "micro")]
    pub reference_step: f64,
    /// Defaults to the experiment duration.
    pub duration: Option<f64>,
    /// Voltage path for the spectral centroid; defaults to the longest
    /// tip-to-tip path.
    pub path: Option<Vec<usize>>,
    #[serde(default = "yes")]
    pub remove_mean: bool,
}

impl Default for StabilitySettings {
    fn default() -> Self {
        StabilitySettings {
            reference_step: micro(),
            duration: None,
            path: None,
            remove_mean: true,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderSettings {
    /// Multiplies every channel's maximal conductance.
    #[serde(default = "order_scale")]
    pub channel_scale: f64,
    #[serde(default = "order_step")]
    pub base_step: f64,
    #[serde(default = "order_levels")]
    pub levels: usize,
    #[serde(default = "order_refine")]
    pub refine: usize,
    #[serde(default = "order_duration")]
    pub duration: f64,
}

fn order_scale() -> f64 {
    0.05
}
fn order_step() -> f64 {
    4e-6
}
fn order_levels() -> usize {
    3
}
fn order_refine() -> usize {
    16
}
fn order_duration() -> f64 {
    0.02
}

impl Default for OrderSettings {
    fn default() -> Self {
        OrderSettings {
            channel_scale: order_scale(),
            base_step: order_step(),
            levels: order_levels(),
            refine: order_refine(),
            duration: order_duration(),
        }
    }
}

/// The file as written.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub morphology: PathBuf,
    pub channels: PathBuf,
    pub schemes: Option<Vec<String>>,
    pub steps: Option<Vec<f64>>,
    #[serde(default = "default_duration")]
    pub duration: f64,
    pub record: Option<Vec<usize>>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub rk_gates: RkGateMode,
    /// Start every run from a saved state (JSON).
    pub initial_state: Option<PathBuf>,
    /// `run` writes its final state here (JSON).
    pub save_final_state: Option<PathBuf>,
    #[serde(default)]
    pub analysis: AnalysisToggles,
    #[serde(default)]
    pub stability: StabilitySettings,
    #[serde(default)]
    pub order: OrderSettings,
}

/// A validated configuration with its model loaded.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub model: Model,
    pub schemes: Vec<SchemeKind>,
    pub steps: Vec<f64>,
    pub duration: f64,
    pub record: Vec<usize>,
    pub out: PathBuf,
    pub rk_gates: RkGateMode,
    pub initial_state: Option<SimState>,
    pub save_final_state: Option<PathBuf>,
    pub analysis: AnalysisToggles,
    pub stability: StabilitySettings,
    pub order: OrderSettings,
    /// Paths of the model files, kept for the order command's rescaled model.
    pub morphology_path: PathBuf,
    pub channels_path: PathBuf,
}

fn config_error(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {msg}", path.display()))
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| config_error(origin, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_error(path, e))?;
        Self::parse(&text, path)
    }
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let config = ExperimentConfig::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_config(config, base)
    }

    pub fn from_config(config: ExperimentConfig, base: &Path) -> Result<Self, CliError> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let morphology_path = resolve(&config.morphology);
        let channels_path = resolve(&config.channels);
        let tree =
            load_morphology(&morphology_path).map_err(|e| config_error(&morphology_path, e))?;
        let channels = load_channels(&channels_path).map_err(|e| config_error(&channels_path, e))?;
        let model = Model::new(tree, channels).map_err(|e| config_error(&channels_path, e))?;

        let schemes = match &config.schemes {
            None => SchemeKind::ALL.to_vec(),
            Some(names) => names
                .iter()
                .map(|n| n.parse().map_err(CliError::Config))
                .collect::<Result<_, _>>()?,
        };
        let steps = config.steps.clone().unwrap_or_else(default_steps);
        validate_steps(&steps, config.duration)?;
        let record = config
            .record
            .clone()
            .unwrap_or_else(|| vec![model.tree().root()]);
        if let Some(&bad) = record.iter().find(|&&id| id >= model.len()) {
            return Err(CliError::Config(format!(
                "record: compartment {bad} does not exist"
            )));
        }
        let initial_state = match &config.initial_state {
            None => None,
            Some(p) => {
                let p = resolve(p);
                let text = std::fs::read_to_string(&p).map_err(|e| config_error(&p, e))?;
                Some(serde_json::from_str(&text).map_err(|e| config_error(&p, e))?)
            }
        };
        Ok(Experiment {
            model,
            schemes,
            steps,
            duration: config.duration,
            record,
            out: resolve(&config.out),
            rk_gates: config.rk_gates,
            initial_state,
            save_final_state: config.save_final_state.as_deref().map(resolve),
            analysis: config.analysis,
            stability: config.stability,
            order: config.order,
            morphology_path,
            channels_path,
        })
    }
}

/// Steps must be positive, strictly increasing and below the duration.
pub fn validate_steps(steps: &[f64], duration: f64) -> Result<(), CliError> {
    if steps.is_empty() {
        return Err(CliError::Config("steps: list is empty".into()));
    }
    if let Some(k) = steps.iter().find(|k| !(k.is_finite() && **k > 0.0)) {
        return Err(CliError::Config(format!("steps: {k} is not a positive step")));
    }
    if steps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CliError::Config("steps: must be sorted ascending without repeats".into()));
    }
    let max = steps[steps.len() - 1];
    if !(duration.is_finite() && duration > max) {
        return Err(CliError::Config(format!(
            "duration {duration} s must exceed the largest step {max} s"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_is_one_to_ninety_nine_micro() {
        let s = default_steps();
        assert_eq!(s.len(), 99);
        assert_eq!(s[0], 1e-6);
        assert!((s[98] - 99e-6).abs() < 1e-18);
        assert!(validate_steps(&s, 3.0).is_ok());
    }

    #[test]
    fn step_validation() {
        assert!(validate_steps(&[], 1.0).is_err());
        assert!(validate_steps(&[2e-6, 1e-6], 1.0).is_err());
        assert!(validate_steps(&[1e-6, -1e-6], 1.0).is_err());
        assert!(validate_steps(&[1e-6, 0.5], 0.5).is_err());
    }

    #[test]
    fn unknown_key_names_the_field() {
        let err = ExperimentConfig::parse(
            "morphology = 'm.toml'\nchannels = 'c.toml'\nduraton = 1.0\n",
            Path::new("x.toml"),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("duraton"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::parse("morphology = 'm'\nchannels = 'c'\n", Path::new("x")).unwrap();
        assert_eq!(c.duration, 3.0);
        assert!(c.steps.is_none());
        assert_eq!(c.analysis.skip, 19);
        assert_eq!(c.order.refine, 16);
    }
}
