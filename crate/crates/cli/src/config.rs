//! TOML configuration for the sweep driver, plus the flag overrides the
//! binary may apply on top. Every field has a default, so an absent file or
//! an empty one yields a runnable configuration.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use kvroute_core::attention::ConsensusProfile;
use kvroute_core::config::ModelConfig;
use kvroute_core::mask::{PressKind, Regime};
use kvroute_core::synthdata::Task;

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LabConfig {
    pub model: ModelSection,
    pub sweep: SweepSection,
    pub propositions: PropSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub num_layers: usize,
    pub num_query_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub max_seq: usize,
    pub bytes_per_element: usize,
    pub seed: u64,
    /// Cross-head agreement schedule: flat, funnel, or inverted_funnel.
    pub consensus_profile: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            num_layers: 2,
            num_query_heads: 4,
            num_kv_heads: 2,
            head_dim: 8,
            max_seq: 256,
            bytes_per_element: 2,
            seed: 11,
            consensus_profile: "flat".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub tasks: Vec<String>,
    pub examples_per_task: usize,
    /// Fraction of coreference pronoun questions flipped to an unanswerable
    /// gender, making "I don't know" the gold answer.
    pub swap_fraction: f64,
    pub alpha_grid: Vec<f64>,
    pub presses: Vec<String>,
    pub regimes: Vec<String>,
    pub chunk_size: usize,
    /// Routing-graph edge threshold; omitted means 1/seq_len per pass.
    pub epsilon: Option<f64>,
    pub seed: u64,
    /// When set, ingest this JSONL dataset instead of generating one.
    pub dataset_path: Option<PathBuf>,
    pub emit_heatmaps: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            tasks: vec!["knowledge".to_string(), "coreference".to_string()],
            examples_per_task: 20,
            swap_fraction: 0.15,
            // Mild through severe compression, refined near the cliff.
            alpha_grid: vec![
                0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.95,
            ],
            presses: vec!["chunk".to_string(), "adaptive".to_string()],
            regimes: vec!["agnostic".to_string(), "aware".to_string()],
            chunk_size: 4,
            epsilon: None,
            seed: 2026,
            dataset_path: None,
            emit_heatmaps: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PropSection {
    pub prop1_k: usize,
    pub prop1_p: f64,
    pub prop1_trials: usize,
    pub prop2_seeds: u64,
    pub prop2_perturbations: usize,
    pub prop3_instances: usize,
    pub seed: u64,
}

impl Default for PropSection {
    fn default() -> Self {
        PropSection {
            prop1_k: 3,
            prop1_p: 0.5,
            prop1_trials: 100_000,
            prop2_seeds: 10,
            prop2_perturbations: 16,
            prop3_instances: 200,
            seed: 7,
        }
    }
}

/// Flag-level overrides applied after the file is read.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub alpha_grid: Option<String>,
    pub press: Option<String>,
    pub regime: Option<String>,
    pub seed: Option<u64>,
    pub tasks: Option<String>,
    pub emit_heatmaps: bool,
}

impl LabConfig {
    pub fn load(path: Option<&std::path::Path>) -> Result<LabConfig, CliError> {
        match path {
            None => Ok(LabConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Config(format!("cannot read {}: {e}", p.display()))
                })?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn apply(&mut self, ov: &Overrides) -> Result<(), CliError> {
        if let Some(list) = &ov.alpha_grid {
            let mut grid = Vec::new();
            for part in list.split(',') {
                let part = part.trim();
                let a: f64 = part
                    .parse()
                    .map_err(|_| CliError::Config(format!("bad alpha `{part}`")))?;
                grid.push(a);
            }
            self.sweep.alpha_grid = grid;
        }
        if let Some(press) = &ov.press {
            self.sweep.presses = match press.as_str() {
                "both" => vec!["chunk".to_string(), "adaptive".to_string()],
                other => vec![other.to_string()],
            };
        }
        if let Some(regime) = &ov.regime {
            self.sweep.regimes = match regime.as_str() {
                "both" => vec!["agnostic".to_string(), "aware".to_string()],
                other => vec![other.to_string()],
            };
        }
        if let Some(seed) = ov.seed {
            self.sweep.seed = seed;
        }
        if let Some(tasks) = &ov.tasks {
            self.sweep.tasks = tasks.split(',').map(|t| t.trim().to_string()).collect();
        }
        if ov.emit_heatmaps {
            self.sweep.emit_heatmaps = true;
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_layers: self.model.num_layers,
            num_query_heads: self.model.num_query_heads,
            num_kv_heads: self.model.num_kv_heads,
            head_dim: self.model.head_dim,
            max_seq: self.model.max_seq,
            bytes_per_element: self.model.bytes_per_element,
            seed: self.model.seed,
        }
    }

    pub fn consensus_profile(&self) -> Result<ConsensusProfile, CliError> {
        match self.model.consensus_profile.as_str() {
            "flat" => Ok(ConsensusProfile::Flat),
            "funnel" => Ok(ConsensusProfile::Funnel),
            "inverted_funnel" => Ok(ConsensusProfile::InvertedFunnel),
            other => Err(CliError::Config(format!(
                "unknown consensus profile `{other}`"
            ))),
        }
    }

    pub fn presses(&self) -> Result<Vec<PressKind>, CliError> {
        parse_unique(&self.sweep.presses, "press", |s| match s {
            "chunk" => Some(PressKind::Chunk),
            "adaptive" => Some(PressKind::Adaptive),
            _ => None,
        })
    }

    pub fn regimes(&self) -> Result<Vec<Regime>, CliError> {
        parse_unique(&self.sweep.regimes, "regime", |s| match s {
            "agnostic" => Some(Regime::Agnostic),
            "aware" => Some(Regime::Aware),
            _ => None,
        })
    }

    pub fn tasks(&self) -> Result<Vec<Task>, CliError> {
        parse_unique(&self.sweep.tasks, "task", |s| match s {
            "knowledge" => Some(Task::Knowledge),
            "coreference" => Some(Task::Coreference),
            _ => None,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.consensus_profile()?;
        self.presses()?;
        self.regimes()?;
        self.tasks()?;

        let grid = &self.sweep.alpha_grid;
        if grid.is_empty() {
            return Err(CliError::Config("alpha grid is empty".to_string()));
        }
        for &a in grid {
            if !a.is_finite() || !(0.0..=1.0).contains(&a) {
                return Err(CliError::Config(format!("alpha {a} outside [0, 1]")));
            }
        }
        let mut sorted = grid.clone();
        sorted.sort_by(|x, y| x.partial_cmp(y).expect("finite alphas"));
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::Config("alpha grid has duplicates".to_string()));
        }

        if self.sweep.examples_per_task == 0 {
            return Err(CliError::Config("examples_per_task must be > 0".to_string()));
        }
        if self.sweep.chunk_size == 0 {
            return Err(CliError::Config("chunk_size must be > 0".to_string()));
        }
        if !(0.0..=1.0).contains(&self.sweep.swap_fraction) {
            return Err(CliError::Config(format!(
                "swap_fraction {} outside [0, 1]",
                self.sweep.swap_fraction
            )));
        }
        if let Some(eps) = self.sweep.epsilon {
            if !eps.is_finite() || !(0.0..=1.0).contains(&eps) {
                return Err(CliError::Config(format!("epsilon {eps} outside [0, 1]")));
            }
        }

        let p = &self.propositions;
        if p.prop1_k == 0 || p.prop1_trials == 0 {
            return Err(CliError::Config(
                "prop1_k and prop1_trials must be > 0".to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&p.prop1_p) {
            return Err(CliError::Config(format!(
                "prop1_p {} outside [0, 1]",
                p.prop1_p
            )));
        }
        if p.prop2_seeds == 0 || p.prop2_perturbations == 0 || p.prop3_instances == 0 {
            return Err(CliError::Config(
                "proposition counts must be > 0".to_string(),
            ));
        }
        Ok(())
    }

    /// Sorted alpha grid; validation guarantees no duplicates.
    pub fn sorted_alphas(&self) -> Vec<f64> {
        let mut grid = self.sweep.alpha_grid.clone();
        grid.sort_by(|x, y| x.partial_cmp(y).expect("finite alphas"));
        grid
    }
}

fn parse_unique<T: Copy + PartialEq>(
    names: &[String],
    what: &str,
    parse: impl Fn(&str) -> Option<T>,
) -> Result<Vec<T>, CliError> {
    if names.is_empty() {
        return Err(CliError::Config(format!("no {what} selected")));
    }
    let mut out: Vec<T> = Vec::with_capacity(names.len());
    for name in names {
        let v = parse(name)
            .ok_or_else(|| CliError::Config(format!("unknown {what} `{name}`")))?;
        if out.contains(&v) {
            return Err(CliError::Config(format!("duplicate {what} `{name}`")));
        }
        out.push(v);
    }
    Ok(out)
}
