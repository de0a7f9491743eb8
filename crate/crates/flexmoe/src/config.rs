//! Flat TOML run configuration shared by the CLI and FFI surfaces.
//!
//! One file describes a whole run: modality layout, architecture sizes,
//! optimizer settings, replicate seeds, the data source, and the output
//! directory. Every field has a default, so an empty document is a valid
//! configuration (synthetic data, stock hyperparameters). Unknown keys are
//! rejected rather than ignored, so typos fail loudly.
//!
//! Data source: when `manifest` is set it names a dataset manifest on disk
//! and the `synth_*` fields are ignored; otherwise a synthetic dataset with a
//! planted combination-dependent signal is generated in-process. Either way
//! the split protocol (validation/test drawn from fully observed samples
//! only, imputation statistics from the training split only) is applied with
//! `data_seed`, keeping the data fixed while `seeds` varies the replicates.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{split_and_impute, split_dataset, synth_generate, Dataset, SplitRatios, SynthConfig};
use crate::modality::ModalitySet;
use crate::model::{ArchConfig, MissingFill};
use crate::train::{CurriculumDirection, TrainConfig};
use crate::{Error, Result};

fn default_modalities() -> Vec<String> {
    ["image", "genetic", "clinical", "biospecimen"].map(String::from).to_vec()
}
fn default_input_dims() -> Vec<usize> {
    vec![16, 12, 10, 8]
}
fn default_classes() -> usize {
    3
}
fn default_d() -> usize {
    128
}
fn default_experts() -> usize {
    16
}
fn default_top_k() -> usize {
    4
}
fn default_heads() -> usize {
    4
}
fn default_layers() -> usize {
    1
}
fn default_missing_fill() -> String {
    "bank".into()
}
fn default_epochs() -> usize {
    50
}
fn default_warmup_epochs() -> usize {
    5
}
fn default_learning_rate() -> f64 {
    1e-4
}
fn default_batch_size() -> usize {
    8
}
fn default_lambda_aux() -> f64 {
    0.01
}
fn default_curriculum() -> String {
    "most-observed-first".into()
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_out_dir() -> String {
    "runs/flexmoe".into()
}
fn default_synth_samples() -> usize {
    800
}
fn default_synth_signal() -> f64 {
    1.2
}
fn default_synth_noise() -> f64 {
    0.4
}
fn default_data_seed() -> u64 {
    7
}
fn default_val_fraction() -> f64 {
    0.15
}
fn default_test_fraction() -> f64 {
    0.15
}

/// The complete, flat run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Modality names; order fixes bit positions, expert indices, bank rows.
    #[serde(default = "default_modalities")]
    pub modalities: Vec<String>,
    /// Raw feature width per modality (synthetic source only; a manifest
    /// carries its own dims).
    #[serde(default = "default_input_dims")]
    pub input_dims: Vec<usize>,
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Shared embedding width.
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_experts")]
    pub experts: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Number of stacked mixture layers.
    #[serde(default = "default_layers")]
    pub layers: usize,
    /// How unobserved modalities are represented: "bank" (learnable
    /// per-combination vectors), "global" (one shared learnable vector), or
    /// "zeros".
    #[serde(default = "default_missing_fill")]
    pub missing_fill: String,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_warmup_epochs")]
    pub warmup_epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lambda_aux")]
    pub lambda_aux: f64,
    /// Warm-up visit order: "most-observed-first" or "least-observed-first".
    #[serde(default = "default_curriculum")]
    pub curriculum: String,
    /// Replicate seeds; metrics are aggregated as mean ± std across them.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    /// Dataset manifest path. When set, `synth_*` fields are ignored.
    #[serde(default)]
    pub manifest: Option<String>,
    #[serde(default = "default_synth_samples")]
    pub synth_samples: usize,
    /// Height of the planted class spike in the synthetic generator.
    #[serde(default = "default_synth_signal")]
    pub synth_signal: f64,
    #[serde(default = "default_synth_noise")]
    pub synth_noise: f64,
    /// Probability of each non-empty modality combination, in mask order
    /// (length 2^|M| − 1). Omitted: half full-modality, half spread evenly
    /// over the partial combinations.
    #[serde(default)]
    pub synth_combo_probs: Option<Vec<f64>>,
    /// Probability that a partial-combination sample carries its
    /// combination's preferred label (the rest spreads uniformly), which
    /// makes the observation pattern itself informative. 0 keeps labels
    /// uniform everywhere; fully observed samples are always uniform.
    #[serde(default)]
    pub synth_label_bias: f64,
    /// Seed for data generation and splitting (fixed across replicates).
    #[serde(default = "default_data_seed")]
    pub data_seed: u64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        toml::from_str("").expect("empty document uses every default")
    }
}

/// Inner message of a config-kind error (avoids doubled "config error:"
/// prefixes when merging fault lists).
fn unwrap_config(e: Error) -> String {
    match e {
        Error::Config(msg) => msg,
        other => other.to_string(),
    }
}

fn parse_missing_fill(s: &str) -> Result<MissingFill> {
    match s {
        "bank" => Ok(MissingFill::Bank),
        "global" => Ok(MissingFill::GlobalVector),
        "zeros" => Ok(MissingFill::Zeros),
        other => Err(Error::Config(format!(
            "missing_fill {other:?} is not one of \"bank\", \"global\", \"zeros\""
        ))),
    }
}

fn parse_curriculum(s: &str) -> Result<CurriculumDirection> {
    match s {
        "most-observed-first" => Ok(CurriculumDirection::MostObservedFirst),
        "least-observed-first" => Ok(CurriculumDirection::LeastObservedFirst),
        other => Err(Error::Config(format!(
            "curriculum {other:?} is not one of \"most-observed-first\", \"least-observed-first\""
        ))),
    }
}

impl RunConfig {
    /// Parses a TOML file, rejecting unknown keys.
    pub fn from_path(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    /// The resolved configuration as a TOML document (checkpoint echo,
    /// reproducibility dump).
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn modality_set(&self) -> Result<ModalitySet> {
        ModalitySet::new(self.modalities.clone())
    }

    /// Checks every field, reporting all violations at once. A plain
    /// shortage of experts (everything else valid) is a capacity error.
    pub fn validate(&self) -> Result<()> {
        let mut faults = Vec::new();

        let set = match self.modality_set() {
            Ok(set) => Some(set),
            Err(e) => {
                faults.push(format!("modalities: {e}"));
                None
            }
        };
        // Parse the enum-like strings once; on failure record the fault and
        // fall back to a stand-in so the downstream validators still run and
        // report their own, independent faults.
        let fill = parse_missing_fill(&self.missing_fill).unwrap_or_else(|e| {
            faults.push(unwrap_config(e));
            MissingFill::Bank
        });
        let curriculum = parse_curriculum(&self.curriculum).unwrap_or_else(|e| {
            faults.push(unwrap_config(e));
            CurriculumDirection::MostObservedFirst
        });
        if self.seeds.is_empty() {
            faults.push("seeds must name at least one replicate".into());
        }
        if self.out_dir.is_empty() {
            faults.push("out_dir must be non-empty".into());
        }
        for (name, v) in [("val_fraction", self.val_fraction), ("test_fraction", self.test_fraction)] {
            if !(v.is_finite() && v > 0.0 && v < 1.0) {
                faults.push(format!("{name} {v} must lie in (0, 1)"));
            }
        }
        if self.val_fraction + self.test_fraction >= 1.0 {
            faults.push(format!(
                "val_fraction + test_fraction = {} leaves no training data",
                self.val_fraction + self.test_fraction
            ));
        }
        if self.manifest.is_none() {
            if self.synth_samples == 0 {
                faults.push("synth_samples must be ≥ 1".into());
            }
            if !(self.synth_noise.is_finite() && self.synth_noise > 0.0) {
                faults.push(format!("synth_noise {} must be finite and > 0", self.synth_noise));
            }
            if !self.synth_signal.is_finite() {
                faults.push(format!("synth_signal {} must be finite", self.synth_signal));
            }
            if !(0.0..=1.0).contains(&self.synth_label_bias) {
                faults.push(format!(
                    "synth_label_bias {} must lie in [0, 1]",
                    self.synth_label_bias
                ));
            }
            if let (Some(probs), Some(set)) = (&self.synth_combo_probs, &set) {
                let want = (1usize << set.len()) - 1;
                if probs.len() != want {
                    faults.push(format!(
                        "synth_combo_probs has {} entries, need one per non-empty combination ({want})",
                        probs.len()
                    ));
                } else {
                    let sum: f64 = probs.iter().sum();
                    if probs.iter().any(|&p| !(p.is_finite() && p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                        faults.push(format!(
                            "synth_combo_probs must be non-negative and sum to 1 (sum {sum})"
                        ));
                    }
                }
            }
        }

        // Architecture and optimizer checks reuse the component validators
        // so each rule lives in one place.
        let mut capacity: Option<Error> = None;
        if let Some(set) = set {
            let arch = ArchConfig {
                set,
                input_dims: self.input_dims.clone(),
                classes: self.classes,
                d: self.d,
                n_experts: self.experts,
                top_k: self.top_k,
                heads: self.heads,
                layers: self.layers,
                missing_fill: fill,
            };
            match arch.validate() {
                Ok(()) => {}
                Err(Error::Capacity(msg)) => capacity = Some(Error::Capacity(msg)),
                Err(e) => faults.push(unwrap_config(e)),
            }
        }
        let tc = TrainConfig {
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            lambda_aux: self.lambda_aux,
            seed: 0,
            curriculum,
        };
        if let Err(e) = tc.validate() {
            faults.push(unwrap_config(e));
        }

        if !faults.is_empty() {
            return Err(Error::Config(faults.join("; ")));
        }
        if let Some(e) = capacity {
            return Err(e);
        }
        Ok(())
    }

    fn arch_for(&self, set: ModalitySet) -> Result<ArchConfig> {
        Ok(ArchConfig {
            set,
            input_dims: self.input_dims.clone(),
            classes: self.classes,
            d: self.d,
            n_experts: self.experts,
            top_k: self.top_k,
            heads: self.heads,
            layers: self.layers,
            missing_fill: parse_missing_fill(&self.missing_fill)?,
        })
    }

    /// Architecture description for model construction.
    pub fn arch(&self) -> Result<ArchConfig> {
        self.arch_for(self.modality_set()?)
    }

    /// Optimizer/loop settings for one replicate seed.
    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            lambda_aux: self.lambda_aux,
            seed,
            curriculum: parse_curriculum(&self.curriculum)?,
        })
    }

    /// The synthetic generator settings (used when no manifest is given).
    pub fn synth_config(&self) -> Result<SynthConfig> {
        let set = self.modality_set()?;
        let combos = (1usize << set.len()) - 1;
        let probs = match &self.synth_combo_probs {
            Some(p) => p.clone(),
            // Default mix: half the mass on the full combination (the split
            // protocol needs ≥ 30% fully observed samples for validation and
            // test), the rest uniform over the partial combinations.
            None => {
                if combos == 1 {
                    vec![1.0]
                } else {
                    let mut p = vec![0.5 / (combos - 1) as f64; combos];
                    p[combos - 1] = 0.5;
                    p
                }
            }
        };
        let cfg = SynthConfig::planted(
            set,
            self.input_dims.clone(),
            self.classes,
            self.synth_signal,
            self.synth_noise,
            probs,
            self.synth_samples,
            self.data_seed,
        )?;
        if self.synth_label_bias > 0.0 {
            let mut bias = vec![self.synth_label_bias; combos];
            bias[combos - 1] = 1.0 / self.classes as f64; // full combo stays uniform
            cfg.with_label_bias(bias)
        } else {
            Ok(cfg)
        }
    }

    /// Rebuilds the model a checkpoint describes: parses the embedded
    /// configuration echo, constructs the architecture, and restores every
    /// parameter. Returns the model with the parsed configuration.
    pub fn model_from_checkpoint(
        ck: &crate::train::Checkpoint,
    ) -> Result<(crate::model::FlexMoeModel, RunConfig)> {
        let cfg: RunConfig = toml::from_str(&ck.echo).map_err(|e| {
            Error::Checkpoint(format!("embedded configuration does not parse: {e}"))
        })?;
        let mut model = crate::model::FlexMoeModel::new(cfg.arch()?, ck.seed)?;
        ck.restore_params(&mut model.store)?;
        Ok((model, cfg))
    }

    /// Produces the (train, validation, test) datasets from the configured
    /// source, applying the split protocol with `data_seed`.
    pub fn materialize(&self) -> Result<(Dataset, Dataset, Dataset)> {
        self.validate()?;
        let ratios = SplitRatios { val: self.val_fraction, test: self.test_fraction };
        match &self.manifest {
            Some(path) => {
                let raw = crate::data::load_manifest(Path::new(path))?;
                split_and_impute(&raw, ratios, self.data_seed)
            }
            None => {
                let ds = synth_generate(&self.synth_config()?)?;
                split_dataset(&ds, ratios, self.data_seed)
            }
        }
    }
}
