//! Datasets: synthetic generation, CSV ingestion, and the split protocol.
//!
//! Two missingness notions are deliberately kept apart. A whole modality
//! absent from a sample is *modality-level* missingness — recorded in the
//! sample's combo and later served by the learnable bank, never imputed
//! here. A blank cell inside an otherwise observed modality is *cell-level*
//! missingness — replaced by that column's mean computed over training
//! rows only, so evaluation rows never leak into the statistics.
//!
//! The split protocol reserves validation and test (15% of all samples
//! each, by default) exclusively for full-modality samples, so every model
//! variant is scored on the same inference space; training keeps the
//! remaining full samples plus every partial sample.
//!
//! The synthetic generator draws a class uniformly, a combo from a
//! configured distribution, and observed features as class-mean plus
//! Gaussian noise. Each combo may additionally shift which class pattern
//! the means encode (`combo_class_shift`), making the feature→label rule
//! combination-dependent: a model that cannot condition on the combo is
//! then trained toward conflicting rules. With known means the
//! Bayes-optimal classifier is available as an oracle.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::modality::{ModalityCombo, ModalitySet};
use crate::rng::stream;
use crate::{Error, Result};

/// One sample: per-modality optional feature vectors plus a class label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    /// features[m] is `Some` iff modality m is observed.
    pub features: Vec<Option<Vec<f64>>>,
}

impl Sample {
    pub fn combo(&self, set: &ModalitySet) -> Result<ModalityCombo> {
        let flags: Vec<bool> = self.features.iter().map(|f| f.is_some()).collect();
        set.combo_from_flags(&flags)
    }
}

/// A fully materialized dataset (no cell-level gaps remain).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub set: ModalitySet,
    pub input_dims: Vec<usize>,
    pub classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Checks widths, label ranges, and non-empty combos for every sample.
    pub fn validate(&self) -> Result<()> {
        if self.input_dims.len() != self.set.len() {
            return Err(Error::Schema(format!(
                "{} input dims for {} modalities",
                self.input_dims.len(),
                self.set.len()
            )));
        }
        if self.classes < 2 {
            return Err(Error::Schema(format!("need ≥ 2 classes, got {}", self.classes)));
        }
        for s in &self.samples {
            if s.label >= self.classes {
                return Err(Error::Schema(format!(
                    "sample {} label {} outside {} classes",
                    s.id, s.label, self.classes
                )));
            }
            if s.features.len() != self.set.len() {
                return Err(Error::Schema(format!(
                    "sample {} has {} feature slots for {} modalities",
                    s.id,
                    s.features.len(),
                    self.set.len()
                )));
            }
            s.combo(&self.set)?;
            for (m, f) in s.features.iter().enumerate() {
                if let Some(v) = f {
                    if v.len() != self.input_dims[m] {
                        return Err(Error::Schema(format!(
                            "sample {} modality {} has {} features, expected {}",
                            s.id,
                            self.set.name(m),
                            v.len(),
                            self.input_dims[m]
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of samples observing every modality.
    pub fn full_indices(&self) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.features.iter().all(|f| f.is_some()))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Configuration of the synthetic generator.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub set: ModalitySet,
    pub input_dims: Vec<usize>,
    pub classes: usize,
    /// class_means[y][m] is modality m's mean vector for class pattern y.
    pub class_means: Vec<Vec<Vec<f64>>>,
    pub noise_sigma: f64,
    /// Probability of each non-empty combo, indexed by bitmask − 1.
    pub combo_probs: Vec<f64>,
    /// Per combo (bitmask − 1): the class pattern used for a sample with
    /// true label y is (y + shift) mod classes. All zeros makes the signal
    /// combination-independent.
    pub combo_class_shift: Vec<usize>,
    /// Per combo (bitmask − 1): probability that a sample drawn with this
    /// combo carries the combo's preferred label (`mask % classes`); the
    /// remaining mass spreads uniformly over the other labels. An empty
    /// vector means labels are uniform regardless of combo. A non-empty
    /// vector makes the observation pattern itself informative about the
    /// label, the way untested patients and unordered labs are in clinical
    /// tables.
    pub combo_label_bias: Vec<f64>,
    pub n_samples: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let combos = (1usize << self.set.len()) - 1;
        if self.input_dims.len() != self.set.len() {
            return Err(Error::Config(format!(
                "{} input dims for {} modalities",
                self.input_dims.len(),
                self.set.len()
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need ≥ 2 classes, got {}", self.classes)));
        }
        if !(self.noise_sigma > 0.0) {
            return Err(Error::Config(format!("noise_sigma must be > 0, got {}", self.noise_sigma)));
        }
        if self.combo_probs.len() != combos {
            return Err(Error::Config(format!(
                "{} combo probabilities for {combos} combos",
                self.combo_probs.len()
            )));
        }
        if self.combo_probs.iter().any(|&p| p < 0.0) {
            return Err(Error::Config("combo probabilities must be non-negative".into()));
        }
        let sum: f64 = self.combo_probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("combo probabilities sum to {sum}, expected 1")));
        }
        if self.combo_class_shift.len() != combos {
            return Err(Error::Config(format!(
                "{} combo class shifts for {combos} combos",
                self.combo_class_shift.len()
            )));
        }
        if !self.combo_label_bias.is_empty() {
            if self.combo_label_bias.len() != combos {
                return Err(Error::Config(format!(
                    "{} combo label biases for {combos} combos (empty disables the bias)",
                    self.combo_label_bias.len()
                )));
            }
            if self.combo_label_bias.iter().any(|&b| !(0.0..=1.0).contains(&b)) {
                return Err(Error::Config("combo label biases must lie in [0, 1]".into()));
            }
        }
        if self.class_means.len() != self.classes {
            return Err(Error::Config(format!(
                "{} class mean sets for {} classes",
                self.class_means.len(),
                self.classes
            )));
        }
        for (y, per_mod) in self.class_means.iter().enumerate() {
            if per_mod.len() != self.set.len() {
                return Err(Error::Config(format!(
                    "class {y} has {} mean vectors for {} modalities",
                    per_mod.len(),
                    self.set.len()
                )));
            }
            for (m, mu) in per_mod.iter().enumerate() {
                if mu.len() != self.input_dims[m] {
                    return Err(Error::Config(format!(
                        "class {y} modality {m} mean has length {}, expected {}",
                        mu.len(),
                        self.input_dims[m]
                    )));
                }
            }
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Benchmark recipe: class y's pattern for modality m is a spike of
    /// height `signal` at coordinate (y + m) mod input_dim, and every
    /// partial combo shifts the class pattern by a combo-derived amount, so
    /// decoding requires knowing the combo.
    pub fn planted(
        set: ModalitySet,
        input_dims: Vec<usize>,
        classes: usize,
        signal: f64,
        noise_sigma: f64,
        combo_probs: Vec<f64>,
        n_samples: usize,
        seed: u64,
    ) -> Result<SynthConfig> {
        let combos = (1usize << set.len()) - 1;
        let full_mask = set.full_mask() as usize;
        let mut class_means = vec![vec![Vec::new(); set.len()]; classes];
        for (y, per_mod) in class_means.iter_mut().enumerate() {
            for (m, mu) in per_mod.iter_mut().enumerate() {
                let dim = input_dims[m];
                let mut v = vec![0.0; dim];
                v[(y + m) % dim] = signal;
                *mu = v;
            }
        }
        let combo_class_shift = (0..combos)
            .map(|i| {
                let mask = i + 1;
                if mask == full_mask || classes < 2 {
                    0
                } else {
                    1 + mask % (classes - 1)
                }
            })
            .collect();
        let cfg = SynthConfig {
            set,
            input_dims,
            classes,
            class_means,
            noise_sigma,
            combo_probs,
            combo_class_shift,
            combo_label_bias: Vec::new(),
            n_samples,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Returns the configuration with the given per-combo label bias
    /// installed (see [`SynthConfig::combo_label_bias`]).
    pub fn with_label_bias(mut self, bias: Vec<f64>) -> Result<SynthConfig> {
        self.combo_label_bias = bias;
        self.validate()?;
        Ok(self)
    }

    /// The label a biased combo prefers.
    pub fn preferred_label(&self, combo: &ModalityCombo) -> usize {
        combo.mask() as usize % self.classes
    }

    /// p(label | combo) under the generator: the preferred label gets its
    /// combo's bias mass exactly, the rest spreads uniformly, and a bias of
    /// 1/classes therefore recovers the uniform distribution.
    pub fn label_probability(&self, label: usize, combo: &ModalityCombo) -> f64 {
        let uniform = 1.0 / self.classes as f64;
        if self.combo_label_bias.is_empty() {
            return uniform;
        }
        let b = self.combo_label_bias[(combo.mask() - 1) as usize];
        if label == self.preferred_label(combo) {
            b
        } else {
            (1.0 - b) / (self.classes - 1) as f64
        }
    }

    /// Class pattern encoded in the features of a sample with true label
    /// `label` under `combo`.
    pub fn pattern_of(&self, label: usize, combo: &ModalityCombo) -> usize {
        (label + self.combo_class_shift[(combo.mask() - 1) as usize]) % self.classes
    }
}

/// Draws a dataset from the generator, deterministic per seed.
pub fn synth_generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = stream(config.seed, "synth", 0);
    let m_count = config.set.len();
    let mut cumulative = Vec::with_capacity(config.combo_probs.len());
    let mut acc = 0.0;
    for &p in &config.combo_probs {
        acc += p;
        cumulative.push(acc);
    }

    let mut samples = Vec::with_capacity(config.n_samples);
    for i in 0..config.n_samples {
        let label = rng.gen_range(0..config.classes);
        let u: f64 = rng.gen_range(0.0..1.0);
        let pick = cumulative.iter().position(|&c| u < c).unwrap_or(config.combo_probs.len() - 1);
        let combo = config.set.combo_from_mask((pick + 1) as u32)?;
        let label = if config.combo_label_bias.is_empty() {
            label
        } else {
            // Replace the uniform draw with one from p(label | combo). The
            // uniform draw still happens above so that an empty bias leaves
            // the sample stream untouched.
            let preferred = config.preferred_label(&combo);
            if rng.gen_bool(config.combo_label_bias[pick]) {
                preferred
            } else {
                let r = rng.gen_range(0..config.classes - 1);
                if r >= preferred {
                    r + 1
                } else {
                    r
                }
            }
        };
        let pattern = self_pattern(config, label, &combo);
        let mut features = vec![None; m_count];
        for m in 0..m_count {
            if combo.contains(m) {
                let mu = &config.class_means[pattern][m];
                let v: Vec<f64> = mu
                    .iter()
                    .map(|&c| c + config.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                features[m] = Some(v);
            }
        }
        samples.push(Sample { id: format!("s{i:05}"), label, features });
    }
    let ds = Dataset {
        set: config.set.clone(),
        input_dims: config.input_dims.clone(),
        classes: config.classes,
        samples,
    };
    ds.validate()?;
    Ok(ds)
}

fn self_pattern(config: &SynthConfig, label: usize, combo: &ModalityCombo) -> usize {
    config.pattern_of(label, combo)
}

/// Bayes-optimal prediction with the generator's known means: pick the
/// label maximizing log p(label | combo) − ‖x − μ‖² / (2σ²) over the
/// observed modalities, which is the exact posterior argmax under shared
/// isotropic noise. With uniform labels this reduces to nearest pattern.
/// Ties break to the lowest label.
pub fn bayes_predict(config: &SynthConfig, sample: &Sample) -> Result<usize> {
    let combo = sample.combo(&config.set)?;
    let mut best = (f64::NEG_INFINITY, 0usize);
    for y in 0..config.classes {
        let pattern = config.pattern_of(y, &combo);
        let mut dist = 0.0;
        for m in 0..config.set.len() {
            if let Some(x) = &sample.features[m] {
                let mu = &config.class_means[pattern][m];
                dist += x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
        }
        let score = config.label_probability(y, &combo).ln()
            - dist / (2.0 * config.noise_sigma * config.noise_sigma);
        if score > best.0 {
            best = (score, y);
        }
    }
    Ok(best.1)
}

/// Accuracy of the Bayes-optimal classifier on a dataset drawn from the
/// same configuration.
pub fn bayes_accuracy(config: &SynthConfig, ds: &Dataset) -> Result<f64> {
    let mut hits = 0usize;
    for s in &ds.samples {
        if bayes_predict(config, s)? == s.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / ds.samples.len() as f64)
}

/// Fractions of the dataset reserved for validation and test.
#[derive(Debug, Clone, Copy)]
pub struct SplitRatios {
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> SplitRatios {
        SplitRatios { val: 0.15, test: 0.15 }
    }
}

/// Index partition produced by the split protocol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Draws floor(val·n) validation and floor(test·n) test samples uniformly
/// from the full-modality subset; everything else (all partial samples plus
/// leftover full ones) trains. Deterministic per seed.
pub fn split_indices(full: &[bool], ratios: SplitRatios, seed: u64) -> Result<SplitIndices> {
    let n = full.len();
    if n == 0 {
        return Err(Error::Argument("cannot split an empty dataset".into()));
    }
    if !(ratios.val >= 0.0 && ratios.test >= 0.0 && ratios.val + ratios.test < 1.0) {
        return Err(Error::Argument(format!(
            "split ratios val={} test={} must be non-negative and sum below 1",
            ratios.val, ratios.test
        )));
    }
    let n_val = (ratios.val * n as f64).floor() as usize;
    let n_test = (ratios.test * n as f64).floor() as usize;
    let mut full_idx: Vec<usize> = (0..n).filter(|&i| full[i]).collect();
    if full_idx.len() < n_val + n_test {
        return Err(Error::Split(format!(
            "validation and test require {} full-modality samples, found {}",
            n_val + n_test,
            full_idx.len()
        )));
    }
    // Fisher-Yates on the full-modality indices under a dedicated stream.
    let mut rng = stream(seed, "split", 0);
    for i in (1..full_idx.len()).rev() {
        let j = rng.gen_range(0..=i);
        full_idx.swap(i, j);
    }
    let val: Vec<usize> = {
        let mut v = full_idx[..n_val].to_vec();
        v.sort_unstable();
        v
    };
    let test: Vec<usize> = {
        let mut t = full_idx[n_val..n_val + n_test].to_vec();
        t.sort_unstable();
        t
    };
    let chosen: Vec<bool> = {
        let mut c = vec![false; n];
        for &i in val.iter().chain(&test) {
            c[i] = true;
        }
        c
    };
    let train: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
    Ok(SplitIndices { train, val, test })
}

/// Splits a finalized dataset into train/val/test datasets.
pub fn split_dataset(ds: &Dataset, ratios: SplitRatios, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let full: Vec<bool> = ds.samples.iter().map(|s| s.features.iter().all(|f| f.is_some())).collect();
    let idx = split_indices(&full, ratios, seed)?;
    let take = |ids: &[usize]| Dataset {
        set: ds.set.clone(),
        input_dims: ds.input_dims.clone(),
        classes: ds.classes,
        samples: ids.iter().map(|&i| ds.samples[i].clone()).collect(),
    };
    Ok((take(&idx.train), take(&idx.val), take(&idx.test)))
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

/// A sample as read from disk: observed modalities may still contain
/// cell-level gaps awaiting imputation.
#[derive(Debug, Clone)]
pub struct RawSample {
    pub id: String,
    pub label: usize,
    pub features: Vec<Option<Vec<Option<f64>>>>,
}

/// Ingested but not yet imputed dataset.
#[derive(Debug, Clone)]
pub struct RawDataset {
    pub set: ModalitySet,
    pub input_dims: Vec<usize>,
    pub classes: usize,
    pub samples: Vec<RawSample>,
}

/// Manifest describing a CSV-backed dataset; paths are relative to the
/// manifest file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub modalities: Vec<String>,
    pub input_dims: Vec<usize>,
    /// Per-modality feature CSVs, aligned with `modalities`.
    pub files: Vec<String>,
    /// Label CSV with columns `id,label`.
    pub labels: String,
}

/// Parses one modality's CSV: header `id,<feature columns>`; blank cells
/// are cell-level missing; a sample absent from the file misses the whole
/// modality.
pub fn load_modality_csv(path: &Path, input_dim: usize) -> Result<HashMap<String, Vec<Option<f64>>>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| {
        Error::Schema(format!("{}: {e}", path.display()))
    })?;
    let headers = reader.headers().map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    if headers.is_empty() || headers.get(0) != Some("id") {
        return Err(Error::Schema(format!(
            "{}: first header column must be \"id\", got {:?}",
            path.display(),
            headers.get(0).unwrap_or("")
        )));
    }
    if headers.len() != input_dim + 1 {
        return Err(Error::Schema(format!(
            "{}: {} feature columns, expected {input_dim}",
            path.display(),
            headers.len() - 1
        )));
    }
    let mut rows = HashMap::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        if record.len() != input_dim + 1 {
            return Err(Error::Schema(format!(
                "{}: row {} has {} columns, expected {}",
                path.display(),
                row_idx + 2,
                record.len(),
                input_dim + 1
            )));
        }
        let id = record.get(0).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::Parse(format!("{}: row {} has an empty id", path.display(), row_idx + 2)));
        }
        let mut cells = Vec::with_capacity(input_dim);
        for c in 1..record.len() {
            let raw = record.get(c).unwrap_or("").trim();
            if raw.is_empty() {
                cells.push(None);
            } else {
                let v: f64 = raw.parse().map_err(|_| {
                    Error::Parse(format!(
                        "{}: row {} column {} is not numeric: {raw:?}",
                        path.display(),
                        row_idx + 2,
                        c + 1
                    ))
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse(format!(
                        "{}: row {} column {} is not finite",
                        path.display(),
                        row_idx + 2,
                        c + 1
                    )));
                }
                cells.push(Some(v));
            }
        }
        if rows.insert(id.clone(), cells).is_some() {
            return Err(Error::Schema(format!("{}: duplicate id {id:?}", path.display())));
        }
    }
    Ok(rows)
}

fn load_labels_csv(path: &Path) -> Result<Vec<(String, usize)>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| {
        Error::Schema(format!("{}: {e}", path.display()))
    })?;
    let headers = reader.headers().map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    let expect = ["id", "label"];
    if headers.len() != 2 || headers.get(0) != Some(expect[0]) || headers.get(1) != Some(expect[1]) {
        return Err(Error::Schema(format!(
            "{}: label header must be id,label",
            path.display()
        )));
    }
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let id = record.get(0).unwrap_or("").to_string();
        let label: usize = record.get(1).unwrap_or("").trim().parse().map_err(|_| {
            Error::Parse(format!(
                "{}: row {} label {:?} is not a class index",
                path.display(),
                row_idx + 2,
                record.get(1).unwrap_or("")
            ))
        })?;
        if seen.insert(id.clone(), ()).is_some() {
            return Err(Error::Schema(format!("{}: duplicate id {id:?}", path.display())));
        }
        out.push((id, label));
    }
    if out.is_empty() {
        return Err(Error::Schema(format!("{}: no labeled samples", path.display())));
    }
    Ok(out)
}

/// Loads a manifest and its CSV files into a raw dataset. Sample order
/// follows the label file; modality presence is "the sample has a row in
/// that modality's file".
pub fn load_manifest(path: &Path) -> Result<RawDataset> {
    let text = std::fs::read_to_string(path)?;
    let manifest: DatasetManifest =
        toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let set = ModalitySet::new(manifest.modalities.clone())?;
    if manifest.input_dims.len() != set.len() || manifest.files.len() != set.len() {
        return Err(Error::Schema(format!(
            "{}: modalities, input_dims and files must align",
            path.display()
        )));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &str| -> PathBuf { base.join(p) };

    let labels = load_labels_csv(&resolve(&manifest.labels))?;
    let classes = labels.iter().map(|(_, l)| l + 1).max().expect("non-empty labels");
    if classes < 2 {
        return Err(Error::Schema("labels must span at least 2 classes".into()));
    }

    let mut per_modality = Vec::with_capacity(set.len());
    for (m, file) in manifest.files.iter().enumerate() {
        per_modality.push(load_modality_csv(&resolve(file), manifest.input_dims[m])?);
    }

    let mut samples = Vec::with_capacity(labels.len());
    for (id, label) in labels {
        let features: Vec<Option<Vec<Option<f64>>>> =
            per_modality.iter().map(|rows| rows.get(&id).cloned()).collect();
        if features.iter().all(|f| f.is_none()) {
            return Err(Error::EmptyCombo(format!("sample {id:?} observes no modality")));
        }
        samples.push(RawSample { id, label, features });
    }
    Ok(RawDataset { set, input_dims: manifest.input_dims, classes, samples })
}

/// Column means over the given (training) rows; a column with no observed
/// training value cannot be imputed and is an error.
pub fn training_column_means(raw: &RawDataset, train_rows: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut means = Vec::with_capacity(raw.set.len());
    for m in 0..raw.set.len() {
        let dim = raw.input_dims[m];
        let mut sum = vec![0.0; dim];
        let mut count = vec![0usize; dim];
        for &i in train_rows {
            if let Some(cells) = &raw.samples[i].features[m] {
                for (j, cell) in cells.iter().enumerate() {
                    if let Some(v) = cell {
                        sum[j] += v;
                        count[j] += 1;
                    }
                }
            }
        }
        let mut col_means = vec![0.0; dim];
        for j in 0..dim {
            if count[j] == 0 {
                // Only an error if some row actually needs this column.
                let needed = raw.samples.iter().any(|s| {
                    s.features[m].as_ref().is_some_and(|cells| cells[j].is_none())
                });
                if needed {
                    return Err(Error::Schema(format!(
                        "modality {} column {j} has blanks but no observed training value",
                        raw.set.name(m)
                    )));
                }
            } else {
                col_means[j] = sum[j] / count[j] as f64;
            }
        }
        means.push(col_means);
    }
    Ok(means)
}

/// Splits a raw dataset, fills cell-level gaps in all three splits with
/// training-column means, and materializes final datasets.
pub fn split_and_impute(
    raw: &RawDataset,
    ratios: SplitRatios,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let full: Vec<bool> =
        raw.samples.iter().map(|s| s.features.iter().all(|f| f.is_some())).collect();
    let idx = split_indices(&full, ratios, seed)?;
    let means = training_column_means(raw, &idx.train)?;

    let finalize = |rows: &[usize]| -> Dataset {
        let samples = rows
            .iter()
            .map(|&i| {
                let s = &raw.samples[i];
                let features = s
                    .features
                    .iter()
                    .enumerate()
                    .map(|(m, f)| {
                        f.as_ref().map(|cells| {
                            cells
                                .iter()
                                .enumerate()
                                .map(|(j, c)| c.unwrap_or(means[m][j]))
                                .collect()
                        })
                    })
                    .collect();
                Sample { id: s.id.clone(), label: s.label, features }
            })
            .collect();
        Dataset {
            set: raw.set.clone(),
            input_dims: raw.input_dims.clone(),
            classes: raw.classes,
            samples,
        }
    };
    let train = finalize(&idx.train);
    let val = finalize(&idx.val);
    let test = finalize(&idx.test);
    for ds in [&train, &val, &test] {
        ds.validate()?;
    }
    Ok((train, val, test))
}

/// Writes a dataset back out as manifest + CSVs (the `synth` command's
/// materialization path). Cell values are formatted with full precision.
pub fn write_dataset_csvs(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let manifest = DatasetManifest {
        modalities: ds.set.names().to_vec(),
        input_dims: ds.input_dims.clone(),
        files: ds.set.names().iter().map(|n| format!("{n}.csv")).collect(),
        labels: "labels.csv".into(),
    };
    for m in 0..ds.set.len() {
        let mut w = csv::Writer::from_path(dir.join(&manifest.files[m]))?;
        let mut header = vec!["id".to_string()];
        header.extend((0..ds.input_dims[m]).map(|j| format!("f{j}")));
        w.write_record(&header)?;
        for s in &ds.samples {
            if let Some(v) = &s.features[m] {
                let mut rec = vec![s.id.clone()];
                rec.extend(v.iter().map(|x| format!("{x:.17e}")));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
    }
    let mut w = csv::Writer::from_path(dir.join(&manifest.labels))?;
    w.write_record(["id", "label"])?;
    for s in &ds.samples {
        w.write_record([s.id.clone(), s.label.to_string()])?;
    }
    w.flush()?;

    let manifest_path = dir.join("manifest.toml");
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Schema(format!("manifest serialization: {e}")))?;
    std::fs::write(&manifest_path, text)?;
    Ok(manifest_path)
}
