//! Curriculum ordering, the Adam training loop, loss logging, and portable
//! checkpoints.
//!
//! Training follows a modality-count curriculum: warm-up epochs visit samples
//! sorted by how many modalities they observe (most-complete first by
//! default), and the remaining epochs use a fresh seed-derived shuffle per
//! epoch. Batches after warm-up therefore mix fully and partially observed
//! samples; each token's routing losses follow its own sample's regime.
//!
//! The optimizer is Adam with per-tensor moment buffers and per-tensor step
//! counts. A tensor whose gradient is identically zero on a step is skipped
//! entirely — no moment decay, no bias-correction advance — so parameters
//! untouched by a batch (an encoder for a modality nobody observed, unread
//! fill-bank rows, never-selected experts) stay byte-identical. Textbook Adam
//! would instead keep decaying their moments and drift them on the next
//! nonzero gradient.
//!
//! All loss logs are written with full-precision scientific formatting so
//! identical (config, seed, data) runs produce byte-identical files.

use std::io::Read;
use std::path::Path;

use crate::data::{Dataset, Sample};
use crate::metrics::{accuracy, argmax_preds};
use crate::model::FlexMoeModel;
use crate::smoe::FlopCounters;
use crate::tensor::{ParamStore, Tape};
use crate::{rng, Error, Result};
use rand::seq::SliceRandom;

/// Adam's first-moment decay.
pub const ADAM_BETA1: f64 = 0.9;
/// Adam's second-moment decay.
pub const ADAM_BETA2: f64 = 0.999;
/// Adam's denominator stabilizer.
pub const ADAM_EPS: f64 = 1e-8;

/// Which end of the modality-count ordering warm-up starts from.
///
/// `MostObservedFirst` is the standard curriculum; `LeastObservedFirst` is
/// the reversed control used to measure the curriculum's contribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurriculumDirection {
    MostObservedFirst,
    LeastObservedFirst,
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Weight λ on the auxiliary losses (steering + balance).
    pub lambda_aux: f64,
    pub seed: u64,
    pub curriculum: CurriculumDirection,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 50,
            warmup_epochs: 5,
            learning_rate: 1e-4,
            batch_size: 8,
            lambda_aux: 0.01,
            seed: 0,
            curriculum: CurriculumDirection::MostObservedFirst,
        }
    }
}

impl TrainConfig {
    /// Checks every field, reporting all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut faults = Vec::new();
        if self.epochs == 0 {
            faults.push("epochs must be ≥ 1".to_string());
        }
        if self.warmup_epochs > self.epochs {
            faults.push(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            faults.push(format!("learning_rate {} must be finite and > 0", self.learning_rate));
        }
        if self.batch_size == 0 {
            faults.push("batch_size must be ≥ 1".to_string());
        }
        if !(self.lambda_aux.is_finite() && self.lambda_aux >= 0.0) {
            faults.push(format!("lambda_aux {} must be finite and ≥ 0", self.lambda_aux));
        }
        if faults.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(faults.join("; ")))
        }
    }
}

/// Stable ordering of sample indices by observed-modality count.
///
/// Ties keep dataset order, so e.g. counts `[2, 4, 3, 4]` order
/// most-observed-first as `[1, 3, 2, 0]`.
pub fn curriculum_order(cardinalities: &[usize], direction: CurriculumDirection) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cardinalities.len()).collect();
    match direction {
        CurriculumDirection::MostObservedFirst => {
            order.sort_by_key(|&i| std::cmp::Reverse(cardinalities[i]));
        }
        CurriculumDirection::LeastObservedFirst => {
            order.sort_by_key(|&i| cardinalities[i]);
        }
    }
    order
}

/// Visit order for one 1-based epoch: curriculum order during warm-up, a
/// per-epoch seed-derived shuffle afterwards.
pub fn epoch_order(
    config: &TrainConfig,
    epoch: usize,
    cardinalities: &[usize],
) -> Result<Vec<usize>> {
    if epoch < 1 || epoch > config.epochs {
        return Err(Error::Argument(format!(
            "epoch {epoch} outside 1..={}",
            config.epochs
        )));
    }
    if epoch <= config.warmup_epochs {
        Ok(curriculum_order(cardinalities, config.curriculum))
    } else {
        let mut order: Vec<usize> = (0..cardinalities.len()).collect();
        let mut rng = rng::stream(config.seed, "epoch-shuffle", epoch as u64);
        order.shuffle(&mut rng);
        Ok(order)
    }
}

/// Scalar composition of the training objective:
/// `task_ce + lambda · (router_ce + balance)`.
///
/// This is the same arithmetic the model performs on the tape; keeping it as
/// a pure function lets logs be cross-checked without a tape.
pub fn compose_total(task_ce: f64, router_ce: f64, balance: f64, lambda: f64) -> Result<f64> {
    for (name, v) in [("task_ce", task_ce), ("router_ce", router_ce), ("balance", balance)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Numeric(format!("{name} {v} must be finite and ≥ 0")));
        }
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Argument(format!("lambda {lambda} must be finite and ≥ 0")));
    }
    Ok(task_ce + lambda * (router_ce + balance))
}

/// Adam moment buffers for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    /// How many nonzero-gradient updates this tensor has received.
    pub steps: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam optimizer state aligned with a parameter store's id order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub slots: Vec<AdamSlot>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> AdamState {
        let slots = store
            .ids()
            .map(|id| {
                let n = store.get(id).len();
                AdamSlot { steps: 0, m: vec![0.0; n], v: vec![0.0; n] }
            })
            .collect();
        AdamState { slots }
    }

    /// One update from the gradients currently held in the store. Tensors
    /// with an identically zero (or absent) gradient are skipped outright.
    pub fn apply(&mut self, store: &mut ParamStore, learning_rate: f64) -> Result<()> {
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(Error::Argument(format!(
                "learning_rate {learning_rate} must be finite and > 0"
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        if ids.len() != self.slots.len() {
            return Err(Error::Argument(format!(
                "optimizer state has {} slots for {} parameters",
                self.slots.len(),
                ids.len()
            )));
        }
        for (slot, &id) in self.slots.iter_mut().zip(&ids) {
            let grad: Vec<f64> = match store.get(id).grad() {
                Some(g) if g.iter().any(|&v| v != 0.0) => g.to_vec(),
                _ => continue,
            };
            if grad.len() != slot.m.len() {
                return Err(Error::Shape(format!(
                    "gradient of {} has {} coordinates, moments have {}",
                    store.name(id),
                    grad.len(),
                    slot.m.len()
                )));
            }
            slot.steps += 1;
            let t = slot.steps as i32;
            let bc1 = 1.0 - ADAM_BETA1.powi(t);
            let bc2 = 1.0 - ADAM_BETA2.powi(t);
            let data = store.get_mut(id).data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                slot.m[i] = ADAM_BETA1 * slot.m[i] + (1.0 - ADAM_BETA1) * g;
                slot.v[i] = ADAM_BETA2 * slot.v[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                data[i] -= learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Loss components recorded after one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub total: f64,
    pub task_ce: f64,
    pub router_ce: f64,
    pub balance: f64,
}

/// Per-epoch summary: mean step losses plus the validation score.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_task_ce: f64,
    pub mean_router_ce: f64,
    pub mean_balance: f64,
    pub val_accuracy: f64,
    /// True when this epoch strictly improved the best validation accuracy.
    pub is_best: bool,
}

/// Everything a finished run hands back.
#[derive(Debug)]
pub struct TrainOutcome {
    /// Model as of the final step.
    pub model: FlexMoeModel,
    /// Parameter snapshot from the best-validation epoch.
    pub best_params: ParamStore,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub optimizer: AdamState,
    pub counters: FlopCounters,
}

impl TrainOutcome {
    /// The final-step model with its parameters replaced by the
    /// best-validation snapshot.
    pub fn best_model(&self) -> FlexMoeModel {
        let mut model = self.model.clone();
        model.store = self.best_params.clone();
        model
    }
}

fn check_dataset(model: &FlexMoeModel, ds: &Dataset, role: &str) -> Result<()> {
    ds.validate()?;
    if ds.input_dims != model.arch.input_dims {
        return Err(Error::Schema(format!(
            "{role} dataset input_dims {:?} differ from model {:?}",
            ds.input_dims, model.arch.input_dims
        )));
    }
    if ds.classes != model.arch.classes {
        return Err(Error::Schema(format!(
            "{role} dataset has {} classes, model expects {}",
            ds.classes, model.arch.classes
        )));
    }
    if ds.set.names() != model.arch.set.names() {
        return Err(Error::Schema(format!(
            "{role} dataset modalities {:?} differ from model {:?}",
            ds.set.names(),
            model.arch.set.names()
        )));
    }
    Ok(())
}

/// One forward/backward/update on a batch. Any non-finite loss (or a numeric
/// failure while computing it) aborts with a diagnostic naming the step.
pub fn train_step(
    model: &mut FlexMoeModel,
    optimizer: &mut AdamState,
    batch: &[&Sample],
    labels: &[usize],
    lambda: f64,
    learning_rate: f64,
    epoch: usize,
    step: u64,
    counters: &mut FlopCounters,
) -> Result<StepRecord> {
    let mut tape = Tape::new();
    let outcome = (|| {
        let fwd = model.forward_batch(&mut tape, batch, counters)?;
        model.losses(&mut tape, &fwd, labels, lambda)
    })();
    let loss = match outcome {
        Ok(loss) => loss,
        Err(Error::Numeric(msg)) => {
            return Err(Error::Aborted(format!(
                "non-finite value at epoch {epoch} step {step}: {msg}"
            )))
        }
        Err(e) => return Err(e),
    };
    let b = &loss.breakdown;
    if ![b.total, b.task_ce, b.router_ce, b.balance].iter().all(|v| v.is_finite()) {
        return Err(Error::Aborted(format!(
            "non-finite loss at epoch {epoch} step {step}: total={} task_ce={} router_ce={} balance={}",
            b.total, b.task_ce, b.router_ce, b.balance
        )));
    }
    model.store.zero_grads();
    tape.backward(loss.total)?;
    tape.write_param_grads(&mut model.store);
    optimizer.apply(&mut model.store, learning_rate)?;
    Ok(StepRecord {
        epoch,
        step,
        total: b.total,
        task_ce: b.task_ce,
        router_ce: b.router_ce,
        balance: b.balance,
    })
}

/// Runs the full loop: curriculum warm-up, per-epoch shuffles, one validation
/// pass per epoch, best-by-validation-accuracy snapshotting.
pub fn train(
    mut model: FlexMoeModel,
    config: &TrainConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_dataset(&model, train_ds, "training")?;
    check_dataset(&model, val_ds, "validation")?;
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(Error::Argument("training and validation sets must be non-empty".into()));
    }

    let cardinalities: Vec<usize> = train_ds
        .samples
        .iter()
        .map(|s| Ok(s.combo(&model.arch.set)?.cardinality()))
        .collect::<Result<_>>()?;
    let val_refs: Vec<&Sample> = val_ds.samples.iter().collect();
    let val_labels: Vec<usize> = val_ds.samples.iter().map(|s| s.label).collect();

    let mut optimizer = AdamState::new(&model.store);
    let mut counters = FlopCounters::default();
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut epochs: Vec<EpochRecord> = Vec::new();
    let mut best_val_accuracy = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = model.store.clone();
    let mut step: u64 = 0;

    for epoch in 1..=config.epochs {
        let order = epoch_order(config, epoch, &cardinalities)?;
        let epoch_first_step = steps.len();
        for batch_indices in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> =
                batch_indices.iter().map(|&i| &train_ds.samples[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let record = train_step(
                &mut model,
                &mut optimizer,
                &batch,
                &labels,
                config.lambda_aux,
                config.learning_rate,
                epoch,
                step,
                &mut counters,
            )?;
            steps.push(record);
            step += 1;
        }

        let epoch_steps = &steps[epoch_first_step..];
        let n = epoch_steps.len() as f64;
        let mean = |f: fn(&StepRecord) -> f64| epoch_steps.iter().map(f).sum::<f64>() / n;

        let mut eval_counters = FlopCounters::default();
        let (scores, _) = model.evaluate(&val_refs, &mut eval_counters)?;
        let val_accuracy = accuracy(&argmax_preds(&scores), &val_labels)?;
        let is_best = val_accuracy > best_val_accuracy;
        if is_best {
            best_val_accuracy = val_accuracy;
            best_epoch = epoch;
            best_params = model.store.clone();
        }
        epochs.push(EpochRecord {
            epoch,
            mean_total: mean(|r| r.total),
            mean_task_ce: mean(|r| r.task_ce),
            mean_router_ce: mean(|r| r.router_ce),
            mean_balance: mean(|r| r.balance),
            val_accuracy,
            is_best,
        });
    }

    Ok(TrainOutcome {
        model,
        best_params,
        best_val_accuracy,
        best_epoch,
        steps,
        epochs,
        optimizer,
        counters,
    })
}

/// Writes the per-step loss log. Full-precision formatting keeps identical
/// runs byte-identical.
pub fn write_step_log(path: &Path, steps: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "step", "total", "task_ce", "router_ce", "balance"])?;
    for r in steps {
        w.write_record([
            r.epoch.to_string(),
            r.step.to_string(),
            format!("{:.17e}", r.total),
            format!("{:.17e}", r.task_ce),
            format!("{:.17e}", r.router_ce),
            format!("{:.17e}", r.balance),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the per-epoch summary log.
pub fn write_epoch_log(path: &Path, epochs: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch",
        "mean_total",
        "mean_task_ce",
        "mean_router_ce",
        "mean_balance",
        "val_accuracy",
        "best",
    ])?;
    for r in epochs {
        w.write_record([
            r.epoch.to_string(),
            format!("{:.17e}", r.mean_total),
            format!("{:.17e}", r.mean_task_ce),
            format!("{:.17e}", r.mean_router_ce),
            format!("{:.17e}", r.mean_balance),
            format!("{:.17e}", r.val_accuracy),
            (r.is_best as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FMCK";
const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_END: &[u8; 4] = b"KCMF";

/// One parameter tensor inside a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Portable training snapshot.
///
/// Binary container, little-endian throughout, versioned header, explicit
/// end marker. Layout after the 8-byte header (`"FMCK"` + version u32):
/// config echo (u64 length + UTF-8 bytes), seed u64, epoch u64, step u64,
/// best validation accuracy f64, parameter count u64, then per parameter:
/// name (u64 + bytes), rank u64, each extent u64, values f64 ×count; then
/// per parameter in the same order its optimizer slot: steps u64, first
/// moments f64 ×count, second moments f64 ×count; then `"KCMF"`.
///
/// All randomness in a run is derived from `seed` plus fixed stream tags, so
/// `(seed, epoch, step)` fully determines the RNG state; no generator
/// internals need saving.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Free-form echo of the run configuration (e.g. the resolved TOML).
    pub echo: String,
    pub seed: u64,
    pub epoch: u64,
    pub step: u64,
    pub best_val_accuracy: f64,
    pub params: Vec<CheckpointParam>,
    pub moments: Vec<AdamSlot>,
}

impl Checkpoint {
    /// Snapshots a parameter store and optimizer state.
    pub fn capture(
        echo: &str,
        seed: u64,
        epoch: u64,
        step: u64,
        best_val_accuracy: f64,
        store: &ParamStore,
        optimizer: &AdamState,
    ) -> Result<Checkpoint> {
        let ids: Vec<_> = store.ids().collect();
        if ids.len() != optimizer.slots.len() {
            return Err(Error::Argument(format!(
                "optimizer has {} slots for {} parameters",
                optimizer.slots.len(),
                ids.len()
            )));
        }
        let params = ids
            .iter()
            .map(|&id| {
                let t = store.get(id);
                CheckpointParam {
                    name: store.name(id).to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                }
            })
            .collect();
        Ok(Checkpoint {
            echo: echo.to_string(),
            seed,
            epoch,
            step,
            best_val_accuracy,
            params,
            moments: optimizer.slots.clone(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        write_bytes(&mut out, self.echo.as_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.best_val_accuracy.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            write_bytes(&mut out, p.name.as_bytes());
            out.extend_from_slice(&(p.shape.len() as u64).to_le_bytes());
            for &e in &p.shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for s in &self.moments {
            out.extend_from_slice(&s.steps.to_le_bytes());
            for &v in &s.m {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for &v in &s.v {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(CHECKPOINT_END);
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let echo = String::from_utf8(r.bytes_block()?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("config echo is not UTF-8: {e}")))?;
        let seed = r.u64()?;
        let epoch = r.u64()?;
        let step = r.u64()?;
        let best_val_accuracy = r.f64()?;
        let n_params = r.u64()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name = String::from_utf8(r.bytes_block()?.to_vec())
                .map_err(|e| Error::Checkpoint(format!("parameter name is not UTF-8: {e}")))?;
            let rank = r.u64()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(r.f64()?);
            }
            params.push(CheckpointParam { name, shape, data });
        }
        let mut moments = Vec::with_capacity(n_params);
        for p in &params {
            let steps = r.u64()?;
            let count = p.data.len();
            let mut m = Vec::with_capacity(count);
            for _ in 0..count {
                m.push(r.f64()?);
            }
            let mut v = Vec::with_capacity(count);
            for _ in 0..count {
                v.push(r.f64()?);
            }
            moments.push(AdamSlot { steps, m, v });
        }
        let end = r.take(4)?;
        if end != CHECKPOINT_END {
            return Err(Error::Checkpoint("missing end marker; file truncated?".into()));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after end marker",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { echo, seed, epoch, step, best_val_accuracy, params, moments })
    }

    /// Copies saved parameter values into a store. Every saved tensor must
    /// exist with an identical shape, and every store tensor must be covered.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, store has {}",
                self.params.len(),
                store.len()
            )));
        }
        for p in &self.params {
            let id = store
                .find(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("store has no parameter {}", p.name)))?;
            let t = store.get_mut(id);
            if t.shape() != p.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?} in the store but {:?} in the checkpoint",
                    p.name,
                    t.shape(),
                    p.shape
                )));
            }
            t.data_mut().copy_from_slice(&p.data);
        }
        Ok(())
    }

    /// Rebuilds the optimizer state saved alongside the parameters.
    pub fn restore_optimizer(&self) -> AdamState {
        AdamState { slots: self.moments.clone() }
    }
}

fn write_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "unexpected end of file at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes_block(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }
}
