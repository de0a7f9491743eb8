//! Per-modality encoders and token assembly.
//!
//! Each modality has its own 2-layer MLP (GELU between layers, layer
//! normalization with learned affine on the output) mapping that modality's
//! feature vector to the shared width d. A sample becomes a sequence of
//! exactly |M| tokens, one per modality slot in set order: observed slots
//! are encoded from features, missing slots are read from the
//! missing-modality bank cell addressed by (observed combo, missing slot).
//!
//! Encoders only ever see observed features, so a training step over a
//! batch with no sample observing modality m leaves encoder m untouched —
//! its parameters receive no gradient at all (the optimizer skips tensors
//! with all-zero gradients rather than applying stale momentum).

use crate::modality::{BankHandle, ModalityCombo, ModalitySet};
use crate::rng::stream;
use crate::tensor::{NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::{Error, Result};

/// Epsilon inside the layer-norm variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Standard deviation shared by all weight initializations.
pub const INIT_STD: f64 = 0.02;

/// One modality's feature encoder: input_dim → d → d with GELU and an
/// affine layer norm on the output.
#[derive(Debug, Clone)]
pub struct ModalityEncoder {
    pub modality: usize,
    pub input_dim: usize,
    pub d: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl ModalityEncoder {
    /// Registers this encoder's parameters in `store` under
    /// `encoder.<label>.*` names. Weight draws depend only on `seed` and
    /// the parameter name, so adding unrelated parameters elsewhere never
    /// shifts them.
    pub fn init(
        store: &mut ParamStore,
        set: &ModalitySet,
        modality: usize,
        input_dim: usize,
        d: usize,
        seed: u64,
    ) -> Result<ModalityEncoder> {
        if input_dim == 0 || d == 0 {
            return Err(Error::Argument(format!(
                "encoder dims must be ≥ 1 (input_dim={input_dim}, d={d})"
            )));
        }
        let label = set.name(modality);
        let weight = |name: &str, shape: Vec<usize>| {
            Tensor::randn(shape, INIT_STD, &mut stream(seed, &format!("init:{name}"), 0))
        };
        let n_w1 = format!("encoder.{label}.w1");
        let n_w2 = format!("encoder.{label}.w2");
        let w1 = store.add(&n_w1, weight(&n_w1, vec![input_dim, d]));
        let b1 = store.add(format!("encoder.{label}.b1"), Tensor::zeros(vec![1, d]));
        let w2 = store.add(&n_w2, weight(&n_w2, vec![d, d]));
        let b2 = store.add(format!("encoder.{label}.b2"), Tensor::zeros(vec![1, d]));
        let ln_gain = store.add(format!("encoder.{label}.ln_gain"), Tensor::full(vec![1, d], 1.0)?);
        let ln_bias = store.add(format!("encoder.{label}.ln_bias"), Tensor::zeros(vec![1, d]));
        Ok(ModalityEncoder { modality, input_dim, d, w1, b1, w2, b2, ln_gain, ln_bias })
    }

    /// Encodes a batch of feature rows `[n, input_dim] → [n, d]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::Schema(format!(
                "modality {} expects feature width {}, got shape {:?}",
                self.modality, self.input_dim, shape
            )));
        }
        let w1 = tape.param(store, self.w1)?;
        let b1 = tape.param(store, self.b1)?;
        let w2 = tape.param(store, self.w2)?;
        let b2 = tape.param(store, self.b2)?;
        let gain = tape.param(store, self.ln_gain)?;
        let bias = tape.param(store, self.ln_bias)?;

        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h)?;
        let o = tape.matmul(h, w2)?;
        let o = tape.add_row(o, b2)?;
        let n = tape.normalize_rows(o, LAYER_NORM_EPS)?;
        let n = tape.mul_row(n, gain)?;
        tape.add_row(n, bias)
    }
}

/// Where a token slot's vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotSource {
    /// Slot value produced by the modality's encoder from observed features.
    Encoded,
    /// Slot value read from the missing-modality bank.
    Bank,
}

/// One sample's |M|-slot token matrix on the tape, with per-slot
/// provenance.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    /// Tape node of shape [|M|, d].
    pub tokens: NodeId,
    pub combo: ModalityCombo,
    pub sources: Vec<SlotSource>,
}

/// Builds one sample's token sequence: slot m encodes `features[m]` when
/// present, otherwise copies bank cell (combo, m). Both paths are
/// differentiable; bank gradients land only in the cells actually read.
pub fn assemble_tokens(
    tape: &mut Tape,
    store: &ParamStore,
    set: &ModalitySet,
    encoders: &[ModalityEncoder],
    bank: &BankHandle,
    features: &[Option<Vec<f64>>],
) -> Result<TokenSequence> {
    if encoders.len() != set.len() || features.len() != set.len() {
        return Err(Error::Argument(format!(
            "expected {} encoders and feature slots, got {} and {}",
            set.len(),
            encoders.len(),
            features.len()
        )));
    }
    let flags: Vec<bool> = features.iter().map(|f| f.is_some()).collect();
    let combo = set.combo_from_flags(&flags)?;

    let bank_node = if combo.is_full() { None } else { Some(tape.param(store, bank.param)?) };

    let mut srcs = Vec::with_capacity(set.len());
    let mut sources = Vec::with_capacity(set.len());
    for m in 0..set.len() {
        match &features[m] {
            Some(x) => {
                let leaf = tape.constant(vec![1, encoders[m].input_dim], x.clone())?;
                let enc = encoders[m].forward(tape, store, leaf)?;
                srcs.push((enc, 0));
                sources.push(SlotSource::Encoded);
            }
            None => {
                let cell = bank.layout.flat_cell(&combo, m)?;
                srcs.push((bank_node.expect("partial combo leases the bank"), cell));
                sources.push(SlotSource::Bank);
            }
        }
    }
    let tokens = tape.assemble_rows(&srcs)?;
    Ok(TokenSequence { tokens, combo, sources })
}
