//! Full-pipeline gradient self-check on a small, deliberately
//! well-conditioned reference instance.
//!
//! Central finite differences at step `eps` carry two error sources that have
//! nothing to do with the correctness of the analytic gradients:
//!
//! * **truncation** ~ `f'''·eps²/6`, which explodes when a layer-norm input
//!   has variance near the norm's stabilizing epsilon, and
//! * **rounding** ~ `|f|·machine_eps/eps` (about `1e-11` in this regime),
//!   which dominates the *relative* error of any coordinate whose true
//!   gradient magnitude is near or below `1e-5`.
//!
//! A network at its training initialization (std 0.02 everywhere) violates
//! both: pre-norm activations have variance comparable to the norm epsilon,
//! and many gradients sit under the rounding floor. The reference instance
//! used here therefore rescales the freshly initialized parameters so that
//!
//! 1. every layer-norm input has variance far above the stabilizer,
//! 2. every GELU unit inside the selected experts operates in its strictly
//!    monotone positive region (hidden pre-activations shifted to ≈ 1.5, so
//!    no activation or activation-derivative sits near a zero crossing),
//! 3. the attention and gate softmaxes are neither uniform nor saturated and
//!    the top-k selection has a wide decision margin, and
//! 4. every coordinate that participates in the forward pass receives a
//!    gradient comfortably above the rounding floor.
//!
//! Coordinates that do not participate at the base point (fill-bank rows of
//! unseen combinations, experts never selected) are bitwise unaffected by the
//! probe steps, so their analytic and numeric derivatives are both exactly
//! zero and they contribute zero relative error.
//!
//! The batch mixes a fully observed sample with two partially observed ones,
//! so the checked loss exercises the encoders, the missing-modality bank, the
//! attention block, top-k routing, both routing regimes of the steering loss,
//! both balance penalties, and the classification head in one scalar.

use std::time::{Duration, Instant};

use crate::data::Sample;
use crate::modality::ModalitySet;
use crate::model::{ArchConfig, FlexMoeModel, MissingFill};
use crate::smoe::FlopCounters;
use crate::tensor::{grad_check, GradCheckReport, Tape};
use crate::Result;

/// Finite-difference step used by [`run`].
pub const SELF_CHECK_EPS: f64 = 1e-5;

/// Maximum acceptable relative error for [`run`] on the reference instance.
pub const SELF_CHECK_TOLERANCE: f64 = 1e-5;

/// What [`run`] measured, alongside the raw gradient-check report.
#[derive(Debug, Clone)]
pub struct SelfCheckOutcome {
    /// Per-coordinate comparison of analytic vs central-difference gradients.
    pub report: GradCheckReport,
    /// Smallest gap, over all routed tokens, between the least-probable kept
    /// expert and the most-probable dropped expert. A wide margin guarantees
    /// the probe steps cannot flip the top-k selection.
    pub routing_margin: f64,
    /// Smallest nonzero analytic gradient magnitude at the base point. This
    /// must sit well above the rounding floor for the relative-error bound to
    /// be meaningful.
    pub min_nonzero_grad: f64,
    /// Total parameter coordinates in the instance.
    pub coords_total: usize,
    /// Coordinates with an exactly zero gradient (structurally disconnected
    /// at the base point).
    pub coords_zero: usize,
    /// Wall-clock time of the full sweep.
    pub elapsed: Duration,
}

/// Builds the conditioned reference model and its three-sample batch.
///
/// Three modalities (dims 3/2/4), d = 8, 7 experts, top-2 routing, 2 heads,
/// one mixture layer, 3 classes, learnable fill bank. The parameter rescaling
/// applied on top of the standard initialization is part of the instance
/// definition; see the module docs for why each group is scaled.
pub fn reference_instance() -> Result<(FlexMoeModel, Vec<Sample>)> {
    let set = ModalitySet::from_labels(&["a", "b", "c"])?;
    let arch = ArchConfig {
        set,
        input_dims: vec![3, 2, 4],
        classes: 3,
        d: 8,
        n_experts: 7,
        top_k: 2,
        heads: 2,
        layers: 1,
        missing_fill: MissingFill::Bank,
    };
    let mut model = FlexMoeModel::new(arch, 41)?;

    // Shift expert hidden pre-activations to ≈ 1.5 so every GELU unit is in
    // its monotone positive region: activations stay ≥ gelu(0.1) ≈ 0.05 and
    // derivatives ≥ 0.58, bounding both away from zero crossings.
    for e in 0..7 {
        let id = model.store.find(&format!("layer0.expert{e}.b1")).expect("expert bias");
        for v in model.store.get_mut(id).data_mut().iter_mut() {
            *v = 1.5 + *v * 5.0;
        }
    }

    let mut scale = |names: Vec<String>, factor: f64| {
        for name in names {
            let id = model.store.find(&name).unwrap_or_else(|| panic!("no parameter {name}"));
            for v in model.store.get_mut(id).data_mut().iter_mut() {
                *v *= factor;
            }
        }
    };

    // Encoder and bank outputs feed layer norms: ×40 lifts pre-norm variance
    // to O(1), far above the norm epsilon, taming truncation error.
    let mut enc = Vec::new();
    for label in ["a", "b", "c"] {
        for p in ["w1", "b1", "w2", "b2"] {
            enc.push(format!("encoder.{label}.{p}"));
        }
    }
    scale(enc, 40.0);
    scale(vec!["bank.table".into()], 40.0);

    // Attention: value/output paths at O(1); query/key kept milder so the
    // score softmax stays unsaturated (saturated attention starves the
    // query/key gradients down into the rounding floor).
    scale(
        vec!["layer0.attn.slot_emb".into(), "layer0.attn.wv".into(), "layer0.attn.wo".into()],
        25.0,
    );
    scale(vec!["layer0.attn.wq".into(), "layer0.attn.wk".into()], 12.0);

    // Gate logits spread ≈ ±1: decisive top-k margins without one-hot
    // saturation, keeping both steering and balance terms sensitive.
    scale(vec!["layer0.gate.w".into(), "layer0.gate.b".into()], 21.0);

    // Expert input weights kept moderate (hidden std ≈ 0.4 around the +1.5
    // shift); output weights at O(1) so per-coordinate gradients clear the
    // rounding floor.
    let mut w1 = Vec::new();
    let mut w2 = Vec::new();
    for e in 0..7 {
        w1.push(format!("layer0.expert{e}.w1"));
        w2.push(format!("layer0.expert{e}.w2"));
        w2.push(format!("layer0.expert{e}.b2"));
    }
    scale(w1, 7.0);
    scale(w2, 25.0);

    scale(vec!["head.w".into(), "head.b".into()], 25.0);

    let samples = vec![
        Sample {
            id: "s0".into(),
            label: 0,
            features: vec![
                Some(vec![0.5, -0.2, 0.8]),
                Some(vec![0.3, 0.9]),
                Some(vec![-0.4, 0.1, 0.2, -0.7]),
            ],
        },
        Sample {
            id: "s1".into(),
            label: 2,
            features: vec![
                Some(vec![-0.6, 0.4, 0.3]),
                None,
                Some(vec![0.5, -0.5, 0.25, 0.1]),
            ],
        },
        Sample {
            id: "s2".into(),
            label: 1,
            features: vec![None, Some(vec![0.7, -0.3]), None],
        },
    ];
    Ok((model, samples))
}

/// Runs the full-pipeline gradient check on the reference instance: total
/// training loss (task + steering + balance at auxiliary weight 1.0) against
/// central differences at [`SELF_CHECK_EPS`], over every parameter
/// coordinate.
pub fn run() -> Result<SelfCheckOutcome> {
    let started = Instant::now();
    let (model, samples) = reference_instance()?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let labels: Vec<usize> = refs.iter().map(|s| s.label).collect();

    // Routing decision margin at the base point.
    let mut routing_margin = f64::INFINITY;
    {
        let mut tape = Tape::new();
        let mut counters = FlopCounters::default();
        let fwd = model.forward_batch(&mut tape, &refs, &mut counters)?;
        let n_experts = model.arch.n_experts;
        for routing in &fwd.routing {
            let router = &routing.router;
            for (row, kept) in router.top_indices.iter().enumerate() {
                let probs = &router.probs.data()[row * n_experts..(row + 1) * n_experts];
                let kept_min = kept.iter().map(|&i| probs[i]).fold(f64::INFINITY, f64::min);
                let dropped_max = (0..n_experts)
                    .filter(|i| !kept.contains(i))
                    .map(|i| probs[i])
                    .fold(f64::NEG_INFINITY, f64::max);
                routing_margin = routing_margin.min(kept_min - dropped_max);
            }
        }
    }

    let ids: Vec<_> = model.store.ids().collect();
    let mut store = model.store.clone();
    let report = grad_check(&mut store, &ids, SELF_CHECK_EPS, |store, tape| {
        let mut probe = model.clone();
        probe.store = store.clone();
        let mut counters = FlopCounters::default();
        let fwd = probe.forward_batch(tape, &refs, &mut counters)?;
        let loss = probe.losses(tape, &fwd, &labels, 1.0)?;
        Ok(loss.total)
    })?;

    let mut min_nonzero_grad = f64::INFINITY;
    let mut coords_total = 0usize;
    let mut coords_zero = 0usize;
    for &id in &ids {
        let grad = store.get(id).grad().expect("gradient written by grad_check");
        coords_total += grad.len();
        for &g in grad {
            if g == 0.0 {
                coords_zero += 1;
            } else {
                min_nonzero_grad = min_nonzero_grad.min(g.abs());
            }
        }
    }

    Ok(SelfCheckOutcome {
        report,
        routing_margin,
        min_nonzero_grad,
        coords_total,
        coords_zero,
        elapsed: started.elapsed(),
    })
}
