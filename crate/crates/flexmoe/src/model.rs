//! The full network: per-modality encoders → token assembly (encoder or
//! bank per slot) → per-sample self-attention → shared sparse-MoE routing
//! over all tokens → mean pool per sample → linear head.
//!
//! One forward implementation serves training and evaluation, so the two
//! can never drift. Tokens from all samples of a batch are flattened into
//! one [B·|M|, d] stack (sample s, slot m ↦ row s·|M| + m); each token
//! carries its sample's combo and regime: full-modality tokens are
//! generalized-routed, partial tokens specialized-routed with a steering
//! loss toward the combo's designated expert.
//!
//! The `missing_fill` knob selects how missing slots are materialized —
//! the per-(combo, modality) bank (the real model), a single shared
//! learned vector, or constant zeros. The latter two exist as ablation
//! baselines of the bank.

use crate::data::Sample;
use crate::encoder::ModalityEncoder;
use crate::metrics::TokenRouting;
use crate::modality::{BankHandle, ExpertIndexMap, MissingModalityBank, ModalityCombo, ModalitySet};
use crate::rng::stream;
use crate::smoe::{
    balance_terms_on_tape, FlopCounters, LayerRouting, PredictHead, RoutingRegime, SmoeLayer,
    INIT_STD,
};
use crate::tensor::{softmax_rows, NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::{Error, Result};

/// How a missing modality slot is filled before attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingFill {
    /// Learnable per-(observed-combo, missing-modality) bank cell.
    Bank,
    /// One learnable d-vector shared by every missing slot.
    GlobalVector,
    /// Constant zero vector.
    Zeros,
}

/// Architecture description (everything except the training schedule).
#[derive(Debug, Clone)]
pub struct ArchConfig {
    pub set: ModalitySet,
    pub input_dims: Vec<usize>,
    pub classes: usize,
    pub d: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub heads: usize,
    pub layers: usize,
    pub missing_fill: MissingFill,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let mut faults = Vec::new();
        if self.input_dims.len() != self.set.len() {
            faults.push(format!(
                "input_dims: {} entries for {} modalities",
                self.input_dims.len(),
                self.set.len()
            ));
        }
        if self.input_dims.iter().any(|&d| d == 0) {
            faults.push("input_dims: every modality needs width ≥ 1".into());
        }
        if self.classes < 2 {
            faults.push(format!("classes: need ≥ 2, got {}", self.classes));
        }
        if self.d == 0 {
            faults.push("d: need ≥ 1".into());
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            faults.push(format!("heads: {} must divide d={}", self.heads, self.d));
        }
        if self.layers == 0 {
            faults.push("layers: need ≥ 1".into());
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            faults.push(format!("top_k: {} outside 1..={}", self.top_k, self.n_experts));
        }
        let combos = (1usize << self.set.len()) - 1;
        if self.n_experts < combos {
            return Err(Error::Capacity(format!(
                "{} experts cannot cover {combos} modality combos",
                self.n_experts
            )));
        }
        if faults.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(faults.join("; ")))
        }
    }
}

/// A constructed model: parameter store plus the structural handles into it.
#[derive(Debug, Clone)]
pub struct FlexMoeModel {
    pub arch: ArchConfig,
    pub store: ParamStore,
    pub encoders: Vec<ModalityEncoder>,
    /// Present only with `MissingFill::Bank`.
    pub bank: Option<BankHandle>,
    /// Present only with `MissingFill::GlobalVector`.
    pub global_fill: Option<ParamId>,
    pub layers: Vec<SmoeLayer>,
    pub head: PredictHead,
    pub expert_map: ExpertIndexMap,
}

/// Result of one batched forward pass, with everything the losses and the
/// analyses need to address tokens.
#[derive(Debug)]
pub struct BatchForward {
    /// Class logits [B, C].
    pub logits: NodeId,
    /// Per SMoE layer: routing over the flattened token stack.
    pub routing: Vec<LayerRouting>,
    /// Combo of each flattened token row (B·|M| entries).
    pub token_combo: Vec<ModalityCombo>,
    /// Regime of each flattened token row.
    pub token_regime: Vec<RoutingRegime>,
}

/// Host-side values of the loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub task_ce: f64,
    pub router_ce: f64,
    pub balance: f64,
}

/// Tape node of the total loss plus its recorded components.
#[derive(Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub breakdown: LossBreakdown,
}

impl FlexMoeModel {
    /// Builds all parameters deterministically from `seed`. Each tensor's
    /// draw depends only on the seed and the tensor's name.
    pub fn new(arch: ArchConfig, seed: u64) -> Result<FlexMoeModel> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let encoders = (0..arch.set.len())
            .map(|m| ModalityEncoder::init(&mut store, &arch.set, m, arch.input_dims[m], arch.d, seed))
            .collect::<Result<Vec<_>>>()?;
        let bank = match arch.missing_fill {
            MissingFill::Bank => {
                let bank = MissingModalityBank::init(&arch.set, arch.d, seed)?;
                let param = store.add("bank.table", bank.table);
                Some(BankHandle { param, layout: bank.layout })
            }
            _ => None,
        };
        let global_fill = match arch.missing_fill {
            MissingFill::GlobalVector => {
                let v = Tensor::randn(vec![1, arch.d], INIT_STD, &mut stream(seed, "init:global_fill", 0));
                Some(store.add("global_fill", v))
            }
            _ => None,
        };
        let layers = (0..arch.layers)
            .map(|l| {
                SmoeLayer::init(&mut store, l, &arch.set, arch.d, arch.n_experts, arch.top_k, arch.heads, seed)
            })
            .collect::<Result<Vec<_>>>()?;
        let head = PredictHead::init(&mut store, arch.d, arch.classes, seed)?;
        let expert_map = ExpertIndexMap::new(&arch.set);
        Ok(FlexMoeModel { arch, store, encoders, bank, global_fill, layers, head, expert_map })
    }

    /// Forward pass over a batch; counters accumulate routing costs.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        samples: &[&Sample],
        counters: &mut FlopCounters,
    ) -> Result<BatchForward> {
        if samples.is_empty() {
            return Err(Error::Argument("forward_batch: empty batch".into()));
        }
        let m_count = self.arch.set.len();
        let b = samples.len();

        let mut combos = Vec::with_capacity(b);
        for s in samples {
            if s.features.len() != m_count {
                return Err(Error::Schema(format!(
                    "sample {} has {} feature slots for {m_count} modalities",
                    s.id,
                    s.features.len()
                )));
            }
            combos.push(s.combo(&self.arch.set)?);
        }

        // Encode each modality's observed rows in one batched call.
        let mut enc_nodes: Vec<Option<NodeId>> = vec![None; m_count];
        let mut enc_row: Vec<Vec<usize>> = vec![vec![usize::MAX; b]; m_count];
        for m in 0..m_count {
            let mut flat = Vec::new();
            let mut rows = 0usize;
            for (s_idx, s) in samples.iter().enumerate() {
                if let Some(x) = &s.features[m] {
                    if x.len() != self.arch.input_dims[m] {
                        return Err(Error::Schema(format!(
                            "sample {} modality {} has width {}, expected {}",
                            s.id,
                            self.arch.set.name(m),
                            x.len(),
                            self.arch.input_dims[m]
                        )));
                    }
                    enc_row[m][s_idx] = rows;
                    flat.extend_from_slice(x);
                    rows += 1;
                }
            }
            if rows > 0 {
                let leaf = tape.constant(vec![rows, self.arch.input_dims[m]], flat)?;
                enc_nodes[m] = Some(self.encoders[m].forward(tape, &self.store, leaf)?);
            }
        }

        // Fill source for missing slots.
        let any_missing = combos.iter().any(|c| !c.is_full());
        let fill_node = if any_missing {
            Some(match self.arch.missing_fill {
                MissingFill::Bank => {
                    let bank = self.bank.as_ref().expect("bank mode registers the table");
                    tape.param(&self.store, bank.param)?
                }
                MissingFill::GlobalVector => {
                    tape.param(&self.store, self.global_fill.expect("global mode registers the vector"))?
                }
                MissingFill::Zeros => tape.constant(vec![1, self.arch.d], vec![0.0; self.arch.d])?,
            })
        } else {
            None
        };

        // Assemble per-sample token matrices and run per-sample attention on
        // the first layer's front-end; deeper layers re-split the combined
        // stack.
        let mut token_combo = Vec::with_capacity(b * m_count);
        let mut token_regime = Vec::with_capacity(b * m_count);
        let mut per_sample: Vec<NodeId> = Vec::with_capacity(b);
        for (s_idx, s) in samples.iter().enumerate() {
            let mut srcs = Vec::with_capacity(m_count);
            for m in 0..m_count {
                if s.features[m].is_some() {
                    srcs.push((enc_nodes[m].expect("observed modality was encoded"), enc_row[m][s_idx]));
                } else {
                    let node = fill_node.expect("missing slot implies a fill source");
                    let row = match self.arch.missing_fill {
                        MissingFill::Bank => {
                            let bank = self.bank.as_ref().expect("bank mode");
                            bank.layout.flat_cell(&combos[s_idx], m)?
                        }
                        _ => 0,
                    };
                    srcs.push((node, row));
                }
            }
            per_sample.push(tape.assemble_rows(&srcs)?);
            let regime = if combos[s_idx].is_full() {
                RoutingRegime::Generalized
            } else {
                RoutingRegime::Specialized
            };
            for _ in 0..m_count {
                token_combo.push(combos[s_idx]);
                token_regime.push(regime);
            }
        }

        let mut routing = Vec::with_capacity(self.layers.len());
        let mut current = per_sample;
        let mut combined = None;
        for layer in &self.layers {
            let mut attended = Vec::with_capacity(b);
            for &node in &current {
                attended.push(layer.attention.forward(tape, &self.store, node)?);
            }
            let stack = tape.concat_rows(&attended)?;
            let routed = layer.route_and_combine(tape, &self.store, stack, counters)?;
            let out = routed.out;
            routing.push(routed);
            combined = Some(out);
            // Deeper layers need per-sample views again.
            current = (0..b)
                .map(|s| {
                    let rows: Vec<usize> = (s * m_count..(s + 1) * m_count).collect();
                    tape.gather_rows(out, &rows)
                })
                .collect::<Result<Vec<_>>>()?;
        }
        let stack = combined.expect("at least one layer");
        let pooled = tape.row_group_mean(stack, m_count)?;
        let logits = self.head.forward(tape, &self.store, pooled)?;
        Ok(BatchForward { logits, routing, token_combo, token_regime })
    }

    /// Composite loss: task cross-entropy + λ·(steering CE on specialized
    /// tokens + balance penalties of both regimes), summed over layers.
    pub fn losses(
        &self,
        tape: &mut Tape,
        fwd: &BatchForward,
        labels: &[usize],
        lambda: f64,
    ) -> Result<LossNodes> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::Argument(format!("lambda {lambda} must be finite and ≥ 0")));
        }
        let task = tape.softmax_cross_entropy(fwd.logits, labels)?;

        let g_rows: Vec<usize> = (0..fwd.token_regime.len())
            .filter(|&i| fwd.token_regime[i] == RoutingRegime::Generalized)
            .collect();
        let s_rows: Vec<usize> = (0..fwd.token_regime.len())
            .filter(|&i| fwd.token_regime[i] == RoutingRegime::Specialized)
            .collect();
        let s_targets: Vec<usize> =
            s_rows.iter().map(|&i| self.expert_map.index_of(&fwd.token_combo[i])).collect();

        let mut router_ce: Option<NodeId> = None;
        let mut balance: Option<NodeId> = None;
        let fold = |tape: &mut Tape, acc: Option<NodeId>, node: NodeId| -> Result<Option<NodeId>> {
            Ok(Some(match acc {
                Some(a) => tape.add(a, node)?,
                None => node,
            }))
        };
        for layer in &fwd.routing {
            if !s_rows.is_empty() {
                let probs_s = tape.gather_rows(layer.probs_node, &s_rows)?;
                let ce = tape.nll_from_probs(probs_s, &s_targets)?;
                router_ce = fold(tape, router_ce, ce)?;
            }
            let bal_g =
                balance_terms_on_tape(tape, layer.masked_node, &layer.router, &g_rows, RoutingRegime::Generalized)?;
            balance = fold(tape, balance, bal_g)?;
            let bal_s =
                balance_terms_on_tape(tape, layer.masked_node, &layer.router, &s_rows, RoutingRegime::Specialized)?;
            balance = fold(tape, balance, bal_s)?;
        }
        let router_ce = match router_ce {
            Some(n) => n,
            None => tape.constant(vec![1], vec![0.0])?,
        };
        let balance = balance.expect("at least one layer contributes balance terms");

        let aux = tape.add(router_ce, balance)?;
        let scaled = tape.scale(aux, lambda)?;
        let total = tape.add(task, scaled)?;
        let breakdown = LossBreakdown {
            total: tape.value(total)[0],
            task_ce: tape.value(task)[0],
            router_ce: tape.value(router_ce)[0],
            balance: tape.value(balance)[0],
        };
        Ok(LossNodes { total, breakdown })
    }

    /// Evaluates samples in fixed-size chunks on fresh tapes: returns
    /// per-sample class probabilities and per-token routing records from
    /// the final SMoE layer.
    pub fn evaluate(
        &self,
        samples: &[&Sample],
        counters: &mut FlopCounters,
    ) -> Result<(Vec<Vec<f64>>, Vec<TokenRouting>)> {
        const CHUNK: usize = 64;
        let mut scores = Vec::with_capacity(samples.len());
        let mut tokens = Vec::new();
        for chunk in samples.chunks(CHUNK) {
            let mut tape = Tape::new();
            let fwd = self.forward_batch(&mut tape, chunk, counters)?;
            let c = self.arch.classes;
            let logits = Tensor::new(vec![chunk.len(), c], tape.value(fwd.logits).to_vec())?;
            let probs = softmax_rows(&logits)?;
            for r in 0..chunk.len() {
                scores.push(probs.data()[r * c..(r + 1) * c].to_vec());
            }
            let final_layer = fwd.routing.last().expect("at least one layer");
            for (row, combo) in fwd.token_combo.iter().enumerate() {
                tokens.push(TokenRouting {
                    combo: *combo,
                    experts: final_layer.router.top_indices[row].clone(),
                    top1: final_layer.router.top1[row],
                });
            }
        }
        Ok((scores, tokens))
    }

    /// Class predictions (argmax of probabilities, lowest index on ties).
    pub fn predict(&self, samples: &[&Sample]) -> Result<Vec<usize>> {
        let mut counters = FlopCounters::default();
        let (scores, _) = self.evaluate(samples, &mut counters)?;
        Ok(scores
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0usize, f64::NEG_INFINITY), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect())
    }
}
