//! Sparse mixture-of-experts layer with a multi-head self-attention
//! front-end, plus the routing losses and the prediction head.
//!
//! Routing semantics, fixed once here and shared by every caller:
//!
//! * Gate scores are a single linear map d → |E|; probabilities are the
//!   full softmax of those scores. Gating is noiseless.
//! * Top-k keeps each row's k largest probabilities **without
//!   renormalizing** the survivors; ties break toward the lowest expert
//!   index (the one shared kernel decides this everywhere).
//! * A token's mixture output is Σ_e masked[·,e]·f_e(token), evaluated
//!   sparsely: only selected experts run, grouped by expert across the
//!   batch. Gradient flows through both the expert and its surviving gate
//!   probability.
//! * Two regimes share one gate. Full-modality tokens (generalized
//!   routing) contribute a balance penalty over all their assignments;
//!   partial tokens (specialized routing) additionally pay a steering
//!   cross-entropy toward their combo's designated expert, and their own
//!   top-1 assignment is excluded from the balance sums.
//! * The balance penalty is CV²(importance) + CV²(load). Importance (sum
//!   of surviving probabilities per expert) is differentiated; load (count
//!   of surviving assignments per expert) is a hard statistic contributing
//!   value but no gradient.

use crate::modality::ModalitySet;
use crate::rng::stream;
use crate::tensor::{kernels, NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::{Error, Result};

pub use crate::encoder::{INIT_STD, LAYER_NORM_EPS};

/// Two-layer feed-forward expert, d → 4d → d with GELU.
#[derive(Debug, Clone)]
pub struct Expert {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Expert {
    fn init(store: &mut ParamStore, prefix: &str, d: usize, seed: u64) -> Expert {
        let weight = |name: &str, shape: Vec<usize>| {
            Tensor::randn(shape, INIT_STD, &mut stream(seed, &format!("init:{name}"), 0))
        };
        let n_w1 = format!("{prefix}.w1");
        let n_w2 = format!("{prefix}.w2");
        Expert {
            w1: store.add(&n_w1, weight(&n_w1, vec![d, 4 * d])),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(vec![1, 4 * d])),
            w2: store.add(&n_w2, weight(&n_w2, vec![4 * d, d])),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(vec![1, d])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w1 = tape.param(store, self.w1)?;
        let b1 = tape.param(store, self.b1)?;
        let w2 = tape.param(store, self.w2)?;
        let b2 = tape.param(store, self.b2)?;
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h)?;
        let y = tape.matmul(h, w2)?;
        tape.add_row(y, b2)
    }
}

/// Single linear gate d → |E| shared by both routing regimes.
#[derive(Debug, Clone)]
pub struct GateNetwork {
    pub w: ParamId,
    pub b: ParamId,
    pub experts: usize,
}

impl GateNetwork {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, experts: usize, seed: u64) -> GateNetwork {
        let name = format!("{prefix}.w");
        let w = Tensor::randn(vec![d, experts], INIT_STD, &mut stream(seed, &format!("init:{name}"), 0));
        GateNetwork {
            w: store.add(&name, w),
            b: store.add(format!("{prefix}.b"), Tensor::zeros(vec![1, experts])),
            experts,
        }
    }

    /// Row-stochastic gate probabilities for a stack of tokens.
    pub fn probs(&self, tape: &mut Tape, store: &ParamStore, tokens: NodeId) -> Result<NodeId> {
        let w = tape.param(store, self.w)?;
        let b = tape.param(store, self.b)?;
        let logits = tape.matmul(tokens, w)?;
        let logits = tape.add_row(logits, b)?;
        tape.softmax_rows(logits)
    }
}

/// Routing decision for a stack of tokens: full softmax, surviving top-k
/// weights (not renormalized), and the selection indices.
#[derive(Debug, Clone)]
pub struct RouterOutput {
    pub probs: Tensor,
    pub masked: Tensor,
    /// Per token: selected experts by descending probability, lowest index
    /// first on ties.
    pub top_indices: Vec<Vec<usize>>,
    pub top1: Vec<usize>,
    pub k: usize,
}

/// Applies top-k selection to softmax probabilities.
pub fn route_topk(probs: &Tensor, k: usize) -> Result<RouterOutput> {
    let shape = probs.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("route_topk: expected [n, experts], got {shape:?}")));
    }
    let (n, e) = (shape[0], shape[1]);
    if k == 0 || k > e {
        return Err(Error::Argument(format!("route_topk: k={k} outside 1..={e}")));
    }
    let mut masked = vec![0.0; n * e];
    let mut top_indices = Vec::with_capacity(n);
    let mut top1 = Vec::with_capacity(n);
    for r in 0..n {
        let row = &probs.data()[r * e..(r + 1) * e];
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || row.iter().any(|&p| p < 0.0) {
            return Err(Error::Argument(format!(
                "route_topk: row {r} is not a probability vector (sum {sum})"
            )));
        }
        let idx = kernels::topk_indices(row, k);
        for &i in &idx {
            masked[r * e + i] = row[i];
        }
        top1.push(idx[0]);
        top_indices.push(idx);
    }
    Ok(RouterOutput {
        probs: probs.clone(),
        masked: Tensor::new(vec![n, e], masked)?,
        top_indices,
        top1,
        k,
    })
}

/// Which routing regime a token belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingRegime {
    /// Full-modality token: balance over all its assignments.
    Generalized,
    /// Partial token: steering cross-entropy, top-1 excluded from balance.
    Specialized,
}

/// Population coefficient of variation squared, E[v²]/E[v]² − 1.
///
/// Returns 0 for a single element or a ~zero mean (no assignments to
/// balance); rejects negative entries, which can never arise from
/// probabilities or counts.
pub fn cv_squared(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Argument("cv_squared: empty input".into()));
    }
    if let Some(&bad) = values.iter().find(|&&v| v < 0.0) {
        return Err(Error::Argument(format!("cv_squared: negative entry {bad}")));
    }
    if values.len() == 1 {
        return Ok(0.0);
    }
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    if mean <= 1e-10 {
        return Ok(0.0);
    }
    let e2 = values.iter().map(|v| v * v).sum::<f64>() / m;
    Ok(e2 / (mean * mean) - 1.0)
}

/// Importance and load vectors for a subset of tokens under a regime:
/// importance sums surviving probabilities per expert, load counts
/// surviving assignments; in the specialized regime each token's top-1
/// assignment is dropped from both.
pub fn importance_and_load(
    router: &RouterOutput,
    rows: &[usize],
    mode: RoutingRegime,
) -> (Vec<f64>, Vec<f64>) {
    let e = router.probs.shape()[1];
    let mut importance = vec![0.0; e];
    let mut load = vec![0.0; e];
    for &i in rows {
        for &ex in &router.top_indices[i] {
            if mode == RoutingRegime::Specialized && ex == router.top1[i] {
                continue;
            }
            importance[ex] += router.masked.data()[i * e + ex];
            load[ex] += 1.0;
        }
    }
    (importance, load)
}

/// Balance penalty CV²(importance) + CV²(load) over all tokens of the
/// router, as a plain value (analysis path; the training path builds the
/// same importance term on the tape).
pub fn balance_loss(router: &RouterOutput, mode: RoutingRegime) -> Result<f64> {
    let rows: Vec<usize> = (0..router.top1.len()).collect();
    let (importance, load) = importance_and_load(router, &rows, mode);
    Ok(cv_squared(&importance)? + cv_squared(&load)?)
}

/// Tape version of the balance penalty for a token subset. The importance
/// CV² is a differentiable chain on the surviving probabilities; the load
/// CV² enters as an added constant.
pub fn balance_terms_on_tape(
    tape: &mut Tape,
    masked_node: NodeId,
    router: &RouterOutput,
    rows: &[usize],
    mode: RoutingRegime,
) -> Result<NodeId> {
    let shape = tape.shape(masked_node).to_vec();
    let (n, e) = (shape[0], shape[1]);
    if rows.is_empty() || e == 1 {
        return tape.constant(vec![1], vec![0.0]);
    }
    for &r in rows {
        if r >= n {
            return Err(Error::Argument(format!("balance: row {r} out of range {n}")));
        }
    }
    let mut mask = vec![0.0; n * e];
    for &i in rows {
        for j in 0..e {
            mask[i * e + j] = 1.0;
        }
        if mode == RoutingRegime::Specialized {
            mask[i * e + router.top1[i]] = 0.0;
        }
    }
    let sel = tape.mul_mask(masked_node, &mask)?;

    let (importance, load) = importance_and_load(router, rows, mode);
    let load_cv2 = cv_squared(&load)?;

    let mean_importance = importance.iter().sum::<f64>() / e as f64;
    if mean_importance <= 1e-10 {
        // No surviving probability mass: the importance term is pinned to 0
        // by the guard, and load must be all-zero too.
        return tape.constant(vec![1], vec![load_cv2]);
    }
    let sums = tape.col_sums(sel)?;
    let mean = tape.mean_all(sums)?;
    let mean_sq = tape.mul(mean, mean)?;
    let sq = tape.mul(sums, sums)?;
    let e2 = tape.mean_all(sq)?;
    let ratio = tape.div(e2, mean_sq)?;
    let importance_cv2 = tape.add_const(ratio, -1.0)?;
    tape.add_const(importance_cv2, load_cv2)
}

/// Mean steering cross-entropy −log p[j, target_j] on already normalized
/// probabilities (plain value; the training path uses the tape twin on the
/// same softmax node).
pub fn router_ce_loss(probs: &Tensor, targets: &[usize]) -> Result<f64> {
    let shape = probs.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("router_ce_loss: expected [n, experts], got {shape:?}")));
    }
    let (n, e) = (shape[0], shape[1]);
    if targets.len() != n {
        return Err(Error::Argument(format!("router_ce_loss: {} targets for {n} rows", targets.len())));
    }
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= e {
            return Err(Error::Argument(format!("router_ce_loss: target {t} out of range {e}")));
        }
        let p = probs.data()[r * e + t];
        if p <= 0.0 {
            return Err(Error::Numeric(format!(
                "router_ce_loss: probability {p} at row {r} is not positive"
            )));
        }
        total -= p.ln();
    }
    Ok(total / n as f64)
}

/// Multi-head self-attention over the |M| modality slots of one sample,
/// with learned slot embeddings and a post-residual layer norm.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub slots: usize,
    pub d: usize,
    pub heads: usize,
    pub slot_emb: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl AttentionBlock {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        slots: usize,
        d: usize,
        heads: usize,
        seed: u64,
    ) -> Result<AttentionBlock> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Argument(format!("{heads} heads do not divide width {d}")));
        }
        let weight = |name: &str, shape: Vec<usize>| {
            Tensor::randn(shape, INIT_STD, &mut stream(seed, &format!("init:{name}"), 0))
        };
        let mat = |store: &mut ParamStore, tag: &str| -> ParamId {
            let name = format!("{prefix}.{tag}");
            store.add(&name, weight(&name, vec![d, d]))
        };
        let bias = |store: &mut ParamStore, tag: &str| -> ParamId {
            store.add(format!("{prefix}.{tag}"), Tensor::zeros(vec![1, d]))
        };
        let emb_name = format!("{prefix}.slot_emb");
        Ok(AttentionBlock {
            slots,
            d,
            heads,
            slot_emb: store.add(&emb_name, weight(&emb_name, vec![slots, d])),
            wq: mat(store, "wq"),
            bq: bias(store, "bq"),
            wk: mat(store, "wk"),
            wv: mat(store, "wv"),
            bv: bias(store, "bv"),
            wo: mat(store, "wo"),
            bo: bias(store, "bo"),
            ln_gain: store.add(format!("{prefix}.ln_gain"), Tensor::full(vec![1, d], 1.0)?),
            ln_bias: store.add(format!("{prefix}.ln_bias"), Tensor::zeros(vec![1, d])),
        })
    }

    /// Attention output plus the per-head attention-probability nodes.
    pub fn forward_detailed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: NodeId,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let shape = tape.shape(tokens);
        if shape != [self.slots, self.d] {
            return Err(Error::Shape(format!(
                "attention expects [{}, {}] tokens, got {shape:?}",
                self.slots, self.d
            )));
        }
        let emb = tape.param(store, self.slot_emb)?;
        let x = tape.add(tokens, emb)?;

        let project = |tape: &mut Tape, w, b| -> Result<NodeId> {
            let wn = tape.param(store, w)?;
            let bn = tape.param(store, b)?;
            let p = tape.matmul(x, wn)?;
            tape.add_row(p, bn)
        };
        let q = project(tape, self.wq, self.bq)?;
        // No key bias: it adds a per-row constant to every attention score,
        // which the softmax's shift invariance cancels exactly.
        let k = {
            let wn = tape.param(store, self.wk)?;
            tape.matmul(x, wn)?
        };
        let v = project(tape, self.wv, self.bv)?;

        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_out = Vec::with_capacity(self.heads);
        let mut head_probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let probs = tape.softmax_rows(scores)?;
            head_probs.push(probs);
            head_out.push(tape.matmul(probs, vh)?);
        }
        let o = tape.concat_cols(&head_out)?;
        let wo = tape.param(store, self.wo)?;
        let bo = tape.param(store, self.bo)?;
        let attn = tape.matmul(o, wo)?;
        let attn = tape.add_row(attn, bo)?;

        let res = tape.add(x, attn)?;
        let gain = tape.param(store, self.ln_gain)?;
        let bias = tape.param(store, self.ln_bias)?;
        let ln = tape.normalize_rows(res, LAYER_NORM_EPS)?;
        let ln = tape.mul_row(ln, gain)?;
        let out = tape.add_row(ln, bias)?;
        Ok((out, head_probs))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: NodeId) -> Result<NodeId> {
        Ok(self.forward_detailed(tape, store, tokens)?.0)
    }
}

/// Linear prediction head d → C on the pooled token mean.
#[derive(Debug, Clone)]
pub struct PredictHead {
    pub w: ParamId,
    pub b: ParamId,
    pub classes: usize,
}

impl PredictHead {
    pub fn init(store: &mut ParamStore, d: usize, classes: usize, seed: u64) -> Result<PredictHead> {
        if classes < 2 {
            return Err(Error::Argument(format!("need ≥ 2 classes, got {classes}")));
        }
        let w = Tensor::randn(vec![d, classes], INIT_STD, &mut stream(seed, "init:head.w", 0));
        Ok(PredictHead {
            w: store.add("head.w", w),
            b: store.add("head.b", Tensor::zeros(vec![1, classes])),
            classes,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, pooled: NodeId) -> Result<NodeId> {
        let w = tape.param(store, self.w)?;
        let b = tape.param(store, self.b)?;
        let logits = tape.matmul(pooled, w)?;
        tape.add_row(logits, b)
    }
}

/// Running cost counters. Expert figures count multiply-adds (×2), bias
/// adds and activation evaluations inside expert FFNs; gate figures count
/// the gate linear map. Expert cost therefore scales with k and never with
/// the expert count.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct FlopCounters {
    /// One per (token, selected expert) evaluation.
    pub expert_calls: u64,
    pub expert_flops: u64,
    pub gate_flops: u64,
}

/// Floating ops for one token row through one expert FFN.
pub fn expert_row_flops(d: usize) -> u64 {
    (16 * d * d + 9 * d) as u64
}

/// Floating ops for gating n token rows over `experts` experts.
pub fn gate_flops(n: usize, d: usize, experts: usize) -> u64 {
    (n * (2 * d * experts + experts)) as u64
}

/// One sparse-MoE layer: attention front-end, shared gate, expert pool.
#[derive(Debug, Clone)]
pub struct SmoeLayer {
    pub attention: AttentionBlock,
    pub gate: GateNetwork,
    pub experts: Vec<Expert>,
    pub k: usize,
    pub d: usize,
}

/// Everything the layer produces for one stack of tokens.
#[derive(Debug)]
pub struct LayerRouting {
    /// Combined expert outputs, same shape as the token stack.
    pub out: NodeId,
    /// Softmax node feeding both the mask and the steering loss.
    pub probs_node: NodeId,
    /// Top-k-masked probabilities on the tape.
    pub masked_node: NodeId,
    pub router: RouterOutput,
}

impl SmoeLayer {
    pub fn init(
        store: &mut ParamStore,
        layer: usize,
        set: &ModalitySet,
        d: usize,
        n_experts: usize,
        k: usize,
        heads: usize,
        seed: u64,
    ) -> Result<SmoeLayer> {
        let combos = (1usize << set.len()) - 1;
        if n_experts < combos {
            return Err(Error::Capacity(format!(
                "{n_experts} experts cannot cover {combos} modality combos; need at least one expert per combo"
            )));
        }
        if k == 0 || k > n_experts {
            return Err(Error::Argument(format!("top-k {k} outside 1..={n_experts}")));
        }
        let prefix = format!("layer{layer}");
        let attention = AttentionBlock::init(store, &format!("{prefix}.attn"), set.len(), d, heads, seed)?;
        let gate = GateNetwork::init(store, &format!("{prefix}.gate"), d, n_experts, seed);
        let experts = (0..n_experts)
            .map(|e| Expert::init(store, &format!("{prefix}.expert{e}"), d, seed))
            .collect();
        Ok(SmoeLayer { attention, gate, experts, k, d })
    }

    /// Gates a token stack, applies top-k, and evaluates only the selected
    /// experts (grouped per expert over the stack).
    pub fn route_and_combine(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: NodeId,
        counters: &mut FlopCounters,
    ) -> Result<LayerRouting> {
        let shape = tape.shape(tokens).to_vec();
        if shape.len() != 2 || shape[1] != self.d {
            return Err(Error::Shape(format!("layer expects [n, {}], got {shape:?}", self.d)));
        }
        let n = shape[0];
        let probs_node = self.gate.probs(tape, store, tokens)?;
        counters.gate_flops += gate_flops(n, self.d, self.experts.len());

        let probs = Tensor::new(vec![n, self.experts.len()], tape.value(probs_node).to_vec())?;
        let router = route_topk(&probs, self.k)?;
        let masked_node = tape.topk_mask(probs_node, self.k)?;

        let mut rows_per_expert: Vec<Vec<usize>> = vec![Vec::new(); self.experts.len()];
        for (i, chosen) in router.top_indices.iter().enumerate() {
            for &e in chosen {
                rows_per_expert[e].push(i);
            }
        }

        let mut acc: Option<NodeId> = None;
        for (e, rows) in rows_per_expert.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let sub = tape.gather_rows(tokens, rows)?;
            let y = self.experts[e].forward(tape, store, sub)?;
            counters.expert_calls += rows.len() as u64;
            counters.expert_flops += rows.len() as u64 * expert_row_flops(self.d);
            let weighted = tape.scale_rows_by_col(y, masked_node, rows, e)?;
            let scattered = tape.scatter_rows(weighted, rows, n)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, scattered)?,
                None => scattered,
            });
        }
        let out = acc.expect("k ≥ 1 selects at least one expert");
        Ok(LayerRouting { out, probs_node, masked_node, router })
    }
}
