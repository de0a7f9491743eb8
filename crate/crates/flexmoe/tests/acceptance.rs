//! End-to-end acceptance suite.
//!
//! Each test exercises one externally checkable property of the crate and
//! prints a single verdict line (`[acceptance] i/9 name: PASS/FAIL — detail`)
//! before asserting. Run with `cargo test --test acceptance -- --show-output`
//! to see the verdict lines for passing checks too.
//!
//! The training-based checks (2–5) use the planted synthetic benchmark: the
//! class pattern carried by the features is shifted per modality combo, so a
//! model must identify the combo to decode the label. Sizes are chosen so the
//! whole suite stays within a few minutes on a single core.

use std::time::Instant;

use flexmoe::data::{
    bayes_accuracy, split_and_impute, split_dataset, split_indices, synth_generate, RawDataset,
    RawSample, Sample, SplitRatios, SynthConfig,
};
use flexmoe::metrics::{accuracy, argmax_preds, auc_macro};
use flexmoe::modality::ModalitySet;
use flexmoe::model::{ArchConfig, FlexMoeModel, MissingFill};
use flexmoe::rng::stream;
use flexmoe::selfcheck;
use flexmoe::smoe::{cv_squared, FlopCounters, SmoeLayer};
use flexmoe::tensor::{ParamStore, Tape};
use flexmoe::train::{train, write_epoch_log, write_step_log, CurriculumDirection, TrainConfig};
use rand::Rng;

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// Prints the verdict line for one acceptance check, then enforces it.
fn verdict(index: usize, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("[acceptance] {index}/9 {name}: {tag} — {detail}");
    assert!(pass, "acceptance check {index}/9 ({name}) failed: {detail}");
}

fn set_of(m: usize) -> ModalitySet {
    let names: Vec<String> = (0..m).map(|i| format!("m{i}")).collect();
    ModalitySet::new(names).unwrap()
}

/// Combo distribution with `full_mass` on the all-modalities combo and the
/// rest spread uniformly over the partial combos.
fn combo_probs(m: usize, full_mass: f64) -> Vec<f64> {
    let combos = (1usize << m) - 1;
    let mut p = vec![(1.0 - full_mass) / (combos - 1) as f64; combos];
    p[combos - 1] = full_mass;
    p
}

fn arch(set: &ModalitySet, dims: &[usize], classes: usize, d: usize, experts: usize, k: usize, heads: usize, fill: MissingFill) -> ArchConfig {
    ArchConfig {
        set: set.clone(),
        input_dims: dims.to_vec(),
        classes,
        d,
        n_experts: experts,
        top_k: k,
        heads,
        layers: 1,
        missing_fill: fill,
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ---------------------------------------------------------------------------
// 1/9 — whole-pipeline gradient check
// ---------------------------------------------------------------------------

#[test]
fn a1_full_pipeline_gradient_check() {
    let outcome = selfcheck::run().expect("self-check instance must evaluate");
    let rel = outcome.report.max_rel_error;
    let secs = outcome.elapsed.as_secs_f64();
    let pass = rel < selfcheck::SELF_CHECK_TOLERANCE && secs < 60.0;
    verdict(
        1,
        "analytic-gradients-match-finite-differences",
        pass,
        &format!(
            "max rel err {rel:.3e} over {} coordinates (need < {:.0e}) in {secs:.1} s (need < 60 s)",
            outcome.report.coords_checked,
            selfcheck::SELF_CHECK_TOLERANCE
        ),
    );
}

// ---------------------------------------------------------------------------
// 2/9 — routing specialization under steering
// ---------------------------------------------------------------------------

#[test]
fn a2_partial_tokens_route_to_their_combo_expert() {
    let started = Instant::now();
    let set = set_of(4);
    let dims = [12usize, 10, 9, 8];
    let synth = SynthConfig::planted(
        set.clone(),
        dims.to_vec(),
        3,
        1.2,
        0.4,
        combo_probs(4, 0.5),
        700,
        90,
    )
    .unwrap();
    let full = synth_generate(&synth).unwrap();
    let (train_ds, val_ds, _test_ds) =
        split_dataset(&full, SplitRatios::default(), 90).unwrap();

    let model = FlexMoeModel::new(
        arch(&set, &dims, 3, 32, 16, 4, 4, MissingFill::Bank),
        42,
    )
    .unwrap();
    let tc = TrainConfig {
        epochs: 50,
        warmup_epochs: 5,
        learning_rate: 1e-3,
        batch_size: 16,
        lambda_aux: 0.01,
        seed: 42,
        curriculum: CurriculumDirection::MostObservedFirst,
    };
    let outcome = train(model, &tc, &train_ds, &val_ds).unwrap();

    // Fresh draw from the same generator: the shipped validation/test splits
    // are full-modality by protocol, so partial routing is measured on a
    // held-out sample of the same population.
    let held = {
        let mut cfg = synth.clone();
        cfg.n_samples = 400;
        cfg.seed = 91;
        synth_generate(&cfg).unwrap()
    };
    let refs: Vec<&Sample> = held.samples.iter().collect();
    let mut counters = FlopCounters::default();
    let (_scores, tokens) = outcome.model.evaluate(&refs, &mut counters).unwrap();

    let mut partial = 0u64;
    let mut steered = 0u64;
    for t in &tokens {
        if t.combo.is_full() {
            continue;
        }
        partial += 1;
        if t.top1 == outcome.model.expert_map.index_of(&t.combo) {
            steered += 1;
        }
    }
    let rate = steered as f64 / partial as f64;
    let secs = started.elapsed().as_secs_f64();
    let pass = rate >= 0.90 && secs < 600.0;
    verdict(
        2,
        "partial-tokens-route-to-their-combo-expert",
        pass,
        &format!(
            "top-1 steering on {steered}/{partial} held-out partial tokens = {:.1}% (need ≥ 90%) in {secs:.0} s (need < 600 s)",
            100.0 * rate
        ),
    );
}

// ---------------------------------------------------------------------------
// 3/9 — balance penalty halves the load spread
// ---------------------------------------------------------------------------

#[test]
fn a3_balance_penalty_halves_load_cv2() {
    let set = set_of(3);
    let dims = [8usize, 6, 5];
    // Full-modality-only data keeps every token in the freely routed regime,
    // isolating the balance penalty's effect on expert loads.
    let mut probs = vec![0.0; 7];
    probs[6] = 1.0;
    let synth =
        SynthConfig::planted(set.clone(), dims.to_vec(), 3, 1.2, 0.4, probs, 260, 70).unwrap();
    let full = synth_generate(&synth).unwrap();
    let (train_ds, val_ds, _test) = split_dataset(&full, SplitRatios::default(), 70).unwrap();

    let seeds = [11u64, 12, 13];
    let mut cv2 = [Vec::new(), Vec::new()]; // [λ=0, λ=0.01]
    for (slot, lambda) in [(0usize, 0.0f64), (1, 0.01)] {
        for &seed in &seeds {
            let model = FlexMoeModel::new(
                arch(&set, &dims, 3, 16, 16, 2, 2, MissingFill::Zeros),
                seed,
            )
            .unwrap();
            let tc = TrainConfig {
                epochs: 100,
                warmup_epochs: 0,
                learning_rate: 5e-4,
                batch_size: 8,
                lambda_aux: lambda,
                seed,
                curriculum: CurriculumDirection::MostObservedFirst,
            };
            let outcome = train(model, &tc, &train_ds, &val_ds).unwrap();
            let refs: Vec<&Sample> = train_ds.samples.iter().collect();
            let mut counters = FlopCounters::default();
            let (_s, tokens) = outcome.model.evaluate(&refs, &mut counters).unwrap();
            let mut load = vec![0.0f64; 16];
            for t in &tokens {
                for &e in &t.experts {
                    load[e] += 1.0;
                }
            }
            cv2[slot].push(cv_squared(&load).unwrap());
        }
    }
    let base = mean(&cv2[0]);
    let balanced = mean(&cv2[1]);
    let reduction = 1.0 - balanced / base;
    let pass = balanced <= 0.5 * base;
    verdict(
        3,
        "balance-penalty-halves-load-cv2",
        pass,
        &format!(
            "mean load CV² over {} seeds: {base:.3} (λ=0) → {balanced:.3} (λ=0.01), reduction {:.0}% (need ≥ 50%)",
            seeds.len(),
            100.0 * reduction
        ),
    );
}

// ---------------------------------------------------------------------------
// 4/9 — learnable fill beats zero and shared-vector fills
// ---------------------------------------------------------------------------

#[test]
fn a4_bank_fill_beats_zero_and_global_fills() {
    let set = set_of(4);
    let dims = [10usize, 8, 6, 5];
    let classes = 3;
    let synth = SynthConfig::planted(
        set.clone(),
        dims.to_vec(),
        classes,
        1.0,
        0.5,
        combo_probs(4, 0.5),
        600,
        80,
    )
    .unwrap();
    let full = synth_generate(&synth).unwrap();
    let (train_ds, val_ds, _test) = split_dataset(&full, SplitRatios::default(), 80).unwrap();

    // Held-out draw of heavily partial samples (at most two of four
    // modalities observed) — fill tokens dominate these samples, and 100%
    // partial clears the ≥ 40% partial floor. A large draw keeps evaluation
    // noise well under the margins being compared.
    let held = {
        let mut cfg = synth.clone();
        cfg.n_samples = 1000;
        cfg.seed = 81;
        let combos = cfg.combo_probs.len();
        let heavy: Vec<usize> = (1..=combos)
            .filter(|mask| (*mask as u32).count_ones() <= 2)
            .collect();
        cfg.combo_probs = vec![0.0; combos];
        for &mask in &heavy {
            cfg.combo_probs[mask - 1] = 1.0 / heavy.len() as f64;
        }
        synth_generate(&cfg).unwrap()
    };
    let n_partial = held
        .samples
        .iter()
        .filter(|s| s.features.iter().any(|f| f.is_none()))
        .count();
    assert!(
        n_partial as f64 >= 0.4 * held.samples.len() as f64,
        "held-out draw must be ≥ 40% partial, got {n_partial}/{}",
        held.samples.len()
    );
    let labels: Vec<usize> = held.samples.iter().map(|s| s.label).collect();
    let refs: Vec<&Sample> = held.samples.iter().collect();
    let bayes = bayes_accuracy(&synth, &held).unwrap();

    let seeds = [21u64, 22, 23];
    let fills = [MissingFill::Bank, MissingFill::Zeros, MissingFill::GlobalVector];
    let mut acc = vec![Vec::new(); fills.len()];
    for (fi, &fill) in fills.iter().enumerate() {
        for &seed in &seeds {
            let model =
                FlexMoeModel::new(arch(&set, &dims, classes, 16, 16, 4, 2, fill), seed).unwrap();
            let tc = TrainConfig {
                epochs: 15,
                warmup_epochs: 3,
                learning_rate: 1e-3,
                batch_size: 16,
                lambda_aux: 0.01,
                seed,
                curriculum: CurriculumDirection::MostObservedFirst,
            };
            let outcome = train(model, &tc, &train_ds, &val_ds).unwrap();
            let mut counters = FlopCounters::default();
            let (scores, _t) = outcome.model.evaluate(&refs, &mut counters).unwrap();
            acc[fi].push(accuracy(&argmax_preds(&scores), &labels).unwrap());
        }
    }
    let (bank, zeros, global) = (mean(&acc[0]), mean(&acc[1]), mean(&acc[2]));
    let chance = 1.0 / classes as f64;
    let pass = bank >= zeros + 0.03
        && bank >= global + 0.03
        && zeros > chance + 0.05
        && global > chance + 0.05;
    verdict(
        4,
        "learned-bank-fill-beats-ablations",
        pass,
        &format!(
            "mean held-out accuracy over {} seeds: bank {bank:.3} {:.3?}, zeros {zeros:.3} {:.3?}, shared-vector {global:.3} {:.3?} \
             (need bank ≥ ablation + 0.03, ablations > chance {chance:.3} + 0.05; Bayes ceiling {bayes:.3})",
            seeds.len(),
            acc[0],
            acc[1],
            acc[2]
        ),
    );
}

// ---------------------------------------------------------------------------
// 5/9 — warm-up ordering direction
// ---------------------------------------------------------------------------

#[test]
fn a5_most_observed_first_warmup_wins() {
    let set = set_of(3);
    let dims = [10usize, 8, 6];
    let synth = SynthConfig::planted(
        set.clone(),
        dims.to_vec(),
        3,
        1.0,
        0.5,
        combo_probs(3, 0.4),
        400,
        60,
    )
    .unwrap();
    let full = synth_generate(&synth).unwrap();
    let (train_ds, val_ds, test_ds) = split_dataset(&full, SplitRatios::default(), 60).unwrap();
    let labels: Vec<usize> = test_ds.samples.iter().map(|s| s.label).collect();
    let refs: Vec<&Sample> = test_ds.samples.iter().collect();

    let seeds = [31u64, 32, 33, 34, 35];
    let mut acc = [Vec::new(), Vec::new()]; // [most-first, least-first]
    for (slot, dir) in [
        (0usize, CurriculumDirection::MostObservedFirst),
        (1, CurriculumDirection::LeastObservedFirst),
    ] {
        for &seed in &seeds {
            let model = FlexMoeModel::new(
                arch(&set, &dims, 3, 16, 8, 2, 2, MissingFill::Bank),
                seed,
            )
            .unwrap();
            let tc = TrainConfig {
                epochs: 12,
                warmup_epochs: 6,
                learning_rate: 1e-3,
                batch_size: 16,
                lambda_aux: 0.01,
                seed,
                curriculum: dir,
            };
            let outcome = train(model, &tc, &train_ds, &val_ds).unwrap();
            let best = outcome.best_model();
            let mut counters = FlopCounters::default();
            let (scores, _t) = best.evaluate(&refs, &mut counters).unwrap();
            acc[slot].push(accuracy(&argmax_preds(&scores), &labels).unwrap());
        }
    }
    let (most, least) = (mean(&acc[0]), mean(&acc[1]));
    let pass = most >= least;
    verdict(
        5,
        "most-observed-first-warmup-wins",
        pass,
        &format!(
            "mean test accuracy over {} seeds: most-observed-first {most:.3} vs least-observed-first {least:.3} (need ≥)",
            seeds.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 6/9 — sparse compute scaling
// ---------------------------------------------------------------------------

#[test]
fn a6_expert_compute_scales_with_k_not_pool_size() {
    let set = set_of(3);
    let dims = [6usize, 5, 4];
    let synth = SynthConfig::planted(
        set.clone(),
        dims.to_vec(),
        3,
        1.0,
        0.5,
        combo_probs(3, 0.5),
        40,
        50,
    )
    .unwrap();
    let ds = synth_generate(&synth).unwrap();
    let refs: Vec<&Sample> = ds.samples.iter().collect();
    let k = 2usize;
    let tokens = (ds.samples.len() * set.len()) as u64;

    let mut counts = Vec::new();
    for experts in [8usize, 16] {
        let model = FlexMoeModel::new(
            arch(&set, &dims, 3, 16, experts, k, 2, MissingFill::Bank),
            7,
        )
        .unwrap();
        let mut counters = FlopCounters::default();
        model.evaluate(&refs, &mut counters).unwrap();
        counts.push(counters);
    }
    let expected_calls = tokens * k as u64;
    let flop_shift = (counts[1].expert_flops as f64 - counts[0].expert_flops as f64).abs()
        / counts[0].expert_flops as f64;
    let pass = counts[0].expert_calls == expected_calls
        && counts[1].expert_calls == expected_calls
        && flop_shift < 0.01
        && counts[1].gate_flops == 2 * counts[0].gate_flops;
    verdict(
        6,
        "expert-compute-scales-with-k-not-pool-size",
        pass,
        &format!(
            "expert calls {}/{} (expected {expected_calls} = tokens × k), expert-FLOP shift from doubling the pool {:.3e} (need < 1e-2), gate FLOPs {} → {}",
            counts[0].expert_calls,
            counts[1].expert_calls,
            flop_shift,
            counts[0].gate_flops,
            counts[1].gate_flops
        ),
    );
}

// ---------------------------------------------------------------------------
// 7/9 — analysis-path oracles
// ---------------------------------------------------------------------------

#[test]
fn a7_routing_and_metric_oracles_agree() {
    // (a) Sparse evaluation equals the dense mixture with dropped experts
    //     zeroed, on 100 random layer instances.
    let mut worst_mix = 0.0f64;
    for i in 0..100u64 {
        let mut rng = stream(9000 + i, "acceptance-sparse", i);
        let m = rng.gen_range(2..=3usize);
        let set = set_of(m);
        let d = 2 * rng.gen_range(2..=4usize);
        let combos = (1usize << m) - 1;
        let experts = rng.gen_range(combos.max(3)..=8usize);
        let k = rng.gen_range(1..=experts);
        let n = rng.gen_range(1..=6usize);

        let mut store = ParamStore::new();
        let layer = SmoeLayer::init(&mut store, 0, &set, d, experts, k, 1, 1000 + i).unwrap();
        let tokens: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let node = tape.constant(vec![n, d], tokens.clone()).unwrap();
        let mut counters = FlopCounters::default();
        let routed = layer.route_and_combine(&mut tape, &store, node, &mut counters).unwrap();
        let sparse = tape.value(routed.out).to_vec();
        assert_eq!(counters.expert_calls, (n * k) as u64);

        let masked = routed.router.masked.data();
        let mut dense = vec![0.0f64; n * d];
        for (e, expert) in layer.experts.iter().enumerate() {
            let mut t2 = Tape::new();
            let node2 = t2.constant(vec![n, d], tokens.clone()).unwrap();
            let y = expert.forward(&mut t2, &store, node2).unwrap();
            let y = t2.value(y);
            for r in 0..n {
                let w = masked[r * experts + e];
                for c in 0..d {
                    dense[r * d + c] += w * y[r * d + c];
                }
            }
        }
        for (s, dn) in sparse.iter().zip(&dense) {
            worst_mix = worst_mix.max((s - dn).abs());
        }
    }

    // (b) The balance statistic equals a two-pass variance/mean² computation
    //     on 100 random non-negative vectors.
    let mut worst_cv2 = 0.0f64;
    for i in 0..100u64 {
        let mut rng = stream(9200 + i, "acceptance-cv2", i);
        let len = rng.gen_range(2..=12usize);
        let v: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..2.0)).collect();
        let m = v.iter().sum::<f64>() / len as f64;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / len as f64;
        let direct = if m <= 1e-10 { 0.0 } else { var / (m * m) };
        worst_cv2 = worst_cv2.max((cv_squared(&v).unwrap() - direct).abs());
    }

    // (c) The rank-based one-vs-rest AUC equals exact pair counting (ties at
    //     half credit) on 100 random small score sets.
    let mut worst_auc = 0.0f64;
    for i in 0..100u64 {
        let mut rng = stream(9400 + i, "acceptance-auc", i);
        let classes = rng.gen_range(2..=4usize);
        let n = rng.gen_range(classes + 1..=50usize);
        // The first `classes` labels cover every class, so each class has at
        // least one positive and at least one negative sample.
        let labels: Vec<usize> =
            (0..n).map(|j| if j < classes { j } else { rng.gen_range(0..classes) }).collect();
        // Coarse score grid to force plenty of ties.
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..classes).map(|_| rng.gen_range(0..=4) as f64 * 0.25).collect())
            .collect();
        let fast = auc_macro(&scores, &labels).unwrap();
        let mut total = 0.0;
        for c in 0..classes {
            let mut pairs = 0.0;
            let mut credit = 0.0;
            for p in 0..n {
                if labels[p] != c {
                    continue;
                }
                for q in 0..n {
                    if labels[q] == c {
                        continue;
                    }
                    pairs += 1.0;
                    if scores[p][c] > scores[q][c] {
                        credit += 1.0;
                    } else if scores[p][c] == scores[q][c] {
                        credit += 0.5;
                    }
                }
            }
            total += credit / pairs;
        }
        worst_auc = worst_auc.max((fast - total / classes as f64).abs());
    }

    let pass = worst_mix < 1e-12 && worst_cv2 < 1e-12 && worst_auc < 1e-12;
    verdict(
        7,
        "sparse-mixture-cv2-and-auc-match-oracles",
        pass,
        &format!(
            "worst deviations over 100 instances each: sparse-vs-dense {worst_mix:.2e}, CV² {worst_cv2:.2e}, AUC {worst_auc:.2e} (all need < 1e-12)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 8/9 — byte-identical reruns
// ---------------------------------------------------------------------------

#[test]
fn a8_identical_runs_write_identical_logs() {
    let set = set_of(3);
    let dims = [6usize, 5, 4];
    let synth = SynthConfig::planted(
        set.clone(),
        dims.to_vec(),
        3,
        1.2,
        0.4,
        combo_probs(3, 0.5),
        80,
        40,
    )
    .unwrap();
    let full = synth_generate(&synth).unwrap();
    let (train_ds, val_ds, _t) = split_dataset(&full, SplitRatios::default(), 40).unwrap();

    let run = || {
        let model = FlexMoeModel::new(
            arch(&set, &dims, 3, 16, 8, 2, 2, MissingFill::Bank),
            5,
        )
        .unwrap();
        let tc = TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            learning_rate: 1e-3,
            batch_size: 8,
            lambda_aux: 0.01,
            seed: 5,
            curriculum: CurriculumDirection::MostObservedFirst,
        };
        train(model, &tc, &train_ds, &val_ds).unwrap()
    };
    let first = run();
    let second = run();

    let dir = tempfile::tempdir().unwrap();
    let bytes = |name: &str, outcome: &flexmoe::train::TrainOutcome| {
        let steps = dir.path().join(format!("{name}_steps.csv"));
        let epochs = dir.path().join(format!("{name}_epochs.csv"));
        write_step_log(&steps, &outcome.steps).unwrap();
        write_epoch_log(&epochs, &outcome.epochs).unwrap();
        (std::fs::read(steps).unwrap(), std::fs::read(epochs).unwrap())
    };
    let (s1, e1) = bytes("first", &first);
    let (s2, e2) = bytes("second", &second);
    let pass = s1 == s2 && e1 == e2 && !s1.is_empty();
    verdict(
        8,
        "identical-runs-write-identical-logs",
        pass,
        &format!(
            "step log {} bytes and epoch log {} bytes byte-identical across two runs: {}",
            s1.len(),
            e1.len(),
            s1 == s2 && e1 == e2
        ),
    );
}

// ---------------------------------------------------------------------------
// 9/9 — split protocol invariants
// ---------------------------------------------------------------------------

#[test]
fn a9_split_protocol_invariants_hold() {
    let ratios = SplitRatios::default();
    let mut checked_synth = 0usize;
    let mut checked_raw = 0usize;
    let mut worst_impute = 0.0f64;

    for i in 0..100u64 {
        // -- finalized datasets: sizes, full-only eval splits, exact partition
        let mut rng = stream(9600 + i, "acceptance-split", i);
        let m = rng.gen_range(2..=4usize);
        let set = set_of(m);
        let dims: Vec<usize> = (0..m).map(|_| rng.gen_range(3..=6usize)).collect();
        let classes = rng.gen_range(2..=4usize);
        let n = rng.gen_range(40..=120usize);
        let full_mass = rng.gen_range(0.6..0.9);
        let synth = SynthConfig::planted(
            set.clone(),
            dims,
            classes,
            1.0,
            0.5,
            combo_probs(m, full_mass),
            n,
            13_000 + i,
        )
        .unwrap();
        let ds = synth_generate(&synth).unwrap();
        let (tr, va, te) = split_dataset(&ds, ratios, 17_000 + i).unwrap();

        let n_val = (0.15 * n as f64).floor() as usize;
        assert_eq!(va.len(), n_val, "dataset {i}: validation size");
        assert_eq!(te.len(), n_val, "dataset {i}: test size");
        assert_eq!(tr.len(), n - 2 * n_val, "dataset {i}: train size");
        for s in va.samples.iter().chain(&te.samples) {
            assert!(
                s.features.iter().all(|f| f.is_some()),
                "dataset {i}: evaluation sample {} is not full-modality",
                s.id
            );
        }
        let mut seen: Vec<&str> = tr
            .samples
            .iter()
            .chain(&va.samples)
            .chain(&te.samples)
            .map(|s| s.id.as_str())
            .collect();
        seen.sort_unstable();
        let mut all: Vec<&str> = ds.samples.iter().map(|s| s.id.as_str()).collect();
        all.sort_unstable();
        assert_eq!(seen, all, "dataset {i}: splits are not an exact partition");
        checked_synth += 1;

        // -- raw datasets: cell gaps are filled with training-rows-only means
        let raw = random_raw_dataset(9800 + i);
        let full_flags: Vec<bool> =
            raw.samples.iter().map(|s| s.features.iter().all(|f| f.is_some())).collect();
        let idx = split_indices(&full_flags, ratios, 21_000 + i).unwrap();
        let (tr, va, te) = split_and_impute(&raw, ratios, 21_000 + i).unwrap();

        // Independent mean oracle over training rows only.
        let mut sums = vec![vec![0.0f64; 0]; raw.set.len()];
        let mut counts = vec![vec![0usize; 0]; raw.set.len()];
        for mm in 0..raw.set.len() {
            sums[mm] = vec![0.0; raw.input_dims[mm]];
            counts[mm] = vec![0; raw.input_dims[mm]];
        }
        for &r in &idx.train {
            for mm in 0..raw.set.len() {
                if let Some(cells) = &raw.samples[r].features[mm] {
                    for (j, c) in cells.iter().enumerate() {
                        if let Some(v) = c {
                            sums[mm][j] += v;
                            counts[mm][j] += 1;
                        }
                    }
                }
            }
        }
        let by_id = |id: &str| raw.samples.iter().find(|s| s.id == id).unwrap();
        for split in [&tr, &va, &te] {
            for s in &split.samples {
                let raw_s = by_id(&s.id);
                for mm in 0..raw.set.len() {
                    let (Some(final_cells), Some(raw_cells)) =
                        (&s.features[mm], &raw_s.features[mm])
                    else {
                        continue;
                    };
                    for (j, rc) in raw_cells.iter().enumerate() {
                        if rc.is_none() {
                            let expected = sums[mm][j] / counts[mm][j] as f64;
                            worst_impute = worst_impute.max((final_cells[j] - expected).abs());
                        }
                    }
                }
            }
        }
        assert_eq!(tr.len() + va.len() + te.len(), raw.samples.len());
        checked_raw += 1;
    }

    let pass = checked_synth == 100 && checked_raw == 100 && worst_impute < 1e-12;
    verdict(
        9,
        "split-protocol-invariants-hold",
        pass,
        &format!(
            "{checked_synth} finalized + {checked_raw} raw datasets: evaluation splits full-modality, exact partitions, \
             imputed cells match training-only means to {worst_impute:.2e} (need < 1e-12)"
        ),
    );
}

/// Random raw dataset with modality-level absences and cell-level gaps.
fn random_raw_dataset(seed: u64) -> RawDataset {
    let mut rng = stream(seed, "acceptance-raw", 0);
    let m = rng.gen_range(2..=3usize);
    let set = set_of(m);
    let dims: Vec<usize> = (0..m).map(|_| rng.gen_range(3..=5usize)).collect();
    let classes = rng.gen_range(2..=3usize);
    let n = rng.gen_range(30..=60usize);
    let mut samples = Vec::with_capacity(n);
    for j in 0..n {
        let full = rng.gen_bool(0.55);
        let mut features = Vec::with_capacity(m);
        loop {
            features.clear();
            for mm in 0..m {
                let present = full || rng.gen_bool(0.6);
                if present {
                    // Cell-level gaps occur in full rows too, so the
                    // evaluation splits also exercise imputation.
                    let cells: Vec<Option<f64>> = (0..dims[mm])
                        .map(|_| {
                            if rng.gen_bool(0.15) {
                                None
                            } else {
                                Some(rng.gen_range(-3.0..3.0))
                            }
                        })
                        .collect();
                    features.push(Some(cells));
                } else {
                    features.push(None);
                }
            }
            if features.iter().any(|f| f.is_some()) {
                break;
            }
        }
        samples.push(RawSample {
            id: format!("r{j}"),
            label: rng.gen_range(0..classes),
            features,
        });
    }
    RawDataset { set, input_dims: dims, classes, samples }
}
