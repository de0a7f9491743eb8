//! Tensor and tape tests.
//!
//! Expected values marked "frozen" were computed independently (exact
//! arithmetic or high-precision evaluation of the defining formula) and are
//! asserted as constants — the implementation must reproduce them, not the
//! other way around.

use super::*;
use crate::rng::stream;
use proptest::prelude::*;

const EPS: f64 = 1e-5;
const REL_TOL: f64 = 1e-5;

fn t2(n: usize, m: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![n, m], data).expect("valid tensor")
}

// ---------------------------------------------------------------- Tensor --

#[test]
fn tensor_rejects_shape_data_mismatch() {
    assert!(matches!(Tensor::new(vec![2, 3], vec![0.0; 5]), Err(crate::Error::Shape(_))));
    assert!(matches!(Tensor::new(vec![0], vec![]), Err(crate::Error::Shape(_))));
}

#[test]
fn tensor_rejects_non_finite() {
    assert!(matches!(Tensor::new(vec![2], vec![1.0, f64::NAN]), Err(crate::Error::Numeric(_))));
    assert!(matches!(Tensor::new(vec![1], vec![f64::INFINITY]), Err(crate::Error::Numeric(_))));
}

#[test]
fn randn_is_seed_deterministic() {
    let a = Tensor::randn(vec![4, 4], 0.02, &mut stream(9, "init", 0));
    let b = Tensor::randn(vec![4, 4], 0.02, &mut stream(9, "init", 0));
    assert_eq!(a.data(), b.data());
    let c = Tensor::randn(vec![4, 4], 0.02, &mut stream(9, "init", 1));
    assert_ne!(a.data(), c.data());
}

// --------------------------------------------------------------- softmax --

#[test]
fn softmax_symmetric_pair() {
    let out = softmax_rows(&t2(1, 2, vec![0.0, 0.0])).unwrap();
    assert_eq!(out.data(), &[0.5, 0.5]);
}

#[test]
fn softmax_ln2_exact() {
    let out = softmax_rows(&t2(1, 2, vec![2.0_f64.ln(), 0.0])).unwrap();
    assert!((out.data()[0] - 2.0 / 3.0).abs() < 1e-12);
    assert!((out.data()[1] - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn softmax_of_descending_logits_matches_frozen_values() {
    // Frozen: softmax(2, 1, 0, −1) evaluated from e^2, e^1, e^0, e^−1.
    let expect = [
        0.6439142598879722,
        0.23688281808991013,
        0.08714431874203257,
        0.032058603280084988,
    ];
    let out = softmax_rows(&t2(1, 4, vec![2.0, 1.0, 0.0, -1.0])).unwrap();
    for (o, e) in out.data().iter().zip(&expect) {
        assert!((o - e).abs() < 1e-10, "got {o}, expected {e}");
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in prop::collection::vec(prop::collection::vec(-30.0..30.0f64, 5), 1..6)) {
        let n = rows.len();
        let data: Vec<f64> = rows.iter().flatten().cloned().collect();
        let out = softmax_rows(&t2(n, 5, data)).unwrap();
        for r in 0..n {
            let sum: f64 = out.data()[r * 5..(r + 1) * 5].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(out.data()[r * 5..(r + 1) * 5].iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn softmax_is_shift_invariant(row in prop::collection::vec(-20.0..20.0f64, 4), c in -50.0..50.0f64) {
        let base = softmax_rows(&t2(1, 4, row.clone())).unwrap();
        let shifted = softmax_rows(&t2(1, 4, row.iter().map(|v| v + c).collect())).unwrap();
        for (a, b) in base.data().iter().zip(shifted.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

// ----------------------------------------------------------------- top-k --

#[test]
fn topk_full_k_is_identity() {
    let out = topk_mask(&t2(1, 3, vec![0.5, 0.3, 0.2]), 3).unwrap();
    assert_eq!(out.data(), &[0.5, 0.3, 0.2]);
}

#[test]
fn topk_masks_tail_of_softmax_row() {
    // Frozen: softmax(2,1,0,−1) then keep the top two entries.
    let input = vec![0.6439142598879722, 0.23688281808991013, 0.08714431874203257, 0.032058603280084988];
    let out = topk_mask(&t2(1, 4, input.clone()), 2).unwrap();
    assert_eq!(out.data(), &[input[0], input[1], 0.0, 0.0]);
}

#[test]
fn topk_tie_breaks_to_lowest_index() {
    let out = topk_mask(&t2(1, 3, vec![0.4, 0.4, 0.2]), 1).unwrap();
    assert_eq!(out.data(), &[0.4, 0.0, 0.0]);
}

#[test]
fn topk_rejects_out_of_range_k() {
    assert!(matches!(topk_mask(&t2(1, 3, vec![1.0, 2.0, 3.0]), 0), Err(crate::Error::Argument(_))));
    assert!(matches!(topk_mask(&t2(1, 3, vec![1.0, 2.0, 3.0]), 4), Err(crate::Error::Argument(_))));
}

proptest! {
    #[test]
    fn topk_keeps_exactly_k_when_distinct(seed in any::<u64>(), k in 1usize..8) {
        // Distinct values via a seed-shuffled arithmetic progression.
        let mut perm: Vec<f64> = (0..8).map(|i| i as f64 * 0.13 + 0.01).collect();
        let mut s = seed;
        for i in (1..perm.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let j = ((s >> 33) as usize) % (i + 1);
            perm.swap(i, j);
        }
        let out = topk_mask(&t2(1, 8, perm.clone()), k).unwrap();
        let nonzero = out.data().iter().filter(|&&v| v != 0.0).count();
        prop_assert_eq!(nonzero, k);
        // Survivors are the k largest.
        let mut sorted = perm.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let threshold = sorted[k - 1];
        for (i, &v) in out.data().iter().enumerate() {
            if v != 0.0 {
                prop_assert!(perm[i] >= threshold);
            }
        }
    }
}

#[test]
fn topk_backward_is_exactly_zero_on_masked_positions() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t2(2, 4, vec![0.9, 0.1, 0.5, 0.3, 0.2, 0.8, 0.6, 0.4]).with_grad()).unwrap();
    let masked = tape.topk_mask(x, 2).unwrap();
    let loss = tape.sum_all(masked).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(x);
    assert_eq!(g, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
}

// --------------------------------------------------------- cross entropy --

#[test]
fn cross_entropy_certain_prediction_is_zero() {
    // Extreme logit margin puts essentially all mass on the target.
    let loss = cross_entropy(&t2(1, 3, vec![80.0, 0.0, 0.0]), &[0]).unwrap();
    assert!(loss.abs() < 1e-12, "got {loss}");
}

#[test]
fn cross_entropy_uniform_is_ln_c() {
    let loss = cross_entropy(&t2(1, 3, vec![0.0, 0.0, 0.0]), &[1]).unwrap();
    assert!((loss - 3.0_f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_averages_rows() {
    let a = cross_entropy(&t2(1, 3, vec![2.0, -1.0, 0.5]), &[0]).unwrap();
    let b = cross_entropy(&t2(1, 3, vec![-0.5, 1.0, 0.0]), &[2]).unwrap();
    let both = cross_entropy(&t2(2, 3, vec![2.0, -1.0, 0.5, -0.5, 1.0, 0.0]), &[0, 2]).unwrap();
    assert!((both - (a + b) / 2.0).abs() < 1e-12);
}

#[test]
fn cross_entropy_rejects_bad_target() {
    assert!(matches!(cross_entropy(&t2(1, 3, vec![0.0; 3]), &[3]), Err(crate::Error::Argument(_))));
}

// --------------------------------------------------------------- tape ----

#[test]
fn empty_tape_leaves_param_grads_zero() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::randn(vec![3], 1.0, &mut stream(1, "init", 0)));
    let tape = Tape::new();
    tape.write_param_grads(&mut store);
    assert_eq!(store.get(id).grad().unwrap(), &[0.0, 0.0, 0.0]);
}

#[test]
fn reusing_a_node_accumulates_once_per_use() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![1], vec![3.0]).unwrap().with_grad()).unwrap();
    let y = tape.add(x, x).unwrap(); // y = 2x
    let loss = tape.sum_all(y).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x), &[2.0]);
}

#[test]
fn leasing_a_param_twice_sums_grads_in_store() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::new(vec![1], vec![5.0]).unwrap());
    let mut tape = Tape::new();
    let a = tape.param(&store, id).unwrap();
    let b = tape.param(&store, id).unwrap();
    let y = tape.mul(a, b).unwrap(); // w², leased as two leaves
    let loss = tape.sum_all(y).unwrap();
    tape.backward(loss).unwrap();
    tape.write_param_grads(&mut store);
    assert_eq!(store.get(id).grad().unwrap(), &[10.0]); // d(w²)/dw = 2w
}

#[test]
fn non_finite_op_output_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1], vec![1e308]).unwrap();
    let y = tape.scale(x, 1e10); // overflows to +inf
    assert!(matches!(y, Err(crate::Error::Numeric(_))));
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t2(2, 2, vec![1.0; 4]).with_grad()).unwrap();
    assert!(matches!(tape.backward(x), Err(crate::Error::Argument(_))));
}

// ---------------------------------------------------------- grad checks --

/// Deterministic weights used to collapse an op output to a scalar with
/// non-uniform sensitivities.
fn probe_weights(n: usize, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = stream(seed, "probe", 0);
    (0..n).map(|_| rng.gen_range(0.5..1.5)).collect()
}

/// grad-checks `build` over all params in the store.
fn check<F>(store: &mut ParamStore, build: F) -> f64
where
    F: FnMut(&ParamStore, &mut Tape) -> crate::Result<NodeId>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    let report = grad_check(store, &ids, EPS, build).expect("grad check runs");
    report.max_rel_error
}

#[test]
fn grad_check_linear_is_near_exact() {
    let mut store = ParamStore::new();
    store.add("theta", Tensor::randn(vec![6], 1.0, &mut stream(2, "init", 0)));
    let rel = check(&mut store, |s, tape| {
        let x = tape.param(s, s.find("theta").unwrap())?;
        let scaled = tape.scale(x, 3.25)?;
        tape.sum_all(scaled)
    });
    assert!(rel <= 1e-10, "linear map should be exact, got {rel}");
}

#[test]
fn grad_check_two_layer_tanh_mlp() {
    let mut store = ParamStore::new();
    let mut rng = stream(3, "init", 0);
    store.add("w1", Tensor::randn(vec![5, 7], 0.5, &mut rng));
    store.add("b1", Tensor::randn(vec![7], 0.5, &mut rng));
    store.add("w2", Tensor::randn(vec![7, 2], 0.5, &mut rng));
    store.add("b2", Tensor::randn(vec![2], 0.5, &mut rng));
    let x = Tensor::randn(vec![4, 5], 1.0, &mut rng);
    let probe = probe_weights(8, 3);
    let rel = check(&mut store, move |s, tape| {
        let xn = tape.leaf(&x)?;
        let w1 = tape.param(s, s.find("w1").unwrap())?;
        let b1 = tape.param(s, s.find("b1").unwrap())?;
        let w2 = tape.param(s, s.find("w2").unwrap())?;
        let b2 = tape.param(s, s.find("b2").unwrap())?;
        let h = tape.matmul(xn, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.tanh(h)?;
        let o = tape.matmul(h, w2)?;
        let o = tape.add_row(o, b2)?;
        let weighted = tape.mul_mask(o, &probe)?;
        tape.sum_all(weighted)
    });
    assert!(rel < REL_TOL, "relative error {rel}");
}

#[test]
fn grad_check_softmax_cross_entropy_composite() {
    let mut store = ParamStore::new();
    let mut rng = stream(4, "init", 0);
    store.add("logits", Tensor::randn(vec![5, 4], 1.5, &mut rng));
    let rel = check(&mut store, |s, tape| {
        let l = tape.param(s, s.find("logits").unwrap())?;
        tape.softmax_cross_entropy(l, &[0, 3, 1, 2, 2])
    });
    assert!(rel < REL_TOL, "relative error {rel}");
}

/// One gradient check per tape primitive, each collapsed to a scalar through
/// fixed probe weights so every output coordinate has distinct sensitivity.
#[test]
fn grad_check_every_primitive() {
    struct Case {
        name: &'static str,
        rel: f64,
    }
    let mut results: Vec<Case> = Vec::new();
    let mut run = |name: &'static str, rel: f64| {
        results.push(Case { name, rel });
    };

    // matmul
    {
        let mut store = ParamStore::new();
        let mut rng = stream(10, "init", 0);
        store.add("a", Tensor::randn(vec![3, 4], 1.0, &mut rng));
        store.add("b", Tensor::randn(vec![4, 5], 1.0, &mut rng));
        let probe = probe_weights(15, 10);
        run("matmul", check(&mut store, move |s, tape| {
            let a = tape.param(s, s.find("a").unwrap())?;
            let b = tape.param(s, s.find("b").unwrap())?;
            let y = tape.matmul(a, b)?;
            let w = tape.mul_mask(y, &probe)?;
            tape.sum_all(w)
        }));
    }

    // add / sub / mul / div
    {
        let mut store = ParamStore::new();
        let mut rng = stream(11, "init", 0);
        store.add("a", Tensor::randn(vec![3, 3], 1.0, &mut rng));
        // Denominators bounded away from zero.
        let mut b = Tensor::randn(vec![3, 3], 0.25, &mut rng);
        for v in b.data_mut() {
            *v += 2.0;
        }
        store.add("b", b);
        let probe = probe_weights(9, 11);
        for (name, which) in [("add", 0), ("sub", 1), ("mul", 2), ("div", 3)] {
            let probe = probe.clone();
            run(name, check(&mut store, move |s, tape| {
                let a = tape.param(s, s.find("a").unwrap())?;
                let b = tape.param(s, s.find("b").unwrap())?;
                let y = match which {
                    0 => tape.add(a, b)?,
                    1 => tape.sub(a, b)?,
                    2 => tape.mul(a, b)?,
                    _ => tape.div(a, b)?,
                };
                let w = tape.mul_mask(y, &probe)?;
                tape.sum_all(w)
            }));
        }
    }

    // broadcast add/mul over rows, scale, add_const, transpose
    {
        let mut store = ParamStore::new();
        let mut rng = stream(12, "init", 0);
        store.add("x", Tensor::randn(vec![4, 3], 1.0, &mut rng));
        store.add("row", Tensor::randn(vec![3], 1.0, &mut rng));
        let probe = probe_weights(12, 12);
        for (name, which) in [("add_row", 0), ("mul_row", 1), ("scale", 2), ("add_const", 3), ("transpose", 4)] {
            let probe = probe.clone();
            run(name, check(&mut store, move |s, tape| {
                let x = tape.param(s, s.find("x").unwrap())?;
                let row = tape.param(s, s.find("row").unwrap())?;
                let y = match which {
                    0 => tape.add_row(x, row)?,
                    1 => tape.mul_row(x, row)?,
                    2 => tape.scale(x, -1.7)?,
                    3 => tape.add_const(x, 0.9)?,
                    _ => tape.transpose(x)?,
                };
                let w = tape.mul_mask(y, &probe)?;
                tape.sum_all(w)
            }));
        }
    }

    // nonlinearities and log
    {
        let mut store = ParamStore::new();
        let mut rng = stream(13, "init", 0);
        store.add("x", Tensor::randn(vec![3, 4], 1.2, &mut rng));
        let mut pos = Tensor::randn(vec![3, 4], 0.3, &mut rng);
        for v in pos.data_mut() {
            *v = v.abs() + 0.5;
        }
        store.add("pos", pos);
        let probe = probe_weights(12, 13);
        for (name, which) in [("gelu", 0), ("tanh", 1), ("log", 2)] {
            let probe = probe.clone();
            run(name, check(&mut store, move |s, tape| {
                let x = tape.param(s, s.find("x").unwrap())?;
                let pos = tape.param(s, s.find("pos").unwrap())?;
                let y = match which {
                    0 => tape.gelu(x)?,
                    1 => tape.tanh(x)?,
                    _ => tape.log(pos)?,
                };
                let w = tape.mul_mask(y, &probe)?;
                tape.sum_all(w)
            }));
        }
    }

    // reductions
    {
        let mut store = ParamStore::new();
        let mut rng = stream(14, "init", 0);
        store.add("x", Tensor::randn(vec![4, 5], 1.0, &mut rng));
        run("sum_all", check(&mut store, |s, tape| {
            let x = tape.param(s, s.find("x").unwrap())?;
            tape.sum_all(x)
        }));
        run("mean_all", check(&mut store, |s, tape| {
            let x = tape.param(s, s.find("x").unwrap())?;
            tape.mean_all(x)
        }));
        let probe = probe_weights(5, 14);
        run("col_sums", check(&mut store, move |s, tape| {
            let x = tape.param(s, s.find("x").unwrap())?;
            let y = tape.col_sums(x)?;
            let w = tape.mul_mask(y, &probe)?;
            tape.sum_all(w)
        }));
        let probe = probe_weights(5, 15);
        run("row_group_mean", check(&mut store, move |s, tape| {
            let x = tape.param(s, s.find("x").unwrap())?;
            let y = tape.row_group_mean(x, 4)?;
            let w = tape.mul_mask(y, &probe)?;
            tape.sum_all(w)
        }));
    }

    // normalize_rows and softmax_rows
    {
        let mut store = ParamStore::new();
        let mut rng = stream(15, "init", 0);
        store.add("x", Tensor::randn(vec![3, 6], 1.0, &mut rng));
        let probe = probe_weights(18, 16);
        let p2 = probe.clone();
        run("normalize_rows", check(&mut store, move |s, tape| {
            let x = tape.param(s, s.find("x").unwrap())?;
            let y = tape.normalize_rows(x, 1e-5)?;
            let w = tape.mul_mask(y, &p2)?;
            tape.sum_all(w)
        }));
        run("softmax_rows", check(&mut store, move |s, tape| {
            let x = tape.param(s, s.find("x").unwrap())?;
            let y = tape.softmax_rows(x)?;
            let w = tape.mul_mask(y, &probe)?;
            tape.sum_all(w)
        }));
    }

    // topk_mask (values spread so ±eps cannot flip the selection)
    {
        let mut store = ParamStore::new();
        let mut rng = stream(16, "init", 0);
        store.add("x", Tensor::randn(vec![3, 6], 1.0, &mut rng));
        let probe = probe_weights(18, 17);
        run("topk_mask", check(&mut store, move |s, tape| {
            let x = tape.param(s, s.find("x").unwrap())?;
            let y = tape.topk_mask(x, 3)?;
            let w = tape.mul_mask(y, &probe)?;
            tape.sum_all(w)
        }));
    }

    // structural ops: gather/scatter/assemble/concat/slice
    {
        let mut store = ParamStore::new();
        let mut rng = stream(17, "init", 0);
        store.add("x", Tensor::randn(vec![5, 4], 1.0, &mut rng));
        store.add("y", Tensor::randn(vec![3, 4], 1.0, &mut rng));
        let probe = probe_weights(40, 18);
        for (name, which) in [
            ("gather_rows", 0),
            ("scatter_rows", 1),
            ("assemble_rows", 2),
            ("concat_rows", 3),
            ("slice_cols", 4),
            ("concat_cols", 5),
        ] {
            let probe = probe.clone();
            run(name, check(&mut store, move |s, tape| {
                let x = tape.param(s, s.find("x").unwrap())?;
                let y = tape.param(s, s.find("y").unwrap())?;
                let out = match which {
                    0 => tape.gather_rows(x, &[4, 0, 0, 2])?,
                    1 => tape.scatter_rows(y, &[5, 1, 3], 7)?,
                    2 => tape.assemble_rows(&[(x, 1), (y, 2), (x, 1), (y, 0)])?,
                    3 => tape.concat_rows(&[x, y])?,
                    4 => tape.slice_cols(x, 1, 2)?,
                    _ => {
                        let xs = tape.slice_cols(x, 0, 2)?;
                        let x2 = tape.slice_cols(x, 2, 2)?;
                        tape.concat_cols(&[xs, x2])?
                    }
                };
                let n = tape.value(out).len();
                let w = tape.mul_mask(out, &probe[..n])?;
                tape.sum_all(w)
            }));
        }
    }

    // scale_rows_by_col and mul_mask
    {
        let mut store = ParamStore::new();
        let mut rng = stream(18, "init", 0);
        store.add("x", Tensor::randn(vec![3, 4], 1.0, &mut rng));
        store.add("w", Tensor::randn(vec![6, 5], 1.0, &mut rng));
        let probe = probe_weights(12, 19);
        let p2 = probe.clone();
        run("scale_rows_by_col", check(&mut store, move |s, tape| {
            let x = tape.param(s, s.find("x").unwrap())?;
            let w = tape.param(s, s.find("w").unwrap())?;
            let y = tape.scale_rows_by_col(x, w, &[5, 0, 2], 3)?;
            let m = tape.mul_mask(y, &p2)?;
            tape.sum_all(m)
        }));
        run("mul_mask", check(&mut store, move |s, tape| {
            let x = tape.param(s, s.find("x").unwrap())?;
            let y = tape.mul_mask(x, &probe)?;
            tape.sum_all(y)
        }));
    }

    // fused losses
    {
        let mut store = ParamStore::new();
        let mut rng = stream(19, "init", 0);
        store.add("logits", Tensor::randn(vec![4, 5], 1.0, &mut rng));
        run("softmax_cross_entropy", check(&mut store, |s, tape| {
            let l = tape.param(s, s.find("logits").unwrap())?;
            tape.softmax_cross_entropy(l, &[1, 4, 0, 2])
        }));
        run("nll_from_probs", check(&mut store, |s, tape| {
            let l = tape.param(s, s.find("logits").unwrap())?;
            let p = tape.softmax_rows(l)?;
            tape.nll_from_probs(p, &[1, 4, 0, 2])
        }));
    }

    for case in &results {
        assert!(
            case.rel < REL_TOL,
            "primitive {} failed gradient check: relative error {}",
            case.name,
            case.rel
        );
    }
    // Every primitive family must actually have been exercised.
    assert!(results.len() >= 25, "expected ≥ 25 primitive checks, ran {}", results.len());
}
