//! Evaluation metrics (accuracy, macro-F1, macro one-vs-rest AUC) and the
//! routing/bank analyses, with CSV report writers.
//!
//! AUC is rank-based (midranks), so tied scores contribute half a
//! concordant pair. Macro-F1 counts a class with no predictions and no
//! occurrences as F1 = 0. Routing analyses count either all top-k
//! assignments or only the top-1 winner; bank similarity compares rows or
//! columns over the cells both members can actually serve (their
//! readable-cell intersection), and pairs with no shared readable cells or
//! a zero-norm side are reported as 0 with an explicit flag.

use std::path::Path;

use crate::modality::{BankLayout, ExpertIndexMap, ModalityCombo, ModalitySet};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// One token's routing outcome: its sample's combo, the selected experts,
/// and the single best expert.
#[derive(Debug, Clone)]
pub struct TokenRouting {
    pub combo: ModalityCombo,
    pub experts: Vec<usize>,
    pub top1: usize,
}

/// Headline evaluation numbers plus the confusion matrix behind them.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub auc_macro: f64,
    /// confusion[truth][pred].
    pub confusion: Vec<Vec<usize>>,
    pub n: usize,
}

/// Fraction of exact matches.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Argument(format!(
            "accuracy needs equal non-empty prediction/label lists, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Count matrix indexed [truth][pred].
pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if preds.len() != labels.len() {
        return Err(Error::Argument(format!(
            "confusion needs equal lists, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    let mut m = vec![vec![0usize; classes]; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= classes || l >= classes {
            return Err(Error::Argument(format!(
                "class index out of range: pred {p}, label {l}, classes {classes}"
            )));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Unweighted mean of per-class F1. A class with neither predictions nor
/// occurrences contributes 0.
pub fn macro_f1(preds: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    if classes == 0 {
        return Err(Error::Argument("macro_f1 needs at least one class".into()));
    }
    let m = confusion(preds, labels, classes)?;
    let mut total = 0.0;
    for c in 0..classes {
        let tp = m[c][c] as f64;
        let fp: f64 = (0..classes).filter(|&t| t != c).map(|t| m[t][c] as f64).sum();
        let fneg: f64 = (0..classes).filter(|&p| p != c).map(|p| m[c][p] as f64).sum();
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
        if precision + recall > 0.0 {
            total += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(total / classes as f64)
}

/// Midrank AUC for one binary split. Assumes at least one positive and one
/// negative (checked by the caller).
fn rank_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for t in i..=j {
            ranks[order[t]] = avg;
        }
        i = j + 1;
    }
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let n_neg = n as f64 - n_pos;
    let rank_sum: f64 = (0..n).filter(|&i| positive[i]).map(|i| ranks[i]).sum();
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

/// Unweighted mean over classes of one-vs-rest rank AUC. Every class must
/// have at least one positive and one negative sample.
pub fn auc_macro(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if scores.len() < 2 || scores.len() != labels.len() {
        return Err(Error::Argument(format!(
            "auc_macro needs ≥ 2 scored samples with labels, got {} scores and {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let classes = scores[0].len();
    if classes < 2 {
        return Err(Error::Argument("auc_macro needs ≥ 2 classes of scores".into()));
    }
    for (i, row) in scores.iter().enumerate() {
        if row.len() != classes {
            return Err(Error::Argument(format!(
                "score row {i} has {} entries, expected {classes}",
                row.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("score row {i} contains a non-finite value")));
        }
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Argument(format!("label {bad} out of range for {classes} classes")));
    }
    let mut total = 0.0;
    for c in 0..classes {
        let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let n_pos = positive.iter().filter(|&&p| p).count();
        if n_pos == 0 {
            return Err(Error::UndefinedClass(format!(
                "class {c} has no positive samples; its one-vs-rest AUC is undefined"
            )));
        }
        if n_pos == labels.len() {
            return Err(Error::UndefinedClass(format!(
                "class {c} has no negative samples; its one-vs-rest AUC is undefined"
            )));
        }
        let col: Vec<f64> = scores.iter().map(|row| row[c]).collect();
        total += rank_auc(&col, &positive);
    }
    Ok(total / classes as f64)
}

/// Argmax per row, lowest index on ties.
pub fn argmax_preds(scores: &[Vec<f64>]) -> Vec<usize> {
    scores
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

impl EvalReport {
    /// Builds the full report from per-sample class probabilities.
    pub fn from_scores(scores: &[Vec<f64>], labels: &[usize]) -> Result<EvalReport> {
        if scores.is_empty() {
            return Err(Error::EmptyReport("no scored samples to report on".into()));
        }
        let classes = scores[0].len();
        let preds = argmax_preds(scores);
        Ok(EvalReport {
            accuracy: accuracy(&preds, labels)?,
            macro_f1: macro_f1(&preds, labels, classes)?,
            auc_macro: auc_macro(scores, labels)?,
            confusion: confusion(&preds, labels, classes)?,
            n: scores.len(),
        })
    }
}

/// Per-combo expert activation fractions.
#[derive(Debug, Clone)]
pub struct ActivationMatrix {
    /// Row combos, ordered like the expert index map (so a perfectly
    /// steered routing shows up as a leading diagonal).
    pub combos: Vec<ModalityCombo>,
    pub experts: usize,
    /// entries[row][expert] = fraction of that combo's counted assignments.
    pub entries: Vec<Vec<f64>>,
}

fn build_matrix<F>(set: &ModalitySet, logs: &[TokenRouting], experts: usize, count: F) -> Result<ActivationMatrix>
where
    F: Fn(&TokenRouting, &mut Vec<u64>),
{
    if logs.is_empty() {
        return Err(Error::EmptyReport("no routing records to tabulate".into()));
    }
    let map = ExpertIndexMap::new(set);
    let mut rows: Vec<(ModalityCombo, Vec<u64>)> = Vec::new();
    let mut row_of = std::collections::HashMap::new();
    for combo in (0..map.len()).map(|i| map.combo_at(i)) {
        row_of.insert(combo.mask(), rows.len());
        rows.push((combo, vec![0u64; experts]));
    }
    for log in logs {
        if log.experts.iter().any(|&e| e >= experts) || log.top1 >= experts {
            return Err(Error::Argument(format!(
                "routing record names an expert outside 0..{experts}"
            )));
        }
        let row = row_of[&log.combo.mask()];
        count(log, &mut rows[row].1);
    }
    let mut combos = Vec::new();
    let mut entries = Vec::new();
    for (combo, counts) in rows {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            continue; // combo absent from the logs
        }
        combos.push(combo);
        entries.push(counts.iter().map(|&c| c as f64 / total as f64).collect());
    }
    Ok(ActivationMatrix { combos, experts, entries })
}

/// Activation fractions counting every top-k assignment.
pub fn activation_matrix(set: &ModalitySet, logs: &[TokenRouting], experts: usize) -> Result<ActivationMatrix> {
    build_matrix(set, logs, experts, |log, counts| {
        for &e in &log.experts {
            counts[e] += 1;
        }
    })
}

/// Activation fractions counting only each token's single best expert.
pub fn top1_matrix(set: &ModalitySet, logs: &[TokenRouting], experts: usize) -> Result<ActivationMatrix> {
    build_matrix(set, logs, experts, |log, counts| {
        counts[log.top1] += 1;
    })
}

/// Pairwise cosine similarities over the bank, by row (observed combo) and
/// by column (missing modality). `flags[i][j]` marks pairs whose shared
/// readable cells are empty or where either side has zero norm; their
/// similarity is reported as 0.
#[derive(Debug, Clone)]
pub struct BankSimilarity {
    pub row_labels: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub row_flags: Vec<Vec<bool>>,
    pub col_labels: Vec<String>,
    pub cols: Vec<Vec<f64>>,
    pub col_flags: Vec<Vec<bool>>,
}

fn cosine(a: &[f64], b: &[f64]) -> (f64, bool) {
    if a.is_empty() {
        return (0.0, true);
    }
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return (0.0, true);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb), false)
}

/// Computes both similarity matrices from the raw bank tensor.
pub fn bank_similarity(set: &ModalitySet, layout: &BankLayout, table: &Tensor) -> Result<BankSimilarity> {
    let expect = vec![layout.rows(), layout.modalities, layout.d];
    if table.shape() != expect.as_slice() {
        return Err(Error::Shape(format!(
            "bank table shaped {:?}, layout expects {:?}",
            table.shape(),
            expect
        )));
    }
    let m_count = layout.modalities;
    let d = layout.d;
    let cell = |row: usize, m: usize| -> &[f64] {
        let start = (row * m_count + m) * d;
        &table.data()[start..start + d]
    };

    let n_rows = layout.rows();
    let mut row_labels = Vec::with_capacity(n_rows);
    let mut combos = Vec::with_capacity(n_rows);
    for row in 0..n_rows {
        let combo = set.combo_from_mask((row + 1) as u32)?;
        row_labels.push(set.label(&combo));
        combos.push(combo);
    }
    let mut rows = vec![vec![0.0; n_rows]; n_rows];
    let mut row_flags = vec![vec![false; n_rows]; n_rows];
    for i in 0..n_rows {
        for j in 0..n_rows {
            let mut a = Vec::new();
            let mut b = Vec::new();
            for m in 0..m_count {
                if !combos[i].contains(m) && !combos[j].contains(m) {
                    a.extend_from_slice(cell(i, m));
                    b.extend_from_slice(cell(j, m));
                }
            }
            let (sim, flag) = cosine(&a, &b);
            rows[i][j] = sim;
            row_flags[i][j] = flag;
        }
    }

    let col_labels: Vec<String> = (0..m_count).map(|m| set.name(m).to_string()).collect();
    let mut cols = vec![vec![0.0; m_count]; m_count];
    let mut col_flags = vec![vec![false; m_count]; m_count];
    for m1 in 0..m_count {
        for m2 in 0..m_count {
            let mut a = Vec::new();
            let mut b = Vec::new();
            for (row, combo) in combos.iter().enumerate() {
                if !combo.contains(m1) && !combo.contains(m2) {
                    a.extend_from_slice(cell(row, m1));
                    b.extend_from_slice(cell(row, m2));
                }
            }
            let (sim, flag) = cosine(&a, &b);
            cols[m1][m2] = sim;
            col_flags[m1][m2] = flag;
        }
    }
    Ok(BankSimilarity { row_labels, rows, row_flags, col_labels, cols, col_flags })
}

fn fmt(v: f64) -> String {
    format!("{v:.17e}")
}

/// Writes `metric,value` rows: the three headline metrics, the sample
/// count, then the confusion counts as `confusion_<truth>_<pred>` rows.
pub fn write_eval_report(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "value"])?;
    w.write_record(["accuracy", &fmt(report.accuracy)])?;
    w.write_record(["macro_f1", &fmt(report.macro_f1)])?;
    w.write_record(["auc_macro", &fmt(report.auc_macro)])?;
    w.write_record(["n", &report.n.to_string()])?;
    for (t, row) in report.confusion.iter().enumerate() {
        for (p, &count) in row.iter().enumerate() {
            w.write_record([format!("confusion_{t}_{p}"), count.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `combo,expert_0,...` rows of activation fractions.
pub fn write_activation_matrix(path: &Path, set: &ModalitySet, matrix: &ActivationMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["combo".to_string()];
    header.extend((0..matrix.experts).map(|e| format!("expert_{e}")));
    w.write_record(&header)?;
    for (combo, entries) in matrix.combos.iter().zip(&matrix.entries) {
        let mut rec = vec![set.label(combo)];
        rec.extend(entries.iter().map(|&v| fmt(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn write_similarity(
    path: &Path,
    corner: &str,
    labels: &[String],
    values: &[Vec<f64>],
    flags: &[Vec<bool>],
) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(path)?;
    w.write_record(["# cosine over shared readable bank cells; undefined = no shared cells or zero norm"])?;
    let mut header = vec![corner.to_string()];
    header.extend(labels.iter().cloned());
    w.write_record(&header)?;
    for (i, label) in labels.iter().enumerate() {
        let mut rec = vec![label.clone()];
        for j in 0..labels.len() {
            rec.push(if flags[i][j] { "undefined".to_string() } else { fmt(values[i][j]) });
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the combo×combo similarity matrix.
pub fn write_bank_similarity_rows(path: &Path, sim: &BankSimilarity) -> Result<()> {
    write_similarity(path, "combo", &sim.row_labels, &sim.rows, &sim.row_flags)
}

/// Writes the modality×modality similarity matrix.
pub fn write_bank_similarity_cols(path: &Path, sim: &BankSimilarity) -> Result<()> {
    write_similarity(path, "modality", &sim.col_labels, &sim.cols, &sim.col_flags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    #[test]
    fn accuracy_counts_matches() {
        assert_eq!(accuracy(&[1, 2, 0], &[1, 2, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 1, 1], &[0, 0, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 0, 2, 2], &[1, 1, 2, 0]).unwrap(), 0.5);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn accuracy_equals_confusion_trace() {
        let mut rng = stream(9, "metrics-trace", 0);
        for _ in 0..20 {
            let n = rng.gen_range(1..40);
            let c = rng.gen_range(2..5);
            let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
            let m = confusion(&preds, &labels, c).unwrap();
            let trace: usize = (0..c).map(|i| m[i][i]).sum();
            let total: usize = m.iter().flatten().sum();
            assert_eq!(total, n);
            let acc = accuracy(&preds, &labels).unwrap();
            assert!((acc - trace as f64 / n as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn macro_f1_hand_values() {
        // Perfect predictions.
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        // Binary confusion [[1,1],[1,1]]: both classes at F1 = 0.5.
        let preds = [0, 1, 0, 1];
        let labels = [0, 0, 1, 1];
        assert!((macro_f1(&preds, &labels, 2).unwrap() - 0.5).abs() < 1e-15);
        // Collapse onto class 0 with balanced 3-class labels: (0.5+0+0)/3.
        let preds = [0, 0, 0, 0, 0, 0];
        let labels = [0, 1, 2, 0, 1, 2];
        assert!((macro_f1(&preds, &labels, 3).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        // A class absent from preds and labels contributes zero, not NaN.
        let v = macro_f1(&[0, 1], &[0, 1], 3).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn auc_hand_values() {
        // Perfect separation.
        let scores = vec![vec![0.9, 0.1], vec![0.8, 0.2], vec![0.2, 0.8], vec![0.1, 0.9]];
        let labels = [0, 0, 1, 1];
        assert_eq!(auc_macro(&scores, &labels).unwrap(), 1.0);
        // All scores identical: every pair tied, AUC = 0.5.
        let flat = vec![vec![0.5, 0.5]; 6];
        let labels6 = [0, 1, 0, 1, 0, 1];
        assert_eq!(auc_macro(&flat, &labels6).unwrap(), 0.5);
        // One inversion among 4 samples: 3 of 4 pairs concordant.
        let scores = vec![vec![0.9, 0.1], vec![0.4, 0.6], vec![0.6, 0.4], vec![0.2, 0.8]];
        assert!((auc_macro(&scores, &labels).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn auc_rejects_degenerate_classes() {
        // All labels 0: class 0 has no negatives.
        let scores = vec![vec![0.9, 0.1], vec![0.8, 0.2]];
        match auc_macro(&scores, &[0, 0]) {
            Err(Error::UndefinedClass(msg)) => {
                assert!(msg.contains("class 0") && msg.contains("negative"), "message: {msg}")
            }
            other => panic!("expected undefined-class error, got {other:?}"),
        }
        // Three score columns but labels only ever 0 or 1: class 2 has no
        // positives.
        let scores = vec![vec![0.5, 0.3, 0.2], vec![0.2, 0.6, 0.2]];
        match auc_macro(&scores, &[0, 1]) {
            Err(Error::UndefinedClass(msg)) => {
                assert!(msg.contains("class 2") && msg.contains("positive"), "message: {msg}")
            }
            other => panic!("expected undefined-class error, got {other:?}"),
        }
    }

    /// Brute-force pair counting: wins + half-ties over positive×negative.
    fn pair_auc(scores: &[Vec<f64>], labels: &[usize]) -> f64 {
        let classes = scores[0].len();
        let mut total = 0.0;
        for c in 0..classes {
            let pos: Vec<f64> = (0..labels.len()).filter(|&i| labels[i] == c).map(|i| scores[i][c]).collect();
            let neg: Vec<f64> = (0..labels.len()).filter(|&i| labels[i] != c).map(|i| scores[i][c]).collect();
            let mut won = 0.0;
            for &p in &pos {
                for &q in &neg {
                    if p > q {
                        won += 1.0;
                    } else if p == q {
                        won += 0.5;
                    }
                }
            }
            total += won / (pos.len() as f64 * neg.len() as f64);
        }
        total / classes as f64
    }

    #[test]
    fn rank_auc_matches_pair_counting() {
        let mut rng = stream(4, "metrics-auc", 0);
        for case in 0..30 {
            let classes = rng.gen_range(2..5);
            let n = rng.gen_range(classes..50);
            // Guarantee every class appears.
            let mut labels: Vec<usize> = (0..classes).collect();
            for _ in classes..n {
                labels.push(rng.gen_range(0..classes));
            }
            let scores: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    (0..classes)
                        .map(|_| {
                            // Coarse grid to generate plenty of ties.
                            (rng.gen_range(0..8) as f64) / 8.0
                        })
                        .collect()
                })
                .collect();
            let fast = auc_macro(&scores, &labels).unwrap();
            let slow = pair_auc(&scores, &labels);
            assert!((fast - slow).abs() < 1e-12, "case {case}: {fast} vs {slow}");
        }
    }

    #[test]
    fn activation_matrix_counts_topk_assignments() {
        let set = ModalitySet::from_labels(&["a", "b"]).unwrap();
        let ab = set.full_combo();
        let logs = vec![
            TokenRouting { combo: ab, experts: vec![0, 1], top1: 0 },
            TokenRouting { combo: ab, experts: vec![0, 2], top1: 0 },
        ];
        let m = activation_matrix(&set, &logs, 4).unwrap();
        assert_eq!(m.combos.len(), 1);
        assert_eq!(m.entries[0], vec![0.5, 0.25, 0.25, 0.0]);
        let t = top1_matrix(&set, &logs, 4).unwrap();
        assert_eq!(t.entries[0], vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn activation_rows_ordered_by_expert_map_and_sum_to_one() {
        let set = ModalitySet::from_labels(&["a", "b", "c"]).unwrap();
        let map = ExpertIndexMap::new(&set);
        let mut rng = stream(7, "metrics-act", 0);
        let mut logs = Vec::new();
        for _ in 0..200 {
            let mask = rng.gen_range(1u32..8);
            let combo = set.combo_from_mask(mask).unwrap();
            let e1 = rng.gen_range(0..7);
            let e2 = rng.gen_range(0..7);
            logs.push(TokenRouting { combo, experts: vec![e1, e2], top1: e1 });
        }
        let m = activation_matrix(&set, &logs, 7).unwrap();
        for row in &m.entries {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        // Rows appear in expert-map order.
        let order: Vec<usize> = m.combos.iter().map(|c| map.index_of(c)).collect();
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(order, sorted);
        assert!(matches!(activation_matrix(&set, &[], 7), Err(Error::EmptyReport(_))));
    }

    #[test]
    fn cosine_is_scale_invariant_and_flags_zero_norm() {
        let (sim, flag) = cosine(&[1.0, 2.0], &[1.0, 2.0]);
        assert!((sim - 1.0).abs() < 1e-15 && !flag);
        let (sim, flag) = cosine(&[1.0, 0.0], &[0.0, 3.0]);
        assert!(sim == 0.0 && !flag);
        let (sim, flag) = cosine(&[1.0, 2.0], &[2.0, 4.0]);
        assert!((sim - 1.0).abs() < 1e-15 && !flag);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), (0.0, true));
        assert_eq!(cosine(&[], &[]), (0.0, true));
    }

    #[test]
    fn bank_similarity_uses_shared_readable_cells() {
        let set = ModalitySet::from_labels(&["a", "b"]).unwrap();
        let layout = BankLayout { modalities: set.len(), d: 2 };
        // Rows: mask 1 = {a} (readable cell: missing b), mask 2 = {b}
        // (readable cell: missing a), mask 3 = {a,b} (nothing readable).
        let table = Tensor::new(
            vec![3, 2, 2],
            vec![
                9.0, 9.0, /* row a, cell for a: unreadable */
                1.0, 0.0, /* row a, cell for missing b */
                2.0, 0.0, /* row b, cell for missing a */
                9.0, 9.0, /* row b, cell for b: unreadable */
                9.0, 9.0, 9.0, 9.0, /* full row: unreadable */
            ],
        )
        .unwrap();
        let sim = bank_similarity(&set, &layout, &table).unwrap();
        assert_eq!(sim.row_labels, vec!["a", "b", "ab"]);
        // {a} vs {b}: no modality missing in both → flagged.
        assert!(sim.row_flags[0][1] && sim.row_flags[1][0]);
        // Self-similarity of a partial row uses its readable cell: exactly 1.
        assert!((sim.rows[0][0] - 1.0).abs() < 1e-15 && !sim.row_flags[0][0]);
        // The full-combo row has no readable cells at all.
        assert!(sim.row_flags[2].iter().all(|&f| f));
        // Columns: a and b are both missing only in... no row (masks 1 and 2
        // each miss one; the full row misses none) → cross flagged, self
        // defined from the rows that miss that modality.
        assert!(sim.col_flags[0][1]);
        assert!((sim.cols[0][0] - 1.0).abs() < 1e-15 && !sim.col_flags[0][0]);
        assert_eq!(sim.col_labels, vec!["a", "b"]);
    }

    #[test]
    fn bank_similarity_cols_share_rows_when_both_missing() {
        // Three modalities: rows with single observed modality miss the
        // other two, giving columns genuine shared support.
        let set = ModalitySet::from_labels(&["a", "b", "c"]).unwrap();
        let layout = BankLayout { modalities: set.len(), d: 3 };
        let mut data = vec![0.0; 7 * 3 * 3];
        // Row for combo {a} (mask 1, row 0): cells for missing b and c.
        // Make cell(b) = e0, cell(c) = 2·e0 → cosine(b, c) over this row = 1.
        data[(0 * 3 + 1) * 3] = 1.0;
        data[(0 * 3 + 2) * 3] = 2.0;
        let table = Tensor::new(vec![7, 3, 3], data).unwrap();
        let sim = bank_similarity(&set, &layout, &table).unwrap();
        // b and c are both missing in rows {a} only (others have zero cells
        // → contribute zeros to the flattening, still fine).
        assert!(!sim.col_flags[1][2]);
        assert!((sim.cols[1][2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn report_csvs_round_trip() {
        let dir = std::env::temp_dir().join(format!("flexmoe-metrics-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();

        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.7, 0.3], vec![0.4, 0.6]];
        let labels = [0, 1, 0, 0];
        let report = EvalReport::from_scores(&scores, &labels).unwrap();
        let path = dir.join("eval_report.csv");
        write_eval_report(&path, &report).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("metric,value\n"));
        for key in ["accuracy,", "macro_f1,", "auc_macro,", "n,4", "confusion_0_0,2"] {
            assert!(text.contains(key), "missing {key} in:\n{text}");
        }

        let set = ModalitySet::from_labels(&["a", "b"]).unwrap();
        let logs = vec![TokenRouting { combo: set.full_combo(), experts: vec![1, 0], top1: 1 }];
        let m = activation_matrix(&set, &logs, 3).unwrap();
        let path = dir.join("activation_matrix.csv");
        write_activation_matrix(&path, &set, &m).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("combo,expert_0,expert_1,expert_2\n"));
        assert!(text.contains("ab,"));

        let layout = BankLayout { modalities: set.len(), d: 2 };
        let table = Tensor::new(vec![3, 2, 2], vec![0.0; 12]).unwrap();
        let sim = bank_similarity(&set, &layout, &table).unwrap();
        let rp = dir.join("bank_similarity_rows.csv");
        let cp = dir.join("bank_similarity_cols.csv");
        write_bank_similarity_rows(&rp, &sim).unwrap();
        write_bank_similarity_cols(&cp, &sim).unwrap();
        let rows_text = std::fs::read_to_string(&rp).unwrap();
        assert!(rows_text.contains("undefined"));
        assert!(rows_text.lines().next().unwrap().starts_with("# cosine"));
        assert!(std::fs::read_to_string(&cp).unwrap().contains("modality,a,b"));

        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn empty_scores_are_an_empty_report() {
        assert!(matches!(EvalReport::from_scores(&[], &[]), Err(Error::EmptyReport(_))));
    }
}
