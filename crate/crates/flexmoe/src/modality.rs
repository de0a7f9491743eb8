//! Modality-set algebra.
//!
//! A [`ModalitySet`] fixes an ordered list of modality labels; its order
//! defines bit positions in observation masks, slot order in token
//! sequences, and every tie-break in the crate. A [`ModalityCombo`] is the
//! non-empty subset of modalities one sample actually observes.
//!
//! Two derived structures feed the routing layer:
//!
//! * [`ExpertIndexMap`] — the canonical bijection from non-empty combos to
//!   expert indices 0..2^|M|−2: full set first, then descending cardinality,
//!   ties in position-lexicographic order. For the set (I,G,C,B) this yields
//!   IGCB→0, IGC→1, IGB→2, ICB→3, GCB→4, IG→5, …, B→14.
//! * [`MissingModalityBank`] — a learnable [2^|M|−1, |M|, d] table holding
//!   one d-vector per (observed-combo, missing-modality) pair. Row r serves
//!   the combo with bitmask r+1; cell (combo, m) is meaningful only when m
//!   is NOT observed in the combo, and the full-modality row is never read.
//!   The table deliberately over-allocates those unreachable cells so that
//!   indexing is a pure bitmask operation; unread cells provably stay at
//!   their initialization.

use crate::rng::stream;
use crate::tensor::{ParamId, Tensor};
use crate::{Error, Result};

/// Ordered, immutable set of modality labels (2 to 8 of them).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalitySet {
    names: Vec<String>,
}

impl ModalitySet {
    pub fn new(names: Vec<String>) -> Result<ModalitySet> {
        if names.len() < 2 || names.len() > 8 {
            return Err(Error::Argument(format!(
                "modality count {} outside supported range 2..=8",
                names.len()
            )));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::Argument(format!("modality {i} has an empty label")));
            }
            if names[..i].contains(n) {
                return Err(Error::Argument(format!("duplicate modality label {n:?}")));
            }
        }
        let set = ModalitySet { names };
        // Combo labels are concatenations; with multi-character labels two
        // different combos could collide ("AB" vs "A"+"B"). Reject such sets
        // up front so serialized combos always parse back unambiguously.
        let mut labels: Vec<String> = set.all_combos().iter().map(|c| set.label(c)).collect();
        labels.sort();
        for w in labels.windows(2) {
            if w[0] == w[1] {
                return Err(Error::Argument(format!(
                    "modality labels make combo string {:?} ambiguous",
                    w[0]
                )));
            }
        }
        Ok(set)
    }

    /// Convenience constructor from string slices.
    pub fn from_labels(labels: &[&str]) -> Result<ModalitySet> {
        ModalitySet::new(labels.iter().map(|s| s.to_string()).collect())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires ≥ 2 modalities
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn full_mask(&self) -> u32 {
        (1u32 << self.names.len()) - 1
    }

    /// Bit j set iff flags[j]; rejects the all-false pattern.
    pub fn combo_from_flags(&self, flags: &[bool]) -> Result<ModalityCombo> {
        if flags.len() != self.names.len() {
            return Err(Error::Argument(format!(
                "{} flags for {} modalities",
                flags.len(),
                self.names.len()
            )));
        }
        let mut mask = 0u32;
        for (j, &f) in flags.iter().enumerate() {
            if f {
                mask |= 1 << j;
            }
        }
        self.combo_from_mask(mask)
    }

    pub fn combo_from_mask(&self, mask: u32) -> Result<ModalityCombo> {
        if mask == 0 {
            return Err(Error::EmptyCombo("a sample must observe at least one modality".into()));
        }
        if mask > self.full_mask() {
            return Err(Error::Argument(format!(
                "mask {mask:#b} has bits beyond {} modalities",
                self.names.len()
            )));
        }
        Ok(ModalityCombo { mask, modalities: self.names.len() as u8 })
    }

    pub fn full_combo(&self) -> ModalityCombo {
        ModalityCombo { mask: self.full_mask(), modalities: self.names.len() as u8 }
    }

    /// Serialized form: observed labels concatenated in set order ("IGB").
    pub fn label(&self, combo: &ModalityCombo) -> String {
        let mut s = String::new();
        for j in 0..self.names.len() {
            if combo.contains(j) {
                s.push_str(&self.names[j]);
            }
        }
        s
    }

    /// Inverse of [`ModalitySet::label`]; exact match against the (validated
    /// unambiguous) enumeration of all non-empty combos.
    pub fn parse_combo(&self, s: &str) -> Result<ModalityCombo> {
        for combo in self.all_combos() {
            if self.label(&combo) == s {
                return Ok(combo);
            }
        }
        Err(Error::Parse(format!("{s:?} is not a combo of modalities {:?}", self.names)))
    }

    /// All non-empty combos in ascending mask order.
    pub fn all_combos(&self) -> Vec<ModalityCombo> {
        (1..=self.full_mask())
            .map(|mask| ModalityCombo { mask, modalities: self.names.len() as u8 })
            .collect()
    }
}

/// Non-empty subset of observed modalities, as a bitmask under a fixed
/// [`ModalitySet`] order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModalityCombo {
    mask: u32,
    modalities: u8,
}

impl ModalityCombo {
    pub fn mask(&self) -> u32 {
        self.mask
    }

    pub fn cardinality(&self) -> usize {
        self.mask.count_ones() as usize
    }

    pub fn contains(&self, modality: usize) -> bool {
        self.mask & (1 << modality) != 0
    }

    pub fn is_full(&self) -> bool {
        self.mask == (1u32 << self.modalities) - 1
    }

    /// Observed modality indices, ascending.
    pub fn observed(&self) -> Vec<usize> {
        (0..self.modalities as usize).filter(|&j| self.contains(j)).collect()
    }

    /// Missing modality indices, ascending.
    pub fn missing(&self) -> Vec<usize> {
        (0..self.modalities as usize).filter(|&j| !self.contains(j)).collect()
    }
}

/// Canonical combo→expert-index bijection: descending cardinality, ties in
/// position-lexicographic order under the set order.
#[derive(Debug, Clone)]
pub struct ExpertIndexMap {
    /// Combo mask at each expert index.
    order: Vec<u32>,
    /// Expert index at each mask−1.
    index_of_mask: Vec<usize>,
    modalities: u8,
}

impl ExpertIndexMap {
    pub fn new(set: &ModalitySet) -> ExpertIndexMap {
        let mut masks: Vec<u32> = (1..=set.full_mask()).collect();
        masks.sort_by(|&a, &b| {
            b.count_ones()
                .cmp(&a.count_ones())
                .then_with(|| bit_positions(a).cmp(&bit_positions(b)))
        });
        let mut index_of_mask = vec![0; masks.len()];
        for (idx, &mask) in masks.iter().enumerate() {
            index_of_mask[(mask - 1) as usize] = idx;
        }
        ExpertIndexMap { order: masks, index_of_mask, modalities: set.len() as u8 }
    }

    /// Number of combo-designated experts (= 2^|M| − 1).
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        false // a valid set has ≥ 3 combos
    }

    pub fn index_of(&self, combo: &ModalityCombo) -> usize {
        self.index_of_mask[(combo.mask - 1) as usize]
    }

    pub fn combo_at(&self, index: usize) -> ModalityCombo {
        ModalityCombo { mask: self.order[index], modalities: self.modalities }
    }
}

fn bit_positions(mask: u32) -> Vec<u32> {
    (0..32).filter(|j| mask & (1 << j) != 0).collect()
}

/// Learnable table of embeddings for (observed-combo, missing-modality)
/// pairs, stored as one [rows, |M|, d] tensor with rows = 2^|M| − 1.
#[derive(Debug, Clone)]
pub struct MissingModalityBank {
    pub table: Tensor,
    pub layout: BankLayout,
}

/// Index arithmetic for the bank table, independent of where the tensor
/// itself lives (tests hold it directly; the model moves it into its
/// parameter store and keeps the layout plus a [`ParamId`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BankLayout {
    pub modalities: usize,
    pub d: usize,
}

impl BankLayout {
    pub fn rows(&self) -> usize {
        (1usize << self.modalities) - 1
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.rows(), self.modalities, self.d]
    }

    /// Row index of a combo: bitmask − 1.
    pub fn row_of(&self, observed: &ModalityCombo) -> usize {
        (observed.mask() - 1) as usize
    }

    /// Flat row index of cell (observed, missing) when the table is viewed
    /// as [rows·|M|, d]; validates the readability contract.
    pub fn flat_cell(&self, observed: &ModalityCombo, missing: usize) -> Result<usize> {
        if missing >= self.modalities {
            return Err(Error::Argument(format!(
                "modality {missing} out of range {}",
                self.modalities
            )));
        }
        if observed.contains(missing) {
            return Err(Error::InvalidLookup(format!(
                "modality {missing} is observed in the combo; its bank cell is undefined"
            )));
        }
        if observed.is_full() {
            return Err(Error::InvalidLookup(
                "the full-modality combo has no missing modalities to look up".into(),
            ));
        }
        Ok(self.row_of(observed) * self.modalities + missing)
    }

    /// True when cell (combo at `row`, modality `m`) can ever be read.
    pub fn cell_readable(&self, row: usize, m: usize) -> bool {
        let mask = (row + 1) as u32;
        mask & (1 << m) == 0
    }
}

impl MissingModalityBank {
    /// Fresh bank with i.i.d. normal(0, 0.02²) entries, deterministic per
    /// seed.
    pub fn init(set: &ModalitySet, d: usize, seed: u64) -> Result<MissingModalityBank> {
        if d == 0 {
            return Err(Error::Argument("bank dimension d must be ≥ 1".into()));
        }
        let layout = BankLayout { modalities: set.len(), d };
        let table = Tensor::randn(layout.shape(), 0.02, &mut stream(seed, "bank-init", 0));
        Ok(MissingModalityBank { table, layout })
    }

    /// Reads the embedding for (observed, missing); the differentiable path
    /// goes through the tape instead (the model assembles token rows
    /// straight out of the stored table), but shares this index arithmetic.
    pub fn lookup(&self, observed: &ModalityCombo, missing: usize) -> Result<&[f64]> {
        let row = self.layout.flat_cell(observed, missing)?;
        let d = self.layout.d;
        Ok(&self.table.data()[row * d..(row + 1) * d])
    }
}

/// The bank as the model stores it: table in the parameter store, layout
/// here.
#[derive(Debug, Clone, Copy)]
pub struct BankHandle {
    pub param: ParamId,
    pub layout: BankLayout,
}
