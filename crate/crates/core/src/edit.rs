//! Constrained counterfactual peptide edit sets.
//!
//! Two edit kinds over a source peptide, both length-preserving
//! (substitutions only) and both leaving position 1 untouched:
//!
//! - **Non-anchor** edits change only non-anchor positions, each change a
//!   conservative substitution (BLOSUM score >= `blosum_min`). These perturb
//!   peptide style while keeping the MHC anchor residues intact.
//! - **Anchor** edits change at least one anchor position, each changed
//!   anchor taking a disruptive substitution (BLOSUM score < `disruptive_max`,
//!   default 0); any additional changed non-anchor positions stay
//!   conservative so the causal signal is isolated at the anchors.
//!
//! With the default constraints the two kinds partition the within-budget
//! neighborhood: no candidate validates as both.

use std::collections::BTreeSet;

use itertools::Itertools;
use rand::Rng as _;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seq::{hamming, AminoAcid, Peptide, SubstitutionMatrix, ALPHABET};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EditError {
    #[error("anchor scheme is for length {scheme_len}, peptide has length {peptide_len}")]
    SchemeMismatch { scheme_len: usize, peptide_len: usize },
    #[error("candidate length {1} differs from source length {0}")]
    LengthMismatch(usize, usize),
    #[error("anchor scheme leaves no editable non-anchor position")]
    NoEditablePositions,
    #[error("substitution matrix admits no disruptive substitution at any anchor position")]
    NoDisruptiveSubstitution,
    #[error("invalid anchor position {0} for peptide length {1}")]
    InvalidAnchorPosition(usize, usize),
    #[error("edit budget k={0} outside supported range 1..=3")]
    InvalidBudget(usize),
}

/// Which anchor positions are protected (non-anchor kind) or targeted
/// (anchor kind) for peptides of one fixed length.
///
/// Positions are 1-based. Position 1 is never editable in either kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorScheme {
    len: usize,
    anchor_positions: BTreeSet<usize>,
    non_anchor_positions: BTreeSet<usize>,
}

impl AnchorScheme {
    /// The HLA-A*02:01 convention: anchors at P2 and the C-terminal position.
    pub fn hla_a0201(len: usize) -> Self {
        Self::custom([2, len], len).expect("default anchors are valid for any peptide length")
    }

    /// Anchor masking disabled: no protected positions, every position from
    /// 2 through the C terminus editable by both kinds.
    pub fn unmasked(len: usize) -> Self {
        Self {
            len,
            anchor_positions: BTreeSet::new(),
            non_anchor_positions: (2..=len).collect(),
        }
    }

    /// Arbitrary anchor set; non-anchor positions default to
    /// `{2..=len-1}` minus the anchors.
    pub fn custom(
        anchors: impl IntoIterator<Item = usize>,
        len: usize,
    ) -> Result<Self, EditError> {
        let anchor_positions: BTreeSet<usize> = anchors.into_iter().collect();
        for &p in &anchor_positions {
            if p < 2 || p > len {
                return Err(EditError::InvalidAnchorPosition(p, len));
            }
        }
        let non_anchor_positions = (2..len).filter(|p| !anchor_positions.contains(p)).collect();
        Ok(Self {
            len,
            anchor_positions,
            non_anchor_positions,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn anchor_positions(&self) -> &BTreeSet<usize> {
        &self.anchor_positions
    }

    pub fn non_anchor_positions(&self) -> &BTreeSet<usize> {
        &self.non_anchor_positions
    }

    /// Union of anchor and non-anchor positions: everything either kind may touch.
    pub fn editable_positions(&self) -> BTreeSet<usize> {
        self.anchor_positions
            .union(&self.non_anchor_positions)
            .copied()
            .collect()
    }

    fn check_peptide(&self, pi: &Peptide) -> Result<(), EditError> {
        if pi.len() != self.len {
            return Err(EditError::SchemeMismatch {
                scheme_len: self.len,
                peptide_len: pi.len(),
            });
        }
        Ok(())
    }
}

/// How anchors are chosen per peptide length; carried by training and
/// evaluation configs so the ablation can switch masking off globally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPolicy {
    /// P2 plus C-terminal anchors (HLA-A*02:01).
    #[default]
    PTwoOmega,
    /// No anchor masking (ablation).
    Unmasked,
}

impl AnchorPolicy {
    pub fn scheme_for_len(self, len: usize) -> AnchorScheme {
        match self {
            AnchorPolicy::PTwoOmega => AnchorScheme::hla_a0201(len),
            AnchorPolicy::Unmasked => AnchorScheme::unmasked(len),
        }
    }
}

/// Budget and score thresholds shared by both edit kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditConstraints {
    /// Maximum Hamming distance from the source (k).
    pub max_hamming: usize,
    /// Minimum BLOSUM score for a conservative substitution; `None` disables
    /// the constraint (the "w/o BLOSUM constraint" ablation).
    pub blosum_min: Option<i32>,
    /// Exclusive upper bound for a disruptive anchor substitution.
    pub disruptive_max: i32,
}

impl Default for EditConstraints {
    fn default() -> Self {
        Self {
            max_hamming: 2,
            blosum_min: Some(0),
            disruptive_max: 0,
        }
    }
}

impl EditConstraints {
    pub fn new(max_hamming: usize, blosum_min: Option<i32>) -> Result<Self, EditError> {
        if !(1..=3).contains(&max_hamming) {
            return Err(EditError::InvalidBudget(max_hamming));
        }
        Ok(Self {
            max_hamming,
            blosum_min,
            disruptive_max: 0,
        })
    }

    fn conservative(&self, matrix: &SubstitutionMatrix, from: AminoAcid, to: AminoAcid) -> bool {
        match self.blosum_min {
            Some(b_min) => matrix.score(from, to) >= b_min,
            None => true,
        }
    }

    fn disruptive(&self, matrix: &SubstitutionMatrix, from: AminoAcid, to: AminoAcid) -> bool {
        matrix.score(from, to) < self.disruptive_max
    }
}

/// The two counterfactual kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EditKind {
    NonAnchor,
    Anchor,
}

impl std::fmt::Display for EditKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EditKind::NonAnchor => f.write_str("non-anchor"),
            EditKind::Anchor => f.write_str("anchor"),
        }
    }
}

/// The full enumeration of one kind for one source peptide.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditSet {
    pub source: Peptide,
    pub kind: EditKind,
    pub members: Vec<Peptide>,
}

impl EditSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

fn conservative_choices(
    pi: &Peptide,
    pos: usize,
    c: &EditConstraints,
    matrix: &SubstitutionMatrix,
) -> Vec<AminoAcid> {
    let from = pi.at(pos);
    ALPHABET
        .iter()
        .copied()
        .filter(|&a| a != from && c.conservative(matrix, from, a))
        .collect()
}

fn disruptive_choices(
    pi: &Peptide,
    pos: usize,
    c: &EditConstraints,
    matrix: &SubstitutionMatrix,
) -> Vec<AminoAcid> {
    let from = pi.at(pos);
    ALPHABET
        .iter()
        .copied()
        .filter(|&a| a != from && c.disruptive(matrix, from, a))
        .collect()
}

fn apply_changes(pi: &Peptide, changes: &[(usize, AminoAcid)]) -> Peptide {
    let mut out = pi.clone();
    for &(pos, residue) in changes {
        out = out.with_residue(pos, residue);
    }
    out
}

/// Enumerate the style-preserving edit set: every peptide within Hamming
/// `k` of the source that changes only non-anchor positions, each change
/// conservative under the matrix.
pub fn enumerate_non_anchor(
    pi: &Peptide,
    scheme: &AnchorScheme,
    c: &EditConstraints,
    matrix: &SubstitutionMatrix,
) -> Result<EditSet, EditError> {
    scheme.check_peptide(pi)?;
    let positions: Vec<usize> = scheme.non_anchor_positions.iter().copied().collect();
    if positions.is_empty() {
        return Err(EditError::NoEditablePositions);
    }
    let mut members = Vec::new();
    for h in 1..=c.max_hamming.min(positions.len()) {
        for combo in positions.iter().copied().combinations(h) {
            let choice_lists: Vec<Vec<(usize, AminoAcid)>> = combo
                .iter()
                .map(|&pos| {
                    conservative_choices(pi, pos, c, matrix)
                        .into_iter()
                        .map(|a| (pos, a))
                        .collect()
                })
                .collect();
            if choice_lists.iter().any(Vec::is_empty) {
                continue;
            }
            for changes in choice_lists.into_iter().multi_cartesian_product() {
                members.push(apply_changes(pi, &changes));
            }
        }
    }
    Ok(EditSet {
        source: pi.clone(),
        kind: EditKind::NonAnchor,
        members,
    })
}

/// Enumerate the anchor-disrupting edit set: every peptide within Hamming
/// `k` that changes at least one anchor position disruptively; any further
/// changed non-anchor positions must be conservative.
///
/// With an empty anchor set (masking ablation) the requirement becomes "at
/// least one disruptive change anywhere editable".
pub fn enumerate_anchor(
    pi: &Peptide,
    scheme: &AnchorScheme,
    c: &EditConstraints,
    matrix: &SubstitutionMatrix,
) -> Result<EditSet, EditError> {
    scheme.check_peptide(pi)?;
    let members = if scheme.anchor_positions.is_empty() {
        enumerate_anchor_unmasked(pi, scheme, c, matrix)?
    } else {
        enumerate_anchor_masked(pi, scheme, c, matrix)?
    };
    Ok(EditSet {
        source: pi.clone(),
        kind: EditKind::Anchor,
        members,
    })
}

fn enumerate_anchor_masked(
    pi: &Peptide,
    scheme: &AnchorScheme,
    c: &EditConstraints,
    matrix: &SubstitutionMatrix,
) -> Result<Vec<Peptide>, EditError> {
    let anchors: Vec<usize> = scheme.anchor_positions.iter().copied().collect();
    if anchors
        .iter()
        .all(|&pos| disruptive_choices(pi, pos, c, matrix).is_empty())
    {
        return Err(EditError::NoDisruptiveSubstitution);
    }
    let editable: Vec<usize> = scheme.editable_positions().into_iter().collect();
    let mut members = Vec::new();
    for h in 1..=c.max_hamming.min(editable.len()) {
        for combo in editable.iter().copied().combinations(h) {
            if !combo.iter().any(|p| scheme.anchor_positions.contains(p)) {
                continue;
            }
            let choice_lists: Vec<Vec<(usize, AminoAcid)>> = combo
                .iter()
                .map(|&pos| {
                    let choices = if scheme.anchor_positions.contains(&pos) {
                        disruptive_choices(pi, pos, c, matrix)
                    } else {
                        conservative_choices(pi, pos, c, matrix)
                    };
                    choices.into_iter().map(|a| (pos, a)).collect()
                })
                .collect();
            if choice_lists.iter().any(Vec::is_empty) {
                continue;
            }
            for changes in choice_lists.into_iter().multi_cartesian_product() {
                members.push(apply_changes(pi, &changes));
            }
        }
    }
    Ok(members)
}

fn enumerate_anchor_unmasked(
    pi: &Peptide,
    scheme: &AnchorScheme,
    c: &EditConstraints,
    matrix: &SubstitutionMatrix,
) -> Result<Vec<Peptide>, EditError> {
    let editable: Vec<usize> = scheme.editable_positions().into_iter().collect();
    if editable
        .iter()
        .all(|&pos| disruptive_choices(pi, pos, c, matrix).is_empty())
    {
        return Err(EditError::NoDisruptiveSubstitution);
    }
    let mut members = Vec::new();
    for h in 1..=c.max_hamming.min(editable.len()) {
        for combo in editable.iter().copied().combinations(h) {
            let choice_lists: Vec<Vec<(usize, AminoAcid)>> = combo
                .iter()
                .map(|&pos| {
                    let from = pi.at(pos);
                    ALPHABET
                        .iter()
                        .copied()
                        .filter(|&a| {
                            a != from
                                && (c.disruptive(matrix, from, a)
                                    || c.conservative(matrix, from, a))
                        })
                        .map(|a| (pos, a))
                        .collect::<Vec<_>>()
                })
                .collect();
            if choice_lists.iter().any(Vec::is_empty) {
                continue;
            }
            for changes in choice_lists.into_iter().multi_cartesian_product() {
                let disruptive_somewhere = changes
                    .iter()
                    .any(|&(pos, a)| c.disruptive(matrix, pi.at(pos), a));
                if disruptive_somewhere {
                    members.push(apply_changes(pi, &changes));
                }
            }
        }
    }
    Ok(members)
}

/// Independent clause-by-clause check of the non-anchor constraints.
/// This is the oracle the enumerators are property-tested against; it must
/// stay a direct transcription of the constraint definition.
pub fn validate_non_anchor(
    pi: &Peptide,
    candidate: &Peptide,
    scheme: &AnchorScheme,
    c: &EditConstraints,
    matrix: &SubstitutionMatrix,
) -> Result<bool, EditError> {
    scheme.check_peptide(pi)?;
    if candidate.len() != pi.len() {
        return Err(EditError::LengthMismatch(pi.len(), candidate.len()));
    }
    let d = hamming(pi, candidate).expect("lengths checked");
    if d == 0 || d > c.max_hamming {
        return Ok(false);
    }
    for pos in 1..=pi.len() {
        let (from, to) = (pi.at(pos), candidate.at(pos));
        if from == to {
            continue;
        }
        if !scheme.non_anchor_positions.contains(&pos) {
            return Ok(false);
        }
        if !c.conservative(matrix, from, to) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Independent clause-by-clause check of the anchor-disruption constraints.
pub fn validate_anchor(
    pi: &Peptide,
    candidate: &Peptide,
    scheme: &AnchorScheme,
    c: &EditConstraints,
    matrix: &SubstitutionMatrix,
) -> Result<bool, EditError> {
    scheme.check_peptide(pi)?;
    if candidate.len() != pi.len() {
        return Err(EditError::LengthMismatch(pi.len(), candidate.len()));
    }
    let d = hamming(pi, candidate).expect("lengths checked");
    if d == 0 || d > c.max_hamming {
        return Ok(false);
    }
    let editable = scheme.editable_positions();
    let masked = !scheme.anchor_positions.is_empty();
    let mut any_disruptive_anchor = false;
    for pos in 1..=pi.len() {
        let (from, to) = (pi.at(pos), candidate.at(pos));
        if from == to {
            continue;
        }
        if !editable.contains(&pos) {
            return Ok(false);
        }
        if masked {
            if scheme.anchor_positions.contains(&pos) {
                if !c.disruptive(matrix, from, to) {
                    return Ok(false);
                }
                any_disruptive_anchor = true;
            } else if !c.conservative(matrix, from, to) {
                return Ok(false);
            }
        } else {
            let disruptive = c.disruptive(matrix, from, to);
            if !disruptive && !c.conservative(matrix, from, to) {
                return Ok(false);
            }
            any_disruptive_anchor |= disruptive;
        }
    }
    Ok(any_disruptive_anchor)
}

/// Draw `n` members uniformly with replacement from the full enumeration.
///
/// Deterministic for a fixed seed. An empty (or unenumerable) edit set is
/// signaled by an empty return, never an error, so training can skip the
/// pair and keep going.
pub fn sample_edits(
    pi: &Peptide,
    kind: EditKind,
    scheme: &AnchorScheme,
    c: &EditConstraints,
    matrix: &SubstitutionMatrix,
    n: usize,
    rng_seed: u64,
) -> Vec<Peptide> {
    let enumerated = match kind {
        EditKind::NonAnchor => enumerate_non_anchor(pi, scheme, c, matrix),
        EditKind::Anchor => enumerate_anchor(pi, scheme, c, matrix),
    };
    let members = match enumerated {
        Ok(set) if !set.is_empty() => set.members,
        _ => return Vec::new(),
    };
    sample_from_members(&members, n, rng_seed)
}

/// Sampling half of `sample_edits`, exposed so callers that cache
/// enumerations can redraw cheaply.
pub fn sample_from_members(members: &[Peptide], n: usize, rng_seed: u64) -> Vec<Peptide> {
    if members.is_empty() {
        return Vec::new();
    }
    let mut rng = crate::seed::Rng::seed_from_u64(rng_seed);
    (0..n)
        .map(|_| members[rng.gen_range(0..members.len())].clone())
        .collect()
}
