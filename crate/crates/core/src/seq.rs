//! Amino-acid alphabet, BLOSUM62 substitution scoring, and sequence distances.
//!
//! Only the 20 canonical residues are accepted; ambiguity codes (B, J, O, U,
//! X, Z) are rejected at parse time because substitution constraints are
//! undefined for them. Callers ingesting real data are expected to skip such
//! rows and count them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Float;

/// Residue order used throughout: the row/column order of the published
/// BLOSUM62 table.
pub const ALPHABET: [AminoAcid; 20] = [
    AminoAcid::Ala,
    AminoAcid::Arg,
    AminoAcid::Asn,
    AminoAcid::Asp,
    AminoAcid::Cys,
    AminoAcid::Gln,
    AminoAcid::Glu,
    AminoAcid::Gly,
    AminoAcid::His,
    AminoAcid::Ile,
    AminoAcid::Leu,
    AminoAcid::Lys,
    AminoAcid::Met,
    AminoAcid::Phe,
    AminoAcid::Pro,
    AminoAcid::Ser,
    AminoAcid::Thr,
    AminoAcid::Trp,
    AminoAcid::Tyr,
    AminoAcid::Val,
];

/// One of the 20 canonical amino acids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum AminoAcid {
    Ala = 0,
    Arg = 1,
    Asn = 2,
    Asp = 3,
    Cys = 4,
    Gln = 5,
    Glu = 6,
    Gly = 7,
    His = 8,
    Ile = 9,
    Leu = 10,
    Lys = 11,
    Met = 12,
    Phe = 13,
    Pro = 14,
    Ser = 15,
    Thr = 16,
    Trp = 17,
    Tyr = 18,
    Val = 19,
}

impl AminoAcid {
    /// Index into the BLOSUM table (0..20).
    pub fn index(self) -> usize {
        self as usize
    }

    /// Single-letter residue symbol.
    pub fn to_char(self) -> char {
        const SYMBOLS: [char; 20] = [
            'A', 'R', 'N', 'D', 'C', 'Q', 'E', 'G', 'H', 'I', 'L', 'K', 'M', 'F', 'P', 'S', 'T',
            'W', 'Y', 'V',
        ];
        SYMBOLS[self.index()]
    }

    /// Parse a single-letter symbol; rejects anything outside the canonical 20.
    pub fn from_char(c: char) -> Option<Self> {
        ALPHABET.iter().copied().find(|a| a.to_char() == c)
    }
}

impl fmt::Display for AminoAcid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_char())
    }
}

/// Errors from sequence parsing and distance operations.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SeqError {
    /// A character outside the canonical alphabet, with its 0-based position.
    #[error("invalid residue {1:?} at position {0}")]
    InvalidResidue(usize, char),
    /// Peptide length outside the supported 8..=11 window.
    #[error("invalid peptide length {0} (must be 8..=11)")]
    InvalidLength(usize),
    /// CDR3 empty or longer than the sanity bound.
    #[error("invalid CDR3 length {0} (must be 1..=40)")]
    InvalidCdr3Length(usize),
    /// Hamming distance requires equal lengths.
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    /// Normalized distance is undefined when both sequences are empty.
    #[error("both sequences are empty")]
    BothEmpty,
    /// A substitution table failed validation.
    #[error("invalid substitution matrix: {0}")]
    InvalidMatrix(String),
}

fn parse_residues(text: &str) -> Result<Vec<AminoAcid>, SeqError> {
    text.chars()
        .enumerate()
        .map(|(i, c)| AminoAcid::from_char(c).ok_or(SeqError::InvalidResidue(i, c)))
        .collect()
}

fn render(residues: &[AminoAcid]) -> String {
    residues.iter().map(|a| a.to_char()).collect()
}

/// A pMHC peptide: 8 to 11 canonical residues.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Peptide {
    residues: Vec<AminoAcid>,
}

/// Shortest and longest supported peptide lengths.
pub const PEPTIDE_LEN_RANGE: std::ops::RangeInclusive<usize> = 8..=11;

impl Peptide {
    pub fn new(residues: Vec<AminoAcid>) -> Result<Self, SeqError> {
        if !PEPTIDE_LEN_RANGE.contains(&residues.len()) {
            return Err(SeqError::InvalidLength(residues.len()));
        }
        Ok(Self { residues })
    }

    pub fn parse(text: &str) -> Result<Self, SeqError> {
        Self::new(parse_residues(text)?)
    }

    pub fn residues(&self) -> &[AminoAcid] {
        &self.residues
    }

    pub fn len(&self) -> usize {
        self.residues.len()
    }

    pub fn is_empty(&self) -> bool {
        false // length is always >= 8
    }

    /// Residue at 1-based position `pos`.
    pub fn at(&self, pos: usize) -> AminoAcid {
        self.residues[pos - 1]
    }

    /// Copy with the residue at 1-based position `pos` replaced.
    pub fn with_residue(&self, pos: usize, residue: AminoAcid) -> Self {
        let mut residues = self.residues.clone();
        residues[pos - 1] = residue;
        Self { residues }
    }
}

impl fmt::Display for Peptide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render(&self.residues))
    }
}

/// A TCR CDR3 loop sequence: non-empty, at most 40 residues.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cdr3 {
    residues: Vec<AminoAcid>,
}

impl Cdr3 {
    pub fn new(residues: Vec<AminoAcid>) -> Result<Self, SeqError> {
        if residues.is_empty() || residues.len() > 40 {
            return Err(SeqError::InvalidCdr3Length(residues.len()));
        }
        Ok(Self { residues })
    }

    pub fn parse(text: &str) -> Result<Self, SeqError> {
        Self::new(parse_residues(text)?)
    }

    pub fn residues(&self) -> &[AminoAcid] {
        &self.residues
    }

    pub fn len(&self) -> usize {
        self.residues.len()
    }

    pub fn is_empty(&self) -> bool {
        false // length is always >= 1
    }
}

impl fmt::Display for Cdr3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render(&self.residues))
    }
}

impl FromStr for Peptide {
    type Err = SeqError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl FromStr for Cdr3 {
    type Err = SeqError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

/// Parse a peptide string; alias kept for call-site readability.
pub fn parse_peptide(text: &str) -> Result<Peptide, SeqError> {
    Peptide::parse(text)
}

// Published BLOSUM62 scores in ALPHABET order (A R N D C Q E G H I L K M F P
// S T W Y V), half-bit units, ambiguity columns dropped. Guarded by a
// checksum test against transcription slips.
const BLOSUM62_SCORES: [[i32; 20]; 20] = [
    [4, -1, -2, -2, 0, -1, -1, 0, -2, -1, -1, -1, -1, -2, -1, 1, 0, -3, -2, 0],
    [-1, 5, 0, -2, -3, 1, 0, -2, 0, -3, -2, 2, -1, -3, -2, -1, -1, -3, -2, -3],
    [-2, 0, 6, 1, -3, 0, 0, 0, 1, -3, -3, 0, -2, -3, -2, 1, 0, -4, -2, -3],
    [-2, -2, 1, 6, -3, 0, 2, -1, -1, -3, -4, -1, -3, -3, -1, 0, -1, -4, -3, -3],
    [0, -3, -3, -3, 9, -3, -4, -3, -3, -1, -1, -3, -1, -2, -3, -1, -1, -2, -2, -1],
    [-1, 1, 0, 0, -3, 5, 2, -2, 0, -3, -2, 1, 0, -3, -1, 0, -1, -2, -1, -2],
    [-1, 0, 0, 2, -4, 2, 5, -2, 0, -3, -3, 1, -2, -3, -1, 0, -1, -3, -2, -2],
    [0, -2, 0, -1, -3, -2, -2, 6, -2, -4, -4, -2, -3, -3, -2, 0, -2, -2, -3, -3],
    [-2, 0, 1, -1, -3, 0, 0, -2, 8, -3, -3, -1, -2, -1, -2, -1, -2, -2, 2, -3],
    [-1, -3, -3, -3, -1, -3, -3, -4, -3, 4, 2, -3, 1, 0, -3, -2, -1, -3, -1, 3],
    [-1, -2, -3, -4, -1, -2, -3, -4, -3, 2, 4, -2, 2, 0, -3, -2, -1, -2, -1, 1],
    [-1, 2, 0, -1, -3, 1, 1, -2, -1, -3, -2, 5, -1, -3, -1, 0, -1, -3, -2, -2],
    [-1, -1, -2, -3, -1, 0, -2, -3, -2, 1, 2, -1, 5, 0, -2, -1, -1, -1, -1, 1],
    [-2, -3, -3, -3, -2, -3, -3, -3, -1, 0, 0, -3, 0, 6, -4, -2, -2, 1, 3, -1],
    [-1, -2, -2, -1, -3, -1, -1, -2, -2, -3, -3, -1, -2, -4, 7, -1, -1, -4, -3, -2],
    [1, -1, 1, 0, -1, 0, 0, 0, -1, -2, -2, 0, -1, -2, -1, 4, 1, -3, -2, -2],
    [0, -1, 0, -1, -1, -1, -1, -2, -2, -1, -1, -1, -1, -2, -1, 1, 5, -2, -2, 0],
    [-3, -3, -4, -4, -2, -2, -3, -2, -2, -3, -2, -3, -1, 1, -4, -3, -2, 11, 2, -3],
    [-2, -2, -2, -3, -2, -1, -2, -3, 2, -1, -1, -2, -1, 3, -3, -2, -2, 2, 7, -1],
    [0, -3, -3, -3, -1, -2, -2, -3, -3, 3, 1, -2, 1, -1, -2, -2, 0, -3, -1, 4],
];

static BLOSUM62_MATRIX: SubstitutionMatrix = SubstitutionMatrix {
    scores: BLOSUM62_SCORES,
};

/// A 20x20 symmetric residue substitution score table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubstitutionMatrix {
    scores: [[i32; 20]; 20],
}

impl SubstitutionMatrix {
    /// The published BLOSUM62 table.
    pub fn blosum62() -> &'static SubstitutionMatrix {
        &BLOSUM62_MATRIX
    }

    /// Build from an explicit table, enforcing symmetry and a strictly
    /// positive diagonal. Intended for experiments with altered scoring.
    pub fn from_table(scores: [[i32; 20]; 20]) -> Result<Self, SeqError> {
        for i in 0..20 {
            if scores[i][i] <= 0 {
                return Err(SeqError::InvalidMatrix(format!(
                    "diagonal entry for {} is {}, must be positive",
                    ALPHABET[i], scores[i][i]
                )));
            }
            for j in 0..i {
                if scores[i][j] != scores[j][i] {
                    return Err(SeqError::InvalidMatrix(format!(
                        "asymmetric entry at ({}, {})",
                        ALPHABET[i], ALPHABET[j]
                    )));
                }
            }
        }
        Ok(Self { scores })
    }

    pub fn score(&self, a: AminoAcid, b: AminoAcid) -> i32 {
        self.scores[a.index()][b.index()]
    }
}

/// BLOSUM62 substitution score for a residue pair.
pub fn blosum62(a: AminoAcid, b: AminoAcid) -> i32 {
    BLOSUM62_MATRIX.score(a, b)
}

/// Hamming distance between equal-length peptides.
pub fn hamming(a: &Peptide, b: &Peptide) -> Result<usize, SeqError> {
    hamming_slices(a.residues(), b.residues())
}

/// Hamming distance between equal-length residue slices.
pub fn hamming_slices(a: &[AminoAcid], b: &[AminoAcid]) -> Result<usize, SeqError> {
    if a.len() != b.len() {
        return Err(SeqError::LengthMismatch(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x != y).count())
}

/// Unit-cost edit distance (insert / delete / substitute).
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance bounded by `cap`: returns `None` when the true distance
/// exceeds `cap`. Banded DP, used for threshold checks on large corpora.
pub fn levenshtein_within<T: PartialEq>(a: &[T], b: &[T], cap: usize) -> Option<usize> {
    let (a, b) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    if b.len() - a.len() > cap {
        return None;
    }
    if a.is_empty() {
        return Some(b.len());
    }
    let big = cap + 1;
    let mut prev: Vec<usize> = (0..=b.len()).map(|j| j.min(big)).collect();
    let mut cur = vec![big; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = (i + 1).min(big);
        let lo = (i + 1).saturating_sub(cap).max(1);
        let hi = (i + 1 + cap).min(b.len());
        if lo > 1 {
            cur[lo - 1] = big;
        }
        let mut row_min = cur[0];
        for j in lo..=hi {
            let sub = prev[j - 1] + usize::from(*ca != b[j - 1]);
            let del = prev[j] + 1;
            let ins = cur[j - 1] + 1;
            cur[j] = sub.min(del).min(ins).min(big);
            row_min = row_min.min(cur[j]);
        }
        for v in cur.iter_mut().skip(hi + 1) {
            *v = big;
        }
        if row_min > cap {
            return None;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let d = prev[b.len()];
    (d <= cap).then_some(d)
}

/// Levenshtein distance divided by the longer length; in [0, 1].
pub fn normalized_distance<F: Float, T: PartialEq>(a: &[T], b: &[T]) -> Result<F, SeqError> {
    let denom = a.len().max(b.len());
    if denom == 0 {
        return Err(SeqError::BothEmpty);
    }
    let d = levenshtein(a, b);
    Ok(F::from_usize(d).unwrap() / F::from_usize(denom).unwrap())
}
