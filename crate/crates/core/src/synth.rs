//! Synthetic benchmark with a known causal rule and a planted V-gene-family
//! shortcut.
//!
//! Ground truth: a pair binds iff
//!
//! 1. the peptide P2 residue is in the configured P2 whitelist,
//! 2. the C-terminal residue is in the P-omega whitelist, and
//! 3. the CDR3 beta contains at least one 3-mer whose hash bucket matches
//!    the bucket derived from the peptide's middle residues (positions 4-6).
//!
//! The confound: every family plants a deterministic 3-residue motif right
//! after the leading cysteine of its CDR3 betas, and in train mode positives
//! are assigned to a small set of "bias" families with probability `gamma`.
//! A sequence-only model can therefore exploit the family signature without
//! ever looking at the peptide — exactly the shortcut the diagnostics are
//! meant to expose. In OOD mode families are drawn independently of the
//! label, so the shortcut stops transferring.
//!
//! Negatives cycle through three mechanisms so no single conjunct separates
//! the classes: valid anchors without complementarity, broken anchors with
//! complementarity, and fully random pairs (verified non-binding).

use std::collections::BTreeSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{PairRecord, DEFAULT_MHC_ALLELE};
use crate::edit::{enumerate_anchor, enumerate_non_anchor, AnchorScheme, EditConstraints};
use crate::hashing::fnv1a64;
use crate::seed::{rng_for, Rng};
use crate::seq::{AminoAcid, Cdr3, Peptide, SubstitutionMatrix, ALPHABET};

/// Hash salt for the complementarity predicate (independent of the
/// featurizer salt).
pub const SYNTH_COMPLEMENT_SALT: u64 = 0x7379_6e74_6873_616c; // "synthsal"
/// Number of complementarity hash buckets.
pub const SYNTH_COMPLEMENT_BUCKETS: u64 = 64;
/// 1-based peptide positions feeding the complementarity hash.
pub const COMPLEMENT_POSITIONS: [usize; 3] = [4, 5, 6];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
}

/// Train-time confounded generation vs decorrelated evaluation generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthMode {
    /// Positives prefer the bias families with probability `gamma`.
    Train,
    /// Families drawn independently of the label.
    Ood,
}

/// Generator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_pairs: usize,
    pub pos_rate: f64,
    /// Probability that a train-mode positive lands in a bias family.
    pub gamma: f64,
    pub n_families: usize,
    pub n_bias_families: usize,
    pub p2_allowed: Vec<AminoAcid>,
    pub pomega_allowed: Vec<AminoAcid>,
    pub mode: SynthMode,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        use AminoAcid::*;
        Self {
            n_pairs: 10_000,
            pos_rate: 0.05,
            gamma: 0.8,
            n_families: 12,
            n_bias_families: 3,
            // Hydrophobic pocket preferences; closed under conservative
            // substitution, so every disruptive anchor edit leaves the set.
            p2_allowed: vec![Leu, Met, Ile, Val],
            pomega_allowed: vec![Val, Leu, Ile],
            mode: SynthMode::Train,
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_pairs == 0 {
            return Err(SynthError::InvalidConfig("n_pairs must be positive".into()));
        }
        if !(0.0 < self.pos_rate && self.pos_rate < 0.5) {
            return Err(SynthError::InvalidConfig(format!(
                "pos_rate {} outside (0, 0.5)",
                self.pos_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(SynthError::InvalidConfig(format!(
                "gamma {} outside [0, 1]",
                self.gamma
            )));
        }
        if self.n_families < 6 {
            return Err(SynthError::InvalidConfig(format!(
                "n_families {} below 6",
                self.n_families
            )));
        }
        if self.n_bias_families == 0 || self.n_bias_families >= self.n_families {
            return Err(SynthError::InvalidConfig(
                "n_bias_families must be in 1..n_families".into(),
            ));
        }
        if self.p2_allowed.is_empty() || self.pomega_allowed.is_empty() {
            return Err(SynthError::InvalidConfig(
                "anchor whitelists must be non-empty".into(),
            ));
        }
        if self.p2_allowed.len() == 20 || self.pomega_allowed.len() == 20 {
            return Err(SynthError::InvalidConfig(
                "anchor whitelists must exclude some residues".into(),
            ));
        }
        Ok(())
    }
}

/// The ground-truth labeler, total over the whole (CDR3, peptide) universe —
/// including counterfactual edits of generated records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthOracle {
    p2_allowed: BTreeSet<AminoAcid>,
    pomega_allowed: BTreeSet<AminoAcid>,
}

impl SynthOracle {
    pub fn new(config: &SynthConfig) -> Self {
        Self {
            p2_allowed: config.p2_allowed.iter().copied().collect(),
            pomega_allowed: config.pomega_allowed.iter().copied().collect(),
        }
    }

    fn bucket_of(kmer: &[AminoAcid]) -> u64 {
        let bytes: Vec<u8> = kmer.iter().map(|a| a.to_char() as u8).collect();
        fnv1a64(SYNTH_COMPLEMENT_SALT, &bytes) % SYNTH_COMPLEMENT_BUCKETS
    }

    /// Bucket derived from the peptide's middle residues.
    pub fn target_bucket(&self, peptide: &Peptide) -> u64 {
        let mid: Vec<AminoAcid> = COMPLEMENT_POSITIONS.iter().map(|&p| peptide.at(p)).collect();
        Self::bucket_of(&mid)
    }

    /// Whether the CDR3 carries a 3-mer in the peptide's target bucket.
    pub fn complementary(&self, cdr3_beta: &Cdr3, peptide: &Peptide) -> bool {
        let target = self.target_bucket(peptide);
        cdr3_beta
            .residues()
            .windows(3)
            .any(|w| Self::bucket_of(w) == target)
    }

    pub fn anchors_allowed(&self, peptide: &Peptide) -> bool {
        self.p2_allowed.contains(&peptide.at(2))
            && self.pomega_allowed.contains(&peptide.at(peptide.len()))
    }

    /// The full rule.
    pub fn label(&self, cdr3_beta: &Cdr3, peptide: &Peptide) -> bool {
        self.anchors_allowed(peptide) && self.complementary(cdr3_beta, peptide)
    }
}

/// Deterministic per-family CDR3 prefix motif (base-20 digits of the family
/// index), planted right after the leading cysteine.
pub fn family_motif(family_idx: usize) -> [AminoAcid; 3] {
    [
        ALPHABET[family_idx % 20],
        ALPHABET[(family_idx / 20) % 20],
        ALPHABET[(3 + 7 * family_idx) % 20],
    ]
}

fn family_tag(idx: usize) -> String {
    format!("TRBV{}", idx + 1)
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    oracle: SynthOracle,
    /// All 8000 3-mers grouped by complementarity bucket.
    by_bucket: Vec<Vec<[AminoAcid; 3]>>,
}

impl<'a> Generator<'a> {
    fn new(cfg: &'a SynthConfig) -> Self {
        let mut by_bucket = vec![Vec::new(); SYNTH_COMPLEMENT_BUCKETS as usize];
        for &a in &ALPHABET {
            for &b in &ALPHABET {
                for &c in &ALPHABET {
                    let kmer = [a, b, c];
                    let bucket = SynthOracle::bucket_of(&kmer) as usize;
                    by_bucket[bucket].push(kmer);
                }
            }
        }
        Self {
            cfg,
            oracle: SynthOracle::new(cfg),
            by_bucket,
        }
    }

    fn random_residue(rng: &mut Rng) -> AminoAcid {
        ALPHABET[rng.gen_range(0..20)]
    }

    fn residue_from(set: &[AminoAcid], rng: &mut Rng) -> AminoAcid {
        set[rng.gen_range(0..set.len())]
    }

    fn residue_outside(set: &BTreeSet<AminoAcid>, rng: &mut Rng) -> AminoAcid {
        loop {
            let a = Self::random_residue(rng);
            if !set.contains(&a) {
                return a;
            }
        }
    }

    /// Peptide with both anchors inside their whitelists.
    fn binding_peptide(&self, rng: &mut Rng) -> Peptide {
        let len = rng.gen_range(8..=11);
        let mut residues: Vec<AminoAcid> = (0..len).map(|_| Self::random_residue(rng)).collect();
        residues[1] = Self::residue_from(&self.cfg.p2_allowed, rng);
        residues[len - 1] = Self::residue_from(&self.cfg.pomega_allowed, rng);
        Peptide::new(residues).expect("length in range")
    }

    /// Peptide with at least one anchor outside its whitelist.
    fn broken_anchor_peptide(&self, rng: &mut Rng) -> Peptide {
        let len = rng.gen_range(8..=11);
        let mut residues: Vec<AminoAcid> = (0..len).map(|_| Self::random_residue(rng)).collect();
        match rng.gen_range(0..3) {
            0 => {
                residues[1] = Self::residue_outside(&self.oracle.p2_allowed, rng);
                residues[len - 1] = Self::residue_from(&self.cfg.pomega_allowed, rng);
            }
            1 => {
                residues[1] = Self::residue_from(&self.cfg.p2_allowed, rng);
                residues[len - 1] = Self::residue_outside(&self.oracle.pomega_allowed, rng);
            }
            _ => {
                residues[1] = Self::residue_outside(&self.oracle.p2_allowed, rng);
                residues[len - 1] = Self::residue_outside(&self.oracle.pomega_allowed, rng);
            }
        }
        Peptide::new(residues).expect("length in range")
    }

    /// CDR3 beta: leading C, the family motif, a random middle, trailing F.
    /// When `complement_to` is given, a bucket-matching 3-mer is planted at a
    /// random offset in the middle.
    fn cdr3_beta(&self, family_idx: usize, complement_to: Option<&Peptide>, rng: &mut Rng) -> Cdr3 {
        let motif = family_motif(family_idx);
        let mid_len = rng.gen_range(6..=12);
        let mut middle: Vec<AminoAcid> = (0..mid_len).map(|_| Self::random_residue(rng)).collect();
        if let Some(peptide) = complement_to {
            let bucket = self.oracle.target_bucket(peptide) as usize;
            let choices = &self.by_bucket[bucket];
            let kmer = choices[rng.gen_range(0..choices.len())];
            let offset = rng.gen_range(0..=mid_len - 3);
            middle[offset..offset + 3].copy_from_slice(&kmer);
        }
        let mut residues = vec![AminoAcid::Cys];
        residues.extend_from_slice(&motif);
        residues.extend_from_slice(&middle);
        residues.push(AminoAcid::Phe);
        Cdr3::new(residues).expect("length in range")
    }

    fn cdr3_alpha(&self, rng: &mut Rng) -> Cdr3 {
        let mid_len = rng.gen_range(6..=12);
        let mut residues = vec![AminoAcid::Cys];
        residues.extend((0..mid_len).map(|_| Self::random_residue(rng)));
        residues.push(AminoAcid::Phe);
        Cdr3::new(residues).expect("length in range")
    }

    fn positive_family(&self, rng: &mut Rng) -> usize {
        match self.cfg.mode {
            SynthMode::Train if rng.gen_bool(self.cfg.gamma) => {
                rng.gen_range(0..self.cfg.n_bias_families)
            }
            _ => rng.gen_range(0..self.cfg.n_families),
        }
    }

    fn positive(&self, rng: &mut Rng) -> (Cdr3, Cdr3, usize, Peptide) {
        let peptide = self.binding_peptide(rng);
        let family = self.positive_family(rng);
        let beta = self.cdr3_beta(family, Some(&peptide), rng);
        debug_assert!(self.oracle.label(&beta, &peptide));
        (self.cdr3_alpha(rng), beta, family, peptide)
    }

    fn negative(&self, kind: usize, rng: &mut Rng) -> (Cdr3, Cdr3, usize, Peptide) {
        let family = rng.gen_range(0..self.cfg.n_families);
        let (beta, peptide) = match kind % 3 {
            // Valid anchors, complementarity absent.
            0 => {
                let peptide = self.binding_peptide(rng);
                let beta = loop {
                    let candidate = self.cdr3_beta(family, None, rng);
                    if !self.oracle.complementary(&candidate, &peptide) {
                        break candidate;
                    }
                };
                (beta, peptide)
            }
            // Broken anchor, complementarity present.
            1 => {
                let peptide = self.broken_anchor_peptide(rng);
                let beta = self.cdr3_beta(family, Some(&peptide), rng);
                (beta, peptide)
            }
            // Fully random, verified non-binding.
            _ => loop {
                let len = rng.gen_range(8..=11);
                let residues: Vec<AminoAcid> =
                    (0..len).map(|_| Self::random_residue(rng)).collect();
                let peptide = Peptide::new(residues).expect("length in range");
                let beta = self.cdr3_beta(family, None, rng);
                if !self.oracle.label(&beta, &peptide) {
                    break (beta, peptide);
                }
            },
        };
        debug_assert!(!self.oracle.label(&beta, &peptide));
        (self.cdr3_alpha(rng), beta, family, peptide)
    }
}

/// Generate the benchmark: `round(n_pairs * pos_rate)` positives satisfying
/// the rule, the rest verified negatives, shuffled before ids are assigned.
/// Returns the records and the oracle that labels any (CDR3, peptide) pair.
pub fn generate(config: &SynthConfig) -> Result<(Vec<PairRecord>, SynthOracle), SynthError> {
    config.validate()?;
    let generator = Generator::new(config);
    let mut rng = rng_for(config.rng_seed, "synth");
    let n_pos = (config.n_pairs as f64 * config.pos_rate).round() as usize;
    let n_neg = config.n_pairs - n_pos;

    let mut rows: Vec<(Cdr3, Cdr3, usize, Peptide, bool)> = Vec::with_capacity(config.n_pairs);
    for _ in 0..n_pos {
        let (alpha, beta, family, peptide) = generator.positive(&mut rng);
        rows.push((alpha, beta, family, peptide, true));
    }
    for kind in 0..n_neg {
        let (alpha, beta, family, peptide) = generator.negative(kind, &mut rng);
        rows.push((alpha, beta, family, peptide, false));
    }
    use rand::seq::SliceRandom;
    rows.shuffle(&mut rng_for(config.rng_seed, "synth-shuffle"));

    let records = rows
        .into_iter()
        .enumerate()
        .map(|(id, (alpha, beta, family, peptide, label))| PairRecord {
            record_id: id as u64,
            cdr3_alpha: alpha,
            cdr3_beta: beta,
            v_gene_family: family_tag(family),
            peptide,
            mhc_allele: DEFAULT_MHC_ALLELE.to_string(),
            label,
        })
        .collect();
    Ok((records, generator.oracle))
}

/// Measured agreement between the edit engine's intent and the synthetic
/// ground truth: how often anchor edits truly flip the label, and how often
/// non-anchor edits truly preserve it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditFidelityReport {
    pub anchor_edits_total: usize,
    pub anchor_edits_flipped: usize,
    pub non_anchor_edits_total: usize,
    pub non_anchor_edits_preserved: usize,
}

impl EditFidelityReport {
    pub fn anchor_flip_fraction(&self) -> Option<f64> {
        (self.anchor_edits_total > 0)
            .then(|| self.anchor_edits_flipped as f64 / self.anchor_edits_total as f64)
    }

    pub fn non_anchor_preserve_fraction(&self) -> Option<f64> {
        (self.non_anchor_edits_total > 0)
            .then(|| self.non_anchor_edits_preserved as f64 / self.non_anchor_edits_total as f64)
    }
}

/// Enumerate both edit sets for every positive record and score each member
/// against the oracle.
pub fn oracle_check_edits(
    records: &[PairRecord],
    scheme_for_len: impl Fn(usize) -> AnchorScheme,
    constraints: &EditConstraints,
    matrix: &SubstitutionMatrix,
    oracle: &SynthOracle,
) -> EditFidelityReport {
    let mut report = EditFidelityReport {
        anchor_edits_total: 0,
        anchor_edits_flipped: 0,
        non_anchor_edits_total: 0,
        non_anchor_edits_preserved: 0,
    };
    for record in records.iter().filter(|r| r.label) {
        let scheme = scheme_for_len(record.peptide.len());
        if let Ok(set) = enumerate_anchor(&record.peptide, &scheme, constraints, matrix) {
            for member in &set.members {
                report.anchor_edits_total += 1;
                if !oracle.label(&record.cdr3_beta, member) {
                    report.anchor_edits_flipped += 1;
                }
            }
        }
        if let Ok(set) = enumerate_non_anchor(&record.peptide, &scheme, constraints, matrix) {
            for member in &set.members {
                report.non_anchor_edits_total += 1;
                if oracle.label(&record.cdr3_beta, member) {
                    report.non_anchor_edits_preserved += 1;
                }
            }
        }
    }
    report
}
