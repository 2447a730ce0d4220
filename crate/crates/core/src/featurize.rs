//! Deterministic sequence embeddings: hashed k-mer counts plus, for
//! peptides, a positional one-hot block.
//!
//! The k-mer block is L1-normalized per sequence (a mean-pooling analogue),
//! so vectors are comparable across sequence lengths. The positional block
//! is collision-free by construction and is what lets the model distinguish
//! anchor from non-anchor residues; without it the anchor-sensitivity
//! objective would be nearly unlearnable.
//!
//! Layout of a peptide vector with `hash_dim = H`:
//!
//! ```text
//! [0, H)            hashed k-mer counts, L1-normalized
//! [H + 20*(p-1), H + 20*p)   one-hot of the residue at 1-based position p
//! ```
//!
//! Positions beyond the peptide length stay zero (lengths 8..=11 share one
//! fixed-width block of 11 positions).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::fnv1a64;
use crate::seq::{Cdr3, Peptide};
use crate::Float;

/// Fixed hash salt; never change it, or stored models and cached features
/// stop being comparable across runs.
pub const FEATURE_HASH_SALT: u64 = 0x7063_6970_6b31_7631; // "pcipk1v1"

/// Width of the positional one-hot block: 11 positions x 20 residues.
pub const POSITION_ONEHOT_DIM: usize = MAX_POSITIONS * 20;
const MAX_POSITIONS: usize = 11;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FeaturizeError {
    #[error("hash_dim {0} below minimum 16")]
    HashDimTooSmall(usize),
    #[error("kmer_size {0} not in 1..=3")]
    InvalidKmerSize(usize),
    #[error("sequence of length {len} shorter than k = {k}")]
    SequenceShorterThanK { len: usize, k: usize },
}

/// Embedding configuration shared by CDR3 and peptide featurization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub kmer_size: usize,
    pub hash_dim: usize,
    pub include_position_onehot: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            kmer_size: 3,
            hash_dim: 256,
            include_position_onehot: true,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), FeaturizeError> {
        if self.hash_dim < 16 {
            return Err(FeaturizeError::HashDimTooSmall(self.hash_dim));
        }
        if !(1..=3).contains(&self.kmer_size) {
            return Err(FeaturizeError::InvalidKmerSize(self.kmer_size));
        }
        Ok(())
    }

    /// Dimension of a CDR3 embedding.
    pub fn cdr3_dim(&self) -> usize {
        self.hash_dim
    }

    /// Dimension of a peptide embedding.
    pub fn peptide_dim(&self) -> usize {
        self.hash_dim
            + if self.include_position_onehot {
                POSITION_ONEHOT_DIM
            } else {
                0
            }
    }

    /// Model input dimension: CDR3 block followed by peptide block.
    pub fn input_dim(&self) -> usize {
        self.cdr3_dim() + self.peptide_dim()
    }

    /// Stable identifier of the featurization; stored in model containers so
    /// a model is never silently applied to differently-shaped features.
    pub fn fingerprint(&self) -> String {
        let desc = format!(
            "kmer={};hash_dim={};onehot={};salt={:#018x}",
            self.kmer_size, self.hash_dim, self.include_position_onehot, FEATURE_HASH_SALT
        );
        format!("{:016x}", fnv1a64(FEATURE_HASH_SALT, desc.as_bytes()))
    }
}

/// A fixed-dimension embedding of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector<F: Float> {
    pub values: Vec<F>,
}

impl<F: Float> FeatureVector<F> {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

fn kmer_block<F: Float>(residues: &[crate::seq::AminoAcid], cfg: &FeatureConfig) -> Result<Vec<F>, FeaturizeError> {
    let k = cfg.kmer_size;
    if residues.len() < k {
        return Err(FeaturizeError::SequenceShorterThanK {
            len: residues.len(),
            k,
        });
    }
    let mut counts = vec![0usize; cfg.hash_dim];
    let mut bytes = Vec::with_capacity(k);
    for window in residues.windows(k) {
        bytes.clear();
        bytes.extend(window.iter().map(|a| a.to_char() as u8));
        let bucket = (fnv1a64(FEATURE_HASH_SALT, &bytes) % cfg.hash_dim as u64) as usize;
        counts[bucket] += 1;
    }
    let total = F::from_usize(residues.len() - k + 1).unwrap();
    Ok(counts
        .into_iter()
        .map(|c| F::from_usize(c).unwrap() / total)
        .collect())
}

/// Embed a CDR3 loop: hashed k-mer counts only.
pub fn embed_cdr3<F: Float>(tau: &Cdr3, cfg: &FeatureConfig) -> Result<FeatureVector<F>, FeaturizeError> {
    cfg.validate()?;
    Ok(FeatureVector {
        values: kmer_block(tau.residues(), cfg)?,
    })
}

/// Embed a peptide: hashed k-mer counts plus the positional one-hot block
/// when enabled.
pub fn embed_peptide<F: Float>(pi: &Peptide, cfg: &FeatureConfig) -> Result<FeatureVector<F>, FeaturizeError> {
    cfg.validate()?;
    let mut values = kmer_block::<F>(pi.residues(), cfg)?;
    if cfg.include_position_onehot {
        let mut onehot = vec![F::zero(); POSITION_ONEHOT_DIM];
        for (i, &residue) in pi.residues().iter().enumerate() {
            onehot[i * 20 + residue.index()] = F::one();
        }
        values.extend(onehot);
    }
    Ok(FeatureVector { values })
}

/// Concatenate a CDR3 embedding and a peptide embedding into a model input.
pub fn concat_input<F: Float>(tau: &FeatureVector<F>, pi: &FeatureVector<F>) -> Vec<F> {
    let mut x = Vec::with_capacity(tau.dim() + pi.dim());
    x.extend_from_slice(&tau.values);
    x.extend_from_slice(&pi.values);
    x
}
