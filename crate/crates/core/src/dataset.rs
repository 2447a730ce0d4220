//! Pair records, TSV ingestion, deduplication, negative construction, and
//! the three split protocols.
//!
//! Input TSV schema (UTF-8, tab-delimited, header required):
//!
//! ```text
//! cdr3_alpha\tcdr3_beta\tv_gene_family\tpeptide\tmhc_allele\tlabel
//! ```
//!
//! Rows that fail residue or length validation are skipped, with a
//! per-reason count returned alongside the surviving records. Split bundles
//! serialize as JSON with the protocol tag, the seed, the three id sets, and
//! the protocol-specific evidence.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_for;
use crate::seq::{levenshtein_within, normalized_distance, Cdr3, Peptide};

/// Default MHC restriction applied while loading.
pub const DEFAULT_MHC_ALLELE: &str = "HLA-A*02:01";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing column {0:?} in header")]
    MissingColumn(String),
    #[error("no records survived filtering")]
    EmptyAfterFilter,
    #[error("need at least {needed} records, found {found}")]
    TooFewRecords { needed: usize, found: usize },
    #[error("need at least {needed} distinct families, found {found}")]
    TooFewFamilies { needed: usize, found: usize },
    #[error("no candidate test record clears the distance threshold")]
    EmptyTestSet,
    #[error("cross product of TCRs and peptides contains no non-positive pair")]
    InsufficientDiversity,
    #[error("target positive rate {0} outside (0, 1)")]
    InvalidPositiveRate(f64),
    #[error("records must contain both labels")]
    SingleClass,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One (TCR, peptide, label) example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairRecord {
    pub record_id: u64,
    pub cdr3_alpha: Cdr3,
    pub cdr3_beta: Cdr3,
    pub v_gene_family: String,
    pub peptide: Peptide,
    pub mhc_allele: String,
    pub label: bool,
}

/// Per-reason counts of rows skipped by the loader.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipCounts {
    pub malformed_row: usize,
    pub invalid_residue: usize,
    pub invalid_length: usize,
    pub invalid_label: usize,
    pub mhc_mismatch: usize,
}

impl SkipCounts {
    pub fn total(&self) -> usize {
        self.malformed_row
            + self.invalid_residue
            + self.invalid_length
            + self.invalid_label
            + self.mhc_mismatch
    }
}

/// Loader configuration.
#[derive(Debug, Clone)]
pub struct LoadConfig {
    /// Keep only rows with this allele; `None` keeps everything.
    pub mhc_allele: Option<String>,
}

impl Default for LoadConfig {
    fn default() -> Self {
        Self {
            mhc_allele: Some(DEFAULT_MHC_ALLELE.to_string()),
        }
    }
}

/// Records plus skip accounting.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub records: Vec<PairRecord>,
    pub skipped: SkipCounts,
}

const COLUMNS: [&str; 6] = [
    "cdr3_alpha",
    "cdr3_beta",
    "v_gene_family",
    "peptide",
    "mhc_allele",
    "label",
];

/// Parse the standard TSV. Record ids are assigned sequentially over
/// surviving rows, so they are stable for a fixed input file.
pub fn load_tsv(path: &Path, config: &LoadConfig) -> Result<LoadedDataset, DatasetError> {
    let text = std::fs::read_to_string(path)?;
    load_tsv_str(&text, config)
}

/// In-memory variant of [`load_tsv`].
pub fn load_tsv_str(text: &str, config: &LoadConfig) -> Result<LoadedDataset, DatasetError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| DatasetError::MissingColumn(COLUMNS[0].to_string()))?;
    let names: Vec<&str> = header.split('\t').map(str::trim).collect();
    let mut col = [0usize; 6];
    for (slot, want) in col.iter_mut().zip(COLUMNS) {
        *slot = names
            .iter()
            .position(|n| *n == want)
            .ok_or_else(|| DatasetError::MissingColumn(want.to_string()))?;
    }
    let mut records = Vec::new();
    let mut skipped = SkipCounts::default();
    let mut next_id = 0u64;
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if col.iter().any(|&c| c >= fields.len()) {
            skipped.malformed_row += 1;
            continue;
        }
        let allele = fields[col[4]];
        if let Some(want) = &config.mhc_allele {
            if allele != want {
                skipped.mhc_mismatch += 1;
                continue;
            }
        }
        let label = match fields[col[5]] {
            "0" => false,
            "1" => true,
            _ => {
                skipped.invalid_label += 1;
                continue;
            }
        };
        use crate::seq::SeqError;
        let classify = |e: SeqError, skipped: &mut SkipCounts| match e {
            SeqError::InvalidResidue(..) => skipped.invalid_residue += 1,
            _ => skipped.invalid_length += 1,
        };
        let cdr3_alpha = match Cdr3::parse(fields[col[0]]) {
            Ok(c) => c,
            Err(e) => {
                classify(e, &mut skipped);
                continue;
            }
        };
        let cdr3_beta = match Cdr3::parse(fields[col[1]]) {
            Ok(c) => c,
            Err(e) => {
                classify(e, &mut skipped);
                continue;
            }
        };
        let peptide = match Peptide::parse(fields[col[3]]) {
            Ok(p) => p,
            Err(e) => {
                classify(e, &mut skipped);
                continue;
            }
        };
        records.push(PairRecord {
            record_id: next_id,
            cdr3_alpha,
            cdr3_beta,
            v_gene_family: fields[col[2]].to_string(),
            peptide,
            mhc_allele: allele.to_string(),
            label,
        });
        next_id += 1;
    }
    if records.is_empty() {
        return Err(DatasetError::EmptyAfterFilter);
    }
    Ok(LoadedDataset { records, skipped })
}

/// Render records back to the standard TSV (header included).
pub fn to_tsv(records: &[PairRecord]) -> String {
    let mut out =
        String::from("cdr3_alpha\tcdr3_beta\tv_gene_family\tpeptide\tmhc_allele\tlabel\n");
    for r in records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.cdr3_alpha,
            r.cdr3_beta,
            r.v_gene_family,
            r.peptide,
            r.mhc_allele,
            u8::from(r.label)
        ));
    }
    out
}

/// CDR3 beta identity used by deduplication: 1 - normalized Levenshtein.
pub fn cdr3_identity(a: &Cdr3, b: &Cdr3) -> f64 {
    1.0 - normalized_distance::<f64, _>(a.residues(), b.residues()).expect("CDR3s are non-empty")
}

/// Greedy single-linkage deduplication: records link when their CDR3 beta
/// identity reaches `identity_threshold` and their peptides are equal; the
/// lowest record id in each cluster survives.
pub fn deduplicate(records: &[PairRecord], identity_threshold: f64) -> Vec<PairRecord> {
    // Union-find over indices; only same-peptide records can ever link.
    let mut parent: Vec<usize> = (0..records.len()).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let root = find(parent, parent[i]);
            parent[i] = root;
        }
        parent[i]
    }
    let mut by_peptide: BTreeMap<&Peptide, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_peptide.entry(&r.peptide).or_default().push(i);
    }
    for group in by_peptide.values() {
        for (gi, &i) in group.iter().enumerate() {
            for &j in &group[gi + 1..] {
                if cdr3_identity(&records[i].cdr3_beta, &records[j].cdr3_beta)
                    >= identity_threshold
                {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    if ri != rj {
                        parent[ri.max(rj)] = ri.min(rj);
                    }
                }
            }
        }
    }
    let mut representative: HashMap<usize, usize> = HashMap::new();
    for i in 0..records.len() {
        let root = find(&mut parent, i);
        let entry = representative.entry(root).or_insert(i);
        if records[i].record_id < records[*entry].record_id {
            *entry = i;
        }
    }
    let mut keep: Vec<usize> = representative.into_values().collect();
    keep.sort_unstable();
    keep.into_iter().map(|i| records[i].clone()).collect()
}

/// Construct label-0 records by uniform random TCR x peptide pairing,
/// rejecting pairs present in the positive set, until the positive rate
/// first drops to `target_pos_rate` or below.
///
/// The cross product is sampled with replacement, so duplicate negatives are
/// possible (and necessary when the space is small). Each negative inherits
/// the CDR3s and V-gene family of its sampled TCR.
pub fn generate_negatives(
    positives: &[PairRecord],
    target_pos_rate: f64,
    rng_seed: u64,
) -> Result<Vec<PairRecord>, DatasetError> {
    if !(0.0..1.0).contains(&target_pos_rate) || target_pos_rate == 0.0 {
        return Err(DatasetError::InvalidPositiveRate(target_pos_rate));
    }
    let mut tcrs: Vec<(&Cdr3, &Cdr3, &str)> = Vec::new();
    let mut seen_tcr = HashSet::new();
    for r in positives {
        if seen_tcr.insert((&r.cdr3_alpha, &r.cdr3_beta)) {
            tcrs.push((&r.cdr3_alpha, &r.cdr3_beta, r.v_gene_family.as_str()));
        }
    }
    let mut peptides: Vec<&Peptide> = Vec::new();
    let mut seen_pep = HashSet::new();
    for r in positives {
        if seen_pep.insert(&r.peptide) {
            peptides.push(&r.peptide);
        }
    }
    let positive_pairs: HashSet<(&Cdr3, &Peptide)> = positives
        .iter()
        .map(|r| (&r.cdr3_beta, &r.peptide))
        .collect();
    let any_candidate = tcrs.iter().any(|(_, beta, _)| {
        peptides
            .iter()
            .any(|p| !positive_pairs.contains(&(*beta, *p)))
    });
    if !any_candidate {
        return Err(DatasetError::InsufficientDiversity);
    }
    let mhc = positives
        .first()
        .map(|r| r.mhc_allele.clone())
        .unwrap_or_else(|| DEFAULT_MHC_ALLELE.to_string());
    let n_pos = positives.len();
    let mut next_id = positives.iter().map(|r| r.record_id).max().unwrap_or(0) + 1;
    let mut rng = rng_for(rng_seed, "negatives");
    let mut negatives: Vec<PairRecord> = Vec::new();
    while (n_pos as f64) / ((n_pos + negatives.len()) as f64) > target_pos_rate {
        let (alpha, beta, family) = tcrs[rng.gen_range(0..tcrs.len())];
        let peptide = peptides[rng.gen_range(0..peptides.len())];
        if positive_pairs.contains(&(beta, peptide)) {
            continue;
        }
        negatives.push(PairRecord {
            record_id: next_id,
            cdr3_alpha: alpha.clone(),
            cdr3_beta: beta.clone(),
            v_gene_family: family.to_string(),
            peptide: peptide.clone(),
            mhc_allele: mhc.clone(),
            label: false,
        });
        next_id += 1;
    }
    Ok(negatives)
}

/// Split protocol tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitProtocol {
    Random,
    FamilyHeldOut,
    DistanceAware,
}

impl std::fmt::Display for SplitProtocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitProtocol::Random => f.write_str("random"),
            SplitProtocol::FamilyHeldOut => f.write_str("fho"),
            SplitProtocol::DistanceAware => f.write_str("da"),
        }
    }
}

/// Protocol-specific proof that the split satisfies its defining invariant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitEvidence {
    /// Per-label record counts in each part (train, val, test).
    Stratification {
        per_label: BTreeMap<String, [usize; 3]>,
    },
    /// The withheld family tags.
    WithheldFamilies { families: Vec<String> },
    /// Per-test-record minimum normalized distance to any train CDR3 beta.
    MinDistances {
        threshold: f64,
        min_distances: Vec<(u64, f64)>,
    },
}

/// Train/val/test membership plus evidence; the unit persisted to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitBundle {
    pub protocol: SplitProtocol,
    pub seed: u64,
    pub train_ids: Vec<u64>,
    pub val_ids: Vec<u64>,
    pub test_ids: Vec<u64>,
    pub evidence: SplitEvidence,
}

impl SplitBundle {
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let json = serde_json::to_string_pretty(self).expect("bundle serializes");
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| {
            DatasetError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e))
        })
    }

    fn assert_disjoint(&self) {
        let train: HashSet<_> = self.train_ids.iter().collect();
        let val: HashSet<_> = self.val_ids.iter().collect();
        let test: HashSet<_> = self.test_ids.iter().collect();
        debug_assert!(train.is_disjoint(&val));
        debug_assert!(train.is_disjoint(&test));
        debug_assert!(val.is_disjoint(&test));
    }
}

/// Label-stratified random split with the given fractions (train, val, test).
/// Per-label part sizes land within one record of the exact targets.
pub fn split_random(
    records: &[PairRecord],
    fractions: (f64, f64, f64),
    rng_seed: u64,
) -> Result<SplitBundle, DatasetError> {
    if records.len() < 10 {
        return Err(DatasetError::TooFewRecords {
            needed: 10,
            found: records.len(),
        });
    }
    if !records.iter().any(|r| r.label) || !records.iter().any(|r| !r.label) {
        return Err(DatasetError::SingleClass);
    }
    let (_, f_val, f_test) = fractions;
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    let mut per_label = BTreeMap::new();
    let mut rng = rng_for(rng_seed, "split");
    for (label, tag) in [(true, "1"), (false, "0")] {
        let mut ids: Vec<u64> = records
            .iter()
            .filter(|r| r.label == label)
            .map(|r| r.record_id)
            .collect();
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let n = ids.len();
        let n_test = (f_test * n as f64).round() as usize;
        let n_val = (f_val * n as f64).round() as usize;
        let n_train = n - n_test - n_val;
        train.extend_from_slice(&ids[..n_train]);
        val.extend_from_slice(&ids[n_train..n_train + n_val]);
        test.extend_from_slice(&ids[n_train + n_val..]);
        per_label.insert(tag.to_string(), [n_train, n_val, n_test]);
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    let bundle = SplitBundle {
        protocol: SplitProtocol::Random,
        seed: rng_seed,
        train_ids: train,
        val_ids: val,
        test_ids: test,
        evidence: SplitEvidence::Stratification { per_label },
    };
    bundle.assert_disjoint();
    Ok(bundle)
}

/// Withhold whole V-gene families for test: the `n_withheld` families whose
/// record counts sit closest to the median count (ties broken by tag), so
/// the test set is neither one giant majority family nor a handful of
/// singletons. The remainder splits 87.5/12.5 into train/val, preserving the
/// 70:10 train:val ratio.
pub fn split_family_held_out(
    records: &[PairRecord],
    n_withheld: usize,
    rng_seed: u64,
) -> Result<SplitBundle, DatasetError> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        *counts.entry(r.v_gene_family.as_str()).or_default() += 1;
    }
    if counts.len() < n_withheld + 1 {
        return Err(DatasetError::TooFewFamilies {
            needed: n_withheld + 1,
            found: counts.len(),
        });
    }
    let sizes: Vec<usize> = {
        let mut s: Vec<usize> = counts.values().copied().collect();
        s.sort_unstable();
        s
    };
    let median = if sizes.len() % 2 == 1 {
        sizes[sizes.len() / 2] as f64
    } else {
        (sizes[sizes.len() / 2 - 1] + sizes[sizes.len() / 2]) as f64 / 2.0
    };
    let mut ranked: Vec<(&str, usize)> = counts.iter().map(|(k, v)| (*k, *v)).collect();
    ranked.sort_by(|a, b| {
        let da = (a.1 as f64 - median).abs();
        let db = (b.1 as f64 - median).abs();
        da.partial_cmp(&db).unwrap().then(a.0.cmp(b.0))
    });
    let withheld: BTreeSet<&str> = ranked.iter().take(n_withheld).map(|(k, _)| *k).collect();

    let mut test: Vec<u64> = records
        .iter()
        .filter(|r| withheld.contains(r.v_gene_family.as_str()))
        .map(|r| r.record_id)
        .collect();
    let mut rest: Vec<u64> = records
        .iter()
        .filter(|r| !withheld.contains(r.v_gene_family.as_str()))
        .map(|r| r.record_id)
        .collect();
    rest.sort_unstable();
    let mut rng = rng_for(rng_seed, "split");
    rest.shuffle(&mut rng);
    let n_val = (rest.len() as f64 * 0.125).round() as usize;
    let mut val: Vec<u64> = rest[..n_val].to_vec();
    let mut train: Vec<u64> = rest[n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    let bundle = SplitBundle {
        protocol: SplitProtocol::FamilyHeldOut,
        seed: rng_seed,
        train_ids: train,
        val_ids: val,
        test_ids: test,
        evidence: SplitEvidence::WithheldFamilies {
            families: withheld.into_iter().map(String::from).collect(),
        },
    };
    bundle.assert_disjoint();
    Ok(bundle)
}

/// Test share targeted by the distance-aware construction.
const DA_TEST_SHARE: f64 = 0.18;
/// Val share of the non-test remainder (keeps the 70:10 train:val ratio).
const DA_VAL_SHARE: f64 = 0.125;

/// Distance-aware split: greedily grow a test set of records whose CDR3 beta
/// normalized Levenshtein distance to every train CDR3 beta exceeds
/// `threshold`, targeting an 18% test share; a repair pass demotes any test
/// record the growing train pool ends up too close to. Evidence carries each
/// test record's exact minimum distance to the final train set.
pub fn split_distance_aware(
    records: &[PairRecord],
    threshold: f64,
    rng_seed: u64,
) -> Result<SplitBundle, DatasetError> {
    if records.is_empty() {
        return Err(DatasetError::TooFewRecords {
            needed: 1,
            found: 0,
        });
    }
    let index_of: HashMap<u64, usize> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.record_id, i))
        .collect();
    let beta = |id: u64| records[index_of[&id]].cdr3_beta.residues();
    // Violation means distance(a, b) <= threshold; checked with the banded DP.
    let violates = |a: u64, b: u64| -> bool {
        let (ra, rb) = (beta(a), beta(b));
        let max_len = ra.len().max(rb.len());
        let cap = (threshold * max_len as f64).floor() as usize;
        levenshtein_within(ra, rb, cap).is_some()
    };

    let mut order: Vec<u64> = records.iter().map(|r| r.record_id).collect();
    order.sort_unstable();
    let mut rng = rng_for(rng_seed, "split");
    order.shuffle(&mut rng);

    let quota = (DA_TEST_SHARE * records.len() as f64).round() as usize;
    let mut test: Vec<u64> = Vec::new();
    let mut pool: Vec<u64> = Vec::new();
    for id in order {
        if test.len() < quota && !pool.par_iter().any(|&t| violates(id, t)) {
            test.push(id);
        } else {
            pool.push(id);
        }
    }
    // Repair: a later pool addition may sit too close to an earlier test
    // pick; demote such picks until the invariant holds against the pool.
    loop {
        let mut demoted = Vec::new();
        let mut kept = Vec::new();
        for &t in &test {
            if pool.par_iter().any(|&p| violates(t, p)) {
                demoted.push(t);
            } else {
                kept.push(t);
            }
        }
        if demoted.is_empty() {
            break;
        }
        pool.extend(demoted);
        test = kept;
    }
    if test.is_empty() {
        return Err(DatasetError::EmptyTestSet);
    }

    pool.sort_unstable();
    let mut rng = rng_for(rng_seed, "split-val");
    pool.shuffle(&mut rng);
    let n_val = (pool.len() as f64 * DA_VAL_SHARE).round() as usize;
    let mut val: Vec<u64> = pool[..n_val].to_vec();
    let mut train: Vec<u64> = pool[n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();

    // Exact minimum distances against the final train set (dropping the val
    // records can only raise the minimum, so the invariant is preserved).
    let min_distances: Vec<(u64, f64)> = test
        .par_iter()
        .map(|&t| {
            let d = train
                .iter()
                .map(|&tr| {
                    normalized_distance::<f64, _>(beta(t), beta(tr)).expect("non-empty CDR3s")
                })
                .fold(f64::INFINITY, f64::min);
            (t, d)
        })
        .collect();

    let bundle = SplitBundle {
        protocol: SplitProtocol::DistanceAware,
        seed: rng_seed,
        train_ids: train,
        val_ids: val,
        test_ids: test,
        evidence: SplitEvidence::MinDistances {
            threshold,
            min_distances,
        },
    };
    bundle.assert_disjoint();
    Ok(bundle)
}

/// Resolve a list of record ids against the full record set.
pub fn records_by_ids<'a>(records: &'a [PairRecord], ids: &[u64]) -> Vec<&'a PairRecord> {
    let index_of: HashMap<u64, usize> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.record_id, i))
        .collect();
    ids.iter().map(|id| &records[index_of[id]]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq::parse_peptide;

    fn rec(id: u64, beta: &str, family: &str, peptide: &str, label: bool) -> PairRecord {
        PairRecord {
            record_id: id,
            cdr3_alpha: Cdr3::parse("CAVSDLEPNSSASKIIF").unwrap(),
            cdr3_beta: Cdr3::parse(beta).unwrap(),
            v_gene_family: family.to_string(),
            peptide: parse_peptide(peptide).unwrap(),
            mhc_allele: DEFAULT_MHC_ALLELE.to_string(),
            label,
        }
    }

    const HEADER: &str = "cdr3_alpha\tcdr3_beta\tv_gene_family\tpeptide\tmhc_allele\tlabel";

    fn row(beta: &str, family: &str, peptide: &str, label: &str) -> String {
        format!("CAVSDLEPNSSASKIIF\t{beta}\t{family}\t{peptide}\tHLA-A*02:01\t{label}")
    }

    #[test]
    fn load_well_formed_rows() {
        let text = format!(
            "{HEADER}\n{}\n{}\n{}\n",
            row("CASSLGQAYEQYF", "TRBV19", "GILGFVFTL", "1"),
            row("CASSIRSSYEQYF", "TRBV19", "GILGFVFTL", "0"),
            row("CAWSVSDLAKNIQYF", "TRBV30", "NLVPMVATV", "1"),
        );
        let loaded = load_tsv_str(&text, &LoadConfig::default()).unwrap();
        assert_eq!(loaded.records.len(), 3);
        assert_eq!(loaded.skipped.total(), 0);
        assert_eq!(loaded.records[0].record_id, 0);
        assert_eq!(loaded.records[2].v_gene_family, "TRBV30");
    }

    #[test]
    fn invalid_residue_row_is_skipped_and_counted() {
        let text = format!(
            "{HEADER}\n{}\n{}\n",
            row("CASSLGQAYEQYF", "TRBV19", "GILGFVXTL", "1"),
            row("CASSIRSSYEQYF", "TRBV19", "GILGFVFTL", "0"),
        );
        let loaded = load_tsv_str(&text, &LoadConfig::default()).unwrap();
        assert_eq!(loaded.records.len(), 1);
        assert_eq!(loaded.skipped.invalid_residue, 1);
    }

    #[test]
    fn missing_column_is_an_error() {
        let text = "cdr3_alpha\tcdr3_beta\tv_gene_family\tpeptide\tmhc_allele\nA\tB\tC\tD\tE\n";
        match load_tsv_str(text, &LoadConfig::default()) {
            Err(DatasetError::MissingColumn(c)) => assert_eq!(c, "label"),
            other => panic!("expected MissingColumn, got {other:?}"),
        }
    }

    #[test]
    fn mhc_filter_and_length_skips() {
        let text = format!(
            "{HEADER}\n{}\nCAV\tCASS\tTRBV1\tGILGFVFTL\tHLA-B*07:02\t1\n{}\n",
            row("CASSLGQAYEQYF", "TRBV19", "GILGFVF", "1"), // 7-mer: too short
            row("CASSIRSSYEQYF", "TRBV19", "GILGFVFTL", "1"),
        );
        let loaded = load_tsv_str(&text, &LoadConfig::default()).unwrap();
        assert_eq!(loaded.records.len(), 1);
        assert_eq!(loaded.skipped.invalid_length, 1);
        assert_eq!(loaded.skipped.mhc_mismatch, 1);
    }

    #[test]
    fn tsv_roundtrip() {
        let records = vec![
            rec(0, "CASSLGQAYEQYF", "TRBV19", "GILGFVFTL", true),
            rec(1, "CASSIRSSYEQYF", "TRBV28", "NLVPMVATV", false),
        ];
        let text = to_tsv(&records);
        let loaded = load_tsv_str(&text, &LoadConfig::default()).unwrap();
        assert_eq!(loaded.records, records);
    }

    #[test]
    fn dedup_identical_records_one_survivor() {
        let records = vec![
            rec(0, "CASSLGQAYEQYF", "TRBV19", "GILGFVFTL", true),
            rec(1, "CASSLGQAYEQYF", "TRBV19", "GILGFVFTL", true),
        ];
        let kept = deduplicate(&records, 0.90);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].record_id, 0);
    }

    #[test]
    fn dedup_below_threshold_keeps_both() {
        // Length 9 CDR3s differing at one position: identity 8/9 < 0.90.
        let records = vec![
            rec(0, "CASSLGQYF", "TRBV19", "GILGFVFTL", true),
            rec(1, "CASSAGQYF", "TRBV19", "GILGFVFTL", true),
        ];
        assert!(cdr3_identity(&records[0].cdr3_beta, &records[1].cdr3_beta) < 0.90);
        assert_eq!(deduplicate(&records, 0.90).len(), 2);
    }

    #[test]
    fn dedup_requires_equal_peptides() {
        let records = vec![
            rec(0, "CASSLGQAYEQYF", "TRBV19", "GILGFVFTL", true),
            rec(1, "CASSLGQAYEQYF", "TRBV19", "NLVPMVATV", true),
        ];
        assert_eq!(deduplicate(&records, 0.90).len(), 2);
    }

    #[test]
    fn dedup_single_linkage_chains() {
        // 12-mers: a~b and b~c at identity 11/12 ~ 0.917 >= 0.9, while
        // a~c is 10/12 ~ 0.833 < 0.9. Single linkage still merges all three.
        let a = "CASSLGQAYEQY";
        let b = "CASSLGQAYEQF"; // 1 sub from a
        let c = "CASSLGQAYDQF"; // 1 sub from b, 2 from a
        let records = vec![
            rec(0, a, "TRBV19", "GILGFVFTL", true),
            rec(1, b, "TRBV19", "GILGFVFTL", true),
            rec(2, c, "TRBV19", "GILGFVFTL", true),
        ];
        assert!(cdr3_identity(&records[0].cdr3_beta, &records[1].cdr3_beta) >= 0.90);
        assert!(cdr3_identity(&records[1].cdr3_beta, &records[2].cdr3_beta) >= 0.90);
        assert!(cdr3_identity(&records[0].cdr3_beta, &records[2].cdr3_beta) < 0.90);
        let kept = deduplicate(&records, 0.90);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].record_id, 0);
        // Brute-force oracle: transitive closure over pairwise links agrees.
        let mut linked = vec![vec![false; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                linked[i][j] = i == j
                    || (records[i].peptide == records[j].peptide
                        && cdr3_identity(&records[i].cdr3_beta, &records[j].cdr3_beta) >= 0.90);
            }
        }
        for k in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    linked[i][j] |= linked[i][k] && linked[k][j];
                }
            }
        }
        assert!(linked[0][2], "closure links a to c");
    }

    #[test]
    fn dedup_is_idempotent() {
        let records = vec![
            rec(0, "CASSLGQAYEQY", "TRBV19", "GILGFVFTL", true),
            rec(1, "CASSLGQAYEQF", "TRBV19", "GILGFVFTL", true),
            rec(2, "CASSLGQAYDQF", "TRBV19", "GILGFVFTL", true),
            rec(3, "CAWSVSDLAKNIQYF", "TRBV30", "NLVPMVATV", true),
        ];
        let once = deduplicate(&records, 0.90);
        let twice = deduplicate(&once, 0.90);
        assert_eq!(once, twice);
    }

    fn five_positives() -> Vec<PairRecord> {
        vec![
            rec(0, "CASSLGQAYEQYF", "TRBV19", "GILGFVFTL", true),
            rec(1, "CASSIRSSYEQYF", "TRBV28", "NLVPMVATV", true),
            rec(2, "CAWSVSDLAKNIQYF", "TRBV30", "GLCTLVAML", true),
            rec(3, "CASSPGQGAYEQYF", "TRBV5", "ELAGIGILTV", true),
            rec(4, "CASSYSTGDEQYF", "TRBV6", "LLFGYPVYV", true),
        ]
    }

    #[test]
    fn negatives_hit_target_rate_exactly() {
        let negatives = generate_negatives(&five_positives(), 0.05, 3).unwrap();
        assert_eq!(negatives.len(), 95); // 5 / 100 == 0.05
        assert!(negatives.iter().all(|r| !r.label));
    }

    #[test]
    fn negatives_achieved_rate_within_slack() {
        for (n_pos_rate, seed) in [(0.04, 1u64), (0.05, 2), (0.10, 3)] {
            let positives = five_positives();
            let negatives = generate_negatives(&positives, n_pos_rate, seed).unwrap();
            let rate = positives.len() as f64 / (positives.len() + negatives.len()) as f64;
            assert!(rate <= n_pos_rate && rate >= n_pos_rate - 0.005, "rate {rate}");
        }
    }

    #[test]
    fn negatives_never_collide_with_positives() {
        let positives = five_positives();
        let negatives = generate_negatives(&positives, 0.10, 11).unwrap();
        let pos_pairs: HashSet<(String, String)> = positives
            .iter()
            .map(|r| (r.cdr3_beta.to_string(), r.peptide.to_string()))
            .collect();
        for n in &negatives {
            assert!(!pos_pairs.contains(&(n.cdr3_beta.to_string(), n.peptide.to_string())));
        }
        // Families inherited from sampled TCRs.
        let known: HashSet<&str> = positives.iter().map(|r| r.v_gene_family.as_str()).collect();
        assert!(negatives
            .iter()
            .all(|n| known.contains(n.v_gene_family.as_str())));
    }

    #[test]
    fn negatives_deterministic_per_seed() {
        let a = generate_negatives(&five_positives(), 0.05, 7).unwrap();
        let b = generate_negatives(&five_positives(), 0.05, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_negatives(&five_positives(), 0.05, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn negatives_insufficient_diversity() {
        // 2 TCRs x 2 peptides, all four pairs positive.
        let records = vec![
            rec(0, "CASSLGQAYEQYF", "TRBV19", "GILGFVFTL", true),
            rec(1, "CASSLGQAYEQYF", "TRBV19", "NLVPMVATV", true),
            rec(2, "CASSIRSSYEQYF", "TRBV28", "GILGFVFTL", true),
            rec(3, "CASSIRSSYEQYF", "TRBV28", "NLVPMVATV", true),
        ];
        assert!(matches!(
            generate_negatives(&records, 0.5, 1),
            Err(DatasetError::InsufficientDiversity)
        ));
    }

    fn hundred_records() -> Vec<PairRecord> {
        // 5 positives + 95 negatives with distinct CDR3s.
        let mut records = five_positives();
        for i in 0..95u64 {
            let beta = format!(
                "CASS{}{}GELFF",
                crate::seq::ALPHABET[(i % 20) as usize].to_char(),
                crate::seq::ALPHABET[((i / 20) % 20) as usize].to_char()
            );
            records.push(rec(5 + i, &beta, "TRBV9", "RMFPNAPYL", false));
        }
        records
    }

    #[test]
    fn random_split_stratification() {
        let records = hundred_records();
        let bundle = split_random(&records, (0.70, 0.10, 0.20), 5).unwrap();
        let by_id: HashMap<u64, &PairRecord> =
            records.iter().map(|r| (r.record_id, r)).collect();
        let count =
            |ids: &[u64], label: bool| ids.iter().filter(|id| by_id[id].label == label).count();
        assert_eq!(count(&bundle.test_ids, true), 1);
        assert_eq!(count(&bundle.test_ids, false), 19);
        assert_eq!(count(&bundle.val_ids, false), 10);
        assert_eq!(
            bundle.train_ids.len() + bundle.val_ids.len() + bundle.test_ids.len(),
            100
        );
    }

    #[test]
    fn random_split_disjoint_and_seed_sensitive() {
        let records = hundred_records();
        let a = split_random(&records, (0.70, 0.10, 0.20), 5).unwrap();
        let b = split_random(&records, (0.70, 0.10, 0.20), 6).unwrap();
        assert_ne!(a.train_ids, b.train_ids);
        let train: HashSet<_> = a.train_ids.iter().collect();
        let val: HashSet<_> = a.val_ids.iter().collect();
        let test: HashSet<_> = a.test_ids.iter().collect();
        assert!(train.is_disjoint(&val) && train.is_disjoint(&test) && val.is_disjoint(&test));
    }

    fn family_fixture(n_families: usize, per_family: usize) -> Vec<PairRecord> {
        let mut records = Vec::new();
        let mut id = 0;
        for f in 0..n_families {
            for i in 0..per_family {
                let beta = format!(
                    "CASS{}{}QETQYF",
                    crate::seq::ALPHABET[f % 20].to_char(),
                    crate::seq::ALPHABET[i % 20].to_char()
                );
                records.push(rec(id, &beta, &format!("TRBV{f}"), "GILGFVFTL", id % 7 == 0));
                id += 1;
            }
        }
        records
    }

    #[test]
    fn fho_withholds_exactly_n_families() {
        let records = family_fixture(6, 10);
        let bundle = split_family_held_out(&records, 5, 1).unwrap();
        match &bundle.evidence {
            SplitEvidence::WithheldFamilies { families } => assert_eq!(families.len(), 5),
            other => panic!("wrong evidence {other:?}"),
        }
        // Train and val together cover exactly one family.
        let by_id: HashMap<u64, &PairRecord> =
            records.iter().map(|r| (r.record_id, r)).collect();
        let families: HashSet<&str> = bundle
            .train_ids
            .iter()
            .chain(&bundle.val_ids)
            .map(|id| by_id[id].v_gene_family.as_str())
            .collect();
        assert_eq!(families.len(), 1);
    }

    #[test]
    fn fho_family_disjointness() {
        let records = family_fixture(8, 12);
        let bundle = split_family_held_out(&records, 5, 3).unwrap();
        let by_id: HashMap<u64, &PairRecord> =
            records.iter().map(|r| (r.record_id, r)).collect();
        let test_families: HashSet<&str> = bundle
            .test_ids
            .iter()
            .map(|id| by_id[id].v_gene_family.as_str())
            .collect();
        for id in bundle.train_ids.iter().chain(&bundle.val_ids) {
            assert!(!test_families.contains(by_id[id].v_gene_family.as_str()));
        }
        match &bundle.evidence {
            SplitEvidence::WithheldFamilies { families } => {
                let listed: HashSet<&str> = families.iter().map(String::as_str).collect();
                assert_eq!(listed, test_families);
            }
            other => panic!("wrong evidence {other:?}"),
        }
    }

    #[test]
    fn fho_too_few_families() {
        let records = family_fixture(4, 5);
        assert!(matches!(
            split_family_held_out(&records, 5, 1),
            Err(DatasetError::TooFewFamilies {
                needed: 6,
                found: 4
            })
        ));
    }

    #[test]
    fn da_all_identical_is_empty_test() {
        let records: Vec<PairRecord> = (0..20)
            .map(|i| rec(i, "CASSLGQAYEQYF", "TRBV19", "GILGFVFTL", i % 5 == 0))
            .collect();
        assert!(matches!(
            split_distance_aware(&records, 0.30, 1),
            Err(DatasetError::EmptyTestSet)
        ));
    }

    /// Random CDR3s of varied length and content, so pairwise distances
    /// spread well above and occasionally below the DA threshold.
    fn diverse_fixture(n: usize) -> Vec<PairRecord> {
        let mut rng = rng_for(424242, "fixture");
        let mut records = Vec::new();
        for id in 0..n as u64 {
            let len = rng.gen_range(9..=16);
            let mid: String = (0..len)
                .map(|_| crate::seq::ALPHABET[rng.gen_range(0..20)].to_char())
                .collect();
            let beta = format!("C{mid}F");
            records.push(rec(id, &beta, "TRBV1", "GILGFVFTL", id % 10 == 0));
            // A few near-duplicates to exercise the violation path.
            if id % 7 == 0 {
                let dup = format!("C{mid}W");
                records.push(rec(n as u64 + id, &dup, "TRBV2", "GILGFVFTL", false));
            }
        }
        records
    }

    #[test]
    fn da_evidence_distances_clear_threshold() {
        let records = diverse_fixture(80);
        let bundle = split_distance_aware(&records, 0.30, 2).unwrap();
        match &bundle.evidence {
            SplitEvidence::MinDistances {
                threshold,
                min_distances,
            } => {
                assert_eq!(*threshold, 0.30);
                assert_eq!(min_distances.len(), bundle.test_ids.len());
                assert!(min_distances.iter().all(|(_, d)| *d > 0.30));
            }
            other => panic!("wrong evidence {other:?}"),
        }
    }

    #[test]
    fn da_bruteforce_verification() {
        let records = diverse_fixture(100);
        let bundle = split_distance_aware(&records, 0.30, 4).unwrap();
        let by_id: HashMap<u64, &PairRecord> =
            records.iter().map(|r| (r.record_id, r)).collect();
        // Quadratic re-scan with the full-matrix DP.
        for t in &bundle.test_ids {
            let mut min_d = f64::INFINITY;
            for tr in &bundle.train_ids {
                let d = normalized_distance::<f64, _>(
                    by_id[t].cdr3_beta.residues(),
                    by_id[tr].cdr3_beta.residues(),
                )
                .unwrap();
                min_d = min_d.min(d);
            }
            assert!(min_d > 0.30, "test record {t} at distance {min_d}");
        }
    }

    #[test]
    fn bundle_json_roundtrip() {
        let records = family_fixture(8, 12);
        let bundle = split_family_held_out(&records, 5, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.json");
        bundle.save(&path).unwrap();
        let loaded = SplitBundle::load(&path).unwrap();
        assert_eq!(bundle, loaded);
    }
}
