//! Evaluation: discrimination (AUROC, AUPRC), calibration (ECE, Brier,
//! NLL), and the causal diagnostics — shortcut index (SI), counterfactual
//! consistency (CFC), and anchor flip rate (AFR).
//!
//! SI is the absolute Spearman rank correlation between model confidence and
//! the V-gene family rank of each record, where family ranks come from the
//! TRAIN positives only (descending frequency, ties lexicographic, unseen
//! families one past the last rank) so evaluation never leaks test
//! statistics. CFC and AFR are computed over sampled edits of positive test
//! pairs: CFC is one minus the mean absolute prediction change under
//! non-anchor edits, flat over (pair, edit) terms; AFR is the fraction of
//! anchor edits that pull a >= 0.5 prediction strictly below 0.5.
//!
//! A degenerate SI (constant variable) is reported as a flagged missing
//! value, never silently zero.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::PairRecord;
use crate::edit::{
    enumerate_anchor, enumerate_non_anchor, sample_from_members, AnchorPolicy, EditConstraints,
};
use crate::featurize::{concat_input, embed_cdr3, embed_peptide, FeatureConfig, FeaturizeError};
use crate::model::{ModelError, ModelParams};
use crate::seed::{derive_seed, rng_for};
use crate::seq::SubstitutionMatrix;
use crate::Float;

/// ECE bin count (equal-width bins over [0, 1]).
pub const ECE_BINS: usize = 10;
/// Cap on the number of positive pairs scored for the causal diagnostics.
pub const DEFAULT_CAUSAL_PAIR_CAP: usize = 5000;
/// Edits sampled per kind per positive pair.
pub const DEFAULT_EDITS_PER_PAIR: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("both labels must be present")]
    SingleClass,
    #[error("no positive labels")]
    NoPositives,
    #[error("a rank variable is constant; correlation undefined")]
    DegenerateVariable,
    #[error("need at least {0} samples")]
    TooFewSamples(usize),
    #[error("no edit samples available")]
    NoEditSamples,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Featurize(#[from] FeaturizeError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn average_ranks<F: Float>(values: &[F]) -> Vec<F> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![F::zero(); n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Tied block [i, j]: everyone gets the mean of ranks i+1 ..= j+1.
        let avg = F::from_usize(i + j + 2).unwrap() / F::from_f64_lossy(2.0);
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that a random positive outranks a random negative, ties
/// counted one half; computed from average ranks (exactly the pairwise
/// count, in O(n log n)).
pub fn auroc<F: Float>(preds: &[F], labels: &[bool]) -> Result<F, MetricsError> {
    assert_eq!(preds.len(), labels.len());
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let ranks = average_ranks(preds);
    let rank_sum_pos: F = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y)
        .map(|(&r, _)| r)
        .sum();
    let np = F::from_usize(n_pos).unwrap();
    let u = rank_sum_pos - np * (np + F::one()) / F::from_f64_lossy(2.0);
    Ok(u / (np * F::from_usize(n_neg).unwrap()))
}

/// Area under the precision-recall curve by step-wise interpolation over the
/// sorted unique thresholds (tied predictions collapse into one step).
pub fn auprc<F: Float>(preds: &[F], labels: &[bool]) -> Result<F, MetricsError> {
    assert_eq!(preds.len(), labels.len());
    let n_pos = labels.iter().filter(|&&y| y).count();
    if n_pos == 0 {
        return Err(MetricsError::NoPositives);
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].partial_cmp(&preds[a]).expect("finite values"));
    let np = F::from_usize(n_pos).unwrap();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = F::zero();
    let mut area = F::zero();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && preds[order[j + 1]] == preds[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if labels[idx] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = F::from_usize(tp).unwrap() / np;
        let precision = F::from_usize(tp).unwrap() / F::from_usize(tp + fp).unwrap();
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(area)
}

/// Calibration summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration<F: Float> {
    pub ece: F,
    pub brier: F,
    pub nll: F,
}

/// ECE over ten equal-width bins, Brier score, and clamped NLL.
pub fn calibration<F: Float>(preds: &[F], labels: &[bool]) -> Calibration<F> {
    assert_eq!(preds.len(), labels.len());
    let n = preds.len();
    let nf = F::from_usize(n.max(1)).unwrap();
    let mut bin_count = [0usize; ECE_BINS];
    let mut bin_conf = [F::zero(); ECE_BINS];
    let mut bin_acc = [F::zero(); ECE_BINS];
    let mut brier = F::zero();
    let mut nll = F::zero();
    let lo = F::from_f64_lossy(1e-7);
    let hi = F::one() - lo;
    for (&p, &label) in preds.iter().zip(labels) {
        let y = if label { F::one() } else { F::zero() };
        let bin = ((p.to_f64_lossy() * ECE_BINS as f64).floor() as usize).min(ECE_BINS - 1);
        bin_count[bin] += 1;
        bin_conf[bin] += p;
        bin_acc[bin] += y;
        brier += (p - y) * (p - y);
        let pc = p.max(lo).min(hi);
        nll -= y * pc.ln() + (F::one() - y) * (F::one() - pc).ln();
    }
    let mut ece = F::zero();
    for b in 0..ECE_BINS {
        if bin_count[b] == 0 {
            continue;
        }
        let m = F::from_usize(bin_count[b]).unwrap();
        let gap = (bin_acc[b] / m - bin_conf[b] / m).abs();
        ece += m / nf * gap;
    }
    Calibration {
        ece,
        brier: brier / nf,
        nll: nll / nf,
    }
}

/// V-gene family ranks learned from TRAIN positives: descending positive
/// frequency, ties lexicographic, rank 1 first. Families never seen among
/// train positives rank one past the end.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyRanks {
    ranks: BTreeMap<String, u32>,
    max_rank: u32,
}

impl FamilyRanks {
    pub fn rank(&self, family: &str) -> u32 {
        self.ranks
            .get(family)
            .copied()
            .unwrap_or(self.max_rank + 1)
    }

    pub fn max_rank(&self) -> u32 {
        self.max_rank
    }
}

/// Build [`FamilyRanks`] from the train records.
pub fn rank_v_families(train_records: &[&PairRecord]) -> FamilyRanks {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in train_records.iter().filter(|r| r.label) {
        *counts.entry(r.v_gene_family.as_str()).or_default() += 1;
    }
    let mut ordered: Vec<(&str, usize)> = counts.into_iter().collect();
    ordered.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let ranks: BTreeMap<String, u32> = ordered
        .into_iter()
        .enumerate()
        .map(|(i, (family, _))| (family.to_string(), i as u32 + 1))
        .collect();
    let max_rank = ranks.len() as u32;
    FamilyRanks { ranks, max_rank }
}

/// Spearman rank correlation with average-rank tie handling on both sides.
pub fn spearman<F: Float>(x: &[F], y: &[F]) -> Result<F, MetricsError> {
    assert_eq!(x.len(), y.len());
    if x.len() < 3 {
        return Err(MetricsError::TooFewSamples(3));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = F::from_usize(x.len()).unwrap();
    let mean_x: F = rx.iter().copied().sum::<F>() / n;
    let mean_y: F = ry.iter().copied().sum::<F>() / n;
    let mut cov = F::zero();
    let mut var_x = F::zero();
    let mut var_y = F::zero();
    for (&a, &b) in rx.iter().zip(&ry) {
        let dx = a - mean_x;
        let dy = b - mean_y;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == F::zero() || var_y == F::zero() {
        return Err(MetricsError::DegenerateVariable);
    }
    Ok(cov / (var_x * var_y).sqrt())
}

/// Shortcut index: `|spearman(confidence, family rank)|`.
pub fn shortcut_index<F: Float>(preds: &[F], v_ranks: &[u32]) -> Result<F, MetricsError> {
    let ranks_f: Vec<F> = v_ranks.iter().map(|&r| F::from_u32(r).unwrap()).collect();
    spearman(preds, &ranks_f).map(|rho| rho.abs())
}

/// Predictions for one positive pair and its sampled edits.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalPairSample<F: Float> {
    pub record_id: u64,
    pub p_orig: F,
    pub minus_preds: Vec<F>,
    pub plus_preds: Vec<F>,
}

/// Counterfactual consistency: one minus the mean absolute prediction change
/// under non-anchor edits, flat over (pair, edit) terms; pairs with no
/// sampled edits are excluded from the denominator.
pub fn cfc<F: Float>(edit_samples: &[CausalPairSample<F>]) -> Result<F, MetricsError> {
    let mut total = F::zero();
    let mut count = 0usize;
    for s in edit_samples {
        for &pe in &s.minus_preds {
            total += (s.p_orig - pe).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricsError::NoEditSamples);
    }
    Ok(F::one() - total / F::from_usize(count).unwrap())
}

/// Anchor flip rate: the fraction of (pair, anchor edit) events where the
/// original prediction is at least 0.5 and the edited prediction falls
/// strictly below 0.5.
pub fn afr<F: Float>(edit_samples: &[CausalPairSample<F>]) -> Result<F, MetricsError> {
    let half = F::from_f64_lossy(0.5);
    let mut flips = 0usize;
    let mut count = 0usize;
    for s in edit_samples {
        for &pe in &s.plus_preds {
            if s.p_orig >= half && pe < half {
                flips += 1;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricsError::NoEditSamples);
    }
    Ok(F::from_usize(flips).unwrap() / F::from_usize(count).unwrap())
}

/// Everything scored during one evaluation pass.
#[derive(Debug, Clone)]
pub struct EvalRun<F: Float> {
    pub record_ids: Vec<u64>,
    pub predictions: Vec<F>,
    pub labels: Vec<bool>,
    pub v_family_rank: Vec<u32>,
    pub edit_samples: Vec<CausalPairSample<F>>,
    pub skipped_empty_editsets: usize,
}

/// The serialized result of one (model, split) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: String,
    pub seed: u64,
    pub n_test: usize,
    pub n_pos: usize,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub ece: f64,
    pub brier: f64,
    pub nll: f64,
    pub ece_bins: usize,
    pub si: Option<f64>,
    pub cfc: Option<f64>,
    pub afr: Option<f64>,
    pub n_causal_pairs: usize,
    pub edits_per_pair: usize,
    pub skipped_empty_editsets: usize,
    /// Names of metrics that could not be computed, with the reason.
    pub flags: Vec<String>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn tsv_header() -> &'static str {
        "protocol\tseed\tn_test\tn_pos\tauroc\tauprc\tece\tbrier\tnll\tsi\tcfc\tafr\tn_causal_pairs"
    }

    /// One flat row for cross-run aggregation; missing metrics render as NA.
    pub fn tsv_row(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))
        }
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.protocol,
            self.seed,
            self.n_test,
            self.n_pos,
            opt(self.auroc),
            opt(self.auprc),
            self.ece,
            self.brier,
            self.nll,
            opt(self.si),
            opt(self.cfc),
            opt(self.afr),
            self.n_causal_pairs
        )
    }
}

/// Model plus featurization and edit configuration for an evaluation pass.
pub struct EvalContext<'a, F: Float> {
    pub params: &'a ModelParams<F>,
    pub feature: &'a FeatureConfig,
    pub constraints: &'a EditConstraints,
    pub anchor_policy: AnchorPolicy,
}

/// Score a test set and assemble the full report.
///
/// Causal diagnostics run on up to `causal_pair_cap` positives (all of them
/// when fewer are available), each with `edits_per_pair` sampled edits per
/// kind. Metric failures (single-class test set, degenerate SI, no edit
/// samples) become flags on the report rather than hard errors.
pub fn evaluate<F: Float>(
    ctx: &EvalContext<'_, F>,
    test_records: &[&PairRecord],
    train_records: &[&PairRecord],
    protocol: &str,
    rng_seed: u64,
    causal_pair_cap: usize,
    edits_per_pair: usize,
) -> Result<(MetricsReport, EvalRun<F>), EvalError> {
    let matrix = SubstitutionMatrix::blosum62();
    let family_ranks = rank_v_families(train_records);

    struct Scored<F: Float> {
        id: u64,
        h_tau: Vec<F>,
        p: F,
        label: bool,
        rank: u32,
    }
    let scored: Vec<Scored<F>> = test_records
        .par_iter()
        .map(|r| {
            let h_tau = embed_cdr3::<F>(&r.cdr3_beta, ctx.feature)?;
            let x = concat_input(&h_tau, &embed_peptide(&r.peptide, ctx.feature)?);
            let trace = ctx.params.forward(&x)?;
            Ok(Scored {
                id: r.record_id,
                h_tau: h_tau.values,
                p: trace.p,
                label: r.label,
                rank: family_ranks.rank(&r.v_gene_family),
            })
        })
        .collect::<Result<_, EvalError>>()?;

    let predictions: Vec<F> = scored.iter().map(|s| s.p).collect();
    let labels: Vec<bool> = scored.iter().map(|s| s.label).collect();
    let v_family_rank: Vec<u32> = scored.iter().map(|s| s.rank).collect();
    let n_pos = labels.iter().filter(|&&y| y).count();

    let mut flags = Vec::new();
    let auroc_v = match auroc(&predictions, &labels) {
        Ok(v) => Some(v.to_f64_lossy()),
        Err(e) => {
            flags.push(format!("auroc: {e}"));
            None
        }
    };
    let auprc_v = match auprc(&predictions, &labels) {
        Ok(v) => Some(v.to_f64_lossy()),
        Err(e) => {
            flags.push(format!("auprc: {e}"));
            None
        }
    };
    let cal = calibration(&predictions, &labels);
    let si_v = match shortcut_index(&predictions, &v_family_rank) {
        Ok(v) => Some(v.to_f64_lossy()),
        Err(e) => {
            flags.push(format!("si: {e}"));
            None
        }
    };

    // Select positives for the causal diagnostics, deterministically.
    let mut pos_idx: Vec<usize> = (0..scored.len()).filter(|&i| labels[i]).collect();
    pos_idx.sort_by_key(|&i| scored[i].id);
    pos_idx.shuffle(&mut rng_for(rng_seed, "causal-select"));
    pos_idx.truncate(causal_pair_cap);
    pos_idx.sort_unstable();

    let by_id: std::collections::HashMap<u64, &PairRecord> =
        test_records.iter().map(|r| (r.record_id, *r)).collect();
    let mut skipped = 0usize;
    let mut edit_samples: Vec<CausalPairSample<F>> = Vec::with_capacity(pos_idx.len());
    for &i in &pos_idx {
        let s = &scored[i];
        let record = by_id[&s.id];
        let scheme = ctx.anchor_policy.scheme_for_len(record.peptide.len());
        let minus_members = enumerate_non_anchor(&record.peptide, &scheme, ctx.constraints, matrix)
            .map(|set| set.members)
            .unwrap_or_default();
        let plus_members = enumerate_anchor(&record.peptide, &scheme, ctx.constraints, matrix)
            .map(|set| set.members)
            .unwrap_or_default();
        let minus = sample_from_members(
            &minus_members,
            edits_per_pair,
            derive_seed(rng_seed, &format!("cfc:{}", s.id)),
        );
        let plus = sample_from_members(
            &plus_members,
            edits_per_pair,
            derive_seed(rng_seed, &format!("afr:{}", s.id)),
        );
        if minus.is_empty() || plus.is_empty() {
            skipped += 1;
        }
        let score_edits = |peps: &[crate::seq::Peptide]| -> Result<Vec<F>, EvalError> {
            peps.iter()
                .map(|m| {
                    let x = concat_input(
                        &crate::featurize::FeatureVector {
                            values: s.h_tau.clone(),
                        },
                        &embed_peptide(m, ctx.feature)?,
                    );
                    Ok(ctx.params.forward(&x)?.p)
                })
                .collect()
        };
        edit_samples.push(CausalPairSample {
            record_id: s.id,
            p_orig: s.p,
            minus_preds: score_edits(&minus)?,
            plus_preds: score_edits(&plus)?,
        });
    }

    let cfc_v = match cfc(&edit_samples) {
        Ok(v) => Some(v.to_f64_lossy()),
        Err(e) => {
            flags.push(format!("cfc: {e}"));
            None
        }
    };
    let afr_v = match afr(&edit_samples) {
        Ok(v) => Some(v.to_f64_lossy()),
        Err(e) => {
            flags.push(format!("afr: {e}"));
            None
        }
    };

    let report = MetricsReport {
        protocol: protocol.to_string(),
        seed: rng_seed,
        n_test: scored.len(),
        n_pos,
        auroc: auroc_v,
        auprc: auprc_v,
        ece: cal.ece.to_f64_lossy(),
        brier: cal.brier.to_f64_lossy(),
        nll: cal.nll.to_f64_lossy(),
        ece_bins: ECE_BINS,
        si: si_v,
        cfc: cfc_v,
        afr: afr_v,
        n_causal_pairs: pos_idx.len(),
        edits_per_pair,
        skipped_empty_editsets: skipped,
        flags,
    };
    let run = EvalRun {
        record_ids: scored.iter().map(|s| s.id).collect(),
        predictions,
        labels,
        v_family_rank,
        edit_samples,
        skipped_empty_editsets: skipped,
    };
    Ok((report, run))
}
