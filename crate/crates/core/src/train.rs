//! Training: class-weighted BCE plus the counterfactual invariance and
//! sensitivity losses, optimized with Adam.
//!
//! The objective is
//!
//! ```text
//! L = L_bce + lambda1 * L_inv + lambda2 * L_sens
//! ```
//!
//! where, per mini-batch, `L_inv` averages the squared prediction change
//! under sampled non-anchor edits of each positive pair and `L_sens` is a
//! margin hinge on the prediction drop under sampled anchor edits. Gradients
//! flow through both forward passes of each term (a config flag can freeze
//! the original-pair branch for experimentation). BCE values and gradients
//! are computed in logit space; the counterfactual terms operate on
//! probabilities exactly as defined.
//!
//! The TCR side of every input is the CDR3 beta chain, the primary
//! specificity determinant. Counterfactual samples are redrawn fresh every
//! epoch; positives whose edit set is empty contribute only BCE and are
//! counted in the epoch log. Presets reproduce the three reference systems:
//! plain BCE (`Baseline`), non-anchor counterfactuals appended as extra
//! negatives (`EditAug`), and the full objective (`Cip`).

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{records_by_ids, PairRecord, SplitBundle};
use crate::edit::{
    enumerate_anchor, enumerate_non_anchor, sample_from_members, AnchorPolicy, EditConstraints,
};
use crate::featurize::{concat_input, embed_cdr3, embed_peptide, FeatureConfig, FeaturizeError};
use crate::model::{ForwardTrace, ModelDims, ModelError, ModelParams, ParamGrads};
use crate::seed::{derive_seed, rng_for};
use crate::seq::{Peptide, SubstitutionMatrix};
use crate::Float;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train split is empty")]
    EmptyTrainSplit,
    #[error("train split must contain both labels")]
    SingleClass,
    #[error("non-finite loss at epoch {epoch}")]
    DivergenceDetected { epoch: usize },
    #[error(transparent)]
    Featurize(#[from] FeaturizeError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Class-balancing weights: `w_plus = n / (2 n_plus)`,
/// `w_minus = n / (2 n_minus)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w_plus: f64,
    pub w_minus: f64,
    pub n: usize,
    pub n_plus: usize,
    pub n_minus: usize,
}

impl ClassWeights {
    pub fn from_labels<I: IntoIterator<Item = bool>>(labels: I) -> Result<Self, TrainError> {
        let mut n_plus = 0usize;
        let mut n_minus = 0usize;
        for label in labels {
            if label {
                n_plus += 1;
            } else {
                n_minus += 1;
            }
        }
        if n_plus == 0 || n_minus == 0 {
            return Err(TrainError::SingleClass);
        }
        let n = n_plus + n_minus;
        Ok(Self {
            w_plus: n as f64 / (2.0 * n_plus as f64),
            w_minus: n as f64 / (2.0 * n_minus as f64),
            n,
            n_plus,
            n_minus,
        })
    }

    /// Unweighted: both classes at 1.
    pub fn uniform() -> Self {
        Self {
            w_plus: 1.0,
            w_minus: 1.0,
            n: 0,
            n_plus: 0,
            n_minus: 0,
        }
    }
}

/// The three reference systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Class-weighted BCE only.
    Baseline,
    /// BCE with sampled non-anchor counterfactuals appended as extra
    /// label-0 examples; no auxiliary losses.
    EditAug,
    /// Full objective with both auxiliary losses.
    Cip,
}

/// One-at-a-time component removals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoInv,
    NoSens,
    NoAnchorMasking,
    NoBlosumConstraint,
}

/// Everything a training run needs beyond the data itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: Preset,
    pub lambda1: f64,
    pub lambda2: f64,
    pub margin: f64,
    pub edits_per_positive: usize,
    pub constraints: EditConstraints,
    pub anchor_policy: AnchorPolicy,
    pub feature: FeatureConfig,
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub patience: usize,
    pub rng_seed: u64,
    /// Freeze the original-pair branch of the counterfactual terms,
    /// treating its prediction as a constant target.
    pub stop_gradient_original: bool,
}

impl TrainConfig {
    /// Paper-default hyperparameters for one of the three systems.
    pub fn preset(preset: Preset, rng_seed: u64) -> Self {
        let (lambda1, lambda2) = match preset {
            Preset::Cip => (0.4, 0.2),
            Preset::Baseline | Preset::EditAug => (0.0, 0.0),
        };
        Self {
            preset,
            lambda1,
            lambda2,
            margin: 0.3,
            edits_per_positive: 1,
            constraints: EditConstraints::default(),
            anchor_policy: AnchorPolicy::PTwoOmega,
            feature: FeatureConfig::default(),
            hidden_dim: 64,
            batch_size: 64,
            epochs: 40,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            patience: 10,
            rng_seed,
            stop_gradient_original: false,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err("lambda weights must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.margin) || self.margin == 0.0 {
            return Err(format!("margin {} outside (0, 1)", self.margin));
        }
        if !(1..=3).contains(&self.constraints.max_hamming) {
            return Err(format!(
                "edit budget k={} outside 1..=3",
                self.constraints.max_hamming
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.edits_per_positive == 0 {
            return Err("batch_size, epochs, edits_per_positive must be positive".into());
        }
        self.feature.validate().map_err(|e| e.to_string())
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        match ablation {
            Ablation::NoInv => self.lambda1 = 0.0,
            Ablation::NoSens => self.lambda2 = 0.0,
            Ablation::NoAnchorMasking => self.anchor_policy = AnchorPolicy::Unmasked,
            Ablation::NoBlosumConstraint => self.constraints.blosum_min = None,
        }
        self
    }
}

/// The six configurations of the component-removal study: the full system,
/// the four single-component removals, and the plain baseline.
pub fn ablation_matrix(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut full = base.clone();
    full.preset = Preset::Cip;
    if full.lambda1 == 0.0 && full.lambda2 == 0.0 {
        full.lambda1 = 0.4;
        full.lambda2 = 0.2;
    }
    let baseline = TrainConfig {
        preset: Preset::Baseline,
        lambda1: 0.0,
        lambda2: 0.0,
        ..base.clone()
    };
    vec![
        ("cip_full".into(), full.clone()),
        ("no_sens".into(), full.clone().with_ablation(Ablation::NoSens)),
        ("no_inv".into(), full.clone().with_ablation(Ablation::NoInv)),
        (
            "no_anchor_masking".into(),
            full.clone().with_ablation(Ablation::NoAnchorMasking),
        ),
        (
            "no_blosum_constraint".into(),
            full.with_ablation(Ablation::NoBlosumConstraint),
        ),
        ("baseline".into(), baseline),
    ]
}

/// Hyperparameter sweep grid: lambda1 x lambda2 x edit budget.
pub fn sweep_grid(base: &TrainConfig) -> Vec<TrainConfig> {
    let mut out = Vec::new();
    for &lambda1 in &[0.1, 0.2, 0.4, 0.8] {
        for &lambda2 in &[0.05, 0.1, 0.2, 0.4] {
            for k in 1..=3usize {
                let mut cfg = base.clone();
                cfg.lambda1 = lambda1;
                cfg.lambda2 = lambda2;
                cfg.constraints.max_hamming = k;
                out.push(cfg);
            }
        }
    }
    out
}

/// Numerically stable `ln(1 + e^t)`.
fn softplus<F: Float>(t: F) -> F {
    t.max(F::zero()) + (-(t.abs())).exp().ln_1p()
}

/// Class-weighted binary cross-entropy over `(logit, probability)` pairs.
///
/// Returns the mean loss and the per-example gradient with respect to the
/// logit (the numerically stable form; `dL/dp = dL/dz / (p (1 - p))`).
pub fn loss_bce<F: Float>(
    preds: &[(F, F)],
    labels: &[bool],
    weights: &ClassWeights,
) -> (F, Vec<F>) {
    assert_eq!(preds.len(), labels.len());
    let n = F::from_usize(preds.len()).unwrap();
    let w_plus = F::from_f64_lossy(weights.w_plus);
    let w_minus = F::from_f64_lossy(weights.w_minus);
    let mut total = F::zero();
    let mut dz = Vec::with_capacity(preds.len());
    for (&(z, p), &y) in preds.iter().zip(labels) {
        if y {
            total += w_plus * softplus(-z);
            dz.push(w_plus * (p - F::one()) / n);
        } else {
            total += w_minus * softplus(z);
            dz.push(w_minus * p / n);
        }
    }
    (total / n, dz)
}

/// Squared prediction change under non-anchor edits, averaged over the
/// sampled edits of one pair: `(value, d/dp_orig, d/dp_edit per edit)`.
pub fn invariance_term<F: Float>(p_orig: F, p_edits: &[F]) -> (F, F, Vec<F>) {
    if p_edits.is_empty() {
        return (F::zero(), F::zero(), Vec::new());
    }
    let m = F::from_usize(p_edits.len()).unwrap();
    let mut value = F::zero();
    let mut d_orig = F::zero();
    let mut d_edits = Vec::with_capacity(p_edits.len());
    for &pe in p_edits {
        let diff = p_orig - pe;
        value += diff * diff;
        let two = F::from_f64_lossy(2.0);
        d_orig += two * diff / m;
        d_edits.push(-(two * diff) / m);
    }
    (value / m, d_orig, d_edits)
}

/// Margin hinge on the prediction drop under anchor edits, averaged over the
/// sampled edits of one pair. The subgradient at the kink is zero.
pub fn sensitivity_term<F: Float>(p_orig: F, p_edits: &[F], margin: F) -> (F, F, Vec<F>) {
    if p_edits.is_empty() {
        return (F::zero(), F::zero(), Vec::new());
    }
    let m = F::from_usize(p_edits.len()).unwrap();
    let mut value = F::zero();
    let mut d_orig = F::zero();
    let mut d_edits = Vec::with_capacity(p_edits.len());
    for &pe in p_edits {
        let slack = margin - (p_orig - pe);
        if slack > F::zero() {
            value += slack;
            d_orig -= F::one() / m;
            d_edits.push(F::one() / m);
        } else {
            d_edits.push(F::zero());
        }
    }
    (value / m, d_orig, d_edits)
}

/// One example in a batch: a borrowed input vector and its label.
#[derive(Debug, Clone, Copy)]
pub struct BatchInput<'a, F: Float> {
    pub x: &'a [F],
    pub label: bool,
}

/// Sampled counterfactual inputs attached to one positive batch example.
#[derive(Debug, Clone)]
pub struct PositiveEdits<F: Float> {
    /// Index into the batch `examples` slice.
    pub example_idx: usize,
    pub minus: Vec<Vec<F>>,
    pub plus: Vec<Vec<F>>,
}

/// Loss components of one batch (or epoch).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub inv: f64,
    pub sens: f64,
    pub total: f64,
}

const BACKWARD_CHUNK: usize = 16;

/// Compute the full objective and its exact gradient on one batch, given
/// already-sampled counterfactual inputs. Deterministic in its inputs, which
/// makes it the target of the finite-difference checks.
pub fn cip_batch_loss_and_grads<F: Float>(
    params: &ModelParams<F>,
    examples: &[BatchInput<'_, F>],
    pos_edits: &[PositiveEdits<F>],
    weights: &ClassWeights,
    lambda1: F,
    lambda2: F,
    margin: F,
    stop_gradient_original: bool,
) -> Result<(LossBreakdown, ParamGrads<F>), ModelError> {
    // Forward the originals (order-preserving parallel map).
    let traces: Vec<ForwardTrace<F>> = examples
        .par_iter()
        .map(|e| params.forward(e.x))
        .collect::<Result<_, _>>()?;
    let labels: Vec<bool> = examples.iter().map(|e| e.label).collect();
    let preds: Vec<(F, F)> = traces.iter().map(|t| (t.z, t.p)).collect();
    let (bce, bce_dz) = loss_bce(&preds, &labels, weights);

    // dL/dp accumulator for each original trace, from the counterfactual terms.
    let mut dp_orig = vec![F::zero(); examples.len()];
    let n_pos_batch = examples.iter().filter(|e| e.label).count();
    let pos_norm = if n_pos_batch > 0 {
        F::one() / F::from_usize(n_pos_batch).unwrap()
    } else {
        F::zero()
    };

    let mut inv_total = F::zero();
    let mut sens_total = F::zero();
    // (trace, upstream dL/dp) for every edit forward pass.
    let mut edit_backprops: Vec<(ForwardTrace<F>, F)> = Vec::new();

    let run_edits = lambda1 > F::zero() || lambda2 > F::zero();
    if run_edits && n_pos_batch > 0 {
        for pe in pos_edits {
            debug_assert!(examples[pe.example_idx].label);
            let p_orig = traces[pe.example_idx].p;

            if lambda1 > F::zero() && !pe.minus.is_empty() {
                let minus_traces: Vec<ForwardTrace<F>> = pe
                    .minus
                    .par_iter()
                    .map(|x| params.forward(x))
                    .collect::<Result<_, _>>()?;
                let p_minus: Vec<F> = minus_traces.iter().map(|t| t.p).collect();
                let (value, d_orig, d_edits) = invariance_term(p_orig, &p_minus);
                inv_total += value * pos_norm;
                if !stop_gradient_original {
                    dp_orig[pe.example_idx] += lambda1 * pos_norm * d_orig;
                }
                for (trace, d) in minus_traces.into_iter().zip(d_edits) {
                    edit_backprops.push((trace, lambda1 * pos_norm * d));
                }
            }

            if lambda2 > F::zero() && !pe.plus.is_empty() {
                let plus_traces: Vec<ForwardTrace<F>> = pe
                    .plus
                    .par_iter()
                    .map(|x| params.forward(x))
                    .collect::<Result<_, _>>()?;
                let p_plus: Vec<F> = plus_traces.iter().map(|t| t.p).collect();
                let (value, d_orig, d_edits) = sensitivity_term(p_orig, &p_plus, margin);
                sens_total += value * pos_norm;
                if !stop_gradient_original {
                    dp_orig[pe.example_idx] += lambda2 * pos_norm * d_orig;
                }
                for (trace, d) in plus_traces.into_iter().zip(d_edits) {
                    edit_backprops.push((trace, lambda2 * pos_norm * d));
                }
            }
        }
    }

    // Assemble (trace, dz) tasks: originals get BCE dz plus the chain-ruled
    // counterfactual dp; edit traces get their dp chain-ruled.
    let mut tasks: Vec<(&ForwardTrace<F>, F)> = Vec::with_capacity(traces.len() + edit_backprops.len());
    for (i, trace) in traces.iter().enumerate() {
        let sigma_prime = trace.p * (F::one() - trace.p);
        tasks.push((trace, bce_dz[i] + dp_orig[i] * sigma_prime));
    }
    for (trace, dp) in &edit_backprops {
        let sigma_prime = trace.p * (F::one() - trace.p);
        tasks.push((trace, *dp * sigma_prime));
    }

    // Chunked parallel backward with a fixed reduction order, so results are
    // bit-identical regardless of thread scheduling.
    let chunk_grads: Vec<ParamGrads<F>> = tasks
        .par_chunks(BACKWARD_CHUNK)
        .map(|chunk| {
            let mut local = ParamGrads::zeros(params.dims);
            for (trace, dz) in chunk {
                params.backward_logit_into(trace, *dz, &mut local);
            }
            local
        })
        .collect();
    let mut grads = ParamGrads::zeros(params.dims);
    for g in &chunk_grads {
        grads.scaled_add(F::one(), g);
    }

    let breakdown = LossBreakdown {
        bce: bce.to_f64_lossy(),
        inv: inv_total.to_f64_lossy(),
        sens: sens_total.to_f64_lossy(),
        total: (bce + lambda1 * inv_total + lambda2 * sens_total).to_f64_lossy(),
    };
    Ok((breakdown, grads))
}

/// Invariance loss for a single pair, forwarding the model itself: returns
/// the loss value and the parameter gradient (both branches).
pub fn loss_inv<F: Float>(
    params: &ModelParams<F>,
    feature: &FeatureConfig,
    tau: &crate::seq::Cdr3,
    pi: &Peptide,
    sampled_minus: &[Peptide],
    stop_gradient_original: bool,
) -> Result<(F, ParamGrads<F>), TrainError> {
    let h_tau = embed_cdr3::<F>(tau, feature)?;
    let x = concat_input(&h_tau, &embed_peptide(pi, feature)?);
    let trace = params.forward(&x)?;
    let mut grads = ParamGrads::zeros(params.dims);
    let edit_traces: Vec<ForwardTrace<F>> = sampled_minus
        .iter()
        .map(|m| {
            let xe = concat_input(&h_tau, &embed_peptide(m, feature)?);
            Ok::<_, TrainError>(params.forward(&xe)?)
        })
        .collect::<Result<_, _>>()?;
    let p_edits: Vec<F> = edit_traces.iter().map(|t| t.p).collect();
    let (value, d_orig, d_edits) = invariance_term(trace.p, &p_edits);
    if !stop_gradient_original {
        let dz = d_orig * trace.p * (F::one() - trace.p);
        params.backward_logit_into(&trace, dz, &mut grads);
    }
    for (t, d) in edit_traces.iter().zip(d_edits) {
        let dz = d * t.p * (F::one() - t.p);
        params.backward_logit_into(t, dz, &mut grads);
    }
    Ok((value, grads))
}

/// Sensitivity loss for a single pair, forwarding the model itself.
pub fn loss_sens<F: Float>(
    params: &ModelParams<F>,
    feature: &FeatureConfig,
    tau: &crate::seq::Cdr3,
    pi: &Peptide,
    sampled_plus: &[Peptide],
    margin: F,
) -> Result<(F, ParamGrads<F>), TrainError> {
    let h_tau = embed_cdr3::<F>(tau, feature)?;
    let x = concat_input(&h_tau, &embed_peptide(pi, feature)?);
    let trace = params.forward(&x)?;
    let mut grads = ParamGrads::zeros(params.dims);
    let edit_traces: Vec<ForwardTrace<F>> = sampled_plus
        .iter()
        .map(|m| {
            let xe = concat_input(&h_tau, &embed_peptide(m, feature)?);
            Ok::<_, TrainError>(params.forward(&xe)?)
        })
        .collect::<Result<_, _>>()?;
    let p_edits: Vec<F> = edit_traces.iter().map(|t| t.p).collect();
    let (value, d_orig, d_edits) = sensitivity_term(trace.p, &p_edits, margin);
    let dz = d_orig * trace.p * (F::one() - trace.p);
    params.backward_logit_into(&trace, dz, &mut grads);
    for (t, d) in edit_traces.iter().zip(d_edits) {
        let dz = d * t.p * (F::one() - t.p);
        params.backward_logit_into(t, dz, &mut grads);
    }
    Ok((value, grads))
}

struct Adam<F: Float> {
    m: ParamGrads<F>,
    v: ParamGrads<F>,
    t: usize,
    lr: F,
    beta1: F,
    beta2: F,
    eps: F,
}

impl<F: Float> Adam<F> {
    fn new(dims: ModelDims, cfg: &TrainConfig) -> Self {
        Self {
            m: ParamGrads::zeros(dims),
            v: ParamGrads::zeros(dims),
            t: 0,
            lr: F::from_f64_lossy(cfg.learning_rate),
            beta1: F::from_f64_lossy(cfg.adam_beta1),
            beta2: F::from_f64_lossy(cfg.adam_beta2),
            eps: F::from_f64_lossy(cfg.adam_epsilon),
        }
    }

    fn update_block(&self, p: &mut [F], g: &[F], m: &mut [F], v: &mut [F], c1: F, c2: F) {
        let one = F::one();
        for i in 0..p.len() {
            m[i] = self.beta1 * m[i] + (one - self.beta1) * g[i];
            v[i] = self.beta2 * v[i] + (one - self.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    fn step(&mut self, params: &mut ModelParams<F>, grads: &ParamGrads<F>) {
        self.t += 1;
        let one = F::one();
        let c1 = one - self.beta1.powi(self.t as i32);
        let c2 = one - self.beta2.powi(self.t as i32);
        // Split borrows: move the moment buffers out during the update.
        let mut m = std::mem::replace(&mut self.m, ParamGrads::zeros(params.dims));
        let mut v = std::mem::replace(&mut self.v, ParamGrads::zeros(params.dims));
        self.update_block(&mut params.w1, &grads.w1, &mut m.w1, &mut v.w1, c1, c2);
        self.update_block(&mut params.b1, &grads.b1, &mut m.b1, &mut v.b1, c1, c2);
        self.update_block(&mut params.w2, &grads.w2, &mut m.w2, &mut v.w2, c1, c2);
        self.update_block(&mut params.b2, &grads.b2, &mut m.b2, &mut v.b2, c1, c2);
        self.update_block(&mut params.w_out, &grads.w_out, &mut m.w_out, &mut v.w_out, c1, c2);
        self.update_block(&mut params.p_res, &grads.p_res, &mut m.p_res, &mut v.p_res, c1, c2);
        let mut b_out = [params.b_out];
        let mut mb = [m.b_out];
        let mut vb = [v.b_out];
        self.update_block(&mut b_out, &[grads.b_out], &mut mb, &mut vb, c1, c2);
        params.b_out = b_out[0];
        m.b_out = mb[0];
        v.b_out = vb[0];
        self.m = m;
        self.v = v;
    }
}

/// One row of the training log (serialized as JSON lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub bce: f64,
    pub inv: f64,
    pub sens: f64,
    pub total: f64,
    pub val_auroc: Option<f64>,
    pub skipped_empty_editsets: usize,
}

/// Write the per-epoch log as JSON lines.
pub fn write_training_log(path: &Path, log: &[EpochLog]) -> std::io::Result<()> {
    let mut out = String::new();
    for row in log {
        out.push_str(&serde_json::to_string(row).expect("log row serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)
}

/// A finished run: the best-validation checkpoint, its epoch, and the log.
#[derive(Debug, Clone)]
pub struct TrainOutcome<F: Float> {
    pub params: ModelParams<F>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub class_weights: ClassWeights,
}

struct PreparedRecord<F: Float> {
    h_tau: Vec<F>,
    x: Vec<F>,
    label: bool,
    peptide: Peptide,
    record_id: u64,
}

fn prepare<F: Float>(
    records: &[&PairRecord],
    feature: &FeatureConfig,
) -> Result<Vec<PreparedRecord<F>>, TrainError> {
    records
        .par_iter()
        .map(|r| {
            let h_tau = embed_cdr3::<F>(&r.cdr3_beta, feature)?;
            let h_pi = embed_peptide::<F>(&r.peptide, feature)?;
            let x = concat_input(&h_tau, &h_pi);
            Ok(PreparedRecord {
                h_tau: h_tau.values,
                x,
                label: r.label,
                peptide: r.peptide.clone(),
                record_id: r.record_id,
            })
        })
        .collect()
}

/// Cache of full edit enumerations, keyed by peptide; enumerations depend
/// only on (peptide, policy, constraints), all fixed for a run.
struct EditCache {
    minus: HashMap<Peptide, Vec<Peptide>>,
    plus: HashMap<Peptide, Vec<Peptide>>,
}

impl EditCache {
    fn new() -> Self {
        Self {
            minus: HashMap::new(),
            plus: HashMap::new(),
        }
    }

    fn members(
        &mut self,
        pi: &Peptide,
        kind: crate::edit::EditKind,
        policy: AnchorPolicy,
        constraints: &EditConstraints,
        matrix: &SubstitutionMatrix,
    ) -> &[Peptide] {
        let map = match kind {
            crate::edit::EditKind::NonAnchor => &mut self.minus,
            crate::edit::EditKind::Anchor => &mut self.plus,
        };
        map.entry(pi.clone()).or_insert_with(|| {
            let scheme = policy.scheme_for_len(pi.len());
            let result = match kind {
                crate::edit::EditKind::NonAnchor => {
                    enumerate_non_anchor(pi, &scheme, constraints, matrix)
                }
                crate::edit::EditKind::Anchor => {
                    enumerate_anchor(pi, &scheme, constraints, matrix)
                }
            };
            result.map(|set| set.members).unwrap_or_default()
        })
    }
}

/// Run the full optimization on the train split of `split`, validating once
/// per epoch on the val split. Returns the checkpoint with the best
/// validation AUROC (ties keep the earlier epoch), stopping early after
/// `patience` epochs without improvement.
pub fn train<F: Float>(
    records: &[PairRecord],
    split: &SplitBundle,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<F>, TrainError> {
    let matrix = SubstitutionMatrix::blosum62();
    let train_records = records_by_ids(records, &split.train_ids);
    let val_records = records_by_ids(records, &split.val_ids);
    if train_records.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let weights = ClassWeights::from_labels(train_records.iter().map(|r| r.label))?;
    let prepared = prepare::<F>(&train_records, &cfg.feature)?;
    let val_prepared = prepare::<F>(&val_records, &cfg.feature)?;
    let val_labels: Vec<bool> = val_prepared.iter().map(|p| p.label).collect();

    let dims = ModelDims {
        input_dim: cfg.feature.input_dim(),
        hidden_dim: cfg.hidden_dim,
    };
    let mut params = ModelParams::<F>::init(derive_seed(cfg.rng_seed, "init"), dims);
    let mut adam = Adam::new(dims, cfg);
    let mut cache = EditCache::new();

    let lambda1 = F::from_f64_lossy(cfg.lambda1);
    let lambda2 = F::from_f64_lossy(cfg.lambda2);
    let margin = F::from_f64_lossy(cfg.margin);
    let use_cf_losses = cfg.preset == Preset::Cip && (cfg.lambda1 > 0.0 || cfg.lambda2 > 0.0);
    let use_edit_aug = cfg.preset == Preset::EditAug;

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ModelParams<F>)> = None;
    let mut epochs_since_best = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut rng_for(cfg.rng_seed, &format!("shuffle:{epoch}")));

        let mut bce_sum = 0.0;
        let mut inv_sum = 0.0;
        let mut sens_sum = 0.0;
        let mut n_examples = 0usize;
        let mut n_pos_seen = 0usize;
        let mut skipped = 0usize;

        for batch_ids in order.chunks(cfg.batch_size) {
            // Owned storage for augmented inputs; borrowed views for the rest.
            let mut aug_inputs: Vec<Vec<F>> = Vec::new();
            let mut pos_edits: Vec<PositiveEdits<F>> = Vec::new();

            for (slot, &idx) in batch_ids.iter().enumerate() {
                let rec = &prepared[idx];
                if !rec.label {
                    continue;
                }
                let edit_seed =
                    derive_seed(cfg.rng_seed, &format!("edits:{epoch}:{}", rec.record_id));
                if use_cf_losses {
                    let minus_members = cache
                        .members(
                            &rec.peptide,
                            crate::edit::EditKind::NonAnchor,
                            cfg.anchor_policy,
                            &cfg.constraints,
                            matrix,
                        )
                        .to_vec();
                    let plus_members = cache
                        .members(
                            &rec.peptide,
                            crate::edit::EditKind::Anchor,
                            cfg.anchor_policy,
                            &cfg.constraints,
                            matrix,
                        )
                        .to_vec();
                    let minus =
                        sample_from_members(&minus_members, cfg.edits_per_positive, edit_seed);
                    let plus = sample_from_members(
                        &plus_members,
                        cfg.edits_per_positive,
                        derive_seed(edit_seed, "plus"),
                    );
                    if minus.is_empty() || plus.is_empty() {
                        skipped += 1;
                    }
                    let embed = |peps: &[Peptide]| -> Result<Vec<Vec<F>>, TrainError> {
                        peps.iter()
                            .map(|m| {
                                let h_pi = embed_peptide::<F>(m, &cfg.feature)?;
                                Ok(concat_vec(&rec.h_tau, &h_pi.values))
                            })
                            .collect()
                    };
                    pos_edits.push(PositiveEdits {
                        example_idx: slot,
                        minus: embed(&minus)?,
                        plus: embed(&plus)?,
                    });
                } else if use_edit_aug {
                    let minus_members = cache
                        .members(
                            &rec.peptide,
                            crate::edit::EditKind::NonAnchor,
                            cfg.anchor_policy,
                            &cfg.constraints,
                            matrix,
                        )
                        .to_vec();
                    let minus =
                        sample_from_members(&minus_members, cfg.edits_per_positive, edit_seed);
                    if minus.is_empty() {
                        skipped += 1;
                    }
                    for m in &minus {
                        let h_pi = embed_peptide::<F>(m, &cfg.feature)?;
                        aug_inputs.push(concat_vec(&rec.h_tau, &h_pi.values));
                    }
                }
            }

            let mut examples: Vec<BatchInput<'_, F>> = batch_ids
                .iter()
                .map(|&idx| BatchInput {
                    x: &prepared[idx].x,
                    label: prepared[idx].label,
                })
                .collect();
            for x in &aug_inputs {
                examples.push(BatchInput { x, label: false });
            }

            let (breakdown, grads) = cip_batch_loss_and_grads(
                &params,
                &examples,
                &pos_edits,
                &weights,
                lambda1,
                lambda2,
                margin,
                cfg.stop_gradient_original,
            )?;
            if !breakdown.total.is_finite() || !grads.is_finite() {
                return Err(TrainError::DivergenceDetected { epoch });
            }
            adam.step(&mut params, &grads);

            let batch_pos = examples.iter().filter(|e| e.label).count();
            bce_sum += breakdown.bce * examples.len() as f64;
            inv_sum += breakdown.inv * batch_pos as f64;
            sens_sum += breakdown.sens * batch_pos as f64;
            n_examples += examples.len();
            n_pos_seen += batch_pos;
        }

        let bce = bce_sum / n_examples.max(1) as f64;
        let inv = inv_sum / n_pos_seen.max(1) as f64;
        let sens = sens_sum / n_pos_seen.max(1) as f64;
        let val_auroc = validation_auroc(&params, &val_prepared, &val_labels);
        log.push(EpochLog {
            epoch,
            bce,
            inv,
            sens,
            total: bce + cfg.lambda1 * inv + cfg.lambda2 * sens,
            val_auroc,
            skipped_empty_editsets: skipped,
        });

        match (val_auroc, &best) {
            (Some(score), Some((best_score, _, _))) if score > *best_score => {
                best = Some((score, epoch, params.clone()));
                epochs_since_best = 0;
            }
            (Some(score), None) => {
                best = Some((score, epoch, params.clone()));
                epochs_since_best = 0;
            }
            _ => {
                epochs_since_best += 1;
                if epochs_since_best >= cfg.patience {
                    break;
                }
            }
        }
    }

    let (best_epoch, final_params) = match best {
        Some((_, epoch, p)) => (epoch, p),
        None => (log.len().saturating_sub(1), params),
    };
    Ok(TrainOutcome {
        params: final_params,
        log,
        best_epoch,
        class_weights: weights,
    })
}

fn concat_vec<F: Float>(a: &[F], b: &[F]) -> Vec<F> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out
}

fn validation_auroc<F: Float>(
    params: &ModelParams<F>,
    val: &[PreparedRecord<F>],
    labels: &[bool],
) -> Option<f64> {
    if val.is_empty() {
        return None;
    }
    let preds: Vec<f64> = val
        .par_iter()
        .map(|r| params.forward(&r.x).map(|t| t.p.to_f64_lossy()))
        .collect::<Result<_, _>>()
        .ok()?;
    crate::metrics::auroc(&preds, labels).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::split_random;
    use crate::edit::EditKind;
    use crate::seq::{parse_peptide, Cdr3};
    use rand::Rng as _;

    #[test]
    fn class_weight_formula() {
        let labels = (0..100).map(|i| i < 20);
        let w = ClassWeights::from_labels(labels).unwrap();
        assert_eq!(w.w_plus, 2.5);
        assert_eq!(w.w_minus, 0.625);
        assert_eq!((w.n, w.n_plus, w.n_minus), (100, 20, 80));
        assert!(ClassWeights::from_labels([true, true]).is_err());
    }

    #[test]
    fn bce_closed_forms() {
        let w = ClassWeights::uniform();
        // Single example, y = 1, p = 0.5 (z = 0): loss = ln 2.
        let (loss, _) = loss_bce::<f64>(&[(0.0, 0.5)], &[true], &w);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-9);
        // Confident and correct on both classes: loss below 1e-6 at |z| > 20.
        let z = 21.0;
        let p = 1.0 / (1.0 + (-z as f64).exp());
        let (loss, _) = loss_bce::<f64>(&[(z, p), (-z, 1.0 - p)], &[true, false], &w);
        assert!(loss < 1e-6);
        // Weighted single negative at p = 0.5: w_minus * ln 2.
        let w = ClassWeights::from_labels((0..100).map(|i| i < 20)).unwrap();
        let (loss, _) = loss_bce::<f64>(&[(0.0, 0.5)], &[false], &w);
        assert!((loss - 0.625 * std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn bce_gradient_is_stable_logit_form() {
        let w = ClassWeights::uniform();
        let (_, dz) = loss_bce::<f64>(&[(0.0, 0.5)], &[true], &w);
        assert_eq!(dz, vec![-0.5]); // (p - 1) / 1
        // Extreme logits stay finite.
        let (loss, dz) = loss_bce::<f64>(&[(800.0, 1.0)], &[false], &w);
        assert!(loss.is_finite() && dz[0].is_finite());
    }

    #[test]
    fn invariance_term_examples() {
        let (v, _, _) = invariance_term(0.9, &[0.4]);
        assert!((v - 0.25f64).abs() < 1e-15);
        let (v, d0, de) = invariance_term(0.7, &[0.7, 0.7]);
        assert_eq!(v, 0.0);
        assert_eq!(d0, 0.0);
        assert!(de.iter().all(|&d| d == 0.0));
        let (v, _, _) = invariance_term::<f64>(0.5, &[]);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn sensitivity_term_examples() {
        // Drop of 0.5 with margin 0.3: hinge satisfied.
        let (v, d0, de) = sensitivity_term(0.9, &[0.4], 0.3);
        assert_eq!(v, 0.0);
        assert_eq!(d0, 0.0);
        assert_eq!(de, vec![0.0]);
        // Drop of 0.1: hinge value 0.2, active gradient.
        let (v, d0, de) = sensitivity_term(0.6, &[0.5], 0.3);
        assert!((v - 0.2f64).abs() < 1e-15);
        assert_eq!(d0, -1.0);
        assert_eq!(de, vec![1.0]);
        // Drop of exactly the margin: value 0 and zero gradient (kink).
        let (v, d0, de) = sensitivity_term(0.8, &[0.5], 0.3);
        assert_eq!(v, 0.0);
        assert_eq!(d0, 0.0);
        assert_eq!(de, vec![0.0]);
    }

    #[test]
    fn losses_are_nonnegative() {
        let mut rng = crate::seed::rng_for(5, "nonneg");
        for _ in 0..200 {
            let p0: f64 = rng.gen_range(0.0..1.0);
            let pe: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
            assert!(invariance_term(p0, &pe).0 >= 0.0);
            assert!(sensitivity_term(p0, &pe, 0.3).0 >= 0.0);
        }
    }

    fn tiny_feature() -> FeatureConfig {
        FeatureConfig {
            kmer_size: 2,
            hash_dim: 16,
            include_position_onehot: true,
        }
    }

    fn synth_records(n: usize) -> Vec<PairRecord> {
        // Tiny handmade corpus; peptides chosen so edit sets are non-empty.
        let peptides = [
            "GILGFVFTL", "NLVPMVATV", "GLCTLVAML", "ELAGIGILTV", "LLFGYPVYV", "YLEPGPVTA",
        ];
        let betas = [
            "CASSLGQAYEQYF",
            "CASSIRSSYEQYF",
            "CAWSVSDLAKNIQYF",
            "CASSPGQGAYEQYF",
            "CASSYSTGDEQYF",
            "CASRPGLAGGRPEQYF",
        ];
        (0..n as u64)
            .map(|i| PairRecord {
                record_id: i,
                cdr3_alpha: Cdr3::parse("CAVSDLEPNSSASKIIF").unwrap(),
                cdr3_beta: Cdr3::parse(betas[(i as usize) % betas.len()]).unwrap(),
                v_gene_family: format!("TRBV{}", i % 4),
                peptide: parse_peptide(peptides[(i as usize * 7) % peptides.len()]).unwrap(),
                mhc_allele: crate::dataset::DEFAULT_MHC_ALLELE.to_string(),
                label: i % 5 == 0,
            })
            .collect()
    }

    fn quick_config(preset: Preset, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::preset(preset, seed);
        cfg.feature = tiny_feature();
        cfg.hidden_dim = 8;
        cfg.batch_size = 16;
        cfg.epochs = 2;
        cfg.patience = 5;
        cfg
    }

    #[test]
    fn baseline_preset_logs_zero_auxiliary_losses() {
        let records = synth_records(60);
        let split = split_random(&records, (0.70, 0.10, 0.20), 1).unwrap();
        let out = train::<f64>(&records, &split, &quick_config(Preset::Baseline, 1)).unwrap();
        assert!(out.log.iter().all(|e| e.inv == 0.0 && e.sens == 0.0));
    }

    #[test]
    fn cip_preset_records_nonzero_auxiliary_losses() {
        let records = synth_records(60);
        let split = split_random(&records, (0.70, 0.10, 0.20), 1).unwrap();
        let out = train::<f64>(&records, &split, &quick_config(Preset::Cip, 1)).unwrap();
        // After init the model is near-constant, so inv is tiny but sens
        // (margin hinge) must be active.
        assert!(out.log.iter().any(|e| e.sens > 0.0));
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let records = synth_records(60);
        let split = split_random(&records, (0.70, 0.10, 0.20), 1).unwrap();
        let a = train::<f64>(&records, &split, &quick_config(Preset::Cip, 9)).unwrap();
        let b = train::<f64>(&records, &split, &quick_config(Preset::Cip, 9)).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log, b.log);
        let c = train::<f64>(&records, &split, &quick_config(Preset::Cip, 10)).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn editaug_appends_extra_negatives() {
        // Observable through the batch machinery: an EditAug run must see
        // more examples per epoch than the raw train split size.
        let records = synth_records(60);
        let split = split_random(&records, (0.70, 0.10, 0.20), 1).unwrap();
        let base = train::<f64>(&records, &split, &quick_config(Preset::Baseline, 2)).unwrap();
        let aug = train::<f64>(&records, &split, &quick_config(Preset::EditAug, 2)).unwrap();
        // Same seed, same shuffles; the augmented run must diverge because the
        // batches contain extra label-0 examples.
        assert_ne!(base.params, aug.params);
        assert!(aug.log.iter().all(|e| e.inv == 0.0 && e.sens == 0.0));
    }

    #[test]
    fn lambda_zero_total_is_bce_bit_exact() {
        let records = synth_records(40);
        let prepared = prepare::<f64>(&records.iter().collect::<Vec<_>>(), &tiny_feature()).unwrap();
        let params = ModelParams::<f64>::init(
            3,
            ModelDims {
                input_dim: tiny_feature().input_dim(),
                hidden_dim: 8,
            },
        );
        let weights = ClassWeights::from_labels(records.iter().map(|r| r.label)).unwrap();
        let examples: Vec<BatchInput<'_, f64>> = prepared
            .iter()
            .map(|p| BatchInput {
                x: &p.x,
                label: p.label,
            })
            .collect();
        let (with_zero, g0) = cip_batch_loss_and_grads(
            &params, &examples, &[], &weights, 0.0, 0.0, 0.3, false,
        )
        .unwrap();
        let preds: Vec<(f64, f64)> = examples
            .iter()
            .map(|e| {
                let t = params.forward(e.x).unwrap();
                (t.z, t.p)
            })
            .collect();
        let labels: Vec<bool> = examples.iter().map(|e| e.label).collect();
        let (bce_only, _) = loss_bce(&preds, &labels, &weights);
        assert_eq!(with_zero.total, bce_only);
        assert_eq!(with_zero.bce, bce_only);
        assert_eq!(with_zero.inv, 0.0);
        assert_eq!(with_zero.sens, 0.0);
        assert!(g0.is_finite());
    }

    #[test]
    fn pair_loss_zero_when_model_ignores_peptide() {
        // Zero out every weight column that reads the peptide block; then
        // p(tau, pi) == p(tau, pi_minus) and the invariance loss vanishes.
        let feature = tiny_feature();
        let dims = ModelDims {
            input_dim: feature.input_dim(),
            hidden_dim: 8,
        };
        let mut params = ModelParams::<f64>::init(11, dims);
        let cdr3_dim = feature.cdr3_dim();
        for row in 0..dims.hidden_dim {
            for col in cdr3_dim..dims.input_dim {
                params.w1[row * dims.input_dim + col] = 0.0;
                params.p_res[row * dims.input_dim + col] = 0.0;
            }
        }
        let tau = Cdr3::parse("CASSLGQAYEQYF").unwrap();
        let pi = parse_peptide("GILGFVFTL").unwrap();
        let scheme = crate::edit::AnchorScheme::hla_a0201(9);
        let edits = crate::edit::sample_edits(
            &pi,
            EditKind::NonAnchor,
            &scheme,
            &EditConstraints::default(),
            SubstitutionMatrix::blosum62(),
            3,
            5,
        );
        let (value, grads) = loss_inv(&params, &feature, &tau, &pi, &edits, false).unwrap();
        assert_eq!(value, 0.0);
        assert!(grads.is_finite());
    }

    /// Finite-difference check of the full batch objective over every
    /// parameter block, away from ReLU and hinge kinks.
    #[test]
    fn total_gradient_matches_finite_differences() {
        let feature = tiny_feature();
        let dims = ModelDims {
            input_dim: feature.input_dim(),
            hidden_dim: 4,
        };
        let weights = ClassWeights {
            w_plus: 2.0,
            w_minus: 0.8,
            n: 10,
            n_plus: 3,
            n_minus: 7,
        };
        let records = synth_records(9);
        let prepared = prepare::<f64>(&records.iter().collect::<Vec<_>>(), &feature).unwrap();
        let mut checked = 0;
        'outer: for trial in 0..40u64 {
            let params = {
                let mut p = ModelParams::<f64>::init(200 + trial, dims);
                let mut rng = crate::seed::rng_for(300 + trial, "bias");
                for b in p.b1.iter_mut().chain(p.b2.iter_mut()) {
                    *b = rng.gen_range(-0.2..0.2);
                }
                p
            };
            let examples: Vec<BatchInput<'_, f64>> = prepared
                .iter()
                .take(3 + (trial % 3) as usize)
                .map(|p| BatchInput {
                    x: &p.x,
                    label: p.label,
                })
                .collect();
            let matrix = SubstitutionMatrix::blosum62();
            let mut pos_edits = Vec::new();
            for (i, e) in examples.iter().enumerate() {
                if !e.label {
                    continue;
                }
                let rec = &prepared[i];
                let scheme = AnchorPolicy::PTwoOmega.scheme_for_len(rec.peptide.len());
                let minus = crate::edit::sample_edits(
                    &rec.peptide,
                    EditKind::NonAnchor,
                    &scheme,
                    &EditConstraints::default(),
                    matrix,
                    2,
                    trial,
                );
                let plus = crate::edit::sample_edits(
                    &rec.peptide,
                    EditKind::Anchor,
                    &scheme,
                    &EditConstraints::default(),
                    matrix,
                    2,
                    trial + 1,
                );
                let embed = |peps: &[Peptide]| -> Vec<Vec<f64>> {
                    peps.iter()
                        .map(|m| {
                            let h_pi = embed_peptide::<f64>(m, &feature).unwrap();
                            concat_vec(&rec.h_tau, &h_pi.values)
                        })
                        .collect()
                };
                pos_edits.push(PositiveEdits {
                    example_idx: i,
                    minus: embed(&minus),
                    plus: embed(&plus),
                });
            }
            let loss_of = |p: &ModelParams<f64>| -> f64 {
                cip_batch_loss_and_grads(p, &examples, &pos_edits, &weights, 0.4, 0.2, 0.3, false)
                    .unwrap()
                    .0
                    .total
            };
            // Kink avoidance: skip trials where any pre-activation or hinge
            // slack sits near zero.
            for e in &examples {
                let t = params.forward(e.x).unwrap();
                if t.a1.iter().chain(&t.a2).any(|a| a.abs() < 1e-3) {
                    continue 'outer;
                }
            }
            for pe in &pos_edits {
                let p_orig = params.forward(examples[pe.example_idx].x).unwrap().p;
                for x in pe.minus.iter().chain(&pe.plus) {
                    let t = params.forward(x).unwrap();
                    if t.a1.iter().chain(&t.a2).any(|a| a.abs() < 1e-3) {
                        continue 'outer;
                    }
                    if (0.3 - (p_orig - t.p)).abs() < 1e-3 {
                        continue 'outer;
                    }
                }
            }

            let (_, grads) = cip_batch_loss_and_grads(
                &params, &examples, &pos_edits, &weights, 0.4, 0.2, 0.3, false,
            )
            .unwrap();
            fn slot(p: &mut ModelParams<f64>, block: usize, idx: usize, dims: ModelDims) -> &mut f64 {
                match block {
                    0 => &mut p.w1[idx],
                    1 => &mut p.b1[idx % dims.hidden_dim],
                    2 => &mut p.w2[idx % (dims.hidden_dim * dims.hidden_dim)],
                    3 => &mut p.b2[idx % dims.hidden_dim],
                    4 => &mut p.w_out[idx % dims.hidden_dim],
                    5 => &mut p.p_res[idx],
                    _ => &mut p.b_out,
                }
            }
            let mut rng = crate::seed::rng_for(trial, "probe");
            let h = 1e-5;
            // Probe a random subset of coordinates in each block.
            for _ in 0..6 {
                let block = rng.gen_range(0..7);
                let idx = rng.gen_range(0..dims.input_dim * dims.hidden_dim);
                let analytic = match block {
                    0 => grads.w1[idx],
                    1 => grads.b1[idx % dims.hidden_dim],
                    2 => grads.w2[idx % (dims.hidden_dim * dims.hidden_dim)],
                    3 => grads.b2[idx % dims.hidden_dim],
                    4 => grads.w_out[idx % dims.hidden_dim],
                    5 => grads.p_res[idx],
                    _ => grads.b_out,
                };
                let mut plus = params.clone();
                *slot(&mut plus, block, idx, dims) += h;
                let mut minus = params.clone();
                *slot(&mut minus, block, idx, dims) -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let denom = analytic.abs().max(fd.abs()).max(1e-8);
                assert!(
                    (analytic - fd).abs() / denom < 1e-4,
                    "block {block}: analytic {analytic} vs fd {fd}"
                );
            }
            checked += 1;
        }
        assert!(checked >= 10, "only {checked} kink-free trials");
    }

    #[test]
    fn one_small_step_decreases_loss() {
        // Descent sanity: a tiny gradient step lowers the objective on a
        // fixed micro-batch; over 20 seeds allow one failure.
        let feature = tiny_feature();
        let dims = ModelDims {
            input_dim: feature.input_dim(),
            hidden_dim: 6,
        };
        let records = synth_records(12);
        let prepared = prepare::<f64>(&records.iter().collect::<Vec<_>>(), &feature).unwrap();
        let weights = ClassWeights::from_labels(records.iter().map(|r| r.label)).unwrap();
        let examples: Vec<BatchInput<'_, f64>> = prepared
            .iter()
            .map(|p| BatchInput {
                x: &p.x,
                label: p.label,
            })
            .collect();
        let mut failures = 0;
        for seed in 0..20u64 {
            let mut params = ModelParams::<f64>::init(seed, dims);
            let (before, grads) = cip_batch_loss_and_grads(
                &params, &examples, &[], &weights, 0.0, 0.0, 0.3, false,
            )
            .unwrap();
            params.scaled_add(-1e-4, &grads);
            let (after, _) = cip_batch_loss_and_grads(
                &params, &examples, &[], &weights, 0.0, 0.0, 0.3, false,
            )
            .unwrap();
            if after.total >= before.total {
                failures += 1;
            }
        }
        assert!(failures <= 1, "{failures} non-decreasing steps out of 20");
    }

    #[test]
    fn ablation_matrix_has_six_rows() {
        let base = TrainConfig::preset(Preset::Cip, 1);
        let matrix = ablation_matrix(&base);
        assert_eq!(matrix.len(), 6);
        let by_name: HashMap<&str, &TrainConfig> =
            matrix.iter().map(|(n, c)| (n.as_str(), c)).collect();
        assert_eq!(by_name["cip_full"].lambda1, 0.4);
        assert_eq!(by_name["cip_full"].lambda2, 0.2);
        assert_eq!(by_name["no_sens"].lambda2, 0.0);
        assert_eq!(by_name["no_sens"].lambda1, 0.4);
        assert_eq!(by_name["no_inv"].lambda1, 0.0);
        assert_eq!(by_name["no_anchor_masking"].anchor_policy, AnchorPolicy::Unmasked);
        assert_eq!(by_name["no_blosum_constraint"].constraints.blosum_min, None);
        assert_eq!(by_name["baseline"].preset, Preset::Baseline);
    }

    #[test]
    fn sweep_grid_covers_all_combinations() {
        let base = TrainConfig::preset(Preset::Cip, 1);
        let grid = sweep_grid(&base);
        assert_eq!(grid.len(), 4 * 4 * 3);
        assert!(grid.iter().any(|c| c.lambda1 == 0.8
            && c.lambda2 == 0.05
            && c.constraints.max_hamming == 3));
    }

    #[test]
    fn divergence_is_detected() {
        let records = synth_records(40);
        let split = split_random(&records, (0.70, 0.10, 0.20), 1).unwrap();
        let mut cfg = quick_config(Preset::Baseline, 1);
        cfg.learning_rate = f64::INFINITY;
        match train::<f64>(&records, &split, &cfg) {
            Err(TrainError::DivergenceDetected { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn training_log_jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let log = vec![
            EpochLog {
                epoch: 0,
                bce: 0.7,
                inv: 0.01,
                sens: 0.2,
                total: 0.754,
                val_auroc: Some(0.61),
                skipped_empty_editsets: 2,
            },
            EpochLog {
                epoch: 1,
                bce: 0.6,
                inv: 0.008,
                sens: 0.15,
                total: 0.6332,
                val_auroc: None,
                skipped_empty_editsets: 0,
            },
        ];
        write_training_log(&path, &log).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let parsed: Vec<EpochLog> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(parsed, log);
    }
}
