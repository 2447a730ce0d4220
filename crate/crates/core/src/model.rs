//! The binding scorer: a two-layer MLP with a learned residual projection
//! and sigmoid output, with exact analytic gradients for every parameter
//! and for the input vector.
//!
//! Forward pass for input `x` (concatenated CDR3 and peptide embeddings):
//!
//! ```text
//! h1 = relu(W1 x + b1)
//! h2 = relu(W2 h1 + b2) + P_res x
//! z  = w_out . h2 + b_out
//! p  = sigmoid(z)
//! ```
//!
//! The residual is a learned linear projection because the input and hidden
//! widths differ. Both the logit `z` and the probability `p` are exposed:
//! losses that need numerical stability work in logit space, the
//! counterfactual losses work on `p` directly.

use std::path::Path;

use rand::Rng as _;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurize::FeatureConfig;
use crate::Float;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("incompatible model file: {0}")]
    VersionMismatch(String),
    #[error("corrupt model file: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Width configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
}

/// All trainable weights. Matrices are row-major `hidden x cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F: Float> {
    pub dims: ModelDims,
    pub w1: Vec<F>,
    pub b1: Vec<F>,
    pub w2: Vec<F>,
    pub b2: Vec<F>,
    pub w_out: Vec<F>,
    pub b_out: F,
    pub p_res: Vec<F>,
}

/// Gradient (or moment) accumulator with the same shape as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<F: Float> {
    pub w1: Vec<F>,
    pub b1: Vec<F>,
    pub w2: Vec<F>,
    pub b2: Vec<F>,
    pub w_out: Vec<F>,
    pub b_out: F,
    pub p_res: Vec<F>,
}

impl<F: Float> ParamGrads<F> {
    pub fn zeros(dims: ModelDims) -> Self {
        let ModelDims {
            input_dim,
            hidden_dim,
        } = dims;
        Self {
            w1: vec![F::zero(); hidden_dim * input_dim],
            b1: vec![F::zero(); hidden_dim],
            w2: vec![F::zero(); hidden_dim * hidden_dim],
            b2: vec![F::zero(); hidden_dim],
            w_out: vec![F::zero(); hidden_dim],
            b_out: F::zero(),
            p_res: vec![F::zero(); hidden_dim * input_dim],
        }
    }

    /// `self += alpha * other`, block by block in a fixed order.
    pub fn scaled_add(&mut self, alpha: F, other: &Self) {
        for (dst, src) in [
            (&mut self.w1, &other.w1),
            (&mut self.b1, &other.b1),
            (&mut self.w2, &other.w2),
            (&mut self.b2, &other.b2),
            (&mut self.w_out, &other.w_out),
            (&mut self.p_res, &other.p_res),
        ] {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
        self.b_out += alpha * other.b_out;
    }

    pub fn scale(&mut self, alpha: F) {
        for block in [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w_out,
            &mut self.p_res,
        ] {
            for v in block.iter_mut() {
                *v *= alpha;
            }
        }
        self.b_out *= alpha;
    }

    pub fn is_finite(&self) -> bool {
        self.iter_all().all(|v| v.is_finite())
    }

    fn iter_all(&self) -> impl Iterator<Item = F> + '_ {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .chain(&self.w_out)
            .chain(&self.p_res)
            .copied()
            .chain(std::iter::once(self.b_out))
    }
}

/// Cached activations from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<F: Float> {
    pub x: Vec<F>,
    pub a1: Vec<F>,
    pub h1: Vec<F>,
    pub a2: Vec<F>,
    pub h2: Vec<F>,
    pub z: F,
    pub p: F,
}

fn sigmoid<F: Float>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

impl<F: Float> ModelParams<F> {
    /// LeCun-uniform initialization: weights uniform on
    /// `[-sqrt(3/fan_in), sqrt(3/fan_in)]`, biases zero. Deterministic per seed.
    pub fn init(rng_seed: u64, dims: ModelDims) -> Self {
        let mut rng = crate::seed::Rng::seed_from_u64(rng_seed);
        let ModelDims {
            input_dim,
            hidden_dim,
        } = dims;
        let mut draw = |n: usize, fan_in: usize| -> Vec<F> {
            let bound = (3.0 / fan_in as f64).sqrt();
            (0..n)
                .map(|_| F::from_f64_lossy(rng.gen_range(-bound..=bound)))
                .collect()
        };
        let w1 = draw(hidden_dim * input_dim, input_dim);
        let w2 = draw(hidden_dim * hidden_dim, hidden_dim);
        let w_out = draw(hidden_dim, hidden_dim);
        let p_res = draw(hidden_dim * input_dim, input_dim);
        Self {
            dims,
            w1,
            b1: vec![F::zero(); hidden_dim],
            w2,
            b2: vec![F::zero(); hidden_dim],
            w_out,
            b_out: F::zero(),
            p_res,
        }
    }

    pub fn forward(&self, x: &[F]) -> Result<ForwardTrace<F>, ModelError> {
        let ModelDims {
            input_dim,
            hidden_dim,
        } = self.dims;
        if x.len() != input_dim {
            return Err(ModelError::DimensionMismatch {
                expected: input_dim,
                got: x.len(),
            });
        }
        let mut a1 = vec![F::zero(); hidden_dim];
        for i in 0..hidden_dim {
            let row = &self.w1[i * input_dim..(i + 1) * input_dim];
            let mut acc = self.b1[i];
            for (w, xv) in row.iter().zip(x) {
                acc += *w * *xv;
            }
            a1[i] = acc;
        }
        let h1: Vec<F> = a1.iter().map(|&v| v.max(F::zero())).collect();
        let mut a2 = vec![F::zero(); hidden_dim];
        for i in 0..hidden_dim {
            let row = &self.w2[i * hidden_dim..(i + 1) * hidden_dim];
            let mut acc = self.b2[i];
            for (w, hv) in row.iter().zip(&h1) {
                acc += *w * *hv;
            }
            a2[i] = acc;
        }
        let mut h2 = vec![F::zero(); hidden_dim];
        for i in 0..hidden_dim {
            let row = &self.p_res[i * input_dim..(i + 1) * input_dim];
            let mut res = F::zero();
            for (w, xv) in row.iter().zip(x) {
                res += *w * *xv;
            }
            h2[i] = a2[i].max(F::zero()) + res;
        }
        let mut z = self.b_out;
        for (w, hv) in self.w_out.iter().zip(&h2) {
            z += *w * *hv;
        }
        let p = sigmoid(z);
        Ok(ForwardTrace {
            x: x.to_vec(),
            a1,
            h1,
            a2,
            h2,
            z,
            p,
        })
    }

    /// Backpropagate from an upstream gradient with respect to the logit,
    /// accumulating into `grads`. Returns nothing; use [`Self::backward`]
    /// when the input gradient is needed.
    pub fn backward_logit_into(&self, trace: &ForwardTrace<F>, dz: F, grads: &mut ParamGrads<F>) {
        self.backward_core(trace, dz, grads, None);
    }

    /// Backpropagate from `d loss / d p_hat`. Returns parameter gradients and
    /// the gradient with respect to the input vector.
    pub fn backward(&self, trace: &ForwardTrace<F>, upstream_dp: F) -> (ParamGrads<F>, Vec<F>) {
        let dz = upstream_dp * trace.p * (F::one() - trace.p);
        let mut grads = ParamGrads::zeros(self.dims);
        let mut dx = vec![F::zero(); self.dims.input_dim];
        self.backward_core(trace, dz, &mut grads, Some(&mut dx));
        (grads, dx)
    }

    fn backward_core(
        &self,
        trace: &ForwardTrace<F>,
        dz: F,
        grads: &mut ParamGrads<F>,
        mut dx: Option<&mut Vec<F>>,
    ) {
        let ModelDims {
            input_dim,
            hidden_dim,
        } = self.dims;
        grads.b_out += dz;
        let mut da2 = vec![F::zero(); hidden_dim];
        for i in 0..hidden_dim {
            let dh2 = dz * self.w_out[i];
            grads.w_out[i] += dz * trace.h2[i];
            // Residual path: d h2 / d P_res[i][l] = x[l].
            let row = &mut grads.p_res[i * input_dim..(i + 1) * input_dim];
            for (g, &xv) in row.iter_mut().zip(&trace.x) {
                *g += dh2 * xv;
            }
            if let Some(dx) = dx.as_deref_mut() {
                let prow = &self.p_res[i * input_dim..(i + 1) * input_dim];
                for (d, &w) in dx.iter_mut().zip(prow) {
                    *d += dh2 * w;
                }
            }
            da2[i] = if trace.a2[i] > F::zero() { dh2 } else { F::zero() };
        }
        let mut dh1 = vec![F::zero(); hidden_dim];
        for i in 0..hidden_dim {
            if da2[i] == F::zero() {
                continue;
            }
            let row = &mut grads.w2[i * hidden_dim..(i + 1) * hidden_dim];
            for (g, &hv) in row.iter_mut().zip(&trace.h1) {
                *g += da2[i] * hv;
            }
            grads.b2[i] += da2[i];
            let wrow = &self.w2[i * hidden_dim..(i + 1) * hidden_dim];
            for (d, &w) in dh1.iter_mut().zip(wrow) {
                *d += da2[i] * w;
            }
        }
        for j in 0..hidden_dim {
            let da1 = if trace.a1[j] > F::zero() { dh1[j] } else { F::zero() };
            if da1 == F::zero() {
                continue;
            }
            let row = &mut grads.w1[j * input_dim..(j + 1) * input_dim];
            for (g, &xv) in row.iter_mut().zip(&trace.x) {
                *g += da1 * xv;
            }
            grads.b1[j] += da1;
            if let Some(dx) = dx.as_deref_mut() {
                let wrow = &self.w1[j * input_dim..(j + 1) * input_dim];
                for (d, &w) in dx.iter_mut().zip(wrow) {
                    *d += da1 * w;
                }
            }
        }
    }

    /// `self += alpha * grads` (plain SGD step building block; Adam lives in
    /// the trainer).
    pub fn scaled_add(&mut self, alpha: F, grads: &ParamGrads<F>) {
        for (dst, src) in [
            (&mut self.w1, &grads.w1),
            (&mut self.b1, &grads.b1),
            (&mut self.w2, &grads.w2),
            (&mut self.b2, &grads.b2),
            (&mut self.w_out, &grads.w_out),
            (&mut self.p_res, &grads.p_res),
        ] {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
        self.b_out += alpha * grads.b_out;
    }
}

const SCHEMA_VERSION: u32 = 1;

/// A trained model together with everything needed to reuse it: the
/// featurizer configuration (and its fingerprint) and the training seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact<F: Float> {
    pub params: ModelParams<F>,
    pub feature_config: FeatureConfig,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ModelContainer {
    schema_version: u32,
    feature_config: FeatureConfig,
    featurizer_fingerprint: String,
    seed: u64,
    input_dim: usize,
    hidden_dim: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    w_out: Vec<f64>,
    b_out: f64,
    p_res: Vec<f64>,
}

impl<F: Float> ModelArtifact<F> {
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let p = &self.params;
        let to64 = |v: &[F]| v.iter().map(|x| x.to_f64_lossy()).collect::<Vec<f64>>();
        let container = ModelContainer {
            schema_version: SCHEMA_VERSION,
            feature_config: self.feature_config.clone(),
            featurizer_fingerprint: self.feature_config.fingerprint(),
            seed: self.seed,
            input_dim: p.dims.input_dim,
            hidden_dim: p.dims.hidden_dim,
            w1: to64(&p.w1),
            b1: to64(&p.b1),
            w2: to64(&p.w2),
            b2: to64(&p.b2),
            w_out: to64(&p.w_out),
            b_out: p.b_out.to_f64_lossy(),
            p_res: to64(&p.p_res),
        };
        let json = serde_json::to_string(&container)
            .map_err(|e| ModelError::CorruptFile(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)?;
        let c: ModelContainer =
            serde_json::from_str(&text).map_err(|e| ModelError::CorruptFile(e.to_string()))?;
        if c.schema_version != SCHEMA_VERSION {
            return Err(ModelError::VersionMismatch(format!(
                "schema version {} (supported: {SCHEMA_VERSION})",
                c.schema_version
            )));
        }
        if c.feature_config.fingerprint() != c.featurizer_fingerprint {
            return Err(ModelError::VersionMismatch(format!(
                "stored fingerprint {} does not match stored feature config ({})",
                c.featurizer_fingerprint,
                c.feature_config.fingerprint()
            )));
        }
        let dims = ModelDims {
            input_dim: c.input_dim,
            hidden_dim: c.hidden_dim,
        };
        let expect = |name: &str, got: usize, want: usize| -> Result<(), ModelError> {
            if got != want {
                return Err(ModelError::CorruptFile(format!(
                    "block {name} has {got} entries, expected {want}"
                )));
            }
            Ok(())
        };
        expect("w1", c.w1.len(), dims.hidden_dim * dims.input_dim)?;
        expect("b1", c.b1.len(), dims.hidden_dim)?;
        expect("w2", c.w2.len(), dims.hidden_dim * dims.hidden_dim)?;
        expect("b2", c.b2.len(), dims.hidden_dim)?;
        expect("w_out", c.w_out.len(), dims.hidden_dim)?;
        expect("p_res", c.p_res.len(), dims.hidden_dim * dims.input_dim)?;
        let from64 = |v: Vec<f64>| v.into_iter().map(F::from_f64_lossy).collect::<Vec<F>>();
        Ok(Self {
            params: ModelParams {
                dims,
                w1: from64(c.w1),
                b1: from64(c.b1),
                w2: from64(c.w2),
                b2: from64(c.b2),
                w_out: from64(c.w_out),
                b_out: F::from_f64_lossy(c.b_out),
                p_res: from64(c.p_res),
            },
            feature_config: c.feature_config,
            seed: c.seed,
        })
    }

    /// Load and verify the file was produced with the expected featurizer.
    pub fn load_checked(path: &Path, expected: &FeatureConfig) -> Result<Self, ModelError> {
        let artifact = Self::load(path)?;
        if artifact.feature_config.fingerprint() != expected.fingerprint() {
            return Err(ModelError::VersionMismatch(format!(
                "model was trained with featurizer {}, caller expects {}",
                artifact.feature_config.fingerprint(),
                expected.fingerprint()
            )));
        }
        Ok(artifact)
    }
}
