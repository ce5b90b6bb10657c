//! Negation-aware similarity.
//!
//! The final score keeps the encoder's temperature-scaled cosine as the base
//! term and subtracts a repulsion term that measures how well the query
//! aligns with the *negated* concept, weighted by the frame's lambda. A
//! binary mask from a small negation classifier restricts the correction to
//! negated captions at inference time; during training the mask is pinned to
//! 1 so gradients flow unconditionally.

use ndarray::{Array1, ArrayView1};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::rng;

fn default_logit_scale() -> f64 {
    100.0
}

fn default_tau_neg() -> f64 {
    0.5
}

/// Inference constants for the scoring rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    /// Multiplier on cosines; the pretrained contrastive temperature.
    #[serde(default = "default_logit_scale")]
    pub logit_scale: f64,
    /// Gate threshold for the negation mask.
    #[serde(default = "default_tau_neg")]
    pub tau_neg: f64,
    /// Pin the mask to 1, as during training.
    #[serde(default)]
    pub train_mode_mask: bool,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            logit_scale: default_logit_scale(),
            tau_neg: default_tau_neg(),
            train_mode_mask: false,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.logit_scale > 0.0) {
            return Err(Error::InvalidConfig("logit_scale must be positive".into()));
        }
        if !(self.tau_neg > 0.0 && self.tau_neg < 1.0) {
            return Err(Error::InvalidConfig("tau_neg must be in (0, 1)".into()));
        }
        Ok(())
    }

    /// Training variant: same constants, mask pinned to 1.
    pub fn training(mut self) -> Self {
        self.train_mode_mask = true;
        self
    }
}

/// Temperature-scaled cosine between query and key.
pub fn base_similarity(q: &ArrayView1<f64>, k: &ArrayView1<f64>, cfg: &ScoreConfig) -> Result<f64> {
    let nq = nn::l2_norm(q);
    let nk = nn::l2_norm(k);
    if nq == 0.0 {
        return Err(Error::ZeroNorm("query embedding"));
    }
    if nk == 0.0 {
        return Err(Error::ZeroNorm("key embedding"));
    }
    Ok(cfg.logit_scale * q.dot(k) / (nq * nk))
}

/// Nonnegative penalty for aligning with the negated concept:
/// `lambda * max(scale * cos(q, k_neg), 0)`. A zero negation feature means
/// "nothing negated" and contributes no penalty.
pub fn repulsion(
    q: &ArrayView1<f64>,
    k_neg: &ArrayView1<f64>,
    lambda: f64,
    cfg: &ScoreConfig,
) -> Result<f64> {
    if nn::l2_norm(q) == 0.0 {
        return Err(Error::ZeroNorm("query embedding"));
    }
    if nn::l2_norm(k_neg) == 0.0 {
        return Ok(0.0);
    }
    Ok(lambda * (cfg.logit_scale * nn::cosine(q, k_neg)).max(0.0))
}

/// Two-layer perceptron deciding whether a caption is negated, reading the
/// sequence-level text representation (the end-of-text hidden state).
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub w1: ndarray::Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
}

pub const GATE_HIDDEN: usize = 128;

impl GateParams {
    pub fn init(d: usize, r: &mut ChaCha8Rng) -> Self {
        GateParams {
            w1: rng::uniform_mat(r, GATE_HIDDEN, d, 1.0 / (d as f64).sqrt()),
            b1: Array1::zeros(GATE_HIDDEN),
            w2: rng::uniform_vec(r, GATE_HIDDEN, 1.0 / (GATE_HIDDEN as f64).sqrt()),
            b2: 0.0,
        }
    }

    pub fn zeros(d: usize, hidden: usize) -> Self {
        GateParams {
            w1: ndarray::Array2::zeros((hidden, d)),
            b1: Array1::zeros(hidden),
            w2: Array1::zeros(hidden),
            b2: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        GateParams::zeros(self.dim(), self.hidden_dim())
    }

    fn visit(&self, mut f: impl FnMut(&[f64])) {
        f(self.w1.as_slice().unwrap());
        f(self.b1.as_slice().unwrap());
        f(self.w2.as_slice().unwrap());
        f(std::slice::from_ref(&self.b2));
    }

    fn visit_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        f(self.w1.as_slice_mut().unwrap());
        f(self.b1.as_slice_mut().unwrap());
        f(self.w2.as_slice_mut().unwrap());
        f(std::slice::from_mut(&mut self.b2));
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(|s| out.extend_from_slice(s));
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut(|s| {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }
}

pub struct GateCache {
    pub(crate) h_pre: Array1<f64>,
    pub(crate) h: Array1<f64>,
    pub(crate) z: f64,
    pub(crate) prob: f64,
}

/// Probability that the caption is negated.
pub fn gate_predict(text_repr: &ArrayView1<f64>, gate: &GateParams) -> f64 {
    gate_predict_cached(text_repr, gate).0
}

pub(crate) fn gate_predict_cached(text_repr: &ArrayView1<f64>, gate: &GateParams) -> (f64, GateCache) {
    let h_pre = gate.w1.dot(text_repr) + &gate.b1;
    let h = h_pre.mapv(nn::gelu);
    let z = gate.w2.dot(&h) + gate.b2;
    let prob = nn::sigmoid(z);
    (prob, GateCache { h_pre, h, z, prob })
}

/// Accumulates gate gradients given `dL/dz` (the pre-sigmoid logit).
pub(crate) fn gate_backward_dz(
    text_repr: &ArrayView1<f64>,
    gate: &GateParams,
    cache: &GateCache,
    dz: f64,
    grads: &mut GateParams,
) {
    grads.b2 += dz;
    grads.w2.scaled_add(dz, &cache.h);
    let dh = gate.w2.to_owned() * dz;
    let dh_pre = &dh * &cache.h_pre.mapv(nn::gelu_prime);
    grads.b1 += &dh_pre;
    for (i, &g) in dh_pre.iter().enumerate() {
        grads.w1.row_mut(i).scaled_add(g, text_repr);
    }
}

/// Binary negation mask: 1 iff the gate probability strictly exceeds the
/// threshold. Pinned to 1 in training mode.
pub fn mask(prob: f64, cfg: &ScoreConfig) -> u8 {
    if cfg.train_mode_mask || prob > cfg.tau_neg {
        1
    } else {
        0
    }
}

/// Final score with the pieces needed for the backward pass.
#[derive(Debug, Clone, Copy)]
pub struct ScoreParts {
    pub score: f64,
    pub base: f64,
    /// `scale * cos(q, k_neg)` before clamping; 0 when nothing is negated.
    pub repulsion_raw: f64,
    pub lambda: f64,
    pub masked: bool,
}

/// `S = S_base - M * lambda * max(scale * cos(q, k_neg), 0)`.
///
/// When the mask is 0 the returned score is the base similarity itself,
/// computed by the same code path, so retention is exact.
pub fn final_score(
    q: &ArrayView1<f64>,
    k: &ArrayView1<f64>,
    k_neg: &ArrayView1<f64>,
    lambda: f64,
    gate_prob: f64,
    cfg: &ScoreConfig,
) -> Result<f64> {
    Ok(final_score_parts(q, k, Some(k_neg), lambda, gate_prob, cfg)?.score)
}

pub fn final_score_parts(
    q: &ArrayView1<f64>,
    k: &ArrayView1<f64>,
    k_neg: Option<&ArrayView1<f64>>,
    lambda: f64,
    gate_prob: f64,
    cfg: &ScoreConfig,
) -> Result<ScoreParts> {
    let base = base_similarity(q, k, cfg)?;
    let masked = mask(gate_prob, cfg) == 1;
    if !masked {
        return Ok(ScoreParts {
            score: base,
            base,
            repulsion_raw: 0.0,
            lambda,
            masked,
        });
    }
    let repulsion_raw = match k_neg {
        Some(kn) if nn::l2_norm(kn) > 0.0 => cfg.logit_scale * nn::cosine(q, kn),
        _ => 0.0,
    };
    let score = base - lambda * repulsion_raw.max(0.0);
    Ok(ScoreParts {
        score,
        base,
        repulsion_raw,
        lambda,
        masked,
    })
}

/// Backward of [`final_score_parts`] with respect to `lambda` and `k_neg`
/// (the query and key are frozen encoder outputs).
pub fn score_backward(
    q: &ArrayView1<f64>,
    k_neg: Option<&ArrayView1<f64>>,
    parts: &ScoreParts,
    d_score: f64,
    cfg: &ScoreConfig,
) -> (f64, Option<Array1<f64>>) {
    if !parts.masked || parts.repulsion_raw <= 0.0 {
        return (0.0, None);
    }
    let d_lambda = -d_score * parts.repulsion_raw;
    let d_k_neg = k_neg.map(|kn| {
        let dcos = nn::cosine_grad_wrt_a(kn, q);
        dcos * (-d_score * parts.lambda * cfg.logit_scale)
    });
    (d_lambda, d_k_neg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cfg() -> ScoreConfig {
        ScoreConfig::default()
    }

    #[test]
    fn base_similarity_examples() {
        let c = cfg();
        let q = array![0.0, 2.0];
        assert!((base_similarity(&q.view(), &q.view(), &c).unwrap() - 100.0).abs() < 1e-9);
        let k = array![3.0, 0.0];
        assert!(base_similarity(&q.view(), &k.view(), &c).unwrap().abs() < 1e-12);
        // cos = 0.3 -> 30
        let a = array![1.0, 0.0];
        let b = array![0.3, (1.0f64 - 0.09).sqrt()];
        assert!((base_similarity(&a.view(), &b.view(), &c).unwrap() - 30.0).abs() < 1e-9);
    }

    #[test]
    fn zero_norm_inputs_are_errors() {
        let c = cfg();
        let z = Array1::zeros(2);
        let u = array![1.0, 0.0];
        assert!(base_similarity(&z.view(), &u.view(), &c).is_err());
        assert!(base_similarity(&u.view(), &z.view(), &c).is_err());
        assert!(repulsion(&z.view(), &u.view(), 0.5, &c).is_err());
    }

    #[test]
    fn repulsion_examples() {
        let c = cfg();
        let q = array![1.0, 0.0];
        let aligned = array![1.0, 0.0];
        assert_eq!(repulsion(&q.view(), &aligned.view(), 0.0, &c).unwrap(), 0.0);
        let opposed = array![-0.5, (1.0f64 - 0.25).sqrt()];
        assert_eq!(repulsion(&q.view(), &opposed.view(), 0.9, &c).unwrap(), 0.0);
        // scale * cos = 30, lambda 0.5 -> 15
        let part = array![0.3, (1.0f64 - 0.09).sqrt()];
        assert!((repulsion(&q.view(), &part.view(), 0.5, &c).unwrap() - 15.0).abs() < 1e-9);
        // zero negation feature -> 0, not an error
        let zero = Array1::zeros(2);
        assert_eq!(repulsion(&q.view(), &zero.view(), 1.0, &c).unwrap(), 0.0);
    }

    #[test]
    fn zero_gate_weights_predict_one_half() {
        let gate = GateParams::zeros(4, 8);
        let x = array![1.0, -2.0, 3.0, 0.5];
        assert_eq!(gate_predict(&x.view(), &gate), 0.5);
    }

    #[test]
    fn gate_output_is_strictly_inside_unit_interval() {
        let mut r = rng::stream(0, "gate-test", &[]);
        let gate = GateParams::init(8, &mut r);
        for _ in 0..100 {
            let x = rng::normal_vec(&mut r, 8) * 10.0;
            let p = gate_predict(&x.view(), &gate);
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn mask_threshold_is_strict() {
        let c = cfg();
        assert_eq!(mask(0.7, &c), 1);
        assert_eq!(mask(0.5, &c), 0);
        assert_eq!(mask(0.0, &c.training()), 1);
    }

    #[test]
    fn unmasked_score_is_bitwise_base() {
        let c = cfg();
        let q = array![0.4, -0.9, 0.1];
        let k = array![0.2, 0.7, -0.3];
        let kn = array![0.9, 0.1, 0.1];
        let s = final_score(&q.view(), &k.view(), &kn.view(), 0.8, 0.2, &c).unwrap();
        let base = base_similarity(&q.view(), &k.view(), &c).unwrap();
        assert_eq!(s.to_bits(), base.to_bits());
    }

    #[test]
    fn masked_score_subtracts_repulsion() {
        let c = cfg();
        let q = array![1.0, 0.0];
        let k = array![0.3, (1.0f64 - 0.09).sqrt()];
        let kn = array![0.3, (1.0f64 - 0.09).sqrt()];
        // base 30, repulsion 0.5 * 30 = 15
        let s = final_score(&q.view(), &k.view(), &kn.view(), 0.5, 0.9, &c).unwrap();
        assert!((s - 15.0).abs() < 1e-9);
    }

    #[test]
    fn masked_score_decreases_with_lambda() {
        let c = cfg();
        let q = array![1.0, 0.1];
        let k = array![0.8, 0.3];
        let kn = array![0.9, 0.2];
        let mut prev = f64::INFINITY;
        for lambda in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let s = final_score(&q.view(), &k.view(), &kn.view(), lambda, 0.9, &c).unwrap();
            assert!(s < prev);
            prev = s;
        }
    }

    #[test]
    fn score_is_invariant_to_positive_rescaling() {
        let c = cfg();
        let q = array![0.4, -0.9, 0.1];
        let k = array![0.2, 0.7, -0.3];
        let kn = array![0.9, 0.1, 0.1];
        let s = final_score(&q.view(), &k.view(), &kn.view(), 0.8, 0.9, &c).unwrap();
        for scale in [0.5, 2.0, 10.0] {
            let qs = q.clone() * scale;
            let ks = k.clone() * scale;
            let a = final_score(&qs.view(), &k.view(), &kn.view(), 0.8, 0.9, &c).unwrap();
            let b = final_score(&q.view(), &ks.view(), &kn.view(), 0.8, 0.9, &c).unwrap();
            assert!((a - s).abs() < 1e-6);
            assert!((b - s).abs() < 1e-6);
        }
    }

    #[test]
    fn score_backward_matches_finite_differences() {
        let c = cfg().training();
        let q = array![0.8, -0.2, 0.5];
        let k = array![0.1, 0.9, 0.2];
        let kn = array![0.7, 0.3, 0.4];
        let lambda = 0.6;
        let parts = final_score_parts(&q.view(), &k.view(), Some(&kn.view()), lambda, 0.0, &c).unwrap();
        let (d_lambda, d_k_neg) = score_backward(&q.view(), Some(&kn.view()), &parts, 1.0, &c);
        let h = 1e-6;

        let f = |l: f64, kn_: &Array1<f64>| {
            final_score_parts(&q.view(), &k.view(), Some(&kn_.view()), l, 0.0, &c)
                .unwrap()
                .score
        };
        let fd_lambda = (f(lambda + h, &kn) - f(lambda - h, &kn)) / (2.0 * h);
        assert!((fd_lambda - d_lambda).abs() < 1e-6);
        let d_k_neg = d_k_neg.unwrap();
        for i in 0..3 {
            let mut kp = kn.clone();
            let mut km = kn.clone();
            kp[i] += h;
            km[i] -= h;
            let fd = (f(lambda, &kp) - f(lambda, &km)) / (2.0 * h);
            assert!((fd - d_k_neg[i]).abs() < 1e-6, "i={i}");
        }
    }
}
