//! Frame: context-dependent repulsion weight.
//!
//! The repulsion strength should track how strongly the caption negates:
//! "no" warrants a harder push than "may not be". The frame normalizes the
//! pooled image/text embeddings and the lens output, fuses text and image
//! through a tiny joint self-attention, attends to the negation feature, and
//! squashes a linear readout into `lambda in (0, 1)`.
//!
//! The cross-attention over a single key/value token is degenerate on
//! purpose: its softmax weight is exactly 1, so the context `C` reduces to
//! two matrix products of the normalized negation feature. The query and key
//! projections exist as parameters but receive no gradient.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn;
use crate::rng;

pub const DEFAULT_NORM_EPS: f64 = 1e-8;

/// Learnable frame parameters plus the (fixed) normalization epsilon.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameParams {
    pub self_wq: Array2<f64>,
    pub self_wk: Array2<f64>,
    pub self_wv: Array2<f64>,
    pub self_wo: Array2<f64>,
    /// Residual mixing weight, stored as a logit so `alpha = sigmoid(..)`
    /// stays in (0, 1) throughout training.
    pub alpha_logit: f64,
    pub cross_wq: Array2<f64>,
    pub cross_wk: Array2<f64>,
    pub cross_wv: Array2<f64>,
    pub cross_wo: Array2<f64>,
    /// Readout over `[T_fuse; C]`, length `2 D`.
    pub w_lambda: Array1<f64>,
    pub b_lambda: f64,
    /// Added to the negation-feature norm when normalizing.
    pub eps: f64,
}

impl FrameParams {
    pub fn init(d: usize, r: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (d as f64).sqrt();
        FrameParams {
            self_wq: rng::uniform_mat(r, d, d, scale),
            self_wk: rng::uniform_mat(r, d, d, scale),
            self_wv: rng::uniform_mat(r, d, d, scale),
            self_wo: rng::uniform_mat(r, d, d, scale),
            // alpha initialized to 0.1
            alpha_logit: (0.1f64 / 0.9).ln(),
            cross_wq: rng::uniform_mat(r, d, d, scale),
            cross_wk: rng::uniform_mat(r, d, d, scale),
            cross_wv: rng::uniform_mat(r, d, d, scale),
            cross_wo: rng::uniform_mat(r, d, d, scale),
            w_lambda: rng::uniform_vec(r, 2 * d, 1.0 / ((2 * d) as f64).sqrt()),
            b_lambda: 0.0,
            eps: DEFAULT_NORM_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.self_wq.nrows()
    }

    pub fn alpha(&self) -> f64 {
        nn::sigmoid(self.alpha_logit)
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.dim();
        FrameParams {
            self_wq: Array2::zeros((d, d)),
            self_wk: Array2::zeros((d, d)),
            self_wv: Array2::zeros((d, d)),
            self_wo: Array2::zeros((d, d)),
            alpha_logit: 0.0,
            cross_wq: Array2::zeros((d, d)),
            cross_wk: Array2::zeros((d, d)),
            cross_wv: Array2::zeros((d, d)),
            cross_wo: Array2::zeros((d, d)),
            w_lambda: Array1::zeros(2 * d),
            b_lambda: 0.0,
            eps: self.eps,
        }
    }

    fn visit(&self, mut f: impl FnMut(&[f64])) {
        f(self.self_wq.as_slice().unwrap());
        f(self.self_wk.as_slice().unwrap());
        f(self.self_wv.as_slice().unwrap());
        f(self.self_wo.as_slice().unwrap());
        f(std::slice::from_ref(&self.alpha_logit));
        f(self.cross_wq.as_slice().unwrap());
        f(self.cross_wk.as_slice().unwrap());
        f(self.cross_wv.as_slice().unwrap());
        f(self.cross_wo.as_slice().unwrap());
        f(self.w_lambda.as_slice().unwrap());
        f(std::slice::from_ref(&self.b_lambda));
    }

    fn visit_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        f(self.self_wq.as_slice_mut().unwrap());
        f(self.self_wk.as_slice_mut().unwrap());
        f(self.self_wv.as_slice_mut().unwrap());
        f(self.self_wo.as_slice_mut().unwrap());
        f(std::slice::from_mut(&mut self.alpha_logit));
        f(self.cross_wq.as_slice_mut().unwrap());
        f(self.cross_wk.as_slice_mut().unwrap());
        f(self.cross_wv.as_slice_mut().unwrap());
        f(self.cross_wo.as_slice_mut().unwrap());
        f(self.w_lambda.as_slice_mut().unwrap());
        f(std::slice::from_mut(&mut self.b_lambda));
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

    pub fn flat_len(&self) -> usize {
        let mut n = 0;
        self.visit(|s| n += s.len());
        n
    }
}

/// Forward-path switches for the frame ablations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FrameFlags {
    /// Estimate lambda from text alone: skip the joint self-attention and
    /// use the normalized text embedding as the fused representation.
    pub no_cross_modal: bool,
    /// Pin lambda to exactly 1.
    pub no_dynamic_lambda: bool,
}

/// L2-normalizes the image, text, and negation features. Only the negation
/// feature gets the epsilon in the denominator, so a zero negation feature
/// maps to the zero vector while zero image/text inputs are errors.
pub fn normalize_inputs(
    image: &ArrayView1<f64>,
    text: &ArrayView1<f64>,
    t_neg: &ArrayView1<f64>,
    eps: f64,
) -> Result<(Array1<f64>, Array1<f64>, Array1<f64>)> {
    let ni = nn::l2_norm(image);
    if ni == 0.0 {
        return Err(Error::ZeroNorm("image embedding"));
    }
    let nt = nn::l2_norm(text);
    if nt == 0.0 {
        return Err(Error::ZeroNorm("text embedding"));
    }
    let nn_ = nn::l2_norm(t_neg);
    Ok((
        image.to_owned() / ni,
        text.to_owned() / nt,
        t_neg.to_owned() / (nn_ + eps),
    ))
}

pub struct SelfAttnCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    pub(crate) probs: Array2<f64>,
    attended: Array2<f64>,
}

/// Single-head self-attention over the two-row stack `[text; image]`,
/// returning the `2 x D` fused features (text side first).
pub fn joint_self_attention(
    t_hat: &ArrayView1<f64>,
    i_hat: &ArrayView1<f64>,
    params: &FrameParams,
) -> Array2<f64> {
    joint_self_attention_cached(t_hat, i_hat, params).0
}

pub(crate) fn joint_self_attention_cached(
    t_hat: &ArrayView1<f64>,
    i_hat: &ArrayView1<f64>,
    params: &FrameParams,
) -> (Array2<f64>, SelfAttnCache) {
    let d = t_hat.len();
    let mut x = Array2::zeros((2, d));
    x.row_mut(0).assign(t_hat);
    x.row_mut(1).assign(i_hat);
    let q = nn::linear_rows(&x.view(), &params.self_wq);
    let k = nn::linear_rows(&x.view(), &params.self_wk);
    let v = nn::linear_rows(&x.view(), &params.self_wv);
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut probs = q.dot(&k.t()) * inv_sqrt_d;
    for mut row in probs.rows_mut() {
        nn::softmax_in_place(row.as_slice_mut().unwrap());
    }
    let attended = probs.dot(&v);
    let out = nn::linear_rows(&attended.view(), &params.self_wo);
    (
        out,
        SelfAttnCache {
            x,
            q,
            k,
            v,
            probs,
            attended,
        },
    )
}

fn joint_self_attention_backward(
    cache: &SelfAttnCache,
    params: &FrameParams,
    d_out: &Array2<f64>,
    grads: &mut FrameParams,
) {
    let d = cache.x.ncols();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    grads.self_wo += &d_out.t().dot(&cache.attended);
    let d_attended = d_out.dot(&params.self_wo);
    let mut dp = d_attended.dot(&cache.v.t());
    let dv = cache.probs.t().dot(&d_attended);
    for (p_row, mut dp_row) in cache.probs.rows().into_iter().zip(dp.rows_mut()) {
        nn::softmax_backward_in_place(p_row.as_slice().unwrap(), dp_row.as_slice_mut().unwrap());
    }
    let dq = dp.dot(&cache.k) * inv_sqrt_d;
    let dk = dp.t().dot(&cache.q) * inv_sqrt_d;
    grads.self_wq += &dq.t().dot(&cache.x);
    grads.self_wk += &dk.t().dot(&cache.x);
    grads.self_wv += &dv.t().dot(&cache.x);
}

/// Residual fusion of the normalized text embedding with the text-side
/// attention output: `alpha * t_hat + f_text`.
pub fn fuse(t_hat: &ArrayView1<f64>, f_text: &ArrayView1<f64>, alpha: f64) -> Array1<f64> {
    t_hat.to_owned() * alpha + f_text
}

/// Cross-attention of the fused text context onto the negation feature.
/// With a single key/value token the attention weight is exactly one, so
/// this is `W_o (W_v t_neg_hat)`; the query influences nothing here.
pub fn negation_cross_attention(
    _t_fuse: &ArrayView1<f64>,
    t_neg_hat: &ArrayView1<f64>,
    params: &FrameParams,
) -> Array1<f64> {
    let v = params.cross_wv.dot(t_neg_hat);
    params.cross_wo.dot(&v)
}

/// Sigmoid readout of `[t_fuse; c]`.
pub fn predict_lambda(
    t_fuse: &ArrayView1<f64>,
    c: &ArrayView1<f64>,
    w_lambda: &Array1<f64>,
    b_lambda: f64,
) -> f64 {
    let d = t_fuse.len();
    assert_eq!(w_lambda.len(), 2 * d, "lambda readout width mismatch");
    let z = w_lambda.slice(ndarray::s![..d]).dot(t_fuse)
        + w_lambda.slice(ndarray::s![d..]).dot(c)
        + b_lambda;
    nn::sigmoid(z)
}

pub struct FrameCache {
    flags: FrameFlags,
    t_hat: Array1<f64>,
    t_neg_hat: Array1<f64>,
    t_neg_norm: f64,
    self_attn: Option<SelfAttnCache>,
    t_fuse: Array1<f64>,
    cross_v: Array1<f64>,
    c: Array1<f64>,
    lambda: f64,
}

/// Full frame forward pass: normalize, fuse modalities, attend to the
/// negation feature, predict lambda.
pub fn frame_forward(
    image: &ArrayView1<f64>,
    text: &ArrayView1<f64>,
    t_neg: &ArrayView1<f64>,
    params: &FrameParams,
    flags: FrameFlags,
) -> Result<f64> {
    Ok(frame_forward_cached(image, text, t_neg, params, flags)?.0)
}

pub fn frame_forward_cached(
    image: &ArrayView1<f64>,
    text: &ArrayView1<f64>,
    t_neg: &ArrayView1<f64>,
    params: &FrameParams,
    flags: FrameFlags,
) -> Result<(f64, FrameCache)> {
    if flags.no_dynamic_lambda {
        return Ok((
            1.0,
            FrameCache {
                flags,
                t_hat: Array1::zeros(0),
                t_neg_hat: Array1::zeros(0),
                t_neg_norm: 0.0,
                self_attn: None,
                t_fuse: Array1::zeros(0),
                cross_v: Array1::zeros(0),
                c: Array1::zeros(0),
                lambda: 1.0,
            },
        ));
    }
    let (i_hat, t_hat, t_neg_hat) = normalize_inputs(image, text, t_neg, params.eps)?;
    let t_neg_norm = nn::l2_norm(t_neg);

    let (self_attn, t_fuse) = if flags.no_cross_modal {
        (None, t_hat.clone())
    } else {
        let (f, cache) = joint_self_attention_cached(&t_hat.view(), &i_hat.view(), params);
        let t_fuse = fuse(&t_hat.view(), &f.row(0), params.alpha());
        (Some(cache), t_fuse)
    };

    let cross_v = params.cross_wv.dot(&t_neg_hat);
    let c = params.cross_wo.dot(&cross_v);
    let lambda = predict_lambda(&t_fuse.view(), &c.view(), &params.w_lambda, params.b_lambda);
    Ok((
        lambda,
        FrameCache {
            flags,
            t_hat,
            t_neg_hat,
            t_neg_norm,
            self_attn,
            t_fuse,
            cross_v,
            c,
            lambda,
        },
    ))
}

/// Backward pass: gradient of a scalar loss with respect to the frame
/// parameters and the (un-normalized) negation feature, given `d lambda`.
pub fn frame_backward(
    cache: &FrameCache,
    params: &FrameParams,
    d_lambda: f64,
    grads: &mut FrameParams,
) -> Array1<f64> {
    if cache.flags.no_dynamic_lambda {
        return Array1::zeros(params.dim());
    }
    let d = params.dim();
    let dz = d_lambda * cache.lambda * (1.0 - cache.lambda);

    for i in 0..d {
        grads.w_lambda[i] += dz * cache.t_fuse[i];
        grads.w_lambda[d + i] += dz * cache.c[i];
    }
    grads.b_lambda += dz;
    let d_t_fuse = params.w_lambda.slice(ndarray::s![..d]).to_owned() * dz;
    let d_c = params.w_lambda.slice(ndarray::s![d..]).to_owned() * dz;

    // cross attention: c = Wo v, v = Wv t_neg_hat
    let dv = params.cross_wo.t().dot(&d_c);
    grads.cross_wo += &outer(&d_c, &cache.cross_v);
    grads.cross_wv += &outer(&dv, &cache.t_neg_hat);
    let d_t_neg_hat = params.cross_wv.t().dot(&dv);

    if let Some(self_attn) = &cache.self_attn {
        // t_fuse = alpha * t_hat + f_text
        let alpha = nn::sigmoid(params.alpha_logit);
        let d_alpha = d_t_fuse.dot(&cache.t_hat);
        grads.alpha_logit += d_alpha * alpha * (1.0 - alpha);
        let mut d_f = Array2::zeros((2, d));
        d_f.row_mut(0).assign(&d_t_fuse);
        joint_self_attention_backward(self_attn, params, &d_f, grads);
    }

    // t_neg_hat = t_neg / (|t_neg| + eps):
    // dL/dt = d_hat / s - (d_hat . t_hat) t_hat / |t_neg|
    let s = cache.t_neg_norm + params.eps;
    let mut d_t_neg = d_t_neg_hat.clone() / s;
    if cache.t_neg_norm > 0.0 {
        let coeff = cache.t_neg_hat.dot(&d_t_neg_hat) / cache.t_neg_norm;
        d_t_neg.scaled_add(-coeff, &cache.t_neg_hat);
    }
    d_t_neg
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}
