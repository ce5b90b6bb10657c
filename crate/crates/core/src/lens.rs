//! Lens: dual-stream extraction of the negated-concept feature.
//!
//! Early-layer token states carry the local cues of negation (the marker and
//! its neighborhood) while the final layer carries the globally contextual
//! reading. The lens projects the early layers into queries, the final layer
//! into keys and values, fuses them with a jointly normalized hierarchical
//! attention, and blends the result back into the final-layer states through
//! a sigmoid residual gate before a small FFN. The end-of-text row of the
//! result is the pooled negation feature `T_neg`.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand_chacha::ChaCha8Rng;

use crate::bundle::EmbeddingBundle;
use crate::error::{Error, Result};
use crate::nn::{self, LayerNormCache};
use crate::rng;

/// One projection instance: `LN(GELU(W x))` per row with its own affine
/// layer-norm parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjParams {
    pub w: Array2<f64>,
    pub ln_gamma: Array1<f64>,
    pub ln_beta: Array1<f64>,
}

impl ProjParams {
    fn init(d: usize, r: &mut ChaCha8Rng, scale: f64) -> Self {
        ProjParams {
            w: rng::uniform_mat(r, d, d, scale),
            ln_gamma: Array1::ones(d),
            ln_beta: Array1::zeros(d),
        }
    }

    fn zeros(d: usize) -> Self {
        ProjParams {
            w: Array2::zeros((d, d)),
            ln_gamma: Array1::zeros(d),
            ln_beta: Array1::zeros(d),
        }
    }
}

/// All learnable lens parameters. Attention mixture weights are stored as
/// log-parameters so that the `alpha` seen by the attention stays positive.
#[derive(Debug, Clone, PartialEq)]
pub struct LensParams {
    pub proj_q: [ProjParams; 3],
    pub proj_k: ProjParams,
    pub proj_v: [ProjParams; 3],
    pub log_alpha: [f64; 3],
    pub gate_w: Array2<f64>,
    pub gate_b: Array1<f64>,
    pub ffn_w1: Array2<f64>,
    pub ffn_b1: Array1<f64>,
    pub ffn_w2: Array2<f64>,
    pub ffn_b2: Array1<f64>,
}

/// Gate bias starts negative so early training favors the original features.
const GATE_BIAS_INIT: f64 = -2.0;

impl LensParams {
    /// Fresh parameters at width `d` with the FFN hidden size `4 d`.
    pub fn init(d: usize, r: &mut ChaCha8Rng) -> Self {
        let h_f = 4 * d;
        let scale = 1.0 / (d as f64).sqrt();
        LensParams {
            proj_q: std::array::from_fn(|_| ProjParams::init(d, r, scale)),
            proj_k: ProjParams::init(d, r, scale),
            proj_v: std::array::from_fn(|_| ProjParams::init(d, r, scale)),
            log_alpha: [0.0; 3],
            gate_w: rng::uniform_mat(r, d, d, scale),
            gate_b: Array1::from_elem(d, GATE_BIAS_INIT),
            ffn_w1: rng::uniform_mat(r, h_f, d, scale),
            ffn_b1: Array1::zeros(h_f),
            ffn_w2: rng::uniform_mat(r, d, h_f, scale),
            ffn_b2: Array1::zeros(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.gate_w.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.ffn_w1.nrows()
    }

    pub fn alpha(&self) -> [f64; 3] {
        self.log_alpha.map(f64::exp)
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.dim();
        let h_f = self.hidden_dim();
        LensParams {
            proj_q: std::array::from_fn(|_| ProjParams::zeros(d)),
            proj_k: ProjParams::zeros(d),
            proj_v: std::array::from_fn(|_| ProjParams::zeros(d)),
            log_alpha: [0.0; 3],
            gate_w: Array2::zeros((d, d)),
            gate_b: Array1::zeros(d),
            ffn_w1: Array2::zeros((h_f, d)),
            ffn_b1: Array1::zeros(h_f),
            ffn_w2: Array2::zeros((d, h_f)),
            ffn_b2: Array1::zeros(d),
        }
    }

    fn visit(&self, mut f: impl FnMut(&[f64])) {
        for p in self.proj_q.iter().chain([&self.proj_k]).chain(self.proj_v.iter()) {
            f(p.w.as_slice().unwrap());
            f(p.ln_gamma.as_slice().unwrap());
            f(p.ln_beta.as_slice().unwrap());
        }
        f(&self.log_alpha);
        f(self.gate_w.as_slice().unwrap());
        f(self.gate_b.as_slice().unwrap());
        f(self.ffn_w1.as_slice().unwrap());
        f(self.ffn_b1.as_slice().unwrap());
        f(self.ffn_w2.as_slice().unwrap());
        f(self.ffn_b2.as_slice().unwrap());
    }

    fn visit_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        for p in self
            .proj_q
            .iter_mut()
            .chain([&mut self.proj_k])
            .chain(self.proj_v.iter_mut())
        {
            f(p.w.as_slice_mut().unwrap());
            f(p.ln_gamma.as_slice_mut().unwrap());
            f(p.ln_beta.as_slice_mut().unwrap());
        }
        f(&mut self.log_alpha);
        f(self.gate_w.as_slice_mut().unwrap());
        f(self.gate_b.as_slice_mut().unwrap());
        f(self.ffn_w1.as_slice_mut().unwrap());
        f(self.ffn_b1.as_slice_mut().unwrap());
        f(self.ffn_w2.as_slice_mut().unwrap());
        f(self.ffn_b2.as_slice_mut().unwrap());
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

/// Forward-path switches for the lens ablations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LensFlags {
    /// Queries come from the final layer instead of the syntactic layers.
    pub no_syntax_stream: bool,
    /// Keys/values come from the last syntactic layer instead of the final.
    pub no_semantic_stream: bool,
    /// The gate is pinned to 1 (pure attention path, no residual blend).
    pub no_residual_gating: bool,
}

pub struct ProjCache {
    h1: Array2<f64>,
    ln: LayerNormCache,
}

/// Projects every row of `x`: `LN(GELU(W x))` with affine layer norm.
pub fn project(x: &Array2<f64>, params: &ProjParams) -> Result<Array2<f64>> {
    if !nn::all_finite_mat(&x.view()) {
        return Err(Error::NonFinite("projection input"));
    }
    Ok(project_cached(x, params).0)
}

fn project_cached(x: &Array2<f64>, params: &ProjParams) -> (Array2<f64>, ProjCache) {
    let h1 = nn::linear_rows(&x.view(), &params.w);
    let h2 = h1.mapv(nn::gelu);
    let (y, ln) = nn::layernorm_rows(&h2.view(), &params.ln_gamma, &params.ln_beta);
    (y, ProjCache { h1, ln })
}

fn project_backward(
    x: &Array2<f64>,
    params: &ProjParams,
    cache: &ProjCache,
    dy: &Array2<f64>,
    grads: &mut ProjParams,
) {
    let dh2 = nn::layernorm_rows_backward(
        &cache.ln,
        &params.ln_gamma,
        &dy.view(),
        &mut grads.ln_gamma,
        &mut grads.ln_beta,
    );
    let dh1 = &dh2 * &cache.h1.mapv(nn::gelu_prime);
    // input gradient is never needed: the encoder is frozen
    grads.w += &dh1.t().dot(x);
}

pub struct AttentionCache {
    /// Joint attention probabilities, one row of `3 L` weights per query.
    pub probs: Array2<f64>,
}

/// Hierarchical attention with joint normalization: for each query row the
/// three layers' logits are concatenated along the key axis and one softmax
/// runs over all `3 L` of them, so the `log alpha_i` offsets act as genuine
/// mixture weights instead of cancelling per layer.
pub fn hierarchical_attention(
    q: [&Array2<f64>; 3],
    k: &Array2<f64>,
    v: [&Array2<f64>; 3],
    alpha: [f64; 3],
) -> Array2<f64> {
    hierarchical_attention_cached(q, k, v, alpha).0
}

pub(crate) fn hierarchical_attention_cached(
    q: [&Array2<f64>; 3],
    k: &Array2<f64>,
    v: [&Array2<f64>; 3],
    alpha: [f64; 3],
) -> (Array2<f64>, AttentionCache) {
    let (l, d) = k.dim();
    for i in 0..3 {
        assert_eq!(q[i].dim(), (l, d), "query layer {i} shape mismatch");
        assert_eq!(v[i].dim(), (l, d), "value layer {i} shape mismatch");
        assert!(alpha[i] > 0.0, "alpha[{i}] must be positive");
    }
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let log_alpha = alpha.map(f64::ln);

    let mut probs = Array2::zeros((l, 3 * l));
    let mut out = Array2::zeros((l, d));
    let mut logits = vec![0.0; 3 * l];
    for row in 0..l {
        for (i, qi) in q.iter().enumerate() {
            let q_row = qi.row(row);
            for m in 0..l {
                logits[i * l + m] = q_row.dot(&k.row(m)) * inv_sqrt_d + log_alpha[i];
            }
        }
        nn::softmax_in_place(&mut logits);
        for (i, vi) in v.iter().enumerate() {
            for m in 0..l {
                let p = logits[i * l + m];
                probs[[row, i * l + m]] = p;
                out.row_mut(row).scaled_add(p, &vi.row(m));
            }
        }
    }
    (out, AttentionCache { probs })
}

#[allow(clippy::too_many_arguments)]
fn hierarchical_attention_backward(
    q: [&Array2<f64>; 3],
    k: &Array2<f64>,
    v: [&Array2<f64>; 3],
    cache: &AttentionCache,
    d_out: &Array2<f64>,
    dq: &mut [Array2<f64>; 3],
    dk: &mut Array2<f64>,
    dv: &mut [Array2<f64>; 3],
    d_log_alpha: &mut [f64; 3],
) {
    let (l, d) = k.dim();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut dp = vec![0.0; 3 * l];
    for row in 0..l {
        let d_row = d_out.row(row);
        let p_row = cache.probs.row(row);
        for (i, vi) in v.iter().enumerate() {
            for m in 0..l {
                dp[i * l + m] = d_row.dot(&vi.row(m));
                dv[i].row_mut(m).scaled_add(p_row[i * l + m], &d_row);
            }
        }
        nn::softmax_backward_in_place(p_row.as_slice().unwrap(), &mut dp);
        for (i, qi) in q.iter().enumerate() {
            let q_row = qi.row(row);
            for m in 0..l {
                let dz = dp[i * l + m];
                dq[i].row_mut(row).scaled_add(dz * inv_sqrt_d, &k.row(m));
                dk.row_mut(m).scaled_add(dz * inv_sqrt_d, &q_row);
                d_log_alpha[i] += dz;
            }
        }
    }
}

pub struct GateCache {
    g: Option<Array2<f64>>,
    blend: Array2<f64>,
    h_pre: Array2<f64>,
    h: Array2<f64>,
}

/// Blends the attended rows with the residual rows through a sigmoid gate
/// and refines with the FFN. With `no_gate` the gate is pinned to 1.
pub fn residual_gate(
    t_attn: &Array2<f64>,
    residual: &Array2<f64>,
    params: &LensParams,
    no_gate: bool,
) -> Array2<f64> {
    residual_gate_cached(t_attn, residual, params, no_gate).0
}

fn residual_gate_cached(
    t_attn: &Array2<f64>,
    residual: &Array2<f64>,
    params: &LensParams,
    no_gate: bool,
) -> (Array2<f64>, GateCache) {
    assert_eq!(t_attn.dim(), residual.dim(), "gate input shape mismatch");
    let (g, blend) = if no_gate {
        (None, t_attn.clone())
    } else {
        let z = nn::linear_rows(&t_attn.view(), &params.gate_w) + &params.gate_b;
        let g = z.mapv(nn::sigmoid);
        let blend = &g * t_attn + &(1.0 - &g) * residual;
        (Some(g), blend)
    };
    let h_pre = nn::linear_rows(&blend.view(), &params.ffn_w1) + &params.ffn_b1;
    let h = h_pre.mapv(nn::gelu);
    let y = nn::linear_rows(&h.view(), &params.ffn_w2) + &params.ffn_b2;
    (y, GateCache { g, blend, h_pre, h })
}

fn residual_gate_backward(
    t_attn: &Array2<f64>,
    residual: &Array2<f64>,
    params: &LensParams,
    cache: &GateCache,
    dy: &Array2<f64>,
    grads: &mut LensParams,
) -> Array2<f64> {
    grads.ffn_b2 += &dy.sum_axis(Axis(0));
    grads.ffn_w2 += &dy.t().dot(&cache.h);
    let dh = dy.dot(&params.ffn_w2);
    let dh_pre = &dh * &cache.h_pre.mapv(nn::gelu_prime);
    grads.ffn_w1 += &dh_pre.t().dot(&cache.blend);
    grads.ffn_b1 += &dh_pre.sum_axis(Axis(0));
    let dblend = dh_pre.dot(&params.ffn_w1);

    match &cache.g {
        None => dblend,
        Some(g) => {
            let dg = &dblend * &(t_attn - residual);
            let mut d_attn = &dblend * g;
            let dz = &dg * g * &(1.0 - g);
            grads.gate_w += &dz.t().dot(t_attn);
            grads.gate_b += &dz.sum_axis(Axis(0));
            d_attn += &dz.dot(&params.gate_w);
            d_attn
        }
    }
}

/// The per-token output and its pooled end-of-text row.
#[derive(Debug, Clone)]
pub struct LensOutput {
    pub t_neg_seq: Array2<f64>,
    pub t_neg: Array1<f64>,
}

pub struct LensCache {
    flags: LensFlags,
    q_proj: [ProjCache; 3],
    k_proj: ProjCache,
    v_proj: [ProjCache; 3],
    q: [Array2<f64>; 3],
    k: Array2<f64>,
    v: [Array2<f64>; 3],
    pub(crate) attn: AttentionCache,
    t_attn: Array2<f64>,
    gate: GateCache,
}

/// Full lens forward pass over one bundle.
pub fn lens_forward(
    bundle: &EmbeddingBundle,
    params: &LensParams,
    flags: LensFlags,
) -> Result<LensOutput> {
    Ok(lens_forward_cached(bundle, params, flags)?.0)
}

pub fn lens_forward_cached(
    bundle: &EmbeddingBundle,
    params: &LensParams,
    flags: LensFlags,
) -> Result<(LensOutput, LensCache)> {
    let d = bundle.dim();
    if params.dim() != d {
        return Err(Error::Validation(format!(
            "lens params have width {} but bundle has {d}",
            params.dim()
        )));
    }
    let kv_input = if flags.no_semantic_stream {
        &bundle.syn_layers[2]
    } else {
        &bundle.final_seq
    };

    let mut q = Vec::with_capacity(3);
    let mut q_proj = Vec::with_capacity(3);
    for i in 0..3 {
        let input = if flags.no_syntax_stream {
            &bundle.final_seq
        } else {
            &bundle.syn_layers[i]
        };
        let (y, c) = project_cached(input, &params.proj_q[i]);
        q.push(y);
        q_proj.push(c);
    }
    let q: [Array2<f64>; 3] = q.try_into().unwrap();
    let q_proj: [ProjCache; 3] = match q_proj.try_into() {
        Ok(v) => v,
        Err(_) => unreachable!(),
    };

    let (k, k_proj) = project_cached(kv_input, &params.proj_k);
    let mut v = Vec::with_capacity(3);
    let mut v_proj = Vec::with_capacity(3);
    for i in 0..3 {
        let (y, c) = project_cached(kv_input, &params.proj_v[i]);
        v.push(y);
        v_proj.push(c);
    }
    let v: [Array2<f64>; 3] = v.try_into().unwrap();
    let v_proj: [ProjCache; 3] = match v_proj.try_into() {
        Ok(vc) => vc,
        Err(_) => unreachable!(),
    };

    let (t_attn, attn) = hierarchical_attention_cached(
        [&q[0], &q[1], &q[2]],
        &k,
        [&v[0], &v[1], &v[2]],
        params.alpha(),
    );
    let (t_neg_seq, gate) =
        residual_gate_cached(&t_attn, &bundle.final_seq, params, flags.no_residual_gating);
    let t_neg = t_neg_seq.row(bundle.eot_index).to_owned();

    Ok((
        LensOutput { t_neg_seq, t_neg },
        LensCache {
            flags,
            q_proj,
            k_proj,
            v_proj,
            q,
            k,
            v,
            attn,
            t_attn,
            gate,
        },
    ))
}

/// Backward pass: gradient of a scalar loss with respect to every lens
/// parameter, given the loss gradient on the output rows. Accumulates into
/// `grads`.
pub fn lens_backward(
    bundle: &EmbeddingBundle,
    params: &LensParams,
    cache: &LensCache,
    d_t_neg_seq: &Array2<f64>,
    grads: &mut LensParams,
) {
    let d_t_attn = residual_gate_backward(
        &cache.t_attn,
        &bundle.final_seq,
        params,
        &cache.gate,
        d_t_neg_seq,
        grads,
    );

    let (l, d) = cache.k.dim();
    let mut dq = [
        Array2::zeros((l, d)),
        Array2::zeros((l, d)),
        Array2::zeros((l, d)),
    ];
    let mut dk = Array2::zeros((l, d));
    let mut dv = [
        Array2::zeros((l, d)),
        Array2::zeros((l, d)),
        Array2::zeros((l, d)),
    ];
    hierarchical_attention_backward(
        [&cache.q[0], &cache.q[1], &cache.q[2]],
        &cache.k,
        [&cache.v[0], &cache.v[1], &cache.v[2]],
        &cache.attn,
        &d_t_attn,
        &mut dq,
        &mut dk,
        &mut dv,
        &mut grads.log_alpha,
    );

    let kv_input = if cache.flags.no_semantic_stream {
        &bundle.syn_layers[2]
    } else {
        &bundle.final_seq
    };
    for i in 0..3 {
        let input = if cache.flags.no_syntax_stream {
            &bundle.final_seq
        } else {
            &bundle.syn_layers[i]
        };
        project_backward(input, &params.proj_q[i], &cache.q_proj[i], &dq[i], &mut grads.proj_q[i]);
        project_backward(kv_input, &params.proj_v[i], &cache.v_proj[i], &dv[i], &mut grads.proj_v[i]);
    }
    project_backward(kv_input, &params.proj_k, &cache.k_proj, &dk, &mut grads.proj_k);
}

/// Convenience for losses that only touch the pooled row.
pub fn seq_grad_from_pooled(l: usize, d: usize, eot: usize, d_t_neg: &ArrayView1<f64>) -> Array2<f64> {
    let mut g = Array2::zeros((l, d));
    g.row_mut(eot).assign(d_t_neg);
    g
}
