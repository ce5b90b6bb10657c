//! Training losses and the stage-1 weighting schedule.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::nn;

/// `1 - mean cosine` between predicted and target negation features.
pub fn loss_sim(t_neg: &Array2<f64>, t_gt: &Array2<f64>) -> Result<f64> {
    Ok(loss_sim_with_grad(t_neg, t_gt)?.0)
}

/// Returns the loss and its gradient with respect to the predicted rows.
pub fn loss_sim_with_grad(t_neg: &Array2<f64>, t_gt: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    assert_eq!(t_neg.dim(), t_gt.dim(), "batch shape mismatch");
    let b = t_neg.nrows();
    if b == 0 {
        return Err(Error::Empty("similarity loss batch"));
    }
    let mut acc = 0.0;
    let mut grad = Array2::zeros(t_neg.dim());
    for (i, (t, g)) in t_neg.rows().into_iter().zip(t_gt.rows()).enumerate() {
        if nn::l2_norm(&t) == 0.0 || nn::l2_norm(&g) == 0.0 {
            return Err(Error::ZeroNorm("similarity loss row"));
        }
        acc += nn::cosine(&t, &g);
        let dcos = nn::cosine_grad_wrt_a(&t, &g);
        grad.row_mut(i).assign(&(dcos * (-1.0 / b as f64)));
    }
    Ok((1.0 - acc / b as f64, grad))
}

/// Mean absolute gap between the image cosines of the predicted and target
/// negation features; anchors the prediction to the image geometry.
pub fn loss_align(t_neg: &Array2<f64>, t_gt: &Array2<f64>, images: &Array2<f64>) -> Result<f64> {
    Ok(loss_align_with_grad(t_neg, t_gt, images)?.0)
}

pub fn loss_align_with_grad(
    t_neg: &Array2<f64>,
    t_gt: &Array2<f64>,
    images: &Array2<f64>,
) -> Result<(f64, Array2<f64>)> {
    assert_eq!(t_neg.dim(), t_gt.dim(), "batch shape mismatch");
    assert_eq!(t_neg.dim(), images.dim(), "image batch shape mismatch");
    let b = t_neg.nrows();
    if b == 0 {
        return Err(Error::Empty("alignment loss batch"));
    }
    let mut acc = 0.0;
    let mut grad = Array2::zeros(t_neg.dim());
    for i in 0..b {
        let t = t_neg.row(i);
        let g = t_gt.row(i);
        let img = images.row(i);
        if nn::l2_norm(&t) == 0.0 || nn::l2_norm(&g) == 0.0 || nn::l2_norm(&img) == 0.0 {
            return Err(Error::ZeroNorm("alignment loss row"));
        }
        let gap = nn::cosine(&t, &img) - nn::cosine(&g, &img);
        acc += gap.abs();
        let sign = if gap >= 0.0 { 1.0 } else { -1.0 };
        let dcos = nn::cosine_grad_wrt_a(&t, &img);
        grad.row_mut(i).assign(&(dcos * (sign / b as f64)));
    }
    Ok((acc / b as f64, grad))
}

/// Linear ramp of the alignment weight across epochs; a single epoch jumps
/// straight to the end value.
pub fn delta_schedule(epoch: usize, total_epochs: usize, start: f64, end: f64) -> f64 {
    assert!(epoch < total_epochs, "epoch {epoch} out of {total_epochs}");
    if total_epochs <= 1 {
        return end;
    }
    start + (end - start) * epoch as f64 / (total_epochs - 1) as f64
}

/// Contrastive loss over one positive and any number of negative scores:
/// `-log( e^{s+} / (e^{s+} + sum e^{s-}) )`, computed through a
/// max-subtracted log-sum-exp so temperature-scaled scores cannot overflow.
pub fn generalized_infonce(s_pos: f64, s_negs: &[f64]) -> f64 {
    let max = s_negs.iter().copied().fold(s_pos, f64::max);
    let mut total = (s_pos - max).exp();
    for &s in s_negs {
        total += (s - max).exp();
    }
    total.ln() + max - s_pos
}

/// Gradients of [`generalized_infonce`] with respect to each score.
pub fn generalized_infonce_backward(s_pos: f64, s_negs: &[f64]) -> (f64, Vec<f64>) {
    let max = s_negs.iter().copied().fold(s_pos, f64::max);
    let e_pos = (s_pos - max).exp();
    let mut total = e_pos;
    let mut e_negs = Vec::with_capacity(s_negs.len());
    for &s in s_negs {
        let e = (s - max).exp();
        e_negs.push(e);
        total += e;
    }
    let d_pos = e_pos / total - 1.0;
    let d_negs = e_negs.into_iter().map(|e| e / total).collect();
    (d_pos, d_negs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn loss_sim_extremes() {
        let a = array![[1.0, 0.0], [0.0, 2.0]];
        assert!((loss_sim(&a, &a).unwrap()).abs() < 1e-12);
        let orth = array![[0.0, 1.0], [3.0, 0.0]];
        assert!((loss_sim(&a, &orth).unwrap() - 1.0).abs() < 1e-12);
        let anti = array![[-1.0, 0.0], [0.0, -5.0]];
        assert!((loss_sim(&a, &anti).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn loss_sim_rejects_zero_rows() {
        let a = array![[1.0, 0.0]];
        let z = array![[0.0, 0.0]];
        assert!(loss_sim(&a, &z).is_err());
    }

    #[test]
    fn loss_align_extremes_and_mean() {
        let img = array![[1.0, 0.0]];
        let t = array![[1.0, 0.0]];
        assert!((loss_align(&t, &t, &img).unwrap()).abs() < 1e-12);
        // cos pair (1, -1) on one sample -> 2
        let g = array![[-1.0, 0.0]];
        assert!((loss_align(&t, &g, &img).unwrap() - 2.0).abs() < 1e-12);

        // per-sample gaps 0.2 and 0.4 -> mean 0.3
        let imgs = array![[1.0, 0.0], [1.0, 0.0]];
        let from_cos = |c: f64| [c, (1.0 - c * c).sqrt()];
        let t2 = array![
            [from_cos(0.9)[0], from_cos(0.9)[1]],
            [from_cos(0.8)[0], from_cos(0.8)[1]]
        ];
        let g2 = array![
            [from_cos(0.7)[0], from_cos(0.7)[1]],
            [from_cos(0.4)[0], from_cos(0.4)[1]]
        ];
        assert!((loss_align(&t2, &g2, &imgs).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn loss_grads_match_finite_differences() {
        let t = array![[0.6, -0.2, 0.4], [0.1, 0.9, -0.5]];
        let g = array![[1.0, 0.2, 0.0], [0.0, 1.0, 0.3]];
        let img = array![[0.5, 0.5, 0.7], [0.9, -0.1, 0.2]];
        let (_, gs) = loss_sim_with_grad(&t, &g).unwrap();
        let (_, ga) = loss_align_with_grad(&t, &g, &img).unwrap();
        let h = 1e-6;
        for r in 0..2 {
            for c in 0..3 {
                let mut tp = t.clone();
                let mut tm = t.clone();
                tp[[r, c]] += h;
                tm[[r, c]] -= h;
                let fd_s =
                    (loss_sim(&tp, &g).unwrap() - loss_sim(&tm, &g).unwrap()) / (2.0 * h);
                assert!((fd_s - gs[[r, c]]).abs() < 1e-8);
                let fd_a = (loss_align(&tp, &g, &img).unwrap()
                    - loss_align(&tm, &g, &img).unwrap())
                    / (2.0 * h);
                assert!((fd_a - ga[[r, c]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn delta_schedule_endpoints() {
        assert_eq!(delta_schedule(0, 10, 0.5, 1.0), 0.5);
        assert_eq!(delta_schedule(9, 10, 0.5, 1.0), 1.0);
        assert!((delta_schedule(5, 11, 0.5, 1.0) - 0.75).abs() < 1e-15);
        assert_eq!(delta_schedule(0, 1, 0.5, 1.0), 1.0);
    }

    #[test]
    fn infonce_uniform_scores() {
        let ln2 = std::f64::consts::LN_2;
        assert!((generalized_infonce(3.0, &[3.0]) - ln2).abs() < 1e-12);
        assert!((generalized_infonce(0.0, &[0.0, 0.0, 0.0]) - 4.0f64.ln()).abs() < 1e-12);
        for n in [1usize, 3, 7] {
            let negs = vec![-5.0; n];
            let l = generalized_infonce(-5.0, &negs);
            assert!((l - ((1 + n) as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn infonce_large_margin() {
        // oracle: ln(1 + e^{-10}) evaluated directly in high precision
        let want = (-10.0f64).exp().ln_1p();
        let got = generalized_infonce(10.0, &[0.0]);
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }

    #[test]
    fn infonce_is_stable_at_temperature_scaled_magnitudes() {
        let l = generalized_infonce(97.0, &[95.0, 99.0, 80.0]);
        assert!(l.is_finite() && l > 0.0);
        let l2 = generalized_infonce(-97.0, &[-95.0]);
        assert!(l2.is_finite() && l2 > 0.0);
    }

    #[test]
    fn infonce_gradients_match_finite_differences() {
        let s_pos = 1.3;
        let negs = [0.4, 2.0, -1.0];
        let (dp, dn) = generalized_infonce_backward(s_pos, &negs);
        let h = 1e-6;
        let fd_p = (generalized_infonce(s_pos + h, &negs) - generalized_infonce(s_pos - h, &negs))
            / (2.0 * h);
        assert!((fd_p - dp).abs() < 1e-9);
        for i in 0..3 {
            let mut np = negs;
            let mut nm = negs;
            np[i] += h;
            nm[i] -= h;
            let fd = (generalized_infonce(s_pos, &np) - generalized_infonce(s_pos, &nm)) / (2.0 * h);
            assert!((fd - dn[i]).abs() < 1e-9);
        }
    }
}
