//! Differentiable segmentation losses.
//!
//! `dice_loss` is the binary soft-Dice loss with squared-norm
//! denominator:
//!
//! ```text
//! L = 1 - 2 * sum(p_i * g_i) / (sum(p_i^2) + sum(g_i^2) + eps)
//! ```
//!
//! `generalized_dice_loss` is the multi-class variant that weights each
//! class by the inverse of its volume so small structures are not
//! drowned out by large ones:
//!
//! ```text
//! L = 1 - 2 * sum_l w_l sum_i p_li*g_li / (sum_l w_l sum_i (p_li + g_li) + eps)
//! ```
//!
//! with w_l = 1/(sum_i g_li)^2 by default (`WeightMode::SquaredInverseVolume`)
//! or 1/sum_i g_li (`WeightMode::InverseVolume`). The weight of a class
//! absent from the target is clamped to the largest finite weight among
//! present classes, so false positives on absent classes still cost.
//!
//! Loss math runs in f64; analytic gradients are provided for both
//! losses so the training path never needs numeric differentiation.

use ndarray::{ArrayD, ArrayViewD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Exponent applied to the class volume in the GDL weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// w_l = 1 / (sum_i g_li)^2 -- the usual GDL definition.
    SquaredInverseVolume,
    /// w_l = 1 / sum_i g_li -- the plain inverse-volume reading.
    InverseVolume,
}

impl Default for WeightMode {
    fn default() -> Self {
        WeightMode::SquaredInverseVolume
    }
}

fn check_same_shape(p: &ArrayViewD<f64>, g: &ArrayViewD<f64>) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::Shape(format!(
            "prediction shape {:?} != target shape {:?}",
            p.shape(),
            g.shape()
        )));
    }
    Ok(())
}

/// Binary soft-Dice loss.
pub fn dice_loss(p: &ArrayViewD<f64>, g: &ArrayViewD<f64>, eps: f64) -> Result<f64> {
    check_same_shape(p, g)?;
    let mut inter = 0.0;
    let mut p2 = 0.0;
    let mut g2 = 0.0;
    for (&pi, &gi) in p.iter().zip(g.iter()) {
        inter += pi * gi;
        p2 += pi * pi;
        g2 += gi * gi;
    }
    let denom = p2 + g2 + eps;
    if denom == 0.0 {
        // Both masks empty and eps = 0: perfect overlap of nothing.
        return Ok(0.0);
    }
    Ok(1.0 - 2.0 * inter / denom)
}

/// Gradient of [`dice_loss`] with respect to every entry of `p`.
pub fn dice_loss_grad(p: &ArrayViewD<f64>, g: &ArrayViewD<f64>, eps: f64) -> Result<ArrayD<f64>> {
    check_same_shape(p, g)?;
    let mut inter = 0.0;
    let mut p2 = 0.0;
    let mut g2 = 0.0;
    for (&pi, &gi) in p.iter().zip(g.iter()) {
        inter += pi * gi;
        p2 += pi * pi;
        g2 += gi * gi;
    }
    let denom = p2 + g2 + eps;
    let mut grad = ArrayD::<f64>::zeros(p.raw_dim());
    if denom == 0.0 {
        return Ok(grad);
    }
    // d/dp_i [1 - 2 I / D] = -2 (g_i D - 2 p_i I) / D^2
    let d2 = denom * denom;
    for ((gv, &pi), &gi) in grad.iter_mut().zip(p.iter()).zip(g.iter()) {
        *gv = -2.0 * (gi * denom - 2.0 * pi * inter) / d2;
    }
    Ok(grad)
}

/// Per-class weights from a one-hot target of shape (L, N...).
///
/// Returns (weights, volumes). Absent classes get the max finite weight.
fn gdl_weights(g: &ArrayViewD<f64>, mode: WeightMode) -> (Vec<f64>, Vec<f64>) {
    let classes = g.shape()[0];
    let volumes: Vec<f64> = (0..classes)
        .map(|l| g.index_axis(ndarray::Axis(0), l).sum())
        .collect();
    let raw: Vec<Option<f64>> = volumes
        .iter()
        .map(|&v| {
            if v > 0.0 {
                Some(match mode {
                    WeightMode::SquaredInverseVolume => 1.0 / (v * v),
                    WeightMode::InverseVolume => 1.0 / v,
                })
            } else {
                None
            }
        })
        .collect();
    let max_finite = raw
        .iter()
        .flatten()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    // One-hot targets always have at least one present class.
    let fallback = if max_finite.is_finite() { max_finite } else { 1.0 };
    let weights = raw.into_iter().map(|w| w.unwrap_or(fallback)).collect();
    (weights, volumes)
}

fn check_onehot_layout(p: &ArrayViewD<f64>, g: &ArrayViewD<f64>) -> Result<()> {
    check_same_shape(p, g)?;
    if p.ndim() < 2 {
        return Err(Error::Shape(
            "expected (classes, voxels...) layout with ndim >= 2".into(),
        ));
    }
    Ok(())
}

/// Multi-class Generalized Dice Loss over (L, N...) tensors.
pub fn generalized_dice_loss(
    p: &ArrayViewD<f64>,
    g: &ArrayViewD<f64>,
    eps: f64,
    mode: WeightMode,
) -> Result<f64> {
    check_onehot_layout(p, g)?;
    let classes = p.shape()[0];
    let (weights, _) = gdl_weights(g, mode);
    let mut num = 0.0;
    let mut den = 0.0;
    for l in 0..classes {
        let pl = p.index_axis(ndarray::Axis(0), l);
        let gl = g.index_axis(ndarray::Axis(0), l);
        let mut inter = 0.0;
        let mut both = 0.0;
        for (&pi, &gi) in pl.iter().zip(gl.iter()) {
            inter += pi * gi;
            both += pi + gi;
        }
        num += weights[l] * inter;
        den += weights[l] * both;
    }
    let denom = den + eps;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 - 2.0 * num / denom)
}

/// Gradient of [`generalized_dice_loss`] with respect to `p`.
///
/// The weights depend on the target only, so
/// dL/dp_li = -2 w_l (g_li * D - A) / D^2 with A the weighted
/// intersection and D the weighted denominator.
pub fn generalized_dice_grad(
    p: &ArrayViewD<f64>,
    g: &ArrayViewD<f64>,
    eps: f64,
    mode: WeightMode,
) -> Result<ArrayD<f64>> {
    check_onehot_layout(p, g)?;
    let classes = p.shape()[0];
    let (weights, _) = gdl_weights(g, mode);
    let mut num = 0.0;
    let mut den = 0.0;
    for l in 0..classes {
        let pl = p.index_axis(ndarray::Axis(0), l);
        let gl = g.index_axis(ndarray::Axis(0), l);
        for (&pi, &gi) in pl.iter().zip(gl.iter()) {
            num += weights[l] * pi * gi;
            den += weights[l] * (pi + gi);
        }
    }
    let denom = den + eps;
    let mut grad = ArrayD::<f64>::zeros(p.raw_dim());
    if denom == 0.0 {
        return Ok(grad);
    }
    let d2 = denom * denom;
    for l in 0..classes {
        let gl = g.index_axis(ndarray::Axis(0), l);
        let mut gr = grad.index_axis_mut(ndarray::Axis(0), l);
        for (gv, &gi) in gr.iter_mut().zip(gl.iter()) {
            *gv = -2.0 * weights[l] * (gi * denom - num) / d2;
        }
    }
    Ok(grad)
}

/// One-hot encodes a label patch into an (4, D, H, W) f64 tensor in
/// class-channel order (0, 1, 2, 4).
pub fn one_hot_labels(labels: &ndarray::ArrayView3<u8>) -> ArrayD<f64> {
    let (d, h, w) = labels.dim();
    let mut out = ArrayD::<f64>::zeros(ndarray::IxDyn(&[4, d, h, w]));
    for ((i, j, k), &v) in labels.indexed_iter() {
        let c = crate::nets::label_to_channel(v);
        out[[c, i, j, k]] = 1.0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arr(data: Vec<f64>, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    #[test]
    fn dice_loss_perfect_overlap() {
        let p = arr(vec![1.0; 8], &[8]);
        let g = arr(vec![1.0; 8], &[8]);
        assert_eq!(dice_loss(&p.view(), &g.view(), 0.0).unwrap(), 0.0);
    }

    #[test]
    fn dice_loss_disjoint_supports() {
        let p = arr(vec![1.0, 1.0, 0.0, 0.0], &[4]);
        let g = arr(vec![0.0, 0.0, 1.0, 1.0], &[4]);
        let l = dice_loss(&p.view(), &g.view(), 1e-9).unwrap();
        assert!((l - 1.0).abs() < 1e-8);
    }

    #[test]
    fn dice_loss_hand_value() {
        // p = (0.5, 0.5), g = (1, 0), eps = 0:
        // 1 - 2*0.5 / (0.5 + 1) = 1/3.
        let p = arr(vec![0.5, 0.5], &[2]);
        let g = arr(vec![1.0, 0.0], &[2]);
        let l = dice_loss(&p.view(), &g.view(), 0.0).unwrap();
        assert!((l - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn dice_loss_shape_mismatch() {
        let p = arr(vec![0.5; 4], &[4]);
        let g = arr(vec![1.0; 2], &[2]);
        assert!(matches!(
            dice_loss(&p.view(), &g.view(), 0.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn dice_loss_voxel_permutation_symmetry() {
        let p = arr(vec![0.1, 0.7, 0.3, 0.9], &[4]);
        let g = arr(vec![0.0, 1.0, 0.0, 1.0], &[4]);
        let l1 = dice_loss(&p.view(), &g.view(), 1e-5).unwrap();
        let p2 = arr(vec![0.9, 0.3, 0.7, 0.1], &[4]);
        let g2 = arr(vec![1.0, 0.0, 1.0, 0.0], &[4]);
        let l2 = dice_loss(&p2.view(), &g2.view(), 1e-5).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
    }

    fn random_instance(seed: u64) -> (ArrayD<f64>, ArrayD<f64>) {
        // 4 classes over a 4^3 patch, softmax-normalized prediction and
        // a one-hot target.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 64usize;
        let mut p = ArrayD::<f64>::zeros(IxDyn(&[4, n]));
        let mut g = ArrayD::<f64>::zeros(IxDyn(&[4, n]));
        for i in 0..n {
            let mut logits = [0.0f64; 4];
            for l in logits.iter_mut() {
                *l = rng.random_range(-2.0..2.0);
            }
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            for c in 0..4 {
                p[[c, i]] = exps[c] / s;
            }
            g[[rng.random_range(0..4usize), i]] = 1.0;
        }
        (p, g)
    }

    /// Central finite differences for any scalar loss of p.
    fn fd_grad(
        f: &dyn Fn(&ArrayViewD<f64>) -> f64,
        p: &ArrayD<f64>,
        h: f64,
    ) -> ArrayD<f64> {
        let mut grad = ArrayD::<f64>::zeros(p.raw_dim());
        let mut work = p.clone();
        for idx in 0..p.len() {
            let flat = work.as_slice_mut().unwrap();
            let orig = flat[idx];
            flat[idx] = orig + h;
            let up = f(&work.view());
            let flat = work.as_slice_mut().unwrap();
            flat[idx] = orig - h;
            let down = f(&work.view());
            let flat = work.as_slice_mut().unwrap();
            flat[idx] = orig;
            grad.as_slice_mut().unwrap()[idx] = (up - down) / (2.0 * h);
        }
        grad
    }

    fn assert_grad_close(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>, rel: f64) {
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let scale = a.abs().max(n.abs()).max(1e-8);
            assert!(
                (a - n).abs() / scale < rel,
                "analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn dice_grad_matches_finite_differences() {
        for seed in 0..5 {
            let (p, g) = random_instance(seed);
            // Flatten to a single binary problem on class 1.
            let p1 = p.index_axis(ndarray::Axis(0), 1).to_owned().into_dyn();
            let g1 = g.index_axis(ndarray::Axis(0), 1).to_owned().into_dyn();
            let analytic = dice_loss_grad(&p1.view(), &g1.view(), 1e-5).unwrap();
            let f = |x: &ArrayViewD<f64>| dice_loss(x, &g1.view(), 1e-5).unwrap();
            let numeric = fd_grad(&f, &p1, 1e-4);
            assert_grad_close(&analytic, &numeric, 1e-3);
        }
    }

    #[test]
    fn gdl_grad_matches_finite_differences() {
        for seed in 0..5 {
            let (p, g) = random_instance(seed + 50);
            for mode in [WeightMode::SquaredInverseVolume, WeightMode::InverseVolume] {
                let analytic = generalized_dice_grad(&p.view(), &g.view(), 1e-5, mode).unwrap();
                let f =
                    |x: &ArrayViewD<f64>| generalized_dice_loss(x, &g.view(), 1e-5, mode).unwrap();
                let numeric = fd_grad(&f, &p, 1e-4);
                assert_grad_close(&analytic, &numeric, 1e-3);
            }
        }
    }

    #[test]
    fn gdl_perfect_prediction_is_near_zero() {
        let (_, g) = random_instance(3);
        let l = generalized_dice_loss(
            &g.view(),
            &g.view(),
            DEFAULT_EPSILON,
            WeightMode::SquaredInverseVolume,
        )
        .unwrap();
        // eps / (2 sum w_l |g_l| + eps), tiny but positive.
        assert!(l > 0.0 && l < 1e-4, "loss {l}");
    }

    #[test]
    fn gdl_uniform_prediction_regression_pin() {
        // Uniform prediction 0.25 per class vs a fixed small target,
        // evaluated against an explicit-loop reference.
        let n = 8usize;
        let mut p = ArrayD::<f64>::zeros(IxDyn(&[4, n]));
        p.fill(0.25);
        let mut g = ArrayD::<f64>::zeros(IxDyn(&[4, n]));
        // Classes sized 4, 2, 1, 1.
        let assignment = [0usize, 0, 0, 0, 1, 1, 2, 3];
        for (i, &c) in assignment.iter().enumerate() {
            g[[c, i]] = 1.0;
        }
        // Explicit reference evaluation.
        let vol = [4.0f64, 2.0, 1.0, 1.0];
        let w: Vec<f64> = vol.iter().map(|v| 1.0 / (v * v)).collect();
        let mut num = 0.0;
        let mut den = 0.0;
        for l in 0..4 {
            let inter = 0.25 * vol[l];
            let both = 0.25 * n as f64 + vol[l];
            num += w[l] * inter;
            den += w[l] * both;
        }
        let expected = 1.0 - 2.0 * num / (den + 1e-5);
        let got = generalized_dice_loss(
            &p.view(),
            &g.view(),
            1e-5,
            WeightMode::SquaredInverseVolume,
        )
        .unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn gdl_small_class_dominates_weighted_deficit() {
        // Two present classes sized 1 and 100 with the same per-voxel
        // error: the small class contributes at least as much weighted
        // numerator deficit w_l * (|g_l| - inter_l).
        let n = 101usize;
        let mut p = ArrayD::<f64>::zeros(IxDyn(&[4, n]));
        let mut g = ArrayD::<f64>::zeros(IxDyn(&[4, n]));
        g[[1, 0]] = 1.0; // small class: voxel 0
        for i in 1..n {
            g[[2, i]] = 1.0; // large class: 100 voxels
        }
        // Equal per-voxel error: predict 0.6 for the true class.
        for i in 0..n {
            for c in 0..4 {
                p[[c, i]] = if g[[c, i]] == 1.0 { 0.6 } else { 0.4 / 3.0 };
            }
        }
        let (w, vol) = super::gdl_weights(&g.view(), WeightMode::SquaredInverseVolume);
        let deficit = |l: usize| {
            let pl = p.index_axis(ndarray::Axis(0), l);
            let gl = g.index_axis(ndarray::Axis(0), l);
            let inter: f64 = pl.iter().zip(gl.iter()).map(|(&a, &b)| a * b).sum();
            w[l] * (vol[l] - inter)
        };
        assert!(deficit(1) >= deficit(2), "{} < {}", deficit(1), deficit(2));
    }

    #[test]
    fn gdl_weight_scaling_invariance_at_zero_eps() {
        // Scaling all weights by a constant cancels in the ratio when
        // eps = 0. Checked against a manually scaled evaluation.
        let (p, g) = random_instance(9);
        let base =
            generalized_dice_loss(&p.view(), &g.view(), 0.0, WeightMode::SquaredInverseVolume)
                .unwrap();
        // Recompute with explicitly scaled weights.
        let (w, _) = super::gdl_weights(&g.view(), WeightMode::SquaredInverseVolume);
        let scale = 7.5;
        let mut num = 0.0;
        let mut den = 0.0;
        for l in 0..4 {
            let pl = p.index_axis(ndarray::Axis(0), l);
            let gl = g.index_axis(ndarray::Axis(0), l);
            for (&pi, &gi) in pl.iter().zip(gl.iter()) {
                num += scale * w[l] * pi * gi;
                den += scale * w[l] * (pi + gi);
            }
        }
        let scaled = 1.0 - 2.0 * num / den;
        assert!((base - scaled).abs() < 1e-12);
    }

    #[test]
    fn gdl_absent_class_uses_clamped_weight() {
        // Class 3 absent: its weight equals the max finite weight, so a
        // false positive there still increases the loss.
        let n = 4usize;
        let mut g = ArrayD::<f64>::zeros(IxDyn(&[4, n]));
        for i in 0..n {
            g[[0, i]] = 1.0;
        }
        let mut clean = ArrayD::<f64>::zeros(IxDyn(&[4, n]));
        for i in 0..n {
            clean[[0, i]] = 1.0;
        }
        let mut fp = clean.clone();
        fp[[0, 0]] = 0.0;
        fp[[3, 0]] = 1.0; // false positive on the absent class
        let l_clean =
            generalized_dice_loss(&clean.view(), &g.view(), 1e-5, WeightMode::default()).unwrap();
        let l_fp =
            generalized_dice_loss(&fp.view(), &g.view(), 1e-5, WeightMode::default()).unwrap();
        assert!(l_fp > l_clean);
    }

    #[test]
    fn losses_stay_in_unit_interval() {
        for seed in 0..20 {
            let (p, g) = random_instance(seed + 200);
            let l = generalized_dice_loss(&p.view(), &g.view(), 1e-5, WeightMode::default())
                .unwrap();
            assert!((0.0..=1.0).contains(&l), "gdl {l}");
            let p1 = p.index_axis(ndarray::Axis(0), 0).to_owned().into_dyn();
            let g1 = g.index_axis(ndarray::Axis(0), 0).to_owned().into_dyn();
            let d = dice_loss(&p1.view(), &g1.view(), 1e-5).unwrap();
            assert!((0.0..=1.0 + 1e-9).contains(&d), "dice {d}");
        }
    }
}
