//! Training losses (focal, soft Dice and their weighted sum) and the
//! volumetric foreground mIoU used for validation and test reporting.

use serde::{Deserialize, Serialize};

use crate::data::LabelVolume;
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Real};

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    pub w_focal: f64,
    pub w_dice: f64,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            w_focal: 1.0,
            w_dice: 1.0,
            dice_smooth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::config(format!("{prefix}.gamma"), "must be >= 0"));
        }
        if !(self.w_focal >= 0.0) || !(self.w_dice >= 0.0) {
            return Err(Error::config(format!("{prefix}.w_focal"), "loss weights must be >= 0"));
        }
        if self.w_focal == 0.0 && self.w_dice == 0.0 {
            return Err(Error::config(format!("{prefix}.w_focal"), "focal and dice weights are both zero"));
        }
        if !(self.dice_smooth >= 0.0) {
            return Err(Error::config(format!("{prefix}.dice_smooth"), "must be >= 0"));
        }
        Ok(())
    }
}

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: {a} predictions vs {b} targets")));
    }
    if a == 0 {
        return Err(Error::shape(format!("{what}: empty input")));
    }
    Ok(())
}

fn is_positive<T: Real>(y: T) -> bool {
    y > T::lit(0.5)
}

/// Mean focal loss `-(1-p_t)^γ log p_t` over pixels.
pub fn focal_loss<T: Real>(probs: &[T], target: &[T], gamma: f64) -> Result<T> {
    same_len(probs.len(), target.len(), "focal_loss")?;
    let g = T::lit(gamma);
    let total: T = probs
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let pt = if is_positive(y) { p } else { T::one() - p };
            let pt_c = pt.max(T::lit(PROB_EPS)).min(T::one() - T::lit(PROB_EPS));
            -(T::one() - pt).powf(g) * pt_c.ln()
        })
        .sum();
    Ok(total / T::lit(probs.len() as f64))
}

/// Mean binary cross-entropy with the same clamp as [`focal_loss`].
pub fn binary_cross_entropy<T: Real>(probs: &[T], target: &[T]) -> Result<T> {
    focal_loss(probs, target, 0.0)
}

/// Soft Dice loss `1 - (2 Σpy + s) / (Σp + Σy + s)`.
pub fn dice_loss<T: Real>(probs: &[T], target: &[T], smooth: f64) -> Result<T> {
    same_len(probs.len(), target.len(), "dice_loss")?;
    let s = T::lit(smooth);
    let inter: T = probs.iter().zip(target).map(|(&p, &y)| p * y).sum();
    let sp: T = probs.iter().copied().sum();
    let sy: T = target.iter().copied().sum();
    let den = sp + sy + s;
    if den == T::zero() {
        return Ok(T::zero());
    }
    Ok(T::one() - (T::lit(2.0) * inter + s) / den)
}

/// `w_focal·focal + w_dice·dice` evaluated on `sigmoid(logits)`.
pub fn combined_loss<T: Real>(logits: &[T], target: &[T], cfg: &LossConfig) -> Result<T> {
    same_len(logits.len(), target.len(), "combined_loss")?;
    let probs: Vec<T> = logits.iter().map(|&z| sigmoid(z)).collect();
    Ok(T::lit(cfg.w_focal) * focal_loss(&probs, target, cfg.gamma)?
        + T::lit(cfg.w_dice) * dice_loss(&probs, target, cfg.dice_smooth)?)
}

/// [`combined_loss`] together with its gradient with respect to the logits.
pub fn combined_loss_with_grad<T: Real>(logits: &[T], target: &[T], cfg: &LossConfig) -> Result<(T, Vec<T>)> {
    same_len(logits.len(), target.len(), "combined_loss")?;
    let n = T::lit(logits.len() as f64);
    let gamma = T::lit(cfg.gamma);
    let eps = T::lit(PROB_EPS);
    let s = T::lit(cfg.dice_smooth);
    let probs: Vec<T> = logits.iter().map(|&z| sigmoid(z)).collect();

    let inter: T = probs.iter().zip(target).map(|(&p, &y)| p * y).sum();
    let sp: T = probs.iter().copied().sum();
    let sy: T = target.iter().copied().sum();
    let den = sp + sy + s;
    let num = T::lit(2.0) * inter + s;

    let mut focal = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (&p, &y) in probs.iter().zip(target) {
        let q = T::one() - p;
        // d/dz of the focal term, written without negative powers of (1-p_t)
        let (value, dfocal) = if is_positive(y) {
            let inside = p > eps && p < T::one() - eps;
            let lp = p.max(eps).min(T::one() - eps).ln();
            let qg = q.powf(gamma);
            let d = gamma * qg * p * lp - if inside { qg * q } else { T::zero() };
            (-qg * lp, d)
        } else {
            let inside = q > eps && q < T::one() - eps;
            let lq = q.max(eps).min(T::one() - eps).ln();
            let pg = p.powf(gamma);
            let d = -gamma * pg * q * lq + if inside { pg * p } else { T::zero() };
            (-pg * lq, d)
        };
        focal += value;
        let ddice = if den == T::zero() {
            T::zero()
        } else {
            -(T::lit(2.0) * y * den - num) / (den * den) * p * q
        };
        grad.push(T::lit(cfg.w_focal) * dfocal / n + T::lit(cfg.w_dice) * ddice);
    }
    let dice = if den == T::zero() { T::zero() } else { T::one() - num / den };
    let loss = T::lit(cfg.w_focal) * focal / n + T::lit(cfg.w_dice) * dice;
    Ok((loss, grad))
}

/// Cross-entropy plus channel-averaged soft Dice over a softmax of `c`
/// channels by `n` pixels. Used by the fixed-output baselines.
pub fn softmax_ce_dice_with_grad<T: Real>(
    logits: &[T],
    c: usize,
    n: usize,
    labels: &[usize],
    smooth: f64,
) -> Result<(T, Vec<T>)> {
    if logits.len() != c * n || labels.len() != n || n == 0 {
        return Err(Error::shape(format!(
            "softmax loss: {} logits for {c}x{n}, {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidInput(format!("label {bad} out of range for {c} channels")));
    }
    let eps = T::lit(PROB_EPS);
    let s = T::lit(smooth);
    let nf = T::lit(n as f64);
    let cf = T::lit(c as f64);

    let mut probs = vec![T::zero(); c * n];
    for px in 0..n {
        let mx = (0..c).map(|ch| logits[ch * n + px]).fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for ch in 0..c {
            let e = (logits[ch * n + px] - mx).exp();
            probs[ch * n + px] = e;
            z += e;
        }
        for ch in 0..c {
            probs[ch * n + px] /= z;
        }
    }

    let mut ce = T::zero();
    for (px, &l) in labels.iter().enumerate() {
        ce -= probs[l * n + px].max(eps).ln();
    }
    ce /= nf;

    // dL/dP for the Dice part, channel by channel
    let mut dprob = vec![T::zero(); c * n];
    let mut dice = T::zero();
    for ch in 0..c {
        let p = &probs[ch * n..(ch + 1) * n];
        let mut inter = T::zero();
        let mut sp = T::zero();
        let mut sy = T::zero();
        for (px, &l) in labels.iter().enumerate() {
            let y = if l == ch { T::one() } else { T::zero() };
            inter += p[px] * y;
            sp += p[px];
            sy += y;
        }
        let den = sp + sy + s;
        let num = T::lit(2.0) * inter + s;
        dice += T::one() - num / den;
        for (px, &l) in labels.iter().enumerate() {
            let y = if l == ch { T::one() } else { T::zero() };
            dprob[ch * n + px] = -(T::lit(2.0) * y * den - num) / (den * den) / cf;
        }
    }
    dice /= cf;

    let mut grad = vec![T::zero(); c * n];
    for px in 0..n {
        let dot: T = (0..c).map(|ch| probs[ch * n + px] * dprob[ch * n + px]).sum();
        for ch in 0..c {
            let p = probs[ch * n + px];
            let onehot = if labels[px] == ch { T::one() } else { T::zero() };
            let dce = (p - onehot) / nf;
            grad[ch * n + px] = dce + p * (dprob[ch * n + px] - dot);
        }
    }
    Ok((ce + dice, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// IoU for classes `1..=num_classes`, background excluded.
    pub per_class: Vec<f64>,
    pub mean: f64,
}

/// Foreground IoU per class over a whole 3D volume. A class absent from both
/// volumes scores 1.
pub fn volume_miou(pred: &LabelVolume, gt: &LabelVolume, num_classes: usize) -> Result<MiouReport> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "volume_miou: prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut inter = vec![0usize; num_classes + 1];
    let mut union = vec![0usize; num_classes + 1];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p as usize, g as usize);
        if p > num_classes || g > num_classes {
            return Err(Error::InvalidInput(format!(
                "label {} exceeds class count {num_classes}",
                p.max(g)
            )));
        }
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let per_class: Vec<f64> = (1..=num_classes)
        .map(|c| if union[c] == 0 { 1.0 } else { inter[c] as f64 / union[c] as f64 })
        .collect();
    let mean = if per_class.is_empty() {
        1.0
    } else {
        per_class.iter().sum::<f64>() / per_class.len() as f64
    };
    Ok(MiouReport { per_class, mean })
}

/// Averages per-volume reports class by class (per-volume-then-mean order).
pub fn average_reports(reports: &[MiouReport]) -> Option<MiouReport> {
    let first = reports.first()?;
    let k = first.per_class.len();
    let mut per_class = vec![0.0; k];
    for r in reports {
        for (acc, v) in per_class.iter_mut().zip(&r.per_class) {
            *acc += v;
        }
    }
    for v in per_class.iter_mut() {
        *v /= reports.len() as f64;
    }
    let mean = reports.iter().map(|r| r.mean).sum::<f64>() / reports.len() as f64;
    Some(MiouReport { per_class, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn focal_at_half_probability() {
        let l = focal_loss(&[0.5f64], &[1.0], 2.0).unwrap();
        assert!((l - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((l - 0.173287).abs() < 1e-6);
    }

    #[test]
    fn focal_vanishes_for_confident_correct_prediction() {
        let l = focal_loss(&[1.0 - 1e-9f64], &[1.0], 2.0).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn dice_identity_and_disjoint() {
        let m: Vec<f64> = (0..64).map(|i| (i % 3 == 0) as u8 as f64).collect();
        assert_eq!(dice_loss(&m, &m, 1.0).unwrap(), 0.0);

        let mut p = vec![0.0f64; 200];
        let mut y = vec![0.0f64; 200];
        p[..100].iter_mut().for_each(|v| *v = 1.0);
        y[100..].iter_mut().for_each(|v| *v = 1.0);
        let l = dice_loss(&p, &y, 1.0).unwrap();
        assert!((l - (1.0 - 1.0 / 201.0)).abs() < 1e-12);
    }

    #[test]
    fn dice_half_cover() {
        // |p| = |y| = A, p covers half of y: 1 - (A + s)/(2A + s)
        let a = 400usize;
        let mut p = vec![0.0f64; 2 * a];
        let mut y = vec![0.0f64; 2 * a];
        y[..a].iter_mut().for_each(|v| *v = 1.0);
        p[a / 2..a / 2 + a].iter_mut().for_each(|v| *v = 1.0);
        let l = dice_loss(&p, &y, 1.0).unwrap();
        let expected = 1.0 - (a as f64 + 1.0) / (2.0 * a as f64 + 1.0);
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.5).abs() < 2.0 / a as f64);
    }

    #[test]
    fn combined_weights_select_terms() {
        let logits = [0.3f64, -1.2, 2.0, 0.0];
        let target = [1.0, 0.0, 1.0, 0.0];
        let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        let focal_only = LossConfig { w_dice: 0.0, ..LossConfig::default() };
        let c = combined_loss(&logits, &target, &focal_only).unwrap();
        assert_eq!(c, focal_loss(&probs, &target, 2.0).unwrap());
    }

    #[test]
    fn combined_gradient_matches_central_differences() {
        let logits: Vec<f64> = (0..16).map(|i| ((i as f64) * 0.71).sin() * 3.0).collect();
        let target: Vec<f64> = (0..16).map(|i| ((i * 7) % 5 < 2) as u8 as f64).collect();
        let cfg = LossConfig::default();
        let (loss, grad) = combined_loss_with_grad(&logits, &target, &cfg).unwrap();
        assert!((loss - combined_loss(&logits, &target, &cfg).unwrap()).abs() < 1e-14);
        let h = 1e-6;
        for i in 0..logits.len() {
            let mut lp = logits.clone();
            lp[i] += h;
            let mut lm = logits.clone();
            lm[i] -= h;
            let num = (combined_loss(&lp, &target, &cfg).unwrap() - combined_loss(&lm, &target, &cfg).unwrap())
                / (2.0 * h);
            let rel = (grad[i] - num).abs() / grad[i].abs().max(num.abs()).max(1e-12);
            assert!(rel < 1e-6, "i={i} analytic={} numeric={num}", grad[i]);
        }
    }

    #[test]
    fn softmax_loss_gradient_matches_central_differences() {
        let (c, n) = (3, 10);
        let logits: Vec<f64> = (0..c * n).map(|i| ((i as f64) * 1.3).cos() * 2.0).collect();
        let labels: Vec<usize> = (0..n).map(|i| (i * 2) % c).collect();
        let (_, grad) = softmax_ce_dice_with_grad(&logits, c, n, &labels, 1.0).unwrap();
        let h = 1e-6;
        for i in 0..logits.len() {
            let mut lp = logits.clone();
            lp[i] += h;
            let mut lm = logits.clone();
            lm[i] -= h;
            let f = |l: &[f64]| softmax_ce_dice_with_grad(l, c, n, &labels, 1.0).unwrap().0;
            let num = (f(&lp) - f(&lm)) / (2.0 * h);
            assert!((grad[i] - num).abs() < 1e-8, "i={i}");
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        assert!(matches!(focal_loss(&[0.5f64], &[1.0, 0.0], 2.0), Err(Error::Shape(_))));
        assert!(matches!(dice_loss(&[0.5f64], &[], 1.0), Err(Error::Shape(_))));
    }

    fn vol(d: usize, h: usize, w: usize, data: Vec<u16>) -> LabelVolume {
        LabelVolume::new([d, h, w], data).unwrap()
    }

    #[test]
    fn miou_counting_cases() {
        let gt = vol(1, 4, 4, (0..16).map(|i| (i < 8) as u16).collect());
        let same = volume_miou(&gt, &gt, 1).unwrap();
        assert_eq!(same.mean, 1.0);

        let empty = vol(1, 4, 4, vec![0; 16]);
        assert_eq!(volume_miou(&empty, &gt, 1).unwrap().per_class[0], 0.0);

        // 8 predicted voxels, 4 of them overlapping the 8 ground-truth voxels
        let pred = vol(1, 4, 4, (0..16).map(|i| (4..12).contains(&i) as u16).collect());
        let r = volume_miou(&pred, &gt, 1).unwrap();
        assert!((r.per_class[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn miou_absent_class_scores_one() {
        let gt = vol(2, 2, 2, vec![1, 1, 0, 0, 0, 0, 1, 0]);
        let r = volume_miou(&gt, &gt, 3).unwrap();
        assert_eq!(r.per_class, vec![1.0, 1.0, 1.0]);
    }

    proptest! {
        #[test]
        fn focal_with_zero_gamma_is_cross_entropy(
            probs in prop::collection::vec(0.001f64..0.999, 1..64),
            seed in any::<u64>(),
        ) {
            let target: Vec<f64> = probs.iter().enumerate()
                .map(|(i, _)| ((seed >> (i % 64)) & 1) as f64).collect();
            let focal = focal_loss(&probs, &target, 0.0).unwrap();
            let bce: f64 = probs.iter().zip(&target)
                .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
                .sum::<f64>() / probs.len() as f64;
            prop_assert!((focal - bce).abs() < 1e-9);
        }

        #[test]
        fn dice_is_bounded(
            pairs in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..64),
            smooth in 0.01f64..5.0,
        ) {
            let p: Vec<f64> = pairs.iter().map(|x| x.0).collect();
            let y: Vec<f64> = pairs.iter().map(|x| x.1 as u8 as f64).collect();
            let d = dice_loss(&p, &y, smooth).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn losses_are_non_negative(
            pairs in prop::collection::vec((-8.0f64..8.0, any::<bool>()), 1..64),
        ) {
            let z: Vec<f64> = pairs.iter().map(|x| x.0).collect();
            let y: Vec<f64> = pairs.iter().map(|x| x.1 as u8 as f64).collect();
            prop_assert!(combined_loss(&z, &y, &LossConfig::default()).unwrap() >= 0.0);
        }

        #[test]
        fn miou_symmetric_and_relabel_invariant(
            labels in prop::collection::vec((0u16..4, 0u16..4), 8..64),
            perm_seed in 0usize..24,
        ) {
            let n = labels.len();
            let a = vol(1, 1, n, labels.iter().map(|x| x.0).collect());
            let b = vol(1, 1, n, labels.iter().map(|x| x.1).collect());
            let ab = volume_miou(&a, &b, 3).unwrap();
            let ba = volume_miou(&b, &a, 3).unwrap();
            prop_assert_eq!(&ab, &ba);

            // permutation of the foreground labels {1,2,3}
            let perms = [[1u16, 2, 3], [1, 3, 2], [2, 1, 3], [2, 3, 1], [3, 1, 2], [3, 2, 1]];
            let p = perms[perm_seed % 6];
            let relabel = |v: &LabelVolume| {
                vol(1, 1, n, v.data().iter().map(|&l| if l == 0 { 0 } else { p[l as usize - 1] }).collect())
            };
            let r = volume_miou(&relabel(&a), &relabel(&b), 3).unwrap();
            prop_assert!((r.mean - ab.mean).abs() < 1e-12);
        }
    }
}
