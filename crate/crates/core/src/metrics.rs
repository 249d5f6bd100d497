//! Image similarity (MSE/PSNR, SSIM) and segmentation overlap (Dice, IoU).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{convolve_separable, Image, LabelMap, CSF, GM, WM};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean squared error and PSNR for unit peak; identical images give `+inf`.
pub fn mse_psnr(a: &Image, b: &Image) -> Result<(f64, f64)> {
    a.same_dims(b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    let psnr = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    };
    Ok((mse, psnr))
}

fn ssim_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), unit dynamic range.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b)?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidImage(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let k = ssim_window();
    let (x, y) = (a.data(), b.data());
    let blur = |v: &[f64]| convolve_separable(v, w, h, &k);
    let mu_x = blur(x);
    let mu_y = blur(y);
    let xx = blur(&x.iter().map(|v| v * v).collect::<Vec<_>>());
    let yy = blur(&y.iter().map(|v| v * v).collect::<Vec<_>>());
    let xy = blur(&x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>());
    let total: f64 = (0..x.len())
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cxy = xy[i] - mx * my;
            ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / x.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassOverlap {
    pub class: u8,
    pub dice: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    /// CSF, GM, WM in that order.
    pub per_class: Vec<ClassOverlap>,
    pub macro_dice: f64,
    pub macro_iou: f64,
}

/// Per-class Dice/IoU over the three tissue classes; background excluded.
/// A class absent from both maps scores 1.
pub fn overlap(pred: &LabelMap, truth: &LabelMap) -> Result<OverlapReport> {
    if pred.dims() != truth.dims() {
        return Err(Error::DimensionMismatch {
            left: pred.dims(),
            right: truth.dims(),
        });
    }
    let mut inter = [0usize; 4];
    let mut p_count = [0usize; 4];
    let mut t_count = [0usize; 4];
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        p_count[usize::from(p)] += 1;
        t_count[usize::from(t)] += 1;
        if p == t {
            inter[usize::from(p)] += 1;
        }
    }
    let per_class: Vec<ClassOverlap> = [CSF, GM, WM]
        .into_iter()
        .map(|c| {
            let i = usize::from(c);
            let sum = p_count[i] + t_count[i];
            if sum == 0 {
                return ClassOverlap { class: c, dice: 1.0, iou: 1.0 };
            }
            let union = sum - inter[i];
            ClassOverlap {
                class: c,
                dice: 2.0 * inter[i] as f64 / sum as f64,
                iou: inter[i] as f64 / union as f64,
            }
        })
        .collect();
    let n = per_class.len() as f64;
    Ok(OverlapReport {
        macro_dice: per_class.iter().map(|c| c.dice).sum::<f64>() / n,
        macro_iou: per_class.iter().map(|c| c.iou).sum::<f64>() / n,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(seed: u64) -> Image {
        let mut rng = crate::rng::stream(seed);
        Image::from_fn(24, 20, |_, _| rng.gen::<f64>()).unwrap()
    }

    fn random_labels(seed: u64, n: usize) -> Vec<u8> {
        let mut rng = crate::rng::stream(seed);
        (0..n).map(|_| rng.gen_range(0..4u8)).collect()
    }

    #[test]
    fn psnr_examples() {
        let a = random_image(1);
        let (m, p) = mse_psnr(&a, &a).unwrap();
        assert_eq!(m, 0.0);
        assert_eq!(p, f64::INFINITY);

        let x = Image::filled(16, 16, 0.3).unwrap();
        let y = Image::filled(16, 16, 0.4).unwrap();
        let (m, p) = mse_psnr(&x, &y).unwrap();
        assert!((m - 0.01).abs() < 1e-15);
        assert!((p - 20.0).abs() < 1e-9);

        let b = random_image(2);
        let mut naive = 0.0;
        for yy in 0..a.height() {
            for xx in 0..a.width() {
                naive += (a.get(xx, yy) - b.get(xx, yy)).powi(2);
            }
        }
        naive /= a.len() as f64;
        assert!((mse_psnr(&a, &b).unwrap().0 - naive).abs() < 1e-12);
        assert!(mse_psnr(&a, &Image::filled(8, 8, 0.0).unwrap()).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = random_image(3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let x = Image::filled(16, 16, 0.4).unwrap();
        let y = Image::filled(16, 16, 0.6).unwrap();
        let want = (2.0 * 0.24 + 1e-4) / (0.52 + 1e-4);
        let got = ssim(&x, &y).unwrap();
        assert!((got - want).abs() < 1e-9);
        assert!((got - 0.92306).abs() < 1e-4);
        let b = random_image(4);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        let small = Image::filled(10, 12, 0.5).unwrap();
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn overlap_examples() {
        let t = LabelMap::new(8, 8, random_labels(5, 64)).unwrap();
        let r = overlap(&t, &t).unwrap();
        assert!(r.per_class.iter().all(|c| c.dice == 1.0 && c.iou == 1.0));
        assert_eq!(r.macro_dice, 1.0);

        let mut p = vec![0u8; 64];
        let mut q = vec![0u8; 64];
        p[..4].fill(1);
        q[4..8].fill(1);
        let r = overlap(&LabelMap::new(8, 8, p.clone()).unwrap(), &LabelMap::new(8, 8, q.clone()).unwrap()).unwrap();
        assert_eq!(r.per_class[0].dice, 0.0);
        assert_eq!(r.per_class[0].iou, 0.0);
        // Absent classes score 1.
        assert_eq!(r.per_class[1].dice, 1.0);

        q[..8].fill(0);
        q[2..6].fill(1);
        let r = overlap(&LabelMap::new(8, 8, p).unwrap(), &LabelMap::new(8, 8, q).unwrap()).unwrap();
        assert_eq!(r.per_class[0].dice, 0.5);
        assert!((r.per_class[0].iou - 1.0 / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn dice_iou_identity(seed in any::<u64>()) {
            let p = LabelMap::new(8, 8, random_labels(seed, 64)).unwrap();
            let t = LabelMap::new(8, 8, random_labels(seed ^ 1, 64)).unwrap();
            let r = overlap(&p, &t).unwrap();
            for c in &r.per_class {
                prop_assert!((c.dice - 2.0 * c.iou / (1.0 + c.iou)).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&c.dice) && (0.0..=1.0).contains(&c.iou));
            }
        }

        #[test]
        fn overlap_ignores_pixel_order(seed in any::<u64>()) {
            let p = random_labels(seed, 64);
            let t = random_labels(seed ^ 2, 64);
            let mut perm: Vec<usize> = (0..64).collect();
            let mut rng = crate::rng::stream(seed);
            for i in (1..64).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let pp: Vec<u8> = perm.iter().map(|&i| p[i]).collect();
            let tp: Vec<u8> = perm.iter().map(|&i| t[i]).collect();
            let a = overlap(&LabelMap::new(8, 8, p).unwrap(), &LabelMap::new(8, 8, t).unwrap()).unwrap();
            let b = overlap(&LabelMap::new(8, 8, pp).unwrap(), &LabelMap::new(8, 8, tp).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn ssim_is_bounded(seed in any::<u64>()) {
            let a = random_image(seed);
            let b = random_image(seed.wrapping_add(1));
            let s = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn psnr_decreases_with_mse(d1 in 0.001f64..0.5, extra in 0.001f64..0.4) {
            let base = Image::filled(12, 12, 0.1).unwrap();
            let near = Image::filled(12, 12, 0.1 + d1).unwrap();
            let far = Image::filled(12, 12, 0.1 + d1 + extra).unwrap();
            prop_assert!(mse_psnr(&base, &near).unwrap().1 > mse_psnr(&base, &far).unwrap().1);
        }
    }
}
