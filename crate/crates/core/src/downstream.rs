//! Target-domain tissue classifier: multinomial logistic regression over a
//! handful of local intensity features. Standardization is frozen from the
//! training data, so the model is sensitive to appearance shifts the way a
//! target-trained network is.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{box_mean, local_moments_raw, mirror_index, Image, LabelMap, NUM_CLASSES};

pub const NUM_FEATURES: usize = 6;
pub const FEATURE_NAMES: [&str; NUM_FEATURES] =
    ["bias", "intensity", "mean_r1", "std_r1", "mean_r2", "grad_mag"];
const STD_FLOOR: f64 = 1e-6;
const CHUNK: usize = 4096;

pub type FeatureRow = [f64; NUM_FEATURES];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub r1: usize,
    pub r2: usize,
    /// Per-feature standardization; the bias entry stays `(0, 1)`.
    pub means: FeatureRow,
    pub stds: FeatureRow,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec {
            r1: 1,
            r2: 3,
            means: [0.0; NUM_FEATURES],
            stds: [1.0; NUM_FEATURES],
        }
    }
}

impl FeatureSpec {
    fn check(&self) -> Result<()> {
        if self.r1 < 1 || self.r2 < 1 {
            return Err(Error::Contract("feature window radii must be >= 1".into()));
        }
        if self.stds.iter().any(|s| !(*s >= STD_FLOOR) || !s.is_finite())
            || self.means.iter().any(|m| !m.is_finite())
        {
            return Err(Error::Contract("feature standardization must be finite with std >= 1e-6".into()));
        }
        Ok(())
    }
}

fn raw_features(img: &Image, spec: &FeatureSpec) -> Vec<FeatureRow> {
    let (w, h) = img.dims();
    let v = img.data();
    let (m1, s1) = local_moments_raw(v, w, h, spec.r1);
    let m2 = box_mean(v, w, h, spec.r2);
    let mut out = Vec::with_capacity(v.len());
    for y in 0..h {
        let row = &v[y * w..(y + 1) * w];
        let up = &v[mirror_index(y as isize - 1, h) * w..][..w];
        let down = &v[mirror_index(y as isize + 1, h) * w..][..w];
        for x in 0..w {
            let (xl, xr) = (mirror_index(x as isize - 1, w), mirror_index(x as isize + 1, w));
            let gx = 0.5 * (row[xr] - row[xl]);
            let gy = 0.5 * (down[x] - up[x]);
            let i = y * w + x;
            out.push([1.0, v[i], m1[i], s1[i], m2[i], (gx * gx + gy * gy).sqrt()]);
        }
    }
    out
}

fn standardize(rows: &mut [FeatureRow], spec: &FeatureSpec) {
    for r in rows {
        for k in 1..NUM_FEATURES {
            r[k] = (r[k] - spec.means[k]) / spec.stds[k];
        }
    }
}

/// Six standardized features per pixel, row-major.
pub fn extract_features(img: &Image, spec: &FeatureSpec) -> Result<Vec<FeatureRow>> {
    spec.check()?;
    let mut rows = raw_features(img, spec);
    standardize(&mut rows, spec);
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub step: f64,
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 500,
            step: 0.5,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegModel {
    /// Classes by features.
    pub weights: [FeatureRow; NUM_CLASSES],
    pub feature_spec: FeatureSpec,
    pub train_loss_curve: Vec<f64>,
}

#[inline]
fn softmax(w: &[FeatureRow; NUM_CLASSES], x: &FeatureRow) -> [f64; NUM_CLASSES] {
    let mut z = [0.0; NUM_CLASSES];
    for (zc, wc) in z.iter_mut().zip(w) {
        *zc = wc.iter().zip(x).map(|(a, b)| a * b).sum();
    }
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for zc in &mut z {
        *zc = (*zc - m).exp();
        total += *zc;
    }
    for zc in &mut z {
        *zc /= total;
    }
    z
}

/// Distinct (feature row, label) pairs with multiplicities, in order of first
/// appearance. Brain-extracted images repeat the all-background row many
/// thousands of times.
fn compress(x: Vec<FeatureRow>, y: Vec<u8>) -> (Vec<FeatureRow>, Vec<u8>, Vec<f64>) {
    let mut index: HashMap<([u64; NUM_FEATURES], u8), usize> = HashMap::new();
    let (mut ux, mut uy, mut count) = (Vec::new(), Vec::new(), Vec::<f64>::new());
    for (row, label) in x.into_iter().zip(y) {
        let key = (row.map(f64::to_bits), label);
        match index.get(&key) {
            Some(&i) => count[i] += 1.0,
            None => {
                index.insert(key, ux.len());
                ux.push(row);
                uy.push(label);
                count.push(1.0);
            }
        }
    }
    (ux, uy, count)
}

/// Mean cross-entropy and its gradient over weighted rows, reduced chunk by
/// chunk in a fixed order so the result does not depend on the thread count.
fn loss_and_grad(
    w: &[FeatureRow; NUM_CLASSES],
    x: &[FeatureRow],
    y: &[u8],
    count: &[f64],
    total: f64,
) -> (f64, [FeatureRow; NUM_CLASSES]) {
    let partials: Vec<(f64, [FeatureRow; NUM_CLASSES])> = x
        .par_chunks(CHUNK)
        .zip(y.par_chunks(CHUNK))
        .zip(count.par_chunks(CHUNK))
        .map(|((xs, ys), cs)| {
            let mut loss = 0.0;
            let mut g = [[0.0; NUM_FEATURES]; NUM_CLASSES];
            for ((xi, &yi), &ci) in xs.iter().zip(ys).zip(cs) {
                let mut p = softmax(w, xi);
                loss -= ci * p[usize::from(yi)].max(1e-300).ln();
                p[usize::from(yi)] -= 1.0;
                for (gc, pc) in g.iter_mut().zip(p) {
                    let pc = ci * pc;
                    for (gk, xk) in gc.iter_mut().zip(xi) {
                        *gk += pc * xk;
                    }
                }
            }
            (loss, g)
        })
        .collect();
    let mut loss = 0.0;
    let mut g = [[0.0; NUM_FEATURES]; NUM_CLASSES];
    for (l, pg) in partials {
        loss += l;
        for (gc, pc) in g.iter_mut().zip(pg) {
            for (a, b) in gc.iter_mut().zip(pc) {
                *a += b;
            }
        }
    }
    for gc in &mut g {
        for v in gc {
            *v /= total;
        }
    }
    (loss / total, g)
}

/// Full-batch gradient descent on L2-penalized cross-entropy from zero weights.
/// Standardization is estimated once from the whole dataset and frozen.
pub fn train(dataset: &[(Image, LabelMap)], spec: &FeatureSpec, cfg: &TrainConfig) -> Result<SegModel> {
    if dataset.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if !(cfg.step > 0.0 && cfg.step.is_finite()) || !(cfg.l2 >= 0.0 && cfg.l2.is_finite()) {
        return Err(Error::Contract("step must be > 0 and l2 >= 0".into()));
    }
    let mut spec = FeatureSpec {
        means: [0.0; NUM_FEATURES],
        stds: [1.0; NUM_FEATURES],
        ..spec.clone()
    };
    spec.check()?;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (img, lab) in dataset {
        if img.dims() != lab.dims() {
            return Err(Error::DimensionMismatch {
                left: img.dims(),
                right: lab.dims(),
            });
        }
        x.extend(raw_features(img, &spec));
        y.extend_from_slice(lab.labels());
    }
    let mut present = [false; NUM_CLASSES];
    for &l in &y {
        present[usize::from(l)] = true;
    }
    if present.iter().filter(|p| **p).count() < 2 {
        return Err(Error::Degenerate("training labels contain a single class".into()));
    }

    let n = x.len() as f64;
    for k in 1..NUM_FEATURES {
        let mean = x.iter().map(|r| r[k]).sum::<f64>() / n;
        let var = x.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / n;
        spec.means[k] = mean;
        spec.stds[k] = var.sqrt().max(STD_FLOOR);
    }
    standardize(&mut x, &spec);
    let (x, y, count) = compress(x, y);

    let mut w = [[0.0; NUM_FEATURES]; NUM_CLASSES];
    let mut curve = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let (loss, g) = loss_and_grad(&w, &x, &y, &count, n);
        let penalty: f64 = w.iter().flatten().map(|v| v * v).sum::<f64>() * 0.5 * cfg.l2;
        curve.push(loss + penalty);
        for (wc, gc) in w.iter_mut().zip(g) {
            for (wk, gk) in wc.iter_mut().zip(gc) {
                *wk -= cfg.step * (gk + cfg.l2 * *wk);
            }
        }
    }
    if w.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("training diverged".into()));
    }
    Ok(SegModel {
        weights: w,
        feature_spec: spec,
        train_loss_curve: curve,
    })
}

impl SegModel {
    /// Per-pixel class probabilities.
    pub fn predict_proba(&self, img: &Image) -> Result<Vec<[f64; NUM_CLASSES]>> {
        let rows = extract_features(img, &self.feature_spec)?;
        Ok(rows.iter().map(|r| softmax(&self.weights, r)).collect())
    }

    /// Argmax labels; ties go to the lower class index.
    pub fn predict(&self, img: &Image) -> Result<LabelMap> {
        let rows = extract_features(img, &self.feature_spec)?;
        let labels = rows
            .iter()
            .map(|r| {
                let mut best = 0usize;
                let mut best_z = f64::NEG_INFINITY;
                for (c, wc) in self.weights.iter().enumerate() {
                    let z: f64 = wc.iter().zip(r).map(|(a, b)| a * b).sum();
                    if z > best_z {
                        best = c;
                        best_z = z;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::new(img.width(), img.height(), labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: SegModel = serde_json::from_str(&text)?;
        model.feature_spec.check()?;
        if model.weights.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Contract("model weights must be finite".into()));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::overlap;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::Rng;

    fn quadrants() -> (Image, LabelMap) {
        let levels = [0.1, 0.35, 0.6, 0.85];
        let class = |x: usize, y: usize| (usize::from(x >= 16) + 2 * usize::from(y >= 16)) as u8;
        let img = Image::from_fn(32, 32, |x, y| levels[usize::from(class(x, y))]).unwrap();
        let labels = (0..32 * 32).map(|i| class(i % 32, i / 32)).collect();
        (img, LabelMap::new(32, 32, labels).unwrap())
    }

    fn random_image(seed: u64, w: usize, h: usize) -> Image {
        let mut rng = crate::rng::stream(seed);
        Image::from_fn(w, h, |_, _| rng.gen::<f64>()).unwrap()
    }

    #[test]
    fn window_features_match_naive_loops() {
        let img = random_image(1, 13, 11);
        let spec = FeatureSpec::default();
        let f = extract_features(&img, &spec).unwrap();
        let (w, h) = img.dims();
        let at = |x: isize, y: isize| img.get(mirror_index(x, w), mirror_index(y, h));
        for y in 0..h as isize {
            for x in 0..w as isize {
                let window = |r: isize| {
                    let mut vals = Vec::new();
                    for dy in -r..=r {
                        for dx in -r..=r {
                            vals.push(at(x + dx, y + dy));
                        }
                    }
                    vals
                };
                let v1 = window(1);
                let mean1 = v1.iter().sum::<f64>() / 9.0;
                let std1 = (v1.iter().map(|v| (v - mean1).powi(2)).sum::<f64>() / 9.0).sqrt();
                let mean2 = window(3).iter().sum::<f64>() / 49.0;
                let grad = (0.5 * (at(x + 1, y) - at(x - 1, y))).hypot(0.5 * (at(x, y + 1) - at(x, y - 1)));
                let r = f[y as usize * w + x as usize];
                let want = [1.0, at(x, y), mean1, std1, mean2, grad];
                for k in 0..NUM_FEATURES {
                    assert!((r[k] - want[k]).abs() < 1e-9, "feature {k} at ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn constant_image_features() {
        let img = Image::filled(16, 16, 0.3).unwrap();
        let spec = FeatureSpec {
            means: [0.0, 0.1, 0.2, 0.05, 0.3, 0.02],
            stds: [1.0, 0.5, 0.5, 0.1, 0.5, 0.2],
            ..FeatureSpec::default()
        };
        let f = extract_features(&img, &spec).unwrap();
        for r in &f {
            assert_eq!(r[0], 1.0);
            assert!((r[1] - 0.4).abs() < 1e-12 && (r[2] - 0.2).abs() < 1e-12 && (r[4] - 0.0).abs() < 1e-12);
            assert!((r[3] + 0.5).abs() < 1e-12 && (r[5] + 0.1).abs() < 1e-12);
        }
        assert_eq!(f, extract_features(&img, &spec).unwrap());
    }

    #[test]
    fn separable_regions_are_learned() {
        let data = vec![quadrants()];
        let model = train(&data, &FeatureSpec::default(), &TrainConfig::default()).unwrap();
        assert_eq!(model.train_loss_curve.len(), 500);
        let pred = model.predict(&data[0].0).unwrap();
        let d = overlap(&pred, &data[0].1).unwrap().macro_dice;
        assert!(d >= 0.99, "dice {d}");
        let c = &model.train_loss_curve;
        assert!(c[10..].windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn zero_iterations_gives_uniform_probabilities() {
        let data = vec![quadrants()];
        let cfg = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        let model = train(&data, &FeatureSpec::default(), &cfg).unwrap();
        assert!(model.train_loss_curve.is_empty());
        for p in model.predict_proba(&data[0].0).unwrap() {
            assert!(p.iter().all(|v| *v == 0.25));
        }
        // All logits tie, so every pixel falls to class 0.
        assert!(model.predict(&data[0].0).unwrap().labels().iter().all(|l| *l == 0));
    }

    #[test]
    fn single_class_dataset_is_rejected() {
        let img = random_image(2, 16, 16);
        let lab = LabelMap::new(16, 16, vec![2; 256]).unwrap();
        assert!(matches!(
            train(&[(img, lab)], &FeatureSpec::default(), &TrainConfig::default()),
            Err(Error::Degenerate(_))
        ));
        assert!(train(&[], &FeatureSpec::default(), &TrainConfig::default()).is_err());
    }

    #[test]
    fn training_is_bitwise_reproducible_and_serializes() {
        let data = vec![quadrants()];
        let cfg = TrainConfig {
            iterations: 50,
            ..TrainConfig::default()
        };
        let a = train(&data, &FeatureSpec::default(), &cfg).unwrap();
        let b = train(&data, &FeatureSpec::default(), &cfg).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        a.save(&path).unwrap();
        assert_eq!(SegModel::load(&path).unwrap(), a);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..1000) {
            let mut rng = crate::rng::stream(seed);
            let mut weights = [[0.0; NUM_FEATURES]; NUM_CLASSES];
            for v in weights.iter_mut().flatten() {
                *v = rng.gen_range(-5.0..5.0);
            }
            let model = SegModel { weights, feature_spec: FeatureSpec::default(), train_loss_curve: vec![] };
            let img = random_image(seed, 12, 12);
            for p in model.predict_proba(&img).unwrap() {
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            prop_assert_eq!(model.predict(&img).unwrap(), model.predict(&img).unwrap());
        }

        #[test]
        fn prediction_is_a_per_pixel_map(seed in 0u64..1000) {
            // Transposing the image transposes every feature, hence the labels.
            let mut rng = crate::rng::stream(seed ^ 7);
            let mut weights = [[0.0; NUM_FEATURES]; NUM_CLASSES];
            for v in weights.iter_mut().flatten() {
                *v = rng.gen_range(-3.0..3.0);
            }
            let model = SegModel { weights, feature_spec: FeatureSpec::default(), train_loss_curve: vec![] };
            let img = random_image(seed, 10, 14);
            let t = Image::from_fn(14, 10, |x, y| img.get(y, x)).unwrap();
            let a = model.predict(&img).unwrap();
            let b = model.predict(&t).unwrap();
            for y in 0..14 {
                for x in 0..10 {
                    prop_assert_eq!(a.get(x, y), b.get(y, x));
                }
            }
        }
    }
}
