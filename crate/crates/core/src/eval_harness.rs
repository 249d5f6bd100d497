//! Before/after evaluation on travel pairs, with histogram matching as the
//! target-requiring baseline.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::downstream::SegModel;
use crate::error::{Error, Result};
use crate::imagecore::{Image, LabelMap};
use crate::metrics::{mse_psnr, overlap, ssim};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    None,
    HistogramMatching,
    Tgtfree,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::None, Method::HistogramMatching, Method::Tgtfree];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::HistogramMatching => "histogram_matching",
            Method::Tgtfree => "tgtfree",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub pair_id: String,
    pub method: Method,
    pub psnr: f64,
    pub ssim: f64,
    pub macro_dice: f64,
    pub macro_iou: f64,
}

/// Rank-order transform: the k-th smallest source pixel takes the k-th
/// smallest reference value. Ties are ordered by pixel index.
pub fn histogram_match(source: &Image, reference: &Image) -> Result<Image> {
    if source.len() != reference.len() {
        return Err(Error::Contract(format!(
            "histogram matching needs equal pixel counts, got {} and {}",
            source.len(),
            reference.len()
        )));
    }
    let mut sorted_ref = reference.data().to_vec();
    sorted_ref.sort_by(f64::total_cmp);
    if sorted_ref[0] == sorted_ref[sorted_ref.len() - 1] {
        return Err(Error::Degenerate("reference image is constant".into()));
    }
    let mut order: Vec<usize> = (0..source.len()).collect();
    let src = source.data();
    order.sort_by(|&a, &b| src[a].total_cmp(&src[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; src.len()];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = sorted_ref[rank];
    }
    Image::new(source.width(), source.height(), out)
}

fn row(pair_id: &str, method: Method, img: &Image, target: &Image, label: &LabelMap, model: &SegModel) -> Result<EvalRow> {
    let (_, psnr) = mse_psnr(img, target)?;
    let ov = overlap(&model.predict(img)?, label)?;
    Ok(EvalRow {
        pair_id: pair_id.to_string(),
        method,
        psnr,
        ssim: ssim(img, target)?,
        macro_dice: ov.macro_dice,
        macro_iou: ov.macro_iou,
    })
}

/// One row per method. Image similarity is measured against the
/// target-rendered image, overlap against the shared label.
pub fn evaluate_pair(
    pair_id: &str,
    source: &Image,
    target: &Image,
    label: &LabelMap,
    model: &SegModel,
    harmonized: &Image,
) -> Result<Vec<EvalRow>> {
    if source.dims() != target.dims() || source.dims() != label.dims() || source.dims() != harmonized.dims() {
        return Err(Error::DimensionMismatch {
            left: source.dims(),
            right: if source.dims() != target.dims() { target.dims() } else if source.dims() != label.dims() { label.dims() } else { harmonized.dims() },
        });
    }
    let matched = histogram_match(source, target)?;
    Ok(vec![
        row(pair_id, Method::None, source, target, label, model)?,
        row(pair_id, Method::HistogramMatching, &matched, target, label, model)?,
        row(pair_id, Method::Tgtfree, harmonized, target, label, model)?,
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        if !mean.is_finite() {
            return MeanStd { mean, std: f64::NAN };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub n: usize,
    pub psnr: MeanStd,
    pub ssim: MeanStd,
    pub macro_dice: MeanStd,
    pub macro_iou: MeanStd,
}

pub type Summary = BTreeMap<String, MethodSummary>;

pub fn summarize(rows: &[EvalRow]) -> Summary {
    let mut out = Summary::new();
    for m in Method::ALL {
        let sel: Vec<&EvalRow> = rows.iter().filter(|r| r.method == m).collect();
        if sel.is_empty() {
            continue;
        }
        let col = |f: fn(&EvalRow) -> f64| MeanStd::of(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
        out.insert(
            m.as_str().to_string(),
            MethodSummary {
                n: sel.len(),
                psnr: col(|r| r.psnr),
                ssim: col(|r| r.ssim),
                macro_dice: col(|r| r.macro_dice),
                macro_iou: col(|r| r.macro_iou),
            },
        );
    }
    out
}

fn fmt_metric(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v}")
    }
}

pub const REPORT_HEADER: &str = "pair_id,method,psnr,ssim,macro_dice,macro_iou";

pub fn rows_to_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.pair_id,
            r.method.as_str(),
            fmt_metric(r.psnr),
            fmt_metric(r.ssim),
            fmt_metric(r.macro_dice),
            fmt_metric(r.macro_iou)
        );
    }
    s
}

/// Writes `<path>` as CSV and `<path stem>_summary.json` beside it.
pub fn write_report(rows: &[EvalRow], path: impl AsRef<Path>) -> Result<Summary> {
    if rows.is_empty() {
        return Err(Error::Contract("report needs at least one row".into()));
    }
    let path = path.as_ref();
    std::fs::write(path, rows_to_csv(rows)).map_err(|e| Error::io(path, e))?;
    let summary = summarize(rows);
    let json_path = summary_path(path);
    // Infinite means (all-identical pairs) serialize as null.
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(summary)
}

pub fn summary_path(csv: &Path) -> std::path::PathBuf {
    let stem = csv.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    csv.with_file_name(format!("{stem}_summary.json"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::downstream::{FeatureSpec, SegModel, NUM_FEATURES};
    use crate::imagecore::NUM_CLASSES;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(seed: u64) -> Image {
        let mut rng = crate::rng::stream(seed);
        Image::from_fn(16, 12, |_, _| rng.gen::<f64>()).unwrap()
    }

    fn threshold_model() -> SegModel {
        let mut weights = [[0.0; NUM_FEATURES]; NUM_CLASSES];
        for (c, w) in weights.iter_mut().enumerate() {
            w[1] = 10.0 * c as f64;
            w[0] = -(c as f64).powi(2) * 2.5;
        }
        SegModel {
            weights,
            feature_spec: FeatureSpec::default(),
            train_loss_curve: vec![],
        }
    }

    #[test]
    fn histogram_match_examples() {
        let a = random_image(1);
        assert_eq!(histogram_match(&a, &a).unwrap(), a);
        let b = random_image(2);
        let m = histogram_match(&a, &b).unwrap();
        let mut got = m.data().to_vec();
        let mut want = b.data().to_vec();
        got.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        assert_eq!(got, want);

        let shifted = a.map(|v| v + 0.2).unwrap();
        assert_eq!(histogram_match(&shifted, &a).unwrap(), a);
        assert!(matches!(
            histogram_match(&a, &Image::filled(16, 12, 0.5).unwrap()),
            Err(Error::Degenerate(_))
        ));
        assert!(histogram_match(&a, &Image::filled(8, 8, 0.5).unwrap()).is_err());
    }

    #[test]
    fn ties_follow_pixel_order() {
        let src = Image::new(8, 8, vec![0.5; 64]).unwrap();
        let reference = Image::from_fn(8, 8, |x, y| (y * 8 + x) as f64).unwrap();
        assert_eq!(histogram_match(&src, &reference).unwrap(), reference);
    }

    #[test]
    fn pair_rows_and_report() {
        let model = threshold_model();
        let target = random_image(3);
        let source = target.map(|v| 0.8 * v).unwrap();
        let label = model.predict(&target).unwrap();
        let rows = evaluate_pair("p0", &source, &target, &label, &model, &target).unwrap();
        assert_eq!(rows.iter().map(|r| r.method).collect::<Vec<_>>(), Method::ALL);
        let (_, psnr_none) = mse_psnr(&source, &target).unwrap();
        assert_eq!(rows[0].psnr, psnr_none);
        assert_eq!(rows[2].psnr, f64::INFINITY);
        assert_eq!(rows[2].macro_dice, 1.0);

        let mut all = rows.clone();
        all.extend(evaluate_pair("p1", &source, &target, &label, &model, &source).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        let summary = write_report(&all, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.lines().nth(3).unwrap().starts_with("p0,tgtfree,inf,"));
        assert_eq!(summary.len(), 3);
        assert!(summary_path(&path).exists());

        // Summary means recomputed from the CSV text.
        for m in Method::ALL {
            let dice: Vec<f64> = text
                .lines()
                .skip(1)
                .map(|l| l.split(',').collect::<Vec<_>>())
                .filter(|c| c[1] == m.as_str())
                .map(|c| c[4].parse().unwrap())
                .collect();
            let mean = dice.iter().sum::<f64>() / dice.len() as f64;
            assert_eq!(summary[m.as_str()].macro_dice.mean, mean);
        }
        let again = dir.path().join("again.csv");
        write_report(&all, &again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    proptest! {
        #[test]
        fn histogram_match_is_idempotent(seed in any::<u64>()) {
            let a = random_image(seed);
            let r = random_image(seed ^ 0x55);
            let once = histogram_match(&a, &r).unwrap();
            prop_assert_eq!(histogram_match(&once, &r).unwrap(), once);
        }
    }
}
