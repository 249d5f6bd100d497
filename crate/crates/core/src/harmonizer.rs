//! Harmonization without target images: search the style manifold for the
//! style under which the target-trained model segments the labeled source
//! subject best, then render whole source volumes with that single style.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bo::{run_bo, write_trace_csv, BoConfig, TraceRecord};
use crate::downstream::SegModel;
use crate::error::{Error, Result};
use crate::imagecore::{export_pgm, normalize_percentile, write_volume, Image, LabelMap, LabelVolume, Volume};
use crate::phantom::NORMALIZE_PERCENTILES;
use crate::metrics::overlap;
use crate::rng::derive_seed;
use crate::style_manifold::{apply_style, latent_to_params, ParamBounds, StyleLatent, StyleParams};

/// BO iterations at which the running-best style is rendered for the strip.
pub const SNAPSHOT_ITERATIONS: [usize; 5] = [0, 10, 25, 50, 100];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarmonizationConfig {
    pub bo: BoConfig,
    /// Seeds the style noise when `final_noise` is set, so that `z -> Dice`
    /// stays a deterministic map.
    pub noise_seed: u64,
    /// Guiding Dice is averaged over at most this many evenly spaced slices
    /// per labeled subject.
    pub max_guide_slices: usize,
    /// Keep the noise component. Candidates are scored exactly as the final
    /// output is rendered, so this also governs the search.
    pub final_noise: bool,
}

impl Default for HarmonizationConfig {
    fn default() -> Self {
        HarmonizationConfig {
            bo: BoConfig::default(),
            noise_seed: 0,
            max_guide_slices: 8,
            final_noise: false,
        }
    }
}

impl HarmonizationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_guide_slices == 0 {
            return Err(Error::Contract("max_guide_slices must be >= 1".into()));
        }
        if self.bo.init_samples == 0 {
            return Err(Error::Contract("init_samples must be >= 1".into()));
        }
        self.bo.validate()
    }
}

/// Evenly spaced slice indices, at most `max` of `n`.
pub fn guide_slices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        (0..max).map(|i| i * n / max).collect()
    }
}

/// The labeled source slices the search is guided by.
#[derive(Debug, Clone)]
pub struct GuideSet {
    /// Per subject: (slice index, image, labels).
    subjects: Vec<Vec<(usize, Image, LabelMap)>>,
}

impl GuideSet {
    pub fn new(subjects: &[(Volume, LabelVolume)], max_slices: usize) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::Contract("need at least one labeled source subject".into()));
        }
        let subjects = subjects
            .iter()
            .map(|(vol, lab)| {
                if vol.len() != lab.len() || vol.dims() != lab.dims() {
                    return Err(Error::DimensionMismatch {
                        left: vol.dims(),
                        right: lab.dims(),
                    });
                }
                Ok(guide_slices(vol.len(), max_slices)
                    .into_iter()
                    .map(|s| (s, vol.slices()[s].clone(), lab.slices()[s].clone()))
                    .collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GuideSet { subjects })
    }

    pub fn single(image: Image, label: LabelMap) -> Self {
        GuideSet {
            subjects: vec![vec![(0, image, label)]],
        }
    }

    pub fn slice_count(&self) -> usize {
        self.subjects.iter().map(Vec::len).sum()
    }

    /// Mean over subjects of the per-subject mean slice macro Dice, with the
    /// slices rendered as [`harmonize_volume`] would.
    pub fn dice_under(&self, params: &StyleParams, model: &SegModel, noise_seed: Option<u64>) -> Result<f64> {
        let per_subject = self
            .subjects
            .iter()
            .enumerate()
            .map(|(k, slices)| {
                let subject_seed = noise_seed.map(|n| subject_noise_seed(n, k));
                let dice = slices
                    .par_iter()
                    .map(|(s, img, lab)| {
                        let styled = render_harmonized(img, params, subject_seed, *s)?;
                        Ok(overlap(&model.predict(&styled)?, lab)?.macro_dice)
                    })
                    .collect::<Result<Vec<f64>>>()?;
                Ok(dice.iter().sum::<f64>() / dice.len() as f64)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(per_subject.iter().sum::<f64>() / per_subject.len() as f64)
    }
}

/// Guiding Dice of latent `z`; any failure or non-finite result is `-inf`.
pub fn objective_eval(z: &StyleLatent, guide: &GuideSet, model: &SegModel, cfg: &HarmonizationConfig) -> f64 {
    if z.0.iter().any(|v| !v.is_finite()) {
        return f64::NEG_INFINITY;
    }
    let params = latent_to_params(z, &ParamBounds::default());
    match guide.dice_under(&params, model, search_noise_seed(cfg)) {
        Ok(v) if v.is_finite() => v,
        _ => f64::NEG_INFINITY,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestStyle {
    pub latent: StyleLatent,
    pub params: StyleParams,
    pub best_dice: f64,
    /// Position of the winning evaluation in the trace.
    pub evaluation: usize,
}

#[derive(Debug, Clone)]
pub struct HarmonizationResult {
    pub best_latent: StyleLatent,
    pub best_params: StyleParams,
    pub best_dice: f64,
    pub trace: Vec<TraceRecord>,
    /// The first guide subject rendered with `best_params` by [`harmonize_volume`].
    pub harmonized: Volume,
}

impl HarmonizationResult {
    pub fn best_style(&self) -> BestStyle {
        BestStyle {
            latent: self.best_latent.clone(),
            params: self.best_params.clone(),
            best_dice: self.best_dice,
            evaluation: self
                .trace
                .iter()
                .position(|r| r.value == self.best_dice)
                .unwrap_or(0),
        }
    }

    /// Running-best style after each snapshot iteration that the trace reached.
    pub fn snapshot_styles(&self, init_samples: usize) -> Vec<(usize, StyleParams)> {
        let bounds = ParamBounds::default();
        SNAPSHOT_ITERATIONS
            .iter()
            .filter_map(|&it| {
                let upto = (init_samples + it).min(self.trace.len());
                if upto == 0 || init_samples + it > self.trace.len() {
                    return None;
                }
                let best = self.trace[..upto]
                    .iter()
                    .filter(|r| r.value.is_finite())
                    .fold(None::<&TraceRecord>, |acc, r| match acc {
                        Some(b) if b.value >= r.value => Some(b),
                        _ => Some(r),
                    })?;
                Some((it, latent_to_params(&StyleLatent(best.z.clone()), &bounds)))
            })
            .collect()
    }
}

/// Runs the style search and renders the first subject's full volume.
pub fn harmonize(
    subjects: &[(Volume, LabelVolume)],
    model: &SegModel,
    cfg: &HarmonizationConfig,
) -> Result<HarmonizationResult> {
    cfg.validate()?;
    let guide = GuideSet::new(subjects, cfg.max_guide_slices)?;
    let objective = |z: &[f64]| objective_eval(&StyleLatent(z.to_vec()), &guide, model, cfg);
    let state = run_bo(&objective, &cfg.bo)?;
    if !state.best_value.is_finite() {
        return Err(Error::Numerical("every style evaluation failed".into()));
    }
    let best_params = latent_to_params(&state.best_z, &ParamBounds::default());
    let harmonized = harmonize_volume(
        &subjects[0].0,
        &best_params,
        search_noise_seed(cfg).map(|n| subject_noise_seed(n, 0)),
    )?;
    Ok(HarmonizationResult {
        best_latent: state.best_z.clone(),
        best_params,
        best_dice: state.best_value,
        trace: state.trace,
        harmonized,
    })
}

/// Noise seed of the search and final rendering, `None` when noise is off.
pub fn search_noise_seed(cfg: &HarmonizationConfig) -> Option<u64> {
    cfg.final_noise.then_some(cfg.noise_seed)
}

/// Per-subject noise stream under a run-level noise seed.
pub fn subject_noise_seed(noise_seed: u64, subject: usize) -> u64 {
    derive_seed(noise_seed, "subject", subject as u64)
}

fn effective(params: &StyleParams, noise_seed: Option<u64>) -> StyleParams {
    match noise_seed {
        Some(_) => params.clone(),
        None => params.clone().without_noise(),
    }
}

/// Renders every slice with the same `params`; without a noise seed the noise
/// component is dropped.
pub fn apply_to_volume(vol: &Volume, params: &StyleParams, noise_seed: Option<u64>) -> Result<Volume> {
    let p = effective(params, noise_seed);
    let seed = noise_seed.unwrap_or(0);
    let slices = vol
        .slices()
        .par_iter()
        .enumerate()
        .map(|(s, img)| apply_style(img, &p, derive_seed(seed, "slice", s as u64)))
        .collect::<Result<Vec<_>>>()?;
    Volume::new(slices)
}

fn render_harmonized(img: &Image, params: &StyleParams, noise_seed: Option<u64>, slice: usize) -> Result<Image> {
    let p = effective(params, noise_seed);
    let styled = apply_style(img, &p, derive_seed(noise_seed.unwrap_or(0), "slice", slice as u64))?;
    let kept = styled
        .data()
        .iter()
        .zip(img.data())
        .map(|(&v, &orig)| if orig == 0.0 { 0.0 } else { v })
        .collect();
    let kept = Image::new(img.width(), img.height(), kept)?;
    normalize_percentile(&kept, NORMALIZE_PERCENTILES.0, NORMALIZE_PERCENTILES.1)
}

/// [`apply_to_volume`], then the input's zero background is restored and each
/// slice goes through the same percentile normalization as every model
/// input. This is the harmonized output.
pub fn harmonize_volume(vol: &Volume, params: &StyleParams, noise_seed: Option<u64>) -> Result<Volume> {
    let slices = vol
        .slices()
        .par_iter()
        .enumerate()
        .map(|(s, img)| render_harmonized(img, params, noise_seed, s))
        .collect::<Result<Vec<_>>>()?;
    Volume::new(slices)
}

/// Writes `trace.csv`, `best_style.json` and `harmonized.img1`.
pub fn write_result(result: &HarmonizationResult, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_trace_csv(&result.trace, dir.join("trace.csv"))?;
    let path = dir.join("best_style.json");
    let text = serde_json::to_string_pretty(&result.best_style())? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    write_volume(&result.harmonized, dir.join("harmonized.img1"))
}

/// PGM strip of `slice` rendered under the running-best style at each
/// snapshot iteration; returns the written paths.
pub fn write_snapshots(
    result: &HarmonizationResult,
    slice: &Image,
    init_samples: usize,
    dir: impl AsRef<Path>,
) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    result
        .snapshot_styles(init_samples)
        .into_iter()
        .map(|(it, p)| {
            let img = render_harmonized(slice, &p, None, 0)?;
            let path = dir.join(format!("snapshot_iter_{it:03}.pgm"));
            export_pgm(&img, &path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::downstream::{train, FeatureSpec, TrainConfig};
    use crate::phantom::{build_scenario, Bundle, Scenario};
    use crate::style_manifold::params_to_latent;
    use std::sync::OnceLock;

    /// In-domain bundle and its target-trained model.
    fn fixture() -> &'static (Bundle, SegModel) {
        static F: OnceLock<(Bundle, SegModel)> = OnceLock::new();
        F.get_or_init(|| {
            let b = build_scenario(&Scenario::default().in_domain(), 3).unwrap();
            let m = train(&b.training_set(), &FeatureSpec::default(), &TrainConfig::default()).unwrap();
            (b, m)
        })
    }

    fn subjects(b: &Bundle) -> Vec<(Volume, LabelVolume)> {
        b.source_labeled.iter().map(|s| (s.image.volume.clone(), s.labels.clone())).collect()
    }

    fn small_cfg(seed: u64) -> HarmonizationConfig {
        let mut cfg = HarmonizationConfig::default();
        cfg.bo.init_samples = 12;
        cfg.bo.iterations = 6;
        cfg.bo.seed = seed;
        cfg.bo.acquisition.pool_size = 64;
        cfg
    }

    #[test]
    fn guide_slice_spacing() {
        assert_eq!(guide_slices(4, 8), vec![0, 1, 2, 3]);
        assert_eq!(guide_slices(10, 4), vec![0, 2, 5, 7]);
        assert_eq!(guide_slices(3, 1), vec![0]);
    }

    #[test]
    fn volume_application() {
        let (b, _) = fixture();
        let vol = &b.travel_pairs[0].source.volume;
        let noisy_identity = StyleParams { noise_sigma: 0.02, ..StyleParams::IDENTITY };
        assert_eq!(&apply_to_volume(vol, &noisy_identity, None).unwrap(), vol);

        let p = StyleParams { scale: 1.2, offset: -0.05, gamma: 0.8, blur_sharp: 0.6, noise_sigma: 0.01 };
        let out = apply_to_volume(vol, &p, None).unwrap();
        assert_eq!(out.len(), vol.len());
        for (s, (o, i)) in out.slices().iter().zip(vol.slices()).enumerate() {
            assert_eq!(o, &apply_style(i, &p.clone().without_noise(), s as u64).unwrap());
        }
        let seeded = apply_to_volume(vol, &p, Some(5)).unwrap();
        for (s, (o, i)) in seeded.slices().iter().zip(vol.slices()).enumerate() {
            assert_eq!(o, &apply_style(i, &p, derive_seed(5, "slice", s as u64)).unwrap());
        }
        assert_ne!(seeded.slices()[0], seeded.slices()[1]);

        let h = harmonize_volume(vol, &p, None).unwrap();
        for (hs, src) in h.slices().iter().zip(vol.slices()) {
            assert!(hs.data().iter().all(|v| (0.0..=1.0).contains(v)));
            for (v, o) in hs.data().iter().zip(src.data()) {
                if *o == 0.0 {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn objective_contract() {
        let (b, m) = fixture();
        let cfg = HarmonizationConfig::default();
        let guide = GuideSet::new(&subjects(b), cfg.max_guide_slices).unwrap();
        assert_eq!(guide.slice_count(), 4);
        for seed in 0..5 {
            let z = crate::style_manifold::sample_latent(seed);
            let v = objective_eval(&z, &guide, m, &cfg);
            assert!((0.0..=1.0).contains(&v));
            assert_eq!(v, objective_eval(&z, &guide, m, &cfg));
        }
        assert_eq!(objective_eval(&StyleLatent(vec![f64::NAN; 5]), &guide, m, &cfg), f64::NEG_INFINITY);

        // Near-identity reproduces the in-domain Dice of the guide slices.
        let proxy = StyleParams { noise_sigma: 1e-9, ..StyleParams::IDENTITY };
        let z = params_to_latent(&proxy, &ParamBounds::default()).unwrap();
        let s = &b.source_labeled[0];
        let direct: f64 = s
            .image
            .volume
            .slices()
            .iter()
            .zip(s.labels.slices())
            .map(|(i, l)| overlap(&m.predict(i).unwrap(), l).unwrap().macro_dice)
            .sum::<f64>()
            / 4.0;
        assert!((objective_eval(&z, &guide, m, &cfg) - direct).abs() < 1e-3);
    }

    #[test]
    fn subjects_are_averaged() {
        let (b, m) = fixture();
        let p = StyleParams { gamma: 1.3, ..StyleParams::IDENTITY };
        let one = GuideSet::new(&subjects(b), 8).unwrap();
        let pair = &b.travel_pairs[0];
        let other = GuideSet::new(&[(pair.source.volume.clone(), pair.labels.clone())], 8).unwrap();
        let both = GuideSet::new(
            &[subjects(b)[0].clone(), (pair.source.volume.clone(), pair.labels.clone())],
            8,
        )
        .unwrap();
        let mean = 0.5 * (one.dice_under(&p, m, None).unwrap() + other.dice_under(&p, m, None).unwrap());
        assert!((both.dice_under(&p, m, None).unwrap() - mean).abs() < 1e-15);
    }

    #[test]
    fn result_contract() {
        let (b, m) = fixture();
        let cfg = small_cfg(1);
        let r = harmonize(&subjects(b), m, &cfg).unwrap();
        assert_eq!(r.trace.len(), 18);
        let max = r.trace.iter().map(|t| t.value).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(r.best_dice, max);
        assert_eq!(r.best_params, latent_to_params(&r.best_latent, &ParamBounds::default()));
        assert_eq!(r.trace[r.best_style().evaluation].value, r.best_dice);
        assert_eq!(r.harmonized, harmonize_volume(&subjects(b)[0].0, &r.best_params, None).unwrap());

        let again = harmonize(&subjects(b), m, &cfg).unwrap();
        assert_eq!(again.trace, r.trace);
        assert_eq!(again.harmonized, r.harmonized);

        // Only iteration 0 fits in 12 + 6 evaluations.
        let snaps = r.snapshot_styles(cfg.bo.init_samples);
        assert_eq!(snaps.len(), 1);
        let init_best = r.trace[..12].iter().map(|t| t.value).fold(f64::NEG_INFINITY, f64::max);
        let z = r.trace[..12].iter().find(|t| t.value == init_best).unwrap().z.clone();
        assert_eq!(snaps[0], (0, latent_to_params(&StyleLatent(z), &ParamBounds::default())));

        let dir = tempfile::tempdir().unwrap();
        write_result(&r, dir.path()).unwrap();
        let style: BestStyle =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("best_style.json")).unwrap()).unwrap();
        assert_eq!(style.params, r.best_params);
        assert_eq!(crate::imagecore::read_volume(dir.path().join("harmonized.img1")).unwrap().len(), 4);
        let paths = write_snapshots(&r, &b.source_labeled[0].image.volume.slices()[0], 12, dir.path()).unwrap();
        assert_eq!(paths, vec![dir.path().join("snapshot_iter_000.pgm")]);
    }

    #[test]
    fn invalid_inputs() {
        let (b, m) = fixture();
        assert!(harmonize(&[], m, &small_cfg(0)).is_err());
        let mut cfg = small_cfg(0);
        cfg.max_guide_slices = 0;
        assert!(harmonize(&subjects(b), m, &cfg).is_err());
        let s = &b.source_labeled[0];
        let short = LabelVolume::new(s.labels.slices()[..2].to_vec()).unwrap();
        assert!(GuideSet::new(&[(s.image.volume.clone(), short)], 8).is_err());
    }
}
