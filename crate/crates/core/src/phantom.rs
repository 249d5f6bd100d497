//! Synthetic brain-like phantoms with exact tissue labels, and scanner
//! profiles that render them into traveling-subject scenarios.
//!
//! An anatomy is a short stack of slices whose geometry drifts smoothly with
//! slice position: a wobbled head outline with a thin CSF rim, a folded grey
//! matter ribbon, a white matter core and CSF-filled ventricles.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{
    gaussian_blur, normalize_percentile, read_labels, read_volume, write_labels, write_volume, Image, LabelMap,
    LabelVolume, Volume, BACKGROUND, CSF, GM, NUM_CLASSES, WM,
};
use crate::rng::{derive_seed, stream};
use crate::style_manifold::{apply_style, ParamBounds, StyleParams, LATENT_DIM, PARAM_NAMES};

pub const TISSUE_INTENSITY: [f64; NUM_CLASSES] = [0.0, 0.15, 0.45, 0.75];
pub const TEXTURE_AMPLITUDE: f64 = 0.03;
pub const PARTIAL_VOLUME_SIGMA: f64 = 0.5;
pub const NORMALIZE_PERCENTILES: (f64, f64) = (0.01, 0.99);
const MARGIN: f64 = 4.0;
const MAX_ATTEMPTS: usize = 10;
const MIN_CLASS_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnatomySpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub slices: usize,
    /// Head semi-axes in pixels before per-subject jitter.
    pub head_axes: (f64, f64),
    pub csf_thickness: f64,
    pub ribbon_thickness: f64,
    pub ventricle_count: usize,
    /// Ventricle semi-axes in pixels.
    pub ventricle_axes: (f64, f64),
    /// Relative depth of the grey/white folding.
    pub wobble_amplitude: f64,
    /// Number of folds around the circumference.
    pub wobble_frequency: f64,
}

impl Default for AnatomySpec {
    fn default() -> Self {
        AnatomySpec {
            seed: 0,
            width: 128,
            height: 128,
            slices: 4,
            head_axes: (52.0, 44.0),
            csf_thickness: 3.0,
            ribbon_thickness: 7.0,
            ventricle_count: 2,
            ventricle_axes: (4.0, 10.0),
            wobble_amplitude: 0.5,
            wobble_frequency: 7.0,
        }
    }
}

impl AnatomySpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        AnatomySpec { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        // Worst case: +4% axis jitter, +2% outline wobble, 3 pixels of centre shift.
        let fits = self.head_axes.0.max(self.head_axes.1) * 1.04 * 1.02 + 3.0 + MARGIN
            <= 0.5 * self.width.min(self.height) as f64;
        let finite = [
            self.head_axes.0,
            self.head_axes.1,
            self.csf_thickness,
            self.ribbon_thickness,
            self.ventricle_axes.0,
            self.ventricle_axes.1,
            self.wobble_amplitude,
            self.wobble_frequency,
        ]
        .iter()
        .all(|v| v.is_finite() && *v >= 0.0);
        if !finite || self.width < 16 || self.height < 16 || self.slices == 0 || !fits {
            return Err(Error::Contract(format!(
                "anatomy geometry does not fit a {}x{} canvas with a {MARGIN}-pixel margin",
                self.width, self.height
            )));
        }
        if self.csf_thickness + self.ribbon_thickness >= self.head_axes.0.min(self.head_axes.1) * 0.6 {
            return Err(Error::Contract("tissue layers leave no white matter core".into()));
        }
        Ok(())
    }
}

/// A sum of unit-normalized sinusoids in the polar angle.
#[derive(Debug, Clone)]
struct Wobble {
    terms: Vec<(f64, f64, f64)>, // (frequency, weight, phase)
}

impl Wobble {
    fn new(rng: &mut impl Rng, base_freq: f64, count: usize) -> Self {
        let mut terms: Vec<(f64, f64, f64)> = (0..count)
            .map(|k| {
                let f = (base_freq * (1.0 + 0.5 * k as f64)).round().max(1.0);
                (f, rng.gen_range(0.5..1.0), rng.gen_range(0.0..2.0 * PI))
            })
            .collect();
        let total: f64 = terms.iter().map(|t| t.1).sum();
        for t in &mut terms {
            t.1 /= total;
        }
        Wobble { terms }
    }

    fn at(&self, theta: f64, drift: f64) -> f64 {
        self.terms
            .iter()
            .map(|(f, w, p)| w * (f * theta + p + drift).sin())
            .sum()
    }
}

struct Ventricle {
    along: f64,
    across: f64,
    tilt: f64,
}

struct Geometry {
    cx: f64,
    cy: f64,
    rot: f64,
    a: f64,
    b: f64,
    outer: Wobble,
    csf: Wobble,
    folds: Wobble,
    ventricles: Vec<Ventricle>,
    texture: Vec<(f64, f64, f64, f64)>, // (kx, ky, kz, phase)
}

fn sample_geometry(spec: &AnatomySpec, seed: u64) -> Geometry {
    let mut rng = stream(seed);
    let cx = 0.5 * spec.width as f64 + rng.gen_range(-3.0..3.0);
    let cy = 0.5 * spec.height as f64 + rng.gen_range(-3.0..3.0);
    let rot = rng.gen_range(-0.3..0.3);
    let a = spec.head_axes.0 * rng.gen_range(0.94..1.04);
    let b = spec.head_axes.1 * rng.gen_range(0.94..1.04);
    let outer = Wobble::new(&mut rng, 2.0, 3);
    let csf = Wobble::new(&mut rng, 3.0, 2);
    let folds = Wobble::new(&mut rng, spec.wobble_frequency, 3);
    let ventricles = (0..spec.ventricle_count)
        .map(|k| {
            let side = if spec.ventricle_count == 1 {
                0.0
            } else {
                2.0 * k as f64 / (spec.ventricle_count - 1) as f64 - 1.0
            };
            Ventricle {
                along: side * (spec.ventricle_axes.0 + 2.0) + rng.gen_range(-1.0..1.0),
                across: rng.gen_range(-2.0..2.0),
                tilt: side * 0.25 + rng.gen_range(-0.1..0.1),
            }
        })
        .collect();
    let texture = (0..3)
        .map(|_| {
            let wavelength = rng.gen_range(30.0..80.0);
            let dir: f64 = rng.gen_range(0.0..2.0 * PI);
            let k = 2.0 * PI / wavelength;
            (k * dir.cos(), k * dir.sin(), rng.gen_range(-0.3..0.3), rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    Geometry {
        cx,
        cy,
        rot,
        a,
        b,
        outer,
        csf,
        folds,
        ventricles,
        texture,
    }
}

fn ellipse_radius(a: f64, b: f64, t: f64) -> f64 {
    a * b / ((b * t.cos()).powi(2) + (a * t.sin()).powi(2)).sqrt()
}

fn render_slice(spec: &AnatomySpec, g: &Geometry, slice: usize, damping: f64) -> (LabelMap, Image) {
    let (w, h) = (spec.width, spec.height);
    // Slice position in [-1, 1]; the head narrows and the ventricles shrink
    // away from the central slice.
    let t = if spec.slices == 1 {
        0.0
    } else {
        2.0 * slice as f64 / (spec.slices - 1) as f64 - 1.0
    };
    let shrink = 1.0 - 0.08 * t * t;
    let v_shrink = 1.0 - 0.3 * t * t;
    let drift = 0.25 * t;
    let (sin_r, cos_r) = g.rot.sin_cos();
    let amp = spec.wobble_amplitude * damping;

    let mut labels = Vec::with_capacity(w * h);
    let mut values = Vec::with_capacity(w * h);
    for py in 0..h {
        for px in 0..w {
            let dx = px as f64 + 0.5 - g.cx;
            let dy = py as f64 + 0.5 - g.cy;
            let (u, v) = (cos_r * dx + sin_r * dy, -sin_r * dx + cos_r * dy);
            let r = u.hypot(v);
            let theta = v.atan2(u);
            let r_out = ellipse_radius(g.a * shrink, g.b * shrink, theta) * (1.0 + 0.02 * damping * g.outer.at(theta, drift));
            let r_gm = r_out - spec.csf_thickness * (1.0 + 0.3 * damping * g.csf.at(theta, drift));
            let r_wm = r_gm - spec.ribbon_thickness * (1.0 + amp * g.folds.at(theta, drift));
            let mut class = if r > r_out {
                BACKGROUND
            } else if r > r_gm {
                CSF
            } else if r > r_wm {
                GM
            } else {
                WM
            };
            if class == WM {
                for vent in &g.ventricles {
                    let (s, c) = vent.tilt.sin_cos();
                    let (qu, qv) = (u - vent.along, v - vent.across);
                    let (eu, ev) = (c * qu + s * qv, -s * qu + c * qv);
                    let (va, vb) = (spec.ventricle_axes.0 * v_shrink, spec.ventricle_axes.1 * v_shrink);
                    if (eu / va).powi(2) + (ev / vb).powi(2) <= 1.0 {
                        class = CSF;
                    }
                }
            }
            let mut value = TISSUE_INTENSITY[usize::from(class)];
            if class != BACKGROUND {
                let tex: f64 = g
                    .texture
                    .iter()
                    .map(|(kx, ky, kz, p)| (kx * px as f64 + ky * py as f64 + kz * slice as f64 + p).cos())
                    .sum::<f64>()
                    / g.texture.len() as f64;
                value += TEXTURE_AMPLITUDE * tex;
            }
            labels.push(class);
            values.push(value);
        }
    }
    let img = Image::new(w, h, values).expect("finite phantom values");
    let img = gaussian_blur(&img, PARTIAL_VOLUME_SIGMA).expect("positive sigma");
    (LabelMap::new(w, h, labels).expect("valid classes"), img)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Anatomy {
    pub seed: u64,
    pub labels: LabelVolume,
    pub base: Volume,
}

fn classes_present(labels: &LabelMap) -> bool {
    let min = (MIN_CLASS_FRACTION * labels.labels().len() as f64).ceil() as usize;
    labels.histogram().iter().all(|&c| c >= min)
}

/// Deterministic labels and noise-free base intensities for `spec.seed`.
/// Geometry that loses a class is redrawn with damped wobble.
pub fn generate_anatomy(spec: &AnatomySpec) -> Result<Anatomy> {
    spec.validate()?;
    for attempt in 0..MAX_ATTEMPTS {
        let g = sample_geometry(spec, derive_seed(spec.seed, "geometry", attempt as u64));
        let damping = 0.5f64.powi(attempt as i32);
        let (labels, base): (Vec<LabelMap>, Vec<Image>) =
            (0..spec.slices).map(|s| render_slice(spec, &g, s, damping)).unzip();
        if labels.iter().all(classes_present) {
            return Ok(Anatomy {
                seed: spec.seed,
                labels: LabelVolume::new(labels)?,
                base: Volume::new(base)?,
            });
        }
    }
    Err(Error::Degenerate(format!(
        "anatomy seed {} lost a tissue class in {MAX_ATTEMPTS} attempts",
        spec.seed
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScannerProfile {
    pub name: String,
    pub base_style: StyleParams,
    /// Per-parameter standard deviation of the per-subject perturbation,
    /// truncated at three deviations.
    pub jitter: StyleParams,
    pub render_seed: u64,
}

impl ScannerProfile {
    pub fn validate(&self) -> Result<()> {
        let bounds = ParamBounds::default();
        let base = self.base_style.to_array();
        let jit = self.jitter.to_array();
        for k in 0..LATENT_DIM {
            let r = &bounds.ranges[k];
            if !(jit[k] >= 0.0) || !r.contains(base[k] - 3.0 * jit[k]) || !r.contains(base[k] + 3.0 * jit[k]) {
                return Err(Error::Contract(format!(
                    "profile {}: {} = {} +- 3 x {} leaves its bounds",
                    self.name, PARAM_NAMES[k], base[k], jit[k]
                )));
            }
        }
        Ok(())
    }

    fn noise_range(&self) -> (f64, f64) {
        let (b, j) = (self.base_style.noise_sigma, self.jitter.noise_sigma);
        ((b - 3.0 * j).max(0.0), b + 3.0 * j)
    }

    /// The style of subject `subject_index`, and whether it had to be clamped.
    pub fn subject_style(&self, subject_index: u64) -> (StyleParams, bool) {
        let mut rng = stream(derive_seed(self.render_seed, "jitter", subject_index));
        let base = self.base_style.to_array();
        let jit = self.jitter.to_array();
        let mut p = [0.0; LATENT_DIM];
        for k in 0..LATENT_DIM {
            let e: f64 = rng.sample::<f64, _>(StandardNormal).clamp(-3.0, 3.0);
            p[k] = base[k] + jit[k] * e;
        }
        let raw = StyleParams::from_array(p);
        let clamped = ParamBounds::default().clamp(&raw);
        let changed = clamped != raw;
        (clamped, changed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSubject {
    pub image: Image,
    pub style: StyleParams,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedVolume {
    pub volume: Volume,
    pub style: StyleParams,
    pub clamped: bool,
}

/// Styles `base`, zeroes everything outside the head (renderings are brain
/// extracted, as real scans are before harmonization) and normalizes.
fn render_image(base: &Image, labels: &LabelMap, style: &StyleParams, noise_seed: u64) -> Result<Image> {
    let styled = apply_style(base, style, noise_seed)?;
    let stripped = Image::new(
        styled.width(),
        styled.height(),
        styled
            .data()
            .iter()
            .zip(labels.labels())
            .map(|(&v, &l)| if l == BACKGROUND { 0.0 } else { v })
            .collect(),
    )?;
    normalize_percentile(&stripped, NORMALIZE_PERCENTILES.0, NORMALIZE_PERCENTILES.1)
}

/// One slice under the profile's style for `subject_index`.
pub fn render_subject(
    base: &Image,
    labels: &LabelMap,
    profile: &ScannerProfile,
    subject_index: u64,
) -> Result<RenderedSubject> {
    if base.dims() != labels.dims() {
        return Err(Error::DimensionMismatch {
            left: base.dims(),
            right: labels.dims(),
        });
    }
    let (style, clamped) = profile.subject_style(subject_index);
    let seed = derive_seed(derive_seed(profile.render_seed, "noise", subject_index), "slice", 0);
    Ok(RenderedSubject {
        image: render_image(base, labels, &style, seed)?,
        style,
        clamped,
    })
}

/// Every slice under one subject style; noise streams differ per slice.
pub fn render_volume(anatomy: &Anatomy, profile: &ScannerProfile, subject_index: u64) -> Result<RenderedVolume> {
    let (style, clamped) = profile.subject_style(subject_index);
    let subject_seed = derive_seed(profile.render_seed, "noise", subject_index);
    let slices = anatomy
        .base
        .slices()
        .iter()
        .zip(anatomy.labels.slices())
        .enumerate()
        .map(|(s, (img, lab))| render_image(img, lab, &style, derive_seed(subject_seed, "slice", s as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RenderedVolume {
        volume: Volume::new(slices)?,
        style,
        clamped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub anatomy: AnatomySpec,
    pub target: ScannerProfile,
    pub source: ScannerProfile,
    pub n_target_train: usize,
    pub n_source_labeled: usize,
    pub n_eval_travel_pairs: usize,
}

impl Default for Scenario {
    fn default() -> Self {
        let jitter = StyleParams {
            scale: 0.02,
            offset: 0.01,
            gamma: 0.02,
            blur_sharp: 0.05,
            noise_sigma: 0.0005,
        };
        Scenario {
            anatomy: AnatomySpec::default(),
            target: ScannerProfile {
                name: "target".into(),
                base_style: StyleParams {
                    noise_sigma: 0.01,
                    ..StyleParams::IDENTITY
                },
                jitter: jitter.clone(),
                render_seed: 101,
            },
            source: ScannerProfile {
                name: "source".into(),
                base_style: StyleParams {
                    scale: 0.7,
                    offset: 0.0,
                    gamma: 1.5,
                    blur_sharp: -0.8,
                    noise_sigma: 0.005,
                },
                jitter,
                render_seed: 202,
            },
            n_target_train: 3,
            n_source_labeled: 1,
            n_eval_travel_pairs: 3,
        }
    }
}

impl Scenario {
    /// The same scenario with the source rendered exactly like the target.
    pub fn in_domain(&self) -> Self {
        Scenario {
            source: ScannerProfile {
                name: "source".into(),
                ..self.target.clone()
            },
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_target_train == 0 || self.n_source_labeled == 0 || self.n_eval_travel_pairs == 0 {
            return Err(Error::Contract("scenario counts must all be >= 1".into()));
        }
        self.anatomy.validate()?;
        self.target.validate()?;
        self.source.validate()?;
        // An in-domain source shares the target's style distribution exactly.
        let same_domain = self.source.base_style == self.target.base_style && self.source.jitter == self.target.jitter;
        if !same_domain && self.source.noise_range().1 > self.target.noise_range().0 + 1e-12 {
            return Err(Error::Contract(
                "source noise may exceed target noise; styles can add noise but not remove it".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSubject {
    pub anatomy_seed: u64,
    pub labels: LabelVolume,
    pub image: RenderedVolume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TravelPair {
    pub anatomy_seed: u64,
    pub labels: LabelVolume,
    pub source: RenderedVolume,
    pub target: RenderedVolume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub scenario: Scenario,
    pub master_seed: u64,
    pub target_train: Vec<LabeledSubject>,
    pub source_labeled: Vec<LabeledSubject>,
    pub travel_pairs: Vec<TravelPair>,
}

impl Bundle {
    /// Every training slice with its labels.
    pub fn training_set(&self) -> Vec<(Image, LabelMap)> {
        self.target_train
            .iter()
            .flat_map(|s| s.image.volume.slices().iter().cloned().zip(s.labels.slices().iter().cloned()))
            .collect()
    }
}

/// Renders the target training set, the labeled source subjects and the
/// travel pairs. Subject `k` (counted across all three sets) uses anatomy seed
/// `derive_seed(master_seed, "anatomy", k)` and subject index `k`.
pub fn build_scenario(scn: &Scenario, master_seed: u64) -> Result<Bundle> {
    scn.validate()?;
    let total = scn.n_target_train + scn.n_source_labeled + scn.n_eval_travel_pairs;
    let seeds: Vec<u64> = (0..total as u64).map(|k| derive_seed(master_seed, "anatomy", k)).collect();
    let anatomies = seeds
        .iter()
        .map(|&s| generate_anatomy(&scn.anatomy.with_seed(s)))
        .collect::<Result<Vec<_>>>()?;
    let mut it = anatomies.into_iter().enumerate();
    let mut labeled = |n: usize, profile: &ScannerProfile| -> Result<Vec<LabeledSubject>> {
        (&mut it)
            .take(n)
            .map(|(k, a)| {
                Ok(LabeledSubject {
                    anatomy_seed: a.seed,
                    image: render_volume(&a, profile, k as u64)?,
                    labels: a.labels,
                })
            })
            .collect()
    };
    let target_train = labeled(scn.n_target_train, &scn.target)?;
    let source_labeled = labeled(scn.n_source_labeled, &scn.source)?;
    let travel_pairs = it
        .map(|(k, a)| {
            Ok(TravelPair {
                anatomy_seed: a.seed,
                source: render_volume(&a, &scn.source, k as u64)?,
                target: render_volume(&a, &scn.target, k as u64)?,
                labels: a.labels,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Bundle {
        scenario: scn.clone(),
        master_seed,
        target_train,
        source_labeled,
        travel_pairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    TargetTrain,
    SourceLabeled,
    TravelPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderEntry {
    pub profile: String,
    pub file: String,
    pub style: StyleParams,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub role: Role,
    pub index: usize,
    pub anatomy_seed: u64,
    pub labels_file: String,
    pub renders: Vec<RenderEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub master_seed: u64,
    pub scenario: Scenario,
    pub subjects: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn role_prefix(role: Role) -> &'static str {
    match role {
        Role::TargetTrain => "target_train",
        Role::SourceLabeled => "source_labeled",
        Role::TravelPair => "pair",
    }
}

/// Writes the bundle as IMG1 volumes plus `manifest.json`.
pub fn write_bundle(bundle: &Bundle, dir: impl AsRef<Path>) -> Result<BundleManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut subjects = Vec::new();
    let mut put = |role: Role, index: usize, seed: u64, labels: &LabelVolume, renders: &[(&str, &RenderedVolume)]| -> Result<()> {
        let stem = format!("{}_{index:03}", role_prefix(role));
        let labels_file = format!("{stem}_labels.img1");
        write_labels(labels, dir.join(&labels_file))?;
        let mut entries = Vec::new();
        for (profile, r) in renders {
            let file = format!("{stem}_{profile}.img1");
            write_volume(&r.volume, dir.join(&file))?;
            entries.push(RenderEntry {
                profile: profile.to_string(),
                file,
                style: r.style.clone(),
                clamped: r.clamped,
            });
        }
        subjects.push(ManifestEntry {
            role,
            index,
            anatomy_seed: seed,
            labels_file,
            renders: entries,
        });
        Ok(())
    };
    for (i, s) in bundle.target_train.iter().enumerate() {
        put(Role::TargetTrain, i, s.anatomy_seed, &s.labels, &[("target", &s.image)])?;
    }
    for (i, s) in bundle.source_labeled.iter().enumerate() {
        put(Role::SourceLabeled, i, s.anatomy_seed, &s.labels, &[("source", &s.image)])?;
    }
    for (i, p) in bundle.travel_pairs.iter().enumerate() {
        put(Role::TravelPair, i, p.anatomy_seed, &p.labels, &[("source", &p.source), ("target", &p.target)])?;
    }
    let manifest = BundleManifest {
        master_seed: bundle.master_seed,
        scenario: bundle.scenario.clone(),
        subjects,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads a bundle written by [`write_bundle`]. Intensities come back at the
/// 32-bit precision of the files.
pub fn read_bundle(dir: impl AsRef<Path>) -> Result<Bundle> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: BundleManifest = serde_json::from_str(&text)?;
    let render = |e: &ManifestEntry, profile: &str| -> Result<RenderedVolume> {
        let r = e
            .renders
            .iter()
            .find(|r| r.profile == profile)
            .ok_or_else(|| Error::Contract(format!("{:?} {} has no {profile} rendering", e.role, e.index)))?;
        Ok(RenderedVolume {
            volume: read_volume(dir.join(&r.file))?,
            style: r.style.clone(),
            clamped: r.clamped,
        })
    };
    let mut bundle = Bundle {
        scenario: manifest.scenario.clone(),
        master_seed: manifest.master_seed,
        target_train: Vec::new(),
        source_labeled: Vec::new(),
        travel_pairs: Vec::new(),
    };
    for e in &manifest.subjects {
        let labels = read_labels(dir.join(&e.labels_file))?;
        match e.role {
            Role::TargetTrain => bundle.target_train.push(LabeledSubject {
                anatomy_seed: e.anatomy_seed,
                labels,
                image: render(e, "target")?,
            }),
            Role::SourceLabeled => bundle.source_labeled.push(LabeledSubject {
                anatomy_seed: e.anatomy_seed,
                labels,
                image: render(e, "source")?,
            }),
            Role::TravelPair => bundle.travel_pairs.push(TravelPair {
                anatomy_seed: e.anatomy_seed,
                labels,
                source: render(e, "source")?,
                target: render(e, "target")?,
            }),
        }
    }
    if bundle.target_train.is_empty() || bundle.source_labeled.is_empty() || bundle.travel_pairs.is_empty() {
        return Err(Error::Contract(format!("bundle {} is missing a subject role", dir.display())));
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::mse_psnr;

    fn class_means(img: &Image, labels: &LabelMap) -> [f64; NUM_CLASSES] {
        let mut sum = [0.0; NUM_CLASSES];
        let mut n = [0usize; NUM_CLASSES];
        for (&v, &l) in img.data().iter().zip(labels.labels()) {
            sum[usize::from(l)] += v;
            n[usize::from(l)] += 1;
        }
        std::array::from_fn(|c| sum[c] / n[c] as f64)
    }

    #[test]
    fn anatomy_is_deterministic_and_complete() {
        let spec = AnatomySpec::default().with_seed(17);
        let a = generate_anatomy(&spec).unwrap();
        assert_eq!(a, generate_anatomy(&spec).unwrap());
        assert_ne!(a.labels, generate_anatomy(&spec.with_seed(18)).unwrap().labels);
        assert_eq!(a.base.len(), spec.slices);
        let min = (0.01 * (spec.width * spec.height) as f64).ceil() as usize;
        for (img, lab) in a.base.slices().iter().zip(a.labels.slices()) {
            assert!(lab.histogram().iter().all(|&c| c >= min), "{:?}", lab.histogram());
            let m = class_means(img, lab);
            assert!(m[WM as usize] > m[GM as usize] && m[GM as usize] > m[CSF as usize], "{m:?}");
        }
    }

    #[test]
    fn margin_is_clear() {
        for seed in 0..20 {
            let a = generate_anatomy(&AnatomySpec::default().with_seed(seed)).unwrap();
            for lab in a.labels.slices() {
                let (w, h) = lab.dims();
                for y in 0..h {
                    for x in 0..w {
                        if x < 4 || y < 4 || x >= w - 4 || y >= h - 4 {
                            assert_eq!(lab.get(x, y), BACKGROUND);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn slices_drift_smoothly() {
        let a = generate_anatomy(&AnatomySpec::default().with_seed(3)).unwrap();
        let s = a.labels.slices();
        for pair in s.windows(2) {
            let same = pair[0].labels().iter().zip(pair[1].labels()).filter(|(a, b)| a == b).count();
            assert!(same as f64 > 0.8 * pair[0].labels().len() as f64);
            assert_ne!(pair[0], pair[1]);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let small = AnatomySpec { width: 64, height: 64, ..AnatomySpec::default() };
        assert!(matches!(generate_anatomy(&small), Err(Error::Contract(_))));
        let thick = AnatomySpec { ribbon_thickness: 30.0, ..AnatomySpec::default() };
        assert!(thick.validate().is_err());
        assert!(AnatomySpec { slices: 0, ..AnatomySpec::default() }.validate().is_err());
    }

    #[test]
    fn identity_profile_renders_normalized_base() {
        let a = generate_anatomy(&AnatomySpec::default().with_seed(5)).unwrap();
        let profile = ScannerProfile {
            name: "id".into(),
            base_style: StyleParams::IDENTITY,
            jitter: StyleParams::from_array([0.0; LATENT_DIM]),
            render_seed: 9,
        };
        let (base, lab) = (&a.base.slices()[1], &a.labels.slices()[1]);
        let r = render_subject(base, lab, &profile, 4).unwrap();
        assert!(!r.clamped);
        assert_eq!(r.style, StyleParams::IDENTITY);
        let stripped = Image::new(
            base.width(),
            base.height(),
            base.data().iter().zip(lab.labels()).map(|(&v, &l)| if l == BACKGROUND { 0.0 } else { v }).collect(),
        )
        .unwrap();
        assert_eq!(r.image, normalize_percentile(&stripped, 0.01, 0.99).unwrap());
        assert_eq!(r, render_subject(base, lab, &profile, 4).unwrap());
        assert_eq!(render_volume(&a, &profile, 4).unwrap().volume.slices()[1], r.image);
    }

    #[test]
    fn jitter_is_truncated_and_clamped() {
        let mut p = Scenario::default().source;
        for k in 0..50 {
            let (s, clamped) = p.subject_style(k);
            assert!(!clamped);
            let (b, j, v) = (p.base_style.to_array(), p.jitter.to_array(), s.to_array());
            for i in 0..LATENT_DIM {
                assert!((v[i] - b[i]).abs() <= 3.0 * j[i] + 1e-12);
            }
        }
        p.base_style.noise_sigma = 0.0;
        p.jitter.noise_sigma = 0.01;
        assert!(p.validate().is_err());
        assert!((0..20).any(|k| p.subject_style(k).1));
        assert!((0..20).all(|k| p.subject_style(k).0.noise_sigma >= 0.0));
    }

    #[test]
    fn default_profiles_are_valid() {
        let scn = Scenario::default();
        scn.validate().unwrap();
        scn.in_domain().validate().unwrap();
        let mut noisy = scn.clone();
        noisy.source.base_style.noise_sigma = 0.02;
        assert!(noisy.validate().is_err());
        let mut empty = scn;
        empty.n_source_labeled = 0;
        assert!(empty.validate().is_err());
    }

    #[test]
    fn bundle_contract() {
        let scn = Scenario::default();
        let b = build_scenario(&scn, 11).unwrap();
        assert_eq!(b, build_scenario(&scn, 11).unwrap());
        assert_eq!(b.target_train.len(), scn.n_target_train);
        assert_eq!(b.source_labeled.len(), scn.n_source_labeled);
        assert_eq!(b.travel_pairs.len(), scn.n_eval_travel_pairs);
        assert_eq!(b.training_set().len(), scn.n_target_train * scn.anatomy.slices);

        let mut seeds: Vec<u64> = b.target_train.iter().chain(&b.source_labeled).map(|s| s.anatomy_seed).collect();
        seeds.extend(b.travel_pairs.iter().map(|p| p.anatomy_seed));
        let n = seeds.len();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), n);

        // A travel pair shares one anatomy but differs in appearance.
        for p in &b.travel_pairs {
            let a = generate_anatomy(&scn.anatomy.with_seed(p.anatomy_seed)).unwrap();
            assert_eq!(a.labels, p.labels);
            for (s, t) in p.source.volume.slices().iter().zip(p.target.volume.slices()) {
                assert!(mse_psnr(s, t).unwrap().1 < 25.0);
            }
        }
        assert_ne!(b.target_train[0].image, build_scenario(&scn, 12).unwrap().target_train[0].image);
    }

    #[test]
    fn bundle_round_trip() {
        let b = build_scenario(&Scenario::default(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_bundle(&b, dir.path()).unwrap();
        assert_eq!(manifest.subjects.len(), 7);
        assert!(dir.path().join("pair_002_target.img1").exists());
        let back = read_bundle(dir.path()).unwrap();
        assert_eq!(back.scenario, b.scenario);
        assert_eq!(back.master_seed, 4);
        let close = |x: &RenderedVolume, y: &RenderedVolume| {
            assert_eq!(x.style, y.style);
            for (a, b) in x.volume.slices().iter().zip(y.volume.slices()) {
                for (u, v) in a.data().iter().zip(b.data()) {
                    assert!((u - v).abs() <= 1e-7);
                }
            }
        };
        for (x, y) in back.travel_pairs.iter().zip(&b.travel_pairs) {
            assert_eq!(x.labels, y.labels);
            close(&x.source, &y.source);
            close(&x.target, &y.target);
        }
        for (x, y) in back.target_train.iter().zip(&b.target_train) {
            assert_eq!(x.labels, y.labels);
            close(&x.image, &y.image);
        }
        std::fs::remove_file(dir.path().join("source_labeled_000_source.img1")).unwrap();
        assert!(read_bundle(dir.path()).is_err());
    }
}
