//! The subcommands. Every run leaves a `provenance.json` in its output
//! directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use stylesearch_core::downstream::{train, SegModel};
use stylesearch_core::eval_harness::{evaluate_pair, write_report, EvalRow, Summary};
use stylesearch_core::harmonizer::{
    harmonize, harmonize_volume, search_noise_seed, subject_noise_seed, write_result, write_snapshots, BestStyle,
    HarmonizationResult,
};
use stylesearch_core::imagecore::{write_volume, LabelVolume, Volume};
use stylesearch_core::metrics::overlap;
use stylesearch_core::phantom::{build_scenario, read_bundle, write_bundle, Bundle};
use stylesearch_core::style_manifold::StyleParams;
use stylesearch_core::Error;

use crate::config::{Overrides, RunConfig};
use crate::{CliError, Command, Common};

pub const PROVENANCE_FILE: &str = "provenance.json";
pub const MODEL_FILE: &str = "model.json";
pub const REPORT_FILE: &str = "report.csv";
pub const ACCEPTANCE_FILE: &str = "acceptance.txt";

/// A volume written with a single style.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedStyle {
    pub file: String,
    pub slices: usize,
    pub style: StyleParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub version: String,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, PathBuf>,
    /// The one style every harmonized volume of the run was rendered with.
    pub style: Option<StyleParams>,
    pub applied: Vec<AppliedStyle>,
}

impl Provenance {
    fn new(command: &str, cfg: &RunConfig) -> Self {
        Provenance {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: cfg.for_provenance(),
            inputs: BTreeMap::new(),
            style: None,
            applied: Vec::new(),
        }
    }

    fn write(&self, dir: &Path) -> Result<(), CliError> {
        write_json(&dir.join(PROVENANCE_FILE), self)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)? + "\n";
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Runtime(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn resolve(common: &Common, snapshots: bool) -> Result<RunConfig, CliError> {
    let o = Overrides {
        seed: common.seed,
        out: common.out.clone(),
        snapshots,
    };
    RunConfig::resolve(common.config.as_deref(), &o)
}

fn progress(step: &str, t0: Instant) {
    eprintln!("[{:>7.1}s] {step}", t0.elapsed().as_secs_f64());
}

pub fn dispatch(cmd: &Command) -> Result<(), CliError> {
    match cmd {
        Command::Phantom { common } => {
            let cfg = resolve(common, false)?;
            let bundle = build_scenario(&cfg.scenario, cfg.seed)?;
            let dir = &cfg.output.dir;
            write_bundle(&bundle, dir)?;
            Provenance::new("phantom", &cfg).write(dir)
        }
        Command::Train { common, bundle } => {
            let cfg = resolve(common, false)?;
            let b = read_bundle(bundle)?;
            let dir = &cfg.output.dir;
            create_dir(dir)?;
            train_model(&b, &cfg)?.save(dir.join(MODEL_FILE))?;
            let mut p = Provenance::new("train", &cfg);
            p.inputs.insert("bundle".into(), bundle.clone());
            p.write(dir)
        }
        Command::Harmonize {
            common,
            bundle,
            model,
            snapshots,
        } => {
            let cfg = resolve(common, *snapshots)?;
            let b = read_bundle(bundle)?;
            let m = SegModel::load(model)?;
            let dir = &cfg.output.dir;
            let r = search(&b, &m, &cfg, dir)?;
            let mut p = Provenance::new("harmonize", &cfg);
            p.inputs.insert("bundle".into(), bundle.clone());
            p.inputs.insert("model".into(), model.clone());
            p.style = Some(r.best_params.clone());
            p.applied.push(AppliedStyle {
                file: "harmonized.img1".into(),
                slices: r.harmonized.len(),
                style: r.best_params.clone(),
            });
            p.write(dir)?;
            println!("best guiding dice {:.4}", r.best_dice);
            Ok(())
        }
        Command::Evaluate {
            common,
            bundle,
            model,
            style,
        } => {
            let cfg = resolve(common, false)?;
            let b = read_bundle(bundle)?;
            let m = SegModel::load(model)?;
            let text = std::fs::read_to_string(style).map_err(|e| io_err(style, e))?;
            let best: BestStyle = serde_json::from_str(&text).map_err(Error::from)?;
            let dir = &cfg.output.dir;
            let e = evaluate(&b, &m, &best.params, &cfg, dir)?;
            let mut p = Provenance::new("evaluate", &cfg);
            p.inputs.insert("bundle".into(), bundle.clone());
            p.inputs.insert("model".into(), model.clone());
            p.inputs.insert("style".into(), style.clone());
            p.style = Some(best.params.clone());
            p.applied = e.applied.clone();
            p.write(dir)?;
            print!("{}", summary_table(&e.summary));
            Ok(())
        }
        Command::Demo { common, snapshots } => {
            let cfg = resolve(common, *snapshots)?;
            let summary = demo(&cfg)?;
            print!("{summary}");
            Ok(())
        }
    }
}

pub fn train_model(b: &Bundle, cfg: &RunConfig) -> Result<SegModel, CliError> {
    Ok(train(
        &b.training_set(),
        &cfg.downstream.feature_spec(),
        &cfg.downstream.train_config(),
    )?)
}

fn guide_subjects(b: &Bundle) -> Vec<(Volume, LabelVolume)> {
    b.source_labeled
        .iter()
        .map(|s| (s.image.volume.clone(), s.labels.clone()))
        .collect()
}

/// Runs the style search on the bundle's labeled source subjects and writes
/// its artifacts (and the snapshot strip when enabled) under `dir`.
pub fn search(b: &Bundle, model: &SegModel, cfg: &RunConfig, dir: &Path) -> Result<HarmonizationResult, CliError> {
    let subjects = guide_subjects(b);
    let r = harmonize(&subjects, model, &cfg.harmonization)?;
    write_result(&r, dir)?;
    if cfg.output.snapshots {
        let slice = &subjects[0].0.slices()[0];
        write_snapshots(&r, slice, cfg.harmonization.bo.init_samples, dir.join("snapshots"))?;
    }
    Ok(r)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub rows: Vec<EvalRow>,
    pub summary: Summary,
    /// Mean Dice of the model on the target renderings.
    pub target_dice: f64,
    pub applied: Vec<AppliedStyle>,
    /// Per pair: largest adjacent-slice mean jump of the source and of the
    /// harmonized volume.
    pub slice_jumps: Vec<(f64, f64)>,
}

fn max_jump(v: &Volume) -> f64 {
    v.slices()
        .windows(2)
        .map(|w| (w[1].mean() - w[0].mean()).abs())
        .fold(0.0, f64::max)
}

/// Harmonizes every travel pair's source volume with `params`, scores each
/// slice and writes the harmonized volumes and the report under `dir`.
pub fn evaluate(
    b: &Bundle,
    model: &SegModel,
    params: &StyleParams,
    cfg: &RunConfig,
    dir: &Path,
) -> Result<Evaluation, CliError> {
    create_dir(dir)?;
    let noise = search_noise_seed(&cfg.harmonization);
    let mut rows = Vec::new();
    let mut applied = Vec::new();
    let mut slice_jumps = Vec::new();
    let (mut target_dice, mut n) = (0.0, 0usize);
    for (i, pair) in b.travel_pairs.iter().enumerate() {
        let h = harmonize_volume(&pair.source.volume, params, noise.map(|s| subject_noise_seed(s, 1 + i)))?;
        let file = format!("pair_{i:03}_harmonized.img1");
        write_volume(&h, dir.join(&file))?;
        applied.push(AppliedStyle {
            file,
            slices: h.len(),
            style: params.clone(),
        });
        slice_jumps.push((max_jump(&pair.source.volume), max_jump(&h)));
        for (s, (((src, tgt), lab), hs)) in pair
            .source
            .volume
            .slices()
            .iter()
            .zip(pair.target.volume.slices())
            .zip(pair.labels.slices())
            .zip(h.slices())
            .enumerate()
        {
            rows.extend(evaluate_pair(&format!("pair_{i:03}_slice_{s}"), src, tgt, lab, model, hs)?);
            target_dice += overlap(&model.predict(tgt)?, lab)?.macro_dice;
            n += 1;
        }
    }
    let summary = write_report(&rows, dir.join(REPORT_FILE))?;
    Ok(Evaluation {
        rows,
        summary,
        target_dice: target_dice / n as f64,
        applied,
        slice_jumps,
    })
}

pub fn summary_table(s: &Summary) -> String {
    let mut out = String::from("method              psnr            ssim            macro_dice      macro_iou\n");
    for (name, m) in s {
        let _ = writeln!(
            out,
            "{name:<19} {:>6.2} ± {:<5.2} {:>6.4} ± {:<6.4} {:>6.4} ± {:<6.4} {:>6.4} ± {:<6.4}",
            m.psnr.mean, m.psnr.std, m.ssim.mean, m.ssim.std, m.macro_dice.mean, m.macro_dice.std, m.macro_iou.mean,
            m.macro_iou.std
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

/// Pass/fail lines for one demo run.
pub fn demo_checks(r: &HarmonizationResult, e: &Evaluation) -> Vec<Check> {
    let (none, tgtfree) = (&e.summary["none"], &e.summary["tgtfree"]);
    let (dt, ds, dh) = (e.target_dice, none.macro_dice.mean, tgtfree.macro_dice.mean);
    let one_style = e.applied.iter().all(|a| a.style == r.best_params);
    let jumps_ok = e.slice_jumps.iter().all(|(s, h)| *h <= 2.0 * s);
    let worst = e.slice_jumps.iter().map(|(s, h)| h / s).fold(0.0, f64::max);
    vec![
        Check {
            name: "in-domain dice D_t >= 0.85",
            pass: dt >= 0.85,
            detail: format!("{dt:.4}"),
        },
        Check {
            name: "unharmonized dice D_s <= D_t - 0.10",
            pass: ds <= dt - 0.10,
            detail: format!("{ds:.4}"),
        },
        Check {
            name: "harmonized dice D_h >= D_s + 0.05",
            pass: dh >= ds + 0.05,
            detail: format!("{dh:.4}"),
        },
        Check {
            name: "harmonized dice D_h >= D_t - 0.05",
            pass: dh >= dt - 0.05,
            detail: format!("{dh:.4} vs {dt:.4}"),
        },
        Check {
            name: "psnr gain >= 2 dB",
            pass: tgtfree.psnr.mean >= none.psnr.mean + 2.0,
            detail: format!("{:.2} -> {:.2}", none.psnr.mean, tgtfree.psnr.mean),
        },
        Check {
            name: "ssim improves",
            pass: tgtfree.ssim.mean > none.ssim.mean,
            detail: format!("{:.4} -> {:.4}", none.ssim.mean, tgtfree.ssim.mean),
        },
        Check {
            name: "best-so-far nondecreasing",
            pass: r.trace.windows(2).all(|w| w[1].best_value >= w[0].best_value),
            detail: format!("{} evaluations, best {:.4}", r.trace.len(), r.best_dice),
        },
        Check {
            name: "one style for every volume",
            pass: one_style,
            detail: format!("{} volumes", e.applied.len()),
        },
        Check {
            name: "adjacent-slice jumps within 2x of source",
            pass: jumps_ok,
            detail: format!("worst ratio {worst:.3}"),
        },
    ]
}

pub fn format_checks(checks: &[Check]) -> String {
    let mut out = String::new();
    for c in checks {
        let _ = writeln!(out, "{} {:<42} {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let passed = checks.iter().filter(|c| c.pass).count();
    let _ = writeln!(out, "{passed}/{} checks passed", checks.len());
    out
}

/// Bundle, model, search and evaluation under `cfg.output.dir`; returns the
/// printed summary, which is also written to `acceptance.txt`.
pub fn demo(cfg: &RunConfig) -> Result<String, CliError> {
    let t0 = Instant::now();
    let dir = &cfg.output.dir;
    let bundle = build_scenario(&cfg.scenario, cfg.seed)?;
    write_bundle(&bundle, dir.join("bundle"))?;
    progress("bundle written", t0);
    let model = train_model(&bundle, cfg)?;
    model.save(dir.join(MODEL_FILE))?;
    progress("model trained", t0);
    let r = search(&bundle, &model, cfg, &dir.join("harmonize"))?;
    progress("style search done", t0);
    let e = evaluate(&bundle, &model, &r.best_params, cfg, &dir.join("evaluate"))?;
    progress("evaluation done", t0);

    let mut p = Provenance::new("demo", cfg);
    p.style = Some(r.best_params.clone());
    p.applied.push(AppliedStyle {
        file: "harmonize/harmonized.img1".into(),
        slices: r.harmonized.len(),
        style: r.best_params.clone(),
    });
    p.applied.extend(e.applied.iter().map(|a| AppliedStyle {
        file: format!("evaluate/{}", a.file),
        ..a.clone()
    }));
    p.write(dir)?;

    let mut text = summary_table(&e.summary);
    text.push_str(&format_checks(&demo_checks(&r, &e)));
    let path = dir.join(ACCEPTANCE_FILE);
    std::fs::write(&path, &text).map_err(|e| io_err(&path, e))?;
    Ok(text)
}
