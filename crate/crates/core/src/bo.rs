//! GP-UCB Bayesian optimization over the latent style box.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{GpState, KernelHyperparams, Posterior};
use crate::rng::derive_seed;
use crate::simplex::{self, SimplexOptions};
use crate::style_manifold::{LatentSampler, StyleLatent, LATENT_BOX, LATENT_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcquisitionConfig {
    pub beta: f64,
    pub pool_size: usize,
    pub refine_steps: usize,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig {
            beta: 0.1,
            pool_size: 2048,
            refine_steps: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoConfig {
    pub acquisition: AcquisitionConfig,
    pub init_samples: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Adam steps and learning rate for the fit on the initial design.
    pub init_fit_iterations: usize,
    pub init_fit_step: f64,
    /// Refit every this many iterations (0 disables refitting).
    pub refit_every: usize,
    pub refit_iterations: usize,
    pub refit_step: f64,
}

impl Default for BoConfig {
    fn default() -> Self {
        BoConfig {
            acquisition: AcquisitionConfig::default(),
            init_samples: 100,
            iterations: 100,
            seed: 0,
            init_fit_iterations: 50,
            init_fit_step: 0.1,
            refit_every: 10,
            refit_iterations: 10,
            refit_step: 0.1,
        }
    }
}

impl BoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.acquisition.beta >= 0.0) {
            return Err(Error::Contract("beta must be >= 0".into()));
        }
        if self.acquisition.pool_size == 0 {
            return Err(Error::Contract("pool_size must be >= 1".into()));
        }
        if self.init_samples + self.iterations == 0 {
            return Err(Error::Contract("evaluation budget must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Zero-based evaluation index; the initial design comes first.
    pub iteration: usize,
    pub z: Vec<f64>,
    /// Objective value, or negative infinity for a failed evaluation.
    pub value: f64,
    pub best_value: f64,
}

#[derive(Debug, Clone)]
pub struct BoState {
    pub gp: Option<GpState>,
    pub best_z: StyleLatent,
    pub best_value: f64,
    /// Completed sequential iterations (the initial design is not counted).
    pub iteration: usize,
    pub trace: Vec<TraceRecord>,
    pub rng_seed: u64,
}

impl BoState {
    pub fn new(rng_seed: u64) -> Self {
        BoState {
            gp: None,
            best_z: StyleLatent::zeros(),
            best_value: f64::NEG_INFINITY,
            iteration: 0,
            trace: Vec::new(),
            rng_seed,
        }
    }

    /// Wraps an existing surrogate; the incumbent is its best observation.
    pub fn from_gp(gp: GpState, rng_seed: u64) -> Self {
        let (i, v) = gp
            .values()
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
        BoState {
            best_z: StyleLatent(gp.inputs()[i].clone()),
            best_value: v,
            gp: Some(gp),
            iteration: 0,
            trace: Vec::new(),
            rng_seed,
        }
    }

    pub fn evaluations(&self) -> usize {
        self.trace.len()
    }

    fn record(&mut self, z: &[f64], value: f64) {
        let value = if value.is_finite() { value } else { f64::NEG_INFINITY };
        if value > self.best_value {
            self.best_value = value;
            self.best_z = StyleLatent(z.to_vec());
        }
        self.trace.push(TraceRecord {
            iteration: self.trace.len(),
            z: z.to_vec(),
            value,
            best_value: self.best_value,
        });
    }

    fn absorb(&mut self, z: &[f64], value: f64) -> Result<()> {
        if !value.is_finite() {
            return Ok(());
        }
        self.gp = Some(match self.gp.take() {
            None => GpState::new(vec![z.to_vec()], vec![value], KernelHyperparams::initial(z.len()))?,
            Some(gp) => add_with_noise_escalation(&gp, z, value)?,
        });
        Ok(())
    }
}

/// Appends an observation; if exact duplicates make the factorization fail,
/// the noise variance is raised until it succeeds.
fn add_with_noise_escalation(gp: &GpState, z: &[f64], value: f64) -> Result<GpState> {
    let mut err = match gp.add_observation(z, value) {
        Ok(g) => return Ok(g),
        Err(e) => e,
    };
    let mut theta = gp.theta().clone();
    for _ in 0..4 {
        theta.log_noise_var = theta.log_noise_var.max((1e-6f64).ln()) + 10f64.ln();
        match gp.with_theta(theta.clone()).and_then(|g| g.add_observation(z, value)) {
            Ok(g) => return Ok(g),
            Err(e) => err = e,
        }
    }
    Err(err)
}

/// `mean + sqrt(beta) * sqrt(variance)`.
pub fn ucb(post: &Posterior, beta: f64) -> f64 {
    post.mean + beta.sqrt() * post.variance.max(0.0).sqrt()
}

fn pool(seed: u64, size: usize) -> Vec<Vec<f64>> {
    let mut sampler = LatentSampler::new(seed);
    (0..size).map(|_| sampler.next_latent().0).collect()
}

/// Picks the next latent: best UCB over a seeded prior pool, polished by a
/// short box-constrained simplex ascent on the UCB surface.
pub fn propose_candidate(state: &BoState, cfg: &AcquisitionConfig) -> StyleLatent {
    let candidates = pool(derive_seed(state.rng_seed, "pool", state.iteration as u64), cfg.pool_size.max(1));
    let Some(gp) = &state.gp else {
        return StyleLatent(candidates.into_iter().next().expect("non-empty pool"));
    };
    let scores: Vec<f64> = gp
        .posterior_many(&candidates)
        .iter()
        .map(|p| ucb(p, cfg.beta))
        .collect();
    let (best_idx, _) = scores
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
    let start = candidates[best_idx].clone();
    if cfg.refine_steps == 0 {
        return StyleLatent(start);
    }
    let lo = vec![-LATENT_BOX; start.len()];
    let hi = vec![LATENT_BOX; start.len()];
    let opts = SimplexOptions {
        max_evals: usize::MAX,
        max_iters: cfg.refine_steps,
        initial_step: 0.1,
        f_tol: 1e-12,
        x_tol: 1e-6,
    };
    let refined = simplex::minimize(|z| -ucb(&gp.posterior(z), cfg.beta), &start, &lo, &hi, &opts);
    StyleLatent(refined.x).clamped()
}

/// A deterministic objective over latents. Non-finite returns count as failures.
pub trait Objective: Sync {
    fn evaluate(&self, z: &[f64]) -> f64;
}

impl<F: Fn(&[f64]) -> f64 + Sync> Objective for F {
    fn evaluate(&self, z: &[f64]) -> f64 {
        self(z)
    }
}

/// Runs the full search: a seeded random initial design, a hyperparameter
/// fit, then `iterations` rounds of propose / evaluate / update.
pub fn run_bo(objective: &dyn Objective, cfg: &BoConfig) -> Result<BoState> {
    cfg.validate()?;
    let mut state = BoState::new(cfg.seed);
    let mut sampler = LatentSampler::new(derive_seed(cfg.seed, "init", 0));
    let design: Vec<Vec<f64>> = (0..cfg.init_samples).map(|_| sampler.next_latent().0).collect();
    let values: Vec<f64> = design.par_iter().map(|z| objective.evaluate(z)).collect();

    let finite: Vec<usize> = (0..design.len()).filter(|&i| values[i].is_finite()).collect();
    for (z, &v) in design.iter().zip(&values) {
        state.record(z, v);
    }
    if !finite.is_empty() {
        let gp = GpState::new(
            finite.iter().map(|&i| design[i].clone()).collect(),
            finite.iter().map(|&i| values[i]).collect(),
            KernelHyperparams::initial(LATENT_DIM),
        )
        .or_else(|_| {
            let mut theta = KernelHyperparams::initial(LATENT_DIM);
            theta.log_noise_var = (1e-2f64).ln();
            GpState::new(
                finite.iter().map(|&i| design[i].clone()).collect(),
                finite.iter().map(|&i| values[i]).collect(),
                theta,
            )
        })?;
        state.gp = Some(if gp.n() >= 2 {
            gp.fit_hyperparameters(cfg.init_fit_iterations, cfg.init_fit_step)?
        } else {
            gp
        });
    }

    for t in 1..=cfg.iterations {
        let z = propose_candidate(&state, &cfg.acquisition);
        let value = objective.evaluate(&z.0);
        state.record(&z.0, value);
        state.absorb(&z.0, value)?;
        state.iteration = t;
        if cfg.refit_every > 0 && t % cfg.refit_every == 0 {
            if let Some(gp) = &state.gp {
                if gp.n() >= 2 {
                    state.gp = Some(gp.fit_hyperparameters(cfg.refit_iterations, cfg.refit_step)?);
                }
            }
        }
    }
    Ok(state)
}

pub fn trace_csv_header(dim: usize) -> String {
    let mut cols = vec!["iteration".to_string()];
    cols.extend((0..dim).map(|i| format!("z_{i}")));
    cols.push("value".into());
    cols.push("best_value".into());
    cols.join(",")
}

/// `iteration,z_0..z_{d-1},value,best_value`; floats in shortest round-trip form.
pub fn trace_to_csv(trace: &[TraceRecord]) -> String {
    let dim = trace.first().map_or(LATENT_DIM, |r| r.z.len());
    let mut out = trace_csv_header(dim);
    out.push('\n');
    for r in trace {
        out.push_str(&r.iteration.to_string());
        for v in &r.z {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push_str(&format!(",{},{}\n", r.value, r.best_value));
    }
    out
}

pub fn write_trace_csv(trace: &[TraceRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(trace_to_csv(trace).as_bytes())
        .map_err(|e| Error::io(path, e))
}
