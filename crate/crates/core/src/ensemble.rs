//! Monte-Carlo ensembles on paired noise paths, epsilon sweeps and the
//! refinement audit of the energy bracket.
//!
//! Within a pair both schemes consume the same increment at every step.
//! Samples run in parallel and are reduced in sample order, so every
//! statistic is a pure function of the inputs and the base seed.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scheme::{run_path_with, PathOptions, Problem, SchemeConfig, SchemeKind, Stepper};
use crate::sparse::Vector;

/// A problem together with the scheme that runs on it.
#[derive(Debug, Clone)]
pub struct RunSetup {
    pub problem: Arc<Problem>,
    pub config: SchemeConfig,
}

impl RunSetup {
    pub fn new(problem: Arc<Problem>, config: SchemeConfig) -> Self {
        RunSetup { problem, config }
    }
}

/// `eps = h^(2 + delta)` and `k = eps^(1 + delta)`.
pub fn recipe(h: f64, delta: f64) -> (f64, f64) {
    let eps = h.powf(2.0 + delta);
    (eps, eps.powf(1.0 + delta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub n_samples: usize,
    /// `(sample, message)` of excluded samples.
    pub failures: Vec<(u64, String)>,
    /// Terminal errors `e_s = |V_ref^M - V^M|_{L2}` of the surviving samples,
    /// in sample order.
    pub errors: Vec<f64>,
    pub mean_sq_error: f64,
    pub rms_error: f64,
    pub error_mean: f64,
    /// Sample variance of `e_s`.
    pub error_variance: f64,
    /// `E |V_ref^m - V^m|^2` for `m = 1..=M`.
    pub ms_by_step: Vec<f64>,
    pub max_ms_error: f64,
    /// 95 % normal-approximation half-width for `mean_sq_error`.
    pub ci_halfwidth: f64,
    /// Combined replay hash of every consumed increment.
    pub replay_hash: u64,
}

impl EnsembleStats {
    pub fn n_ok(&self) -> usize {
        self.errors.len()
    }
}

struct SampleOutcome {
    step_errors: Vec<f64>,
    hash: u64,
}

fn check_pair(reference: &RunSetup, candidate: &RunSetup) -> Result<()> {
    let (a, b) = (&reference.config, &candidate.config);
    if a.steps != b.steps || a.k != b.k || a.t_final != b.t_final {
        return Err(Error::config(format!(
            "paired schemes need the same time grid (k = {} with {} steps vs k = {} with {} steps)",
            a.k, a.steps, b.k, b.steps
        )));
    }
    if a.nu != b.nu {
        return Err(Error::config("paired schemes need the same viscosity"));
    }
    if !Arc::ptr_eq(&reference.problem, &candidate.problem)
        && !reference.problem.compatible_with(&candidate.problem)
    {
        return Err(Error::config(
            "paired schemes need the same mesh, spaces, data and noise model",
        ));
    }
    Ok(())
}

fn mass_distance_sq(problem: &Problem, a: &[f64], b: &[f64]) -> f64 {
    let d: Vector = a.iter().zip(b).map(|(x, y)| x - y).collect();
    problem.velocity_norm_sq(&d)
}

// One reference path against every candidate; a candidate failure only
// affects that candidate.
fn run_sample(
    ref_proto: &Stepper,
    cand_protos: &[Stepper],
    sample: u64,
    base_seed: u64,
) -> Result<Vec<Result<SampleOutcome>>> {
    let mut a = ref_proto.clone();
    let pa = a.problem().clone();
    let cfg = a.config().clone();
    let mut cands: Vec<Option<(Stepper, crate::scheme::State, Vec<f64>)>> = cand_protos
        .iter()
        .map(|c| Some((c.clone(), c.problem().initial_state(), Vec::with_capacity(cfg.steps))))
        .collect();
    let mut errs: Vec<Option<Error>> = cand_protos.iter().map(|_| None).collect();
    let mut sa = pa.initial_state();
    let mut h = DefaultHasher::new();
    for m in 1..=cfg.steps {
        let inc = pa.increment(base_seed, sample, m, cfg.k)?;
        if let Some(i) = &inc {
            i.replay_hash().hash(&mut h);
        }
        let wrap = |e| Error::Step { step: m, source: Box::new(e) };
        sa = a.step(&sa, inc.as_ref()).map_err(wrap)?.state;
        for (slot, err) in cands.iter_mut().zip(errs.iter_mut()) {
            let Some((st, sb, steps)) = slot else { continue };
            let pb = st.problem().clone();
            let res = (|| {
                if !Arc::ptr_eq(&pa, &pb) {
                    let inc_b = pb.increment(base_seed, sample, m, cfg.k)?;
                    if inc.as_ref().map(|i| i.replay_hash()) != inc_b.as_ref().map(|i| i.replay_hash()) {
                        return Err(Error::config("paired schemes received different noise increments"));
                    }
                }
                st.step(sb, inc.as_ref()).map_err(wrap)
            })();
            match res {
                Ok(out) => {
                    *sb = out.state;
                    steps.push(mass_distance_sq(&pa, sa.velocity.coeffs(), sb.velocity.coeffs()));
                }
                Err(e) => {
                    *err = Some(e);
                    *slot = None;
                }
            }
        }
    }
    let hash = h.finish();
    Ok(cands
        .into_iter()
        .zip(errs)
        .map(|(slot, err)| match (slot, err) {
            (Some((_, _, step_errors)), _) => Ok(SampleOutcome { step_errors, hash }),
            (None, Some(e)) => Err(e),
            (None, None) => unreachable!(),
        })
        .collect())
}

fn reduce(outcomes: Vec<Result<SampleOutcome>>, steps: usize) -> Result<EnsembleStats> {
    let n_samples = outcomes.len();
    let mut failures = Vec::new();
    let mut errors = Vec::new();
    let mut sq_sum = vec![0.0; steps];
    let mut h = DefaultHasher::new();
    for (s, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(o) => {
                for (acc, e) in sq_sum.iter_mut().zip(&o.step_errors) {
                    *acc += e;
                }
                errors.push(o.step_errors.last().copied().unwrap_or(0.0).sqrt());
                o.hash.hash(&mut h);
            }
            Err(e) => failures.push((s as u64, e.to_string())),
        }
    }
    if failures.len() * 100 > n_samples || errors.is_empty() {
        return Err(Error::Ensemble {
            failed: failures.len(),
            total: n_samples,
            first: failures.first().map(|f| f.1.clone()).unwrap_or_default(),
        });
    }
    let n = errors.len() as f64;
    let sq: Vec<f64> = errors.iter().map(|e| e * e).collect();
    let mean_sq_error = sq.iter().sum::<f64>() / n;
    let error_mean = errors.iter().sum::<f64>() / n;
    let (error_variance, sq_var) = if errors.len() > 1 {
        (
            errors.iter().map(|e| (e - error_mean).powi(2)).sum::<f64>() / (n - 1.0),
            sq.iter().map(|e| (e - mean_sq_error).powi(2)).sum::<f64>() / (n - 1.0),
        )
    } else {
        (0.0, 0.0)
    };
    let ms_by_step: Vec<f64> = sq_sum.iter().map(|s| s / n).collect();
    let max_ms_error = ms_by_step.iter().fold(0.0f64, |m, v| m.max(*v));
    Ok(EnsembleStats {
        n_samples,
        failures,
        errors,
        mean_sq_error,
        rms_error: mean_sq_error.sqrt(),
        error_mean,
        error_variance,
        ms_by_step,
        max_ms_error,
        ci_halfwidth: 1.96 * (sq_var / n).sqrt(),
        replay_hash: h.finish(),
    })
}

/// Runs `n_samples` paired paths of `reference` against each candidate.
/// The reference path of a sample is computed once and shared.
pub fn run_ensembles(
    reference: &RunSetup,
    candidates: &[RunSetup],
    n_samples: usize,
    base_seed: u64,
) -> Result<Vec<EnsembleStats>> {
    if n_samples == 0 {
        return Err(Error::config("an ensemble needs at least one sample"));
    }
    for c in candidates {
        check_pair(reference, c)?;
    }
    let mut ref_proto = Stepper::new(reference.problem.clone(), reference.config.clone())?;
    ref_proto.prepare()?;
    let cand_protos = candidates
        .iter()
        .map(|c| {
            let mut s = Stepper::new(c.problem.clone(), c.config.clone())?;
            s.prepare()?;
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let per_sample: Vec<Result<Vec<Result<SampleOutcome>>>> = (0..n_samples as u64)
        .into_par_iter()
        .map(|s| run_sample(&ref_proto, &cand_protos, s, base_seed))
        .collect();
    let mut columns: Vec<Vec<Result<SampleOutcome>>> =
        candidates.iter().map(|_| Vec::with_capacity(n_samples)).collect();
    for r in per_sample {
        match r {
            Ok(v) => {
                for (col, o) in columns.iter_mut().zip(v) {
                    col.push(o);
                }
            }
            Err(e) => {
                let msg = e.to_string();
                for col in columns.iter_mut() {
                    col.push(Err(Error::Solver(msg.clone())));
                }
            }
        }
    }
    columns
        .into_iter()
        .map(|c| reduce(c, reference.config.steps))
        .collect()
}

/// Runs `n_samples` paired paths of `reference` and `candidate`.
pub fn run_ensemble(
    reference: &RunSetup,
    candidate: &RunSetup,
    n_samples: usize,
    base_seed: u64,
) -> Result<EnsembleStats> {
    let mut v = run_ensembles(reference, std::slice::from_ref(candidate), n_samples, base_seed)?;
    Ok(v.pop().expect("one candidate"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum StepMode {
    /// Same `k` for every epsilon.
    Fixed { k: f64 },
    /// `k = eps^(1 + delta)` per epsilon.
    Recipe { delta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eps: f64,
    pub k: f64,
    pub steps: usize,
    pub k_over_eps: f64,
    /// `max_m E|.|^2 * h / sqrt(eps)`
    pub c_tilde: f64,
    pub stats: EnsembleStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub reference: SchemeKind,
    pub candidate: SchemeKind,
    pub mode: StepMode,
    pub h: f64,
    pub rows: Vec<SweepRow>,
    /// Least-squares slope of `log mean_sq_error` against `log eps`; `None`
    /// with fewer than two usable rows.
    pub slope: Option<f64>,
    /// Largest `c_tilde`, i.e. the constant of the fitted bound.
    pub c_tilde: f64,
    /// `max c_tilde / min c_tilde` over the rows.
    pub c_tilde_spread: f64,
    pub warnings: Vec<String>,
}

impl SweepResult {
    pub fn mean_sq_decreasing(&self) -> bool {
        self.rows
            .windows(2)
            .all(|w| w[1].stats.mean_sq_error < w[0].stats.mean_sq_error)
    }

    pub fn max_ms_decreasing(&self) -> bool {
        self.rows
            .windows(2)
            .all(|w| w[1].stats.max_ms_error < w[0].stats.max_ms_error)
    }

    pub fn variance_decreasing(&self) -> bool {
        self.rows
            .windows(2)
            .all(|w| w[1].stats.error_variance < w[0].stats.error_variance)
    }
}

/// Least-squares slope of `log y` against `log x` over the positive pairs.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

pub fn check_eps_list(eps_list: &[f64]) -> Result<()> {
    if eps_list.is_empty() {
        return Err(Error::config("eps list is empty"));
    }
    if eps_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::config("eps list must be strictly decreasing"));
    }
    if let Some(bad) = eps_list.iter().find(|e| !(**e > 0.0 && **e <= 1.0)) {
        return Err(Error::config(format!("every eps must satisfy 0 < ε ≤ 1, got {bad}")));
    }
    Ok(())
}

/// Paired ensembles of `reference` against `candidate` for each epsilon.
/// Every row uses the same base seed.
pub fn epsilon_sweep(
    problem: &Arc<Problem>,
    reference: &SchemeConfig,
    candidate: &SchemeConfig,
    eps_list: &[f64],
    mode: StepMode,
    n_samples: usize,
    base_seed: u64,
) -> Result<SweepResult> {
    check_eps_list(eps_list)?;
    let h = problem.h_max();
    let mut rows = Vec::with_capacity(eps_list.len());
    let mut warnings = Vec::new();
    let mut setups = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let k = match mode {
            StepMode::Fixed { k } => k,
            StepMode::Recipe { delta } => eps.powf(1.0 + delta),
        };
        let cand = candidate.with_eps(eps)?.with_k(k)?;
        if cand.k_over_eps() >= 1.0 {
            warnings.push(format!(
                "k/ε = {:.3} ≥ 1 at ε = {eps:e}; the penalty limit needs k/ε → 0",
                cand.k_over_eps()
            ));
        }
        setups.push((reference.with_k(k)?, cand));
    }
    let stats: Vec<EnsembleStats> = match mode {
        StepMode::Fixed { .. } => {
            let refc = RunSetup::new(problem.clone(), setups[0].0.clone());
            let cands: Vec<RunSetup> = setups
                .iter()
                .map(|(_, c)| RunSetup::new(problem.clone(), c.clone()))
                .collect();
            run_ensembles(&refc, &cands, n_samples, base_seed)?
        }
        StepMode::Recipe { .. } => setups
            .iter()
            .map(|(r, c)| {
                run_ensemble(
                    &RunSetup::new(problem.clone(), r.clone()),
                    &RunSetup::new(problem.clone(), c.clone()),
                    n_samples,
                    base_seed,
                )
            })
            .collect::<Result<_>>()?,
    };
    for ((_, cand), stats) in setups.into_iter().zip(stats) {
        let eps = cand.eps;
        rows.push(SweepRow {
            eps,
            k: cand.k,
            steps: cand.steps,
            k_over_eps: cand.k_over_eps(),
            c_tilde: stats.max_ms_error * h / eps.sqrt(),
            stats,
        });
    }
    let eps: Vec<f64> = rows.iter().map(|r| r.eps).collect();
    let ms: Vec<f64> = rows.iter().map(|r| r.stats.mean_sq_error).collect();
    let slope = log_log_slope(&eps, &ms);
    let c_max = rows.iter().fold(0.0f64, |m, r| m.max(r.c_tilde));
    let c_min = rows.iter().fold(f64::INFINITY, |m, r| m.min(r.c_tilde));
    Ok(SweepResult {
        reference: reference.kind,
        candidate: candidate.kind,
        mode,
        h,
        rows,
        slope,
        c_tilde: c_max,
        c_tilde_spread: if c_min > 0.0 { c_max / c_min } else { f64::INFINITY },
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditLevel {
    pub h: f64,
    pub eps: f64,
    pub k: f64,
    pub steps: usize,
    /// Mean over samples of
    /// `max_m |V^m|^2 + k nu sum_m |grad V^m|^2 + sum_m |V^m - V^{m-1}|^2`.
    pub bracket: f64,
    pub ci_halfwidth: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub levels: Vec<AuditLevel>,
    /// Ratio of consecutive brackets (0 when both vanish).
    pub growth: Vec<f64>,
    /// True when some ratio exceeds 2.
    pub flagged: bool,
}

/// Monte-Carlo estimate of the energy bracket on a sequence of refinements.
/// `build(h)` returns the problem and scheme for mesh size `h`.
pub fn stability_audit<F>(build: F, hs: &[f64], n_samples: usize, base_seed: u64) -> Result<AuditReport>
where
    F: Fn(f64) -> Result<RunSetup>,
{
    if n_samples == 0 {
        return Err(Error::config("an audit needs at least one sample"));
    }
    let mut levels = Vec::with_capacity(hs.len());
    for &h in hs {
        let setup = build(h)?;
        let mut proto = Stepper::new(setup.problem.clone(), setup.config.clone())?;
        proto.prepare()?;
        let cfg = setup.config.clone();
        let results: Vec<Result<f64>> = (0..n_samples as u64)
            .into_par_iter()
            .map(|s| {
                let mut st = proto.clone();
                let tr = run_path_with(&mut st, base_seed, s, PathOptions::default())?;
                let max_v = tr.energy.iter().fold(0.0f64, |m, e| m.max(e.velocity_sq));
                let grad: f64 = tr.energy.iter().map(|e| e.grad_sq).sum();
                let jumps: f64 = tr.energy.iter().map(|e| e.velocity_jump_sq).sum();
                Ok(max_v + cfg.k * cfg.nu * grad + jumps)
            })
            .collect();
        let mut vals = Vec::new();
        let mut failures = Vec::new();
        for (s, r) in results.into_iter().enumerate() {
            match r {
                Ok(v) => vals.push(v),
                Err(e) => failures.push((s, e.to_string())),
            }
        }
        if failures.len() * 100 > n_samples || vals.is_empty() {
            return Err(Error::Ensemble {
                failed: failures.len(),
                total: n_samples,
                first: failures.first().map(|f| f.1.clone()).unwrap_or_default(),
            });
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = if vals.len() > 1 {
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        levels.push(AuditLevel {
            h,
            eps: cfg.eps,
            k: cfg.k,
            steps: cfg.steps,
            bracket: mean,
            ci_halfwidth: 1.96 * (var / n).sqrt(),
            failures: failures.len(),
        });
    }
    let growth: Vec<f64> = levels
        .windows(2)
        .map(|w| {
            if w[0].bracket > 0.0 {
                w[1].bracket / w[0].bracket
            } else if w[1].bracket > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .collect();
    let flagged = growth.iter().any(|g| *g > 2.0);
    Ok(AuditReport {
        levels,
        growth,
        flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_rect_mesh, Rect};
    use crate::noise::{Gamma, NoiseModel};

    fn noisy(n: usize) -> Arc<Problem> {
        let mesh = Arc::new(generate_rect_mesh(n, n, Rect::UNIT).unwrap());
        Problem::builder(mesh)
            .noise(NoiseModel::standard(Gamma::Additive { scale: 1.0 }))
            .build()
            .unwrap()
    }

    #[test]
    fn recipe_values() {
        let (eps, k) = recipe(0.16, 0.1);
        assert!((eps - 0.16f64.powf(2.1)).abs() < 1e-15);
        assert!((k - eps.powf(1.1)).abs() < 1e-15);
    }

    #[test]
    fn identical_schemes_have_zero_error() {
        let p = noisy(3);
        let c = SchemeConfig::new(SchemeKind::PenaltyLinear, 1.0, 0.01, 0.02, 0.01).unwrap();
        let s = RunSetup::new(p, c);
        let st = run_ensemble(&s, &s, 4, 11).unwrap();
        assert!(st.errors.iter().all(|e| *e == 0.0));
        assert_eq!(st.mean_sq_error, 0.0);
    }

    #[test]
    fn mismatched_grids_rejected() {
        let p = noisy(2);
        let a = SchemeConfig::new(SchemeKind::Saddle, 1.0, 0.01, 0.02, 0.01).unwrap();
        let b = SchemeConfig::new(SchemeKind::PenaltyLinear, 1.0, 0.01, 0.02, 0.005).unwrap();
        let r = run_ensemble(&RunSetup::new(p.clone(), a), &RunSetup::new(p, b), 2, 0);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 0.1, 0.01];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(0.7)).collect();
        assert!((log_log_slope(&x, &y).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(log_log_slope(&x[..1], &y[..1]), None);
    }

    #[test]
    fn eps_list_validation() {
        assert!(check_eps_list(&[0.1, 0.01]).is_ok());
        let e = check_eps_list(&[0.01, 0.1]).unwrap_err();
        assert!(e.to_string().contains("eps list must be strictly decreasing"));
    }
}
