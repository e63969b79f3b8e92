//! Parameter tuning for the eigen-shrinkage filter.
//!
//! The five tunable knobs are the patch edge `d`, group size `m`, window
//! radius `w`, and the two eigenvalue thresholds `tau_beta` and `t`. They sit
//! in a coupled feasible region (`2 <= d <= w+1`, `d^3 <= m <= (2w+2-d)^3`,
//! `2 <= w <= 3`, `tau_beta <= t`), so the optimizer works in a continuous
//! 5-d box and snaps every position onto the feasible set with [`repair`].
//!
//! Two tools are provided: a constrained global-best particle swarm
//! ([`pso_optimize`]) and an exhaustive threshold grid ([`grid_search`]).
//! Both accept any objective; [`CanonicalObjective`] is the stock one —
//! PSNR of the filter on a seeded phantom with 1% additive Gaussian noise,
//! run with non-overlapping windows (`step = 2w+1`) so one evaluation stays
//! cheap.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::nlpca::{self, Grouping, NlpcaParams};
use crate::phantom::PhantomSpec;
use crate::pipeline::build_surrogate;
use crate::volume::{RoiMask, Volume3D};

/// Constriction-style velocity coefficients: inertia and the cognitive and
/// social acceleration weights.
pub const PSO_INERTIA: f64 = 0.729;
pub const PSO_ACCELERATION: f64 = 1.49445;
/// Iterations without `function_tolerance` worth of improvement before the
/// swarm is declared stalled.
pub const PSO_STALL_WINDOW: usize = 20;

/// One candidate parameter set for the eigen-shrinkage filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamPoint {
    pub d: usize,
    pub m: usize,
    pub w: usize,
    pub tau_beta: f64,
    pub t: f64,
}

impl ParamPoint {
    pub fn new(d: usize, m: usize, w: usize, tau_beta: f64, t: f64) -> Self {
        ParamPoint {
            d,
            m,
            w,
            tau_beta,
            t,
        }
    }

    /// All four feasibility constraints, evaluated exactly.
    pub fn feasible(&self) -> bool {
        let ParamPoint {
            d,
            m,
            w,
            tau_beta,
            t,
        } = *self;
        2 <= d
            && d <= w + 1
            && d.pow(3) <= m
            && m <= (2 * w + 2 - d).pow(3)
            && (2..=3).contains(&w)
            && tau_beta <= t
    }

    /// The point as the optimizer's coordinate vector `[d, m, w, tau_beta, t]`.
    pub fn as_array(&self) -> [f64; 5] {
        [
            self.d as f64,
            self.m as f64,
            self.w as f64,
            self.tau_beta,
            self.t,
        ]
    }

    /// Parameters for the filter run the point describes; non-overlapping
    /// windows and similarity grouping around the window center keep a
    /// single evaluation fast while still exercising all five knobs.
    pub fn filter_params(&self) -> NlpcaParams {
        NlpcaParams {
            d: self.d,
            m: self.m,
            w: self.w,
            tau_beta: self.tau_beta,
            t: self.t,
            step: 2 * self.w + 1,
            grouping: Grouping::SimilarToCenter,
            median_prefilter: false,
        }
    }
}

/// Snap a raw coordinate vector onto the feasible set.
///
/// Integer knobs are rounded to the nearest integer and clamped in the order
/// `w`, then `d`, then `m`, each clamp using the values fixed before it
/// (clamping `w` first guarantees the `m` interval is never empty). If the
/// thresholds end up inverted, `tau_beta` is lowered to `t`. The result is
/// always feasible and the map is idempotent.
pub fn repair(raw: &[f64; 5]) -> ParamPoint {
    let w = (raw[2].round() as i64).clamp(2, 3) as usize;
    let d = (raw[0].round() as i64).clamp(2, w as i64 + 1) as usize;
    let m_lo = d.pow(3) as i64;
    let m_hi = ((2 * w + 2 - d).pow(3)) as i64;
    let m = (raw[1].round() as i64).clamp(m_lo, m_hi) as usize;
    let t = raw[4];
    let tau_beta = if raw[3] > t { t } else { raw[3] };
    ParamPoint {
        d,
        m,
        w,
        tau_beta,
        t,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsoConfig {
    pub swarm_size: usize,
    pub max_iterations: usize,
    pub function_tolerance: f64,
    pub seed: u64,
    /// `[low, high]` per coordinate, ordered `[d, m, w, tau_beta, t]`.
    pub bounds: [[f64; 2]; 5],
}

impl Default for PsoConfig {
    fn default() -> Self {
        PsoConfig {
            swarm_size: 50,
            max_iterations: 50,
            function_tolerance: 1e-3,
            seed: 0,
            bounds: PsoConfig::default_bounds(),
        }
    }
}

impl PsoConfig {
    /// The widest box that still round-trips through [`repair`] without
    /// excessive clipping.
    pub fn default_bounds() -> [[f64; 2]; 5] {
        [
            [2.0, 4.0],
            [8.0, 216.0],
            [2.0, 3.0],
            [0.5, 4.0],
            [0.5, 4.0],
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.swarm_size < 2 {
            return Err(Error::invalid("swarm_size must be at least 2"));
        }
        if !(self.function_tolerance > 0.0) {
            return Err(Error::invalid("function_tolerance must be > 0"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be at least 1"));
        }
        for (i, b) in self.bounds.iter().enumerate() {
            if !(b[0].is_finite() && b[1].is_finite() && b[0] <= b[1]) {
                return Err(Error::invalid(format!(
                    "bounds[{i}] must be finite with low <= high"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TuningResult {
    pub best_point: ParamPoint,
    #[serde(rename = "best_psnr")]
    pub best_value: f64,
    pub iterations: usize,
    /// Best objective value after each iteration; non-decreasing.
    pub history: Vec<f64>,
}

impl TuningResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }
}

fn fitness<F>(objective: &F, point: &ParamPoint) -> f64
where
    F: Fn(&ParamPoint) -> Option<f64> + Sync,
{
    match objective(point) {
        Some(v) if !v.is_nan() => v,
        _ => f64::NEG_INFINITY,
    }
}

/// Global-best particle swarm over the feasible parameter set.
///
/// Positions live in `cfg.bounds`; after every update a position is clamped
/// into the box and snapped feasible with [`repair`], so the objective only
/// ever sees feasible points. An objective failure (`None` or NaN) scores
/// negative infinity and the search continues. The run stops at
/// `max_iterations` or once the best value has improved by less than
/// `function_tolerance` for [`PSO_STALL_WINDOW`] consecutive iterations.
/// Everything is driven by one seeded generator, so a fixed seed reproduces
/// the full trajectory; objective evaluations within an iteration run in
/// parallel and ties for the global best go to the lowest particle index.
pub fn pso_optimize<F>(objective: F, cfg: &PsoConfig) -> Result<TuningResult>
where
    F: Fn(&ParamPoint) -> Option<f64> + Sync,
{
    cfg.validate()?;
    let n = cfg.swarm_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let span: Vec<f64> = cfg.bounds.iter().map(|b| b[1] - b[0]).collect();

    let mut positions: Vec<[f64; 5]> = Vec::with_capacity(n);
    let mut velocities: Vec<[f64; 5]> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x = [0.0; 5];
        let mut v = [0.0; 5];
        for k in 0..5 {
            let [lo, hi] = cfg.bounds[k];
            x[k] = if lo == hi {
                lo
            } else {
                rng.random_range(lo..=hi)
            };
            v[k] = if span[k] == 0.0 {
                0.0
            } else {
                rng.random_range(-span[k]..=span[k])
            };
        }
        positions.push(repair(&x).as_array());
        velocities.push(v);
    }

    let points: Vec<ParamPoint> = positions.iter().map(repair).collect();
    let values: Vec<f64> = points.par_iter().map(|p| fitness(&objective, p)).collect();
    let mut pbest = points;
    let mut pbest_val = values;

    let mut best_idx = 0usize;
    for i in 1..n {
        if pbest_val[i] > pbest_val[best_idx] {
            best_idx = i;
        }
    }
    let mut best_point = pbest[best_idx];
    let mut best_value = pbest_val[best_idx];

    let mut history = Vec::with_capacity(cfg.max_iterations);
    let mut stall = 0usize;
    let mut iterations = 0usize;

    for _ in 0..cfg.max_iterations {
        iterations += 1;
        let gbest = best_point.as_array();
        for i in 0..n {
            let pb = pbest[i].as_array();
            let mut x = positions[i];
            let mut v = velocities[i];
            for k in 0..5 {
                let r1: f64 = rng.random_range(0.0..=1.0);
                let r2: f64 = rng.random_range(0.0..=1.0);
                v[k] = PSO_INERTIA * v[k]
                    + PSO_ACCELERATION * r1 * (pb[k] - x[k])
                    + PSO_ACCELERATION * r2 * (gbest[k] - x[k]);
                if span[k] > 0.0 {
                    v[k] = v[k].clamp(-span[k], span[k]);
                }
                x[k] = (x[k] + v[k]).clamp(cfg.bounds[k][0], cfg.bounds[k][1]);
            }
            positions[i] = repair(&x).as_array();
            velocities[i] = v;
        }

        let points: Vec<ParamPoint> = positions.iter().map(repair).collect();
        let values: Vec<f64> = points.par_iter().map(|p| fitness(&objective, p)).collect();
        for i in 0..n {
            if values[i] > pbest_val[i] {
                pbest_val[i] = values[i];
                pbest[i] = points[i];
            }
        }
        let mut new_idx = 0usize;
        for i in 1..n {
            if pbest_val[i] > pbest_val[new_idx] {
                new_idx = i;
            }
        }
        if pbest_val[new_idx] > best_value + cfg.function_tolerance {
            stall = 0;
        } else {
            stall += 1;
        }
        if pbest_val[new_idx] > best_value {
            best_value = pbest_val[new_idx];
            best_point = pbest[new_idx];
        }
        history.push(best_value);
        if stall >= PSO_STALL_WINDOW {
            break;
        }
    }

    Ok(TuningResult {
        best_point,
        best_value,
        iterations,
        history,
    })
}

/// One evaluated threshold pair in a grid traversal.
#[derive(Debug, Clone, Serialize)]
pub struct GridRow {
    /// Competition rank: 1 + the number of rows with a strictly better
    /// objective, so exact ties share a rank.
    pub rank: usize,
    pub point: ParamPoint,
    pub objective: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridTable {
    pub rows: Vec<GridRow>,
}

impl GridTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,d,m,w,tau_beta,t,objective\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.rank, r.point.d, r.point.m, r.point.w, r.point.tau_beta, r.point.t, r.objective
            ));
        }
        out
    }

    pub fn best(&self) -> &GridRow {
        &self.rows[0]
    }
}

/// The thresholds paired with themselves: `tau_beta = t` along the given
/// values.
pub fn diagonal_grid(values: &[f64]) -> Vec<(f64, f64)> {
    values.iter().map(|&v| (v, v)).collect()
}

/// Every combination of the two lists with `tau_beta <= t`.
pub fn cartesian_grid(tau_betas: &[f64], ts: &[f64]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for &tb in tau_betas {
        for &t in ts {
            if tb <= t {
                out.push((tb, t));
            }
        }
    }
    out
}

/// Exhaustive traversal of threshold pairs at fixed `(d, m, w)`.
///
/// Rows come back sorted best-first; exact ties share a rank and keep their
/// grid order. A failed evaluation scores negative infinity and sorts last.
pub fn grid_search<F>(
    objective: F,
    base: (usize, usize, usize),
    pairs: &[(f64, f64)],
) -> Result<GridTable>
where
    F: Fn(&ParamPoint) -> Option<f64> + Sync,
{
    if pairs.is_empty() {
        return Err(Error::invalid("threshold grid is empty"));
    }
    let (d, m, w) = base;
    let points: Vec<ParamPoint> = pairs
        .iter()
        .map(|&(tau_beta, t)| {
            let p = ParamPoint::new(d, m, w, tau_beta, t);
            if !p.feasible() {
                return Err(Error::invalid(format!(
                    "grid point (d={d}, m={m}, w={w}, tau_beta={tau_beta}, t={t}) is infeasible"
                )));
            }
            Ok(p)
        })
        .collect::<Result<_>>()?;
    let values: Vec<f64> = points.par_iter().map(|p| fitness(&objective, p)).collect();

    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let rows = order
        .iter()
        .map(|&i| {
            let better = values.iter().filter(|&&v| v > values[i]).count();
            GridRow {
                rank: better + 1,
                point: points[i],
                objective: values[i],
            }
        })
        .collect();
    Ok(GridTable { rows })
}

/// The stock tuning objective: PSNR of the eigen-shrinkage filter against a
/// known clean volume.
///
/// [`CanonicalObjective::reference`] builds the standard pair — a seeded
/// phantom plus 1% (of the intensity peak) additive Gaussian noise. The
/// filter runs with non-overlapping windows; see
/// [`ParamPoint::filter_params`].
pub struct CanonicalObjective {
    clean: Volume3D,
    noisy: Volume3D,
    mask: RoiMask,
}

impl CanonicalObjective {
    pub fn from_pair(clean: Volume3D, noisy: Volume3D) -> Result<Self> {
        if clean.dims() != noisy.dims() {
            return Err(Error::invalid("clean/noisy dims differ"));
        }
        let mask = metrics::roi_mask(&clean)?;
        Ok(CanonicalObjective { clean, noisy, mask })
    }

    /// Standard reference pair from a phantom description.
    pub fn reference(spec: &PhantomSpec, seed: u64) -> Result<Self> {
        let clean = crate::phantom::generate(spec, seed)?;
        let sigma = 0.01 * clean.intensity_peak();
        let noisy = build_surrogate(&clean, sigma, seed ^ 0xD1CE)?;
        CanonicalObjective::from_pair(clean, noisy)
    }

    pub fn evaluate(&self, point: &ParamPoint) -> Option<f64> {
        let params = point.filter_params();
        params.validate().ok()?;
        let (denoised, _) = nlpca::denoise(&self.noisy, &params).ok()?;
        metrics::evaluate(&denoised, &self.clean, &self.mask)
            .ok()
            .map(|r| r.psnr)
    }
}
