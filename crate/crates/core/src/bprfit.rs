//! Per-segment BPR baseline fitted by bounded nonlinear least squares.
//!
//! Residuals live in inverse-speed space, `r_i = f(rho_i) - 1/v_i` with
//!
//! ```text
//! f(rho) = 1/v_ff                             if rho <  rho_crit
//! f(rho) = 1/v_ff + c * (rho/rho_crit - 1)^p  otherwise
//! ```
//!
//! and the parameters are kept inside a box. The solver is a
//! Levenberg-Marquardt iteration with Marquardt diagonal scaling whose trial
//! points are projected onto the box; parameters pinned at a bound with the
//! gradient pointing outward are frozen for that iteration. Three seeded
//! starts are run and the lowest residual sum of squares wins.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{density_veh_per_m, Dataset, SpeedSource, MAX_SPEED_MPS, MIN_SPEED_MPS};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BprParams {
    pub v_ff_mps: f64,
    pub rho_crit_veh_per_m: f64,
    pub c: f64,
    pub p: f64,
}

impl BprParams {
    fn to_array(self) -> [f64; 4] {
        [self.v_ff_mps, self.rho_crit_veh_per_m, self.c, self.p]
    }

    fn from_array(a: [f64; 4]) -> Self {
        BprParams {
            v_ff_mps: a[0],
            rho_crit_veh_per_m: a[1],
            c: a[2],
            p: a[3],
        }
    }
}

pub fn bpr_inverse_speed(rho: f64, params: &BprParams) -> f64 {
    let free = 1.0 / params.v_ff_mps;
    if rho < params.rho_crit_veh_per_m {
        free
    } else {
        let x = rho / params.rho_crit_veh_per_m - 1.0;
        free + params.c * x.powf(params.p)
    }
}

pub fn bpr_predict_speed(params: &BprParams, rho: f64) -> f64 {
    (1.0 / bpr_inverse_speed(rho, params)).clamp(MIN_SPEED_MPS, MAX_SPEED_MPS)
}

/// Box constraints in `(v_ff, rho_crit, c, p)` order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub lower: [f64; 4],
    pub upper: [f64; 4],
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds {
            lower: [1.0, 1e-5, 0.0, 1.0],
            upper: [45.0, 1.0, 100.0, 10.0],
        }
    }
}

impl Bounds {
    fn project(&self, x: &mut [f64; 4]) {
        for i in 0..4 {
            x[i] = x[i].clamp(self.lower[i], self.upper[i]);
        }
    }

    fn midpoint(&self) -> [f64; 4] {
        std::array::from_fn(|i| 0.5 * (self.lower[i] + self.upper[i]))
    }

    pub fn contains(&self, p: &BprParams) -> bool {
        let a = p.to_array();
        (0..4).all(|i| a[i] >= self.lower[i] && a[i] <= self.upper[i])
    }
}

fn default_min_samples() -> usize {
    20
}
fn default_min_ratio() -> f64 {
    2.0
}
fn default_max_iter() -> usize {
    200
}
fn default_step_tol() -> f64 {
    1e-10
}
fn default_rss_tol() -> f64 {
    1e-12
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitOptions {
    #[serde(default = "default_min_samples")]
    pub min_samples: usize,
    /// Required `max(rho) / min(positive rho)`.
    #[serde(default = "default_min_ratio")]
    pub min_density_ratio: f64,
    #[serde(default = "default_max_iter")]
    pub max_iterations: usize,
    #[serde(default = "default_step_tol")]
    pub step_tolerance: f64,
    #[serde(default = "default_rss_tol")]
    pub rss_relative_tolerance: f64,
    #[serde(default)]
    pub bounds: Bounds,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            min_samples: default_min_samples(),
            min_density_ratio: default_min_ratio(),
            max_iterations: default_max_iter(),
            step_tolerance: default_step_tol(),
            rss_relative_tolerance: default_rss_tol(),
            bounds: Bounds::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoFitReason {
    TooFewSamples,
    NoDensitySpread,
    DidNotConverge,
}

impl NoFitReason {
    pub fn as_str(self) -> &'static str {
        match self {
            NoFitReason::TooFewSamples => "too_few_samples",
            NoFitReason::NoDensitySpread => "no_density_spread",
            NoFitReason::DidNotConverge => "did_not_converge",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum FitOutcome {
    Fitted {
        params: BprParams,
        rss: f64,
        n: usize,
        iterations: usize,
    },
    NoFit {
        reason: NoFitReason,
    },
}

impl FitOutcome {
    pub fn params(&self) -> Option<&BprParams> {
        match self {
            FitOutcome::Fitted { params, .. } => Some(params),
            FitOutcome::NoFit { .. } => None,
        }
    }

    pub fn is_fitted(&self) -> bool {
        matches!(self, FitOutcome::Fitted { .. })
    }
}

/// Residual sum of squares of `params` on `(rho, v)` samples.
pub fn rss(samples: &[(f64, f64)], params: &BprParams) -> f64 {
    samples
        .iter()
        .map(|&(rho, v)| {
            let r = bpr_inverse_speed(rho, params) - 1.0 / v;
            r * r
        })
        .sum()
}

fn residuals_and_jacobian(
    samples: &[(f64, f64)],
    x: &[f64; 4],
    r: &mut DVector<f64>,
    jac: &mut DMatrix<f64>,
) {
    let [v_ff, rho_crit, c, p] = *x;
    let d_vff = -1.0 / (v_ff * v_ff);
    for (i, &(rho, v)) in samples.iter().enumerate() {
        jac[(i, 0)] = d_vff;
        if rho < rho_crit {
            r[i] = 1.0 / v_ff - 1.0 / v;
            jac[(i, 1)] = 0.0;
            jac[(i, 2)] = 0.0;
            jac[(i, 3)] = 0.0;
        } else {
            // A sample exactly at rho_crit takes the free-flow value but the
            // congested one-sided derivatives.
            let xr = rho / rho_crit - 1.0;
            let xp = xr.powf(p);
            r[i] = 1.0 / v_ff + c * xp - 1.0 / v;
            jac[(i, 1)] = -c * p * xr.powf(p - 1.0) * rho / (rho_crit * rho_crit);
            jac[(i, 2)] = xp;
            jac[(i, 3)] = if xr > 0.0 { c * xp * xr.ln() } else { 0.0 };
        }
    }
}

struct LmResult {
    x: [f64; 4],
    rss: f64,
    iterations: usize,
}

/// Projected Levenberg-Marquardt from a single start.
fn minimize_from(samples: &[(f64, f64)], start: [f64; 4], opts: &FitOptions) -> Option<LmResult> {
    let m = samples.len();
    let bounds = &opts.bounds;
    let mut x = start;
    bounds.project(&mut x);
    let mut r = DVector::zeros(m);
    let mut jac = DMatrix::zeros(m, 4);
    residuals_and_jacobian(samples, &x, &mut r, &mut jac);
    let mut cost = r.norm_squared();
    if !cost.is_finite() || jac.iter().any(|v| !v.is_finite()) {
        return None;
    }

    let mut mu: Option<f64> = None;
    let mut nu = 2.0;
    let mut iterations = 0;
    let mut r_trial = DVector::zeros(m);
    let mut jac_trial = DMatrix::zeros(m, 4);

    while iterations < opts.max_iterations && cost > 0.0 {
        iterations += 1;
        let a = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        let max_diag = (0..4).map(|i| a[(i, i)]).fold(0.0, f64::max);
        let mu_now = *mu.get_or_insert(1e-3);

        // Freeze parameters held at a bound by the descent direction.
        let free: Vec<usize> = (0..4)
            .filter(|&i| {
                let at_lower = x[i] <= bounds.lower[i] && g[i] > 0.0;
                let at_upper = x[i] >= bounds.upper[i] && g[i] < 0.0;
                !(at_lower || at_upper) && a[(i, i)] > 0.0
            })
            .collect();
        if free.is_empty() {
            break;
        }

        let k = free.len();
        let floor = 1e-15 * max_diag;
        let mut sys = DMatrix::zeros(k, k);
        let mut rhs = DVector::zeros(k);
        for (ii, &i) in free.iter().enumerate() {
            rhs[ii] = -g[i];
            for (jj, &j) in free.iter().enumerate() {
                sys[(ii, jj)] = a[(i, j)];
            }
            sys[(ii, ii)] += mu_now * a[(i, i)].max(floor);
        }
        let step = match sys.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => match sys.lu().solve(&rhs) {
                Some(s) => s,
                None => {
                    mu = Some(mu_now * nu);
                    nu *= 2.0;
                    continue;
                }
            },
        };

        let mut trial = x;
        for (ii, &i) in free.iter().enumerate() {
            trial[i] += step[ii];
        }
        bounds.project(&mut trial);
        let delta: [f64; 4] = std::array::from_fn(|i| trial[i] - x[i]);
        let step_norm = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
        if step_norm < opts.step_tolerance {
            break;
        }

        residuals_and_jacobian(samples, &trial, &mut r_trial, &mut jac_trial);
        let trial_cost = r_trial.norm_squared();
        let lin = &r + &jac * DVector::from_column_slice(&delta);
        let predicted = cost - lin.norm_squared();

        if trial_cost.is_finite() && trial_cost < cost && predicted > 0.0 {
            let gain = (cost - trial_cost) / predicted;
            let improvement = cost - trial_cost;
            x = trial;
            std::mem::swap(&mut r, &mut r_trial);
            std::mem::swap(&mut jac, &mut jac_trial);
            let previous = cost;
            cost = trial_cost;
            mu = Some(mu_now * (1.0 / 3.0f64).max(1.0 - (2.0 * gain - 1.0).powi(3)));
            nu = 2.0;
            if improvement <= opts.rss_relative_tolerance * previous {
                break;
            }
        } else {
            mu = Some(mu_now * nu);
            nu *= 2.0;
            if mu_now > 1e30 {
                break;
            }
        }
    }
    Some(LmResult {
        x,
        rss: cost,
        iterations,
    })
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Data-driven starting point: free-flow speed from the low-density
/// samples, breakpoint at the densest near-free-flow sample, and `(c, p)`
/// from a log-log regression over the congested samples.
fn heuristic_start(samples: &[(f64, f64)]) -> [f64; 4] {
    let n_low = (samples.len() / 5).max(1);
    let mut low_speeds: Vec<f64> = samples[..n_low].iter().map(|s| s.1).collect();
    low_speeds.sort_by(f64::total_cmp);
    let v_ff = quantile_sorted(&low_speeds, 0.5);

    let mut rhos: Vec<f64> = samples.iter().map(|s| s.0).collect();
    rhos.sort_by(f64::total_cmp);
    let rho_crit = samples
        .iter()
        .filter(|s| s.1 >= 0.95 * v_ff)
        .map(|s| s.0)
        .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))))
        .filter(|&r| r > 0.0)
        .unwrap_or_else(|| quantile_sorted(&rhos, 0.5));

    let pts: Vec<(f64, f64)> = samples
        .iter()
        .filter(|s| s.0 > 1.05 * rho_crit)
        .filter_map(|&(rho, v)| {
            let excess = 1.0 / v - 1.0 / v_ff;
            (excess > 0.0).then(|| ((rho / rho_crit - 1.0).ln(), excess.ln()))
        })
        .collect();
    let (c, p) = if pts.len() >= 2 {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        if sxx > 0.0 {
            let slope = sxy / sxx;
            ((my - slope * mx).exp(), slope)
        } else {
            (1.0, 2.0)
        }
    } else {
        (1.0, 2.0)
    };
    [v_ff, rho_crit, c, p]
}

/// The three starting points, in order: data heuristic, classic BPR shape
/// (`c = 0.15`, `p = 4`) at the heuristic breakpoint, box midpoint.
pub fn starting_points(samples: &[(f64, f64)], bounds: &Bounds) -> [BprParams; 3] {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut h = heuristic_start(&sorted);
    for v in &mut h {
        if !v.is_finite() {
            *v = 1.0;
        }
    }
    bounds.project(&mut h);
    let mut classic = [h[0], h[1], 0.15, 4.0];
    bounds.project(&mut classic);
    [
        BprParams::from_array(h),
        BprParams::from_array(classic),
        BprParams::from_array(bounds.midpoint()),
    ]
}

/// Fits one segment's `(density, speed)` samples.
pub fn fit_segment(samples: &[(f64, f64)], opts: &FitOptions) -> FitOutcome {
    if samples.len() < opts.min_samples {
        return FitOutcome::NoFit {
            reason: NoFitReason::TooFewSamples,
        };
    }
    let max_rho = samples.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    let min_pos = samples
        .iter()
        .map(|s| s.0)
        .filter(|&r| r > 0.0)
        .fold(f64::INFINITY, f64::min);
    if !(min_pos.is_finite() && max_rho / min_pos >= opts.min_density_ratio) {
        return FitOutcome::NoFit {
            reason: NoFitReason::NoDensitySpread,
        };
    }

    // Canonical order makes the fit independent of input order.
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let mut best: Option<LmResult> = None;
    let mut iterations = 0;
    for start in starting_points(&sorted, &opts.bounds) {
        if let Some(res) = minimize_from(&sorted, start.to_array(), opts) {
            iterations += res.iterations;
            if best.as_ref().is_none_or(|b| res.rss < b.rss) {
                best = Some(res);
            }
        }
    }
    match best {
        Some(b) => FitOutcome::Fitted {
            params: BprParams::from_array(b.x),
            rss: b.rss,
            n: sorted.len(),
            iterations,
        },
        None => FitOutcome::NoFit {
            reason: NoFitReason::DidNotConverge,
        },
    }
}

/// Per-segment outcomes for one dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CityFits {
    pub outcomes: BTreeMap<String, FitOutcome>,
}

impl CityFits {
    pub fn no_fit_proportion(&self) -> f64 {
        if self.outcomes.is_empty() {
            return 0.0;
        }
        let misses = self.outcomes.values().filter(|o| !o.is_fitted()).count();
        misses as f64 / self.outcomes.len() as f64
    }

    pub fn params(&self, segment_id: &str) -> Option<&BprParams> {
        self.outcomes.get(segment_id).and_then(FitOutcome::params)
    }
}

/// `(density, speed)` samples per segment, densities from observed speeds.
pub fn segment_samples(d: &Dataset) -> Result<BTreeMap<String, Vec<(f64, f64)>>> {
    let mut out: BTreeMap<String, Vec<(f64, f64)>> =
        d.segments.keys().map(|id| (id.clone(), Vec::new())).collect();
    for obs in &d.observations {
        let rho = density_veh_per_m(obs, SpeedSource::Observed)?;
        out.entry(obs.segment_id.clone())
            .or_default()
            .push((rho, obs.mean_speed_mps));
    }
    Ok(out)
}

/// Independent fit for every segment in the dataset, including segments
/// with no observations (which report `TooFewSamples`).
pub fn fit_city(d: &Dataset, opts: &FitOptions) -> Result<CityFits> {
    let outcomes = segment_samples(d)?
        .into_iter()
        .map(|(id, samples)| (id, fit_segment(&samples, opts)))
        .collect();
    let fits = CityFits { outcomes };
    log::info!(
        "{} {}: BPR no-fit proportion {:.3}",
        d.city,
        d.priority,
        fits.no_fit_proportion()
    );
    Ok(fits)
}
