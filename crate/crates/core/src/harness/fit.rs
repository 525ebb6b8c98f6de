use serde::Serialize;

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};

/// Leading fraction of the records skipped as transient.
pub const TRANSIENT_FRACTION: f64 = 0.1;
/// Gaps below this are floating-point noise and are not fitted.
pub const FIT_FLOOR: f64 = 1e-12;
pub const MIN_FIT_POINTS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RateModel {
    /// `log gap = intercept + slope * t`.
    Exponential,
    /// `log gap = intercept + slope * log t`.
    PowerLaw,
}

#[derive(Debug, Clone, Serialize)]
pub struct RateFit {
    pub model: RateModel,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// First and last record index used (inclusive).
    pub window: (usize, usize),
    pub points: usize,
}

/// Fits the optimality gap of a trajectory with a reference value.
pub fn fit_rate(traj: &Trajectory, model: RateModel) -> Result<RateFit> {
    let gaps = traj
        .gaps()
        .ok_or_else(|| Error::Config("trajectory has no reference value, so no gap to fit".into()))?;
    fit_points(&traj.times(), &gaps, model)
}

/// Least-squares fit of `(t, gap)` pairs after dropping the transient and
/// the numerical floor.
pub fn fit_points(t: &[f64], gap: &[f64], model: RateModel) -> Result<RateFit> {
    let start = (t.len() as f64 * TRANSIENT_FRACTION).ceil() as usize;
    let used: Vec<(usize, f64, f64)> = t
        .iter()
        .zip(gap)
        .enumerate()
        .skip(start)
        .filter(|(_, (&ti, &g))| g >= FIT_FLOOR && g.is_finite() && (model == RateModel::Exponential || ti > 0.0))
        .map(|(i, (&ti, &g))| {
            let x = match model {
                RateModel::Exponential => ti,
                RateModel::PowerLaw => ti.ln(),
            };
            (i, x, g.ln())
        })
        .collect();
    if used.len() < MIN_FIT_POINTS {
        return Err(Error::InsufficientData {
            available: used.len(),
            required: MIN_FIT_POINTS,
        });
    }
    let n = used.len() as f64;
    let mx = used.iter().map(|p| p.1).sum::<f64>() / n;
    let my = used.iter().map(|p| p.2).sum::<f64>() / n;
    let sxx: f64 = used.iter().map(|p| (p.1 - mx).powi(2)).sum();
    let sxy: f64 = used.iter().map(|p| (p.1 - mx) * (p.2 - my)).sum();
    let syy: f64 = used.iter().map(|p| (p.2 - my).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::InsufficientData {
            available: 1,
            required: MIN_FIT_POINTS,
        });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy > 0.0 { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) } else { 1.0 };
    Ok(RateFit {
        model,
        slope,
        intercept,
        r_squared,
        window: (used[0].0, used[used.len() - 1].0),
        points: used.len(),
    })
}
