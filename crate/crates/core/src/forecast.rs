//! Per-settlement-of-day regression models for the aggregate boundaries
//! and probability-banded scenario generation.
//!
//! Each boundary gets one linear model per settlement of the day,
//! regressed on the boundary-difference state at forecast time,
//! temperature, precipitation, bank holidays, and day-of-week dummies.
//! The lower energy boundary is never regressed directly: the
//! upper-lower difference is, which keeps predicted lower boundaries
//! from crossing above the upper. Scenario paths offset the point
//! forecast by the conditional mean of each residual-distribution band,
//! using the same band across the horizon and across all three
//! boundaries, then get projected back onto physically reachable
//! envelopes.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

use crate::aggregation::AggregateEnvelope;
use crate::fleet_data::{DayFeatures, ExogenousSeries};

/// Band probabilities, centre-heavy with explicit extreme tails. The
/// literal order sums to exactly 1.0 in f64.
pub const SCENARIO_PROBS: [f64; 5] = [0.01, 0.10, 0.78, 0.10, 0.01];

/// Number of regression coefficients: intercept, boundary-difference
/// state, temperature, precipitation, bank holiday, six day-of-week
/// dummies (Monday is the reference).
pub const N_COEFFS: usize = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryTarget {
    EUpper,
    EDiff,
    PBound,
}

impl BoundaryTarget {
    pub fn label(self) -> &'static str {
        match self {
            BoundaryTarget::EUpper => "e_upper",
            BoundaryTarget::EDiff => "e_diff",
            BoundaryTarget::PBound => "p_bound",
        }
    }
}

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("settlement-of-day {settlement}: {rows} training rows are too few (need ≥ 2)")]
    TooFewRows { settlement: usize, rows: usize },
    #[error("non-finite regressor on day {0}")]
    BadRegressor(usize),
    #[error("missing features for horizon step {0}")]
    MissingFeature(usize),
    #[error("nrmse: series empty or length mismatch")]
    BadSeries,
    #[error("nrmse: actual series has zero mean")]
    ZeroMean,
    #[error("model csv: {0}")]
    ModelCsv(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlrCoeffs {
    pub beta: Vec<f64>,
    /// Sample standard deviation of in-sample residuals.
    pub sigma: f64,
}

/// One boundary's models, one per settlement-of-day.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlrModel {
    pub target: BoundaryTarget,
    pub per_settlement: Vec<MlrCoeffs>,
}

impl MlrModel {
    pub fn predict(&self, k: usize, x: &[f64; N_COEFFS]) -> f64 {
        self.per_settlement[k]
            .beta
            .iter()
            .zip(x)
            .map(|(b, v)| b * v)
            .sum()
    }

    pub fn sigma(&self, k: usize) -> f64 {
        self.per_settlement[k].sigma
    }
}

/// Regressor vector for one day given the boundary-difference state.
pub fn regressors(day: &DayFeatures, e_diff_state: f64) -> [f64; N_COEFFS] {
    let mut x = [0.0; N_COEFFS];
    x[0] = 1.0;
    x[1] = e_diff_state;
    x[2] = day.temp_c;
    x[3] = day.precip_mm;
    x[4] = if day.bank_holiday { 1.0 } else { 0.0 };
    let dow = day.day_of_week();
    if dow >= 1 {
        x[4 + dow] = 1.0; // slots 5..=10 for Tue..Sun
    }
    x
}

/// One training day: daily regressors plus realized boundary values per
/// settlement-of-day. Upper-boundary values are midnight-anchored
/// (cumulative since the day's start).
#[derive(Clone, Debug)]
pub struct TrainingDay {
    pub day: DayFeatures,
    pub e_diff_at_day_start: f64,
    pub u_rel: Vec<f64>,
    pub e_diff: Vec<f64>,
    pub p_bound: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainingData {
    pub days: Vec<TrainingDay>,
    pub settlements_per_day: usize,
}

/// Extracts per-day training targets from a realized envelope.
pub fn build_training_data(
    envelope: &AggregateEnvelope,
    exog: &ExogenousSeries,
    day_range: std::ops::Range<usize>,
) -> TrainingData {
    let per_day = envelope.grid.settlements_per_day();
    let anchor_u = |d: usize| {
        if d == 0 {
            0.0
        } else {
            envelope.e_upper[d * per_day - 1]
        }
    };
    let mut days = Vec::new();
    for d in day_range {
        let base = anchor_u(d);
        let e_diff_at_day_start = if d == 0 {
            0.0
        } else {
            envelope.e_diff(d * per_day - 1)
        };
        let mut u_rel = Vec::with_capacity(per_day);
        let mut e_diff = Vec::with_capacity(per_day);
        let mut p_bound = Vec::with_capacity(per_day);
        for k in 0..per_day {
            let t = d * per_day + k;
            u_rel.push(envelope.e_upper[t] - base);
            e_diff.push(envelope.e_diff(t));
            p_bound.push(envelope.p_bound[t]);
        }
        days.push(TrainingDay {
            day: exog.day(d).clone(),
            e_diff_at_day_start,
            u_rel,
            e_diff,
            p_bound,
        });
    }
    TrainingData {
        days,
        settlements_per_day: per_day,
    }
}

/// Ordinary least squares per settlement-of-day; rank-deficient designs
/// fall back to the minimum-norm solution via SVD.
pub fn fit_mlr(data: &TrainingData, target: BoundaryTarget) -> Result<MlrModel, ForecastError> {
    let per_day = data.settlements_per_day;
    let n = data.days.len();
    let mut per_settlement = Vec::with_capacity(per_day);
    for k in 0..per_day {
        if n < 2 {
            return Err(ForecastError::TooFewRows {
                settlement: k,
                rows: n,
            });
        }
        let mut x = DMatrix::zeros(n, N_COEFFS);
        let mut y = DVector::zeros(n);
        for (row, td) in data.days.iter().enumerate() {
            let feats = regressors(&td.day, td.e_diff_at_day_start);
            if feats.iter().any(|v| !v.is_finite()) {
                return Err(ForecastError::BadRegressor(row));
            }
            for (col, v) in feats.iter().enumerate() {
                x[(row, col)] = *v;
            }
            y[row] = match target {
                BoundaryTarget::EUpper => td.u_rel[k],
                BoundaryTarget::EDiff => td.e_diff[k],
                BoundaryTarget::PBound => td.p_bound[k],
            };
        }
        let svd = x.clone().svd(true, true);
        let beta = svd.solve(&y, 1e-10).expect("svd of finite matrix");
        let residuals = &y - &x * &beta;
        let ss: f64 = residuals.iter().map(|r| r * r).sum();
        let mut sigma = (ss / (n as f64 - 1.0)).sqrt();
        // Exact fits leave femto-scale SVD residue; treat it as zero.
        let scale = y.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if sigma <= 1e-10 * scale {
            sigma = 0.0;
        }
        per_settlement.push(MlrCoeffs {
            beta: beta.iter().copied().collect(),
            sigma,
        });
    }
    Ok(MlrModel {
        target,
        per_settlement,
    })
}

/// The three boundary models of one fleet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forecaster {
    pub upper: MlrModel,
    pub diff: MlrModel,
    pub power: MlrModel,
}

impl Forecaster {
    pub fn fit(data: &TrainingData) -> Result<Self, ForecastError> {
        Ok(Forecaster {
            upper: fit_mlr(data, BoundaryTarget::EUpper)?,
            diff: fit_mlr(data, BoundaryTarget::EDiff)?,
            power: fit_mlr(data, BoundaryTarget::PBound)?,
        })
    }

    /// Model dump: `target,settlement_of_day,beta0..beta10,sigma`.
    pub fn write_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        write!(w, "target,settlement_of_day")?;
        for i in 0..N_COEFFS {
            write!(w, ",beta{i}")?;
        }
        writeln!(w, ",sigma")?;
        for model in [&self.upper, &self.diff, &self.power] {
            for (k, c) in model.per_settlement.iter().enumerate() {
                write!(w, "{},{k}", model.target.label())?;
                for b in &c.beta {
                    write!(w, ",{b}")?;
                }
                writeln!(w, ",{}", c.sigma)?;
            }
        }
        Ok(())
    }

    pub fn read_csv(reader: impl std::io::Read) -> Result<Self, ForecastError> {
        let mut rdr = csv::ReaderBuilder::new().from_reader(reader);
        let mut buckets: std::collections::BTreeMap<String, Vec<(usize, MlrCoeffs)>> =
            std::collections::BTreeMap::new();
        for record in rdr.records() {
            let r = record.map_err(|e| ForecastError::ModelCsv(e.to_string()))?;
            let target = r
                .get(0)
                .filter(|t| ["e_upper", "e_diff", "p_bound"].contains(t))
                .ok_or_else(|| ForecastError::ModelCsv(format!("unknown target {:?}", r.get(0))))?
                .to_string();
            let k: usize = r
                .get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| ForecastError::ModelCsv("bad settlement_of_day".into()))?;
            let mut beta = Vec::with_capacity(N_COEFFS);
            for i in 0..N_COEFFS {
                beta.push(
                    r.get(2 + i)
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| ForecastError::ModelCsv(format!("bad beta{i}")))?,
                );
            }
            let sigma: f64 = r
                .get(2 + N_COEFFS)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| ForecastError::ModelCsv("bad sigma".into()))?;
            buckets.entry(target).or_default().push((k, MlrCoeffs { beta, sigma }));
        }
        let mut build = |label: &str, target: BoundaryTarget| -> Result<MlrModel, ForecastError> {
            let mut rows = buckets
                .remove(label)
                .ok_or_else(|| ForecastError::ModelCsv(format!("missing target {label}")))?;
            rows.sort_by_key(|(k, _)| *k);
            if rows.iter().enumerate().any(|(i, (k, _))| i != *k) {
                return Err(ForecastError::ModelCsv(format!(
                    "non-contiguous settlements for {label}"
                )));
            }
            Ok(MlrModel {
                target,
                per_settlement: rows.into_iter().map(|(_, c)| c).collect(),
            })
        };
        Ok(Forecaster {
            upper: build("e_upper", BoundaryTarget::EUpper)?,
            diff: build("e_diff", BoundaryTarget::EDiff)?,
            power: build("p_bound", BoundaryTarget::PBound)?,
        })
    }
}

/// One horizon step to be forecast.
#[derive(Clone, Debug)]
pub struct ForecastStep {
    pub settlement_of_day: usize,
    /// Day index relative to the anchor's day.
    pub day_offset: usize,
    pub day: DayFeatures,
}

/// Everything the models need to forecast a horizon anchored at the last
/// realized settlement.
#[derive(Clone, Debug)]
pub struct ForecastContext {
    pub anchor_day: DayFeatures,
    /// Realized boundary difference at the anchor settlement (the state
    /// regressor for the whole horizon).
    pub e_diff_at_anchor: f64,
    /// Realized midnight-anchored upper-boundary value at the anchor.
    pub u_rel_at_anchor: f64,
    pub steps: Vec<ForecastStep>,
}

/// Point forecast over a horizon, upper boundary relative to the
/// realized anchor value.
#[derive(Clone, Debug, PartialEq)]
pub struct PointForecast {
    pub e_upper_rel: Vec<f64>,
    pub e_diff: Vec<f64>,
    pub p_bound: Vec<f64>,
    pub settlement_of_day: Vec<usize>,
}

/// Predicts the three boundary series over a horizon. The upper boundary
/// chains midnight-anchored predictions across day rollovers and is
/// re-based to the realized anchor; the lower boundary is rebuilt as
/// upper minus the (non-negative) predicted difference.
pub fn predict_boundaries(
    forecaster: &Forecaster,
    ctx: &ForecastContext,
) -> Result<PointForecast, ForecastError> {
    let per_day = forecaster.upper.per_settlement.len();
    let state = ctx.e_diff_at_anchor;
    if !state.is_finite() || !ctx.u_rel_at_anchor.is_finite() {
        return Err(ForecastError::MissingFeature(0));
    }
    let mut e_upper_rel = Vec::with_capacity(ctx.steps.len());
    let mut e_diff = Vec::with_capacity(ctx.steps.len());
    let mut p_bound = Vec::with_capacity(ctx.steps.len());
    let mut ks = Vec::with_capacity(ctx.steps.len());

    let mut carry = 0.0;
    let mut current_day = 0usize;
    let mut prev_day_feats = ctx.anchor_day.clone();
    for (i, step) in ctx.steps.iter().enumerate() {
        if step.settlement_of_day >= per_day {
            return Err(ForecastError::MissingFeature(i));
        }
        while current_day < step.day_offset {
            // Close out the day being left behind at its final settlement.
            let x = regressors(&prev_day_feats, state);
            carry += forecaster.upper.predict(per_day - 1, &x);
            current_day += 1;
        }
        prev_day_feats = step.day.clone();
        let x = regressors(&step.day, state);
        let u_mid = forecaster.upper.predict(step.settlement_of_day, &x);
        e_upper_rel.push(carry + u_mid - ctx.u_rel_at_anchor);
        e_diff.push(forecaster.diff.predict(step.settlement_of_day, &x));
        p_bound.push(forecaster.power.predict(step.settlement_of_day, &x).max(0.0));
        ks.push(step.settlement_of_day);
    }
    Ok(PointForecast {
        e_upper_rel,
        e_diff,
        p_bound,
        settlement_of_day: ks,
    })
}

/// Probability-weighted scenario paths over a planning horizon. Energies
/// are relative to the realized anchor; `anchor_kwh` is the trajectory's
/// starting value in the same coordinates (≤ 0 by construction).
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSet {
    pub probs: Vec<f64>,
    pub scenarios: Vec<ScenarioPath>,
    pub anchor_kwh: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioPath {
    pub e_upper: Vec<f64>,
    pub e_lower: Vec<f64>,
    pub p_bound: Vec<f64>,
}

impl ScenarioSet {
    pub fn horizon(&self) -> usize {
        self.scenarios.first().map_or(0, |s| s.e_upper.len())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioMode {
    /// One band index drives all three boundaries across the horizon.
    Joint,
    /// Cartesian product of band indices per boundary.
    IndependentProduct,
}

/// Conditional mean of a standard normal within each cumulative
/// probability band.
pub fn band_z_offsets(probs: &[f64]) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut out = Vec::with_capacity(probs.len());
    let mut cum = 0.0;
    for &p in probs {
        let lo = cum;
        let hi = cum + p;
        cum = hi;
        if p <= 0.0 {
            out.push(0.0);
            continue;
        }
        // E[Z | a < Z < b] = (φ(a) − φ(b)) / p with φ(±∞) = 0.
        let pdf_lo = if lo <= 0.0 {
            0.0
        } else {
            normal.pdf(normal.inverse_cdf(lo))
        };
        let pdf_hi = if hi >= 1.0 {
            0.0
        } else {
            normal.pdf(normal.inverse_cdf(hi))
        };
        out.push((pdf_lo - pdf_hi) / p);
    }
    out
}

/// Builds scenario paths around a point forecast and projects them onto
/// physically reachable envelopes (non-decreasing upper boundary, lower
/// boundary reachable from the anchor under the power bound).
pub fn generate_scenarios(
    point: &PointForecast,
    forecaster: &Forecaster,
    probs: &[f64],
    mode: ScenarioMode,
    anchor_kwh: f64,
    eta: f64,
    dt_hours: f64,
) -> ScenarioSet {
    let offsets = band_z_offsets(probs);
    let h = point.e_upper_rel.len();
    let sigma = |model: &MlrModel, t: usize| model.sigma(point.settlement_of_day[t]);

    let build = |bu: usize, bd: usize, bp: usize| -> ScenarioPath {
        let mut e_upper = Vec::with_capacity(h);
        let mut e_lower = Vec::with_capacity(h);
        let mut p_bound = Vec::with_capacity(h);
        for t in 0..h {
            let u = point.e_upper_rel[t] + offsets[bu] * sigma(&forecaster.upper, t);
            let d = point.e_diff[t] + offsets[bd] * sigma(&forecaster.diff, t);
            let p = (point.p_bound[t] + offsets[bp] * sigma(&forecaster.power, t)).max(0.0);
            e_upper.push(u);
            e_lower.push(u - d.max(0.0));
            p_bound.push(p);
        }
        ScenarioPath {
            e_upper,
            e_lower,
            p_bound,
        }
    };

    let (probs, scenarios): (Vec<f64>, Vec<ScenarioPath>) = match mode {
        ScenarioMode::Joint => (
            probs.to_vec(),
            (0..probs.len()).map(|b| build(b, b, b)).collect(),
        ),
        ScenarioMode::IndependentProduct => {
            let mut ps = Vec::new();
            let mut sc = Vec::new();
            for bu in 0..probs.len() {
                for bd in 0..probs.len() {
                    for bp in 0..probs.len() {
                        ps.push(probs[bu] * probs[bd] * probs[bp]);
                        sc.push(build(bu, bd, bp));
                    }
                }
            }
            (ps, sc)
        }
    };

    let mut set = ScenarioSet {
        probs,
        scenarios,
        anchor_kwh,
    };
    repair_scenarios(&mut set, eta, dt_hours);
    set
}

/// Single-scenario set wrapping given boundary paths (used by the
/// perfect-foresight and deterministic benchmarks).
pub fn degenerate_scenario(
    e_upper: Vec<f64>,
    e_lower: Vec<f64>,
    p_bound: Vec<f64>,
    anchor_kwh: f64,
    eta: f64,
    dt_hours: f64,
) -> ScenarioSet {
    let mut set = ScenarioSet {
        probs: vec![1.0],
        scenarios: vec![ScenarioPath {
            e_upper,
            e_lower,
            p_bound,
        }],
        anchor_kwh,
    };
    repair_scenarios(&mut set, eta, dt_hours);
    set
}

/// Projects scenario paths onto the reachable set: clips the power
/// boundary at zero, makes the upper boundary non-decreasing from the
/// anchor state, and lowers the lower boundary wherever no trajectory
/// from the anchor could climb fast enough. The first settlement is
/// capped by the weakest scenario's power bound because dispatch there
/// is common to all scenarios.
pub fn repair_scenarios(set: &mut ScenarioSet, eta: f64, dt_hours: f64) {
    let h = set.horizon();
    if h == 0 {
        return;
    }
    let anchor = set.anchor_kwh;
    for s in &mut set.scenarios {
        let mut run = 0.0f64;
        for t in 0..h {
            s.p_bound[t] = s.p_bound[t].max(0.0);
            run = run.max(s.e_upper[t]);
            s.e_upper[t] = run;
        }
    }
    let first_reach = set
        .scenarios
        .iter()
        .map(|s| (eta * s.p_bound[0] * dt_hours).min(s.e_upper[0] - anchor))
        .fold(f64::INFINITY, f64::min)
        .max(0.0);
    for s in &mut set.scenarios {
        let mut reach = anchor + first_reach;
        for t in 0..h {
            if t > 0 {
                reach = (reach + eta * s.p_bound[t] * dt_hours).min(s.e_upper[t]);
            } else {
                reach = reach.min(s.e_upper[0]);
            }
            s.e_lower[t] = s.e_lower[t].min(reach).min(s.e_upper[t]);
        }
    }
}

/// Root-mean-square error normalised by the mean of the actual series.
pub fn nrmse(pred: &[f64], actual: &[f64]) -> Result<f64, ForecastError> {
    if pred.len() != actual.len() || actual.is_empty() {
        return Err(ForecastError::BadSeries);
    }
    let n = actual.len() as f64;
    let mean = actual.iter().sum::<f64>() / n;
    if mean.abs() < 1e-12 {
        return Err(ForecastError::ZeroMean);
    }
    let mse = pred
        .iter()
        .zip(actual)
        .map(|(p, a)| (p - a) * (p - a))
        .sum::<f64>()
        / n;
    Ok(mse.sqrt() / mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn monday(i: usize) -> DayFeatures {
        // consecutive Mondays keep the day-of-week dummies zeroed
        DayFeatures {
            date: NaiveDate::from_ymd_opt(2023, 1, 2).unwrap()
                + chrono::Duration::days(7 * i as i64),
            temp_c: 0.0,
            precip_mm: 0.0,
            bank_holiday: false,
        }
    }

    fn flat_training(
        n_days: usize,
        per_day: usize,
        f: impl Fn(usize, &DayFeatures) -> f64,
    ) -> TrainingData {
        let days = (0..n_days)
            .map(|i| {
                let day = monday(i);
                let v: Vec<f64> = (0..per_day).map(|k| f(k, &day)).collect();
                TrainingDay {
                    day,
                    e_diff_at_day_start: 0.0,
                    u_rel: v.clone(),
                    e_diff: v.clone(),
                    p_bound: v,
                }
            })
            .collect();
        TrainingData {
            days,
            settlements_per_day: per_day,
        }
    }

    #[test]
    fn exact_linear_recovery() {
        // target = 2 + 0.5·temp with all other regressors zero
        let mut data = flat_training(14, 4, |_, _| 0.0);
        for (i, d) in data.days.iter_mut().enumerate() {
            d.day.temp_c = i as f64;
            let y = 2.0 + 0.5 * d.day.temp_c;
            d.u_rel = vec![y; 4];
            d.e_diff = vec![y; 4];
            d.p_bound = vec![y; 4];
        }
        let model = fit_mlr(&data, BoundaryTarget::EUpper).unwrap();
        for k in 0..4 {
            let c = &model.per_settlement[k];
            assert!((c.beta[0] - 2.0).abs() < 1e-8, "beta0 {}", c.beta[0]);
            assert!((c.beta[2] - 0.5).abs() < 1e-8, "beta2 {}", c.beta[2]);
            assert!(c.sigma < 1e-8);
        }
    }

    #[test]
    fn constant_target_goes_to_intercept() {
        let mut data = flat_training(20, 2, |_, _| 3.25);
        for (i, d) in data.days.iter_mut().enumerate() {
            d.day.temp_c = (i as f64 * 0.7).sin() * 10.0;
            d.day.precip_mm = (i % 5) as f64;
            d.e_diff_at_day_start = i as f64;
        }
        let model = fit_mlr(&data, BoundaryTarget::EDiff).unwrap();
        let c = &model.per_settlement[0];
        assert!((c.beta[0] - 3.25).abs() < 1e-7);
        for b in &c.beta[1..] {
            assert!(b.abs() < 1e-7, "stray coefficient {b}");
        }
    }

    #[test]
    fn two_point_closed_form() {
        // H = (0, 10), y = (4, 9): slope 0.5, intercept 4; all unused
        // columns get zero weight under the minimum-norm solution.
        let mut data = flat_training(2, 1, |_, _| 0.0);
        data.days[0].day.temp_c = 0.0;
        data.days[1].day.temp_c = 10.0;
        data.days[0].p_bound = vec![4.0];
        data.days[1].p_bound = vec![9.0];
        let model = fit_mlr(&data, BoundaryTarget::PBound).unwrap();
        let c = &model.per_settlement[0];
        assert!((c.beta[0] - 4.0).abs() < 1e-8, "beta0 {}", c.beta[0]);
        assert!((c.beta[2] - 0.5).abs() < 1e-8, "beta2 {}", c.beta[2]);
    }

    #[test]
    fn too_few_rows_is_an_error() {
        let data = flat_training(1, 3, |_, _| 1.0);
        match fit_mlr(&data, BoundaryTarget::EUpper) {
            Err(ForecastError::TooFewRows {
                settlement: 0,
                rows: 1,
            }) => {}
            other => panic!("expected TooFewRows, got {other:?}"),
        }
    }

    #[test]
    fn in_sample_beats_constant_mean_predictor() {
        // OLS optimality: residual RMSE never exceeds the centred RMSE.
        let mut data = flat_training(30, 1, |_, _| 0.0);
        for (i, d) in data.days.iter_mut().enumerate() {
            d.day.temp_c = (i as f64).sin() * 5.0;
            d.p_bound = vec![1.0 + 0.4 * d.day.temp_c + ((i * 37) % 11) as f64 * 0.3];
        }
        let model = fit_mlr(&data, BoundaryTarget::PBound).unwrap();
        let ys: Vec<f64> = data.days.iter().map(|d| d.p_bound[0]).collect();
        let preds: Vec<f64> = data
            .days
            .iter()
            .map(|d| model.predict(0, &regressors(&d.day, d.e_diff_at_day_start)))
            .collect();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let rmse_model = nrmse(&preds, &ys).unwrap();
        let rmse_const = nrmse(&vec![mean; ys.len()], &ys).unwrap();
        assert!(rmse_model <= rmse_const + 1e-12);
    }

    #[test]
    fn lower_boundary_from_difference() {
        // E_l = E_u − max(E_d, 0)
        let point = PointForecast {
            e_upper_rel: vec![100.0, 100.0],
            e_diff: vec![30.0, -5.0],
            p_bound: vec![1000.0, 1000.0],
            settlement_of_day: vec![0, 1],
        };
        // scenario builder with zero sigmas and a single certain band
        let data = flat_training(3, 2, |_, _| 0.0);
        let f = Forecaster::fit(&data).unwrap();
        let set = generate_scenarios(&point, &f, &[1.0], ScenarioMode::Joint, 0.0, 1.0, 0.5);
        let s = &set.scenarios[0];
        assert!((s.e_upper[0] - s.e_lower[0] - 30.0).abs() < 1e-12);
        // negative difference clips to zero: lower equals upper
        assert!((s.e_upper[1] - s.e_lower[1]).abs() < 1e-12);
    }

    #[test]
    fn band_offsets_match_quadrature_oracle() {
        // Oracle: running trapezoid integral of the standard normal
        // density, binning the z·φ(z) mass into cumulative bands.
        let probs = SCENARIO_PROBS;
        let got = band_z_offsets(&probs);
        let n = 1_000_000usize;
        let (z_lo, z_hi) = (-9.0f64, 9.0f64);
        let dz = (z_hi - z_lo) / n as f64;
        let mut cum = 0.0f64;
        let mut mass = [0.0f64; 5];
        let mut moment = [0.0f64; 5];
        let bands = {
            let mut edges = [0.0f64; 6];
            for i in 0..5 {
                edges[i + 1] = edges[i] + probs[i];
            }
            edges
        };
        for i in 0..n {
            let z = z_lo + (i as f64 + 0.5) * dz;
            let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let c = cum + 0.5 * pdf * dz;
            cum += pdf * dz;
            let band = bands[1..].iter().position(|&e| c < e).unwrap_or(4);
            mass[band] += pdf * dz;
            moment[band] += z * pdf * dz;
        }
        for b in 0..5 {
            let oracle = moment[b] / mass[b];
            assert!(
                (got[b] - oracle).abs() < 2e-3,
                "band {b}: {} vs oracle {oracle}",
                got[b]
            );
        }
        // symmetric centre band and the documented extreme-band value
        assert!(got[2].abs() < 1e-12);
        assert!((got[4] - 2.6652).abs() < 5e-4, "top band {}", got[4]);
        assert!((got[0] + got[4]).abs() < 1e-9);
    }

    #[test]
    fn zero_sigma_scenarios_collapse_to_point() {
        let data = flat_training(5, 2, |k, _| k as f64);
        let f = Forecaster::fit(&data).unwrap();
        let point = PointForecast {
            e_upper_rel: vec![1.0, 2.0],
            e_diff: vec![0.5, 0.5],
            p_bound: vec![3.0, 3.0],
            settlement_of_day: vec![0, 1],
        };
        let set = generate_scenarios(
            &point,
            &f,
            &SCENARIO_PROBS,
            ScenarioMode::Joint,
            -0.25,
            0.9,
            0.5,
        );
        assert_eq!(set.scenarios.len(), 5);
        assert!(set.probs.iter().sum::<f64>() == 1.0);
        for s in &set.scenarios {
            assert_eq!(s.e_upper, set.scenarios[0].e_upper);
            assert_eq!(s.e_lower, set.scenarios[0].e_lower);
            assert_eq!(s.p_bound, set.scenarios[0].p_bound);
        }
    }

    #[test]
    fn scenario_band_monotonicity() {
        let mut data = flat_training(24, 2, |k, _| 1.0 + k as f64);
        for (i, d) in data.days.iter_mut().enumerate() {
            // inject residual spread so sigmas are positive
            let noise = ((i * 31 % 7) as f64 - 3.0) * 0.4;
            d.u_rel = vec![5.0 + noise, 8.0 + noise];
            d.e_diff = vec![2.0 + 0.3 * noise, 2.0 + 0.3 * noise];
            d.p_bound = vec![4.0 + 0.5 * noise, 4.0 + 0.5 * noise];
        }
        let f = Forecaster::fit(&data).unwrap();
        assert!(f.upper.sigma(0) > 0.0);
        let point = PointForecast {
            e_upper_rel: vec![5.0, 8.0],
            e_diff: vec![2.0, 2.0],
            p_bound: vec![4.0, 4.0],
            settlement_of_day: vec![0, 1],
        };
        let set = generate_scenarios(
            &point,
            &f,
            &SCENARIO_PROBS,
            ScenarioMode::Joint,
            0.0,
            0.9,
            0.5,
        );
        for s in 1..5 {
            for t in 0..2 {
                assert!(set.scenarios[s].e_upper[t] >= set.scenarios[s - 1].e_upper[t] - 1e-12);
                assert!(set.scenarios[s].p_bound[t] >= set.scenarios[s - 1].p_bound[t] - 1e-12);
            }
        }
        for s in &set.scenarios {
            for t in 0..2 {
                assert!(s.e_lower[t] <= s.e_upper[t] + 1e-12);
                assert!(s.p_bound[t] >= 0.0);
            }
        }
    }

    #[test]
    fn product_mode_has_125_scenarios() {
        let data = flat_training(5, 1, |_, _| 1.0);
        let f = Forecaster::fit(&data).unwrap();
        let point = PointForecast {
            e_upper_rel: vec![1.0],
            e_diff: vec![0.2],
            p_bound: vec![2.0],
            settlement_of_day: vec![0],
        };
        let set = generate_scenarios(
            &point,
            &f,
            &SCENARIO_PROBS,
            ScenarioMode::IndependentProduct,
            0.0,
            0.9,
            0.5,
        );
        assert_eq!(set.scenarios.len(), 125);
        assert!((set.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn repair_makes_lower_reachable() {
        let mut set = ScenarioSet {
            probs: vec![1.0],
            scenarios: vec![ScenarioPath {
                e_upper: vec![5.0, 4.0, 10.0],
                e_lower: vec![4.0, 4.0, 9.0],
                p_bound: vec![2.0, -1.0, 2.0],
            }],
            anchor_kwh: -1.0,
        };
        repair_scenarios(&mut set, 1.0, 0.5);
        let s = &set.scenarios[0];
        // power clipped, upper monotone
        assert_eq!(s.p_bound[1], 0.0);
        assert!(s.e_upper[1] >= s.e_upper[0]);
        // lower cannot exceed what full charging reaches from the anchor
        assert!(s.e_lower[0] <= -1.0 + 2.0 * 0.5 + 1e-12);
        assert!(s.e_lower[1] <= s.e_lower[0] + 1e-12); // no power in settlement 1
        for t in 0..3 {
            assert!(s.e_lower[t] <= s.e_upper[t]);
        }
    }

    #[test]
    fn nrmse_hand_values() {
        assert_eq!(nrmse(&[1.0, 3.0], &[1.0, 3.0]).unwrap(), 0.0);
        let v = nrmse(&[2.0, 2.0], &[1.0, 3.0]).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        let w = nrmse(&[4.0, 0.0], &[2.0, 2.0]).unwrap();
        assert!((w - 1.0).abs() < 1e-12);
        assert!(matches!(nrmse(&[1.0], &[0.0]), Err(ForecastError::ZeroMean)));
        assert!(matches!(nrmse(&[], &[]), Err(ForecastError::BadSeries)));
    }

    #[test]
    fn model_csv_roundtrip() {
        let mut data = flat_training(15, 3, |k, _| k as f64 + 0.5);
        for (i, d) in data.days.iter_mut().enumerate() {
            d.day.temp_c = i as f64 * 0.3;
            d.u_rel[1] += (i % 3) as f64 * 0.21;
        }
        let f = Forecaster::fit(&data).unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let g = Forecaster::read_csv(buf.as_slice()).unwrap();
        assert_eq!(f, g);
    }
}
