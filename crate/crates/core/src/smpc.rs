//! Rolling-horizon simulation of the aggregator: per-settlement
//! re-forecast and recourse dispatch, a day-ahead reserve auction at the
//! configured settlement, realization against the true envelope with
//! capability checks and penalty accounting, plus the benchmark
//! algorithms used for comparison.
//!
//! Reserve is never energetically activated; the simulator only verifies
//! that each committed settlement could have sustained the contracted
//! activation, and charges the penalty price for any shortfall.

use std::collections::VecDeque;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use evflex_lp::MilpOptions;

use crate::aggregation::{envelope_from_sessions, uncontrolled_load, AggregateEnvelope};
use crate::fleet_data::{
    cleanse_sessions, generate_synthetic_fleet, infer_profiles, synthetic_exogenous,
    ChargeSession, EvProfile, ExogenousSeries, SyntheticFleetParams,
};
use crate::forecast::{
    build_training_data, degenerate_scenario, generate_scenarios, nrmse, predict_boundaries,
    ForecastContext, ForecastError, ForecastStep, Forecaster, PointForecast, ScenarioMode,
    ScenarioSet, SCENARIO_PROBS,
};
use crate::optimizer::{
    build_stage1, build_stage2, DeliveryLayout, MarketParams, OptimizerError, PriceSlice,
};
use crate::time::SettlementGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Full stochastic controller with CVaR-shaped auction bids.
    Smpc,
    /// Single-scenario controller fed the realized future envelope.
    PerfectForesight,
    /// Single-scenario controller fed the central point forecast.
    Deterministic,
    /// Charge-on-arrival, no market participation.
    Uncontrolled,
    /// Fits and evaluates forecasts only; no dispatch or costs.
    ForecastOnly,
}

impl Algorithm {
    pub fn label(self) -> &'static str {
        match self {
            Algorithm::Smpc => "smpc",
            Algorithm::PerfectForesight => "perfect_foresight",
            Algorithm::Deterministic => "deterministic",
            Algorithm::Uncontrolled => "uncontrolled",
            Algorithm::ForecastOnly => "forecast_only",
        }
    }

    fn needs_models(self) -> bool {
        matches!(
            self,
            Algorithm::Smpc | Algorithm::Deterministic | Algorithm::ForecastOnly
        )
    }

    fn dispatches(self) -> bool {
        matches!(
            self,
            Algorithm::Smpc | Algorithm::PerfectForesight | Algorithm::Deterministic
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FleetSource {
    /// Seeded synthetic fleet of the given size.
    Synthetic,
    /// Interchange-format sessions CSV; fleets are seeded subsamples of
    /// the charger population.
    Csv { sessions: String },
}

/// Full description of one simulation run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSpec {
    pub label: String,
    pub source: FleetSource,
    pub n_ev: usize,
    pub seed: u64,
    pub start_date: NaiveDate,
    pub total_days: usize,
    pub training_days: usize,
    pub market: MarketParams,
    pub algorithm: Algorithm,
    pub scenario_mode: ScenarioMode,
    pub floor_fraction: f64,
    /// Settlement-of-day of the reserve auction.
    pub auction_sod: usize,
    /// Settlement-of-day at which delivery days start.
    pub delivery_start_sod: usize,
    pub stage1_horizon: usize,
    pub stage2_horizon: usize,
    pub milp_gap_tol: f64,
    pub milp_node_limit: usize,
    pub synthetic: SyntheticFleetParams,
}

impl RunSpec {
    pub fn synthetic_default(label: impl Into<String>, n_ev: usize, seed: u64) -> Self {
        RunSpec {
            label: label.into(),
            source: FleetSource::Synthetic,
            n_ev,
            seed,
            start_date: NaiveDate::from_ymd_opt(2023, 1, 2).unwrap(),
            total_days: 40,
            training_days: 28,
            market: MarketParams::default(),
            algorithm: Algorithm::Smpc,
            scenario_mode: ScenarioMode::Joint,
            floor_fraction: 0.2,
            auction_sod: 28,
            delivery_start_sod: 46,
            stage1_horizon: 66,
            stage2_horizon: 18,
            milp_gap_tol: 1e-6,
            milp_node_limit: 200_000,
            synthetic: SyntheticFleetParams::default(),
        }
    }

    pub fn milp_options(&self) -> MilpOptions {
        MilpOptions {
            gap_tol: self.milp_gap_tol,
            node_limit: self.milp_node_limit,
            time_limit: None,
        }
    }

    pub fn grid(&self) -> SettlementGrid {
        SettlementGrid::for_days(self.start_date, self.market.dt_hours, self.total_days)
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("settlement {settlement}: optimizer failed: {source}")]
    Optimizer {
        settlement: usize,
        source: OptimizerError,
    },
    #[error("forecast failed: {0}")]
    Forecast(#[from] ForecastError),
    #[error("{0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("data: {0}")]
    Data(#[from] crate::fleet_data::DataError),
}

/// Fleet, envelope, and exogenous series prepared on a grid.
#[derive(Clone, Debug)]
pub struct PreparedFleet {
    pub grid: SettlementGrid,
    pub n_ev: usize,
    pub sessions: Vec<ChargeSession>,
    pub profiles: std::collections::BTreeMap<String, EvProfile>,
    pub envelope: AggregateEnvelope,
    pub uncontrolled_kw: Vec<f64>,
    pub exog: ExogenousSeries,
}

/// Builds the fleet for a run spec: synthetic generation or a seeded
/// subsample of a sessions file, then cleansing, profile inference, and
/// envelope aggregation.
pub fn prepare_fleet(spec: &RunSpec) -> Result<PreparedFleet, SimError> {
    let grid = spec.grid();
    let exog = synthetic_exogenous(grid, spec.seed);
    let raw = match &spec.source {
        FleetSource::Synthetic => {
            generate_synthetic_fleet(spec.seed, spec.n_ev, &exog.days, &spec.synthetic)
        }
        FleetSource::Csv { sessions } => {
            let file = std::fs::File::open(sessions)?;
            let (parsed, _errors) =
                crate::fleet_data::parse_sessions(file, &Default::default())?;
            subsample_chargers(parsed, spec.n_ev, spec.seed)
        }
    };
    prepare_from_sessions(raw, exog, spec)
}

/// Deterministically subsamples `n_ev` chargers from a session list.
pub fn subsample_chargers(
    sessions: Vec<ChargeSession>,
    n_ev: usize,
    seed: u64,
) -> Vec<ChargeSession> {
    let mut ids: Vec<String> = sessions.iter().map(|s| s.charger_id.clone()).collect();
    ids.sort();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ab5_a3b1e);
    ids.shuffle(&mut rng);
    ids.truncate(n_ev);
    let keep: std::collections::BTreeSet<String> = ids.into_iter().collect();
    sessions
        .into_iter()
        .filter(|s| keep.contains(&s.charger_id))
        .collect()
}

/// Cleanses, infers profiles, and aggregates an explicit session list.
pub fn prepare_from_sessions(
    raw: Vec<ChargeSession>,
    exog: ExogenousSeries,
    spec: &RunSpec,
) -> Result<PreparedFleet, SimError> {
    let grid = exog.grid;
    let cleansed = cleanse_sessions(raw);
    let profiles = infer_profiles(&cleansed.kept, spec.market.eta);
    let envelope = envelope_from_sessions(&cleansed.kept, &profiles, &grid, spec.floor_fraction);
    let uncontrolled_kw = uncontrolled_load(&cleansed.kept, &profiles, &grid);
    Ok(PreparedFleet {
        grid,
        n_ev: profiles.len(),
        sessions: cleansed.kept,
        profiles,
        envelope,
        uncontrolled_kw,
        exog,
    })
}

/// One realized settlement of a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SettlementRecord {
    pub settlement: usize,
    pub e_upper: f64,
    pub e_lower: f64,
    pub p_bound: f64,
    pub tail_load_kw: f64,
    /// Net flexible grid power dispatched (charge positive), kW.
    pub net_kw: f64,
    /// Realized cumulative trajectory after this settlement, kWh.
    pub e_ev: f64,
    pub reserve_pos_kw: f64,
    pub reserve_neg_kw: f64,
    /// Covered by an auctioned delivery window (even at zero commitment).
    pub in_delivery: bool,
    pub capable_pos: bool,
    pub capable_neg: bool,
    pub penalty_gbp: f64,
    pub wholesale_gbp: f64,
    pub reserve_revenue_gbp: f64,
    pub clamped: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DailyNrmse {
    pub day: usize,
    /// 1 = auction-horizon forecasts, 2 = dispatch-horizon forecasts.
    pub stage: u8,
    pub e_upper: f64,
    pub e_diff: f64,
    pub p_bound: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimulationLog {
    pub label: String,
    pub algorithm: String,
    pub omega: f64,
    pub n_ev: usize,
    pub seed: u64,
    pub records: Vec<SettlementRecord>,
    pub daily_nrmse: Vec<DailyNrmse>,
    pub charge_cost_gbp: f64,
    pub penalty_gbp: f64,
    pub reserve_revenue_gbp: f64,
    pub energy_delivered_kwh: f64,
    pub clamp_events: usize,
    pub solver_nodes: usize,
}

impl SimulationLog {
    /// (wholesale + penalties − reserve revenue) per kWh delivered.
    pub fn effective_cost_gbp_per_kwh(&self) -> f64 {
        (self.charge_cost_gbp + self.penalty_gbp - self.reserve_revenue_gbp)
            / self.energy_delivered_kwh.max(1e-9)
    }

    /// Mean contracted reserve (both directions) per vehicle over the
    /// settlements of committed delivery windows, kW.
    pub fn reserve_kw_per_ev(&self) -> f64 {
        let committed: Vec<&SettlementRecord> = self
            .records
            .iter()
            .filter(|r| r.in_delivery)
            .collect();
        if committed.is_empty() || self.n_ev == 0 {
            return 0.0;
        }
        committed
            .iter()
            .map(|r| r.reserve_pos_kw + r.reserve_neg_kw)
            .sum::<f64>()
            / committed.len() as f64
            / self.n_ev as f64
    }

    pub fn penalty_share(&self) -> f64 {
        let gross = self.charge_cost_gbp + self.penalty_gbp;
        if gross.abs() < 1e-12 {
            0.0
        } else {
            self.penalty_gbp / gross
        }
    }

    /// Mean of a per-day NRMSE column for one stage, ignoring days where
    /// the metric was undefined.
    pub fn mean_nrmse(&self, stage: u8, pick: impl Fn(&DailyNrmse) -> f64) -> f64 {
        let vals: Vec<f64> = self
            .daily_nrmse
            .iter()
            .filter(|d| d.stage == stage)
            .map(&pick)
            .filter(|v| v.is_finite())
            .collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    /// Audit: totals must reproduce the per-settlement sums exactly.
    pub fn totals_consistent(&self) -> bool {
        let wholesale: f64 = self.records.iter().map(|r| r.wholesale_gbp).sum();
        let pen: f64 = self.records.iter().map(|r| r.penalty_gbp).sum();
        let rev: f64 = self.records.iter().map(|r| r.reserve_revenue_gbp).sum();
        (wholesale - self.charge_cost_gbp).abs() < 1e-9
            && (pen - self.penalty_gbp).abs() < 1e-9
            && (rev - self.reserve_revenue_gbp).abs() < 1e-9
    }

    pub fn write_dispatch_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        writeln!(
            w,
            "settlement,e_upper,e_lower,p_bound,tail_load_kw,net_kw,e_ev,reserve_pos_kw,\
             reserve_neg_kw,in_delivery,capable_pos,capable_neg,penalty_gbp,wholesale_gbp,\
             reserve_revenue_gbp,clamped"
        )?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.settlement,
                r.e_upper,
                r.e_lower,
                r.p_bound,
                r.tail_load_kw,
                r.net_kw,
                r.e_ev,
                r.reserve_pos_kw,
                r.reserve_neg_kw,
                r.in_delivery as u8,
                r.capable_pos as u8,
                r.capable_neg as u8,
                r.penalty_gbp,
                r.wholesale_gbp,
                r.reserve_revenue_gbp,
                r.clamped as u8
            )?;
        }
        Ok(())
    }

    pub fn write_daily_nrmse_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "day,stage,nrmse_e_upper,nrmse_e_diff,nrmse_p_bound")?;
        for d in &self.daily_nrmse {
            writeln!(
                w,
                "{},{},{},{},{}",
                d.day, d.stage, d.e_upper, d.e_diff, d.p_bound
            )?;
        }
        Ok(())
    }

    pub fn write_costs_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        writeln!(
            w,
            "label,algorithm,omega,n_ev,seed,charge_cost_gbp,penalty_gbp,reserve_revenue_gbp,\
             energy_delivered_kwh,effective_cost_gbp_per_kwh,clamp_events,solver_nodes"
        )?;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.label,
            self.algorithm,
            self.omega,
            self.n_ev,
            self.seed,
            self.charge_cost_gbp,
            self.penalty_gbp,
            self.reserve_revenue_gbp,
            self.energy_delivered_kwh,
            self.effective_cost_gbp_per_kwh(),
            self.clamp_events,
            self.solver_nodes
        )
    }
}

/// Pending per-day forecast comparisons, reduced to NRMSE rows at the end
/// of the run.
#[derive(Default)]
struct NrmseCollector {
    // (day, stage) -> (pred, actual) pairs per boundary
    buckets: std::collections::BTreeMap<(usize, u8), [Vec<f64>; 6]>,
}

impl NrmseCollector {
    fn push(
        &mut self,
        day: usize,
        stage: u8,
        pred: (&[f64], &[f64], &[f64]),
        actual: (&[f64], &[f64], &[f64]),
    ) {
        let e = self.buckets.entry((day, stage)).or_default();
        e[0].extend_from_slice(pred.0);
        e[1].extend_from_slice(actual.0);
        e[2].extend_from_slice(pred.1);
        e[3].extend_from_slice(actual.1);
        e[4].extend_from_slice(pred.2);
        e[5].extend_from_slice(actual.2);
    }

    fn finish(self) -> Vec<DailyNrmse> {
        let mut out = Vec::new();
        for ((day, stage), b) in self.buckets {
            let metric = |p: &[f64], a: &[f64]| nrmse(p, a).unwrap_or(f64::NAN);
            out.push(DailyNrmse {
                day,
                stage,
                e_upper: metric(&b[0], &b[1]),
                e_diff: metric(&b[2], &b[3]),
                p_bound: metric(&b[4], &b[5]),
            });
        }
        out
    }
}

/// The rolling-horizon state machine. Construct with [`Simulator::new`],
/// then call [`Simulator::step`] once per settlement (or use
/// [`run_simulation`]).
pub struct Simulator<'a> {
    fleet: &'a PreparedFleet,
    spec: &'a RunSpec,
    forecaster: Option<Forecaster>,
    /// Committed contracted reserve per global settlement.
    plan_pos: Vec<f64>,
    plan_neg: Vec<f64>,
    plan_committed: Vec<bool>,
    clock: usize,
    eval_start: usize,
    e_ev_cum: f64,
    trailing: VecDeque<f64>,
    records: Vec<SettlementRecord>,
    nrmse: NrmseCollector,
    clamp_events: usize,
    solver_nodes: usize,
    uncontrolled_e_cum: f64,
}

impl<'a> Simulator<'a> {
    pub fn new(fleet: &'a PreparedFleet, spec: &'a RunSpec) -> Result<Self, SimError> {
        let grid = fleet.grid;
        let per_day = grid.settlements_per_day();
        if spec.training_days == 0 || spec.training_days >= spec.total_days {
            return Err(SimError::Config(
                "training window must be non-empty and precede the simulation window".into(),
            ));
        }
        if spec.delivery_start_sod <= spec.auction_sod {
            return Err(SimError::Config(
                "delivery must start after the auction settlement".into(),
            ));
        }
        let forecaster = if spec.algorithm.needs_models() {
            let data = build_training_data(&fleet.envelope, &fleet.exog, 0..spec.training_days);
            Some(Forecaster::fit(&data)?)
        } else {
            None
        };
        let eval_start = spec.training_days * per_day;
        let e_ev_cum = if eval_start > 0 {
            // before the simulation starts, charging is uncontrolled:
            // the trajectory rides the upper boundary
            fleet.envelope.e_upper[eval_start - 1]
        } else {
            0.0
        };
        Ok(Simulator {
            fleet,
            spec,
            forecaster,
            plan_pos: vec![0.0; grid.n],
            plan_neg: vec![0.0; grid.n],
            plan_committed: vec![false; grid.n],
            clock: eval_start,
            eval_start,
            e_ev_cum,
            trailing: VecDeque::from(vec![0.0; spec.market.baseline_settlements]),
            records: Vec::with_capacity(grid.n - eval_start),
            nrmse: NrmseCollector::default(),
            clamp_events: 0,
            solver_nodes: 0,
            uncontrolled_e_cum: 0.0,
        })
    }

    pub fn clock(&self) -> usize {
        self.clock
    }

    pub fn done(&self) -> bool {
        self.clock >= self.fleet.grid.n
    }

    fn sod(&self, t: usize) -> usize {
        self.fleet.grid.settlement_of_day(t)
    }

    /// Realized midnight-anchored upper-boundary value at a settlement.
    fn u_rel_at(&self, t: usize) -> f64 {
        let per_day = self.fleet.grid.settlements_per_day();
        let d = t / per_day;
        let base = if d == 0 {
            0.0
        } else {
            self.fleet.envelope.e_upper[d * per_day - 1]
        };
        self.fleet.envelope.e_upper[t] - base
    }

    /// Forecast context anchored at `anchor` covering `len` settlements.
    fn forecast_context(&self, anchor: usize, len: usize) -> ForecastContext {
        let grid = &self.fleet.grid;
        let per_day = grid.settlements_per_day();
        let anchor_day = anchor / per_day;
        let steps = (0..len)
            .map(|h| {
                let t = anchor + 1 + h;
                ForecastStep {
                    settlement_of_day: self.sod(t),
                    day_offset: t / per_day - anchor_day,
                    day: self.fleet.exog.day(t / per_day).clone(),
                }
            })
            .collect();
        ForecastContext {
            anchor_day: self.fleet.exog.day(anchor_day).clone(),
            e_diff_at_anchor: self.fleet.envelope.e_diff(anchor),
            u_rel_at_anchor: self.u_rel_at(anchor),
            steps,
        }
    }

    /// Realized boundary slice relative to the anchor settlement.
    fn realized_relative(&self, anchor: usize, len: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let env = &self.fleet.envelope;
        let base = env.e_upper[anchor];
        let mut u = Vec::with_capacity(len);
        let mut l = Vec::with_capacity(len);
        let mut p = Vec::with_capacity(len);
        for h in 0..len {
            let t = anchor + 1 + h;
            u.push(env.e_upper[t] - base);
            l.push(env.e_lower[t] - base);
            p.push(env.p_bound[t]);
        }
        (u, l, p)
    }

    fn price_slice(&self, start: usize, len: usize) -> PriceSlice<'_> {
        let exog = &self.fleet.exog;
        PriceSlice {
            wholesale: &exog.wholesale_gbp_per_kwh[start..start + len],
            reserve_pos: &exog.reserve_pos_gbp_per_mw[start..start + len],
            reserve_neg: &exog.reserve_neg_gbp_per_mw[start..start + len],
            mean_price: exog.mean_price_gbp_per_kwh,
        }
    }

    /// Scenario set for a horizon starting at the clock settlement.
    fn scenarios_for(&mut self, len: usize, record_stage: Option<u8>) -> Result<ScenarioSet, SimError> {
        let tau = self.clock;
        let anchor = tau - 1;
        let anchor_kwh = self.e_ev_cum - self.fleet.envelope.e_upper[anchor];
        let market = &self.spec.market;
        match self.spec.algorithm {
            Algorithm::PerfectForesight | Algorithm::Uncontrolled => {
                let (u, l, p) = self.realized_relative(anchor, len);
                Ok(degenerate_scenario(u, l, p, anchor_kwh, market.eta, market.dt_hours))
            }
            Algorithm::Smpc | Algorithm::Deterministic | Algorithm::ForecastOnly => {
                let ctx = self.forecast_context(anchor, len);
                let point = {
                    let forecaster = self.forecaster.as_ref().expect("models fitted");
                    predict_boundaries(forecaster, &ctx)?
                };
                if let Some(stage) = record_stage {
                    self.record_nrmse(stage, anchor, &point);
                }
                let forecaster = self.forecaster.as_ref().expect("models fitted");
                let set = match self.spec.algorithm {
                    Algorithm::Deterministic => {
                        let e_lower: Vec<f64> = point
                            .e_upper_rel
                            .iter()
                            .zip(&point.e_diff)
                            .map(|(u, d)| u - d.max(0.0))
                            .collect();
                        degenerate_scenario(
                            point.e_upper_rel.clone(),
                            e_lower,
                            point.p_bound.clone(),
                            anchor_kwh,
                            market.eta,
                            market.dt_hours,
                        )
                    }
                    _ => generate_scenarios(
                        &point,
                        forecaster,
                        &SCENARIO_PROBS,
                        self.spec.scenario_mode,
                        anchor_kwh,
                        market.eta,
                        market.dt_hours,
                    ),
                };
                Ok(set)
            }
        }
    }

    fn record_nrmse(&mut self, stage: u8, anchor: usize, point: &PointForecast) {
        let len = point.e_upper_rel.len();
        let (u, l, p) = self.realized_relative(anchor, len);
        let d: Vec<f64> = u.iter().zip(&l).map(|(a, b)| a - b).collect();
        let day = self.clock / self.fleet.grid.settlements_per_day();
        self.nrmse.push(
            day,
            stage,
            (&point.e_upper_rel, &point.e_diff, &point.p_bound),
            (&u, &d, &p),
        );
    }

    /// Day-ahead auction: solve stage 1 and commit the delivery plan.
    fn auction(&mut self) -> Result<(), SimError> {
        let tau = self.clock;
        let grid = self.fleet.grid;
        let remaining = grid.n - tau;
        let horizon = self.spec.stage1_horizon.min(remaining);
        let first = self.spec.delivery_start_sod - self.spec.auction_sod;
        let window = self.spec.market.window_settlements;
        if horizon <= first {
            return Ok(());
        }
        let n_windows = ((horizon - first) / window).min(grid.settlements_per_day() / window);
        if n_windows == 0 {
            return Ok(());
        }
        let scenarios = self.scenarios_for(horizon, Some(1))?;
        let trailing: Vec<f64> = self.trailing.iter().copied().collect();
        let prices = self.price_slice(tau, horizon);
        let delivery = DeliveryLayout { first, n_windows };
        let stage1 = build_stage1(&scenarios, &self.spec.market, prices, &trailing, delivery)
            .map_err(|source| SimError::Optimizer { settlement: tau, source })?;
        let sol = stage1
            .solve_stage1(&self.spec.milp_options())
            .map_err(|source| SimError::Optimizer { settlement: tau, source })?;
        self.solver_nodes += sol.nodes;
        let plan = sol.plan.expect("stage 1 returns a plan");
        for w in 0..n_windows {
            for i in 0..window {
                let t = tau + first + w * window + i;
                if t < grid.n {
                    self.plan_pos[t] = plan.pos_kw[w];
                    self.plan_neg[t] = plan.neg_kw[w];
                    self.plan_committed[t] = true;
                }
            }
        }
        Ok(())
    }

    /// Recourse dispatch for the clock settlement: solve stage 2 over the
    /// short horizon and return the probability-weighted first-settlement
    /// grid flows (charge, discharge).
    fn dispatch(&mut self) -> Result<(f64, f64), SimError> {
        let tau = self.clock;
        let grid = self.fleet.grid;
        let horizon = self.spec.stage2_horizon.min(grid.n - tau);
        let record = matches!(
            self.spec.algorithm,
            Algorithm::Smpc | Algorithm::Deterministic
        );
        let scenarios = self.scenarios_for(horizon, record.then_some(2))?;
        let trailing: Vec<f64> = self.trailing.iter().copied().collect();
        let prices = self.price_slice(tau, horizon);
        let plan_pos = &self.plan_pos[tau..tau + horizon];
        let plan_neg = &self.plan_neg[tau..tau + horizon];
        let stage2 = build_stage2(
            &scenarios,
            &self.spec.market,
            prices,
            &trailing,
            plan_pos,
            plan_neg,
        )
        .map_err(|source| SimError::Optimizer { settlement: tau, source })?;
        let sol = stage2
            .solve_stage2()
            .map_err(|source| SimError::Optimizer { settlement: tau, source })?;
        let mut g = 0.0;
        let mut v = 0.0;
        for (o, p) in sol.scenarios.iter().zip(&scenarios.probs) {
            g += p * o.p_g2v_kw[0];
            v += p * o.p_v2g_kw[0];
        }
        Ok((g, v))
    }

    /// Advances one settlement.
    pub fn step(&mut self) -> Result<(), SimError> {
        let tau = self.clock;
        assert!(tau < self.fleet.grid.n, "stepping past the grid");
        let market = self.spec.market.clone();
        let dt = market.dt_hours;
        let env = &self.fleet.envelope;
        let exog = &self.fleet.exog;
        let alg = self.spec.algorithm;

        // Day-ahead auction.
        if self.sod(tau) == self.spec.auction_sod {
            match alg {
                Algorithm::Smpc | Algorithm::PerfectForesight | Algorithm::Deterministic => {
                    self.auction()?;
                }
                Algorithm::ForecastOnly => {
                    // evaluate the auction-horizon forecast without solving
                    let horizon = self.spec.stage1_horizon.min(env.grid.n - tau);
                    if horizon > 1 {
                        self.scenarios_for(horizon, Some(1))?;
                    }
                }
                Algorithm::Uncontrolled => {}
            }
        }

        // Dispatch.
        let (mut g, mut v) = (0.0, 0.0);
        let mut clamped = false;
        match alg {
            Algorithm::Uncontrolled => {
                g = self.fleet.uncontrolled_kw[tau];
                self.uncontrolled_e_cum += market.eta * g * dt;
            }
            Algorithm::ForecastOnly => {
                let horizon = self.spec.stage2_horizon.min(env.grid.n - tau);
                if horizon > 1 {
                    self.scenarios_for(horizon, Some(2))?;
                }
            }
            _ => {
                let (lg, lv) = self.dispatch()?;
                g = lg;
                v = lv;
                // realization: clamp the executed flows to the realized
                // envelope and log any correction
                let cap = env.p_bound[tau];
                let used = g + v / market.eta;
                if used > cap + 1e-9 {
                    let scale = if used > 0.0 { cap / used } else { 0.0 };
                    g *= scale;
                    v *= scale;
                    clamped = true;
                }
                let delta = (market.eta * g - v / market.eta) * dt;
                let lo = env.e_lower[tau] - self.e_ev_cum;
                let hi = env.e_upper[tau] - self.e_ev_cum;
                // energy bounds first, then the power limits (which win
                // if the envelope asks for more than the chargers can do)
                let target = delta
                    .clamp(lo, hi)
                    .max(-cap * dt)
                    .min(market.eta * cap * dt);
                if (target - delta).abs() > 1e-9 {
                    clamped = true;
                    if target >= 0.0 {
                        g = target / (market.eta * dt);
                        v = 0.0;
                    } else {
                        g = 0.0;
                        v = -target * market.eta / dt;
                    }
                }
                self.e_ev_cum += (market.eta * g - v / market.eta) * dt;
            }
        }
        if clamped {
            self.clamp_events += 1;
        }
        let net = g - v;

        // Capability check against the realized envelope, and penalties.
        let pos = self.plan_pos[tau];
        let neg = self.plan_neg[tau];
        let in_delivery = self.plan_committed[tau];
        let mut penalty = 0.0;
        let mut capable_pos = true;
        let mut capable_neg = true;
        if in_delivery && alg.dispatches() {
            let z = market.baseline_settlements as f64;
            let base: f64 = self.trailing.iter().sum::<f64>() / z;
            let dtr = market.reserve_activation_hours;
            let eta = market.eta;
            let mut pen_pos = 0.0f64;
            let mut pen_neg = 0.0f64;
            if pos > 0.0 {
                let pr_v = (pos - base) / eta;
                let need_energy =
                    (env.e_lower[tau] - self.e_ev_cum + pr_v * dtr) * eta / dtr;
                let need_power = (pr_v - env.p_bound[tau]) * eta;
                pen_pos = need_energy.max(need_power).max(0.0);
            }
            if neg > 0.0 {
                let nr_v = (neg + base) * eta;
                let need_energy =
                    (self.e_ev_cum + nr_v * eta * dtr - env.e_upper[tau]) / (eta * dtr);
                let need_power = nr_v / eta - env.p_bound[tau];
                pen_neg = need_energy.max(need_power).max(0.0);
            }
            capable_pos = pen_pos <= 1e-6;
            capable_neg = pen_neg <= 1e-6;
            let charged = if market.shared_penalty_variable {
                pen_pos.max(pen_neg)
            } else {
                pen_pos + pen_neg
            };
            penalty = charged / 1000.0 * market.penalty_gbp_per_mw;
        }

        // Costs.
        let price = exog.wholesale_gbp_per_kwh[tau];
        let wholesale = match alg {
            Algorithm::Uncontrolled => self.fleet.uncontrolled_kw[tau] * dt * price,
            Algorithm::ForecastOnly => 0.0,
            _ => (net * dt + env.tail_load[tau] * dt) * price,
        };
        let revenue = if in_delivery && alg.dispatches() {
            (pos * exog.reserve_pos_gbp_per_mw[tau] + neg * exog.reserve_neg_gbp_per_mw[tau])
                / 1000.0
        } else {
            0.0
        };

        self.records.push(SettlementRecord {
            settlement: tau,
            e_upper: env.e_upper[tau],
            e_lower: env.e_lower[tau],
            p_bound: env.p_bound[tau],
            tail_load_kw: env.tail_load[tau],
            net_kw: net,
            e_ev: if alg == Algorithm::Uncontrolled {
                self.uncontrolled_e_cum
            } else {
                self.e_ev_cum
            },
            reserve_pos_kw: pos,
            reserve_neg_kw: neg,
            in_delivery,
            capable_pos,
            capable_neg,
            penalty_gbp: penalty,
            wholesale_gbp: wholesale,
            reserve_revenue_gbp: revenue,
            clamped,
        });

        self.trailing.pop_front();
        self.trailing.push_back(net);
        self.clock += 1;
        Ok(())
    }

    pub fn finish(self) -> SimulationLog {
        let records = self.records;
        let charge_cost: f64 = records.iter().map(|r| r.wholesale_gbp).sum();
        let penalty: f64 = records.iter().map(|r| r.penalty_gbp).sum();
        let revenue: f64 = records.iter().map(|r| r.reserve_revenue_gbp).sum();
        let env = &self.fleet.envelope;
        let dt = self.spec.market.dt_hours;
        let eta = self.spec.market.eta;
        let energy = match self.spec.algorithm {
            Algorithm::Uncontrolled => self.uncontrolled_e_cum,
            Algorithm::ForecastOnly => 0.0,
            _ => {
                let start = if self.eval_start > 0 {
                    env.e_upper[self.eval_start - 1]
                } else {
                    0.0
                };
                let flexible = self.e_ev_cum - start;
                let tails: f64 = records
                    .iter()
                    .map(|r| r.tail_load_kw * dt * eta)
                    .sum();
                flexible + tails
            }
        };
        SimulationLog {
            label: self.spec.label.clone(),
            algorithm: self.spec.algorithm.label().to_string(),
            omega: self.spec.market.risk_weight,
            n_ev: self.fleet.n_ev,
            seed: self.spec.seed,
            records,
            daily_nrmse: self.nrmse.finish(),
            charge_cost_gbp: charge_cost,
            penalty_gbp: penalty,
            reserve_revenue_gbp: revenue,
            energy_delivered_kwh: energy,
            clamp_events: self.clamp_events,
            solver_nodes: self.solver_nodes,
        }
    }
}

/// Runs a prepared fleet through the whole evaluation window.
pub fn run_simulation(fleet: &PreparedFleet, spec: &RunSpec) -> Result<SimulationLog, SimError> {
    let mut sim = Simulator::new(fleet, spec)?;
    while !sim.done() {
        sim.step()?;
    }
    let log = sim.finish();
    debug_assert!(log.totals_consistent());
    Ok(log)
}

/// Prepares and runs one spec end to end.
pub fn run_spec(spec: &RunSpec) -> Result<SimulationLog, SimError> {
    let fleet = prepare_fleet(spec)?;
    run_simulation(&fleet, spec)
}

/// Runs many specs on a bounded worker pool; results keep spec order.
/// `workers = 1` forces fully sequential execution.
pub fn run_sweep(specs: &[RunSpec], workers: usize) -> Vec<Result<SimulationLog, SimError>> {
    let workers = workers.max(1);
    if workers == 1 || specs.len() <= 1 {
        return specs.iter().map(run_spec).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<Result<SimulationLog, SimError>>>> =
        specs.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.min(specs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= specs.len() {
                    break;
                }
                let out = run_spec(&specs[i]);
                *results[i].lock().unwrap() = Some(out);
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("worker filled every slot"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fleet_data::{assemble_exogenous, synthetic_weather};

    fn tiny_spec(alg: Algorithm, n_ev: usize, days: usize, train: usize) -> RunSpec {
        let mut spec = RunSpec::synthetic_default("test", n_ev, 42);
        spec.algorithm = alg;
        spec.total_days = days;
        spec.training_days = train;
        spec
    }

    #[test]
    fn zero_prices_mean_zero_cost() {
        let mut spec = tiny_spec(Algorithm::Smpc, 8, 8, 5);
        let grid = spec.grid();
        let days = synthetic_weather(spec.seed, spec.start_date, spec.total_days);
        let zeros = vec![0.0; grid.n];
        let exog =
            assemble_exogenous(grid, zeros.clone(), zeros.clone(), zeros.clone(), days.clone())
                .unwrap();
        let sessions = generate_synthetic_fleet(spec.seed, spec.n_ev, &days, &spec.synthetic);
        spec.market.risk_weight = 0.5;
        let fleet = prepare_from_sessions(sessions, exog, &spec).unwrap();
        let log = run_simulation(&fleet, &spec).unwrap();
        assert!(log.totals_consistent());
        assert!(
            log.effective_cost_gbp_per_kwh().abs() < 1e-9,
            "cost {}",
            log.effective_cost_gbp_per_kwh()
        );
    }

    #[test]
    fn perfect_foresight_never_pays_penalties() {
        let spec = tiny_spec(Algorithm::PerfectForesight, 12, 8, 5);
        let log = run_spec(&spec).unwrap();
        assert!(log.totals_consistent());
        assert!(
            log.penalty_gbp.abs() < 1e-9,
            "perfect foresight paid {}",
            log.penalty_gbp
        );
        assert!(log.records.iter().all(|r| r.capable_pos && r.capable_neg));
        // it actually commits reserve on this tariff
        assert!(log.reserve_revenue_gbp > 0.0);
    }

    #[test]
    fn trajectory_stays_inside_realized_envelope() {
        let spec = tiny_spec(Algorithm::Smpc, 10, 8, 5);
        let fleet = prepare_fleet(&spec).unwrap();
        let log = run_simulation(&fleet, &spec).unwrap();
        for r in &log.records {
            assert!(
                r.e_ev <= r.e_upper + 1e-6 && r.e_ev >= r.e_lower - 1e-6,
                "settlement {}: {} outside [{}, {}]",
                r.settlement,
                r.e_ev,
                r.e_lower,
                r.e_upper
            );
            // net dispatch within the realized power bound
            let used = r.net_kw.max(0.0) + (-r.net_kw).max(0.0) / spec.market.eta;
            assert!(used <= r.p_bound + 1e-6);
        }
    }

    #[test]
    fn plans_persist_after_auction() {
        let spec = tiny_spec(Algorithm::PerfectForesight, 10, 8, 5);
        let fleet = prepare_fleet(&spec).unwrap();
        let mut sim = Simulator::new(&fleet, &spec).unwrap();
        let mut snapshots: Vec<(usize, Vec<f64>)> = Vec::new();
        while !sim.done() {
            sim.step().unwrap();
            if sim.fleet.grid.settlement_of_day(sim.clock().saturating_sub(1))
                == spec.auction_sod
            {
                snapshots.push((sim.clock(), sim.plan_pos.clone()));
            }
        }
        // every earlier snapshot must agree with the final plan on all
        // settlements that were already committed at snapshot time
        let final_plan = sim.plan_pos.clone();
        for (clock, snap) in snapshots {
            for t in 0..clock + 17 {
                assert_eq!(snap[t], final_plan[t], "plan rewritten at {t}");
            }
        }
    }

    #[test]
    fn forced_overcommitment_pays_exact_penalty() {
        let spec = tiny_spec(Algorithm::PerfectForesight, 6, 6, 4);
        let fleet = prepare_fleet(&spec).unwrap();
        let mut sim = Simulator::new(&fleet, &spec).unwrap();
        // force an absurd positive commitment on one settlement well
        // beyond anything the fleet can deliver
        let tau = sim.clock() + 3;
        let committed = 10_000.0;
        sim.plan_pos[tau] = committed;
        sim.plan_committed[tau] = true;
        while sim.clock() <= tau {
            sim.step().unwrap();
        }
        let rec = sim
            .records
            .iter()
            .find(|r| r.settlement == tau)
            .unwrap()
            .clone();
        assert!(!rec.capable_pos);
        // reconstruct the expected shortfall from the realized state
        let eta = spec.market.eta;
        let dtr = spec.market.reserve_activation_hours;
        let e_prev: f64 = sim
            .records
            .iter()
            .find(|r| r.settlement == tau)
            .map(|r| r.e_ev)
            .unwrap();
        let base = {
            // trailing two nets before tau
            let a = sim.records.iter().find(|r| r.settlement == tau - 1).unwrap();
            let b = sim.records.iter().find(|r| r.settlement == tau - 2).unwrap();
            (a.net_kw + b.net_kw) / 2.0
        };
        let pr_v = (committed - base) / eta;
        let need_energy = (rec.e_lower - e_prev + pr_v * dtr) * eta / dtr;
        let need_power = (pr_v - rec.p_bound) * eta;
        let pen = need_energy.max(need_power).max(0.0);
        let expected = pen / 1000.0 * spec.market.penalty_gbp_per_mw;
        assert!(
            (rec.penalty_gbp - expected).abs() < 1e-6,
            "{} vs {}",
            rec.penalty_gbp,
            expected
        );
    }

    #[test]
    fn identical_specs_give_identical_logs() {
        let spec = tiny_spec(Algorithm::Smpc, 8, 7, 5);
        let a = run_spec(&spec).unwrap();
        let b = run_spec(&spec).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        // and through the parallel sweep path
        let c = run_sweep(&[spec.clone(), spec.clone()], 2);
        let c0 = c[0].as_ref().unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(c0).unwrap()
        );
    }

    #[test]
    fn uncontrolled_cost_is_price_times_grid_energy() {
        let spec = tiny_spec(Algorithm::Uncontrolled, 6, 6, 4);
        let fleet = prepare_fleet(&spec).unwrap();
        let log = run_simulation(&fleet, &spec).unwrap();
        let eval_start = spec.training_days * fleet.grid.settlements_per_day();
        let expect: f64 = (eval_start..fleet.grid.n)
            .map(|t| {
                fleet.uncontrolled_kw[t] * 0.5 * fleet.exog.wholesale_gbp_per_kwh[t]
            })
            .sum();
        assert!((log.charge_cost_gbp - expect).abs() < 1e-9);
        assert_eq!(log.penalty_gbp, 0.0);
        assert_eq!(log.reserve_revenue_gbp, 0.0);
        // delivered energy is eta times grid energy
        let grid_kwh: f64 = (eval_start..fleet.grid.n)
            .map(|t| fleet.uncontrolled_kw[t] * 0.5)
            .sum();
        assert!((log.energy_delivered_kwh - 0.9 * grid_kwh).abs() < 1e-9);
    }

    #[test]
    fn forecast_only_records_nrmse_without_costs() {
        let spec = tiny_spec(Algorithm::ForecastOnly, 10, 8, 6);
        let log = run_spec(&spec).unwrap();
        assert_eq!(log.charge_cost_gbp, 0.0);
        assert!(log.daily_nrmse.iter().any(|d| d.stage == 1));
        assert!(log.daily_nrmse.iter().any(|d| d.stage == 2));
        let s1 = log.mean_nrmse(1, |d| d.e_upper);
        assert!(s1.is_finite() && s1 > 0.0, "stage-1 nrmse {s1}");
    }

    #[test]
    fn arbitrage_only_before_first_auction() {
        // no commitments exist before the first auction fires, so no
        // settlement before it can be in a delivery window
        let spec = tiny_spec(Algorithm::Smpc, 8, 7, 5);
        let fleet = prepare_fleet(&spec).unwrap();
        let log = run_simulation(&fleet, &spec).unwrap();
        let per_day = fleet.grid.settlements_per_day();
        let first_auction = spec.training_days * per_day + spec.auction_sod;
        let first_delivery = first_auction + (spec.delivery_start_sod - spec.auction_sod);
        for r in &log.records {
            if r.settlement < first_delivery {
                assert!(!r.in_delivery, "settlement {} in delivery", r.settlement);
                assert_eq!(r.reserve_pos_kw, 0.0);
            }
        }
        assert!(log.records.iter().any(|r| r.in_delivery));
    }
}
