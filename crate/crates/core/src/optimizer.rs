//! Two-stage stochastic reserve scheduling.
//!
//! Stage 1 (day-ahead auction) chooses contracted positive/negative
//! reserve per service window together with activation binaries, while
//! hedging dispatch across boundary scenarios; risk preference enters
//! through a CVaR term in the objective. Stage 2 (every settlement)
//! re-optimises dispatch with the commitments fixed, which drops the
//! binaries and leaves a plain LP.
//!
//! Powers are kW throughout; reserve and penalty prices are quoted per
//! MW and converted at cost assembly. Energies follow the scenario
//! coordinates: relative to the realized upper boundary at the anchor
//! settlement, with the trajectory entering at `anchor_kwh`.
//!
//! Deliverable reserve is contracted reserve net of the trailing-mean
//! baseline. Shortfall variables relax the four reserve-capability
//! constraints and are charged at the penalty price, so the program is
//! feasible for any commitment level; activation binaries gate the
//! constraints through big-M terms sized from the instance itself.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use evflex_lp::{
    solve_lp, solve_milp, LpProblem, LpSolution, MilpOptions, MilpSolution, RowSense, Sense,
    SolveStatus, VarId,
};

use crate::forecast::ScenarioSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvarDenominator {
    /// Rockafellar-Uryasev tail weight `1/alpha`.
    Standard,
    /// Literal printed coefficient `1/(1+alpha)`.
    Paper,
}

/// Market and risk parameters shared by both stages.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MarketParams {
    pub dt_hours: f64,
    /// Longest reserve activation a settlement must be able to sustain.
    pub reserve_activation_hours: f64,
    /// Settlements in the baseline mean.
    pub baseline_settlements: usize,
    /// Settlements per service window.
    pub window_settlements: usize,
    /// Non-delivery penalty, GBP/MW per settlement of shortfall.
    pub penalty_gbp_per_mw: f64,
    pub eta: f64,
    /// CVaR weight in [0, 1].
    pub risk_weight: f64,
    /// CVaR tail probability.
    pub cvar_alpha: f64,
    /// Reproduce the single shared shortfall variable instead of separate
    /// positive/negative ones.
    pub shared_penalty_variable: bool,
    pub cvar_denominator: CvarDenominator,
    /// M1 = factor x instance power scale.
    pub big_m_power_factor: f64,
    /// M2 = factor x instance power scale.
    pub big_m_relax_factor: f64,
}

impl Default for MarketParams {
    fn default() -> Self {
        MarketParams {
            dt_hours: 0.5,
            reserve_activation_hours: 0.45,
            baseline_settlements: 2,
            window_settlements: 4,
            penalty_gbp_per_mw: 52.0,
            eta: 0.9,
            risk_weight: 0.5,
            cvar_alpha: 0.1,
            shared_penalty_variable: false,
            cvar_denominator: CvarDenominator::Standard,
            big_m_power_factor: 2.0,
            big_m_relax_factor: 4.0,
        }
    }
}

/// Prices aligned to a planning horizon.
#[derive(Clone, Copy, Debug)]
pub struct PriceSlice<'a> {
    /// GBP/kWh per settlement.
    pub wholesale: &'a [f64],
    /// GBP/MW per settlement.
    pub reserve_pos: &'a [f64],
    pub reserve_neg: &'a [f64],
    /// Mean wholesale price for the end-of-plan credit, GBP/kWh.
    pub mean_price: f64,
}

/// Where the delivery windows sit inside a stage-1 horizon.
#[derive(Clone, Copy, Debug)]
pub struct DeliveryLayout {
    /// Horizon index of the first delivery settlement.
    pub first: usize,
    pub n_windows: usize,
}

/// Committed reserve for one delivery day.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReservePlan {
    pub window_settlements: usize,
    pub pos_kw: Vec<f64>,
    pub neg_kw: Vec<f64>,
    pub b_pos: Vec<bool>,
    pub b_neg: Vec<bool>,
}

impl ReservePlan {
    pub fn zero(n_windows: usize, window_settlements: usize) -> Self {
        ReservePlan {
            window_settlements,
            pos_kw: vec![0.0; n_windows],
            neg_kw: vec![0.0; n_windows],
            b_pos: vec![false; n_windows],
            b_neg: vec![false; n_windows],
        }
    }

    pub fn n_windows(&self) -> usize {
        self.pos_kw.len()
    }

    /// Window values replicated across their settlements.
    pub fn per_settlement(&self) -> (Vec<f64>, Vec<f64>) {
        let mut pos = Vec::with_capacity(self.n_windows() * self.window_settlements);
        let mut neg = Vec::with_capacity(self.n_windows() * self.window_settlements);
        for w in 0..self.n_windows() {
            for _ in 0..self.window_settlements {
                pos.push(self.pos_kw[w]);
                neg.push(self.neg_kw[w]);
            }
        }
        (pos, neg)
    }
}

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("scenario horizon {got} shorter than required {need}")]
    HorizonTooShort { got: usize, need: usize },
    #[error("non-finite envelope value in scenario {scenario} at settlement {settlement}")]
    BadEnvelope { scenario: usize, settlement: usize },
    #[error("scenario probabilities sum to {0}, expected 1")]
    BadProbabilities(f64),
    #[error("price or plan series does not cover the horizon")]
    BadPrices,
    #[error(
        "solver returned {status}; the model relaxes all reserve constraints through \
         shortfall variables and admits the full-charge trajectory, so this indicates \
         corrupted inputs or a solver limit"
    )]
    Solve { status: SolveStatus },
    #[error("objective recomputation differs from solver value: {recomputed} vs {solver}")]
    ObjectiveMismatch { recomputed: f64, solver: f64 },
}

struct PenVars {
    pos: Vec<Vec<Option<VarId>>>,
    neg: Vec<Vec<Option<VarId>>>,
}

/// Assembled stage problem plus the variable maps needed to read a
/// solution back out.
pub struct StageProblem {
    pub problem: LpProblem,
    n_scenarios: usize,
    horizon: usize,
    probs: Vec<f64>,
    pg2v: Vec<Vec<VarId>>,
    pv2g: Vec<Vec<VarId>>,
    e_ev: Vec<Vec<VarId>>,
    pen: PenVars,
    reserve_pos: Vec<VarId>,
    reserve_neg: Vec<VarId>,
    b_pos: Vec<VarId>,
    b_neg: Vec<VarId>,
    w_aux: Vec<VarId>,
    var_var: Option<VarId>,
    cvar_var: Option<VarId>,
    /// Constant part of the minimised objective (scalarisation value =
    /// solver objective + this).
    pub objective_constant: f64,
    omega: f64,
    window_settlements: usize,
    delivery: Option<DeliveryLayout>,
    wholesale: Vec<f64>,
    reserve_price_pos: Vec<f64>,
    reserve_price_neg: Vec<f64>,
    mean_price: f64,
    penalty_gbp_per_mw: f64,
    dt: f64,
    e_lower_last: Vec<f64>,
    big_m1: f64,
    big_m2: f64,
}

fn validate_scenarios(set: &ScenarioSet, need: usize) -> Result<(), OptimizerError> {
    let h = set.horizon();
    if h < need {
        return Err(OptimizerError::HorizonTooShort { got: h, need });
    }
    let psum: f64 = set.probs.iter().sum();
    if (psum - 1.0).abs() > 1e-9 {
        return Err(OptimizerError::BadProbabilities(psum));
    }
    for (s, path) in set.scenarios.iter().enumerate() {
        for t in 0..h {
            if !path.e_upper[t].is_finite()
                || !path.e_lower[t].is_finite()
                || !path.p_bound[t].is_finite()
            {
                return Err(OptimizerError::BadEnvelope {
                    scenario: s,
                    settlement: t,
                });
            }
        }
    }
    Ok(())
}

/// Instance power scale for big-M sizing: the largest scenario power
/// bound or trailing baseline magnitude, floored at 1 kW.
fn power_scale(set: &ScenarioSet, trailing: &[f64]) -> f64 {
    let pb = set
        .scenarios
        .iter()
        .flat_map(|s| s.p_bound.iter())
        .fold(0.0f64, |m, &v| m.max(v));
    let tr = trailing.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    pb.max(tr).max(1.0)
}

struct Assembler<'a> {
    market: &'a MarketParams,
    set: &'a ScenarioSet,
    prices: PriceSlice<'a>,
    trailing: &'a [f64],
    horizon: usize,
    problem: LpProblem,
    pg2v: Vec<Vec<VarId>>,
    pv2g: Vec<Vec<VarId>>,
    e_ev: Vec<Vec<VarId>>,
}

impl<'a> Assembler<'a> {
    fn new(
        market: &'a MarketParams,
        set: &'a ScenarioSet,
        prices: PriceSlice<'a>,
        trailing: &'a [f64],
        horizon: usize,
    ) -> Result<Self, OptimizerError> {
        if prices.wholesale.len() < horizon
            || prices.reserve_pos.len() < horizon
            || prices.reserve_neg.len() < horizon
        {
            return Err(OptimizerError::BadPrices);
        }
        let mut problem = LpProblem::new(Sense::Minimize);
        let n_s = set.scenarios.len();
        let mut pg2v = Vec::with_capacity(n_s);
        let mut pv2g = Vec::with_capacity(n_s);
        let mut e_ev = Vec::with_capacity(n_s);
        for (s, path) in set.scenarios.iter().enumerate() {
            let mut g = Vec::with_capacity(horizon);
            let mut v = Vec::with_capacity(horizon);
            let mut e = Vec::with_capacity(horizon);
            for t in 0..horizon {
                g.push(problem.add_var(format!("g2v_s{s}_t{t}"), 0.0, 0.0, f64::INFINITY));
                v.push(problem.add_var(format!("v2g_s{s}_t{t}"), 0.0, 0.0, f64::INFINITY));
                e.push(problem.add_var(
                    format!("e_s{s}_t{t}"),
                    0.0,
                    path.e_lower[t],
                    path.e_upper[t],
                ));
            }
            pg2v.push(g);
            pv2g.push(v);
            e_ev.push(e);
        }
        Ok(Assembler {
            market,
            set,
            prices,
            trailing,
            horizon,
            problem,
            pg2v,
            pv2g,
            e_ev,
        })
    }

    /// Trajectory recurrence and the shared power-boundary rows.
    fn dispatch_rows(&mut self, anchor: f64) {
        let eta = self.market.eta;
        let dt = self.market.dt_hours;
        for s in 0..self.set.scenarios.len() {
            let path = &self.set.scenarios[s];
            for t in 0..self.horizon {
                let mut terms = vec![
                    (self.e_ev[s][t], 1.0),
                    (self.pg2v[s][t], -eta * dt),
                    (self.pv2g[s][t], dt / eta),
                ];
                let rhs = if t == 0 {
                    anchor
                } else {
                    terms.push((self.e_ev[s][t - 1], -1.0));
                    0.0
                };
                self.problem
                    .add_row(format!("traj_s{s}_t{t}"), RowSense::Eq, rhs, &terms);
                self.problem.add_row(
                    format!("power_s{s}_t{t}"),
                    RowSense::Le,
                    path.p_bound[t],
                    &[(self.pg2v[s][t], 1.0), (self.pv2g[s][t], 1.0 / eta)],
                );
            }
        }
    }

    /// Baseline mean of net grid power over the trailing settlements:
    /// variable terms plus a constant from pre-horizon dispatch.
    fn baseline(&self, s: usize, t: usize) -> (Vec<(VarId, f64)>, f64) {
        let z = self.market.baseline_settlements;
        let mut terms = Vec::with_capacity(2 * z);
        let mut constant = 0.0;
        for back in 1..=z {
            let j = t as i64 - back as i64;
            if j >= 0 {
                terms.push((self.pg2v[s][j as usize], 1.0 / z as f64));
                terms.push((self.pv2g[s][j as usize], -1.0 / z as f64));
            } else {
                let idx = self.trailing.len() as i64 + j;
                let net = if idx >= 0 { self.trailing[idx as usize] } else { 0.0 };
                constant += net / z as f64;
            }
        }
        (terms, constant)
    }

    /// Scenario loss terms shared by both stages: charging cost plus
    /// penalties minus the end-of-plan credit, optionally minus reserve
    /// revenue. Returns (variable terms, constant).
    fn loss_terms(
        &self,
        s: usize,
        pen: &PenVars,
        reserve: Option<(&[VarId], &[VarId], &DeliveryLayout)>,
    ) -> (Vec<(VarId, f64)>, f64) {
        let dt = self.market.dt_hours;
        let mut terms = Vec::new();
        for t in 0..self.horizon {
            let c = self.prices.wholesale[t] * dt;
            terms.push((self.pg2v[s][t], c));
            terms.push((self.pv2g[s][t], -c));
        }
        let pen_rate = self.market.penalty_gbp_per_mw / 1000.0;
        for t in 0..self.horizon {
            if let Some(v) = pen.pos[s][t] {
                terms.push((v, pen_rate));
            }
            if let Some(v) = pen.neg[s][t] {
                let same_var = pen.pos[s][t] == Some(v);
                if !same_var {
                    terms.push((v, pen_rate));
                }
            }
        }
        let last = self.horizon - 1;
        terms.push((self.e_ev[s][last], -self.prices.mean_price));
        let constant = self.prices.mean_price * self.set.scenarios[s].e_lower[last];
        if let Some((pos, neg, delivery)) = reserve {
            for w in 0..delivery.n_windows {
                for i in 0..self.market.window_settlements {
                    let t = delivery.first + w * self.market.window_settlements + i;
                    terms.push((pos[w], -self.prices.reserve_pos[t] / 1000.0));
                    terms.push((neg[w], -self.prices.reserve_neg[t] / 1000.0));
                }
            }
        }
        (terms, constant)
    }
}

/// Builds the day-ahead auction MILP over the given scenario set.
pub fn build_stage1(
    scenarios: &ScenarioSet,
    market: &MarketParams,
    prices: PriceSlice,
    trailing_net_kw: &[f64],
    delivery: DeliveryLayout,
) -> Result<StageProblem, OptimizerError> {
    let need = delivery.first + delivery.n_windows * market.window_settlements;
    validate_scenarios(scenarios, need.max(1))?;
    let horizon = scenarios.horizon();
    let mut asm = Assembler::new(market, scenarios, prices, trailing_net_kw, horizon)?;
    asm.dispatch_rows(scenarios.anchor_kwh);

    let scale = power_scale(scenarios, trailing_net_kw);
    let m1 = market.big_m_power_factor * scale;
    let m2 = market.big_m_relax_factor * scale;
    let n_s = scenarios.scenarios.len();
    let eta = market.eta;
    let dtr = market.reserve_activation_hours;

    // Window-level commitment variables and activation binaries.
    let mut reserve_pos = Vec::with_capacity(delivery.n_windows);
    let mut reserve_neg = Vec::with_capacity(delivery.n_windows);
    let mut b_pos = Vec::with_capacity(delivery.n_windows);
    let mut b_neg = Vec::with_capacity(delivery.n_windows);
    for w in 0..delivery.n_windows {
        reserve_pos.push(asm.problem.add_var(format!("rpos_w{w}"), 0.0, 0.0, f64::INFINITY));
        reserve_neg.push(asm.problem.add_var(format!("rneg_w{w}"), 0.0, 0.0, f64::INFINITY));
        b_pos.push(asm.problem.add_binary(format!("bpos_w{w}"), 0.0));
        b_neg.push(asm.problem.add_binary(format!("bneg_w{w}"), 0.0));
        asm.problem.add_row(
            format!("act_pos_w{w}"),
            RowSense::Le,
            0.0,
            &[(reserve_pos[w], 1.0), (b_pos[w], -m1)],
        );
        asm.problem.add_row(
            format!("act_neg_w{w}"),
            RowSense::Le,
            0.0,
            &[(reserve_neg[w], 1.0), (b_neg[w], -m1)],
        );
    }

    // Shortfall variables on delivery settlements.
    let mut pen = PenVars {
        pos: vec![vec![None; horizon]; n_s],
        neg: vec![vec![None; horizon]; n_s],
    };
    for s in 0..n_s {
        for w in 0..delivery.n_windows {
            for i in 0..market.window_settlements {
                let t = delivery.first + w * market.window_settlements + i;
                let p = asm
                    .problem
                    .add_var(format!("penp_s{s}_t{t}"), 0.0, 0.0, f64::INFINITY);
                pen.pos[s][t] = Some(p);
                pen.neg[s][t] = if market.shared_penalty_variable {
                    Some(p)
                } else {
                    Some(asm.problem.add_var(
                        format!("penn_s{s}_t{t}"),
                        0.0,
                        0.0,
                        f64::INFINITY,
                    ))
                };
            }
        }
    }

    // Reserve capability rows on every delivery settlement and scenario.
    for s in 0..n_s {
        let path = &scenarios.scenarios[s];
        for w in 0..delivery.n_windows {
            for i in 0..market.window_settlements {
                let t = delivery.first + w * market.window_settlements + i;
                let (base_terms, base_const) = asm.baseline(s, t);
                let pp = pen.pos[s][t].unwrap();
                let pn = pen.neg[s][t].unwrap();

                // Energy headroom for positive reserve (shortfall relaxes).
                let mut r15 = vec![
                    (asm.e_ev[s][t], 1.0),
                    (reserve_pos[w], -dtr / eta),
                    (pp, dtr / eta),
                    (b_pos[w], -m2),
                ];
                for &(v, c) in &base_terms {
                    r15.push((v, c * dtr / eta));
                }
                asm.problem.add_row(
                    format!("res_elo_s{s}_t{t}"),
                    RowSense::Ge,
                    path.e_lower[t] - m2 - base_const * dtr / eta,
                    &r15,
                );

                // Energy headroom for negative reserve.
                let mut r16 = vec![
                    (asm.e_ev[s][t], 1.0),
                    (reserve_neg[w], dtr * eta * eta),
                    (pn, -dtr * eta),
                    (b_neg[w], m2),
                ];
                for &(v, c) in &base_terms {
                    r16.push((v, c * dtr * eta * eta));
                }
                asm.problem.add_row(
                    format!("res_ehi_s{s}_t{t}"),
                    RowSense::Le,
                    path.e_upper[t] + m2 - base_const * dtr * eta * eta,
                    &r16,
                );

                // Power headroom for positive reserve.
                let mut r17 = vec![
                    (reserve_pos[w], 1.0 / eta),
                    (pp, -1.0 / eta),
                    (b_pos[w], m2),
                ];
                for &(v, c) in &base_terms {
                    r17.push((v, -c / eta));
                }
                asm.problem.add_row(
                    format!("res_phi_s{s}_t{t}"),
                    RowSense::Le,
                    path.p_bound[t] + m2 + base_const / eta,
                    &r17,
                );

                // Power headroom for negative reserve.
                let mut r18 = vec![(reserve_neg[w], 1.0), (pn, -1.0), (b_neg[w], m2)];
                for &(v, c) in &base_terms {
                    r18.push((v, c));
                }
                asm.problem.add_row(
                    format!("res_plo_s{s}_t{t}"),
                    RowSense::Le,
                    path.p_bound[t] + m2 - base_const,
                    &r18,
                );
            }
        }
    }

    // CVaR scalarisation.
    let var_var = asm
        .problem
        .add_var("value_at_risk", 0.0, f64::NEG_INFINITY, f64::INFINITY);
    let cvar_var = asm
        .problem
        .add_var("cvar", 0.0, f64::NEG_INFINITY, f64::INFINITY);
    let mut w_aux = Vec::with_capacity(n_s);
    for s in 0..n_s {
        w_aux.push(asm.problem.add_var(format!("w_s{s}"), 0.0, 0.0, f64::INFINITY));
    }
    let omega = market.risk_weight;
    let denom = match market.cvar_denominator {
        CvarDenominator::Standard => market.cvar_alpha,
        CvarDenominator::Paper => 1.0 + market.cvar_alpha,
    };

    let mut objective_constant = 0.0;
    for s in 0..n_s {
        let (loss_terms, loss_const) =
            asm.loss_terms(s, &pen, Some((&reserve_pos, &reserve_neg, &delivery)));
        // w_s >= loss_s - VaR
        let mut excess = loss_terms.clone();
        excess.push((var_var, -1.0));
        excess.push((w_aux[s], -1.0));
        asm.problem
            .add_row(format!("cvar_excess_s{s}"), RowSense::Le, -loss_const, &excess);
        // objective: (1 - omega) * p_s * loss_s
        let weight = (1.0 - omega) * scenarios.probs[s];
        for (v, c) in loss_terms {
            let cur = asm.problem.objective_coeff(v);
            asm.problem.set_objective_coeff(v, cur + weight * c);
        }
        objective_constant += weight * loss_const;
    }
    // CVaR >= VaR + (1/denom) * sum p_s w_s
    let mut cvar_row = vec![(var_var, 1.0), (cvar_var, -1.0)];
    for s in 0..n_s {
        cvar_row.push((w_aux[s], scenarios.probs[s] / denom));
    }
    asm.problem.add_row("cvar_bound", RowSense::Le, 0.0, &cvar_row);
    let cur = asm.problem.objective_coeff(cvar_var);
    asm.problem.set_objective_coeff(cvar_var, cur + omega);

    Ok(StageProblem {
        problem: asm.problem,
        n_scenarios: n_s,
        horizon,
        probs: scenarios.probs.clone(),
        pg2v: asm.pg2v,
        pv2g: asm.pv2g,
        e_ev: asm.e_ev,
        pen,
        reserve_pos,
        reserve_neg,
        b_pos,
        b_neg,
        w_aux,
        var_var: Some(var_var),
        cvar_var: Some(cvar_var),
        objective_constant,
        omega,
        window_settlements: market.window_settlements,
        delivery: Some(delivery),
        wholesale: prices.wholesale[..horizon].to_vec(),
        reserve_price_pos: prices.reserve_pos[..horizon].to_vec(),
        reserve_price_neg: prices.reserve_neg[..horizon].to_vec(),
        mean_price: prices.mean_price,
        penalty_gbp_per_mw: market.penalty_gbp_per_mw,
        dt: market.dt_hours,
        e_lower_last: scenarios
            .scenarios
            .iter()
            .map(|p| p.e_lower[horizon - 1])
            .collect(),
        big_m1: m1,
        big_m2: m2,
    })
}

/// Builds the recourse dispatch LP with commitments fixed. The reserve
/// capability rows are instantiated only on settlements with a positive
/// commitment on that side, with the activation binary pinned to one.
pub fn build_stage2(
    scenarios: &ScenarioSet,
    market: &MarketParams,
    prices: PriceSlice,
    trailing_net_kw: &[f64],
    plan_pos_kw: &[f64],
    plan_neg_kw: &[f64],
) -> Result<StageProblem, OptimizerError> {
    validate_scenarios(scenarios, 1)?;
    let horizon = scenarios.horizon();
    if plan_pos_kw.len() < horizon || plan_neg_kw.len() < horizon {
        return Err(OptimizerError::BadPrices);
    }
    let mut asm = Assembler::new(market, scenarios, prices, trailing_net_kw, horizon)?;
    asm.dispatch_rows(scenarios.anchor_kwh);

    let n_s = scenarios.scenarios.len();
    let eta = market.eta;
    let dtr = market.reserve_activation_hours;

    let mut pen = PenVars {
        pos: vec![vec![None; horizon]; n_s],
        neg: vec![vec![None; horizon]; n_s],
    };
    for s in 0..n_s {
        let path = &scenarios.scenarios[s];
        for t in 0..horizon {
            let pos_active = plan_pos_kw[t] > 0.0;
            let neg_active = plan_neg_kw[t] > 0.0;
            if !pos_active && !neg_active {
                continue;
            }
            let pp = pos_active.then(|| {
                asm.problem
                    .add_var(format!("penp_s{s}_t{t}"), 0.0, 0.0, f64::INFINITY)
            });
            let pn = if neg_active {
                if market.shared_penalty_variable && pos_active {
                    pp
                } else {
                    Some(asm.problem.add_var(
                        format!("penn_s{s}_t{t}"),
                        0.0,
                        0.0,
                        f64::INFINITY,
                    ))
                }
            } else {
                None
            };
            pen.pos[s][t] = pp;
            pen.neg[s][t] = pn;

            let (base_terms, base_const) = asm.baseline(s, t);
            if let Some(pp) = pp {
                let mut r15 = vec![(asm.e_ev[s][t], 1.0), (pp, dtr / eta)];
                for &(v, c) in &base_terms {
                    r15.push((v, c * dtr / eta));
                }
                asm.problem.add_row(
                    format!("res_elo_s{s}_t{t}"),
                    RowSense::Ge,
                    path.e_lower[t] + plan_pos_kw[t] * dtr / eta - base_const * dtr / eta,
                    &r15,
                );
                let mut r17 = vec![(pp, -1.0 / eta)];
                for &(v, c) in &base_terms {
                    r17.push((v, -c / eta));
                }
                asm.problem.add_row(
                    format!("res_phi_s{s}_t{t}"),
                    RowSense::Le,
                    path.p_bound[t] - plan_pos_kw[t] / eta + base_const / eta,
                    &r17,
                );
            }
            if let Some(pn) = pn {
                let mut r16 = vec![(asm.e_ev[s][t], 1.0), (pn, -dtr * eta)];
                for &(v, c) in &base_terms {
                    r16.push((v, c * dtr * eta * eta));
                }
                asm.problem.add_row(
                    format!("res_ehi_s{s}_t{t}"),
                    RowSense::Le,
                    path.e_upper[t]
                        - plan_neg_kw[t] * dtr * eta * eta
                        - base_const * dtr * eta * eta,
                    &r16,
                );
                let mut r18 = vec![(pn, -1.0)];
                for &(v, c) in &base_terms {
                    r18.push((v, c));
                }
                asm.problem.add_row(
                    format!("res_plo_s{s}_t{t}"),
                    RowSense::Le,
                    path.p_bound[t] - plan_neg_kw[t] - base_const,
                    &r18,
                );
            }
        }
    }

    // Expected-cost objective: sum_s p_s (C_cha + C_pen - A_s).
    let mut objective_constant = 0.0;
    for s in 0..n_s {
        let (loss_terms, loss_const) = asm.loss_terms(s, &pen, None);
        let weight = scenarios.probs[s];
        for (v, c) in loss_terms {
            let cur = asm.problem.objective_coeff(v);
            asm.problem.set_objective_coeff(v, cur + weight * c);
        }
        objective_constant += weight * loss_const;
    }

    Ok(StageProblem {
        problem: asm.problem,
        n_scenarios: n_s,
        horizon,
        probs: scenarios.probs.clone(),
        pg2v: asm.pg2v,
        pv2g: asm.pv2g,
        e_ev: asm.e_ev,
        pen,
        reserve_pos: Vec::new(),
        reserve_neg: Vec::new(),
        b_pos: Vec::new(),
        b_neg: Vec::new(),
        w_aux: Vec::new(),
        var_var: None,
        cvar_var: None,
        objective_constant,
        omega: 0.0,
        window_settlements: market.window_settlements,
        delivery: None,
        wholesale: prices.wholesale[..horizon].to_vec(),
        reserve_price_pos: prices.reserve_pos[..horizon].to_vec(),
        reserve_price_neg: prices.reserve_neg[..horizon].to_vec(),
        mean_price: prices.mean_price,
        penalty_gbp_per_mw: market.penalty_gbp_per_mw,
        dt: market.dt_hours,
        e_lower_last: scenarios
            .scenarios
            .iter()
            .map(|p| p.e_lower[horizon - 1])
            .collect(),
        big_m1: 0.0,
        big_m2: 0.0,
    })
}

/// Dispatch and costs of one scenario in a solved stage problem.
#[derive(Clone, Debug)]
pub struct ScenarioOutcome {
    pub p_g2v_kw: Vec<f64>,
    pub p_v2g_kw: Vec<f64>,
    pub e_ev_kwh: Vec<f64>,
    pub pen_pos_kw: Vec<f64>,
    pub pen_neg_kw: Vec<f64>,
    pub charge_cost_gbp: f64,
    pub penalty_cost_gbp: f64,
    pub credit_gbp: f64,
    /// loss_s = charge + penalty - credit - reserve revenue.
    pub loss_gbp: f64,
}

#[derive(Clone, Debug)]
pub struct StageSolution {
    pub plan: Option<ReservePlan>,
    pub scenarios: Vec<ScenarioOutcome>,
    pub reserve_revenue_gbp: f64,
    pub expected_loss_gbp: f64,
    pub value_at_risk_gbp: f64,
    pub cvar_gbp: f64,
    pub w_aux_gbp: Vec<f64>,
    /// Minimised scalarisation value (constant included).
    pub objective_gbp: f64,
    pub nodes: usize,
    pub big_m1: f64,
    pub big_m2: f64,
}

impl StageProblem {
    pub fn n_binaries(&self) -> usize {
        self.problem.n_binaries()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Solves stage 1 (branch-and-bound) and extracts the solution.
    pub fn solve_stage1(&self, options: &MilpOptions) -> Result<StageSolution, OptimizerError> {
        let milp = solve_milp(&self.problem, options);
        if milp.status != SolveStatus::Optimal {
            return Err(OptimizerError::Solve { status: milp.status });
        }
        self.extract(&milp.x, milp.objective, milp.nodes)
    }

    /// Solves stage 2 (pure LP) and extracts the solution.
    pub fn solve_stage2(&self) -> Result<StageSolution, OptimizerError> {
        let lp = solve_lp(&self.problem);
        if lp.status != SolveStatus::Optimal {
            return Err(OptimizerError::Solve { status: lp.status });
        }
        self.extract(&lp.x, lp.objective, 0)
    }

    pub fn solve_lp_relaxation(&self) -> LpSolution {
        solve_lp(&self.problem)
    }

    pub fn raw_milp(&self, options: &MilpOptions) -> MilpSolution {
        solve_milp(&self.problem, options)
    }

    /// Recovers named quantities from a primal point and audits the
    /// objective identity against the solver value.
    pub fn extract(
        &self,
        x: &[f64],
        solver_objective: f64,
        nodes: usize,
    ) -> Result<StageSolution, OptimizerError> {
        let val = |v: VarId| x[v.0];

        let plan = self.delivery.map(|_| ReservePlan {
            window_settlements: self.window_settlements,
            pos_kw: self.reserve_pos.iter().map(|&v| val(v)).collect(),
            neg_kw: self.reserve_neg.iter().map(|&v| val(v)).collect(),
            b_pos: self.b_pos.iter().map(|&v| val(v) > 0.5).collect(),
            b_neg: self.b_neg.iter().map(|&v| val(v) > 0.5).collect(),
        });

        // Reserve revenue (stage 1 only; stage 2 treats it as sunk).
        let mut reserve_revenue = 0.0;
        if let (Some(d), Some(plan)) = (self.delivery, plan.as_ref()) {
            for w in 0..d.n_windows {
                for i in 0..self.window_settlements {
                    let t = d.first + w * self.window_settlements + i;
                    reserve_revenue += plan.pos_kw[w] * self.reserve_price_pos[t] / 1000.0
                        + plan.neg_kw[w] * self.reserve_price_neg[t] / 1000.0;
                }
            }
        }

        let mut outcomes = Vec::with_capacity(self.n_scenarios);
        let mut expected_loss = 0.0;
        for s in 0..self.n_scenarios {
            let p_g2v: Vec<f64> = self.pg2v[s].iter().map(|&v| val(v)).collect();
            let p_v2g: Vec<f64> = self.pv2g[s].iter().map(|&v| val(v)).collect();
            let e_ev: Vec<f64> = self.e_ev[s].iter().map(|&v| val(v)).collect();
            let pen_pos: Vec<f64> = (0..self.horizon)
                .map(|t| self.pen.pos[s][t].map_or(0.0, &val))
                .collect();
            let pen_neg: Vec<f64> = (0..self.horizon)
                .map(|t| self.pen.neg[s][t].map_or(0.0, &val))
                .collect();

            let charge_cost: f64 = (0..self.horizon)
                .map(|t| self.wholesale[t] * (p_g2v[t] - p_v2g[t]) * self.dt)
                .sum();
            let pen_rate = self.penalty_gbp_per_mw / 1000.0;
            let penalty_cost: f64 = (0..self.horizon)
                .map(|t| {
                    let shared = self.pen.pos[s][t].is_some()
                        && self.pen.pos[s][t] == self.pen.neg[s][t];
                    if shared {
                        pen_rate * pen_pos[t]
                    } else {
                        pen_rate * (pen_pos[t] + pen_neg[t])
                    }
                })
                .sum();
            let credit = (e_ev[self.horizon - 1] - self.e_lower_last[s]) * self.mean_price;
            let loss = charge_cost + penalty_cost - credit - reserve_revenue;
            expected_loss += self.probs[s] * loss;
            outcomes.push(ScenarioOutcome {
                p_g2v_kw: p_g2v,
                p_v2g_kw: p_v2g,
                e_ev_kwh: e_ev,
                pen_pos_kw: pen_pos,
                pen_neg_kw: pen_neg,
                charge_cost_gbp: charge_cost,
                penalty_cost_gbp: penalty_cost,
                credit_gbp: credit,
                loss_gbp: loss,
            });
        }

        let value_at_risk = self.var_var.map_or(0.0, &val);
        let cvar = self.cvar_var.map_or(0.0, &val);
        let w_aux: Vec<f64> = self.w_aux.iter().map(|&v| val(v)).collect();

        // Identity audit: recompute the minimised value from components.
        let objective = solver_objective + self.objective_constant;
        let recomputed = if self.delivery.is_some() {
            (1.0 - self.omega) * expected_loss + self.omega * cvar
        } else {
            outcomes
                .iter()
                .zip(&self.probs)
                .map(|(o, p)| p * (o.charge_cost_gbp + o.penalty_cost_gbp - o.credit_gbp))
                .sum()
        };
        if (recomputed - objective).abs() > 1e-6 * objective.abs().max(1.0) {
            return Err(OptimizerError::ObjectiveMismatch {
                recomputed,
                solver: objective,
            });
        }

        Ok(StageSolution {
            plan,
            scenarios: outcomes,
            reserve_revenue_gbp: reserve_revenue,
            expected_loss_gbp: expected_loss,
            value_at_risk_gbp: value_at_risk,
            cvar_gbp: cvar,
            w_aux_gbp: w_aux,
            objective_gbp: objective,
            nodes,
            big_m1: self.big_m1,
            big_m2: self.big_m2,
        })
    }
}

/// Discrete (VaR, CVaR) of a loss distribution in the
/// Rockafellar-Uryasev sense: VaR is the (1-alpha)-quantile, CVaR adds
/// the tail expectation weighted by the chosen denominator.
pub fn evaluate_cvar(
    losses: &[f64],
    probs: &[f64],
    alpha: f64,
) -> Result<(f64, f64), OptimizerError> {
    evaluate_cvar_with(losses, probs, alpha, CvarDenominator::Standard)
}

pub fn evaluate_cvar_with(
    losses: &[f64],
    probs: &[f64],
    alpha: f64,
    denominator: CvarDenominator,
) -> Result<(f64, f64), OptimizerError> {
    assert!(alpha > 0.0 && alpha < 1.0, "alpha must be in (0, 1)");
    assert_eq!(losses.len(), probs.len());
    let psum: f64 = probs.iter().sum();
    if (psum - 1.0).abs() > 1e-9 {
        return Err(OptimizerError::BadProbabilities(psum));
    }
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]));
    let mut cum = 0.0;
    let mut var = losses[*order.last().expect("non-empty losses")];
    for &i in &order {
        cum += probs[i];
        if cum >= 1.0 - alpha - 1e-12 {
            var = losses[i];
            break;
        }
    }
    let denom = match denominator {
        CvarDenominator::Standard => alpha,
        CvarDenominator::Paper => 1.0 + alpha,
    };
    let tail: f64 = losses
        .iter()
        .zip(probs)
        .map(|(&l, &p)| p * (l - var).max(0.0))
        .sum();
    Ok((var, var + tail / denom))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecast::{ScenarioPath, ScenarioSet};

    fn flat_set(n_s: usize, horizon: usize, e_span: f64, pb: f64, anchor: f64) -> ScenarioSet {
        let probs = match n_s {
            1 => vec![1.0],
            2 => vec![0.6, 0.4],
            n => vec![1.0 / n as f64; n],
        };
        ScenarioSet {
            probs,
            scenarios: (0..n_s)
                .map(|_| ScenarioPath {
                    e_upper: vec![e_span; horizon],
                    e_lower: vec![-e_span; horizon],
                    p_bound: vec![pb; horizon],
                })
                .collect(),
            anchor_kwh: anchor,
        }
    }

    fn flat_prices<'a>(wholesale: &'a [f64], pos: &'a [f64], neg: &'a [f64]) -> PriceSlice<'a> {
        PriceSlice {
            wholesale,
            reserve_pos: pos,
            reserve_neg: neg,
            mean_price: wholesale.iter().sum::<f64>() / wholesale.len() as f64,
        }
    }

    fn market(omega: f64) -> MarketParams {
        MarketParams {
            risk_weight: omega,
            ..MarketParams::default()
        }
    }

    #[test]
    fn zero_reserve_prices_mean_no_commitment() {
        let set = flat_set(1, 8, 100.0, 10.0, 0.0);
        let wholesale = vec![0.05; 8];
        let zeros = vec![0.0; 8];
        let prices = flat_prices(&wholesale, &zeros, &zeros);
        let p = build_stage1(
            &set,
            &market(0.0),
            prices,
            &[0.0, 0.0],
            DeliveryLayout { first: 0, n_windows: 2 },
        )
        .unwrap();
        let sol = p.solve_stage1(&MilpOptions::default()).unwrap();
        let plan = sol.plan.unwrap();
        assert!(plan.pos_kw.iter().all(|&v| v.abs() < 1e-9));
        assert!(plan.neg_kw.iter().all(|&v| v.abs() < 1e-9));
        assert!(plan.b_pos.iter().all(|&b| !b));
        assert!(plan.b_neg.iter().all(|&b| !b));
        assert!(sol.reserve_revenue_gbp.abs() < 1e-12);
    }

    #[test]
    fn stage1_matches_binary_enumeration() {
        // 1 window, 1 scenario: enumerate the 4 binary assignments.
        let set = flat_set(1, 4, 1000.0, 10.0, 0.0);
        let wholesale = vec![0.06, 0.04, 0.08, 0.05];
        let pos = vec![2.0; 4];
        let neg = vec![0.6; 4];
        let prices = flat_prices(&wholesale, &pos, &neg);
        let m = market(0.0);
        let p = build_stage1(
            &set,
            &m,
            prices,
            &[0.0, 0.0],
            DeliveryLayout { first: 0, n_windows: 1 },
        )
        .unwrap();
        let sol = p.solve_stage1(&MilpOptions::default()).unwrap();

        let binaries: Vec<VarId> = (0..p.problem.n_vars())
            .map(VarId)
            .filter(|&v| p.problem.is_binary(v))
            .collect();
        assert_eq!(binaries.len(), 2);
        let base: Vec<(f64, f64)> = (0..p.problem.n_vars())
            .map(|j| p.problem.bounds(VarId(j)))
            .collect();
        let mut best = f64::INFINITY;
        for mask in 0..4u32 {
            let mut bounds = base.clone();
            for (bit, &v) in binaries.iter().enumerate() {
                let val = if mask & (1 << bit) != 0 { 1.0 } else { 0.0 };
                bounds[v.0] = (val, val);
            }
            let lp = evflex_lp::solve_lp_from(&p.problem, Some(&bounds), None);
            if lp.status == SolveStatus::Optimal {
                best = best.min(lp.objective);
            }
        }
        let milp_obj = sol.objective_gbp - p.objective_constant;
        assert!(
            (milp_obj - best).abs() <= 1e-6 * (1.0 + best.abs()),
            "milp {milp_obj} vs enumeration {best}"
        );
    }

    #[test]
    fn omega_zero_objective_is_pure_expectation() {
        let set = flat_set(2, 8, 50.0, 8.0, -5.0);
        let wholesale = vec![0.07, 0.03, 0.09, 0.02, 0.06, 0.04, 0.08, 0.05];
        let pos = vec![1.41; 8];
        let neg = vec![0.423; 8];
        let prices = flat_prices(&wholesale, &pos, &neg);
        let p = build_stage1(
            &set,
            &market(0.0),
            prices,
            &[1.0, -2.0],
            DeliveryLayout { first: 2, n_windows: 1 },
        )
        .unwrap();
        let sol = p.solve_stage1(&MilpOptions::default()).unwrap();
        assert!(
            (sol.objective_gbp - sol.expected_loss_gbp).abs() <= 1e-6,
            "{} vs {}",
            sol.objective_gbp,
            sol.expected_loss_gbp
        );
    }

    #[test]
    fn boundary_compliance_of_solution() {
        let set = flat_set(2, 8, 20.0, 6.0, -3.0);
        let wholesale = vec![0.08, 0.02, 0.09, 0.01, 0.07, 0.03, 0.06, 0.04];
        let pos = vec![1.41; 8];
        let neg = vec![0.423; 8];
        let prices = flat_prices(&wholesale, &pos, &neg);
        let p = build_stage1(
            &set,
            &market(0.5),
            prices,
            &[0.0, 0.0],
            DeliveryLayout { first: 0, n_windows: 2 },
        )
        .unwrap();
        let sol = p.solve_stage1(&MilpOptions::default()).unwrap();
        for (s, o) in sol.scenarios.iter().enumerate() {
            for t in 0..8 {
                assert!(o.e_ev_kwh[t] <= set.scenarios[s].e_upper[t] + 1e-6);
                assert!(o.e_ev_kwh[t] >= set.scenarios[s].e_lower[t] - 1e-6);
                let used = o.p_g2v_kw[t] + o.p_v2g_kw[t] / 0.9;
                assert!(used <= set.scenarios[s].p_bound[t] + 1e-6);
                assert!(o.pen_pos_kw[t] >= -1e-9 && o.pen_neg_kw[t] >= -1e-9);
            }
        }
    }

    #[test]
    fn stage2_zero_plan_is_pure_arbitrage() {
        let set = flat_set(2, 6, 30.0, 5.0, 0.0);
        let wholesale = vec![0.09, 0.01, 0.08, 0.02, 0.07, 0.03];
        let zeros = vec![0.0; 6];
        let prices = flat_prices(&wholesale, &zeros, &zeros);
        let plan = vec![0.0; 6];
        let p = build_stage2(&set, &market(0.0), prices, &[0.0, 0.0], &plan, &plan).unwrap();
        let sol = p.solve_stage2().unwrap();
        for o in &sol.scenarios {
            assert!(o.penalty_cost_gbp.abs() < 1e-12);
        }
        // arbitrage exploits the cheap hours: some charging happens
        assert!(sol.scenarios[0].p_g2v_kw.iter().sum::<f64>() > 0.0);
    }

    #[test]
    fn stage2_reproduces_stage1_recourse_cost() {
        // With risk weight 0 and the stage-1 plan fixed, re-solving the
        // dispatch as stage 2 over the same horizon recovers the same
        // expected recourse cost.
        let set = flat_set(2, 8, 40.0, 7.0, -2.0);
        let wholesale = vec![0.07, 0.03, 0.09, 0.02, 0.06, 0.04, 0.08, 0.05];
        let pos = vec![1.41; 8];
        let neg = vec![0.423; 8];
        let prices = flat_prices(&wholesale, &pos, &neg);
        let m = market(0.0);
        let delivery = DeliveryLayout { first: 0, n_windows: 2 };
        let p1 = build_stage1(&set, &m, prices, &[0.5, 0.5], delivery).unwrap();
        let s1 = p1.solve_stage1(&MilpOptions::default()).unwrap();
        let plan = s1.plan.clone().unwrap();
        let (pos_t, neg_t) = plan.per_settlement();
        let p2 = build_stage2(&set, &m, prices, &[0.5, 0.5], &pos_t, &neg_t).unwrap();
        let s2 = p2.solve_stage2().unwrap();
        let stage1_recourse: f64 = s1
            .scenarios
            .iter()
            .zip(&set.probs)
            .map(|(o, p)| p * (o.charge_cost_gbp + o.penalty_cost_gbp - o.credit_gbp))
            .sum();
        assert!(
            (s2.objective_gbp - stage1_recourse).abs() <= 1e-6 * (1.0 + stage1_recourse.abs()),
            "{} vs {}",
            s2.objective_gbp,
            stage1_recourse
        );
    }

    #[test]
    fn overcommitted_reserve_pays_exact_penalty() {
        // One settlement, one scenario, plan far above the power bound.
        let set = flat_set(1, 1, 1000.0, 5.0, 0.0);
        let wholesale = vec![0.0];
        let zeros = vec![0.0];
        let prices = flat_prices(&wholesale, &zeros, &zeros);
        let m = market(0.0);
        let plan_pos = vec![20.0];
        let plan_neg = vec![0.0];
        let p = build_stage2(&set, &m, prices, &[0.0, 0.0], &plan_pos, &plan_neg).unwrap();
        let sol = p.solve_stage2().unwrap();
        let o = &sol.scenarios[0];
        // power headroom: (20 - base - pen)/eta <= 5 with base = 0, so
        // pen >= 20 - 5*eta = 15.5 kW
        let expected_pen = 20.0 - 5.0 * m.eta;
        assert!(
            (o.pen_pos_kw[0] - expected_pen).abs() < 1e-6,
            "pen {} vs {}",
            o.pen_pos_kw[0],
            expected_pen
        );
        let expected_cost = expected_pen / 1000.0 * m.penalty_gbp_per_mw;
        assert!((o.penalty_cost_gbp - expected_cost).abs() < 1e-9);
    }

    #[test]
    fn empty_fleet_is_all_zero() {
        let set = flat_set(1, 4, 0.0, 0.0, 0.0);
        let wholesale = vec![0.05; 4];
        let zeros = vec![0.0; 4];
        let prices = flat_prices(&wholesale, &zeros, &zeros);
        let p = build_stage1(
            &set,
            &market(0.0),
            prices,
            &[0.0, 0.0],
            DeliveryLayout { first: 0, n_windows: 1 },
        )
        .unwrap();
        let sol = p.solve_stage1(&MilpOptions::default()).unwrap();
        assert!(sol.objective_gbp.abs() < 1e-9);
        for o in &sol.scenarios {
            assert!(o.charge_cost_gbp.abs() < 1e-12);
            assert!(o.penalty_cost_gbp.abs() < 1e-12);
        }
    }

    #[test]
    fn zero_penalty_price_saturates_commitment() {
        let set = flat_set(1, 4, 10.0, 3.0, 0.0);
        let wholesale = vec![0.05; 4];
        let pos = vec![2.0; 4];
        let neg = vec![0.6; 4];
        let prices = flat_prices(&wholesale, &pos, &neg);
        let mut m = market(0.0);
        m.penalty_gbp_per_mw = 0.0;
        let p = build_stage1(
            &set,
            &m,
            prices,
            &[0.0, 0.0],
            DeliveryLayout { first: 0, n_windows: 1 },
        )
        .unwrap();
        let sol = p.solve_stage1(&MilpOptions::default()).unwrap();
        let plan = sol.plan.unwrap();
        // free penalties: the commitment saturates its big-M cap
        assert!(
            (plan.pos_kw[0] - sol.big_m1).abs() < 1e-6,
            "pos {} vs M1 {}",
            plan.pos_kw[0],
            sol.big_m1
        );
    }

    #[test]
    fn big_m_doubling_leaves_objective_unchanged() {
        let set = flat_set(2, 8, 30.0, 6.0, -1.0);
        let wholesale = vec![0.07, 0.03, 0.09, 0.02, 0.06, 0.04, 0.08, 0.05];
        let pos = vec![1.41; 8];
        let neg = vec![0.423; 8];
        let prices = flat_prices(&wholesale, &pos, &neg);
        let m = market(0.25);
        let mut m_big = m.clone();
        m_big.big_m_power_factor *= 2.0;
        m_big.big_m_relax_factor *= 2.0;
        let delivery = DeliveryLayout { first: 2, n_windows: 1 };
        let a = build_stage1(&set, &m, prices, &[0.2, -0.3], delivery)
            .unwrap()
            .solve_stage1(&MilpOptions::default())
            .unwrap();
        let b = build_stage1(&set, &m_big, prices, &[0.2, -0.3], delivery)
            .unwrap()
            .solve_stage1(&MilpOptions::default())
            .unwrap();
        assert!(
            (a.objective_gbp - b.objective_gbp).abs() <= 1e-6 * (1.0 + a.objective_gbp.abs()),
            "{} vs {}",
            a.objective_gbp,
            b.objective_gbp
        );
    }

    #[test]
    fn cvar_hand_examples() {
        let (var, cvar) = evaluate_cvar(&[0.0, 10.0], &[0.9, 0.1], 0.1).unwrap();
        assert_eq!(var, 0.0);
        assert!((cvar - 10.0).abs() < 1e-12);

        let (var, cvar) = evaluate_cvar(&[3.5, 3.5, 3.5], &[0.2, 0.3, 0.5], 0.1).unwrap();
        assert_eq!(var, 3.5);
        assert_eq!(cvar, 3.5);

        let (var, cvar) = evaluate_cvar(&[0.0, 7.0], &[0.99, 0.01], 0.01).unwrap();
        assert_eq!(var, 0.0);
        assert!((cvar - 7.0).abs() < 1e-9);

        assert!(matches!(
            evaluate_cvar(&[1.0, 2.0], &[0.5, 0.4], 0.1),
            Err(OptimizerError::BadProbabilities(_))
        ));
    }

    #[test]
    fn cvar_matches_rockafellar_uryasev_minimisation() {
        // brute force: CVaR = min over v of v + E[(L - v)+]/alpha, with
        // the minimiser attained at a loss atom.
        let losses = [2.0, -1.0, 5.0, 0.5, 9.0];
        let probs = [0.2, 0.3, 0.25, 0.15, 0.1];
        let alpha = 0.3;
        let (_, cvar) = evaluate_cvar(&losses, &probs, alpha).unwrap();
        let mut best = f64::INFINITY;
        for &v in &losses {
            let tail: f64 = losses
                .iter()
                .zip(&probs)
                .map(|(&l, &p)| p * (l - v).max(0.0))
                .sum();
            best = best.min(v + tail / alpha);
        }
        assert!((cvar - best).abs() < 1e-12, "{cvar} vs {best}");
    }

    #[test]
    fn cvar_weight_trades_expectation_for_tail() {
        // Pareto property of the weighted scalarisation across omega.
        let mut set = flat_set(2, 8, 25.0, 6.0, -2.0);
        for t in 0..8 {
            set.scenarios[1].p_bound[t] = 1.0;
            set.scenarios[1].e_upper[t] = 5.0;
            set.scenarios[1].e_lower[t] = -5.0;
        }
        set.probs = vec![0.9, 0.1];
        let wholesale = vec![0.07, 0.03, 0.09, 0.02, 0.06, 0.04, 0.08, 0.05];
        let pos = vec![3.0; 8];
        let neg = vec![0.9; 8];
        let prices = flat_prices(&wholesale, &pos, &neg);
        let delivery = DeliveryLayout { first: 0, n_windows: 2 };
        let mut last_cvar = f64::INFINITY;
        let mut last_exp = f64::NEG_INFINITY;
        for &omega in &[0.0, 0.5, 1.0] {
            let sol = build_stage1(&set, &market(omega), prices, &[0.0, 0.0], delivery)
                .unwrap()
                .solve_stage1(&MilpOptions::default())
                .unwrap();
            let losses: Vec<f64> = sol.scenarios.iter().map(|o| o.loss_gbp).collect();
            let (_, cvar) = evaluate_cvar(&losses, &set.probs, 0.1).unwrap();
            assert!(cvar <= last_cvar + 1e-7, "cvar rose: {cvar} > {last_cvar}");
            if omega > 0.0 {
                assert!(
                    sol.expected_loss_gbp >= last_exp - 1e-7,
                    "expectation improved with more risk aversion"
                );
            }
            last_cvar = cvar;
            last_exp = sol.expected_loss_gbp;
        }
    }

    #[test]
    fn lp_text_dump_parses_back() {
        let set = flat_set(1, 4, 10.0, 3.0, 0.0);
        let wholesale = vec![0.05; 4];
        let pos = vec![1.0; 4];
        let neg = vec![0.3; 4];
        let prices = flat_prices(&wholesale, &pos, &neg);
        let p = build_stage1(
            &set,
            &market(0.5),
            prices,
            &[0.0, 0.0],
            DeliveryLayout { first: 0, n_windows: 1 },
        )
        .unwrap();
        let text = p.problem.to_lp_text();
        let parsed = evflex_lp::parse_lp_text(&text).unwrap();
        let a = solve_milp(&p.problem, &MilpOptions::default());
        let b = solve_milp(&parsed, &MilpOptions::default());
        assert!((a.objective - b.objective).abs() < 1e-9);
    }
}
