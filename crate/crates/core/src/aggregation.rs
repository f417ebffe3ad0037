//! Per-vehicle flexibility boundaries and their fleet-wide aggregation.
//!
//! Energies are in delivered-energy coordinates: each vehicle's series is
//! zero at its arrival, so the aggregate is a cumulative net-charge curve
//! whose upper and lower boundaries converge once every open window has
//! closed. The final state-of-charge tail (slow-charging last fraction of
//! the battery) is carved out of the flexible window and booked as
//! inflexible `tail_load` instead, charged at half rated power right
//! before departure.

use serde::{Deserialize, Serialize};

use crate::fleet_data::{ChargeSession, EvProfile};
use crate::time::SettlementGrid;

/// Fraction of battery capacity charged inflexibly at half rated power
/// at the end of a session.
pub const TAIL_SOC_FRACTION: f64 = 0.2;
/// Default lowest allowed battery fraction (V2G floor).
pub const DEFAULT_FLOOR_FRACTION: f64 = 0.2;

/// A session classified for aggregation.
#[derive(Clone, Debug, PartialEq)]
pub enum EvWindow {
    Flexible(FlexibleWindow),
    /// Cannot host any flexibility; direct-charges at rated power from
    /// arrival and only contributes to `tail_load`.
    Inflexible(InflexibleSession),
}

/// Flexible part of a session, in fractional grid positions.
#[derive(Clone, Debug, PartialEq)]
pub struct FlexibleWindow {
    pub arrival_pos: f64,
    /// End of flexible charging; the tail runs from here to departure.
    pub flex_end_pos: f64,
    pub depart_pos: f64,
    /// Vehicle-side energy deliverable flexibly, kWh.
    pub flex_energy_kwh: f64,
    /// Vehicle-side energy direct-charged after the window, kWh.
    pub tail_energy_kwh: f64,
    /// Lowest vehicle-side energy relative to arrival (≤ 0 admits V2G
    /// below the arrival state).
    pub e_floor_rel_kwh: f64,
    pub p_max_kw: f64,
    pub eta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InflexibleSession {
    pub arrival_pos: f64,
    pub end_pos: f64,
    pub p_max_kw: f64,
}

/// Fleet envelope on a settlement grid. Energy rows are sampled at the
/// end of each settlement; power rows apply during the settlement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateEnvelope {
    pub grid: SettlementGrid,
    pub e_upper: Vec<f64>,
    pub e_lower: Vec<f64>,
    pub p_bound: Vec<f64>,
    /// Inflexible direct-charging demand (grid side), kW.
    pub tail_load: Vec<f64>,
    pub n_connected: Vec<u32>,
}

impl AggregateEnvelope {
    pub fn zero(grid: SettlementGrid) -> Self {
        AggregateEnvelope {
            grid,
            e_upper: vec![0.0; grid.n],
            e_lower: vec![0.0; grid.n],
            p_bound: vec![0.0; grid.n],
            tail_load: vec![0.0; grid.n],
            n_connected: vec![0; grid.n],
        }
    }

    pub fn e_diff(&self, t: usize) -> f64 {
        self.e_upper[t] - self.e_lower[t]
    }

    /// CSV export: `settlement,e_upper,e_lower,p_bound,tail_load,n_connected`.
    pub fn write_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "settlement,e_upper,e_lower,p_bound,tail_load,n_connected")?;
        for t in 0..self.grid.n {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                t,
                self.e_upper[t],
                self.e_lower[t],
                self.p_bound[t],
                self.tail_load[t],
                self.n_connected[t]
            )?;
        }
        Ok(())
    }
}

/// Splits a session into its flexible window and SOC tail, or classifies
/// it inflexible when the plug-in span cannot host the split schedule.
pub fn flexible_window(
    profile: &EvProfile,
    session: &ChargeSession,
    grid: &SettlementGrid,
    floor_fraction: f64,
) -> EvWindow {
    let eta = profile.eta;
    let p = profile.p_max_kw;
    let delta_e = session.energy_kwh;
    let duration_h = session.duration_hours();

    let tail_energy = (TAIL_SOC_FRACTION * profile.e_max_kwh).min(delta_e);
    let flex_energy = delta_e - tail_energy;
    let tail_hours = tail_energy / (eta * p / 2.0);
    let flex_hours = flex_energy / (eta * p);

    let arrival_pos = grid.position(session.plug_in);
    let depart_pos = grid.position(session.plug_out);

    if flex_hours + tail_hours > duration_h + 1e-9 {
        // Even the direct split schedule does not fit; charge at rated
        // power from arrival for as long as the energy (or plug) lasts.
        let direct_hours = (delta_e / (eta * p)).min(duration_h);
        return EvWindow::Inflexible(InflexibleSession {
            arrival_pos,
            end_pos: arrival_pos + direct_hours / grid.dt_hours,
            p_max_kw: p,
        });
    }

    let e_arrival = profile.e_max_kwh - delta_e;
    let e_floor_rel = floor_fraction * profile.e_max_kwh - e_arrival;
    EvWindow::Flexible(FlexibleWindow {
        arrival_pos,
        flex_end_pos: depart_pos - tail_hours / grid.dt_hours,
        depart_pos,
        flex_energy_kwh: flex_energy,
        tail_energy_kwh: tail_energy,
        e_floor_rel_kwh: e_floor_rel,
        p_max_kw: p,
        eta,
    })
}

/// Overlap of `[a, b]` with settlement `t`, as a fraction of `dt`.
fn settlement_overlap(a: f64, b: f64, t: usize) -> f64 {
    let lo = (t as f64).max(a);
    let hi = ((t + 1) as f64).min(b);
    (hi - lo).max(0.0)
}

/// Per-settlement boundary series of one flexible window, in its own
/// delivered-energy coordinates (zero at arrival).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IndividualSeries {
    pub u: Vec<f64>,
    pub l: Vec<f64>,
    pub pb: Vec<f64>,
}

/// Upper boundary of a window at a fractional grid position.
fn upper_at(win: &FlexibleWindow, pos: f64, dt: f64) -> f64 {
    if pos <= win.arrival_pos {
        0.0
    } else if pos >= win.flex_end_pos {
        win.flex_energy_kwh
    } else {
        (win.eta * win.p_max_kw * (pos - win.arrival_pos) * dt).min(win.flex_energy_kwh)
    }
}

fn lower_at(win: &FlexibleWindow, pos: f64, dt: f64) -> f64 {
    let raw = if pos <= win.arrival_pos {
        0.0
    } else if pos >= win.flex_end_pos {
        win.flex_energy_kwh
    } else {
        win.e_floor_rel_kwh
            .max(win.flex_energy_kwh - win.eta * win.p_max_kw * (win.flex_end_pos - pos) * dt)
    };
    raw.min(upper_at(win, pos, dt))
}

pub fn individual_boundaries(win: &FlexibleWindow, grid: &SettlementGrid) -> IndividualSeries {
    let dt = grid.dt_hours;
    let mut s = IndividualSeries {
        u: vec![0.0; grid.n],
        l: vec![0.0; grid.n],
        pb: vec![0.0; grid.n],
    };
    for t in 0..grid.n {
        let end = (t + 1) as f64;
        s.u[t] = upper_at(win, end, dt);
        s.l[t] = lower_at(win, end, dt);
        s.pb[t] = win.p_max_kw * settlement_overlap(win.arrival_pos, win.flex_end_pos, t);
    }
    s
}

/// Sums individual window boundaries pointwise into the fleet envelope.
/// Accumulation runs in window order for every settlement, so the result
/// is bit-identical to a brute-force per-settlement sum.
pub fn aggregate_envelope(windows: &[EvWindow], grid: &SettlementGrid) -> AggregateEnvelope {
    let dt = grid.dt_hours;
    let mut env = AggregateEnvelope::zero(*grid);
    for w in windows {
        match w {
            EvWindow::Flexible(win) => {
                for t in 0..grid.n {
                    let end = (t + 1) as f64;
                    env.e_upper[t] += upper_at(win, end, dt);
                    env.e_lower[t] += lower_at(win, end, dt);
                    let open = settlement_overlap(win.arrival_pos, win.flex_end_pos, t);
                    env.p_bound[t] += win.p_max_kw * open;
                    if open > 0.0 {
                        env.n_connected[t] += 1;
                    }
                    env.tail_load[t] += win.p_max_kw / 2.0
                        * settlement_overlap(win.flex_end_pos, win.depart_pos, t);
                }
            }
            EvWindow::Inflexible(inf) => {
                for t in 0..grid.n {
                    env.tail_load[t] +=
                        inf.p_max_kw * settlement_overlap(inf.arrival_pos, inf.end_pos, t);
                }
            }
        }
    }
    env
}

/// Convenience: classify sessions against their profiles and aggregate.
pub fn envelope_from_sessions(
    sessions: &[ChargeSession],
    profiles: &std::collections::BTreeMap<String, EvProfile>,
    grid: &SettlementGrid,
    floor_fraction: f64,
) -> AggregateEnvelope {
    let windows: Vec<EvWindow> = sessions
        .iter()
        .filter_map(|s| {
            profiles
                .get(&s.charger_id)
                .map(|p| flexible_window(p, s, grid, floor_fraction))
        })
        .collect();
    aggregate_envelope(&windows, grid)
}

/// Grid-side load of charge-on-arrival (every session draws rated power
/// from plug-in until its energy is delivered), kW per settlement.
pub fn uncontrolled_load(
    sessions: &[ChargeSession],
    profiles: &std::collections::BTreeMap<String, EvProfile>,
    grid: &SettlementGrid,
) -> Vec<f64> {
    let mut load = vec![0.0; grid.n];
    for s in sessions {
        let Some(p) = profiles.get(&s.charger_id) else {
            continue;
        };
        let hours = (s.energy_kwh / (p.eta * p.p_max_kw)).min(s.duration_hours());
        let a = grid.position(s.plug_in);
        let b = a + hours / grid.dt_hours;
        for t in 0..grid.n {
            load[t] += p.p_max_kw * settlement_overlap(a, b, t);
        }
    }
    load
}
