//! Settlement-period grid arithmetic.

use chrono::{NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

/// A contiguous run of equal settlement periods.
///
/// Energy series over a grid are sampled at the *end* of each settlement:
/// index `t` holds the cumulative value once settlement `t` has fully
/// elapsed. Power series hold the limit that applies *during* settlement
/// `t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettlementGrid {
    pub start: NaiveDateTime,
    pub dt_hours: f64,
    pub n: usize,
}

impl SettlementGrid {
    pub fn new(start: NaiveDateTime, dt_hours: f64, n: usize) -> Self {
        assert!(dt_hours > 0.0, "settlement duration must be positive");
        assert!(n >= 1, "grid needs at least one settlement");
        SettlementGrid { start, dt_hours, n }
    }

    /// Grid covering whole days from midnight of `start_date`.
    pub fn for_days(start_date: NaiveDate, dt_hours: f64, days: usize) -> Self {
        let per_day = (24.0 / dt_hours).round() as usize;
        assert!(
            (per_day as f64 * dt_hours - 24.0).abs() < 1e-9,
            "settlement duration must divide the day"
        );
        SettlementGrid::new(
            start_date.and_hms_opt(0, 0, 0).unwrap(),
            dt_hours,
            per_day * days,
        )
    }

    pub fn settlements_per_day(&self) -> usize {
        let per_day = (24.0 / self.dt_hours).round() as usize;
        debug_assert!((per_day as f64 * self.dt_hours - 24.0).abs() < 1e-9);
        per_day
    }

    pub fn n_days(&self) -> usize {
        self.n / self.settlements_per_day()
    }

    pub fn end(&self) -> NaiveDateTime {
        self.time_at(self.n as f64)
    }

    /// Fractional settlement position of a timestamp (may be negative or
    /// beyond `n` for out-of-grid times).
    pub fn position(&self, t: NaiveDateTime) -> f64 {
        let secs = (t - self.start).num_seconds() as f64;
        secs / (self.dt_hours * 3600.0)
    }

    pub fn time_at(&self, position: f64) -> NaiveDateTime {
        let secs = position * self.dt_hours * 3600.0;
        self.start + chrono::Duration::seconds(secs.round() as i64)
    }

    /// Settlement index containing `t`, or `None` outside the grid.
    pub fn settlement_of(&self, t: NaiveDateTime) -> Option<usize> {
        let pos = self.position(t);
        if pos < 0.0 || pos >= self.n as f64 {
            None
        } else {
            Some(pos.floor() as usize)
        }
    }

    /// Settlement-of-day bucket (0..settlements_per_day) of settlement `t`.
    pub fn settlement_of_day(&self, t: usize) -> usize {
        let per_day = self.settlements_per_day();
        let offset = (self.start.hour() as f64 * 60.0 + self.start.minute() as f64)
            / (self.dt_hours * 60.0);
        let offset = offset.round() as usize;
        (t + offset) % per_day
    }

    /// Day index (relative to the grid start date) of settlement `t`.
    pub fn day_of(&self, t: usize) -> usize {
        t / self.settlements_per_day()
    }

    pub fn date_of(&self, t: usize) -> NaiveDate {
        (self.start + chrono::Duration::seconds((t as f64 * self.dt_hours * 3600.0) as i64)).date()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> SettlementGrid {
        SettlementGrid::for_days(NaiveDate::from_ymd_opt(2023, 1, 2).unwrap(), 0.5, 3)
    }

    #[test]
    fn positions_and_settlements() {
        let g = grid();
        assert_eq!(g.n, 144);
        assert_eq!(g.settlements_per_day(), 48);
        let t = NaiveDate::from_ymd_opt(2023, 1, 2)
            .unwrap()
            .and_hms_opt(14, 0, 0)
            .unwrap();
        assert_eq!(g.position(t), 28.0);
        assert_eq!(g.settlement_of(t), Some(28));
        assert_eq!(g.settlement_of_day(28), 28);
        assert_eq!(g.settlement_of_day(48 + 5), 5);
        assert_eq!(g.day_of(50), 1);
    }

    #[test]
    fn out_of_grid_is_none() {
        let g = grid();
        let before = g.start - chrono::Duration::minutes(1);
        assert_eq!(g.settlement_of(before), None);
        assert_eq!(g.settlement_of(g.end()), None);
    }
}
