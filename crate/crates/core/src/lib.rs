//! Aggregate-battery scheduling for EV fleets.
//!
//! The pipeline: charge-session records are cleansed and turned into
//! per-vehicle flexibility windows ([`fleet_data`]), summed into a
//! fleet-wide envelope of energy and power boundaries ([`aggregation`]),
//! forecast per settlement-of-day with probability-banded scenarios
//! ([`forecast`]), and scheduled against day-ahead reserve auctions by a
//! two-stage stochastic program with CVaR risk shaping ([`optimizer`],
//! solved by the `evflex-lp` kernel). A rolling-horizon simulator
//! ([`smpc`]) replays the whole loop against realized data and
//! benchmarks, and [`metrics_report`] reduces runs to the headline
//! tables and charts.

pub mod aggregation;
pub mod fleet_data;
pub mod forecast;
pub mod metrics_report;
pub mod optimizer;
pub mod smpc;
pub mod time;

pub use time::SettlementGrid;
