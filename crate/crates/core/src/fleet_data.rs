//! Charge-session ingestion, cleansing, profile inference, and the
//! deterministic synthetic fleet used for tests and desk-scale runs.

use std::collections::BTreeMap;
use std::io::Read;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::SettlementGrid;

/// Hard cap on session duration; anything longer is dropped as a data
/// artefact (chargers left plugged for over a week).
pub const MAX_SESSION_HOURS: f64 = 168.0;
/// Floors applied when inferring charger/vehicle ratings from data.
pub const MIN_CHARGER_KW: f64 = 7.0;
pub const MIN_BATTERY_KWH: f64 = 16.0;

/// One plug-in event at a charger.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChargeSession {
    pub charger_id: String,
    pub plug_in: NaiveDateTime,
    pub plug_out: NaiveDateTime,
    /// Vehicle-side energy delivered over the session.
    pub energy_kwh: f64,
}

impl ChargeSession {
    pub fn duration_hours(&self) -> f64 {
        (self.plug_out - self.plug_in).num_seconds() as f64 / 3600.0
    }

    fn overlaps(&self, other: &ChargeSession) -> bool {
        self.plug_in < other.plug_out && other.plug_in < self.plug_out
    }
}

/// Per-charger vehicle profile inferred from its sessions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvProfile {
    pub charger_id: String,
    /// Rated charger power, kW.
    pub p_max_kw: f64,
    /// Battery capacity, kWh.
    pub e_max_kwh: f64,
    /// Charging efficiency in (0, 1].
    pub eta: f64,
}

/// Daily regressor values attached to a calendar date.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayFeatures {
    pub date: NaiveDate,
    pub temp_c: f64,
    pub precip_mm: f64,
    pub bank_holiday: bool,
}

impl DayFeatures {
    /// Day-of-week category, 0 = Monday .. 6 = Sunday.
    pub fn day_of_week(&self) -> usize {
        self.date.weekday().num_days_from_monday() as usize
    }

    pub fn is_weekend(&self) -> bool {
        matches!(self.date.weekday(), Weekday::Sat | Weekday::Sun)
    }
}

/// Price and weather series covering a simulation span.
#[derive(Clone, Debug)]
pub struct ExogenousSeries {
    pub grid: SettlementGrid,
    /// Wholesale price per settlement, £/kWh.
    pub wholesale_gbp_per_kwh: Vec<f64>,
    /// Arithmetic mean of the wholesale series.
    pub mean_price_gbp_per_kwh: f64,
    /// Positive/negative reserve reward per settlement, £/MW.
    pub reserve_pos_gbp_per_mw: Vec<f64>,
    pub reserve_neg_gbp_per_mw: Vec<f64>,
    pub days: Vec<DayFeatures>,
}

impl ExogenousSeries {
    pub fn day(&self, day_index: usize) -> &DayFeatures {
        &self.days[day_index]
    }
}

/// Row-level ingestion error; parsing collects these instead of aborting.
#[derive(Clone, Debug, PartialEq)]
pub struct RowError {
    /// 1-based line number in the source file (header is line 1).
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("csv read failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column '{0}' in header")]
    MissingColumn(String),
    #[error("price series missing settlement starting {0}")]
    MissingSettlement(NaiveDateTime),
    #[error("weather series missing date {0}")]
    MissingDay(NaiveDate),
    #[error("{0}")]
    Invalid(String),
}

/// Column names for the sessions CSV; defaults match the documented
/// interchange format.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SessionSchema {
    pub charger_id: String,
    pub plug_in: String,
    pub plug_out: String,
    pub energy_kwh: String,
}

impl Default for SessionSchema {
    fn default() -> Self {
        SessionSchema {
            charger_id: "charger_id".into(),
            plug_in: "plug_in".into(),
            plug_out: "plug_out".into(),
            energy_kwh: "energy_kwh".into(),
        }
    }
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    const FORMATS: [&str; 4] = [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%d %H:%M",
    ];
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s.trim(), f).ok())
}

/// Parses a sessions CSV. Malformed rows are collected with their line
/// numbers; a single bad row never aborts the stream.
pub fn parse_sessions(
    reader: impl Read,
    schema: &SessionSchema,
) -> Result<(Vec<ChargeSession>, Vec<RowError>), DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let (ci, pi, po, ek) = (
        col(&schema.charger_id)?,
        col(&schema.plug_in)?,
        col(&schema.plug_out)?,
        col(&schema.energy_kwh)?,
    );

    let mut sessions = Vec::new();
    let mut errors = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let line = idx + 2; // header occupies line 1
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                errors.push(RowError {
                    line,
                    message: format!("unreadable row: {e}"),
                });
                continue;
            }
        };
        let field = |i: usize| record.get(i).unwrap_or("");
        let mut fail = |message: String| {
            errors.push(RowError { line, message });
        };
        let Some(plug_in) = parse_timestamp(field(pi)) else {
            fail(format!("bad plug_in timestamp '{}'", field(pi)));
            continue;
        };
        let Some(plug_out) = parse_timestamp(field(po)) else {
            fail(format!("bad plug_out timestamp '{}'", field(po)));
            continue;
        };
        let energy_kwh: f64 = match field(ek).parse() {
            Ok(v) => v,
            Err(_) => {
                fail(format!("bad energy value '{}'", field(ek)));
                continue;
            }
        };
        if field(ci).is_empty() {
            fail("empty charger_id".into());
            continue;
        }
        if plug_out <= plug_in {
            fail("plug_out not after plug_in".into());
            continue;
        }
        if !energy_kwh.is_finite() || energy_kwh < 0.0 {
            fail(format!("negative or non-finite energy {energy_kwh}"));
            continue;
        }
        sessions.push(ChargeSession {
            charger_id: field(ci).to_string(),
            plug_in,
            plug_out,
            energy_kwh,
        });
    }
    Ok((sessions, errors))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropReason {
    /// Lasted more than a week.
    TooLong,
    /// Shares time with another session at the same charger.
    Overlap,
}

impl std::fmt::Display for DropReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DropReason::TooLong => write!(f, "duration>168h"),
            DropReason::Overlap => write!(f, "overlap"),
        }
    }
}

/// Cleansing outcome: `kept` is sorted by (charger, plug-in) and free of
/// over-long and overlapping sessions.
#[derive(Clone, Debug, Default)]
pub struct CleanseOutcome {
    pub kept: Vec<ChargeSession>,
    pub dropped: Vec<(ChargeSession, DropReason)>,
}

/// Drops sessions longer than a week, then drops *every* member of any
/// overlapping pair at the same charger. Total and idempotent.
pub fn cleanse_sessions(sessions: Vec<ChargeSession>) -> CleanseOutcome {
    let mut out = CleanseOutcome::default();
    let mut by_charger: BTreeMap<String, Vec<ChargeSession>> = BTreeMap::new();
    for s in sessions {
        if s.duration_hours() > MAX_SESSION_HOURS {
            out.dropped.push((s, DropReason::TooLong));
        } else {
            by_charger.entry(s.charger_id.clone()).or_default().push(s);
        }
    }
    for (_, mut group) in by_charger {
        group.sort_by(|a, b| a.plug_in.cmp(&b.plug_in).then(a.plug_out.cmp(&b.plug_out)));
        let mut overlapping = vec![false; group.len()];
        for i in 0..group.len() {
            for j in i + 1..group.len() {
                if group[j].plug_in >= group[i].plug_out {
                    break; // sorted by plug_in; nothing later can overlap i
                }
                if group[i].overlaps(&group[j]) {
                    overlapping[i] = true;
                    overlapping[j] = true;
                }
            }
        }
        for (s, bad) in group.into_iter().zip(overlapping) {
            if bad {
                out.dropped.push((s, DropReason::Overlap));
            } else {
                out.kept.push(s);
            }
        }
    }
    out.kept
        .sort_by(|a, b| a.charger_id.cmp(&b.charger_id).then(a.plug_in.cmp(&b.plug_in)));
    out
}

/// Infers per-charger ratings: rated power is the highest observed mean
/// session power, capacity the largest single delivery, both floored at
/// domestic minimums.
pub fn infer_profiles(sessions: &[ChargeSession], eta: f64) -> BTreeMap<String, EvProfile> {
    let mut map: BTreeMap<String, EvProfile> = BTreeMap::new();
    for s in sessions {
        let power = s.energy_kwh / s.duration_hours();
        let entry = map.entry(s.charger_id.clone()).or_insert(EvProfile {
            charger_id: s.charger_id.clone(),
            p_max_kw: MIN_CHARGER_KW,
            e_max_kwh: MIN_BATTERY_KWH,
            eta,
        });
        entry.p_max_kw = entry.p_max_kw.max(power);
        entry.e_max_kwh = entry.e_max_kwh.max(s.energy_kwh);
    }
    map
}

/// Knobs for the synthetic overnight-dominant fleet.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticFleetParams {
    pub weekday_plug_prob: f64,
    pub weekend_plug_prob: f64,
    pub holiday_plug_prob: f64,
    pub weekday_arrival_hour: f64,
    pub weekend_arrival_hour: f64,
    pub arrival_std_hours: f64,
    pub weekday_departure_hour: f64,
    pub weekend_departure_hour: f64,
    pub departure_std_hours: f64,
    /// Fractional energy increase at 0 °C relative to mild weather.
    pub cold_energy_boost: f64,
    /// Fractional energy increase in heavy rain.
    pub rain_energy_boost: f64,
    pub weekend_energy_factor: f64,
    pub energy_noise_frac: f64,
    /// Efficiency assumed when clipping energies to what a session can
    /// physically deliver.
    pub eta: f64,
}

impl Default for SyntheticFleetParams {
    fn default() -> Self {
        SyntheticFleetParams {
            weekday_plug_prob: 0.82,
            weekend_plug_prob: 0.68,
            holiday_plug_prob: 0.60,
            weekday_arrival_hour: 17.75,
            weekend_arrival_hour: 19.0,
            arrival_std_hours: 0.9,
            weekday_departure_hour: 7.5,
            weekend_departure_hour: 9.0,
            departure_std_hours: 0.8,
            cold_energy_boost: 0.35,
            rain_energy_boost: 0.10,
            weekend_energy_factor: 0.8,
            energy_noise_frac: 0.18,
            eta: 0.9,
        }
    }
}

impl SyntheticFleetParams {
    /// Expected sessions per EV-day given the plug-in probabilities; used
    /// by tests to bound generator output.
    pub fn expected_sessions_per_ev_day(&self) -> f64 {
        (5.0 * self.weekday_plug_prob + 2.0 * self.weekend_plug_prob) / 7.0
    }
}

fn normal_sample(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple.
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    mean + std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn ev_rng(seed: u64, ev: u64) -> ChaCha8Rng {
    // splitmix-style stream separation so per-EV draws are independent
    // of iteration order.
    let mut z = seed ^ ev.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Deterministic synthetic weather: seasonal temperature cycle plus
/// seeded noise, intermittent rain, sparse bank holidays.
pub fn synthetic_weather(seed: u64, start: NaiveDate, days: usize) -> Vec<DayFeatures> {
    let mut rng = ev_rng(seed, 0xEA7);
    (0..days)
        .map(|d| {
            let date = start + Duration::days(d as i64);
            let doy = date.ordinal() as f64;
            let seasonal = 10.0 - 8.0 * (2.0 * std::f64::consts::PI * (doy - 15.0) / 365.0).cos();
            let temp_c = seasonal + normal_sample(&mut rng, 0.0, 2.5);
            let precip_mm = if rng.gen_bool(0.45) {
                let v: f64 = rng.gen_range(0.0..1.0);
                12.0 * v * v
            } else {
                0.0
            };
            let bank_holiday = rng.gen_bool(8.0 / 365.0);
            DayFeatures {
                date,
                temp_c,
                precip_mm,
                bank_holiday,
            }
        })
        .collect()
}

/// Generates an overnight-dominant fleet whose aggregate behaviour
/// responds to weather, weekday, and holiday regressors. Deterministic
/// for a given seed and independent of iteration order.
pub fn generate_synthetic_fleet(
    seed: u64,
    n_ev: usize,
    days: &[DayFeatures],
    params: &SyntheticFleetParams,
) -> Vec<ChargeSession> {
    let mut sessions = Vec::new();
    for ev in 0..n_ev {
        let mut rng = ev_rng(seed, ev as u64 + 1);
        let p_max: f64 = if rng.gen_bool(0.8) { 7.0 } else { 11.0 };
        let e_max: f64 = match rng.gen_range(0..100) {
            0..=24 => 24.0,
            25..=59 => 40.0,
            60..=84 => 52.0,
            _ => 64.0,
        };
        let daily_need = rng.gen_range(5.0..12.0) * (e_max / 40.0).sqrt();
        let arrival_jitter = normal_sample(&mut rng, 0.0, 0.5);

        for (d, day) in days.iter().enumerate() {
            let weekend = day.is_weekend();
            let plug_prob = if day.bank_holiday {
                params.holiday_plug_prob
            } else if weekend {
                params.weekend_plug_prob
            } else {
                params.weekday_plug_prob
            };
            if !rng.gen_bool(plug_prob.clamp(0.0, 1.0)) {
                continue;
            }
            let arr_mean = if weekend || day.bank_holiday {
                params.weekend_arrival_hour
            } else {
                params.weekday_arrival_hour
            } + arrival_jitter
                + if day.bank_holiday { 0.75 } else { 0.0 };
            let dep_mean = if weekend || day.bank_holiday {
                params.weekend_departure_hour
            } else {
                params.weekday_departure_hour
            };
            let arrival_h = normal_sample(&mut rng, arr_mean, params.arrival_std_hours)
                .clamp(14.5, 22.5);
            let depart_h =
                normal_sample(&mut rng, dep_mean, params.departure_std_hours).clamp(5.0, 11.0);

            let cold = (12.0 - day.temp_c).max(0.0) / 12.0;
            let rain = (day.precip_mm.min(10.0)) / 10.0;
            let mut energy = daily_need
                * (1.0 + params.cold_energy_boost * cold + params.rain_energy_boost * rain)
                * if weekend {
                    params.weekend_energy_factor
                } else {
                    1.0
                }
                * (1.0 + normal_sample(&mut rng, 0.0, params.energy_noise_frac));
            let duration_h = 24.0 - arrival_h + depart_h;
            let deliverable = 0.75 * params.eta * p_max * duration_h;
            energy = energy.clamp(1.0, (0.9 * e_max).min(deliverable));

            let plug_in = days[d].date.and_hms_opt(0, 0, 0).unwrap()
                + Duration::seconds((arrival_h * 3600.0).round() as i64);
            let plug_out = days[d].date.and_hms_opt(0, 0, 0).unwrap()
                + Duration::days(1)
                + Duration::seconds((depart_h * 3600.0).round() as i64);
            sessions.push(ChargeSession {
                charger_id: format!("ev{ev:05}"),
                plug_in,
                plug_out,
                energy_kwh: energy,
            });
        }
    }
    sessions
}

/// Built-in Quick-Reserve-style tariff: positive reserve pays
/// £1.41/MW per settlement 07:00–23:00 and £0.31/MW overnight; negative
/// reserve is pinned at 30 % of positive.
pub fn builtin_reserve_tariff(grid: &SettlementGrid) -> (Vec<f64>, Vec<f64>) {
    let mut pos = Vec::with_capacity(grid.n);
    let mut neg = Vec::with_capacity(grid.n);
    let per_day = grid.settlements_per_day() as f64;
    for t in 0..grid.n {
        let hour = grid.settlement_of_day(t) as f64 * 24.0 / per_day;
        let p = if (7.0..23.0).contains(&hour) { 1.41 } else { 0.31 };
        pos.push(p);
        neg.push(0.3 * p);
    }
    (pos, neg)
}

/// Deterministic wholesale price shape: overnight trough, evening peak.
/// Mean lands near 6 p/kWh, matching domestic flat-rate scale.
pub fn synthetic_wholesale_prices(grid: &SettlementGrid) -> Vec<f64> {
    let per_day = grid.settlements_per_day() as f64;
    (0..grid.n)
        .map(|t| {
            let hour = grid.settlement_of_day(t) as f64 * 24.0 / per_day;
            if !(6.0..23.0).contains(&hour) {
                0.035
            } else if (16.0..21.0).contains(&hour) {
                0.090
            } else if (21.0..23.0).contains(&hour) {
                0.065
            } else {
                0.055
            }
        })
        .collect()
}

/// Assembles an [`ExogenousSeries`] from in-memory parts, checking
/// coverage and deriving the mean price.
pub fn assemble_exogenous(
    grid: SettlementGrid,
    wholesale: Vec<f64>,
    reserve_pos: Vec<f64>,
    reserve_neg: Vec<f64>,
    days: Vec<DayFeatures>,
) -> Result<ExogenousSeries, DataError> {
    if wholesale.len() != grid.n {
        return Err(DataError::Invalid(format!(
            "wholesale series has {} settlements, grid needs {}",
            wholesale.len(),
            grid.n
        )));
    }
    if reserve_pos.len() != grid.n || reserve_neg.len() != grid.n {
        return Err(DataError::Invalid("reserve tariff length mismatch".into()));
    }
    if days.len() < grid.n_days() {
        return Err(DataError::Invalid(format!(
            "weather covers {} days, grid needs {}",
            days.len(),
            grid.n_days()
        )));
    }
    let mean = wholesale.iter().sum::<f64>() / wholesale.len() as f64;
    Ok(ExogenousSeries {
        grid,
        wholesale_gbp_per_kwh: wholesale,
        mean_price_gbp_per_kwh: mean,
        reserve_pos_gbp_per_mw: reserve_pos,
        reserve_neg_gbp_per_mw: reserve_neg,
        days,
    })
}

/// Fully synthetic exogenous series (prices deterministic, weather
/// seeded) over a grid.
pub fn synthetic_exogenous(grid: SettlementGrid, seed: u64) -> ExogenousSeries {
    let (pos, neg) = builtin_reserve_tariff(&grid);
    let days = synthetic_weather(seed, grid.start.date(), grid.n_days().max(1));
    assemble_exogenous(grid, synthetic_wholesale_prices(&grid), pos, neg, days)
        .expect("synthetic series is consistent by construction")
}

/// Loads the wholesale price CSV (`timestamp,gbp_per_kwh`) onto a grid.
/// Every settlement must be covered; the first gap is reported.
pub fn load_price_csv(reader: impl Read, grid: &SettlementGrid) -> Result<Vec<f64>, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let ts = headers
        .iter()
        .position(|h| h == "timestamp")
        .ok_or_else(|| DataError::MissingColumn("timestamp".into()))?;
    let price = headers
        .iter()
        .position(|h| h == "gbp_per_kwh")
        .ok_or_else(|| DataError::MissingColumn("gbp_per_kwh".into()))?;
    let mut series = vec![f64::NAN; grid.n];
    for record in rdr.records() {
        let record = record?;
        let Some(t) = record.get(ts).and_then(parse_timestamp) else {
            continue;
        };
        let Some(idx) = grid.settlement_of(t) else {
            continue;
        };
        if let Some(v) = record.get(price).and_then(|s| s.parse::<f64>().ok()) {
            series[idx] = v;
        }
    }
    for (idx, v) in series.iter().enumerate() {
        if !v.is_finite() {
            return Err(DataError::MissingSettlement(grid.time_at(idx as f64)));
        }
    }
    Ok(series)
}

/// Loads the weather CSV (`date,temp_c,precip_mm,bank_holiday`) for a
/// date span; every day must be present.
pub fn load_weather_csv(
    reader: impl Read,
    start: NaiveDate,
    days: usize,
) -> Result<Vec<DayFeatures>, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let (cd, ct, cp, cb) = (col("date")?, col("temp_c")?, col("precip_mm")?, col("bank_holiday")?);
    let mut by_date: BTreeMap<NaiveDate, DayFeatures> = BTreeMap::new();
    for record in rdr.records() {
        let record = record?;
        let Some(date) = record
            .get(cd)
            .and_then(|s| NaiveDate::parse_from_str(s, "%Y-%m-%d").ok())
        else {
            continue;
        };
        let temp_c: f64 = record.get(ct).and_then(|s| s.parse().ok()).unwrap_or(f64::NAN);
        let precip_mm: f64 = record.get(cp).and_then(|s| s.parse().ok()).unwrap_or(f64::NAN);
        let bank_holiday = matches!(record.get(cb).map(str::trim), Some("1") | Some("true"));
        by_date.insert(
            date,
            DayFeatures {
                date,
                temp_c,
                precip_mm,
                bank_holiday,
            },
        );
    }
    let mut out = Vec::with_capacity(days);
    for d in 0..days {
        let date = start + Duration::days(d as i64);
        let day = by_date
            .get(&date)
            .cloned()
            .ok_or(DataError::MissingDay(date))?;
        if !day.temp_c.is_finite() || !day.precip_mm.is_finite() {
            return Err(DataError::Invalid(format!("non-numeric weather on {date}")));
        }
        out.push(day);
    }
    Ok(out)
}

/// Writes sessions in the interchange CSV format.
pub fn write_sessions_csv(
    sessions: &[ChargeSession],
    mut w: impl std::io::Write,
) -> std::io::Result<()> {
    writeln!(w, "charger_id,plug_in,plug_out,energy_kwh")?;
    for s in sessions {
        writeln!(
            w,
            "{},{},{},{}",
            s.charger_id,
            s.plug_in.format("%Y-%m-%dT%H:%M:%S"),
            s.plug_out.format("%Y-%m-%dT%H:%M:%S"),
            s.energy_kwh
        )?;
    }
    Ok(())
}
