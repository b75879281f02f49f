//! Core data model: road segments, hourly observations, single-priority
//! datasets, and the filtering and date-splitting rules applied before any
//! model sees the data.
//!
//! Units are fixed throughout the crate: lengths in meters, speeds in
//! meters/second, flows in vehicles/hour, densities in vehicles/meter.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Segments shorter than this are dropped.
pub const MIN_SEGMENT_LENGTH_M: f64 = 20.0;
/// Inclusive speed window kept by the filter.
pub const MIN_SPEED_MPS: f64 = 1.0;
pub const MAX_SPEED_MPS: f64 = 45.0;
/// Hourly intervals kept by the filter are those starting at 7:00 through
/// 21:00, so every kept interval ends by 22:00.
pub const FIRST_HOUR: u8 = 7;
pub const LAST_HOUR: u8 = 21;
/// Minimum plausible lane width used as a sanity floor on `width_m`.
pub const MIN_LANE_WIDTH_M: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoadPriority {
    Highway,
    Arterial,
}

impl RoadPriority {
    pub const ALL: [RoadPriority; 2] = [RoadPriority::Highway, RoadPriority::Arterial];

    pub fn as_str(self) -> &'static str {
        match self {
            RoadPriority::Highway => "highway",
            RoadPriority::Arterial => "arterial",
        }
    }
}

impl fmt::Display for RoadPriority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoadPriority {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "highway" => Ok(RoadPriority::Highway),
            "arterial" => Ok(RoadPriority::Arterial),
            other => Err(Error::Format(format!(
                "unknown road priority `{other}` (expected highway or arterial)"
            ))),
        }
    }
}

/// Static roadway record. Column order matches `segments.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: String,
    pub city: String,
    pub priority: RoadPriority,
    pub length_m: f64,
    pub lanes: u32,
    pub width_m: f64,
    pub speed_limit_mps: f64,
}

impl Segment {
    pub fn validate(&self) -> Result<()> {
        let ok = self.length_m > 0.0
            && self.lanes >= 1
            && self.width_m > 0.0
            && self.speed_limit_mps > 0.0
            && self.length_m.is_finite()
            && self.width_m.is_finite()
            && self.speed_limit_mps.is_finite();
        if !ok {
            return Err(Error::Format(format!(
                "segment `{}` has non-positive or non-finite attributes",
                self.id
            )));
        }
        Ok(())
    }

    /// `width_m >= lanes * MIN_LANE_WIDTH_M`.
    pub fn width_is_plausible(&self) -> bool {
        self.width_m >= f64::from(self.lanes) * MIN_LANE_WIDTH_M
    }
}

/// Calendar position of an hourly interval. Days of week count from
/// Monday = 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HourStamp {
    pub date: NaiveDate,
    pub hour: u8,
}

impl HourStamp {
    pub fn dow(&self) -> u8 {
        day_of_week(self.date)
    }

    /// The preceding interval on the same calendar day, if any.
    pub fn previous_same_day(&self) -> Option<HourStamp> {
        self.hour.checked_sub(1).map(|hour| HourStamp {
            date: self.date,
            hour,
        })
    }
}

pub fn day_of_week(date: NaiveDate) -> u8 {
    date.weekday().num_days_from_monday() as u8
}

/// One (segment, hour) record. Column order matches `observations.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub segment_id: String,
    pub date: NaiveDate,
    pub hour: u8,
    pub dow: u8,
    pub partial_flow_vph: f64,
    pub mean_speed_mps: f64,
}

impl Observation {
    pub fn stamp(&self) -> HourStamp {
        HourStamp {
            date: self.date,
            hour: self.hour,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hour > 23 || self.dow > 6 {
            return Err(Error::Format(format!(
                "observation for `{}` on {} has hour {} / dow {} out of range",
                self.segment_id, self.date, self.hour, self.dow
            )));
        }
        if self.dow != day_of_week(self.date) {
            return Err(Error::Format(format!(
                "observation for `{}`: dow {} does not match date {}",
                self.segment_id, self.dow, self.date
            )));
        }
        if !(self.partial_flow_vph >= 0.0 && self.partial_flow_vph.is_finite()) {
            return Err(Error::Format(format!(
                "observation for `{}` on {} hour {}: flow must be finite and >= 0",
                self.segment_id, self.date, self.hour
            )));
        }
        if !self.mean_speed_mps.is_finite() {
            return Err(Error::Format(format!(
                "observation for `{}` on {} hour {}: non-finite speed",
                self.segment_id, self.date, self.hour
            )));
        }
        Ok(())
    }
}

/// Which speed converts a flow into a density.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpeedSource {
    /// The observation's own measured space-mean speed.
    Observed,
    /// A speed supplied by the caller, e.g. a model estimate.
    Estimated(f64),
}

/// `rho = (q / 3600) / v` in vehicles/meter, with `q` in veh/h and `v` in m/s.
pub fn density_from(flow_vph: f64, speed_mps: f64) -> Result<f64> {
    if !(speed_mps >= MIN_SPEED_MPS) {
        return Err(Error::Precondition(format!(
            "density needs speed >= {MIN_SPEED_MPS} m/s, got {speed_mps}"
        )));
    }
    Ok(flow_vph / 3600.0 / speed_mps)
}

pub fn density_veh_per_m(obs: &Observation, speed: SpeedSource) -> Result<f64> {
    let v = match speed {
        SpeedSource::Observed => obs.mean_speed_mps,
        SpeedSource::Estimated(v) => v,
    };
    density_from(obs.partial_flow_vph, v)
}

/// Half-open calendar range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if end < start {
            return Err(Error::Format(format!(
                "date range end {end} precedes start {start}"
            )));
        }
        Ok(DateRange { start, end })
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        date >= self.start && date < self.end
    }

    pub fn days(&self) -> i64 {
        (self.end - self.start).num_days()
    }

    pub fn full_weeks(&self) -> u32 {
        (self.days() / 7) as u32
    }

    pub fn is_disjoint(&self, other: &DateRange) -> bool {
        self.end <= other.start || other.end <= self.start
    }
}

/// Observations of one city and one road priority.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub city: String,
    pub priority: RoadPriority,
    pub segments: BTreeMap<String, Segment>,
    /// Sorted by `(date, hour, segment_id)`.
    pub observations: Vec<Observation>,
    pub date_range: DateRange,
}

impl Dataset {
    /// Validates id resolution and priority homogeneity, then sorts the
    /// observations into time order.
    pub fn new(
        city: impl Into<String>,
        priority: RoadPriority,
        segments: impl IntoIterator<Item = Segment>,
        mut observations: Vec<Observation>,
        date_range: DateRange,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        for seg in segments {
            seg.validate()?;
            if seg.priority != priority {
                return Err(Error::MixedPriority {
                    expected: priority,
                    found: seg.priority,
                    segment: seg.id,
                });
            }
            if !seg.width_is_plausible() {
                log::warn!(
                    "segment `{}`: width {} m is below {} m per lane",
                    seg.id,
                    seg.width_m,
                    MIN_LANE_WIDTH_M
                );
            }
            map.insert(seg.id.clone(), seg);
        }
        for obs in &observations {
            obs.validate()?;
            if !map.contains_key(&obs.segment_id) {
                return Err(Error::UnknownSegment(obs.segment_id.clone()));
            }
            if !date_range.contains(obs.date) {
                return Err(Error::Format(format!(
                    "observation date {} outside dataset range [{}, {})",
                    obs.date, date_range.start, date_range.end
                )));
            }
        }
        sort_observations(&mut observations);
        Ok(Dataset {
            city: city.into(),
            priority,
            segments: map,
            observations,
            date_range,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Observations grouped per segment id, each group in time order.
    pub fn observations_by_segment(&self) -> BTreeMap<&str, Vec<&Observation>> {
        let mut out: BTreeMap<&str, Vec<&Observation>> = BTreeMap::new();
        for obs in &self.observations {
            out.entry(obs.segment_id.as_str()).or_default().push(obs);
        }
        out
    }

    /// Same dates, only the listed segments and their observations.
    pub fn restrict_segments(&self, ids: &BTreeSet<String>) -> Dataset {
        Dataset {
            city: self.city.clone(),
            priority: self.priority,
            segments: self
                .segments
                .iter()
                .filter(|(id, _)| ids.contains(*id))
                .map(|(id, s)| (id.clone(), s.clone()))
                .collect(),
            observations: self
                .observations
                .iter()
                .filter(|o| ids.contains(&o.segment_id))
                .cloned()
                .collect(),
            date_range: self.date_range,
        }
    }
}

pub(crate) fn sort_observations(obs: &mut [Observation]) {
    obs.sort_by(|a, b| {
        (a.date, a.hour, &a.segment_id).cmp(&(b.date, b.hour, &b.segment_id))
    });
}

/// The raw contents of one city's `segments.csv` / `observations.csv`,
/// before partitioning by priority.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CityTables {
    pub segments: Vec<Segment>,
    pub observations: Vec<Observation>,
}

impl CityTables {
    pub fn city(&self) -> Result<String> {
        let mut cities: BTreeSet<&str> = self.segments.iter().map(|s| s.city.as_str()).collect();
        match (cities.pop_first(), cities.is_empty()) {
            (Some(c), true) => Ok(c.to_string()),
            (None, _) => Err(Error::EmptyDataset("no segments".into())),
            (Some(_), false) => Err(Error::Format(
                "segments table mixes several cities".into(),
            )),
        }
    }

    /// Date span of all observations, `[first date, last date + 1 day)`.
    pub fn date_range(&self) -> Result<DateRange> {
        let first = self.observations.iter().map(|o| o.date).min();
        let last = self.observations.iter().map(|o| o.date).max();
        match (first, last) {
            (Some(a), Some(b)) => DateRange::new(a, b + Duration::days(1)),
            _ => Err(Error::EmptyDataset("no observations".into())),
        }
    }

    /// One dataset per priority present in the segment table. All datasets
    /// share the city-wide date range.
    pub fn by_priority(&self) -> Result<BTreeMap<RoadPriority, Dataset>> {
        let city = self.city()?;
        let range = self.date_range()?;
        let priority_of: BTreeMap<&str, RoadPriority> = self
            .segments
            .iter()
            .map(|s| (s.id.as_str(), s.priority))
            .collect();
        let mut out = BTreeMap::new();
        for p in RoadPriority::ALL {
            let segs: Vec<Segment> = self
                .segments
                .iter()
                .filter(|s| s.priority == p)
                .cloned()
                .collect();
            if segs.is_empty() {
                continue;
            }
            let mut obs = Vec::new();
            for o in &self.observations {
                match priority_of.get(o.segment_id.as_str()) {
                    Some(&q) if q == p => obs.push(o.clone()),
                    Some(_) => {}
                    None => return Err(Error::UnknownSegment(o.segment_id.clone())),
                }
            }
            out.insert(p, Dataset::new(city.clone(), p, segs, obs, range)?);
        }
        Ok(out)
    }

    pub fn dataset(&self, priority: RoadPriority) -> Result<Dataset> {
        self.by_priority()?.remove(&priority).ok_or_else(|| {
            Error::EmptyDataset(format!("no {priority} segments in city tables"))
        })
    }
}

/// Row counts removed by [`filter_dataset`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub segments_too_short: usize,
    pub observations_of_dropped_segments: usize,
    pub observations_speed_out_of_range: usize,
    pub observations_hour_out_of_window: usize,
}

impl FilterReport {
    pub fn is_clean(&self) -> bool {
        *self == FilterReport::default()
    }

    pub fn dropped_observations(&self) -> usize {
        self.observations_of_dropped_segments
            + self.observations_speed_out_of_range
            + self.observations_hour_out_of_window
    }
}

pub fn speed_in_range(v: f64) -> bool {
    (MIN_SPEED_MPS..=MAX_SPEED_MPS).contains(&v)
}

pub fn hour_in_window(hour: u8) -> bool {
    (FIRST_HOUR..=LAST_HOUR).contains(&hour)
}

/// Drops short segments (and their rows), rows with speed outside
/// `[1, 45]` m/s, and rows outside the 7:00-22:00 window.
pub fn filter_dataset(raw: &Dataset) -> Result<(Dataset, FilterReport)> {
    let mut report = FilterReport::default();
    let segments: BTreeMap<String, Segment> = raw
        .segments
        .iter()
        .filter(|(_, s)| {
            let keep = s.length_m >= MIN_SEGMENT_LENGTH_M;
            if !keep {
                report.segments_too_short += 1;
            }
            keep
        })
        .map(|(id, s)| (id.clone(), s.clone()))
        .collect();

    let mut observations = Vec::with_capacity(raw.observations.len());
    for obs in &raw.observations {
        if !segments.contains_key(&obs.segment_id) {
            report.observations_of_dropped_segments += 1;
        } else if !speed_in_range(obs.mean_speed_mps) {
            report.observations_speed_out_of_range += 1;
        } else if !hour_in_window(obs.hour) {
            report.observations_hour_out_of_window += 1;
        } else {
            observations.push(obs.clone());
        }
    }

    if observations.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} {} dataset has no observations left after filtering",
            raw.city, raw.priority
        )));
    }
    log::debug!("filter {} {}: {:?}", raw.city, raw.priority, report);
    Ok((
        Dataset {
            city: raw.city.clone(),
            priority: raw.priority,
            segments,
            observations,
            date_range: raw.date_range,
        },
        report,
    ))
}

/// Contiguous train / validation / test datasets.
#[derive(Clone, Debug)]
pub struct DateSplit {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl DateSplit {
    pub fn empty_parts(&self) -> Vec<&'static str> {
        [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ]
        .into_iter()
        .filter(|(_, d)| d.is_empty())
        .map(|(n, _)| n)
        .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitWeeks {
    pub train_weeks: u32,
    pub val_weeks: u32,
    pub test_weeks: u32,
}

impl Default for SplitWeeks {
    fn default() -> Self {
        SplitWeeks {
            train_weeks: 5,
            val_weeks: 1,
            test_weeks: 1,
        }
    }
}

pub fn split_by_date(d: &Dataset, weeks: SplitWeeks) -> Result<DateSplit> {
    let required = weeks.train_weeks + weeks.val_weeks + weeks.test_weeks;
    let available = d.date_range.full_weeks();
    if required > available || required == 0 {
        return Err(Error::InsufficientSpan {
            required,
            available,
        });
    }
    let start = d.date_range.start;
    let at = |w: u32| start + Duration::days(7 * i64::from(w));
    let train_r = DateRange::new(at(0), at(weeks.train_weeks))?;
    let val_r = DateRange::new(train_r.end, at(weeks.train_weeks + weeks.val_weeks))?;
    let test_r = DateRange::new(val_r.end, at(required))?;

    let part = |r: DateRange| Dataset {
        city: d.city.clone(),
        priority: d.priority,
        segments: d.segments.clone(),
        observations: d
            .observations
            .iter()
            .filter(|o| r.contains(o.date))
            .cloned()
            .collect(),
        date_range: r,
    };
    let split = DateSplit {
        train: part(train_r),
        val: part(val_r),
        test: part(test_r),
    };
    for name in split.empty_parts() {
        log::warn!("{} {}: {name} split is empty", d.city, d.priority);
    }
    Ok(split)
}
