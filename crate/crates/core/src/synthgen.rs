//! Synthetic cities with known ground-truth fundamental diagrams.
//!
//! Demand is density-driven: for every segment and hourly interval a target
//! density is drawn from the demand profile, the true speed follows from the
//! segment's fundamental diagram, and the observed partial flow and speed
//! are derived from it with penetration and noise applied. Every segment
//! draws from its own random substreams, keyed by `(seed, segment index)`,
//! so per-segment output does not depend on generation order.

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{
    day_of_week, CityTables, Observation, RoadPriority, Segment, FIRST_HOUR, LAST_HOUR,
    MAX_SPEED_MPS, MIN_LANE_WIDTH_M, MIN_SEGMENT_LENGTH_M, MIN_SPEED_MPS,
};
use crate::error::{Error, Result};

/// Lower bound for generated observed speeds. Sits just above the 1 m/s
/// filter edge so that every generated label is strictly inside `(0, 1)`
/// in inverse-speed space.
pub const GENERATED_MIN_SPEED_MPS: f64 = 1.01;

/// A speed produced by a fundamental diagram, with a flag for whether the
/// 1 m/s congested floor was applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdSpeed {
    pub mps: f64,
    pub floored: bool,
}

impl FdSpeed {
    fn floor(v: f64) -> Self {
        if v < MIN_SPEED_MPS || v.is_nan() {
            FdSpeed {
                mps: MIN_SPEED_MPS,
                floored: true,
            }
        } else {
            FdSpeed {
                mps: v,
                floored: false,
            }
        }
    }
}

/// Linear speed-density law. `rho_crit_veh_per_m` is the zero-speed density
/// of the parabola `q = v_ff * rho * (1 - rho / rho_crit)`; flow peaks at
/// half of it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Greenshields {
    pub v_ff_mps: f64,
    pub rho_crit_veh_per_m: f64,
}

impl Greenshields {
    pub fn flow_peak_density(&self) -> f64 {
        self.rho_crit_veh_per_m / 2.0
    }
}

/// Piecewise inverse-speed law: constant `1 / v_ff` below `rho_crit`, then
/// `1 / v_ff + c * (rho / rho_crit - 1)^p`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bpr {
    pub v_ff_mps: f64,
    pub rho_crit_veh_per_m: f64,
    pub c: f64,
    pub p: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GroundTruthFd {
    Greenshields(Greenshields),
    Bpr(Bpr),
}

impl GroundTruthFd {
    pub fn speed(&self, rho: f64) -> FdSpeed {
        match self {
            GroundTruthFd::Greenshields(g) => greenshields_speed(rho, g),
            GroundTruthFd::Bpr(b) => bpr_speed(rho, b),
        }
    }

    pub fn v_ff_mps(&self) -> f64 {
        match self {
            GroundTruthFd::Greenshields(g) => g.v_ff_mps,
            GroundTruthFd::Bpr(b) => b.v_ff_mps,
        }
    }

    pub fn rho_crit_veh_per_m(&self) -> f64 {
        match self {
            GroundTruthFd::Greenshields(g) => g.rho_crit_veh_per_m,
            GroundTruthFd::Bpr(b) => b.rho_crit_veh_per_m,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            GroundTruthFd::Greenshields(_) => "greenshields",
            GroundTruthFd::Bpr(_) => "bpr",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.v_ff_mps();
        if !(MIN_SPEED_MPS..=MAX_SPEED_MPS).contains(&v) || !(self.rho_crit_veh_per_m() > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "fundamental diagram out of range: v_ff {v}, rho_crit {}",
                self.rho_crit_veh_per_m()
            )));
        }
        if let GroundTruthFd::Bpr(b) = self {
            if !(b.c >= 0.0) || !(b.p >= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "BPR needs c >= 0 and p >= 1, got c {} p {}",
                    b.c, b.p
                )));
            }
        }
        Ok(())
    }
}

/// `v = v_ff * (1 - rho / rho_crit)`, floored at 1 m/s. Densities at or
/// beyond `rho_crit` return the floor with `floored` set.
pub fn greenshields_speed(rho: f64, fd: &Greenshields) -> FdSpeed {
    if rho >= fd.rho_crit_veh_per_m {
        return FdSpeed {
            mps: MIN_SPEED_MPS,
            floored: true,
        };
    }
    FdSpeed::floor(fd.v_ff_mps * (1.0 - rho / fd.rho_crit_veh_per_m))
}

pub fn bpr_speed(rho: f64, fd: &Bpr) -> FdSpeed {
    if rho < fd.rho_crit_veh_per_m {
        return FdSpeed::floor(fd.v_ff_mps);
    }
    let x = rho / fd.rho_crit_veh_per_m - 1.0;
    FdSpeed::floor(1.0 / (1.0 / fd.v_ff_mps + fd.c * x.powf(fd.p)))
}

/// Closed interval `[lo, hi]` sampled uniformly.
pub type Span = [f64; 2];

fn check_span(name: &str, s: Span) -> Result<()> {
    if !(s[0].is_finite() && s[1].is_finite() && s[0] <= s[1]) {
        return Err(Error::InvalidConfig(format!(
            "{name}: expected [lo, hi] with lo <= hi, got {s:?}"
        )));
    }
    Ok(())
}

fn uniform(rng: &mut impl Rng, s: Span) -> f64 {
    if s[0] == s[1] {
        s[0]
    } else {
        rng.random_range(s[0]..=s[1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandProfile {
    /// Mean off-peak density as a fraction of the segment's `rho_crit`.
    pub base_density_fraction: f64,
    /// Density fraction reached at peak hours.
    pub peak_density_fraction: f64,
    /// Inclusive `[first, last]` hour ranges of weekday peaks. The hour on
    /// either side of a range gets half the peak increment.
    #[serde(default = "default_peak_hours")]
    pub peak_hours: Vec<[u8; 2]>,
    /// Weekend density is `base * weekend_scale`, without peaks.
    pub weekend_scale: f64,
    /// Lognormal sigma applied to each hourly target density. Default 0.1.
    #[serde(default = "default_demand_noise")]
    pub demand_noise_sigma: f64,
    /// When set, target fractions are snapped to multiples of this step.
    #[serde(default)]
    pub density_grid_step: Option<f64>,
    /// Upper clamp on the target fraction. Default 0.85, which keeps
    /// linear-law speeds above the 1 m/s floor for `v_ff >= 7`.
    #[serde(default = "default_max_fraction")]
    pub max_density_fraction: f64,
}

fn default_peak_hours() -> Vec<[u8; 2]> {
    vec![[8, 9], [17, 18]]
}

fn default_demand_noise() -> f64 {
    0.1
}

fn default_max_fraction() -> f64 {
    0.85
}

impl DemandProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_density_fraction > 0.0 && self.base_density_fraction < 1.0) {
            return Err(Error::InvalidConfig(
                "base_density_fraction must be in (0, 1)".into(),
            ));
        }
        if !(self.peak_density_fraction >= self.base_density_fraction) {
            return Err(Error::InvalidConfig(
                "peak_density_fraction must be >= base_density_fraction".into(),
            ));
        }
        if !(self.weekend_scale > 0.0 && self.weekend_scale <= 1.0) {
            return Err(Error::InvalidConfig("weekend_scale must be in (0, 1]".into()));
        }
        if !(self.demand_noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("demand_noise_sigma must be >= 0".into()));
        }
        if let Some(step) = self.density_grid_step {
            if !(step > 0.0 && step <= self.max_density_fraction) {
                return Err(Error::InvalidConfig(
                    "density_grid_step must be in (0, max_density_fraction]".into(),
                ));
            }
        }
        if !(self.max_density_fraction > 0.0) {
            return Err(Error::InvalidConfig("max_density_fraction must be > 0".into()));
        }
        for r in &self.peak_hours {
            if r[0] > r[1] || r[1] > 23 {
                return Err(Error::InvalidConfig(format!("bad peak hour range {r:?}")));
            }
        }
        Ok(())
    }

    /// Share of the peak increment applied at `hour` on a weekday.
    pub fn peak_weight(&self, hour: u8) -> f64 {
        let mut w: f64 = 0.0;
        for r in &self.peak_hours {
            if (r[0]..=r[1]).contains(&hour) {
                return 1.0;
            }
            if hour + 1 == r[0] || hour == r[1] + 1 {
                w = w.max(0.5);
            }
        }
        w
    }

    /// Noise-free target density fraction.
    pub fn mean_fraction(&self, hour: u8, dow: u8) -> f64 {
        if dow >= 5 {
            self.base_density_fraction * self.weekend_scale
        } else {
            self.base_density_fraction
                + (self.peak_density_fraction - self.base_density_fraction) * self.peak_weight(hour)
        }
    }

    /// Clamps a fraction into `(0, max]` and snaps it to the grid if one is
    /// configured.
    pub fn settle(&self, f: f64) -> f64 {
        let max = self.max_density_fraction;
        match self.density_grid_step {
            Some(step) => {
                let top = (max / step + 1e-9).floor().max(1.0);
                let k = (f / step).round().clamp(1.0, top);
                k * step
            }
            None => f.clamp(1e-3 * max, max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeRanges {
    pub length_m: Span,
    /// Inclusive lane-count range.
    pub lanes: [u32; 2],
    pub lane_width_m: Span,
    pub speed_limit_mps: Span,
}

impl AttributeRanges {
    pub fn highway() -> Self {
        AttributeRanges {
            length_m: [200.0, 2000.0],
            lanes: [2, 5],
            lane_width_m: [3.4, 3.8],
            speed_limit_mps: [22.0, 33.0],
        }
    }

    pub fn arterial() -> Self {
        AttributeRanges {
            length_m: [50.0, 800.0],
            lanes: [1, 3],
            lane_width_m: [2.8, 3.5],
            speed_limit_mps: [11.0, 17.0],
        }
    }

    fn validate(&self, name: &str, v_ff_factor: Span) -> Result<()> {
        check_span(&format!("{name}.length_m"), self.length_m)?;
        check_span(&format!("{name}.lane_width_m"), self.lane_width_m)?;
        check_span(&format!("{name}.speed_limit_mps"), self.speed_limit_mps)?;
        if self.length_m[0] < MIN_SEGMENT_LENGTH_M {
            return Err(Error::InvalidConfig(format!(
                "{name}.length_m must start at >= {MIN_SEGMENT_LENGTH_M} m"
            )));
        }
        if self.lanes[0] < 1 || self.lanes[0] > self.lanes[1] {
            return Err(Error::InvalidConfig(format!("{name}.lanes must be [lo, hi], lo >= 1")));
        }
        if self.lane_width_m[0] < MIN_LANE_WIDTH_M {
            return Err(Error::InvalidConfig(format!(
                "{name}.lane_width_m must start at >= {MIN_LANE_WIDTH_M} m"
            )));
        }
        let lo = self.speed_limit_mps[0] * v_ff_factor[0];
        let hi = self.speed_limit_mps[1] * v_ff_factor[1];
        if lo < MIN_SPEED_MPS || hi > MAX_SPEED_MPS {
            return Err(Error::InvalidConfig(format!(
                "{name}: free-flow speeds would span [{lo}, {hi}] m/s, outside [1, 45]"
            )));
        }
        Ok(())
    }
}

/// Which fundamental diagram family a city's segments follow. Critical
/// densities scale with the segment's lane count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FdFamily {
    Greenshields {
        /// Zero-speed density per lane, veh/m.
        jam_density_per_lane: Span,
    },
    Bpr {
        crit_density_per_lane: Span,
        c: Span,
        p: Span,
    },
}

impl FdFamily {
    fn validate(&self) -> Result<()> {
        match self {
            FdFamily::Greenshields {
                jam_density_per_lane,
            } => {
                check_span("jam_density_per_lane", *jam_density_per_lane)?;
                if jam_density_per_lane[0] <= 0.0 {
                    return Err(Error::InvalidConfig("jam density must be > 0".into()));
                }
            }
            FdFamily::Bpr {
                crit_density_per_lane,
                c,
                p,
            } => {
                check_span("crit_density_per_lane", *crit_density_per_lane)?;
                check_span("c", *c)?;
                check_span("p", *p)?;
                if crit_density_per_lane[0] <= 0.0 || c[0] < 0.0 || p[0] < 1.0 {
                    return Err(Error::InvalidConfig(
                        "BPR family needs crit density > 0, c >= 0, p >= 1".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn default_v_ff_factor() -> Span {
    [0.9, 1.1]
}

fn default_start_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date")
}

fn default_true() -> bool {
    true
}

fn default_sparse_observations() -> usize {
    15
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CityConfig {
    pub name: String,
    pub seed: u64,
    pub n_highway: usize,
    pub n_arterial: usize,
    pub weeks: u32,
    /// First generated day. Default 2024-01-01 (a Monday).
    #[serde(default = "default_start_date")]
    pub start_date: NaiveDate,
    /// Fraction of vehicles observed, in `(0, 1]`.
    pub penetration: f64,
    /// Lognormal sigma of the multiplicative speed noise.
    pub speed_noise_sigma: f64,
    /// Poisson count noise on observed flow. Default on.
    #[serde(default = "default_true")]
    pub count_noise: bool,
    pub demand_profile: DemandProfile,
    pub highway: AttributeRanges,
    pub arterial: AttributeRanges,
    pub fd_family: FdFamily,
    /// `v_ff = speed_limit * U[lo, hi]`. Default `[0.9, 1.1]`.
    #[serde(default = "default_v_ff_factor")]
    pub v_ff_factor: Span,
    /// Number of segments (drawn at random) that only report their last
    /// `sparse_observations` intervals. Default 0.
    #[serde(default)]
    pub sparse_segments: usize,
    /// Default 15, i.e. the final day's 7:00-21:00 intervals.
    #[serde(default = "default_sparse_observations")]
    pub sparse_observations: usize,
}

impl CityConfig {
    /// A moderate-congestion city with the documented defaults.
    pub fn example(name: &str, seed: u64) -> Self {
        CityConfig {
            name: name.into(),
            seed,
            n_highway: 40,
            n_arterial: 40,
            weeks: 7,
            start_date: default_start_date(),
            penetration: 1.0,
            speed_noise_sigma: 0.05,
            count_noise: true,
            demand_profile: DemandProfile {
                base_density_fraction: 0.15,
                peak_density_fraction: 0.6,
                peak_hours: default_peak_hours(),
                weekend_scale: 0.8,
                demand_noise_sigma: default_demand_noise(),
                density_grid_step: Some(0.05),
                max_density_fraction: default_max_fraction(),
            },
            highway: AttributeRanges::highway(),
            arterial: AttributeRanges::arterial(),
            fd_family: FdFamily::Greenshields {
                jam_density_per_lane: [0.12, 0.14],
            },
            v_ff_factor: default_v_ff_factor(),
            sparse_segments: 0,
            sparse_observations: default_sparse_observations(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_highway + self.n_arterial < 1 {
            return Err(Error::InvalidConfig("city needs at least one segment".into()));
        }
        if self.weeks < 1 {
            return Err(Error::InvalidConfig("weeks must be >= 1".into()));
        }
        if !(self.penetration > 0.0 && self.penetration <= 1.0) {
            return Err(Error::InvalidConfig("penetration must be in (0, 1]".into()));
        }
        if !(self.speed_noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("speed_noise_sigma must be >= 0".into()));
        }
        check_span("v_ff_factor", self.v_ff_factor)?;
        if self.v_ff_factor[0] <= 0.0 {
            return Err(Error::InvalidConfig("v_ff_factor must be positive".into()));
        }
        if self.sparse_segments > self.n_highway + self.n_arterial {
            return Err(Error::InvalidConfig(
                "sparse_segments exceeds the number of segments".into(),
            ));
        }
        self.demand_profile.validate()?;
        if self.n_highway > 0 {
            self.highway.validate("highway", self.v_ff_factor)?;
        }
        if self.n_arterial > 0 {
            self.arterial.validate("arterial", self.v_ff_factor)?;
        }
        self.fd_family.validate()
    }

    pub fn n_segments(&self) -> usize {
        self.n_highway + self.n_arterial
    }
}

/// Generator output: the raw tables plus the hidden per-segment diagrams.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCity {
    pub tables: CityTables,
    pub truth: BTreeMap<String, GroundTruthFd>,
    /// Intervals where the true speed hit the 1 m/s floor.
    pub floored_speeds: usize,
}

// Substream layout: four streams per segment plus one city-level stream.
const STREAM_ATTRS: u64 = 0;
const STREAM_DEMAND: u64 = 1;
const STREAM_SPEED_NOISE: u64 = 2;
const STREAM_COUNT_NOISE: u64 = 3;
const STREAMS_PER_SEGMENT: u64 = 4;

fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn segment_stream(seed: u64, index: usize, kind: u64) -> ChaCha8Rng {
    substream(seed, index as u64 * STREAMS_PER_SEGMENT + kind)
}

fn city_stream(cfg: &CityConfig) -> ChaCha8Rng {
    substream(cfg.seed, cfg.n_segments() as u64 * STREAMS_PER_SEGMENT)
}

fn segment_id(city: &str, priority: RoadPriority, index: usize) -> String {
    let tag = match priority {
        RoadPriority::Highway => "hw",
        RoadPriority::Arterial => "art",
    };
    format!("{city}-{tag}-{index:04}")
}

fn draw_segment(cfg: &CityConfig, index: usize) -> (Segment, GroundTruthFd) {
    let (priority, ranges, local) = if index < cfg.n_highway {
        (RoadPriority::Highway, &cfg.highway, index)
    } else {
        (RoadPriority::Arterial, &cfg.arterial, index - cfg.n_highway)
    };
    let mut rng = segment_stream(cfg.seed, index, STREAM_ATTRS);
    let length_m = uniform(&mut rng, ranges.length_m);
    let lanes = rng.random_range(ranges.lanes[0]..=ranges.lanes[1]);
    let width_m = f64::from(lanes) * uniform(&mut rng, ranges.lane_width_m);
    let speed_limit_mps = uniform(&mut rng, ranges.speed_limit_mps);
    let v_ff_mps = (speed_limit_mps * uniform(&mut rng, cfg.v_ff_factor))
        .clamp(MIN_SPEED_MPS, MAX_SPEED_MPS);
    let lanes_f = f64::from(lanes);
    let fd = match &cfg.fd_family {
        FdFamily::Greenshields {
            jam_density_per_lane,
        } => GroundTruthFd::Greenshields(Greenshields {
            v_ff_mps,
            rho_crit_veh_per_m: lanes_f * uniform(&mut rng, *jam_density_per_lane),
        }),
        FdFamily::Bpr {
            crit_density_per_lane,
            c,
            p,
        } => GroundTruthFd::Bpr(Bpr {
            v_ff_mps,
            rho_crit_veh_per_m: lanes_f * uniform(&mut rng, *crit_density_per_lane),
            c: uniform(&mut rng, *c),
            p: uniform(&mut rng, *p),
        }),
    };
    let seg = Segment {
        id: segment_id(&cfg.name, priority, local),
        city: cfg.name.clone(),
        priority,
        length_m,
        lanes,
        width_m,
        speed_limit_mps,
    };
    (seg, fd)
}

fn generate_observations(
    cfg: &CityConfig,
    index: usize,
    seg: &Segment,
    fd: &GroundTruthFd,
) -> (Vec<Observation>, usize) {
    let mut demand_rng = segment_stream(cfg.seed, index, STREAM_DEMAND);
    let mut speed_rng = segment_stream(cfg.seed, index, STREAM_SPEED_NOISE);
    let mut count_rng = segment_stream(cfg.seed, index, STREAM_COUNT_NOISE);
    let profile = &cfg.demand_profile;
    let rho_crit = fd.rho_crit_veh_per_m();
    let mut floored = 0;
    let mut out = Vec::with_capacity(cfg.weeks as usize * 7 * 15);

    for day in 0..i64::from(cfg.weeks) * 7 {
        let date = cfg.start_date + Duration::days(day);
        let dow = day_of_week(date);
        for hour in FIRST_HOUR..=LAST_HOUR {
            let z: f64 = demand_rng.sample(StandardNormal);
            let fraction =
                profile.settle(profile.mean_fraction(hour, dow) * (profile.demand_noise_sigma * z).exp());
            let rho = fraction * rho_crit;
            let speed = fd.speed(rho);
            if speed.floored {
                floored += 1;
            }
            let total_flow = rho * speed.mps * 3600.0;
            let expected = cfg.penetration * total_flow;
            let flow = if cfg.count_noise && expected > 0.0 {
                Poisson::new(expected)
                    .map(|d| d.sample(&mut count_rng))
                    .unwrap_or(expected)
            } else {
                expected
            };
            let eps: f64 = speed_rng.sample(StandardNormal);
            let observed_speed = if cfg.speed_noise_sigma > 0.0 {
                (speed.mps * (cfg.speed_noise_sigma * eps).exp())
                    .clamp(GENERATED_MIN_SPEED_MPS, MAX_SPEED_MPS)
            } else {
                speed.mps
            };
            out.push(Observation {
                segment_id: seg.id.clone(),
                date,
                hour,
                dow,
                partial_flow_vph: flow,
                mean_speed_mps: observed_speed,
            });
        }
    }
    (out, floored)
}

pub fn generate_city(cfg: &CityConfig) -> Result<SyntheticCity> {
    cfg.validate()?;
    let n = cfg.n_segments();
    let sparse: Vec<bool> = {
        let mut flags = vec![false; n];
        if cfg.sparse_segments > 0 {
            let mut rng = city_stream(cfg);
            for i in sample(&mut rng, n, cfg.sparse_segments) {
                flags[i] = true;
            }
        }
        flags
    };

    let mut segments = Vec::with_capacity(n);
    let mut truth = BTreeMap::new();
    let mut observations = Vec::new();
    let mut floored_speeds = 0;
    for (index, &is_sparse) in sparse.iter().enumerate() {
        let (seg, fd) = draw_segment(cfg, index);
        fd.validate()?;
        let (mut obs, floored) = generate_observations(cfg, index, &seg, &fd);
        if is_sparse {
            let keep = cfg.sparse_observations.min(obs.len());
            obs.drain(..obs.len() - keep);
        }
        floored_speeds += floored;
        observations.extend(obs);
        truth.insert(seg.id.clone(), fd);
        segments.push(seg);
    }
    crate::domain::sort_observations(&mut observations);
    if floored_speeds > 0 {
        log::warn!(
            "{}: {floored_speeds} intervals hit the {MIN_SPEED_MPS} m/s speed floor",
            cfg.name
        );
    }
    Ok(SyntheticCity {
        tables: CityTables {
            segments,
            observations,
        },
        truth,
        floored_speeds,
    })
}
