//! Feature vectors for the pooled model and their normalization.
//!
//! The layout is frozen: models record a fingerprint of [`FEATURE_NAMES`]
//! and refuse to load against a different layout.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{Dataset, Observation, MIN_SPEED_MPS};
use crate::error::{Error, Result};

pub const N_FEATURES: usize = 12;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "length_m",
    "lanes",
    "width_m",
    "speed_limit_mps",
    "sin_hour",
    "cos_hour",
    "sin_dow",
    "cos_dow",
    "prev_flow_vph",
    "prev_speed_mps",
    "normalized_flow",
    "current_flow_vph",
];

/// Index of the raw current-flow column.
pub const CURRENT_FLOW: usize = 11;

/// Hex SHA-256 of the comma-joined feature names.
pub fn feature_fingerprint() -> String {
    hex::encode(Sha256::digest(FEATURE_NAMES.join(",").as_bytes()))
}

/// Std below this marks a dimension as constant.
pub const CONSTANT_STD: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; N_FEATURES]);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `(sin, cos)` of `2*pi*hour/24` and `2*pi*dow/7`.
pub fn temporal_encoding(hour: u8, dow: u8) -> Result<(f64, f64, f64, f64)> {
    if hour > 23 || dow > 6 {
        return Err(Error::Precondition(format!(
            "temporal encoding needs hour in 0..=23 and dow in 0..=6, got {hour} / {dow}"
        )));
    }
    let h = 2.0 * PI * f64::from(hour) / 24.0;
    let d = 2.0 * PI * f64::from(dow) / 7.0;
    Ok((h.sin(), h.cos(), d.sin(), d.cos()))
}

/// Carried alongside each example for evaluation joins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub segment_id: String,
    pub date: NaiveDate,
    pub hour: u8,
    pub dow: u8,
    pub partial_flow_vph: f64,
    pub mean_speed_mps: f64,
    pub speed_limit_mps: f64,
}

impl ExampleMeta {
    /// Observed density `q / (3600 v)`.
    pub fn density(&self) -> f64 {
        self.partial_flow_vph / (3600.0 * self.mean_speed_mps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub x: FeatureVector,
    /// `1 / mean_speed_mps`, strictly inside `(0, 1)`.
    pub label_inv_speed: f64,
    pub meta: ExampleMeta,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExampleSet {
    pub examples: Vec<TrainingExample>,
    pub dropped_no_predecessor: usize,
    pub dropped_speed_at_floor: usize,
}

/// One example per observation whose previous hour on the same segment and
/// calendar day is present. Observations at exactly 1 m/s are dropped so the
/// label stays strictly below 1.
pub fn build_examples(d: &Dataset) -> Result<ExampleSet> {
    let index: BTreeMap<(&str, NaiveDate, u8), &Observation> = d
        .observations
        .iter()
        .map(|o| ((o.segment_id.as_str(), o.date, o.hour), o))
        .collect();

    let mut set = ExampleSet::default();
    // Iterating the index instead of the observation list keeps the output
    // order independent of input order.
    for (&(seg_id, date, hour), obs) in &index {
        if !(obs.mean_speed_mps > MIN_SPEED_MPS) {
            set.dropped_speed_at_floor += 1;
            continue;
        }
        let prev = hour
            .checked_sub(1)
            .and_then(|h| index.get(&(seg_id, date, h)));
        let Some(prev) = prev else {
            set.dropped_no_predecessor += 1;
            continue;
        };
        let seg = d
            .segments
            .get(seg_id)
            .ok_or_else(|| Error::UnknownSegment(seg_id.to_string()))?;
        let (sh, ch, sd, cd) = temporal_encoding(hour, obs.dow)?;
        let lanes = f64::from(seg.lanes);
        let q = obs.partial_flow_vph;
        let x = FeatureVector([
            seg.length_m,
            lanes,
            seg.width_m,
            seg.speed_limit_mps,
            sh,
            ch,
            sd,
            cd,
            prev.partial_flow_vph,
            prev.mean_speed_mps,
            q / (seg.length_m * lanes),
            q,
        ]);
        set.examples.push(TrainingExample {
            x,
            label_inv_speed: 1.0 / obs.mean_speed_mps,
            meta: ExampleMeta {
                segment_id: seg_id.to_string(),
                date,
                hour,
                dow: obs.dow,
                partial_flow_vph: q,
                mean_speed_mps: obs.mean_speed_mps,
                speed_limit_mps: seg.speed_limit_mps,
            },
        });
    }
    if set.examples.is_empty() {
        log::warn!("{} {}: no training examples built", d.city, d.priority);
    }
    Ok(set)
}

/// Per-dimension population mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn is_constant(&self, dim: usize) -> bool {
        self.std[dim] < CONSTANT_STD
    }

    pub fn constant_dims(&self) -> Vec<usize> {
        (0..self.std.len()).filter(|&i| self.is_constant(i)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != N_FEATURES || self.std.len() != N_FEATURES {
            return Err(Error::LayoutMismatch(format!(
                "normalization stats have {} / {} dims, expected {N_FEATURES}",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.std.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Format("normalization std must be >= 0".into()));
        }
        Ok(())
    }

    /// Identity transform (mean 0, std 1).
    pub fn identity() -> Self {
        NormStats {
            mean: vec![0.0; N_FEATURES],
            std: vec![1.0; N_FEATURES],
        }
    }
}

pub fn fit_norm_stats(train: &[TrainingExample]) -> Result<NormStats> {
    if train.is_empty() {
        return Err(Error::EmptyDataset(
            "cannot fit normalization on zero examples".into(),
        ));
    }
    let n = train.len() as f64;
    let mut mean = vec![0.0; N_FEATURES];
    for ex in train {
        for (m, v) in mean.iter_mut().zip(ex.x.0) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; N_FEATURES];
    for ex in train {
        for ((s, v), m) in var.iter_mut().zip(ex.x.0).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
    Ok(NormStats { mean, std })
}

pub fn normalize_into(x: &[f64], s: &NormStats, out: &mut [f64]) {
    for i in 0..x.len() {
        out[i] = if s.is_constant(i) {
            x[i]
        } else {
            (x[i] - s.mean[i]) / s.std[i]
        };
    }
}

pub fn normalize(x: &FeatureVector, s: &NormStats) -> FeatureVector {
    let mut out = [0.0; N_FEATURES];
    normalize_into(&x.0, s, &mut out);
    FeatureVector(out)
}

pub fn denormalize(z: &FeatureVector, s: &NormStats) -> FeatureVector {
    let mut out = [0.0; N_FEATURES];
    for i in 0..N_FEATURES {
        out[i] = if s.is_constant(i) {
            z.0[i]
        } else {
            z.0[i] * s.std[i] + s.mean[i]
        };
    }
    FeatureVector(out)
}
