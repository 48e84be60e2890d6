use serde::{Deserialize, Serialize};

use crate::env::{sample_state, ContextElement, FeatureId, State};
use crate::error::{Error, Result};
use crate::learning::{CalibratedFeature, Featurizer};
use crate::oracle::GroundTruth;
use crate::rng::{rng_from, tag};

pub const DEFAULT_CLOUD_POINTS: usize = 8000;
pub const SERVICE_CLOUD_POINTS: usize = 5000;
pub const DISPLAY_CONTEXTS: usize = 4;

/// What a point cloud shows.
#[derive(Clone, Copy, Debug)]
pub enum CloudSource<'a> {
    /// The normalized base feature.
    Base,
    Calibrated(&'a CalibratedFeature),
    GroundTruth(&'a GroundTruth),
}

/// Feature values at fixed EE poses for every discrete value of the
/// feature's affecting context, normalized jointly over all of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub feature: FeatureId,
    pub context: ContextElement,
    pub context_values: Vec<f64>,
    pub positions: Vec<[f64; 3]>,
    /// `values[k][p]`: point `p` under `context_values[k]`, in `[0, 1]`.
    pub values: Vec<Vec<f64>>,
}

impl PointCloud {
    /// Index of the context value closest to `c`.
    pub fn nearest_context(&self, c: f64) -> usize {
        nearest(&self.context_values, c)
    }
}

fn nearest(values: &[f64], c: f64) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if (v - c).abs() < (values[best] - c).abs() {
            best = k;
        }
    }
    best
}

/// Indices of `count` roughly evenly spread levels out of `levels`.
pub fn spread_levels(levels: usize, count: usize) -> Vec<usize> {
    if count >= levels {
        return (0..levels).collect();
    }
    if count == 1 {
        return vec![0];
    }
    (0..count).map(|k| ((k * (levels - 1)) as f64 / (count - 1) as f64).round() as usize).collect()
}

/// Evaluates `source` for `feature` at `n_points` sampled EE poses under
/// every discrete level of the affecting context, with the other context
/// held at zero.
pub fn pointcloud(source: CloudSource<'_>, fz: &Featurizer, feature: FeatureId, n_points: usize, seed: u64) -> Result<PointCloud> {
    let env = &fz.env;
    let index = env
        .kind
        .feature_index(feature)
        .ok_or_else(|| Error::UnknownFeature(format!("{feature} in {}", env.kind)))?;
    if n_points == 0 {
        return Err(Error::EmptyStateSet);
    }
    let ctx = env.kind.affecting_context(feature);
    let element = env.contexts()[ctx];
    let context_values = element.discrete_values();
    let mut rng = rng_from(seed, &[tag("pointcloud"), tag(env.kind.name())]);
    let poses: Vec<State> = (0..n_points).map(|_| sample_state(env, &mut rng)).collect();
    let mut raw = Vec::with_capacity(context_values.len());
    for &c in &context_values {
        let states: Vec<State> = poses
            .iter()
            .map(|s| {
                let mut context = [0.0; 2];
                context[ctx] = c;
                env.state_at(s.ee_pos, s.ee_rot, context)
            })
            .collect();
        let vals = match source {
            CloudSource::Base => states.iter().map(|s| Ok(fz.base_values(s)?[index])).collect::<Result<Vec<_>>>()?,
            CloudSource::Calibrated(cf) => {
                if cf.index != index {
                    return Err(Error::UnknownFeature(format!("model is for {}, not {feature}", cf.base_id)));
                }
                states.iter().map(|s| cf.raw(fz, s)).collect::<Result<Vec<_>>>()?
            }
            CloudSource::GroundTruth(gt) => states.iter().map(|s| gt.feature_value(index, s)).collect::<Result<Vec<_>>>()?,
        };
        raw.push(vals);
    }
    let lo = raw.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let values = raw
        .into_iter()
        .map(|v| v.into_iter().map(|x| if span > 0.0 { (x - lo) / span } else { 0.0 }).collect())
        .collect();
    Ok(PointCloud {
        feature,
        context: element,
        context_values,
        positions: poses.iter().map(|s| s.ee_pos).collect(),
        values,
    })
}
