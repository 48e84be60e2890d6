use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use calib_core::env::{build_discrete_state_set, ContextElement, EnvKind, EnvironmentSpec, FeatureId, Normalizer, State, DEFAULT_STATE_COUNT};
use calib_core::experiments::{pointcloud, spread_levels, CloudSource, PointCloud, DISPLAY_CONTEXTS, SERVICE_CLOUD_POINTS};
use calib_core::learning::{sample_pairs, train_calibrated_feature, CalibratedFeature, Featurizer, Query, QueryDataset};
use calib_core::oracle::Label;
use calib_core::rng::{derive_seed, rng_from, tag};
use calib_core::tinynet::TrainHyper;
use calib_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::session::Event;

pub const QUERIES_PER_SESSION: usize = 100;
/// Label counts at which models are trained; 0 is the uncalibrated base feature.
pub const CHECKPOINTS: [usize; 4] = [0, 25, 50, 100];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub env: EnvKind,
    pub feature: FeatureId,
    /// Fixes the state pool split and the query list, so every session on
    /// the same feature sees the same queries.
    pub query_seed: u64,
    pub model_seed: u64,
    pub state_count: usize,
    pub cloud_points: usize,
    pub hyper: TrainHyper,
}

impl TeacherConfig {
    pub fn new(env: EnvKind, feature: FeatureId) -> Self {
        TeacherConfig {
            env,
            feature,
            query_seed: 17,
            model_seed: 23,
            state_count: DEFAULT_STATE_COUNT,
            cloud_points: SERVICE_CLOUD_POINTS,
            hyper: TrainHyper::calibrated_feature(),
        }
    }
}

/// What a checkpoint model computes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainedModel {
    Base,
    Calibrated(CalibratedFeature),
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub checkpoint: usize,
    pub model: TrainedModel,
    pub cloud: PointCloud,
    pub train_time: Duration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objects {
    pub human: [f64; 3],
    pub stove: [f64; 3],
    pub laptop: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextLabel {
    pub element: ContextElement,
    pub level: usize,
    pub levels: usize,
}

/// A state as sent to clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub ee_pos: [f64; 3],
    pub ee_rot: [f64; 9],
    pub objects: Objects,
    pub context: [f64; 2],
    pub discrete_context_labels: Vec<ContextLabel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryView {
    pub index: usize,
    pub state1: StateView,
    pub state2: StateView,
    pub prompt: String,
}

/// The fixed query list for one (environment, feature) and the training and
/// visualization that go with it. Shared by all sessions.
pub struct Teacher {
    pub config: TeacherConfig,
    pub fz: Featurizer,
    pub index: usize,
    queries: Vec<(State, State)>,
}

impl Teacher {
    pub fn new(config: TeacherConfig) -> Result<Self> {
        config.hyper.validate()?;
        let env = EnvironmentSpec::with_default_layout(config.env);
        let index = config
            .env
            .feature_index(config.feature)
            .ok_or_else(|| Error::UnknownFeature(format!("{} in {}", config.feature, config.env)))?;
        if config.cloud_points == 0 {
            return Err(Error::Config("cloud_points must be positive".into()));
        }
        let set = build_discrete_state_set(&env, config.state_count, config.query_seed)?;
        let norm = Normalizer::fit(&set.states, &env)?;
        let mut rng = rng_from(config.query_seed, &[tag("service-queries"), tag(config.env.name()), tag(config.feature.name())]);
        let queries = sample_pairs(&set.train_idx, QUERIES_PER_SESSION, &mut rng)
            .into_iter()
            .map(|(a, b)| (set.states[a], set.states[b]))
            .collect();
        Ok(Teacher {
            config,
            fz: Featurizer::new(env, norm),
            index,
            queries,
        })
    }

    pub fn query_count(&self) -> usize {
        self.queries.len()
    }

    pub fn query(&self, index: usize) -> Option<(State, State)> {
        self.queries.get(index).copied()
    }

    pub fn prompt(&self) -> String {
        let what = match self.config.feature {
            FeatureId::TableDist => "keeping the object close to the table",
            FeatureId::LaptopDist => "keeping the object away from the laptop",
            FeatureId::HumanDist => "keeping the object away from the person",
            FeatureId::PointAtHuman => "not pointing the object at the person",
            FeatureId::CupAngle => "keeping the cup upright",
            FeatureId::StoveDist => "keeping the object away from the stove",
        };
        format!("In which state is {what} better respected? If both respect it equally, choose equal.")
    }

    pub fn view(&self, s: &State) -> StateView {
        let discrete_context_labels = self
            .fz
            .env
            .contexts()
            .iter()
            .zip(s.context)
            .map(|(&element, c)| {
                let levels = element.discrete_levels();
                ContextLabel {
                    element,
                    level: (c * (levels - 1) as f64).round() as usize,
                    levels,
                }
            })
            .collect();
        StateView {
            ee_pos: s.ee_pos,
            ee_rot: s.ee_rot,
            objects: Objects {
                human: s.human_pos,
                stove: s.stove_pos,
                laptop: s.laptop_pos,
            },
            context: s.context,
            discrete_context_labels,
        }
    }

    pub fn query_view(&self, index: usize) -> Option<QueryView> {
        let (a, b) = self.query(index)?;
        Some(QueryView {
            index,
            state1: self.view(&a),
            state2: self.view(&b),
            prompt: self.prompt(),
        })
    }

    /// Trains the model for `checkpoint` on the first `checkpoint` labels.
    pub fn train(&self, checkpoint: usize, labels: &[Label]) -> Result<Checkpoint> {
        if !CHECKPOINTS.contains(&checkpoint) {
            return Err(Error::Config(format!("{checkpoint} is not a checkpoint")));
        }
        if labels.len() < checkpoint {
            return Err(Error::Config(format!("checkpoint {checkpoint} needs {checkpoint} labels, have {}", labels.len())));
        }
        let start = Instant::now();
        let model = if checkpoint == 0 {
            TrainedModel::Base
        } else {
            let queries = labels[..checkpoint]
                .iter()
                .zip(&self.queries)
                .map(|(&label, &(s1, s2))| Query { s1, s2, label })
                .collect();
            let seed = derive_seed(self.config.model_seed, &[tag("checkpoint"), checkpoint as u64]);
            let (cf, _) = train_calibrated_feature(self.config.feature, &QueryDataset::new(queries), &self.fz, &self.config.hyper, seed)?;
            TrainedModel::Calibrated(cf)
        };
        let cloud = self.cloud(&model)?;
        Ok(Checkpoint {
            checkpoint,
            model,
            cloud,
            train_time: start.elapsed(),
        })
    }

    pub fn cloud(&self, model: &TrainedModel) -> Result<PointCloud> {
        let source = match model {
            TrainedModel::Base => CloudSource::Base,
            TrainedModel::Calibrated(cf) => CloudSource::Calibrated(cf),
        };
        let seed = derive_seed(self.config.query_seed, &[tag("cloud")]);
        pointcloud(source, &self.fz, self.config.feature, self.config.cloud_points, seed)
    }

    /// Re-derives every requested checkpoint from a session's event log.
    pub fn replay(&self, events: &[Event]) -> Result<BTreeMap<usize, TrainedModel>> {
        let mut labels = Vec::new();
        let mut requested = vec![0];
        for e in events {
            match e {
                Event::Created { .. } => {}
                Event::Label { index, label } => {
                    if *index != labels.len() {
                        return Err(Error::Config(format!("label for query {index} out of order")));
                    }
                    labels.push(*label);
                }
                Event::Train { checkpoint } => requested.push(*checkpoint),
            }
        }
        requested
            .into_iter()
            .map(|c| Ok((c, self.train(c, &labels)?.model)))
            .collect()
    }
}

/// Indices into the cloud's context levels shown by the inspection slider.
pub fn display_levels(cloud: &PointCloud) -> Vec<usize> {
    spread_levels(cloud.context_values.len(), DISPLAY_CONTEXTS)
}

/// Snaps a slider position in `[0, 1]` to the nearest display context and
/// returns its position among the display contexts.
pub fn snap(cloud: &PointCloud, c: f64) -> usize {
    let levels = display_levels(cloud);
    let mut best = 0;
    for (k, &l) in levels.iter().enumerate() {
        if (cloud.context_values[l] - c).abs() < (cloud.context_values[levels[best]] - c).abs() {
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn teacher() -> Teacher {
        let mut cfg = TeacherConfig::new(EnvKind::Utensil, FeatureId::HumanDist);
        cfg.state_count = 2000;
        cfg.cloud_points = 200;
        Teacher::new(cfg).unwrap()
    }

    #[test]
    fn query_list_is_fixed_and_discrete() {
        let (a, b) = (teacher(), teacher());
        assert_eq!(a.query_count(), QUERIES_PER_SESSION);
        for i in 0..QUERIES_PER_SESSION {
            assert_eq!(a.query(i), b.query(i));
            let v = a.query_view(i).unwrap();
            for (l, c) in v.state1.discrete_context_labels.iter().zip(v.state1.context) {
                assert_eq!(l.level as f64 / (l.levels - 1) as f64, c);
            }
        }
        assert!(a.query_view(QUERIES_PER_SESSION).is_none());
    }

    #[test]
    fn checkpoints_need_their_labels() {
        let t = teacher();
        let labels = vec![Label::First; 30];
        assert!(t.train(50, &labels).is_err());
        assert!(t.train(30, &labels).is_err());
        assert!(matches!(t.train(0, &[]).unwrap().model, TrainedModel::Base));
        assert!(matches!(t.train(25, &labels).unwrap().model, TrainedModel::Calibrated(_)));
    }

    #[test]
    fn slider_snaps_to_four_contexts() {
        let t = teacher();
        let cp = t.train(0, &[]).unwrap();
        let hits: std::collections::BTreeSet<usize> = (0..=1000).map(|k| snap(&cp.cloud, k as f64 / 1000.0)).collect();
        assert_eq!(hits.len(), 4);
        assert_eq!(display_levels(&cp.cloud), vec![0, 1, 2, 3]);
    }
}
