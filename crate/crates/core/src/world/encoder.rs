//! Deterministic hand-built state features, the frozen representation shared
//! by the prior, the critic and the policy.

use serde::{Deserialize, Serialize};

use super::{wrap_angle, SceneContext};
use crate::config::{content_hash, WorldConfig};
use crate::error::{Error, Result};

pub const FEATURE_DIM: usize = 32;
pub const ENCODED_AGENTS: usize = 4;
const AGENT_FEATURES: usize = 4;
const AGENT_BASE: usize = FEATURE_DIM - ENCODED_AGENTS * AGENT_FEATURES;

const GOAL_CAP: f64 = 200.0;
const LEAD_CAP: f64 = 80.0;

/// Per-coordinate affine normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub const MIN_STD: f64 = 1e-6;

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Mean and population standard deviation of each coordinate; coordinates
    /// with spread below [`Normalizer::MIN_STD`] get unit scale.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        for r in &rows {
            if r.len() != dim {
                return Err(Error::Shape(format!("row of width {} in {dim}-wide fit", r.len())));
            }
            n += 1;
            for (s, x) in sum.iter_mut().zip(r.iter()) {
                *s += x;
            }
        }
        if n == 0 {
            return Err(Error::InvalidInput("cannot fit normalizer on zero rows".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        for r in &rows {
            for ((q, x), m) in sq.iter_mut().zip(r.iter()).zip(&mean) {
                *q += (x - m) * (x - m);
            }
        }
        let std = sq
            .iter()
            .map(|q| {
                let s = (q / n as f64).sqrt();
                if s < Self::MIN_STD { 1.0 } else { s }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    pub fn id(&self) -> String {
        content_hash(self)
    }
}

/// Normalized feature vector of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEncoding {
    pub features: Vec<f64>,
    /// Identifier of the normalizer that produced `features`.
    pub normalization: String,
}

/// Raw (unnormalized) scene features.
///
/// Layout: ego speed, accel, lateral offset, heading error, distance to goal,
/// speed-limit gap, speed limit, left and right corridor margins, yaw rate,
/// three past speeds, oldest lateral offset, in-lane lead gap and closing
/// speed, then for the nearest agents (valid, longitudinal gap, lateral gap,
/// speed delta) in the ego frame. Empty agent slots are zero.
pub fn raw_features(scene: &SceneContext, world: &WorldConfig) -> Result<Vec<f64>> {
    if scene.centerline.arc().len() < 2 {
        return Err(Error::InvalidInput("scene has an empty centerline".into()));
    }
    scene.validate(world)?;
    let cl = &scene.centerline;
    let hist = &scene.ego_history;
    let ego = scene.ego();
    let ef = cl.project(ego.x, ego.y);
    let n = hist.len();

    let mut f = vec![0.0; FEATURE_DIM];
    f[0] = ego.speed;
    f[1] = ego.accel;
    f[2] = ef.lateral;
    f[3] = wrap_angle(ego.heading - ef.tangent);
    f[4] = (scene.goal_arc_length - ef.s).clamp(0.0, GOAL_CAP);
    f[5] = scene.speed_limit - ego.speed;
    f[6] = scene.speed_limit;
    f[7] = scene.corridor_half_width - ef.lateral;
    f[8] = scene.corridor_half_width + ef.lateral;
    f[9] = wrap_angle(hist[n - 1].heading - hist[n - 2].heading) / world.dt;
    for j in 0..3 {
        f[10 + j] = hist[n.saturating_sub(2 + j)].speed;
    }
    let oldest = &hist[0];
    f[13] = cl.project(oldest.x, oldest.y).lateral;

    let ego_pose = ego.pose();
    let lead = scene
        .agents
        .iter()
        .filter_map(|a| {
            let af = cl.project(a.state.x, a.state.y);
            let overlap = (af.lateral - ef.lateral).abs() < a.half_width + world.ego_half_width + 0.5;
            (overlap && af.s > ef.s).then_some((af.s - ef.s - world.ego_half_length - a.half_length, a.state.speed))
        })
        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    match lead {
        Some((gap, v)) => {
            f[14] = gap.min(LEAD_CAP);
            f[15] = ego.speed - v;
        }
        None => f[14] = LEAD_CAP,
    }

    let mut order: Vec<(f64, usize)> = scene
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| ((a.state.x - ego.x).hypot(a.state.y - ego.y), i))
        .collect();
    order.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for (slot, (_, i)) in order.iter().take(ENCODED_AGENTS).enumerate() {
        let a = &scene.agents[*i];
        let rel = ego_pose.to_local(&a.state.pose());
        let base = AGENT_BASE + slot * AGENT_FEATURES;
        f[base] = 1.0;
        f[base + 1] = rel.x;
        f[base + 2] = rel.y;
        f[base + 3] = a.state.speed - ego.speed;
    }
    Ok(f)
}

/// Encodes and normalizes a scene.
pub fn encode_state(scene: &SceneContext, world: &WorldConfig, normalizer: &Normalizer) -> Result<StateEncoding> {
    if normalizer.dim() != FEATURE_DIM {
        return Err(Error::Shape(format!(
            "state normalizer has {} entries, encoder emits {FEATURE_DIM}",
            normalizer.dim()
        )));
    }
    let raw = raw_features(scene, world)?;
    Ok(StateEncoding {
        features: normalizer.normalize(&raw),
        normalization: normalizer.id(),
    })
}

/// Index of the first agent slot's longitudinal-gap feature.
pub const FIRST_AGENT_GAP: usize = AGENT_BASE + 1;
/// Index of the ego lateral-offset feature.
pub const LATERAL_OFFSET: usize = 2;
/// Index of the ego heading-error feature.
pub const HEADING_ERROR: usize = 3;
