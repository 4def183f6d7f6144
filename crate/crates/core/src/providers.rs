//! Provider boundary for the two perception components, with deterministic
//! synthetic oracles built from gridworld ground truth.
//!
//! The relevance oracle scores each image column by whether its ray endpoint
//! is a surface the goal camera sees, decayed by that surface's distance to
//! the goal camera — so the map signal peaks around the goal viewpoint. The
//! registration oracle hides a random Sim(3) canonical frame, corrupts poses
//! with noise shrinking as the goal's visibility overlap grows, and derives
//! raw confidence scores from visibility overlap, which ties the confidence
//! gate to registration quality the same way photometric overlap does for
//! the real models.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bev::{column_bearing_deg, ProjectionParams, RelevanceImage};
use crate::cascade::{Keyframe, RegistrationResult, Registrar};
use crate::geometry::{Pose, Pose2D, Sim3Transform};
use crate::ray::walk_ray;
use crate::sim::{mix_seed, GridWorld};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProviderError {
    #[error("pose lies outside the world")]
    PoseOutsideWorld,
    #[error("no frames supplied")]
    EmptyFrames,
    #[error("replay trace exhausted at call {call}")]
    ReplayExhausted { call: u64 },
    #[error("replay input mismatch at call {call}")]
    ReplayMismatch { call: u64 },
    #[error("invalid provider spec: {0}")]
    InvalidSpec(String),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderMode {
    #[default]
    Synthetic,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelevanceProviderSpec {
    pub mode: ProviderMode,
    /// Std of zero-mean Gaussian noise added per column.
    pub noise_std: f64,
    /// Exponential decay range of the relevance signal, meters.
    pub falloff_range_m: f64,
    pub seed: u64,
    pub replay_path: Option<PathBuf>,
    /// When set (synthetic mode), every call is appended to this trace.
    pub record_path: Option<PathBuf>,
}

impl Default for RelevanceProviderSpec {
    fn default() -> Self {
        Self {
            mode: ProviderMode::Synthetic,
            noise_std: 0.0,
            falloff_range_m: 0.5,
            seed: 0,
            replay_path: None,
            record_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationProviderSpec {
    pub mode: ProviderMode,
    /// Canonical position noise at zero goal overlap, meters.
    pub pose_noise_std_m: f64,
    /// Canonical rotation noise at zero goal overlap, degrees.
    pub rot_noise_std_deg: f64,
    /// Hidden canonical scale is drawn uniformly from this range.
    pub canonical_scale_range: (f64, f64),
    /// Curvature of the monotone overlap-to-score maps.
    pub overlap_sharpness: f64,
    pub seed: u64,
    pub replay_path: Option<PathBuf>,
    pub record_path: Option<PathBuf>,
}

impl Default for RegistrationProviderSpec {
    fn default() -> Self {
        Self {
            mode: ProviderMode::Synthetic,
            pose_noise_std_m: 0.0,
            rot_noise_std_deg: 0.0,
            canonical_scale_range: (0.25, 4.0),
            overlap_sharpness: 2.0,
            seed: 0,
            replay_path: None,
            record_path: None,
        }
    }
}

impl RegistrationProviderSpec {
    pub fn validate(&self) -> Result<(), ProviderError> {
        let (lo, hi) = self.canonical_scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(ProviderError::InvalidSpec(
                "canonical scale range must satisfy 0 < low <= high".into(),
            ));
        }
        if self.pose_noise_std_m < 0.0 || self.rot_noise_std_deg < 0.0 {
            return Err(ProviderError::InvalidSpec("negative noise std".into()));
        }
        if self.overlap_sharpness <= 0.0 {
            return Err(ProviderError::InvalidSpec(
                "overlap sharpness must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Fraction of the cells visible from `b` that are also visible from `a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisibilityOverlap(f64);

impl VisibilityOverlap {
    pub fn value(&self) -> f64 {
        self.0
    }
}

/// Raycast visibility mask: every cell any frustum ray passes through, plus
/// the obstacle cell each ray terminates on.
fn visible_mask(world: &GridWorld, pose: &Pose2D<f64>, frustum: &ProjectionParams<f64>) -> Vec<bool> {
    let mut mask = vec![false; world.rows() * world.cols()];
    for j in 0..frustum.columns {
        let bearing = pose.yaw_deg + column_bearing_deg(j, frustum.columns, frustum.fov_deg);
        walk_ray(
            pose.x,
            pose.y,
            bearing,
            frustum.max_range_m,
            world.cell_size(),
            world.rows(),
            world.cols(),
            |r, c, _| {
                mask[r * world.cols() + c] = true;
                !world.is_obstacle(r, c)
            },
        );
    }
    mask
}

/// Visibility overlap of two poses: `|vis(a) ∩ vis(b)| / |vis(b)|`.
pub fn visibility_overlap(
    pose_a: &Pose2D<f64>,
    pose_b: &Pose2D<f64>,
    world: &GridWorld,
    frustum: &ProjectionParams<f64>,
) -> VisibilityOverlap {
    let va = visible_mask(world, pose_a, frustum);
    let vb = visible_mask(world, pose_b, frustum);
    let mut inter = 0usize;
    let mut denom = 0usize;
    for (a, b) in va.iter().zip(vb.iter()) {
        if *b {
            denom += 1;
            if *a {
                inter += 1;
            }
        }
    }
    if denom == 0 {
        VisibilityOverlap(0.0)
    } else {
        VisibilityOverlap(inter as f64 / denom as f64)
    }
}

/// Per-step relevance source.
pub trait RelevanceProvider {
    fn relevance(
        &mut self,
        agent: &Pose2D<f64>,
        step: u64,
    ) -> Result<RelevanceImage<f64>, ProviderError>;
}

/// Ground-truth relevance oracle over the gridworld.
pub struct SyntheticRelevance {
    world: Arc<GridWorld>,
    goal: Pose2D<f64>,
    frustum: ProjectionParams<f64>,
    spec: RelevanceProviderSpec,
    goal_visible: Vec<bool>,
}

impl SyntheticRelevance {
    pub fn new(
        world: Arc<GridWorld>,
        goal: Pose2D<f64>,
        frustum: ProjectionParams<f64>,
        spec: RelevanceProviderSpec,
    ) -> Result<Self, ProviderError> {
        if world.world_to_cell(goal.x, goal.y).is_none() {
            return Err(ProviderError::PoseOutsideWorld);
        }
        if spec.falloff_range_m <= 0.0 || spec.noise_std < 0.0 {
            return Err(ProviderError::InvalidSpec(
                "falloff must be positive, noise std nonnegative".into(),
            ));
        }
        let goal_visible = visible_mask(&world, &goal, &frustum);
        Ok(Self {
            world,
            goal,
            frustum,
            spec,
            goal_visible,
        })
    }
}

impl RelevanceProvider for SyntheticRelevance {
    fn relevance(
        &mut self,
        agent: &Pose2D<f64>,
        step: u64,
    ) -> Result<RelevanceImage<f64>, ProviderError> {
        if self.world.world_to_cell(agent.x, agent.y).is_none() {
            return Err(ProviderError::PoseOutsideWorld);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.spec.seed, step));
        let noise = (self.spec.noise_std > 0.0)
            .then(|| Normal::new(0.0, self.spec.noise_std).expect("valid std"));

        let cols = self.world.cols();
        let mut values = Vec::with_capacity(self.frustum.columns);
        for j in 0..self.frustum.columns {
            let bearing =
                agent.yaw_deg + column_bearing_deg(j, self.frustum.columns, self.frustum.fov_deg);
            let mut endpoint: Option<(usize, usize)> = None;
            walk_ray(
                agent.x,
                agent.y,
                bearing,
                self.frustum.max_range_m,
                self.world.cell_size(),
                self.world.rows(),
                self.world.cols(),
                |r, c, _| {
                    if self.world.is_obstacle(r, c) {
                        endpoint = Some((r, c));
                        false
                    } else {
                        true
                    }
                },
            );
            let base = match endpoint {
                Some((r, c)) if self.goal_visible[r * cols + c] => {
                    let (x, y) = self.world.cell_center(r, c);
                    let dist = ((x - self.goal.x).powi(2) + (y - self.goal.y).powi(2)).sqrt();
                    (-dist / self.spec.falloff_range_m).exp()
                }
                _ => 0.0,
            };
            let v = match &noise {
                Some(n) => (base + n.sample(&mut rng)).clamp(-1.0, 1.0),
                None => base.clamp(-1.0, 1.0),
            };
            values.push(v);
        }
        RelevanceImage::new(1, self.frustum.columns, values)
            .map_err(|e| ProviderError::InvalidSpec(e.to_string()))
    }
}

/// Ground-truth registration oracle over the gridworld.
pub struct SyntheticRegistration {
    world: Arc<GridWorld>,
    goal_pose3: Pose<f64>,
    frustum: ProjectionParams<f64>,
    spec: RegistrationProviderSpec,
    goal_visible: Vec<bool>,
    vis_cache: HashMap<u64, Vec<bool>>,
}

impl SyntheticRegistration {
    pub fn new(
        world: Arc<GridWorld>,
        goal: Pose2D<f64>,
        frustum: ProjectionParams<f64>,
        spec: RegistrationProviderSpec,
    ) -> Result<Self, ProviderError> {
        spec.validate()?;
        if world.world_to_cell(goal.x, goal.y).is_none() {
            return Err(ProviderError::PoseOutsideWorld);
        }
        let goal_visible = visible_mask(&world, &goal, &frustum);
        Ok(Self {
            world,
            goal_pose3: Pose::from_pose2d(&goal),
            frustum,
            spec,
            goal_visible,
            vis_cache: HashMap::new(),
        })
    }

    fn frame_mask(&mut self, frame: &Keyframe<f64>) -> Vec<bool> {
        if let Some(mask) = self.vis_cache.get(&frame.id) {
            return mask.clone();
        }
        let mask = visible_mask(&self.world, &frame.pose.to_pose2d(), &self.frustum);
        self.vis_cache.insert(frame.id, mask.clone());
        mask
    }

    fn overlap_with_goal(&mut self, frame: &Keyframe<f64>) -> f64 {
        let fm = self.frame_mask(frame);
        let denom = self.goal_visible.iter().filter(|&&b| b).count();
        if denom == 0 {
            return 0.0;
        }
        let inter = fm
            .iter()
            .zip(self.goal_visible.iter())
            .filter(|(a, b)| **a && **b)
            .count();
        inter as f64 / denom as f64
    }

    fn overlap_between(&mut self, a: &Keyframe<f64>, b: &Keyframe<f64>) -> f64 {
        let ma = self.frame_mask(a);
        let mb = self.frame_mask(b);
        let denom = mb.iter().filter(|&&x| x).count();
        if denom == 0 {
            return 0.0;
        }
        let inter = ma.iter().zip(mb.iter()).filter(|(x, y)| **x && **y).count();
        inter as f64 / denom as f64
    }
}

fn attention_map(overlap: f64, sharpness: f64) -> f64 {
    overlap.powf(sharpness)
}

fn feature_map(overlap: f64, sharpness: f64) -> f64 {
    (sharpness * overlap).tanh() / sharpness.tanh()
}

impl Registrar<f64> for SyntheticRegistration {
    fn register(
        &mut self,
        frames: &[&Keyframe<f64>],
        step: u64,
    ) -> Result<RegistrationResult<f64>, ProviderError> {
        if frames.is_empty() {
            return Err(ProviderError::EmptyFrames);
        }
        let last_id = frames.last().unwrap().id;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
            self.spec.seed,
            mix_seed(step, mix_seed(last_id, frames.len() as u64)),
        ));

        // hidden canonical frame, fresh per forward pass
        let (lo, hi) = self.spec.canonical_scale_range;
        let scale = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let axis = Vector3::new(
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        );
        let rotation = if axis.norm() < 1e-9 {
            Rotation3::identity()
        } else {
            Rotation3::from_axis_angle(
                &Unit::new_normalize(axis),
                rng.random::<f64>() * std::f64::consts::TAU,
            )
        };
        let translation = Vector3::new(
            (rng.random::<f64>() - 0.5) * 10.0,
            (rng.random::<f64>() - 0.5) * 10.0,
            (rng.random::<f64>() - 0.5) * 10.0,
        );
        let hidden = Sim3Transform::new(scale, rotation, translation);

        let overlap_goal = frames
            .iter()
            .map(|f| self.overlap_with_goal(f))
            .sum::<f64>()
            / frames.len() as f64;

        let pos_std = self.spec.pose_noise_std_m * (1.0 - overlap_goal);
        let rot_std = self.spec.rot_noise_std_deg * (1.0 - overlap_goal);
        let pos_noise = (pos_std > 0.0).then(|| Normal::new(0.0, pos_std).expect("valid std"));
        let rot_noise = (rot_std > 0.0).then(|| Normal::new(0.0, rot_std).expect("valid std"));

        let corrupt = |pose: &Pose<f64>, rng: &mut ChaCha8Rng| -> Pose<f64> {
            let mut out = hidden.apply_pose(pose);
            if let Some(n) = &pos_noise {
                out.position +=
                    Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng));
            }
            if let Some(n) = &rot_noise {
                let axis = Vector3::new(
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                );
                if axis.norm() > 1e-9 {
                    let angle: f64 = n.sample(rng);
                    out.rotation = Rotation3::from_axis_angle(
                        &Unit::new_normalize(axis),
                        angle.to_radians(),
                    ) * out.rotation;
                }
            }
            out
        };

        let mut canonical: Vec<Pose<f64>> = Vec::with_capacity(frames.len() + 1);
        for f in frames {
            canonical.push(corrupt(&f.pose, &mut rng));
        }
        canonical.push(corrupt(&self.goal_pose3.clone(), &mut rng));

        let reference = frames[0];
        let sharp = self.spec.overlap_sharpness;
        let mut raw_attention = Vec::with_capacity(frames.len() + 1);
        let mut raw_feature = Vec::with_capacity(frames.len() + 1);
        for f in frames {
            let o = self.overlap_between(f, reference);
            raw_attention.push(attention_map(o, sharp));
            raw_feature.push(feature_map(o, sharp));
        }
        raw_attention.push(attention_map(overlap_goal, sharp));
        raw_feature.push(feature_map(overlap_goal, sharp));

        Ok(RegistrationResult {
            canonical_poses: canonical,
            raw_attention,
            raw_feature,
        })
    }
}

// ── Replay / recording ────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct ReplayRecord<O> {
    call: u64,
    input: String,
    output: O,
}

fn hash_relevance_input(agent: &Pose2D<f64>, step: u64) -> String {
    let mut h = Sha256::new();
    h.update(b"relevance");
    h.update(step.to_le_bytes());
    h.update(agent.x.to_bits().to_le_bytes());
    h.update(agent.y.to_bits().to_le_bytes());
    h.update(agent.yaw_deg.to_bits().to_le_bytes());
    hex_digest(h)
}

fn hash_registration_input(frames: &[&Keyframe<f64>], step: u64) -> String {
    let mut h = Sha256::new();
    h.update(b"registration");
    h.update(step.to_le_bytes());
    for f in frames {
        h.update(f.id.to_le_bytes());
        for v in f.pose.position.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
        for v in f.pose.rotation.matrix().iter() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex_digest(h)
}

fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

struct ReplayTape<O> {
    records: std::vec::IntoIter<ReplayRecord<O>>,
    call: u64,
}

impl<O: DeserializeOwned> ReplayTape<O> {
    fn load(path: &Path) -> Result<Self, ProviderError> {
        let file = File::open(path).map_err(|e| ProviderError::Io(e.to_string()))?;
        let mut records = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| ProviderError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ReplayRecord<O> =
                serde_json::from_str(&line).map_err(|e| ProviderError::Io(e.to_string()))?;
            records.push(rec);
        }
        Ok(Self {
            records: records.into_iter(),
            call: 0,
        })
    }

    fn next(&mut self, input_hash: &str) -> Result<O, ProviderError> {
        let call = self.call;
        self.call += 1;
        let rec = self
            .records
            .next()
            .ok_or(ProviderError::ReplayExhausted { call })?;
        if rec.input != input_hash {
            return Err(ProviderError::ReplayMismatch { call });
        }
        Ok(rec.output)
    }
}

struct TraceWriter {
    out: BufWriter<File>,
    call: u64,
}

impl TraceWriter {
    fn create(path: &Path) -> Result<Self, ProviderError> {
        let file = File::create(path).map_err(|e| ProviderError::Io(e.to_string()))?;
        Ok(Self {
            out: BufWriter::new(file),
            call: 0,
        })
    }

    fn write<O: Serialize>(&mut self, input: String, output: &O) -> Result<(), ProviderError> {
        let rec = ReplayRecord {
            call: self.call,
            input,
            output,
        };
        serde_json::to_writer(&mut self.out, &rec).map_err(|e| ProviderError::Io(e.to_string()))?;
        self.out
            .write_all(b"\n")
            .map_err(|e| ProviderError::Io(e.to_string()))?;
        self.out
            .flush()
            .map_err(|e| ProviderError::Io(e.to_string()))?;
        self.call += 1;
        Ok(())
    }
}

enum RelevanceBackend {
    Synthetic(SyntheticRelevance),
    Replay(ReplayTape<RelevanceImage<f64>>),
}

/// Relevance provider assembled from a spec (synthetic, optionally recorded,
/// or replayed from a trace).
pub struct BuiltRelevanceProvider {
    backend: RelevanceBackend,
    recorder: Option<TraceWriter>,
}

impl RelevanceProvider for BuiltRelevanceProvider {
    fn relevance(
        &mut self,
        agent: &Pose2D<f64>,
        step: u64,
    ) -> Result<RelevanceImage<f64>, ProviderError> {
        let hash = hash_relevance_input(agent, step);
        let out = match &mut self.backend {
            RelevanceBackend::Synthetic(s) => s.relevance(agent, step)?,
            RelevanceBackend::Replay(tape) => tape.next(&hash)?,
        };
        if let Some(rec) = &mut self.recorder {
            rec.write(hash, &out)?;
        }
        Ok(out)
    }
}

enum RegistrationBackend {
    Synthetic(SyntheticRegistration),
    Replay(ReplayTape<RegistrationResult<f64>>),
}

/// Registration provider assembled from a spec.
pub struct BuiltRegistrationProvider {
    backend: RegistrationBackend,
    recorder: Option<TraceWriter>,
}

impl Registrar<f64> for BuiltRegistrationProvider {
    fn register(
        &mut self,
        frames: &[&Keyframe<f64>],
        step: u64,
    ) -> Result<RegistrationResult<f64>, ProviderError> {
        if frames.is_empty() {
            return Err(ProviderError::EmptyFrames);
        }
        let hash = hash_registration_input(frames, step);
        let out = match &mut self.backend {
            RegistrationBackend::Synthetic(s) => s.register(frames, step)?,
            RegistrationBackend::Replay(tape) => tape.next(&hash)?,
        };
        if let Some(rec) = &mut self.recorder {
            rec.write(hash, &out)?;
        }
        Ok(out)
    }
}

pub fn build_relevance_provider(
    spec: &RelevanceProviderSpec,
    world: Arc<GridWorld>,
    goal: Pose2D<f64>,
    frustum: &ProjectionParams<f64>,
) -> Result<BuiltRelevanceProvider, ProviderError> {
    let backend = match spec.mode {
        ProviderMode::Synthetic => RelevanceBackend::Synthetic(SyntheticRelevance::new(
            world,
            goal,
            *frustum,
            spec.clone(),
        )?),
        ProviderMode::Replay => {
            let path = spec
                .replay_path
                .as_ref()
                .ok_or_else(|| ProviderError::InvalidSpec("replay mode needs a path".into()))?;
            RelevanceBackend::Replay(ReplayTape::load(path)?)
        }
    };
    let recorder = spec
        .record_path
        .as_ref()
        .map(|p| TraceWriter::create(p))
        .transpose()?;
    Ok(BuiltRelevanceProvider { backend, recorder })
}

pub fn build_registration_provider(
    spec: &RegistrationProviderSpec,
    world: Arc<GridWorld>,
    goal: Pose2D<f64>,
    frustum: &ProjectionParams<f64>,
) -> Result<BuiltRegistrationProvider, ProviderError> {
    let backend = match spec.mode {
        ProviderMode::Synthetic => RegistrationBackend::Synthetic(SyntheticRegistration::new(
            world,
            goal,
            *frustum,
            spec.clone(),
        )?),
        ProviderMode::Replay => {
            let path = spec
                .replay_path
                .as_ref()
                .ok_or_else(|| ProviderError::InvalidSpec("replay mode needs a path".into()))?;
            RegistrationBackend::Replay(ReplayTape::load(path)?)
        }
    };
    let recorder = spec
        .record_path
        .as_ref()
        .map(|p| TraceWriter::create(p))
        .transpose()?;
    Ok(BuiltRegistrationProvider { backend, recorder })
}
