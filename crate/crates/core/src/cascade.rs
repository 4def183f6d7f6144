//! The semantic-to-geometric cascade: proximity gating, geometric
//! verification with min-max confidence mixing, last-meter localization via
//! Sim(3) trajectory alignment, and confidence-monitored refinement of the
//! committed goal pose.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    align_trajectories, transport_goal_pose, AlignmentResult, GeometryError, Pose, Pose2D,
};
use crate::providers::ProviderError;
use crate::scalar::{real, wrap_deg_pm180, Real};

/// Default semantic proximity gate threshold.
pub const DEFAULT_PROXIMITY_THRESHOLD: f64 = 0.0014;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CascadeError {
    #[error("need at least {need} frames, got {got}")]
    TooFewFrames { need: usize, got: usize },
    #[error("long-memory positions span fewer than three distinct points")]
    InsufficientBaseline,
    #[error("registration result does not match the frame count")]
    ShapeMismatch,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CascadeParams<T> {
    /// Semantic proximity gate θ: the geometry provider runs only above it.
    pub proximity_threshold: T,
    /// Verification confidence threshold τ.
    pub confidence_threshold: T,
    /// Short-memory window length m used for verification.
    pub short_memory: usize,
    /// Long-memory window length K used for localization.
    pub long_memory: usize,
    /// Two positions closer than this count as one baseline point.
    pub distinct_position_eps_m: T,
    pub attention_weight: T,
    pub feature_weight: T,
    /// Arrival tolerance to the committed goal before terminal alignment.
    pub stop_radius_m: T,
    /// Confidence-monitored refinement of the committed pose.
    pub refinement: bool,
    /// Finer turn increment for terminal in-place alignment; falls back to
    /// the planner increment when absent.
    pub terminal_alignment_increment_deg: Option<T>,
    /// Keyframe cache capacity bound.
    pub memory_capacity: usize,
}

impl<T: Real> Default for CascadeParams<T> {
    fn default() -> Self {
        Self {
            proximity_threshold: real(DEFAULT_PROXIMITY_THRESHOLD),
            confidence_threshold: real(0.10),
            short_memory: 4,
            long_memory: 16,
            distinct_position_eps_m: real(0.25),
            attention_weight: real(0.5),
            feature_weight: real(0.5),
            stop_radius_m: real(0.15),
            refinement: true,
            terminal_alignment_increment_deg: None,
            memory_capacity: 512,
        }
    }
}

impl<T: Real> CascadeParams<T> {
    pub fn validate(&self) -> Result<(), String> {
        if self.proximity_threshold <= T::zero() {
            return Err("proximity threshold must be positive".into());
        }
        if self.confidence_threshold <= T::zero() || self.confidence_threshold >= T::one() {
            return Err("confidence threshold must lie in (0, 1)".into());
        }
        if self.short_memory < 2 {
            return Err("short memory must hold at least 2 frames".into());
        }
        if self.long_memory < self.short_memory {
            return Err("long memory must be at least the short memory".into());
        }
        if (self.attention_weight + self.feature_weight - T::one()).abs() > real(1e-9) {
            return Err("attention and feature weights must sum to 1".into());
        }
        Ok(())
    }
}

/// One cached observation: id (step index), recorded pose, depth ray.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyframe<T: Real> {
    pub id: u64,
    pub pose: Pose<T>,
    pub depth_ray: Vec<T>,
}

/// Bounded keyframe history; ids strictly increase.
#[derive(Debug, Clone)]
pub struct MemoryCache<T: Real> {
    frames: VecDeque<Keyframe<T>>,
    capacity: usize,
}

impl<T: Real> MemoryCache<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 2, "cache must hold at least two frames");
        Self {
            frames: VecDeque::new(),
            capacity,
        }
    }

    pub fn push(&mut self, frame: Keyframe<T>) {
        if let Some(last) = self.frames.back() {
            assert!(frame.id > last.id, "keyframe ids must strictly increase");
        }
        self.frames.push_back(frame);
        while self.frames.len() > self.capacity {
            self.frames.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Keyframe<T>> {
        self.frames.iter()
    }

    /// Last `n` frames in chronological order.
    pub fn last_n(&self, n: usize) -> Vec<&Keyframe<T>> {
        let skip = self.frames.len().saturating_sub(n);
        self.frames.iter().skip(skip).collect()
    }
}

/// Canonical-frame poses and raw confidence scores from one registration
/// call. Entries are ordered as the input frames, goal last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult<T: Real> {
    pub canonical_poses: Vec<Pose<T>>,
    pub raw_attention: Vec<T>,
    pub raw_feature: Vec<T>,
}

impl<T: Real> RegistrationResult<T> {
    pub fn validate(&self, frame_count: usize) -> Result<(), CascadeError> {
        let n = frame_count + 1;
        if self.canonical_poses.len() != n
            || self.raw_attention.len() != n
            || self.raw_feature.len() != n
        {
            return Err(CascadeError::ShapeMismatch);
        }
        let finite = self
            .raw_attention
            .iter()
            .chain(self.raw_feature.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(CascadeError::ShapeMismatch);
        }
        Ok(())
    }
}

/// Registration provider hook the cascade invokes lazily (only while the
/// proximity gate is open). The provider appends the goal frame itself.
pub trait Registrar<T: Real> {
    fn register(
        &mut self,
        frames: &[&Keyframe<T>],
        step: u64,
    ) -> Result<RegistrationResult<T>, ProviderError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Explore,
    Verify,
    Localize,
    Done,
}

/// Cascade state carried across steps of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeState<T: Real> {
    pub mode: Mode,
    pub s_relev: T,
    /// Confidence computed this step, present only when verification ran.
    pub s_conf: Option<T>,
    /// Running maximum of accepted confidence scores.
    pub s_conf_best: T,
    pub committed_goal: Option<Pose2D<T>>,
}

impl<T: Real> CascadeState<T> {
    pub fn new() -> Self {
        Self {
            mode: Mode::Explore,
            s_relev: T::zero(),
            s_conf: None,
            s_conf_best: -T::one(),
            committed_goal: None,
        }
    }
}

impl<T: Real> Default for CascadeState<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// What the episode loop should do this step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Directive<T: Real> {
    /// Pick a frontier and move toward it.
    Explore,
    /// Plan toward the committed goal position.
    NavigateTo(Pose2D<T>),
    /// Turn in place toward the goal heading with the given increment.
    AlignTo { target_yaw_deg: T, increment_deg: T },
    /// Episode over.
    Stop,
}

/// Per-step inputs to the cascade.
pub struct CascadeInputs<'a, T: Real> {
    pub step: u64,
    pub agent_pose: Pose2D<T>,
    pub s_relev: T,
    pub cache: &'a MemoryCache<T>,
    pub registrar: &'a mut dyn Registrar<T>,
    /// Planner turn increment; terminal alignment falls back to it.
    pub default_turn_increment_deg: T,
}

/// Maximum entry of the relevance image: the semantic proximity score.
pub fn proximity_score<T: Real>(image: &crate::bev::RelevanceImage<T>) -> T {
    image.max_value()
}

/// Orders the short-memory window for verification: the temporally central
/// frame (index ⌊m/2⌋ of the chronological window) first as the reference,
/// the remaining frames in chronological order. The goal frame is appended
/// last by the provider.
pub fn order_verification_window<T: Real>(
    cache: &MemoryCache<T>,
    short_memory: usize,
) -> Result<Vec<&Keyframe<T>>, CascadeError> {
    if short_memory < 2 || cache.len() < short_memory {
        return Err(CascadeError::TooFewFrames {
            need: short_memory.max(2),
            got: cache.len(),
        });
    }
    let window = cache.last_n(short_memory);
    let center = short_memory / 2;
    let mut ordered = Vec::with_capacity(short_memory);
    ordered.push(window[center]);
    for (i, frame) in window.into_iter().enumerate() {
        if i != center {
            ordered.push(frame);
        }
    }
    Ok(ordered)
}

fn min_max_normalized_last<T: Real>(values: &[T]) -> T {
    let mut lo = values[0];
    let mut hi = values[0];
    for &v in values {
        if v < lo {
            lo = v;
        }
        if v > hi {
            hi = v;
        }
    }
    let span = hi - lo;
    if span < real(1e-12) {
        // no frame is distinguished; the symmetric choice keeps the score defined
        return real(0.5);
    }
    (*values.last().unwrap() - lo) / span
}

/// Min-max normalizes both raw score lists over all frames and mixes the
/// goal frame's normalized scores with the configured weights.
pub fn confidence_score<T: Real>(
    result: &RegistrationResult<T>,
    params: &CascadeParams<T>,
) -> Result<T, CascadeError> {
    let n = result.raw_attention.len();
    if n < 2 || result.raw_feature.len() != n {
        return Err(CascadeError::TooFewFrames { need: 2, got: n });
    }
    let att = min_max_normalized_last(&result.raw_attention);
    let feat = min_max_normalized_last(&result.raw_feature);
    Ok(params.attention_weight * att + params.feature_weight * feat)
}

/// Counts positions that are pairwise farther apart than `eps` (greedy).
fn distinct_positions<T: Real>(frames: &[&Keyframe<T>], eps: T) -> usize {
    let mut kept: Vec<nalgebra::Vector3<T>> = Vec::new();
    for f in frames {
        let p = f.pose.position;
        if kept.iter().all(|q| (p - q).norm() > eps) {
            kept.push(p);
        }
    }
    kept.len()
}

/// Selects the localization window: the most recent frames, subsampled so
/// consecutive kept frames are at least `eps` apart, capped at `long_memory`
/// once three distinct positions are present, extended further back through
/// history otherwise.
pub fn select_long_window<'a, T: Real>(
    cache: &'a MemoryCache<T>,
    params: &CascadeParams<T>,
) -> Result<Vec<&'a Keyframe<T>>, CascadeError> {
    let eps = params.distinct_position_eps_m;
    let mut kept: Vec<&Keyframe<T>> = Vec::new();
    for frame in cache.frames.iter().rev() {
        let spaced = kept
            .last()
            .map(|last| (last.pose.position - frame.pose.position).norm() >= eps)
            .unwrap_or(true);
        if !spaced {
            continue;
        }
        kept.push(frame);
        if kept.len() >= params.long_memory && distinct_positions(&kept, eps) >= 3 {
            break;
        }
    }
    if distinct_positions(&kept, eps) < 3 {
        return Err(CascadeError::InsufficientBaseline);
    }
    kept.reverse();
    Ok(kept)
}

/// Recovers the world-frame goal pose from a long-memory registration:
/// Sim(3) alignment of canonical onto recorded camera centers, chordal-mean
/// orientation correction about the reference centroid, and transport of the
/// canonical goal pose. Returns the ground-plane goal and the alignment.
pub fn localize<T: Real>(
    frames: &[&Keyframe<T>],
    registration: &RegistrationResult<T>,
    params: &CascadeParams<T>,
) -> Result<(Pose2D<T>, AlignmentResult<T>), CascadeError> {
    registration.validate(frames.len())?;
    if distinct_positions(frames, params.distinct_position_eps_m) < 3 {
        return Err(CascadeError::InsufficientBaseline);
    }
    let n = frames.len();
    let canonical = &registration.canonical_poses[..n];
    let recorded: Vec<Pose<T>> = frames.iter().map(|f| f.pose).collect();
    let alignment = align_trajectories(canonical, &recorded)?;
    let goal = transport_goal_pose(&alignment, &registration.canonical_poses[n]);
    Ok((goal.to_pose2d(), alignment))
}

fn run_localization<T: Real>(
    inputs: &mut CascadeInputs<'_, T>,
    params: &CascadeParams<T>,
) -> Option<Pose2D<T>> {
    let long = select_long_window(inputs.cache, params).ok()?;
    let registration = inputs.registrar.register(&long, inputs.step).ok()?;
    localize(&long, &registration, params).ok().map(|(p, _)| p)
}

/// Advances the cascade by one step. Provider and baseline failures are not
/// errors: they surface as a directive to continue exploring.
pub fn step_cascade<T: Real>(
    state: &mut CascadeState<T>,
    mut inputs: CascadeInputs<'_, T>,
    params: &CascadeParams<T>,
) -> Directive<T> {
    state.s_relev = inputs.s_relev;
    state.s_conf = None;
    let gate_open = inputs.s_relev > params.proximity_threshold;

    match state.mode {
        Mode::Done => Directive::Stop,
        Mode::Explore | Mode::Verify => {
            if !gate_open {
                state.mode = Mode::Explore;
                return Directive::Explore;
            }
            state.mode = Mode::Verify;

            let confidence = order_verification_window(inputs.cache, params.short_memory)
                .and_then(|window| {
                    inputs
                        .registrar
                        .register(&window, inputs.step)
                        .map_err(|_| CascadeError::ShapeMismatch)
                })
                .and_then(|reg| confidence_score(&reg, params));
            let s_conf = match confidence {
                Ok(v) => v,
                Err(_) => {
                    state.mode = Mode::Explore;
                    return Directive::Explore;
                }
            };
            state.s_conf = Some(s_conf);
            if s_conf <= params.confidence_threshold {
                state.mode = Mode::Explore;
                return Directive::Explore;
            }
            match run_localization(&mut inputs, params) {
                Some(goal) => {
                    state.mode = Mode::Localize;
                    state.committed_goal = Some(goal);
                    state.s_conf_best = s_conf;
                    Directive::NavigateTo(goal)
                }
                None => {
                    state.mode = Mode::Explore;
                    Directive::Explore
                }
            }
        }
        Mode::Localize => {
            if gate_open && params.refinement {
                let confidence = order_verification_window(inputs.cache, params.short_memory)
                    .and_then(|window| {
                        inputs
                            .registrar
                            .register(&window, inputs.step)
                            .map_err(|_| CascadeError::ShapeMismatch)
                    })
                    .and_then(|reg| confidence_score(&reg, params));
                if let Ok(s_conf) = confidence {
                    state.s_conf = Some(s_conf);
                    // strict improvement re-invokes localization with the
                    // updated cache
                    if s_conf > state.s_conf_best {
                        if let Some(goal) = run_localization(&mut inputs, params) {
                            state.committed_goal = Some(goal);
                            state.s_conf_best = s_conf;
                        }
                    }
                }
            }

            let goal = state
                .committed_goal
                .expect("Localize mode implies a committed goal");
            let distance = inputs.agent_pose.distance_to(&goal);
            if distance <= params.stop_radius_m {
                let coarse = inputs.default_turn_increment_deg;
                let fine = params.terminal_alignment_increment_deg.unwrap_or(coarse);
                let err = wrap_deg_pm180(goal.yaw_deg - inputs.agent_pose.yaw_deg);
                if err.abs() <= fine / real(2.0) {
                    state.mode = Mode::Done;
                    return Directive::Stop;
                }
                let increment = if err.abs() > coarse / real(2.0) && coarse > fine {
                    coarse
                } else {
                    fine
                };
                return Directive::AlignTo {
                    target_yaw_deg: goal.yaw_deg,
                    increment_deg: increment,
                };
            }
            Directive::NavigateTo(goal)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Sim3Transform;
    use approx::assert_relative_eq;
    use nalgebra::{Rotation3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn frame(id: u64, x: f64, y: f64, yaw: f64) -> Keyframe<f64> {
        Keyframe {
            id,
            pose: Pose::from_pose2d(&Pose2D::new(x, y, yaw)),
            depth_ray: vec![],
        }
    }

    #[test]
    fn proximity_score_is_max_pixel() {
        let zeros = crate::bev::RelevanceImage::new(2, 3, vec![0.0; 6]).unwrap();
        assert_eq!(proximity_score(&zeros), 0.0);

        let mut v = vec![0.0; 6];
        v[4] = 0.002;
        let img = crate::bev::RelevanceImage::new(2, 3, v).unwrap();
        let s = proximity_score(&img);
        assert_eq!(s, 0.002);
        assert!(s > DEFAULT_PROXIMITY_THRESHOLD);

        let ones = crate::bev::RelevanceImage::new(2, 3, vec![1.0; 6]).unwrap();
        assert_eq!(proximity_score(&ones), 1.0);
    }

    #[test]
    fn verification_window_ordering() {
        let mut cache = MemoryCache::new(16);
        for (i, id) in [10u64, 11, 12, 13].iter().enumerate() {
            cache.push(frame(*id, i as f64, 0.0, 0.0));
        }
        let ids = |w: Vec<&Keyframe<f64>>| w.iter().map(|f| f.id).collect::<Vec<_>>();

        // [A,B,C,D] -> [C,A,B,D]
        assert_eq!(ids(order_verification_window(&cache, 4).unwrap()), vec![12, 10, 11, 13]);
        // [C,D] -> [D,C]
        assert_eq!(ids(order_verification_window(&cache, 2).unwrap()), vec![13, 12]);
        // [B,C,D] -> [C,B,D]
        assert_eq!(ids(order_verification_window(&cache, 3).unwrap()), vec![12, 11, 13]);

        let small = MemoryCache::<f64>::new(4);
        assert!(matches!(
            order_verification_window(&small, 2),
            Err(CascadeError::TooFewFrames { .. })
        ));
    }

    fn reg(att: Vec<f64>, feat: Vec<f64>) -> RegistrationResult<f64> {
        let n = att.len();
        RegistrationResult {
            canonical_poses: vec![Pose::identity(); n],
            raw_attention: att,
            raw_feature: feat,
        }
    }

    #[test]
    fn confidence_score_min_max_extremes() {
        let p = CascadeParams::<f64>::default();
        // goal (last) holds the max of both lists
        let r = reg(vec![0.1, 0.3, 0.9], vec![0.2, 0.25, 0.7]);
        assert_relative_eq!(confidence_score(&r, &p).unwrap(), 1.0);
        // goal holds the min of both lists
        let r = reg(vec![0.9, 0.3, 0.1], vec![0.7, 0.25, 0.2]);
        assert_relative_eq!(confidence_score(&r, &p).unwrap(), 0.0);
        // attention-normalized 1, feature-normalized 0
        let r = reg(vec![0.1, 0.5, 0.9], vec![0.7, 0.25, 0.2]);
        assert_relative_eq!(confidence_score(&r, &p).unwrap(), 0.5);
    }

    #[test]
    fn confidence_score_constant_list_gives_half() {
        let p = CascadeParams::<f64>::default();
        let r = reg(vec![0.4, 0.4, 0.4], vec![0.0, 0.5, 1.0]);
        assert_relative_eq!(confidence_score(&r, &p).unwrap(), 0.5 * 0.5 + 0.5 * 1.0);
    }

    #[test]
    fn confidence_score_affine_invariance() {
        let p = CascadeParams::<f64>::default();
        let att = vec![0.12, 0.4, 0.33, 0.9, 0.5];
        let feat = vec![0.7, 0.1, 0.5, 0.2, 0.45];
        let base = confidence_score(&reg(att.clone(), feat.clone()), &p).unwrap();
        let scaled: Vec<f64> = att.iter().map(|v| 3.7 * v + 11.0).collect();
        let scaled_feat: Vec<f64> = feat.iter().map(|v| 0.02 * v - 5.0).collect();
        let same = confidence_score(&reg(scaled, scaled_feat), &p).unwrap();
        assert_relative_eq!(base, same, epsilon = 1e-12);
    }

    #[test]
    fn confidence_score_too_few_frames() {
        let p = CascadeParams::<f64>::default();
        let r = reg(vec![0.4], vec![0.1]);
        assert!(matches!(
            confidence_score(&r, &p),
            Err(CascadeError::TooFewFrames { .. })
        ));
    }

    #[test]
    fn long_window_needs_three_distinct_positions() {
        let p = CascadeParams::<f64>::default();
        let mut cache = MemoryCache::new(64);
        for i in 0..10 {
            cache.push(frame(i, 0.0, 0.0, (i * 30) as f64)); // all at one spot
        }
        assert_eq!(
            select_long_window(&cache, &p).unwrap_err(),
            CascadeError::InsufficientBaseline
        );

        // two distinct positions still fail
        cache.push(frame(100, 1.0, 0.0, 0.0));
        assert!(select_long_window(&cache, &p).is_err());

        // a third distinct position makes the baseline
        cache.push(frame(101, 0.0, 1.0, 0.0));
        let window = select_long_window(&cache, &p).unwrap();
        assert!(distinct_positions(&window, p.distinct_position_eps_m) >= 3);
        // chronological order
        for pair in window.windows(2) {
            assert!(pair[0].id < pair[1].id);
        }
    }

    #[test]
    fn long_window_subsamples_by_spacing() {
        let p = CascadeParams::<f64> {
            long_memory: 4,
            ..CascadeParams::default()
        };
        let mut cache = MemoryCache::new(256);
        // dense trail of frames 0.05 m apart: subsampling keeps ~0.25 m spacing
        for i in 0..100u64 {
            cache.push(frame(i, i as f64 * 0.05, 0.0, 0.0));
        }
        let window = select_long_window(&cache, &p).unwrap();
        assert!(window.len() <= 4);
        for pair in window.windows(2) {
            let d = (pair[0].pose.position - pair[1].pose.position).norm();
            assert!(d >= p.distinct_position_eps_m - 1e-12);
        }
    }

    fn identity_registration(frames: &[&Keyframe<f64>], goal: &Pose2D<f64>) -> RegistrationResult<f64> {
        let mut poses: Vec<Pose<f64>> = frames.iter().map(|f| f.pose).collect();
        poses.push(Pose::from_pose2d(goal));
        let n = poses.len();
        RegistrationResult {
            canonical_poses: poses,
            raw_attention: (0..n).map(|i| i as f64).collect(),
            raw_feature: (0..n).map(|i| i as f64).collect(),
        }
    }

    #[test]
    fn localize_identity_alignment() {
        let p = CascadeParams::<f64>::default();
        let frames_owned: Vec<Keyframe<f64>> = vec![
            frame(0, 0.0, 0.0, 0.0),
            frame(1, 1.0, 0.0, 30.0),
            frame(2, 0.0, 1.0, 60.0),
            frame(3, 1.0, 1.0, 90.0),
        ];
        let frames: Vec<&Keyframe<f64>> = frames_owned.iter().collect();
        let goal = Pose2D::new(2.0, 0.5, 45.0);
        let reg = identity_registration(&frames, &goal);
        let (out, align) = localize(&frames, &reg, &p).unwrap();
        assert!(out.distance_to(&goal) < 1e-9);
        assert_relative_eq!(out.yaw_deg, goal.yaw_deg, epsilon = 1e-6);
        assert!(align.mean_position_residual < 1e-9);
    }

    #[test]
    fn localize_recovers_goal_through_hidden_sim3() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let p = CascadeParams::<f64>::default();
        for _ in 0..20 {
            let hidden = Sim3Transform::new(
                0.4,
                Rotation3::from_axis_angle(
                    &nalgebra::Unit::new_normalize(Vector3::new(
                        rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 0.5,
                    )),
                    rng.random::<f64>() * 6.28,
                ),
                Vector3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()),
            );
            let frames_owned: Vec<Keyframe<f64>> = (0..8)
                .map(|i| {
                    frame(
                        i,
                        rng.random::<f64>() * 3.0,
                        rng.random::<f64>() * 3.0,
                        rng.random::<f64>() * 360.0,
                    )
                })
                .collect();
            let frames: Vec<&Keyframe<f64>> = frames_owned.iter().collect();
            let goal = Pose2D::new(1.5, 2.5, 123.0);

            let mut canonical: Vec<Pose<f64>> =
                frames.iter().map(|f| hidden.apply_pose(&f.pose)).collect();
            canonical.push(hidden.apply_pose(&Pose::from_pose2d(&goal)));
            let reg = RegistrationResult {
                canonical_poses: canonical,
                raw_attention: vec![0.0; 9],
                raw_feature: vec![0.0; 9],
            };
            let (out, _) = localize(&frames, &reg, &p).unwrap();
            assert!(out.distance_to(&goal) < 1e-6, "distance {}", out.distance_to(&goal));
            assert!(
                crate::geometry::heading_error(out.yaw_deg, goal.yaw_deg, crate::geometry::FoldMode::Mod360)
                    < 1e-6
            );
        }
    }

    #[test]
    fn localize_noise_monte_carlo_error_bound() {
        let p = CascadeParams::<f64>::default();
        let noise = Normal::new(0.0, 0.02).unwrap();
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let hidden = Sim3Transform::new(
                0.5 + rng.random::<f64>() * 1.5,
                Rotation3::from_axis_angle(&Vector3::z_axis(), rng.random::<f64>() * 6.28),
                Vector3::new(rng.random::<f64>(), rng.random::<f64>(), 0.3),
            );
            let frames_owned: Vec<Keyframe<f64>> = (0..16)
                .map(|i| {
                    frame(
                        i,
                        rng.random::<f64>() * 4.0,
                        rng.random::<f64>() * 4.0,
                        rng.random::<f64>() * 360.0,
                    )
                })
                .collect();
            let frames: Vec<&Keyframe<f64>> = frames_owned.iter().collect();
            let goal = Pose2D::new(2.0, 2.0, 200.0);

            let mut canonical: Vec<Pose<f64>> = frames
                .iter()
                .map(|f| {
                    let mut c = hidden.apply_pose(&f.pose);
                    c.position += Vector3::new(
                        noise.sample(&mut rng),
                        noise.sample(&mut rng),
                        noise.sample(&mut rng),
                    );
                    c
                })
                .collect();
            canonical.push(hidden.apply_pose(&Pose::from_pose2d(&goal)));
            let reg = RegistrationResult {
                canonical_poses: canonical,
                raw_attention: vec![0.0; 17],
                raw_feature: vec![0.0; 17],
            };
            let (out, _) = localize(&frames, &reg, &p).unwrap();
            let err = out.distance_to(&goal);
            assert!(err < 0.15, "seed {seed}: error {err}");
        }
    }

    #[test]
    fn localize_canonical_frame_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = CascadeParams::<f64>::default();
        let frames_owned: Vec<Keyframe<f64>> = (0..10)
            .map(|i| {
                frame(
                    i,
                    rng.random::<f64>() * 3.0,
                    rng.random::<f64>() * 3.0,
                    rng.random::<f64>() * 360.0,
                )
            })
            .collect();
        let frames: Vec<&Keyframe<f64>> = frames_owned.iter().collect();
        let goal = Pose2D::new(1.0, 1.0, 10.0);
        let base = identity_registration(&frames, &goal);
        let (out0, _) = localize(&frames, &base, &p).unwrap();

        for _ in 0..20 {
            let common = Sim3Transform::new(
                0.2 + rng.random::<f64>() * 4.0,
                Rotation3::from_axis_angle(
                    &nalgebra::Unit::new_normalize(Vector3::new(
                        rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 0.5,
                        rng.random::<f64>() - 0.5,
                    )),
                    rng.random::<f64>() * 6.28,
                ),
                Vector3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()),
            );
            let remapped = RegistrationResult {
                canonical_poses: base
                    .canonical_poses
                    .iter()
                    .map(|q| common.apply_pose(q))
                    .collect(),
                raw_attention: base.raw_attention.clone(),
                raw_feature: base.raw_feature.clone(),
            };
            let (out1, _) = localize(&frames, &remapped, &p).unwrap();
            assert!(out0.distance_to(&out1) < 1e-6);
        }
    }

    /// Scripted registrar: returns canned results and counts invocations.
    struct Scripted {
        calls: usize,
        make: Box<dyn FnMut(&[&Keyframe<f64>]) -> RegistrationResult<f64>>,
    }

    impl Registrar<f64> for Scripted {
        fn register(
            &mut self,
            frames: &[&Keyframe<f64>],
            _step: u64,
        ) -> Result<RegistrationResult<f64>, ProviderError> {
            self.calls += 1;
            Ok((self.make)(frames))
        }
    }

    fn populated_cache() -> MemoryCache<f64> {
        let mut cache = MemoryCache::new(64);
        cache.push(frame(0, 0.0, 0.0, 0.0));
        cache.push(frame(1, 0.5, 0.0, 0.0));
        cache.push(frame(2, 1.0, 0.0, 90.0));
        cache.push(frame(3, 1.0, 0.5, 90.0));
        cache.push(frame(4, 1.0, 1.0, 180.0));
        cache
    }

    fn conf_registration(goal: Pose2D<f64>, goal_conf: f64) -> impl FnMut(&[&Keyframe<f64>]) -> RegistrationResult<f64> {
        move |frames: &[&Keyframe<f64>]| {
            let mut poses: Vec<Pose<f64>> = frames.iter().map(|f| f.pose).collect();
            poses.push(Pose::from_pose2d(&goal));
            let n = poses.len();
            // frames get scores 0..1 spread; the goal's raw score is placed
            // at `goal_conf` of the span so S_conf == goal_conf
            let mut att: Vec<f64> = (0..n - 1).map(|i| i as f64 / (n - 2) as f64).collect();
            att.push(goal_conf);
            RegistrationResult {
                canonical_poses: poses,
                raw_attention: att.clone(),
                raw_feature: att,
            }
        }
    }

    #[test]
    fn gate_boundary_is_strict() {
        let params = CascadeParams::<f64>::default();
        let cache = populated_cache();
        let mut registrar = Scripted {
            calls: 0,
            make: Box::new(conf_registration(Pose2D::new(1.0, 1.0, 0.0), 1.0)),
        };
        let mut state = CascadeState::new();
        let directive = step_cascade(
            &mut state,
            CascadeInputs {
                step: 10,
                agent_pose: Pose2D::new(1.0, 1.0, 0.0),
                s_relev: params.proximity_threshold, // exactly θ: stays Explore
                cache: &cache,
                registrar: &mut registrar,
                default_turn_increment_deg: 30.0,
            },
            &params,
        );
        assert_eq!(state.mode, Mode::Explore);
        assert_eq!(directive, Directive::Explore);
        assert_eq!(registrar.calls, 0, "provider must not run at the gate");
        assert_eq!(state.s_conf, None);
    }

    #[test]
    fn acceptance_commits_goal_and_enters_localize() {
        let params = CascadeParams::<f64>::default();
        let cache = populated_cache();
        let goal = Pose2D::new(2.0, 2.0, 45.0);
        let mut registrar = Scripted {
            calls: 0,
            make: Box::new(conf_registration(goal, 1.0)),
        };
        let mut state = CascadeState::new();
        let directive = step_cascade(
            &mut state,
            CascadeInputs {
                step: 10,
                agent_pose: Pose2D::new(0.0, 0.0, 0.0),
                s_relev: 0.01,
                cache: &cache,
                registrar: &mut registrar,
                default_turn_increment_deg: 30.0,
            },
            &params,
        );
        assert_eq!(state.mode, Mode::Localize);
        let committed = state.committed_goal.expect("goal committed");
        assert!(committed.distance_to(&goal) < 1e-6);
        assert_eq!(directive, Directive::NavigateTo(committed));
        assert_eq!(registrar.calls, 2); // verification + localization
        assert_eq!(state.s_conf_best, 1.0);
    }

    #[test]
    fn rejection_returns_to_explore() {
        let params = CascadeParams::<f64>::default();
        let cache = populated_cache();
        let mut registrar = Scripted {
            calls: 0,
            make: Box::new(conf_registration(Pose2D::new(2.0, 2.0, 45.0), 0.05)),
        };
        let mut state = CascadeState::new();
        let directive = step_cascade(
            &mut state,
            CascadeInputs {
                step: 10,
                agent_pose: Pose2D::new(0.0, 0.0, 0.0),
                s_relev: 0.01,
                cache: &cache,
                registrar: &mut registrar,
                default_turn_increment_deg: 30.0,
            },
            &params,
        );
        assert_eq!(state.mode, Mode::Explore);
        assert_eq!(directive, Directive::Explore);
        assert_eq!(state.s_conf, Some(0.05));
        assert!(state.committed_goal.is_none());
    }

    #[test]
    fn refinement_requires_strict_improvement() {
        let params = CascadeParams::<f64>::default();
        let cache = populated_cache();
        let goal_a = Pose2D::new(2.0, 2.0, 45.0);
        let goal_b = Pose2D::new(3.0, 3.0, 90.0);

        let mut registrar = Scripted {
            calls: 0,
            make: Box::new(conf_registration(goal_a, 0.8)),
        };
        let mut state = CascadeState::new();
        step_cascade(
            &mut state,
            CascadeInputs {
                step: 10,
                agent_pose: Pose2D::new(0.0, 0.0, 0.0),
                s_relev: 0.01,
                cache: &cache,
                registrar: &mut registrar,
                default_turn_increment_deg: 30.0,
            },
            &params,
        );
        let committed_a = state.committed_goal.unwrap();

        // lower confidence: committed goal unchanged (0.7 < 0.8)
        let mut registrar_low = Scripted {
            calls: 0,
            make: Box::new(conf_registration(goal_b, 0.7)),
        };
        step_cascade(
            &mut state,
            CascadeInputs {
                step: 11,
                agent_pose: Pose2D::new(0.0, 0.0, 0.0),
                s_relev: 0.01,
                cache: &cache,
                registrar: &mut registrar_low,
                default_turn_increment_deg: 30.0,
            },
            &params,
        );
        assert_eq!(state.committed_goal.unwrap(), committed_a);
        assert_eq!(state.s_conf_best, 0.8);

        // higher confidence: goal replaced, best updated
        let mut registrar_high = Scripted {
            calls: 0,
            make: Box::new(conf_registration(goal_b, 0.95)),
        };
        step_cascade(
            &mut state,
            CascadeInputs {
                step: 12,
                agent_pose: Pose2D::new(0.0, 0.0, 0.0),
                s_relev: 0.01,
                cache: &cache,
                registrar: &mut registrar_high,
                default_turn_increment_deg: 30.0,
            },
            &params,
        );
        assert!(state.committed_goal.unwrap().distance_to(&goal_b) < 1e-6);
        assert_eq!(state.s_conf_best, 0.95);
    }

    #[test]
    fn arrival_aligns_then_stops() {
        let params = CascadeParams::<f64> {
            refinement: false,
            ..CascadeParams::default()
        };
        let cache = populated_cache();
        let goal = Pose2D::new(1.0, 1.0, 90.0);
        let mut registrar = Scripted {
            calls: 0,
            make: Box::new(conf_registration(goal, 1.0)),
        };
        let mut state = CascadeState::new();
        state.mode = Mode::Localize;
        state.committed_goal = Some(goal);
        state.s_conf_best = 1.0;

        // near the goal but facing the wrong way: align first
        let directive = step_cascade(
            &mut state,
            CascadeInputs {
                step: 20,
                agent_pose: Pose2D::new(1.05, 1.0, 0.0),
                s_relev: 0.0,
                cache: &cache,
                registrar: &mut registrar,
                default_turn_increment_deg: 30.0,
            },
            &params,
        );
        assert_eq!(
            directive,
            Directive::AlignTo {
                target_yaw_deg: 90.0,
                increment_deg: 30.0
            }
        );
        assert_eq!(state.mode, Mode::Localize);

        // aligned within half increment: stop, done
        let directive = step_cascade(
            &mut state,
            CascadeInputs {
                step: 21,
                agent_pose: Pose2D::new(1.05, 1.0, 80.0),
                s_relev: 0.0,
                cache: &cache,
                registrar: &mut registrar,
                default_turn_increment_deg: 30.0,
            },
            &params,
        );
        assert_eq!(directive, Directive::Stop);
        assert_eq!(state.mode, Mode::Done);
        assert_eq!(registrar.calls, 0, "refinement disabled: no provider calls");
    }

    #[test]
    fn fine_terminal_alignment_uses_coarse_then_fine() {
        let params = CascadeParams::<f64> {
            refinement: false,
            terminal_alignment_increment_deg: Some(1.0),
            ..CascadeParams::default()
        };
        let cache = populated_cache();
        let goal = Pose2D::new(1.0, 1.0, 90.0);
        let mut registrar = Scripted {
            calls: 0,
            make: Box::new(conf_registration(goal, 1.0)),
        };
        let mut state = CascadeState::new();
        state.mode = Mode::Localize;
        state.committed_goal = Some(goal);

        // big error: coarse increment
        let d = step_cascade(
            &mut state,
            CascadeInputs {
                step: 1,
                agent_pose: Pose2D::new(1.0, 1.0, 0.0),
                s_relev: 0.0,
                cache: &cache,
                registrar: &mut registrar,
                default_turn_increment_deg: 30.0,
            },
            &params,
        );
        assert_eq!(
            d,
            Directive::AlignTo {
                target_yaw_deg: 90.0,
                increment_deg: 30.0
            }
        );

        // small error: fine increment
        let d = step_cascade(
            &mut state,
            CascadeInputs {
                step: 2,
                agent_pose: Pose2D::new(1.0, 1.0, 84.0),
                s_relev: 0.0,
                cache: &cache,
                registrar: &mut registrar,
                default_turn_increment_deg: 30.0,
            },
            &params,
        );
        assert_eq!(
            d,
            Directive::AlignTo {
                target_yaw_deg: 90.0,
                increment_deg: 1.0
            }
        );

        // inside fine deadband: stop
        let d = step_cascade(
            &mut state,
            CascadeInputs {
                step: 3,
                agent_pose: Pose2D::new(1.0, 1.0, 89.6),
                s_relev: 0.0,
                cache: &cache,
                registrar: &mut registrar,
                default_turn_increment_deg: 30.0,
            },
            &params,
        );
        assert_eq!(d, Directive::Stop);
    }

    #[test]
    fn provider_never_called_below_gate_over_many_steps() {
        let params = CascadeParams::<f64>::default();
        let cache = populated_cache();
        let mut registrar = Scripted {
            calls: 0,
            make: Box::new(conf_registration(Pose2D::new(1.0, 1.0, 0.0), 1.0)),
        };
        let mut state = CascadeState::new();
        for step in 0..50 {
            let s_relev = if step % 2 == 0 { 0.0 } else { params.proximity_threshold * 0.99 };
            step_cascade(
                &mut state,
                CascadeInputs {
                    step,
                    agent_pose: Pose2D::new(0.0, 0.0, 0.0),
                    s_relev,
                    cache: &cache,
                    registrar: &mut registrar,
                    default_turn_increment_deg: 30.0,
                },
                &params,
            );
        }
        assert_eq!(registrar.calls, 0);
    }

    #[test]
    fn insufficient_baseline_keeps_exploring() {
        let params = CascadeParams::<f64>::default();
        // all frames at the same position: verification passes, localization
        // cannot, cascade keeps exploring
        let mut cache = MemoryCache::new(64);
        for i in 0..6 {
            cache.push(frame(i, 0.0, 0.0, (i * 10) as f64));
        }
        let mut registrar = Scripted {
            calls: 0,
            make: Box::new(conf_registration(Pose2D::new(2.0, 2.0, 0.0), 1.0)),
        };
        let mut state = CascadeState::new();
        let directive = step_cascade(
            &mut state,
            CascadeInputs {
                step: 10,
                agent_pose: Pose2D::new(0.0, 0.0, 0.0),
                s_relev: 0.01,
                cache: &cache,
                registrar: &mut registrar,
                default_turn_increment_deg: 30.0,
            },
            &params,
        );
        assert_eq!(state.mode, Mode::Explore);
        assert_eq!(directive, Directive::Explore);
        assert!(state.committed_goal.is_none());
    }
}
