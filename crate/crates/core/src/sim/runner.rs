//! The per-episode loop: observe, map, score, verify, localize, act.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{apply_action, mix_seed, raycast_depth, Episode, GridWorld, MotionParams, SimError};
use crate::bev::{
    accumulate, compress_to_ray, extract_frontiers, integrate_depth_scan,
    project_step_relevance, GridMap, Occupancy, ProjectionParams,
};
use crate::cascade::{
    proximity_score, step_cascade, CascadeInputs, CascadeParams, CascadeState, Directive,
    Keyframe, MemoryCache, Mode,
};
use crate::frontier::{
    score_frontiers_variant, select_frontier, FrontierWeights, ScoringVariant,
};
use crate::geometry::{heading_error, position_error, FoldMode, Pose, Pose2D};
use crate::planner::{
    edt, fmm_distance, fmm_distance_toward, local_step, select_waypoint, Action, ClearanceField,
    PlannerError, PlannerParams,
};
use crate::providers::{
    build_registration_provider, build_relevance_provider, visibility_overlap,
    RegistrationProviderSpec, RelevanceProvider, RelevanceProviderSpec,
};

/// Full parameterization of one system run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub projection: ProjectionParams<f64>,
    /// Explicit frontier weights; when absent the relevance cap follows the
    /// cascade's proximity threshold.
    pub frontier_weights: Option<FrontierWeights<f64>>,
    pub scoring_variant: ScoringVariant,
    pub planner: PlannerParams<f64>,
    pub cascade: CascadeParams<f64>,
    pub relevance_provider: RelevanceProviderSpec,
    pub registration_provider: RegistrationProviderSpec,
    pub fold_mode: FoldMode,
    /// Frontier clusters below this size are ignored.
    pub min_frontier_cluster: usize,
    /// Added to the agent radius for collision tests; keeps the clearance of
    /// every physically occupied cell at or above the agent radius.
    pub collision_margin_m: f64,
}

impl SystemConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.projection.validate().map_err(|e| SimError::Config(e.to_string()))?;
        self.planner.validate().map_err(SimError::Config)?;
        self.cascade.validate().map_err(SimError::Config)?;
        if let Some(w) = &self.frontier_weights {
            w.validate().map_err(|e| SimError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn effective_weights(&self) -> FrontierWeights<f64> {
        self.frontier_weights.unwrap_or(FrontierWeights {
            relevance_cap: self.cascade.proximity_threshold,
            ..FrontierWeights::default()
        })
    }

    fn min_frontier_cluster(&self) -> usize {
        if self.min_frontier_cluster == 0 {
            2
        } else {
            self.min_frontier_cluster
        }
    }

    fn collision_margin(&self) -> f64 {
        if self.collision_margin_m <= 0.0 {
            self.projection.cell_size_m
        } else {
            self.collision_margin_m
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    /// The cascade issued Stop.
    Stopped,
    /// The step budget ran out.
    StepBudget,
}

/// Mode recorded per trace row; `Verify` marks steps on which verification
/// ran and rejected (the persistent state returns to `Explore`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceMode {
    Explore,
    Verify,
    Localize,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub mode: TraceMode,
    pub s_relev: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub s_conf: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub committed_goal: Option<Pose2D<f64>>,
    pub pose: Pose2D<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub action: Option<Action>,
    pub collided: bool,
    pub no_waypoint: bool,
    pub dist_to_goal_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode: Episode,
    pub success: bool,
    pub stop_reason: StopReason,
    pub steps: u32,
    pub path_length_m: f64,
    pub shortest_path_m: f64,
    pub eps_pos_m: f64,
    pub eps_head_deg: f64,
    pub final_pose: Pose2D<f64>,
    pub collisions: u32,
    pub no_waypoint_events: u32,
    pub safety_violations: u32,
    pub ever_verified: bool,
    pub ever_localized: bool,
    /// A verification ran and rejected while the agent stood inside the
    /// goal's success radius.
    pub rejected_inside_goal_disc: bool,
    /// Mean true visibility overlap between the goal and the verification
    /// window at first acceptance.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accept_overlap: Option<f64>,
    #[serde(skip, default)]
    pub trace: Vec<TraceRow>,
}

/// Runs one episode under the given configuration. Deterministic in the
/// episode seed and config.
pub fn run_episode(
    episode: &Episode,
    world: &Arc<GridWorld>,
    config: &SystemConfig,
) -> Result<EpisodeResult, SimError> {
    config.validate()?;
    let start_cell = world
        .world_to_cell(episode.start.x, episode.start.y)
        .ok_or_else(|| SimError::InvalidEpisode("start outside world".into()))?;
    let goal_cell = world
        .world_to_cell(episode.goal.x, episode.goal.y)
        .ok_or_else(|| SimError::InvalidEpisode("goal outside world".into()))?;
    if world.is_obstacle(start_cell.0, start_cell.1) || world.is_obstacle(goal_cell.0, goal_cell.1)
    {
        return Err(SimError::InvalidEpisode("start or goal inside a wall".into()));
    }
    let truth_field = world.geodesic_field(start_cell);
    let shortest_path_m = truth_field[goal_cell.0 * world.cols() + goal_cell.1];
    if !shortest_path_m.is_finite() {
        return Err(SimError::InvalidEpisode("goal unreachable from start".into()));
    }
    let true_clearance = world.clearance_cells();

    let projection = ProjectionParams {
        cell_size_m: world.cell_size(),
        ..config.projection
    };
    let weights = config.effective_weights();
    let planner_params = &config.planner;
    let cascade_params = &config.cascade;

    // per-episode provider instances, seeded from the episode seed
    let rel_spec = RelevanceProviderSpec {
        seed: mix_seed(config.relevance_provider.seed, episode.seed),
        ..config.relevance_provider.clone()
    };
    let reg_spec = RegistrationProviderSpec {
        seed: mix_seed(config.registration_provider.seed, episode.seed),
        ..config.registration_provider.clone()
    };
    let mut relevance_provider =
        build_relevance_provider(&rel_spec, world.clone(), episode.goal, &projection)?;
    let mut registrar =
        build_registration_provider(&reg_spec, world.clone(), episode.goal, &projection)?;

    let mut grid = GridMap::unknown(world.rows(), world.cols(), 0.0, 0.0, world.cell_size());
    let mut cache: MemoryCache<f64> = MemoryCache::new(cascade_params.memory_capacity);
    let mut state = CascadeState::new();
    let mut pose = episode.start;

    let mut clearance_cache: Option<(u64, ClearanceField<f64>)> = None;
    let mut trace: Vec<TraceRow> = Vec::with_capacity(episode.max_steps as usize);
    let mut path_length = 0.0f64;
    let mut collisions = 0u32;
    let mut no_waypoint_events = 0u32;
    let mut safety_violations = 0u32;
    let mut ever_verified = false;
    let mut ever_localized = false;
    let mut rejected_inside_goal_disc = false;
    let mut accept_overlap: Option<f64> = None;
    let mut stop_reason = StopReason::StepBudget;

    for step in 0..episode.max_steps as u64 {
        // observe and map
        let depth = raycast_depth(
            world,
            &pose,
            projection.fov_deg,
            projection.columns,
            projection.max_range_m,
        );
        integrate_depth_scan(&mut grid, &pose, &depth, &projection)
            .map_err(|e| SimError::Config(e.to_string()))?;
        let rel_img = relevance_provider.relevance(&pose, step)?;
        let s_relev = proximity_score(&rel_img);
        let ray = compress_to_ray(&rel_img, projection.sigma_h_px);
        let cone = project_step_relevance(&ray, &depth, &pose, &projection, &grid)
            .map_err(|e| SimError::Config(e.to_string()))?;
        accumulate(&mut grid, &cone);
        cache.push(Keyframe {
            id: step,
            pose: Pose::from_pose2d(&pose),
            depth_ray: depth.clone(),
        });

        // decide
        let mode_before = state.mode;
        let directive = step_cascade(
            &mut state,
            CascadeInputs {
                step,
                agent_pose: pose,
                s_relev,
                cache: &cache,
                registrar: &mut registrar,
                default_turn_increment_deg: planner_params.turn_increment_deg,
            },
            cascade_params,
        );
        let verified_this_step = state.s_conf.is_some();
        ever_verified |= verified_this_step;
        if mode_before != Mode::Localize && state.mode == Mode::Localize && accept_overlap.is_none()
        {
            // true overlap of the verification window at first acceptance
            let window = cache.last_n(cascade_params.short_memory);
            let mean = window
                .iter()
                .map(|f| {
                    visibility_overlap(&f.pose.to_pose2d(), &episode.goal, world, &projection)
                        .value()
                })
                .sum::<f64>()
                / window.len().max(1) as f64;
            accept_overlap = Some(mean);
            ever_localized = true;
        }
        let dist_to_goal = pose.distance_to(&episode.goal);
        if verified_this_step
            && state.mode == Mode::Explore
            && dist_to_goal <= episode.success_radius_m
        {
            rejected_inside_goal_disc = true;
        }

        let trace_mode = match state.mode {
            Mode::Explore if verified_this_step => TraceMode::Verify,
            Mode::Explore => TraceMode::Explore,
            Mode::Verify => TraceMode::Verify,
            Mode::Localize => TraceMode::Localize,
            Mode::Done => TraceMode::Done,
        };

        // act
        let mut no_waypoint = false;
        let mut turn_increment = planner_params.turn_increment_deg;
        let action = match directive {
            Directive::Stop => {
                stop_reason = StopReason::Stopped;
                trace.push(TraceRow {
                    step,
                    mode: trace_mode,
                    s_relev,
                    s_conf: state.s_conf,
                    committed_goal: state.committed_goal,
                    pose,
                    action: Some(Action::Stop),
                    collided: false,
                    no_waypoint: false,
                    dist_to_goal_m: dist_to_goal,
                });
                break;
            }
            Directive::Explore => match explore_action(
                &grid,
                &pose,
                &weights,
                config.scoring_variant,
                planner_params,
                config.min_frontier_cluster(),
                &mut clearance_cache,
            ) {
                Ok(a) => a,
                Err(PlannerError::NoViableWaypoint) => {
                    no_waypoint = true;
                    Action::TurnLeft
                }
                Err(PlannerError::NoFreeSource) => Action::TurnLeft,
            },
            Directive::NavigateTo(goal2d) => match navigate_action(
                &grid,
                &pose,
                &goal2d,
                planner_params,
                &mut clearance_cache,
            ) {
                Ok(a) => a,
                Err(PlannerError::NoViableWaypoint) => {
                    no_waypoint = true;
                    Action::TurnLeft
                }
                Err(PlannerError::NoFreeSource) => Action::TurnLeft,
            },
            Directive::AlignTo {
                target_yaw_deg,
                increment_deg,
            } => {
                turn_increment = increment_deg;
                let err = crate::scalar::wrap_deg_pm180(target_yaw_deg - pose.yaw_deg);
                if err > 0.0 {
                    Action::TurnLeft
                } else {
                    Action::TurnRight
                }
            }
        };

        let motion = MotionParams {
            step_size_m: planner_params.step_size_m,
            turn_increment_deg: turn_increment,
            agent_radius_m: planner_params.agent_radius_m,
            collision_margin_m: config.collision_margin(),
        };
        let outcome = apply_action(world, &pose, action, &motion);
        if outcome.collided {
            collisions += 1;
        } else if action == Action::Forward {
            path_length += motion.step_size_m;
        }
        pose = outcome.pose;

        if let Some(cell) = world.world_to_cell(pose.x, pose.y) {
            if true_clearance[cell.0 * world.cols() + cell.1] < planner_params.agent_radius_m {
                safety_violations += 1;
            }
        }
        if no_waypoint {
            no_waypoint_events += 1;
        }

        trace.push(TraceRow {
            step,
            mode: trace_mode,
            s_relev,
            s_conf: state.s_conf,
            committed_goal: state.committed_goal,
            pose,
            action: Some(action),
            collided: outcome.collided,
            no_waypoint,
            dist_to_goal_m: pose.distance_to(&episode.goal),
        });
    }

    let eps_pos = position_error(&pose, &episode.goal);
    let eps_head = heading_error(pose.yaw_deg, episode.goal.yaw_deg, config.fold_mode);
    let success = stop_reason == StopReason::Stopped && eps_pos <= episode.success_radius_m;

    Ok(EpisodeResult {
        episode: episode.clone(),
        success,
        stop_reason,
        steps: trace.len() as u32,
        path_length_m: path_length,
        shortest_path_m,
        eps_pos_m: eps_pos,
        eps_head_deg: eps_head,
        final_pose: pose,
        collisions,
        no_waypoint_events,
        safety_violations,
        ever_verified,
        ever_localized,
        rejected_inside_goal_disc,
        accept_overlap,
        trace,
    })
}

fn refreshed_clearance<'a>(
    grid: &GridMap<f64>,
    cache: &'a mut Option<(u64, ClearanceField<f64>)>,
) -> &'a ClearanceField<f64> {
    let stale = cache
        .as_ref()
        .map(|(rev, _)| *rev != grid.obstacle_revision())
        .unwrap_or(true);
    if stale {
        *cache = Some((grid.obstacle_revision(), edt(grid)));
    }
    &cache.as_ref().unwrap().1
}

fn lookahead_disc(
    grid: &GridMap<f64>,
    agent: &Pose2D<f64>,
    lookahead_m: f64,
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    if let Some((arow, acol)) = grid.world_to_cell(agent.x, agent.y) {
        let radius = (lookahead_m / grid.cell_size()).ceil() as i64 + 1;
        for dr in -radius..=radius {
            for dc in -radius..=radius {
                let (r, c) = (arow as i64 + dr, acol as i64 + dc);
                if grid.in_bounds(r, c) {
                    out.push((r as usize, c as usize));
                }
            }
        }
    }
    out
}

fn explore_action(
    grid: &GridMap<f64>,
    pose: &Pose2D<f64>,
    weights: &FrontierWeights<f64>,
    variant: ScoringVariant,
    planner_params: &PlannerParams<f64>,
    min_cluster: usize,
    clearance_cache: &mut Option<(u64, ClearanceField<f64>)>,
) -> Result<Action, PlannerError> {
    let mut frontiers = extract_frontiers(grid, min_cluster);
    if frontiers.is_empty() {
        // nothing left to explore: scan in place until the budget ends
        return Ok(Action::TurnLeft);
    }
    let agent_cell = grid
        .world_to_cell(pose.x, pose.y)
        .ok_or(PlannerError::NoViableWaypoint)?;
    let agent_field = fmm_distance(grid, &[agent_cell])?;

    // fill geodesic distance and heading deviation per frontier; drop the
    // unreachable and degenerate ones
    let mut reps: Vec<(usize, usize)> = Vec::new();
    frontiers.retain_mut(|f| {
        let rep = f
            .cells
            .iter()
            .copied()
            .min_by(|a, b| {
                let da = cell_dist2(grid, *a, f.centroid);
                let db = cell_dist2(grid, *b, f.centroid);
                da.partial_cmp(&db).unwrap().then(a.cmp(b))
            })
            .expect("frontier has cells");
        let d = agent_field.at(rep.0, rep.1);
        if !(d.is_finite() && d > 0.0 && d < 1e18) {
            return false;
        }
        f.geodesic_distance_m = d;
        let bearing = pose.bearing_to_deg(f.centroid.0, f.centroid.1);
        f.heading_deviation_deg =
            crate::scalar::wrap_deg_pm180(bearing - pose.yaw_deg).abs();
        reps.push(rep);
        true
    });
    if frontiers.is_empty() {
        return Ok(Action::TurnLeft);
    }

    let scored =
        score_frontiers_variant(&frontiers, weights, variant).map_err(|_| PlannerError::NoViableWaypoint)?;
    let best = select_frontier(&scored).map_err(|_| PlannerError::NoViableWaypoint)?;
    let best_idx = scored
        .iter()
        .position(|s| std::ptr::eq(s, best))
        .expect("best comes from scored");
    let target = reps[best_idx];

    steer_toward(grid, pose, target, planner_params, clearance_cache)
}

fn navigate_action(
    grid: &GridMap<f64>,
    pose: &Pose2D<f64>,
    goal: &Pose2D<f64>,
    planner_params: &PlannerParams<f64>,
    clearance_cache: &mut Option<(u64, ClearanceField<f64>)>,
) -> Result<Action, PlannerError> {
    // plan to the free cell nearest the committed goal position
    let target = match grid.world_to_cell(goal.x, goal.y) {
        Some((r, c)) if grid.occupancy(r, c) == Occupancy::Free => (r, c),
        _ => nearest_free_cell(grid, goal).ok_or(PlannerError::NoFreeSource)?,
    };
    steer_toward(grid, pose, target, planner_params, clearance_cache)
}

fn steer_toward(
    grid: &GridMap<f64>,
    pose: &Pose2D<f64>,
    target: (usize, usize),
    planner_params: &PlannerParams<f64>,
    clearance_cache: &mut Option<(u64, ClearanceField<f64>)>,
) -> Result<Action, PlannerError> {
    let focus = lookahead_disc(grid, pose, planner_params.lookahead_m);
    let dist = fmm_distance_toward(grid, &[target], Some(&focus))?;
    let clearance = refreshed_clearance(grid, clearance_cache);
    let waypoint = select_waypoint(&dist, clearance, pose, grid, planner_params)?;
    let (wx, wy) = grid.cell_center(waypoint.0, waypoint.1);
    Ok(local_step(pose, wx, wy, planner_params))
}

fn cell_dist2(grid: &GridMap<f64>, cell: (usize, usize), point: (f64, f64)) -> f64 {
    let (x, y) = grid.cell_center(cell.0, cell.1);
    (x - point.0).powi(2) + (y - point.1).powi(2)
}

fn nearest_free_cell(grid: &GridMap<f64>, goal: &Pose2D<f64>) -> Option<(usize, usize)> {
    let mut best: Option<((usize, usize), f64)> = None;
    for r in 0..grid.rows() {
        for c in 0..grid.cols() {
            if grid.occupancy(r, c) != Occupancy::Free {
                continue;
            }
            let d = cell_dist2(grid, (r, c), (goal.x, goal.y));
            let better = match &best {
                None => true,
                Some((bc, bd)) => d < *bd || (d == *bd && (r, c) < *bc),
            };
            if better {
                best = Some(((r, c), d));
            }
        }
    }
    best.map(|(cell, _)| cell)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::EpisodeConstraints;

    fn open_world() -> Arc<GridWorld> {
        let mut text = String::new();
        for r in 0..64 {
            for c in 0..64 {
                let boundary = r == 0 || c == 0 || r == 63 || c == 63;
                text.push(if boundary { '#' } else { '.' });
            }
            text.push('\n');
        }
        Arc::new(GridWorld::from_ascii("open-64", &text, 0.05).unwrap())
    }

    fn noiseless_config() -> SystemConfig {
        SystemConfig::default()
    }

    #[test]
    fn zero_budget_fails_with_step_budget() {
        let world = open_world();
        let episode = Episode {
            id: 0,
            world_name: world.name().to_string(),
            start: Pose2D::new(0.825, 0.825, 0.0),
            goal: Pose2D::new(2.325, 0.825, 90.0),
            max_steps: 0,
            seed: 1,
            success_radius_m: 1.0,
        };
        let result = run_episode(&episode, &world, &noiseless_config()).unwrap();
        assert!(!result.success);
        assert_eq!(result.stop_reason, StopReason::StepBudget);
        assert_eq!(result.steps, 0);
    }

    #[test]
    fn straight_ahead_goal_succeeds_noiselessly() {
        let world = open_world();
        let episode = Episode {
            id: 0,
            world_name: world.name().to_string(),
            start: Pose2D::new(0.825, 1.625, 0.0),
            goal: Pose2D::new(2.325, 1.625, 0.0),
            max_steps: 200,
            seed: 1,
            success_radius_m: 1.0,
        };
        let result = run_episode(&episode, &world, &noiseless_config()).unwrap();
        assert!(result.success, "failed: {:?}", result.stop_reason);
        assert!(result.eps_pos_m <= 0.3, "eps_pos {}", result.eps_pos_m);
        assert_eq!(result.safety_violations, 0);
        assert!(result.ever_localized);
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let world = open_world();
        let episodes = crate::sim::generate_episode_suite(
            &[world.clone()],
            2,
            9,
            &EpisodeConstraints::default(),
        )
        .unwrap();
        let a = run_episode(&episodes[0], &world, &noiseless_config()).unwrap();
        let b = run_episode(&episodes[0], &world, &noiseless_config()).unwrap();
        assert_eq!(a, b);
        let a_json = serde_json::to_string(&a).unwrap();
        let b_json = serde_json::to_string(&b).unwrap();
        assert_eq!(a_json, b_json);
    }

    #[test]
    fn path_length_counts_accepted_forwards() {
        let world = open_world();
        let episode = Episode {
            id: 0,
            world_name: world.name().to_string(),
            start: Pose2D::new(0.825, 1.625, 0.0),
            goal: Pose2D::new(2.325, 1.625, 0.0),
            max_steps: 200,
            seed: 1,
            success_radius_m: 1.0,
        };
        let result = run_episode(&episode, &world, &noiseless_config()).unwrap();
        let forwards = result
            .trace
            .iter()
            .filter(|r| r.action == Some(Action::Forward) && !r.collided)
            .count();
        assert!(
            (result.path_length_m - forwards as f64 * 0.25).abs() < 1e-9,
            "{} vs {}",
            result.path_length_m,
            forwards as f64 * 0.25
        );
    }
}
