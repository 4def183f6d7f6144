//! Deterministic 2D gridworld: ASCII and procedural maps, per-column depth
//! raycasting, disc-collision kinematics, and seeded episode generation.

mod procgen;
mod runner;

pub use procgen::{generate_world, ProcWorldSpec};
pub use runner::{
    run_episode, EpisodeResult, StopReason, SystemConfig, TraceRow, TraceMode,
};

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bev::column_bearing_deg;
use crate::geometry::Pose2D;
use crate::planner::{solve_eikonal, Action};
use crate::ray::walk_ray;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("map parse error: {0}")]
    MapParse(String),
    #[error("episode is invalid: {0}")]
    InvalidEpisode(String),
    #[error("episode generation failed: {0}")]
    Generation(String),
    #[error("provider failure: {0}")]
    Provider(#[from] crate::providers::ProviderError),
    #[error("config error: {0}")]
    Config(String),
}

/// Splitmix64 step for deriving sub-seeds deterministically.
pub(crate) fn mix_seed(base: u64, salt: u64) -> u64 {
    let mut z = base
        .wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Closed 2D world: obstacle mask with obstacle boundary cells.
#[derive(Debug, Clone, PartialEq)]
pub struct GridWorld {
    rows: usize,
    cols: usize,
    cell_size: f64,
    name: String,
    obstacle: Vec<bool>,
}

impl GridWorld {
    /// Parses an ASCII map: `#` obstacle, `.` free, one row per line. The
    /// first line is row 0. Boundary cells must be obstacles.
    pub fn from_ascii(name: &str, text: &str, cell_size: f64) -> Result<Self, SimError> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if lines.len() < 3 {
            return Err(SimError::MapParse("map needs at least 3 rows".into()));
        }
        let cols = lines[0].chars().count();
        if cols < 3 {
            return Err(SimError::MapParse("map needs at least 3 columns".into()));
        }
        let rows = lines.len();
        let mut obstacle = Vec::with_capacity(rows * cols);
        for (r, line) in lines.iter().enumerate() {
            if line.chars().count() != cols {
                return Err(SimError::MapParse(format!(
                    "row {r} has {} columns, expected {cols}",
                    line.chars().count()
                )));
            }
            for (c, ch) in line.chars().enumerate() {
                let is_obstacle = match ch {
                    '#' => true,
                    '.' => false,
                    other => {
                        return Err(SimError::MapParse(format!(
                            "unexpected character {other:?} at ({r},{c})"
                        )))
                    }
                };
                obstacle.push(is_obstacle);
            }
        }
        Self::from_mask(name, rows, cols, cell_size, obstacle)
    }

    pub(crate) fn from_mask(
        name: &str,
        rows: usize,
        cols: usize,
        cell_size: f64,
        obstacle: Vec<bool>,
    ) -> Result<Self, SimError> {
        if cell_size <= 0.0 {
            return Err(SimError::MapParse("cell size must be positive".into()));
        }
        for r in 0..rows {
            for c in 0..cols {
                let boundary = r == 0 || c == 0 || r == rows - 1 || c == cols - 1;
                if boundary && !obstacle[r * cols + c] {
                    return Err(SimError::MapParse(format!(
                        "boundary cell ({r},{c}) must be an obstacle"
                    )));
                }
            }
        }
        if !obstacle.iter().any(|&o| !o) {
            return Err(SimError::MapParse("map has no free cells".into()));
        }
        Ok(Self {
            rows,
            cols,
            cell_size,
            name: name.to_string(),
            obstacle,
        })
    }

    pub fn to_ascii(&self) -> String {
        let mut out = String::with_capacity((self.cols + 1) * self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(if self.obstacle[r * self.cols + c] { '#' } else { '.' });
            }
            out.push('\n');
        }
        out
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn is_obstacle(&self, row: usize, col: usize) -> bool {
        self.obstacle[row * self.cols + col]
    }

    pub fn obstacle_mask(&self) -> &[bool] {
        &self.obstacle
    }

    pub fn world_to_cell(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if x < 0.0 || y < 0.0 {
            return None;
        }
        let col = (x / self.cell_size).floor() as usize;
        let row = (y / self.cell_size).floor() as usize;
        if row < self.rows && col < self.cols {
            Some((row, col))
        } else {
            None
        }
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            (col as f64 + 0.5) * self.cell_size,
            (row as f64 + 0.5) * self.cell_size,
        )
    }

    /// Exact per-cell distance to the nearest obstacle, meters.
    pub fn clearance_cells(&self) -> Vec<f64> {
        let sq = crate::planner::edt_squared_cells(&self.obstacle, self.rows, self.cols);
        sq.iter().map(|&s| s.sqrt() * self.cell_size).collect()
    }

    /// Ground-truth geodesic field from one free cell over free space.
    pub fn geodesic_field(&self, source: (usize, usize)) -> Vec<f64> {
        let traversable: Vec<bool> = self.obstacle.iter().map(|&o| !o).collect();
        solve_eikonal(
            &traversable,
            self.rows,
            self.cols,
            self.cell_size,
            &[source],
            None,
        )
    }
}

/// Per-column depth raycast: distance to the entering boundary of the first
/// obstacle cell, clamped at `max_range`. Columns follow the image
/// convention of [`column_bearing_deg`].
pub fn raycast_depth(
    world: &GridWorld,
    pose: &Pose2D<f64>,
    fov_deg: f64,
    columns: usize,
    max_range: f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(columns);
    for j in 0..columns {
        let bearing = pose.yaw_deg + column_bearing_deg(j, columns, fov_deg);
        let mut depth = max_range;
        walk_ray(
            pose.x,
            pose.y,
            bearing,
            max_range,
            world.cell_size,
            world.rows,
            world.cols,
            |r, c, t| {
                if world.is_obstacle(r, c) {
                    depth = t.min(max_range);
                    false
                } else {
                    true
                }
            },
        );
        out.push(depth.max(f64::MIN_POSITIVE));
    }
    out
}

/// Kinematic parameters for the discrete action set. The collision radius is
/// `agent_radius + collision_margin`; the margin keeps the clearance of every
/// occupied cell at or above the agent radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    pub step_size_m: f64,
    pub turn_increment_deg: f64,
    pub agent_radius_m: f64,
    pub collision_margin_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub pose: Pose2D<f64>,
    pub collided: bool,
}

fn disc_hits_obstacle(world: &GridWorld, x: f64, y: f64, radius: f64) -> bool {
    let h = world.cell_size;
    let r0 = (((y - radius) / h).floor().max(0.0)) as usize;
    let c0 = (((x - radius) / h).floor().max(0.0)) as usize;
    let r1 = ((((y + radius) / h).ceil()) as usize).min(world.rows.saturating_sub(1));
    let c1 = ((((x + radius) / h).ceil()) as usize).min(world.cols.saturating_sub(1));
    for r in r0..=r1 {
        for c in c0..=c1 {
            if !world.is_obstacle(r, c) {
                continue;
            }
            // distance from the point to the cell's axis-aligned box
            let (cx0, cy0) = (c as f64 * h, r as f64 * h);
            let dx = (cx0 - x).max(0.0).max(x - (cx0 + h));
            let dy = (cy0 - y).max(0.0).max(y - (cy0 + h));
            if (dx * dx + dy * dy).sqrt() < radius {
                return true;
            }
        }
    }
    false
}

/// Applies one action. `Forward` sweeps a disc of the collision radius along
/// the step; on any contact the pose is unchanged and the collision flag is
/// set. Turns are exact. `Stop` leaves the pose unchanged.
pub fn apply_action(
    world: &GridWorld,
    pose: &Pose2D<f64>,
    action: Action,
    motion: &MotionParams,
) -> StepOutcome {
    match action {
        Action::Stop => StepOutcome {
            pose: *pose,
            collided: false,
        },
        Action::TurnLeft => StepOutcome {
            pose: Pose2D::new(pose.x, pose.y, pose.yaw_deg + motion.turn_increment_deg),
            collided: false,
        },
        Action::TurnRight => StepOutcome {
            pose: Pose2D::new(pose.x, pose.y, pose.yaw_deg - motion.turn_increment_deg),
            collided: false,
        },
        Action::Forward => {
            let yaw = pose.yaw_deg.to_radians();
            let (dx, dy) = (yaw.cos(), yaw.sin());
            let radius = motion.agent_radius_m + motion.collision_margin_m;
            let samples = ((motion.step_size_m / (world.cell_size * 0.25)).ceil() as usize).max(1);
            for k in 1..=samples {
                let t = motion.step_size_m * k as f64 / samples as f64;
                if disc_hits_obstacle(world, pose.x + dx * t, pose.y + dy * t, radius) {
                    return StepOutcome {
                        pose: *pose,
                        collided: true,
                    };
                }
            }
            StepOutcome {
                pose: Pose2D::new(
                    pose.x + dx * motion.step_size_m,
                    pose.y + dy * motion.step_size_m,
                    pose.yaw_deg,
                ),
                collided: false,
            }
        }
    }
}

/// One navigation episode over a named world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: u64,
    pub world_name: String,
    pub start: Pose2D<f64>,
    pub goal: Pose2D<f64>,
    pub max_steps: u32,
    pub seed: u64,
    pub success_radius_m: f64,
}

/// Constraints for episode sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConstraints {
    pub max_steps: u32,
    pub success_radius_m: f64,
    pub min_geodesic_m: f64,
    /// Minimum true clearance at the start and goal cells.
    pub min_clearance_m: f64,
}

impl Default for EpisodeConstraints {
    fn default() -> Self {
        Self {
            max_steps: 250,
            success_radius_m: 1.0,
            min_geodesic_m: 1.0,
            min_clearance_m: 0.25,
        }
    }
}

/// Rejection-samples `count` episodes across the given worlds (round-robin).
/// Start and goal sit on cell centers with clearance at least the constraint
/// and a finite geodesic of at least the minimum. Deterministic in `seed`.
pub fn generate_episode_suite(
    worlds: &[Arc<GridWorld>],
    count: usize,
    seed: u64,
    constraints: &EpisodeConstraints,
) -> Result<Vec<Episode>, SimError> {
    if worlds.is_empty() && count > 0 {
        return Err(SimError::Generation("no worlds supplied".into()));
    }
    let mut episodes = Vec::with_capacity(count);

    // per-world viable cells (free, clear enough), in deterministic order
    let mut viable: Vec<Vec<(usize, usize)>> = Vec::with_capacity(worlds.len());
    for world in worlds {
        let clearance = world.clearance_cells();
        let mut cells = Vec::new();
        for r in 0..world.rows() {
            for c in 0..world.cols() {
                if !world.is_obstacle(r, c)
                    && clearance[r * world.cols() + c] >= constraints.min_clearance_m
                {
                    cells.push((r, c));
                }
            }
        }
        viable.push(cells);
    }

    for i in 0..count {
        let widx = i % worlds.len();
        let world = &worlds[widx];
        let cells = &viable[widx];
        if cells.is_empty() {
            return Err(SimError::Generation(format!(
                "world {} has no viable cells",
                world.name()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
        let mut placed = None;
        for _attempt in 0..200 {
            let start_cell = cells[rng.random_range(0..cells.len())];
            let field = world.geodesic_field(start_cell);
            let goal_cell = cells[rng.random_range(0..cells.len())];
            let d = field[goal_cell.0 * world.cols() + goal_cell.1];
            if d.is_finite() && d >= constraints.min_geodesic_m {
                let (sx, sy) = world.cell_center(start_cell.0, start_cell.1);
                let (gx, gy) = world.cell_center(goal_cell.0, goal_cell.1);
                placed = Some((
                    Pose2D::new(sx, sy, rng.random_range(0.0..360.0)),
                    Pose2D::new(gx, gy, rng.random_range(0.0..360.0)),
                ));
                break;
            }
        }
        let (start, goal) = placed.ok_or_else(|| {
            SimError::Generation(format!(
                "no valid start/goal pair found in world {}",
                world.name()
            ))
        })?;
        episodes.push(Episode {
            id: i as u64,
            world_name: world.name().to_string(),
            start,
            goal,
            max_steps: constraints.max_steps,
            seed: mix_seed(seed, 0x5EED_0000 ^ i as u64),
            success_radius_m: constraints.success_radius_m,
        });
    }
    Ok(episodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn box_world(rows: usize, cols: usize) -> GridWorld {
        let mut text = String::new();
        for r in 0..rows {
            for c in 0..cols {
                let boundary = r == 0 || c == 0 || r == rows - 1 || c == cols - 1;
                text.push(if boundary { '#' } else { '.' });
            }
            text.push('\n');
        }
        GridWorld::from_ascii("box", &text, 0.05).unwrap()
    }

    #[test]
    fn ascii_round_trip() {
        let world = box_world(8, 10);
        let text = world.to_ascii();
        let again = GridWorld::from_ascii("box", &text, 0.05).unwrap();
        assert_eq!(world, again);
    }

    #[test]
    fn ascii_rejects_open_boundary_and_bad_chars() {
        assert!(GridWorld::from_ascii("bad", "###\n#.#\n#.#\n", 0.05).is_err());
        assert!(GridWorld::from_ascii("bad", "###\n#x#\n###\n", 0.05).is_err());
        assert!(GridWorld::from_ascii("bad", "###\n###\n###\n", 0.05).is_err());
    }

    #[test]
    fn raycast_hits_wall_at_exact_distance() {
        // 3.2 m box; agent at x=1.025 facing +x; east wall inner boundary at
        // x = 3.15
        let world = box_world(64, 64);
        let pose = Pose2D::new(1.025, 1.625, 0.0);
        let depth = raycast_depth(&world, &pose, 90.0, 61, 10.0);
        assert_relative_eq!(depth[30], 3.15 - 1.025, epsilon = 1e-9);
    }

    #[test]
    fn raycast_clamps_at_max_range() {
        let world = box_world(64, 64);
        let pose = Pose2D::new(1.025, 1.625, 0.0);
        let depth = raycast_depth(&world, &pose, 90.0, 61, 1.0);
        assert_eq!(depth[30], 1.0);
        assert!(depth.iter().all(|&d| d > 0.0 && d <= 1.0));
    }

    #[test]
    fn raycast_matches_cell_walk_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            // random interior obstacles
            let mut text_rows = Vec::new();
            for r in 0..32 {
                let mut line = String::new();
                for c in 0..32 {
                    let boundary = r == 0 || c == 0 || r == 31 || c == 31;
                    line.push(if boundary || rng.random::<f64>() < 0.1 { '#' } else { '.' });
                }
                text_rows.push(line);
            }
            let world = match GridWorld::from_ascii("rand", &text_rows.join("\n"), 0.05) {
                Ok(w) => w,
                Err(_) => continue,
            };
            // pick a free cell
            let mut pose = None;
            'outer: for r in 1..31 {
                for c in 1..31 {
                    if !world.is_obstacle(r, c) {
                        let (x, y) = world.cell_center(r, c);
                        pose = Some(Pose2D::new(x, y, rng.random::<f64>() * 360.0));
                        break 'outer;
                    }
                }
            }
            let pose = match pose {
                Some(p) => p,
                None => continue,
            };
            let depth = raycast_depth(&world, &pose, 90.0, 31, 5.0);
            for (j, &d) in depth.iter().enumerate() {
                // brute-force march in small steps until an obstacle cell
                let bearing =
                    (pose.yaw_deg + column_bearing_deg(j, 31, 90.0)).to_radians();
                let (dx, dy) = (bearing.cos(), bearing.sin());
                let mut t = 0.0;
                let oracle = loop {
                    t += 0.001;
                    if t >= 5.0 {
                        break 5.0;
                    }
                    let (x, y) = (pose.x + dx * t, pose.y + dy * t);
                    match world.world_to_cell(x, y) {
                        Some((r, c)) if world.is_obstacle(r, c) => break t,
                        Some(_) => {}
                        None => break t,
                    }
                };
                assert!(
                    (d - oracle).abs() <= world.cell_size(),
                    "column {j}: DDA {d} vs oracle {oracle}"
                );
            }
        }
    }

    fn motion() -> MotionParams {
        MotionParams {
            step_size_m: 0.25,
            turn_increment_deg: 90.0,
            agent_radius_m: 0.18,
            collision_margin_m: 0.05,
        }
    }

    #[test]
    fn forward_in_open_space_advances_exactly() {
        let world = box_world(64, 64);
        let pose = Pose2D::new(1.6, 1.6, 0.0);
        let out = apply_action(&world, &pose, Action::Forward, &motion());
        assert!(!out.collided);
        assert_relative_eq!(out.pose.x, 1.85);
        assert_relative_eq!(out.pose.y, 1.6);
    }

    #[test]
    fn forward_into_wall_is_blocked() {
        let world = box_world(64, 64);
        // east wall inner surface at x = 3.15; 0.1 m in front of the disc
        let pose = Pose2D::new(3.15 - 0.23 - 0.1, 1.6, 0.0);
        let out = apply_action(&world, &pose, Action::Forward, &motion());
        assert!(out.collided);
        assert_eq!(out.pose, pose);
    }

    #[test]
    fn four_left_turns_return_to_start_yaw() {
        let world = box_world(16, 16);
        let mut pose = Pose2D::new(0.4, 0.4, 33.0);
        for _ in 0..4 {
            pose = apply_action(&world, &pose, Action::TurnLeft, &motion()).pose;
        }
        assert_relative_eq!(pose.yaw_deg, 33.0, epsilon = 1e-9);
    }

    #[test]
    fn suite_generation_is_deterministic_and_constrained() {
        let world = Arc::new(box_world(64, 64));
        let constraints = EpisodeConstraints::default();
        let a = generate_episode_suite(&[world.clone()], 20, 7, &constraints).unwrap();
        let b = generate_episode_suite(&[world.clone()], 20, 7, &constraints).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        for ep in &a {
            let start = world.world_to_cell(ep.start.x, ep.start.y).unwrap();
            let goal = world.world_to_cell(ep.goal.x, ep.goal.y).unwrap();
            let field = world.geodesic_field(start);
            let d = field[goal.0 * world.cols() + goal.1];
            assert!(d.is_finite() && d >= constraints.min_geodesic_m);
        }
        assert!(generate_episode_suite(&[world], 0, 7, &constraints)
            .unwrap()
            .is_empty());
    }
}
