//! Occlusion-aware Fast Marching planning with a two-tier clearance
//! mechanism: a hard exclusion radius removes candidates the agent cannot
//! physically occupy, and a graded bonus discounts cost in proportion to
//! obstacle clearance up to a saturation radius.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bev::{GridMap, Occupancy};
use crate::geometry::Pose2D;
use crate::scalar::{real, to_f64, wrap_deg_pm180, Real};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlannerError {
    #[error("no free source cell")]
    NoFreeSource,
    #[error("all candidate waypoints are excluded or unreachable")]
    NoViableWaypoint,
}

/// Discrete agent action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Forward,
    TurnLeft,
    TurnRight,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerParams<T> {
    /// Hard exclusion radius: candidates with less clearance are removed.
    pub agent_radius_m: T,
    /// Clearance saturation radius for the graded bonus.
    pub safe_radius_m: T,
    /// Magnitude of the clearance bonus, meters of cost.
    pub clearance_bonus_m: T,
    /// Waypoint horizon around the agent.
    pub lookahead_m: T,
    pub step_size_m: T,
    pub turn_increment_deg: T,
    /// Disables both clearance tiers (the "plain" planner ablation).
    pub clearance_enabled: bool,
}

impl<T: Real> Default for PlannerParams<T> {
    fn default() -> Self {
        Self {
            agent_radius_m: real(0.18),
            safe_radius_m: real(0.5),
            clearance_bonus_m: real(0.3),
            lookahead_m: real(1.5),
            step_size_m: real(0.25),
            turn_increment_deg: real(30.0),
            clearance_enabled: true,
        }
    }
}

impl<T: Real> PlannerParams<T> {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.agent_radius_m > T::zero() && self.agent_radius_m <= self.safe_radius_m) {
            return Err("require 0 < agent_radius <= safe_radius".into());
        }
        if self.clearance_bonus_m < T::zero() || self.step_size_m <= T::zero() {
            return Err("require clearance_bonus >= 0 and step_size > 0".into());
        }
        let turns = real::<T>(360.0) / self.turn_increment_deg;
        if (turns - turns.round()).abs() > real(1e-9) {
            return Err("turn_increment must divide 360".into());
        }
        Ok(())
    }
}

/// Geodesic distance field from a set of source cells, meters. Obstacles and
/// unreachable cells hold +∞.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField<T> {
    rows: usize,
    cols: usize,
    cell_size: T,
    values: Vec<T>,
    sources: Vec<(usize, usize)>,
}

impl<T: Real> DistanceField<T> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cell_size(&self) -> T {
        self.cell_size
    }

    pub fn sources(&self) -> &[(usize, usize)] {
        &self.sources
    }

    pub fn at(&self, row: usize, col: usize) -> T {
        self.values[row * self.cols + col]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }
}

/// Per-cell Euclidean distance to the nearest obstacle, meters. Exact.
#[derive(Debug, Clone, PartialEq)]
pub struct ClearanceField<T> {
    rows: usize,
    cols: usize,
    cell_size: T,
    values: Vec<T>,
}

impl<T: Real> ClearanceField<T> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, row: usize, col: usize) -> T {
        self.values[row * self.cols + col]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }
}

#[derive(Debug, Clone, Copy)]
struct HeapItem<T> {
    dist: T,
    cell: (usize, usize),
}

impl<T: Real> PartialEq for HeapItem<T> {
    fn eq(&self, other: &Self) -> bool {
        self.dist == other.dist && self.cell == other.cell
    }
}

impl<T: Real> Eq for HeapItem<T> {}

impl<T: Real> Ord for HeapItem<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap via reversal; ties broken by cell index for determinism
        other
            .dist
            .partial_cmp(&self.dist)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.cell.cmp(&self.cell))
    }
}

impl<T: Real> PartialOrd for HeapItem<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// First-order upwind Eikonal solve with unit speed over a traversability
/// mask. Stops early once every `focus` cell is finalized (if given).
pub(crate) fn solve_eikonal<T: Real>(
    traversable: &[bool],
    rows: usize,
    cols: usize,
    cell_size: T,
    sources: &[(usize, usize)],
    focus: Option<&[(usize, usize)]>,
) -> Vec<T> {
    let inf = T::max_value().unwrap_or_else(|| real(f64::MAX));
    let mut values = vec![inf; rows * cols];
    let mut done = vec![false; rows * cols];
    let mut heap = BinaryHeap::new();

    for &(r, c) in sources {
        let i = r * cols + c;
        if traversable[i] {
            values[i] = T::zero();
            heap.push(HeapItem {
                dist: T::zero(),
                cell: (r, c),
            });
        }
    }

    let focus_mask = focus.map(|cells| {
        let mut mask = vec![false; rows * cols];
        let mut left = 0usize;
        for &(r, c) in cells {
            let i = r * cols + c;
            if traversable[i] && !mask[i] {
                mask[i] = true;
                left += 1;
            }
        }
        (mask, left)
    });
    let (focus_mask, mut focus_left) = match focus_mask {
        Some((m, l)) => (Some(m), l),
        None => (None, 0),
    };

    while let Some(HeapItem { dist, cell: (r, c) }) = heap.pop() {
        let i = r * cols + c;
        if done[i] {
            continue;
        }
        done[i] = true;
        if let Some(mask) = &focus_mask {
            if mask[i] {
                focus_left -= 1;
                if focus_left == 0 {
                    return values;
                }
            }
        }

        for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
            if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                continue;
            }
            let (nr, nc) = (nr as usize, nc as usize);
            let ni = nr * cols + nc;
            if !traversable[ni] || done[ni] {
                continue;
            }

            // upwind quadratic from the best axis neighbors
            let axis = |a: T, b: T| if a < b { a } else { b };
            let get = |rr: i64, cc: i64| -> T {
                if rr < 0 || cc < 0 || rr >= rows as i64 || cc >= cols as i64 {
                    inf
                } else {
                    values[rr as usize * cols + cc as usize]
                }
            };
            let ax = axis(get(nr as i64, nc as i64 - 1), get(nr as i64, nc as i64 + 1));
            let ay = axis(get(nr as i64 - 1, nc as i64), get(nr as i64 + 1, nc as i64));
            let (lo, hi) = if ax < ay { (ax, ay) } else { (ay, ax) };

            let cand = if hi >= inf || hi - lo >= cell_size {
                lo + cell_size
            } else {
                let diff = hi - lo;
                let disc = real::<T>(2.0) * cell_size * cell_size - diff * diff;
                (lo + hi + disc.sqrt()) / real(2.0)
            };
            if cand < values[ni] {
                values[ni] = cand;
                heap.push(HeapItem {
                    dist: cand,
                    cell: (nr, nc),
                });
            }
        }
        let _ = dist;
    }
    values
}

fn traversable_mask<T: Real>(grid: &GridMap<T>) -> Vec<bool> {
    // unknown space is traversable for planning: frontier targets are by
    // definition adjacent to unknown cells
    grid.occupancy_cells()
        .iter()
        .map(|&o| o != Occupancy::Obstacle)
        .collect()
}

/// Geodesic distance field from `sources` over the grid. Unknown cells are
/// traversable at unit speed; obstacle cells are +∞. Sources that are not
/// `Free` are dropped; if none remain the solve fails.
pub fn fmm_distance<T: Real>(
    grid: &GridMap<T>,
    sources: &[(usize, usize)],
) -> Result<DistanceField<T>, PlannerError> {
    fmm_distance_toward(grid, sources, None)
}

/// [`fmm_distance`] that may stop early once all `focus` cells are settled;
/// values outside the settled front are +∞ and must not be read.
pub fn fmm_distance_toward<T: Real>(
    grid: &GridMap<T>,
    sources: &[(usize, usize)],
    focus: Option<&[(usize, usize)]>,
) -> Result<DistanceField<T>, PlannerError> {
    let free_sources: Vec<(usize, usize)> = sources
        .iter()
        .copied()
        .filter(|&(r, c)| grid.occupancy(r, c) == Occupancy::Free)
        .collect();
    if free_sources.is_empty() {
        return Err(PlannerError::NoFreeSource);
    }
    let mask = traversable_mask(grid);
    let values = solve_eikonal(
        &mask,
        grid.rows(),
        grid.cols(),
        grid.cell_size(),
        &free_sources,
        focus,
    );
    Ok(DistanceField {
        rows: grid.rows(),
        cols: grid.cols(),
        cell_size: grid.cell_size(),
        values,
        sources: free_sources,
    })
}

/// Exact two-pass squared Euclidean distance transform over an obstacle
/// mask (Felzenszwalb–Huttenlocher lower envelopes), in cell units.
pub(crate) fn edt_squared_cells(obstacle: &[bool], rows: usize, cols: usize) -> Vec<f64> {
    const INF: f64 = 1e20;

    // pass 1: per column, squared distance along rows to the nearest obstacle
    let mut g = vec![INF; rows * cols];
    for c in 0..cols {
        let f: Vec<f64> = (0..rows)
            .map(|r| if obstacle[r * cols + c] { 0.0 } else { INF })
            .collect();
        let d = dt_1d(&f);
        for r in 0..rows {
            g[r * cols + c] = d[r];
        }
    }

    // pass 2: per row, combine along columns
    let mut out = vec![INF; rows * cols];
    for r in 0..rows {
        let f: Vec<f64> = (0..cols).map(|c| g[r * cols + c]).collect();
        let d = dt_1d(&f);
        for c in 0..cols {
            out[r * cols + c] = d[c];
        }
    }
    out
}

/// 1-D squared distance transform of a sampled function (lower envelope of
/// parabolas).
fn dt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -1e20;
    z[1] = 1e20;

    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                break;
            }
        }
        if s <= z[k] && k == 0 {
            // q's parabola dominates everything so far
            v[0] = q;
            z[0] = -1e20;
            z[1] = 1e20;
        } else {
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = 1e20;
        }
    }

    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        d[q] = dq * dq + f[p];
    }
    d
}

/// Exact Euclidean distance transform of the grid's obstacle set, meters.
/// With no obstacles anywhere, values clamp at the grid diameter, which is
/// beyond any useful range.
pub fn edt<T: Real>(grid: &GridMap<T>) -> ClearanceField<T> {
    let obstacle: Vec<bool> = grid
        .occupancy_cells()
        .iter()
        .map(|&o| o == Occupancy::Obstacle)
        .collect();
    let sq = edt_squared_cells(&obstacle, grid.rows(), grid.cols());
    let ceiling = real::<T>((grid.rows() + grid.cols()) as f64) * grid.cell_size();
    let values = sq
        .iter()
        .map(|&s| {
            if s >= 1e19 {
                ceiling
            } else {
                real::<T>(s.sqrt()) * grid.cell_size()
            }
        })
        .collect();
    ClearanceField {
        rows: grid.rows(),
        cols: grid.cols(),
        cell_size: grid.cell_size(),
        values,
    }
}

/// Clearance-adjusted cost of a candidate cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdjustedCost<T> {
    /// Clearance below the agent radius: the candidate is removed outright.
    Excluded,
    Cost(T),
}

/// Applies the two-tier clearance rule: exclusion below the agent radius,
/// otherwise `d − bonus · min(clearance, safe) / safe`, clamped at zero.
pub fn adjusted_cost<T: Real>(
    distance: T,
    clearance: T,
    params: &PlannerParams<T>,
) -> AdjustedCost<T> {
    if !params.clearance_enabled {
        return AdjustedCost::Cost(distance);
    }
    if clearance < params.agent_radius_m {
        return AdjustedCost::Excluded;
    }
    let bonus =
        params.clearance_bonus_m * clearance.min(params.safe_radius_m) / params.safe_radius_m;
    AdjustedCost::Cost((distance - bonus).max(T::zero()))
}

/// Picks the cell within the lookahead disc of the agent minimizing the
/// clearance-adjusted cost. Ties break toward the smaller raw distance, then
/// toward the smaller (row, col).
pub fn select_waypoint<T: Real>(
    dist: &DistanceField<T>,
    clearance: &ClearanceField<T>,
    agent: &Pose2D<T>,
    grid: &GridMap<T>,
    params: &PlannerParams<T>,
) -> Result<(usize, usize), PlannerError> {
    let (arow, acol) = grid
        .world_to_cell(agent.x, agent.y)
        .ok_or(PlannerError::NoViableWaypoint)?;
    let radius_cells = to_f64(params.lookahead_m / grid.cell_size()).ceil() as i64;
    let inf_gate = real::<T>(1e18);

    let mut best: Option<((usize, usize), T, T)> = None; // cell, cost, raw d
    for dr in -radius_cells..=radius_cells {
        for dc in -radius_cells..=radius_cells {
            let (r, c) = (arow as i64 + dr, acol as i64 + dc);
            if !grid.in_bounds(r, c) {
                continue;
            }
            let (r, c) = (r as usize, c as usize);
            let (cx, cy) = grid.cell_center(r, c);
            let dx = cx - agent.x;
            let dy = cy - agent.y;
            if (dx * dx + dy * dy).sqrt() > params.lookahead_m {
                continue;
            }
            if grid.occupancy(r, c) == Occupancy::Obstacle {
                continue;
            }
            let d = dist.at(r, c);
            if d >= inf_gate {
                continue;
            }
            let cost = match adjusted_cost(d, clearance.at(r, c), params) {
                AdjustedCost::Excluded => continue,
                AdjustedCost::Cost(v) => v,
            };
            let better = match &best {
                None => true,
                Some((bc, bcost, bd)) => {
                    cost < *bcost
                        || (cost == *bcost && d < *bd)
                        || (cost == *bcost && d == *bd && (r, c) < *bc)
                }
            };
            if better {
                best = Some(((r, c), cost, d));
            }
        }
    }
    best.map(|(cell, _, _)| cell)
        .ok_or(PlannerError::NoViableWaypoint)
}

/// Discrete steering toward a world point: turn while the bearing error
/// exceeds half the turn increment, otherwise drive forward.
pub fn local_step<T: Real>(
    agent: &Pose2D<T>,
    waypoint_x: T,
    waypoint_y: T,
    params: &PlannerParams<T>,
) -> Action {
    let bearing = agent.bearing_to_deg(waypoint_x, waypoint_y);
    let err = wrap_deg_pm180(bearing - agent.yaw_deg);
    let half = params.turn_increment_deg / real(2.0);
    if err.abs() > half {
        if err > T::zero() {
            Action::TurnLeft
        } else {
            Action::TurnRight
        }
    } else {
        Action::Forward
    }
}
