//! Bird's-eye-view relevance mapping: per-pixel relevance against the goal,
//! Gaussian-weighted ray compression, cone-masked depth-truncated projection,
//! confidence-weighted accumulation into a persistent grid, occupancy mapping
//! from depth scans, and frontier extraction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose2D;
use crate::ray::walk_ray;
use crate::scalar::{deg_to_rad, real, to_f64, wrap_deg_pm180, Real};

/// Radius of the disc around a frontier centroid over which the unexplored
/// cell ratio (information gain) is measured.
pub const INFO_GAIN_RADIUS_M: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BevError {
    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: String, right: String },
    #[error("agent pose lies outside the grid")]
    PoseOutsideGrid,
    #[error("bearing outside the field of view")]
    OutOfFov,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Dense per-pixel feature map with `dim` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid<T> {
    height: usize,
    width: usize,
    dim: usize,
    values: Vec<T>,
}

impl<T: Real> FeatureGrid<T> {
    pub fn new(height: usize, width: usize, dim: usize, values: Vec<T>) -> Result<Self, BevError> {
        if dim == 0 {
            return Err(BevError::InvalidInput("feature dim must be >= 1".into()));
        }
        if values.len() != height * width * dim {
            return Err(BevError::ShapeMismatch {
                left: format!("{}x{}x{}", height, width, dim),
                right: format!("{} values", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BevError::InvalidInput("non-finite feature value".into()));
        }
        Ok(Self {
            height,
            width,
            dim,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn at(&self, row: usize, col: usize) -> &[T] {
        let base = (row * self.width + col) * self.dim;
        &self.values[base..base + self.dim]
    }
}

/// Per-pixel relevance in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceImage<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Real> RelevanceImage<T> {
    pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self, BevError> {
        if values.len() != height * width {
            return Err(BevError::ShapeMismatch {
                left: format!("{}x{}", height, width),
                right: format!("{} values", values.len()),
            });
        }
        let one = T::one();
        if values.iter().any(|v| !v.is_finite() || *v > one || *v < -one) {
            return Err(BevError::InvalidInput(
                "relevance outside [-1, 1] or non-finite".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn at(&self, row: usize, col: usize) -> T {
        self.values[row * self.width + col]
    }

    /// Maximum entry; the cascade's semantic proximity score.
    pub fn max_value(&self) -> T {
        self.values
            .iter()
            .copied()
            .fold(-T::one(), |a, b| if b > a { b } else { a })
    }
}

/// Frustum and grid parameters for projecting image-space relevance to BEV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionParams<T> {
    /// Gaussian row-weight standard deviation, in pixels.
    pub sigma_h_px: T,
    /// Horizontal field of view, degrees.
    pub fov_deg: T,
    /// Image/ray column count.
    pub columns: usize,
    /// Grid cell edge length, meters.
    pub cell_size_m: T,
    /// Depth clamp and projection radius, meters.
    pub max_range_m: T,
}

impl<T: Real> Default for ProjectionParams<T> {
    fn default() -> Self {
        Self {
            sigma_h_px: real(16.0),
            fov_deg: real(90.0),
            columns: 61,
            cell_size_m: real(0.05),
            max_range_m: real(10.0),
        }
    }
}

impl<T: Real> ProjectionParams<T> {
    pub fn validate(&self) -> Result<(), BevError> {
        if self.sigma_h_px <= T::zero() {
            return Err(BevError::InvalidInput("sigma_h must be positive".into()));
        }
        if self.fov_deg <= T::zero() || self.fov_deg >= real(180.0) {
            return Err(BevError::InvalidInput("fov must be in (0, 180)".into()));
        }
        if self.cell_size_m <= T::zero() || self.max_range_m <= T::zero() || self.columns == 0 {
            return Err(BevError::InvalidInput("non-positive projection size".into()));
        }
        Ok(())
    }
}

/// Bearing of the center of image column `col`, relative to the optical axis.
/// Column 0 is the leftmost column (positive bearing, counter-clockwise).
pub fn column_bearing_deg<T: Real>(col: usize, columns: usize, fov_deg: T) -> T {
    let w = real::<T>(columns as f64);
    let half = fov_deg / real(2.0);
    half - (real::<T>(col as f64) + real(0.5)) * fov_deg / w
}

/// Image column whose angular bin contains the given bearing (clamped).
pub fn bearing_to_column<T: Real>(bearing_deg: T, columns: usize, fov_deg: T) -> usize {
    let w = real::<T>(columns as f64);
    let half = fov_deg / real(2.0);
    let f = (half - bearing_deg) / fov_deg * w;
    let idx = f.floor();
    let idx = to_f64(idx).max(0.0) as usize;
    idx.min(columns - 1)
}

/// Per-pixel cosine similarity between observation and goal features.
/// Pixels with a zero-norm feature on either side get similarity 0.
pub fn relevance_map<T: Real>(
    feat_obs: &FeatureGrid<T>,
    feat_goal: &FeatureGrid<T>,
) -> Result<RelevanceImage<T>, BevError> {
    if feat_obs.height != feat_goal.height
        || feat_obs.width != feat_goal.width
        || feat_obs.dim != feat_goal.dim
    {
        return Err(BevError::ShapeMismatch {
            left: format!("{}x{}x{}", feat_obs.height, feat_obs.width, feat_obs.dim),
            right: format!("{}x{}x{}", feat_goal.height, feat_goal.width, feat_goal.dim),
        });
    }
    let mut values = Vec::with_capacity(feat_obs.height * feat_obs.width);
    for row in 0..feat_obs.height {
        for col in 0..feat_obs.width {
            let a = feat_obs.at(row, col);
            let b = feat_goal.at(row, col);
            let mut dot = T::zero();
            let mut na = T::zero();
            let mut nb = T::zero();
            for (x, y) in a.iter().zip(b.iter()) {
                dot += *x * *y;
                na += *x * *x;
                nb += *y * *y;
            }
            let denom = na.sqrt() * nb.sqrt();
            let v = if denom <= T::zero() {
                T::zero()
            } else {
                (dot / denom).clamp(-T::one(), T::one())
            };
            values.push(v);
        }
    }
    RelevanceImage::new(feat_obs.height, feat_obs.width, values)
}

/// Collapses a relevance image to one value per column: the maximum over
/// rows of the Gaussian-row-weighted image. Weights are normalized to peak 1
/// at the central row so a uniform image passes through unchanged.
pub fn compress_to_ray<T: Real>(image: &RelevanceImage<T>, sigma_h_px: T) -> Vec<T> {
    let h = image.height;
    let half = real::<T>(h as f64) / real(2.0);
    let two_sigma_sq = real::<T>(2.0) * sigma_h_px * sigma_h_px;

    let mut weights = Vec::with_capacity(h);
    let mut peak = T::zero();
    for i in 0..h {
        let d = real::<T>(i as f64) - half;
        let w = (-(d * d) / two_sigma_sq).exp();
        if w > peak {
            peak = w;
        }
        weights.push(w);
    }
    for w in &mut weights {
        *w /= peak;
    }

    (0..image.width)
        .map(|col| {
            // weighted values are bounded below by -1 (weights in [0,1])
            (0..h)
                .map(|row| weights[row] * image.at(row, col))
                .fold(-T::one(), |a, b| if b > a { b } else { a })
        })
        .collect()
}

/// Angular attenuation toward the field-of-view boundary: `cos²` of the
/// normalized bearing mapped onto a quarter period.
pub fn cone_mask<T: Real>(bearing_deg: T, fov_deg: T) -> Result<T, BevError> {
    let half = fov_deg / real(2.0);
    if bearing_deg.abs() > half {
        return Err(BevError::OutOfFov);
    }
    let c = deg_to_rad(bearing_deg / half * real(90.0)).cos();
    Ok(c * c)
}

/// Occupancy state of a grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Occupancy {
    Free,
    Obstacle,
    Unknown,
}

/// Persistent multi-channel BEV grid: occupancy, accumulated relevance, and
/// accumulation confidence. Relevance is zero wherever confidence is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMap<T> {
    rows: usize,
    cols: usize,
    occupancy: Vec<Occupancy>,
    relevance: Vec<T>,
    confidence: Vec<T>,
    origin_x: T,
    origin_y: T,
    cell_size: T,
    obstacle_revision: u64,
}

impl<T: Real> GridMap<T> {
    /// All-unknown map anchored at the given world origin.
    pub fn unknown(rows: usize, cols: usize, origin_x: T, origin_y: T, cell_size: T) -> Self {
        Self {
            rows,
            cols,
            occupancy: vec![Occupancy::Unknown; rows * cols],
            relevance: vec![T::zero(); rows * cols],
            confidence: vec![T::zero(); rows * cols],
            origin_x,
            origin_y,
            cell_size,
            obstacle_revision: 0,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cell_size(&self) -> T {
        self.cell_size
    }

    pub fn origin(&self) -> (T, T) {
        (self.origin_x, self.origin_y)
    }

    /// Bumped whenever a cell transitions to or from `Obstacle`; lets callers
    /// cache clearance fields across steps.
    pub fn obstacle_revision(&self) -> u64 {
        self.obstacle_revision
    }

    #[inline]
    fn idx(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.rows && col < self.cols);
        row * self.cols + col
    }

    pub fn occupancy(&self, row: usize, col: usize) -> Occupancy {
        self.occupancy[self.idx(row, col)]
    }

    pub fn set_occupancy(&mut self, row: usize, col: usize, state: Occupancy) {
        let i = self.idx(row, col);
        let old = self.occupancy[i];
        if old != state && (old == Occupancy::Obstacle || state == Occupancy::Obstacle) {
            self.obstacle_revision += 1;
        }
        self.occupancy[i] = state;
    }

    pub fn relevance(&self, row: usize, col: usize) -> T {
        self.relevance[self.idx(row, col)]
    }

    pub fn confidence(&self, row: usize, col: usize) -> T {
        self.confidence[self.idx(row, col)]
    }

    pub fn occupancy_cells(&self) -> &[Occupancy] {
        &self.occupancy
    }

    pub fn relevance_cells(&self) -> &[T] {
        &self.relevance
    }

    pub fn confidence_cells(&self) -> &[T] {
        &self.confidence
    }

    pub fn in_bounds(&self, row: i64, col: i64) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.rows && (col as usize) < self.cols
    }

    /// Cell containing the world point, if inside the grid.
    pub fn world_to_cell(&self, x: T, y: T) -> Option<(usize, usize)> {
        let fx = (x - self.origin_x) / self.cell_size;
        let fy = (y - self.origin_y) / self.cell_size;
        if fx < T::zero() || fy < T::zero() {
            return None;
        }
        let col = to_f64(fx.floor()) as usize;
        let row = to_f64(fy.floor()) as usize;
        if row < self.rows && col < self.cols {
            Some((row, col))
        } else {
            None
        }
    }

    /// World coordinates of a cell center.
    pub fn cell_center(&self, row: usize, col: usize) -> (T, T) {
        let half = real::<T>(0.5);
        (
            self.origin_x + (real::<T>(col as f64) + half) * self.cell_size,
            self.origin_y + (real::<T>(row as f64) + half) * self.cell_size,
        )
    }
}

/// One projected cone entry: cell, relevance value, accumulation confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConeCell<T> {
    pub cell: (usize, usize),
    pub value: T,
    pub confidence: T,
}

/// Projects a compressed relevance ray into the grid as a depth-truncated,
/// cone-masked sparse update. Cells beyond a column's depth receive nothing,
/// which keeps relevance from bleeding through obstacles. Values are clamped
/// at zero so the accumulated map stays nonnegative.
pub fn project_step_relevance<T: Real>(
    ray: &[T],
    depth_ray: &[T],
    agent: &Pose2D<T>,
    params: &ProjectionParams<T>,
    grid: &GridMap<T>,
) -> Result<Vec<ConeCell<T>>, BevError> {
    if ray.len() != params.columns || depth_ray.len() != params.columns {
        return Err(BevError::ShapeMismatch {
            left: format!("{} columns", params.columns),
            right: format!("ray {} / depth {}", ray.len(), depth_ray.len()),
        });
    }
    let (agent_row, agent_col) = grid
        .world_to_cell(agent.x, agent.y)
        .ok_or(BevError::PoseOutsideGrid)?;

    let range_cells = to_f64(params.max_range_m / grid.cell_size()).ceil() as i64;
    let half_fov = params.fov_deg / real(2.0);
    let mut out = Vec::new();

    let r0 = (agent_row as i64 - range_cells).max(0) as usize;
    let r1 = ((agent_row as i64 + range_cells) as usize).min(grid.rows() - 1);
    let c0 = (agent_col as i64 - range_cells).max(0) as usize;
    let c1 = ((agent_col as i64 + range_cells) as usize).min(grid.cols() - 1);

    for row in r0..=r1 {
        for col in c0..=c1 {
            let (cx, cy) = grid.cell_center(row, col);
            let dx = cx - agent.x;
            let dy = cy - agent.y;
            let range = (dx * dx + dy * dy).sqrt();
            if range > params.max_range_m || range <= real(1e-9) {
                continue;
            }
            let bearing = wrap_deg_pm180(crate::scalar::rad_to_deg(dy.atan2(dx)) - agent.yaw_deg);
            if bearing.abs() > half_fov {
                continue;
            }
            let col_idx = bearing_to_column(bearing, params.columns, params.fov_deg);
            if range > depth_ray[col_idx] {
                continue;
            }
            let mask = cone_mask(bearing, params.fov_deg).expect("bearing inside fov");
            let value = (mask * ray[col_idx]).max(T::zero());
            out.push(ConeCell {
                cell: (row, col),
                value,
                confidence: mask,
            });
        }
    }
    Ok(out)
}

/// Folds a projected cone into the persistent map with confidence-weighted
/// averaging: `G' = (G·C + v·c)/(C + c)`, `C' = (C² + c²)/(C + c)`.
pub fn accumulate<T: Real>(grid: &mut GridMap<T>, cone: &[ConeCell<T>]) {
    for entry in cone {
        let (row, col) = entry.cell;
        let i = grid.idx(row, col);
        let c_old = grid.confidence[i];
        let denom = c_old + entry.confidence;
        if denom <= T::zero() {
            continue;
        }
        let g_old = grid.relevance[i];
        grid.relevance[i] = (g_old * c_old + entry.value * entry.confidence) / denom;
        grid.confidence[i] = (c_old * c_old + entry.confidence * entry.confidence) / denom;
    }
}

/// Writes one depth scan into the occupancy channel: cells traversed by each
/// ray become `Free`, the cell at the measured depth becomes `Obstacle` when
/// the ray terminated before the range clamp.
pub fn integrate_depth_scan<T: Real>(
    grid: &mut GridMap<T>,
    agent: &Pose2D<T>,
    depth_ray: &[T],
    params: &ProjectionParams<T>,
) -> Result<(), BevError> {
    if depth_ray.len() != params.columns {
        return Err(BevError::ShapeMismatch {
            left: format!("{} columns", params.columns),
            right: format!("{} depths", depth_ray.len()),
        });
    }
    grid.world_to_cell(agent.x, agent.y)
        .ok_or(BevError::PoseOutsideGrid)?;

    let (ox, oy) = grid.origin();
    let x = to_f64(agent.x - ox);
    let y = to_f64(agent.y - oy);
    let cell = to_f64(grid.cell_size());
    let clamp = to_f64(params.max_range_m) - 1e-9;
    let rows = grid.rows();
    let cols = grid.cols();

    for (col_idx, depth) in depth_ray.iter().enumerate() {
        let bearing =
            agent.yaw_deg + column_bearing_deg(col_idx, params.columns, params.fov_deg);
        let d = to_f64(*depth);
        let hit_wall = d < clamp;
        let mut updates: Vec<(usize, usize, Occupancy)> = Vec::new();
        // Depths follow the raycast convention: distance to the obstacle
        // cell's entering boundary. Walk slightly past the depth so the hit
        // cell itself is delivered.
        walk_ray(x, y, to_f64(bearing), d + cell, cell, rows, cols, |r, c, t| {
            if t < d - 1e-9 {
                updates.push((r, c, Occupancy::Free));
                true
            } else {
                if hit_wall {
                    updates.push((r, c, Occupancy::Obstacle));
                }
                false
            }
        });
        for (r, c, state) in updates {
            if state == Occupancy::Free && grid.occupancy(r, c) == Occupancy::Obstacle {
                continue; // never downgrade a seen wall on boundary jitter
            }
            grid.set_occupancy(r, c, state);
        }
    }
    Ok(())
}

/// A cluster of free cells bordering unknown space.
///
/// `relevance` (max accumulated relevance over the cluster) and
/// `unexplored_ratio` (unknown fraction within [`INFO_GAIN_RADIUS_M`] of the
/// centroid) are filled by [`extract_frontiers`]; `geodesic_distance_m` and
/// `heading_deviation_deg` depend on the agent state and are filled by the
/// episode loop before scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Frontier<T> {
    pub cells: Vec<(usize, usize)>,
    /// World coordinates of the cluster centroid.
    pub centroid: (T, T),
    pub relevance: T,
    pub geodesic_distance_m: T,
    pub heading_deviation_deg: T,
    pub unexplored_ratio: T,
}

/// Extracts frontier clusters: free cells 8-adjacent to unknown cells,
/// clustered by 8-connectivity, clusters below `min_cluster` discarded.
/// Output order is deterministic: by (row, col) of each cluster's minimum
/// index.
pub fn extract_frontiers<T: Real>(grid: &GridMap<T>, min_cluster: usize) -> Vec<Frontier<T>> {
    let rows = grid.rows();
    let cols = grid.cols();
    let mut is_frontier = vec![false; rows * cols];

    for row in 0..rows {
        for col in 0..cols {
            if grid.occupancy(row, col) != Occupancy::Free {
                continue;
            }
            'neigh: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (row as i64 + dr, col as i64 + dc);
                    if grid.in_bounds(nr, nc)
                        && grid.occupancy(nr as usize, nc as usize) == Occupancy::Unknown
                    {
                        is_frontier[row * cols + col] = true;
                        break 'neigh;
                    }
                }
            }
        }
    }

    // flood-fill clusters in scan order so cluster ordering is deterministic
    let mut visited = vec![false; rows * cols];
    let mut frontiers = Vec::new();
    for row in 0..rows {
        for col in 0..cols {
            let i = row * cols + col;
            if !is_frontier[i] || visited[i] {
                continue;
            }
            let mut cells = Vec::new();
            let mut stack = vec![(row, col)];
            visited[i] = true;
            while let Some((r, c)) = stack.pop() {
                cells.push((r, c));
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                        if !grid.in_bounds(nr, nc) {
                            continue;
                        }
                        let ni = nr as usize * cols + nc as usize;
                        if is_frontier[ni] && !visited[ni] {
                            visited[ni] = true;
                            stack.push((nr as usize, nc as usize));
                        }
                    }
                }
            }
            if cells.len() < min_cluster {
                continue;
            }
            cells.sort_unstable();

            let n = real::<T>(cells.len() as f64);
            let mut cx = T::zero();
            let mut cy = T::zero();
            let mut relevance = T::zero();
            for &(r, c) in &cells {
                let (x, y) = grid.cell_center(r, c);
                cx += x;
                cy += y;
                let g = grid.relevance(r, c);
                if g > relevance {
                    relevance = g;
                }
            }
            cx /= n;
            cy /= n;

            frontiers.push(Frontier {
                cells,
                centroid: (cx, cy),
                relevance,
                geodesic_distance_m: T::zero(),
                heading_deviation_deg: T::zero(),
                unexplored_ratio: unexplored_ratio_at(grid, cx, cy),
            });
        }
    }
    frontiers
}

/// Fraction of unknown cells within [`INFO_GAIN_RADIUS_M`] of a world point.
fn unexplored_ratio_at<T: Real>(grid: &GridMap<T>, x: T, y: T) -> T {
    let radius = real::<T>(INFO_GAIN_RADIUS_M);
    let radius_cells = to_f64(radius / grid.cell_size()).ceil() as i64;
    let center = grid.world_to_cell(x, y);
    let (crow, ccol) = match center {
        Some(rc) => rc,
        None => return T::zero(),
    };
    let mut total = 0u32;
    let mut unknown = 0u32;
    for dr in -radius_cells..=radius_cells {
        for dc in -radius_cells..=radius_cells {
            let (nr, nc) = (crow as i64 + dr, ccol as i64 + dc);
            if !grid.in_bounds(nr, nc) {
                continue;
            }
            let (px, py) = grid.cell_center(nr as usize, nc as usize);
            let ddx = px - x;
            let ddy = py - y;
            if (ddx * ddx + ddy * ddy).sqrt() > radius {
                continue;
            }
            total += 1;
            if grid.occupancy(nr as usize, nc as usize) == Occupancy::Unknown {
                unknown += 1;
            }
        }
    }
    if total == 0 {
        T::zero()
    } else {
        real::<T>(unknown as f64) / real(total as f64)
    }
}
