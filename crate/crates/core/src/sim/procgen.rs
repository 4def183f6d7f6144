//! Seeded procedural worlds: rooms connected by corridors of configurable
//! width, carved out of solid rock.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GridWorld, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProcWorldSpec {
    pub rows: usize,
    pub cols: usize,
    pub cell_size_m: f64,
    pub min_rooms: usize,
    pub max_rooms: usize,
    /// Corridor width in cells; must comfortably exceed twice the agent's
    /// collision radius or the planner will refuse to enter.
    pub corridor_width_cells: usize,
}

impl Default for ProcWorldSpec {
    fn default() -> Self {
        Self {
            rows: 64,
            cols: 64,
            cell_size_m: 0.05,
            min_rooms: 3,
            max_rooms: 4,
            corridor_width_cells: 13,
        }
    }
}

/// Carves a rooms-and-corridors world. Deterministic in `seed`.
pub fn generate_world(spec: &ProcWorldSpec, seed: u64) -> Result<GridWorld, SimError> {
    if spec.rows < 16 || spec.cols < 16 {
        return Err(SimError::Generation("world too small".into()));
    }
    if spec.min_rooms == 0 || spec.min_rooms > spec.max_rooms {
        return Err(SimError::Generation("bad room range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = (spec.rows, spec.cols);
    let mut obstacle = vec![true; rows * cols];

    let n_rooms = rng.random_range(spec.min_rooms..=spec.max_rooms);
    let min_side = (rows.min(cols) / 5).max(8);
    let max_side = (rows.min(cols) / 2).max(min_side + 1);

    let mut centers: Vec<(usize, usize)> = Vec::new();
    let carve_rect = |obstacle: &mut Vec<bool>, r0: usize, c0: usize, r1: usize, c1: usize| {
        for r in r0.max(1)..=r1.min(rows - 2) {
            for c in c0.max(1)..=c1.min(cols - 2) {
                obstacle[r * cols + c] = false;
            }
        }
    };

    for _ in 0..n_rooms {
        let height = rng.random_range(min_side..max_side);
        let width = rng.random_range(min_side..max_side);
        let r0 = rng.random_range(1..rows - 1 - height);
        let c0 = rng.random_range(1..cols - 1 - width);
        carve_rect(&mut obstacle, r0, c0, r0 + height - 1, c0 + width - 1);
        centers.push((r0 + height / 2, c0 + width / 2));
    }

    // L-corridors between consecutive room centers keep everything connected
    let half = spec.corridor_width_cells / 2;
    for pair in centers.windows(2) {
        let (r_a, c_a) = pair[0];
        let (r_b, c_b) = pair[1];
        let (c_lo, c_hi) = (c_a.min(c_b), c_a.max(c_b));
        carve_rect(
            &mut obstacle,
            r_a.saturating_sub(half),
            c_lo.saturating_sub(half),
            r_a + half,
            c_hi + half,
        );
        let (r_lo, r_hi) = (r_a.min(r_b), r_a.max(r_b));
        carve_rect(
            &mut obstacle,
            r_lo.saturating_sub(half),
            c_b.saturating_sub(half),
            r_hi + half,
            c_b + half,
        );
    }

    GridWorld::from_mask(
        &format!("proc-{seed:016x}"),
        rows,
        cols,
        spec.cell_size_m,
        obstacle,
    )
}
