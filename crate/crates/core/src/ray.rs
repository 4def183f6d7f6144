//! Grid ray traversal (Amanatides–Woo DDA), shared by the occupancy mapper,
//! the depth raycaster and the visibility oracles.

/// Walks the ray from `(origin_x, origin_y)` along `bearing_deg` across a
/// `rows × cols` grid of `cell_size` cells anchored at the world origin.
///
/// `visit(row, col, t_enter)` is called for every traversed cell in order,
/// starting with the origin cell at `t_enter = 0`. Returning `false` stops
/// the walk. The walk also stops at `max_dist` or at the grid edge.
pub(crate) fn walk_ray(
    origin_x: f64,
    origin_y: f64,
    bearing_deg: f64,
    max_dist: f64,
    cell_size: f64,
    rows: usize,
    cols: usize,
    mut visit: impl FnMut(usize, usize, f64) -> bool,
) {
    let b = bearing_deg.to_radians();
    let (dx, dy) = (b.cos(), b.sin());

    let mut col = (origin_x / cell_size).floor() as i64;
    let mut row = (origin_y / cell_size).floor() as i64;
    if row < 0 || col < 0 || row >= rows as i64 || col >= cols as i64 {
        return;
    }

    let step_col: i64 = if dx > 0.0 { 1 } else { -1 };
    let step_row: i64 = if dy > 0.0 { 1 } else { -1 };

    let next_boundary = |cell: i64, step: i64| -> f64 {
        if step > 0 {
            (cell + 1) as f64 * cell_size
        } else {
            cell as f64 * cell_size
        }
    };
    let mut t_max_x = if dx.abs() < 1e-15 {
        f64::INFINITY
    } else {
        (next_boundary(col, step_col) - origin_x) / dx
    };
    let mut t_max_y = if dy.abs() < 1e-15 {
        f64::INFINITY
    } else {
        (next_boundary(row, step_row) - origin_y) / dy
    };
    let t_delta_x = if dx.abs() < 1e-15 {
        f64::INFINITY
    } else {
        cell_size / dx.abs()
    };
    let t_delta_y = if dy.abs() < 1e-15 {
        f64::INFINITY
    } else {
        cell_size / dy.abs()
    };

    let mut t_enter = 0.0;
    loop {
        if !visit(row as usize, col as usize, t_enter) {
            return;
        }
        if t_max_x <= t_max_y {
            t_enter = t_max_x;
            t_max_x += t_delta_x;
            col += step_col;
        } else {
            t_enter = t_max_y;
            t_max_y += t_delta_y;
            row += step_row;
        }
        if t_enter > max_dist
            || row < 0
            || col < 0
            || row >= rows as i64
            || col >= cols as i64
        {
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_aligned_walk_hits_consecutive_cells() {
        let mut cells = Vec::new();
        walk_ray(0.125, 0.125, 0.0, 0.3, 0.05, 10, 10, |r, c, t| {
            cells.push((r, c, t));
            true
        });
        // starts in cell (2, 2), moves along +x
        assert_eq!(cells[0], (2, 2, 0.0));
        assert_eq!(cells[1].0, 2);
        assert_eq!(cells[1].1, 3);
        assert!((cells[1].2 - 0.025).abs() < 1e-12);
        let last = cells.last().unwrap();
        assert!(last.2 <= 0.3);
    }

    #[test]
    fn diagonal_walk_stays_in_bounds() {
        let mut count = 0;
        walk_ray(0.01, 0.01, 225.0, 10.0, 0.05, 8, 8, |_, _, _| {
            count += 1;
            true
        });
        assert_eq!(count, 1); // immediately leaves the grid going down-left
    }

    #[test]
    fn early_stop_respected() {
        let mut count = 0;
        walk_ray(0.5, 0.5, 45.0, 10.0, 0.1, 64, 64, |_, _, _| {
            count += 1;
            count < 5
        });
        assert_eq!(count, 5);
    }
}
