//! Debug dumps of grid channels and planner fields as portable graymap
//! (PGM, binary P5) images with a JSON sidecar carrying the geometry and
//! value scaling.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::bev::{GridMap, Occupancy};
use crate::scalar::{to_f64, Real};

#[derive(Debug, Serialize)]
struct ChannelMeta {
    file: String,
    /// Value mapped to pixel 254; pixels scale linearly from 0.
    max_value: f64,
    /// Pixel value reserved for +∞ (distance fields only).
    #[serde(skip_serializing_if = "Option::is_none")]
    infinity_pixel: Option<u8>,
}

#[derive(Debug, Serialize)]
struct Sidecar {
    rows: usize,
    cols: usize,
    cell_size_m: f64,
    origin_m: [f64; 2],
    channels: Vec<ChannelMeta>,
}

/// Writes a binary 8-bit PGM.
pub fn write_pgm(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> io::Result<()> {
    assert_eq!(pixels.len(), rows * cols);
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{cols} {rows}\n255\n")?;
    out.write_all(pixels)?;
    Ok(())
}

fn scale_to_pixels<T: Real>(values: &[T]) -> (Vec<u8>, f64, bool) {
    let mut max = 0.0f64;
    let mut has_inf = false;
    for v in values {
        let f = to_f64(*v);
        if f.is_finite() && f < 1e18 {
            max = max.max(f);
        } else {
            has_inf = true;
        }
    }
    let scale = if max > 0.0 { 254.0 / max } else { 0.0 };
    let pixels = values
        .iter()
        .map(|v| {
            let f = to_f64(*v);
            if f.is_finite() && f < 1e18 {
                (f * scale).round().clamp(0.0, 254.0) as u8
            } else {
                255
            }
        })
        .collect();
    (pixels, max, has_inf)
}

/// Dumps the grid's occupancy, relevance and confidence channels next to a
/// `<stem>.json` sidecar. Returns the written paths.
pub fn dump_gridmap<T: Real>(grid: &GridMap<T>, dir: &Path, stem: &str) -> io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut channels = Vec::new();

    let occ_pixels: Vec<u8> = grid
        .occupancy_cells()
        .iter()
        .map(|o| match o {
            Occupancy::Free => 255u8,
            Occupancy::Unknown => 128,
            Occupancy::Obstacle => 0,
        })
        .collect();
    let occ_path = dir.join(format!("{stem}_occupancy.pgm"));
    write_pgm(&occ_path, grid.rows(), grid.cols(), &occ_pixels)?;
    channels.push(ChannelMeta {
        file: occ_path.file_name().unwrap().to_string_lossy().into_owned(),
        max_value: 1.0,
        infinity_pixel: None,
    });
    written.push(occ_path);

    for (name, values) in [
        ("relevance", grid.relevance_cells()),
        ("confidence", grid.confidence_cells()),
    ] {
        let (pixels, max, _) = scale_to_pixels(values);
        let path = dir.join(format!("{stem}_{name}.pgm"));
        write_pgm(&path, grid.rows(), grid.cols(), &pixels)?;
        channels.push(ChannelMeta {
            file: path.file_name().unwrap().to_string_lossy().into_owned(),
            max_value: max,
            infinity_pixel: None,
        });
        written.push(path);
    }

    let (ox, oy) = grid.origin();
    let sidecar = Sidecar {
        rows: grid.rows(),
        cols: grid.cols(),
        cell_size_m: to_f64(grid.cell_size()),
        origin_m: [to_f64(ox), to_f64(oy)],
        channels,
    };
    let path = dir.join(format!("{stem}.json"));
    serde_json::to_writer_pretty(BufWriter::new(File::create(&path)?), &sidecar)?;
    written.push(path);
    Ok(written)
}

/// Dumps one scalar field (distance or clearance values, +∞ rendered as
/// pixel 255) with its sidecar.
pub fn dump_scalar_field<T: Real>(
    values: &[T],
    rows: usize,
    cols: usize,
    cell_size_m: f64,
    dir: &Path,
    stem: &str,
) -> io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let (pixels, max, has_inf) = scale_to_pixels(values);
    let pgm = dir.join(format!("{stem}.pgm"));
    write_pgm(&pgm, rows, cols, &pixels)?;
    let sidecar = Sidecar {
        rows,
        cols,
        cell_size_m,
        origin_m: [0.0, 0.0],
        channels: vec![ChannelMeta {
            file: pgm.file_name().unwrap().to_string_lossy().into_owned(),
            max_value: max,
            infinity_pixel: has_inf.then_some(255),
        }],
    };
    let json = dir.join(format!("{stem}.json"));
    serde_json::to_writer_pretty(BufWriter::new(File::create(&json)?), &sidecar)?;
    Ok(vec![pgm, json])
}
