//! Binary occupancy maps with a projective world-to-pixel mapping.
//!
//! Pixel coordinates are `(u, v) = (column, row)`. A continuous pixel
//! coordinate is looked up by flooring both components; anything that lands
//! outside the grid counts as an obstacle.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec2;

pub const OBSTACLE: u8 = 0;
pub const WALKABLE: u8 = 1;

const DET_EPS: f64 = 1e-12;
const W_EPS: f64 = 1e-12;

/// Row-major 3×3 projective transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Homography {
    pub const IDENTITY: Homography =
        Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    /// World meters to pixels at a uniform `pixels_per_meter` scale.
    pub fn scaling(pixels_per_meter: f64) -> Self {
        Homography([
            [pixels_per_meter, 0.0, 0.0],
            [0.0, pixels_per_meter, 0.0],
            [0.0, 0.0, 1.0],
        ])
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(Error::Validation(format!(
                "homography needs 9 numbers, got {}",
                v.len()
            )));
        }
        let mut m = [[0.0; 3]; 3];
        for (i, x) in v.iter().enumerate() {
            m[i / 3][i % 3] = *x;
        }
        Ok(Homography(m))
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Result<Homography> {
        let d = self.det();
        if !d.is_finite() || d.abs() <= DET_EPS {
            return Err(Error::Validation(format!(
                "homography is singular (det = {d:e})"
            )));
        }
        let m = &self.0;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| {
            m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]
        };
        // adjugate / det
        let inv = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        let mut out = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                out[r][c] = inv[r][c] / d;
            }
        }
        Ok(Homography(out))
    }

    pub fn apply(&self, p: Vec2) -> Result<Vec2> {
        let m = &self.0;
        let x = m[0][0] * p.x + m[0][1] * p.y + m[0][2];
        let y = m[1][0] * p.x + m[1][1] * p.y + m[1][2];
        let w = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
        if !(w.abs() >= W_EPS) {
            return Err(Error::Projection { w });
        }
        Ok(Vec2::new(x / w, y / w))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMap {
    width: usize,
    height: usize,
    cells: Vec<u8>,
    world_to_pixel: Homography,
    pixel_to_world: Homography,
}

impl OccupancyMap {
    /// Builds a map from row-major cells (0 = obstacle, 1 = walkable).
    pub fn new(width: usize, height: usize, cells: Vec<u8>, world_to_pixel: Homography) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::Validation(format!(
                "map must be at least 2x2, got {width}x{height}"
            )));
        }
        if cells.len() != width * height {
            return Err(Error::Shape {
                expected: width * height,
                actual: cells.len(),
            });
        }
        if let Some(bad) = cells.iter().find(|&&c| c > 1) {
            return Err(Error::Validation(format!("cell value {bad} is not binary")));
        }
        let pixel_to_world = world_to_pixel.inverse()?;
        Ok(Self {
            width,
            height,
            cells,
            world_to_pixel,
            pixel_to_world,
        })
    }

    /// A map with no obstacles.
    pub fn open(width: usize, height: usize, world_to_pixel: Homography) -> Result<Self> {
        Self::new(width, height, vec![WALKABLE; width * height], world_to_pixel)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn homography(&self) -> &Homography {
        &self.world_to_pixel
    }

    /// Cell value at integer pixel `(col, row)`; out-of-range is obstacle.
    pub fn cell(&self, col: i64, row: i64) -> u8 {
        if col < 0 || row < 0 || col >= self.width as i64 || row >= self.height as i64 {
            return OBSTACLE;
        }
        self.cells[row as usize * self.width + col as usize]
    }

    pub fn set_cell(&mut self, col: usize, row: usize, value: u8) {
        assert!(value <= 1, "cells are binary");
        self.cells[row * self.width + col] = value;
    }

    pub fn obstacle_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c == OBSTACLE).count()
    }

    pub fn world_to_pixel(&self, p: Vec2) -> Result<Vec2> {
        self.world_to_pixel.apply(p)
    }

    pub fn pixel_to_world(&self, px: Vec2) -> Result<Vec2> {
        self.pixel_to_world.apply(px)
    }

    /// World position of the center of pixel `(col, row)`.
    pub fn cell_center(&self, col: usize, row: usize) -> Result<Vec2> {
        self.pixel_to_world(Vec2::new(col as f64 + 0.5, row as f64 + 0.5))
    }

    pub fn is_obstacle(&self, p: Vec2) -> Result<bool> {
        let px = self.world_to_pixel(p)?;
        Ok(self.pixel_is_obstacle(px))
    }

    fn pixel_is_obstacle(&self, px: Vec2) -> bool {
        if !px.is_finite() {
            return true;
        }
        let (u, v) = (px.x.floor(), px.y.floor());
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return true;
        }
        self.cells[v as usize * self.width + u as usize] == OBSTACLE
    }

    /// Like [`is_obstacle`](Self::is_obstacle) but a failed projection
    /// counts as an obstacle.
    pub fn blocked(&self, p: Vec2) -> bool {
        self.is_obstacle(p).unwrap_or(true)
    }

    /// Obstacle cells with at least one walkable 4-neighbour, as world-space
    /// cell centers in row-major scan order.
    pub fn extract_contours(&self) -> Vec<ContourPoint> {
        let mut out = Vec::new();
        for row in 0..self.height {
            for col in 0..self.width {
                if self.cells[row * self.width + col] != OBSTACLE {
                    continue;
                }
                let (c, r) = (col as i64, row as i64);
                let edge = [(c - 1, r), (c + 1, r), (c, r - 1), (c, r + 1)]
                    .iter()
                    .any(|&(nc, nr)| self.cell(nc, nr) == WALKABLE);
                if edge {
                    // Inverse of a validated homography; only fails for
                    // pixels mapping to the line at infinity.
                    if let Ok(position) = self.cell_center(col, row) {
                        out.push(ContourPoint {
                            position,
                            col,
                            row,
                        });
                    }
                }
            }
        }
        out
    }

    /// Samples an `S×S` grid in a frame whose +x axis points along `heading`,
    /// centered `forward_offset` meters ahead of `center`.
    ///
    /// Patch column index grows along the heading and row index along its
    /// left normal, so a patch with heading 0 has the same orientation as
    /// the map image under an axis-aligned homography.
    pub fn extract_patch(&self, center: Vec2, heading: f64, cfg: &PatchConfig) -> MapPatch {
        let s = cfg.size;
        let dir = Vec2::from_angle(heading);
        let left = dir.perp();
        let patch_center = center + dir * cfg.forward_offset;
        let half = s as f64 / 2.0;
        let mut grid = vec![OBSTACLE; s * s];
        for r in 0..s {
            let along_left = (r as f64 + 0.5 - half) * cfg.cell_size;
            for c in 0..s {
                let along_dir = (c as f64 + 0.5 - half) * cfg.cell_size;
                let p = patch_center + dir * along_dir + left * along_left;
                grid[r * s + c] = if self.blocked(p) { OBSTACLE } else { WALKABLE };
            }
        }
        MapPatch {
            size: s,
            grid,
            center: patch_center,
            heading,
            cell_size: cfg.cell_size,
        }
    }

    /// Reads a PGM mask and a homography sidecar.
    pub fn load(map_file: &Path, homography_file: &Path) -> Result<Self> {
        let (width, height, gray) = read_pgm(map_file)?;
        let h = read_homography(homography_file)?;
        let cells = gray
            .iter()
            .map(|&g| if g < 128 { OBSTACLE } else { WALKABLE })
            .collect();
        Self::new(width, height, cells, h)
    }

    /// Writes the mask as binary PGM with obstacles at 0 and walkable at 255.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut buf = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        buf.extend(self.cells.iter().map(|&c| if c == OBSTACLE { 0u8 } else { 255u8 }));
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn write_homography(&self, path: &Path) -> Result<()> {
        write_homography(path, &self.world_to_pixel)
    }
}

pub fn write_homography(path: &Path, h: &Homography) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for row in &h.0 {
        writeln!(f, "{:e} {:e} {:e}", row[0], row[1], row[2]).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_homography(path: &Path) -> Result<Homography> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let nums = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>().map_err(|_| Error::Format {
                path: path.into(),
                msg: format!("not a number: {t:?}"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let h = Homography::from_slice(&nums)?;
    h.inverse()?;
    Ok(h)
}

/// Parses a P2 or P5 graymap with maxval ≤ 255.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|msg| Error::Format {
        path: path.into(),
        msg,
    })
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<u8>), String> {
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> std::result::Result<String, String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err("unexpected end of header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&mut pos)?;
    let binary = match magic.as_str() {
        "P2" => false,
        "P5" => true,
        other => return Err(format!("unsupported magic {other:?}")),
    };
    let num = |pos: &mut usize, what: &str| -> std::result::Result<usize, String> {
        let t = token(pos)?;
        t.parse::<usize>().map_err(|_| format!("bad {what}: {t:?}"))
    };
    let width = num(&mut pos, "width")?;
    let height = num(&mut pos, "height")?;
    let maxval = num(&mut pos, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("maxval {maxval} outside 1..=255"));
    }
    let n = width * height;
    let scale = |v: usize| -> u8 { ((v * 255 + maxval / 2) / maxval) as u8 };
    let data = if binary {
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        if bytes.len() < pos + n {
            return Err(format!("raster has {} bytes, need {n}", bytes.len().saturating_sub(pos)));
        }
        bytes[pos..pos + n].iter().map(|&b| scale(b as usize)).collect()
    } else {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let v = num(&mut pos, "pixel")?;
            if v > maxval {
                return Err(format!("pixel {v} exceeds maxval {maxval}"));
            }
            out.push(scale(v));
        }
        out
    };
    Ok((width, height, data))
}

/// An obstacle cell bordering walkable space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContourPoint {
    pub position: Vec2,
    pub col: usize,
    pub row: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub size: usize,
    pub cell_size: f64,
    pub forward_offset: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            size: 32,
            cell_size: 0.25,
            forward_offset: 2.0,
        }
    }
}

/// Heading-aligned binary view of the map around a pedestrian.
#[derive(Debug, Clone, PartialEq)]
pub struct MapPatch {
    pub size: usize,
    pub grid: Vec<u8>,
    pub center: Vec2,
    pub heading: f64,
    pub cell_size: f64,
}

impl MapPatch {
    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.grid[row * self.size + col]
    }

    /// Network input: 1.0 for obstacle cells, 0.0 for walkable ones.
    pub fn occupancy(&self) -> Vec<f64> {
        self.grid
            .iter()
            .map(|&c| if c == OBSTACLE { 1.0 } else { 0.0 })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> OccupancyMap {
        OccupancyMap::new(2, 2, vec![0, 1, 1, 1], Homography::IDENTITY).unwrap()
    }

    #[test]
    fn threshold_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let map = dir.path().join("m.pgm");
        let h = dir.path().join("h.txt");
        fs::write(&map, "P2\n# comment\n2 2\n255\n0 255 255 255\n").unwrap();
        fs::write(&h, "1 0 0\n0 1 0\n0 0 1\n").unwrap();
        let m = OccupancyMap::load(&map, &h).unwrap();
        assert_eq!(m.obstacle_count(), 1);
        assert_eq!(m.cell(0, 0), OBSTACLE);

        fs::write(&h, "1 0 0 0 1 0 0 0").unwrap();
        assert!(matches!(OccupancyMap::load(&map, &h), Err(Error::Validation(_))));

        fs::write(&h, "1 0 0 2 0 0 0 0 1").unwrap();
        assert!(matches!(OccupancyMap::load(&map, &h), Err(Error::Validation(_))));
    }

    #[test]
    fn binary_pgm_and_white_map() {
        let dir = tempfile::tempdir().unwrap();
        let map = dir.path().join("m.pgm");
        let h = dir.path().join("h.txt");
        let mut raw = b"P5\n3 2\n255\n".to_vec();
        raw.extend([255u8; 6]);
        fs::write(&map, raw).unwrap();
        write_homography(&h, &Homography::scaling(10.0)).unwrap();
        let m = OccupancyMap::load(&map, &h).unwrap();
        assert_eq!(m.obstacle_count(), 0);
        assert!(m.extract_contours().is_empty());
    }

    #[test]
    fn malformed_header() {
        assert!(parse_pgm(b"P6\n2 2\n255\n").is_err());
        assert!(parse_pgm(b"P2\n2 x\n255\n").is_err());
        assert!(parse_pgm(b"P2\n2 2\n1000\n0 0 0 0").is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(parse_pgm(b"P2\n2 2\n255\n0 0 0").is_err());
    }

    #[test]
    fn projection_examples() {
        let m = OccupancyMap::open(10, 10, Homography::IDENTITY).unwrap();
        assert_eq!(m.world_to_pixel(Vec2::new(3.2, 4.5)).unwrap(), Vec2::new(3.2, 4.5));
        let s = OccupancyMap::open(10, 10, Homography::scaling(2.0)).unwrap();
        assert_eq!(s.world_to_pixel(Vec2::new(1.0, 1.0)).unwrap(), Vec2::new(2.0, 2.0));
        let t = Homography([[1.0, 0.0, 5.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let tm = OccupancyMap::open(10, 10, t).unwrap();
        assert_eq!(tm.world_to_pixel(Vec2::ZERO).unwrap(), Vec2::new(5.0, 0.0));
    }

    #[test]
    fn degenerate_projection() {
        let h = Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]]);
        let m = OccupancyMap::open(4, 4, h).unwrap();
        assert!(matches!(
            m.is_obstacle(Vec2::new(-1.0, 0.0)),
            Err(Error::Projection { .. })
        ));
    }

    #[test]
    fn obstacle_lookup() {
        let m = tiny();
        assert!(m.is_obstacle(Vec2::new(0.5, 0.5)).unwrap());
        assert!(!m.is_obstacle(Vec2::new(1.5, 0.5)).unwrap());
        let big = OccupancyMap::open(10, 10, Homography::IDENTITY).unwrap();
        assert!(big.is_obstacle(Vec2::new(-3.0, 7.0)).unwrap());
        assert!(big.is_obstacle(Vec2::new(10.0, 7.0)).unwrap());
        assert!(!big.is_obstacle(Vec2::new(9.99, 0.0)).unwrap());
    }

    #[test]
    fn contour_counts() {
        let mut m = OccupancyMap::open(9, 9, Homography::IDENTITY).unwrap();
        assert!(m.extract_contours().is_empty());
        m.set_cell(4, 4, OBSTACLE);
        let one = m.extract_contours();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].position, Vec2::new(4.5, 4.5));

        let mut block = OccupancyMap::open(10, 10, Homography::IDENTITY).unwrap();
        for r in 3..7 {
            for c in 3..7 {
                block.set_cell(c, r, OBSTACLE);
            }
        }
        // 16 cells minus the 2x2 interior
        assert_eq!(block.extract_contours().len(), 12);
    }

    #[test]
    fn open_region_patch_is_walkable() {
        let m = OccupancyMap::open(200, 200, Homography::scaling(10.0)).unwrap();
        let cfg = PatchConfig {
            size: 8,
            cell_size: 0.25,
            forward_offset: 1.0,
        };
        let p = m.extract_patch(Vec2::new(10.0, 10.0), 1.1, &cfg);
        assert!(p.grid.iter().all(|&c| c == WALKABLE));
    }

    #[test]
    fn patch_outside_map_is_obstacle() {
        let m = OccupancyMap::open(20, 20, Homography::IDENTITY).unwrap();
        let p = m.extract_patch(Vec2::new(-50.0, 0.0), 0.0, &PatchConfig::default());
        assert!(p.grid.iter().all(|&c| c == OBSTACLE));
    }

    #[test]
    fn vertical_wall_splits_patch() {
        // obstacles at x < 10 m, 0.1 m pixels
        let mut m = OccupancyMap::open(200, 200, Homography::scaling(10.0)).unwrap();
        for r in 0..200 {
            for c in 0..100 {
                m.set_cell(c, r, OBSTACLE);
            }
        }
        let cfg = PatchConfig {
            size: 16,
            cell_size: 0.25,
            forward_offset: 0.0,
        };
        let p = m.extract_patch(Vec2::new(10.0, 10.0), 0.0, &cfg);
        for r in 0..16 {
            for c in 0..16 {
                let expect = if c < 8 { OBSTACLE } else { WALKABLE };
                assert_eq!(p.at(r, c), expect, "cell ({r},{c})");
            }
        }
    }

    #[test]
    fn reversed_heading_rotates_patch() {
        let mut m = OccupancyMap::open(64, 64, Homography::scaling(4.0)).unwrap();
        let mut state = 12345u64;
        for r in 0..64 {
            for c in 0..64 {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                if (state >> 33).is_multiple_of(3) {
                    m.set_cell(c, r, OBSTACLE);
                }
            }
        }
        let cfg = PatchConfig {
            size: 16,
            cell_size: 0.25,
            forward_offset: 0.0,
        };
        // patch samples land on pixel centers: no rounding at cell edges
        let center = Vec2::new(8.0, 8.0);
        let a = m.extract_patch(center, 0.0, &cfg);
        let b = m.extract_patch(center, std::f64::consts::PI, &cfg);
        for r in 0..16 {
            for c in 0..16 {
                assert_eq!(a.at(r, c), b.at(15 - r, 15 - c));
            }
        }
    }
}
