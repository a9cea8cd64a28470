//! Obstacle layouts rasterized into occupancy grids.

use std::collections::VecDeque;

use ecam_core::gridmap::{Homography, OccupancyMap, OBSTACLE, WALKABLE};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// Parallel lanes joined at alternating ends by U-turns.
    Corridor,
    /// A grid of rooms connected through doorways.
    Rooms,
    /// Axis-aligned rectangular blocks scattered at random.
    RandomBlocks,
}

impl std::str::FromStr for Layout {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "corridor" => Ok(Layout::Corridor),
            "rooms" => Ok(Layout::Rooms),
            "random-blocks" => Ok(Layout::RandomBlocks),
            other => Err(format!("unknown layout {other:?} (corridor | rooms | random-blocks)")),
        }
    }
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Layout::Corridor => "corridor",
            Layout::Rooms => "rooms",
            Layout::RandomBlocks => "random-blocks",
        })
    }
}

pub(crate) struct Raster {
    pub width: usize,
    pub height: usize,
    pub mpp: f64,
    pub cells: Vec<u8>,
}

impl Raster {
    fn new(width_m: f64, height_m: f64, mpp: f64) -> Self {
        let width = (width_m / mpp).round() as usize;
        let height = (height_m / mpp).round() as usize;
        Self {
            width,
            height,
            mpp,
            cells: vec![WALKABLE; width * height],
        }
    }

    /// Marks the world rectangle `[x0, x1) × [y0, y1)` as obstacle.
    fn block(&mut self, x0: f64, y0: f64, x1: f64, y1: f64) {
        let px = |v: f64, max: usize| ((v / self.mpp).round().max(0.0) as usize).min(max);
        let (c0, c1) = (px(x0, self.width), px(x1, self.width));
        let (r0, r1) = (px(y0, self.height), px(y1, self.height));
        for r in r0..r1 {
            for c in c0..c1 {
                self.cells[r * self.width + c] = OBSTACLE;
            }
        }
    }

    fn obstacle_fraction(&self) -> f64 {
        self.cells.iter().filter(|&&c| c == OBSTACLE).count() as f64 / self.cells.len() as f64
    }

    pub fn into_map(self) -> OccupancyMap {
        OccupancyMap::new(self.width, self.height, self.cells, Homography::scaling(1.0 / self.mpp))
            .expect("raster dimensions are validated by the scene spec")
    }
}

/// Fraction of all cells in the largest 4-connected walkable component.
pub fn largest_component_fraction(map: &OccupancyMap) -> f64 {
    let (w, h) = (map.width(), map.height());
    let cells = map.cells();
    let mut seen = vec![false; w * h];
    let mut best = 0usize;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if seen[start] || cells[start] != WALKABLE {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (c, r) = (i % w, i / w);
            let mut visit = |j: usize| {
                if !seen[j] && cells[j] == WALKABLE {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
        }
        best = best.max(size);
    }
    best as f64 / (w * h) as f64
}

pub(crate) const LANE_WIDTH_M: f64 = 3.0;

/// Horizontal lanes of at least [`LANE_WIDTH_M`] separated by walls whose
/// thickness makes walls/(lane+wall) equal `density`. Each wall leaves a
/// lane-wide gap at alternating ends.
pub(crate) fn corridor(width_m: f64, height_m: f64, mpp: f64, density: f64) -> Raster {
    let mut r = Raster::new(width_m, height_m, mpp);
    if density <= 0.0 {
        return r;
    }
    let wall = LANE_WIDTH_M * density / (1.0 - density);
    let lanes = (((height_m + wall) / (LANE_WIDTH_M + wall)).floor() as usize).max(1);
    let lane = (height_m - (lanes - 1) as f64 * wall) / lanes as f64;
    for i in 0..lanes.saturating_sub(1) {
        let y0 = (i + 1) as f64 * lane + i as f64 * wall;
        let (x0, x1) = if i % 2 == 0 {
            (0.0, width_m - lane)
        } else {
            (lane, width_m)
        };
        r.block(x0, y0, x1, y0 + wall);
    }
    r
}

const ROOM_M: f64 = 6.0;
const DOOR_M: f64 = 2.0;

pub(crate) fn rooms<R: Rng>(width_m: f64, height_m: f64, mpp: f64, density: f64, rng: &mut R) -> Raster {
    let mut r = Raster::new(width_m, height_m, mpp);
    if density <= 0.0 {
        return r;
    }
    // wall thickness t with roughly 2t/(ROOM_M + t) of the area covered
    let wall = (ROOM_M * density / (2.0 - density)).max(mpp);
    let nx = ((width_m + wall) / (ROOM_M + wall)).floor().max(1.0) as usize;
    let ny = ((height_m + wall) / (ROOM_M + wall)).floor().max(1.0) as usize;
    let room_w = (width_m - (nx - 1) as f64 * wall) / nx as f64;
    let room_h = (height_m - (ny - 1) as f64 * wall) / ny as f64;
    for i in 1..nx {
        let x0 = i as f64 * room_w + (i - 1) as f64 * wall;
        for j in 0..ny {
            let y_room = j as f64 * (room_h + wall);
            let door = y_room + rng.random_range(0.0..(room_h - DOOR_M).max(0.0));
            r.block(x0, y_room - if j > 0 { wall } else { 0.0 }, x0 + wall, door);
            r.block(x0, door + DOOR_M, x0 + wall, y_room + room_h);
        }
    }
    for j in 1..ny {
        let y0 = j as f64 * room_h + (j - 1) as f64 * wall;
        for i in 0..nx {
            let x_room = i as f64 * (room_w + wall);
            let door = x_room + rng.random_range(0.0..(room_w - DOOR_M).max(0.0));
            r.block(x_room, y0, door, y0 + wall);
            r.block(door + DOOR_M, y0, x_room + room_w, y0 + wall);
        }
    }
    r
}

pub(crate) fn random_blocks<R: Rng>(width_m: f64, height_m: f64, mpp: f64, density: f64, rng: &mut R) -> Raster {
    let mut r = Raster::new(width_m, height_m, mpp);
    let mut guard = 0;
    while r.obstacle_fraction() < density && guard < 10_000 {
        guard += 1;
        let w = rng.random_range(0.5..3.0);
        let h = rng.random_range(0.5..3.0);
        let x = rng.random_range(0.0..(width_m - w).max(0.1));
        let y = rng.random_range(0.0..(height_m - h).max(0.1));
        r.block(x, y, x + w, y + h);
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corridor_density_and_connectivity() {
        let m = corridor(24.0, 16.0, 0.1, 0.25).into_map();
        let frac = m.obstacle_count() as f64 / (m.width() * m.height()) as f64;
        assert!(frac > 0.1 && frac < 0.25, "{frac}");
        assert!((largest_component_fraction(&m) - (1.0 - frac)).abs() < 1e-12);
    }

    #[test]
    fn open_layouts() {
        let m = corridor(10.0, 10.0, 0.1, 0.0).into_map();
        assert_eq!(m.obstacle_count(), 0);
        assert_eq!(largest_component_fraction(&m), 1.0);
    }
}
