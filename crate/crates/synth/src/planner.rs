//! Grid path planning with an obstacle-clearance constraint.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ecam_core::gridmap::{OccupancyMap, OBSTACLE};
use ecam_core::Vec2;

/// Euclidean distance (in pixels) from every pixel center to the nearest
/// obstacle pixel center. Space outside the map counts as obstacle.
#[derive(Debug, Clone)]
pub struct Clearance {
    width: usize,
    height: usize,
    dist: Vec<f64>,
}

impl Clearance {
    pub fn new(map: &OccupancyMap) -> Self {
        // pad by one obstacle pixel on every side
        let (w, h) = (map.width() + 2, map.height() + 2);
        let mut f = vec![f64::INFINITY; w * h];
        for r in 0..h {
            for c in 0..w {
                let inside = r >= 1 && c >= 1 && r <= map.height() && c <= map.width();
                if !inside || map.cell(c as i64 - 1, r as i64 - 1) == OBSTACLE {
                    f[r * w + c] = 0.0;
                }
            }
        }
        // separable squared EDT: columns, then rows
        let mut col = vec![0.0; h];
        for c in 0..w {
            for r in 0..h {
                col[r] = f[r * w + c];
            }
            let d = edt_1d(&col);
            for r in 0..h {
                f[r * w + c] = d[r];
            }
        }
        for r in 0..h {
            let d = edt_1d(&f[r * w..(r + 1) * w]);
            f[r * w..(r + 1) * w].copy_from_slice(&d);
        }
        let mut dist = vec![0.0; map.width() * map.height()];
        for r in 0..map.height() {
            for c in 0..map.width() {
                dist[r * map.width() + c] = f[(r + 1) * w + c + 1].sqrt();
            }
        }
        Self {
            width: map.width(),
            height: map.height(),
            dist,
        }
    }

    pub fn at(&self, col: usize, row: usize) -> f64 {
        self.dist[row * self.width + col]
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }
}

/// Felzenszwalb–Huttenlocher lower envelope of parabolas.
fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut k = 0usize;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(i) => i,
        None => return vec![f64::INFINITY; n],
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            // z[0] is -inf, so this never pops the first parabola
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *out = dq * dq + f[p];
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Node {
    cost: f64,
    idx: usize,
}

impl Eq for Node {}

impl Ord for Node {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .partial_cmp(&self.cost)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.idx.cmp(&self.idx))
    }
}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Uniform-cost search over 8-connected pixels whose clearance is at least
/// `min_clearance_px`. Returns the pixel sequence from `start` to `goal`.
pub fn shortest_path(
    clearance: &Clearance,
    start: (usize, usize),
    goal: (usize, usize),
    min_clearance_px: f64,
) -> Option<Vec<(usize, usize)>> {
    let (w, h) = (clearance.width, clearance.height);
    let free = |c: usize, r: usize| clearance.at(c, r) >= min_clearance_px;
    if !free(start.0, start.1) || !free(goal.0, goal.1) {
        return None;
    }
    let n = w * h;
    let mut best = vec![f64::INFINITY; n];
    let mut prev = vec![usize::MAX; n];
    let mut heap = BinaryHeap::new();
    let s = start.1 * w + start.0;
    let g = goal.1 * w + goal.0;
    best[s] = 0.0;
    heap.push(Node { cost: 0.0, idx: s });
    const STEPS: [(i64, i64, f64); 8] = [
        (1, 0, 1.0),
        (-1, 0, 1.0),
        (0, 1, 1.0),
        (0, -1, 1.0),
        (1, 1, std::f64::consts::SQRT_2),
        (1, -1, std::f64::consts::SQRT_2),
        (-1, 1, std::f64::consts::SQRT_2),
        (-1, -1, std::f64::consts::SQRT_2),
    ];
    while let Some(Node { cost, idx }) = heap.pop() {
        if idx == g {
            break;
        }
        if cost > best[idx] {
            continue;
        }
        let (c, r) = ((idx % w) as i64, (idx / w) as i64);
        for (dc, dr, step) in STEPS {
            let (nc, nr) = (c + dc, r + dr);
            if nc < 0 || nr < 0 || nc >= w as i64 || nr >= h as i64 {
                continue;
            }
            let (nc, nr) = (nc as usize, nr as usize);
            if !free(nc, nr) {
                continue;
            }
            // no corner cutting on diagonals
            if dc != 0 && dr != 0 && (!free(c as usize, nr) || !free(nc, r as usize)) {
                continue;
            }
            let ni = nr * w + nc;
            let nc_cost = cost + step;
            if nc_cost < best[ni] {
                best[ni] = nc_cost;
                prev[ni] = idx;
                heap.push(Node { cost: nc_cost, idx: ni });
            }
        }
    }
    if !best[g].is_finite() {
        return None;
    }
    let mut path = vec![(goal.0, goal.1)];
    let mut cur = g;
    while cur != s {
        cur = prev[cur];
        path.push((cur % w, cur / w));
    }
    path.reverse();
    Some(path)
}

/// Greedy line-of-sight shortcutting: keeps a vertex only when the straight
/// segment past it would violate `ok`.
pub fn shortcut<F: Fn(Vec2, Vec2) -> bool>(points: &[Vec2], ok: F) -> Vec<Vec2> {
    if points.len() <= 2 {
        return points.to_vec();
    }
    let mut out = vec![points[0]];
    let mut i = 0;
    while i < points.len() - 1 {
        let mut j = i + 1;
        while j + 1 < points.len() && ok(points[i], points[j + 1]) {
            j += 1;
        }
        out.push(points[j]);
        i = j;
    }
    out
}

pub fn polyline_length(points: &[Vec2]) -> f64 {
    points.windows(2).map(|w| w[0].dist(w[1])).sum()
}

/// Points along the polyline whose consecutive Euclidean distances are all
/// exactly `step` (up to rounding), starting at the first vertex.
pub fn resample_constant_chord(points: &[Vec2], step: f64) -> Vec<Vec2> {
    assert!(step > 0.0);
    let mut out = Vec::new();
    let Some(&first) = points.first() else {
        return out;
    };
    out.push(first);
    let mut seg = 0usize;
    let mut t = 0.0f64;
    let mut cur = first;
    'outer: loop {
        while seg + 1 < points.len() {
            let (a, b) = (points[seg], points[seg + 1]);
            let d = b - a;
            let len2 = d.norm_sq();
            if len2 == 0.0 {
                seg += 1;
                t = 0.0;
                continue;
            }
            // |a + s d - cur|² = step², smallest root s ≥ t
            let f = a - cur;
            let bq = 2.0 * f.dot(d);
            let cq = f.norm_sq() - step * step;
            let disc = bq * bq - 4.0 * len2 * cq;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                let s = (-bq + sq) / (2.0 * len2);
                if s >= t && s <= 1.0 {
                    cur = a + d * s;
                    out.push(cur);
                    t = s;
                    continue 'outer;
                }
            }
            seg += 1;
            t = 0.0;
        }
        break;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ecam_core::gridmap::{Homography, WALKABLE};

    #[test]
    fn edt_matches_brute_force() {
        let mut map = OccupancyMap::open(23, 17, Homography::IDENTITY).unwrap();
        for (c, r) in [(3, 4), (10, 10), (20, 2), (11, 10), (5, 15)] {
            map.set_cell(c, r, OBSTACLE);
        }
        let cl = Clearance::new(&map);
        for r in 0..17i64 {
            for c in 0..23i64 {
                let mut best = f64::INFINITY;
                for rr in -1..18i64 {
                    for cc in -1..24i64 {
                        if map.cell(cc, rr) == OBSTACLE {
                            let d = (((cc - c).pow(2) + (rr - r).pow(2)) as f64).sqrt();
                            best = best.min(d);
                        }
                    }
                }
                assert!((cl.at(c as usize, r as usize) - best).abs() < 1e-12, "({c},{r})");
            }
        }
        assert_eq!(map.cell(0, 0), WALKABLE);
    }

    #[test]
    fn planner_routes_around_wall() {
        let mut map = OccupancyMap::open(30, 20, Homography::IDENTITY).unwrap();
        for r in 0..15 {
            map.set_cell(15, r, OBSTACLE);
        }
        let cl = Clearance::new(&map);
        let path = shortest_path(&cl, (5, 5), (25, 5), 2.0).unwrap();
        assert_eq!(path.first(), Some(&(5, 5)));
        assert_eq!(path.last(), Some(&(25, 5)));
        assert!(path.iter().all(|&(c, r)| cl.at(c, r) >= 2.0));
        assert!(path.iter().any(|&(_, r)| r >= 16));
        assert!(shortest_path(&cl, (5, 5), (25, 5), 6.0).is_none());
    }

    #[test]
    fn constant_chord() {
        let pts = [Vec2::new(0.0, 0.0), Vec2::new(3.0, 0.0), Vec2::new(3.0, 3.0)];
        let out = resample_constant_chord(&pts, 0.4);
        for w in out.windows(2) {
            assert!((w[0].dist(w[1]) - 0.4).abs() < 1e-9);
        }
        assert!(out.last().unwrap().dist(pts[2]) < 0.4);
        assert!(out.len() >= 14);
    }
}
