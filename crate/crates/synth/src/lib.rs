//! Deterministic synthetic benchmark scenes.
//!
//! A scene is an obstacle map plus single-agent pedestrian tracks that are
//! planned on the grid with a clearance margin, resampled at constant speed
//! and perturbed by a small smoothed lateral jitter. Identical specs produce
//! byte-identical output files.

pub mod layout;
pub mod planner;

use std::fs;
use std::path::{Path, PathBuf};

use ecam_core::data::{make_windows, write_trajectories, Manifest, ManifestEntry, Series, TrajectoryWindow, WindowConfig};
use ecam_core::gridmap::{OccupancyMap, WALKABLE};
use ecam_core::Vec2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use layout::Layout;
use planner::Clearance;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Core(#[from] ecam_core::Error),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

const MAX_ATTEMPTS: usize = 50;
const FRAME_STEP: i64 = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub layout: Layout,
    pub width_m: f64,
    pub height_m: f64,
    pub meters_per_pixel: f64,
    /// Target obstacle fraction of the map area.
    pub density: f64,
    pub pedestrians: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    pub dt: f64,
    pub clearance_m: f64,
    pub jitter_sigma_m: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            layout: Layout::Corridor,
            width_m: 24.0,
            height_m: 16.0,
            meters_per_pixel: 0.1,
            density: 0.25,
            pedestrians: 24,
            speed_min: 1.0,
            speed_max: 1.6,
            dt: 0.4,
            clearance_m: 0.5,
            jitter_sigma_m: 0.05,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if !(0.0..=0.5).contains(&self.density) {
            return bad(format!(
                "density {} leaves less than half the map walkable (allowed 0..=0.5)",
                self.density
            ));
        }
        if !(0.5..=2.0).contains(&self.speed_min) || !(0.5..=2.0).contains(&self.speed_max) || self.speed_min > self.speed_max {
            return bad(format!(
                "speed range [{}, {}] must lie within [0.5, 2.0] m/s",
                self.speed_min, self.speed_max
            ));
        }
        if !(self.meters_per_pixel > 0.0) || !(self.dt > 0.0) {
            return bad("meters_per_pixel and dt must be positive".into());
        }
        let (w, h) = (self.width_m / self.meters_per_pixel, self.height_m / self.meters_per_pixel);
        if !(w >= 2.0 && h >= 2.0 && w * h <= 2.5e7) {
            return bad(format!("map of {w:.0}x{h:.0} pixels is out of range"));
        }
        if self.clearance_m < 0.0 || self.jitter_sigma_m < 0.0 {
            return bad("clearance and jitter must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub map: OccupancyMap,
    pub series: Vec<Series>,
}

impl SyntheticScene {
    pub fn windows(&self, label: &str, cfg: &WindowConfig) -> Vec<TrajectoryWindow> {
        self.series.iter().flat_map(|s| make_windows(s, label, cfg)).collect()
    }
}

pub fn build_map(spec: &SceneSpec) -> Result<OccupancyMap> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);
    let (w, h, mpp) = (spec.width_m, spec.height_m, spec.meters_per_pixel);
    for _ in 0..MAX_ATTEMPTS {
        let raster = match spec.layout {
            Layout::Corridor => layout::corridor(w, h, mpp, spec.density),
            Layout::Rooms => layout::rooms(w, h, mpp, spec.density, &mut rng),
            Layout::RandomBlocks => layout::random_blocks(w, h, mpp, spec.density, &mut rng),
        };
        let map = raster.into_map();
        if layout::largest_component_fraction(&map) >= 0.5 {
            return Ok(map);
        }
        if spec.layout == Layout::Corridor {
            break;
        }
    }
    Err(SynthError::Spec(format!(
        "{} layout at density {} has no connected walkable region covering half the map",
        spec.layout, spec.density
    )))
}

/// Builds the map and plans every pedestrian. Pedestrians whose start and
/// goal cannot be joined after [`MAX_ATTEMPTS`] draws are skipped.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    let map = build_map(spec)?;
    let clearance = Clearance::new(&map);
    let mpp = spec.meters_per_pixel;
    let want_px = spec.clearance_m / mpp;

    let walkable: Vec<(usize, usize)> = (0..map.height())
        .flat_map(|r| (0..map.width()).map(move |c| (c, r)))
        .filter(|&(c, r)| map.cell(c as i64, r as i64) == WALKABLE)
        .collect();
    // one pixel of slack so the jittered centerline keeps the full margin
    let clear: Vec<(usize, usize)> = walkable
        .iter()
        .copied()
        .filter(|&(c, r)| clearance.at(c, r) >= want_px + 1.0)
        .collect();
    let (pool, required_px) = if clear.is_empty() {
        (&walkable, 0.5)
    } else {
        (&clear, want_px + 1.0)
    };

    let mut series = Vec::new();
    if pool.is_empty() {
        return Ok(SyntheticScene {
            spec: spec.clone(),
            map,
            series,
        });
    }
    for ped in 0..spec.pedestrians {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(1 + ped as u64);
        let speed = rng.random_range(spec.speed_min..=spec.speed_max);
        let step = speed * spec.dt;
        let min_len = step * 20.0;
        for _ in 0..MAX_ATTEMPTS {
            let start = pool[rng.random_range(0..pool.len())];
            let goal = pool[rng.random_range(0..pool.len())];
            let (sw, gw) = (pixel_center(&map, start), pixel_center(&map, goal));
            if sw.dist(gw) < min_len {
                continue;
            }
            let Some(cells) = planner::shortest_path(&clearance, start, goal, required_px) else {
                continue;
            };
            let centers: Vec<Vec2> = cells.iter().map(|&p| pixel_center(&map, p)).collect();
            let visible = |a: Vec2, b: Vec2| segment_clear(&map, &clearance, a, b, required_px);
            let path = planner::shortcut(&centers, visible);
            if planner::polyline_length(&path) < min_len {
                continue;
            }
            let points = planner::resample_constant_chord(&path, step);
            let points = jitter(&map, &clearance, &points, step, spec, &mut rng);
            let offset = rng.random_range(0..100i64);
            let frames = (0..points.len() as i64).map(|t| (offset + t) * FRAME_STEP).collect();
            series.push(Series {
                ped_id: ped as i64 + 1,
                frames,
                points,
            });
            break;
        }
    }
    Ok(SyntheticScene {
        spec: spec.clone(),
        map,
        series,
    })
}

fn pixel_center(map: &OccupancyMap, (c, r): (usize, usize)) -> Vec2 {
    map.cell_center(c, r).expect("synthetic homography is a pure scaling")
}

fn clearance_at(map: &OccupancyMap, clearance: &Clearance, p: Vec2) -> f64 {
    match map.world_to_pixel(p) {
        Ok(px) if px.x >= 0.0 && px.y >= 0.0 => {
            let (c, r) = (px.x as usize, px.y as usize);
            if c < clearance.width() && r < clearance.height() {
                clearance.at(c, r)
            } else {
                0.0
            }
        }
        _ => 0.0,
    }
}

fn segment_clear(map: &OccupancyMap, clearance: &Clearance, a: Vec2, b: Vec2, min_px: f64) -> bool {
    let n = ((a.dist(b) / 0.05).ceil() as usize).max(1);
    (0..=n).all(|i| {
        let p = a + (b - a) * (i as f64 / n as f64);
        clearance_at(map, clearance, p) >= min_px
    })
}

/// Smoothed lateral jitter. A jittered point is reverted to the centerline
/// when it would lose clearance or push a neighbouring step outside ±10%
/// of the nominal step length.
fn jitter<R: Rng>(
    map: &OccupancyMap,
    clearance: &Clearance,
    points: &[Vec2],
    step: f64,
    spec: &SceneSpec,
    rng: &mut R,
) -> Vec<Vec2> {
    let n = points.len();
    if n < 3 || spec.jitter_sigma_m == 0.0 {
        return points.to_vec();
    }
    const A: f64 = 0.8;
    let innovation = spec.jitter_sigma_m * (1.0 - A * A).sqrt();
    let mut lateral = vec![0.0; n];
    lateral[0] = spec.jitter_sigma_m * rng.sample::<f64, _>(StandardNormal);
    for t in 1..n {
        lateral[t] = A * lateral[t - 1] + innovation * rng.sample::<f64, _>(StandardNormal);
    }
    let min_px = spec.clearance_m / spec.meters_per_pixel;
    let mut out: Vec<Vec2> = (0..n)
        .map(|t| {
            let tangent = points[(t + 1).min(n - 1)] - points[t.saturating_sub(1)];
            let normal = tangent.perp() * (1.0 / tangent.norm().max(1e-12));
            let p = points[t] + normal * lateral[t];
            let keeps = clearance_at(map, clearance, p) >= min_px
                || clearance_at(map, clearance, p) >= clearance_at(map, clearance, points[t]);
            if keeps {
                p
            } else {
                points[t]
            }
        })
        .collect();
    let ok = |a: Vec2, b: Vec2| (a.dist(b) - step).abs() <= 0.1 * step;
    loop {
        let mut changed = false;
        for t in 0..n {
            let left = t == 0 || ok(out[t - 1], out[t]);
            let right = t + 1 == n || ok(out[t], out[t + 1]);
            if !(left && right) && out[t] != points[t] {
                out[t] = points[t];
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    out
}

/// File names written by [`write_scene`].
#[derive(Debug, Clone)]
pub struct SceneFiles {
    pub map: PathBuf,
    pub homography: PathBuf,
    pub trajectories: PathBuf,
    pub manifest: PathBuf,
}

/// Writes `<name>.pgm`, `<name>.homography.txt`, `<name>.tsv` and a
/// `manifest.json` referencing them by relative path.
pub fn write_scene(scene: &SyntheticScene, dir: &Path, name: &str) -> Result<SceneFiles> {
    fs::create_dir_all(dir).map_err(|e| ecam_core::Error::Io {
        path: dir.into(),
        source: e,
    })?;
    let files = SceneFiles {
        map: dir.join(format!("{name}.pgm")),
        homography: dir.join(format!("{name}.homography.txt")),
        trajectories: dir.join(format!("{name}.tsv")),
        manifest: dir.join("manifest.json"),
    };
    scene.map.write_pgm(&files.map)?;
    scene.map.write_homography(&files.homography)?;
    write_trajectories(&files.trajectories, &scene.series)?;
    let rel = |p: &Path| PathBuf::from(p.file_name().expect("file name"));
    Manifest {
        scenes: vec![ManifestEntry {
            label: Some(name.to_string()),
            trajectories: rel(&files.trajectories),
            map: rel(&files.map),
            homography: rel(&files.homography),
        }],
    }
    .save(&files.manifest)?;
    Ok(files)
}
