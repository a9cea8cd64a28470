//! ETH/UCY-style trajectory files and observation/prediction windowing.
//!
//! Trajectory files hold one observation per line: `frame ped x y`,
//! whitespace separated. Ids may be written as floats and are truncated.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::gridmap::OccupancyMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawObservation {
    pub frame_id: i64,
    pub ped_id: i64,
    pub x: f64,
    pub y: f64,
}

/// One pedestrian's uninterrupted, uniformly sampled track.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub ped_id: i64,
    pub frames: Vec<i64>,
    pub points: Vec<Vec2>,
}

impl Series {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryWindow {
    pub ped_id: i64,
    pub scene_label: String,
    /// Frame id of the first observed point.
    pub start_frame: i64,
    pub past: Vec<Vec2>,
    pub future: Vec<Vec2>,
}

impl TrajectoryWindow {
    pub fn last_observed(&self) -> Vec2 {
        *self.past.last().expect("window has an observed past")
    }

    pub fn validate(&self) -> Result<()> {
        if self.past.is_empty() {
            return Err(Error::Validation(format!(
                "window for ped {} has no observed past",
                self.ped_id
            )));
        }
        if !self.past.iter().chain(&self.future).all(|p| p.is_finite()) {
            return Err(Error::Validation(format!(
                "window for ped {} has non-finite coordinates",
                self.ped_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub t_obs: usize,
    pub t_pred: usize,
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            t_obs: 8,
            t_pred: 12,
            stride: 1,
        }
    }
}

impl WindowConfig {
    /// Points per window, observed plus predicted.
    pub fn span(&self) -> usize {
        self.t_obs + self.t_pred
    }
}

pub fn parse_observations(text: &str, path: &Path) -> Result<Vec<RawObservation>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.into(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 4 {
            return Err(err(format!("expected 4 fields, got {}", fields.len())));
        }
        let mut nums = [0.0f64; 4];
        for (slot, f) in nums.iter_mut().zip(&fields) {
            *slot = f
                .parse::<f64>()
                .map_err(|_| err(format!("not a number: {f:?}")))?;
            if !slot.is_finite() {
                return Err(err(format!("non-finite value: {f:?}")));
            }
        }
        out.push(RawObservation {
            frame_id: nums[0].trunc() as i64,
            ped_id: nums[1].trunc() as i64,
            x: nums[2],
            y: nums[3],
        });
    }
    Ok(out)
}

/// Groups observations into per-pedestrian series sorted by frame.
///
/// Each pedestrian's frame spacing is the smallest gap between consecutive
/// observations; a track is split wherever the gap differs from it.
pub fn group_series(obs: &[RawObservation]) -> Result<Vec<Series>> {
    let mut by_ped: BTreeMap<i64, Vec<RawObservation>> = BTreeMap::new();
    for o in obs {
        by_ped.entry(o.ped_id).or_default().push(*o);
    }
    let mut out = Vec::new();
    for (ped_id, mut rows) in by_ped {
        rows.sort_by_key(|o| o.frame_id);
        if let Some(w) = rows.windows(2).find(|w| w[0].frame_id == w[1].frame_id) {
            return Err(Error::Validation(format!(
                "duplicate observation for ped {ped_id} at frame {}",
                w[0].frame_id
            )));
        }
        let spacing = rows
            .windows(2)
            .map(|w| w[1].frame_id - w[0].frame_id)
            .min()
            .unwrap_or(1);
        let mut current = Series {
            ped_id,
            frames: Vec::new(),
            points: Vec::new(),
        };
        for o in rows {
            if let Some(&last) = current.frames.last() {
                if o.frame_id - last != spacing {
                    out.push(std::mem::replace(
                        &mut current,
                        Series {
                            ped_id,
                            frames: Vec::new(),
                            points: Vec::new(),
                        },
                    ));
                }
            }
            current.frames.push(o.frame_id);
            current.points.push(Vec2::new(o.x, o.y));
        }
        out.push(current);
    }
    Ok(out)
}

pub fn load_trajectories(path: &Path) -> Result<Vec<Series>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let obs = parse_observations(&text, path)?;
    if obs.is_empty() {
        return Err(Error::Validation(format!(
            "{}: no observations",
            path.display()
        )));
    }
    group_series(&obs)
}

/// Writes series as `frame ped x y` rows, ordered by frame then pedestrian.
pub fn write_trajectories(path: &Path, series: &[Series]) -> Result<()> {
    let mut rows: Vec<(i64, i64, Vec2)> = series
        .iter()
        .flat_map(|s| s.frames.iter().zip(&s.points).map(move |(f, p)| (*f, s.ped_id, *p)))
        .collect();
    rows.sort_by_key(|r| (r.0, r.1));
    let mut buf = Vec::new();
    for (f, id, p) in rows {
        writeln!(buf, "{f}\t{id}\t{:.6}\t{:.6}", p.x, p.y).expect("write to vec");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Sliding windows of `t_obs + t_pred` points at the given stride.
pub fn make_windows(series: &Series, scene_label: &str, cfg: &WindowConfig) -> Vec<TrajectoryWindow> {
    let len = cfg.span();
    let stride = cfg.stride.max(1);
    if cfg.t_obs == 0 || cfg.t_pred == 0 || series.len() < len {
        return Vec::new();
    }
    (0..=series.len() - len)
        .step_by(stride)
        .map(|start| TrajectoryWindow {
            ped_id: series.ped_id,
            scene_label: scene_label.to_string(),
            start_frame: series.frames[start],
            past: series.points[start..start + cfg.t_obs].to_vec(),
            future: series.points[start + cfg.t_obs..start + len].to_vec(),
        })
        .collect()
}

/// One (trajectories, map, homography) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(default)]
    pub label: Option<String>,
    pub trajectories: PathBuf,
    pub map: PathBuf,
    pub homography: PathBuf,
}

impl ManifestEntry {
    /// Scene label: explicit, else the trajectory file stem.
    pub fn scene_label(&self) -> String {
        self.label.clone().unwrap_or_else(|| {
            self.trajectories
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scenes: Vec<ManifestEntry>,
}

impl Manifest {
    /// Loads a manifest; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for s in &mut m.scenes {
            for p in [&mut s.trajectories, &mut s.map, &mut s.homography] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// A map together with every window observed in it.
#[derive(Debug, Clone)]
pub struct Scene {
    pub label: String,
    pub map: OccupancyMap,
    pub windows: Vec<TrajectoryWindow>,
}

impl Scene {
    pub fn load(entry: &ManifestEntry, cfg: &WindowConfig) -> Result<Self> {
        for p in [&entry.trajectories, &entry.map, &entry.homography] {
            if !p.exists() {
                return Err(Error::Validation(format!("missing file {}", p.display())));
            }
        }
        let label = entry.scene_label();
        let map = OccupancyMap::load(&entry.map, &entry.homography)?;
        let series = load_trajectories(&entry.trajectories)?;
        let windows = series
            .iter()
            .flat_map(|s| make_windows(s, &label, cfg))
            .collect();
        Ok(Scene {
            label,
            map,
            windows,
        })
    }
}

pub fn load_scenes(manifest: &Manifest, cfg: &WindowConfig) -> Result<Vec<Scene>> {
    manifest.scenes.iter().map(|e| Scene::load(e, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(spec: &[(i64, i64)]) -> String {
        spec.iter()
            .map(|(f, p)| format!("{f} {p} {}.5 {}.25\n", f / 10, p))
            .collect()
    }

    #[test]
    fn single_track() {
        let text = rows(&(0..20).map(|i| (i * 10, 3)).collect::<Vec<_>>());
        let obs = parse_observations(&text, Path::new("t.txt")).unwrap();
        let s = group_series(&obs).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].len(), 20);
    }

    #[test]
    fn gap_splits_track() {
        let frames: Vec<_> = (0..20).filter(|&i| i != 9).map(|i| (i * 10, 1)).collect();
        let obs = parse_observations(&rows(&frames), Path::new("t.txt")).unwrap();
        let s = group_series(&obs).unwrap();
        assert_eq!(s.iter().map(Series::len).collect::<Vec<_>>(), vec![9, 10]);
    }

    #[test]
    fn float_ids_and_order() {
        let text = "20.0 1.0 2.0 3.0\n0.0\t1.0\t0.0\t1.0\n10.0 1.0 1.0 2.0\n";
        let obs = parse_observations(text, Path::new("t.txt")).unwrap();
        let s = group_series(&obs).unwrap();
        assert_eq!(s[0].frames, vec![0, 10, 20]);
        assert_eq!(s[0].points[2], Vec2::new(2.0, 3.0));
    }

    #[test]
    fn parse_errors_carry_line() {
        let err = parse_observations("0 1 2 3\n0 1 x 3\n", Path::new("t.txt")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let dup = parse_observations("0 1 2 3\n0 1 2 3\n", Path::new("t.txt")).unwrap();
        assert!(group_series(&dup).is_err());
    }

    #[test]
    fn empty_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.txt");
        fs::write(&p, "\n").unwrap();
        assert!(matches!(load_trajectories(&p), Err(Error::Validation(_))));
    }

    #[test]
    fn window_counts() {
        let mk = |n: usize| Series {
            ped_id: 0,
            frames: (0..n as i64).collect(),
            points: (0..n).map(|i| Vec2::new(i as f64, 0.0)).collect(),
        };
        let cfg = WindowConfig::default();
        assert_eq!(make_windows(&mk(20), "s", &cfg).len(), 1);
        assert_eq!(make_windows(&mk(25), "s", &cfg).len(), 6);
        assert_eq!(make_windows(&mk(19), "s", &cfg).len(), 0);
        let strided = WindowConfig { stride: 3, ..cfg };
        assert_eq!(make_windows(&mk(30), "s", &strided).len(), 4);
    }
}
