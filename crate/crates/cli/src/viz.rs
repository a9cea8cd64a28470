//! SVG overlays of trajectories on an occupancy map, drawn in pixel space.

use std::fmt::Write;

use ecam_core::data::TrajectoryWindow;
use ecam_core::gridmap::{OccupancyMap, OBSTACLE};
use ecam_core::model::Trajectory;
use ecam_core::Vec2;
use ecam_train::losses::collides;

/// A window with its sampled futures (possibly none).
pub struct Overlay {
    pub window: TrajectoryWindow,
    pub samples: Vec<Trajectory>,
}

const SCALE: f64 = 4.0;

fn polyline(out: &mut String, map: &OccupancyMap, pts: &[Vec2], attrs: &str) {
    let coords: Vec<String> = pts
        .iter()
        .filter_map(|p| map.world_to_pixel(*p).ok())
        .map(|q| format!("{:.2},{:.2}", q.x, q.y))
        .collect();
    if coords.len() >= 2 {
        let _ = writeln!(out, r#"<polyline points="{}" {attrs}/>"#, coords.join(" "));
    }
}

/// Renders obstacles filled, the observed past solid, the true future
/// dashed and each sample as a thin line; colliding samples in red.
pub fn render(map: &OccupancyMap, overlays: &[Overlay]) -> String {
    let (w, h) = (map.width(), map.height());
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {w} {h}">"#,
        (w as f64 * SCALE).round(),
        (h as f64 * SCALE).round()
    );
    let _ = writeln!(out, r##"<rect x="0" y="0" width="{w}" height="{h}" fill="#ffffff"/>"##);
    let _ = writeln!(out, r##"<g id="obstacles" fill="#404040" shape-rendering="crispEdges">"##);
    for r in 0..h {
        let mut c = 0;
        while c < w {
            if map.cell(c as i64, r as i64) != OBSTACLE {
                c += 1;
                continue;
            }
            let start = c;
            while c < w && map.cell(c as i64, r as i64) == OBSTACLE {
                c += 1;
            }
            let _ = writeln!(out, r#"<rect x="{start}" y="{r}" width="{}" height="1"/>"#, c - start);
        }
    }
    out.push_str("</g>\n");
    for (i, o) in overlays.iter().enumerate() {
        let _ = writeln!(out, r#"<g id="window-{i}" fill="none" stroke-linecap="round">"#);
        for s in &o.samples {
            let colour = if collides(s, map, false) { "#d62728" } else { "#1f77b4" };
            let mut pts = vec![o.window.last_observed()];
            pts.extend_from_slice(s);
            polyline(&mut out, map, &pts, &format!(r#"class="sample" stroke="{colour}" stroke-width="0.4" stroke-opacity="0.8""#));
        }
        polyline(&mut out, map, &o.window.past, r##"class="past" stroke="#000000" stroke-width="1""##);
        let mut fut = vec![o.window.last_observed()];
        fut.extend_from_slice(&o.window.future);
        polyline(
            &mut out,
            map,
            &fut,
            r##"class="future" stroke="#2ca02c" stroke-width="1" stroke-dasharray="2,1.5""##,
        );
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ecam_core::gridmap::Homography;

    #[test]
    fn empty_overlay_is_map_only() {
        let mut map = OccupancyMap::open(10, 5, Homography::scaling(1.0)).unwrap();
        for c in 2..6 {
            map.set_cell(c, 1, OBSTACLE);
        }
        let svg = render(&map, &[]);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains(r#"<rect x="2" y="1" width="4" height="1"/>"#));
        assert!(!svg.contains("polyline"));
    }
}
