//! Static top-view SVG of a scene, the object path, robot base paths and
//! grasp points.

use std::fmt::Write;

use collab_core::planner::Trajectory;
use collab_core::select::{convex_hull_2d, Task};
use collab_core::shapes::Obb;
use collab_core::Scene;
use nalgebra::Vector2;

use crate::pipeline::GraspsArtifact;

const WIDTH: f64 = 800.0;
const MARGIN: f64 = 0.5;
const COLORS: [&str; 6] = [
    "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn footprint(boxes: &[Obb]) -> Vec<Vec<Vector2<f64>>> {
    boxes
        .iter()
        .map(|b| convex_hull_2d(&b.corners().iter().map(|c| c.xy()).collect::<Vec<_>>()))
        .collect()
}

struct Frame {
    lo: Vector2<f64>,
    scale: f64,
    height: f64,
}

impl Frame {
    fn px(&self, p: &Vector2<f64>) -> (f64, f64) {
        (
            (p.x - self.lo.x) * self.scale,
            self.height - (p.y - self.lo.y) * self.scale,
        )
    }

    fn polyline(&self, pts: &[Vector2<f64>]) -> String {
        let mut s = String::new();
        for p in pts {
            let (x, y) = self.px(p);
            let _ = write!(s, "{x:.1},{y:.1} ");
        }
        s.trim_end().to_string()
    }
}

pub fn plot_svg(
    scene: &Scene,
    task: &Task,
    trajectory: Option<&Trajectory>,
    grasps: Option<&GraspsArtifact>,
) -> String {
    let target = scene.object(task.object_id).ok();
    let statics: Vec<Obb> = scene
        .objects
        .iter()
        .filter(|o| o.id != task.object_id)
        .flat_map(|o| o.world_shapes())
        .collect();
    let start: Vec<Obb> = target
        .map(|o| o.world_shapes_at(&task.p_init))
        .unwrap_or_default();
    let goal: Vec<Obb> = target
        .map(|o| o.world_shapes_at(&task.p_end))
        .unwrap_or_default();
    let object_path: Vec<Vector2<f64>> = trajectory
        .map(|t| t.object_poses.iter().map(|p| p.translation.xy()).collect())
        .unwrap_or_default();
    let base_paths: Vec<Vec<Vector2<f64>>> = trajectory
        .map(|t| {
            (0..t.paths.len())
                .map(|i| {
                    t.stage1_paths[i]
                        .iter()
                        .chain(&t.paths[i])
                        .map(|q| Vector2::new(q.values[0], q.values[1]))
                        .collect()
                })
                .collect()
        })
        .unwrap_or_default();
    let grasp_points: Vec<(usize, u32, Vector2<f64>)> = grasps
        .map(|g| {
            g.robots
                .iter()
                .map(|r| (r.robot, r.label, r.pose.translation.xy()))
                .collect()
        })
        .unwrap_or_default();

    let mut all: Vec<Vector2<f64>> = Vec::new();
    for b in statics.iter().chain(&start).chain(&goal) {
        all.extend(b.corners().iter().map(|c| c.xy()));
    }
    all.extend(object_path.iter().copied());
    all.extend(base_paths.iter().flatten().copied());
    all.extend(grasps.into_iter().flat_map(|g| {
        g.robots
            .iter()
            .map(|r| Vector2::new(r.initial.values[0], r.initial.values[1]))
    }));
    if all.is_empty() {
        all.push(Vector2::zeros());
    }
    let lo = all
        .iter()
        .fold(Vector2::repeat(f64::INFINITY), |a, p| a.inf(p))
        - Vector2::repeat(MARGIN);
    let hi = all
        .iter()
        .fold(Vector2::repeat(f64::NEG_INFINITY), |a, p| a.sup(p))
        + Vector2::repeat(MARGIN);
    let scale = WIDTH / (hi.x - lo.x).max(1e-6);
    let frame = Frame {
        lo,
        scale,
        height: (hi.y - lo.y) * scale,
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH:.0}" height="{:.0}" viewBox="0 0 {WIDTH:.0} {:.0}">"#,
        frame.height, frame.height
    );
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    let mut polygons = |boxes: &[Obb], style: &str| {
        for hull in footprint(boxes) {
            let _ = writeln!(
                svg,
                r#"<polygon points="{}" {style}/>"#,
                frame.polyline(&hull)
            );
        }
    };
    polygons(&statics, r##"fill="#bbbbbb" stroke="#555555""##);
    polygons(
        &start,
        r##"fill="#9ecae1" fill-opacity="0.6" stroke="#3182bd""##,
    );
    polygons(
        &goal,
        r##"fill="none" stroke="#31a354" stroke-dasharray="6 4""##,
    );
    if object_path.len() > 1 {
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="black" stroke-width="2"/>"#,
            frame.polyline(&object_path)
        );
    }
    for (i, path) in base_paths.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            frame.polyline(path)
        );
    }
    if let Some(g) = grasps {
        for r in &g.robots {
            let (x, y) = frame.px(&Vector2::new(r.initial.values[0], r.initial.values[1]));
            let color = COLORS[r.robot % COLORS.len()];
            let _ = writeln!(
                svg,
                r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/>"#,
                x - 5.0,
                y - 5.0
            );
        }
    }
    for (robot, label, p) in &grasp_points {
        let (x, y) = frame.px(p);
        let color = COLORS[robot % COLORS.len()];
        let _ = writeln!(
            svg,
            r#"<circle cx="{x:.1}" cy="{y:.1}" r="5" fill="{color}" stroke="black"/>"#
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12">{label}</text>"#,
            x + 7.0,
            y - 7.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}
