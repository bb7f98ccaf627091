//! Top-down SVG rendering: floor outline, object footprints colored by
//! category, dashed highlights on colliding or out-of-bounds objects, and
//! an optional walkable-space underlay.
//!
//! Everything is emitted as plain SVG text — scenes are vector data, so
//! no raster graphics stack is needed, and the files diff cleanly.

use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::geometry::{footprint_polygon, obb_iou_3d, OrientedBox3, Point2};
use crate::grid::RasterSpec;
use crate::metrics::{footprint_escape, TAU_COL, TAU_OUT};
use crate::reachability::{walkable_map, AgentSpec};
use crate::scene::{FloorPlan, SceneLayout, Taxonomy};

/// Knobs for [`render_scene_svg`].
#[derive(Debug, Clone)]
pub struct RenderOptions {
    /// Pixels per meter.
    pub scale: f64,
    /// Blank border around the floor, in meters.
    pub margin: f64,
    /// Underlay the agent's walkable cells in green.
    pub show_walkable: bool,
    /// Print category names on the footprints.
    pub show_labels: bool,
    /// Raster resolution for the walkable underlay (meters).
    pub resolution: f64,
    pub agent: AgentSpec,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            scale: 80.0,
            margin: 0.5,
            show_walkable: false,
            show_labels: true,
            resolution: 0.05,
            agent: AgentSpec::default_desk(),
        }
    }
}

/// Deterministic per-category fill color (golden-angle hue spacing, so any
/// number of categories stays distinguishable).
pub fn category_color(index: usize) -> String {
    let hue = (index as f64 * 137.50776405003785).rem_euclid(360.0);
    format!("hsl({hue:.1}, 62%, 52%)")
}

struct Frame {
    min: Point2,
    max_z: f64,
    scale: f64,
    margin: f64,
}

impl Frame {
    fn to_svg(&self, p: Point2) -> (f64, f64) {
        let x = (p.x - self.min.x + self.margin) * self.scale;
        let y = (self.max_z + self.margin - p.z) * self.scale;
        (x, y)
    }
}

fn points_attr(frame: &Frame, pts: &[Point2]) -> String {
    let mut s = String::new();
    for (i, p) in pts.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let (x, y) = frame.to_svg(*p);
        s.push_str(&format!("{x:.2},{y:.2}"));
    }
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render a layout to an SVG string (deterministic for a given input).
pub fn render_scene_svg(
    scene: &SceneLayout,
    floor: &FloorPlan,
    taxonomy: &Taxonomy,
    opts: &RenderOptions,
) -> Result<String> {
    let (lo, hi) = floor.polygon.bbox();
    let frame = Frame { min: lo, max_z: hi.z, scale: opts.scale, margin: opts.margin };
    let plan_w = (hi.x - lo.x + 2.0 * opts.margin) * opts.scale;
    let plan_h = (hi.z - lo.z + 2.0 * opts.margin) * opts.scale;

    let occupied = scene.occupied(taxonomy);
    // Slots with degenerate extents have no footprint; skip them.
    let boxes: Vec<(usize, OrientedBox3)> = occupied
        .iter()
        .filter_map(|&slot| scene.slots[slot].to_box().map(|b| (slot, b)))
        .collect();

    // Which objects to flag: any collision partner, and anything whose
    // footprint pokes past the walls.
    let mut colliding = vec![false; boxes.len()];
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            if obb_iou_3d(&boxes[i].1, &boxes[j].1) > TAU_COL {
                colliding[i] = true;
                colliding[j] = true;
            }
        }
    }
    let out_of_bounds: Vec<bool> = boxes
        .iter()
        .map(|(_, b)| footprint_escape(b, &floor.polygon) > TAU_OUT)
        .collect();

    // Legend for the categories actually present, in taxonomy order.
    let mut present: Vec<usize> = boxes.iter().map(|&(slot, _)| scene.slots[slot].category()).collect();
    present.sort_unstable();
    present.dedup();
    let legend_h = if present.is_empty() { 0.0 } else { 26.0 };

    let width = plan_w.ceil();
    let height = (plan_h + legend_h).ceil();
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\">\n"
    ));
    svg.push_str(&format!(
        "  <rect width=\"{width:.0}\" height=\"{height:.0}\" fill=\"#ffffff\"/>\n"
    ));

    // Floor slab.
    svg.push_str(&format!(
        "  <polygon class=\"floor\" points=\"{}\" fill=\"#f4f1ea\" stroke=\"#44403b\" stroke-width=\"2.5\"/>\n",
        points_attr(&frame, floor.polygon.vertices())
    ));

    // Walkable underlay as row-merged runs of cells.
    if opts.show_walkable {
        let spec = RasterSpec::covering(lo, hi, opts.resolution, 0.0)?;
        let plain: Vec<OrientedBox3> = boxes.iter().map(|(_, b)| b.clone()).collect();
        let map = walkable_map(floor, &plain, &opts.agent, &spec);
        let cell_px = opts.resolution * opts.scale;
        for j in 0..spec.height {
            let mut run_start: Option<usize> = None;
            for i in 0..=spec.width {
                let on = i < spec.width && *map.get(i, j);
                match (on, run_start) {
                    (true, None) => run_start = Some(i),
                    (false, Some(s)) => {
                        let a = spec.cell_center(s, j);
                        let (x0, yc) = frame.to_svg(a);
                        let x = x0 - cell_px / 2.0;
                        let y = yc - cell_px / 2.0;
                        let w = (i - s) as f64 * cell_px;
                        svg.push_str(&format!(
                            "  <rect class=\"walkable\" x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w:.2}\" \
                             height=\"{cell_px:.2}\" fill=\"#b9e0b4\" fill-opacity=\"0.55\"/>\n"
                        ));
                        run_start = None;
                    }
                    _ => {}
                }
            }
        }
    }

    // Object footprints.
    for (k, (slot_idx, b)) in boxes.iter().enumerate() {
        let slot = &scene.slots[*slot_idx];
        let cat = slot.category();
        let name = taxonomy.name(cat).unwrap_or("?");
        let poly = footprint_polygon(b);
        let color = category_color(cat);
        svg.push_str(&format!(
            "  <polygon class=\"object\" points=\"{}\" fill=\"{color}\" fill-opacity=\"0.85\" \
             stroke=\"#21201e\" stroke-width=\"1.2\">\n",
            points_attr(&frame, poly.vertices())
        ));
        svg.push_str(&format!(
            "    <title>{} {:.2} x {:.2} x {:.2} m</title>\n",
            xml_escape(name),
            slot.size[0],
            slot.size[1],
            slot.size[2]
        ));
        svg.push_str("  </polygon>\n");

        // Facing tick along the local x axis.
        let c = b.center2();
        let yaw = slot.yaw();
        let len = (slot.size[0] / 2.0) * 0.8;
        let tip = Point2::new(c.x + len * yaw.cos(), c.z + len * yaw.sin());
        let (cx, cy) = frame.to_svg(c);
        let (tx, ty) = frame.to_svg(tip);
        svg.push_str(&format!(
            "  <line x1=\"{cx:.2}\" y1=\"{cy:.2}\" x2=\"{tx:.2}\" y2=\"{ty:.2}\" \
             stroke=\"#21201e\" stroke-width=\"1.2\"/>\n"
        ));

        if colliding[k] {
            svg.push_str(&format!(
                "  <polygon class=\"collision\" points=\"{}\" fill=\"none\" stroke=\"#d62728\" \
                 stroke-width=\"3\" stroke-dasharray=\"7 4\"/>\n",
                points_attr(&frame, poly.vertices())
            ));
        }
        if out_of_bounds[k] {
            svg.push_str(&format!(
                "  <polygon class=\"out-of-bounds\" points=\"{}\" fill=\"none\" stroke=\"#e8920c\" \
                 stroke-width=\"3\" stroke-dasharray=\"2 4\"/>\n",
                points_attr(&frame, poly.vertices())
            ));
        }
        if opts.show_labels {
            svg.push_str(&format!(
                "  <text x=\"{cx:.2}\" y=\"{cy:.2}\" font-size=\"11\" text-anchor=\"middle\" \
                 dominant-baseline=\"middle\" fill=\"#1c1b1a\">{}</text>\n",
                xml_escape(name)
            ));
        }
    }

    // Legend strip along the bottom.
    let mut lx = 8.0;
    let ly = plan_h + 8.0;
    for &cat in &present {
        let name = taxonomy.name(cat).unwrap_or("?");
        svg.push_str(&format!(
            "  <rect class=\"legend\" x=\"{lx:.1}\" y=\"{ly:.1}\" width=\"12\" height=\"12\" \
             fill=\"{}\"/>\n",
            category_color(cat)
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" fill=\"#1c1b1a\">{}</text>\n",
            lx + 16.0,
            ly + 10.0,
            xml_escape(name)
        ));
        lx += 16.0 + 7.0 * (name.len() as f64) + 14.0;
    }

    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Render straight to a file.
pub fn write_scene_svg(
    path: &Path,
    scene: &SceneLayout,
    floor: &FloorPlan,
    taxonomy: &Taxonomy,
    opts: &RenderOptions,
) -> Result<()> {
    fs::write(path, render_scene_svg(scene, floor, taxonomy, opts)?)?;
    Ok(())
}
