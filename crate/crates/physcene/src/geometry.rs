//! Ground-plane polygons, yaw-rotated 3D boxes, and their intersections.
//!
//! World coordinates are meters with y up; the ground plane is spanned by x
//! and z. Every box in the system is an upright cuboid rotated only about the
//! y axis ([`OrientedBox3`]), so 3D overlap factors into a convex 2D footprint
//! intersection times a vertical interval overlap — [`obb_iou_3d`] exploits
//! exactly that. Polygon winding is counterclockwise when the plane is drawn
//! with x to the right and z upwards (positive shoelace area).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridMap, RasterSpec};

/// Distinctness / degeneracy cutoff for polygon vertices, in meters.
const VERTEX_EPS: f64 = 1e-9;
/// Minimum polygon area, in square meters.
const AREA_EPS: f64 = 1e-9;

/// A point (or vector) on the ground plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub z: f64,
}

impl Point2 {
    pub fn new(x: f64, z: f64) -> Self {
        Self { x, z }
    }

    pub fn sub(self, other: Self) -> Self {
        Self::new(self.x - other.x, self.z - other.z)
    }

    pub fn add(self, other: Self) -> Self {
        Self::new(self.x + other.x, self.z + other.z)
    }

    pub fn scale(self, s: f64) -> Self {
        Self::new(self.x * s, self.z * s)
    }

    pub fn dot(self, other: Self) -> f64 {
        self.x * other.x + self.z * other.z
    }

    /// 2D cross product (x1*z2 - z1*x2); positive when `other` is
    /// counterclockwise from `self`.
    pub fn cross(self, other: Self) -> f64 {
        self.x * other.z - self.z * other.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.z)
    }

    pub fn dist(self, other: Self) -> f64 {
        self.sub(other).norm()
    }
}

/// Wrap an angle to the canonical interval `[-pi, pi)`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = yaw.rem_euclid(two_pi);
    if r >= std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// An upright cuboid: axis-aligned in its local frame, rotated about the
/// world y axis by `yaw`, then translated to `center`.
///
/// `half_extents` are the local half sizes `[hx, hy, hz]`; the vertical
/// extent is `center[1] +- hy` regardless of yaw. Local direction `+x` maps
/// to world `(cos yaw, 0, sin yaw)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox3 {
    /// World-space center `[x, y, z]`.
    pub center: [f64; 3],
    /// Positive local half sizes `[hx, hy, hz]`.
    pub half_extents: [f64; 3],
    /// Rotation about world y, normalized to `[-pi, pi)`.
    pub yaw: f64,
}

impl OrientedBox3 {
    pub fn new(center: [f64; 3], half_extents: [f64; 3], yaw: f64) -> Result<Self> {
        for (k, &h) in half_extents.iter().enumerate() {
            if !(h.is_finite() && h > 0.0) {
                return Err(Error::Geometry(format!(
                    "half extent {k} must be finite and positive, got {h}"
                )));
            }
        }
        if center.iter().any(|c| !c.is_finite()) || !yaw.is_finite() {
            return Err(Error::Geometry("box center and yaw must be finite".into()));
        }
        Ok(Self { center, half_extents, yaw: normalize_yaw(yaw) })
    }

    /// Ground-plane center `(x, z)`.
    pub fn center2(&self) -> Point2 {
        Point2::new(self.center[0], self.center[2])
    }

    /// Vertical interval `[y_min, y_max]`.
    pub fn y_range(&self) -> (f64, f64) {
        (self.center[1] - self.half_extents[1], self.center[1] + self.half_extents[1])
    }

    pub fn volume(&self) -> f64 {
        8.0 * self.half_extents[0] * self.half_extents[1] * self.half_extents[2]
    }

    /// The four footprint corners, counterclockwise.
    pub fn footprint_corners(&self) -> [Point2; 4] {
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        let (hx, hz) = (self.half_extents[0], self.half_extents[2]);
        let rot = |dx: f64, dz: f64| {
            Point2::new(
                self.center[0] + dx * c - dz * s,
                self.center[2] + dx * s + dz * c,
            )
        };
        [rot(-hx, -hz), rot(hx, -hz), rot(hx, hz), rot(-hx, hz)]
    }

    /// Distance from a ground-plane point to the box footprint (0 inside).
    pub fn footprint_distance(&self, p: Point2) -> f64 {
        let d = p.sub(self.center2());
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        // Inverse rotation takes the offset into the box's local frame.
        let lx = d.x * c + d.z * s;
        let lz = -d.x * s + d.z * c;
        let qx = (lx.abs() - self.half_extents[0]).max(0.0);
        let qz = (lz.abs() - self.half_extents[2]).max(0.0);
        qx.hypot(qz)
    }
}

/// A simple polygon on the ground plane with counterclockwise winding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point2>", into = "Vec<Point2>")]
pub struct Polygon2 {
    vertices: Vec<Point2>,
}

impl Polygon2 {
    /// Validates: at least 3 distinct finite vertices, counterclockwise
    /// winding, positive area, and no non-adjacent edge crossings.
    pub fn new(vertices: Vec<Point2>) -> Result<Self> {
        let n = vertices.len();
        if n < 3 {
            return Err(Error::Geometry(format!("polygon needs >= 3 vertices, got {n}")));
        }
        if vertices.iter().any(|v| !(v.x.is_finite() && v.z.is_finite())) {
            return Err(Error::Geometry("polygon vertices must be finite".into()));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if vertices[i].dist(vertices[j]) < VERTEX_EPS {
                    return Err(Error::Geometry(format!(
                        "polygon vertices {i} and {j} coincide"
                    )));
                }
            }
        }
        let area = shoelace_area(&vertices);
        if area < AREA_EPS {
            return Err(Error::Geometry(format!(
                "polygon must be counterclockwise with positive area, signed area {area}"
            )));
        }
        // Non-adjacent edges must not cross.
        for i in 0..n {
            let (a1, b1) = (vertices[i], vertices[(i + 1) % n]);
            for j in (i + 1)..n {
                if j == i || (j + 1) % n == i || (i + 1) % n == j {
                    continue;
                }
                let (a2, b2) = (vertices[j], vertices[(j + 1) % n]);
                if segments_properly_intersect(a1, b1, a2, b2) {
                    return Err(Error::Geometry(format!(
                        "polygon edges {i} and {j} intersect"
                    )));
                }
            }
        }
        Ok(Self { vertices })
    }

    /// Axis-aligned rectangle centered at `(cx, cz)` with full extents
    /// `width` (x) by `depth` (z).
    pub fn rectangle(cx: f64, cz: f64, width: f64, depth: f64) -> Result<Self> {
        let (hw, hd) = (width / 2.0, depth / 2.0);
        Self::new(vec![
            Point2::new(cx - hw, cz - hd),
            Point2::new(cx + hw, cz - hd),
            Point2::new(cx + hw, cz + hd),
            Point2::new(cx - hw, cz + hd),
        ])
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        shoelace_area(&self.vertices)
    }

    /// `(lo, hi)` corners of the axis-aligned bounding box.
    pub fn bbox(&self) -> (Point2, Point2) {
        let mut lo = self.vertices[0];
        let mut hi = self.vertices[0];
        for v in &self.vertices {
            lo.x = lo.x.min(v.x);
            lo.z = lo.z.min(v.z);
            hi.x = hi.x.max(v.x);
            hi.z = hi.z.max(v.z);
        }
        (lo, hi)
    }

    /// Iterate edges as `(start, end)` pairs in winding order.
    pub fn edges(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Distance from a point to the polygon boundary (positive also inside).
    pub fn boundary_distance(&self, p: Point2) -> f64 {
        self.edges()
            .map(|(a, b)| segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min)
    }

    /// True when no vertex turns clockwise — the winding is already
    /// normalized counterclockwise, so this is full convexity.
    pub fn is_convex(&self) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let c = self.vertices[(i + 2) % n];
            b.sub(a).cross(c.sub(b)) >= -1e-12
        })
    }
}

impl TryFrom<Vec<Point2>> for Polygon2 {
    type Error = Error;
    fn try_from(vertices: Vec<Point2>) -> Result<Self> {
        Self::new(vertices)
    }
}

impl From<Polygon2> for Vec<Point2> {
    fn from(poly: Polygon2) -> Self {
        poly.vertices
    }
}

/// Signed shoelace area; positive for counterclockwise winding.
fn shoelace_area(vertices: &[Point2]) -> f64 {
    let n = vertices.len();
    let mut twice = 0.0;
    for i in 0..n {
        let a = vertices[i];
        let b = vertices[(i + 1) % n];
        twice += a.x * b.z - b.x * a.z;
    }
    twice / 2.0
}

/// True when the open segments (a1,b1) and (a2,b2) cross at an interior
/// point of both.
fn segments_properly_intersect(a1: Point2, b1: Point2, a2: Point2, b2: Point2) -> bool {
    let d1 = b2.sub(a2).cross(a1.sub(a2));
    let d2 = b2.sub(a2).cross(b1.sub(a2));
    let d3 = b1.sub(a1).cross(a2.sub(a1));
    let d4 = b1.sub(a1).cross(b2.sub(a1));
    (d1 > 0.0) != (d2 > 0.0) && (d3 > 0.0) != (d4 > 0.0)
}

/// Distance from point `p` to segment `ab`.
pub fn segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b.sub(a);
    let len2 = ab.dot(ab);
    if len2 <= VERTEX_EPS * VERTEX_EPS {
        return p.dist(a);
    }
    let t = (p.sub(a).dot(ab) / len2).clamp(0.0, 1.0);
    p.dist(a.add(ab.scale(t)))
}

/// Point-in-polygon by even-odd ray crossing; points on the boundary count
/// as inside.
pub fn point_in_polygon(p: Point2, poly: &Polygon2) -> bool {
    // Boundary first so edge/vertex hits are deterministic.
    for (a, b) in poly.edges() {
        if segment_distance(p, a, b) <= VERTEX_EPS {
            return true;
        }
    }
    let vs = poly.vertices();
    let n = vs.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (vi, vj) = (vs[i], vs[j]);
        if (vi.z > p.z) != (vj.z > p.z) {
            let x_cross = vj.x + (p.z - vj.z) / (vi.z - vj.z) * (vi.x - vj.x);
            if p.x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Clip a convex counterclockwise `subject` polygon by a convex
/// counterclockwise `clip` polygon (Sutherland-Hodgman). Returns the
/// intersection's vertices (possibly fewer than 3 when empty/degenerate).
pub fn convex_clip(subject: &[Point2], clip: &[Point2]) -> Vec<Point2> {
    let mut output = subject.to_vec();
    let n = clip.len();
    for k in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[k];
        let b = clip[(k + 1) % n];
        let edge = b.sub(a);
        let input = std::mem::take(&mut output);
        let m = input.len();
        for i in 0..m {
            let prev = input[(i + m - 1) % m];
            let cur = input[i];
            let prev_in = edge.cross(prev.sub(a)) >= 0.0;
            let cur_in = edge.cross(cur.sub(a)) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(line_segment_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_segment_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

/// Intersection of segment `pq` with the infinite line through `ab`;
/// callers guarantee the segment straddles the line.
fn line_segment_intersection(p: Point2, q: Point2, a: Point2, b: Point2) -> Point2 {
    let dir = q.sub(p);
    let edge = b.sub(a);
    let denom = edge.cross(dir);
    // Straddling endpoints make denom nonzero; guard anyway.
    if denom.abs() < 1e-300 {
        return p;
    }
    let t = edge.cross(a.sub(p)) / denom;
    p.add(dir.scale(t))
}

/// Footprint of a box as a counterclockwise quad polygon.
pub fn footprint_polygon(b: &OrientedBox3) -> Polygon2 {
    Polygon2 { vertices: b.footprint_corners().to_vec() }
}

/// Intersection-over-union of two yaw-only boxes.
///
/// The footprints are convex quads, so their overlap area comes from exact
/// polygon clipping; multiplying by the vertical interval overlap gives the
/// intersection volume. Result is clamped to `[0, 1]`.
pub fn obb_iou_3d(a: &OrientedBox3, b: &OrientedBox3) -> f64 {
    let (a_lo, a_hi) = a.y_range();
    let (b_lo, b_hi) = b.y_range();
    let dy = a_hi.min(b_hi) - a_lo.max(b_lo);
    if dy <= 0.0 {
        return 0.0;
    }
    let fa = a.footprint_corners();
    let fb = b.footprint_corners();
    let clipped = convex_clip(&fa, &fb);
    if clipped.len() < 3 {
        return 0.0;
    }
    let inter_area = shoelace_area(&clipped).max(0.0);
    let inter = inter_area * dy;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// One thick exterior box per polygon edge, flush with the edge.
///
/// Each box has local x along the edge, spans the full edge length, rises
/// from the floor to `height`, and extends `thickness` outward from the
/// edge line (so its center sits `thickness / 2` outside the midpoint).
pub fn wall_barriers(floor: &Polygon2, thickness: f64, height: f64) -> Result<Vec<OrientedBox3>> {
    if !(thickness.is_finite() && thickness > 0.0) {
        return Err(Error::Geometry(format!(
            "wall thickness must be positive, got {thickness}"
        )));
    }
    if !(height.is_finite() && height > 0.0) {
        return Err(Error::Geometry(format!("wall height must be positive, got {height}")));
    }
    let mut walls = Vec::with_capacity(floor.vertices().len());
    for (a, b) in floor.edges() {
        let edge = b.sub(a);
        let len = edge.norm();
        let dir = edge.scale(1.0 / len);
        // Counterclockwise winding puts the interior to the edge's left, so
        // the outward normal is the right-hand perpendicular.
        let outward = Point2::new(dir.z, -dir.x);
        let mid = a.add(edge.scale(0.5));
        let c2 = mid.add(outward.scale(thickness / 2.0));
        walls.push(OrientedBox3 {
            center: [c2.x, height / 2.0, c2.z],
            half_extents: [len / 2.0, height / 2.0, thickness / 2.0],
            yaw: normalize_yaw(dir.z.atan2(dir.x)),
        });
    }
    Ok(walls)
}

/// Rasterize a polygon onto a grid: a cell is set when its center lies
/// inside (or on the boundary of) the polygon. The grid must cover the
/// polygon's bounding box.
pub fn rasterize_polygon(poly: &Polygon2, spec: &RasterSpec) -> Result<GridMap<bool>> {
    let (lo, hi) = poly.bbox();
    let gx_hi = spec.origin.x + spec.width as f64 * spec.resolution;
    let gz_hi = spec.origin.z + spec.height as f64 * spec.resolution;
    let eps = 1e-9;
    if lo.x < spec.origin.x - eps
        || lo.z < spec.origin.z - eps
        || hi.x > gx_hi + eps
        || hi.z > gz_hi + eps
    {
        return Err(Error::Raster(format!(
            "polygon bbox ({},{})..({},{}) exceeds grid ({},{})..({gx_hi},{gz_hi})",
            lo.x, lo.z, hi.x, hi.z, spec.origin.x, spec.origin.z
        )));
    }
    let mut g = GridMap::filled(*spec, false);
    for j in 0..spec.height {
        for i in 0..spec.width {
            if point_in_polygon(spec.cell_center(i, j), poly) {
                g.set(i, j, true);
            }
        }
    }
    Ok(g)
}
