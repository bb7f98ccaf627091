//! Walkability analysis: rasterized walkable maps, Gaussian object-cost
//! maps, connected walkable regions, A* shortest paths, and the agent boxes
//! sampled along them; plus the interaction variant that checks whether
//! articulated objects (expanded to their fully-open extent) still leave
//! their interaction points reachable.
//!
//! The walkable map marks a cell free when its center lies inside the floor
//! polygon and at least half an agent width away from every object
//! footprint (equivalent to subtracting footprints dilated by `d/2`). The
//! cost map is soft instead of hard: in-floor cells cost 1 plus a Gaussian
//! bump per object, out-of-floor cells are effectively impassable, and the
//! A* search may cross footprints at high cost — that is exactly what lets
//! a path "through" a blocking object report where an agent would need the
//! space to walk.
//!
//! Regions use 4-connectivity (conservative walkability); paths use
//! 8-connectivity (smoother routes). Path endpoints default to the centers
//! of the two largest walkable regions; uniformly random walkable endpoints
//! are available behind an option.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::geometry::{normalize_yaw, point_in_polygon, OrientedBox3, Point2};
use crate::grid::{GridMap, RasterSpec};
use crate::scene::{FloorPlan, SceneLayout, Taxonomy};

/// In-floor base traversal cost.
pub const COST_BASE: f64 = 1.0;
/// Cost assigned outside the floor; cells at or above it are impassable.
pub const COST_MAX: f64 = 1e9;
/// Peak of the per-object Gaussian cost bump.
pub const COST_AMPLITUDE: f64 = 10.0;
/// Gaussian width as a fraction of the object's larger footprint half-extent.
const SIGMA_FACTOR: f64 = 0.5;

/// The embodied agent the maps are built for.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AgentSpec {
    /// Body width `d` in meters; footprints dilate by half of it.
    pub width: f64,
    /// Body height in meters (the vertical extent of sampled agent boxes).
    pub height: f64,
    /// Interaction distance in meters: how close a walkable cell must be to
    /// an interaction point to count as serving it.
    pub interaction_distance: f64,
}

impl AgentSpec {
    pub fn new(width: f64, height: f64, interaction_distance: f64) -> Result<Self> {
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::Raster(format!("agent width must be positive, got {width}")));
        }
        if !(height > 0.0 && height.is_finite()) {
            return Err(Error::Raster(format!("agent height must be positive, got {height}")));
        }
        if !(interaction_distance >= 0.0 && interaction_distance.is_finite()) {
            return Err(Error::Raster(format!(
                "interaction distance must be non-negative, got {interaction_distance}"
            )));
        }
        Ok(Self { width, height, interaction_distance })
    }

    /// The desk-scale default: a 0.3 m wide, 1.7 m tall agent that can
    /// interact within 0.3 m.
    pub fn default_desk() -> Self {
        Self { width: 0.3, height: 1.7, interaction_distance: 0.3 }
    }
}

/// One 4-connected walkable region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    /// Member cells as `(i, j)` grid indices.
    pub cells: Vec<(usize, usize)>,
    /// Cell count.
    pub area: usize,
    /// The member cell nearest the region centroid.
    pub center: (usize, usize),
}

/// A cost-optimal grid path plus the agent boxes sampled along it.
#[derive(Debug, Clone, PartialEq)]
pub struct PathResult {
    /// 8-adjacent cells from start to goal inclusive.
    pub cells: Vec<(usize, usize)>,
    /// Sum of edge costs (mean endpoint cell cost times step length).
    pub total_cost: f64,
    /// Agent boxes along the path (filled by [`agent_boxes`]).
    pub boxes: Vec<OrientedBox3>,
}

/// Everything [`reach_pipeline`] produces for one scene.
#[derive(Debug, Clone)]
pub struct ReachResult {
    pub walkable: GridMap<bool>,
    pub cost: GridMap<f64>,
    pub regions: Vec<Region>,
    /// Path between the chosen endpoints; absent when fewer than two
    /// regions exist (or random endpoints cannot be drawn).
    pub path: Option<PathResult>,
}

/// Rasterization and endpoint options for the pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReachOptions {
    /// Cell edge length in meters.
    pub resolution: f64,
    /// Draw path endpoints uniformly from all walkable cells with this
    /// seed instead of using the two largest regions' centers.
    pub random_endpoints: Option<u64>,
}

impl Default for ReachOptions {
    fn default() -> Self {
        Self { resolution: 0.05, random_endpoints: None }
    }
}

/// Boolean free-space map: cell centers inside the floor and farther than
/// half the agent width from every object footprint.
pub fn walkable_map(
    floor: &FloorPlan,
    boxes: &[OrientedBox3],
    agent: &AgentSpec,
    spec: &RasterSpec,
) -> GridMap<bool> {
    let half = agent.width / 2.0;
    let mut map = GridMap::filled(spec.clone(), false);
    for j in 0..spec.height {
        for i in 0..spec.width {
            let p = spec.cell_center(i, j);
            if !point_in_polygon(p, &floor.polygon) {
                continue;
            }
            let blocked = boxes.iter().any(|b| b.footprint_distance(p) <= half);
            map.set(i, j, !blocked);
        }
    }
    map
}

/// Scalar traversal-cost map: `COST_MAX` outside the floor, otherwise the
/// base cost plus one Gaussian bump per object with amplitude
/// [`COST_AMPLITUDE`] and width half the object's larger footprint
/// half-extent.
pub fn cost_map(floor: &FloorPlan, boxes: &[OrientedBox3], spec: &RasterSpec) -> GridMap<f64> {
    let mut map = GridMap::filled(spec.clone(), COST_MAX);
    for j in 0..spec.height {
        for i in 0..spec.width {
            let p = spec.cell_center(i, j);
            if !point_in_polygon(p, &floor.polygon) {
                continue;
            }
            let mut cost = COST_BASE;
            for b in boxes {
                let sigma = SIGMA_FACTOR * b.half_extents[0].max(b.half_extents[2]);
                let d = b.footprint_distance(p);
                cost += COST_AMPLITUDE * (-d * d / (2.0 * sigma * sigma)).exp();
            }
            map.set(i, j, cost);
        }
    }
    map
}

/// 4-connected flood fill over the true cells, sorted by area descending
/// (ties by first-discovered), each with the member cell nearest its
/// centroid.
pub fn connected_areas(walkable: &GridMap<bool>) -> Vec<Region> {
    let (w, h) = (walkable.spec.width, walkable.spec.height);
    let mut region_of = vec![usize::MAX; w * h];
    let mut regions: Vec<Vec<(usize, usize)>> = Vec::new();
    for j0 in 0..h {
        for i0 in 0..w {
            if !*walkable.get(i0, j0) || region_of[j0 * w + i0] != usize::MAX {
                continue;
            }
            let id = regions.len();
            let mut cells = Vec::new();
            let mut stack = vec![(i0, j0)];
            region_of[j0 * w + i0] = id;
            while let Some((i, j)) = stack.pop() {
                cells.push((i, j));
                let mut push = |ni: usize, nj: usize, region_of: &mut Vec<usize>| {
                    if *walkable.get(ni, nj) && region_of[nj * w + ni] == usize::MAX {
                        region_of[nj * w + ni] = id;
                        stack.push((ni, nj));
                    }
                };
                if i > 0 {
                    push(i - 1, j, &mut region_of);
                }
                if i + 1 < w {
                    push(i + 1, j, &mut region_of);
                }
                if j > 0 {
                    push(i, j - 1, &mut region_of);
                }
                if j + 1 < h {
                    push(i, j + 1, &mut region_of);
                }
            }
            cells.sort_unstable_by_key(|&(i, j)| (j, i));
            regions.push(cells);
        }
    }
    let mut out: Vec<Region> = regions
        .into_iter()
        .map(|cells| {
            let area = cells.len();
            let (si, sj) = cells
                .iter()
                .fold((0.0, 0.0), |(a, b), &(i, j)| (a + i as f64, b + j as f64));
            let (ci, cj) = (si / area as f64, sj / area as f64);
            let center = *cells
                .iter()
                .min_by(|&&(ai, aj), &&(bi, bj)| {
                    let da = (ai as f64 - ci).powi(2) + (aj as f64 - cj).powi(2);
                    let db = (bi as f64 - ci).powi(2) + (bj as f64 - cj).powi(2);
                    da.total_cmp(&db).then_with(|| (aj, ai).cmp(&(bj, bi)))
                })
                .expect("region non-empty");
            Region { cells, area, center }
        })
        .collect();
    out.sort_by(|a, b| b.area.cmp(&a.area));
    out
}

/// Min-heap entry ordered by f-score, then insertion sequence (FIFO among
/// ties, which keeps the search deterministic).
struct HeapEntry {
    f: f64,
    seq: u64,
    cell: (usize, usize),
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.f == other.f && self.seq == other.seq
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap, we want the smallest f first.
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

const NEIGHBORS: [(isize, isize); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

/// Sum of an 8-connected path's edge costs under the mean-endpoint rule.
pub fn path_cost(cost: &GridMap<f64>, cells: &[(usize, usize)]) -> f64 {
    let mut total = 0.0;
    for w in cells.windows(2) {
        let (a, b) = (w[0], w[1]);
        let step = if a.0 != b.0 && a.1 != b.1 { std::f64::consts::SQRT_2 } else { 1.0 };
        total += 0.5 * (cost.get(a.0, a.1) + cost.get(b.0, b.1)) * step;
    }
    total
}

/// Cost-optimal 8-connected path on the cost map.
///
/// Edge cost is the mean of the endpoint cell costs times the step length
/// (1 or sqrt(2) cells); the octile-distance heuristic scaled by the
/// cheapest cell on the map is consistent, so the first expansion of the
/// goal is optimal. Cells at or above [`COST_MAX`] are impassable.
pub fn astar(
    cost: &GridMap<f64>,
    start: (usize, usize),
    goal: (usize, usize),
) -> Result<PathResult> {
    let spec = cost.spec;
    let (w, h) = (spec.width, spec.height);
    let idx = |(i, j): (usize, usize)| j * w + i;
    if start == goal {
        return Err(Error::Raster("path start and goal coincide".into()));
    }
    for (name, c) in [("start", start), ("goal", goal)] {
        if c.0 >= w || c.1 >= h {
            return Err(Error::Raster(format!("path {name} {c:?} outside the raster")));
        }
        if *cost.get(c.0, c.1) >= COST_MAX {
            return Err(Error::Raster(format!("path {name} {c:?} lies on an impassable cell")));
        }
    }
    let min_cost = cost
        .cells()
        .iter()
        .copied()
        .filter(|&c| c < COST_MAX)
        .fold(f64::INFINITY, f64::min);
    let octile = |a: (usize, usize), b: (usize, usize)| {
        let dx = (a.0 as f64 - b.0 as f64).abs();
        let dy = (a.1 as f64 - b.1 as f64).abs();
        let (lo, hi) = if dx < dy { (dx, dy) } else { (dy, dx) };
        (hi - lo) + std::f64::consts::SQRT_2 * lo
    };
    let mut g = vec![f64::INFINITY; w * h];
    let mut came: Vec<Option<(usize, usize)>> = vec![None; w * h];
    let mut closed = vec![false; w * h];
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    g[idx(start)] = 0.0;
    heap.push(HeapEntry { f: min_cost * octile(start, goal), seq, cell: start });
    while let Some(HeapEntry { cell, .. }) = heap.pop() {
        let ci = idx(cell);
        if closed[ci] {
            continue;
        }
        closed[ci] = true;
        if cell == goal {
            let mut cells = vec![cell];
            let mut cur = cell;
            while let Some(prev) = came[idx(cur)] {
                cells.push(prev);
                cur = prev;
            }
            cells.reverse();
            return Ok(PathResult { cells, total_cost: g[ci], boxes: Vec::new() });
        }
        let here = *cost.get(cell.0, cell.1);
        for (di, dj) in NEIGHBORS {
            let (ni, nj) = (cell.0 as isize + di, cell.1 as isize + dj);
            if ni < 0 || nj < 0 || ni as usize >= w || nj as usize >= h {
                continue;
            }
            let n = (ni as usize, nj as usize);
            let nc = *cost.get(n.0, n.1);
            if nc >= COST_MAX || closed[idx(n)] {
                continue;
            }
            let step = if di != 0 && dj != 0 { std::f64::consts::SQRT_2 } else { 1.0 };
            let tentative = g[ci] + 0.5 * (here + nc) * step;
            if tentative < g[idx(n)] {
                g[idx(n)] = tentative;
                came[idx(n)] = Some(cell);
                seq += 1;
                heap.push(HeapEntry { f: tentative + min_cost * octile(n, goal), seq, cell: n });
            }
        }
    }
    Err(Error::Raster(format!("no path from {start:?} to {goal:?} under passable cost")))
}

/// Sample `l` agent boxes at arc-length-uniform midpoints along the path's
/// world-space polyline. Each box has a `width x width` footprint, the
/// agent's height, and yaw aligned with the local path direction.
pub fn agent_boxes(
    path: &PathResult,
    spec: &RasterSpec,
    agent: &AgentSpec,
    l: usize,
) -> Result<Vec<OrientedBox3>> {
    if path.cells.is_empty() {
        return Err(Error::Raster("cannot sample agent boxes on an empty path".into()));
    }
    let pts: Vec<Point2> = path.cells.iter().map(|&(i, j)| spec.cell_center(i, j)).collect();
    let mut cum = vec![0.0];
    for wnd in pts.windows(2) {
        cum.push(cum.last().unwrap() + wnd[0].dist(wnd[1]));
    }
    let total = *cum.last().unwrap();
    let make_box = |p: Point2, yaw: f64| {
        OrientedBox3::new(
            [p.x, agent.height / 2.0, p.z],
            [agent.width / 2.0, agent.height / 2.0, agent.width / 2.0],
            yaw,
        )
    };
    let mut out = Vec::with_capacity(l);
    for k in 0..l {
        let target = total * (k as f64 + 0.5) / l as f64;
        if total == 0.0 || pts.len() == 1 {
            out.push(make_box(pts[0], 0.0)?);
            continue;
        }
        // Find the segment containing the target arc length.
        let mut seg = 0;
        while seg + 2 < cum.len() && cum[seg + 1] < target {
            seg += 1;
        }
        let seg_len = cum[seg + 1] - cum[seg];
        let frac = if seg_len > 0.0 { (target - cum[seg]) / seg_len } else { 0.0 };
        let a = pts[seg];
        let b = pts[seg + 1];
        let pos = Point2::new(a.x + (b.x - a.x) * frac, a.z + (b.z - a.z) * frac);
        let yaw = normalize_yaw((b.z - a.z).atan2(b.x - a.x));
        out.push(make_box(pos, yaw)?);
    }
    Ok(out)
}

/// The agent-box count used for a path of `cells` cells.
pub fn default_box_count(cells: usize) -> usize {
    (cells / 5).max(2)
}

/// Build the raster, walkable and cost maps, regions, and (when two
/// regions exist) the agent-box-decorated path between the two largest
/// regions' centers — or between random walkable cells when
/// `opts.random_endpoints` is set.
pub fn reach_pipeline(
    boxes: &[OrientedBox3],
    floor: &FloorPlan,
    agent: &AgentSpec,
    opts: &ReachOptions,
) -> Result<ReachResult> {
    let (lo, hi) = floor.polygon.bbox();
    let spec = RasterSpec::covering(lo, hi, opts.resolution, 0.0)?;
    let walkable = walkable_map(floor, boxes, agent, &spec);
    let cost = cost_map(floor, boxes, &spec);
    let regions = connected_areas(&walkable);
    let endpoints = match opts.random_endpoints {
        None => {
            if regions.len() >= 2 {
                Some((regions[0].center, regions[1].center))
            } else {
                None
            }
        }
        Some(seed) => {
            let mut all: Vec<(usize, usize)> = Vec::new();
            for r in &regions {
                all.extend_from_slice(&r.cells);
            }
            all.sort_unstable_by_key(|&(i, j)| (j, i));
            if all.len() >= 2 {
                let mut rng = ChaCha12Rng::seed_from_u64(seed);
                let a = all[rng.random_range(0..all.len())];
                let b = loop {
                    let c = all[rng.random_range(0..all.len())];
                    if c != a {
                        break c;
                    }
                };
                Some((a, b))
            } else {
                None
            }
        }
    };
    let path = match endpoints {
        None => None,
        Some((s, gl)) => {
            let mut p = astar(&cost, s, gl)?;
            p.boxes = agent_boxes(&p, &spec, agent, default_box_count(p.cells.len()))?;
            Some(p)
        }
    };
    Ok(ReachResult { walkable, cost, regions, path })
}

/// [`reach_pipeline`] on a decoded scene's object boxes.
pub fn reach_for_scene(
    scene: &SceneLayout,
    taxonomy: &Taxonomy,
    floor: &FloorPlan,
    agent: &AgentSpec,
    opts: &ReachOptions,
) -> Result<ReachResult> {
    let (indexed, _skipped) = crate::scene::slots_to_boxes(scene, taxonomy);
    let boxes: Vec<OrientedBox3> = indexed.into_iter().map(|(_, b)| b).collect();
    reach_pipeline(&boxes, floor, agent, opts)
}

/// Reachability of one interaction point.
#[derive(Debug, Clone)]
pub struct TargetReach {
    pub target: Point2,
    /// Some walkable cell within the interaction distance belongs to the
    /// largest walkable region.
    pub reachable: bool,
    /// For unreachable targets: agent boxes along the cost-optimal path
    /// from the largest region's center toward the target, for guidance.
    pub guidance_boxes: Vec<OrientedBox3>,
}

/// Result of [`interaction_reach`].
#[derive(Debug, Clone)]
pub struct InteractionReport {
    /// Fraction of targets whose interaction point is served by the main
    /// walkable region (1 for an empty target list).
    pub fraction: f64,
    pub per_target: Vec<TargetReach>,
}

/// Check which interaction points remain reachable once articulated
/// objects are expanded to their fully-open extent.
///
/// `expanded_boxes` must already hold the opened geometry (see the asset
/// catalog's articulation helpers); this module only rasterizes them. A
/// target counts as reachable when some walkable cell within the agent's
/// interaction distance lies in the largest walkable region. Unreachable
/// targets get agent boxes along the soft-cost path from the main region
/// to the target (empty when no such path exists).
pub fn interaction_reach(
    expanded_boxes: &[OrientedBox3],
    floor: &FloorPlan,
    agent: &AgentSpec,
    targets: &[Point2],
    opts: &ReachOptions,
) -> Result<InteractionReport> {
    if targets.is_empty() {
        return Ok(InteractionReport { fraction: 1.0, per_target: Vec::new() });
    }
    let (lo, hi) = floor.polygon.bbox();
    let spec = RasterSpec::covering(lo, hi, opts.resolution, 0.0)?;
    let walkable = walkable_map(floor, expanded_boxes, agent, &spec);
    let cost = cost_map(floor, expanded_boxes, &spec);
    let regions = connected_areas(&walkable);
    let mut in_main = GridMap::filled(spec.clone(), false);
    if let Some(main) = regions.first() {
        for &(i, j) in &main.cells {
            in_main.set(i, j, true);
        }
    }
    let delta = agent.interaction_distance;
    let mut per_target = Vec::with_capacity(targets.len());
    let mut reached = 0usize;
    for &target in targets {
        if spec.cell_of(target).is_none() {
            return Err(Error::Raster(format!(
                "interaction target ({}, {}) outside the raster",
                target.x, target.z
            )));
        }
        let mut reachable = false;
        'scan: for j in 0..spec.height {
            for i in 0..spec.width {
                if *in_main.get(i, j) && spec.cell_center(i, j).dist(target) <= delta {
                    reachable = true;
                    break 'scan;
                }
            }
        }
        let mut guidance_boxes = Vec::new();
        if reachable {
            reached += 1;
        } else if let (Some(main), Some(goal)) = (regions.first(), spec.cell_of(target)) {
            let start = main.center;
            if start != goal && *cost.get(goal.0, goal.1) < COST_MAX {
                if let Ok(p) = astar(&cost, start, goal) {
                    guidance_boxes =
                        agent_boxes(&p, &spec, agent, default_box_count(p.cells.len()))?;
                }
            }
        }
        per_target.push(TargetReach { target, reachable, guidance_boxes });
    }
    Ok(InteractionReport { fraction: reached as f64 / targets.len() as f64, per_target })
}

/// Write a walkable map as a binary PGM (P5): walkable cells white,
/// blocked cells black, rows top-to-bottom in decreasing `z`.
pub fn write_pgm_walkable(map: &GridMap<bool>, path: &Path) -> Result<()> {
    let spec = map.spec;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{} {}\n255\n", spec.width, spec.height)?;
    for j in (0..spec.height).rev() {
        for i in 0..spec.width {
            f.write_all(&[if *map.get(i, j) { 255u8 } else { 0u8 }])?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Write a cost map as a binary PGM (P5): cheap cells light, expensive or
/// impassable cells dark; the gray ramp saturates at the base cost plus
/// one full bump.
pub fn write_pgm_cost(map: &GridMap<f64>, path: &Path) -> Result<()> {
    let spec = map.spec;
    let ceil = COST_BASE + COST_AMPLITUDE;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{} {}\n255\n", spec.width, spec.height)?;
    for j in (0..spec.height).rev() {
        for i in 0..spec.width {
            let c = *map.get(i, j);
            let frac = (c.min(ceil) / ceil).clamp(0.0, 1.0);
            f.write_all(&[(255.0 * (1.0 - frac)).round() as u8])?;
        }
    }
    f.flush()?;
    Ok(())
}
