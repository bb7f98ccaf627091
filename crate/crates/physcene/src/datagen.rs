//! Procedural generator of constraint-clean training layouts: rectangular
//! and L-shaped rooms populated by rejection sampling, with wall-aligned
//! priors for large furniture and optional violation injectors for metric
//! fixtures.
//!
//! Every accepted placement is collision-free and fully inside the floor,
//! and a final raster check guarantees a single connected walkable region
//! (objects are dropped, newest first, until it holds). Emitted clean
//! scenes therefore score zero collision, zero out-of-bounds, and a
//! walkable ratio of one by construction.
//!
//! Generation is deterministic per `(seed, scene index)`: each index uses
//! its own derived random stream, so parallel generation and partial
//! generation produce bit-identical records.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_yaw, obb_iou_3d, point_in_polygon, OrientedBox3, Point2, Polygon2};
use crate::grid::RasterSpec;
use crate::reachability::{connected_areas, walkable_map, AgentSpec};
use crate::scene::{FloorPlan, ObjectSlot, SceneLayout, Taxonomy, FEATURE_DIM};

/// Agent width used by the generator's single-region acceptance check.
pub const GEN_AGENT_WIDTH: f64 = 0.3;
/// Raster resolution of that check (meters per cell).
const GEN_RESOLUTION: f64 = 0.05;
/// Gap left between wall-aligned furniture backs and the wall (meters).
const WALL_GAP: (f64, f64) = (0.01, 0.05);
/// Standard deviation of the shape-feature noise around category anchors.
const FEATURE_NOISE: f64 = 0.05;

/// Chance-controlled constraint violations for metric fixtures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViolationConfig {
    /// Chance a scene gets one object moved onto another.
    pub collision_probability: f64,
    /// Chance a scene gets one object pushed past the floor boundary.
    pub out_of_bounds_probability: f64,
    /// Chance a scene gets a room-splitting bar added.
    pub blocking_probability: f64,
}

impl Default for ViolationConfig {
    fn default() -> Self {
        Self {
            collision_probability: 0.0,
            out_of_bounds_probability: 0.0,
            blocking_probability: 0.0,
        }
    }
}

/// Size prior and placement style for one category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryPrior {
    /// Mean full extents `[x, y, z]` in meters.
    pub size_mean: [f64; 3],
    /// Uniform half-spread around the mean, per axis.
    pub size_spread: [f64; 3],
    /// Back the object against a random wall instead of free placement.
    pub wall_aligned: bool,
    /// Relative draw weight.
    pub weight: f64,
}

/// Everything the generator needs: room family, size ranges, priors,
/// rejection budget, and injectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    /// Chance a room is L-shaped rather than rectangular.
    pub l_shape_probability: f64,
    /// Range of room side lengths (meters).
    pub side_range: (f64, f64),
    /// Inclusive range of objects requested per scene.
    pub object_count: (usize, usize),
    /// Slots per scene (padding beyond the object count stays empty).
    pub n_slots: usize,
    /// Size priors aligned with the taxonomy's named categories.
    pub priors: Vec<CategoryPrior>,
    /// Placement attempts per object before giving up.
    pub max_attempts: usize,
    pub violations: ViolationConfig,
}

impl GeneratorConfig {
    /// Defaults for the bedroom taxonomy.
    pub fn default_bedroom(seed: u64) -> Self {
        let p = |size_mean: [f64; 3], size_spread: [f64; 3], wall_aligned: bool, weight: f64| {
            CategoryPrior { size_mean, size_spread, wall_aligned, weight }
        };
        Self {
            seed,
            l_shape_probability: 0.3,
            side_range: (3.0, 6.0),
            object_count: (3, 8),
            n_slots: 12,
            priors: vec![
                p([1.6, 0.5, 2.0], [0.2, 0.05, 0.2], true, 1.2),   // bed
                p([1.2, 2.0, 0.6], [0.3, 0.1, 0.05], true, 1.0),   // wardrobe
                p([0.45, 0.5, 0.4], [0.05, 0.05, 0.05], false, 1.5), // nightstand
                p([1.2, 0.75, 0.6], [0.2, 0.03, 0.05], true, 0.8), // desk
                p([0.45, 0.9, 0.45], [0.05, 0.05, 0.05], false, 1.2), // chair
                p([0.9, 0.75, 0.9], [0.2, 0.05, 0.2], false, 0.8), // table
                p([1.8, 0.8, 0.85], [0.3, 0.05, 0.1], true, 0.6),  // sofa
                p([0.8, 1.8, 0.3], [0.15, 0.2, 0.03], true, 0.8),  // bookshelf
            ],
            max_attempts: 64,
            violations: ViolationConfig::default(),
        }
    }

    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<()> {
        let (lo, hi) = self.side_range;
        if !(lo.is_finite() && hi.is_finite() && 0.5 <= lo && lo <= hi) {
            return Err(Error::Config(format!("bad room side range ({lo}, {hi})")));
        }
        let (clo, chi) = self.object_count;
        if clo > chi || chi == 0 {
            return Err(Error::Config(format!("bad object count range ({clo}, {chi})")));
        }
        if self.n_slots == 0 || chi > self.n_slots {
            return Err(Error::Config(format!(
                "{chi} objects cannot fit {} slots",
                self.n_slots
            )));
        }
        if self.priors.len() != taxonomy.named_count() {
            return Err(Error::Config(format!(
                "{} priors for {} categories",
                self.priors.len(),
                taxonomy.named_count()
            )));
        }
        for (i, prior) in self.priors.iter().enumerate() {
            let ok = prior.size_mean.iter().all(|&v| v > 0.0 && v.is_finite())
                && prior.size_spread.iter().all(|&v| v >= 0.0 && v.is_finite())
                && prior.weight >= 0.0;
            if !ok {
                return Err(Error::Config(format!("bad prior for category {i}")));
            }
        }
        if self.priors.iter().map(|p| p.weight).sum::<f64>() <= 0.0 {
            return Err(Error::Config("all category weights are zero".into()));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be positive".into()));
        }
        for (name, v) in [
            ("collision", self.violations.collision_probability),
            ("out-of-bounds", self.violations.out_of_bounds_probability),
            ("blocking", self.violations.blocking_probability),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} probability {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// One generated scene with its floor and generation flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene: SceneLayout,
    pub floor: FloorPlan,
    /// Fewer objects than requested survived placement.
    pub truncated: bool,
    /// Which injectors fired on this scene.
    pub injected_collision: bool,
    pub injected_out_of_bounds: bool,
    pub injected_blocking: bool,
}

impl SceneRecord {
    pub fn is_clean(&self) -> bool {
        !(self.injected_collision || self.injected_out_of_bounds || self.injected_blocking)
    }
}

/// A deterministic per-category anchor direction in feature space.
pub fn category_anchor(category: usize) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(0x0a5e_u64 + category as u64);
    (0..FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Sample a rectangular or L-shaped floor within the configured size
/// range, centered near the origin.
pub fn generate_floor(cfg: &GeneratorConfig, rng: &mut impl Rng) -> FloorPlan {
    let (lo, hi) = cfg.side_range;
    let w = rng.random_range(lo..=hi);
    let d = rng.random_range(lo..=hi);
    let (hw, hd) = (w / 2.0, d / 2.0);
    let polygon = if rng.random_range(0.0..1.0) < cfg.l_shape_probability {
        // Cut one corner rectangle out of the full rectangle.
        let notch_w = w * rng.random_range(0.3..0.6);
        let notch_d = d * rng.random_range(0.3..0.6);
        let corner = rng.random_range(0..4u32);
        let verts = match corner {
            // Notch at (+x, +z).
            0 => vec![
                Point2::new(-hw, -hd),
                Point2::new(hw, -hd),
                Point2::new(hw, hd - notch_d),
                Point2::new(hw - notch_w, hd - notch_d),
                Point2::new(hw - notch_w, hd),
                Point2::new(-hw, hd),
            ],
            // Notch at (-x, +z).
            1 => vec![
                Point2::new(-hw, -hd),
                Point2::new(hw, -hd),
                Point2::new(hw, hd),
                Point2::new(-hw + notch_w, hd),
                Point2::new(-hw + notch_w, hd - notch_d),
                Point2::new(-hw, hd - notch_d),
            ],
            // Notch at (-x, -z).
            2 => vec![
                Point2::new(-hw + notch_w, -hd),
                Point2::new(hw, -hd),
                Point2::new(hw, hd),
                Point2::new(-hw, hd),
                Point2::new(-hw, -hd + notch_d),
                Point2::new(-hw + notch_w, -hd + notch_d),
            ],
            // Notch at (+x, -z).
            _ => vec![
                Point2::new(-hw, -hd),
                Point2::new(hw - notch_w, -hd),
                Point2::new(hw - notch_w, -hd + notch_d),
                Point2::new(hw, -hd + notch_d),
                Point2::new(hw, hd),
                Point2::new(-hw, hd),
            ],
        };
        Polygon2::new(verts).expect("generated L-shape is a valid polygon")
    } else {
        Polygon2::rectangle(0.0, 0.0, w, d).expect("generated rectangle is valid")
    };
    FloorPlan { id: "generated".into(), polygon }
}

/// Whole footprint inside the floor: corner check for convex floors,
/// plus dense boundary sampling for concave ones (a convex footprint can
/// only leave a simple polygon through its own boundary).
fn footprint_contained(b: &OrientedBox3, floor: &Polygon2) -> bool {
    let corners = b.footprint_corners();
    if !corners.iter().all(|&c| point_in_polygon(c, floor)) {
        return false;
    }
    if floor.is_convex() {
        return true;
    }
    for k in 0..4 {
        let (a, z) = (corners[k], corners[(k + 1) % 4]);
        let len = a.dist(z);
        let steps = ((len / 0.01).ceil() as usize).clamp(1, 600);
        for s in 1..steps {
            let t = s as f64 / steps as f64;
            if !point_in_polygon(a.add(z.sub(a).scale(t)), floor) {
                return false;
            }
        }
    }
    true
}

fn sample_size(prior: &CategoryPrior, rng: &mut impl Rng) -> [f64; 3] {
    let mut size = [0.0; 3];
    for a in 0..3 {
        let spread = prior.size_spread[a];
        let jitter = if spread > 0.0 { rng.random_range(-spread..=spread) } else { 0.0 };
        size[a] = (prior.size_mean[a] + jitter).max(0.1);
    }
    size
}

fn weighted_category(priors: &[CategoryPrior], rng: &mut impl Rng) -> usize {
    let total: f64 = priors.iter().map(|p| p.weight).sum();
    let mut pick = rng.random_range(0.0..total);
    for (i, p) in priors.iter().enumerate() {
        pick -= p.weight;
        if pick < 0.0 {
            return i;
        }
    }
    priors.len() - 1
}

/// Propose a placement: against a wall for wall-aligned categories (local
/// depth axis facing into the room), uniform over the floor otherwise.
fn propose_box(
    prior: &CategoryPrior,
    size: [f64; 3],
    floor: &Polygon2,
    rng: &mut impl Rng,
) -> Option<OrientedBox3> {
    let (hx, hy, hz) = (size[0] / 2.0, size[1] / 2.0, size[2] / 2.0);
    if prior.wall_aligned {
        // Pick an edge weighted by length, a point along it, and stand the
        // object just inside with its back to the wall.
        let edges: Vec<(Point2, Point2)> = floor.edges().collect();
        let lengths: Vec<f64> = edges.iter().map(|(a, b)| a.dist(*b)).collect();
        let total: f64 = lengths.iter().sum();
        let mut pick = rng.random_range(0.0..total);
        let mut chosen = 0;
        for (i, len) in lengths.iter().enumerate() {
            pick -= len;
            if pick < 0.0 {
                chosen = i;
                break;
            }
        }
        let (a, b) = edges[chosen];
        let len = lengths[chosen];
        if len < size[0] {
            return None; // wall shorter than the object
        }
        let dir = b.sub(a).scale(1.0 / len);
        // Keep the whole width on the wall segment.
        let margin = size[0] / 2.0;
        let t = rng.random_range(margin..=(len - margin));
        let p = a.add(dir.scale(t));
        let inward = Point2::new(-dir.z, dir.x); // interior lies left of the edge
        let gap = rng.random_range(WALL_GAP.0..=WALL_GAP.1);
        let center2 = p.add(inward.scale(hz + gap));
        let yaw = normalize_yaw(dir.z.atan2(dir.x));
        OrientedBox3::new([center2.x, hy, center2.z], [hx, hy, hz], yaw).ok()
    } else {
        let (lo, hi) = floor.bbox();
        let x = rng.random_range(lo.x..=hi.x);
        let z = rng.random_range(lo.z..=hi.z);
        let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        OrientedBox3::new([x, hy, z], [hx, hy, hz], yaw).ok()
    }
}

fn feature_for(category: usize, rng: &mut impl Rng) -> Vec<f64> {
    category_anchor(category)
        .into_iter()
        .map(|a| a + FEATURE_NOISE * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Count of connected walkable regions for the acceptance check.
fn walkable_regions(floor: &FloorPlan, boxes: &[OrientedBox3]) -> Result<usize> {
    let (lo, hi) = floor.polygon.bbox();
    let spec = RasterSpec::covering(lo, hi, GEN_RESOLUTION, 0.0)?;
    let agent = AgentSpec::new(GEN_AGENT_WIDTH, 1.7, 0.3)?;
    let walkable = walkable_map(floor, boxes, &agent, &spec);
    Ok(connected_areas(&walkable).len())
}

struct Placed {
    category: usize,
    b: OrientedBox3,
}

/// Populate one floor by rejection sampling. Placements that exhaust the
/// attempt budget, or that fragment the walkable area, are dropped and
/// the scene is flagged as truncated.
pub fn generate_scene(
    cfg: &GeneratorConfig,
    floor: &FloorPlan,
    rng: &mut impl Rng,
) -> Result<(SceneLayout, bool)> {
    let n_objects = rng.random_range(cfg.object_count.0..=cfg.object_count.1);
    // Draw categories up front, then place big wall-huggers first:
    // free-standing pieces squeeze into the remaining space more easily
    // than the other way round.
    let mut categories: Vec<usize> =
        (0..n_objects).map(|_| weighted_category(&cfg.priors, rng)).collect();
    categories.sort_by(|&a, &b| {
        let pa = &cfg.priors[a];
        let pb = &cfg.priors[b];
        pb.wall_aligned
            .cmp(&pa.wall_aligned)
            .then(volume_of(pb.size_mean).total_cmp(&volume_of(pa.size_mean)))
            .then(a.cmp(&b))
    });
    let mut placed: Vec<Placed> = Vec::new();
    let mut truncated = false;
    'objects: for &category in &categories {
        let prior = &cfg.priors[category];
        for _ in 0..cfg.max_attempts {
            let size = sample_size(prior, rng);
            let Some(b) = propose_box(prior, size, &floor.polygon, rng) else {
                continue;
            };
            if !footprint_contained(&b, &floor.polygon) {
                continue;
            }
            if placed.iter().any(|p| obb_iou_3d(&p.b, &b) > 0.0) {
                continue;
            }
            placed.push(Placed { category, b });
            continue 'objects;
        }
        truncated = true; // ran out of attempts for this object
    }
    // Single-walkable-region acceptance: drop newest placements until the
    // free space is connected again.
    loop {
        let boxes: Vec<OrientedBox3> = placed.iter().map(|p| p.b.clone()).collect();
        if walkable_regions(floor, &boxes)? == 1 {
            break;
        }
        if placed.pop().is_none() {
            return Err(Error::Config(format!(
                "floor {} has no walkable cell even when empty",
                floor.id
            )));
        }
        truncated = true;
    }
    let mut scene = SceneLayout::empty(taxonomy_for(cfg), cfg.n_slots, floor.id.clone());
    for (i, p) in placed.iter().enumerate() {
        let size = [
            2.0 * p.b.half_extents[0],
            2.0 * p.b.half_extents[1],
            2.0 * p.b.half_extents[2],
        ];
        scene.slots[i] = ObjectSlot::with_category(
            taxonomy_for(cfg),
            p.category,
            size,
            p.b.yaw,
            p.b.center,
            feature_for(p.category, rng),
        )?;
    }
    // Shuffle occupied and empty slots together so no slot index carries
    // meaning the model could latch onto.
    for i in (1..scene.slots.len()).rev() {
        let j = rng.random_range(0..=i);
        scene.slots.swap(i, j);
    }
    Ok((scene, truncated))
}

fn volume_of(size: [f64; 3]) -> f64 {
    size[0] * size[1] * size[2]
}

/// The taxonomy the default priors line up with.
fn taxonomy_for(_cfg: &GeneratorConfig) -> &'static Taxonomy {
    use std::sync::OnceLock;
    static TAX: OnceLock<Taxonomy> = OnceLock::new();
    TAX.get_or_init(Taxonomy::default_bedroom)
}

/// Overlay violations on a generated scene, per the configured chances.
fn inject_violations(
    record: &mut SceneRecord,
    cfg: &GeneratorConfig,
    taxonomy: &Taxonomy,
    rng: &mut impl Rng,
) {
    let occupied = record.scene.occupied(taxonomy);
    if rng.random_range(0.0..1.0) < cfg.violations.collision_probability {
        // Make some slot a barely-shifted twin of an occupied one: equal
        // yaws and a 5%-of-width offset keep the volume IoU large no
        // matter the shapes involved.
        let source = if occupied.is_empty() {
            // Nothing survived placement: seed one object mid-room first.
            place_fallback_object(record, taxonomy, rng)
        } else {
            Some(occupied[rng.random_range(0..occupied.len())])
        };
        let target = source.and_then(|i| {
            let twin_of_other = occupied.iter().find(|&&j| j != i).copied();
            twin_of_other.or_else(|| {
                record
                    .scene
                    .slots
                    .iter()
                    .position(|s| s.is_empty(taxonomy))
            })
        });
        if let (Some(i), Some(j)) = (source, target) {
            let twin = {
                let s = &record.scene.slots[i];
                let mut twin = s.clone();
                twin.location[0] += 0.05 * s.size[0];
                twin
            };
            record.scene.slots[j] = twin;
            record.injected_collision = true;
        }
    }
    if rng.random_range(0.0..1.0) < cfg.violations.out_of_bounds_probability && !occupied.is_empty()
    {
        // Push an object's center past a random stretch of wall.
        let i = occupied[rng.random_range(0..occupied.len())];
        let edges: Vec<(Point2, Point2)> = record.floor.polygon.edges().collect();
        let (a, b) = edges[rng.random_range(0..edges.len())];
        let dir = b.sub(a).scale(1.0 / a.dist(b));
        let outward = Point2::new(dir.z, -dir.x);
        let p = a.add(b.sub(a).scale(rng.random_range(0.2..0.8)));
        let c = p.add(outward.scale(0.1));
        let slot = &mut record.scene.slots[i];
        slot.location = [c.x, slot.size[1] / 2.0, c.z];
        record.injected_out_of_bounds = true;
    }
    if rng.random_range(0.0..1.0) < cfg.violations.blocking_probability {
        // A thin bar across the room splits the walkable area in two.
        if let Some(free) = record
            .scene
            .slots
            .iter()
            .position(|s| s.is_empty(taxonomy))
        {
            let (lo, hi) = record.floor.polygon.bbox();
            let span = hi.x - lo.x + 1.0;
            let z = (lo.z + hi.z) / 2.0 + rng.random_range(-0.3..0.3);
            let bar = ObjectSlot::with_category(
                taxonomy,
                3, // desk: the least implausible long thin obstacle
                [span, 0.5, 0.2],
                0.0,
                [(lo.x + hi.x) / 2.0, 0.25, z],
                feature_for(3, rng),
            )
            .expect("bar slot is valid");
            record.scene.slots[free] = bar;
            record.injected_blocking = true;
        }
    }
}

/// Drop a half-meter cube somewhere inside the floor, into the first
/// empty slot. Returns the slot index, or None when no slot or interior
/// point could be found.
fn place_fallback_object(
    record: &mut SceneRecord,
    taxonomy: &Taxonomy,
    rng: &mut impl Rng,
) -> Option<usize> {
    let free = record.scene.slots.iter().position(|s| s.is_empty(taxonomy))?;
    let (lo, hi) = record.floor.polygon.bbox();
    for _ in 0..256 {
        let p = Point2::new(
            rng.random_range(lo.x..=hi.x),
            rng.random_range(lo.z..=hi.z),
        );
        if point_in_polygon(p, &record.floor.polygon) {
            record.scene.slots[free] = ObjectSlot::with_category(
                taxonomy,
                5, // table
                [0.5, 0.5, 0.5],
                0.0,
                [p.x, 0.25, p.z],
                feature_for(5, rng),
            )
            .expect("fallback slot is valid");
            return Some(free);
        }
    }
    None
}

/// Generate `count` records on independent per-index random streams.
pub fn generate_dataset(cfg: &GeneratorConfig, count: usize) -> Result<Vec<SceneRecord>> {
    let taxonomy = taxonomy_for(cfg);
    cfg.validate(taxonomy)?;
    (0..count)
        .into_par_iter()
        .map(|index| {
            let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
            rng.set_stream(index as u64 + 1);
            let mut floor = generate_floor(cfg, &mut rng);
            floor.id = format!("floor-{index:05}");
            let (mut scene, truncated) = generate_scene(cfg, &floor, &mut rng)?;
            scene.floor_id = floor.id.clone();
            let mut record = SceneRecord {
                scene,
                floor,
                truncated,
                injected_collision: false,
                injected_out_of_bounds: false,
                injected_blocking: false,
            };
            inject_violations(&mut record, cfg, taxonomy, &mut rng);
            Ok(record)
        })
        .collect()
}

/// Deterministic disjoint shuffle-split by ratio.
pub fn split(
    dataset: Vec<SceneRecord>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<SceneRecord>, Vec<SceneRecord>, Vec<SceneRecord>)> {
    let (rt, rv, rs) = ratios;
    if !(rt >= 0.0 && rv >= 0.0 && rs >= 0.0) || (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios ({rt}, {rv}, {rs}) must be non-negative and sum to 1"
        )));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_train = (n as f64 * rt).floor() as usize;
    let n_val = (n as f64 * rv).floor() as usize;
    let mut slots: Vec<Option<SceneRecord>> = dataset.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<SceneRecord> {
        idx.iter().map(|&k| slots[k].take().expect("index used once")).collect()
    };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok((train, val, test))
}
