//! Physical-plausibility and interactivity measurements over sets of
//! decoded scenes: collision rates at object and scene granularity,
//! out-of-floor rate, walkable-area concentration, object reachability
//! from a random start, and the category-frequency KL divergence against
//! a reference set.
//!
//! Conventions baked in here:
//!
//! * two objects collide when their volume IoU exceeds a small threshold
//!   (`tau_col`), so numerically-touching boxes don't count;
//! * an object is "out" when its footprint escapes the floor polygon by
//!   more than `tau_out` meters — for convex floors the escape distance
//!   is exact (distance to a convex region is convex, so the maximum over
//!   the footprint sits at a corner), concave floors fall back to dense
//!   footprint sampling;
//! * the object-level collision rate pools objects across the whole set
//!   by default; per-scene averaging is available behind a flag;
//! * scene-set averages sort the per-scene values before summing, so
//!   every metric is exactly invariant to scene and object order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{obb_iou_3d, point_in_polygon, OrientedBox3, Point2, Polygon2};
use crate::grid::RasterSpec;
use crate::reachability::{connected_areas, walkable_map, AgentSpec};
use crate::scene::{slots_to_boxes, FloorPlan, SceneLayout, Taxonomy};

/// Collision IoU threshold: overlaps at or below this are ignored.
pub const TAU_COL: f64 = 0.005;
/// Boundary tolerance (meters): footprints may poke this far out.
pub const TAU_OUT: f64 = 0.05;
/// Reachability interaction distance (meters).
pub const REACH_DELTA: f64 = 0.3;

/// Spacing of footprint samples for concave-floor containment checks.
const ESCAPE_SAMPLE_STEP: f64 = 0.01;
/// Cap on samples per footprint axis.
const ESCAPE_SAMPLE_MAX: usize = 400;

/// Thresholds and discretization shared by every metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub tau_col: f64,
    pub tau_out: f64,
    /// Interaction distance for the reachability test.
    pub delta: f64,
    /// Walkable-raster resolution (meters per cell).
    pub resolution: f64,
    pub agent: AgentSpec,
    /// Seed for the per-scene random start draw.
    pub reach_seed: u64,
    /// Average per-scene collision rates instead of pooling objects.
    pub col_per_scene_average: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            tau_col: TAU_COL,
            tau_out: TAU_OUT,
            delta: REACH_DELTA,
            resolution: 0.05,
            agent: AgentSpec::default_desk(),
            reach_seed: 17,
            col_per_scene_average: false,
        }
    }
}

/// Per-scene raw counts behind the aggregate rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneBreakdown {
    pub object_count: usize,
    /// Objects overlapping some other object past `tau_col`.
    pub colliding_objects: usize,
    /// Objects escaping the floor past `tau_out`.
    pub out_objects: usize,
    /// Largest walkable region area over total walkable area (0 when
    /// nothing is walkable).
    pub walkable_ratio: f64,
    /// Fraction of objects reachable from the random start (0 when
    /// nothing is walkable, 1 when the scene has no objects).
    pub reach_fraction: f64,
    /// Set when the scene has no walkable cell at all.
    pub no_walkable: bool,
}

impl SceneBreakdown {
    pub fn has_collision(&self) -> bool {
        self.colliding_objects > 0
    }
}

/// The six aggregate measurements plus the per-scene raw counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub col_obj: f64,
    pub col_scene: f64,
    pub r_out: f64,
    pub r_walkable: f64,
    pub r_reach: f64,
    /// Present only when a reference set was supplied.
    pub ckl: Option<f64>,
    pub scene_count: usize,
    pub per_scene: Vec<SceneBreakdown>,
}

impl MetricsReport {
    /// Aligned plain-text rendering, one metric per row.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let row = |name: &str, value: String| format!("{name:<12}{value}\n");
        out.push_str(&row("Col_obj", format!("{:.4}", self.col_obj)));
        out.push_str(&row("Col_scene", format!("{:.4}", self.col_scene)));
        out.push_str(&row("R_out", format!("{:.4}", self.r_out)));
        out.push_str(&row("R_walkable", format!("{:.4}", self.r_walkable)));
        out.push_str(&row("R_reach", format!("{:.4}", self.r_reach)));
        match self.ckl {
            Some(v) => out.push_str(&row("CKL", format!("{v:.4}"))),
            None => out.push_str(&row("CKL", "-".into())),
        }
        out.push_str(&row("scenes", format!("{}", self.scene_count)));
        out
    }
}

fn scene_boxes(scene: &SceneLayout, taxonomy: &Taxonomy) -> Vec<OrientedBox3> {
    let (indexed, _) = slots_to_boxes(scene, taxonomy);
    indexed.into_iter().map(|(_, b)| b).collect()
}

/// Mean that is exactly permutation-invariant: sorts before summing.
fn sorted_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// How many boxes overlap some other box past the threshold.
fn colliding_count(boxes: &[OrientedBox3], tau_col: f64) -> usize {
    let mut hit = vec![false; boxes.len()];
    for i in 0..boxes.len() {
        for j in (i + 1)..boxes.len() {
            if obb_iou_3d(&boxes[i], &boxes[j]) > tau_col {
                hit[i] = true;
                hit[j] = true;
            }
        }
    }
    hit.iter().filter(|&&h| h).count()
}

/// Greatest distance any footprint point sits outside the floor polygon
/// (0 when fully contained).
pub(crate) fn footprint_escape(b: &OrientedBox3, floor: &Polygon2) -> f64 {
    let center = b.center2();
    let circumradius = (b.half_extents[0].powi(2) + b.half_extents[2].powi(2)).sqrt();
    // A center this deep inside keeps the whole footprint inside.
    if point_in_polygon(center, floor) && floor.boundary_distance(center) >= circumradius {
        return 0.0;
    }
    let escape_at = |p: Point2| -> f64 {
        if point_in_polygon(p, floor) {
            0.0
        } else {
            floor.boundary_distance(p)
        }
    };
    let corners = b.footprint_corners();
    if floor.is_convex() {
        // Distance to a convex region is a convex function, so its
        // maximum over the rectangle is at a corner.
        return corners.iter().map(|&c| escape_at(c)).fold(0.0, f64::max);
    }
    let steps = |half: f64| -> usize {
        ((2.0 * half / ESCAPE_SAMPLE_STEP).ceil() as usize).clamp(1, ESCAPE_SAMPLE_MAX)
    };
    let (nu, nv) = (steps(b.half_extents[0]), steps(b.half_extents[2]));
    let eu = corners[1].sub(corners[0]);
    let ev = corners[3].sub(corners[0]);
    let mut escape = 0.0f64;
    for iu in 0..=nu {
        let s = iu as f64 / nu as f64;
        for iv in 0..=nv {
            let t = iv as f64 / nv as f64;
            let p = corners[0].add(eu.scale(s)).add(ev.scale(t));
            escape = escape.max(escape_at(p));
        }
    }
    escape
}

fn out_count(boxes: &[OrientedBox3], floor: &Polygon2, tau_out: f64) -> usize {
    boxes
        .iter()
        .filter(|b| footprint_escape(b, floor) > tau_out)
        .count()
}

/// Walkable-raster facts one scene needs across several metrics.
struct WalkableFacts {
    walkable_ratio: f64,
    no_walkable: bool,
    reach_fraction: f64,
}

fn walkable_facts(
    boxes: &[OrientedBox3],
    floor: &FloorPlan,
    cfg: &MetricsConfig,
) -> Result<WalkableFacts> {
    let (lo, hi) = floor.polygon.bbox();
    let spec = RasterSpec::covering(lo, hi, cfg.resolution, 0.0)?;
    let walkable = walkable_map(floor, boxes, &cfg.agent, &spec);
    let regions = connected_areas(&walkable);
    if regions.is_empty() {
        return Ok(WalkableFacts {
            walkable_ratio: 0.0,
            no_walkable: true,
            reach_fraction: 0.0,
        });
    }
    let total: usize = regions.iter().map(|r| r.area).sum();
    let walkable_ratio = regions[0].area as f64 / total as f64;
    // Start cell: a seeded draw from the largest region. The reachable
    // set below is that cell's whole connected region.
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.reach_seed);
    let _start = regions[0].cells[rng.random_range(0..regions[0].cells.len())];
    let mut in_largest = vec![false; spec.cell_count()];
    for &(i, j) in &regions[0].cells {
        in_largest[j * spec.width + i] = true;
    }
    let reach_fraction = if boxes.is_empty() {
        1.0
    } else {
        let reach_band = cfg.agent.width / 2.0 + cfg.delta;
        let reachable = boxes
            .iter()
            .filter(|b| box_touches_region(b, &spec, &in_largest, reach_band))
            .count();
        ratio(reachable, boxes.len())
    };
    Ok(WalkableFacts {
        walkable_ratio,
        no_walkable: false,
        reach_fraction,
    })
}

/// Does some cell of the marked region sit within `band` of the box
/// footprint? Only cells near the box's bounding square are examined.
fn box_touches_region(
    b: &OrientedBox3,
    spec: &RasterSpec,
    region_mask: &[bool],
    band: f64,
) -> bool {
    let center = b.center2();
    let reach = (b.half_extents[0].powi(2) + b.half_extents[2].powi(2)).sqrt() + band;
    let lo_i = ((center.x - reach - spec.origin.x) / spec.resolution).floor().max(0.0) as usize;
    let lo_j = ((center.z - reach - spec.origin.z) / spec.resolution).floor().max(0.0) as usize;
    let hi_i = (((center.x + reach - spec.origin.x) / spec.resolution).ceil() as isize)
        .clamp(0, spec.width as isize) as usize;
    let hi_j = (((center.z + reach - spec.origin.z) / spec.resolution).ceil() as isize)
        .clamp(0, spec.height as isize) as usize;
    for j in lo_j..hi_j {
        for i in lo_i..hi_i {
            if region_mask[j * spec.width + i]
                && b.footprint_distance(spec.cell_center(i, j)) <= band
            {
                return true;
            }
        }
    }
    false
}

fn check_paired(scenes: &[SceneLayout], floors: &[FloorPlan]) -> Result<()> {
    if scenes.len() != floors.len() {
        return Err(Error::Metrics(format!(
            "{} scenes but {} floors",
            scenes.len(),
            floors.len()
        )));
    }
    Ok(())
}

/// Object- and scene-level collision rates over a scene set.
pub fn col_metrics(scenes: &[SceneLayout], taxonomy: &Taxonomy, cfg: &MetricsConfig) -> (f64, f64) {
    let counts: Vec<(usize, usize)> = scenes
        .par_iter()
        .map(|s| {
            let boxes = scene_boxes(s, taxonomy);
            (colliding_count(&boxes, cfg.tau_col), boxes.len())
        })
        .collect();
    let col_scene = ratio(counts.iter().filter(|(c, _)| *c > 0).count(), scenes.len());
    let col_obj = if cfg.col_per_scene_average {
        let rates: Vec<f64> = counts.iter().map(|&(c, n)| ratio(c, n)).collect();
        sorted_mean(&rates)
    } else {
        let colliding: usize = counts.iter().map(|(c, _)| c).sum();
        let total: usize = counts.iter().map(|(_, n)| n).sum();
        ratio(colliding, total)
    };
    (col_obj, col_scene)
}

/// Fraction of objects escaping their floor past the tolerance, pooled
/// over all scenes.
pub fn r_out(
    scenes: &[SceneLayout],
    floors: &[FloorPlan],
    taxonomy: &Taxonomy,
    cfg: &MetricsConfig,
) -> Result<f64> {
    check_paired(scenes, floors)?;
    let counts: Vec<(usize, usize)> = scenes
        .par_iter()
        .zip(floors.par_iter())
        .map(|(s, f)| {
            let boxes = scene_boxes(s, taxonomy);
            (out_count(&boxes, &f.polygon, cfg.tau_out), boxes.len())
        })
        .collect();
    let out: usize = counts.iter().map(|(c, _)| c).sum();
    let total: usize = counts.iter().map(|(_, n)| n).sum();
    Ok(ratio(out, total))
}

/// Mean over scenes of largest-region share of the walkable area.
pub fn r_walkable(
    scenes: &[SceneLayout],
    floors: &[FloorPlan],
    taxonomy: &Taxonomy,
    cfg: &MetricsConfig,
) -> Result<f64> {
    check_paired(scenes, floors)?;
    let ratios: Vec<f64> = scenes
        .par_iter()
        .zip(floors.par_iter())
        .map(|(s, f)| Ok(walkable_facts(&scene_boxes(s, taxonomy), f, cfg)?.walkable_ratio))
        .collect::<Result<_>>()?;
    Ok(sorted_mean(&ratios))
}

/// Mean over scenes of the fraction of objects reachable from a random
/// walkable start.
pub fn r_reach(
    scenes: &[SceneLayout],
    floors: &[FloorPlan],
    taxonomy: &Taxonomy,
    cfg: &MetricsConfig,
) -> Result<f64> {
    check_paired(scenes, floors)?;
    let fractions: Vec<f64> = scenes
        .par_iter()
        .zip(floors.par_iter())
        .map(|(s, f)| Ok(walkable_facts(&scene_boxes(s, taxonomy), f, cfg)?.reach_fraction))
        .collect::<Result<_>>()?;
    Ok(sorted_mean(&fractions))
}

/// Category frequencies of the occupied slots, over named categories.
fn category_distribution(scenes: &[SceneLayout], taxonomy: &Taxonomy) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; taxonomy.named_count()];
    for scene in scenes {
        for slot in &scene.slots {
            if !slot.is_empty(taxonomy) {
                counts[slot.category()] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Metrics(
            "category distribution needs at least one occupied slot".into(),
        ));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// KL divergence of generated category frequencies from reference ones,
/// with add-epsilon smoothing on both sides.
pub fn ckl(
    generated: &[SceneLayout],
    reference: &[SceneLayout],
    taxonomy: &Taxonomy,
) -> Result<f64> {
    let p = category_distribution(generated, taxonomy)?;
    let q = category_distribution(reference, taxonomy)?;
    let eps = 1e-6;
    let norm = 1.0 + taxonomy.named_count() as f64 * eps;
    let kl: f64 = p
        .iter()
        .zip(&q)
        .map(|(&pi, &qi)| {
            let ps = (pi + eps) / norm;
            let qs = (qi + eps) / norm;
            ps * (ps / qs).ln()
        })
        .sum();
    // Non-negative by Gibbs' inequality; clamp away rounding dust.
    Ok(kl.max(0.0))
}

/// Evaluate every metric over a scene set in one pass.
pub fn evaluate_scene_set(
    scenes: &[SceneLayout],
    floors: &[FloorPlan],
    taxonomy: &Taxonomy,
    reference: Option<&[SceneLayout]>,
    cfg: &MetricsConfig,
) -> Result<MetricsReport> {
    check_paired(scenes, floors)?;
    if scenes.is_empty() {
        return Err(Error::Metrics("metrics need at least one scene".into()));
    }
    let per_scene: Vec<SceneBreakdown> = scenes
        .par_iter()
        .zip(floors.par_iter())
        .map(|(s, f)| {
            let boxes = scene_boxes(s, taxonomy);
            let facts = walkable_facts(&boxes, f, cfg)?;
            Ok(SceneBreakdown {
                object_count: boxes.len(),
                colliding_objects: colliding_count(&boxes, cfg.tau_col),
                out_objects: out_count(&boxes, &f.polygon, cfg.tau_out),
                walkable_ratio: facts.walkable_ratio,
                reach_fraction: facts.reach_fraction,
                no_walkable: facts.no_walkable,
            })
        })
        .collect::<Result<_>>()?;
    let col_scene = ratio(
        per_scene.iter().filter(|b| b.has_collision()).count(),
        per_scene.len(),
    );
    let col_obj = if cfg.col_per_scene_average {
        let rates: Vec<f64> = per_scene
            .iter()
            .map(|b| ratio(b.colliding_objects, b.object_count))
            .collect();
        sorted_mean(&rates)
    } else {
        ratio(
            per_scene.iter().map(|b| b.colliding_objects).sum(),
            per_scene.iter().map(|b| b.object_count).sum(),
        )
    };
    let r_out_rate = ratio(
        per_scene.iter().map(|b| b.out_objects).sum(),
        per_scene.iter().map(|b| b.object_count).sum(),
    );
    let walk: Vec<f64> = per_scene.iter().map(|b| b.walkable_ratio).collect();
    let reach: Vec<f64> = per_scene.iter().map(|b| b.reach_fraction).collect();
    let ckl_value = match reference {
        Some(r) => Some(ckl(scenes, r, taxonomy)?),
        None => None,
    };
    Ok(MetricsReport {
        col_obj,
        col_scene,
        r_out: r_out_rate,
        r_walkable: sorted_mean(&walk),
        r_reach: sorted_mean(&reach),
        ckl: ckl_value,
        scene_count: scenes.len(),
        per_scene,
    })
}
