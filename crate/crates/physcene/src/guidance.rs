//! The three physics objectives steering the sampler — object-collision,
//! room-layout, and reachability penalties — their weighted combination,
//! and the location/angle-restricted gradient used to shift transition
//! means.
//!
//! Each objective is a non-positive sum of 3D box overlaps:
//!
//! * collision: minus the volume IoU of every ordered pair of distinct
//!   object boxes (each unordered pair counted twice);
//! * layout: minus the IoU of every object box against the thick wall
//!   barriers flush with the floor polygon's edges;
//! * reachability: minus the IoU of every object box against the agent
//!   boxes sampled along the walkable-region-joining path (zero when one
//!   region already covers the free space).
//!
//! Gradients come from central finite differences in decoded physical
//! units — box translations and yaw rotations — mapped back onto the
//! encoded channels through the normalization scaling. Size, category, and
//! feature channels never receive gradient. The reachability path is
//! planned once at the unperturbed scene and frozen across the stencil,
//! since re-planning per probe would make the objective discontinuous.
//! Out-of-range encoded values use the same linear channel scaling (the
//! decode-time clamp is ignored by the chain rule), which keeps the pull
//! on runaway coordinates alive instead of zeroing it.

use std::time::Instant;

use ndarray::{Array1, ArrayView1};

use crate::catalog::{articulated_scene_boxes, AssetCatalog};
use crate::diffusion::GuidanceConfig;
use crate::error::Result;
use crate::geometry::{normalize_yaw, obb_iou_3d, wall_barriers, OrientedBox3};
use crate::reachability::{
    agent_boxes, astar, connected_areas, cost_map, default_box_count, walkable_map, AgentSpec,
    ReachOptions,
};
use crate::scene::{decode, slots_to_boxes, FloorPlan, NormStats, SceneLayout, Taxonomy};

/// Finite stand-in for the "infinitely thick" wall barrier (meters).
pub const WALL_THICKNESS: f64 = 5.0;
/// Wall barrier height (meters) — taller than any object.
pub const WALL_HEIGHT: f64 = 4.0;

/// Collision penalty over explicit boxes: minus twice the sum of pairwise
/// IoUs (every ordered pair of distinct boxes counted).
pub fn phi_coll_boxes(boxes: &[OrientedBox3]) -> f64 {
    let mut s = 0.0;
    for i in 0..boxes.len() {
        for j in (i + 1)..boxes.len() {
            s += obb_iou_3d(&boxes[i], &boxes[j]);
        }
    }
    -2.0 * s
}

/// Collision penalty of a decoded scene's occupied slots.
pub fn phi_coll(scene: &SceneLayout, taxonomy: &Taxonomy) -> f64 {
    let (indexed, _) = slots_to_boxes(scene, taxonomy);
    let boxes: Vec<OrientedBox3> = indexed.into_iter().map(|(_, b)| b).collect();
    phi_coll_boxes(&boxes)
}

/// Layout penalty over explicit boxes and wall barriers.
pub fn phi_layout_boxes(boxes: &[OrientedBox3], walls: &[OrientedBox3]) -> f64 {
    let mut s = 0.0;
    for b in boxes {
        for w in walls {
            s += obb_iou_3d(b, w);
        }
    }
    -s
}

/// Layout penalty of a decoded scene against its floor's walls.
pub fn phi_layout(scene: &SceneLayout, taxonomy: &Taxonomy, floor: &FloorPlan) -> Result<f64> {
    let walls = wall_barriers(&floor.polygon, WALL_THICKNESS, WALL_HEIGHT)?;
    let (indexed, _) = slots_to_boxes(scene, taxonomy);
    let boxes: Vec<OrientedBox3> = indexed.into_iter().map(|(_, b)| b).collect();
    Ok(phi_layout_boxes(&boxes, &walls))
}

/// Reachability penalty over explicit object and agent boxes.
pub fn phi_reach_boxes(boxes: &[OrientedBox3], agents: &[OrientedBox3]) -> f64 {
    let mut s = 0.0;
    for b in boxes {
        for a in agents {
            s += obb_iou_3d(b, a);
        }
    }
    -s
}

/// The frozen agent-box set for a scene: boxes along the cost-optimal path
/// joining the two largest walkable regions' centers. Empty when fewer
/// than two regions exist, or when no passable path joins them.
pub fn reach_agent_boxes(
    boxes: &[OrientedBox3],
    floor: &FloorPlan,
    agent: &AgentSpec,
    opts: &ReachOptions,
) -> Result<Vec<OrientedBox3>> {
    let (lo, hi) = floor.polygon.bbox();
    let spec = crate::grid::RasterSpec::covering(lo, hi, opts.resolution, 0.0)?;
    let walkable = walkable_map(floor, boxes, agent, &spec);
    let regions = connected_areas(&walkable);
    if regions.len() < 2 {
        return Ok(Vec::new());
    }
    let cost = cost_map(floor, boxes, &spec);
    match astar(&cost, regions[0].center, regions[1].center) {
        Ok(path) => agent_boxes(&path, &spec, agent, default_box_count(path.cells.len())),
        // An unjoinable pair contributes no agent boxes, hence no penalty.
        Err(_) => Ok(Vec::new()),
    }
}

/// Reachability penalty of a decoded scene.
pub fn phi_reach(
    scene: &SceneLayout,
    taxonomy: &Taxonomy,
    floor: &FloorPlan,
    agent: &AgentSpec,
    opts: &ReachOptions,
) -> Result<f64> {
    let (indexed, _) = slots_to_boxes(scene, taxonomy);
    let boxes: Vec<OrientedBox3> = indexed.into_iter().map(|(_, b)| b).collect();
    let agents = reach_agent_boxes(&boxes, floor, agent, opts)?;
    Ok(phi_reach_boxes(&boxes, &agents))
}

/// The three objectives, their weighted total, and per-slot attribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceReport {
    pub phi_coll: f64,
    pub phi_layout: f64,
    pub phi_reach: f64,
    /// `gamma_coll * phi_coll + gamma_layout * phi_layout + gamma_reach *
    /// phi_reach`, computed exactly in that association.
    pub phi_total: f64,
    /// Weighted penalty attributed to each slot (collision pairs split
    /// half-half); empty slots get 0. Sums to approximately `phi_total`.
    pub per_object: Vec<f64>,
    /// Evaluation wall time in seconds.
    pub wall_time: f64,
}

/// Evaluate all three objectives on a decoded scene.
pub fn evaluate_guidance(
    scene: &SceneLayout,
    taxonomy: &Taxonomy,
    floor: &FloorPlan,
    agent: &AgentSpec,
    cfg: &GuidanceConfig,
    opts: &ReachOptions,
) -> Result<GuidanceReport> {
    let start = Instant::now();
    let (indexed, _) = slots_to_boxes(scene, taxonomy);
    let walls = wall_barriers(&floor.polygon, WALL_THICKNESS, WALL_HEIGHT)?;
    let boxes: Vec<OrientedBox3> = indexed.iter().map(|(_, b)| b.clone()).collect();
    let agents = reach_agent_boxes(&boxes, floor, agent, opts)?;
    let phi_c = phi_coll_boxes(&boxes);
    let phi_l = phi_layout_boxes(&boxes, &walls);
    let phi_r = phi_reach_boxes(&boxes, &agents);
    let mut per_object = vec![0.0; scene.slots.len()];
    for (k, (slot, b)) in indexed.iter().enumerate() {
        let mut contrib = 0.0;
        // Each collision pair counted twice in phi_coll; attributing one
        // count to each participant makes the attributions sum to it.
        for (other_k, (_, ob)) in indexed.iter().enumerate() {
            if other_k != k {
                contrib += cfg.gamma_coll * -obb_iou_3d(b, ob);
            }
        }
        for w in &walls {
            contrib += cfg.gamma_layout * -obb_iou_3d(b, w);
        }
        for a in &agents {
            contrib += cfg.gamma_reach * -obb_iou_3d(b, a);
        }
        per_object[*slot] = contrib;
    }
    let phi_total = cfg.gamma_coll * phi_c + cfg.gamma_layout * phi_l + cfg.gamma_reach * phi_r;
    Ok(GuidanceReport {
        phi_coll: phi_c,
        phi_layout: phi_l,
        phi_reach: phi_r,
        phi_total,
        per_object,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Gradient of the weighted objective with respect to an encoded clean
/// scene, plus the count of coordinates zeroed for non-finite probes.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceGradient {
    pub grad: Array1<f64>,
    pub nonfinite_coords: usize,
}

/// Weighted objective restricted to the terms involving one probe box —
/// all other terms are constant under that box's perturbation, so finite
/// differences of this partial objective equal those of the full one,
/// without the cancellation noise.
fn partial_phi(
    probe: &OrientedBox3,
    slot: usize,
    others: &[(usize, OrientedBox3)],
    walls: &[OrientedBox3],
    agents: &[OrientedBox3],
    cfg: &GuidanceConfig,
) -> f64 {
    let mut phi = 0.0;
    if cfg.gamma_coll != 0.0 {
        let mut s = 0.0;
        for (j, b) in others {
            if *j != slot {
                s += obb_iou_3d(probe, b);
            }
        }
        phi += cfg.gamma_coll * (-2.0 * s);
    }
    if cfg.gamma_layout != 0.0 {
        let mut s = 0.0;
        for w in walls {
            s += obb_iou_3d(probe, w);
        }
        phi += cfg.gamma_layout * -s;
    }
    if cfg.gamma_reach != 0.0 {
        let mut s = 0.0;
        for a in agents {
            s += obb_iou_3d(probe, a);
        }
        phi += cfg.gamma_reach * -s;
    }
    phi
}

/// Central-difference gradient of the weighted objective at an encoded
/// clean-scene estimate.
///
/// Only occupied slots' location channels and orientation angle receive
/// gradient; size, category, and feature channels are exactly zero.
/// Translation probes step `cfg.fd_step_translation` meters, angle probes
/// `cfg.fd_step_angle` radians on the decoded yaw, and the results are
/// mapped back to encoded channels through the normalization spans (and
/// the `atan2` chain rule for the orientation pair). Non-finite probe
/// values zero the affected coordinate and are counted.
pub fn guidance_gradient(
    x0: ArrayView1<f64>,
    stats: &NormStats,
    taxonomy: &Taxonomy,
    floor: &FloorPlan,
    agent: &AgentSpec,
    cfg: &GuidanceConfig,
    opts: &ReachOptions,
) -> Result<GuidanceGradient> {
    let scene = decode(x0, stats, taxonomy, floor.id.as_str())?;
    let (indexed, _) = slots_to_boxes(&scene, taxonomy);
    if indexed.is_empty() || !cfg.any_weight() {
        return Ok(GuidanceGradient { grad: Array1::zeros(x0.len()), nonfinite_coords: 0 });
    }
    let walls = if cfg.gamma_layout != 0.0 {
        wall_barriers(&floor.polygon, WALL_THICKNESS, WALL_HEIGHT)?
    } else {
        Vec::new()
    };
    let agents = if cfg.gamma_reach != 0.0 {
        let boxes: Vec<OrientedBox3> = indexed.iter().map(|(_, b)| b.clone()).collect();
        reach_agent_boxes(&boxes, floor, agent, opts)?
    } else {
        Vec::new()
    };
    Ok(fd_boxes_gradient(
        x0,
        stats,
        taxonomy,
        &indexed,
        cfg.fd_step_translation,
        cfg.fd_step_angle,
        |slot, probe| partial_phi(probe, slot, &indexed, &walls, &agents, cfg),
    ))
}

/// Shared central-difference stencil over a set of slot boxes: each box's
/// center is probed per axis in meters and its yaw in radians, and the
/// measured slopes land on the encoded location channels (scaled by the
/// normalization spans) and the orientation pair (through the `atan2`
/// chain rule). The probe objective is supplied per call; step sizes,
/// channel mapping, and non-finite handling are common to every flavor.
fn fd_boxes_gradient(
    x0: ArrayView1<f64>,
    stats: &NormStats,
    taxonomy: &Taxonomy,
    bases: &[(usize, OrientedBox3)],
    ht: f64,
    ha: f64,
    mut phi: impl FnMut(usize, &OrientedBox3) -> f64,
) -> GuidanceGradient {
    let d = taxonomy.slot_dim();
    let c = taxonomy.channel_count();
    let mut grad = Array1::zeros(x0.len());
    let mut nonfinite = 0usize;
    for (slot, base_box) in bases {
        let slot = *slot;
        // Location: one probe pair per axis, in meters.
        for axis in 0..3 {
            let mut plus = base_box.clone();
            let mut minus = base_box.clone();
            plus.center[axis] += ht;
            minus.center[axis] -= ht;
            let dphi = (phi(slot, &plus) - phi(slot, &minus)) / (2.0 * ht);
            let (lo, hi) = match axis {
                0 => (stats.loc_min[0], stats.loc_max[0]),
                1 => (stats.loc_min[1], stats.loc_max[1]),
                _ => (stats.loc_min[2], stats.loc_max[2]),
            };
            let chan = slot * d + c + 5 + axis;
            if dphi.is_finite() {
                grad[chan] = dphi * (hi - lo) / 2.0;
            } else {
                nonfinite += 1;
            }
        }
        // Orientation: probe the decoded yaw, push back through atan2.
        let cos_chan = slot * d + c + 3;
        let sin_chan = slot * d + c + 4;
        let (cv, sv) = (x0[cos_chan], x0[sin_chan]);
        let r2 = cv * cv + sv * sv;
        if r2 < 1e-12 || !r2.is_finite() {
            continue; // yaw undefined at the origin of the (cos, sin) plane
        }
        let theta = base_box.yaw;
        let mut plus = base_box.clone();
        let mut minus = base_box.clone();
        plus.yaw = normalize_yaw(theta + ha);
        minus.yaw = normalize_yaw(theta - ha);
        let dtheta = (phi(slot, &plus) - phi(slot, &minus)) / (2.0 * ha);
        if dtheta.is_finite() {
            grad[cos_chan] = dtheta * (-sv / r2);
            grad[sin_chan] = dtheta * (cv / r2);
        } else {
            nonfinite += 2;
        }
    }
    GuidanceGradient { grad, nonfinite_coords: nonfinite }
}

/// Gradient that clears a supplied set of agent waypoint boxes using each
/// object's fully opened footprint.
///
/// Every occupied slot's box is swept open through its retrieved asset's
/// articulation before overlap is measured, so an object whose closed
/// footprint leaves a path free while its door or drawer arc seals it
/// still feels a push. The agent boxes come from the caller — typically
/// the waypoints `interaction_reach` plants along the blocked approach to
/// an unreachable target. Retrieval happens once at the base scene; each
/// probe carries the same opening sweep rigidly along with the probed
/// pose. Only `cfg.gamma_reach` weights the objective.
pub fn interaction_gradient(
    x0: ArrayView1<f64>,
    stats: &NormStats,
    taxonomy: &Taxonomy,
    floor_id: &str,
    catalog: &AssetCatalog,
    agents: &[OrientedBox3],
    cfg: &GuidanceConfig,
) -> Result<GuidanceGradient> {
    let scene = decode(x0, stats, taxonomy, floor_id)?;
    let arts = articulated_scene_boxes(&scene, catalog, taxonomy)?;
    if arts.is_empty() || agents.is_empty() || cfg.gamma_reach == 0.0 {
        return Ok(GuidanceGradient { grad: Array1::zeros(x0.len()), nonfinite_coords: 0 });
    }
    // Express each slot's opening sweep in its local frame — a center
    // offset plus a half-extent growth, recovered from the closed and
    // expanded boxes — so probes can reapply it at the probed pose.
    let mut bases = Vec::with_capacity(arts.len());
    let mut sweeps = Vec::with_capacity(arts.len());
    for art in &arts {
        let (cy, sy) = (art.closed.yaw.cos(), art.closed.yaw.sin());
        let off = [
            art.expanded.center[0] - art.closed.center[0],
            art.expanded.center[1] - art.closed.center[1],
            art.expanded.center[2] - art.closed.center[2],
        ];
        let local = [off[0] * cy + off[2] * sy, off[1], -off[0] * sy + off[2] * cy];
        let grow = [
            art.expanded.half_extents[0] - art.closed.half_extents[0],
            art.expanded.half_extents[1] - art.closed.half_extents[1],
            art.expanded.half_extents[2] - art.closed.half_extents[2],
        ];
        bases.push((art.slot, art.closed.clone()));
        sweeps.push((art.slot, local, grow));
    }
    let gamma = cfg.gamma_reach;
    Ok(fd_boxes_gradient(
        x0,
        stats,
        taxonomy,
        &bases,
        cfg.fd_step_translation,
        cfg.fd_step_angle,
        |slot, probe| {
            let Some(&(_, local, grow)) = sweeps.iter().find(|(s, _, _)| *s == slot) else {
                return f64::NAN;
            };
            let (cy, sy) = (probe.yaw.cos(), probe.yaw.sin());
            let center = [
                probe.center[0] + local[0] * cy - local[2] * sy,
                probe.center[1] + local[1],
                probe.center[2] + local[0] * sy + local[2] * cy,
            ];
            let half_extents = [
                probe.half_extents[0] + grow[0],
                probe.half_extents[1] + grow[1],
                probe.half_extents[2] + grow[2],
            ];
            match OrientedBox3::new(center, half_extents, probe.yaw) {
                Ok(open) => gamma * phi_reach_boxes(std::slice::from_ref(&open), agents),
                Err(_) => f64::NAN,
            }
        },
    ))
}
