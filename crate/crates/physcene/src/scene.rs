//! Scene state: object slots, the category taxonomy, and the encoding that
//! turns a layout into the flat `[-1, 1]` vector the diffusion model works
//! on.
//!
//! A scene is a fixed-length array of N object slots. Each slot carries a
//! category one-hot (C = named categories + 1 trailing "empty" class), full
//! 3D size in meters, an orientation as `(cos yaw, sin yaw)`, a 3D location
//! in meters, and a 32-channel synthetic shape feature. The encoded channel
//! order per slot is `[category | size | orientation | location | feature]`,
//! giving D = C + 3 + 2 + 3 + 32 channels per slot. Size and location
//! channels are min-max normalized with per-channel statistics fitted on the
//! training split ([`NormStats`]); categories map {0,1} to {-1,+1};
//! orientation and feature channels pass through (they are already unit
//! scale). Empty slots encode the "empty" one-hot with all geometry
//! channels at exactly 0 so padding cannot leak into guidance.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_yaw, OrientedBox3, Polygon2};

/// Channels in the synthetic shape-feature block.
pub const FEATURE_DIM: usize = 32;

/// Geometry channels per slot besides the category block: 3 size + 2
/// orientation + 3 location.
pub const GEOMETRY_DIM: usize = 8;

/// Default slot count per scene.
pub const DEFAULT_SLOTS: usize = 12;

/// Treat a channel-span smaller than this as degenerate when fitting stats.
const DEGENERATE_SPAN: f64 = 1e-6;

/// The ordered list of named object categories; the encoded category block
/// has one extra trailing channel for "empty".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Taxonomy {
    categories: Vec<String>,
}

impl Taxonomy {
    pub fn new(categories: Vec<String>) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::Scene("taxonomy needs at least one category".into()));
        }
        for (i, c) in categories.iter().enumerate() {
            if c.is_empty() {
                return Err(Error::Scene(format!("category {i} has an empty name")));
            }
            if categories[..i].contains(c) {
                return Err(Error::Scene(format!("duplicate category name {c:?}")));
            }
        }
        Ok(Self { categories })
    }

    /// The eight desk-scale bedroom categories.
    pub fn default_bedroom() -> Self {
        Self::new(
            ["bed", "wardrobe", "nightstand", "desk", "chair", "table", "sofa", "bookshelf"]
                .map(String::from)
                .to_vec(),
        )
        .expect("default taxonomy is valid")
    }

    /// Number of named categories (excludes "empty").
    pub fn named_count(&self) -> usize {
        self.categories.len()
    }

    /// Width of the encoded category block (named + "empty").
    pub fn channel_count(&self) -> usize {
        self.categories.len() + 1
    }

    /// Index of the reserved "empty" class.
    pub fn empty_index(&self) -> usize {
        self.categories.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }

    /// Name of a named-category index (not the empty index).
    pub fn name(&self, index: usize) -> Option<&str> {
        self.categories.get(index).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.categories
    }

    /// Channels per encoded slot for this taxonomy.
    pub fn slot_dim(&self) -> usize {
        self.channel_count() + GEOMETRY_DIM + FEATURE_DIM
    }
}

impl TryFrom<Vec<String>> for Taxonomy {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Taxonomy> for Vec<String> {
    fn from(t: Taxonomy) -> Self {
        t.categories
    }
}

/// One object slot of a scene.
///
/// `category_logits` is one-hot at rest but may be any real vector when the
/// slot came out of the diffusion process; [`ObjectSlot::category`] resolves
/// it by argmax. `size` holds full extents in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSlot {
    pub category_logits: Vec<f64>,
    pub size: [f64; 3],
    /// `(cos yaw, sin yaw)`; renormalized at decode time.
    pub orientation: [f64; 2],
    pub location: [f64; 3],
    pub shape_feature: Vec<f64>,
}

impl ObjectSlot {
    /// The canonical padding slot: one-hot "empty", zero geometry.
    pub fn empty(taxonomy: &Taxonomy) -> Self {
        let mut logits = vec![0.0; taxonomy.channel_count()];
        logits[taxonomy.empty_index()] = 1.0;
        Self {
            category_logits: logits,
            size: [0.0; 3],
            orientation: [1.0, 0.0],
            location: [0.0; 3],
            shape_feature: vec![0.0; FEATURE_DIM],
        }
    }

    /// A one-hot slot for a named category.
    pub fn with_category(
        taxonomy: &Taxonomy,
        category: usize,
        size: [f64; 3],
        yaw: f64,
        location: [f64; 3],
        shape_feature: Vec<f64>,
    ) -> Result<Self> {
        if category >= taxonomy.named_count() {
            return Err(Error::Scene(format!(
                "category index {category} out of range for {} named categories",
                taxonomy.named_count()
            )));
        }
        let mut logits = vec![0.0; taxonomy.channel_count()];
        logits[category] = 1.0;
        if shape_feature.len() != FEATURE_DIM {
            return Err(Error::Scene(format!(
                "shape feature must have {FEATURE_DIM} channels, got {}",
                shape_feature.len()
            )));
        }
        Ok(Self {
            category_logits: logits,
            size,
            orientation: [yaw.cos(), yaw.sin()],
            location,
            shape_feature,
        })
    }

    /// Argmax category index; ties resolve to the lowest index.
    pub fn category(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.category_logits.iter().enumerate() {
            if v > self.category_logits[best] {
                best = i;
            }
        }
        best
    }

    pub fn is_empty(&self, taxonomy: &Taxonomy) -> bool {
        self.category() == taxonomy.empty_index()
    }

    /// Yaw angle from the (renormalized) orientation channels; a near-zero
    /// orientation vector falls back to 0.
    pub fn yaw(&self) -> f64 {
        let [c, s] = self.orientation;
        let n = c.hypot(s);
        if n < 1e-12 {
            0.0
        } else {
            normalize_yaw(s.atan2(c))
        }
    }

    /// The slot as an upright box; `None` when any size component is not
    /// strictly positive.
    pub fn to_box(&self) -> Option<OrientedBox3> {
        if self.size.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return None;
        }
        OrientedBox3::new(
            self.location,
            [self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0],
            self.yaw(),
        )
        .ok()
    }
}

/// The floor plan a scene is conditioned on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloorPlan {
    pub id: String,
    pub polygon: Polygon2,
}

/// A fixed-length array of object slots plus the id of its floor plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub slots: Vec<ObjectSlot>,
    pub floor_id: String,
}

impl SceneLayout {
    /// A scene of `n` empty slots.
    pub fn empty(taxonomy: &Taxonomy, n: usize, floor_id: impl Into<String>) -> Self {
        Self {
            slots: vec![ObjectSlot::empty(taxonomy); n],
            floor_id: floor_id.into(),
        }
    }

    /// Indices of slots whose argmax category is not "empty".
    pub fn occupied(&self, taxonomy: &Taxonomy) -> Vec<usize> {
        (0..self.slots.len())
            .filter(|&i| !self.slots[i].is_empty(taxonomy))
            .collect()
    }
}

/// Per-channel min/max of size and location over a training split. These
/// are the only channels that need scaling; category, orientation, and
/// feature channels are unit scale by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub size_min: [f64; 3],
    pub size_max: [f64; 3],
    pub loc_min: [f64; 3],
    pub loc_max: [f64; 3],
}

impl NormStats {
    /// Fit from the non-empty slots of a scene set. Channels with a
    /// degenerate span are widened by 0.5 on each side so the max > min
    /// invariant always holds.
    pub fn fit(scenes: &[SceneLayout], taxonomy: &Taxonomy) -> Result<Self> {
        let mut size_min = [f64::INFINITY; 3];
        let mut size_max = [f64::NEG_INFINITY; 3];
        let mut loc_min = [f64::INFINITY; 3];
        let mut loc_max = [f64::NEG_INFINITY; 3];
        let mut seen = false;
        for scene in scenes {
            for slot in &scene.slots {
                if slot.is_empty(taxonomy) {
                    continue;
                }
                seen = true;
                for k in 0..3 {
                    size_min[k] = size_min[k].min(slot.size[k]);
                    size_max[k] = size_max[k].max(slot.size[k]);
                    loc_min[k] = loc_min[k].min(slot.location[k]);
                    loc_max[k] = loc_max[k].max(slot.location[k]);
                }
            }
        }
        if !seen {
            return Err(Error::Scene(
                "cannot fit normalization stats: no non-empty slots".into(),
            ));
        }
        for k in 0..3 {
            if size_max[k] - size_min[k] < DEGENERATE_SPAN {
                size_min[k] -= 0.5;
                size_max[k] += 0.5;
            }
            if loc_max[k] - loc_min[k] < DEGENERATE_SPAN {
                loc_min[k] -= 0.5;
                loc_max[k] += 0.5;
            }
        }
        let stats = Self { size_min, size_max, loc_min, loc_max };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        for k in 0..3 {
            let all_finite = self.size_min[k].is_finite()
                && self.size_max[k].is_finite()
                && self.loc_min[k].is_finite()
                && self.loc_max[k].is_finite();
            if !all_finite {
                return Err(Error::Scene("normalization stats must be finite".into()));
            }
            if self.size_max[k] <= self.size_min[k] || self.loc_max[k] <= self.loc_min[k] {
                return Err(Error::Scene(format!(
                    "normalization stats need max > min on every channel (axis {k})"
                )));
            }
        }
        Ok(())
    }
}

/// Map a physical value into `[-1, 1]`; returns `(encoded, clamped?)`.
fn minmax_forward(v: f64, lo: f64, hi: f64) -> (f64, bool) {
    let e = 2.0 * (v - lo) / (hi - lo) - 1.0;
    if e.is_nan() {
        // NaN input: pin to the channel midpoint and flag it.
        return (0.0, true);
    }
    if e > 1.0 + 1e-12 || e < -1.0 - 1e-12 {
        (e.clamp(-1.0, 1.0), true)
    } else {
        (e.clamp(-1.0, 1.0), false)
    }
}

/// Inverse of [`minmax_forward`]; the encoded value is clamped to `[-1, 1]`
/// first so decode is total.
fn minmax_inverse(e: f64, lo: f64, hi: f64) -> f64 {
    let e = if e.is_nan() { 0.0 } else { e.clamp(-1.0, 1.0) };
    lo + (e + 1.0) / 2.0 * (hi - lo)
}

fn clamp_unit(v: f64) -> (f64, bool) {
    if v.is_nan() {
        return (0.0, true);
    }
    if v > 1.0 + 1e-12 || v < -1.0 - 1e-12 {
        (v.clamp(-1.0, 1.0), true)
    } else {
        (v.clamp(-1.0, 1.0), false)
    }
}

/// Encode a scene to the flat diffusion vector in `[-1, 1]^(N*D)`.
///
/// Categories are re-quantized to a hard one-hot (argmax) mapped to ±1, so
/// the result is identical for any logits with the same argmax. Returns the
/// vector and the number of channels that had to be clamped into range.
pub fn encode(
    scene: &SceneLayout,
    stats: &NormStats,
    taxonomy: &Taxonomy,
) -> Result<(Array1<f64>, usize)> {
    stats.validate()?;
    let c = taxonomy.channel_count();
    let d = taxonomy.slot_dim();
    let mut x = Array1::zeros(scene.slots.len() * d);
    let mut clamped = 0usize;
    for (s, slot) in scene.slots.iter().enumerate() {
        if slot.category_logits.len() != c {
            return Err(Error::Scene(format!(
                "slot {s} has {} category logits, taxonomy needs {c}",
                slot.category_logits.len()
            )));
        }
        if slot.shape_feature.len() != FEATURE_DIM {
            return Err(Error::Scene(format!(
                "slot {s} has {} feature channels, expected {FEATURE_DIM}",
                slot.shape_feature.len()
            )));
        }
        let base = s * d;
        let cat = slot.category();
        for k in 0..c {
            x[base + k] = if k == cat { 1.0 } else { -1.0 };
        }
        if cat == taxonomy.empty_index() {
            // Padding slots carry zero geometry; channels stay 0.
            continue;
        }
        let mut push = |offset: usize, value: f64, was_clamped: bool| {
            x[base + offset] = value;
            if was_clamped {
                clamped += 1;
            }
        };
        for k in 0..3 {
            let (e, cl) = minmax_forward(slot.size[k], stats.size_min[k], stats.size_max[k]);
            push(c + k, e, cl);
        }
        // Orientation: renormalize, then the components are in range by
        // construction.
        let yaw = slot.yaw();
        push(c + 3, yaw.cos(), false);
        push(c + 4, yaw.sin(), false);
        for k in 0..3 {
            let (e, cl) = minmax_forward(slot.location[k], stats.loc_min[k], stats.loc_max[k]);
            push(c + 5 + k, e, cl);
        }
        for k in 0..FEATURE_DIM {
            let (e, cl) = clamp_unit(slot.shape_feature[k]);
            push(c + GEOMETRY_DIM + k, e, cl);
        }
    }
    Ok((x, clamped))
}

/// Decode a flat vector back into a scene. Total: any finite or non-finite
/// real vector of a length divisible by D yields a structurally valid
/// layout. Slots whose category argmax is "empty" come back as canonical
/// empty slots.
pub fn decode(
    x: ArrayView1<f64>,
    stats: &NormStats,
    taxonomy: &Taxonomy,
    floor_id: &str,
) -> Result<SceneLayout> {
    stats.validate()?;
    let c = taxonomy.channel_count();
    let d = taxonomy.slot_dim();
    if x.len() % d != 0 {
        return Err(Error::Scene(format!(
            "encoded vector length {} is not a multiple of the slot dimension {d}",
            x.len()
        )));
    }
    let n = x.len() / d;
    let mut slots = Vec::with_capacity(n);
    for s in 0..n {
        let base = s * d;
        // Argmax over the finite category logits; ties go to the lowest
        // index, and an all-non-finite block falls back to "empty".
        let mut cat = taxonomy.empty_index();
        let mut best = f64::NEG_INFINITY;
        for k in 0..c {
            let v = x[base + k];
            if v.is_finite() && v > best {
                best = v;
                cat = k;
            }
        }
        if cat == taxonomy.empty_index() {
            slots.push(ObjectSlot::empty(taxonomy));
            continue;
        }
        let mut logits = vec![0.0; c];
        logits[cat] = 1.0;
        let mut size = [0.0; 3];
        let mut location = [0.0; 3];
        for k in 0..3 {
            size[k] = minmax_inverse(x[base + c + k], stats.size_min[k], stats.size_max[k]);
            location[k] =
                minmax_inverse(x[base + c + 5 + k], stats.loc_min[k], stats.loc_max[k]);
        }
        let (oc, os) = (x[base + c + 3], x[base + c + 4]);
        let norm = oc.hypot(os);
        let orientation = if norm.is_finite() && norm > 1e-12 {
            [oc / norm, os / norm]
        } else {
            [1.0, 0.0]
        };
        let shape_feature = (0..FEATURE_DIM)
            .map(|k| {
                let v = x[base + c + GEOMETRY_DIM + k];
                if v.is_nan() {
                    0.0
                } else {
                    v.clamp(-1.0, 1.0)
                }
            })
            .collect();
        slots.push(ObjectSlot { category_logits: logits, size, orientation, location, shape_feature });
    }
    Ok(SceneLayout { slots, floor_id: floor_id.to_string() })
}

/// Boxes of all non-empty slots as `(slot index, box)` pairs, plus the
/// number of slots skipped for non-positive decoded size.
pub fn slots_to_boxes(
    scene: &SceneLayout,
    taxonomy: &Taxonomy,
) -> (Vec<(usize, OrientedBox3)>, usize) {
    let mut boxes = Vec::new();
    let mut skipped = 0usize;
    for (i, slot) in scene.slots.iter().enumerate() {
        if slot.is_empty(taxonomy) {
            continue;
        }
        match slot.to_box() {
            Some(b) => boxes.push((i, b)),
            None => skipped += 1,
        }
    }
    (boxes, skipped)
}
