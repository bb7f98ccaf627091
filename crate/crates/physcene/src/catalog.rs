//! Asset catalog and retrieval: match each placed object to a concrete
//! asset by nearest shape feature, and expand articulated assets (doors,
//! drawers) to the bounding box of their fully-open extent for guidance
//! and interaction checks.
//!
//! Retrieval searches the object's own category first and minimizes
//! Euclidean feature distance, breaking ties by the closer log-volume
//! ratio and then lexicographic id, so results are total-order
//! deterministic. An empty category bucket falls back to the whole
//! catalog and marks the result as a cross-category match.
//!
//! Expansion keeps the box's yaw: the open extent is distributed over the
//! local axes by the opening direction's components, which bounds the
//! true swept volume (exactly for openings along a box axis).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::{category_anchor, GeneratorConfig};
use crate::error::{Error, Result};
use crate::geometry::OrientedBox3;
use crate::scene::{ObjectSlot, SceneLayout, Taxonomy, FEATURE_DIM};

/// A movable part's opening direction and travel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Articulation {
    /// Unit opening direction in the asset's local frame.
    pub axis: [f64; 3],
    /// How far the part sweeps when fully open (meters).
    pub open_extent: f64,
}

/// One catalog asset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetEntry {
    pub id: String,
    /// Category name, matching the taxonomy.
    pub category: String,
    /// Canonical full extents `[x, y, z]` in meters.
    pub size: [f64; 3],
    /// Shape feature used for retrieval.
    pub feature: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub articulation: Option<Articulation>,
}

impl AssetEntry {
    fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }
}

/// An immutable, validated set of assets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<AssetEntry>", into = "Vec<AssetEntry>")]
pub struct AssetCatalog {
    entries: Vec<AssetEntry>,
}

impl AssetCatalog {
    pub fn new(entries: Vec<AssetEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Catalog("catalog has no entries".into()));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.id.is_empty() {
                return Err(Error::Catalog(format!("entry {i} has an empty id")));
            }
            if entries[..i].iter().any(|o| o.id == e.id) {
                return Err(Error::Catalog(format!("duplicate asset id {:?}", e.id)));
            }
            if e.feature.len() != FEATURE_DIM {
                return Err(Error::Catalog(format!(
                    "asset {:?} has {} feature channels, expected {FEATURE_DIM}",
                    e.id,
                    e.feature.len()
                )));
            }
            if e.feature.iter().any(|v| !v.is_finite()) {
                return Err(Error::Catalog(format!("asset {:?} has non-finite features", e.id)));
            }
            if e.size.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::Catalog(format!(
                    "asset {:?} has non-positive size {:?}",
                    e.id, e.size
                )));
            }
            if let Some(a) = &e.articulation {
                if !(a.open_extent >= 0.0 && a.open_extent.is_finite()) {
                    return Err(Error::Catalog(format!(
                        "asset {:?} has invalid open extent {}",
                        e.id, a.open_extent
                    )));
                }
                let norm = (a.axis[0].powi(2) + a.axis[1].powi(2) + a.axis[2].powi(2)).sqrt();
                if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::Catalog(format!(
                        "asset {:?} opening axis {:?} is not unit length",
                        e.id, a.axis
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[AssetEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&AssetEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let entries: Vec<AssetEntry> = serde_json::from_str(&text)?;
        Self::new(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(&self.entries)?)?;
        Ok(())
    }

    /// The built-in synthetic catalog: around sixty assets across the
    /// bedroom categories, with articulated wardrobes, desks, and
    /// bookshelves. Deterministic.
    pub fn default_bedroom(taxonomy: &Taxonomy) -> Self {
        let priors = GeneratorConfig::default_bedroom(0).priors;
        let per_category = [8usize, 8, 8, 8, 8, 7, 7, 6];
        let mut rng = ChaCha12Rng::seed_from_u64(0xca7a_1060);
        let mut entries = Vec::new();
        for (cat, &count) in per_category.iter().enumerate().take(taxonomy.named_count()) {
            let name = taxonomy.name(cat).expect("category in range");
            let prior = &priors[cat];
            for k in 0..count {
                let mut size = [0.0; 3];
                for a in 0..3 {
                    let spread = prior.size_spread[a];
                    let jitter =
                        if spread > 0.0 { rng.random_range(-spread..=spread) } else { 0.0 };
                    size[a] = (prior.size_mean[a] + jitter).max(0.1);
                }
                let feature: Vec<f64> = category_anchor(cat)
                    .into_iter()
                    .map(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                // Doors, drawers, and shelves all open along local depth.
                let articulation = match name {
                    "wardrobe" => Some(Articulation {
                        axis: [0.0, 0.0, 1.0],
                        open_extent: rng.random_range(0.4..0.6),
                    }),
                    "desk" => Some(Articulation {
                        axis: [0.0, 0.0, 1.0],
                        open_extent: rng.random_range(0.3..0.5),
                    }),
                    "bookshelf" => Some(Articulation {
                        axis: [0.0, 0.0, 1.0],
                        open_extent: rng.random_range(0.25..0.45),
                    }),
                    _ => None,
                };
                entries.push(AssetEntry {
                    id: format!("{name}-{k:02}"),
                    category: name.to_string(),
                    size,
                    feature,
                    articulation,
                });
            }
        }
        Self::new(entries).expect("built-in catalog is valid")
    }
}

impl TryFrom<Vec<AssetEntry>> for AssetCatalog {
    type Error = Error;
    fn try_from(entries: Vec<AssetEntry>) -> Result<Self> {
        Self::new(entries)
    }
}

impl From<AssetCatalog> for Vec<AssetEntry> {
    fn from(c: AssetCatalog) -> Self {
        c.entries
    }
}

/// A retrieval result: the chosen asset and whether the object's own
/// category bucket was empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub id: String,
    pub cross_category: bool,
}

fn feature_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn slot_volume(slot: &ObjectSlot) -> f64 {
    (slot.size[0] * slot.size[1] * slot.size[2]).max(1e-12)
}

/// Pick the best entry among candidates for this slot: nearest feature,
/// then closest log-volume ratio, then smallest id.
fn best_entry<'a>(
    slot: &ObjectSlot,
    candidates: impl Iterator<Item = &'a AssetEntry>,
) -> Option<&'a AssetEntry> {
    let v_slot = slot_volume(slot);
    candidates.min_by(|a, b| {
        let da = feature_distance(&slot.shape_feature, &a.feature);
        let db = feature_distance(&slot.shape_feature, &b.feature);
        da.total_cmp(&db)
            .then_with(|| {
                let ra = (v_slot / a.volume().max(1e-12)).ln().abs();
                let rb = (v_slot / b.volume().max(1e-12)).ln().abs();
                ra.total_cmp(&rb)
            })
            .then_with(|| a.id.cmp(&b.id))
    })
}

/// Find the catalog asset backing an occupied slot.
pub fn retrieve(
    slot: &ObjectSlot,
    catalog: &AssetCatalog,
    taxonomy: &Taxonomy,
) -> Result<Retrieval> {
    if slot.is_empty(taxonomy) {
        return Err(Error::Catalog("cannot retrieve an asset for an empty slot".into()));
    }
    let category = taxonomy
        .name(slot.category())
        .ok_or_else(|| Error::Catalog(format!("slot category {} unknown", slot.category())))?;
    let same_cat = best_entry(
        slot,
        catalog.entries.iter().filter(|e| e.category == category),
    );
    if let Some(e) = same_cat {
        return Ok(Retrieval { id: e.id.clone(), cross_category: false });
    }
    let any = best_entry(slot, catalog.entries.iter())
        .expect("catalog is never empty after validation");
    Ok(Retrieval { id: any.id.clone(), cross_category: true })
}

/// The slot's bounding box with the asset's part swept fully open: half
/// extents grow by the opening travel split along the local axes, and the
/// center shifts half the travel along the opening direction (rotated
/// into the world by the slot's yaw). Assets without articulation return
/// the closed box unchanged.
pub fn expanded_box(slot: &ObjectSlot, asset: &AssetEntry) -> Result<OrientedBox3> {
    let closed = slot_box(slot)?;
    let Some(art) = &asset.articulation else {
        return Ok(closed);
    };
    if art.open_extent == 0.0 {
        return Ok(closed);
    }
    let [ax, ay, az] = art.axis;
    let (c, s) = (closed.yaw.cos(), closed.yaw.sin());
    // Local x maps to world (cos, sin) and local z to (-sin, cos) on the
    // ground plane; y is vertical and unrotated.
    let world_dir = [ax * c - az * s, ay, ax * s + az * c];
    let half_travel = art.open_extent / 2.0;
    let center = [
        closed.center[0] + world_dir[0] * half_travel,
        closed.center[1] + world_dir[1] * half_travel,
        closed.center[2] + world_dir[2] * half_travel,
    ];
    let half_extents = [
        closed.half_extents[0] + ax.abs() * half_travel,
        closed.half_extents[1] + ay.abs() * half_travel,
        closed.half_extents[2] + az.abs() * half_travel,
    ];
    OrientedBox3::new(center, half_extents, closed.yaw)
}

fn slot_box(slot: &ObjectSlot) -> Result<OrientedBox3> {
    OrientedBox3::new(
        slot.location,
        [slot.size[0] / 2.0, slot.size[1] / 2.0, slot.size[2] / 2.0],
        slot.yaw(),
    )
}

/// One object's retrieval and its closed/expanded box pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ArticulatedBox {
    pub slot: usize,
    pub asset_id: String,
    pub cross_category: bool,
    pub closed: OrientedBox3,
    pub expanded: OrientedBox3,
}

/// Retrieve and expand every occupied slot of a scene.
pub fn articulated_scene_boxes(
    scene: &SceneLayout,
    catalog: &AssetCatalog,
    taxonomy: &Taxonomy,
) -> Result<Vec<ArticulatedBox>> {
    let mut out = Vec::new();
    for (i, slot) in scene.slots.iter().enumerate() {
        if slot.is_empty(taxonomy) {
            continue;
        }
        let r = retrieve(slot, catalog, taxonomy)?;
        let asset = catalog
            .get(&r.id)
            .expect("retrieval only returns catalog ids");
        out.push(ArticulatedBox {
            slot: i,
            asset_id: r.id,
            cross_category: r.cross_category,
            closed: slot_box(slot)?,
            expanded: expanded_box(slot, asset)?,
        });
    }
    Ok(out)
}
