//! Persistence: the scene JSON schema (with unknown-field preservation
//! and field-path error messages), canonical byte-stable writing, dataset
//! directories with manifests, and the experiment configuration file.
//!
//! Canonical writing sorts object keys, indents with two spaces, and
//! renders every float with nine significant digits, so writing the same
//! data twice — or re-writing what was just parsed — produces identical
//! bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::datagen::{GeneratorConfig, SceneRecord};
use crate::denoiser::{ArchConfig, TrainingConfig};
use crate::diffusion::GuidanceConfig;
use crate::error::{Error, Result};
use crate::geometry::{Point2, Polygon2};
use crate::reachability::AgentSpec;
use crate::scene::{FloorPlan, ObjectSlot, SceneLayout, Taxonomy, FEATURE_DIM};

/// Version tag written into every scene file.
pub const SCENE_SCHEMA_VERSION: u64 = 1;

// ---------------------------------------------------------------------------
// Scene documents
// ---------------------------------------------------------------------------

/// One object of a scene file.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    /// Category name from the taxonomy.
    pub category: String,
    /// Full extents `[x, y, z]` in meters.
    pub size: [f64; 3],
    pub yaw: f64,
    pub location: [f64; 3],
    pub feature: Vec<f64>,
    pub asset_id: Option<String>,
    /// Fields this tool does not know, preserved verbatim.
    pub extra: Map<String, Value>,
}

/// A parsed scene file: floor boundary plus objects, with any unknown
/// fields kept for round-tripping.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneDocument {
    pub schema_version: u64,
    pub floor_vertices: Vec<[f64; 2]>,
    pub objects: Vec<SceneObject>,
    pub floor_extra: Map<String, Value>,
    pub extra: Map<String, Value>,
}

fn want_f64(v: &Value, path: &str) -> Result<f64> {
    let n = v
        .as_f64()
        .ok_or_else(|| Error::SceneJson(format!("{path}: expected a number")))?;
    if !n.is_finite() {
        return Err(Error::SceneJson(format!("{path}: number must be finite")));
    }
    Ok(n)
}

fn want_array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>> {
    v.as_array()
        .ok_or_else(|| Error::SceneJson(format!("{path}: expected an array")))
}

fn want_vec3(v: &Value, path: &str) -> Result<[f64; 3]> {
    let arr = want_array(v, path)?;
    if arr.len() != 3 {
        return Err(Error::SceneJson(format!(
            "{path}: expected 3 numbers, got {}",
            arr.len()
        )));
    }
    Ok([
        want_f64(&arr[0], &format!("{path}[0]"))?,
        want_f64(&arr[1], &format!("{path}[1]"))?,
        want_f64(&arr[2], &format!("{path}[2]"))?,
    ])
}

fn take_field(map: &mut Map<String, Value>, key: &str, path: &str) -> Result<Value> {
    map.remove(key)
        .ok_or_else(|| Error::SceneJson(format!("{path}{key}: missing required field")))
}

/// Parse scene JSON text, reporting the offending field path on errors.
pub fn parse_scene_json(text: &str) -> Result<SceneDocument> {
    let root: Value =
        serde_json::from_str(text).map_err(|e| Error::SceneJson(format!("not valid JSON: {e}")))?;
    let Value::Object(mut map) = root else {
        return Err(Error::SceneJson("top level: expected an object".into()));
    };
    let version_v = take_field(&mut map, "schema_version", "")?;
    let schema_version = version_v
        .as_u64()
        .ok_or_else(|| Error::SceneJson("schema_version: expected a non-negative integer".into()))?;
    if schema_version != SCENE_SCHEMA_VERSION {
        return Err(Error::SceneJson(format!(
            "schema_version: unsupported version {schema_version}, expected {SCENE_SCHEMA_VERSION}"
        )));
    }
    let floor_v = take_field(&mut map, "floor", "")?;
    let Value::Object(mut floor_map) = floor_v else {
        return Err(Error::SceneJson("floor: expected an object".into()));
    };
    let verts_v = take_field(&mut floor_map, "vertices", "floor.")?;
    let verts_arr = want_array(&verts_v, "floor.vertices")?;
    if verts_arr.len() < 3 {
        return Err(Error::SceneJson(format!(
            "floor.vertices: a polygon needs at least 3 vertices, got {}",
            verts_arr.len()
        )));
    }
    let mut floor_vertices = Vec::with_capacity(verts_arr.len());
    for (i, vv) in verts_arr.iter().enumerate() {
        let path = format!("floor.vertices[{i}]");
        let pair = want_array(vv, &path)?;
        if pair.len() != 2 {
            return Err(Error::SceneJson(format!(
                "{path}: expected [x, z], got {} numbers",
                pair.len()
            )));
        }
        floor_vertices.push([
            want_f64(&pair[0], &format!("{path}[0]"))?,
            want_f64(&pair[1], &format!("{path}[1]"))?,
        ]);
    }
    let objects_v = take_field(&mut map, "objects", "")?;
    let objects_arr = want_array(&objects_v, "objects")?;
    let mut objects = Vec::with_capacity(objects_arr.len());
    for (i, ov) in objects_arr.iter().enumerate() {
        let path = format!("objects[{i}]");
        let Value::Object(omap) = ov else {
            return Err(Error::SceneJson(format!("{path}: expected an object")));
        };
        let mut omap = omap.clone();
        let category = take_field(&mut omap, "category", &format!("{path}."))?
            .as_str()
            .ok_or_else(|| Error::SceneJson(format!("{path}.category: expected a string")))?
            .to_string();
        let size_v = take_field(&mut omap, "size", &format!("{path}."))?;
        let size = want_vec3(&size_v, &format!("{path}.size"))?;
        if size.iter().any(|&s| s <= 0.0) {
            return Err(Error::SceneJson(format!("{path}.size: extents must be positive")));
        }
        let yaw_v = take_field(&mut omap, "yaw", &format!("{path}."))?;
        let yaw = want_f64(&yaw_v, &format!("{path}.yaw"))?;
        let loc_v = take_field(&mut omap, "location", &format!("{path}."))?;
        let location = want_vec3(&loc_v, &format!("{path}.location"))?;
        let feature_v = take_field(&mut omap, "feature", &format!("{path}."))?;
        let feature_arr = want_array(&feature_v, &format!("{path}.feature"))?;
        if feature_arr.len() != FEATURE_DIM {
            return Err(Error::SceneJson(format!(
                "{path}.feature: expected {FEATURE_DIM} numbers, got {}",
                feature_arr.len()
            )));
        }
        let mut feature = Vec::with_capacity(FEATURE_DIM);
        for (k, fv) in feature_arr.iter().enumerate() {
            feature.push(want_f64(fv, &format!("{path}.feature[{k}]"))?);
        }
        let asset_id = match omap.remove("asset_id") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s),
            Some(_) => {
                return Err(Error::SceneJson(format!("{path}.asset_id: expected a string")));
            }
        };
        objects.push(SceneObject {
            category,
            size,
            yaw,
            location,
            feature,
            asset_id,
            extra: omap,
        });
    }
    Ok(SceneDocument {
        schema_version,
        floor_vertices,
        objects,
        floor_extra: floor_map,
        extra: map,
    })
}

impl SceneDocument {
    /// Build a document from an in-memory layout (no asset ids, no extras).
    pub fn from_scene(
        scene: &SceneLayout,
        floor: &FloorPlan,
        taxonomy: &Taxonomy,
    ) -> Result<Self> {
        let mut objects = Vec::new();
        for slot in &scene.slots {
            if slot.is_empty(taxonomy) {
                continue;
            }
            let category = taxonomy
                .name(slot.category())
                .ok_or_else(|| {
                    Error::SceneJson(format!("slot category {} has no name", slot.category()))
                })?
                .to_string();
            objects.push(SceneObject {
                category,
                size: slot.size,
                yaw: slot.yaw(),
                location: slot.location,
                feature: slot.shape_feature.clone(),
                asset_id: None,
                extra: Map::new(),
            });
        }
        let floor_vertices = floor
            .polygon
            .vertices()
            .iter()
            .map(|p| [p.x, p.z])
            .collect();
        Ok(Self {
            schema_version: SCENE_SCHEMA_VERSION,
            floor_vertices,
            objects,
            floor_extra: Map::new(),
            extra: Map::new(),
        })
    }

    /// Rebuild the layout and floor. Objects fill the first slots, the
    /// rest (up to `n_slots`) stay empty.
    pub fn to_scene(
        &self,
        taxonomy: &Taxonomy,
        floor_id: &str,
        n_slots: usize,
    ) -> Result<(SceneLayout, FloorPlan)> {
        if self.objects.len() > n_slots {
            return Err(Error::SceneJson(format!(
                "objects: {} objects exceed the {n_slots} available slots",
                self.objects.len()
            )));
        }
        let vertices: Vec<Point2> = self
            .floor_vertices
            .iter()
            .map(|&[x, z]| Point2::new(x, z))
            .collect();
        let polygon = Polygon2::new(vertices)
            .map_err(|e| Error::SceneJson(format!("floor.vertices: {e}")))?;
        let floor = FloorPlan { id: floor_id.to_string(), polygon };
        let mut scene = SceneLayout::empty(taxonomy, n_slots, floor_id);
        for (i, obj) in self.objects.iter().enumerate() {
            let category = taxonomy.index_of(&obj.category).ok_or_else(|| {
                Error::SceneJson(format!(
                    "objects[{i}].category: unknown category {:?}",
                    obj.category
                ))
            })?;
            scene.slots[i] = ObjectSlot::with_category(
                taxonomy,
                category,
                obj.size,
                obj.yaw,
                obj.location,
                obj.feature.clone(),
            )
            .map_err(|e| Error::SceneJson(format!("objects[{i}]: {e}")))?;
        }
        Ok((scene, floor))
    }

    /// The document as a JSON value, extras merged back in.
    pub fn to_value(&self) -> Value {
        let mut root = self.extra.clone();
        root.insert("schema_version".into(), Value::from(self.schema_version));
        let mut floor = self.floor_extra.clone();
        floor.insert(
            "vertices".into(),
            Value::Array(
                self.floor_vertices
                    .iter()
                    .map(|&[x, z]| Value::Array(vec![Value::from(x), Value::from(z)]))
                    .collect(),
            ),
        );
        root.insert("floor".into(), Value::Object(floor));
        let objects: Vec<Value> = self
            .objects
            .iter()
            .map(|o| {
                let mut m = o.extra.clone();
                m.insert("category".into(), Value::from(o.category.clone()));
                m.insert(
                    "size".into(),
                    Value::Array(o.size.iter().map(|&v| Value::from(v)).collect()),
                );
                m.insert("yaw".into(), Value::from(o.yaw));
                m.insert(
                    "location".into(),
                    Value::Array(o.location.iter().map(|&v| Value::from(v)).collect()),
                );
                m.insert(
                    "feature".into(),
                    Value::Array(o.feature.iter().map(|&v| Value::from(v)).collect()),
                );
                if let Some(id) = &o.asset_id {
                    m.insert("asset_id".into(), Value::from(id.clone()));
                }
                Value::Object(m)
            })
            .collect();
        root.insert("objects".into(), Value::Array(objects));
        Value::Object(root)
    }

    /// Canonical text form (sorted keys, fixed floats, trailing newline).
    pub fn to_canonical_json(&self) -> String {
        let mut s = canonical_json(&self.to_value());
        s.push('\n');
        s
    }
}

/// Read and parse one scene file.
pub fn read_scene_file(path: &Path) -> Result<SceneDocument> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::SceneJson(format!("{}: {e}", path.display())))?;
    parse_scene_json(&text)
}

/// Write one scene file canonically.
pub fn write_scene_file(path: &Path, doc: &SceneDocument) -> Result<()> {
    fs::write(path, doc.to_canonical_json())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Canonical JSON writing
// ---------------------------------------------------------------------------

/// Format a float with nine significant digits, shortest fixed form.
pub fn format_float(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    // The exponent from scientific notation is exact, unlike log10.
    let sci = format!("{v:e}");
    let exp: i32 = sci[sci.find('e').expect("scientific form has an exponent") + 1..]
        .parse()
        .expect("exponent is an integer");
    if exp >= 9 {
        return format!("{v:.8e}");
    }
    let decimals = (8 - exp).max(0) as usize;
    let fixed = format!("{v:.decimals$}");
    if fixed.contains('.') {
        let trimmed = fixed.trim_end_matches('0').trim_end_matches('.');
        trimmed.to_string()
    } else {
        fixed
    }
}

/// Serialize a JSON value deterministically: two-space indentation, keys
/// sorted, floats through [`format_float`].
pub fn canonical_json(value: &Value) -> String {
    let mut out = String::new();
    write_value(&mut out, value, 0);
    out
}

fn write_value(out: &mut String, value: &Value, indent: usize) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                out.push_str(&format_float(n.as_f64().expect("number is i64, u64, or f64")));
            }
        }
        Value::String(s) => {
            out.push_str(&serde_json::to_string(s).expect("strings always serialize"));
        }
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push('\n');
                push_indent(out, indent + 1);
                write_value(out, item, indent + 1);
            }
            out.push('\n');
            push_indent(out, indent);
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push('\n');
                push_indent(out, indent + 1);
                out.push_str(&serde_json::to_string(key).expect("strings always serialize"));
                out.push_str(": ");
                write_value(out, &map[*key], indent + 1);
            }
            out.push('\n');
            push_indent(out, indent);
            out.push('}');
        }
    }
}

fn push_indent(out: &mut String, indent: usize) {
    for _ in 0..indent {
        out.push_str("  ");
    }
}

// ---------------------------------------------------------------------------
// Dataset directories
// ---------------------------------------------------------------------------

/// One dataset file's bookkeeping in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub floor_id: String,
    /// Which split the record belongs to ("train" / "val" / "test").
    pub split: String,
    pub truncated: bool,
    pub injected_collision: bool,
    pub injected_out_of_bounds: bool,
    pub injected_blocking: bool,
}

/// Index of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u64,
    /// Slots per scene (objects plus empty padding).
    pub n_slots: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn count(&self) -> usize {
        self.entries.len()
    }
}

/// Write records into `dir` as one scene file each plus `manifest.json`.
/// `parts` pairs a split name with its records; files are numbered in the
/// order given.
pub fn write_dataset(
    dir: &Path,
    parts: &[(&str, &[SceneRecord])],
    n_slots: usize,
    taxonomy: &Taxonomy,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut index = 0usize;
    for (split, records) in parts {
        for record in *records {
            let file = format!("scene-{index:05}.json");
            let doc = SceneDocument::from_scene(&record.scene, &record.floor, taxonomy)?;
            write_scene_file(&dir.join(&file), &doc)?;
            entries.push(ManifestEntry {
                file,
                floor_id: record.floor.id.clone(),
                split: split.to_string(),
                truncated: record.truncated,
                injected_collision: record.injected_collision,
                injected_out_of_bounds: record.injected_out_of_bounds,
                injected_blocking: record.injected_blocking,
            });
            index += 1;
        }
    }
    let manifest = DatasetManifest {
        schema_version: SCENE_SCHEMA_VERSION,
        n_slots,
        entries,
    };
    let value = serde_json::to_value(&manifest)?;
    fs::write(dir.join("manifest.json"), canonical_json(&value) + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::SceneJson(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Load every record of one split (or all records for split `None`).
pub fn load_dataset(
    dir: &Path,
    taxonomy: &Taxonomy,
    split: Option<&str>,
) -> Result<Vec<SceneRecord>> {
    let manifest = read_manifest(dir)?;
    let mut records = Vec::new();
    for entry in &manifest.entries {
        if let Some(wanted) = split {
            if entry.split != wanted {
                continue;
            }
        }
        let doc = read_scene_file(&dir.join(&entry.file))?;
        let (scene, floor) = doc.to_scene(taxonomy, &entry.floor_id, manifest.n_slots)?;
        records.push(SceneRecord {
            scene,
            floor,
            truncated: entry.truncated,
            injected_collision: entry.injected_collision,
            injected_out_of_bounds: entry.injected_out_of_bounds,
            injected_blocking: entry.injected_blocking,
        });
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

/// Linear noise schedule parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub t_count: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { t_count: 200, beta_start: 1e-4, beta_end: 0.02 }
    }
}

/// Everything an end-to-end run needs in one file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Where the dataset lives (written by dataset generation, read by
    /// training).
    pub dataset_dir: String,
    /// Where training writes the model weights.
    pub checkpoint_path: String,
    /// Where loss curves, reports, and other run outputs land.
    pub output_dir: String,
    /// Scenes to generate for the dataset.
    pub scene_count: usize,
    /// Train/val/test fractions.
    pub split: (f64, f64, f64),
    pub generator: GeneratorConfig,
    pub arch: ArchConfig,
    pub training: TrainingConfig,
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceConfig,
    pub agent: AgentSpec,
    /// Raster resolution for reachability and metrics (meters).
    pub resolution: f64,
    /// Scenes sampled / evaluated by default.
    pub eval_scenes: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let schedule = ScheduleConfig::default();
        Self {
            seed: 0,
            dataset_dir: "dataset".into(),
            checkpoint_path: "checkpoint.bin".into(),
            output_dir: "out".into(),
            scene_count: 2000,
            split: (0.8, 0.1, 0.1),
            generator: GeneratorConfig::default_bedroom(0),
            arch: ArchConfig::default(),
            training: TrainingConfig::default(),
            schedule,
            guidance: GuidanceConfig::default_for(schedule.t_count),
            agent: AgentSpec::default_desk(),
            resolution: 0.05,
            eval_scenes: 256,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<()> {
        if self.scene_count == 0 {
            return Err(Error::Config("scene_count must be positive".into()));
        }
        for (field, value) in [
            ("dataset_dir", &self.dataset_dir),
            ("checkpoint_path", &self.checkpoint_path),
            ("output_dir", &self.output_dir),
        ] {
            if value.is_empty() {
                return Err(Error::Config(format!("{field} must not be empty")));
            }
        }
        if self.eval_scenes == 0 {
            return Err(Error::Config("eval_scenes must be positive".into()));
        }
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(Error::Config(format!("bad resolution {}", self.resolution)));
        }
        let (a, b, c) = self.split;
        if !(a >= 0.0 && b >= 0.0 && c >= 0.0) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ({a}, {b}, {c}) must sum to 1")));
        }
        if self.schedule.t_count == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        self.generator.validate(taxonomy)?;
        self.arch.validate()?;
        self.training.validate()?;
        self.guidance.validate(self.schedule.t_count)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Write the config. Serde's shortest-round-trip float formatting is
    /// used (not the nine-digit canonical form) so `load(save(x)) == x`
    /// holds bitwise; the output is still deterministic.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n")?;
        Ok(())
    }
}

/// Write per-step losses as a two-column CSV.
pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{}\n", i, format_float(*l)));
    }
    fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_dataset;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn float_formatting_is_nine_digit_and_idempotent() {
        assert_eq!(format_float(0.0), "0");
        assert_eq!(format_float(-0.0), "0");
        assert_eq!(format_float(0.1), "0.1");
        assert_eq!(format_float(1.0), "1");
        assert_eq!(format_float(-2.5), "-2.5");
        assert_eq!(format_float(123.456), "123.456");
        assert_eq!(format_float(1.23456789012), "1.23456789");
        assert_eq!(format_float(0.00000025), "0.00000025");
        assert_eq!(format_float(-3.14159265358979), "-3.14159265");
        // format -> parse -> format is a fixed point.
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let v: f64 = rng.random_range(-1e4..1e4) * 10f64.powi(rng.random_range(-9..3));
            let once = format_float(v);
            let back: f64 = once.parse().unwrap();
            assert_eq!(format_float(back), once, "formatting {v} is not idempotent");
        }
    }

    #[test]
    fn scene_documents_round_trip_byte_stable() {
        let tax = Taxonomy::default_bedroom();
        let records = generate_dataset(&GeneratorConfig::default_bedroom(3), 3).unwrap();
        for r in &records {
            let doc = SceneDocument::from_scene(&r.scene, &r.floor, &tax).unwrap();
            let text = doc.to_canonical_json();
            let parsed = parse_scene_json(&text).unwrap();
            assert_eq!(parsed.to_canonical_json(), text, "rewrite must be byte-identical");
            // And the parsed document decodes back to an equivalent scene.
            let n = r.scene.slots.len();
            let (scene2, floor2) = parsed.to_scene(&tax, &r.floor.id, n).unwrap();
            assert_eq!(floor2.polygon.vertices().len(), r.floor.polygon.vertices().len());
            assert_eq!(scene2.occupied(&tax).len(), r.scene.occupied(&tax).len());
        }
    }

    #[test]
    fn geometry_survives_the_nine_digit_round_trip() {
        let tax = Taxonomy::default_bedroom();
        let records = generate_dataset(&GeneratorConfig::default_bedroom(11), 2).unwrap();
        let r = &records[0];
        let doc = SceneDocument::from_scene(&r.scene, &r.floor, &tax).unwrap();
        let parsed = parse_scene_json(&doc.to_canonical_json()).unwrap();
        let (scene2, _) = parsed.to_scene(&tax, &r.floor.id, r.scene.slots.len()).unwrap();
        // Objects come back in occupied-slot order; compare as sorted sets
        // of locations.
        let mut got: Vec<[f64; 3]> = scene2
            .slots
            .iter()
            .filter(|s| !s.is_empty(&tax))
            .map(|s| s.location)
            .collect();
        let mut want: Vec<[f64; 3]> = r
            .scene
            .slots
            .iter()
            .filter(|s| !s.is_empty(&tax))
            .map(|s| s.location)
            .collect();
        let key = |p: &[f64; 3]| (p[0], p[1], p[2]);
        got.sort_by(|a, b| key(a).partial_cmp(&key(b)).unwrap());
        want.sort_by(|a, b| key(a).partial_cmp(&key(b)).unwrap());
        for (g, w) in got.iter().zip(&want) {
            for a in 0..3 {
                assert!(
                    (g[a] - w[a]).abs() <= 1e-7 * (1.0 + w[a].abs()),
                    "coordinate drifted past nine-digit precision"
                );
            }
        }
    }

    #[test]
    fn unknown_fields_are_preserved() {
        let text = r#"{
            "schema_version": 1,
            "note": "hand-made fixture",
            "floor": {"vertices": [[0, 0], [4, 0], [4, 4], [0, 4]], "material": "oak"},
            "objects": [
                {
                    "category": "bed",
                    "size": [1.6, 0.5, 2.0],
                    "yaw": 0.0,
                    "location": [1.0, 0.25, 1.0],
                    "feature": [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
                                0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
                                0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
                                0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                    "color": "blue"
                }
            ]
        }"#;
        let doc = parse_scene_json(text).unwrap();
        assert_eq!(doc.extra.get("note").and_then(Value::as_str), Some("hand-made fixture"));
        assert_eq!(doc.floor_extra.get("material").and_then(Value::as_str), Some("oak"));
        assert_eq!(doc.objects[0].extra.get("color").and_then(Value::as_str), Some("blue"));
        let rewritten = doc.to_canonical_json();
        for needle in ["\"note\"", "\"material\"", "\"color\""] {
            assert!(rewritten.contains(needle), "{needle} lost on rewrite");
        }
        // Still byte-stable through another cycle.
        assert_eq!(parse_scene_json(&rewritten).unwrap().to_canonical_json(), rewritten);
    }

    #[test]
    fn schema_errors_name_the_field_path() {
        let missing_feature = r#"{
            "schema_version": 1,
            "floor": {"vertices": [[0, 0], [4, 0], [4, 4], [0, 4]]},
            "objects": [{"category": "bed", "size": [1, 1, 1], "yaw": 0,
                         "location": [0, 0.5, 0]}]
        }"#;
        let err = parse_scene_json(missing_feature).unwrap_err().to_string();
        assert!(err.contains("objects[0].feature"), "got: {err}");

        let bad_vertex = r#"{
            "schema_version": 1,
            "floor": {"vertices": [[0, 0], [4, 0], "oops"]},
            "objects": []
        }"#;
        let err = parse_scene_json(bad_vertex).unwrap_err().to_string();
        assert!(err.contains("floor.vertices[2]"), "got: {err}");

        let bad_version = r#"{"schema_version": 9, "floor": {"vertices": []}, "objects": []}"#;
        let err = parse_scene_json(bad_version).unwrap_err().to_string();
        assert!(err.contains("schema_version"), "got: {err}");

        let unknown_category = r#"{
            "schema_version": 1,
            "floor": {"vertices": [[0, 0], [4, 0], [4, 4], [0, 4]]},
            "objects": [{"category": "spaceship", "size": [1, 1, 1], "yaw": 0,
                         "location": [0, 0.5, 0],
                         "feature": [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0,
                                     0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]}]
        }"#;
        let doc = parse_scene_json(unknown_category).unwrap();
        let tax = Taxonomy::default_bedroom();
        let err = doc.to_scene(&tax, "f", 12).unwrap_err().to_string();
        assert!(err.contains("objects[0].category"), "got: {err}");
    }

    #[test]
    fn dataset_directory_round_trip() {
        let tax = Taxonomy::default_bedroom();
        let cfg = GeneratorConfig::default_bedroom(21);
        let records = generate_dataset(&cfg, 6).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().to_path_buf();
        let parts: Vec<(&str, &[SceneRecord])> = vec![
            ("train", &records[..4]),
            ("val", &records[4..5]),
            ("test", &records[5..]),
        ];
        let manifest = write_dataset(&dir, &parts, cfg.n_slots, &tax).unwrap();
        assert_eq!(manifest.count(), 6);
        let back = read_manifest(&dir).unwrap();
        assert_eq!(back, manifest);
        let train = load_dataset(&dir, &tax, Some("train")).unwrap();
        assert_eq!(train.len(), 4);
        for (loaded, original) in train.iter().zip(&records[..4]) {
            assert_eq!(loaded.floor.id, original.floor.id);
            assert_eq!(
                loaded.scene.occupied(&tax).len(),
                original.scene.occupied(&tax).len()
            );
        }
        let all = load_dataset(&dir, &tax, None).unwrap();
        assert_eq!(all.len(), 6);
    }

    #[test]
    fn experiment_config_validates_and_round_trips() {
        let tax = Taxonomy::default_bedroom();
        let cfg = ExperimentConfig::default();
        cfg.validate(&tax).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("config.json");
        cfg.save(&path).unwrap();
        let back = ExperimentConfig::load(&path).unwrap();
        assert_eq!(back, cfg);
        // Saving twice is byte-identical.
        let text1 = std::fs::read_to_string(&path).unwrap();
        back.save(&path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), text1);
        // Bad configs are rejected.
        let broken = ExperimentConfig { scene_count: 0, ..ExperimentConfig::default() };
        assert!(broken.validate(&tax).is_err());
        let lopsided = ExperimentConfig { split: (0.9, 0.3, 0.1), ..ExperimentConfig::default() };
        assert!(lopsided.validate(&tax).is_err());
    }
}
