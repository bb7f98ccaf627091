//! The command-line operations as plain library functions: dataset
//! generation, training, guided sampling, evaluation, the guidance on/off
//! ablation grid, and single-scene rendering. The binary only parses
//! flags and forwards here, so tests and examples can drive the whole
//! pipeline in-process.
//!
//! Every operation is deterministic for fixed seeds: parallel fan-out uses
//! one counter-based RNG stream per scene index, and outputs are written
//! in index order.

use std::path::{Path, PathBuf};

use ndarray::{Array1, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{generate_dataset, generate_floor, split, GeneratorConfig, SceneRecord};
use crate::denoiser::{
    load_checkpoint, save_checkpoint, train, CheckpointMeta, DenoiserParams, GuidanceGradFn,
    TrainItem,
};
use crate::diffusion::{make_schedule, sample_scene, GuidanceConfig, NoiseSchedule, SampleReport};
use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::guidance::guidance_gradient;
use crate::geometry::Polygon2;
use crate::io::{
    canonical_json, load_dataset, read_manifest, write_dataset, write_loss_csv, ExperimentConfig,
    SceneDocument,
};
use crate::metrics::{evaluate_scene_set, MetricsConfig, MetricsReport};
use crate::reachability::{AgentSpec, ReachOptions};
use crate::render::{render_scene_svg, RenderOptions};
use crate::scene::{encode, FloorPlan, NormStats, SceneLayout, Taxonomy};

/// Environment variable capping the internal thread pool.
pub const THREADS_ENV: &str = "PHYSCENE_THREADS";

/// Per-kind guidance weights used when a kind is switched on from the
/// command line, calibrated on short-run samplers so each term visibly
/// moves its own metric. Only the product with the lambda below matters;
/// the wall barriers are meters thick, which dilutes their overlap
/// ratios, hence the much larger layout weight.
pub const GAMMA_COLL: f64 = 64.0;
pub const GAMMA_LAYOUT: f64 = 3200.0;
pub const GAMMA_REACH: f64 = 64.0;
/// Step-size multiplier on the guidance shift.
pub const GUIDE_LAMBDA: f64 = 1.0;

/// Scenes per ablation row when run from the command line.
pub const ABLATE_SAMPLES: usize = 48;
/// Seed for the ablation run (floors and sampling noise).
pub const ABLATE_SEED: u64 = 11;
/// Floors cycled through by the ablation sampler.
pub const ABLATE_FLOORS: usize = 6;

/// Honor the thread-cap environment variable. Call once at startup;
/// errors (pool already built, unparsable value) are ignored because the
/// default pool is always a safe fallback.
pub fn configure_threads_from_env() {
    if let Ok(raw) = std::env::var(THREADS_ENV) {
        if let Ok(n) = raw.trim().parse::<usize>() {
            if n >= 1 {
                rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
            }
        }
    }
}

// ---------------------------------------------------------------------------
// generate-dataset
// ---------------------------------------------------------------------------

/// What `generate-dataset` produced.
#[derive(Debug, Clone, Serialize)]
pub struct GenerateSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub out_dir: PathBuf,
}

/// Generate the configured dataset and write it (with split labels) into
/// `out_dir`.
pub fn cmd_generate_dataset(config_path: &Path, out_dir: &Path) -> Result<GenerateSummary> {
    let cfg = ExperimentConfig::load(config_path)?;
    let taxonomy = Taxonomy::default_bedroom();
    cfg.validate(&taxonomy)?;
    let records = generate_dataset(&cfg.generator, cfg.scene_count)?;
    let (train_set, val_set, test_set) = split(records, cfg.split, cfg.seed)?;
    let parts: Vec<(&str, &[SceneRecord])> = vec![
        ("train", &train_set),
        ("val", &val_set),
        ("test", &test_set),
    ];
    write_dataset(out_dir, &parts, cfg.generator.n_slots, &taxonomy)?;
    Ok(GenerateSummary {
        train: train_set.len(),
        val: val_set.len(),
        test: test_set.len(),
        out_dir: out_dir.to_path_buf(),
    })
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// What `train` produced.
#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub steps_run: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
}

/// Train a noise predictor on the config's train split and write the
/// checkpoint plus the per-step loss curve.
pub fn cmd_train(config_path: &Path) -> Result<TrainSummary> {
    let cfg = ExperimentConfig::load(config_path)?;
    let taxonomy = Taxonomy::default_bedroom();
    cfg.validate(&taxonomy)?;
    let records = load_dataset(Path::new(&cfg.dataset_dir), &taxonomy, Some("train"))?;
    let clean: Vec<&SceneRecord> = records.iter().filter(|r| r.is_clean()).collect();
    if clean.is_empty() {
        return Err(Error::Training(format!(
            "no clean training scenes in {}",
            cfg.dataset_dir
        )));
    }
    let scenes: Vec<SceneLayout> = clean.iter().map(|r| r.scene.clone()).collect();
    let stats = NormStats::fit(&scenes, &taxonomy)?;
    let items: Vec<TrainItem> = clean
        .iter()
        .map(|r| {
            let (x0, _) = encode(&r.scene, &stats, &taxonomy)?;
            TrainItem::new(x0, r.floor.clone())
        })
        .collect::<Result<_>>()?;
    let sched = make_schedule(
        cfg.schedule.t_count,
        cfg.schedule.beta_start,
        cfg.schedule.beta_end,
    )?;
    let mut params = DenoiserParams::init(
        cfg.generator.n_slots,
        taxonomy.slot_dim(),
        cfg.schedule.t_count,
        &cfg.arch,
        cfg.training.seed,
    )?;
    let opts = ReachOptions { resolution: cfg.resolution, ..Default::default() };
    let agent = cfg.agent;
    let stats_for_grad = stats.clone();
    let tax_for_grad = taxonomy.clone();
    let gcfg = cfg.training.guidance.clone();
    let grad_fn = move |x0: ArrayView1<f64>, floor: &FloorPlan| -> Result<Array1<f64>> {
        guidance_gradient(x0, &stats_for_grad, &tax_for_grad, floor, &agent, &gcfg, &opts)
            .map(|g| g.grad)
    };
    let guidance: Option<GuidanceGradFn<'_>> =
        if cfg.training.guided_training { Some(&grad_fn) } else { None };
    let curve = train(&mut params, &items, &sched, &cfg.training, guidance)?;
    let meta = CheckpointMeta {
        n_slots: cfg.generator.n_slots,
        categories: taxonomy.names().to_vec(),
        category_channels: taxonomy.channel_count(),
        channels: taxonomy.slot_dim(),
        d_model: cfg.arch.d_model,
        n_blocks: cfg.arch.n_blocks,
        n_heads: cfg.arch.n_heads,
        ff_width: cfg.arch.ff_width,
        t_count: cfg.schedule.t_count,
        beta_start: cfg.schedule.beta_start,
        beta_end: cfg.schedule.beta_end,
        stats,
    };
    let checkpoint = PathBuf::from(&cfg.checkpoint_path);
    if let Some(parent) = checkpoint.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_checkpoint(&checkpoint, &meta, &params)?;
    let out_dir = PathBuf::from(&cfg.output_dir);
    std::fs::create_dir_all(&out_dir)?;
    let loss_csv = out_dir.join("loss.csv");
    write_loss_csv(&loss_csv, &curve)?;
    Ok(TrainSummary {
        steps_run: curve.len(),
        initial_loss: curve.first().copied().unwrap_or(f64::NAN),
        final_loss: curve.last().copied().unwrap_or(f64::NAN),
        checkpoint,
        loss_csv,
    })
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

/// Which physics potentials steer the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GuidanceSelection {
    pub collision: bool,
    pub layout: bool,
    pub reach: bool,
}

impl GuidanceSelection {
    pub fn all() -> Self {
        Self { collision: true, layout: true, reach: true }
    }

    pub fn none() -> Self {
        Self::default()
    }

    /// Parse a comma-separated kind list (e.g. `coll,layout,reach`). The
    /// empty string and `none` select nothing; `all` selects everything.
    pub fn parse(raw: &str) -> Result<Self> {
        let mut sel = Self::default();
        for token in raw.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match token {
                "coll" | "collision" => sel.collision = true,
                "layout" => sel.layout = true,
                "reach" | "reachability" => sel.reach = true,
                "none" => {}
                "all" => sel = Self::all(),
                other => {
                    return Err(Error::Config(format!(
                        "unknown guidance kind {other:?} (expected coll, layout, reach, all, or none)"
                    )));
                }
            }
        }
        Ok(sel)
    }

    pub fn any(&self) -> bool {
        self.collision || self.layout || self.reach
    }

    /// The sampler weights for this selection: command-line default gammas
    /// for the chosen kinds, zero elsewhere; `lambda = 0` when nothing is
    /// chosen.
    pub fn to_config(&self, t_count: usize) -> GuidanceConfig {
        let mut cfg = GuidanceConfig::default_for(t_count);
        cfg.gamma_coll = if self.collision { GAMMA_COLL } else { 0.0 };
        cfg.gamma_layout = if self.layout { GAMMA_LAYOUT } else { 0.0 };
        cfg.gamma_reach = if self.reach { GAMMA_REACH } else { 0.0 };
        cfg.lambda = if self.any() { GUIDE_LAMBDA } else { 0.0 };
        cfg
    }

    pub fn label(&self) -> String {
        let mut kinds = Vec::new();
        if self.collision {
            kinds.push("coll");
        }
        if self.layout {
            kinds.push("layout");
        }
        if self.reach {
            kinds.push("reach");
        }
        if kinds.is_empty() { "none".into() } else { kinds.join(",") }
    }
}

/// Floors available for sampling, in deterministic order. Prefers the
/// manifest (test split when present); falls back to sorted scene files.
pub fn load_floors(dir: &Path) -> Result<Vec<FloorPlan>> {
    let mut named: Vec<(String, PathBuf)> = Vec::new();
    if dir.join("manifest.json").is_file() {
        let manifest = read_manifest(dir)?;
        let test_count = manifest.entries.iter().filter(|e| e.split == "test").count();
        for entry in &manifest.entries {
            if test_count > 0 && entry.split != "test" {
                continue;
            }
            named.push((entry.floor_id.clone(), dir.join(&entry.file)));
        }
    } else {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
            .collect();
        files.sort();
        for path in files {
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            named.push((stem, path));
        }
    }
    let mut floors = Vec::with_capacity(named.len());
    for (id, path) in named {
        let doc = crate::io::read_scene_file(&path)?;
        let vertices: Vec<Point2> = doc
            .floor_vertices
            .iter()
            .map(|&[x, z]| Point2::new(x, z))
            .collect();
        let polygon = Polygon2::new(vertices)
            .map_err(|e| Error::SceneJson(format!("{}: floor.vertices: {e}", path.display())))?;
        floors.push(FloorPlan { id, polygon });
    }
    if floors.is_empty() {
        return Err(Error::Config(format!("no floors found in {}", dir.display())));
    }
    Ok(floors)
}

/// Draw `n` scenes from a trained model, cycling through `floors`. Scene
/// `i` uses RNG stream `i + 1` of `seed`, so results are independent of
/// thread count and stable under re-runs.
#[allow(clippy::too_many_arguments)]
pub fn sample_scenes(
    meta: &CheckpointMeta,
    params: &DenoiserParams,
    taxonomy: &Taxonomy,
    sched: &NoiseSchedule,
    floors: &[FloorPlan],
    n: usize,
    gcfg: &GuidanceConfig,
    seed: u64,
    agent: &AgentSpec,
    resolution: f64,
) -> Result<Vec<(SceneLayout, FloorPlan, SampleReport)>> {
    if floors.is_empty() {
        return Err(Error::Config("sampling needs at least one floor".into()));
    }
    if n == 0 {
        return Err(Error::Config("sample count must be positive".into()));
    }
    let opts = ReachOptions { resolution, ..Default::default() };
    (0..n)
        .into_par_iter()
        .map(|i| {
            let floor = &floors[i % floors.len()];
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let model = params.conditioned(floor)?;
            let mut grad = |x0: ArrayView1<f64>| -> Result<Array1<f64>> {
                guidance_gradient(x0, &meta.stats, taxonomy, floor, agent, gcfg, &opts)
                    .map(|g| g.grad)
            };
            let (scene, report) = sample_scene(
                &model,
                sched,
                gcfg,
                &mut grad,
                &meta.stats,
                taxonomy,
                meta.n_slots,
                &floor.id,
                &mut rng,
            )?;
            Ok((scene, floor.clone(), report))
        })
        .collect()
}

/// Arguments of the `sample` command.
#[derive(Debug, Clone)]
pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub floors_dir: PathBuf,
    pub n: usize,
    pub selection: GuidanceSelection,
    pub seed: u64,
    pub out_dir: PathBuf,
}

/// What `sample` produced.
#[derive(Debug, Clone, Serialize)]
pub struct SampleSummary {
    pub count: usize,
    pub guided_steps: usize,
    pub nonfinite_skips: usize,
    pub out_dir: PathBuf,
}

/// Sample scenes and write one JSON plus one SVG per scene (and a
/// manifest, so the directory evaluates directly).
pub fn cmd_sample(args: &SampleArgs) -> Result<SampleSummary> {
    let (meta, params) = load_checkpoint(&args.checkpoint)?;
    let taxonomy = Taxonomy::new(meta.categories.clone())?;
    let sched = make_schedule(meta.t_count, meta.beta_start, meta.beta_end)?;
    let floors = load_floors(&args.floors_dir)?;
    let gcfg = args.selection.to_config(meta.t_count);
    let agent = AgentSpec::default_desk();
    let drawn = sample_scenes(
        &meta,
        &params,
        &taxonomy,
        &sched,
        &floors,
        args.n,
        &gcfg,
        args.seed,
        &agent,
        0.05,
    )?;
    std::fs::create_dir_all(&args.out_dir)?;
    let records: Vec<SceneRecord> = drawn
        .iter()
        .map(|(scene, floor, _)| SceneRecord {
            scene: scene.clone(),
            floor: floor.clone(),
            truncated: false,
            injected_collision: false,
            injected_out_of_bounds: false,
            injected_blocking: false,
        })
        .collect();
    write_dataset(&args.out_dir, &[("sample", &records)], meta.n_slots, &taxonomy)?;
    let render_opts = RenderOptions::default();
    for (i, (scene, floor, _)) in drawn.iter().enumerate() {
        let svg = render_scene_svg(scene, floor, &taxonomy, &render_opts)?;
        std::fs::write(args.out_dir.join(format!("scene-{i:05}.svg")), svg)?;
    }
    Ok(SampleSummary {
        count: drawn.len(),
        guided_steps: drawn.iter().map(|(_, _, r)| r.guided_steps).sum(),
        nonfinite_skips: drawn.iter().map(|(_, _, r)| r.nonfinite_skips).sum(),
        out_dir: args.out_dir.clone(),
    })
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

/// Arguments of the `evaluate` command.
#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    pub scenes_dir: PathBuf,
    pub floors_dir: PathBuf,
    pub agent_width: Option<f64>,
    pub out_path: PathBuf,
}

fn scene_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if dir.join("manifest.json").is_file() {
        let manifest = read_manifest(dir)?;
        return Ok(manifest
            .entries
            .iter()
            .map(|e| (e.floor_id.clone(), dir.join(&e.file)))
            .collect());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|ext| ext == "json")
                && p.file_name().is_some_and(|n| n != "manifest.json")
        })
        .collect();
    files.sort();
    Ok(files
        .into_iter()
        .map(|p| {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            (stem, p)
        })
        .collect())
}

/// Evaluate the scenes in one directory against the floors/reference
/// directory. The reference side supplies the category distribution for
/// the divergence metric; without parseable reference scenes that metric
/// is omitted.
pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<(MetricsReport, String)> {
    let scene_docs: Vec<(String, SceneDocument)> = scene_files(&args.scenes_dir)?
        .into_iter()
        .map(|(id, path)| Ok((id, crate::io::read_scene_file(&path)?)))
        .collect::<Result<_>>()?;
    if scene_docs.is_empty() {
        return Err(Error::Config(format!(
            "no scene files in {}",
            args.scenes_dir.display()
        )));
    }
    let reference_docs: Vec<(String, SceneDocument)> = match scene_files(&args.floors_dir) {
        Ok(files) => files
            .into_iter()
            .filter_map(|(id, path)| crate::io::read_scene_file(&path).ok().map(|d| (id, d)))
            .collect(),
        Err(_) => Vec::new(),
    };
    // A taxonomy covering whatever categories the files use, so exports
    // from other tools evaluate too as long as they follow the schema.
    let mut names: Vec<String> = scene_docs
        .iter()
        .chain(reference_docs.iter())
        .flat_map(|(_, d)| d.objects.iter().map(|o| o.category.clone()))
        .collect();
    names.sort();
    names.dedup();
    if names.is_empty() {
        return Err(Error::Config("no objects in any scene file".into()));
    }
    let taxonomy = Taxonomy::new(names)?;
    let n_slots = scene_docs
        .iter()
        .chain(reference_docs.iter())
        .map(|(_, d)| d.objects.len())
        .max()
        .unwrap_or(1)
        .max(1);
    let mut scenes = Vec::with_capacity(scene_docs.len());
    let mut floors = Vec::with_capacity(scene_docs.len());
    for (id, doc) in &scene_docs {
        let (scene, floor) = doc.to_scene(&taxonomy, id, n_slots)?;
        scenes.push(scene);
        floors.push(floor);
    }
    let mut reference = Vec::with_capacity(reference_docs.len());
    for (id, doc) in &reference_docs {
        let (scene, _) = doc.to_scene(&taxonomy, id, n_slots)?;
        reference.push(scene);
    }
    let mut cfg = MetricsConfig::default();
    if let Some(width) = args.agent_width {
        cfg.agent = AgentSpec::new(width, cfg.agent.height, cfg.agent.interaction_distance)?;
    }
    let report = evaluate_scene_set(
        &scenes,
        &floors,
        &taxonomy,
        if reference.is_empty() { None } else { Some(&reference) },
        &cfg,
    )?;
    if let Some(parent) = args.out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let value = serde_json::to_value(&report)?;
    std::fs::write(&args.out_path, canonical_json(&value) + "\n")?;
    Ok((report.clone(), report.table()))
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

/// One row of the guidance on/off grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub selection: GuidanceSelection,
    pub report: MetricsReport,
}

/// The full five-row grid: no guidance, each potential alone, all three.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationGrid {
    pub samples_per_row: usize,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationGrid {
    /// A fixed-width text table, one line per row.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<14}{:>10}{:>10}{:>10}{:>12}{:>10}\n",
            "guidance", "Col_obj", "Col_scene", "R_out", "R_walkable", "R_reach"
        );
        for row in &self.rows {
            let r = &row.report;
            s.push_str(&format!(
                "{:<14}{:>10.4}{:>10.4}{:>10.4}{:>12.4}{:>10.4}\n",
                row.label, r.col_obj, r.col_scene, r.r_out, r.r_walkable, r.r_reach
            ));
        }
        s
    }
}

/// The five standard rows.
pub fn ablation_rows() -> Vec<(String, GuidanceSelection)> {
    vec![
        ("none".into(), GuidanceSelection::none()),
        (
            "collision".into(),
            GuidanceSelection { collision: true, ..Default::default() },
        ),
        (
            "layout".into(),
            GuidanceSelection { layout: true, ..Default::default() },
        ),
        (
            "reachability".into(),
            GuidanceSelection { reach: true, ..Default::default() },
        ),
        ("all".into(), GuidanceSelection::all()),
    ]
}

/// Run the grid with explicit sample count and seed (the command-line
/// entry uses [`ABLATE_SAMPLES`] and [`ABLATE_SEED`]). Every row draws
/// from the same seeds, so rows differ only in the guidance applied.
pub fn run_ablation(
    meta: &CheckpointMeta,
    params: &DenoiserParams,
    samples_per_row: usize,
    seed: u64,
) -> Result<AblationGrid> {
    let taxonomy = Taxonomy::new(meta.categories.clone())?;
    let sched = make_schedule(meta.t_count, meta.beta_start, meta.beta_end)?;
    let agent = AgentSpec::default_desk();
    // Fresh deterministic floors; the grid must not depend on having the
    // training dataset around.
    let floor_cfg = GeneratorConfig::default_bedroom(seed);
    let mut floor_rng = ChaCha12Rng::seed_from_u64(seed);
    let floors: Vec<FloorPlan> = (0..ABLATE_FLOORS)
        .map(|i| {
            let mut f = generate_floor(&floor_cfg, &mut floor_rng);
            f.id = format!("ablate-floor-{i:02}");
            f
        })
        .collect();
    let mut rows = Vec::new();
    for (label, selection) in ablation_rows() {
        let gcfg = selection.to_config(meta.t_count);
        let drawn = sample_scenes(
            meta,
            params,
            &taxonomy,
            &sched,
            &floors,
            samples_per_row,
            &gcfg,
            seed,
            &agent,
            0.05,
        )?;
        let scenes: Vec<SceneLayout> = drawn.iter().map(|(s, _, _)| s.clone()).collect();
        let scene_floors: Vec<FloorPlan> = drawn.iter().map(|(_, f, _)| f.clone()).collect();
        let report = evaluate_scene_set(
            &scenes,
            &scene_floors,
            &taxonomy,
            None,
            &MetricsConfig::default(),
        )?;
        rows.push(AblationRow { label, selection, report });
    }
    Ok(AblationGrid { samples_per_row, seed, rows })
}

/// Run the guidance ablation and write `ablation.json` plus a text table
/// into `out_dir`.
pub fn cmd_ablate(checkpoint: &Path, out_dir: &Path) -> Result<AblationGrid> {
    let (meta, params) = load_checkpoint(checkpoint)?;
    let grid = run_ablation(&meta, &params, ABLATE_SAMPLES, ABLATE_SEED)?;
    std::fs::create_dir_all(out_dir)?;
    let value = serde_json::to_value(&grid)?;
    std::fs::write(out_dir.join("ablation.json"), canonical_json(&value) + "\n")?;
    std::fs::write(out_dir.join("ablation.txt"), grid.table())?;
    Ok(grid)
}

// ---------------------------------------------------------------------------
// render
// ---------------------------------------------------------------------------

/// Render one scene file to an SVG. `show_walkable` underlays the
/// walkable map.
pub fn cmd_render(scene_path: &Path, out_path: &Path, show_walkable: bool) -> Result<()> {
    let doc = crate::io::read_scene_file(scene_path)?;
    let mut names: Vec<String> = doc.objects.iter().map(|o| o.category.clone()).collect();
    names.sort();
    names.dedup();
    let taxonomy = if names.is_empty() {
        Taxonomy::default_bedroom()
    } else {
        Taxonomy::new(names)?
    };
    let n_slots = doc.objects.len().max(1);
    let stem = scene_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".into());
    let (scene, floor) = doc.to_scene(&taxonomy, &stem, n_slots)?;
    let opts = RenderOptions { show_walkable, ..Default::default() };
    let svg = render_scene_svg(&scene, &floor, &taxonomy, &opts)?;
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out_path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(root: &Path) -> ExperimentConfig {
        let mut generator = GeneratorConfig::default_bedroom(5);
        generator.object_count = (3, 5);
        ExperimentConfig {
            seed: 5,
            dataset_dir: root.join("dataset").to_string_lossy().into_owned(),
            checkpoint_path: root.join("model.ckpt").to_string_lossy().into_owned(),
            output_dir: root.join("out").to_string_lossy().into_owned(),
            scene_count: 12,
            split: (0.75, 0.125, 0.125),
            generator,
            arch: crate::denoiser::ArchConfig {
                d_model: 64,
                n_heads: 2,
                n_blocks: 1,
                ff_width: 96,
            },
            training: crate::denoiser::TrainingConfig {
                total_steps: 12,
                batch_size: 4,
                seed: 5,
                ..Default::default()
            },
            schedule: crate::io::ScheduleConfig { t_count: 24, beta_start: 1e-4, beta_end: 0.02 },
            guidance: GuidanceConfig::default_for(24),
            agent: AgentSpec::default_desk(),
            resolution: 0.05,
            eval_scenes: 4,
        }
    }

    fn write_config(root: &Path, cfg: &ExperimentConfig) -> PathBuf {
        let path = root.join("config.json");
        cfg.save(&path).unwrap();
        path
    }

    #[test]
    fn guidance_selection_parsing() {
        assert_eq!(GuidanceSelection::parse("").unwrap(), GuidanceSelection::none());
        assert_eq!(GuidanceSelection::parse("none").unwrap(), GuidanceSelection::none());
        assert_eq!(GuidanceSelection::parse("all").unwrap(), GuidanceSelection::all());
        assert_eq!(
            GuidanceSelection::parse("coll,reach").unwrap(),
            GuidanceSelection { collision: true, layout: false, reach: true }
        );
        assert_eq!(
            GuidanceSelection::parse("collision, layout").unwrap(),
            GuidanceSelection { collision: true, layout: true, reach: false }
        );
        assert!(GuidanceSelection::parse("gravity").is_err());
        // Unselected kinds get weight zero; empty selection turns the
        // shift off entirely.
        let cfg = GuidanceSelection::parse("coll").unwrap().to_config(100);
        assert_eq!(cfg.gamma_coll, GAMMA_COLL);
        assert_eq!(cfg.gamma_layout, 0.0);
        assert_eq!(cfg.gamma_reach, 0.0);
        let off = GuidanceSelection::none().to_config(100);
        assert_eq!(off.lambda, 0.0);
        assert_eq!(GuidanceSelection::all().label(), "coll,layout,reach");
        assert_eq!(GuidanceSelection::none().label(), "none");
    }

    #[test]
    fn pipeline_composes_end_to_end() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let cfg = small_config(&root);
        let config_path = write_config(&root, &cfg);

        // generate-dataset
        let dataset_dir = PathBuf::from(&cfg.dataset_dir);
        let summary = cmd_generate_dataset(&config_path, &dataset_dir).unwrap();
        assert_eq!(summary.train + summary.val + summary.test, 12);
        assert!(dataset_dir.join("manifest.json").is_file());

        // train
        let trained = cmd_train(&config_path).unwrap();
        assert_eq!(trained.steps_run, 12);
        assert!(trained.checkpoint.is_file());
        assert!(trained.loss_csv.is_file());
        let csv = std::fs::read_to_string(&trained.loss_csv).unwrap();
        assert!(csv.starts_with("step,loss\n"));
        assert_eq!(csv.lines().count(), 13);

        // sample (twice with the same seed: byte-identical outputs)
        let sample_dir = root.join("samples");
        let args = SampleArgs {
            checkpoint: trained.checkpoint.clone(),
            floors_dir: dataset_dir.clone(),
            n: 3,
            selection: GuidanceSelection::parse("coll").unwrap(),
            seed: 7,
            out_dir: sample_dir.clone(),
        };
        let s1 = cmd_sample(&args).unwrap();
        assert_eq!(s1.count, 3);
        let bytes1: Vec<String> = (0..3)
            .map(|i| {
                std::fs::read_to_string(sample_dir.join(format!("scene-{i:05}.json"))).unwrap()
            })
            .collect();
        for i in 0..3 {
            assert!(sample_dir.join(format!("scene-{i:05}.svg")).is_file());
        }
        cmd_sample(&args).unwrap();
        for (i, old) in bytes1.iter().enumerate() {
            let new =
                std::fs::read_to_string(sample_dir.join(format!("scene-{i:05}.json"))).unwrap();
            assert_eq!(&new, old, "scene {i} changed across identical runs");
        }

        // evaluate(sample(...)) composes without edits.
        let report_path = root.join("report.json");
        let (report, table) = cmd_evaluate(&EvaluateArgs {
            scenes_dir: sample_dir.clone(),
            floors_dir: dataset_dir.clone(),
            agent_width: Some(0.3),
            out_path: report_path.clone(),
        })
        .unwrap();
        assert_eq!(report.scene_count, 3);
        assert!(report.ckl.is_some(), "reference scenes supply the divergence metric");
        assert!(table.contains("Col_obj"));
        assert!(report_path.is_file());
        let on_disk: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
        assert_eq!(on_disk["scene_count"], serde_json::json!(3));

        // render one of the sampled scenes.
        let svg_path = root.join("rendered.svg");
        cmd_render(&sample_dir.join("scene-00000.json"), &svg_path, true).unwrap();
        let svg = std::fs::read_to_string(&svg_path).unwrap();
        assert!(svg.starts_with("<svg "));
        assert!(svg.contains("class=\"walkable\""));
    }

    #[test]
    fn ablation_grid_has_five_labeled_rows() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let cfg = small_config(&root);
        let config_path = write_config(&root, &cfg);
        let dataset_dir = PathBuf::from(&cfg.dataset_dir);
        cmd_generate_dataset(&config_path, &dataset_dir).unwrap();
        let trained = cmd_train(&config_path).unwrap();
        let (meta, params) = load_checkpoint(&trained.checkpoint).unwrap();
        let grid = run_ablation(&meta, &params, 2, 3).unwrap();
        let labels: Vec<&str> = grid.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["none", "collision", "layout", "reachability", "all"]);
        let table = grid.table();
        assert_eq!(table.lines().count(), 6, "header plus five rows");
        for label in labels {
            assert!(table.contains(label));
        }
        // The grid serializes and the files land.
        let out = root.join("ablation");
        std::fs::create_dir_all(&out).unwrap();
        let value = serde_json::to_value(&grid).unwrap();
        std::fs::write(out.join("ablation.json"), canonical_json(&value)).unwrap();
        assert!(out.join("ablation.json").is_file());
    }

    #[test]
    fn evaluate_rejects_an_empty_directory() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let empty = root.join("empty");
        std::fs::create_dir_all(&empty).unwrap();
        let err = cmd_evaluate(&EvaluateArgs {
            scenes_dir: empty.clone(),
            floors_dir: empty.clone(),
            agent_width: None,
            out_path: root.join("report.json"),
        })
        .unwrap_err();
        assert!(err.to_string().contains("no scene files"));
    }
}
