//! Shared fixtures for the acceptance suite: one deterministic synthetic
//! corpus plus two checkpoints trained on it — a converged one and a
//! briefly-trained one that still produces physics violations. Training
//! results are cached under the workspace `target/` directory keyed by a
//! fixture tag, so a repeated run skips straight to the assertions while
//! a fresh checkout still exercises the full training path.

use std::path::PathBuf;
use std::sync::OnceLock;

use physcene::datagen::{generate_dataset, generate_floor, GeneratorConfig};
use physcene::denoiser::{
    load_checkpoint, save_checkpoint, train, ArchConfig, CheckpointMeta, DenoiserParams,
    TrainItem, TrainingConfig,
};
use physcene::diffusion::{make_schedule, NoiseSchedule};
use physcene::io::write_loss_csv;
use physcene::reachability::AgentSpec;
use physcene::scene::{encode, FloorPlan, NormStats, SceneLayout, Taxonomy};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Bump to invalidate cached checkpoints when the fixture recipe changes.
const CACHE_TAG: &str = "fixture-v1";
/// Master seed of the training corpus.
pub const CORPUS_SEED: u64 = 417;
/// Scenes in the corpus (all clean: no violation injectors).
pub const CORPUS_SIZE: usize = 2000;
/// Fresh floors used for sampling-side checks.
pub const SAMPLE_FLOOR_COUNT: usize = 8;
/// Raster resolution shared by all fixture-level reachability work.
pub const RESOLUTION: f64 = 0.05;

pub fn fixture_arch() -> ArchConfig {
    ArchConfig { d_model: 64, n_heads: 4, n_blocks: 2, ff_width: 128 }
}

pub fn fixture_agent() -> AgentSpec {
    AgentSpec::default_desk()
}

/// The training corpus and everything derived from it that training needs.
pub struct Corpus {
    pub taxonomy: Taxonomy,
    pub generator: GeneratorConfig,
    pub scenes: Vec<SceneLayout>,
    pub stats: NormStats,
    pub items: Vec<TrainItem>,
    /// Floors the corpus never saw, for sampling.
    pub sample_floors: Vec<FloorPlan>,
    pub sched: NoiseSchedule,
}

pub fn corpus() -> &'static Corpus {
    static CORPUS: OnceLock<Corpus> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let taxonomy = Taxonomy::default_bedroom();
        let generator = GeneratorConfig::default_bedroom(CORPUS_SEED);
        let records = generate_dataset(&generator, CORPUS_SIZE).expect("corpus generation");
        let scenes: Vec<SceneLayout> = records.iter().map(|r| r.scene.clone()).collect();
        let stats = NormStats::fit(&scenes, &taxonomy).expect("corpus stats");
        let items: Vec<TrainItem> = records
            .iter()
            .map(|r| {
                let (x0, _) = encode(&r.scene, &stats, &taxonomy).expect("corpus encode");
                TrainItem::new(x0, r.floor.clone()).expect("corpus item")
            })
            .collect();
        let mut rng = ChaCha12Rng::seed_from_u64(CORPUS_SEED ^ 0x5add1e);
        let sample_floors: Vec<FloorPlan> = (0..SAMPLE_FLOOR_COUNT)
            .map(|i| {
                let mut f = generate_floor(&generator, &mut rng);
                f.id = format!("sample-floor-{i:02}");
                f
            })
            .collect();
        let sched = make_schedule(200, 1e-4, 0.02).expect("fixture schedule");
        Corpus {
            taxonomy,
            generator,
            scenes,
            stats,
            items,
            sample_floors,
            sched,
        }
    })
}

/// A checkpoint plus the loss curve that produced it.
pub struct Fixture {
    pub meta: CheckpointMeta,
    pub params: DenoiserParams,
    pub curve: Vec<f64>,
}

fn cache_dir() -> PathBuf {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    manifest
        .parent()
        .and_then(|p| p.parent())
        .expect("workspace root")
        .join("target")
        .join("acceptance-cache")
        .join(CACHE_TAG)
}

fn read_curve(path: &PathBuf) -> Option<Vec<f64>> {
    let text = std::fs::read_to_string(path).ok()?;
    let mut curve = Vec::new();
    for line in text.lines().skip(1) {
        let (_, loss) = line.split_once(',')?;
        curve.push(loss.parse::<f64>().ok()?);
    }
    (!curve.is_empty()).then_some(curve)
}

fn training_config(total_steps: usize, early_stop_ratio: Option<f64>) -> TrainingConfig {
    TrainingConfig {
        learning_rate: 3e-4,
        batch_size: 32,
        total_steps,
        seed: 7,
        early_stop_ratio,
        smooth_window: 50,
        ..Default::default()
    }
}

fn load_or_train(name: &str, tcfg: &TrainingConfig) -> Fixture {
    let dir = cache_dir();
    let ckpt = dir.join(format!("{name}.ckpt"));
    let csv = dir.join(format!("{name}-loss.csv"));
    if let Ok((meta, params)) = load_checkpoint(&ckpt) {
        if let Some(curve) = read_curve(&csv) {
            if meta.t_count == 200 && meta.d_model == fixture_arch().d_model {
                return Fixture { meta, params, curve };
            }
        }
    }
    let c = corpus();
    let arch = fixture_arch();
    let mut params = DenoiserParams::init(
        c.generator.n_slots,
        c.taxonomy.slot_dim(),
        200,
        &arch,
        tcfg.seed,
    )
    .expect("fixture init");
    let curve = train(&mut params, &c.items, &c.sched, tcfg, None).expect("fixture training");
    let meta = CheckpointMeta {
        n_slots: c.generator.n_slots,
        categories: c.taxonomy.names().to_vec(),
        category_channels: c.taxonomy.channel_count(),
        channels: c.taxonomy.slot_dim(),
        d_model: arch.d_model,
        n_blocks: arch.n_blocks,
        n_heads: arch.n_heads,
        ff_width: arch.ff_width,
        t_count: 200,
        beta_start: 1e-4,
        beta_end: 0.02,
        stats: c.stats.clone(),
    };
    std::fs::create_dir_all(&dir).expect("cache dir");
    save_checkpoint(&ckpt, &meta, &params).expect("cache checkpoint");
    write_loss_csv(&csv, &curve).expect("cache curve");
    Fixture { meta, params, curve }
}

/// The converged fixture: up to 5000 steps with early stop once the
/// smoothed loss falls to 35% of its starting level.
pub fn trained() -> &'static Fixture {
    static TRAINED: OnceLock<Fixture> = OnceLock::new();
    TRAINED.get_or_init(|| load_or_train("trained", &training_config(5000, Some(0.35))))
}

/// The violation-rich fixture: the same recipe stopped after 600 steps,
/// long enough to place plausible objects, short enough to misplace them.
pub fn partial() -> &'static Fixture {
    static PARTIAL: OnceLock<Fixture> = OnceLock::new();
    PARTIAL.get_or_init(|| load_or_train("partial", &training_config(600, None)))
}
