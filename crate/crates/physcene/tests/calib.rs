//! Temporary calibration probe — not part of the suite.

mod common;

use physcene::commands::sample_scenes;
use physcene::diffusion::GuidanceConfig;
use physcene::metrics::{evaluate_scene_set, MetricsConfig};
use physcene::scene::{FloorPlan, SceneLayout};

fn row(
    label: &str,
    gcfg: &GuidanceConfig,
    n: usize,
    seed: u64,
) -> (f64, f64, f64, f64, f64) {
    let c = common::corpus();
    let f = common::partial();
    let out = sample_scenes(
        &f.meta,
        &f.params,
        &c.taxonomy,
        &c.sched,
        &c.sample_floors,
        n,
        gcfg,
        seed,
        &common::fixture_agent(),
        common::RESOLUTION,
    )
    .expect("sampling");
    let scenes: Vec<SceneLayout> = out.iter().map(|(s, _, _)| s.clone()).collect();
    let floors: Vec<FloorPlan> = out.iter().map(|(_, f, _)| f.clone()).collect();
    let guided: usize = out.iter().map(|(_, _, r)| r.guided_steps).sum();
    let mcfg = MetricsConfig::default();
    let rep = evaluate_scene_set(&scenes, &floors, &c.taxonomy, None, &mcfg).expect("metrics");
    println!(
        "{label:28} col_obj {:.4} col_scene {:.4} r_out {:.4} r_walk {:.4} r_reach {:.4} (guided steps {guided})",
        rep.col_obj, rep.col_scene, rep.r_out, rep.r_walkable, rep.r_reach
    );
    (rep.col_obj, rep.col_scene, rep.r_out, rep.r_walkable, rep.r_reach)
}

#[test]
#[ignore]
fn probe_guidance_weights() {
    let n = 64;
    let seed = 5;
    let base = GuidanceConfig::default_for(200);
    let none = GuidanceConfig { lambda: 0.0, ..base.clone() };
    row("none", &none, n, seed);
    for lambda in [1.0, 4.0, 16.0, 64.0] {
        let coll = GuidanceConfig {
            gamma_coll: 1.0,
            gamma_layout: 0.0,
            gamma_reach: 0.0,
            lambda,
            ..base.clone()
        };
        row(&format!("coll l={lambda}"), &coll, n, seed);
    }
    for lambda in [1.0, 4.0, 16.0] {
        for gl in [50.0, 200.0, 800.0] {
            let layout = GuidanceConfig {
                gamma_coll: 0.0,
                gamma_layout: gl,
                gamma_reach: 0.0,
                lambda,
                ..base.clone()
            };
            row(&format!("layout l={lambda} g={gl}"), &layout, n, seed);
        }
    }
    for lambda in [4.0, 16.0, 64.0] {
        let reach = GuidanceConfig {
            gamma_coll: 0.0,
            gamma_layout: 0.0,
            gamma_reach: lambda,
            lambda: 1.0,
            ..base.clone()
        };
        row(&format!("reach g={lambda}"), &reach, n, seed);
    }
}
