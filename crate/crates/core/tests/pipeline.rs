use pillar_core::decoder::{finalize, run_decoder, ModelConfig, ModelParams};
use pillar_core::metrics::evaluate;
use pillar_core::sampling::SamplingConfig;
use pillar_core::scene::{build_scene, gt_at, prepare_inputs, Scene, SceneConfig};

fn small() -> (SceneConfig, ModelConfig) {
    let mut scene = SceneConfig {
        num_objects: 5,
        frames: 3,
        channels: 8,
        ..SceneConfig::default()
    };
    scene.rig.strides = vec![16, 32];
    let model = ModelConfig {
        num_queries: 12,
        channels: 8,
        layers: 3,
        sampling: SamplingConfig {
            frames: 3,
            points: 4,
            levels: 2,
            ..SamplingConfig::default()
        },
        ..ModelConfig::default()
    };
    (scene, model)
}

#[test]
fn serialized_artifacts_reproduce_detections() {
    let (sc, mc) = small();
    let scene = build_scene(&sc, 4).unwrap();
    let params = ModelParams::init(&mc, 9).unwrap();
    let scene2 = Scene::from_json(&scene.to_json().unwrap()).unwrap();
    let params2 = ModelParams::from_json(&params.to_json().unwrap()).unwrap();
    assert_eq!(scene, scene2);
    assert_eq!(params.flatten(), params2.flatten());

    let run = |s: &Scene, p: &ModelParams| {
        let inputs = prepare_inputs(s, &p.config.sampling.render_requests()).unwrap();
        finalize(&run_decoder(p, &inputs, 3).unwrap(), 0.0)
    };
    let a = run(&scene, &params);
    assert_eq!(a, run(&scene2, &params2));
    assert_eq!(a.len(), 12);
    assert!(a
        .iter()
        .all(|d| d.layer == 3 && d.score > 0.0 && d.score < 1.0));
}

#[test]
fn metrics_stay_in_range_on_untrained_output() {
    let (sc, mc) = small();
    let scene = build_scene(&sc, 1).unwrap();
    let params = ModelParams::init(&mc, 2).unwrap();
    let inputs = prepare_inputs(&scene, &mc.sampling.render_requests()).unwrap();
    let dets = finalize(&run_decoder(&params, &inputs, 2).unwrap(), 0.0);
    let r = evaluate(&dets, &gt_at(&scene, 0).unwrap().boxes);
    for v in [r.map, r.mate, r.mase, r.maoe, r.mave, r.desk_nds] {
        assert!((0.0..=1.0).contains(&v), "{v}");
    }
}
