//! Manual timing probe for the desk training step (run with --ignored).

use avsync_core::codec::PatchCodec;
use avsync_core::nn::{BackboneConfig, EditModel, RefinerConfig};
use avsync_core::train::{prepare_scene, train_step, Adam, PreparedScene, TrainSettings};
use avsync_core::world::{generate_scene, sample_scene_spec, SceneProfile};
use std::time::Instant;

#[test]
#[ignore]
fn time_training_step() {
    for (hw, label) in [(16usize, "16x16")] {
        let model_cfg = BackboneConfig { ffn_mult: 1, ..BackboneConfig::default() };
        let rf_cfg = RefinerConfig { ffn_mult: 1, ..RefinerConfig::default() };
        let mut model = EditModel::new(&model_cfg, &rf_cfg, 1).unwrap();
        let codec = PatchCodec::new(2, 3).unwrap();
        let profile = SceneProfile { frames: 16, height: hw, width: hw, ..SceneProfile::default() };
        let data: Vec<PreparedScene> = (0..4)
            .map(|i| {
                let spec = sample_scene_spec(i, &profile).unwrap();
                let s = generate_scene(&spec).unwrap();
                prepare_scene(&spec, &s, &codec, 16, false).unwrap()
            })
            .collect();
        let s = TrainSettings { batch: 1, seed: 1, ..TrainSettings::default() };
        let mut adam = Adam::new(&model.params, s.lr);
        // warmup
        train_step(&mut model, &mut adam, &data, &s, 0).unwrap();
        let t0 = Instant::now();
        let n = 10;
        for step in 1..=n {
            train_step(&mut model, &mut adam, &data, &s, step).unwrap();
        }
        let dt = t0.elapsed().as_secs_f64() / n as f64;
        println!("{label}: {dt:.3} s/step -> 5000 steps = {:.1} min", dt * 5000.0 / 60.0);
    }
}
