//! Train the tiny model on a single frame until it reproduces it.

use poemkit::decoder::{Model, ModelConfig};
use poemkit::pipeline::{reconstruct, score, RootSource};
use poemkit::root_stage::BackboneConfig;
use poemkit::synth::{make_rig, render_frame, stage_center, Scene, SceneOptions};
use poemkit::train::{train, LrSchedule, TrainConfig};
use poemkit::Result;

fn main() -> Result<()> {
    let mut model = Model::new(ModelConfig::tiny())?;
    let rig = make_rig(4, 0.6, 1)?;
    let scene = Scene::sample(&SceneOptions::default(), &stage_center(0.6), 7);
    let frame = render_frame(&scene, &rig, &model.hand, &BackboneConfig::default())?;
    let before = score(&reconstruct(&model, &frame, RootSource::Estimate)?.1, &frame)?;
    let cfg = TrainConfig {
        steps: 300,
        lr: 1e-3,
        warmup: 50,
        schedule: LrSchedule::Cosine { floor: 0.05 },
        ..TrainConfig::default()
    };
    train(&mut model, std::slice::from_ref(&frame), &cfg, |l| {
        if l.step % 50 == 0 {
            println!("step {:>4} loss {:.3} mm", l.step, l.loss * 1000.0);
        }
    })?;
    let after = score(&reconstruct(&model, &frame, RootSource::Estimate)?.1, &frame)?;
    println!("MPJPE {:.2} -> {:.2} mm, MPVPE {:.2} -> {:.2} mm", before.mpjpe, after.mpjpe, before.mpvpe, after.mpvpe);
    Ok(())
}
