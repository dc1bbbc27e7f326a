//! Stage 1: heatmaps from the synthetic backbone, soft-argmax per view, DLT across views.

use poemkit::hand::ToyHand;
use poemkit::root_stage::{estimate_root, soft_argmax, BackboneConfig};
use poemkit::synth::{make_rig, render_frame, stage_center, Scene, SceneOptions};
use poemkit::Result;

fn main() -> Result<()> {
    let rig = make_rig(4, 0.6, 1)?;
    let hand = ToyHand::new(77)?;
    let scene = Scene::sample(&SceneOptions::default(), &stage_center(0.6), 3);
    let frame = render_frame(&scene, &rig, &hand, &BackboneConfig::default())?;
    for (i, (h, cam)) in frame.heatmaps.iter().zip(&rig.cameras).enumerate() {
        let peak = soft_argmax(h)?;
        let truth = cam.project_point(&frame.gt_root).0;
        println!("view {i}: soft-argmax ({:.2}, {:.2}), true ({:.2}, {:.2})", peak.x, peak.y, truth.x, truth.y);
    }
    let root = estimate_root(&frame.heatmaps, &frame.rig)?;
    println!("root error {:.2} mm", (root - frame.gt_root).norm() * 1000.0);
    Ok(())
}
