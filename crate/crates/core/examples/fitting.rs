//! Optimization baseline: fit pose, shape and root to multi-view 2D keypoints.

use poemkit::fitting::{fit, project_keypoints, FitOptions};
use poemkit::hand::ToyHand;
use poemkit::metrics::mpjpe;
use poemkit::synth::{make_rig, stage_center, Scene, SceneOptions};
use poemkit::Result;

fn main() -> Result<()> {
    let hand = ToyHand::new(77)?;
    let rig = make_rig(4, 0.6, 3)?;
    let scene = Scene::sample(&SceneOptions::default(), &stage_center(0.6), 21);
    let gt = scene.points(&hand)?;
    let joints = &gt[hand.n_vertices()..];
    let views = project_keypoints(joints, &rig);
    let start = std::time::Instant::now();
    let result = fit(&views, &rig, &hand, &FitOptions::default())?;
    let (_, fitted) = result.evaluate(&hand)?;
    println!(
        "reprojection loss {:.3e} -> {:.3e} px^2, MPJPE {:.3} mm, {:.1} s",
        result.loss_trace[0],
        result.loss_trace.last().unwrap(),
        mpjpe(&fitted, joints)?,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
