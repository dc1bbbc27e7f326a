//! Left hands through the mirror path, and in-plane camera roll augmentation.

use poemkit::decoder::{Model, ModelConfig};
use poemkit::geometry::{mirror_points, mirror_rig, project, rotate_augment};
use poemkit::pipeline::{reconstruct, reconstruct_mirrored, rotate_view, RootSource};
use poemkit::root_stage::BackboneConfig;
use poemkit::synth::{make_rig, render_frame, stage_center, Scene, SceneOptions};
use poemkit::Result;

fn main() -> Result<()> {
    let model = Model::new(ModelConfig::tiny())?;
    let bb = BackboneConfig::default();
    let rig = make_rig(4, 0.6, 8)?;
    let right = Scene::sample(&SceneOptions::default(), &stage_center(0.6), 2);
    let left = render_frame(&right.mirrored(), &rig, &model.hand, &bb)?;
    let twin = render_frame(&right, &mirror_rig(&rig), &model.hand, &bb)?;
    let (_, via_mirror) = reconstruct_mirrored(&model, &left, RootSource::Estimate)?;
    let (_, direct) = reconstruct(&model, &twin, RootSource::Estimate)?;
    let gap = via_mirror
        .iter()
        .zip(mirror_points(&direct))
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    println!("mirror path vs right-hand twin: {gap:.1e} m");

    let angle = 0.4;
    let rolled = rotate_view(&left, 1, angle)?;
    let (map, cam) = rotate_augment(&left.rig.cameras[1], angle);
    let before = project(&left.gt_points, &left.rig.cameras[1]);
    let after = project(&left.gt_points, &cam);
    let drift = before
        .pixels
        .iter()
        .zip(&after.pixels)
        .map(|(a, b)| (map.apply(a) - b).norm())
        .fold(0.0, f64::max);
    println!("roll {angle} rad: pixel map drift {drift:.1e} px; rolled frame has {} views", rolled.n_views());
    Ok(())
}
