//! The decoder at initialization returns the template placed at the root.

use poemkit::decoder::{Model, ModelConfig};
use poemkit::pipeline::{reconstruct, RootSource};
use poemkit::root_stage::BackboneConfig;
use poemkit::synth::{make_rig, render_frame, stage_center, Scene, SceneOptions};
use poemkit::Result;

fn main() -> Result<()> {
    let model = Model::new(ModelConfig::tiny())?;
    println!("{} parameters in {} tensors", model.params.num_scalars(), model.params.len());
    let rig = make_rig(4, 0.6, 4)?;
    let scene = Scene::sample(&SceneOptions::default(), &stage_center(0.6), 9);
    let frame = render_frame(&scene, &rig, &model.hand, &BackboneConfig::default())?;
    let (root, points) = reconstruct(&model, &frame, RootSource::Estimate)?;
    let template = model.hand.template.points();
    let exact = points.iter().zip(&template).all(|(p, t)| *p == t + root);
    println!("{} query points; equal to template + root: {exact}", points.len());
    Ok(())
}
