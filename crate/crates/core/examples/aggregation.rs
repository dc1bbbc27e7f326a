//! Place the basis at the root, sample every view and fuse the features.

use poemkit::basis::{aggregate_frozen, generate_bps, sample_projected_features, PlacedBasis};
use poemkit::hand::ToyHand;
use poemkit::root_stage::BackboneConfig;
use poemkit::synth::{make_rig, render_frame, stage_center, Scene, SceneOptions};
use poemkit::tensor::{Init, ParamStore};
use poemkit::Result;

fn main() -> Result<()> {
    let rig = make_rig(4, 0.6, 2)?;
    let hand = ToyHand::new(77)?;
    let frame = render_frame(
        &Scene::sample(&SceneOptions::default(), &stage_center(0.6), 5),
        &rig,
        &hand,
        &BackboneConfig::default(),
    )?;
    let bps = generate_bps(256, 0.3, 0)?;
    let placed = PlacedBasis::place(&bps, &frame.gt_root);
    let views = sample_projected_features(&placed, &frame.rig, &frame.features)?;
    for (i, v) in views.iter().enumerate() {
        let seen = v.visible.iter().filter(|&&b| b).count();
        println!("view {i}: {seen}/{} basis points visible", v.visible.len());
    }
    let mut store = ParamStore::new(0);
    store.add("theta", &[32, 16], Init::FanIn)?;
    store.add("phi", &[16, 32], Init::FanIn)?;
    let (theta, phi) = (store.get("theta").unwrap(), store.get("phi").unwrap());
    let fused = aggregate_frozen(&views, theta, phi)?;
    println!("fused basis features {:?}", fused.shape());
    // One view passes straight through.
    assert_eq!(aggregate_frozen(&views[..1], theta, phi)?, views[0].features);
    Ok(())
}
