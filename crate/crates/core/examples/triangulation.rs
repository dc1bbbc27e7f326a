//! Build a rig, project a point into every camera, and triangulate it back.

use poemkit::geometry::{triangulate_dlt, Observation, Vec3};
use poemkit::synth::{make_rig, stage_center};
use poemkit::Result;

fn main() -> Result<()> {
    let rig = make_rig(4, 0.6, 7)?;
    let x = stage_center(0.6) + Vec3::new(0.02, -0.01, 0.03);
    let obs: Vec<Observation> = rig
        .cameras
        .iter()
        .map(|cam| Observation {
            pixel: cam.project_point(&x).0,
            camera: cam,
        })
        .collect();
    for (i, o) in obs.iter().enumerate() {
        println!("camera {i}: pixel ({:.2}, {:.2})", o.pixel.x, o.pixel.y);
    }
    let back = triangulate_dlt(&obs)?;
    println!("triangulated {back:?}, error {:.2e} m", (back - x).norm());

    // Re-anchoring on camera 2 moves the world frame; projections do not change.
    let (rig2, a) = rig.reanchor(&[2, 0, 1, 3])?;
    let moved = poemkit::geometry::transform_point(&a, &x);
    let p = rig2.cameras[0].project_point(&moved).0;
    println!("camera 2 after re-anchoring: ({:.2}, {:.2})", p.x, p.y);
    Ok(())
}
