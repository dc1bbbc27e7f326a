//! Error metrics on a perturbed prediction.

use poemkit::geometry::{axis_angle, Vec3};
use poemkit::hand::{ToyHand, ROOT_JOINT};
use poemkit::metrics::{auc, mpjpe, pa, point_errors, rr};
use poemkit::Result;

fn main() -> Result<()> {
    let hand = ToyHand::new(77)?;
    let gt: Vec<Vec3> = hand.template.joints.iter().map(|j| j + Vec3::new(0.0, 0.0, 0.6)).collect();
    let r = axis_angle(&Vec3::new(0.0, 0.2, 0.0));
    let pred: Vec<Vec3> = gt.iter().map(|p| r * (p - gt[ROOT_JOINT]) + gt[ROOT_JOINT] + Vec3::new(0.004, 0.0, 0.0)).collect();
    println!("MPJPE {:.2} mm", mpjpe(&pred, &gt)?);
    println!("RR    {:.2} mm", rr(&pred, &gt, ROOT_JOINT)?);
    println!("PA    {:.2} mm", pa(&pred, &gt)?);
    println!("AUC   {:.3} over 0-20 mm", auc(&point_errors(&pred, &gt)?, 0.0, 20.0, 100)?);
    Ok(())
}
