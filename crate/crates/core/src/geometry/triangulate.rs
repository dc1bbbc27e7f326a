use super::{Camera, Vec2, Vec3};
use crate::error::{Error, Result};
use crate::linalg;

/// A pixel observation of one point in one camera.
#[derive(Clone, Copy, Debug)]
pub struct Observation<'a> {
    pub pixel: Vec2,
    pub camera: &'a Camera,
}

/// Ratio below which the second-smallest singular value counts as zero,
/// i.e. the null space of the stacked system is not one-dimensional.
const RANK_TOL: f64 = 1e-10;
const NEAR_SINGULAR_REL: f64 = 1e-9;

/// Linear triangulation: stacks `u·M₂ − M₀` and `v·M₂ − M₁` for every view and
/// returns the dehomogenized right singular vector of the smallest singular value.
pub fn triangulate_dlt(obs: &[Observation<'_>]) -> Result<Vec3> {
    if obs.len() < 2 {
        return Err(Error::Degenerate(format!(
            "triangulation needs at least 2 views, got {}",
            obs.len()
        )));
    }
    let c0 = obs[0].camera.center();
    let spread = obs.iter().map(|o| (o.camera.center() - c0).norm()).fold(0.0, f64::max);
    if spread <= 1e-12 * (1.0 + c0.norm()) {
        return Err(Error::Degenerate(
            "all observations share one camera center (no viewpoint disparity)".into(),
        ));
    }

    let mut a = Vec::with_capacity(obs.len() * 8);
    for o in obs {
        let m = o.camera.projection();
        for (coord, row) in [(o.pixel.x, 0), (o.pixel.y, 1)] {
            for j in 0..4 {
                a.push(coord * m[(2, j)] - m[(row, j)]);
            }
        }
    }
    if !a.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite(vec!["triangulation system".into()]));
    }
    let svd = linalg::svd(&a, obs.len() * 2, 4);
    let s = &svd.s;
    if s[2] <= RANK_TOL * s[0] {
        return Err(Error::Degenerate(format!(
            "rays do not intersect in a unique point (singular values {s:?})"
        )));
    }
    if s[2] - s[3] <= NEAR_SINGULAR_REL * s[2] {
        log::warn!("triangulation is near-singular: two smallest singular values {} and {}", s[2], s[3]);
    }
    let h = &svd.v[3];
    if h[3].abs() < 1e-12 {
        return Err(Error::Degenerate("triangulated point is at infinity".into()));
    }
    Ok(Vec3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}
