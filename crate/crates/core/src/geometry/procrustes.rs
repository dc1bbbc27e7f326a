use super::{Mat3, Vec3};
use crate::error::{Error, Result};
use crate::linalg;

/// Similarity transform `s·R·x + t` that best maps `pred` onto `gt`.
#[derive(Clone, Debug)]
pub struct Procrustes {
    pub aligned: Vec<Vec3>,
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

fn centered(points: &[Vec3]) -> (Vec3, Vec<Vec3>, f64) {
    let mean = points.iter().sum::<Vec3>() / points.len() as f64;
    let c: Vec<Vec3> = points.iter().map(|p| p - mean).collect();
    let var = c.iter().map(|p| p.norm_squared()).sum::<f64>() / points.len() as f64;
    (mean, c, var)
}

/// Closed-form least-squares similarity alignment with reflections excluded.
pub fn procrustes_align(pred: &[Vec3], gt: &[Vec3]) -> Result<Procrustes> {
    if pred.len() != gt.len() {
        return Err(Error::shape("procrustes_align", &[pred.len(), 3], &[gt.len(), 3]));
    }
    if pred.len() < 3 {
        return Err(Error::Degenerate(format!(
            "procrustes needs at least 3 points, got {}",
            pred.len()
        )));
    }
    let (mu_p, xp, var_p) = centered(pred);
    let (mu_g, xg, var_g) = centered(gt);
    if var_p == 0.0 || var_g == 0.0 {
        return Err(Error::Degenerate("procrustes input has zero spread".into()));
    }
    // Cross-covariance Σ = (1/n) Σ g_i p_iᵀ.
    let mut sigma = Mat3::zeros();
    for (g, p) in xg.iter().zip(&xp) {
        sigma += g * p.transpose();
    }
    sigma /= pred.len() as f64;
    let flat: Vec<f64> = (0..9).map(|i| sigma[(i / 3, i % 3)]).collect();
    let d = linalg::svd(&flat, 3, 3);
    let u = Mat3::from_fn(|i, j| d.u[j][i]);
    let v = Mat3::from_fn(|i, j| d.v[j][i]);
    let sign = if (u * v.transpose()).determinant() < 0.0 { -1.0 } else { 1.0 };
    let s_mat = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, sign));
    let rotation = u * s_mat * v.transpose();
    let scale = (d.s[0] + d.s[1] + sign * d.s[2]) / var_p;
    let translation = mu_g - scale * rotation * mu_p;
    let aligned = pred.iter().map(|p| scale * rotation * p + translation).collect();
    Ok(Procrustes {
        aligned,
        scale,
        rotation,
        translation,
    })
}
