use super::{Camera, Mat4, Rig, Vec2, Vec3};

/// Image-plane map induced by rolling a camera about its optical axis.
///
/// Equals `K·Rz(a)·K⁻¹`; with `fx == fy` this is exactly the rotation by `a`
/// about the principal point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelRotation {
    pub angle: f64,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl PixelRotation {
    pub fn apply(&self, p: &Vec2) -> Vec2 {
        let (s, c) = self.angle.sin_cos();
        let x = (p.x - self.cx) / self.fx;
        let y = (p.y - self.cy) / self.fy;
        Vec2::new(self.cx + self.fx * (c * x - s * y), self.cy + self.fy * (s * x + c * y))
    }
}

fn rot_z(a: f64) -> Mat4 {
    let (s, c) = a.sin_cos();
    let mut m = Mat4::identity();
    m[(0, 0)] = c;
    m[(0, 1)] = -s;
    m[(1, 0)] = s;
    m[(1, 1)] = c;
    m
}

/// Rotation augmentation: the new pose is `Rz(a)·T`, and the returned pixel
/// map carries old projections onto new ones. World points are untouched.
pub fn rotate_augment(camera: &Camera, angle: f64) -> (PixelRotation, Camera) {
    let k = &camera.intrinsics;
    let map = PixelRotation {
        angle,
        fx: k.fx,
        fy: k.fy,
        cx: k.cx,
        cy: k.cy,
    };
    let mut out = camera.clone();
    if angle != 0.0 {
        out.pose = rot_z(angle) * camera.pose;
    }
    (map, out)
}

fn reflect() -> Mat4 {
    Mat4::from_diagonal(&nalgebra::Vector4::new(-1.0, 1.0, 1.0, 1.0))
}

/// Mirrors one camera across the world Y-Z plane: `T' = S·T·S` with
/// `S = diag(-1, 1, 1)` and the principal point flipped to `W-1-cx`.
pub fn mirror_camera(camera: &Camera) -> Camera {
    let s = reflect();
    let mut out = camera.clone();
    out.pose = s * camera.pose * s;
    out.intrinsics.cx = camera.width as f64 - 1.0 - camera.intrinsics.cx;
    out
}

pub fn mirror_rig(rig: &Rig) -> Rig {
    Rig {
        cameras: rig.cameras.iter().map(mirror_camera).collect(),
    }
}

pub fn mirror_points(points: &[Vec3]) -> Vec<Vec3> {
    points.iter().map(|p| Vec3::new(-p.x, p.y, p.z)).collect()
}

/// Horizontal image flip `u → W-1-u`.
pub fn flip_u(pixel: &Vec2, width: u32) -> Vec2 {
    Vec2::new(width as f64 - 1.0 - pixel.x, pixel.y)
}

#[cfg(test)]
mod tests {
    use super::super::tests::{random_pose, test_camera};
    use super::super::Intrinsics;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn zero_angle_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cam = test_camera(300.0, 128.0, random_pose(&mut rng));
        let (map, same) = rotate_augment(&cam, 0.0);
        assert_eq!(same, cam);
        let p = Vec2::new(10.0, 200.0);
        assert_eq!(map.apply(&p), p);
    }

    #[test]
    fn half_turn_fixes_principal_point() {
        let cam = test_camera(300.0, 128.0, Mat4::identity());
        let (map, rotated) = rotate_augment(&cam, PI);
        let (pix, _) = rotated.project_point(&Vec3::new(0.0, 0.0, 0.5));
        assert!((pix - Vec2::new(128.0, 128.0)).norm() < 1e-12);
        assert!((map.apply(&Vec2::new(128.0, 128.0)) - Vec2::new(128.0, 128.0)).norm() < 1e-12);
    }

    #[test]
    fn rotation_commutes_with_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let intr = Intrinsics {
                fx: rng.random_range(200.0..400.0),
                fy: rng.random_range(200.0..400.0),
                cx: rng.random_range(100.0..150.0),
                cy: rng.random_range(100.0..150.0),
            };
            let cam = Camera::new(intr, random_pose(&mut rng), 256, 256).unwrap();
            let a = rng.random_range(-PI..PI);
            let (map, rotated) = rotate_augment(&cam, a);
            for _ in 0..100 {
                let p = Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
                let lhs = map.apply(&cam.project_point(&p).0);
                let rhs = rotated.project_point(&p).0;
                assert!((lhs - rhs).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn mirror_is_involution_and_commutes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rig = Rig::new(vec![
            test_camera(300.0, 128.0, Mat4::identity()),
            test_camera(300.0, 120.0, random_pose(&mut rng)),
            test_camera(310.0, 128.0, random_pose(&mut rng)),
        ])
        .unwrap();
        let twice = mirror_rig(&mirror_rig(&rig));
        for (a, b) in rig.cameras.iter().zip(&twice.cameras) {
            assert!((a.pose - b.pose).abs().max() <= 1e-12);
            assert!((a.intrinsics.cx - b.intrinsics.cx).abs() <= 1e-12);
        }
        let mirrored = mirror_rig(&rig);
        assert!(mirrored.is_canonical());
        let pts: Vec<Vec3> = (0..50)
            .map(|_| Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)))
            .collect();
        let mp = mirror_points(&pts);
        assert_eq!(mp[0], Vec3::new(-pts[0].x, pts[0].y, pts[0].z));
        assert_eq!(mirror_points(&mp), pts);
        for (cam, mcam) in rig.cameras.iter().zip(&mirrored.cameras) {
            for (p, q) in pts.iter().zip(&mp) {
                let want = flip_u(&cam.project_point(p).0, cam.width);
                assert!((mcam.project_point(q).0 - want).norm() < 1e-9);
            }
        }
    }
}
