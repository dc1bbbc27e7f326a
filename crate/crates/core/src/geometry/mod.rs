//! Pinhole cameras, rigs, triangulation, Procrustes alignment and the two
//! rig transforms used by the pipeline (image-plane rotation and mirroring).

mod augment;
mod procrustes;
mod triangulate;

pub use augment::{flip_u, mirror_camera, mirror_points, mirror_rig, rotate_augment, PixelRotation};
pub use procrustes::{procrustes_align, Procrustes};
pub use triangulate::{triangulate_dlt, Observation};

use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat4 = Matrix4<f64>;

const ORTHO_TOL: f64 = 1e-9;

/// Zero-skew pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn matrix(&self) -> Mat3 {
        Mat3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn from_matrix(k: &Mat3) -> Result<Self> {
        let ok = k[(0, 1)] == 0.0
            && k[(1, 0)] == 0.0
            && k[(2, 0)] == 0.0
            && k[(2, 1)] == 0.0
            && k[(2, 2)] == 1.0
            && k[(0, 0)] > 0.0
            && k[(1, 1)] > 0.0;
        if !ok {
            return Err(Error::InvalidInput(format!(
                "intrinsics must be zero-skew with positive focal lengths and last row [0,0,1], got {k}"
            )));
        }
        Ok(Self {
            fx: k[(0, 0)],
            fy: k[(1, 1)],
            cx: k[(0, 2)],
            cy: k[(1, 2)],
        })
    }
}

/// A calibrated camera with a world-to-camera pose.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    /// World to camera, SE(3), meters.
    pub pose: Mat4,
    pub width: u32,
    pub height: u32,
}

fn check_pose(t: &Mat4) -> Result<()> {
    let r = t.fixed_view::<3, 3>(0, 0).into_owned();
    let ortho = (r.transpose() * r - Mat3::identity()).abs().max();
    let det = r.determinant();
    let last = t.row(3).into_owned();
    let last_ok = last[0] == 0.0 && last[1] == 0.0 && last[2] == 0.0 && last[3] == 1.0;
    if ortho > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL || !last_ok || !t.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "pose is not a rigid transform (orthonormality error {ortho:e}, det {det})"
        )));
    }
    Ok(())
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, pose: Mat4, width: u32, height: u32) -> Result<Self> {
        Intrinsics::from_matrix(&intrinsics.matrix())?;
        check_pose(&pose)?;
        Ok(Self {
            intrinsics,
            pose,
            width,
            height,
        })
    }

    pub fn k(&self) -> Mat3 {
        self.intrinsics.matrix()
    }

    pub fn rotation(&self) -> Mat3 {
        self.pose.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vec3 {
        self.pose.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// `M = K · T[0:3, :]`.
    pub fn projection(&self) -> Matrix3x4<f64> {
        self.k() * self.pose.fixed_view::<3, 4>(0, 0)
    }

    /// Optical center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation() * p + self.translation()
    }

    /// Projects a single world point; returns `(pixel, depth)`.
    pub fn project_point(&self, p: &Vec3) -> (Vec2, f64) {
        let c = self.to_camera(p);
        let k = &self.intrinsics;
        let pix = Vec2::new(k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy);
        (pix, c.z)
    }

    /// True if the pixel lies inside `[0, W-1] × [0, H-1]`.
    pub fn contains(&self, pixel: &Vec2) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x <= self.width as f64 - 1.0
            && pixel.y <= self.height as f64 - 1.0
    }
}

/// Result of projecting a batch of world points into one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub pixels: Vec<Vec2>,
    pub depth: Vec<f64>,
    /// Camera-space `z > 0`.
    pub in_front: Vec<bool>,
}

pub fn project(points: &[Vec3], camera: &Camera) -> Projection {
    let mut out = Projection {
        pixels: Vec::with_capacity(points.len()),
        depth: Vec::with_capacity(points.len()),
        in_front: Vec::with_capacity(points.len()),
    };
    for p in points {
        let (pix, z) = camera.project_point(p);
        out.pixels.push(pix);
        out.depth.push(z);
        out.in_front.push(z > 0.0);
    }
    out
}

/// An ordered set of cameras. In canonical form camera 0 has the identity pose.
#[derive(Clone, Debug, PartialEq)]
pub struct Rig {
    pub cameras: Vec<Camera>,
}

impl Rig {
    pub fn new(cameras: Vec<Camera>) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::InvalidInput("a rig needs at least one camera".into()));
        }
        Ok(Self { cameras })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn is_canonical(&self) -> bool {
        (self.cameras[0].pose - Mat4::identity()).abs().max() <= 1e-12
    }

    /// Keeps the cameras listed in `order` (in that order) and re-anchors the
    /// world to the new first camera.
    ///
    /// Returns the new rig and the rigid transform `A` mapping old world
    /// coordinates to new ones (`X' = A·X`, `T_i' = T_i·A⁻¹`).
    pub fn reanchor(&self, order: &[usize]) -> Result<(Rig, Mat4)> {
        if order.is_empty() || order.iter().any(|&i| i >= self.len()) {
            return Err(Error::InvalidInput(format!("invalid view order {order:?}")));
        }
        let a = self.cameras[order[0]].pose;
        let a_inv = rigid_inverse(&a);
        let cameras = order
            .iter()
            .map(|&i| {
                let mut cam = self.cameras[i].clone();
                cam.pose = cam.pose * a_inv;
                cam
            })
            .collect::<Vec<_>>();
        let mut rig = Rig { cameras };
        // Remove rounding from the anchor so the canonical check is exact.
        rig.cameras[0].pose = Mat4::identity();
        Ok((rig, a))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: RigFile = crate::io::read_json(path)?;
        file.into_rig().map_err(|e| match e {
            Error::InvalidInput(reason) => Error::Format {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, &RigFile::from_rig(self))
    }
}

/// Inverse of a rigid 4×4 transform.
pub fn rigid_inverse(t: &Mat4) -> Mat4 {
    let r = t.fixed_view::<3, 3>(0, 0).transpose();
    let tr = -(r * t.fixed_view::<3, 1>(0, 3));
    let mut out = Mat4::identity();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    out.fixed_view_mut::<3, 1>(0, 3).copy_from(&tr);
    out
}

pub fn transform_point(t: &Mat4, p: &Vec3) -> Vec3 {
    let h = t * Vector4::new(p.x, p.y, p.z, 1.0);
    Vec3::new(h.x, h.y, h.z)
}

/// On-disk rig description (row-major matrices).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RigFile {
    pub cameras: Vec<CameraFile>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraFile {
    #[serde(rename = "K")]
    pub k: [f64; 9],
    #[serde(rename = "T")]
    pub t: [f64; 16],
    pub width: u32,
    pub height: u32,
}

impl RigFile {
    pub fn from_rig(rig: &Rig) -> Self {
        let cameras = rig
            .cameras
            .iter()
            .map(|c| {
                let k = c.k();
                let mut kk = [0.0; 9];
                let mut tt = [0.0; 16];
                for i in 0..3 {
                    for j in 0..3 {
                        kk[i * 3 + j] = k[(i, j)];
                    }
                }
                for i in 0..4 {
                    for j in 0..4 {
                        tt[i * 4 + j] = c.pose[(i, j)];
                    }
                }
                CameraFile {
                    k: kk,
                    t: tt,
                    width: c.width,
                    height: c.height,
                }
            })
            .collect();
        Self { cameras }
    }

    pub fn into_rig(self) -> Result<Rig> {
        let cameras = self
            .cameras
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let k = Mat3::from_row_slice(&c.k);
                let t = Mat4::from_row_slice(&c.t);
                let intr = Intrinsics::from_matrix(&k)
                    .map_err(|e| Error::InvalidInput(format!("camera {i}: {e}")))?;
                Camera::new(intr, t, c.width, c.height)
                    .map_err(|e| Error::InvalidInput(format!("camera {i}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Rig::new(cameras)
    }
}

/// Converts an `[N, 3]` tensor into points.
pub fn points_from_tensor(t: &Tensor) -> Result<Vec<Vec3>> {
    if t.rank() != 2 || t.shape()[1] != 3 {
        return Err(Error::shape("points_from_tensor", t.shape(), &[0, 3]));
    }
    Ok(t.data().chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
}

pub fn points_to_tensor(points: &[Vec3]) -> Tensor {
    let data = points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    Tensor::new(&[points.len(), 3], data).expect("length is 3N")
}

/// Rotation matrix from an axis-angle vector.
pub fn axis_angle(v: &Vec3) -> Mat3 {
    nalgebra::Rotation3::new(*v).into_inner()
}

/// Rigid transform from a rotation and a translation.
pub fn rigid(r: &Mat3, t: &Vec3) -> Mat4 {
    let mut out = Mat4::identity();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    out.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
    out
}

/// World-to-camera pose of a camera at `eye` looking at `target`.
///
/// Camera axes follow the image convention: x right, y down, z forward.
/// `up` is the world direction that should appear upward in the image.
pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3) -> Result<Mat4> {
    let z = target - eye;
    if z.norm() == 0.0 {
        return Err(Error::Degenerate("look_at: eye equals target".into()));
    }
    let z = z.normalize();
    let x = z.cross(up);
    if x.norm() < 1e-9 {
        return Err(Error::Degenerate("look_at: view direction parallel to up".into()));
    }
    let x = x.normalize();
    let y = z.cross(&x);
    let r = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Ok(rigid(&r, &(-(r * eye))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn test_camera(fx: f64, c: f64, pose: Mat4) -> Camera {
        let intr = Intrinsics {
            fx,
            fy: fx,
            cx: c,
            cy: c,
        };
        Camera::new(intr, pose, (2.0 * c) as u32, (2.0 * c) as u32).unwrap()
    }

    pub(crate) fn random_pose(rng: &mut ChaCha8Rng) -> Mat4 {
        let aa = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let t = Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(0.4..0.8));
        rigid(&axis_angle(&aa), &t)
    }

    #[test]
    fn optical_axis_and_offset() {
        let cam = test_camera(100.0, 50.0, Mat4::identity());
        let p = project(&[Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.1, 0.0, 1.0)], &cam);
        assert_eq!(p.pixels[0], Vec2::new(50.0, 50.0));
        assert!((p.pixels[1] - Vec2::new(60.0, 50.0)).norm() < 1e-12);
        assert!(p.in_front.iter().all(|&b| b));
        let behind = project(&[Vec3::new(0.0, 0.0, -1.0)], &cam);
        assert!(!behind.in_front[0]);
    }

    #[test]
    fn projection_satisfies_dlt_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let cam = test_camera(300.0, 128.0, random_pose(&mut rng));
            let p = Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
            let (pix, _) = cam.project_point(&p);
            let m = cam.projection();
            let ph = Vector4::new(p.x, p.y, p.z, 1.0);
            let r0 = pix.x * m.row(2).dot(&ph.transpose()) - m.row(0).dot(&ph.transpose());
            let r1 = pix.y * m.row(2).dot(&ph.transpose()) - m.row(1).dot(&ph.transpose());
            assert!(r0.abs() < 1e-9 && r1.abs() < 1e-9);
        }
    }

    #[test]
    fn reanchor_preserves_projections() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cams: Vec<Camera> = (0..4).map(|_| test_camera(300.0, 128.0, random_pose(&mut rng))).collect();
        let rig = Rig::new(cams).unwrap();
        let (re, a) = rig.reanchor(&[2, 0, 3]).unwrap();
        assert!(re.is_canonical());
        let p = Vec3::new(0.02, -0.03, 0.05);
        let p2 = transform_point(&a, &p);
        for (k, &src) in [2, 0, 3].iter().enumerate() {
            let (a_pix, _) = rig.cameras[src].project_point(&p);
            let (b_pix, _) = re.cameras[k].project_point(&p2);
            assert!((a_pix - b_pix).norm() < 1e-9);
        }
    }

    #[test]
    fn rig_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rig = Rig::new(vec![
            test_camera(300.0, 128.0, Mat4::identity()),
            test_camera(280.0, 100.0, random_pose(&mut rng)),
        ])
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rig.json");
        rig.save(&path).unwrap();
        assert_eq!(Rig::load(&path).unwrap(), rig);
    }

    #[test]
    fn rejects_skew_and_bad_rotation() {
        let mut k = Intrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
        }
        .matrix();
        k[(0, 1)] = 0.1;
        assert!(Intrinsics::from_matrix(&k).is_err());
        let mut t = Mat4::identity();
        t[(0, 0)] = -1.0;
        let intr = Intrinsics::from_matrix(&Mat3::identity()).unwrap();
        assert!(Camera::new(intr, t, 10, 10).is_err());
    }

    #[test]
    fn look_at_centers_target() {
        let pose = look_at(&Vec3::new(0.3, -0.2, 0.5), &Vec3::zeros(), &Vec3::new(0.0, 1.0, 0.0)).unwrap();
        let cam = test_camera(300.0, 128.0, pose);
        let (pix, z) = cam.project_point(&Vec3::zeros());
        assert!((pix - Vec2::new(128.0, 128.0)).norm() < 1e-9);
        assert!(z > 0.0);
        assert!((cam.center() - Vec3::new(0.3, -0.2, 0.5)).norm() < 1e-12);
    }

    #[test]
    fn look_at_keeps_up_upward() {
        let up = Vec3::new(0.0, -1.0, 0.0);
        let pose = look_at(&Vec3::new(0.0, 0.0, -0.6), &Vec3::zeros(), &up).unwrap();
        let cam = test_camera(300.0, 128.0, pose);
        let (above, _) = cam.project_point(&(up * 0.05));
        assert!(above.y < 128.0 && (above.x - 128.0).abs() < 1e-9, "{above:?}");
        // Straight-on view of a y-down world is the identity rotation.
        assert!((cam.rotation() - Mat3::identity()).abs().max() < 1e-12);
    }
}
