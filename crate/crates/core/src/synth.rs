//! Synthetic multi-view data: camera rigs, random toy-hand scenes, rendering
//! through the synthetic backbone, view dropping/shuffling and mirroring.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    axis_angle, look_at, mirror_points, mirror_rig, transform_point, Camera, Intrinsics, Mat3, Mat4, Rig, Vec3,
};
use crate::hand::{ToyHand, N_JOINTS, N_KIN, N_SHAPE};
use crate::root_stage::{synth_backbone, BackboneConfig, FeatureGrid, Heatmap};
use crate::tensor::Tensor;

/// Camera rig layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigOptions {
    pub n_cameras: usize,
    /// Distance from every camera to the stage center, meters.
    pub radius: f64,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
}

impl Default for RigOptions {
    fn default() -> Self {
        Self {
            n_cameras: 4,
            radius: 0.6,
            width: 256,
            height: 256,
            fx: 300.0,
            fy: 300.0,
        }
    }
}

/// Stage center in canonical coordinates: camera 0 looks straight at it.
pub fn stage_center(radius: f64) -> Vec3 {
    Vec3::new(0.0, 0.0, radius)
}

/// `N` cameras at `radius_m` from a common target with the default image settings.
pub fn make_rig(n: usize, radius_m: f64, seed: u64) -> Result<Rig> {
    make_rig_with(
        &RigOptions {
            n_cameras: n,
            radius: radius_m,
            ..RigOptions::default()
        },
        seed,
    )
}

/// Cameras spread in azimuth around the stage with jittered azimuth,
/// elevation and roll, all aimed at the stage center, then re-anchored so
/// camera 0 is the world frame.
pub fn make_rig_with(opts: &RigOptions, seed: u64) -> Result<Rig> {
    Ok(make_staged_rig(opts, seed)?.0)
}

/// `make_rig_with` plus the transform from stage coordinates (origin at the
/// stage center, y down, camera 0 nominally on the -z side) to the world frame.
pub fn make_staged_rig(opts: &RigOptions, seed: u64) -> Result<(Rig, Mat4)> {
    if opts.n_cameras == 0 {
        return Err(Error::InvalidInput("a rig needs at least one camera".into()));
    }
    if !(opts.radius > 0.0) {
        return Err(Error::InvalidInput(format!("rig radius {} must be positive", opts.radius)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intr = Intrinsics {
        fx: opts.fx,
        fy: opts.fy,
        cx: (opts.width as f64 - 1.0) / 2.0,
        cy: (opts.height as f64 - 1.0) / 2.0,
    };
    let n = opts.n_cameras;
    let spacing = std::f64::consts::TAU / n as f64;
    let mut cams = Vec::with_capacity(n);
    for i in 0..n {
        let az = i as f64 * spacing + rng.random_range(-0.25..0.25) * spacing.min(1.0);
        let el: f64 = rng.random_range(-0.3..0.45);
        let roll: f64 = rng.random_range(-0.2..0.2);
        let eye = Vec3::new(az.sin() * el.cos(), -el.sin(), -az.cos() * el.cos()) * opts.radius;
        let pose = look_at(&eye, &Vec3::zeros(), &Vec3::new(0.0, -1.0, 0.0))?;
        let mut rz = Mat4::identity();
        let (s, c) = roll.sin_cos();
        rz[(0, 0)] = c;
        rz[(0, 1)] = -s;
        rz[(1, 0)] = s;
        rz[(1, 1)] = c;
        cams.push(Camera::new(intr, rz * pose, opts.width, opts.height)?);
    }
    let order: Vec<usize> = (0..n).collect();
    Rig::new(cams)?.reanchor(&order)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Handedness {
    Right,
    Left,
}

impl Handedness {
    pub fn flipped(self) -> Self {
        match self {
            Handedness::Right => Handedness::Left,
            Handedness::Left => Handedness::Right,
        }
    }
}

/// Distribution of random hand configurations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneOptions {
    /// Mean global orientation (axis-angle, canonical frame).
    pub nominal_orientation: [f64; 3],
    /// Half-width of the uniform per-axis orientation perturbation, radians.
    pub orientation_jitter: f64,
    /// Half-width of the uniform turn about the vertical axis, radians.
    pub yaw_range: f64,
    /// Half-width of the uniform per-axis root offset from the stage center, meters.
    pub root_jitter: f64,
    /// Largest per-finger curl, radians per joint.
    pub max_curl: f64,
    /// Standard deviation of shape coefficients (clipped at ±2σ).
    pub shape_sigma: f64,
    /// Probability that a frame shows a left hand.
    pub left_fraction: f64,
}

impl Default for SceneOptions {
    fn default() -> Self {
        Self {
            nominal_orientation: [0.3, 0.0, 0.0],
            orientation_jitter: 0.35,
            yaw_range: std::f64::consts::FRAC_PI_2,
            root_jitter: 0.03,
            max_curl: 1.2,
            shape_sigma: 1.0,
            left_fraction: 0.0,
        }
    }
}

/// Ground truth of one frame. For a left hand the right-hand geometry is
/// mirrored across the world Y-Z plane; `root` is stored after mirroring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub theta: Vec<[f64; 3]>,
    pub beta: Vec<f64>,
    pub root: [f64; 3],
    pub handedness: Handedness,
    pub seed: u64,
}

fn mirror_x(p: &Vec3) -> Vec3 {
    Vec3::new(-p.x, p.y, p.z)
}

impl Scene {
    /// Draws a right-hand scene (or left, per `left_fraction`) around `center`.
    pub fn sample(opts: &SceneOptions, center: &Vec3, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![[0.0; 3]; N_KIN];
        let j = opts.orientation_jitter;
        let jitter = Vec3::new(rng.random_range(-j..=j), rng.random_range(-j..=j), rng.random_range(-j..=j));
        let y = opts.yaw_range;
        let yaw = axis_angle(&Vec3::new(0.0, rng.random_range(-y..=y), 0.0));
        let global = yaw * axis_angle(&jitter) * axis_angle(&Vec3::from(opts.nominal_orientation));
        let g = nalgebra::Rotation3::from_matrix_unchecked(global).scaled_axis();
        theta[0] = [g.x, g.y, g.z];
        for finger in 0..5 {
            let curl = rng.random_range(0.0..opts.max_curl);
            let spread = rng.random_range(-0.25..0.25);
            for k in 0..3 {
                let row = 1 + 3 * finger + k;
                theta[row] = [
                    (curl * rng.random_range(0.8..1.1)).clamp(-0.2, 1.8),
                    if k == 0 { spread } else { rng.random_range(-0.05..0.05) },
                    rng.random_range(-0.1..0.1),
                ];
            }
        }
        let s = opts.shape_sigma;
        let normal = rand_distr::Normal::new(0.0, s.max(f64::MIN_POSITIVE)).expect("finite sigma");
        let beta = (0..N_SHAPE)
            .map(|_| rng.sample(normal).clamp(-2.0 * s, 2.0 * s))
            .collect();
        let r = opts.root_jitter;
        let root = center + Vec3::new(rng.random_range(-r..=r), rng.random_range(-r..=r), rng.random_range(-r..=r));
        let handedness = if rng.random_bool(opts.left_fraction.clamp(0.0, 1.0)) {
            Handedness::Left
        } else {
            Handedness::Right
        };
        let mut scene = Self {
            theta,
            beta,
            root: [root.x, root.y, root.z],
            handedness: Handedness::Right,
            seed,
        };
        if handedness == Handedness::Left {
            scene = scene.mirrored();
        }
        scene
    }

    /// The same geometry reflected across the world Y-Z plane, handedness flipped.
    pub fn mirrored(&self) -> Self {
        let r = mirror_x(&Vec3::from(self.root));
        Self {
            root: [r.x, r.y, r.z],
            handedness: self.handedness.flipped(),
            ..self.clone()
        }
    }

    /// The same hand moved rigidly by `a` (world points become `a·X`).
    pub fn transformed(&self, a: &Mat4) -> Self {
        let mut r: Mat3 = a.fixed_view::<3, 3>(0, 0).into_owned();
        if self.handedness == Handedness::Left {
            // Left hands are posed as mirrored right hands.
            let m = Mat3::from_diagonal(&Vec3::new(-1.0, 1.0, 1.0));
            r = m * r * m;
        }
        let g = r * axis_angle(&Vec3::from(self.theta[0]));
        let g = nalgebra::Rotation3::from_matrix_unchecked(g).scaled_axis();
        let root = transform_point(a, &Vec3::from(self.root));
        let mut theta = self.theta.clone();
        theta[0] = [g.x, g.y, g.z];
        Self {
            theta,
            root: [root.x, root.y, root.z],
            ..self.clone()
        }
    }

    pub fn theta_tensor(&self) -> Tensor {
        Tensor::from_fn(&[N_KIN, 3], |i| self.theta[i / 3][i % 3])
    }

    pub fn beta_tensor(&self) -> Tensor {
        Tensor::new(&[N_SHAPE], self.beta.clone()).expect("ten shape coefficients")
    }

    /// Hand vertices then joints, in world meters.
    pub fn points(&self, hand: &ToyHand) -> Result<Vec<Vec3>> {
        let root = Vec3::from(self.root);
        let right_root = match self.handedness {
            Handedness::Right => root,
            Handedness::Left => mirror_x(&root),
        };
        let (v, j) = hand.forward(&self.theta_tensor(), &self.beta_tensor(), &right_root)?;
        let pts: Vec<Vec3> = v.into_iter().chain(j).collect();
        Ok(match self.handedness {
            Handedness::Right => pts,
            Handedness::Left => mirror_points(&pts),
        })
    }
}

/// One multi-view frame: rig, rendered grids and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBundle {
    pub rig: Rig,
    pub features: Vec<FeatureGrid>,
    pub heatmaps: Vec<Heatmap>,
    /// Vertices then 21 joints, world meters.
    pub gt_points: Vec<Vec3>,
    pub gt_root: Vec3,
    pub handedness: Handedness,
}

impl FrameBundle {
    pub fn n_views(&self) -> usize {
        self.rig.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.gt_points.len() - N_JOINTS
    }

    pub fn gt_vertices(&self) -> &[Vec3] {
        &self.gt_points[..self.n_vertices()]
    }

    pub fn gt_joints(&self) -> &[Vec3] {
        &self.gt_points[self.n_vertices()..]
    }
}

/// Renders every view of `scene` through the synthetic backbone.
pub fn render_frame(scene: &Scene, rig: &Rig, hand: &ToyHand, backbone: &BackboneConfig) -> Result<FrameBundle> {
    let gt_points = scene.points(hand)?;
    let gt_root = Vec3::from(scene.root);
    let mut features = Vec::with_capacity(rig.len());
    let mut heatmaps = Vec::with_capacity(rig.len());
    for cam in &rig.cameras {
        let (f, h) = synth_backbone(&gt_points, Some(&gt_root), cam, backbone)?;
        features.push(f);
        heatmaps.push(h);
    }
    Ok(FrameBundle {
        rig: rig.clone(),
        features,
        heatmaps,
        gt_points,
        gt_root,
        handedness: scene.handedness,
    })
}

/// Keeps the views in `order` (in that order) and re-anchors the world to the
/// first of them; ground truth moves with the world frame.
pub fn select_views(frame: &FrameBundle, order: &[usize]) -> Result<FrameBundle> {
    let (rig, a) = frame.rig.reanchor(order)?;
    Ok(FrameBundle {
        rig,
        features: order.iter().map(|&i| frame.features[i].clone()).collect(),
        heatmaps: order.iter().map(|&i| frame.heatmaps[i].clone()).collect(),
        gt_points: frame.gt_points.iter().map(|p| transform_point(&a, p)).collect(),
        gt_root: transform_point(&a, &frame.gt_root),
        handedness: frame.handedness,
    })
}

/// Drops to a uniform-random view count in `[1, N]` and shuffles the survivors.
pub fn randomize_views(frame: &FrameBundle, seed: u64) -> Result<FrameBundle> {
    select_views(frame, &random_order(frame.n_views(), seed))
}

/// Shuffles all views without dropping any.
pub fn shuffle_views(frame: &FrameBundle, seed: u64) -> Result<FrameBundle> {
    select_views(frame, &shuffled_order(frame.n_views(), seed))
}

/// View order used by `randomize_views`.
pub fn random_order(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = rng.random_range(1..=n.max(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order.truncate(keep);
    order
}

/// View order used by `shuffle_views`.
pub fn shuffled_order(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn flip_columns(t: &Tensor) -> Tensor {
    let s = t.shape().to_vec();
    let (rows, cols) = (s[0], s[1]);
    let ch: usize = s[2..].iter().product();
    let mut out = vec![0.0; t.numel()];
    for i in 0..rows {
        for j in 0..cols {
            let src = (i * cols + j) * ch;
            let dst = (i * cols + cols - 1 - j) * ch;
            out[dst..dst + ch].copy_from_slice(&t.data()[src..src + ch]);
        }
    }
    Tensor::new(&s, out).expect("same shape")
}

/// The frame as seen in a mirror: rig mirrored, every grid flipped
/// horizontally, ground truth reflected and handedness flipped.
pub fn mirror_bundle(frame: &FrameBundle) -> FrameBundle {
    FrameBundle {
        rig: mirror_rig(&frame.rig),
        features: frame
            .features
            .iter()
            .map(|f| FeatureGrid {
                grid: flip_columns(&f.grid),
                stride: f.stride,
            })
            .collect(),
        heatmaps: frame
            .heatmaps
            .iter()
            .map(|h| Heatmap {
                grid: flip_columns(&h.grid),
                stride: h.stride,
            })
            .collect(),
        gt_points: mirror_points(&frame.gt_points),
        gt_root: mirror_x(&frame.gt_root),
        handedness: frame.handedness.flipped(),
    }
}

/// Mixes a base seed with an index into an independent stream seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
