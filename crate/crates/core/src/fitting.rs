//! Iterative optimization baseline: fit toy-hand pose, shape and root to
//! per-view 2D keypoints with Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{procrustes_align, triangulate_dlt, Observation, Rig, Vec2, Vec3};
use crate::hand::{output_joint_of_kin, JointLimits, ToyHand, N_JOINTS, N_KIN, N_SHAPE, ROOT_JOINT};
use crate::tensor::{AdamConfig, Init, ParamStore, Tape, Tensor, Var};

/// Keypoints of one view: 21 rows of `[u, v, valid]` in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewKeypoints {
    pub camera_index: usize,
    pub keypoints: Vec<[f64; 3]>,
}

/// On-disk keypoint file for one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointFile {
    pub views: Vec<ViewKeypoints>,
}

impl ViewKeypoints {
    pub fn is_valid(&self, j: usize) -> bool {
        self.keypoints[j][2] > 0.5
    }

    fn check(&self, rig: &Rig) -> Result<()> {
        if self.camera_index >= rig.len() {
            return Err(Error::InvalidInput(format!(
                "keypoints reference camera {} of a {}-camera rig",
                self.camera_index,
                rig.len()
            )));
        }
        if self.keypoints.len() != N_JOINTS {
            return Err(Error::InvalidInput(format!(
                "view {} has {} keypoints, expected {N_JOINTS}",
                self.camera_index,
                self.keypoints.len()
            )));
        }
        Ok(())
    }
}

/// Renders exact keypoints of `joints` in every camera; points behind a camera are invalid.
pub fn project_keypoints(joints: &[Vec3], rig: &Rig) -> Vec<ViewKeypoints> {
    rig.cameras
        .iter()
        .enumerate()
        .map(|(i, cam)| ViewKeypoints {
            camera_index: i,
            keypoints: joints
                .iter()
                .map(|j| {
                    let (p, z) = cam.project_point(j);
                    [p.x, p.y, if z > 0.0 { 1.0 } else { 0.0 }]
                })
                .collect(),
        })
        .collect()
}

/// Mean squared pixel distance between projected `joints: [21, 3]` and valid observations.
pub fn reprojection_loss<'t>(joints: Var<'t>, views: &[ViewKeypoints], rig: &Rig) -> Result<Var<'t>> {
    let tape = joints.tape();
    let mut total: Option<Var<'t>> = None;
    let mut n_valid = 0usize;
    for view in views {
        view.check(rig)?;
        let cam = &rig.cameras[view.camera_index];
        let rt = cam.rotation().transpose();
        let rt = Tensor::from_fn(&[3, 3], |i| rt[(i / 3, i % 3)]);
        let t = cam.translation();
        let xc = joints
            .matmul(tape.constant(rt))?
            .add(tape.constant(Tensor::new(&[1, 3], vec![t.x, t.y, t.z])?))?;
        let xy = xc.index_select(1, &[0, 1])?.div(xc.index_select(1, &[2])?)?;
        let k = &cam.intrinsics;
        let uv = xy
            .mul(tape.constant(Tensor::new(&[1, 2], vec![k.fx, k.fy])?))?
            .add(tape.constant(Tensor::new(&[1, 2], vec![k.cx, k.cy])?))?;
        let obs = Tensor::from_fn(&[N_JOINTS, 2], |i| view.keypoints[i / 2][i % 2]);
        let mask = Tensor::from_fn(&[N_JOINTS, 1], |j| if view.is_valid(j) { 1.0 } else { 0.0 });
        n_valid += (0..N_JOINTS).filter(|&j| view.is_valid(j)).count();
        let term = uv.sub(tape.constant(obs))?.mul(tape.constant(mask))?.square().sum();
        total = Some(match total {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    match total {
        Some(t) if n_valid > 0 => Ok(t.scale(1.0 / n_valid as f64)),
        _ => Err(Error::InvalidInput("no valid keypoint observations".into())),
    }
}

/// Reprojection loss of the skinned joints for the given hand parameters.
pub fn loss_2d<'t>(
    hand: &ToyHand,
    theta: Var<'t>,
    beta: Var<'t>,
    root: Var<'t>,
    views: &[ViewKeypoints],
    rig: &Rig,
) -> Result<Var<'t>> {
    let nv = hand.n_vertices();
    let joints = hand.lbs(theta, beta, root)?.index_select(0, &(nv..nv + N_JOINTS).collect::<Vec<_>>())?;
    reprojection_loss(joints, views, rig)
}

/// Sum of squared hinge violations of the per-joint axis-angle box.
pub fn loss_kin<'t>(theta: Var<'t>, limits: &JointLimits) -> Result<Var<'t>> {
    let tape = theta.tape();
    let clamp = |v: f64| v.clamp(-1e6, 1e6);
    let lo = Tensor::from_fn(&[N_KIN, 3], |i| clamp(limits.lo[i / 3][i % 3]));
    let hi = Tensor::from_fn(&[N_KIN, 3], |i| clamp(limits.hi[i / 3][i % 3]));
    let over = theta.sub(tape.constant(hi))?.relu().square().sum();
    let under = tape.constant(lo).sub(theta)?.relu().square().sum();
    over.add(under)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub iterations: usize,
    pub lr: f64,
    pub lambda_kin: f64,
    /// Iterations without improvement before the step size halves.
    pub patience: usize,
    /// Absolute improvement that counts as progress.
    pub tolerance: f64,
    pub decay: f64,
    /// Meters of root motion per unit of the optimized root variable.
    pub root_unit: f64,
    /// Known root; required for single-view fits.
    pub fixed_root: Option<[f64; 3]>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            iterations: 300,
            lr: 1e-2,
            lambda_kin: 0.1,
            patience: 50,
            tolerance: 1e-8,
            decay: 0.5,
            root_unit: 0.01,
            fixed_root: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta: Vec<[f64; 3]>,
    pub beta: Vec<f64>,
    pub root: [f64; 3],
    /// Objective value before each iteration, then the final value.
    pub loss_trace: Vec<f64>,
    pub converged: bool,
}

impl FitResult {
    pub fn theta_tensor(&self) -> Tensor {
        Tensor::from_fn(&[N_KIN, 3], |i| self.theta[i / 3][i % 3])
    }

    pub fn beta_tensor(&self) -> Tensor {
        Tensor::new(&[N_SHAPE], self.beta.clone()).expect("ten shape coefficients")
    }

    pub fn root_vec(&self) -> Vec3 {
        Vec3::from(self.root)
    }

    /// Skinned `(vertices, joints)` of the fitted parameters.
    pub fn evaluate(&self, hand: &ToyHand) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
        hand.forward(&self.theta_tensor(), &self.beta_tensor(), &self.root_vec())
    }
}

/// Triangulates the root joint from every valid observation of it.
pub fn initial_root(views: &[ViewKeypoints], rig: &Rig) -> Result<Vec3> {
    let mut obs = Vec::new();
    for v in views {
        v.check(rig)?;
        if v.is_valid(ROOT_JOINT) {
            let k = v.keypoints[ROOT_JOINT];
            obs.push(Observation {
                pixel: Vec2::new(k[0], k[1]),
                camera: &rig.cameras[v.camera_index],
            });
        }
    }
    triangulate_dlt(&obs)
}

/// Global orientation that rigidly aligns the rest-pose palm joints (wrist and
/// the first joint of every finger) with their triangulated positions.
/// Falls back to zero when fewer than three palm joints can be triangulated.
pub fn initial_orientation(views: &[ViewKeypoints], rig: &Rig, hand: &ToyHand) -> Result<[f64; 3]> {
    let palm = std::iter::once(0).chain((0..N_KIN).filter(|&k| hand.template.parents[k] == Some(0)).map(output_joint_of_kin));
    let (mut rest, mut seen) = (Vec::new(), Vec::new());
    for j in palm {
        let mut obs = Vec::new();
        for v in views {
            v.check(rig)?;
            if v.is_valid(j) {
                let k = v.keypoints[j];
                obs.push(Observation {
                    pixel: Vec2::new(k[0], k[1]),
                    camera: &rig.cameras[v.camera_index],
                });
            }
        }
        if let Ok(x) = triangulate_dlt(&obs) {
            rest.push(hand.template.joints[j]);
            seen.push(x);
        }
    }
    if rest.len() < 3 {
        return Ok([0.0; 3]);
    }
    let r = match procrustes_align(&rest, &seen) {
        Ok(p) => p.rotation,
        Err(_) => return Ok([0.0; 3]),
    };
    let a = nalgebra::Rotation3::from_matrix_unchecked(r).scaled_axis();
    Ok([a.x, a.y, a.z])
}

const THETA: &str = "theta";
const BETA: &str = "beta";
const ROOT: &str = "root";

fn objective<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    hand: &ToyHand,
    root0: &Vec3,
    views: &[ViewKeypoints],
    rig: &Rig,
    opts: &FitOptions,
) -> Result<(Var<'t>, crate::tensor::BoundParams<'t>)> {
    let bound = store.bind(tape);
    let root = bound
        .get(ROOT)?
        .scale(opts.root_unit)
        .add(tape.constant(Tensor::new(&[3], vec![root0.x, root0.y, root0.z])?))?;
    let theta = bound.get(THETA)?;
    let l2d = loss_2d(hand, theta, bound.get(BETA)?, root, views, rig)?;
    let loss = l2d.add(loss_kin(theta, &hand.joint_limits)?.scale(opts.lambda_kin))?;
    Ok((loss, bound))
}

/// Minimizes `L_2D + λ_kin·L_kin` over pose, shape and root.
///
/// Adam steps follow the gradient of the square root of the objective.
///
/// The root starts at the triangulated joint-9 keypoint, the global
/// orientation at the rigid palm alignment, finger pose and shape at zero. The best iterate seen is returned, so the final loss never
/// exceeds the initial one.
pub fn fit(views: &[ViewKeypoints], rig: &Rig, hand: &ToyHand, opts: &FitOptions) -> Result<FitResult> {
    let root0 = match opts.fixed_root {
        Some(r) => Vec3::from(r),
        None => initial_root(views, rig)?,
    };
    let mut store = ParamStore::new(0);
    store.add(THETA, &[N_KIN, 3], Init::Zeros)?;
    let global = initial_orientation(views, rig, hand)?;
    store.get_mut(THETA).expect("registered").data_mut()[..3].copy_from_slice(&global);
    store.add(BETA, &[N_SHAPE], Init::Zeros)?;
    store.add(ROOT, &[3], Init::Zeros)?;
    let mut adam = AdamConfig::with_lr(opts.lr);
    let mut trace = Vec::with_capacity(opts.iterations + 1);
    let mut best = (f64::INFINITY, store.clone());
    let mut since_best = 0usize;
    let mut since_decay = 0usize;
    for _ in 0..opts.iterations {
        let tape = Tape::new();
        let (loss, bound) = objective(&tape, &store, hand, &root0, views, rig, opts)?;
        let value = loss.value().item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite(vec!["fit objective".into()]));
        }
        trace.push(value);
        if value < best.0 - opts.tolerance {
            since_best = 0;
        } else {
            since_best += 1;
        }
        if value < best.0 {
            best = (value, store.clone());
        }
        since_decay += 1;
        if since_best >= opts.patience && since_decay >= opts.patience {
            adam.lr *= opts.decay;
            since_decay = 0;
        }
        // Descend on sqrt(loss): same minimizer, but the gradient scale does not
        // collapse with the residual, so Adam's slow second moment keeps pace.
        tape.backward(loss.add_scalar(1e-12).sqrt())?;
        let mut grads = bound.grads(&tape);
        if opts.fixed_root.is_some() {
            grads.insert(ROOT.into(), Tensor::zeros(&[3]));
        }
        store.adam_step(&grads, &adam)?;
    }
    let tape = Tape::new();
    let (loss, _) = objective(&tape, &store, hand, &root0, views, rig, opts)?;
    let last = loss.value().item()?;
    trace.push(last);
    if last < best.0 {
        best = (last, store.clone());
    }
    let converged = since_best >= opts.patience || best.0 < 1e-10;
    let s = &best.1;
    let theta = s.get(THETA).expect("registered");
    let root_off = s.get(ROOT).expect("registered");
    let root = root0 + Vec3::from_column_slice(root_off.data()) * opts.root_unit;
    Ok(FitResult {
        theta: (0..N_KIN).map(|k| [theta.get(&[k, 0]), theta.get(&[k, 1]), theta.get(&[k, 2])]).collect(),
        beta: s.get(BETA).expect("registered").data().to_vec(),
        root: [root.x, root.y, root.z],
        loss_trace: trace,
        converged,
    })
}
