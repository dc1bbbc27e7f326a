//! A toy articulated hand standing in for a licensed parametric hand model.
//!
//! Sixteen kinematic joints (wrist plus three per finger) drive a mesh made of
//! an icosphere palm and helical finger strips through linear blend skinning.
//! The 21 output joints add one tip per finger.
//!
//! Kinematic order: 0 wrist, thumb 1-3, index 4-6, middle 7-9, ring 10-12,
//! little 13-15. Output joint order: 0 wrist, thumb 1-4, index 5-8,
//! middle 9-12, ring 13-16, little 17-20, each finger ending in its tip.
//! Joint 9 (the middle MCP) sits at the origin of the template and is the
//! anchor of every posed output.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::tensor::{Tape, Tensor, Var};

pub const N_KIN: usize = 16;
pub const N_JOINTS: usize = 21;
pub const N_SHAPE: usize = 10;
pub const ROOT_JOINT: usize = 9;
pub const DEFAULT_VERTICES: usize = 77;
/// Vertex count giving the same number of query points as the full-size model.
pub const FULL_VERTICES: usize = 778;

/// Parent of each kinematic joint.
pub const KIN_PARENTS: [Option<usize>; N_KIN] = [
    None,
    Some(0),
    Some(1),
    Some(2),
    Some(0),
    Some(4),
    Some(5),
    Some(0),
    Some(7),
    Some(8),
    Some(0),
    Some(10),
    Some(11),
    Some(0),
    Some(13),
    Some(14),
];

/// Kinematic joint whose transform moves each output joint.
pub fn driving_kin_joint(j: usize) -> usize {
    if j == 0 {
        return 0;
    }
    let (finger, k) = ((j - 1) / 4, (j - 1) % 4);
    1 + 3 * finger + k.min(2)
}

/// Output joint index of a kinematic joint.
pub fn output_joint_of_kin(k: usize) -> usize {
    if k == 0 {
        0
    } else {
        let (finger, i) = ((k - 1) / 3, (k - 1) % 3);
        1 + 4 * finger + i
    }
}

/// Zero-pose, mean-shape template.
#[derive(Clone, Debug, PartialEq)]
pub struct HandTemplate {
    pub vertices: Vec<Vec3>,
    pub joints: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub parents: [Option<usize>; N_KIN],
    pub root_index: usize,
}

impl HandTemplate {
    /// Vertices followed by joints, `[n_vertices + 21, 3]`.
    pub fn points(&self) -> Vec<Vec3> {
        self.vertices.iter().chain(&self.joints).copied().collect()
    }
}

/// Per-joint axis-angle box constraints.
#[derive(Clone, Debug, PartialEq)]
pub struct JointLimits {
    pub lo: [[f64; 3]; N_KIN],
    pub hi: [[f64; 3]; N_KIN],
}

impl Default for JointLimits {
    /// Flexion (x) in `[-0.2, 1.8]`, the other two axes in `[-0.4, 0.4]`;
    /// the global orientation of joint 0 is unconstrained.
    fn default() -> Self {
        let mut lo = [[-0.2, -0.4, -0.4]; N_KIN];
        let mut hi = [[1.8, 0.4, 0.4]; N_KIN];
        lo[0] = [f64::NEG_INFINITY; 3];
        hi[0] = [f64::INFINITY; 3];
        Self { lo, hi }
    }
}

impl JointLimits {
    pub fn contains(&self, theta: &Tensor) -> bool {
        (0..N_KIN).all(|k| (0..3).all(|a| {
            let v = theta.get(&[k, a]);
            v >= self.lo[k][a] && v <= self.hi[k][a]
        }))
    }
}

/// Template, shape blend directions, skinning weights and joint limits.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyHand {
    pub template: HandTemplate,
    /// `[10, (n_vertices + 21) * 3]`, zero-mean over vertices.
    pub shape_basis: Tensor,
    /// `[n_vertices + 21, 16]`; joint rows are one-hot on their driving joint.
    pub skin_weights: Tensor,
    pub joint_limits: JointLimits,
}

const COORD_GRID: f64 = (1u64 << 30) as f64;
const WEIGHT_GRID: f64 = 1024.0;

fn snap(v: Vec3) -> Vec3 {
    v.map(|x| (x * COORD_GRID).round() / COORD_GRID)
}

struct Finger {
    /// Kinematic joints from base to last.
    kin: [usize; 3],
    /// Joint positions base, mid, last, tip.
    chain: [Vec3; 4],
    radius: f64,
}

fn fingers() -> Vec<Finger> {
    let along = |base: Vec3, dir: Vec3, lens: [f64; 3]| -> [Vec3; 4] {
        let d = dir.normalize();
        let p1 = base + d * lens[0];
        let p2 = p1 + d * lens[1];
        [base, p1, p2, p2 + d * lens[2]]
    };
    let y = Vec3::y();
    vec![
        Finger {
            kin: [1, 2, 3],
            chain: along(Vec3::new(-0.03, -0.065, 0.01), Vec3::new(-0.7, 0.7, 0.15), [0.035, 0.032, 0.028]),
            radius: 0.009,
        },
        Finger {
            kin: [4, 5, 6],
            chain: along(Vec3::new(-0.022, -0.005, 0.0), y, [0.04, 0.025, 0.02]),
            radius: 0.008,
        },
        Finger {
            kin: [7, 8, 9],
            chain: along(Vec3::zeros(), y, [0.045, 0.028, 0.022]),
            radius: 0.008,
        },
        Finger {
            kin: [10, 11, 12],
            chain: along(Vec3::new(0.02, -0.005, 0.0), y, [0.042, 0.026, 0.021]),
            radius: 0.0075,
        },
        Finger {
            kin: [13, 14, 15],
            chain: along(Vec3::new(0.038, -0.015, 0.0), y, [0.032, 0.02, 0.018]),
            radius: 0.007,
        },
    ]
}

const WRIST: [f64; 3] = [0.0, -0.09, 0.0];

/// Unit icosphere with `subdivisions` rounds of midpoint splitting.
fn icosphere(subdivisions: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut mid = |a: usize, b: usize, verts: &mut Vec<Vec3>| -> usize {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) / 2.0).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = mid(a, b, &mut verts);
            let bc = mid(b, c, &mut verts);
            let ca = mid(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    (verts, faces)
}

/// Position along a finger at arc-length fraction `t`, with the bone index it falls on
/// and the fraction along that bone.
fn along_finger(f: &Finger, t: f64) -> (Vec3, usize, f64) {
    let lens: Vec<f64> = (0..3).map(|b| (f.chain[b + 1] - f.chain[b]).norm()).collect();
    let total: f64 = lens.iter().sum();
    let mut s = t * total;
    for b in 0..3 {
        if s <= lens[b] || b == 2 {
            let frac = (s / lens[b]).min(1.0);
            return (f.chain[b] + (f.chain[b + 1] - f.chain[b]) * frac, b, frac);
        }
        s -= lens[b];
    }
    unreachable!()
}

impl ToyHand {
    pub fn new(n_vertices: usize) -> Result<Self> {
        if n_vertices < 5 {
            return Err(Error::InvalidInput(format!(
                "toy hand needs at least 5 vertices (one per finger), got {n_vertices}"
            )));
        }
        let fingers = fingers();
        let wrist = Vec3::from(WRIST);

        let mut joints = vec![Vec3::zeros(); N_JOINTS];
        joints[0] = wrist;
        for (fi, f) in fingers.iter().enumerate() {
            for k in 0..4 {
                joints[1 + 4 * fi + k] = f.chain[k];
            }
        }

        let subdiv = [(162, 2), (42, 1), (12, 0)]
            .into_iter()
            .find(|&(count, _)| count <= n_vertices / 4);
        let mut vertices = Vec::with_capacity(n_vertices);
        let mut faces = Vec::new();
        let mut weights: Vec<[f64; N_KIN]> = Vec::with_capacity(n_vertices + N_JOINTS);
        if let Some((_, s)) = subdiv {
            let (sphere, sfaces) = icosphere(s);
            let center = Vec3::new(0.008, -0.045, 0.0);
            let radii = Vec3::new(0.045, 0.045, 0.012);
            for p in sphere {
                vertices.push(center + p.component_mul(&radii));
                let mut w = [0.0; N_KIN];
                w[0] = 1.0;
                weights.push(w);
            }
            faces = sfaces;
        }
        let remaining = n_vertices - vertices.len();
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        for (fi, f) in fingers.iter().enumerate() {
            let count = remaining / 5 + usize::from(fi < remaining % 5);
            let dir = (f.chain[3] - f.chain[0]).normalize();
            let e1 = if dir.x.abs() < 0.9 { Vec3::x() } else { Vec3::z() };
            let e1 = (e1 - dir * dir.dot(&e1)).normalize();
            let e2 = dir.cross(&e1);
            let start = vertices.len();
            for i in 0..count {
                let t = (i as f64 + 0.5) / count as f64;
                let (axis_pt, bone, frac) = along_finger(f, t);
                let phi = golden * i as f64;
                vertices.push(axis_pt + (e1 * phi.cos() + e2 * phi.sin()) * f.radius);
                let joint = f.kin[bone];
                let parent = KIN_PARENTS[joint].expect("finger joints have parents");
                let mut w = [0.0; N_KIN];
                let blend = if frac < 0.25 { 0.5 * (1.0 - frac / 0.25) } else { 0.0 };
                let wp = (blend * WEIGHT_GRID).round() / WEIGHT_GRID;
                w[parent] = wp;
                w[joint] = 1.0 - wp;
                weights.push(w);
            }
            for i in start..vertices.len().saturating_sub(2) {
                faces.push([i, i + 1, i + 2]);
            }
        }
        for j in 0..N_JOINTS {
            let mut w = [0.0; N_KIN];
            w[driving_kin_joint(j)] = 1.0;
            weights.push(w);
        }

        let vertices: Vec<Vec3> = vertices.into_iter().map(snap).collect();
        let joints: Vec<Vec3> = joints.into_iter().map(snap).collect();
        let template = HandTemplate {
            vertices,
            joints,
            faces,
            parents: KIN_PARENTS,
            root_index: ROOT_JOINT,
        };
        let shape_basis = shape_directions(&template);
        let n_points = n_vertices + N_JOINTS;
        let skin_weights = Tensor::new(&[n_points, N_KIN], weights.concat())?;
        Ok(Self {
            template,
            shape_basis,
            skin_weights,
            joint_limits: JointLimits::default(),
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.template.vertices.len()
    }

    pub fn n_points(&self) -> usize {
        self.n_vertices() + N_JOINTS
    }

    pub fn rest_points(&self) -> Tensor {
        crate::geometry::points_to_tensor(&self.template.points())
    }

    /// Differentiable skinning: returns posed `[n_vertices + 21, 3]` points
    /// (vertices, then joints) anchored so that joint 9 lands on `root`.
    ///
    /// `theta: [16, 3]` axis-angle per kinematic joint (row 0 is the global
    /// orientation), `beta: [10]`, `root: [3]`.
    pub fn lbs<'t>(&self, theta: Var<'t>, beta: Var<'t>, root: Var<'t>) -> Result<Var<'t>> {
        let tape = theta.tape();
        let np = self.n_points();
        let nv = self.n_vertices();
        if theta.shape() != [N_KIN, 3] || beta.shape() != [N_SHAPE] || root.shape() != [3] {
            return Err(Error::InvalidInput(format!(
                "lbs expects theta [16,3], beta [10], root [3]; got {:?}, {:?}, {:?}",
                theta.shape(),
                beta.shape(),
                root.shape()
            )));
        }
        let offsets = beta
            .reshape(&[1, N_SHAPE])?
            .matmul(tape.constant(self.shape_basis.clone()))?
            .reshape(&[np, 3])?;
        let rest = tape.constant(self.rest_points()).add(offsets)?;
        let kin_rows: Vec<usize> = (0..N_KIN).map(|k| nv + output_joint_of_kin(k)).collect();
        let j_kin = rest.index_select(0, &kin_rows)?;

        let rots = rodrigues(theta)?;
        let mut world_r: Vec<Var<'t>> = Vec::with_capacity(N_KIN);
        let mut offs: Vec<Var<'t>> = Vec::with_capacity(N_KIN);
        for k in 0..N_KIN {
            let r_k = rots.index_select(0, &[k])?.reshape(&[3, 3])?;
            let j_k = j_kin.index_select(0, &[k])?;
            let (rw, o) = match KIN_PARENTS[k] {
                None => (r_k, j_k.sub(j_k.matmul(r_k.transpose()?)?)?),
                Some(p) => {
                    let rw = world_r[p].matmul(r_k)?;
                    let diff = world_r[p].sub(rw)?;
                    (rw, offs[p].add(j_k.matmul(diff.transpose()?)?)?)
                }
            };
            world_r.push(rw);
            offs.push(o);
        }
        let rt: Vec<Var<'t>> = world_r
            .iter()
            .map(|r| r.transpose()?.reshape(&[1, 3, 3]))
            .collect::<Result<_>>()?;
        let rt = tape.concat(&rt, 0)?;
        let o = tape.concat(&offs, 0)?.reshape(&[N_KIN, 1, 3])?;
        let per_bone = rest.reshape(&[1, np, 3])?.matmul(rt)?.add(o)?;
        let w = tape.constant(self.skin_weights.reshape(&[np, 1, N_KIN])?);
        let posed = w.matmul(per_bone.permute(&[1, 0, 2])?)?.reshape(&[np, 3])?;
        let anchor = posed.index_select(0, &[nv + ROOT_JOINT])?;
        posed.sub(anchor)?.add(root.reshape(&[1, 3])?)
    }

    /// Plain-value skinning: returns `(vertices, joints)`.
    pub fn forward(&self, theta: &Tensor, beta: &Tensor, root: &Vec3) -> Result<(Vec<Vec3>, Vec<Vec3>)> {
        let tape = Tape::new();
        let out = self.lbs(
            tape.constant(theta.clone()),
            tape.constant(beta.clone()),
            tape.constant(Tensor::new(&[3], vec![root.x, root.y, root.z])?),
        )?;
        let pts = crate::geometry::points_from_tensor(&out.value())?;
        let nv = self.n_vertices();
        Ok((pts[..nv].to_vec(), pts[nv..].to_vec()))
    }
}

/// Smooth, vertex-mean-free displacement fields over every template point.
fn shape_directions(t: &HandTemplate) -> Tensor {
    let pts = t.points();
    let nv = t.vertices.len();
    let center = t.vertices.iter().sum::<Vec3>() / nv as f64;
    let fields: [Box<dyn Fn(&Vec3) -> Vec3>; N_SHAPE] = [
        Box::new(move |p| Vec3::new(0.0, 0.1 * (p.y - center.y), 0.0)),
        Box::new(move |p| Vec3::new(0.1 * (p.x - center.x), 0.0, 0.0)),
        Box::new(move |p| Vec3::new(0.0, 0.0, 0.15 * (p.z - center.z))),
        Box::new(|p| Vec3::new(0.004 * (20.0 * p.y).sin(), 0.0, 0.0)),
        Box::new(|p| Vec3::new(0.0, 0.004 * (25.0 * p.x).sin(), 0.0)),
        Box::new(|p| Vec3::new(0.0, 0.0, 0.003 * (18.0 * p.y + 0.5).cos())),
        Box::new(|p| Vec3::new(0.003 * (22.0 * p.x + 1.0).cos(), 0.0, 0.0)),
        Box::new(|p| Vec3::new(0.0, 0.003 * (15.0 * (p.x + p.y)).sin(), 0.0)),
        Box::new(|p| Vec3::new(0.0, 0.0, 0.003 * (30.0 * p.x).sin())),
        Box::new(|p| Vec3::new(0.002 * (12.0 * p.y).cos(), 0.002 * (12.0 * p.x).sin(), 0.0)),
    ];
    let mut data = Vec::with_capacity(N_SHAPE * pts.len() * 3);
    for f in &fields {
        let disp: Vec<Vec3> = pts.iter().map(|p| f(p)).collect();
        let mean = disp[..nv].iter().sum::<Vec3>() / nv as f64;
        data.extend(disp.iter().flat_map(|d| {
            let d = d - mean;
            [d.x, d.y, d.z]
        }));
    }
    Tensor::new(&[N_SHAPE, pts.len() * 3], data).expect("sized above")
}

/// Rodrigues' formula on rows of a `[K, 3]` axis-angle variable; returns `[K, 3, 3]`.
///
/// The angle is `sqrt(|θ|² + ε)`, which keeps the map smooth at zero and
/// yields the identity exactly there.
pub fn rodrigues<'t>(theta: Var<'t>) -> Result<Var<'t>> {
    const EPS: f64 = 1e-16;
    let tape = theta.tape();
    let k = theta.shape()[0];
    let angle = theta.square().sum_axis(1, true)?.add_scalar(EPS).sqrt();
    let axis = theta.div(angle)?;
    // skew(a) flattened row-major: [0,-a2,a1, a2,0,-a0, -a1,a0,0].
    let mut g = vec![0.0; 27];
    for &(c, e, s) in &[(2, 1, -1.0), (1, 2, 1.0), (2, 3, 1.0), (0, 5, -1.0), (1, 6, -1.0), (0, 7, 1.0)] {
        g[c * 9 + e] = s;
    }
    let skew = axis.matmul(tape.constant(Tensor::new(&[3, 9], g)?))?.reshape(&[k, 3, 3])?;
    let skew2 = skew.matmul(skew)?;
    let sin = angle.sin().reshape(&[k, 1, 1])?;
    let one_minus_cos = angle.cos().neg().add_scalar(1.0).reshape(&[k, 1, 1])?;
    tape.constant(Tensor::eye(3))
        .add(sin.mul(skew)?)?
        .add(one_minus_cos.mul(skew2)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::axis_angle;
    use crate::tensor::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_pose() -> (Tensor, Tensor) {
        (Tensor::zeros(&[N_KIN, 3]), Tensor::zeros(&[N_SHAPE]))
    }

    #[test]
    fn vertex_counts_and_faces() {
        for (n, palm) in [(5, 0), (47, 0), (77, 12), (200, 42), (778, 162)] {
            let h = ToyHand::new(n).unwrap();
            assert_eq!(h.n_vertices(), n);
            assert_eq!(h.n_points(), n + 21);
            assert!(h.template.faces.iter().flatten().all(|&i| i < n));
            let palm_rows = (0..n).filter(|&v| h.skin_weights.get(&[v, 0]) == 1.0).count();
            assert!(palm_rows >= palm);
        }
        assert_eq!(ToyHand::new(FULL_VERTICES).unwrap().n_points(), 799);
        assert_eq!(ToyHand::new(DEFAULT_VERTICES).unwrap().n_points(), 98);
    }

    #[test]
    fn template_invariants() {
        let h = ToyHand::new(77).unwrap();
        assert_eq!(h.template.joints[ROOT_JOINT], Vec3::zeros());
        for r in 0..h.n_points() {
            let s: f64 = (0..N_KIN).map(|k| h.skin_weights.get(&[r, k])).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        for b in 0..N_SHAPE {
            let mean: Vec3 = (0..77)
                .map(|v| {
                    let i = b * h.n_points() * 3 + v * 3;
                    let d = h.shape_basis.data();
                    Vec3::new(d[i], d[i + 1], d[i + 2])
                })
                .sum::<Vec3>()
                / 77.0;
            assert!(mean.norm() < 1e-15);
        }
    }

    #[test]
    fn rest_pose_is_template_exactly() {
        let h = ToyHand::new(77).unwrap();
        let (theta, beta) = zero_pose();
        let (v, j) = h.forward(&theta, &beta, &Vec3::zeros()).unwrap();
        assert_eq!(v, h.template.vertices);
        assert_eq!(j, h.template.joints);
    }

    #[test]
    fn root_translation_equivariance() {
        let h = ToyHand::new(77).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta = Tensor::from_fn(&[N_KIN, 3], |_| rng.random_range(-0.3..0.3));
        let beta = Tensor::from_fn(&[N_SHAPE], |_| rng.random_range(-1.0..1.0));
        let (v0, j0) = h.forward(&theta, &beta, &Vec3::zeros()).unwrap();
        let t = Vec3::new(0.1, 0.0, 0.0);
        let (v1, j1) = h.forward(&theta, &beta, &t).unwrap();
        for (a, b) in v0.iter().chain(&j0).zip(v1.iter().chain(&j1)) {
            assert!((b - a - t).norm() < 1e-15);
        }
        assert!((j1[ROOT_JOINT] - t).norm() == 0.0);
    }

    #[test]
    fn single_joint_bend_is_rigid_about_joint() {
        let h = ToyHand::new(77).unwrap();
        let (mut theta, beta) = zero_pose();
        // Index PIP is kinematic joint 5, output joint 6.
        theta.data_mut()[5 * 3] = std::f64::consts::FRAC_PI_2;
        let (v, j) = h.forward(&theta, &beta, &Vec3::zeros()).unwrap();
        let pivot = h.template.joints[6];
        let r = axis_angle(&Vec3::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0));
        let rigid = |p: &Vec3| r * (p - pivot) + pivot;
        for jj in [6, 7, 8] {
            assert!((j[jj] - rigid(&h.template.joints[jj])).norm() < 1e-12);
        }
        let mut moved = 0;
        for (i, p) in h.template.vertices.iter().enumerate() {
            let w5 = h.skin_weights.get(&[i, 5]);
            let w6 = h.skin_weights.get(&[i, 6]);
            if w5 + w6 == 1.0 {
                assert!((v[i] - rigid(p)).norm() < 1e-12);
                moved += 1;
            } else if w5 == 0.0 && w6 == 0.0 {
                assert!((v[i] - p).norm() < 1e-12);
            }
        }
        assert!(moved > 0);
        // Other fingers are untouched.
        for jj in [0, 1, 4, 5, 9, 12, 20] {
            assert!((j[jj] - h.template.joints[jj]).norm() < 1e-12);
        }
    }

    #[test]
    fn rodrigues_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta = Tensor::from_fn(&[5, 3], |_| rng.random_range(-2.0..2.0));
        let tape = Tape::new();
        let r = rodrigues(tape.constant(theta.clone())).unwrap().value();
        for k in 0..5 {
            let want = axis_angle(&Vec3::new(theta.get(&[k, 0]), theta.get(&[k, 1]), theta.get(&[k, 2])));
            for a in 0..3 {
                for b in 0..3 {
                    assert!((r.get(&[k, a, b]) - want[(a, b)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn lbs_gradcheck() {
        fn f<'t>(t: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
            let hand = ToyHand::new(12).unwrap();
            let out = hand.lbs(v[0], v[1], v[2])?;
            let w = t.constant(Tensor::from_fn(&out.shape(), |i| (i as f64 * 0.61).sin()));
            Ok(out.mul(w)?.sum().scale(10.0))
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let inputs = vec![
                Tensor::from_fn(&[N_KIN, 3], |_| rng.random_range(-0.8..0.8)),
                Tensor::from_fn(&[N_SHAPE], |_| rng.random_range(-1.0..1.0)),
                Tensor::from_fn(&[3], |_| rng.random_range(-0.1..0.1)),
            ];
            let err = gradcheck(f, &inputs, 1e-5).unwrap();
            assert!(err < 1e-4, "{err:e}");
        }
    }

    #[test]
    fn limits_default() {
        let l = JointLimits::default();
        let mut theta = Tensor::zeros(&[N_KIN, 3]);
        theta.data_mut()[0] = 5.0;
        assert!(l.contains(&theta));
        theta.data_mut()[3] = 1.9;
        assert!(!l.contains(&theta));
    }
}
