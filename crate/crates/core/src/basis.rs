//! Basis points: a fixed random point cloud placed at the root, carrying
//! per-view projected features fused by projective aggregation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::faults::{self, Fault};
use crate::geometry::{Rig, Vec3};
use crate::root_stage::{pixel_to_grid, FeatureGrid};
use crate::tensor::{Tape, Tensor, Var};

/// Coordinates are snapped to multiples of this (meters) so that placing the
/// basis at a root and subtracting the root again is exact.
pub const LATTICE: f64 = 1.0 / (1u64 << 40) as f64;

pub fn snap(x: f64) -> f64 {
    (x / LATTICE).round() * LATTICE
}

pub fn snap_point(p: &Vec3) -> Vec3 {
    Vec3::new(snap(p.x), snap(p.y), snap(p.z))
}

/// Root-relative basis point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisPointSet {
    pub points: Vec<Vec3>,
    pub seed: u64,
    pub diameter: f64,
}

/// Gaussian samples (σ = diameter/6) rejected until strictly inside the sphere.
pub fn generate_bps(m: usize, diameter: f64, seed: u64) -> Result<BasisPointSet> {
    if m == 0 || !(diameter > 0.0) {
        return Err(Error::InvalidInput(format!(
            "basis needs M >= 1 and diameter > 0, got {m} and {diameter}"
        )));
    }
    let radius = diameter / 2.0;
    let normal = Normal::new(0.0, diameter / 6.0).expect("positive sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(m);
    while points.len() < m {
        let p = snap_point(&Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)));
        if p.norm() < radius {
            points.push(p);
        }
    }
    Ok(BasisPointSet { points, seed, diameter })
}

impl BasisPointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Writes `x,y,z` rows in meters.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,z\n");
        for p in &self.points {
            out.push_str(&format!("{:?},{:?},{:?}\n", p.x, p.y, p.z));
        }
        out
    }
}

/// Basis points translated to an absolute root.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacedBasis {
    pub points: Vec<Vec3>,
    /// The root actually used, snapped to [`LATTICE`].
    pub root: Vec3,
}

impl PlacedBasis {
    pub fn place(bps: &BasisPointSet, root: &Vec3) -> Self {
        let root = snap_point(root);
        Self {
            points: bps.points.iter().map(|p| p + root).collect(),
            root,
        }
    }
}

/// 2D sine positional encoding of a pixel.
///
/// Each axis is scaled to `[0, 2π)` by the image extent and gets `d/2`
/// channels of interleaved `sin, cos` at frequencies `temperature^(-2k/(d/2))`;
/// the `u` block comes first.
pub fn sine_pe(u: f64, v: f64, width: f64, height: f64, d: usize, temperature: f64) -> Result<Vec<f64>> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::InvalidInput(format!("positional encoding size {d} is not divisible by 4")));
    }
    let half = d / 2;
    let mut out = Vec::with_capacity(d);
    for (c, extent) in [(u, width), (v, height)] {
        let phase = c / extent * std::f64::consts::TAU;
        for k in 0..half / 2 {
            let freq = temperature.powf((2 * k) as f64 / half as f64);
            out.push((phase / freq).sin());
            out.push((phase / freq).cos());
        }
    }
    Ok(out)
}

pub const PE_TEMPERATURE: f64 = 10000.0;

/// Features of every basis point as seen from one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewFeatures {
    /// `[M, d]`: bilinear grid sample plus positional encoding, zero where not visible.
    pub features: Tensor,
    /// True where the point projects in front of the camera and inside the grid.
    pub visible: Vec<bool>,
}

/// Projects the placed basis into every view and samples its feature grid.
pub fn sample_projected_features(
    placed: &PlacedBasis,
    rig: &Rig,
    grids: &[FeatureGrid],
) -> Result<Vec<ViewFeatures>> {
    if grids.len() != rig.len() {
        return Err(Error::InvalidInput(format!(
            "{} feature grids for {} cameras",
            grids.len(),
            rig.len()
        )));
    }
    let m = placed.points.len();
    rig.cameras
        .iter()
        .zip(grids)
        .map(|(cam, fg)| {
            let d = fg.channels();
            let s = fg.stride;
            let mut coords = Vec::with_capacity(m * 2);
            let mut pixels = Vec::with_capacity(m);
            let mut front = Vec::with_capacity(m);
            for p in &placed.points {
                let (pix, z) = cam.project_point(p);
                front.push(z > 0.0);
                pixels.push(pix);
                coords.push(pixel_to_grid(pix.x, s));
                coords.push(pixel_to_grid(pix.y, s));
            }
            let sample = fg.grid.bilinear_sample(&Tensor::new(&[m, 2], coords)?)?;
            let mut data = sample.values.into_data();
            let mut visible = Vec::with_capacity(m);
            for i in 0..m {
                let row = &mut data[i * d..(i + 1) * d];
                let ok = front[i] && sample.in_bounds[i];
                visible.push(ok);
                if ok {
                    let pe = sine_pe(pixels[i].x, pixels[i].y, cam.width as f64, cam.height as f64, d, PE_TEMPERATURE)?;
                    for (x, e) in row.iter_mut().zip(pe) {
                        *x += e;
                    }
                } else {
                    row.fill(0.0);
                }
            }
            Ok(ViewFeatures {
                features: Tensor::new(&[m, d], data)?,
                visible,
            })
        })
        .collect()
}

/// Parameter names of the aggregation layers.
pub const THETA: &str = "agg.theta";
pub const PHI: &str = "agg.phi";

/// Fuses per-view features into basis features.
///
/// With one view the target features pass through unchanged. Otherwise
/// `F = f₁ + (1/N)·φ(Σⱼ (θf₁·θfⱼ) θfⱼ)` per point over visible sources, where
/// `theta: [d, d/2]` and `phi: [d/2, d]` are bias-free linear maps.
pub fn projective_aggregation<'t>(
    views: &[Var<'t>],
    visible: &[Vec<bool>],
    theta: Var<'t>,
    phi: Var<'t>,
) -> Result<Var<'t>> {
    let n = views.len();
    if n == 0 || visible.len() != n {
        return Err(Error::InvalidInput(format!(
            "aggregation needs one mask per view, got {} views and {} masks",
            n,
            visible.len()
        )));
    }
    let tape = views[0].tape();
    let f1 = if faults::active(Fault::AggregationSignFlip) {
        views[0].neg()
    } else {
        views[0]
    };
    if n == 1 {
        return Ok(f1);
    }
    let shape = views[0].shape();
    let (m, d) = (shape[0], shape[1]);
    let (ts, ps) = (theta.shape(), phi.shape());
    if ts != [d, d / 2] || ps != [d / 2, d] {
        return Err(Error::shape("projective_aggregation", &ts, &ps));
    }
    let t1 = views[0].matmul(theta)?;
    let mut acc: Option<Var<'t>> = None;
    for (fj, mask) in views[1..].iter().zip(&visible[1..]) {
        if mask.len() != m {
            return Err(Error::shape("projective_aggregation mask", &[mask.len()], &[m]));
        }
        let tj = fj.matmul(theta)?;
        let w = t1.mul(tj)?.sum_axis(1, true)?;
        let keep = tape.constant(Tensor::from_fn(&[m, 1], |i| if mask[i] { 1.0 } else { 0.0 }));
        let term = w.mul(keep)?.mul(tj)?;
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    let update = acc.expect("n > 1").matmul(phi)?.scale(1.0 / n as f64);
    f1.add(update)
}

/// Convenience wrapper for inference on plain tensors.
pub fn aggregate_frozen(views: &[ViewFeatures], theta: &Tensor, phi: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let vars: Vec<Var> = views.iter().map(|v| tape.constant(v.features.clone())).collect();
    let masks: Vec<Vec<bool>> = views.iter().map(|v| v.visible.clone()).collect();
    let out = projective_aggregation(&vars, &masks, tape.constant(theta.clone()), tape.constant(phi.clone()))?;
    Ok(out.value().as_ref().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::faults::with_fault;
    use crate::geometry::{look_at, Camera, Intrinsics, Mat4};
    use crate::tensor::gradcheck;
    use rand::Rng;

    #[test]
    fn bps_inside_sphere_and_deterministic() {
        let a = generate_bps(4096, 0.2, 3).unwrap();
        assert!(a.points.iter().all(|p| p.norm() < 0.1));
        assert_eq!(a, generate_bps(4096, 0.2, 3).unwrap());
        assert_ne!(a, generate_bps(4096, 0.2, 4).unwrap());
    }

    /// Radial CDF of an isotropic 3D Gaussian, by Simpson integration of r² e^{-r²/2σ²}.
    fn gaussian_radial_mass(r: f64, sigma: f64) -> f64 {
        let n = 2000;
        let h = r / n as f64;
        let f = |x: f64| x * x * (-x * x / (2.0 * sigma * sigma)).exp();
        let mut s = f(0.0) + f(r);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn radial_density_is_gaussian_not_uniform() {
        let bps = generate_bps(100_000, 0.2, 7).unwrap();
        let radius = 0.1;
        let sigma = 0.2 / 6.0;
        let bins = 10;
        let mut counts = vec![0.0; bins];
        for p in &bps.points {
            counts[((p.norm() / radius * bins as f64) as usize).min(bins - 1)] += 1.0;
        }
        let total = bps.len() as f64;
        let z = gaussian_radial_mass(radius, sigma);
        let chi2 = |expected: &dyn Fn(usize) -> f64| {
            (0..bins).map(|b| (counts[b] - expected(b)).powi(2) / expected(b)).sum::<f64>()
        };
        let edge = |b: usize| b as f64 * radius / bins as f64;
        let gauss = |b: usize| total * (gaussian_radial_mass(edge(b + 1), sigma) - gaussian_radial_mass(edge(b), sigma)) / z;
        let uniform = |b: usize| total * ((edge(b + 1) / radius).powi(3) - (edge(b) / radius).powi(3));
        // 9 degrees of freedom: the 0.1% critical value is 27.88.
        assert!(chi2(&gauss) < 27.88, "gaussian chi2 {}", chi2(&gauss));
        assert!(chi2(&uniform) > 27.88);
        // Density per unit volume falls off with radius.
        let density = |b: usize| counts[b] / uniform(b);
        assert!(density(0) > density(bins / 2) && density(bins / 2) > density(bins - 1));
    }

    #[test]
    fn placement_is_exact() {
        let bps = generate_bps(512, 0.2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let r = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let placed = PlacedBasis::place(&bps, &r);
            for (p, rel) in placed.points.iter().zip(&bps.points) {
                assert_eq!(p - placed.root, *rel);
            }
            assert!((placed.root - r).norm() < 1e-12);
        }
    }

    #[test]
    fn sine_pe_examples() {
        let pe = sine_pe(0.0, 0.0, 256.0, 256.0, 16, PE_TEMPERATURE).unwrap();
        for (i, v) in pe.iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
        let a = sine_pe(0.0, 5.0, 256.0, 256.0, 16, PE_TEMPERATURE).unwrap();
        let b = sine_pe(1.0, 5.0, 256.0, 256.0, 16, PE_TEMPERATURE).unwrap();
        assert!((b[0] - a[0] - (std::f64::consts::TAU / 256.0).sin()).abs() < 1e-15);
        assert_eq!(a, sine_pe(0.0, 5.0, 256.0, 256.0, 16, PE_TEMPERATURE).unwrap());
        assert!(sine_pe(0.0, 0.0, 1.0, 1.0, 6, PE_TEMPERATURE).is_err());
    }

    fn camera(pose: Mat4) -> Camera {
        let intr = Intrinsics {
            fx: 300.0,
            fy: 300.0,
            cx: 127.5,
            cy: 127.5,
        };
        Camera::new(intr, pose, 256, 256).unwrap()
    }

    #[test]
    fn sampling_on_lattice_and_behind_camera() {
        let cam = camera(look_at(&Vec3::new(0.0, 0.0, -0.6), &Vec3::zeros(), &Vec3::y()).unwrap());
        let rig = Rig::new(vec![cam.clone()]).unwrap();
        let d = 8;
        let grid = FeatureGrid {
            grid: Tensor::from_fn(&[32, 32, d], |k| (k % 97) as f64 * 0.01),
            stride: 8,
        };
        // A point projecting to the center of grid cell (row 12, col 20), one behind the camera.
        let pix = (20.5 * 8.0 - 0.5, 12.5 * 8.0 - 0.5);
        let z = 0.6;
        let cam_pt = Vec3::new((pix.0 - 127.5) * z / 300.0, (pix.1 - 127.5) * z / 300.0, z);
        let inv = crate::geometry::rigid_inverse(&cam.pose);
        let world = crate::geometry::transform_point(&inv, &cam_pt);
        let behind = Vec3::new(0.0, 0.0, -1.0);
        let placed = PlacedBasis {
            points: vec![world, behind],
            root: Vec3::zeros(),
        };
        let v = sample_projected_features(&placed, &rig, &[grid.clone()]).unwrap();
        let pe = sine_pe(pix.0, pix.1, 256.0, 256.0, d, PE_TEMPERATURE).unwrap();
        for c in 0..d {
            let want = grid.grid.get(&[12, 20, c]) + pe[c];
            assert!((v[0].features.get(&[0, c]) - want).abs() < 1e-9);
            assert_eq!(v[0].features.get(&[1, c]), 0.0);
        }
        assert_eq!(v[0].visible, vec![true, false]);
    }

    #[test]
    fn same_pixel_same_encoding() {
        let cam = camera(Mat4::identity());
        let rig = Rig::new(vec![cam]).unwrap();
        let grid = FeatureGrid {
            grid: Tensor::zeros(&[32, 32, 8]),
            stride: 8,
        };
        let p = Vec3::new(0.01, -0.02, 0.5);
        let placed = PlacedBasis {
            points: vec![p, p * 1.7],
            root: Vec3::zeros(),
        };
        let v = sample_projected_features(&placed, &rig, &[grid]).unwrap();
        for c in 0..8 {
            assert!((v[0].features.get(&[0, c]) - v[0].features.get(&[1, c])).abs() < 1e-12);
        }
    }

    fn random_views(rng: &mut ChaCha8Rng, n: usize, m: usize, d: usize) -> Vec<Tensor> {
        (0..n).map(|_| Tensor::from_fn(&[m, d], |_| rng.random_range(-1.0..1.0))).collect()
    }

    fn run(views: &[Tensor], masks: &[Vec<bool>], theta: &Tensor, phi: &Tensor) -> Tensor {
        let tape = Tape::new();
        let vars: Vec<Var> = views.iter().map(|v| tape.constant(v.clone())).collect();
        let out = projective_aggregation(&vars, masks, tape.constant(theta.clone()), tape.constant(phi.clone())).unwrap();
        out.value().as_ref().clone()
    }

    #[test]
    fn aggregation_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, d) = (7, 8);
        let theta = Tensor::from_fn(&[d, d / 2], |_| rng.random_range(-0.5..0.5));
        let phi = Tensor::from_fn(&[d / 2, d], |_| rng.random_range(-0.5..0.5));
        let all = |n: usize| vec![vec![true; m]; n];

        let one = random_views(&mut rng, 1, m, d);
        assert_eq!(run(&one, &all(1), &theta, &phi), one[0]);

        let mut zero_src = random_views(&mut rng, 4, m, d);
        for v in &mut zero_src[1..] {
            *v = Tensor::zeros(&[m, d]);
        }
        assert_eq!(run(&zero_src, &all(4), &theta, &phi), zero_src[0]);

        let views = random_views(&mut rng, 5, m, d);
        let base = run(&views, &all(5), &theta, &phi);
        let permuted = vec![views[0].clone(), views[3].clone(), views[1].clone(), views[4].clone(), views[2].clone()];
        assert!(run(&permuted, &all(5), &theta, &phi).max_abs_diff(&base) < 1e-12);

        // Duplicating every source scales the update by 2N/(2N-1).
        let n = 5.0;
        let mut dup = views.clone();
        dup.extend(views[1..].iter().cloned());
        let doubled = run(&dup, &all(9), &theta, &phi);
        let ratio = 2.0 * n / (2.0 * n - 1.0);
        for i in 0..m * d {
            let u = base.data()[i] - views[0].data()[i];
            let u2 = doubled.data()[i] - views[0].data()[i];
            assert!((u2 - ratio * u).abs() < 1e-12);
        }

        // A masked-out source is the same as a missing one.
        let mut masks = all(3);
        masks[2] = vec![false; m];
        let three = random_views(&mut rng, 3, m, d);
        let masked = run(&three, &masks, &theta, &phi);
        let mut without = three.clone();
        without[2] = Tensor::zeros(&[m, d]);
        assert!(masked.max_abs_diff(&run(&without, &all(3), &theta, &phi)) < 1e-15);
    }

    #[test]
    fn sign_flip_fault_breaks_single_view_shortcut() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let theta = Tensor::from_fn(&[4, 2], |_| rng.random_range(-0.5..0.5));
        let phi = Tensor::from_fn(&[2, 4], |_| rng.random_range(-0.5..0.5));
        let one = random_views(&mut rng, 1, 3, 4);
        let masks = vec![vec![true; 3]];
        let flipped = with_fault(Fault::AggregationSignFlip, || run(&one, &masks, &theta, &phi));
        assert_ne!(flipped, one[0]);
        assert_eq!(run(&one, &masks, &theta, &phi), one[0]);
    }

    #[test]
    fn aggregation_gradcheck() {
        fn f<'t>(t: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
            let masks = vec![vec![true, true, false], vec![true, false, true], vec![true; 3]];
            let out = projective_aggregation(&v[..3], &masks, v[3], v[4])?;
            let w = t.constant(Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin()));
            Ok(out.mul(w)?.sum())
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let mut inputs = random_views(&mut rng, 3, 3, 4);
            inputs.push(Tensor::from_fn(&[4, 2], |_| rng.random_range(-1.0..1.0)));
            inputs.push(Tensor::from_fn(&[2, 4], |_| rng.random_range(-1.0..1.0)));
            assert!(gradcheck(f, &inputs, 1e-5).unwrap() < 1e-4);
        }
    }
}
