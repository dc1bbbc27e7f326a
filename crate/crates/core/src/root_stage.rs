//! Stage 1: per-view root heatmaps, soft-argmax and triangulation of the
//! absolute root position. Also hosts the synthetic backbone that stands in
//! for an image CNN.
//!
//! Grid cell `(i, j)` (row, column) covers full-image pixel
//! `((j + 0.5)·s − 0.5, (i + 0.5)·s − 0.5)` for stride `s`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{triangulate_dlt, Camera, Observation, Rig, Vec2, Vec3};
use crate::tensor::{Tape, Tensor, Var};

/// Nonnegative 2D likelihood map at `1/stride` of the image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `[H/s, W/s]`.
    pub grid: Tensor,
    pub stride: usize,
}

/// Per-view feature map at `1/stride` of the image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    /// `[H/s, W/s, C]`.
    pub grid: Tensor,
    pub stride: usize,
}

impl Heatmap {
    pub fn new(grid: Tensor, stride: usize) -> Result<Self> {
        if grid.rank() != 2 || stride == 0 {
            return Err(Error::InvalidInput(format!(
                "heatmap needs a rank-2 grid and positive stride, got {:?} / {stride}",
                grid.shape()
            )));
        }
        if grid.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput("heatmap entries must be finite and nonnegative".into()));
        }
        Ok(Self { grid, stride })
    }

    pub fn rows(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.grid.shape()[1]
    }

    /// Row-major index of the largest entry.
    pub fn argmax(&self) -> (usize, usize) {
        let (mut best, mut at) = (f64::NEG_INFINITY, 0);
        for (k, &v) in self.grid.data().iter().enumerate() {
            if v > best {
                best = v;
                at = k;
            }
        }
        (at / self.cols(), at % self.cols())
    }
}

impl FeatureGrid {
    pub fn channels(&self) -> usize {
        self.grid.shape()[2]
    }
}

/// Full-image pixel coordinate of a (fractional) grid coordinate.
pub fn grid_to_pixel(g: f64, stride: usize) -> f64 {
    (g + 0.5) * stride as f64 - 0.5
}

/// Grid coordinate of a full-image pixel coordinate.
pub fn pixel_to_grid(p: f64, stride: usize) -> f64 {
    (p + 0.5) / stride as f64 - 0.5
}

pub fn normalize_heatmap(h: &Heatmap) -> Result<Heatmap> {
    let total: f64 = h.grid.data().iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("heatmap has no positive mass".into()));
    }
    Ok(Heatmap {
        grid: h.grid.map(|v| v / total),
        stride: h.stride,
    })
}

/// Expected full-image pixel position under the normalized heatmap.
pub fn soft_argmax(h: &Heatmap) -> Result<Vec2> {
    let n = normalize_heatmap(h)?;
    let cols = n.cols();
    let (mut ex, mut ey) = (0.0, 0.0);
    for (k, &w) in n.grid.data().iter().enumerate() {
        ex += w * (k % cols) as f64;
        ey += w * (k / cols) as f64;
    }
    Ok(Vec2::new(grid_to_pixel(ex, h.stride), grid_to_pixel(ey, h.stride)))
}

/// Differentiable soft-argmax of a `[rows, cols]` heatmap variable; returns `[2]` pixels.
pub fn soft_argmax_var<'t>(h: Var<'t>, stride: usize) -> Result<Var<'t>> {
    let shape = h.shape();
    if shape.len() != 2 {
        return Err(Error::shape("soft_argmax_var", &shape, &[0, 0]));
    }
    let (rows, cols) = (shape[0], shape[1]);
    let tape = h.tape();
    let s = stride as f64;
    // Pixel coordinates per cell, stacked as [rows*cols, 2].
    let coords = Tensor::from_fn(&[rows * cols, 2], |k| {
        let cell = k / 2;
        let g = if k % 2 == 0 { cell % cols } else { cell / cols };
        (g as f64 + 0.5) * s - 0.5
    });
    let w = h.div(h.sum())?.reshape(&[1, rows * cols])?;
    w.matmul(tape.constant(coords))?.reshape(&[2])
}

/// Soft-argmax in every view followed by DLT.
pub fn estimate_root(heatmaps: &[Heatmap], rig: &Rig) -> Result<Vec3> {
    if heatmaps.len() != rig.len() {
        return Err(Error::InvalidInput(format!(
            "{} heatmaps for {} cameras",
            heatmaps.len(),
            rig.len()
        )));
    }
    let pixels = heatmaps.iter().map(soft_argmax).collect::<Result<Vec<_>>>()?;
    let obs: Vec<Observation> = pixels
        .iter()
        .zip(&rig.cameras)
        .map(|(&pixel, camera)| Observation { pixel, camera })
        .collect();
    triangulate_dlt(&obs)
}

/// Settings of the synthetic backbone.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    pub stride: usize,
    /// Feature channels; equals the model's hidden dimension.
    pub channels: usize,
    /// Splat kernel width in grid cells.
    pub feature_sigma: f64,
    /// Root blob width in grid cells.
    pub heatmap_sigma: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stride: 8,
            channels: 32,
            feature_sigma: 1.0,
            heatmap_sigma: 1.5,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic signature of hand point `index`, entries in `[-1, 1)`.
pub fn point_signature(index: usize, channels: usize) -> Vec<f64> {
    (0..channels)
        .map(|c| {
            let h = splitmix(((index as u64) << 20) ^ c as u64);
            (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

/// Kernel truncation radius in units of sigma.
const TRUNCATE: f64 = 6.0;

/// Adds `weight · value · exp(-r²/2σ²)` around grid point `(gx, gy)`.
fn splat(grid: &mut [f64], rows: usize, cols: usize, ch: usize, gx: f64, gy: f64, sigma: f64, value: &[f64]) {
    let r = TRUNCATE * sigma;
    let (j0, j1) = ((gx - r).ceil().max(0.0), (gx + r).floor().min(cols as f64 - 1.0));
    let (i0, i1) = ((gy - r).ceil().max(0.0), (gy + r).floor().min(rows as f64 - 1.0));
    if j0 > j1 || i0 > i1 {
        return;
    }
    for i in i0 as usize..=i1 as usize {
        for j in j0 as usize..=j1 as usize {
            let d2 = (j as f64 - gx).powi(2) + (i as f64 - gy).powi(2);
            if d2 > r * r {
                continue;
            }
            let w = (-d2 / (2.0 * sigma * sigma)).exp();
            let cell = &mut grid[(i * cols + j) * ch..(i * cols + j + 1) * ch];
            for (c, v) in cell.iter_mut().zip(value) {
                *c += w * v;
            }
        }
    }
}

/// Renders one view: hand points splatted into `channels` feature maps keyed
/// by point identity, and a Gaussian root blob. Points behind the camera are
/// skipped; an absent root yields an all-zero heatmap.
pub fn synth_backbone(
    points: &[Vec3],
    root: Option<&Vec3>,
    camera: &Camera,
    cfg: &BackboneConfig,
) -> Result<(FeatureGrid, Heatmap)> {
    let s = cfg.stride;
    if s == 0 || camera.width as usize % s != 0 || camera.height as usize % s != 0 {
        return Err(Error::InvalidInput(format!(
            "image size {}x{} is not divisible by stride {s}",
            camera.width, camera.height
        )));
    }
    let (rows, cols, ch) = (camera.height as usize / s, camera.width as usize / s, cfg.channels);
    let mut feat = vec![0.0; rows * cols * ch];
    for (q, p) in points.iter().enumerate() {
        let (pix, z) = camera.project_point(p);
        if z <= 0.0 {
            continue;
        }
        let sig = point_signature(q, ch);
        splat(&mut feat, rows, cols, ch, pixel_to_grid(pix.x, s), pixel_to_grid(pix.y, s), cfg.feature_sigma, &sig);
    }
    let mut heat = vec![0.0; rows * cols];
    if let Some(r) = root {
        let (pix, z) = camera.project_point(r);
        if z > 0.0 {
            splat(&mut heat, rows, cols, 1, pixel_to_grid(pix.x, s), pixel_to_grid(pix.y, s), cfg.heatmap_sigma, &[1.0]);
        }
    }
    Ok((
        FeatureGrid {
            grid: Tensor::new(&[rows, cols, ch], feat)?,
            stride: s,
        },
        Heatmap {
            grid: Tensor::new(&[rows, cols], heat)?,
            stride: s,
        },
    ))
}

/// Writes a heatmap as an 8-bit binary PGM scaled to its maximum.
pub fn write_pgm(path: &Path, h: &Heatmap) -> Result<()> {
    let max = h.grid.data().iter().copied().fold(0.0, f64::max);
    let mut bytes = format!("P5\n{} {}\n255\n", h.cols(), h.rows()).into_bytes();
    bytes.extend(h.grid.data().iter().map(|&v| {
        if max > 0.0 {
            (v / max * 255.0).round() as u8
        } else {
            0
        }
    }));
    crate::io::write_atomic(path, &bytes)
}

/// Differentiable soft-argmax used by the gradient checks: `[rows, cols]` input, `[2]` output.
pub fn soft_argmax_loss<'t>(tape: &'t Tape, h: Var<'t>, stride: usize) -> Result<Var<'t>> {
    let uv = soft_argmax_var(h, stride)?;
    let w = tape.constant(Tensor::new(&[2], vec![0.7, -1.3])?);
    Ok(uv.mul(w)?.sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{look_at, Intrinsics, Mat4};
    use crate::tensor::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(rows: usize, cols: usize, f: impl FnMut(usize) -> f64) -> Heatmap {
        Heatmap::new(Tensor::from_fn(&[rows, cols], f), 8).unwrap()
    }

    #[test]
    fn normalization() {
        let one_hot = grid(4, 4, |k| if k == 5 { 1.0 } else { 0.0 });
        assert_eq!(normalize_heatmap(&one_hot).unwrap(), one_hot);
        let uniform = normalize_heatmap(&grid(4, 4, |_| 3.0)).unwrap();
        assert!(uniform.grid.data().iter().all(|&v| v == 1.0 / 16.0));
        assert!(normalize_heatmap(&grid(4, 4, |_| 0.0)).is_err());
    }

    #[test]
    fn delta_and_midpoint_expectations() {
        // One-hot at column 3, row 5.
        let h = grid(8, 8, |k| if k == 5 * 8 + 3 { 1.0 } else { 0.0 });
        assert_eq!(soft_argmax(&h).unwrap(), Vec2::new(27.5, 43.5));
        let h = grid(8, 8, |k| if k == 0 || k == 4 { 1.0 } else { 0.0 });
        assert_eq!(soft_argmax(&h).unwrap(), Vec2::new(19.5, 3.5));
    }

    #[test]
    fn matches_double_loop_and_tape_version() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let h = grid(6, 9, |_| rng.random_range(0.0..1.0));
            let total: f64 = h.grid.data().iter().sum();
            let (mut u, mut v) = (0.0, 0.0);
            for i in 0..6 {
                for j in 0..9 {
                    let w = h.grid.get(&[i, j]) / total;
                    u += w * ((j as f64 + 0.5) * 8.0 - 0.5);
                    v += w * ((i as f64 + 0.5) * 8.0 - 0.5);
                }
            }
            let got = soft_argmax(&h).unwrap();
            assert!((got.x - u).abs() < 1e-10 && (got.y - v).abs() < 1e-10);
            let tape = Tape::new();
            let t = soft_argmax_var(tape.leaf(h.grid.clone()), 8).unwrap().value();
            assert!((t.data()[0] - u).abs() < 1e-10 && (t.data()[1] - v).abs() < 1e-10);
        }
    }

    #[test]
    fn shift_by_one_cell_moves_one_stride() {
        let h = grid(8, 8, |k| if k % 8 < 7 { ((k * 37) % 11) as f64 } else { 0.0 });
        let shifted = grid(8, 8, |k| if k % 8 >= 1 { h.grid.data()[k - 1] } else { 0.0 });
        let a = soft_argmax(&h).unwrap();
        let b = soft_argmax(&shifted).unwrap();
        assert!((b.x - a.x - 8.0).abs() < 1e-10 && (b.y - a.y).abs() < 1e-10);
    }

    #[test]
    fn soft_argmax_gradcheck() {
        fn f<'t>(t: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
            soft_argmax_loss(t, v[0].square().add_scalar(0.1), 8)
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let x = Tensor::from_fn(&[4, 5], |_| rng.random_range(-1.0..1.0));
            assert!(gradcheck(f, &[x], 1e-5).unwrap() < 1e-4);
        }
    }

    fn camera(eye: Vec3) -> Camera {
        let intr = Intrinsics {
            fx: 300.0,
            fy: 300.0,
            cx: 127.5,
            cy: 127.5,
        };
        Camera::new(intr, look_at(&eye, &Vec3::zeros(), &Vec3::y()).unwrap(), 256, 256).unwrap()
    }

    #[test]
    fn blob_peaks_at_lattice_root() {
        let cam = Camera::new(
            Intrinsics {
                fx: 300.0,
                fy: 300.0,
                cx: 127.5,
                cy: 127.5,
            },
            Mat4::identity(),
            256,
            256,
        )
        .unwrap();
        // Grid cell (row 10, col 20) is pixel (163.5, 83.5).
        let z = 0.5;
        let root = Vec3::new((163.5 - 127.5) * z / 300.0, (83.5 - 127.5) * z / 300.0, z);
        let (_, h) = synth_backbone(&[], Some(&root), &cam, &BackboneConfig::default()).unwrap();
        assert_eq!(h.argmax(), (10, 20));
        let uv = soft_argmax(&h).unwrap();
        assert!((uv - Vec2::new(163.5, 83.5)).norm() < 1e-6);
    }

    #[test]
    fn blob_follows_root_shift() {
        let cam = camera(Vec3::new(0.0, 0.0, -0.6));
        let cfg = BackboneConfig::default();
        let r0 = Vec3::new(0.005, 0.01, 0.0);
        let r1 = r0 + Vec3::new(0.01, 0.0, 0.0);
        let (_, h0) = synth_backbone(&[], Some(&r0), &cam, &cfg).unwrap();
        let (_, h1) = synth_backbone(&[], Some(&r1), &cam, &cfg).unwrap();
        let d = soft_argmax(&h1).unwrap() - soft_argmax(&h0).unwrap();
        let want = cam.project_point(&r1).0 - cam.project_point(&r0).0;
        assert!((d - want).norm() < 1e-6, "{d} vs {want}");
    }

    #[test]
    fn empty_hand_gives_zero_features() {
        let cam = camera(Vec3::new(0.0, 0.0, -0.6));
        let (f, h) = synth_backbone(&[], None, &cam, &BackboneConfig::default()).unwrap();
        assert!(f.grid.data().iter().all(|&v| v == 0.0));
        assert!(soft_argmax(&h).is_err());
    }

    #[test]
    fn root_recovered_from_blobs_for_every_rig_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = BackboneConfig::default();
        for n in 2..=8 {
            let cams: Vec<Camera> = (0..n)
                .map(|i| {
                    let a = i as f64 * std::f64::consts::TAU / n as f64 + 0.3;
                    camera(Vec3::new(0.6 * a.cos(), rng.random_range(-0.2..0.2), 0.6 * a.sin()))
                })
                .collect();
            let rig = Rig::new(cams).unwrap();
            let gt = Vec3::new(rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03), 0.01);
            let heat: Vec<Heatmap> = rig
                .cameras
                .iter()
                .map(|c| synth_backbone(&[], Some(&gt), c, &cfg).unwrap().1)
                .collect();
            let r = estimate_root(&heat, &rig).unwrap();
            assert!((r - gt).norm() < 5e-3, "n={n}: {}", (r - gt).norm());
            let one_hot: Vec<Heatmap> = rig
                .cameras
                .iter()
                .map(|c| {
                    let pix = c.project_point(&gt).0;
                    let (gx, gy) = (pixel_to_grid(pix.x, 8).round() as usize, pixel_to_grid(pix.y, 8).round() as usize);
                    Heatmap::new(Tensor::from_fn(&[32, 32], |k| if k == gy * 32 + gx { 1.0 } else { 0.0 }), 8).unwrap()
                })
                .collect();
            let r = estimate_root(&one_hot, &rig).unwrap();
            // Snapping to a cell moves each pixel by at most half a stride per axis.
            let bound = 4.0 * 2f64.sqrt() + 1e-9;
            for c in &rig.cameras {
                let e = (c.project_point(&r).0 - c.project_point(&gt).0).norm();
                assert!(e <= bound, "one-hot n={n}: reprojection {e}");
            }
            if n == 4 {
                assert!((r - gt).norm() < 5e-3, "one-hot n=4: {}", (r - gt).norm());
            }
        }
        let rig1 = Rig::new(vec![camera(Vec3::new(0.0, 0.0, -0.6))]).unwrap();
        let h = synth_backbone(&[], Some(&Vec3::zeros()), &rig1.cameras[0], &cfg).unwrap().1;
        assert!(matches!(estimate_root(&[h], &rig1), Err(Error::Degenerate(_))));
    }
}
