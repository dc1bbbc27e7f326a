//! Two-stage reconstruction of a frame: root from heatmaps, then the decoder
//! over the basis placed at that root. Also the left-hand mirror path and
//! in-plane rotation augmentation of a view.

use serde::{Deserialize, Serialize};

use crate::basis::{sample_projected_features, PlacedBasis};
use crate::decoder::{FrameInput, Model};
use crate::error::{Error, Result};
use crate::geometry::{mirror_points, rigid_inverse, rotate_augment, transform_point, Rig, Vec2, Vec3};
use crate::hand::N_JOINTS;
use crate::metrics::{frame_metrics, EvalReport, FrameMetrics};
use crate::root_stage::{estimate_root, grid_to_pixel, pixel_to_grid, FeatureGrid, Heatmap};
use crate::synth::{derive_seed, mirror_bundle, random_order, select_views, shuffled_order, FrameBundle, Handedness};
use crate::tensor::Tensor;

/// Where the stage-2 root comes from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RootSource {
    /// Soft-argmax in every view, then DLT. Needs two or more views.
    Estimate,
    /// The frame's ground-truth root.
    GroundTruth,
    Fixed(Vec3),
}

/// Stage 1 for one frame.
pub fn stage1_root(frame: &FrameBundle, source: RootSource) -> Result<Vec3> {
    match source {
        RootSource::Estimate if frame.n_views() < 2 => Err(Error::Degenerate(
            "a single view cannot triangulate the root; supply one or use the ground-truth root".into(),
        )),
        RootSource::Estimate => estimate_root(&frame.heatmaps, &frame.rig),
        RootSource::GroundTruth => Ok(frame.gt_root),
        RootSource::Fixed(r) => Ok(r),
    }
}

/// Places the basis at `root` and samples every view.
pub fn frame_input(model: &Model, frame: &FrameBundle, root: &Vec3) -> Result<FrameInput> {
    let d = model.config.d;
    if let Some(f) = frame.features.iter().find(|f| f.channels() != d) {
        return Err(Error::ConfigMismatch(vec![format!(
            "feature channels: model expects {d}, frame has {}",
            f.channels()
        )]));
    }
    if frame.gt_points.len() != model.config.q {
        return Err(Error::ConfigMismatch(vec![format!(
            "query points: model expects {}, frame has {}",
            model.config.q,
            frame.gt_points.len()
        )]));
    }
    let placed = PlacedBasis::place(&model.bps, root);
    let views = sample_projected_features(&placed, &frame.rig, &frame.features)?;
    Ok(FrameInput { placed, views })
}

/// Stage-1 root and stage-2 query points (world meters).
pub fn reconstruct(model: &Model, frame: &FrameBundle, source: RootSource) -> Result<(Vec3, Vec<Vec3>)> {
    let root = stage1_root(frame, source)?;
    let input = frame_input(model, frame, &root)?;
    Ok((input.placed.root, model.predict(&input)?))
}

/// Mirrors the frame, reconstructs it as a right hand, and mirrors the result back.
pub fn reconstruct_mirrored(model: &Model, frame: &FrameBundle, source: RootSource) -> Result<(Vec3, Vec<Vec3>)> {
    let source = match source {
        RootSource::Fixed(r) => RootSource::Fixed(Vec3::new(-r.x, r.y, r.z)),
        other => other,
    };
    let (root, pts) = reconstruct(model, &mirror_bundle(frame), source)?;
    Ok((Vec3::new(-root.x, root.y, root.z), mirror_points(&pts)))
}

/// Per-frame output of `reconstruct`, as written to `predictions.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub root: [f64; 3],
    pub vertices: Vec<[f64; 3]>,
    pub joints: Vec<[f64; 3]>,
    pub n_views: usize,
    pub mirrored: bool,
    pub wall_time_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub frames: Vec<Prediction>,
}

fn arr(p: &Vec3) -> [f64; 3] {
    [p.x, p.y, p.z]
}

impl Prediction {
    pub fn new(id: &str, root: &Vec3, points: &[Vec3], n_views: usize, mirrored: bool, wall_time_ms: f64) -> Self {
        let nv = points.len() - N_JOINTS;
        Self {
            id: id.to_string(),
            root: arr(root),
            vertices: points[..nv].iter().map(arr).collect(),
            joints: points[nv..].iter().map(arr).collect(),
            n_views,
            mirrored,
            wall_time_ms,
        }
    }

    pub fn vertices(&self) -> Vec<Vec3> {
        self.vertices.iter().map(|&p| Vec3::from(p)).collect()
    }

    pub fn joints(&self) -> Vec<Vec3> {
        self.joints.iter().map(|&p| Vec3::from(p)).collect()
    }
}

/// Threshold range of the PCK curves, millimeters.
pub const AUC_RANGE: (f64, f64) = (0.0, 20.0);

/// Scores predicted query points against a frame's ground truth.
pub fn score(points: &[Vec3], frame: &FrameBundle) -> Result<FrameMetrics> {
    if points.len() != frame.gt_points.len() {
        return Err(Error::shape("score", &[points.len(), 3], &[frame.gt_points.len(), 3]));
    }
    let nv = frame.n_vertices();
    frame_metrics(&points[..nv], &points[nv..], frame.gt_vertices(), frame.gt_joints(), AUC_RANGE)
}

/// Reconstructs every frame and aggregates the metrics.
pub fn evaluate(model: &Model, frames: &[FrameBundle], source: RootSource) -> Result<EvalReport> {
    use rayon::prelude::*;
    let per: Vec<FrameMetrics> = frames
        .par_iter()
        .map(|f| score(&reconstruct(model, f, source)?.1, f))
        .collect::<Result<_>>()?;
    EvalReport::from_frames(&per, AUC_RANGE)
}

/// Template placed at the ground-truth root: the no-learning reference.
pub fn template_baseline(model: &Model, frame: &FrameBundle) -> Vec<Vec3> {
    model.hand.template.points().iter().map(|p| p + frame.gt_root).collect()
}

fn resample(t: &Tensor, stride: usize, src_of: impl Fn(Vec2) -> Vec2) -> Result<Tensor> {
    let s = t.shape().to_vec();
    let (rows, cols) = (s[0], s[1]);
    let ch: usize = s[2..].iter().product();
    let grid = t.reshape(&[rows, cols, ch])?;
    let mut coords = Vec::with_capacity(rows * cols * 2);
    for i in 0..rows {
        for j in 0..cols {
            let dst = Vec2::new(grid_to_pixel(j as f64, stride), grid_to_pixel(i as f64, stride));
            let src = src_of(dst);
            coords.push(pixel_to_grid(src.x, stride));
            coords.push(pixel_to_grid(src.y, stride));
        }
    }
    let sample = grid.bilinear_sample(&Tensor::new(&[rows * cols, 2], coords)?)?;
    sample.values.reshape(&s)
}

/// Rolls camera `view` by `angle` about its optical axis: the pose becomes
/// `Rz(angle)·T` and both grids are resampled through the induced pixel map.
/// The world is re-anchored to the first camera afterwards.
pub fn rotate_view(frame: &FrameBundle, view: usize, angle: f64) -> Result<FrameBundle> {
    if view >= frame.n_views() {
        return Err(Error::InvalidInput(format!("view {view} of a {}-view frame", frame.n_views())));
    }
    let (map, cam) = rotate_augment(&frame.rig.cameras[view], angle);
    let inverse = crate::geometry::PixelRotation { angle: -angle, ..map };
    let mut out = frame.clone();
    let f = &frame.features[view];
    out.features[view] = FeatureGrid {
        grid: resample(&f.grid, f.stride, |p| inverse.apply(&p))?,
        stride: f.stride,
    };
    let h = &frame.heatmaps[view];
    out.heatmaps[view] = Heatmap {
        grid: resample(&h.grid, h.stride, |p| inverse.apply(&p))?,
        stride: h.stride,
    };
    let mut cams = frame.rig.cameras.clone();
    cams[view] = cam;
    out.rig = Rig::new(cams)?;
    let order: Vec<usize> = (0..frame.n_views()).collect();
    select_views(&out, &order)
}

/// Options of a dataset-level reconstruction run.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructOptions {
    pub views: ViewSpec,
    /// Root source in the dataset's world frame.
    pub root: RootSource,
    /// Route left-hand frames through the mirror path.
    pub mirror_left: bool,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        Self {
            views: ViewSpec::All,
            root: RootSource::Estimate,
            mirror_left: false,
        }
    }
}

/// Reconstructs frame number `index` and reports it in the frame's original world coordinates.
pub fn reconstruct_frame(model: &Model, frame: &FrameBundle, id: &str, index: u64, opts: &ReconstructOptions) -> Result<Prediction> {
    let order = opts.views.order(frame.n_views(), index)?;
    let (_, a) = frame.rig.reanchor(&order)?;
    let view = select_views(frame, &order)?;
    let source = match opts.root {
        RootSource::Fixed(r) => RootSource::Fixed(transform_point(&a, &r)),
        other => other,
    };
    if source == RootSource::Estimate && view.n_views() < 2 {
        return Err(Error::Degenerate(format!(
            "frame {id} has a single view; pass a root or use the ground-truth root"
        )));
    }
    let mirrored = opts.mirror_left && frame.handedness == Handedness::Left;
    let start = std::time::Instant::now();
    let (root, pts) = if mirrored {
        reconstruct_mirrored(model, &view, source)?
    } else {
        reconstruct(model, &view, source)?
    };
    let ms = start.elapsed().as_secs_f64() * 1000.0;
    let back = rigid_inverse(&a);
    let pts: Vec<Vec3> = pts.iter().map(|p| transform_point(&back, p)).collect();
    Ok(Prediction::new(id, &transform_point(&back, &root), &pts, view.n_views(), mirrored, ms))
}

/// Reconstructs every frame in parallel, in input order.
pub fn reconstruct_all(model: &Model, ids: &[String], frames: &[FrameBundle], opts: &ReconstructOptions) -> Result<PredictionFile> {
    use rayon::prelude::*;
    if ids.len() != frames.len() {
        return Err(Error::InvalidInput(format!("{} ids for {} frames", ids.len(), frames.len())));
    }
    let frames = frames
        .par_iter()
        .zip(ids)
        .enumerate()
        .map(|(i, (f, id))| reconstruct_frame(model, f, id, i as u64, opts))
        .collect::<Result<_>>()?;
    Ok(PredictionFile { frames })
}

/// Scores predictions against ground truth matched by frame id.
pub fn score_predictions(preds: &PredictionFile, ids: &[String], frames: &[FrameBundle]) -> Result<EvalReport> {
    let by_id: std::collections::HashMap<&str, &Prediction> = preds.frames.iter().map(|p| (p.id.as_str(), p)).collect();
    let missing: Vec<&str> = ids.iter().map(String::as_str).filter(|id| !by_id.contains_key(id)).collect();
    let known: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
    let extra: Vec<&str> = preds.frames.iter().map(|p| p.id.as_str()).filter(|id| !known.contains(id)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::InvalidInput(format!(
            "frame ids do not match; missing predictions: [{}]; unknown predictions: [{}]",
            missing.join(", "),
            extra.join(", ")
        )));
    }
    let per = ids
        .iter()
        .zip(frames)
        .map(|(id, f)| {
            let p = by_id[id.as_str()];
            let pts: Vec<Vec3> = p.vertices().into_iter().chain(p.joints()).collect();
            score(&pts, f)
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_frames(&per, AUC_RANGE)
}

/// View drop/shuffle applied to every frame before reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub enum ViewSpec {
    All,
    /// Explicit views in the given order, e.g. `2,0,1`.
    Order(Vec<usize>),
    /// The first `k` views.
    First(usize),
    /// All views in a per-frame random order, e.g. `shuffle:7`.
    Shuffle(u64),
    /// Random count in `[1, N]` and random order, e.g. `random:7`.
    Random(u64),
}

impl std::str::FromStr for ViewSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("view spec {s:?}: expected all, first:K, shuffle:SEED, random:SEED or a list like 2,0,1"));
        let num = |t: &str| t.trim().parse::<u64>().map_err(|_| bad());
        Ok(match s.split_once(':') {
            None if s == "all" => ViewSpec::All,
            None => ViewSpec::Order(s.split(',').map(|t| num(t).map(|v| v as usize)).collect::<Result<_>>()?),
            Some(("first", k)) => ViewSpec::First(num(k)? as usize),
            Some(("shuffle", k)) => ViewSpec::Shuffle(num(k)?),
            Some(("random", k)) => ViewSpec::Random(num(k)?),
            Some(_) => return Err(bad()),
        })
    }
}

impl ViewSpec {
    /// Original view indices kept for frame number `index`, in their new order.
    pub fn order(&self, n: usize, index: u64) -> Result<Vec<usize>> {
        match self {
            ViewSpec::All => Ok((0..n).collect()),
            ViewSpec::Order(order) => {
                if order.is_empty() || order.iter().any(|&v| v >= n) {
                    return Err(Error::InvalidInput(format!("view order {order:?} for a {n}-view frame")));
                }
                Ok(order.clone())
            }
            ViewSpec::First(k) => {
                if *k == 0 || *k > n {
                    return Err(Error::InvalidInput(format!("first {k} views of a {n}-view frame")));
                }
                Ok((0..*k).collect())
            }
            ViewSpec::Shuffle(seed) => Ok(shuffled_order(n, derive_seed(*seed, index))),
            ViewSpec::Random(seed) => Ok(random_order(n, derive_seed(*seed, index))),
        }
    }

    /// Applies the spec to frame number `index`.
    pub fn apply(&self, frame: &FrameBundle, index: u64) -> Result<FrameBundle> {
        match self {
            ViewSpec::All => Ok(frame.clone()),
            _ => select_views(frame, &self.order(frame.n_views(), index)?),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::ModelConfig;
    use crate::geometry::{mirror_rig, project};
    use crate::root_stage::BackboneConfig;
    use crate::synth::{make_rig, render_frame, stage_center, Scene, SceneOptions};
    use std::f64::consts::FRAC_PI_2;

    fn tiny_model() -> Model {
        let mut cfg = ModelConfig::tiny();
        cfg.m_pts = 64;
        let mut m = Model::new(cfg).unwrap();
        // Non-zero output weights so the decoder is not the identity.
        for (name, shape, _) in m.config.param_specs() {
            if name.ends_with("w2") || name.ends_with("b2") {
                *m.params.get_mut(&name).unwrap() = Tensor::full(&shape, 1e-3);
            }
        }
        m
    }

    fn frame(seed: u64) -> (FrameBundle, Scene) {
        let rig = make_rig(4, 0.6, 1).unwrap();
        let hand = crate::hand::ToyHand::new(77).unwrap();
        let scene = Scene::sample(&SceneOptions::default(), &stage_center(0.6), seed);
        (render_frame(&scene, &rig, &hand, &BackboneConfig::default()).unwrap(), scene)
    }

    #[test]
    fn untrained_model_returns_template_plus_root() {
        let model = Model::new(ModelConfig::tiny()).unwrap();
        let (f, _) = frame(1);
        let (root, pts) = reconstruct(&model, &f, RootSource::Estimate).unwrap();
        for (p, t) in pts.iter().zip(model.hand.template.points()) {
            assert_eq!(*p, t + root);
        }
        assert!((root - f.gt_root).norm() < 5e-3);
    }

    #[test]
    fn single_view_needs_external_root() {
        let model = Model::new(ModelConfig::tiny()).unwrap();
        let (f, _) = frame(2);
        let one = select_views(&f, &[2]).unwrap();
        assert!(reconstruct(&model, &one, RootSource::Estimate).unwrap_err().is_numerical());
        assert!(reconstruct(&model, &one, RootSource::GroundTruth).is_ok());
    }

    #[test]
    fn mirror_path_matches_right_hand_twin() {
        let model = tiny_model();
        let hand = &model.hand;
        let rig = make_rig(4, 0.6, 3).unwrap();
        let bb = BackboneConfig::default();
        let right = Scene::sample(&SceneOptions::default(), &stage_center(0.6), 4);
        let left = right.mirrored();
        let lf = render_frame(&left, &rig, hand, &bb).unwrap();
        let twin = render_frame(&right, &mirror_rig(&rig), hand, &bb).unwrap();
        let (rl, pl) = reconstruct_mirrored(&model, &lf, RootSource::Estimate).unwrap();
        let (rr, pr) = reconstruct(&model, &twin, RootSource::Estimate).unwrap();
        assert!((rl - Vec3::new(-rr.x, rr.y, rr.z)).norm() < 1e-9);
        for (a, b) in pl.iter().zip(mirror_points(&pr)) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn quarter_turn_rotation_commutes() {
        let (f, _) = frame(5);
        let root_f = estimate_root(&f.heatmaps, &f.rig).unwrap();
        for view in 0..4 {
            let g = rotate_view(&f, view, FRAC_PI_2).unwrap();
            assert!(g.rig.is_canonical());
            // A quarter turn about the principal point permutes cell centers.
            let mut a = f.heatmaps[view].grid.data().to_vec();
            let mut b = g.heatmaps[view].grid.data().to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-9));
            // The estimated root keeps its distances to the (re-anchored) ground truth.
            let root_g = estimate_root(&g.heatmaps, &g.rig).unwrap();
            for i in [0, 40, 80, 97] {
                let df = (root_f - f.gt_points[i]).norm();
                let dg = (root_g - g.gt_points[i]).norm();
                assert!((df - dg).abs() < 1e-9, "view {view}: {df} vs {dg}");
            }
            let pf = project(&f.gt_points, &f.rig.cameras[view]);
            let pg = project(&g.gt_points, &g.rig.cameras[view]);
            let (map, _) = rotate_augment(&f.rig.cameras[view], FRAC_PI_2);
            for (a, b) in pf.pixels.iter().zip(&pg.pixels) {
                assert!((map.apply(a) - b).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn small_rotation_keeps_grid_mass_near_center() {
        let (f, _) = frame(6);
        let g = rotate_view(&f, 1, 0.2).unwrap();
        let before = soft_peak(&f.heatmaps[1]);
        let after = soft_peak(&g.heatmaps[1]);
        let (map, _) = rotate_augment(&f.rig.cameras[1], 0.2);
        assert!((map.apply(&before) - after).norm() < 1.0);
    }

    fn soft_peak(h: &Heatmap) -> Vec2 {
        crate::root_stage::soft_argmax(h).unwrap()
    }

    #[test]
    fn view_specs_parse_and_apply() {
        let (f, _) = frame(7);
        assert_eq!("all".parse::<ViewSpec>().unwrap(), ViewSpec::All);
        assert_eq!("2,0".parse::<ViewSpec>().unwrap(), ViewSpec::Order(vec![2, 0]));
        assert_eq!("first:1".parse::<ViewSpec>().unwrap(), ViewSpec::First(1));
        assert_eq!("shuffle:3".parse::<ViewSpec>().unwrap(), ViewSpec::Shuffle(3));
        assert_eq!("random:3".parse::<ViewSpec>().unwrap(), ViewSpec::Random(3));
        for bad in ["", "x", "shuffle:", "first:-1", "drop:2", "1,,2"] {
            assert!(bad.parse::<ViewSpec>().is_err(), "{bad}");
        }
        assert_eq!(ViewSpec::All.apply(&f, 0).unwrap(), f);
        let g = ViewSpec::Order(vec![2, 0]).apply(&f, 0).unwrap();
        assert_eq!(g.features, vec![f.features[2].clone(), f.features[0].clone()]);
        assert!(ViewSpec::Order(vec![4]).apply(&f, 0).is_err());
        assert!(ViewSpec::First(5).apply(&f, 0).is_err());
        assert_eq!(ViewSpec::First(1).apply(&f, 0).unwrap().n_views(), 1);
        let a = ViewSpec::Shuffle(1).apply(&f, 0).unwrap();
        assert_eq!(a, ViewSpec::Shuffle(1).apply(&f, 0).unwrap());
        assert_eq!(a.n_views(), 4);
    }

    #[test]
    fn dataset_run_reports_original_world_and_scores() {
        let model = tiny_model();
        let frames: Vec<FrameBundle> = (10..13).map(|s| frame(s).0).collect();
        let ids: Vec<String> = (0..3).map(|i| format!("f{i}")).collect();
        let direct = reconstruct_all(&model, &ids, &frames, &ReconstructOptions::default()).unwrap();
        let opts = ReconstructOptions {
            views: ViewSpec::Order(vec![2, 3, 1, 0]),
            ..ReconstructOptions::default()
        };
        let shuffled = reconstruct_all(&model, &ids, &frames, &opts).unwrap();
        // The fresh-model decoder is template + root, so only the root can move with the anchor.
        for (a, b) in direct.frames.iter().zip(&shuffled.frames) {
            assert!((Vec3::from(a.root) - Vec3::from(b.root)).norm() < 1e-9);
        }
        let exact = PredictionFile {
            frames: ids
                .iter()
                .zip(&frames)
                .map(|(id, f)| Prediction::new(id, &f.gt_root, &f.gt_points, 4, false, 0.0))
                .collect(),
        };
        let r = score_predictions(&exact, &ids, &frames).unwrap();
        assert_eq!((r.mpjpe, r.mpvpe, r.auc_j, r.auc_v), (0.0, 0.0, 1.0, 1.0));
        let err = score_predictions(&exact, &ids[..2], &frames[..2]).unwrap_err().to_string();
        assert!(err.contains("f2"), "{err}");
        let one = ReconstructOptions {
            views: ViewSpec::First(1),
            ..ReconstructOptions::default()
        };
        assert!(reconstruct_all(&model, &ids, &frames, &one).unwrap_err().is_numerical());
        let gt_root = ReconstructOptions {
            root: RootSource::GroundTruth,
            ..one
        };
        let p = reconstruct_all(&model, &ids, &frames, &gt_root).unwrap();
        for (pred, f) in p.frames.iter().zip(&frames) {
            assert!((Vec3::from(pred.root) - f.gt_root).norm() < 1e-12);
        }
    }
}
