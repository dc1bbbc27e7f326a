//! Invariants checked over randomly drawn inputs.

use std::path::Path;

use poemkit::basis::{aggregate_frozen, ViewFeatures};
use poemkit::dataset::{decode_grid, encode_grid};
use poemkit::geometry::{
    axis_angle, flip_u, mirror_camera, mirror_points, rigid, rotate_augment, transform_point, triangulate_dlt, Camera,
    Observation, Vec2, Vec3,
};
use poemkit::metrics::{auc, mpjpe, pa, rr};
use poemkit::pipeline::ViewSpec;
use poemkit::root_stage::{grid_to_pixel, pixel_to_grid};
use poemkit::synth::make_rig;
use poemkit::tensor::{load_checkpoint, save_checkpoint, Dtype, Init, ParamStore, Tensor};
use poemkit::train::{LrSchedule, TrainConfig};
use proptest::prelude::*;

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn cloud(n: usize) -> impl Strategy<Value = Vec<Vec3>> {
    prop::collection::vec(vec3(0.1), n)
}

fn near_stage() -> impl Strategy<Value = Vec3> {
    vec3(0.05).prop_map(|d| Vec3::new(0.0, 0.0, 0.6) + d)
}

fn tensor(shape: [usize; 2]) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0..1.0f64, shape[0] * shape[1]).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

/// Projection through the test's own pinhole model.
fn pinhole(cam: &Camera, p: &Vec3) -> Vec2 {
    let c = cam.rotation() * p + cam.translation();
    let k = cam.k();
    Vec2::new(k[(0, 0)] * c.x / c.z + k[(0, 2)], k[(1, 1)] * c.y / c.z + k[(1, 2)])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reanchoring_preserves_projections(seed in 0u64..1000, n in 2usize..6, pts in cloud(8), shift in 0usize..6) {
        let rig = make_rig(n, 0.6, seed).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.rotate_left(shift % n);
        let (moved, a) = rig.reanchor(&order).unwrap();
        prop_assert!(moved.is_canonical());
        for (new_i, &old_i) in order.iter().enumerate() {
            for p in &pts {
                let p = p + Vec3::new(0.0, 0.0, 0.6);
                let before = pinhole(&rig.cameras[old_i], &p);
                let after = pinhole(&moved.cameras[new_i], &transform_point(&a, &p));
                prop_assert!((before - after).norm() < 1e-9, "{before:?} vs {after:?}");
            }
        }
    }

    #[test]
    fn triangulation_inverts_projection(seed in 0u64..1000, n in 2usize..7, p in near_stage()) {
        let rig = make_rig(n, 0.6, seed).unwrap();
        let obs: Vec<Observation> = rig.cameras.iter().map(|c| Observation { pixel: pinhole(c, &p), camera: c }).collect();
        let x = triangulate_dlt(&obs).unwrap();
        prop_assert!((x - p).norm() < 1e-8, "{x:?} vs {p:?}");
    }

    #[test]
    fn aggregation_ignores_source_order(
        views in prop::collection::vec(tensor([5, 4]), 2..6),
        theta in tensor([4, 2]),
        phi in tensor([2, 4]),
        masks in prop::collection::vec(prop::collection::vec(any::<bool>(), 5), 6),
        rot in 1usize..5,
    ) {
        let vf: Vec<ViewFeatures> = views
            .iter()
            .zip(&masks)
            .map(|(t, m)| ViewFeatures { features: t.clone(), visible: m.clone() })
            .collect();
        let mut permuted = vf.clone();
        permuted[1..].rotate_left(rot % (vf.len() - 1));
        permuted[1..].reverse();
        let a = aggregate_frozen(&vf, &theta, &phi).unwrap();
        let b = aggregate_frozen(&permuted, &theta, &phi).unwrap();
        let gap = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(gap <= 1e-12, "gap {gap}");
    }

    #[test]
    fn single_view_aggregation_is_identity(f in tensor([6, 4]), theta in tensor([4, 2]), phi in tensor([2, 4])) {
        let v = ViewFeatures { features: f.clone(), visible: vec![true; 6] };
        prop_assert_eq!(aggregate_frozen(&[v], &theta, &phi).unwrap(), f);
    }

    #[test]
    fn softmax_rows_are_distributions(t in tensor([4, 7])) {
        let wide = Tensor::new(&[4, 7], t.data().iter().map(|v| v * 10.0).collect()).unwrap();
        let s = wide.softmax(1).unwrap();
        for row in s.data().chunks(7) {
            prop_assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn metric_relations(gt in cloud(21), noise in cloud(21), shift in vec3(1.0), rot in vec3(3.0)) {
        let pred: Vec<Vec3> = gt.iter().zip(&noise).map(|(g, n)| g + n * 0.1).collect();
        let m = mpjpe(&pred, &gt).unwrap();
        prop_assert!(pa(&pred, &gt).unwrap() <= m + 1e-12);
        prop_assert!(rr(&pred, &gt, 0).unwrap() <= 2.0 * m + 1e-12);
        let moved: Vec<Vec3> = pred.iter().map(|p| p + shift).collect();
        prop_assert!((rr(&moved, &gt, 0).unwrap() - rr(&pred, &gt, 0).unwrap()).abs() < 1e-12);
        let t = rigid(&axis_angle(&rot), &shift);
        let turned: Vec<Vec3> = pred.iter().map(|p| transform_point(&t, p) * 1.7).collect();
        prop_assert!((pa(&turned, &gt).unwrap() - pa(&pred, &gt).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn auc_is_a_fraction(errs in prop::collection::vec(0.0..80.0f64, 1..50), steps in 1usize..200) {
        let a = auc(&errs, 0.0, 50.0, steps).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let better: Vec<f64> = errs.iter().map(|e| e * 0.5).collect();
        prop_assert!(auc(&better, 0.0, 50.0, steps).unwrap() >= a);
    }

    #[test]
    fn grid_files_round_trip(rows in 1usize..6, cols in 1usize..6, ch in 1usize..4, stride in 1usize..16, cut in 1usize..8) {
        let t = Tensor::from_fn(&[rows, cols, ch], |i| (i as f64 * 0.37).sin() * 1e3);
        let bytes = encode_grid(&t, stride);
        let (back, s) = decode_grid(&bytes, Path::new("g.bin")).unwrap();
        prop_assert_eq!(&back, &t);
        prop_assert_eq!(s, stride);
        let cut = cut.min(bytes.len());
        prop_assert!(decode_grid(&bytes[..bytes.len() - cut], Path::new("g.bin")).is_err());
    }

    #[test]
    fn view_orders_are_valid(n in 1usize..9, seed in any::<u64>(), index in any::<u64>()) {
        for spec in [ViewSpec::All, ViewSpec::Shuffle(seed), ViewSpec::Random(seed), ViewSpec::First(1)] {
            let order = spec.order(n, index).unwrap();
            prop_assert!(!order.is_empty() && order.len() <= n);
            let mut sorted = order.clone();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), order.len());
            prop_assert!(order.iter().all(|&v| v < n));
        }
        prop_assert_eq!(ViewSpec::Shuffle(seed).order(n, index).unwrap().len(), n);
    }

    #[test]
    fn mirroring_is_an_involution(seed in 0u64..1000, pts in cloud(10), u in 0.0..255.0f64, v in 0.0..255.0f64) {
        let cam = &make_rig(3, 0.6, seed).unwrap().cameras[1];
        let twice = mirror_camera(&mirror_camera(cam));
        prop_assert!((twice.pose - cam.pose).abs().max() < 1e-15);
        prop_assert_eq!(mirror_points(&mirror_points(&pts)), pts.clone());
        let px = Vec2::new(u, v);
        prop_assert!((flip_u(&flip_u(&px, cam.width), cam.width) - px).norm() < 1e-12);
        // A mirrored point seen by the mirrored camera lands on the flipped pixel.
        let mc = mirror_camera(cam);
        for (p, q) in pts.iter().zip(mirror_points(&pts)) {
            let p = p + Vec3::new(0.0, 0.0, 0.6);
            let q = q + Vec3::new(0.0, 0.0, 0.6);
            prop_assert!((pinhole(&mc, &q) - flip_u(&pinhole(cam, &p), cam.width)).norm() < 1e-9);
        }
    }

    #[test]
    fn rotation_augment_maps_projections(seed in 0u64..1000, angle in -3.1..3.1f64, p in near_stage()) {
        let cam = &make_rig(2, 0.6, seed).unwrap().cameras[1];
        let (map, rolled) = rotate_augment(cam, angle);
        prop_assert!((map.apply(&pinhole(cam, &p)) - pinhole(&rolled, &p)).norm() < 1e-9);
        let (back, _) = rotate_augment(&rolled, -angle);
        let q = back.apply(&map.apply(&pinhole(cam, &p)));
        prop_assert!((q - pinhole(cam, &p)).norm() < 1e-9);
    }

    #[test]
    fn grid_and_pixel_coordinates_invert(g in -4.0..100.0f64, stride in 1usize..32) {
        prop_assert!((pixel_to_grid(grid_to_pixel(g, stride), stride) - g).abs() < 1e-12);
    }

    #[test]
    fn learning_rate_stays_in_bounds(step in 0u64..5000, horizon in 1u64..5000, warmup in 0u64..200, floor in 0.0..1.0f64) {
        let cfg = TrainConfig { lr: 1e-3, warmup, schedule: LrSchedule::Cosine { floor }, ..TrainConfig::default() };
        let lr = cfg.lr_at(step, horizon);
        prop_assert!(lr > 0.0 && lr <= 1e-3 * (1.0 + 1e-12));
        if step >= warmup {
            prop_assert!(lr >= 1e-3 * floor * (1.0 - 1e-12));
            prop_assert!(cfg.lr_at(step + 1, horizon) <= lr * (1.0 + 1e-12));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..5) {
        let mut store = ParamStore::new(seed);
        store.add("a.w", &[rows, cols], Init::Xavier).unwrap();
        store.add("a.b", &[cols], Init::Normal(0.3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &store, Dtype::F64).unwrap();
        let back = load_checkpoint(&path).unwrap().params;
        let names: Vec<&str> = back.names().collect();
        prop_assert_eq!(names, vec!["a.w", "a.b"]);
        for (name, t) in store.iter() {
            prop_assert_eq!(back.get(name).unwrap(), t);
        }
    }
}
