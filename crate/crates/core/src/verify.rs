//! Built-in oracle suite behind the `verify` subcommand.
//!
//! Every check builds its own small random problem from the seed and compares
//! the library against an independent expectation: central differences,
//! exact round trips, symmetry identities.

use std::panic::{catch_unwind, AssertUnwindSafe};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::basis::{projective_aggregation, PlacedBasis, ViewFeatures};
use crate::decoder::{cross_attention, ffn_update, knn, self_attention, vector_attention, FrameInput, Model, ModelConfig};
use crate::faults::{with_fault, Fault};
use crate::geometry::{
    mirror_points, mirror_rig, points_to_tensor, project, rotate_augment, triangulate_dlt, Observation, Vec3,
};
use crate::hand::ToyHand;
use crate::pipeline::{reconstruct, reconstruct_mirrored, RootSource};
use crate::root_stage::{soft_argmax_var, BackboneConfig};
use crate::synth::{derive_seed, make_rig, randomize_views, render_frame, stage_center, Scene, SceneOptions};
use crate::tensor::{gradcheck, Init, ParamStore, Tape, Tensor, Var};

/// Largest accepted relative gradient error.
pub const GRAD_TOL: f64 = 1e-4;
/// Tolerance of the symmetry identities.
pub const IDENTITY_TOL: f64 = 1e-9;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// One `PASS`/`FAIL` line per check.
    pub fn lines(&self) -> String {
        self.checks
            .iter()
            .map(|c| format!("{} {:<34} {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail))
            .collect()
    }
}

type Check = fn(&mut ChaCha8Rng) -> std::result::Result<String, String>;

/// Names and bodies of every check, in report order.
pub const CHECKS: &[(&str, Check)] = &[
    ("gradcheck.tensor_ops", grad_tensor_ops),
    ("gradcheck.soft_argmax", grad_soft_argmax),
    ("gradcheck.bilinear", grad_bilinear),
    ("gradcheck.aggregation", grad_aggregation),
    ("gradcheck.attention_ffn", grad_blocks),
    ("gradcheck.lbs", grad_lbs),
    ("triangulation.round_trip", triangulation_round_trip),
    ("aggregation.single_view_shortcut", aggregation_single_view),
    ("aggregation.permutation", aggregation_permutation),
    ("aggregation.zero_sources", aggregation_zero_sources),
    ("vector_attention.weight_sums", va_weight_sums),
    ("vector_attention.locality", va_locality),
    ("decoder.identity_at_init", decoder_identity),
    ("views.reanchor_invariance", reanchor_invariance),
    ("mirror.consistency", mirror_consistency),
    ("rotation.commutation", rotation_commutation),
];

/// Runs every check on the current thread.
pub fn run(seed: u64) -> VerifyReport {
    let checks = CHECKS
        .iter()
        .enumerate()
        .map(|(i, (name, body))| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let outcome = catch_unwind(AssertUnwindSafe(|| body(&mut rng)))
                .unwrap_or_else(|p| Err(format!("panicked: {}", panic_text(&p))));
            match outcome {
                Ok(detail) => CheckResult { name, passed: true, detail },
                Err(detail) => CheckResult { name, passed: false, detail },
            }
        })
        .collect();
    VerifyReport { seed, checks }
}

/// Runs the suite with `fault` injected, for mutation testing.
pub fn run_with_fault(fault: Fault, seed: u64) -> VerifyReport {
    with_fault(fault, || run(seed))
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}

type Outcome = std::result::Result<String, String>;

fn err(e: crate::Error) -> String {
    e.to_string()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn grad_within(label: &str, e: crate::Result<f64>) -> Outcome {
    let e = e.map_err(err)?;
    if e <= GRAD_TOL {
        Ok(format!("{label} max rel err {e:.1e}"))
    } else {
        Err(format!("{label} max rel err {e:.1e} > {GRAD_TOL:.0e}"))
    }
}

fn grad_tensor_ops(rng: &mut ChaCha8Rng) -> Outcome {
    let a = rand_tensor(rng, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(rng, &[4, 5], -1.0, 1.0);
    let c = rand_tensor(rng, &[3, 5], 0.5, 1.5);
    grad_within(
        "matmul/softmax/layer_norm/exp/ln/sqrt/div",
        gradcheck(
            |_, v: &[Var]| {
                let m = v[0].matmul(v[1])?;
                let s = m.softmax(1)?.mul(v[2].ln())?;
                let n = m.layer_norm(1e-5)?.square().add_scalar(1.0).sqrt();
                let r = s.add(n)?.div(v[2])?.exp().sum_axis(0, false)?;
                Ok(r.relu().add_scalar(0.1).sum().add(m.permute(&[1, 0])?.sin().cos().mean())?)
            },
            &[a, b, c],
            1e-6,
        ),
    )
}

fn grad_soft_argmax(rng: &mut ChaCha8Rng) -> Outcome {
    let h = rand_tensor(rng, &[6, 7], 0.1, 1.0);
    grad_within(
        "soft-argmax",
        gradcheck(
            |t, v: &[Var]| {
                let p = soft_argmax_var(v[0], 8)?;
                let w = t.constant(Tensor::new(&[2], vec![0.7, -1.3])?);
                Ok(p.mul(w)?.sum())
            },
            &[h],
            1e-6,
        ),
    )
}

fn grad_bilinear(rng: &mut ChaCha8Rng) -> Outcome {
    let grid = rand_tensor(rng, &[5, 6, 3], -1.0, 1.0);
    // Stay clear of cell boundaries, where the sampler has kinks.
    let coords = Tensor::from_fn(&[8, 2], |i| {
        let hi: f64 = if i % 2 == 0 { 4.0 } else { 3.0 };
        rng.random_range(0.0..hi).floor() + rng.random_range(0.2..0.8)
    });
    grad_within(
        "bilinear sample",
        gradcheck(
            |t, v: &[Var]| {
                let (s, _) = t.bilinear_sample(v[0], v[1])?;
                let w = t.constant(Tensor::from_fn(&s.shape(), |i| (i as f64 * 0.31).cos()));
                Ok(s.mul(w)?.sum())
            },
            &[grid, coords],
            1e-6,
        ),
    )
}

fn grad_aggregation(rng: &mut ChaCha8Rng) -> Outcome {
    let views: Vec<Tensor> = (0..3).map(|_| rand_tensor(rng, &[5, 4], -1.0, 1.0)).collect();
    let theta = rand_tensor(rng, &[4, 2], -1.0, 1.0);
    let phi = rand_tensor(rng, &[2, 4], -1.0, 1.0);
    let masks = vec![vec![true; 5], vec![true, false, true, true, true], vec![true; 5]];
    let inputs: Vec<Tensor> = views.into_iter().chain([theta, phi]).collect();
    grad_within(
        "projective aggregation",
        gradcheck(
            |t, v: &[Var]| {
                let f = projective_aggregation(&v[..3], &masks, v[3], v[4])?;
                let w = t.constant(Tensor::from_fn(&f.shape(), |i| (i as f64 * 0.53).sin()));
                Ok(f.mul(w)?.sum())
            },
            &inputs,
            1e-6,
        ),
    )
}

fn small_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        layers: 1,
        k: 3,
        n_heads: 2,
        m_pts: 12,
        q: 26,
        diameter: 0.3,
        seed: 5,
        mano_head: false,
    }
}

fn random_store(cfg: &ModelConfig, seed: u64) -> crate::Result<ParamStore> {
    let mut store = ParamStore::new(seed);
    for (name, shape, _) in cfg.param_specs() {
        store.add(&name, &shape, Init::Normal(0.3))?;
    }
    Ok(store)
}

fn grad_blocks(rng: &mut ChaCha8Rng) -> Outcome {
    let cfg = small_config();
    let store = random_store(&cfg, rng.random()).map_err(err)?;
    let p: Vec<Vec3> = (0..10)
        .map(|_| Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)))
        .collect();
    let x = Tensor::from_fn(&[5, 3], |_| rng.random_range(-0.1..0.1));
    let e = rand_tensor(rng, &[5, cfg.d], -1.0, 1.0);
    let f = rand_tensor(rng, &[10, cfg.d], -1.0, 1.0);
    let nb = knn(&crate::geometry::points_from_tensor(&x).map_err(err)?, &p, 3);
    let p_t = points_to_tensor(&p);
    grad_within(
        "self/cross/vector attention + FFN",
        gradcheck(
            |t, v: &[Var]| {
                let bound = store.bind_frozen(t);
                let a = self_attention(v[0], &bound, "dec.0", 2)?;
                let b = cross_attention(a.out, v[1], &bound, "dec.0", 2)?;
                let c = vector_attention(b.out, v[2], t.constant(p_t.clone()), v[1], &nb, &bound, "dec.0", 0.15)?;
                let y = ffn_update(c.out, v[2], &bound, "dec.0", 0.15)?;
                let w = t.constant(Tensor::from_fn(&y.shape(), |i| (i as f64 * 0.7).sin()));
                Ok(y.mul(w)?.sum())
            },
            &[e, f, x],
            1e-6,
        ),
    )
}

fn grad_lbs(rng: &mut ChaCha8Rng) -> Outcome {
    let hand = ToyHand::new(20).map_err(err)?;
    let theta = rand_tensor(rng, &[16, 3], -0.5, 0.5);
    let beta = rand_tensor(rng, &[10], -1.0, 1.0);
    let root = Tensor::new(&[3], vec![0.01, -0.02, 0.5]).map_err(err)?;
    grad_within(
        "linear blend skinning",
        gradcheck(
            |t, v: &[Var]| {
                let pts = hand.lbs(v[0], v[1], v[2])?;
                let w = t.constant(Tensor::from_fn(&pts.shape(), |i| (i as f64 * 0.29).cos()));
                Ok(pts.mul(w)?.sum())
            },
            &[theta, beta, root],
            1e-6,
        ),
    )
}

fn triangulation_round_trip(rng: &mut ChaCha8Rng) -> Outcome {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=8);
        let rig = make_rig(n, 0.6, rng.random()).map_err(err)?;
        let x = stage_center(0.6)
            + Vec3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
        let obs: Vec<Observation> = rig
            .cameras
            .iter()
            .map(|c| Observation {
                pixel: c.project_point(&x).0,
                camera: c,
            })
            .collect();
        worst = worst.max((triangulate_dlt(&obs).map_err(err)? - x).norm());
    }
    if worst < 1e-8 {
        Ok(format!("100 rigs, max error {worst:.1e} m"))
    } else {
        Err(format!("max error {worst:.1e} m >= 1e-8"))
    }
}

struct AggCase {
    views: Vec<Tensor>,
    masks: Vec<Vec<bool>>,
    theta: Tensor,
    phi: Tensor,
}

fn agg_case(rng: &mut ChaCha8Rng, n: usize) -> AggCase {
    let (m, d) = (9, 8);
    AggCase {
        views: (0..n).map(|_| rand_tensor(rng, &[m, d], -1.0, 1.0)).collect(),
        masks: (0..n).map(|_| (0..m).map(|_| rng.random_bool(0.8)).collect()).collect(),
        theta: rand_tensor(rng, &[d, d / 2], -1.0, 1.0),
        phi: rand_tensor(rng, &[d / 2, d], -1.0, 1.0),
    }
}

fn aggregate(c: &AggCase, order: &[usize]) -> crate::Result<Tensor> {
    let views: Vec<ViewFeatures> = order
        .iter()
        .map(|&i| ViewFeatures {
            features: c.views[i].clone(),
            visible: c.masks[i].clone(),
        })
        .collect();
    crate::basis::aggregate_frozen(&views, &c.theta, &c.phi)
}

fn aggregation_single_view(rng: &mut ChaCha8Rng) -> Outcome {
    let c = agg_case(rng, 1);
    let out = aggregate(&c, &[0]).map_err(err)?;
    if out == c.views[0] {
        Ok("N=1 output is the input, bit for bit".into())
    } else {
        Err(format!("N=1 output differs from input by {:.3e}", out.max_abs_diff(&c.views[0])))
    }
}

fn aggregation_permutation(rng: &mut ChaCha8Rng) -> Outcome {
    let c = agg_case(rng, 5);
    let base = aggregate(&c, &[0, 1, 2, 3, 4]).map_err(err)?;
    let mut worst = 0.0f64;
    for order in [[0, 4, 3, 2, 1], [0, 2, 4, 1, 3], [0, 3, 1, 4, 2]] {
        worst = worst.max(aggregate(&c, &order).map_err(err)?.max_abs_diff(&base));
    }
    if worst <= 1e-12 {
        Ok(format!("source order changes output by {worst:.1e}"))
    } else {
        Err(format!("source order changes output by {worst:.1e} > 1e-12"))
    }
}

fn aggregation_zero_sources(rng: &mut ChaCha8Rng) -> Outcome {
    let mut c = agg_case(rng, 4);
    for v in &mut c.views[1..] {
        *v = Tensor::zeros(v.shape());
    }
    let out = aggregate(&c, &[0, 1, 2, 3]).map_err(err)?;
    let diff = out.max_abs_diff(&c.views[0]);
    if diff == 0.0 {
        Ok("zero sources leave the target unchanged".into())
    } else {
        Err(format!("zero sources move the target by {diff:.3e}"))
    }
}

struct VaCase {
    store: ParamStore,
    e: Tensor,
    x: Vec<Vec3>,
    p: Vec<Vec3>,
    f: Tensor,
}

fn va_case(rng: &mut ChaCha8Rng) -> crate::Result<VaCase> {
    let cfg = small_config();
    let mut pt = || Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let x = (0..6).map(|_| pt()).collect();
    let p = (0..20).map(|_| pt()).collect();
    Ok(VaCase {
        store: random_store(&cfg, rng.random())?,
        e: rand_tensor(rng, &[6, cfg.d], -1.0, 1.0),
        x,
        p,
        f: rand_tensor(rng, &[20, cfg.d], -1.0, 1.0),
    })
}

fn run_va(c: &VaCase, f: &Tensor, k: usize) -> crate::Result<(Tensor, Tensor, Vec<Vec<usize>>)> {
    let tape = Tape::new();
    let bound = c.store.bind_frozen(&tape);
    let nb = knn(&c.x, &c.p, k);
    let a = vector_attention(
        tape.constant(c.e.clone()),
        tape.constant(points_to_tensor(&c.x)),
        tape.constant(points_to_tensor(&c.p)),
        tape.constant(f.clone()),
        &nb,
        &bound,
        "dec.0",
        0.15,
    )?;
    Ok((a.out.value().as_ref().clone(), a.weights.value().as_ref().clone(), nb))
}

fn va_weight_sums(rng: &mut ChaCha8Rng) -> Outcome {
    let c = va_case(rng).map_err(err)?;
    let (_, w, _) = run_va(&c, &c.f, 5).map_err(err)?;
    let s = w.shape();
    let mut worst = 0.0f64;
    for q in 0..s[0] {
        for ch in 0..s[2] {
            let total: f64 = (0..s[1]).map(|j| w.get(&[q, j, ch])).sum();
            worst = worst.max((total - 1.0).abs());
        }
    }
    if worst < 1e-12 {
        Ok(format!("per-channel neighbor sums within {worst:.1e} of 1"))
    } else {
        Err(format!("per-channel neighbor sums off by {worst:.3e}"))
    }
}

fn va_locality(rng: &mut ChaCha8Rng) -> Outcome {
    let c = va_case(rng).map_err(err)?;
    let (out, _, nb) = run_va(&c, &c.f, 5).map_err(err)?;
    let d = c.f.shape()[1];
    let mut changed = 0;
    for (j, _) in c.p.iter().enumerate() {
        let mut f2 = c.f.clone();
        for ch in 0..d {
            f2.data_mut()[j * d + ch] += 3.0;
        }
        let (out2, _, _) = run_va(&c, &f2, 5).map_err(err)?;
        for (q, n) in nb.iter().enumerate() {
            if !n.contains(&j) && out.row(q) != out2.row(q) {
                return Err(format!("query {q} changed when non-neighbor {j} was perturbed"));
            }
            changed += (n.contains(&j) && out.row(q) != out2.row(q)) as usize;
        }
    }
    Ok(format!("non-neighbor perturbations inert; {changed} neighbor perturbations visible"))
}

fn decoder_identity(rng: &mut ChaCha8Rng) -> Outcome {
    let cfg = ModelConfig {
        layers: 2,
        ..small_config()
    };
    let model = Model::new(cfg).map_err(err)?;
    let root = Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(0.4..0.8));
    let placed = PlacedBasis::place(&model.bps, &root);
    let m = placed.points.len();
    let views = (0..3)
        .map(|_| ViewFeatures {
            features: rand_tensor(rng, &[m, model.config.d], -1.0, 1.0),
            visible: vec![true; m],
        })
        .collect();
    let out = model.predict(&FrameInput { placed: placed.clone(), views }).map_err(err)?;
    for (p, t) in out.iter().zip(model.hand.template.points()) {
        if *p != t + placed.root {
            return Err(format!("output {p:?} differs from template + root {:?}", t + placed.root));
        }
    }
    Ok("fresh model returns template + root exactly".into())
}

fn toy_frame(rng: &mut ChaCha8Rng, hand: &ToyHand, d: usize) -> crate::Result<crate::synth::FrameBundle> {
    let rig = make_rig(4, 0.6, rng.random())?;
    let scene = Scene::sample(&SceneOptions::default(), &stage_center(0.6), rng.random());
    let bb = BackboneConfig {
        channels: d,
        ..BackboneConfig::default()
    };
    render_frame(&scene, &rig, hand, &bb)
}

fn reanchor_invariance(rng: &mut ChaCha8Rng) -> Outcome {
    let hand = ToyHand::new(20).map_err(err)?;
    let f = toy_frame(rng, &hand, 8).map_err(err)?;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let g = randomize_views(&f, rng.random()).map_err(err)?;
        for (cam, grid) in g.rig.cameras.iter().zip(&g.features) {
            let i = f
                .features
                .iter()
                .position(|x| x == grid)
                .ok_or("kept view not found in source frame")?;
            let a = project(&f.gt_points, &f.rig.cameras[i]);
            let b = project(&g.gt_points, cam);
            for (p, q) in a.pixels.iter().zip(&b.pixels) {
                worst = worst.max((p - q).norm());
            }
        }
    }
    if worst < IDENTITY_TOL {
        Ok(format!("reprojection drift {worst:.1e} px"))
    } else {
        Err(format!("reprojection drift {worst:.1e} px"))
    }
}

/// A frozen model with non-zero output weights, so the decoder is not the identity.
fn perturbed_model(seed: u64) -> crate::Result<Model> {
    let cfg = ModelConfig {
        d: 16,
        m_pts: 64,
        q: 41,
        seed,
        ..ModelConfig::tiny()
    };
    let store = random_store(&cfg, seed)?;
    Model::with_params(cfg, store)
}

fn mirror_consistency(rng: &mut ChaCha8Rng) -> Outcome {
    let model = perturbed_model(rng.random()).map_err(err)?;
    let rig = make_rig(4, 0.6, rng.random()).map_err(err)?;
    let bb = BackboneConfig {
        channels: model.config.d,
        ..BackboneConfig::default()
    };
    let right = Scene::sample(&SceneOptions::default(), &stage_center(0.6), rng.random());
    let left = render_frame(&right.mirrored(), &rig, &model.hand, &bb).map_err(err)?;
    let twin = render_frame(&right, &mirror_rig(&rig), &model.hand, &bb).map_err(err)?;
    let (_, a) = reconstruct_mirrored(&model, &left, RootSource::Estimate).map_err(err)?;
    let (_, b) = reconstruct(&model, &twin, RootSource::Estimate).map_err(err)?;
    let worst = a
        .iter()
        .zip(mirror_points(&b))
        .map(|(p, q)| (p - q).norm())
        .fold(0.0, f64::max);
    let moved = a.iter().zip(&left.gt_points).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
    if worst < IDENTITY_TOL {
        Ok(format!("mirror path agrees with right-hand twin to {worst:.1e} m (output spread {moved:.1e} m)"))
    } else {
        Err(format!("mirror path differs from right-hand twin by {worst:.1e} m"))
    }
}

fn rotation_commutation(rng: &mut ChaCha8Rng) -> Outcome {
    let hand = ToyHand::new(20).map_err(err)?;
    let f = toy_frame(rng, &hand, 8).map_err(err)?;
    let mut worst = 0.0f64;
    for cam in &f.rig.cameras {
        let angle = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let (map, rotated) = rotate_augment(cam, angle);
        let a = project(&f.gt_points, cam);
        let b = project(&f.gt_points, &rotated);
        for (p, q) in a.pixels.iter().zip(&b.pixels) {
            worst = worst.max((map.apply(p) - q).norm());
        }
    }
    if worst < IDENTITY_TOL {
        Ok(format!("pixel map commutes with the rolled camera to {worst:.1e} px"))
    } else {
        Err(format!("pixel map off by {worst:.1e} px"))
    }
}
