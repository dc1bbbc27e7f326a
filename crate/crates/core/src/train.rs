//! Supervised training of the decoder on rendered frames with Adam.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{query_loss, Model};
use crate::error::{Error, Result};
use crate::geometry::points_to_tensor;
use crate::pipeline::{frame_input, rotate_view, stage1_root, RootSource};
use crate::synth::{derive_seed, randomize_views, FrameBundle};
use crate::tensor::{AdamConfig, Tape, Tensor};

/// Learning-rate schedule over the run horizon, after linear warmup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `lr` down to `lr·floor`.
    Cosine { floor: f64 },
    /// Multiply by `factor` every `every` steps.
    Step { every: u64, factor: f64 },
}

/// Root used to place the basis while training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainRoot {
    GroundTruth,
    /// Stage-1 estimate when two or more views survive, ground truth otherwise.
    Estimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Optimizer steps to run in this call.
    pub steps: u64,
    pub lr: f64,
    pub warmup: u64,
    pub schedule: LrSchedule,
    /// Last global step of the schedule; defaults to the end of this run.
    pub horizon: Option<u64>,
    /// Frames per step; gradients are averaged.
    pub batch_size: usize,
    /// Random view count in `[1, N]` and random order for every sample.
    pub randomize_views: bool,
    /// Largest in-plane roll applied to one random view per sample, radians.
    pub max_roll: f64,
    /// Average the loss over every decoder layer, not just the last.
    pub deep_supervision: bool,
    pub root: TrainRoot,
    /// Rescales the gradient when its global norm exceeds this.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 1e-3,
            warmup: 0,
            schedule: LrSchedule::Constant,
            horizon: None,
            batch_size: 1,
            randomize_views: false,
            max_roll: 0.0,
            deep_supervision: false,
            root: TrainRoot::GroundTruth,
            clip_norm: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        match self.schedule {
            LrSchedule::Cosine { floor } if !(0.0..=1.0).contains(&floor) => {
                bad(format!("cosine floor {floor} outside [0, 1]"))
            }
            LrSchedule::Step { every: 0, .. } => bad("step schedule needs every >= 1".into()),
            LrSchedule::Step { factor, .. } if !(factor > 0.0) => bad(format!("step factor {factor} must be positive")),
            _ => Ok(()),
        }
    }

    /// Learning rate for the update that produces global step `step + 1`.
    pub fn lr_at(&self, step: u64, horizon: u64) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let t = step - self.warmup;
        let span = horizon.saturating_sub(self.warmup).max(1);
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine { floor } => {
                let frac = (t as f64 / span as f64).min(1.0);
                self.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
            }
            LrSchedule::Step { every, factor } => self.lr * factor.powi((t / every) as i32),
        }
    }
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Per-step loss log as CSV text.
pub fn loss_csv(log: &[StepLog]) -> String {
    let mut s = String::from("step,loss,lr\n");
    for l in log {
        s.push_str(&format!("{},{:e},{:e}\n", l.step, l.loss, l.lr));
    }
    s
}

/// The training view of a frame after augmentation, with the root to place the basis at.
pub fn augment(frame: &FrameBundle, cfg: &TrainConfig, seed: u64) -> Result<(FrameBundle, RootSource)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = if cfg.randomize_views {
        randomize_views(frame, rng.random())?
    } else {
        frame.clone()
    };
    if cfg.max_roll > 0.0 {
        let view = rng.random_range(0..f.n_views());
        let angle = rng.random_range(-cfg.max_roll..=cfg.max_roll);
        f = rotate_view(&f, view, angle)?;
    }
    let source = match cfg.root {
        TrainRoot::Estimate if f.n_views() >= 2 => RootSource::Estimate,
        _ => RootSource::GroundTruth,
    };
    Ok((f, source))
}

/// Loss and parameter gradients of one frame.
pub fn frame_gradients(
    model: &Model,
    frame: &FrameBundle,
    source: RootSource,
    deep: bool,
) -> Result<(f64, IndexMap<String, Tensor>)> {
    let root = match stage1_root(frame, source) {
        Ok(r) => r,
        // Unusable heatmaps for this sample: fall back to the labeled root.
        Err(e) if e.is_numerical() => frame.gt_root,
        Err(e) => return Err(e),
    };
    let input = frame_input(model, frame, &root)?;
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let out = model.forward(&tape, &bound, &input)?;
    let loss = query_loss(&out, &points_to_tensor(&frame.gt_points), deep)?;
    tape.backward(loss)?;
    Ok((loss.value().item()?, bound.grads(&tape)))
}

/// Parameters holding non-finite values, then those with non-finite gradients.
fn non_finite_names(model: &Model, grads: &IndexMap<String, Tensor>) -> Vec<String> {
    let values = model
        .params
        .iter()
        .filter(|(_, t)| !t.all_finite())
        .map(|(k, _)| format!("value {k}"));
    let grads = grads
        .iter()
        .filter(|(_, g)| !g.all_finite())
        .map(|(k, _)| format!("gradient {k}"));
    values.chain(grads).collect()
}

/// Runs `cfg.steps` Adam steps starting from the model's current step count.
/// `on_step` sees every logged step as it happens.
pub fn train(
    model: &mut Model,
    frames: &[FrameBundle],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if frames.is_empty() && cfg.steps > 0 {
        return Err(Error::InvalidInput("training needs at least one frame".into()));
    }
    let start = model.params.step();
    let horizon = cfg.horizon.unwrap_or(start + cfg.steps);
    let mut log = Vec::with_capacity(cfg.steps as usize);
    for _ in 0..cfg.steps {
        let step = model.params.step();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, step));
        let picks: Vec<(usize, u64)> = (0..cfg.batch_size)
            .map(|_| (rng.random_range(0..frames.len()), rng.random()))
            .collect();
        let model_ref: &Model = model;
        let results: Vec<(f64, IndexMap<String, Tensor>)> = picks
            .par_iter()
            .map(|&(i, seed)| {
                let (f, source) = augment(&frames[i], cfg, seed)?;
                frame_gradients(model_ref, &f, source, cfg.deep_supervision)
            })
            .collect::<Result<_>>()?;
        let n = results.len() as f64;
        let loss = results.iter().map(|r| r.0).sum::<f64>() / n;
        let mut grads = results[0].1.clone();
        for (_, g) in &results[1..] {
            for (k, acc) in grads.iter_mut() {
                for (a, b) in acc.data_mut().iter_mut().zip(g[k].data()) {
                    *a += b;
                }
            }
        }
        let mut sq = 0.0;
        for g in grads.values_mut() {
            for a in g.data_mut() {
                *a /= n;
                sq += *a * *a;
            }
        }
        if !loss.is_finite() || !sq.is_finite() {
            let mut names = non_finite_names(model, &grads);
            if names.is_empty() {
                names.push("loss".into());
            }
            return Err(Error::NonFinite(names));
        }
        if let Some(c) = cfg.clip_norm {
            let norm = sq.sqrt();
            if norm > c {
                for g in grads.values_mut() {
                    for a in g.data_mut() {
                        *a *= c / norm;
                    }
                }
            }
        }
        let lr = cfg.lr_at(step, horizon);
        model.params.adam_step(&grads, &AdamConfig::with_lr(lr))?;
        let entry = StepLog {
            step: model.params.step(),
            loss,
            lr,
        };
        on_step(&entry);
        log.push(entry);
    }
    Ok(log)
}
