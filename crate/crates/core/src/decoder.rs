//! Point-embedded transformer decoder.
//!
//! Each layer applies, with pre-norm residuals, multi-head self-attention over
//! query embeddings, multi-head cross-attention from queries to basis
//! features, vector attention over each query's nearest basis points, and an
//! FFN that moves the query points. Coordinates are handled relative to the
//! root, so the network never sees absolute world positions.

use serde::{Deserialize, Serialize};

use crate::basis::{self, generate_bps, BasisPointSet, PlacedBasis, ViewFeatures};
use crate::error::{Error, Result};
use crate::faults::{self, Fault};
use crate::geometry::{points_to_tensor, Vec3};
use crate::hand::{ToyHand, N_JOINTS, N_KIN, N_SHAPE};
use crate::tensor::{BoundParams, Init, ParamStore, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Architecture hyperparameters, serialized as the model config JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden width; also the backbone channel count.
    pub d: usize,
    /// Decoder layers.
    pub layers: usize,
    /// Neighbors per query in vector attention.
    pub k: usize,
    pub n_heads: usize,
    /// Basis point count.
    pub m_pts: usize,
    /// Query points: hand vertices plus 21 joints.
    pub q: usize,
    /// Diameter of the basis sphere in meters.
    pub diameter: f64,
    pub seed: u64,
    /// Regress toy-hand pose and shape instead of free points.
    #[serde(default)]
    pub mano_head: bool,
}

impl ModelConfig {
    /// Desk-scale configuration used by the overfit and generalization checks.
    pub fn tiny() -> Self {
        Self {
            d: 32,
            layers: 2,
            k: 8,
            n_heads: 4,
            m_pts: 256,
            q: 98,
            diameter: 0.3,
            seed: 0,
            mano_head: false,
        }
    }

    pub fn n_vertices(&self) -> usize {
        self.q.saturating_sub(N_JOINTS)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.d == 0 || self.d % 4 != 0 {
            problems.push(format!("d = {} must be a positive multiple of 4", self.d));
        }
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            problems.push(format!("d = {} not divisible by n_heads = {}", self.d, self.n_heads));
        }
        if self.k == 0 || self.k > self.m_pts {
            problems.push(format!("k = {} must be in 1..=m_pts ({})", self.k, self.m_pts));
        }
        if self.q < N_JOINTS + 5 {
            problems.push(format!("q = {} leaves fewer than 5 hand vertices", self.q));
        }
        if self.layers == 0 {
            problems.push("layers must be at least 1".into());
        }
        if !(self.diameter > 0.0) {
            problems.push(format!("diameter = {} must be positive", self.diameter));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(problems.join("; ")))
        }
    }

    /// Scale between network units and meters.
    fn radius(&self) -> f64 {
        0.5 * self.diameter
    }

    /// Every parameter the config implies, in registration order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let d = self.d;
        let mut out = vec![
            (basis::THETA.to_string(), vec![d, d / 2], Init::FanIn),
            (basis::PHI.to_string(), vec![d / 2, d], Init::FanIn),
            ("queries.emb".to_string(), vec![self.q, d], Init::Xavier),
        ];
        for l in 0..self.layers {
            let p = |s: &str| format!("dec.{l}.{s}");
            for s in ["sa.q", "sa.k", "sa.v", "sa.o", "ca.q", "ca.k", "ca.v", "ca.o"] {
                out.push((p(s), vec![d, d], Init::Xavier));
            }
            for s in ["va.alpha", "va.beta", "va.gamma", "va.psi"] {
                out.push((p(s), vec![d, d], Init::Xavier));
            }
            out.push((p("va.xi1"), vec![3, d], Init::Xavier));
            out.push((p("va.xi1_b"), vec![d], Init::Zeros));
            out.push((p("va.xi2"), vec![d, d], Init::Xavier));
            out.push((p("va.xi2_b"), vec![d], Init::Zeros));
            out.push((p("ffn.w1"), vec![d, d], Init::Xavier));
            out.push((p("ffn.b1"), vec![d], Init::Zeros));
            out.push((p("ffn.w2"), vec![d, 3], Init::Zeros));
            out.push((p("ffn.b2"), vec![3], Init::Zeros));
        }
        if self.mano_head {
            out.push(("mano.theta".into(), vec![d, N_KIN * 3], Init::Zeros));
            out.push(("mano.theta_b".into(), vec![N_KIN * 3], Init::Zeros));
            out.push(("mano.beta".into(), vec![d, N_SHAPE], Init::Zeros));
            out.push(("mano.beta_b".into(), vec![N_SHAPE], Init::Zeros));
        }
        out
    }

    /// Lists every way `store` disagrees with the parameters this config needs.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        let specs = self.param_specs();
        let mut problems = Vec::new();
        for (name, shape, _) in &specs {
            match store.get(name) {
                None => problems.push(format!("{name}: missing")),
                Some(t) if t.shape() != shape.as_slice() => {
                    problems.push(format!("{name}: expected {shape:?}, found {:?}", t.shape()))
                }
                Some(_) => {}
            }
        }
        for name in store.names() {
            if !specs.iter().any(|(n, _, _)| n == name) {
                problems.push(format!("{name}: not used by this config"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigMismatch(problems))
        }
    }
}

/// Parameters, basis and template of one model instance.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub hand: ToyHand,
    pub bps: BasisPointSet,
    pub params: ParamStore,
    template: Tensor,
}

/// Per-frame decoder input: placed basis and the per-view sampled features.
#[derive(Clone, Debug)]
pub struct FrameInput {
    pub placed: PlacedBasis,
    pub views: Vec<ViewFeatures>,
}

/// Query points after every decoder layer (world meters), plus final embeddings.
pub struct DecoderOutput<'t> {
    pub layers: Vec<Var<'t>>,
    pub embeddings: Var<'t>,
}

impl<'t> DecoderOutput<'t> {
    pub fn last(&self) -> Var<'t> {
        *self.layers.last().expect("at least one layer")
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(config.seed);
        for (name, shape, init) in config.param_specs() {
            params.add(&name, &shape, init)?;
        }
        Self::with_params(config, params)
    }

    /// Builds a model around existing parameters, checking every name and shape.
    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        config.check_params(&params)?;
        let hand = ToyHand::new(config.n_vertices())?;
        let bps = generate_bps(config.m_pts, config.diameter, config.seed)?;
        let template = hand.rest_points();
        Ok(Self {
            config,
            hand,
            bps,
            params,
            template,
        })
    }

    /// Template query points relative to the root, `[Q, 3]`.
    pub fn template(&self) -> &Tensor {
        &self.template
    }

    /// Runs aggregation and the decoder for one frame.
    pub fn forward<'t>(&self, tape: &'t Tape, params: &BoundParams<'t>, input: &FrameInput) -> Result<DecoderOutput<'t>> {
        let views: Vec<Var<'t>> = input.views.iter().map(|v| tape.constant(v.features.clone())).collect();
        let masks: Vec<Vec<bool>> = input.views.iter().map(|v| v.visible.clone()).collect();
        let f_p = basis::projective_aggregation(&views, &masks, params.get(basis::THETA)?, params.get(basis::PHI)?)?;
        decoder_forward(tape, params, &self.config, &self.hand, &self.template, f_p, &input.placed.points, &input.placed.root)
    }

    /// Inference with frozen parameters; returns world query points.
    pub fn predict(&self, input: &FrameInput) -> Result<Vec<Vec3>> {
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        let out = self.forward(&tape, &bound, input)?;
        crate::geometry::points_from_tensor(&out.last().value())
    }
}

/// Attention block result with the normalized weights for inspection.
pub struct AttnOut<'t> {
    pub out: Var<'t>,
    pub weights: Var<'t>,
}

fn heads<'t>(x: Var<'t>, n_heads: usize) -> Result<Var<'t>> {
    let s = x.shape();
    x.reshape(&[s[0], n_heads, s[1] / n_heads])?.permute(&[1, 0, 2])
}

fn multi_head<'t>(
    q_in: Var<'t>,
    kv_in: Var<'t>,
    params: &BoundParams<'t>,
    prefix: &str,
    n_heads: usize,
) -> Result<AttnOut<'t>> {
    let d = q_in.shape()[1];
    let dh = d / n_heads;
    let q = heads(q_in.matmul(params.get(&format!("{prefix}.q"))?)?, n_heads)?;
    let k = heads(kv_in.matmul(params.get(&format!("{prefix}.k"))?)?, n_heads)?;
    let v = heads(kv_in.matmul(params.get(&format!("{prefix}.v"))?)?, n_heads)?;
    let scores = q.matmul(k.permute(&[0, 2, 1])?)?.scale(1.0 / (dh as f64).sqrt());
    let weights = scores.softmax(2)?;
    let n = q_in.shape()[0];
    let mixed = weights.matmul(v)?.permute(&[1, 0, 2])?.reshape(&[n, d])?;
    let out = mixed.matmul(params.get(&format!("{prefix}.o"))?)?;
    Ok(AttnOut { out, weights })
}

/// `E + MHA(LN(E), LN(E), LN(E))`; weights are `[heads, Q, Q]`.
pub fn self_attention<'t>(e: Var<'t>, params: &BoundParams<'t>, prefix: &str, n_heads: usize) -> Result<AttnOut<'t>> {
    let x = e.layer_norm(LN_EPS)?;
    let a = multi_head(x, x, params, &format!("{prefix}.sa"), n_heads)?;
    Ok(AttnOut {
        out: e.add(a.out)?,
        weights: a.weights,
    })
}

/// `E + MHA(LN(E), F_P, F_P)`; weights are `[heads, Q, M]`.
pub fn cross_attention<'t>(
    e: Var<'t>,
    f_p: Var<'t>,
    params: &BoundParams<'t>,
    prefix: &str,
    n_heads: usize,
) -> Result<AttnOut<'t>> {
    let x = e.layer_norm(LN_EPS)?;
    let a = multi_head(x, f_p, params, &format!("{prefix}.ca"), n_heads)?;
    Ok(AttnOut {
        out: e.add(a.out)?,
        weights: a.weights,
    })
}

/// Indices of the `k` basis points nearest each query, nearest first, ties to the lower index.
pub fn knn(x: &[Vec3], p: &[Vec3], k: usize) -> Vec<Vec<usize>> {
    x.iter()
        .map(|xi| {
            let mut order: Vec<(f64, usize)> = p.iter().enumerate().map(|(j, pj)| ((xi - pj).norm_squared(), j)).collect();
            let k = k.min(order.len());
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < order.len() {
                order.select_nth_unstable_by(k, cmp);
                order.truncate(k);
            }
            order.sort_by(cmp);
            order.into_iter().map(|(_, j)| j).collect()
        })
        .collect()
}

/// Vector attention over each query's neighbor set.
///
/// `x_rel: [Q, 3]` and `p_rel: [M, 3]` are root-relative and scaled by
/// `1/coord_scale` before entering the position MLP ξ. Weights are `[Q, k, d]`,
/// normalized over the neighbor axis.
#[allow(clippy::too_many_arguments)]
pub fn vector_attention<'t>(
    e: Var<'t>,
    x_rel: Var<'t>,
    p_rel: Var<'t>,
    f_p: Var<'t>,
    neighbors: &[Vec<usize>],
    params: &BoundParams<'t>,
    prefix: &str,
    coord_scale: f64,
) -> Result<AttnOut<'t>> {
    let nq = e.shape()[0];
    let d = e.shape()[1];
    let k = neighbors.first().map_or(0, Vec::len);
    if neighbors.len() != nq || k == 0 || neighbors.iter().any(|n| n.len() != k) {
        return Err(Error::InvalidInput(format!(
            "vector attention needs {nq} neighbor lists of equal nonzero length"
        )));
    }
    let g = |s: &str| params.get(&format!("{prefix}.va.{s}"));
    let flat: Vec<usize> = neighbors.iter().flatten().copied().collect();
    let rep: Vec<usize> = (0..nq).flat_map(|i| std::iter::repeat_n(i, k)).collect();

    let diff = x_rel
        .index_select(0, &rep)?
        .sub(p_rel.index_select(0, &flat)?)?
        .scale(1.0 / coord_scale);
    let hidden = diff.matmul(g("xi1")?)?.add(g("xi1_b")?)?.relu();
    let delta = hidden.matmul(g("xi2")?)?.add(g("xi2_b")?)?.reshape(&[nq, k, d])?;

    let x = e.layer_norm(LN_EPS)?;
    let a = x.matmul(g("alpha")?)?.reshape(&[nq, 1, d])?;
    let b = f_p.matmul(g("beta")?)?.index_select(0, &flat)?.reshape(&[nq, k, d])?;
    let v = f_p.matmul(g("psi")?)?.index_select(0, &flat)?.reshape(&[nq, k, d])?;
    let logits = a.sub(b)?.add(delta)?.matmul(g("gamma")?)?;
    let axis = if faults::active(Fault::VectorAttentionWrongAxis) { 2 } else { 1 };
    let weights = logits.softmax(axis)?;
    let mixed = weights.mul(v.add(delta)?)?.sum_axis(1, false)?;
    Ok(AttnOut {
        out: e.add(mixed)?,
        weights,
    })
}

/// `X_rel + scale·FFN(LN(E))` with a two-layer MLP `d → d → 3`.
pub fn ffn_update<'t>(
    e: Var<'t>,
    x_rel: Var<'t>,
    params: &BoundParams<'t>,
    prefix: &str,
    coord_scale: f64,
) -> Result<Var<'t>> {
    let g = |s: &str| params.get(&format!("{prefix}.ffn.{s}"));
    let h = e.layer_norm(LN_EPS)?.matmul(g("w1")?)?.add(g("b1")?)?.relu();
    let step = h.matmul(g("w2")?)?.add(g("b2")?)?;
    x_rel.add(step.scale(coord_scale))
}

/// Regresses toy-hand pose and shape from mean-pooled embeddings and skins them.
pub fn mano_head<'t>(
    e: Var<'t>,
    params: &BoundParams<'t>,
    hand: &ToyHand,
    root: Var<'t>,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let q = e.shape()[0];
    let pooled = e.sum_axis(0, true)?.scale(1.0 / q as f64);
    let theta = pooled
        .matmul(params.get("mano.theta")?)?
        .add(params.get("mano.theta_b")?)?
        .reshape(&[N_KIN, 3])?;
    let beta = pooled
        .matmul(params.get("mano.beta")?)?
        .add(params.get("mano.beta_b")?)?
        .reshape(&[N_SHAPE])?;
    let points = hand.lbs(theta, beta, root)?;
    Ok((theta, beta, points))
}

/// Runs all decoder layers from the template and returns `X = X_rel + R` per layer.
#[allow(clippy::too_many_arguments)]
pub fn decoder_forward<'t>(
    tape: &'t Tape,
    params: &BoundParams<'t>,
    config: &ModelConfig,
    hand: &ToyHand,
    template: &Tensor,
    f_p: Var<'t>,
    p: &[Vec3],
    root: &Vec3,
) -> Result<DecoderOutput<'t>> {
    if template.shape() != [config.q, 3] {
        return Err(Error::shape("decoder template", template.shape(), &[config.q, 3]));
    }
    if f_p.shape() != [p.len(), config.d] {
        return Err(Error::shape("decoder basis features", &f_p.shape(), &[p.len(), config.d]));
    }
    let scale = config.radius();
    let p_rel_pts: Vec<Vec3> = p.iter().map(|pj| pj - root).collect();
    let p_rel = tape.constant(points_to_tensor(&p_rel_pts));
    let r = tape.constant(Tensor::new(&[1, 3], vec![root.x, root.y, root.z])?);
    let mut e = params.get("queries.emb")?;
    let mut x_rel = tape.constant(template.clone());
    let mut layers = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let prefix = format!("dec.{l}");
        e = self_attention(e, params, &prefix, config.n_heads)?.out;
        e = cross_attention(e, f_p, params, &prefix, config.n_heads)?.out;
        let current = crate::geometry::points_from_tensor(&x_rel.value())?;
        let nbrs = knn(&current, &p_rel_pts, config.k);
        e = vector_attention(e, x_rel, p_rel, f_p, &nbrs, params, &prefix, scale)?.out;
        x_rel = ffn_update(e, x_rel, params, &prefix, scale)?;
        layers.push(x_rel.add(r)?);
    }
    if config.mano_head {
        let (_, _, pts) = mano_head(e, params, hand, r.reshape(&[3])?)?;
        *layers.last_mut().expect("layers >= 1") = pts;
    }
    Ok(DecoderOutput { layers, embeddings: e })
}

/// Mean per-point Euclidean distance, averaged over layers when `deep` is set.
pub fn query_loss<'t>(out: &DecoderOutput<'t>, gt: &Tensor, deep: bool) -> Result<Var<'t>> {
    let tape = out.last().tape();
    let target = tape.constant(gt.clone());
    let used: Vec<Var<'t>> = if deep { out.layers.clone() } else { vec![out.last()] };
    let n = used.len() as f64;
    let mut total: Option<Var<'t>> = None;
    for x in used {
        let l = mean_l2(x, target)?;
        total = Some(match total {
            Some(t) => t.add(l)?,
            None => l,
        });
    }
    Ok(total.expect("at least one layer").scale(1.0 / n))
}

/// Mean over rows of `‖a_i − b_i‖₂`, smoothed by a tiny constant at zero.
pub fn mean_l2<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    Ok(a.sub(b)?.square().sum_axis(1, false)?.add_scalar(1e-18).sqrt().mean())
}
