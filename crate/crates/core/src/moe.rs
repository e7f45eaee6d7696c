//! The dual-group mixture-of-experts layer.
//!
//! Each MoE layer holds an LM expert group and, from stage 2 on, an MT expert
//! group. Both groups route independently on `[h; f(h)]` where `f` is the
//! layer's spectral feature transform, pick their top-k experts per token and
//! weight each selected expert by its (un-renormalized) routing probability.
//! Group outputs are summed.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::FeatureTransform;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Gate/up/down projections of a gated feed-forward network; used both for
/// dense FFN blocks and for individual experts.
///
/// Shapes follow `x·W`: `w_gate`, `w_up` are `d_model×width`, `w_down` is
/// `width×d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedFfn {
    pub w_gate: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
    pub bias: Option<FfnBias>,
}

pub type ExpertWeights = GatedFfn;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FfnBias {
    pub b_gate: ParamId,
    pub b_up: ParamId,
    pub b_down: ParamId,
}

impl GatedFfn {
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w_gate, self.w_up, self.w_down];
        if let Some(b) = self.bias {
            ids.extend([b.b_gate, b.b_up, b.b_down]);
        }
        ids
    }

    /// Inner (hidden) width.
    pub fn width(&self, store: &ParamStore) -> usize {
        store.get(self.w_gate).cols()
    }
}

/// Owned tensors of one gated FFN, before registration in a store.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnTensors {
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
    pub bias: Option<[Tensor; 3]>,
}

impl FfnTensors {
    pub fn from_store(store: &ParamStore, ffn: &GatedFfn) -> Self {
        Self {
            w_gate: store.get(ffn.w_gate).clone(),
            w_up: store.get(ffn.w_up).clone(),
            w_down: store.get(ffn.w_down).clone(),
            bias: ffn
                .bias
                .map(|b| [b.b_gate, b.b_up, b.b_down].map(|id| store.get(id).clone())),
        }
    }

    pub fn register(self, store: &mut ParamStore, prefix: &str) -> Result<GatedFfn> {
        let w_gate = store.add(format!("{prefix}.w_gate"), self.w_gate)?;
        let w_up = store.add(format!("{prefix}.w_up"), self.w_up)?;
        let w_down = store.add(format!("{prefix}.w_down"), self.w_down)?;
        let bias = match self.bias {
            Some([g, u, d]) => Some(FfnBias {
                b_gate: store.add(format!("{prefix}.b_gate"), g)?,
                b_up: store.add(format!("{prefix}.b_up"), u)?,
                b_down: store.add(format!("{prefix}.b_down"), d)?,
            }),
            None => None,
        };
        Ok(GatedFfn {
            w_gate,
            w_up,
            w_down,
            bias,
        })
    }
}

/// Linear routing network `logits = W_g·[h; f] + b_g`, `W_g: n×2d`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RouterWeights {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl RouterWeights {
    pub fn zeros(store: &mut ParamStore, prefix: &str, n_experts: usize, d_model: usize) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{prefix}.weight"), Tensor::zeros(vec![n_experts, 2 * d_model])?)?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(vec![n_experts])?)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupRole {
    Lm,
    Mt,
}

impl GroupRole {
    pub fn label(self) -> &'static str {
        match self {
            GroupRole::Lm => "lm",
            GroupRole::Mt => "mt",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertGroup {
    pub role: GroupRole,
    pub experts: Vec<ExpertWeights>,
    pub router: RouterWeights,
    pub trainable: bool,
}

impl ExpertGroup {
    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.experts.iter().flat_map(GatedFfn::param_ids).collect();
        ids.extend([self.router.weight, self.router.bias]);
        ids
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixMoeLayer {
    pub lm: ExpertGroup,
    pub mt: Option<ExpertGroup>,
    pub top_k: usize,
    pub transform: FeatureTransform,
}

/// Which groups a forward pass runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MoeStage {
    /// LM group only; the MT group must be absent.
    One,
    /// LM + MT groups; the MT group must be present.
    Two,
    /// LM group only, whether or not an MT group exists (frozen-path probe).
    LmOnly,
}

/// How selected experts are merged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Combine {
    #[default]
    Routed,
    /// Every expert processes every token with weight 1. Upcycled experts then
    /// reproduce the dense FFN exactly.
    SumAll,
}

/// Router outputs for one group over `tokens` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    pub n_experts: usize,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// Per token, the chosen experts in descending probability order.
    pub selected: Vec<Vec<usize>>,
}

impl RoutingDecision {
    pub fn tokens(&self) -> usize {
        self.selected.len()
    }

    pub fn top1(&self) -> impl Iterator<Item = usize> + '_ {
        self.selected.iter().map(|s| s[0])
    }

    pub fn prob(&self, token: usize, expert: usize) -> f64 {
        self.probs[token * self.n_experts + expert]
    }

    pub fn top1_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_experts];
        for e in self.top1() {
            counts[e] += 1;
        }
        counts
    }
}

/// Indices of the `k` largest entries, ties broken toward the lower index.
pub fn select_top_k(probs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `W_d·(φ(W_r·h) ⊙ W_u·h)` for each row of `h`, biases added when present.
pub fn expert_forward(tape: &mut Tape<'_>, ffn: &GatedFfn, h: Var) -> Result<Var> {
    let w_gate = tape.param(ffn.w_gate);
    let w_up = tape.param(ffn.w_up);
    let w_down = tape.param(ffn.w_down);
    let mut gate = tape.matmul(h, w_gate)?;
    let mut up = tape.matmul(h, w_up)?;
    if let Some(b) = ffn.bias {
        let (bg, bu) = (tape.param(b.b_gate), tape.param(b.b_up));
        gate = tape.add_bias(gate, bg)?;
        up = tape.add_bias(up, bu)?;
    }
    let act = tape.gelu(gate)?;
    let mixed = tape.mul(act, up)?;
    let mut out = tape.matmul(mixed, w_down)?;
    if let Some(b) = ffn.bias {
        let bd = tape.param(b.b_down);
        out = tape.add_bias(out, bd)?;
    }
    Ok(out)
}

/// Routing probabilities `softmax(W_g·[h; f(h)] + b_g)` and the top-k choice.
pub fn route(
    tape: &mut Tape<'_>,
    group: &ExpertGroup,
    h: Var,
    transform: &FeatureTransform,
    k: usize,
) -> Result<(RoutingDecision, Var)> {
    let n = group.n_experts();
    if k == 0 || k > n {
        return Err(Error::Config(format!("top_k={k} must lie in 1..={n}")));
    }
    let features = tape.row_map(h, Arc::new(transform.clone()))?;
    let concat = tape.concat_cols(h, features)?;
    let w = tape.param(group.router.weight);
    let b = tape.param(group.router.bias);
    let raw = tape.matmul_nt(concat, w)?;
    let logits = tape.add_bias(raw, b)?;
    let probs = tape.softmax(logits)?;
    let pv = tape.value(probs);
    let selected = pv.chunks(n).map(|row| select_top_k(row, k)).collect();
    let decision = RoutingDecision {
        n_experts: n,
        logits: tape.value(logits).to_vec(),
        probs: pv.to_vec(),
        selected,
    };
    Ok((decision, probs))
}

/// Switch-style balance penalty `n·Σ_i f_i·P_i`; `f` comes from the top-1
/// `selections` and is constant, `P` is differentiable.
pub fn load_balance_loss(tape: &mut Tape<'_>, probs: Var, selections: &[usize]) -> Result<Var> {
    if selections.is_empty() {
        return Err(Error::DegenerateBatch("load balance over zero tokens".into()));
    }
    let shape = tape.shape(probs).to_vec();
    let n = *shape.last().unwrap_or(&0);
    let rows: usize = shape[..shape.len().saturating_sub(1)].iter().product::<usize>().max(1);
    if rows != selections.len() {
        return Err(Error::Dimension {
            op: "load_balance_loss",
            lhs: shape,
            rhs: vec![selections.len()],
        });
    }
    let mut fraction = vec![0.0; n];
    for &s in selections {
        if s >= n {
            return Err(Error::Contract(format!("selected expert {s} out of range {n}")));
        }
        fraction[s] += 1.0;
    }
    fraction.iter_mut().for_each(|f| *f /= selections.len() as f64);
    tape.load_balance(probs, fraction)
}

/// Output of one expert group.
pub struct GroupOutput {
    pub out: Var,
    pub load_balance: Var,
    pub decision: RoutingDecision,
}

fn group_forward(
    tape: &mut Tape<'_>,
    group: &ExpertGroup,
    h: Var,
    transform: &FeatureTransform,
    k: usize,
    combine: Combine,
) -> Result<GroupOutput> {
    let rows = tape.shape(h)[0];
    let (decision, probs) = route(tape, group, h, transform, k)?;
    let mut parts = Vec::new();
    for (e, expert) in group.experts.iter().enumerate() {
        let tokens: Vec<usize> = match combine {
            Combine::Routed => (0..rows).filter(|&t| decision.selected[t].contains(&e)).collect(),
            Combine::SumAll => (0..rows).collect(),
        };
        if tokens.is_empty() {
            continue;
        }
        let x = tape.gather_rows(h, tokens.clone())?;
        let y = expert_forward(tape, expert, x)?;
        parts.push((y, e, tokens));
    }
    let weights = match combine {
        Combine::Routed => Some(probs),
        Combine::SumAll => None,
    };
    let out = tape.combine_experts(rows, weights, parts)?;
    let top1: Vec<usize> = decision.top1().collect();
    let load_balance = load_balance_loss(tape, probs, &top1)?;
    Ok(GroupOutput {
        out,
        load_balance,
        decision,
    })
}

pub struct MoeOutput {
    pub out: Var,
    pub lm: GroupOutput,
    pub mt: Option<GroupOutput>,
}

/// Runs the layer on `h: [T×d_model]`.
pub fn mix_moe_forward(
    tape: &mut Tape<'_>,
    layer: &MixMoeLayer,
    h: Var,
    stage: MoeStage,
    combine: Combine,
) -> Result<MoeOutput> {
    let mt_group = match (stage, &layer.mt) {
        (MoeStage::One, Some(_)) => {
            return Err(Error::Config("stage 1 forward on a layer that already has MT experts".into()))
        }
        (MoeStage::Two, None) => return Err(Error::Config("stage 2 forward needs an MT expert group".into())),
        (MoeStage::Two, Some(g)) => Some(g),
        _ => None,
    };
    let lm = group_forward(tape, &layer.lm, h, &layer.transform, layer.top_k, combine)?;
    let Some(g) = mt_group else {
        return Ok(MoeOutput {
            out: lm.out,
            lm,
            mt: None,
        });
    };
    let mt = group_forward(tape, g, h, &layer.transform, layer.top_k, combine)?;
    let out = tape.add(lm.out, mt.out)?;
    Ok(MoeOutput { out, lm, mt: Some(mt) })
}

/// Splits a dense gated FFN into `n` experts along the inner dimension:
/// expert `i` gets columns `[i·w, (i+1)·w)` of the gate/up matrices and the
/// matching rows of the down matrix. A down bias is shared out as `b/n`.
pub fn slice_gated_ffn(dense: &FfnTensors, n: usize) -> Result<Vec<FfnTensors>> {
    let (d_model, d_ff) = (dense.w_gate.rows(), dense.w_gate.cols());
    if dense.w_up.shape() != [d_model, d_ff] || dense.w_down.shape() != [d_ff, d_model] {
        return Err(Error::Dimension {
            op: "slice_gated_ffn",
            lhs: dense.w_up.shape().to_vec(),
            rhs: dense.w_down.shape().to_vec(),
        });
    }
    if n == 0 || d_ff % n != 0 {
        return Err(Error::Config(format!("d_ff={d_ff} is not divisible into {n} experts")));
    }
    let w = d_ff / n;
    let cols = |t: &Tensor, i: usize| -> Result<Tensor> {
        let data = (0..d_model)
            .flat_map(|r| t.row(r)[i * w..(i + 1) * w].iter().copied())
            .collect();
        Tensor::new(vec![d_model, w], data)
    };
    (0..n)
        .map(|i| {
            let down = Tensor::new(
                vec![w, d_model],
                dense.w_down.data()[i * w * d_model..(i + 1) * w * d_model].to_vec(),
            )?;
            let bias = match &dense.bias {
                Some([bg, bu, bd]) => Some([
                    Tensor::vector(bg.data()[i * w..(i + 1) * w].to_vec())?,
                    Tensor::vector(bu.data()[i * w..(i + 1) * w].to_vec())?,
                    Tensor::vector(bd.data().iter().map(|v| v / n as f64).collect())?,
                ]),
                None => None,
            };
            Ok(FfnTensors {
                w_gate: cols(&dense.w_gate, i)?,
                w_up: cols(&dense.w_up, i)?,
                w_down: down,
                bias,
            })
        })
        .collect()
}

/// Upcycles a dense FFN held in `store` into `n` experts registered under
/// `{prefix}.experts.{i}`.
pub fn upcycle_ffn(store: &mut ParamStore, dense: &GatedFfn, n: usize, prefix: &str) -> Result<Vec<ExpertWeights>> {
    let tensors = FfnTensors::from_store(store, dense);
    slice_gated_ffn(&tensors, n)?
        .into_iter()
        .enumerate()
        .map(|(i, t)| t.register(store, &format!("{prefix}.experts.{i}")))
        .collect()
}

/// Deep-copies an LM group into a new trainable MT group registered under
/// `prefix`, and marks the source group frozen.
pub fn spawn_mt_group(store: &mut ParamStore, lm: &mut ExpertGroup, prefix: &str) -> Result<ExpertGroup> {
    let mut experts = Vec::with_capacity(lm.experts.len());
    for (i, e) in lm.experts.iter().enumerate() {
        let t = FfnTensors::from_store(store, e);
        experts.push(t.register(store, &format!("{prefix}.experts.{i}"))?);
    }
    let w = store.get(lm.router.weight).clone();
    let b = store.get(lm.router.bias).clone();
    let router = RouterWeights {
        weight: store.add(format!("{prefix}.router.weight"), w)?,
        bias: store.add(format!("{prefix}.router.bias"), b)?,
    };
    lm.trainable = false;
    Ok(ExpertGroup {
        role: GroupRole::Mt,
        experts,
        router,
        trainable: true,
    })
}
