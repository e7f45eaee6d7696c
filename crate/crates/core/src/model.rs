//! Tiny decoder-only transformer, its conversion to Mix-MoE, and greedy
//! decoding.
//!
//! Parameters live in a single [`ParamStore`] under hierarchical names; the
//! block structure is recovered from those names by [`Model::from_store`], so
//! conversion and checkpoint loading share one code path.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{
    mix_moe_forward, spawn_mt_group, upcycle_ffn, expert_forward, Combine, ExpertGroup, FfnBias, FfnTensors,
    GatedFfn, GroupRole, MixMoeLayer, MoeStage, RouterWeights, RoutingDecision,
};
use crate::spectral::{FeatureTransform, FeatureTransformKind};
use crate::tensor::{ParamId, ParamStore, Segment, Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    Uniform,
    Bottom,
    Top,
    DenseBottomSparseTop,
}

impl Placement {
    pub const ALL: [Placement; 4] = [
        Placement::Uniform,
        Placement::Bottom,
        Placement::Top,
        Placement::DenseBottomSparseTop,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Placement::Uniform => "uniform",
            Placement::Bottom => "bottom",
            Placement::Top => "top",
            Placement::DenseBottomSparseTop => "dense_bottom_sparse_top",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.label() == s)
    }

    /// 0-based indices of the blocks that become MoE layers.
    pub fn layers(self, n_layers: usize, interval: usize) -> Vec<usize> {
        match self {
            Placement::Uniform if interval > 0 => (0..n_layers).filter(|i| (i + 1) % interval == 0).collect(),
            Placement::Uniform => Vec::new(),
            Placement::Bottom => (0..n_layers.min(4)).collect(),
            Placement::Top => (n_layers.saturating_sub(4)..n_layers).collect(),
            Placement::DenseBottomSparseTop => [1, 3, 5, 7].into_iter().filter(|&i| i < n_layers).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub moe_interval: usize,
    pub moe_placement: Placement,
    pub n_experts_per_group: usize,
    pub top_k: usize,
    pub transform: FeatureTransformKind,
    pub ffn_bias: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::data::VOCAB_SIZE,
            d_model: 64,
            d_ff: 256,
            n_layers: 8,
            n_heads: 4,
            max_seq_len: 128,
            moe_interval: 4,
            moe_placement: Placement::Uniform,
            n_experts_per_group: 4,
            top_k: 1,
            transform: FeatureTransformKind::Fft,
            ffn_bias: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn moe_layers(&self) -> Vec<usize> {
        self.moe_placement.layers(self.n_layers, self.moe_interval)
    }

    /// Checks every constraint and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
            ("n_experts_per_group", self.n_experts_per_group),
            ("top_k", self.top_k),
        ] {
            if v == 0 {
                bad.push(format!("{name} must be positive"));
            }
        }
        if self.n_heads > 0 && !self.d_model.is_multiple_of(self.n_heads) {
            bad.push(format!("d_model={} not divisible by n_heads={}", self.d_model, self.n_heads));
        }
        if self.transform == FeatureTransformKind::Fft && !self.d_model.is_power_of_two() {
            bad.push(format!("d_model={} must be a power of two for fft routing", self.d_model));
        }
        if self.n_experts_per_group > 0 && !self.d_ff.is_multiple_of(self.n_experts_per_group) {
            bad.push(format!(
                "d_ff={} not divisible by n_experts_per_group={}",
                self.d_ff, self.n_experts_per_group
            ));
        }
        if self.top_k > self.n_experts_per_group {
            bad.push(format!("top_k={} exceeds n_experts_per_group={}", self.top_k, self.n_experts_per_group));
        }
        if self.moe_layers().is_empty() {
            bad.push(format!("placement {} selects no layers", self.moe_placement.label()));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    fn transform_for(&self, layer: usize) -> Result<FeatureTransform> {
        FeatureTransform::new(
            self.transform,
            self.d_model,
            self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ layer as u64,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FfnSlot {
    Dense(GatedFfn),
    Moe(MixMoeLayer),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub attn_norm: ParamId,
    pub attn: Attention,
    pub ffn_norm: ParamId,
    pub ffn: FfnSlot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub final_norm: ParamId,
    pub blocks: Vec<TransformerBlock>,
}

fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Manifest(format!("missing parameter {name}")))
}

fn lookup_ffn(store: &ParamStore, prefix: &str) -> Result<GatedFfn> {
    let bias = match store.id(&format!("{prefix}.b_gate")) {
        Some(b_gate) => Some(FfnBias {
            b_gate,
            b_up: lookup(store, &format!("{prefix}.b_up"))?,
            b_down: lookup(store, &format!("{prefix}.b_down"))?,
        }),
        None => None,
    };
    Ok(GatedFfn {
        w_gate: lookup(store, &format!("{prefix}.w_gate"))?,
        w_up: lookup(store, &format!("{prefix}.w_up"))?,
        w_down: lookup(store, &format!("{prefix}.w_down"))?,
        bias,
    })
}

fn lookup_group(store: &ParamStore, prefix: &str, role: GroupRole, n: usize) -> Result<Option<ExpertGroup>> {
    let Some(weight) = store.id(&format!("{prefix}.router.weight")) else {
        return Ok(None);
    };
    let router = RouterWeights {
        weight,
        bias: lookup(store, &format!("{prefix}.router.bias"))?,
    };
    let experts = (0..n)
        .map(|e| lookup_ffn(store, &format!("{prefix}.experts.{e}")))
        .collect::<Result<Vec<_>>>()?;
    if store.id(&format!("{prefix}.experts.{n}.w_gate")).is_some() {
        return Err(Error::Manifest(format!("{prefix} holds more than {n} experts")));
    }
    Ok(Some(ExpertGroup {
        role,
        experts,
        router,
        trainable: store.get(weight).requires_grad(),
    }))
}

impl Model {
    /// Reassembles the block structure from parameter names, checking every
    /// shape against `cfg`.
    pub fn from_store(cfg: ModelConfig, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        let mut expected: Vec<(String, Vec<usize>)> = vec![
            ("tok_emb".into(), vec![v, d]),
            ("pos_emb".into(), vec![cfg.max_seq_len, d]),
            ("final_norm".into(), vec![d]),
        ];
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let p = format!("blocks.{i}");
            let attn = Attention {
                wq: lookup(&store, &format!("{p}.attn.wq"))?,
                wk: lookup(&store, &format!("{p}.attn.wk"))?,
                wv: lookup(&store, &format!("{p}.attn.wv"))?,
                wo: lookup(&store, &format!("{p}.attn.wo"))?,
            };
            for w in ["wq", "wk", "wv", "wo"] {
                expected.push((format!("{p}.attn.{w}"), vec![d, d]));
            }
            expected.push((format!("{p}.attn_norm"), vec![d]));
            expected.push((format!("{p}.ffn_norm"), vec![d]));
            let n = cfg.n_experts_per_group;
            let lm = lookup_group(&store, &format!("{p}.moe.lm"), GroupRole::Lm, n)?;
            let ffn = match lm {
                Some(lm) => {
                    let mt = lookup_group(&store, &format!("{p}.moe.mt"), GroupRole::Mt, n)?;
                    for (role, g) in [("lm", Some(&lm)), ("mt", mt.as_ref())] {
                        if g.is_some() {
                            expected.push((format!("{p}.moe.{role}.router.weight"), vec![n, 2 * d]));
                            expected.push((format!("{p}.moe.{role}.router.bias"), vec![n]));
                            for e in 0..n {
                                push_ffn_shapes(&mut expected, &format!("{p}.moe.{role}.experts.{e}"), &cfg, cfg.d_ff / n);
                            }
                        }
                    }
                    FfnSlot::Moe(MixMoeLayer {
                        lm,
                        mt,
                        top_k: cfg.top_k,
                        transform: cfg.transform_for(i)?,
                    })
                }
                None => {
                    push_ffn_shapes(&mut expected, &format!("{p}.ffn"), &cfg, cfg.d_ff);
                    FfnSlot::Dense(lookup_ffn(&store, &format!("{p}.ffn"))?)
                }
            };
            blocks.push(TransformerBlock {
                attn_norm: lookup(&store, &format!("{p}.attn_norm"))?,
                attn,
                ffn_norm: lookup(&store, &format!("{p}.ffn_norm"))?,
                ffn,
            });
        }
        if expected.len() != store.len() {
            let known: BTreeSet<&str> = expected.iter().map(|(n, _)| n.as_str()).collect();
            let extra: Vec<&str> = store.iter().map(|(_, n, _)| n).filter(|n| !known.contains(n)).collect();
            return Err(Error::Manifest(format!("unexpected parameters {extra:?}")));
        }
        for (name, shape) in expected {
            let t = store.by_name(&name).ok_or_else(|| Error::Manifest(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            tok_emb: lookup(&store, "tok_emb")?,
            pos_emb: lookup(&store, "pos_emb")?,
            final_norm: lookup(&store, "final_norm")?,
            cfg,
            store,
            blocks,
        })
    }

    pub fn moe_layers(&self) -> impl Iterator<Item = (usize, &MixMoeLayer)> {
        self.blocks.iter().enumerate().filter_map(|(i, b)| match &b.ffn {
            FfnSlot::Moe(m) => Some((i, m)),
            FfnSlot::Dense(_) => None,
        })
    }

    pub fn is_dense(&self) -> bool {
        self.moe_layers().next().is_none()
    }

    pub fn has_mt(&self) -> bool {
        self.moe_layers().any(|(_, m)| m.mt.is_some())
    }

    /// Parameter ids of every group with the given role.
    pub fn group_params(&self, role: GroupRole) -> Vec<ParamId> {
        self.moe_layers()
            .flat_map(|(_, m)| match role {
                GroupRole::Lm => Some(&m.lm),
                GroupRole::Mt => m.mt.as_ref(),
            })
            .flat_map(ExpertGroup::param_ids)
            .collect()
    }

    /// Creates an MT group in every MoE layer as a copy of its LM group; only
    /// the new groups stay trainable.
    pub fn spawn_mt_groups(&mut self) -> Result<()> {
        if self.is_dense() {
            return Err(Error::Config("cannot spawn MT experts in a dense model".into()));
        }
        if self.has_mt() {
            return Err(Error::Lineage("model already has MT experts".into()));
        }
        for (i, block) in self.blocks.iter_mut().enumerate() {
            if let FfnSlot::Moe(layer) = &mut block.ffn {
                layer.mt = Some(spawn_mt_group(&mut self.store, &mut layer.lm, &format!("blocks.{i}.moe.mt"))?);
            }
        }
        let mt: BTreeSet<ParamId> = self.group_params(GroupRole::Mt).into_iter().collect();
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            self.store.set_trainable(id, mt.contains(&id));
        }
        Ok(())
    }
}

fn push_ffn_shapes(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, cfg: &ModelConfig, width: usize) {
    let d = cfg.d_model;
    out.push((format!("{prefix}.w_gate"), vec![d, width]));
    out.push((format!("{prefix}.w_up"), vec![d, width]));
    out.push((format!("{prefix}.w_down"), vec![width, d]));
    if cfg.ffn_bias {
        out.push((format!("{prefix}.b_gate"), vec![width]));
        out.push((format!("{prefix}.b_up"), vec![width]));
        out.push((format!("{prefix}.b_down"), vec![d]));
    }
}

/// Dense model with N(0, 0.02²) matrices, unit norm weights and zero biases.
pub fn build_dense_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (d, ff) = (cfg.d_model, cfg.d_ff);
    let mut store = ParamStore::new();
    let mut randn = |shape: Vec<usize>| Tensor::randn(shape, INIT_STD, &mut rng);
    store.add("tok_emb", randn(vec![cfg.vocab_size, d])?)?;
    store.add("pos_emb", randn(vec![cfg.max_seq_len, d])?)?;
    for i in 0..cfg.n_layers {
        let p = format!("blocks.{i}");
        store.add(format!("{p}.attn_norm"), Tensor::new(vec![d], vec![1.0; d])?)?;
        for w in ["wq", "wk", "wv", "wo"] {
            store.add(format!("{p}.attn.{w}"), randn(vec![d, d])?)?;
        }
        store.add(format!("{p}.ffn_norm"), Tensor::new(vec![d], vec![1.0; d])?)?;
        let ffn = FfnTensors {
            w_gate: randn(vec![d, ff])?,
            w_up: randn(vec![d, ff])?,
            w_down: randn(vec![ff, d])?,
            bias: if cfg.ffn_bias {
                Some([Tensor::zeros(vec![ff])?, Tensor::zeros(vec![ff])?, Tensor::zeros(vec![d])?])
            } else {
                None
            },
        };
        ffn.register(&mut store, &format!("{p}.ffn"))?;
    }
    store.add("final_norm", Tensor::new(vec![d], vec![1.0; d])?)?;
    Model::from_store(cfg.clone(), store)
}

/// Upcycles the FFN of every block selected by `cfg.moe_placement` into an
/// LM expert group with a zero-initialized router. Afterwards only the LM
/// groups are trainable.
pub fn convert_to_mixmoe(model: &Model) -> Result<Model> {
    if !model.is_dense() {
        return Err(Error::Lineage("model is already a Mix-MoE model".into()));
    }
    let cfg = &model.cfg;
    let selected: BTreeSet<usize> = cfg.moe_layers().into_iter().collect();
    if selected.is_empty() {
        return Err(Error::Config("placement selects no layers".into()));
    }
    let n = cfg.n_experts_per_group;
    let mut store = ParamStore::new();
    let mut lm_ids = Vec::new();
    let mut pending: Vec<(usize, GatedFfn)> = Vec::new();
    for (i, block) in model.blocks.iter().enumerate() {
        if let (true, FfnSlot::Dense(f)) = (selected.contains(&i), &block.ffn) {
            pending.push((i, f.clone()));
        }
    }
    let skip: BTreeSet<ParamId> = pending.iter().flat_map(|(_, f)| f.param_ids()).collect();
    for (id, name, t) in model.store.iter() {
        if skip.contains(&id) {
            // Insert the experts where the dense FFN sat so names stay grouped.
            if let Some(pos) = pending.iter().position(|(_, f)| f.w_gate == id) {
                let (i, f) = pending[pos].clone();
                let mut scratch = ParamStore::new();
                let dense = FfnTensors::from_store(&model.store, &f).register(&mut scratch, "dense")?;
                let prefix = format!("blocks.{i}.moe.lm");
                let experts = upcycle_ffn(&mut scratch, &dense, n, &prefix)?;
                for e in &experts {
                    for pid in e.param_ids() {
                        lm_ids.push(store.add(scratch.name(pid).to_string(), scratch.get(pid).clone())?);
                    }
                }
                let router = RouterWeights::zeros(&mut store, &format!("{prefix}.router"), n, cfg.d_model)?;
                lm_ids.extend([router.weight, router.bias]);
            }
            continue;
        }
        let mut t = t.clone();
        t.set_requires_grad(false);
        store.add(name.to_string(), t)?;
    }
    for id in lm_ids {
        store.set_trainable(id, true);
    }
    Model::from_store(cfg.clone(), store)
}

/// Packed token rows of one or more sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Arc<[Segment]>,
}

impl Batch {
    pub fn new<S: AsRef<[usize]>>(seqs: &[S]) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(|s| s.as_ref().is_empty()) {
            return Err(Error::DegenerateBatch("batch holds an empty sequence".into()));
        }
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = s.as_ref();
            segments.push(Segment {
                start: tokens.len(),
                len: s.len(),
            });
            tokens.extend_from_slice(s);
            positions.extend(0..s.len());
        }
        Ok(Self {
            tokens,
            positions,
            segments: segments.into(),
        })
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    /// Index of the last row of every sequence.
    pub fn last_rows(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.start + s.len - 1).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ForwardOptions {
    /// Run only the LM groups even when MT groups exist.
    pub lm_only: bool,
    pub combine: Combine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRouting {
    pub layer: usize,
    pub lm: RoutingDecision,
    pub mt: Option<RoutingDecision>,
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Mean LM-group load-balance loss over MoE layers.
    pub lb_lm: Option<Var>,
    /// Mean MT-group load-balance loss over MoE layers.
    pub lb_mt: Option<Var>,
    pub routing: Vec<LayerRouting>,
}

fn mean_of(tape: &mut Tape<'_>, vars: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = vars.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &v in rest {
        acc = tape.add(acc, v)?;
    }
    Ok(Some(tape.scale(acc, 1.0 / vars.len() as f64)?))
}

/// Causal LM forward over a packed batch, recorded on `tape`.
pub fn forward(model: &Model, tape: &mut Tape<'_>, batch: &Batch, opts: ForwardOptions) -> Result<ForwardOutput> {
    let cfg = &model.cfg;
    for seg in batch.segments.iter() {
        if seg.len > cfg.max_seq_len {
            return Err(Error::SequenceLength {
                len: seg.len,
                max: cfg.max_seq_len,
            });
        }
    }
    if let Some(t) = batch.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Vocabulary(format!("token {t} outside vocabulary of {}", cfg.vocab_size)));
    }
    let tok = tape.param(model.tok_emb);
    let pos = tape.param(model.pos_emb);
    let e_tok = tape.gather_rows(tok, batch.tokens.clone())?;
    let e_pos = tape.gather_rows(pos, batch.positions.clone())?;
    let mut h = tape.add(e_tok, e_pos)?;
    let (mut lb_lm, mut lb_mt, mut routing) = (Vec::new(), Vec::new(), Vec::new());
    for (i, block) in model.blocks.iter().enumerate() {
        let w = tape.param(block.attn_norm);
        let x = tape.rms_norm(h, w)?;
        let (wq, wk, wv, wo) = (
            tape.param(block.attn.wq),
            tape.param(block.attn.wk),
            tape.param(block.attn.wv),
            tape.param(block.attn.wo),
        );
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let a = tape.causal_attention(q, k, v, batch.segments.clone(), cfg.n_heads)?;
        let a = tape.matmul(a, wo)?;
        h = tape.add(h, a)?;

        let w = tape.param(block.ffn_norm);
        let x = tape.rms_norm(h, w)?;
        let y = match &block.ffn {
            FfnSlot::Dense(f) => expert_forward(tape, f, x)?,
            FfnSlot::Moe(layer) => {
                let stage = match (&layer.mt, opts.lm_only) {
                    (Some(_), false) => MoeStage::Two,
                    (Some(_), true) => MoeStage::LmOnly,
                    (None, _) => MoeStage::One,
                };
                let out = mix_moe_forward(tape, layer, x, stage, opts.combine)?;
                lb_lm.push(out.lm.load_balance);
                if let Some(mt) = &out.mt {
                    lb_mt.push(mt.load_balance);
                }
                routing.push(LayerRouting {
                    layer: i,
                    lm: out.lm.decision,
                    mt: out.mt.map(|g| g.decision),
                });
                out.out
            }
        };
        h = tape.add(h, y)?;
    }
    let w = tape.param(model.final_norm);
    let h = tape.rms_norm(h, w)?;
    let logits = tape.matmul_nt(h, tok)?;
    Ok(ForwardOutput {
        logits,
        lb_lm: mean_of(tape, &lb_lm)?,
        lb_mt: mean_of(tape, &lb_mt)?,
        routing,
    })
}

/// Logits `[T×V]` for a single sequence.
pub fn logits(model: &Model, tokens: &[usize], opts: ForwardOptions) -> Result<Tensor> {
    let batch = Batch::new(&[tokens])?;
    let mut tape = Tape::new(&model.store);
    let out = forward(model, &mut tape, &batch, opts)?;
    Ok(tape.tensor(out.logits))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of every prompt in lockstep. Each returned sequence holds
/// only the generated tokens, including the stop token when reached.
pub fn generate_greedy_batch(
    model: &Model,
    prompts: &[Vec<usize>],
    max_new: usize,
    stop_token: usize,
    opts: ForwardOptions,
) -> Result<Vec<Vec<usize>>> {
    if prompts.iter().any(Vec::is_empty) {
        return Err(Error::Contract("generation needs a non-empty prompt".into()));
    }
    let mut seqs: Vec<Vec<usize>> = prompts.to_vec();
    let mut out = vec![Vec::new(); prompts.len()];
    let mut active: Vec<usize> = (0..prompts.len()).collect();
    for _ in 0..max_new {
        active.retain(|&i| seqs[i].len() < model.cfg.max_seq_len);
        if active.is_empty() {
            break;
        }
        let batch = Batch::new(&active.iter().map(|&i| seqs[i].as_slice()).collect::<Vec<_>>())?;
        let mut tape = Tape::new(&model.store);
        let fwd = forward(model, &mut tape, &batch, opts)?;
        let v = model.cfg.vocab_size;
        let lv = tape.value(fwd.logits);
        let mut still = Vec::with_capacity(active.len());
        for (&i, r) in active.iter().zip(batch.last_rows()) {
            let next = argmax(&lv[r * v..(r + 1) * v]);
            seqs[i].push(next);
            out[i].push(next);
            if next != stop_token {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(out)
}

/// Greedy decoding of one prompt; returns prompt plus generated tokens.
pub fn generate_greedy(
    model: &Model,
    prompt: &[usize],
    max_new: usize,
    stop_token: usize,
    opts: ForwardOptions,
) -> Result<Vec<usize>> {
    let gen = generate_greedy_batch(model, &[prompt.to_vec()], max_new, stop_token, opts)?;
    let mut seq = prompt.to_vec();
    seq.extend(&gen[0]);
    Ok(seq)
}
