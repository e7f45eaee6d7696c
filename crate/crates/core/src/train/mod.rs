//! Optimization loop for both post-pretraining stages, plus the dense
//! full-finetune harness used for baselines and for building the base model.

mod checkpoint;

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EncodedExample;
use crate::error::{Error, Result};
use crate::model::{forward, Batch, ForwardOptions, Model};
use crate::moe::GroupRole;
use crate::tensor::{adamw_step, cosine_warmup_lr, AdamWConfig, OptimizerState, ParamId, Tape, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, ManifestEntry, RngState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub lambda_lb: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Train every parameter (dense baselines and base-model pretraining).
    pub train_all: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

impl StageConfig {
    pub fn stage1() -> Self {
        Self {
            stage: 1,
            learning_rate: 2e-4,
            batch_size: 64,
            steps: 3000,
            lambda_lb: 0.01,
            warmup_ratio: 0.03,
            weight_decay: 0.0,
            seed: 0,
            train_all: false,
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: 2,
            learning_rate: 1e-3,
            batch_size: 32,
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !matches!(self.stage, 1 | 2) {
            bad.push(format!("stage must be 1 or 2, got {}", self.stage));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bad.push("learning_rate must be positive".to_string());
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be positive".to_string());
        }
        if !(self.lambda_lb >= 0.0 && self.lambda_lb.is_finite()) {
            bad.push("lambda_lb must be non-negative".to_string());
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            bad.push("warmup_ratio must lie in [0, 1]".to_string());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            bad.push("weight_decay must be non-negative".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Per-parameter trainability derived from the stage and group roles.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeMask {
    trainable: Vec<bool>,
}

impl FreezeMask {
    pub fn for_stage(model: &Model, stage: u8, train_all: bool) -> Result<Self> {
        let n = model.store.len();
        if train_all {
            return Ok(Self { trainable: vec![true; n] });
        }
        let role = match stage {
            1 => GroupRole::Lm,
            2 => GroupRole::Mt,
            s => return Err(Error::Config(format!("no freeze mask for stage {s}"))),
        };
        let ids = model.group_params(role);
        if ids.is_empty() {
            return Err(Error::Config(format!("stage {stage} has no {} experts to train", role.label())));
        }
        let mut trainable = vec![false; n];
        for id in ids {
            trainable[id.index()] = true;
        }
        Ok(Self { trainable })
    }

    pub fn from_flags(trainable: Vec<bool>) -> Self {
        Self { trainable }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.index()]
    }

    pub fn flags(&self) -> &[bool] {
        &self.trainable
    }

    pub fn apply(&self, model: &mut Model) {
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            model.store.set_trainable(id, self.trainable[id.index()]);
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.trainable
            .iter()
            .enumerate()
            .filter(|(_, t)| **t)
            .map(|(i, _)| ParamId(i))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLoss {
    pub ce: f64,
    pub lb_lm: Option<f64>,
    pub lb_mt: Option<f64>,
    pub total: f64,
}

/// Stage 1: `ce + λ·lb_lm`; stage 2: `ce + λ·(lb_lm + lb_mt)`. Dense models
/// carry no balance terms.
pub fn compose_loss(ce: f64, lb_lm: Option<f64>, lb_mt: Option<f64>, stage: u8, lambda: f64) -> Result<StageLoss> {
    check_operands(lb_lm.is_some(), lb_mt.is_some(), stage)?;
    let aux = lb_lm.unwrap_or(0.0) + lb_mt.unwrap_or(0.0);
    Ok(StageLoss {
        ce,
        lb_lm,
        lb_mt,
        total: ce + lambda * aux,
    })
}

fn check_operands(lm: bool, mt: bool, stage: u8) -> Result<()> {
    match (stage, lm, mt) {
        (1, _, false) | (2, true, true) | (2, false, false) => Ok(()),
        (1, _, true) => Err(Error::Contract("stage 1 loss with an MT balance term".into())),
        (2, _, _) => Err(Error::Contract("stage 2 loss needs both balance terms".into())),
        (s, _, _) => Err(Error::Contract(format!("unknown stage {s}"))),
    }
}

fn compose_on_tape(
    tape: &mut Tape<'_>,
    ce: Var,
    lb_lm: Option<Var>,
    lb_mt: Option<Var>,
    stage: u8,
    lambda: f64,
) -> Result<Var> {
    check_operands(lb_lm.is_some(), lb_mt.is_some(), stage)?;
    let aux = match (lb_lm, lb_mt) {
        (Some(a), Some(b)) => Some(tape.add(a, b)?),
        (a, None) => a,
        (None, b) => b,
    };
    match aux {
        Some(a) => {
            let scaled = tape.scale(a, lambda)?;
            tape.add(ce, scaled)
        }
        None => Ok(ce),
    }
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: StageLoss,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "step,lr,ce,lb_lm,lb_mt,total";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.10}")).unwrap_or_default();
        format!(
            "{},{:.6e},{:.10},{},{},{:.10}",
            self.step,
            self.lr,
            self.loss.ce,
            opt(self.loss.lb_lm),
            opt(self.loss.lb_mt),
            self.loss.total
        )
    }
}

pub fn write_loss_csv(path: &std::path::Path, records: &[LossRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    writeln!(f, "{}", LossRecord::CSV_HEADER).map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(f, "{}", r.csv_row()).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub stage: u8,
    pub config: StageConfig,
    pub optimizer: OptimizerState,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: Model, config: StageConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::new(AdamWConfig {
            lr: config.learning_rate,
            weight_decay: config.weight_decay,
            ..Default::default()
        });
        Ok(Self {
            model,
            stage: config.stage,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            optimizer,
            step: 0,
        })
    }
}

/// Packs a batch of examples for a teacher-forced forward pass.
pub fn assemble<'e>(examples: impl IntoIterator<Item = &'e EncodedExample>) -> Result<(Batch, Vec<usize>, Vec<bool>)> {
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for ex in examples {
        if ex.tokens.len() < 2 || ex.mask.len() != ex.tokens.len() {
            return Err(Error::Contract("encoded example too short or mask misaligned".into()));
        }
        inputs.push(ex.inputs());
        targets.extend_from_slice(ex.targets());
        mask.extend_from_slice(ex.target_mask());
    }
    Ok((Batch::new(&inputs)?, targets, mask))
}

/// Forward + loss for one batch. Returns the loss variable and its parts.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    model: &Model,
    tape: &mut Tape<'_>,
    batch: &Batch,
    targets: &[usize],
    mask: &[bool],
    stage: u8,
    lambda: f64,
    opts: ForwardOptions,
) -> Result<(Var, StageLoss)> {
    let out = forward(model, tape, batch, opts)?;
    let ce = tape.cross_entropy(out.logits, targets, mask)?;
    let total = compose_on_tape(tape, ce, out.lb_lm, out.lb_mt, stage, lambda)?;
    let loss = compose_loss(
        tape.scalar(ce),
        out.lb_lm.map(|v| tape.scalar(v)),
        out.lb_mt.map(|v| tape.scalar(v)),
        stage,
        lambda,
    )?;
    Ok((total, StageLoss { total: tape.scalar(total), ..loss }))
}

/// Runs optimizer steps until `state.step == until` (or the configured step
/// count). Frozen parameters are excluded from the gradient and the update,
/// and a hash audit afterwards confirms they did not move.
pub fn run(
    state: &mut TrainState,
    examples: &[EncodedExample],
    until: Option<u64>,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::DegenerateBatch("training corpus is empty".into()));
    }
    let cfg = state.config.clone();
    let mask = FreezeMask::for_stage(&state.model, cfg.stage, cfg.train_all)?;
    mask.apply(&mut state.model);
    let frozen_before: BTreeMap<ParamId, [u8; 32]> = state
        .model
        .store
        .ids()
        .filter(|&id| !mask.is_trainable(id))
        .map(|id| (id, state.model.store.sha256(id)))
        .collect();
    let trainable = mask.trainable_ids();
    let until = until.unwrap_or(cfg.steps).min(cfg.steps);
    while state.step < until {
        let step = state.step;
        let picks: Vec<usize> = (0..cfg.batch_size)
            .map(|_| state.rng.random_range(0..examples.len()))
            .collect();
        let (batch, targets, tmask) = assemble(picks.iter().map(|&i| &examples[i]))?;
        let grads;
        let loss;
        {
            let mut tape = Tape::new(&state.model.store);
            let (total, parts) = batch_loss(
                &state.model,
                &mut tape,
                &batch,
                &targets,
                &tmask,
                cfg.stage,
                cfg.lambda_lb,
                ForwardOptions::default(),
            )
            .map_err(|e| abort_on_nan(e, step))?;
            grads = tape.backward(total).map_err(|e| abort_on_nan(e, step))?;
            loss = parts;
        }
        if !loss.total.is_finite() {
            return Err(Error::NumericalAbort { step });
        }
        state.model.store.zero_grads();
        state.model.store.accumulate(&grads)?;
        let with_grad: Vec<ParamId> = trainable
            .iter()
            .copied()
            .filter(|&id| state.model.store.get(id).grad().is_some())
            .collect();
        let lr = cosine_warmup_lr(step, cfg.steps, cfg.learning_rate, cfg.warmup_ratio);
        state.optimizer.config.lr = lr;
        adamw_step(&mut state.model.store, &with_grad, &mut state.optimizer)?;
        state.model.store.zero_grads();
        state.step += 1;
        on_step(&LossRecord { step, lr, loss });
    }
    for (id, hash) in frozen_before {
        if state.model.store.sha256(id) != hash {
            return Err(Error::Contract(format!(
                "frozen parameter {} changed during training",
                state.model.store.name(id)
            )));
        }
    }
    Ok(())
}

fn abort_on_nan(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite { .. } => Error::NumericalAbort { step },
        other => other,
    }
}

/// Stage 1: trains the LM groups of a freshly converted model.
pub fn train_stage1(
    model: Model,
    examples: &[EncodedExample],
    cfg: &StageConfig,
    on_step: impl FnMut(&LossRecord),
) -> Result<TrainState> {
    if cfg.stage != 1 {
        return Err(Error::Config("train_stage1 needs a stage-1 config".into()));
    }
    if model.is_dense() && !cfg.train_all {
        return Err(Error::Config("stage 1 expects a converted Mix-MoE model".into()));
    }
    if model.has_mt() {
        return Err(Error::Lineage("stage 1 on a model that already has MT experts".into()));
    }
    let mut state = TrainState::new(model, cfg.clone())?;
    run(&mut state, examples, None, on_step)?;
    Ok(state)
}

/// Stage 2: spawns MT groups from a stage-1 model and trains only them.
pub fn train_stage2(
    stage1: Model,
    examples: &[EncodedExample],
    cfg: &StageConfig,
    on_step: impl FnMut(&LossRecord),
) -> Result<TrainState> {
    if cfg.stage != 2 {
        return Err(Error::Config("train_stage2 needs a stage-2 config".into()));
    }
    let mut model = stage1;
    if !cfg.train_all {
        if model.is_dense() {
            return Err(Error::Lineage("stage 2 needs a Mix-MoE stage-1 model".into()));
        }
        model.spawn_mt_groups()?;
    }
    let mut state = TrainState::new(model, cfg.clone())?;
    run(&mut state, examples, None, on_step)?;
    Ok(state)
}

/// Means over consecutive windows of `w` values.
pub fn window_means(values: &[f64], w: usize) -> Vec<f64> {
    values.chunks(w.max(1)).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}
