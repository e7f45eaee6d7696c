//! End-to-end runs: corpora, base model, conversion, both stages, reports.
//! The CLI and the integration tests drive everything through here.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::{
    build_monolingual_corpus, build_parallel_corpus, encode_example, read_jsonl, records_hash, write_jsonl, Corpus,
    EncodedExample, Grammar, Item, LanguageSet, MonoRecord, ParallelCorpus, ParallelRecord,
};
use crate::error::{Error, Result};
use crate::eval::{perplexity, route_stats, toy_bleu, RouteStats, TranslationReport};
use crate::model::{build_dense_model, convert_to_mixmoe, ForwardOptions, Model, Placement};
use crate::moe::GroupRole;
use crate::spectral::FeatureTransformKind;
use crate::train::{run, LossRecord, StageConfig, TrainState};

pub const MONO_FILE: &str = "mono.jsonl";
pub const MONO_EVAL_FILE: &str = "mono_eval.jsonl";
pub const PARALLEL_TRAIN_FILE: &str = "parallel_train.jsonl";
pub const PARALLEL_TEST_FILE: &str = "parallel_test.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Examples fed to the route statistics.
const ROUTE_SAMPLE: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub records: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub seed: u64,
    pub languages: Vec<String>,
    pub directions: Vec<String>,
    pub files: BTreeMap<String, FileEntry>,
}

/// Every corpus a run touches. Held-out sentences never occur in training
/// data of any language.
#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    pub set: LanguageSet,
    pub mono: Corpus,
    pub mono_eval: Corpus,
    pub parallel: ParallelCorpus,
    pub test: ParallelCorpus,
}

impl Datasets {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let set = cfg.languages()?;
        let grammar = Grammar::from_seed(cfg.seed);
        let ids: Vec<&str> = set.languages().iter().map(|l| l.id.as_str()).collect();
        let pairs = cfg.data.resolved_pairs(&set);
        let d = &cfg.data;
        let parallel = build_parallel_corpus(&set, &grammar, &pairs, d.parallel_per_direction, cfg.seed ^ 0x11, &HashSet::new())?;
        let mono = build_monolingual_corpus(&set, &grammar, &ids, d.mono_per_language, cfg.seed ^ 0x10)?;
        let mut seen = parallel.base_sentences(&set)?;
        for r in &mono.records {
            seen.insert(set.get(&r.lang)?.inverse_render(&r.tokens)?);
        }
        let test = build_parallel_corpus(&set, &grammar, &pairs, d.test_per_direction, cfg.seed ^ 0x12, &seen)?;
        seen.extend(test.base_sentences(&set)?);
        let mono_eval = held_out_mono(&set, &grammar, &ids, d.mono_eval_per_language, cfg.seed ^ 0x13, &seen)?;
        Ok(Self {
            set,
            mono,
            mono_eval,
            parallel,
            test,
        })
    }

    pub fn manifest(&self, seed: u64) -> Result<DataManifest> {
        let mut files = BTreeMap::new();
        for (name, records, hash) in [
            (MONO_FILE, self.mono.records.len(), records_hash(&self.mono.records)?),
            (MONO_EVAL_FILE, self.mono_eval.records.len(), records_hash(&self.mono_eval.records)?),
            (PARALLEL_TRAIN_FILE, self.parallel.records.len(), records_hash(&self.parallel.records)?),
            (PARALLEL_TEST_FILE, self.test.records.len(), records_hash(&self.test.records)?),
        ] {
            files.insert(name.to_string(), FileEntry { records, sha256: hash });
        }
        Ok(DataManifest {
            seed,
            languages: self.set.languages().iter().map(|l| l.id.clone()).collect(),
            directions: self.parallel.directions(),
            files,
        })
    }

    pub fn write(&self, dir: &Path, seed: u64) -> Result<DataManifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(&dir.join(MONO_FILE), &self.mono.records)?;
        write_jsonl(&dir.join(MONO_EVAL_FILE), &self.mono_eval.records)?;
        write_jsonl(&dir.join(PARALLEL_TRAIN_FILE), &self.parallel.records)?;
        write_jsonl(&dir.join(PARALLEL_TEST_FILE), &self.test.records)?;
        let manifest = self.manifest(seed)?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    /// Reads a directory written by [`Datasets::write`] and checks it against
    /// its manifest.
    pub fn read(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DataManifest = serde_json::from_str(&text)?;
        let mono: Vec<MonoRecord> = read_jsonl(&dir.join(MONO_FILE))?;
        let mono_eval: Vec<MonoRecord> = read_jsonl(&dir.join(MONO_EVAL_FILE))?;
        let parallel: Vec<ParallelRecord> = read_jsonl(&dir.join(PARALLEL_TRAIN_FILE))?;
        let test: Vec<ParallelRecord> = read_jsonl(&dir.join(PARALLEL_TEST_FILE))?;
        let data = Self {
            set: cfg.languages()?,
            mono: Corpus { records: mono },
            mono_eval: Corpus { records: mono_eval },
            parallel: ParallelCorpus { records: parallel },
            test: ParallelCorpus { records: test },
        };
        if manifest.seed != cfg.seed {
            return Err(Error::Usage(format!(
                "data was generated with seed {}, config has seed {}",
                manifest.seed, cfg.seed
            )));
        }
        if data.manifest(cfg.seed)? != manifest {
            return Err(Error::Usage(format!("{} does not match its manifest", dir.display())));
        }
        Ok(data)
    }

    pub fn mono_examples(&self) -> Result<Vec<EncodedExample>> {
        encode_mono(&self.set, &self.mono)
    }

    pub fn mono_eval_examples(&self) -> Result<Vec<EncodedExample>> {
        encode_mono(&self.set, &self.mono_eval)
    }

    pub fn parallel_examples(&self) -> Result<Vec<EncodedExample>> {
        self.parallel
            .records
            .iter()
            .map(|r| encode_example(&self.set, Item::Parallel(r), 2))
            .collect()
    }

    /// Base-model pretraining text: every monolingual record plus enough
    /// parallel records to make up `fraction` of the mix.
    pub fn pretrain_examples(&self, fraction: f64, target_only: bool, seed: u64) -> Result<Vec<EncodedExample>> {
        let mut out = if fraction >= 1.0 { Vec::new() } else { self.mono_examples()? };
        let n_par = if fraction >= 1.0 {
            self.parallel.records.len()
        } else {
            ((fraction / (1.0 - fraction)) * out.len() as f64).round() as usize
        };
        let mut order: Vec<usize> = (0..self.parallel.records.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let stage = if target_only { 2 } else { 1 };
        for &i in order.iter().cycle().take(n_par) {
            out.push(encode_example(&self.set, Item::Parallel(&self.parallel.records[i]), stage)?);
        }
        Ok(out)
    }

    /// Held-out pairs capped at `per_direction` each.
    pub fn test_subset(&self, per_direction: usize) -> ParallelCorpus {
        let mut taken: BTreeMap<&str, usize> = BTreeMap::new();
        let records = self
            .test
            .records
            .iter()
            .filter(|r| {
                let n = taken.entry(&r.direction).or_default();
                *n += 1;
                *n <= per_direction
            })
            .cloned()
            .collect();
        ParallelCorpus { records }
    }
}

fn encode_mono(set: &LanguageSet, corpus: &Corpus) -> Result<Vec<EncodedExample>> {
    corpus.records.iter().map(|r| encode_example(set, Item::Mono(r), 1)).collect()
}

fn held_out_mono(
    set: &LanguageSet,
    grammar: &Grammar,
    ids: &[&str],
    per_lang: usize,
    seed: u64,
    exclude: &HashSet<Vec<usize>>,
) -> Result<Corpus> {
    // Over-draw, then keep sentences unseen in any training corpus.
    let mut n = per_lang * 2;
    loop {
        let pool = build_monolingual_corpus(set, grammar, ids, n, seed)?;
        let mut kept: BTreeMap<&str, Vec<MonoRecord>> = BTreeMap::new();
        for r in pool.records {
            let base = set.get(&r.lang)?.inverse_render(&r.tokens)?;
            let slot = kept.entry(set.get(&r.lang)?.id.as_str()).or_default();
            if slot.len() < per_lang && !exclude.contains(&base) {
                slot.push(r);
            }
        }
        if kept.values().all(|v| v.len() == per_lang) && kept.len() == ids.len() {
            let records = ids.iter().flat_map(|id| kept.remove(id).unwrap_or_default()).collect();
            return Ok(Corpus { records });
        }
        if n > per_lang * 64 {
            return Err(Error::Config("could not draw enough held-out monolingual sentences".into()));
        }
        n *= 2;
    }
}

/// Hex SHA-256 over every parameter name and value of a model. Checkpoints
/// derived from the same base share this string.
pub fn lineage_of(model: &Model) -> String {
    let mut h = Sha256::new();
    for (id, name, _) in model.store.iter() {
        h.update(name.as_bytes());
        h.update(model.store.sha256(id));
    }
    hex::encode(h.finalize())
}

fn pretrain_config(cfg: &RunConfig, steps: u64) -> StageConfig {
    let p = &cfg.pretrain;
    StageConfig {
        stage: 1,
        learning_rate: p.learning_rate,
        batch_size: p.batch_size,
        steps,
        lambda_lb: 0.0,
        warmup_ratio: p.warmup_ratio,
        weight_decay: 0.0,
        seed: cfg.seed.wrapping_add(3),
        train_all: true,
    }
}

/// The dense model the pipeline starts from: a seeded initialization trained
/// on pretraining text for `pretrain.steps` steps.
pub fn build_base(cfg: &RunConfig, data: &Datasets, on_step: impl FnMut(&LossRecord)) -> Result<Model> {
    let mut model = build_dense_model(&cfg.model)?;
    if cfg.pretrain.steps > 0 {
        let examples = data.pretrain_examples(cfg.pretrain.parallel_fraction, cfg.pretrain.target_only, cfg.seed.wrapping_add(4))?;
        let mut state = TrainState::new(model, pretrain_config(cfg, cfg.pretrain.steps))?;
        run(&mut state, &examples, None, on_step)?;
        model = state.model;
    }
    for id in model.store.ids().collect::<Vec<_>>() {
        model.store.get_mut(id).set_requires_grad(false);
    }
    Ok(model)
}

/// Starts stage 1 from a dense base: converts it unless the stage trains
/// every parameter (the dense harness).
pub fn start_stage1(cfg: &RunConfig, base: &Model) -> Result<TrainState> {
    if !base.is_dense() {
        return Err(Error::Lineage("stage 1 starts from a dense base model".into()));
    }
    let model = if cfg.stage1.train_all {
        base.clone()
    } else {
        convert_to_mixmoe(base)?
    };
    TrainState::new(model, cfg.stage1.clone())
}

/// Starts stage 2 from a finished stage-1 model: spawns the MT groups unless
/// the stage trains every parameter.
pub fn start_stage2(cfg: &RunConfig, stage1: &Model, stage1_step: Option<u8>) -> Result<TrainState> {
    match stage1_step {
        Some(1) => {}
        Some(s) => return Err(Error::Lineage(format!("stage 2 needs a stage-1 checkpoint, got stage {s}"))),
        None => {}
    }
    if stage1.has_mt() {
        return Err(Error::Lineage("model already carries MT experts".into()));
    }
    let mut model = stage1.clone();
    if !cfg.stage2.train_all {
        if model.is_dense() {
            return Err(Error::Lineage("stage 2 needs a Mix-MoE stage-1 model".into()));
        }
        model.spawn_mt_groups()?;
    }
    TrainState::new(model, cfg.stage2.clone())
}

pub fn bleu(cfg: &RunConfig, model: &Model, data: &Datasets) -> Result<TranslationReport> {
    toy_bleu(model, &data.set, &data.test_subset(cfg.eval.bleu_per_direction), ForwardOptions::default())
}

/// Routing statistics over a fixed sample of the given examples.
pub fn training_route_stats(model: &Model, examples: &[EncodedExample], seed: u64) -> Result<RouteStats> {
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(ROUTE_SAMPLE);
    idx.sort_unstable();
    let labelled: Vec<(String, EncodedExample)> =
        idx.iter().map(|&i| ("train".to_string(), examples[i].clone())).collect();
    route_stats(model, &labelled)
}

fn max_share(stats: &RouteStats, role: GroupRole) -> Option<f64> {
    stats
        .overall
        .iter()
        .filter(|g| g.group == role)
        .map(|g| g.max_share())
        .reduce(f64::max)
}

/// Everything a full two-stage run produces.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub base: Model,
    pub lineage: String,
    pub stage1: TrainState,
    pub stage2: TrainState,
    pub stage1_losses: Vec<LossRecord>,
    pub stage2_losses: Vec<LossRecord>,
    pub spawn_bleu: TranslationReport,
    pub final_bleu: TranslationReport,
}

/// Runs stage 1 and stage 2 from a given base and evaluates toy-BLEU at MT
/// spawn time and after stage 2.
pub fn run_from_base(
    cfg: &RunConfig,
    data: &Datasets,
    base: &Model,
    mut log: impl FnMut(&str, &LossRecord),
) -> Result<PipelineRun> {
    let mono = data.mono_examples()?;
    let parallel = data.parallel_examples()?;
    let mut s1 = start_stage1(cfg, base)?;
    let mut stage1_losses = Vec::new();
    run(&mut s1, &mono, None, |r| {
        log("stage1", r);
        stage1_losses.push(*r);
    })?;
    let mut s2 = start_stage2(cfg, &s1.model, None)?;
    let spawn_bleu = bleu(cfg, &s2.model, data)?;
    let mut stage2_losses = Vec::new();
    run(&mut s2, &parallel, None, |r| {
        log("stage2", r);
        stage2_losses.push(*r);
    })?;
    let final_bleu = bleu(cfg, &s2.model, data)?;
    Ok(PipelineRun {
        base: base.clone(),
        lineage: lineage_of(base),
        stage1: s1,
        stage2: s2,
        stage1_losses,
        stage2_losses,
        spawn_bleu,
        final_bleu,
    })
}

pub fn run_pipeline(cfg: &RunConfig, data: &Datasets, mut log: impl FnMut(&str, &LossRecord)) -> Result<PipelineRun> {
    let base = build_base(cfg, data, |r| log("pretrain", r))?;
    run_from_base(cfg, data, &base, log)
}

/// Monolingual perplexity before and after stage 2 for models whose stage 2
/// may have touched shared parameters (the dense harness).
pub fn perplexity_delta(stage1: &Model, stage2: &Model, mono: &[EncodedExample]) -> Result<(f64, f64)> {
    let before = perplexity(stage1, mono, ForwardOptions::default())?;
    let after = perplexity(stage2, mono, ForwardOptions::default())?;
    Ok((before, after))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    RouterTransform,
    NExperts,
    Placement,
    LambdaLb,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [
        AblationAxis::RouterTransform,
        AblationAxis::NExperts,
        AblationAxis::Placement,
        AblationAxis::LambdaLb,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationAxis::RouterTransform => "router_transform",
            AblationAxis::NExperts => "n_experts",
            AblationAxis::Placement => "placement",
            AblationAxis::LambdaLb => "lambda_lb",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.label() == s)
            .ok_or_else(|| Error::Usage(format!("unknown ablation axis {s}")))
    }

    pub fn grid(self) -> Vec<String> {
        let v: &[&str] = match self {
            AblationAxis::RouterTransform => &["fft", "dct", "random", "none"],
            AblationAxis::NExperts => &["2", "4", "8"],
            AblationAxis::Placement => &["uniform", "bottom", "top", "dense_bottom_sparse_top"],
            AblationAxis::LambdaLb => &["0", "0.001", "0.01", "0.1", "1"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// The config for one setting; everything else stays as given.
    pub fn apply(self, cfg: &RunConfig, value: &str) -> Result<RunConfig> {
        if !self.grid().iter().any(|v| v == value) {
            return Err(Error::Usage(format!(
                "{value} is not on the {} grid ({})",
                self.label(),
                self.grid().join(", ")
            )));
        }
        let mut out = cfg.clone();
        match self {
            AblationAxis::RouterTransform => {
                out.model.transform = FeatureTransformKind::parse(value).ok_or_else(|| Error::Usage(value.into()))?
            }
            AblationAxis::NExperts => out.model.n_experts_per_group = value.parse().map_err(|_| Error::Usage(value.into()))?,
            AblationAxis::Placement => {
                out.model.moe_placement = Placement::parse(value).ok_or_else(|| Error::Usage(value.into()))?
            }
            AblationAxis::LambdaLb => {
                let l: f64 = value.parse().map_err(|_| Error::Usage(value.into()))?;
                out.stage1.lambda_lb = l;
                out.stage2.lambda_lb = l;
            }
        }
        if let Some(s) = cfg.ablation.pretrain_steps {
            out.pretrain.steps = s;
        }
        if let Some(s) = cfg.ablation.stage1_steps {
            out.stage1.steps = s;
        }
        if let Some(s) = cfg.ablation.stage2_steps {
            out.stage2.steps = s;
        }
        out.validate()?;
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub spawn_bleu: f64,
    pub bleu: f64,
    pub stage1_loss: f64,
    pub stage2_loss: f64,
    pub max_share_lm: f64,
    pub max_share_mt: f64,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "axis,value,spawn_bleu,bleu,stage1_loss,stage2_loss,max_share_lm,max_share_mt";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.4},{:.4},{:.6},{:.6},{:.6},{:.6}",
            self.axis,
            self.value,
            self.spawn_bleu,
            self.bleu,
            self.stage1_loss,
            self.stage2_loss,
            self.max_share_lm,
            self.max_share_mt
        )
    }
}

fn last_total(losses: &[LossRecord]) -> f64 {
    losses.last().map_or(f64::NAN, |r| r.loss.total)
}

/// One full two-stage run per grid value, all sharing the seed and the base
/// model (no axis touches the dense base).
pub fn ablate(
    cfg: &RunConfig,
    data: &Datasets,
    axis: AblationAxis,
    values: &[String],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let settings = values
        .iter()
        .map(|v| axis.apply(cfg, v))
        .collect::<Result<Vec<_>>>()?;
    let Some(first) = settings.first() else {
        return Ok(Vec::new());
    };
    let base = build_base(first, data, |_| {})?;
    let mono = data.mono_examples()?;
    let parallel = data.parallel_examples()?;
    let mut rows = Vec::with_capacity(settings.len());
    for (value, setting) in values.iter().zip(&settings) {
        let mut base = base.clone();
        base.cfg = setting.model.clone();
        let run = run_from_base(setting, data, &base, |_, _| {})?;
        let s1_routes = training_route_stats(&run.stage1.model, &mono, setting.seed)?;
        let s2_routes = training_route_stats(&run.stage2.model, &parallel, setting.seed)?;
        let row = AblationRow {
            axis: axis.label().to_string(),
            value: value.clone(),
            spawn_bleu: run.spawn_bleu.overall.score,
            bleu: run.final_bleu.overall.score,
            stage1_loss: last_total(&run.stage1_losses),
            stage2_loss: last_total(&run.stage2_losses),
            max_share_lm: max_share(&s1_routes, GroupRole::Lm).unwrap_or(f64::NAN),
            max_share_mt: max_share(&s2_routes, GroupRole::Mt).unwrap_or(f64::NAN),
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = String::from(AblationRow::CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
