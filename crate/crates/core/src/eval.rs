//! Corpus BLEU, perplexity, routing statistics and the interference probe.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{translation_prompt, EncodedExample, LanguageSet, ParallelCorpus, EOS};
use crate::error::{Error, Result};
use crate::model::{forward, generate_greedy_batch, ForwardOptions, Model};
use crate::moe::GroupRole;
use crate::tensor::Tape;
use crate::train::{assemble, Checkpoint};

const MAX_ORDER: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub score: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram matches and hypothesis n-gram totals for one sentence.
pub fn sentence_stats(hyp: &[usize], reference: &[usize]) -> ([usize; MAX_ORDER], [usize; MAX_ORDER]) {
    let mut correct = [0; MAX_ORDER];
    let mut total = [0; MAX_ORDER];
    for n in 1..=MAX_ORDER {
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        total[n - 1] = hyp.len().saturating_sub(n - 1);
        correct[n - 1] = h.iter().map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0))).sum();
    }
    (correct, total)
}

/// Corpus BLEU-4 on a 0–100 scale. A zero match count at order `n ≥ 2` is
/// replaced by `1 / (2^k · total_n)` for the `k`-th such order; zero unigram
/// matches give a score of 0.
pub fn corpus_bleu<H: AsRef<[usize]>, R: AsRef<[usize]>>(hyps: &[H], refs: &[R]) -> Result<BleuReport> {
    if hyps.is_empty() {
        return Err(Error::DegenerateBatch("BLEU over zero hypotheses".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Dimension {
            op: "corpus_bleu",
            lhs: vec![hyps.len()],
            rhs: vec![refs.len()],
        });
    }
    if refs.iter().any(|r| r.as_ref().is_empty()) {
        return Err(Error::Contract("empty reference".into()));
    }
    let mut correct = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let (c, t) = sentence_stats(h.as_ref(), r.as_ref());
        for n in 0..MAX_ORDER {
            correct[n] += c[n];
            total[n] += t[n];
        }
        hyp_len += h.as_ref().len();
        ref_len += r.as_ref().len();
    }
    let mut precisions = [0.0; MAX_ORDER];
    let mut smooth = 1.0;
    for n in 0..MAX_ORDER {
        if total[n] == 0 {
            break;
        }
        precisions[n] = if correct[n] == 0 && n > 0 {
            smooth *= 2.0;
            1.0 / (smooth * total[n] as f64)
        } else {
            correct[n] as f64 / total[n] as f64
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        100.0 * brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64).exp()
    };
    Ok(BleuReport {
        score,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// Greedy translations of every record, without the trailing eos.
pub fn translate(
    model: &Model,
    set: &LanguageSet,
    corpus: &ParallelCorpus,
    opts: ForwardOptions,
) -> Result<Vec<Vec<usize>>> {
    let prompts = corpus
        .records
        .iter()
        .map(|r| translation_prompt(set, r))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(prompts.len());
    for chunk in prompts.chunks(64) {
        let max_new = chunk
            .iter()
            .map(|p| model.cfg.max_seq_len.saturating_sub(p.len()))
            .max()
            .unwrap_or(0)
            .min(2 * crate::data::MAX_LEN);
        for mut g in generate_greedy_batch(model, chunk, max_new, EOS, opts)? {
            if g.last() == Some(&EOS) {
                g.pop();
            }
            out.push(g);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationReport {
    pub overall: BleuReport,
    pub per_direction: BTreeMap<String, BleuReport>,
}

pub fn toy_bleu(model: &Model, set: &LanguageSet, corpus: &ParallelCorpus, opts: ForwardOptions) -> Result<TranslationReport> {
    let hyps = translate(model, set, corpus, opts)?;
    let refs: Vec<&[usize]> = corpus.records.iter().map(|r| r.tgt_tokens.as_slice()).collect();
    let overall = corpus_bleu(&hyps, &refs)?;
    type Pairs<'a> = (Vec<&'a [usize]>, Vec<&'a [usize]>);
    let mut groups: BTreeMap<String, Pairs> = BTreeMap::new();
    for ((h, r), rec) in hyps.iter().zip(&refs).zip(&corpus.records) {
        let g = groups.entry(rec.direction.clone()).or_default();
        g.0.push(h);
        g.1.push(r);
    }
    let per_direction = groups
        .into_iter()
        .map(|(d, (h, r))| Ok((d, corpus_bleu(&h, &r)?)))
        .collect::<Result<_>>()?;
    Ok(TranslationReport { overall, per_direction })
}

/// `exp` of the token-weighted mean cross-entropy over every scored target.
pub fn perplexity(model: &Model, examples: &[EncodedExample], opts: ForwardOptions) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::DegenerateBatch("perplexity over an empty corpus".into()));
    }
    let (mut nll, mut count) = (0.0, 0usize);
    for chunk in examples.chunks(64) {
        let (batch, targets, mask) = assemble(chunk)?;
        let n = mask.iter().filter(|&&m| m).count();
        if n == 0 {
            continue;
        }
        let mut tape = Tape::new(&model.store);
        let out = forward(model, &mut tape, &batch, opts)?;
        let ce = tape.cross_entropy(out.logits, &targets, &mask)?;
        nll += tape.scalar(ce) * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::DegenerateBatch("no scored tokens".into()));
    }
    Ok((nll / count as f64).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub layer: usize,
    pub group: GroupRole,
    pub counts: Vec<usize>,
    pub proportions: Vec<f64>,
}

impl GroupStats {
    pub fn max_share(&self) -> f64 {
        self.proportions.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteStats {
    pub overall: Vec<GroupStats>,
    /// Breakdown by caller-supplied label (e.g. translation direction).
    pub per_label: BTreeMap<String, Vec<GroupStats>>,
}

impl RouteStats {
    pub fn max_share(&self) -> f64 {
        self.overall.iter().map(GroupStats::max_share).fold(0.0, f64::max)
    }

    /// One row per (layer, group, expert) over all routed tokens.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut rows = vec![String::from(ROUTE_CSV_HEADER)];
        for g in &self.overall {
            push_rows(&mut rows, "all", g);
        }
        std::fs::write(path, rows.join("\n") + "\n").map_err(|e| Error::io(path, e))
    }

    /// The same rows broken down by label.
    pub fn write_label_csv(&self, path: &Path) -> Result<()> {
        let mut rows = vec![String::from(ROUTE_CSV_HEADER)];
        for (label, stats) in &self.per_label {
            for g in stats {
                push_rows(&mut rows, label, g);
            }
        }
        std::fs::write(path, rows.join("\n") + "\n").map_err(|e| Error::io(path, e))
    }
}

pub const ROUTE_CSV_HEADER: &str = "label,layer,group,expert,count,proportion";

fn push_rows(rows: &mut Vec<String>, label: &str, g: &GroupStats) {
    for (e, (c, p)) in g.counts.iter().zip(&g.proportions).enumerate() {
        rows.push(format!("{label},{},{},{e},{c},{p:.9}", g.layer, g.group.label()));
    }
}

fn finish(counts: BTreeMap<(usize, GroupRole), Vec<usize>>) -> Vec<GroupStats> {
    counts
        .into_iter()
        .map(|((layer, group), counts)| {
            let total: usize = counts.iter().sum();
            let proportions = counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect();
            GroupStats {
                layer,
                group,
                counts,
                proportions,
            }
        })
        .collect()
}

/// Top-1 selection counts over every input token of every example.
pub fn route_stats(model: &Model, labelled: &[(String, EncodedExample)]) -> Result<RouteStats> {
    if model.is_dense() {
        return Err(Error::Config("route statistics need MoE layers".into()));
    }
    let mut overall: BTreeMap<(usize, GroupRole), Vec<usize>> = BTreeMap::new();
    let mut per: BTreeMap<String, BTreeMap<(usize, GroupRole), Vec<usize>>> = BTreeMap::new();
    for chunk in labelled.chunks(64) {
        let (batch, _, _) = assemble(chunk.iter().map(|(_, e)| e))?;
        let mut tape = Tape::new(&model.store);
        let out = forward(model, &mut tape, &batch, ForwardOptions::default())?;
        let mut row_label = Vec::with_capacity(batch.rows());
        for ((label, _), seg) in chunk.iter().zip(batch.segments.iter()) {
            row_label.extend(std::iter::repeat_n(label, seg.len));
        }
        for lr in &out.routing {
            for (role, dec) in [(GroupRole::Lm, Some(&lr.lm)), (GroupRole::Mt, lr.mt.as_ref())] {
                let Some(dec) = dec else { continue };
                let n = dec.n_experts;
                for (t, e) in dec.top1().enumerate() {
                    overall.entry((lr.layer, role)).or_insert_with(|| vec![0; n])[e] += 1;
                    per.entry(row_label[t].clone())
                        .or_default()
                        .entry((lr.layer, role))
                        .or_insert_with(|| vec![0; n])[e] += 1;
                }
            }
        }
    }
    Ok(RouteStats {
        overall: finish(overall),
        per_label: per.into_iter().map(|(k, v)| (k, finish(v))).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterferenceReport {
    pub stage1_ppl: f64,
    pub stage2_ppl: f64,
    pub stage2_mt_disabled_ppl: f64,
    pub delta_full: f64,
    pub delta_mt_disabled: f64,
}

pub const FROZEN_PATH_TOLERANCE: f64 = 1e-9;

/// Monolingual perplexity before and after stage 2. Fails if the MT-disabled
/// stage-2 model drifts from the stage-1 model.
pub fn interference_probe(stage1: &Checkpoint, stage2: &Checkpoint, mono: &[EncodedExample]) -> Result<InterferenceReport> {
    if stage1.meta.lineage != stage2.meta.lineage || stage1.meta.model != stage2.meta.model {
        return Err(Error::Lineage("checkpoints do not descend from the same base model".into()));
    }
    if stage1.meta.stage != 1 || !matches!(stage2.meta.stage, 1 | 2) {
        return Err(Error::Lineage(format!(
            "expected a stage-1 and a later checkpoint, got stages {} and {}",
            stage1.meta.stage, stage2.meta.stage
        )));
    }
    let stage1_ppl = perplexity(&stage1.model, mono, ForwardOptions::default())?;
    let stage2_ppl = perplexity(&stage2.model, mono, ForwardOptions::default())?;
    let disabled = perplexity(
        &stage2.model,
        mono,
        ForwardOptions {
            lm_only: true,
            ..Default::default()
        },
    )?;
    if (disabled - stage1_ppl).abs() > FROZEN_PATH_TOLERANCE {
        return Err(Error::Contract(format!(
            "frozen path drifted: stage-1 perplexity {stage1_ppl}, MT-disabled {disabled}"
        )));
    }
    Ok(InterferenceReport {
        stage1_ppl,
        stage2_ppl,
        stage2_mt_disabled_ppl: disabled,
        delta_full: stage2_ppl - stage1_ppl,
        delta_mt_disabled: disabled - stage1_ppl,
    })
}
