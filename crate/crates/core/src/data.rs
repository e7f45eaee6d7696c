//! Synthetic multilingual corpora.
//!
//! Base sentences come from an order-1 Markov chain over 40 content tokens.
//! Every toy language renders a base sentence by permuting token ids and then
//! applying a fixed word-order rule, so translation between any two languages
//! is an exact, invertible transduction.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const N_CONTENT: usize = 40;
pub const EOS: usize = 40;
pub const SEP: usize = 41;
pub const TAG_BASE: usize = 42;
pub const MAX_LANGS: usize = 8;
pub const VOCAB_SIZE: usize = TAG_BASE + MAX_LANGS;
pub const MIN_LEN: usize = 5;
pub const MAX_LEN: usize = 24;
pub const PIVOT: &str = "en";
const LANG_IDS: [&str; MAX_LANGS] = ["en", "xa", "xb", "xc", "xd", "xe", "xf", "xg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderRule {
    Identity,
    Reverse,
    /// `[a, b, c] → [b, c, a]`.
    #[serde(rename = "rotate_1")]
    Rotate1,
}

impl OrderRule {
    pub fn apply(self, tokens: &mut [usize]) {
        match self {
            OrderRule::Identity => {}
            OrderRule::Reverse => tokens.reverse(),
            OrderRule::Rotate1 => tokens.rotate_left(1.min(tokens.len())),
        }
    }

    pub fn invert(self, tokens: &mut [usize]) {
        match self {
            OrderRule::Identity => {}
            OrderRule::Reverse => tokens.reverse(),
            OrderRule::Rotate1 => tokens.rotate_right(1.min(tokens.len())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToyLanguage {
    pub id: String,
    /// Position in the language table; the tag token is `TAG_BASE + index`.
    pub index: usize,
    permutation: Vec<usize>,
    inverse: Vec<usize>,
    pub order: OrderRule,
}

impl ToyLanguage {
    pub fn new(id: impl Into<String>, index: usize, permutation: Vec<usize>, order: OrderRule) -> Result<Self> {
        if index >= MAX_LANGS {
            return Err(Error::Vocabulary(format!("language index {index} has no tag token")));
        }
        if permutation.len() != N_CONTENT {
            return Err(Error::Contract(format!("permutation has {} entries, expected {N_CONTENT}", permutation.len())));
        }
        let mut inverse = vec![usize::MAX; N_CONTENT];
        for (i, &p) in permutation.iter().enumerate() {
            if p >= N_CONTENT || inverse[p] != usize::MAX {
                return Err(Error::Contract("token permutation is not a bijection".into()));
            }
            inverse[p] = i;
        }
        Ok(Self {
            id: id.into(),
            index,
            permutation,
            inverse,
            order,
        })
    }

    pub fn tag(&self) -> usize {
        TAG_BASE + self.index
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn render(&self, base: &[usize]) -> Result<Vec<usize>> {
        let mut out = base
            .iter()
            .map(|&t| self.permutation.get(t).copied().ok_or_else(|| oov(t)))
            .collect::<Result<Vec<_>>>()?;
        self.order.apply(&mut out);
        Ok(out)
    }

    pub fn inverse_render(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        let mut out = tokens
            .iter()
            .map(|&t| self.inverse.get(t).copied().ok_or_else(|| oov(t)))
            .collect::<Result<Vec<_>>>()?;
        self.order.invert(&mut out);
        Ok(out)
    }
}

fn oov(t: usize) -> Error {
    Error::Vocabulary(format!("token {t} is not a content token"))
}

/// The pivot language plus `n` synthetic languages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LanguageSet {
    langs: Vec<ToyLanguage>,
}

impl LanguageSet {
    /// Pivot `en` is the identity language; the others get seeded random
    /// permutations and cycle through identity / reverse / rotate-by-one order.
    pub fn standard(n_synthetic: usize, seed: u64) -> Result<Self> {
        if n_synthetic + 1 > MAX_LANGS {
            return Err(Error::Config(format!("at most {} synthetic languages", MAX_LANGS - 1)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c61_6e67);
        let mut langs = vec![ToyLanguage::new(PIVOT, 0, (0..N_CONTENT).collect(), OrderRule::Identity)?];
        let rules = [OrderRule::Identity, OrderRule::Reverse, OrderRule::Rotate1];
        for i in 1..=n_synthetic {
            let mut perm: Vec<usize> = (0..N_CONTENT).collect();
            perm.shuffle(&mut rng);
            langs.push(ToyLanguage::new(LANG_IDS[i], i, perm, rules[(i - 1) % rules.len()])?);
        }
        Ok(Self { langs })
    }

    pub fn languages(&self) -> &[ToyLanguage] {
        &self.langs
    }

    pub fn get(&self, id: &str) -> Result<&ToyLanguage> {
        self.langs
            .iter()
            .find(|l| l.id == id)
            .ok_or_else(|| Error::Vocabulary(format!("unknown language {id}")))
    }

    pub fn by_tag(&self, tag: usize) -> Result<&ToyLanguage> {
        self.langs
            .iter()
            .find(|l| l.tag() == tag)
            .ok_or_else(|| Error::Vocabulary(format!("token {tag} is not a language tag")))
    }

    /// Every synthetic language to and from the pivot.
    pub fn pivot_directions(&self) -> Vec<Direction> {
        self.langs[1..]
            .iter()
            .flat_map(|l| [Direction::new(&l.id, PIVOT), Direction::new(PIVOT, &l.id)])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Direction {
    pub src: String,
    pub tgt: String,
}

impl Direction {
    pub fn new(src: &str, tgt: &str) -> Self {
        Self {
            src: src.into(),
            tgt: tgt.into(),
        }
    }

    pub fn parse(label: &str) -> Option<Self> {
        let (s, t) = label.split_once('-')?;
        (!s.is_empty() && !t.is_empty() && s != t).then(|| Self::new(s, t))
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.src, self.tgt)
    }

    pub fn reversed(&self) -> Self {
        Self::new(&self.tgt, &self.src)
    }
}

/// Order-1 Markov chain over content tokens with a sparse transition table.
#[derive(Clone, Debug, PartialEq)]
pub struct Grammar {
    /// Row-major `N_CONTENT×N_CONTENT` transition probabilities.
    transitions: Vec<f64>,
}

impl Grammar {
    pub const FANOUT: usize = 6;

    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_616d);
        let mut transitions = vec![0.0; N_CONTENT * N_CONTENT];
        let mut next: Vec<usize> = (0..N_CONTENT).collect();
        for row in transitions.chunks_mut(N_CONTENT) {
            next.shuffle(&mut rng);
            let w: Vec<f64> = (0..Self::FANOUT).map(|_| rng.random_range(0.5..1.5)).collect();
            let total: f64 = w.iter().sum();
            for (&j, wj) in next[..Self::FANOUT].iter().zip(&w) {
                row[j] = wj / total;
            }
        }
        Self { transitions }
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.transitions[from * N_CONTENT + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.transitions[from * N_CONTENT..(from + 1) * N_CONTENT]
    }
}

/// A base sentence: uniform length in `[MIN_LEN, MAX_LEN]`, uniform first token.
pub fn sample_base_sentence<R: Rng + ?Sized>(rng: &mut R, grammar: &Grammar) -> Vec<usize> {
    let len = rng.random_range(MIN_LEN..=MAX_LEN);
    let mut out = Vec::with_capacity(len);
    out.push(rng.random_range(0..N_CONTENT));
    while out.len() < len {
        let row = grammar.row(*out.last().expect("non-empty"));
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = None;
        for (j, p) in row.iter().enumerate() {
            if *p > 0.0 {
                acc += p;
                pick = Some(j);
                if u < acc {
                    break;
                }
            }
        }
        out.push(pick.expect("every row has successors"));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonoRecord {
    pub lang: String,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelRecord {
    pub direction: String,
    pub src_tokens: Vec<usize>,
    pub tgt_tokens: Vec<usize>,
}

impl ParallelRecord {
    pub fn direction(&self) -> Result<Direction> {
        Direction::parse(&self.direction).ok_or_else(|| Error::Vocabulary(format!("bad direction {}", self.direction)))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub records: Vec<MonoRecord>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub records: Vec<ParallelRecord>,
}

fn lang_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn distinct_bases(
    rng: &mut ChaCha8Rng,
    grammar: &Grammar,
    count: usize,
    exclude: &HashSet<Vec<usize>>,
) -> Result<Vec<Vec<usize>>> {
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > 100 * count + 1000 {
            return Err(Error::Config(format!("could not draw {count} distinct sentences")));
        }
        let s = sample_base_sentence(rng, grammar);
        if !exclude.contains(&s) && seen.insert(s.clone()) {
            out.push(s);
        }
    }
    Ok(out)
}

/// `size_per_lang` distinct sentences in each requested language.
pub fn build_monolingual_corpus(
    set: &LanguageSet,
    grammar: &Grammar,
    langs: &[&str],
    size_per_lang: usize,
    seed: u64,
) -> Result<Corpus> {
    if size_per_lang == 0 {
        return Err(Error::Config("monolingual size must be at least 1".into()));
    }
    let mut records = Vec::with_capacity(langs.len() * size_per_lang);
    for id in langs {
        let lang = set.get(id)?;
        let mut rng = lang_rng(seed, lang.index as u64);
        for base in distinct_bases(&mut rng, grammar, size_per_lang, &HashSet::new())? {
            records.push(MonoRecord {
                lang: lang.id.clone(),
                tokens: lang.render(&base)?,
            });
        }
    }
    Ok(Corpus { records })
}

/// For each language pair, draws `size_per_direction` distinct base sentences
/// (never one in `exclude`) and emits them in both directions.
pub fn build_parallel_corpus(
    set: &LanguageSet,
    grammar: &Grammar,
    pairs: &[(String, String)],
    size_per_direction: usize,
    seed: u64,
    exclude: &HashSet<Vec<usize>>,
) -> Result<ParallelCorpus> {
    let mut records = Vec::with_capacity(2 * pairs.len() * size_per_direction);
    for (p, (a, b)) in pairs.iter().enumerate() {
        let (la, lb) = (set.get(a)?, set.get(b)?);
        if la.id == lb.id {
            return Err(Error::Config(format!("pair {a}-{b} translates a language into itself")));
        }
        let mut rng = lang_rng(seed, 1000 + p as u64);
        let bases = distinct_bases(&mut rng, grammar, size_per_direction, exclude)?;
        let rendered: Vec<(Vec<usize>, Vec<usize>)> = bases
            .iter()
            .map(|s| Ok((la.render(s)?, lb.render(s)?)))
            .collect::<Result<_>>()?;
        for (fwd, (src, tgt)) in [(Direction::new(a, b), (0, 1)), (Direction::new(b, a), (1, 0))] {
            for r in &rendered {
                let pick = |i: usize| if i == 0 { r.0.clone() } else { r.1.clone() };
                records.push(ParallelRecord {
                    direction: fwd.label(),
                    src_tokens: pick(src),
                    tgt_tokens: pick(tgt),
                });
            }
        }
    }
    Ok(ParallelCorpus { records })
}

impl ParallelCorpus {
    /// Base sentences behind every record.
    pub fn base_sentences(&self, set: &LanguageSet) -> Result<HashSet<Vec<usize>>> {
        self.records
            .iter()
            .map(|r| {
                let d = r.direction()?;
                set.get(&d.src)?.inverse_render(&r.src_tokens)
            })
            .collect()
    }

    pub fn directions(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for r in &self.records {
            if !seen.contains(&r.direction) {
                seen.push(r.direction.clone());
            }
        }
        seen
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Item<'a> {
    Mono(&'a MonoRecord),
    Parallel(&'a ParallelRecord),
}

/// Token ids with a per-token loss mask. The model reads `tokens[..n-1]` and
/// predicts `tokens[1..]` where `mask[1..]` is set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub tokens: Vec<usize>,
    pub mask: Vec<bool>,
}

impl EncodedExample {
    pub fn inputs(&self) -> &[usize] {
        &self.tokens[..self.tokens.len() - 1]
    }

    pub fn targets(&self) -> &[usize] {
        &self.tokens[1..]
    }

    pub fn target_mask(&self) -> &[bool] {
        &self.mask[1..]
    }
}

/// Stage 1: `[tag] tokens [eos]`, every position scored. Stage 2:
/// `[src-tag] src [sep] [tgt-tag] tgt [eos]`, scored only after the target tag.
/// A parallel record under stage 1 is scored everywhere (plain LM text).
pub fn encode_example(set: &LanguageSet, item: Item<'_>, stage: u8) -> Result<EncodedExample> {
    let check = |toks: &[usize]| match toks.iter().find(|&&t| t >= N_CONTENT) {
        Some(&t) => Err(oov(t)),
        None => Ok(()),
    };
    match (item, stage) {
        (Item::Mono(r), 1) => {
            check(&r.tokens)?;
            let mut tokens = vec![set.get(&r.lang)?.tag()];
            tokens.extend(&r.tokens);
            tokens.push(EOS);
            Ok(EncodedExample {
                mask: vec![true; tokens.len()],
                tokens,
            })
        }
        (Item::Mono(_), _) => Err(Error::Contract("monolingual records only encode for stage 1".into())),
        (Item::Parallel(r), 1 | 2) => {
            check(&r.src_tokens)?;
            check(&r.tgt_tokens)?;
            let d = r.direction()?;
            let mut tokens = vec![set.get(&d.src)?.tag()];
            tokens.extend(&r.src_tokens);
            tokens.push(SEP);
            tokens.push(set.get(&d.tgt)?.tag());
            let prompt = tokens.len();
            tokens.extend(&r.tgt_tokens);
            tokens.push(EOS);
            let mask = (0..tokens.len()).map(|i| stage == 1 || i >= prompt).collect();
            Ok(EncodedExample { tokens, mask })
        }
        (_, s) => Err(Error::Contract(format!("unknown stage {s}"))),
    }
}

/// Prompt for translation: everything up to and including the target tag.
pub fn translation_prompt(set: &LanguageSet, r: &ParallelRecord) -> Result<Vec<usize>> {
    let d = r.direction()?;
    let mut tokens = vec![set.get(&d.src)?.tag()];
    tokens.extend(&r.src_tokens);
    tokens.push(SEP);
    tokens.push(set.get(&d.tgt)?.tag());
    Ok(tokens)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Decoded {
    Mono(MonoRecord),
    Parallel(ParallelRecord),
}

/// Inverse of [`encode_example`].
pub fn decode_example(set: &LanguageSet, ex: &EncodedExample) -> Result<Decoded> {
    let t = &ex.tokens;
    if t.len() < 2 || t[t.len() - 1] != EOS {
        return Err(Error::Vocabulary("encoded example must end in eos".into()));
    }
    let src = set.by_tag(t[0])?;
    let body = &t[1..t.len() - 1];
    match body.iter().position(|&x| x == SEP) {
        None => Ok(Decoded::Mono(MonoRecord {
            lang: src.id.clone(),
            tokens: body.to_vec(),
        })),
        Some(p) => {
            let tgt = set.by_tag(*body.get(p + 1).ok_or_else(|| Error::Vocabulary("missing target tag".into()))?)?;
            Ok(Decoded::Parallel(ParallelRecord {
                direction: Direction::new(&src.id, &tgt.id).label(),
                src_tokens: body[..p].to_vec(),
                tgt_tokens: body[p + 2..].to_vec(),
            }))
        }
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// SHA-256 of the JSONL serialization, hex encoded.
pub fn records_hash<T: Serialize>(records: &[T]) -> Result<String> {
    let mut h = Sha256::new();
    for r in records {
        h.update(serde_json::to_vec(r)?);
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}
