//! Translation-based knowledge-graph embeddings.
//!
//! A triple `(s, p, o)` scores `f = -‖e_s + r_p - e_o‖₂`. Training minimizes
//! the margin ranking loss `max(0, margin - f(pos) + f(neg))` with plain SGD
//! over corrupted negatives. Negatives replace the subject or object with an
//! entity seen in that role for the same relation; when every such
//! replacement is a known triple the sampler falls back to all entities.
//! After training a Platt sigmoid `σ(a·f + b)` is fitted on positives against
//! freshly sampled negatives to turn raw scores into probabilities.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::exec::{map_slice, Execution};
use crate::graph::{KnowledgeGraph, Triple};

#[derive(Debug, Error)]
pub enum KgeError {
    #[error("cannot train on an empty graph")]
    EmptyGraph,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("held-out set is empty")]
    EmptyHeldOut,
    #[error("model file line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

const FORMAT_MAGIC: &str = "lanekg-embedding";
const FORMAT_VERSION: u32 = 1;
const MAX_CORRUPTION_TRIES: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dimension: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub negatives_per_positive: usize,
    pub margin: f64,
    /// L2 penalty on relation vectors, applied per sampled pair.
    pub relation_l2: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dimension: 32,
            epochs: 200,
            learning_rate: 0.05,
            negatives_per_positive: 5,
            margin: 1.0,
            relation_l2: 0.5,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), KgeError> {
        if self.dimension == 0 {
            return Err(KgeError::InvalidConfig("dimension must be positive"));
        }
        if self.epochs == 0 {
            return Err(KgeError::InvalidConfig("epochs must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(KgeError::InvalidConfig("learning rate must be positive"));
        }
        if self.negatives_per_positive == 0 {
            return Err(KgeError::InvalidConfig("negatives per positive must be positive"));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(KgeError::InvalidConfig("margin must be positive"));
        }
        if !(self.relation_l2 >= 0.0 && self.relation_l2.is_finite()) {
            return Err(KgeError::InvalidConfig("relation L2 penalty must be non-negative"));
        }
        Ok(())
    }
}

/// Sigmoid parameters mapping raw scores to probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub scale: f64,
    pub offset: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Self {
            scale: 1.0,
            offset: 0.0,
        }
    }
}

/// Anything that can assign a log-probability to a triple.
pub trait TripleScorer {
    fn log_probability(&self, subject: &str, predicate: &str, object: &str) -> Result<f64, KgeError>;
}

/// `ln σ(z)` without overflow.
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Index of a parameter vector inside a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Param {
    Entity(usize),
    Relation(usize),
}

/// A triple resolved to model indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TripleIds {
    pub subject: usize,
    pub predicate: usize,
    pub object: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    dimension: usize,
    rng_seed: u64,
    calibration: Calibration,
    entity_labels: Vec<String>,
    relation_labels: Vec<String>,
    entity_index: HashMap<String, usize>,
    relation_index: HashMap<String, usize>,
    entity_vectors: Vec<f64>,
    relation_vectors: Vec<f64>,
}

impl EmbeddingModel {
    /// The untrained starting point of [`train`]: uniform in `±6/√d`, relation vectors unit-length.
    pub fn initialize(graph: &KnowledgeGraph, config: &TrainConfig) -> Result<Self, KgeError> {
        config.validate()?;
        if graph.is_empty() {
            return Err(KgeError::EmptyGraph);
        }
        let d = config.dimension;
        let entity_labels: Vec<String> = graph.entities().iter().cloned().collect();
        let relation_labels: Vec<String> = graph.relations().iter().cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let bound = 6.0 / (d as f64).sqrt();
        let entity_vectors: Vec<f64> = (0..entity_labels.len() * d)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let mut relation_vectors: Vec<f64> = (0..relation_labels.len() * d)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        for v in relation_vectors.chunks_mut(d) {
            let n = norm(v);
            if n > 0.0 {
                v.iter_mut().for_each(|x| *x /= n);
            }
        }
        Ok(Self::from_parts(
            d,
            config.rng_seed,
            Calibration::default(),
            entity_labels,
            relation_labels,
            entity_vectors,
            relation_vectors,
        ))
    }

    fn from_parts(
        dimension: usize,
        rng_seed: u64,
        calibration: Calibration,
        entity_labels: Vec<String>,
        relation_labels: Vec<String>,
        entity_vectors: Vec<f64>,
        relation_vectors: Vec<f64>,
    ) -> Self {
        let entity_index = entity_labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        let relation_index = relation_labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        Self {
            dimension,
            rng_seed,
            calibration,
            entity_labels,
            relation_labels,
            entity_index,
            relation_index,
            entity_vectors,
            relation_vectors,
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn calibration(&self) -> Calibration {
        self.calibration
    }

    pub fn set_calibration(&mut self, c: Calibration) {
        self.calibration = c;
    }

    pub fn entity_count(&self) -> usize {
        self.entity_labels.len()
    }

    pub fn entity_labels(&self) -> &[String] {
        &self.entity_labels
    }

    pub fn relation_labels(&self) -> &[String] {
        &self.relation_labels
    }

    pub fn has_entity(&self, label: &str) -> bool {
        self.entity_index.contains_key(label)
    }

    pub fn has_relation(&self, label: &str) -> bool {
        self.relation_index.contains_key(label)
    }

    pub fn entity_id(&self, label: &str) -> Result<usize, KgeError> {
        self.entity_index
            .get(label)
            .copied()
            .ok_or_else(|| KgeError::UnknownEntity(label.to_string()))
    }

    pub fn relation_id(&self, label: &str) -> Result<usize, KgeError> {
        self.relation_index
            .get(label)
            .copied()
            .ok_or_else(|| KgeError::UnknownRelation(label.to_string()))
    }

    pub fn resolve(&self, t: &Triple) -> Result<TripleIds, KgeError> {
        self.resolve_labels(&t.subject, &t.predicate, &t.object)
    }

    fn resolve_labels(&self, s: &str, p: &str, o: &str) -> Result<TripleIds, KgeError> {
        Ok(TripleIds {
            subject: self.entity_id(s)?,
            predicate: self.relation_id(p)?,
            object: self.entity_id(o)?,
        })
    }

    pub fn entity_vector(&self, id: usize) -> &[f64] {
        &self.entity_vectors[id * self.dimension..(id + 1) * self.dimension]
    }

    pub fn relation_vector(&self, id: usize) -> &[f64] {
        &self.relation_vectors[id * self.dimension..(id + 1) * self.dimension]
    }

    pub fn param(&self, p: Param) -> &[f64] {
        match p {
            Param::Entity(i) => self.entity_vector(i),
            Param::Relation(i) => self.relation_vector(i),
        }
    }

    pub fn param_mut(&mut self, p: Param) -> &mut [f64] {
        let d = self.dimension;
        match p {
            Param::Entity(i) => &mut self.entity_vectors[i * d..(i + 1) * d],
            Param::Relation(i) => &mut self.relation_vectors[i * d..(i + 1) * d],
        }
    }

    /// Translation residual `e_s + r_p - e_o`.
    fn residual(&self, t: TripleIds) -> Vec<f64> {
        let s = self.entity_vector(t.subject);
        let p = self.relation_vector(t.predicate);
        let o = self.entity_vector(t.object);
        s.iter().zip(p).zip(o).map(|((s, p), o)| s + p - o).collect()
    }

    /// Raw plausibility `-‖e_s + r_p - e_o‖`.
    pub fn raw_score_ids(&self, t: TripleIds) -> f64 {
        let s = self.entity_vector(t.subject);
        let p = self.relation_vector(t.predicate);
        let o = self.entity_vector(t.object);
        let mut acc = 0.0;
        for i in 0..self.dimension {
            let r = s[i] + p[i] - o[i];
            acc += r * r;
        }
        -acc.sqrt()
    }

    pub fn raw_score(&self, t: &Triple) -> Result<f64, KgeError> {
        Ok(self.raw_score_ids(self.resolve(t)?))
    }

    fn logit(&self, raw: f64) -> f64 {
        self.calibration.scale * raw + self.calibration.offset
    }

    /// Calibrated probability, kept strictly inside `(0, 1)`.
    pub fn probability_ids(&self, t: TripleIds) -> f64 {
        let p = sigmoid(self.logit(self.raw_score_ids(t)));
        p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
    }

    pub fn score_triple(&self, t: &Triple) -> Result<f64, KgeError> {
        Ok(self.probability_ids(self.resolve(t)?))
    }

    pub fn log_probability_ids(&self, t: TripleIds) -> f64 {
        log_sigmoid(self.logit(self.raw_score_ids(t)))
    }

    /// Stable identifier: first 16 hex digits of the SHA-256 of the model file.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{FORMAT_MAGIC} {FORMAT_VERSION}");
        let _ = writeln!(out, "family transe");
        let _ = writeln!(out, "dimension {}", self.dimension);
        let _ = writeln!(out, "seed {}", self.rng_seed);
        let _ = writeln!(
            out,
            "calibration {} {}",
            self.calibration.scale, self.calibration.offset
        );
        let section = |out: &mut String, name: &str, labels: &[String], vecs: &[f64]| {
            let _ = writeln!(out, "{name} {}", labels.len());
            for (label, v) in labels.iter().zip(vecs.chunks(self.dimension)) {
                out.push_str(label);
                out.push('\t');
                for (i, x) in v.iter().enumerate() {
                    if i > 0 {
                        out.push(' ');
                    }
                    // `Display` for f64 prints the shortest exact round-trip form.
                    let _ = write!(out, "{x}");
                }
                out.push('\n');
            }
        };
        section(&mut out, "entities", &self.entity_labels, &self.entity_vectors);
        section(&mut out, "relations", &self.relation_labels, &self.relation_vectors);
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), KgeError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KgeError> {
        Self::read(fs::File::open(path)?)
    }

    pub fn read<R: Read>(reader: R) -> Result<Self, KgeError> {
        let mut cur = LineCursor {
            lines: BufReader::new(reader).lines(),
            line: 0,
        };
        let l = cur.next("header")?;
        if l != format!("{FORMAT_MAGIC} {FORMAT_VERSION}") {
            return Err(cur.bad(format!("unsupported header `{l}`")));
        }
        if cur.keyed("family")? != ["transe"] {
            return Err(cur.bad("unsupported scoring family".into()));
        }
        let dimension: usize = cur
            .keyed("dimension")?
            .first()
            .and_then(|s| s.parse().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| cur.bad("bad dimension".into()))?;
        let rng_seed: u64 = cur
            .keyed("seed")?
            .first()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| cur.bad("bad seed".into()))?;
        let v = cur.keyed("calibration")?;
        if v.len() != 2 {
            return Err(cur.bad("calibration needs two values".into()));
        }
        let calibration = Calibration {
            scale: cur.number(&v[0])?,
            offset: cur.number(&v[1])?,
        };
        let (entity_labels, entity_vectors) = cur.section("entities", dimension)?;
        let (relation_labels, relation_vectors) = cur.section("relations", dimension)?;
        Ok(Self::from_parts(
            dimension,
            rng_seed,
            calibration,
            entity_labels,
            relation_labels,
            entity_vectors,
            relation_vectors,
        ))
    }
}

struct LineCursor<B: BufRead> {
    lines: std::io::Lines<B>,
    line: usize,
}

impl<B: BufRead> LineCursor<B> {
    fn bad(&self, msg: String) -> KgeError {
        KgeError::Format { line: self.line, msg }
    }

    fn next(&mut self, what: &str) -> Result<String, KgeError> {
        self.line += 1;
        match self.lines.next() {
            Some(l) => Ok(l?),
            None => Err(self.bad(format!("unexpected end of file, expected {what}"))),
        }
    }

    fn keyed(&mut self, key: &str) -> Result<Vec<String>, KgeError> {
        let l = self.next(key)?;
        let mut parts = l.split(' ');
        if parts.next() != Some(key) {
            return Err(self.bad(format!("expected `{key}`")));
        }
        Ok(parts.map(str::to_string).collect())
    }

    fn number(&self, s: &str) -> Result<f64, KgeError> {
        s.parse::<f64>().map_err(|_| self.bad(format!("bad number `{s}`")))
    }

    fn section(&mut self, key: &str, dimension: usize) -> Result<(Vec<String>, Vec<f64>), KgeError> {
        let count: usize = self
            .keyed(key)?
            .first()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.bad(format!("bad {key} count")))?;
        let mut labels = Vec::with_capacity(count);
        let mut vecs = Vec::with_capacity(count * dimension);
        for _ in 0..count {
            let l = self.next(key)?;
            let (label, rest) = l
                .split_once('\t')
                .ok_or_else(|| self.bad("missing tab separator".into()))?;
            let before = vecs.len();
            for x in rest.split(' ') {
                let x = self.number(x)?;
                if !x.is_finite() {
                    return Err(self.bad("non-finite component".into()));
                }
                vecs.push(x);
            }
            if vecs.len() - before != dimension {
                return Err(self.bad(format!("expected {dimension} components")));
            }
            labels.push(label.to_string());
        }
        Ok((labels, vecs))
    }
}

impl TripleScorer for EmbeddingModel {
    fn log_probability(&self, subject: &str, predicate: &str, object: &str) -> Result<f64, KgeError> {
        Ok(self.log_probability_ids(self.resolve_labels(subject, predicate, object)?))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Margin ranking loss for one positive/negative pair.
///
/// `loss = max(0, margin - f(pos) + f(neg)) + (λ/2)·‖r_p‖²`, with `pos` and
/// `neg` sharing the predicate `p`.
pub fn pair_loss(model: &EmbeddingModel, pos: TripleIds, neg: TripleIds, objective: &Objective) -> f64 {
    let hinge = (objective.margin - model.raw_score_ids(pos) + model.raw_score_ids(neg)).max(0.0);
    let r = model.relation_vector(pos.predicate);
    hinge + 0.5 * objective.relation_l2 * r.iter().map(|x| x * x).sum::<f64>()
}

/// Loss hyperparameters shared by [`pair_loss`] and [`pair_gradient`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub margin: f64,
    pub relation_l2: f64,
}

impl From<&TrainConfig> for Objective {
    fn from(c: &TrainConfig) -> Self {
        Self {
            margin: c.margin,
            relation_l2: c.relation_l2,
        }
    }
}

/// Analytic gradient of [`pair_loss`]; parameters may repeat and must be summed.
pub fn pair_gradient(
    model: &EmbeddingModel,
    pos: TripleIds,
    neg: TripleIds,
    objective: &Objective,
) -> (f64, Vec<(Param, Vec<f64>)>) {
    debug_assert_eq!(pos.predicate, neg.predicate);
    let r = model.relation_vector(pos.predicate);
    let decay_loss = 0.5 * objective.relation_l2 * r.iter().map(|x| x * x).sum::<f64>();
    let decay = (
        Param::Relation(pos.predicate),
        r.iter().map(|x| objective.relation_l2 * x).collect(),
    );
    let rp = model.residual(pos);
    let rn = model.residual(neg);
    let dp = norm(&rp);
    let dn = norm(&rn);
    let hinge = objective.margin + dp - dn;
    if hinge <= 0.0 {
        return (decay_loss, vec![decay]);
    }
    let unit = |r: &[f64], d: f64, sign: f64| -> Vec<f64> {
        if d > 0.0 {
            r.iter().map(|x| sign * x / d).collect()
        } else {
            vec![0.0; r.len()]
        }
    };
    let gp = unit(&rp, dp, 1.0);
    let gn = unit(&rn, dn, -1.0);
    let neg_of = |g: &[f64]| g.iter().map(|x| -x).collect::<Vec<_>>();
    let grads = vec![
        (Param::Entity(pos.subject), gp.clone()),
        (Param::Relation(pos.predicate), gp.clone()),
        (Param::Entity(pos.object), neg_of(&gp)),
        (Param::Entity(neg.subject), gn.clone()),
        (Param::Relation(neg.predicate), gn.clone()),
        (Param::Entity(neg.object), neg_of(&gn)),
        decay,
    ];
    (hinge + decay_loss, grads)
}

/// Reusable buffers for [`sgd_step`].
pub struct Scratch {
    pos: Vec<f64>,
    neg: Vec<f64>,
}

impl Scratch {
    pub fn new(dimension: usize) -> Self {
        Self {
            pos: vec![0.0; dimension],
            neg: vec![0.0; dimension],
        }
    }
}

fn residual_into(model: &EmbeddingModel, t: TripleIds, out: &mut [f64]) -> f64 {
    let s = model.entity_vector(t.subject);
    let p = model.relation_vector(t.predicate);
    let o = model.entity_vector(t.object);
    let mut acc = 0.0;
    for i in 0..out.len() {
        let r = s[i] + p[i] - o[i];
        out[i] = r;
        acc += r * r;
    }
    acc.sqrt()
}

/// One SGD update with the gradient of [`pair_gradient`], without allocating.
/// Returns the pair loss before the update.
pub fn sgd_step(
    model: &mut EmbeddingModel,
    pos: TripleIds,
    neg: TripleIds,
    objective: &Objective,
    lr: f64,
    scratch: &mut Scratch,
) -> f64 {
    let d = model.dimension;
    let dp = residual_into(model, pos, &mut scratch.pos);
    let dn = residual_into(model, neg, &mut scratch.neg);
    let hinge = objective.margin + dp - dn;
    let rel = pos.predicate;
    let r2: f64 = model.relation_vector(rel).iter().map(|x| x * x).sum();
    let decay_loss = 0.5 * objective.relation_l2 * r2;
    // Decay gradient uses the pre-update relation vector.
    for (w, _) in model.param_mut(Param::Relation(rel)).iter_mut().zip(0..d) {
        *w -= lr * objective.relation_l2 * *w;
    }
    if hinge <= 0.0 {
        return decay_loss;
    }
    let inv_p = if dp > 0.0 { 1.0 / dp } else { 0.0 };
    let inv_n = if dn > 0.0 { 1.0 / dn } else { 0.0 };
    for i in 0..d {
        scratch.pos[i] *= inv_p;
        scratch.neg[i] *= inv_n;
    }
    let d_ = d;
    let update = |model: &mut EmbeddingModel, p: Param, g: &[f64], sign: f64| {
        for (w, gi) in model.param_mut(p).iter_mut().zip(&g[..d_]) {
            *w -= lr * sign * gi;
        }
    };
    update(model, Param::Entity(pos.subject), &scratch.pos, 1.0);
    update(model, Param::Relation(rel), &scratch.pos, 1.0);
    update(model, Param::Entity(pos.object), &scratch.pos, -1.0);
    update(model, Param::Entity(neg.subject), &scratch.neg, -1.0);
    update(model, Param::Relation(rel), &scratch.neg, -1.0);
    update(model, Param::Entity(neg.object), &scratch.neg, 1.0);
    hinge + decay_loss
}

struct TrainingSet {
    triples: Vec<TripleIds>,
    known: HashSet<TripleIds>,
    subjects_by_relation: Vec<Vec<usize>>,
    objects_by_relation: Vec<Vec<usize>>,
    entity_count: usize,
}

impl TrainingSet {
    fn new(model: &EmbeddingModel, graph: &KnowledgeGraph) -> Result<Self, KgeError> {
        let triples: Vec<TripleIds> = graph.triples().map(|t| model.resolve(t)).collect::<Result<_, _>>()?;
        let relations = model.relation_labels.len();
        let mut subjects = vec![Vec::new(); relations];
        let mut objects = vec![Vec::new(); relations];
        for t in &triples {
            subjects[t.predicate].push(t.subject);
            objects[t.predicate].push(t.object);
        }
        for v in subjects.iter_mut().chain(objects.iter_mut()) {
            v.sort_unstable();
            v.dedup();
        }
        Ok(Self {
            known: triples.iter().copied().collect(),
            triples,
            subjects_by_relation: subjects,
            objects_by_relation: objects,
            entity_count: model.entity_count(),
        })
    }

    /// Corrupts one side of `t` with an entity seen in that role, falling back
    /// to any entity. `None` if no unknown corruption turns up.
    fn corrupt(&self, t: TripleIds, rng: &mut ChaCha8Rng) -> Option<TripleIds> {
        let subjects = &self.subjects_by_relation[t.predicate];
        let objects = &self.objects_by_relation[t.predicate];
        let mut replace_subject = rng.gen_bool(0.5);
        if replace_subject && subjects.len() < 2 && objects.len() >= 2 {
            replace_subject = false;
        } else if !replace_subject && objects.len() < 2 && subjects.len() >= 2 {
            replace_subject = true;
        }
        let pool = if replace_subject { subjects } else { objects };
        let build = |e: usize| {
            if replace_subject {
                TripleIds { subject: e, ..t }
            } else {
                TripleIds { object: e, ..t }
            }
        };
        for _ in 0..MAX_CORRUPTION_TRIES {
            let c = build(pool[rng.gen_range(0..pool.len())]);
            if !self.known.contains(&c) {
                return Some(c);
            }
        }
        for _ in 0..MAX_CORRUPTION_TRIES {
            let c = build(rng.gen_range(0..self.entity_count));
            if !self.known.contains(&c) {
                return Some(c);
            }
        }
        None
    }
}

/// Per-epoch mean hinge loss over sampled pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

pub fn train(graph: &KnowledgeGraph, config: &TrainConfig) -> Result<EmbeddingModel, KgeError> {
    train_reporting(graph, config).map(|(m, _)| m)
}

pub fn train_reporting(
    graph: &KnowledgeGraph,
    config: &TrainConfig,
) -> Result<(EmbeddingModel, TrainReport), KgeError> {
    let mut model = EmbeddingModel::initialize(graph, config)?;
    let set = TrainingSet::new(&model, graph)?;
    // Separate stream from initialization so changing epochs never changes the start point.
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed ^ 0x005e_ed0f_7a1e);
    let mut order: Vec<usize> = (0..set.triples.len()).collect();
    let mut report = TrainReport::default();
    let lr = config.learning_rate;
    let objective = Objective::from(config);
    let mut scratch = Scratch::new(model.dimension);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut pairs = 0usize;
        for &i in &order {
            let pos = set.triples[i];
            for _ in 0..config.negatives_per_positive {
                let Some(neg) = set.corrupt(pos, &mut rng) else {
                    continue;
                };
                total += sgd_step(&mut model, pos, neg, &objective, lr, &mut scratch);
                pairs += 1;
            }
        }
        let mean = if pairs > 0 { total / pairs as f64 } else { 0.0 };
        if !mean.is_finite() || model.entity_vectors.iter().any(|x| !x.is_finite()) {
            return Err(KgeError::Diverged { epoch });
        }
        report.epoch_losses.push(mean);
    }

    let mut cal_rng = ChaCha8Rng::seed_from_u64(config.rng_seed ^ 0xca11_b7a7e);
    let positives: Vec<f64> = set.triples.iter().map(|&t| model.raw_score_ids(t)).collect();
    let negatives: Vec<f64> = set
        .triples
        .iter()
        .filter_map(|&t| set.corrupt(t, &mut cal_rng))
        .map(|t| model.raw_score_ids(t))
        .collect();
    model.calibration = fit_platt(&positives, &negatives);
    Ok((model, report))
}

/// Platt scaling with smoothed targets, solved by damped Newton iterations.
pub fn fit_platt(positives: &[f64], negatives: &[f64]) -> Calibration {
    let n_pos = positives.len() as f64;
    let n_neg = negatives.len() as f64;
    if positives.is_empty() || negatives.is_empty() {
        return Calibration::default();
    }
    let hi = (n_pos + 1.0) / (n_pos + 2.0);
    let lo = 1.0 / (n_neg + 2.0);
    let data: Vec<(f64, f64)> = positives
        .iter()
        .map(|&x| (x, hi))
        .chain(negatives.iter().map(|&x| (x, lo)))
        .collect();
    let objective = |a: f64, b: f64| -> f64 {
        data.iter()
            .map(|&(x, t)| {
                let z = a * x + b;
                -(t * log_sigmoid(z) + (1.0 - t) * log_sigmoid(-z))
            })
            .sum()
    };
    let (mut a, mut b) = (1.0, 0.0);
    let mut f = objective(a, b);
    for _ in 0..100 {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 1e-12, 0.0, 1e-12);
        for &(x, t) in &data {
            let p = sigmoid(a * x + b);
            let r = p - t;
            let w = p * (1.0 - p);
            ga += r * x;
            gb += r;
            haa += w * x * x;
            hab += w * x;
            hbb += w;
        }
        if ga.abs() < 1e-10 && gb.abs() < 1e-10 {
            break;
        }
        let det = haa * hbb - hab * hab;
        let (da, db) = if det.abs() > 1e-300 {
            ((hbb * ga - hab * gb) / det, (haa * gb - hab * ga) / det)
        } else {
            (ga, gb)
        };
        let mut step = 1.0;
        let mut improved = false;
        while step > 1e-10 {
            let (na, nb) = (a - step * da, b - step * db);
            let nf = objective(na, nb);
            if nf < f {
                a = na;
                b = nb;
                f = nf;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Calibration { scale: a, offset: b }
}

/// Link-prediction metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankMetrics {
    pub mrr: f64,
    pub hits_at_1: f64,
    pub hits_at_3: f64,
    /// Number of ranking queries (two per held-out triple).
    pub queries: usize,
}

/// Filtered rank of the true entity among all entity substitutions on one side.
///
/// Ties count against the true entity.
fn filtered_rank(model: &EmbeddingModel, t: TripleIds, replace_subject: bool, filter: &HashSet<TripleIds>) -> usize {
    let true_score = model.raw_score_ids(t);
    let mut rank = 1;
    for e in 0..model.entity_count() {
        let c = if replace_subject {
            TripleIds { subject: e, ..t }
        } else {
            TripleIds { object: e, ..t }
        };
        if c == t || filter.contains(&c) {
            continue;
        }
        if model.raw_score_ids(c) >= true_score {
            rank += 1;
        }
    }
    rank
}

/// Mean reciprocal rank and hits@k over subject and object corruptions.
///
/// `filter` holds every known true triple; corruptions that hit one are skipped.
pub fn rank_eval(
    model: &EmbeddingModel,
    held_out: &[Triple],
    filter: &KnowledgeGraph,
    exec: Execution,
) -> Result<RankMetrics, KgeError> {
    if held_out.is_empty() {
        return Err(KgeError::EmptyHeldOut);
    }
    let ids: Vec<TripleIds> = held_out.iter().map(|t| model.resolve(t)).collect::<Result<_, _>>()?;
    let known: HashSet<TripleIds> = filter.triples().filter_map(|t| model.resolve(t).ok()).collect();
    let ranks: Vec<[usize; 2]> = map_slice(exec, &ids, |&t| {
        [
            filtered_rank(model, t, true, &known),
            filtered_rank(model, t, false, &known),
        ]
    });
    let flat: Vec<usize> = ranks.into_iter().flatten().collect();
    let n = flat.len() as f64;
    Ok(RankMetrics {
        mrr: flat.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        hits_at_1: flat.iter().filter(|&&r| r <= 1).count() as f64 / n,
        hits_at_3: flat.iter().filter(|&&r| r <= 3).count() as f64 / n,
        queries: flat.len(),
    })
}

/// Splits off roughly `fraction` of the triples for evaluation while keeping
/// every entity and relation present in the training part.
pub fn split_holdout(graph: &KnowledgeGraph, fraction: f64, seed: u64) -> (KnowledgeGraph, Vec<Triple>) {
    let mut triples: Vec<&Triple> = graph.triples().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    triples.shuffle(&mut rng);
    let target = (graph.len() as f64 * fraction.clamp(0.0, 1.0)).round() as usize;
    let mut degree: HashMap<&str, usize> = HashMap::new();
    let mut rel_count: HashMap<&str, usize> = HashMap::new();
    for t in graph.triples() {
        *degree.entry(&t.subject).or_default() += 1;
        *degree.entry(&t.object).or_default() += 1;
        *rel_count.entry(&t.predicate).or_default() += 1;
    }
    let mut held = Vec::new();
    let mut train = KnowledgeGraph::new();
    for t in triples {
        let removable = held.len() < target
            && degree[t.subject.as_str()] > 1
            && degree[t.object.as_str()] > 1
            && rel_count[t.predicate.as_str()] > 1
            && t.subject != t.object;
        if removable {
            *degree.get_mut(t.subject.as_str()).unwrap() -= 1;
            *degree.get_mut(t.object.as_str()).unwrap() -= 1;
            *rel_count.get_mut(t.predicate.as_str()).unwrap() -= 1;
            held.push(t.clone());
        } else {
            train.insert(t.clone());
        }
    }
    held.sort();
    (train, held)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> KnowledgeGraph {
        [("a", "R", "b"), ("b", "R", "c"), ("a", "S", "c")]
            .into_iter()
            .map(|(s, p, o)| Triple::new(s, p, o).unwrap())
            .collect()
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.margin = 0.0;
        assert!(c.validate().is_err());
        assert!(matches!(
            train(&KnowledgeGraph::new(), &TrainConfig::default()),
            Err(KgeError::EmptyGraph)
        ));
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert_eq!(log_sigmoid(800.0), 0.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn divergence_is_reported() {
        let g = toy();
        let cfg = TrainConfig {
            learning_rate: 1e308,
            epochs: 5,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&g, &cfg), Err(KgeError::Diverged { .. })));
    }

    #[test]
    fn unknown_labels_are_errors() {
        let m = train(
            &toy(),
            &TrainConfig {
                epochs: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let t = Triple::new("zzz", "R", "b").unwrap();
        assert!(matches!(m.score_triple(&t), Err(KgeError::UnknownEntity(_))));
        let t = Triple::new("a", "Q", "b").unwrap();
        assert!(matches!(m.score_triple(&t), Err(KgeError::UnknownRelation(_))));
    }

    #[test]
    fn model_text_round_trip_is_exact() {
        let m = train(
            &toy(),
            &TrainConfig {
                epochs: 10,
                ..Default::default()
            },
        )
        .unwrap();
        let back = EmbeddingModel::read(m.to_text().as_bytes()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.checksum(), m.checksum());
    }

    #[test]
    fn truncated_model_file_is_rejected() {
        let m = train(
            &toy(),
            &TrainConfig {
                epochs: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let text = m.to_text();
        let cut = &text[..text.len() - 40];
        assert!(EmbeddingModel::read(cut.as_bytes()).is_err());
    }

    #[test]
    fn platt_separates_scores() {
        let pos = [-0.1, -0.2, -0.3, -0.15];
        let neg = [-2.0, -2.5, -1.8, -3.0];
        let c = fit_platt(&pos, &neg);
        assert!(c.scale > 0.0);
        assert!(sigmoid(c.scale * -0.2 + c.offset) > 0.5);
        assert!(sigmoid(c.scale * -2.5 + c.offset) < 0.5);
    }

    #[test]
    fn holdout_keeps_vocabulary() {
        let recs = crate::corpus::generate_synthetic_corpus(50, 1).unwrap();
        let g = crate::corpus::instances_to_triples(&recs);
        let (train, held) = split_holdout(&g, 0.1, 9);
        assert_eq!(train.len() + held.len(), g.len());
        assert_eq!(train.entities(), g.entities());
        assert_eq!(train.relations(), g.relations());
        assert!(!held.is_empty());
    }

    #[test]
    fn sgd_step_applies_pair_gradient() {
        let g = toy();
        let cfg = TrainConfig {
            dimension: 5,
            ..Default::default()
        };
        let m = EmbeddingModel::initialize(&g, &cfg).unwrap();
        let obj = Objective {
            margin: 4.0,
            relation_l2: 0.3,
        };
        let pos = m.resolve(&Triple::new("a", "R", "b").unwrap()).unwrap();
        for neg in [TripleIds { object: 0, ..pos }, TripleIds { subject: 2, ..pos }] {
            let (loss, grads) = pair_gradient(&m, pos, neg, &obj);
            let mut expected = m.clone();
            for (p, gv) in grads {
                for (w, gi) in expected.param_mut(p).iter_mut().zip(&gv) {
                    *w -= 0.01 * gi;
                }
            }
            let mut got = m.clone();
            let l = sgd_step(&mut got, pos, neg, &obj, 0.01, &mut Scratch::new(5));
            assert!((l - loss).abs() < 1e-12);
            for (a, b) in got
                .entity_vectors
                .iter()
                .chain(&got.relation_vectors)
                .zip(expected.entity_vectors.iter().chain(&expected.relation_vectors))
            {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
