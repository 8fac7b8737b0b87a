//! Exhaustive precomputation of posteriors into a lookup table.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::bayes::{argmax, combine, event_term, log_priors, BayesError, EventTerm, EvidenceTerms};
use crate::exec::{map_range, Execution};
use crate::features::{FeatureVector, Intention, ScenarioPreset, Slot, SLOT_COUNT, VOCAB_SIZE};
use crate::graph::{CLASS_NODE, INTENTION_IS};
use crate::kge::EmbeddingModel;

#[derive(Debug, Error)]
pub enum TableError {
    #[error("model is missing labels required by the scope: {}", .0.join(", "))]
    MissingLabels(Vec<String>),
    #[error("no table row for `{0}`")]
    Miss(String),
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("line {line}: expected {expected} columns, found {found}")]
    ColumnCount { line: usize, expected: usize, found: usize },
    #[error("line {line}: duplicate row (first seen on line {first})")]
    Duplicate { line: usize, first: usize },
    #[error("table is incomplete: {missing} of {expected} combinations missing")]
    Incomplete { missing: usize, expected: usize },
    #[error(transparent)]
    Bayes(#[from] BayesError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Which part of the feature space a table covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// All 3^12 combinations.
    Full,
    /// Ten slots pinned by the preset; the preceding TTC and THW vary.
    Scenario(ScenarioPreset),
}

impl Scope {
    pub fn size(&self) -> usize {
        match self {
            Scope::Full => FeatureVector::SPACE_SIZE,
            Scope::Scenario(_) => VOCAB_SIZE * VOCAB_SIZE,
        }
    }

    /// The `i`-th vector of the scope in enumeration order.
    pub fn vector(&self, i: usize) -> FeatureVector {
        match self {
            Scope::Full => FeatureVector::from_rank(i),
            Scope::Scenario(p) => p
                .base()
                .with_index(Slot::PrecedingTtc, (i / VOCAB_SIZE) as u8)
                .with_index(Slot::PrecedingThw, (i % VOCAB_SIZE) as u8),
        }
    }

    pub fn contains(&self, v: &FeatureVector) -> bool {
        match self {
            Scope::Full => true,
            Scope::Scenario(p) => p.matches(v),
        }
    }

    /// Category indices a slot can take within the scope.
    pub fn allowed(&self, slot: Slot) -> Vec<u8> {
        match self {
            Scope::Scenario(p) if ScenarioPreset::is_fixed(slot) => vec![p.base().index(slot)],
            _ => (0..VOCAB_SIZE as u8).collect(),
        }
    }

    pub fn parse(s: &str) -> Result<Self, String> {
        match s {
            "full" => return Ok(Scope::Full),
            "scenario" => return Ok(Scope::Scenario(ScenarioPreset::default())),
            _ => {}
        }
        let pattern = s
            .strip_prefix("scenario:")
            .ok_or_else(|| format!("unknown scope `{s}`"))?;
        ScenarioPreset::parse_pattern(pattern)
            .map(Scope::Scenario)
            .map_err(|e| e.to_string())
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Full => f.write_str("full"),
            Scope::Scenario(p) => write!(f, "scenario:{}", p.to_pattern()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionRow {
    pub features: FeatureVector,
    pub intention: Intention,
    /// `P(h|e)` in `Intention::ALL` order.
    pub probabilities: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    rows: Vec<PredictionRow>,
    index: HashMap<FeatureVector, usize>,
    model_id: String,
    scope: Scope,
}

/// Labels the model must know for every posterior in `scope`.
fn missing_labels(model: &EmbeddingModel, scope: &Scope) -> Vec<String> {
    let mut missing = BTreeSet::new();
    for e in [CLASS_NODE].into_iter().chain(Intention::ALL.map(|h| h.as_str())) {
        if !model.has_entity(e) {
            missing.insert(e.to_string());
        }
    }
    if !model.has_relation(INTENTION_IS) {
        missing.insert(INTENTION_IS.to_string());
    }
    for slot in Slot::ALL {
        if !model.has_relation(slot.predicate()) {
            missing.insert(slot.predicate().to_string());
        }
        for i in scope.allowed(slot) {
            if !model.has_entity(slot.label(i)) {
                missing.insert(slot.label(i).to_string());
            }
        }
    }
    missing.into_iter().collect()
}

/// Runs the posterior over every vector in `scope`.
///
/// Event terms depend only on `(slot, category)`, so each one is computed
/// once and reused; rows are identical to live [`crate::bayes::posterior`] calls.
pub fn compile(model: &EmbeddingModel, scope: Scope, exec: Execution) -> Result<PredictionTable, TableError> {
    let missing = missing_labels(model, &scope);
    if !missing.is_empty() {
        return Err(TableError::MissingLabels(missing));
    }
    let log_prior = log_priors(model)?;
    let mut terms: Vec<[Option<EventTerm>; VOCAB_SIZE]> = vec![[None; VOCAB_SIZE]; SLOT_COUNT];
    for slot in Slot::ALL {
        for i in scope.allowed(slot) {
            terms[slot.position()][i as usize] = Some(event_term(model, slot, slot.label(i))?);
        }
    }
    let rows = map_range(exec, scope.size(), |i| {
        let features = scope.vector(i);
        let evidence = EvidenceTerms {
            log_prior,
            events: Slot::ALL
                .into_iter()
                .map(|s| terms[s.position()][features.index(s) as usize].expect("term cached for scope"))
                .collect(),
        };
        let post = combine(&evidence);
        PredictionRow {
            features,
            intention: post.intention,
            probabilities: post.probabilities,
        }
    });
    Ok(PredictionTable::from_rows(rows, model.checksum(), scope))
}

impl PredictionTable {
    fn from_rows(rows: Vec<PredictionRow>, model_id: String, scope: Scope) -> Self {
        let index = rows.iter().enumerate().map(|(i, r)| (r.features, i)).collect();
        Self {
            rows,
            index,
            model_id,
            scope,
        }
    }

    pub fn rows(&self) -> &[PredictionRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Checksum of the model the table was compiled from.
    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    pub fn lookup(&self, features: &FeatureVector) -> Result<&PredictionRow, TableError> {
        self.index
            .get(features)
            .map(|&i| &self.rows[i])
            .ok_or_else(|| TableError::Miss(features.to_tokens()))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# lanekg-table model={} scope={}", self.model_id, self.scope)?;
        writeln!(w, "{}", header().join(","))?;
        for r in &self.rows {
            let [a, b, c] = r.probabilities;
            writeln!(w, "{},{},{a:.8e},{b:.8e},{c:.8e}", r.features.to_tokens(), r.intention)?;
        }
        w.flush()
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), TableError> {
        self.write_csv(BufWriter::new(File::create(path)?))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, TableError> {
        let mut lines = BufReader::new(reader).lines();
        let mut preamble = |line: usize| -> Result<String, TableError> {
            lines.next().transpose()?.ok_or(TableError::Format {
                line,
                msg: "unexpected end of file".into(),
            })
        };
        let (model_id, scope) = parse_comment(&preamble(1)?)?;
        if preamble(2)? != header().join(",") {
            return Err(TableError::Format {
                line: 2,
                msg: "unexpected header".into(),
            });
        }
        let expected = SLOT_COUNT + 4;
        let mut rows = Vec::with_capacity(scope.size());
        let mut seen: HashMap<FeatureVector, usize> = HashMap::with_capacity(scope.size());
        for (i, text) in lines.enumerate() {
            let text = text?;
            let line = i + 3;
            let fields: Vec<&str> = text.split(',').collect();
            if fields.len() != expected {
                return Err(TableError::ColumnCount {
                    line,
                    expected,
                    found: fields.len(),
                });
            }
            let bad = |msg: String| TableError::Format { line, msg };
            let features = FeatureVector::from_labels(&fields[..SLOT_COUNT]).map_err(|e| bad(e.to_string()))?;
            if !scope.contains(&features) {
                return Err(bad(format!("row outside scope {scope}")));
            }
            let intention: Intention = fields[SLOT_COUNT].parse().map_err(bad)?;
            let mut probabilities = [0.0; 3];
            for (p, s) in probabilities.iter_mut().zip(&fields[SLOT_COUNT + 1..]) {
                *p = s
                    .parse::<f64>()
                    .ok()
                    .filter(|p| (0.0..=1.0).contains(p))
                    .ok_or_else(|| bad(format!("invalid probability `{s}`")))?;
            }
            // Rounding may merge near-ties, so only require the stored label to be maximal.
            if probabilities[intention.index()] < probabilities[argmax(&probabilities).index()] {
                return Err(bad(format!("intention {intention} is not the argmax")));
            }
            if let Some(&first) = seen.get(&features) {
                return Err(TableError::Duplicate { line, first });
            }
            seen.insert(features, line);
            rows.push(PredictionRow {
                features,
                intention,
                probabilities,
            });
        }
        if rows.len() != scope.size() {
            return Err(TableError::Incomplete {
                missing: scope.size() - rows.len(),
                expected: scope.size(),
            });
        }
        Ok(Self::from_rows(rows, model_id, scope))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self, TableError> {
        Self::read_csv(File::open(path)?)
    }
}

pub fn header() -> Vec<&'static str> {
    let mut h: Vec<&str> = Slot::ALL.iter().map(|s| s.name()).collect();
    h.extend(["intention", "p_llc", "p_lk", "p_rlc"]);
    h
}

fn parse_comment(line: &str) -> Result<(String, Scope), TableError> {
    let bad = |msg: &str| TableError::Format {
        line: 1,
        msg: msg.to_string(),
    };
    let rest = line
        .strip_prefix("# lanekg-table ")
        .ok_or_else(|| bad("missing `# lanekg-table` comment"))?;
    let mut model = None;
    let mut scope = None;
    for kv in rest.split_whitespace() {
        match kv.split_once('=') {
            Some(("model", v)) => model = Some(v.to_string()),
            Some(("scope", v)) => scope = Some(Scope::parse(v).map_err(|e| bad(&e))?),
            _ => return Err(bad(&format!("unexpected comment field `{kv}`"))),
        }
    }
    Ok((
        model.ok_or_else(|| bad("missing model checksum"))?,
        scope.ok_or_else(|| bad("missing scope"))?,
    ))
}
