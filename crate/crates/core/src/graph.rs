//! Triple data model and the header-less `subject,predicate,object` CSV.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

/// Class node every instance hangs off.
pub const CLASS_NODE: &str = "vehicle";
pub const HAS_CHILD: &str = "HAS_CHILD";
pub const INTENTION_IS: &str = "INTENTION_IS";

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid label `{0}`: labels must be non-empty ASCII without commas or line breaks")]
    InvalidLabel(String),
    #[error("line {line}: expected 3 fields, found {found}")]
    FieldCount { line: u64, found: usize },
    #[error("line {line}: {source}")]
    Row { line: u64, source: Box<GraphError> },
    #[error("triples file is empty")]
    Empty,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn valid_label(s: &str) -> bool {
    !s.is_empty() && s.is_ascii() && !s.contains([',', '\n', '\r'])
}

/// A `(subject, predicate, object)` statement.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl Triple {
    pub fn new(
        subject: impl Into<String>,
        predicate: impl Into<String>,
        object: impl Into<String>,
    ) -> Result<Self, GraphError> {
        let t = Self {
            subject: subject.into(),
            predicate: predicate.into(),
            object: object.into(),
        };
        for part in [&t.subject, &t.predicate, &t.object] {
            if !valid_label(part) {
                return Err(GraphError::InvalidLabel(part.clone()));
            }
        }
        Ok(t)
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{}, {}, {}>", self.subject, self.predicate, self.object)
    }
}

/// A deduplicated set of triples with derived entity and relation sets.
///
/// Triples are kept sorted, so iteration order does not depend on insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeGraph {
    triples: BTreeSet<Triple>,
    entities: BTreeSet<String>,
    relations: BTreeSet<String>,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns `false` if the triple was already present.
    pub fn insert(&mut self, t: Triple) -> bool {
        if self.triples.contains(&t) {
            return false;
        }
        self.entities.insert(t.subject.clone());
        self.entities.insert(t.object.clone());
        self.relations.insert(t.predicate.clone());
        self.triples.insert(t)
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.triples.contains(t)
    }

    pub fn triples(&self) -> impl DoubleEndedIterator<Item = &Triple> + ExactSizeIterator {
        self.triples.iter()
    }

    pub fn entities(&self) -> &BTreeSet<String> {
        &self.entities
    }

    pub fn relations(&self) -> &BTreeSet<String> {
        &self.relations
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, GraphError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(reader);
        let mut graph = Self::new();
        for record in rdr.records() {
            let record = record?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            if record.len() != 3 {
                return Err(GraphError::FieldCount {
                    line,
                    found: record.len(),
                });
            }
            let t = Triple::new(&record[0], &record[1], &record[2]).map_err(|e| GraphError::Row {
                line,
                source: Box::new(e),
            })?;
            graph.insert(t);
        }
        if graph.is_empty() {
            return Err(GraphError::Empty);
        }
        Ok(graph)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for t in &self.triples {
            writeln!(w, "{},{},{}", t.subject, t.predicate, t.object)?;
        }
        w.flush()
    }
}

impl FromIterator<Triple> for KnowledgeGraph {
    fn from_iter<I: IntoIterator<Item = Triple>>(iter: I) -> Self {
        let mut g = Self::new();
        for t in iter {
            g.insert(t);
        }
        g
    }
}

pub fn load_triples_csv(path: impl AsRef<Path>) -> Result<KnowledgeGraph, GraphError> {
    KnowledgeGraph::read_csv(File::open(path)?)
}

pub fn save_triples_csv(graph: &KnowledgeGraph, path: impl AsRef<Path>) -> Result<(), GraphError> {
    graph.write_csv(BufWriter::new(File::create(path)?))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reads_example_triples() {
        let src = "vehicle,HAS_CHILD,vehicle1\n\
                   vehicle1,PRECEDING_VEHICLE_TTC_IS,highRiskPreceding\n\
                   vehicle1,INTENTION_IS,LLC\n";
        let g = KnowledgeGraph::read_csv(src.as_bytes()).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.entities().len(), 4);
        assert_eq!(g.relations().len(), 3);
    }

    #[test]
    fn duplicate_rows_collapse() {
        let src = "a,R,b\na,R,b\n";
        let g = KnowledgeGraph::read_csv(src.as_bytes()).unwrap();
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn short_row_names_line() {
        let src = "a,R,b\na,R\n";
        match KnowledgeGraph::read_csv(src.as_bytes()) {
            Err(GraphError::FieldCount { line: 2, found: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(
            KnowledgeGraph::read_csv("".as_bytes()),
            Err(GraphError::Empty)
        ));
    }

    #[test]
    fn rejects_bad_labels() {
        assert!(Triple::new("", "R", "b").is_err());
        assert!(Triple::new("a,b", "R", "c").is_err());
        assert!(Triple::new("a", "R", "ü").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kg.csv");
        let g: KnowledgeGraph = [("x", "R", "y"), ("y", "S", "z")]
            .into_iter()
            .map(|(s, p, o)| Triple::new(s, p, o).unwrap())
            .collect();
        save_triples_csv(&g, &path).unwrap();
        assert_eq!(load_triples_csv(&path).unwrap(), g);
    }

    proptest! {
        #[test]
        fn csv_round_trip(rows in prop::collection::vec(("[a-z][a-z0-9_]{0,6}", "[A-Z_]{1,5}", "[a-z][a-zA-Z]{0,6}"), 1..40)) {
            let g: KnowledgeGraph = rows.iter()
                .map(|(s, p, o)| Triple::new(s.as_str(), p.as_str(), o.as_str()).unwrap())
                .collect();
            let mut buf = Vec::new();
            g.write_csv(&mut buf).unwrap();
            prop_assert_eq!(KnowledgeGraph::read_csv(buf.as_slice()).unwrap(), g);
        }
    }
}
