//! Labeled instance records, the rule oracle that labels them, and the
//! conversion of a corpus into knowledge-graph triples.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::{FeatureError, FeatureVector, Intention, Slot, ThwRisk, TtcRisk, SLOT_COUNT, VOCAB_SIZE};
use crate::graph::{KnowledgeGraph, Triple, CLASS_NODE, HAS_CHILD, INTENTION_IS};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus size must be positive")]
    EmptyRequest,
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("line {line}: duplicate instance id `{id}`")]
    DuplicateId { line: u64, id: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One labeled example: a child vehicle node with its features and intention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceRecord {
    pub instance_id: String,
    pub features: FeatureVector,
    pub intention: Intention,
}

const LEFT: u8 = 0;
const RIGHT: u8 = 2;
const LEFTMOST: u8 = 0;
const RIGHTMOST: u8 = 2;

/// Ground-truth labeling rule for synthetic data.
///
/// A lane change needs urgency (high-risk TTC or collision-risk headway to
/// the preceding vehicle) and an adjacent lane that exists and is attractive
/// (highest attraction or highest frontal gap). Risk from left/right
/// neighbours does not veto the change: preceding-vehicle urgency dominates.
/// Left wins when both sides qualify.
pub fn rule_label(v: &FeatureVector) -> Intention {
    let urgent = v.index(Slot::PrecedingTtc) == TtcRisk::High.index()
        || v.index(Slot::PrecedingThw) == ThwRisk::CollisionRisk.index();
    if !urgent {
        return Intention::Lk;
    }
    let lane = v.index(Slot::LaneId);
    let attraction = v.index(Slot::HighestAttractionLane);
    let gap = v.index(Slot::HighestFrontalGapLane);
    let left_free = lane != LEFTMOST && (attraction == LEFT || gap == LEFT);
    let right_free = lane != RIGHTMOST && (attraction == RIGHT || gap == RIGHT);
    if left_free {
        Intention::Llc
    } else if right_free {
        Intention::Rlc
    } else {
        Intention::Lk
    }
}

/// `n` records with uniformly sampled features, labeled by [`rule_label`].
pub fn generate_synthetic_corpus(n: usize, seed: u64) -> Result<Vec<InstanceRecord>, CorpusError> {
    if n == 0 {
        return Err(CorpusError::EmptyRequest);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((1..=n)
        .map(|i| {
            let mut cats = [0u8; SLOT_COUNT];
            for c in cats.iter_mut() {
                *c = rng.gen_range(0..VOCAB_SIZE as u8);
            }
            let features = FeatureVector::from_indices(cats);
            InstanceRecord {
                instance_id: format!("{CLASS_NODE}{i}"),
                intention: rule_label(&features),
                features,
            }
        })
        .collect())
}

/// Emits, per record, one `HAS_CHILD` edge, twelve feature edges and one
/// `INTENTION_IS` edge.
pub fn record_triples(r: &InstanceRecord) -> Vec<Triple> {
    let mut out = Vec::with_capacity(SLOT_COUNT + 2);
    let t = |s: &str, p: &str, o: &str| Triple::new(s, p, o).expect("corpus labels are valid");
    out.push(t(CLASS_NODE, HAS_CHILD, &r.instance_id));
    for (slot, label) in r.features.labels() {
        out.push(t(&r.instance_id, slot.predicate(), label));
    }
    out.push(t(&r.instance_id, INTENTION_IS, r.intention.as_str()));
    out
}

pub fn instances_to_triples(records: &[InstanceRecord]) -> KnowledgeGraph {
    records.iter().flat_map(record_triples).collect()
}

fn header() -> Vec<&'static str> {
    let mut h = vec!["instance_id"];
    h.extend(Slot::ALL.iter().map(|s| s.name()));
    h.push("intention");
    h
}

pub fn write_corpus_csv<W: Write>(records: &[InstanceRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{}", header().join(","))?;
    for r in records {
        writeln!(w, "{},{},{}", r.instance_id, r.features.to_tokens(), r.intention)?;
    }
    w.flush()
}

pub fn read_corpus_csv<R: Read>(reader: R) -> Result<Vec<InstanceRecord>, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let expected = header();
    let hdr = rdr.headers()?.clone();
    if hdr.iter().collect::<Vec<_>>() != expected {
        return Err(CorpusError::Parse {
            line: 1,
            msg: "unexpected header".into(),
        });
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != expected.len() {
            return Err(CorpusError::Parse {
                line,
                msg: format!("expected {} fields, found {}", expected.len(), rec.len()),
            });
        }
        let parse_err = |e: FeatureError| CorpusError::Parse {
            line,
            msg: e.to_string(),
        };
        let labels: Vec<&str> = rec.iter().skip(1).take(SLOT_COUNT).collect();
        let features = FeatureVector::from_labels(&labels).map_err(parse_err)?;
        let intention: Intention = rec[SLOT_COUNT + 1]
            .parse()
            .map_err(|msg| CorpusError::Parse { line, msg })?;
        let id = rec[0].to_string();
        if Triple::new(&id, HAS_CHILD, CLASS_NODE).is_err() {
            return Err(CorpusError::Parse {
                line,
                msg: format!("invalid instance id `{id}`"),
            });
        }
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId { line, id });
        }
        out.push(InstanceRecord {
            instance_id: id,
            features,
            intention,
        });
    }
    Ok(out)
}

pub fn save_corpus(records: &[InstanceRecord], path: impl AsRef<Path>) -> Result<(), CorpusError> {
    write_corpus_csv(records, BufWriter::new(File::create(path)?))?;
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<InstanceRecord>, CorpusError> {
    read_corpus_csv(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{assemble_features, ScenarioPreset};
    use std::collections::BTreeSet;

    fn all_safe() -> FeatureVector {
        FeatureVector::from_labels(&[
            "movingStraight",
            "zeroLateralAcceleration",
            "lowRiskLeftPreceding",
            "lowRiskPreceding",
            "lowRiskRightPreceding",
            "lowRiskLeftFollowing",
            "lowRiskRightFollowing",
            "safeHeadway",
            "centerOfTheLane",
            "middleLane",
            "currentLaneMostAttractive",
            "currentLaneHighestGap",
        ])
        .unwrap()
    }

    #[test]
    fn rule_examples() {
        let preset = ScenarioPreset::default();
        let v = assemble_features(TtcRisk::High, ThwRisk::Safe, &preset);
        assert_eq!(rule_label(&v), Intention::Llc);
        assert_eq!(rule_label(&all_safe()), Intention::Lk);
        // Left-lane risk does not override preceding urgency.
        let risky_left = v
            .with_index(Slot::LeftFollowingTtc, 0)
            .with_index(Slot::LeftPrecedingTtc, 0);
        assert_eq!(rule_label(&risky_left), Intention::Llc);
        let mirror = v
            .with_index(Slot::LaneId, LEFTMOST)
            .with_index(Slot::HighestAttractionLane, RIGHT)
            .with_index(Slot::HighestFrontalGapLane, RIGHT);
        assert_eq!(rule_label(&mirror), Intention::Rlc);
    }

    #[test]
    fn rule_is_total() {
        let counts = (0..FeatureVector::SPACE_SIZE)
            .map(|r| rule_label(&FeatureVector::from_rank(r)))
            .fold([0usize; 3], |mut acc, h| {
                acc[h.index()] += 1;
                acc
            });
        assert_eq!(counts.iter().sum::<usize>(), FeatureVector::SPACE_SIZE);
        assert!(counts.iter().all(|&c| c > 0));
    }

    // Independent count of emitted triples: enumerate the expected set by hand.
    fn expected_triples(records: &[InstanceRecord]) -> BTreeSet<(String, String, String)> {
        let mut set = BTreeSet::new();
        for r in records {
            set.insert(("vehicle".into(), "HAS_CHILD".into(), r.instance_id.clone()));
            for slot in Slot::ALL {
                set.insert((
                    r.instance_id.clone(),
                    slot.predicate().into(),
                    r.features.get(slot).into(),
                ));
            }
            set.insert((r.instance_id.clone(), "INTENTION_IS".into(), r.intention.to_string()));
        }
        set
    }

    #[test]
    fn triple_counts() {
        assert!(instances_to_triples(&[]).is_empty());

        let f = all_safe();
        let one = vec![InstanceRecord {
            instance_id: "vehicle1".into(),
            features: f,
            intention: Intention::Lk,
        }];
        let g = instances_to_triples(&one);
        assert_eq!(g.len(), 14);
        let got: BTreeSet<_> = g
            .triples()
            .map(|t| (t.subject.clone(), t.predicate.clone(), t.object.clone()))
            .collect();
        assert_eq!(got, expected_triples(&one));

        let mut two = one.clone();
        two.push(InstanceRecord {
            instance_id: "vehicle2".into(),
            ..one[0].clone()
        });
        let g = instances_to_triples(&two);
        assert_eq!(g.len(), 28);
        let children = g.triples().filter(|t| t.predicate == HAS_CHILD).count();
        assert_eq!(children, 2);
        // Shared feature objects, distinct subjects.
        assert_eq!(g.entities().len(), 1 + 2 + 12 + 1);
    }

    #[test]
    fn generator_is_deterministic_and_labeled() {
        let a = generate_synthetic_corpus(1000, 42).unwrap();
        let b = generate_synthetic_corpus(1000, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic_corpus(1000, 43).unwrap());
        assert!(a.iter().all(|r| r.intention == rule_label(&r.features)));
        let ids: HashSet<_> = a.iter().map(|r| &r.instance_id).collect();
        assert_eq!(ids.len(), 1000);
        assert!(generate_synthetic_corpus(0, 1).is_err());
    }

    #[test]
    fn corpus_csv_round_trip_and_errors() {
        let recs = generate_synthetic_corpus(25, 3).unwrap();
        let mut buf = Vec::new();
        write_corpus_csv(&recs, &mut buf).unwrap();
        assert_eq!(read_corpus_csv(buf.as_slice()).unwrap(), recs);

        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.push(lines[1]);
        let dup = lines.join("\n");
        assert!(matches!(
            read_corpus_csv(dup.as_bytes()),
            Err(CorpusError::DuplicateId { line: 27, .. })
        ));
    }
}
