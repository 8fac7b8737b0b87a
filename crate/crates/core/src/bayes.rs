//! Posterior over maneuver hypotheses from triple probabilities.
//!
//! For each hypothesis `h` and the twelve observed categories `e_i`:
//!
//! ```text
//! score(h) = P(h) · Π_i P(e_i | h) / Π_i P(e_i)
//! P(h)       = p(<vehicle, INTENTION_IS, h>)
//! P(e_i | h) = p(<category_i, INTENTION_IS, h>)
//! P(e_i)     = p(<vehicle, SLOT_PREDICATE_i, category_i>)
//! ```
//!
//! Products are accumulated as sums of logs and the three scores are
//! renormalized into a distribution.

use thiserror::Error;

use crate::features::{FeatureVector, Intention, Slot};
use crate::graph::{CLASS_NODE, INTENTION_IS};
use crate::kge::{KgeError, TripleScorer};

#[derive(Debug, Error)]
pub enum BayesError {
    #[error(transparent)]
    Score(#[from] KgeError),
}

/// Log-space inputs to the posterior: one prior per hypothesis and one
/// `(log P(e|h) per h, log P(e))` pair per observed event.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceTerms {
    pub log_prior: [f64; 3],
    pub events: Vec<EventTerm>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventTerm {
    pub log_likelihood: [f64; 3],
    pub log_evidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManeuverPosterior {
    /// Normalized `P(h|e)` in `Intention::ALL` order.
    pub probabilities: [f64; 3],
    /// Unnormalized log scores.
    pub log_scores: [f64; 3],
    pub intention: Intention,
}

impl ManeuverPosterior {
    /// Unnormalized scores in linear space (may underflow for long evidence lists).
    pub fn raw_scores(&self) -> [f64; 3] {
        self.log_scores.map(f64::exp)
    }

    pub fn probability(&self, h: Intention) -> f64 {
        self.probabilities[h.index()]
    }
}

/// Index of the largest value; earlier wins ties.
pub fn argmax(values: &[f64; 3]) -> Intention {
    let mut best = 0;
    for i in 1..3 {
        if values[i] > values[best] {
            best = i;
        }
    }
    Intention::ALL[best]
}

/// Combines log-space terms into a normalized posterior.
pub fn combine(terms: &EvidenceTerms) -> ManeuverPosterior {
    let mut log_scores = terms.log_prior;
    for ev in &terms.events {
        for (s, l) in log_scores.iter_mut().zip(ev.log_likelihood) {
            *s += l - ev.log_evidence;
        }
    }
    let max = log_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights = log_scores.map(|s| (s - max).exp());
    let total: f64 = weights.iter().sum();
    let probabilities = weights.map(|w| w / total);
    ManeuverPosterior {
        probabilities,
        log_scores,
        intention: argmax(&probabilities),
    }
}

/// `log P(h)` for each hypothesis.
pub fn log_priors<S: TripleScorer + ?Sized>(scorer: &S) -> Result<[f64; 3], BayesError> {
    let mut log_prior = [0.0; 3];
    for h in Intention::ALL {
        log_prior[h.index()] = scorer.log_probability(CLASS_NODE, INTENTION_IS, h.as_str())?;
    }
    Ok(log_prior)
}

/// `log P(e|h)` per hypothesis and `log P(e)` for one observed category.
pub fn event_term<S: TripleScorer + ?Sized>(scorer: &S, slot: Slot, category: &str) -> Result<EventTerm, BayesError> {
    let mut log_likelihood = [0.0; 3];
    for h in Intention::ALL {
        log_likelihood[h.index()] = scorer.log_probability(category, INTENTION_IS, h.as_str())?;
    }
    Ok(EventTerm {
        log_likelihood,
        log_evidence: scorer.log_probability(CLASS_NODE, slot.predicate(), category)?,
    })
}

/// Queries the scorer for the hypothesis, event and conditional triples of `features`.
pub fn evidence_terms<S: TripleScorer + ?Sized>(
    scorer: &S,
    features: &FeatureVector,
) -> Result<EvidenceTerms, BayesError> {
    let events = Slot::ALL
        .into_iter()
        .map(|slot| event_term(scorer, slot, features.get(slot)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvidenceTerms {
        log_prior: log_priors(scorer)?,
        events,
    })
}

pub fn posterior<S: TripleScorer + ?Sized>(
    scorer: &S,
    features: &FeatureVector,
) -> Result<ManeuverPosterior, BayesError> {
    Ok(combine(&evidence_terms(scorer, features)?))
}

pub fn predict<S: TripleScorer + ?Sized>(scorer: &S, features: &FeatureVector) -> Result<Intention, BayesError> {
    Ok(posterior(scorer, features)?.intention)
}
