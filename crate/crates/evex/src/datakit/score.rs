//! Role-level micro P/R/F1.
//!
//! Each predicted event is greedily matched (in prediction order) to the
//! unmatched gold event of the same type that shares the most (role, entity)
//! pairs, ties toward the lowest gold index. Matched shared pairs are true
//! positives; everything else predicted is a false positive and everything
//! else gold is a false negative. Aggregates are reported overall, for
//! single-event documents, for multi-event documents, and per event type.

use crate::decoder::{EventRecord, Schema};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

pub const SCORE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TypeScore {
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<Counts> for TypeScore {
    fn from(counts: Counts) -> Self {
        TypeScore {
            counts,
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
        }
    }
}

/// Micro-averaged role-level scores.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScoreReport {
    pub format_version: u32,
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// F1 over documents with exactly one gold event.
    pub f1_single: f64,
    /// F1 over documents with more than one gold event.
    pub f1_multi: f64,
    pub per_type: BTreeMap<String, TypeScore>,
}

type Pair = (usize, i64); // (role class, entity id)

fn pair_set(ev: &EventRecord, schema: &Schema) -> Result<BTreeSet<Pair>> {
    ev.args
        .iter()
        .map(|a| Ok((schema.role_class(&a.role)?, a.entity_id)))
        .collect()
}

/// Scores one document, returning counts per event type name.
fn score_document(
    predicted: &[EventRecord],
    gold: &[EventRecord],
    schema: &Schema,
) -> Result<BTreeMap<String, Counts>> {
    let pred_pairs: Vec<BTreeSet<Pair>> = predicted
        .iter()
        .map(|e| pair_set(e, schema))
        .collect::<Result<_>>()?;
    let gold_pairs: Vec<BTreeSet<Pair>> = gold
        .iter()
        .map(|e| pair_set(e, schema))
        .collect::<Result<_>>()?;
    for ev in predicted.iter().chain(gold) {
        schema.type_class(&ev.event_type)?;
    }

    let mut used = vec![false; gold.len()];
    let mut per_type: BTreeMap<String, Counts> = BTreeMap::new();
    for (pi, pev) in predicted.iter().enumerate() {
        let mut best: Option<(usize, usize)> = None; // (overlap, gold index)
        for (gi, gev) in gold.iter().enumerate() {
            if used[gi] || gev.event_type != pev.event_type {
                continue;
            }
            let overlap = pred_pairs[pi].intersection(&gold_pairs[gi]).count();
            let better = match best {
                None => true,
                Some((bo, _)) => overlap > bo,
            };
            if better {
                best = Some((overlap, gi));
            }
        }
        let entry = per_type.entry(pev.event_type.clone()).or_default();
        match best {
            Some((overlap, gi)) => {
                used[gi] = true;
                entry.tp += overlap as u64;
                entry.fp += (pred_pairs[pi].len() - overlap) as u64;
                entry.fn_ += (gold_pairs[gi].len() - overlap) as u64;
            }
            None => {
                entry.fp += pred_pairs[pi].len() as u64;
            }
        }
    }
    for (gi, gev) in gold.iter().enumerate() {
        if !used[gi] {
            per_type.entry(gev.event_type.clone()).or_default().fn_ +=
                gold_pairs[gi].len() as u64;
        }
    }
    Ok(per_type)
}

/// Scores a corpus of per-document predictions against gold events.
pub fn score(
    predicted: &[Vec<EventRecord>],
    gold: &[Vec<EventRecord>],
    schema: &Schema,
) -> Result<ScoreReport> {
    if predicted.len() != gold.len() {
        return Err(Error::shape(
            "score",
            format!("{} predicted documents vs {} gold", predicted.len(), gold.len()),
        ));
    }
    let mut total = Counts::default();
    let mut single = Counts::default();
    let mut multi = Counts::default();
    let mut per_type: BTreeMap<String, Counts> = BTreeMap::new();
    for (pdoc, gdoc) in predicted.iter().zip(gold) {
        let doc_scores = score_document(pdoc, gdoc, schema)?;
        let mut doc_total = Counts::default();
        for (ty, counts) in doc_scores {
            per_type.entry(ty).or_default().add(counts);
            doc_total.add(counts);
        }
        total.add(doc_total);
        match gdoc.len() {
            1 => single.add(doc_total),
            n if n > 1 => multi.add(doc_total),
            _ => {}
        }
    }
    Ok(ScoreReport {
        format_version: SCORE_FORMAT_VERSION,
        counts: total,
        precision: total.precision(),
        recall: total.recall(),
        f1: total.f1(),
        f1_single: single.f1(),
        f1_multi: multi.f1(),
        per_type: per_type.into_iter().map(|(k, v)| (k, v.into())).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{EventArg, EventTypeDef};

    fn schema() -> Schema {
        Schema::new(
            vec![
                EventTypeDef {
                    name: "T".into(),
                    roles: vec!["A".into(), "B".into(), "C".into()],
                },
                EventTypeDef {
                    name: "T2".into(),
                    roles: vec!["A".into(), "B".into()],
                },
            ],
            vec!["A".into(), "B".into(), "C".into()],
        )
        .unwrap()
    }

    fn ev(ty: &str, args: &[(&str, i64)]) -> EventRecord {
        EventRecord {
            event_type: ty.into(),
            args: args
                .iter()
                .map(|(r, e)| EventArg {
                    role: (*r).into(),
                    entity_id: *e,
                })
                .collect(),
        }
    }

    #[test]
    fn identical_prediction_scores_perfectly() {
        let gold = vec![vec![ev("T", &[("A", 1), ("B", 2)])], vec![ev("T2", &[("A", 3)])]];
        let rep = score(&gold, &gold, &schema()).unwrap();
        assert_eq!(rep.precision, 1.0);
        assert_eq!(rep.recall, 1.0);
        assert_eq!(rep.f1, 1.0);
        assert_eq!(rep.f1_single, 1.0);
    }

    #[test]
    fn half_overlap_is_point_five() {
        let pred = vec![vec![ev("T", &[("A", 1), ("B", 2)])]];
        let gold = vec![vec![ev("T", &[("A", 1), ("B", 3)])]];
        let rep = score(&pred, &gold, &schema()).unwrap();
        assert_eq!(rep.counts, Counts { tp: 1, fp: 1, fn_: 1 });
        assert_eq!(rep.precision, 0.5);
        assert_eq!(rep.recall, 0.5);
        assert_eq!(rep.f1, 0.5);
    }

    #[test]
    fn unmatched_prediction_type_is_all_false_positive() {
        let pred = vec![vec![ev("T2", &[("A", 1), ("B", 2)])]];
        let gold = vec![vec![ev("T", &[("A", 1)])]];
        let rep = score(&pred, &gold, &schema()).unwrap();
        assert_eq!(rep.counts, Counts { tp: 0, fp: 2, fn_: 1 });
    }

    #[test]
    fn counts_partition_gold_and_predicted_pairs() {
        let pred = vec![
            vec![ev("T", &[("A", 1), ("B", 9)]), ev("T", &[("C", 5)])],
            vec![],
        ];
        let gold = vec![
            vec![ev("T", &[("A", 1), ("B", 2)])],
            vec![ev("T2", &[("A", 7), ("B", 8)])],
        ];
        let rep = score(&pred, &gold, &schema()).unwrap();
        let gold_pairs = 4;
        let pred_pairs = 3;
        assert_eq!(rep.counts.tp + rep.counts.fn_, gold_pairs);
        assert_eq!(rep.counts.tp + rep.counts.fp, pred_pairs);
    }

    #[test]
    fn greedy_match_prefers_highest_overlap_then_lowest_index() {
        // gold[1] shares 2 pairs, gold[0] shares 1: prediction takes gold[1].
        let pred = vec![vec![ev("T", &[("A", 1), ("B", 2)])]];
        let gold = vec![vec![
            ev("T", &[("A", 1), ("C", 9)]),
            ev("T", &[("A", 1), ("B", 2)]),
        ]];
        let rep = score(&pred, &gold, &schema()).unwrap();
        assert_eq!(rep.counts, Counts { tp: 2, fp: 0, fn_: 2 });

        // equal overlap: lowest index consumed first
        let pred2 = vec![vec![ev("T", &[("A", 1)]), ev("T", &[("A", 1)])]];
        let gold2 = vec![vec![ev("T", &[("A", 1)]), ev("T", &[("A", 1), ("B", 2)])]];
        let rep2 = score(&pred2, &gold2, &schema()).unwrap();
        // first prediction takes gold 0 (tie), second takes gold 1
        assert_eq!(rep2.counts, Counts { tp: 2, fp: 0, fn_: 1 });
    }

    #[test]
    fn score_is_invariant_to_event_order() {
        let pred = vec![vec![ev("T", &[("A", 1)]), ev("T2", &[("B", 2)])]];
        let pred_rev = vec![vec![ev("T2", &[("B", 2)]), ev("T", &[("A", 1)])]];
        let gold = vec![vec![ev("T2", &[("B", 2)]), ev("T", &[("A", 1), ("C", 3)])]];
        let a = score(&pred, &gold, &schema()).unwrap();
        let b = score(&pred_rev, &gold, &schema()).unwrap();
        assert_eq!(a.counts, b.counts);
    }

    #[test]
    fn per_type_counts_aggregate_to_overall() {
        let pred = vec![
            vec![ev("T", &[("A", 1), ("B", 9)]), ev("T2", &[("A", 2)])],
            vec![ev("T2", &[("B", 4)])],
        ];
        let gold = vec![
            vec![ev("T", &[("A", 1)]), ev("T2", &[("A", 2), ("B", 3)])],
            vec![ev("T", &[("C", 4)])],
        ];
        let rep = score(&pred, &gold, &schema()).unwrap();
        let mut sum = Counts::default();
        for ts in rep.per_type.values() {
            sum.add(ts.counts);
        }
        assert_eq!(sum, rep.counts);
    }

    #[test]
    fn unknown_type_is_schema_error() {
        let pred = vec![vec![ev("Nope", &[("A", 1)])]];
        let gold = vec![vec![]];
        assert!(score(&pred, &gold, &schema()).is_err());
    }

    #[test]
    fn single_and_multi_buckets_split_by_gold_count() {
        let pred = vec![
            vec![ev("T", &[("A", 1)])],                          // single doc, perfect
            vec![ev("T", &[("A", 1)]), ev("T2", &[("A", 9)])],   // multi doc, half wrong
        ];
        let gold = vec![
            vec![ev("T", &[("A", 1)])],
            vec![ev("T", &[("A", 1)]), ev("T2", &[("A", 2)])],
        ];
        let rep = score(&pred, &gold, &schema()).unwrap();
        assert_eq!(rep.f1_single, 1.0);
        assert!(rep.f1_multi < 1.0);
    }
}
