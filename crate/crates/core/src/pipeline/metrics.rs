//! Answer scoring and evaluation reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::executor::Value;
use crate::kb::{EntityId, TypeId};
use crate::linker::{decode_mentions, LinkedMention, TypeAwareLabel};

/// Score of one prediction against its gold answer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Outcome {
    /// Entity-set answer.
    Set { precision: f64, recall: f64 },
    /// Boolean or numeric answer.
    Exact(bool),
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// A missing prediction counts as the empty set. An empty prediction
/// scores 0/0 against a non-empty gold set and 1/1 against an empty one.
pub fn score(pred: Option<&Value>, gold: &Value) -> Outcome {
    match gold {
        Value::Set(g) => {
            let empty = BTreeSet::new();
            let p = match pred {
                Some(Value::Set(p)) => p,
                _ => &empty,
            };
            if p.is_empty() {
                let v = if g.is_empty() { 1.0 } else { 0.0 };
                return Outcome::Set {
                    precision: v,
                    recall: v,
                };
            }
            let hit = p.intersection(g).count() as f64;
            Outcome::Set {
                precision: hit / p.len() as f64,
                recall: if g.is_empty() { 1.0 } else { hit / g.len() as f64 },
            }
        }
        other => Outcome::Exact(pred == Some(other)),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TypeMetrics {
    pub count: usize,
    pub set_count: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub exact_count: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default)]
struct Acc {
    p: f64,
    r: f64,
    sets: usize,
    exact: usize,
    correct: usize,
}

impl Acc {
    fn add(&mut self, o: Outcome) {
        match o {
            Outcome::Set { precision, recall } => {
                self.p += precision;
                self.r += recall;
                self.sets += 1;
            }
            Outcome::Exact(ok) => {
                self.exact += 1;
                self.correct += ok as usize;
            }
        }
    }

    fn finish(&self) -> TypeMetrics {
        let p = if self.sets > 0 { self.p / self.sets as f64 } else { 0.0 };
        let r = if self.sets > 0 { self.r / self.sets as f64 } else { 0.0 };
        TypeMetrics {
            count: self.sets + self.exact,
            set_count: self.sets,
            precision: p,
            recall: r,
            f1: f1(p, r),
            exact_count: self.exact,
            accuracy: if self.exact > 0 {
                self.correct as f64 / self.exact as f64
            } else {
                0.0
            },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Counts {
    pub hits: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Counts {
    pub fn add(&mut self, o: Counts) {
        self.hits += o.hits;
        self.predicted += o.predicted;
        self.gold += o.gold;
    }

    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            0.0
        } else {
            self.hits as f64 / self.predicted as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.gold == 0 {
            0.0
        } else {
            self.hits as f64 / self.gold as f64
        }
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }
}

/// Exact typed-span matches between gold and predicted tags.
pub fn span_counts(gold: &[TypeAwareLabel], pred: &[TypeAwareLabel]) -> Counts {
    let blank = vec![String::new(); gold.len().max(pred.len())];
    let spans = |l: &[TypeAwareLabel]| -> BTreeSet<(usize, usize, TypeId)> {
        decode_mentions(l, &blank)
            .into_iter()
            .map(|m| (m.start, m.end, m.ty))
            .collect()
    };
    let g = spans(gold);
    let p = spans(pred);
    Counts {
        hits: g.intersection(&p).count(),
        predicted: p.len(),
        gold: g.len(),
    }
}

/// Distinct linked entities against distinct gold-mentioned entities.
pub fn linking_counts(gold: &BTreeSet<EntityId>, links: &[LinkedMention]) -> Counts {
    let pred: BTreeSet<EntityId> = links.iter().filter_map(|l| l.entity).collect();
    Counts {
        hits: pred.intersection(gold).count(),
        predicted: pred.len(),
        gold: gold.len(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_type: BTreeMap<String, TypeMetrics>,
    pub overall: TypeMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection: Option<Counts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub linking: Option<Counts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_candidates: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub non_empty_lf_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bfs_success_ratio: Option<f64>,
}

/// Precision and recall are averaged over examples; F1 is taken from the
/// averages.
pub fn evaluate<'a, I>(items: I) -> MetricsReport
where
    I: IntoIterator<Item = (&'a str, Option<&'a Value>, &'a Value)>,
{
    let mut per: BTreeMap<String, Acc> = BTreeMap::new();
    let mut all = Acc::default();
    for (ty, pred, gold) in items {
        let o = score(pred, gold);
        per.entry(ty.to_string()).or_default().add(o);
        all.add(o);
    }
    MetricsReport {
        per_type: per.iter().map(|(k, a)| (k.clone(), a.finish())).collect(),
        overall: all.finish(),
        ..Default::default()
    }
}

impl MetricsReport {
    /// Plain-text table, one row per question type.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let width = self
            .per_type
            .keys()
            .map(|k| k.len())
            .max()
            .unwrap_or(0)
            .max("Overall".len());
        let _ = writeln!(
            s,
            "{:<width$}  {:>5}  {:>7}  {:>7}  {:>7}  {:>8}",
            "Question type", "n", "P", "R", "F1", "Accuracy"
        );
        let row = |s: &mut String, name: &str, m: &TypeMetrics| {
            let cell = |v: f64, on: bool| if on { format!("{:.4}", v) } else { "-".into() };
            let _ = writeln!(
                s,
                "{:<width$}  {:>5}  {:>7}  {:>7}  {:>7}  {:>8}",
                name,
                m.count,
                cell(m.precision, m.set_count > 0),
                cell(m.recall, m.set_count > 0),
                cell(m.f1, m.set_count > 0),
                cell(m.accuracy, m.exact_count > 0),
            );
        };
        for (k, m) in &self.per_type {
            row(&mut s, k, m);
        }
        row(&mut s, "Overall", &self.overall);
        if let Some(d) = &self.detection {
            let _ = writeln!(
                s,
                "entity detection  P {:.4}  R {:.4}  F1 {:.4}",
                d.precision(),
                d.recall(),
                d.f1()
            );
        }
        if let Some(l) = &self.linking {
            let _ = writeln!(s, "entity linking    P {:.4}  R {:.4}", l.precision(), l.recall());
        }
        if let Some(c) = self.avg_candidates {
            let _ = writeln!(s, "avg candidates    {c:.2}");
        }
        if let Some(r) = self.non_empty_lf_ratio {
            let _ = writeln!(s, "non-empty forms   {r:.4}");
        }
        if let Some(r) = self.bfs_success_ratio {
            let _ = writeln!(s, "search success    {r:.4}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[u32]) -> Value {
        Value::Set(ids.iter().map(|&i| EntityId(i)).collect())
    }

    #[test]
    fn half_overlap() {
        assert_eq!(
            score(Some(&set(&[1, 2])), &set(&[1, 3])),
            Outcome::Set {
                precision: 0.5,
                recall: 0.5
            }
        );
        let r = evaluate([("s", Some(&set(&[1, 2])), &set(&[1, 3]))]);
        assert!((r.overall.f1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_prediction_scores_zero() {
        assert_eq!(
            score(Some(&set(&[])), &set(&[1])),
            Outcome::Set {
                precision: 0.0,
                recall: 0.0
            }
        );
        assert_eq!(
            score(None, &set(&[1])),
            Outcome::Set {
                precision: 0.0,
                recall: 0.0
            }
        );
        assert_eq!(f1(0.0, 0.0), 0.0);
    }

    #[test]
    fn exact_answers_use_accuracy() {
        let t = Value::Bool(true);
        assert_eq!(score(Some(&t), &t), Outcome::Exact(true));
        let r = evaluate([("b", Some(&t), &t), ("b", Some(&Value::Bool(false)), &t)]);
        assert_eq!(r.per_type["b"].accuracy, 0.5);
        assert!(r.table().contains("0.5000"));
    }

    #[test]
    fn typed_spans() {
        use TypeAwareLabel::*;
        let a = TypeId(0);
        let b = TypeId(1);
        let gold = [Begin(a), Inside(a), Outside, Begin(b)];
        let pred = [Begin(a), Inside(a), Outside, Begin(a)];
        assert_eq!(
            span_counts(&gold, &pred),
            Counts {
                hits: 1,
                predicted: 2,
                gold: 2
            }
        );
    }
}
