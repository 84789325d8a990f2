//! Ranking metrics, the popularity baseline and the metrics report.
//!
//! Ranks are 1-based. Items with equal scores are ordered by lower index.

use std::fmt::Write as _;

use crate::dataio::{Example, SessionRecord};
use crate::error::{EvalError, ModelError};
use crate::exec::ExecMode;
use crate::model::Model;

/// Cutoffs reported by default.
pub const REPORT_CUTOFFS: [usize; 2] = [10, 20];

/// Anything that scores every vocabulary item for a session prefix.
pub trait Scorer: Sync {
    fn item_count(&self) -> usize;
    fn score(&self, session: &SessionRecord) -> Result<Vec<f64>, ModelError>;
}

impl Scorer for Model {
    fn item_count(&self) -> usize {
        self.config.item_count
    }

    fn score(&self, session: &SessionRecord) -> Result<Vec<f64>, ModelError> {
        Ok(self.scores(session)?.into_data())
    }
}

/// Position of `target` in the descending score order.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > t || (s == t && i < target))
        .count();
    ahead + 1
}

/// The `k` best items, best first.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

fn check(ranks: &[usize], k: usize) -> Result<(), EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroCutoff);
    }
    if ranks.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Fraction of examples whose target ranks within the top `k`.
pub fn hit_at_k(ranks: &[usize], k: usize) -> Result<f64, EvalError> {
    check(ranks, k)?;
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(hits as f64 / ranks.len() as f64)
}

/// Mean single-relevant-item NDCG: `1 / log2(rank + 1)` inside the cutoff.
pub fn ndcg_at_k(ranks: &[usize], k: usize) -> Result<f64, EvalError> {
    check(ranks, k)?;
    let gain: f64 = ranks
        .iter()
        .filter(|&&r| r <= k)
        .map(|&r| 1.0 / ((r + 1) as f64).log2())
        .sum();
    Ok(gain / ranks.len() as f64)
}

/// Ranks items by how often they are a training target.
#[derive(Clone, Debug, PartialEq)]
pub struct PopularityRanker {
    pub counts: Vec<f64>,
}

impl PopularityRanker {
    pub fn fit(train: &[Example], item_count: usize) -> Result<Self, EvalError> {
        if train.is_empty() {
            return Err(EvalError::Empty);
        }
        let mut counts = vec![0.0; item_count];
        for ex in train {
            counts[ex.target] += 1.0;
        }
        Ok(PopularityRanker { counts })
    }

    pub fn ranking(&self) -> Vec<usize> {
        top_k(&self.counts, self.counts.len())
    }
}

impl Scorer for PopularityRanker {
    fn item_count(&self) -> usize {
        self.counts.len()
    }

    fn score(&self, _: &SessionRecord) -> Result<Vec<f64>, ModelError> {
        Ok(self.counts.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub k: usize,
    pub hit: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub examples: usize,
    pub rows: Vec<Metrics>,
}

impl MetricsReport {
    pub fn from_ranks(ranks: &[usize], cutoffs: &[usize]) -> Result<Self, EvalError> {
        let rows = cutoffs
            .iter()
            .map(|&k| {
                Ok(Metrics {
                    k,
                    hit: hit_at_k(ranks, k)?,
                    ndcg: ndcg_at_k(ranks, k)?,
                })
            })
            .collect::<Result<_, EvalError>>()?;
        Ok(MetricsReport {
            examples: ranks.len(),
            rows,
        })
    }

    pub fn at(&self, k: usize) -> Option<Metrics> {
        self.rows.iter().copied().find(|m| m.k == k)
    }

    /// Tab-separated report. Values are printed with round-trip precision.
    pub fn format(&self) -> String {
        let mut out = String::from("tmignn-metrics 1\n");
        let _ = writeln!(out, "examples\t{}", self.examples);
        out.push_str("k\tH@k\tN@k\n");
        for m in &self.rows {
            let _ = writeln!(out, "{}\t{:?}\t{:?}", m.k, m.hit, m.ndcg);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let bad = |m: &str| EvalError::Report(m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some("tmignn-metrics 1") {
            return Err(bad("missing header"));
        }
        let examples = lines
            .next()
            .and_then(|l| l.strip_prefix("examples\t"))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| bad("missing example count"))?;
        if lines.next() != Some("k\tH@k\tN@k") {
            return Err(bad("missing column line"));
        }
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split('\t').collect();
                match f.as_slice() {
                    [k, h, n] => Ok(Metrics {
                        k: k.parse().map_err(|_| bad(l))?,
                        hit: h.parse().map_err(|_| bad(l))?,
                        ndcg: n.parse().map_err(|_| bad(l))?,
                    }),
                    _ => Err(bad(l)),
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(MetricsReport { examples, rows })
    }
}

/// Rank of every example's target under `scorer`.
pub fn target_ranks<S: Scorer + ?Sized>(
    scorer: &S,
    examples: &[Example],
    mode: ExecMode,
) -> Result<Vec<usize>, ModelError> {
    let n = scorer.item_count();
    mode.map(examples, |ex| {
        if ex.target >= n {
            return Err(ModelError::UnknownItem {
                index: ex.target,
                vocab: n,
            });
        }
        Ok(rank_of(&scorer.score(&ex.prefix)?, ex.target))
    })
    .into_iter()
    .collect()
}

pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    examples: &[Example],
    cutoffs: &[usize],
    mode: ExecMode,
) -> Result<MetricsReport, ModelError> {
    if examples.is_empty() {
        return Err(EvalError::Empty.into());
    }
    let ranks = target_ranks(scorer, examples, mode)?;
    Ok(MetricsReport::from_ranks(&ranks, cutoffs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hits() {
        assert_eq!(hit_at_k(&[1], 10).unwrap(), 1.0);
        assert_eq!(hit_at_k(&[11], 10).unwrap(), 0.0);
        assert_eq!(hit_at_k(&[3, 25], 20).unwrap(), 0.5);
        assert_eq!(hit_at_k(&[], 20), Err(EvalError::Empty));
        assert_eq!(hit_at_k(&[1], 0), Err(EvalError::ZeroCutoff));
    }

    #[test]
    fn ndcg() {
        assert_eq!(ndcg_at_k(&[1], 10).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&[3], 10).unwrap(), 0.5);
        assert_eq!(ndcg_at_k(&[11], 10).unwrap(), 0.0);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let s = [0.2, 0.5, 0.5, 0.1];
        assert_eq!(rank_of(&s, 1), 1);
        assert_eq!(rank_of(&s, 2), 2);
        assert_eq!(rank_of(&s, 0), 3);
        assert_eq!(top_k(&s, 3), vec![1, 2, 0]);
    }

    fn ex(target: usize) -> Example {
        Example {
            prefix: SessionRecord {
                session_id: "s".into(),
                items: vec![0],
                timestamps: vec![0],
            },
            target,
        }
    }

    #[test]
    fn popularity() {
        let p = PopularityRanker::fit(&[ex(0), ex(0), ex(0), ex(1)], 2).unwrap();
        assert_eq!(p.ranking(), vec![0, 1]);
        let p = PopularityRanker::fit(&[ex(2), ex(1), ex(0)], 3).unwrap();
        assert_eq!(p.ranking(), vec![0, 1, 2]);
        assert!(PopularityRanker::fit(&[], 3).is_err());
    }

    #[test]
    fn report_round_trip() {
        let r = MetricsReport::from_ranks(&[1, 4, 13, 30, 2], &REPORT_CUTOFFS).unwrap();
        let back = MetricsReport::parse(&r.format()).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.at(20).unwrap().hit, 0.8);
    }

    proptest! {
        #[test]
        fn monotone_and_bounded(ranks in prop::collection::vec(1usize..50, 1..40), k in 1usize..30) {
            let h1 = hit_at_k(&ranks, k).unwrap();
            let h2 = hit_at_k(&ranks, k + 1).unwrap();
            let n1 = ndcg_at_k(&ranks, k).unwrap();
            let n2 = ndcg_at_k(&ranks, k + 1).unwrap();
            prop_assert!(h1 <= h2 && n1 <= n2);
            prop_assert!(n1 <= h1);
        }

        #[test]
        fn order_invariant(mut ranks in prop::collection::vec(1usize..50, 1..40), k in 1usize..30) {
            let h = hit_at_k(&ranks, k).unwrap();
            let n = ndcg_at_k(&ranks, k).unwrap();
            ranks.reverse();
            prop_assert_eq!(hit_at_k(&ranks, k).unwrap(), h);
            prop_assert!((ndcg_at_k(&ranks, k).unwrap() - n).abs() < 1e-12);
        }
    }
}
