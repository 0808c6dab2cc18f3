//! Retrieval database, exclusion-windowed queries and retrieval metrics.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// A retrieved entry is correct within this planar distance (meters).
    pub success_radius: f64,
    /// Intra-sequence temporal exclusion window (seconds).
    pub exclusion: f64,
    pub top_k: usize,
    /// Radii for the recall-versus-radius curve.
    pub radii: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            success_radius: 3.0,
            exclusion: 600.0,
            top_k: 25,
            radii: (1..=10).map(f64::from).collect(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.success_radius > 0.0 && self.success_radius.is_finite()) {
            return Err(Error::config("eval.success_radius", "must be positive"));
        }
        if !(self.exclusion >= 0.0) {
            return Err(Error::config("eval.exclusion", "must be non-negative"));
        }
        if self.top_k == 0 {
            return Err(Error::config("eval.top_k", "must be at least 1"));
        }
        if self.radii.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::config("eval.radii", "radii must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntryMeta {
    pub id: String,
    pub sequence: String,
    pub timestamp: f64,
    pub position: [f64; 2],
}

/// Unit-norm descriptors with their submap metadata.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    dim: usize,
    rows: Vec<Vec<f64>>,
    meta: Vec<EntryMeta>,
}

impl RetrievalIndex {
    pub fn new(rows: Vec<Vec<f64>>, meta: Vec<EntryMeta>) -> Result<Self> {
        if rows.len() != meta.len() {
            return Err(Error::Dataset(format!(
                "{} descriptors for {} entries",
                rows.len(),
                meta.len()
            )));
        }
        let dim = rows.first().map_or(0, |r| r.len());
        let mut ids = HashSet::new();
        for (r, m) in rows.iter().zip(&meta) {
            if r.len() != dim {
                return Err(Error::Dataset(format!(
                    "descriptor of {} has dimension {}",
                    m.id,
                    r.len()
                )));
            }
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-5 {
                return Err(Error::Dataset(format!(
                    "descriptor of {} has norm {n}",
                    m.id
                )));
            }
            if !ids.insert(m.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate id {}", m.id)));
            }
        }
        Ok(RetrievalIndex { dim, rows, meta })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn meta(&self) -> &[EntryMeta] {
        &self.meta
    }

    pub fn descriptor(&self, row: usize) -> &[f64] {
        &self.rows[row]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Loop closure: only entries at least the exclusion window earlier.
    Intra,
    /// Re-localization: every database entry is searchable.
    Inter,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub row: usize,
    /// Cosine distance `1 - <q, d>`.
    pub distance: f64,
}

fn searchable(entry: &EntryMeta, q: &EntryMeta, cfg: &EvalConfig, protocol: Protocol) -> bool {
    match protocol {
        Protocol::Inter => true,
        Protocol::Intra => {
            entry.timestamp <= q.timestamp && q.timestamp - entry.timestamp >= cfg.exclusion
        }
    }
}

/// All searchable entries by ascending cosine distance; ties are broken by
/// id so the ranking does not depend on row order.
pub fn query(
    index: &RetrievalIndex,
    descriptor: &[f64],
    meta: &EntryMeta,
    cfg: &EvalConfig,
    protocol: Protocol,
) -> Vec<Candidate> {
    let mut out: Vec<Candidate> = index
        .meta
        .iter()
        .enumerate()
        .filter(|(_, m)| searchable(m, meta, cfg, protocol))
        .map(|(row, _)| {
            let dot: f64 = index.rows[row]
                .iter()
                .zip(descriptor)
                .map(|(a, b)| a * b)
                .sum();
            Candidate {
                row,
                distance: 1.0 - dot,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then_with(|| index.meta[a.row].id.cmp(&index.meta[b.row].id))
    });
    out
}

/// What the metrics need from one ranked query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    /// One-based rank of the first true positive, if any.
    pub first_positive: Option<usize>,
    /// `1 - distance` of the top candidate.
    pub top1_similarity: f64,
    pub positives: usize,
    pub searchable: usize,
}

impl QueryOutcome {
    pub fn has_positive(&self) -> bool {
        self.positives > 0
    }

    pub fn top1_correct(&self) -> bool {
        self.first_positive == Some(1)
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Outcome of a non-empty ranking with positives defined by `radius`.
pub fn outcome(
    index: &RetrievalIndex,
    ranked: &[Candidate],
    query_pos: [f64; 2],
    radius: f64,
) -> QueryOutcome {
    let is_pos = |c: &Candidate| dist2(index.meta[c.row].position, query_pos) <= radius;
    QueryOutcome {
        first_positive: ranked.iter().position(is_pos).map(|p| p + 1),
        top1_similarity: 1.0 - ranked[0].distance,
        positives: ranked.iter().filter(|c| is_pos(c)).count(),
        searchable: ranked.len(),
    }
}

/// Fraction of queries with a positive whose first positive is in the top `n`.
pub fn recall_at_n(outcomes: &[QueryOutcome], n: usize) -> Result<f64> {
    let valid: Vec<_> = outcomes.iter().filter(|o| o.has_positive()).collect();
    if valid.is_empty() {
        return Err(Error::UndefinedMetric(
            "no query has a positive in its database".into(),
        ));
    }
    let hits = valid
        .iter()
        .filter(|o| o.first_positive.is_some_and(|r| r <= n))
        .count();
    Ok(hits as f64 / valid.len() as f64)
}

/// Mean reciprocal rank over queries with a positive; misses beyond `k`
/// contribute zero.
pub fn mrr(outcomes: &[QueryOutcome], k: usize) -> Result<f64> {
    let valid: Vec<_> = outcomes.iter().filter(|o| o.has_positive()).collect();
    if valid.is_empty() {
        return Err(Error::UndefinedMetric(
            "no query has a positive in its database".into(),
        ));
    }
    let s: f64 = valid
        .iter()
        .map(|o| match o.first_positive {
            Some(r) if r <= k => 1.0 / r as f64,
            _ => 0.0,
        })
        .sum();
    Ok(s / valid.len() as f64)
}

/// Best F1 over thresholds on the top-1 similarity, sweeping every
/// distinct observed value.
pub fn max_f1(outcomes: &[QueryOutcome]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::UndefinedMetric("no queries".into()));
    }
    let mut thresholds: Vec<f64> = outcomes.iter().map(|o| o.top1_similarity).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut best = 0.0f64;
    for &th in &thresholds {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for o in outcomes {
            if o.top1_similarity >= th {
                if o.top1_correct() {
                    tp += 1;
                } else {
                    fp += 1;
                }
            } else if o.has_positive() {
                fn_ += 1;
            }
        }
        if tp > 0 {
            best = best.max(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
        }
    }
    Ok(best)
}

/// Expected R@1 of picking a searchable entry uniformly at random.
pub fn random_recall_at_1(outcomes: &[QueryOutcome]) -> Result<f64> {
    let valid: Vec<_> = outcomes.iter().filter(|o| o.has_positive()).collect();
    if valid.is_empty() {
        return Err(Error::UndefinedMetric(
            "no query has a positive in its database".into(),
        ));
    }
    Ok(valid
        .iter()
        .map(|o| o.positives as f64 / o.searchable as f64)
        .sum::<f64>()
        / valid.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntraReport {
    pub sequence: String,
    pub queries: usize,
    /// Queries whose searchable set was empty.
    pub skipped: usize,
    pub with_positive: usize,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub max_f1: f64,
    pub mrr: f64,
    pub random_recall_at_1: f64,
    /// `(radius, R@1, queries with a positive at that radius)`.
    pub radius_curve: Vec<(f64, f64, usize)>,
    pub outcomes: Vec<QueryOutcome>,
}

/// Loop-closure evaluation of one sequence: each entry queries the entries
/// of the same sequence recorded at least the exclusion window earlier.
pub fn evaluate_intra(
    index: &RetrievalIndex,
    sequence: &str,
    cfg: &EvalConfig,
) -> Result<IntraReport> {
    cfg.validate()?;
    let rows: Vec<usize> = (0..index.len())
        .filter(|&r| index.meta[r].sequence == sequence)
        .collect();
    if rows.is_empty() {
        return Err(Error::Dataset(format!(
            "sequence {sequence:?} has no entries"
        )));
    }
    let sub = RetrievalIndex {
        dim: index.dim,
        rows: rows.iter().map(|&r| index.rows[r].clone()).collect(),
        meta: rows.iter().map(|&r| index.meta[r].clone()).collect(),
    };
    let ranked: Vec<Vec<Candidate>> = par::map_range(sub.len(), |q| {
        query(&sub, &sub.rows[q], &sub.meta[q], cfg, Protocol::Intra)
    });
    let outcomes_at = |radius: f64| -> Vec<QueryOutcome> {
        ranked
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.is_empty())
            .map(|(q, r)| outcome(&sub, r, sub.meta[q].position, radius))
            .collect()
    };
    let outcomes = outcomes_at(cfg.success_radius);
    let skipped = ranked.iter().filter(|r| r.is_empty()).count();
    let radius_curve = cfg
        .radii
        .iter()
        .map(|&r| {
            let o = outcomes_at(r);
            let n = o.iter().filter(|x| x.has_positive()).count();
            (r, recall_at_n(&o, 1).unwrap_or(0.0), n)
        })
        .collect();
    Ok(IntraReport {
        sequence: sequence.to_string(),
        queries: outcomes.len(),
        skipped,
        with_positive: outcomes.iter().filter(|o| o.has_positive()).count(),
        recall_at_1: recall_at_n(&outcomes, 1)?,
        recall_at_5: recall_at_n(&outcomes, 5)?,
        max_f1: max_f1(&outcomes)?,
        mrr: mrr(&outcomes, cfg.top_k)?,
        random_recall_at_1: random_recall_at_1(&outcomes)?,
        radius_curve,
        outcomes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterResult {
    pub query_sequence: String,
    pub database_sequence: String,
    pub queries: usize,
    pub recall_at_1: f64,
    pub mrr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterReport {
    pub pairs: Vec<InterResult>,
    pub mean_recall_at_1: f64,
    pub mean_mrr: f64,
}

fn subset(index: &RetrievalIndex, sequence: &str) -> RetrievalIndex {
    let rows: Vec<usize> = (0..index.len())
        .filter(|&r| index.meta[r].sequence == sequence)
        .collect();
    RetrievalIndex {
        dim: index.dim,
        rows: rows.iter().map(|&r| index.rows[r].clone()).collect(),
        meta: rows.iter().map(|&r| index.meta[r].clone()).collect(),
    }
}

/// One query sequence against one database sequence; queries without a
/// positive in that database are left out.
pub fn evaluate_pair(
    index: &RetrievalIndex,
    query_seq: &str,
    db_seq: &str,
    cfg: &EvalConfig,
) -> Result<InterResult> {
    cfg.validate()?;
    let q = subset(index, query_seq);
    let db = subset(index, db_seq);
    if q.is_empty() || db.is_empty() {
        return Err(Error::Dataset(format!(
            "empty sequence in pair {query_seq} -> {db_seq}"
        )));
    }
    let outcomes: Vec<QueryOutcome> = par::map_range(q.len(), |i| {
        let r = query(&db, &q.rows[i], &q.meta[i], cfg, Protocol::Inter);
        outcome(&db, &r, q.meta[i].position, cfg.success_radius)
    });
    let valid: Vec<QueryOutcome> = outcomes.into_iter().filter(|o| o.has_positive()).collect();
    Ok(InterResult {
        query_sequence: query_seq.to_string(),
        database_sequence: db_seq.to_string(),
        queries: valid.len(),
        recall_at_1: recall_at_n(&valid, 1)?,
        mrr: mrr(&valid, cfg.top_k)?,
    })
}

/// Every ordered pair of distinct sequences, plus the macro mean.
pub fn evaluate_inter(
    index: &RetrievalIndex,
    sequences: &[String],
    cfg: &EvalConfig,
) -> Result<InterReport> {
    let mut pairs = Vec::new();
    for q in sequences {
        for d in sequences {
            if q != d {
                pairs.push(evaluate_pair(index, q, d, cfg)?);
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Dataset(
            "inter evaluation needs at least two sequences".into(),
        ));
    }
    let n = pairs.len() as f64;
    Ok(InterReport {
        mean_recall_at_1: pairs.iter().map(|p| p.recall_at_1).sum::<f64>() / n,
        mean_mrr: pairs.iter().map(|p| p.mrr).sum::<f64>() / n,
        pairs,
    })
}

pub const REPORT_HEADER: &str = "protocol,sequence,metric,value\n";

pub fn intra_report_csv(reports: &[IntraReport]) -> String {
    let mut s = String::from(REPORT_HEADER);
    for r in reports {
        for (m, v) in [
            ("R@1", r.recall_at_1),
            ("R@5", r.recall_at_5),
            ("F1", r.max_f1),
            ("MRR", r.mrr),
            ("random_R@1", r.random_recall_at_1),
            ("queries", r.queries as f64),
            ("queries_with_positive", r.with_positive as f64),
            ("skipped", r.skipped as f64),
        ] {
            s.push_str(&format!("intra,{},{m},{v}\n", r.sequence));
        }
    }
    s
}

pub fn radius_curve_csv(reports: &[IntraReport]) -> String {
    let mut s = String::from("sequence,radius,recall_at_1,queries_with_positive\n");
    for r in reports {
        for (rad, rec, n) in &r.radius_curve {
            s.push_str(&format!("{},{rad},{rec},{n}\n", r.sequence));
        }
    }
    s
}

pub fn inter_report_csv(report: &InterReport) -> String {
    let mut s = String::from(REPORT_HEADER);
    for p in &report.pairs {
        let name = format!("{}->{}", p.query_sequence, p.database_sequence);
        s.push_str(&format!("inter,{name},R@1,{}\n", p.recall_at_1));
        s.push_str(&format!("inter,{name},MRR,{}\n", p.mrr));
        s.push_str(&format!("inter,{name},queries,{}\n", p.queries));
    }
    s.push_str(&format!("inter,mean,R@1,{}\n", report.mean_recall_at_1));
    s.push_str(&format!("inter,mean,MRR,{}\n", report.mean_mrr));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn out(first: Option<usize>, sim: f64, positives: usize) -> QueryOutcome {
        QueryOutcome {
            first_positive: first,
            top1_similarity: sim,
            positives,
            searchable: 10,
        }
    }

    #[test]
    fn recall_counting_example() {
        let o = vec![
            out(Some(1), 0.9, 1),
            out(Some(3), 0.5, 1),
            out(None, 0.4, 1),
        ];
        assert!((recall_at_n(&o, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((recall_at_n(&o, 3).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let mut with_missing = o.clone();
        with_missing.push(out(None, 0.99, 0));
        assert_eq!(
            recall_at_n(&with_missing, 1).unwrap(),
            recall_at_n(&o, 1).unwrap()
        );
    }

    #[test]
    fn mrr_example() {
        let o = vec![
            out(Some(1), 0.9, 1),
            out(Some(2), 0.5, 1),
            out(None, 0.4, 1),
        ];
        assert_eq!(mrr(&o, 25).unwrap(), 0.5);
        assert_eq!(mrr(&o[..1], 25).unwrap(), 1.0);
        assert_eq!(mrr(&[out(Some(26), 0.1, 1)], 25).unwrap(), 0.0);
        assert!(mrr(&[], 25).is_err());
    }

    #[test]
    fn f1_examples() {
        let perfect = vec![
            out(Some(1), 0.9, 1),
            out(Some(1), 0.8, 1),
            out(None, 0.2, 0),
        ];
        assert_eq!(max_f1(&perfect).unwrap(), 1.0);
        let wrong = vec![out(Some(2), 0.9, 1), out(None, 0.8, 1)];
        assert_eq!(max_f1(&wrong).unwrap(), 0.0);
        // .9 TP, .8 FP, .7 TP, .2 with a positive but wrong top-1
        let hand = vec![
            out(Some(1), 0.9, 1),
            out(None, 0.8, 0),
            out(Some(1), 0.7, 1),
            out(Some(4), 0.2, 1),
        ];
        // θ = .9: TP1 FP0 FN2 → 0.5; θ = .8: TP1 FP1 FN2 → 0.4; θ = .7: TP2 FP1 FN1 → 2/3;
        // θ = .2: TP2 FP2 FN0 → 2/3
        assert!((max_f1(&hand).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(max_f1(&[]).is_err());
    }

    fn meta(id: &str, seq: &str, t: f64, x: f64) -> EntryMeta {
        EntryMeta {
            id: id.into(),
            sequence: seq.into(),
            timestamp: t,
            position: [x, 0.0],
        }
    }

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn index_rejects_bad_rows() {
        assert!(RetrievalIndex::new(vec![vec![2.0, 0.0]], vec![meta("a", "s", 0.0, 0.0)]).is_err());
        assert!(RetrievalIndex::new(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![meta("a", "s", 0.0, 0.0), meta("a", "s", 1.0, 0.0)]
        )
        .is_err());
    }

    #[test]
    fn query_itself_ranks_first_and_window_excludes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rows: Vec<_> = (0..5).map(|_| unit(&mut rng, 8)).collect();
        let m: Vec<_> = (0..5)
            .map(|i| meta(&format!("e{i}"), "s", i as f64 * 10.0, i as f64))
            .collect();
        let idx = RetrievalIndex::new(rows.clone(), m.clone()).unwrap();
        let cfg = EvalConfig {
            exclusion: 0.0,
            ..EvalConfig::default()
        };
        let r = query(&idx, &rows[2], &m[2], &cfg, Protocol::Inter);
        assert_eq!(r[0].row, 2);
        assert!(r[0].distance.abs() < 1e-12);
        assert_eq!(r.len(), 5);
        let late = meta("q", "s", 45.0, 0.0);
        let cfg = EvalConfig {
            exclusion: 100.0,
            ..EvalConfig::default()
        };
        assert!(query(&idx, &rows[0], &late, &cfg, Protocol::Intra).is_empty());
        let cfg = EvalConfig {
            exclusion: 20.0,
            ..EvalConfig::default()
        };
        let r = query(&idx, &rows[0], &late, &cfg, Protocol::Intra);
        let rows_seen: HashSet<usize> = r.iter().map(|c| c.row).collect();
        assert_eq!(rows_seen, HashSet::from([0, 1, 2]));
    }

    proptest! {
        #[test]
        fn ranking_is_brute_force_and_row_order_free(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 12;
            let rows: Vec<_> = (0..n).map(|_| unit(&mut rng, 6)).collect();
            let m: Vec<_> = (0..n).map(|i| meta(&format!("e{i:02}"), "s", 0.0, i as f64)).collect();
            let q = unit(&mut rng, 6);
            let qm = meta("q", "t", 0.0, 0.0);
            let cfg = EvalConfig::default();
            let idx = RetrievalIndex::new(rows.clone(), m.clone()).unwrap();
            let r = query(&idx, &q, &qm, &cfg, Protocol::Inter);
            let mut brute: Vec<(f64, String)> = rows.iter().zip(&m).map(|(d, mm)| {
                (1.0 - d.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>(), mm.id.clone())
            }).collect();
            brute.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let ids: Vec<_> = r.iter().map(|c| m[c.row].id.clone()).collect();
            let bids: Vec<_> = brute.iter().map(|b| b.1.clone()).collect();
            prop_assert_eq!(&ids, &bids);
            let rev = RetrievalIndex::new(rows.into_iter().rev().collect(), m.iter().cloned().rev().collect()).unwrap();
            let r2 = query(&rev, &q, &qm, &cfg, Protocol::Inter);
            let ids2: Vec<_> = r2.iter().map(|c| rev.meta()[c.row].id.clone()).collect();
            prop_assert_eq!(ids, ids2);
        }

        #[test]
        fn metrics_are_bounded_and_recall_monotone(
            ranks in prop::collection::vec(prop::option::of(1usize..30), 1..40),
            sims in prop::collection::vec(-1.0f64..1.0, 40),
        ) {
            let o: Vec<_> = ranks.iter().zip(&sims).map(|(r, s)| out(*r, *s, usize::from(r.is_some()))).collect();
            if o.iter().any(|x| x.has_positive()) {
                let mut prev = 0.0;
                for n in 1..30 {
                    let r = recall_at_n(&o, n).unwrap();
                    prop_assert!(r >= prev && r <= 1.0);
                    prev = r;
                }
                let m = mrr(&o, 25).unwrap();
                prop_assert!((0.0..=1.0).contains(&m));
            }
            let f = max_f1(&o).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }

    #[test]
    fn duplicated_sequence_beyond_window_is_found() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base: Vec<_> = (0..10).map(|_| unit(&mut rng, 16)).collect();
        let mut rows = base.clone();
        rows.extend(base.iter().cloned());
        let m: Vec<_> = (0..20)
            .map(|i| {
                meta(
                    &format!("e{i:02}"),
                    "s",
                    i as f64 + if i >= 10 { 1000.0 } else { 0.0 },
                    (i % 10) as f64 * 10.0,
                )
            })
            .collect();
        let idx = RetrievalIndex::new(rows, m).unwrap();
        let rep = evaluate_intra(&idx, "s", &EvalConfig::default()).unwrap();
        assert_eq!(rep.recall_at_1, 1.0);
        assert_eq!(rep.mrr, 1.0);
        assert_eq!(rep.with_positive, 10);
        assert_eq!(rep.skipped, 10);
        assert!(matches!(
            evaluate_intra(&idx, "none", &EvalConfig::default()),
            Err(Error::Dataset(_))
        ));
        let csv = intra_report_csv(&[rep.clone()]);
        assert!(csv.lines().all(|l| l.split(',').count() == 4));
        assert!(csv.contains("intra,s,R@1,1\n"));
        assert!(csv.contains(",F1,") && csv.contains(",MRR,"));
        let curve = radius_curve_csv(&[rep]);
        assert_eq!(curve.lines().count(), 11);
    }

    #[test]
    fn inter_identical_sets_and_macro_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base: Vec<_> = (0..8).map(|_| unit(&mut rng, 16)).collect();
        let mut rows = Vec::new();
        let mut m = Vec::new();
        for s in ["a", "b", "c"] {
            for (i, r) in base.iter().enumerate() {
                rows.push(r.clone());
                m.push(meta(&format!("{s}{i}"), s, 0.0, i as f64 * 10.0));
            }
        }
        let idx = RetrievalIndex::new(rows, m).unwrap();
        let seqs: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let rep = evaluate_inter(&idx, &seqs, &EvalConfig::default()).unwrap();
        assert_eq!(rep.pairs.len(), 6);
        assert!(rep
            .pairs
            .iter()
            .all(|p| p.recall_at_1 == 1.0 && p.queries == 8));
        let mean = rep.pairs.iter().map(|p| p.recall_at_1).sum::<f64>() / 6.0;
        assert_eq!(rep.mean_recall_at_1, mean);
        assert!(inter_report_csv(&rep).contains("inter,mean,MRR,1\n"));
    }
}
