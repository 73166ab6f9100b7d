//! Two-layer hierarchical identity retrieval: nearest identity centroid
//! first, then nearest sample within that identity. A flat exhaustive scan
//! serves as the exact baseline, and every query carries a distance-op
//! counter so the C + N/C complexity claim is checkable by arithmetic.

use crate::dataset::{IdentityIndex, LabeledDataset};
use crate::embedding::{identity_centroid, l2_normalize, sq_dist, IdentityCentroid};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use serde::{Deserialize, Serialize};

/// Identity centroids plus per-identity member embeddings.
///
/// Member vectors are stored raw: indices built from a model hold unit
/// vectors, while fused indices hold plain averages.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    centroids: Vec<IdentityCentroid>,
    /// Parallel to `centroids`: (sample_id, vector) members per identity.
    members: Vec<Vec<(u64, Vec<f64>)>>,
    pub model_tag: String,
}

impl RetrievalIndex {
    pub fn from_parts(
        centroids: Vec<IdentityCentroid>,
        members: Vec<Vec<(u64, Vec<f64>)>>,
        model_tag: String,
    ) -> Result<Self> {
        if centroids.is_empty() || members.iter().all(|m| m.is_empty()) {
            return Err(Error::EmptyIndex);
        }
        if centroids.len() != members.len() {
            return Err(Error::IndexMismatch(format!(
                "{} centroids vs {} member lists",
                centroids.len(),
                members.len()
            )));
        }
        for (c, group) in centroids.iter().zip(&members) {
            if group.is_empty() {
                return Err(Error::IndexMismatch(format!(
                    "identity {} has a centroid but no members",
                    c.identity
                )));
            }
        }
        Ok(Self {
            centroids,
            members,
            model_tag,
        })
    }

    pub fn num_identities(&self) -> usize {
        self.centroids.len()
    }

    pub fn total_members(&self) -> usize {
        self.members.iter().map(Vec::len).sum()
    }

    pub fn centroids(&self) -> &[IdentityCentroid] {
        &self.centroids
    }

    pub fn members(&self) -> &[Vec<(u64, Vec<f64>)>] {
        &self.members
    }

    pub fn contains_identity(&self, identity: u32) -> bool {
        self.centroids.iter().any(|c| c.identity == identity)
    }
}

/// Outcome of one retrieval, with its cost in distance evaluations.
///
/// `distance_ops` counts the search scans only: C + N_c for hierarchical,
/// N for flat (the flat path's centroid-distance annotation is a lookup,
/// not part of the search).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub predicted_identity: u32,
    pub nearest_sample_id: u64,
    /// Squared distance from the query to the predicted identity's centroid.
    pub identity_distance: f64,
    /// Squared distance from the query to the nearest returned sample.
    pub sample_distance: f64,
    pub confidence: f64,
    pub distance_ops: usize,
}

/// Which distance feeds the confidence score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConfidenceMode {
    /// 1 − identity_distance/4 (default).
    Identity,
    /// 1 − sample_distance/4.
    Sample,
}

/// Monotone map of squared distance into (−∞, 1]: 0 → 1, 4 (antipodal unit
/// vectors) → 0.
pub fn confidence_from_distance(d: f64) -> f64 {
    1.0 - d / 4.0
}

/// Confidence of a result under the default identity-level score.
pub fn confidence(result: &QueryResult) -> f64 {
    confidence_with(result, ConfidenceMode::Identity)
}

pub fn confidence_with(result: &QueryResult, mode: ConfidenceMode) -> f64 {
    match mode {
        ConfidenceMode::Identity => confidence_from_distance(result.identity_distance),
        ConfidenceMode::Sample => confidence_from_distance(result.sample_distance),
    }
}

/// Embeds every sample with `model` and groups members under their identity
/// centroid. Centroids are raw means unless `renormalize_centroids` is set.
pub fn build_index(
    dataset: &LabeledDataset,
    model: &ModelParams,
    model_tag: &str,
    renormalize_centroids: bool,
) -> Result<RetrievalIndex> {
    if dataset.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let index = IdentityIndex::build(dataset);
    let mut centroids = Vec::new();
    let mut members = Vec::new();
    for (identity, group) in index.groups.iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        let embeddings = group
            .iter()
            .map(|&pos| model.embed(&dataset.samples[pos].features))
            .collect::<Result<Vec<_>>>()?;
        let mut centroid = identity_centroid(identity as u32, &embeddings)?;
        if renormalize_centroids {
            centroid.centroid = l2_normalize(&centroid.centroid)?.into_values();
        }
        centroids.push(centroid);
        members.push(
            group
                .iter()
                .zip(embeddings)
                .map(|(&pos, e)| (dataset.samples[pos].sample_id, e.into_values()))
                .collect(),
        );
    }
    RetrievalIndex::from_parts(centroids, members, model_tag.to_string())
}

/// Exhaustive scan over all N member embeddings; ties by lowest sample_id.
pub fn retrieve_flat(index: &RetrievalIndex, query: &[f64]) -> Result<QueryResult> {
    let mut ops = 0usize;
    let mut best: Option<(f64, u64, usize)> = None;
    for (gi, group) in index.members.iter().enumerate() {
        for (sample_id, vector) in group {
            let d = sq_dist(query, vector);
            ops += 1;
            let better = match &best {
                None => true,
                Some((bd, bid, _)) => d < *bd || (d == *bd && sample_id < bid),
            };
            if better {
                best = Some((d, *sample_id, gi));
            }
        }
    }
    let (sample_distance, nearest_sample_id, gi) = best.ok_or(Error::EmptyIndex)?;
    let centroid = &index.centroids[gi];
    Ok(QueryResult {
        predicted_identity: centroid.identity,
        nearest_sample_id,
        identity_distance: sq_dist(query, &centroid.centroid),
        sample_distance,
        confidence: confidence_from_distance(sq_dist(query, &centroid.centroid)),
        distance_ops: ops,
    })
}

/// Stage 1: nearest centroid over C identities (ties by lowest identity);
/// stage 2: nearest member within that identity (ties by lowest sample_id).
/// Costs exactly C + N_c distance evaluations.
pub fn retrieve_hierarchical(index: &RetrievalIndex, query: &[f64]) -> Result<QueryResult> {
    if index.centroids.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let mut ops = 0usize;
    let mut best_gi = 0usize;
    let mut best_d = f64::INFINITY;
    for (gi, c) in index.centroids.iter().enumerate() {
        let d = sq_dist(query, &c.centroid);
        ops += 1;
        // strict < keeps the lowest identity on ties (centroids are in
        // ascending identity order)
        if d < best_d {
            best_d = d;
            best_gi = gi;
        }
    }
    let mut best_member: Option<(f64, u64)> = None;
    for (sample_id, vector) in &index.members[best_gi] {
        let d = sq_dist(query, vector);
        ops += 1;
        let better = match &best_member {
            None => true,
            Some((bd, bid)) => d < *bd || (d == *bd && sample_id < bid),
        };
        if better {
            best_member = Some((d, *sample_id));
        }
    }
    let (sample_distance, nearest_sample_id) = best_member.unwrap();
    Ok(QueryResult {
        predicted_identity: index.centroids[best_gi].identity,
        nearest_sample_id,
        identity_distance: best_d,
        sample_distance,
        confidence: confidence_from_distance(best_d),
        distance_ops: ops,
    })
}

/// A retrieval answer paired with its ground-truth identity.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LabeledResult {
    pub predicted: u32,
    pub truth: u32,
    pub confidence: f64,
}

/// One point of a precision/coverage sweep.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub coverage: f64,
    pub answered: usize,
    pub correct: usize,
    /// True when no query cleared the threshold (precision reported as 1.0).
    pub undefined_precision: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrecisionCoverageCurve {
    pub points: Vec<CurvePoint>,
    pub total: usize,
}

/// Precision = correct/answered and coverage = answered/total at each
/// threshold, where a query is answered iff its confidence ≥ threshold.
/// Thresholds must be sorted ascending.
pub fn precision_coverage(
    results: &[LabeledResult],
    thresholds: &[f64],
) -> Result<PrecisionCoverageCurve> {
    if results.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("thresholds must be sorted ascending".into()));
    }
    let total = results.len();
    let points = thresholds
        .iter()
        .map(|&t| {
            let mut answered = 0usize;
            let mut correct = 0usize;
            for r in results {
                if r.confidence >= t {
                    answered += 1;
                    if r.predicted == r.truth {
                        correct += 1;
                    }
                }
            }
            let undefined = answered == 0;
            CurvePoint {
                threshold: t,
                precision: if undefined {
                    1.0
                } else {
                    correct as f64 / answered as f64
                },
                coverage: answered as f64 / total as f64,
                answered,
                correct,
                undefined_precision: undefined,
            }
        })
        .collect();
    Ok(PrecisionCoverageCurve { points, total })
}

/// Maximum coverage among curve points with precision ≥ p; 0 if none.
pub fn coverage_at_precision(curve: &PrecisionCoverageCurve, p: f64) -> f64 {
    curve
        .points
        .iter()
        .filter(|pt| pt.precision >= p)
        .map(|pt| pt.coverage)
        .fold(0.0, f64::max)
}

/// Fuses two indices over the same dataset: members and centroids become
/// elementwise averages, with centroids recomputed from the fused members.
pub fn fused_index(a: &RetrievalIndex, b: &RetrievalIndex) -> Result<RetrievalIndex> {
    if a.centroids.len() != b.centroids.len() {
        return Err(Error::IndexMismatch(format!(
            "{} vs {} identities",
            a.centroids.len(),
            b.centroids.len()
        )));
    }
    let mut centroids = Vec::with_capacity(a.centroids.len());
    let mut members = Vec::with_capacity(a.members.len());
    for ((ca, ma), (cb, mb)) in a.centroids.iter().zip(&a.members).zip(b.centroids.iter().zip(&b.members)) {
        if ca.identity != cb.identity || ma.len() != mb.len() {
            return Err(Error::IndexMismatch(format!(
                "identity {} differs between indices",
                ca.identity
            )));
        }
        let mut fused_members = Vec::with_capacity(ma.len());
        let dim = ca.centroid.len();
        let mut sum = vec![0.0f64; dim];
        for ((ida, va), (idb, vb)) in ma.iter().zip(mb) {
            if ida != idb {
                return Err(Error::IndexMismatch(format!(
                    "sample {ida} vs {idb} under identity {}",
                    ca.identity
                )));
            }
            if va.len() != vb.len() {
                return Err(Error::Dimension {
                    expected: va.len(),
                    got: vb.len(),
                });
            }
            let fused = crate::embedding::fuse_raw(va, vb);
            for (s, v) in sum.iter_mut().zip(&fused) {
                *s += v;
            }
            fused_members.push((*ida, fused));
        }
        let n = fused_members.len() as f64;
        for s in &mut sum {
            *s /= n;
        }
        centroids.push(IdentityCentroid {
            identity: ca.identity,
            centroid: sum,
            member_count: fused_members.len(),
        });
        members.push(fused_members);
    }
    RetrievalIndex::from_parts(
        centroids,
        members,
        format!("fused({},{})", a.model_tag, b.model_tag),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_index() -> RetrievalIndex {
        // identity 0: samples 0,1 near x-axis; identity 1: samples 2,3 near
        // y-axis; centroids are the exact member means
        let centroids = vec![
            IdentityCentroid {
                identity: 0,
                centroid: vec![0.995, 0.07],
                member_count: 2,
            },
            IdentityCentroid {
                identity: 1,
                centroid: vec![0.07, 0.995],
                member_count: 2,
            },
        ];
        let members = vec![
            vec![(0u64, vec![1.0, 0.0]), (1u64, vec![0.99, 0.14])],
            vec![(2u64, vec![0.0, 1.0]), (3u64, vec![0.14, 0.99])],
        ];
        RetrievalIndex::from_parts(centroids, members, "micro".into()).unwrap()
    }

    #[test]
    fn flat_exact_hit_returns_zero_distance() {
        let index = micro_index();
        let r = retrieve_flat(&index, &[0.99, 0.14]).unwrap();
        assert_eq!(r.nearest_sample_id, 1);
        assert_eq!(r.predicted_identity, 0);
        assert_eq!(r.sample_distance, 0.0);
        assert_eq!(r.distance_ops, 4);
    }

    #[test]
    fn hierarchical_counts_c_plus_nc() {
        let index = micro_index();
        let r = retrieve_hierarchical(&index, &[0.0, 1.0]).unwrap();
        assert_eq!(r.predicted_identity, 1);
        assert_eq!(r.nearest_sample_id, 2);
        assert_eq!(r.distance_ops, 2 + 2);
        assert_eq!(r.sample_distance, 0.0);
        assert_eq!(r.confidence, confidence_from_distance(r.identity_distance));
    }

    #[test]
    fn centroid_query_on_singleton_identity_costs_c_plus_one() {
        let centroids = vec![
            IdentityCentroid { identity: 0, centroid: vec![1.0, 0.0], member_count: 1 },
            IdentityCentroid { identity: 1, centroid: vec![0.0, 1.0], member_count: 1 },
            IdentityCentroid { identity: 2, centroid: vec![-1.0, 0.0], member_count: 1 },
        ];
        let members = vec![
            vec![(0u64, vec![1.0, 0.0])],
            vec![(1u64, vec![0.0, 1.0])],
            vec![(2u64, vec![-1.0, 0.0])],
        ];
        let index = RetrievalIndex::from_parts(centroids, members, "s".into()).unwrap();
        // query a centroid that is also its identity's only member
        let r = retrieve_hierarchical(&index, &[0.0, 1.0]).unwrap();
        assert_eq!(r.predicted_identity, 1);
        assert_eq!(r.identity_distance, 0.0);
        assert_eq!(r.sample_distance, 0.0);
        assert_eq!(r.distance_ops, 3 + 1);
        assert_eq!(r.confidence, 1.0);
    }

    #[test]
    fn flat_matches_hand_computation_on_micro_index() {
        let index = micro_index();
        let r = retrieve_flat(&index, &[0.6, 0.8]).unwrap();
        // distances: s0: 0.16+0.64=0.80; s1: ~0.588; s2: 0.36+0.04=0.40; s3: ~0.2477
        assert_eq!(r.nearest_sample_id, 3);
        assert_eq!(r.predicted_identity, 1);
    }

    #[test]
    fn tie_breaks_go_to_lowest_sample_id() {
        let centroids = vec![IdentityCentroid {
            identity: 0,
            centroid: vec![0.0, 0.0],
            member_count: 2,
        }];
        // duplicate member vectors: the lower sample_id must win
        let members = vec![vec![(7u64, vec![1.0, 0.0]), (3u64, vec![1.0, 0.0])]];
        let index = RetrievalIndex::from_parts(centroids, members, "t".into()).unwrap();
        let r = retrieve_flat(&index, &[1.0, 0.0]).unwrap();
        assert_eq!(r.nearest_sample_id, 3);
        let r = retrieve_hierarchical(&index, &[1.0, 0.0]).unwrap();
        assert_eq!(r.nearest_sample_id, 3);
    }

    #[test]
    fn confidence_bounds_and_monotonicity() {
        assert_eq!(confidence_from_distance(0.0), 1.0);
        assert_eq!(confidence_from_distance(4.0), 0.0);
        let mut prev = f64::INFINITY;
        for i in 0..100 {
            let c = confidence_from_distance(i as f64 * 0.04);
            assert!(c < prev);
            prev = c;
        }
    }

    #[test]
    fn precision_coverage_hand_built_curve() {
        // five results with confidences .9 .8 .7 .6 .5; correctness T T F T F
        let results = vec![
            LabeledResult { predicted: 0, truth: 0, confidence: 0.9 },
            LabeledResult { predicted: 1, truth: 1, confidence: 0.8 },
            LabeledResult { predicted: 2, truth: 9, confidence: 0.7 },
            LabeledResult { predicted: 3, truth: 3, confidence: 0.6 },
            LabeledResult { predicted: 4, truth: 9, confidence: 0.5 },
        ];
        let curve = precision_coverage(&results, &[0.0, 0.65, 0.85, 0.95]).unwrap();
        // t=0.0: all 5 answered, 3 correct
        assert_eq!(curve.points[0].answered, 5);
        assert!((curve.points[0].precision - 0.6).abs() < 1e-12);
        assert_eq!(curve.points[0].coverage, 1.0);
        // t=0.65: answered 3 (.9 .8 .7), correct 2
        assert_eq!(curve.points[1].answered, 3);
        assert!((curve.points[1].precision - 2.0 / 3.0).abs() < 1e-12);
        // t=0.85: answered 1, correct 1
        assert_eq!(curve.points[2].answered, 1);
        assert_eq!(curve.points[2].precision, 1.0);
        // t=0.95: nothing answered → undefined precision flag
        assert_eq!(curve.points[3].answered, 0);
        assert!(curve.points[3].undefined_precision);
        assert_eq!(curve.points[3].coverage, 0.0);
        // coverage non-increasing
        for w in curve.points.windows(2) {
            assert!(w[1].coverage <= w[0].coverage);
        }
        // coverage_at_precision scans
        assert!((coverage_at_precision(&curve, 0.65) - 0.6).abs() < 1e-12);
        assert!((coverage_at_precision(&curve, 0.99) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_all_wrong_predictors() {
        let perfect: Vec<LabeledResult> = (0..10)
            .map(|i| LabeledResult { predicted: i, truth: i, confidence: 0.9 })
            .collect();
        let curve = precision_coverage(&perfect, &[0.0, 0.5, 0.89]).unwrap();
        assert_eq!(coverage_at_precision(&curve, 1.0), 1.0);
        let wrong: Vec<LabeledResult> = (0..10)
            .map(|i| LabeledResult { predicted: i, truth: i + 1, confidence: 0.9 })
            .collect();
        let curve = precision_coverage(&wrong, &[0.0, 0.5]).unwrap();
        assert_eq!(coverage_at_precision(&curve, 0.5), 0.0);
    }

    #[test]
    fn unsorted_thresholds_and_empty_results_are_rejected() {
        let r = vec![LabeledResult { predicted: 0, truth: 0, confidence: 0.5 }];
        assert!(matches!(
            precision_coverage(&r, &[0.5, 0.1]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            precision_coverage(&[], &[0.1]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fusing_index_with_itself_is_identity() {
        let index = micro_index();
        let fused = fused_index(&index, &index).unwrap();
        assert_eq!(fused.centroids(), index.centroids());
        assert_eq!(fused.members(), index.members());
    }

    #[test]
    fn fused_micro_index_matches_elementwise_average() {
        let a = micro_index();
        let mut b = micro_index();
        // shift identity 0's first member in b
        b.members[0][0].1 = vec![0.0, 1.0];
        let recomputed_centroid = |m: &Vec<(u64, Vec<f64>)>| -> Vec<f64> {
            let mut s = vec![0.0; 2];
            for (_, v) in m {
                s[0] += v[0];
                s[1] += v[1];
            }
            s.iter().map(|x| x / m.len() as f64).collect()
        };
        b.centroids[0].centroid = recomputed_centroid(&b.members[0]);
        let fused = fused_index(&a, &b).unwrap();
        assert_eq!(fused.members()[0][0].1, vec![0.5, 0.5]);
        let want = recomputed_centroid(&fused.members()[0]);
        assert_eq!(fused.centroids()[0].centroid, want);
    }

    #[test]
    fn mismatched_sample_ids_are_rejected() {
        let a = micro_index();
        let mut b = micro_index();
        b.members[0][0].0 = 99;
        assert!(matches!(fused_index(&a, &b), Err(Error::IndexMismatch(_))));
    }
}
