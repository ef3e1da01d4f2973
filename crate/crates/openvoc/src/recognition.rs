//! Nearest-prototype recognition over candidate label sets.
//!
//! A trained embedding classifies by projecting a feature vector into the
//! semantic space and ranking candidate vocabulary entries by squared
//! distance. What varies between evaluation settings is only the candidate
//! set: the source classes (supervised), the target classes (zero-shot),
//! both (generalized zero-shot), or the entire vocabulary (open set).
//!
//! Labels with declared synonym sets are represented by the mean of their
//! members' vectors rather than the raw row. Distance ties always resolve
//! to the lower vocabulary index, so rankings are total and reproducible
//! regardless of candidate order, chunking, or thread count.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;

use crate::embedding::{project_unchecked, sq_distance_unchecked, EmbeddingMatrix, SemanticVocabulary};
use crate::error::{Error, Result};

/// Recognition setting, named by its candidate pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Setting {
    /// Source classes only.
    Supervised,
    /// Target classes only.
    Zsl,
    /// Source ∪ target classes.
    Gzsl,
    /// The whole vocabulary.
    Openset,
}

impl Setting {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Setting::Supervised),
            "zsl" => Ok(Setting::Zsl),
            "gzsl" => Ok(Setting::Gzsl),
            "openset" => Ok(Setting::Openset),
            other => Err(Error::Config(format!(
                "unknown setting {other:?}; expected supervised, zsl, gzsl, or openset"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Setting::Supervised => "supervised",
            Setting::Zsl => "zsl",
            Setting::Gzsl => "gzsl",
            Setting::Openset => "openset",
        }
    }
}

/// The vocabulary rows a setting ranks against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub setting: Setting,
    /// Ascending vocabulary rows.
    pub ids: Vec<usize>,
}

impl CandidateSet {
    /// Builds the candidate pool a setting implies. Requires the roles
    /// involved to be nonempty (e.g. zero-shot needs target classes).
    pub fn for_setting(setting: Setting, vocab: &SemanticVocabulary) -> Result<Self> {
        let mut ids: Vec<usize> = match setting {
            Setting::Supervised => vocab.source_ids().to_vec(),
            Setting::Zsl => vocab.target_ids().to_vec(),
            Setting::Gzsl => {
                vocab.source_ids().iter().chain(vocab.target_ids()).copied().collect()
            }
            Setting::Openset => (0..vocab.len()).collect(),
        };
        ids.sort_unstable();
        if ids.is_empty() {
            return Err(Error::Empty("candidate set (no classes assigned for this setting)"));
        }
        Ok(CandidateSet { setting, ids })
    }
}

/// Ranked candidates for one instance: (vocabulary row, squared distance),
/// ascending, ties by lower row.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub ranked: Vec<(usize, f64)>,
}

impl Prediction {
    /// The predicted vocabulary row.
    pub fn top1(&self) -> usize {
        self.ranked[0].0
    }
}

/// Mean of the given vectors; renormalized to unit length when the
/// vocabulary stores normalized vectors. A zero mean (synonyms that cancel)
/// cannot be renormalized and is an error; without renormalization it is
/// returned as-is.
pub fn rocchio_prototype(vectors: &[&[f64]], renormalize: bool) -> Result<Vec<f64>> {
    if vectors.is_empty() {
        return Err(Error::Empty("synset vector list"));
    }
    let d = vectors[0].len();
    for v in vectors {
        if v.len() != d {
            return Err(Error::Shape {
                context: "rocchio_prototype",
                expected: format!("{d}"),
                got: format!("{}", v.len()),
            });
        }
    }
    let mut mean = vec![0.0; d];
    for v in vectors {
        for j in 0..d {
            mean[j] += v[j];
        }
    }
    let inv = 1.0 / vectors.len() as f64;
    for m in &mut mean {
        *m *= inv;
    }
    if renormalize {
        let norm = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidInput(
                "synset mean is the zero vector and cannot be renormalized".into(),
            ));
        }
        for m in &mut mean {
            *m /= norm;
        }
    }
    Ok(mean)
}

/// Effective prototypes for the candidates that carry explicit synsets.
fn synset_prototypes(
    vocab: &SemanticVocabulary,
    ids: &[usize],
) -> Result<HashMap<usize, Vec<f64>>> {
    let mut map = HashMap::new();
    for &id in ids {
        if let Some(members) = vocab.synsets().get(&id) {
            let views: Vec<&[f64]> = members
                .iter()
                .map(|&m| vocab.vector(m).to_slice().expect("contiguous row"))
                .collect();
            map.insert(id, rocchio_prototype(&views, vocab.is_normalized())?);
        }
    }
    Ok(map)
}

/// Ranks the candidates for one feature vector; returns the
/// min(k, |candidates|) nearest. Vocabularies past 100 000 candidates are
/// scanned in parallel chunks; the chunked merge is exact, so the result is
/// identical to a single-threaded linear scan.
pub fn classify(
    w: &EmbeddingMatrix,
    x: ArrayView1<'_, f64>,
    vocab: &SemanticVocabulary,
    candidates: &CandidateSet,
    k: usize,
) -> Result<Prediction> {
    validate_query(w, x.len(), vocab, candidates, k)?;
    let effective = synset_prototypes(vocab, &candidates.ids)?;
    let v = project_unchecked(w.as_array(), x);
    Ok(scan_topk(&v, vocab, &effective, &candidates.ids, k, candidates.ids.len() >= PAR_MIN))
}

/// [`classify`] for every row of a feature matrix, parallel over rows.
/// Exactly equivalent to calling [`classify`] per row.
pub fn batch_classify(
    w: &EmbeddingMatrix,
    features: &Array2<f64>,
    vocab: &SemanticVocabulary,
    candidates: &CandidateSet,
    k: usize,
) -> Result<Vec<Prediction>> {
    validate_query(w, features.ncols(), vocab, candidates, k)?;
    let effective = synset_prototypes(vocab, &candidates.ids)?;
    Ok((0..features.nrows())
        .into_par_iter()
        .map(|i| {
            let v = project_unchecked(w.as_array(), features.row(i));
            scan_topk(&v, vocab, &effective, &candidates.ids, k, false)
        })
        .collect())
}

const CHUNK: usize = 8192;
const PAR_MIN: usize = 100_000;

fn scan_topk(
    query: &[f64],
    vocab: &SemanticVocabulary,
    effective: &HashMap<usize, Vec<f64>>,
    ids: &[usize],
    k: usize,
    parallel: bool,
) -> Prediction {
    let eval_chunk = |chunk: &[usize]| -> Vec<(f64, usize)> {
        let mut top: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for &id in chunk {
            let proto: &[f64] = match effective.get(&id) {
                Some(p) => p,
                None => vocab.vector(id).to_slice().expect("contiguous row"),
            };
            let dist = sq_distance_unchecked(query, proto);
            insert_topk(&mut top, (dist, id), k);
        }
        top
    };
    let parts: Vec<Vec<(f64, usize)>> = if parallel {
        ids.par_chunks(CHUNK).map(eval_chunk).collect()
    } else {
        ids.chunks(CHUNK).map(eval_chunk).collect()
    };
    // Each chunk's top-k is a superset of the global top-k members within
    // that chunk, so merging and truncating is exact.
    let mut merged: Vec<(f64, usize)> = parts.concat();
    merged.sort_by(cmp_scored);
    merged.truncate(k);
    Prediction { ranked: merged.into_iter().map(|(dist, id)| (id, dist)).collect() }
}

fn cmp_scored(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(&b.1))
}

/// Bounded insertion keeping `top` the k smallest (dist, id) pairs in order.
fn insert_topk(top: &mut Vec<(f64, usize)>, item: (f64, usize), k: usize) {
    if top.len() == k {
        match top.last() {
            Some(last) if cmp_scored(&item, last).is_lt() => {}
            _ => return,
        }
    }
    let pos = top.iter().position(|e| cmp_scored(&item, e).is_lt()).unwrap_or(top.len());
    top.insert(pos, item);
    top.truncate(k);
}

fn validate_query(
    w: &EmbeddingMatrix,
    feature_len: usize,
    vocab: &SemanticVocabulary,
    candidates: &CandidateSet,
    k: usize,
) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be ≥ 1".into()));
    }
    if feature_len != w.p() {
        return Err(Error::Shape {
            context: "classify",
            expected: format!("features of length {}", w.p()),
            got: format!("{feature_len}"),
        });
    }
    if w.d() != vocab.dim() {
        return Err(Error::Shape {
            context: "classify",
            expected: format!("W with {} columns", vocab.dim()),
            got: format!("{}", w.d()),
        });
    }
    if candidates.ids.is_empty() {
        return Err(Error::Empty("candidate set"));
    }
    if let Some(&bad) = candidates.ids.iter().find(|&&id| id >= vocab.len()) {
        return Err(Error::InvalidInput(format!(
            "candidate row {bad} out of range for vocabulary of {}",
            vocab.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_matrix, random_vec, rng};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1, Array2};

    fn vocab_with_roles(
        seed: u64,
        n_src: usize,
        n_tgt: usize,
        n_open: usize,
        d: usize,
        normalize: bool,
    ) -> SemanticVocabulary {
        let mut r = rng(seed);
        let n = n_src + n_tgt + n_open;
        let vectors = random_matrix(&mut r, n, d);
        let labels: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        let mut vocab = SemanticVocabulary::new(labels.clone(), vectors, normalize).unwrap();
        vocab.assign_roles(&labels[..n_src], &labels[n_src..n_src + n_tgt]).unwrap();
        vocab
    }

    #[test]
    fn candidate_sets_follow_their_settings() {
        let vocab = vocab_with_roles(1, 3, 2, 4, 5, false);
        let sup = CandidateSet::for_setting(Setting::Supervised, &vocab).unwrap();
        assert_eq!(sup.ids, vec![0, 1, 2]);
        let zsl = CandidateSet::for_setting(Setting::Zsl, &vocab).unwrap();
        assert_eq!(zsl.ids, vec![3, 4]);
        let gzsl = CandidateSet::for_setting(Setting::Gzsl, &vocab).unwrap();
        assert_eq!(gzsl.ids, vec![0, 1, 2, 3, 4]);
        let open = CandidateSet::for_setting(Setting::Openset, &vocab).unwrap();
        assert_eq!(open.ids, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn zero_shot_needs_target_classes() {
        let vocab = vocab_with_roles(2, 3, 0, 4, 5, false);
        assert!(matches!(
            CandidateSet::for_setting(Setting::Zsl, &vocab),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn exact_prototype_hit_ranks_first_with_zero_distance() {
        let vocab = vocab_with_roles(3, 4, 3, 10, 6, false);
        // Identity-ish embedding: p = d, W = I, query = prototype row 5.
        let w = EmbeddingMatrix::new(Array2::eye(6)).unwrap();
        let x = vocab.vector(5).to_owned();
        let candidates = CandidateSet::for_setting(Setting::Openset, &vocab).unwrap();
        let pred = classify(&w, x.view(), &vocab, &candidates, 3).unwrap();
        assert_eq!(pred.top1(), 5);
        assert_abs_diff_eq!(pred.ranked[0].1, 0.0, epsilon = 0.0);
        assert!(pred.ranked[1].1 > 0.0);
    }

    #[test]
    fn ties_resolve_to_the_lowest_row() {
        // Rows 2 and 6 identical; both candidates.
        let mut r = rng(4);
        let mut vectors = random_matrix(&mut r, 8, 4);
        let dup = vectors.row(2).to_owned();
        vectors.row_mut(6).assign(&dup);
        let labels: Vec<String> = (0..8).map(|i| format!("w{i}")).collect();
        let mut vocab = SemanticVocabulary::new(labels.clone(), vectors, false).unwrap();
        vocab.assign_roles(&labels[..4], &labels[4..]).unwrap();
        let w = EmbeddingMatrix::new(Array2::eye(4)).unwrap();
        let candidates = CandidateSet::for_setting(Setting::Openset, &vocab).unwrap();
        let x = Array1::from(random_vec(&mut r, 4));
        let pred = classify(&w, x.view(), &vocab, &candidates, 8).unwrap();
        let pos2 = pred.ranked.iter().position(|&(id, _)| id == 2).unwrap();
        let pos6 = pred.ranked.iter().position(|&(id, _)| id == 6).unwrap();
        assert_eq!(pos6, pos2 + 1, "equal distances must order by row");
        assert_eq!(pred.ranked[pos2].1, pred.ranked[pos6].1);
    }

    #[test]
    fn k_clamps_to_the_candidate_count() {
        let vocab = vocab_with_roles(5, 3, 0, 2, 4, false);
        let w = EmbeddingMatrix::new(Array2::eye(4)).unwrap();
        let candidates = CandidateSet::for_setting(Setting::Supervised, &vocab).unwrap();
        let x = array![0.1, 0.2, 0.3, 0.4];
        let pred = classify(&w, x.view(), &vocab, &candidates, 10).unwrap();
        assert_eq!(pred.ranked.len(), 3);
    }

    #[test]
    fn synset_candidates_rank_by_their_member_mean() {
        // Label 0's synset is {0, 2}; with W = I the distance must be to
        // the mean of rows 0 and 2, not to row 0.
        let labels: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let vectors = array![[1.0, 0.0], [0.0, 4.0], [0.0, 1.0]];
        let mut vocab = SemanticVocabulary::new(labels.clone(), vectors, false).unwrap();
        vocab.assign_roles(&labels[..2], &labels[2..]).unwrap();
        vocab
            .set_synsets(&[("a".to_string(), vec!["a".to_string(), "c".to_string()])])
            .unwrap();
        let w = EmbeddingMatrix::new(Array2::eye(2)).unwrap();
        let candidates = CandidateSet::for_setting(Setting::Supervised, &vocab).unwrap();
        let x = array![0.5, 0.5]; // mean of rows 0 and 2 is exactly (0.5, 0.5)
        let pred = classify(&w, x.view(), &vocab, &candidates, 2).unwrap();
        assert_eq!(pred.top1(), 0);
        assert_abs_diff_eq!(pred.ranked[0].1, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn rocchio_mean_and_renormalization() {
        let a = [3.0, 0.0];
        let b = [0.0, 3.0];
        let mean = rocchio_prototype(&[&a, &b], false).unwrap();
        assert_eq!(mean, vec![1.5, 1.5]);
        let unit = rocchio_prototype(&[&a, &b], true).unwrap();
        let norm: f64 = unit.iter().map(|e| e * e).sum::<f64>().sqrt();
        assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-12);
        // Opposite vectors: zero mean without renormalization, error with.
        let neg = [-3.0, 0.0];
        assert_eq!(rocchio_prototype(&[&a, &neg], false).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(
            rocchio_prototype(&[&a, &neg], true),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(rocchio_prototype(&[], false), Err(Error::Empty(_))));
    }

    #[test]
    fn large_vocabulary_scan_matches_a_linear_scan_oracle() {
        // 120 000 rows crosses the parallel-chunking threshold; the oracle
        // is a straight full sort over all candidates.
        let n = 120_000;
        let d = 8;
        let p = 6;
        let mut r = rng(6);
        let vectors = random_matrix(&mut r, n, d);
        let labels: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        let mut vocab = SemanticVocabulary::new(labels.clone(), vectors, false).unwrap();
        vocab.assign_roles(&labels[..5], &labels[5..8]).unwrap();
        let w = EmbeddingMatrix::new(random_matrix(&mut r, p, d)).unwrap();
        let candidates = CandidateSet::for_setting(Setting::Openset, &vocab).unwrap();
        for _ in 0..20 {
            let x = Array1::from(random_vec(&mut r, p));
            let pred = classify(&w, x.view(), &vocab, &candidates, 5).unwrap();

            let v = project_unchecked(w.as_array(), x.view());
            let mut oracle: Vec<(f64, usize)> = (0..n)
                .map(|id| {
                    let row = vocab.vector(id);
                    let mut dist = 0.0;
                    for j in 0..d {
                        let diff = v[j] - row[j];
                        dist += diff * diff;
                    }
                    (dist, id)
                })
                .collect();
            oracle.sort_by(cmp_scored);
            let expect: Vec<(usize, f64)> =
                oracle.into_iter().take(5).map(|(dist, id)| (id, dist)).collect();
            assert_eq!(pred.ranked, expect);
        }
    }

    #[test]
    fn batch_classify_equals_per_row_classify() {
        let vocab = vocab_with_roles(7, 5, 4, 30, 6, true);
        let mut r = rng(8);
        let w = EmbeddingMatrix::new(random_matrix(&mut r, 5, 6)).unwrap();
        let features = random_matrix(&mut r, 12, 5);
        let candidates = CandidateSet::for_setting(Setting::Gzsl, &vocab).unwrap();
        let batch = batch_classify(&w, &features, &vocab, &candidates, 3).unwrap();
        assert_eq!(batch.len(), 12);
        for i in 0..12 {
            let single = classify(&w, features.row(i), &vocab, &candidates, 3).unwrap();
            assert_eq!(batch[i], single);
        }
    }

    #[test]
    fn query_validation_errors() {
        let vocab = vocab_with_roles(9, 3, 2, 2, 4, false);
        let w = EmbeddingMatrix::new(Array2::eye(4)).unwrap();
        let candidates = CandidateSet::for_setting(Setting::Gzsl, &vocab).unwrap();
        let x3 = array![1.0, 2.0, 3.0];
        assert!(matches!(
            classify(&w, x3.view(), &vocab, &candidates, 1),
            Err(Error::Shape { .. })
        ));
        let x4 = array![1.0, 2.0, 3.0, 4.0];
        assert!(matches!(
            classify(&w, x4.view(), &vocab, &candidates, 0),
            Err(Error::InvalidInput(_))
        ));
        let bogus = CandidateSet { setting: Setting::Gzsl, ids: vec![99] };
        assert!(matches!(
            classify(&w, x4.view(), &vocab, &bogus, 1),
            Err(Error::InvalidInput(_))
        ));
    }
}
