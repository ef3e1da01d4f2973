//! Core data model: vocabularies, labeled feature sets, the linear embedding
//! matrix, and the distance/neighbor primitives everything else is built on.
//!
//! The semantic space is the d-dimensional word-vector space. A vocabulary
//! holds one prototype vector per label, with two distinguished (disjoint)
//! index subsets: `source_ids` for classes that have training data and
//! `target_ids` for evaluation-only classes. Everything outside those two
//! subsets is open-vocabulary ballast ("distractors").
//!
//! Visual features live in ℝ^p and are mapped into the semantic space by
//! `g(x) = Wᵀx` with `W ∈ ℝ^{p×d}`. Classification is nearest-prototype
//! under squared Euclidean distance.
//!
//! Determinism contract: all argmin/nearest queries break distance ties by
//! the lowest vocabulary index. Scans may be parallelized; the tie rule makes
//! results independent of the schedule.

use std::collections::{HashMap, HashSet};

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

/// Tolerance for the unit-norm invariant on normalized vocabularies.
pub const NORM_TOL: f64 = 1e-6;

/// The open label set with one d-dimensional prototype per label.
#[derive(Debug, Clone)]
pub struct SemanticVocabulary {
    labels: Vec<String>,
    /// |labels| × d, row i is the prototype of label i.
    vectors: Array2<f64>,
    source_ids: Vec<usize>,
    target_ids: Vec<usize>,
    /// Synonym sets, keyed by vocabulary row: row id → member row ids whose
    /// mean forms the effective prototype. Labels without an entry use their
    /// own vector (singleton synset).
    synsets: HashMap<usize, Vec<usize>>,
    normalized: bool,
}

impl SemanticVocabulary {
    /// Builds a vocabulary with no role assignment yet. When `normalize` is
    /// set, every vector is scaled to unit L2 norm (zero vectors are
    /// rejected: they have no direction to keep).
    pub fn new(labels: Vec<String>, mut vectors: Array2<f64>, normalize: bool) -> Result<Self> {
        if labels.len() != vectors.nrows() {
            return Err(Error::Shape {
                context: "vocabulary construction",
                expected: format!("{} vector rows", labels.len()),
                got: format!("{}", vectors.nrows()),
            });
        }
        if !labels.is_empty() && vectors.ncols() == 0 {
            return Err(Error::InvalidInput("vocabulary dimension is 0".into()));
        }
        let mut seen = HashSet::with_capacity(labels.len());
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate label {l:?}")));
            }
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "vocabulary vectors contain non-finite values".into(),
            ));
        }
        if normalize {
            for mut row in vectors.rows_mut() {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::InvalidInput(
                        "cannot normalize a zero vocabulary vector".into(),
                    ));
                }
                row.mapv_inplace(|v| v / norm);
            }
        }
        Ok(Self {
            labels,
            vectors,
            source_ids: Vec::new(),
            target_ids: Vec::new(),
            synsets: HashMap::new(),
            normalized: normalize,
        })
    }

    /// Reassembles a vocabulary from rows taken verbatim out of an existing
    /// one (e.g. after pruning). No validation and no renormalization: the
    /// caller guarantees consistent parts, and leaving the vectors untouched
    /// is what makes derived vocabularies byte-stable.
    pub(crate) fn from_parts(
        labels: Vec<String>,
        vectors: Array2<f64>,
        source_ids: Vec<usize>,
        target_ids: Vec<usize>,
        synsets: HashMap<usize, Vec<usize>>,
        normalized: bool,
    ) -> Self {
        Self {
            labels,
            vectors,
            source_ids,
            target_ids,
            synsets,
            normalized,
        }
    }

    /// Marks which labels are source (training) classes and which are target
    /// (zero-shot) classes. The two sets must be disjoint and present.
    pub fn assign_roles(&mut self, source_labels: &[String], target_labels: &[String]) -> Result<()> {
        let index = self.label_index();
        let resolve = |labels: &[String]| -> Result<Vec<usize>> {
            labels
                .iter()
                .map(|l| {
                    index.get(l.as_str()).copied().ok_or_else(|| Error::UnknownLabel {
                        label: l.clone(),
                        where_: "vocabulary",
                    })
                })
                .collect()
        };
        let source_ids = resolve(source_labels)?;
        let target_ids = resolve(target_labels)?;
        let src: HashSet<_> = source_ids.iter().collect();
        if src.len() != source_ids.len() {
            return Err(Error::InvalidInput("duplicate source label".into()));
        }
        let tgt: HashSet<_> = target_ids.iter().collect();
        if tgt.len() != target_ids.len() {
            return Err(Error::InvalidInput("duplicate target label".into()));
        }
        if let Some(overlap) = source_ids.iter().find(|id| tgt.contains(id)) {
            return Err(Error::InvalidInput(format!(
                "label {:?} is both source and target",
                self.labels[*overlap]
            )));
        }
        self.source_ids = source_ids;
        self.target_ids = target_ids;
        Ok(())
    }

    /// Installs synonym sets. Each entry lists the labels whose prototype
    /// mean stands in for the keyed label during classification and
    /// ground-truth matching. Every referenced label must exist.
    pub fn set_synsets(&mut self, synsets: &[(String, Vec<String>)]) -> Result<()> {
        let index = self.label_index();
        let mut map = HashMap::with_capacity(synsets.len());
        for (label, members) in synsets {
            let key = *index.get(label.as_str()).ok_or_else(|| Error::UnknownLabel {
                label: label.clone(),
                where_: "vocabulary (synset key)",
            })?;
            if members.is_empty() {
                return Err(Error::InvalidInput(format!("empty synset for {label:?}")));
            }
            let ids = members
                .iter()
                .map(|m| {
                    index.get(m.as_str()).copied().ok_or_else(|| Error::UnknownLabel {
                        label: m.clone(),
                        where_: "vocabulary (synset member)",
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            map.insert(key, ids);
        }
        self.synsets = map;
        Ok(())
    }

    fn label_index(&self) -> HashMap<&str, usize> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Semantic dimension d.
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn vector(&self, id: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(id)
    }

    pub fn source_ids(&self) -> &[usize] {
        &self.source_ids
    }

    pub fn target_ids(&self) -> &[usize] {
        &self.target_ids
    }

    pub fn synsets(&self) -> &HashMap<usize, Vec<usize>> {
        &self.synsets
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Vocabulary row of source class `class_idx` (an index into
    /// `source_ids`, the label convention of [`LabeledFeatures`]).
    pub fn source_row(&self, class_idx: usize) -> usize {
        self.source_ids[class_idx]
    }

    /// Prototype of source class `class_idx`.
    pub fn source_prototype(&self, class_idx: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(self.source_ids[class_idx])
    }

    /// Looks up a label's row id.
    pub fn id_of(&self, label: &str) -> Option<usize> {
        // Linear scan would be O(|W|) per call; build the map on demand at
        // call sites that loop. This accessor is for one-off lookups.
        self.labels.iter().position(|l| l == label)
    }

    /// The synset of a row id, defaulting to the singleton {id}.
    pub fn synset_of(&self, id: usize) -> Vec<usize> {
        self.synsets.get(&id).cloned().unwrap_or_else(|| vec![id])
    }
}

/// The labeled source dataset: N feature vectors in ℝ^p with class labels.
///
/// Labels are indices into the vocabulary's `source_ids` list (class 0 is
/// `source_ids[0]`, and so on), not raw vocabulary rows.
#[derive(Debug, Clone)]
pub struct LabeledFeatures {
    features: Array2<f64>,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledFeatures {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::Empty("feature matrix"));
        }
        if features.nrows() != labels.len() {
            return Err(Error::Shape {
                context: "labeled features",
                expected: format!("{} labels", features.nrows()),
                got: format!("{}", labels.len()),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("features contain non-finite values".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidInput(format!(
                "label index {bad} out of range for {class_count} source classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects N = 0
    }

    /// Feature dimension p.
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn feature(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }
}

/// The learned linear map W ∈ ℝ^{p×d}, applied as g(x) = Wᵀx.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    w: Array2<f64>,
}

impl EmbeddingMatrix {
    pub fn new(w: Array2<f64>) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "embedding matrix contains non-finite values".into(),
            ));
        }
        Ok(Self { w })
    }

    pub fn zeros(p: usize, d: usize) -> Self {
        Self {
            w: Array2::zeros((p, d)),
        }
    }

    /// Feature dimension p (rows).
    pub fn p(&self) -> usize {
        self.w.nrows()
    }

    /// Semantic dimension d (columns).
    pub fn d(&self) -> usize {
        self.w.ncols()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn into_array(self) -> Array2<f64> {
        self.w
    }
}

/// Projects a feature vector into the semantic space: returns Wᵀx.
pub fn project(w: &EmbeddingMatrix, x: ArrayView1<'_, f64>) -> Result<Vec<f64>> {
    if x.len() != w.p() {
        return Err(Error::Shape {
            context: "project",
            expected: format!("feature of length {}", w.p()),
            got: format!("{}", x.len()),
        });
    }
    Ok(project_unchecked(w.as_array(), x))
}

/// Projection without the shape check, for hot loops that validated shapes
/// once up front.
pub(crate) fn project_unchecked(w: &Array2<f64>, x: ArrayView1<'_, f64>) -> Vec<f64> {
    let (p, d) = w.dim();
    let mut out = vec![0.0; d];
    // Accumulate row-by-row (W is stored p×d row-major): out += x_k · W[k,·].
    for k in 0..p {
        let xk = x[k];
        if xk == 0.0 {
            continue;
        }
        let row = w.row(k);
        for j in 0..d {
            out[j] += xk * row[j];
        }
    }
    out
}

/// Squared Euclidean distance Σ_j (a_j − b_j)².
pub fn sq_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            context: "sq_distance",
            expected: format!("{}", a.len()),
            got: format!("{}", b.len()),
        });
    }
    Ok(sq_distance_unchecked(a, b))
}

#[inline]
pub(crate) fn sq_distance_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let diff = x - y;
        acc += diff * diff;
    }
    acc
}

/// Exact k-nearest candidate rows to `query` under squared distance.
///
/// Returns up to min(k, |candidates|) indices, ascending by distance; equal
/// distances rank by ascending vocabulary index, which makes the result
/// independent of candidate order and of any parallel chunking upstream.
pub fn nearest_prototypes(
    query: &[f64],
    vocab: &SemanticVocabulary,
    candidate_ids: &[usize],
    k: usize,
) -> Result<Vec<usize>> {
    if candidate_ids.is_empty() {
        return Err(Error::Empty("candidate set"));
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be ≥ 1".into()));
    }
    if query.len() != vocab.dim() {
        return Err(Error::Shape {
            context: "nearest_prototypes",
            expected: format!("query of length {}", vocab.dim()),
            got: format!("{}", query.len()),
        });
    }
    let mut scored: Vec<(f64, usize)> = candidate_ids
        .iter()
        .map(|&id| {
            (
                sq_distance_unchecked(query, vocab.vector(id).to_slice().expect("contiguous row")),
                id,
            )
        })
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, id)| id).collect())
}

/// Per-source-class neighbor prototypes used by the margin terms of the
/// training objective: for each source class, its nearest prototypes drawn
/// from outside the source set (`open`) and from the other source classes
/// (`within_source`). Both lists are ordered by ascending distance.
#[derive(Debug, Clone)]
pub struct NeighborSets {
    /// Indexed by source class; vocabulary rows from 𝒲 \ 𝒲_s.
    pub open: Vec<Vec<usize>>,
    /// Indexed by source class; vocabulary rows from 𝒲_s minus the class itself.
    pub within_source: Vec<Vec<usize>>,
}

/// Selects the neighbor sets for every source class.
///
/// `k_open` counts prototypes from outside the source set (target classes
/// and open-vocabulary entries alike); `k_source` counts sibling source
/// prototypes. Zero counts yield empty lists, which drop the corresponding
/// margin terms from the objective.
pub fn build_neighbor_sets(
    vocab: &SemanticVocabulary,
    k_open: usize,
    k_source: usize,
) -> Result<NeighborSets> {
    let source: HashSet<usize> = vocab.source_ids().iter().copied().collect();
    let open_pool: Vec<usize> = (0..vocab.len()).filter(|id| !source.contains(id)).collect();

    let mut open = Vec::with_capacity(vocab.source_ids().len());
    let mut within = Vec::with_capacity(vocab.source_ids().len());
    for (class_idx, &row) in vocab.source_ids().iter().enumerate() {
        let proto = vocab.vector(row);
        let proto = proto.to_slice().expect("contiguous row");
        let av = if k_open == 0 || open_pool.is_empty() {
            Vec::new()
        } else {
            nearest_prototypes(proto, vocab, &open_pool, k_open)?
        };
        let sibling_pool: Vec<usize> = vocab
            .source_ids()
            .iter()
            .copied()
            .filter(|&id| id != row)
            .collect();
        let bs = if k_source == 0 || sibling_pool.is_empty() {
            Vec::new()
        } else {
            nearest_prototypes(proto, vocab, &sibling_pool, k_source)?
        };
        debug_assert_eq!(class_idx, open.len());
        open.push(av);
        within.push(bs);
    }
    Ok(NeighborSets {
        open,
        within_source: within,
    })
}
