//! Training objective for the embedding matrix.
//!
//! For an instance x with class prototype u_z, the objective mixes two pulls:
//!
//! - a **data term**: per-coordinate ε-insensitive squared loss on the
//!   residual Wᵀx − u_z, where the tube half-width is the class weight times
//!   ε — heavily weighted (well-separated) classes tolerate more slack;
//! - two **margin terms**: squared-hinge triplet losses pushing Wᵀx at least
//!   a margin closer to u_z than to each of the class's nearest competing
//!   prototypes, drawn once from the open vocabulary (everything outside the
//!   source classes) and once from the sibling source classes.
//!
//! Everything here is convex and continuously differentiable in W, so the
//! quasi-Newton solver applies directly. Value and gradient are accumulated
//! instance-by-instance in ascending index order with no data-dependent
//! reductions, which keeps results bit-identical across thread counts.

use ndarray::{Array2, ArrayView1};

use crate::embedding::{
    project_unchecked, EmbeddingMatrix, LabeledFeatures, NeighborSets, SemanticVocabulary,
};
use crate::error::{Error, Result};
use crate::evt::ClassWeights;

/// Hyper-parameters of the objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Mix between the data term (α) and the margin terms (1−α); in [0, 1].
    pub alpha: f64,
    /// Coefficient of the Frobenius-norm regularizer ‖W‖²; ≥ 0.
    pub lambda_reg: f64,
    /// Base half-width of the insensitive tube around each residual
    /// coordinate; the effective width for class z is `weight(z) · epsilon`.
    pub epsilon: f64,
    /// Margin constant C of the triplet terms; ≥ 0.
    pub margin_c: f64,
    /// Number of open-vocabulary neighbor prototypes per source class.
    pub open_neighbors: usize,
    /// Number of sibling source-class neighbor prototypes per source class.
    pub source_neighbors: usize,
    /// Divide each margin term by its neighbor count, making the two terms
    /// comparable in scale when the neighbor budgets differ. Off by default:
    /// the plain sum is the canonical objective.
    pub average_triplets: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.6,
            lambda_reg: 0.01,
            epsilon: 0.1,
            margin_c: 1.0,
            open_neighbors: 5,
            source_neighbors: 5,
            average_triplets: false,
        }
    }
}

impl LossConfig {
    /// Rejects out-of-range hyper-parameters.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if !(self.lambda_reg >= 0.0) || !self.lambda_reg.is_finite() {
            return Err(Error::Config(format!(
                "lambda_reg must be a finite value ≥ 0, got {}",
                self.lambda_reg
            )));
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!(
                "epsilon must be a finite value ≥ 0, got {}",
                self.epsilon
            )));
        }
        if !(self.margin_c >= 0.0) || !self.margin_c.is_finite() {
            return Err(Error::Config(format!(
                "margin_c must be a finite value ≥ 0, got {}",
                self.margin_c
            )));
        }
        Ok(())
    }
}

/// Objective value together with its gradient in W.
#[derive(Debug, Clone)]
pub struct LossValueGrad {
    pub value: f64,
    /// ∂value/∂W, same shape as W (p×d).
    pub grad: Array2<f64>,
}

/// Squared hinge max(0, t)² and its derivative 2·max(0, t).
///
/// Value and derivative are both zero for t ≤ 0 and meet continuously at
/// t = 0, so the composite objective stays C¹.
#[inline]
pub fn smooth_hinge_sq(t: f64) -> (f64, f64) {
    if t > 0.0 {
        (t * t, 2.0 * t)
    } else {
        (0.0, 0.0)
    }
}

#[inline]
fn sign(r: f64) -> f64 {
    // f64::signum maps ±0 to ±1; the loss needs sign(0) = 0 so the
    // derivative vanishes inside the insensitive tube.
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// ε-insensitive squared regression loss over the whole dataset:
///
///   Σ_i Σ_j max(0, |(Wᵀx_i − u_{z_i})_j| − w_{z_i}·ε)²
///
/// Residual coordinates within the class-scaled tube contribute nothing;
/// beyond it the loss grows quadratically in the overshoot.
pub fn data_term(
    w: &EmbeddingMatrix,
    data: &LabeledFeatures,
    vocab: &SemanticVocabulary,
    weights: &ClassWeights,
    cfg: &LossConfig,
) -> Result<LossValueGrad> {
    cfg.validate()?;
    check_shapes(w.as_array(), data, vocab)?;
    check_weights(weights, data.class_count())?;

    let (p, d) = w.as_array().dim();
    let mut grad = Array2::zeros((p, d));
    let mut value = 0.0;
    let mut s = vec![0.0; d];
    for i in 0..data.len() {
        let x = data.feature(i);
        let v = project_unchecked(w.as_array(), x);
        let z = data.label(i);
        let tube = weights.weight(z) * cfg.epsilon;
        let u = vocab.source_prototype(z);
        s.iter_mut().for_each(|e| *e = 0.0);
        value += data_part(&v, u, tube, 1.0, &mut s);
        add_outer(&mut grad, x, &s);
    }
    Ok(LossValueGrad { value, grad })
}

/// Open-vocabulary margin term for one instance:
///
///   ½ Σ_{a ∈ av} max(0, C + ½‖v − u_z‖² − ½‖v − u_a‖²)²,  v = Wᵀx.
///
/// Each active term pushes v away from the competing prototype u_a and
/// toward the class prototype u_z. `av_ids` must come from outside the
/// source set (use [`crate::embedding::build_neighbor_sets`]).
pub fn triplet_term_open(
    w: &EmbeddingMatrix,
    x: ArrayView1<'_, f64>,
    class_idx: usize,
    av_ids: &[usize],
    vocab: &SemanticVocabulary,
    cfg: &LossConfig,
) -> Result<LossValueGrad> {
    cfg.validate()?;
    check_instance(w, x, class_idx, vocab)?;
    for &a in av_ids {
        if a >= vocab.len() {
            return Err(Error::InvalidInput(format!("neighbor id {a} out of range")));
        }
        if vocab.source_ids().contains(&a) {
            return Err(Error::InvalidInput(format!(
                "open-vocabulary neighbor {:?} is a source class",
                vocab.label(a)
            )));
        }
    }
    Ok(triplet_term(w, x, class_idx, av_ids, vocab, cfg))
}

/// Source-sibling margin term for one instance; identical in form to
/// [`triplet_term_open`] but drawn from the other source classes. `bs_ids`
/// must be source rows distinct from the class's own row.
pub fn triplet_term_source(
    w: &EmbeddingMatrix,
    x: ArrayView1<'_, f64>,
    class_idx: usize,
    bs_ids: &[usize],
    vocab: &SemanticVocabulary,
    cfg: &LossConfig,
) -> Result<LossValueGrad> {
    cfg.validate()?;
    check_instance(w, x, class_idx, vocab)?;
    let own = vocab.source_row(class_idx);
    for &b in bs_ids {
        if !vocab.source_ids().contains(&b) {
            return Err(Error::InvalidInput(format!("sibling neighbor id {b} is not a source row")));
        }
        if b == own {
            return Err(Error::InvalidInput(
                "sibling neighbor set contains the class's own prototype".into(),
            ));
        }
    }
    Ok(triplet_term(w, x, class_idx, bs_ids, vocab, cfg))
}

fn triplet_term(
    w: &EmbeddingMatrix,
    x: ArrayView1<'_, f64>,
    class_idx: usize,
    ids: &[usize],
    vocab: &SemanticVocabulary,
    cfg: &LossConfig,
) -> LossValueGrad {
    let (p, d) = w.as_array().dim();
    let v = project_unchecked(w.as_array(), x);
    let mut s = vec![0.0; d];
    let value = margin_part(&v, class_idx, ids, vocab, cfg, 1.0, &mut s);
    let mut grad = Array2::zeros((p, d));
    add_outer(&mut grad, x, &s);
    LossValueGrad { value, grad }
}

/// Full training objective:
///
///   Σ_i [ α·L_ε(i) + (1−α)·(M_open(i) + M_source(i)) ] + λ‖W‖²
///
/// with the per-instance terms as in [`data_term`], [`triplet_term_open`]
/// and [`triplet_term_source`]. Convex and C¹ in W.
pub fn objective(
    w: &EmbeddingMatrix,
    data: &LabeledFeatures,
    vocab: &SemanticVocabulary,
    neighbors: &NeighborSets,
    weights: &ClassWeights,
    cfg: &LossConfig,
) -> Result<LossValueGrad> {
    cfg.validate()?;
    check_shapes(w.as_array(), data, vocab)?;
    check_weights(weights, data.class_count())?;
    check_neighbors(neighbors, data.class_count())?;
    let idxs: Vec<usize> = (0..data.len()).collect();
    let mut out = objective_subset(w.as_array(), data, vocab, neighbors, weights, cfg, &idxs);
    add_regularizer(w.as_array(), cfg.lambda_reg, &mut out);
    Ok(out)
}

/// Unregularized objective restricted to the given instances, in the given
/// order. Shapes must have been validated by the caller. The SGD driver uses
/// this for mini-batches; [`objective`] calls it with all indices.
pub(crate) fn objective_subset(
    w: &Array2<f64>,
    data: &LabeledFeatures,
    vocab: &SemanticVocabulary,
    neighbors: &NeighborSets,
    weights: &ClassWeights,
    cfg: &LossConfig,
    idxs: &[usize],
) -> LossValueGrad {
    let (p, d) = w.dim();
    let mut grad = Array2::zeros((p, d));
    let mut value = 0.0;
    let mut s = vec![0.0; d];
    let margin_scale = 1.0 - cfg.alpha;
    for &i in idxs {
        let x = data.feature(i);
        let z = data.label(i);
        let v = project_unchecked(w, x);
        s.iter_mut().for_each(|e| *e = 0.0);

        let tube = weights.weight(z) * cfg.epsilon;
        value += cfg.alpha * data_part(&v, vocab.source_prototype(z), tube, cfg.alpha, &mut s);

        if margin_scale != 0.0 {
            value += margin_scale
                * margin_part(&v, z, &neighbors.open[z], vocab, cfg, margin_scale, &mut s);
            value += margin_scale
                * margin_part(&v, z, &neighbors.within_source[z], vocab, cfg, margin_scale, &mut s);
        }
        add_outer(&mut grad, x, &s);
    }
    LossValueGrad { value, grad }
}

/// Adds λ‖W‖² and its gradient 2λW in place.
pub(crate) fn add_regularizer(w: &Array2<f64>, lambda: f64, out: &mut LossValueGrad) {
    if lambda == 0.0 {
        return;
    }
    let mut sq = 0.0;
    for &e in w.iter() {
        sq += e * e;
    }
    out.value += lambda * sq;
    out.grad.zip_mut_with(w, |g, &e| *g += 2.0 * lambda * e);
}

/// ε-insensitive squared loss of one projected instance. Adds
/// `scale · ∂loss/∂v` into `s` and returns the unscaled loss value.
fn data_part(v: &[f64], u: ArrayView1<'_, f64>, tube: f64, scale: f64, s: &mut [f64]) -> f64 {
    let mut value = 0.0;
    for j in 0..v.len() {
        let r = v[j] - u[j];
        let h = r.abs() - tube;
        if h > 0.0 {
            value += h * h;
            s[j] += scale * 2.0 * h * sign(r);
        }
    }
    value
}

/// Squared-hinge margin loss of one projected instance against the given
/// competing prototypes. Adds `scale · ∂loss/∂v` into `s` and returns the
/// unscaled loss value.
///
/// The comparison t_a = C + ½‖v − u_z‖² − ½‖v − u_a‖² is affine in v (the
/// quadratics cancel), with ∂t_a/∂v = u_a − u_z; that keeps each hinge²
/// term, and hence the whole objective, convex in W.
fn margin_part(
    v: &[f64],
    class_idx: usize,
    ids: &[usize],
    vocab: &SemanticVocabulary,
    cfg: &LossConfig,
    scale: f64,
    s: &mut [f64],
) -> f64 {
    if ids.is_empty() {
        return 0.0;
    }
    let inv = if cfg.average_triplets { 1.0 / ids.len() as f64 } else { 1.0 };
    let u_z = vocab.source_prototype(class_idx);
    let dz = {
        let mut acc = 0.0;
        for j in 0..v.len() {
            let diff = v[j] - u_z[j];
            acc += diff * diff;
        }
        acc
    };
    let mut value = 0.0;
    for &a in ids {
        let u_a = vocab.vector(a);
        let mut da = 0.0;
        for j in 0..v.len() {
            let diff = v[j] - u_a[j];
            da += diff * diff;
        }
        let t = cfg.margin_c + 0.5 * dz - 0.5 * da;
        let (hv, hd) = smooth_hinge_sq(t);
        if hv > 0.0 {
            value += 0.5 * inv * hv;
            let coeff = scale * 0.5 * inv * hd;
            for j in 0..v.len() {
                s[j] += coeff * (u_a[j] - u_z[j]);
            }
        }
    }
    value
}

/// grad += x ⊗ s (outer product), skipping zero feature coordinates.
fn add_outer(grad: &mut Array2<f64>, x: ArrayView1<'_, f64>, s: &[f64]) {
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        let mut row = grad.row_mut(k);
        for j in 0..s.len() {
            row[j] += xk * s[j];
        }
    }
}

fn check_shapes(w: &Array2<f64>, data: &LabeledFeatures, vocab: &SemanticVocabulary) -> Result<()> {
    let (p, d) = w.dim();
    if p != data.dim() {
        return Err(Error::Shape {
            context: "objective",
            expected: format!("W with {} rows to match feature dim", data.dim()),
            got: format!("{p}"),
        });
    }
    if d != vocab.dim() {
        return Err(Error::Shape {
            context: "objective",
            expected: format!("W with {} columns to match vocabulary dim", vocab.dim()),
            got: format!("{d}"),
        });
    }
    if data.class_count() != vocab.source_ids().len() {
        return Err(Error::Shape {
            context: "objective",
            expected: format!("{} source classes", data.class_count()),
            got: format!("{}", vocab.source_ids().len()),
        });
    }
    Ok(())
}

fn check_weights(weights: &ClassWeights, class_count: usize) -> Result<()> {
    if weights.len() != class_count {
        return Err(Error::Shape {
            context: "class weights",
            expected: format!("{class_count}"),
            got: format!("{}", weights.len()),
        });
    }
    Ok(())
}

fn check_neighbors(neighbors: &NeighborSets, class_count: usize) -> Result<()> {
    if neighbors.open.len() != class_count || neighbors.within_source.len() != class_count {
        return Err(Error::Shape {
            context: "neighbor sets",
            expected: format!("{class_count} per-class lists"),
            got: format!("{} open / {} source", neighbors.open.len(), neighbors.within_source.len()),
        });
    }
    Ok(())
}

fn check_instance(
    w: &EmbeddingMatrix,
    x: ArrayView1<'_, f64>,
    class_idx: usize,
    vocab: &SemanticVocabulary,
) -> Result<()> {
    if x.len() != w.p() {
        return Err(Error::Shape {
            context: "triplet term",
            expected: format!("feature of length {}", w.p()),
            got: format!("{}", x.len()),
        });
    }
    if w.d() != vocab.dim() {
        return Err(Error::Shape {
            context: "triplet term",
            expected: format!("W with {} columns", vocab.dim()),
            got: format!("{}", w.d()),
        });
    }
    if class_idx >= vocab.source_ids().len() {
        return Err(Error::InvalidInput(format!(
            "class index {class_idx} out of range for {} source classes",
            vocab.source_ids().len()
        )));
    }
    Ok(())
}
