//! Extreme-value class weights.
//!
//! For every source class we look at two one-sided distance distributions
//! around its prototype in the semantic space:
//!
//! - the **margin** distribution: distances from the prototype to everything
//!   foreign — embedded training instances of other classes and the other
//!   class/open-vocabulary prototypes. Its lower tail says how close the
//!   nearest confusable thing gets.
//! - the **coverage** distribution: distances from the prototype to its own
//!   embedded instances, restricted to those closer than the nearest foreign
//!   instance. Its upper tail says how far the class's own support extends.
//!
//! Block-minimum tails are Weibull by the Fisher–Tippett theorem, so each
//! side gets a two-parameter Weibull fit. The significance radii of the two
//! fits — the distance inside which a foreign hit would be a p < s event,
//! plus the distance covering all but an s fraction of the class's own mass —
//! measure how much room the class has, and their sum (normalized to mean 1
//! across classes) becomes the class weight that scales the insensitive tube
//! of the training loss.

use std::collections::HashSet;

use rand::seq::index::sample as index_sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::embedding::{
    project_unchecked, sq_distance_unchecked, EmbeddingMatrix, LabeledFeatures, SemanticVocabulary,
};
use crate::error::{Error, Result};

/// Default significance level for the margin/coverage radii.
pub const DEFAULT_SIGNIFICANCE: f64 = 0.05;

/// A fitted two-parameter Weibull distribution.
///
/// `shape` may be `f64::INFINITY`: the single-sample rule fits a point mass
/// at the observed value, which behaves as the κ → ∞ limit (all probability
/// exactly at `scale`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeibullFit {
    pub shape: f64,
    pub scale: f64,
}

impl WeibullFit {
    /// The single-sample fit: a point mass at `scale` (κ = ∞ limit).
    pub fn point_mass(scale: f64) -> Self {
        WeibullFit { shape: f64::INFINITY, scale }
    }

    fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || self.scale.is_nan() || self.scale.is_infinite() {
            return Err(Error::InvalidInput(format!(
                "Weibull scale must be positive and finite, got {}",
                self.scale
            )));
        }
        if self.shape.is_nan() || !(self.shape > 0.0) {
            return Err(Error::InvalidInput(format!(
                "Weibull shape must be positive (∞ allowed), got {}",
                self.shape
            )));
        }
        Ok(())
    }
}

/// Everything computed for one source class during weight estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeight {
    /// Tube multiplier; the full set is normalized so these average to 1.
    pub weight: f64,
    /// Significance radius of the margin fit.
    pub margin_radius: f64,
    /// Significance radius of the coverage fit.
    pub coverage_radius: f64,
    pub margin_fit: Option<WeibullFit>,
    pub coverage_fit: Option<WeibullFit>,
    /// True when the margin fit fell back to the single-sample rule because
    /// the shape was not identifiable from the collected samples.
    pub margin_fallback: bool,
    /// True when the coverage fit fell back (no usable within-class
    /// distances below the nearest foreign instance, or shape unidentifiable).
    pub coverage_fallback: bool,
}

/// Per-class weights, indexed by source class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub classes: Vec<ClassWeight>,
}

impl ClassWeights {
    /// All-ones weights with no fitted distributions; the starting point of
    /// training, before the first weight round.
    pub fn uniform(class_count: usize) -> Self {
        ClassWeights {
            classes: vec![
                ClassWeight {
                    weight: 1.0,
                    margin_radius: 0.0,
                    coverage_radius: 0.0,
                    margin_fit: None,
                    coverage_fit: None,
                    margin_fallback: false,
                    coverage_fallback: false,
                };
                class_count
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Tube multiplier of one class.
    pub fn weight(&self, class_idx: usize) -> f64 {
        self.classes[class_idx].weight
    }

    pub fn mean_weight(&self) -> f64 {
        if self.classes.is_empty() {
            return 0.0;
        }
        self.classes.iter().map(|c| c.weight).sum::<f64>() / self.classes.len() as f64
    }
}

/// Maximum-likelihood Weibull fit anchored at the sample minimum.
///
/// One sample fits a point mass at that value (shape ∞). For n ≥ 2 the
/// observations are modeled as a Weibull truncated below at the sample
/// minimum m, whose profile log-likelihood eliminates the scale via
/// λ̂^κ = Σᵢ (xᵢ^κ − m^κ) / n and leaves a one-dimensional score in κ:
///
///   F(κ) = n · Σᵢ xᵢ^κ ln xᵢ − n·m^κ ln m   − n/κ − Σᵢ ln xᵢ
///              ─────────────────────────
///                  Σᵢ (xᵢ^κ − m^κ)
///
/// The −n/κ term is essential: dropping it makes F strictly positive for
/// every non-degenerate sample (the x^κ-weighted mean of ln x always exceeds
/// the plain mean), leaving the equation without a root. F is solved by a
/// geometric bracket sweep over κ ∈ [1e−3, 1e3] followed by bisection; the
/// residual at the returned root is below 1e−8 · max(|Σ ln xᵢ|, 1).
///
/// Not every sample determines a shape. Anchoring at the minimum spends one
/// observation, so n = 2 never does, and neither do heavily dispersed tiny
/// samples; those return a degenerate-sample error, which
/// [`compute_all_weights`] converts into the point-mass fallback.
pub fn fit_weibull_min(samples: &[f64]) -> Result<WeibullFit> {
    if samples.is_empty() {
        return Err(Error::Empty("Weibull sample set"));
    }
    for &x in samples {
        if !(x > 0.0) || !x.is_finite() {
            return Err(Error::InvalidInput(format!(
                "Weibull samples must be positive and finite, got {x}"
            )));
        }
    }
    if samples.len() == 1 {
        return Ok(WeibullFit::point_mass(samples[0]));
    }

    // Work with descending order statistics; the anchor is the minimum.
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| b.partial_cmp(a).expect("finite samples"));
    let m = *xs.last().expect("non-empty");
    // Scale-free logs s_i = ln(x_i/m) ≥ 0; the score only depends on these,
    // which is what makes the fit scale-equivariant.
    let s: Vec<f64> = xs.iter().map(|&x| (x / m).ln()).collect();
    let s_max = s[0];
    if s_max <= 0.0 {
        return Err(Error::DegenerateSamples("all samples identical"));
    }
    let n = s.len() as f64;
    let sum_s: f64 = s.iter().sum();

    let score = |kappa: f64| -> f64 {
        // R = Σ sᵢ·yᵢ^κ / Σ (yᵢ^κ − 1) with yᵢ = xᵢ/m. The denominator is
        // evaluated through expm1 so tiny κ·s keeps full precision; once
        // κ·s_max would overflow exp, both sums are shifted by e^{−κ·s_max}
        // (the subtracted n·e^{−κ·s_max} in the denominator is negligible
        // exactly in that regime).
        let ratio = if kappa * s_max <= 500.0 {
            let mut num = 0.0;
            let mut den = 0.0;
            for &si in &s {
                num += si * (kappa * si).exp();
                den += (kappa * si).exp_m1();
            }
            num / den
        } else {
            let mut num = 0.0;
            let mut den = 0.0;
            for &si in &s {
                let e = (kappa * (si - s_max)).exp();
                num += si * e;
                den += e;
            }
            num / den
        };
        n * ratio - n / kappa - sum_s
    };

    // Bracket the root on a geometric grid, then bisect.
    const KAPPA_LO: f64 = 1e-3;
    const KAPPA_HI: f64 = 1e3;
    const SWEEP: usize = 240;
    let step = (KAPPA_HI / KAPPA_LO).powf(1.0 / SWEEP as f64);
    let mut lo = KAPPA_LO;
    let mut flo = score(lo);
    let mut bracket = None;
    for i in 1..=SWEEP {
        let hi = KAPPA_LO * step.powi(i as i32);
        let fhi = score(hi);
        if flo.is_finite() && fhi.is_finite() && flo.signum() != fhi.signum() {
            bracket = Some((lo, flo, hi));
            break;
        }
        lo = hi;
        flo = fhi;
    }
    let Some((mut lo, flo, mut hi)) = bracket else {
        return Err(Error::DegenerateSamples(
            "shape not identifiable: the likelihood score has no root for this sample",
        ));
    };
    let downhill_at_lo = flo < 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (score(mid) < 0.0) == downhill_at_lo {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    let kappa = 0.5 * (lo + hi);

    let sum_ln: f64 = xs.iter().map(|x| x.ln()).sum();
    let residual = score(kappa).abs();
    if residual > 1e-8 * sum_ln.abs().max(1.0) {
        return Err(Error::Numerical(format!(
            "Weibull score residual {residual:.3e} after bisection"
        )));
    }

    // λ̂^κ = Σ (xᵢ^κ − m^κ)/n, computed in the scale-free form.
    let mean_pow: f64 = s.iter().map(|&si| (kappa * si).exp_m1()).sum::<f64>() / n;
    let lambda = m * mean_pow.powf(1.0 / kappa);
    let fit = WeibullFit { shape: kappa, scale: lambda };
    fit.validate()?;
    Ok(fit)
}

/// Probability that a foreign point at distance `dist` would land beyond the
/// margin sample: exp(−(dist/λ)^κ). High near the prototype, dropping toward
/// zero past the fitted scale.
pub fn margin_probability(fit: &WeibullFit, dist: f64) -> Result<f64> {
    fit.validate()?;
    check_dist(dist)?;
    if fit.shape.is_infinite() {
        // Point mass at the scale: inside → 1, at the mass → e⁻¹
        // (the κ → ∞ limit of exp(−(d/λ)^κ) at d = λ), beyond → 0.
        return Ok(if dist < fit.scale {
            1.0
        } else if dist == fit.scale {
            (-1.0f64).exp()
        } else {
            0.0
        });
    }
    Ok((-(dist / fit.scale).powf(fit.shape)).exp())
}

/// Probability that the class's own support reaches out at least to `dist`:
/// 1 − exp(−(dist/λ′)^κ′). Complements [`margin_probability`] for a common
/// fit.
pub fn coverage_probability(fit: &WeibullFit, dist: f64) -> Result<f64> {
    Ok(1.0 - margin_probability(fit, dist)?)
}

/// Distance at which [`margin_probability`] falls to `significance`:
/// d̄ = λ·(ln(1/s))^{1/κ}. The point-mass fit returns λ for every s.
pub fn margin_radius(fit: &WeibullFit, significance: f64) -> Result<f64> {
    fit.validate()?;
    check_significance(significance)?;
    if fit.shape.is_infinite() {
        return Ok(fit.scale);
    }
    Ok(fit.scale * (1.0 / significance).ln().powf(1.0 / fit.shape))
}

/// Distance by which [`coverage_probability`] reaches `significance`:
/// c̄ = λ′·(ln(1/(1−s)))^{1/κ′}. The point-mass fit returns λ′.
pub fn coverage_radius(fit: &WeibullFit, significance: f64) -> Result<f64> {
    fit.validate()?;
    check_significance(significance)?;
    if fit.shape.is_infinite() {
        return Ok(fit.scale);
    }
    Ok(fit.scale * (1.0 / (1.0 - significance)).ln().powf(1.0 / fit.shape))
}

fn check_dist(dist: f64) -> Result<()> {
    if !(dist >= 0.0) || !dist.is_finite() {
        return Err(Error::InvalidInput(format!(
            "distance must be finite and ≥ 0, got {dist}"
        )));
    }
    Ok(())
}

fn check_significance(s: f64) -> Result<()> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::Config(format!("significance must lie in (0, 1), got {s}")));
    }
    Ok(())
}

/// Options for margin-sample collection.
#[derive(Debug, Clone, Default)]
pub struct MarginSampleOpts {
    /// When set, additionally sample up to `cap` open-vocabulary prototypes
    /// (rows outside source ∪ target) with the given seed. The default pool
    /// — foreign instances plus all source/target prototypes — already
    /// captures the confusable neighborhood; this widens it for vocabularies
    /// where distractors crowd the classes.
    pub distractors: Option<DistractorSample>,
}

#[derive(Debug, Clone, Copy)]
pub struct DistractorSample {
    pub cap: usize,
    pub seed: u64,
}

/// Distances from a class prototype to everything foreign: the embedded
/// instances of all other classes (ascending instance order), then the other
/// source/target prototypes (ascending row order), then any sampled
/// distractor prototypes. Exact zeros are dropped; an empty result is an
/// error.
pub fn collect_margin_samples(
    class_idx: usize,
    w: &EmbeddingMatrix,
    data: &LabeledFeatures,
    vocab: &SemanticVocabulary,
) -> Result<Vec<f64>> {
    collect_margin_samples_with(class_idx, w, data, vocab, &MarginSampleOpts::default())
}

/// [`collect_margin_samples`] with the distractor-sampling option.
pub fn collect_margin_samples_with(
    class_idx: usize,
    w: &EmbeddingMatrix,
    data: &LabeledFeatures,
    vocab: &SemanticVocabulary,
    opts: &MarginSampleOpts,
) -> Result<Vec<f64>> {
    check_class(class_idx, w, data, vocab)?;
    let projected = project_all(w, data);
    margin_samples_projected(class_idx, &projected, data, vocab, opts)
}

fn margin_samples_projected(
    class_idx: usize,
    projected: &[Vec<f64>],
    data: &LabeledFeatures,
    vocab: &SemanticVocabulary,
    opts: &MarginSampleOpts,
) -> Result<Vec<f64>> {
    let own_row = vocab.source_row(class_idx);
    let proto = vocab.vector(own_row);
    let proto = proto.to_slice().expect("contiguous row");
    let mut out = Vec::new();
    for (i, v) in projected.iter().enumerate() {
        if data.label(i) != class_idx {
            push_nonzero(&mut out, sq_distance_unchecked(proto, v).sqrt());
        }
    }
    let in_roles: Vec<usize> = vocab
        .source_ids()
        .iter()
        .chain(vocab.target_ids())
        .copied()
        .filter(|&row| row != own_row)
        .collect();
    // Prototype rows in ascending order, sources before targets as stored.
    for row in in_roles {
        let other = vocab.vector(row);
        let other = other.to_slice().expect("contiguous row");
        push_nonzero(&mut out, sq_distance_unchecked(proto, other).sqrt());
    }
    if let Some(ds) = opts.distractors {
        let roles: HashSet<usize> =
            vocab.source_ids().iter().chain(vocab.target_ids()).copied().collect();
        let pool: Vec<usize> = (0..vocab.len()).filter(|row| !roles.contains(row)).collect();
        if !pool.is_empty() && ds.cap > 0 {
            let take = ds.cap.min(pool.len());
            let mut rng = ChaCha8Rng::seed_from_u64(ds.seed);
            let mut picks: Vec<usize> = index_sample(&mut rng, pool.len(), take).into_vec();
            picks.sort_unstable();
            for p in picks {
                let other = vocab.vector(pool[p]);
                let other = other.to_slice().expect("contiguous row");
                push_nonzero(&mut out, sq_distance_unchecked(proto, other).sqrt());
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Empty("margin sample set (no other classes in reach)"));
    }
    Ok(out)
}

/// Distances from a class prototype to its own embedded instances, keeping
/// only those no farther than the nearest foreign instance (ascending
/// instance order). A class without training instances is an error; the
/// filter may legitimately empty the list, which
/// [`compute_all_weights`] resolves with the point-mass fallback.
pub fn collect_coverage_samples(
    class_idx: usize,
    w: &EmbeddingMatrix,
    data: &LabeledFeatures,
    vocab: &SemanticVocabulary,
) -> Result<Vec<f64>> {
    check_class(class_idx, w, data, vocab)?;
    let projected = project_all(w, data);
    Ok(coverage_samples_projected(class_idx, &projected, data, vocab)?.0)
}

/// Returns (kept within-class distances, nearest foreign-instance distance).
fn coverage_samples_projected(
    class_idx: usize,
    projected: &[Vec<f64>],
    data: &LabeledFeatures,
    vocab: &SemanticVocabulary,
) -> Result<(Vec<f64>, f64)> {
    let proto = vocab.source_prototype(class_idx);
    let proto = proto.to_slice().expect("contiguous row");
    let mut within = Vec::new();
    let mut min_foreign = f64::INFINITY;
    for (i, v) in projected.iter().enumerate() {
        let dist = sq_distance_unchecked(proto, v).sqrt();
        if data.label(i) == class_idx {
            within.push(dist);
        } else if dist < min_foreign {
            min_foreign = dist;
        }
    }
    if within.is_empty() {
        return Err(Error::Empty("coverage sample set (class has no training instances)"));
    }
    within.retain(|&c| c <= min_foreign);
    Ok((within, min_foreign))
}

/// Fits margin and coverage distributions for every source class and turns
/// their significance radii into tube weights, normalized to mean 1.
///
/// Fit failures downgrade gracefully instead of aborting: a margin (or
/// coverage) sample set that doesn't determine a shape falls back to the
/// point-mass rule on its smallest value, and an emptied coverage list falls
/// back to a point mass at the nearest foreign instance. Fallbacks are
/// flagged on the returned [`ClassWeight`]s.
pub fn compute_all_weights(
    w: &EmbeddingMatrix,
    data: &LabeledFeatures,
    vocab: &SemanticVocabulary,
    significance: f64,
) -> Result<ClassWeights> {
    compute_all_weights_with(w, data, vocab, significance, &MarginSampleOpts::default())
}

/// [`compute_all_weights`] with the distractor-sampling option.
pub fn compute_all_weights_with(
    w: &EmbeddingMatrix,
    data: &LabeledFeatures,
    vocab: &SemanticVocabulary,
    significance: f64,
    opts: &MarginSampleOpts,
) -> Result<ClassWeights> {
    check_significance(significance)?;
    check_class(0, w, data, vocab)?;
    let projected = project_all(w, data);

    let mut classes: Vec<ClassWeight> = (0..data.class_count())
        .into_par_iter()
        .map(|z| -> Result<ClassWeight> {
            let margin = margin_samples_projected(z, &projected, data, vocab, opts)?;
            let (margin_fit, margin_fallback) = fit_or_point_mass(&margin)?;
            let (coverage, min_foreign) =
                coverage_samples_projected(z, &projected, data, vocab)?;
            // The fitter needs strictly positive samples; an instance sitting
            // exactly on the prototype carries no scale information anyway.
            let coverage: Vec<f64> = coverage.into_iter().filter(|&c| c > 0.0).collect();
            let (coverage_fit, coverage_fallback) = if coverage.is_empty() {
                if !(min_foreign > 0.0) || !min_foreign.is_finite() {
                    return Err(Error::DegenerateSamples(
                        "class collapsed onto a foreign instance; no usable coverage distances",
                    ));
                }
                (WeibullFit::point_mass(min_foreign), true)
            } else {
                fit_or_point_mass(&coverage)?
            };
            let d_bar = margin_radius(&margin_fit, significance)?;
            let c_bar = coverage_radius(&coverage_fit, significance)?;
            Ok(ClassWeight {
                weight: d_bar + c_bar,
                margin_radius: d_bar,
                coverage_radius: c_bar,
                margin_fit: Some(margin_fit),
                coverage_fit: Some(coverage_fit),
                margin_fallback,
                coverage_fallback,
            })
        })
        .collect::<Result<_>>()?;

    let mean = classes.iter().map(|c| c.weight).sum::<f64>() / classes.len() as f64;
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(Error::Numerical(format!("degenerate weight normalizer {mean}")));
    }
    for c in &mut classes {
        c.weight /= mean;
    }
    Ok(ClassWeights { classes })
}

/// Fit, falling back to the point-mass rule on the smallest sample when the
/// shape is not identifiable. Hard input errors still propagate.
fn fit_or_point_mass(samples: &[f64]) -> Result<(WeibullFit, bool)> {
    match fit_weibull_min(samples) {
        Ok(fit) => Ok((fit, false)),
        Err(Error::DegenerateSamples(_)) | Err(Error::Numerical(_)) => {
            let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
            Ok((WeibullFit::point_mass(min), true))
        }
        Err(e) => Err(e),
    }
}

fn push_nonzero(out: &mut Vec<f64>, dist: f64) {
    if dist > 0.0 {
        out.push(dist);
    }
}

fn project_all(w: &EmbeddingMatrix, data: &LabeledFeatures) -> Vec<Vec<f64>> {
    (0..data.len())
        .map(|i| project_unchecked(w.as_array(), data.feature(i)))
        .collect()
}

fn check_class(
    class_idx: usize,
    w: &EmbeddingMatrix,
    data: &LabeledFeatures,
    vocab: &SemanticVocabulary,
) -> Result<()> {
    if data.class_count() != vocab.source_ids().len() {
        return Err(Error::Shape {
            context: "class weights",
            expected: format!("{} source classes", data.class_count()),
            got: format!("{}", vocab.source_ids().len()),
        });
    }
    if class_idx >= data.class_count() {
        return Err(Error::InvalidInput(format!(
            "class index {class_idx} out of range for {} classes",
            data.class_count()
        )));
    }
    if w.p() != data.dim() || w.d() != vocab.dim() {
        return Err(Error::Shape {
            context: "class weights",
            expected: format!("W of shape {}×{}", data.dim(), vocab.dim()),
            got: format!("{}×{}", w.p(), w.d()),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::SemanticVocabulary;
    use crate::testutil::rng;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use rand::Rng;

    /// Inverse-CDF Weibull sampler for test data.
    fn weibull_samples(seed: u64, n: usize, shape: f64, scale: f64) -> Vec<f64> {
        let mut r = rng(seed);
        (0..n)
            .map(|_| {
                let u: f64 = r.random_range(0.0..1.0);
                scale * (-(1.0 - u).ln()).powf(1.0 / shape)
            })
            .collect()
    }

    #[test]
    fn single_sample_fits_a_point_mass() {
        let fit = fit_weibull_min(&[2.5]).unwrap();
        assert!(fit.shape.is_infinite());
        assert_eq!(fit.scale, 2.5);
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(matches!(fit_weibull_min(&[]), Err(Error::Empty(_))));
        assert!(matches!(fit_weibull_min(&[1.0, -2.0]), Err(Error::InvalidInput(_))));
        assert!(matches!(fit_weibull_min(&[1.0, 0.0]), Err(Error::InvalidInput(_))));
        assert!(matches!(
            fit_weibull_min(&[3.0, 3.0, 3.0]),
            Err(Error::DegenerateSamples(_))
        ));
    }

    #[test]
    fn two_samples_never_determine_a_shape() {
        // Anchoring at the minimum spends one observation, so a pair leaves
        // a single effective sample — the score has no root.
        assert!(matches!(
            fit_weibull_min(&[1.0, 9.0]),
            Err(Error::DegenerateSamples(_))
        ));
        assert!(matches!(
            fit_weibull_min(&[1.0, 1.05]),
            Err(Error::DegenerateSamples(_))
        ));
    }

    #[test]
    fn fit_recovers_generating_parameters() {
        let xs = weibull_samples(77, 500, 2.0, 1.5);
        let fit = fit_weibull_min(&xs).unwrap();
        assert!(
            (fit.shape - 2.0).abs() < 0.25,
            "shape {} too far from generating 2.0",
            fit.shape
        );
        assert!(
            (fit.scale - 1.5).abs() < 0.1,
            "scale {} too far from generating 1.5",
            fit.scale
        );
    }

    #[test]
    fn fit_satisfies_residual_bound_under_independent_score() {
        // Recompute the score at the returned root with plain powf
        // arithmetic, no shared code with the fitter.
        let xs = weibull_samples(78, 300, 1.3, 0.8);
        let fit = fit_weibull_min(&xs).unwrap();
        let m = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let n = xs.len() as f64;
        let k = fit.shape;
        let num: f64 = xs.iter().map(|&x| x.powf(k) * x.ln()).sum::<f64>() - n * m.powf(k) * m.ln();
        let den: f64 = xs.iter().map(|&x| x.powf(k) - m.powf(k)).sum();
        let sum_ln: f64 = xs.iter().map(|x| x.ln()).sum();
        let residual = (n * num / den - n / k - sum_ln).abs();
        assert!(
            residual < 1e-8 * sum_ln.abs().max(1.0),
            "residual {residual} too large"
        );
    }

    #[test]
    fn fit_is_scale_equivariant() {
        let xs = weibull_samples(79, 400, 0.9, 3.0);
        let scaled: Vec<f64> = xs.iter().map(|x| x * 7.3).collect();
        let a = fit_weibull_min(&xs).unwrap();
        let b = fit_weibull_min(&scaled).unwrap();
        assert_abs_diff_eq!(a.shape, b.shape, epsilon = 1e-6 * a.shape);
        assert_abs_diff_eq!(a.scale * 7.3, b.scale, epsilon = 1e-6 * b.scale);
    }

    #[test]
    fn unit_exponential_radii_have_closed_forms() {
        // κ = 1, λ = 1: margin radius at s = 0.05 is ln 20, coverage radius
        // is ln(20/19).
        let fit = WeibullFit { shape: 1.0, scale: 1.0 };
        let d = margin_radius(&fit, 0.05).unwrap();
        let c = coverage_radius(&fit, 0.05).unwrap();
        assert_abs_diff_eq!(d, 20.0f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(c, (20.0f64 / 19.0).ln(), epsilon = 1e-12);
    }

    #[test]
    fn point_mass_probabilities_and_radii() {
        let fit = WeibullFit::point_mass(2.0);
        assert_eq!(margin_probability(&fit, 1.9).unwrap(), 1.0);
        assert_abs_diff_eq!(margin_probability(&fit, 2.0).unwrap(), (-1.0f64).exp(), epsilon = 0.0);
        assert_eq!(margin_probability(&fit, 2.1).unwrap(), 0.0);
        for s in [0.01, 0.05, 0.5, 0.99] {
            assert_eq!(margin_radius(&fit, s).unwrap(), 2.0);
            assert_eq!(coverage_radius(&fit, s).unwrap(), 2.0);
        }
    }

    #[test]
    fn probabilities_are_complementary_and_monotone() {
        let fit = WeibullFit { shape: 1.7, scale: 0.9 };
        let mut last_psi = f64::INFINITY;
        let mut last_phi = -1.0;
        for i in 0..60 {
            let d = 0.05 * i as f64;
            let psi = margin_probability(&fit, d).unwrap();
            let phi = coverage_probability(&fit, d).unwrap();
            assert_abs_diff_eq!(psi + phi, 1.0, epsilon = 1e-15);
            assert!(psi <= last_psi && phi >= last_phi);
            last_psi = psi;
            last_phi = phi;
        }
        assert_eq!(margin_probability(&fit, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn radii_invert_their_probabilities() {
        for &shape in &[0.5, 1.0, 2.3, 6.0] {
            for &scale in &[0.1, 1.0, 4.2] {
                let fit = WeibullFit { shape, scale };
                for &s in &[0.01, 0.05, 0.3, 0.9] {
                    let d = margin_radius(&fit, s).unwrap();
                    assert_abs_diff_eq!(margin_probability(&fit, d).unwrap(), s, epsilon = 1e-10);
                    let c = coverage_radius(&fit, s).unwrap();
                    assert_abs_diff_eq!(coverage_probability(&fit, c).unwrap(), s, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn significance_must_be_strictly_inside_unit_interval() {
        let fit = WeibullFit { shape: 1.0, scale: 1.0 };
        for s in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(margin_radius(&fit, s), Err(Error::Config(_))));
            assert!(matches!(coverage_radius(&fit, s), Err(Error::Config(_))));
        }
        assert!(matches!(margin_probability(&fit, -1.0), Err(Error::InvalidInput(_))));
    }

    /// Fixture: p = d identity embedding, prototypes and instances placed by
    /// hand so every distance is known in closed form.
    ///
    /// Vocabulary rows: s0 = (0,0), s1 = (10,0), t0 = (0,6), plus two
    /// distractors far out. Class 0 instances at x where x = v directly.
    fn fixture() -> (EmbeddingMatrix, LabeledFeatures, SemanticVocabulary) {
        let labels: Vec<String> =
            ["s0", "s1", "t0", "d0", "d1"].iter().map(|s| s.to_string()).collect();
        let vectors = array![
            [0.0, 0.0],
            [10.0, 0.0],
            [0.0, 6.0],
            [40.0, 0.0],
            [0.0, 40.0],
        ];
        let mut vocab = SemanticVocabulary::new(labels.clone(), vectors, false).unwrap();
        vocab.assign_roles(&labels[..2], &labels[2..3]).unwrap();
        let features = array![
            [0.5, 0.0],   // class 0, dist 0.5 from s0
            [0.0, 1.0],   // class 0, dist 1.0
            [3.0, 0.0],   // class 0, dist 3.0
            [8.0, 0.0],   // class 1, dist 2.0 from s0 side? no: from s1 it's 2.0; from s0 it's 8.0
            [10.0, 1.5],  // class 1
        ];
        let data = LabeledFeatures::new(features, vec![0, 0, 0, 1, 1], 2).unwrap();
        let w = EmbeddingMatrix::new(Array2::eye(2)).unwrap();
        (w, data, vocab)
    }

    #[test]
    fn margin_samples_match_hand_computation() {
        let (w, data, vocab) = fixture();
        let got = collect_margin_samples(0, &w, &data, &vocab).unwrap();
        // Foreign instances of class 1 at (8,0) and (10,1.5), then prototypes
        // s1 = (10,0) and t0 = (0,6); distractors excluded by default.
        let expect = vec![
            8.0,
            (10.0f64 * 10.0 + 1.5 * 1.5).sqrt(),
            10.0,
            6.0,
        ];
        assert_eq!(got.len(), expect.len());
        for (g, e) in got.iter().zip(&expect) {
            assert_abs_diff_eq!(*g, *e, epsilon = 1e-12);
        }
    }

    #[test]
    fn margin_samples_drop_exact_zeros() {
        // Class-1 instance projected exactly onto s0's prototype.
        let labels: Vec<String> = ["s0", "s1", "t0"].iter().map(|s| s.to_string()).collect();
        let vectors = array![[0.0, 0.0], [10.0, 0.0], [0.0, 6.0]];
        let mut vocab = SemanticVocabulary::new(labels.clone(), vectors, false).unwrap();
        vocab.assign_roles(&labels[..2], &labels[2..]).unwrap();
        let features = array![[1.0, 0.0], [0.0, 0.0]];
        let data = LabeledFeatures::new(features, vec![0, 1], 2).unwrap();
        let w = EmbeddingMatrix::new(Array2::eye(2)).unwrap();
        let got = collect_margin_samples(0, &w, &data, &vocab).unwrap();
        // The zero-distance foreign instance is dropped; prototypes remain.
        assert_eq!(got, vec![10.0, 6.0]);
    }

    #[test]
    fn distractor_sampling_extends_the_pool_deterministically() {
        let (w, data, vocab) = fixture();
        let base = collect_margin_samples(0, &w, &data, &vocab).unwrap();
        let opts = MarginSampleOpts {
            distractors: Some(DistractorSample { cap: 10, seed: 3 }),
        };
        let a = collect_margin_samples_with(0, &w, &data, &vocab, &opts).unwrap();
        let b = collect_margin_samples_with(0, &w, &data, &vocab, &opts).unwrap();
        assert_eq!(a, b, "same seed must give the same sample");
        assert_eq!(a.len(), base.len() + 2, "both distractors fit under the cap");
        assert_eq!(&a[..base.len()], &base[..]);
        let one = MarginSampleOpts {
            distractors: Some(DistractorSample { cap: 1, seed: 3 }),
        };
        let c = collect_margin_samples_with(0, &w, &data, &vocab, &one).unwrap();
        assert_eq!(c.len(), base.len() + 1);
    }

    #[test]
    fn coverage_keeps_only_distances_below_nearest_foreign() {
        let (w, data, vocab) = fixture();
        // Class 0 within distances: 0.5, 1.0, 3.0; nearest foreign instance
        // is (8,0) at distance 8 ⇒ all kept.
        let got = collect_coverage_samples(0, &w, &data, &vocab).unwrap();
        assert_eq!(got, vec![0.5, 1.0, 3.0]);
        // Class 1: within distances from s1 = (10,0): 2.0 and 1.5; nearest
        // foreign instance is (3,0) at distance 7 ⇒ all kept.
        let got = collect_coverage_samples(1, &w, &data, &vocab).unwrap();
        assert_eq!(got, vec![2.0, 1.5]);
    }

    #[test]
    fn coverage_filter_can_empty_the_list_and_weights_fall_back() {
        // Move class 0's instances beyond a foreign instance parked nearby.
        let labels: Vec<String> = ["s0", "s1", "t0"].iter().map(|s| s.to_string()).collect();
        let vectors = array![[0.0, 0.0], [30.0, 0.0], [0.0, 30.0]];
        let mut vocab = SemanticVocabulary::new(labels.clone(), vectors, false).unwrap();
        vocab.assign_roles(&labels[..2], &labels[2..]).unwrap();
        let features = array![
            [5.0, 0.0],  // class 0, dist 5 from own prototype
            [6.0, 0.0],  // class 0, dist 6
            [7.0, 0.0],  // class 0, dist 7
            [1.0, 0.0],  // class 1 instance sitting 1.0 from s0 — closer than any within
            [29.0, 0.0], // class 1
            [30.0, 1.0], // class 1
        ];
        let data = LabeledFeatures::new(features, vec![0, 0, 0, 1, 1, 1], 2).unwrap();
        let w = EmbeddingMatrix::new(Array2::eye(2)).unwrap();
        let kept = collect_coverage_samples(0, &w, &data, &vocab).unwrap();
        assert!(kept.is_empty());
        let weights = compute_all_weights(&w, &data, &vocab, 0.05).unwrap();
        let c0 = &weights.classes[0];
        assert!(c0.coverage_fallback);
        let fit = c0.coverage_fit.unwrap();
        assert!(fit.shape.is_infinite());
        assert_abs_diff_eq!(fit.scale, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn weights_normalize_to_mean_one() {
        let (w, data, vocab) = fixture();
        let weights = compute_all_weights(&w, &data, &vocab, 0.05).unwrap();
        assert_eq!(weights.len(), 2);
        assert_abs_diff_eq!(weights.mean_weight(), 1.0, epsilon = 1e-12);
        for c in &weights.classes {
            assert!(c.weight > 0.0);
            assert!(c.margin_radius > 0.0);
            assert!(c.coverage_radius > 0.0);
        }
    }

    #[test]
    fn mirror_symmetric_classes_get_equal_weights() {
        // Two classes whose geometry is an exact reflection of each other:
        // identical sample multisets ⇒ identical radii ⇒ both weights 1.
        let labels: Vec<String> = ["left", "right"].iter().map(|s| s.to_string()).collect();
        let vectors = array![[-1.0, 0.0], [1.0, 0.0]];
        let mut vocab = SemanticVocabulary::new(labels.clone(), vectors, false).unwrap();
        vocab.assign_roles(&labels, &[]).unwrap();
        let features = array![
            [-0.9, 0.1],
            [-1.1, -0.2],
            [-0.8, -0.1],
            [0.9, -0.1],
            [1.1, 0.2],
            [0.8, 0.1],
        ];
        let data = LabeledFeatures::new(features, vec![0, 0, 0, 1, 1, 1], 2).unwrap();
        let w = EmbeddingMatrix::new(Array2::eye(2)).unwrap();
        let weights = compute_all_weights(&w, &data, &vocab, 0.05).unwrap();
        assert_abs_diff_eq!(weights.classes[0].weight, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(weights.classes[1].weight, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            weights.classes[0].margin_radius,
            weights.classes[1].margin_radius,
            epsilon = 1e-12
        );
    }

    #[test]
    fn single_instance_single_class_reduces_to_point_masses() {
        // One source class, one target prototype, one instance: both fits
        // collapse to the single-sample rule and the lone weight is 1.
        let labels: Vec<String> = ["only", "t"].iter().map(|s| s.to_string()).collect();
        let vectors = array![[0.0, 0.0], [3.0, 4.0]];
        let mut vocab = SemanticVocabulary::new(labels.clone(), vectors, false).unwrap();
        vocab.assign_roles(&labels[..1], &labels[1..]).unwrap();
        let features = array![[0.3, 0.4]];
        let data = LabeledFeatures::new(features, vec![0], 1).unwrap();
        let w = EmbeddingMatrix::new(Array2::eye(2)).unwrap();
        let weights = compute_all_weights(&w, &data, &vocab, 0.05).unwrap();
        let c = &weights.classes[0];
        assert_eq!(c.weight, 1.0);
        // Margin: the single sample is the distance to the target prototype.
        assert_abs_diff_eq!(c.margin_fit.unwrap().scale, 5.0, epsilon = 1e-12);
        assert!(c.margin_fit.unwrap().shape.is_infinite());
        assert_abs_diff_eq!(c.margin_radius, 5.0, epsilon = 1e-12);
        // Coverage: the single within distance 0.5.
        assert_abs_diff_eq!(c.coverage_fit.unwrap().scale, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(c.coverage_radius, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn zero_embedding_matrix_is_a_valid_weighting_point() {
        // Training starts its first weight round from W = 0, where every
        // instance projects to the origin; the pipeline must survive it.
        let labels: Vec<String> = ["a", "b", "t"].iter().map(|s| s.to_string()).collect();
        let vectors = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];
        let mut vocab = SemanticVocabulary::new(labels.clone(), vectors, true).unwrap();
        vocab.assign_roles(&labels[..2], &labels[2..]).unwrap();
        let mut r = rng(5);
        let features = Array2::from_shape_fn((8, 3), |_| r.random_range(-1.0..1.0));
        let data = LabeledFeatures::new(features, vec![0, 1, 0, 1, 0, 1, 0, 1], 2).unwrap();
        let w = EmbeddingMatrix::zeros(3, 2);
        let weights = compute_all_weights(&w, &data, &vocab, 0.05).unwrap();
        assert_abs_diff_eq!(weights.mean_weight(), 1.0, epsilon = 1e-12);
        assert!(weights.classes.iter().all(|c| c.weight > 0.0));
    }

    #[test]
    fn uniform_weights_are_all_ones() {
        let w = ClassWeights::uniform(4);
        assert_eq!(w.len(), 4);
        assert!(w.classes.iter().all(|c| c.weight == 1.0 && c.margin_fit.is_none()));
        assert_eq!(w.mean_weight(), 1.0);
    }
}
