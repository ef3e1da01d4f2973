//! Optimizers and the outer training loop.
//!
//! The objective is convex and C¹, so a limited-memory BFGS with Armijo
//! backtracking is the workhorse. A mini-batch SGD (seeded shuffling,
//! stepwise learning-rate halving, per-epoch batch doubling) is available
//! for large training sets, plus a hybrid schedule that runs SGD for a
//! leading fraction of the iteration budget to get cheaply into the basin
//! and hands the iterate to L-BFGS to finish.
//!
//! [`train`] wraps the block-coordinate outer loop: starting from W = 0 and
//! uniform class weights, it alternates minimizing the objective in W with
//! refitting the extreme-value class weights, for a configured number of
//! rounds. Everything is deterministic for a fixed seed, independent of
//! thread count.

use std::collections::VecDeque;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::{build_neighbor_sets, EmbeddingMatrix, LabeledFeatures, SemanticVocabulary};
use crate::error::{Error, Result};
use crate::evt::{compute_all_weights, ClassWeights};
use crate::loss::{add_regularizer, objective_subset, LossConfig, LossValueGrad};

/// Optimization method for the inner minimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Lbfgs,
    Sgd,
    Hybrid,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lbfgs" => Ok(Method::Lbfgs),
            "sgd" => Ok(Method::Sgd),
            "hybrid" => Ok(Method::Hybrid),
            other => Err(Error::Config(format!(
                "unknown method {other:?}; expected lbfgs, sgd, or hybrid"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Lbfgs => "lbfgs",
            Method::Sgd => "sgd",
            Method::Hybrid => "hybrid",
        }
    }
}

/// Solver hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub method: Method,
    /// Iteration budget: L-BFGS outer iterations, or SGD epochs, or (for the
    /// hybrid) the two phases combined.
    pub max_iters: usize,
    /// Number of curvature pairs L-BFGS retains.
    pub lbfgs_memory: usize,
    /// Convergence threshold on ‖∇f‖ relative to its value at the start.
    pub grad_tol: f64,
    /// Initial SGD learning rate.
    pub sgd_lr: f64,
    /// Halve the learning rate every this many epochs.
    pub sgd_lr_halve_every: usize,
    /// Starting mini-batch size; doubles each epoch up to the dataset size.
    pub batch_size: usize,
    /// Fraction of `max_iters` the hybrid spends in its SGD phase; 0 is pure
    /// L-BFGS, 1 pure SGD.
    pub hybrid_switch_frac: f64,
    /// Outer rounds of minimize-then-reweight in [`train`].
    pub weight_rounds: usize,
    /// Significance level for the extreme-value radii.
    pub significance: f64,
    /// Seed for SGD shuffling.
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: Method::Lbfgs,
            max_iters: 100,
            lbfgs_memory: 10,
            grad_tol: 1e-6,
            sgd_lr: 0.05,
            sgd_lr_halve_every: 10,
            batch_size: 32,
            hybrid_switch_frac: 0.3,
            weight_rounds: 2,
            significance: crate::evt::DEFAULT_SIGNIFICANCE,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be ≥ 1".into()));
        }
        if self.lbfgs_memory == 0 {
            return Err(Error::Config("lbfgs_memory must be ≥ 1".into()));
        }
        if !(self.grad_tol > 0.0) || !self.grad_tol.is_finite() {
            return Err(Error::Config(format!("grad_tol must be > 0, got {}", self.grad_tol)));
        }
        if !(self.sgd_lr > 0.0) || !self.sgd_lr.is_finite() {
            return Err(Error::Config(format!("sgd_lr must be > 0, got {}", self.sgd_lr)));
        }
        if self.sgd_lr_halve_every == 0 {
            return Err(Error::Config("sgd_lr_halve_every must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.hybrid_switch_frac) || !self.hybrid_switch_frac.is_finite() {
            return Err(Error::Config(format!(
                "hybrid_switch_frac must be in [0, 1], got {}",
                self.hybrid_switch_frac
            )));
        }
        if self.weight_rounds == 0 {
            return Err(Error::Config("weight_rounds must be ≥ 1".into()));
        }
        if !(self.significance > 0.0 && self.significance < 1.0) {
            return Err(Error::Config(format!(
                "significance must lie in (0, 1), got {}",
                self.significance
            )));
        }
        Ok(())
    }
}

/// One line of the optimization trace.
#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub objective: f64,
    pub grad_norm: f64,
    /// Seconds since the minimization started.
    pub wall_secs: f64,
}

/// Everything [`train`] (and the single minimizers) reports besides the
/// solution: per-iteration records, the class weights after each outer
/// round, and human-readable warnings (line-search trouble, fit fallbacks).
#[derive(Debug, Clone, Default)]
pub struct TrainTrace {
    pub records: Vec<IterRecord>,
    pub weight_rounds: Vec<ClassWeights>,
    pub warnings: Vec<String>,
}

impl TrainTrace {
    fn record(&mut self, iter: usize, objective: f64, grad_norm: f64, start: Instant) {
        self.records.push(IterRecord {
            iter,
            objective,
            grad_norm,
            wall_secs: start.elapsed().as_secs_f64(),
        });
    }

    /// Appends a later phase, renumbering its iterations to continue this
    /// trace. The phase's iteration-0 record duplicates the current state
    /// and is skipped when this trace already has one.
    fn append(&mut self, other: TrainTrace) {
        let offset = self.records.last().map(|r| r.iter).unwrap_or(0);
        let skip_zero = !self.records.is_empty();
        for r in other.records {
            if skip_zero && r.iter == 0 {
                continue;
            }
            self.records.push(IterRecord { iter: r.iter + offset, ..r });
        }
        self.warnings.extend(other.warnings);
        self.weight_rounds.extend(other.weight_rounds);
    }

    /// Plain-text log, one `iter=… obj=… gnorm=… t=…` line per record.
    pub fn render_log(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!(
                "iter={} obj={:.12e} gnorm={:.6e} t={:.3}\n",
                r.iter, r.objective, r.grad_norm, r.wall_secs
            ));
        }
        for w in &self.warnings {
            out.push_str(&format!("# warning: {w}\n"));
        }
        out
    }
}

pub(crate) fn frob_norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|e| e * e).sum::<f64>().sqrt()
}

fn frob_dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 30;

/// Two-loop recursion: −H·g from the stored curvature pairs, with the usual
/// sᵀy/yᵀy initial scaling.
fn two_loop(grad: &Array2<f64>, hist: &VecDeque<(Array2<f64>, Array2<f64>, f64)>) -> Array2<f64> {
    let mut q = grad.clone();
    let mut alphas = Vec::with_capacity(hist.len());
    for (s, y, rho) in hist.iter().rev() {
        let a = rho * frob_dot(s, &q);
        q.zip_mut_with(y, |qe, &ye| *qe -= a * ye);
        alphas.push(a);
    }
    if let Some((s, y, _)) = hist.back() {
        let gamma = frob_dot(s, y) / frob_dot(y, y);
        q.mapv_inplace(|e| e * gamma);
    }
    for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
        let b = rho * frob_dot(y, &q);
        q.zip_mut_with(s, |qe, &se| *qe += (a - b) * se);
    }
    q.mapv_inplace(|e| -e);
    q
}

/// Limited-memory BFGS with Armijo backtracking line search.
///
/// Stops when ‖∇f‖ drops below `grad_tol · ‖∇f(W₀)‖` or the iteration budget
/// runs out. Every accepted step strictly decreases the objective; if 30
/// halvings can't satisfy the Armijo test the best iterate so far is
/// returned with a warning on the trace. Curvature pairs with non-positive
/// sᵀy are skipped to keep the inverse-Hessian model positive definite.
pub fn lbfgs_minimize<F>(
    mut f: F,
    w0: Array2<f64>,
    cfg: &SolverConfig,
) -> Result<(Array2<f64>, TrainTrace)>
where
    F: FnMut(&Array2<f64>) -> Result<LossValueGrad>,
{
    cfg.validate()?;
    let start = Instant::now();
    let mut trace = TrainTrace::default();
    let mut w = w0;
    let mut cur = f(&w)?;
    if !cur.value.is_finite() {
        return Err(Error::Numerical(format!(
            "objective is {} at the initial point",
            cur.value
        )));
    }
    let g0 = frob_norm(&cur.grad);
    let tol = cfg.grad_tol * g0;
    let mut gnorm = g0;
    trace.record(0, cur.value, gnorm, start);

    let mut hist: VecDeque<(Array2<f64>, Array2<f64>, f64)> = VecDeque::new();
    for iter in 1..=cfg.max_iters {
        if gnorm <= tol {
            break;
        }
        let mut dir = two_loop(&cur.grad, &hist);
        let mut slope = frob_dot(&cur.grad, &dir);
        if !(slope < 0.0) {
            // Numerical trouble in the curvature model; restart from
            // steepest descent.
            hist.clear();
            dir = cur.grad.mapv(|g| -g);
            slope = -gnorm * gnorm;
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_BACKTRACKS {
            let cand = &w + &dir.mapv(|e| e * step);
            let out = f(&cand)?;
            if out.value.is_finite() && out.value <= cur.value + ARMIJO_C1 * step * slope {
                accepted = Some((cand, out));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, out)) = accepted else {
            trace.warnings.push(format!(
                "line search failed after {MAX_BACKTRACKS} backtracks at iteration {iter}; \
                 returning the best iterate so far"
            ));
            break;
        };

        let s = &cand - &w;
        let y = &out.grad - &cur.grad;
        let sy = frob_dot(&s, &y);
        if sy > 1e-10 * frob_norm(&s) * frob_norm(&y) {
            hist.push_back((s, y, 1.0 / sy));
            if hist.len() > cfg.lbfgs_memory {
                hist.pop_front();
            }
        }
        w = cand;
        cur = out;
        gnorm = frob_norm(&cur.grad);
        trace.record(iter, cur.value, gnorm, start);
    }
    Ok((w, trace))
}

/// Mini-batch SGD over instance indices `0..n_instances`.
///
/// `f_batch(W, batch)` must return an estimate of the **full** objective and
/// gradient from the given instances (subset terms scaled up by n/|batch|,
/// regularizer included once). Each epoch shuffles with a ChaCha stream
/// seeded from `cfg.seed`, steps through the batches, then records the
/// full-set objective; the learning rate halves every
/// `sgd_lr_halve_every` epochs and the batch size doubles each epoch (capped
/// at n), so late epochs take fewer, better-estimated steps. Divergence —
/// a non-finite objective, or growth beyond 10⁶ × max(|f₀|, 1) — aborts
/// with an error.
pub fn sgd_minimize<F>(
    mut f_batch: F,
    n_instances: usize,
    w0: Array2<f64>,
    cfg: &SolverConfig,
) -> Result<(Array2<f64>, TrainTrace)>
where
    F: FnMut(&Array2<f64>, &[usize]) -> Result<LossValueGrad>,
{
    cfg.validate()?;
    if n_instances == 0 {
        return Err(Error::Empty("training set"));
    }
    let start = Instant::now();
    let mut trace = TrainTrace::default();
    let mut w = w0;
    let all: Vec<usize> = (0..n_instances).collect();
    let first = f_batch(&w, &all)?;
    if !first.value.is_finite() {
        return Err(Error::Numerical(format!(
            "objective is {} at the initial point",
            first.value
        )));
    }
    let f0 = first.value;
    let blowup = 1e6 * f0.abs().max(1.0);
    trace.record(0, f0, frob_norm(&first.grad), start);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut idx = all.clone();
    let mut batch = cfg.batch_size.min(n_instances);
    for epoch in 1..=cfg.max_iters {
        let lr = cfg.sgd_lr * 0.5f64.powi(((epoch - 1) / cfg.sgd_lr_halve_every) as i32);
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(batch) {
            let out = f_batch(&w, chunk)?;
            w.zip_mut_with(&out.grad, |we, &ge| *we -= lr * ge);
        }
        let full = f_batch(&w, &all)?;
        if !full.value.is_finite() || full.value > blowup {
            return Err(Error::Numerical(format!(
                "SGD diverged at epoch {epoch}: objective {} from initial {f0} \
                 (try a smaller sgd_lr)",
                full.value
            )));
        }
        trace.record(epoch, full.value, frob_norm(&full.grad), start);
        batch = (batch * 2).min(n_instances);
    }
    Ok((w, trace))
}

/// SGD for the leading `hybrid_switch_frac` share of `max_iters`, then
/// L-BFGS for the remainder, starting from the SGD iterate. The fraction's
/// endpoints degenerate exactly: 0 runs only L-BFGS, 1 only SGD. Since every
/// accepted L-BFGS step decreases the objective, the final value is never
/// worse than where SGD left off.
pub fn hybrid_minimize<F, G>(
    f: F,
    f_batch: G,
    n_instances: usize,
    w0: Array2<f64>,
    cfg: &SolverConfig,
) -> Result<(Array2<f64>, TrainTrace)>
where
    F: FnMut(&Array2<f64>) -> Result<LossValueGrad>,
    G: FnMut(&Array2<f64>, &[usize]) -> Result<LossValueGrad>,
{
    cfg.validate()?;
    let sgd_epochs =
        ((cfg.hybrid_switch_frac * cfg.max_iters as f64).round() as usize).min(cfg.max_iters);
    let lbfgs_iters = cfg.max_iters - sgd_epochs;

    let mut trace = TrainTrace::default();
    let mut w = w0;
    if sgd_epochs > 0 {
        let mut sgd_cfg = cfg.clone();
        sgd_cfg.max_iters = sgd_epochs;
        let (w1, tr) = sgd_minimize(f_batch, n_instances, w, &sgd_cfg)?;
        w = w1;
        trace.append(tr);
    }
    if lbfgs_iters > 0 {
        let mut lb_cfg = cfg.clone();
        lb_cfg.max_iters = lbfgs_iters;
        let (w2, tr) = lbfgs_minimize(f, w, &lb_cfg)?;
        w = w2;
        trace.append(tr);
    }
    Ok((w, trace))
}

/// Trains an embedding: starting from W = 0 and uniform class weights, each
/// round minimizes the objective in W with the configured method, then
/// refits the extreme-value class weights at the new W. The weights returned
/// are the ones fitted to the final W (also stored per round on the trace),
/// so a serialized model is self-consistent.
pub fn train(
    data: &LabeledFeatures,
    vocab: &SemanticVocabulary,
    loss_cfg: &LossConfig,
    cfg: &SolverConfig,
) -> Result<(EmbeddingMatrix, ClassWeights, TrainTrace)> {
    loss_cfg.validate()?;
    cfg.validate()?;
    if data.class_count() != vocab.source_ids().len() {
        return Err(Error::Shape {
            context: "train",
            expected: format!("{} source classes in the vocabulary", data.class_count()),
            got: format!("{}", vocab.source_ids().len()),
        });
    }
    let mut seen = vec![false; data.class_count()];
    for i in 0..data.len() {
        seen[data.label(i)] = true;
    }
    if let Some(z) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidInput(format!(
            "source class {z} has no training instances"
        )));
    }

    let neighbors = build_neighbor_sets(vocab, loss_cfg.open_neighbors, loss_cfg.source_neighbors)?;
    let n = data.len();
    let all: Vec<usize> = (0..n).collect();
    let mut w = Array2::zeros((data.dim(), vocab.dim()));
    let mut weights = ClassWeights::uniform(data.class_count());
    let mut trace = TrainTrace::default();

    for round in 0..cfg.weight_rounds {
        let wts = weights.clone();
        let (w_new, tr) = match cfg.method {
            Method::Lbfgs => {
                let f = |wm: &Array2<f64>| -> Result<LossValueGrad> {
                    let mut out =
                        objective_subset(wm, data, vocab, &neighbors, &wts, loss_cfg, &all);
                    add_regularizer(wm, loss_cfg.lambda_reg, &mut out);
                    Ok(out)
                };
                lbfgs_minimize(f, w, cfg)?
            }
            Method::Sgd => {
                let f_batch = |wm: &Array2<f64>, idxs: &[usize]| -> Result<LossValueGrad> {
                    Ok(batch_estimate(wm, data, vocab, &neighbors, &wts, loss_cfg, idxs, n))
                };
                sgd_minimize(f_batch, n, w, cfg)?
            }
            Method::Hybrid => {
                let f = |wm: &Array2<f64>| -> Result<LossValueGrad> {
                    let mut out =
                        objective_subset(wm, data, vocab, &neighbors, &wts, loss_cfg, &all);
                    add_regularizer(wm, loss_cfg.lambda_reg, &mut out);
                    Ok(out)
                };
                let f_batch = |wm: &Array2<f64>, idxs: &[usize]| -> Result<LossValueGrad> {
                    Ok(batch_estimate(wm, data, vocab, &neighbors, &wts, loss_cfg, idxs, n))
                };
                hybrid_minimize(f, f_batch, n, w, cfg)?
            }
        };
        w = w_new;
        trace.append(tr);

        let w_view = EmbeddingMatrix::new(w.clone())?;
        let cw = compute_all_weights(&w_view, data, vocab, cfg.significance)?;
        for (z, c) in cw.classes.iter().enumerate() {
            if c.margin_fallback {
                trace.warnings.push(format!(
                    "round {round}: class {z} margin fit fell back to the point-mass rule"
                ));
            }
            if c.coverage_fallback {
                trace.warnings.push(format!(
                    "round {round}: class {z} coverage fit fell back to the point-mass rule"
                ));
            }
        }
        trace.weight_rounds.push(cw.clone());
        weights = cw;
    }

    Ok((EmbeddingMatrix::new(w)?, weights, trace))
}

/// Full-objective estimate from a batch: subset terms scaled by n/|batch|,
/// regularizer added once.
#[allow(clippy::too_many_arguments)]
fn batch_estimate(
    w: &Array2<f64>,
    data: &LabeledFeatures,
    vocab: &SemanticVocabulary,
    neighbors: &crate::embedding::NeighborSets,
    weights: &ClassWeights,
    loss_cfg: &LossConfig,
    idxs: &[usize],
    n: usize,
) -> LossValueGrad {
    let mut out = objective_subset(w, data, vocab, neighbors, weights, loss_cfg, idxs);
    if !idxs.is_empty() {
        let scale = n as f64 / idxs.len() as f64;
        out.value *= scale;
        out.grad.mapv_inplace(|g| g * scale);
    }
    add_regularizer(w, loss_cfg.lambda_reg, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_matrix, rng};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    /// f(W) = ‖W − A‖² — strictly convex bowl with minimum A.
    fn bowl(a: Array2<f64>) -> impl FnMut(&Array2<f64>) -> Result<LossValueGrad> {
        move |w| {
            let diff = w - &a;
            let value = diff.iter().map(|e| e * e).sum();
            Ok(LossValueGrad { value, grad: diff.mapv(|e| 2.0 * e) })
        }
    }

    #[test]
    fn lbfgs_solves_a_quadratic_bowl_in_a_few_iterations() {
        let mut r = rng(1);
        let a = random_matrix(&mut r, 4, 3);
        let cfg = SolverConfig { grad_tol: 1e-10, ..SolverConfig::default() };
        let (w, trace) = lbfgsd_check(bowl(a.clone()), Array2::zeros((4, 3)), &cfg);
        let final_obj = trace.records.last().unwrap().objective;
        assert!(final_obj < 1e-12, "objective {final_obj} not at the bottom");
        assert!(
            trace.records.len() <= 6,
            "took {} iterations for an exact quadratic",
            trace.records.len()
        );
        for (we, ae) in w.iter().zip(a.iter()) {
            assert_abs_diff_eq!(*we, *ae, epsilon = 1e-7);
        }
    }

    fn lbfgsd_check<F>(f: F, w0: Array2<f64>, cfg: &SolverConfig) -> (Array2<f64>, TrainTrace)
    where
        F: FnMut(&Array2<f64>) -> Result<LossValueGrad>,
    {
        let (w, trace) = lbfgs_minimize(f, w0, cfg).unwrap();
        // Accepted steps must never increase the objective.
        for pair in trace.records.windows(2) {
            assert!(pair[1].objective <= pair[0].objective + 1e-15);
        }
        (w, trace)
    }

    #[test]
    fn lbfgs_returns_immediately_at_a_stationary_point() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let cfg = SolverConfig::default();
        let (w, trace) = lbfgs_minimize(bowl(a.clone()), a.clone(), &cfg).unwrap();
        assert_eq!(trace.records.len(), 1, "no steps from a zero gradient");
        assert_eq!(w, a);
    }

    #[test]
    fn lbfgs_line_search_failure_warns_and_returns_best() {
        // f(x) = x⁴ at x = 1e5: the unit step overshoots by ten orders of
        // magnitude and 30 halvings cannot recover, so the line search gives
        // up on the spot.
        let f = |w: &Array2<f64>| -> Result<LossValueGrad> {
            let x = w[(0, 0)];
            Ok(LossValueGrad {
                value: x.powi(4),
                grad: array![[4.0 * x.powi(3)]],
            })
        };
        let cfg = SolverConfig::default();
        let (w, trace) = lbfgs_minimize(f, array![[1e5]], &cfg).unwrap();
        assert_eq!(w, array![[1e5]]);
        assert!(
            trace.warnings.iter().any(|m| m.contains("line search failed")),
            "missing warning: {:?}",
            trace.warnings
        );
    }

    #[test]
    fn lbfgs_rejects_invalid_config() {
        let cfg = SolverConfig { max_iters: 0, ..SolverConfig::default() };
        assert!(matches!(
            lbfgs_minimize(bowl(array![[0.0]]), array![[1.0]], &cfg),
            Err(Error::Config(_))
        ));
        let cfg = SolverConfig { grad_tol: 0.0, ..SolverConfig::default() };
        assert!(matches!(
            lbfgs_minimize(bowl(array![[0.0]]), array![[1.0]], &cfg),
            Err(Error::Config(_))
        ));
    }

    /// Batch objective emulating a dataset: f(W) = mean_i ‖W − A_i‖², with
    /// batch estimates scaled the way the training driver scales them.
    fn batched_bowls(
        targets: Vec<Array2<f64>>,
    ) -> impl FnMut(&Array2<f64>, &[usize]) -> Result<LossValueGrad> {
        let n = targets.len();
        move |w, idxs| {
            let mut value = 0.0;
            let mut grad = Array2::zeros(w.dim());
            for &i in idxs {
                let diff = w - &targets[i];
                value += diff.iter().map(|e| e * e).sum::<f64>();
                grad.zip_mut_with(&diff, |g, &d| *g += 2.0 * d);
            }
            let scale = n as f64 / idxs.len().max(1) as f64 / n as f64;
            value *= scale;
            grad.mapv_inplace(|g| g * scale);
            Ok(LossValueGrad { value, grad })
        }
    }

    fn bowl_targets(seed: u64, n: usize) -> Vec<Array2<f64>> {
        let mut r = rng(seed);
        (0..n).map(|_| random_matrix(&mut r, 3, 2)).collect()
    }

    #[test]
    fn sgd_descends_a_bowl_every_epoch() {
        let targets = bowl_targets(7, 20);
        let cfg = SolverConfig {
            method: Method::Sgd,
            max_iters: 15,
            sgd_lr: 0.05,
            batch_size: 4,
            ..SolverConfig::default()
        };
        let (_, trace) =
            sgd_minimize(batched_bowls(targets), 20, Array2::zeros((3, 2)), &cfg).unwrap();
        assert_eq!(trace.records.len(), 16);
        for pair in trace.records.windows(2) {
            assert!(
                pair[1].objective < pair[0].objective,
                "epoch did not decrease: {} -> {}",
                pair[0].objective,
                pair[1].objective
            );
        }
    }

    #[test]
    fn sgd_detects_divergence() {
        let targets = bowl_targets(8, 10);
        let cfg = SolverConfig {
            method: Method::Sgd,
            max_iters: 50,
            sgd_lr: 10.0, // way past 1/L for this quadratic
            batch_size: 10,
            ..SolverConfig::default()
        };
        let err = sgd_minimize(batched_bowls(targets), 10, Array2::zeros((3, 2)), &cfg).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "got {err:?}");
    }

    #[test]
    fn sgd_is_seed_deterministic() {
        let targets = bowl_targets(9, 16);
        let mk_cfg = |seed| SolverConfig {
            method: Method::Sgd,
            max_iters: 8,
            sgd_lr: 0.04,
            batch_size: 2,
            seed,
            ..SolverConfig::default()
        };
        let run = |seed| {
            sgd_minimize(batched_bowls(targets.clone()), 16, Array2::zeros((3, 2)), &mk_cfg(seed))
                .unwrap()
        };
        let (wa, ta) = run(3);
        let (wb, tb) = run(3);
        assert_eq!(wa, wb, "same seed must reproduce bit-for-bit");
        assert_eq!(
            ta.records.iter().map(|r| r.objective.to_bits()).collect::<Vec<_>>(),
            tb.records.iter().map(|r| r.objective.to_bits()).collect::<Vec<_>>()
        );
        let (wc, _) = run(4);
        assert_ne!(wa, wc, "different shuffles should visit different iterates");
    }

    /// Full-set closure over the batched bowls, built fresh per use since
    /// the opaque `impl FnMut` type can't be cloned.
    fn full_f(
        targets: &[Array2<f64>],
    ) -> impl FnMut(&Array2<f64>) -> Result<LossValueGrad> {
        let mut g = batched_bowls(targets.to_vec());
        let idxs: Vec<usize> = (0..targets.len()).collect();
        move |w: &Array2<f64>| g(w, &idxs)
    }

    #[test]
    fn hybrid_endpoints_match_the_pure_methods() {
        let targets = bowl_targets(10, 12);
        let base = SolverConfig {
            max_iters: 10,
            sgd_lr: 0.05,
            batch_size: 3,
            seed: 5,
            ..SolverConfig::default()
        };

        let pure_lbfgs = lbfgs_minimize(full_f(&targets), Array2::zeros((3, 2)), &base).unwrap().0;
        let cfg0 = SolverConfig { hybrid_switch_frac: 0.0, ..base.clone() };
        let hybrid0 = hybrid_minimize(
            full_f(&targets),
            batched_bowls(targets.clone()),
            12,
            Array2::zeros((3, 2)),
            &cfg0,
        )
        .unwrap()
        .0;
        assert_eq!(hybrid0, pure_lbfgs, "switch fraction 0 must equal pure L-BFGS");

        let pure_sgd =
            sgd_minimize(batched_bowls(targets.clone()), 12, Array2::zeros((3, 2)), &base)
                .unwrap()
                .0;
        let cfg1 = SolverConfig { hybrid_switch_frac: 1.0, ..base.clone() };
        let hybrid1 = hybrid_minimize(
            full_f(&targets),
            batched_bowls(targets.clone()),
            12,
            Array2::zeros((3, 2)),
            &cfg1,
        )
        .unwrap()
        .0;
        assert_eq!(hybrid1, pure_sgd, "switch fraction 1 must equal pure SGD");
    }

    #[test]
    fn hybrid_never_finishes_above_its_sgd_phase() {
        let targets = bowl_targets(11, 14);
        let cfg = SolverConfig {
            max_iters: 12,
            hybrid_switch_frac: 0.5,
            sgd_lr: 0.03,
            batch_size: 2,
            seed: 1,
            ..SolverConfig::default()
        };
        let (_, trace) = hybrid_minimize(
            full_f(&targets),
            batched_bowls(targets),
            14,
            Array2::zeros((3, 2)),
            &cfg,
        )
        .unwrap();
        let switch_obj = trace.records.iter().find(|r| r.iter == 6).unwrap().objective;
        let final_obj = trace.records.last().unwrap().objective;
        assert!(final_obj <= switch_obj + 1e-9);
        // Iterations renumbered continuously across the phase boundary.
        let iters: Vec<usize> = trace.records.iter().map(|r| r.iter).collect();
        let mut sorted = iters.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(iters, sorted, "trace iterations must be strictly increasing");
    }

    // End-to-end `train` behavior on real data lives in tests/training.rs,
    // where the synthetic benchmark generator is available; here we pin the
    // wiring on a small hand fixture.
    fn tiny_problem() -> (LabeledFeatures, SemanticVocabulary) {
        let labels: Vec<String> =
            ["a", "b", "c", "t0", "t1", "d0", "d1", "d2"].iter().map(|s| s.to_string()).collect();
        let mut r = rng(42);
        let vectors = random_matrix(&mut r, 8, 4);
        let mut vocab = SemanticVocabulary::new(labels.clone(), vectors, true).unwrap();
        vocab.assign_roles(&labels[..3], &labels[3..5]).unwrap();
        let features = random_matrix(&mut r, 18, 5);
        let labels: Vec<usize> = (0..18).map(|i| i % 3).collect();
        let data = LabeledFeatures::new(features, labels, 3).unwrap();
        (data, vocab)
    }

    #[test]
    fn train_runs_weight_rounds_and_descends() {
        let (data, vocab) = tiny_problem();
        let loss_cfg = LossConfig { open_neighbors: 3, source_neighbors: 2, ..LossConfig::default() };
        let cfg = SolverConfig { max_iters: 40, weight_rounds: 2, ..SolverConfig::default() };
        let (w, weights, trace) = train(&data, &vocab, &loss_cfg, &cfg).unwrap();
        assert_eq!(w.p(), 5);
        assert_eq!(w.d(), 4);
        assert_eq!(trace.weight_rounds.len(), 2);
        assert_eq!(weights.len(), 3);
        assert_abs_diff_eq!(weights.mean_weight(), 1.0, epsilon = 1e-12);
        let first = trace.records.first().unwrap().objective;
        let last = trace.records.last().unwrap().objective;
        assert!(last < first, "training did not reduce the objective: {first} -> {last}");
        // The returned weights are the ones fitted after the final round.
        assert_eq!(weights, trace.weight_rounds[1]);
    }

    #[test]
    fn train_is_deterministic() {
        let (data, vocab) = tiny_problem();
        let loss_cfg = LossConfig { open_neighbors: 3, source_neighbors: 2, ..LossConfig::default() };
        let cfg = SolverConfig { max_iters: 25, ..SolverConfig::default() };
        let (wa, wta, _) = train(&data, &vocab, &loss_cfg, &cfg).unwrap();
        let (wb, wtb, _) = train(&data, &vocab, &loss_cfg, &cfg).unwrap();
        assert_eq!(wa.as_array(), wb.as_array(), "repeat runs must agree bit-for-bit");
        assert_eq!(wta, wtb);
    }

    #[test]
    fn train_rejects_classes_without_instances() {
        let (data, vocab) = tiny_problem();
        // Relabel everything to classes {0, 1}, leaving class 2 empty.
        let features = data.features().clone();
        let labels: Vec<usize> = (0..data.len()).map(|i| i % 2).collect();
        let data = LabeledFeatures::new(features, labels, 3).unwrap();
        let err = train(&data, &vocab, &LossConfig::default(), &SolverConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Lbfgs, Method::Sgd, Method::Hybrid] {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert!(matches!(Method::parse("newton"), Err(Error::Config(_))));
    }

    #[test]
    fn render_log_lines_have_the_documented_shape() {
        let targets = bowl_targets(12, 6);
        let cfg = SolverConfig { max_iters: 3, sgd_lr: 0.05, ..SolverConfig::default() };
        let (_, trace) =
            sgd_minimize(batched_bowls(targets), 6, Array2::zeros((3, 2)), &cfg).unwrap();
        let log = trace.render_log();
        for (i, line) in log.lines().enumerate() {
            assert!(
                line.starts_with(&format!("iter={i} obj=")),
                "unexpected log line: {line}"
            );
            assert!(line.contains(" gnorm=") && line.contains(" t="));
        }
    }
}
