//! Synthetic benchmark generation and slow reference computations.
//!
//! The generator builds a small world where the ground truth is known by
//! construction: well-separated unit prototypes in semantic space, a visual
//! space produced from it by a linear map of controlled conditioning, and
//! Gaussian instance noise. The reference computations (a literal
//! triple-loop objective, a dense Weibull likelihood grid, a closed-form
//! ridge solve) deliberately avoid the optimized code paths so tests can
//! check the fast implementations against something independent.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embedding::{LabeledFeatures, NeighborSets, SemanticVocabulary};
use crate::error::{Error, Result};
use crate::evaluation::EvalSet;
use crate::evt::ClassWeights;
use crate::loss::LossConfig;

/// Everything that determines a synthetic benchmark. Two equal specs
/// produce bitwise-identical benchmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    /// Classes with training data.
    pub n_source: usize,
    /// Classes present only at test time.
    pub n_target: usize,
    /// Extra vocabulary entries that never label an instance.
    pub n_distractor: usize,
    /// Semantic dimensionality.
    pub d: usize,
    /// Visual dimensionality.
    pub p: usize,
    /// Training instances per source class; also test instances per
    /// source and per target class.
    pub instances_per_class: usize,
    /// Standard deviation of the isotropic visual noise.
    pub noise_sigma: f64,
    /// Ratio of the largest to smallest singular value of the
    /// semantic-to-visual map.
    pub map_condition: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            n_source: 6,
            n_target: 4,
            n_distractor: 10,
            d: 8,
            p: 12,
            instances_per_class: 20,
            noise_sigma: 0.1,
            map_condition: 4.0,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.n_source == 0 {
            return Err(Error::Config("need at least one source class".into()));
        }
        if self.d == 0 || self.p == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.instances_per_class == 0 {
            return Err(Error::Config("need at least one instance per class".into()));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!("bad noise sigma {}", self.noise_sigma)));
        }
        if !self.map_condition.is_finite() || self.map_condition < 1.0 {
            return Err(Error::Config(format!(
                "map condition must be ≥ 1, got {}",
                self.map_condition
            )));
        }
        Ok(())
    }
}

/// A generated benchmark: training data over source classes, a test set
/// covering source and target classes, and the full vocabulary (including
/// distractor entries).
#[derive(Debug, Clone)]
pub struct SynthBenchmark {
    pub train: LabeledFeatures,
    pub test: EvalSet,
    pub vocab: SemanticVocabulary,
}

/// Above this many vocabulary rows the pairwise separation check is
/// skipped: the angle floor scales as 1/K while random unit vectors
/// concentrate near orthogonality, so violations are vanishingly unlikely
/// and the quadratic check would dominate generation time.
const SEPARATION_CHECK_LIMIT: usize = 4096;
const PLACEMENT_TRIES: usize = 10_000;

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn angle_between(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot.clamp(-1.0, 1.0).acos()
}

/// Unit prototypes with every pairwise angle at or above the floor,
/// sampled by rejection. Errors when a slot cannot be filled, which means
/// the requested count does not fit in the dimension at the floor.
fn place_prototypes(rng: &mut ChaCha8Rng, count: usize, d: usize, floor: f64) -> Result<Vec<Vec<f64>>> {
    let check = count <= SEPARATION_CHECK_LIMIT;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let cand = unit_vector(rng, d);
            if !check || rows.iter().all(|r| angle_between(r, &cand) >= floor) {
                rows.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Numerical(format!(
                "could not place {count} prototypes in {d} dimensions with pairwise angle ≥ {floor:.4}"
            )));
        }
    }
    Ok(rows)
}

fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64)).collect()
}

/// Random map with prescribed singular values, as Q₁·diag(s)·Q₂ᵀ with the
/// orthogonal factors drawn from QR decompositions of Gaussian matrices.
fn random_map(rng: &mut ChaCha8Rng, p: usize, d: usize, condition: f64) -> Array2<f64> {
    let a: nalgebra::DMatrix<f64> = nalgebra::DMatrix::from_fn(p, p, |_, _| StandardNormal.sample(rng));
    let b: nalgebra::DMatrix<f64> = nalgebra::DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    let q1 = a.qr().q();
    let q2 = b.qr().q();
    let r = p.min(d);
    // The smallest singular value is fixed at 1 and the largest at
    // `condition`, so every semantic direction clears the noise floor and
    // raising the condition number stretches the strong directions further.
    // Keeping the weakest response at unit scale matters: the ε-tube of the
    // regression loss has a fixed width, and a map that attenuated some
    // directions below it would make those directions unlearnable for every
    // training variant alike.
    let sv = log_spaced(1.0, condition, r);
    Array2::from_shape_fn((p, d), |(i, j)| {
        (0..r).map(|t| q1[(i, t)] * sv[t] * q2[(j, t)]).sum()
    })
}

/// Generates the benchmark. The random stream is consumed in a fixed
/// order — class prototypes, distractor prototypes, the map, training
/// instances, then test instances (source classes before target classes) —
/// so any two runs of the same spec agree bitwise.
pub fn generate_benchmark(spec: &SynthSpec) -> Result<SynthBenchmark> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k_total = spec.n_source + spec.n_target + spec.n_distractor;
    let floor = (std::f64::consts::FRAC_PI_4).min(1.6 * std::f64::consts::PI / k_total as f64);

    let rows = place_prototypes(&mut rng, k_total, spec.d, floor)?;
    let map = random_map(&mut rng, spec.p, spec.d, spec.map_condition);

    let mut labels = Vec::with_capacity(k_total);
    labels.extend((0..spec.n_source).map(|i| format!("s{i}")));
    labels.extend((0..spec.n_target).map(|i| format!("t{i}")));
    labels.extend((0..spec.n_distractor).map(|i| format!("v{i}")));
    let mut vectors = Array2::zeros((k_total, spec.d));
    for (r, row) in rows.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            vectors[[r, c]] = v;
        }
    }
    let mut vocab = SemanticVocabulary::new(labels.clone(), vectors, true)?;
    vocab.assign_roles(&labels[..spec.n_source], &labels[spec.n_source..spec.n_source + spec.n_target])?;

    let draw_instance = |rng: &mut ChaCha8Rng, class_row: usize, out: &mut Array2<f64>, r: usize| {
        let proto = &rows[class_row];
        for k in 0..spec.p {
            let clean: f64 = (0..spec.d).map(|j| map[[k, j]] * proto[j]).sum();
            let noise: f64 = StandardNormal.sample(rng);
            out[[r, k]] = clean + spec.noise_sigma * noise;
        }
    };

    let n_train = spec.n_source * spec.instances_per_class;
    let mut train_x = Array2::zeros((n_train, spec.p));
    let mut train_y = Vec::with_capacity(n_train);
    let mut r = 0;
    for class in 0..spec.n_source {
        for _ in 0..spec.instances_per_class {
            draw_instance(&mut rng, class, &mut train_x, r);
            train_y.push(class);
            r += 1;
        }
    }

    let n_test = (spec.n_source + spec.n_target) * spec.instances_per_class;
    let mut test_x = Array2::zeros((n_test, spec.p));
    let mut test_y = Vec::with_capacity(n_test);
    let mut r = 0;
    for class_row in 0..spec.n_source + spec.n_target {
        for _ in 0..spec.instances_per_class {
            draw_instance(&mut rng, class_row, &mut test_x, r);
            test_y.push(class_row);
            r += 1;
        }
    }

    Ok(SynthBenchmark {
        train: LabeledFeatures::new(train_x, train_y, spec.n_source)?,
        test: EvalSet::new(test_x, test_y)?,
        vocab,
    })
}

/// The training objective written as plain scalar loops, term by term,
/// with no shared code with the analytic implementation. Slow and simple
/// on purpose.
pub fn oracle_objective(
    w: &Array2<f64>,
    data: &LabeledFeatures,
    vocab: &SemanticVocabulary,
    neighbors: &NeighborSets,
    weights: &ClassWeights,
    cfg: &LossConfig,
) -> f64 {
    let p = w.nrows();
    let d = w.ncols();
    let sq_dist = |v: &[f64], row: usize| -> f64 {
        let u = vocab.vector(row);
        let mut s = 0.0;
        for j in 0..d {
            let diff = v[j] - u[j];
            s += diff * diff;
        }
        s
    };

    let mut total = 0.0;
    for i in 0..data.len() {
        let z = data.label(i);
        let z_row = vocab.source_ids()[z];

        let mut v = vec![0.0; d];
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..p {
                s += w[[k, j]] * data.features()[[i, k]];
            }
            v[j] = s;
        }

        let tube = weights.weight(z) * cfg.epsilon;
        let mut data_term = 0.0;
        {
            let u = vocab.vector(z_row);
            for j in 0..d {
                let excess = (v[j] - u[j]).abs() - tube;
                if excess > 0.0 {
                    data_term += excess * excess;
                }
            }
        }

        let own = sq_dist(&v, z_row);
        let mut margins = 0.0;
        for pool in [&neighbors.open[z], &neighbors.within_source[z]] {
            let mut m = 0.0;
            for &a in pool.iter() {
                let t = cfg.margin_c + 0.5 * own - 0.5 * sq_dist(&v, a);
                if t > 0.0 {
                    m += 0.5 * t * t;
                }
            }
            if cfg.average_triplets && !pool.is_empty() {
                m /= pool.len() as f64;
            }
            margins += m;
        }

        total += cfg.alpha * data_term + (1.0 - cfg.alpha) * margins;
    }

    let mut reg = 0.0;
    for k in 0..p {
        for j in 0..d {
            reg += w[[k, j]] * w[[k, j]];
        }
    }
    total + cfg.lambda_reg * reg
}

const GRID_SHAPES: usize = 400;
const GRID_SCALES: usize = 400;

/// Maximum-likelihood Weibull parameters found by exhaustive search over a
/// dense log-spaced grid (shapes in [0.05, 50], scales spanning a decade
/// beyond the sample range). Returns (shape, scale) at the grid maximum.
pub fn oracle_weibull_grid(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Empty("weibull grid samples"));
    }
    if let Some(bad) = samples.iter().find(|x| !x.is_finite() || **x <= 0.0) {
        return Err(Error::InvalidInput(format!("weibull samples must be positive, got {bad}")));
    }
    let n = samples.len() as f64;
    let sum_ln: f64 = samples.iter().map(|x| x.ln()).sum();
    let mn = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let mx = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let shapes = log_spaced(0.05, 50.0, GRID_SHAPES);
    let scales = log_spaced(mn / 10.0, mx * 10.0, GRID_SCALES);

    let mut best = (f64::NEG_INFINITY, shapes[0], scales[0]);
    for &k in &shapes {
        let sum_pow: f64 = samples.iter().map(|x| x.powf(k)).sum();
        for &l in &scales {
            let ll = n * k.ln() - n * k * l.ln() + (k - 1.0) * sum_ln - sum_pow / l.powf(k);
            if ll > best.0 {
                best = (ll, k, l);
            }
        }
    }
    Ok((best.1, best.2))
}

/// Closed-form minimizer of ‖XW − U‖² + λ‖W‖², the objective that the
/// data-only loss (α = 1, ε = 0) reduces to. Rows of U are the source
/// prototypes of each instance's class. Solved by Cholesky; a singular
/// system (only possible at λ = 0) is an error.
pub fn ridge_fit(data: &LabeledFeatures, vocab: &SemanticVocabulary, lambda: f64) -> Result<Array2<f64>> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Config(format!("ridge lambda must be ≥ 0, got {lambda}")));
    }
    let n = data.len();
    let p = data.dim();
    let d = vocab.dim();
    let x = nalgebra::DMatrix::from_fn(n, p, |i, k| data.features()[[i, k]]);
    let mut u = nalgebra::DMatrix::zeros(n, d);
    for i in 0..n {
        let proto = vocab.source_prototype(data.label(i));
        for j in 0..d {
            u[(i, j)] = proto[j];
        }
    }
    let mut gram = x.transpose() * &x;
    for k in 0..p {
        gram[(k, k)] += lambda;
    }
    let rhs = x.transpose() * u;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Numerical("ridge system is not positive definite".into()))?;
    let w = chol.solve(&rhs);
    Ok(Array2::from_shape_fn((p, d), |(i, j)| w[(i, j)]))
}
