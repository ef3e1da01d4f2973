//! Metrics and the evaluation driver.
//!
//! Accuracy is synset-aware top-k over nearest-prototype rankings. The
//! generalized settings additionally report the seen/unseen split: top-1
//! accuracy on each side, their harmonic mean, the area under the
//! seen-unseen accuracy curve traced by a calibration offset γ that
//! handicaps seen candidates, the rate at which unseen instances escape
//! into seen predictions, and the openness of the label space.

use std::collections::{BTreeSet, HashMap, HashSet};

use ndarray::Array2;

use crate::embedding::{EmbeddingMatrix, SemanticVocabulary};
use crate::error::{Error, Result};
use crate::recognition::{batch_classify, CandidateSet, Prediction, Setting};

/// Test instances with ground truth given as vocabulary rows (unlike
/// training labels, which index source classes, evaluation truth may point
/// at target classes too).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    features: Array2<f64>,
    class_ids: Vec<usize>,
}

impl EvalSet {
    pub fn new(features: Array2<f64>, class_ids: Vec<usize>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::Empty("evaluation set"));
        }
        if features.nrows() != class_ids.len() {
            return Err(Error::Shape {
                context: "evaluation set",
                expected: format!("{} labels", features.nrows()),
                got: format!("{}", class_ids.len()),
            });
        }
        if let Some(bad) = features.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite feature value {bad}")));
        }
        Ok(EvalSet { features, class_ids })
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    /// Row subset, preserving order.
    fn subset(&self, idxs: &[usize]) -> EvalSet {
        let mut features = Array2::zeros((idxs.len(), self.dim()));
        let mut class_ids = Vec::with_capacity(idxs.len());
        for (r, &i) in idxs.iter().enumerate() {
            features.row_mut(r).assign(&self.features.row(i));
            class_ids.push(self.class_ids[i]);
        }
        EvalSet { features, class_ids }
    }
}

/// Fraction of instances whose synonym set intersects the top k ranked
/// candidates. Ground truth with no declared synset matches only itself.
pub fn topk_accuracy(
    predictions: &[Prediction],
    truth: &[usize],
    synsets: &HashMap<usize, Vec<usize>>,
    k: usize,
) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Empty("prediction list"));
    }
    if predictions.len() != truth.len() {
        return Err(Error::Shape {
            context: "topk_accuracy",
            expected: format!("{} truth labels", predictions.len()),
            got: format!("{}", truth.len()),
        });
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be ≥ 1".into()));
    }
    let mut hits = 0usize;
    for (pred, &t) in predictions.iter().zip(truth) {
        if k > pred.ranked.len() {
            return Err(Error::InvalidInput(format!(
                "top-{k} requested but only {} candidates were ranked",
                pred.ranked.len()
            )));
        }
        let hit = pred.ranked[..k].iter().any(|&(id, _)| match synsets.get(&t) {
            Some(members) => members.contains(&id),
            None => id == t,
        });
        if hit {
            hits += 1;
        }
    }
    Ok(hits as f64 / predictions.len() as f64)
}

/// Harmonic mean 2ab/(a+b) of two accuracies, which must share a scale:
/// both rates in [0, 1] or both percentages in (1, 100]. Either side zero
/// gives zero; mixed scales are an error rather than a silent unit bug.
pub fn harmonic_mean(a: f64, b: f64) -> Result<f64> {
    if !a.is_finite() || !b.is_finite() || a < 0.0 || b < 0.0 {
        return Err(Error::InvalidInput(format!(
            "harmonic mean needs finite non-negative inputs, got ({a}, {b})"
        )));
    }
    if a == 0.0 || b == 0.0 {
        return Ok(0.0);
    }
    let rate = a <= 1.0 && b <= 1.0;
    let percent = a > 1.0 && b > 1.0 && a <= 100.0 && b <= 100.0;
    if !rate && !percent {
        return Err(Error::InvalidInput(format!(
            "accuracies ({a}, {b}) mix scales; use both as rates in [0, 1] or both as percents in (1, 100]"
        )));
    }
    Ok(2.0 * a * b / (a + b))
}

/// How γ, the additive bonus a candidate gets for being a target class, is
/// swept when tracing the seen-unseen accuracy curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaPolicy {
    /// Visit exactly the critical γ values where some instance flips sides —
    /// the curve is a staircase, so this is exact.
    ExactCritical,
    /// Evaluate the curve on this many evenly spaced γ values spanning the
    /// critical range (the exact endpoints are always included).
    FixedGrid(usize),
}

/// Area under the seen-unseen accuracy curve.
///
/// Every instance gets its best seen candidate and best unseen candidate
/// (synset prototypes and the low-row tie rule as in classification). As γ
/// grows from −∞ to +∞ the calibrated decision −dist + γ·[unseen] moves
/// instances from the seen side to the unseen side at the critical value
/// γ = d_unseen − d_seen. Plotting top-1 accuracy over unseen-truth
/// instances (x) against seen-truth instances (y) along the sweep and
/// integrating by trapezoid gives the area; 1.0 means some γ separates the
/// two populations perfectly.
pub fn ausuc(
    w: &EmbeddingMatrix,
    test: &EvalSet,
    vocab: &SemanticVocabulary,
    policy: GammaPolicy,
) -> Result<f64> {
    let seen_cands = CandidateSet::for_setting(Setting::Supervised, vocab)?;
    let unseen_cands = CandidateSet::for_setting(Setting::Zsl, vocab)?;
    let seen_rows: HashSet<usize> = seen_cands.ids.iter().copied().collect();
    let unseen_rows: HashSet<usize> = unseen_cands.ids.iter().copied().collect();
    let mut n_seen = 0usize;
    let mut n_unseen = 0usize;
    for &t in test.class_ids() {
        if seen_rows.contains(&t) {
            n_seen += 1;
        } else if unseen_rows.contains(&t) {
            n_unseen += 1;
        } else {
            return Err(Error::InvalidInput(format!(
                "test instance labeled with row {t}, which is neither a source nor a target class"
            )));
        }
    }
    if n_seen == 0 || n_unseen == 0 {
        return Err(Error::InvalidInput(
            "the seen-unseen curve needs test instances on both sides".into(),
        ));
    }

    let best_seen = batch_classify(w, test.features(), vocab, &seen_cands, 1)?;
    let best_unseen = batch_classify(w, test.features(), vocab, &unseen_cands, 1)?;

    struct Event {
        /// Critical γ where this instance flips to the unseen side.
        t: f64,
        /// Whether the unseen side wins the tie exactly at γ = t.
        unseen_at_tie: bool,
        unseen_truth: bool,
        /// Correct while predicting on the seen side / the unseen side.
        cs: bool,
        cu: bool,
    }
    let correct = |id: usize, t: usize| match vocab.synsets().get(&t) {
        Some(members) => members.contains(&id),
        None => id == t,
    };
    let mut events: Vec<Event> = Vec::with_capacity(test.len());
    for i in 0..test.len() {
        let (sid, sdist) = best_seen[i].ranked[0];
        let (uid, udist) = best_unseen[i].ranked[0];
        let truth = test.class_ids()[i];
        events.push(Event {
            t: udist - sdist,
            unseen_at_tie: uid < sid,
            unseen_truth: unseen_rows.contains(&truth),
            cs: correct(sid, truth),
            cu: correct(uid, truth),
        });
    }

    // Accuracy deltas per flip, starting from the all-seen extreme.
    let mut acc_u: f64 = events
        .iter()
        .filter(|e| e.unseen_truth)
        .map(|e| if e.cs { 1.0 } else { 0.0 })
        .sum::<f64>()
        / n_unseen as f64;
    let mut acc_s: f64 = events
        .iter()
        .filter(|e| !e.unseen_truth)
        .map(|e| if e.cs { 1.0 } else { 0.0 })
        .sum::<f64>()
        / n_seen as f64;

    events.sort_by(|a, b| a.t.partial_cmp(&b.t).expect("finite distances"));
    let flip = |e: &Event, acc_u: &mut f64, acc_s: &mut f64| {
        let delta = (e.cu as i8 - e.cs as i8) as f64;
        if e.unseen_truth {
            *acc_u += delta / n_unseen as f64;
        } else {
            *acc_s += delta / n_seen as f64;
        }
    };

    let mut points: Vec<(f64, f64)> = vec![(acc_u, acc_s)];
    match policy {
        GammaPolicy::ExactCritical => {
            let mut i = 0;
            while i < events.len() {
                let t = events[i].t;
                while i < events.len() && events[i].t == t {
                    flip(&events[i], &mut acc_u, &mut acc_s);
                    i += 1;
                }
                points.push((acc_u, acc_s));
            }
        }
        GammaPolicy::FixedGrid(n) => {
            if n < 2 {
                return Err(Error::Config("gamma grid needs at least 2 points".into()));
            }
            let t_min = events.first().expect("nonempty").t;
            let t_max = events.last().expect("nonempty").t;
            let pad = 1e-6 * (t_max - t_min).abs().max(1.0);
            let (lo, hi) = (t_min - pad, t_max + pad);
            let mut next_event = 0;
            for g in 0..n {
                let gamma = lo + (hi - lo) * g as f64 / (n - 1) as f64;
                while next_event < events.len() {
                    let e = &events[next_event];
                    let flipped = e.t < gamma || (e.t == gamma && e.unseen_at_tie);
                    if !flipped {
                        break;
                    }
                    flip(e, &mut acc_u, &mut acc_s);
                    next_event += 1;
                }
                points.push((acc_u, acc_s));
            }
            // Close the curve at the all-unseen extreme.
            while next_event < events.len() {
                flip(&events[next_event], &mut acc_u, &mut acc_s);
                next_event += 1;
            }
            points.push((acc_u, acc_s));
        }
    }

    let mut area = 0.0;
    for pair in points.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        area += (x1 - x0) * 0.5 * (y0 + y1);
    }
    Ok(area)
}

/// Rate at which unseen-class instances are predicted as some seen class.
pub fn false_positive_rate(
    predictions: &[Prediction],
    truth: &[usize],
    seen: &HashSet<usize>,
) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::Shape {
            context: "false_positive_rate",
            expected: format!("{} truth labels", predictions.len()),
            got: format!("{}", truth.len()),
        });
    }
    let mut n_unseen = 0usize;
    let mut n_escaped = 0usize;
    for (pred, t) in predictions.iter().zip(truth) {
        if !seen.contains(t) {
            n_unseen += 1;
            if seen.contains(&pred.top1()) {
                n_escaped += 1;
            }
        }
    }
    if n_unseen == 0 {
        return Err(Error::Empty("unseen-class test instances"));
    }
    Ok(n_escaped as f64 / n_unseen as f64)
}

/// Openness of a label space: 1 − √(2·source / vocabulary). Zero when the
/// vocabulary is exactly twice the source set; undefined (an error) below
/// that.
pub fn openness(num_source: usize, vocab_size: usize) -> Result<f64> {
    if num_source == 0 {
        return Err(Error::InvalidInput("openness needs at least one source class".into()));
    }
    if vocab_size < 2 * num_source {
        return Err(Error::InvalidInput(format!(
            "openness undefined: vocabulary of {vocab_size} is smaller than twice the {num_source} source classes"
        )));
    }
    Ok(1.0 - (2.0 * num_source as f64 / vocab_size as f64).sqrt())
}

/// Metrics for one recognition setting. Accuracies are rates in [0, 1];
/// fields irrelevant to the setting (or whose preconditions failed, like
/// openness on a near-closed vocabulary) are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct SettingReport {
    pub setting: Setting,
    pub n_instances: usize,
    pub n_seen: usize,
    pub n_unseen: usize,
    /// (k, accuracy) in ascending k.
    pub top_k: Vec<(usize, f64)>,
    pub acc_seen: Option<f64>,
    pub acc_unseen: Option<f64>,
    pub harmonic_mean: Option<f64>,
    pub ausuc: Option<f64>,
    pub fpr: Option<f64>,
    pub openness: Option<f64>,
}

/// Reports for every requested setting, in request order.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub sections: Vec<SettingReport>,
}

impl EvalReport {
    /// Structured text: one `[setting.<name>]` section per report with
    /// `key = value` lines. Accuracies print as percentages with two
    /// decimals; curve areas and rates keep four, openness five.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.sections {
            out.push_str(&format!("[setting.{}]\n", s.setting.name()));
            out.push_str(&format!("instances = {}\n", s.n_instances));
            out.push_str(&format!("seen_instances = {}\n", s.n_seen));
            out.push_str(&format!("unseen_instances = {}\n", s.n_unseen));
            for &(k, acc) in &s.top_k {
                out.push_str(&format!("top{k} = {:.2}\n", acc * 100.0));
            }
            if let Some(a) = s.acc_seen {
                out.push_str(&format!("acc_seen = {:.2}\n", a * 100.0));
            }
            if let Some(a) = s.acc_unseen {
                out.push_str(&format!("acc_unseen = {:.2}\n", a * 100.0));
            }
            if let Some(h) = s.harmonic_mean {
                out.push_str(&format!("harmonic_mean = {:.2}\n", h * 100.0));
            }
            if let Some(a) = s.ausuc {
                out.push_str(&format!("ausuc = {a:.4}\n"));
            }
            if let Some(f) = s.fpr {
                out.push_str(&format!("fpr = {f:.4}\n"));
            }
            if let Some(o) = s.openness {
                out.push_str(&format!("openness = {o:.5}\n"));
            }
            out.push('\n');
        }
        out
    }
}

/// Runs every requested setting against the test set.
///
/// Instances participate in a setting when their ground truth is reachable
/// there: source-class instances in `supervised`, target-class instances in
/// `zsl`, and both in `gzsl`/`openset` (which rank against wider pools but
/// are scored on the same instances). A setting with no eligible instances,
/// or a k beyond the candidate count, is an error.
pub fn evaluate(
    w: &EmbeddingMatrix,
    test: &EvalSet,
    vocab: &SemanticVocabulary,
    settings: &[Setting],
    ks: &[usize],
    gamma: GammaPolicy,
) -> Result<EvalReport> {
    if settings.is_empty() {
        return Err(Error::Empty("settings list"));
    }
    if ks.is_empty() {
        return Err(Error::Empty("top-k list"));
    }
    if test.dim() != w.p() {
        return Err(Error::Shape {
            context: "evaluate",
            expected: format!("features of length {}", w.p()),
            got: format!("{}", test.dim()),
        });
    }
    let ks: Vec<usize> = {
        let uniq: BTreeSet<usize> = ks.iter().copied().collect();
        uniq.into_iter().collect()
    };
    let k_max = *ks.last().expect("nonempty");

    let source_rows: HashSet<usize> = vocab.source_ids().iter().copied().collect();
    let target_rows: HashSet<usize> = vocab.target_ids().iter().copied().collect();

    let mut sections = Vec::with_capacity(settings.len());
    for &setting in settings {
        let candidates = CandidateSet::for_setting(setting, vocab)?;
        let eligible: Vec<usize> = (0..test.len())
            .filter(|&i| {
                let t = test.class_ids()[i];
                match setting {
                    Setting::Supervised => source_rows.contains(&t),
                    Setting::Zsl => target_rows.contains(&t),
                    Setting::Gzsl | Setting::Openset => {
                        source_rows.contains(&t) || target_rows.contains(&t)
                    }
                }
            })
            .collect();
        if eligible.is_empty() {
            return Err(Error::Empty("test instances for the requested setting"));
        }
        if eligible.len() < test.len() && matches!(setting, Setting::Gzsl | Setting::Openset) {
            return Err(Error::InvalidInput(
                "test set contains instances labeled outside source ∪ target".into(),
            ));
        }
        let sub = test.subset(&eligible);
        let preds = batch_classify(w, sub.features(), vocab, &candidates, k_max)?;

        let mut top_k = Vec::with_capacity(ks.len());
        for &k in &ks {
            top_k.push((k, topk_accuracy(&preds, sub.class_ids(), vocab.synsets(), k)?));
        }

        let seen_idx: Vec<usize> = (0..sub.len())
            .filter(|&i| source_rows.contains(&sub.class_ids()[i]))
            .collect();
        let unseen_idx: Vec<usize> =
            (0..sub.len()).filter(|&i| !source_rows.contains(&sub.class_ids()[i])).collect();
        let n_seen = seen_idx.len();
        let n_unseen = unseen_idx.len();

        let mut report = SettingReport {
            setting,
            n_instances: sub.len(),
            n_seen,
            n_unseen,
            top_k,
            acc_seen: None,
            acc_unseen: None,
            harmonic_mean: None,
            ausuc: None,
            fpr: None,
            openness: None,
        };

        if matches!(setting, Setting::Gzsl | Setting::Openset) {
            let pick =
                |idx: &[usize]| -> Vec<Prediction> { idx.iter().map(|&i| preds[i].clone()).collect() };
            let truth_of = |idx: &[usize]| -> Vec<usize> {
                idx.iter().map(|&i| sub.class_ids()[i]).collect()
            };
            if n_seen > 0 {
                report.acc_seen = Some(topk_accuracy(
                    &pick(&seen_idx),
                    &truth_of(&seen_idx),
                    vocab.synsets(),
                    1,
                )?);
            }
            if n_unseen > 0 {
                report.acc_unseen = Some(topk_accuracy(
                    &pick(&unseen_idx),
                    &truth_of(&unseen_idx),
                    vocab.synsets(),
                    1,
                )?);
                report.fpr = Some(false_positive_rate(&preds, sub.class_ids(), &source_rows)?);
            }
            if let (Some(s), Some(u)) = (report.acc_seen, report.acc_unseen) {
                report.harmonic_mean = Some(harmonic_mean(u, s)?);
                report.ausuc = Some(ausuc(w, &sub, vocab, gamma)?);
            }
            let space = match setting {
                Setting::Gzsl => source_rows.len() + target_rows.len(),
                _ => vocab.len(),
            };
            if space >= 2 * source_rows.len() {
                report.openness = Some(openness(source_rows.len(), space)?);
            }
        }
        sections.push(report);
    }
    Ok(EvalReport { sections })
}
