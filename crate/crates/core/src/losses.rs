//! Training losses over score grids, each returning its value and the
//! gradient with respect to every score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{MatchConfig, MatchResult};
use crate::seqcore::{Grid, LabelGrid, ScoreGrid, StartSet};

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub gradient: Grid,
}

impl LossOutput {
    fn zero(frames: usize, behaviors: usize) -> Self {
        LossOutput {
            value: 0.0,
            gradient: Grid::zeros(frames, behaviors),
        }
    }
}

/// Weights of the matching loss.
///
/// `behavior` overrides the per-behavior weights; when `None` each behavior
/// gets one over its number of true starts in the sequence (1 when it has none).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub tp: f64,
    pub fp: f64,
    pub fn_: f64,
    #[serde(default)]
    pub behavior: Option<Vec<f64>>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            tp: 4.0,
            fp: 1.0,
            fn_: 2.0,
            behavior: None,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.tp, self.fp, self.fn_]
            .into_iter()
            .chain(self.behavior.iter().flatten().copied());
        for w in all {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidSpec(format!(
                    "loss weights must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }

    /// Weight of behavior `b` given the sequence's true starts.
    pub fn behavior_weight(&self, b: usize, labels: &StartSet) -> f64 {
        match &self.behavior {
            Some(w) => w[b],
            None => match labels.behavior(b).len() {
                0 => 1.0,
                n => 1.0 / n as f64,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WassersteinConfig {
    pub epsilon: f64,
}

impl Default for WassersteinConfig {
    fn default() -> Self {
        WassersteinConfig { epsilon: 1e-6 }
    }
}

/// Exponential step decay of the per-frame weight, floored at `floor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LambdaSchedule {
    pub initial: f64,
    pub floor: f64,
    pub decay: f64,
    pub period: usize,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        LambdaSchedule {
            initial: 0.99,
            floor: 0.5,
            decay: 0.9,
            period: 5,
        }
    }
}

impl LambdaSchedule {
    pub fn constant(lambda: f64) -> Self {
        LambdaSchedule {
            initial: lambda,
            floor: lambda,
            decay: 0.9,
            period: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.floor
            && self.floor <= self.initial
            && self.initial <= 1.0
            && self.decay > 0.0
            && self.decay < 1.0
            && self.period >= 1;
        if !ok {
            return Err(Error::InvalidSpec(format!(
                "invalid lambda schedule {self:?}"
            )));
        }
        Ok(())
    }
}

/// `max(floor, initial * decay^floor(epoch / period))`.
pub fn lambda_at_epoch(schedule: &LambdaSchedule, epoch: usize) -> f64 {
    let steps = (epoch / schedule.period.max(1)) as i32;
    (schedule.initial * schedule.decay.powi(steps)).max(schedule.floor)
}

fn check_shape(a: &Grid, b: &Grid) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "label grid is {:?} but score grid is {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `sum_{t,b} (y - y_hat)^2`, gradient `-2 (y - y_hat)`.
pub fn per_frame_loss(labels: &LabelGrid, scores: &ScoreGrid) -> Result<LossOutput> {
    check_shape(labels, scores)?;
    let (frames, behaviors) = scores.shape();
    let mut out = LossOutput::zero(frames, behaviors);
    for ((g, &y), &p) in out
        .gradient
        .values_mut()
        .iter_mut()
        .zip(labels.values())
        .zip(scores.values())
    {
        let d = y - p;
        out.value += d * d;
        *g = -2.0 * d;
    }
    Ok(out)
}

/// Matching loss for a matching held fixed.
///
/// Per behavior `b`, weighted by `C_b`: every false negative adds `C_fn`;
/// every matched prediction at frame `p`, distance `d` from its label, adds
/// `-(tau - d) * y_hat[p] * C_tp`; every unmatched prediction at `f` adds
/// `y_hat[f] * C_fp`.
pub fn matching_loss(
    labels: &StartSet,
    scores: &ScoreGrid,
    matches: &[MatchResult],
    weights: &LossWeights,
    cfg: &MatchConfig,
) -> Result<LossOutput> {
    weights.validate()?;
    let (frames, behaviors) = scores.shape();
    if labels.behaviors() != behaviors || matches.len() != behaviors {
        return Err(Error::invalid(format!(
            "matching loss needs {behaviors} behaviors, got {} label lists and {} matchings",
            labels.behaviors(),
            matches.len()
        )));
    }
    if let Some(w) = &weights.behavior {
        if w.len() != behaviors {
            return Err(Error::invalid(
                "one behavior weight per behavior is required",
            ));
        }
    }
    let tau = cfg.tau as f64;
    let mut out = LossOutput::zero(frames, behaviors);
    for (b, m) in matches.iter().enumerate() {
        let frames_used = m
            .pairs
            .iter()
            .map(|p| p.1)
            .chain(m.unmatched_preds.iter().copied());
        if let Some(f) = frames_used.clone().find(|&f| f >= frames) {
            return Err(Error::OutOfRange { frame: f, frames });
        }
        let cb = weights.behavior_weight(b, labels);
        let mut value = m.false_negatives() as f64 * weights.fn_;
        for &(s, p) in &m.pairs {
            let reward = (tau - s.abs_diff(p) as f64) * weights.tp;
            value -= reward * scores.get(p, b);
            out.gradient.add(p, b, -cb * reward);
        }
        for &f in &m.unmatched_preds {
            value += scores.get(f, b) * weights.fp;
            out.gradient.add(f, b, cb * weights.fp);
        }
        out.value += cb * value;
    }
    Ok(out)
}

/// Per-behavior normalization of labels and scores:
/// `y' = (y + eps) / sum(y + eps)`, `y_hat' = y_hat / sum(y_hat + eps)`.
///
/// A zero denominator (only possible with `eps = 0`) maps the column to zeros.
pub fn wasserstein_normalize(
    labels: &LabelGrid,
    scores: &ScoreGrid,
    cfg: &WassersteinConfig,
) -> Result<(Grid, Grid)> {
    check_shape(labels, scores)?;
    let (frames, behaviors) = scores.shape();
    let eps = cfg.epsilon;
    let mut y = Grid::zeros(frames, behaviors);
    let mut p = Grid::zeros(frames, behaviors);
    for b in 0..behaviors {
        let (label_total, score_total) = column_totals(labels, scores, b, eps);
        for t in 0..frames {
            if label_total > 0.0 {
                y.set(t, b, (labels.get(t, b) + eps) / label_total);
            }
            if score_total > 0.0 {
                p.set(t, b, scores.get(t, b) / score_total);
            }
        }
    }
    Ok((y, p))
}

fn column_totals(labels: &Grid, scores: &Grid, b: usize, eps: f64) -> (f64, f64) {
    (0..labels.frames()).fold((0.0, 0.0), |(l, s), t| {
        (l + labels.get(t, b) + eps, s + scores.get(t, b) + eps)
    })
}

/// Squared EMD between normalized label and score masses:
/// `sum_b sum_i (cumsum(y')_i - cumsum(y_hat')_i)^2`.
pub fn wasserstein_loss(
    labels: &LabelGrid,
    scores: &ScoreGrid,
    cfg: &WassersteinConfig,
) -> Result<LossOutput> {
    if !(cfg.epsilon >= 0.0) {
        return Err(Error::InvalidSpec(format!(
            "epsilon must be >= 0, got {}",
            cfg.epsilon
        )));
    }
    let (y, p) = wasserstein_normalize(labels, scores, cfg)?;
    let (frames, behaviors) = scores.shape();
    let mut out = LossOutput::zero(frames, behaviors);
    let mut cum = vec![0.0; frames];
    for b in 0..behaviors {
        let mut c = 0.0;
        for (t, slot) in cum.iter_mut().enumerate() {
            c += y.get(t, b) - p.get(t, b);
            *slot = c;
            out.value += c * c;
        }
        let (_, score_total) = column_totals(labels, scores, b, cfg.epsilon);
        if score_total == 0.0 {
            continue;
        }
        // dL/dp'_j = -2 sum_{i >= j} c_i, then through p'_j = s_j / S:
        // dL/ds_k = g_k / S - (sum_j g_j s_j) / S^2.
        let mut suffix = 0.0;
        let mut g = vec![0.0; frames];
        for t in (0..frames).rev() {
            suffix += cum[t];
            g[t] = -2.0 * suffix;
        }
        let weighted: f64 = (0..frames).map(|t| g[t] * scores.get(t, b)).sum();
        for (t, gt) in g.iter().enumerate() {
            out.gradient.set(
                t,
                b,
                gt / score_total - weighted / (score_total * score_total),
            );
        }
    }
    Ok(out)
}

/// Per-frame and structured parts of a combined loss.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedOutput {
    pub total: LossOutput,
    pub per_frame: f64,
    pub structured: f64,
    pub lambda: f64,
}

/// `lambda * per_frame + (1 - lambda) * structured`, value and gradient.
pub fn combine(
    per_frame: &LossOutput,
    structured: &LossOutput,
    lambda: f64,
) -> Result<CombinedOutput> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    let mut gradient = per_frame.gradient.clone();
    gradient.scale(lambda);
    gradient.add_scaled(&structured.gradient, 1.0 - lambda)?;
    Ok(CombinedOutput {
        total: LossOutput {
            value: lambda * per_frame.value + (1.0 - lambda) * structured.value,
            gradient,
        },
        per_frame: per_frame.value,
        structured: structured.value,
        lambda,
    })
}

/// Which structured loss accompanies the per-frame term.
#[derive(Debug, Clone, Copy)]
pub enum Structured<'a> {
    Matching {
        starts: &'a StartSet,
        matches: &'a [MatchResult],
        weights: &'a LossWeights,
        cfg: &'a MatchConfig,
    },
    Wasserstein(&'a WassersteinConfig),
}

/// Combined loss against blurred labels, with the structured part chosen by
/// `structured`.
pub fn combined_loss(
    labels: &LabelGrid,
    scores: &ScoreGrid,
    structured: Structured<'_>,
    lambda: f64,
) -> Result<CombinedOutput> {
    let per_frame = per_frame_loss(labels, scores)?;
    let structured = match structured {
        Structured::Matching {
            starts,
            matches,
            weights,
            cfg,
        } => matching_loss(starts, scores, matches, weights, cfg)?,
        Structured::Wasserstein(cfg) => wasserstein_loss(labels, scores, cfg)?,
    };
    combine(&per_frame, &structured, lambda)
}
