//! Evaluation of predicted starts.
//!
//! Two protocols coexist. Precision/recall/F1 count true positives with the
//! optimal tau-constrained matching of [`crate::matching`]. The point-level AP
//! family ranks predictions by confidence and greedily assigns each one to the
//! nearest still-unmatched true start within the offset.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{optimal_matching, MatchConfig};
use crate::seqcore::StartSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OffsetUnit {
    Seconds,
    Frames,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub tau: usize,
    pub fps: f64,
    pub offsets: Vec<f64>,
    pub offset_unit: OffsetUnit,
    /// Count `|i - j| == tau` as a match (default: strict `<`).
    #[serde(default)]
    pub tau_inclusive: bool,
    /// Count `|i - j| == offset` as a hit for p-AP (default: inclusive).
    #[serde(default = "default_true")]
    pub offset_inclusive: bool,
    /// Recall depths for the AP-depth table, fractions in (0, 1].
    #[serde(default = "default_depths")]
    pub recall_depths: Vec<f64>,
    /// Tau values for the F1-vs-tau sweep.
    #[serde(default = "default_sweep")]
    pub tau_sweep: Vec<usize>,
}

fn default_true() -> bool {
    true
}

fn default_depths() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

fn default_sweep() -> Vec<usize> {
    (1..=40).collect()
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tau: 10,
            fps: 500.0,
            offsets: (1..=10).map(f64::from).collect(),
            offset_unit: OffsetUnit::Seconds,
            tau_inclusive: false,
            offset_inclusive: true,
            recall_depths: default_depths(),
            tau_sweep: default_sweep(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 {
            return Err(Error::Config("tau must be >= 1".into()));
        }
        if !(self.fps > 0.0) {
            return Err(Error::Config("fps must be positive".into()));
        }
        if self.offsets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("offsets must be strictly increasing".into()));
        }
        if self.offsets.iter().any(|o| !(*o >= 0.0)) {
            return Err(Error::Config("offsets must be non-negative".into()));
        }
        if self.recall_depths.iter().any(|x| !(*x > 0.0 && *x <= 1.0)) {
            return Err(Error::Config("recall depths must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Offset converted to frames (`round(seconds * fps)` for seconds).
    pub fn offset_frames(&self, offset: f64) -> usize {
        match self.offset_unit {
            OffsetUnit::Seconds => (offset * self.fps).round() as usize,
            OffsetUnit::Frames => offset.round() as usize,
        }
    }

    fn match_config(&self, tau: usize) -> MatchConfig {
        MatchConfig {
            tau: if self.tau_inclusive { tau + 1 } else { tau },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Tau-matched counts per behavior plus their micro aggregate.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TauCounts {
    pub per_behavior: Vec<ConfusionCounts>,
    pub aggregate: ConfusionCounts,
}

impl TauCounts {
    fn merge(&mut self, other: &TauCounts) {
        if self.per_behavior.is_empty() {
            self.per_behavior = vec![ConfusionCounts::default(); other.per_behavior.len()];
        }
        for (a, b) in self.per_behavior.iter_mut().zip(&other.per_behavior) {
            *a += *b;
        }
        self.aggregate += other.aggregate;
    }
}

/// Precision/recall/F1 of one sequence under optimal tau matching.
pub fn tau_f1(labels: &StartSet, preds: &StartSet, cfg: &EvalConfig) -> Result<TauCounts> {
    tau_counts(labels, preds, cfg, cfg.tau)
}

fn tau_counts(
    labels: &StartSet,
    preds: &StartSet,
    cfg: &EvalConfig,
    tau: usize,
) -> Result<TauCounts> {
    let matches = optimal_matching(labels, preds, &cfg.match_config(tau))?;
    let mut out = TauCounts::default();
    for m in matches {
        let c = ConfusionCounts {
            tp: m.true_positives(),
            fp: m.false_positives(),
            fn_: m.false_negatives(),
        };
        out.aggregate += c;
        out.per_behavior.push(c);
    }
    Ok(out)
}

/// Counts summed over several `(labels, predictions)` sequences.
pub fn tau_f1_dataset(
    pairs: &[(&StartSet, &StartSet)],
    cfg: &EvalConfig,
    tau: usize,
) -> Result<TauCounts> {
    let mut total = TauCounts::default();
    for (l, p) in pairs {
        total.merge(&tau_counts(l, p, cfg, tau)?);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ranked {
    confidence: f64,
    seq: usize,
    frame: usize,
}

/// Greedy confidence-ranked outcome list for one behavior: `true` for each
/// rank that hits an unmatched true start, plus the number of true starts.
fn ranked_hits(
    pairs: &[(&StartSet, &StartSet)],
    behavior: usize,
    offset: usize,
    inclusive: bool,
) -> Result<(Vec<bool>, usize)> {
    let mut ranked = Vec::new();
    let mut positives = 0;
    for (seq, (labels, preds)) in pairs.iter().enumerate() {
        if labels.behaviors() != preds.behaviors() || behavior >= labels.behaviors() {
            return Err(Error::invalid(format!(
                "sequence {seq}: behavior counts disagree"
            )));
        }
        positives += labels.behavior(behavior).len();
        for s in preds.behavior(behavior) {
            let confidence = s.confidence.ok_or_else(|| {
                Error::invalid(format!(
                    "sequence {seq}: prediction at frame {} has no confidence",
                    s.frame
                ))
            })?;
            ranked.push(Ranked {
                confidence,
                seq,
                frame: s.frame,
            });
        }
    }
    ranked.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.frame.cmp(&b.frame))
            .then(a.seq.cmp(&b.seq))
    });

    let mut taken: Vec<Vec<bool>> = pairs
        .iter()
        .map(|(l, _)| vec![false; l.behavior(behavior).len()])
        .collect();
    let hits = ranked
        .iter()
        .map(|r| {
            let truth = pairs[r.seq].0.behavior(behavior);
            let best = truth
                .iter()
                .enumerate()
                .filter(|(i, _)| !taken[r.seq][*i])
                .map(|(i, s)| (s.frame.abs_diff(r.frame), i))
                .filter(|&(d, _)| if inclusive { d <= offset } else { d < offset })
                .min();
            match best {
                Some((_, i)) => {
                    taken[r.seq][i] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    Ok((hits, positives))
}

/// `(recall, precision)` after each rank.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<(f64, f64)>,
    /// Indices into `points` of the ranks that were true positives.
    pub tp_ranks: Vec<usize>,
}

fn curve_from_hits(hits: &[bool], positives: usize) -> PrCurve {
    let mut curve = PrCurve::default();
    let mut tp = 0;
    for (k, &hit) in hits.iter().enumerate() {
        if hit {
            tp += 1;
            curve.tp_ranks.push(k);
        }
        curve
            .points
            .push((ratio(tp, positives), tp as f64 / (k + 1) as f64));
    }
    curve
}

impl PrCurve {
    /// `sum over TP ranks of precision * delta recall`.
    pub fn average_precision(&self, positives: usize) -> f64 {
        if positives == 0 || self.tp_ranks.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.tp_ranks.iter().map(|&k| self.points[k].1).sum();
        sum / positives as f64
    }

    /// Mean precision over TP-rank points with recall <= `depth`; 0 without such points.
    pub fn depth_precision(&self, depth: f64) -> f64 {
        let within: Vec<f64> = self
            .tp_ranks
            .iter()
            .map(|&k| self.points[k])
            .filter(|(r, _)| *r <= depth + 1e-12)
            .map(|(_, p)| p)
            .collect();
        if within.is_empty() {
            0.0
        } else {
            within.iter().sum::<f64>() / within.len() as f64
        }
    }
}

/// Per-behavior P-R curve and number of true starts over a set of sequences.
pub fn pr_curves(
    pairs: &[(&StartSet, &StartSet)],
    offset: usize,
    inclusive: bool,
) -> Result<Vec<(PrCurve, usize)>> {
    let behaviors = pairs.first().map_or(0, |(l, _)| l.behaviors());
    (0..behaviors)
        .map(|b| {
            let (hits, positives) = ranked_hits(pairs, b, offset, inclusive)?;
            Ok((curve_from_hits(&hits, positives), positives))
        })
        .collect()
}

/// Point-level AP per behavior for one sequence (inclusive offset).
pub fn point_ap(labels: &StartSet, preds: &StartSet, offset: usize) -> Result<Vec<f64>> {
    point_ap_dataset(&[(labels, preds)], offset, true)
}

/// Point-level AP per behavior with predictions pooled over all sequences.
pub fn point_ap_dataset(
    pairs: &[(&StartSet, &StartSet)],
    offset: usize,
    inclusive: bool,
) -> Result<Vec<f64>> {
    Ok(pr_curves(pairs, offset, inclusive)?
        .iter()
        .map(|(c, n)| c.average_precision(*n))
        .collect())
}

/// Mean of `values` over behaviors that have at least one true start.
fn class_mean(values: &[f64], positives: &[usize]) -> f64 {
    let kept: Vec<f64> = values
        .iter()
        .zip(positives)
        .filter(|(_, &n)| n > 0)
        .map(|(v, _)| *v)
        .collect();
    if kept.is_empty() {
        0.0
    } else {
        kept.iter().sum::<f64>() / kept.len() as f64
    }
}

/// p-mAP at every configured offset: `(offset, offset in frames, p-mAP)`.
/// Behaviors without any true start are left out of the class mean.
pub fn p_map_at_offsets(
    pairs: &[(&StartSet, &StartSet)],
    cfg: &EvalConfig,
) -> Result<Vec<(f64, usize, f64)>> {
    cfg.validate()?;
    cfg.offsets
        .iter()
        .map(|&o| {
            let frames = cfg.offset_frames(o);
            let curves = pr_curves(pairs, frames, cfg.offset_inclusive)?;
            let aps: Vec<f64> = curves
                .iter()
                .map(|(c, n)| c.average_precision(*n))
                .collect();
            let pos: Vec<usize> = curves.iter().map(|(_, n)| *n).collect();
            Ok((o, frames, class_mean(&aps, &pos)))
        })
        .collect()
}

/// Mean precision on the P-R curve between 0 and `depth` recall, averaged
/// over behaviors with true starts.
pub fn ap_depth_at_recall(
    pairs: &[(&StartSet, &StartSet)],
    offset: usize,
    depth: f64,
    inclusive: bool,
) -> Result<f64> {
    if !(depth > 0.0 && depth <= 1.0) {
        return Err(Error::invalid(format!(
            "recall depth must lie in (0, 1], got {depth}"
        )));
    }
    let curves = pr_curves(pairs, offset, inclusive)?;
    let values: Vec<f64> = curves
        .iter()
        .map(|(c, _)| c.depth_precision(depth))
        .collect();
    let pos: Vec<usize> = curves.iter().map(|(_, n)| *n).collect();
    Ok(class_mean(&values, &pos))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrfRow {
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<ConfusionCounts> for PrfRow {
    fn from(counts: ConfusionCounts) -> Self {
        PrfRow {
            counts,
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorReport {
    pub name: String,
    #[serde(flatten)]
    pub prf: PrfRow,
    /// p-AP at each configured offset.
    pub p_ap: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetValue {
    pub offset: f64,
    pub offset_frames: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthValue {
    pub recall_depth: f64,
    pub offset: f64,
    pub offset_frames: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequences: usize,
    pub tau: usize,
    pub per_behavior: Vec<BehaviorReport>,
    pub aggregate: PrfRow,
    pub p_map: Vec<OffsetValue>,
    pub ap_depth: Vec<DepthValue>,
    /// `(tau, aggregate F1)` over the configured sweep.
    pub f1_vs_tau: Vec<(usize, f64)>,
    /// Per-behavior P-R curves at the largest configured offset.
    pub pr_curves: Vec<PrCurve>,
}

/// Full report over `(labels, predictions)` pairs.
pub fn evaluate(
    pairs: &[(&StartSet, &StartSet)],
    behavior_names: &[String],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let behaviors = behavior_names.len();
    if let Some(i) = pairs
        .iter()
        .position(|(l, p)| l.behaviors() != behaviors || p.behaviors() != behaviors)
    {
        return Err(Error::invalid(format!(
            "sequence {i} does not have {behaviors} behaviors"
        )));
    }
    let counts = tau_f1_dataset(pairs, cfg, cfg.tau)?;
    let per_behavior_counts = if counts.per_behavior.is_empty() {
        vec![ConfusionCounts::default(); behaviors]
    } else {
        counts.per_behavior.clone()
    };

    let mut p_ap = vec![Vec::with_capacity(cfg.offsets.len()); behaviors];
    let mut p_map = Vec::new();
    let mut last_curves = Vec::new();
    for &o in &cfg.offsets {
        let frames = cfg.offset_frames(o);
        let curves = pr_curves(pairs, frames, cfg.offset_inclusive)?;
        let aps: Vec<f64> = curves
            .iter()
            .map(|(c, n)| c.average_precision(*n))
            .collect();
        let pos: Vec<usize> = curves.iter().map(|(_, n)| *n).collect();
        for (b, ap) in aps.iter().enumerate() {
            p_ap[b].push(*ap);
        }
        p_map.push(OffsetValue {
            offset: o,
            offset_frames: frames,
            value: class_mean(&aps, &pos),
        });
        last_curves = curves;
    }

    let mut ap_depth = Vec::new();
    for &o in &cfg.offsets {
        for &x in &cfg.recall_depths {
            let frames = cfg.offset_frames(o);
            ap_depth.push(DepthValue {
                recall_depth: x,
                offset: o,
                offset_frames: frames,
                value: ap_depth_at_recall(pairs, frames, x, cfg.offset_inclusive)?,
            });
        }
    }

    let f1_vs_tau = cfg
        .tau_sweep
        .iter()
        .map(|&t| Ok((t, tau_f1_dataset(pairs, cfg, t)?.aggregate.f1())))
        .collect::<Result<Vec<_>>>()?;

    Ok(EvalReport {
        sequences: pairs.len(),
        tau: cfg.tau,
        per_behavior: behavior_names
            .iter()
            .zip(per_behavior_counts)
            .zip(p_ap)
            .map(|((name, c), p_ap)| BehaviorReport {
                name: name.clone(),
                prf: c.into(),
                p_ap,
            })
            .collect(),
        aggregate: counts.aggregate.into(),
        p_map,
        ap_depth,
        f1_vs_tau,
        pr_curves: last_curves.into_iter().map(|(c, _)| c).collect(),
    })
}

pub fn write_report_json(report: &EvalReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::invalid(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_report_json(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Flat CSV: `behavior,metric,param,value`, one row per behavior per metric.
/// Aggregate rows use the behavior name `ALL`.
pub fn write_report_csv<W: Write>(report: &EvalReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["behavior", "metric", "param", "value"])
        .map_err(csv_err)?;
    let tau = report.tau.to_string();
    let prf_rows = |name: &str, r: &PrfRow| {
        vec![
            (name.to_string(), "tp", tau.clone(), r.counts.tp as f64),
            (name.to_string(), "fp", tau.clone(), r.counts.fp as f64),
            (name.to_string(), "fn", tau.clone(), r.counts.fn_ as f64),
            (name.to_string(), "precision", tau.clone(), r.precision),
            (name.to_string(), "recall", tau.clone(), r.recall),
            (name.to_string(), "f1", tau.clone(), r.f1),
        ]
    };
    let mut rows = Vec::new();
    for b in &report.per_behavior {
        rows.extend(prf_rows(&b.name, &b.prf));
        for (o, ap) in report.p_map.iter().zip(&b.p_ap) {
            rows.push((b.name.clone(), "p_ap", o.offset.to_string(), *ap));
        }
    }
    rows.extend(prf_rows("ALL", &report.aggregate));
    for o in &report.p_map {
        rows.push(("ALL".into(), "p_map", o.offset.to_string(), o.value));
    }
    for d in &report.ap_depth {
        rows.push((
            "ALL".into(),
            "ap_depth",
            format!("{}@{}", d.recall_depth, d.offset),
            d.value,
        ));
    }
    for (t, f) in &report.f1_vs_tau {
        rows.push(("ALL".into(), "f1_vs_tau", t.to_string(), *f));
    }
    for (name, metric, param, value) in rows {
        w.write_record([
            name.as_str(),
            metric,
            param.as_str(),
            value.to_string().as_str(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::invalid(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(e.to_string())
}
