//! Seeded synthetic action-grammar sequences and the on-disk formats.
//!
//! A sequence walks the canonical behavior order (lift, hand-open, grab,
//! supinate, at-mouth, chew by default). After the retry stage a failed
//! attempt sends the walk back to the retry target, so grabs and hand-opens
//! repeat; each stage may also abort the rest of the sequence. Every visited
//! stage places a start, and the features are a sum of per-behavior
//! templates at the starts plus Gaussian noise.

mod io;

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqcore::{Start, StartSet};

pub use io::{
    features_payload_name, read_dataset, read_features, read_labels, read_manifest,
    read_scores_csv, write_dataset, write_features, write_labels, write_manifest, write_scores_csv,
    FeatureHeader, LabelFile, ScoreFile,
};

pub const DEFAULT_BEHAVIORS: [&str; 6] =
    ["lift", "hand-open", "grab", "supinate", "at-mouth", "chew"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrammarSpec {
    /// Behavior names in canonical order.
    pub behaviors: Vec<String>,
    /// Probability that the attempt at `retry_after` fails and the walk
    /// returns to `retry_to`.
    pub p_retry: f64,
    pub retry_after: usize,
    pub retry_to: usize,
    /// `abort[k]`: probability the sequence ends before stage `k`.
    pub abort: Vec<f64>,
    /// Frames between consecutive starts ~ Normal(mean, std), at least `min_gap`.
    pub gap_mean: f64,
    pub gap_std: f64,
    pub min_gap: usize,
    /// First start is uniform in `[lead_in.0, lead_in.1]`.
    pub lead_in: (usize, usize),
}

impl Default for GrammarSpec {
    fn default() -> Self {
        GrammarSpec {
            behaviors: DEFAULT_BEHAVIORS.iter().map(|s| s.to_string()).collect(),
            p_retry: 0.3,
            retry_after: 2,
            retry_to: 1,
            abort: vec![0.0, 0.0, 0.0, 0.1, 0.15, 0.25],
            gap_mean: 30.0,
            gap_std: 8.0,
            min_gap: 12,
            lead_in: (20, 80),
        }
    }
}

impl GrammarSpec {
    pub fn validate(&self) -> Result<()> {
        let b = self.behaviors.len();
        if b == 0 {
            return Err(Error::Config("grammar needs at least one behavior".into()));
        }
        if self.abort.len() != b {
            return Err(Error::Config(format!(
                "abort needs {b} probabilities, got {}",
                self.abort.len()
            )));
        }
        let probs = std::iter::once(self.p_retry).chain(self.abort.iter().copied());
        if probs.clone().any(|p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Config(
                "grammar probabilities must lie in [0, 1]".into(),
            ));
        }
        if self.retry_after >= b || self.retry_to > self.retry_after {
            return Err(Error::Config(
                "retry must go back from a valid stage".into(),
            ));
        }
        if self.min_gap == 0 || !(self.gap_std >= 0.0) || self.lead_in.0 > self.lead_in.1 {
            return Err(Error::Config(
                "gaps must be >= 1 frame and the lead-in range ordered".into(),
            ));
        }
        Ok(())
    }

    /// Shortest sequence length that always fits one pass of the grammar.
    pub fn minimal_frames(&self) -> usize {
        self.lead_in.1 + (self.behaviors.len() - 1) * self.min_gap + 1
    }
}

/// Feature template of one behavior: a smooth box starting at the start frame,
/// written with an amplitude to each listed channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub channels: Vec<(usize, f64)>,
    /// Bout length in frames.
    pub duration: usize,
    /// Rise/fall time constant in frames.
    pub edge: f64,
}

impl Template {
    /// Support of the template relative to the start frame.
    pub fn support(&self) -> (i64, i64) {
        let reach = (6.0 * self.edge).ceil() as i64;
        (-reach, self.duration as i64 + reach)
    }

    /// Unit-amplitude template value `offset` frames after the start.
    pub fn value(&self, offset: i64) -> f64 {
        let (lo, hi) = self.support();
        if offset < lo || offset > hi {
            return 0.0;
        }
        let x = offset as f64 + 0.5;
        let rise = 1.0 / (1.0 + (-x / self.edge).exp());
        let fall = 1.0 / (1.0 + (-(x - self.duration as f64) / self.edge).exp());
        rise - fall
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub sequences: usize,
    /// The last `test_sequences` records form the test split.
    pub test_sequences: usize,
    pub frames: usize,
    pub feature_dim: usize,
    pub fps: f64,
    /// Standard deviation of the additive feature noise.
    pub noise: f64,
    /// One template per behavior.
    pub templates: Vec<Template>,
    /// Annotation jitter: labels sit uniformly within `+-jitter` frames of the
    /// template onset.
    pub jitter: usize,
    /// Mean number of unlabeled look-alike events per sequence.
    pub decoys: f64,
    /// Amplitude factor of decoy events.
    pub decoy_amplitude: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig::for_behaviors(DEFAULT_BEHAVIORS.len())
    }
}

impl SyntheticConfig {
    /// Defaults for `behaviors` behaviors: one private channel per behavior
    /// plus a shared channel for each pair of neighbouring behaviors.
    pub fn for_behaviors(behaviors: usize) -> Self {
        let shared = behaviors.div_ceil(2);
        let durations = [12, 8, 10, 14, 20, 40];
        let templates = (0..behaviors)
            .map(|b| Template {
                channels: vec![(b, 1.0), (behaviors + b / 2, 0.6)],
                duration: durations[b % durations.len()],
                edge: 1.5,
            })
            .collect();
        SyntheticConfig {
            sequences: 250,
            test_sequences: 50,
            frames: 500,
            feature_dim: behaviors + shared,
            fps: 500.0,
            noise: 0.5,
            templates,
            jitter: 3,
            decoys: 4.0,
            decoy_amplitude: 0.85,
            seed: 0,
        }
    }

    pub fn validate(&self, grammar: &GrammarSpec) -> Result<()> {
        if self.sequences == 0 || self.frames == 0 || self.feature_dim == 0 {
            return Err(Error::Config(
                "sequences, frames and feature_dim must be >= 1".into(),
            ));
        }
        if self.test_sequences > self.sequences {
            return Err(Error::Config("test_sequences exceeds sequences".into()));
        }
        if !(self.noise >= 0.0) || !(self.fps > 0.0) || !(self.decoys >= 0.0) {
            return Err(Error::Config(
                "noise and decoys must be >= 0, fps > 0".into(),
            ));
        }
        if self.templates.len() != grammar.behaviors.len() {
            return Err(Error::Config(format!(
                "{} templates for {} behaviors",
                self.templates.len(),
                grammar.behaviors.len()
            )));
        }
        if self
            .templates
            .iter()
            .flat_map(|t| &t.channels)
            .any(|&(c, _)| c >= self.feature_dim)
        {
            return Err(Error::Config("template channel outside feature_dim".into()));
        }
        if self.templates.iter().any(|t| !(t.edge > 0.0)) {
            return Err(Error::Config("template edge must be positive".into()));
        }
        if 2 * self.jitter >= grammar.min_gap {
            return Err(Error::Config(
                "jitter must stay below half the minimum gap".into(),
            ));
        }
        if self.frames < grammar.minimal_frames() {
            return Err(Error::Config(format!(
                "{} frames cannot hold a minimal sequence of {} frames",
                self.frames,
                grammar.minimal_frames()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub id: String,
    pub seed: u64,
    pub fps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    /// `T x d`, row-major.
    pub features: Array2<f32>,
    pub labels: StartSet,
    pub meta: SequenceMeta,
}

/// Walks the grammar and returns the template onsets per behavior. A stage
/// that repeats itself waits an extra `2 * jitter` frames so the jittered
/// labels still keep the minimum gap.
fn sample_onsets(
    grammar: &GrammarSpec,
    frames: usize,
    jitter: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let b = grammar.behaviors.len();
    let mut onsets = vec![Vec::new(); b];
    let gap = Normal::new(grammar.gap_mean, grammar.gap_std).expect("validated gap distribution");
    let mut t = rng.random_range(grammar.lead_in.0..=grammar.lead_in.1);
    let mut stage = 0;
    while stage < b && t < frames {
        if rng.random::<f64>() < grammar.abort[stage] {
            break;
        }
        onsets[stage].push(t);
        let next = if stage == grammar.retry_after && rng.random::<f64>() < grammar.p_retry {
            grammar.retry_to
        } else {
            stage + 1
        };
        let floor = grammar.min_gap + if next == stage { 2 * jitter } else { 0 };
        stage = next;
        let g: f64 = gap.sample(rng);
        t += (g.round().max(0.0) as usize).max(floor);
    }
    onsets
}

fn add_template(features: &mut Array2<f64>, template: &Template, onset: usize, scale: f64) {
    let frames = features.nrows() as i64;
    let (lo, hi) = template.support();
    let first = (onset as i64 + lo).max(0);
    let last = (onset as i64 + hi).min(frames - 1);
    for t in first..=last {
        let v = template.value(t - onset as i64) * scale;
        for &(c, amp) in &template.channels {
            features[[t as usize, c]] += amp * v;
        }
    }
}

/// One sequence, fully determined by `seed`.
pub fn generate_sequence(
    grammar: &GrammarSpec,
    cfg: &SyntheticConfig,
    seed: u64,
    id: &str,
) -> Result<SequenceRecord> {
    grammar.validate()?;
    cfg.validate(grammar)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let onsets = sample_onsets(grammar, cfg.frames, cfg.jitter, &mut rng);

    let mut features = Array2::<f64>::zeros((cfg.frames, cfg.feature_dim));
    for (b, list) in onsets.iter().enumerate() {
        for &s in list {
            add_template(&mut features, &cfg.templates[b], s, 1.0);
        }
    }
    if cfg.decoys > 0.0 {
        let count: f64 = Poisson::new(cfg.decoys)
            .expect("positive rate")
            .sample(&mut rng);
        for _ in 0..count as usize {
            let b = rng.random_range(0..cfg.templates.len());
            let t = rng.random_range(0..cfg.frames);
            add_template(&mut features, &cfg.templates[b], t, cfg.decoy_amplitude);
        }
    }
    if cfg.noise > 0.0 {
        let noise = Normal::new(0.0, cfg.noise).expect("validated noise");
        features.mapv_inplace(|v| v + noise.sample(&mut rng));
    }

    let j = cfg.jitter as i64;
    let labels = onsets
        .iter()
        .map(|list| {
            list.iter()
                .map(|&s| {
                    let shift = if j > 0 { rng.random_range(-j..=j) } else { 0 };
                    Start::at((s as i64 + shift).clamp(0, cfg.frames as i64 - 1) as usize)
                })
                .collect()
        })
        .collect();

    Ok(SequenceRecord {
        features: features.mapv(|v| v as f32),
        labels: StartSet::new(labels)?,
        meta: SequenceMeta {
            id: id.to_string(),
            seed,
            fps: cfg.fps,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub split: Split,
    pub labels: String,
    pub features: String,
    pub label_counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub master_seed: u64,
    pub fps: f64,
    pub frames: usize,
    pub feature_dim: usize,
    pub behaviors: Vec<String>,
    pub sequences: Vec<ManifestEntry>,
    pub label_totals: BTreeMap<String, usize>,
    /// Mean starts per sequence for each behavior.
    pub label_means: BTreeMap<String, f64>,
}

impl Manifest {
    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.sequences.iter().filter(move |e| e.split == split)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<SequenceRecord>,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&SequenceRecord> {
        self.records
            .iter()
            .zip(&self.manifest.sequences)
            .filter(|(_, e)| e.split == split)
            .map(|(r, _)| r)
            .collect()
    }
}

pub fn sequence_id(index: usize) -> String {
    format!("seq_{index:05}")
}

/// Derives per-sequence seeds from the master seed, in order.
pub fn sequence_seeds(master: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..count).map(|_| rng.next_u64()).collect()
}

pub fn generate_dataset(grammar: &GrammarSpec, cfg: &SyntheticConfig) -> Result<Dataset> {
    grammar.validate()?;
    cfg.validate(grammar)?;
    let seeds = sequence_seeds(cfg.seed, cfg.sequences);
    let records = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| generate_sequence(grammar, cfg, seed, &sequence_id(i)))
        .collect::<Result<Vec<_>>>()?;

    let mut totals: BTreeMap<String, usize> =
        grammar.behaviors.iter().map(|b| (b.clone(), 0)).collect();
    let first_test = cfg.sequences - cfg.test_sequences;
    let sequences = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let label_counts: BTreeMap<String, usize> = grammar
                .behaviors
                .iter()
                .enumerate()
                .map(|(b, name)| (name.clone(), r.labels.behavior(b).len()))
                .collect();
            for (name, n) in &label_counts {
                *totals.get_mut(name).unwrap() += n;
            }
            ManifestEntry {
                id: r.meta.id.clone(),
                seed: r.meta.seed,
                split: if i < first_test {
                    Split::Train
                } else {
                    Split::Test
                },
                labels: format!("{}.labels.json", r.meta.id),
                features: format!("{}.features.json", r.meta.id),
                label_counts,
            }
        })
        .collect();
    let label_means = totals
        .iter()
        .map(|(k, &v)| (k.clone(), v as f64 / cfg.sequences as f64))
        .collect();
    Ok(Dataset {
        records,
        manifest: Manifest {
            version: 1,
            master_seed: cfg.seed,
            fps: cfg.fps,
            frames: cfg.frames,
            feature_dim: cfg.feature_dim,
            behaviors: grammar.behaviors.clone(),
            sequences,
            label_totals: totals,
            label_means,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn defaults() -> (GrammarSpec, SyntheticConfig) {
        let g = GrammarSpec::default();
        let c = SyntheticConfig::for_behaviors(g.behaviors.len());
        (g, c)
    }

    #[test]
    fn same_seed_same_record() {
        let (g, c) = defaults();
        let a = generate_sequence(&g, &c, 42, "a").unwrap();
        let b = generate_sequence(&g, &c, 42, "a").unwrap();
        assert_eq!(a, b);
        let other = generate_sequence(&g, &c, 43, "a").unwrap();
        assert_ne!(a.features, other.features);
    }

    #[test]
    fn too_short_sequence_is_a_config_error() {
        let (g, mut c) = defaults();
        c.frames = g.minimal_frames() - 1;
        assert!(matches!(
            generate_sequence(&g, &c, 1, "x"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn noiseless_features_are_template_sums() {
        let (g, mut c) = defaults();
        c.noise = 0.0;
        c.jitter = 0;
        c.decoys = 0.0;
        let r = generate_sequence(&g, &c, 5, "x").unwrap();
        let mut expected = Array2::<f64>::zeros((c.frames, c.feature_dim));
        for b in 0..g.behaviors.len() {
            let tpl = &c.templates[b];
            for s in r.labels.behavior(b) {
                for t in 0..c.frames {
                    let v = tpl.value(t as i64 - s.frame as i64);
                    for &(ch, amp) in &tpl.channels {
                        expected[[t, ch]] += amp * v;
                    }
                }
            }
        }
        assert_eq!(r.features, expected.mapv(|v| v as f32));
    }

    #[test]
    fn manifest_totals_match_records() {
        let (g, mut c) = defaults();
        c.sequences = 20;
        c.test_sequences = 5;
        let d = generate_dataset(&g, &c).unwrap();
        let total: usize = d.records.iter().map(|r| r.labels.total()).sum();
        assert_eq!(d.manifest.label_totals.values().sum::<usize>(), total);
        assert_eq!(d.split(Split::Test).len(), 5);
        assert_eq!(d.split(Split::Train).len(), 15);
        assert_eq!(generate_dataset(&g, &c).unwrap(), d);
    }

    #[test]
    fn grammar_validation() {
        let mut g = GrammarSpec::default();
        g.p_retry = 1.5;
        assert!(g.validate().is_err());
        let mut g = GrammarSpec::default();
        g.abort.pop();
        assert!(g.validate().is_err());
    }
}
