use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    adam_step, backward_grads, forward_scores, update_running_stats, AdamConfig, AdamState,
    NormMode, ScorerConfig, ScorerParams,
};
use crate::error::{Error, Result};
use crate::losses::{
    combined_loss, lambda_at_epoch, per_frame_loss, CombinedOutput, LambdaSchedule, LossWeights,
    Structured, WassersteinConfig,
};
use crate::matching::{optimal_matching, MatchConfig};
use crate::seqcore::{
    extract_starts, gaussian_blur_labels, grid_from_starts, BlurSpec, ExtractSpec, LabelGrid,
    ScoreGrid, StartSet,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Matching,
    Wasserstein,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Matching => "matching",
            LossKind::Wasserstein => "wasserstein",
        }
    }

    /// Default per-frame weight schedule: decaying for the matching loss,
    /// constant 0.5 for Wasserstein, and the pure per-frame loss for MSE.
    pub fn default_schedule(&self) -> LambdaSchedule {
        match self {
            LossKind::Mse => LambdaSchedule::constant(1.0),
            LossKind::Matching => LambdaSchedule::default(),
            LossKind::Wasserstein => LambdaSchedule::constant(0.5),
        }
    }

    /// ADAM step size tuned per loss on a pilot dataset; the structured
    /// losses train best with a larger step than the per-frame loss.
    pub fn default_learning_rate(&self) -> f64 {
        match self {
            LossKind::Mse => 1e-3,
            LossKind::Matching | LossKind::Wasserstein => 3e-3,
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "matching" => Ok(LossKind::Matching),
            "wasserstein" => Ok(LossKind::Wasserstein),
            other => Err(Error::Config(format!(
                "unknown loss '{other}', expected mse, matching or wasserstein"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss: LossKind,
    pub lambda: LambdaSchedule,
    pub blur: BlurSpec,
    pub extract: ExtractSpec,
    pub matching: MatchConfig,
    pub weights: LossWeights,
    pub wasserstein: WassersteinConfig,
    pub hidden: usize,
    pub layers: usize,
    pub bidirectional: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::new(LossKind::Matching)
    }
}

impl TrainConfig {
    pub fn new(loss: LossKind) -> Self {
        TrainConfig {
            epochs: 400,
            batch_size: 10,
            adam: AdamConfig {
                learning_rate: loss.default_learning_rate(),
                ..AdamConfig::default()
            },
            loss,
            lambda: loss.default_schedule(),
            blur: BlurSpec::default(),
            extract: ExtractSpec::default(),
            matching: MatchConfig::default(),
            weights: LossWeights::default(),
            wasserstein: WassersteinConfig::default(),
            hidden: 32,
            layers: 2,
            bidirectional: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be >= 1".into()));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        self.lambda.validate()?;
        self.blur.validate()?;
        self.extract.validate()?;
        self.matching.validate()?;
        self.weights.validate()
    }

    /// Per-frame weight used at `epoch`.
    pub fn lambda_at(&self, epoch: usize) -> f64 {
        match self.loss {
            LossKind::Mse => 1.0,
            _ => lambda_at_epoch(&self.lambda, epoch),
        }
    }
}

/// Features and true starts of one training sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSequence {
    pub features: Array2<f64>,
    pub labels: StartSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lambda: f64,
    /// Mean combined loss per sequence.
    pub loss: f64,
    pub per_frame: f64,
    pub structured: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ScorerParams,
    pub log: Vec<EpochLog>,
}

/// Combined loss for one sequence. For the matching loss, starts are
/// extracted from the current scores and matched first; the matching is then
/// held fixed for the gradient.
fn sequence_loss(
    cfg: &TrainConfig,
    labels: &StartSet,
    blurred: &LabelGrid,
    scores: &ScoreGrid,
    lambda: f64,
) -> Result<CombinedOutput> {
    match cfg.loss {
        LossKind::Mse => {
            let f = per_frame_loss(blurred, scores)?;
            Ok(CombinedOutput {
                per_frame: f.value,
                structured: 0.0,
                lambda: 1.0,
                total: f,
            })
        }
        LossKind::Matching => {
            let preds = extract_starts(scores, &cfg.extract)?;
            let matches = optimal_matching(labels, &preds, &cfg.matching)?;
            let structured = Structured::Matching {
                starts: labels,
                matches: &matches,
                weights: &cfg.weights,
                cfg: &cfg.matching,
            };
            combined_loss(blurred, scores, structured, lambda)
        }
        LossKind::Wasserstein => combined_loss(
            blurred,
            scores,
            Structured::Wasserstein(&cfg.wasserstein),
            lambda,
        ),
    }
}

/// Trains a scorer with ADAM, alternating matching selection and gradient
/// steps when the matching loss is used.
pub fn train(data: &[TrainSequence], cfg: &TrainConfig) -> Result<TrainOutput> {
    if data.is_empty() {
        return Err(Error::invalid("training needs at least one sequence"));
    }
    cfg.validate()?;
    let input_dim = data[0].features.ncols();
    let behaviors = data[0].labels.behaviors();
    let blurred = data
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if s.features.ncols() != input_dim || s.labels.behaviors() != behaviors {
                return Err(Error::invalid(format!(
                    "sequence {i} has inconsistent dimensions"
                )));
            }
            let grid = grid_from_starts(&s.labels, s.features.nrows(), behaviors)?;
            gaussian_blur_labels(&grid, &cfg.blur)
        })
        .collect::<Result<Vec<_>>>()?;

    let scorer = ScorerConfig {
        input_dim,
        hidden: cfg.hidden,
        layers: cfg.layers,
        bidirectional: cfg.bidirectional,
        behaviors,
    };
    let mut params = ScorerParams::init(scorer, cfg.seed)?;
    let mut adam = AdamState::new(cfg.adam, &params.weights);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lambda = cfg.lambda_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss, mut per_frame, mut structured) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let views: Vec<ArrayView2<'_, f64>> =
                batch.iter().map(|&i| data[i].features.view()).collect();
            let cache = forward_scores(&params, &views, NormMode::Batch)?;
            let outputs = batch
                .par_iter()
                .zip(cache.scores().par_iter())
                .map(|(&i, scores)| {
                    sequence_loss(cfg, &data[i].labels, &blurred[i], scores, lambda)
                })
                .collect::<Result<Vec<_>>>()?;
            for o in &outputs {
                loss += o.total.value;
                per_frame += o.per_frame;
                structured += o.structured;
            }
            let grads: Vec<_> = outputs.into_iter().map(|o| o.total.gradient).collect();
            let weight_grads = backward_grads(&params, &cache, &grads)?;
            update_running_stats(&mut params, &cache);
            adam_step(&mut adam, &mut params, &weight_grads)?;
        }
        if !params.weights.is_finite() {
            return Err(Error::InvalidState(format!(
                "non-finite weights after epoch {epoch}"
            )));
        }
        let n = data.len() as f64;
        log.push(EpochLog {
            epoch,
            lambda,
            loss: loss / n,
            per_frame: per_frame / n,
            structured: structured / n,
        });
    }
    Ok(TrainOutput { params, log })
}
