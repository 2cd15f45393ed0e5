//! Sequence data types, label blurring and start extraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense `frames x behaviors` matrix of reals, stored row-major
/// (`values[t * behaviors + b]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    frames: usize,
    behaviors: usize,
    values: Vec<f64>,
}

impl Grid {
    pub fn zeros(frames: usize, behaviors: usize) -> Self {
        Grid {
            frames,
            behaviors,
            values: vec![0.0; frames * behaviors],
        }
    }

    pub fn from_vec(frames: usize, behaviors: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != frames * behaviors {
            return Err(Error::invalid(format!(
                "grid of {frames}x{behaviors} needs {} values, got {}",
                frames * behaviors,
                values.len()
            )));
        }
        Ok(Grid {
            frames,
            behaviors,
            values,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn behaviors(&self) -> usize {
        self.behaviors
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.behaviors)
    }

    pub fn get(&self, frame: usize, behavior: usize) -> f64 {
        self.values[frame * self.behaviors + behavior]
    }

    pub fn set(&mut self, frame: usize, behavior: usize, value: f64) {
        self.values[frame * self.behaviors + behavior] = value;
    }

    pub fn add(&mut self, frame: usize, behavior: usize, value: f64) {
        self.values[frame * self.behaviors + behavior] += value;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Copies one behavior column out as a contiguous vector.
    pub fn column(&self, behavior: usize) -> Vec<f64> {
        (0..self.frames).map(|t| self.get(t, behavior)).collect()
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Grid, factor: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::invalid(format!(
                "grid shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        self.values
            .iter_mut()
            .zip(&other.values)
            .for_each(|(a, b)| *a += factor * b);
        Ok(())
    }

    fn check_unit_range(&self, what: &str) -> Result<()> {
        if self.frames == 0 || self.behaviors == 0 {
            return Err(Error::invalid(format!(
                "{what} must have positive dimensions"
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!(
                "{what} value {} at frame {}, behavior {} is outside [0, 1]",
                self.values[i],
                i / self.behaviors,
                i % self.behaviors
            )));
        }
        Ok(())
    }
}

/// Ground-truth start indicators, binary or blurred, all in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid(Grid);

impl LabelGrid {
    pub fn new(grid: Grid) -> Result<Self> {
        grid.check_unit_range("label grid")?;
        Ok(LabelGrid(grid))
    }

    pub fn from_vec(frames: usize, behaviors: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(Grid::from_vec(frames, behaviors, values)?)
    }

    pub fn is_binary(&self) -> bool {
        self.0.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }
}

impl std::ops::Deref for LabelGrid {
    type Target = Grid;
    fn deref(&self) -> &Grid {
        &self.0
    }
}

/// Classifier outputs, all in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrid(Grid);

impl ScoreGrid {
    pub fn new(grid: Grid) -> Result<Self> {
        grid.check_unit_range("score grid")?;
        Ok(ScoreGrid(grid))
    }

    pub fn from_vec(frames: usize, behaviors: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(Grid::from_vec(frames, behaviors, values)?)
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }
}

impl std::ops::Deref for ScoreGrid {
    type Target = Grid;
    fn deref(&self) -> &Grid {
        &self.0
    }
}

impl From<LabelGrid> for ScoreGrid {
    fn from(labels: LabelGrid) -> Self {
        ScoreGrid(labels.0)
    }
}

/// One action start, optionally with a detector confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Start {
    pub frame: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl Start {
    pub fn at(frame: usize) -> Self {
        Start {
            frame,
            confidence: None,
        }
    }

    pub fn scored(frame: usize, confidence: f64) -> Self {
        Start {
            frame,
            confidence: Some(confidence),
        }
    }
}

/// Per-behavior lists of start frames, strictly increasing within a behavior.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StartSet {
    starts: Vec<Vec<Start>>,
}

impl StartSet {
    pub fn new(starts: Vec<Vec<Start>>) -> Result<Self> {
        for (b, list) in starts.iter().enumerate() {
            for w in list.windows(2) {
                if w[1].frame <= w[0].frame {
                    return Err(Error::invalid(format!(
                        "behavior {b}: start frames must be strictly increasing ({} then {})",
                        w[0].frame, w[1].frame
                    )));
                }
            }
            if let Some(c) = list
                .iter()
                .filter_map(|s| s.confidence)
                .find(|c| !(0.0..=1.0).contains(c))
            {
                return Err(Error::invalid(format!(
                    "behavior {b}: confidence {c} outside [0, 1]"
                )));
            }
        }
        Ok(StartSet { starts })
    }

    pub fn empty(behaviors: usize) -> Self {
        StartSet {
            starts: vec![Vec::new(); behaviors],
        }
    }

    /// Builds an unscored set from plain frame lists.
    pub fn from_frames(frames: Vec<Vec<usize>>) -> Result<Self> {
        Self::new(
            frames
                .into_iter()
                .map(|l| l.into_iter().map(Start::at).collect())
                .collect(),
        )
    }

    pub fn behaviors(&self) -> usize {
        self.starts.len()
    }

    pub fn behavior(&self, b: usize) -> &[Start] {
        &self.starts[b]
    }

    pub fn frames(&self, b: usize) -> Vec<usize> {
        self.starts[b].iter().map(|s| s.frame).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[Start]> {
        self.starts.iter().map(Vec::as_slice)
    }

    pub fn total(&self) -> usize {
        self.starts.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn max_frame(&self) -> Option<usize> {
        self.starts
            .iter()
            .filter_map(|l| l.last().map(|s| s.frame))
            .max()
    }

    /// Drops confidences, keeping frames only.
    pub fn without_confidences(&self) -> StartSet {
        StartSet {
            starts: self
                .starts
                .iter()
                .map(|l| l.iter().map(|s| Start::at(s.frame)).collect())
                .collect(),
        }
    }

    pub fn into_inner(self) -> Vec<Vec<Start>> {
        self.starts
    }
}

/// Gaussian label blur parameters: odd window and standard deviation, in frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlurSpec {
    pub window: usize,
    pub sigma: f64,
}

impl Default for BlurSpec {
    fn default() -> Self {
        BlurSpec {
            window: 19,
            sigma: 2.0,
        }
    }
}

impl BlurSpec {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::InvalidSpec(format!(
                "blur window must be odd and >= 1, got {}",
                self.window
            )));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "blur sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// Peak-normalized kernel: `kernel[k + half] = exp(-k^2 / (2 sigma^2))`.
    pub fn kernel(&self) -> Vec<f64> {
        let half = (self.window / 2) as i64;
        (-half..=half)
            .map(|k| (-((k * k) as f64) / (2.0 * self.sigma * self.sigma)).exp())
            .collect()
    }
}

/// Threshold + non-maximal suppression parameters for turning scores into starts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractSpec {
    pub threshold: f64,
    pub nms_window: usize,
}

impl Default for ExtractSpec {
    fn default() -> Self {
        ExtractSpec {
            threshold: 0.5,
            nms_window: 10,
        }
    }
}

impl ExtractSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidSpec(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.nms_window == 0 {
            return Err(Error::InvalidSpec("nms_window must be >= 1".into()));
        }
        Ok(())
    }
}

/// Places a 1 at every listed `(frame, behavior)` pair.
pub fn grid_from_starts(starts: &StartSet, frames: usize, behaviors: usize) -> Result<LabelGrid> {
    if frames == 0 || behaviors == 0 {
        return Err(Error::invalid("grid dimensions must be positive"));
    }
    if starts.behaviors() > behaviors {
        return Err(Error::invalid(format!(
            "start set has {} behaviors, grid only {behaviors}",
            starts.behaviors()
        )));
    }
    let mut grid = Grid::zeros(frames, behaviors);
    for (b, list) in starts.iter().enumerate() {
        for s in list {
            if s.frame >= frames {
                return Err(Error::OutOfRange {
                    frame: s.frame,
                    frames,
                });
            }
            grid.set(s.frame, b, 1.0);
        }
    }
    Ok(LabelGrid(grid))
}

pub fn starts_from_grid(grid: &LabelGrid) -> Result<StartSet> {
    if !grid.is_binary() {
        return Err(Error::invalid("starts_from_grid needs a binary grid"));
    }
    let starts = (0..grid.behaviors())
        .map(|b| {
            (0..grid.frames())
                .filter(|&t| grid.get(t, b) == 1.0)
                .map(Start::at)
                .collect()
        })
        .collect();
    Ok(StartSet { starts })
}

/// Convolves each behavior column with the peak-normalized kernel of `spec`.
///
/// Overlapping bumps combine by pointwise maximum and the kernel is truncated
/// (not renormalized) at the sequence ends, so every original start keeps the
/// value 1 and all values stay in `[0, 1]`.
pub fn gaussian_blur_labels(grid: &LabelGrid, spec: &BlurSpec) -> Result<LabelGrid> {
    spec.validate()?;
    if !grid.is_binary() {
        return Err(Error::invalid("gaussian_blur_labels needs a binary grid"));
    }
    let kernel = spec.kernel();
    let half = spec.window / 2;
    let (frames, behaviors) = grid.shape();
    let mut out = Grid::zeros(frames, behaviors);
    for b in 0..behaviors {
        for s in (0..frames).filter(|&t| grid.get(t, b) == 1.0) {
            let lo = s.saturating_sub(half);
            let hi = (s + half).min(frames - 1);
            for t in lo..=hi {
                let k = kernel[t + half - s];
                if k > out.get(t, b) {
                    out.set(t, b, k);
                }
            }
        }
    }
    Ok(LabelGrid(out))
}

/// Thresholds and suppresses `scores` into a set of scored starts.
///
/// Frame `t` of behavior `b` is kept when `scores[t] >= threshold` and it is
/// the maximum of the window `[t - w, t + w]`: every earlier frame in the
/// window is strictly lower, every later frame is lower or equal (plateaus
/// resolve to their earliest frame), and at least one frame of the window is
/// strictly lower (a completely flat window has no peak).
pub fn extract_starts(scores: &ScoreGrid, spec: &ExtractSpec) -> Result<StartSet> {
    spec.validate()?;
    let (frames, behaviors) = scores.shape();
    let w = spec.nms_window;
    let starts = (0..behaviors)
        .map(|b| {
            let col = scores.column(b);
            (0..frames)
                .filter(|&t| is_peak(&col, t, w, spec.threshold))
                .map(|t| Start::scored(t, col[t]))
                .collect()
        })
        .collect();
    Ok(StartSet { starts })
}

fn is_peak(col: &[f64], t: usize, window: usize, threshold: f64) -> bool {
    let v = col[t];
    if v < threshold {
        return false;
    }
    let lo = t.saturating_sub(window);
    let hi = (t + window).min(col.len() - 1);
    if col[lo..t].iter().any(|&u| u >= v) {
        return false;
    }
    if col[t + 1..=hi].iter().any(|&u| u > v) {
        return false;
    }
    (lo..=hi).any(|u| col[u] < v)
}
