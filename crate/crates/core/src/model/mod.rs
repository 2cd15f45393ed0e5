//! Bidirectional LSTM start scorer.
//!
//! Per frame: linear projection, ReLU, feature normalization, a stack of
//! (bi)directional LSTM layers, a linear output layer and a sigmoid per
//! behavior. Forward and backward passes run a whole batch of sequences in
//! lockstep: each direction pads the batch to its longest sequence, and the
//! reverse direction reverses every sequence individually, so padding always
//! trails the real frames and never influences them.

mod adam;
mod checkpoint;
mod kernels;
mod train;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqcore::{extract_starts, ExtractSpec, Grid, ScoreGrid, StartSet};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use train::{train, EpochLog, LossKind, TrainConfig, TrainOutput, TrainSequence};

const NORM_EPS: f64 = 1e-5;
const NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub bidirectional: bool,
    pub behaviors: usize,
}

impl ScorerConfig {
    pub fn new(input_dim: usize, behaviors: usize) -> Self {
        ScorerConfig {
            input_dim,
            hidden: 32,
            layers: 2,
            bidirectional: true,
            behaviors,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.layers == 0 || self.behaviors == 0 {
            return Err(Error::InvalidSpec(format!(
                "scorer dimensions must all be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.hidden
        } else {
            self.hidden * self.directions()
        }
    }

    fn top_width(&self) -> usize {
        self.hidden * self.directions()
    }
}

/// One LSTM direction. Gate blocks along the `4H` axis are `[input, forget, cell, output]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights {
    pub w_x: Array2<f64>,
    pub w_h: Array2<f64>,
    pub b: Array1<f64>,
}

/// Every trainable array of the scorer. Also used for gradients and ADAM moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub proj_w: Array2<f64>,
    pub proj_b: Array1<f64>,
    pub norm_scale: Array1<f64>,
    pub norm_shift: Array1<f64>,
    /// Indexed `layer * directions + direction`; direction 1 runs backwards in time.
    pub cells: Vec<LstmWeights>,
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
}

impl Weights {
    pub fn zeros(cfg: &ScorerConfig) -> Self {
        let h = cfg.hidden;
        let cells = (0..cfg.layers)
            .flat_map(|l| (0..cfg.directions()).map(move |_| l))
            .map(|l| LstmWeights {
                w_x: Array2::zeros((cfg.layer_input(l), 4 * h)),
                w_h: Array2::zeros((h, 4 * h)),
                b: Array1::zeros(4 * h),
            })
            .collect();
        Weights {
            proj_w: Array2::zeros((cfg.input_dim, h)),
            proj_b: Array1::zeros(h),
            norm_scale: Array1::zeros(h),
            norm_shift: Array1::zeros(h),
            cells,
            out_w: Array2::zeros((cfg.top_width(), cfg.behaviors)),
            out_b: Array1::zeros(cfg.behaviors),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    /// Names of the tensors returned by [`Weights::tensors`], in the same order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec![
            "proj.w".to_string(),
            "proj.b".into(),
            "norm.scale".into(),
            "norm.shift".into(),
        ];
        for i in 0..self.cells.len() {
            for part in ["w_x", "w_h", "b"] {
                names.push(format!("lstm.{i}.{part}"));
            }
        }
        names.push("out.w".into());
        names.push("out.b".into());
        names
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = vec![
            self.proj_w.shape().to_vec(),
            self.proj_b.shape().to_vec(),
            self.norm_scale.shape().to_vec(),
            self.norm_shift.shape().to_vec(),
        ];
        for c in &self.cells {
            shapes.push(c.w_x.shape().to_vec());
            shapes.push(c.w_h.shape().to_vec());
            shapes.push(c.b.shape().to_vec());
        }
        shapes.push(self.out_w.shape().to_vec());
        shapes.push(self.out_b.shape().to_vec());
        shapes
    }

    /// Flat row-major views of every tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![
            self.proj_w.as_slice().unwrap(),
            self.proj_b.as_slice().unwrap(),
            self.norm_scale.as_slice().unwrap(),
            self.norm_shift.as_slice().unwrap(),
        ];
        for c in &self.cells {
            v.push(c.w_x.as_slice().unwrap());
            v.push(c.w_h.as_slice().unwrap());
            v.push(c.b.as_slice().unwrap());
        }
        v.push(self.out_w.as_slice().unwrap());
        v.push(self.out_b.as_slice().unwrap());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![
            self.proj_w.as_slice_mut().unwrap(),
            self.proj_b.as_slice_mut().unwrap(),
            self.norm_scale.as_slice_mut().unwrap(),
            self.norm_shift.as_slice_mut().unwrap(),
        ];
        for c in &mut self.cells {
            v.push(c.w_x.as_slice_mut().unwrap());
            v.push(c.w_h.as_slice_mut().unwrap());
            v.push(c.b.as_slice_mut().unwrap());
        }
        v.push(self.out_w.as_slice_mut().unwrap());
        v.push(self.out_b.as_slice_mut().unwrap());
        v
    }

    pub fn same_shape(&self, other: &Weights) -> bool {
        self.shapes() == other.shapes()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += other`, elementwise.
    pub fn accumulate(&mut self, other: &Weights) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Per-feature statistics used by the normalization layer at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    pub config: ScorerConfig,
    pub weights: Weights,
    pub running: NormStats,
    /// Seed the weights were initialised from.
    pub seed: u64,
    version: u64,
}

impl ScorerParams {
    pub fn init(config: ScorerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Weights::zeros(&config);
        let h = config.hidden;
        let glorot = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        let bound = glorot(config.input_dim, h);
        w.proj_w.mapv_inplace(|_| rng.random_range(-bound..bound));
        w.norm_scale.fill(1.0);
        let lstm_bound = 1.0 / (h as f64).sqrt();
        for cell in &mut w.cells {
            cell.w_x
                .mapv_inplace(|_| rng.random_range(-lstm_bound..lstm_bound));
            cell.w_h
                .mapv_inplace(|_| rng.random_range(-lstm_bound..lstm_bound));
            cell.b.slice_mut(s![h..2 * h]).fill(1.0);
        }
        let bound = glorot(config.top_width(), config.behaviors);
        w.out_w.mapv_inplace(|_| rng.random_range(-bound..bound));
        Ok(ScorerParams {
            config,
            weights: w,
            running: NormStats {
                mean: Array1::zeros(h),
                var: Array1::ones(h),
            },
            seed,
            version: 0,
        })
    }

    pub fn from_parts(
        config: ScorerConfig,
        weights: Weights,
        running: NormStats,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if !weights.same_shape(&Weights::zeros(&config)) {
            return Err(Error::invalid(
                "weight shapes do not match the scorer config",
            ));
        }
        if running.mean.len() != config.hidden || running.var.len() != config.hidden {
            return Err(Error::invalid(
                "normalization statistics have the wrong length",
            ));
        }
        Ok(ScorerParams {
            config,
            weights,
            running,
            seed,
            version: 0,
        })
    }

    /// Marks the parameters as modified, invalidating earlier forward caches.
    pub fn touch(&mut self) {
        self.version += 1;
    }

    pub fn version(&self) -> u64 {
        self.version
    }
}

/// Statistics used by the normalization layer in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics of the current batch's frames (training).
    Batch,
    /// Stored running averages (inference).
    Running,
}

#[derive(Debug, Clone)]
struct DirCache {
    reversed: bool,
    steps: usize,
    /// Padded layer input, row `k * nb + s`.
    input: Array2<f64>,
    /// Post-activation gates `[i, f, g, o]`.
    gates: Array2<f64>,
    cell: Array2<f64>,
    tanh_cell: Array2<f64>,
    hidden: Array2<f64>,
}

/// Activations of one forward pass, consumed by [`backward_grads`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    mode: NormMode,
    lengths: Vec<usize>,
    offsets: Vec<usize>,
    inputs: Array2<f64>,
    pre_relu: Array2<f64>,
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
    batch_mean: Array1<f64>,
    batch_var: Array1<f64>,
    layer_inputs: Vec<Array2<f64>>,
    dirs: Vec<DirCache>,
    top: Array2<f64>,
    scores: Vec<ScoreGrid>,
}

impl ForwardCache {
    pub fn scores(&self) -> &[ScoreGrid] {
        &self.scores
    }

    pub fn into_scores(self) -> Vec<ScoreGrid> {
        self.scores
    }

    /// Per-feature mean and (biased) variance of the batch, as used in `Batch` mode.
    pub fn batch_stats(&self) -> (&Array1<f64>, &Array1<f64>) {
        (&self.batch_mean, &self.batch_var)
    }

    fn rows(&self, seq: usize) -> std::ops::Range<usize> {
        self.offsets[seq]..self.offsets[seq] + self.lengths[seq]
    }
}

fn add_row(m: &mut Array2<f64>, row: &Array1<f64>) {
    m.rows_mut().into_iter().for_each(|mut r| r += row);
}

struct Layout<'a> {
    lengths: &'a [usize],
    offsets: &'a [usize],
    steps: usize,
}

impl Layout<'_> {
    /// Stacked row of sequence `s` at direction-local step `k`, if valid.
    fn stacked_row(&self, s: usize, k: usize, reversed: bool) -> Option<usize> {
        let len = self.lengths[s];
        (k < len).then(|| self.offsets[s] + if reversed { len - 1 - k } else { k })
    }

    /// Step-major copy of `stacked`: row `k * nb + s` holds step `k` of sequence `s`,
    /// zero past the end of shorter sequences.
    fn pad(&self, stacked: ArrayView2<'_, f64>, reversed: bool) -> Array2<f64> {
        let nb = self.lengths.len();
        let width = stacked.ncols();
        let mut out = Vec::with_capacity(self.steps * nb * width);
        for k in 0..self.steps {
            for s in 0..nb {
                match self.stacked_row(s, k, reversed) {
                    Some(r) => out.extend(stacked.row(r).iter().copied()),
                    None => out.resize(out.len() + width, 0.0),
                }
            }
        }
        Array2::from_shape_vec((self.steps * nb, width), out).expect("padded shape")
    }

    /// Inverse of `pad`; `add` accumulates instead of overwriting.
    fn unpad_into(
        &self,
        padded: &Array2<f64>,
        reversed: bool,
        mut out: ndarray::ArrayViewMut2<'_, f64>,
        add: bool,
    ) {
        let nb = self.lengths.len();
        for k in 0..self.steps {
            for s in 0..nb {
                if let Some(r) = self.stacked_row(s, k, reversed) {
                    let src = padded.row(k * nb + s);
                    if add {
                        out.row_mut(r).zip_mut_with(&src, |o, &v| *o += v);
                    } else {
                        out.row_mut(r).assign(&src);
                    }
                }
            }
        }
    }
}

fn run_direction(
    cell: &LstmWeights,
    layer_input: &Array2<f64>,
    layout: &Layout<'_>,
    reversed: bool,
) -> DirCache {
    let nb = layout.lengths.len();
    let h = cell.w_h.nrows();
    let input = layout.pad(layer_input.view(), reversed);
    let mut gates = input.dot(&cell.w_x);
    add_row(&mut gates, &cell.b);
    let rows = layout.steps * nb;
    let w_h = cell.w_h.as_slice().expect("standard layout");
    let zeros = vec![0.0; h];
    let g_all = gates.as_slice_mut().expect("standard layout");
    let mut c_all = Vec::with_capacity(rows * h);
    let mut t_all = Vec::with_capacity(rows * h);
    let mut h_all = Vec::with_capacity(rows * h);
    let (mut c_new, mut t_new, mut h_new) = (vec![0.0; h], vec![0.0; h], vec![0.0; h]);

    for r in 0..rows {
        let (h_prev, c_prev) = if r >= nb {
            (
                &h_all[(r - nb) * h..(r - nb + 1) * h],
                &c_all[(r - nb) * h..(r - nb + 1) * h],
            )
        } else {
            (&zeros[..], &zeros[..])
        };
        let g = &mut g_all[r * 4 * h..(r + 1) * 4 * h];
        kernels::vec_mat_acc(h_prev, w_h, g);
        let (ifg, rest) = g.split_at_mut(2 * h);
        let (cg, og) = rest.split_at_mut(h);
        kernels::sigmoid_inplace(ifg);
        kernels::tanh_inplace(cg);
        kernels::sigmoid_inplace(og);
        for j in 0..h {
            c_new[j] = ifg[h + j] * c_prev[j] + ifg[j] * cg[j];
        }
        t_new.copy_from_slice(&c_new);
        kernels::tanh_inplace(&mut t_new);
        for j in 0..h {
            h_new[j] = og[j] * t_new[j];
        }
        c_all.extend_from_slice(&c_new);
        t_all.extend_from_slice(&t_new);
        h_all.extend_from_slice(&h_new);
    }
    let cell_state = Array2::from_shape_vec((rows, h), c_all).expect("cell shape");
    let tanh_cell = Array2::from_shape_vec((rows, h), t_all).expect("cell shape");
    let hidden = Array2::from_shape_vec((rows, h), h_all).expect("cell shape");
    DirCache {
        reversed,
        steps: layout.steps,
        input,
        gates,
        cell: cell_state,
        tanh_cell,
        hidden,
    }
}

/// Backpropagates through one direction. `d_hidden` is padded like the cache.
/// Returns the padded gradient with respect to the layer input.
fn backward_direction(
    cell: &LstmWeights,
    cache: &DirCache,
    d_hidden: &Array2<f64>,
    nb: usize,
    grads: &mut LstmWeights,
) -> Array2<f64> {
    let h = cell.w_h.nrows();
    let rows = cache.steps * nb;
    let mut d_pre = Array2::<f64>::zeros((rows, 4 * h));
    let mut dh_next = Array2::<f64>::zeros((nb, h));
    let mut dc_next = Array2::<f64>::zeros((nb, h));
    let w_ht = cell.w_h.t().as_standard_layout().into_owned();
    let w_ht = w_ht.as_slice().expect("standard layout");

    let gates = cache.gates.as_slice().expect("standard layout");
    let cells = cache.cell.as_slice().expect("standard layout");
    let tanh_cells = cache.tanh_cell.as_slice().expect("standard layout");
    let d_hidden = d_hidden.as_slice().expect("standard layout");
    let d_all = d_pre.as_slice_mut().expect("standard layout");
    let dh_next = dh_next.as_slice_mut().expect("standard layout");
    let dc_next = dc_next.as_slice_mut().expect("standard layout");
    let zeros = vec![0.0; h];

    for r in (0..rows).rev() {
        let sq = r % nb;
        let g = &gates[r * 4 * h..(r + 1) * 4 * h];
        let tc = &tanh_cells[r * h..(r + 1) * h];
        let c_prev = if r >= nb {
            &cells[(r - nb) * h..(r - nb + 1) * h]
        } else {
            &zeros[..]
        };
        let dh_in = &d_hidden[r * h..(r + 1) * h];
        let dhn = &mut dh_next[sq * h..(sq + 1) * h];
        let dcn = &mut dc_next[sq * h..(sq + 1) * h];
        let d = &mut d_all[r * 4 * h..(r + 1) * 4 * h];
        for j in 0..h {
            let (i_gate, f_gate, c_gate, o_gate) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
            let dh = dh_in[j] + dhn[j];
            let d_o = dh * tc[j];
            let dc = dh * o_gate * (1.0 - tc[j] * tc[j]) + dcn[j];
            d[j] = dc * c_gate * i_gate * (1.0 - i_gate);
            d[h + j] = dc * c_prev[j] * f_gate * (1.0 - f_gate);
            d[2 * h + j] = dc * i_gate * (1.0 - c_gate * c_gate);
            d[3 * h + j] = d_o * o_gate * (1.0 - o_gate);
            dcn[j] = dc * f_gate;
        }
        dhn.fill(0.0);
        kernels::vec_mat_acc(d, w_ht, dhn);
    }

    if rows > nb {
        let prev = cache.hidden.slice(s![0..rows - nb, ..]);
        let d_later = d_pre.slice(s![nb..rows, ..]);
        general_mat_mul(1.0, &prev.t(), &d_later, 1.0, &mut grads.w_h);
    }
    general_mat_mul(1.0, &cache.input.t(), &d_pre, 1.0, &mut grads.w_x);
    grads.b += &d_pre.sum_axis(Axis(0));
    d_pre.dot(&cell.w_x.t())
}

/// Runs the scorer over a batch of `T_i x d` feature matrices.
pub fn forward_scores(
    params: &ScorerParams,
    features: &[ArrayView2<'_, f64>],
    mode: NormMode,
) -> Result<ForwardCache> {
    let cfg = &params.config;
    let w = &params.weights;
    if features.is_empty() {
        return Err(Error::invalid("forward pass needs at least one sequence"));
    }
    for (i, f) in features.iter().enumerate() {
        if f.ncols() != cfg.input_dim {
            return Err(Error::invalid(format!(
                "sequence {i} has {} features, scorer expects {}",
                f.ncols(),
                cfg.input_dim
            )));
        }
        if f.nrows() == 0 {
            return Err(Error::invalid(format!("sequence {i} is empty")));
        }
    }
    let lengths: Vec<usize> = features.iter().map(|f| f.nrows()).collect();
    let offsets: Vec<usize> = lengths
        .iter()
        .scan(0, |acc, &l| {
            let o = *acc;
            *acc += l;
            Some(o)
        })
        .collect();
    let total: usize = lengths.iter().sum();
    let layout = Layout {
        lengths: &lengths,
        offsets: &offsets,
        steps: lengths.iter().copied().max().unwrap_or(0),
    };

    let views: Vec<_> = features.to_vec();
    let inputs =
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::invalid(e.to_string()))?;
    let mut pre_relu = inputs.dot(&w.proj_w);
    add_row(&mut pre_relu, &w.proj_b);
    let activated = pre_relu.mapv(|v| v.max(0.0));

    let n = total as f64;
    let batch_mean = activated.sum_axis(Axis(0)) / n;
    let batch_var = activated
        .axis_iter(Axis(0))
        .fold(Array1::zeros(cfg.hidden), |acc, r| {
            let d = &r - &batch_mean;
            acc + &d * &d
        })
        / n;
    let (mean, var) = match mode {
        NormMode::Batch => (&batch_mean, &batch_var),
        NormMode::Running => (&params.running.mean, &params.running.var),
    };
    let inv_std = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
    let mut normalized = activated;
    normalized.rows_mut().into_iter().for_each(|mut r| {
        r -= mean;
        r *= &inv_std;
    });
    let mut layer_in = &normalized * &w.norm_scale;
    add_row(&mut layer_in, &w.norm_shift);

    let dirs_per_layer = cfg.directions();
    let mut layer_inputs = Vec::with_capacity(cfg.layers);
    let mut dirs = Vec::with_capacity(cfg.layers * dirs_per_layer);
    for layer in 0..cfg.layers {
        let mut out = Array2::zeros((total, cfg.hidden * dirs_per_layer));
        for dir in 0..dirs_per_layer {
            let cell = &w.cells[layer * dirs_per_layer + dir];
            let cache = run_direction(cell, &layer_in, &layout, dir == 1);
            let view = out.slice_mut(s![.., dir * cfg.hidden..(dir + 1) * cfg.hidden]);
            layout.unpad_into(&cache.hidden, cache.reversed, view, false);
            dirs.push(cache);
        }
        layer_inputs.push(std::mem::replace(&mut layer_in, out));
    }
    let top = layer_in;
    let mut logits = top.dot(&w.out_w);
    add_row(&mut logits, &w.out_b);
    let mut probs = logits;
    kernels::sigmoid_inplace(probs.as_slice_mut().expect("standard layout"));
    let scores = (0..features.len())
        .map(|sq| {
            let rows = probs.slice(s![offsets[sq]..offsets[sq] + lengths[sq], ..]);
            ScoreGrid::from_vec(lengths[sq], cfg.behaviors, rows.iter().copied().collect())
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ForwardCache {
        version: params.version,
        mode,
        lengths,
        offsets,
        inputs,
        pre_relu,
        normalized,
        inv_std,
        batch_mean,
        batch_var,
        layer_inputs,
        dirs,
        top,
        scores,
    })
}

/// Gradients of a scalar loss with respect to every weight, given the loss
/// gradient with respect to each sequence's scores.
pub fn backward_grads(
    params: &ScorerParams,
    cache: &ForwardCache,
    loss_grads: &[Grid],
) -> Result<Weights> {
    if cache.version != params.version {
        return Err(Error::InvalidState(format!(
            "forward cache was computed for parameter version {}, parameters are at {}",
            cache.version, params.version
        )));
    }
    let cfg = &params.config;
    let w = &params.weights;
    if loss_grads.len() != cache.lengths.len() {
        return Err(Error::invalid(format!(
            "expected {} loss gradients, got {}",
            cache.lengths.len(),
            loss_grads.len()
        )));
    }
    let total = cache.inputs.nrows();
    let mut d_logits = Array2::<f64>::zeros((total, cfg.behaviors));
    for (sq, g) in loss_grads.iter().enumerate() {
        if g.shape() != (cache.lengths[sq], cfg.behaviors) {
            return Err(Error::invalid(format!(
                "loss gradient {sq} has shape {:?}, scores are {:?}",
                g.shape(),
                (cache.lengths[sq], cfg.behaviors)
            )));
        }
        let scores = &cache.scores[sq];
        for (i, r) in cache.rows(sq).enumerate() {
            for b in 0..cfg.behaviors {
                let p = scores.get(i, b);
                d_logits[[r, b]] = g.get(i, b) * p * (1.0 - p);
            }
        }
    }

    let mut grads = w.zeros_like();
    grads.out_w = cache.top.t().dot(&d_logits);
    grads.out_b = d_logits.sum_axis(Axis(0));
    let mut d_layer = d_logits.dot(&w.out_w.t());

    let layout = Layout {
        lengths: &cache.lengths,
        offsets: &cache.offsets,
        steps: cache.lengths.iter().copied().max().unwrap_or(0),
    };
    let nb = cache.lengths.len();
    let dirs_per_layer = cfg.directions();
    for layer in (0..cfg.layers).rev() {
        let in_width = cache.layer_inputs[layer].ncols();
        let mut d_input = Array2::<f64>::zeros((total, in_width));
        for dir in 0..dirs_per_layer {
            let idx = layer * dirs_per_layer + dir;
            let dcache = &cache.dirs[idx];
            let d_hidden = layout.pad(
                d_layer.slice(s![.., dir * cfg.hidden..(dir + 1) * cfg.hidden]),
                dcache.reversed,
            );
            let d_in_padded =
                backward_direction(&w.cells[idx], dcache, &d_hidden, nb, &mut grads.cells[idx]);
            layout.unpad_into(&d_in_padded, dcache.reversed, d_input.view_mut(), true);
        }
        d_layer = d_input;
    }

    // normalization: y = scale * xhat + shift
    grads.norm_scale = (&d_layer * &cache.normalized).sum_axis(Axis(0));
    grads.norm_shift = d_layer.sum_axis(Axis(0));
    let d_xhat = &d_layer * &w.norm_scale;
    let mut d_act = match cache.mode {
        NormMode::Running => &d_xhat * &cache.inv_std,
        NormMode::Batch => {
            let n = total as f64;
            let sum_d = d_xhat.sum_axis(Axis(0));
            let sum_dx = (&d_xhat * &cache.normalized).sum_axis(Axis(0));
            let mut d = &d_xhat * n;
            d.rows_mut().into_iter().for_each(|mut r| r -= &sum_d);
            d -= &(&cache.normalized * &sum_dx);
            d.rows_mut().into_iter().for_each(|mut r| {
                r *= &cache.inv_std;
                r /= n;
            });
            d
        }
    };
    ndarray::Zip::from(&mut d_act)
        .and(&cache.pre_relu)
        .for_each(|d, &z| {
            if z <= 0.0 {
                *d = 0.0;
            }
        });
    grads.proj_w = cache.inputs.t().dot(&d_act);
    grads.proj_b = d_act.sum_axis(Axis(0));
    Ok(grads)
}

/// Blends the batch statistics of a training forward pass into the running averages.
pub fn update_running_stats(params: &mut ScorerParams, cache: &ForwardCache) {
    let (mean, var) = cache.batch_stats();
    params.running.mean = &params.running.mean * (1.0 - NORM_MOMENTUM) + mean * NORM_MOMENTUM;
    params.running.var = &params.running.var * (1.0 - NORM_MOMENTUM) + var * NORM_MOMENTUM;
}

/// Inference on one sequence: scores plus extracted starts.
pub fn predict(
    params: &ScorerParams,
    features: ArrayView2<'_, f64>,
    extract: &ExtractSpec,
) -> Result<(ScoreGrid, StartSet)> {
    let cache = forward_scores(params, &[features], NormMode::Running)?;
    let scores = cache.into_scores().pop().expect("one sequence in, one out");
    let starts = extract_starts(&scores, extract)?;
    Ok((scores, starts))
}
