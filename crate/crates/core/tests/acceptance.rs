//! Acceptance runner: one PASS/FAIL line per criterion.
//!
//! Set `STARTDET_SKIP_TRAINING=1` to skip the long training experiment; its
//! criteria then print SKIP. The exit status fails on any FAIL except the
//! direction experiment, whose verdict is printed but not enforced.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use startdet::datagen::{
    generate_dataset, read_features, read_labels, read_scores_csv, write_features, write_labels,
    write_scores_csv, GrammarSpec, LabelFile, Split, SyntheticConfig,
};
use startdet::evalkit::{
    ap_depth_at_recall, p_map_at_offsets, point_ap, tau_f1_dataset, ConfusionCounts, EvalConfig,
    OffsetUnit,
};
use startdet::losses::{
    matching_loss, per_frame_loss, wasserstein_loss, LossWeights, WassersteinConfig,
};
use startdet::matching::{
    brute_force_matching, hungarian_solve, optimal_matching, structured_error, MatchConfig,
};
use startdet::model::{
    forward_scores, predict, train, EpochLog, LossKind, NormMode, ScorerConfig, ScorerParams,
    TrainConfig, TrainSequence,
};
use startdet::seqcore::{extract_starts, gaussian_blur_labels, grid_from_starts};
use startdet::{BlurSpec, ExtractSpec, Grid, LabelGrid, ScoreGrid, Start, StartSet};

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn run(id: u32, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Outcome::Fail(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail, ok) = match outcome {
        Outcome::Pass(d) => ("PASS", d, true),
        Outcome::Fail(d) => ("FAIL", d, false),
        Outcome::Skip(d) => ("SKIP", d, true),
    };
    println!("{tag} [{id}] {name}: {detail} ({secs:.1}s)");
    ok
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn matching_oracle() -> Outcome {
    let start = Instant::now();
    let mut mismatches = 0;
    let instances = 1000;
    for seed in 0..instances {
        let mut rng = common::rng(seed);
        let frames = rng.random_range(1..=200);
        let behaviors = rng.random_range(1..=3);
        let tau = [5, 10, 30][rng.random_range(0..3)];
        let labels = common::random_starts(&mut rng, behaviors, 5, frames);
        let preds = common::random_scored(&mut rng, behaviors, 5, frames);
        let cfg = MatchConfig { tau };
        let fast = optimal_matching(&labels, &preds, &cfg).unwrap();
        let slow = brute_force_matching(&labels, &preds, &cfg).unwrap();
        if fast
            .iter()
            .zip(&slow)
            .any(|(f, s)| f.total_cost != s.total_cost)
        {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        mismatches == 0 && elapsed < Duration::from_secs(30),
        format!(
            "{instances} instances, {mismatches} mismatches, {:.2}s < 30s",
            elapsed.as_secs_f64()
        ),
    )
}

fn hungarian_oracle() -> Outcome {
    let mut mismatches = 0;
    let instances = 1000;
    for seed in 0..instances {
        let mut rng = common::rng(seed + 10_000);
        let n = rng.random_range(1..=6);
        let integer = seed % 2 == 0;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        if integer {
                            rng.random_range(0..20) as f64
                        } else {
                            rng.random_range(0.0..100.0)
                        }
                    })
                    .collect()
            })
            .collect();
        if hungarian_solve(&rows).unwrap().cost != common::permutation_minimum(&rows) {
            mismatches += 1;
        }
    }
    verdict(
        mismatches == 0,
        format!("{instances} matrices up to 6x6, {mismatches} mismatches"),
    )
}

fn blurred(seed: u64) -> (StartSet, LabelGrid) {
    let mut rng = common::rng(seed);
    let starts = common::random_starts(&mut rng, 3, 3, 30);
    let grid = grid_from_starts(&starts, 30, 3).unwrap();
    (
        starts,
        gaussian_blur_labels(&grid, &BlurSpec::default()).unwrap(),
    )
}

fn as_scores(values: &[f64]) -> ScoreGrid {
    ScoreGrid::from_vec(30, 3, values.to_vec()).unwrap()
}

fn loss_gradient_error(seed: u64, which: usize) -> f64 {
    let mut rng = common::rng(seed + 500);
    let (starts, labels) = blurred(seed);
    let scores = common::random_grid(&mut rng, 30, 3, 0.05, 1.0);
    let grid = ScoreGrid::new(scores.clone()).unwrap();
    let cfg = MatchConfig::default();
    let weights = LossWeights::default();
    let wcfg = WassersteinConfig::default();
    let preds = extract_starts(
        &grid,
        &ExtractSpec {
            threshold: 0.3,
            nms_window: 3,
        },
    )
    .unwrap();
    let matches = optimal_matching(&starts, &preds, &cfg).unwrap();
    let value = |s: &ScoreGrid| match which {
        0 => per_frame_loss(&labels, s).unwrap(),
        1 => wasserstein_loss(&labels, s, &wcfg).unwrap(),
        _ => matching_loss(&starts, s, &matches, &weights, &cfg).unwrap(),
    };
    let analytic = value(&grid).gradient;
    let numeric = common::numeric_gradient(scores.values(), 1e-4, |x| value(&as_scores(x)).value);
    common::max_relative_error(analytic.values(), &numeric, 1e-8)
}

fn tiny_model_error(kind: LossKind, seed: u64) -> f64 {
    let cfg = ScorerConfig {
        input_dim: 2,
        hidden: 3,
        layers: 2,
        bidirectional: true,
        behaviors: 2,
    };
    let mut params = ScorerParams::init(cfg, seed).unwrap();
    let mut rng = common::rng(seed + 77);
    for t in params.weights.tensors_mut() {
        t.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    let features: Vec<Array2<f64>> = [6, 4]
        .iter()
        .map(|&n| Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.5..1.5)))
        .collect();
    let starts: Vec<StartSet> = features
        .iter()
        .map(|f| common::random_starts(&mut rng, 2, 2, f.nrows()))
        .collect();
    let labels: Vec<LabelGrid> = starts
        .iter()
        .zip(&features)
        .map(|(s, f)| {
            let g = grid_from_starts(s, f.nrows(), 2).unwrap();
            gaussian_blur_labels(
                &g,
                &BlurSpec {
                    window: 3,
                    sigma: 1.0,
                },
            )
            .unwrap()
        })
        .collect();
    let views: Vec<_> = features.iter().map(|f| f.view()).collect();
    let mcfg = MatchConfig { tau: 3 };
    let initial = forward_scores(&params, &views, NormMode::Batch).unwrap();
    let matches: Vec<_> = initial
        .scores()
        .iter()
        .zip(&starts)
        .map(|(s, l)| {
            let p = extract_starts(
                s,
                &ExtractSpec {
                    threshold: 0.2,
                    nms_window: 1,
                },
            )
            .unwrap();
            optimal_matching(l, &p, &mcfg).unwrap()
        })
        .collect();
    let weights = LossWeights::default();
    let loss = |scores: &[ScoreGrid]| -> (f64, Vec<Grid>) {
        let outs: Vec<_> = scores
            .iter()
            .enumerate()
            .map(|(i, s)| match kind {
                LossKind::Mse => per_frame_loss(&labels[i], s).unwrap(),
                LossKind::Wasserstein => {
                    wasserstein_loss(&labels[i], s, &WassersteinConfig::default()).unwrap()
                }
                LossKind::Matching => {
                    matching_loss(&starts[i], s, &matches[i], &weights, &mcfg).unwrap()
                }
            })
            .collect();
        (
            outs.iter().map(|o| o.value).sum(),
            outs.into_iter().map(|o| o.gradient).collect(),
        )
    };
    common::model_gradient_error(&params, &features, NormMode::Batch, 1e-5, &loss)
}

fn gradient_suite() -> Outcome {
    let mut worst = [0.0f64; 3];
    for seed in 0..10 {
        for (k, w) in worst.iter_mut().enumerate() {
            *w = w.max(loss_gradient_error(seed, k));
        }
    }
    let mut model = 0.0f64;
    for kind in [LossKind::Mse, LossKind::Matching, LossKind::Wasserstein] {
        for seed in 0..2 {
            model = model.max(tiny_model_error(kind, seed));
        }
    }
    verdict(
        worst.iter().all(|&w| w < 1e-4) && model < 1e-3,
        format!(
            "per-frame {:.1e}, wasserstein {:.1e}, matching {:.1e} (< 1e-4); full model {model:.1e} (< 1e-3)",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn loss_identities() -> Outcome {
    let mut wasserstein_exact = 0.0f64;
    let mut wasserstein_eps = 0.0f64;
    for seed in 0..20 {
        let mut rng = common::rng(seed + 900);
        // two or three starts per behavior keep every column's mass well above zero
        let lists = (0..3)
            .map(|_| common::distinct_frames(&mut rng, 2 + seed as usize % 2, 30))
            .collect();
        let grid = grid_from_starts(&StartSet::from_frames(lists).unwrap(), 30, 3).unwrap();
        let y = gaussian_blur_labels(&grid, &BlurSpec::default()).unwrap();
        let same = ScoreGrid::from(y.clone());
        wasserstein_exact = wasserstein_exact.max(
            wasserstein_loss(&y, &same, &WassersteinConfig { epsilon: 0.0 })
                .unwrap()
                .value,
        );
        wasserstein_eps = wasserstein_eps.max(
            wasserstein_loss(&y, &same, &WassersteinConfig { epsilon: 1e-6 })
                .unwrap()
                .value,
        );
    }

    let mut self_error = 0.0f64;
    for seed in 0..100 {
        let s = common::random_starts(&mut common::rng(seed), 3, 6, 300);
        self_error = self_error.max(structured_error(&s, &s, &MatchConfig::default()).unwrap());
    }

    // labels {10, 30}, predictions {12, 29, 70} scored 0.8, 0.6, 0.7; C_b = 1/2:
    // (-(10-2)*0.8*4 - (10-1)*0.6*4 + 0.7*1) / 2 = -23.25
    let labels = StartSet::from_frames(vec![vec![10, 30]]).unwrap();
    let mut values = vec![0.1; 100];
    for (t, v) in [(12, 0.8), (29, 0.6), (70, 0.7)] {
        values[t] = v;
    }
    let scores = ScoreGrid::from_vec(100, 1, values).unwrap();
    let preds = StartSet::new(vec![vec![
        Start::scored(12, 0.8),
        Start::scored(29, 0.6),
        Start::scored(70, 0.7),
    ]])
    .unwrap();
    let cfg = MatchConfig::default();
    let matches = optimal_matching(&labels, &preds, &cfg).unwrap();
    let lh = matching_loss(&labels, &scores, &matches, &LossWeights::default(), &cfg)
        .unwrap()
        .value;
    let expected = -23.25;

    verdict(
        wasserstein_exact == 0.0 && wasserstein_eps < 1e-9 && self_error == 0.0 && (lh - expected).abs() <= 1e-12,
        format!(
            "L_W(Y,Y) eps=0 max {wasserstein_exact:e}, eps=1e-6 max {wasserstein_eps:.2e}; self error {self_error}; L_H {lh} vs {expected}"
        ),
    )
}

fn scored(list: &[(usize, f64)]) -> StartSet {
    let mut starts: Vec<Start> = list.iter().map(|&(f, c)| Start::scored(f, c)).collect();
    starts.sort_by_key(|s| s.frame);
    StartSet::new(vec![starts]).unwrap()
}

fn random_instance(seed: u64) -> (StartSet, StartSet) {
    let mut rng = common::rng(seed + 3000);
    let labels = common::random_starts(&mut rng, 3, 5, 400);
    let lists = labels
        .iter()
        .map(|l| {
            let mut frames = Vec::new();
            for s in l {
                if rng.random_bool(0.8) {
                    frames.push(
                        (s.frame as i64 + rng.random_range(-25i64..=25)).clamp(0, 399) as usize,
                    );
                }
            }
            frames.extend((0..rng.random_range(0..4)).map(|_| rng.random_range(0..400)));
            frames.sort_unstable();
            frames.dedup();
            frames
                .into_iter()
                .map(|f| Start::scored(f, rng.random_range(0.0..1.0)))
                .collect()
        })
        .collect();
    (labels, StartSet::new(lists).unwrap())
}

fn metric_protocol() -> Outcome {
    let one = StartSet::from_frames(vec![vec![100]]).unwrap();
    let two = StartSet::from_frames(vec![vec![100, 500]]).unwrap();
    let preds = scored(&[(490, 0.9), (300, 0.8), (101, 0.7)]);
    let pairs = [(&two, &preds)];
    let hand = [
        point_ap(&one, &scored(&[(98, 0.9), (102, 0.8)]), 10).unwrap()[0] == 1.0,
        point_ap(&two, &preds, 30).unwrap()[0] == (1.0 + 2.0 / 3.0) / 2.0,
        ap_depth_at_recall(&pairs, 30, 1.0, true).unwrap() == (1.0 + 2.0 / 3.0) / 2.0,
        ap_depth_at_recall(&pairs, 30, 0.5, true).unwrap() == 1.0,
    ];

    let offsets = EvalConfig {
        offsets: (0..=40).map(f64::from).collect(),
        offset_unit: OffsetUnit::Frames,
        ..EvalConfig::default()
    };
    let eval = EvalConfig::default();
    let (mut p_map_breaks, mut f1_breaks) = (0, 0);
    for seed in 0..100 {
        let (l, p) = random_instance(seed);
        let v = p_map_at_offsets(&[(&l, &p)], &offsets).unwrap();
        p_map_breaks += v.windows(2).filter(|w| w[1].2 < w[0].2).count();
        let f1: Vec<f64> = (1..=40)
            .map(|t| {
                tau_f1_dataset(&[(&l, &p)], &eval, t)
                    .unwrap()
                    .aggregate
                    .f1()
            })
            .collect();
        f1_breaks += f1.windows(2).filter(|w| w[1] < w[0]).count();
    }
    let hand_ok = hand.iter().filter(|&&b| b).count();
    verdict(
        hand_ok == hand.len() && p_map_breaks == 0 && f1_breaks == 0,
        format!(
            "hand examples {hand_ok}/{}; p-mAP decreases over offset {p_map_breaks}; F1 decreases over tau 1..40 {f1_breaks} (100 instances each)",
            hand.len()
        ),
    )
}

fn format_closure() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut lossy = 0;
    let mut first_column_ok = true;
    for seed in 0..100 {
        let mut rng = common::rng(seed + 7000);
        let behaviors = rng.random_range(1..=6);
        let frames = rng.random_range(1..500);
        let starts = common::random_scored(&mut rng, behaviors, 6, frames);
        let labels = LabelFile {
            fps: 500.0,
            frames,
            behaviors: (0..behaviors).map(|b| format!("b{b}")).collect(),
            starts,
        };
        let path = dir.path().join("labels.json");
        write_labels(&path, &labels).unwrap();
        lossy += usize::from(read_labels(&path).unwrap() != labels);

        let d = rng.random_range(1..10);
        let features = Array2::from_shape_fn((frames, d), |_| rng.random_range(-4.0f32..4.0));
        let path = dir.path().join("features.json");
        write_features(&path, &features).unwrap();
        lossy += usize::from(read_features(&path).unwrap() != features);

        let scores = common::random_grid(&mut rng, frames, behaviors, 0.0, 1.0);
        let truth = common::random_grid(&mut rng, frames, behaviors, 0.0, 1.0);
        let path = dir.path().join("scores.csv");
        write_scores_csv(&path, &labels.behaviors, &scores, Some(&truth)).unwrap();
        let back = read_scores_csv(&path).unwrap();
        lossy += usize::from(
            back.scores != scores
                || back.truth.as_ref() != Some(&truth)
                || back.behaviors != labels.behaviors,
        );
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        first_column_ok &= lines.next().is_some_and(|h| h.starts_with("frame,"));
        first_column_ok &= lines
            .enumerate()
            .all(|(t, l)| l.split(',').next() == Some(t.to_string().as_str()));
    }
    verdict(
        lossy == 0 && first_column_ok,
        format!("100 seeds x 3 formats, {lossy} lossy round trips; frame is the first column: {first_column_ok}"),
    )
}

struct RunResult {
    loss: LossKind,
    seed: u64,
    counts: ConfusionCounts,
    log: Vec<EpochLog>,
}

/// Trains every loss with three seeds on one synthetic dataset, all runs in
/// parallel, and scores the test split at tau = 10.
fn direction_experiment() -> (Vec<RunResult>, Duration) {
    let start = Instant::now();
    let grammar = GrammarSpec::default();
    let mut synth = SyntheticConfig::for_behaviors(grammar.behaviors.len());
    synth.sequences = 250;
    synth.test_sequences = 50;
    synth.frames = 500;
    synth.seed = 1;
    let data = generate_dataset(&grammar, &synth).unwrap();
    let split = |s| -> Vec<TrainSequence> {
        data.split(s)
            .into_iter()
            .map(|r| TrainSequence {
                features: r.features.mapv(f64::from),
                labels: r.labels.clone(),
            })
            .collect()
    };
    let (train_set, test_set) = (split(Split::Train), split(Split::Test));
    let eval = EvalConfig::default();
    let runs: Vec<(LossKind, u64)> = [LossKind::Mse, LossKind::Matching, LossKind::Wasserstein]
        .into_iter()
        .flat_map(|l| (0..3).map(move |s| (l, s)))
        .collect();
    let results: Vec<RunResult> = runs
        .into_par_iter()
        .map(|(loss, seed)| {
            let mut cfg = TrainConfig::new(loss);
            cfg.epochs = 100;
            cfg.seed = seed;
            let out = train(&train_set, &cfg).unwrap();
            let preds: Vec<StartSet> = test_set
                .iter()
                .map(|s| {
                    predict(&out.params, s.features.view(), &cfg.extract)
                        .unwrap()
                        .1
                })
                .collect();
            let pairs: Vec<_> = test_set
                .iter()
                .zip(&preds)
                .map(|(s, p)| (&s.labels, p))
                .collect();
            let counts = tau_f1_dataset(&pairs, &eval, 10).unwrap().aggregate;
            RunResult {
                loss,
                seed,
                counts,
                log: out.log,
            }
        })
        .collect();
    for r in &results {
        let c = &r.counts;
        println!(
            "     {:<11} seed {}: P {:.3} R {:.3} F1 {:.3} (tp {} fp {} fn {})",
            r.loss.name(),
            r.seed,
            c.precision(),
            c.recall(),
            c.f1(),
            c.tp,
            c.fp,
            c.fn_
        );
    }
    (results, start.elapsed())
}

fn mean(results: &[RunResult], loss: LossKind, f: impl Fn(&ConfusionCounts) -> f64) -> f64 {
    let v: Vec<f64> = results
        .iter()
        .filter(|r| r.loss == loss)
        .map(|r| f(&r.counts))
        .collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn direction(results: &[RunResult], elapsed: Duration) -> Outcome {
    let p = |l| mean(results, l, ConfusionCounts::precision);
    let f = |l| mean(results, l, ConfusionCounts::f1);
    let (pm, fm) = (p(LossKind::Mse), f(LossKind::Mse));
    let mut ok = elapsed < Duration::from_secs(20 * 60);
    let mut parts = vec![format!("mse P {pm:.3} F1 {fm:.3}")];
    for loss in [LossKind::Matching, LossKind::Wasserstein] {
        let (pl, fl) = (p(loss), f(loss));
        ok &= pl >= pm + 0.05 && fl >= fm - 0.02;
        parts.push(format!(
            "{} P {pl:.3} (need >= {:.3}) F1 {fl:.3} (need >= {:.3})",
            loss.name(),
            pm + 0.05,
            fm - 0.02
        ));
    }
    parts.push(format!("runtime {:.0}s (< 1200s)", elapsed.as_secs_f64()));
    verdict(ok, parts.join("; "))
}

fn lambda_schedule(results: &[RunResult]) -> Outcome {
    let mut bad = 0;
    let mut checked = 0;
    for r in results {
        for e in &r.log {
            let expected = match r.loss {
                LossKind::Matching => f64::max(0.5, 0.99 * 0.9f64.powi((e.epoch / 5) as i32)),
                LossKind::Wasserstein => 0.5,
                LossKind::Mse => continue,
            };
            checked += 1;
            bad += usize::from(e.lambda != expected);
        }
    }
    verdict(
        checked > 0 && bad == 0,
        format!("{checked} logged epochs, {bad} differ from the schedule"),
    )
}

fn main() {
    println!("acceptance");
    let mut ok = true;
    ok &= run(1, "matching oracle", matching_oracle);
    ok &= run(2, "hungarian oracle", hungarian_oracle);
    ok &= run(3, "gradient suite", gradient_suite);
    ok &= run(4, "loss identities", loss_identities);
    ok &= run(5, "metric protocol", metric_protocol);
    if std::env::var_os("STARTDET_SKIP_TRAINING").is_some() {
        run(6, "direction reproduction", || {
            Outcome::Skip("STARTDET_SKIP_TRAINING is set".into())
        });
        run(7, "lambda schedule", || {
            Outcome::Skip("needs the training runs".into())
        });
    } else {
        let (results, elapsed) = direction_experiment();
        // an experiment outcome, reported but not gating the exit status
        let reproduced = run(6, "direction reproduction", || direction(&results, elapsed));
        if !reproduced {
            println!("     [6] is reported only; see the README for the analysis");
        }
        ok &= run(7, "lambda schedule", || lambda_schedule(&results));
    }
    ok &= run(8, "format closure", format_closure);
    if !ok {
        std::process::exit(1);
    }
}
