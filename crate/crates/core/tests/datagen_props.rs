mod common;

use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;
use startdet::datagen::{
    generate_dataset, generate_sequence, read_dataset, read_features, read_labels, read_scores_csv,
    sequence_seeds, write_dataset, write_features, write_labels, write_scores_csv, GrammarSpec,
    LabelFile, SyntheticConfig,
};
use startdet::{Start, StartSet};

fn defaults() -> (GrammarSpec, SyntheticConfig) {
    let g = GrammarSpec::default();
    let c = SyntheticConfig::for_behaviors(g.behaviors.len());
    (g, c)
}

fn mean_count(grammar: &GrammarSpec, cfg: &SyntheticConfig, behavior: usize, runs: u64) -> f64 {
    let total: usize = (0..runs)
        .map(|seed| {
            generate_sequence(grammar, cfg, seed, "x")
                .unwrap()
                .labels
                .behavior(behavior)
                .len()
        })
        .sum();
    total as f64 / runs as f64
}

#[test]
fn grab_repeats_follow_the_geometric_mean() {
    let (g, c) = defaults();
    let grab = g.behaviors.iter().position(|b| b == "grab").unwrap();
    let mean = mean_count(&g, &c, grab, 10_000);
    assert!((mean - 1.0 / (1.0 - 0.3)).abs() < 0.1, "{mean}");
}

#[test]
fn retry_rate_can_be_calibrated_to_hand_open_density() {
    let (mut g, c) = defaults();
    g.p_retry = 1.0 - 1.0 / 1.91;
    let hand_open = g.behaviors.iter().position(|b| b == "hand-open").unwrap();
    let mean = mean_count(&g, &c, hand_open, 10_000);
    assert!((mean - 1.91).abs() < 0.15, "{mean}");
}

#[test]
fn chew_comes_after_the_first_grab() {
    let (g, c) = defaults();
    let (grab, chew) = (2, 5);
    let mut chews = 0;
    for seed in 0..1000 {
        let r = generate_sequence(&g, &c, seed, "x").unwrap();
        if let Some(first_chew) = r.labels.behavior(chew).first() {
            chews += 1;
            let first_grab = r.labels.behavior(grab).first().expect("chew without grab");
            assert!(first_chew.frame > first_grab.frame, "seed {seed}");
        }
    }
    assert!(chews > 100, "chew too rare to test: {chews}");
}

#[test]
fn starts_of_a_behavior_keep_the_minimum_gap() {
    let (mut g, mut c) = defaults();
    for retry_to in [1, 2] {
        g.retry_to = retry_to;
        g.p_retry = 0.6;
        c.jitter = 5;
        for seed in 0..500 {
            let r = generate_sequence(&g, &c, seed, "x").unwrap();
            for list in r.labels.iter() {
                assert!(
                    list.windows(2)
                        .all(|w| w[1].frame - w[0].frame >= g.min_gap),
                    "seed {seed}: {list:?}"
                );
            }
        }
    }
}

#[test]
fn starts_stand_out_from_the_background() {
    let (g, c) = defaults();
    let (mut at_start, mut background, mut n) = (0.0, 0.0, 0.0);
    let mut rng = common::rng(0);
    for seed in 0..200 {
        let r = generate_sequence(&g, &c, seed, "x").unwrap();
        for (b, list) in r.labels.iter().enumerate() {
            for s in list {
                let t = (s.frame + 4).min(c.frames - 1);
                at_start += r.features[[t, b]] as f64;
                background += r.features[[rng.random_range(0..c.frames), b]] as f64;
                n += 1.0;
            }
        }
    }
    let gain = (at_start - background) / n;
    assert!(gain > 0.6, "{gain}");
}

#[test]
fn dataset_is_reproducible_and_round_trips() {
    let (g, mut c) = defaults();
    c.sequences = 12;
    c.test_sequences = 3;
    c.seed = 5;
    let a = generate_dataset(&g, &c).unwrap();
    assert_eq!(a, generate_dataset(&g, &c).unwrap());
    let seeds = sequence_seeds(5, 12);
    for (r, e) in a.records.iter().zip(&a.manifest.sequences) {
        assert_eq!(r.meta.seed, e.seed);
        assert!(seeds.contains(&e.seed));
        assert_eq!(*r, generate_sequence(&g, &c, e.seed, &e.id).unwrap());
    }
    let total: usize = a.records.iter().map(|r| r.labels.total()).sum();
    assert_eq!(a.manifest.label_totals.values().sum::<usize>(), total);

    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &a).unwrap();
    assert_eq!(read_dataset(dir.path()).unwrap(), a);
}

fn random_label_file(seed: u64) -> LabelFile {
    let mut rng = common::rng(seed);
    let behaviors = rng.random_range(1..5);
    let frames = rng.random_range(1..400);
    let scored = rng.random_bool(0.5);
    let lists = (0..behaviors)
        .map(|_| {
            let count = rng.random_range(0..6).min(frames);
            common::distinct_frames(&mut rng, count, frames)
                .into_iter()
                .map(|f| {
                    if scored {
                        Start::scored(f, rng.random())
                    } else {
                        Start::at(f)
                    }
                })
                .collect()
        })
        .collect();
    LabelFile {
        fps: rng.random_range(1.0..1000.0),
        frames,
        behaviors: (0..behaviors).map(|b| format!("behavior-{b}")).collect(),
        starts: StartSet::new(lists).unwrap(),
    }
}

#[test]
fn file_formats_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..100 {
        let labels = random_label_file(seed);
        let path = dir.path().join("labels.json");
        write_labels(&path, &labels).unwrap();
        assert_eq!(read_labels(&path).unwrap(), labels, "seed {seed}");

        let mut rng = common::rng(seed + 1000);
        let (frames, d) = (rng.random_range(1..300), rng.random_range(1..9));
        let features = Array2::from_shape_fn((frames, d), |_| rng.random_range(-5.0f32..5.0));
        let path = dir.path().join("features.json");
        write_features(&path, &features).unwrap();
        assert_eq!(read_features(&path).unwrap(), features, "seed {seed}");

        let b = labels.behaviors.len();
        let scores = common::random_grid(&mut rng, frames, b, 0.0, 1.0);
        let truth = rng
            .random_bool(0.5)
            .then(|| common::random_grid(&mut rng, frames, b, 0.0, 1.0));
        let path = dir.path().join("scores.csv");
        write_scores_csv(&path, &labels.behaviors, &scores, truth.as_ref()).unwrap();
        let back = read_scores_csv(&path).unwrap();
        assert_eq!(back.behaviors, labels.behaviors);
        assert_eq!(back.scores, scores);
        assert_eq!(back.truth, truth);
    }
}

#[test]
fn empty_behaviors_are_written_as_empty_lists() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.json");
    let labels = LabelFile {
        fps: 500.0,
        frames: 50,
        behaviors: vec!["grab".into(), "chew".into()],
        starts: StartSet::from_frames(vec![vec![3], vec![]]).unwrap(),
    };
    write_labels(&path, &labels).unwrap();
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(json["starts"]["chew"], serde_json::json!([]));
    assert_eq!(read_labels(&path).unwrap(), labels);
}

#[test]
fn score_csv_starts_with_the_frame_column() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    let mut rng = common::rng(1);
    let scores = common::random_grid(&mut rng, 4, 2, 0.0, 1.0);
    let names = vec!["lift".to_string(), "grab".to_string()];
    write_scores_csv(&path, &names, &scores, Some(&scores)).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("frame,lift_gt,lift_pred,grab_gt,grab_pred")
    );
    for (t, line) in lines.enumerate() {
        assert_eq!(line.split(',').next(), Some(t.to_string().as_str()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generation_is_deterministic(seed in any::<u64>()) {
        let (g, c) = defaults();
        let a = generate_sequence(&g, &c, seed, "s").unwrap();
        prop_assert_eq!(&a, &generate_sequence(&g, &c, seed, "s").unwrap());
        prop_assert!(a.labels.iter().flatten().all(|s| s.frame < c.frames));
    }
}
