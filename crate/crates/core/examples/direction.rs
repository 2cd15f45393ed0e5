//! Trains MSE, Matching and Wasserstein scorers on one synthetic dataset and
//! prints test precision/recall/F1 at tau = 10.
//!
//! usage: direction [epochs] [seeds] [train] [test] [dataset seed]

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::time::Instant;

use startdet::datagen::{generate_dataset, GrammarSpec, Split, SyntheticConfig};
use startdet::evalkit::{tau_f1_dataset, EvalConfig};
use startdet::model::{predict, train, LossKind, TrainConfig, TrainSequence};

fn main() {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("integer argument"))
        .collect();
    let arg = |i: usize, d: usize| args.get(i).copied().unwrap_or(d);
    let (epochs, seeds, n_train, n_test) = (arg(0, 100), arg(1, 3), arg(2, 200), arg(3, 50));
    let data_seed = arg(4, 1) as u64;

    let grammar = GrammarSpec::default();
    let mut synth = SyntheticConfig::for_behaviors(grammar.behaviors.len());
    synth.sequences = n_train + n_test;
    synth.test_sequences = n_test;
    synth.seed = data_seed;
    let data = generate_dataset(&grammar, &synth).unwrap();
    let to_train = |split| {
        data.split(split)
            .into_iter()
            .map(|r| TrainSequence {
                features: r.features.mapv(f64::from),
                labels: r.labels.clone(),
            })
            .collect::<Vec<_>>()
    };
    let (train_set, test_set) = (to_train(Split::Train), to_train(Split::Test));
    let eval = EvalConfig::default();

    for loss in [LossKind::Mse, LossKind::Matching, LossKind::Wasserstein] {
        let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
        for seed in 0..seeds as u64 {
            let start = Instant::now();
            let mut cfg = TrainConfig::new(loss);
            cfg.epochs = epochs;
            cfg.seed = seed;
            let out = train(&train_set, &cfg).unwrap();
            let preds: Vec<_> = test_set
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
            let c = tau_f1_dataset(&pairs, &eval, 10).unwrap().aggregate;
            let last = out.log.last().unwrap();
            println!(
                "{:<12} seed {seed}: P {:.3} R {:.3} F1 {:.3}  (tp {} fp {} fn {})  loss {:.4}  {:.1}s",
                loss.name(),
                c.precision(),
                c.recall(),
                c.f1(),
                c.tp,
                c.fp,
                c.fn_,
                last.loss,
                start.elapsed().as_secs_f64()
            );
            p += c.precision();
            r += c.recall();
            f += c.f1();
        }
        let n = seeds as f64;
        println!(
            "{:<12} mean: P {:.3} R {:.3} F1 {:.3}",
            loss.name(),
            p / n,
            r / n,
            f / n
        );
    }
}
