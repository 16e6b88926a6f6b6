//! Separates the effect of the question-dependency term from the effect of
//! restarting the learning-rate schedule.
//!
//! For each seed: the single-phase baseline, pretraining followed by plain
//! answering-loss fine-tuning, and fine-tuning at several alphas in both
//! pairing modes. The probe is split by whether the mismatched image happens
//! to share the question's answer.
//!
//! ```text
//! cargo run --release -p ssl-vqa-core --example ablation -- [n_seeds] [world_seed]
//! ```

use ssl_vqa_core::data::{generate_full, Generated, Instance};
use ssl_vqa_core::eval::{accuracy, probe_pairs};
use ssl_vqa_core::losses::{confidence_of, soft_targets, ConfidenceRule};
use ssl_vqa_core::model::predict_pairs;
use ssl_vqa_core::sampler::AlikeFn;
use ssl_vqa_core::trainer::{continue_vqa, finetune, pretrain, train_baseline};
use ssl_vqa_core::{Head, LossConfig, ModelSpec, PairMode, Params, TrainConfig, WorldSpec};

struct Probe {
    all: f64,
    alike: f64,
    other: f64,
}

fn probe(g: &Generated, p: &Params, seed: u64) -> Probe {
    let test: Vec<&Instance> = g.dataset.test.iter().collect();
    let pairs = probe_pairs(test.len(), test.len(), seed);
    let qs: Vec<&Instance> = pairs.iter().map(|&(i, _)| test[i]).collect();
    let imgs: Vec<&Instance> = pairs.iter().map(|&(_, j)| test[j]).collect();
    let logits = predict_pairs(p, &qs, &imgs).unwrap();
    let mut sums = [(0.0, 0usize); 2];
    for ((q, img), row) in qs.iter().zip(&imgs).zip(&logits) {
        let total = q.votes.iter().map(|&(_, c)| c).sum();
        let t = soft_targets(&q.votes, total, p.spec.n_answers).unwrap();
        let c = confidence_of(row, &t, Head::Ml, ConfidenceRule::TargetWeighted);
        let s = &mut sums[g.answers_alike(q, img.id) as usize];
        s.0 += c;
        s.1 += 1;
    }
    let n = (sums[0].1 + sums[1].1) as f64;
    Probe {
        all: (sums[0].0 + sums[1].0) / n,
        alike: sums[1].0 / sums[1].1.max(1) as f64,
        other: sums[0].0 / sums[0].1.max(1) as f64,
    }
}

fn main() {
    let args: Vec<u64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("integer argument"))
        .collect();
    let n_seeds = args.first().copied().unwrap_or(5);
    let world_seed = args.get(1).copied().unwrap_or(0);
    let g = generate_full(&WorldSpec {
        seed: world_seed,
        ..WorldSpec::default()
    })
    .unwrap();
    let data = &g.dataset;
    let test: Vec<&Instance> = data.test.iter().collect();
    let alike = |q: &Instance, img: &Instance| g.answers_alike(q, img.id);

    println!(
        "{:<6} {:<16} {:>7} {:>7} {:>7} {:>8}",
        "seed", "run", "test", "probe", "alike", "nonalike"
    );
    for seed in 0..n_seeds {
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let p0 = Params::init(
            &ModelSpec {
                seed,
                ..ModelSpec::default()
            }
            .fit_to(data),
        )
        .unwrap();
        let loss = LossConfig::default();
        let row = |name: &str, p: &Params| {
            let pr = probe(&g, p, 0);
            println!(
                "{seed:<6} {name:<16} {:>7.4} {:>7.4} {:>7.4} {:>8.4}",
                accuracy(p, &test).unwrap().overall_acc,
                pr.all,
                pr.alike,
                pr.other
            );
        };

        row("baseline", &train_baseline(&cfg, &loss, data, &p0).unwrap().0);
        let (pre, _) = pretrain(&cfg, &loss, data, &p0).unwrap();
        row("pretrain", &pre);
        row("restart", &continue_vqa(&cfg, &loss, data, &pre).unwrap().0);
        for (mode, truth) in [(PairMode::Faithful, None), (PairMode::Strict, Some(&alike as &AlikeFn))] {
            let cfg = TrainConfig {
                pair_mode: mode,
                ..cfg.clone()
            };
            for alpha in [1.0, 3.0, 10.0] {
                let l = LossConfig { alpha, ..loss.clone() };
                let (p, _) = finetune(&cfg, &l, data, &pre, truth).unwrap();
                row(&format!("{mode} a={alpha}"), &p);
            }
        }
    }
}
