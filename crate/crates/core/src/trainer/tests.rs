use super::*;
use crate::data::{generate, QType, QuestionTemplate, WorldSpec};
use crate::eval::accuracy;
use crate::losses::Head;
use crate::model::{ModelSpec, QuestionEncoder};

fn tiny_world() -> Dataset {
    generate(&WorldSpec {
        n_attributes: 1,
        values_per_attribute: vec![4],
        templates: vec![
            QuestionTemplate::standard(QType::Other, 0),
            QuestionTemplate::standard(QType::YesNo, 0),
        ],
        train_size: 200,
        test_size: 50,
        feature_dim: 8,
        n_objects_range: [1, 3],
        object_slots: 3,
        seed: 4,
        ..WorldSpec::default()
    })
    .unwrap()
}

fn tiny_model(data: &Dataset) -> Params {
    Params::init(
        &ModelSpec {
            embed_dim: 16,
            hidden_dim: 32,
            question_encoder: QuestionEncoder::MeanPool,
            seed: 1,
            ..ModelSpec::default()
        }
        .fit_to(data),
    )
    .unwrap()
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        pretrain_epochs: 10,
        finetune_epochs: 4,
        batch_size: 16,
        base_lr: 0.01,
        seed: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn lr_schedule_examples() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(3, &cfg), 0.001);
    assert_eq!(lr_at(9, &cfg), 0.001);
    assert_eq!(lr_at(10, &cfg), 0.0005);
    assert_eq!(lr_at(12, &cfg), 0.0005);
    assert_eq!(lr_at(15, &cfg), 0.00025);
    assert_eq!(lr_at(17, &cfg), 0.00025);
}

#[test]
fn batches_cover_every_index_once() {
    let cfg = TrainConfig {
        batch_size: 8,
        ..quick_cfg()
    };
    let batches = epoch_batches(33, &cfg, 5);
    assert_eq!(batches.len(), 4);
    assert_eq!(batches.last().unwrap().len(), 9);
    let mut all: Vec<usize> = batches.concat();
    all.sort_unstable();
    assert_eq!(all, (0..33).collect::<Vec<_>>());
    assert_eq!(batches, epoch_batches(33, &cfg, 5));
    assert_ne!(batches, epoch_batches(33, &cfg, 6));
    let fixed = TrainConfig { shuffle: false, ..cfg };
    assert_eq!(epoch_batches(10, &fixed, 0)[0], (0..8).collect::<Vec<_>>());
}

#[test]
fn zero_epochs_leave_params_unchanged() {
    let data = tiny_world();
    let p = tiny_model(&data);
    let cfg = TrainConfig {
        pretrain_epochs: 0,
        ..quick_cfg()
    };
    let (q, h) = pretrain(&cfg, &LossConfig::default(), &data, &p).unwrap();
    assert!(q.bitwise_eq(&p));
    assert!(h.records.is_empty());
}

#[test]
fn tiny_world_is_learnable() {
    let data = tiny_world();
    let p = tiny_model(&data);
    let cfg = TrainConfig {
        batch_size: 8,
        ..quick_cfg()
    };
    let (q, h) = pretrain(&cfg, &LossConfig::default(), &data, &p).unwrap();
    assert_eq!(h.records.len(), 10);
    let train: Vec<&Instance> = data.train.iter().collect();
    let acc = accuracy(&q, &train).unwrap().overall_acc;
    assert!(acc > 0.9, "train accuracy {acc}");
    assert!(h.records.last().unwrap().l_vqa < h.records[0].l_vqa);
}

#[test]
fn training_is_deterministic() {
    let data = tiny_world();
    let p = tiny_model(&data);
    let cfg = TrainConfig {
        pretrain_epochs: 2,
        finetune_epochs: 2,
        ..quick_cfg()
    };
    let loss = LossConfig::default();
    let (a, ha) = train_ssl(&cfg, &loss, &data, &p, None).unwrap();
    let (b, hb) = train_ssl(&cfg, &loss, &data, &p, None).unwrap();
    assert!(a.bitwise_eq(&b));
    assert_eq!(ha.to_jsonl(), hb.to_jsonl());
    assert_eq!(ha.records.len(), 4);
    assert_eq!(ha.records[2].phase, Phase::Finetune);
    assert_eq!(ha.records[2].epoch, 0);
}

#[test]
fn alpha_zero_matches_continued_answering_training() {
    let data = tiny_world();
    let p = tiny_model(&data);
    let cfg = TrainConfig {
        pretrain_epochs: 3,
        ..quick_cfg()
    };
    let loss = LossConfig {
        alpha: 0.0,
        ..LossConfig::default()
    };
    let (pre, _) = pretrain(&cfg, &loss, &data, &p).unwrap();
    let (a, ha) = finetune(&cfg, &loss, &data, &pre, None).unwrap();
    let (b, hb) = continue_vqa(&cfg, &loss, &data, &pre).unwrap();
    for (x, y) in ha.records.iter().zip(&hb.records) {
        assert!((x.l_vqa - y.l_vqa).abs() < 1e-9);
        assert!((x.l_self - y.l_self).abs() < 1e-9);
    }
    assert!(a.bitwise_eq(&b));
}

#[test]
fn self_loss_decomposes_per_epoch() {
    let data = tiny_world();
    let p = tiny_model(&data);
    let cfg = TrainConfig {
        pretrain_epochs: 2,
        finetune_epochs: 3,
        ..quick_cfg()
    };
    for head in [Head::Ce, Head::Ml] {
        let loss = LossConfig {
            head,
            alpha: 1.2,
            ..LossConfig::default()
        };
        let (_, h) = train_ssl(&cfg, &loss, &data, &p, None).unwrap();
        for r in h.records.iter().filter(|r| r.phase == Phase::Finetune) {
            let qd = r.l_qd.unwrap();
            assert!((r.l_self - (r.l_vqa + 1.2 * qd)).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&qd));
            assert_eq!(r.irrelevant_conf, Some(qd));
        }
    }
}

#[test]
fn finetuning_lowers_irrelevant_confidence() {
    let data = tiny_world();
    let p = tiny_model(&data);
    let cfg = quick_cfg();
    let loss = LossConfig {
        head: Head::Ml,
        alpha: 3.0,
        ..LossConfig::default()
    };
    let (_, h) = train_ssl(&cfg, &loss, &data, &p, None).unwrap();
    let fine: Vec<&EpochRecord> = h.records.iter().filter(|r| r.phase == Phase::Finetune).collect();
    let first = fine[0].irrelevant_conf.unwrap();
    let last = fine.last().unwrap().irrelevant_conf.unwrap();
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn history_round_trips_through_jsonl() {
    let data = tiny_world();
    let p = tiny_model(&data);
    let cfg = TrainConfig {
        pretrain_epochs: 1,
        finetune_epochs: 1,
        ..quick_cfg()
    };
    let (_, h) = train_ssl(&cfg, &LossConfig::default(), &data, &p, None).unwrap();
    let text = h.to_jsonl();
    assert!(text
        .lines()
        .next()
        .unwrap()
        .starts_with(r#"{"phase":"pretrain","epoch":0,"lr":"#));
    assert!(text.contains(r#""l_qd":null"#));
    assert_eq!(TrainHistory::from_jsonl(&text).unwrap(), h);
}

#[test]
fn configuration_errors() {
    let data = tiny_world();
    let p = tiny_model(&data);
    let loss = LossConfig::default();
    let small = TrainConfig {
        batch_size: 1,
        ..quick_cfg()
    };
    assert!(finetune(&small, &loss, &data, &p, None).is_err());
    let mut empty = data.clone();
    empty.train.clear();
    assert!(pretrain(&quick_cfg(), &loss, &empty, &p).is_err());
    let bad_alpha = LossConfig { alpha: -1.0, ..loss };
    assert!(pretrain(&quick_cfg(), &bad_alpha, &data, &p).is_err());
    let strict = TrainConfig {
        pair_mode: PairMode::Strict,
        ..quick_cfg()
    };
    assert!(finetune(&strict, &LossConfig::default(), &data, &p, None).is_err());
}

#[test]
fn self_loss_gradient_matches_finite_differences() {
    let data = tiny_world();
    let p = Params::init(
        &ModelSpec {
            embed_dim: 3,
            hidden_dim: 4,
            init_scale: 0.5,
            seed: 6,
            ..ModelSpec::default()
        }
        .fit_to(&data),
    )
    .unwrap();
    let batch: Vec<&Instance> = data.train[..4].iter().collect();
    let mut rng = stream_rng(9, Stream::Pairs, 0);
    let pairs = sampler::build(&batch, &mut rng, PairMode::Faithful, None).unwrap();
    for head in [Head::Ce, Head::Ml] {
        let loss = LossConfig {
            head,
            alpha: 3.0,
            ..LossConfig::default()
        };
        let r = grad_check_loss(&p, &batch, &loss, Some(&pairs), 1e-5).unwrap();
        assert!(r.passed, "{head}: {r:?}");
        assert_eq!(r.n_checked, p.weights.iter().map(|(_, t)| t.numel()).sum::<usize>());
    }
}
