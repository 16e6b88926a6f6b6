use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use ssl_vqa_core::data::{self, generate, generate_full, Dataset, Generated, Instance, QType};
use ssl_vqa_core::eval::{accuracy, compare, prior_probe, render_table, MetricsReport};
use ssl_vqa_core::losses::LossConfig;
use ssl_vqa_core::model::{self, Params};
use ssl_vqa_core::sampler::PairMode;
use ssl_vqa_core::trainer::{finetune, pretrain, train_baseline, train_ssl, TrainHistory};

use crate::config::{ConfigError, RunConfig};
use crate::gradcheck::run_checks;
use crate::output::{OutputDir, CONFIG_ECHO};
use crate::{
    Command, Mode, Split, COMPARISON_FILE, DATASET_FILE, HISTORY_FILE, METRICS_FILE, PARAMS_FILE, RECORDS_FILE,
    TABLE_FILE,
};

/// One line of a sweep's records file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub alpha: f64,
    pub overall_acc: f64,
    pub per_type_acc: BTreeMap<QType, f64>,
    pub prior_confidence: f64,
    pub final_train_acc: f64,
    pub final_irrelevant_conf: Option<f64>,
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { spec, seed, sets, out } => gen(spec.as_deref(), seed, &sets, &out),
        Command::Train {
            data,
            config,
            mode,
            seed,
            sets,
            out,
        } => train(&data, config.as_deref(), mode, seed, &sets, &out),
        Command::Eval {
            data,
            params,
            config,
            sets,
            split,
            out,
        } => eval(&data, &params, config.as_deref(), &sets, split, &out),
        Command::Compare { a, b, out } => compare_reports(&a, &b, out.as_deref()),
        Command::SweepAlpha {
            values,
            data,
            config,
            seed,
            sets,
            out,
        } => sweep_alpha(&values, &data, config.as_deref(), seed, &sets, &out),
        Command::Gradcheck { full, seed } => gradcheck(full, seed),
    }
}

fn usage(origin: &str, msg: impl ToString) -> anyhow::Error {
    ConfigError {
        origin: origin.to_string(),
        line: None,
        msg: msg.to_string(),
    }
    .into()
}

fn resolve(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(sets)?;
    Ok(cfg)
}

fn echo(cfg: &RunConfig) -> Result<String> {
    cfg.echo()
        .map_err(|e| anyhow::anyhow!("cannot echo configuration: {e}"))
}

fn in_dir(path: &Path, file: &str) -> PathBuf {
    if path.is_dir() {
        path.join(file)
    } else {
        path.to_path_buf()
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = in_dir(path, DATASET_FILE);
    data::read(&file).with_context(|| format!("reading dataset {}", file.display()))
}

pub fn load_params(path: &Path) -> Result<Params> {
    let file = in_dir(path, PARAMS_FILE);
    model::load(&file, None).with_context(|| format!("reading parameters {}", file.display()))
}

pub fn load_report(path: &Path) -> Result<MetricsReport> {
    let file = in_dir(path, METRICS_FILE);
    let text = fs::read_to_string(&file).with_context(|| format!("reading report {}", file.display()))?;
    let line = text.lines().next().unwrap_or("");
    serde_json::from_str(line).with_context(|| format!("{}:1: malformed report", file.display()))
}

fn validate_training(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    cfg.model
        .clone()
        .fit_to(data)
        .validate()
        .map_err(|e| usage("model", e))?;
    cfg.loss.validate().map_err(|e| usage("loss", e))?;
    cfg.train.validate().map_err(|e| usage("train", e))?;
    Ok(())
}

/// Ground truth for strict pairing: the dataset is regenerated from its
/// own spec and must come out identical.
fn ground_truth(cfg: &RunConfig, data: &Dataset) -> Result<Option<Generated>> {
    if cfg.train.pair_mode != PairMode::Strict {
        return Ok(None);
    }
    let g = generate_full(&data.spec)?;
    if g.dataset != *data {
        bail!("strict pairing needs generator ground truth, but the dataset does not match its recorded spec");
    }
    Ok(Some(g))
}

fn split_of(data: &Dataset, split: Split) -> Vec<&Instance> {
    match split {
        Split::Train => data.train.iter().collect(),
        Split::Test => data.test.iter().collect(),
    }
}

fn gen(spec: Option<&Path>, seed: Option<u64>, sets: &[String], out: &Path) -> Result<()> {
    let mut cfg = resolve(spec, sets)?;
    if let Some(s) = seed {
        cfg.world.seed = s;
    }
    cfg.world.validate().map_err(|e| usage("world", e))?;
    let data = generate(&cfg.world)?;
    let dir = OutputDir::create(out)?;
    dir.write(DATASET_FILE, &data::write_string(&data)?)?;
    dir.write(CONFIG_ECHO, &echo(&cfg)?)?;
    let path = dir.commit()?;
    println!(
        "gen: {} train / {} test instances, {} answers, {} tokens -> {}",
        data.train.len(),
        data.test.len(),
        data.n_answers(),
        data.vocab_size(),
        path.display()
    );
    Ok(())
}

fn train(
    data_path: &Path,
    config: Option<&Path>,
    mode: Mode,
    seed: Option<u64>,
    sets: &[String],
    out: &Path,
) -> Result<()> {
    let mut cfg = resolve(config, sets)?;
    if let Some(s) = seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    let data = load_dataset(data_path)?;
    cfg.world = data.spec.clone();
    validate_training(&cfg, &data)?;
    let truth = ground_truth(&cfg, &data)?;
    let alike = truth
        .as_ref()
        .map(|g| move |q: &Instance, img: &Instance| g.answers_alike(q, img.id));
    let alike_ref = alike.as_ref().map(|f| f as &ssl_vqa_core::sampler::AlikeFn);

    let start = Instant::now();
    let p0 = Params::init(&cfg.model.clone().fit_to(&data))?;
    let (params, history) = match mode {
        Mode::Baseline => train_baseline(&cfg.train, &cfg.loss, &data, &p0)?,
        Mode::Ssl => train_ssl(&cfg.train, &cfg.loss, &data, &p0, alike_ref)?,
    };

    let dir = OutputDir::create(out)?;
    dir.write(PARAMS_FILE, &model::save_string(&params)?)?;
    dir.write(HISTORY_FILE, &history.to_jsonl())?;
    dir.write(CONFIG_ECHO, &echo(&cfg)?)?;
    let path = dir.commit()?;
    if let Some(last) = history.records.last() {
        println!(
            "train: {} epochs, final l_vqa {:.4}, train acc {:.4} ({:.1}s) -> {}",
            history.records.len(),
            last.l_vqa,
            last.train_acc,
            start.elapsed().as_secs_f64(),
            path.display()
        );
    } else {
        println!("train: 0 epochs -> {}", path.display());
    }
    Ok(())
}

fn evaluate(params: &Params, instances: &[&Instance], cfg: &RunConfig) -> Result<MetricsReport> {
    let mut report = accuracy(params, instances)?;
    report.prior_confidence = Some(prior_probe(params, instances, &cfg.probe())?);
    Ok(report)
}

fn report_line(report: &MetricsReport) -> Result<String> {
    Ok(serde_json::to_string(report)? + "\n")
}

fn eval(
    data_path: &Path,
    params_path: &Path,
    config: Option<&Path>,
    sets: &[String],
    split: Split,
    out: &Path,
) -> Result<()> {
    let mut cfg = resolve(config, sets)?;
    let data = load_dataset(data_path)?;
    let params = load_params(params_path)?;
    let s = &params.spec;
    if s.n_answers != data.n_answers() || s.vocab_size != data.vocab_size() || s.feature_dim != data.spec.feature_dim {
        bail!(
            "parameters (answers {}, tokens {}, features {}) do not fit the dataset (answers {}, tokens {}, features {})",
            s.n_answers,
            s.vocab_size,
            s.feature_dim,
            data.n_answers(),
            data.vocab_size(),
            data.spec.feature_dim
        );
    }
    cfg.world = data.spec.clone();
    cfg.model = params.spec.clone();
    let instances = split_of(&data, split);
    let report = evaluate(&params, &instances, &cfg)?;
    let table = render_table(&[("model", &report)]);

    let dir = OutputDir::create(out)?;
    dir.write(METRICS_FILE, &report_line(&report)?)?;
    dir.write(TABLE_FILE, &table)?;
    dir.write(CONFIG_ECHO, &echo(&cfg)?)?;
    dir.commit()?;
    print!("{table}");
    Ok(())
}

fn label(path: &Path) -> String {
    let p = if path.is_dir() {
        path
    } else {
        path.parent().unwrap_or(path)
    };
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn compare_reports(a: &Path, b: &Path, out: Option<&Path>) -> Result<()> {
    let ra = load_report(a)?;
    let rb = load_report(b)?;
    let record = compare(&ra, &rb)?;
    let (la, lb) = (label(a), label(b));
    let mut table = render_table(&[(la.as_str(), &ra), (lb.as_str(), &rb)]);
    let signs: Vec<String> = record.signs.iter().map(|(c, s)| format!("{c} {s}")).collect();
    writeln!(
        table,
        "delta overall {:+.2} points; {}",
        100.0 * record.overall_delta,
        signs.join(", ")
    )
    .unwrap();
    let line = serde_json::to_string(&record)? + "\n";
    if let Some(out) = out {
        let dir = OutputDir::create(out)?;
        dir.write(COMPARISON_FILE, &line)?;
        dir.write(TABLE_FILE, &table)?;
        dir.write(CONFIG_ECHO, &format!("a = {}\nb = {}\n", a.display(), b.display()))?;
        dir.commit()?;
    }
    print!("{table}");
    print!("{line}");
    Ok(())
}

fn alpha_name(a: f64) -> String {
    format!("{a}").replace('.', "_")
}

fn sweep_alpha(
    values: &[f64],
    data_path: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    sets: &[String],
    out: &Path,
) -> Result<()> {
    if let Some(a) = values.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
        return Err(usage(
            "--values",
            format!("alpha {a} is not a finite non-negative number"),
        ));
    }
    let mut cfg = resolve(config, sets)?;
    if let Some(s) = seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    let data = load_dataset(data_path)?;
    cfg.world = data.spec.clone();
    validate_training(&cfg, &data)?;
    let truth = ground_truth(&cfg, &data)?;
    let alike = truth
        .as_ref()
        .map(|g| move |q: &Instance, img: &Instance| g.answers_alike(q, img.id));
    let alike_ref = alike.as_ref().map(|f| f as &ssl_vqa_core::sampler::AlikeFn);

    let p0 = Params::init(&cfg.model.clone().fit_to(&data))?;
    let (pre, pre_history) = pretrain(&cfg.train, &cfg.loss, &data, &p0)?;
    let test = split_of(&data, Split::Test);

    let dir = OutputDir::create(out)?;
    let mut records = String::new();
    let mut reports = Vec::new();
    for &alpha in values {
        let loss = LossConfig {
            alpha,
            ..cfg.loss.clone()
        };
        let (params, fine) = finetune(&cfg.train, &loss, &data, &pre, alike_ref)?;
        let report = evaluate(&params, &test, &cfg)?;
        let last = fine.records.last();
        let record = SweepRecord {
            alpha,
            overall_acc: report.overall_acc,
            per_type_acc: report.per_type_acc.clone(),
            prior_confidence: report.prior_confidence.unwrap_or(f64::NAN),
            final_train_acc: last.map_or(f64::NAN, |r| r.train_acc),
            final_irrelevant_conf: last.and_then(|r| r.irrelevant_conf),
        };
        records.push_str(&(serde_json::to_string(&record)? + "\n"));
        let mut history = TrainHistory {
            records: pre_history.records.clone(),
        };
        history.extend(fine);
        dir.write(
            &format!("history_alpha_{}.jsonl", alpha_name(alpha)),
            &history.to_jsonl(),
        )?;
        println!(
            "alpha {alpha}: test overall {:.4}, prior {:.4}",
            report.overall_acc, record.prior_confidence
        );
        reports.push((format!("alpha={alpha}"), report));
    }
    let rows: Vec<(&str, &MetricsReport)> = reports.iter().map(|(n, r)| (n.as_str(), r)).collect();
    let table = render_table(&rows);
    dir.write(RECORDS_FILE, &records)?;
    dir.write(TABLE_FILE, &table)?;
    dir.write(CONFIG_ECHO, &echo(&cfg)?)?;
    dir.commit()?;
    print!("{table}");
    Ok(())
}

fn gradcheck(full: bool, seed: u64) -> Result<()> {
    let start = Instant::now();
    let rows = run_checks(full, seed)?;
    for r in &rows {
        println!("{}", r.line());
    }
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed = rows.iter().filter(|r| !r.passed).count();
    println!(
        "gradcheck: {} configuration(s), max relative error {worst:.3e}, {:.1}s",
        rows.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        bail!("{failed} configuration(s) exceeded the tolerance");
    }
    Ok(())
}
