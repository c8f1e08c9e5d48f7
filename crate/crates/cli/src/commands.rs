use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use dppnet::data::{build_vocab, Dataset, QAExample};
use dppnet::encoder::load_pretrained;
use dppnet::error::Error;
use dppnet::hashing::{hash_stats, HashSpec};
use dppnet::metrics::{report, Taxonomy, WUPS_THRESHOLDS};
use dppnet::model::{accuracy, predict_all, Bundle, Encoded, Model};
use dppnet::ops::argmax;
use dppnet::oracle::{bucket_identity, dense_equivalence, gradient_suite, metric_fixtures};
use dppnet::synthetic::generate;
use dppnet::tensor::{Scalar, Tensor};
use dppnet::trainer::train;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::args::{EvalArgs, HashStatsArgs, PredictArgs, RetrieveArgs, TrainArgs, DATA_ENV};
use crate::config::{Precision, RunConfig};
use crate::CliError;

pub type CmdResult = Result<Value, CliError>;

/// Runs `$body` with the scalar type `S` bound to the configured width.
macro_rules! with_precision {
    ($precision:expr, $body:ident ( $($arg:expr),* )) => {
        match $precision {
            Precision::F32 => $body::<f32>($($arg),*),
            Precision::F64 => $body::<f64>($($arg),*),
        }
    };
}

fn io_err(context: String) -> impl FnOnce(std::io::Error) -> Error {
    move |source| Error::Io { context, source }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))
}

pub fn gen(cfg: &RunConfig) -> CmdResult {
    let out = cfg.out_dir("data");
    let splits = generate(&cfg.generator, cfg.seed)?;
    create_dir(&out)?;
    for (name, split) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        split.save_jsonl(&out.join(format!("{name}.jsonl")))?;
    }
    cfg.save(&out)?;
    Ok(json!({
        "out": out,
        "train": splits.train.len(),
        "val": splits.val.len(),
        "test": splits.test.len(),
        "feature_dim": cfg.generator.feature_dim(),
        "seed": cfg.seed,
    }))
}

fn data_dir(args: &TrainArgs, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    args.data
        .clone()
        .or_else(|| cfg.data.clone())
        .ok_or_else(|| CliError::Usage(format!("no data directory: pass --data, set {DATA_ENV}, or set `data` in the config")))
}

pub fn train_cmd(args: &TrainArgs, cfg: &RunConfig) -> CmdResult {
    let mut cfg = cfg.clone();
    let data = data_dir(args, &cfg)?;
    cfg.data = Some(data.clone());
    if let Some(p) = &args.pretrained {
        cfg.pretrained = Some(p.clone());
    }
    let train_set = Dataset::load_jsonl(&data.join("train.jsonl"))?;
    let val_set = Dataset::load_jsonl(&data.join("val.jsonl"))?;
    let test_path = data.join("test.jsonl");
    let test_set = test_path.exists().then(|| Dataset::load_jsonl(&test_path)).transpose()?;
    let (vocab, answers) = build_vocab(&train_set)?;
    cfg.model.features = train_set.feature_dim().unwrap_or(cfg.model.features);
    cfg.model.vocab = vocab.len();
    cfg.model.answers = answers.len();
    with_precision!(cfg.precision, train_typed(cfg, train_set, val_set, test_set, vocab, answers))
}

fn train_typed<S: Scalar>(
    cfg: RunConfig,
    train_set: Dataset,
    val_set: Dataset,
    test_set: Option<Dataset>,
    vocab: dppnet::data::Vocabulary,
    answers: dppnet::data::AnswerSpace,
) -> CmdResult {
    let out = cfg.out_dir("checkpoint");
    let mut model = Model::<S>::new(cfg.model.clone())?;
    let copied = match &cfg.pretrained {
        Some(dir) => {
            let enc = load_pretrained::<S>(dir, Some((cfg.model.embed, cfg.model.hidden)))?;
            Some(model.load_pretrained(&enc, &vocab)?)
        }
        None => None,
    };
    let f = cfg.model.features;
    let tr = Encoded::<S>::new(&train_set, &vocab, &answers, f)?;
    let va = Encoded::<S>::new(&val_set, &vocab, &answers, f)?;

    let start = Instant::now();
    let outcome = train(model, &tr, &va, &cfg.schedule, |log| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  train {:.4}  val {:.4}  frozen {}  {:.1}s",
            log.epoch,
            log.train_loss,
            log.train_acc,
            log.val_acc,
            log.frozen.len(),
            start.elapsed().as_secs_f64()
        );
    })?;
    let seconds = start.elapsed().as_secs_f64();

    let test_acc = match &test_set {
        Some(t) => {
            let te = Encoded::<S>::new(t, &vocab, &answers, f)?;
            Some(accuracy(&predict_all(&outcome.model, &te, None)?, &te.targets))
        }
        None => None,
    };
    create_dir(&out)?;
    let bundle = Bundle {
        model: outcome.model,
        vocab,
        answers,
    };
    bundle.save(&out)?;
    cfg.save(&out)?;
    let mut log = String::new();
    for l in &outcome.logs {
        log.push_str(&serde_json::to_string(l).map_err(Error::from)?);
        log.push('\n');
    }
    let log_path = out.join("log.jsonl");
    fs::write(&log_path, log).map_err(io_err(format!("writing {}", log_path.display())))?;

    Ok(json!({
        "checkpoint": out,
        "variant": cfg.model.variant,
        "precision": cfg.precision,
        "params": cfg.model.param_count(),
        "epochs": outcome.logs.len(),
        "best_epoch": outcome.best_epoch,
        "best_val_acc": outcome.best_val_acc,
        "test_acc": test_acc,
        "stop": outcome.stop,
        "skipped": outcome.skipped,
        "pretrained_rows": copied,
        "seconds": seconds,
    }))
}

/// Reads a JSON-lines file into one value per nonblank line.
fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, Error> {
    let file = fs::File::open(path).map_err(io_err(format!("opening {}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(format!("reading {}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PredictionLine {
    Many { answers: Vec<String> },
    One { answer: String },
}

#[derive(Deserialize)]
struct ChoiceLine {
    candidates: Vec<String>,
}

pub fn eval(args: &EvalArgs, cfg: &RunConfig) -> CmdResult {
    let data = Dataset::load_jsonl(&args.dataset)?;
    let predictions: Vec<Vec<String>> = match (&args.checkpoint, &args.predictions) {
        (Some(dir), _) => with_precision!(cfg.precision, model_predictions(dir, &data, args.multiple_choice.as_deref()))?,
        (None, Some(path)) => read_jsonl::<PredictionLine>(path)?
            .into_iter()
            .map(|l| match l {
                PredictionLine::Many { answers } => answers,
                PredictionLine::One { answer } => vec![answer],
            })
            .collect(),
        (None, None) => return Err(CliError::Usage("pass --checkpoint or --predictions".into())),
    };
    let truths: Vec<Vec<String>> = data.examples.iter().map(|e| e.answers.clone()).collect();
    let taxonomy = match (&args.taxonomy, args.no_wups) {
        (_, true) => None,
        (Some(path), false) => Some(Taxonomy::load(path)?),
        (None, false) => Some(Taxonomy::toy()),
    };
    let thresholds = if args.wups_thresholds.is_empty() {
        WUPS_THRESHOLDS.to_vec()
    } else {
        args.wups_thresholds.clone()
    };
    if let Some(t) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(CliError::Usage(format!("WUPS threshold {t} is outside [0, 1]")));
    }
    let thresholds = if taxonomy.is_some() { thresholds } else { Vec::new() };
    let r = report(&predictions, &truths, taxonomy.as_ref(), &thresholds, args.vqa_consensus)?;
    Ok(serde_json::to_value(r).map_err(Error::from)?)
}

fn model_predictions<S: Scalar>(dir: &Path, data: &Dataset, choices: Option<&Path>) -> Result<Vec<Vec<String>>, CliError> {
    let bundle = Bundle::<S>::load(dir)?;
    let enc = bundle.encode(data)?;
    let masks = match choices {
        Some(path) => {
            let lines = read_jsonl::<ChoiceLine>(path)?;
            if lines.len() != data.len() {
                return Err(CliError::Usage(format!(
                    "{} candidate lists for {} examples",
                    lines.len(),
                    data.len()
                )));
            }
            let masks = lines
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    let classes: Vec<usize> = l.candidates.iter().filter_map(|c| bundle.answers.class(c)).collect();
                    if classes.is_empty() {
                        Err(CliError::Usage(format!("line {}: no candidate is in the answer space", i + 1)))
                    } else {
                        Ok(classes)
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            Some(masks)
        }
        None => None,
    };
    let preds = predict_all(&bundle.model, &enc, masks.as_deref())?;
    Ok(preds.into_iter().map(|c| vec![bundle.answers.answer(c).to_string()]).collect())
}

pub fn predict(args: &PredictArgs, cfg: &RunConfig) -> Result<Vec<Value>, CliError> {
    let data = match (&args.dataset, &args.question, &args.features) {
        (Some(path), _, _) => Dataset::load_jsonl(path)?,
        (None, Some(question), Some(features)) => {
            let features: Vec<f64> = serde_json::from_str(features)
                .map_err(|e| CliError::Usage(format!("--features must be a JSON array of numbers: {e}")))?;
            Dataset::new(vec![QAExample {
                id: "0".into(),
                features,
                question: question.clone(),
                answers: Vec::new(),
            }])
        }
        _ => return Err(CliError::Usage("pass --dataset, or --question with --features".into())),
    };
    with_precision!(cfg.precision, predict_typed(&args.checkpoint, &data))
}

fn predict_typed<S: Scalar>(dir: &Path, data: &Dataset) -> Result<Vec<Value>, CliError> {
    const CHUNK: usize = 256;
    let bundle = Bundle::<S>::load(dir)?;
    let enc = bundle.encode(data)?;
    let mut out = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(CHUNK) {
        let probs: Tensor<S> = bundle.model.probabilities(&enc.batch(chunk)?)?;
        for (row, &i) in chunk.iter().enumerate() {
            let p = probs.row(row);
            let class = argmax(p);
            out.push(json!({
                "id": data.examples[i].id,
                "question": data.examples[i].question,
                "answer": bundle.answers.answer(class),
                "probability": p[class].as_f64(),
            }));
        }
    }
    Ok(out)
}

pub fn gradcheck(cfg: &RunConfig) -> Result<(Value, bool), CliError> {
    let suite = gradient_suite(cfg.seed)?;
    let equivalence = dense_equivalence(50, cfg.seed)?;
    let buckets = bucket_identity(cfg.seed)?;
    let metrics = metric_fixtures();
    let passed = suite.passed && equivalence.passed && buckets.iter().all(|b| b.exact) && metrics.iter().all(|m| m.passed);
    let value = json!({
        "passed": passed,
        "gradients": suite,
        "dense_equivalence": equivalence,
        "bucket_identity": buckets,
        "metrics": metrics,
    });
    Ok((value, passed))
}

pub fn hash_stats_cmd(args: &HashStatsArgs) -> CmdResult {
    let spec = HashSpec::new(args.m, args.n, args.k, args.seed_psi, args.seed_xi)?;
    Ok(serde_json::to_value(hash_stats(&spec)?).map_err(Error::from)?)
}

pub fn retrieve(args: &RetrieveArgs, cfg: &RunConfig) -> CmdResult {
    with_precision!(cfg.precision, retrieve_typed(args))
}

fn retrieve_typed<S: Scalar>(args: &RetrieveArgs) -> CmdResult {
    let bundle = Bundle::<S>::load(&args.checkpoint)?;
    let corpus: Vec<String> = Dataset::load_jsonl(&args.corpus)?
        .examples
        .into_iter()
        .map(|e| e.question)
        .collect();
    let neighbors = bundle.retrieve(&args.query, &corpus, args.top_k)?;
    Ok(json!({ "query": args.query, "neighbors": neighbors }))
}

pub fn write_lines(values: &[Value]) -> std::io::Result<()> {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    for v in values {
        writeln!(lock, "{v}")?;
    }
    Ok(())
}
