//! Command-line front end.
//!
//! Every subcommand also accepts `--config FILE`: one `key = value` per line, `#`
//! comments, keys named like the long flags. File values are injected before the
//! command-line flags, and a flag given on the command line wins.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::constraints::ConstraintSet;
use crate::data::{self, gen_anticorrelated, gen_toy, split, write_csv, DataSplits, Rect, Scenario, ToySpec};
use crate::error::{Error, Result};
use crate::inference::{to_json, DEFAULT_BEAM_WIDTH, DEFAULT_ENUM_CAP, TRAIN_BEAM_WIDTH};
use crate::losses::DEFAULT_LAMBDA;
use crate::model::{LabelOrder, ModelBundle};
use crate::nnet::TrainConfig;
use crate::pipeline::{
    evaluate, predict, run_unsup, sweep_beam, train_supervised, Decoder, Mode, PipelineConfig, SplitDataset, UnsupConfig,
    UnsupMethod,
};

const META_FILE: &str = "meta.json";

#[derive(Debug, Parser)]
#[command(name = "seqlabel", version, about = "Multi-label classification with a sequential integrator", args_override_self = true)]
pub struct Cli {
    /// Flat `key = value` file supplying defaults for the subcommand's flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the two-label rectangle toy (or the anti-correlated toy) and split it.
    GenToy(GenToyArgs),
    /// Train a Base-Seq or Seq-only model.
    Train(TrainArgs),
    /// Evaluate a trained model on the test split.
    Eval(EvalArgs),
    /// Top-1 accuracy for a range of beam widths.
    SweepBeam(SweepArgs),
    /// Compare pseudo-labeling or constraint-loss training against a supervised baseline.
    Unsup(UnsupArgs),
    /// Decode unlabeled inputs and print the candidates as JSON.
    Decode(DecodeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ToyScenario {
    CompleteOverlap,
    PartialOverlap,
    Disjoint,
    Anticorrelated,
}

#[derive(Debug, Args)]
pub struct GenToyArgs {
    #[arg(long, value_enum, default_value = "complete-overlap")]
    pub scenario: ToyScenario,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.35,0.15,0.5")]
    pub split: String,
    /// Override rectangle 1 as `x0,x1,y0,y1`.
    #[arg(long)]
    pub rect1: Option<String>,
    #[arg(long)]
    pub rect2: Option<String>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

/// Where the labeled data lives.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory holding train.csv, valid.csv and test.csv (or .arff).
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Number of trailing label columns; read from the directory's meta.json if omitted.
    #[arg(long)]
    pub labels: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    BaseSeq,
    SeqOnly,
}

#[derive(Debug, Args)]
pub struct HyperArgs {
    #[arg(long, value_enum, default_value = "base-seq")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `identity`, `reverse`, or a comma-separated 1-based permutation.
    #[arg(long, default_value = "identity")]
    pub label_order: String,
    #[arg(long, default_value = "100,100")]
    pub base_hidden: String,
    #[arg(long, default_value = "300,300")]
    pub seq_hidden: String,
    #[arg(long, default_value_t = 1e-4)]
    pub base_lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub base_weight_decay: f64,
    #[arg(long, default_value_t = 0.8)]
    pub base_dropout: f64,
    #[arg(long, default_value_t = 4)]
    pub base_batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub seq_lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub seq_weight_decay: f64,
    #[arg(long, default_value_t = 0.1)]
    pub seq_dropout: f64,
    #[arg(long, default_value_t = 16)]
    pub seq_batch: usize,
    #[arg(long, default_value_t = 20)]
    pub patience: usize,
    #[arg(long, default_value_t = 500)]
    pub max_epochs: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Model bundle path; defaults to `<data>/model.bundle`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// History CSV path; defaults to the bundle path with `.history.csv`.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DecoderArg {
    Beam,
    BeamSat,
    Exact,
    Greedy,
    Independent,
}

#[derive(Debug, Args)]
pub struct DecodeOpts {
    #[arg(long, value_enum, default_value = "beam")]
    pub decoder: DecoderArg,
    /// Beam width, or the number of valuations kept by the exact decoder.
    #[arg(long, default_value_t = DEFAULT_BEAM_WIDTH)]
    pub k: usize,
    /// Label limit of the exact decoder.
    #[arg(long, default_value_t = DEFAULT_ENUM_CAP)]
    pub cap: usize,
    /// DIMACS CNF file; required by beam-sat, used for violation ratios otherwise.
    #[arg(long)]
    pub constraints: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub decode: DecodeOpts,
    #[arg(long, default_value = "1,2,5,10")]
    pub topk: String,
    /// Recorded in the report.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "1,2,4,8,16,32,64")]
    pub widths: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Pseudo,
    Consloss,
}

#[derive(Debug, Args)]
pub struct UnsupArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    pub decode: DecodeOpts,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    /// One ratio or a comma-separated grid.
    #[arg(long, default_value = "0.1,0.3,0.5,0.7,0.9,0.95")]
    pub ratio: String,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    /// Beam width for pseudo-labels and constraint-loss candidates.
    #[arg(long, default_value_t = TRAIN_BEAM_WIDTH)]
    pub train_beam: usize,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long, default_value = "1,2,5,10")]
    pub topk: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// CSV of feature columns with a header row.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub decode: DecodeOpts,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                stdout.write_all(b"\n")?;
            }
            Ok(())
        }
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    let items = s
        .split(',')
        .map(|t| t.trim().parse::<T>().map_err(|_| Error::Config(format!("bad {what} value {t:?}"))))
        .collect::<Result<Vec<T>>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("{what} list is empty")));
    }
    Ok(items)
}

fn parse_hidden(s: &str, what: &str) -> Result<Vec<usize>> {
    let h = parse_list::<usize>(s, what)?;
    if h.contains(&0) {
        return Err(Error::Config(format!("{what} sizes must be positive")));
    }
    Ok(h)
}

fn parse_rect(s: &str) -> Result<Rect> {
    match parse_list::<f64>(s, "rectangle")?.as_slice() {
        &[x0, x1, y0, y1] => Ok(Rect::new(x0, x1, y0, y1)),
        _ => Err(Error::Config(format!("rectangle {s:?} needs four values x0,x1,y0,y1"))),
    }
}

fn load_constraints(path: &Path) -> Result<ConstraintSet> {
    ConstraintSet::parse_dimacs(&read_text(path)?).map_err(|e| match e {
        Error::Parse { line, msg } => Error::Parse {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

fn cmd_gen_toy(a: &GenToyArgs) -> Result<()> {
    let fractions: [f64; 3] = parse_list::<f64>(&a.split, "split")?
        .try_into()
        .map_err(|_| Error::Config("split needs three fractions".into()))?;
    let (ds, cs, scenario, rects) = match a.scenario {
        ToyScenario::Anticorrelated => {
            if a.n == 0 {
                return Err(Error::Config("n must be positive".into()));
            }
            (gen_anticorrelated(a.n, a.seed), ConstraintSet::empty(2), "anticorrelated".to_string(), None)
        }
        sc => {
            let scenario = match sc {
                ToyScenario::CompleteOverlap => Scenario::CompleteOverlap,
                ToyScenario::PartialOverlap => Scenario::PartialOverlap,
                _ => Scenario::Disjoint,
            };
            let mut spec = ToySpec::new(scenario, a.n, a.seed);
            if let Some(r) = &a.rect1 {
                spec.rect1 = parse_rect(r)?;
            }
            if let Some(r) = &a.rect2 {
                spec.rect2 = parse_rect(r)?;
            }
            let (ds, cs) = gen_toy(&spec)?;
            (ds, cs, scenario.to_string(), Some((spec.rect1, spec.rect2)))
        }
    };
    let parts = split(&ds, fractions, a.seed)?;
    for (name, part) in [("train", &parts.train), ("valid", &parts.valid), ("test", &parts.test)] {
        write_text(&a.out.join(format!("{name}.csv")), &write_csv(part)?)?;
    }
    write_text(&a.out.join("constraints.cnf"), &cs.to_dimacs())?;
    let summary = json!({
        "scenario": scenario,
        "n_samples": a.n,
        "seed": a.seed,
        "n_labels": ds.n_labels(),
        "n_features": ds.n_features(),
        "split": fractions,
        "sizes": {"train": parts.train.len(), "valid": parts.valid.len(), "test": parts.test.len()},
        "rects": rects.map(|(r1, r2)| json!([r1, r2])),
        "label_frequencies": (0..ds.n_labels())
            .map(|j| ds.labels().filter(|v| v[j]).count() as f64 / ds.len() as f64)
            .collect::<Vec<_>>(),
    });
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_text(&a.out.join(META_FILE), &text)?;
    emit(None, &text)
}

fn label_count(d: &DataArgs) -> Result<usize> {
    if let Some(c) = d.labels {
        return Ok(c);
    }
    let meta = d.data.join(META_FILE);
    if !meta.exists() {
        return Err(Error::Config(format!("--labels not given and {} not found", meta.display())));
    }
    let v: serde_json::Value = serde_json::from_str(&read_text(&meta)?)
        .map_err(|e| Error::Config(format!("{}: {e}", meta.display())))?;
    v.get("n_labels")
        .and_then(|n| n.as_u64())
        .map(|n| n as usize)
        .ok_or_else(|| Error::Config(format!("{} has no n_labels", meta.display())))
}

fn part_path(dir: &Path, name: &str) -> PathBuf {
    let arff = dir.join(format!("{name}.arff"));
    if arff.exists() {
        arff
    } else {
        dir.join(format!("{name}.csv"))
    }
}

fn load_part(d: &DataArgs, name: &str) -> Result<data::TabularDataset> {
    data::load_dataset(&part_path(&d.data, name), label_count(d)?)
}

fn load_splits(d: &DataArgs) -> Result<DataSplits> {
    let splits = DataSplits {
        train: load_part(d, "train")?,
        valid: load_part(d, "valid")?,
        test: load_part(d, "test")?,
    };
    for part in [&splits.valid, &splits.test] {
        if part.n_features() != splits.train.n_features() || part.n_labels() != splits.train.n_labels() {
            return Err(Error::Shape("train, valid and test files disagree on their columns".into()));
        }
    }
    Ok(splits)
}

fn pipeline_config(h: &HyperArgs, n_labels: usize) -> Result<PipelineConfig> {
    let base_train = TrainConfig {
        learning_rate: h.base_lr,
        weight_decay: h.base_weight_decay,
        dropout_rate: h.base_dropout,
        batch_size: h.base_batch,
        patience: h.patience,
        max_epochs: h.max_epochs,
        seed: h.seed,
        keep_initial: false,
    };
    let seq_train = TrainConfig {
        learning_rate: h.seq_lr,
        weight_decay: h.seq_weight_decay,
        dropout_rate: h.seq_dropout,
        batch_size: h.seq_batch,
        seed: h.seed.wrapping_add(1),
        ..base_train.clone()
    };
    base_train.validate()?;
    seq_train.validate()?;
    Ok(PipelineConfig {
        mode: match h.mode {
            ModeArg::BaseSeq => Mode::BaseSeq,
            ModeArg::SeqOnly => Mode::SeqOnly,
        },
        base_hidden: parse_hidden(&h.base_hidden, "base-hidden")?,
        seq_hidden: parse_hidden(&h.seq_hidden, "seq-hidden")?,
        base_train,
        seq_train,
        label_order: Some(LabelOrder::parse(&h.label_order, n_labels)?),
        init_seed: h.seed,
    })
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let splits = load_splits(&a.data)?;
    let cfg = pipeline_config(&a.hyper, splits.train.n_labels())?;
    let trained = train_supervised(&SplitDataset::supervised(&splits), &cfg)?;
    let out = a.out.clone().unwrap_or_else(|| a.data.data.join("model.bundle"));
    let history = a.history.clone().unwrap_or_else(|| out.with_extension("history.csv"));
    write_text(&out, &trained.bundle.to_text())?;
    let mut csv = String::from("stage,epoch,train_loss,valid_loss\n");
    let stages = trained.base_history.iter().map(|h| ("base", h)).chain([("seq", &trained.seq_history)]);
    for (stage, h) in stages {
        for r in &h.epochs {
            csv.push_str(&format!("{stage},{},{:?},{:?}\n", r.epoch, r.train_loss, r.valid_loss));
        }
    }
    write_text(&history, &csv)?;
    let summary = json!({
        "bundle": out,
        "history": history,
        "mode": cfg.mode,
        "seed": a.hyper.seed,
        "label_order": trained.bundle.label_order(),
        "base": trained.base_history.as_ref().map(|h| json!({"epochs": h.epochs.len(), "best_epoch": h.best_epoch, "best_valid_loss": h.best_valid_loss})),
        "seq": {"epochs": trained.seq_history.epochs.len(), "best_epoch": trained.seq_history.best_epoch, "best_valid_loss": trained.seq_history.best_valid_loss},
    });
    emit(None, &serde_json::to_string_pretty(&summary).expect("summary serializes"))
}

fn load_bundle(path: &Path) -> Result<ModelBundle> {
    ModelBundle::from_text(&read_text(path)?).map_err(|e| match e {
        Error::Parse { line, msg } => Error::Parse {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

fn decoder(o: &DecodeOpts) -> Result<Decoder> {
    if o.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    Ok(match o.decoder {
        DecoderArg::Beam => Decoder::Beam { width: o.k },
        DecoderArg::BeamSat => Decoder::BeamSat { width: o.k },
        DecoderArg::Exact => Decoder::Exact { k: o.k, cap: o.cap },
        DecoderArg::Greedy => Decoder::Greedy,
        DecoderArg::Independent => Decoder::Independent { width: o.k },
    })
}

fn optional_constraints(o: &DecodeOpts) -> Result<Option<ConstraintSet>> {
    let cs = o.constraints.as_deref().map(load_constraints).transpose()?;
    if o.decoder == DecoderArg::BeamSat && cs.is_none() {
        return Err(Error::Config("--decoder beam-sat requires --constraints".into()));
    }
    Ok(cs)
}

fn check_bundle_fits(bundle: &ModelBundle, ds: &data::TabularDataset) -> Result<()> {
    if bundle.n_features() != ds.n_features() || bundle.n_labels() != ds.n_labels() {
        return Err(Error::Shape(format!(
            "model expects {} features and {} labels, data has {} and {}",
            bundle.n_features(),
            bundle.n_labels(),
            ds.n_features(),
            ds.n_labels()
        )));
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let bundle = load_bundle(&a.model)?;
    let test = load_part(&a.data, "test")?;
    check_bundle_fits(&bundle, &test)?;
    let cs = optional_constraints(&a.decode)?;
    let k_list = parse_list::<usize>(&a.topk, "topk")?;
    let report = evaluate(&bundle, cs.as_ref(), &test.rows, decoder(&a.decode)?, &k_list, a.seed)?;
    emit(a.out.as_deref(), &report.to_json())
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let bundle = load_bundle(&a.model)?;
    let test = load_part(&a.data, "test")?;
    check_bundle_fits(&bundle, &test)?;
    let widths = parse_list::<usize>(&a.widths, "widths")?;
    let mut csv = String::from("width,accuracy\n");
    for (w, acc) in sweep_beam(&bundle, &test.rows, &widths)? {
        csv.push_str(&format!("{w},{acc:?}\n"));
    }
    emit(a.out.as_deref(), &csv)
}

#[derive(Serialize)]
struct UnsupSummary<'a> {
    method: UnsupMethod,
    lambda: f64,
    seed: u64,
    split_seed: u64,
    /// Accuracy difference (percentage points) per ratio, in grid order.
    deltas: Vec<(f64, f64)>,
    runs: &'a [crate::pipeline::UnsupOutcome],
}

fn cmd_unsup(a: &UnsupArgs) -> Result<()> {
    let splits = load_splits(&a.data)?;
    let cfg = pipeline_config(&a.hyper, splits.train.n_labels())?;
    let path = a
        .decode
        .constraints
        .clone()
        .ok_or_else(|| Error::Config("unsup requires --constraints".into()))?;
    let cs = load_constraints(&path)?;
    let ratios = parse_list::<f64>(&a.ratio, "ratio")?;
    let k_list = parse_list::<usize>(&a.topk, "topk")?;
    let method = match a.method {
        MethodArg::Pseudo => UnsupMethod::Pseudo,
        MethodArg::Consloss => UnsupMethod::Consloss,
    };
    if a.train_beam == 0 {
        return Err(Error::Config("train-beam must be at least 1".into()));
    }
    let dec = decoder(&a.decode)?;
    let runs = ratios
        .iter()
        .map(|&r| {
            let u = UnsupConfig {
                method,
                ratio: r,
                lambda: a.lambda,
                beam_width: a.train_beam,
                split_seed: a.split_seed,
            };
            run_unsup(&splits, &cs, &cfg, &u, dec, &k_list)
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = UnsupSummary {
        method,
        lambda: a.lambda,
        seed: a.hyper.seed,
        split_seed: a.split_seed,
        deltas: runs.iter().map(|r| (r.ratio, r.accuracy_delta)).collect(),
        runs: &runs,
    };
    emit(a.out.as_deref(), &serde_json::to_string_pretty(&summary).expect("summary serializes"))
}

fn cmd_decode(a: &DecodeArgs) -> Result<()> {
    let bundle = load_bundle(&a.model)?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(&a.input).map_err(|e| {
        Error::Io(std::io::Error::other(format!("{}: {e}", a.input.display())))
    })?;
    let mut inputs = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let x = rec
            .iter()
            .map(|c| c.parse::<f64>().map_err(|_| Error::Parse { line, msg: format!("bad number {c:?}") }))
            .collect::<Result<Vec<_>>>()?;
        if x.len() != bundle.n_features() {
            return Err(Error::Shape(format!("line {line}: expected {} features, got {}", bundle.n_features(), x.len())));
        }
        inputs.push(x);
    }
    let cs = optional_constraints(&a.decode)?;
    let out = predict(&bundle, cs.as_ref(), &inputs, decoder(&a.decode)?)?;
    let text = out.iter().map(|c| to_json(c)).collect::<Vec<_>>().join("\n");
    emit(None, &text)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenToy(a) => cmd_gen_toy(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::SweepBeam(a) => cmd_sweep(a),
        Command::Unsup(a) => cmd_unsup(a),
        Command::Decode(a) => cmd_decode(a),
    }
}

/// Reads `key = value` lines, rejecting keys that are not long flags of `subcommand`.
fn config_args(path: &Path, subcommand: &str) -> Result<Vec<String>> {
    let root = Cli::command();
    let sub = root
        .find_subcommand(subcommand)
        .ok_or_else(|| Error::Config(format!("unknown subcommand {subcommand:?}")))?;
    let known: BTreeSet<String> = sub
        .get_arguments()
        .filter_map(|a| a.get_long().map(str::to_string))
        .filter(|l| l != "config" && l != "help")
        .collect();
    let mut args = Vec::new();
    for (i, raw) in read_text(path)?.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: format!("{}: expected `key = value`", path.display()),
        })?;
        let key = key.trim().replace('_', "-");
        if !known.contains(&key) {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("{}: unknown key {key:?} for {subcommand}", path.display()),
            });
        }
        let value = value.trim().trim_matches('"');
        args.push(format!("--{key}={value}"));
    }
    Ok(args)
}

fn config_path(args: &[String]) -> Option<PathBuf> {
    args.iter().enumerate().find_map(|(i, a)| {
        if a == "--config" {
            args.get(i + 1).map(PathBuf::from)
        } else {
            a.strip_prefix("--config=").map(PathBuf::from)
        }
    })
}

/// Parses `args` (program name first), merging a `--config` file under the flags.
pub fn parse_args(args: Vec<String>) -> std::result::Result<Cli, ParseFailure> {
    let first = Cli::try_parse_from(&args).map_err(ParseFailure::Clap)?;
    let Some(path) = config_path(&args) else {
        return Ok(first);
    };
    let sub = Cli::command()
        .get_subcommands()
        .map(|s| s.get_name().to_string())
        .find(|name| args.iter().skip(1).any(|a| a == name))
        .expect("parsed command has a subcommand");
    let extra = config_args(&path, &sub).map_err(ParseFailure::Lib)?;
    let pos = args.iter().position(|a| *a == sub).expect("subcommand present") + 1;
    let mut merged = args[..pos].to_vec();
    merged.extend(extra);
    merged.extend_from_slice(&args[pos..]);
    Cli::try_parse_from(&merged).map_err(ParseFailure::Clap)
}

#[derive(Debug)]
pub enum ParseFailure {
    Clap(clap::Error),
    Lib(Error),
}

/// Process entry point; returns the exit code.
pub fn main_with_args(args: Vec<String>) -> i32 {
    let cli = match parse_args(args) {
        Ok(cli) => cli,
        Err(ParseFailure::Clap(e)) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(ParseFailure::Clap(e)) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return 2;
        }
        Err(ParseFailure::Lib(e)) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::SWEEP_WIDTHS;
    use crate::pipeline::RATIO_GRID;

    fn argv(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.conf");
        fs::write(&cfg, "# eval settings\nk = 8\ndecoder = exact\ntopk = 1,2  # trailing comment\n").unwrap();
        let c = cfg.display();
        let cli = parse_args(argv(&format!("seqlabel eval --config {c} --model m --data d --k 4"))).unwrap();
        let Command::Eval(a) = cli.command else { panic!() };
        assert_eq!(a.decode.k, 4);
        assert_eq!(a.decode.decoder, DecoderArg::Exact);
        assert_eq!(a.topk, "1,2");
        let cli = parse_args(argv(&format!("seqlabel eval --model m --data d --config={c}"))).unwrap();
        let Command::Eval(a) = cli.command else { panic!() };
        assert_eq!(a.decode.k, 8);
    }

    #[test]
    fn config_keys_accept_underscores_and_reject_unknown() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.conf");
        fs::write(&good, "seq_lr = 0.01\nmax-epochs = 3\n").unwrap();
        let cli = parse_args(argv(&format!("seqlabel train --data d --config {}", good.display()))).unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        assert_eq!((a.hyper.seq_lr, a.hyper.max_epochs), (0.01, 3));
        let bad = dir.path().join("bad.conf");
        fs::write(&bad, "beam_width = 3\n").unwrap();
        match parse_args(argv(&format!("seqlabel train --data d --config {}", bad.display()))) {
            Err(ParseFailure::Lib(Error::Parse { line: 1, msg })) => assert!(msg.contains("beam-width")),
            other => panic!("{other:?}"),
        }
        let ugly = dir.path().join("ugly.conf");
        fs::write(&ugly, "just words\n").unwrap();
        assert!(parse_args(argv(&format!("seqlabel train --data d --config {}", ugly.display()))).is_err());
    }

    #[test]
    fn defaults_match_training_hyperparameters() {
        let cli = parse_args(argv("seqlabel train --data d")).unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        let cfg = pipeline_config(&a.hyper, 3).unwrap();
        assert_eq!(cfg.base_train.learning_rate, TrainConfig::base_defaults().learning_rate);
        assert_eq!(cfg.base_train.dropout_rate, 0.8);
        assert_eq!(cfg.base_train.batch_size, 4);
        assert_eq!(cfg.seq_train.learning_rate, 1e-3);
        assert_eq!(cfg.seq_train.batch_size, 16);
        assert_eq!(cfg.seq_hidden, vec![300, 300]);
        assert_eq!(cfg.base_train.patience, 20);
        let cli = parse_args(argv("seqlabel eval --model m --data d")).unwrap();
        let Command::Eval(a) = cli.command else { panic!() };
        assert_eq!(a.decode.k, 4);
        let cli = parse_args(argv("seqlabel sweep-beam --model m --data d")).unwrap();
        let Command::SweepBeam(a) = cli.command else { panic!() };
        assert_eq!(parse_list::<usize>(&a.widths, "w").unwrap(), SWEEP_WIDTHS.to_vec());
        let cli = parse_args(argv("seqlabel unsup --data d --method pseudo")).unwrap();
        let Command::Unsup(a) = cli.command else { panic!() };
        assert_eq!(parse_list::<f64>(&a.ratio, "r").unwrap(), RATIO_GRID.to_vec());
        assert_eq!(a.train_beam, 5);
    }

    #[test]
    fn bad_scenario_is_a_usage_error() {
        assert!(matches!(parse_args(argv("seqlabel gen-toy --scenario nope --out x")), Err(ParseFailure::Clap(_))));
        assert_eq!(main_with_args(argv("seqlabel gen-toy --scenario nope --out x")), 2);
    }
}
