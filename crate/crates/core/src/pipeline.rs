//! Training stages, pseudo-labeling, constraint-loss training and evaluation.
//!
//! Datasets keep labels in column order. Models may predict them in a different
//! order, so targets are permuted into model order on the way in and constraints
//! are remapped once per run.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::constraints::ConstraintSet;
use crate::data::{split_unsupervised, DataSplits};
use crate::error::{Error, Result};
use crate::inference::{beam_search, beam_search_sat, exact_topk, Scored, SamplingStrategy, TRAIN_BEAM_WIDTH};
use crate::losses::{base_bce_loss, constraint_loss, supervised_loss, DEFAULT_LAMBDA};
use crate::model::{
    joint_prob_base, BaseSeqModel, CondView, ConditionalModel, Independent, LabelOrder, ModelBundle, SeqOnlyModel,
    Valuation,
};
use crate::nnet::{train_loop, DenseNet, Dropout, Gradients, History, Objective, TrainConfig};

pub type Labeled = (Vec<f64>, Valuation);

/// Training data after the supervised/unsupervised cut.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train_supervised: Vec<Labeled>,
    pub train_unsupervised: Vec<Vec<f64>>,
    pub validation: Vec<Labeled>,
    pub test: Vec<Labeled>,
    /// Fraction of the original training rows moved to `train_unsupervised`.
    pub unsupervised_ratio: f64,
}

impl SplitDataset {
    pub fn new(splits: &DataSplits, unsupervised_ratio: f64, seed: u64) -> Result<Self> {
        let (sup, unsup) = split_unsupervised(&splits.train, unsupervised_ratio, seed)?;
        Ok(Self {
            train_supervised: sup.rows,
            train_unsupervised: unsup,
            validation: splits.valid.rows.clone(),
            test: splits.test.rows.clone(),
            unsupervised_ratio,
        })
    }

    /// Every training row labeled.
    pub fn supervised(splits: &DataSplits) -> Self {
        Self {
            train_supervised: splits.train.rows.clone(),
            train_unsupervised: Vec::new(),
            validation: splits.valid.rows.clone(),
            test: splits.test.rows.clone(),
            unsupervised_ratio: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    BaseSeq,
    SeqOnly,
}

/// Architecture and optimizer settings for both stages.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub base_hidden: Vec<usize>,
    pub seq_hidden: Vec<usize>,
    pub base_train: TrainConfig,
    pub seq_train: TrainConfig,
    /// `None` keeps dataset column order.
    pub label_order: Option<LabelOrder>,
    /// Seeds weight initialization.
    pub init_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::BaseSeq,
            base_hidden: vec![100, 100],
            seq_hidden: vec![300, 300],
            base_train: TrainConfig::base_defaults(),
            seq_train: TrainConfig::sequential_defaults(),
            label_order: None,
            init_seed: 0,
        }
    }
}

fn require_nonempty<T>(rows: &[T], what: &str) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Contract(format!("{what} set is empty")));
    }
    Ok(())
}

fn label_count(rows: &[Labeled]) -> Result<usize> {
    let n = rows.first().map(|r| r.1.len()).ok_or_else(|| Error::Contract("training set is empty".into()))?;
    if n == 0 {
        return Err(Error::Contract("rows carry no labels".into()));
    }
    Ok(n)
}

/// Mean per-label cross-entropy of the base network.
pub struct BaseObjective<'a> {
    pub train: &'a [Labeled],
    pub valid: &'a [Labeled],
}

impl Objective for BaseObjective<'_> {
    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn batch_loss(&mut self, net: &DenseNet, batch: &[usize], mut dropout: Option<&mut Dropout<'_>>) -> Result<(f64, Gradients)> {
        let mut grads = Gradients::zeros_like(net);
        let mut total = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for &i in batch {
            let (x, t) = &self.train[i];
            let trace = net.forward_traced(x, dropout.as_deref_mut())?;
            let (loss, g) = base_bce_loss(trace.output(), t)?;
            net.backward_into(&trace, &g, scale, &mut grads)?;
            total += loss;
        }
        Ok((total * scale, grads))
    }

    fn validation_loss(&mut self, net: &DenseNet) -> Result<f64> {
        require_nonempty(self.valid, "validation")?;
        let losses = self
            .valid
            .par_iter()
            .map(|(x, t)| Ok(base_bce_loss(&net.forward(x)?, t)?.0))
            .collect::<Result<Vec<f64>>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }
}

/// The λ-weighted constraint term applied to unlabeled contexts.
#[derive(Debug, Clone)]
pub struct ConstraintTerm<'a> {
    /// Constraints over model positions.
    pub constraints: &'a ConstraintSet,
    pub lambda: f64,
    pub beam_width: usize,
}

/// Sequence NLL on labeled contexts, plus the constraint loss on unlabeled ones.
///
/// Training indices below `train.len()` are labeled; the rest address `unlabeled`.
/// Targets are in model order.
pub struct SequenceObjective<'a> {
    pub n_labels: usize,
    pub train: &'a [Labeled],
    pub unlabeled: &'a [Vec<f64>],
    pub valid: &'a [Labeled],
    pub constraint: Option<ConstraintTerm<'a>>,
}

impl Objective for SequenceObjective<'_> {
    fn train_len(&self) -> usize {
        self.train.len() + if self.constraint.is_some() { self.unlabeled.len() } else { 0 }
    }

    fn batch_loss(&mut self, net: &DenseNet, batch: &[usize], mut dropout: Option<&mut Dropout<'_>>) -> Result<(f64, Gradients)> {
        let mut grads = Gradients::zeros_like(net);
        let mut total = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for &i in batch {
            if let Some((ctx, target)) = self.train.get(i) {
                let (l, g) = supervised_loss(net, ctx, target, dropout.as_deref_mut())?;
                total += l;
                grads.add_scaled(&g, scale);
                continue;
            }
            let term = self.constraint.as_ref().expect("unlabeled index only without constraint term");
            let ctx = &self.unlabeled[i - self.train.len()];
            // candidates come from the current parameters, without dropout
            let beam = beam_search(&CondView::new(net, ctx, self.n_labels)?, term.beam_width)?;
            let (valid, invalid): (Vec<Valuation>, Vec<Valuation>) = {
                let vals: Vec<Valuation> = beam.into_iter().map(|s| s.valuation).collect();
                term.constraints.split_valid_invalid(&vals)?
            };
            let (l, g) = constraint_loss(net, ctx, &valid, &invalid, dropout.as_deref_mut())?;
            total += term.lambda * l;
            grads.add_scaled(&g, term.lambda * scale);
        }
        Ok((total * scale, grads))
    }

    fn validation_loss(&mut self, net: &DenseNet) -> Result<f64> {
        require_nonempty(self.valid, "validation")?;
        let losses = self
            .valid
            .par_iter()
            .map(|(ctx, t)| {
                let view = CondView::new(net, ctx, self.n_labels)?;
                Ok(-crate::model::sequence_logprob(&view, t)?)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }
}

/// Fits a fresh base network with per-label cross-entropy.
pub fn train_base_stage(train: &[Labeled], valid: &[Labeled], hidden: &[usize], cfg: &TrainConfig, init_seed: u64) -> Result<(DenseNet, History)> {
    let n = label_count(train)?;
    let mut sizes = vec![train[0].0.len()];
    sizes.extend_from_slice(hidden);
    sizes.push(n);
    let net = DenseNet::seeded(&sizes, init_seed)?;
    train_loop(net, &mut BaseObjective { train, valid }, cfg)
}

/// Pairs each row's context with its model-order target.
fn contexts(bundle_ctx: &(dyn Fn(&[f64]) -> Result<Vec<f64>> + Sync), order: &LabelOrder, rows: &[Labeled]) -> Result<Vec<Labeled>> {
    rows.par_iter()
        .map(|(x, v)| Ok((bundle_ctx(x)?, order.to_model(v))))
        .collect()
}

/// Fits the conditional network on precomputed contexts, starting from `init`.
pub fn train_seq_stage(
    init: ConditionalModel,
    train: &[Labeled],
    unlabeled: &[Vec<f64>],
    valid: &[Labeled],
    cfg: &TrainConfig,
    constraint: Option<ConstraintTerm<'_>>,
) -> Result<(ConditionalModel, History)> {
    let mut objective = SequenceObjective {
        n_labels: init.n_labels(),
        train,
        unlabeled,
        valid,
        constraint,
    };
    let (net, history) = train_loop(init.net().clone(), &mut objective, cfg)?;
    let mut cond = init;
    cond.set_net(net)?;
    Ok((cond, history))
}

/// A trained model with its per-stage histories.
#[derive(Debug, Clone)]
pub struct Trained {
    pub bundle: ModelBundle,
    pub base_history: Option<History>,
    pub seq_history: History,
}

/// Supervised two-stage (or Seq-only) training on `data.train_supervised`.
pub fn train_supervised(data: &SplitDataset, cfg: &PipelineConfig) -> Result<Trained> {
    let n = label_count(&data.train_supervised)?;
    let m = data.train_supervised[0].0.len();
    let order = cfg.label_order.clone().unwrap_or_else(|| LabelOrder::identity(n));
    match cfg.mode {
        Mode::BaseSeq => {
            let (base, base_history) =
                train_base_stage(&data.train_supervised, &data.validation, &cfg.base_hidden, &cfg.base_train, cfg.init_seed)?;
            let cond = ConditionalModel::seeded(n, n, &cfg.seq_hidden, cfg.init_seed.wrapping_add(1))?;
            let model = BaseSeqModel::new(base, cond, order)?;
            let bundle = ModelBundle::BaseSeq(model);
            let (bundle, seq_history) = fit_seq(&bundle, data, &cfg.seq_train, &[], None)?;
            Ok(Trained {
                bundle,
                base_history: Some(base_history),
                seq_history,
            })
        }
        Mode::SeqOnly => {
            let cond = ConditionalModel::seeded(n, m, &cfg.seq_hidden, cfg.init_seed.wrapping_add(1))?;
            let bundle = ModelBundle::SeqOnly(SeqOnlyModel::new(cond, order)?);
            let (bundle, seq_history) = fit_seq(&bundle, data, &cfg.seq_train, &[], None)?;
            Ok(Trained {
                bundle,
                base_history: None,
                seq_history,
            })
        }
    }
}

/// Retrains the conditional network of `bundle` (base frozen) on the supervised rows
/// plus `extra` labeled rows, optionally with the constraint term on unlabeled inputs.
fn fit_seq(
    bundle: &ModelBundle,
    data: &SplitDataset,
    cfg: &TrainConfig,
    extra: &[Labeled],
    constraint: Option<(&ConstraintSet, f64, usize)>,
) -> Result<(ModelBundle, History)> {
    let order = bundle.label_order();
    let ctx = |x: &[f64]| bundle.context(x);
    let mut train = contexts(&ctx, order, &data.train_supervised)?;
    train.extend(contexts(&ctx, order, extra)?);
    let valid = contexts(&ctx, order, &data.validation)?;
    let (unlabeled, model_cs) = match constraint {
        Some((cs, _, _)) => (
            data.train_unsupervised.par_iter().map(|x| bundle.context(x)).collect::<Result<Vec<_>>>()?,
            Some(order.remap_constraints(cs)?),
        ),
        None => (Vec::new(), None),
    };
    let term = match (constraint, &model_cs) {
        (Some((_, lambda, beam_width)), Some(cs)) => Some(ConstraintTerm {
            constraints: cs,
            lambda,
            beam_width,
        }),
        _ => None,
    };
    let (cond, history) = train_seq_stage(bundle.cond().clone(), &train, &unlabeled, &valid, cfg, term)?;
    let out = match bundle {
        ModelBundle::BaseSeq(m) => ModelBundle::BaseSeq(BaseSeqModel::new(m.base.clone(), cond, m.label_order.clone())?),
        ModelBundle::SeqOnly(m) => ModelBundle::SeqOnly(SeqOnlyModel::new(cond, m.label_order.clone())?),
    };
    Ok((out, history))
}

/// Labels each input with its most probable constraint-valid beam candidate;
/// inputs without one are dropped. Labels come back in dataset column order.
pub fn pseudo_label(bundle: &ModelBundle, cs: &ConstraintSet, inputs: &[Vec<f64>], beam_width: usize) -> Result<Vec<Labeled>> {
    let order = bundle.label_order();
    let model_cs = order.remap_constraints(cs)?;
    let labeled = inputs
        .par_iter()
        .map(|x| {
            let ctx = bundle.context(x)?;
            let view = bundle.cond().bind(&ctx)?;
            for s in beam_search(&view, beam_width)? {
                if model_cs.eval_full(&s.valuation)? {
                    return Ok(Some((x.clone(), order.to_dataset(&s.valuation))));
                }
            }
            Ok(None)
        })
        .collect::<Result<Vec<Option<Labeled>>>>()?;
    Ok(labeled.into_iter().flatten().collect())
}

/// Second training round of the conditional network on supervised plus pseudo-labeled rows.
pub fn train_with_pseudo_labels(bundle: &ModelBundle, data: &SplitDataset, pseudo: &[Labeled], cfg: &TrainConfig) -> Result<(ModelBundle, History)> {
    fit_seq(bundle, data, cfg, pseudo, None)
}

/// Second training round adding `λ · L_cons` on the unsupervised inputs.
pub fn train_with_constraint_loss(
    bundle: &ModelBundle,
    data: &SplitDataset,
    cs: &ConstraintSet,
    cfg: &TrainConfig,
    lambda: f64,
) -> Result<(ModelBundle, History)> {
    if !cs.sat_with_prefix(&[])? {
        return Err(Error::Contract("constraint set is unsatisfiable".into()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be a non-negative number, got {lambda}")));
    }
    let constraint = (lambda > 0.0).then_some((cs, lambda, TRAIN_BEAM_WIDTH));
    fit_seq(bundle, data, cfg, &[], constraint)
}

/// Which decoder produces predictions during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoder {
    Greedy,
    Beam { width: usize },
    BeamSat { width: usize },
    /// Full enumeration, returning `k` valuations; refuses more than `cap` labels.
    Exact { k: usize, cap: usize },
    /// Beam search under the base marginals alone (independence assumption).
    Independent { width: usize },
}

impl Decoder {
    pub fn name(&self) -> &'static str {
        match self {
            Decoder::Greedy => "greedy",
            Decoder::Beam { .. } => "beam",
            Decoder::BeamSat { .. } => "beam-sat",
            Decoder::Exact { .. } => "exact",
            Decoder::Independent { .. } => "independent",
        }
    }

    pub fn k(&self) -> usize {
        match *self {
            Decoder::Greedy => 1,
            Decoder::Beam { width } | Decoder::BeamSat { width } | Decoder::Independent { width } => width,
            Decoder::Exact { k, .. } => k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub decoder: String,
    pub k: usize,
    pub seed: u64,
    pub n_samples: usize,
    pub accuracy: f64,
    pub topk_accuracy: BTreeMap<usize, f64>,
    pub k_list: Vec<usize>,
    pub violation_ratio: f64,
    pub mean_target_probability: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report always serializes")
    }
}

/// Decoded candidates (model order) and the target's probability for one input.
fn decode_one(bundle: &ModelBundle, model_cs: Option<&ConstraintSet>, x: &[f64], target: &Valuation, decoder: Decoder) -> Result<(Vec<Scored>, f64)> {
    let ctx = bundle.context(x)?;
    let view = bundle.cond().bind(&ctx)?;
    let candidates = match decoder {
        Decoder::Greedy => {
            let v = crate::inference::ancestral_sample(&view, SamplingStrategy::Greedy);
            let logp = crate::model::sequence_logprob(&view, &v)?;
            vec![Scored { valuation: v, logp }]
        }
        Decoder::Beam { width } => beam_search(&view, width)?,
        Decoder::BeamSat { width } => {
            let cs = model_cs.ok_or_else(|| Error::Config("the beam-sat decoder needs a constraint set".into()))?;
            beam_search_sat(&view, width, cs)?
        }
        Decoder::Exact { k, cap } => exact_topk(&view, k, cap)?,
        Decoder::Independent { width } => {
            if !matches!(bundle, ModelBundle::BaseSeq(_)) {
                return Err(Error::Config("the independent decoder needs a base-seq model".into()));
            }
            let out = beam_search(&Independent(&ctx), width)?;
            return Ok((out, joint_prob_base(&ctx, target)?));
        }
    };
    let p = crate::model::sequence_logprob(&view, target)?.exp();
    Ok((candidates, p))
}

/// Exact-match, top-k, violation and target-probability metrics over `test`.
///
/// Top-k reads the first `k` decoder candidates, so it saturates at the decoder's
/// list length.
pub fn evaluate(
    bundle: &ModelBundle,
    cs: Option<&ConstraintSet>,
    test: &[Labeled],
    decoder: Decoder,
    k_list: &[usize],
    seed: u64,
) -> Result<EvalReport> {
    require_nonempty(test, "test")?;
    if k_list.contains(&0) {
        return Err(Error::Config("top-k values must be positive".into()));
    }
    let order = bundle.label_order();
    let model_cs = cs.map(|c| order.remap_constraints(c)).transpose()?;
    let per_sample = test
        .par_iter()
        .map(|(x, t)| {
            let target = order.to_model(t);
            let (cands, p) = decode_one(bundle, model_cs.as_ref(), x, &target, decoder)?;
            let rank = cands.iter().position(|s| s.valuation == target);
            let violates = match (&model_cs, cands.first()) {
                (Some(cs), Some(top)) => !cs.eval_full(&top.valuation)?,
                _ => false,
            };
            Ok((rank, violates, p))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_sample.len() as f64;
    let rate = |k: usize| per_sample.iter().filter(|(r, _, _)| r.is_some_and(|r| r < k)).count() as f64 / n;
    let mut k_list = k_list.to_vec();
    k_list.sort_unstable();
    k_list.dedup();
    Ok(EvalReport {
        decoder: decoder.name().to_string(),
        k: decoder.k(),
        seed,
        n_samples: per_sample.len(),
        accuracy: rate(1),
        topk_accuracy: k_list.iter().map(|&k| (k, rate(k))).collect(),
        k_list,
        violation_ratio: per_sample.iter().filter(|s| s.1).count() as f64 / n,
        mean_target_probability: per_sample.iter().map(|s| s.2).sum::<f64>() / n,
    })
}

/// Top-1 beam accuracy for each width.
pub fn sweep_beam(bundle: &ModelBundle, test: &[Labeled], widths: &[usize]) -> Result<Vec<(usize, f64)>> {
    widths
        .iter()
        .map(|&w| Ok((w, evaluate(bundle, None, test, Decoder::Beam { width: w }, &[1], 0)?.accuracy)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum UnsupMethod {
    Pseudo,
    Consloss,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnsupConfig {
    pub method: UnsupMethod,
    pub ratio: f64,
    pub lambda: f64,
    pub beam_width: usize,
    pub split_seed: u64,
}

impl UnsupConfig {
    pub fn new(method: UnsupMethod, ratio: f64) -> Self {
        Self {
            method,
            ratio,
            lambda: DEFAULT_LAMBDA,
            beam_width: TRAIN_BEAM_WIDTH,
            split_seed: 0,
        }
    }
}

/// Baseline and method reports for one unsupervised ratio.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnsupOutcome {
    pub method: UnsupMethod,
    pub ratio: f64,
    pub lambda: f64,
    pub n_supervised: usize,
    pub n_unsupervised: usize,
    /// Unlabeled inputs that received a pseudo-label (pseudo method only).
    pub n_pseudo_labeled: Option<usize>,
    pub baseline: EvalReport,
    pub method_report: EvalReport,
    /// Method accuracy minus baseline accuracy, in percentage points.
    pub accuracy_delta: f64,
}

/// Supervised training on the labeled part, then a second round of the conditional
/// network from that point: on labeled data alone (baseline) and with the method.
pub fn run_unsup(
    splits: &DataSplits,
    cs: &ConstraintSet,
    cfg: &PipelineConfig,
    ucfg: &UnsupConfig,
    decoder: Decoder,
    k_list: &[usize],
) -> Result<UnsupOutcome> {
    let data = SplitDataset::new(splits, ucfg.ratio, ucfg.split_seed)?;
    let first = train_supervised(&data, cfg)?;
    let round2 = TrainConfig {
        keep_initial: true,
        ..cfg.seq_train.clone()
    };
    let (baseline, _) = fit_seq(&first.bundle, &data, &round2, &[], None)?;
    let (improved, n_pseudo) = match ucfg.method {
        UnsupMethod::Pseudo => {
            let pseudo = pseudo_label(&first.bundle, cs, &data.train_unsupervised, ucfg.beam_width)?;
            let (b, _) = train_with_pseudo_labels(&first.bundle, &data, &pseudo, &round2)?;
            (b, Some(pseudo.len()))
        }
        UnsupMethod::Consloss => {
            if !cs.sat_with_prefix(&[])? {
                return Err(Error::Contract("constraint set is unsatisfiable".into()));
            }
            let constraint = (ucfg.lambda > 0.0).then_some((cs, ucfg.lambda, ucfg.beam_width));
            let (b, _) = fit_seq(&first.bundle, &data, &round2, &[], constraint)?;
            (b, None)
        }
    };
    let seed = cfg.seq_train.seed;
    let base_report = evaluate(&baseline, Some(cs), &data.test, decoder, k_list, seed)?;
    let method_report = evaluate(&improved, Some(cs), &data.test, decoder, k_list, seed)?;
    Ok(UnsupOutcome {
        method: ucfg.method,
        ratio: ucfg.ratio,
        lambda: ucfg.lambda,
        n_supervised: data.train_supervised.len(),
        n_unsupervised: data.train_unsupervised.len(),
        n_pseudo_labeled: n_pseudo,
        accuracy_delta: 100.0 * (method_report.accuracy - base_report.accuracy),
        baseline: base_report,
        method_report,
    })
}

/// The ratio grid used by the unsupervised experiments.
pub const RATIO_GRID: [f64; 6] = [0.1, 0.3, 0.5, 0.7, 0.9, 0.95];

/// Top-1 valuation of every input under `decoder`, in dataset column order.
pub fn predict(bundle: &ModelBundle, cs: Option<&ConstraintSet>, inputs: &[Vec<f64>], decoder: Decoder) -> Result<Vec<Vec<Scored>>> {
    let order = bundle.label_order();
    let model_cs = cs.map(|c| order.remap_constraints(c)).transpose()?;
    inputs
        .par_iter()
        .map(|x| {
            let dummy = Valuation::new(vec![false; bundle.n_labels()]);
            let (cands, _) = decode_one(bundle, model_cs.as_ref(), x, &dummy, decoder)?;
            Ok(cands
                .into_iter()
                .map(|s| Scored {
                    valuation: order.to_dataset(&s.valuation),
                    logp: s.logp,
                })
                .collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::Literal;
    use crate::data::{gen_anticorrelated, gen_toy, split, Scenario, ToySpec};
    use crate::model::encode_cond_input;
    use crate::nnet::Rng;
    use rand::{Rng as _, SeedableRng};

    fn small_cfg(mode: Mode, epochs: usize) -> PipelineConfig {
        PipelineConfig {
            mode,
            base_hidden: vec![8, 8],
            seq_hidden: vec![8, 8],
            base_train: TrainConfig {
                max_epochs: epochs,
                learning_rate: 1e-2,
                dropout_rate: 0.1,
                batch_size: 16,
                ..TrainConfig::base_defaults()
            },
            seq_train: TrainConfig {
                max_epochs: epochs,
                learning_rate: 1e-2,
                ..TrainConfig::sequential_defaults()
            },
            ..PipelineConfig::default()
        }
    }

    fn toy_splits(n: usize, seed: u64) -> (DataSplits, ConstraintSet) {
        let (ds, cs) = gen_toy(&ToySpec::new(Scenario::CompleteOverlap, n, seed)).unwrap();
        (split(&ds, [0.35, 0.15, 0.5], seed).unwrap(), cs)
    }

    /// Single-layer conditional net over `n` labels and an `n`-wide context whose
    /// output is sigmoid(bias + Σ w·input).
    fn linear_bundle(n: usize, w: Vec<f64>, b: f64) -> ModelBundle {
        let net = DenseNet::from_parts(vec![3 * n, 1], vec![w], vec![vec![b]]).unwrap();
        let cond = ConditionalModel::new(net, n, n).unwrap();
        ModelBundle::SeqOnly(SeqOnlyModel::new(cond, LabelOrder::identity(n)).unwrap())
    }

    #[test]
    fn zero_epochs_keep_initial_nets() {
        let (splits, _) = toy_splits(200, 1);
        let data = SplitDataset::supervised(&splits);
        let cfg = small_cfg(Mode::BaseSeq, 0);
        let t = train_supervised(&data, &cfg).unwrap();
        let ModelBundle::BaseSeq(m) = &t.bundle else { panic!() };
        assert_eq!(m.base, DenseNet::seeded(&[2, 8, 8, 2], cfg.init_seed).unwrap());
        assert_eq!(m.cond.net(), ConditionalModel::seeded(2, 2, &[8, 8], cfg.init_seed + 1).unwrap().net());
        assert!(t.seq_history.epochs.is_empty());
    }

    #[test]
    fn base_learns_separable_label() {
        let mut rng = Rng::seed_from_u64(3);
        let rows: Vec<Labeled> = (0..400)
            .map(|_| {
                let x: f64 = rng.gen();
                (vec![x], Valuation::new(vec![x > 0.5]))
            })
            .filter(|(x, _)| (x[0] - 0.5).abs() > 0.05)
            .collect();
        let (train, valid) = rows.split_at(300);
        let cfg = TrainConfig {
            learning_rate: 0.01,
            dropout_rate: 0.0,
            batch_size: 16,
            max_epochs: 400,
            patience: 50,
            ..TrainConfig::base_defaults()
        };
        let (net, hist) = train_base_stage(train, valid, &[8], &cfg, 0).unwrap();
        let loss = BaseObjective { train, valid }.validation_loss(&net).unwrap();
        assert!(loss < 0.1, "{loss}");
        assert_eq!(hist.best_valid_loss, Some(loss));
        let (again, _) = train_base_stage(train, valid, &[8], &cfg, 0).unwrap();
        assert_eq!(again, net);
    }

    #[test]
    fn seq_memorizes_deterministic_target() {
        // labels are a fixed function of the context: (c0 > 0.5, c0 <= 0.5)
        let mut rng = Rng::seed_from_u64(4);
        let rows: Vec<Labeled> = (0..300)
            .map(|_| {
                let c: f64 = rng.gen();
                (vec![c, 1.0 - c], Valuation::new(vec![c > 0.5, c <= 0.5]))
            })
            .filter(|(x, _)| (x[0] - 0.5).abs() > 0.05)
            .collect();
        let (train, valid) = rows.split_at(200);
        let cfg = TrainConfig {
            learning_rate: 0.01,
            weight_decay: 0.0,
            dropout_rate: 0.0,
            max_epochs: 600,
            patience: 100,
            ..TrainConfig::sequential_defaults()
        };
        let init = ConditionalModel::seeded(2, 2, &[16, 16], 1).unwrap();
        let (cond, hist) = train_seq_stage(init, train, &[], valid, &cfg, None).unwrap();
        let nll = hist.best_valid_loss.unwrap();
        assert!(nll < 0.05, "{nll}");
        assert!(cond.joint_logprob(&[0.9, 0.1], &[true, false]).unwrap().exp() > 0.9);
    }

    #[test]
    fn training_lowers_toy_validation_nll() {
        let (splits, _) = toy_splits(1000, 2);
        let data = SplitDataset::supervised(&splits);
        let before = train_supervised(&data, &small_cfg(Mode::SeqOnly, 0)).unwrap().bundle;
        let after = train_supervised(&data, &small_cfg(Mode::SeqOnly, 50)).unwrap().bundle;
        let nll = |b: &ModelBundle| {
            let valid = contexts(&|x: &[f64]| b.context(x), b.label_order(), &data.validation).unwrap();
            SequenceObjective { n_labels: 2, train: &[], unlabeled: &[], valid: &valid, constraint: None }
                .validation_loss(b.cond().net())
                .unwrap()
        };
        assert!(nll(&after) < nll(&before));
    }

    #[test]
    fn pseudo_label_rules() {
        // prefers (T, F) with O1 ⇒ O2: the top-1 is invalid
        let l9 = (0.9f64 / 0.1).ln();
        let mut w = vec![0.0; 6];
        w[4] = -2.0 * l9;
        let b = linear_bundle(2, w, l9);
        let inputs = vec![vec![0.2, 0.4], vec![0.7, 0.1]];
        let empty = pseudo_label(&b, &ConstraintSet::empty(2), &inputs, 5).unwrap();
        assert_eq!(empty.len(), 2);
        assert!(empty.iter().all(|(_, v)| v.to_bitstring() == "10"));
        let imp = ConstraintSet::new(2, vec![vec![Literal::new(1, false), Literal::new(2, true)]]).unwrap();
        let kept = pseudo_label(&b, &imp, &inputs, 5).unwrap();
        assert!(kept.iter().all(|(_, v)| imp.eval_full(v).unwrap() && v.to_bitstring() != "10"));
        // width 1 sees only the invalid (T, F): discarded
        assert!(pseudo_label(&b, &imp, &inputs, 1).unwrap().is_empty());
    }

    #[test]
    fn pseudo_labels_always_valid() {
        let mut rng = Rng::seed_from_u64(9);
        for trial in 0..60 {
            let n = rng.gen_range(2..=5);
            let clauses = (0..rng.gen_range(1..=n))
                .map(|_| (0..2).map(|_| Literal::new(rng.gen_range(1..=n), rng.gen())).collect())
                .collect();
            let cs = ConstraintSet::new(n, clauses).unwrap();
            let cond = ConditionalModel::seeded(n, n, &[6], trial).unwrap();
            let order = if trial % 2 == 0 { LabelOrder::identity(n) } else { LabelOrder::reversed(n) };
            let b = ModelBundle::SeqOnly(SeqOnlyModel::new(cond, order).unwrap());
            let inputs: Vec<Vec<f64>> = (0..5).map(|_| (0..n).map(|_| rng.gen()).collect()).collect();
            for (_, v) in pseudo_label(&b, &cs, &inputs, 3).unwrap() {
                assert!(cs.eval_full(&v).unwrap());
            }
        }
    }

    #[test]
    fn evaluation_metrics() {
        // conditional always says "true": target (T, T) is the unique top-1
        let b = linear_bundle(2, vec![0.0; 6], 30.0);
        let test: Vec<Labeled> = (0..5).map(|i| (vec![i as f64 / 5.0, 0.5], Valuation::from_bitstring("11").unwrap())).collect();
        let r = evaluate(&b, None, &test, Decoder::Beam { width: 4 }, &[1, 2], 7).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.topk_accuracy[&1], 1.0);
        assert_eq!(r.violation_ratio, 0.0);
        assert_eq!(r.seed, 7);
        assert!(r.mean_target_probability > 0.99);
        let nand = ConstraintSet::parse_dimacs("p cnf 2 1\n-1 -2 0\n").unwrap();
        let r = evaluate(&b, Some(&nand), &test, Decoder::Beam { width: 4 }, &[1], 7).unwrap();
        assert_eq!(r.violation_ratio, 1.0);
        let r = evaluate(&b, Some(&nand), &test, Decoder::BeamSat { width: 4 }, &[1], 7).unwrap();
        assert_eq!((r.violation_ratio, r.accuracy), (0.0, 0.0));
        assert!(evaluate(&b, None, &[], Decoder::Greedy, &[1], 0).is_err());
        assert!(evaluate(&b, None, &test, Decoder::Independent { width: 2 }, &[1], 0).is_err());
    }

    #[test]
    fn exact_full_list_finds_every_target() {
        let (splits, _) = toy_splits(300, 5);
        let b = train_supervised(&SplitDataset::supervised(&splits), &small_cfg(Mode::SeqOnly, 3)).unwrap().bundle;
        let r = evaluate(&b, None, &splits.test.rows, Decoder::Exact { k: 4, cap: 20 }, &[1, 2, 4], 0).unwrap();
        assert_eq!(r.topk_accuracy[&4], 1.0);
        let v: Vec<f64> = r.topk_accuracy.values().copied().collect();
        assert!(v.windows(2).all(|w| w[0] <= w[1]));
        // beam of width 10 lists the same candidates as enumeration for n = 2
        let beam = evaluate(&b, None, &splits.test.rows, Decoder::Beam { width: 10 }, &[1, 2, 4], 0).unwrap();
        assert_eq!(beam.topk_accuracy, r.topk_accuracy);
    }

    #[test]
    fn greedy_matches_width_one() {
        let ds = gen_anticorrelated(400, 3);
        let splits = split(&ds, [0.5, 0.2, 0.3], 1).unwrap();
        let b = train_supervised(&SplitDataset::supervised(&splits), &small_cfg(Mode::BaseSeq, 5)).unwrap().bundle;
        let g = evaluate(&b, None, &splits.test.rows, Decoder::Greedy, &[1], 0).unwrap();
        let sweep = sweep_beam(&b, &splits.test.rows, &[1, 4]).unwrap();
        assert_eq!(sweep[0], (1, g.accuracy));
        assert_eq!(evaluate(&b, None, &splits.test.rows, Decoder::Greedy, &[1], 0).unwrap(), g);
    }

    #[test]
    fn independent_decoder_uses_marginals() {
        let ds = gen_anticorrelated(300, 8);
        let splits = split(&ds, [0.5, 0.2, 0.3], 1).unwrap();
        let b = train_supervised(&SplitDataset::supervised(&splits), &small_cfg(Mode::BaseSeq, 2)).unwrap().bundle;
        let ModelBundle::BaseSeq(m) = &b else { panic!() };
        let r = evaluate(&b, None, &splits.test.rows, Decoder::Independent { width: 4 }, &[1], 0).unwrap();
        let want: f64 = splits
            .test
            .rows
            .iter()
            .map(|(x, t)| joint_prob_base(&m.base_predict(x).unwrap(), t).unwrap())
            .sum::<f64>()
            / splits.test.len() as f64;
        assert!((r.mean_target_probability - want).abs() < 1e-12);
    }

    #[test]
    fn unsup_degenerate_settings_match_baseline() {
        let (splits, cs) = toy_splits(400, 6);
        let cfg = small_cfg(Mode::SeqOnly, 4);
        let pseudo = run_unsup(&splits, &cs, &cfg, &UnsupConfig::new(UnsupMethod::Pseudo, 0.0), Decoder::Beam { width: 4 }, &[1]).unwrap();
        assert_eq!(pseudo.accuracy_delta, 0.0);
        assert_eq!(pseudo.n_pseudo_labeled, Some(0));
        let mut u = UnsupConfig::new(UnsupMethod::Consloss, 0.5);
        u.lambda = 0.0;
        let cons = run_unsup(&splits, &cs, &cfg, &u, Decoder::Beam { width: 4 }, &[1]).unwrap();
        assert_eq!(cons.accuracy_delta, 0.0);
        assert_eq!(cons.baseline, cons.method_report);
    }

    #[test]
    fn consloss_runs_and_counts_unlabeled() {
        let (splits, cs) = toy_splits(400, 7);
        let cfg = small_cfg(Mode::BaseSeq, 3);
        let out = run_unsup(&splits, &cs, &cfg, &UnsupConfig::new(UnsupMethod::Consloss, 0.5), Decoder::Beam { width: 4 }, &[1, 2]).unwrap();
        assert_eq!(out.n_supervised + out.n_unsupervised, splits.train.len());
        assert!(out.method_report.accuracy >= 0.0);
        let unsat = ConstraintSet::parse_dimacs("p cnf 2 2\n1 0\n-1 0\n").unwrap();
        let data = SplitDataset::new(&splits, 0.5, 0).unwrap();
        let b = train_supervised(&data, &cfg).unwrap().bundle;
        assert!(train_with_constraint_loss(&b, &data, &unsat, &cfg.seq_train, 1.0).is_err());
    }

    #[test]
    fn consloss_reduces_engineered_violations() {
        // labeled rows follow O1 ⇒ O2 only weakly; unlabeled rows drive the model
        // away from the (T, F) region the supervised fit prefers
        let mut rng = Rng::seed_from_u64(12);
        let mut rows: Vec<Labeled> = Vec::new();
        for _ in 0..600 {
            let x: f64 = rng.gen();
            let v = if rng.gen::<f64>() < 0.55 { "10" } else { "11" };
            rows.push((vec![x], Valuation::from_bitstring(v).unwrap()));
        }
        let ds = crate::data::TabularDataset {
            feature_names: vec!["x".into()],
            label_names: vec!["O1".into(), "O2".into()],
            rows,
        };
        let splits = split(&ds, [0.6, 0.2, 0.2], 1).unwrap();
        let cs = crate::data::toy_constraints();
        let cfg = small_cfg(Mode::SeqOnly, 30);
        let data = SplitDataset::new(&splits, 0.5, 3).unwrap();
        let first = train_supervised(&data, &cfg).unwrap().bundle;
        let before = evaluate(&first, Some(&cs), &data.test, Decoder::Beam { width: 4 }, &[1], 0).unwrap();
        let round2 = TrainConfig { keep_initial: false, ..cfg.seq_train.clone() };
        let (after, _) = train_with_constraint_loss(&first, &data, &cs, &round2, 5.0).unwrap();
        let after = evaluate(&after, Some(&cs), &data.test, Decoder::Beam { width: 4 }, &[1], 0).unwrap();
        assert!(after.violation_ratio <= before.violation_ratio, "{} > {}", after.violation_ratio, before.violation_ratio);
        assert!(before.violation_ratio > 0.5);
    }

    #[test]
    fn label_order_is_respected() {
        let (splits, cs) = toy_splits(300, 9);
        let mut cfg = small_cfg(Mode::BaseSeq, 3);
        cfg.label_order = Some(LabelOrder::reversed(2));
        let b = train_supervised(&SplitDataset::supervised(&splits), &cfg).unwrap().bundle;
        assert_eq!(b.label_order().as_slice(), &[1, 0]);
        let r = evaluate(&b, Some(&cs), &splits.test.rows, Decoder::BeamSat { width: 4 }, &[1], 0).unwrap();
        assert_eq!(r.violation_ratio, 0.0);
        // target probability is taken in model order
        let (x, t) = &splits.test.rows[0];
        let ctx = b.context(x).unwrap();
        let p = b.cond().joint_logprob(&ctx, &b.label_order().to_model(t)).unwrap().exp();
        let direct = {
            let net = b.cond().net();
            let m = b.label_order().to_model(t);
            let c1 = net.forward(&encode_cond_input(&ctx, &[], 2).unwrap()).unwrap()[0];
            let c2 = net.forward(&encode_cond_input(&ctx, &m[..1], 2).unwrap()).unwrap()[0];
            (if m[0] { c1 } else { 1.0 - c1 }) * (if m[1] { c2 } else { 1.0 - c2 })
        };
        assert!((p - direct).abs() < 1e-12);
    }
}
