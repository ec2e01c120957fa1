//! Base, conditional and sequential models.
//!
//! A conditional network reads a fixed-width encoding
//! `[context | prefix values | prefix mask]` and predicts the probability that the
//! label right after the prefix is true. The context is the base model's marginals
//! (Base-Seq) or the raw features (Seq-only). Chaining the conditional over a
//! valuation gives its joint probability, accumulated in log space.

use std::fmt::{self, Write as _};
use std::ops::Deref;

use serde::{Serialize, Serializer};

use crate::constraints::{ConstraintSet, Literal};
use crate::error::{parse_err, shape_check, Error, Result};
use crate::nnet::DenseNet;

/// Clamp applied to every per-step probability before taking its log.
pub const PROB_EPS: f64 = 1e-7;

pub const BUNDLE_MAGIC: &str = "SEQLABEL-BUNDLE-1";

/// A full true/false assignment to the output labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Valuation(Vec<bool>);

impl Valuation {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    /// Parses a string of `0`/`1` characters.
    pub fn from_bitstring(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Contract(format!("bad bit {other:?} in {s:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }

    pub fn to_bitstring(&self) -> String {
        self.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    /// Enumerates all `2^n` valuations in lexicographic order (false < true).
    pub fn all(n: usize) -> impl Iterator<Item = Valuation> {
        (0u64..1 << n).map(move |code| Valuation((0..n).map(|i| code >> (n - 1 - i) & 1 == 1).collect()))
    }

    pub fn into_inner(self) -> Vec<bool> {
        self.0
    }
}

impl Deref for Valuation {
    type Target = [bool];
    fn deref(&self) -> &[bool] {
        &self.0
    }
}

impl From<Vec<bool>> for Valuation {
    fn from(bits: Vec<bool>) -> Self {
        Self(bits)
    }
}

impl fmt::Display for Valuation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_bitstring())
    }
}

impl Serialize for Valuation {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_bitstring())
    }
}

/// Per-label marginal probabilities, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalAssignment(Vec<f64>);

impl MarginalAssignment {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Contract(format!("marginal {p} outside [0, 1]")));
        }
        Ok(Self(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for MarginalAssignment {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Permutation from model positions to dataset label columns:
/// position `i` predicts column `order[i]`. Serialized 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelOrder(Vec<usize>);

impl Serialize for LabelOrder {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.0.iter().map(|i| i + 1))
    }
}

impl LabelOrder {
    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn reversed(n: usize) -> Self {
        Self((0..n).rev().collect())
    }

    /// Validates a 0-based permutation.
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &i in &order {
            if i >= order.len() || seen[i] {
                return Err(Error::Contract(format!("label order {order:?} is not a permutation")));
            }
            seen[i] = true;
        }
        Ok(Self(order))
    }

    /// Parses `identity`, `reverse`, or a comma-separated 1-based permutation.
    pub fn parse(spec: &str, n: usize) -> Result<Self> {
        match spec.trim() {
            "identity" => Ok(Self::identity(n)),
            "reverse" => Ok(Self::reversed(n)),
            list => {
                let order = list
                    .split(',')
                    .map(|t| {
                        t.trim()
                            .parse::<usize>()
                            .ok()
                            .filter(|&i| i >= 1)
                            .map(|i| i - 1)
                            .ok_or_else(|| Error::Config(format!("bad label index {t:?} in label order")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                shape_check("label order length", n, order.len())?;
                Self::new(order)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &j)| i == j)
    }

    /// Reorders dataset-ordered values into model order.
    pub fn apply<T: Clone>(&self, data: &[T]) -> Vec<T> {
        self.0.iter().map(|&i| data[i].clone()).collect()
    }

    pub fn to_model(&self, v: &Valuation) -> Valuation {
        Valuation(self.apply(v))
    }

    /// Inverse of [`LabelOrder::to_model`].
    pub fn to_dataset(&self, v: &[bool]) -> Valuation {
        let mut out = vec![false; v.len()];
        for (i, &col) in self.0.iter().enumerate() {
            out[col] = v[i];
        }
        Valuation(out)
    }

    /// Rewrites clauses over dataset columns into clauses over model positions.
    pub fn remap_constraints(&self, cs: &ConstraintSet) -> Result<ConstraintSet> {
        shape_check("constraint variables", self.len(), cs.n_vars())?;
        let mut pos = vec![0; self.len()];
        for (i, &col) in self.0.iter().enumerate() {
            pos[col] = i;
        }
        let clauses = cs
            .clauses()
            .iter()
            .map(|c| c.iter().map(|l| Literal::new(pos[l.var - 1] + 1, l.positive)).collect())
            .collect();
        ConstraintSet::new(cs.n_vars(), clauses)
    }
}

/// Lays out `[context | prefix values | known mask]` for a conditional network.
pub fn encode_cond_input(context: &[f64], prefix: &[bool], n_labels: usize) -> Result<Vec<f64>> {
    if prefix.len() > n_labels {
        return Err(Error::Shape(format!("prefix of length {} exceeds {n_labels} labels", prefix.len())));
    }
    let mut x = Vec::with_capacity(context.len() + 2 * n_labels);
    x.extend_from_slice(context);
    x.extend((0..n_labels).map(|i| match prefix.get(i) {
        Some(true) => 1.0,
        _ => 0.0,
    }));
    x.extend((0..n_labels).map(|i| if i < prefix.len() { 1.0 } else { 0.0 }));
    Ok(x)
}

/// Log of the clamped probability of emitting `bit` when the next label is true
/// with probability `p_true`.
pub fn step_log_term(p_true: f64, bit: bool) -> f64 {
    let p = if bit { p_true } else { 1.0 - p_true };
    p.clamp(PROB_EPS, 1.0 - PROB_EPS).ln()
}

/// A distribution over valuations defined by next-label conditionals.
pub trait StepModel {
    fn n_labels(&self) -> usize;

    /// Probability that label `prefix.len() + 1` is true given the prefix.
    /// Requires `prefix.len() < n_labels()`.
    fn next_true_prob(&self, prefix: &[bool]) -> f64;
}

/// Summed log terms of `v`, accumulated left to right from `0.0`.
pub fn sequence_logprob<M: StepModel + ?Sized>(model: &M, v: &[bool]) -> Result<f64> {
    shape_check("valuation length", model.n_labels(), v.len())?;
    let mut acc = 0.0;
    for j in 0..v.len() {
        acc += step_log_term(model.next_true_prob(&v[..j]), v[j]);
    }
    Ok(acc)
}

/// Independence-assumption joint probability `∏ (v_j pa_j + (1 − v_j)(1 − pa_j))`.
pub fn joint_prob_base(pa: &[f64], v: &[bool]) -> Result<f64> {
    shape_check("valuation length", pa.len(), v.len())?;
    Ok(pa
        .iter()
        .zip(v)
        .map(|(&p, &b)| if b { p } else { 1.0 - p })
        .product())
}

/// Marginals read as a step model whose conditionals ignore the prefix.
#[derive(Debug, Clone, Copy)]
pub struct Independent<'a>(pub &'a [f64]);

impl StepModel for Independent<'_> {
    fn n_labels(&self) -> usize {
        self.0.len()
    }

    fn next_true_prob(&self, prefix: &[bool]) -> f64 {
        self.0[prefix.len()]
    }
}

/// A conditional network bound to one context vector.
#[derive(Debug, Clone, Copy)]
pub struct CondView<'a> {
    net: &'a DenseNet,
    context: &'a [f64],
    n_labels: usize,
}

impl<'a> CondView<'a> {
    pub fn new(net: &'a DenseNet, context: &'a [f64], n_labels: usize) -> Result<Self> {
        shape_check("conditional network input", context.len() + 2 * n_labels, net.input_dim())?;
        shape_check("conditional network output", 1, net.output_dim())?;
        Ok(Self {
            net,
            context,
            n_labels,
        })
    }

    pub fn context(&self) -> &[f64] {
        self.context
    }

    pub fn net(&self) -> &DenseNet {
        self.net
    }

    pub fn encode(&self, prefix: &[bool]) -> Vec<f64> {
        encode_cond_input(self.context, prefix, self.n_labels).expect("prefix shorter than label count")
    }
}

impl StepModel for CondView<'_> {
    fn n_labels(&self) -> usize {
        self.n_labels
    }

    fn next_true_prob(&self, prefix: &[bool]) -> f64 {
        assert!(prefix.len() < self.n_labels, "prefix already covers every label");
        self.net.forward(&self.encode(prefix)).expect("input width checked at construction")[0]
    }
}

/// A prefix-conditional network over `n_labels` outputs and a `context_dim`-wide context.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalModel {
    net: DenseNet,
    n_labels: usize,
    context_dim: usize,
}

impl ConditionalModel {
    pub fn new(net: DenseNet, n_labels: usize, context_dim: usize) -> Result<Self> {
        if n_labels == 0 {
            return Err(Error::Config("label count must be positive".into()));
        }
        shape_check("conditional network input", context_dim + 2 * n_labels, net.input_dim())?;
        shape_check("conditional network output", 1, net.output_dim())?;
        Ok(Self {
            net,
            n_labels,
            context_dim,
        })
    }

    /// Fresh Glorot-initialized network with the given hidden widths.
    pub fn seeded(n_labels: usize, context_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut sizes = vec![context_dim + 2 * n_labels];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self::new(DenseNet::seeded(&sizes, seed)?, n_labels, context_dim)
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn set_net(&mut self, net: DenseNet) -> Result<()> {
        *self = Self::new(net, self.n_labels, self.context_dim)?;
        Ok(())
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    pub fn bind<'a>(&'a self, context: &'a [f64]) -> Result<CondView<'a>> {
        shape_check("context width", self.context_dim, context.len())?;
        CondView::new(&self.net, context, self.n_labels)
    }

    pub fn cond_predict(&self, context: &[f64], prefix: &[bool]) -> Result<f64> {
        if prefix.len() >= self.n_labels {
            return Err(Error::Contract(format!(
                "prefix of length {} leaves no label to predict (n = {})",
                prefix.len(),
                self.n_labels
            )));
        }
        Ok(self.bind(context)?.next_true_prob(prefix))
    }

    pub fn joint_logprob(&self, context: &[f64], v: &[bool]) -> Result<f64> {
        sequence_logprob(&self.bind(context)?, v)
    }
}

/// Base network feeding marginals into a shared conditional network.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseSeqModel {
    pub base: DenseNet,
    pub cond: ConditionalModel,
    pub label_order: LabelOrder,
}

impl BaseSeqModel {
    pub fn new(base: DenseNet, cond: ConditionalModel, label_order: LabelOrder) -> Result<Self> {
        let n = cond.n_labels();
        shape_check("base network output", n, base.output_dim())?;
        shape_check("conditional context width", n, cond.context_dim())?;
        shape_check("label order length", n, label_order.len())?;
        Ok(Self {
            base,
            cond,
            label_order,
        })
    }

    pub fn n_labels(&self) -> usize {
        self.cond.n_labels()
    }

    pub fn n_features(&self) -> usize {
        self.base.input_dim()
    }

    /// Base marginals in model order.
    pub fn base_predict(&self, x: &[f64]) -> Result<MarginalAssignment> {
        let raw = self.base.forward(x)?;
        MarginalAssignment::new(self.label_order.apply(&raw))
    }

    pub fn cond_predict(&self, pa: &[f64], prefix: &[bool]) -> Result<f64> {
        self.cond.cond_predict(pa, prefix)
    }

    pub fn joint_logprob_seq(&self, pa: &[f64], v: &[bool]) -> Result<f64> {
        self.cond.joint_logprob(pa, v)
    }
}

/// Single conditional network reading raw features instead of marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqOnlyModel {
    pub cond: ConditionalModel,
    pub label_order: LabelOrder,
}

impl SeqOnlyModel {
    pub fn new(cond: ConditionalModel, label_order: LabelOrder) -> Result<Self> {
        shape_check("label order length", cond.n_labels(), label_order.len())?;
        Ok(Self { cond, label_order })
    }

    pub fn n_labels(&self) -> usize {
        self.cond.n_labels()
    }

    pub fn n_features(&self) -> usize {
        self.cond.context_dim()
    }

    pub fn seq_only_cond_predict(&self, x: &[f64], prefix: &[bool]) -> Result<f64> {
        self.cond.cond_predict(x, prefix)
    }
}

/// Either model family, as stored in a bundle file.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelBundle {
    BaseSeq(BaseSeqModel),
    SeqOnly(SeqOnlyModel),
}

impl ModelBundle {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelBundle::BaseSeq(_) => "base-seq",
            ModelBundle::SeqOnly(_) => "seq-only",
        }
    }

    pub fn cond(&self) -> &ConditionalModel {
        match self {
            ModelBundle::BaseSeq(m) => &m.cond,
            ModelBundle::SeqOnly(m) => &m.cond,
        }
    }

    pub fn label_order(&self) -> &LabelOrder {
        match self {
            ModelBundle::BaseSeq(m) => &m.label_order,
            ModelBundle::SeqOnly(m) => &m.label_order,
        }
    }

    pub fn n_labels(&self) -> usize {
        self.cond().n_labels()
    }

    pub fn n_features(&self) -> usize {
        match self {
            ModelBundle::BaseSeq(m) => m.n_features(),
            ModelBundle::SeqOnly(m) => m.n_features(),
        }
    }

    /// What the conditional network is conditioned on for input `x`.
    pub fn context(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            ModelBundle::BaseSeq(m) => Ok(m.base_predict(x)?.into_inner()),
            ModelBundle::SeqOnly(m) => {
                shape_check("feature vector", m.n_features(), x.len())?;
                Ok(x.to_vec())
            }
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{BUNDLE_MAGIC}").unwrap();
        writeln!(s, "kind {}", self.kind()).unwrap();
        writeln!(s, "labels {}", self.n_labels()).unwrap();
        writeln!(s, "features {}", self.n_features()).unwrap();
        let order: Vec<String> = self.label_order().as_slice().iter().map(|i| (i + 1).to_string()).collect();
        writeln!(s, "label_order {}", order.join(" ")).unwrap();
        if let ModelBundle::BaseSeq(m) = self {
            s.push_str(&m.base.to_text());
        }
        s.push_str(&self.cond().net().to_text());
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| !l.trim().is_empty());
        let mut field = |key: &str| -> Result<(usize, String)> {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| parse_err(0, format!("unexpected end of bundle, expected `{key}`")))?;
            let line = line.trim();
            if key == BUNDLE_MAGIC {
                return if line == BUNDLE_MAGIC {
                    Ok((ln, String::new()))
                } else {
                    Err(parse_err(ln, format!("expected header {BUNDLE_MAGIC}")))
                };
            }
            let rest = line
                .strip_prefix(key)
                .filter(|r| r.starts_with(' '))
                .ok_or_else(|| parse_err(ln, format!("expected `{key}` line")))?;
            Ok((ln, rest.trim().to_string()))
        };
        field(BUNDLE_MAGIC)?;
        let (kind_ln, kind) = field("kind")?;
        let (ln, n) = field("labels")?;
        let n: usize = n.parse().map_err(|_| parse_err(ln, "bad label count"))?;
        let (ln, m) = field("features")?;
        let m: usize = m.parse().map_err(|_| parse_err(ln, "bad feature count"))?;
        let (ln, order) = field("label_order")?;
        let order = LabelOrder::parse(&order.split_whitespace().collect::<Vec<_>>().join(","), n)
            .map_err(|e| parse_err(ln, e.to_string()))?;
        let wrap = |e: Error| match e {
            e @ Error::Parse { .. } => e,
            other => parse_err(kind_ln, other.to_string()),
        };
        match kind.as_str() {
            "base-seq" => {
                let base = DenseNet::read_lines(&mut lines)?;
                let cond = ConditionalModel::new(DenseNet::read_lines(&mut lines)?, n, n).map_err(wrap)?;
                shape_check("base network input", m, base.input_dim()).map_err(wrap)?;
                Ok(ModelBundle::BaseSeq(BaseSeqModel::new(base, cond, order).map_err(wrap)?))
            }
            "seq-only" => {
                let cond = ConditionalModel::new(DenseNet::read_lines(&mut lines)?, n, m).map_err(wrap)?;
                Ok(ModelBundle::SeqOnly(SeqOnlyModel::new(cond, order).map_err(wrap)?))
            }
            other => Err(parse_err(kind_ln, format!("unknown model kind {other:?}"))),
        }
    }
}
