//! Dataset readers and writers, synthetic toy generators and seeded splits.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use serde::Serialize;

use crate::constraints::{ConstraintSet, Literal};
use crate::error::{parse_err, Error, Result};
use crate::model::Valuation;
use crate::nnet::Rng;

/// Feature vectors with binary label valuations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TabularDataset {
    pub feature_names: Vec<String>,
    pub label_names: Vec<String>,
    pub rows: Vec<(Vec<f64>, Valuation)>,
}

impl TabularDataset {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn n_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Same columns, different rows.
    pub fn with_rows(&self, rows: Vec<(Vec<f64>, Valuation)>) -> Self {
        Self {
            feature_names: self.feature_names.clone(),
            label_names: self.label_names.clone(),
            rows,
        }
    }

    pub fn features(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.iter().map(|(x, _)| x.as_slice())
    }

    pub fn labels(&self) -> impl Iterator<Item = &Valuation> {
        self.rows.iter().map(|(_, v)| v)
    }
}

/// Which ARFF attributes are labels.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelSelector {
    Names(Vec<String>),
    /// The last `c` attributes.
    LastCount(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum AttrKind {
    Numeric,
    Binary,
}

fn unquote(s: &str) -> &str {
    let s = s.trim();
    for q in ['\'', '"'] {
        if let Some(inner) = s.strip_prefix(q).and_then(|r| r.strip_suffix(q)) {
            return inner;
        }
    }
    s
}

/// Splits `@attribute <name> <type>` into name and type, honoring quoted names.
fn attribute_parts(rest: &str) -> Option<(&str, &str)> {
    let rest = rest.trim();
    let quote = rest.chars().next().filter(|c| *c == '\'' || *c == '"');
    let cut = match quote {
        Some(q) => rest[1..].find(q)? + 2,
        None => rest.find(char::is_whitespace)?,
    };
    Some((unquote(&rest[..cut]), rest[cut..].trim()))
}

fn parse_label_cell(line: usize, cell: &str) -> Result<bool> {
    match cell {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(parse_err(line, format!("label value {other:?} is not 0 or 1"))),
    }
}

fn parse_feature_cell(line: usize, cell: &str) -> Result<f64> {
    cell.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| parse_err(line, format!("feature value {cell:?} is not a finite number")))
}

/// Reads the dense numeric/binary ARFF subset.
pub fn parse_arff_lite(text: &str, labels: &LabelSelector) -> Result<TabularDataset> {
    let mut attrs: Vec<(String, AttrKind)> = Vec::new();
    let mut label_cols: Vec<usize> = Vec::new();
    let mut feature_cols: Vec<usize> = Vec::new();
    let mut rows = Vec::new();
    let mut in_data = false;
    let mut last_line = 0;
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        last_line = ln;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('%') {
            continue;
        }
        if !in_data {
            let lower = line.to_ascii_lowercase();
            if lower.starts_with("@relation") {
                continue;
            }
            if lower.starts_with("@attribute") {
                let (name, ty) = attribute_parts(&line["@attribute".len()..])
                    .ok_or_else(|| parse_err(ln, "malformed @attribute line"))?;
                let compact: String = ty.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_ascii_lowercase();
                let kind = match compact.as_str() {
                    "numeric" | "real" | "integer" => AttrKind::Numeric,
                    "{0,1}" | "{1,0}" => AttrKind::Binary,
                    _ => return Err(parse_err(ln, format!("unsupported attribute type {ty:?}"))),
                };
                attrs.push((name.to_string(), kind));
                continue;
            }
            if lower == "@data" {
                label_cols = select_labels(&attrs, labels).map_err(|e| parse_err(ln, e.to_string()))?;
                feature_cols = (0..attrs.len()).filter(|c| !label_cols.contains(c)).collect();
                in_data = true;
                continue;
            }
            return Err(parse_err(ln, format!("unexpected header line {line:?}")));
        }
        if line.starts_with('{') {
            return Err(parse_err(ln, "sparse ARFF rows are not supported"));
        }
        if line.starts_with('@') {
            return Err(parse_err(ln, "header keyword after @data"));
        }
        let cells: Vec<&str> = line.split(',').map(|c| unquote(c)).collect();
        if cells.len() != attrs.len() {
            return Err(parse_err(ln, format!("expected {} values, found {}", attrs.len(), cells.len())));
        }
        let x = feature_cols
            .iter()
            .map(|&c| parse_feature_cell(ln, cells[c]))
            .collect::<Result<Vec<_>>>()?;
        let v = label_cols
            .iter()
            .map(|&c| parse_label_cell(ln, cells[c]))
            .collect::<Result<Vec<_>>>()?;
        rows.push((x, Valuation::new(v)));
    }
    if !in_data {
        return Err(parse_err(last_line + 1, "missing @data section"));
    }
    Ok(TabularDataset {
        feature_names: feature_cols.iter().map(|&c| attrs[c].0.clone()).collect(),
        label_names: label_cols.iter().map(|&c| attrs[c].0.clone()).collect(),
        rows,
    })
}

fn select_labels(attrs: &[(String, AttrKind)], sel: &LabelSelector) -> Result<Vec<usize>> {
    let cols: Vec<usize> = match sel {
        LabelSelector::Names(names) => names
            .iter()
            .map(|n| {
                attrs
                    .iter()
                    .position(|(a, _)| a == n)
                    .ok_or_else(|| Error::Config(format!("no attribute named {n:?}")))
            })
            .collect::<Result<_>>()?,
        LabelSelector::LastCount(c) => {
            if *c == 0 || *c >= attrs.len() {
                return Err(Error::Config(format!("label count {c} must be in 1..{}", attrs.len())));
            }
            (attrs.len() - c..attrs.len()).collect()
        }
    };
    if let Some(&c) = cols.iter().find(|&&c| attrs[c].1 != AttrKind::Binary) {
        return Err(Error::Config(format!("label attribute {:?} is not {{0,1}}", attrs[c].0)));
    }
    Ok(cols)
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.kind() {
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
            parse_err(line, format!("ragged row: expected {expected_len} columns, found {len}"))
        }
        _ => parse_err(line, e.to_string()),
    }
}

/// Reads a headed CSV whose last `c` columns are 0/1 labels.
pub fn parse_csv_dataset(text: &str, c: usize) -> Result<TabularDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if c == 0 || c >= header.len() {
        return Err(parse_err(1, format!("label count {c} must be in 1..{} for {} columns", header.len(), header.len())));
    }
    let m = header.len() - c;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let ln = rec.position().map_or(0, |p| p.line() as usize);
        let x = rec.iter().take(m).map(|s| parse_feature_cell(ln, s)).collect::<Result<Vec<_>>>()?;
        let v = rec.iter().skip(m).map(|s| parse_label_cell(ln, s)).collect::<Result<Vec<_>>>()?;
        rows.push((x, Valuation::new(v)));
    }
    Ok(TabularDataset {
        feature_names: header[..m].to_vec(),
        label_names: header[m..].to_vec(),
        rows,
    })
}

pub fn write_csv(ds: &TabularDataset) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(ds.feature_names.iter().chain(&ds.label_names)).map_err(io)?;
    for (x, v) in &ds.rows {
        let cells = x
            .iter()
            .map(|f| f.to_string())
            .chain(v.iter().map(|&b| if b { "1" } else { "0" }.to_string()));
        w.write_record(cells).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Loads `.arff` (last `c` attributes as labels) or CSV by file extension.
pub fn load_dataset(path: &Path, c: usize) -> Result<TabularDataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let is_arff = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("arff"));
    let parsed = if is_arff {
        parse_arff_lite(&text, &LabelSelector::LastCount(c))
    } else {
        parse_csv_dataset(&text, c)
    };
    parsed.map_err(|e| match e {
        Error::Parse { line, msg } => parse_err(line, format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Axis-aligned rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub const fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Self { x0, x1, y0, y1 }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn intersection_area(&self, o: &Rect) -> f64 {
        let w = (self.x1.min(o.x1) - self.x0.max(o.x0)).max(0.0);
        let h = (self.y1.min(o.y1) - self.y0.max(o.y0)).max(0.0);
        w * h
    }

    fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.x0 && self.x0 < self.x1 && self.x1 <= 1.0 && 0.0 <= self.y0 && self.y0 < self.y1 && self.y1 <= 1.0;
        if !ok {
            return Err(Error::Config(format!("rectangle {self:?} is not a proper subset of the unit square")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    CompleteOverlap,
    PartialOverlap,
    Disjoint,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::CompleteOverlap, Scenario::PartialOverlap, Scenario::Disjoint];

    pub fn default_rects(self) -> (Rect, Rect) {
        match self {
            Scenario::CompleteOverlap => (Rect::new(0.25, 0.75, 0.25, 0.75), Rect::new(0.25, 0.75, 0.25, 0.75)),
            Scenario::PartialOverlap => (Rect::new(0.1, 0.6, 0.2, 0.7), Rect::new(0.35, 0.9, 0.3, 0.8)),
            Scenario::Disjoint => (Rect::new(0.05, 0.45, 0.05, 0.45), Rect::new(0.55, 0.95, 0.55, 0.95)),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::CompleteOverlap => "complete_overlap",
            Scenario::PartialOverlap => "partial_overlap",
            Scenario::Disjoint => "disjoint",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "complete_overlap" | "complete" => Ok(Scenario::CompleteOverlap),
            "partial_overlap" | "partial" => Ok(Scenario::PartialOverlap),
            "disjoint" => Ok(Scenario::Disjoint),
            _ => Err(Error::Config(format!(
                "unknown scenario {s:?} (expected complete_overlap, partial_overlap or disjoint)"
            ))),
        }
    }
}

/// Two-label toy: O1 and O2 are membership in two rectangles of the unit square.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToySpec {
    pub n_samples: usize,
    pub scenario: Scenario,
    pub rect1: Rect,
    pub rect2: Rect,
    pub seed: u64,
}

impl ToySpec {
    pub fn new(scenario: Scenario, n_samples: usize, seed: u64) -> Self {
        let (rect1, rect2) = scenario.default_rects();
        Self {
            n_samples,
            scenario,
            rect1,
            rect2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        self.rect1.validate()?;
        self.rect2.validate()?;
        let overlap = self.rect1.intersection_area(&self.rect2);
        let consistent = match self.scenario {
            Scenario::CompleteOverlap => self.rect1 == self.rect2,
            Scenario::PartialOverlap => overlap > 0.0 && self.rect1 != self.rect2,
            Scenario::Disjoint => overlap == 0.0,
        };
        if !consistent {
            return Err(Error::Config(format!("rectangles do not match scenario {}", self.scenario)));
        }
        Ok(())
    }
}

/// The O1 ⇒ O2 constraint of the rectangle toy.
pub fn toy_constraints() -> ConstraintSet {
    ConstraintSet::new(2, vec![vec![Literal::new(1, false), Literal::new(2, true)]]).expect("fixed clause is valid")
}

pub fn gen_toy(spec: &ToySpec) -> Result<(TabularDataset, ConstraintSet)> {
    spec.validate()?;
    let mut rng = Rng::seed_from_u64(spec.seed);
    let rows = (0..spec.n_samples)
        .map(|_| {
            let (x, y) = (rng.gen::<f64>(), rng.gen::<f64>());
            let v = vec![spec.rect1.contains(x, y), spec.rect2.contains(x, y)];
            (vec![x, y], Valuation::new(v))
        })
        .collect();
    let ds = TabularDataset {
        feature_names: vec!["x1".into(), "x2".into()],
        label_names: vec!["O1".into(), "O2".into()],
        rows,
    };
    Ok((ds, toy_constraints()))
}

/// Two labels with a joint distribution the marginals cannot recover.
///
/// For `x1 < 0.5` the valuation is (T,F), (F,T) or (T,T) with probability 0.45,
/// 0.35 and 0.2; for `x1 ≥ 0.5` the roles of the two labels swap. Both marginals
/// exceed one half everywhere, so per-label thresholding predicts (T,T), the least
/// likely of the three.
pub fn gen_anticorrelated(n_samples: usize, seed: u64) -> TabularDataset {
    let mut rng = Rng::seed_from_u64(seed);
    let rows = (0..n_samples)
        .map(|_| {
            let (x1, x2) = (rng.gen::<f64>(), rng.gen::<f64>());
            let u = rng.gen::<f64>();
            let (a, b) = if u < 0.45 {
                (true, false)
            } else if u < 0.8 {
                (false, true)
            } else {
                (true, true)
            };
            let v = if x1 < 0.5 { vec![a, b] } else { vec![b, a] };
            (vec![x1, x2], Valuation::new(v))
        })
        .collect();
    TabularDataset {
        feature_names: vec!["x1".into(), "x2".into()],
        label_names: vec!["O1".into(), "O2".into()],
        rows,
    }
}

fn check_fraction(f: f64, what: &str) -> Result<()> {
    if !(f.is_finite() && f > 0.0) {
        return Err(Error::Config(format!("{what} fraction must be positive, got {f}")));
    }
    Ok(())
}

/// Train, validation and test parts of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSplits {
    pub train: TabularDataset,
    pub valid: TabularDataset,
    pub test: TabularDataset,
}

fn shuffled_rows(ds: &TabularDataset, seed: u64) -> Vec<(Vec<f64>, Valuation)> {
    let mut rows = ds.rows.clone();
    rows.shuffle(&mut Rng::seed_from_u64(seed));
    rows
}

/// Seeded shuffle then contiguous slicing; part sizes are floored, remainder to test.
pub fn split(ds: &TabularDataset, fractions: [f64; 3], seed: u64) -> Result<DataSplits> {
    for (f, what) in fractions.iter().zip(["train", "validation", "test"]) {
        check_fraction(*f, what)?;
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions sum to {sum}, not 1")));
    }
    let n = ds.len();
    let n_train = (n as f64 * fractions[0] + 1e-9).floor() as usize;
    let n_valid = (n as f64 * fractions[1] + 1e-9).floor() as usize;
    let n_valid = n_valid.min(n - n_train);
    if n >= 3 && (n_train == 0 || n_valid == 0 || n_train + n_valid == n) {
        return Err(Error::Config(format!("split of {n} rows by {fractions:?} leaves an empty part")));
    }
    let mut rows = shuffled_rows(ds, seed);
    let test = rows.split_off(n_train + n_valid);
    let valid = rows.split_off(n_train);
    Ok(DataSplits {
        train: ds.with_rows(rows),
        valid: ds.with_rows(valid),
        test: ds.with_rows(test),
    })
}

/// Moves the first `floor(ratio · N)` rows of a seeded shuffle into an unlabeled pool.
pub fn split_unsupervised(train: &TabularDataset, ratio: f64, seed: u64) -> Result<(TabularDataset, Vec<Vec<f64>>)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("unsupervised ratio {ratio} outside [0, 1]")));
    }
    let mut rows = shuffled_rows(train, seed);
    let cut = ((train.len() as f64 * ratio) + 1e-9).floor() as usize;
    let supervised = rows.split_off(cut);
    Ok((train.with_rows(supervised), rows.into_iter().map(|(x, _)| x).collect()))
}
