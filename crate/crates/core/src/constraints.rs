//! CNF constraints over the output labels.
//!
//! Variable `i` (1-based) is the `i`-th label in model order. Prefix satisfiability
//! is decided with a small DPLL solver (unit propagation, first-unassigned branching).

use std::fmt::{self, Write as _};

use crate::error::{parse_err, shape_check, Error, Result};
use crate::model::Valuation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Literal {
    /// 1-based variable index.
    pub var: usize,
    pub positive: bool,
}

impl Literal {
    pub fn new(var: usize, positive: bool) -> Self {
        Self { var, positive }
    }

    pub fn from_dimacs(x: i64) -> Self {
        Self {
            var: x.unsigned_abs() as usize,
            positive: x > 0,
        }
    }

    pub fn to_dimacs(self) -> i64 {
        if self.positive {
            self.var as i64
        } else {
            -(self.var as i64)
        }
    }

    fn value(self, assignment: &[Option<bool>]) -> Option<bool> {
        assignment[self.var - 1].map(|b| b == self.positive)
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.positive {
            write!(f, "O{}", self.var)
        } else {
            write!(f, "¬O{}", self.var)
        }
    }
}

/// A conjunction of non-empty clauses over `n_vars` variables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstraintSet {
    n_vars: usize,
    clauses: Vec<Vec<Literal>>,
}

impl ConstraintSet {
    /// The empty (always satisfied) constraint set.
    pub fn empty(n_vars: usize) -> Self {
        Self {
            n_vars,
            clauses: Vec::new(),
        }
    }

    /// Validates the clauses and collapses duplicate literals, keeping first
    /// occurrences in order.
    pub fn new(n_vars: usize, clauses: Vec<Vec<Literal>>) -> Result<Self> {
        if n_vars == 0 {
            return Err(Error::Contract("constraint set needs at least one variable".into()));
        }
        let mut out = Vec::with_capacity(clauses.len());
        for (i, clause) in clauses.into_iter().enumerate() {
            if clause.is_empty() {
                return Err(Error::Contract(format!("clause {i} is empty")));
            }
            let mut lits: Vec<Literal> = Vec::with_capacity(clause.len());
            for lit in clause {
                if lit.var == 0 || lit.var > n_vars {
                    return Err(Error::Contract(format!(
                        "clause {i}: variable {} outside 1..={n_vars}",
                        lit.var
                    )));
                }
                if !lits.contains(&lit) {
                    lits.push(lit);
                }
            }
            out.push(lits);
        }
        Ok(Self { n_vars, clauses: out })
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn clauses(&self) -> &[Vec<Literal>] {
        &self.clauses
    }

    pub fn is_empty(&self) -> bool {
        self.clauses.is_empty()
    }

    /// Parses DIMACS CNF (`c` comments, `p cnf <n> <m>` header, 0-terminated clauses).
    pub fn parse_dimacs(text: &str) -> Result<Self> {
        let mut header: Option<(usize, usize)> = None;
        let mut clauses: Vec<Vec<Literal>> = Vec::new();
        let mut current: Vec<Literal> = Vec::new();
        let mut last_line = 0;
        for (idx, raw) in text.lines().enumerate() {
            let ln = idx + 1;
            last_line = ln;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('c') {
                continue;
            }
            if line.starts_with('p') {
                if header.is_some() {
                    return Err(parse_err(ln, "duplicate problem line"));
                }
                let toks: Vec<&str> = line.split_whitespace().collect();
                if toks.len() != 4 || toks[0] != "p" || toks[1] != "cnf" {
                    return Err(parse_err(ln, format!("malformed header {line:?}, expected `p cnf <vars> <clauses>`")));
                }
                let n = toks[2]
                    .parse::<usize>()
                    .map_err(|_| parse_err(ln, format!("bad variable count {:?}", toks[2])))?;
                let m = toks[3]
                    .parse::<usize>()
                    .map_err(|_| parse_err(ln, format!("bad clause count {:?}", toks[3])))?;
                if n == 0 {
                    return Err(parse_err(ln, "variable count must be positive"));
                }
                header = Some((n, m));
                continue;
            }
            let (n, _) = header.ok_or_else(|| parse_err(ln, "clause before `p cnf` header"))?;
            for tok in line.split_whitespace() {
                let x = tok
                    .parse::<i64>()
                    .map_err(|_| parse_err(ln, format!("bad literal {tok:?}")))?;
                if x == 0 {
                    if current.is_empty() {
                        return Err(parse_err(ln, "empty clause"));
                    }
                    clauses.push(std::mem::take(&mut current));
                } else {
                    let lit = Literal::from_dimacs(x);
                    if lit.var > n {
                        return Err(parse_err(ln, format!("literal {x} out of range 1..={n}")));
                    }
                    current.push(lit);
                }
            }
        }
        let (n, m) = header.ok_or_else(|| parse_err(last_line.max(1), "missing `p cnf` header"))?;
        if !current.is_empty() {
            return Err(parse_err(last_line, "last clause is not terminated by 0"));
        }
        if clauses.len() != m {
            return Err(parse_err(last_line.max(1), format!("header declares {m} clauses, found {}", clauses.len())));
        }
        Self::new(n, clauses).map_err(|e| parse_err(last_line, e.to_string()))
    }

    pub fn to_dimacs(&self) -> String {
        let mut s = format!("p cnf {} {}\n", self.n_vars, self.clauses.len());
        for clause in &self.clauses {
            for lit in clause {
                write!(s, "{} ", lit.to_dimacs()).unwrap();
            }
            s.push_str("0\n");
        }
        s
    }

    /// True iff every clause has a literal satisfied by `v`.
    pub fn eval_full(&self, v: &[bool]) -> Result<bool> {
        shape_check("valuation length", self.n_vars, v.len())?;
        Ok(self
            .clauses
            .iter()
            .all(|c| c.iter().any(|l| v[l.var - 1] == l.positive)))
    }

    /// True iff some completion of `prefix` (fixing variables `1..=prefix.len()`)
    /// satisfies every clause.
    pub fn sat_with_prefix(&self, prefix: &[bool]) -> Result<bool> {
        if prefix.len() > self.n_vars {
            return Err(Error::Shape(format!(
                "prefix of length {} exceeds {} variables",
                prefix.len(),
                self.n_vars
            )));
        }
        let mut assignment = vec![None; self.n_vars];
        for (slot, &b) in assignment.iter_mut().zip(prefix) {
            *slot = Some(b);
        }
        Ok(dpll(&self.clauses, &mut assignment))
    }

    /// Partitions valuations into (constraint-consistent, violating), preserving order.
    pub fn split_valid_invalid(&self, valuations: &[Valuation]) -> Result<(Vec<Valuation>, Vec<Valuation>)> {
        let mut valid = Vec::new();
        let mut invalid = Vec::new();
        for v in valuations {
            if self.eval_full(v)? {
                valid.push(v.clone());
            } else {
                invalid.push(v.clone());
            }
        }
        Ok((valid, invalid))
    }
}

enum Propagation {
    Conflict,
    Done,
}

fn propagate(clauses: &[Vec<Literal>], assignment: &mut [Option<bool>]) -> Propagation {
    loop {
        let mut changed = false;
        for clause in clauses {
            let mut unassigned = None;
            let mut open = 0;
            let mut satisfied = false;
            for &lit in clause {
                match lit.value(assignment) {
                    Some(true) => {
                        satisfied = true;
                        break;
                    }
                    Some(false) => {}
                    None => {
                        open += 1;
                        unassigned = Some(lit);
                    }
                }
            }
            if satisfied {
                continue;
            }
            match (open, unassigned) {
                (0, _) => return Propagation::Conflict,
                (1, Some(lit)) => {
                    assignment[lit.var - 1] = Some(lit.positive);
                    changed = true;
                }
                _ => {}
            }
        }
        if !changed {
            return Propagation::Done;
        }
    }
}

fn dpll(clauses: &[Vec<Literal>], assignment: &mut Vec<Option<bool>>) -> bool {
    if let Propagation::Conflict = propagate(clauses, assignment) {
        return false;
    }
    // Branch on the first unassigned variable of an unsatisfied clause.
    let open = clauses.iter().find_map(|clause| {
        if clause.iter().any(|l| l.value(assignment) == Some(true)) {
            return None;
        }
        clause.iter().find(|l| l.value(assignment).is_none()).map(|l| l.var)
    });
    let Some(var) = open else {
        return true;
    };
    for choice in [true, false] {
        let mut trial = assignment.clone();
        trial[var - 1] = Some(choice);
        if dpll(clauses, &mut trial) {
            *assignment = trial;
            return true;
        }
    }
    false
}
