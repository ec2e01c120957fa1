//! Training objectives: base cross-entropy, sequence NLL and the prefix-masked
//! constraint loss.
//!
//! Every conditional evaluation is clamped to `[PROB_EPS, 1 − PROB_EPS]` before the
//! log, and gradients are those of the clamped function (zero where the clamp bites).

use crate::error::{shape_check, Result};
use crate::model::{encode_cond_input, Valuation, PROB_EPS};
use crate::nnet::{DenseNet, Dropout, Gradients};

pub const DEFAULT_LAMBDA: f64 = 1.0;

/// `ln(term)` and its derivative with respect to the predicted probability `c`,
/// where `term` is `c` for a true bit and `1 − c` for a false one.
fn log_term(c: f64, bit: bool) -> (f64, f64) {
    let p = if bit { c } else { 1.0 - c };
    if p < PROB_EPS || p > 1.0 - PROB_EPS {
        return (p.clamp(PROB_EPS, 1.0 - PROB_EPS).ln(), 0.0);
    }
    (p.ln(), if bit { 1.0 / p } else { -1.0 / p })
}

/// Mean per-label binary cross-entropy and its gradient with respect to `pa`.
pub fn base_bce_loss(pa: &[f64], target: &[bool]) -> Result<(f64, Vec<f64>)> {
    shape_check("target length", pa.len(), target.len())?;
    let n = pa.len() as f64;
    let mut loss = 0.0;
    let grad = pa
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let (l, d) = log_term(p, t);
            loss -= l;
            -d / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// Adds `scale · Σ_j ln(term_j)` over the selected steps of `v` and accumulates its
/// gradient. Steps where `include` is false are never evaluated.
fn accumulate_steps(
    net: &DenseNet,
    context: &[f64],
    v: &[bool],
    include: Option<&[bool]>,
    scale: f64,
    grads: &mut Gradients,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<f64> {
    let n = v.len();
    let mut total = 0.0;
    for j in 0..n {
        if include.is_some_and(|m| !m[j]) {
            continue;
        }
        let x = encode_cond_input(context, &v[..j], n)?;
        let trace = net.forward_traced(&x, dropout.as_deref_mut())?;
        let (l, d) = log_term(trace.output()[0], v[j]);
        total += l;
        if d != 0.0 {
            net.backward_into(&trace, &[d], scale, grads)?;
        }
    }
    Ok(total)
}

/// `−ln P(target | context)` under the conditional network, with parameter gradients.
pub fn supervised_loss(
    net: &DenseNet,
    context: &[f64],
    target: &[bool],
    dropout: Option<&mut Dropout<'_>>,
) -> Result<(f64, Gradients)> {
    shape_check("conditional network input", context.len() + 2 * target.len(), net.input_dim())?;
    let mut grads = Gradients::zeros_like(net);
    let lp = accumulate_steps(net, context, target, None, -1.0, &mut grads, dropout)?;
    Ok((-lp, grads))
}

/// Per invalid valuation, which steps are penalized: step `j` is off exactly when
/// the length-`j` prefix also starts some valid valuation.
pub fn compute_masks(valid: &[Valuation], invalid: &[Valuation]) -> Result<Vec<Vec<bool>>> {
    let Some(n) = valid.first().or(invalid.first()).map(|v| v.len()) else {
        return Ok(Vec::new());
    };
    // binary trie over valid prefixes; node 0 is the empty prefix
    let mut trie: Vec<[Option<usize>; 2]> = vec![[None, None]];
    for v in valid {
        shape_check("valuation length", n, v.len())?;
        let mut node = 0;
        for &b in v.iter() {
            node = match trie[node][b as usize] {
                Some(next) => next,
                None => {
                    trie.push([None, None]);
                    trie[node][b as usize] = Some(trie.len() - 1);
                    trie.len() - 1
                }
            };
        }
    }
    invalid
        .iter()
        .map(|v| {
            shape_check("valuation length", n, v.len())?;
            let mut node = Some(0);
            Ok(v.iter()
                .map(|&b| {
                    node = node.and_then(|i| trie[i][b as usize]);
                    node.is_none()
                })
                .collect())
        })
        .collect()
}

/// `Σ_{v invalid} Σ_j m[j]·ln(term_j)` with parameter gradients.
///
/// The sampled valuations are constants; an empty invalid set gives zero loss.
pub fn constraint_loss(
    net: &DenseNet,
    context: &[f64],
    valid: &[Valuation],
    invalid: &[Valuation],
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<(f64, Gradients)> {
    let masks = compute_masks(valid, invalid)?;
    let mut grads = Gradients::zeros_like(net);
    let mut loss = 0.0;
    for (v, m) in invalid.iter().zip(&masks) {
        shape_check("conditional network input", context.len() + 2 * v.len(), net.input_dim())?;
        loss += accumulate_steps(net, context, v, Some(m), 1.0, &mut grads, dropout.as_deref_mut())?;
    }
    Ok((loss, grads))
}
