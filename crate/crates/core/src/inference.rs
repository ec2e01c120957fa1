//! Decoders over a step model: ancestral sampling, beam search (plain and
//! SAT-guarded) and exhaustive top-k enumeration.

use std::cmp::Ordering;

use rand::{Rng as _, SeedableRng};
use serde::Serialize;

use crate::constraints::ConstraintSet;
use crate::error::{shape_check, Error, Result};
use crate::model::{step_log_term, StepModel, Valuation};
use crate::nnet::Rng;

pub const DEFAULT_BEAM_WIDTH: usize = 4;
pub const TRAIN_BEAM_WIDTH: usize = 5;
pub const DEFAULT_ENUM_CAP: usize = 20;
pub const SWEEP_WIDTHS: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];

/// A decoded valuation with its log-probability under the model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scored {
    pub valuation: Valuation,
    pub logp: f64,
}

/// Descending log-probability, then lexicographic with false < true.
fn rank(a: &(Vec<bool>, f64), b: &(Vec<bool>, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0))
}

/// How each label is chosen from its conditional probability during ancestral sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingStrategy {
    /// True iff the probability is strictly above 0.5.
    Greedy,
    Bernoulli { seed: u64 },
}

pub fn ancestral_sample<M: StepModel + ?Sized>(model: &M, strategy: SamplingStrategy) -> Valuation {
    let mut rng = match strategy {
        SamplingStrategy::Bernoulli { seed } => Some(Rng::seed_from_u64(seed)),
        SamplingStrategy::Greedy => None,
    };
    let mut v = Vec::with_capacity(model.n_labels());
    for _ in 0..model.n_labels() {
        let p = model.next_true_prob(&v);
        v.push(match rng.as_mut() {
            Some(rng) => rng.gen::<f64>() < p,
            None => p > 0.5,
        });
    }
    Valuation::new(v)
}

/// The surviving prefixes of one beam round, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct Beam {
    width: usize,
    entries: Vec<(Vec<bool>, f64)>,
}

impl Beam {
    pub fn new(width: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        Ok(Self {
            width,
            entries: vec![(Vec::new(), 0.0)],
        })
    }

    pub fn entries(&self) -> &[(Vec<bool>, f64)] {
        &self.entries
    }

    pub fn prefix_len(&self) -> usize {
        self.entries.first().map_or(0, |e| e.0.len())
    }

    /// Extends every prefix by both values, drops children rejected by `keep`,
    /// and prunes back to the beam width.
    pub fn advance<M, F>(&mut self, model: &M, mut keep: F) -> Result<()>
    where
        M: StepModel + ?Sized,
        F: FnMut(&[bool]) -> Result<bool>,
    {
        let mut next = Vec::with_capacity(2 * self.entries.len());
        for (prefix, logp) in &self.entries {
            let p = model.next_true_prob(prefix);
            for bit in [false, true] {
                let mut child = prefix.clone();
                child.push(bit);
                if keep(&child)? {
                    next.push((child, logp + step_log_term(p, bit)));
                }
            }
        }
        next.sort_by(rank);
        next.truncate(self.width);
        self.entries = next;
        Ok(())
    }

    fn finish(self) -> Vec<Scored> {
        self.entries
            .into_iter()
            .map(|(v, logp)| Scored {
                valuation: Valuation::new(v),
                logp,
            })
            .collect()
    }
}

pub fn beam_search<M: StepModel + ?Sized>(model: &M, k: usize) -> Result<Vec<Scored>> {
    let mut beam = Beam::new(k)?;
    for _ in 0..model.n_labels() {
        beam.advance(model, |_| Ok(true))?;
    }
    Ok(beam.finish())
}

/// Beam search that only keeps prefixes still extendable to a model of `cs`.
pub fn beam_search_sat<M: StepModel + ?Sized>(model: &M, k: usize, cs: &ConstraintSet) -> Result<Vec<Scored>> {
    shape_check("constraint variables", model.n_labels(), cs.n_vars())?;
    let mut beam = Beam::new(k)?;
    if !cs.sat_with_prefix(&[])? {
        return Err(Error::Contract("constraint set is unsatisfiable".into()));
    }
    for _ in 0..model.n_labels() {
        beam.advance(model, |prefix| cs.sat_with_prefix(prefix))?;
    }
    Ok(beam.finish())
}

/// The `k` most probable valuations by full enumeration.
///
/// Refuses models with more than `cap` labels.
pub fn exact_topk<M: StepModel + ?Sized>(model: &M, k: usize, cap: usize) -> Result<Vec<Scored>> {
    let n = model.n_labels();
    if n > cap {
        return Err(Error::Contract(format!(
            "exact enumeration refused: {n} labels exceeds the cap of {cap}"
        )));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let mut all = Vec::with_capacity(1 << n);
    let mut prefix = Vec::with_capacity(n);
    enumerate(model, &mut prefix, 0.0, &mut all);
    let k = k.min(all.len());
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, rank);
        all.truncate(k);
    }
    all.sort_by(rank);
    Ok(all
        .into_iter()
        .map(|(v, logp)| Scored {
            valuation: Valuation::new(v),
            logp,
        })
        .collect())
}

fn enumerate<M: StepModel + ?Sized>(model: &M, prefix: &mut Vec<bool>, logp: f64, out: &mut Vec<(Vec<bool>, f64)>) {
    if prefix.len() == model.n_labels() {
        out.push((prefix.clone(), logp));
        return;
    }
    let p = model.next_true_prob(prefix);
    for bit in [false, true] {
        prefix.push(bit);
        enumerate(model, prefix, logp + step_log_term(p, bit), out);
        prefix.pop();
    }
}

/// Renders decoder output as a JSON array of `{valuation, logp}` records.
pub fn to_json(results: &[Scored]) -> String {
    serde_json::to_string(results).expect("plain records always serialize")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{ConstraintSet, Literal};
    use crate::model::{sequence_logprob, ConditionalModel, Independent};
    use crate::nnet::DenseNet;
    use proptest::prelude::*;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    /// Explicit conditionals: row `j` holds P(true) for each length-`j` prefix, by binary code.
    struct Table(Vec<Vec<f64>>);

    impl StepModel for Table {
        fn n_labels(&self) -> usize {
            self.0.len()
        }
        fn next_true_prob(&self, prefix: &[bool]) -> f64 {
            let row = &self.0[prefix.len()];
            let code = prefix.iter().fold(0usize, |a, &b| a << 1 | b as usize);
            row[code]
        }
    }

    fn seeded_cond(n: usize, seed: u64) -> (ConditionalModel, Vec<f64>) {
        let cond = ConditionalModel::seeded(n, n, &[8, 8], seed).unwrap();
        let pa = (0..n).map(|i| ((i * 37 + seed as usize) % 11) as f64 / 10.0).collect();
        (cond, pa)
    }

    #[test]
    fn zero_net_greedy_is_all_false() {
        let cond = ConditionalModel::new(DenseNet::zeros(&[9, 3, 1]).unwrap(), 3, 3).unwrap();
        let view = cond.bind(&[0.2, 0.5, 0.8]).unwrap();
        assert_eq!(ancestral_sample(&view, SamplingStrategy::Greedy).to_bitstring(), "000");
    }

    #[test]
    fn greedy_follows_conditionals() {
        // bias-only net: step 1 sees nothing known, step 2 sees the mask channel of O1
        let mut w = vec![0.0; 6];
        w[4] = logit(0.2) - logit(0.9);
        let net = DenseNet::from_parts(vec![6, 1], vec![w], vec![vec![logit(0.9)]]).unwrap();
        let cond = ConditionalModel::new(net, 2, 2).unwrap();
        let view = cond.bind(&[0.3, 0.3]).unwrap();
        assert!((view.next_true_prob(&[]) - 0.9).abs() < 1e-12);
        assert!((view.next_true_prob(&[true]) - 0.2).abs() < 1e-12);
        assert_eq!(ancestral_sample(&view, SamplingStrategy::Greedy).to_bitstring(), "10");
    }

    #[test]
    fn bernoulli_is_reproducible() {
        let (cond, pa) = seeded_cond(12, 4);
        let view = cond.bind(&pa).unwrap();
        let s = SamplingStrategy::Bernoulli { seed: 17 };
        assert_eq!(ancestral_sample(&view, s), ancestral_sample(&view, s));
    }

    #[test]
    fn bernoulli_frequencies_track_probability() {
        let pa = [0.3];
        let ind = Independent(&pa);
        let hits = (0..4000)
            .filter(|&s| ancestral_sample(&ind, SamplingStrategy::Bernoulli { seed: s })[0])
            .count();
        let f = hits as f64 / 4000.0;
        assert!((f - 0.3).abs() < 0.03, "{f}");
    }

    #[test]
    fn zero_net_beam_tie_order() {
        let cond = ConditionalModel::new(DenseNet::zeros(&[6, 2, 1]).unwrap(), 2, 2).unwrap();
        let out = beam_search(&cond.bind(&[0.5, 0.5]).unwrap(), 4).unwrap();
        let bits: Vec<String> = out.iter().map(|s| s.valuation.to_bitstring()).collect();
        assert_eq!(bits, ["00", "01", "10", "11"]);
        for s in &out {
            assert!((s.logp - 2.0 * 0.5f64.ln()).abs() < 1e-15);
        }
        let ex = exact_topk(&cond.bind(&[0.5, 0.5]).unwrap(), 3, DEFAULT_ENUM_CAP).unwrap();
        let bits: Vec<String> = ex.iter().map(|s| s.valuation.to_bitstring()).collect();
        assert_eq!(bits, ["00", "01", "10"]);
    }

    #[test]
    fn full_width_beam_equals_enumeration() {
        for n in 1..=6 {
            let (cond, pa) = seeded_cond(n, n as u64);
            let view = cond.bind(&pa).unwrap();
            let beam = beam_search(&view, 1 << n).unwrap();
            let exact = exact_topk(&view, 1 << n, DEFAULT_ENUM_CAP).unwrap();
            assert_eq!(beam, exact);
            // oracle: joint log-probability of every valuation, sorted independently
            let mut oracle: Vec<(Valuation, f64)> = Valuation::all(n).map(|v| {
                let lp = sequence_logprob(&view, &v).unwrap();
                (v, lp)
            }).collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for (s, (v, lp)) in beam.iter().zip(&oracle) {
                assert_eq!(&s.valuation, v);
                assert_eq!(s.logp, *lp);
            }
            let total: f64 = exact.iter().map(|s| s.logp.exp()).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn exact_ranking_matches_product_oracle() {
        let (cond, pa) = seeded_cond(3, 77);
        let view = cond.bind(&pa).unwrap();
        let exact = exact_topk(&view, 8, DEFAULT_ENUM_CAP).unwrap();
        let prob = |v: &[bool]| {
            let mut p = 1.0;
            for j in 0..3 {
                let c = cond.net().forward(&crate::model::encode_cond_input(&pa, &v[..j], 3).unwrap()).unwrap()[0];
                p *= if v[j] { c } else { 1.0 - c };
            }
            p
        };
        for w in exact.windows(2) {
            assert!(prob(&w[0].valuation) >= prob(&w[1].valuation) - 1e-12);
        }
    }

    #[test]
    fn exact_refuses_above_cap() {
        let pa = vec![0.5; 21];
        let err = exact_topk(&Independent(&pa), 1, DEFAULT_ENUM_CAP).unwrap_err();
        assert!(err.to_string().contains("20"), "{err}");
        assert!(exact_topk(&Independent(&pa[..3]), 1, 2).is_err());
    }

    #[test]
    fn width_one_is_greedy() {
        for seed in 0..200 {
            let n = 1 + seed as usize % 9;
            let (cond, pa) = seeded_cond(n, seed);
            let view = cond.bind(&pa).unwrap();
            let beam = beam_search(&view, 1).unwrap();
            assert_eq!(beam.len(), 1);
            assert_eq!(beam[0].valuation, ancestral_sample(&view, SamplingStrategy::Greedy));
        }
    }

    #[test]
    fn sat_guard_overrides_preference() {
        // model prefers (T, F); constraint O1 ⇒ O2
        let t = Table(vec![vec![0.9], vec![0.2, 0.2]]);
        let plain = beam_search(&t, 1).unwrap();
        assert_eq!(plain[0].valuation.to_bitstring(), "10");
        let cs = ConstraintSet::new(2, vec![vec![Literal::new(1, false), Literal::new(2, true)]]).unwrap();
        let guarded = beam_search_sat(&t, 4, &cs).unwrap();
        assert_eq!(guarded.len(), 3);
        assert!(guarded.iter().all(|s| cs.eval_full(&s.valuation).unwrap()));
        assert_ne!(guarded[0].valuation.to_bitstring(), "10");
        // the best valid valuation by enumeration
        let best = Valuation::all(2)
            .filter(|v| cs.eval_full(v).unwrap())
            .max_by(|a, b| sequence_logprob(&t, a).unwrap().partial_cmp(&sequence_logprob(&t, b).unwrap()).unwrap())
            .unwrap();
        assert_eq!(guarded[0].valuation, best);
    }

    #[test]
    fn sat_with_empty_constraints_is_plain_beam() {
        let (cond, pa) = seeded_cond(7, 3);
        let view = cond.bind(&pa).unwrap();
        assert_eq!(beam_search_sat(&view, 4, &ConstraintSet::empty(7)).unwrap(), beam_search(&view, 4).unwrap());
    }

    #[test]
    fn sat_rejects_unsatisfiable() {
        let pa = [0.5];
        let cs = ConstraintSet::parse_dimacs("p cnf 1 2\n1 0\n-1 0\n").unwrap();
        assert!(matches!(beam_search_sat(&Independent(&pa), 2, &cs), Err(Error::Contract(_))));
    }

    #[test]
    fn sat_guard_property_trials() {
        use rand::Rng as _;
        let mut rng = crate::nnet::Rng::seed_from_u64(2024);
        let mut trials = 0;
        while trials < 500 {
            let n = rng.gen_range(1..=10);
            let m = rng.gen_range(0..3 * n);
            let cs = ConstraintSet::new(
                n,
                (0..m)
                    .map(|_| (0..rng.gen_range(1..=3)).map(|_| Literal::new(rng.gen_range(1..=n), rng.gen())).collect())
                    .collect(),
            )
            .unwrap();
            if !cs.sat_with_prefix(&[]).unwrap() {
                continue;
            }
            trials += 1;
            let (cond, pa) = seeded_cond(n, rng.gen());
            let view = cond.bind(&pa).unwrap();
            let k = rng.gen_range(1..=6);
            let out = beam_search_sat(&view, k, &cs).unwrap();
            assert!(!out.is_empty());
            for s in &out {
                assert!(cs.eval_full(&s.valuation).unwrap());
                assert_eq!(s.logp, sequence_logprob(&view, &s.valuation).unwrap());
            }
        }
    }

    #[test]
    fn json_records() {
        let out = vec![Scored {
            valuation: Valuation::from_bitstring("101").unwrap(),
            logp: -0.5,
        }];
        assert_eq!(to_json(&out), r#"[{"valuation":"101","logp":-0.5}]"#);
    }

    #[test]
    fn zero_width_rejected() {
        assert!(beam_search(&Independent(&[0.5]), 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn wider_beam_never_worse(n in 1usize..9, seed in any::<u64>(), k in 1usize..8, extra in 1usize..8) {
            let (cond, pa) = seeded_cond(n, seed);
            let view = cond.bind(&pa).unwrap();
            let a = beam_search(&view, k).unwrap();
            let b = beam_search(&view, k + extra).unwrap();
            prop_assert!(b[0].logp >= a[0].logp);
        }

        #[test]
        fn returned_logps_are_exact(n in 1usize..9, seed in any::<u64>(), k in 1usize..10) {
            let (cond, pa) = seeded_cond(n, seed);
            let view = cond.bind(&pa).unwrap();
            for s in beam_search(&view, k).unwrap().into_iter().chain(exact_topk(&view, k, 20).unwrap()) {
                prop_assert_eq!(s.logp, cond.joint_logprob(&pa, &s.valuation).unwrap());
            }
        }
    }
}
