//! Opacity quantification at a fixed valuation: the probability that an
//! intruder watching observable events ever pins the system inside the
//! secret set. Two independent routes are provided, a linear-equation solve
//! on the belief product chain and a brute-force run enumeration, so each
//! can vouch for the other in tests.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::{EventId, Psdes, StateId};
use crate::observer::Observer;
use crate::posy::{ClosureError, EvalError, Valuation};

#[derive(Debug, Error)]
pub enum OpacityError {
    #[error("valuation violates row-stochasticity: state {state} has outgoing mass {sum}")]
    RowStochastic { state: String, sum: f64 },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Closure(#[from] ClosureError),
    #[error("depth insufficient: runs were still alive after {0} events")]
    DepthInsufficient(usize),
}

/// Opacity level of a system at one valuation.
#[derive(Clone, Debug)]
pub struct OpacityReport {
    /// Probability that the secret is revealed on some prefix.
    pub p_reveal: f64,
    /// Opacity level, `1 - p_reveal`.
    pub p_cso: f64,
    /// First-reveal observed strings, when finitely enumerable.
    pub revealing_strings: Option<Vec<String>>,
    /// Conservation defect of the computation that produced the numbers.
    pub residual: f64,
}

fn check_rows(m: &Psdes, v: &Valuation) -> Result<(), OpacityError> {
    for q in 0..m.n_states() {
        let sum = m.row_sum(q).eval(v)?;
        if sum.abs() > 1e-6 && (sum - 1.0).abs() > 1e-6 {
            return Err(OpacityError::RowStochastic {
                state: m.state_label(q).to_string(),
                sum,
            });
        }
    }
    Ok(())
}

/// Least solution of `x = P x + r` by LU when the system is nonsingular,
/// else by iteration from zero (which converges to the least fixed point).
/// Returns the solution and its residual.
pub(crate) fn solve_reach(p: &DMatrix<f64>, r: &DVector<f64>) -> (DVector<f64>, f64) {
    let n = p.nrows();
    let a = DMatrix::identity(n, n) - p;
    let solved = a.clone().lu().solve(r).filter(|x| {
        x.iter().all(|xi| xi.is_finite() && *xi >= -1e-9 && *xi <= 1.0 + 1e-9)
    });
    let x = match solved {
        Some(x) => x,
        None => {
            let mut x = DVector::zeros(n);
            for _ in 0..10_000_000 {
                let next = p * &x + r;
                let delta = (&next - &x).abs().max();
                x = next;
                if delta <= 1e-12 {
                    break;
                }
            }
            x
        }
    };
    let residual = (&a * &x - r).abs().max();
    (x, residual)
}

/// Quantifies opacity by folding unobservable behavior into per-event step
/// matrices, taking the product of the evaluated chain with the observer,
/// making revealing composites absorbing, and solving for reachability.
pub fn quantify_opacity(m: &Psdes, v: &Valuation) -> Result<OpacityReport, OpacityError> {
    check_rows(m, v)?;
    let obs = Observer::build(m);
    let n = m.n_states();
    let star = m.uo_matrix().star_auto()?.eval(v)?;
    let mut step: Vec<DMatrix<f64>> = Vec::new();
    let mut step_events: Vec<EventId> = Vec::new();
    for e in m.observable_events() {
        let pe = m.event_matrix(e).eval(v)?;
        step.push(&star * pe);
        step_events.push(e);
    }

    // composite states (q, observer node), reachable subset only
    let mut index: BTreeMap<(StateId, usize), usize> = BTreeMap::new();
    let mut composites: Vec<(StateId, usize)> = Vec::new();
    let n0 = obs.initial();
    let mut work = VecDeque::new();
    let mut init_pairs: Vec<(usize, f64)> = Vec::new();
    if obs.is_revealing(n0) {
        // the intruder knows the secret before any observation
        return Ok(OpacityReport {
            p_reveal: 1.0,
            p_cso: 0.0,
            revealing_strings: Some(vec![String::new()]),
            residual: 0.0,
        });
    }
    for q in m.init_support() {
        let id = composites.len();
        index.insert((q, n0), id);
        composites.push((q, n0));
        work.push_back(id);
        init_pairs.push((id, m.init_dist()[q]));
    }
    // rows: transitions among non-revealing composites; reveal column: mass
    // that enters a revealing estimate (absorbed there)
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut reveal_col: Vec<f64> = Vec::new();
    while let Some(id) = work.pop_front() {
        let (q, node) = composites[id];
        if rows.len() <= id {
            rows.resize(id + 1, Vec::new());
            reveal_col.resize(id + 1, 0.0);
        }
        for (k, e) in step_events.iter().enumerate() {
            let Some(next_node) = obs.step(node, *e) else { continue };
            for to in 0..n {
                let p = step[k][(q, to)];
                if p <= 0.0 {
                    continue;
                }
                if obs.is_revealing(next_node) {
                    reveal_col[id] += p;
                } else {
                    let key = (to, next_node);
                    let tid = match index.get(&key) {
                        Some(t) => *t,
                        None => {
                            let t = composites.len();
                            index.insert(key, t);
                            composites.push(key);
                            work.push_back(t);
                            t
                        }
                    };
                    rows[id].push((tid, p));
                }
            }
        }
    }
    let dim = composites.len();
    rows.resize(dim, Vec::new());
    reveal_col.resize(dim, 0.0);
    let mut pmat = DMatrix::zeros(dim, dim);
    for (i, row) in rows.iter().enumerate() {
        for (j, p) in row {
            pmat[(i, *j)] += *p;
        }
    }
    let rvec = DVector::from_iterator(dim, reveal_col.iter().copied());
    let (x, residual) = solve_reach(&pmat, &rvec);
    let p_reveal: f64 = init_pairs.iter().map(|(id, w)| w * x[*id]).sum();
    let p_reveal = p_reveal.clamp(0.0, 1.0);

    let revealing_strings = enumerate_first_reveal(&obs);
    Ok(OpacityReport { p_reveal, p_cso: 1.0 - p_reveal, revealing_strings, residual })
}

/// All first-reveal observed strings, when the observer is acyclic.
fn enumerate_first_reveal(obs: &Observer) -> Option<Vec<String>> {
    if obs.find_cycle().is_some() {
        return None;
    }
    let mut out: Vec<Vec<EventId>> = Vec::new();
    let mut stack: Vec<(usize, Vec<EventId>)> = vec![(obs.initial(), Vec::new())];
    while let Some((node, w)) = stack.pop() {
        for (e, v) in obs.out_edges(node) {
            let mut wn = w.clone();
            wn.push(e);
            if obs.is_revealing(v) {
                out.push(wn);
            } else {
                stack.push((v, wn));
            }
        }
    }
    out.sort_by_key(|w| (w.len(), obs.string_label(w)));
    Some(out.iter().map(|w| obs.string_label(w)).collect())
}

/// Independent oracle: enumerate every run of at most `depth` events,
/// tracking the intruder estimate by direct subset propagation, and sum the
/// probability of runs whose observation reveals the secret.
pub fn brute_force_opacity(
    m: &Psdes,
    v: &Valuation,
    depth: usize,
) -> Result<OpacityReport, OpacityError> {
    check_rows(m, v)?;
    let n = m.n_states();
    let mut uo_adj: Vec<Vec<StateId>> = vec![Vec::new(); n];
    for t in m.transitions() {
        if !m.is_observable(t.event) {
            uo_adj[t.from].push(t.to);
        }
    }
    let closure = |seed: BTreeSet<StateId>| -> BTreeSet<StateId> {
        let mut seen = seed.clone();
        let mut work: Vec<StateId> = seed.into_iter().collect();
        while let Some(q) = work.pop() {
            for r in &uo_adj[q] {
                if seen.insert(*r) {
                    work.push(*r);
                }
            }
        }
        seen
    };
    // per-state outgoing transitions with evaluated probabilities
    let mut outgoing: Vec<Vec<(EventId, StateId, f64)>> = vec![Vec::new(); n];
    for t in m.transitions() {
        outgoing[t.from].push((t.event, t.to, t.prob.eval(v)?));
    }

    struct Walk<'a> {
        m: &'a Psdes,
        outgoing: &'a [Vec<(EventId, StateId, f64)>],
        closure: &'a dyn Fn(BTreeSet<StateId>) -> BTreeSet<StateId>,
        p_reveal: f64,
        p_safe: f64,
        strings: BTreeSet<Vec<EventId>>,
    }

    impl Walk<'_> {
        fn go(
            &mut self,
            q: StateId,
            est: &BTreeSet<StateId>,
            obs_string: &mut Vec<EventId>,
            mass: f64,
            depth_left: usize,
        ) -> Result<(), OpacityError> {
            if self.outgoing[q].is_empty() {
                self.p_safe += mass;
                return Ok(());
            }
            if depth_left == 0 {
                return Err(OpacityError::DepthInsufficient(obs_string.len()));
            }
            for (e, to, p) in &self.outgoing[q] {
                let mass = mass * p;
                if self.m.is_observable(*e) {
                    let moved: BTreeSet<StateId> = est
                        .iter()
                        .flat_map(|s| {
                            self.outgoing[*s]
                                .iter()
                                .filter(|(ev, _, _)| ev == e)
                                .map(|(_, t, _)| *t)
                        })
                        .collect();
                    let next_est = (self.closure)(moved);
                    obs_string.push(*e);
                    if is_revealing_set(self.m, &next_est) {
                        self.p_reveal += mass;
                        self.strings.insert(obs_string.clone());
                    } else {
                        self.go(*to, &next_est, obs_string, mass, depth_left - 1)?;
                    }
                    obs_string.pop();
                } else {
                    self.go(*to, est, obs_string, mass, depth_left - 1)?;
                }
            }
            Ok(())
        }
    }

    fn is_revealing_set(m: &Psdes, est: &BTreeSet<StateId>) -> bool {
        !est.is_empty() && est.iter().all(|q| m.secret().contains(q))
    }

    let est0 = closure(m.init_support().collect());
    if is_revealing_set(m, &est0) {
        return Ok(OpacityReport {
            p_reveal: 1.0,
            p_cso: 0.0,
            revealing_strings: Some(vec![String::new()]),
            residual: 0.0,
        });
    }
    let mut walk = Walk {
        m,
        outgoing: &outgoing,
        closure: &closure,
        p_reveal: 0.0,
        p_safe: 0.0,
        strings: BTreeSet::new(),
    };
    for q in m.init_support() {
        let mut obs_string = Vec::new();
        walk.go(q, &est0, &mut obs_string, m.init_dist()[q], depth)?;
    }
    let residual = (walk.p_reveal + walk.p_safe - 1.0).abs();
    let mut strings: Vec<Vec<EventId>> = walk.strings.into_iter().collect();
    strings.sort_by_key(|w| (w.len(), event_label(m, w)));
    Ok(OpacityReport {
        p_reveal: walk.p_reveal,
        p_cso: 1.0 - walk.p_reveal,
        revealing_strings: Some(strings.iter().map(|w| event_label(m, w)).collect()),
        residual,
    })
}

fn event_label(m: &Psdes, w: &[EventId]) -> String {
    w.iter().map(|e| m.event_name(*e)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posy::valuation_from_json;

    const NETWORK: &str = include_str!("../fixtures/network.psdes");
    const REFERENCE_VALUATION: &str = include_str!("../fixtures/network_valuation.json");

    fn network() -> (Psdes, Valuation) {
        (Psdes::parse(NETWORK).unwrap(), valuation_from_json(REFERENCE_VALUATION).unwrap())
    }

    #[test]
    fn network_reveal_probability_is_the_lower_branch_mass() {
        let (m, v) = network();
        let rep = quantify_opacity(&m, &v).unwrap();
        assert!((rep.p_reveal - 0.2998).abs() < 1e-12, "p_reveal = {}", rep.p_reveal);
        assert!((rep.p_cso - 0.7002).abs() < 1e-12);
        assert!(rep.residual <= 1e-10);
        assert_eq!(rep.revealing_strings.as_deref(), Some(&["ba".to_string(), "bc".into()][..]));
    }

    #[test]
    fn oracle_agrees_on_the_network() {
        let (m, v) = network();
        let a = quantify_opacity(&m, &v).unwrap();
        let b = brute_force_opacity(&m, &v, 8).unwrap();
        assert!((a.p_reveal - b.p_reveal).abs() < 1e-9);
        assert!((a.p_cso - b.p_cso).abs() < 1e-9);
        assert_eq!(a.revealing_strings, b.revealing_strings);
        assert!(b.residual < 1e-9);
    }

    #[test]
    fn opaque_system_scores_one() {
        let (m, v) = network();
        let text = NETWORK.replace("secret 8 9", "");
        let open = Psdes::parse(&text).unwrap();
        let rep = quantify_opacity(&open, &v).unwrap();
        assert_eq!(rep.p_reveal, 0.0);
        assert_eq!(rep.p_cso, 1.0);
        assert_eq!(rep.revealing_strings.as_deref().map(|s| s.len()), Some(0));
        drop(m);
    }

    #[test]
    fn certain_reveal_scores_zero() {
        let text = "psdes\nstates s0 s1\nevents a\nobservable a\nsecret s1\ninit s0 1\n\
                    trans s0 a s1\n";
        let m = Psdes::parse(text).unwrap();
        let v = Valuation::new();
        let rep = quantify_opacity(&m, &v).unwrap();
        assert_eq!(rep.p_reveal, 1.0);
        assert_eq!(rep.p_cso, 0.0);
        let oracle = brute_force_opacity(&m, &v, 3).unwrap();
        assert_eq!(oracle.p_reveal, 1.0);
    }

    #[test]
    fn depth_zero_on_live_system_is_an_error() {
        let (m, v) = network();
        assert!(matches!(
            brute_force_opacity(&m, &v, 0),
            Err(OpacityError::DepthInsufficient(_))
        ));
    }

    #[test]
    fn absorbing_nonsecret_state_is_fully_opaque() {
        let m = Psdes::parse("psdes\nstates s\nevents a\nobservable a\ninit s 1\n").unwrap();
        let rep = brute_force_opacity(&m, &Valuation::new(), 0).unwrap();
        assert_eq!(rep.p_cso, 1.0);
        assert_eq!(rep.residual, 0.0);
    }

    #[test]
    fn bad_row_mass_is_rejected() {
        let (m, _) = network();
        let v = valuation_from_json(
            r#"{"v1":0.5,"v2":0.5,"v3":0.5,"v4":0.5,"v5":0.5,"v6":0.5,"v7":0.5}"#,
        )
        .unwrap();
        match quantify_opacity(&m, &v) {
            Err(OpacityError::RowStochastic { state, sum }) => {
                assert_eq!(state, "0");
                assert!((sum - 1.5).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn never_revealing_self_loop_is_opaque_without_string_enumeration() {
        let text = "psdes\nstates 0 1\nevents a\nobservable a\nsecret 1\ninit 0 1\n\
                    trans 0 a 0\n";
        let m = Psdes::parse(text).unwrap();
        let rep = quantify_opacity(&m, &Valuation::new()).unwrap();
        assert_eq!(rep.p_reveal, 0.0);
        assert_eq!(rep.p_cso, 1.0);
        assert!(rep.revealing_strings.is_none());
    }

    #[test]
    fn initial_estimate_inside_secret_reveals_immediately() {
        let text = "psdes\nstates s t\nevents a\nobservable a\nsecret s\ninit s 1\ntrans s a t\n";
        let m = Psdes::parse(text).unwrap();
        let rep = quantify_opacity(&m, &Valuation::new()).unwrap();
        assert_eq!(rep.p_reveal, 1.0);
        assert_eq!(rep.revealing_strings.as_deref(), Some(&[String::new()][..]));
    }

    #[test]
    fn unobservable_hop_is_folded_into_the_step() {
        // s0 -u-> s1 (prob 0.5) then observable a into the secret from both
        let text = "psdes\nstates s0 s1 s2\nevents a u\nobservable a\nsecret s2\n\
                    init s0 1\ntrans s0 u s1 : 0.5\ntrans s0 a s2 : 0.5\ntrans s1 a s2\n";
        let m = Psdes::parse(text).unwrap();
        let rep = quantify_opacity(&m, &Valuation::new()).unwrap();
        let oracle = brute_force_opacity(&m, &Valuation::new(), 4).unwrap();
        assert!((rep.p_reveal - 1.0).abs() < 1e-12);
        assert!((rep.p_reveal - oracle.p_reveal).abs() < 1e-9);
    }
}
