//! Co-synthesis of transition-probability parameters and an insertion
//! strategy. The joint requirement (keep the revelation probability at most
//! 1-gamma, keep the probability of reaching the avoid set at most lambda)
//! is encoded as a geometric program over the parameters, the scheduler
//! probabilities, and per-state reachability upper bounds. A returned
//! solution is always re-checked by exact reachability analysis on the
//! induced chains; the encoding is sound but not complete, so solver
//! infeasibility never proves that no solution exists.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::{
    check_feasibility, reciprocal, solve_gp, FeasibilityReport, GpError, GpProblem, GpStatus,
    SolveOptions,
};
use crate::model::{Psdes, StateId};
use crate::opacity::solve_reach;
use crate::pmdp::{InsertionPmdp, InsertionPolicy, PmdpError};
use crate::posy::{EvalError, Monomial, ParamId, Posynomial, Valuation};

pub const DEFAULT_PARAM_FLOOR: f64 = 1e-6;
pub const DEFAULT_SCHEDULER_FLOOR: f64 = 1e-8;
/// Floor for the reachability-bound variables; only a barrier box, never a
/// modeling constraint.
const BOUND_VAR_FLOOR: f64 = 1e-30;
/// Slack allowed when comparing exact probabilities against thresholds.
pub const VERIFY_TOL: f64 = 1e-9;
/// Allowed deviation of a scheduler's per-state probability mass from 1.
pub const SCHEDULER_MASS_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("threshold out of range: {0}")]
    BadThreshold(String),
    #[error(transparent)]
    Pmdp(#[from] PmdpError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("infeasible by construction: {0}")]
    InfeasibleByConstruction(String),
    #[error("scheduler not well-defined: {0}")]
    IllFormedScheduler(String),
    #[error("Assumption 2 violated: {0}")]
    AssumptionViolated(String),
    #[error("solution document: {0}")]
    BadDocument(String),
}

/// Thresholds and variable floors for one synthesis instance.
#[derive(Clone, Copy, Debug)]
pub struct SynthesisSpec {
    /// Lower bound on the opacity probability, in [0, 1].
    pub gamma: f64,
    /// Upper bound on the probability of reaching the avoid set, in [0, 1].
    pub lambda: f64,
    pub param_floor: f64,
    pub scheduler_floor: f64,
}

impl SynthesisSpec {
    pub fn new(gamma: f64, lambda: f64) -> Result<SynthesisSpec, SynthesisError> {
        if !(0.0..=1.0).contains(&gamma) || !gamma.is_finite() {
            return Err(SynthesisError::BadThreshold(format!("gamma = {gamma}")));
        }
        if !(0.0..=1.0).contains(&lambda) || !lambda.is_finite() {
            return Err(SynthesisError::BadThreshold(format!("lambda = {lambda}")));
        }
        Ok(SynthesisSpec {
            gamma,
            lambda,
            param_floor: DEFAULT_PARAM_FLOOR,
            scheduler_floor: DEFAULT_SCHEDULER_FLOOR,
        })
    }
}

/// One insertion option with its probability; `insert` is the list of event
/// names to fabricate before the real event (empty = insert nothing).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub insert: Vec<String>,
    pub prob: f64,
}

/// Probabilistic insertion strategy keyed by insertion-state label.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Scheduler {
    pub choices: BTreeMap<String, Vec<Choice>>,
}

impl Scheduler {
    pub fn mass(&self, state: &str) -> f64 {
        self.choices
            .get(state)
            .map(|cs| cs.iter().map(|c| c.prob).sum())
            .unwrap_or(0.0)
    }

    pub fn is_deterministic(&self) -> bool {
        self.choices.values().all(|cs| cs.len() == 1 && cs[0].prob == 1.0)
    }
}

/// Per insertion state, select the highest-probability action; ties go to
/// the lexicographically smallest inserted string. Idempotent.
pub fn determinize_scheduler(s: &Scheduler) -> Scheduler {
    let mut out = Scheduler::default();
    for (state, cs) in &s.choices {
        let Some(max) = cs.iter().map(|c| c.prob).fold(None, |m: Option<f64>, p| {
            Some(m.map_or(p, |m| m.max(p)))
        }) else {
            continue;
        };
        let pick = cs
            .iter()
            .filter(|c| c.prob == max)
            .map(|c| c.insert.clone())
            .min()
            .expect("nonempty by construction");
        out.choices
            .insert(state.clone(), vec![Choice { insert: pick, prob: 1.0 }]);
    }
    out
}

/// Exact probabilities of the verified solution, recomputed independently
/// of the solver on the induced finite chains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub passed: bool,
    /// Probability that the insertion strategy is ever caught blocked.
    pub reveal_prob: f64,
    pub p_cso: f64,
    /// Probability of the model reaching the avoid set.
    pub reach_avoid: f64,
    pub opacity_ok: bool,
    pub task_ok: bool,
    pub assumptions_ok: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub assumption_notes: Vec<String>,
    /// Solver bound minus exact value, when a bound was available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opacity_gap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_gap: Option<f64>,
    /// Worst linear-system residual of the reachability solves.
    pub residual: f64,
}

impl std::fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "revelation probability: {:.10}", self.reveal_prob)?;
        writeln!(f, "opacity probability:    {:.10}", self.p_cso)?;
        writeln!(f, "avoid-set probability:  {:.10}", self.reach_avoid)?;
        writeln!(
            f,
            "opacity requirement:    {}",
            if self.opacity_ok { "satisfied" } else { "violated" }
        )?;
        writeln!(
            f,
            "task requirement:       {}",
            if self.task_ok { "satisfied" } else { "violated" }
        )?;
        writeln!(
            f,
            "model assumptions:      {}",
            if self.assumptions_ok { "satisfied" } else { "violated" }
        )?;
        for n in &self.assumption_notes {
            writeln!(f, "  note: {n}")?;
        }
        write!(f, "verdict: {}", if self.passed { "pass" } else { "fail" })
    }
}

/// Solver bound values at the roots, used to report bound-versus-exact gaps.
#[derive(Clone, Copy, Debug, Default)]
pub struct RootBounds {
    pub opacity: Option<f64>,
    pub task: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthesisStatus {
    Verified,
    FeasibleUnverified,
    Infeasible,
}

impl std::fmt::Display for SynthesisStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SynthesisStatus::Verified => "verified",
            SynthesisStatus::FeasibleUnverified => "solver-feasible-but-unverified",
            SynthesisStatus::Infeasible => "infeasible",
        })
    }
}

pub struct SynthesisResult {
    pub status: SynthesisStatus,
    pub detail: String,
    pub solver_status: Option<GpStatus>,
    pub objective: Option<f64>,
    pub valuation: Option<Valuation>,
    /// Scheduler after per-state normalization; what gets deployed.
    pub scheduler: Option<Scheduler>,
    /// Raw solver probabilities before normalization.
    pub raw_scheduler: Option<Scheduler>,
    /// Reach-the-blocked-set upper bounds per PMDP state label.
    pub opacity_bounds: BTreeMap<String, f64>,
    /// Reach-the-avoid-set upper bounds per model state label.
    pub task_bounds: BTreeMap<String, f64>,
    pub verification: Option<VerificationReport>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SynthesisOptions {
    pub policy: InsertionPolicy,
    pub solve: SolveOptions,
}

/// The encoded program plus the maps needed to read a solution back.
pub struct Encoding {
    pub problem: GpProblem,
    /// (insertion state, action index) behind each scheduler variable.
    mu_vars: Vec<(usize, usize, ParamId)>,
    /// PMDP states (system states first, then insertion states offset by
    /// the system-state count) that received a reach-blocked bound variable.
    po_vars: BTreeMap<usize, ParamId>,
    pt_vars: BTreeMap<StateId, ParamId>,
}

fn mu_name(z_label: &str, word: &str) -> ParamId {
    ParamId::new(format!("mu[{z_label}][{word}]"))
}

fn po_name(label: &str) -> ParamId {
    ParamId::new(format!("po[{label}]"))
}

fn pt_name(label: &str) -> ParamId {
    ParamId::new(format!("pt[{label}]"))
}

/// Combined-index helpers: system state y is node y, insertion state z is
/// node n_y + z.
fn sink_reachers(pmdp: &InsertionPmdp) -> Vec<bool> {
    let ny = pmdp.n_system_states();
    let n = ny + pmdp.n_insertion_states();
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    for y in 0..ny {
        for (z, _) in pmdp.outgoing(y) {
            preds[ny + z].push(y);
        }
    }
    for z in 0..pmdp.n_insertion_states() {
        for a in &pmdp.insertion_state(z).actions {
            preds[a.successor].push(ny + z);
        }
    }
    let mut reach = vec![false; n];
    let mut stack: Vec<usize> = pmdp.sinks().iter().map(|z| ny + z).collect();
    for &s in &stack {
        reach[s] = true;
    }
    while let Some(s) = stack.pop() {
        for &p in &preds[s] {
            if !reach[p] {
                reach[p] = true;
                stack.push(p);
            }
        }
    }
    reach
}

/// States that can reach the avoid set AND are reachable from the initial
/// distribution. The second clause matters: a bound variable for a state the
/// chain never visits would sit in no constraint anchored at a threshold,
/// leaving the barrier free to push it to infinity.
fn avoid_reachers(m: &Psdes) -> Vec<bool> {
    let mut reach = vec![false; m.n_states()];
    let mut stack: Vec<StateId> = m.avoid().iter().copied().collect();
    for &q in &stack {
        reach[q] = true;
    }
    let mut preds: Vec<Vec<StateId>> = vec![Vec::new(); m.n_states()];
    let mut succs: Vec<Vec<StateId>> = vec![Vec::new(); m.n_states()];
    for t in m.transitions() {
        preds[t.to].push(t.from);
        succs[t.from].push(t.to);
    }
    while let Some(q) = stack.pop() {
        for &p in &preds[q] {
            if !reach[p] {
                reach[p] = true;
                stack.push(p);
            }
        }
    }
    // avoid states absorb the chain, so expansion stops there
    let mut live = vec![false; m.n_states()];
    let mut stack: Vec<StateId> = m.init_support().collect();
    for &q in &stack {
        live[q] = true;
    }
    while let Some(q) = stack.pop() {
        if m.avoid().contains(&q) {
            continue;
        }
        for &s in &succs[q] {
            if !live[s] {
                live[s] = true;
                stack.push(s);
            }
        }
    }
    reach.iter().zip(&live).map(|(r, l)| *r && *l).collect()
}

pub fn encode_program(
    pmdp: &InsertionPmdp,
    m: &Psdes,
    spec: &SynthesisSpec,
) -> Result<Encoding, SynthesisError> {
    SynthesisSpec::new(spec.gamma, spec.lambda)?;
    let ny = pmdp.n_system_states();
    let nz = pmdp.n_insertion_states();
    let reaches_blocked = sink_reachers(pmdp);
    let reaches_avoid = avoid_reachers(m);

    if spec.gamma >= 1.0 && reaches_blocked[pmdp.initial()] {
        return Err(SynthesisError::InfeasibleByConstruction(
            "opacity threshold 1 requires never revealing, but blocking states are reachable"
                .to_string(),
        ));
    }
    let task_active = m.init_support().any(|q| reaches_avoid[q]);
    if spec.lambda <= 0.0 && task_active {
        return Err(SynthesisError::InfeasibleByConstruction(
            "reachability bound 0 requires avoiding the avoid set surely, but it is reachable"
                .to_string(),
        ));
    }

    let mut p = GpProblem::new();
    for v in m.params() {
        p.add_var(v.clone(), spec.param_floor, None)?;
    }

    let mut mu_vars: Vec<(usize, usize, ParamId)> = Vec::new();
    for z in 0..nz {
        let zs = pmdp.insertion_state(z);
        for (i, a) in zs.actions.iter().enumerate() {
            let name = mu_name(pmdp.insertion_label(z), &pmdp.word_label(&a.word));
            p.add_var(name.clone(), spec.scheduler_floor, None)?;
            mu_vars.push((z, i, name));
        }
    }

    let mut po_vars: BTreeMap<usize, ParamId> = BTreeMap::new();
    for y in 0..ny {
        if reaches_blocked[y] {
            let name = po_name(pmdp.system_label(y));
            p.add_var(name.clone(), BOUND_VAR_FLOOR, None)?;
            po_vars.insert(y, name);
        }
    }
    for z in 0..nz {
        if reaches_blocked[ny + z] && !pmdp.is_sink(z) {
            let name = po_name(pmdp.insertion_label(z));
            p.add_var(name.clone(), BOUND_VAR_FLOOR, None)?;
            po_vars.insert(ny + z, name);
        }
    }

    let mut pt_vars: BTreeMap<StateId, ParamId> = BTreeMap::new();
    for q in 0..m.n_states() {
        if reaches_avoid[q] && !m.avoid().contains(&q) {
            let name = pt_name(m.state_label(q));
            p.add_var(name.clone(), BOUND_VAR_FLOOR, None)?;
            pt_vars.insert(q, name);
        }
    }

    let mut objective = Posynomial::zero();
    for v in m.params() {
        objective = objective.add(&reciprocal(v.clone()));
    }
    for (_, _, name) in &mu_vars {
        objective = objective.add(&reciprocal(name.clone()));
    }
    p.set_objective(objective)?;

    if let Some(root) = po_vars.get(&pmdp.initial()) {
        p.add_constraint(
            Posynomial::var(root.clone()).scale(1.0 / (1.0 - spec.gamma)),
            "opacity-threshold",
        )?;
    }

    // task threshold on the initial distribution; a state already in the
    // avoid set contributes its initial mass as a constant
    let mut task_lhs = Posynomial::zero();
    for q in m.init_support() {
        let w = m.init_dist()[q];
        if m.avoid().contains(&q) {
            task_lhs = task_lhs.add(&Posynomial::constant(w));
        } else if let Some(name) = pt_vars.get(&q) {
            task_lhs = task_lhs.add(&Posynomial::var(name.clone()).scale(w));
        }
    }
    if !task_lhs.is_zero() {
        p.add_constraint(task_lhs.scale(1.0 / spec.lambda), "task-threshold")?;
    }

    for z in 0..nz {
        let zs = pmdp.insertion_state(z);
        if zs.actions.is_empty() {
            continue;
        }
        let mut sum = Posynomial::zero();
        for (zz, i, name) in &mu_vars {
            if *zz == z {
                sum = sum.add(&Posynomial::var(name.clone()));
                p.add_constraint(
                    Posynomial::var(name.clone()),
                    format!(
                        "scheduler-cap {} {}",
                        pmdp.insertion_label(z),
                        pmdp.word_label(&zs.actions[*i].word)
                    ),
                )?;
            }
        }
        p.add_constraint(sum, format!("scheduler-sum {}", pmdp.insertion_label(z)))?;
    }

    let mut seen_mass: BTreeSet<String> = BTreeSet::new();
    let mut seen_cap: BTreeSet<String> = BTreeSet::new();
    for y in 0..ny {
        let mass = pmdp.outgoing_mass(y);
        if !mass.is_zero() && mass.as_constant().is_none() && seen_mass.insert(mass.to_string()) {
            p.add_constraint(mass, format!("transition-mass {}", pmdp.system_label(y)))?;
        }
        for (z, t) in pmdp.outgoing(y) {
            if t.as_constant().is_none() && seen_cap.insert(t.to_string()) {
                p.add_constraint(
                    t.clone(),
                    format!(
                        "transition-cap {}->{}",
                        pmdp.system_label(y),
                        pmdp.insertion_label(*z)
                    ),
                )?;
            }
        }
    }

    let mut seen_row: BTreeSet<String> = BTreeSet::new();
    for q in 0..m.n_states() {
        let row = m.row_sum(q);
        if !row.is_zero() && row.as_constant().is_none() && seen_row.insert(row.to_string()) {
            p.add_constraint(row, format!("model-row-sum {}", m.state_label(q)))?;
        }
    }

    // recursive upper bounds on reaching the blocked set
    for (&s, name) in &po_vars {
        let mut lhs = Posynomial::zero();
        if s < ny {
            for (z, t) in pmdp.outgoing(s) {
                let node = ny + z;
                if pmdp.is_sink(*z) {
                    lhs = lhs.add(t);
                } else if let Some(succ) = po_vars.get(&node) {
                    lhs = lhs.add(&t.mul(&Posynomial::var(succ.clone())));
                }
            }
        } else {
            let z = s - ny;
            let zs = pmdp.insertion_state(z);
            for (zz, i, mu) in &mu_vars {
                if *zz != z {
                    continue;
                }
                let succ = zs.actions[*i].successor;
                if let Some(sv) = po_vars.get(&succ) {
                    lhs = lhs.add(
                        &Posynomial::var(mu.clone()).mul(&Posynomial::var(sv.clone())),
                    );
                }
            }
        }
        let label = if s < ny {
            format!("reach-blocked {}", pmdp.system_label(s))
        } else {
            format!("reach-blocked {}", pmdp.insertion_label(s - ny))
        };
        p.add_constraint(lhs.div_monomial(&Monomial::new(1.0, [(name.clone(), 1.0)])), label)?;
    }

    // recursive upper bounds on reaching the avoid set
    for (&q, name) in &pt_vars {
        let mut lhs = Posynomial::zero();
        for t in m.transitions().iter().filter(|t| t.from == q) {
            if m.avoid().contains(&t.to) {
                lhs = lhs.add(&t.prob);
            } else if let Some(succ) = pt_vars.get(&t.to) {
                lhs = lhs.add(&t.prob.mul(&Posynomial::var(succ.clone())));
            }
        }
        p.add_constraint(
            lhs.div_monomial(&Monomial::new(1.0, [(name.clone(), 1.0)])),
            format!("reach-avoid {}", m.state_label(q)),
        )?;
    }

    Ok(Encoding { problem: p, mu_vars, po_vars, pt_vars })
}

/// Normalized per-action probabilities for every insertion state: `None`
/// for blocked states, otherwise probabilities aligned with the action list.
pub(crate) fn resolve_scheduler(
    pmdp: &InsertionPmdp,
    s: &Scheduler,
) -> Result<Vec<Option<Vec<f64>>>, SynthesisError> {
    let ill = |msg: String| SynthesisError::IllFormedScheduler(msg);
    let mut known: BTreeSet<&str> = BTreeSet::new();
    let mut out: Vec<Option<Vec<f64>>> = Vec::with_capacity(pmdp.n_insertion_states());
    for z in 0..pmdp.n_insertion_states() {
        let label = pmdp.insertion_label(z);
        known.insert(label);
        let zs = pmdp.insertion_state(z);
        if zs.actions.is_empty() {
            if s.choices.contains_key(label) {
                return Err(ill(format!("state {label} admits no insertion")));
            }
            out.push(None);
            continue;
        }
        let Some(choices) = s.choices.get(label) else {
            return Err(ill(format!("no choice given at state {label}")));
        };
        let mut index: BTreeMap<Vec<&str>, usize> = BTreeMap::new();
        for (i, a) in zs.actions.iter().enumerate() {
            index.insert(a.word.iter().map(|e| pmdp.event_name(*e)).collect(), i);
        }
        let mut probs = vec![0.0; zs.actions.len()];
        let mut seen = vec![false; zs.actions.len()];
        let mut mass = 0.0;
        for c in choices {
            let word: Vec<&str> = c.insert.iter().map(|w| w.as_str()).collect();
            let Some(&i) = index.get(&word) else {
                return Err(ill(format!(
                    "state {label} has no insertion \"{}\"",
                    c.insert.join("")
                )));
            };
            if seen[i] {
                return Err(ill(format!(
                    "duplicate insertion \"{}\" at state {label}",
                    c.insert.join("")
                )));
            }
            seen[i] = true;
            if !c.prob.is_finite() || c.prob < 0.0 {
                return Err(ill(format!("probability {} at state {label}", c.prob)));
            }
            probs[i] = c.prob;
            mass += c.prob;
        }
        if (mass - 1.0).abs() > SCHEDULER_MASS_TOL {
            return Err(ill(format!("probability mass {mass} at state {label}")));
        }
        for p in &mut probs {
            *p /= mass;
        }
        out.push(Some(probs));
    }
    for label in s.choices.keys() {
        if !known.contains(label.as_str()) {
            return Err(ill(format!("unknown insertion state {label}")));
        }
    }
    Ok(out)
}

/// Exact reach probabilities to `targets` in a finite sub-stochastic chain
/// given as sparse rows. Returns per-state probabilities and the solve
/// residual.
fn reach_in_chain(rows: &[Vec<(usize, f64)>], targets: &BTreeSet<usize>) -> (Vec<f64>, f64) {
    use nalgebra::{DMatrix, DVector};
    let n = rows.len();
    let free: Vec<usize> = (0..n).filter(|s| !targets.contains(s)).collect();
    let pos: BTreeMap<usize, usize> = free.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let k = free.len();
    let mut p = DMatrix::<f64>::zeros(k, k);
    let mut r = DVector::<f64>::zeros(k);
    for (i, &s) in free.iter().enumerate() {
        for &(t, w) in &rows[s] {
            if targets.contains(&t) {
                r[i] += w;
            } else {
                p[(i, pos[&t])] += w;
            }
        }
    }
    let (x, residual) = solve_reach(&p, &r);
    let mut full = vec![0.0; n];
    for &t in targets {
        full[t] = 1.0;
    }
    for (i, &s) in free.iter().enumerate() {
        full[s] = x[i].clamp(0.0, 1.0);
    }
    (full, residual)
}

pub fn verify_solution(
    m: &Psdes,
    pmdp: &InsertionPmdp,
    valuation: &Valuation,
    scheduler: &Scheduler,
    spec: &SynthesisSpec,
    bounds: &RootBounds,
) -> Result<VerificationReport, SynthesisError> {
    for v in m.params() {
        match valuation.get(v) {
            None => {
                return Err(SynthesisError::AssumptionViolated(format!(
                    "parameter {v} has no value"
                )))
            }
            Some(x) if x < spec.param_floor * (1.0 - 1e-12) => {
                return Err(SynthesisError::AssumptionViolated(format!(
                    "parameter {v} = {x} is below the floor {}",
                    spec.param_floor
                )))
            }
            _ => {}
        }
    }
    let resolved = resolve_scheduler(pmdp, scheduler)?;

    // induced chain over system states followed by insertion states
    let ny = pmdp.n_system_states();
    let n = ny + pmdp.n_insertion_states();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for y in 0..ny {
        for (z, t) in pmdp.outgoing(y) {
            rows[y].push((ny + z, t.eval(valuation)?));
        }
    }
    for (z, probs) in resolved.iter().enumerate() {
        let Some(probs) = probs else { continue };
        let zs = pmdp.insertion_state(z);
        for (a, &p) in zs.actions.iter().zip(probs) {
            if p > 0.0 {
                rows[ny + z].push((a.successor, p));
            }
        }
    }
    let targets: BTreeSet<usize> = pmdp.sinks().iter().map(|z| ny + z).collect();
    let (reach_blocked, res1) = reach_in_chain(&rows, &targets);
    let reveal_prob = reach_blocked[pmdp.initial()];

    // avoid-set reachability on the evaluated model chain
    let mut model_rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m.n_states()];
    for t in m.transitions() {
        model_rows[t.from].push((t.to, t.prob.eval(valuation)?));
    }
    let avoid: BTreeSet<usize> = m.avoid().iter().copied().collect();
    let (reach_d, res2) = if avoid.is_empty() {
        (vec![0.0; m.n_states()], 0.0)
    } else {
        reach_in_chain(&model_rows, &avoid)
    };
    let reach_avoid: f64 = m.init_support().map(|q| m.init_dist()[q] * reach_d[q]).sum();

    let mut notes = Vec::new();
    for q in 0..m.n_states() {
        let sum = m.row_sum(q).eval(valuation)?;
        if sum.abs() > 1e-6 && (sum - 1.0).abs() > 1e-6 {
            notes.push(format!(
                "state {} has outgoing probability mass {sum}",
                m.state_label(q)
            ));
        }
        let uo = m.uo_row_sum(q).eval(valuation)?;
        if uo >= 1.0 - 1e-9 {
            notes.push(format!(
                "state {} has unobservable probability mass {uo}",
                m.state_label(q)
            ));
        }
    }
    let assumptions_ok = notes.is_empty();
    let p_cso = 1.0 - reveal_prob;
    let opacity_ok = p_cso >= spec.gamma - VERIFY_TOL;
    let task_ok = reach_avoid <= spec.lambda + VERIFY_TOL;
    Ok(VerificationReport {
        passed: opacity_ok && task_ok && assumptions_ok,
        reveal_prob,
        p_cso,
        reach_avoid,
        opacity_ok,
        task_ok,
        assumptions_ok,
        assumption_notes: notes,
        opacity_gap: bounds.opacity.map(|b| b - reveal_prob),
        task_gap: bounds.task.map(|b| b - reach_avoid),
        residual: res1.max(res2),
    })
}

pub fn synthesize(
    m: &Psdes,
    spec: &SynthesisSpec,
    opts: &SynthesisOptions,
) -> Result<SynthesisResult, SynthesisError> {
    let pmdp = InsertionPmdp::from_model(m, opts.policy)?;
    let enc = match encode_program(&pmdp, m, spec) {
        Ok(enc) => enc,
        Err(SynthesisError::InfeasibleByConstruction(detail)) => {
            return Ok(SynthesisResult {
                status: SynthesisStatus::Infeasible,
                detail: format!("infeasible by construction: {detail}"),
                solver_status: None,
                objective: None,
                valuation: None,
                scheduler: None,
                raw_scheduler: None,
                opacity_bounds: BTreeMap::new(),
                task_bounds: BTreeMap::new(),
                verification: None,
            })
        }
        Err(e) => return Err(e),
    };

    let sol = solve_gp(&enc.problem, &opts.solve);
    let feasible = match sol.status {
        GpStatus::Optimal | GpStatus::Feasible => true,
        GpStatus::MaxIterations => sol
            .residuals
            .iter()
            .all(|r| *r <= opts.solve.feas_tol),
        GpStatus::Infeasible => false,
    };
    if !feasible {
        return Ok(SynthesisResult {
            status: SynthesisStatus::Infeasible,
            detail: format!("solver status: {}", sol.status),
            solver_status: Some(sol.status),
            objective: None,
            valuation: None,
            scheduler: None,
            raw_scheduler: None,
            opacity_bounds: BTreeMap::new(),
            task_bounds: BTreeMap::new(),
            verification: None,
        });
    }

    let mut valuation = Valuation::new();
    for v in m.params() {
        let x = sol.values.get(v).expect("solver returns every variable");
        valuation.set(v.clone(), x).expect("solver values are positive");
    }

    let mut raw = Scheduler::default();
    for (z, i, name) in &enc.mu_vars {
        let zs = pmdp.insertion_state(*z);
        let word: Vec<String> = zs.actions[*i]
            .word
            .iter()
            .map(|e| pmdp.event_name(*e).to_string())
            .collect();
        let prob = sol.values.get(name).expect("solver returns every variable");
        raw.choices
            .entry(pmdp.insertion_label(*z).to_string())
            .or_default()
            .push(Choice { insert: word, prob });
    }
    let mut scheduler = raw.clone();
    for cs in scheduler.choices.values_mut() {
        let mass: f64 = cs.iter().map(|c| c.prob).sum();
        for c in cs {
            c.prob /= mass;
        }
    }

    let mut opacity_bounds = BTreeMap::new();
    for name in enc.po_vars.values() {
        let label = name.as_str();
        let label = &label[3..label.len() - 1];
        opacity_bounds.insert(label.to_string(), sol.values.get(name).unwrap());
    }
    let mut task_bounds = BTreeMap::new();
    for name in enc.pt_vars.values() {
        let label = name.as_str();
        let label = &label[3..label.len() - 1];
        task_bounds.insert(label.to_string(), sol.values.get(name).unwrap());
    }

    let bounds = RootBounds {
        opacity: enc
            .po_vars
            .get(&pmdp.initial())
            .map(|name| sol.values.get(name).unwrap()),
        task: {
            let mut acc = 0.0;
            let mut any = false;
            for q in m.init_support() {
                if m.avoid().contains(&q) {
                    acc += m.init_dist()[q];
                    any = true;
                } else if let Some(name) = enc.pt_vars.get(&q) {
                    acc += m.init_dist()[q] * sol.values.get(name).unwrap();
                    any = true;
                }
            }
            any.then_some(acc)
        },
    };

    let report = verify_solution(m, &pmdp, &valuation, &scheduler, spec, &bounds)?;
    let status = if report.passed {
        SynthesisStatus::Verified
    } else {
        SynthesisStatus::FeasibleUnverified
    };
    Ok(SynthesisResult {
        status,
        detail: format!("solver status: {}", sol.status),
        solver_status: Some(sol.status),
        objective: Some(sol.objective_value),
        valuation: Some(valuation),
        scheduler: Some(scheduler),
        raw_scheduler: Some(raw),
        opacity_bounds,
        task_bounds,
        verification: Some(report),
    })
}

/// Evaluate every encoded constraint at a finished result; all residuals at
/// most the tolerance means the solution sits inside the program.
pub fn recheck_encoding(
    enc: &Encoding,
    result: &SynthesisResult,
) -> Result<FeasibilityReport, SynthesisError> {
    let mut cand = Valuation::new();
    if let Some(v) = &result.valuation {
        for (p, x) in v.iter() {
            cand.set(p.clone(), x).map_err(|e| {
                SynthesisError::AssumptionViolated(format!("parameter {p}: {e}"))
            })?;
        }
    }
    let raw = result
        .raw_scheduler
        .as_ref()
        .ok_or_else(|| SynthesisError::BadDocument("result has no scheduler".into()))?;
    for (z, i, name) in &enc.mu_vars {
        let _ = (z, i);
        let label = name.as_str();
        // mu[<state>][<word>]
        let inner = &label[3..label.len() - 1];
        let mid = inner.find("][").expect("well-formed variable name");
        let state = &inner[..mid];
        let word = &inner[mid + 2..];
        let cs = raw
            .choices
            .get(state)
            .ok_or_else(|| SynthesisError::BadDocument(format!("state {state} missing")))?;
        let c = cs
            .iter()
            .find(|c| {
                let w: String = c.insert.join("");
                (c.insert.is_empty() && word == "ε") || w == word
            })
            .ok_or_else(|| SynthesisError::BadDocument(format!("choice {word} missing")))?;
        cand.set(name.clone(), c.prob)
            .map_err(|e| SynthesisError::BadDocument(format!("{name}: {e}")))?;
    }
    for (s, name) in &enc.po_vars {
        let _ = s;
        let label = name.as_str();
        let key = &label[3..label.len() - 1];
        let x = result.opacity_bounds.get(key).copied().ok_or_else(|| {
            SynthesisError::BadDocument(format!("missing opacity bound for {key}"))
        })?;
        cand.set(name.clone(), x)
            .map_err(|e| SynthesisError::BadDocument(format!("{name}: {e}")))?;
    }
    for (q, name) in &enc.pt_vars {
        let _ = q;
        let label = name.as_str();
        let key = &label[3..label.len() - 1];
        let x = result.task_bounds.get(key).copied().ok_or_else(|| {
            SynthesisError::BadDocument(format!("missing task bound for {key}"))
        })?;
        cand.set(name.clone(), x)
            .map_err(|e| SynthesisError::BadDocument(format!("{name}: {e}")))?;
    }
    Ok(check_feasibility(&enc.problem, &cand)?)
}

fn default_policy_name() -> String {
    InsertionPolicy::default().name().to_string()
}

/// Self-contained, reloadable record of one synthesis or verification run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionDoc {
    #[serde(default)]
    pub tool_version: String,
    #[serde(default)]
    pub model_digest: String,
    pub gamma: f64,
    pub lambda: f64,
    #[serde(default = "default_policy_name")]
    pub policy: String,
    #[serde(default)]
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valuation: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheduler: Option<Scheduler>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub opacity_bounds: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub task_bounds: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification: Option<VerificationReport>,
}

impl SolutionDoc {
    pub fn from_result(
        m: &Psdes,
        spec: &SynthesisSpec,
        policy: InsertionPolicy,
        r: &SynthesisResult,
    ) -> SolutionDoc {
        SolutionDoc {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            model_digest: m.digest(),
            gamma: spec.gamma,
            lambda: spec.lambda,
            policy: policy.name().to_string(),
            status: r.status.to_string(),
            objective: r.objective,
            valuation: r
                .valuation
                .as_ref()
                .map(|v| v.iter().map(|(p, x)| (p.to_string(), x)).collect()),
            scheduler: r.scheduler.clone(),
            opacity_bounds: r.opacity_bounds.clone(),
            task_bounds: r.task_bounds.clone(),
            verification: r.verification.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain data serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<SolutionDoc, SynthesisError> {
        serde_json::from_str(text).map_err(|e| SynthesisError::BadDocument(e.to_string()))
    }

    pub fn policy(&self) -> Result<InsertionPolicy, SynthesisError> {
        InsertionPolicy::from_name(&self.policy)
            .ok_or_else(|| SynthesisError::BadDocument(format!("unknown policy {}", self.policy)))
    }

    pub fn valuation(&self) -> Result<Valuation, SynthesisError> {
        let map = self
            .valuation
            .as_ref()
            .ok_or_else(|| SynthesisError::BadDocument("document has no valuation".into()))?;
        let mut v = Valuation::new();
        for (name, x) in map {
            v.set(ParamId::new(name.clone()), *x)
                .map_err(|e| SynthesisError::BadDocument(format!("parameter {name}: {e}")))?;
        }
        Ok(v)
    }

    pub fn root_bounds(&self, m: &Psdes, pmdp: &InsertionPmdp) -> RootBounds {
        let opacity = self
            .opacity_bounds
            .get(pmdp.system_label(pmdp.initial()))
            .copied();
        let mut acc = 0.0;
        let mut any = false;
        for q in m.init_support() {
            if m.avoid().contains(&q) {
                acc += m.init_dist()[q];
                any = true;
            } else if let Some(b) = self.task_bounds.get(m.state_label(q)) {
                acc += m.init_dist()[q] * b;
                any = true;
            }
        }
        RootBounds { opacity, task: any.then_some(acc) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posy::valuation_from_json;

    const NETWORK: &str = include_str!("../fixtures/network.psdes");
    const REFERENCE_VALUATION: &str = include_str!("../fixtures/network_valuation.json");
    const REFERENCE_SCHEDULER: &str = include_str!("../fixtures/network_scheduler.json");

    fn setup() -> (Psdes, InsertionPmdp, SynthesisSpec) {
        let m = Psdes::parse(NETWORK).unwrap();
        let pmdp = InsertionPmdp::from_model(&m, InsertionPolicy::Parsimonious).unwrap();
        let spec = SynthesisSpec::new(0.15, 0.3).unwrap();
        (m, pmdp, spec)
    }

    fn reference() -> (Valuation, Scheduler) {
        (
            valuation_from_json(REFERENCE_VALUATION).unwrap(),
            serde_json::from_str(REFERENCE_SCHEDULER).unwrap(),
        )
    }

    #[test]
    fn encoding_has_expected_shape() {
        let (m, pmdp, spec) = setup();
        let enc = encode_program(&pmdp, &m, &spec).unwrap();
        let p = &enc.problem;
        // 7 parameters, 28 scheduler probabilities, 19 reach-blocked bounds
        // (12 system + 7 insertion states), 2 reach-avoid bounds
        assert_eq!(p.variables().len(), 7 + 28 + 19 + 2);
        let count = |prefix: &str| {
            p.constraints()
                .iter()
                .filter(|c| c.label.starts_with(prefix))
                .count()
        };
        assert_eq!(count("opacity-threshold"), 1);
        assert_eq!(count("task-threshold"), 1);
        assert_eq!(count("scheduler-sum"), 16);
        assert_eq!(count("scheduler-cap"), 28);
        assert_eq!(count("transition-mass"), 3);
        assert_eq!(count("transition-cap"), 7);
        assert_eq!(count("model-row-sum"), 3);
        assert_eq!(count("reach-blocked"), 19);
        assert_eq!(count("reach-avoid"), 2);
    }

    #[test]
    fn reference_solution_verifies() {
        let (m, pmdp, spec) = setup();
        let (v, s) = reference();
        let report = verify_solution(&m, &pmdp, &v, &s, &spec, &RootBounds::default()).unwrap();
        assert!(report.passed, "{report}");
        assert!((report.reveal_prob - 0.1499).abs() < 1e-3, "{}", report.reveal_prob);
        assert!((report.reach_avoid - 0.17505).abs() < 1e-6, "{}", report.reach_avoid);
        assert!(report.residual < 1e-10);
    }

    #[test]
    fn underweight_scheduler_is_rejected() {
        let (m, pmdp, spec) = setup();
        let (v, mut s) = reference();
        for c in s.choices.get_mut("((0,0),a)").unwrap() {
            c.prob *= 0.9;
        }
        let err = verify_solution(&m, &pmdp, &v, &s, &spec, &RootBounds::default()).unwrap_err();
        assert!(err.to_string().contains("scheduler not well-defined"), "{err}");
    }

    #[test]
    fn scheduler_for_blocked_state_is_rejected() {
        let (m, pmdp, spec) = setup();
        let (v, mut s) = reference();
        s.choices.insert(
            "((2,1),b)".to_string(),
            vec![Choice { insert: vec![], prob: 1.0 }],
        );
        let err = verify_solution(&m, &pmdp, &v, &s, &spec, &RootBounds::default()).unwrap_err();
        assert!(err.to_string().contains("scheduler not well-defined"), "{err}");
    }

    #[test]
    fn parameter_below_floor_is_rejected() {
        let (m, pmdp, mut spec) = setup();
        let (mut v, s) = reference();
        spec.param_floor = 1e-6;
        v.set(ParamId::new("v3"), 1e-9).unwrap();
        let err = verify_solution(&m, &pmdp, &v, &s, &spec, &RootBounds::default()).unwrap_err();
        assert!(err.to_string().contains("Assumption 2 violated"), "{err}");
    }

    #[test]
    fn determinization_picks_lexicographic_smallest_on_ties() {
        let (m, pmdp, spec) = setup();
        let (v, s) = reference();
        let d = determinize_scheduler(&s);
        assert!(d.is_deterministic());
        // the two 0.5-mass choices at the root's b-state tie; "a" wins
        assert_eq!(d.choices["((0,0),b)"][0].insert, vec!["a".to_string()]);
        assert_eq!(d.choices["((0,0),a)"][0].insert, Vec::<String>::new());
        let report = verify_solution(&m, &pmdp, &v, &d, &spec, &RootBounds::default()).unwrap();
        assert!(report.passed);
        assert!((report.reveal_prob - 0.1499).abs() < 1e-9, "{}", report.reveal_prob);
        // determinizing twice changes nothing
        assert_eq!(determinize_scheduler(&d), d);
    }

    #[test]
    fn synthesis_on_the_network_verifies() {
        let (m, _, spec) = setup();
        let opts = SynthesisOptions::default();
        let r = synthesize(&m, &spec, &opts).unwrap();
        assert_eq!(r.status, SynthesisStatus::Verified, "{}", r.detail);
        let v = r.valuation.as_ref().unwrap();
        let sum = |names: &[&str]| -> f64 {
            names.iter().map(|n| v.get(&ParamId::new(*n)).unwrap()).sum()
        };
        assert!((sum(&["v1", "v2", "v3"]) - 1.0).abs() < 1e-6);
        assert!((sum(&["v4", "v5"]) - 1.0).abs() < 1e-6);
        assert!((sum(&["v6", "v7"]) - 1.0).abs() < 1e-6);
        let report = r.verification.as_ref().unwrap();
        assert!(report.opacity_gap.unwrap() >= -1e-9);
        assert!(report.task_gap.unwrap() >= -1e-9);

        // the solution solves the encoded program it came from
        let pmdp = InsertionPmdp::from_model(&m, opts.policy).unwrap();
        let enc = encode_program(&pmdp, &m, &spec).unwrap();
        let feas = recheck_encoding(&enc, &r).unwrap();
        assert!(feas.feasible(1e-6), "worst: {:?}", feas.worst());
    }

    #[test]
    fn impossible_thresholds_fail_fast() {
        let (m, _, _) = setup();
        let opts = SynthesisOptions::default();
        let spec = SynthesisSpec::new(1.0, 0.3).unwrap();
        let r = synthesize(&m, &spec, &opts).unwrap();
        assert_eq!(r.status, SynthesisStatus::Infeasible);
        assert!(r.detail.contains("infeasible by construction"), "{}", r.detail);

        let spec = SynthesisSpec::new(0.15, 0.0).unwrap();
        let r = synthesize(&m, &spec, &opts).unwrap();
        assert_eq!(r.status, SynthesisStatus::Infeasible);
        assert!(r.detail.contains("infeasible by construction"), "{}", r.detail);
    }

    #[test]
    fn vacuous_opacity_threshold_synthesizes() {
        let (m, _, _) = setup();
        let spec = SynthesisSpec::new(0.0, 0.3).unwrap();
        let r = synthesize(&m, &spec, &SynthesisOptions::default()).unwrap();
        assert_eq!(r.status, SynthesisStatus::Verified, "{}", r.detail);
    }

    #[test]
    fn single_state_model_synthesizes_trivially() {
        let m = Psdes::parse("psdes\nstates s\nevents a\nobservable a\ninit s 1\n").unwrap();
        let spec = SynthesisSpec::new(0.9, 0.1).unwrap();
        let r = synthesize(&m, &spec, &SynthesisOptions::default()).unwrap();
        assert_eq!(r.status, SynthesisStatus::Verified, "{}", r.detail);
        let report = r.verification.unwrap();
        assert_eq!(report.reveal_prob, 0.0);
        assert_eq!(report.reach_avoid, 0.0);
    }

    #[test]
    fn solution_document_round_trips() {
        let (m, _, spec) = setup();
        let opts = SynthesisOptions::default();
        let r = synthesize(&m, &spec, &opts).unwrap();
        let doc = SolutionDoc::from_result(&m, &spec, opts.policy, &r);
        let text = doc.to_json();
        let back = SolutionDoc::from_json(&text).unwrap();
        assert_eq!(doc, back);
        assert_eq!(back.model_digest, m.digest());
        assert_eq!(back.policy().unwrap(), InsertionPolicy::Parsimonious);
        // the reloaded document re-verifies identically
        let pmdp = InsertionPmdp::from_model(&m, back.policy().unwrap()).unwrap();
        let spec2 = SynthesisSpec::new(back.gamma, back.lambda).unwrap();
        let report = verify_solution(
            &m,
            &pmdp,
            &back.valuation().unwrap(),
            back.scheduler.as_ref().unwrap(),
            &spec2,
            &back.root_bounds(&m, &pmdp),
        )
        .unwrap();
        assert_eq!(Some(report), r.verification);
    }
}
