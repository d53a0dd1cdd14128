//! Monte Carlo cross-validation: sample runs of the evaluated system, apply
//! an insertion strategy, and estimate how often the strategy is caught
//! blocked and how often the run visits the avoid set. Every run draws from
//! its own counter-indexed stream, so results are independent of thread
//! scheduling and runs can be split across calls without overlap.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::model::{Psdes, StateId};
use crate::observer::Observer;
use crate::pmdp::{InsertionPmdp, PmdpError};
use crate::posy::{EvalError, Valuation};
use crate::synthesis::{resolve_scheduler, Scheduler, SynthesisError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("bad simulation config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Pmdp(#[from] PmdpError),
    #[error(transparent)]
    Scheduler(#[from] SynthesisError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Clone, Copy, Debug)]
pub struct SimConfig {
    pub runs: u64,
    pub seed: u64,
    /// Model steps (observable or not) before a run counts as truncated.
    pub max_steps: usize,
    /// Index of the first run's random stream; lets two calls partition a
    /// run range without overlapping draws.
    pub run_offset: u64,
}

impl SimConfig {
    pub fn new(runs: u64, seed: u64, max_steps: usize) -> SimConfig {
        SimConfig { runs, seed, max_steps, run_offset: 0 }
    }
}

/// Ten times the longest observable string accepted by the observer; a
/// generous cap since unobservable events also consume steps.
pub fn default_max_steps(obs: &Observer) -> usize {
    let n = obs.n_nodes();
    let mut longest: Vec<Option<usize>> = vec![None; n];
    fn go(obs: &Observer, node: usize, memo: &mut Vec<Option<usize>>) -> usize {
        if let Some(d) = memo[node] {
            return d;
        }
        let best = obs
            .out_edges(node)
            .map(|(_, next)| 1 + go(obs, next, memo))
            .max()
            .unwrap_or(0);
        memo[node] = Some(best);
        best
    }
    (10 * go(obs, obs.initial(), &mut longest)).max(10)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimReport {
    pub runs: u64,
    pub completed: u64,
    pub truncated: u64,
    /// Fraction of completed runs on which the strategy was caught blocked.
    pub reveal_freq: f64,
    pub reveal_se: f64,
    /// Fraction of completed runs that visited the avoid set.
    pub reach_avoid_freq: f64,
    pub reach_avoid_se: f64,
}

impl std::fmt::Display for SimReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "runs:       {} ({} truncated)", self.runs, self.truncated)?;
        writeln!(
            f,
            "revelation: {:.6} (standard error {:.6})",
            self.reveal_freq, self.reveal_se
        )?;
        write!(
            f,
            "avoid set:  {:.6} (standard error {:.6})",
            self.reach_avoid_freq, self.reach_avoid_se
        )
    }
}

struct RunTotals {
    completed: u64,
    truncated: u64,
    revealed: u64,
    avoided: u64,
}

pub fn simulate(
    m: &Psdes,
    valuation: &Valuation,
    scheduler: &Scheduler,
    cfg: &SimConfig,
) -> Result<SimReport, SimError> {
    let pmdp = InsertionPmdp::from_model(m, Default::default())?;
    simulate_with(m, &pmdp, valuation, scheduler, cfg)
}

/// Like [`simulate`], against an already-built unfolding (the scheduler must
/// match its insertion policy).
pub fn simulate_with(
    m: &Psdes,
    pmdp: &InsertionPmdp,
    valuation: &Valuation,
    scheduler: &Scheduler,
    cfg: &SimConfig,
) -> Result<SimReport, SimError> {
    if cfg.runs == 0 {
        return Err(SimError::BadConfig("runs must be at least 1".into()));
    }
    if cfg.max_steps == 0 {
        return Err(SimError::BadConfig("max_steps must be at least 1".into()));
    }
    let mu = resolve_scheduler(pmdp, scheduler)?;

    // evaluated outgoing rows, one per model state
    let mut rows: Vec<Vec<(usize, StateId, f64)>> = vec![Vec::new(); m.n_states()];
    for t in m.transitions() {
        let p = t.prob.eval(valuation)?;
        if p > 0.0 {
            rows[t.from].push((t.event, t.to, p));
        }
    }
    let row_mass: Vec<f64> = rows
        .iter()
        .map(|row| row.iter().map(|(_, _, p)| p).sum())
        .collect();

    // insertion-state lookup per (system state, event)
    let step_z: Vec<Vec<Option<usize>>> = (0..pmdp.n_system_states())
        .map(|y| {
            let mut by_event = vec![None; m.n_events()];
            for (z, _) in pmdp.outgoing(y) {
                by_event[pmdp.insertion_state(*z).pending] = Some(*z);
            }
            by_event
        })
        .collect();

    let init: Vec<(StateId, f64)> = m
        .init_support()
        .map(|q| (q, m.init_dist()[q]))
        .collect();
    let unit = Uniform::new(0.0f64, 1.0);

    let totals = (0..cfg.runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(cfg.run_offset + run + 1);
            let pick = |rng: &mut ChaCha8Rng, mass: f64| unit.sample(rng) * mass;

            let mut u = pick(&mut rng, init.iter().map(|(_, w)| w).sum());
            let mut q = init.last().expect("nonempty initial support").0;
            for &(s, w) in &init {
                if u < w {
                    q = s;
                    break;
                }
                u -= w;
            }

            let mut tracked = Some(pmdp.initial());
            let mut revealed = false;
            let mut avoided = m.avoid().contains(&q);
            let mut steps = 0usize;
            loop {
                if row_mass[q] <= 0.0 {
                    break;
                }
                if steps == cfg.max_steps {
                    return RunTotals { completed: 0, truncated: 1, revealed: 0, avoided: 0 };
                }
                steps += 1;
                let mut u = pick(&mut rng, row_mass[q]);
                let mut chosen = rows[q].last().expect("positive mass row");
                for t in &rows[q] {
                    if u < t.2 {
                        chosen = t;
                        break;
                    }
                    u -= t.2;
                }
                let (event, to, _) = *chosen;
                q = to;
                if m.avoid().contains(&q) {
                    avoided = true;
                }
                if m.is_observable(event) {
                    if let Some(y) = tracked {
                        let z = step_z[y][event].expect("model move stays inside the unfolding");
                        match &mu[z] {
                            None => {
                                revealed = true;
                                tracked = None;
                            }
                            Some(probs) => {
                                let mut u = pick(&mut rng, 1.0);
                                let zs = pmdp.insertion_state(z);
                                let mut next = zs.actions.last().expect("resolved state").successor;
                                for (a, &p) in zs.actions.iter().zip(probs) {
                                    if u < p {
                                        next = a.successor;
                                        break;
                                    }
                                    u -= p;
                                }
                                tracked = Some(next);
                            }
                        }
                    }
                }
            }
            RunTotals {
                completed: 1,
                truncated: 0,
                revealed: revealed as u64,
                avoided: avoided as u64,
            }
        })
        .reduce(
            || RunTotals { completed: 0, truncated: 0, revealed: 0, avoided: 0 },
            |a, b| RunTotals {
                completed: a.completed + b.completed,
                truncated: a.truncated + b.truncated,
                revealed: a.revealed + b.revealed,
                avoided: a.avoided + b.avoided,
            },
        );

    let n = totals.completed;
    let freq = |k: u64| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    let se = |p: f64| if n == 0 { 0.0 } else { (p * (1.0 - p) / n as f64).sqrt() };
    let reveal_freq = freq(totals.revealed);
    let reach_avoid_freq = freq(totals.avoided);
    Ok(SimReport {
        runs: cfg.runs,
        completed: n,
        truncated: totals.truncated,
        reveal_freq,
        reveal_se: se(reveal_freq),
        reach_avoid_freq,
        reach_avoid_se: se(reach_avoid_freq),
    })
}
