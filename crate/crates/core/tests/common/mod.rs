//! Seeded random fixtures shared by the integration suites. All sketches are
//! acyclic (edges only go forward), so every run terminates, the unobservable
//! part is nilpotent, and the observable language is finite.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use opacsyn::model::{EventId, PsdesBuilder, StateId};
use opacsyn::posy::Posynomial;
use opacsyn::{Psdes, Valuation};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const OBS_NAMES: [&str; 3] = ["a", "b", "c"];
const UO_NAMES: [&str; 2] = ["u", "w"];

/// Random acyclic system drawn from a seed.
pub struct Sketch {
    pub n_states: usize,
    pub n_obs: usize,
    pub n_uo: usize,
    /// from, event, to, probability; probabilities are exactly row-stochastic
    pub edges: Vec<(usize, usize, usize, f64)>,
    pub init: Vec<(usize, f64)>,
    pub secret: BTreeSet<usize>,
    /// a non-secret state available for monotonicity experiments
    pub extra_secret: Option<usize>,
    pub avoid: BTreeSet<usize>,
}

pub fn sketch(seed: u64) -> Sketch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=6);
    let n_obs = rng.gen_range(1..=3);
    let n_uo = rng.gen_range(0..=2);
    let mut weights: BTreeMap<(usize, usize, usize), u32> = BTreeMap::new();
    for from in 0..n - 1 {
        if from > 0 && rng.gen_bool(0.2) {
            continue;
        }
        for _ in 0..rng.gen_range(1..=3) {
            let event = rng.gen_range(0..n_obs + n_uo);
            let to = rng.gen_range(from + 1..n);
            *weights.entry((from, event, to)).or_insert(0) += rng.gen_range(1..=9);
        }
    }
    let mut totals = vec![0u32; n];
    for ((from, _, _), w) in &weights {
        totals[*from] += w;
    }
    let edges = weights
        .iter()
        .map(|((f, e, t), w)| (*f, *e, *t, f64::from(*w) / f64::from(totals[*f])))
        .collect();
    let init = if n > 2 && rng.gen_bool(0.3) {
        let p = f64::from(rng.gen_range(1..=9)) / 10.0;
        vec![(0, p), (1, 1.0 - p)]
    } else {
        vec![(0, 1.0)]
    };
    let mut secret = BTreeSet::new();
    for q in 1..n {
        if rng.gen_bool(0.3) {
            secret.insert(q);
        }
    }
    let extra_secret = (1..n).find(|q| !secret.contains(q));
    let avoid = if rng.gen_bool(0.4) { BTreeSet::from([n - 1]) } else { BTreeSet::new() };
    Sketch { n_states: n, n_obs, n_uo, edges, init, secret, extra_secret, avoid }
}

impl Sketch {
    fn event_name(&self, e: usize) -> &'static str {
        if e < self.n_obs {
            OBS_NAMES[e]
        } else {
            UO_NAMES[e - self.n_obs]
        }
    }

    fn assemble(&self, probs: impl Fn(f64) -> Posynomial, enlarge_secret: bool) -> Psdes {
        let mut b = PsdesBuilder::new();
        for q in 0..self.n_states {
            b.state(&format!("q{q}"));
        }
        for e in 0..self.n_obs + self.n_uo {
            b.event(self.event_name(e), e < self.n_obs);
        }
        for q in &self.secret {
            b.secret(&format!("q{q}"));
        }
        if enlarge_secret {
            if let Some(q) = self.extra_secret {
                b.secret(&format!("q{q}"));
            }
        }
        for q in &self.avoid {
            b.avoid(&format!("q{q}"));
        }
        for (q, p) in &self.init {
            b.init(&format!("q{q}"), *p);
        }
        for (f, e, t, p) in &self.edges {
            b.trans(&format!("q{f}"), self.event_name(*e), &format!("q{t}"), probs(*p));
        }
        b.build().expect("sketch assembles into a valid model")
    }

    /// Row-stochastic instance with constant probabilities.
    pub fn stochastic(&self, enlarge_secret: bool) -> Psdes {
        self.assemble(Posynomial::constant, enlarge_secret)
    }

    /// Same graph with all weights 1; only the structure matters.
    pub fn nfa(&self) -> Psdes {
        self.assemble(|_| Posynomial::one(), false)
    }
}

/// Random acyclic parametric system: all events observable, one branch per
/// event and state, branching rows are fresh parameter simplexes. Every
/// observation pins down a unique run, so belief masses stay monomial and the
/// synthesis encoding is always constructible.
pub fn parametric_sketch(seed: u64) -> Psdes {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let n = rng.gen_range(3..=6);
    let mut b = PsdesBuilder::new();
    for q in 0..n {
        b.state(&format!("q{q}"));
    }
    for e in &OBS_NAMES {
        b.event(e, true);
    }
    let mut next_param = 0usize;
    for from in 0..n - 1 {
        if from > 0 && rng.gen_bool(0.25) {
            continue;
        }
        let k = rng.gen_range(1..=3);
        let mut events: Vec<usize> = (0..3).collect();
        for i in (1..events.len()).rev() {
            events.swap(i, rng.gen_range(0..=i));
        }
        if k == 1 {
            let to = rng.gen_range(from + 1..n);
            b.trans(&format!("q{from}"), OBS_NAMES[events[0]], &format!("q{to}"), Posynomial::one());
        } else {
            for e in events.iter().take(k) {
                let to = rng.gen_range(from + 1..n);
                let name = format!("s{next_param}");
                next_param += 1;
                b.param(&name);
                b.trans(
                    &format!("q{from}"),
                    OBS_NAMES[*e],
                    &format!("q{to}"),
                    Posynomial::var(name.as_str()),
                );
            }
        }
    }
    for q in 2..n {
        if rng.gen_bool(0.35) {
            b.secret(&format!("q{q}"));
        }
    }
    if rng.gen_bool(0.5) {
        b.avoid(&format!("q{}", n - 1));
    }
    b.init("q0", 1.0);
    b.build().expect("parametric sketch assembles into a valid model")
}

/// Exact estimate oracle: every reachable observation string mapped to the
/// set of states the system can occupy after it, by walking all runs.
pub fn estimates_by_enumeration(m: &Psdes) -> BTreeMap<Vec<EventId>, BTreeSet<StateId>> {
    let mut adj: Vec<Vec<(EventId, StateId)>> = vec![Vec::new(); m.n_states()];
    for t in m.transitions() {
        adj[t.from].push((t.event, t.to));
    }
    let mut out: BTreeMap<Vec<EventId>, BTreeSet<StateId>> = BTreeMap::new();
    let mut stack: Vec<(StateId, Vec<EventId>)> =
        m.init_support().map(|q| (q, Vec::new())).collect();
    while let Some((q, proj)) = stack.pop() {
        out.entry(proj.clone()).or_default().insert(q);
        for (e, to) in &adj[q] {
            let mut next = proj.clone();
            if m.is_observable(*e) {
                next.push(*e);
            }
            stack.push((*to, next));
        }
    }
    out
}

/// All strings over the observable alphabet up to the given length.
pub fn observable_strings(m: &Psdes, max_len: usize) -> Vec<Vec<EventId>> {
    let alphabet: Vec<EventId> = m.observable_events().collect();
    let mut out: Vec<Vec<EventId>> = vec![Vec::new()];
    let mut layer: Vec<Vec<EventId>> = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for w in &layer {
            for e in &alphabet {
                let mut w2 = w.clone();
                w2.push(*e);
                next.push(w2);
            }
        }
        out.extend(next.iter().cloned());
        layer = next;
    }
    out
}

/// Valuations to exercise a fixture at: one sample per seed for parametric
/// models, the empty valuation for constant ones.
pub fn valuations_for(m: &Psdes, seed: u64, samples: usize) -> Vec<Valuation> {
    if m.params().is_empty() {
        vec![Valuation::new()]
    } else {
        m.sample_valuations(samples, seed)
    }
}
