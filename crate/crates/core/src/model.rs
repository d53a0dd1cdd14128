//! PSDES data model: line-oriented model files, per-event transition
//! matrices, canonical serialization, and executable validation of the
//! structural assumptions the synthesis pipeline relies on.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::posy::{ParamId, PosyMatrix, Posynomial, Valuation};

pub type StateId = usize;
pub type EventId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub from: StateId,
    pub event: EventId,
    pub to: StateId,
    pub prob: Posynomial,
}

#[derive(Debug)]
pub enum ModelError {
    Syntax { line: usize, msg: String },
    Undeclared { line: usize, kind: &'static str, name: String },
    Duplicate { line: usize, kind: &'static str, name: String },
    DuplicateTransition { line: usize, from: String, event: String, to: String },
    InitSum(f64),
}

fn line_prefix(line: usize) -> String {
    if line == 0 {
        String::new()
    } else {
        format!("line {line}: ")
    }
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Syntax { line, msg } => {
                write!(f, "{}{msg}", line_prefix(*line))
            }
            ModelError::Undeclared { line, kind, name } => {
                write!(f, "{}undeclared {kind} {name:?}", line_prefix(*line))
            }
            ModelError::Duplicate { line, kind, name } => {
                write!(f, "{}duplicate {kind} {name:?}", line_prefix(*line))
            }
            ModelError::DuplicateTransition { line, from, event, to } => {
                write!(f, "{}duplicate transition {from} {event} {to}", line_prefix(*line))
            }
            ModelError::InitSum(total) => {
                write!(f, "initial distribution sums to {total}, expected 1")
            }
        }
    }
}

impl std::error::Error for ModelError {}

/// Parametric stochastic discrete-event system. Immutable after
/// construction; transitions are kept sorted by (from, event, to).
#[derive(Clone, Debug, PartialEq)]
pub struct Psdes {
    states: Vec<String>,
    events: Vec<String>,
    observable: Vec<bool>,
    secret: BTreeSet<StateId>,
    avoid: BTreeSet<StateId>,
    init: Vec<f64>,
    params: Vec<ParamId>,
    trans: Vec<Transition>,
    matrices: Vec<PosyMatrix>,
    uo: PosyMatrix,
    param_floor: f64,
}

impl Psdes {
    pub fn parse(text: &str) -> Result<Psdes, ModelError> {
        parse_model(text)
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_events(&self) -> usize {
        self.events.len()
    }

    pub fn state_label(&self, q: StateId) -> &str {
        &self.states[q]
    }

    pub fn state_id(&self, label: &str) -> Option<StateId> {
        self.states.iter().position(|s| s == label)
    }

    pub fn event_name(&self, e: EventId) -> &str {
        &self.events[e]
    }

    pub fn event_id(&self, name: &str) -> Option<EventId> {
        self.events.iter().position(|s| s == name)
    }

    pub fn is_observable(&self, e: EventId) -> bool {
        self.observable[e]
    }

    pub fn observable_events(&self) -> impl Iterator<Item = EventId> + '_ {
        (0..self.events.len()).filter(|e| self.observable[*e])
    }

    pub fn unobservable_events(&self) -> impl Iterator<Item = EventId> + '_ {
        (0..self.events.len()).filter(|e| !self.observable[*e])
    }

    pub fn secret(&self) -> &BTreeSet<StateId> {
        &self.secret
    }

    pub fn avoid(&self) -> &BTreeSet<StateId> {
        &self.avoid
    }

    /// Initial distribution, one entry per state, summing to 1.
    pub fn init_dist(&self) -> &[f64] {
        &self.init
    }

    pub fn init_support(&self) -> impl Iterator<Item = StateId> + '_ {
        (0..self.states.len()).filter(|q| self.init[*q] > 0.0)
    }

    /// Initial distribution as a constant posynomial row vector.
    pub fn init_belief(&self) -> Vec<Posynomial> {
        self.init.iter().map(|p| Posynomial::constant(*p)).collect()
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.trans
    }

    pub fn event_matrix(&self, e: EventId) -> &PosyMatrix {
        &self.matrices[e]
    }

    /// Entrywise sum of the matrices of all unobservable events.
    pub fn uo_matrix(&self) -> &PosyMatrix {
        &self.uo
    }

    pub fn row_sum(&self, q: StateId) -> Posynomial {
        let mut sum = Posynomial::zero();
        for t in &self.trans {
            if t.from == q {
                sum = sum.add(&t.prob);
            }
        }
        sum
    }

    pub fn uo_row_sum(&self, q: StateId) -> Posynomial {
        let mut sum = Posynomial::zero();
        for t in &self.trans {
            if t.from == q && !self.observable[t.event] {
                sum = sum.add(&t.prob);
            }
        }
        sum
    }

    pub fn param_floor(&self) -> f64 {
        self.param_floor
    }

    pub fn set_param_floor(&mut self, floor: f64) {
        assert!(floor > 0.0 && floor < 0.5);
        self.param_floor = floor;
    }

    /// Canonical text form; parsing it back yields a structurally equal model.
    pub fn to_text(&self) -> String {
        let mut out = String::from("psdes\n");
        out.push_str("states");
        for s in &self.states {
            out.push(' ');
            out.push_str(s);
        }
        out.push('\n');
        if !self.events.is_empty() {
            out.push_str("events");
            for e in &self.events {
                out.push(' ');
                out.push_str(e);
            }
            out.push('\n');
        }
        if self.observable.iter().any(|o| *o) {
            out.push_str("observable");
            for (e, name) in self.events.iter().enumerate() {
                if self.observable[e] {
                    out.push(' ');
                    out.push_str(name);
                }
            }
            out.push('\n');
        }
        if !self.secret.is_empty() {
            out.push_str("secret");
            for q in &self.secret {
                out.push(' ');
                out.push_str(&self.states[*q]);
            }
            out.push('\n');
        }
        if !self.avoid.is_empty() {
            out.push_str("avoid");
            for q in &self.avoid {
                out.push(' ');
                out.push_str(&self.states[*q]);
            }
            out.push('\n');
        }
        for (q, p) in self.init.iter().enumerate() {
            if *p > 0.0 {
                out.push_str(&format!("init {} {}\n", self.states[q], p));
            }
        }
        if !self.params.is_empty() {
            out.push_str("param");
            for p in &self.params {
                out.push(' ');
                out.push_str(p.as_str());
            }
            out.push('\n');
        }
        for t in &self.trans {
            if t.prob.is_one() {
                out.push_str(&format!(
                    "trans {} {} {}\n",
                    self.states[t.from], self.events[t.event], self.states[t.to]
                ));
            } else {
                out.push_str(&format!(
                    "trans {} {} {} : {}\n",
                    self.states[t.from], self.events[t.event], self.states[t.to], t.prob
                ));
            }
        }
        out
    }

    /// SHA-256 of the canonical text form, hex-encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_text().as_bytes());
        let d = h.finalize();
        d.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Equivalent model whose initial distribution is a point mass: a fresh
    /// state feeds the old distribution through a fresh unobservable event.
    /// Identity when the distribution already is a point mass. The result
    /// intentionally trades the strict-inequality check on unobservable row
    /// sums for a unique start state, so it is for analysis, not synthesis.
    pub fn with_unique_initial(&self) -> Psdes {
        let support: Vec<StateId> = self.init_support().collect();
        if support.len() == 1 && (self.init[support[0]] - 1.0).abs() < 1e-15 {
            return self.clone();
        }
        let mut b = PsdesBuilder::new();
        let mut dummy = "_init".to_string();
        while self.states.contains(&dummy) {
            dummy.insert(0, '_');
        }
        let mut tau = "_tau".to_string();
        while self.events.contains(&tau) {
            tau.insert(0, '_');
        }
        b.state(&dummy);
        for s in &self.states {
            b.state(s);
        }
        for (e, name) in self.events.iter().enumerate() {
            b.event(name, self.observable[e]);
        }
        b.event(&tau, false);
        for q in &self.secret {
            b.secret(&self.states[*q]);
        }
        for q in &self.avoid {
            b.avoid(&self.states[*q]);
        }
        b.init(&dummy, 1.0);
        for p in &self.params {
            b.param(p.as_str());
        }
        for q in &support {
            b.trans(&dummy, &tau, &self.states[*q], Posynomial::constant(self.init[*q]));
        }
        for t in &self.trans {
            b.trans(
                &self.states[t.from],
                &self.events[t.event],
                &self.states[t.to],
                t.prob.clone(),
            );
        }
        b.build().expect("transform of a valid model is valid")
    }

    /// Deterministic interior valuations for sampled assumption checks.
    ///
    /// Rows whose symbolic sum has the affine shape `c0 + sum c_i*v_i` are
    /// detected and the involved parameters sampled jointly so the row sums
    /// to 1; on conflicting shapes or leftovers, parameters fall back to
    /// uniform draws from [floor, 1-floor].
    pub fn sample_valuations(&self, samples: usize, seed: u64) -> Vec<Valuation> {
        #[derive(PartialEq, Clone)]
        struct Group {
            members: Vec<(ParamId, f64)>,
            target: f64,
        }
        let mut groups: Vec<Group> = Vec::new();
        let mut grouped: BTreeMap<ParamId, usize> = BTreeMap::new();
        let mut boxed: BTreeSet<ParamId> = BTreeSet::new();

        'rows: for q in 0..self.n_states() {
            let row = self.row_sum(q);
            if row.as_constant().is_some() {
                continue;
            }
            let mut members: Vec<(ParamId, f64)> = Vec::new();
            let mut c0 = 0.0;
            for m in row.terms() {
                let exps: Vec<_> = m.exponents().collect();
                match exps.as_slice() {
                    [] => c0 += m.coeff(),
                    [(p, e)] if *e == 1.0 => members.push(((*p).clone(), m.coeff())),
                    _ => {
                        for p in row.params() {
                            boxed.insert(p.clone());
                        }
                        continue 'rows;
                    }
                }
            }
            let target = 1.0 - c0;
            if target <= 0.0 {
                for p in row.params() {
                    boxed.insert(p.clone());
                }
                continue;
            }
            let g = Group { members, target };
            let existing: BTreeSet<usize> =
                g.members.iter().filter_map(|(p, _)| grouped.get(p).copied()).collect();
            match existing.iter().next() {
                None => {
                    let idx = groups.len();
                    for (p, _) in &g.members {
                        grouped.insert(p.clone(), idx);
                    }
                    groups.push(g);
                }
                Some(&idx) if existing.len() == 1 && groups[idx] == g => {}
                _ => {
                    // overlapping but different structure: give up on joint sampling
                    for (p, _) in &g.members {
                        grouped.remove(p);
                        boxed.insert(p.clone());
                    }
                }
            }
        }

        let floor = self.param_floor;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(samples);
        for _ in 0..samples {
            let mut v = Valuation::new();
            for g in &groups {
                if g.members.iter().any(|(p, _)| boxed.contains(p)) {
                    continue;
                }
                let mut weights: Vec<f64> = Vec::new();
                for _try in 0..1000 {
                    weights = g
                        .members
                        .iter()
                        .map(|_| -f64::ln(1.0 - rng.gen::<f64>()))
                        .collect();
                    let total: f64 = weights.iter().sum();
                    for w in &mut weights {
                        *w *= g.target / total;
                    }
                    if weights
                        .iter()
                        .zip(&g.members)
                        .all(|(w, (_, c))| w / c >= floor && w / c <= 1.0 - floor)
                    {
                        break;
                    }
                }
                for (w, (p, c)) in weights.iter().zip(&g.members) {
                    let _ = v.set(p.clone(), w / c);
                }
            }
            for p in &self.params {
                if v.get(p).is_none() {
                    let x = floor + (1.0 - 2.0 * floor) * rng.gen::<f64>();
                    let _ = v.set(p.clone(), x);
                }
            }
            out.push(v);
        }
        out
    }
}

impl fmt::Display for Psdes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Programmatic construction; `parse` uses this under the hood.
#[derive(Default)]
pub struct PsdesBuilder {
    states: Vec<String>,
    events: Vec<String>,
    observable: Vec<bool>,
    secret: Vec<String>,
    avoid: Vec<String>,
    init: Vec<(String, f64)>,
    params: Vec<String>,
    trans: Vec<(String, String, String, Posynomial, usize)>,
    lines: BTreeMap<&'static str, usize>,
}

impl PsdesBuilder {
    pub fn new() -> Self {
        PsdesBuilder::default()
    }

    pub fn state(&mut self, label: &str) -> &mut Self {
        self.states.push(label.to_string());
        self
    }

    pub fn event(&mut self, name: &str, observable: bool) -> &mut Self {
        self.events.push(name.to_string());
        self.observable.push(observable);
        self
    }

    pub fn secret(&mut self, label: &str) -> &mut Self {
        self.secret.push(label.to_string());
        self
    }

    pub fn avoid(&mut self, label: &str) -> &mut Self {
        self.avoid.push(label.to_string());
        self
    }

    pub fn init(&mut self, label: &str, prob: f64) -> &mut Self {
        self.init.push((label.to_string(), prob));
        self
    }

    pub fn param(&mut self, name: &str) -> &mut Self {
        self.params.push(name.to_string());
        self
    }

    pub fn trans(&mut self, from: &str, event: &str, to: &str, prob: Posynomial) -> &mut Self {
        self.trans.push((from.to_string(), event.to_string(), to.to_string(), prob, 0));
        self
    }

    fn trans_at(
        &mut self,
        line: usize,
        from: &str,
        event: &str,
        to: &str,
        prob: Posynomial,
    ) -> &mut Self {
        self.trans.push((from.to_string(), event.to_string(), to.to_string(), prob, line));
        self
    }

    pub fn build(&self) -> Result<Psdes, ModelError> {
        let line = |key: &'static str| self.lines.get(key).copied().unwrap_or(0);
        if self.states.is_empty() {
            return Err(ModelError::Syntax { line: 0, msg: "model declares no states".into() });
        }
        let mut state_ix: BTreeMap<&str, StateId> = BTreeMap::new();
        for (i, s) in self.states.iter().enumerate() {
            if state_ix.insert(s, i).is_some() {
                return Err(ModelError::Duplicate {
                    line: line("states"),
                    kind: "state",
                    name: s.clone(),
                });
            }
        }
        let mut event_ix: BTreeMap<&str, EventId> = BTreeMap::new();
        for (i, e) in self.events.iter().enumerate() {
            if event_ix.insert(e, i).is_some() {
                return Err(ModelError::Duplicate {
                    line: line("events"),
                    kind: "event",
                    name: e.clone(),
                });
            }
        }
        let mut param_ix: BTreeSet<&str> = BTreeSet::new();
        for p in &self.params {
            if !param_ix.insert(p) {
                return Err(ModelError::Duplicate {
                    line: line("param"),
                    kind: "parameter",
                    name: p.clone(),
                });
            }
        }
        let resolve_state = |label: &str, key: &'static str| {
            state_ix.get(label).copied().ok_or(ModelError::Undeclared {
                line: line(key),
                kind: "state",
                name: label.to_string(),
            })
        };
        let mut secret = BTreeSet::new();
        for s in &self.secret {
            secret.insert(resolve_state(s, "secret")?);
        }
        let mut avoid = BTreeSet::new();
        for s in &self.avoid {
            avoid.insert(resolve_state(s, "avoid")?);
        }
        let mut init = vec![0.0; self.states.len()];
        if self.init.is_empty() {
            return Err(ModelError::Syntax {
                line: 0,
                msg: "model declares no initial distribution".into(),
            });
        }
        for (s, p) in &self.init {
            let q = resolve_state(s, "init")?;
            if !(*p > 0.0 && *p <= 1.0) {
                return Err(ModelError::Syntax {
                    line: line("init"),
                    msg: format!("initial probability for state {s} must be in (0, 1], got {p}"),
                });
            }
            if init[q] != 0.0 {
                return Err(ModelError::Duplicate {
                    line: line("init"),
                    kind: "initial state",
                    name: s.clone(),
                });
            }
            init[q] = *p;
        }
        let total: f64 = init.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(ModelError::InitSum(total));
        }

        let n = self.states.len();
        let mut trans: Vec<Transition> = Vec::with_capacity(self.trans.len());
        let mut seen: BTreeSet<(StateId, EventId, StateId)> = BTreeSet::new();
        for (from, event, to, prob, tline) in &self.trans {
            let f = state_ix.get(from.as_str()).copied().ok_or(ModelError::Undeclared {
                line: *tline,
                kind: "state",
                name: from.clone(),
            })?;
            let t = state_ix.get(to.as_str()).copied().ok_or(ModelError::Undeclared {
                line: *tline,
                kind: "state",
                name: to.clone(),
            })?;
            let e = event_ix.get(event.as_str()).copied().ok_or(ModelError::Undeclared {
                line: *tline,
                kind: "event",
                name: event.clone(),
            })?;
            for p in prob.params() {
                if !param_ix.contains(p.as_str()) {
                    return Err(ModelError::Undeclared {
                        line: *tline,
                        kind: "parameter",
                        name: p.as_str().to_string(),
                    });
                }
            }
            if prob.is_zero() {
                continue;
            }
            if !seen.insert((f, e, t)) {
                return Err(ModelError::DuplicateTransition {
                    line: *tline,
                    from: from.clone(),
                    event: event.clone(),
                    to: to.clone(),
                });
            }
            trans.push(Transition { from: f, event: e, to: t, prob: prob.clone() });
        }
        trans.sort_by_key(|t| (t.from, t.event, t.to));

        let mut matrices = vec![PosyMatrix::zeros(n); self.events.len()];
        let mut uo = PosyMatrix::zeros(n);
        for t in &trans {
            *matrices[t.event].get_mut(t.from, t.to) = t.prob.clone();
            if !self.observable[t.event] {
                let slot = uo.get_mut(t.from, t.to);
                *slot = slot.add(&t.prob);
            }
        }

        Ok(Psdes {
            states: self.states.clone(),
            events: self.events.clone(),
            observable: self.observable.clone(),
            secret,
            avoid,
            init,
            params: self.params.iter().map(|p| ParamId::new(p.as_str())).collect(),
            trans,
            matrices,
            uo,
            param_floor: 1e-6,
        })
    }
}

pub fn parse_model(text: &str) -> Result<Psdes, ModelError> {
    let mut b = PsdesBuilder::new();
    let mut saw_header = false;
    let mut observables: Vec<(usize, String)> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let content = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        };
        let trimmed = content.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut tokens = trimmed.split_whitespace();
        let keyword = tokens.next().unwrap();
        if !saw_header {
            if keyword == "psdes" && tokens.next().is_none() {
                saw_header = true;
                continue;
            }
            return Err(ModelError::Syntax {
                line: lineno,
                msg: "expected 'psdes' header as the first directive".into(),
            });
        }
        match keyword {
            "psdes" => {
                return Err(ModelError::Syntax { line: lineno, msg: "duplicate header".into() })
            }
            "states" => {
                b.lines.entry("states").or_insert(lineno);
                for t in tokens {
                    b.state(t);
                }
            }
            "events" => {
                b.lines.entry("events").or_insert(lineno);
                for t in tokens {
                    b.event(t, false);
                }
            }
            "observable" => {
                for t in tokens {
                    observables.push((lineno, t.to_string()));
                }
            }
            "secret" => {
                b.lines.entry("secret").or_insert(lineno);
                for t in tokens {
                    b.secret(t);
                }
            }
            "avoid" => {
                b.lines.entry("avoid").or_insert(lineno);
                for t in tokens {
                    b.avoid(t);
                }
            }
            "init" => {
                b.lines.entry("init").or_insert(lineno);
                let state = tokens.next().ok_or(ModelError::Syntax {
                    line: lineno,
                    msg: "init needs a state and a probability".into(),
                })?;
                let prob_tok = tokens.next().ok_or(ModelError::Syntax {
                    line: lineno,
                    msg: "init needs a state and a probability".into(),
                })?;
                if tokens.next().is_some() {
                    return Err(ModelError::Syntax {
                        line: lineno,
                        msg: "init takes exactly one state and one probability".into(),
                    });
                }
                let prob: f64 = prob_tok.parse().map_err(|_| ModelError::Syntax {
                    line: lineno,
                    msg: format!("invalid probability literal {prob_tok:?}"),
                })?;
                b.init(state, prob);
            }
            "param" => {
                b.lines.entry("param").or_insert(lineno);
                for t in tokens {
                    b.param(t);
                }
            }
            "trans" => {
                let (head, expr) = match trimmed.split_once(':') {
                    Some((h, e)) => (h, Some(e)),
                    None => (trimmed, None),
                };
                let parts: Vec<&str> = head.split_whitespace().collect();
                if parts.len() != 4 {
                    return Err(ModelError::Syntax {
                        line: lineno,
                        msg: "trans takes source, event, destination, then an optional \
                              ': <expression>'"
                            .into(),
                    });
                }
                let prob = match expr {
                    None => Posynomial::one(),
                    Some(e) => Posynomial::parse(e).map_err(|err| ModelError::Syntax {
                        line: lineno,
                        msg: err.to_string(),
                    })?,
                };
                b.trans_at(lineno, parts[1], parts[2], parts[3], prob);
            }
            other => {
                return Err(ModelError::Syntax {
                    line: lineno,
                    msg: format!("unknown directive {other:?}"),
                })
            }
        }
    }
    if !saw_header {
        return Err(ModelError::Syntax { line: 0, msg: "empty model file".into() });
    }
    // observability flags resolve after all event declarations
    for (lineno, name) in observables {
        match b.events.iter().position(|e| *e == name) {
            Some(i) => b.observable[i] = true,
            None => {
                return Err(ModelError::Undeclared { line: lineno, kind: "event", name })
            }
        }
    }
    b.build()
}

/// Outcome of one assumption check.
#[derive(Clone, Debug)]
pub struct Check {
    pub passed: bool,
    pub detail: String,
}

/// Results of the four structural checks plus advisory warnings.
#[derive(Clone, Debug)]
pub struct ValidationReport {
    pub row_stochastic: Check,
    pub fixed_structure: Check,
    pub finite_observations: Check,
    pub closure_exists: Check,
    pub warnings: Vec<String>,
    pub samples_used: usize,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.row_stochastic.passed
            && self.fixed_structure.passed
            && self.finite_observations.passed
            && self.closure_exists.passed
    }

    pub fn checks(&self) -> [(&'static str, &Check); 4] {
        [
            ("row sums", &self.row_stochastic),
            ("fixed structure", &self.fixed_structure),
            ("finite observations", &self.finite_observations),
            ("unobservable closure", &self.closure_exists),
        ]
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, c) in self.checks() {
            let status = if c.passed { "pass" } else { "FAIL" };
            writeln!(f, "{status}  {name}: {}", c.detail)?;
        }
        for w in &self.warnings {
            writeln!(f, "warn  {w}")?;
        }
        Ok(())
    }
}

fn fmt_valuation(v: &Valuation) -> String {
    let parts: Vec<String> = v.iter().map(|(p, x)| format!("{p}={x:.6}")).collect();
    parts.join(", ")
}

/// Checks the four structural assumptions the pipeline needs:
/// every row sums to 0 or 1 (with strict sub-unit mass on unobservable
/// events), the graph structure is certain at interior valuations, the
/// observable language is finite, and the unobservable closure matrix exists.
/// Parametric checks are sampled, so a pass there is evidence, not proof.
pub fn validate_assumptions(m: &Psdes, samples: usize) -> ValidationReport {
    assert!(samples >= 1);
    let vals = m.sample_valuations(samples, 0x5eed);

    // rows sum to 0 or 1; unobservable mass strictly below 1
    let mut row_ok = true;
    let mut row_detail = String::new();
    'a1: {
        for q in 0..m.n_states() {
            let row = m.row_sum(q);
            match row.as_constant() {
                Some(c) if c == 0.0 => {}
                Some(c) if (c - 1.0).abs() <= 1e-9 => {}
                Some(c) => {
                    row_ok = false;
                    row_detail = format!(
                        "state {} has constant outgoing mass {c}, expected 0 or 1",
                        m.state_label(q)
                    );
                    break 'a1;
                }
                None => {
                    for v in &vals {
                        let x = row.eval(v).map_err(|e| e.to_string());
                        match x {
                            Ok(x) if x <= 1.0 + 1e-9 => {}
                            Ok(x) => {
                                row_ok = false;
                                row_detail = format!(
                                    "state {} has outgoing mass {x:.9} > 1 at {}",
                                    m.state_label(q),
                                    fmt_valuation(v)
                                );
                                break 'a1;
                            }
                            Err(e) => {
                                row_ok = false;
                                row_detail = e;
                                break 'a1;
                            }
                        }
                    }
                }
            }
            let uo = m.uo_row_sum(q);
            match uo.as_constant() {
                Some(c) if c < 1.0 - 1e-9 => {}
                Some(c) => {
                    row_ok = false;
                    row_detail = format!(
                        "state {} has unobservable mass {c}, expected < 1",
                        m.state_label(q)
                    );
                    break 'a1;
                }
                None => {
                    for v in &vals {
                        match uo.eval(v) {
                            Ok(x) if x < 1.0 - 1e-9 => {}
                            Ok(x) => {
                                row_ok = false;
                                row_detail = format!(
                                    "state {} has unobservable mass {x:.9} at {}",
                                    m.state_label(q),
                                    fmt_valuation(v)
                                );
                                break 'a1;
                            }
                            Err(e) => {
                                row_ok = false;
                                row_detail = e.to_string();
                                break 'a1;
                            }
                        }
                    }
                }
            }
        }
        if row_ok {
            row_detail = format!("all rows sum to 0 or 1 ({samples} sampled valuations)");
        }
    }

    // structure is certain: no parametric entry hits 0 or 1 in the interior
    let mut fixed_ok = true;
    let mut fixed_detail = String::new();
    'a2: {
        for t in m.transitions() {
            if t.prob.as_constant().is_some() {
                continue;
            }
            for v in &vals {
                match t.prob.eval(v) {
                    Ok(x) if x > 1e-12 && (x - 1.0).abs() > 1e-12 => {}
                    Ok(x) => {
                        fixed_ok = false;
                        fixed_detail = format!(
                            "transition {} -{}-> {} evaluates to {x} at {}",
                            m.state_label(t.from),
                            m.event_name(t.event),
                            m.state_label(t.to),
                            fmt_valuation(v)
                        );
                        break 'a2;
                    }
                    Err(e) => {
                        fixed_ok = false;
                        fixed_detail = e.to_string();
                        break 'a2;
                    }
                }
            }
        }
        if fixed_ok {
            fixed_detail =
                format!("no parametric transition degenerates ({samples} sampled valuations)");
        }
    }

    // observable language is finite iff the observer graph is acyclic
    let obs = crate::observer::Observer::build(m);
    let (finite_ok, finite_detail) = match obs.find_cycle() {
        None => (true, format!("observer is acyclic ({} estimates)", obs.n_nodes())),
        Some(cycle) => {
            let path: Vec<String> =
                cycle.iter().map(|n| obs.node_label(*n)).collect();
            (false, format!("observer has a cycle: {}", path.join(" -> ")))
        }
    };

    // the unobservable closure matrix must exist
    let (closure_ok, closure_detail) = {
        let uo = m.uo_matrix();
        match uo.star(crate::posy::ClosureMode::NilpotentTruncation) {
            Ok(_) => (true, "unobservable matrix is nilpotent; truncated series".to_string()),
            Err(_) => match uo.star(crate::posy::ClosureMode::ConstantInverse) {
                Ok(_) => (true, "unobservable matrix is constant; series inverted".to_string()),
                Err(e) => (false, e.to_string()),
            },
        }
    };

    // advisory only: unobservable edges shadowed by no observable edge
    let mut warnings = Vec::new();
    for t in m.transitions() {
        if m.is_observable(t.event) {
            continue;
        }
        let shadowed = m.transitions().iter().any(|u| {
            u.from == t.from && u.to == t.to && m.is_observable(u.event)
        });
        if !shadowed {
            warnings.push(format!(
                "unobservable transition {} -{}-> {} has no observable transition alongside it",
                m.state_label(t.from),
                m.event_name(t.event),
                m.state_label(t.to)
            ));
        }
    }

    ValidationReport {
        row_stochastic: Check { passed: row_ok, detail: row_detail },
        fixed_structure: Check { passed: fixed_ok, detail: fixed_detail },
        finite_observations: Check { passed: finite_ok, detail: finite_detail },
        closure_exists: Check { passed: closure_ok, detail: closure_detail },
        warnings,
        samples_used: samples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub const NETWORK: &str = include_str!("../fixtures/network.psdes");

    #[test]
    fn parses_network_fixture() {
        let m = Psdes::parse(NETWORK).unwrap();
        assert_eq!(m.n_states(), 11);
        assert_eq!(m.n_events(), 3);
        assert_eq!(m.params().len(), 7);
        let secret: Vec<&str> = m.secret().iter().map(|q| m.state_label(*q)).collect();
        assert_eq!(secret, ["8", "9"]);
        let avoid: Vec<&str> = m.avoid().iter().map(|q| m.state_label(*q)).collect();
        assert_eq!(avoid, ["5"]);
        assert_eq!(m.init_dist()[m.state_id("0").unwrap()], 1.0);
        assert_eq!(m.transitions().len(), 14);
    }

    #[test]
    fn network_event_matrices() {
        let m = Psdes::parse(NETWORK).unwrap();
        let a = m.event_id("a").unwrap();
        let pa = m.event_matrix(a);
        let s = |l: &str| m.state_id(l).unwrap();
        assert_eq!(pa.get(s("0"), s("1")), &Posynomial::var("v1"));
        assert_eq!(pa.get(s("4"), s("2")), &Posynomial::var("v4"));
        assert_eq!(pa.get(s("7"), s("8")), &Posynomial::var("v6"));
        assert!(pa.get(s("5"), s("6")).is_one());
        assert!(pa.get(s("0"), s("4")).is_zero());
        assert!(m.uo_matrix().is_zero());
    }

    #[test]
    fn one_state_model_has_zero_matrices() {
        let m = Psdes::parse("psdes\nstates s\nevents a\ninit s 1\n").unwrap();
        assert!(m.event_matrix(0).is_zero());
        assert!(m.uo_matrix().is_zero());
        assert!(m.row_sum(0).is_zero());
    }

    #[test]
    fn negative_coefficient_is_a_syntax_error() {
        let text = "psdes\nstates 0 1\nevents a\nobservable a\ninit 0 1\ntrans 0 a 1 : -0.3\n";
        match Psdes::parse(text) {
            Err(ModelError::Syntax { line, msg }) => {
                assert_eq!(line, 6);
                assert!(msg.contains("positive"), "{msg}");
            }
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn two_term_posynomial_is_stored() {
        let text = "psdes\nstates 0 1\nevents a\nobservable a\ninit 0 1\nparam v1 v2\n\
                    trans 0 a 1 : 0.5*v1^2 + v2\n";
        let m = Psdes::parse(text).unwrap();
        assert_eq!(m.transitions().len(), 1);
        assert_eq!(m.transitions()[0].prob.terms().len(), 2);
    }

    #[test]
    fn undeclared_names_are_rejected_with_lines() {
        let base = "psdes\nstates 0 1\nevents a\ninit 0 1\n";
        match Psdes::parse(&format!("{base}trans 0 a 2\n")) {
            Err(ModelError::Undeclared { line: 5, kind: "state", name }) => {
                assert_eq!(name, "2")
            }
            other => panic!("{other:?}"),
        }
        match Psdes::parse(&format!("{base}trans 0 b 1\n")) {
            Err(ModelError::Undeclared { line: 5, kind: "event", name }) => {
                assert_eq!(name, "b")
            }
            other => panic!("{other:?}"),
        }
        match Psdes::parse(&format!("{base}trans 0 a 1 : v9\n")) {
            Err(ModelError::Undeclared { line: 5, kind: "parameter", name }) => {
                assert_eq!(name, "v9")
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_transition_is_rejected() {
        let text = "psdes\nstates 0 1\nevents a\ninit 0 1\ntrans 0 a 1 : 0.5\ntrans 0 a 1 : 0.5\n";
        assert!(matches!(
            Psdes::parse(text),
            Err(ModelError::DuplicateTransition { line: 6, .. })
        ));
    }

    #[test]
    fn init_must_sum_to_one() {
        let text = "psdes\nstates 0 1\nevents a\ninit 0 0.5\ninit 1 0.4\n";
        assert!(matches!(Psdes::parse(text), Err(ModelError::InitSum(_))));
    }

    #[test]
    fn serialize_parse_round_trip() {
        let m = Psdes::parse(NETWORK).unwrap();
        let again = Psdes::parse(&m.to_text()).unwrap();
        assert_eq!(m, again);
        assert_eq!(m.digest(), again.digest());
    }

    #[test]
    fn digest_tracks_content() {
        let m = Psdes::parse(NETWORK).unwrap();
        let mut other = NETWORK.replace("secret 8 9", "secret 8");
        other.push('\n');
        let m2 = Psdes::parse(&other).unwrap();
        assert_ne!(m.digest(), m2.digest());
        assert_eq!(m.digest().len(), 64);
    }

    #[test]
    fn network_assumptions_pass_with_sampling() {
        let m = Psdes::parse(NETWORK).unwrap();
        let report = validate_assumptions(&m, 10);
        assert!(report.all_passed(), "{report}");
        assert!(report.warnings.is_empty());
    }

    #[test]
    fn constant_row_sum_below_one_fails_validation() {
        let text = "psdes\nstates 0 1\nevents a\nobservable a\ninit 0 1\ntrans 0 a 1 : 0.9\n";
        let m = Psdes::parse(text).unwrap();
        let report = validate_assumptions(&m, 5);
        assert!(!report.row_stochastic.passed);
        assert!(report.row_stochastic.detail.contains("state 0"), "{report}");
    }

    #[test]
    fn observable_self_loop_fails_finite_observation_check() {
        let text = "psdes\nstates 0\nevents a\nobservable a\ninit 0 1\ntrans 0 a 0\n";
        let m = Psdes::parse(text).unwrap();
        let report = validate_assumptions(&m, 5);
        assert!(!report.finite_observations.passed);
        assert!(report.finite_observations.detail.contains("cycle"), "{report}");
    }

    #[test]
    fn unique_initial_transform_is_identity_on_point_mass() {
        let m = Psdes::parse(NETWORK).unwrap();
        assert_eq!(m.with_unique_initial(), m);
    }

    #[test]
    fn unique_initial_transform_adds_unobservable_feed() {
        let text = "psdes\nstates 0 1 2\nevents a\nobservable a\ninit 0 0.25\ninit 1 0.75\n\
                    trans 0 a 2 : 0.5\ntrans 1 a 2 : 0.5\n";
        let m = Psdes::parse(text).unwrap();
        let u = m.with_unique_initial();
        assert_eq!(u.n_states(), 4);
        assert_eq!(u.n_events(), 2);
        let dummy = u.state_id("_init").unwrap();
        assert_eq!(u.init_dist()[dummy], 1.0);
        let tau = u.event_id("_tau").unwrap();
        assert!(!u.is_observable(tau));
        let fed: f64 = u
            .transitions()
            .iter()
            .filter(|t| t.from == dummy)
            .map(|t| t.prob.as_constant().unwrap())
            .sum();
        assert!((fed - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampled_valuations_respect_simplex_rows() {
        let m = Psdes::parse(NETWORK).unwrap();
        let vals = m.sample_valuations(10, 7);
        assert_eq!(vals.len(), 10);
        for v in &vals {
            for q in 0..m.n_states() {
                let row = m.row_sum(q);
                if row.as_constant().is_none() {
                    let x = row.eval(v).unwrap();
                    assert!((x - 1.0).abs() < 1e-9, "row {q} sums to {x}");
                }
            }
        }
    }
}
