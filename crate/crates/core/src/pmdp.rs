//! The all-insertion parametric MDP: a bipartite unfolding of the system's
//! observable behavior in which system states hand each freshly produced
//! observable event to an insertion state, and every insertion state offers
//! one action per safe insertion string (the empty string included). States
//! with no safe insertion are the sink set; system states with no remaining
//! observable behavior are the goal set.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{EventId, Psdes};
use crate::observer::{Observer, ObserverError, SafeObserver};
use crate::posy::{vec_mul, ClosureError, PosyMatrix, Posynomial};

#[derive(Debug, Error)]
pub enum PmdpError {
    #[error(transparent)]
    Observer(#[from] ObserverError),
    #[error(transparent)]
    Closure(#[from] ClosureError),
    #[error("the observable language is infinite; the unfolding would not terminate")]
    InfiniteObservations,
    #[error("GP-incompatible model: belief mass at state {state} is {mass}, not a monomial")]
    GpIncompatible { state: String, mass: String },
}

/// Which insertion strings an insertion state offers.
///
/// Candidates are always labels of simple (node-repetition-free) walks in
/// the safe observer that stay safe when the pending event is appended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InsertionPolicy {
    /// Every safe candidate, everywhere.
    Exhaustive,
    /// Every safe candidate at the initial state; elsewhere the empty
    /// insertion plus, when the two estimates agree, detours that land the
    /// intruder on a terminal safe node. Produces the minimal actionable
    /// unfolding while preserving every blocking/goal distinction.
    #[default]
    Parsimonious,
}

impl InsertionPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            InsertionPolicy::Exhaustive => "exhaustive",
            InsertionPolicy::Parsimonious => "parsimonious",
        }
    }

    pub fn from_name(name: &str) -> Option<InsertionPolicy> {
        match name {
            "exhaustive" => Some(InsertionPolicy::Exhaustive),
            "parsimonious" => Some(InsertionPolicy::Parsimonious),
            _ => None,
        }
    }
}

/// State between observable events: what the intruder believes (E_i), what
/// the observer would believe (E_s), and the parametric belief over states.
#[derive(Clone, Debug)]
pub struct SystemState {
    /// Safe-observer node the intruder sits on.
    pub intruder_node: usize,
    /// Observer node of the true observed string.
    pub system_node: usize,
    /// Canonically scaled belief over model states; its mass is the
    /// constant 1 exactly when the pre-scaling mass was a monomial.
    pub belief: Vec<Posynomial>,
    /// Pre-scaling belief mass on first arrival (the conditional
    /// probability denominator for outgoing transitions).
    pub mass: Posynomial,
    /// Representative observed string (first reached in breadth-first order).
    pub history: Vec<EventId>,
}

/// One insertion choice: insert `word`, then let the pending event through.
#[derive(Clone, Debug)]
pub struct InsertionAction {
    pub word: Vec<EventId>,
    pub successor: usize,
    /// Actions with the same successor share a group index.
    pub group: usize,
}

/// State holding a just-produced observable event while the defender picks
/// an insertion. No actions means the defender is blocked (a sink).
#[derive(Clone, Debug)]
pub struct InsertionState {
    pub parent: usize,
    pub pending: EventId,
    /// Post-event belief, unnormalized (mass = conditional probability).
    pub belief: Vec<Posynomial>,
    /// Observer node after the pending event.
    pub system_node: usize,
    pub history: Vec<EventId>,
    pub actions: Vec<InsertionAction>,
}

pub struct InsertionPmdp {
    policy: InsertionPolicy,
    event_names: Vec<String>,
    y_states: Vec<SystemState>,
    z_states: Vec<InsertionState>,
    /// Per system state: (insertion state, conditional probability).
    y_out: Vec<Vec<(usize, Posynomial)>>,
    y_labels: Vec<String>,
    z_labels: Vec<String>,
    goals: Vec<usize>,
    sinks: Vec<usize>,
}

/// All simple-path insertion candidates from `intruder_node` that keep the
/// walk (insertion then pending event) inside the safe observer, filtered by
/// the policy. Sorted by length, then by display form.
pub fn enumerate_insertions(
    safe: &SafeObserver,
    intruder_node: usize,
    pending: EventId,
    policy: InsertionPolicy,
    at_initial_state: bool,
    estimates_agree: bool,
) -> Vec<Vec<EventId>> {
    let mut candidates: Vec<(Vec<EventId>, usize)> = Vec::new();
    let mut visited = vec![false; safe.n_nodes()];
    fn dfs(
        safe: &SafeObserver,
        node: usize,
        word: &mut Vec<EventId>,
        visited: &mut [bool],
        out: &mut Vec<(Vec<EventId>, usize)>,
    ) {
        out.push((word.clone(), node));
        visited[node] = true;
        for (e, next) in safe.out_edges(node) {
            if !visited[next] {
                word.push(e);
                dfs(safe, next, word, visited, out);
                word.pop();
            }
        }
        visited[node] = false;
    }
    let mut word = Vec::new();
    dfs(safe, intruder_node, &mut word, &mut visited, &mut candidates);

    let keep_all = at_initial_state || policy == InsertionPolicy::Exhaustive;
    let mut words: Vec<Vec<EventId>> = Vec::new();
    for (w, end) in candidates {
        let Some(landing) = safe.step(end, pending) else { continue };
        let ok = if keep_all {
            true
        } else if w.is_empty() {
            true
        } else {
            estimates_agree && !safe.has_out_edges(landing)
        };
        if ok {
            words.push(w);
        }
    }
    words.sort_by_key(|w| (w.len(), safe.string_label(w)));
    words
}

/// Scale a belief by the leading term of its mass; beliefs equal up to a
/// monomial factor get the same representative.
fn canonical_belief(belief: Vec<Posynomial>) -> Vec<Posynomial> {
    let mut mass = Posynomial::zero();
    for b in &belief {
        mass = mass.add(b);
    }
    match mass.terms().first() {
        None => belief,
        Some(lead) => {
            let lead = lead.clone();
            belief.into_iter().map(|b| b.div_monomial(&lead)).collect()
        }
    }
}

fn belief_key(belief: &[Posynomial]) -> String {
    let parts: Vec<String> = belief.iter().map(|b| b.to_string()).collect();
    parts.join(";")
}

impl InsertionPmdp {
    /// Convenience construction straight from a model.
    pub fn from_model(m: &Psdes, policy: InsertionPolicy) -> Result<InsertionPmdp, PmdpError> {
        let obs = Observer::build(m);
        let safe = SafeObserver::build(&obs)?;
        InsertionPmdp::build(m, &obs, &safe, policy)
    }

    pub fn build(
        m: &Psdes,
        obs: &Observer,
        safe: &SafeObserver,
        policy: InsertionPolicy,
    ) -> Result<InsertionPmdp, PmdpError> {
        if obs.find_cycle().is_some() {
            return Err(PmdpError::InfiniteObservations);
        }
        let star = m.uo_matrix().star_auto()?;
        let steps: Vec<(EventId, PosyMatrix)> = m
            .observable_events()
            .map(|e| (e, star.mul(m.event_matrix(e))))
            .collect();

        let mut y_states: Vec<SystemState> = Vec::new();
        let mut z_states: Vec<InsertionState> = Vec::new();
        let mut y_out: Vec<Vec<(usize, Posynomial)>> = Vec::new();
        let mut y_index: BTreeMap<(usize, usize, String), usize> = BTreeMap::new();

        let init = m.init_belief();
        let mut init_mass = Posynomial::zero();
        for b in &init {
            init_mass = init_mass.add(b);
        }
        let root = SystemState {
            intruder_node: safe.initial(),
            system_node: obs.initial(),
            belief: canonical_belief(init),
            mass: init_mass,
            history: Vec::new(),
        };
        y_index.insert(
            (root.intruder_node, root.system_node, belief_key(&root.belief)),
            0,
        );
        y_states.push(root);

        let pair_label = |ei: usize, es: usize| {
            format!("({},{})", safe.short_label(ei), obs.short_label(es))
        };

        // queue order equals id order, so y_out grows in lockstep
        let mut at = 0;
        while at < y_states.len() {
            let y = at;
            at += 1;
            let (intruder_node, system_node, belief, history) = {
                let s = &y_states[y];
                (s.intruder_node, s.system_node, s.belief.clone(), s.history.clone())
            };
            let mass_is_one = {
                let mut canon_mass = Posynomial::zero();
                for b in &belief {
                    canon_mass = canon_mass.add(b);
                }
                canon_mass.is_one()
            };
            let agree = obs.estimate(system_node) == safe.estimate(intruder_node);
            let mut outs: Vec<(usize, Posynomial)> = Vec::new();

            for (e, step) in &steps {
                let post = vec_mul(&belief, step);
                let mut cond = Posynomial::zero();
                for p in &post {
                    cond = cond.add(p);
                }
                if cond.is_zero() {
                    continue;
                }
                if !mass_is_one {
                    return Err(PmdpError::GpIncompatible {
                        state: pair_label(intruder_node, system_node),
                        mass: y_states[y].mass.to_string(),
                    });
                }
                let next_system = obs
                    .step(system_node, *e)
                    .expect("nonzero successor mass implies an observer edge");
                let mut z_history = history.clone();
                z_history.push(*e);

                let words = enumerate_insertions(
                    safe,
                    intruder_node,
                    *e,
                    policy,
                    y == 0,
                    agree,
                );
                let canon = canonical_belief(post.clone());
                let canon_key = belief_key(&canon);
                let mut actions: Vec<InsertionAction> = Vec::new();
                let mut group_of: BTreeMap<usize, usize> = BTreeMap::new();
                for w in words {
                    let mut node = intruder_node;
                    for ev in &w {
                        node = safe.step(node, *ev).expect("candidate walk stays safe");
                    }
                    let next_intruder =
                        safe.step(node, *e).expect("candidate walk stays safe");
                    let key = (next_intruder, next_system, canon_key.clone());
                    let succ = match y_index.get(&key) {
                        Some(id) => *id,
                        None => {
                            let id = y_states.len();
                            y_index.insert(key, id);
                            y_states.push(SystemState {
                                intruder_node: next_intruder,
                                system_node: next_system,
                                belief: canon.clone(),
                                mass: cond.clone(),
                                history: z_history.clone(),
                            });
                            id
                        }
                    };
                    let next_group = group_of.len();
                    let group = *group_of.entry(succ).or_insert(next_group);
                    actions.push(InsertionAction { word: w, successor: succ, group });
                }

                let z_id = z_states.len();
                z_states.push(InsertionState {
                    parent: y,
                    pending: *e,
                    belief: post,
                    system_node: next_system,
                    history: z_history,
                    actions,
                });
                outs.push((z_id, cond));
            }
            y_out.push(outs);
        }

        let goals: Vec<usize> =
            (0..y_states.len()).filter(|y| y_out[*y].is_empty()).collect();
        let sinks: Vec<usize> =
            (0..z_states.len()).filter(|z| z_states[*z].actions.is_empty()).collect();

        // labels; belief-differing states with the same estimate pair get a
        // disambiguating suffix
        let mut y_labels: Vec<String> = Vec::with_capacity(y_states.len());
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        for s in &y_states {
            let base = pair_label(s.intruder_node, s.system_node);
            let n = seen.entry(base.clone()).or_insert(0);
            *n += 1;
            if *n == 1 {
                y_labels.push(base);
            } else {
                y_labels.push(format!("{base}#{n}"));
            }
        }
        let z_labels: Vec<String> = z_states
            .iter()
            .map(|z| format!("({},{})", y_labels[z.parent], m.event_name(z.pending)))
            .collect();

        Ok(InsertionPmdp {
            policy,
            event_names: (0..m.n_events()).map(|e| m.event_name(e).to_string()).collect(),
            y_states,
            z_states,
            y_out,
            y_labels,
            z_labels,
            goals,
            sinks,
        })
    }

    pub fn policy(&self) -> InsertionPolicy {
        self.policy
    }

    pub fn n_system_states(&self) -> usize {
        self.y_states.len()
    }

    pub fn n_insertion_states(&self) -> usize {
        self.z_states.len()
    }

    pub fn n_states(&self) -> usize {
        self.y_states.len() + self.z_states.len()
    }

    pub fn initial(&self) -> usize {
        0
    }

    pub fn system_state(&self, y: usize) -> &SystemState {
        &self.y_states[y]
    }

    pub fn insertion_state(&self, z: usize) -> &InsertionState {
        &self.z_states[z]
    }

    /// Outgoing dummy-action transitions of a system state.
    pub fn outgoing(&self, y: usize) -> &[(usize, Posynomial)] {
        &self.y_out[y]
    }

    /// Symbolic sum of a system state's outgoing transition probabilities.
    pub fn outgoing_mass(&self, y: usize) -> Posynomial {
        let mut sum = Posynomial::zero();
        for (_, p) in &self.y_out[y] {
            sum = sum.add(p);
        }
        sum
    }

    pub fn goals(&self) -> &[usize] {
        &self.goals
    }

    pub fn sinks(&self) -> &[usize] {
        &self.sinks
    }

    pub fn is_sink(&self, z: usize) -> bool {
        self.z_states[z].actions.is_empty()
    }

    pub fn system_label(&self, y: usize) -> &str {
        &self.y_labels[y]
    }

    pub fn insertion_label(&self, z: usize) -> &str {
        &self.z_labels[z]
    }

    pub fn system_id(&self, label: &str) -> Option<usize> {
        self.y_labels.iter().position(|l| l == label)
    }

    pub fn insertion_id(&self, label: &str) -> Option<usize> {
        self.z_labels.iter().position(|l| l == label)
    }

    pub fn event_name(&self, e: EventId) -> &str {
        &self.event_names[e]
    }

    /// Display form of an insertion word; the empty word shows as epsilon.
    pub fn word_label(&self, word: &[EventId]) -> String {
        if word.is_empty() {
            "ε".to_string()
        } else {
            word.iter().map(|e| self.event_names[*e].as_str()).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const NETWORK: &str = include_str!("../fixtures/network.psdes");

    fn network_pmdp(policy: InsertionPolicy) -> (Psdes, InsertionPmdp) {
        let m = Psdes::parse(NETWORK).unwrap();
        let pmdp = InsertionPmdp::from_model(&m, policy).unwrap();
        (m, pmdp)
    }

    fn action_words(pmdp: &InsertionPmdp, label: &str) -> Vec<String> {
        let z = pmdp.insertion_id(label).unwrap_or_else(|| panic!("no state {label}"));
        pmdp.insertion_state(z)
            .actions
            .iter()
            .map(|a| pmdp.word_label(&a.word))
            .collect()
    }

    #[test]
    fn network_default_unfolding_counts() {
        let (_, pmdp) = network_pmdp(InsertionPolicy::Parsimonious);
        assert_eq!(pmdp.n_system_states(), 19);
        assert_eq!(pmdp.n_insertion_states(), 26);
        assert_eq!(pmdp.n_states(), 45);
        assert_eq!(pmdp.sinks().len(), 10);
        assert_eq!(pmdp.goals().len(), 1);
        assert_eq!(pmdp.system_label(pmdp.goals()[0]), "(10,10)");
    }

    #[test]
    fn network_initial_state_actions() {
        let (_, pmdp) = network_pmdp(InsertionPolicy::Parsimonious);
        assert_eq!(action_words(&pmdp, "((0,0),a)"), ["ε", "c", "cb"]);
        assert_eq!(action_words(&pmdp, "((0,0),b)"), ["ε", "a", "c", "abc", "cac", "cba"]);
        assert_eq!(action_words(&pmdp, "((0,0),c)"), ["ε", "ab", "ca"]);
    }

    #[test]
    fn network_blocked_state_has_no_actions() {
        let (_, pmdp) = network_pmdp(InsertionPolicy::Parsimonious);
        assert_eq!(action_words(&pmdp, "((10,7),a)"), Vec::<String>::new());
        let z = pmdp.insertion_id("((10,7),a)").unwrap();
        assert!(pmdp.is_sink(z));
    }

    #[test]
    fn network_root_transition_probabilities() {
        let (m, pmdp) = network_pmdp(InsertionPolicy::Parsimonious);
        let b = m.event_id("b").unwrap();
        let (z, prob) = pmdp
            .outgoing(0)
            .iter()
            .find(|(z, _)| pmdp.insertion_state(*z).pending == b)
            .unwrap();
        assert_eq!(pmdp.insertion_label(*z), "((0,0),b)");
        assert_eq!(prob, &Posynomial::var("v3"));
    }

    #[test]
    fn equivalence_groups_mark_identical_successors() {
        let (_, pmdp) = network_pmdp(InsertionPolicy::Parsimonious);
        let z = pmdp.insertion_id("((0,0),b)").unwrap();
        let acts = &pmdp.insertion_state(z).actions;
        let by_word: BTreeMap<String, usize> =
            acts.iter().map(|a| (pmdp.word_label(&a.word), a.group)).collect();
        assert_eq!(by_word["abc"], by_word["cac"]);
        assert_eq!(by_word["abc"], by_word["cba"]);
        assert_ne!(by_word["ε"], by_word["abc"]);
        assert_ne!(by_word["a"], by_word["c"]);
        let succ = acts.iter().find(|a| pmdp.word_label(&a.word) == "abc").unwrap().successor;
        assert_eq!(pmdp.system_label(succ), "(10,7)");
    }

    #[test]
    fn exhaustive_policy_adds_detour_actions() {
        let (_, pmdp) = network_pmdp(InsertionPolicy::Exhaustive);
        assert_eq!(pmdp.n_system_states(), 20);
        assert_eq!(pmdp.n_insertion_states(), 27);
        assert_eq!(action_words(&pmdp, "((2,1),b)"), ["c"]);
        assert_eq!(action_words(&pmdp, "((4,4),a)"), ["ε", "b"]);
        assert!(pmdp.system_id("(6,2)").is_some());
        assert_eq!(pmdp.sinks().len(), 10);
    }

    #[test]
    fn trimmed_policy_blocks_where_only_detours_exist() {
        let (_, pmdp) = network_pmdp(InsertionPolicy::Parsimonious);
        assert_eq!(action_words(&pmdp, "((2,1),b)"), Vec::<String>::new());
        assert_eq!(action_words(&pmdp, "((4,4),a)"), ["ε"]);
        assert!(pmdp.system_id("(6,2)").is_none());
    }

    #[test]
    fn one_state_model_is_its_own_goal() {
        let m = Psdes::parse("psdes\nstates s\nevents a\nobservable a\ninit s 1\n").unwrap();
        let pmdp = InsertionPmdp::from_model(&m, InsertionPolicy::Parsimonious).unwrap();
        assert_eq!(pmdp.n_states(), 1);
        assert_eq!(pmdp.goals(), &[0]);
        assert!(pmdp.sinks().is_empty());
    }

    #[test]
    fn nonmonomial_belief_mass_with_continuation_is_rejected() {
        let text = "psdes\nstates s0 s1 s2 s3 s4\nevents u o p\nobservable o p\n\
                    init s0 1\nparam w1 w2\n\
                    trans s0 u s1 : w1\ntrans s0 o s2 : w2\ntrans s1 o s3\n\
                    trans s2 p s4\ntrans s3 p s4\n";
        let m = Psdes::parse(text).unwrap();
        match InsertionPmdp::from_model(&m, InsertionPolicy::Parsimonious) {
            Err(PmdpError::GpIncompatible { state, mass }) => {
                assert!(state.contains("s2") && state.contains("s3"), "{state}");
                assert_eq!(mass, "w1 + w2");
            }
            other => panic!("expected GP-incompatibility, got {:?}", other.map(|p| p.n_states())),
        }
    }

    #[test]
    fn outgoing_mass_is_one_at_stochastic_valuations() {
        let (m, pmdp) = network_pmdp(InsertionPolicy::Parsimonious);
        for v in m.sample_valuations(5, 11) {
            for y in 0..pmdp.n_system_states() {
                if pmdp.outgoing(y).is_empty() {
                    continue;
                }
                let total = pmdp.outgoing_mass(y).eval(&v).unwrap();
                assert!(
                    (total - 1.0).abs() < 1e-9,
                    "state {} has outgoing mass {total}",
                    pmdp.system_label(y)
                );
            }
        }
    }

    #[test]
    fn action_successors_stay_safe_and_consistent() {
        let (m, pmdp) = network_pmdp(InsertionPolicy::Parsimonious);
        let obs = Observer::build(&m);
        let safe = SafeObserver::build(&obs).unwrap();
        for z in 0..pmdp.n_insertion_states() {
            let zs = pmdp.insertion_state(z);
            for a in &zs.actions {
                let succ = pmdp.system_state(a.successor);
                assert!(succ.intruder_node < safe.n_nodes());
                assert_eq!(succ.system_node, zs.system_node);
            }
        }
        // belief support is contained in the system estimate
        for y in 0..pmdp.n_system_states() {
            let s = pmdp.system_state(y);
            let est = obs.estimate(s.system_node);
            for (q, b) in s.belief.iter().enumerate() {
                if !b.is_zero() {
                    assert!(est.contains(&q), "belief support escapes the estimate");
                }
            }
        }
    }

    #[test]
    fn beliefs_scaled_to_unit_mass_along_the_tree() {
        let (_, pmdp) = network_pmdp(InsertionPolicy::Parsimonious);
        for y in 0..pmdp.n_system_states() {
            let s = pmdp.system_state(y);
            let mut mass = Posynomial::zero();
            for b in &s.belief {
                mass = mass.add(b);
            }
            assert!(mass.is_one(), "state {} has mass {mass}", pmdp.system_label(y));
        }
    }
}
