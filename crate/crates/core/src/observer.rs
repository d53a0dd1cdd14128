//! Natural projection and the observer automaton: the intruder's
//! deterministic view of the system, its revealing estimates, and the safe
//! sub-observer whose language is exactly the strings that never reveal the
//! secret.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::model::{EventId, Psdes, StateId};

/// Intruder state estimate: a nonempty, canonically ordered set of states.
pub type Estimate = BTreeSet<StateId>;

#[derive(Debug, Error)]
pub enum ObserverError {
    #[error("secret revealed at start: the initial estimate contains only secret states")]
    SecretRevealedAtStart,
}

/// Natural projection: keep observable events, drop the rest.
pub fn project(m: &Psdes, w: &[EventId]) -> Vec<EventId> {
    w.iter()
        .map(|e| {
            assert!(*e < m.n_events(), "unknown event id {e}");
            *e
        })
        .filter(|e| m.is_observable(*e))
        .collect()
}

/// Deterministic automaton over observable events whose nodes are state
/// estimates. Node 0 is the initial estimate; the edge relation is partial.
#[derive(Clone, Debug, PartialEq)]
pub struct Observer {
    alphabet: Vec<EventId>,
    nodes: Vec<Estimate>,
    edges: BTreeMap<(usize, EventId), usize>,
    revealing: BTreeSet<usize>,
    state_labels: Vec<String>,
    event_names: Vec<String>,
}

impl Observer {
    /// Standard subset construction with unobservable closure before the
    /// initial estimate and after every observable step.
    pub fn build(m: &Psdes) -> Observer {
        let n = m.n_states();
        let mut uo_adj: Vec<Vec<StateId>> = vec![Vec::new(); n];
        for t in m.transitions() {
            if !m.is_observable(t.event) {
                uo_adj[t.from].push(t.to);
            }
        }
        let closure = |seed: &BTreeSet<StateId>| -> Estimate {
            let mut seen: Estimate = seed.clone();
            let mut work: Vec<StateId> = seed.iter().copied().collect();
            while let Some(q) = work.pop() {
                for r in &uo_adj[q] {
                    if seen.insert(*r) {
                        work.push(*r);
                    }
                }
            }
            seen
        };

        let alphabet: Vec<EventId> = m.observable_events().collect();
        let initial = closure(&m.init_support().collect());
        let mut nodes = vec![initial];
        let mut index: BTreeMap<Estimate, usize> = BTreeMap::new();
        index.insert(nodes[0].clone(), 0);
        let mut edges = BTreeMap::new();
        let mut work = VecDeque::from([0usize]);
        while let Some(u) = work.pop_front() {
            for &e in &alphabet {
                let mat = m.event_matrix(e);
                let mut moved: BTreeSet<StateId> = BTreeSet::new();
                for &q in &nodes[u] {
                    for to in 0..n {
                        if !mat.get(q, to).is_zero() {
                            moved.insert(to);
                        }
                    }
                }
                if moved.is_empty() {
                    continue;
                }
                let est = closure(&moved);
                let v = match index.get(&est) {
                    Some(v) => *v,
                    None => {
                        let v = nodes.len();
                        nodes.push(est.clone());
                        index.insert(est, v);
                        work.push_back(v);
                        v
                    }
                };
                edges.insert((u, e), v);
            }
        }

        let revealing = nodes
            .iter()
            .enumerate()
            .filter(|(_, est)| !est.is_empty() && est.iter().all(|q| m.secret().contains(q)))
            .map(|(i, _)| i)
            .collect();

        Observer {
            alphabet,
            nodes,
            edges,
            revealing,
            state_labels: (0..n).map(|q| m.state_label(q).to_string()).collect(),
            event_names: (0..m.n_events()).map(|e| m.event_name(e).to_string()).collect(),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn initial(&self) -> usize {
        0
    }

    pub fn alphabet(&self) -> &[EventId] {
        &self.alphabet
    }

    pub fn estimate(&self, node: usize) -> &Estimate {
        &self.nodes[node]
    }

    pub fn is_revealing(&self, node: usize) -> bool {
        self.revealing.contains(&node)
    }

    pub fn revealing_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.revealing.iter().copied()
    }

    pub fn step(&self, node: usize, e: EventId) -> Option<usize> {
        self.edges.get(&(node, e)).copied()
    }

    /// Walks a string of observable events; None on an undefined edge.
    pub fn run(&self, from: usize, w: &[EventId]) -> Option<usize> {
        let mut at = from;
        for e in w {
            at = self.step(at, *e)?;
        }
        Some(at)
    }

    pub fn accepts(&self, w: &[EventId]) -> bool {
        self.run(0, w).is_some()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, EventId, usize)> + '_ {
        self.edges.iter().map(|((u, e), v)| (*u, *e, *v))
    }

    pub fn out_edges(&self, node: usize) -> impl Iterator<Item = (EventId, usize)> + '_ {
        self.edges
            .range((node, 0)..(node + 1, 0))
            .map(|((_, e), v)| (*e, *v))
    }

    pub fn has_out_edges(&self, node: usize) -> bool {
        self.out_edges(node).next().is_some()
    }

    pub fn node_label(&self, node: usize) -> String {
        let inner: Vec<&str> =
            self.nodes[node].iter().map(|q| self.state_labels[*q].as_str()).collect();
        format!("{{{}}}", inner.join(","))
    }

    /// Like node_label, but singleton estimates print as the bare state.
    pub fn short_label(&self, node: usize) -> String {
        if self.nodes[node].len() == 1 {
            let q = *self.nodes[node].iter().next().unwrap();
            self.state_labels[q].clone()
        } else {
            self.node_label(node)
        }
    }

    pub fn event_name(&self, e: EventId) -> &str {
        &self.event_names[e]
    }

    pub fn string_label(&self, w: &[EventId]) -> String {
        w.iter().map(|e| self.event_names[*e].as_str()).collect()
    }

    /// Any directed cycle, as a node path whose last entry repeats the first;
    /// None when the graph is acyclic (the observable language is finite).
    pub fn find_cycle(&self) -> Option<Vec<usize>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Color {
            White,
            Gray,
            Black,
        }
        let mut color = vec![Color::White; self.nodes.len()];
        let mut stack: Vec<usize> = Vec::new();
        for start in 0..self.nodes.len() {
            if color[start] != Color::White {
                continue;
            }
            // entries: (node, iterator position over successors)
            let mut dfs: Vec<(usize, Vec<usize>, usize)> = Vec::new();
            let succs = |u: usize| -> Vec<usize> { self.out_edges(u).map(|(_, v)| v).collect() };
            color[start] = Color::Gray;
            stack.push(start);
            dfs.push((start, succs(start), 0));
            while let Some((u, sv, i)) = dfs.last_mut() {
                if *i < sv.len() {
                    let v = sv[*i];
                    *i += 1;
                    match color[v] {
                        Color::Gray => {
                            let pos = stack.iter().position(|x| *x == v).unwrap();
                            let mut cycle: Vec<usize> = stack[pos..].to_vec();
                            cycle.push(v);
                            return Some(cycle);
                        }
                        Color::White => {
                            color[v] = Color::Gray;
                            stack.push(v);
                            let s = succs(v);
                            dfs.push((v, s, 0));
                        }
                        Color::Black => {}
                    }
                } else {
                    color[*u] = Color::Black;
                    stack.pop();
                    dfs.pop();
                }
            }
        }
        None
    }

    /// Shortest observed string reaching each node, by breadth-first search.
    fn shortest_strings(&self) -> Vec<Option<Vec<EventId>>> {
        let mut paths: Vec<Option<Vec<EventId>>> = vec![None; self.nodes.len()];
        paths[0] = Some(Vec::new());
        let mut work = VecDeque::from([0usize]);
        while let Some(u) = work.pop_front() {
            let base = paths[u].clone().unwrap();
            for (e, v) in self.out_edges(u) {
                if paths[v].is_none() {
                    let mut w = base.clone();
                    w.push(e);
                    paths[v] = Some(w);
                    work.push_back(v);
                }
            }
        }
        paths
    }
}

/// Opacity verdict: opaque iff no revealing estimate is reachable.
#[derive(Clone, Debug)]
pub struct CsoVerdict {
    pub opaque: bool,
    /// Shortest observed string per revealing node, sorted by display form.
    pub witnesses: Vec<Vec<EventId>>,
}

pub fn check_cso(obs: &Observer) -> CsoVerdict {
    let paths = obs.shortest_strings();
    let mut witnesses: Vec<Vec<EventId>> = obs
        .revealing_nodes()
        .filter_map(|n| paths[n].clone())
        .collect();
    witnesses.sort_by_key(|w| (w.len(), obs.string_label(w)));
    CsoVerdict { opaque: witnesses.is_empty(), witnesses }
}

/// Observer with every revealing node pruned; its language is the set of
/// observed strings that keep the secret hidden at every prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct SafeObserver(Observer);

impl std::ops::Deref for SafeObserver {
    type Target = Observer;

    fn deref(&self) -> &Observer {
        &self.0
    }
}

impl SafeObserver {
    pub fn build(obs: &Observer) -> Result<SafeObserver, ObserverError> {
        if obs.is_revealing(0) {
            return Err(ObserverError::SecretRevealedAtStart);
        }
        // reachability through non-revealing nodes only
        let mut keep = vec![false; obs.n_nodes()];
        keep[0] = true;
        let mut work = VecDeque::from([0usize]);
        let mut order = vec![0usize];
        while let Some(u) = work.pop_front() {
            for (_, v) in obs.out_edges(u) {
                if !obs.is_revealing(v) && !keep[v] {
                    keep[v] = true;
                    order.push(v);
                    work.push_back(v);
                }
            }
        }
        let mut remap = vec![usize::MAX; obs.n_nodes()];
        for (new, old) in order.iter().enumerate() {
            remap[*old] = new;
        }
        let nodes = order.iter().map(|old| obs.nodes[*old].clone()).collect();
        let mut edges = BTreeMap::new();
        for (u, e, v) in obs.edges() {
            if keep[u] && keep[v] && !obs.is_revealing(v) {
                edges.insert((remap[u], e), remap[v]);
            }
        }
        Ok(SafeObserver(Observer {
            alphabet: obs.alphabet.clone(),
            nodes,
            edges,
            revealing: BTreeSet::new(),
            state_labels: obs.state_labels.clone(),
            event_names: obs.event_names.clone(),
        }))
    }

    pub fn automaton(&self) -> &Observer {
        &self.0
    }
}
