//! Graphviz renderings of observers and insertion unfoldings. Output is a
//! pure function of the structure, so re-exporting an unchanged artifact is
//! byte-identical.

use std::fmt::Write;

use crate::observer::Observer;
use crate::pmdp::InsertionPmdp;

fn quoted(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// Estimate automaton: one node per estimate, revealing estimates shaded,
/// an arrow out of nowhere marking the initial node.
pub fn observer_dot(obs: &Observer) -> String {
    let mut out = String::new();
    out.push_str("digraph observer {\n");
    out.push_str("  rankdir=LR;\n");
    out.push_str("  node [shape=ellipse];\n");
    out.push_str("  init [shape=point, style=invis];\n");
    for n in 0..obs.n_nodes() {
        let style = if obs.is_revealing(n) {
            ", style=filled, fillcolor=gray80"
        } else {
            ""
        };
        writeln!(out, "  n{} [label={}{}];", n, quoted(&obs.short_label(n)), style).unwrap();
    }
    writeln!(out, "  init -> n{};", obs.initial()).unwrap();
    for (from, e, to) in obs.edges() {
        writeln!(out, "  n{} -> n{} [label={}];", from, to, quoted(obs.event_name(e))).unwrap();
    }
    out.push_str("}\n");
    out
}

/// Bipartite unfolding: system states as boxes, insertion states as
/// double-bordered ellipses, blocked insertion states shaded, goal states
/// bold. System transitions carry the event and its probability, insertion
/// transitions the inserted string.
pub fn pmdp_dot(pmdp: &InsertionPmdp) -> String {
    let mut out = String::new();
    out.push_str("digraph insertion_mdp {\n");
    out.push_str("  rankdir=LR;\n");
    out.push_str("  init [shape=point, style=invis];\n");
    for y in 0..pmdp.n_system_states() {
        let bold = if pmdp.goals().contains(&y) { ", penwidth=2" } else { "" };
        writeln!(
            out,
            "  y{} [shape=box, label={}{}];",
            y,
            quoted(pmdp.system_label(y)),
            bold
        )
        .unwrap();
    }
    for z in 0..pmdp.n_insertion_states() {
        let fill = if pmdp.is_sink(z) {
            ", style=filled, fillcolor=gray80"
        } else {
            ""
        };
        writeln!(
            out,
            "  z{} [shape=ellipse, peripheries=2, label={}{}];",
            z,
            quoted(pmdp.insertion_label(z)),
            fill
        )
        .unwrap();
    }
    writeln!(out, "  init -> y{};", pmdp.initial()).unwrap();
    for y in 0..pmdp.n_system_states() {
        for (z, t) in pmdp.outgoing(y) {
            let ev = pmdp.event_name(pmdp.insertion_state(*z).pending);
            let label = if t.is_one() {
                ev.to_string()
            } else {
                format!("{ev} : {t}")
            };
            writeln!(out, "  y{} -> z{} [label={}];", y, z, quoted(&label)).unwrap();
        }
    }
    for z in 0..pmdp.n_insertion_states() {
        for a in &pmdp.insertion_state(z).actions {
            writeln!(
                out,
                "  z{} -> y{} [label={}];",
                z,
                a.successor,
                quoted(&pmdp.word_label(&a.word))
            )
            .unwrap();
        }
    }
    out.push_str("}\n");
    out
}
