//! Randomized invariants checked against brute-force oracles.

mod common;

use common::{
    estimates_by_enumeration, observable_strings, parametric_sketch, sketch, valuations_for,
};
use opacsyn::gp::{to_convex_form, GpProblem};
use opacsyn::observer::{check_cso, Observer, SafeObserver};
use opacsyn::opacity::{brute_force_opacity, quantify_opacity};
use opacsyn::posy::{Monomial, ParamId, Posynomial, Valuation};
use opacsyn::synthesis::{synthesize, SynthesisOptions, SynthesisSpec, SynthesisStatus};
use opacsyn::Psdes;
use proptest::prelude::*;

#[test]
fn observer_estimates_match_run_enumeration() {
    for seed in 0..60 {
        let m = sketch(seed).nfa();
        let obs = Observer::build(&m);
        let oracle = estimates_by_enumeration(&m);
        for w in observable_strings(&m, m.n_states()) {
            let node = obs.run(obs.initial(), &w);
            match oracle.get(&w) {
                Some(est) => {
                    let node = node.unwrap_or_else(|| {
                        panic!("seed {seed}: observer rejects reachable string {w:?}")
                    });
                    assert_eq!(obs.estimate(node), est, "seed {seed}, string {w:?}");
                }
                None => {
                    assert!(node.is_none(), "seed {seed}: observer accepts infeasible {w:?}")
                }
            }
        }
    }
}

#[test]
fn opacity_verdict_matches_the_definitional_test() {
    for seed in 0..80 {
        let m = sketch(seed).nfa();
        let obs = Observer::build(&m);
        let verdict = check_cso(&obs);
        let oracle = estimates_by_enumeration(&m);
        let any_revealing = oracle.values().any(|est| est.iter().all(|q| m.secret().contains(q)));
        assert_eq!(verdict.opaque, !any_revealing, "seed {seed}");
        for w in &verdict.witnesses {
            let est = &oracle[w];
            assert!(
                est.iter().all(|q| m.secret().contains(q)),
                "seed {seed}: witness {w:?} does not pin the estimate into the secret set"
            );
        }
    }
}

#[test]
fn safe_language_is_exactly_the_never_revealing_prefixes() {
    for seed in 0..80 {
        let m = sketch(seed).nfa();
        let obs = Observer::build(&m);
        let safe = SafeObserver::build(&obs).expect("sketch initial states are never secret");
        let oracle = estimates_by_enumeration(&m);
        for w in observable_strings(&m, m.n_states()) {
            let every_prefix_safe = (0..=w.len()).all(|k| {
                oracle.get(&w[..k]).is_some_and(|est| !est.iter().all(|q| m.secret().contains(q)))
            });
            assert_eq!(safe.accepts(&w), every_prefix_safe, "seed {seed}, string {w:?}");
            if safe.accepts(&w) {
                for k in 0..w.len() {
                    assert!(safe.accepts(&w[..k]), "prefix closure broken at seed {seed}");
                }
            }
        }
    }
}

#[test]
fn exact_and_enumerated_opacity_agree() {
    let mut checked = 0;
    for seed in 0..60 {
        let m = sketch(seed).stochastic(false);
        for v in valuations_for(&m, seed, 2) {
            let fast = quantify_opacity(&m, &v).unwrap();
            let slow = brute_force_opacity(&m, &v, m.n_states() + 1).unwrap();
            assert!(
                (fast.p_reveal - slow.p_reveal).abs() <= 1e-9,
                "seed {seed}: {} vs {}",
                fast.p_reveal,
                slow.p_reveal
            );
            assert!((-1e-9..=1.0 + 1e-9).contains(&fast.p_cso), "seed {seed}");
            assert!(fast.residual <= 1e-10 && slow.residual <= 1e-10, "seed {seed}");
            if let (Some(a), Some(b)) = (&fast.revealing_strings, &slow.revealing_strings) {
                assert_eq!(a, b, "seed {seed}");
            }
            checked += 1;
        }
    }
    for seed in 0..12 {
        let m = parametric_sketch(seed);
        for v in valuations_for(&m, seed, 2) {
            let fast = quantify_opacity(&m, &v).unwrap();
            let slow = brute_force_opacity(&m, &v, m.n_states() + 1).unwrap();
            assert!(
                (fast.p_reveal - slow.p_reveal).abs() <= 1e-9,
                "parametric seed {seed}: {} vs {}",
                fast.p_reveal,
                slow.p_reveal
            );
            checked += 1;
        }
    }
    assert!(checked >= 50, "only {checked} fixture evaluations");
}

#[test]
fn enlarging_the_secret_never_raises_the_opacity_level() {
    let mut compared = 0;
    for seed in 0..60 {
        let sk = sketch(seed);
        if sk.extra_secret.is_none() {
            continue;
        }
        let v = Valuation::new();
        let narrow = quantify_opacity(&sk.stochastic(false), &v).unwrap();
        let wide = quantify_opacity(&sk.stochastic(true), &v).unwrap();
        assert!(
            wide.p_cso <= narrow.p_cso + 1e-9,
            "seed {seed}: opacity rose from {} to {}",
            narrow.p_cso,
            wide.p_cso
        );
        compared += 1;
    }
    assert!(compared >= 40, "only {compared} comparisons");
}

#[test]
fn initial_state_splitting_transform_preserves_opacity() {
    for seed in 0..40 {
        let m = sketch(seed).stochastic(false);
        let t = m.with_unique_initial();
        let v = Valuation::new();
        let a = quantify_opacity(&m, &v).unwrap();
        let b = quantify_opacity(&t, &v).unwrap();
        assert!(
            (a.p_reveal - b.p_reveal).abs() <= 1e-9,
            "seed {seed}: {} vs {}",
            a.p_reveal,
            b.p_reveal
        );
        // the observable language is untouched by the transform
        let la: Vec<_> = estimates_by_enumeration(&m).into_keys().collect();
        let lb: Vec<_> = estimates_by_enumeration(&t).into_keys().collect();
        assert_eq!(la, lb, "seed {seed}");
    }
}

const PARAMS: [&str; 3] = ["x", "y", "z"];

fn posy(terms: Vec<(f64, Vec<f64>)>) -> Posynomial {
    Posynomial::from_terms(terms.into_iter().map(|(c, exps)| {
        Monomial::new(c, exps.into_iter().enumerate().map(|(i, a)| (ParamId::from(PARAMS[i]), a)))
    }))
}

fn valuation(vals: &[f64]) -> Valuation {
    Valuation::from_pairs(vals.iter().enumerate().map(|(i, x)| (ParamId::from(PARAMS[i]), *x)))
        .unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn term_strategy() -> impl Strategy<Value = (f64, Vec<f64>)> {
    (0.01f64..10.0, prop::collection::vec(-2.0f64..2.0, 3))
}

proptest! {
    #[test]
    fn evaluation_commutes_with_sum_and_product(
        f in prop::collection::vec(term_strategy(), 0..4),
        g in prop::collection::vec(term_strategy(), 0..4),
        vals in prop::collection::vec(0.05f64..20.0, 3),
    ) {
        let (f, g) = (posy(f), posy(g));
        let v = valuation(&vals);
        let (fe, ge) = (f.eval(&v).unwrap(), g.eval(&v).unwrap());
        prop_assert!(rel_err(f.add(&g).eval(&v).unwrap(), fe + ge) <= 1e-12);
        prop_assert!(rel_err(f.mul(&g).eval(&v).unwrap(), fe * ge) <= 1e-12);
    }

    #[test]
    fn nonzero_posynomials_evaluate_positive(
        f in prop::collection::vec(term_strategy(), 1..5),
        vals in prop::collection::vec(0.05f64..20.0, 3),
    ) {
        prop_assert!(posy(f).eval(&valuation(&vals)).unwrap() > 0.0);
    }

    #[test]
    fn log_space_constraints_agree_with_original_space(
        cs in prop::collection::vec(
            prop::collection::vec(term_strategy(), 1..4)
                .prop_map(posy)
                .prop_filter("needs a variable", |p| p.as_constant().is_none()),
            1..4,
        ),
        vals in prop::collection::vec(0.05f64..20.0, 3),
    ) {
        let mut p = GpProblem::new();
        for name in PARAMS {
            p.add_var(name, 1e-6, None).unwrap();
        }
        for (i, c) in cs.iter().enumerate() {
            p.add_constraint(c.clone(), format!("c{i}")).unwrap();
        }
        let cf = to_convex_form(&p);
        let v = valuation(&vals);
        let y: Vec<f64> = vals.iter().map(|x| x.ln()).collect();
        for (i, c) in cs.iter().enumerate() {
            let fx = c.eval(&v).unwrap();
            prop_assume!(rel_err(fx, 1.0) > 1e-9);
            prop_assert_eq!(
                fx <= 1.0,
                cf.constraint_value(i, &y) <= 0.0,
                "constraint {} at f = {}", i, fx
            );
        }
        // bound rows sit after the posynomial rows; all hold at interior points
        for i in cs.len()..cf.n_constraints() {
            prop_assert!(cf.constraint_value(i, &y) < 0.0);
        }
    }
}

/// A solver answer only counts against the pipeline when its own premises
/// hold: parameter rows and scheduler masses tight at the returned point.
fn premises_hold(m: &Psdes, r: &opacsyn::synthesis::SynthesisResult) -> bool {
    let (Some(v), Some(raw)) = (&r.valuation, &r.raw_scheduler) else {
        return false;
    };
    for q in 0..m.n_states() {
        let s = m.row_sum(q).eval(v).unwrap();
        if s.abs() > 1e-6 && (s - 1.0).abs() > 1e-6 {
            return false;
        }
    }
    raw.choices.keys().all(|state| (raw.mass(state) - 1.0).abs() <= 1e-6)
}

#[test]
fn feasible_tight_solutions_verify() {
    let mut verified = 0;
    for seed in 0..10 {
        let m = parametric_sketch(seed);
        for (gamma, lambda) in [(0.0, 1.0), (0.3, 0.7)] {
            let spec = SynthesisSpec::new(gamma, lambda).unwrap();
            let r = synthesize(&m, &spec, &SynthesisOptions::default()).unwrap();
            match r.status {
                SynthesisStatus::Verified => verified += 1,
                SynthesisStatus::Infeasible => {}
                SynthesisStatus::FeasibleUnverified => {
                    assert!(
                        !premises_hold(&m, &r),
                        "seed {seed}, gamma {gamma}, lambda {lambda}: \
                         tight feasible solution failed verification: {}",
                        r.detail
                    );
                }
            }
        }
    }
    assert!(verified >= 10, "only {verified} verified runs");
}
