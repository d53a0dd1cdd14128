//! Geometric programs: positive variables, a posynomial objective, and
//! posynomial-at-most-one constraints. Solved by the standard exponential
//! change of variables, which turns every posynomial into a log-sum-exp
//! function, followed by a barrier interior-point method with damped Newton
//! steps. Everything is deterministic; there is no randomness in the solver.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::posy::{EvalError, Monomial, ParamId, Posynomial, Valuation};

#[derive(Debug, Error)]
pub enum GpError {
    #[error("duplicate variable {0}")]
    DuplicateVariable(ParamId),
    #[error("undeclared variable {0} in {1}")]
    UnknownVariable(ParamId, String),
    #[error("variable lower bound must be positive, got {0}")]
    BadLowerBound(f64),
}

#[derive(Clone, Debug)]
pub struct GpVariable {
    pub name: ParamId,
    pub lower: f64,
    pub upper: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct GpConstraint {
    pub expr: Posynomial,
    /// Which encoding rule produced the constraint; used in reports.
    pub label: String,
}

/// minimize `objective` subject to every constraint posynomial ≤ 1 and the
/// per-variable bounds, over strictly positive variables.
#[derive(Clone, Debug, Default)]
pub struct GpProblem {
    vars: Vec<GpVariable>,
    index: BTreeMap<ParamId, usize>,
    objective: Posynomial,
    constraints: Vec<GpConstraint>,
}

impl GpProblem {
    pub fn new() -> Self {
        GpProblem::default()
    }

    pub fn add_var(
        &mut self,
        name: impl Into<ParamId>,
        lower: f64,
        upper: Option<f64>,
    ) -> Result<(), GpError> {
        let name = name.into();
        if !(lower > 0.0) {
            return Err(GpError::BadLowerBound(lower));
        }
        if self.index.contains_key(&name) {
            return Err(GpError::DuplicateVariable(name));
        }
        self.index.insert(name.clone(), self.vars.len());
        self.vars.push(GpVariable { name, lower, upper });
        Ok(())
    }

    pub fn has_var(&self, name: &ParamId) -> bool {
        self.index.contains_key(name)
    }

    pub fn variables(&self) -> &[GpVariable] {
        &self.vars
    }

    pub fn constraints(&self) -> &[GpConstraint] {
        &self.constraints
    }

    pub fn objective(&self) -> &Posynomial {
        &self.objective
    }

    fn check_vars(&self, p: &Posynomial, what: &str) -> Result<(), GpError> {
        for v in p.params() {
            if !self.index.contains_key(v) {
                return Err(GpError::UnknownVariable(v.clone(), what.to_string()));
            }
        }
        Ok(())
    }

    pub fn set_objective(&mut self, obj: Posynomial) -> Result<(), GpError> {
        self.check_vars(&obj, "objective")?;
        self.objective = obj;
        Ok(())
    }

    pub fn add_constraint(&mut self, expr: Posynomial, label: impl Into<String>) -> Result<(), GpError> {
        let label = label.into();
        self.check_vars(&expr, &label)?;
        self.constraints.push(GpConstraint { expr, label });
        Ok(())
    }

    /// Plain-text listing of the whole program in the expression grammar.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for v in &self.vars {
            match v.upper {
                Some(u) => s.push_str(&format!("var {} in [{}, {}]\n", v.name, v.lower, u)),
                None => s.push_str(&format!("var {} >= {}\n", v.name, v.lower)),
            }
        }
        s.push_str(&format!("minimize {}\n", self.objective));
        for c in &self.constraints {
            s.push_str(&format!("s.t. [{}] {} <= 1\n", c.label, c.expr));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GpStatus {
    Optimal,
    Feasible,
    Infeasible,
    MaxIterations,
}

impl fmt::Display for GpStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            GpStatus::Optimal => "optimal",
            GpStatus::Feasible => "feasible",
            GpStatus::Infeasible => "infeasible",
            GpStatus::MaxIterations => "max-iterations",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug)]
pub struct GpSolution {
    pub status: GpStatus,
    pub values: Valuation,
    pub objective_value: f64,
    /// Per declared constraint, `f_i(x) - 1`; nonpositive means satisfied.
    pub residuals: Vec<f64>,
    pub newton_iterations: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct SolveOptions {
    pub kkt_tol: f64,
    pub feas_tol: f64,
    /// Barrier duality-gap target m/t.
    pub gap_tol: f64,
    pub t0: f64,
    pub mu: f64,
    /// Newton decrement threshold (lambda^2 / 2).
    pub newton_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            kkt_tol: 1e-6,
            feas_tol: 1e-8,
            gap_tol: 1e-8,
            t0: 1.0,
            mu: 10.0,
            newton_tol: 1e-12,
            max_outer: 60,
            max_inner: 200,
        }
    }
}

/// One posynomial after the change of variables: log sum of exp of affine
/// forms b_k + a_k . y, convex in y.
#[derive(Clone, Debug)]
struct Lse {
    terms: Vec<(f64, Vec<f64>)>,
}

impl Lse {
    fn from_posy(p: &Posynomial, index: &BTreeMap<ParamId, usize>, n: usize) -> Lse {
        let terms = p
            .terms()
            .iter()
            .map(|m| {
                let mut a = vec![0.0; n];
                for (pid, e) in m.exponents() {
                    a[index[pid]] = e;
                }
                (m.coeff().ln(), a)
            })
            .collect();
        Lse { terms }
    }

    fn monomial(b: f64, a: Vec<f64>) -> Lse {
        Lse { terms: vec![(b, a)] }
    }

    fn value(&self, y: &DVector<f64>) -> f64 {
        let mut zmax = f64::NEG_INFINITY;
        for (b, a) in &self.terms {
            let z = b + dot(a, y);
            if z > zmax {
                zmax = z;
            }
        }
        let sum: f64 = self.terms.iter().map(|(b, a)| (b + dot(a, y) - zmax).exp()).sum();
        zmax + sum.ln()
    }

    fn value_grad(&self, y: &DVector<f64>) -> (f64, DVector<f64>) {
        let n = y.len();
        let zs: Vec<f64> = self.terms.iter().map(|(b, a)| b + dot(a, y)).collect();
        let zmax = zs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ws: Vec<f64> = zs.iter().map(|z| (z - zmax).exp()).collect();
        let total: f64 = ws.iter().sum();
        let mut grad = DVector::zeros(n);
        for ((_, a), w) in self.terms.iter().zip(&ws) {
            let w = w / total;
            for (i, ai) in a.iter().enumerate() {
                if *ai != 0.0 {
                    grad[i] += w * ai;
                }
            }
        }
        (zmax + total.ln(), grad)
    }

    /// Value, gradient, and Hessian contribution w_k a_k a_k^T - g g^T.
    fn value_grad_hess(&self, y: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let n = y.len();
        let zs: Vec<f64> = self.terms.iter().map(|(b, a)| b + dot(a, y)).collect();
        let zmax = zs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ws: Vec<f64> = zs.iter().map(|z| (z - zmax).exp()).collect();
        let total: f64 = ws.iter().sum();
        let mut grad = DVector::zeros(n);
        let mut hess = DMatrix::zeros(n, n);
        for ((_, a), w) in self.terms.iter().zip(&ws) {
            let w = w / total;
            for (i, ai) in a.iter().enumerate() {
                if *ai == 0.0 {
                    continue;
                }
                grad[i] += w * ai;
                for (j, aj) in a.iter().enumerate() {
                    if *aj != 0.0 {
                        hess[(i, j)] += w * ai * aj;
                    }
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                hess[(i, j)] -= grad[i] * grad[j];
            }
        }
        (zmax + total.ln(), grad, hess)
    }
}

fn dot(a: &[f64], y: &DVector<f64>) -> f64 {
    a.iter().zip(y.iter()).map(|(ai, yi)| ai * yi).sum()
}

/// The program after the exponential change of variables. Constraint i is
/// satisfied at x iff its log-sum-exp form is nonpositive at y = ln x.
pub struct ConvexForm {
    names: Vec<ParamId>,
    objective: Lse,
    constraints: Vec<(Lse, String)>,
    /// Constant constraints with value above 1 make the program infeasible
    /// before any solving; the offending label is kept for the report.
    pub trivially_infeasible: Option<String>,
}

impl ConvexForm {
    pub fn n_vars(&self) -> usize {
        self.names.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.constraints.len()
    }

    pub fn var_names(&self) -> &[ParamId] {
        &self.names
    }

    pub fn constraint_label(&self, i: usize) -> &str {
        &self.constraints[i].1
    }

    pub fn objective_value(&self, y: &[f64]) -> f64 {
        self.objective.value(&DVector::from_column_slice(y))
    }

    pub fn objective_grad(&self, y: &[f64]) -> Vec<f64> {
        self.objective.value_grad(&DVector::from_column_slice(y)).1.iter().copied().collect()
    }

    pub fn constraint_value(&self, i: usize, y: &[f64]) -> f64 {
        self.constraints[i].0.value(&DVector::from_column_slice(y))
    }

    pub fn constraint_grad(&self, i: usize, y: &[f64]) -> Vec<f64> {
        self.constraints[i].0.value_grad(&DVector::from_column_slice(y)).1.iter().copied().collect()
    }
}

/// Change of variables x = exp(y). Variable bounds become extra monomial
/// constraints; constant constraints are resolved immediately.
pub fn to_convex_form(p: &GpProblem) -> ConvexForm {
    let n = p.vars.len();
    let names: Vec<ParamId> = p.vars.iter().map(|v| v.name.clone()).collect();
    let objective = if p.objective.is_zero() {
        Lse::monomial(0.0, vec![0.0; n])
    } else {
        Lse::from_posy(&p.objective, &p.index, n)
    };
    let mut constraints = Vec::new();
    let mut trivially_infeasible = None;
    for c in &p.constraints {
        match c.expr.as_constant() {
            Some(v) if v <= 1.0 => continue,
            Some(_) => {
                if trivially_infeasible.is_none() {
                    trivially_infeasible = Some(c.label.clone());
                }
            }
            None => constraints.push((Lse::from_posy(&c.expr, &p.index, n), c.label.clone())),
        }
    }
    for (i, v) in p.vars.iter().enumerate() {
        let mut a = vec![0.0; n];
        a[i] = -1.0;
        constraints.push((Lse::monomial(v.lower.ln(), a), format!("lower-bound {}", v.name)));
        if let Some(u) = v.upper {
            let mut a = vec![0.0; n];
            a[i] = 1.0;
            constraints.push((Lse::monomial(-u.ln(), a), format!("upper-bound {}", v.name)));
        }
    }
    ConvexForm { names, objective, constraints, trivially_infeasible }
}

struct Barrier<'a> {
    objective: &'a Lse,
    constraints: &'a [(Lse, String)],
}

impl Barrier<'_> {
    /// t * f0 + phi; None when any constraint is violated.
    fn merit(&self, t: f64, y: &DVector<f64>) -> Option<f64> {
        let mut total = t * self.objective.value(y);
        for (c, _) in self.constraints {
            let v = c.value(y);
            if v >= 0.0 {
                return None;
            }
            total -= (-v).ln();
        }
        Some(total)
    }

    fn grad_hess(&self, t: f64, y: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n = y.len();
        let (_, g0, h0) = self.objective.value_grad_hess(y);
        let mut grad = g0 * t;
        let mut hess = h0 * t;
        for (c, _) in self.constraints {
            let (v, g, h) = c.value_grad_hess(y);
            let inv = 1.0 / (-v);
            grad.axpy(inv, &g, 1.0);
            hess += h * inv;
            for i in 0..n {
                for j in 0..n {
                    hess[(i, j)] += inv * inv * g[i] * g[j];
                }
            }
        }
        (grad, hess)
    }
}

fn cholesky_solve(h: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let n = h.nrows();
    let scale = h.diagonal().amax().max(1.0);
    let mut jitter = 0.0;
    loop {
        let mut m = h.clone();
        if jitter > 0.0 {
            for i in 0..n {
                m[(i, i)] += jitter;
            }
        }
        if let Some(ch) = m.cholesky() {
            return ch.solve(&(-g));
        }
        jitter = if jitter == 0.0 { 1e-12 * scale } else { jitter * 10.0 };
        if jitter > 1e6 * scale {
            // fully regularized fallback: gradient step
            return -g / scale;
        }
    }
}

/// Damped Newton minimization of the barrier merit at fixed t. Returns the
/// iterate and the Newton step count.
fn newton(
    barrier: &Barrier,
    t: f64,
    mut y: DVector<f64>,
    opts: &SolveOptions,
) -> (DVector<f64>, usize) {
    let mut iters = 0;
    for _ in 0..opts.max_inner {
        let (grad, hess) = barrier.grad_hess(t, &y);
        let step = cholesky_solve(&hess, &grad);
        let decrement = -grad.dot(&step) / 2.0;
        if !decrement.is_finite() || decrement <= opts.newton_tol {
            break;
        }
        iters += 1;
        let current = barrier.merit(t, &y).expect("iterate stays strictly feasible");
        let slope = grad.dot(&step);
        let mut alpha = 1.0;
        for _ in 0..100 {
            let cand = &y + &step * alpha;
            match barrier.merit(t, &cand) {
                Some(m) if m <= current + 1e-4 * alpha * slope => {
                    y = cand;
                    break;
                }
                _ => alpha *= 0.5,
            }
        }
        if alpha < 1e-30 {
            break;
        }
    }
    (y, iters)
}

/// Barrier loop on an already strictly feasible start.
fn barrier_minimize(
    barrier: &Barrier,
    y0: DVector<f64>,
    opts: &SolveOptions,
) -> (DVector<f64>, usize, bool) {
    let m = barrier.constraints.len();
    let mut y = y0;
    let mut total_iters = 0;
    if m == 0 {
        let (yy, it) = newton(barrier, 1.0, y, opts);
        return (yy, it, true);
    }
    let mut t = opts.t0;
    for _ in 0..opts.max_outer {
        let (yy, it) = newton(barrier, t, y, opts);
        y = yy;
        total_iters += it;
        if m as f64 / t <= opts.gap_tol {
            return (y, total_iters, true);
        }
        t *= opts.mu;
    }
    (y, total_iters, false)
}

/// Interior-point solve. Phase I (when the default start is infeasible)
/// minimizes an auxiliary scale on the constraint right-hand sides, itself a
/// geometric program with a known interior point.
pub fn solve_gp(p: &GpProblem, opts: &SolveOptions) -> GpSolution {
    let cf = to_convex_form(p);
    let n = cf.n_vars();

    let report = |y: &DVector<f64>, status: GpStatus, iters: usize| -> GpSolution {
        let mut values = Valuation::new();
        for (i, name) in cf.names.iter().enumerate() {
            // the valuation stays total even if an iterate escaped the
            // representable range; residuals then flag the defect honestly
            let x = y[i].exp().clamp(f64::MIN_POSITIVE, f64::MAX);
            let x = if x.is_nan() { 1.0 } else { x };
            values.set(name.clone(), x).expect("clamped value is positive and finite");
        }
        let objective_value = if p.objective.is_zero() {
            0.0
        } else {
            p.objective.eval(&values).unwrap_or(f64::NAN)
        };
        let residuals = p
            .constraints
            .iter()
            .map(|c| c.expr.eval(&values).map(|v| v - 1.0).unwrap_or(f64::NAN))
            .collect();
        GpSolution { status, values, objective_value, residuals, newton_iterations: iters }
    };

    // start at the geometric center of bounded variables
    let mut y0 = DVector::zeros(n);
    for (i, v) in p.vars.iter().enumerate() {
        let x = match v.upper {
            Some(u) => (v.lower * u).sqrt(),
            None => (2.0 * v.lower).max(1.0),
        };
        y0[i] = x.ln();
    }

    if cf.trivially_infeasible.is_some() {
        return report(&y0, GpStatus::Infeasible, 0);
    }

    let barrier = Barrier { objective: &cf.objective, constraints: &cf.constraints };
    let mut total_iters = 0;

    let strictly_feasible =
        |y: &DVector<f64>| cf.constraints.iter().all(|(c, _)| c.value(y) < -1e-12);

    if !strictly_feasible(&y0) {
        // phase I over (y, ln s): minimize s with every f_i / s <= 1
        let m = cf.constraints.len();
        let mut aug: Vec<(Lse, String)> = Vec::with_capacity(m);
        for (c, label) in &cf.constraints {
            let terms = c
                .terms
                .iter()
                .map(|(b, a)| {
                    let mut a2 = a.clone();
                    a2.push(-1.0);
                    (*b, a2)
                })
                .collect();
            aug.push((Lse { terms }, label.clone()));
        }
        let mut obj_a = vec![0.0; n + 1];
        obj_a[n] = 1.0;
        let aug_obj = Lse::monomial(0.0, obj_a);
        let worst = cf
            .constraints
            .iter()
            .map(|(c, _)| c.value(&y0))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut y0s = DVector::zeros(n + 1);
        for i in 0..n {
            y0s[i] = y0[i];
        }
        y0s[n] = worst.max(0.0) + std::f64::consts::LN_2;
        let aug_barrier = Barrier { objective: &aug_obj, constraints: &aug };
        let (ys, iters, _) = barrier_minimize(&aug_barrier, y0s, opts);
        total_iters += iters;
        y0 = DVector::from_iterator(n, ys.iter().take(n).copied());
        if !strictly_feasible(&y0) {
            return report(&y0, GpStatus::Infeasible, total_iters);
        }
    }

    let (y, iters, converged) = barrier_minimize(&barrier, y0, opts);
    total_iters += iters;
    if !converged {
        return report(&y, GpStatus::MaxIterations, total_iters);
    }

    // dual estimates from the final barrier point give a KKT residual
    let m = cf.constraints.len();
    let status = if m == 0 {
        let (_, g0) = cf.objective.value_grad(&y);
        if g0.amax() <= opts.kkt_tol {
            GpStatus::Optimal
        } else {
            GpStatus::Feasible
        }
    } else {
        let t_final = {
            let mut t = opts.t0;
            while m as f64 / t > opts.gap_tol {
                t *= opts.mu;
            }
            t
        };
        let (_, g0) = cf.objective.value_grad(&y);
        let mut station = g0;
        let mut feasible = true;
        for (c, _) in &cf.constraints {
            let (v, g) = c.value_grad(&y);
            if v > opts.feas_tol {
                feasible = false;
            }
            let lambda = 1.0 / (t_final * (-v).max(1e-300));
            station.axpy(lambda, &g, 1.0);
        }
        if !feasible {
            GpStatus::MaxIterations
        } else if station.amax() <= opts.kkt_tol {
            GpStatus::Optimal
        } else {
            GpStatus::Feasible
        }
    };
    report(&y, status, total_iters)
}

#[derive(Clone, Debug)]
pub struct FeasibilityEntry {
    pub label: String,
    pub value: f64,
    /// `value - 1`; positive means violated.
    pub residual: f64,
}

#[derive(Clone, Debug)]
pub struct FeasibilityReport {
    pub entries: Vec<FeasibilityEntry>,
    pub max_violation: f64,
}

impl FeasibilityReport {
    pub fn feasible(&self, tol: f64) -> bool {
        self.max_violation <= tol
    }

    pub fn worst(&self) -> Option<&FeasibilityEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.residual.total_cmp(&b.residual))
    }
}

/// Evaluates every constraint and bound at a candidate point.
pub fn check_feasibility(p: &GpProblem, cand: &Valuation) -> Result<FeasibilityReport, EvalError> {
    let mut entries = Vec::new();
    for c in &p.constraints {
        let value = c.expr.eval(cand)?;
        entries.push(FeasibilityEntry { label: c.label.clone(), value, residual: value - 1.0 });
    }
    for v in &p.vars {
        let x = cand
            .get(&v.name)
            .ok_or_else(|| EvalError::MissingParam(v.name.clone()))?;
        entries.push(FeasibilityEntry {
            label: format!("lower-bound {}", v.name),
            value: v.lower / x,
            residual: v.lower / x - 1.0,
        });
        if let Some(u) = v.upper {
            entries.push(FeasibilityEntry {
                label: format!("upper-bound {}", v.name),
                value: x / u,
                residual: x / u - 1.0,
            });
        }
    }
    let max_violation = entries.iter().map(|e| e.residual).fold(0.0f64, f64::max);
    Ok(FeasibilityReport { entries, max_violation })
}

/// Convenience: 1 / x as a posynomial.
pub fn reciprocal(name: impl Into<ParamId>) -> Posynomial {
    Posynomial::monomial(Monomial::new(1.0, [(name.into(), -1.0)]))
}
