//! Posynomial algebra over named, strictly positive parameters.
//!
//! A monomial is `c * v1^a1 * ... * vm^am` with `c > 0` and real exponents.
//! A posynomial is a finite sum of monomials; the empty sum is the zero
//! element (a "quasi-posynomial"), which lets transition matrices carry
//! structural zeros while staying closed under addition and multiplication.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::DMatrix;
use thiserror::Error;

/// Name of a parameter (or, in the program encoding, of any positive variable).
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub String);

impl ParamId {
    pub fn new(name: impl Into<String>) -> Self {
        ParamId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ParamId({})", self.0)
    }
}

impl From<&str> for ParamId {
    fn from(s: &str) -> Self {
        ParamId(s.to_string())
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("parameter {0} has no value in the valuation")]
    MissingParam(ParamId),
}

#[derive(Debug, Error)]
pub enum ClosureError {
    #[error("matrix is not nilpotent: no power up to the dimension vanishes")]
    NotNilpotent,
    #[error("matrix has parametric entries; constant inversion requires a parameter-free matrix")]
    NotConstant,
    #[error("spectral radius {0} is not below 1; the Neumann series diverges")]
    SpectralRadius(f64),
    #[error("inversion failed numerically")]
    Singular,
}

#[derive(Debug, Error)]
#[error("invalid valuation: parameter {0} must be strictly positive, got {1}")]
pub struct ValuationError(ParamId, f64);

#[derive(Debug, Error)]
#[error("posynomial syntax error at byte {pos}: {msg}")]
pub struct PosyParseError {
    pub pos: usize,
    pub msg: String,
}

/// One term `coeff * prod v_i^e_i`. Zero exponents are never stored.
#[derive(Clone, Debug, PartialEq)]
pub struct Monomial {
    coeff: f64,
    exps: BTreeMap<ParamId, f64>,
}

impl Monomial {
    pub fn new(coeff: f64, exps: impl IntoIterator<Item = (ParamId, f64)>) -> Self {
        assert!(coeff > 0.0 && coeff.is_finite(), "monomial coefficient must be positive and finite");
        let mut map = BTreeMap::new();
        for (p, e) in exps {
            assert!(e.is_finite(), "monomial exponent must be finite");
            if e != 0.0 {
                *map.entry(p).or_insert(0.0) += e;
            }
        }
        map.retain(|_, e| *e != 0.0);
        Monomial { coeff, exps: map }
    }

    pub fn constant(c: f64) -> Self {
        Monomial::new(c, [])
    }

    pub fn coeff(&self) -> f64 {
        self.coeff
    }

    pub fn exponents(&self) -> impl Iterator<Item = (&ParamId, f64)> {
        self.exps.iter().map(|(p, e)| (p, *e))
    }

    pub fn is_constant(&self) -> bool {
        self.exps.is_empty()
    }

    pub fn eval(&self, v: &Valuation) -> Result<f64, EvalError> {
        let mut acc = self.coeff;
        for (p, e) in &self.exps {
            let x = v.get(p).ok_or_else(|| EvalError::MissingParam(p.clone()))?;
            acc *= x.powf(*e);
        }
        Ok(acc)
    }

    fn mul(&self, other: &Monomial) -> Monomial {
        let mut exps = self.exps.clone();
        for (p, e) in &other.exps {
            let slot = exps.entry(p.clone()).or_insert(0.0);
            *slot += e;
        }
        exps.retain(|_, e| *e != 0.0);
        Monomial { coeff: self.coeff * other.coeff, exps }
    }

    fn div(&self, other: &Monomial) -> Monomial {
        let mut exps = self.exps.clone();
        for (p, e) in &other.exps {
            let slot = exps.entry(p.clone()).or_insert(0.0);
            *slot -= e;
        }
        exps.retain(|_, e| *e != 0.0);
        Monomial { coeff: self.coeff / other.coeff, exps }
    }

    /// Total order on exponent maps; ties on the map never happen after
    /// canonicalization because equal maps are merged.
    fn cmp_exps(&self, other: &Monomial) -> std::cmp::Ordering {
        let mut a = self.exps.iter();
        let mut b = other.exps.iter();
        loop {
            match (a.next(), b.next()) {
                (None, None) => return std::cmp::Ordering::Equal,
                (None, Some(_)) => return std::cmp::Ordering::Less,
                (Some(_), None) => return std::cmp::Ordering::Greater,
                (Some((pa, ea)), Some((pb, eb))) => {
                    let c = pa.cmp(pb).then_with(|| ea.total_cmp(eb));
                    if c != std::cmp::Ordering::Equal {
                        return c;
                    }
                }
            }
        }
    }

    fn same_exps(&self, other: &Monomial) -> bool {
        self.exps.len() == other.exps.len()
            && self
                .exps
                .iter()
                .zip(other.exps.iter())
                .all(|((pa, ea), (pb, eb))| pa == pb && ea.to_bits() == eb.to_bits())
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut wrote = false;
        if self.coeff != 1.0 || self.exps.is_empty() {
            write!(f, "{}", self.coeff)?;
            wrote = true;
        }
        for (p, e) in &self.exps {
            if wrote {
                f.write_str("*")?;
            }
            if *e == 1.0 {
                write!(f, "{p}")?;
            } else {
                write!(f, "{p}^{e}")?;
            }
            wrote = true;
        }
        Ok(())
    }
}

/// Sum of monomials in canonical form: terms sorted by exponent map, terms
/// with identical exponent maps merged. The empty sum is zero.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Posynomial {
    terms: Vec<Monomial>,
}

impl Posynomial {
    pub fn zero() -> Self {
        Posynomial { terms: Vec::new() }
    }

    /// `c = 0` yields the zero element; negative constants are not representable.
    pub fn constant(c: f64) -> Self {
        assert!(c >= 0.0 && c.is_finite(), "posynomial constant must be nonnegative and finite");
        if c == 0.0 {
            Posynomial::zero()
        } else {
            Posynomial { terms: vec![Monomial::constant(c)] }
        }
    }

    pub fn one() -> Self {
        Posynomial::constant(1.0)
    }

    pub fn var(p: impl Into<ParamId>) -> Self {
        Posynomial { terms: vec![Monomial::new(1.0, [(p.into(), 1.0)])] }
    }

    pub fn monomial(m: Monomial) -> Self {
        Posynomial { terms: vec![m] }
    }

    pub fn from_terms(terms: impl IntoIterator<Item = Monomial>) -> Self {
        let mut p = Posynomial { terms: terms.into_iter().collect() };
        p.canonicalize();
        p
    }

    pub fn terms(&self) -> &[Monomial] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Some(c) when the posynomial is the constant c (zero included).
    pub fn as_constant(&self) -> Option<f64> {
        match self.terms.len() {
            0 => Some(0.0),
            1 if self.terms[0].is_constant() => Some(self.terms[0].coeff),
            _ => None,
        }
    }

    pub fn as_monomial(&self) -> Option<&Monomial> {
        match self.terms.len() {
            1 => Some(&self.terms[0]),
            _ => None,
        }
    }

    pub fn is_one(&self) -> bool {
        self.as_constant() == Some(1.0)
    }

    pub fn params(&self) -> impl Iterator<Item = &ParamId> {
        self.terms.iter().flat_map(|m| m.exps.keys())
    }

    fn canonicalize(&mut self) {
        self.terms.sort_by(|a, b| a.cmp_exps(b));
        let mut merged: Vec<Monomial> = Vec::with_capacity(self.terms.len());
        for t in self.terms.drain(..) {
            match merged.last_mut() {
                Some(last) if last.same_exps(&t) => last.coeff += t.coeff,
                _ => merged.push(t),
            }
        }
        self.terms = merged;
    }

    pub fn add(&self, other: &Posynomial) -> Posynomial {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        Posynomial::from_terms(terms)
    }

    pub fn mul(&self, other: &Posynomial) -> Posynomial {
        let mut terms = Vec::with_capacity(self.terms.len() * other.terms.len());
        for a in &self.terms {
            for b in &other.terms {
                terms.push(a.mul(b));
            }
        }
        Posynomial::from_terms(terms)
    }

    pub fn scale(&self, c: f64) -> Posynomial {
        assert!(c >= 0.0 && c.is_finite());
        if c == 0.0 {
            return Posynomial::zero();
        }
        Posynomial {
            terms: self
                .terms
                .iter()
                .map(|m| Monomial { coeff: m.coeff * c, exps: m.exps.clone() })
                .collect(),
        }
    }

    /// Term-wise division by a monomial; the result is again a posynomial.
    pub fn div_monomial(&self, m: &Monomial) -> Posynomial {
        Posynomial { terms: self.terms.iter().map(|t| t.div(m)).collect() }
    }

    pub fn eval(&self, v: &Valuation) -> Result<f64, EvalError> {
        let mut acc = 0.0;
        for t in &self.terms {
            acc += t.eval(v)?;
        }
        Ok(acc)
    }

    pub fn parse(input: &str) -> Result<Posynomial, PosyParseError> {
        parse_posynomial(input)
    }
}

impl fmt::Display for Posynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return f.write_str("0");
        }
        for (i, t) in self.terms.iter().enumerate() {
            if i > 0 {
                f.write_str(" + ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// Strictly positive assignment of parameter values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Valuation {
    values: BTreeMap<ParamId, f64>,
}

impl Valuation {
    pub fn new() -> Self {
        Valuation::default()
    }

    pub fn from_pairs(
        pairs: impl IntoIterator<Item = (ParamId, f64)>,
    ) -> Result<Self, ValuationError> {
        let mut v = Valuation::new();
        for (p, x) in pairs {
            v.set(p, x)?;
        }
        Ok(v)
    }

    pub fn set(&mut self, p: ParamId, x: f64) -> Result<(), ValuationError> {
        if !(x > 0.0 && x.is_finite()) {
            return Err(ValuationError(p, x));
        }
        self.values.insert(p, x);
        Ok(())
    }

    pub fn get(&self, p: &ParamId) -> Option<f64> {
        self.values.get(p).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, f64)> {
        self.values.iter().map(|(p, x)| (p, *x))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Error)]
#[error("{0}")]
pub struct ValuationJsonError(pub String);

/// Reads a valuation from a JSON object of name/value pairs.
pub fn valuation_from_json(text: &str) -> Result<Valuation, ValuationJsonError> {
    let map: BTreeMap<String, f64> =
        serde_json::from_str(text).map_err(|e| ValuationJsonError(e.to_string()))?;
    Valuation::from_pairs(map.into_iter().map(|(k, v)| (ParamId(k), v)))
        .map_err(|e| ValuationJsonError(e.to_string()))
}

/// Writes a valuation as a JSON object with keys in sorted order.
pub fn valuation_to_json(v: &Valuation) -> String {
    let map: BTreeMap<&str, f64> = v.iter().map(|(p, x)| (p.as_str(), x)).collect();
    let mut s = serde_json::to_string_pretty(&map).expect("valuation serializes");
    s.push('\n');
    s
}

/// How to compute the reachability closure `sum_i P^i` of a square matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClosureMode {
    /// `(I - P)^-1` for parameter-free P with spectral radius below 1.
    ConstantInverse,
    /// Truncated series for symbolically nilpotent P.
    NilpotentTruncation,
}

/// Square matrix of posynomials, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PosyMatrix {
    dim: usize,
    entries: Vec<Posynomial>,
}

impl PosyMatrix {
    pub fn zeros(dim: usize) -> Self {
        PosyMatrix { dim, entries: vec![Posynomial::zero(); dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = PosyMatrix::zeros(dim);
        for i in 0..dim {
            *m.get_mut(i, i) = Posynomial::one();
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, r: usize, c: usize) -> &Posynomial {
        &self.entries[r * self.dim + c]
    }

    pub fn get_mut(&mut self, r: usize, c: usize) -> &mut Posynomial {
        &mut self.entries[r * self.dim + c]
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|e| e.is_zero())
    }

    pub fn is_constant(&self) -> bool {
        self.entries.iter().all(|e| e.as_constant().is_some())
    }

    pub fn add(&self, other: &PosyMatrix) -> PosyMatrix {
        assert_eq!(self.dim, other.dim);
        PosyMatrix {
            dim: self.dim,
            entries: self
                .entries
                .iter()
                .zip(other.entries.iter())
                .map(|(a, b)| a.add(b))
                .collect(),
        }
    }

    pub fn mul(&self, other: &PosyMatrix) -> PosyMatrix {
        assert_eq!(self.dim, other.dim);
        let n = self.dim;
        let mut out = PosyMatrix::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                if a.is_zero() {
                    continue;
                }
                for j in 0..n {
                    let b = other.get(k, j);
                    if b.is_zero() {
                        continue;
                    }
                    let prod = a.mul(b);
                    let slot = out.get_mut(i, j);
                    *slot = slot.add(&prod);
                }
            }
        }
        out
    }

    pub fn eval(&self, v: &Valuation) -> Result<DMatrix<f64>, EvalError> {
        let n = self.dim;
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = self.get(i, j).eval(v)?;
            }
        }
        Ok(m)
    }

    /// Reachability closure `I + P + P^2 + ...` under the chosen mode.
    pub fn star(&self, mode: ClosureMode) -> Result<PosyMatrix, ClosureError> {
        match mode {
            ClosureMode::NilpotentTruncation => self.star_nilpotent(),
            ClosureMode::ConstantInverse => self.star_constant(),
        }
    }

    /// Tries nilpotent truncation first, then constant inversion.
    pub fn star_auto(&self) -> Result<PosyMatrix, ClosureError> {
        match self.star_nilpotent() {
            Ok(m) => Ok(m),
            Err(_) => self.star_constant(),
        }
    }

    fn star_nilpotent(&self) -> Result<PosyMatrix, ClosureError> {
        let mut acc = PosyMatrix::identity(self.dim);
        let mut power = self.clone();
        for _ in 0..self.dim {
            if power.is_zero() {
                return Ok(acc);
            }
            acc = acc.add(&power);
            power = power.mul(self);
        }
        if power.is_zero() {
            Ok(acc)
        } else {
            Err(ClosureError::NotNilpotent)
        }
    }

    fn star_constant(&self) -> Result<PosyMatrix, ClosureError> {
        if !self.is_constant() {
            return Err(ClosureError::NotConstant);
        }
        let n = self.dim;
        let m = DMatrix::from_fn(n, n, |i, j| self.get(i, j).as_constant().unwrap());
        let rho = m
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0f64, f64::max);
        if rho >= 1.0 - 1e-12 {
            return Err(ClosureError::SpectralRadius(rho));
        }
        let inv = (DMatrix::identity(n, n) - &m)
            .try_inverse()
            .ok_or(ClosureError::Singular)?;
        let mut out = PosyMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                let x = inv[(i, j)];
                // roundoff can leave tiny negatives where the series is zero
                let x = if x.abs() < 1e-12 { 0.0 } else { x };
                if x < 0.0 {
                    return Err(ClosureError::Singular);
                }
                if x != 0.0 {
                    *out.get_mut(i, j) = Posynomial::constant(x);
                }
            }
        }
        Ok(out)
    }
}

/// Row vector times matrix over posynomials.
pub fn vec_mul(v: &[Posynomial], m: &PosyMatrix) -> Vec<Posynomial> {
    assert_eq!(v.len(), m.dim());
    let n = m.dim();
    let mut out = vec![Posynomial::zero(); n];
    for (q, entry) in v.iter().enumerate() {
        if entry.is_zero() {
            continue;
        }
        for (j, slot) in out.iter_mut().enumerate() {
            let cell = m.get(q, j);
            if !cell.is_zero() {
                *slot = slot.add(&entry.mul(cell));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Expression parsing: posy := term ('+' term)*
//                      term := coeff ('*' factor)* | factor ('*' factor)*
//                      factor := param | param '^' real
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Caret,
}

fn lex(input: &str) -> Result<Vec<(usize, Tok)>, PosyParseError> {
    let bytes = input.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c == '+' {
            toks.push((i, Tok::Plus));
            i += 1;
        } else if c == '-' {
            toks.push((i, Tok::Minus));
            i += 1;
        } else if c == '*' {
            toks.push((i, Tok::Star));
            i += 1;
        } else if c == '^' {
            toks.push((i, Tok::Caret));
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < bytes.len() && ((bytes[i] as char).is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && (bytes[j] as char).is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text = &input[start..i];
            let x: f64 = text.parse().map_err(|_| PosyParseError {
                pos: start,
                msg: format!("invalid number literal {text:?}"),
            })?;
            toks.push((start, Tok::Num(x)));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len()
                && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
            {
                i += 1;
            }
            toks.push((start, Tok::Ident(input[start..i].to_string())));
        } else {
            return Err(PosyParseError { pos: i, msg: format!("unexpected character {c:?}") });
        }
    }
    Ok(toks)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    at: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.at).map(|(_, t)| t)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.at).map(|(p, _)| *p).unwrap_or(self.end)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.at).map(|(_, t)| t.clone());
        self.at += 1;
        t
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, PosyParseError> {
        Err(PosyParseError { pos: self.pos(), msg: msg.into() })
    }

    fn exponent(&mut self) -> Result<f64, PosyParseError> {
        let sign = match self.peek() {
            Some(Tok::Minus) => {
                self.bump();
                -1.0
            }
            Some(Tok::Plus) => {
                self.bump();
                1.0
            }
            _ => 1.0,
        };
        match self.bump() {
            Some(Tok::Num(x)) => Ok(sign * x),
            _ => {
                self.at = self.at.saturating_sub(1);
                self.err("expected a numeric exponent after '^'")
            }
        }
    }

    fn factor(&mut self) -> Result<(ParamId, f64), PosyParseError> {
        match self.bump() {
            Some(Tok::Ident(name)) => {
                if let Some(Tok::Caret) = self.peek() {
                    self.bump();
                    let e = self.exponent()?;
                    Ok((ParamId::new(name), e))
                } else {
                    Ok((ParamId::new(name), 1.0))
                }
            }
            _ => {
                self.at = self.at.saturating_sub(1);
                self.err("expected a parameter name")
            }
        }
    }

    fn term(&mut self) -> Result<Monomial, PosyParseError> {
        let mut coeff = 1.0;
        let mut factors: Vec<(ParamId, f64)> = Vec::new();
        match self.peek() {
            Some(Tok::Minus) => return self.err("coefficient must be positive"),
            Some(Tok::Num(x)) => {
                if *x <= 0.0 {
                    return self.err("coefficient must be positive");
                }
                coeff = *x;
                self.bump();
            }
            Some(Tok::Ident(_)) => {
                factors.push(self.factor()?);
            }
            _ => return self.err("expected a term"),
        }
        while let Some(Tok::Star) = self.peek() {
            self.bump();
            factors.push(self.factor()?);
        }
        Ok(Monomial::new(coeff, factors))
    }
}

pub fn parse_posynomial(input: &str) -> Result<Posynomial, PosyParseError> {
    let toks = lex(input)?;
    if toks.is_empty() {
        return Err(PosyParseError { pos: 0, msg: "empty expression".into() });
    }
    let mut p = Parser { toks, at: 0, end: input.len() };
    let mut terms = vec![p.term()?];
    loop {
        match p.peek() {
            None => break,
            Some(Tok::Plus) => {
                p.bump();
                terms.push(p.term()?);
            }
            Some(_) => return p.err("expected '+' between terms"),
        }
    }
    Ok(Posynomial::from_terms(terms))
}
