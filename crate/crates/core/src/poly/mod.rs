//! Sparse multivariate polynomials over a fixed variable universe.
//!
//! Every polynomial in a problem lives in one [`VarUniverse`] laid out as
//! `(states..., t, disturbances...)`. Terms are keyed by dense exponent
//! vectors and kept in graded-lex order, so iteration, printing and
//! evaluation are reproducible. Coefficients are `f64`; only exact zeros are
//! pruned.

mod monomial;
mod parse;

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub use monomial::{binomial, monomial_basis, Monomial};
pub use parse::parse_poly;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    #[error("syntax error at column {col}: {msg}")]
    Syntax { col: usize, msg: String },
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("invalid exponent `{text}` at column {col}: exponents must be non-negative integers")]
    InvalidExponent { col: usize, text: String },
    #[error("polynomials belong to different variable universes")]
    UniverseMismatch,
    #[error("expected {expected} dynamics entries, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("assignment is missing variable `{0}`")]
    MissingVariable(String),
    #[error("invalid variable universe: {0}")]
    InvalidUniverse(String),
    #[error("non-finite coefficient")]
    NonFinite,
}

/// Ordered variable names shared by every polynomial of a problem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarUniverse {
    state_vars: Vec<String>,
    time_var: String,
    disturbance_vars: Vec<String>,
    names: Vec<String>,
}

impl VarUniverse {
    pub fn new(
        state_vars: Vec<String>,
        time_var: impl Into<String>,
        disturbance_vars: Vec<String>,
    ) -> Result<Arc<Self>, PolyError> {
        let time_var = time_var.into();
        let mut names = state_vars.clone();
        names.push(time_var.clone());
        names.extend(disturbance_vars.iter().cloned());
        for (i, n) in names.iter().enumerate() {
            if !is_identifier(n) {
                return Err(PolyError::InvalidUniverse(format!(
                    "`{n}` is not a valid variable name"
                )));
            }
            if names[..i].contains(n) {
                return Err(PolyError::InvalidUniverse(format!("duplicate variable `{n}`")));
            }
        }
        if state_vars.is_empty() {
            return Err(PolyError::InvalidUniverse("no state variables".into()));
        }
        Ok(Arc::new(VarUniverse {
            state_vars,
            time_var,
            disturbance_vars,
            names,
        }))
    }

    /// Convenience constructor with the canonical time variable `t`.
    pub fn with_states(states: &[&str], disturbances: &[&str]) -> Result<Arc<Self>, PolyError> {
        Self::new(
            states.iter().map(|s| s.to_string()).collect(),
            "t",
            disturbances.iter().map(|s| s.to_string()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn n_states(&self) -> usize {
        self.state_vars.len()
    }

    pub fn n_disturbances(&self) -> usize {
        self.disturbance_vars.len()
    }

    pub fn time_index(&self) -> usize {
        self.state_vars.len()
    }

    pub fn disturbance_index(&self, k: usize) -> usize {
        self.state_vars.len() + 1 + k
    }

    pub fn state_indices(&self) -> Vec<usize> {
        (0..self.n_states()).collect()
    }

    /// State variables followed by time.
    pub fn state_time_indices(&self) -> Vec<usize> {
        (0..=self.n_states()).collect()
    }

    pub fn disturbance_indices(&self) -> Vec<usize> {
        (0..self.n_disturbances())
            .map(|k| self.disturbance_index(k))
            .collect()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    pub fn state_vars(&self) -> &[String] {
        &self.state_vars
    }

    pub fn time_var(&self) -> &str {
        &self.time_var
    }

    pub fn disturbance_vars(&self) -> &[String] {
        &self.disturbance_vars
    }

    /// All names in exponent-vector layout order.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Sparse polynomial with `f64` coefficients.
#[derive(Clone)]
pub struct Polynomial {
    universe: Arc<VarUniverse>,
    terms: BTreeMap<Monomial, f64>,
}

impl PartialEq for Polynomial {
    fn eq(&self, other: &Self) -> bool {
        same_universe(&self.universe, &other.universe) && self.terms == other.terms
    }
}

fn same_universe(a: &Arc<VarUniverse>, b: &Arc<VarUniverse>) -> bool {
    Arc::ptr_eq(a, b) || **a == **b
}

impl Polynomial {
    pub fn zero(universe: &Arc<VarUniverse>) -> Self {
        Polynomial {
            universe: universe.clone(),
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(universe: &Arc<VarUniverse>, c: f64) -> Self {
        let mut p = Self::zero(universe);
        p.add_term(Monomial::one(universe.len()), c);
        p
    }

    /// The polynomial consisting of the single variable at `index`.
    pub fn var(universe: &Arc<VarUniverse>, index: usize) -> Self {
        let mut p = Self::zero(universe);
        p.add_term(Monomial::var(universe.len(), index), 1.0);
        p
    }

    pub fn monomial(universe: &Arc<VarUniverse>, mono: Monomial, coef: f64) -> Self {
        let mut p = Self::zero(universe);
        p.add_term(mono, coef);
        p
    }

    pub fn from_terms(
        universe: &Arc<VarUniverse>,
        terms: impl IntoIterator<Item = (Monomial, f64)>,
    ) -> Self {
        let mut p = Self::zero(universe);
        for (m, c) in terms {
            p.add_term(m, c);
        }
        p
    }

    pub fn universe(&self) -> &Arc<VarUniverse> {
        &self.universe
    }

    /// Accumulates `coef * mono`, dropping the term if it cancels exactly.
    pub fn add_term(&mut self, mono: Monomial, coef: f64) {
        debug_assert_eq!(mono.nvars(), self.universe.len());
        if coef == 0.0 {
            return;
        }
        match self.terms.entry(mono) {
            std::collections::btree_map::Entry::Occupied(mut e) => {
                let v = *e.get() + coef;
                if v == 0.0 {
                    e.remove();
                } else {
                    *e.get_mut() = v;
                }
            }
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(coef);
            }
        }
    }

    pub fn terms(&self) -> impl DoubleEndedIterator<Item = (&Monomial, f64)> + '_ {
        self.terms.iter().map(|(m, &c)| (m, c))
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn coefficient(&self, mono: &Monomial) -> f64 {
        self.terms.get(mono).copied().unwrap_or(0.0)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Total degree; `None` for the zero polynomial.
    pub fn degree(&self) -> Option<u32> {
        self.terms.keys().map(Monomial::degree).max()
    }

    /// Degree counted only in the given variables; `None` for zero.
    pub fn degree_in(&self, vars: &[usize]) -> Option<u32> {
        self.terms.keys().map(|m| m.degree_in(vars)).max()
    }

    /// True when every variable the polynomial mentions is in `vars`.
    pub fn supported_on(&self, vars: &[usize]) -> bool {
        self.terms.keys().all(|m| m.supported_on(vars))
    }

    pub fn max_abs_coefficient(&self) -> f64 {
        self.terms.values().fold(0.0, |a, c| a.max(c.abs()))
    }

    fn check(&self, other: &Polynomial) -> Result<(), PolyError> {
        if same_universe(&self.universe, &other.universe) {
            Ok(())
        } else {
            Err(PolyError::UniverseMismatch)
        }
    }

    pub fn add(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check(other)?;
        let mut out = self.clone();
        for (m, c) in other.terms() {
            out.add_term(m.clone(), c);
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check(other)?;
        let mut out = self.clone();
        for (m, c) in other.terms() {
            out.add_term(m.clone(), -c);
        }
        Ok(out)
    }

    pub fn mul(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check(other)?;
        let mut acc: BTreeMap<Monomial, f64> = BTreeMap::new();
        for (ma, ca) in self.terms() {
            for (mb, cb) in other.terms() {
                *acc.entry(ma.mul(mb)).or_insert(0.0) += ca * cb;
            }
        }
        acc.retain(|_, c| *c != 0.0);
        Ok(Polynomial {
            universe: self.universe.clone(),
            terms: acc,
        })
    }

    pub fn neg(&self) -> Polynomial {
        self.scale(-1.0)
    }

    pub fn scale(&self, factor: f64) -> Polynomial {
        let mut out = Self::zero(&self.universe);
        for (m, c) in self.terms() {
            out.add_term(m.clone(), c * factor);
        }
        out
    }

    pub fn pow(&self, e: u32) -> Result<Polynomial, PolyError> {
        let mut out = Polynomial::constant(&self.universe, 1.0);
        for _ in 0..e {
            out = out.mul(self)?;
        }
        Ok(out)
    }

    /// Formal partial derivative with respect to the named variable.
    pub fn partial(&self, var: &str) -> Result<Polynomial, PolyError> {
        let idx = self
            .universe
            .index_of(var)
            .ok_or_else(|| PolyError::UnknownVariable(var.to_string()))?;
        Ok(self.partial_index(idx))
    }

    pub fn partial_index(&self, idx: usize) -> Polynomial {
        let mut out = Self::zero(&self.universe);
        for (m, c) in self.terms() {
            let e = m.exponent(idx);
            if e > 0 {
                out.add_term(m.with_exponent(idx, e - 1), c * e as f64);
            }
        }
        out
    }

    /// Evaluates at a dense point laid out in universe order.
    pub fn eval(&self, point: &[f64]) -> f64 {
        debug_assert_eq!(point.len(), self.universe.len());
        self.terms().map(|(m, c)| c * m.eval(point)).sum()
    }

    /// Evaluates with named values; only variables that appear in the
    /// polynomial need to be assigned.
    pub fn eval_named(&self, values: &HashMap<&str, f64>) -> Result<f64, PolyError> {
        let names = self.universe.names();
        let mut point = vec![0.0; names.len()];
        let mut used = vec![false; names.len()];
        for m in self.terms.keys() {
            for (i, &e) in m.exponents().iter().enumerate() {
                used[i] |= e > 0;
            }
        }
        for (i, n) in names.iter().enumerate() {
            match values.get(n.as_str()) {
                Some(&v) => point[i] = v,
                None if used[i] => return Err(PolyError::MissingVariable(n.clone())),
                None => {}
            }
        }
        Ok(self.eval(&point))
    }

    /// Substitutes a fixed value for one variable.
    pub fn substitute(&self, idx: usize, value: f64) -> Polynomial {
        let mut out = Self::zero(&self.universe);
        for (m, c) in self.terms() {
            let e = m.exponent(idx);
            out.add_term(m.with_exponent(idx, 0), c * value.powi(e as i32));
        }
        out
    }

    /// Returns `q(z) = p(s_0 z_0, s_1 z_1, ...)`, i.e. every variable is
    /// multiplied by its factor before evaluation.
    pub fn scale_vars(&self, factors: &[f64]) -> Polynomial {
        debug_assert_eq!(factors.len(), self.universe.len());
        let mut out = Self::zero(&self.universe);
        for (m, c) in self.terms() {
            let s: f64 = m
                .exponents()
                .iter()
                .zip(factors)
                .map(|(&e, &f)| f.powi(e as i32))
                .product();
            out.add_term(m.clone(), c * s);
        }
        out
    }

    /// Flattened evaluator for hot loops.
    pub fn evaluator(&self) -> PolyEval {
        PolyEval::new(self)
    }

    /// Canonical text form: terms by descending degree (graded-lex within a
    /// degree), each
    /// written `coeff*var^e*...` with 17 significant digits.
    pub fn to_canonical_string(&self) -> String {
        if self.terms.is_empty() {
            return "0".to_string();
        }
        let names = self.universe.names();
        let mut ordered: Vec<(&Monomial, f64)> = self.terms().collect();
        // stable: ties keep graded-lex order within a degree
        ordered.sort_by_key(|(m, _)| std::cmp::Reverse(m.degree()));
        let mut s = String::new();
        for (i, (m, c)) in ordered.into_iter().enumerate() {
            let neg = c < 0.0;
            if i == 0 {
                if neg {
                    s.push('-');
                }
            } else {
                s.push_str(if neg { " - " } else { " + " });
            }
            s.push_str(&format!("{:.16e}", c.abs()));
            if !m.is_one() {
                s.push('*');
                s.push_str(&m.display_with(names).to_string());
            }
        }
        s
    }
}

impl fmt::Debug for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Polynomial({})", self.to_canonical_string())
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_canonical_string())
    }
}

/// Lie derivative `d/dt psi + grad_x psi . f` along the dynamics.
///
/// `psi` is a polynomial in `(x, t)`, `dynamics` has one entry per state
/// variable; the result is a polynomial in `(x, t, d)`.
pub fn lie_derivative(psi: &Polynomial, dynamics: &[Polynomial]) -> Result<Polynomial, PolyError> {
    let u = psi.universe();
    if dynamics.len() != u.n_states() {
        return Err(PolyError::DimensionMismatch {
            expected: u.n_states(),
            got: dynamics.len(),
        });
    }
    let mut out = psi.partial_index(u.time_index());
    for (i, f) in dynamics.iter().enumerate() {
        let d = psi.partial_index(i);
        if d.is_zero() {
            continue;
        }
        out = out.add(&d.mul(f)?)?;
    }
    Ok(out)
}

/// Polynomial compiled into flat arrays for repeated evaluation.
#[derive(Debug, Clone)]
pub struct PolyEval {
    coefs: Vec<f64>,
    // (variable, exponent) pairs per term, flattened; `offsets[k]..offsets[k+1]`
    factors: Vec<(u16, u16)>,
    offsets: Vec<usize>,
}

impl PolyEval {
    fn new(p: &Polynomial) -> Self {
        let mut coefs = Vec::with_capacity(p.n_terms());
        let mut factors = Vec::new();
        let mut offsets = vec![0];
        for (m, c) in p.terms() {
            coefs.push(c);
            for (v, &e) in m.exponents().iter().enumerate() {
                if e > 0 {
                    factors.push((v as u16, e));
                }
            }
            offsets.push(factors.len());
        }
        PolyEval {
            coefs,
            factors,
            offsets,
        }
    }

    #[inline]
    pub fn eval(&self, point: &[f64]) -> f64 {
        let mut sum = 0.0;
        for (k, &c) in self.coefs.iter().enumerate() {
            let mut v = c;
            for &(var, e) in &self.factors[self.offsets[k]..self.offsets[k + 1]] {
                let x = point[var as usize];
                v *= match e {
                    1 => x,
                    2 => x * x,
                    _ => x.powi(e as i32),
                };
            }
            sum += v;
        }
        sum
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xy() -> Arc<VarUniverse> {
        VarUniverse::with_states(&["x", "y"], &["d"]).unwrap()
    }

    fn p(s: &str, u: &Arc<VarUniverse>) -> Polynomial {
        parse_poly(s, u).unwrap()
    }

    #[test]
    fn difference_of_squares() {
        let u = xy();
        let got = p("x+1", &u).mul(&p("x-1", &u)).unwrap();
        assert_eq!(got, p("x^2 - 1", &u));
    }

    #[test]
    fn additive_identity_and_annihilation() {
        let u = xy();
        let a = p("3*x*y - 2*t + 0.5", &u);
        assert_eq!(a.add(&Polynomial::zero(&u)).unwrap(), a);
        let sq = p("x^2", &u);
        let z = sq.sub(&sq).unwrap();
        assert!(z.is_zero());
        assert_eq!(z.degree(), None);
    }

    #[test]
    fn universe_mismatch_is_rejected() {
        let a = p("x", &xy());
        let other = VarUniverse::with_states(&["x", "z"], &[]).unwrap();
        let b = p("x", &other);
        assert_eq!(a.add(&b), Err(PolyError::UniverseMismatch));
        assert_eq!(a.mul(&b), Err(PolyError::UniverseMismatch));
    }

    #[test]
    fn partial_derivatives() {
        let u = xy();
        assert_eq!(p("x^2*y", &u).partial("x").unwrap(), p("2*x*y", &u));
        assert!(p("x^2", &u).partial("t").unwrap().is_zero());
        // d/dd of the second Van der Pol component
        let f2 = p("0.4*x + 5*(x^2 - (d + 0.2))*y", &u);
        assert_eq!(f2.partial("d").unwrap(), p("-5*y", &u));
        assert!(matches!(
            p("x", &u).partial("w"),
            Err(PolyError::UnknownVariable(_))
        ));
    }

    #[test]
    fn lie_derivative_examples() {
        let u = xy();
        let f = vec![p("-0.5*x - (0.5 + d)*y + 0.5", &u), p("-0.5*y + 1", &u)];
        assert_eq!(
            lie_derivative(&p("t", &u), &f).unwrap(),
            Polynomial::constant(&u, 1.0)
        );
        let contraction = vec![p("-x", &u), p("-y", &u)];
        assert_eq!(
            lie_derivative(&p("x^2 + y^2", &u), &contraction).unwrap(),
            p("-2*x^2 - 2*y^2", &u)
        );
        assert_eq!(
            lie_derivative(&p("x", &u), &f).unwrap(),
            p("-0.5*x - 0.5*y - d*y + 0.5", &u)
        );
        assert!(matches!(
            lie_derivative(&p("x", &u), &f[..1]),
            Err(PolyError::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn evaluation() {
        let u = xy();
        let tr = p("x^2 + y^2 - 0.64", &u);
        // 0.8^2 rounds one ulp away from the literal 0.64
        assert!(tr.eval(&[0.8, 0.0, 0.0, 0.0]).abs() <= 2.0 * f64::EPSILON);
        assert_eq!(Polynomial::zero(&u).eval(&[0.3, -1.0, 2.0, 0.1]), 0.0);
        let g_r = p("1.21 - x^2 - y^2", &u);
        let vals: HashMap<&str, f64> = [("x", 1.1), ("y", 0.0)].into_iter().collect();
        assert!(g_r.eval_named(&vals).unwrap().abs() < 1e-15);
        let missing: HashMap<&str, f64> = [("x", 1.0)].into_iter().collect();
        assert_eq!(
            g_r.eval_named(&missing),
            Err(PolyError::MissingVariable("y".into()))
        );
    }

    #[test]
    fn evaluator_matches_direct_evaluation() {
        let u = xy();
        let q = p("3*x^3*y - 2*t*d + y^5 - 0.25", &u);
        let e = q.evaluator();
        let pt = [0.3, -0.7, 0.25, 0.01];
        assert!((e.eval(&pt) - q.eval(&pt)).abs() < 1e-15);
    }

    #[test]
    fn substitution_and_scaling() {
        let u = xy();
        let q = p("x^2*t + t^2 + y", &u);
        assert_eq!(q.substitute(2, 0.0), p("y", &u));
        assert_eq!(q.substitute(2, 2.0), p("2*x^2 + 4 + y", &u));
        let s = q.scale_vars(&[2.0, 1.0, 0.5, 1.0]);
        assert_eq!(s, p("2*x^2*t + 0.25*t^2 + y", &u));
    }

    #[test]
    fn canonical_string_format() {
        let u = xy();
        let q = p("x^2 + y^2 - 0.64", &u);
        assert_eq!(
            q.to_canonical_string(),
            "1.0000000000000000e0*x^2 + 1.0000000000000000e0*y^2 - 6.4000000000000001e-1"
        );
        assert_eq!(Polynomial::zero(&u).to_canonical_string(), "0");
    }

    #[test]
    fn universe_validation() {
        assert!(VarUniverse::with_states(&["x", "x"], &[]).is_err());
        assert!(VarUniverse::with_states(&["x"], &["t"]).is_err());
        assert!(VarUniverse::with_states(&[], &["d"]).is_err());
        assert!(VarUniverse::with_states(&["1x"], &[]).is_err());
    }
}
