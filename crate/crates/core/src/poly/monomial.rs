use std::cmp::Ordering;
use std::fmt;

/// Dense exponent vector, one slot per universe variable.
///
/// Ordering is graded-lex: lower total degree first, then the monomial with
/// the larger exponent in the earliest differing variable comes first. With
/// variables `(x, y)` this sorts as `1, x, y, x^2, x*y, y^2, ...`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Monomial(Vec<u16>);

impl Monomial {
    pub fn one(nvars: usize) -> Self {
        Monomial(vec![0; nvars])
    }

    pub fn from_exponents(exps: Vec<u16>) -> Self {
        Monomial(exps)
    }

    /// `x_var^1` in a universe of `nvars` variables.
    pub fn var(nvars: usize, var: usize) -> Self {
        let mut e = vec![0; nvars];
        e[var] = 1;
        Monomial(e)
    }

    pub fn exponents(&self) -> &[u16] {
        &self.0
    }

    pub fn nvars(&self) -> usize {
        self.0.len()
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().map(|&e| e as u32).sum()
    }

    pub fn exponent(&self, var: usize) -> u16 {
        self.0[var]
    }

    pub fn is_one(&self) -> bool {
        self.0.iter().all(|&e| e == 0)
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        debug_assert_eq!(self.0.len(), other.0.len());
        Monomial(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// Multiplies `self * other` into `out` without allocating.
    pub fn mul_into(&self, other: &Monomial, out: &mut Monomial) {
        out.0.clear();
        out.0.extend(self.0.iter().zip(&other.0).map(|(a, b)| a + b));
    }

    /// Total degree restricted to the given variable indices.
    pub fn degree_in(&self, vars: &[usize]) -> u32 {
        vars.iter().map(|&v| self.0[v] as u32).sum()
    }

    /// True when every variable with a nonzero exponent is in `vars`.
    pub fn supported_on(&self, vars: &[usize]) -> bool {
        self.0
            .iter()
            .enumerate()
            .all(|(i, &e)| e == 0 || vars.contains(&i))
    }

    pub fn with_exponent(&self, var: usize, exp: u16) -> Monomial {
        let mut e = self.0.clone();
        e[var] = exp;
        Monomial(e)
    }

    /// Evaluates the monomial at a dense point.
    pub fn eval(&self, point: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(point)
            .filter(|(&e, _)| e != 0)
            .map(|(&e, &x)| x.powi(e as i32))
            .product()
    }

    /// Renders as `x^2*y` using the given variable names; `1` for the unit monomial.
    pub fn display_with<'a>(&'a self, names: &'a [String]) -> MonomialDisplay<'a> {
        MonomialDisplay { mono: self, names }
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.0.cmp(&self.0))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Monomial{:?}", self.0)
    }
}

pub struct MonomialDisplay<'a> {
    mono: &'a Monomial,
    names: &'a [String],
}

impl fmt::Display for MonomialDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (i, &e) in self.mono.0.iter().enumerate() {
            if e == 0 {
                continue;
            }
            if !first {
                f.write_str("*")?;
            }
            first = false;
            f.write_str(&self.names[i])?;
            if e > 1 {
                write!(f, "^{e}")?;
            }
        }
        if first {
            f.write_str("1")?;
        }
        Ok(())
    }
}

/// All monomials of total degree `<= degree` in the variables `vars`
/// (indices into a universe of `nvars` variables), in graded-lex order.
///
/// The count is `C(|vars| + degree, degree)`.
pub fn monomial_basis(nvars: usize, vars: &[usize], degree: u32) -> Vec<Monomial> {
    let mut out = Vec::new();
    let mut exps = vec![0u16; vars.len()];
    for d in 0..=degree {
        compositions(&mut exps, 0, d, &mut |e| {
            let mut full = vec![0u16; nvars];
            for (k, &v) in vars.iter().enumerate() {
                full[v] = e[k];
            }
            out.push(Monomial(full));
        });
    }
    // Compositions are generated with the first variable's exponent
    // decreasing, which already matches graded-lex; sort anyway so the
    // contract holds for unsorted `vars`.
    out.sort();
    out
}

fn compositions(exps: &mut [u16], pos: usize, remaining: u32, emit: &mut dyn FnMut(&[u16])) {
    if exps.is_empty() {
        if remaining == 0 {
            emit(exps);
        }
        return;
    }
    if pos == exps.len() - 1 {
        exps[pos] = remaining as u16;
        emit(exps);
        exps[pos] = 0;
        return;
    }
    for e in (0..=remaining).rev() {
        exps[pos] = e as u16;
        compositions(exps, pos + 1, remaining - e, emit);
    }
    exps[pos] = 0;
}

/// `C(n, k)` as an exact integer.
pub fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

/// Serialised as the dense exponent vector.
impl serde::Serialize for Monomial {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.exponents().serialize(s)
    }
}

impl<'de> serde::Deserialize<'de> for Monomial {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(Monomial::from_exponents(Vec::<u16>::deserialize(d)?))
    }
}
