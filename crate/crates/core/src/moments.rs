//! Lebesgue moments of monomials over Euclidean balls.
//!
//! `∫_{|x| <= r} x^α dx = r^{|α|+n} Π Γ((α_i+1)/2) / Γ((|α|+n)/2 + 1)` when
//! every `α_i` is even, and zero otherwise. Gamma values at half-integers
//! are accumulated in log space so that high dimensions and degrees do not
//! overflow.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

use crate::model::ReachSpec;
use crate::poly::{monomial_basis, Monomial};

/// `ln Γ(k/2)` for a positive integer `k`.
pub fn ln_gamma_half(k: u32) -> f64 {
    assert!(k >= 1, "Γ(k/2) needs k >= 1");
    if k.is_multiple_of(2) {
        // Γ(m) = (m-1)!
        let m = k / 2;
        (1..m).map(|i| (i as f64).ln()).sum()
    } else {
        // Γ(j + 1/2) = sqrt(pi) Π_{i<j} (i + 1/2)
        let j = (k - 1) / 2;
        0.5 * std::f64::consts::PI.ln() + (0..j).map(|i| (i as f64 + 0.5).ln()).sum::<f64>()
    }
}

/// Moment of `x^alpha` over the `n`-ball of radius `radius`.
pub fn ball_moment(alpha: &[u16], radius: f64, n: usize) -> f64 {
    debug_assert_eq!(alpha.len(), n);
    if alpha.iter().any(|&a| a % 2 == 1) {
        return 0.0;
    }
    let total: u32 = alpha.iter().map(|&a| a as u32).sum();
    let num: f64 = alpha.iter().map(|&a| ln_gamma_half(a as u32 + 1)).sum();
    let den = ln_gamma_half(total + n as u32 + 2);
    let log_r = (total as f64 + n as f64) * radius.ln();
    (num - den + log_r).exp()
}

/// Objective weights: ball moments of every state monomial of degree `<= k`.
#[derive(Debug, Clone)]
pub struct MomentVector {
    pub dim: usize,
    pub radius: f64,
    /// Monomials live in the full problem universe (time and disturbance
    /// exponents are zero), in graded-lex order.
    pub entries: Vec<(Monomial, f64)>,
}

impl MomentVector {
    pub fn get(&self, mono: &Monomial) -> f64 {
        self.entries
            .binary_search_by(|(m, _)| m.cmp(mono))
            .map(|i| self.entries[i].1)
            .unwrap_or(0.0)
    }

    /// Multiplies every entry by `factor` (e.g. a change-of-variables Jacobian).
    pub fn scaled(&self, factor: f64) -> MomentVector {
        MomentVector {
            dim: self.dim,
            radius: self.radius,
            entries: self.entries.iter().map(|(m, v)| (m.clone(), v * factor)).collect(),
        }
    }
}

type UnitCache = RwLock<HashMap<(usize, u32), Arc<Vec<(Vec<u16>, f64)>>>>;

fn unit_cache() -> &'static UnitCache {
    static CACHE: OnceLock<UnitCache> = OnceLock::new();
    CACHE.get_or_init(|| RwLock::new(HashMap::new()))
}

/// Unit-ball moments for all monomials of degree `<= k` in `n` variables.
fn unit_moments(n: usize, k: u32) -> Arc<Vec<(Vec<u16>, f64)>> {
    if let Some(hit) = unit_cache().read().expect("moment cache").get(&(n, k)) {
        return hit.clone();
    }
    let vars: Vec<usize> = (0..n).collect();
    let table: Vec<(Vec<u16>, f64)> = monomial_basis(n, &vars, k)
        .into_iter()
        .map(|m| {
            let v = ball_moment(m.exponents(), 1.0, n);
            (m.exponents().to_vec(), v)
        })
        .collect();
    let table = Arc::new(table);
    unit_cache()
        .write()
        .expect("moment cache")
        .insert((n, k), table.clone());
    table
}

/// Moments over `B(0, sqrt(spec.ball_r))` for every state monomial of degree `<= k`.
pub fn objective_vector(k: u32, spec: &ReachSpec) -> MomentVector {
    let n = spec.n_states();
    let nv = spec.universe.len();
    let radius = spec.ball_r.sqrt();
    let entries = unit_moments(n, k)
        .iter()
        .map(|(e, v)| {
            let deg: u32 = e.iter().map(|&a| a as u32).sum();
            let mut full = vec![0u16; nv];
            full[..n].copy_from_slice(e);
            let scaled = if *v == 0.0 {
                0.0
            } else {
                v * radius.powi((deg as usize + n) as i32)
            };
            (Monomial::from_exponents(full), scaled)
        })
        .collect();
    MomentVector {
        dim: n,
        radius,
        entries,
    }
}
