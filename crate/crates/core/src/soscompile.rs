//! Sum-of-squares program for the reach-avoid certificate and its
//! compilation to a standard-form SDP.
//!
//! For a certificate `ψ(x,t)` of degree `k` the program asks for
//!
//! ```text
//! -Lψ          = s0 + s1 g_R + s2 t(T-t) + Σ_r s'_r h_r        over (x,t,d)
//! ψ - g_i      = s3_i + s4_i g_R + s5_i t(T-t)                over (x,t)
//! ψ(x,T) - l_j = s6_j + s7_j g_R                              over x
//! ```
//!
//! with every `s` a sum of squares, minimising `∫_B ψ(x,0) dx`. Each SOS
//! multiplier becomes a Gram matrix `v' Q v` over a monomial vector `v` and
//! each identity is matched coefficient by coefficient.
//!
//! Compilation happens in normalised coordinates `x = sqrt(R) x~`,
//! `t = T t~`, `d = ρ d~` (`ρ` the disturbance half-widths), so that the ball
//! becomes the unit ball and the horizon becomes `[0, 1]`.

use std::collections::HashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::disturbance::{DisturbanceError, DisturbanceSet};
use crate::model::{ModelError, MultiplierPolicy, ReachSpec, SolveConfig};
use crate::moments::objective_vector;
use crate::poly::{lie_derivative, monomial_basis, Monomial, Polynomial};
use crate::sdp::{BlockEntry, BlockKind, BlockSpec, EqConstraint, SdpInstance};

#[derive(Debug, Error)]
pub enum CompileError {
    #[error(transparent)]
    Config(#[from] ModelError),
    #[error(transparent)]
    Disturbance(#[from] DisturbanceError),
    #[error("inconsistent explicit multiplier degrees: {0}")]
    InconsistentDegrees(String),
}

/// Change of variables `z = factors ⊙ z~` over the full universe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    /// `sqrt(R)`
    pub state: f64,
    /// `T`
    pub time: f64,
    /// Per-disturbance half-width.
    pub disturbance: Vec<f64>,
    /// Positive factor dividing each `h_r` after substitution.
    pub h_norm: Vec<f64>,
}

impl Scaling {
    pub fn for_spec(spec: &ReachSpec) -> Result<Self, DisturbanceError> {
        let disturbance = if spec.universe.n_disturbances() == 0 {
            Vec::new()
        } else {
            DisturbanceSet::from_spec(spec)?
                .half_widths()
                .into_iter()
                .map(|w| if w > 0.0 { w } else { 1.0 })
                .collect()
        };
        let mut s = Scaling {
            state: spec.ball_r.sqrt(),
            time: spec.horizon,
            disturbance,
            h_norm: Vec::new(),
        };
        let f = s.factors(spec.n_states());
        s.h_norm = spec
            .disturbance_set
            .iter()
            .map(|h| {
                let m = h.scale_vars(&f).max_abs_coefficient();
                if m > 0.0 {
                    m
                } else {
                    1.0
                }
            })
            .collect();
        Ok(s)
    }

    /// The identity change of variables.
    pub fn identity(spec: &ReachSpec) -> Self {
        Scaling {
            state: 1.0,
            time: 1.0,
            disturbance: vec![1.0; spec.universe.n_disturbances()],
            h_norm: vec![1.0; spec.disturbance_set.len()],
        }
    }

    /// Per-variable factors in universe order `(x, t, d)`.
    pub fn factors(&self, n_states: usize) -> Vec<f64> {
        let mut f = vec![self.state; n_states];
        f.push(self.time);
        f.extend_from_slice(&self.disturbance);
        f
    }

    /// `p~(z~) = p(factors ⊙ z~)`
    pub fn to_normalised(&self, p: &Polynomial) -> Polynomial {
        p.scale_vars(&self.factors(p.universe().n_states()))
    }

    /// Inverse of [`Scaling::to_normalised`].
    pub fn to_original(&self, p: &Polynomial) -> Polynomial {
        let inv: Vec<f64> = self.factors(p.universe().n_states()).iter().map(|f| 1.0 / f).collect();
        p.scale_vars(&inv)
    }

    /// The problem in normalised coordinates: unit ball, unit horizon.
    pub fn normalise_spec(&self, spec: &ReachSpec) -> ReachSpec {
        let n = spec.n_states();
        let f = self.factors(n);
        let speed = self.time / self.state;
        ReachSpec {
            name: spec.name.clone(),
            universe: spec.universe.clone(),
            dynamics: spec.dynamics.iter().map(|p| p.scale_vars(&f).scale(speed)).collect(),
            horizon: 1.0,
            target: spec.target.iter().map(|p| p.scale_vars(&f)).collect(),
            state_constraints: spec.state_constraints.iter().map(|p| p.scale_vars(&f)).collect(),
            disturbance_set: spec
                .disturbance_set
                .iter()
                .zip(&self.h_norm)
                .map(|(p, c)| p.scale_vars(&f).scale(1.0 / c))
                .collect(),
            ball_r: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum IdentityKind {
    Lie,
    State(usize),
    Target(usize),
}

/// One SOS multiplier `s` multiplying a domain polynomial.
#[derive(Debug, Clone)]
pub struct Slot {
    pub label: String,
    pub domain: Polynomial,
    /// Variables the multiplier may depend on.
    pub vars: Vec<usize>,
    /// Even degree of the multiplier.
    pub degree: u32,
}

impl Slot {
    pub fn basis(&self, nvars: usize) -> Vec<Monomial> {
        monomial_basis(nvars, &self.vars, self.degree / 2)
    }
}

/// `Σ_β c_β P_β + P_0 = Σ_slots s · domain`, affine in the coefficients
/// `c_β` of `ψ`.
#[derive(Debug, Clone)]
pub struct SosConstraint {
    pub kind: IdentityKind,
    pub label: String,
    pub identity_degree: u32,
    /// `P_β`, aligned with the program's `psi_basis`.
    pub lhs_linear: Vec<Polynomial>,
    pub lhs_const: Polynomial,
    pub slots: Vec<Slot>,
}

#[derive(Debug, Clone)]
pub struct SosProgram {
    pub original: ReachSpec,
    pub spec: ReachSpec,
    pub scaling: Scaling,
    pub psi_degree: u32,
    /// Monomials of `R_k[x, t]` in graded-lex order.
    pub psi_basis: Vec<Monomial>,
    pub constraints: Vec<SosConstraint>,
    /// Weight of each `psi_basis` coefficient in `∫_B ψ(x,0) dx`.
    pub objective: Vec<f64>,
}

fn round_up_even(d: u32) -> u32 {
    d + d % 2
}

fn round_down_even(d: i64) -> Option<u32> {
    (d >= 0).then(|| (d - d % 2) as u32)
}

fn lhs_degree(lin: &[Polynomial], cst: &Polynomial) -> u32 {
    lin.iter()
        .chain(std::iter::once(cst))
        .filter_map(Polynomial::degree)
        .max()
        .unwrap_or(0)
}

/// Builds the SOS program in normalised coordinates.
pub fn build_sos_program(spec: &ReachSpec, cfg: &SolveConfig) -> Result<SosProgram, CompileError> {
    cfg.validate(spec)?;
    let scaling = Scaling::for_spec(spec)?;
    build_with_scaling(spec, cfg, scaling)
}

/// As [`build_sos_program`] with a caller-chosen change of variables.
pub fn build_with_scaling(
    spec: &ReachSpec,
    cfg: &SolveConfig,
    scaling: Scaling,
) -> Result<SosProgram, CompileError> {
    let norm = scaling.normalise_spec(spec);
    let u = norm.universe.clone();
    let nv = u.len();
    let k = cfg.psi_degree;
    let xt = u.state_time_indices();
    let xs = u.state_indices();
    let all = u.all_indices();
    let tidx = u.time_index();
    let psi_basis = monomial_basis(nv, &xt, k);

    let one = Polynomial::constant(&u, 1.0);
    let g_r = norm.ball_polynomial();
    let window = norm.time_window_polynomial();

    let mut constraints = Vec::new();

    // Lie-derivative identity
    let lie_lin: Vec<Polynomial> = psi_basis
        .iter()
        .map(|m| {
            let p = Polynomial::monomial(&u, m.clone(), 1.0);
            lie_derivative(&p, &norm.dynamics).expect("dynamics match the universe").neg()
        })
        .collect();
    let mut lie_domains = vec![
        ("s0".to_string(), one.clone()),
        ("s1".to_string(), g_r.clone()),
        ("s2".to_string(), window.clone()),
    ];
    for (r, h) in norm.disturbance_set.iter().enumerate() {
        lie_domains.push((format!("s'_{}", r + 1), h.clone()));
    }
    let lie_zero = Polynomial::zero(&u);
    constraints.push(make_constraint(
        IdentityKind::Lie,
        "lie".into(),
        lie_lin,
        lie_zero,
        lie_domains,
        &all,
        cfg,
        true,
    )?);

    // state constraints
    let psi_lin: Vec<Polynomial> = psi_basis
        .iter()
        .map(|m| Polynomial::monomial(&u, m.clone(), 1.0))
        .collect();
    for (i, g) in norm.state_constraints.iter().enumerate() {
        let domains = vec![
            (format!("s3_{}", i + 1), one.clone()),
            (format!("s4_{}", i + 1), g_r.clone()),
            (format!("s5_{}", i + 1), window.clone()),
        ];
        constraints.push(make_constraint(
            IdentityKind::State(i),
            format!("state_{}", i + 1),
            psi_lin.clone(),
            g.neg(),
            domains,
            &xt,
            cfg,
            false,
        )?);
    }

    // target at the final time
    let psi_at_t: Vec<Polynomial> = psi_lin.iter().map(|p| p.substitute(tidx, 1.0)).collect();
    for (j, l) in norm.target.iter().enumerate() {
        let domains = vec![
            (format!("s6_{}", j + 1), one.clone()),
            (format!("s7_{}", j + 1), g_r.clone()),
        ];
        constraints.push(make_constraint(
            IdentityKind::Target(j),
            format!("target_{}", j + 1),
            psi_at_t.clone(),
            l.neg(),
            domains,
            &xs,
            cfg,
            false,
        )?);
    }

    let n = spec.n_states() as i32;
    let moments = objective_vector(k, &norm).scaled(scaling.state.powi(n));
    let objective = psi_basis.iter().map(|m| moments.get(m)).collect();

    Ok(SosProgram {
        original: spec.clone(),
        spec: norm,
        scaling,
        psi_degree: k,
        psi_basis,
        constraints,
        objective,
    })
}

#[allow(clippy::too_many_arguments)]
fn make_constraint(
    kind: IdentityKind,
    label: String,
    lhs_linear: Vec<Polynomial>,
    lhs_const: Polynomial,
    domains: Vec<(String, Polynomial)>,
    vars: &[usize],
    cfg: &SolveConfig,
    is_lie: bool,
) -> Result<SosConstraint, CompileError> {
    let raw = lhs_degree(&lhs_linear, &lhs_const);
    let identity_degree = round_up_even(raw);
    let mut slots = Vec::new();
    match &cfg.multipliers {
        MultiplierPolicy::Auto => {
            for (name, dom) in domains {
                let dd = dom.degree().unwrap_or(0) as i64;
                if let Some(deg) = round_down_even(identity_degree as i64 - dd) {
                    slots.push(Slot {
                        label: name,
                        domain: dom,
                        vars: vars.to_vec(),
                        degree: deg,
                    });
                }
            }
        }
        &MultiplierPolicy::Explicit { lie, other } => {
            let deg = if is_lie { lie } else { other };
            if deg % 2 == 1 {
                return Err(CompileError::InconsistentDegrees(format!(
                    "{label}: multiplier degree {deg} is odd"
                )));
            }
            let reach = domains
                .iter()
                .map(|(_, d)| deg + d.degree().unwrap_or(0))
                .max()
                .unwrap_or(0);
            let fixed = lhs_const.degree().unwrap_or(0);
            if reach < fixed {
                return Err(CompileError::InconsistentDegrees(format!(
                    "{label}: no multiplier slot reaches degree {fixed} of the fixed part (max {reach})"
                )));
            }
            for (name, dom) in domains {
                slots.push(Slot {
                    label: name,
                    domain: dom,
                    vars: vars.to_vec(),
                    degree: deg,
                });
            }
        }
    }
    Ok(SosConstraint {
        kind,
        label,
        identity_degree,
        lhs_linear,
        lhs_const,
        slots,
    })
}

/// Where a Gram block comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub identity: usize,
    pub slot: usize,
    pub label: String,
    pub basis: Vec<Monomial>,
}

/// Which coefficient of which identity an equality row matches.
#[derive(Debug, Clone, PartialEq)]
pub struct RowInfo {
    pub identity: usize,
    pub monomial: Monomial,
}

#[derive(Debug, Clone)]
pub struct CompiledProgram {
    pub program: SosProgram,
    pub instance: SdpInstance,
    pub blocks: Vec<BlockInfo>,
    pub rows: Vec<RowInfo>,
}

/// Coefficient matching: one row per monomial of each identity, in
/// (identity, graded-lex) order.
///
/// Row `μ` of an identity reads
/// `Σ_slots <A_μ, Q_slot> - Σ_β [P_β]_μ c_β = [P_0]_μ`.
pub fn compile_to_sdp(program: SosProgram) -> CompiledProgram {
    let nv = program.spec.universe.len();
    let n_free = program.psi_basis.len();
    let mut blocks = Vec::new();
    let mut block_specs = Vec::new();
    let mut constraints = Vec::new();
    let mut rows = Vec::new();

    for (ci, c) in program.constraints.iter().enumerate() {
        let mut acc: HashMap<Monomial, EqConstraint> = HashMap::new();
        for (beta, p) in c.lhs_linear.iter().enumerate() {
            for (m, v) in p.terms() {
                acc.entry(m.clone()).or_default().free.push((beta, -v));
            }
        }
        for (m, v) in c.lhs_const.terms() {
            acc.entry(m.clone()).or_default().rhs = v;
        }
        for (si, slot) in c.slots.iter().enumerate() {
            let basis = slot.basis(nv);
            let b = block_specs.len();
            block_specs.push(BlockSpec {
                label: format!("{}:{}", c.label, slot.label),
                dim: basis.len(),
                kind: BlockKind::Psd,
            });
            let dom: Vec<(&Monomial, f64)> = slot.domain.terms().collect();
            let mut prod = Monomial::one(nv);
            let mut full = Monomial::one(nv);
            for a in 0..basis.len() {
                for bb in a..basis.len() {
                    basis[a].mul_into(&basis[bb], &mut prod);
                    for &(dm, dv) in &dom {
                        prod.mul_into(dm, &mut full);
                        acc.entry(full.clone())
                            .or_default()
                            .entries
                            .push(BlockEntry::new(b, a, bb, dv));
                    }
                }
            }
            blocks.push(BlockInfo {
                identity: ci,
                slot: si,
                label: slot.label.clone(),
                basis,
            });
        }
        let mut keyed: Vec<(Monomial, EqConstraint)> = acc.into_iter().collect();
        keyed.sort_by(|a, b| a.0.cmp(&b.0));
        for (m, mut row) in keyed {
            row.free.sort_by_key(|e| e.0);
            row.entries.sort_by_key(|a| (a.block, a.i, a.j));
            rows.push(RowInfo {
                identity: ci,
                monomial: m,
            });
            constraints.push(row);
        }
    }

    let instance = SdpInstance {
        n_free,
        blocks: block_specs,
        constraints,
        c_free: program.objective.clone(),
        c_blocks: Vec::new(),
    };
    CompiledProgram {
        program,
        instance,
        blocks,
        rows,
    }
}

impl SosProgram {
    /// `ψ~` from its coefficient vector.
    pub fn psi_from_coefficients(&self, c: &[f64]) -> Polynomial {
        Polynomial::from_terms(
            &self.spec.universe,
            self.psi_basis.iter().cloned().zip(c.iter().cloned()),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::binomial;

    pub(crate) fn ex1(ball: f64) -> ReachSpec {
        ReachSpec::from_json_bytes(crate::model::tests_support::ex1_json(ball).as_bytes()).unwrap()
    }

    #[test]
    fn example_one_degrees_at_k4() {
        let spec = ex1(1.21);
        let prog = build_sos_program(&spec, &SolveConfig::new(4)).unwrap();
        assert_eq!(prog.constraints.len(), 3);
        let lie = &prog.constraints[0];
        assert_eq!(lie.identity_degree, 6);
        let degs: Vec<(&str, u32)> = lie.slots.iter().map(|s| (s.label.as_str(), s.degree)).collect();
        assert_eq!(degs, [("s0", 6), ("s1", 4), ("s2", 4), ("s'_1", 4)]);
        assert_eq!(lie.slots[0].vars.len(), 4);
        let st = &prog.constraints[1];
        assert_eq!(st.identity_degree, 4);
        assert_eq!(st.slots.iter().map(|s| s.degree).collect::<Vec<_>>(), [4, 2, 2]);
        let tg = &prog.constraints[2];
        assert_eq!(tg.slots.iter().map(|s| s.degree).collect::<Vec<_>>(), [4, 2]);
        assert_eq!(tg.slots[0].vars, vec![0, 1]);
    }

    #[test]
    fn free_variable_count_and_block_sizes() {
        let spec = ex1(1.21);
        let cp = compile_to_sdp(build_sos_program(&spec, &SolveConfig::new(4)).unwrap());
        assert_eq!(cp.instance.n_free, binomial(3 + 4, 4) as usize);
        let dims: Vec<usize> = cp.instance.blocks.iter().map(|b| b.dim).collect();
        // Gram bases: C(vars + h, h)
        let expect = [
            binomial(4 + 3, 3),
            binomial(4 + 2, 2),
            binomial(4 + 2, 2),
            binomial(4 + 2, 2),
            binomial(3 + 2, 2),
            binomial(3 + 1, 1),
            binomial(3 + 1, 1),
            binomial(2 + 2, 2),
            binomial(2 + 1, 1),
        ];
        assert_eq!(dims, expect.map(|v| v as usize));
        cp.instance.validate().unwrap();
    }

    #[test]
    fn objective_ignores_time_monomials() {
        let spec = ex1(1.21);
        let prog = build_sos_program(&spec, &SolveConfig::new(4)).unwrap();
        let t = prog.spec.universe.time_index();
        for (m, w) in prog.psi_basis.iter().zip(&prog.objective) {
            if m.exponent(t) > 0 {
                assert_eq!(*w, 0.0);
            }
        }
        // constant term weight is the ball area pi R
        assert!((prog.objective[0] - std::f64::consts::PI * 1.21).abs() < 1e-12);
    }

    #[test]
    fn no_disturbance_means_three_lie_slots() {
        let spec = ReachSpec::from_json_bytes(
            br#"{"name": "nd", "state_vars": ["x"], "disturbance_vars": [], "horizon": 1,
                "dynamics": ["-x"], "target": ["x^2 - 0.25"], "state_constraints": ["x^2 - 1"],
                "disturbance_set": [], "ball_R": 1.5}"#,
        )
        .unwrap();
        let prog = build_sos_program(&spec, &SolveConfig::new(2)).unwrap();
        assert_eq!(prog.constraints[0].slots.len(), 3);
    }

    #[test]
    fn hand_counted_rows_for_one_state_toy() {
        // x' = -x, k = 2, variables (x, t)
        let spec = ReachSpec::from_json_bytes(
            br#"{"name": "toy", "state_vars": ["x"], "disturbance_vars": [], "horizon": 1,
                "dynamics": ["-x"], "target": ["x^2 - 0.25"], "state_constraints": ["x^2 - 1"],
                "disturbance_set": [], "ball_R": 1.5}"#,
        )
        .unwrap();
        let cp = compile_to_sdp(build_sos_program(&spec, &SolveConfig::new(2)).unwrap());
        // Lie and state identities have degree 2 in (x, t): 6 monomials each.
        // Target identity has degree 2 in x: 3 monomials.
        let per: Vec<usize> = (0..3)
            .map(|i| cp.rows.iter().filter(|r| r.identity == i).count())
            .collect();
        assert_eq!(per, [6, 6, 3]);
        assert_eq!(cp.instance.constraints.len(), 15);
        // rows in graded-lex order within each identity
        for w in cp.rows.windows(2) {
            if w[0].identity == w[1].identity {
                assert!(w[0].monomial < w[1].monomial);
            }
        }
    }

    #[test]
    fn explicit_degrees_pad_with_forced_zero_rows() {
        let spec = ex1(1.21);
        let mut cfg = SolveConfig::new(4);
        cfg.multipliers = MultiplierPolicy::Explicit { lie: 2, other: 2 };
        let cp = compile_to_sdp(build_sos_program(&spec, &cfg).unwrap());
        // some Lie rows carry no Gram entries (degree above every slot)
        assert!(cp
            .instance
            .constraints
            .iter()
            .zip(&cp.rows)
            .any(|(c, r)| r.identity == 0 && c.entries.is_empty() && !c.free.is_empty()));
        cfg.multipliers = MultiplierPolicy::Explicit { lie: 3, other: 2 };
        assert!(build_sos_program(&spec, &cfg).is_err());
    }

    #[test]
    fn normalisation_round_trip() {
        let spec = ex1(1.21);
        let s = Scaling::for_spec(&spec).unwrap();
        assert!((s.disturbance[0] - 0.01).abs() < 1e-15);
        let p = &spec.target[0];
        let back = s.to_original(&s.to_normalised(p));
        for (m, c) in p.terms() {
            assert!((back.coefficient(m) - c).abs() < 1e-14);
        }
        let norm = s.normalise_spec(&spec);
        // normalised disturbance set is 1 - d~^2
        let h = &norm.disturbance_set[0];
        assert!((h.max_abs_coefficient() - 1.0).abs() < 1e-15);
    }
}
