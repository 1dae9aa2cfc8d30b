//! Problem instances: dynamics, target, state constraints, disturbance set
//! and the enclosing ball `B(0,R) = {R - |x|^2 >= 0}`.
//!
//! Sign conventions are fixed and never auto-negated:
//!
//! * target `TR = {x : l_j(x) <= 0 for all j}`
//! * state constraints `X_t = {x : g_i(x,t) <= 0 for all i}`
//! * disturbance set `D = {d : h_r(d) >= 0 for all r}`
//! * ball `B(0,R) = {x : R - sum x_i^2 >= 0}`

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::poly::{parse_poly, PolyError, Polynomial, VarUniverse};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot read spec file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid JSON: {0}")]
    Json(String),
    #[error("schema error at {path}: {msg}")]
    Schema { path: String, msg: String },
    #[error("polynomial error at {path}: {source}")]
    Poly { path: String, source: PolyError },
    #[error("invalid solve configuration: {0}")]
    Config(String),
}

/// A fully parsed reachability problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachSpec {
    pub name: String,
    pub universe: Arc<VarUniverse>,
    /// `f_i(x, d)`, one per state variable.
    pub dynamics: Vec<Polynomial>,
    pub horizon: f64,
    /// `l_j(x)`; the target is `{all l_j <= 0}`.
    pub target: Vec<Polynomial>,
    /// `g_i(x, t)`; the state constraint set is `{all g_i <= 0}`.
    pub state_constraints: Vec<Polynomial>,
    /// `h_r(d)`; the disturbance set is `{all h_r >= 0}`.
    pub disturbance_set: Vec<Polynomial>,
    pub ball_r: f64,
}

/// On-disk JSON layout, all polynomials as expression strings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SpecDocument {
    pub name: String,
    pub state_vars: Vec<String>,
    pub disturbance_vars: Vec<String>,
    pub horizon: f64,
    pub dynamics: Vec<String>,
    pub target: Vec<String>,
    pub state_constraints: Vec<String>,
    pub disturbance_set: Vec<String>,
    #[serde(rename = "ball_R")]
    pub ball_r: f64,
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, key: &str) -> Result<&'a Value, ModelError> {
    obj.get(key).ok_or_else(|| ModelError::Schema {
        path: format!("/{key}"),
        msg: "missing required field".into(),
    })
}

fn string_list(obj: &serde_json::Map<String, Value>, key: &str) -> Result<Vec<String>, ModelError> {
    let v = field(obj, key)?;
    let arr = v.as_array().ok_or_else(|| ModelError::Schema {
        path: format!("/{key}"),
        msg: "expected an array of strings".into(),
    })?;
    arr.iter()
        .enumerate()
        .map(|(i, e)| {
            e.as_str().map(str::to_string).ok_or_else(|| ModelError::Schema {
                path: format!("/{key}/{i}"),
                msg: "expected a string".into(),
            })
        })
        .collect()
}

fn positive_number(obj: &serde_json::Map<String, Value>, key: &str) -> Result<f64, ModelError> {
    let v = field(obj, key)?.as_f64().ok_or_else(|| ModelError::Schema {
        path: format!("/{key}"),
        msg: "expected a number".into(),
    })?;
    if !(v.is_finite() && v > 0.0) {
        return Err(ModelError::Schema {
            path: format!("/{key}"),
            msg: format!("must be a positive finite number, got {v}"),
        });
    }
    Ok(v)
}

fn parse_list(
    key: &str,
    exprs: &[String],
    universe: &Arc<VarUniverse>,
    allowed: &[usize],
    allowed_desc: &str,
) -> Result<Vec<Polynomial>, ModelError> {
    exprs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let path = format!("/{key}/{i}");
            let p = parse_poly(s, universe).map_err(|source| ModelError::Poly {
                path: path.clone(),
                source,
            })?;
            if !p.supported_on(allowed) {
                return Err(ModelError::Schema {
                    path,
                    msg: format!("polynomial may only depend on {allowed_desc}"),
                });
            }
            Ok(p)
        })
        .collect()
}

impl ReachSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_bytes(&bytes)
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let v: Value = serde_json::from_slice(bytes).map_err(|e| ModelError::Json(e.to_string()))?;
        Self::from_json_value(&v)
    }

    pub fn from_json_value(v: &Value) -> Result<Self, ModelError> {
        let obj = v.as_object().ok_or_else(|| ModelError::Schema {
            path: "".into(),
            msg: "document must be a JSON object".into(),
        })?;
        let name = field(obj, "name")?
            .as_str()
            .ok_or_else(|| ModelError::Schema {
                path: "/name".into(),
                msg: "expected a string".into(),
            })?
            .to_string();
        let state_vars = string_list(obj, "state_vars")?;
        let disturbance_vars = string_list(obj, "disturbance_vars")?;
        let horizon = positive_number(obj, "horizon")?;
        let dynamics = string_list(obj, "dynamics")?;
        let target = string_list(obj, "target")?;
        let state_constraints = string_list(obj, "state_constraints")?;
        let disturbance_set = string_list(obj, "disturbance_set")?;
        let ball_r = positive_number(obj, "ball_R")?;
        Self::from_document(&SpecDocument {
            name,
            state_vars,
            disturbance_vars,
            horizon,
            dynamics,
            target,
            state_constraints,
            disturbance_set,
            ball_r,
        })
    }

    pub fn from_document(doc: &SpecDocument) -> Result<Self, ModelError> {
        let universe = VarUniverse::new(
            doc.state_vars.clone(),
            "t",
            doc.disturbance_vars.clone(),
        )
        .map_err(|source| ModelError::Poly {
            path: "/state_vars".into(),
            source,
        })?;
        let n = universe.n_states();
        if doc.dynamics.len() != n {
            return Err(ModelError::Schema {
                path: "/dynamics".into(),
                msg: format!("expected {n} entries (one per state variable), got {}", doc.dynamics.len()),
            });
        }
        if doc.target.is_empty() {
            return Err(ModelError::Schema {
                path: "/target".into(),
                msg: "at least one target polynomial is required".into(),
            });
        }
        if doc.state_constraints.is_empty() {
            return Err(ModelError::Schema {
                path: "/state_constraints".into(),
                msg: "at least one state constraint is required".into(),
            });
        }
        if doc.disturbance_set.is_empty() != doc.disturbance_vars.is_empty() {
            return Err(ModelError::Schema {
                path: "/disturbance_set".into(),
                msg: "must be non-empty exactly when disturbance_vars is non-empty".into(),
            });
        }
        for (key, v) in [("horizon", doc.horizon), ("ball_R", doc.ball_r)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ModelError::Schema {
                    path: format!("/{key}"),
                    msg: format!("must be a positive finite number, got {v}"),
                });
            }
        }
        let all = universe.all_indices();
        let xs = universe.state_indices();
        let xt = universe.state_time_indices();
        let ds = universe.disturbance_indices();
        Ok(ReachSpec {
            name: doc.name.clone(),
            dynamics: parse_list("dynamics", &doc.dynamics, &universe, &all, "states, t and disturbances")?,
            target: parse_list("target", &doc.target, &universe, &xs, "state variables")?,
            state_constraints: parse_list(
                "state_constraints",
                &doc.state_constraints,
                &universe,
                &xt,
                "state variables and t",
            )?,
            disturbance_set: parse_list(
                "disturbance_set",
                &doc.disturbance_set,
                &universe,
                &ds,
                "disturbance variables",
            )?,
            horizon: doc.horizon,
            ball_r: doc.ball_r,
            universe,
        })
    }

    pub fn to_document(&self) -> SpecDocument {
        let strs = |ps: &[Polynomial]| ps.iter().map(Polynomial::to_canonical_string).collect();
        SpecDocument {
            name: self.name.clone(),
            state_vars: self.universe.state_vars().to_vec(),
            disturbance_vars: self.universe.disturbance_vars().to_vec(),
            horizon: self.horizon,
            dynamics: strs(&self.dynamics),
            target: strs(&self.target),
            state_constraints: strs(&self.state_constraints),
            disturbance_set: strs(&self.disturbance_set),
            ball_r: self.ball_r,
        }
    }

    /// Canonical JSON: fixed field order, canonical polynomial strings.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(&self.to_document()).expect("spec document serializes")
    }

    /// Hex SHA-256 of the canonical JSON.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn n_states(&self) -> usize {
        self.universe.n_states()
    }

    /// `g_R(x) = R - sum x_i^2`.
    pub fn ball_polynomial(&self) -> Polynomial {
        let u = &self.universe;
        let mut p = Polynomial::constant(u, self.ball_r);
        for i in 0..u.n_states() {
            let mut e = vec![0u16; u.len()];
            e[i] = 2;
            p.add_term(crate::poly::Monomial::from_exponents(e), -1.0);
        }
        p
    }

    /// `t (T - t)`, nonnegative exactly on `[0, T]`.
    pub fn time_window_polynomial(&self) -> Polynomial {
        let u = &self.universe;
        let t = Polynomial::var(u, u.time_index());
        let rest = Polynomial::constant(u, self.horizon).sub(&t).expect("same universe");
        t.mul(&rest).expect("same universe")
    }

    /// Dense evaluation point `(x, t, d)`.
    pub fn point(&self, x: &[f64], t: f64, d: &[f64]) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.universe.len());
        p.extend_from_slice(x);
        p.push(t);
        p.extend_from_slice(d);
        debug_assert_eq!(p.len(), self.universe.len());
        p
    }

    /// True when every dynamics entry has degree at most one in the disturbances.
    pub fn is_affine_in_disturbance(&self) -> bool {
        let ds = self.universe.disturbance_indices();
        self.dynamics
            .iter()
            .all(|f| f.degree_in(&ds).unwrap_or(0) <= 1)
    }
}

/// How SOS multiplier degrees are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum MultiplierPolicy {
    /// Degrees derived from each identity's degree (always well-posed).
    Auto,
    /// Fixed degrees: `lie` for the multipliers of the Lie-derivative
    /// identity, `other` for the state-constraint and target identities.
    Explicit { lie: u32, other: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdpTolerances {
    pub feas_tol: f64,
    pub gap_tol: f64,
    pub max_iters: usize,
}

impl Default for SdpTolerances {
    fn default() -> Self {
        SdpTolerances {
            feas_tol: 1e-8,
            gap_tol: 1e-8,
            max_iters: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    /// Total degree of the certificate in `(x, t)`.
    pub psi_degree: u32,
    pub multipliers: MultiplierPolicy,
    pub sdp: SdpTolerances,
    pub seed: u64,
    /// Tightens certificate acceptance thresholds 100x.
    pub strict: bool,
}

impl SolveConfig {
    pub fn new(psi_degree: u32) -> Self {
        SolveConfig {
            psi_degree,
            multipliers: MultiplierPolicy::Auto,
            sdp: SdpTolerances::default(),
            seed: 0,
            strict: false,
        }
    }

    pub fn validate(&self, spec: &ReachSpec) -> Result<(), ModelError> {
        if self.psi_degree < 2 {
            return Err(ModelError::Config(format!(
                "certificate degree must be at least 2, got {}",
                self.psi_degree
            )));
        }
        let needed = spec
            .target
            .iter()
            .chain(&spec.state_constraints)
            .filter_map(Polynomial::degree)
            .max()
            .unwrap_or(0);
        if self.psi_degree < needed {
            return Err(ModelError::Config(format!(
                "certificate degree {} is below the degree {needed} of the target/constraint polynomials",
                self.psi_degree
            )));
        }
        let t = &self.sdp;
        for (name, v) in [("feas_tol", t.feas_tol), ("gap_tol", t.gap_tol)] {
            if !(v > 0.0 && v <= 1e-2) {
                return Err(ModelError::Config(format!("{name} must be in (0, 1e-2], got {v}")));
            }
        }
        if let MultiplierPolicy::Explicit { lie, other } = self.multipliers {
            if lie % 2 == 1 || other % 2 == 1 {
                return Err(ModelError::Config(format!(
                    "explicit multiplier degrees must be even, got ({lie}, {other})"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryViolationKind {
    /// A point of `X_t` outside `B(0,R)`.
    StateSetOutsideBall,
    /// A point of the sphere `|x|^2 = R` where some constraint is (nearly) active.
    BoundaryContact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryViolation {
    pub kind: GeometryViolationKind,
    pub x: Vec<f64>,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub ok: bool,
    pub samples: usize,
    pub violation_count: usize,
    /// First violations found, at most [`MAX_REPORTED_VIOLATIONS`].
    pub violations: Vec<GeometryViolation>,
}

pub const MAX_REPORTED_VIOLATIONS: usize = 50;
const BOUNDARY_TOL: f64 = 1e-6;
const BATCH: usize = 4096;

/// Sampled check of the ball preconditions `X_t ⊆ B(0,R)` and
/// `∂X_t ∩ ∂B(0,R) = ∅`. Only `TR ∩ X_T` enters the problem, so the target
/// itself may extend past the ball. This is evidence, not a proof.
pub fn check_geometry(spec: &ReachSpec, samples: usize, seed: u64) -> GeometryReport {
    let samples = samples.max(1000);
    let n = spec.n_states();
    let radius = spec.ball_r.sqrt();
    let box_half = 1.5 * radius;
    let g_r = spec.ball_polynomial().evaluator();
    let gs: Vec<_> = spec.state_constraints.iter().map(Polynomial::evaluator).collect();
    let nd = spec.universe.n_disturbances();
    let n_batches = samples.div_ceil(BATCH);

    let per_batch: Vec<Vec<GeometryViolation>> = (0..n_batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64 + 1);
            let count = BATCH.min(samples - b * BATCH);
            let mut found = Vec::new();
            let mut pt = vec![0.0; spec.universe.len()];
            for _ in 0..count {
                // interior / containment probe
                for v in pt.iter_mut().take(n) {
                    *v = rng.random_range(-box_half..=box_half);
                }
                let t = rng.random_range(0.0..=spec.horizon);
                pt[n] = t;
                for v in pt.iter_mut().skip(n + 1).take(nd) {
                    *v = 0.0;
                }
                let outside_ball = g_r.eval(&pt) < 0.0;
                if outside_ball && gs.iter().all(|g| g.eval(&pt) <= 0.0) {
                    found.push(GeometryViolation {
                        kind: GeometryViolationKind::StateSetOutsideBall,
                        x: pt[..n].to_vec(),
                        t,
                    });
                }
                // sphere probe
                let mut norm2 = 0.0;
                for v in pt.iter_mut().take(n) {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = z;
                    norm2 += z * z;
                }
                let s = radius / norm2.sqrt();
                for v in pt.iter_mut().take(n) {
                    *v *= s;
                }
                let t = rng.random_range(0.0..=spec.horizon);
                pt[n] = t;
                let gmax = gs.iter().map(|g| g.eval(&pt)).fold(f64::NEG_INFINITY, f64::max);
                if gmax.abs() <= BOUNDARY_TOL {
                    found.push(GeometryViolation {
                        kind: GeometryViolationKind::BoundaryContact,
                        x: pt[..n].to_vec(),
                        t,
                    });
                }
            }
            found
        })
        .collect();

    let violation_count = per_batch.iter().map(Vec::len).sum();
    let violations = per_batch
        .into_iter()
        .flatten()
        .take(MAX_REPORTED_VIOLATIONS)
        .collect();
    GeometryReport {
        ok: violation_count == 0,
        samples,
        violation_count,
        violations,
    }
}
