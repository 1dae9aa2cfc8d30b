//! Certificates: assembly from an SDP solution, self-contained
//! re-verification, sub-level-set membership and 2-D contour extraction.
//!
//! A certificate stores `ψ` and every Gram matrix in the normalised
//! coordinates of the compiled program together with the change of
//! variables. Verification rebuilds each identity from the embedded spec with
//! polynomial arithmetic only and compares coefficient by coefficient.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, ReachSpec, SolveConfig, SpecDocument};
use crate::poly::{lie_derivative, parse_poly, Monomial, PolyError, Polynomial};
use crate::sdp::{min_eigenvalue, SdpSolution, SdpStatus};
use crate::soscompile::{CompiledProgram, Scaling};

pub const FORMAT: &str = "reachsos-certificate-v1";
pub const DEFAULT_RESIDUAL_TOL: f64 = 1e-6;
pub const DEFAULT_EIG_TOL: f64 = 1e-7;
/// Factor applied to both thresholds in strict mode.
pub const STRICT_FACTOR: f64 = 1e-2;

#[derive(Debug, Error)]
pub enum CertifyError {
    #[error("solver did not reach an optimal point (status {0:?})")]
    NotOptimal(SdpStatus),
    #[error("identity {identity}: residual {residual:.3e} exceeds {tol:.1e} at monomial {monomial}")]
    ResidualExceeded {
        identity: String,
        monomial: String,
        residual: f64,
        tol: f64,
    },
    #[error("Gram matrix {block} has minimum eigenvalue {min_eig:.3e} below -{tol:.1e}")]
    IndefiniteGram { block: String, min_eig: f64, tol: f64 },
    #[error("malformed certificate: {0}")]
    Malformed(String),
    #[error("spec fingerprint mismatch: stored {stored}, computed {computed}")]
    FingerprintMismatch { stored: String, computed: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("polynomial error: {0}")]
    Poly(#[from] PolyError),
    #[error("cannot access {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid certificate JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub residual_tol: f64,
    pub eig_tol: f64,
}

impl Thresholds {
    pub fn new(strict: bool) -> Self {
        let f = if strict { STRICT_FACTOR } else { 1.0 };
        Thresholds {
            residual_tol: DEFAULT_RESIDUAL_TOL * f,
            eig_tol: DEFAULT_EIG_TOL * f,
        }
    }
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds::new(false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    pub status: SdpStatus,
    pub iterations: usize,
    pub primal_obj: f64,
    pub dual_obj: f64,
    pub primal_res: f64,
    pub dual_res: f64,
    pub rel_gap: f64,
}

impl From<&SdpSolution> for SolverSummary {
    fn from(s: &SdpSolution) -> Self {
        SolverSummary {
            status: s.status,
            iterations: s.iterations,
            primal_obj: s.primal_obj,
            dual_obj: s.dual_obj,
            primal_res: s.primal_res,
            dual_res: s.dual_res,
            rel_gap: s.rel_gap,
        }
    }
}

/// One SOS multiplier `v' Q v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplierRecord {
    /// Identity label: `lie`, `state_i` or `target_j`.
    pub identity: String,
    /// Slot label, e.g. `s0`, `s'_1`, `s4_2`.
    pub slot: String,
    pub basis: Vec<Monomial>,
    /// Row-major symmetric Gram matrix.
    pub gram: Vec<Vec<f64>>,
    /// `v' Q v` in normalised coordinates, canonical form.
    pub polynomial: String,
    pub min_eigenvalue: f64,
}

impl MultiplierRecord {
    pub fn block_label(&self) -> String {
        format!("{}:{}", self.identity, self.slot)
    }

    fn gram_matrix(&self) -> Result<DMatrix<f64>, CertifyError> {
        let n = self.basis.len();
        if self.gram.len() != n || self.gram.iter().any(|r| r.len() != n) {
            return Err(CertifyError::Malformed(format!(
                "Gram matrix of {} does not match its basis of size {n}",
                self.block_label()
            )));
        }
        let mut q = DMatrix::from_fn(n, n, |i, j| self.gram[i][j]);
        let qt = q.transpose();
        q += qt;
        q *= 0.5;
        Ok(q)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityResidual {
    pub identity: String,
    pub max_abs: f64,
    /// Monomial with the largest mismatch, `1` if the identity is exact.
    pub worst_monomial: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub format: String,
    pub spec: SpecDocument,
    pub spec_fingerprint: String,
    pub config: SolveConfig,
    pub scaling: Scaling,
    /// `ψ(x, t)` in the original coordinates.
    pub psi: String,
    /// `ψ` in normalised coordinates, the form the identities are checked in.
    pub psi_normalised: String,
    /// `d*_k = ∫_B ψ(x, 0) dx`.
    pub objective_value: f64,
    pub thresholds: Thresholds,
    pub solver: Option<SolverSummary>,
    pub multipliers: Vec<MultiplierRecord>,
    pub residuals: Vec<IdentityResidual>,
}

/// Diagnostics recomputed from the stored data.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub residuals: Vec<IdentityResidual>,
    pub min_eigenvalues: Vec<(String, f64)>,
}

impl Diagnostics {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().map(|r| r.max_abs).fold(0.0, f64::max)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eigenvalues
            .iter()
            .map(|e| e.1)
            .fold(f64::INFINITY, f64::min)
    }
}

fn gram_polynomial(
    basis: &[Monomial],
    q: &DMatrix<f64>,
    universe: &std::sync::Arc<crate::poly::VarUniverse>,
) -> Polynomial {
    let mut p = Polynomial::zero(universe);
    for a in 0..basis.len() {
        for b in a..basis.len() {
            let w = if a == b { q[(a, a)] } else { 2.0 * q[(a, b)] };
            if w != 0.0 {
                p.add_term(basis[a].mul(&basis[b]), w);
            }
        }
    }
    p
}

/// Left-hand sides of every identity, keyed by label, in normalised
/// coordinates.
fn identity_lhs(norm: &ReachSpec, psi: &Polynomial) -> Result<Vec<(String, Polynomial)>, CertifyError> {
    let u = &norm.universe;
    let mut out = vec![("lie".to_string(), lie_derivative(psi, &norm.dynamics)?.neg())];
    for (i, g) in norm.state_constraints.iter().enumerate() {
        out.push((format!("state_{}", i + 1), psi.sub(g)?));
    }
    let at_end = psi.substitute(u.time_index(), norm.horizon);
    for (j, l) in norm.target.iter().enumerate() {
        out.push((format!("target_{}", j + 1), at_end.sub(l)?));
    }
    Ok(out)
}

/// The domain polynomial a slot label stands for.
fn slot_domain(identity: &str, slot: &str, norm: &ReachSpec) -> Option<Polynomial> {
    let u = &norm.universe;
    let one = || Polynomial::constant(u, 1.0);
    let family = if identity == "lie" {
        "lie"
    } else if identity.starts_with("state_") {
        "state"
    } else if identity.starts_with("target_") {
        "target"
    } else {
        return None;
    };
    let suffix = identity.split('_').nth(1).unwrap_or("");
    match (family, slot) {
        ("lie", "s0") => Some(one()),
        ("lie", "s1") => Some(norm.ball_polynomial()),
        ("lie", "s2") => Some(norm.time_window_polynomial()),
        ("lie", s) => {
            let r: usize = s.strip_prefix("s'_")?.parse().ok()?;
            norm.disturbance_set.get(r.checked_sub(1)?).cloned()
        }
        ("state", s) => {
            let (head, idx) = s.split_once('_')?;
            if idx != suffix {
                return None;
            }
            match head {
                "s3" => Some(one()),
                "s4" => Some(norm.ball_polynomial()),
                "s5" => Some(norm.time_window_polynomial()),
                _ => None,
            }
        }
        ("target", s) => {
            let (head, idx) = s.split_once('_')?;
            if idx != suffix {
                return None;
            }
            match head {
                "s6" => Some(one()),
                "s7" => Some(norm.ball_polynomial()),
                _ => None,
            }
        }
        _ => None,
    }
}

fn worst_term(p: &Polynomial) -> (f64, String) {
    let names = p.universe().names();
    let mut best = (0.0, "1".to_string());
    for (m, c) in p.terms() {
        if c.abs() > best.0 {
            best = (c.abs(), m.display_with(names).to_string());
        }
    }
    best
}

/// Recomputes residuals and eigenvalues from first principles.
fn diagnose(
    norm: &ReachSpec,
    psi: &Polynomial,
    multipliers: &[MultiplierRecord],
) -> Result<Diagnostics, CertifyError> {
    let u = &norm.universe;
    let lhs = identity_lhs(norm, psi)?;
    let mut rhs: HashMap<&str, Polynomial> = HashMap::new();
    let mut min_eigenvalues = Vec::with_capacity(multipliers.len());
    for m in multipliers {
        if !lhs.iter().any(|(l, _)| *l == m.identity) {
            return Err(CertifyError::Malformed(format!("unknown identity {}", m.identity)));
        }
        let domain = slot_domain(&m.identity, &m.slot, norm).ok_or_else(|| {
            CertifyError::Malformed(format!("unknown multiplier slot {}", m.block_label()))
        })?;
        if m.basis.iter().any(|b| b.nvars() != u.len()) {
            return Err(CertifyError::Malformed(format!(
                "basis of {} has the wrong number of variables",
                m.block_label()
            )));
        }
        let q = m.gram_matrix()?;
        min_eigenvalues.push((m.block_label(), min_eigenvalue(&q)));
        let s = gram_polynomial(&m.basis, &q, u);
        let term = s.mul(&domain)?;
        let acc = rhs.entry(m.identity.as_str()).or_insert_with(|| Polynomial::zero(u));
        *acc = acc.add(&term)?;
    }
    let residuals = lhs
        .into_iter()
        .map(|(label, l)| {
            let r = match rhs.get(label.as_str()) {
                Some(s) => l.sub(s)?,
                None => l,
            };
            let (max_abs, worst_monomial) = worst_term(&r);
            Ok(IdentityResidual {
                identity: label,
                max_abs,
                worst_monomial,
            })
        })
        .collect::<Result<Vec<_>, CertifyError>>()?;
    Ok(Diagnostics {
        residuals,
        min_eigenvalues,
    })
}

// negated comparisons so that NaN fails
#[allow(clippy::neg_cmp_op_on_partial_ord)]
fn check(diag: &Diagnostics, th: &Thresholds) -> Result<(), CertifyError> {
    for r in &diag.residuals {
        if !(r.max_abs <= th.residual_tol) {
            return Err(CertifyError::ResidualExceeded {
                identity: r.identity.clone(),
                monomial: r.worst_monomial.clone(),
                residual: r.max_abs,
                tol: th.residual_tol,
            });
        }
    }
    for (block, e) in &diag.min_eigenvalues {
        if !(*e >= -th.eig_tol) {
            return Err(CertifyError::IndefiniteGram {
                block: block.clone(),
                min_eig: *e,
                tol: th.eig_tol,
            });
        }
    }
    Ok(())
}

/// Assembles and checks a certificate from `ψ~`'s coefficients and one Gram
/// matrix per block of the compiled program.
pub fn assemble(
    compiled: &CompiledProgram,
    cfg: &SolveConfig,
    psi_coefficients: &[f64],
    grams: &[DMatrix<f64>],
    solver: Option<SolverSummary>,
) -> Result<Certificate, CertifyError> {
    let prog = &compiled.program;
    if psi_coefficients.len() != prog.psi_basis.len() || grams.len() != compiled.blocks.len() {
        return Err(CertifyError::Malformed(format!(
            "expected {} coefficients and {} Gram matrices, got {} and {}",
            prog.psi_basis.len(),
            compiled.blocks.len(),
            psi_coefficients.len(),
            grams.len()
        )));
    }
    let thresholds = Thresholds::new(cfg.strict);
    let u = &prog.spec.universe;
    let psi_norm = prog.psi_from_coefficients(psi_coefficients);
    let multipliers: Vec<MultiplierRecord> = compiled
        .blocks
        .iter()
        .zip(grams)
        .map(|(info, q)| {
            let mut q = q.clone();
            let qt = q.transpose();
            q += qt;
            q *= 0.5;
            let n = info.basis.len();
            MultiplierRecord {
                identity: prog.constraints[info.identity].label.clone(),
                slot: info.label.clone(),
                basis: info.basis.clone(),
                gram: (0..n).map(|i| (0..n).map(|j| q[(i, j)]).collect()).collect(),
                polynomial: gram_polynomial(&info.basis, &q, u).to_canonical_string(),
                min_eigenvalue: min_eigenvalue(&q),
            }
        })
        .collect();
    let diag = diagnose(&prog.spec, &psi_norm, &multipliers)?;
    check(&diag, &thresholds)?;
    let objective_value = psi_coefficients
        .iter()
        .zip(&prog.objective)
        .map(|(c, w)| c * w)
        .sum();
    Ok(Certificate {
        format: FORMAT.to_string(),
        spec: prog.original.to_document(),
        spec_fingerprint: prog.original.fingerprint(),
        config: cfg.clone(),
        scaling: prog.scaling.clone(),
        psi: prog.scaling.to_original(&psi_norm).to_canonical_string(),
        psi_normalised: psi_norm.to_canonical_string(),
        objective_value,
        thresholds,
        solver,
        multipliers,
        residuals: diag.residuals,
    })
}

/// Certificate from an optimal SDP solution of `compiled`.
pub fn build_certificate(
    compiled: &CompiledProgram,
    cfg: &SolveConfig,
    solution: &SdpSolution,
) -> Result<Certificate, CertifyError> {
    if solution.status != SdpStatus::Optimal {
        return Err(CertifyError::NotOptimal(solution.status));
    }
    assemble(
        compiled,
        cfg,
        &solution.free,
        &solution.blocks,
        Some(SolverSummary::from(solution)),
    )
}

impl Certificate {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, CertifyError> {
        let c: Certificate = serde_json::from_str(text)?;
        if c.format != FORMAT {
            return Err(CertifyError::Malformed(format!("unsupported format {:?}", c.format)));
        }
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CertifyError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CertifyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CertifyError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|source| CertifyError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// The embedded problem in original coordinates.
    pub fn reach_spec(&self) -> Result<ReachSpec, CertifyError> {
        Ok(ReachSpec::from_document(&self.spec)?)
    }

    /// `ψ` in normalised coordinates.
    pub fn psi_normalised(&self, spec: &ReachSpec) -> Result<Polynomial, CertifyError> {
        Ok(parse_poly(&self.psi_normalised, &spec.universe)?)
    }

    /// `ψ` in original coordinates, derived from the normalised form.
    pub fn psi_polynomial(&self, spec: &ReachSpec) -> Result<Polynomial, CertifyError> {
        Ok(self.scaling.to_original(&self.psi_normalised(spec)?))
    }

    /// Copy with `ψ` replaced by `ψ - delta`. The result no longer satisfies
    /// its identities; it exists to check that validation catches unsound
    /// certificates.
    pub fn shifted(&self, delta: f64) -> Result<Certificate, CertifyError> {
        let spec = self.reach_spec()?;
        let c = Polynomial::constant(&spec.universe, delta);
        let norm = self.psi_normalised(&spec)?.sub(&c)?;
        let mut out = self.clone();
        out.psi = self.scaling.to_original(&norm).to_canonical_string();
        out.psi_normalised = norm.to_canonical_string();
        Ok(out)
    }

    /// Recomputes every diagnostic from the stored data and checks them
    /// against `thresholds` (the stored ones when `None`).
    pub fn verify(&self, thresholds: Option<Thresholds>) -> Result<Diagnostics, CertifyError> {
        let spec = self.reach_spec()?;
        let computed = spec.fingerprint();
        if computed != self.spec_fingerprint {
            return Err(CertifyError::FingerprintMismatch {
                stored: self.spec_fingerprint.clone(),
                computed,
            });
        }
        let n = spec.n_states();
        let expected_len = n + 1 + spec.universe.n_disturbances();
        if self.scaling.factors(n).len() != expected_len
            || self.scaling.h_norm.len() != spec.disturbance_set.len()
            || self.scaling.factors(n).iter().chain(&self.scaling.h_norm).any(|f| !(f.is_finite() && *f > 0.0))
        {
            return Err(CertifyError::Malformed("scaling does not fit the spec".into()));
        }
        let norm = self.scaling.normalise_spec(&spec);
        let psi = self.psi_normalised(&spec)?;
        if !psi.supported_on(&spec.universe.state_time_indices()) {
            return Err(CertifyError::Malformed("ψ depends on a disturbance variable".into()));
        }
        let diag = diagnose(&norm, &psi, &self.multipliers)?;
        check(&diag, &thresholds.unwrap_or(self.thresholds))?;
        Ok(diag)
    }

    /// Boundary tolerance for membership: `1e-9 (1 + max |coef ψ~|)`.
    pub fn boundary_tol(&self, spec: &ReachSpec) -> Result<f64, CertifyError> {
        Ok(1e-9 * (1.0 + self.psi_normalised(spec)?.max_abs_coefficient()))
    }

    /// Evaluation helper for the `t = 0` slice in original coordinates.
    pub fn initial_slice(&self) -> Result<InitialSlice, CertifyError> {
        let spec = self.reach_spec()?;
        let psi = self.psi_polynomial(&spec)?;
        let psi0 = psi.substitute(spec.universe.time_index(), 0.0);
        Ok(InitialSlice {
            eval: psi0.evaluator(),
            nvars: spec.universe.len(),
            n: spec.n_states(),
            ball_r: spec.ball_r,
            tol: self.boundary_tol(&spec)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Membership {
    Inside,
    Outside,
    Boundary,
}

/// `ψ(·, 0)` and the ball, ready for repeated queries.
#[derive(Debug, Clone)]
pub struct InitialSlice {
    eval: crate::poly::PolyEval,
    nvars: usize,
    n: usize,
    pub ball_r: f64,
    pub tol: f64,
}

impl InitialSlice {
    pub fn n_states(&self) -> usize {
        self.n
    }

    pub fn psi0(&self, x: &[f64]) -> f64 {
        let mut p = vec![0.0; self.nvars];
        p[..self.n].copy_from_slice(x);
        self.eval.eval(&p)
    }

    pub fn in_ball(&self, x: &[f64]) -> bool {
        self.ball_r - x.iter().map(|v| v * v).sum::<f64>() >= 0.0
    }

    /// Inside iff `ψ(x,0) <= -tol` within the ball; boundary if
    /// `|ψ(x,0)| <= tol` within the ball; outside otherwise.
    pub fn membership(&self, x: &[f64]) -> Membership {
        if !self.in_ball(x) {
            return Membership::Outside;
        }
        let v = self.psi0(x);
        if v.abs() <= self.tol {
            Membership::Boundary
        } else if v < 0.0 {
            Membership::Inside
        } else {
            Membership::Outside
        }
    }

    /// Uniform point in `B(0,R)`.
    pub fn sample_ball<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        sample_ball(self.n, self.ball_r.sqrt(), rng)
    }
}

/// Uniform sample from the ball of the given radius.
pub fn sample_ball<R: Rng>(n: usize, radius: f64, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let r = radius * rng.random::<f64>().powf(1.0 / n as f64);
    for a in &mut v {
        *a *= r / norm;
    }
    v
}

pub fn membership(cert: &Certificate, x: &[f64]) -> Result<Membership, CertifyError> {
    let slice = cert.initial_slice()?;
    if x.len() != slice.n || x.iter().any(|v| !v.is_finite()) {
        return Err(CertifyError::Malformed(format!(
            "query point must have {} finite coordinates",
            slice.n
        )));
    }
    Ok(slice.membership(x))
}

/// Outcome of the search for a point of `{ψ(x,0) <= 0} ∩ B(0,R)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmptinessReport {
    pub empty: bool,
    /// Smallest `ψ(x,0)` found in the ball and where.
    pub min_value: f64,
    pub argmin: Vec<f64>,
    pub samples: usize,
}

/// Monte-Carlo volume of `{ψ(x,0) <= 0} ∩ B(0,R)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaEstimate {
    pub volume: f64,
    pub std_error: f64,
    pub fraction: f64,
    pub samples: usize,
}

const AREA_CHUNK: usize = 1 << 16;

/// Uniform samples over the ball; chunk `k` uses stream `k` of `seed`, so the
/// estimate does not depend on the thread count.
pub fn estimate_area(cert: &Certificate, samples: usize, seed: u64) -> Result<AreaEstimate, CertifyError> {
    let slice = cert.initial_slice()?;
    let samples = samples.max(1);
    let chunks = samples.div_ceil(AREA_CHUNK);
    let hits: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let count = AREA_CHUNK.min(samples - c * AREA_CHUNK);
            (0..count)
                .filter(|_| slice.psi0(&slice.sample_ball(&mut rng)) <= 0.0)
                .count()
        })
        .sum();
    let ball = crate::moments::ball_moment(&vec![0; slice.n], slice.ball_r.sqrt(), slice.n);
    let p = hits as f64 / samples as f64;
    Ok(AreaEstimate {
        volume: ball * p,
        std_error: ball * (p * (1.0 - p) / samples as f64).sqrt(),
        fraction: p,
        samples,
    })
}

/// Sampled search for an inner point, refined by projected gradient steps
/// from the best samples. Empty means no point with `ψ(x,0) <= -tol` was found.
pub fn check_emptiness(cert: &Certificate, samples: usize, seed: u64) -> Result<EmptinessReport, CertifyError> {
    let slice = cert.initial_slice()?;
    let n = slice.n;
    let radius = slice.ball_r.sqrt();
    let samples = samples.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts: Vec<(f64, Vec<f64>)> = (0..samples)
        .map(|_| {
            let x = sample_ball(n, radius, &mut rng);
            (slice.psi0(&x), x)
        })
        .collect();
    pts.push((slice.psi0(&vec![0.0; n]), vec![0.0; n]));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts.truncate(16);
    let h = 1e-7 * radius;
    for (v, x) in &mut pts {
        let mut step = 0.05 * radius;
        for _ in 0..200 {
            let grad: Vec<f64> = (0..n)
                .map(|i| {
                    let mut a = x.clone();
                    let mut b = x.clone();
                    a[i] += h;
                    b[i] -= h;
                    (slice.psi0(&a) - slice.psi0(&b)) / (2.0 * h)
                })
                .collect();
            let gn = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if gn == 0.0 {
                break;
            }
            let mut cand: Vec<f64> = x.iter().zip(&grad).map(|(a, g)| a - step * g / gn).collect();
            let cn = cand.iter().map(|a| a * a).sum::<f64>().sqrt();
            if cn > radius {
                for a in &mut cand {
                    *a *= radius / cn;
                }
            }
            let cv = slice.psi0(&cand);
            if cv < *v {
                *v = cv;
                *x = cand;
            } else {
                step *= 0.5;
                if step < 1e-9 * radius {
                    break;
                }
            }
        }
    }
    let (min_value, argmin) = pts
        .into_iter()
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("at least one point");
    Ok(EmptinessReport {
        empty: min_value > -slice.tol,
        min_value,
        argmin,
        samples,
    })
}

/// Which plane of the state space to contour.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSpec {
    /// State indices of the horizontal and vertical axes.
    pub axes: (usize, usize),
    /// Values of all state coordinates; the two axis entries are ignored.
    pub fixed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LevelSetContour {
    /// Polylines of the zero level set; closed curves repeat their first point.
    pub curves: Vec<Vec<[f64; 2]>>,
    /// Grid spacing used, for error bounds.
    pub cell: [f64; 2],
}

impl LevelSetContour {
    /// CSV with header `curve_id,x,y`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("curve_id,x,y\n");
        for (id, c) in self.curves.iter().enumerate() {
            for p in c {
                s.push_str(&format!("{id},{:.12e},{:.12e}\n", p[0], p[1]));
            }
        }
        s
    }
}

/// Marching squares over node values `v[j][i]` at `(x0 + i dx, y0 + j dy)`.
/// Only segments whose endpoints both satisfy `keep` are emitted.
pub fn marching_squares(
    values: &[Vec<f64>],
    origin: [f64; 2],
    cell: [f64; 2],
    keep: impl Fn([f64; 2]) -> bool,
) -> Vec<Vec<[f64; 2]>> {
    let ny = values.len();
    if ny < 2 {
        return Vec::new();
    }
    let nx = values[0].len();
    // edge ids: horizontal edge (i,j)-(i+1,j) -> 2*(j*nx+i), vertical (i,j)-(i,j+1) -> 2*(j*nx+i)+1
    let node = |i: usize, j: usize| [origin[0] + i as f64 * cell[0], origin[1] + j as f64 * cell[1]];
    let crossing = |a: [f64; 2], b: [f64; 2], va: f64, vb: f64| {
        let t = if va == vb { 0.5 } else { va / (va - vb) };
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    };
    let mut points: HashMap<usize, [f64; 2]> = HashMap::new();
    let mut segments: Vec<(usize, usize)> = Vec::new();
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let v = [values[j][i], values[j][i + 1], values[j + 1][i + 1], values[j + 1][i]];
            // corners counter-clockwise from (i,j); "inside" means v < 0
            let code = v.iter().enumerate().fold(0u8, |c, (k, &val)| c | (((val < 0.0) as u8) << k));
            if code == 0 || code == 15 {
                continue;
            }
            let e_bottom = 2 * (j * nx + i);
            let e_right = 2 * (j * nx + i + 1) + 1;
            let e_top = 2 * ((j + 1) * nx + i);
            let e_left = 2 * (j * nx + i) + 1;
            let corners = [node(i, j), node(i + 1, j), node(i + 1, j + 1), node(i, j + 1)];
            let edge_pt = |e: usize| -> [f64; 2] {
                if e == e_bottom {
                    crossing(corners[0], corners[1], v[0], v[1])
                } else if e == e_right {
                    crossing(corners[1], corners[2], v[1], v[2])
                } else if e == e_top {
                    crossing(corners[3], corners[2], v[3], v[2])
                } else {
                    crossing(corners[0], corners[3], v[0], v[3])
                }
            };
            let centre_inside = (v.iter().sum::<f64>() / 4.0) < 0.0;
            let pairs: &[(usize, usize)] = match code {
                1 | 14 => &[(e_left, e_bottom)],
                2 | 13 => &[(e_bottom, e_right)],
                3 | 12 => &[(e_left, e_right)],
                4 | 11 => &[(e_right, e_top)],
                6 | 9 => &[(e_bottom, e_top)],
                7 | 8 => &[(e_left, e_top)],
                5 => {
                    if centre_inside {
                        &[(e_left, e_top), (e_bottom, e_right)]
                    } else {
                        &[(e_left, e_bottom), (e_right, e_top)]
                    }
                }
                10 => {
                    if centre_inside {
                        &[(e_left, e_bottom), (e_right, e_top)]
                    } else {
                        &[(e_left, e_top), (e_bottom, e_right)]
                    }
                }
                _ => unreachable!(),
            };
            for &(a, b) in pairs {
                let pa = *points.entry(a).or_insert_with(|| edge_pt(a));
                let pb = *points.entry(b).or_insert_with(|| edge_pt(b));
                if keep(pa) && keep(pb) {
                    segments.push((a, b));
                }
            }
        }
    }
    chain_segments(&segments, &points)
}

fn chain_segments(segments: &[(usize, usize)], points: &HashMap<usize, [f64; 2]>) -> Vec<Vec<[f64; 2]>> {
    let mut adj: HashMap<usize, Vec<usize>> = HashMap::new();
    for (k, &(a, b)) in segments.iter().enumerate() {
        adj.entry(a).or_default().push(k);
        adj.entry(b).or_default().push(k);
    }
    let mut used = vec![false; segments.len()];
    let mut curves = Vec::new();
    let walk = |start_seg: usize, from: usize, used: &mut Vec<bool>| -> Vec<usize> {
        let mut chain = vec![from];
        let mut seg = start_seg;
        let mut at = from;
        loop {
            used[seg] = true;
            let (a, b) = segments[seg];
            let next = if a == at { b } else { a };
            chain.push(next);
            at = next;
            match adj[&at].iter().find(|&&s| !used[s]) {
                Some(&s) => seg = s,
                None => break,
            }
        }
        chain
    };
    // open chains first, starting at endpoints of degree one, in a fixed order
    let mut ends: Vec<usize> = adj.iter().filter(|(_, v)| v.len() == 1).map(|(&e, _)| e).collect();
    ends.sort_unstable();
    for e in ends {
        let seg = adj[&e][0];
        if used[seg] {
            continue;
        }
        let chain = walk(seg, e, &mut used);
        curves.push(chain.iter().map(|id| points[id]).collect());
    }
    for k in 0..segments.len() {
        if used[k] {
            continue;
        }
        let chain = walk(k, segments[k].0, &mut used);
        curves.push(chain.iter().map(|id| points[id]).collect());
    }
    curves
}

/// Zero level set of `ψ(·,0)` inside `B(0,R)` on a `resolution²` grid
/// covering the ball's bounding box in the chosen plane.
pub fn contour2d(
    cert: &Certificate,
    resolution: usize,
    slice: Option<&SliceSpec>,
) -> Result<LevelSetContour, CertifyError> {
    let init = cert.initial_slice()?;
    let n = init.n;
    let slice = match slice {
        Some(s) => {
            if s.fixed.len() != n || s.axes.0 >= n || s.axes.1 >= n || s.axes.0 == s.axes.1 {
                return Err(CertifyError::Malformed(format!(
                    "slice needs two distinct axes below {n} and {n} fixed values"
                )));
            }
            s.clone()
        }
        None if n == 2 => SliceSpec {
            axes: (0, 1),
            fixed: vec![0.0, 0.0],
        },
        None => {
            return Err(CertifyError::Malformed(format!(
                "contour extraction needs 2 state variables or a slice, spec has {n}"
            )))
        }
    };
    if resolution < 2 {
        return Err(CertifyError::Malformed("contour resolution must be at least 2".into()));
    }
    let r = init.ball_r.sqrt();
    let h = 2.0 * r / (resolution - 1) as f64;
    let (ax, ay) = slice.axes;
    let at = |u: f64, v: f64| {
        let mut x = slice.fixed.clone();
        x[ax] = u;
        x[ay] = v;
        x
    };
    let values: Vec<Vec<f64>> = (0..resolution)
        .into_par_iter()
        .map(|j| {
            let yv = -r + j as f64 * h;
            (0..resolution).map(|i| init.psi0(&at(-r + i as f64 * h, yv))).collect()
        })
        .collect();
    let curves = marching_squares(&values, [-r, -r], [h, h], |p| init.in_ball(&at(p[0], p[1])));
    Ok(LevelSetContour { curves, cell: [h, h] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MultiplierPolicy;
    use crate::sdp::{solve, SolverOptions};
    use crate::soscompile::{build_sos_program, build_with_scaling, compile_to_sdp};

    /// One state, no disturbance: `x' = -x`, target and constraint `x^2 - 1/4`.
    fn toy_spec() -> ReachSpec {
        ReachSpec::from_json_bytes(
            br#"{"name": "toy", "state_vars": ["x"], "disturbance_vars": [],
                 "horizon": 1, "dynamics": ["-x"], "target": ["x^2 - 0.25"],
                 "state_constraints": ["x^2 - 0.25"], "disturbance_set": [], "ball_R": 1}"#,
        )
        .unwrap()
    }

    /// `ψ = C` with hand-chosen multipliers, in unscaled coordinates.
    fn constant_certificate(c: f64) -> Result<Certificate, CertifyError> {
        let spec = toy_spec();
        let mut cfg = SolveConfig::new(2);
        cfg.multipliers = MultiplierPolicy::Explicit { lie: 0, other: 0 };
        let prog = build_with_scaling(&spec, &cfg, Scaling::identity(&spec)).unwrap();
        let compiled = compile_to_sdp(prog);
        let mut coef = vec![0.0; compiled.program.psi_basis.len()];
        coef[0] = c;
        // ψ - g = C + 1/4 - x^2 = (C - 3/4) + (1 - x^2): s3 = C - 3/4, s4 = 1
        let grams: Vec<DMatrix<f64>> = compiled
            .blocks
            .iter()
            .map(|b| {
                let label = format!("{}:{}", compiled.program.constraints[b.identity].label, b.label);
                let v = match label.as_str() {
                    "state_1:s3_1" | "target_1:s6_1" => c - 0.75,
                    "state_1:s4_1" | "target_1:s7_1" => 1.0,
                    _ => 0.0,
                };
                DMatrix::from_element(1, 1, v)
            })
            .collect();
        assemble(&compiled, &cfg, &coef, &grams, None)
    }

    #[test]
    fn hand_built_constant_certificate_is_accepted() {
        let cert = constant_certificate(2.0).unwrap();
        let diag = cert.verify(None).unwrap();
        assert_eq!(diag.max_residual(), 0.0);
        assert!((cert.objective_value - 4.0).abs() < 1e-12, "{}", cert.objective_value);
        // with C < 3/4 the constant multiplier goes negative
        assert!(matches!(constant_certificate(0.5), Err(CertifyError::IndefiniteGram { .. })));
    }

    #[test]
    fn tampered_gram_is_rejected() {
        let mut cert = constant_certificate(2.0).unwrap();
        let m = cert.multipliers.iter_mut().find(|m| m.slot == "s3_1").unwrap();
        m.gram[0][0] += 1e-3;
        match cert.verify(None) {
            Err(CertifyError::ResidualExceeded { identity, monomial, residual, .. }) => {
                assert_eq!(identity, "state_1");
                assert_eq!(monomial, "1");
                assert!((residual - 1e-3).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stored_diagnostics_match_recomputation_after_json() {
        let cert = constant_certificate(2.0).unwrap();
        let back = Certificate::from_json(&cert.to_json()).unwrap();
        assert_eq!(back, cert);
        let diag = back.verify(None).unwrap();
        assert_eq!(diag.residuals, cert.residuals);
        for (m, (_, e)) in cert.multipliers.iter().zip(&diag.min_eigenvalues) {
            assert!((m.min_eigenvalue - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn fingerprint_is_checked() {
        let mut cert = constant_certificate(2.0).unwrap();
        cert.spec.ball_r = 1.5;
        assert!(matches!(cert.verify(None), Err(CertifyError::FingerprintMismatch { .. })));
    }

    #[test]
    fn membership_rules() {
        // ψ = x^2 - 1/4 is not a certificate but exercises the query logic
        let mut cert = constant_certificate(2.0).unwrap();
        cert.psi_normalised = "x^2 - 0.25".into();
        let slice = cert.initial_slice().unwrap();
        assert_eq!(slice.membership(&[0.0]), Membership::Inside);
        assert_eq!(slice.membership(&[0.5]), Membership::Boundary);
        assert_eq!(slice.membership(&[0.8]), Membership::Outside);
        // outside the ball regardless of ψ
        cert.psi_normalised = "-1".into();
        assert_eq!(membership(&cert, &[1.5]).unwrap(), Membership::Outside);
        assert_eq!(membership(&cert, &[0.9]).unwrap(), Membership::Inside);
    }

    #[test]
    fn toy_program_solves_to_a_verified_certificate() {
        let spec = toy_spec();
        let cfg = SolveConfig::new(4);
        let compiled = compile_to_sdp(build_sos_program(&spec, &cfg).unwrap());
        let sol = solve(&compiled.instance, &SolverOptions::from(cfg.sdp.clone()));
        let cert = build_certificate(&compiled, &cfg, &sol).unwrap();
        let diag = cert.verify(None).unwrap();
        assert!(diag.max_residual() <= 1e-6);
        assert!(diag.min_eigenvalue() >= -1e-7);
        // x' = -x contracts, so every point of X_0 reaches the target: the
        // origin must be certified
        assert_eq!(membership(&cert, &[0.0]).unwrap(), Membership::Inside);
        assert!(!check_emptiness(&cert, 1000, 1).unwrap().empty);
    }

    fn circle_cert(psi: &str) -> Certificate {
        let spec = ReachSpec::from_json_bytes(
            br#"{"name": "plane", "state_vars": ["x", "y"], "disturbance_vars": [],
                 "horizon": 1, "dynamics": ["-x", "-y"], "target": ["x^2 + y^2 - 1"],
                 "state_constraints": ["x^2 + y^2 - 1"], "disturbance_set": [], "ball_R": 2}"#,
        )
        .unwrap();
        Certificate {
            format: FORMAT.into(),
            spec: spec.to_document(),
            spec_fingerprint: spec.fingerprint(),
            config: SolveConfig::new(2),
            scaling: Scaling::identity(&spec),
            psi: psi.into(),
            psi_normalised: psi.into(),
            objective_value: 0.0,
            thresholds: Thresholds::default(),
            solver: None,
            multipliers: Vec::new(),
            residuals: Vec::new(),
        }
    }

    #[test]
    fn area_of_unit_disc_in_radius_two_ball() {
        let cert = circle_cert("x^2 + y^2 - 1");
        let a = estimate_area(&cert, 200_000, 3).unwrap();
        assert!((a.volume - std::f64::consts::PI).abs() < 4.0 * a.std_error);
        assert_eq!(a, estimate_area(&cert, 200_000, 3).unwrap());
    }

    #[test]
    fn shift_moves_the_level_set() {
        let cert = circle_cert("x^2 + y^2 - 1").shifted(0.5).unwrap();
        let spec = cert.reach_spec().unwrap();
        let p = cert.psi_polynomial(&spec).unwrap();
        assert!((p.eval(&[0.0, 0.0, 0.0]) + 1.5).abs() < 1e-15);
        assert_eq!(membership(&cert, &[1.1, 0.0]).unwrap(), Membership::Inside);
    }

    #[test]
    fn contour_of_unit_circle() {
        let cert = circle_cert("x^2 + y^2 - 1");
        let c = contour2d(&cert, 201, None).unwrap();
        assert_eq!(c.curves.len(), 1);
        let curve = &c.curves[0];
        assert_eq!(curve.first(), curve.last(), "closed curve");
        let diag = (c.cell[0] * c.cell[0] + c.cell[1] * c.cell[1]).sqrt();
        for p in curve {
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!((r - 1.0).abs() <= 2.0 * diag);
        }
        assert!(c.to_csv().starts_with("curve_id,x,y\n0,"));
    }

    #[test]
    fn contour_of_empty_set() {
        let cert = circle_cert("1");
        let c = contour2d(&cert, 50, None).unwrap();
        assert!(c.curves.is_empty());
        assert_eq!(c.to_csv(), "curve_id,x,y\n");
        assert!(check_emptiness(&cert, 500, 3).unwrap().empty);
    }

    #[test]
    fn contour_is_clipped_to_the_ball() {
        // circle of radius 1.6 lies outside the ball of radius sqrt(2)
        let cert = circle_cert("x^2 + y^2 - 2.56");
        assert!(contour2d(&cert, 101, None).unwrap().curves.is_empty());
    }

    #[test]
    fn contour_needs_two_dimensions() {
        let cert = constant_certificate(2.0).unwrap();
        assert!(contour2d(&cert, 10, None).is_err());
    }
}
