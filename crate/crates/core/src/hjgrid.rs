//! Grid solver for the obstacle Hamilton-Jacobi equation on 2-D state
//! spaces:
//!
//! ```text
//! max{ ∂_t u + H(x, ∇u), max_i g_i(x,t) - u } = 0,   H(x,p) = max_{d∈D} p·f(x,d)
//! u(x,T) = max{ max_j l_j(x), max_i g_i(x,T) }
//! ```
//!
//! integrated backward from `T` with explicit Euler steps and a first-order
//! Lax-Friedrichs numerical Hamiltonian. The zero sub-level set of `u(·,0)`
//! is the robust reach-avoid set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certify::{marching_squares, LevelSetContour};
use crate::disturbance::{DisturbanceError, DisturbanceSet};
use crate::model::ReachSpec;
use crate::poly::{PolyEval, Polynomial};

#[derive(Debug, Error)]
pub enum HjError {
    #[error("grid solver needs exactly 2 state variables, spec has {0}")]
    Dimension(usize),
    #[error("grid needs at least 3 nodes per axis, got {0}")]
    TooFewNodes(usize),
    #[error("time step {dt:.3e} violates the CFL bound {bound:.3e}")]
    Cfl { dt: f64, bound: f64 },
    #[error("point ({0}, {1}) lies outside the grid")]
    OutOfBounds(f64, f64),
    #[error("non-finite value at node ({0}, {1})")]
    NonFinite(usize, usize),
    #[error(transparent)]
    Disturbance(#[from] DisturbanceError),
}

/// Samples per disturbance axis when the dynamics are not affine in `d`.
pub const D_GRID: usize = 21;
/// Fraction of the CFL bound used by [`solve`].
pub const CFL_SAFETY: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub nodes: [usize; 2],
}

impl GridGeometry {
    pub fn new(lo: [f64; 2], hi: [f64; 2], nodes: [usize; 2]) -> Result<Self, HjError> {
        for &n in &nodes {
            if n < 3 {
                return Err(HjError::TooFewNodes(n));
            }
        }
        Ok(GridGeometry { lo, hi, nodes })
    }

    /// Bounding box of `B(0,R)` inflated by 10%, `n × n` nodes.
    pub fn for_spec(spec: &ReachSpec, n: usize) -> Result<Self, HjError> {
        let h = 1.1 * spec.ball_r.sqrt();
        Self::new([-h, -h], [h, h], [n, n])
    }

    pub fn spacing(&self) -> [f64; 2] {
        [
            (self.hi[0] - self.lo[0]) / (self.nodes[0] - 1) as f64,
            (self.hi[1] - self.lo[1]) / (self.nodes[1] - 1) as f64,
        ]
    }

    pub fn node(&self, i: usize, j: usize) -> [f64; 2] {
        let h = self.spacing();
        [self.lo[0] + i as f64 * h[0], self.lo[1] + j as f64 * h[1]]
    }

    fn len(&self) -> usize {
        self.nodes[0] * self.nodes[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridField {
    pub geometry: GridGeometry,
    /// Row-major node values, index `j * nx + i`.
    pub values: Vec<f64>,
    pub time: f64,
}

impl GridField {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.geometry.nodes[0] + i]
    }

    /// CSV with header `x,y,u`.
    pub fn to_csv(&self) -> String {
        let [nx, ny] = self.geometry.nodes;
        let mut s = String::with_capacity(nx * ny * 48 + 8);
        s.push_str("x,y,u\n");
        for j in 0..ny {
            for i in 0..nx {
                let p = self.geometry.node(i, j);
                s.push_str(&format!("{:.10e},{:.10e},{:.10e}\n", p[0], p[1], self.at(i, j)));
            }
        }
        s
    }

    /// Zero level set by marching squares.
    pub fn zero_contour(&self) -> LevelSetContour {
        let [nx, ny] = self.geometry.nodes;
        let rows: Vec<Vec<f64>> = (0..ny).map(|j| self.values[j * nx..(j + 1) * nx].to_vec()).collect();
        let cell = self.geometry.spacing();
        LevelSetContour {
            curves: marching_squares(&rows, self.geometry.lo, cell, |_| true),
            cell,
        }
    }
}

/// Per-node precomputed dynamics and obstacle data for one spec and grid.
pub struct HjProblem {
    geometry: GridGeometry,
    /// Affine case: `f0` and `f1[k]` per node and axis; sampled case: `f` per
    /// node, axis and disturbance sample.
    drift: Vec<[f64; 2]>,
    gains: Vec<Vec<[f64; 2]>>,
    samples: Vec<Vec<[f64; 2]>>,
    dset: Option<DisturbanceSet>,
    affine: bool,
    constraints: Vec<PolyEval>,
    n_vars: usize,
    /// Dissipation coefficients `α_i`.
    pub alpha: [f64; 2],
}

fn eval_at(p: &PolyEval, buf: &mut [f64], x: [f64; 2], t: f64, d: &[f64]) -> f64 {
    buf[0] = x[0];
    buf[1] = x[1];
    buf[2] = t;
    buf[3..3 + d.len()].copy_from_slice(d);
    p.eval(buf)
}

/// Disturbance samples for the non-affine case: a regular grid of the box
/// filtered by membership, plus the extreme points.
fn d_samples(set: &DisturbanceSet) -> Vec<Vec<f64>> {
    let m = set.dim();
    let mut out = set.extreme_points();
    let total = D_GRID.pow(m as u32);
    for idx in 0..total {
        let mut rest = idx;
        let d: Vec<f64> = (0..m)
            .map(|k| {
                let a = rest % D_GRID;
                rest /= D_GRID;
                set.lo[k] + (set.hi[k] - set.lo[k]) * a as f64 / (D_GRID - 1) as f64
            })
            .collect();
        if set.contains(&d) {
            out.push(d);
        }
    }
    out
}

impl HjProblem {
    pub fn new(spec: &ReachSpec, geometry: GridGeometry) -> Result<Self, HjError> {
        if spec.n_states() != 2 {
            return Err(HjError::Dimension(spec.n_states()));
        }
        let u = &spec.universe;
        let m = u.n_disturbances();
        let dset = if m > 0 { Some(DisturbanceSet::from_spec(spec)?) } else { None };
        let affine = spec.is_affine_in_disturbance();
        let nv = u.len();
        let len = geometry.len();
        let nx = geometry.nodes[0];
        let mut drift = vec![[0.0; 2]; len];
        let mut gains = vec![vec![[0.0; 2]; m]; if affine { len } else { 0 }];
        let mut samples = Vec::new();
        let mut alpha = [0.0f64; 2];
        if affine {
            // f = f0(x) + Σ_k f1_k(x) d_k
            let f0: Vec<PolyEval> = spec
                .dynamics
                .iter()
                .map(|f| {
                    let mut p = f.clone();
                    for k in 0..m {
                        p = p.substitute(u.disturbance_index(k), 0.0);
                    }
                    p.evaluator()
                })
                .collect();
            let f1: Vec<Vec<PolyEval>> = spec
                .dynamics
                .iter()
                .map(|f| {
                    (0..m)
                        .map(|k| {
                            let mut p = f.partial_index(u.disturbance_index(k));
                            for kk in 0..m {
                                p = p.substitute(u.disturbance_index(kk), 0.0);
                            }
                            p.evaluator()
                        })
                        .collect()
                })
                .collect();
            let half = dset.as_ref().map(|s| s.half_widths()).unwrap_or_default();
            let zero_d = vec![0.0; m];
            let mut buf = vec![0.0; nv];
            for j in 0..geometry.nodes[1] {
                for i in 0..nx {
                    let x = geometry.node(i, j);
                    let n = j * nx + i;
                    for a in 0..2 {
                        drift[n][a] = eval_at(&f0[a], &mut buf, x, 0.0, &zero_d);
                        let mut bound = drift[n][a].abs();
                        for k in 0..m {
                            let g = eval_at(&f1[a][k], &mut buf, x, 0.0, &zero_d);
                            gains[n][k][a] = g;
                            bound += g.abs() * half[k];
                        }
                        alpha[a] = alpha[a].max(bound);
                    }
                }
            }
        } else {
            let ds = d_samples(dset.as_ref().expect("non-affine dynamics have disturbances"));
            let fs: Vec<PolyEval> = spec.dynamics.iter().map(Polynomial::evaluator).collect();
            let mut buf = vec![0.0; nv];
            samples = vec![Vec::with_capacity(ds.len()); len];
            for j in 0..geometry.nodes[1] {
                for i in 0..nx {
                    let x = geometry.node(i, j);
                    let n = j * nx + i;
                    for d in &ds {
                        let v = [eval_at(&fs[0], &mut buf, x, 0.0, d), eval_at(&fs[1], &mut buf, x, 0.0, d)];
                        alpha[0] = alpha[0].max(v[0].abs());
                        alpha[1] = alpha[1].max(v[1].abs());
                        samples[n].push(v);
                    }
                }
            }
        }
        Ok(HjProblem {
            geometry,
            drift,
            gains,
            samples,
            dset,
            affine,
            constraints: spec.state_constraints.iter().map(Polynomial::evaluator).collect(),
            n_vars: nv,
            alpha,
        })
    }

    /// `H(x_n, p) = max_d p·f(x_n, d)`.
    pub fn hamiltonian(&self, node: usize, p: [f64; 2]) -> f64 {
        if self.affine {
            let base = p[0] * self.drift[node][0] + p[1] * self.drift[node][1];
            match &self.dset {
                Some(set) => {
                    let c: Vec<f64> = self.gains[node].iter().map(|g| p[0] * g[0] + p[1] * g[1]).collect();
                    base + set.linear_max(&c)
                }
                None => base,
            }
        } else {
            self.samples[node]
                .iter()
                .map(|f| p[0] * f[0] + p[1] * f[1])
                .fold(f64::NEG_INFINITY, f64::max)
        }
    }

    /// Largest stable step: `0.5 min(Δx_i) / Σ α_i`.
    pub fn cfl_bound(&self) -> f64 {
        let h = self.geometry.spacing();
        let s = self.alpha[0] + self.alpha[1];
        if s == 0.0 {
            f64::INFINITY
        } else {
            0.5 * h[0].min(h[1]) / s
        }
    }

    fn obstacle(&self, buf: &mut [f64], x: [f64; 2], t: f64) -> f64 {
        self.constraints
            .iter()
            .map(|g| eval_at(g, buf, x, t, &[]))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn terminal_field(&self, spec: &ReachSpec) -> GridField {
        let geo = self.geometry;
        let nx = geo.nodes[0];
        let t = spec.horizon;
        let ls: Vec<PolyEval> = spec.target.iter().map(Polynomial::evaluator).collect();
        let values = (0..geo.len())
            .into_par_iter()
            .map_init(
                || vec![0.0; self.n_vars],
                |buf, n| {
                    let x = geo.node(n % nx, n / nx);
                    let l = ls.iter().map(|l| eval_at(l, buf, x, t, &[])).fold(f64::NEG_INFINITY, f64::max);
                    l.max(self.obstacle(buf, x, t))
                },
            )
            .collect();
        GridField {
            geometry: geo,
            values,
            time: t,
        }
    }

    /// One backward step from `field.time` to `field.time - dt`.
    pub fn step_back(&self, field: &GridField, dt: f64) -> Result<GridField, HjError> {
        let bound = self.cfl_bound();
        if !(dt > 0.0 && dt <= bound * (1.0 + 1e-12)) {
            return Err(HjError::Cfl { dt, bound });
        }
        let geo = self.geometry;
        let [nx, ny] = geo.nodes;
        let [hx, hy] = geo.spacing();
        let u = &field.values;
        let t_new = field.time - dt;
        let mut values: Vec<f64> = (0..ny)
            .into_par_iter()
            .flat_map_iter(|j| {
                let mut buf = vec![0.0; self.n_vars];
                (0..nx)
                    .map(|i| {
                        let n = j * nx + i;
                        let c = u[n];
                        // one-sided at the boundary: the missing difference copies the other one
                        let dxm = (i > 0).then(|| (c - u[n - 1]) / hx);
                        let dxp = (i + 1 < nx).then(|| (u[n + 1] - c) / hx);
                        let dym = (j > 0).then(|| (c - u[n - nx]) / hy);
                        let dyp = (j + 1 < ny).then(|| (u[n + nx] - c) / hy);
                        let (pxm, pxp) = (dxm.or(dxp).unwrap_or(0.0), dxp.or(dxm).unwrap_or(0.0));
                        let (pym, pyp) = (dym.or(dyp).unwrap_or(0.0), dyp.or(dym).unwrap_or(0.0));
                        let avg = [0.5 * (pxm + pxp), 0.5 * (pym + pyp)];
                        let lf = self.hamiltonian(n, avg)
                            + 0.5 * self.alpha[0] * (pxp - pxm)
                            + 0.5 * self.alpha[1] * (pyp - pym);
                        let euler = c + dt * lf;
                        euler.max(self.obstacle(&mut buf, geo.node(i, j), t_new))
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        // boundary nodes: linear extrapolation from the interior, never below the obstacle
        let mut buf = vec![0.0; self.n_vars];
        let mut clamp = |values: &mut Vec<f64>, i: usize, j: usize, a: usize, b: usize| {
            let e = 2.0 * values[a] - values[b];
            let n = j * nx + i;
            values[n] = values[n].max(e).max(self.obstacle(&mut buf, geo.node(i, j), t_new));
        };
        for j in 0..ny {
            clamp(&mut values, 0, j, j * nx + 1, j * nx + 2);
            clamp(&mut values, nx - 1, j, j * nx + nx - 2, j * nx + nx - 3);
        }
        for i in 0..nx {
            clamp(&mut values, i, 0, nx + i, 2 * nx + i);
            clamp(&mut values, i, ny - 1, (ny - 2) * nx + i, (ny - 3) * nx + i);
        }
        if let Some(n) = values.iter().position(|v| !v.is_finite()) {
            return Err(HjError::NonFinite(n % nx, n / nx));
        }
        Ok(GridField {
            geometry: geo,
            values,
            time: t_new,
        })
    }
}

pub fn terminal_field(spec: &ReachSpec, geometry: GridGeometry) -> Result<GridField, HjError> {
    Ok(HjProblem::new(spec, geometry)?.terminal_field(spec))
}

/// Runs from `T` to `0` with equal steps at [`CFL_SAFETY`] of the CFL bound.
pub fn solve(spec: &ReachSpec, geometry: GridGeometry) -> Result<GridField, HjError> {
    let prob = HjProblem::new(spec, geometry)?;
    let mut field = prob.terminal_field(spec);
    let bound = prob.cfl_bound();
    let steps = if bound.is_finite() {
        (spec.horizon / (CFL_SAFETY * bound)).ceil().max(1.0) as usize
    } else {
        1
    };
    let dt = spec.horizon / steps as f64;
    for s in 0..steps {
        field = prob.step_back(&field, dt)?;
        if s + 1 == steps {
            field.time = 0.0;
        }
    }
    Ok(field)
}

/// Bilinear interpolation.
pub fn value_at(field: &GridField, x: [f64; 2]) -> Result<f64, HjError> {
    let geo = &field.geometry;
    let h = geo.spacing();
    let eps = 1e-12;
    let mut idx = [0usize; 2];
    let mut frac = [0.0; 2];
    for a in 0..2 {
        let s = (x[a] - geo.lo[a]) / h[a];
        let last = (geo.nodes[a] - 1) as f64;
        if !(s >= -eps && s <= last + eps) {
            return Err(HjError::OutOfBounds(x[0], x[1]));
        }
        let s = s.clamp(0.0, last);
        let i = (s.floor() as usize).min(geo.nodes[a] - 2);
        idx[a] = i;
        frac[a] = s - i as f64;
    }
    let [i, j] = idx;
    let [fx, fy] = frac;
    let v00 = field.at(i, j);
    let v10 = field.at(i + 1, j);
    let v01 = field.at(i, j + 1);
    let v11 = field.at(i + 1, j + 1);
    Ok((1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11))
}

/// Largest disagreement between a coarse and a fine field, evaluated at the
/// coarse nodes by interpolating the fine one.
pub fn refinement_gap(coarse: &GridField, fine: &GridField) -> Result<f64, HjError> {
    let [nx, ny] = coarse.geometry.nodes;
    let mut worst = 0.0f64;
    for j in 0..ny {
        for i in 0..nx {
            let v = value_at(fine, coarse.geometry.node(i, j))?;
            worst = worst.max((v - coarse.at(i, j)).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex1() -> ReachSpec {
        ReachSpec::from_json_bytes(crate::model::tests_support::ex1_json(1.21).as_bytes()).unwrap()
    }

    #[test]
    fn terminal_values_of_example_one() {
        let spec = ex1();
        // 23 nodes on [-1.21, 1.21] put nodes at 0 and 1.1; use a custom grid instead
        let geo = GridGeometry::new([-1.0, -1.0], [1.0, 1.0], [3, 3]).unwrap();
        let f = terminal_field(&spec, geo).unwrap();
        assert!((f.at(1, 1) + 0.64).abs() < 1e-15);
        assert!((f.at(2, 1) - 0.36).abs() < 1e-15);
    }

    #[test]
    fn identical_target_and_constraint() {
        let spec = ReachSpec::from_json_bytes(
            br#"{"name": "same", "state_vars": ["x", "y"], "disturbance_vars": [],
                 "horizon": 1, "dynamics": ["0", "0"], "target": ["x^2 + y^2 - 0.5"],
                 "state_constraints": ["x^2 + y^2 - 0.5"], "disturbance_set": [], "ball_R": 1}"#,
        )
        .unwrap();
        let geo = GridGeometry::for_spec(&spec, 11).unwrap();
        let f = terminal_field(&spec, geo).unwrap();
        for j in 0..11 {
            for i in 0..11 {
                let p = geo.node(i, j);
                assert!((f.at(i, j) - (p[0] * p[0] + p[1] * p[1] - 0.5)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_dynamics_only_applies_the_obstacle_floor() {
        let spec = ReachSpec::from_json_bytes(
            br#"{"name": "still", "state_vars": ["x", "y"], "disturbance_vars": [],
                 "horizon": 1, "dynamics": ["0", "0"], "target": ["x^2 + y^2 - 0.5"],
                 "state_constraints": ["-1"], "disturbance_set": [], "ball_R": 1}"#,
        )
        .unwrap();
        let geo = GridGeometry::for_spec(&spec, 21).unwrap();
        let prob = HjProblem::new(&spec, geo).unwrap();
        let f0 = prob.terminal_field(&spec);
        let f1 = prob.step_back(&f0, 0.1).unwrap();
        for j in 1..20 {
            for i in 1..20 {
                assert_eq!(f1.at(i, j), f0.at(i, j).max(-1.0));
            }
        }
    }

    #[test]
    fn affine_hamiltonian_matches_brute_force() {
        let spec = ex1();
        let geo = GridGeometry::for_spec(&spec, 9).unwrap();
        let prob = HjProblem::new(&spec, geo).unwrap();
        let fs: Vec<PolyEval> = spec.dynamics.iter().map(Polynomial::evaluator).collect();
        for (n, p) in [(10usize, [0.3, -1.2]), (40, [-2.0, 0.5]), (77, [1.0, 1.0])] {
            let x = geo.node(n % 9, n / 9);
            let brute = (0..101)
                .map(|k| {
                    let d = -0.01 + 0.02 * k as f64 / 100.0;
                    let pt = [x[0], x[1], 0.0, d];
                    p[0] * fs[0].eval(&pt) + p[1] * fs[1].eval(&pt)
                })
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((prob.hamiltonian(n, p) - brute).abs() <= 1e-12);
        }
    }

    #[test]
    fn cfl_violation_is_rejected() {
        let spec = ex1();
        let prob = HjProblem::new(&spec, GridGeometry::for_spec(&spec, 51).unwrap()).unwrap();
        let f = prob.terminal_field(&spec);
        let dt = 2.0 * prob.cfl_bound();
        assert!(matches!(prob.step_back(&f, dt), Err(HjError::Cfl { .. })));
    }

    #[test]
    fn grid_and_dimension_checks() {
        assert!(matches!(GridGeometry::new([0.0; 2], [1.0; 2], [2, 5]), Err(HjError::TooFewNodes(2))));
        let spec = ReachSpec::from_json_bytes(
            br#"{"name": "line", "state_vars": ["x"], "disturbance_vars": [],
                 "horizon": 1, "dynamics": ["0"], "target": ["x^2 - 0.5"],
                 "state_constraints": ["x^2 - 0.5"], "disturbance_set": [], "ball_R": 1}"#,
        )
        .unwrap();
        assert!(matches!(
            HjProblem::new(&spec, GridGeometry::new([0.0; 2], [1.0; 2], [3, 3]).unwrap()),
            Err(HjError::Dimension(1))
        ));
    }

    #[test]
    fn interpolation_rules() {
        let geo = GridGeometry::new([0.0, 0.0], [2.0, 2.0], [3, 3]).unwrap();
        let values: Vec<f64> = (0..9).map(|k| k as f64).collect();
        let f = GridField {
            geometry: geo,
            values,
            time: 0.0,
        };
        assert_eq!(value_at(&f, [1.0, 2.0]).unwrap(), 7.0);
        let flat = GridField {
            geometry: geo,
            values: vec![2.5; 9],
            time: 0.0,
        };
        assert_eq!(value_at(&flat, [0.5, 1.5]).unwrap(), 2.5);
        assert!(matches!(value_at(&f, [2.5, 0.0]), Err(HjError::OutOfBounds(..))));
    }

    #[test]
    fn obstacle_holds_after_every_step() {
        let spec = ex1();
        let geo = GridGeometry::for_spec(&spec, 41).unwrap();
        let prob = HjProblem::new(&spec, geo).unwrap();
        let mut f = prob.terminal_field(&spec);
        let dt = prob.cfl_bound();
        for _ in 0..20 {
            f = prob.step_back(&f, dt).unwrap();
            for j in 0..41 {
                for i in 0..41 {
                    let p = geo.node(i, j);
                    assert!(f.at(i, j) >= p[0] * p[0] + p[1] * p[1] - 1.0 - 1e-12);
                }
            }
        }
    }

    #[test]
    fn nominal_outcomes_in_example_one() {
        // the nominal flow from (-0.3, -0.5) ends at squared radius 0.27,
        // the one from the origin at 0.665
        let spec = ex1();
        let f = solve(&spec, GridGeometry::for_spec(&spec, 101).unwrap()).unwrap();
        assert_eq!(f.time, 0.0);
        assert!(value_at(&f, [-0.3, -0.5]).unwrap() < -0.2);
        assert!(value_at(&f, [0.0, 0.0]).unwrap() > 0.0);
    }
}
