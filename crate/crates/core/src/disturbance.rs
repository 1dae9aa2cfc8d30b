//! Bounding boxes and extreme points of the disturbance set
//! `D = {d : h_r(d) >= 0}`.
//!
//! Bounds are read off constraints of the recognised shapes
//! `c - Σ a_k d_k^2` (a ball or ellipsoid centred at zero) and `a d_k + c`
//! (a half-line). Any other constraint only shrinks `D` and is enforced by
//! rejection, so the box stays a valid outer bound.

use rand::Rng;
use thiserror::Error;

use crate::model::ReachSpec;
use crate::poly::{PolyEval, Polynomial};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DisturbanceError {
    #[error("cannot bound disturbance `{0}`: add a constraint of the form c - d^2 >= 0")]
    Unbounded(String),
    #[error("disturbance set is empty or degenerate (no feasible sample after {0} draws)")]
    Degenerate(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// `D` is exactly the box.
    Box,
    /// `D` is exactly the centred ball of this radius.
    Ball(f64),
    /// Anything else; the box is only an outer bound.
    General,
}

#[derive(Debug, Clone)]
pub struct DisturbanceSet {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub shape: Shape,
    constraints: Vec<PolyEval>,
    n_states: usize,
}

pub const MAX_REJECTION_DRAWS: usize = 100_000;

enum Recognised {
    /// `c - Σ a_k d_k^2` with `a_k > 0` over the listed disturbance slots.
    Quadratic { c: f64, a: Vec<(usize, f64)> },
    /// `a d_k + c >= 0`.
    Linear { k: usize, a: f64, c: f64 },
    Other,
}

fn recognise(h: &Polynomial, n_states: usize) -> Recognised {
    let first_d = n_states + 1;
    let mut c = 0.0;
    let mut quad = Vec::new();
    let mut lin = Vec::new();
    for (m, coef) in h.terms() {
        if m.is_one() {
            c = coef;
            continue;
        }
        let nz: Vec<(usize, u16)> = m
            .exponents()
            .iter()
            .enumerate()
            .filter(|(_, &e)| e > 0)
            .map(|(i, &e)| (i, e))
            .collect();
        match nz.as_slice() {
            [(i, 2)] if *i >= first_d && coef < 0.0 => quad.push((i - first_d, -coef)),
            [(i, 1)] if *i >= first_d => lin.push((i - first_d, coef)),
            _ => return Recognised::Other,
        }
    }
    match (quad.is_empty(), lin.as_slice()) {
        (false, []) if c > 0.0 => Recognised::Quadratic { c, a: quad },
        (true, [(k, a)]) => Recognised::Linear { k: *k, a: *a, c },
        _ => Recognised::Other,
    }
}

impl DisturbanceSet {
    pub fn from_spec(spec: &ReachSpec) -> Result<Self, DisturbanceError> {
        let m = spec.universe.n_disturbances();
        let n = spec.n_states();
        let mut lo = vec![f64::NEG_INFINITY; m];
        let mut hi = vec![f64::INFINITY; m];
        let mut per_axis_only = true;
        let mut ball = None;
        for h in &spec.disturbance_set {
            match recognise(h, n) {
                Recognised::Quadratic { c, a } => {
                    for &(k, ak) in &a {
                        let b = (c / ak).sqrt();
                        lo[k] = lo[k].max(-b);
                        hi[k] = hi[k].min(b);
                    }
                    if a.len() > 1 {
                        per_axis_only = false;
                        let same = a.iter().all(|&(_, ak)| ak == a[0].1);
                        if same && a.len() == m && spec.disturbance_set.len() == 1 {
                            ball = Some((c / a[0].1).sqrt());
                        }
                    }
                }
                Recognised::Linear { k, a, c } => {
                    let b = -c / a;
                    if a > 0.0 {
                        lo[k] = lo[k].max(b);
                    } else {
                        hi[k] = hi[k].min(b);
                    }
                }
                Recognised::Other => per_axis_only = false,
            }
        }
        for k in 0..m {
            if !(lo[k].is_finite() && hi[k].is_finite()) {
                return Err(DisturbanceError::Unbounded(
                    spec.universe.disturbance_vars()[k].clone(),
                ));
            }
        }
        let shape = match ball {
            Some(r) => Shape::Ball(r),
            None if per_axis_only => Shape::Box,
            None => Shape::General,
        };
        Ok(DisturbanceSet {
            lo,
            hi,
            shape,
            constraints: spec.disturbance_set.iter().map(Polynomial::evaluator).collect(),
            n_states: n,
        })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Largest absolute coordinate of the box along each axis.
    pub fn half_widths(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| l.abs().max(h.abs()))
            .collect()
    }

    pub fn contains(&self, d: &[f64]) -> bool {
        let mut pt = vec![0.0; self.n_states + 1];
        pt.extend_from_slice(d);
        self.constraints.iter().all(|h| h.eval(&pt) >= 0.0)
    }

    /// Uniform draw from `D` by rejection inside the box.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<Vec<f64>, DisturbanceError> {
        let mut d = vec![0.0; self.dim()];
        for _ in 0..MAX_REJECTION_DRAWS {
            for (k, v) in d.iter_mut().enumerate() {
                *v = if self.lo[k] < self.hi[k] {
                    rng.random_range(self.lo[k]..=self.hi[k])
                } else {
                    self.lo[k]
                };
            }
            if self.contains(&d) {
                return Ok(d);
            }
        }
        Err(DisturbanceError::Degenerate(MAX_REJECTION_DRAWS))
    }

    /// The `2^m` box vertices, each pulled radially toward the box centre
    /// until it lies in `D`. Vertex order: bit `k` of the index selects
    /// `hi[k]` over `lo[k]`.
    pub fn extreme_points(&self) -> Vec<Vec<f64>> {
        let m = self.dim();
        let centre: Vec<f64> = self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)).collect();
        (0..(1usize << m))
            .map(|mask| {
                let v: Vec<f64> = (0..m)
                    .map(|k| if mask >> k & 1 == 1 { self.hi[k] } else { self.lo[k] })
                    .collect();
                if self.contains(&v) {
                    return v;
                }
                let at = |s: f64| -> Vec<f64> {
                    centre.iter().zip(&v).map(|(c, x)| c + s * (x - c)).collect()
                };
                let (mut a, mut b) = (0.0, 1.0);
                for _ in 0..60 {
                    let mid = 0.5 * (a + b);
                    if self.contains(&at(mid)) {
                        a = mid;
                    } else {
                        b = mid;
                    }
                }
                at(a)
            })
            .collect()
    }

    /// Candidate maximisers of a linear function over `D`: exact for box
    /// and ball shapes, a boundary sample set otherwise.
    pub fn linear_max(&self, c: &[f64]) -> f64 {
        match self.shape {
            Shape::Ball(r) => r * c.iter().map(|v| v * v).sum::<f64>().sqrt(),
            Shape::Box => c
                .iter()
                .enumerate()
                .map(|(k, &ck)| (ck * self.lo[k]).max(ck * self.hi[k]))
                .sum(),
            Shape::General => self
                .extreme_points()
                .iter()
                .map(|d| d.iter().zip(c).map(|(a, b)| a * b).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn spec_with(dvars: &[&str], dset: &[&str]) -> ReachSpec {
        let doc = crate::model::SpecDocument {
            name: "d".into(),
            state_vars: vec!["x".into()],
            disturbance_vars: dvars.iter().map(|s| s.to_string()).collect(),
            horizon: 1.0,
            dynamics: vec![format!("-x + {}", dvars.join(" + "))],
            target: vec!["x^2 - 0.25".into()],
            state_constraints: vec!["x^2 - 1".into()],
            disturbance_set: dset.iter().map(|s| s.to_string()).collect(),
            ball_r: 1.2,
        };
        ReachSpec::from_document(&doc).unwrap()
    }

    #[test]
    fn interval_from_squared_bound() {
        let s = spec_with(&["d"], &["0.0001 - d^2"]);
        let ds = DisturbanceSet::from_spec(&s).unwrap();
        assert!((ds.hi[0] - 0.01).abs() < 1e-15 && (ds.lo[0] + 0.01).abs() < 1e-15);
        assert_eq!(ds.shape, Shape::Box);
        let ext = ds.extreme_points();
        assert_eq!(ext.len(), 2);
        assert!((ext[0][0] + 0.01).abs() < 1e-15 && (ext[1][0] - 0.01).abs() < 1e-15);
        assert!((ds.linear_max(&[-3.0]) - 0.03).abs() < 1e-15);
    }

    #[test]
    fn ball_vertices_are_projected_into_the_set() {
        let s = spec_with(&["a", "b"], &["1 - a^2 - b^2"]);
        let ds = DisturbanceSet::from_spec(&s).unwrap();
        assert_eq!(ds.shape, Shape::Ball(1.0));
        for v in ds.extreme_points() {
            assert!(ds.contains(&v));
            let r = (v[0] * v[0] + v[1] * v[1]).sqrt();
            assert!((r - 1.0).abs() < 1e-12);
        }
        assert!((ds.linear_max(&[3.0, 4.0]) - 5.0).abs() < 1e-15);
    }

    #[test]
    fn linear_bounds_and_unbounded_axes() {
        let s = spec_with(&["d"], &["d + 0.5", "1 - d"]);
        let ds = DisturbanceSet::from_spec(&s).unwrap();
        assert_eq!((ds.lo[0], ds.hi[0]), (-0.5, 1.0));
        let s = spec_with(&["d"], &["d^3 + 1"]);
        assert!(matches!(
            DisturbanceSet::from_spec(&s),
            Err(DisturbanceError::Unbounded(_))
        ));
    }

    #[test]
    fn samples_respect_constraints() {
        let s = spec_with(&["a", "b"], &["1 - a^2 - b^2", "a"]);
        let ds = DisturbanceSet::from_spec(&s).unwrap();
        assert_eq!(ds.shape, Shape::General);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let d = ds.sample(&mut rng).unwrap();
            assert!(d[0] >= 0.0 && d[0] * d[0] + d[1] * d[1] <= 1.0);
        }
    }
}
