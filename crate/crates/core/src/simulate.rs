//! Trajectory simulation under piecewise-constant disturbance signals and
//! Monte-Carlo falsification of inner approximations.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certify::{check_emptiness, Certificate, CertifyError};
use crate::disturbance::{DisturbanceError, DisturbanceSet};
use crate::model::ReachSpec;
use crate::poly::{PolyEval, Polynomial};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("step {dt} exceeds T/100 = {max}")]
    StepTooLarge { dt: f64, max: f64 },
    #[error("initial state lies outside B(0,R)")]
    StartOutsideBall,
    #[error("initial state has {got} coordinates, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("signal needs at least one segment")]
    NoSegments,
    #[error(transparent)]
    Disturbance(#[from] DisturbanceError),
    #[error(transparent)]
    Certificate(#[from] CertifyError),
    #[error("no point of the inner set found after {0} draws although it is not empty")]
    RejectionFailure(usize),
}

/// `d(s)` constant on each of `M` equal pieces of `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSignal {
    pub horizon: f64,
    /// One disturbance vector per segment.
    pub values: Vec<Vec<f64>>,
}

impl DisturbanceSignal {
    pub fn constant(horizon: f64, d: Vec<f64>) -> Self {
        DisturbanceSignal {
            horizon,
            values: vec![d],
        }
    }

    pub fn segments(&self) -> usize {
        self.values.len()
    }

    /// Segment boundaries `0 = t_0 < ... < t_M = T`.
    pub fn breakpoints(&self) -> Vec<f64> {
        let m = self.values.len();
        (0..=m).map(|k| self.horizon * k as f64 / m as f64).collect()
    }
}

/// `M` segments with values drawn uniformly from `D`.
pub fn sample_disturbance<R: Rng>(
    set: &DisturbanceSet,
    horizon: f64,
    segments: usize,
    rng: &mut R,
) -> Result<DisturbanceSignal, SimError> {
    if segments == 0 {
        return Err(SimError::NoSegments);
    }
    let values = (0..segments)
        .map(|_| set.sample(rng))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DisturbanceSignal { horizon, values })
}

/// Constant signals at the extreme points of `D`; the single empty signal
/// when there is no disturbance.
pub fn extreme_signals(set: Option<&DisturbanceSet>, horizon: f64) -> Vec<DisturbanceSignal> {
    match set {
        Some(s) if s.dim() > 0 => s
            .extreme_points()
            .into_iter()
            .map(|d| DisturbanceSignal::constant(horizon, d))
            .collect(),
        _ => vec![DisturbanceSignal::constant(horizon, Vec::new())],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Rk4,
    Euler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub signal: DisturbanceSignal,
    /// Time at which the state left `B(0,R)` or became non-finite.
    pub left_ball_at: Option<f64>,
}

impl Trajectory {
    /// CSV with header `t,x1,...,xn`.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut s = String::from("t");
        for n in names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for (t, x) in self.times.iter().zip(&self.states) {
            s.push_str(&format!("{t:.12e}"));
            for v in x {
                s.push_str(&format!(",{v:.12e}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Compiled right-hand side and ball test for one spec.
#[derive(Debug, Clone)]
pub struct Simulator {
    n: usize,
    nvars: usize,
    horizon: f64,
    ball_r: f64,
    dynamics: Vec<PolyEval>,
    pub method: Method,
}

impl Simulator {
    pub fn new(spec: &ReachSpec) -> Self {
        Simulator {
            n: spec.n_states(),
            nvars: spec.universe.len(),
            horizon: spec.horizon,
            ball_r: spec.ball_r,
            dynamics: spec.dynamics.iter().map(Polynomial::evaluator).collect(),
            method: Method::Rk4,
        }
    }

    fn rhs(&self, buf: &mut [f64], x: &[f64], t: f64, d: &[f64], out: &mut [f64]) {
        buf[..self.n].copy_from_slice(x);
        buf[self.n] = t;
        buf[self.n + 1..].copy_from_slice(d);
        for (o, f) in out.iter_mut().zip(&self.dynamics) {
            *o = f.eval(buf);
        }
    }

    fn in_ball(&self, x: &[f64]) -> bool {
        x.iter().all(|v| v.is_finite()) && self.ball_r - x.iter().map(|v| v * v).sum::<f64>() >= 0.0
    }

    /// Fixed-step integration; each segment is split into equal steps no
    /// longer than `dt`, so segment boundaries are step endpoints. Stops
    /// early when the state leaves the ball. `visit(t, x)` sees every stored
    /// point and may stop the integration by returning `false`.
    pub fn integrate_with(
        &self,
        x0: &[f64],
        signal: &DisturbanceSignal,
        dt: f64,
        mut visit: impl FnMut(f64, &[f64]) -> bool,
    ) -> Result<Trajectory, SimError> {
        let max = self.horizon / 100.0;
        if !(dt > 0.0 && dt <= max * (1.0 + 1e-12)) {
            return Err(SimError::StepTooLarge { dt, max });
        }
        if x0.len() != self.n {
            return Err(SimError::Dimension {
                expected: self.n,
                got: x0.len(),
            });
        }
        if !self.in_ball(x0) {
            return Err(SimError::StartOutsideBall);
        }
        if signal.values.is_empty() {
            return Err(SimError::NoSegments);
        }
        let n = self.n;
        let mut buf = vec![0.0; self.nvars];
        let mut x = x0.to_vec();
        let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let mut tmp = vec![0.0; n];
        let mut times = vec![0.0];
        let mut states = vec![x.clone()];
        let mut left_ball_at = None;
        let bp = signal.breakpoints();
        let mut go = visit(0.0, &x);
        'outer: for (seg, d) in signal.values.iter().enumerate() {
            if !go {
                break;
            }
            let (a, b) = (bp[seg], bp[seg + 1]);
            let steps = ((b - a) / dt - 1e-9).ceil().max(1.0) as usize;
            let h = (b - a) / steps as f64;
            for s in 0..steps {
                let t = a + s as f64 * h;
                match self.method {
                    Method::Euler => {
                        self.rhs(&mut buf, &x, t, d, &mut k1);
                        for i in 0..n {
                            x[i] += h * k1[i];
                        }
                    }
                    Method::Rk4 => {
                        self.rhs(&mut buf, &x, t, d, &mut k1);
                        for i in 0..n {
                            tmp[i] = x[i] + 0.5 * h * k1[i];
                        }
                        self.rhs(&mut buf, &tmp, t + 0.5 * h, d, &mut k2);
                        for i in 0..n {
                            tmp[i] = x[i] + 0.5 * h * k2[i];
                        }
                        self.rhs(&mut buf, &tmp, t + 0.5 * h, d, &mut k3);
                        for i in 0..n {
                            tmp[i] = x[i] + h * k3[i];
                        }
                        self.rhs(&mut buf, &tmp, t + h, d, &mut k4);
                        for i in 0..n {
                            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                        }
                    }
                }
                let t_new = if s + 1 == steps { b } else { t + h };
                times.push(t_new);
                states.push(x.clone());
                if !self.in_ball(&x) {
                    left_ball_at = Some(t_new);
                    break 'outer;
                }
                if !visit(t_new, &x) {
                    go = false;
                    break;
                }
            }
        }
        Ok(Trajectory {
            times,
            states,
            signal: signal.clone(),
            left_ball_at,
        })
    }
}

pub fn integrate(
    spec: &ReachSpec,
    x0: &[f64],
    signal: &DisturbanceSignal,
    dt: f64,
) -> Result<Trajectory, SimError> {
    Simulator::new(spec).integrate_with(x0, signal, dt, |_, _| true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    LeftX,
    MissedTr,
    LeftB,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub sample: usize,
    pub x0: Vec<f64>,
    /// Seed of a random signal; `None` for an extreme signal.
    pub signal_seed: Option<u64>,
    /// Index into the extreme signals; `None` for a random signal.
    pub extreme_index: Option<usize>,
    pub kind: ViolationKind,
    pub time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationOptions {
    pub samples: usize,
    pub signals_per_sample: usize,
    pub segments: usize,
    pub dt: f64,
    pub seed: u64,
    pub viol_tol: f64,
    /// Relative margin: points need `ψ(x,0) <= -margin (1 + max |coef ψ~|)`.
    pub margin: f64,
    pub method: Method,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions {
            samples: 500,
            signals_per_sample: 20,
            segments: 10,
            dt: 1e-3,
            seed: 0,
            viol_tol: 1e-6,
            margin: 1e-6,
            method: Method::Rk4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub options: ValidationOptions,
    pub samples_tested: usize,
    pub signals_per_sample: usize,
    pub extreme_signals: usize,
    pub trajectories: usize,
    /// The certified set is empty; the check passes vacuously.
    pub empty: bool,
    pub violations: Vec<Violation>,
    pub pass: bool,
}

/// Rejection draws per sample point before falling back to an emptiness check.
const MAX_POINT_DRAWS: usize = 1_000_000;

/// Monte-Carlo attempt to falsify the certificate: points of the certified
/// set are driven by random and extreme disturbance signals and must stay in
/// `X_t`, stay in the ball and end in the target.
pub fn validate_inner(cert: &Certificate, opts: &ValidationOptions) -> Result<ValidationReport, SimError> {
    let spec = cert.reach_spec()?;
    let slice = cert.initial_slice()?;
    let psi_scale = 1.0 + cert.psi_normalised(&spec)?.max_abs_coefficient();
    let margin = opts.margin * psi_scale;
    let dset = if spec.universe.n_disturbances() > 0 {
        Some(DisturbanceSet::from_spec(&spec)?)
    } else {
        None
    };
    let extremes = extreme_signals(dset.as_ref(), spec.horizon);
    let mut report = ValidationReport {
        options: *opts,
        samples_tested: 0,
        signals_per_sample: opts.signals_per_sample,
        extreme_signals: extremes.len(),
        trajectories: 0,
        empty: false,
        violations: Vec::new(),
        pass: true,
    };

    // sample points sequentially from a dedicated stream
    let mut point_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    point_rng.set_stream(u64::MAX);
    let mut points = Vec::with_capacity(opts.samples);
    for k in 0..opts.samples {
        let mut found = None;
        for _ in 0..MAX_POINT_DRAWS {
            let x = slice.sample_ball(&mut point_rng);
            if slice.psi0(&x) <= -margin {
                found = Some(x);
                break;
            }
        }
        match found {
            Some(x) => points.push(x),
            None if k == 0 => {
                if check_emptiness(cert, 10_000, opts.seed)?.empty {
                    report.empty = true;
                    return Ok(report);
                }
                return Err(SimError::RejectionFailure(MAX_POINT_DRAWS));
            }
            None => return Err(SimError::RejectionFailure(MAX_POINT_DRAWS)),
        }
    }

    let mut sim = Simulator::new(&spec);
    sim.method = opts.method;
    let gs: Vec<PolyEval> = spec.state_constraints.iter().map(Polynomial::evaluator).collect();
    let ls: Vec<PolyEval> = spec.target.iter().map(Polynomial::evaluator).collect();
    let nvars = spec.universe.len();
    let n = spec.n_states();

    let per_sample: Vec<Result<Vec<Violation>, SimError>> = points
        .par_iter()
        .enumerate()
        .map(|(k, x0)| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(k as u64);
            let mut signals: Vec<(Option<u64>, Option<usize>, DisturbanceSignal)> = extremes
                .iter()
                .enumerate()
                .map(|(e, s)| (None, Some(e), s.clone()))
                .collect();
            for _ in 0..opts.signals_per_sample {
                let sig_seed = rng.next_u64();
                let signal = match &dset {
                    Some(set) => {
                        let mut srng = ChaCha8Rng::seed_from_u64(sig_seed);
                        sample_disturbance(set, spec.horizon, opts.segments.max(1), &mut srng)?
                    }
                    None => DisturbanceSignal {
                        horizon: spec.horizon,
                        values: vec![Vec::new(); opts.segments.max(1)],
                    },
                };
                signals.push((Some(sig_seed), None, signal));
            }
            let mut found = Vec::new();
            let mut pt = vec![0.0; nvars];
            for (signal_seed, extreme_index, signal) in signals {
                let mut left_x = None;
                let traj = sim.integrate_with(x0, &signal, opts.dt, |t, x| {
                    pt[..n].copy_from_slice(x);
                    pt[n] = t;
                    let worst = gs.iter().map(|g| g.eval(&pt)).fold(f64::NEG_INFINITY, f64::max);
                    if worst > opts.viol_tol {
                        left_x = Some(t);
                        return false;
                    }
                    true
                })?;
                let violation = |kind, time| Violation {
                    sample: k,
                    x0: x0.clone(),
                    signal_seed,
                    extreme_index,
                    kind,
                    time,
                };
                if let Some(t) = left_x {
                    found.push(violation(ViolationKind::LeftX, t));
                } else if let Some(t) = traj.left_ball_at {
                    found.push(violation(ViolationKind::LeftB, t));
                } else {
                    let xe = traj.states.last().expect("non-empty trajectory");
                    pt[..n].copy_from_slice(xe);
                    pt[n] = spec.horizon;
                    let worst = ls.iter().map(|l| l.eval(&pt)).fold(f64::NEG_INFINITY, f64::max);
                    if worst > opts.viol_tol {
                        found.push(violation(ViolationKind::MissedTr, spec.horizon));
                    }
                }
            }
            Ok(found)
        })
        .collect();
    for r in per_sample {
        report.violations.extend(r?);
    }
    report.samples_tested = points.len();
    report.trajectories = points.len() * (extremes.len() + opts.signals_per_sample);
    report.pass = report.violations.is_empty();
    Ok(report)
}
