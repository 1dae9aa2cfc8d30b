//! End-to-end computation of a certificate from a spec, with stage timings,
//! and the run manifest written next to every output.

use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::certify::{build_certificate, check_emptiness, Certificate, CertifyError, EmptinessReport};
use crate::model::{check_geometry, GeometryReport, ReachSpec, SolveConfig};
use crate::sdp::{solve, SdpStatus, SolverOptions};
use crate::soscompile::{build_sos_program, compile_to_sdp, CompileError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("model: {0}")]
    Model(#[from] crate::model::ModelError),
    #[error("model: ball preconditions fail at {count} of {samples} sampled points")]
    Geometry { count: usize, samples: usize, report: Box<GeometryReport> },
    #[error("soscompile: {0}")]
    Compile(#[from] CompileError),
    #[error("sdp: solver stopped with status {status:?} after {iterations} iterations")]
    Solver { status: SdpStatus, iterations: usize },
    #[error("certify: {0}")]
    Certify(#[from] CertifyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub geometry_samples: usize,
    pub emptiness_samples: usize,
    pub time_limit: Option<Duration>,
    pub verbose: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            geometry_samples: 20_000,
            emptiness_samples: 20_000,
            time_limit: None,
            verbose: false,
        }
    }
}

/// Wall time per stage, in seconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub geometry: f64,
    pub build: f64,
    pub compile: f64,
    pub solve: f64,
    pub certify: f64,
    pub emptiness: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.geometry + self.build + self.compile + self.solve + self.certify + self.emptiness
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSizes {
    pub constraints: usize,
    pub free_vars: usize,
    pub psd_blocks: Vec<usize>,
    pub scalar_vars: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComputeRun {
    pub certificate: Certificate,
    pub geometry: GeometryReport,
    pub emptiness: EmptinessReport,
    pub sizes: InstanceSizes,
    pub iterations: usize,
    pub timings: StageTimings,
}

impl ComputeRun {
    pub fn is_empty(&self) -> bool {
        self.emptiness.empty
    }
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Geometry check, SOS program, SDP compile and solve, certificate, emptiness.
pub fn compute(spec: &ReachSpec, cfg: &SolveConfig, opts: &PipelineOptions) -> Result<ComputeRun, PipelineError> {
    cfg.validate(spec)?;
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let geometry = check_geometry(spec, opts.geometry_samples, cfg.seed);
    timings.geometry = secs(t);
    if !geometry.ok {
        return Err(PipelineError::Geometry {
            count: geometry.violation_count,
            samples: geometry.samples,
            report: Box::new(geometry),
        });
    }

    let t = Instant::now();
    let program = build_sos_program(spec, cfg)?;
    timings.build = secs(t);

    let t = Instant::now();
    let compiled = compile_to_sdp(program);
    timings.compile = secs(t);
    let inst = &compiled.instance;
    let sizes = InstanceSizes {
        constraints: inst.n_constraints(),
        free_vars: inst.n_free,
        psd_blocks: inst.blocks.iter().map(|b| b.dim).collect(),
        scalar_vars: inst.n_scalar_vars(),
    };

    let t = Instant::now();
    let mut sopts = SolverOptions::from(cfg.sdp.clone());
    sopts.time_limit = opts.time_limit;
    sopts.verbose = opts.verbose;
    let solution = solve(inst, &sopts);
    timings.solve = secs(t);
    if solution.status != SdpStatus::Optimal {
        return Err(PipelineError::Solver {
            status: solution.status,
            iterations: solution.iterations,
        });
    }

    let t = Instant::now();
    let certificate = build_certificate(&compiled, cfg, &solution)?;
    timings.certify = secs(t);

    let t = Instant::now();
    let emptiness = check_emptiness(&certificate, opts.emptiness_samples, cfg.seed)?;
    timings.emptiness = secs(t);

    Ok(ComputeRun {
        certificate,
        geometry,
        emptiness,
        sizes,
        iterations: solution.iterations,
        timings,
    })
}

/// A file read or written by a run, with its SHA-256.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

impl FileRecord {
    pub fn of(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let bytes = std::fs::read(path.as_ref())?;
        Ok(FileRecord {
            path: path.as_ref().display().to_string(),
            sha256: sha256_hex(&bytes),
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything needed to rerun a command: arguments, inputs with digests,
/// configuration, seed and crate version, plus what it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub args: Vec<String>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub seed: Option<u64>,
    pub config: Value,
    pub results: Value,
    pub exit_code: i32,
}

impl Manifest {
    pub fn new(command: &str, args: Vec<String>) -> Self {
        Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            args,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
            config: Value::Null,
            results: Value::Null,
            exit_code: 0,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }
}
