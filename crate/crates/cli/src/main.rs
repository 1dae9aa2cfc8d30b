//! `reachsos`: certificates of robust reach-avoid sets, grid and simulation
//! baselines, and plot data.
//!
//! Exit codes: 0 success, 1 error, 2 the certified inner set is empty.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use reachsos_core::certify::{contour2d, estimate_area, Certificate, SliceSpec};
use reachsos_core::hjgrid::{self, GridGeometry};
use reachsos_core::model::{MultiplierPolicy, ReachSpec, SolveConfig};
use reachsos_core::pipeline::{compute, sha256_hex, FileRecord, Manifest, PipelineOptions};
use reachsos_core::sdp::export_sdpa;
use reachsos_core::simulate::{validate_inner, Method, ValidationOptions};
use reachsos_core::soscompile::{build_sos_program, compile_to_sdp};

const EXIT_OK: i32 = 0;
const EXIT_ERROR: i32 = 1;
const EXIT_EMPTY: i32 = 2;

#[derive(Parser)]
#[command(name = "reachsos", version, about = "Inner approximations of robust reach-avoid sets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the degree-k SOS program and write a certificate.
    Compute(ComputeArgs),
    /// Monte-Carlo soundness check of a certificate by simulation.
    Validate(ValidateArgs),
    /// Grid solution of the obstacle HJ equation for 2-D specs.
    Hj2d(Hj2dArgs),
    /// Zero contour of `ψ(x, 0)` on a 2-D slice.
    Levelset(LevelsetArgs),
    /// Write the compiled SDP in SDPA sparse format.
    ExportSdpa(ExportArgs),
    /// Rerun `compute` over a list of degrees and tabulate the results.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct ComputeArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    degree: u32,
    /// `LIE,OTHER` multiplier degrees instead of the automatic choice.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    multiplier_degrees: Option<Vec<u32>>,
    /// Tighten certificate thresholds 100x.
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Solver wall-time budget in seconds.
    #[arg(long)]
    time_limit: Option<f64>,
    #[arg(long)]
    verbose: bool,
    /// Manifest path; defaults to `<out>.manifest.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    cert: PathBuf,
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value_t = 500)]
    samples: usize,
    #[arg(long, default_value_t = 20)]
    signals: usize,
    #[arg(long, default_value_t = 10)]
    segments: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    #[arg(long)]
    euler: bool,
    /// Report JSON; the manifest goes next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct Hj2dArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Nodes per axis.
    #[arg(long, default_value_t = 500)]
    grid: usize,
    /// Field CSV `x,y,u` at time 0.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    contour: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct LevelsetArgs {
    #[arg(long)]
    cert: PathBuf,
    #[arg(long, default_value_t = 200)]
    resolution: usize,
    /// State indices `I,J` of the slice axes.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    axes: Option<Vec<usize>>,
    /// Values of every state coordinate off the slice axes.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    fixed: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    degree: u32,
    #[arg(long, value_delimiter = ',', num_args = 2)]
    multiplier_degrees: Option<Vec<u32>>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "4,6,8")]
    degrees: Vec<u32>,
    /// Table CSV.
    #[arg(long)]
    out: PathBuf,
    /// Directory for the per-degree certificates.
    #[arg(long)]
    cert_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1_000_000)]
    mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

fn manifest_path(explicit: &Option<PathBuf>, primary: &Path) -> PathBuf {
    explicit.clone().unwrap_or_else(|| {
        let mut s = primary.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    })
}

fn load_spec(path: &Path) -> Result<ReachSpec> {
    ReachSpec::load(path).with_context(|| format!("model: cannot load spec {}", path.display()))
}

fn load_cert(path: &Path) -> Result<Certificate> {
    Certificate::load(path).with_context(|| format!("certify: cannot load certificate {}", path.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn solve_config(degree: u32, mult: &Option<Vec<u32>>, strict: bool, seed: u64) -> SolveConfig {
    let mut cfg = SolveConfig::new(degree);
    if let Some(m) = mult {
        cfg.multipliers = MultiplierPolicy::Explicit { lie: m[0], other: m[1] };
    }
    cfg.strict = strict;
    cfg.seed = seed;
    cfg
}

/// Runs a command, then writes its manifest whatever the outcome.
fn finish(mut manifest: Manifest, path: &Path, outcome: Result<i32>) -> i32 {
    let code = match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            manifest.results = json!({ "error": format!("{e:#}") });
            EXIT_ERROR
        }
    };
    manifest.exit_code = code;
    if let Err(e) = write(path, manifest.to_json()) {
        eprintln!("error: {e:#}");
        return EXIT_ERROR;
    }
    code
}

fn record_input(m: &mut Manifest, path: &Path) -> Result<()> {
    m.inputs
        .push(FileRecord::of(path).with_context(|| format!("cannot read {}", path.display()))?);
    Ok(())
}

fn record_output(m: &mut Manifest, path: &Path) -> Result<()> {
    m.outputs
        .push(FileRecord::of(path).with_context(|| format!("cannot read back {}", path.display()))?);
    Ok(())
}

fn cmd_compute(a: &ComputeArgs, m: &mut Manifest) -> Result<i32> {
    record_input(m, &a.spec)?;
    let spec = load_spec(&a.spec)?;
    let cfg = solve_config(a.degree, &a.multiplier_degrees, a.strict, a.seed);
    m.seed = Some(a.seed);
    m.config = serde_json::to_value(&cfg)?;
    let opts = PipelineOptions {
        time_limit: a.time_limit.map(Duration::from_secs_f64),
        verbose: a.verbose,
        ..PipelineOptions::default()
    };
    let run = compute(&spec, &cfg, &opts)?;
    run.certificate.save(&a.out)?;
    record_output(m, &a.out)?;
    m.results = json!({
        "spec_fingerprint": spec.fingerprint(),
        "objective": run.certificate.objective_value,
        "iterations": run.iterations,
        "sizes": run.sizes,
        "timings": run.timings,
        "emptiness": run.emptiness,
        "residuals": run.certificate.residuals,
    });
    println!(
        "d* = {:.10e}  iterations {}  solve {:.2}s  total {:.2}s",
        run.certificate.objective_value, run.iterations, run.timings.solve, run.timings.total()
    );
    if run.is_empty() {
        println!("inner approximation is empty (min ψ(x,0) = {:.3e})", run.emptiness.min_value);
        return Ok(EXIT_EMPTY);
    }
    Ok(EXIT_OK)
}

fn cmd_validate(a: &ValidateArgs, m: &mut Manifest) -> Result<i32> {
    record_input(m, &a.cert)?;
    record_input(m, &a.spec)?;
    let cert = load_cert(&a.cert)?;
    let spec = load_spec(&a.spec)?;
    if spec.fingerprint() != cert.spec_fingerprint {
        bail!(
            "certify: spec {} (fingerprint {}) is not the one the certificate was computed for ({})",
            a.spec.display(),
            spec.fingerprint(),
            cert.spec_fingerprint
        );
    }
    let opts = ValidationOptions {
        samples: a.samples,
        signals_per_sample: a.signals,
        segments: a.segments,
        dt: a.dt,
        seed: a.seed,
        method: if a.euler { Method::Euler } else { Method::Rk4 },
        ..ValidationOptions::default()
    };
    m.seed = Some(a.seed);
    m.config = serde_json::to_value(opts)?;
    let report = validate_inner(&cert, &opts).context("simulate")?;
    if let Some(out) = &a.out {
        write(out, serde_json::to_string_pretty(&report)?)?;
        record_output(m, out)?;
    }
    println!(
        "{} samples, {} trajectories, {} violations{}",
        report.samples_tested,
        report.trajectories,
        report.violations.len(),
        if report.empty { ", certified set is empty" } else { "" }
    );
    for v in report.violations.iter().take(10) {
        println!("  sample {} x0 {:?}: {:?} at t = {:.4}", v.sample, v.x0, v.kind, v.time);
    }
    m.results = json!({
        "pass": report.pass,
        "empty": report.empty,
        "samples_tested": report.samples_tested,
        "trajectories": report.trajectories,
        "violations": report.violations.len(),
    });
    Ok(if report.pass { EXIT_OK } else { EXIT_ERROR })
}

fn cmd_hj2d(a: &Hj2dArgs, m: &mut Manifest) -> Result<i32> {
    record_input(m, &a.spec)?;
    let spec = load_spec(&a.spec)?;
    let geo = GridGeometry::for_spec(&spec, a.grid).context("hjgrid")?;
    m.config = serde_json::to_value(geo)?;
    let t = Instant::now();
    let field = hjgrid::solve(&spec, geo).context("hjgrid")?;
    let secs = t.elapsed().as_secs_f64();
    write(&a.out, field.to_csv())?;
    record_output(m, &a.out)?;
    let contour = field.zero_contour();
    if let Some(path) = &a.contour {
        write(path, contour.to_csv())?;
        record_output(m, path)?;
    }
    let inside = field.values.iter().filter(|v| **v <= 0.0).count();
    m.results = json!({
        "seconds": secs,
        "nodes_inside": inside,
        "contour_curves": contour.curves.len(),
    });
    println!("{}x{} grid in {secs:.2}s, {inside} nodes with u <= 0", a.grid, a.grid);
    Ok(EXIT_OK)
}

fn cmd_levelset(a: &LevelsetArgs, m: &mut Manifest) -> Result<i32> {
    record_input(m, &a.cert)?;
    let cert = load_cert(&a.cert)?;
    let slice = match (&a.axes, &a.fixed) {
        (None, None) => None,
        (axes, fixed) => {
            let n = cert.spec.state_vars.len();
            let axes = axes.clone().unwrap_or_else(|| vec![0, 1]);
            Some(SliceSpec {
                axes: (axes[0], axes[1]),
                fixed: fixed.clone().unwrap_or_else(|| vec![0.0; n]),
            })
        }
    };
    m.config = json!({ "resolution": a.resolution, "axes": a.axes, "fixed": a.fixed });
    let contour = contour2d(&cert, a.resolution, slice.as_ref()).context("certify")?;
    write(&a.out, contour.to_csv())?;
    record_output(m, &a.out)?;
    m.results = json!({ "curves": contour.curves.len() });
    println!("{} contour curves", contour.curves.len());
    Ok(EXIT_OK)
}

fn cmd_export(a: &ExportArgs, m: &mut Manifest) -> Result<i32> {
    record_input(m, &a.spec)?;
    let spec = load_spec(&a.spec)?;
    let cfg = solve_config(a.degree, &a.multiplier_degrees, false, 0);
    cfg.validate(&spec).context("model")?;
    m.config = serde_json::to_value(&cfg)?;
    let compiled = compile_to_sdp(build_sos_program(&spec, &cfg).context("soscompile")?);
    let inst = &compiled.instance;
    write(&a.out, export_sdpa(inst))?;
    record_output(m, &a.out)?;
    m.results = json!({
        "constraints": inst.n_constraints(),
        "free_vars": inst.n_free,
        "psd_blocks": inst.blocks.iter().map(|b| b.dim).collect::<Vec<_>>(),
    });
    println!(
        "{} constraints, {} free variables, {} blocks",
        inst.n_constraints(),
        inst.n_free,
        inst.blocks.len()
    );
    Ok(EXIT_OK)
}

fn cmd_sweep(a: &SweepArgs, m: &mut Manifest) -> Result<i32> {
    record_input(m, &a.spec)?;
    let spec = load_spec(&a.spec)?;
    m.seed = Some(a.seed);
    m.config = json!({ "degrees": a.degrees, "mc_samples": a.mc_samples });
    let mut table = String::from(
        "degree,d_star,constraints,free_vars,max_block,scalar_vars,iterations,wall_s,area,area_se,empty\n",
    );
    let mut rows = Vec::new();
    for &k in &a.degrees {
        let cfg = solve_config(k, &None, false, a.seed);
        let t = Instant::now();
        let run = compute(&spec, &cfg, &PipelineOptions::default()).with_context(|| format!("degree {k}"))?;
        let wall = t.elapsed().as_secs_f64();
        let area = estimate_area(&run.certificate, a.mc_samples, a.seed).context("certify")?;
        if let Some(dir) = &a.cert_dir {
            let path = dir.join(format!("{}_k{k}.json", spec.name));
            write(&path, run.certificate.to_json())?;
            record_output(m, &path)?;
        }
        let s = &run.sizes;
        table.push_str(&format!(
            "{k},{:.12e},{},{},{},{},{},{wall:.3},{:.6e},{:.3e},{}\n",
            run.certificate.objective_value,
            s.constraints,
            s.free_vars,
            s.psd_blocks.iter().max().unwrap_or(&0),
            s.scalar_vars,
            run.iterations,
            area.volume,
            area.std_error,
            run.is_empty()
        ));
        println!(
            "k = {k}: d* = {:.8e}, area {:.5} ± {:.5}, {wall:.2}s",
            run.certificate.objective_value, area.volume, area.std_error
        );
        rows.push(json!({
            "degree": k,
            "d_star": run.certificate.objective_value,
            "area": area,
            "empty": run.is_empty(),
            "wall_s": wall,
            "certificate_sha256": sha256_hex(run.certificate.to_json().as_bytes()),
        }));
    }
    let d: Vec<f64> = rows.iter().map(|r| r["d_star"].as_f64().unwrap_or(f64::NAN)).collect();
    let monotone = d.windows(2).all(|w| w[1] <= w[0] + 1e-6);
    if !monotone {
        eprintln!("warning: d* is not non-increasing over the degree list: {d:?}");
    }
    write(&a.out, table)?;
    record_output(m, &a.out)?;
    m.results = json!({ "rows": rows, "d_star_nonincreasing": monotone });
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    let code = match &cli.command {
        Command::Compute(a) => {
            let mut m = Manifest::new("compute", args);
            let r = cmd_compute(a, &mut m);
            finish(m, &manifest_path(&a.manifest, &a.out), r)
        }
        Command::Validate(a) => {
            let mut m = Manifest::new("validate", args);
            let r = cmd_validate(a, &mut m);
            let primary = a.out.clone().unwrap_or_else(|| {
                let mut s = a.cert.as_os_str().to_owned();
                s.push(".validate");
                PathBuf::from(s)
            });
            finish(m, &manifest_path(&a.manifest, &primary), r)
        }
        Command::Hj2d(a) => {
            let mut m = Manifest::new("hj2d", args);
            let r = cmd_hj2d(a, &mut m);
            finish(m, &manifest_path(&a.manifest, &a.out), r)
        }
        Command::Levelset(a) => {
            let mut m = Manifest::new("levelset", args);
            let r = cmd_levelset(a, &mut m);
            finish(m, &manifest_path(&a.manifest, &a.out), r)
        }
        Command::ExportSdpa(a) => {
            let mut m = Manifest::new("export-sdpa", args);
            let r = cmd_export(a, &mut m);
            finish(m, &manifest_path(&a.manifest, &a.out), r)
        }
        Command::Sweep(a) => {
            let mut m = Manifest::new("sweep", args);
            let r = cmd_sweep(a, &mut m);
            finish(m, &manifest_path(&a.manifest, &a.out), r)
        }
    };
    ExitCode::from(code as u8)
}
