//! Infeasible primal-dual path-following method with the HKM search
//! direction and Mehrotra predictor-corrector steps.
//!
//! Free variables are kept in the Newton system, which is solved by block
//! elimination: with the Schur complement `M` of the conic part and the
//! free-variable columns `A_f`,
//!
//! ```text
//! [ M    A_f ] [dy]   [r  ]
//! [ A_f'  0  ] [dx] = [r_d]
//! ```
//!
//! reduces to `(A_f' M^-1 A_f) dx = A_f' M^-1 r - r_d` followed by
//! `M dy = r - A_f dx`.

use std::time::{Duration, Instant};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use super::chol::DenseCholesky;
use super::{BlockKind, IterLog, SdpInstance, SdpSolution, SdpStatus};
use crate::model::SdpTolerances;

#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub feas_tol: f64,
    pub gap_tol: f64,
    pub max_iters: usize,
    pub time_limit: Option<Duration>,
    pub verbose: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SdpTolerances::default().into()
    }
}

impl From<SdpTolerances> for SolverOptions {
    fn from(t: SdpTolerances) -> Self {
        SolverOptions {
            feas_tol: t.feas_tol,
            gap_tol: t.gap_tol,
            max_iters: t.max_iters,
            time_limit: None,
            verbose: false,
        }
    }
}

/// Block entries of one constraint, expanded to `(p, q, v)` with `p <= q`.
type Sparse = Vec<(usize, usize, f64)>;
/// pobj, dobj, pres, dres, rel_gap of one iterate.
type Measures = (f64, f64, f64, f64, f64);

struct Prepared {
    m: usize,
    n_free: usize,
    /// Original block index -> (kind, index into psd list or lp offset)
    layout: Vec<(BlockKind, usize)>,
    psd_dims: Vec<usize>,
    n_lp: usize,
    /// Per PSD block: constraints touching it.
    psd_rows: Vec<Vec<(usize, Sparse)>>,
    /// Per LP coordinate: constraints touching it.
    lp_rows: Vec<Vec<(usize, f64)>>,
    free_rows: Vec<Vec<(usize, f64)>>,
    b: DVector<f64>,
    c_psd: Vec<DMatrix<f64>>,
    c_lp: DVector<f64>,
    c_free: DVector<f64>,
}

impl Prepared {
    fn new(inst: &SdpInstance) -> Self {
        let mut layout = Vec::with_capacity(inst.blocks.len());
        let mut psd_dims = Vec::new();
        let mut n_lp = 0;
        for b in &inst.blocks {
            match b.kind {
                BlockKind::Psd => {
                    layout.push((BlockKind::Psd, psd_dims.len()));
                    psd_dims.push(b.dim);
                }
                BlockKind::Diag => {
                    layout.push((BlockKind::Diag, n_lp));
                    n_lp += b.dim;
                }
            }
        }
        let m = inst.constraints.len();
        let mut psd_rows: Vec<Vec<(usize, Sparse)>> = vec![Vec::new(); psd_dims.len()];
        let mut lp_rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_lp];
        let mut free_rows = Vec::with_capacity(m);
        let mut b = DVector::zeros(m);
        for (r, c) in inst.constraints.iter().enumerate() {
            b[r] = c.rhs;
            free_rows.push(c.free.clone());
            let mut per_block: Vec<Sparse> = vec![Vec::new(); psd_dims.len()];
            for e in &c.entries {
                match layout[e.block] {
                    (BlockKind::Psd, k) => per_block[k].push((e.i, e.j, e.value)),
                    (BlockKind::Diag, off) => lp_rows[off + e.i].push((r, e.value)),
                }
            }
            for (k, ent) in per_block.into_iter().enumerate() {
                if !ent.is_empty() {
                    psd_rows[k].push((r, merge_duplicates(ent)));
                }
            }
        }
        for list in &mut lp_rows {
            list.sort_by_key(|&(r, _)| r);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(list.len());
            for &(r, v) in list.iter() {
                match merged.last_mut() {
                    Some((lr, lv)) if *lr == r => *lv += v,
                    _ => merged.push((r, v)),
                }
            }
            *list = merged;
        }
        let mut c_psd: Vec<DMatrix<f64>> = psd_dims.iter().map(|&d| DMatrix::zeros(d, d)).collect();
        let mut c_lp = DVector::zeros(n_lp);
        for e in &inst.c_blocks {
            match layout[e.block] {
                (BlockKind::Psd, k) => {
                    c_psd[k][(e.i, e.j)] += e.value;
                    if e.i != e.j {
                        c_psd[k][(e.j, e.i)] += e.value;
                    }
                }
                (BlockKind::Diag, off) => c_lp[off + e.i] += e.value,
            }
        }
        Prepared {
            m,
            n_free: inst.n_free,
            layout,
            psd_dims,
            n_lp,
            psd_rows,
            lp_rows,
            free_rows,
            b,
            c_psd,
            c_lp,
            c_free: DVector::from_column_slice(&inst.c_free),
        }
    }

    /// `A(x_f, X, x_l)`
    fn apply(&self, xf: &DVector<f64>, xs: &[DMatrix<f64>], xl: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.m);
        for (r, row) in self.free_rows.iter().enumerate() {
            out[r] += row.iter().map(|&(k, a)| a * xf[k]).sum::<f64>();
        }
        for (k, rows) in self.psd_rows.iter().enumerate() {
            for (r, ent) in rows {
                out[*r] += sparse_inner(ent, &xs[k]);
            }
        }
        for (k, rows) in self.lp_rows.iter().enumerate() {
            for &(r, v) in rows {
                out[r] += v * xl[k];
            }
        }
        out
    }

    /// `A^*(y)` on the conic blocks.
    fn adjoint(&self, y: &DVector<f64>) -> (Vec<DMatrix<f64>>, DVector<f64>) {
        let mut mats: Vec<DMatrix<f64>> =
            self.psd_dims.iter().map(|&d| DMatrix::zeros(d, d)).collect();
        for (k, rows) in self.psd_rows.iter().enumerate() {
            let mk = &mut mats[k];
            for (r, ent) in rows {
                let yr = y[*r];
                if yr == 0.0 {
                    continue;
                }
                for &(p, q, v) in ent {
                    mk[(p, q)] += yr * v;
                    if p != q {
                        mk[(q, p)] += yr * v;
                    }
                }
            }
        }
        let mut lp = DVector::zeros(self.n_lp);
        for (k, rows) in self.lp_rows.iter().enumerate() {
            lp[k] = rows.iter().map(|&(r, v)| v * y[r]).sum();
        }
        (mats, lp)
    }

    fn apply_free(&self, xf: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.m,
            self.free_rows.iter().map(|row| row.iter().map(|&(k, a)| a * xf[k]).sum::<f64>()),
        )
    }

    fn adjoint_free(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_free);
        for (r, row) in self.free_rows.iter().enumerate() {
            for &(k, a) in row {
                out[k] += a * y[r];
            }
        }
        out
    }

    fn free_matrix(&self) -> DMatrix<f64> {
        let mut af = DMatrix::zeros(self.m, self.n_free);
        for (r, row) in self.free_rows.iter().enumerate() {
            for &(k, a) in row {
                af[(r, k)] += a;
            }
        }
        af
    }

    /// Schur complement `M_ij = Σ_b tr(A_ib X_b A_jb Z_b) + Σ_k a_ik a_jk x_k / s_k`.
    fn schur(&self, xs: &[DMatrix<f64>], zs: &[DMatrix<f64>], xl: &DVector<f64>, sl: &DVector<f64>) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.m, self.m);
        for (k, rows) in self.psd_rows.iter().enumerate() {
            let n = self.psd_dims[k];
            let (x, z) = (&xs[k], &zs[k]);
            let cols: Vec<Vec<(usize, f64)>> = (0..rows.len())
                .into_par_iter()
                .map_init(
                    || DMatrix::<f64>::zeros(n, n),
                    |g, jj| {
                        g.fill(0.0);
                        for &(p, q, v) in &rows[jj].1 {
                            g.ger(v, &x.column(p), &z.column(q), 1.0);
                            if p != q {
                                g.ger(v, &x.column(q), &z.column(p), 1.0);
                            }
                        }
                        rows[..=jj]
                            .iter()
                            .map(|(i, ent)| {
                                let val: f64 = ent
                                    .iter()
                                    .map(|&(p, q, u)| {
                                        if p == q {
                                            u * g[(p, p)]
                                        } else {
                                            u * (g[(p, q)] + g[(q, p)])
                                        }
                                    })
                                    .sum();
                                (*i, val)
                            })
                            .collect()
                    },
                )
                .collect();
            for (jj, col) in cols.into_iter().enumerate() {
                let j = rows[jj].0;
                for (i, v) in col {
                    m[(i, j)] += v;
                }
            }
        }
        for (k, rows) in self.lp_rows.iter().enumerate() {
            let w = xl[k] / sl[k];
            for (a, &(i, vi)) in rows.iter().enumerate() {
                for &(j, vj) in &rows[a..] {
                    m[(i, j)] += w * vi * vj;
                }
            }
        }
        // rows are visited in increasing order, so only i <= j was filled
        for j in 0..self.m {
            for i in 0..j {
                let v = m[(i, j)] + m[(j, i)];
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }
}

fn merge_duplicates(mut ent: Sparse) -> Sparse {
    ent.sort_by_key(|a| (a.0, a.1));
    let mut out: Sparse = Vec::with_capacity(ent.len());
    for (p, q, v) in ent {
        match out.last_mut() {
            Some((lp, lq, lv)) if *lp == p && *lq == q => *lv += v,
            _ => out.push((p, q, v)),
        }
    }
    out
}

fn sparse_inner(ent: &Sparse, x: &DMatrix<f64>) -> f64 {
    ent.iter()
        .map(|&(p, q, v)| if p == q { v * x[(p, p)] } else { v * (x[(p, q)] + x[(q, p)]) })
        .sum()
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in 0..j {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

fn vmax_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

/// Largest `a` with `X + a dX ⪰ 0`, given the Cholesky factor of `X`.
fn max_step_psd(chol: &Cholesky<f64, Dyn>, dx: &DMatrix<f64>) -> f64 {
    let l = chol.l();
    let Some(t) = l.solve_lower_triangular(dx) else {
        return 0.0;
    };
    let Some(mut w) = l.solve_lower_triangular(&t.transpose()) else {
        return 0.0;
    };
    symmetrize(&mut w);
    let lmin = w.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min);
    if lmin >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / lmin
    }
}

fn max_step_lp(x: &DVector<f64>, dx: &DVector<f64>) -> f64 {
    x.iter()
        .zip(dx.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(f64::INFINITY, f64::min)
}

struct Direction {
    dxf: DVector<f64>,
    dxs: Vec<DMatrix<f64>>,
    dxl: DVector<f64>,
    dy: DVector<f64>,
    dss: Vec<DMatrix<f64>>,
    dsl: DVector<f64>,
}

#[derive(Clone)]
struct Iterate {
    xf: DVector<f64>,
    xs: Vec<DMatrix<f64>>,
    xl: DVector<f64>,
    y: DVector<f64>,
    ss: Vec<DMatrix<f64>>,
    sl: DVector<f64>,
}

struct Residuals {
    rp: DVector<f64>,
    rd: Vec<DMatrix<f64>>,
    rdl: DVector<f64>,
    rdf: DVector<f64>,
}

struct Factors<'a> {
    zs: &'a [DMatrix<f64>],
    mchol: &'a DenseCholesky,
    /// `L^-1 A_f` and the Cholesky factor of `A_f' M^-1 A_f`
    free: Option<(DMatrix<f64>, DenseCholesky)>,
}

fn direction(
    pre: &Prepared,
    it: &Iterate,
    res: &Residuals,
    f: &Factors,
    sigma_mu: f64,
    corr: Option<&Direction>,
) -> Direction {
    // K = σμ Z - X - X Rd Z - dXa dSa Z
    let ks: Vec<DMatrix<f64>> = (0..pre.psd_dims.len())
        .into_par_iter()
        .map(|k| {
            let (x, z) = (&it.xs[k], &f.zs[k]);
            let mut inner = &res.rd[k] * z;
            let mut kk = z * sigma_mu - x;
            kk -= x * &inner;
            if let Some(c) = corr {
                inner = &c.dss[k] * z;
                kk -= &c.dxs[k] * inner;
            }
            symmetrize(&mut kk);
            kk
        })
        .collect();
    let mut kl = DVector::zeros(pre.n_lp);
    for i in 0..pre.n_lp {
        let (x, s) = (it.xl[i], it.sl[i]);
        let mut v = sigma_mu / s - x - x * res.rdl[i] / s;
        if let Some(c) = corr {
            v -= c.dxl[i] * c.dsl[i] / s;
        }
        kl[i] = v;
    }
    let zero_free = DVector::zeros(pre.n_free);
    let r = &res.rp - pre.apply(&zero_free, &ks, &kl);
    let (mut dxf, mut dy) = kkt_solve(pre, f, &r, &res.rdf);
    let (mut ady, mut adyl) = pre.adjoint(&dy);
    let mut dxs: Vec<DMatrix<f64>> = ks
        .into_par_iter()
        .enumerate()
        .map(|(k, mut kk)| {
            kk += &it.xs[k] * &ady[k] * &f.zs[k];
            symmetrize(&mut kk);
            kk
        })
        .collect();
    let mut dxl = kl;
    for i in 0..pre.n_lp {
        dxl[i] += it.xl[i] * adyl[i] / it.sl[i];
    }
    // iterative refinement against the exact operators
    let mut prev = f64::INFINITY;
    for _ in 0..REFINE_STEPS {
        let e = &res.rp - pre.apply(&dxf, &dxs, &dxl);
        let ed = &res.rdf - pre.adjoint_free(&dy);
        let size = vmax_abs(&e).max(vmax_abs(&ed));
        if size <= 1e-15 || size >= 0.9 * prev {
            break;
        }
        prev = size;
        let (cxf, cy) = kkt_solve(pre, f, &e, &ed);
        let (cady, cadyl) = pre.adjoint(&cy);
        dxs.par_iter_mut().enumerate().for_each(|(k, dx)| {
            let mut c = &it.xs[k] * &cady[k] * &f.zs[k];
            symmetrize(&mut c);
            *dx += c;
        });
        for i in 0..pre.n_lp {
            dxl[i] += it.xl[i] * cadyl[i] / it.sl[i];
        }
        for (a, c) in ady.iter_mut().zip(&cady) {
            *a += c;
        }
        adyl += cadyl;
        dxf += cxf;
        dy += cy;
    }
    let dss: Vec<DMatrix<f64>> = res.rd.iter().zip(&ady).map(|(rd, a)| rd - a).collect();
    let dsl = &res.rdl - &adyl;
    Direction {
        dxf,
        dxs,
        dxl,
        dy,
        dss,
        dsl,
    }
}

const REFINE_STEPS: usize = 30;
/// Iterations without progress on the stopping criteria before giving up.
const STALL_ITERS: usize = 25;

/// Solves `M dy + A_f dx = r`, `A_f' dy = r_d`.
fn kkt_solve(pre: &Prepared, f: &Factors, r: &DVector<f64>, rdf: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    match &f.free {
        Some((w, nchol)) => {
            let lr = f.mchol.solve_lower(r);
            let rhs = w.transpose() * lr - rdf;
            let dxf = nchol.solve(&rhs);
            let r2 = r - pre.apply_free(&dxf);
            (dxf, f.mchol.solve(&r2))
        }
        None => (DVector::zeros(pre.n_free), f.mchol.solve(r)),
    }
}

fn step_lengths(
    xchol: &[Cholesky<f64, Dyn>],
    schol: &[Cholesky<f64, Dyn>],
    it: &Iterate,
    d: &Direction,
) -> (f64, f64) {
    let ap = xchol
        .par_iter()
        .zip(&d.dxs)
        .map(|(c, dx)| max_step_psd(c, dx))
        .reduce(|| f64::INFINITY, f64::min)
        .min(max_step_lp(&it.xl, &d.dxl));
    let ad = schol
        .par_iter()
        .zip(&d.dss)
        .map(|(c, ds)| max_step_psd(c, ds))
        .reduce(|| f64::INFINITY, f64::min)
        .min(max_step_lp(&it.sl, &d.dsl));
    (ap, ad)
}

fn complementarity(it: &Iterate, d: Option<(&Direction, f64, f64)>) -> f64 {
    let mut total = 0.0;
    for k in 0..it.xs.len() {
        let (x, s) = match d {
            Some((d, ap, ad)) => (&it.xs[k] + &d.dxs[k] * ap, &it.ss[k] + &d.dss[k] * ad),
            None => (it.xs[k].clone(), it.ss[k].clone()),
        };
        total += x.dot(&s);
    }
    for i in 0..it.xl.len() {
        total += match d {
            Some((d, ap, ad)) => (it.xl[i] + ap * d.dxl[i]) * (it.sl[i] + ad * d.dsl[i]),
            None => it.xl[i] * it.sl[i],
        };
    }
    total
}

/// Solves the instance from the identity starting point.
pub fn solve(inst: &SdpInstance, opts: &SolverOptions) -> SdpSolution {
    let start = Instant::now();
    let pre = Prepared::new(inst);
    let mut it = Iterate {
        xf: DVector::zeros(pre.n_free),
        xs: pre.psd_dims.iter().map(|&d| DMatrix::identity(d, d)).collect(),
        xl: DVector::from_element(pre.n_lp, 1.0),
        y: DVector::zeros(pre.m),
        ss: pre.psd_dims.iter().map(|&d| DMatrix::identity(d, d)).collect(),
        sl: DVector::from_element(pre.n_lp, 1.0),
    };
    let dim_total = (pre.psd_dims.iter().sum::<usize>() + pre.n_lp).max(1) as f64;
    let b_norm = vmax_abs(&pre.b);
    let c_norm = pre
        .c_psd
        .iter()
        .map(max_abs)
        .fold(vmax_abs(&pre.c_lp).max(vmax_abs(&pre.c_free)), f64::max);
    let af = (pre.n_free > 0).then(|| pre.free_matrix());

    let mut history = Vec::new();
    let status;
    let mut iter = 0usize;
    let mut last;
    let mut best: Option<(f64, Iterate, Measures)> = None;
    let mut since_best = 0usize;
    loop {
        // residuals and objectives
        let ax = pre.apply(&it.xf, &it.xs, &it.xl);
        let rp = &pre.b - ax;
        let (aty, atyl) = pre.adjoint(&it.y);
        let rd: Vec<DMatrix<f64>> = (0..pre.psd_dims.len())
            .map(|k| &pre.c_psd[k] - &aty[k] - &it.ss[k])
            .collect();
        let rdl = &pre.c_lp - atyl - &it.sl;
        let rdf = &pre.c_free - pre.adjoint_free(&it.y);
        let pobj = pre.c_free.dot(&it.xf)
            + (0..pre.psd_dims.len()).map(|k| pre.c_psd[k].dot(&it.xs[k])).sum::<f64>()
            + pre.c_lp.dot(&it.xl);
        let dobj = pre.b.dot(&it.y);
        let mu = complementarity(&it, None) / dim_total;
        let pres = vmax_abs(&rp);
        let dres = rd
            .iter()
            .map(max_abs)
            .fold(vmax_abs(&rdl).max(vmax_abs(&rdf)), f64::max)
            / (1.0 + c_norm);
        let rel_gap = mu / (1.0 + pobj.abs());
        last = (pobj, dobj, pres, dres, rel_gap);
        let merit = (pres / opts.feas_tol).max(dres / opts.feas_tol).max(rel_gap / opts.gap_tol);
        if best.as_ref().is_none_or(|(m, ..)| merit < *m) {
            best = Some((merit, it.clone(), last));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if iter > 0 {
            if let Some(h) = history.last_mut() {
                let h: &mut IterLog = h;
                h.mu = mu;
                h.primal_res = pres;
                h.dual_res = dres;
                h.rel_gap = rel_gap;
                h.primal_obj = pobj;
                h.dual_obj = dobj;
            }
        }
        if opts.verbose {
            eprintln!(
                "iter {iter:3}  mu {mu:9.2e}  pres {pres:9.2e}  dres {dres:9.2e}  gap {rel_gap:9.2e}  pobj {pobj:+.10e}  dobj {dobj:+.10e}"
            );
        }
        if pres <= opts.feas_tol && dres <= opts.feas_tol && rel_gap <= opts.gap_tol {
            status = SdpStatus::Optimal;
            break;
        }
        if !(pobj.is_finite() && dobj.is_finite()) {
            status = SdpStatus::NumericalFailure;
            break;
        }
        let y_norm = vmax_abs(&it.y);
        if dres <= opts.feas_tol.sqrt() && (dobj > 1e10 * (1.0 + b_norm) || y_norm > 1e12) {
            status = SdpStatus::PrimalInfeasible;
            break;
        }
        let x_norm = it.xs.iter().map(max_abs).fold(vmax_abs(&it.xl).max(vmax_abs(&it.xf)), f64::max);
        if pres <= opts.feas_tol.sqrt() && (pobj < -1e10 * (1.0 + c_norm) || x_norm > 1e12) {
            status = SdpStatus::DualInfeasible;
            break;
        }
        if iter >= opts.max_iters || opts.time_limit.is_some_and(|tl| start.elapsed() > tl) {
            status = SdpStatus::MaxIters;
            break;
        }
        if since_best >= STALL_ITERS {
            status = SdpStatus::NumericalFailure;
            break;
        }
        iter += 1;

        // factorizations
        let xchol: Option<Vec<_>> = it.xs.par_iter().map(|x| x.clone().cholesky()).collect();
        let schol: Option<Vec<_>> = it.ss.par_iter().map(|s| s.clone().cholesky()).collect();
        let (Some(xchol), Some(schol)) = (xchol, schol) else {
            status = SdpStatus::NumericalFailure;
            break;
        };
        let zs: Vec<DMatrix<f64>> = schol
            .par_iter()
            .map(|c| {
                let mut z = c.inverse();
                symmetrize(&mut z);
                z
            })
            .collect();
        let mmat = pre.schur(&it.xs, &zs, &it.xl, &it.sl);
        let Some(mchol) = DenseCholesky::factor(&mmat) else {
            status = SdpStatus::NumericalFailure;
            break;
        };
        if opts.verbose && mchol.shift > 0.0 {
            eprintln!("         schur diagonal shift {:.1e}", mchol.shift);
        }
        let free = match &af {
            Some(af) => {
                let w = mchol.solve_lower_mat(af);
                let nmat = w.transpose() * &w;
                match DenseCholesky::factor(&nmat) {
                    Some(nc) => Some((w, nc)),
                    None => {
                        status = SdpStatus::NumericalFailure;
                        break;
                    }
                }
            }
            None => None,
        };
        let factors = Factors {
            zs: &zs,
            mchol: &mchol,
            free,
        };
        let res = Residuals { rp, rd, rdl, rdf };

        // predictor
        let pred = direction(&pre, &it, &res, &factors, 0.0, None);
        let (ap, ad) = step_lengths(&xchol, &schol, &it, &pred);
        let (ap, ad) = (ap.min(1.0), ad.min(1.0));
        let gap_now = complementarity(&it, None);
        let gap_pred = complementarity(&it, Some((&pred, ap, ad)));
        let sigma = if gap_now > 0.0 {
            (gap_pred / gap_now).clamp(0.0, 1.0).powi(3)
        } else {
            0.0
        };
        // corrector
        let d = direction(&pre, &it, &res, &factors, sigma * mu, Some(&pred));
        let (ap, ad) = step_lengths(&xchol, &schol, &it, &d);
        let gamma = if mu < 1e-6 { 0.98 } else { 0.95 };
        let ap = (gamma * ap).min(1.0);
        let ad = (gamma * ad).min(1.0);

        history.push(IterLog {
            iter,
            mu: f64::NAN,
            primal_res: f64::NAN,
            dual_res: f64::NAN,
            rel_gap: f64::NAN,
            primal_obj: f64::NAN,
            dual_obj: f64::NAN,
            step_primal: ap,
            step_dual: ad,
        });
        if ap < 1e-12 && ad < 1e-12 {
            status = SdpStatus::NumericalFailure;
            break;
        }
        it.xf += &d.dxf * ap;
        for (x, dx) in it.xs.iter_mut().zip(&d.dxs) {
            *x += dx * ap;
            symmetrize(x);
        }
        it.xl += &d.dxl * ap;
        it.y += &d.dy * ad;
        for (s, ds) in it.ss.iter_mut().zip(&d.dss) {
            *s += ds * ad;
            symmetrize(s);
        }
        it.sl += &d.dsl * ad;
    }
    // drop a trailing log entry whose post-step metrics were never computed
    if history.last().is_some_and(|h| h.mu.is_nan()) {
        history.pop();
    }

    if status != SdpStatus::Optimal {
        // fall back to the iterate closest to the stopping criteria
        if let Some((_, b_it, b_last)) = best {
            if matches!(status, SdpStatus::MaxIters | SdpStatus::NumericalFailure) {
                it = b_it;
                last = b_last;
            }
        }
    }
    let mut blocks = Vec::with_capacity(pre.layout.len());
    let mut dual_blocks = Vec::with_capacity(pre.layout.len());
    for (bi, &(kind, k)) in pre.layout.iter().enumerate() {
        match kind {
            BlockKind::Psd => {
                blocks.push(it.xs[k].clone());
                dual_blocks.push(it.ss[k].clone());
            }
            BlockKind::Diag => {
                let d = inst.blocks[bi].dim;
                blocks.push(DMatrix::from_diagonal(&it.xl.rows(k, d).into_owned()));
                dual_blocks.push(DMatrix::from_diagonal(&it.sl.rows(k, d).into_owned()));
            }
        }
    }
    let (pobj, dobj, pres, dres, rel_gap) = last;
    SdpSolution {
        status,
        free: it.xf.iter().cloned().collect(),
        blocks,
        y: it.y.iter().cloned().collect(),
        dual_blocks,
        primal_obj: pobj,
        dual_obj: dobj,
        primal_res: pres,
        dual_res: dres,
        rel_gap,
        iterations: iter,
        history,
    }
}
