//! Primal-dual interior-point solver for LP/SOCP in homogeneous self-dual
//! embedding form, with Nesterov-Todd scaling and a Mehrotra
//! predictor-corrector step.
//!
//! The program is converted to
//!     min c'x  s.t.  A x = b,  G x + s = h,  s in K,
//! where K is a product of a nonnegative orthant (inequality rows and
//! variable bounds) and second-order cones. The embedding tracks
//! (x, y, z, s, tau, kappa); tau -> 0 with kappa > 0 yields infeasibility or
//! unboundedness certificates instead of a primal point.

use crate::cones::{ConeLayout, Scaling};
use crate::ldl::{LdlError, LdlSolver};
use crate::presolve::{presolve, Presolved, Reduction};
use crate::program::{ConvexProgram, Sense};
use crate::sparse::{dot, norm2, norm_inf, CscMat};
use log::debug;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
    NumericalFailure,
}

#[derive(Clone, Debug)]
pub struct SolveOptions {
    /// Feasibility and relative-gap tolerance.
    pub tol: f64,
    pub max_iter: usize,
    pub verbose: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-6,
            max_iter: 100,
            verbose: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub status: Status,
    pub x: Vec<f64>,
    pub objective: f64,
    pub dual_objective: f64,
    /// Shadow prices: entry k is the derivative of the optimal objective with
    /// respect to the right-hand side of row k (so <= rows get nonpositive
    /// values, >= rows nonnegative, equalities either sign). Rows eliminated
    /// in presolve report zero.
    pub row_duals: Vec<f64>,
    pub soc_duals: Vec<Vec<f64>>,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    pub message: String,
}

/// Pluggable solver backend; the in-repo interior-point method is the
/// default and the acceptance path. An adapter to an external conic solver
/// can implement the same trait.
pub trait SolverBackend {
    fn name(&self) -> &str;
    fn solve(&self, prog: &ConvexProgram, opts: &SolveOptions) -> Solution;
}

pub struct InteriorPoint;

impl SolverBackend for InteriorPoint {
    fn name(&self) -> &str {
        "interior-point"
    }
    fn solve(&self, prog: &ConvexProgram, opts: &SolveOptions) -> Solution {
        solve(prog, opts)
    }
}

pub fn solve(prog: &ConvexProgram, opts: &SolveOptions) -> Solution {
    match presolve(prog) {
        Presolved::Infeasible { reason } => Solution {
            status: Status::Infeasible,
            x: vec![0.0; prog.num_vars()],
            objective: f64::NAN,
            dual_objective: f64::NAN,
            row_duals: vec![0.0; prog.num_rows()],
            soc_duals: prog.socs().iter().map(|s| vec![0.0; s.args.len() + 1]).collect(),
            iterations: 0,
            primal_residual: f64::INFINITY,
            dual_residual: f64::INFINITY,
            gap: f64::INFINITY,
            message: format!("presolve: {reason}"),
        },
        Presolved::Solved { x } => {
            let objective = prog.objective_value(&x);
            Solution {
                status: Status::Optimal,
                x,
                objective,
                dual_objective: objective,
                row_duals: vec![0.0; prog.num_rows()],
                soc_duals: prog.socs().iter().map(|s| vec![0.0; s.args.len() + 1]).collect(),
                iterations: 0,
                primal_residual: 0.0,
                dual_residual: 0.0,
                gap: 0.0,
                message: "fully determined by fixed variables".into(),
            }
        }
        Presolved::Reduced(red) => {
            let std = StdForm::build(&red.inner);
            let res = IpmCore::new(&std, opts).run();
            map_back(prog, &red, &std, res)
        }
    }
}

enum ConeRowSrc {
    Row(usize),
    Bound,
}

struct StdForm {
    n: usize,
    a_rows: Vec<Vec<(usize, f64)>>,
    b: Vec<f64>,
    g_rows: Vec<Vec<(usize, f64)>>,
    h: Vec<f64>,
    layout: ConeLayout,
    c: Vec<f64>,
    eq_src: Vec<usize>,
    nonneg_src: Vec<ConeRowSrc>,
    soc_src: Vec<usize>,
}

impl StdForm {
    fn build(p: &ConvexProgram) -> StdForm {
        let n = p.num_vars();
        let mut a_rows = Vec::new();
        let mut b = Vec::new();
        let mut eq_src = Vec::new();
        let mut g_rows = Vec::new();
        let mut h = Vec::new();
        let mut nonneg_src = Vec::new();

        for (k, row) in p.rows().iter().enumerate() {
            match row.sense {
                Sense::Eq => {
                    a_rows.push(row.coeffs.clone());
                    b.push(row.rhs);
                    eq_src.push(k);
                }
                Sense::Le => {
                    g_rows.push(row.coeffs.clone());
                    h.push(row.rhs);
                    nonneg_src.push(ConeRowSrc::Row(k));
                }
                Sense::Ge => {
                    g_rows.push(row.coeffs.iter().map(|&(i, c)| (i, -c)).collect());
                    h.push(-row.rhs);
                    nonneg_src.push(ConeRowSrc::Row(k));
                }
            }
        }
        for i in 0..n {
            let (lb, ub) = p.bounds(crate::program::VarId(i));
            if ub.is_finite() {
                g_rows.push(vec![(i, 1.0)]);
                h.push(ub);
                nonneg_src.push(ConeRowSrc::Bound);
            }
            if lb.is_finite() {
                g_rows.push(vec![(i, -1.0)]);
                h.push(-lb);
                nonneg_src.push(ConeRowSrc::Bound);
            }
        }
        let nonneg = g_rows.len();
        let mut socs = Vec::new();
        let mut soc_src = Vec::new();
        for (k, soc) in p.socs().iter().enumerate() {
            // s_0 = c'x + d, s_i = A_i x + b_i  =>  G rows -c and -A.
            g_rows.push(soc.bound.0.iter().map(|&(i, c)| (i, -c)).collect());
            h.push(soc.bound.1);
            for (coeffs, cst) in &soc.args {
                g_rows.push(coeffs.iter().map(|&(i, c)| (i, -c)).collect());
                h.push(*cst);
            }
            socs.push(soc.args.len() + 1);
            soc_src.push(k);
        }

        StdForm {
            n,
            a_rows,
            b,
            g_rows,
            h,
            layout: ConeLayout { nonneg, socs },
            c: (0..n).map(|i| p.cost_coeff(crate::program::VarId(i))).collect(),
            eq_src,
            nonneg_src,
            soc_src,
        }
    }

    fn apply_a(&self, x: &[f64], out: &mut [f64]) {
        for (k, row) in self.a_rows.iter().enumerate() {
            out[k] = row.iter().map(|&(i, c)| c * x[i]).sum();
        }
    }

    fn apply_g(&self, x: &[f64], out: &mut [f64]) {
        for (k, row) in self.g_rows.iter().enumerate() {
            out[k] = row.iter().map(|&(i, c)| c * x[i]).sum();
        }
    }

    fn add_at_y(&self, y: &[f64], out: &mut [f64]) {
        for (k, row) in self.a_rows.iter().enumerate() {
            for &(i, c) in row {
                out[i] += c * y[k];
            }
        }
    }

    fn add_gt_z(&self, z: &[f64], out: &mut [f64]) {
        for (k, row) in self.g_rows.iter().enumerate() {
            for &(i, c) in row {
                out[i] += c * z[k];
            }
        }
    }
}

enum KktSrc {
    Const(f64),
    XReg,
    DualReg,
    NonnegW2(usize),
    SocW2 { cone: usize, a: usize, b: usize },
}

struct Direction {
    dx: Vec<f64>,
    dy: Vec<f64>,
    dz: Vec<f64>,
    dslack: Vec<f64>,
    ds_scaled: Vec<f64>,
    dz_scaled: Vec<f64>,
    dtau: f64,
    dkap: f64,
}

struct IpmResult {
    status: Status,
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    iterations: usize,
    pres: f64,
    dres: f64,
    relgap: f64,
    dobj: f64,
    message: String,
}

struct IpmCore<'a> {
    std: &'a StdForm,
    opts: &'a SolveOptions,
    n: usize,
    p: usize,
    m: usize,
    dim: usize,
    pattern: CscMat,
    srcs: Vec<KktSrc>,
    unreg: CscMat,
    ldl: Option<LdlSolver>,
    delta: f64,
    norm_b: f64,
    norm_h: f64,
    norm_c: f64,
}

const STEP_BACKOFF: f64 = 0.98;
const REG_DELTA: f64 = 1e-8;

impl<'a> IpmCore<'a> {
    fn new(std: &'a StdForm, opts: &'a SolveOptions) -> Self {
        let n = std.n;
        let p = std.a_rows.len();
        let m = std.layout.total_dim();
        let dim = n + p + m;

        let mut trips: Vec<(usize, usize, usize)> = Vec::new(); // (row, col, src idx)
        let mut srcs: Vec<KktSrc> = Vec::new();
        let push = |trips: &mut Vec<(usize, usize, usize)>, srcs: &mut Vec<KktSrc>, r: usize, c: usize, s: KktSrc| {
            srcs.push(s);
            trips.push((r, c, srcs.len() - 1));
        };
        for j in 0..n {
            push(&mut trips, &mut srcs, j, j, KktSrc::XReg);
        }
        for (k, row) in std.a_rows.iter().enumerate() {
            let col = n + k;
            for &(i, c) in row {
                push(&mut trips, &mut srcs, i, col, KktSrc::Const(c));
            }
            push(&mut trips, &mut srcs, col, col, KktSrc::DualReg);
        }
        for (r, row) in std.g_rows.iter().enumerate() {
            let col = n + p + r;
            for &(i, c) in row {
                push(&mut trips, &mut srcs, i, col, KktSrc::Const(c));
            }
        }
        for r in 0..std.layout.nonneg {
            let col = n + p + r;
            push(&mut trips, &mut srcs, col, col, KktSrc::NonnegW2(r));
        }
        for (cone, (lo, hi)) in std.layout.soc_ranges().enumerate() {
            for bcol in lo..hi {
                for arow in lo..=bcol {
                    push(
                        &mut trips,
                        &mut srcs,
                        n + p + arow,
                        n + p + bcol,
                        KktSrc::SocW2 {
                            cone,
                            a: arow - lo,
                            b: bcol - lo,
                        },
                    );
                }
            }
        }

        // CSC pattern sorted by (col, row); srcs reordered to match.
        trips.sort_unstable_by_key(|&(r, c, _)| (c, r));
        let mut colptr = vec![0usize; dim + 1];
        let mut rowind = Vec::with_capacity(trips.len());
        let mut ordered = Vec::with_capacity(trips.len());
        for &(r, c, s) in &trips {
            rowind.push(r);
            colptr[c + 1] += 1;
            ordered.push(s);
        }
        for j in 0..dim {
            colptr[j + 1] += colptr[j];
        }
        let nnz = rowind.len();
        let pattern = CscMat {
            n_rows: dim,
            n_cols: dim,
            colptr,
            rowind,
            values: vec![0.0; nnz],
        };
        let unreg = pattern.clone();
        let srcs_ordered: Vec<KktSrc> = ordered
            .into_iter()
            .map(|i| std::mem::replace(&mut srcs[i], KktSrc::XReg))
            .collect();

        IpmCore {
            std,
            opts,
            n,
            p,
            m,
            dim,
            pattern,
            srcs: srcs_ordered,
            unreg,
            ldl: None,
            delta: REG_DELTA,
            norm_b: norm2(&std.b),
            norm_h: norm2(&std.h),
            norm_c: norm2(&std.c),
        }
    }

    fn fill_values(&mut self, scaling: Option<&Scaling>) {
        for (k, src) in self.srcs.iter().enumerate() {
            let (reg, unreg) = match src {
                KktSrc::Const(v) => (*v, *v),
                KktSrc::XReg => (self.delta, 0.0),
                KktSrc::DualReg => (-self.delta, 0.0),
                KktSrc::NonnegW2(r) => {
                    let w2 = scaling.map_or(1.0, |s| s.w2_nonneg[*r]);
                    (-w2 - self.delta, -w2)
                }
                KktSrc::SocW2 { cone, a, b } => {
                    let w2 = match scaling {
                        Some(s) => s.socs[*cone].w2_entry(*a, *b),
                        None => {
                            if a == b {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    let d = if a == b { self.delta } else { 0.0 };
                    (-w2 - d, -w2)
                }
            };
            self.pattern.values[k] = reg;
            self.unreg.values[k] = unreg;
        }
    }

    fn factor(&mut self, scaling: Option<&Scaling>) -> Result<(), LdlError> {
        if self.ldl.is_none() {
            self.ldl = Some(LdlSolver::new(&self.pattern)?);
        }
        let base_delta = self.delta;
        for attempt in 0..4 {
            self.fill_values(scaling);
            let ldl = self.ldl.as_mut().unwrap();
            match ldl.factor(&self.pattern.values) {
                Ok(()) => {
                    self.delta = base_delta;
                    return Ok(());
                }
                Err(LdlError::ZeroPivot(_)) if attempt < 3 => {
                    self.delta *= 100.0;
                    debug!("kkt factorization retry with regularization {}", self.delta);
                }
                Err(e) => return Err(e),
            }
        }
        unreachable!()
    }

    /// Solves the (regularized) KKT system with iterative refinement against
    /// the unregularized matrix.
    fn kkt_solve(&mut self, rhs: &[f64]) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.ldl.as_mut().unwrap().solve(&mut x);
        for _ in 0..2 {
            let mut r = rhs.to_vec();
            self.unreg.symmetric_gaxpy(-1.0, &x, &mut r);
            if norm_inf(&r) <= 1e-12 * (1.0 + norm_inf(rhs)) {
                break;
            }
            let mut dx = r;
            self.ldl.as_mut().unwrap().solve(&mut dx);
            for (xi, di) in x.iter_mut().zip(&dx) {
                *xi += di;
            }
        }
        x
    }

    fn run(mut self) -> IpmResult {
        let (n, p, m) = (self.n, self.p, self.m);
        let layout = self.std.layout.clone();
        let nu = layout.degree() as f64 + 1.0;
        let e = layout.identity();
        let fail = |msg: &str, iterations: usize| IpmResult {
            status: Status::NumericalFailure,
            x: vec![0.0; n],
            y: vec![0.0; p],
            z: vec![0.0; m],
            iterations,
            pres: f64::INFINITY,
            dres: f64::INFINITY,
            relgap: f64::INFINITY,
            dobj: f64::NAN,
            message: msg.to_string(),
        };
        if m == 0 {
            return fail("program has no inequality or cone structure", 0);
        }

        // Initial point from two solves with identity scaling.
        if self.factor(None).is_err() {
            return fail("initial KKT factorization failed", 0);
        }
        let mut rhs = vec![0.0; self.dim];
        rhs[n..n + p].copy_from_slice(&self.std.b);
        rhs[n + p..].copy_from_slice(&self.std.h);
        let sol1 = self.kkt_solve(&rhs);
        let mut x: Vec<f64> = sol1[..n].to_vec();
        let mut s: Vec<f64> = sol1[n + p..].iter().map(|v| -v).collect();
        let me = layout.min_eig(&s);
        if me <= 1e-8 {
            for (si, ei) in s.iter_mut().zip(&e) {
                *si += (1.0 - me) * ei;
            }
        }
        for v in rhs.iter_mut() {
            *v = 0.0;
        }
        for (r, c) in rhs[..n].iter_mut().zip(&self.std.c) {
            *r = -c;
        }
        let sol2 = self.kkt_solve(&rhs);
        let mut y: Vec<f64> = sol2[n..n + p].to_vec();
        let mut z: Vec<f64> = sol2[n + p..].to_vec();
        let mez = layout.min_eig(&z);
        if mez <= 1e-8 {
            for (zi, ei) in z.iter_mut().zip(&e) {
                *zi += (1.0 - mez) * ei;
            }
        }
        let mut tau = 1.0;
        let mut kappa = 1.0;

        let mut stall = 0usize;
        let mut hr_x = vec![0.0; n];
        let mut hr_y = vec![0.0; p];
        let mut hr_z = vec![0.0; m];

        for iter in 0..=self.opts.max_iter {
            // Residuals of the homogeneous embedding.
            for (i, v) in hr_x.iter_mut().enumerate() {
                *v = self.std.c[i] * tau;
            }
            self.std.add_at_y(&y, &mut hr_x);
            self.std.add_gt_z(&z, &mut hr_x);
            self.std.apply_a(&x, &mut hr_y);
            for (k, v) in hr_y.iter_mut().enumerate() {
                *v -= self.std.b[k] * tau;
            }
            self.std.apply_g(&x, &mut hr_z);
            for (k, v) in hr_z.iter_mut().enumerate() {
                *v += s[k] - self.std.h[k] * tau;
            }
            let cx = dot(&self.std.c, &x);
            let by = dot(&self.std.b, &y);
            let hz = dot(&self.std.h, &z);
            let hr_tau = kappa + cx + by + hz;

            let pobj = cx / tau;
            let dobj = -(by + hz) / tau;
            let pres = (norm2(&hr_y) / (1.0 + self.norm_b)).max(norm2(&hr_z) / (1.0 + self.norm_h)) / tau;
            let dres = norm2(&hr_x) / (1.0 + self.norm_c) / tau;
            let gap_abs = dot(&s, &z) / (tau * tau);
            let relgap = gap_abs / f64::max(1.0, pobj.abs());
            if self.opts.verbose {
                debug!(
                    "iter {iter:3} pobj {pobj:+.6e} dobj {dobj:+.6e} pres {pres:.2e} dres {dres:.2e} gap {relgap:.2e} tau {tau:.2e} kappa {kappa:.2e}"
                );
            }

            let tol = self.opts.tol;
            if pres <= tol && dres <= tol && relgap <= tol {
                return IpmResult {
                    status: Status::Optimal,
                    x: scale_by(&x, tau),
                    y: scale_by(&y, tau),
                    z: scale_by(&z, tau),
                    iterations: iter,
                    pres,
                    dres,
                    relgap,
                    dobj,
                    message: "converged".into(),
                };
            }
            // Infeasibility certificates.
            let rho = -(by + hz);
            if rho > 0.0 {
                let mut cert = vec![0.0; n];
                self.std.add_at_y(&y, &mut cert);
                self.std.add_gt_z(&z, &mut cert);
                if norm2(&cert) <= tol * rho {
                    return IpmResult {
                        status: Status::Infeasible,
                        x: vec![0.0; n],
                        y: scale_by(&y, rho),
                        z: scale_by(&z, rho),
                        iterations: iter,
                        pres,
                        dres,
                        relgap,
                        dobj: f64::NAN,
                        message: "primal infeasibility certificate found".into(),
                    };
                }
            }
            if -cx > 0.0 {
                let sigma = -cx;
                let mut ax = vec![0.0; p];
                self.std.apply_a(&x, &mut ax);
                let mut gxs = vec![0.0; m];
                self.std.apply_g(&x, &mut gxs);
                for (v, si) in gxs.iter_mut().zip(&s) {
                    *v += si;
                }
                if norm2(&ax).max(norm2(&gxs)) <= tol * sigma {
                    return IpmResult {
                        status: Status::Unbounded,
                        x: scale_by(&x, sigma),
                        y: vec![0.0; p],
                        z: vec![0.0; m],
                        iterations: iter,
                        pres,
                        dres,
                        relgap,
                        dobj: f64::NAN,
                        message: "unboundedness certificate found".into(),
                    };
                }
            }
            if iter == self.opts.max_iter {
                return IpmResult {
                    status: Status::IterationLimit,
                    x: scale_by(&x, tau),
                    y: scale_by(&y, tau),
                    z: scale_by(&z, tau),
                    iterations: iter,
                    pres,
                    dres,
                    relgap,
                    dobj,
                    message: "iteration limit reached".into(),
                };
            }

            let mu = (dot(&s, &z) + tau * kappa) / nu;
            let scaling = match Scaling::compute(&layout, &s, &z) {
                Some(sc) => sc,
                None => return fail("iterate left the cone interior", iter),
            };
            if self.factor(Some(&scaling)).is_err() {
                return fail("KKT factorization failed", iter);
            }

            // Constant-part solve, reused by both directions.
            let mut rhs1 = vec![0.0; self.dim];
            for (r, c) in rhs1[..n].iter_mut().zip(&self.std.c) {
                *r = -c;
            }
            rhs1[n..n + p].copy_from_slice(&self.std.b);
            rhs1[n + p..].copy_from_slice(&self.std.h);
            let u1 = self.kkt_solve(&rhs1);
            let u1_dots = dot(&self.std.c, &u1[..n]) + dot(&self.std.b, &u1[n..n + p]) + dot(&self.std.h, &u1[n + p..]);
            let denom_base = u1_dots - kappa / tau;

            let lambda = scaling.lambda.clone();
            let mut lxl = vec![0.0; m];
            layout.jordan(&lambda, &lambda, &mut lxl);

            let solve_dir = |core: &mut IpmCore,
                             theta: f64,
                             ds: &[f64],
                             dkappa: f64,
                             hr_x: &[f64],
                             hr_y: &[f64],
                             hr_z: &[f64],
                             hr_tau: f64,
                             u1: &[f64],
                             scaling: &Scaling|
             -> Option<Direction> {
                let mut t1 = vec![0.0; m];
                layout.jordan_div(&lambda, ds, &mut t1);
                let mut wt1 = vec![0.0; m];
                scaling.apply_w(&layout, &t1, &mut wt1);
                let mut rhs = vec![0.0; core.dim];
                for i in 0..n {
                    rhs[i] = -theta * hr_x[i];
                }
                for k in 0..p {
                    rhs[n + k] = -theta * hr_y[k];
                }
                for r in 0..m {
                    rhs[n + p + r] = -theta * hr_z[r] - wt1[r];
                }
                let u2 = core.kkt_solve(&rhs);
                let u2_dots = dot(&core.std.c, &u2[..n])
                    + dot(&core.std.b, &u2[n..n + p])
                    + dot(&core.std.h, &u2[n + p..]);
                let denom = denom_base;
                if denom.abs() < 1e-14 {
                    return None;
                }
                let dtau = (-theta * hr_tau - dkappa / tau - u2_dots) / denom;
                let dx: Vec<f64> = (0..n).map(|i| u2[i] + dtau * u1[i]).collect();
                let dy: Vec<f64> = (0..p).map(|k| u2[n + k] + dtau * u1[n + k]).collect();
                let dz: Vec<f64> = (0..m).map(|r| u2[n + p + r] + dtau * u1[n + p + r]).collect();
                // Scaled directions: ds~ = lambda \ ds - W dz, and Delta s = W ds~.
                let mut dz_scaled = vec![0.0; m];
                scaling.apply_w(&layout, &dz, &mut dz_scaled);
                let ds_scaled: Vec<f64> = t1.iter().zip(&dz_scaled).map(|(a, b)| a - b).collect();
                let mut dslack = vec![0.0; m];
                scaling.apply_w(&layout, &ds_scaled, &mut dslack);
                let dkap = (dkappa - kappa * dtau) / tau;
                Some(Direction {
                    dx,
                    dy,
                    dz,
                    dslack,
                    ds_scaled,
                    dz_scaled,
                    dtau,
                    dkap,
                })
            };

            // Affine (predictor) direction.
            let ds_aff: Vec<f64> = lxl.iter().map(|v| -v).collect();
            let aff = match solve_dir(
                &mut self,
                1.0,
                &ds_aff,
                -tau * kappa,
                &hr_x,
                &hr_y,
                &hr_z,
                hr_tau,
                &u1,
                &scaling,
            ) {
                Some(v) => v,
                None => return fail("singular step equation", iter),
            };
            let mut alpha_aff = layout
                .max_step(&lambda, &aff.ds_scaled, f64::INFINITY)
                .min(layout.max_step(&lambda, &aff.dz_scaled, f64::INFINITY));
            if aff.dtau < 0.0 {
                alpha_aff = alpha_aff.min(-tau / aff.dtau);
            }
            if aff.dkap < 0.0 {
                alpha_aff = alpha_aff.min(-kappa / aff.dkap);
            }
            alpha_aff = alpha_aff.min(1.0);
            let sigma = ((1.0 - alpha_aff).powi(3)).clamp(1e-8, 0.9999);

            // Combined (corrector) direction.
            let mut corr = vec![0.0; m];
            layout.jordan(&aff.ds_scaled, &aff.dz_scaled, &mut corr);
            let ds_comb: Vec<f64> = (0..m)
                .map(|r| -lxl[r] + sigma * mu * e[r] - corr[r])
                .collect();
            let dkappa_comb = -tau * kappa + sigma * mu - aff.dtau * aff.dkap;
            let dir = match solve_dir(
                &mut self,
                1.0 - sigma,
                &ds_comb,
                dkappa_comb,
                &hr_x,
                &hr_y,
                &hr_z,
                hr_tau,
                &u1,
                &scaling,
            ) {
                Some(v) => v,
                None => return fail("singular step equation", iter),
            };
            let mut alpha = layout
                .max_step(&lambda, &dir.ds_scaled, f64::INFINITY)
                .min(layout.max_step(&lambda, &dir.dz_scaled, f64::INFINITY));
            if dir.dtau < 0.0 {
                alpha = alpha.min(-tau / dir.dtau);
            }
            if dir.dkap < 0.0 {
                alpha = alpha.min(-kappa / dir.dkap);
            }
            alpha = (STEP_BACKOFF * alpha).min(1.0);
            if alpha < 1e-7 {
                stall += 1;
                if stall >= 2 {
                    return fail("step length collapsed", iter);
                }
            } else {
                stall = 0;
            }

            for i in 0..n {
                x[i] += alpha * dir.dx[i];
            }
            for k in 0..p {
                y[k] += alpha * dir.dy[k];
            }
            for r in 0..m {
                z[r] += alpha * dir.dz[r];
                s[r] += alpha * dir.dslack[r];
            }
            tau += alpha * dir.dtau;
            kappa += alpha * dir.dkap;
            if tau <= 0.0 || kappa <= 0.0 {
                return fail("tau or kappa left the positive ray", iter);
            }
        }
        unreachable!()
    }
}

fn scale_by(v: &[f64], denom: f64) -> Vec<f64> {
    let d = if denom.abs() < 1e-300 { 1e-300 } else { denom };
    v.iter().map(|x| x / d).collect()
}

fn map_back(prog: &ConvexProgram, red: &Reduction, std: &StdForm, res: IpmResult) -> Solution {
    let x_full = red.expand_x(&res.x);
    let mut row_duals = vec![0.0; prog.num_rows()];
    let mut soc_duals: Vec<Vec<f64>> = prog.socs().iter().map(|s| vec![0.0; s.args.len() + 1]).collect();
    // Inner-row duals -> original rows.
    let mut inner_row_duals = vec![0.0; red.inner.num_rows()];
    for (k, &src) in std.eq_src.iter().enumerate() {
        inner_row_duals[src] = -res.y[k];
    }
    for (r, src) in std.nonneg_src.iter().enumerate() {
        if let ConeRowSrc::Row(k) = src {
            // z is the multiplier of the row in <= form; flip back for >=.
            inner_row_duals[*k] = match red.inner.rows()[*k].sense {
                Sense::Le => -res.z[r],
                Sense::Ge => res.z[r],
                Sense::Eq => unreachable!("equalities do not land in the cone"),
            };
        }
    }
    for (old, new) in red.row_map.iter().enumerate() {
        if let Some(k) = new {
            row_duals[old] = inner_row_duals[*k];
        }
    }
    let soc_offsets: Vec<(usize, usize)> = std.layout.soc_ranges().collect();
    for (block, &inner_idx) in std.soc_src.iter().enumerate() {
        let (lo, hi) = soc_offsets[block];
        for (old, new) in red.soc_map.iter().enumerate() {
            if *new == Some(inner_idx) {
                soc_duals[old] = res.z[lo..hi].to_vec();
            }
        }
    }

    let objective = prog.objective_value(&x_full);
    let dual_objective = res.dobj + red.inner.cost_offset;
    Solution {
        status: res.status,
        x: x_full,
        objective,
        dual_objective,
        row_duals,
        soc_duals,
        iterations: res.iterations,
        primal_residual: res.pres,
        dual_residual: res.dres,
        gap: res.relgap,
        message: res.message,
    }
}
