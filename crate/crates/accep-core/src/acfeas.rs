//! Exact AC operating points: branch-flow evaluation, Newton-Raphson power
//! flow, and nonlinear snapshot problems for redispatch (fixed plan) and
//! local reinforcement (source capacities allowed to grow).
//!
//! Everything in this module works on the true power-flow equations, so
//! results from the convex planning models can be certified or repaired
//! against physics instead of against their own approximations. The
//! certificate of record is [`power_mismatch`]: it evaluates the nodal
//! balances at a stated operating point and knows nothing about how that
//! point was produced.

use std::collections::BTreeMap;

use anyhow::{bail, ensure, Context, Result};
use conic::ldl::LdlSolver;
use conic::sparse::CscMat;
use log::{debug, trace};

use crate::graph;
use crate::netmodel::{NetworkCase, SnapshotSeries};

/// Branches at or below this capacity are treated as out of service.
pub const CAPACITY_EPS: f64 = 1e-9;

const V_MIN: f64 = 0.9;
const V_MAX: f64 = 1.1;

/// Series and shunt admittance of all parallel circuits of a branch.
#[derive(Debug, Clone, Copy)]
pub struct BranchY {
    pub g: f64,
    pub b: f64,
    pub b_sh: f64,
}

/// Per-branch admittances scaled by installed capacity; `None` marks an
/// unbuilt branch.
pub fn scaled_admittances(case: &NetworkCase, u_ac: &[f64]) -> Vec<Option<BranchY>> {
    case.ac_branches
        .iter()
        .zip(u_ac)
        .map(|(br, &u)| {
            if u <= CAPACITY_EPS {
                return None;
            }
            let (g, b) = br.admittance();
            Some(BranchY { g: g * u, b: b * u, b_sh: br.b_sh * u })
        })
        .collect()
}

/// Local unknowns of one branch end, in this order.
const SLOT_VA: usize = 0;
const SLOT_VB: usize = 1;
const SLOT_TA: usize = 2;
const SLOT_TB: usize = 3;

/// Packed upper triangle over the four end unknowns (va, vb, ta, tb).
const UPPER_PAIRS: [(usize, usize); 10] =
    [(0, 0), (0, 1), (0, 2), (0, 3), (1, 1), (1, 2), (1, 3), (2, 2), (2, 3), (3, 3)];

/// Power entering one end of a branch, with first and second derivatives
/// with respect to (v_a, v_b, theta_a, theta_b). The Hessians are packed as
/// the upper triangle in [`UPPER_PAIRS`] order.
#[derive(Debug, Clone, Copy)]
pub(crate) struct EndEval {
    pub p: f64,
    pub q: f64,
    pub gp: [f64; 4],
    pub gq: [f64; 4],
    pub hp: [f64; 10],
    pub hq: [f64; 10],
}

/// Evaluate the flow entering a branch at side `a`, looking towards `b`:
///
/// ```text
/// p = g v_a^2 - v_a v_b (g cos + b sin)
/// q = -(b + b_sh/2) v_a^2 - v_a v_b (g sin - b cos)
/// ```
///
/// where the angle is `theta_a - theta_b`.
pub(crate) fn eval_end(y: &BranchY, va: f64, vb: f64, th_ab: f64) -> EndEval {
    let (sin, cos) = th_ab.sin_cos();
    let a = y.g * cos + y.b * sin;
    let s = y.g * sin - y.b * cos;
    let bq = y.b + y.b_sh * 0.5;
    let vv = va * vb;

    let p = y.g * va * va - vv * a;
    let q = -bq * va * va - vv * s;

    let gp = [2.0 * y.g * va - vb * a, -va * a, vv * s, -vv * s];
    let gq = [-2.0 * bq * va - vb * s, -va * s, -vv * a, vv * a];

    // d(a)/d(theta_a) = -s, d(s)/d(theta_a) = a; both flip sign for theta_b.
    let hp = [
        2.0 * y.g, // (va, va)
        -a,        // (va, vb)
        vb * s,    // (va, ta)
        -vb * s,   // (va, tb)
        0.0,       // (vb, vb)
        va * s,    // (vb, ta)
        -va * s,   // (vb, tb)
        vv * a,    // (ta, ta)
        -vv * a,   // (ta, tb)
        vv * a,    // (tb, tb)
    ];
    let hq = [
        -2.0 * bq, // (va, va)
        -s,        // (va, vb)
        -vb * a,   // (va, ta)
        vb * a,    // (va, tb)
        0.0,       // (vb, vb)
        -va * a,   // (vb, ta)
        va * a,    // (vb, tb)
        vv * s,    // (ta, ta)
        -vv * s,   // (ta, tb)
        vv * s,    // (tb, tb)
    ];

    EndEval { p, q, gp, gq, hp, hq }
}

/// Exact power flow on one AC branch at a stated voltage profile.
#[derive(Debug, Clone, Copy)]
pub struct BranchFlow {
    pub branch: u32,
    pub p_from: f64,
    pub q_from: f64,
    pub p_to: f64,
    pub q_to: f64,
    /// Series loss `p_from + p_to`; nonnegative on resistive branches.
    pub p_loss: f64,
}

/// Evaluate every AC branch at the given voltages and angles (one entry per
/// bus, in case order). Unbuilt branches report zero flow.
pub fn ac_branch_flows(
    case: &NetworkCase,
    u_ac: &[f64],
    v: &[f64],
    theta: &[f64],
) -> Vec<BranchFlow> {
    let idx = case.bus_index();
    scaled_admittances(case, u_ac)
        .iter()
        .zip(&case.ac_branches)
        .map(|(y, br)| {
            let Some(y) = y else {
                return BranchFlow {
                    branch: br.id,
                    p_from: 0.0,
                    q_from: 0.0,
                    p_to: 0.0,
                    q_to: 0.0,
                    p_loss: 0.0,
                };
            };
            let n = idx[&br.from_bus];
            let m = idx[&br.to_bus];
            let from = eval_end(y, v[n], v[m], theta[n] - theta[m]);
            let to = eval_end(y, v[m], v[n], theta[m] - theta[n]);
            BranchFlow {
                branch: br.id,
                p_from: from.p,
                q_from: from.q,
                p_to: to.p,
                q_to: to.q,
                p_loss: from.p + to.p,
            }
        })
        .collect()
}

/// A full operating point for one snapshot: voltage profile plus every
/// source and converter setpoint. Vectors follow case element order.
#[derive(Debug, Clone)]
pub struct OperatingPoint {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    /// Net active injection per source (discharge for storage).
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub beta: Vec<f64>,
    pub beta_su: Vec<f64>,
    /// Shutdown slack introduced when a snapshot is repaired; zero for
    /// plain redispatch.
    pub beta_sd: Vec<f64>,
    pub p_charge: Vec<f64>,
    pub dc_fwd: Vec<f64>,
    pub dc_bwd: Vec<f64>,
    /// Source capacities backing the point; grows beyond the plan only
    /// when reinforcement was needed.
    pub u_src: Vec<f64>,
}

/// Net `(p, q)` scheduled into each bus at a stated point: sources minus
/// charging minus load, plus HVDC terminal flows. Everything except the AC
/// branch flows, which close the balance.
pub fn net_injections(
    case: &NetworkCase,
    series: &SnapshotSeries,
    t: usize,
    point: &OperatingPoint,
) -> Vec<(f64, f64)> {
    let idx = case.bus_index();
    let mut inj: Vec<(f64, f64)> = case
        .buses
        .iter()
        .map(|bus| (-series.load_p(bus.id, t), -series.load_q(bus.id, t)))
        .collect();

    for (s, src) in case.sources.iter().enumerate() {
        let at = idx[&src.bus];
        inj[at].0 += point.p[s] - point.p_charge[s];
        inj[at].1 += point.q[s];
    }
    for (l, br) in case.dc_branches.iter().enumerate() {
        let eta = br.loss_fraction();
        let from_flow = point.dc_fwd[l] - (1.0 - eta) * point.dc_bwd[l];
        let to_flow = point.dc_bwd[l] - (1.0 - eta) * point.dc_fwd[l];
        inj[idx[&br.from_bus]].0 -= from_flow;
        inj[idx[&br.to_bus]].0 -= to_flow;
    }
    inj
}

/// Residual of the nodal active and reactive balances at a stated point,
/// one `(p, q)` pair per bus in case order. Positive means surplus
/// injection. A point is physical when every entry vanishes.
pub fn power_mismatch(
    case: &NetworkCase,
    series: &SnapshotSeries,
    t: usize,
    u_ac: &[f64],
    point: &OperatingPoint,
) -> Vec<(f64, f64)> {
    let idx = case.bus_index();
    let mut mis = net_injections(case, series, t, point);
    for (flow, br) in ac_branch_flows(case, u_ac, &point.v, &point.theta)
        .iter()
        .zip(&case.ac_branches)
    {
        let n = idx[&br.from_bus];
        let m = idx[&br.to_bus];
        mis[n].0 -= flow.p_from;
        mis[n].1 -= flow.q_from;
        mis[m].0 -= flow.p_to;
        mis[m].1 -= flow.q_to;
    }
    mis
}

/// Largest absolute balance residual across buses and both balance kinds.
pub fn max_power_mismatch(
    case: &NetworkCase,
    series: &SnapshotSeries,
    t: usize,
    u_ac: &[f64],
    point: &OperatingPoint,
) -> f64 {
    power_mismatch(case, series, t, u_ac, point)
        .iter()
        .map(|(p, q)| p.abs().max(q.abs()))
        .fold(0.0, f64::max)
}

/// Settings for the Newton-Raphson power flow.
#[derive(Debug, Clone, Copy)]
pub struct PfOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PfOptions {
    fn default() -> Self {
        PfOptions { tol: 1e-10, max_iter: 50 }
    }
}

/// Converged voltage profile, plus what each slack bus had to absorb.
#[derive(Debug, Clone)]
pub struct PfSolution {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Largest residual over the non-slack balances at exit.
    pub max_mismatch: f64,
    /// `(bus id, extra p, extra q)` the slack of each electrical island
    /// injects on top of the stated schedule.
    pub slack: Vec<(u32, f64, f64)>,
}

/// Solve the AC power flow for the given net injections. Every bus is
/// treated as PQ except the lowest-id bus of each electrically connected
/// island (over built branches), which holds its seed voltage and angle
/// and absorbs the imbalance.
pub fn newton_power_flow(
    case: &NetworkCase,
    u_ac: &[f64],
    p_inj: &[f64],
    q_inj: &[f64],
    v0: &[f64],
    theta0: &[f64],
    opts: &PfOptions,
) -> Result<PfSolution> {
    let nb = case.buses.len();
    ensure!(
        p_inj.len() == nb && q_inj.len() == nb && v0.len() == nb && theta0.len() == nb,
        "injection and seed vectors must have one entry per bus"
    );
    let idx = case.bus_index();
    let ys = scaled_admittances(case, u_ac);

    // Electrical islands over built branches only; each gets a slack.
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); nb];
    for (y, br) in ys.iter().zip(&case.ac_branches) {
        if y.is_some() {
            let n = idx[&br.from_bus];
            let m = idx[&br.to_bus];
            adjacency[n].push(m);
            adjacency[m].push(n);
        }
    }
    let mut order: Vec<usize> = (0..nb).collect();
    order.sort_by_key(|&i| case.buses[i].id);
    let mut is_slack = vec![false; nb];
    let mut seen = vec![false; nb];
    for start in order {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        is_slack[start] = true;
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            for &j in adjacency[i].clone().iter() {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }

    // Unknown layout: (theta, v) per non-slack bus.
    let mut th_ix = vec![usize::MAX; nb];
    let mut v_ix = vec![usize::MAX; nb];
    let mut nx = 0;
    for i in 0..nb {
        if !is_slack[i] {
            th_ix[i] = nx;
            v_ix[i] = nx + 1;
            nx += 2;
        }
    }

    let mut v = v0.to_vec();
    let mut theta = theta0.to_vec();
    let mut iterations = 0;
    let mut converged = false;

    let ends: Vec<(usize, usize)> = case
        .ac_branches
        .iter()
        .map(|br| (idx[&br.from_bus], idx[&br.to_bus]))
        .collect();

    for iter in 0..=opts.max_iter {
        // Residual of the non-slack balances at the current profile.
        let mut mis_p = p_inj.to_vec();
        let mut mis_q = q_inj.to_vec();
        let mut jac = vec![vec![0.0; nx]; nx];
        for (l, y) in ys.iter().enumerate() {
            let Some(y) = y else { continue };
            let (n, m) = ends[l];
            for (at, other) in [(n, m), (m, n)] {
                let e = eval_end(y, v[at], v[other], theta[at] - theta[other]);
                mis_p[at] -= e.p;
                mis_q[at] -= e.q;
                if is_slack[at] {
                    continue;
                }
                // Columns of the mismatch Jacobian: -d(flow)/d(unknown).
                let cols = [v_ix[at], v_ix[other], th_ix[at], th_ix[other]];
                let rp = th_ix[at];
                let rq = v_ix[at];
                for (slot, &col) in cols.iter().enumerate() {
                    if col == usize::MAX {
                        continue;
                    }
                    jac[rp][col] -= e.gp[slot];
                    jac[rq][col] -= e.gq[slot];
                }
            }
        }

        let mut worst: f64 = 0.0;
        for i in 0..nb {
            if !is_slack[i] {
                worst = worst.max(mis_p[i].abs()).max(mis_q[i].abs());
            }
        }
        iterations = iter;
        if worst < opts.tol {
            converged = true;
            break;
        }
        if iter == opts.max_iter {
            break;
        }

        let mut rhs = vec![0.0; nx];
        for i in 0..nb {
            if !is_slack[i] {
                rhs[th_ix[i]] = -mis_p[i];
                rhs[v_ix[i]] = -mis_q[i];
            }
        }
        if nx > 0 && !dense_solve(&mut jac, &mut rhs) {
            bail!("power flow Jacobian is singular at iteration {iter}");
        }
        for i in 0..nb {
            if !is_slack[i] {
                theta[i] += rhs[th_ix[i]];
                v[i] += rhs[v_ix[i]];
            }
        }
        if nx == 0 {
            // Nothing to iterate on; the residual is what it is.
            break;
        }
    }

    // Whatever remains at the slack buses is their absorption.
    let mut slack = Vec::new();
    let mut worst: f64 = 0.0;
    {
        let mut mis_p = p_inj.to_vec();
        let mut mis_q = q_inj.to_vec();
        for (l, y) in ys.iter().enumerate() {
            let Some(y) = y else { continue };
            let (n, m) = ends[l];
            for (at, other) in [(n, m), (m, n)] {
                let e = eval_end(y, v[at], v[other], theta[at] - theta[other]);
                mis_p[at] -= e.p;
                mis_q[at] -= e.q;
            }
        }
        for i in 0..nb {
            if is_slack[i] {
                slack.push((case.buses[i].id, -mis_p[i], -mis_q[i]));
            } else {
                worst = worst.max(mis_p[i].abs()).max(mis_q[i].abs());
            }
        }
    }

    Ok(PfSolution { v, theta, converged, iterations, max_mismatch: worst, slack })
}

/// Gaussian elimination with partial pivoting, solving in place. Returns
/// false when the matrix is numerically singular.
fn dense_solve(a: &mut [Vec<f64>], b: &mut [f64]) -> bool {
    let n = b.len();
    for k in 0..n {
        let (pivot_row, pivot) = (k..n)
            .map(|i| (i, a[i][k].abs()))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        if pivot < 1e-13 {
            return false;
        }
        a.swap(k, pivot_row);
        b.swap(k, pivot_row);
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            if f == 0.0 {
                continue;
            }
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    for k in (0..n).rev() {
        let mut s = b[k];
        for j in k + 1..n {
            s -= a[k][j] * b[j];
        }
        b[k] = s / a[k][k];
    }
    true
}

/// A model quantity is either a decision variable or a folded constant.
#[derive(Debug, Clone, Copy)]
enum Qty {
    Var(usize),
    Const(f64),
}

impl Qty {
    fn value(self, x: &[f64]) -> f64 {
        match self {
            Qty::Var(i) => x[i],
            Qty::Const(c) => c,
        }
    }
}

/// Everything a single-snapshot nonlinear problem needs from the plan.
#[derive(Debug, Clone, Copy)]
pub struct SnapshotInputs<'a> {
    pub case: &'a NetworkCase,
    pub series: &'a SnapshotSeries,
    pub t: usize,
    /// Planned source capacities (floors when reinforcement may grow them).
    pub u_src: &'a [f64],
    pub u_ac: &'a [f64],
    pub u_dc: &'a [f64],
    /// Charging schedule per source, held fixed so the storage energy
    /// trajectory of the plan is preserved.
    pub p_charge: &'a [f64],
    /// Online level at the previous snapshot, anchoring startup tracking.
    pub beta_prev: &'a [f64],
    /// Startup decided by the plan at this snapshot: a floor when sources
    /// may grow, a pass-through for plain redispatch.
    pub beta_su: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    /// Redispatch within the installed plan.
    Redispatch,
    /// Redispatch plus capacity growth for non-storage sources.
    Reinforce,
}

/// Interior-point settings for the snapshot problems.
#[derive(Debug, Clone, Copy)]
pub struct NlpOptions {
    pub feastol: f64,
    pub gradtol: f64,
    pub comptol: f64,
    pub costtol: f64,
    pub max_iter: usize,
    /// Fraction of the way to the boundary a step may travel.
    pub xi: f64,
    /// Centering parameter for the barrier update.
    pub sigma: f64,
}

impl Default for NlpOptions {
    fn default() -> Self {
        NlpOptions {
            feastol: 1e-8,
            gradtol: 1e-6,
            comptol: 1e-6,
            costtol: 1e-6,
            max_iter: 200,
            xi: 0.99995,
            sigma: 0.1,
        }
    }
}

/// Where the interior-point iteration stopped.
#[derive(Debug, Clone, Copy)]
pub struct NlpReport {
    pub iterations: usize,
    pub feascond: f64,
    pub gradcond: f64,
    pub compcond: f64,
    pub objective: f64,
    pub converged: bool,
}

/// Outcome of a snapshot problem: the operating point and solver telemetry.
#[derive(Debug, Clone)]
pub struct SnapshotSolve {
    pub point: OperatingPoint,
    pub report: NlpReport,
}

/// Redispatch one snapshot within the installed plan, minimizing operating
/// cost under the exact power-flow equations. Fails when the snapshot is
/// infeasible at the given capacities.
pub fn solve_ac_opf(
    inp: &SnapshotInputs,
    warm: Option<&OperatingPoint>,
    opts: &NlpOptions,
) -> Result<SnapshotSolve> {
    solve_snapshot(inp, Mode::Redispatch, warm, opts)
}

/// Repair one snapshot by letting non-storage source capacities grow above
/// the plan (paying capital) and letting units start up or shut down
/// against the planned trajectory (paying the startup price both ways).
pub fn solve_ac_gep(
    inp: &SnapshotInputs,
    warm: Option<&OperatingPoint>,
    opts: &NlpOptions,
) -> Result<SnapshotSolve> {
    solve_snapshot(inp, Mode::Reinforce, warm, opts)
}

fn solve_snapshot(
    inp: &SnapshotInputs,
    mode: Mode,
    warm: Option<&OperatingPoint>,
    opts: &NlpOptions,
) -> Result<SnapshotSolve> {
    let label = match mode {
        Mode::Redispatch => "redispatch",
        Mode::Reinforce => "reinforcement",
    };
    let nlp = SnapshotNlp::assemble(inp, mode, warm)
        .with_context(|| format!("assembling {label} at snapshot {}", inp.t))?;
    let (x, report) = nlp.solve(opts);
    if !report.converged {
        bail!(
            "{label} at snapshot {} did not converge after {} iterations \
             (feasibility {:.2e}, gradient {:.2e})",
            inp.t,
            report.iterations,
            report.feascond,
            report.gradcond
        );
    }
    Ok(SnapshotSolve { point: nlp.extract(inp, &x), report })
}

/// Variable registry of one snapshot problem, with constants folded in.
struct Registry {
    v: Vec<Qty>,
    theta: Vec<Qty>,
    p: Vec<Qty>,
    q: Vec<Qty>,
    beta: Vec<Qty>,
    u_src: Vec<Qty>,
    beta_su: Vec<Qty>,
    beta_sd: Vec<Qty>,
    dc_fwd: Vec<Qty>,
    dc_bwd: Vec<Qty>,
}

/// One built branch, ready for repeated end evaluation.
struct BuiltBranch {
    y: BranchY,
    /// (v_n, v_m, theta_n, theta_m) as registry quantities.
    slots: [Qty; 4],
}

/// Linear row `terms . x (=|<=) rhs` after constant folding.
struct LinRow {
    terms: Vec<(usize, f64)>,
    rhs: f64,
}

/// Reference to one evaluated branch end inside a balance.
struct FlowTerm {
    branch: usize,
    from_end: bool,
}

/// One nodal balance: linear part plus exact branch-end flows, equal to
/// rhs. Flows always enter with coefficient -1 (they leave the bus).
struct Balance {
    bus: u32,
    reactive: bool,
    lin: Vec<(usize, f64)>,
    rhs: f64,
    flows: Vec<FlowTerm>,
}

/// Apparent-power limit `p_end^2 + q_end^2 <= cap^2` on one branch end.
struct Thermal {
    branch: usize,
    from_end: bool,
    cap2: f64,
}

struct SnapshotNlp {
    n: usize,
    lb: Vec<f64>,
    ub: Vec<f64>,
    x0: Vec<f64>,
    cost: Vec<f64>,
    cost_const: f64,
    lin_eq: Vec<LinRow>,
    lin_iq: Vec<LinRow>,
    balances: Vec<Balance>,
    thermals: Vec<Thermal>,
    branches: Vec<BuiltBranch>,
    reg: Registry,
}

impl SnapshotNlp {
    fn add_var(&mut self, lb: f64, ub: f64, seed: f64, cost: f64) -> Qty {
        debug_assert!(lb <= ub + 1e-12, "inverted box [{lb}, {ub}]");
        if ub - lb <= 1e-12 {
            self.cost_const += cost * lb;
            return Qty::Const(lb);
        }
        let i = self.n;
        self.n += 1;
        self.lb.push(lb);
        self.ub.push(ub);
        self.x0.push(seed.clamp(lb, ub));
        self.cost.push(cost);
        Qty::Var(i)
    }

    fn fold(terms: &[(Qty, f64)], mut rhs: f64) -> (Vec<(usize, f64)>, f64) {
        let mut out = Vec::with_capacity(terms.len());
        for &(qty, w) in terms {
            match qty {
                Qty::Var(i) => out.push((i, w)),
                Qty::Const(c) => rhs -= c * w,
            }
        }
        (out, rhs)
    }

    fn add_eq(&mut self, terms: &[(Qty, f64)], rhs: f64, what: &str) -> Result<()> {
        let (t, r) = Self::fold(terms, rhs);
        if t.is_empty() {
            ensure!(r.abs() <= 1e-9, "{what} pins inconsistent constants (residual {r:.3e})");
            return Ok(());
        }
        self.lin_eq.push(LinRow { terms: t, rhs: r });
        Ok(())
    }

    fn add_le(&mut self, terms: &[(Qty, f64)], rhs: f64, what: &str) -> Result<()> {
        let (t, r) = Self::fold(terms, rhs);
        if t.is_empty() {
            ensure!(r >= -1e-9, "{what} is violated by the pinned constants ({r:.3e})");
            return Ok(());
        }
        self.lin_iq.push(LinRow { terms: t, rhs: r });
        Ok(())
    }

    fn assemble(inp: &SnapshotInputs, mode: Mode, warm: Option<&OperatingPoint>) -> Result<Self> {
        let case = inp.case;
        let series = inp.series;
        let t = inp.t;
        let nb = case.buses.len();
        ensure!(t < series.len(), "snapshot {t} is out of range");
        ensure!(
            inp.u_src.len() == case.sources.len()
                && inp.u_ac.len() == case.ac_branches.len()
                && inp.u_dc.len() == case.dc_branches.len()
                && inp.p_charge.len() == case.sources.len()
                && inp.beta_prev.len() == case.sources.len()
                && inp.beta_su.len() == case.sources.len(),
            "plan vectors must match case element counts"
        );
        let idx = case.bus_index();

        let mut nlp = SnapshotNlp {
            n: 0,
            lb: Vec::new(),
            ub: Vec::new(),
            x0: Vec::new(),
            cost: Vec::new(),
            cost_const: 0.0,
            lin_eq: Vec::new(),
            lin_iq: Vec::new(),
            balances: Vec::new(),
            thermals: Vec::new(),
            branches: Vec::new(),
            reg: Registry {
                v: Vec::new(),
                theta: Vec::new(),
                p: Vec::new(),
                q: Vec::new(),
                beta: Vec::new(),
                u_src: Vec::new(),
                beta_su: Vec::new(),
                beta_sd: Vec::new(),
                dc_fwd: Vec::new(),
                dc_bwd: Vec::new(),
            },
        };

        // One pinned reference angle per synchronous island.
        let mut is_ref = vec![false; nb];
        for island in graph::ac_islands(case) {
            is_ref[island[0]] = true;
        }
        for i in 0..nb {
            let vw = warm.map_or(1.0, |w| w.v[i]);
            let tw = warm.map_or(0.0, |w| w.theta[i]);
            let vq = nlp.add_var(V_MIN, V_MAX, vw, 0.0);
            nlp.reg.v.push(vq);
            if is_ref[i] {
                nlp.reg.theta.push(Qty::Const(0.0));
            } else {
                let tq = nlp.add_var(
                    -std::f64::consts::FRAC_PI_2,
                    std::f64::consts::FRAC_PI_2,
                    tw,
                    0.0,
                );
                nlp.reg.theta.push(tq);
            }
        }

        let delta = series.delta[t];
        for (s, src) in case.sources.iter().enumerate() {
            let u_star = inp.u_src[s];
            let grows = mode == Mode::Reinforce && src.storage.is_none();
            let u_cap = if grows { src.u_max.max(u_star) } else { u_star };
            let avail = series.availability(src.id, t);

            let p_lo = (src.p_min * u_cap).min(0.0);
            let p_hi = (avail * src.p_max * u_cap).max(0.0);
            let pw = warm.map_or(0.5 * (p_lo + p_hi), |w| w.p[s]);
            let pq = nlp.add_var(p_lo, p_hi, pw, src.o * delta);
            nlp.reg.p.push(pq);

            // Converter-station compensators draw their reactive range
            // from the link capacity instead of their own (zero) rating.
            let (q_lo_unit, q_hi_unit) = match src.vsc_of {
                Some(link) => {
                    let dc = case
                        .dc_branches
                        .iter()
                        .position(|d| d.id == link)
                        .with_context(|| format!("source {} names a missing link", src.id))?;
                    let cap = case.dc_branches[dc].p_max * inp.u_dc[dc];
                    (-cap, cap)
                }
                None => {
                    let (lo, hi) = src.q_bounds();
                    (lo * u_cap, hi * u_cap)
                }
            };
            let qw = warm.map_or(0.0, |w| w.q[s]);
            let qq = nlp.add_var(q_lo_unit.min(0.0), q_hi_unit.max(0.0), qw, 0.0);
            nlp.reg.q.push(qq);

            let beta_cap = if grows { src.u_max.max(u_star) } else { u_star };
            let bw = warm.map_or(beta_cap, |w| w.beta[s]);
            let bq = nlp.add_var(0.0, beta_cap, bw, 0.0);
            nlp.reg.beta.push(bq);

            if grows {
                let uq = nlp.add_var(u_star, src.u_max.max(u_star), u_star, src.c);
                nlp.reg.u_src.push(uq);
            } else {
                nlp.cost_const += if mode == Mode::Reinforce { src.c * u_star } else { 0.0 };
                nlp.reg.u_src.push(Qty::Const(u_star));
            }
            if mode == Mode::Reinforce {
                let floor = if src.storage.is_none() { inp.beta_su[s] } else { 0.0 };
                let su_hi = floor + src.u_max.max(u_star) + 1.0;
                let suq = nlp.add_var(floor, su_hi, floor, src.o_su);
                nlp.reg.beta_su.push(suq);
                let sdq = nlp.add_var(0.0, su_hi + src.u_max.max(u_star), 0.0, src.o_su);
                nlp.reg.beta_sd.push(sdq);
            } else {
                nlp.reg.beta_su.push(Qty::Const(inp.beta_su[s]));
                nlp.reg.beta_sd.push(Qty::Const(0.0));
            }
        }

        for (l, dc) in case.dc_branches.iter().enumerate() {
            let cap = dc.p_max * inp.u_dc[l];
            let fw = warm.map_or(0.0, |w| w.dc_fwd[l]);
            let bw = warm.map_or(0.0, |w| w.dc_bwd[l]);
            let fq = nlp.add_var(0.0, cap.max(0.0), fw, 0.0);
            let bq = nlp.add_var(0.0, cap.max(0.0), bw, 0.0);
            nlp.reg.dc_fwd.push(fq);
            nlp.reg.dc_bwd.push(bq);
        }

        // Source-level rows.
        for (s, src) in case.sources.iter().enumerate() {
            let sid = src.id;
            let avail = series.availability(sid, t);
            let p = nlp.reg.p[s];
            let q = nlp.reg.q[s];
            let beta = nlp.reg.beta[s];
            let u = nlp.reg.u_src[s];

            nlp.add_le(
                &[(beta, src.p_min), (p, -1.0)],
                0.0,
                &format!("minimum output of source {sid}"),
            )?;
            nlp.add_le(
                &[(p, 1.0), (beta, -avail * src.p_max)],
                0.0,
                &format!("available output of source {sid}"),
            )?;
            if src.vsc_of.is_none() {
                let (q_lo, q_hi) = src.q_bounds();
                nlp.add_le(
                    &[(beta, q_lo), (q, -1.0)],
                    0.0,
                    &format!("reactive floor of source {sid}"),
                )?;
                nlp.add_le(
                    &[(q, 1.0), (beta, -q_hi)],
                    0.0,
                    &format!("reactive ceiling of source {sid}"),
                )?;
            }
            for (tau, upsilon) in src.capability.upper_lines() {
                nlp.add_le(
                    &[(p, 1.0), (q, -tau), (beta, -upsilon * src.p_max)],
                    0.0,
                    &format!("capability cut of source {sid}"),
                )?;
            }
            for (tau, upsilon) in src.capability.lower_lines() {
                nlp.add_le(
                    &[(p, -1.0), (q, tau), (beta, upsilon * src.p_max)],
                    0.0,
                    &format!("capability cut of source {sid}"),
                )?;
            }
            if src.storage.is_some() {
                let p_chg = inp.p_charge[s];
                nlp.add_le(
                    &[(beta, -src.p_max)],
                    -p_chg,
                    &format!("charging room of storage {sid}"),
                )?;
                nlp.add_le(
                    &[(p, 1.0), (beta, -src.p_max)],
                    -p_chg,
                    &format!("rating split of storage {sid}"),
                )?;
            }
            // Online level within installed capacity; startup tracking
            // against the plan's previous snapshot.
            nlp.add_le(&[(beta, 1.0), (u, -1.0)], 0.0, &format!("online limit of source {sid}"))?;
            if mode == Mode::Reinforce {
                nlp.add_eq(
                    &[(beta, 1.0), (nlp.reg.beta_su[s], -1.0), (nlp.reg.beta_sd[s], 1.0)],
                    inp.beta_prev[s],
                    &format!("startup tracking of source {sid}"),
                )?;
            }
        }

        // Built AC branches: exact flows, per-end thermal limits, and the
        // angle-difference corridor.
        let ys = scaled_admittances(case, inp.u_ac);
        for (l, br) in case.ac_branches.iter().enumerate() {
            let Some(y) = ys[l] else { continue };
            let n = idx[&br.from_bus];
            let m = idx[&br.to_bus];
            let built = nlp.branches.len();
            nlp.branches.push(BuiltBranch {
                y,
                slots: [nlp.reg.v[n], nlp.reg.v[m], nlp.reg.theta[n], nlp.reg.theta[m]],
            });
            let cap2 = (br.a * br.f_max * inp.u_ac[l]).powi(2);
            nlp.thermals.push(Thermal { branch: built, from_end: true, cap2 });
            nlp.thermals.push(Thermal { branch: built, from_end: false, cap2 });
            let tn = nlp.reg.theta[n];
            let tm = nlp.reg.theta[m];
            nlp.add_le(
                &[(tn, 1.0), (tm, -1.0)],
                br.theta_max,
                &format!("angle corridor of branch {}", br.id),
            )?;
            nlp.add_le(
                &[(tn, -1.0), (tm, 1.0)],
                br.theta_max,
                &format!("angle corridor of branch {}", br.id),
            )?;
        }

        // Nodal balances: linear injections plus exact branch flows.
        let mut bal_p: Vec<Balance> = case
            .buses
            .iter()
            .map(|bus| Balance {
                bus: bus.id,
                reactive: false,
                lin: Vec::new(),
                rhs: series.load_p(bus.id, t),
                flows: Vec::new(),
            })
            .collect();
        let mut bal_q: Vec<Balance> = case
            .buses
            .iter()
            .map(|bus| Balance {
                bus: bus.id,
                reactive: true,
                lin: Vec::new(),
                rhs: series.load_q(bus.id, t),
                flows: Vec::new(),
            })
            .collect();

        let push_term = |bal: &mut Balance, qty: Qty, w: f64| match qty {
            Qty::Var(i) => bal.lin.push((i, w)),
            Qty::Const(c) => bal.rhs -= c * w,
        };
        for (s, src) in case.sources.iter().enumerate() {
            let at = idx[&src.bus];
            push_term(&mut bal_p[at], nlp.reg.p[s], 1.0);
            push_term(&mut bal_p[at], Qty::Const(inp.p_charge[s]), -1.0);
            push_term(&mut bal_q[at], nlp.reg.q[s], 1.0);
        }
        for (l, dc) in case.dc_branches.iter().enumerate() {
            let eta = dc.loss_fraction();
            let fwd = nlp.reg.dc_fwd[l];
            let bwd = nlp.reg.dc_bwd[l];
            push_term(&mut bal_p[idx[&dc.from_bus]], fwd, -1.0);
            push_term(&mut bal_p[idx[&dc.from_bus]], bwd, 1.0 - eta);
            push_term(&mut bal_p[idx[&dc.to_bus]], bwd, -1.0);
            push_term(&mut bal_p[idx[&dc.to_bus]], fwd, 1.0 - eta);
        }
        for (built, l) in (0..case.ac_branches.len()).filter(|&l| ys[l].is_some()).enumerate() {
            let br = &case.ac_branches[l];
            bal_p[idx[&br.from_bus]].flows.push(FlowTerm { branch: built, from_end: true });
            bal_p[idx[&br.to_bus]].flows.push(FlowTerm { branch: built, from_end: false });
            bal_q[idx[&br.from_bus]].flows.push(FlowTerm { branch: built, from_end: true });
            bal_q[idx[&br.to_bus]].flows.push(FlowTerm { branch: built, from_end: false });
        }
        for bal in bal_p.into_iter().chain(bal_q) {
            if bal.lin.is_empty() && bal.flows.is_empty() {
                ensure!(
                    bal.rhs.abs() <= 1e-9,
                    "bus {} carries demand but nothing is attached to it",
                    bal.bus
                );
                continue;
            }
            nlp.balances.push(bal);
        }

        Ok(nlp)
    }

    /// Evaluate both ends of every built branch at the current iterate.
    fn eval_branches(&self, x: &[f64]) -> Vec<(EndEval, EndEval)> {
        self.branches
            .iter()
            .map(|br| {
                let vn = br.slots[SLOT_VA].value(x);
                let vm = br.slots[SLOT_VB].value(x);
                let tn = br.slots[SLOT_TA].value(x);
                let tm = br.slots[SLOT_TB].value(x);
                (eval_end(&br.y, vn, vm, tn - tm), eval_end(&br.y, vm, vn, tm - tn))
            })
            .collect()
    }

    /// Gradient slots of one end: the from end sees (v_n, v_m, t_n, t_m),
    /// the to end the same registry slots with ends swapped.
    fn end_slots(br: &BuiltBranch, from_end: bool) -> [Qty; 4] {
        if from_end {
            br.slots
        } else {
            [br.slots[SLOT_VB], br.slots[SLOT_VA], br.slots[SLOT_TB], br.slots[SLOT_TA]]
        }
    }

    fn solve(&self, opts: &NlpOptions) -> (Vec<f64>, NlpReport) {
        let n = self.n;
        let neq = self.lin_eq.len() + self.balances.len();

        // Inequalities in fixed order: linear rows, thermal ends, then the
        // finite variable bounds.
        enum Iq {
            Lin(usize),
            Thermal(usize),
            Upper(usize),
            Lower(usize),
        }
        let mut iqs: Vec<Iq> = Vec::new();
        for j in 0..self.lin_iq.len() {
            iqs.push(Iq::Lin(j));
        }
        for j in 0..self.thermals.len() {
            iqs.push(Iq::Thermal(j));
        }
        for i in 0..n {
            if self.ub[i].is_finite() {
                iqs.push(Iq::Upper(i));
            }
            if self.lb[i].is_finite() {
                iqs.push(Iq::Lower(i));
            }
        }
        let niq = iqs.len();

        let mut x = self.x0.clone();
        let mut lam = vec![0.0; neq];
        let mut z = vec![0.0; niq];
        let mut mu = vec![0.0; niq];
        let mut gamma = 1.0;
        let mut f_prev = f64::INFINITY;

        let mut report = NlpReport {
            iterations: 0,
            feascond: f64::INFINITY,
            gradcond: f64::INFINITY,
            compcond: f64::INFINITY,
            objective: f64::NAN,
            converged: false,
        };

        let mut h = vec![0.0; niq];
        let mut jh: Vec<Vec<(usize, f64)>> = vec![Vec::new(); niq];
        let mut g = vec![0.0; neq];
        let mut jg: Vec<Vec<(usize, f64)>> = vec![Vec::new(); neq];

        for iter in 0..=opts.max_iter {
            let ends = self.eval_branches(&x);

            // Equalities: linear rows first, then the nodal balances.
            for (k, row) in self.lin_eq.iter().enumerate() {
                g[k] = row.terms.iter().map(|&(i, w)| w * x[i]).sum::<f64>() - row.rhs;
                if iter == 0 {
                    jg[k] = row.terms.clone();
                }
            }
            for (b, bal) in self.balances.iter().enumerate() {
                let k = self.lin_eq.len() + b;
                let mut val = -bal.rhs;
                let row = &mut jg[k];
                row.clear();
                for &(i, w) in &bal.lin {
                    val += w * x[i];
                    row.push((i, w));
                }
                for ft in &bal.flows {
                    let e = if ft.from_end { &ends[ft.branch].0 } else { &ends[ft.branch].1 };
                    let slots = Self::end_slots(&self.branches[ft.branch], ft.from_end);
                    let (flow, grad) =
                        if bal.reactive { (e.q, &e.gq) } else { (e.p, &e.gp) };
                    val -= flow;
                    for (slot, qty) in slots.iter().enumerate() {
                        if let Qty::Var(i) = qty {
                            row.push((*i, -grad[slot]));
                        }
                    }
                }
                g[k] = val;
            }

            for (j, iq) in iqs.iter().enumerate() {
                match iq {
                    Iq::Lin(r) => {
                        let row = &self.lin_iq[*r];
                        h[j] = row.terms.iter().map(|&(i, w)| w * x[i]).sum::<f64>() - row.rhs;
                        if iter == 0 {
                            jh[j] = row.terms.clone();
                        }
                    }
                    Iq::Thermal(r) => {
                        let th = &self.thermals[*r];
                        let e = if th.from_end { &ends[th.branch].0 } else { &ends[th.branch].1 };
                        let slots = Self::end_slots(&self.branches[th.branch], th.from_end);
                        h[j] = e.p * e.p + e.q * e.q - th.cap2;
                        let row = &mut jh[j];
                        row.clear();
                        for (slot, qty) in slots.iter().enumerate() {
                            if let Qty::Var(i) = qty {
                                row.push((*i, 2.0 * (e.p * e.gp[slot] + e.q * e.gq[slot])));
                            }
                        }
                    }
                    Iq::Upper(i) => {
                        h[j] = x[*i] - self.ub[*i];
                        if iter == 0 {
                            jh[j] = vec![(*i, 1.0)];
                        }
                    }
                    Iq::Lower(i) => {
                        h[j] = self.lb[*i] - x[*i];
                        if iter == 0 {
                            jh[j] = vec![(*i, -1.0)];
                        }
                    }
                }
            }

            if iter == 0 {
                // Slack and multiplier seeds, pushed inside where needed.
                for j in 0..niq {
                    z[j] = if h[j] < -1.0 { -h[j] } else { 1.0 };
                    mu[j] = if h[j] < -1.0 { gamma / z[j] } else { 1.0 };
                }
            }

            let f = self.cost.iter().zip(&x).map(|(c, xi)| c * xi).sum::<f64>() + self.cost_const;

            // Lagrangian gradient.
            let mut lx = self.cost.clone();
            for (k, row) in jg.iter().enumerate() {
                for &(i, w) in row {
                    lx[i] += lam[k] * w;
                }
            }
            for (j, row) in jh.iter().enumerate() {
                for &(i, w) in row {
                    lx[i] += mu[j] * w;
                }
            }

            let norm_inf = |v: &[f64]| v.iter().fold(0.0f64, |acc, t| acc.max(t.abs()));
            let maxh = h.iter().fold(0.0f64, |acc, &t| acc.max(t));
            let feascond =
                norm_inf(&g).max(maxh) / (1.0 + norm_inf(&x).max(norm_inf(&z)));
            let gradcond = norm_inf(&lx) / (1.0 + norm_inf(&lam).max(norm_inf(&mu)));
            let ztmu = z.iter().zip(&mu).map(|(a, b)| a * b).sum::<f64>();
            let compcond = ztmu / (1.0 + norm_inf(&x));
            let costcond = (f - f_prev).abs() / (1.0 + f_prev.abs());
            f_prev = f;

            report = NlpReport {
                iterations: iter,
                feascond,
                gradcond,
                compcond,
                objective: f,
                converged: feascond < opts.feastol
                    && gradcond < opts.gradtol
                    && compcond < opts.comptol
                    && costcond < opts.costtol,
            };
            trace!(
                "nlp iter {iter}: f {f:.6e} feas {feascond:.2e} grad {gradcond:.2e} \
                 comp {compcond:.2e}"
            );
            if report.converged || iter == opts.max_iter {
                break;
            }

            // Hessian of the Lagrangian plus the barrier term, upper triangle.
            let mut m_acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
            let mut put = |a: usize, b: usize, w: f64| {
                if w != 0.0 {
                    let key = if a <= b { (a, b) } else { (b, a) };
                    *m_acc.entry(key).or_insert(0.0) += w;
                }
            };
            for (b, bal) in self.balances.iter().enumerate() {
                let w = lam[self.lin_eq.len() + b];
                if w == 0.0 {
                    continue;
                }
                for ft in &bal.flows {
                    let e = if ft.from_end { &ends[ft.branch].0 } else { &ends[ft.branch].1 };
                    let slots = Self::end_slots(&self.branches[ft.branch], ft.from_end);
                    let hess = if bal.reactive { &e.hq } else { &e.hp };
                    for (pair, &(la, lb)) in UPPER_PAIRS.iter().enumerate() {
                        if let (Qty::Var(ia), Qty::Var(ib)) = (slots[la], slots[lb]) {
                            put(ia, ib, -w * hess[pair]);
                        }
                    }
                }
            }
            for (j, iq) in iqs.iter().enumerate() {
                if let Iq::Thermal(r) = iq {
                    let w = mu[j];
                    if w == 0.0 {
                        continue;
                    }
                    let th = &self.thermals[*r];
                    let e = if th.from_end { &ends[th.branch].0 } else { &ends[th.branch].1 };
                    let slots = Self::end_slots(&self.branches[th.branch], th.from_end);
                    for (pair, &(la, lb)) in UPPER_PAIRS.iter().enumerate() {
                        if let (Qty::Var(ia), Qty::Var(ib)) = (slots[la], slots[lb]) {
                            let curve = e.p * e.hp[pair] + e.q * e.hq[pair];
                            put(ia, ib, 2.0 * w * curve);
                        }
                    }
                    // Gauss-Newton part 2 (grad p grad p^T + grad q grad q^T).
                    for la in 0..4 {
                        for lb in la..4 {
                            if let (Qty::Var(ia), Qty::Var(ib)) = (slots[la], slots[lb]) {
                                let outer =
                                    e.gp[la] * e.gp[lb] + e.gq[la] * e.gq[lb];
                                put(ia, ib, 2.0 * w * outer);
                            }
                        }
                    }
                }
            }
            // Barrier contribution of every inequality row.
            for (j, row) in jh.iter().enumerate() {
                let w = mu[j] / z[j];
                for a in 0..row.len() {
                    for b in a..row.len() {
                        let (ia, wa) = row[a];
                        let (ib, wb) = row[b];
                        put(ia, ib, w * wa * wb);
                    }
                }
            }

            // Reduced residual N = Lx + Jh' (gamma + mu h)/z; note Lx already
            // carries Jh' mu.
            let mut nvec = lx.clone();
            for (j, row) in jh.iter().enumerate() {
                let w = (gamma + mu[j] * h[j]) / z[j];
                for &(i, coeff) in row {
                    nvec[i] += w * coeff;
                }
            }

            let mut rhs = vec![0.0; n + neq];
            for i in 0..n {
                rhs[i] = -nvec[i];
            }
            for k in 0..neq {
                rhs[n + k] = -g[k];
            }

            let Some(step) = solve_kkt(n, neq, &m_acc, &jg, &rhs) else {
                debug!("nlp iter {iter}: KKT system could not be factorized");
                break;
            };

            let dx = &step[..n];
            let dlam = &step[n..];
            let mut dz = vec![0.0; niq];
            let mut dmu = vec![0.0; niq];
            for (j, row) in jh.iter().enumerate() {
                let jh_dx: f64 = row.iter().map(|&(i, w)| w * dx[i]).sum();
                dz[j] = -h[j] - z[j] - jh_dx;
                dmu[j] = -mu[j] + (gamma - mu[j] * dz[j]) / z[j];
            }

            let mut alpha_p: f64 = 1.0;
            let mut alpha_d: f64 = 1.0;
            for j in 0..niq {
                if dz[j] < 0.0 {
                    alpha_p = alpha_p.min(opts.xi * (-z[j] / dz[j]));
                }
                if dmu[j] < 0.0 {
                    alpha_d = alpha_d.min(opts.xi * (-mu[j] / dmu[j]));
                }
            }

            for i in 0..n {
                x[i] += alpha_p * dx[i];
            }
            for j in 0..niq {
                z[j] += alpha_p * dz[j];
                mu[j] += alpha_d * dmu[j];
            }
            for k in 0..neq {
                lam[k] += alpha_d * dlam[k];
            }
            gamma = opts.sigma * z.iter().zip(&mu).map(|(a, b)| a * b).sum::<f64>()
                / niq.max(1) as f64;
        }

        (x, report)
    }

    fn extract(&self, inp: &SnapshotInputs, x: &[f64]) -> OperatingPoint {
        let val = |q: &Qty| q.value(x);
        OperatingPoint {
            v: self.reg.v.iter().map(val).collect(),
            theta: self.reg.theta.iter().map(val).collect(),
            p: self.reg.p.iter().map(val).collect(),
            q: self.reg.q.iter().map(val).collect(),
            beta: self.reg.beta.iter().map(val).collect(),
            beta_su: self.reg.beta_su.iter().map(val).collect(),
            beta_sd: self.reg.beta_sd.iter().map(val).collect(),
            p_charge: inp.p_charge.to_vec(),
            dc_fwd: self.reg.dc_fwd.iter().map(val).collect(),
            dc_bwd: self.reg.dc_bwd.iter().map(val).collect(),
            u_src: self.reg.u_src.iter().map(val).collect(),
        }
    }
}

/// Solve the symmetric KKT system
///
/// ```text
/// [ M   Jg' ] [dx  ]   [ rhs_x ]
/// [ Jg  0   ] [dlam] = [ rhs_g ]
/// ```
///
/// with inertia correction: the factorization must show `n` positive and
/// `neq` negative pivots, otherwise the primal block gets a ridge and the
/// dual block a small negative shift.
fn solve_kkt(
    n: usize,
    neq: usize,
    m_upper: &BTreeMap<(usize, usize), f64>,
    jg: &[Vec<(usize, f64)>],
    rhs: &[f64],
) -> Option<Vec<f64>> {
    let dim = n + neq;
    let mut tau = 0.0;
    let mut delta = 0.0;
    for _attempt in 0..30 {
        let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(m_upper.len() + dim);
        for (&(a, b), &w) in m_upper {
            triplets.push((a, b, w));
        }
        for (k, row) in jg.iter().enumerate() {
            for &(i, w) in row {
                triplets.push((i, n + k, w));
            }
        }
        for i in 0..n {
            triplets.push((i, i, tau));
        }
        for k in 0..neq {
            triplets.push((n + k, n + k, -delta));
        }
        let kkt = CscMat::from_triplets(dim, dim, triplets.into_iter());
        let Ok(mut solver) = LdlSolver::new(&kkt) else {
            return None;
        };
        match solver.factor(&kkt.values) {
            Ok(()) => {
                let (pos, neg) = solver.inertia();
                if pos == n && neg == neq {
                    let mut sol = rhs.to_vec();
                    solver.solve(&mut sol);
                    return Some(sol);
                }
                if pos < n {
                    tau = if tau == 0.0 { 1e-8 } else { tau * 100.0 };
                } else {
                    delta = if delta == 0.0 { 1e-8 } else { delta * 10.0 };
                }
            }
            Err(_) => {
                tau = if tau == 0.0 { 1e-8 } else { tau * 10.0 };
                delta = if delta == 0.0 { 1e-8 } else { delta * 10.0 };
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{
        AcBranch, Bus, CapabilityCurve, NetworkCase, PowerSource, SnapshotSeries, SourceKind,
    };
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::collections::BTreeMap as Map;

    fn bus(id: u32) -> Bus {
        Bus { id, voltage_class: None }
    }

    fn branch(id: u32, from: u32, to: u32, r: f64, x: f64, b_sh: f64, f_max: f64) -> AcBranch {
        AcBranch {
            id,
            from_bus: from,
            to_bus: to,
            r,
            x,
            b_sh,
            f_max,
            a: 1.0,
            theta_max: std::f64::consts::FRAC_PI_2,
            u_min: 1.0,
            u_max: 1.0,
            c: 1.0,
            length_km: None,
        }
    }

    fn source(id: u32, at: u32, p_max: f64, o: f64, u: f64) -> PowerSource {
        PowerSource {
            id,
            bus: at,
            kind: SourceKind::Sg,
            p_min: 0.0,
            p_max,
            q_min: Some(-0.8),
            q_max: Some(0.8),
            capability: CapabilityCurve::Rectangle,
            u_min: u,
            u_max: u,
            c: 5.0,
            o,
            o_su: 0.0,
            storage: None,
            vsc_of: None,
        }
    }

    fn flat_point(case: &NetworkCase) -> OperatingPoint {
        OperatingPoint {
            v: vec![1.0; case.buses.len()],
            theta: vec![0.0; case.buses.len()],
            p: vec![0.0; case.sources.len()],
            q: vec![0.0; case.sources.len()],
            beta: vec![0.0; case.sources.len()],
            beta_su: vec![0.0; case.sources.len()],
            beta_sd: vec![0.0; case.sources.len()],
            p_charge: vec![0.0; case.sources.len()],
            dc_fwd: vec![0.0; case.dc_branches.len()],
            dc_bwd: vec![0.0; case.dc_branches.len()],
            u_src: case.sources.iter().map(|s| s.u_min).collect(),
        }
    }

    fn triangle_case() -> NetworkCase {
        NetworkCase {
            name: "triangle".into(),
            mva_base: 100.0,
            buses: vec![bus(1), bus(2), bus(3)],
            ac_branches: vec![
                branch(1, 1, 2, 0.02, 0.10, 0.02, 2.0),
                branch(2, 2, 3, 0.015, 0.08, 0.02, 2.0),
                branch(3, 1, 3, 0.01, 0.06, 0.02, 2.0),
            ],
            dc_branches: Vec::new(),
            sources: Vec::new(),
        }
    }

    proptest! {
        /// Analytic end gradients agree with central finite differences.
        #[test]
        fn branch_end_derivatives_match_finite_differences(
            r in 0.0f64..0.1,
            x in 0.02f64..0.5,
            b_sh in 0.0f64..0.1,
            va in 0.9f64..1.1,
            vb in 0.9f64..1.1,
            ta in -0.6f64..0.6,
            tb in -0.6f64..0.6,
        ) {
            let denom = r * r + x * x;
            let y = BranchY { g: r / denom, b: -x / denom, b_sh };
            let at = |s: [f64; 4]| eval_end(&y, s[0], s[1], s[2] - s[3]);
            let base = [va, vb, ta, tb];
            let e = at(base);
            let h = 1e-6;
            for slot in 0..4 {
                let mut up = base;
                let mut dn = base;
                up[slot] += h;
                dn[slot] -= h;
                let (eu, ed) = (at(up), at(dn));
                let fd_p = (eu.p - ed.p) / (2.0 * h);
                let fd_q = (eu.q - ed.q) / (2.0 * h);
                prop_assert!((fd_p - e.gp[slot]).abs() <= 1e-5 * (1.0 + e.gp[slot].abs()));
                prop_assert!((fd_q - e.gq[slot]).abs() <= 1e-5 * (1.0 + e.gq[slot].abs()));
                // Second derivatives: difference the analytic gradient.
                for (pair, &(a, b)) in UPPER_PAIRS.iter().enumerate() {
                    if a != slot && b != slot {
                        continue;
                    }
                    let other = if a == slot { b } else { a };
                    let fd_hp = (eu.gp[other] - ed.gp[other]) / (2.0 * h);
                    let fd_hq = (eu.gq[other] - ed.gq[other]) / (2.0 * h);
                    prop_assert!((fd_hp - e.hp[pair]).abs() <= 1e-5 * (1.0 + e.hp[pair].abs()));
                    prop_assert!((fd_hq - e.hq[pair]).abs() <= 1e-5 * (1.0 + e.hq[pair].abs()));
                }
            }
        }

        /// Series losses are nonnegative whenever the branch is resistive.
        #[test]
        fn losses_are_nonnegative_for_resistive_branches(
            r in 1e-4f64..0.1,
            x in 0.02f64..0.5,
            va in 0.9f64..1.1,
            vb in 0.9f64..1.1,
            th in -1.0f64..1.0,
        ) {
            let denom = r * r + x * x;
            let y = BranchY { g: r / denom, b: -x / denom, b_sh: 0.0 };
            let from = eval_end(&y, va, vb, th);
            let to = eval_end(&y, vb, va, -th);
            prop_assert!(from.p + to.p >= -1e-12);
        }
    }

    #[test]
    fn newton_recovers_a_constructed_operating_point() {
        let case = triangle_case();
        let u = vec![1.0; 3];
        let v_target = vec![1.0, 1.03, 0.97];
        let th_target = vec![0.0, -0.05, 0.08];
        let flows = ac_branch_flows(&case, &u, &v_target, &th_target);
        let idx = case.bus_index();
        let mut p_inj = vec![0.0; 3];
        let mut q_inj = vec![0.0; 3];
        for (flow, br) in flows.iter().zip(&case.ac_branches) {
            p_inj[idx[&br.from_bus]] += flow.p_from;
            q_inj[idx[&br.from_bus]] += flow.q_from;
            p_inj[idx[&br.to_bus]] += flow.p_to;
            q_inj[idx[&br.to_bus]] += flow.q_to;
        }

        let sol = newton_power_flow(
            &case,
            &u,
            &p_inj,
            &q_inj,
            &[1.0, 1.0, 1.0],
            &[0.0, 0.0, 0.0],
            &PfOptions::default(),
        )
        .unwrap();
        assert!(sol.converged, "flat start should converge");
        for i in 0..3 {
            assert_relative_eq!(sol.v[i], v_target[i], epsilon = 1e-7);
            assert_relative_eq!(sol.theta[i], th_target[i], epsilon = 1e-7);
        }
        // The injections were exactly consistent, so the slack adds nothing.
        let (_, sp, sq) = sol.slack[0];
        assert!(sp.abs() < 1e-8 && sq.abs() < 1e-8);
    }

    #[test]
    fn mismatch_vanishes_on_a_balanced_point() {
        let mut case = triangle_case();
        // One source per bus, sized to absorb whatever the profile demands.
        for id in 1..=3u32 {
            case.sources.push(source(id, id, 2.0, 1.0, 1.0));
        }
        let series = SnapshotSeries {
            delta: vec![1.0],
            d_p: Map::new(),
            d_q: Map::new(),
            availability: Map::new(),
            inflow_max: Map::new(),
        };
        let u = vec![1.0; 3];
        let mut point = flat_point(&case);
        point.v = vec![1.02, 0.98, 1.0];
        point.theta = vec![0.0, 0.04, -0.03];
        let flows = ac_branch_flows(&case, &u, &point.v, &point.theta);
        let idx = case.bus_index();
        for (flow, br) in flows.iter().zip(&case.ac_branches) {
            point.p[idx[&br.from_bus]] += flow.p_from;
            point.q[idx[&br.from_bus]] += flow.q_from;
            point.p[idx[&br.to_bus]] += flow.p_to;
            point.q[idx[&br.to_bus]] += flow.q_to;
        }
        assert!(max_power_mismatch(&case, &series, 0, &u, &point) < 1e-12);

        // Perturb one injection and the residual shows up at that bus.
        point.p[1] += 0.05;
        let mis = power_mismatch(&case, &series, 0, &u, &point);
        assert_relative_eq!(mis[1].0, 0.05, epsilon = 1e-12);
        assert!(mis[0].0.abs() < 1e-12 && mis[2].0.abs() < 1e-12);
    }

    /// Two buses, one line, load at the far end: the workhorse fixture.
    fn corridor_case(load_p: f64, load_q: f64) -> (NetworkCase, SnapshotSeries) {
        let case = NetworkCase {
            name: "corridor".into(),
            mva_base: 100.0,
            buses: vec![bus(1), bus(2)],
            ac_branches: vec![branch(1, 1, 2, 0.05, 0.10, 0.04, 2.0)],
            dc_branches: Vec::new(),
            sources: vec![source(1, 1, 1.0, 1.0, 2.0)],
            };
        let series = SnapshotSeries {
            delta: vec![1.0],
            d_p: Map::from([(2, vec![load_p])]),
            d_q: Map::from([(2, vec![load_q])]),
            availability: Map::new(),
            inflow_max: Map::new(),
        };
        (case, series)
    }

    fn inputs<'a>(
        case: &'a NetworkCase,
        series: &'a SnapshotSeries,
        plan: &'a PlanSlices,
    ) -> SnapshotInputs<'a> {
        SnapshotInputs {
            case,
            series,
            t: 0,
            u_src: &plan.u_src,
            u_ac: &plan.u_ac,
            u_dc: &plan.u_dc,
            p_charge: &plan.p_charge,
            beta_prev: &plan.beta_prev,
            beta_su: &plan.beta_su,
        }
    }

    struct PlanSlices {
        u_src: Vec<f64>,
        u_ac: Vec<f64>,
        u_dc: Vec<f64>,
        p_charge: Vec<f64>,
        beta_prev: Vec<f64>,
        beta_su: Vec<f64>,
    }

    impl PlanSlices {
        fn for_case(case: &NetworkCase) -> Self {
            PlanSlices {
                u_src: case.sources.iter().map(|s| s.u_min).collect(),
                u_ac: case.ac_branches.iter().map(|b| b.u_min).collect(),
                u_dc: case.dc_branches.iter().map(|b| b.u_min).collect(),
                p_charge: vec![0.0; case.sources.len()],
                beta_prev: vec![0.0; case.sources.len()],
                beta_su: vec![0.0; case.sources.len()],
            }
        }
    }

    #[test]
    fn opf_redispatches_to_cover_losses() {
        let (case, series) = corridor_case(1.5, 0.3);
        let plan = PlanSlices::for_case(&case);
        let sol = solve_ac_opf(&inputs(&case, &series, &plan), None, &NlpOptions::default())
            .expect("corridor snapshot is feasible");
        let point = &sol.point;

        // The generator covers the load plus real series losses.
        let flows = ac_branch_flows(&case, &plan.u_ac, &point.v, &point.theta);
        assert!(flows[0].p_loss > 1e-3, "resistive corridor must lose power");
        assert_relative_eq!(point.p[0], 1.5 + flows[0].p_loss, epsilon = 1e-6);
        assert!(max_power_mismatch(&case, &series, 0, &plan.u_ac, point) < 1e-6);

        // An independent power flow from the stated injections lands on the
        // same voltage profile.
        let pf = newton_power_flow(
            &case,
            &plan.u_ac,
            &[point.p[0], -1.5],
            &[point.q[0], -0.3],
            &point.v,
            &point.theta,
            &PfOptions::default(),
        )
        .unwrap();
        assert!(pf.converged);
        for i in 0..2 {
            assert_relative_eq!(pf.v[i], point.v[i], epsilon = 1e-5);
            assert_relative_eq!(pf.theta[i], point.theta[i], epsilon = 1e-5);
        }
    }

    #[test]
    fn thermal_limit_binds_the_dispatch() {
        let (mut case, series) = corridor_case(0.8, 0.1);
        case.ac_branches[0].f_max = 0.5;
        case.ac_branches[0].u_min = 1.0;
        case.ac_branches[0].u_max = 1.0;
        // A second, expensive unit at the load bus covers what the line
        // cannot carry.
        case.sources.push(source(2, 2, 1.0, 50.0, 1.0));
        let plan = PlanSlices::for_case(&case);

        let sol = solve_ac_opf(&inputs(&case, &series, &plan), None, &NlpOptions::default())
            .expect("local unit keeps the snapshot feasible");
        let point = &sol.point;
        let flows = ac_branch_flows(&case, &plan.u_ac, &point.v, &point.theta);
        let s_from = (flows[0].p_from.powi(2) + flows[0].q_from.powi(2)).sqrt();
        let s_to = (flows[0].p_to.powi(2) + flows[0].q_to.powi(2)).sqrt();
        assert!(s_from <= 0.5 + 1e-5 && s_to <= 0.5 + 1e-5);
        assert!(s_from.max(s_to) > 0.5 - 1e-3, "the corridor should run at its rating");
        assert!(point.p[1] > 0.2, "the local unit must pick up the remainder");
        assert!(max_power_mismatch(&case, &series, 0, &plan.u_ac, point) < 1e-6);
    }

    #[test]
    fn opf_reports_infeasible_snapshots() {
        let (case, series) = corridor_case(5.0, 0.0);
        let plan = PlanSlices::for_case(&case);
        let err = solve_ac_opf(&inputs(&case, &series, &plan), None, &NlpOptions::default());
        assert!(err.is_err(), "a 5 p.u. load cannot be served by 2 p.u. of capacity");
    }

    /// Reactive-starved corridor: the load bus needs more q than the remote
    /// generator can ship, so redispatch fails until a compensator grows.
    fn weak_bus_case() -> (NetworkCase, SnapshotSeries) {
        let (mut case, series) = corridor_case(0.6, 0.45);
        case.ac_branches[0] = branch(1, 1, 2, 0.04, 0.40, 0.0, 2.0);
        case.sources[0].q_min = Some(-0.05);
        case.sources[0].q_max = Some(0.05);
        case.sources.push(PowerSource {
            id: 2,
            bus: 2,
            kind: SourceKind::Compensator,
            p_min: 0.0,
            p_max: 0.0,
            q_min: Some(-1.0),
            q_max: Some(1.0),
            capability: CapabilityCurve::Rectangle,
            u_min: 0.0,
            u_max: 2.0,
            c: 20.0,
            o: 0.0,
            o_su: 0.0,
            storage: None,
            vsc_of: None,
        });
        (case, series)
    }

    #[test]
    fn gep_grows_a_compensator_at_a_weak_bus() {
        let (case, series) = weak_bus_case();
        let plan = PlanSlices::for_case(&case);
        let inp = inputs(&case, &series, &plan);

        assert!(
            solve_ac_opf(&inp, None, &NlpOptions::default()).is_err(),
            "the corridor cannot deliver the reactive demand on its own"
        );
        let sol = solve_ac_gep(&inp, None, &NlpOptions::default())
            .expect("growing the compensator restores feasibility");
        let point = &sol.point;
        assert!(
            point.u_src[1] > 0.01,
            "reinforcement should buy compensator capacity, got {}",
            point.u_src[1]
        );
        assert!(point.q[1] > 0.1, "the compensator should inject reactive power");
        assert!(max_power_mismatch(&case, &series, 0, &plan.u_ac, point) < 1e-6);
    }

    #[test]
    fn gep_respects_startup_floors() {
        let (case, series) = weak_bus_case();
        let mut plan = PlanSlices::for_case(&case);
        plan.beta_su = vec![0.3, 0.0];
        plan.beta_prev = vec![1.2, 0.0];
        let sol = solve_ac_gep(&inputs(&case, &series, &plan), None, &NlpOptions::default())
            .expect("reinforcement solves");
        let point = &sol.point;
        assert!(point.beta_su[0] >= 0.3 - 1e-8, "planned startups cannot be undone");
        for s in 0..case.sources.len() {
            assert_relative_eq!(
                point.beta[s] - point.beta_su[s] + point.beta_sd[s],
                plan.beta_prev[s],
                epsilon = 1e-6
            );
            assert!(point.beta_sd[s] >= -1e-9);
        }
    }
}
