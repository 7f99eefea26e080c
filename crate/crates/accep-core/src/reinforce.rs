//! Feasibility restoration for a finished expansion plan: screen every
//! snapshot against the exact power-flow equations, repair the failures by
//! redispatch or, where redispatch is not enough, by growing source
//! capacities locally, then certify every snapshot with an independent
//! power-flow check.
//!
//! Capacity only ever grows, and repairs run in chronological order, so a
//! snapshot repaired early can make a later one pass by plain redispatch.

use anyhow::{Context, Result};
use log::{debug, info};
use rayon::prelude::*;

use crate::acfeas::{
    max_power_mismatch, net_injections, newton_power_flow, solve_ac_gep, solve_ac_opf,
    NlpOptions, OperatingPoint, PfOptions, SnapshotInputs,
};
use crate::caseio::{
    ElementKind, PlanIncrement, ReinforceAction, ReinforcementEvent, ReinforcementLog,
};
use crate::formulation::{PlanValues, SolveOutcome};
use crate::netmodel::{NetworkCase, SnapshotSeries};

/// Tunables of the restoration pass.
#[derive(Debug, Clone)]
pub struct ReinforceOptions {
    pub nlp: NlpOptions,
    /// Worker threads for the screening pass; `None` takes the rayon default.
    pub parallel: Option<usize>,
    /// Largest balance residual a certified snapshot may carry.
    pub mismatch_tol: f64,
    /// Capacity growth below this is treated as numerical noise.
    pub increment_tol: f64,
}

impl Default for ReinforceOptions {
    fn default() -> Self {
        ReinforceOptions {
            nlp: NlpOptions::default(),
            parallel: None,
            mismatch_tol: 1e-6,
            increment_tol: 1e-6,
        }
    }
}

/// A restored plan: final capacities, one certified operating point per
/// snapshot, and the audit trail.
#[derive(Debug, Clone)]
pub struct Restoration {
    pub plan: PlanValues,
    pub points: Vec<OperatingPoint>,
    pub log: ReinforcementLog,
}

/// Restoration failure that still carries the audit trail built so far.
#[derive(Debug, thiserror::Error)]
pub enum ReinforceError {
    #[error("snapshot {t} cannot be repaired even with local reinforcement")]
    Unrepairable {
        t: usize,
        #[source]
        source: anyhow::Error,
        log: Box<ReinforcementLog>,
    },
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

/// Borrowed pieces shared by every single-snapshot solve.
struct SnapshotCtx<'a> {
    case: &'a NetworkCase,
    series: &'a SnapshotSeries,
    u_ac: &'a [f64],
    u_dc: &'a [f64],
    tables: &'a PlanTables,
}

impl SnapshotCtx<'_> {
    fn inputs<'b>(&'b self, u_src: &'b [f64], t: usize) -> SnapshotInputs<'b> {
        let nt = self.series.len();
        let prev = if t == 0 { nt - 1 } else { t - 1 };
        SnapshotInputs {
            case: self.case,
            series: self.series,
            t,
            u_src,
            u_ac: self.u_ac,
            u_dc: self.u_dc,
            p_charge: &self.tables.p_charge[t],
            beta_prev: &self.tables.beta[prev],
            beta_su: &self.tables.beta_su[t],
        }
    }
}

/// Planned trajectories laid out per snapshot, ready to slice into the
/// single-snapshot problems.
struct PlanTables {
    /// `[t][s]` planned net discharge.
    p: Vec<Vec<f64>>,
    /// `[t][s]` planned online level.
    beta: Vec<Vec<f64>>,
    /// `[t][s]` planned startups.
    beta_su: Vec<Vec<f64>>,
    /// `[t][s]` planned charging draw.
    p_charge: Vec<Vec<f64>>,
}

fn plan_tables(
    case: &NetworkCase,
    series: &SnapshotSeries,
    initial: &SolveOutcome,
) -> Result<PlanTables> {
    let ns = case.sources.len();
    let nt = series.len();
    let pos: std::collections::BTreeMap<u32, usize> =
        case.sources.iter().enumerate().map(|(s, src)| (src.id, s)).collect();
    let mut tables = PlanTables {
        p: vec![vec![f64::NAN; ns]; nt],
        beta: vec![vec![f64::NAN; ns]; nt],
        beta_su: vec![vec![f64::NAN; ns]; nt],
        p_charge: vec![vec![0.0; ns]; nt],
    };
    for row in &initial.dispatch {
        let s = *pos
            .get(&row.source)
            .with_context(|| format!("dispatch names unknown source {}", row.source))?;
        let cell = tables
            .p
            .get_mut(row.t)
            .with_context(|| format!("dispatch at snapshot {} is out of range", row.t))?;
        cell[s] = row.p;
        tables.beta[row.t][s] = row.beta;
        tables.beta_su[row.t][s] = row.beta_su;
        tables.p_charge[row.t][s] = row.p_charge.unwrap_or(0.0);
    }
    for t in 0..nt {
        for s in 0..ns {
            anyhow::ensure!(
                tables.p[t][s].is_finite(),
                "the plan has no dispatch for source {} at snapshot {t}",
                case.sources[s].id
            );
        }
    }
    Ok(tables)
}

/// Operating plus startup cost of one snapshot at a stated point.
fn snapshot_cost(case: &NetworkCase, delta: f64, point: &OperatingPoint) -> f64 {
    case.sources
        .iter()
        .enumerate()
        .map(|(s, src)| {
            delta * src.o * point.p[s] + src.o_su * (point.beta_su[s] + point.beta_sd[s])
        })
        .sum()
}

/// Independent certificate for one snapshot: the stated point must satisfy
/// the nodal balances, and a Newton power flow fed only the stated
/// injections must converge when seeded there.
fn certify(
    case: &NetworkCase,
    series: &SnapshotSeries,
    t: usize,
    u_ac: &[f64],
    point: &OperatingPoint,
) -> Result<f64> {
    let residual = max_power_mismatch(case, series, t, u_ac, point);
    let inj = net_injections(case, series, t, point);
    let (p_inj, q_inj): (Vec<f64>, Vec<f64>) = inj.into_iter().unzip();
    let pf = newton_power_flow(
        case,
        u_ac,
        &p_inj,
        &q_inj,
        &point.v,
        &point.theta,
        &PfOptions::default(),
    )
    .with_context(|| format!("power-flow check at snapshot {t}"))?;
    anyhow::ensure!(
        pf.converged,
        "power flow does not converge from the stated point at snapshot {t}"
    );
    Ok(residual)
}

/// Screen, repair, and certify every snapshot of a finished plan.
///
/// The initial screening redispatches each snapshot at the planned
/// capacities in parallel. Failures are then repaired one by one in time
/// order: first another redispatch attempt (earlier repairs may have grown
/// capacity), then a reinforcement solve whose growth is folded into the
/// running plan. Certification re-evaluates the exact balances at every
/// final point.
pub fn restore_feasibility(
    case: &NetworkCase,
    series: &SnapshotSeries,
    initial: &SolveOutcome,
    options: &ReinforceOptions,
) -> Result<Restoration, ReinforceError> {
    let nt = series.len();
    let ns = case.sources.len();
    let tables = plan_tables(case, series, initial).map_err(ReinforceError::Other)?;
    let mut u_src = initial.plan.u_src.clone();
    let u_ac = initial.plan.u_ac.clone();
    let u_dc = initial.plan.u_dc.clone();

    let ctx = SnapshotCtx { case, series, u_ac: &u_ac, u_dc: &u_dc, tables: &tables };

    // Screening: redispatch every snapshot at the planned capacities.
    let screen: Vec<Result<OperatingPoint>> = {
        let u_plan = u_src.clone();
        let run = || {
            (0..nt)
                .into_par_iter()
                .map(|t| {
                    solve_ac_opf(&ctx.inputs(&u_plan, t), None, &options.nlp)
                        .map(|sol| sol.point)
                })
                .collect()
        };
        match options.parallel {
            Some(threads) => rayon::ThreadPoolBuilder::new()
                .num_threads(threads.max(1))
                .build()
                .context("building the screening thread pool")
                .map_err(ReinforceError::Other)?
                .install(run),
            None => run(),
        }
    };

    let mut points: Vec<Option<OperatingPoint>> = Vec::with_capacity(nt);
    let mut screened = Vec::new();
    for (t, outcome) in screen.into_iter().enumerate() {
        match outcome {
            Ok(point) => points.push(Some(point)),
            Err(err) => {
                debug!("snapshot {t} fails screening: {err:#}");
                screened.push(t);
                points.push(None);
            }
        }
    }
    info!(
        "screening: {} of {nt} snapshots need repair{}",
        screened.len(),
        if screened.is_empty() { "; plan is feasible as dispatched" } else { "" }
    );

    // Repair in time order so capacity growth carries forward.
    let mut events = Vec::new();
    for &t in &screened {
        let delta = series.delta[t];
        let planned_cost: f64 = case
            .sources
            .iter()
            .enumerate()
            .map(|(s, src)| {
                delta * src.o * tables.p[t][s] + src.o_su * tables.beta_su[t][s]
            })
            .sum();

        match solve_ac_opf(&ctx.inputs(&u_src, t), None, &options.nlp) {
            Ok(sol) => {
                info!("snapshot {t}: earlier reinforcement suffices, redispatched");
                events.push(ReinforcementEvent {
                    t,
                    action: ReinforceAction::Redispatch,
                    increments: Vec::new(),
                    objective_delta: snapshot_cost(case, delta, &sol.point) - planned_cost,
                });
                points[t] = Some(sol.point);
            }
            Err(_) => match solve_ac_gep(&ctx.inputs(&u_src, t), None, &options.nlp) {
                Ok(sol) => {
                    let mut increments = Vec::new();
                    let mut capital = 0.0;
                    for s in 0..ns {
                        let grown = sol.point.u_src[s] - u_src[s];
                        if grown > options.increment_tol {
                            increments.push(PlanIncrement {
                                element: case.sources[s].id,
                                kind: ElementKind::Source,
                                delta_u: grown,
                            });
                            capital += case.sources[s].c * grown;
                            u_src[s] = sol.point.u_src[s];
                        }
                    }
                    info!(
                        "snapshot {t}: reinforced {} source(s) for {capital:.4} of capital",
                        increments.len()
                    );
                    events.push(ReinforcementEvent {
                        t,
                        action: ReinforceAction::Reinforce,
                        increments,
                        objective_delta: snapshot_cost(case, delta, &sol.point) + capital
                            - planned_cost,
                    });
                    points[t] = Some(sol.point);
                }
                Err(err) => {
                    let log = accounting(
                        case,
                        series,
                        initial,
                        &tables,
                        &u_src,
                        &points,
                        screened.clone(),
                        events,
                        false,
                        0.0,
                    );
                    return Err(ReinforceError::Unrepairable {
                        t,
                        source: err,
                        log: Box::new(log),
                    });
                }
            },
        }
    }

    // Certification: every snapshot, not only the repaired ones.
    let mut max_residual: f64 = 0.0;
    let mut certified = true;
    for t in 0..nt {
        let point = points[t].as_ref().expect("all snapshots repaired");
        match certify(case, series, t, &u_ac, point) {
            Ok(residual) => {
                max_residual = max_residual.max(residual);
                if residual > options.mismatch_tol {
                    certified = false;
                    debug!("snapshot {t}: residual {residual:.3e} exceeds tolerance");
                }
            }
            Err(err) => {
                certified = false;
                debug!("snapshot {t}: certification failed: {err:#}");
            }
        }
    }
    if certified {
        info!("all {nt} snapshots certified, worst residual {max_residual:.3e}");
    }

    let log = accounting(
        case,
        series,
        initial,
        &tables,
        &u_src,
        &points,
        screened,
        events,
        certified,
        max_residual,
    );
    let points: Vec<OperatingPoint> = points.into_iter().map(Option::unwrap).collect();
    let plan = PlanValues { u_src, u_ac, u_dc };
    Ok(Restoration { plan, points, log })
}

/// Fold the final points into the cost ledger. The final objective is the
/// initial one plus capital growth, operating drift, and extra startups;
/// nothing else may move.
#[allow(clippy::too_many_arguments)]
fn accounting(
    case: &NetworkCase,
    series: &SnapshotSeries,
    initial: &SolveOutcome,
    tables: &PlanTables,
    u_src: &[f64],
    points: &[Option<OperatingPoint>],
    screened: Vec<usize>,
    events: Vec<ReinforcementEvent>,
    certified: bool,
    max_residual: f64,
) -> ReinforcementLog {
    let mut redispatch_up = 0.0;
    let mut redispatch_down = 0.0;
    let mut operating_delta = 0.0;
    let mut startup_delta = 0.0;
    for (t, point) in points.iter().enumerate() {
        let Some(point) = point else { continue };
        let delta = series.delta[t];
        for (s, src) in case.sources.iter().enumerate() {
            let drift = point.p[s] - tables.p[t][s];
            redispatch_up += delta * drift.max(0.0);
            redispatch_down += delta * (-drift).max(0.0);
            operating_delta += delta * src.o * drift;
            startup_delta +=
                src.o_su * (point.beta_su[s] + point.beta_sd[s] - tables.beta_su[t][s]);
        }
    }
    let capital_delta: f64 = case
        .sources
        .iter()
        .enumerate()
        .map(|(s, src)| src.c * (u_src[s] - initial.plan.u_src[s]))
        .sum();
    ReinforcementLog {
        screened,
        events,
        certified,
        max_residual,
        redispatch_up,
        redispatch_down,
        capital_delta,
        operating_delta,
        startup_delta,
        initial_objective: initial.objective,
        final_objective: initial.objective + capital_delta + operating_delta + startup_delta,
    }
}
