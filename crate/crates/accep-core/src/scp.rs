//! Successive convex programming over the expansion plan.
//!
//! The convex approximations linearize branch admittances at a given
//! circuit count. Solving once at the existing grid therefore understates
//! what an expanded corridor can carry: a corridor's reactance drops as
//! circuits are added, which relaxes the angle-difference limit. The loop
//! here re-solves the chosen approximation with admittances scaled to the
//! previous plan until the plan stops moving, then re-solves once more with
//! the plan pinned so dispatch and flows are consistent with the final
//! admittances.

use anyhow::{bail, Result};
use conic::{SolveOptions, Status};

use crate::formulation::{
    build_model, extract_outcome, BuildOptions, EffectiveBranch, FormulationKind, PlanValues,
    SolveOutcome,
};
use crate::netmodel::{AcBranch, NetworkCase, SnapshotSeries};

#[derive(Debug, Clone)]
pub struct ScpOptions {
    /// Relative plan-change threshold below which the loop stops.
    pub tol: f64,
    /// Iteration cap; hitting it flags the run as non-converged and falls
    /// back to the cheapest iterate seen.
    pub max_iters: usize,
    pub h_tangents: usize,
    pub solve: SolveOptions,
}

impl Default for ScpOptions {
    fn default() -> Self {
        ScpOptions { tol: 0.05, max_iters: 20, h_tangents: 3, solve: SolveOptions::default() }
    }
}

/// One solve of the loop: the model objective at that linearization and the
/// relative plan step that produced it.
#[derive(Debug, Clone, Copy)]
pub struct ScpIteration {
    pub iter: usize,
    pub objective: f64,
    pub delta: f64,
}

/// A finished run: the pinned final solve plus the iteration history.
#[derive(Debug, Clone)]
pub struct ScpRun {
    pub kind: FormulationKind,
    pub outcome: SolveOutcome,
    pub iterations: Vec<ScpIteration>,
    pub converged: bool,
    pub delta: f64,
    pub angle_blocked: Vec<u32>,
    /// Branch parameters of the final pinned solve.
    pub effective: Vec<EffectiveBranch>,
}

/// Relative L2 step between consecutive AC-circuit plans. A zero new plan
/// counts as no step only when the old plan was zero too.
pub fn relative_step(new: &[f64], prev: &[f64]) -> f64 {
    debug_assert_eq!(new.len(), prev.len());
    let diff = new
        .iter()
        .zip(prev)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let norm = new.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm > 0.0 {
        diff / norm
    } else if diff < 1e-12 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Watches the step sequence for sustained growth. Three consecutive rises
/// mean the linearization is overshooting back and forth; the caller then
/// averages the last two iterates, once per run.
#[derive(Debug, Default)]
pub struct OscillationGuard {
    prev: Option<f64>,
    rising: usize,
    spent: bool,
}

impl OscillationGuard {
    /// Feed the next step size; true means "dampen now".
    pub fn observe(&mut self, delta: f64) -> bool {
        if let Some(prev) = self.prev {
            if delta > prev {
                self.rising += 1;
            } else {
                self.rising = 0;
            }
        }
        self.prev = Some(delta);
        if self.rising >= 3 && !self.spent {
            self.spent = true;
            self.rising = 0;
            return true;
        }
        false
    }
}

/// Circuits a corridor can use per angle limit at single-circuit reactance,
/// in units of its thermal rating.
pub fn angle_blocking_ratio(branch: &AcBranch) -> f64 {
    branch.theta_max / (branch.x * branch.a * branch.f_max)
}

/// Branches whose existing circuits already saturate the angle-difference
/// limit of a fixed-reactance flow model. Expanding them looks pointless to
/// such a model even when it is not; they are exactly the corridors for
/// which re-linearizing the admittance matters.
pub fn check_angle_blocking(case: &NetworkCase) -> Vec<u32> {
    case.ac_branches
        .iter()
        .filter(|br| br.u_min >= angle_blocking_ratio(br))
        .map(|br| br.id)
        .collect()
}

fn average_plans(a: &PlanValues, b: &PlanValues) -> PlanValues {
    let mid = |x: &[f64], y: &[f64]| -> Vec<f64> {
        x.iter().zip(y).map(|(p, q)| 0.5 * (p + q)).collect()
    };
    PlanValues {
        u_src: mid(&a.u_src, &b.u_src),
        u_ac: mid(&a.u_ac, &b.u_ac),
        u_dc: mid(&a.u_dc, &b.u_dc),
    }
}

/// Iterate the chosen approximation to a plan fixed point, then solve once
/// more with the plan pinned and admittances taken at that plan.
pub fn run_scp(
    case: &NetworkCase,
    series: &SnapshotSeries,
    kind: FormulationKind,
    options: &ScpOptions,
) -> Result<ScpRun> {
    let mut working = PlanValues::minimum(case);
    let mut history: Vec<(PlanValues, f64)> = Vec::new();
    let mut iterations = Vec::new();
    let mut guard = OscillationGuard::default();
    let mut delta = f64::INFINITY;
    let mut k = 0;

    while delta > options.tol && k < options.max_iters {
        let build = BuildOptions {
            h_tangents: options.h_tangents,
            ac_scale: Some(working.u_ac.clone()),
            fix_plan: None,
        };
        let model = build_model(case, series, kind, &build)?;
        let sol = conic::solve(&model.prog, &options.solve);
        if sol.status != Status::Optimal {
            bail!(
                "{kind} iteration {}: solver returned {:?} ({})",
                k + 1,
                sol.status,
                sol.message
            );
        }
        let outcome = extract_outcome(&model, case, series, &sol.x);
        delta = relative_step(&outcome.plan.u_ac, &working.u_ac);
        let mut next = outcome.plan;
        if guard.observe(delta) {
            log::info!("{kind}: damping oscillating plan at iteration {}", k + 1);
            next = average_plans(&next, &working);
        }
        k += 1;
        log::debug!("{kind} iteration {k}: objective {:.6}, step {delta:.3e}", sol.objective);
        iterations.push(ScpIteration { iter: k, objective: sol.objective, delta });
        history.push((next.clone(), sol.objective));
        working = next;
    }

    let converged = delta <= options.tol;
    let best_iterate = if converged {
        None
    } else {
        history.iter().min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite objectives"))
    };
    let pinned = match best_iterate {
        Some(best) => {
            log::warn!(
                "{kind}: no fixed point within {} iterations (last step {delta:.3e}); \
                 keeping the cheapest iterate",
                options.max_iters
            );
            best.0.clone()
        }
        None => working,
    };

    let build = BuildOptions {
        h_tangents: options.h_tangents,
        ac_scale: Some(pinned.u_ac.clone()),
        fix_plan: Some(pinned),
    };
    let model = build_model(case, series, kind, &build)?;
    let sol = conic::solve(&model.prog, &options.solve);
    if sol.status != Status::Optimal {
        bail!("{kind} final pinned solve returned {:?} ({})", sol.status, sol.message);
    }
    let outcome = extract_outcome(&model, case, series, &sol.x);

    Ok(ScpRun {
        kind,
        outcome,
        iterations,
        converged,
        // No step was measured when the loop never ran; report zero rather
        // than an unserializable infinity.
        delta: if k == 0 { 0.0 } else { delta },
        angle_blocked: check_angle_blocking(case),
        effective: model.effective,
    })
}
