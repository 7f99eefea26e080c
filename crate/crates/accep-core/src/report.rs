//! Post-solution analytics: loss audits against analytical lower bounds,
//! and run summaries covering costs, redispatch, expansion, and the
//! capacity and energy mix.

use std::collections::BTreeMap;
use std::fmt;

use anyhow::{bail, Context, Result};

use crate::caseio::{BranchKind, ElementKind, FlowRow, LossAuditRow, ResultBundle};
use crate::formulation::{cosine_cut_curvature, EffectiveBranch, FormulationKind};
use crate::netmodel::{NetworkCase, SnapshotSeries, SourceKind};

/// Slack above this marks a fictitious loss: the model dissipates more than
/// any physical point at the same state would.
pub const FICTITIOUS_SLACK: f64 = 1e-5;

/// Loss audit of one solution: per-branch/snapshot rows plus aggregates.
#[derive(Debug, Clone)]
pub struct LossAudit {
    pub rows: Vec<LossAuditRow>,
    pub total_model_loss: f64,
    pub total_lower_bound: f64,
    pub min_slack: f64,
    pub flagged: usize,
}

/// Compare each branch's modeled loss against the analytical lower bound
/// of its approximation, at the operating state the solution reports.
///
/// Bounds: LPAC `2 g k(theta_max) theta^2`, decoupled `g theta^2`, lossy dc
/// `r p^2` on the mid-line flow. The lossy-dc bound can sit slightly above
/// the tangent envelope between tangency points, so small negative slack is
/// expected there and not flagged; the voltage-based kinds are relaxations
/// and must stay at or above their bound.
pub fn audit_losses(
    kind: FormulationKind,
    case: &NetworkCase,
    effective: &[EffectiveBranch],
    flows: &[FlowRow],
) -> Result<LossAudit> {
    if kind == FormulationKind::Dc {
        bail!("the dc approximation models no losses; nothing to audit");
    }
    let pos: BTreeMap<u32, usize> =
        case.ac_branches.iter().enumerate().map(|(l, br)| (br.id, l)).collect();

    let mut rows = Vec::new();
    for row in flows.iter().filter(|r| r.kind == BranchKind::Ac) {
        let l = *pos
            .get(&row.branch)
            .with_context(|| format!("flow table names unknown branch {}", row.branch))?;
        let eff = effective
            .get(l)
            .with_context(|| format!("no effective parameters for branch {}", row.branch))?;
        let theta = row
            .theta
            .with_context(|| format!("branch {} carries no angle to audit against", row.branch))?;
        let lower_bound = match kind {
            FormulationKind::Dc => unreachable!("rejected above"),
            FormulationKind::DcLossy => {
                let mid = 0.5 * (row.p_from - row.p_to);
                eff.r * mid * mid
            }
            FormulationKind::Lpac => {
                2.0 * eff.g * cosine_cut_curvature(eff.theta_max) * theta * theta
            }
            FormulationKind::Decoupled => eff.g * theta * theta,
        };
        let slack = row.p_loss - lower_bound;
        rows.push(LossAuditRow {
            branch: row.branch,
            t: row.t,
            model_loss: row.p_loss,
            lower_bound,
            slack,
            fictitious: slack > FICTITIOUS_SLACK,
            theta_abs: theta.abs(),
        });
    }

    let total_model_loss = rows.iter().map(|r| r.model_loss).sum();
    let total_lower_bound = rows.iter().map(|r| r.lower_bound).sum();
    let min_slack = rows.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min);
    let flagged = rows.iter().filter(|r| r.fictitious).count();
    Ok(LossAudit { rows, total_model_loss, total_lower_bound, min_slack, flagged })
}

/// Headline numbers of one run, ready to print or serialize.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RunSummary {
    pub approximation: String,
    pub initial_objective: f64,
    /// Equals the initial objective until a reinforcement pass ran.
    pub final_objective: f64,
    pub capital_cost: f64,
    pub operating_cost: f64,
    pub startup_cost: f64,
    /// Share of snapshots that were AC-feasible as planned (before repair).
    pub feasible_share: Option<f64>,
    pub certified: Option<bool>,
    pub redispatch_up: Option<f64>,
    pub redispatch_down: Option<f64>,
    /// Added transmission in capacity times route length (p.u. km).
    pub transmission_expansion: f64,
    /// Installed capacity per carrier, weighted by unit rating.
    pub capacity_mix: BTreeMap<String, f64>,
    /// Served energy per carrier over the horizon.
    pub energy_mix: BTreeMap<String, f64>,
    /// Total energy drawn into storage over the horizon.
    pub storage_cycling: f64,
    /// Worst per-snapshot gap of generation - charge - losses - demand.
    pub energy_balance_gap: f64,
}

fn carrier(kind: SourceKind) -> &'static str {
    match kind {
        SourceKind::Sg => "sg",
        SourceKind::Ibr => "ibr",
        SourceKind::Storage => "storage",
        SourceKind::Compensator => "compensator",
    }
}

/// Aggregate one result bundle into the run summary. All numbers come from
/// the emitted tables, so anything reported here can be recomputed from the
/// CSV files alone.
pub fn summarize(
    case: &NetworkCase,
    series: &SnapshotSeries,
    bundle: &ResultBundle,
) -> Result<RunSummary> {
    let nt = series.len();
    let plan = bundle.plan_map();
    let src_by_id: BTreeMap<u32, &crate::netmodel::PowerSource> =
        case.sources.iter().map(|s| (s.id, s)).collect();

    let mut capacity_mix: BTreeMap<String, f64> = BTreeMap::new();
    for src in &case.sources {
        let u = plan
            .get(&(ElementKind::Source, src.id))
            .with_context(|| format!("plan is missing source {}", src.id))?;
        *capacity_mix.entry(carrier(src.kind).to_string()).or_insert(0.0) +=
            u * src.p_max.max(0.0);
    }

    let mut transmission_expansion = 0.0;
    for br in &case.ac_branches {
        let u = plan
            .get(&(ElementKind::AcBranch, br.id))
            .with_context(|| format!("plan is missing branch {}", br.id))?;
        transmission_expansion += (u - br.u_min).max(0.0) * br.f_max * br.length_km.unwrap_or(0.0);
    }
    for dc in &case.dc_branches {
        let u = plan
            .get(&(ElementKind::DcBranch, dc.id))
            .with_context(|| format!("plan is missing link {}", dc.id))?;
        transmission_expansion += (u - dc.u_min).max(0.0) * dc.p_max * dc.length_km.unwrap_or(0.0);
    }

    let mut energy_mix: BTreeMap<String, f64> = BTreeMap::new();
    let mut storage_cycling = 0.0;
    let mut gen_per_t = vec![0.0; nt];
    let mut charge_per_t = vec![0.0; nt];
    for row in &bundle.dispatch {
        let src = src_by_id
            .get(&row.source)
            .with_context(|| format!("dispatch names unknown source {}", row.source))?;
        anyhow::ensure!(row.t < nt, "dispatch row at snapshot {} is out of range", row.t);
        let delta = series.delta[row.t];
        *energy_mix.entry(carrier(src.kind).to_string()).or_insert(0.0) += delta * row.p;
        gen_per_t[row.t] += row.p;
        if let Some(chg) = row.p_charge {
            storage_cycling += delta * chg;
            charge_per_t[row.t] += chg;
        }
    }

    let mut loss_per_t = vec![0.0; nt];
    for row in &bundle.flows {
        anyhow::ensure!(row.t < nt, "flow row at snapshot {} is out of range", row.t);
        loss_per_t[row.t] += row.p_loss;
    }
    let mut energy_balance_gap: f64 = 0.0;
    for t in 0..nt {
        let demand: f64 = case.buses.iter().map(|b| series.load_p(b.id, t)).sum();
        let gap = gen_per_t[t] - charge_per_t[t] - loss_per_t[t] - demand;
        energy_balance_gap = energy_balance_gap.max(gap.abs());
    }

    let log = bundle.reinforcement.as_ref();
    Ok(RunSummary {
        approximation: bundle.objective.approximation.clone(),
        initial_objective: log.map_or(bundle.objective.objective, |l| l.initial_objective),
        final_objective: log.map_or(bundle.objective.objective, |l| l.final_objective),
        capital_cost: bundle.objective.capital_cost,
        operating_cost: bundle.objective.operating_cost,
        startup_cost: bundle.objective.startup_cost,
        feasible_share: log.map(|l| {
            if nt == 0 { 1.0 } else { (nt - l.screened.len()) as f64 / nt as f64 }
        }),
        certified: log.map(|l| l.certified),
        redispatch_up: log.map(|l| l.redispatch_up),
        redispatch_down: log.map(|l| l.redispatch_down),
        transmission_expansion,
        capacity_mix,
        energy_mix,
        storage_cycling,
        energy_balance_gap,
    })
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "approximation      {}", self.approximation)?;
        writeln!(f, "objective          {:.6}", self.final_objective)?;
        if (self.final_objective - self.initial_objective).abs() > 1e-12 {
            writeln!(f, "  before repair    {:.6}", self.initial_objective)?;
        }
        writeln!(
            f,
            "costs              capital {:.6} | operating {:.6} | startup {:.6}",
            self.capital_cost, self.operating_cost, self.startup_cost
        )?;
        if let Some(share) = self.feasible_share {
            writeln!(f, "feasible share     {:.2}%", share * 100.0)?;
        }
        if let Some(certified) = self.certified {
            writeln!(f, "certified          {certified}")?;
        }
        if let (Some(up), Some(down)) = (self.redispatch_up, self.redispatch_down) {
            writeln!(f, "redispatch         +{up:.6} / -{down:.6}")?;
        }
        writeln!(f, "expansion          {:.6} p.u. km", self.transmission_expansion)?;
        for (name, cap) in &self.capacity_mix {
            writeln!(f, "capacity[{name}]    {cap:.6}")?;
        }
        for (name, energy) in &self.energy_mix {
            writeln!(f, "energy[{name}]      {energy:.6}")?;
        }
        writeln!(f, "storage cycling    {:.6}", self.storage_cycling)?;
        write!(f, "energy balance gap {:.3e}", self.energy_balance_gap)
    }
}
