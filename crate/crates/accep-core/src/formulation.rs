//! Convex approximations of the AC capacity expansion problem.
//!
//! Four formulations share the commitment, injection, storage and HVDC
//! blocks and differ in how AC branch flows are modeled:
//!
//! * `dc`        - lossless angle-free flows with cycle-based KVL;
//! * `dc-lossy`  - adds quadratic series losses via tangent cuts;
//! * `lpac`      - linearized AC with voltage magnitudes and a conic
//!                 cosine relaxation;
//! * `decoupled` - active/reactive flow equations with conic loss and
//!                 reactive-demand envelopes.
//!
//! Expansion variables (circuit counts, source capacities) stay continuous.
//! Because effective branch admittances depend on the installed circuit
//! count, the builder takes a per-branch admittance multiplier from the
//! caller; the successive-convex loop feeds the previous plan back in.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use anyhow::{bail, Result};
use conic::{ConvexProgram, Sense, VarId};
use serde::{Deserialize, Serialize};

use crate::caseio::{BranchKind, DispatchRow, FlowRow};
use crate::graph::{build_cycle_basis, build_incidence};
use crate::netmodel::{NetworkCase, SnapshotSeries, SourceKind};

/// Which convex approximation to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FormulationKind {
    Dc,
    DcLossy,
    Lpac,
    Decoupled,
}

impl FormulationKind {
    pub const ALL: [FormulationKind; 4] = [
        FormulationKind::Dc,
        FormulationKind::DcLossy,
        FormulationKind::Lpac,
        FormulationKind::Decoupled,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FormulationKind::Dc => "dc",
            FormulationKind::DcLossy => "dc-lossy",
            FormulationKind::Lpac => "lpac",
            FormulationKind::Decoupled => "decoupled",
        }
    }

    /// True for the formulations that carry voltage magnitude and per-end
    /// flow variables (lpac, decoupled).
    pub fn has_voltages(self) -> bool {
        matches!(self, FormulationKind::Lpac | FormulationKind::Decoupled)
    }
}

impl fmt::Display for FormulationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FormulationKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dc" => Ok(FormulationKind::Dc),
            "dc-lossy" => Ok(FormulationKind::DcLossy),
            "lpac" => Ok(FormulationKind::Lpac),
            "decoupled" => Ok(FormulationKind::Decoupled),
            other => bail!("unknown approximation '{other}' (expected dc, dc-lossy, lpac or decoupled)"),
        }
    }
}

/// Families of constraints in the built program. Every row and cone carries
/// exactly one tag; the per-formulation tag set is part of the public
/// contract and is checked by the acceptance suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConstraintTag {
    OnlineLimit,
    OnlineConsistency,
    OnlineBoundary,
    PInjection,
    QInjection,
    StorageCharging,
    StorageComplementarity,
    SocLimits,
    SocRecursion,
    SocCyclic,
    PqUpper,
    PqLower,
    ThermalLimit,
    VoltageAngleDifference,
    HvdcAlong,
    HvdcAgainst,
    HvdcLimit,
    NodalBalanceP,
    NodalBalanceQ,
    Kvl,
    ThermalLimitDc,
    AngleFlowLimitDc,
    NodalBalancePDc,
    LossTangent,
    ThermalLimitDcLossy,
    NodalBalancePDcLossy,
    LpacFlowP,
    LpacFlowQ,
    CosineRelaxation,
    DecoupledFlowP,
    DecoupledFlowQ,
    NodalBalancePDecoupled,
    NodalBalanceQDecoupled,
    DecoupledPLoss,
    DecoupledQDem,
    ThermalLimitDecoupled,
}

impl ConstraintTag {
    pub fn as_str(self) -> &'static str {
        use ConstraintTag::*;
        match self {
            OnlineLimit => "online_limit",
            OnlineConsistency => "online_consistency",
            OnlineBoundary => "online_boundary",
            PInjection => "p_injection",
            QInjection => "q_injection",
            StorageCharging => "storage_charging",
            StorageComplementarity => "storage_complementarity",
            SocLimits => "state_of_charge_limits",
            SocRecursion => "state_of_charge",
            SocCyclic => "state_of_charge_cyclic",
            PqUpper => "pq_upper",
            PqLower => "pq_lower",
            ThermalLimit => "thermal_limit",
            VoltageAngleDifference => "voltage_angle_difference",
            HvdcAlong => "flow_hvdc_along",
            HvdcAgainst => "flow_hvdc_against",
            HvdcLimit => "flow_hvdc_limit",
            NodalBalanceP => "nodal_balance_p",
            NodalBalanceQ => "nodal_balance_q",
            Kvl => "kvl",
            ThermalLimitDc => "thermal_limit_dc",
            AngleFlowLimitDc => "voltage_angle_difference_dc",
            NodalBalancePDc => "nodal_balance_p_dc",
            LossTangent => "losses_p_dc",
            ThermalLimitDcLossy => "thermal_limit_dc_lossy",
            NodalBalancePDcLossy => "nodal_balance_p_dc_lossy",
            LpacFlowP => "lpac_p",
            LpacFlowQ => "lpac_q",
            CosineRelaxation => "cosine_relaxation",
            DecoupledFlowP => "decoupled_p",
            DecoupledFlowQ => "decoupled_q",
            NodalBalancePDecoupled => "nodal_balance_p_decoupled",
            NodalBalanceQDecoupled => "nodal_balance_q_decoupled",
            DecoupledPLoss => "decoupled_p_losses",
            DecoupledQDem => "decoupled_q_losses",
            ThermalLimitDecoupled => "thermal_limit_decoupled",
        }
    }
}

impl fmt::Display for ConstraintTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Installed capacities of one expansion plan, indexed like the case vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanValues {
    pub u_src: Vec<f64>,
    pub u_ac: Vec<f64>,
    pub u_dc: Vec<f64>,
}

impl PlanValues {
    /// The never-expanded starting point: everything at its minimum.
    pub fn minimum(case: &NetworkCase) -> Self {
        PlanValues {
            u_src: case.sources.iter().map(|s| s.u_min).collect(),
            u_ac: case.ac_branches.iter().map(|l| l.u_min).collect(),
            u_dc: case.dc_branches.iter().map(|l| l.u_min).collect(),
        }
    }
}

/// Options controlling a single model build.
#[derive(Debug, Clone)]
pub struct BuildOptions {
    /// Number of tangent cuts per flow direction for the quadratic loss
    /// envelope of the dc-lossy formulation.
    pub h_tangents: usize,
    /// Per-AC-branch admittance multiplier (the previous plan's circuit
    /// count in the successive-convex loop). `None` means one circuit.
    pub ac_scale: Option<Vec<f64>>,
    /// Fix all expansion variables to a given plan (used for the final
    /// pinned solve and for operational studies).
    pub fix_plan: Option<PlanValues>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { h_tangents: 3, ac_scale: None, fix_plan: None }
    }
}

/// Per-circuit branch parameters after applying the admittance multiplier
/// from the previous plan.
#[derive(Debug, Clone)]
pub struct EffectiveBranch {
    pub g: f64,
    pub b: f64,
    pub b_sh: f64,
    pub r: f64,
    pub x: f64,
    /// Usable rating per circuit (loading limit times thermal rating).
    pub cap: f64,
    pub theta_max: f64,
    pub u_min: f64,
    /// Upper circuit bound, tightened in the dc family so that the thermal
    /// rating never exceeds what the angle limit can carry.
    pub u_max: f64,
}

/// Compute effective branch parameters for a formulation at a given
/// admittance scale (previous circuit counts; values <= 0 fall back to
/// single-circuit parameters).
pub fn effective_branches(
    case: &NetworkCase,
    kind: FormulationKind,
    ac_scale: Option<&[f64]>,
) -> Vec<EffectiveBranch> {
    case.ac_branches
        .iter()
        .enumerate()
        .map(|(l, br)| {
            let raw = ac_scale.map_or(1.0, |s| s[l]);
            let scale = if raw > 0.0 { raw } else { 1.0 };
            let (g, b) = br.admittance();
            let cap = br.a * br.f_max;
            let x_eff = br.x / scale;
            let u_max = match kind {
                FormulationKind::Dc | FormulationKind::DcLossy => {
                    br.u_min.max(br.u_max.min(br.theta_max / (x_eff * cap)))
                }
                FormulationKind::Lpac | FormulationKind::Decoupled => br.u_max,
            };
            EffectiveBranch {
                g: g * scale,
                b: b * scale,
                b_sh: br.b_sh * scale,
                r: br.r / scale,
                x: x_eff,
                cap,
                theta_max: br.theta_max,
                u_min: br.u_min,
                u_max,
            }
        })
        .collect()
}

/// Active-power loss of a stretch of line under the cosine model relative
/// to the quadratic model, at voltage-angle difference `theta`:
/// 2 (1 - cos theta) / theta^2. Approaches 1 as theta goes to 0, i.e. the
/// two loss models agree at small angles.
pub fn compare_loss_models(theta: f64) -> Result<f64> {
    if !(theta > 0.0 && theta <= std::f64::consts::FRAC_PI_6) {
        bail!("angle {theta} outside the supported range (0, pi/6]");
    }
    Ok(2.0 * (1.0 - theta.cos()) / (theta * theta))
}

/// Curvature of the cosine cut: the largest k with cos(t) <= 1 - k t^2 on
/// [-theta_max, theta_max].
pub fn cosine_cut_curvature(theta_max: f64) -> f64 {
    (1.0 - theta_max.cos()) / (theta_max * theta_max)
}

/// Flow setpoints at which the quadratic loss curve is linearized:
/// +-(h/H) of the maximum usable flow, h = 1..=H.
pub fn tangent_points(max_flow: f64, h_tangents: usize) -> Vec<f64> {
    let mut points = Vec::with_capacity(2 * h_tangents);
    for h in 1..=h_tangents {
        let p0 = max_flow * h as f64 / h_tangents as f64;
        points.push(-p0);
        points.push(p0);
    }
    points.sort_by(|a, b| a.partial_cmp(b).unwrap());
    points
}

/// Variable ids of a built model, indexed by element position and snapshot.
/// Entries are `None` where the formulation does not carry the quantity.
#[derive(Debug, Clone, Default)]
pub struct VariableCatalog {
    pub u_src: Vec<VarId>,
    pub u_ac: Vec<VarId>,
    pub u_dc: Vec<VarId>,
    pub beta: Vec<Vec<VarId>>,
    pub beta_su: Vec<Vec<VarId>>,
    pub p: Vec<Vec<VarId>>,
    pub q: Vec<Vec<Option<VarId>>>,
    pub p_chg: Vec<Vec<Option<VarId>>>,
    pub energy: Vec<Vec<Option<VarId>>>,
    pub p_in: Vec<Vec<Option<VarId>>>,
    pub dc_fwd: Vec<Vec<VarId>>,
    pub dc_bwd: Vec<Vec<VarId>>,
    pub dc_from: Vec<Vec<VarId>>,
    pub dc_to: Vec<Vec<VarId>>,
    /// Single mid-line flow per AC branch (dc family).
    pub ac_p: Vec<Vec<Option<VarId>>>,
    pub ac_loss: Vec<Vec<Option<VarId>>>,
    pub ac_qdem: Vec<Vec<Option<VarId>>>,
    /// Directed end flows (voltage formulations).
    pub ac_p_from: Vec<Vec<Option<VarId>>>,
    pub ac_p_to: Vec<Vec<Option<VarId>>>,
    pub ac_q_from: Vec<Vec<Option<VarId>>>,
    pub ac_q_to: Vec<Vec<Option<VarId>>>,
    pub cos_hat: Vec<Vec<Option<VarId>>>,
    pub v: Vec<Vec<Option<VarId>>>,
    pub theta: Vec<Vec<Option<VarId>>>,
}

/// A fully built optimization model for one formulation.
pub struct Model {
    pub kind: FormulationKind,
    pub prog: ConvexProgram,
    pub vars: VariableCatalog,
    pub tag_counts: BTreeMap<ConstraintTag, usize>,
    pub effective: Vec<EffectiveBranch>,
}

impl Model {
    pub fn tag_set(&self) -> BTreeSet<ConstraintTag> {
        self.tag_counts.keys().copied().collect()
    }
}

/// Build the complete model for `kind`: all blocks, objective included.
pub fn build_model(
    case: &NetworkCase,
    series: &SnapshotSeries,
    kind: FormulationKind,
    options: &BuildOptions,
) -> Result<Model> {
    let mut builder = ModelBuilder::new(case, series, kind, options)?;
    builder.build_objective();
    builder.build_commitment_block();
    builder.build_injection_block();
    builder.build_storage_block();
    builder.build_hvdc_block();
    match kind {
        FormulationKind::Dc => builder.build_dc_flow(),
        FormulationKind::DcLossy => builder.build_dc_lossy_flow(),
        FormulationKind::Lpac => builder.build_lpac_flow(),
        FormulationKind::Decoupled => builder.build_decoupled_flow(),
    }
    Ok(builder.finish())
}

/// Incremental model assembly. `new` creates every variable; the block
/// methods add the tagged constraint families; `finish` hands over the
/// program.
pub struct ModelBuilder<'a> {
    case: &'a NetworkCase,
    series: &'a SnapshotSeries,
    kind: FormulationKind,
    h_tangents: usize,
    effective: Vec<EffectiveBranch>,
    prog: ConvexProgram,
    vars: VariableCatalog,
    tags: BTreeMap<ConstraintTag, usize>,
}

impl<'a> ModelBuilder<'a> {
    pub fn new(
        case: &'a NetworkCase,
        series: &'a SnapshotSeries,
        kind: FormulationKind,
        options: &BuildOptions,
    ) -> Result<Self> {
        if let Some(scale) = &options.ac_scale {
            if scale.len() != case.ac_branches.len() {
                bail!(
                    "admittance scale has {} entries for {} AC branches",
                    scale.len(),
                    case.ac_branches.len()
                );
            }
        }
        if let Some(plan) = &options.fix_plan {
            if plan.u_src.len() != case.sources.len()
                || plan.u_ac.len() != case.ac_branches.len()
                || plan.u_dc.len() != case.dc_branches.len()
            {
                bail!("fixed plan does not match the case dimensions");
            }
        }
        let effective = effective_branches(case, kind, options.ac_scale.as_deref());
        let mut builder = ModelBuilder {
            case,
            series,
            kind,
            h_tangents: options.h_tangents.max(1),
            effective,
            prog: ConvexProgram::new(),
            vars: VariableCatalog::default(),
            tags: BTreeMap::new(),
        };
        builder.create_variables(options.fix_plan.as_ref());
        Ok(builder)
    }

    fn create_variables(&mut self, fix_plan: Option<&PlanValues>) {
        let t_count = self.series.len();
        let voltage = self.kind.has_voltages();
        let inf = f64::INFINITY;

        for (s, src) in self.case.sources.iter().enumerate() {
            let (lo, hi) = match fix_plan {
                Some(plan) => (plan.u_src[s], plan.u_src[s]),
                None => (src.u_min, src.u_max),
            };
            self.vars.u_src.push(self.prog.add_var(format!("u_src[{}]", src.id), lo, hi, 0.0));
        }
        for (l, br) in self.case.ac_branches.iter().enumerate() {
            let eff = &self.effective[l];
            let (lo, hi) = match fix_plan {
                Some(plan) => (plan.u_ac[l], plan.u_ac[l]),
                None => (eff.u_min, eff.u_max),
            };
            self.vars.u_ac.push(self.prog.add_var(format!("u_ac[{}]", br.id), lo, hi, 0.0));
        }
        for (l, br) in self.case.dc_branches.iter().enumerate() {
            let (lo, hi) = match fix_plan {
                Some(plan) => (plan.u_dc[l], plan.u_dc[l]),
                None => (br.u_min, br.u_max),
            };
            self.vars.u_dc.push(self.prog.add_var(format!("u_dc[{}]", br.id), lo, hi, 0.0));
        }

        for src in self.case.sources.iter() {
            let id = src.id;
            let is_storage = src.kind == SourceKind::Storage;
            let (mut beta, mut beta_su, mut p) = (Vec::new(), Vec::new(), Vec::new());
            let (mut q, mut p_chg, mut energy, mut p_in) =
                (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for t in 0..t_count {
                beta.push(self.prog.add_var(format!("beta[{id},{t}]"), 0.0, src.u_max, 0.0));
                beta_su.push(self.prog.add_var(format!("beta_su[{id},{t}]"), 0.0, inf, 0.0));
                let p_lo = (src.p_min * src.u_max).min(0.0);
                let p_hi = (src.p_max * src.u_max).max(0.0);
                p.push(self.prog.add_var(format!("p[{id},{t}]"), p_lo, p_hi, 0.0));
                q.push(if voltage {
                    let (q_lo, q_hi) = self.q_box(src);
                    Some(self.prog.add_var(format!("q[{id},{t}]"), q_lo, q_hi, 0.0))
                } else {
                    None
                });
                if is_storage {
                    let params = src.storage.as_ref().expect("validated storage source");
                    p_chg.push(Some(self.prog.add_var(
                        format!("p_chg[{id},{t}]"),
                        0.0,
                        (src.p_max * src.u_max).max(0.0),
                        0.0,
                    )));
                    energy.push(Some(self.prog.add_var(
                        format!("e[{id},{t}]"),
                        0.0,
                        params.e_max * src.u_max,
                        0.0,
                    )));
                    p_in.push(Some(self.prog.add_var(
                        format!("p_in[{id},{t}]"),
                        0.0,
                        self.series.inflow_max(id, t),
                        0.0,
                    )));
                } else {
                    p_chg.push(None);
                    energy.push(None);
                    p_in.push(None);
                }
            }
            self.vars.beta.push(beta);
            self.vars.beta_su.push(beta_su);
            self.vars.p.push(p);
            self.vars.q.push(q);
            self.vars.p_chg.push(p_chg);
            self.vars.energy.push(energy);
            self.vars.p_in.push(p_in);
        }

        for br in self.case.dc_branches.iter() {
            let id = br.id;
            let box_hi = br.p_max * br.u_max;
            let (mut fwd, mut bwd, mut from, mut to) =
                (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for t in 0..t_count {
                fwd.push(self.prog.add_var(format!("dc_fwd[{id},{t}]"), 0.0, box_hi, 0.0));
                bwd.push(self.prog.add_var(format!("dc_bwd[{id},{t}]"), 0.0, box_hi, 0.0));
                from.push(self.prog.add_var(format!("dc_from[{id},{t}]"), -box_hi, box_hi, 0.0));
                to.push(self.prog.add_var(format!("dc_to[{id},{t}]"), -box_hi, box_hi, 0.0));
            }
            self.vars.dc_fwd.push(fwd);
            self.vars.dc_bwd.push(bwd);
            self.vars.dc_from.push(from);
            self.vars.dc_to.push(to);
        }

        for (l, br) in self.case.ac_branches.iter().enumerate() {
            let id = br.id;
            let eff = &self.effective[l];
            let mut ac_p = Vec::new();
            let mut ac_loss = Vec::new();
            let mut ac_qdem = Vec::new();
            let (mut p_from, mut p_to, mut q_from, mut q_to) =
                (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            let mut cos_hat = Vec::new();
            for t in 0..t_count {
                match self.kind {
                    FormulationKind::Dc => {
                        let box_hi = eff.cap * eff.u_max;
                        ac_p.push(Some(self.prog.add_var(
                            format!("f[{id},{t}]"),
                            -box_hi,
                            box_hi,
                            0.0,
                        )));
                        ac_loss.push(None);
                    }
                    FormulationKind::DcLossy => {
                        let box_hi = eff.cap * eff.u_max;
                        ac_p.push(Some(self.prog.add_var(
                            format!("f[{id},{t}]"),
                            -box_hi,
                            box_hi,
                            0.0,
                        )));
                        ac_loss.push(Some(self.prog.add_var(
                            format!("f_loss[{id},{t}]"),
                            0.0,
                            inf,
                            0.0,
                        )));
                    }
                    FormulationKind::Lpac => {
                        ac_p.push(None);
                        ac_loss.push(None);
                        ac_qdem.push(None);
                        p_from.push(Some(self.prog.add_var(format!("pf[{id},{t}]"), -inf, inf, 0.0)));
                        p_to.push(Some(self.prog.add_var(format!("pt[{id},{t}]"), -inf, inf, 0.0)));
                        q_from.push(Some(self.prog.add_var(format!("qf[{id},{t}]"), -inf, inf, 0.0)));
                        q_to.push(Some(self.prog.add_var(format!("qt[{id},{t}]"), -inf, inf, 0.0)));
                        cos_hat.push(Some(self.prog.add_var(
                            format!("cos_hat[{id},{t}]"),
                            eff.theta_max.cos(),
                            1.0,
                            0.0,
                        )));
                    }
                    FormulationKind::Decoupled => {
                        ac_p.push(None);
                        ac_loss.push(Some(self.prog.add_var(
                            format!("f_loss[{id},{t}]"),
                            0.0,
                            inf,
                            0.0,
                        )));
                        ac_qdem.push(Some(self.prog.add_var(
                            format!("f_qdem[{id},{t}]"),
                            0.0,
                            inf,
                            0.0,
                        )));
                        p_from.push(Some(self.prog.add_var(format!("pf[{id},{t}]"), -inf, inf, 0.0)));
                        p_to.push(Some(self.prog.add_var(format!("pt[{id},{t}]"), -inf, inf, 0.0)));
                        q_from.push(Some(self.prog.add_var(format!("qf[{id},{t}]"), -inf, inf, 0.0)));
                        q_to.push(Some(self.prog.add_var(format!("qt[{id},{t}]"), -inf, inf, 0.0)));
                        cos_hat.push(None);
                    }
                }
            }
            self.vars.ac_p.push(ac_p);
            self.vars.ac_loss.push(ac_loss);
            self.vars.ac_qdem.push(ac_qdem);
            self.vars.ac_p_from.push(p_from);
            self.vars.ac_p_to.push(p_to);
            self.vars.ac_q_from.push(q_from);
            self.vars.ac_q_to.push(q_to);
            self.vars.cos_hat.push(cos_hat);
        }

        if voltage {
            // Pin one voltage angle per synchronous island via bounds so the
            // model has no free translation direction.
            let references = self.island_references();
            for (n, bus) in self.case.buses.iter().enumerate() {
                let id = bus.id;
                let (mut v, mut theta) = (Vec::new(), Vec::new());
                for t in 0..t_count {
                    v.push(Some(self.prog.add_var(format!("v[{id},{t}]"), 0.9, 1.1, 0.0)));
                    let (th_lo, th_hi) = if references.contains(&n) {
                        (0.0, 0.0)
                    } else {
                        (-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2)
                    };
                    theta.push(Some(self.prog.add_var(format!("th[{id},{t}]"), th_lo, th_hi, 0.0)));
                }
                self.vars.v.push(v);
                self.vars.theta.push(theta);
            }
        } else {
            self.vars.v = vec![vec![None; t_count]; self.case.buses.len()];
            self.vars.theta = vec![vec![None; t_count]; self.case.buses.len()];
        }
    }

    /// Reactive box per unit of installed capacity, blown up to the largest
    /// installable capacity (rows do the actual coupling).
    fn q_box(&self, src: &crate::netmodel::PowerSource) -> (f64, f64) {
        if let Some(link) = self.vsc_link(src) {
            let hi = self.case.dc_branches[link].p_max * self.case.dc_branches[link].u_max;
            return (-hi, hi);
        }
        let (lo, hi) = src.q_bounds();
        ((lo * src.u_max).min(0.0), (hi * src.u_max).max(0.0))
    }

    fn vsc_link(&self, src: &crate::netmodel::PowerSource) -> Option<usize> {
        let link_id = src.vsc_of?;
        self.case.dc_branches.iter().position(|l| l.id == link_id)
    }

    /// Lowest-id bus of every AC island, as positions into the bus vector.
    fn island_references(&self) -> BTreeSet<usize> {
        let n = self.case.buses.len();
        let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
        let incidence = build_incidence(self.case);
        for &(from, to) in &incidence.columns {
            adjacency[from].push(to);
            adjacency[to].push(from);
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| self.case.buses[i].id);
        let mut seen = vec![false; n];
        let mut refs = BTreeSet::new();
        for &root in &order {
            if seen[root] {
                continue;
            }
            refs.insert(root);
            seen[root] = true;
            let mut stack = vec![root];
            while let Some(i) = stack.pop() {
                for &j in &adjacency[i] {
                    if !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        refs
    }

    fn row(
        &mut self,
        tag: ConstraintTag,
        name: String,
        sense: Sense,
        rhs: f64,
        coeffs: &[(VarId, f64)],
    ) {
        self.prog.add_row(name, sense, rhs, coeffs);
        *self.tags.entry(tag).or_insert(0) += 1;
    }

    fn soc(
        &mut self,
        tag: ConstraintTag,
        name: String,
        args: Vec<(Vec<(VarId, f64)>, f64)>,
        bound: (Vec<(VarId, f64)>, f64),
    ) {
        self.prog.add_soc(name, args, bound);
        *self.tags.entry(tag).or_insert(0) += 1;
    }

    /// Annualized capital cost of capacity plus energy and startup cost of
    /// operation.
    pub fn build_objective(&mut self) {
        for (s, src) in self.case.sources.iter().enumerate() {
            self.prog.set_cost(self.vars.u_src[s], src.c);
            for t in 0..self.series.len() {
                self.prog.set_cost(self.vars.p[s][t], src.o * self.series.delta[t]);
                self.prog.set_cost(self.vars.beta_su[s][t], src.o_su);
            }
        }
        for (l, br) in self.case.ac_branches.iter().enumerate() {
            self.prog.set_cost(self.vars.u_ac[l], br.c);
        }
        for (l, br) in self.case.dc_branches.iter().enumerate() {
            self.prog.set_cost(self.vars.u_dc[l], br.c);
        }
    }

    /// Relaxed unit commitment: the online capacity is bounded by the
    /// installed capacity, changes at most by the startup amount, and wraps
    /// cyclically over the snapshot horizon.
    pub fn build_commitment_block(&mut self) {
        let t_count = self.series.len();
        for (s, src) in self.case.sources.iter().enumerate() {
            let id = src.id;
            for t in 0..t_count {
                self.row(
                    ConstraintTag::OnlineLimit,
                    format!("online_limit[{id},{t}]"),
                    Sense::Le,
                    0.0,
                    &[(self.vars.beta[s][t], 1.0), (self.vars.u_src[s], -1.0)],
                );
                if t > 0 {
                    self.row(
                        ConstraintTag::OnlineConsistency,
                        format!("online_consistency[{id},{t}]"),
                        Sense::Le,
                        0.0,
                        &[
                            (self.vars.beta[s][t], 1.0),
                            (self.vars.beta[s][t - 1], -1.0),
                            (self.vars.beta_su[s][t], -1.0),
                        ],
                    );
                }
            }
            if t_count > 0 {
                self.row(
                    ConstraintTag::OnlineBoundary,
                    format!("online_boundary[{id}]"),
                    Sense::Le,
                    0.0,
                    &[
                        (self.vars.beta[s][0], 1.0),
                        (self.vars.beta[s][t_count - 1], -1.0),
                        (self.vars.beta_su[s][0], -1.0),
                    ],
                );
            }
        }
    }

    /// Injection limits against online capacity; reactive boxes and the
    /// PQ-capability cuts in the voltage formulations.
    pub fn build_injection_block(&mut self) {
        let t_count = self.series.len();
        for (s, src) in self.case.sources.iter().enumerate() {
            let id = src.id;
            let vsc = self.vsc_link(src);
            for t in 0..t_count {
                let avail = self.series.availability(id, t);
                self.row(
                    ConstraintTag::PInjection,
                    format!("p_injection_lo[{id},{t}]"),
                    Sense::Ge,
                    0.0,
                    &[(self.vars.p[s][t], 1.0), (self.vars.beta[s][t], -src.p_min)],
                );
                self.row(
                    ConstraintTag::PInjection,
                    format!("p_injection_hi[{id},{t}]"),
                    Sense::Le,
                    0.0,
                    &[(self.vars.p[s][t], 1.0), (self.vars.beta[s][t], -avail * src.p_max)],
                );
                let Some(q) = self.vars.q[s][t] else { continue };
                if let Some(link) = vsc {
                    // Converter-station reactive capability follows the
                    // installed link capacity instead of the online state.
                    let p_max_link = self.case.dc_branches[link].p_max;
                    let u_link = self.vars.u_dc[link];
                    self.row(
                        ConstraintTag::QInjection,
                        format!("q_injection_lo[{id},{t}]"),
                        Sense::Ge,
                        0.0,
                        &[(q, 1.0), (u_link, p_max_link)],
                    );
                    self.row(
                        ConstraintTag::QInjection,
                        format!("q_injection_hi[{id},{t}]"),
                        Sense::Le,
                        0.0,
                        &[(q, 1.0), (u_link, -p_max_link)],
                    );
                } else {
                    let (q_lo, q_hi) = src.q_bounds();
                    self.row(
                        ConstraintTag::QInjection,
                        format!("q_injection_lo[{id},{t}]"),
                        Sense::Ge,
                        0.0,
                        &[(q, 1.0), (self.vars.beta[s][t], -q_lo)],
                    );
                    self.row(
                        ConstraintTag::QInjection,
                        format!("q_injection_hi[{id},{t}]"),
                        Sense::Le,
                        0.0,
                        &[(q, 1.0), (self.vars.beta[s][t], -q_hi)],
                    );
                }
                for (i, (tau, ups)) in src.capability.upper_lines().iter().enumerate() {
                    self.row(
                        ConstraintTag::PqUpper,
                        format!("pq_upper[{id},{t},{i}]"),
                        Sense::Le,
                        0.0,
                        &[
                            (self.vars.p[s][t], 1.0),
                            (q, -tau),
                            (self.vars.beta[s][t], -ups * src.p_max),
                        ],
                    );
                }
                for (i, (tau, ups)) in src.capability.lower_lines().iter().enumerate() {
                    self.row(
                        ConstraintTag::PqLower,
                        format!("pq_lower[{id},{t},{i}]"),
                        Sense::Ge,
                        0.0,
                        &[
                            (self.vars.p[s][t], 1.0),
                            (q, -tau),
                            (self.vars.beta[s][t], -ups * src.p_max),
                        ],
                    );
                }
            }
        }
    }

    /// Storage charging limits, the relaxed charge/discharge
    /// complementarity, state-of-charge limits and the cyclic state
    /// recursion.
    pub fn build_storage_block(&mut self) {
        let t_count = self.series.len();
        for (s, src) in self.case.sources.iter().enumerate() {
            if src.kind != SourceKind::Storage {
                continue;
            }
            let id = src.id;
            let params = src.storage.as_ref().expect("validated storage source");
            for t in 0..t_count {
                let p_chg = self.vars.p_chg[s][t].expect("storage charge variable");
                let energy = self.vars.energy[s][t].expect("storage energy variable");
                let p_in = self.vars.p_in[s][t].expect("storage inflow variable");
                self.row(
                    ConstraintTag::StorageCharging,
                    format!("storage_charging[{id},{t}]"),
                    Sense::Le,
                    0.0,
                    &[(p_chg, 1.0), (self.vars.beta[s][t], -src.p_max)],
                );
                self.row(
                    ConstraintTag::StorageComplementarity,
                    format!("storage_complementarity[{id},{t}]"),
                    Sense::Le,
                    0.0,
                    &[
                        (self.vars.p[s][t], 1.0),
                        (p_chg, 1.0),
                        (self.vars.beta[s][t], -src.p_max),
                    ],
                );
                self.row(
                    ConstraintTag::SocLimits,
                    format!("state_of_charge_limits[{id},{t}]"),
                    Sense::Le,
                    0.0,
                    &[(energy, 1.0), (self.vars.u_src[s], -params.e_max)],
                );
                let delta = self.series.delta[t];
                let prev = if t > 0 { t - 1 } else { t_count - 1 };
                let prev_energy = self.vars.energy[s][prev].expect("storage energy variable");
                let (tag, name) = if t > 0 {
                    (ConstraintTag::SocRecursion, format!("state_of_charge[{id},{t}]"))
                } else {
                    (ConstraintTag::SocCyclic, format!("state_of_charge_cyclic[{id}]"))
                };
                self.row(
                    tag,
                    name,
                    Sense::Eq,
                    0.0,
                    &[
                        (energy, 1.0),
                        (prev_energy, -1.0),
                        (p_chg, -delta * params.eta_chg),
                        (self.vars.p[s][t], delta / params.eta_dis),
                        (p_in, -delta),
                    ],
                );
            }
        }
    }

    /// Converter flows at both ends of every HVDC link with proportional
    /// losses, bounded by the installed link capacity.
    pub fn build_hvdc_block(&mut self) {
        let t_count = self.series.len();
        for (l, br) in self.case.dc_branches.iter().enumerate() {
            let id = br.id;
            let eta = br.loss_fraction();
            for t in 0..t_count {
                let fwd = self.vars.dc_fwd[l][t];
                let bwd = self.vars.dc_bwd[l][t];
                let from = self.vars.dc_from[l][t];
                let to = self.vars.dc_to[l][t];
                let u = self.vars.u_dc[l];
                self.row(
                    ConstraintTag::HvdcAlong,
                    format!("flow_hvdc_along[{id},{t}]"),
                    Sense::Eq,
                    0.0,
                    &[(from, 1.0), (fwd, -1.0), (bwd, 1.0 - eta)],
                );
                self.row(
                    ConstraintTag::HvdcAgainst,
                    format!("flow_hvdc_against[{id},{t}]"),
                    Sense::Eq,
                    0.0,
                    &[(to, 1.0), (bwd, -1.0), (fwd, 1.0 - eta)],
                );
                for (end_name, end) in [("from", from), ("to", to)] {
                    self.row(
                        ConstraintTag::HvdcLimit,
                        format!("flow_hvdc_limit_hi[{id},{t},{end_name}]"),
                        Sense::Le,
                        0.0,
                        &[(end, 1.0), (u, -br.p_max)],
                    );
                    self.row(
                        ConstraintTag::HvdcLimit,
                        format!("flow_hvdc_limit_lo[{id},{t},{end_name}]"),
                        Sense::Ge,
                        0.0,
                        &[(end, 1.0), (u, br.p_max)],
                    );
                }
            }
        }
    }

    /// Terms every nodal active-power balance shares: source injections
    /// minus storage charging minus HVDC withdrawals.
    fn balance_base_p(&self, t: usize) -> Vec<Vec<(VarId, f64)>> {
        let bus_index = self.case.bus_index();
        let mut terms: Vec<Vec<(VarId, f64)>> = vec![Vec::new(); self.case.buses.len()];
        for (s, src) in self.case.sources.iter().enumerate() {
            let n = bus_index[&src.bus];
            terms[n].push((self.vars.p[s][t], 1.0));
            if let Some(p_chg) = self.vars.p_chg[s][t] {
                terms[n].push((p_chg, -1.0));
            }
        }
        for (l, br) in self.case.dc_branches.iter().enumerate() {
            terms[bus_index[&br.from_bus]].push((self.vars.dc_from[l][t], -1.0));
            terms[bus_index[&br.to_bus]].push((self.vars.dc_to[l][t], -1.0));
        }
        terms
    }

    fn push_balance_rows(&mut self, tag: ConstraintTag, t: usize, terms: Vec<Vec<(VarId, f64)>>) {
        for (n, coeffs) in terms.into_iter().enumerate() {
            let bus = self.case.buses[n].id;
            let rhs = self.series.load_p(bus, t);
            self.row(tag, format!("{}[{bus},{t}]", tag.as_str()), Sense::Eq, rhs, &coeffs);
        }
    }

    fn push_q_balance_rows(&mut self, tag: ConstraintTag, t: usize, mut terms: Vec<Vec<(VarId, f64)>>) {
        let bus_index = self.case.bus_index();
        for (s, src) in self.case.sources.iter().enumerate() {
            if let Some(q) = self.vars.q[s][t] {
                terms[bus_index[&src.bus]].push((q, 1.0));
            }
        }
        for (n, coeffs) in terms.into_iter().enumerate() {
            let bus = self.case.buses[n].id;
            let rhs = self.series.load_q(bus, t);
            self.row(tag, format!("{}[{bus},{t}]", tag.as_str()), Sense::Eq, rhs, &coeffs);
        }
    }

    /// Lossless network flows: cycle-based KVL, thermal and angle-derived
    /// flow limits, nodal balances.
    pub fn build_dc_flow(&mut self) {
        let basis = build_cycle_basis(self.case);
        let bus_index = self.case.bus_index();
        for t in 0..self.series.len() {
            for (l, br) in self.case.ac_branches.iter().enumerate() {
                let id = br.id;
                let eff = self.effective[l].clone();
                let p = self.vars.ac_p[l][t].expect("dc flow variable");
                let u = self.vars.u_ac[l];
                self.row(
                    ConstraintTag::ThermalLimitDc,
                    format!("thermal_limit_dc_hi[{id},{t}]"),
                    Sense::Le,
                    0.0,
                    &[(p, 1.0), (u, -eff.cap)],
                );
                self.row(
                    ConstraintTag::ThermalLimitDc,
                    format!("thermal_limit_dc_lo[{id},{t}]"),
                    Sense::Ge,
                    0.0,
                    &[(p, 1.0), (u, eff.cap)],
                );
                let angle_cap = eff.theta_max / eff.x;
                self.row(
                    ConstraintTag::AngleFlowLimitDc,
                    format!("voltage_angle_difference_dc_hi[{id},{t}]"),
                    Sense::Le,
                    angle_cap,
                    &[(p, 1.0)],
                );
                self.row(
                    ConstraintTag::AngleFlowLimitDc,
                    format!("voltage_angle_difference_dc_lo[{id},{t}]"),
                    Sense::Ge,
                    -angle_cap,
                    &[(p, 1.0)],
                );
            }
            for (c, cycle) in basis.cycles.iter().enumerate() {
                let coeffs: Vec<(VarId, f64)> = cycle
                    .iter()
                    .map(|&(l, sign)| {
                        let p = self.vars.ac_p[l][t].expect("dc flow variable");
                        (p, sign as f64 * self.effective[l].x)
                    })
                    .collect();
                self.row(ConstraintTag::Kvl, format!("kvl[{c},{t}]"), Sense::Eq, 0.0, &coeffs);
            }
            let mut terms = self.balance_base_p(t);
            for (l, br) in self.case.ac_branches.iter().enumerate() {
                let p = self.vars.ac_p[l][t].expect("dc flow variable");
                terms[bus_index[&br.from_bus]].push((p, -1.0));
                terms[bus_index[&br.to_bus]].push((p, 1.0));
            }
            self.push_balance_rows(ConstraintTag::NodalBalancePDc, t, terms);
        }
    }

    /// Like [`build_dc_flow`] but with a piecewise-linear lower envelope of
    /// the quadratic series losses, loss-aware thermal limits, and half the
    /// branch losses charged to each terminal bus.
    pub fn build_dc_lossy_flow(&mut self) {
        let basis = build_cycle_basis(self.case);
        let bus_index = self.case.bus_index();
        let h_tangents = self.h_tangents;
        for t in 0..self.series.len() {
            for (l, br) in self.case.ac_branches.iter().enumerate() {
                let id = br.id;
                let eff = self.effective[l].clone();
                let p = self.vars.ac_p[l][t].expect("dc flow variable");
                let loss = self.vars.ac_loss[l][t].expect("dc loss variable");
                let u = self.vars.u_ac[l];
                for (i, p0) in tangent_points(eff.cap * eff.u_max, h_tangents).into_iter().enumerate()
                {
                    // First-order expansion of r p^2 around p0, as a lower
                    // cut: loss >= r p0 (2 p - p0).
                    self.row(
                        ConstraintTag::LossTangent,
                        format!("losses_p_dc[{id},{t},{i}]"),
                        Sense::Ge,
                        -eff.r * p0 * p0,
                        &[(loss, 1.0), (p, -2.0 * eff.r * p0)],
                    );
                }
                self.row(
                    ConstraintTag::ThermalLimitDcLossy,
                    format!("thermal_limit_dc_lossy_hi[{id},{t}]"),
                    Sense::Le,
                    0.0,
                    &[(p, 1.0), (loss, 1.0), (u, -eff.cap)],
                );
                self.row(
                    ConstraintTag::ThermalLimitDcLossy,
                    format!("thermal_limit_dc_lossy_lo[{id},{t}]"),
                    Sense::Le,
                    0.0,
                    &[(p, -1.0), (loss, 1.0), (u, -eff.cap)],
                );
                let angle_cap = eff.theta_max / eff.x;
                self.row(
                    ConstraintTag::AngleFlowLimitDc,
                    format!("voltage_angle_difference_dc_hi[{id},{t}]"),
                    Sense::Le,
                    angle_cap,
                    &[(p, 1.0)],
                );
                self.row(
                    ConstraintTag::AngleFlowLimitDc,
                    format!("voltage_angle_difference_dc_lo[{id},{t}]"),
                    Sense::Ge,
                    -angle_cap,
                    &[(p, 1.0)],
                );
            }
            for (c, cycle) in basis.cycles.iter().enumerate() {
                let coeffs: Vec<(VarId, f64)> = cycle
                    .iter()
                    .map(|&(l, sign)| {
                        let p = self.vars.ac_p[l][t].expect("dc flow variable");
                        (p, sign as f64 * self.effective[l].x)
                    })
                    .collect();
                self.row(ConstraintTag::Kvl, format!("kvl[{c},{t}]"), Sense::Eq, 0.0, &coeffs);
            }
            let mut terms = self.balance_base_p(t);
            for (l, br) in self.case.ac_branches.iter().enumerate() {
                let p = self.vars.ac_p[l][t].expect("dc flow variable");
                let loss = self.vars.ac_loss[l][t].expect("dc loss variable");
                terms[bus_index[&br.from_bus]].push((p, -1.0));
                terms[bus_index[&br.from_bus]].push((loss, -0.5));
                terms[bus_index[&br.to_bus]].push((p, 1.0));
                terms[bus_index[&br.to_bus]].push((loss, -0.5));
            }
            self.push_balance_rows(ConstraintTag::NodalBalancePDcLossy, t, terms);
        }
    }

    fn angle_limit_rows(&mut self, l: usize, t: usize) {
        let br = &self.case.ac_branches[l];
        let id = br.id;
        let bus_index = self.case.bus_index();
        let th_n = self.vars.theta[bus_index[&br.from_bus]][t].expect("angle variable");
        let th_m = self.vars.theta[bus_index[&br.to_bus]][t].expect("angle variable");
        let theta_max = self.effective[l].theta_max;
        self.row(
            ConstraintTag::VoltageAngleDifference,
            format!("voltage_angle_difference_hi[{id},{t}]"),
            Sense::Le,
            theta_max,
            &[(th_n, 1.0), (th_m, -1.0)],
        );
        self.row(
            ConstraintTag::VoltageAngleDifference,
            format!("voltage_angle_difference_lo[{id},{t}]"),
            Sense::Ge,
            -theta_max,
            &[(th_n, 1.0), (th_m, -1.0)],
        );
    }

    /// Linearized AC flow equations with a shared cosine surrogate per
    /// branch, conic cosine relaxation, apparent-power thermal cones, and
    /// both nodal balances.
    pub fn build_lpac_flow(&mut self) {
        let bus_index = self.case.bus_index();
        for t in 0..self.series.len() {
            for (l, br) in self.case.ac_branches.iter().enumerate() {
                let id = br.id;
                let eff = self.effective[l].clone();
                let (g, b, b_sh) = (eff.g, eff.b, eff.b_sh);
                let n = bus_index[&br.from_bus];
                let m = bus_index[&br.to_bus];
                let v_n = self.vars.v[n][t].expect("voltage variable");
                let v_m = self.vars.v[m][t].expect("voltage variable");
                let th_n = self.vars.theta[n][t].expect("angle variable");
                let th_m = self.vars.theta[m][t].expect("angle variable");
                let p_from = self.vars.ac_p_from[l][t].expect("end flow variable");
                let p_to = self.vars.ac_p_to[l][t].expect("end flow variable");
                let q_from = self.vars.ac_q_from[l][t].expect("end flow variable");
                let q_to = self.vars.ac_q_to[l][t].expect("end flow variable");
                let cos_hat = self.vars.cos_hat[l][t].expect("cosine surrogate variable");
                let u = self.vars.u_ac[l];

                // p = g (v_n - v_m) + g (1 - cos_hat) - b (th_n - th_m)
                self.row(
                    ConstraintTag::LpacFlowP,
                    format!("lpac_p_from[{id},{t}]"),
                    Sense::Eq,
                    g,
                    &[
                        (p_from, 1.0),
                        (v_n, -g),
                        (v_m, g),
                        (cos_hat, g),
                        (th_n, b),
                        (th_m, -b),
                    ],
                );
                self.row(
                    ConstraintTag::LpacFlowP,
                    format!("lpac_p_to[{id},{t}]"),
                    Sense::Eq,
                    g,
                    &[
                        (p_to, 1.0),
                        (v_m, -g),
                        (v_n, g),
                        (cos_hat, g),
                        (th_m, b),
                        (th_n, -b),
                    ],
                );
                // q = -(b_sh/2)(2 v - 1) - b (v_n - v_m) - b (1 - cos_hat)
                //     - g (th_n - th_m)
                self.row(
                    ConstraintTag::LpacFlowQ,
                    format!("lpac_q_from[{id},{t}]"),
                    Sense::Eq,
                    b_sh / 2.0 - b,
                    &[
                        (q_from, 1.0),
                        (v_n, b_sh + b),
                        (v_m, -b),
                        (cos_hat, -b),
                        (th_n, g),
                        (th_m, -g),
                    ],
                );
                self.row(
                    ConstraintTag::LpacFlowQ,
                    format!("lpac_q_to[{id},{t}]"),
                    Sense::Eq,
                    b_sh / 2.0 - b,
                    &[
                        (q_to, 1.0),
                        (v_m, b_sh + b),
                        (v_n, -b),
                        (cos_hat, -b),
                        (th_m, g),
                        (th_n, -g),
                    ],
                );
                // cos_hat <= 1 - k theta^2 as a rotated-cone style bound:
                // || (2 sqrt(k) theta, (1 - cos_hat) - 1) || <= (1 - cos_hat) + 1.
                let sk = 2.0 * cosine_cut_curvature(eff.theta_max).sqrt();
                self.soc(
                    ConstraintTag::CosineRelaxation,
                    format!("cosine_relaxation[{id},{t}]"),
                    vec![
                        (vec![(th_n, sk), (th_m, -sk)], 0.0),
                        (vec![(cos_hat, -1.0)], 0.0),
                    ],
                    (vec![(cos_hat, -1.0)], 2.0),
                );
                for (end_name, p_end, q_end) in [("from", p_from, q_from), ("to", p_to, q_to)] {
                    self.soc(
                        ConstraintTag::ThermalLimit,
                        format!("thermal_limit[{id},{t},{end_name}]"),
                        vec![(vec![(p_end, 1.0)], 0.0), (vec![(q_end, 1.0)], 0.0)],
                        (vec![(u, eff.cap)], 0.0),
                    );
                }
                self.angle_limit_rows(l, t);
            }
            let mut p_terms = self.balance_base_p(t);
            let mut q_terms: Vec<Vec<(VarId, f64)>> = vec![Vec::new(); self.case.buses.len()];
            for (l, br) in self.case.ac_branches.iter().enumerate() {
                let n = bus_index[&br.from_bus];
                let m = bus_index[&br.to_bus];
                p_terms[n].push((self.vars.ac_p_from[l][t].unwrap(), -1.0));
                p_terms[m].push((self.vars.ac_p_to[l][t].unwrap(), -1.0));
                q_terms[n].push((self.vars.ac_q_from[l][t].unwrap(), -1.0));
                q_terms[m].push((self.vars.ac_q_to[l][t].unwrap(), -1.0));
            }
            self.push_balance_rows(ConstraintTag::NodalBalanceP, t, p_terms);
            self.push_q_balance_rows(ConstraintTag::NodalBalanceQ, t, q_terms);
        }
    }

    /// Decoupled active/reactive flow equations with conic envelopes for
    /// series losses and series reactive demand, loss-aware apparent-power
    /// cones, and both nodal balances.
    pub fn build_decoupled_flow(&mut self) {
        let bus_index = self.case.bus_index();
        for t in 0..self.series.len() {
            for (l, br) in self.case.ac_branches.iter().enumerate() {
                let id = br.id;
                let eff = self.effective[l].clone();
                let (g, b, b_sh) = (eff.g, eff.b, eff.b_sh);
                let n = bus_index[&br.from_bus];
                let m = bus_index[&br.to_bus];
                let v_n = self.vars.v[n][t].expect("voltage variable");
                let v_m = self.vars.v[m][t].expect("voltage variable");
                let th_n = self.vars.theta[n][t].expect("angle variable");
                let th_m = self.vars.theta[m][t].expect("angle variable");
                let p_from = self.vars.ac_p_from[l][t].expect("end flow variable");
                let p_to = self.vars.ac_p_to[l][t].expect("end flow variable");
                let q_from = self.vars.ac_q_from[l][t].expect("end flow variable");
                let q_to = self.vars.ac_q_to[l][t].expect("end flow variable");
                let loss = self.vars.ac_loss[l][t].expect("loss variable");
                let qdem = self.vars.ac_qdem[l][t].expect("reactive demand variable");
                let u = self.vars.u_ac[l];

                // p = g (v_n - v_m) - b (th_n - th_m)
                self.row(
                    ConstraintTag::DecoupledFlowP,
                    format!("decoupled_p_from[{id},{t}]"),
                    Sense::Eq,
                    0.0,
                    &[(p_from, 1.0), (v_n, -g), (v_m, g), (th_n, b), (th_m, -b)],
                );
                self.row(
                    ConstraintTag::DecoupledFlowP,
                    format!("decoupled_p_to[{id},{t}]"),
                    Sense::Eq,
                    0.0,
                    &[(p_to, 1.0), (v_m, -g), (v_n, g), (th_m, b), (th_n, -b)],
                );
                // q = -(b_sh/2)(2 v - 1) - b (v_n - v_m) - g (th_n - th_m)
                self.row(
                    ConstraintTag::DecoupledFlowQ,
                    format!("decoupled_q_from[{id},{t}]"),
                    Sense::Eq,
                    b_sh / 2.0,
                    &[(q_from, 1.0), (v_n, b_sh + b), (v_m, -b), (th_n, g), (th_m, -g)],
                );
                self.row(
                    ConstraintTag::DecoupledFlowQ,
                    format!("decoupled_q_to[{id},{t}]"),
                    Sense::Eq,
                    b_sh / 2.0,
                    &[(q_to, 1.0), (v_m, b_sh + b), (v_n, -b), (th_m, g), (th_n, -g)],
                );
                // g theta^2 <= loss <= g theta_max^2 (series losses), and
                // -b theta^2 <= qdem <= -b theta_max^2 (series reactive
                // demand). Lower envelopes are conic; uppers are rows.
                if g > 0.0 {
                    let sg = 2.0 * g.sqrt();
                    self.soc(
                        ConstraintTag::DecoupledPLoss,
                        format!("decoupled_p_losses_lo[{id},{t}]"),
                        vec![
                            (vec![(th_n, sg), (th_m, -sg)], 0.0),
                            (vec![(loss, 1.0)], -1.0),
                        ],
                        (vec![(loss, 1.0)], 1.0),
                    );
                }
                self.row(
                    ConstraintTag::DecoupledPLoss,
                    format!("decoupled_p_losses_hi[{id},{t}]"),
                    Sense::Le,
                    g * eff.theta_max * eff.theta_max,
                    &[(loss, 1.0)],
                );
                if -b > 0.0 {
                    let sb = 2.0 * (-b).sqrt();
                    self.soc(
                        ConstraintTag::DecoupledQDem,
                        format!("decoupled_q_losses_lo[{id},{t}]"),
                        vec![
                            (vec![(th_n, sb), (th_m, -sb)], 0.0),
                            (vec![(qdem, 1.0)], -1.0),
                        ],
                        (vec![(qdem, 1.0)], 1.0),
                    );
                }
                self.row(
                    ConstraintTag::DecoupledQDem,
                    format!("decoupled_q_losses_hi[{id},{t}]"),
                    Sense::Le,
                    -b * eff.theta_max * eff.theta_max,
                    &[(qdem, 1.0)],
                );
                for (end_name, p_end, q_end) in [("from", p_from, q_from), ("to", p_to, q_to)] {
                    self.soc(
                        ConstraintTag::ThermalLimitDecoupled,
                        format!("thermal_limit_decoupled[{id},{t},{end_name}]"),
                        vec![
                            (vec![(p_end, 1.0), (loss, 1.0)], 0.0),
                            (vec![(q_end, 1.0), (qdem, 1.0)], 0.0),
                        ],
                        (vec![(u, eff.cap)], 0.0),
                    );
                }
                self.angle_limit_rows(l, t);
            }
            let mut p_terms = self.balance_base_p(t);
            let mut q_terms: Vec<Vec<(VarId, f64)>> = vec![Vec::new(); self.case.buses.len()];
            for (l, br) in self.case.ac_branches.iter().enumerate() {
                let n = bus_index[&br.from_bus];
                let m = bus_index[&br.to_bus];
                let loss = self.vars.ac_loss[l][t].unwrap();
                let qdem = self.vars.ac_qdem[l][t].unwrap();
                p_terms[n].push((self.vars.ac_p_from[l][t].unwrap(), -1.0));
                p_terms[m].push((self.vars.ac_p_to[l][t].unwrap(), -1.0));
                p_terms[n].push((loss, -0.5));
                p_terms[m].push((loss, -0.5));
                q_terms[n].push((self.vars.ac_q_from[l][t].unwrap(), -1.0));
                q_terms[m].push((self.vars.ac_q_to[l][t].unwrap(), -1.0));
                q_terms[n].push((qdem, -0.5));
                q_terms[m].push((qdem, -0.5));
            }
            self.push_balance_rows(ConstraintTag::NodalBalancePDecoupled, t, p_terms);
            self.push_q_balance_rows(ConstraintTag::NodalBalanceQDecoupled, t, q_terms);
        }
    }

    pub fn finish(self) -> Model {
        Model {
            kind: self.kind,
            prog: self.prog,
            vars: self.vars,
            tag_counts: self.tags,
            effective: self.effective,
        }
    }
}

/// Objective decomposition of a solved model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveParts {
    pub capital: f64,
    pub operating: f64,
    pub startup: f64,
}

impl ObjectiveParts {
    pub fn total(&self) -> f64 {
        self.capital + self.operating + self.startup
    }
}

/// The solved model unpacked into plan, dispatch and flow tables.
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub plan: PlanValues,
    pub dispatch: Vec<DispatchRow>,
    pub flows: Vec<FlowRow>,
    pub parts: ObjectiveParts,
    pub objective: f64,
}

/// Unpack a solver point into domain tables. The point must belong to a
/// model built from the same case and series.
pub fn extract_outcome(
    model: &Model,
    case: &NetworkCase,
    series: &SnapshotSeries,
    x: &[f64],
) -> SolveOutcome {
    let vars = &model.vars;
    let value = |v: VarId| x[v.0];
    let opt_value = |v: Option<VarId>| v.map(|v| x[v.0]);

    let plan = PlanValues {
        u_src: vars.u_src.iter().map(|&v| value(v)).collect(),
        u_ac: vars.u_ac.iter().map(|&v| value(v)).collect(),
        u_dc: vars.u_dc.iter().map(|&v| value(v)).collect(),
    };

    let mut capital = 0.0;
    for (s, src) in case.sources.iter().enumerate() {
        capital += src.c * plan.u_src[s];
    }
    for (l, br) in case.ac_branches.iter().enumerate() {
        capital += br.c * plan.u_ac[l];
    }
    for (l, br) in case.dc_branches.iter().enumerate() {
        capital += br.c * plan.u_dc[l];
    }

    let mut operating = 0.0;
    let mut startup = 0.0;
    let mut dispatch = Vec::new();
    for (s, src) in case.sources.iter().enumerate() {
        for t in 0..series.len() {
            let p = value(vars.p[s][t]);
            let beta_su = value(vars.beta_su[s][t]);
            operating += src.o * p * series.delta[t];
            startup += src.o_su * beta_su;
            dispatch.push(DispatchRow {
                source: src.id,
                t,
                p,
                q: opt_value(vars.q[s][t]).unwrap_or(0.0),
                beta: value(vars.beta[s][t]),
                beta_su,
                p_charge: opt_value(vars.p_chg[s][t]),
                energy: opt_value(vars.energy[s][t]),
                inflow: opt_value(vars.p_in[s][t]),
            });
        }
    }

    let bus_index = case.bus_index();
    let mut flows = Vec::new();
    for (l, br) in case.ac_branches.iter().enumerate() {
        let eff = &model.effective[l];
        for t in 0..series.len() {
            let row = match model.kind {
                FormulationKind::Dc => {
                    let p = value(vars.ac_p[l][t].unwrap());
                    FlowRow {
                        branch: br.id,
                        kind: BranchKind::Ac,
                        t,
                        p_from: p,
                        q_from: 0.0,
                        p_to: -p,
                        q_to: 0.0,
                        p_loss: 0.0,
                        q_dem: 0.0,
                        cos_hat: None,
                        theta: Some(eff.x * p),
                        v_from: None,
                        theta_from: None,
                        v_to: None,
                        theta_to: None,
                    }
                }
                FormulationKind::DcLossy => {
                    let p = value(vars.ac_p[l][t].unwrap());
                    let loss = value(vars.ac_loss[l][t].unwrap());
                    FlowRow {
                        branch: br.id,
                        kind: BranchKind::Ac,
                        t,
                        p_from: p + loss / 2.0,
                        q_from: 0.0,
                        p_to: -p + loss / 2.0,
                        q_to: 0.0,
                        p_loss: loss,
                        q_dem: 0.0,
                        cos_hat: None,
                        theta: Some(eff.x * p),
                        v_from: None,
                        theta_from: None,
                        v_to: None,
                        theta_to: None,
                    }
                }
                FormulationKind::Lpac | FormulationKind::Decoupled => {
                    let n = bus_index[&br.from_bus];
                    let m = bus_index[&br.to_bus];
                    let p_from = value(vars.ac_p_from[l][t].unwrap());
                    let p_to = value(vars.ac_p_to[l][t].unwrap());
                    let q_from = value(vars.ac_q_from[l][t].unwrap());
                    let q_to = value(vars.ac_q_to[l][t].unwrap());
                    let th_n = value(vars.theta[n][t].unwrap());
                    let th_m = value(vars.theta[m][t].unwrap());
                    let (p_loss, q_dem) = match model.kind {
                        FormulationKind::Lpac => (p_from + p_to, q_from + q_to),
                        _ => (
                            value(vars.ac_loss[l][t].unwrap()),
                            value(vars.ac_qdem[l][t].unwrap()),
                        ),
                    };
                    FlowRow {
                        branch: br.id,
                        kind: BranchKind::Ac,
                        t,
                        p_from,
                        q_from,
                        p_to,
                        q_to,
                        p_loss,
                        q_dem,
                        cos_hat: opt_value(vars.cos_hat[l][t]),
                        theta: Some(th_n - th_m),
                        v_from: Some(value(vars.v[n][t].unwrap())),
                        theta_from: Some(th_n),
                        v_to: Some(value(vars.v[m][t].unwrap())),
                        theta_to: Some(th_m),
                    }
                }
            };
            flows.push(row);
        }
    }
    for (l, br) in case.dc_branches.iter().enumerate() {
        for t in 0..series.len() {
            let p_from = value(vars.dc_from[l][t]);
            let p_to = value(vars.dc_to[l][t]);
            flows.push(FlowRow {
                branch: br.id,
                kind: BranchKind::Dc,
                t,
                p_from,
                q_from: 0.0,
                p_to,
                q_to: 0.0,
                p_loss: p_from + p_to,
                q_dem: 0.0,
                cos_hat: None,
                theta: None,
                v_from: None,
                theta_from: None,
                v_to: None,
                theta_to: None,
            });
        }
    }

    let parts = ObjectiveParts { capital, operating, startup };
    SolveOutcome { plan, dispatch, flows, parts, objective: parts.total() }
}
