//! Domain types for the electrical network: buses, branches, power sources,
//! storage, capability curves and snapshot time series.
//!
//! Everything is stored per-unit on a single case-wide MVA base. The model is
//! immutable after validation and safe to share read-only across workers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

/// An electrical bus. The voltage class is informational only.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bus {
    pub id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voltage_class: Option<String>,
}

/// An HVAC branch with per-circuit impedance and rating. `u_min`/`u_max`
/// bound the (continuous) number of parallel circuits.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcBranch {
    pub id: u32,
    pub from_bus: u32,
    pub to_bus: u32,
    /// Series resistance per circuit (p.u.).
    pub r: f64,
    /// Series reactance per circuit (p.u.).
    pub x: f64,
    /// Total shunt susceptance per circuit (p.u.), split across both ends.
    #[serde(default)]
    pub b_sh: f64,
    /// Thermal rating per circuit (p.u.).
    pub f_max: f64,
    /// Maximum loading fraction of the thermal rating, in (0, 1].
    #[serde(default = "default_loading_limit")]
    pub a: f64,
    /// Voltage angle difference limit (radians).
    #[serde(default = "default_theta_max")]
    pub theta_max: f64,
    pub u_min: f64,
    pub u_max: f64,
    /// Capital cost per circuit per year.
    #[serde(default)]
    pub c: f64,
    /// Route length, used for expansion reporting (capacity x length).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_km: Option<f64>,
}

fn default_loading_limit() -> f64 {
    1.0
}

fn default_theta_max() -> f64 {
    std::f64::consts::FRAC_PI_2
}

impl AcBranch {
    /// Series admittance g + jb = 1/(r + jx) of a single circuit.
    pub fn admittance(&self) -> (f64, f64) {
        let denom = self.r * self.r + self.x * self.x;
        (self.r / denom, -self.x / denom)
    }
}

/// HVDC converter technology. Voltage-source converters can additionally
/// provide reactive power at their terminals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConverterKind {
    LineCommutating,
    VoltageSource,
}

/// A point-to-point HVDC link. Losses are a constant fraction of the
/// transferred power; if `eta` is absent it is derived from the length at
/// 3% per 1000 km.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcBranch {
    pub id: u32,
    pub from_bus: u32,
    pub to_bus: u32,
    /// Transfer rating per circuit (p.u.).
    pub p_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_km: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    pub converter_kind: ConverterKind,
    pub u_min: f64,
    pub u_max: f64,
    #[serde(default)]
    pub c: f64,
}

impl DcBranch {
    /// Loss fraction of the link. Explicit `eta` wins over the length rule.
    pub fn loss_fraction(&self) -> f64 {
        match self.eta {
            Some(eta) => eta,
            None => self.length_km.map_or(0.0, |km| 0.03 * km / 1000.0),
        }
    }
}

/// Class of a power source. Synchronous generators and inverter-based
/// resources share the commitment relaxation; storage adds an energy state;
/// compensators inject reactive power only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Sg,
    Ibr,
    Storage,
    Compensator,
}

/// Storage-only parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageParams {
    /// Energy capacity per unit of installed capacity (p.u. h).
    pub e_max: f64,
    /// Discharging efficiency, in (0, 1].
    pub eta_dis: f64,
    /// Charging efficiency, in (0, 1].
    pub eta_chg: f64,
}

/// PQ-capability of a power source: a convex polytope cut out of the
/// (p, q) box by half-planes `p <= tau q + upsilon p_max` (upper) and
/// `p >= tau q + upsilon p_max` (lower). Presets carry their own q range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CapabilityCurve {
    /// Synchronous generator d-curve: two upper cuts, q in [-0.4, 0.6].
    DCurve,
    /// Inverters that trade active for reactive headroom near p = 0.
    UShape,
    /// Fixed-power-factor wedge |q| <= p tan(phi).
    Triangle { cos_phi: f64 },
    /// Plain box; the full q range is available at any p.
    Rectangle,
    /// Explicit half-planes; the q range comes from the source fields.
    Custom {
        #[serde(default)]
        upper_lines: Vec<(f64, f64)>,
        #[serde(default)]
        lower_lines: Vec<(f64, f64)>,
    },
}

impl CapabilityCurve {
    /// Half-planes limiting p from above: p <= tau q + upsilon p_max.
    pub fn upper_lines(&self) -> Vec<(f64, f64)> {
        match self {
            CapabilityCurve::DCurve => vec![(0.5, 1.0), (-1.0 / 3.0, 1.0)],
            CapabilityCurve::UShape
            | CapabilityCurve::Triangle { .. }
            | CapabilityCurve::Rectangle => Vec::new(),
            CapabilityCurve::Custom { upper_lines, .. } => upper_lines.clone(),
        }
    }

    /// Half-planes limiting p from below: p >= tau q + upsilon p_max.
    pub fn lower_lines(&self) -> Vec<(f64, f64)> {
        match self {
            CapabilityCurve::DCurve | CapabilityCurve::Rectangle => Vec::new(),
            CapabilityCurve::UShape => vec![(0.5, 0.0), (-0.5, 0.0)],
            CapabilityCurve::Triangle { cos_phi } => {
                let tan_phi = cos_phi.acos().tan();
                vec![(1.0 / tan_phi, 0.0), (-1.0 / tan_phi, 0.0)]
            }
            CapabilityCurve::Custom { lower_lines, .. } => lower_lines.clone(),
        }
    }

    /// Reactive range (per unit of capacity) implied by the preset, if any.
    pub fn preset_q_range(&self) -> Option<(f64, f64)> {
        match self {
            CapabilityCurve::DCurve => Some((-0.4, 0.6)),
            CapabilityCurve::UShape | CapabilityCurve::Rectangle => Some((-0.4, 0.4)),
            CapabilityCurve::Triangle { cos_phi } => {
                let tan_phi = cos_phi.acos().tan();
                Some((-tan_phi, tan_phi))
            }
            CapabilityCurve::Custom { .. } => None,
        }
    }
}

/// A dispatchable or variable power source (generator, inverter plant,
/// storage unit or compensation device) with continuous capacity `u`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerSource {
    pub id: u32,
    pub bus: u32,
    pub kind: SourceKind,
    /// Injection limits per unit of capacity (p.u.).
    pub p_min: f64,
    pub p_max: f64,
    /// Reactive limits per unit of capacity; default from the capability
    /// preset when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_max: Option<f64>,
    pub capability: CapabilityCurve,
    pub u_min: f64,
    pub u_max: f64,
    /// Capital cost per unit of capacity per year.
    #[serde(default)]
    pub c: f64,
    /// Marginal cost per unit of energy.
    #[serde(default)]
    pub o: f64,
    /// Startup cost per unit brought online.
    #[serde(default)]
    pub o_su: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storage: Option<StorageParams>,
    /// For converter-station compensators: the HVDC branch whose capacity
    /// bounds the reactive injection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vsc_of: Option<u32>,
}

impl PowerSource {
    /// Resolved reactive bounds per unit of capacity.
    pub fn q_bounds(&self) -> (f64, f64) {
        match (self.q_min, self.q_max) {
            (Some(lo), Some(hi)) => (lo, hi),
            _ => match self.capability.preset_q_range() {
                Some((lo, hi)) => (self.q_min.unwrap_or(lo), self.q_max.unwrap_or(hi)),
                None => (self.q_min.unwrap_or(0.0), self.q_max.unwrap_or(0.0)),
            },
        }
    }
}

/// Static description of the planning case.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkCase {
    #[serde(default)]
    pub name: String,
    pub mva_base: f64,
    pub buses: Vec<Bus>,
    #[serde(default)]
    pub ac_branches: Vec<AcBranch>,
    #[serde(default)]
    pub dc_branches: Vec<DcBranch>,
    #[serde(default)]
    pub sources: Vec<PowerSource>,
}

impl NetworkCase {
    /// Bus id -> position in `buses`.
    pub fn bus_index(&self) -> BTreeMap<u32, usize> {
        self.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect()
    }

    pub fn source_index(&self) -> BTreeMap<u32, usize> {
        self.sources.iter().enumerate().map(|(i, s)| (s.id, i)).collect()
    }

    pub fn ac_branch_index(&self) -> BTreeMap<u32, usize> {
        self.ac_branches.iter().enumerate().map(|(i, l)| (l.id, i)).collect()
    }

    pub fn dc_branch_index(&self) -> BTreeMap<u32, usize> {
        self.dc_branches.iter().enumerate().map(|(i, l)| (l.id, i)).collect()
    }
}

/// Ordered operating snapshots with durations, loads, availabilities and
/// storage inflows. Maps are keyed by bus/source id; missing entries fall
/// back to zero load, full availability and zero inflow.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotSeries {
    /// Duration of each snapshot in hours.
    pub delta: Vec<f64>,
    #[serde(default)]
    pub d_p: BTreeMap<u32, Vec<f64>>,
    #[serde(default)]
    pub d_q: BTreeMap<u32, Vec<f64>>,
    #[serde(default)]
    pub availability: BTreeMap<u32, Vec<f64>>,
    #[serde(default)]
    pub inflow_max: BTreeMap<u32, Vec<f64>>,
}

impl SnapshotSeries {
    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    pub fn load_p(&self, bus: u32, t: usize) -> f64 {
        self.d_p.get(&bus).map_or(0.0, |v| v[t])
    }

    pub fn load_q(&self, bus: u32, t: usize) -> f64 {
        self.d_q.get(&bus).map_or(0.0, |v| v[t])
    }

    pub fn availability(&self, source: u32, t: usize) -> f64 {
        self.availability.get(&source).map_or(1.0, |v| v[t])
    }

    pub fn inflow_max(&self, source: u32, t: usize) -> f64 {
        self.inflow_max.get(&source).map_or(0.0, |v| v[t])
    }
}

/// One failed structural invariant, tied to the element that broke it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub element: String,
    pub message: String,
}

impl Violation {
    fn new(element: impl Into<String>, message: impl Into<String>) -> Self {
        Violation { element: element.into(), message: message.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.element, self.message)
    }
}

/// Check every structural invariant of the case. Returns all violations
/// found (empty means the case is well-formed); never aborts early.
pub fn validate_case(case: &NetworkCase) -> Vec<Violation> {
    let mut out = Vec::new();

    if !(case.mva_base > 0.0 && case.mva_base.is_finite()) {
        out.push(Violation::new("case", format!("mva_base must be positive (got {})", case.mva_base)));
    }

    let mut bus_ids = BTreeSet::new();
    for bus in &case.buses {
        if !bus_ids.insert(bus.id) {
            out.push(Violation::new(format!("bus {}", bus.id), "duplicate bus id"));
        }
    }

    let mut ac_ids = BTreeSet::new();
    for br in &case.ac_branches {
        let el = format!("ac_branch {}", br.id);
        if !ac_ids.insert(br.id) {
            out.push(Violation::new(&el, "duplicate branch id"));
        }
        for bus in [br.from_bus, br.to_bus] {
            if !bus_ids.contains(&bus) {
                out.push(Violation::new(&el, format!("references unknown bus {bus}")));
            }
        }
        if br.from_bus == br.to_bus {
            out.push(Violation::new(&el, "from_bus equals to_bus"));
        }
        if !(br.x > 0.0) {
            out.push(Violation::new(&el, format!("x must be positive (got {})", br.x)));
        }
        if !(br.r >= 0.0) {
            out.push(Violation::new(&el, format!("r must be nonnegative (got {})", br.r)));
        }
        if !(br.b_sh >= 0.0) {
            out.push(Violation::new(&el, format!("b_sh must be nonnegative (got {})", br.b_sh)));
        }
        if !(br.f_max > 0.0) {
            out.push(Violation::new(&el, format!("f_max must be positive (got {})", br.f_max)));
        }
        if !(br.a > 0.0 && br.a <= 1.0) {
            out.push(Violation::new(&el, format!("loading limit a must be in (0, 1] (got {})", br.a)));
        }
        if !(br.theta_max > 0.0 && br.theta_max <= std::f64::consts::FRAC_PI_2) {
            out.push(Violation::new(&el, format!("theta_max must be in (0, pi/2] (got {})", br.theta_max)));
        }
        if !(0.0 <= br.u_min && br.u_min <= br.u_max) {
            out.push(Violation::new(&el, format!("need 0 <= u_min <= u_max (got {} and {})", br.u_min, br.u_max)));
        }
        if !(br.c >= 0.0) {
            out.push(Violation::new(&el, format!("capital cost must be nonnegative (got {})", br.c)));
        }
        if let Some(km) = br.length_km {
            if !(km >= 0.0) {
                out.push(Violation::new(&el, format!("length_km must be nonnegative (got {km})")));
            }
        }
        if br.x > 0.0 {
            let (g, b) = br.admittance();
            if !(g >= 0.0 && b <= 0.0) {
                out.push(Violation::new(&el, format!("admittance must satisfy g >= 0, b <= 0 (got g={g}, b={b})")));
            }
        }
    }

    let mut dc_ids = BTreeSet::new();
    for br in &case.dc_branches {
        let el = format!("dc_branch {}", br.id);
        if !dc_ids.insert(br.id) {
            out.push(Violation::new(&el, "duplicate branch id"));
        }
        for bus in [br.from_bus, br.to_bus] {
            if !bus_ids.contains(&bus) {
                out.push(Violation::new(&el, format!("references unknown bus {bus}")));
            }
        }
        if br.from_bus == br.to_bus {
            out.push(Violation::new(&el, "from_bus equals to_bus"));
        }
        if !(br.p_max > 0.0) {
            out.push(Violation::new(&el, format!("p_max must be positive (got {})", br.p_max)));
        }
        let eta = br.loss_fraction();
        if !(0.0..1.0).contains(&eta) {
            out.push(Violation::new(&el, format!("loss fraction must be in [0, 1) (got {eta})")));
        }
        if !(0.0 <= br.u_min && br.u_min <= br.u_max) {
            out.push(Violation::new(&el, format!("need 0 <= u_min <= u_max (got {} and {})", br.u_min, br.u_max)));
        }
        if !(br.c >= 0.0) {
            out.push(Violation::new(&el, format!("capital cost must be nonnegative (got {})", br.c)));
        }
    }

    let mut source_ids = BTreeSet::new();
    for s in &case.sources {
        let el = format!("source {}", s.id);
        if !source_ids.insert(s.id) {
            out.push(Violation::new(&el, "duplicate source id"));
        }
        if !bus_ids.contains(&s.bus) {
            out.push(Violation::new(&el, format!("references unknown bus {}", s.bus)));
        }
        if !(s.p_min <= s.p_max) {
            out.push(Violation::new(&el, format!("need p_min <= p_max (got {} and {})", s.p_min, s.p_max)));
        }
        let (q_lo, q_hi) = s.q_bounds();
        if !(q_lo <= q_hi) {
            out.push(Violation::new(&el, format!("need q_min <= q_max (got {q_lo} and {q_hi})")));
        }
        if let Some((preset_lo, preset_hi)) = s.capability.preset_q_range() {
            if let Some(q_min) = s.q_min {
                if (q_min - preset_lo).abs() > 1e-12 {
                    out.push(Violation::new(&el, format!("q_min {q_min} conflicts with capability preset range ({preset_lo})")));
                }
            }
            if let Some(q_max) = s.q_max {
                if (q_max - preset_hi).abs() > 1e-12 {
                    out.push(Violation::new(&el, format!("q_max {q_max} conflicts with capability preset range ({preset_hi})")));
                }
            }
        }
        if let CapabilityCurve::Triangle { cos_phi } = s.capability {
            if !(cos_phi > 0.0 && cos_phi < 1.0) {
                out.push(Violation::new(&el, format!("triangle cos_phi must be in (0, 1) (got {cos_phi})")));
            }
        }
        if !(0.0 <= s.u_min && s.u_min <= s.u_max) {
            out.push(Violation::new(&el, format!("need 0 <= u_min <= u_max (got {} and {})", s.u_min, s.u_max)));
        }
        for (label, value) in [("c", s.c), ("o", s.o), ("o_su", s.o_su)] {
            if !(value >= 0.0) {
                out.push(Violation::new(&el, format!("cost {label} must be nonnegative (got {value})")));
            }
        }
        match (&s.storage, s.kind) {
            (Some(st), SourceKind::Storage) => {
                if !(st.eta_dis > 0.0 && st.eta_dis <= 1.0) {
                    out.push(Violation::new(&el, format!("eta_dis must be in (0, 1] (got {})", st.eta_dis)));
                }
                if !(st.eta_chg > 0.0 && st.eta_chg <= 1.0) {
                    out.push(Violation::new(&el, format!("eta_chg must be in (0, 1] (got {})", st.eta_chg)));
                }
                if !(st.e_max >= 0.0) {
                    out.push(Violation::new(&el, format!("e_max must be nonnegative (got {})", st.e_max)));
                }
            }
            (Some(_), _) => out.push(Violation::new(&el, "storage parameters on a non-storage source")),
            (None, SourceKind::Storage) => out.push(Violation::new(&el, "storage source lacks storage parameters")),
            (None, _) => {}
        }
        if let Some(link) = s.vsc_of {
            match case.dc_branches.iter().find(|l| l.id == link) {
                None => out.push(Violation::new(&el, format!("vsc_of references unknown dc branch {link}"))),
                Some(l) if l.converter_kind != ConverterKind::VoltageSource => {
                    out.push(Violation::new(&el, format!("vsc_of references dc branch {link} without voltage-source converters")));
                }
                Some(l) => {
                    if s.bus != l.from_bus && s.bus != l.to_bus {
                        out.push(Violation::new(&el, format!("vsc_of branch {link} does not terminate at bus {}", s.bus)));
                    }
                }
            }
        }
        if s.p_min <= s.p_max && q_lo <= q_hi && capability_vertices(s).is_empty() {
            out.push(Violation::new(&el, "capability polytope is empty at full commitment"));
        }
    }

    // The AC grid may split into several synchronous islands (HVDC links may
    // join them), but nothing may be electrically unreachable altogether.
    if !case.buses.is_empty() {
        let idx = case.bus_index();
        let n = case.buses.len();
        let mut adj = vec![Vec::new(); n];
        let link = |a: u32, b: u32, adj: &mut Vec<Vec<usize>>| {
            if let (Some(&i), Some(&j)) = (idx.get(&a), idx.get(&b)) {
                adj[i].push(j);
                adj[j].push(i);
            }
        };
        for br in &case.ac_branches {
            link(br.from_bus, br.to_bus, &mut adj);
        }
        for br in &case.dc_branches {
            link(br.from_bus, br.to_bus, &mut adj);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        for (i, bus) in case.buses.iter().enumerate() {
            if !seen[i] {
                out.push(Violation::new(
                    format!("bus {}", bus.id),
                    format!("unreachable from bus {} (no AC or DC path)", case.buses[0].id),
                ));
            }
        }
    }

    out
}

/// Check the snapshot series against the case: all series must have length
/// T, reference existing elements and stay within their domains.
pub fn validate_series(case: &NetworkCase, series: &SnapshotSeries) -> Vec<Violation> {
    let mut out = Vec::new();
    let t_len = series.len();
    if t_len == 0 {
        out.push(Violation::new("snapshots", "at least one snapshot is required"));
    }
    for (t, &dt) in series.delta.iter().enumerate() {
        if !(dt > 0.0 && dt.is_finite()) {
            out.push(Violation::new("snapshots", format!("delta[{t}] must be positive (got {dt})")));
        }
    }
    let bus_ids: BTreeSet<u32> = case.buses.iter().map(|b| b.id).collect();
    let source_ids: BTreeSet<u32> = case.sources.iter().map(|s| s.id).collect();
    let check_len = |name: &str, key: u32, len: usize, out: &mut Vec<Violation>| {
        if len != t_len {
            out.push(Violation::new(
                format!("{name} {key}"),
                format!("series length {len} does not match snapshot count {t_len}"),
            ));
        }
    };
    for (key, vals) in &series.d_p {
        if !bus_ids.contains(key) {
            out.push(Violation::new(format!("load_p {key}"), "references unknown bus"));
        }
        check_len("load_p", *key, vals.len(), &mut out);
    }
    for (key, vals) in &series.d_q {
        if !bus_ids.contains(key) {
            out.push(Violation::new(format!("load_q {key}"), "references unknown bus"));
        }
        check_len("load_q", *key, vals.len(), &mut out);
    }
    for (key, vals) in &series.availability {
        if !source_ids.contains(key) {
            out.push(Violation::new(format!("availability {key}"), "references unknown source"));
        }
        check_len("availability", *key, vals.len(), &mut out);
        for (t, &v) in vals.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                out.push(Violation::new(
                    format!("availability {key}"),
                    format!("value at snapshot {t} must be in [0, 1] (got {v})"),
                ));
            }
        }
    }
    for (key, vals) in &series.inflow_max {
        if !source_ids.contains(key) {
            out.push(Violation::new(format!("inflow_max {key}"), "references unknown source"));
        }
        check_len("inflow_max", *key, vals.len(), &mut out);
        for (t, &v) in vals.iter().enumerate() {
            if !(v >= 0.0) {
                out.push(Violation::new(
                    format!("inflow_max {key}"),
                    format!("value at snapshot {t} must be nonnegative (got {v})"),
                ));
            }
        }
    }
    out
}

/// Reactive loads from active loads at a fixed inductive power factor:
/// d_q = d_p * tan(arccos(cos_phi)).
pub fn derive_reactive_loads(
    d_p: &BTreeMap<u32, Vec<f64>>,
    cos_phi: f64,
) -> anyhow::Result<BTreeMap<u32, Vec<f64>>> {
    if !(cos_phi > 0.0 && cos_phi <= 1.0) {
        anyhow::bail!("power factor must be in (0, 1], got {cos_phi}");
    }
    let tan_phi = cos_phi.acos().tan();
    Ok(d_p
        .iter()
        .map(|(&bus, vals)| (bus, vals.iter().map(|d| d * tan_phi).collect()))
        .collect())
}

/// Attach converter-station compensators for every voltage-source HVDC
/// link: one reactive-only source at each endpoint whose injection the
/// formulations bound by the link capacity p_max * u_l. Idempotent.
pub fn attach_vsc_compensators(case: &NetworkCase) -> NetworkCase {
    let mut out = case.clone();
    let mut next_id = case.sources.iter().map(|s| s.id + 1).max().unwrap_or(0);
    for br in &case.dc_branches {
        if br.converter_kind != ConverterKind::VoltageSource {
            continue;
        }
        for bus in [br.from_bus, br.to_bus] {
            let exists = out
                .sources
                .iter()
                .any(|s| s.vsc_of == Some(br.id) && s.bus == bus);
            if exists {
                continue;
            }
            out.sources.push(PowerSource {
                id: next_id,
                bus,
                kind: SourceKind::Compensator,
                p_min: 0.0,
                p_max: 0.0,
                q_min: Some(-1.0),
                q_max: Some(1.0),
                capability: CapabilityCurve::Custom { upper_lines: Vec::new(), lower_lines: Vec::new() },
                u_min: 1.0,
                u_max: 1.0,
                c: 0.0,
                o: 0.0,
                o_su: 0.0,
                storage: None,
                vsc_of: Some(br.id),
            });
            next_id += 1;
        }
    }
    out
}

/// Vertices of the capability polytope at full commitment (beta = 1,
/// availability 1): the feasible (p, q) region cut from the p/q boxes by
/// the capability half-planes. Used for validation and rating checks.
pub fn capability_vertices(source: &PowerSource) -> Vec<(f64, f64)> {
    let (q_lo, q_hi) = source.q_bounds();
    // Half-planes as n . (p, q) <= rhs.
    let mut planes: Vec<(f64, f64, f64)> = vec![
        (1.0, 0.0, source.p_max),
        (-1.0, 0.0, -source.p_min),
        (0.0, 1.0, q_hi),
        (0.0, -1.0, -q_lo),
    ];
    for (tau, upsilon) in source.capability.upper_lines() {
        planes.push((1.0, -tau, upsilon * source.p_max));
    }
    for (tau, upsilon) in source.capability.lower_lines() {
        planes.push((-1.0, tau, -upsilon * source.p_max));
    }

    let tol = 1e-9;
    let mut vertices: Vec<(f64, f64)> = Vec::new();
    for i in 0..planes.len() {
        for j in (i + 1)..planes.len() {
            let (a1, b1, c1) = planes[i];
            let (a2, b2, c2) = planes[j];
            let det = a1 * b2 - a2 * b1;
            if det.abs() < 1e-12 {
                continue;
            }
            let p = (c1 * b2 - c2 * b1) / det;
            let q = (a1 * c2 - a2 * c1) / det;
            if planes.iter().all(|&(a, b, c)| a * p + b * q <= c + tol) {
                if !vertices.iter().any(|&(vp, vq)| (vp - p).abs() < tol && (vq - q).abs() < tol) {
                    vertices.push((p, q));
                }
            }
        }
    }
    vertices
}
