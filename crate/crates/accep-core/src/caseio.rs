//! Case files and result artifacts.
//!
//! A case is a single schema-versioned JSON document; results are a fixed
//! set of six files (three CSV tables, two JSON documents, one audit table)
//! whose numbers are written with 17 significant digits so that a written
//! bundle reads back bit-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::netmodel::{self, NetworkCase, SnapshotSeries};

pub const CASE_SCHEMA_VERSION: u32 = 1;

/// On-disk case document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseFile {
    pub schema_version: u32,
    pub network: NetworkCase,
    pub snapshots: SnapshotsDef,
}

/// Snapshot section of a case document. Reactive demand may be given
/// explicitly or derived from a demand power factor.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotsDef {
    pub delta: Vec<f64>,
    #[serde(default)]
    pub d_p: BTreeMap<u32, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_q: Option<BTreeMap<u32, Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demand_cos_phi: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub availability: BTreeMap<u32, Vec<f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub inflow_max: BTreeMap<u32, Vec<f64>>,
}

impl SnapshotsDef {
    pub fn into_series(self) -> Result<SnapshotSeries> {
        let d_q = match (self.d_q, self.demand_cos_phi) {
            (Some(_), Some(_)) => {
                bail!("snapshots carry both d_q and demand_cos_phi; give one or the other")
            }
            (Some(d_q), None) => d_q,
            (None, Some(cos_phi)) => netmodel::derive_reactive_loads(&self.d_p, cos_phi)?,
            (None, None) => BTreeMap::new(),
        };
        Ok(SnapshotSeries {
            delta: self.delta,
            d_p: self.d_p,
            d_q,
            availability: self.availability,
            inflow_max: self.inflow_max,
        })
    }
}

/// A validated case together with its snapshot series.
#[derive(Debug, Clone)]
pub struct CaseBundle {
    pub network: NetworkCase,
    pub series: SnapshotSeries,
}

/// Read, parse, and validate a case file. Any violation is an error here;
/// callers that want the full violation list should run the netmodel
/// validators themselves.
pub fn load_case(path: &Path) -> Result<CaseBundle> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading case file {}", path.display()))?;
    let file: CaseFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing case file {}", path.display()))?;
    if file.schema_version != CASE_SCHEMA_VERSION {
        bail!(
            "case file {} has schema_version {}, this build reads version {}",
            path.display(),
            file.schema_version,
            CASE_SCHEMA_VERSION
        );
    }
    let series = file.snapshots.into_series()?;
    let mut violations = netmodel::validate_case(&file.network);
    violations.extend(netmodel::validate_series(&file.network, &series));
    if !violations.is_empty() {
        let listing: Vec<String> = violations.iter().map(|v| format!("  - {v}")).collect();
        bail!("case {} failed validation:\n{}", path.display(), listing.join("\n"));
    }
    Ok(CaseBundle { network: file.network, series })
}

// ---------------------------------------------------------------------------
// Result bundle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Source,
    AcBranch,
    DcBranch,
}

impl ElementKind {
    fn as_str(self) -> &'static str {
        match self {
            ElementKind::Source => "source",
            ElementKind::AcBranch => "ac_branch",
            ElementKind::DcBranch => "dc_branch",
        }
    }
}

/// One expansion decision: installed number of circuits / units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub element: u32,
    pub kind: ElementKind,
    pub u: f64,
}

/// Dispatch of one source in one snapshot. Storage-only columns stay empty
/// for other source kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchRow {
    pub source: u32,
    pub t: usize,
    pub p: f64,
    pub q: f64,
    pub beta: f64,
    pub beta_su: f64,
    pub p_charge: Option<f64>,
    pub energy: Option<f64>,
    pub inflow: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    Ac,
    Dc,
}

impl BranchKind {
    fn as_str(self) -> &'static str {
        match self {
            BranchKind::Ac => "ac",
            BranchKind::Dc => "dc",
        }
    }
}

/// Flow state of one branch in one snapshot. Columns that a particular
/// approximation does not model stay empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRow {
    pub branch: u32,
    pub kind: BranchKind,
    pub t: usize,
    pub p_from: f64,
    pub q_from: f64,
    pub p_to: f64,
    pub q_to: f64,
    pub p_loss: f64,
    pub q_dem: f64,
    pub cos_hat: Option<f64>,
    pub theta: Option<f64>,
    pub v_from: Option<f64>,
    pub theta_from: Option<f64>,
    pub v_to: Option<f64>,
    pub theta_to: Option<f64>,
}

/// Objective breakdown plus solve diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSummary {
    pub objective: f64,
    pub capital_cost: f64,
    pub operating_cost: f64,
    pub startup_cost: f64,
    pub approximation: String,
    pub scp_iterations: usize,
    pub scp_delta: f64,
    pub converged: bool,
    pub angle_blocked_branches: Vec<u32>,
}

/// Loss-audit record for one branch and snapshot: the model's loss against
/// the physically required lower bound at the reported operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossAuditRow {
    pub branch: u32,
    pub t: usize,
    pub model_loss: f64,
    pub lower_bound: f64,
    pub slack: f64,
    pub fictitious: bool,
    pub theta_abs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReinforceAction {
    Redispatch,
    Reinforce,
}

/// Capacity added to one element while repairing a snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanIncrement {
    pub element: u32,
    pub kind: ElementKind,
    pub delta_u: f64,
}

/// What happened while repairing one failing snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReinforcementEvent {
    pub t: usize,
    pub action: ReinforceAction,
    pub increments: Vec<PlanIncrement>,
    pub objective_delta: f64,
}

/// Full record of the feasibility-restoration pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReinforcementLog {
    /// Snapshot indices that failed the initial screening.
    pub screened: Vec<usize>,
    pub events: Vec<ReinforcementEvent>,
    pub certified: bool,
    /// Worst power-flow mismatch over all certified snapshots.
    pub max_residual: f64,
    pub redispatch_up: f64,
    pub redispatch_down: f64,
    pub capital_delta: f64,
    pub operating_delta: f64,
    pub startup_delta: f64,
    pub initial_objective: f64,
    pub final_objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultBundle {
    pub plan: Vec<PlanRow>,
    pub dispatch: Vec<DispatchRow>,
    pub flows: Vec<FlowRow>,
    pub objective: ObjectiveSummary,
    pub loss_audit: Vec<LossAuditRow>,
    pub reinforcement: Option<ReinforcementLog>,
}

impl ResultBundle {
    /// Installed capacity keyed by element.
    pub fn plan_map(&self) -> BTreeMap<(ElementKind, u32), f64> {
        self.plan.iter().map(|row| ((row.kind, row.element), row.u)).collect()
    }

    pub fn dispatch_at(&self, t: usize) -> Vec<&DispatchRow> {
        self.dispatch.iter().filter(|row| row.t == t).collect()
    }

    pub fn flows_at(&self, t: usize) -> Vec<&FlowRow> {
        self.flows.iter().filter(|row| row.t == t).collect()
    }
}

const PLAN_HEADERS: [&str; 3] = ["element", "kind", "u"];
const DISPATCH_HEADERS: [&str; 9] =
    ["source", "t", "p", "q", "beta", "beta_su", "p_charge", "energy", "inflow"];
const FLOW_HEADERS: [&str; 15] = [
    "branch", "kind", "t", "p_from", "q_from", "p_to", "q_to", "p_loss", "q_dem", "cos_hat",
    "theta", "v_from", "theta_from", "v_to", "theta_to",
];
const LOSS_AUDIT_HEADERS: [&str; 7] =
    ["branch", "t", "model_loss", "lower_bound", "slack", "fictitious", "theta_abs"];

/// 17 significant digits: enough to reproduce any f64 bit pattern on read.
fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

/// Write the full result file set into `dir` (created if needed).
pub fn write_results(bundle: &ResultBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;

    let mut plan = csv_writer(&dir.join("plan.csv"), &PLAN_HEADERS)?;
    for row in &bundle.plan {
        plan.write_record([row.element.to_string(), row.kind.as_str().into(), fmt_num(row.u)])?;
    }
    plan.flush()?;

    let mut dispatch = csv_writer(&dir.join("dispatch.csv"), &DISPATCH_HEADERS)?;
    for row in &bundle.dispatch {
        dispatch.write_record([
            row.source.to_string(),
            row.t.to_string(),
            fmt_num(row.p),
            fmt_num(row.q),
            fmt_num(row.beta),
            fmt_num(row.beta_su),
            fmt_opt(row.p_charge),
            fmt_opt(row.energy),
            fmt_opt(row.inflow),
        ])?;
    }
    dispatch.flush()?;

    let mut flows = csv_writer(&dir.join("flows.csv"), &FLOW_HEADERS)?;
    for row in &bundle.flows {
        flows.write_record([
            row.branch.to_string(),
            row.kind.as_str().into(),
            row.t.to_string(),
            fmt_num(row.p_from),
            fmt_num(row.q_from),
            fmt_num(row.p_to),
            fmt_num(row.q_to),
            fmt_num(row.p_loss),
            fmt_num(row.q_dem),
            fmt_opt(row.cos_hat),
            fmt_opt(row.theta),
            fmt_opt(row.v_from),
            fmt_opt(row.theta_from),
            fmt_opt(row.v_to),
            fmt_opt(row.theta_to),
        ])?;
    }
    flows.flush()?;

    let mut audit = csv_writer(&dir.join("loss_audit.csv"), &LOSS_AUDIT_HEADERS)?;
    for row in &bundle.loss_audit {
        audit.write_record([
            row.branch.to_string(),
            row.t.to_string(),
            fmt_num(row.model_loss),
            fmt_num(row.lower_bound),
            fmt_num(row.slack),
            row.fictitious.to_string(),
            fmt_num(row.theta_abs),
        ])?;
    }
    audit.flush()?;

    write_json(&dir.join("objective.json"), &bundle.objective)?;
    write_json(&dir.join("reinforcement_log.json"), &bundle.reinforcement)?;
    Ok(())
}

/// Read a result file set written by [`write_results`].
pub fn read_results(dir: &Path) -> Result<ResultBundle> {
    Ok(ResultBundle {
        plan: read_csv(&dir.join("plan.csv"))?,
        dispatch: read_csv(&dir.join("dispatch.csv"))?,
        flows: read_csv(&dir.join("flows.csv"))?,
        objective: read_json(&dir.join("objective.json"))?,
        loss_audit: read_csv(&dir.join("loss_audit.csv"))?,
        reinforcement: read_json(&dir.join("reinforcement_log.json"))?,
    })
}

fn csv_writer(path: &Path, headers: &[&str]) -> Result<csv::Writer<fs::File>> {
    let mut wtr = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    wtr.write_record(headers)?;
    Ok(wtr)
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let rows: std::result::Result<Vec<T>, _> = rdr.deserialize().collect();
    rows.with_context(|| format!("reading {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("reading {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit;

    fn sample_bundle() -> ResultBundle {
        ResultBundle {
            plan: vec![
                PlanRow { element: 1, kind: ElementKind::Source, u: 1.0 / 3.0 },
                PlanRow { element: 4, kind: ElementKind::AcBranch, u: std::f64::consts::PI },
                PlanRow { element: 9, kind: ElementKind::DcBranch, u: 1e-300 },
            ],
            dispatch: vec![
                DispatchRow {
                    source: 1,
                    t: 0,
                    p: 0.1 + 0.2,
                    q: -0.0,
                    beta: 1.0,
                    beta_su: 0.0,
                    p_charge: None,
                    energy: None,
                    inflow: None,
                },
                DispatchRow {
                    source: 4,
                    t: 1,
                    p: -0.25,
                    q: 0.125,
                    beta: 0.5,
                    beta_su: 0.5,
                    p_charge: Some(2.0f64.sqrt()),
                    energy: Some(1.75),
                    inflow: Some(0.0),
                },
            ],
            flows: vec![FlowRow {
                branch: 2,
                kind: BranchKind::Ac,
                t: 0,
                p_from: 0.7,
                q_from: 0.01,
                p_to: -0.69,
                q_to: 0.02,
                p_loss: 0.01,
                q_dem: 0.03,
                cos_hat: Some(0.999),
                theta: Some(0.05),
                v_from: Some(1.02),
                theta_from: Some(0.0),
                v_to: Some(1.01),
                theta_to: Some(-0.05),
            }],
            objective: ObjectiveSummary {
                objective: 123.456789012345678,
                capital_cost: 100.0,
                operating_cost: 23.0,
                startup_cost: 0.456789012345678,
                approximation: "dc".into(),
                scp_iterations: 3,
                scp_delta: 0.0123,
                converged: true,
                angle_blocked_branches: vec![4],
            },
            loss_audit: vec![LossAuditRow {
                branch: 2,
                t: 0,
                model_loss: 0.01,
                lower_bound: 0.009,
                slack: 0.001,
                fictitious: false,
                theta_abs: 0.05,
            }],
            reinforcement: Some(ReinforcementLog {
                screened: vec![1, 3],
                events: vec![ReinforcementEvent {
                    t: 1,
                    action: ReinforceAction::Reinforce,
                    increments: vec![PlanIncrement {
                        element: 4,
                        kind: ElementKind::AcBranch,
                        delta_u: 0.5,
                    }],
                    objective_delta: 40.0,
                }],
                certified: true,
                max_residual: 3.2e-9,
                redispatch_up: 0.4,
                redispatch_down: 0.1,
                capital_delta: 40.0,
                operating_delta: 2.5,
                startup_delta: 0.0,
                initial_objective: 123.456789012345678,
                final_objective: 165.956789012345678,
            }),
        }
    }

    #[test]
    fn results_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = sample_bundle();
        write_results(&bundle, dir.path()).unwrap();
        let back = read_results(dir.path()).unwrap();
        assert_eq!(bundle, back);
        // Spot-check the awkward numbers really did survive digit-for-digit.
        assert_eq!(back.plan[0].u.to_bits(), (1.0f64 / 3.0).to_bits());
        assert_eq!(back.plan[2].u.to_bits(), 1e-300f64.to_bits());
        assert_eq!(back.dispatch[0].p.to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn empty_bundle_writes_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = ResultBundle {
            plan: Vec::new(),
            dispatch: Vec::new(),
            flows: Vec::new(),
            objective: sample_bundle().objective,
            loss_audit: Vec::new(),
            reinforcement: None,
        };
        write_results(&bundle, dir.path()).unwrap();
        for name in ["plan.csv", "dispatch.csv", "flows.csv", "loss_audit.csv"] {
            let text = fs::read_to_string(dir.path().join(name)).unwrap();
            assert_eq!(text.lines().count(), 1, "{name} should be headers only");
        }
        let log = fs::read_to_string(dir.path().join("reinforcement_log.json")).unwrap();
        assert_eq!(log.trim(), "null");
        let back = read_results(dir.path()).unwrap();
        assert!(back.plan.is_empty() && back.flows.is_empty());
        assert!(back.reinforcement.is_none());
    }

    #[test]
    fn bundled_five_bus_case_loads() {
        let bundle = load_case(&testkit::cases_dir().join("case5.json")).unwrap();
        assert_eq!(bundle.network.buses.len(), 5);
        assert_eq!(bundle.network.ac_branches.len(), 6);
        assert_eq!(bundle.series.len(), 4);
        // Reactive demand is derived from the demand power factor.
        let d_p = bundle.series.load_p(2, 0);
        let d_q = bundle.series.load_q(2, 0);
        assert!(d_p > 0.0);
        assert!((d_q / d_p - 0.14249).abs() < 1e-4);
    }

    #[test]
    fn misspelled_keys_are_named() {
        let text = r#"{
            "schema_version": 1,
            "network": {
                "mva_base": 100.0,
                "frequnecy": 50.0,
                "buses": [],
                "ac_branches": [],
                "dc_branches": [],
                "sources": []
            },
            "snapshots": { "delta": [1.0] }
        }"#;
        let err = serde_json::from_str::<CaseFile>(text).unwrap_err();
        assert!(err.to_string().contains("frequnecy"), "got: {err}");
    }

    #[test]
    fn parse_errors_carry_line_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.json");
        fs::write(&path, "{\n  \"schema_version\": 1,\n}").unwrap();
        let err = load_case(&path).unwrap_err();
        let chain = format!("{err:#}");
        assert!(chain.contains("line"), "got: {chain}");
        assert!(chain.contains("column"), "got: {chain}");
    }

    #[test]
    fn future_schema_versions_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let source = fs::read_to_string(testkit::cases_dir().join("case5.json")).unwrap();
        let mut file: serde_json::Value = serde_json::from_str(&source).unwrap();
        file["schema_version"] = serde_json::json!(2);
        let path = dir.path().join("case.json");
        fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        let err = load_case(&path).unwrap_err();
        assert!(format!("{err:#}").contains("schema_version"));
    }

    #[test]
    fn series_length_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let source = fs::read_to_string(testkit::cases_dir().join("case5.json")).unwrap();
        let mut file: serde_json::Value = serde_json::from_str(&source).unwrap();
        file["snapshots"]["delta"] = serde_json::json!([1.0, 1.0, 1.0]);
        let path = dir.path().join("case.json");
        fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        let err = load_case(&path).unwrap_err();
        assert!(format!("{err:#}").contains("length"), "got: {err:#}");
    }

    #[test]
    fn explicit_and_derived_reactive_demand_conflict() {
        let def = SnapshotsDef {
            delta: vec![1.0],
            d_p: BTreeMap::from([(1, vec![1.0])]),
            d_q: Some(BTreeMap::from([(1, vec![0.1])])),
            demand_cos_phi: Some(0.99),
            availability: BTreeMap::new(),
            inflow_max: BTreeMap::new(),
        };
        assert!(def.into_series().is_err());
    }
}
