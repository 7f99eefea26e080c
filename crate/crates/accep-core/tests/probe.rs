use std::collections::BTreeMap;
use std::path::PathBuf;

use accep_core::caseio;
use accep_core::formulation::FormulationKind;
use accep_core::scp::{run_scp, ScpOptions};

fn fixture(name: &str) -> (accep_core::netmodel::NetworkCase, accep_core::netmodel::SnapshotSeries) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../cases").join(name);
    let bundle = caseio::load_case(&path).expect("fixture loads");
    (bundle.network, bundle.series)
}

#[test]
fn probe_case24_dc() {
    let (case, series) = fixture("case24.json");
    let run = run_scp(&case, &series, FormulationKind::Dc, &ScpOptions::default()).expect("dc");
    println!("iterations:");
    for it in &run.iterations {
        println!("  k={} objective={:.4} delta={:.4}", it.iter, it.objective, it.delta);
    }
    println!("branch u (only > u_min + 1e-6):");
    for (l, br) in case.ac_branches.iter().enumerate() {
        let u = run.outcome.plan.u_ac[l];
        if u > br.u_min + 1e-6 {
            println!("  br{} {}->{} u={:.4} (min {})", br.id, br.from_bus, br.to_bus, u, br.u_min);
        }
    }
    println!("source u:");
    for (s, src) in case.sources.iter().enumerate() {
        println!("  s{} bus{} u={:.4} (range {}..{})", src.id, src.bus, run.outcome.plan.u_src[s], src.u_min, src.u_max);
    }
    // peak snapshot dispatch
    let nt = series.len();
    for t in 0..nt {
        let mut gen = BTreeMap::new();
        for row in &run.outcome.dispatch {
            if row.t == t {
                gen.insert(row.source, (row.p, row.beta));
            }
        }
        let total: f64 = gen.values().map(|v| v.0).sum();
        println!("t={t} total gen {total:.3} detail {:?}", gen.iter().map(|(k, v)| (*k, (v.0 * 1000.0).round() / 1000.0, (v.1 * 100.0).round() / 100.0)).collect::<Vec<_>>());
    }
    // tie flows at peak
    for row in &run.outcome.flows {
        let br = case.ac_branches.iter().find(|b| b.id == row.branch);
        if let Some(br) = br {
            if br.id == 33 || br.id == 34 {
                println!("t={} tie br{} p_from={:.4}", row.t, br.id, row.p_from);
            }
        }
    }
}
