//! Independent verification of a candidate point against a program's
//! constraints, without reference to how the point was produced.

use crate::program::{ConvexProgram, Sense, VarId};

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub max_bound_violation: f64,
    pub max_eq_violation: f64,
    pub max_ineq_violation: f64,
    pub max_soc_violation: f64,
    /// Name and violation of the single worst constraint, if any is violated.
    pub worst: Option<(String, f64)>,
}

impl CheckReport {
    pub fn max_violation(&self) -> f64 {
        self.max_bound_violation
            .max(self.max_eq_violation)
            .max(self.max_ineq_violation)
            .max(self.max_soc_violation)
    }

    pub fn within(&self, tol: f64) -> bool {
        self.max_violation() <= tol
    }
}

pub fn check_solution(prog: &ConvexProgram, x: &[f64]) -> CheckReport {
    assert_eq!(x.len(), prog.num_vars(), "point has wrong dimension");
    let mut report = CheckReport {
        max_bound_violation: 0.0,
        max_eq_violation: 0.0,
        max_ineq_violation: 0.0,
        max_soc_violation: 0.0,
        worst: None,
    };
    let mut worst: Option<(String, f64)> = None;
    let mut record = |name: &str, viol: f64, slot: &mut f64| {
        if viol > *slot {
            *slot = viol;
        }
        if viol > worst.as_ref().map_or(0.0, |w| w.1) {
            worst = Some((name.to_string(), viol));
        }
    };

    for i in 0..prog.num_vars() {
        let (lb, ub) = prog.bounds(VarId(i));
        let v = (lb - x[i]).max(x[i] - ub).max(0.0);
        record(prog.var_name(VarId(i)), v, &mut report.max_bound_violation);
    }
    for row in prog.rows() {
        let lhs = ConvexProgram::eval_expr(&row.coeffs, 0.0, x);
        let v = match row.sense {
            Sense::Eq => (lhs - row.rhs).abs(),
            Sense::Le => (lhs - row.rhs).max(0.0),
            Sense::Ge => (row.rhs - lhs).max(0.0),
        };
        match row.sense {
            Sense::Eq => record(&row.name, v, &mut report.max_eq_violation),
            _ => record(&row.name, v, &mut report.max_ineq_violation),
        }
    }
    for soc in prog.socs() {
        let norm = soc
            .args
            .iter()
            .map(|(c, b)| ConvexProgram::eval_expr(c, *b, x).powi(2))
            .sum::<f64>()
            .sqrt();
        let bound = ConvexProgram::eval_expr(&soc.bound.0, soc.bound.1, x);
        record(&soc.name, (norm - bound).max(0.0), &mut report.max_soc_violation);
    }
    report.worst = worst;
    report
}
