//! Presolve: substitutes fixed variables (lb == ub) and drops rows that
//! become empty, checking their consistency. Nothing fancier, by design.

use crate::program::{ConvexProgram, LinRow, Sense, SocRow};

const FEAS_EPS: f64 = 1e-9;

pub(crate) enum Presolved {
    /// Problem reduced; solve the inner program and map back.
    Reduced(Reduction),
    /// Everything was fixed and feasible.
    Solved { x: Vec<f64> },
    /// Contradiction found while presolving.
    Infeasible { reason: String },
}

pub(crate) struct Reduction {
    pub inner: ConvexProgram,
    /// old var index -> new index (None when fixed).
    pub var_map: Vec<Option<usize>>,
    /// Values of fixed variables (by old index; unfixed entries unused).
    pub fixed: Vec<f64>,
    /// old row index -> new index (None when dropped as empty-and-feasible).
    pub row_map: Vec<Option<usize>>,
    /// old soc index -> new index.
    pub soc_map: Vec<Option<usize>>,
}

impl Reduction {
    pub fn expand_x(&self, inner_x: &[f64]) -> Vec<f64> {
        self.var_map
            .iter()
            .enumerate()
            .map(|(old, m)| match m {
                Some(new) => inner_x[*new],
                None => self.fixed[old],
            })
            .collect()
    }
}

pub(crate) fn presolve(prog: &ConvexProgram) -> Presolved {
    let n = prog.num_vars();
    let mut var_map = vec![None; n];
    let mut fixed = vec![0.0; n];
    let mut inner = ConvexProgram::new();
    inner.cost_offset = prog.cost_offset;

    for i in 0..n {
        let (lb, ub) = (prog.lb[i], prog.ub[i]);
        if lb > ub {
            return Presolved::Infeasible {
                reason: format!("variable {} has lb {} > ub {}", prog.names[i], lb, ub),
            };
        }
        if lb == ub {
            fixed[i] = lb;
            inner.cost_offset += prog.cost[i] * lb;
        } else {
            let v = inner.add_var(prog.names[i].clone(), lb, ub, prog.cost[i]);
            var_map[i] = Some(v.0);
        }
    }

    let mut row_map = vec![None; prog.num_rows()];
    for (k, row) in prog.rows.iter().enumerate() {
        let (coeffs, shift) = reduce_coeffs(&row.coeffs, &var_map, &fixed);
        let rhs = row.rhs - shift;
        if coeffs.is_empty() {
            let ok = match row.sense {
                Sense::Eq => rhs.abs() <= FEAS_EPS * (1.0 + row.rhs.abs()),
                Sense::Le => rhs >= -FEAS_EPS * (1.0 + row.rhs.abs()),
                Sense::Ge => rhs <= FEAS_EPS * (1.0 + row.rhs.abs()),
            };
            if !ok {
                return Presolved::Infeasible {
                    reason: format!("row {} is infeasible after fixing variables", row.name),
                };
            }
            continue;
        }
        row_map[k] = Some(inner.rows.len());
        inner.rows.push(LinRow {
            name: row.name.clone(),
            sense: row.sense,
            rhs,
            coeffs,
        });
    }

    let mut soc_map = vec![None; prog.num_socs()];
    for (k, soc) in prog.socs.iter().enumerate() {
        let mut args = Vec::with_capacity(soc.args.len());
        let mut all_const = true;
        for (c, b) in &soc.args {
            let (coeffs, shift) = reduce_coeffs(c, &var_map, &fixed);
            all_const &= coeffs.is_empty();
            args.push((coeffs, b + shift));
        }
        let (bcoeffs, bshift) = reduce_coeffs(&soc.bound.0, &var_map, &fixed);
        all_const &= bcoeffs.is_empty();
        if all_const {
            let lhs = args.iter().map(|(_, b)| b * b).sum::<f64>().sqrt();
            let rhs = soc.bound.1 + bshift;
            if lhs > rhs + FEAS_EPS * (1.0 + rhs.abs()) {
                return Presolved::Infeasible {
                    reason: format!("cone {} is infeasible after fixing variables", soc.name),
                };
            }
            continue;
        }
        soc_map[k] = Some(inner.socs.len());
        inner.socs.push(SocRow {
            name: soc.name.clone(),
            args,
            bound: (bcoeffs, soc.bound.1 + bshift),
        });
    }

    if inner.num_vars() == 0 {
        return Presolved::Solved {
            x: fixed,
        };
    }

    Presolved::Reduced(Reduction {
        inner,
        var_map,
        fixed,
        row_map,
        soc_map,
    })
}

/// Splits a coefficient list into surviving terms (renumbered) and the
/// contribution of fixed variables.
fn reduce_coeffs(
    coeffs: &[(usize, f64)],
    var_map: &[Option<usize>],
    fixed: &[f64],
) -> (Vec<(usize, f64)>, f64) {
    let mut out = Vec::with_capacity(coeffs.len());
    let mut shift = 0.0;
    for &(i, c) in coeffs {
        match var_map[i] {
            Some(j) => out.push((j, c)),
            None => shift += c * fixed[i],
        }
    }
    (out, shift)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::{Sense, VarId};

    #[test]
    fn fixed_vars_are_substituted() {
        let mut p = ConvexProgram::new();
        let x = p.add_var("x", 2.0, 2.0, 3.0);
        let y = p.add_var("y", 0.0, 10.0, 1.0);
        p.add_row("r", Sense::Le, 5.0, &[(x, 1.0), (y, 1.0)]);
        match presolve(&p) {
            Presolved::Reduced(red) => {
                assert_eq!(red.inner.num_vars(), 1);
                assert_eq!(red.inner.rows()[0].rhs, 3.0);
                assert_eq!(red.inner.cost_offset, 6.0);
                let full = red.expand_x(&[1.5]);
                assert_eq!(full, vec![2.0, 1.5]);
            }
            _ => panic!("expected reduction"),
        }
    }

    #[test]
    fn contradictory_empty_row_is_infeasible() {
        let mut p = ConvexProgram::new();
        let x = p.add_var("x", 1.0, 1.0, 0.0);
        p.add_row("r", Sense::Le, 0.5, &[(x, 1.0)]);
        assert!(matches!(presolve(&p), Presolved::Infeasible { .. }));
    }

    #[test]
    fn fully_fixed_feasible_problem_is_solved() {
        let mut p = ConvexProgram::new();
        let x = p.add_var("x", 1.0, 1.0, 2.0);
        p.add_row("r", Sense::Eq, 1.0, &[(x, 1.0)]);
        p.add_soc("s", vec![(vec![(x, 1.0)], 0.0)], (vec![], 2.0));
        match presolve(&p) {
            Presolved::Solved { x } => assert_eq!(x, vec![1.0]),
            _ => panic!("expected solved"),
        }
        let _ = VarId(0);
    }
}
