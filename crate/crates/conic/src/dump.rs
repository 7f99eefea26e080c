//! Plain-text rendering of a program for debugging and bug reports.

use crate::program::{ConvexProgram, Sense, VarId};
use std::fmt::Write;

pub fn dump(prog: &ConvexProgram) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "convex program: {} vars, {} rows, {} socs",
        prog.num_vars(),
        prog.num_rows(),
        prog.num_socs()
    );
    let _ = writeln!(out, "minimize");
    let mut terms = Vec::new();
    for i in 0..prog.num_vars() {
        let c = prog.cost_coeff(VarId(i));
        if c != 0.0 {
            terms.push(format!("{:+.6} {}", c, prog.var_name(VarId(i))));
        }
    }
    if prog.cost_offset != 0.0 {
        terms.push(format!("{:+.6}", prog.cost_offset));
    }
    let _ = writeln!(out, "  {}", if terms.is_empty() { "0".into() } else { terms.join(" ") });
    let _ = writeln!(out, "bounds");
    for i in 0..prog.num_vars() {
        let (lb, ub) = prog.bounds(VarId(i));
        let _ = writeln!(out, "  {} <= {} <= {}", lb, prog.var_name(VarId(i)), ub);
    }
    let _ = writeln!(out, "rows");
    for row in prog.rows() {
        let lhs: Vec<String> = row
            .coeffs
            .iter()
            .map(|&(i, c)| format!("{:+.6} {}", c, prog.var_name(VarId(i))))
            .collect();
        let op = match row.sense {
            Sense::Eq => "=",
            Sense::Le => "<=",
            Sense::Ge => ">=",
        };
        let _ = writeln!(out, "  {}: {} {} {}", row.name, lhs.join(" "), op, row.rhs);
    }
    if prog.num_socs() > 0 {
        let _ = writeln!(out, "second-order cones");
    }
    for soc in prog.socs() {
        let render = |coeffs: &[(usize, f64)], cst: f64| -> String {
            let mut parts: Vec<String> = coeffs
                .iter()
                .map(|&(i, c)| format!("{:+.6} {}", c, prog.var_name(VarId(i))))
                .collect();
            if cst != 0.0 || parts.is_empty() {
                parts.push(format!("{:+.6}", cst));
            }
            parts.join(" ")
        };
        let args: Vec<String> = soc.args.iter().map(|(c, b)| render(c, *b)).collect();
        let _ = writeln!(
            out,
            "  {}: ||({})|| <= {}",
            soc.name,
            args.join("; "),
            render(&soc.bound.0, soc.bound.1)
        );
    }
    out
}
