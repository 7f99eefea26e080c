use conic::{check_solution, solve, ConvexProgram, Sense, SolveOptions, Status, VarId};
use proptest::prelude::*;

fn opts() -> SolveOptions {
    SolveOptions::default()
}

#[test]
fn lp_two_variable_known_optimum() {
    // min -3x - 5y  s.t.  x <= 4, 2y <= 12, 3x + 2y <= 18, x,y >= 0.
    // Classic optimum at (2, 6) with objective -36.
    let mut p = ConvexProgram::new();
    let x = p.add_var("x", 0.0, f64::INFINITY, -3.0);
    let y = p.add_var("y", 0.0, f64::INFINITY, -5.0);
    p.add_row("cap_x", Sense::Le, 4.0, &[(x, 1.0)]);
    p.add_row("cap_y", Sense::Le, 12.0, &[(y, 2.0)]);
    let joint = p.add_row("joint", Sense::Le, 18.0, &[(x, 3.0), (y, 2.0)]);
    let sol = solve(&p, &opts());
    assert_eq!(sol.status, Status::Optimal);
    assert!((sol.x[0] - 2.0).abs() < 1e-6, "x = {}", sol.x[0]);
    assert!((sol.x[1] - 6.0).abs() < 1e-6, "y = {}", sol.x[1]);
    assert!((sol.objective + 36.0).abs() < 1e-5);
    assert!((sol.objective - sol.dual_objective).abs() < 1e-4);
    // Shadow price of the binding joint constraint: dObj/drhs = -1.
    assert!((sol.row_duals[joint.0] + 1.0).abs() < 1e-5, "joint dual = {}", sol.row_duals[joint.0]);
    assert!(check_solution(&p, &sol.x).within(1e-7));
}

#[test]
fn equality_rows_give_shadow_prices() {
    // min x + 2y  s.t.  x + y = 3, y - x = 1, with loose boxes.
    // Unique point (1, 2), objective 5. Raising rhs of the first row by eps
    // moves the point to (1 + eps/2, 2 + eps/2): dObj/drhs = 1.5.
    let mut p = ConvexProgram::new();
    let x = p.add_var("x", -10.0, 10.0, 1.0);
    let y = p.add_var("y", -10.0, 10.0, 2.0);
    let sum = p.add_row("sum", Sense::Eq, 3.0, &[(x, 1.0), (y, 1.0)]);
    let diff = p.add_row("diff", Sense::Eq, 1.0, &[(y, 1.0), (x, -1.0)]);
    let sol = solve(&p, &opts());
    assert_eq!(sol.status, Status::Optimal);
    assert!((sol.x[0] - 1.0).abs() < 1e-6);
    assert!((sol.x[1] - 2.0).abs() < 1e-6);
    assert!((sol.row_duals[sum.0] - 1.5).abs() < 1e-5);
    assert!((sol.row_duals[diff.0] - 0.5).abs() < 1e-5);
}

#[test]
fn soc_maximizes_along_cone_boundary() {
    // max x subject to ||(x, 1)|| <= 2, i.e. x = sqrt(3).
    let mut p = ConvexProgram::new();
    let x = p.add_var("x", f64::NEG_INFINITY, f64::INFINITY, -1.0);
    p.add_soc(
        "disc",
        vec![(vec![(x, 1.0)], 0.0), (vec![], 1.0)],
        (vec![], 2.0),
    );
    let sol = solve(&p, &opts());
    assert_eq!(sol.status, Status::Optimal);
    assert!((sol.x[0] - 3f64.sqrt()).abs() < 1e-6, "x = {}", sol.x[0]);
}

#[test]
fn soc_distance_to_box_is_projection() {
    // min t  s.t.  ||(x - a, y - b)|| <= t, (x, y) in [0,1]^2.
    // For (a, b) = (3, 0.5): projection (1, 0.5), distance 2.
    let mut p = ConvexProgram::new();
    let t = p.add_var("t", f64::NEG_INFINITY, f64::INFINITY, 1.0);
    let x = p.add_var("x", 0.0, 1.0, 0.0);
    let y = p.add_var("y", 0.0, 1.0, 0.0);
    p.add_soc(
        "dist",
        vec![(vec![(x, 1.0)], -3.0), (vec![(y, 1.0)], -0.5)],
        (vec![(t, 1.0)], 0.0),
    );
    let sol = solve(&p, &opts());
    assert_eq!(sol.status, Status::Optimal);
    assert!((sol.x[0] - 2.0).abs() < 1e-6, "t = {}", sol.x[0]);
    assert!((sol.x[1] - 1.0).abs() < 1e-6, "x = {}", sol.x[1]);
    assert!((sol.x[2] - 0.5).abs() < 1e-6, "y = {}", sol.x[2]);
}

#[test]
fn contradictory_rows_are_infeasible() {
    let mut p = ConvexProgram::new();
    let x = p.add_var("x", f64::NEG_INFINITY, f64::INFINITY, 1.0);
    p.add_row("lo", Sense::Ge, 1.0, &[(x, 1.0)]);
    p.add_row("hi", Sense::Le, 0.0, &[(x, 1.0)]);
    let sol = solve(&p, &opts());
    assert_eq!(sol.status, Status::Infeasible);
}

#[test]
fn contradictory_bounds_are_infeasible_in_presolve() {
    let mut p = ConvexProgram::new();
    p.add_var("x", 1.0, 0.0, 1.0);
    let sol = solve(&p, &opts());
    assert_eq!(sol.status, Status::Infeasible);
    assert!(sol.message.contains("presolve"));
}

#[test]
fn unbounded_direction_is_detected() {
    let mut p = ConvexProgram::new();
    let x = p.add_var("x", 0.0, f64::INFINITY, -1.0);
    let y = p.add_var("y", 0.0, 5.0, 0.0);
    p.add_row("tie", Sense::Le, 2.0, &[(y, 1.0)]);
    let _ = x;
    let sol = solve(&p, &opts());
    assert_eq!(sol.status, Status::Unbounded);
}

#[test]
fn fixed_variables_are_respected_through_presolve() {
    // y is pinned; optimum moves to the boundary of the remaining box.
    let mut p = ConvexProgram::new();
    let x = p.add_var("x", 0.0, 4.0, 1.0);
    let y = p.add_var("y", 2.5, 2.5, 1.0);
    let row = p.add_row("floor", Sense::Ge, 4.0, &[(x, 1.0), (y, 1.0)]);
    let sol = solve(&p, &opts());
    assert_eq!(sol.status, Status::Optimal);
    assert!((sol.x[1] - 2.5).abs() < 1e-12);
    assert!((sol.x[0] - 1.5).abs() < 1e-6);
    assert!((sol.objective - 4.0).abs() < 1e-5);
    assert!((sol.row_duals[row.0] - 1.0).abs() < 1e-5);
}

#[test]
fn degenerate_redundant_rows_still_solve() {
    let mut p = ConvexProgram::new();
    let x = p.add_var("x", 0.0, 10.0, 1.0);
    for k in 0..6 {
        p.add_row(format!("same_{k}"), Sense::Ge, 3.0, &[(x, 1.0)]);
    }
    let sol = solve(&p, &opts());
    assert_eq!(sol.status, Status::Optimal);
    assert!((sol.x[0] - 3.0).abs() < 1e-6);
}

#[test]
fn weak_duality_holds_on_a_mixed_program() {
    let mut p = ConvexProgram::new();
    let x = p.add_var("x", -1.0, 4.0, 1.3);
    let y = p.add_var("y", 0.0, 3.0, -0.4);
    let z = p.add_var("z", -2.0, 2.0, 0.05);
    p.add_row("r0", Sense::Le, 3.5, &[(x, 1.0), (y, 1.0)]);
    p.add_row("r1", Sense::Eq, 0.5, &[(y, 1.0), (z, -1.0)]);
    p.add_soc(
        "s0",
        vec![(vec![(x, 1.0), (z, 0.5)], 0.1), (vec![(y, 1.0)], -0.3)],
        (vec![], 3.0),
    );
    let sol = solve(&p, &opts());
    assert_eq!(sol.status, Status::Optimal);
    assert!(sol.dual_objective <= sol.objective + 1e-5);
    assert!((sol.objective - sol.dual_objective).abs() < 1e-4);
    assert!(check_solution(&p, &sol.x).within(1e-6));
}

/// Builds a random LP that is feasible by construction: bounds around a
/// sampled interior point and rows whose rhs is offset from the row value at
/// that point.
fn random_feasible_lp(seed: &[f64], n: usize, rows: usize) -> (ConvexProgram, Vec<f64>) {
    let mut p = ConvexProgram::new();
    let mut idx = 0usize;
    let mut next = |lo: f64, hi: f64| {
        let u = seed[idx % seed.len()].abs().fract();
        idx += 1;
        lo + (hi - lo) * u
    };
    let mut point = Vec::new();
    let mut vars = Vec::new();
    for i in 0..n {
        let x0 = next(-2.0, 2.0);
        let half = next(0.5, 3.0);
        let cost = next(-1.0, 1.0);
        vars.push(p.add_var(format!("v{i}"), x0 - half, x0 + half, cost));
        point.push(x0);
    }
    for r in 0..rows {
        let mut coeffs = Vec::new();
        for (i, &v) in vars.iter().enumerate() {
            if next(0.0, 1.0) < 0.6 {
                coeffs.push((v, next(-2.0, 2.0) * if i % 2 == 0 { 1.0 } else { -1.0 }));
            }
        }
        if coeffs.is_empty() {
            coeffs.push((vars[0], 1.0));
        }
        let at_point: f64 = coeffs
            .iter()
            .map(|&(VarId(i), c)| c * point[i])
            .sum();
        let kind = next(0.0, 3.0);
        if kind < 1.0 {
            p.add_row(format!("r{r}"), Sense::Le, at_point + next(0.1, 1.0), &coeffs);
        } else if kind < 2.0 {
            p.add_row(format!("r{r}"), Sense::Ge, at_point - next(0.1, 1.0), &coeffs);
        } else {
            p.add_row(format!("r{r}"), Sense::Eq, at_point, &coeffs);
        }
    }
    (p, point)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_feasible_lps_solve_and_verify(
        seed in prop::collection::vec(-1.0f64..1.0, 24),
        n in 2usize..7,
        rows in 1usize..6,
    ) {
        let (p, point) = random_feasible_lp(&seed, n, rows);
        let sol = solve(&p, &opts());
        prop_assert_eq!(sol.status, Status::Optimal, "message: {}", sol.message);
        // The sampled interior point is feasible, so the optimum cannot cost more.
        prop_assert!(sol.objective <= p.objective_value(&point) + 1e-5);
        prop_assert!(check_solution(&p, &sol.x).within(1e-5));
        prop_assert!((sol.objective - sol.dual_objective).abs() <= 1e-4 * (1.0 + sol.objective.abs()));
    }

    #[test]
    fn solves_are_deterministic(
        seed in prop::collection::vec(-1.0f64..1.0, 24),
        n in 2usize..6,
        rows in 1usize..5,
    ) {
        let (p, _) = random_feasible_lp(&seed, n, rows);
        let a = solve(&p, &opts());
        let b = solve(&p, &opts());
        prop_assert_eq!(a.status, b.status);
        for (xa, xb) in a.x.iter().zip(&b.x) {
            prop_assert_eq!(xa.to_bits(), xb.to_bits(), "solves differ bitwise");
        }
        prop_assert_eq!(a.iterations, b.iterations);
    }
}
