//! Sparse LP/SOCP modeling container and a self-contained primal-dual
//! interior-point solver.
//!
//! Programs are built variable-by-variable and row-by-row through
//! [`ConvexProgram`], then handed to [`solve`]. The solver runs a homogeneous
//! self-dual embedding with Nesterov-Todd scaling, so it distinguishes
//! optimality, primal infeasibility, and unboundedness without phase-1
//! preprocessing. There is no external solver dependency.

mod cones;
mod presolve;

pub mod check;
pub mod dump;
pub mod ipm;
pub mod ldl;
pub mod program;
pub mod sparse;

pub use check::{check_solution, CheckReport};
pub use dump::dump;
pub use ipm::{solve, InteriorPoint, Solution, SolveOptions, SolverBackend, Status};
pub use program::{ConvexProgram, LinRow, RowId, Sense, SocId, SocRow, VarId};
