//! Structured container for linear/second-order-cone programs.

/// Row sense for linear constraints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sense {
    Eq,
    Le,
    Ge,
}

/// Index of a decision variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(pub usize);

/// Index of a linear row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RowId(pub usize);

/// Index of a second-order-cone constraint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SocId(pub usize);

#[derive(Clone, Debug)]
pub struct LinRow {
    pub name: String,
    pub sense: Sense,
    pub rhs: f64,
    /// Sorted by variable index, duplicates summed.
    pub coeffs: Vec<(usize, f64)>,
}

/// ||A x + b||_2 <= c^T x + d
#[derive(Clone, Debug)]
pub struct SocRow {
    pub name: String,
    /// Rows of (A, b).
    pub args: Vec<(Vec<(usize, f64)>, f64)>,
    /// (c, d)
    pub bound: (Vec<(usize, f64)>, f64),
}

/// A convex program: minimize cost^T x + offset subject to variable bounds,
/// linear rows, and second-order-cone constraints.
#[derive(Clone, Debug, Default)]
pub struct ConvexProgram {
    pub(crate) lb: Vec<f64>,
    pub(crate) ub: Vec<f64>,
    pub(crate) cost: Vec<f64>,
    pub(crate) names: Vec<String>,
    pub(crate) rows: Vec<LinRow>,
    pub(crate) socs: Vec<SocRow>,
    pub cost_offset: f64,
}

fn canon(coeffs: &[(VarId, f64)]) -> Vec<(usize, f64)> {
    let mut v: Vec<(usize, f64)> = coeffs
        .iter()
        .filter(|(_, c)| *c != 0.0)
        .map(|&(VarId(i), c)| (i, c))
        .collect();
    v.sort_unstable_by_key(|e| e.0);
    v.dedup_by(|b, a| {
        if a.0 == b.0 {
            a.1 += b.1;
            true
        } else {
            false
        }
    });
    v.retain(|&(_, c)| c != 0.0);
    v
}

impl ConvexProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, name: impl Into<String>, lb: f64, ub: f64, cost: f64) -> VarId {
        debug_assert!(!lb.is_nan() && !ub.is_nan() && cost.is_finite());
        self.lb.push(lb);
        self.ub.push(ub);
        self.cost.push(cost);
        self.names.push(name.into());
        VarId(self.lb.len() - 1)
    }

    pub fn set_cost(&mut self, v: VarId, cost: f64) {
        self.cost[v.0] = cost;
    }

    pub fn add_cost(&mut self, v: VarId, cost: f64) {
        self.cost[v.0] += cost;
    }

    pub fn set_bounds(&mut self, v: VarId, lb: f64, ub: f64) {
        self.lb[v.0] = lb;
        self.ub[v.0] = ub;
    }

    pub fn add_row(
        &mut self,
        name: impl Into<String>,
        sense: Sense,
        rhs: f64,
        coeffs: &[(VarId, f64)],
    ) -> RowId {
        self.rows.push(LinRow {
            name: name.into(),
            sense,
            rhs,
            coeffs: canon(coeffs),
        });
        RowId(self.rows.len() - 1)
    }

    /// ||A x + b|| <= c^T x + d with `args` the rows of (A, b) and
    /// `bound` = (c, d). At least one argument row is required; a normless
    /// constraint is just a linear row.
    pub fn add_soc(
        &mut self,
        name: impl Into<String>,
        args: Vec<(Vec<(VarId, f64)>, f64)>,
        bound: (Vec<(VarId, f64)>, f64),
    ) -> SocId {
        assert!(!args.is_empty(), "second-order cone needs at least one argument row");
        self.socs.push(SocRow {
            name: name.into(),
            args: args
                .into_iter()
                .map(|(c, b)| (canon(&c), b))
                .collect(),
            bound: (canon(&bound.0), bound.1),
        });
        SocId(self.socs.len() - 1)
    }

    pub fn num_vars(&self) -> usize {
        self.lb.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn num_socs(&self) -> usize {
        self.socs.len()
    }

    pub fn var_name(&self, v: VarId) -> &str {
        &self.names[v.0]
    }

    pub fn bounds(&self, v: VarId) -> (f64, f64) {
        (self.lb[v.0], self.ub[v.0])
    }

    pub fn cost_coeff(&self, v: VarId) -> f64 {
        self.cost[v.0]
    }

    pub fn rows(&self) -> &[LinRow] {
        &self.rows
    }

    pub fn socs(&self) -> &[SocRow] {
        &self.socs
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.cost_offset + self.cost.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }

    /// Evaluates a linear expression at `x`.
    pub(crate) fn eval_expr(coeffs: &[(usize, f64)], constant: f64, x: &[f64]) -> f64 {
        constant + coeffs.iter().map(|&(i, c)| c * x[i]).sum::<f64>()
    }
}
