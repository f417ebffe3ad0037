//! Linear and mixed-integer linear programming for settlement-scale
//! scheduling problems.
//!
//! The solver is a bounded-variable revised simplex with an LU-factorised
//! basis and product-form updates, refactorised periodically. Binary
//! variables are handled by a deterministic best-first branch-and-bound
//! that relaxes integrality at each node. Problem sizes are expected to
//! stay in the low thousands of rows and columns with a few dozen
//! binaries, which this implementation handles comfortably without an
//! external solver dependency.

mod branch;
mod simplex;
mod text;

pub use branch::{solve_milp, MilpOptions, MilpSolution};
pub use simplex::{solve_lp, solve_lp_from, LpSolution, SimplexStart};
pub use text::{parse_lp_text, TextError};

/// Objective direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

/// Row comparison operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowSense {
    Le,
    Eq,
    Ge,
}

/// Handle for a variable in an [`LpProblem`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(pub usize);

/// Terminal state of a solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    GapLimit,
    TimeLimit,
    NodeLimit,
    /// Simplex iteration cap hit; treat as a solver failure upstream.
    IterationLimit,
}

impl SolveStatus {
    pub fn is_optimal(self) -> bool {
        matches!(self, SolveStatus::Optimal)
    }
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
            SolveStatus::GapLimit => "gap_limit",
            SolveStatus::TimeLimit => "time_limit",
            SolveStatus::NodeLimit => "node_limit",
            SolveStatus::IterationLimit => "iteration_limit",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Row {
    pub name: String,
    pub sense: RowSense,
    pub rhs: f64,
    /// Sparse terms, strictly increasing column index, no zeros.
    pub terms: Vec<(usize, f64)>,
}

/// A linear (or mixed-binary) program in natural row/bound form.
///
/// Rows are stored sparsely; duplicate coefficients passed to
/// [`LpProblem::add_row`] are summed. Variable bounds may be infinite on
/// either side. Integrality is restricted to binary variables.
#[derive(Clone, Debug)]
pub struct LpProblem {
    sense: Sense,
    objective: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    binary: Vec<bool>,
    names: Vec<String>,
    rows: Vec<Row>,
}

impl LpProblem {
    pub fn new(sense: Sense) -> Self {
        LpProblem {
            sense,
            objective: Vec::new(),
            lower: Vec::new(),
            upper: Vec::new(),
            binary: Vec::new(),
            names: Vec::new(),
            rows: Vec::new(),
        }
    }

    pub fn sense(&self) -> Sense {
        self.sense
    }

    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_binaries(&self) -> usize {
        self.binary.iter().filter(|&&b| b).count()
    }

    /// Adds a continuous variable and returns its handle.
    ///
    /// Panics on NaN or inverted bounds; those are construction bugs, not
    /// data errors.
    pub fn add_var(&mut self, name: impl Into<String>, obj: f64, lower: f64, upper: f64) -> VarId {
        assert!(!obj.is_nan(), "objective coefficient is NaN");
        assert!(!lower.is_nan() && !upper.is_nan(), "variable bound is NaN");
        assert!(lower <= upper, "lower bound {lower} exceeds upper {upper}");
        let id = VarId(self.objective.len());
        self.objective.push(obj);
        self.lower.push(lower);
        self.upper.push(upper);
        self.binary.push(false);
        self.names.push(name.into());
        id
    }

    /// Adds a binary variable (bounds fixed to [0, 1]).
    pub fn add_binary(&mut self, name: impl Into<String>, obj: f64) -> VarId {
        let id = self.add_var(name, obj, 0.0, 1.0);
        self.binary[id.0] = true;
        id
    }

    pub fn set_bounds(&mut self, var: VarId, lower: f64, upper: f64) {
        assert!(lower <= upper, "lower bound {lower} exceeds upper {upper}");
        self.lower[var.0] = lower;
        self.upper[var.0] = upper;
    }

    pub fn bounds(&self, var: VarId) -> (f64, f64) {
        (self.lower[var.0], self.upper[var.0])
    }

    pub fn is_binary(&self, var: VarId) -> bool {
        self.binary[var.0]
    }

    pub fn var_name(&self, var: VarId) -> &str {
        &self.names[var.0]
    }

    pub fn objective_coeff(&self, var: VarId) -> f64 {
        self.objective[var.0]
    }

    pub fn set_objective_coeff(&mut self, var: VarId, obj: f64) {
        assert!(!obj.is_nan(), "objective coefficient is NaN");
        self.objective[var.0] = obj;
    }

    /// Adds a constraint row. Duplicate variable terms are summed and
    /// zero coefficients dropped.
    pub fn add_row(
        &mut self,
        name: impl Into<String>,
        sense: RowSense,
        rhs: f64,
        terms: &[(VarId, f64)],
    ) -> usize {
        assert!(rhs.is_finite(), "row rhs must be finite");
        let mut dense: Vec<(usize, f64)> = terms.iter().map(|&(v, c)| (v.0, c)).collect();
        dense.sort_unstable_by_key(|&(col, _)| col);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(dense.len());
        for (col, coeff) in dense {
            assert!(coeff.is_finite(), "row coefficient must be finite");
            assert!(col < self.n_vars(), "row references unknown variable");
            match merged.last_mut() {
                Some((last, acc)) if *last == col => *acc += coeff,
                _ => merged.push((col, coeff)),
            }
        }
        merged.retain(|&(_, c)| c != 0.0);
        self.rows.push(Row {
            name: name.into(),
            sense,
            rhs,
            terms: merged,
        });
        self.rows.len() - 1
    }

    /// Evaluates a row's left-hand side at the given point.
    pub fn row_activity(&self, row: usize, x: &[f64]) -> f64 {
        self.rows[row]
            .terms
            .iter()
            .map(|&(col, coeff)| coeff * x[col])
            .sum()
    }

    /// Objective value at the given point (in the problem's own sense).
    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Maximum violation of rows and bounds at the given point, in
    /// absolute units. Useful for audits.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for (j, &v) in x.iter().enumerate() {
            worst = worst.max(self.lower[j] - v).max(v - self.upper[j]);
        }
        for (i, row) in self.rows.iter().enumerate() {
            let act = self.row_activity(i, x);
            let gap = match row.sense {
                RowSense::Le => act - row.rhs,
                RowSense::Ge => row.rhs - act,
                RowSense::Eq => (act - row.rhs).abs(),
            };
            worst = worst.max(gap);
        }
        worst
    }

    pub fn to_lp_text(&self) -> String {
        text::to_lp_text(self)
    }

    pub(crate) fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub(crate) fn objective_raw(&self) -> &[f64] {
        &self.objective
    }

    pub(crate) fn lower_raw(&self) -> &[f64] {
        &self.lower
    }

    pub(crate) fn upper_raw(&self) -> &[f64] {
        &self.upper
    }

    pub(crate) fn binary_raw(&self) -> &[bool] {
        &self.binary
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_row_merges_duplicates_and_drops_zeros() {
        let mut p = LpProblem::new(Sense::Minimize);
        let x = p.add_var("x", 1.0, 0.0, 10.0);
        let y = p.add_var("y", 0.0, 0.0, 10.0);
        p.add_row("r", RowSense::Le, 4.0, &[(x, 1.0), (y, 2.0), (x, 2.0), (y, -2.0)]);
        assert_eq!(p.rows()[0].terms, vec![(0, 3.0)]);
    }

    #[test]
    #[should_panic]
    fn inverted_bounds_panic() {
        let mut p = LpProblem::new(Sense::Minimize);
        p.add_var("x", 0.0, 1.0, 0.0);
    }
}
