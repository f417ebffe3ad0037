//! Bounded-variable primal simplex with an LU-factorised basis.
//!
//! The problem is brought to computational standard form by appending one
//! slack per row (`a'x + s = b`) with slack bounds encoding the row sense.
//! Phase 1 minimises the sum of bound violations of the basic variables
//! (composite method, no artificial columns), so the solver can start
//! from an arbitrary basis — which is what makes branch-and-bound warm
//! starts cheap. Dantzig pricing with a Bland's-rule fallback guards
//! against cycling; the basis inverse is kept as LU factors plus a
//! product-form eta file, refactorised every few dozen pivots.

use crate::{LpProblem, RowSense, Sense, SolveStatus};

const FEAS_TOL: f64 = 1e-7;
const OPT_TOL: f64 = 1e-7;
const PIVOT_TOL: f64 = 1e-9;
const DROP_TOL: f64 = 1e-12;
const REFACTOR_EVERY: usize = 64;

#[derive(Clone, Debug)]
pub struct LpSolution {
    pub status: SolveStatus,
    /// Structural variable values (length `n_vars`). Zero-filled unless
    /// the status is optimal.
    pub x: Vec<f64>,
    /// Objective in the problem's own sense.
    pub objective: f64,
    pub iterations: usize,
    pub(crate) statuses: Vec<VarStatus>,
}

/// Reusable starting basis captured from a previous solve of a problem
/// with the same shape (same variable and row counts).
#[derive(Clone, Debug)]
pub struct SimplexStart {
    statuses: Vec<VarStatus>,
}

impl LpSolution {
    pub fn start_basis(&self) -> SimplexStart {
        SimplexStart {
            statuses: self.statuses.clone(),
        }
    }
}

/// Solves the LP relaxation (integrality is ignored).
pub fn solve_lp(problem: &LpProblem) -> LpSolution {
    solve_inner(problem, None, None)
}

/// Solves with bound overrides and an optional warm-start basis.
///
/// `bound_override[j]`, when present, replaces the bounds of structural
/// variable `j`. Used by branch-and-bound to fix binaries without
/// cloning the whole problem.
pub fn solve_lp_from(
    problem: &LpProblem,
    bound_override: Option<&[(f64, f64)]>,
    start: Option<&SimplexStart>,
) -> LpSolution {
    solve_inner(problem, bound_override, start)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum VarStatus {
    Basic,
    AtLower,
    AtUpper,
    /// Nonbasic free variable pinned at zero.
    FreeZero,
}

/// Column-compressed storage of `[A | I]`.
struct Matrix {
    n_total: usize,
    m: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl Matrix {
    fn build(problem: &LpProblem) -> Matrix {
        let n = problem.n_vars();
        let m = problem.n_rows();
        let mut col_nnz = vec![0usize; n + m];
        for row in problem.rows() {
            for &(col, _) in &row.terms {
                col_nnz[col] += 1;
            }
        }
        for i in 0..m {
            col_nnz[n + i] = 1;
        }
        let mut col_ptr = vec![0usize; n + m + 1];
        for j in 0..n + m {
            col_ptr[j + 1] = col_ptr[j] + col_nnz[j];
        }
        let nnz = col_ptr[n + m];
        let mut row_idx = vec![0usize; nnz];
        let mut values = vec![0.0f64; nnz];
        let mut fill = col_ptr.clone();
        for (i, row) in problem.rows().iter().enumerate() {
            for &(col, coeff) in &row.terms {
                row_idx[fill[col]] = i;
                values[fill[col]] = coeff;
                fill[col] += 1;
            }
        }
        for i in 0..m {
            row_idx[fill[n + i]] = i;
            values[fill[n + i]] = 1.0;
            fill[n + i] += 1;
        }
        Matrix {
            n_total: n + m,
            m,
            col_ptr,
            row_idx,
            values,
        }
    }

    fn col(&self, j: usize) -> (&[usize], &[f64]) {
        let lo = self.col_ptr[j];
        let hi = self.col_ptr[j + 1];
        (&self.row_idx[lo..hi], &self.values[lo..hi])
    }
}

/// LU factors of the basis in elimination order plus a product-form eta
/// file for pivots applied since the last refactorisation.
struct Factors {
    m: usize,
    /// `order[k]` = basis position eliminated at step k.
    order: Vec<usize>,
    /// `pivot_row[k]` = matrix row chosen as pivot at step k.
    pivot_row: Vec<usize>,
    /// L column k: (row, multiplier) strictly below the pivot.
    l_cols: Vec<Vec<(usize, f64)>>,
    /// U column k: (step j < k, value) plus the diagonal.
    u_cols: Vec<Vec<(usize, f64)>>,
    u_diag: Vec<f64>,
    /// Product-form etas: (basis position, pivot value, off-pivot entries).
    etas: Vec<Eta>,
}

struct Eta {
    pos: usize,
    pivot: f64,
    entries: Vec<(usize, f64)>,
}

struct SingularBasis {
    bad_positions: Vec<usize>,
    unpivoted_rows: Vec<usize>,
}

impl Factors {
    /// Factorises the columns `basis[p]` of `mat`. Positions whose column
    /// proves numerically singular are reported back so the caller can
    /// repair the basis.
    fn refactor(mat: &Matrix, basis: &[usize]) -> Result<Factors, SingularBasis> {
        let m = mat.m;
        // Eliminate sparser columns first; slack singletons form a large
        // triangular head that keeps fill low.
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by_key(|&p| {
            let j = basis[p];
            (mat.col_ptr[j + 1] - mat.col_ptr[j], p)
        });

        let mut pivot_row = vec![usize::MAX; m];
        let mut row_pivoted = vec![false; m];
        let mut l_cols: Vec<Vec<(usize, f64)>> = Vec::with_capacity(m);
        let mut u_cols: Vec<Vec<(usize, f64)>> = Vec::with_capacity(m);
        let mut u_diag = vec![0.0f64; m];
        let mut work = vec![0.0f64; m];
        let mut touched: Vec<usize> = Vec::with_capacity(64);
        let mut bad_positions = Vec::new();

        for (k, &pos) in order.iter().enumerate() {
            let (rows, vals) = mat.col(basis[pos]);
            for (&r, &v) in rows.iter().zip(vals) {
                work[r] = v;
                touched.push(r);
            }
            let mut u_col = Vec::new();
            // Apply earlier eliminations in step order.
            for j in 0..k {
                let pr = pivot_row[j];
                if pr == usize::MAX {
                    continue;
                }
                let v = work[pr];
                if v.abs() <= DROP_TOL {
                    continue;
                }
                u_col.push((j, v));
                for &(r, mult) in &l_cols[j] {
                    if work[r] == 0.0 {
                        touched.push(r);
                    }
                    work[r] -= mult * v;
                }
            }
            // Partial pivoting over unpivoted rows.
            let mut best_row = usize::MAX;
            let mut best_val = 0.0f64;
            for &r in &touched {
                if !row_pivoted[r] && work[r].abs() > best_val {
                    best_val = work[r].abs();
                    best_row = r;
                }
            }
            if best_row == usize::MAX || best_val <= PIVOT_TOL {
                bad_positions.push(pos);
                // Insert a placeholder; caller will repair and refactor.
                pivot_row[k] = usize::MAX;
                l_cols.push(Vec::new());
                u_cols.push(u_col);
                u_diag[k] = 1.0;
            } else {
                let diag = work[best_row];
                let mut l_col = Vec::new();
                for &r in &touched {
                    if !row_pivoted[r] && r != best_row && work[r].abs() > DROP_TOL {
                        l_col.push((r, work[r] / diag));
                    }
                }
                row_pivoted[best_row] = true;
                pivot_row[k] = best_row;
                u_diag[k] = diag;
                l_cols.push(l_col);
                u_cols.push(u_col);
            }
            for &r in &touched {
                work[r] = 0.0;
            }
            touched.clear();
        }

        if !bad_positions.is_empty() {
            let unpivoted_rows: Vec<usize> =
                (0..m).filter(|&r| !row_pivoted[r]).collect();
            return Err(SingularBasis {
                bad_positions,
                unpivoted_rows,
            });
        }
        Ok(Factors {
            m,
            order,
            pivot_row,
            l_cols,
            u_cols,
            u_diag,
            etas: Vec::new(),
        })
    }

    /// Solves `B x = rhs`. `rhs` is indexed by row; the result is indexed
    /// by basis position.
    fn ftran(&self, rhs: &mut Vec<f64>) {
        // L solve in row space.
        for k in 0..self.m {
            let pr = self.pivot_row[k];
            let v = rhs[pr];
            if v.abs() > DROP_TOL {
                for &(r, mult) in &self.l_cols[k] {
                    rhs[r] -= mult * v;
                }
            } else {
                rhs[pr] = 0.0;
            }
        }
        // U back-substitution: step k owns pivot row r_k.
        let mut by_step = vec![0.0f64; self.m];
        for k in (0..self.m).rev() {
            let xv = rhs[self.pivot_row[k]] / self.u_diag[k];
            by_step[k] = xv;
            if xv.abs() > DROP_TOL {
                for &(j, val) in &self.u_cols[k] {
                    rhs[self.pivot_row[j]] -= val * xv;
                }
            }
        }
        // Map step order back to basis positions.
        for k in 0..self.m {
            rhs[self.order[k]] = by_step[k];
        }
        // Apply product-form etas (position space).
        for eta in &self.etas {
            let v = rhs[eta.pos] / eta.pivot;
            rhs[eta.pos] = v;
            if v.abs() > DROP_TOL {
                for &(p, d) in &eta.entries {
                    rhs[p] -= d * v;
                }
            }
        }
    }

    /// Solves `Bᵀ y = c` where `c` is indexed by basis position; the
    /// result is indexed by row.
    fn btran(&self, c: &mut Vec<f64>) {
        // Transposed etas in reverse order (position space).
        for eta in self.etas.iter().rev() {
            let mut acc = c[eta.pos];
            for &(p, d) in &eta.entries {
                acc -= d * c[p];
            }
            c[eta.pos] = acc / eta.pivot;
        }
        // Uᵀ forward solve in step order.
        let mut by_step = vec![0.0f64; self.m];
        for k in 0..self.m {
            let mut acc = c[self.order[k]];
            for &(j, val) in &self.u_cols[k] {
                acc -= val * by_step[j];
            }
            by_step[k] = acc / self.u_diag[k];
        }
        // Lᵀ backward solve into row space.
        let mut y = vec![0.0f64; self.m];
        for k in (0..self.m).rev() {
            let mut acc = by_step[k];
            for &(r, mult) in &self.l_cols[k] {
                acc -= mult * y[r];
            }
            y[self.pivot_row[k]] = acc;
        }
        c.clear();
        c.extend_from_slice(&y);
    }

    fn push_eta(&mut self, pos: usize, direction: &[f64]) {
        let pivot = direction[pos];
        let mut entries = Vec::new();
        for (p, &d) in direction.iter().enumerate() {
            if p != pos && d.abs() > DROP_TOL {
                entries.push((p, d));
            }
        }
        self.etas.push(Eta {
            pos,
            pivot,
            entries,
        });
    }
}

struct Solver<'a> {
    problem: &'a LpProblem,
    mat: Matrix,
    /// Minimisation costs for structural columns (slacks cost 0).
    cost: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    rhs: Vec<f64>,
    statuses: Vec<VarStatus>,
    basis: Vec<usize>,
    /// Basic values by position.
    x_basic: Vec<f64>,
    factors: Factors,
    pivots_since_refactor: usize,
    iterations: usize,
    bland: bool,
    degenerate_streak: usize,
}

enum Step {
    Optimal,
    Infeasible,
    Unbounded,
    Pivoted,
}

impl<'a> Solver<'a> {
    fn new(
        problem: &'a LpProblem,
        bound_override: Option<&[(f64, f64)]>,
        start: Option<&SimplexStart>,
    ) -> Solver<'a> {
        let n = problem.n_vars();
        let m = problem.n_rows();
        let mat = Matrix::build(problem);
        let sign = match problem.sense() {
            Sense::Minimize => 1.0,
            Sense::Maximize => -1.0,
        };
        let mut cost = vec![0.0f64; n + m];
        for j in 0..n {
            cost[j] = sign * problem.objective_raw()[j];
        }
        let mut lower = vec![0.0f64; n + m];
        let mut upper = vec![0.0f64; n + m];
        lower[..n].copy_from_slice(problem.lower_raw());
        upper[..n].copy_from_slice(problem.upper_raw());
        if let Some(overrides) = bound_override {
            for (j, &(lo, hi)) in overrides.iter().enumerate() {
                lower[j] = lo;
                upper[j] = hi;
            }
        }
        let mut rhs = vec![0.0f64; m];
        for (i, row) in problem.rows().iter().enumerate() {
            rhs[i] = row.rhs;
            let (lo, hi) = match row.sense {
                RowSense::Le => (0.0, f64::INFINITY),
                RowSense::Ge => (f64::NEG_INFINITY, 0.0),
                RowSense::Eq => (0.0, 0.0),
            };
            lower[n + i] = lo;
            upper[n + i] = hi;
        }

        let statuses = match start {
            Some(s) if s.statuses.len() == n + m => {
                let mut st = s.statuses.clone();
                // Bounds may have moved since the basis was captured; snap
                // nonbasic markers onto bounds that still exist.
                for j in 0..n + m {
                    st[j] = match st[j] {
                        VarStatus::Basic => VarStatus::Basic,
                        _ => nonbasic_status(lower[j], upper[j], st[j]),
                    };
                }
                let n_basic = st.iter().filter(|&&s| s == VarStatus::Basic).count();
                if n_basic == m {
                    st
                } else {
                    default_statuses(&lower, &upper, n, m)
                }
            }
            _ => default_statuses(&lower, &upper, n, m),
        };

        let mut solver = Solver {
            problem,
            mat,
            cost,
            lower,
            upper,
            rhs,
            statuses,
            basis: Vec::new(),
            x_basic: Vec::new(),
            factors: Factors {
                m,
                order: Vec::new(),
                pivot_row: Vec::new(),
                l_cols: Vec::new(),
                u_cols: Vec::new(),
                u_diag: vec![],
                etas: Vec::new(),
            },
            pivots_since_refactor: 0,
            iterations: 0,
            bland: false,
            degenerate_streak: 0,
        };
        solver.rebuild_basis_list();
        solver.refactor_with_repair();
        solver.recompute_basics();
        solver
    }

    fn rebuild_basis_list(&mut self) {
        self.basis = (0..self.mat.n_total)
            .filter(|&j| self.statuses[j] == VarStatus::Basic)
            .collect();
    }

    fn nonbasic_value(&self, j: usize) -> f64 {
        match self.statuses[j] {
            VarStatus::AtLower => self.lower[j],
            VarStatus::AtUpper => self.upper[j],
            VarStatus::FreeZero => 0.0,
            VarStatus::Basic => unreachable!("basic treated as nonbasic"),
        }
    }

    /// Factorises the current basis, swapping numerically singular
    /// positions for slacks of rows left without a pivot. Falls back to
    /// the all-slack basis if the repair cannot be applied cleanly.
    fn refactor_with_repair(&mut self) {
        let mut attempts = 0;
        loop {
            match Factors::refactor(&self.mat, &self.basis) {
                Ok(f) => {
                    self.factors = f;
                    self.pivots_since_refactor = 0;
                    return;
                }
                Err(sing) => {
                    attempts += 1;
                    let n = self.problem.n_vars();
                    let conflict = sing.unpivoted_rows.iter().any(|&r| {
                        self.statuses[n + r] == VarStatus::Basic
                            && !sing.bad_positions.iter().any(|&p| self.basis[p] == n + r)
                    });
                    if attempts > 2 || conflict || sing.unpivoted_rows.len() < sing.bad_positions.len() {
                        // Reset to the always-valid slack basis.
                        for j in 0..self.mat.n_total {
                            if self.statuses[j] == VarStatus::Basic {
                                self.statuses[j] = nonbasic_status(
                                    self.lower[j],
                                    self.upper[j],
                                    VarStatus::AtLower,
                                );
                            }
                        }
                        for r in 0..self.mat.m {
                            self.statuses[n + r] = VarStatus::Basic;
                        }
                        self.rebuild_basis_list();
                        continue;
                    }
                    for (&pos, &row) in sing.bad_positions.iter().zip(&sing.unpivoted_rows) {
                        let out = self.basis[pos];
                        self.statuses[out] = nonbasic_status(
                            self.lower[out],
                            self.upper[out],
                            VarStatus::AtLower,
                        );
                        let slack = n + row;
                        self.statuses[slack] = VarStatus::Basic;
                        self.basis[pos] = slack;
                    }
                }
            }
        }
    }

    /// Recomputes basic values from scratch: `x_B = B⁻¹ (b − N x_N)`.
    fn recompute_basics(&mut self) {
        let mut r = self.rhs.clone();
        for j in 0..self.mat.n_total {
            if self.statuses[j] == VarStatus::Basic {
                continue;
            }
            let v = self.nonbasic_value(j);
            if v != 0.0 {
                let (rows, vals) = self.mat.col(j);
                for (&row, &coeff) in rows.iter().zip(vals) {
                    r[row] -= coeff * v;
                }
            }
        }
        self.factors.ftran(&mut r);
        self.x_basic = r;
    }

    fn infeasibility(&self) -> f64 {
        let mut total = 0.0;
        for (p, &j) in self.basis.iter().enumerate() {
            let v = self.x_basic[p];
            if v < self.lower[j] - FEAS_TOL {
                total += self.lower[j] - v;
            } else if v > self.upper[j] + FEAS_TOL {
                total += v - self.upper[j];
            }
        }
        total
    }

    /// One pricing + ratio-test + pivot step. `phase1` selects the
    /// infeasibility gradient as the cost vector.
    fn step(&mut self, phase1: bool) -> Step {
        // Cost of basic variables, by position.
        let mut cb: Vec<f64> = if phase1 {
            self.basis
                .iter()
                .enumerate()
                .map(|(p, &j)| {
                    let v = self.x_basic[p];
                    if v < self.lower[j] - FEAS_TOL {
                        -1.0
                    } else if v > self.upper[j] + FEAS_TOL {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        } else {
            self.basis.iter().map(|&j| self.cost[j]).collect()
        };
        self.factors.btran(&mut cb);
        let y = cb; // dual prices by row

        // Pricing: pick the entering column.
        let mut best: Option<(usize, f64, f64)> = None; // (col, reduced cost, direction)
        for j in 0..self.mat.n_total {
            let status = self.statuses[j];
            if status == VarStatus::Basic {
                continue;
            }
            if self.lower[j] == self.upper[j] {
                continue; // fixed, never enters
            }
            let base_cost = if phase1 { 0.0 } else { self.cost[j] };
            let (rows, vals) = self.mat.col(j);
            let mut dot = 0.0;
            for (&r, &v) in rows.iter().zip(vals) {
                dot += y[r] * v;
            }
            let red = base_cost - dot;
            let dir = match status {
                VarStatus::AtLower => {
                    if red < -OPT_TOL {
                        1.0
                    } else {
                        continue;
                    }
                }
                VarStatus::AtUpper => {
                    if red > OPT_TOL {
                        -1.0
                    } else {
                        continue;
                    }
                }
                VarStatus::FreeZero => {
                    if red < -OPT_TOL {
                        1.0
                    } else if red > OPT_TOL {
                        -1.0
                    } else {
                        continue;
                    }
                }
                VarStatus::Basic => unreachable!(),
            };
            if self.bland {
                best = Some((j, red, dir));
                break;
            }
            match best {
                Some((_, r, _)) if red.abs() <= r.abs() => {}
                _ => best = Some((j, red, dir)),
            }
        }

        let Some((q, _red, dir)) = best else {
            return if phase1 && self.infeasibility() > FEAS_TOL {
                Step::Infeasible
            } else {
                Step::Optimal
            };
        };

        // Direction d = B⁻¹ a_q in position space.
        let mut d = vec![0.0f64; self.mat.m];
        {
            let (rows, vals) = self.mat.col(q);
            for (&r, &v) in rows.iter().zip(vals) {
                d[r] = v;
            }
        }
        self.factors.ftran(&mut d);

        // Ratio test: basic position p changes at rate -dir * d[p].
        let mut t_best = f64::INFINITY;
        let mut leave: Option<(usize, VarStatus)> = None; // position, exit status
        let mut leave_rate = 0.0f64;
        for (p, &j) in self.basis.iter().enumerate() {
            let rate = -dir * d[p];
            if rate.abs() <= PIVOT_TOL {
                continue;
            }
            let v = self.x_basic[p];
            let lo = self.lower[j];
            let hi = self.upper[j];
            let (t, exit) = if phase1 && v < lo - FEAS_TOL {
                if rate > 0.0 {
                    ((lo - v) / rate, VarStatus::AtLower)
                } else {
                    continue; // moving deeper below; slope already priced in
                }
            } else if phase1 && v > hi + FEAS_TOL {
                if rate < 0.0 {
                    ((hi - v) / rate, VarStatus::AtUpper)
                } else {
                    continue;
                }
            } else if rate > 0.0 {
                if hi.is_finite() {
                    (((hi - v) / rate).max(0.0), VarStatus::AtUpper)
                } else {
                    continue;
                }
            } else {
                if lo.is_finite() {
                    (((lo - v) / rate).max(0.0), VarStatus::AtLower)
                } else {
                    continue;
                }
            };
            let better = if self.bland {
                t < t_best - 1e-12 || (t <= t_best + 1e-12 && leave.map_or(true, |(lp, _)| self.basis[p] < self.basis[lp]))
            } else {
                t < t_best - 1e-12 || (t <= t_best + 1e-12 && rate.abs() > leave_rate)
            };
            if better {
                t_best = t.max(0.0);
                leave = Some((p, exit));
                leave_rate = rate.abs();
            }
        }

        // Bound-to-bound flip of the entering variable.
        let span = self.upper[q] - self.lower[q];
        let flip = span.is_finite() && span < t_best;
        if flip {
            t_best = span;
        }

        if t_best.is_infinite() {
            debug_assert!(!phase1, "phase-1 ray with bounded infeasibility");
            return Step::Unbounded;
        }

        // Move.
        for (p, &dp) in d.iter().enumerate() {
            if dp != 0.0 {
                self.x_basic[p] -= dir * t_best * dp;
            }
        }
        self.degenerate_streak = if t_best <= 1e-10 {
            self.degenerate_streak + 1
        } else {
            0
        };

        if flip {
            self.statuses[q] = match self.statuses[q] {
                VarStatus::AtLower => VarStatus::AtUpper,
                VarStatus::AtUpper => VarStatus::AtLower,
                s => s,
            };
            return Step::Pivoted;
        }

        let (p, exit_status) = leave.expect("finite step without leaving variable");
        if d[p].abs() < 1e-7 && !self.factors.etas.is_empty() {
            // Marginal pivot on a stale factorisation; refresh and retry
            // the iteration from exact values.
            self.refactor_with_repair();
            self.recompute_basics();
            return Step::Pivoted;
        }
        let out = self.basis[p];
        let entering_value = match self.statuses[q] {
            VarStatus::AtLower => self.lower[q] + dir * t_best,
            VarStatus::AtUpper => self.upper[q] + dir * t_best,
            VarStatus::FreeZero => dir * t_best,
            VarStatus::Basic => unreachable!(),
        };
        self.statuses[out] = exit_status;
        self.statuses[q] = VarStatus::Basic;
        self.basis[p] = q;
        self.x_basic[p] = entering_value;
        self.factors.push_eta(p, &d);
        self.pivots_since_refactor += 1;
        if self.pivots_since_refactor >= REFACTOR_EVERY {
            self.refactor_with_repair();
            self.recompute_basics();
        }
        Step::Pivoted
    }

    fn run(&mut self) -> SolveStatus {
        let cap = 50 * (self.mat.n_total + 16) + 10_000;
        loop {
            if self.iterations > cap {
                return SolveStatus::IterationLimit;
            }
            self.iterations += 1;
            let phase1 = self.infeasibility() > FEAS_TOL;
            if self.degenerate_streak > self.mat.n_total + 100 {
                self.bland = true;
            } else if self.degenerate_streak == 0 {
                self.bland = false;
            }
            match self.step(phase1) {
                Step::Pivoted => continue,
                Step::Optimal => {
                    if phase1 {
                        // Feasibility just reached (or pricing found no
                        // improving column while still infeasible was
                        // handled by Step::Infeasible); continue phase 2.
                        if self.infeasibility() > FEAS_TOL {
                            return SolveStatus::Infeasible;
                        }
                        continue;
                    }
                    return SolveStatus::Optimal;
                }
                Step::Infeasible => return SolveStatus::Infeasible,
                Step::Unbounded => return SolveStatus::Unbounded,
            }
        }
    }

    fn extract(&self) -> Vec<f64> {
        let n = self.problem.n_vars();
        let mut x = vec![0.0f64; n];
        for j in 0..n {
            if self.statuses[j] != VarStatus::Basic {
                x[j] = self.nonbasic_value(j);
            }
        }
        for (p, &j) in self.basis.iter().enumerate() {
            if j < n {
                x[j] = self.x_basic[p];
            }
        }
        x
    }
}

fn default_statuses(lower: &[f64], upper: &[f64], n: usize, m: usize) -> Vec<VarStatus> {
    let mut st = Vec::with_capacity(n + m);
    for j in 0..n {
        st.push(nonbasic_status(lower[j], upper[j], VarStatus::AtLower));
    }
    for _ in 0..m {
        st.push(VarStatus::Basic);
    }
    st
}

/// Picks a valid nonbasic status for the given bounds, preferring the
/// previous status when it is still meaningful.
fn nonbasic_status(lo: f64, hi: f64, prev: VarStatus) -> VarStatus {
    match (lo.is_finite(), hi.is_finite()) {
        (false, false) => VarStatus::FreeZero,
        (true, false) => VarStatus::AtLower,
        (false, true) => VarStatus::AtUpper,
        (true, true) => match prev {
            VarStatus::AtUpper => VarStatus::AtUpper,
            _ => {
                if lo.abs() <= hi.abs() {
                    VarStatus::AtLower
                } else {
                    VarStatus::AtUpper
                }
            }
        },
    }
}

fn solve_inner(
    problem: &LpProblem,
    bound_override: Option<&[(f64, f64)]>,
    start: Option<&SimplexStart>,
) -> LpSolution {
    // Reject problems with empty feasible boxes up front.
    let n = problem.n_vars();
    for j in 0..n {
        let (lo, hi) = match bound_override {
            Some(b) => b[j],
            None => (problem.lower_raw()[j], problem.upper_raw()[j]),
        };
        if lo > hi {
            return LpSolution {
                status: SolveStatus::Infeasible,
                x: vec![0.0; n],
                objective: 0.0,
                iterations: 0,
                statuses: Vec::new(),
            };
        }
    }

    let mut solver = Solver::new(problem, bound_override, start);
    let status = solver.run();
    let status = match status {
        SolveStatus::Optimal => {
            // Final hygiene: refactor and recompute before extraction.
            solver.refactor_with_repair();
            solver.recompute_basics();
            if solver.infeasibility() > FEAS_TOL * 10.0 {
                // Drift slipped through; run again from the current basis.
                solver.run()
            } else {
                SolveStatus::Optimal
            }
        }
        other => other,
    };
    let x = solver.extract();
    let objective = problem.objective_value(&x);
    LpSolution {
        status,
        x: if status == SolveStatus::Optimal {
            x
        } else {
            vec![0.0; n]
        },
        objective: if status == SolveStatus::Optimal {
            objective
        } else {
            0.0
        },
        iterations: solver.iterations,
        statuses: solver.statuses.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{LpProblem, RowSense, Sense};

    fn approx(a: f64, b: f64) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn two_var_box() {
        // max x + y, x <= 1, y <= 2
        let mut p = LpProblem::new(Sense::Maximize);
        let x = p.add_var("x", 1.0, 0.0, f64::INFINITY);
        let y = p.add_var("y", 1.0, 0.0, f64::INFINITY);
        p.add_row("cx", RowSense::Le, 1.0, &[(x, 1.0)]);
        p.add_row("cy", RowSense::Le, 2.0, &[(y, 1.0)]);
        let s = solve_lp(&p);
        assert_eq!(s.status, SolveStatus::Optimal);
        approx(s.objective, 3.0);
        approx(s.x[0], 1.0);
        approx(s.x[1], 2.0);
    }

    #[test]
    fn unbounded_detected() {
        let mut p = LpProblem::new(Sense::Maximize);
        p.add_var("x", 1.0, 0.0, f64::INFINITY);
        let s = solve_lp(&p);
        assert_eq!(s.status, SolveStatus::Unbounded);
    }

    #[test]
    fn classic_vertex() {
        // max 3x + 2y s.t. x + y <= 4, x <= 2 → 10 at (2, 2)
        let mut p = LpProblem::new(Sense::Maximize);
        let x = p.add_var("x", 3.0, 0.0, f64::INFINITY);
        let y = p.add_var("y", 2.0, 0.0, f64::INFINITY);
        p.add_row("sum", RowSense::Le, 4.0, &[(x, 1.0), (y, 1.0)]);
        p.add_row("capx", RowSense::Le, 2.0, &[(x, 1.0)]);
        let s = solve_lp(&p);
        assert_eq!(s.status, SolveStatus::Optimal);
        approx(s.objective, 10.0);
        approx(s.x[0], 2.0);
        approx(s.x[1], 2.0);
    }

    #[test]
    fn equality_and_free_variable() {
        // min x + 2y s.t. x + y = 3, y - x >= -1, x free
        let mut p = LpProblem::new(Sense::Minimize);
        let x = p.add_var("x", 1.0, f64::NEG_INFINITY, f64::INFINITY);
        let y = p.add_var("y", 2.0, 0.0, f64::INFINITY);
        p.add_row("eq", RowSense::Eq, 3.0, &[(x, 1.0), (y, 1.0)]);
        p.add_row("ge", RowSense::Ge, -1.0, &[(y, 1.0), (x, -1.0)]);
        let s = solve_lp(&p);
        assert_eq!(s.status, SolveStatus::Optimal);
        // x = 2, y = 1 → obj 4; check the alternative x = 3, y = 0 violates ge.
        approx(s.objective, 4.0);
    }

    #[test]
    fn infeasible_rows() {
        let mut p = LpProblem::new(Sense::Minimize);
        let x = p.add_var("x", 1.0, 0.0, 1.0);
        p.add_row("lo", RowSense::Ge, 2.0, &[(x, 1.0)]);
        let s = solve_lp(&p);
        assert_eq!(s.status, SolveStatus::Infeasible);
    }

    #[test]
    fn negative_rhs_equality() {
        let mut p = LpProblem::new(Sense::Minimize);
        let x = p.add_var("x", 1.0, f64::NEG_INFINITY, f64::INFINITY);
        p.add_row("eq", RowSense::Eq, -5.0, &[(x, 1.0)]);
        let s = solve_lp(&p);
        assert_eq!(s.status, SolveStatus::Optimal);
        approx(s.x[0], -5.0);
    }

    #[test]
    fn bound_flip_only() {
        // max x with 0 <= x <= 2 and a slack-only row that never binds.
        let mut p = LpProblem::new(Sense::Maximize);
        let x = p.add_var("x", 1.0, 0.0, 2.0);
        let y = p.add_var("y", 0.0, 0.0, 1.0);
        p.add_row("r", RowSense::Le, 10.0, &[(x, 1.0), (y, 1.0)]);
        let s = solve_lp(&p);
        assert_eq!(s.status, SolveStatus::Optimal);
        approx(s.objective, 2.0);
    }

    #[test]
    fn degenerate_cycling_guard() {
        // A classic cycling-prone instance (Beale); Bland fallback must
        // terminate it.
        let mut p = LpProblem::new(Sense::Minimize);
        let x1 = p.add_var("x1", -0.75, 0.0, f64::INFINITY);
        let x2 = p.add_var("x2", 150.0, 0.0, f64::INFINITY);
        let x3 = p.add_var("x3", -0.02, 0.0, f64::INFINITY);
        let x4 = p.add_var("x4", 6.0, 0.0, f64::INFINITY);
        p.add_row(
            "r1",
            RowSense::Le,
            0.0,
            &[(x1, 0.25), (x2, -60.0), (x3, -0.04), (x4, 9.0)],
        );
        p.add_row(
            "r2",
            RowSense::Le,
            0.0,
            &[(x1, 0.5), (x2, -90.0), (x3, -0.02), (x4, 3.0)],
        );
        p.add_row("r3", RowSense::Le, 1.0, &[(x3, 1.0)]);
        let s = solve_lp(&p);
        assert_eq!(s.status, SolveStatus::Optimal);
        approx(s.objective, -0.05);
    }
}
