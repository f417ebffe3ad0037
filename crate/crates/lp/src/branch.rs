//! Best-first branch-and-bound over LP relaxations.
//!
//! Binary count is expected to stay small (a few dozen), so plain
//! relaxation branching without cuts or presolve is adequate. Branching
//! picks the most fractional binary, ties broken by lowest index, and the
//! node queue orders by relaxation bound with node id as tie-break, which
//! makes the search fully deterministic.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::{Duration, Instant};

use crate::simplex::{solve_lp_from, SimplexStart};
use crate::{LpProblem, Sense, SolveStatus};

const INT_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct MilpOptions {
    /// Relative optimality gap at which the incumbent is accepted.
    pub gap_tol: f64,
    pub node_limit: usize,
    pub time_limit: Option<Duration>,
}

impl Default for MilpOptions {
    fn default() -> Self {
        MilpOptions {
            gap_tol: 1e-6,
            node_limit: 500_000,
            time_limit: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MilpSolution {
    pub status: SolveStatus,
    /// Structural variable values; binaries are snapped to exact 0/1.
    pub x: Vec<f64>,
    pub objective: f64,
    /// Best proven bound in the problem's own sense.
    pub best_bound: f64,
    /// Relative gap between incumbent and bound.
    pub gap: f64,
    pub nodes: usize,
}

struct Node {
    /// Parent relaxation bound, in minimisation space.
    bound: f64,
    id: usize,
    fixes: Vec<(usize, bool)>,
    start: Option<SimplexStart>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.bound == other.bound && self.id == other.id
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // BinaryHeap is a max-heap; invert so the lowest bound pops first,
    // oldest node winning ties.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .partial_cmp(&self.bound)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.id.cmp(&self.id))
    }
}

/// Solves a mixed-binary program. Non-binary integrality is not
/// supported; the integrality mask comes from the problem's binaries.
pub fn solve_milp(problem: &LpProblem, options: &MilpOptions) -> MilpSolution {
    let t0 = Instant::now();
    let min_sign = match problem.sense() {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    };
    let binaries: Vec<usize> = (0..problem.n_vars())
        .filter(|&j| problem.binary_raw()[j])
        .collect();
    let base_bounds: Vec<(f64, f64)> = (0..problem.n_vars())
        .map(|j| (problem.lower_raw()[j], problem.upper_raw()[j]))
        .collect();

    let mut heap: BinaryHeap<Node> = BinaryHeap::new();
    heap.push(Node {
        bound: f64::NEG_INFINITY,
        id: 0,
        fixes: Vec::new(),
        start: None,
    });
    let mut next_id = 1usize;
    let mut nodes = 0usize;
    let mut incumbent: Option<(f64, Vec<f64>)> = None; // min-space objective
    let mut saw_unbounded_root = false;
    let mut limit_status: Option<SolveStatus> = None;

    while let Some(node) = heap.pop() {
        // The heap's lowest bound is a valid global bound; prune cutoff.
        if let Some((inc, _)) = &incumbent {
            if node.bound >= inc - options.gap_tol * inc.abs().max(1.0) {
                continue;
            }
        }
        if nodes >= options.node_limit {
            limit_status = Some(SolveStatus::NodeLimit);
            heap.push(node);
            break;
        }
        if let Some(limit) = options.time_limit {
            if t0.elapsed() > limit {
                limit_status = Some(SolveStatus::TimeLimit);
                heap.push(node);
                break;
            }
        }
        nodes += 1;

        let mut bounds = base_bounds.clone();
        for &(j, up) in &node.fixes {
            bounds[j] = if up { (1.0, 1.0) } else { (0.0, 0.0) };
        }
        let relax = solve_lp_from(problem, Some(&bounds), node.start.as_ref());
        match relax.status {
            SolveStatus::Infeasible => continue,
            SolveStatus::Unbounded => {
                if node.id == 0 {
                    saw_unbounded_root = true;
                    break;
                }
                continue;
            }
            SolveStatus::Optimal => {}
            other => {
                limit_status = Some(other);
                break;
            }
        }
        let node_obj = min_sign * relax.objective;
        if let Some((inc, _)) = &incumbent {
            if node_obj >= inc - options.gap_tol * inc.abs().max(1.0) {
                continue;
            }
        }

        // Most fractional binary, ties by lowest index.
        let mut branch_var: Option<usize> = None;
        let mut worst_frac = INT_TOL;
        for &j in &binaries {
            let frac = (relax.x[j] - relax.x[j].round()).abs();
            if frac > worst_frac {
                worst_frac = frac;
                branch_var = Some(j);
            }
        }

        match branch_var {
            None => {
                // Integral: candidate incumbent.
                let mut x = relax.x.clone();
                for &j in &binaries {
                    x[j] = x[j].round();
                }
                let obj = min_sign * problem.objective_value(&x);
                if incumbent.as_ref().map_or(true, |(inc, _)| obj < *inc) {
                    incumbent = Some((obj, x));
                }
            }
            Some(j) => {
                let start = relax.start_basis();
                for up in [false, true] {
                    let mut fixes = node.fixes.clone();
                    fixes.push((j, up));
                    heap.push(Node {
                        bound: node_obj,
                        id: next_id,
                        fixes,
                        start: Some(start.clone()),
                    });
                    next_id += 1;
                }
            }
        }
    }

    if saw_unbounded_root {
        return MilpSolution {
            status: SolveStatus::Unbounded,
            x: vec![0.0; problem.n_vars()],
            objective: 0.0,
            best_bound: 0.0,
            gap: f64::INFINITY,
            nodes,
        };
    }

    // Remaining open bound (min space).
    let open_bound = heap
        .iter()
        .map(|n| n.bound)
        .fold(f64::INFINITY, f64::min);

    match incumbent {
        Some((obj, x)) => {
            let bound_min = if limit_status.is_some() {
                open_bound.min(obj)
            } else {
                obj
            };
            let gap = ((obj - bound_min) / obj.abs().max(1.0)).max(0.0);
            let status = match limit_status {
                Some(s) if gap > options.gap_tol => s,
                _ => SolveStatus::Optimal,
            };
            MilpSolution {
                status,
                x,
                objective: min_sign * obj,
                best_bound: min_sign * bound_min,
                gap,
                nodes,
            }
        }
        None => MilpSolution {
            status: match limit_status {
                Some(s) => s,
                None => SolveStatus::Infeasible,
            },
            x: vec![0.0; problem.n_vars()],
            objective: 0.0,
            best_bound: min_sign
                * if open_bound.is_finite() {
                    open_bound
                } else {
                    0.0
                },
            gap: f64::INFINITY,
            nodes,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{LpProblem, RowSense, Sense};

    #[test]
    fn knapsack_brute_force_value() {
        // max 5a + 4b s.t. 3a + 2b <= 3, binaries → a=1, b=0, value 5.
        let mut p = LpProblem::new(Sense::Maximize);
        let a = p.add_binary("a", 5.0);
        let b = p.add_binary("b", 4.0);
        p.add_row("cap", RowSense::Le, 3.0, &[(a, 3.0), (b, 2.0)]);
        let s = solve_milp(&p, &MilpOptions::default());
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.objective - 5.0).abs() < 1e-9);
        assert!((s.x[0] - 1.0).abs() < 1e-9);
        assert!(s.x[1].abs() < 1e-9);
    }

    #[test]
    fn integral_relaxation_single_node() {
        let mut p = LpProblem::new(Sense::Maximize);
        let a = p.add_binary("a", 1.0);
        p.add_row("r", RowSense::Le, 1.0, &[(a, 1.0)]);
        let s = solve_milp(&p, &MilpOptions::default());
        assert_eq!(s.status, SolveStatus::Optimal);
        assert_eq!(s.nodes, 1);
        assert!((s.objective - 1.0).abs() < 1e-9);
    }

    #[test]
    fn infeasible_integer_problem() {
        // a + b = 1.5 with binaries has no integer solution.
        let mut p = LpProblem::new(Sense::Maximize);
        let a = p.add_binary("a", 1.0);
        let b = p.add_binary("b", 1.0);
        p.add_row("eq", RowSense::Eq, 1.5, &[(a, 1.0), (b, 1.0)]);
        let s = solve_milp(&p, &MilpOptions::default());
        assert_eq!(s.status, SolveStatus::Infeasible);
    }

    #[test]
    fn deterministic_repeat() {
        let mut p = LpProblem::new(Sense::Maximize);
        let vars: Vec<_> = (0..6).map(|i| p.add_binary(format!("b{i}"), (i as f64) + 0.5)).collect();
        let terms: Vec<_> = vars.iter().map(|&v| (v, 1.0)).collect();
        p.add_row("cap", RowSense::Le, 2.0, &terms);
        let s1 = solve_milp(&p, &MilpOptions::default());
        let s2 = solve_milp(&p, &MilpOptions::default());
        assert_eq!(s1.nodes, s2.nodes);
        assert_eq!(s1.x, s2.x);
        assert_eq!(s1.objective, s2.objective);
    }
}
