//! Plain-text dump and parse of problems in an LP-style format, used for
//! cross-checking instances against external solvers.
//!
//! The dialect is the common subset of the CPLEX LP format: an objective
//! section, `Subject To`, `Bounds`, `Binaries`, `End`. All variable
//! bounds are written explicitly so that a dump re-parses to an
//! identical problem.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::{LpProblem, RowSense, Sense, VarId};

#[derive(Debug, Error)]
pub enum TextError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("missing objective section")]
    MissingObjective,
}

pub fn to_lp_text(problem: &LpProblem) -> String {
    let mut out = String::new();
    out.push_str(match problem.sense() {
        Sense::Minimize => "Minimize\n",
        Sense::Maximize => "Maximize\n",
    });
    out.push_str(" obj:");
    let mut any = false;
    for j in 0..problem.n_vars() {
        let c = problem.objective_raw()[j];
        if c != 0.0 {
            write_term(&mut out, c, problem.var_name(VarId(j)), any);
            any = true;
        }
    }
    if !any {
        out.push_str(" 0 ");
        out.push_str(problem.var_name(VarId(0)));
    }
    out.push('\n');

    out.push_str("Subject To\n");
    for (i, row) in problem.rows().iter().enumerate() {
        if row.name.is_empty() {
            let _ = write!(out, " r{i}:");
        } else {
            let _ = write!(out, " {}:", row.name);
        }
        if row.terms.is_empty() {
            out.push_str(" 0 ");
            out.push_str(problem.var_name(VarId(0)));
        }
        let mut first = true;
        for &(col, coeff) in &row.terms {
            write_term(&mut out, coeff, problem.var_name(VarId(col)), !first);
            first = false;
        }
        let op = match row.sense {
            RowSense::Le => "<=",
            RowSense::Eq => "=",
            RowSense::Ge => ">=",
        };
        let _ = write!(out, " {op} {}\n", row.rhs);
    }

    out.push_str("Bounds\n");
    for j in 0..problem.n_vars() {
        let name = problem.var_name(VarId(j));
        let (lo, hi) = problem.bounds(VarId(j));
        match (lo.is_finite(), hi.is_finite()) {
            (false, false) => {
                let _ = writeln!(out, " {name} free");
            }
            (true, false) => {
                let _ = writeln!(out, " {name} >= {lo}");
            }
            (false, true) => {
                let _ = writeln!(out, " -inf <= {name} <= {hi}");
            }
            (true, true) => {
                let _ = writeln!(out, " {lo} <= {name} <= {hi}");
            }
        }
    }

    let binaries: Vec<&str> = (0..problem.n_vars())
        .filter(|&j| problem.binary_raw()[j])
        .map(|j| problem.var_name(VarId(j)))
        .collect();
    if !binaries.is_empty() {
        out.push_str("Binaries\n ");
        out.push_str(&binaries.join(" "));
        out.push('\n');
    }
    out.push_str("End\n");
    out
}

fn write_term(out: &mut String, coeff: f64, name: &str, with_sign: bool) {
    if with_sign {
        if coeff < 0.0 {
            let _ = write!(out, " - {} {name}", -coeff);
        } else {
            let _ = write!(out, " + {coeff} {name}");
        }
    } else {
        let _ = write!(out, " {coeff} {name}");
    }
}

#[derive(PartialEq)]
enum Section {
    Preamble,
    Objective,
    Rows,
    Bounds,
    Binaries,
    Done,
}

pub fn parse_lp_text(input: &str) -> Result<LpProblem, TextError> {
    let mut sense = None;
    let mut section = Section::Preamble;
    // (name, obj, lo, hi, binary)
    let mut vars: Vec<(String, f64, f64, f64, bool)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut rows: Vec<(String, RowSense, f64, Vec<(usize, f64)>)> = Vec::new();
    let mut pending_obj: Vec<(usize, f64)> = Vec::new();

    let mut intern = |name: &str,
                      vars: &mut Vec<(String, f64, f64, f64, bool)>,
                      index: &mut HashMap<String, usize>| {
        *index.entry(name.to_string()).or_insert_with(|| {
            vars.push((name.to_string(), 0.0, 0.0, f64::INFINITY, false));
            vars.len() - 1
        })
    };

    for (lineno, raw) in input.lines().enumerate() {
        let line = raw.split('\\').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let lower = line.to_ascii_lowercase();
        match lower.as_str() {
            "minimize" | "min" => {
                sense = Some(Sense::Minimize);
                section = Section::Objective;
                continue;
            }
            "maximize" | "max" => {
                sense = Some(Sense::Maximize);
                section = Section::Objective;
                continue;
            }
            "subject to" | "st" | "s.t." => {
                section = Section::Rows;
                continue;
            }
            "bounds" => {
                section = Section::Bounds;
                continue;
            }
            "binaries" | "binary" | "bin" => {
                section = Section::Binaries;
                continue;
            }
            "end" => {
                section = Section::Done;
                continue;
            }
            _ => {}
        }

        let err = |message: String| TextError::Parse {
            line: lineno + 1,
            message,
        };

        match section {
            Section::Preamble | Section::Done => {
                return Err(err(format!("unexpected content: {line}")));
            }
            Section::Objective => {
                let body = line.split_once(':').map(|(_, b)| b).unwrap_or(line);
                let terms = parse_terms(body).map_err(|m| err(m))?;
                for (name, coeff) in terms {
                    let id = intern(&name, &mut vars, &mut index);
                    pending_obj.push((id, coeff));
                }
            }
            Section::Rows => {
                let (name, body) = match line.split_once(':') {
                    Some((n, b)) => (n.trim().to_string(), b),
                    None => (format!("r{}", rows.len()), line),
                };
                let (lhs, op, rhs) = split_relation(body).map_err(|m| err(m))?;
                let terms = parse_terms(lhs).map_err(|m| err(m))?;
                let rhs: f64 = rhs
                    .trim()
                    .parse()
                    .map_err(|_| err(format!("bad rhs: {rhs}")))?;
                let mut cols = Vec::new();
                for (vname, coeff) in terms {
                    let id = intern(&vname, &mut vars, &mut index);
                    cols.push((id, coeff));
                }
                rows.push((name, op, rhs, cols));
            }
            Section::Bounds => {
                parse_bound_line(line, &mut vars, &mut index, &mut intern)
                    .map_err(|m| err(m))?;
            }
            Section::Binaries => {
                for tok in line.split_whitespace() {
                    let id = intern(tok, &mut vars, &mut index);
                    vars[id].4 = true;
                    vars[id].2 = 0.0;
                    vars[id].3 = 1.0;
                }
            }
        }
    }

    let sense = sense.ok_or(TextError::MissingObjective)?;
    let mut problem = LpProblem::new(sense);
    let mut ids = Vec::with_capacity(vars.len());
    for (name, _, lo, hi, binary) in &vars {
        let id = if *binary {
            problem.add_binary(name.clone(), 0.0)
        } else {
            problem.add_var(name.clone(), 0.0, *lo, *hi)
        };
        ids.push(id);
    }
    for (id, coeff) in pending_obj {
        let cur = problem.objective_coeff(ids[id]);
        problem.set_objective_coeff(ids[id], cur + coeff);
    }
    for (name, op, rhs, cols) in rows {
        let terms: Vec<(VarId, f64)> = cols.into_iter().map(|(i, c)| (ids[i], c)).collect();
        problem.add_row(name, op, rhs, &terms);
    }
    Ok(problem)
}

/// Parses `c1 x1 + c2 x2 - x3 ...`; bare names get coefficient 1.
fn parse_terms(body: &str) -> Result<Vec<(String, f64)>, String> {
    let mut out = Vec::new();
    let toks: Vec<&str> = body.split_whitespace().collect();
    let mut i = 0;
    let mut sign = 1.0;
    while i < toks.len() {
        match toks[i] {
            "+" => {
                i += 1;
                continue;
            }
            "-" => {
                sign = -sign;
                i += 1;
                continue;
            }
            tok => {
                if let Ok(v) = tok.parse::<f64>() {
                    // coefficient followed by a name
                    let name = toks
                        .get(i + 1)
                        .ok_or_else(|| format!("dangling coefficient {tok}"))?;
                    if name.parse::<f64>().is_ok() {
                        return Err(format!("expected variable name after {tok}"));
                    }
                    out.push(((*name).to_string(), sign * v));
                    sign = 1.0;
                    i += 2;
                } else {
                    out.push((tok.to_string(), sign));
                    sign = 1.0;
                    i += 1;
                }
            }
        }
    }
    Ok(out)
}

fn split_relation(body: &str) -> Result<(&str, RowSense, &str), String> {
    for (pat, sense) in [("<=", RowSense::Le), (">=", RowSense::Ge), ("=", RowSense::Eq)] {
        if let Some(pos) = body.find(pat) {
            return Ok((&body[..pos], sense, &body[pos + pat.len()..]));
        }
    }
    Err(format!("no relation operator in: {body}"))
}

fn parse_bound_value(tok: &str) -> Result<f64, String> {
    match tok.to_ascii_lowercase().as_str() {
        "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
        "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
        other => other.parse().map_err(|_| format!("bad bound value: {tok}")),
    }
}

fn parse_bound_line(
    line: &str,
    vars: &mut Vec<(String, f64, f64, f64, bool)>,
    index: &mut HashMap<String, usize>,
    intern: &mut impl FnMut(
        &str,
        &mut Vec<(String, f64, f64, f64, bool)>,
        &mut HashMap<String, usize>,
    ) -> usize,
) -> Result<(), String> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    match toks.as_slice() {
        [name, kw] if kw.eq_ignore_ascii_case("free") => {
            let id = intern(name, vars, index);
            vars[id].2 = f64::NEG_INFINITY;
            vars[id].3 = f64::INFINITY;
            Ok(())
        }
        [name, op, val] if *op == ">=" => {
            let id = intern(name, vars, index);
            vars[id].2 = parse_bound_value(val)?;
            Ok(())
        }
        [name, op, val] if *op == "<=" => {
            let id = intern(name, vars, index);
            vars[id].3 = parse_bound_value(val)?;
            Ok(())
        }
        [lo, le1, name, le2, hi] if *le1 == "<=" && *le2 == "<=" => {
            let id = intern(name, vars, index);
            vars[id].2 = parse_bound_value(lo)?;
            vars[id].3 = parse_bound_value(hi)?;
            Ok(())
        }
        _ => Err(format!("unrecognised bound line: {line}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{solve_lp, RowSense, Sense};

    #[test]
    fn roundtrip_small() {
        let mut p = LpProblem::new(Sense::Maximize);
        let x = p.add_var("x", 3.0, 0.0, 2.0);
        let y = p.add_var("y", -2.5, f64::NEG_INFINITY, f64::INFINITY);
        let b = p.add_binary("flag", 1.0);
        p.add_row("r0", RowSense::Le, 4.0, &[(x, 1.0), (y, 1.0)]);
        p.add_row("r1", RowSense::Ge, -1.0, &[(y, 2.0), (b, -3.0)]);
        p.add_row("r2", RowSense::Eq, 0.5, &[(x, 0.25)]);

        let text = p.to_lp_text();
        let q = parse_lp_text(&text).unwrap();
        assert_eq!(q.n_vars(), 3);
        assert_eq!(q.n_rows(), 3);
        assert_eq!(q.sense(), Sense::Maximize);
        assert!(q.binary_raw()[2]);
        assert_eq!(q.bounds(crate::VarId(0)), (0.0, 2.0));
        // Same optimum through both representations.
        let a = solve_lp(&p);
        let b = solve_lp(&q);
        assert!((a.objective - b.objective).abs() < 1e-9);

        // And the dump of the parse matches the original dump.
        assert_eq!(text, q.to_lp_text());
    }

    #[test]
    fn parse_error_reports_line() {
        let text = "Minimize\n obj: x\nSubject To\n r0: x ?? 4\nEnd\n";
        let err = parse_lp_text(text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 4"), "{msg}");
    }
}
