//! Exact Bayesian-incentive-compatible mechanism design on finite type
//! grids: the lower bound every trading mechanism is compared against.

use serde::{Deserialize, Serialize};

use crate::dot;
use crate::error::{Error, Result};
use crate::lp::{solve_lp, LpProblem, Relation, Sense};
use crate::scenario::{cube_corners, Distribution, Scenario};

/// Largest LP the oracle will build.
pub const MAX_VARIABLES: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridKind {
    Corners,
    CornersCenter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTypes {
    pub types: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteTypeModel {
    pub agents: Vec<AgentTypes>,
    /// False when some uniform cube was replaced by grid points.
    pub exact: bool,
}

impl FiniteTypeModel {
    /// Grid agents keep their own support; uniform cubes are discretized
    /// at `kind` with equal weights.
    pub fn from_scenario(s: &Scenario, kind: GridKind) -> Self {
        let mut exact = true;
        let agents = s
            .agents
            .iter()
            .map(|a| match &a.distribution {
                Distribution::Grid { points, weights } => {
                    let (types, probs) = points
                        .iter()
                        .zip(weights)
                        .filter(|(_, &w)| w > 0.0)
                        .map(|(p, &w)| (p.clone(), w))
                        .unzip();
                    AgentTypes { types, probs }
                }
                Distribution::Uniform => {
                    if !a.is_degenerate() {
                        exact = false;
                    }
                    let mut types = cube_corners(&a.pref_lo, &a.pref_hi);
                    if kind == GridKind::CornersCenter {
                        let center: Vec<f64> = a.pref_lo.iter().zip(&a.pref_hi).map(|(l, h)| 0.5 * (l + h)).collect();
                        if !types.contains(&center) {
                            types.push(center);
                        }
                    }
                    let w = 1.0 / types.len() as f64;
                    let probs = vec![w; types.len()];
                    AgentTypes { types, probs }
                }
            })
            .collect();
        FiniteTypeModel { agents, exact }
    }

    pub fn fidelity(&self) -> &'static str {
        if self.exact {
            "exact"
        } else {
            "grid lower-fidelity proxy"
        }
    }

    pub fn profile_count(&self) -> usize {
        self.agents.iter().map(|a| a.types.len()).product()
    }

    /// Type-index profiles in lexicographic order with their probabilities.
    pub fn profiles(&self) -> Vec<(Vec<usize>, f64)> {
        let mut out = vec![(Vec::new(), 1.0)];
        for a in &self.agents {
            out = out
                .into_iter()
                .flat_map(|(p, w)| {
                    a.probs.iter().enumerate().map(move |(t, &q)| {
                        let mut p = p.clone();
                        p.push(t);
                        (p, w * q)
                    })
                })
                .collect();
        }
        out
    }

    fn validate(&self, s: &Scenario) -> Result<()> {
        if self.agents.len() != s.agent_count() {
            return Err(Error::Dimension("one type list per agent required".into()));
        }
        for (a, t) in s.agents.iter().zip(&self.agents) {
            if t.types.is_empty() || t.types.len() != t.probs.len() {
                return Err(Error::Validation(format!("agent {} has an empty or unweighted type list", a.name)));
            }
            if (t.probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 || t.probs.iter().any(|&p| p <= 0.0) {
                return Err(Error::Validation(format!("agent {} type probabilities invalid", a.name)));
            }
            for c in &t.types {
                let inside = c.len() == a.pref_lo.len()
                    && c.iter().zip(&a.pref_lo).zip(&a.pref_hi).all(|((v, l), h)| *v >= l - 1e-12 && *v <= h + 1e-12);
                if !inside {
                    return Err(Error::Validation(format!("agent {} type {c:?} outside its cube", a.name)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BindingReport {
    /// `(agent, type)` pairs with tight participation.
    pub sq: Vec<(usize, usize)>,
    /// `(agent, true type, misreport)` triples with tight incentive constraints.
    pub ic: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicSolution {
    pub value: f64,
    pub profiles: Vec<Vec<usize>>,
    pub probabilities: Vec<f64>,
    /// `table[p][j][i]`: expected units of task `i` for agent `j` at profile `p`.
    pub table: Vec<Vec<Vec<f64>>>,
    pub binding: BindingReport,
    /// Largest constraint violation found by re-substitution.
    pub max_violation: f64,
}

impl BicSolution {
    /// Whether the mechanism responds to the type profile.
    pub fn is_non_constant(&self, tol: f64) -> bool {
        let Some(first) = self.table.first() else { return false };
        self.table
            .iter()
            .any(|m| m.iter().flatten().zip(first.iter().flatten()).any(|(a, b)| (a - b).abs() > tol))
    }

    pub fn table_csv(&self) -> String {
        let mut out = String::from("profile,agent,task,value\n");
        for (p, m) in self.table.iter().enumerate() {
            for (j, row) in m.iter().enumerate() {
                for (i, v) in row.iter().enumerate() {
                    out.push_str(&format!("{p},{j},{i},{v}\n"));
                }
            }
        }
        out
    }
}

/// Interim expected bundle of agent `j` reporting type `t`.
fn interim(model: &FiniteTypeModel, profiles: &[(Vec<usize>, f64)], table: &[Vec<Vec<f64>>], j: usize, t: usize) -> Vec<f64> {
    let dim = table.first().map_or(0, |m| m[j].len());
    let pt = model.agents[j].probs[t];
    let mut acc = vec![0.0; dim];
    for ((prof, w), m) in profiles.iter().zip(table) {
        if prof[j] == t {
            for (a, v) in acc.iter_mut().zip(&m[j]) {
                *a += w / pt * v;
            }
        }
    }
    acc
}

/// Solves the designer's program over direct mechanisms on the grid:
/// minimize expected cost subject to interim participation (SQ),
/// interim incentive compatibility (IC) and ex-post clearing (MC).
///
/// Agents with a single type cannot be screened; their participation is
/// additionally imposed at every corner of their cube.
pub fn solve_bic_lp(s: &Scenario, model: &FiniteTypeModel) -> Result<BicSolution> {
    model.validate(s)?;
    let (ni, nj) = (s.task_count(), s.agent_count());
    let profiles = model.profiles();
    let np = profiles.len();
    let nv = np * nj * ni;
    if nv > MAX_VARIABLES {
        return Err(Error::Precondition(format!("{nv} variables exceed the oracle cap of {MAX_VARIABLES}")));
    }
    let var = |p: usize, j: usize, i: usize| (p * nj + j) * ni + i;
    let mut obj = vec![0.0; nv];
    for (p, (_, w)) in profiles.iter().enumerate() {
        for (j, a) in s.agents.iter().enumerate() {
            for i in 0..ni {
                obj[var(p, j, i)] = w * a.pi[i];
            }
        }
    }
    let mut lp = LpProblem::new(Sense::Minimize, obj);
    let supply = s.supply_f64();
    for p in 0..np {
        for i in 0..ni {
            let mut row = vec![0.0; nv];
            for j in 0..nj {
                row[var(p, j, i)] = 1.0;
            }
            lp.add_row(row, Relation::Eq, supply[i]);
        }
    }
    // Row for P(t) c . E_{-j}[m_j(. | t, .)].
    let interim_row = |j: usize, t: usize, c: &[f64]| {
        let mut row = vec![0.0; nv];
        for (p, (prof, w)) in profiles.iter().enumerate() {
            if prof[j] == t {
                for i in 0..ni {
                    row[var(p, j, i)] += w * c[i];
                }
            }
        }
        row
    };
    let mut sq_rows = Vec::new();
    let mut ic_rows = Vec::new();
    for (j, a) in s.agents.iter().enumerate() {
        let types = &model.agents[j];
        for (t, c) in types.types.iter().enumerate() {
            let pt = types.probs[t];
            let r = lp.add_row(interim_row(j, t, c), Relation::Le, pt * a.beta * dot(c, &a.sigma));
            sq_rows.push((r, j, t));
            if types.types.len() == 1 {
                for corner in cube_corners(&a.pref_lo, &a.pref_hi) {
                    lp.add_row(interim_row(j, t, &corner), Relation::Le, pt * a.beta * dot(&corner, &a.sigma));
                }
            }
        }
        for (t, c) in types.types.iter().enumerate() {
            for t2 in 0..types.types.len() {
                if t2 == t {
                    continue;
                }
                // Both interim bundles normalized by their own type probability.
                let mut row: Vec<f64> = interim_row(j, t, c).iter().map(|v| v / types.probs[t]).collect();
                for (x, y) in row.iter_mut().zip(interim_row(j, t2, c)) {
                    *x -= y / types.probs[t2];
                }
                let r = lp.add_row(row, Relation::Le, 0.0);
                ic_rows.push((r, j, t, t2));
            }
        }
    }
    let sol = solve_lp(&lp)?;
    if !sol.is_optimal() {
        return Err(Error::Numerical(format!(
            "designer LP ended {:?}; the status quo is always feasible",
            sol.status
        )));
    }
    let table: Vec<Vec<Vec<f64>>> = (0..np)
        .map(|p| (0..nj).map(|j| (0..ni).map(|i| sol.x[var(p, j, i)]).collect()).collect())
        .collect();
    let slack = |r: usize| lp.rhs[r] - dot(&lp.rows[r], &sol.x);
    let binding = BindingReport {
        sq: sq_rows.iter().filter(|(r, ..)| slack(*r).abs() <= 1e-7).map(|&(_, j, t)| (j, t)).collect(),
        ic: ic_rows
            .iter()
            .filter(|(r, ..)| slack(*r).abs() <= 1e-7)
            .map(|&(_, j, t, t2)| (j, t, t2))
            .collect(),
    };
    let max_violation = recheck(s, model, &profiles, &table);
    if max_violation > 1e-7 {
        return Err(Error::Numerical(format!("designer LP table violates constraints by {max_violation:.3e}")));
    }
    Ok(BicSolution {
        value: sol.objective,
        probabilities: profiles.iter().map(|(_, w)| *w).collect(),
        profiles: profiles.into_iter().map(|(p, _)| p).collect(),
        table,
        binding,
        max_violation,
    })
}

/// Largest violation of SQ, IC, MC and non-negativity, computed directly
/// from interim bundles.
fn recheck(s: &Scenario, model: &FiniteTypeModel, profiles: &[(Vec<usize>, f64)], table: &[Vec<Vec<f64>>]) -> f64 {
    let supply = s.supply_f64();
    let mut worst: f64 = 0.0;
    for m in table {
        for (i, &n) in supply.iter().enumerate() {
            let total: f64 = m.iter().map(|row| row[i]).sum();
            worst = worst.max((total - n).abs());
        }
        worst = worst.max(m.iter().flatten().fold(0.0f64, |a, &v| a.max(-v)));
    }
    for (j, a) in s.agents.iter().enumerate() {
        let types = &model.agents[j];
        let bundles: Vec<Vec<f64>> = (0..types.types.len()).map(|t| interim(model, profiles, table, j, t)).collect();
        for (t, c) in types.types.iter().enumerate() {
            let own = dot(c, &bundles[t]);
            worst = worst.max(own - a.beta * dot(c, &a.sigma));
            for other in &bundles {
                worst = worst.max(own - dot(c, other));
            }
        }
    }
    worst
}

/// Cost of the first-best assignment: every unit to the cheapest performer.
pub fn full_information_bound(s: &Scenario) -> f64 {
    s.supply_f64()
        .iter()
        .enumerate()
        .map(|(i, n)| n * s.agents.iter().map(|a| a.pi[i]).fold(f64::INFINITY, f64::min))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceValueReport {
    pub bic_value: f64,
    pub sq_cost: f64,
    pub full_information: f64,
    pub table_non_constant: bool,
    pub choice_improves: bool,
    pub fidelity: String,
}

pub fn choice_value_report(s: &Scenario, model: &FiniteTypeModel) -> Result<(ChoiceValueReport, BicSolution)> {
    let sol = solve_bic_lp(s, model)?;
    let sq_cost = s.status_quo_cost();
    let table_non_constant = sol.is_non_constant(1e-7);
    Ok((
        ChoiceValueReport {
            bic_value: sol.value,
            sq_cost,
            full_information: full_information_bound(s),
            table_non_constant,
            choice_improves: sol.value < sq_cost - 1e-7 && table_non_constant,
            fidelity: model.fidelity().to_string(),
        },
        sol,
    ))
}
