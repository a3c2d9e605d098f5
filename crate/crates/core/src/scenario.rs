//! Scenarios, expected assignments and lotteries over integer allocations.
//!
//! A [`Scenario`] fixes `I` task types with integer supplies, `J` agents with
//! performance weights `pi`, a status quo `sigma`, and each agent's cost
//! support as an axis-aligned cube `[pref_lo, pref_hi]` with either a uniform
//! or a discrete-grid distribution on it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{dot, TOL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Distribution {
    Uniform,
    Grid {
        points: Vec<Vec<f64>>,
        weights: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub name: String,
    pub pi: Vec<f64>,
    pub sigma: Vec<f64>,
    pub pref_lo: Vec<f64>,
    pub pref_hi: Vec<f64>,
    pub beta: f64,
    pub distribution: Distribution,
}

impl Agent {
    /// True when the cost cube is a single point.
    pub fn is_degenerate(&self) -> bool {
        self.pref_lo.iter().zip(&self.pref_hi).all(|(l, h)| h - l <= 0.0)
    }

    /// Draws one cost vector from the agent's distribution.
    pub fn sample_cost<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match &self.distribution {
            Distribution::Uniform => self
                .pref_lo
                .iter()
                .zip(&self.pref_hi)
                .map(|(&l, &h)| if h > l { l + (h - l) * rng.gen::<f64>() } else { l })
                .collect(),
            Distribution::Grid { points, weights } => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (p, w) in points.iter().zip(weights) {
                    acc += w;
                    if u < acc {
                        return p.clone();
                    }
                }
                points.last().cloned().unwrap_or_else(|| self.pref_lo.clone())
            }
        }
    }

    pub fn corners(&self) -> Vec<Vec<f64>> {
        cube_corners(&self.pref_lo, &self.pref_hi)
    }
}

/// All `2^I` corners of the cube `[lo, hi]`, deduplicated along degenerate
/// coordinates.
pub fn cube_corners(lo: &[f64], hi: &[f64]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = vec![Vec::with_capacity(lo.len())];
    for (&l, &h) in lo.iter().zip(hi) {
        let values: Vec<f64> = if h > l { vec![l, h] } else { vec![l] };
        out = out
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub task_names: Vec<String>,
    pub supply: Vec<u64>,
    pub agents: Vec<Agent>,
}

#[derive(Serialize, Deserialize)]
struct TaskFile {
    name: String,
    count: u64,
}

#[derive(Serialize, Deserialize)]
struct AgentFile {
    name: String,
    pi: Vec<f64>,
    sigma: Vec<f64>,
    pref_lo: Vec<f64>,
    pref_hi: Vec<f64>,
    #[serde(default = "one")]
    beta: f64,
    #[serde(default = "uniform")]
    distribution: Distribution,
}

fn one() -> f64 {
    1.0
}

fn uniform() -> Distribution {
    Distribution::Uniform
}

#[derive(Serialize, Deserialize)]
struct ScenarioFile {
    tasks: Vec<TaskFile>,
    agents: Vec<AgentFile>,
}

/// Parses and validates a scenario from its JSON text.
pub fn load_scenario(text: &str) -> Result<Scenario> {
    let file: ScenarioFile = serde_json::from_str(text)?;
    let s = Scenario {
        task_names: file.tasks.iter().map(|t| t.name.clone()).collect(),
        supply: file.tasks.iter().map(|t| t.count).collect(),
        agents: file
            .agents
            .into_iter()
            .map(|a| Agent {
                name: a.name,
                pi: a.pi,
                sigma: a.sigma,
                pref_lo: a.pref_lo,
                pref_hi: a.pref_hi,
                beta: a.beta,
                distribution: a.distribution,
            })
            .collect(),
    };
    s.validate()?;
    Ok(s)
}

impl Scenario {
    pub fn task_count(&self) -> usize {
        self.supply.len()
    }

    pub fn agent_count(&self) -> usize {
        self.agents.len()
    }

    pub fn supply_f64(&self) -> Vec<f64> {
        self.supply.iter().map(|&n| n as f64).collect()
    }

    pub fn sigma(&self) -> ExpectedAssignment {
        ExpectedAssignment(self.agents.iter().map(|a| a.sigma.clone()).collect())
    }

    pub fn to_json(&self) -> String {
        let file = ScenarioFile {
            tasks: self
                .task_names
                .iter()
                .zip(&self.supply)
                .map(|(name, &count)| TaskFile {
                    name: name.clone(),
                    count,
                })
                .collect(),
            agents: self
                .agents
                .iter()
                .map(|a| AgentFile {
                    name: a.name.clone(),
                    pi: a.pi.clone(),
                    sigma: a.sigma.clone(),
                    pref_lo: a.pref_lo.clone(),
                    pref_hi: a.pref_hi.clone(),
                    beta: a.beta,
                    distribution: a.distribution.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let i_count = self.task_count();
        if i_count < 2 {
            return Err(Error::Validation("at least two tasks are required".into()));
        }
        if self.agents.is_empty() {
            return Err(Error::Validation("at least one agent is required".into()));
        }
        if self.supply.iter().any(|&n| n == 0) {
            return Err(Error::Validation("task counts must be positive".into()));
        }
        for a in &self.agents {
            for (field, v) in [
                ("pi", &a.pi),
                ("sigma", &a.sigma),
                ("pref_lo", &a.pref_lo),
                ("pref_hi", &a.pref_hi),
            ] {
                if v.len() != i_count {
                    return Err(Error::Validation(format!(
                        "agent {}: field {} has length {}, expected {}",
                        a.name,
                        field,
                        v.len(),
                        i_count
                    )));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Validation(format!(
                        "agent {}: field {} must be finite",
                        a.name, field
                    )));
                }
            }
            if a.sigma.iter().any(|&x| x < 0.0) {
                return Err(Error::Validation(format!(
                    "agent {}: status quo must be non-negative",
                    a.name
                )));
            }
            if a.pref_lo.iter().any(|&x| x <= 0.0) {
                return Err(Error::Validation(format!(
                    "agent {}: costs must be strictly positive",
                    a.name
                )));
            }
            if a.pref_lo.iter().zip(&a.pref_hi).any(|(l, h)| l > h) {
                return Err(Error::Validation(format!(
                    "agent {}: pref_lo must not exceed pref_hi",
                    a.name
                )));
            }
            if !(a.beta >= 1.0) || !a.beta.is_finite() {
                return Err(Error::Validation(format!(
                    "agent {}: beta must be a finite number >= 1",
                    a.name
                )));
            }
            if let Distribution::Grid { points, weights } = &a.distribution {
                if points.is_empty() || points.len() != weights.len() {
                    return Err(Error::Validation(format!(
                        "agent {}: grid needs one weight per point",
                        a.name
                    )));
                }
                if weights.iter().any(|&w| !(w > 0.0)) {
                    return Err(Error::Validation(format!(
                        "agent {}: grid weights must be positive",
                        a.name
                    )));
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::Validation(format!(
                        "agent {}: grid weights sum to {total}, expected 1",
                        a.name
                    )));
                }
                for p in points {
                    if p.len() != i_count {
                        return Err(Error::Validation(format!(
                            "agent {}: grid point has wrong dimension",
                            a.name
                        )));
                    }
                    let inside = p
                        .iter()
                        .zip(a.pref_lo.iter().zip(&a.pref_hi))
                        .all(|(&c, (&l, &h))| c >= l - TOL && c <= h + TOL);
                    if !inside {
                        return Err(Error::Validation(format!(
                            "agent {}: grid point lies outside the preference cube",
                            a.name
                        )));
                    }
                }
            }
        }
        for i in 0..i_count {
            let total: f64 = self.agents.iter().map(|a| a.sigma[i]).sum();
            if (total - self.supply[i] as f64).abs() > TOL {
                return Err(Error::Validation(format!(
                    "status quo not market-clearing for task {} (sum {total}, supply {})",
                    self.task_names[i], self.supply[i]
                )));
            }
        }
        Ok(())
    }

    /// Social cost of the status quo, `sum_j pi_j . sigma_j`.
    pub fn status_quo_cost(&self) -> f64 {
        self.agents.iter().map(|a| dot(&a.pi, &a.sigma)).sum()
    }

    /// Social cost of an expected assignment.
    pub fn cost_of(&self, x: &ExpectedAssignment) -> f64 {
        self.agents
            .iter()
            .zip(&x.0)
            .map(|(a, row)| dot(&a.pi, row))
            .sum()
    }
}

/// Status-quo cost, free-function form.
pub fn status_quo_cost(s: &Scenario) -> f64 {
    s.status_quo_cost()
}

/// Agent-by-task matrix of expected task counts; row `j` is agent `j`'s bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedAssignment(pub Vec<Vec<f64>>);

impl ExpectedAssignment {
    pub fn column_sums(&self) -> Vec<f64> {
        let i_count = self.0.first().map_or(0, Vec::len);
        (0..i_count)
            .map(|i| self.0.iter().map(|row| row[i]).sum())
            .collect()
    }

    pub fn is_market_clearing(&self, supply: &[f64], tol: f64) -> bool {
        self.0.iter().flatten().all(|&v| v >= -tol)
            && self
                .column_sums()
                .iter()
                .zip(supply)
                .all(|(s, n)| (s - n).abs() <= tol)
    }

    pub fn max_abs_diff(&self, other: &ExpectedAssignment) -> f64 {
        self.0
            .iter()
            .flatten()
            .zip(other.0.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Deterministic allocation: agent-by-task integer counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegerAllocation(pub Vec<Vec<u64>>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lottery {
    pub outcomes: Vec<(IntegerAllocation, f64)>,
}

impl Lottery {
    pub fn mean(&self) -> ExpectedAssignment {
        let Some((first, _)) = self.outcomes.first() else {
            return ExpectedAssignment(Vec::new());
        };
        let mut m = vec![vec![0.0; first.0[0].len()]; first.0.len()];
        for (z, w) in &self.outcomes {
            for (mrow, zrow) in m.iter_mut().zip(&z.0) {
                for (mv, &zv) in mrow.iter_mut().zip(zrow) {
                    *mv += w * zv as f64;
                }
            }
        }
        ExpectedAssignment(m)
    }
}

/// Writes a market-clearing expected assignment as a lottery over integer
/// allocations.
///
/// Every task column is rounded by systematic sampling: fractional parts are
/// laid end to end on `[0, m)` and a single uniform offset `u` picks the
/// agents that receive the extra unit. All columns share `u`, so the support
/// has at most `J * I + 1` allocations and every column mean is exact.
pub fn decompose_expected(x: &ExpectedAssignment, supply: &[u64]) -> Result<Lottery> {
    const CLEAR_TOL: f64 = 1e-9;
    let j_count = x.0.len();
    if j_count == 0 {
        return Err(Error::Dimension("empty assignment".into()));
    }
    let i_count = supply.len();
    if x.0.iter().any(|r| r.len() != i_count) {
        return Err(Error::Dimension("assignment width differs from supply".into()));
    }
    let supply_f: Vec<f64> = supply.iter().map(|&n| n as f64).collect();
    if !x.is_market_clearing(&supply_f, CLEAR_TOL) {
        return Err(Error::Infeasible(
            "expected assignment violates market clearing".into(),
        ));
    }

    // Snap near-integers so that round-off does not create spurious atoms.
    let snap = |v: f64| {
        let r = v.round();
        if (v - r).abs() <= 1e-12 {
            r
        } else {
            v.max(0.0)
        }
    };
    let floors: Vec<Vec<u64>> = x
        .0
        .iter()
        .map(|r| r.iter().map(|&v| snap(v).floor() as u64).collect())
        .collect();
    let fracs: Vec<Vec<f64>> = x
        .0
        .iter()
        .zip(&floors)
        .map(|(r, f)| r.iter().zip(f).map(|(&v, &fl)| snap(v) - fl as f64).collect())
        .collect();

    // Breakpoints in [0, 1) induced by cumulative fractional sums per column.
    let mut breaks = vec![0.0];
    for i in 0..i_count {
        let mut acc = 0.0;
        for frac in &fracs {
            acc += frac[i];
            let b = acc - acc.floor();
            if b > 1e-12 && b < 1.0 - 1e-12 {
                breaks.push(b);
            }
        }
    }
    breaks.push(1.0);
    breaks.sort_by(|a, b| a.total_cmp(b));
    breaks.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);

    let mut outcomes: Vec<(IntegerAllocation, f64)> = Vec::new();
    for w in breaks.windows(2) {
        let weight = w[1] - w[0];
        if weight <= 1e-15 {
            continue;
        }
        let u = 0.5 * (w[0] + w[1]);
        let mut z = floors.clone();
        for i in 0..i_count {
            let mut lo = 0.0;
            for (j, frac) in fracs.iter().enumerate() {
                let hi = lo + frac[i];
                // Agent j gets the extra unit if some k + u falls in [lo, hi).
                let k = (lo - u).ceil();
                if k + u < hi - 1e-15 && frac[i] > 0.0 {
                    z[j][i] += 1;
                }
                lo = hi;
            }
        }
        let z = IntegerAllocation(z);
        if let Some(existing) = outcomes.iter_mut().find(|(e, _)| *e == z) {
            existing.1 += weight;
        } else {
            outcomes.push((z, weight));
        }
    }
    let lottery = Lottery { outcomes };
    debug_assert!(lottery.mean().max_abs_diff(x) <= 1e-8);
    Ok(lottery)
}

/// Strictly positive cost matrix, one row per agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceProfile(pub Vec<Vec<f64>>);

impl PreferenceProfile {
    pub fn draw<R: Rng + ?Sized>(s: &Scenario, rng: &mut R) -> Self {
        PreferenceProfile(s.agents.iter().map(|a| a.sample_cost(rng)).collect())
    }
}

/// The canonical two-task, two-agent fixture used throughout the tests.
pub const S2_JSON: &str = r#"{
  "tasks": [{"name": "A", "count": 2}, {"name": "B", "count": 2}],
  "agents": [
    {"name": "1", "pi": [1, 2], "sigma": [1, 1], "pref_lo": [1, 1], "pref_hi": [2, 2],
     "beta": 1, "distribution": {"kind": "uniform"}},
    {"name": "2", "pi": [2, 1], "sigma": [1, 1], "pref_lo": [1, 1], "pref_hi": [2, 2],
     "beta": 1, "distribution": {"kind": "uniform"}}
  ]
}"#;

pub fn s2() -> Scenario {
    load_scenario(S2_JSON).expect("S2 fixture is valid")
}
