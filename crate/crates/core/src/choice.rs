//! When does letting agents choose beat the status quo: scenario
//! diagnostics, bilateral improvements, and the feasible deviations of
//! constant mechanisms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dot;
use crate::error::{Error, Result};
use crate::geometry::separating_direction;
use crate::lp::{solve_lp, LpProblem, Relation, Sense};
use crate::mechanisms::BilateralMechanism;
use crate::prob::uniform_box_prob;
use crate::scenario::{cube_corners, Agent, Distribution, ExpectedAssignment, Scenario};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceDiagnostics {
    pub common_support: bool,
    pub status_quo_full_support: bool,
    pub nondegenerate_prefs: bool,
    pub identical_performance: bool,
    pub intersection_nonempty: bool,
    /// Number of coordinates along which the common intersection has width.
    pub support_dimension: usize,
    pub c_hat: Vec<f64>,
    /// Common support and full-support status quo.
    pub hypotheses: bool,
    /// Non-degenerate preferences and non-identical performance.
    pub condition_i: bool,
    pub all_beta_one: bool,
}

/// Whether an agent's type distribution puts all mass on one point.
pub fn distribution_is_degenerate(a: &Agent) -> bool {
    match &a.distribution {
        Distribution::Uniform => a.is_degenerate(),
        Distribution::Grid { points, weights } => {
            let support: Vec<&Vec<f64>> = points.iter().zip(weights).filter(|(_, &w)| w > 0.0).map(|(p, _)| p).collect();
            support.windows(2).all(|w| w[0] == w[1])
        }
    }
}

/// Per-coordinate bounds of the intersection of the agents' cubes.
fn intersection(agents: &[&Agent]) -> (Vec<f64>, Vec<f64>) {
    let dim = agents[0].pref_lo.len();
    let lo = (0..dim)
        .map(|i| agents.iter().map(|a| a.pref_lo[i]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let hi = (0..dim)
        .map(|i| agents.iter().map(|a| a.pref_hi[i]).fold(f64::INFINITY, f64::min))
        .collect();
    (lo, hi)
}

pub fn check_choice_conditions(s: &Scenario) -> ChoiceDiagnostics {
    let agents: Vec<&Agent> = s.agents.iter().collect();
    let first = agents[0];
    let common_support = agents
        .iter()
        .all(|a| a.pref_lo == first.pref_lo && a.pref_hi == first.pref_hi);
    let status_quo_full_support = agents.iter().all(|a| a.sigma.iter().all(|&v| v > 0.0));
    let nondegenerate_prefs = agents.iter().all(|a| !distribution_is_degenerate(a));
    let identical_performance = agents.iter().all(|a| a.pi == first.pi);
    let (c_hat, hi) = intersection(&agents);
    let intersection_nonempty = c_hat.iter().zip(&hi).all(|(l, h)| l <= h);
    let support_dimension = if intersection_nonempty {
        c_hat.iter().zip(&hi).filter(|(l, h)| l < h).count()
    } else {
        0
    };
    let hypotheses = common_support && status_quo_full_support;
    ChoiceDiagnostics {
        common_support,
        status_quo_full_support,
        nondegenerate_prefs,
        identical_performance,
        intersection_nonempty,
        support_dimension,
        c_hat,
        hypotheses,
        condition_i: nondegenerate_prefs && !identical_performance,
        all_beta_one: agents.iter().all(|a| a.beta == 1.0),
    }
}

fn linearly_independent(a: &[f64], b: &[f64]) -> bool {
    let (aa, bb, ab) = (dot(a, a), dot(b, b), dot(a, b));
    aa * bb - ab * ab > 1e-12 * aa * bb
}

/// Constructs an improving bilateral trade between `j1` and `j2`, or
/// `None` when performance coincides, the cubes meet in at most a point,
/// or either status quo bundle has a zero coordinate.
pub fn build_bilateral(s: &Scenario, j1: usize, j2: usize) -> Result<Option<BilateralMechanism>> {
    let nj = s.agent_count();
    if j1 >= nj || j2 >= nj || j1 == j2 {
        return Err(Error::Validation(format!("invalid agent pair ({j1}, {j2})")));
    }
    let (a1, a2) = (&s.agents[j1], &s.agents[j2]);
    let delta: Vec<f64> = a1.pi.iter().zip(&a2.pi).map(|(x, y)| x - y).collect();
    if delta.iter().all(|&d| d == 0.0) {
        return Ok(None);
    }
    if a1.sigma.iter().chain(&a2.sigma).any(|&v| v <= 0.0) {
        return Ok(None);
    }
    let (lo, hi) = intersection(&[a1, a2]);
    let widths: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| h - l).collect();
    if widths.iter().any(|&w| w < 0.0) || widths.iter().all(|&w| w == 0.0) {
        return Ok(None);
    }
    let center: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
    let mut axes: Vec<usize> = (0..widths.len()).filter(|&i| widths[i] > 0.0).collect();
    axes.sort_by(|&a, &b| widths[b].total_cmp(&widths[a]).then(a.cmp(&b)));
    let (ea, eb) = (axes[0], axes.get(1).copied());
    let mut c1 = center.clone();
    let mut c2 = center.clone();
    c1[ea] += 0.125 * widths[ea];
    c2[ea] -= 0.125 * widths[ea];
    if let Some(eb) = eb {
        c1[eb] -= 0.125 * widths[eb];
        c2[eb] += 0.125 * widths[eb];
    }
    let mut candidates = vec![(c1, c2)];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            lo.iter()
                .zip(&hi)
                .map(|(&l, &h)| if h > l { rng.gen_range(l..h) } else { l })
                .collect()
        };
        let p = draw(&mut rng);
        let q = draw(&mut rng);
        candidates.push((p, q));
    }
    for (c1, c2) in candidates {
        if !(linearly_independent(&c1, &c2) && linearly_independent(&c1, &delta) && linearly_independent(&c2, &delta)) {
            continue;
        }
        let gamma = match separating_direction(&c1, &c2, &delta)? {
            Some(g) => Some(g),
            None => separating_direction(&c2, &c1, &delta)?,
        };
        let Some(gamma) = gamma else { continue };
        // Largest scale with sigma_1 + t gamma >= 0 and sigma_2 - t gamma >= 0.
        let mut scale = f64::INFINITY;
        for (i, &g) in gamma.iter().enumerate() {
            if g < 0.0 {
                scale = scale.min(a1.sigma[i] / -g);
            } else if g > 0.0 {
                scale = scale.min(a2.sigma[i] / g);
            }
        }
        let scale = 0.999 * scale;
        return Ok(Some(BilateralMechanism {
            j1,
            j2,
            gamma: gamma.iter().map(|g| g * scale).collect(),
        }));
    }
    Ok(None)
}

/// The first agent pair, in lexicographic order, admitting a bilateral
/// improvement.
pub fn find_bilateral(s: &Scenario) -> Result<Option<BilateralMechanism>> {
    let nj = s.agent_count();
    for j1 in 0..nj {
        for j2 in j1 + 1..nj {
            if let Some(m) = build_bilateral(s, j1, j2)? {
                return Ok(Some(m));
            }
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbMethod {
    /// Exact whenever the distribution allows it.
    Auto,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilateralReport {
    pub cond_feasible: bool,
    pub cond_gain: bool,
    pub cond_first_willing: bool,
    pub cond_second_willing: bool,
    pub feasible: bool,
    pub improving: bool,
    /// `P(gamma.c_1 <= 0)` and `P(gamma.c_2 >= 0)`.
    pub trade_probabilities: [f64; 2],
    pub probability_stderr: [f64; 2],
    pub exact: bool,
    /// `(pi_1 - pi_2).gamma`, the cost change per executed trade.
    pub gain_per_trade: f64,
    pub expected_gain: f64,
    pub expected_cost: f64,
}

/// Probability that `c.v <= 0` under the agent's distribution.
fn weak_negative_prob(a: &Agent, v: &[f64], method: ProbMethod, samples: u64, rng: &mut ChaCha8Rng) -> (f64, f64, bool) {
    if method == ProbMethod::Auto {
        match &a.distribution {
            Distribution::Grid { points, weights } => {
                let p = points
                    .iter()
                    .zip(weights)
                    .filter(|(c, _)| dot(c, v) <= 0.0)
                    .map(|(_, w)| w)
                    .sum();
                return (p, 0.0, true);
            }
            Distribution::Uniform => {
                if let Some(p) = uniform_box_prob(&a.pref_lo, &a.pref_hi, v, false) {
                    return (p, 0.0, true);
                }
            }
        }
    }
    let n = samples.max(1);
    let hits = (0..n).filter(|_| dot(&a.sample_cost(rng), v) <= 0.0).count();
    let p = hits as f64 / n as f64;
    (p, (p * (1.0 - p) / n as f64).sqrt(), false)
}

/// Checks the four feasibility and improvement conditions of a bilateral
/// trade and evaluates its expected effect on social cost.
pub fn verify_bilateral(
    m: &BilateralMechanism,
    s: &Scenario,
    method: ProbMethod,
    samples: u64,
    seed: u64,
) -> Result<BilateralReport> {
    let nj = s.agent_count();
    if m.j1 >= nj || m.j2 >= nj || m.j1 == m.j2 || m.gamma.len() != s.task_count() {
        return Err(Error::Dimension("bilateral mechanism does not fit the scenario".into()));
    }
    let (a1, a2) = (&s.agents[m.j1], &s.agents[m.j2]);
    let g = &m.gamma;
    let cond_feasible = (0..g.len()).all(|i| a1.sigma[i] + g[i] >= 0.0 && a2.sigma[i] - g[i] >= 0.0);
    let delta: Vec<f64> = a1.pi.iter().zip(&a2.pi).map(|(x, y)| x - y).collect();
    let gain_per_trade = dot(&delta, g);
    let cond_gain = gain_per_trade < 0.0;
    let min1: f64 = (0..g.len()).map(|i| (g[i] * a1.pref_lo[i]).min(g[i] * a1.pref_hi[i])).sum();
    let max2: f64 = (0..g.len()).map(|i| (g[i] * a2.pref_lo[i]).max(g[i] * a2.pref_hi[i])).sum();
    let cond_first_willing = min1 < 0.0;
    let cond_second_willing = max2 > 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
    let (p1, e1, x1) = weak_negative_prob(a1, g, method, samples, &mut rng);
    rng.set_stream(1);
    let (p2, e2, x2) = weak_negative_prob(a2, &neg, method, samples, &mut rng);
    let improving = cond_feasible && cond_gain && cond_first_willing && cond_second_willing;
    let expected_gain = p1 * p2 * gain_per_trade;
    Ok(BilateralReport {
        cond_feasible,
        cond_gain,
        cond_first_willing,
        cond_second_willing,
        feasible: cond_feasible,
        improving,
        trade_probabilities: [p1, p2],
        probability_stderr: [e1, e2],
        exact: x1 && x2,
        gain_per_trade,
        expected_gain,
        expected_cost: s.status_quo_cost() + expected_gain,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantSlack {
    pub max_deviation: f64,
    pub maximizer: ExpectedAssignment,
    pub lhs: f64,
    pub rhs: f64,
    pub lemma_holds: bool,
    pub sign_patterns: usize,
}

/// Terms of the bound on how far a constant mechanism satisfying
/// participation and clearing can move from the status quo:
/// `sum (c_bar - c_hat)(m - beta sigma)^+` and `sum c_hat (beta - 1) sigma`.
pub fn lemma1_terms(s: &Scenario, m: &ExpectedAssignment, c_hat: &[f64]) -> (f64, f64) {
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for (j, a) in s.agents.iter().enumerate() {
        for i in 0..s.task_count() {
            let excess = m.0[j][i] - a.beta * a.sigma[i];
            lhs += (a.pref_hi[i] - c_hat[i]) * excess.max(0.0);
            rhs += c_hat[i] * (a.beta - 1.0) * a.sigma[i];
        }
    }
    (lhs, rhs)
}

const MAX_SIGN_CELLS: usize = 12;

/// Largest total deviation `sum |m - sigma|` over constant mechanisms `m`
/// that clear the market and respect participation at every cube corner.
///
/// The objective is maximized exactly by enumerating the sign pattern of
/// `m - sigma`, one LP per pattern.
pub fn constant_mechanism_slack(s: &Scenario) -> Result<ConstantSlack> {
    let d = check_choice_conditions(s);
    if !d.intersection_nonempty {
        return Err(Error::Precondition("agents' cost cubes have empty intersection".into()));
    }
    let (ni, nj) = (s.task_count(), s.agent_count());
    let cells = ni * nj;
    if cells > MAX_SIGN_CELLS {
        return Err(Error::Precondition(format!(
            "sign enumeration limited to {MAX_SIGN_CELLS} agent-task cells, scenario has {cells}"
        )));
    }
    let sigma: Vec<f64> = s.agents.iter().flat_map(|a| a.sigma.iter().copied()).collect();
    let supply = s.supply_f64();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for pattern in 0..(1usize << cells) {
        let sign = |k: usize| if pattern >> k & 1 == 1 { 1.0 } else { -1.0 };
        let obj: Vec<f64> = (0..cells).map(sign).collect();
        let mut lp = LpProblem::new(Sense::Maximize, obj);
        for k in 0..cells {
            // sign (m - sigma) >= 0 keeps the objective equal to sum |m - sigma|.
            if sign(k) > 0.0 {
                lp.set_bounds(k, sigma[k], f64::INFINITY);
            } else {
                lp.set_bounds(k, 0.0, sigma[k]);
            }
        }
        for i in 0..ni {
            let mut row = vec![0.0; cells];
            for j in 0..nj {
                row[j * ni + i] = 1.0;
            }
            lp.add_row(row, Relation::Eq, supply[i]);
        }
        for (j, a) in s.agents.iter().enumerate() {
            for c in cube_corners(&a.pref_lo, &a.pref_hi) {
                let mut row = vec![0.0; cells];
                row[j * ni..(j + 1) * ni].copy_from_slice(&c);
                lp.add_row(row, Relation::Le, a.beta * dot(&c, &a.sigma));
            }
        }
        let sol = solve_lp(&lp)?;
        if !sol.is_optimal() {
            continue;
        }
        let value = sol.objective - dot(&lp.objective, &sigma);
        if best.as_ref().map_or(true, |(b, _)| value > *b + 1e-12) {
            best = Some((value, sol.x));
        }
    }
    let (max_deviation, x) = best.ok_or_else(|| Error::Numerical("no sign pattern admitted the status quo".into()))?;
    let maximizer = ExpectedAssignment(x.chunks(ni).map(<[f64]>::to_vec).collect());
    let (lhs, rhs) = lemma1_terms(s, &maximizer, &d.c_hat);
    Ok(ConstantSlack {
        max_deviation: max_deviation.max(0.0),
        maximizer,
        lhs,
        rhs,
        lemma_holds: lhs <= rhs + 1e-7,
        sign_patterns: 1 << cells,
    })
}
