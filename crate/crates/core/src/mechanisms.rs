//! Trading protocols, myopic strategies, the ex-post optimal selection rule,
//! essential reduction, OSP verification and Monte-Carlo evaluation.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dot;
use crate::error::{Error, Result};
use crate::geometry::{check_polarized_directions, y_max, PolarizationReport};
use crate::lp::{solve_lp, LpProblem, Relation, Sense};
use crate::prob::KahanSum;
use crate::scenario::{ExpectedAssignment, Scenario};

const SET_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MenuKind {
    PolarizedRays,
    Remedial,
    Singleton,
}

/// One agent's menu of trading sets.
///
/// Actions are indexed as follows: for `PolarizedRays`, one action per
/// direction in `rays` (a zero direction is the singleton `{eta}`); for
/// `Remedial`, action 0 is `{eta}` and action 1 the box `[0, eta]`; for
/// `Singleton`, the single action 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Menu {
    pub agent: usize,
    pub kind: MenuKind,
    #[serde(default)]
    pub rays: Vec<Vec<f64>>,
    #[serde(default, skip_serializing)]
    pub endpoint: Vec<f64>,
    /// Points each action actually attains, set by [`essential_reduction`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attained: Option<Vec<Vec<Vec<f64>>>>,
}

pub const REMEDIAL_POINT: usize = 0;
pub const REMEDIAL_BOX: usize = 1;

impl Menu {
    pub fn polarized(agent: usize, endpoint: Vec<f64>, mut rays: Vec<Vec<f64>>) -> Self {
        let dim = endpoint.len();
        if !rays.iter().any(|r| r.iter().all(|&x| x == 0.0)) {
            rays.insert(0, vec![0.0; dim]);
        }
        Menu {
            agent,
            kind: MenuKind::PolarizedRays,
            rays,
            endpoint,
            attained: None,
        }
    }

    pub fn remedial(agent: usize, endpoint: Vec<f64>) -> Self {
        Menu {
            agent,
            kind: MenuKind::Remedial,
            rays: Vec::new(),
            endpoint,
            attained: None,
        }
    }

    pub fn singleton(agent: usize, endpoint: Vec<f64>) -> Self {
        Menu {
            agent,
            kind: MenuKind::Singleton,
            rays: Vec::new(),
            endpoint,
            attained: None,
        }
    }

    pub fn action_count(&self) -> usize {
        match self.kind {
            MenuKind::PolarizedRays => self.rays.len(),
            MenuKind::Remedial => 2,
            MenuKind::Singleton => 1,
        }
    }

    /// Index of the first zero direction of a ray menu.
    pub fn singleton_action(&self) -> usize {
        match self.kind {
            MenuKind::PolarizedRays => self
                .rays
                .iter()
                .position(|r| r.iter().all(|&x| x == 0.0))
                .unwrap_or(0),
            _ => 0,
        }
    }

    /// Whether `x` lies in the trading set of `action`.
    pub fn contains(&self, action: usize, x: &[f64]) -> bool {
        let eta = &self.endpoint;
        if x.len() != eta.len() {
            return false;
        }
        match self.kind {
            MenuKind::Singleton => close(x, eta),
            MenuKind::Remedial if action == REMEDIAL_POINT => close(x, eta),
            MenuKind::Remedial => x
                .iter()
                .zip(eta)
                .all(|(&v, &e)| v >= -SET_TOL && v <= e + SET_TOL),
            MenuKind::PolarizedRays => {
                let kappa = &self.rays[action];
                let kk = dot(kappa, kappa);
                if kk == 0.0 {
                    return close(x, eta);
                }
                let diff: Vec<f64> = x.iter().zip(eta).map(|(a, b)| a - b).collect();
                let y = dot(&diff, kappa) / kk;
                let ymax = y_max(eta, kappa);
                y >= -SET_TOL
                    && y <= ymax + SET_TOL
                    && diff.iter().zip(kappa).all(|(d, k)| (d - y * k).abs() <= 1e-7)
            }
        }
    }

    /// Directions that effectively trade: after reduction, a ray whose
    /// attained points are all `eta` counts as a singleton.
    pub fn effective_directions(&self) -> Vec<Vec<f64>> {
        let dim = self.endpoint.len();
        self.rays
            .iter()
            .enumerate()
            .map(|(k, r)| match &self.attained {
                Some(att) if att[k].iter().all(|p| close(p, &self.endpoint)) => vec![0.0; dim],
                _ => r.clone(),
            })
            .collect()
    }
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-7)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionProfile(pub Vec<usize>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub actions: Vec<usize>,
    pub allocation: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    Eopr,
    Table(Vec<TableEntry>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradingProtocol {
    pub endowment: Vec<Vec<f64>>,
    pub menus: Vec<Menu>,
    pub selection: Selection,
}

impl TradingProtocol {
    pub fn agent_count(&self) -> usize {
        self.menus.len()
    }

    pub fn action_counts(&self) -> Vec<usize> {
        self.menus.iter().map(Menu::action_count).collect()
    }

    /// Every action profile in lexicographic order.
    pub fn profiles(&self) -> Vec<ActionProfile> {
        all_profiles(&self.action_counts())
    }

    /// Checks dimensions, endowment clearing, and that table entries
    /// respect the chosen sets and clear the market.
    pub fn validate(&self, s: &Scenario) -> Result<()> {
        let (ni, nj) = (s.task_count(), s.agent_count());
        if self.endowment.len() != nj || self.endowment.iter().any(|r| r.len() != ni) {
            return Err(Error::Dimension(format!("endowment must be {nj}x{ni}")));
        }
        if self.menus.len() != nj {
            return Err(Error::Dimension(format!("expected {nj} menus, found {}", self.menus.len())));
        }
        let supply = s.supply_f64();
        let eta = ExpectedAssignment(self.endowment.clone());
        if self.endowment.iter().flatten().any(|&v| v < 0.0) || !eta.is_market_clearing(&supply, 1e-9) {
            return Err(Error::Validation("endowment not market-clearing".into()));
        }
        for (j, m) in self.menus.iter().enumerate() {
            if m.agent != j {
                return Err(Error::Validation(format!("menu {j} names agent {}", m.agent)));
            }
            if m.endpoint != self.endowment[j] {
                return Err(Error::Validation(format!("menu {j} endpoint differs from endowment")));
            }
            if m.kind == MenuKind::PolarizedRays {
                if m.rays.is_empty() || m.rays.iter().any(|r| r.len() != ni) {
                    return Err(Error::Dimension(format!("menu {j} rays must have length {ni}")));
                }
            }
        }
        if let Selection::Table(entries) = &self.selection {
            let counts = self.action_counts();
            let expected: usize = counts.iter().product();
            let mut seen = std::collections::HashSet::new();
            for e in entries {
                if e.actions.len() != nj || e.actions.iter().zip(&counts).any(|(a, c)| a >= c) {
                    return Err(Error::Validation(format!("table profile {:?} out of range", e.actions)));
                }
                if !seen.insert(e.actions.clone()) {
                    return Err(Error::Validation(format!("duplicate table profile {:?}", e.actions)));
                }
                let x = ExpectedAssignment(e.allocation.clone());
                if e.allocation.len() != nj || !x.is_market_clearing(&supply, 1e-7) {
                    return Err(Error::Validation(format!(
                        "table entry {:?} not market-clearing",
                        e.actions
                    )));
                }
                for (j, m) in self.menus.iter().enumerate() {
                    if !m.contains(e.actions[j], &e.allocation[j]) {
                        return Err(Error::Validation(format!(
                            "table entry {:?} leaves agent {j}'s chosen set",
                            e.actions
                        )));
                    }
                }
            }
            if seen.len() != expected {
                return Err(Error::Validation(format!(
                    "table covers {} of {expected} profiles",
                    seen.len()
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("protocol serializes")
    }
}

pub fn all_profiles(counts: &[usize]) -> Vec<ActionProfile> {
    let mut out = vec![Vec::new()];
    for &c in counts {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..c).map(move |k| {
                    let mut q = p.clone();
                    q.push(k);
                    q
                })
            })
            .collect();
    }
    out.into_iter().map(ActionProfile).collect()
}

/// Parses a protocol file and validates it against `s`. Ray menus
/// without a zero direction get one prepended.
pub fn load_protocol(text: &str, s: &Scenario) -> Result<TradingProtocol> {
    let mut p: TradingProtocol = serde_json::from_str(text)?;
    if p.endowment.len() != p.menus.len() {
        return Err(Error::Dimension("endowment rows and menus differ in count".into()));
    }
    for (j, m) in p.menus.iter_mut().enumerate() {
        m.endpoint = p.endowment[j].clone();
        if m.kind == MenuKind::PolarizedRays && !m.rays.iter().any(|r| r.iter().all(|&x| x == 0.0)) {
            let dim = m.endpoint.len();
            m.rays.insert(0, vec![0.0; dim]);
        }
    }
    p.validate(s)?;
    Ok(p)
}

pub fn singleton_protocol(s: &Scenario) -> TradingProtocol {
    let sigma = s.sigma().0;
    TradingProtocol {
        menus: sigma.iter().enumerate().map(|(j, e)| Menu::singleton(j, e.clone())).collect(),
        endowment: sigma,
        selection: Selection::Eopr,
    }
}

/// The two-task menu `{0, (1,-1), (-1,1)}` for every agent.
pub fn two_ray_protocol(s: &Scenario) -> Result<TradingProtocol> {
    if s.task_count() != 2 {
        return Err(Error::Dimension("two-ray menus need exactly two tasks".into()));
    }
    let sigma = s.sigma().0;
    Ok(TradingProtocol {
        menus: sigma
            .iter()
            .enumerate()
            .map(|(j, e)| Menu::polarized(j, e.clone(), vec![vec![0.0, 0.0], vec![1.0, -1.0], vec![-1.0, 1.0]]))
            .collect(),
        endowment: sigma,
        selection: Selection::Eopr,
    })
}

/// Agent `j1` may trade `sigma + gamma`, agent `j2` may trade `sigma - gamma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilateralMechanism {
    pub j1: usize,
    pub j2: usize,
    pub gamma: Vec<f64>,
}

impl BilateralMechanism {
    /// The mechanism as a finite protocol: trade happens iff both agents
    /// opt in.
    pub fn to_protocol(&self, s: &Scenario) -> TradingProtocol {
        let sigma = s.sigma().0;
        let dim = s.task_count();
        let neg: Vec<f64> = self.gamma.iter().map(|g| -g).collect();
        let menus: Vec<Menu> = sigma
            .iter()
            .enumerate()
            .map(|(j, e)| {
                if j == self.j1 {
                    Menu::polarized(j, e.clone(), vec![vec![0.0; dim], self.gamma.clone()])
                } else if j == self.j2 {
                    Menu::polarized(j, e.clone(), vec![vec![0.0; dim], neg.clone()])
                } else {
                    Menu::singleton(j, e.clone())
                }
            })
            .collect();
        let counts: Vec<usize> = menus.iter().map(Menu::action_count).collect();
        let table = all_profiles(&counts)
            .into_iter()
            .map(|a| {
                let mut x = sigma.clone();
                if a.0[self.j1] == 1 && a.0[self.j2] == 1 {
                    for i in 0..dim {
                        x[self.j1][i] += self.gamma[i];
                        x[self.j2][i] -= self.gamma[i];
                    }
                }
                TableEntry {
                    actions: a.0,
                    allocation: x,
                }
            })
            .collect();
        TradingProtocol {
            endowment: sigma,
            menus,
            selection: Selection::Table(table),
        }
    }
}

/// The action a cost-minimizing agent takes looking only at its own set:
/// the ray with the most negative `c.kappa < 0`, else the singleton; the
/// box for remedial menus. On a reduced menu only effective directions
/// compete.
pub fn myopic_strategy(menu: &Menu, c: &[f64]) -> usize {
    match menu.kind {
        MenuKind::Singleton => 0,
        MenuKind::Remedial => REMEDIAL_BOX,
        MenuKind::PolarizedRays => {
            let chosen = match &menu.attained {
                None => crate::prob::myopic_index(c, &menu.rays),
                Some(_) => crate::prob::myopic_index(c, &menu.effective_directions()),
            };
            chosen.unwrap_or_else(|| menu.singleton_action())
        }
    }
}

/// Cost-minimizing market-clearing selection from the chosen sets.
pub fn eopr_select(p: &TradingProtocol, a: &ActionProfile, s: &Scenario) -> Result<ExpectedAssignment> {
    let (ni, nj) = (s.task_count(), s.agent_count());
    if a.0.len() != nj || a.0.iter().zip(&p.menus).any(|(&k, m)| k >= m.action_count()) {
        return Err(Error::Validation(format!("action profile {:?} out of range", a.0)));
    }
    enum Var {
        Step { j: usize, col: usize },
        Box { j: usize, col: usize },
    }
    let mut vars = Vec::new();
    let mut obj = Vec::new();
    let mut bounds = Vec::new();
    for (j, m) in p.menus.iter().enumerate() {
        let eta = &p.endowment[j];
        match m.kind {
            MenuKind::PolarizedRays => {
                let kappa = &m.rays[a.0[j]];
                if kappa.iter().any(|&x| x != 0.0) {
                    vars.push(Var::Step { j, col: obj.len() });
                    obj.push(dot(&s.agents[j].pi, kappa));
                    bounds.push((0.0, y_max(eta, kappa)));
                }
            }
            MenuKind::Remedial if a.0[j] == REMEDIAL_BOX => {
                vars.push(Var::Box { j, col: obj.len() });
                for i in 0..ni {
                    obj.push(s.agents[j].pi[i]);
                    bounds.push((0.0, eta[i]));
                }
            }
            _ => {}
        }
    }
    let mut x = p.endowment.clone();
    if vars.is_empty() {
        return Ok(ExpectedAssignment(x));
    }
    let mut lp = LpProblem::new(Sense::Minimize, obj);
    for (k, &(l, u)) in bounds.iter().enumerate() {
        lp.set_bounds(k, l, u);
    }
    let nv = lp.var_count();
    for i in 0..ni {
        let mut row = vec![0.0; nv];
        let mut rhs = 0.0;
        for v in &vars {
            match *v {
                Var::Step { j, col } => row[col] = p.menus[j].rays[a.0[j]][i],
                Var::Box { j, col } => {
                    row[col + i] = 1.0;
                    rhs += p.endowment[j][i];
                }
            }
        }
        // Box agents' endowment moves to the left-hand side.
        lp.add_row(row, Relation::Eq, rhs);
    }
    let sol = solve_lp(&lp)?;
    if !sol.is_optimal() {
        return Err(Error::Numerical(format!("selection LP ended {:?}", sol.status)));
    }
    for v in &vars {
        match *v {
            Var::Step { j, col } => {
                let kappa = &p.menus[j].rays[a.0[j]];
                for i in 0..ni {
                    x[j][i] = snap(p.endowment[j][i] + sol.x[col] * kappa[i]);
                }
            }
            Var::Box { j, col } => {
                for i in 0..ni {
                    x[j][i] = snap(sol.x[col + i]);
                }
            }
        }
    }
    Ok(ExpectedAssignment(x))
}

fn snap(v: f64) -> f64 {
    if v.abs() < 1e-12 {
        0.0
    } else {
        v
    }
}

/// Applies the protocol's selection rule.
pub fn select(p: &TradingProtocol, a: &ActionProfile, s: &Scenario) -> Result<ExpectedAssignment> {
    match &p.selection {
        Selection::Eopr => eopr_select(p, a, s),
        Selection::Table(t) => t
            .iter()
            .find(|e| e.actions == a.0)
            .map(|e| ExpectedAssignment(e.allocation.clone()))
            .ok_or_else(|| Error::Validation(format!("table has no entry for {:?}", a.0))),
    }
}

/// Replaces ex-post optimal selection by its table over all action profiles.
pub fn tabulate(p: &TradingProtocol, s: &Scenario) -> Result<TradingProtocol> {
    let table = p
        .profiles()
        .into_iter()
        .map(|a| {
            let x = select(p, &a, s)?;
            Ok(TableEntry {
                actions: a.0,
                allocation: x.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TradingProtocol {
        selection: Selection::Table(table),
        ..p.clone()
    })
}

/// Shrinks each trading set to the points the table attains.
pub fn essential_reduction(p: &TradingProtocol) -> Result<TradingProtocol> {
    let Selection::Table(table) = &p.selection else {
        return Err(Error::Precondition("essential reduction needs a fixed-table protocol".into()));
    };
    let mut out = p.clone();
    for (j, m) in out.menus.iter_mut().enumerate() {
        let mut attained: Vec<Vec<Vec<f64>>> = vec![Vec::new(); m.action_count()];
        for e in table {
            let pt = &e.allocation[j];
            let set = &mut attained[e.actions[j]];
            if !set.iter().any(|q| close(q, pt)) {
                set.push(pt.clone());
            }
        }
        for set in &mut attained {
            set.sort_by(|a, b| a.partial_cmp(b).expect("finite allocations"));
        }
        m.attained = Some(attained);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralFailure {
    pub agent: usize,
    pub clauses: Vec<String>,
    pub violating_pair: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralVerdict {
    pub ok: bool,
    pub failures: Vec<StructuralFailure>,
    pub reports: Vec<Option<PolarizationReport>>,
}

/// Sufficient condition for OSP: every menu is remedial, a singleton, or
/// polarized rays. Reduced protocols are judged on their effective
/// directions.
pub fn verify_osp_structural(p: &TradingProtocol) -> Result<StructuralVerdict> {
    let mut failures = Vec::new();
    let mut reports = Vec::new();
    for (j, m) in p.menus.iter().enumerate() {
        if m.kind != MenuKind::PolarizedRays {
            reports.push(None);
            continue;
        }
        let r = check_polarized_directions(&m.effective_directions())?;
        if !r.verdict {
            failures.push(StructuralFailure {
                agent: j,
                clauses: r.failed_clauses().into_iter().map(String::from).collect(),
                violating_pair: r.violating_pair,
            });
        }
        reports.push(Some(r));
    }
    Ok(StructuralVerdict {
        ok: failures.is_empty(),
        failures,
        reports,
    })
}

/// A violated obvious-dominance comparison: under `prescribed`, the others
/// playing `worst_others` give a higher workload than the deviation
/// `deviation` gives against `best_others`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OspWitness {
    pub agent: usize,
    pub c: Vec<f64>,
    pub prescribed: usize,
    pub deviation: usize,
    pub worst_others: Vec<usize>,
    pub best_others: Vec<usize>,
    pub sup_prescribed: f64,
    pub inf_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BruteForceVerdict {
    pub ok: bool,
    pub witness: Option<OspWitness>,
    pub comparisons: usize,
}

/// Exact enumeration of the obvious-dominance inequalities
/// `sup c.P_j(s(c), .) <= inf c.P_j(k', .)` over the given per-agent type
/// grids. `strategy(j, c)` gives the prescribed action.
pub fn verify_osp_bruteforce(
    p: &TradingProtocol,
    grids: &[Vec<Vec<f64>>],
    strategy: &dyn Fn(usize, &[f64]) -> usize,
) -> Result<BruteForceVerdict> {
    let Selection::Table(table) = &p.selection else {
        return Err(Error::Precondition("brute-force OSP check needs a fixed-table protocol".into()));
    };
    if grids.len() != p.agent_count() {
        return Err(Error::Dimension("one type grid per agent required".into()));
    }
    let counts = p.action_counts();
    let mut comparisons = 0usize;
    for (j, grid) in grids.iter().enumerate() {
        // Rows of the table grouped by agent j's own action.
        let mut by_action: Vec<Vec<(&[usize], &[f64])>> = vec![Vec::new(); counts[j]];
        for e in table {
            by_action[e.actions[j]].push((&e.actions, &e.allocation[j]));
        }
        for c in grid {
            let s = strategy(j, c);
            let (sup, sup_at) = by_action[s]
                .iter()
                .map(|(a, x)| (dot(c, x), *a))
                .fold((f64::NEG_INFINITY, &[][..]), |acc, v| if v.0 > acc.0 { v } else { acc });
            for k in 0..counts[j] {
                if k == s {
                    continue;
                }
                comparisons += 1;
                let (inf, inf_at) = by_action[k]
                    .iter()
                    .map(|(a, x)| (dot(c, x), *a))
                    .fold((f64::INFINITY, &[][..]), |acc, v| if v.0 < acc.0 { v } else { acc });
                if sup > inf + 1e-9 {
                    let others = |a: &[usize]| a.iter().enumerate().filter(|(i, _)| *i != j).map(|(_, &v)| v).collect();
                    return Ok(BruteForceVerdict {
                        ok: false,
                        witness: Some(OspWitness {
                            agent: j,
                            c: c.clone(),
                            prescribed: s,
                            deviation: k,
                            worst_others: others(sup_at),
                            best_others: others(inf_at),
                            sup_prescribed: sup,
                            inf_deviation: inf,
                        }),
                        comparisons,
                    });
                }
            }
        }
    }
    Ok(BruteForceVerdict {
        ok: true,
        witness: None,
        comparisons,
    })
}

/// Myopic strategies for every agent of `p`, as expected by
/// [`verify_osp_bruteforce`].
pub fn myopic_strategies(p: &TradingProtocol) -> impl Fn(usize, &[f64]) -> usize + '_ {
    move |j, c| myopic_strategy(&p.menus[j], c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentStats {
    pub mean_workload: f64,
    pub mean_status_quo_workload: f64,
    pub trade_frequency: f64,
    pub participation_violations: u64,
    /// Largest `c.mu - c.sigma` seen.
    pub max_participation_excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationStats {
    pub seed: u64,
    pub samples: u64,
    pub workers: usize,
    pub mean_cost: f64,
    pub stderr: f64,
    pub sq_cost: f64,
    pub structurally_osp: bool,
    pub agents: Vec<AgentStats>,
}

#[derive(Default, Clone)]
struct Partial {
    n: u64,
    cost: KahanSum,
    cost_sq: KahanSum,
    workload: Vec<KahanSum>,
    sq_workload: Vec<KahanSum>,
    trades: Vec<u64>,
    violations: Vec<u64>,
    max_excess: Vec<f64>,
}

/// Monte-Carlo evaluation of the expected social cost under myopic play.
///
/// Draws are split into `workers` contiguous chunks, chunk `w` using the
/// ChaCha stream `w` of `seed`; results are reproducible for a fixed
/// `(seed, workers)`.
pub fn simulate_mechanism(
    s: &Scenario,
    p: &TradingProtocol,
    samples: u64,
    seed: u64,
    workers: usize,
) -> Result<SimulationStats> {
    p.validate(s)?;
    let workers = workers.max(1);
    let structurally_osp = verify_osp_structural(p)?.ok;
    let nj = s.agent_count();
    let sigma = s.sigma().0;
    let chunk = |w: usize| -> Result<Partial> {
        let lo = samples * w as u64 / workers as u64;
        let hi = samples * (w as u64 + 1) / workers as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(w as u64);
        let mut cache: HashMap<Vec<usize>, ExpectedAssignment> = HashMap::new();
        let mut part = Partial {
            workload: vec![KahanSum::new(); nj],
            sq_workload: vec![KahanSum::new(); nj],
            trades: vec![0; nj],
            violations: vec![0; nj],
            max_excess: vec![f64::NEG_INFINITY; nj],
            ..Partial::default()
        };
        for _ in lo..hi {
            let costs: Vec<Vec<f64>> = s.agents.iter().map(|a| a.sample_cost(&mut rng)).collect();
            let actions: Vec<usize> = (0..nj).map(|j| myopic_strategy(&p.menus[j], &costs[j])).collect();
            let x = match cache.get(&actions) {
                Some(x) => x,
                None => {
                    let x = select(p, &ActionProfile(actions.clone()), s)?;
                    cache.entry(actions).or_insert(x)
                }
            };
            let cost = s.cost_of(x);
            part.n += 1;
            part.cost.add(cost);
            part.cost_sq.add(cost * cost);
            for j in 0..nj {
                let w = dot(&costs[j], &x.0[j]);
                let w0 = dot(&costs[j], &sigma[j]);
                part.workload[j].add(w);
                part.sq_workload[j].add(w0);
                if !close(&x.0[j], &p.endowment[j]) {
                    part.trades[j] += 1;
                }
                let excess = w - w0;
                if excess > 1e-9 {
                    part.violations[j] += 1;
                }
                part.max_excess[j] = part.max_excess[j].max(excess);
            }
        }
        Ok(part)
    };
    let parts: Vec<Partial> = (0..workers)
        .into_par_iter()
        .map(chunk)
        .collect::<Result<Vec<_>>>()?;
    let n = samples.max(1) as f64;
    let mut cost = KahanSum::new();
    let mut cost_sq = KahanSum::new();
    for part in &parts {
        cost.add(part.cost.total());
        cost_sq.add(part.cost_sq.total());
    }
    let mean = cost.total() / n;
    let var = (cost_sq.total() / n - mean * mean).max(0.0);
    let stderr = if samples > 1 { (var * n / (n - 1.0) / n).sqrt() } else { 0.0 };
    let agents = (0..nj)
        .map(|j| {
            let mut w = KahanSum::new();
            let mut w0 = KahanSum::new();
            let mut trades = 0;
            let mut violations = 0;
            let mut excess = f64::NEG_INFINITY;
            for part in &parts {
                if part.n == 0 {
                    continue;
                }
                w.add(part.workload[j].total());
                w0.add(part.sq_workload[j].total());
                trades += part.trades[j];
                violations += part.violations[j];
                excess = excess.max(part.max_excess[j]);
            }
            AgentStats {
                mean_workload: w.total() / n,
                mean_status_quo_workload: w0.total() / n,
                trade_frequency: trades as f64 / n,
                participation_violations: violations,
                max_participation_excess: excess,
            }
        })
        .collect();
    Ok(SimulationStats {
        seed,
        samples,
        workers,
        mean_cost: mean,
        stderr,
        sq_cost: s.status_quo_cost(),
        structurally_osp,
        agents,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoPriceBinary {
    pub protocol: TradingProtocol,
    /// `p1_j <= p2_j` per agent.
    pub osp: Vec<bool>,
}

/// Per agent: sell task 2 for task 1 at price `p1_j`, or buy task 2
/// back at `p2_j`; rays `(1, -p1_j)` and `(-1, p2_j)` plus the singleton.
pub fn build_two_price_binary(s: &Scenario, p1: &[f64], p2: &[f64]) -> Result<TwoPriceBinary> {
    if s.task_count() != 2 {
        return Err(Error::Dimension("two-price classification needs exactly two tasks".into()));
    }
    let nj = s.agent_count();
    if p1.len() != nj || p2.len() != nj {
        return Err(Error::Dimension(format!("expected {nj} prices per side")));
    }
    if p1.iter().chain(p2).any(|&v| !(v > 0.0)) {
        return Err(Error::Validation("prices must be positive".into()));
    }
    let sigma = s.sigma().0;
    let menus = sigma
        .iter()
        .enumerate()
        .map(|(j, e)| Menu::polarized(j, e.clone(), vec![vec![0.0, 0.0], vec![1.0, -p1[j]], vec![-1.0, p2[j]]]))
        .collect();
    Ok(TwoPriceBinary {
        protocol: TradingProtocol {
            endowment: sigma,
            menus,
            selection: Selection::Eopr,
        },
        osp: p1.iter().zip(p2).map(|(a, b)| a <= b).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::s2;

    fn profile(a: &[usize]) -> ActionProfile {
        ActionProfile(a.to_vec())
    }

    #[test]
    fn singletons_select_status_quo() {
        let s = s2();
        let p = two_ray_protocol(&s).unwrap();
        let x = eopr_select(&p, &profile(&[0, 0]), &s).unwrap();
        assert_eq!(x, s.sigma());
        assert_eq!(s.cost_of(&x), 6.0);
    }

    #[test]
    fn matched_trade_costs_four() {
        let s = s2();
        let p = two_ray_protocol(&s).unwrap();
        let x = eopr_select(&p, &profile(&[1, 2]), &s).unwrap();
        assert_eq!(x.0, vec![vec![2.0, 0.0], vec![0.0, 2.0]]);
        assert_eq!(s.cost_of(&x), 4.0);
    }

    #[test]
    fn one_sided_trade_is_blocked() {
        let s = s2();
        let p = two_ray_protocol(&s).unwrap();
        let x = eopr_select(&p, &profile(&[1, 0]), &s).unwrap();
        assert_eq!(x, s.sigma());
        // Trading against comparative advantage is never selected.
        let x = eopr_select(&p, &profile(&[2, 1]), &s).unwrap();
        assert_eq!(x, s.sigma());
    }

    #[test]
    fn remedial_agents_can_shed_work() {
        let s = crate::scenario::load_scenario(
            r#"{"tasks": [{"name": "A", "count": 3}, {"name": "B", "count": 3}],
                "agents": [
                  {"name": "x", "pi": [1, 2], "sigma": [1, 1], "pref_lo": [1, 1], "pref_hi": [2, 2]},
                  {"name": "y", "pi": [2, 1], "sigma": [1, 1], "pref_lo": [1, 1], "pref_hi": [2, 2]},
                  {"name": "z", "pi": [3, 3], "sigma": [1, 1], "pref_lo": [1, 1], "pref_hi": [2, 2]}]}"#,
        )
        .unwrap();
        let sigma = s.sigma().0;
        let p = TradingProtocol {
            menus: vec![
                Menu::polarized(0, sigma[0].clone(), vec![vec![2.0, -1.0]]),
                Menu::polarized(1, sigma[1].clone(), vec![vec![-1.0, 1.0]]),
                Menu::remedial(2, sigma[2].clone()),
            ],
            endowment: sigma,
            selection: Selection::Eopr,
        };
        let x = eopr_select(&p, &profile(&[1, 1, REMEDIAL_BOX]), &s).unwrap();
        assert_eq!(x.0, vec![vec![3.0, 0.0], vec![0.0, 2.0], vec![0.0, 1.0]]);
        // Choosing the point instead pins the remedial agent.
        let x = eopr_select(&p, &profile(&[1, 1, REMEDIAL_POINT]), &s).unwrap();
        assert_eq!(x, s.sigma());
        assert!(verify_osp_structural(&p).unwrap().ok);
    }

    #[test]
    fn myopic_choices() {
        let m = Menu::polarized(0, vec![1.0, 1.0], vec![vec![0.0, 0.0], vec![1.0, -1.0], vec![-1.0, 1.0]]);
        assert_eq!(myopic_strategy(&m, &[1.0, 2.0]), 1);
        assert_eq!(myopic_strategy(&m, &[1.0, 1.0]), 0);
        assert_eq!(myopic_strategy(&m, &[2.0, 1.0]), 2);
        assert_eq!(myopic_strategy(&Menu::remedial(0, vec![1.0, 1.0]), &[5.0, 1.0]), REMEDIAL_BOX);
    }

    #[test]
    fn bilateral_reduction_keeps_three_points() {
        let s = s2();
        let m = BilateralMechanism {
            j1: 0,
            j2: 1,
            gamma: vec![1.0, -1.0],
        };
        let p = m.to_protocol(&s);
        p.validate(&s).unwrap();
        let r = essential_reduction(&p).unwrap();
        let a0 = r.menus[0].attained.as_ref().unwrap();
        assert_eq!(a0[0], vec![vec![1.0, 1.0]]);
        assert_eq!(a0[1], vec![vec![1.0, 1.0], vec![2.0, 0.0]]);
        let a1 = r.menus[1].attained.as_ref().unwrap();
        assert_eq!(a1[1], vec![vec![0.0, 2.0], vec![1.0, 1.0]]);
        assert_eq!(essential_reduction(&r).unwrap(), r);
    }

    #[test]
    fn far_points_never_selected_are_dropped() {
        // Agent 1 may sell up to two units but the partner never absorbs more than one.
        let s = s2();
        let sigma = s.sigma().0;
        let p = TradingProtocol {
            menus: vec![
                Menu::polarized(0, sigma[0].clone(), vec![vec![2.0, -2.0]]),
                Menu::polarized(1, sigma[1].clone(), vec![vec![-1.0, 1.0]]),
            ],
            endowment: sigma,
            selection: Selection::Eopr,
        };
        let r = essential_reduction(&tabulate(&p, &s).unwrap()).unwrap();
        let a0 = r.menus[0].attained.as_ref().unwrap();
        assert_eq!(a0[1], vec![vec![1.0, 1.0], vec![2.0, 0.0]]);
    }

    #[test]
    fn reduction_needs_a_table() {
        let s = s2();
        assert!(essential_reduction(&two_ray_protocol(&s).unwrap()).is_err());
    }

    #[test]
    fn structural_checks() {
        let s = s2();
        assert!(verify_osp_structural(&two_ray_protocol(&s).unwrap()).unwrap().ok);
        let sigma = s.sigma().0;
        let bad = TradingProtocol {
            menus: vec![
                Menu::polarized(0, sigma[0].clone(), vec![vec![1.0, -1.0], vec![2.0, -1.0]]),
                Menu::singleton(1, sigma[1].clone()),
            ],
            endowment: sigma.clone(),
            selection: Selection::Eopr,
        };
        let v = verify_osp_structural(&bad).unwrap();
        assert!(!v.ok);
        assert_eq!(v.failures[0].agent, 0);
        assert!(v.failures[0].clauses.contains(&"polarization".to_string()));
        let remedial = TradingProtocol {
            menus: vec![Menu::remedial(0, sigma[0].clone()), Menu::remedial(1, sigma[1].clone())],
            endowment: sigma,
            selection: Selection::Eopr,
        };
        assert!(verify_osp_structural(&remedial).unwrap().ok);
    }

    #[test]
    fn bilateral_bruteforce() {
        let s = s2();
        let m = BilateralMechanism {
            j1: 0,
            j2: 1,
            gamma: vec![1.0, -1.0],
        };
        let p = m.to_protocol(&s);
        let grids: Vec<_> = s.agents.iter().map(|a| a.corners()).collect();
        let natural = myopic_strategies(&p);
        assert!(verify_osp_bruteforce(&p, &grids, &natural).unwrap().ok);
        let inverted = |j: usize, c: &[f64]| {
            if j == 0 {
                usize::from(dot(&[1.0, -1.0], c) > 0.0)
            } else {
                myopic_strategy(&p.menus[j], c)
            }
        };
        let v = verify_osp_bruteforce(&p, &grids, &inverted).unwrap();
        assert!(!v.ok);
        let w = v.witness.unwrap();
        assert_eq!((w.agent, w.c.clone()), (0, vec![1.0, 2.0]));
        assert!(w.sup_prescribed > w.inf_deviation);
    }

    #[test]
    fn singleton_only_is_trivially_osp() {
        let s = s2();
        let p = tabulate(&singleton_protocol(&s), &s).unwrap();
        let grids: Vec<_> = s.agents.iter().map(|a| a.corners()).collect();
        let v = verify_osp_bruteforce(&p, &grids, &myopic_strategies(&p)).unwrap();
        assert!(v.ok && v.comparisons == 0);
    }

    #[test]
    fn singleton_simulation_is_constant() {
        let s = s2();
        let st = simulate_mechanism(&s, &singleton_protocol(&s), 1000, 1, 3).unwrap();
        assert_eq!(st.mean_cost, 6.0);
        assert_eq!(st.stderr, 0.0);
    }

    #[test]
    fn two_ray_simulation_matches_quadrature() {
        // Independent oracle: trade happens iff c1 < c2 for agent 1 and
        // c1 > c2 for agent 2, each an exact half of the unit square.
        let oracle = {
            let m = 400;
            let h = 1.0 / m as f64;
            let mut p = 0.0;
            for a in 0..m {
                for b in 0..m {
                    let (x, y) = ((a as f64 + 0.5) * h, (b as f64 + 0.5) * h);
                    if x < y {
                        p += h * h;
                    }
                }
            }
            6.0 - 2.0 * p * p
        };
        let s = s2();
        let p = two_ray_protocol(&s).unwrap();
        let st = simulate_mechanism(&s, &p, 100_000, 7, 4).unwrap();
        assert!((st.mean_cost - oracle).abs() < 0.02, "{} vs {oracle}", st.mean_cost);
        assert!((st.mean_cost - 5.5).abs() < 0.02);
        assert!(st.agents.iter().all(|a| a.participation_violations == 0));
        let again = simulate_mechanism(&s, &p, 100_000, 7, 4).unwrap();
        assert_eq!(st, again);
    }

    #[test]
    fn two_price_flags() {
        let s = s2();
        let t = build_two_price_binary(&s, &[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert!(t.osp.iter().all(|&b| b));
        assert!(verify_osp_structural(&t.protocol).unwrap().ok);
        let t = build_two_price_binary(&s, &[2.0, 2.0], &[1.0, 1.0]).unwrap();
        assert!(t.osp.iter().all(|&b| !b));
        assert!(!verify_osp_structural(&t.protocol).unwrap().ok);
        let t = build_two_price_binary(&s, &[1.0, 1.0], &[2.0, 2.0]).unwrap();
        assert_eq!(t.protocol.menus[0].rays[2], vec![-1.0, 2.0]);
        assert!(verify_osp_structural(&t.protocol).unwrap().ok);
    }

    #[test]
    fn protocol_json_round_trip() {
        let s = s2();
        let text = r#"{"endowment": [[1,1],[1,1]],
            "menus": [{"agent": 0, "kind": "polarized-rays", "rays": [[1,-1],[-1,1]]},
                      {"agent": 1, "kind": "polarized-rays", "rays": [[0,0],[1,-1],[-1,1]]}],
            "selection": "eopr"}"#;
        let p = load_protocol(text, &s).unwrap();
        assert_eq!(p.menus[0].rays.len(), 3);
        assert_eq!(p, two_ray_protocol(&s).unwrap());
        let table = tabulate(&p, &s).unwrap();
        let back = load_protocol(&table.to_json(), &s).unwrap();
        assert_eq!(back, table);
    }

    #[test]
    fn bad_table_entries_are_rejected() {
        let s = s2();
        let mut p = BilateralMechanism {
            j1: 0,
            j2: 1,
            gamma: vec![1.0, -1.0],
        }
        .to_protocol(&s);
        if let Selection::Table(t) = &mut p.selection {
            t[0].allocation = vec![vec![2.0, 0.0], vec![0.0, 2.0]];
        }
        assert!(p.validate(&s).is_err());
    }
}
