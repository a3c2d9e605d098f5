//! The large-market program over OSP-feasible expected allocations.
//!
//! Each agent's feasible set is only ever queried through its support
//! function `S_j(w) = max { w.x : x expected allocation of some polarized-ray
//! or remedial menu under myopic play }`. The outer program is solved in its
//! dual `max_lambda lambda.n - sum_j S_j(lambda - pi_j)`, and a primal is
//! recovered as convex weights over the maximizers met along the way.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dot;
use crate::error::{Error, Result};
use crate::geometry::{is_non_monotone, polarized_closed_form, y_max};
use crate::lp::{solve_lp, LpProblem, LpStatus, Relation, Sense};
use crate::mechanisms::{myopic_strategy, Menu, MenuKind, REMEDIAL_BOX, REMEDIAL_POINT};
use crate::prob::{KahanSum, TypeMeasure};
use crate::scenario::Scenario;

/// `max { w.x : 0 <= x <= eta }`.
pub fn remedial_value(w: &[f64], eta: &[f64]) -> f64 {
    w.iter().zip(eta).map(|(&wi, &e)| wi.max(0.0) * e).sum()
}

fn remedial_point(w: &[f64], eta: &[f64]) -> Vec<f64> {
    w.iter().zip(eta).map(|(&wi, &e)| if wi > 0.0 { e } else { 0.0 }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Random restarts per ray count.
    pub restarts: usize,
    /// Monte Carlo draws for uniform cubes with more than two free tasks.
    pub samples: usize,
    pub seed: u64,
    /// Largest number of non-singleton rays; defaults to the task count.
    pub max_rays: Option<usize>,
    pub initial_step: f64,
    pub min_step: f64,
    /// Objective evaluations allowed per restart.
    pub max_evals: usize,
    /// Relative tolerance for keeping near-optimal maximizers.
    pub pool_tol: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            restarts: 64,
            samples: 100_000,
            seed: 0,
            max_rays: None,
            initial_step: 0.25,
            min_step: 1e-4,
            max_evals: 20_000,
            pool_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchQuality {
    pub restarts_run: usize,
    /// Restarts that found no polarized starting menu.
    pub restarts_skipped: usize,
    pub evaluations: usize,
    /// Some restart hit `max_evals` before its step shrank below `min_step`.
    pub budget_exhausted: bool,
    /// Choice probabilities computed exactly rather than by sampling.
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaySummary {
    pub direction: Vec<f64>,
    pub probability: f64,
    pub probability_stderr: f64,
    pub step: f64,
}

/// A near-optimal maximizer together with the menu that produces it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolPoint {
    pub x: Vec<f64>,
    pub menu: Menu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportEval {
    pub w: Vec<f64>,
    pub value: f64,
    pub x: Vec<f64>,
    pub menu: Menu,
    pub rays: Vec<RaySummary>,
    pub quality: SearchQuality,
    /// Maximizers within `pool_tol (1 + |value|)` of `value`, best first.
    #[serde(skip)]
    pub near_optimal: Vec<PoolPoint>,
}

struct Candidate {
    value: f64,
    dirs: Vec<Vec<f64>>,
    evals: usize,
    exhausted: bool,
}

/// Support functions of every agent, with type measures built once.
pub struct SupportOracle {
    cfg: SearchConfig,
    measures: Vec<TypeMeasure>,
    eta: Vec<Vec<f64>>,
}

fn agent_stream(seed: u64, j: usize) -> u64 {
    seed ^ (j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let face = rng.gen_range(0..dim);
    v[face] = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    v
}

fn normalize_inf(v: &mut [f64]) -> bool {
    let m = v.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    if m == 0.0 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= m);
    true
}

fn valid_menu(dirs: &[Vec<f64>]) -> bool {
    dirs.iter().all(|d| is_non_monotone(d))
        && (0..dirs.len()).all(|a| (a + 1..dirs.len()).all(|b| polarized_closed_form(&dirs[a], &dirs[b])))
}

impl SupportOracle {
    pub fn new(s: &Scenario, cfg: SearchConfig) -> Self {
        let measures = s
            .agents
            .iter()
            .enumerate()
            .map(|(j, a)| TypeMeasure::for_agent(a, cfg.samples, agent_stream(cfg.seed, j)))
            .collect();
        let eta = s.sigma().0;
        SupportOracle { cfg, measures, eta }
    }

    pub fn config(&self) -> &SearchConfig {
        &self.cfg
    }

    pub fn measure(&self, j: usize) -> &TypeMeasure {
        &self.measures[j]
    }

    fn menu_value(&self, j: usize, w: &[f64], dirs: &[Vec<f64>]) -> f64 {
        let eta = &self.eta[j];
        let probs = self.measures[j].choice_probabilities(dirs);
        let gain: f64 = dirs
            .iter()
            .zip(&probs)
            .map(|(k, &p)| p * (y_max(eta, k) * dot(w, k)).max(0.0))
            .sum();
        dot(w, eta) + gain
    }

    fn local_search(&self, j: usize, w: &[f64], mut dirs: Vec<Vec<f64>>) -> Candidate {
        let cfg = &self.cfg;
        let mut cur = self.menu_value(j, w, &dirs);
        let mut evals = 1;
        let mut step = cfg.initial_step;
        while step >= cfg.min_step && evals < cfg.max_evals {
            let mut improved = false;
            for k in 0..dirs.len() {
                for i in 0..w.len() {
                    for sign in [1.0, -1.0] {
                        let mut cand = dirs.clone();
                        cand[k][i] = (cand[k][i] + sign * step).clamp(-1.0, 1.0);
                        if !normalize_inf(&mut cand[k]) || !valid_menu(&cand) {
                            continue;
                        }
                        let v = self.menu_value(j, w, &cand);
                        evals += 1;
                        if v > cur + 1e-13 {
                            cur = v;
                            dirs = cand;
                            improved = true;
                        }
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        Candidate {
            value: cur,
            dirs,
            evals,
            exhausted: step >= cfg.min_step,
        }
    }

    fn search(&self, j: usize, w: &[f64], warm: Option<&[Vec<f64>]>) -> (Vec<Candidate>, SearchQuality) {
        let dim = w.len();
        let max_rays = self.cfg.max_rays.unwrap_or(dim).min(dim);
        let jobs: Vec<(usize, usize)> = (1..=max_rays)
            .flat_map(|k| (0..self.cfg.restarts).map(move |r| (k, r)))
            .collect();
        let results: Vec<Option<Candidate>> = jobs
            .par_iter()
            .map(|&(k, r)| {
                let start = match warm {
                    Some(d) if r == 0 && d.len() == k && valid_menu(d) => Some(d.to_vec()),
                    _ => {
                        let mut rng = ChaCha8Rng::seed_from_u64(agent_stream(self.cfg.seed, j));
                        rng.set_stream(((k as u64) << 32) | r as u64);
                        (0..1000)
                            .map(|_| (0..k).map(|_| random_direction(&mut rng, dim)).collect::<Vec<_>>())
                            .find(|d| valid_menu(d))
                    }
                };
                start.map(|d| self.local_search(j, w, d))
            })
            .collect();
        let mut quality = SearchQuality {
            exact: self.measures[j].is_exact(),
            ..Default::default()
        };
        let mut found = Vec::new();
        for c in results {
            match c {
                Some(c) => {
                    quality.restarts_run += 1;
                    quality.evaluations += c.evals;
                    quality.budget_exhausted |= c.exhausted;
                    found.push(c);
                }
                None => quality.restarts_skipped += 1,
            }
        }
        (found, quality)
    }

    fn ray_outcome(&self, j: usize, w: &[f64], dirs: &[Vec<f64>]) -> (Vec<f64>, Vec<RaySummary>) {
        let eta = &self.eta[j];
        let m = &self.measures[j];
        let probs = m.choice_probabilities(dirs);
        let mut x = eta.clone();
        let mut rays = Vec::new();
        for (k, &p) in dirs.iter().zip(&probs) {
            let step = if dot(w, k) > 0.0 { y_max(eta, k) } else { 0.0 };
            for (xi, ki) in x.iter_mut().zip(k) {
                *xi += p * step * ki;
            }
            rays.push(RaySummary {
                direction: k.clone(),
                probability: p,
                probability_stderr: m.stderr(p),
                step,
            });
        }
        // Rounding can push a fully traded coordinate a hair below zero.
        x.iter_mut().for_each(|v| *v = v.max(0.0));
        (x, rays)
    }

    /// `S_j(w)` with its maximizer, optionally warm-started from a menu.
    pub fn evaluate(&self, j: usize, w: &[f64], warm: Option<&[Vec<f64>]>) -> SupportEval {
        let eta = &self.eta[j];
        let singleton = dot(w, eta);
        let remedial = remedial_value(w, eta);
        let (mut found, quality) = self.search(j, w, warm);
        found.sort_by(|a, b| b.value.total_cmp(&a.value));
        let best_ray = found.first().map_or(f64::NEG_INFINITY, |c| c.value);
        let best = singleton.max(remedial).max(best_ray);
        let tol = self.cfg.pool_tol * (1.0 + best.abs());

        let singleton_menu = Menu::singleton(j, eta.clone());
        let remedial_menu = Menu::remedial(j, eta.clone());
        let mut near: Vec<PoolPoint> = Vec::new();
        let push = |near: &mut Vec<PoolPoint>, p: PoolPoint| {
            if !near
                .iter()
                .any(|q| q.x.iter().zip(&p.x).all(|(a, b)| (a - b).abs() <= 1e-9))
            {
                near.push(p);
            }
        };
        let mut chosen: Option<(Vec<f64>, Menu, Vec<RaySummary>, f64)> = None;
        if singleton >= best - 1e-12 {
            chosen = Some((eta.clone(), singleton_menu.clone(), Vec::new(), singleton));
        } else if remedial >= best - 1e-12 {
            chosen = Some((remedial_point(w, eta), remedial_menu.clone(), Vec::new(), remedial));
        }
        for c in found.iter().filter(|c| c.value >= best - tol) {
            let (x, rays) = self.ray_outcome(j, w, &c.dirs);
            let menu = Menu::polarized(j, eta.clone(), c.dirs.clone());
            if chosen.is_none() {
                chosen = Some((x.clone(), menu.clone(), rays, c.value));
            }
            push(&mut near, PoolPoint { x, menu });
        }
        if singleton >= best - tol {
            push(&mut near, PoolPoint { x: eta.clone(), menu: singleton_menu });
        }
        if remedial >= best - tol {
            push(
                &mut near,
                PoolPoint {
                    x: remedial_point(w, eta),
                    menu: remedial_menu,
                },
            );
        }
        let (x, menu, rays, value) = chosen.expect("singleton branch always present");
        if let Some(pos) = near.iter().position(|p| p.x.iter().zip(&x).all(|(a, b)| (a - b).abs() <= 1e-9)) {
            let first = near.remove(pos);
            near.insert(0, first);
        }
        SupportEval {
            w: w.to_vec(),
            value,
            x,
            menu,
            rays,
            quality,
            near_optimal: near,
        }
    }
}

/// One-shot `S_j(w)`.
pub fn support_function(s: &Scenario, j: usize, w: &[f64], cfg: &SearchConfig) -> Result<SupportEval> {
    if j >= s.agent_count() {
        return Err(Error::Validation(format!("agent {j} out of range")));
    }
    if w.len() != s.task_count() {
        return Err(Error::Dimension(format!("weight vector has length {}", w.len())));
    }
    Ok(SupportOracle::new(s, cfg.clone()).evaluate(j, w, None))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualConfig {
    pub iterations: usize,
    /// Step scale `a` in `a / sqrt(t)`; defaults to `max_i n_i`.
    pub step_scale: Option<f64>,
    /// Column-generation rounds run after the supergradient phase.
    pub polish_rounds: usize,
    /// Stop polishing once master value and dual agree to this relative gap.
    pub gap_tol: f64,
    pub search: SearchConfig,
}

impl Default for DualConfig {
    fn default() -> Self {
        DualConfig {
            iterations: 500,
            step_scale: None,
            polish_rounds: 50,
            gap_tol: 1e-6,
            search: SearchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualIterate {
    pub lambda: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    /// Best iterate found.
    pub lambda: Vec<f64>,
    pub value: f64,
    pub history: Vec<DualIterate>,
    /// Support-function maximizers at the best iterate.
    pub maximizers: Vec<SupportEval>,
    pub pools: Vec<Vec<PoolPoint>>,
    pub polish_rounds: usize,
    pub exact: bool,
    pub budget_exhausted: bool,
}

struct Master {
    value: f64,
    lambda: Vec<f64>,
    theta: Vec<f64>,
}

fn solve_master(s: &Scenario, pools: &[Vec<PoolPoint>]) -> Result<Option<Master>> {
    let (ni, nj) = (s.task_count(), s.agent_count());
    let n = s.supply_f64();
    let cols: Vec<(usize, &PoolPoint)> = pools
        .iter()
        .enumerate()
        .flat_map(|(j, pool)| pool.iter().map(move |p| (j, p)))
        .collect();
    let obj = cols.iter().map(|(j, p)| dot(&s.agents[*j].pi, &p.x)).collect();
    let mut lp = LpProblem::new(Sense::Minimize, obj);
    for i in 0..ni {
        lp.add_row(cols.iter().map(|(_, p)| p.x[i]).collect(), Relation::Eq, n[i]);
    }
    for j in 0..nj {
        lp.add_row(
            cols.iter().map(|(k, _)| if *k == j { 1.0 } else { 0.0 }).collect(),
            Relation::Eq,
            1.0,
        );
    }
    let sol = solve_lp(&lp)?;
    if sol.status != LpStatus::Optimal {
        return Ok(None);
    }
    Ok(Some(Master {
        value: sol.objective,
        lambda: sol.duals[..ni].to_vec(),
        theta: sol.x,
    }))
}

fn add_to_pool(pool: &mut Vec<PoolPoint>, points: &[PoolPoint]) {
    for p in points {
        if !pool
            .iter()
            .any(|q| q.x.iter().zip(&p.x).all(|(a, b)| (a - b).abs() <= 1e-9))
        {
            pool.push(p.clone());
        }
    }
}

struct DualEval {
    value: f64,
    evals: Vec<SupportEval>,
}

fn evaluate_dual(oracle: &SupportOracle, s: &Scenario, lambda: &[f64], warm: &[Option<Vec<Vec<f64>>>]) -> DualEval {
    let n = s.supply_f64();
    let evals: Vec<SupportEval> = (0..s.agent_count())
        .into_par_iter()
        .map(|j| {
            let w: Vec<f64> = lambda.iter().zip(&s.agents[j].pi).map(|(l, p)| l - p).collect();
            oracle.evaluate(j, &w, warm[j].as_deref())
        })
        .collect();
    let mut g = KahanSum::new();
    g.add(dot(lambda, &n));
    evals.iter().for_each(|e| g.add(-e.value));
    DualEval { value: g.total(), evals }
}

fn warm_dirs(e: &SupportEval) -> Option<Vec<Vec<f64>>> {
    (e.menu.kind == MenuKind::PolarizedRays).then(|| {
        e.menu
            .rays
            .iter()
            .filter(|r| r.iter().any(|&x| x != 0.0))
            .cloned()
            .collect()
    })
}

/// Maximizes the concave dual by supergradient ascent, then tightens it by
/// column generation over the maximizer pools.
pub fn solve_dual(s: &Scenario, cfg: &DualConfig) -> Result<DualState> {
    if s.supply.iter().any(|&v| v == 0) {
        return Err(Error::Precondition("every task needs positive supply".into()));
    }
    let (ni, nj) = (s.task_count(), s.agent_count());
    let n = s.supply_f64();
    let oracle = SupportOracle::new(s, cfg.search.clone());
    let eta = s.sigma().0;
    let mut pools: Vec<Vec<PoolPoint>> = (0..nj)
        .map(|j| {
            vec![PoolPoint {
                x: eta[j].clone(),
                menu: Menu::singleton(j, eta[j].clone()),
            }]
        })
        .collect();
    let a = cfg
        .step_scale
        .unwrap_or_else(|| n.iter().fold(0.0f64, |m, &v| m.max(v)));
    let mut lambda: Vec<f64> = (0..ni)
        .map(|i| s.agents.iter().map(|ag| ag.pi[i]).sum::<f64>() / nj as f64)
        .collect();
    let mut warm: Vec<Option<Vec<Vec<f64>>>> = vec![None; nj];
    let mut history = Vec::new();
    let mut best: Option<(Vec<f64>, DualEval)> = None;
    let mut budget_exhausted = false;

    let mut record = |lambda: &[f64],
                      e: DualEval,
                      pools: &mut Vec<Vec<PoolPoint>>,
                      warm: &mut Vec<Option<Vec<Vec<f64>>>>,
                      history: &mut Vec<DualIterate>,
                      best: &mut Option<(Vec<f64>, DualEval)>| {
        for (j, ev) in e.evals.iter().enumerate() {
            add_to_pool(&mut pools[j], &ev.near_optimal);
            if let Some(d) = warm_dirs(ev) {
                warm[j] = Some(d);
            }
            budget_exhausted |= ev.quality.budget_exhausted;
        }
        history.push(DualIterate {
            lambda: lambda.to_vec(),
            value: e.value,
        });
        if best.as_ref().map_or(true, |(_, b)| e.value > b.value) {
            *best = Some((lambda.to_vec(), e));
        }
    };

    for t in 1..=cfg.iterations {
        let e = evaluate_dual(&oracle, s, &lambda, &warm);
        let mut g = n.clone();
        for ev in &e.evals {
            for (gi, xi) in g.iter_mut().zip(&ev.x) {
                *gi -= xi;
            }
        }
        record(&lambda, e, &mut pools, &mut warm, &mut history, &mut best);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            break;
        }
        let step = a / (t as f64).sqrt() / norm;
        lambda.iter_mut().zip(&g).for_each(|(l, gi)| *l += step * gi);
    }

    let mut polish_rounds = 0;
    for _ in 0..cfg.polish_rounds {
        let Some(master) = solve_master(s, &pools)? else { break };
        let dual = best.as_ref().map_or(f64::NEG_INFINITY, |(_, b)| b.value);
        if master.value - dual <= cfg.gap_tol * (1.0 + dual.abs()) {
            break;
        }
        polish_rounds += 1;
        let sizes: Vec<usize> = pools.iter().map(Vec::len).collect();
        let e = evaluate_dual(&oracle, s, &master.lambda, &warm);
        record(&master.lambda, e, &mut pools, &mut warm, &mut history, &mut best);
        if pools.iter().map(Vec::len).eq(sizes.iter().copied()) {
            break;
        }
    }

    let (lambda, e) = best.expect("at least one dual evaluation");
    Ok(DualState {
        lambda,
        value: e.value,
        history,
        exact: e.evals.iter().all(|ev| ev.quality.exact),
        maximizers: e.evals,
        pools,
        polish_rounds,
        budget_exhausted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimalRecovery {
    /// Expected allocation per agent.
    pub x: Vec<Vec<f64>>,
    pub objective: f64,
    pub residual: f64,
    pub dual_value: f64,
    /// `|objective - dual_value|`.
    pub gap: f64,
    pub relative_gap: f64,
    /// Randomization over pool menus per agent, positive weights only.
    pub menus: Vec<Vec<(Menu, f64)>>,
}

/// Convex weights over each agent's maximizer pool that clear the market at
/// least cost.
pub fn recover_primal(d: &DualState, s: &Scenario) -> Result<PrimalRecovery> {
    let (ni, nj) = (s.task_count(), s.agent_count());
    if d.pools.len() != nj || d.pools.iter().any(Vec::is_empty) {
        return Err(Error::Precondition("every agent needs a non-empty maximizer pool".into()));
    }
    let Some(master) = solve_master(s, &d.pools)? else {
        return Err(Error::PoolTooPoor {
            residual: pool_residual(s, &d.pools)?,
        });
    };
    let mut x = vec![vec![0.0; ni]; nj];
    let mut menus: Vec<Vec<(Menu, f64)>> = vec![Vec::new(); nj];
    let mut col = 0;
    for (j, pool) in d.pools.iter().enumerate() {
        for p in pool {
            let th = master.theta[col].max(0.0);
            col += 1;
            for i in 0..ni {
                x[j][i] += th * p.x[i];
            }
            if th > 1e-12 {
                menus[j].push((p.menu.clone(), th));
            }
        }
    }
    let n = s.supply_f64();
    let residual = (0..ni)
        .map(|i| (x.iter().map(|r| r[i]).sum::<f64>() - n[i]).abs())
        .fold(0.0, f64::max);
    if residual > 1e-7 {
        return Err(Error::PoolTooPoor { residual });
    }
    let objective = (0..nj).map(|j| dot(&s.agents[j].pi, &x[j])).sum::<f64>();
    let gap = (objective - d.value).abs();
    Ok(PrimalRecovery {
        x,
        objective,
        residual,
        dual_value: d.value,
        gap,
        relative_gap: gap / d.value.abs().max(1e-12),
        menus,
    })
}

/// Least L1 clearing violation reachable with the pools.
fn pool_residual(s: &Scenario, pools: &[Vec<PoolPoint>]) -> Result<f64> {
    let (ni, nj) = (s.task_count(), s.agent_count());
    let n = s.supply_f64();
    let m: usize = pools.iter().map(Vec::len).sum();
    let mut obj = vec![0.0; m];
    obj.extend(std::iter::repeat(1.0).take(2 * ni));
    let mut lp = LpProblem::new(Sense::Minimize, obj);
    for i in 0..ni {
        let mut row: Vec<f64> = pools.iter().flatten().map(|p| p.x[i]).collect();
        row.extend((0..2 * ni).map(|k| if k == i { 1.0 } else if k == ni + i { -1.0 } else { 0.0 }));
        lp.add_row(row, Relation::Eq, n[i]);
    }
    for j in 0..nj {
        let mut row: Vec<f64> = pools
            .iter()
            .enumerate()
            .flat_map(|(k, pool)| pool.iter().map(move |_| if k == j { 1.0 } else { 0.0 }))
            .collect();
        row.extend(std::iter::repeat(0.0).take(2 * ni));
        lp.add_row(row, Relation::Eq, 1.0);
    }
    let sol = solve_lp(&lp)?;
    Ok(sol.objective)
}

/// Probability of each action of `menu` under myopic play.
pub fn action_probabilities(menu: &Menu, measure: &TypeMeasure) -> Vec<f64> {
    match menu.kind {
        MenuKind::Singleton => vec![1.0],
        MenuKind::Remedial => {
            let mut p = vec![0.0; 2];
            p[REMEDIAL_BOX] = 1.0;
            p
        }
        MenuKind::PolarizedRays => {
            let mut p = measure.choice_probabilities(&menu.rays);
            let rest = 1.0 - p.iter().sum::<f64>();
            p[menu.singleton_action()] += rest.max(0.0);
            p
        }
    }
}

/// Randomization over menus for each agent group: `(menu, weight)` pairs
/// with weights summing to one.
pub type MenuMixture = Vec<Vec<(Menu, f64)>>;

/// One cell of the cell-level clearing program: a mass `rho` of one group
/// that chose one action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub agent: usize,
    pub option: usize,
    pub action: usize,
    pub rho: f64,
    /// Fraction of the longest step along the ray (one entry), or of the
    /// endowment per task for a box; empty for a point.
    pub step: Vec<f64>,
}

enum CellShape {
    Point,
    Ray(Vec<f64>, f64),
    Box,
}

fn cell_shape(menu: &Menu, action: usize) -> CellShape {
    match menu.kind {
        MenuKind::Singleton => CellShape::Point,
        MenuKind::Remedial if action == REMEDIAL_POINT => CellShape::Point,
        MenuKind::Remedial => CellShape::Box,
        MenuKind::PolarizedRays => {
            let k = &menu.rays[action];
            let ym = y_max(&menu.endpoint, k);
            if k.iter().all(|&v| v == 0.0) || !ym.is_finite() {
                CellShape::Point
            } else {
                CellShape::Ray(k.clone(), ym)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSolution {
    /// Per-unit-mass cost `sum rho pi.mu`.
    pub value: f64,
    pub cells: Vec<Cell>,
    pub residual: f64,
}

/// `min sum rho pi_j.mu` over cell points `mu` in the chosen sets subject to
/// `sum rho mu = n`.
pub fn solve_cells(s: &Scenario, mixture: &MenuMixture, mut cells: Vec<Cell>) -> Result<CellSolution> {
    let ni = s.task_count();
    let n = s.supply_f64();
    let shapes: Vec<CellShape> = cells
        .iter()
        .map(|c| cell_shape(&mixture[c.agent][c.option].0, c.action))
        .collect();
    let mut obj = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut bounds = Vec::new();
    let mut constant = KahanSum::new();
    let mut rhs = n.clone();
    let mut first_var = Vec::with_capacity(cells.len());
    for (c, shape) in cells.iter().zip(&shapes) {
        first_var.push(obj.len());
        let pi = &s.agents[c.agent].pi;
        let eta = &mixture[c.agent][c.option].0.endpoint;
        match shape {
            CellShape::Point | CellShape::Ray(..) => {
                constant.add(c.rho * dot(pi, eta));
                for i in 0..ni {
                    rhs[i] -= c.rho * eta[i];
                }
                if let CellShape::Ray(k, ym) = shape {
                    obj.push(c.rho * ym * dot(pi, k));
                    cols.push(k.iter().map(|v| c.rho * ym * v).collect());
                    bounds.push(1.0);
                }
            }
            CellShape::Box => {
                for i in 0..ni {
                    obj.push(c.rho * pi[i]);
                    let mut col = vec![0.0; ni];
                    col[i] = c.rho;
                    cols.push(col);
                    bounds.push(eta[i]);
                }
            }
        }
    }
    let mut lp = LpProblem::new(Sense::Minimize, obj);
    for (v, &ub) in bounds.iter().enumerate() {
        lp.set_bounds(v, 0.0, ub);
    }
    for i in 0..ni {
        lp.add_row(cols.iter().map(|c| c[i]).collect(), Relation::Eq, rhs[i]);
    }
    let sol = solve_lp(&lp)?;
    if sol.status != LpStatus::Optimal {
        return Err(Error::Infeasible("cell program has no clearing point".into()));
    }
    let mut total = vec![0.0; ni];
    for (idx, (c, shape)) in cells.iter_mut().zip(&shapes).enumerate() {
        let v0 = first_var[idx];
        let eta = &mixture[c.agent][c.option].0.endpoint;
        let mu: Vec<f64> = match shape {
            CellShape::Point => {
                c.step = Vec::new();
                eta.clone()
            }
            CellShape::Ray(k, ym) => {
                let a = sol.x[v0].clamp(0.0, 1.0);
                c.step = vec![a];
                eta.iter().zip(k).map(|(e, kv)| e + a * ym * kv).collect()
            }
            CellShape::Box => {
                let mu: Vec<f64> = (0..ni).map(|i| sol.x[v0 + i].clamp(0.0, eta[i])).collect();
                c.step = mu.iter().zip(eta).map(|(m, e)| if *e > 0.0 { m / e } else { 0.0 }).collect();
                mu
            }
        };
        for i in 0..ni {
            total[i] += c.rho * mu[i];
        }
    }
    let residual = total.iter().zip(&n).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    constant.add(sol.objective);
    Ok(CellSolution {
        value: constant.total(),
        cells,
        residual,
    })
}

fn check_mixture(s: &Scenario, mixture: &MenuMixture) -> Result<()> {
    if mixture.len() != s.agent_count() {
        return Err(Error::Dimension(format!(
            "{} menu groups for {} agents",
            mixture.len(),
            s.agent_count()
        )));
    }
    let eta = s.sigma().0;
    for (j, opts) in mixture.iter().enumerate() {
        let total: f64 = opts.iter().map(|(_, w)| w).sum();
        if opts.is_empty() || (total - 1.0).abs() > 1e-9 || opts.iter().any(|(_, w)| *w < 0.0) {
            return Err(Error::Validation(format!("menu weights of agent {j} do not form a distribution")));
        }
        if opts.iter().any(|(m, _)| m.endpoint != eta[j]) {
            return Err(Error::Validation(format!("menus of agent {j} are not anchored at its status quo")));
        }
    }
    Ok(())
}

/// Wraps one menu per agent as a degenerate mixture.
pub fn pure_mixture(menus: &[Menu]) -> MenuMixture {
    menus.iter().map(|m| vec![(m.clone(), 1.0)]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LargeMarketValue {
    pub value: f64,
    pub cells: Vec<Cell>,
    pub exact: bool,
}

/// Large-market cost of fixed menus: choice masses at their population
/// probabilities, cell steps chosen optimally.
pub fn large_market_value(s: &Scenario, mixture: &MenuMixture, cfg: &SearchConfig) -> Result<LargeMarketValue> {
    check_mixture(s, mixture)?;
    let oracle = SupportOracle::new(s, cfg.clone());
    let mut cells = Vec::new();
    for (j, opts) in mixture.iter().enumerate() {
        for (o, (menu, w)) in opts.iter().enumerate() {
            for (k, p) in action_probabilities(menu, oracle.measure(j)).into_iter().enumerate() {
                if w * p > 0.0 {
                    cells.push(Cell {
                        agent: j,
                        option: o,
                        action: k,
                        rho: w * p,
                        step: Vec::new(),
                    });
                }
            }
        }
    }
    let sol = solve_cells(s, mixture, cells)?;
    Ok(LargeMarketValue {
        value: sol.value,
        cells: sol.cells,
        exact: (0..s.agent_count()).all(|j| oracle.measure(j).is_exact()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaRun {
    pub n: usize,
    pub seed: u64,
    /// Realized choice counts per `[agent][option][action]`.
    pub counts: Vec<Vec<Vec<usize>>>,
    pub rho: Vec<Vec<Vec<f64>>>,
    /// Restricted program: one point per cell.
    pub cells: Vec<Cell>,
    pub v_restricted: f64,
    /// Full program: one point per agent copy.
    pub v_full: f64,
    pub residual: f64,
    /// Root-mean-square gap between realized and population choice masses.
    pub rho_dev: f64,
}

/// Copies of group members assigned to each menu option: `floor(w N)` each,
/// the remainder to the heaviest option.
fn option_sizes(weights: &[f64], n: usize) -> Vec<usize> {
    let mut sizes: Vec<usize> = weights.iter().map(|w| (w * n as f64 + 1e-9).floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let heaviest = (0..weights.len())
        .max_by(|&a, &b| weights[a].total_cmp(&weights[b]).then(b.cmp(&a)))
        .unwrap_or(0);
    sizes[heaviest] += n.saturating_sub(assigned);
    sizes
}

/// Replica economy with `n` copies of every agent. Draws are nested: the
/// copies of a smaller `n` are a prefix of those of a larger one.
pub fn replica_run(s: &Scenario, mixture: &MenuMixture, n: usize, seed: u64, cfg: &SearchConfig) -> Result<ReplicaRun> {
    check_mixture(s, mixture)?;
    if n == 0 {
        return Err(Error::Validation("replication factor must be positive".into()));
    }
    let oracle = SupportOracle::new(s, cfg.clone());
    let nf = n as f64;
    let mut counts: Vec<Vec<Vec<usize>>> = mixture
        .iter()
        .map(|opts| opts.iter().map(|(m, _)| vec![0; m.action_count()]).collect())
        .collect();
    let mut copies = Vec::new();
    for (j, opts) in mixture.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64);
        let weights: Vec<f64> = opts.iter().map(|(_, w)| *w).collect();
        for (o, size) in option_sizes(&weights, n).into_iter().enumerate() {
            for _ in 0..size {
                let c = s.agents[j].sample_cost(&mut rng);
                let k = myopic_strategy(&opts[o].0, &c);
                counts[j][o][k] += 1;
                copies.push(Cell {
                    agent: j,
                    option: o,
                    action: k,
                    rho: 1.0 / nf,
                    step: Vec::new(),
                });
            }
        }
    }
    let rho: Vec<Vec<Vec<f64>>> = counts
        .iter()
        .map(|g| g.iter().map(|o| o.iter().map(|&c| c as f64 / nf).collect()).collect())
        .collect();
    let mut cells = Vec::new();
    let mut dev = KahanSum::new();
    let mut cell_count = 0usize;
    for (j, opts) in mixture.iter().enumerate() {
        for (o, (menu, w)) in opts.iter().enumerate() {
            let theory = action_probabilities(menu, oracle.measure(j));
            for (k, p) in theory.iter().enumerate() {
                let r = rho[j][o][k];
                dev.add((r - w * p).powi(2));
                cell_count += 1;
                if counts[j][o][k] > 0 {
                    cells.push(Cell {
                        agent: j,
                        option: o,
                        action: k,
                        rho: r,
                        step: Vec::new(),
                    });
                }
            }
        }
    }
    let restricted = solve_cells(s, mixture, cells)?;
    let full = solve_cells(s, mixture, copies)?;
    Ok(ReplicaRun {
        n,
        seed,
        counts,
        rho,
        cells: restricted.cells,
        v_restricted: restricted.value,
        v_full: full.value,
        residual: restricted.residual.max(full.residual),
        rho_dev: (dev.total() / cell_count.max(1) as f64).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaRow {
    pub n: usize,
    pub seed: u64,
    pub v_full: f64,
    pub v_restricted: f64,
    pub rho_dev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaSummary {
    pub n: usize,
    pub runs: usize,
    pub mean_v_full: f64,
    pub stderr_v_full: f64,
    /// Mean of `|v_full - v_inf|` across seeds.
    pub mean_abs_deviation: f64,
    /// Root-mean-square of `rho_dev` across seeds.
    pub rms_rho_dev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaSweep {
    pub v_inf: f64,
    pub rows: Vec<ReplicaRow>,
    pub summary: Vec<ReplicaSummary>,
}

impl ReplicaSweep {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("N,seed,v_full,v_restricted,rho_dev\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.n, r.seed, r.v_full, r.v_restricted, r.rho_dev));
        }
        out
    }
}

/// [`replica_run`] over every `(N, seed)` pair, summarized per `N`.
pub fn replica_sweep(
    s: &Scenario,
    mixture: &MenuMixture,
    n_list: &[usize],
    seeds: &[u64],
    cfg: &SearchConfig,
) -> Result<ReplicaSweep> {
    let v_inf = large_market_value(s, mixture, cfg)?.value;
    let jobs: Vec<(usize, u64)> = n_list
        .iter()
        .flat_map(|&n| seeds.iter().map(move |&sd| (n, sd)))
        .collect();
    let runs: Vec<ReplicaRun> = jobs
        .par_iter()
        .map(|&(n, sd)| replica_run(s, mixture, n, sd, cfg))
        .collect::<Result<_>>()?;
    let rows: Vec<ReplicaRow> = runs
        .iter()
        .map(|r| ReplicaRow {
            n: r.n,
            seed: r.seed,
            v_full: r.v_full,
            v_restricted: r.v_restricted,
            rho_dev: r.rho_dev,
        })
        .collect();
    let summary = n_list
        .iter()
        .map(|&n| {
            let group: Vec<&ReplicaRow> = rows.iter().filter(|r| r.n == n).collect();
            let m = group.len().max(1) as f64;
            let mean = group.iter().map(|r| r.v_full).sum::<f64>() / m;
            let var = group.iter().map(|r| (r.v_full - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
            ReplicaSummary {
                n,
                runs: group.len(),
                mean_v_full: mean,
                stderr_v_full: (var / m).sqrt(),
                mean_abs_deviation: group.iter().map(|r| (r.v_full - v_inf).abs()).sum::<f64>() / m,
                rms_rho_dev: (group.iter().map(|r| r.rho_dev.powi(2)).sum::<f64>() / m).sqrt(),
            }
        })
        .collect();
    Ok(ReplicaSweep { v_inf, rows, summary })
}
