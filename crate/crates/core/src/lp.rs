//! Dense two-phase simplex with row duals, plus Farkas alternatives.
//!
//! Problems are small (a few hundred rows at most), so the solver keeps a
//! full tableau. Pivoting is Dantzig's rule with a switch to Bland's rule
//! after a run of degenerate pivots, which keeps every solve terminating
//! and deterministic.

use crate::error::{Error, Result};
use crate::dot;

/// Feasibility tolerance for the simplex phases.
pub const FEAS_TOL: f64 = 1e-9;
/// Optimality tolerance on reduced costs.
pub const OPT_TOL: f64 = 1e-9;
/// Margin used to operationalize strict inequalities.
pub const STRICT_EPS: f64 = 1e-6;

const PIVOT_TOL: f64 = 1e-9;
/// Feasibility slack allowed in the first pass of the ratio test.
const HARRIS_TOL: f64 = 1e-9;
const DEGENERATE_RUN: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpProblem {
    pub sense: Sense,
    pub objective: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
    pub relations: Vec<Relation>,
    pub rhs: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: Vec<f64>,
    /// Sensitivity of the optimal objective to each row's right-hand side.
    pub duals: Vec<f64>,
    pub objective: f64,
}

impl LpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }
}

impl LpProblem {
    /// New problem with `objective.len()` variables bounded below by zero.
    pub fn new(sense: Sense, objective: Vec<f64>) -> Self {
        let n = objective.len();
        LpProblem {
            sense,
            objective,
            rows: Vec::new(),
            relations: Vec::new(),
            rhs: Vec::new(),
            lower: vec![0.0; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn var_count(&self) -> usize {
        self.objective.len()
    }

    pub fn add_row(&mut self, coeffs: Vec<f64>, relation: Relation, rhs: f64) -> usize {
        debug_assert_eq!(coeffs.len(), self.var_count());
        self.rows.push(coeffs);
        self.relations.push(relation);
        self.rhs.push(rhs);
        self.rows.len() - 1
    }

    pub fn set_bounds(&mut self, var: usize, lower: f64, upper: f64) {
        self.lower[var] = lower;
        self.upper[var] = upper;
    }

    fn check(&self) -> Result<()> {
        let n = self.var_count();
        if self.rows.len() != self.relations.len() || self.rows.len() != self.rhs.len() {
            return Err(Error::Dimension("row, relation and rhs counts differ".into()));
        }
        if self.rows.iter().any(|r| r.len() != n)
            || self.lower.len() != n
            || self.upper.len() != n
        {
            return Err(Error::Dimension("row or bound length differs from variable count".into()));
        }
        if self.objective.iter().any(|c| !c.is_finite()) {
            return Err(Error::Dimension("objective coefficients must be finite".into()));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| l > u) {
            return Err(Error::Dimension("lower bound exceeds upper bound".into()));
        }
        Ok(())
    }

    /// Maximum violation of rows and bounds at `x`, each scaled by `1 + |rhs|`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for ((row, rel), &b) in self.rows.iter().zip(&self.relations).zip(&self.rhs) {
            let lhs = dot(row, x);
            let v = match rel {
                Relation::Le => lhs - b,
                Relation::Ge => b - lhs,
                Relation::Eq => (lhs - b).abs(),
            };
            worst = worst.max(v / (1.0 + b.abs()));
        }
        for ((&v, &l), &u) in x.iter().zip(&self.lower).zip(&self.upper) {
            worst = worst.max((l - v) / (1.0 + l.abs().min(1e12)));
            worst = worst.max((v - u) / (1.0 + u.abs().min(1e12)));
        }
        worst
    }
}

/// How an original variable maps onto non-negative standard-form columns.
#[derive(Debug, Clone, Copy)]
enum VarMap {
    /// x = offset + z
    Shift { col: usize, offset: f64 },
    /// x = offset - z
    Mirror { col: usize, offset: f64 },
    /// x = z+ - z-
    Split { pos: usize, neg: usize },
}

struct Standard {
    /// Rows of the equality system, each already carrying its slack.
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    c: Vec<f64>,
    /// Sign applied to each original row after normalization (b >= 0).
    row_sign: Vec<f64>,
    maps: Vec<VarMap>,
    /// Column that can start basic in each row, if any.
    start_basis: Vec<Option<usize>>,
    original_rows: usize,
}

fn standardize(p: &LpProblem) -> Standard {
    let n = p.var_count();
    let sign = if p.sense == Sense::Maximize { -1.0 } else { 1.0 };
    let mut maps = Vec::with_capacity(n);
    let mut cols = 0usize;
    let mut c: Vec<f64> = Vec::new();
    let mut upper_rows: Vec<(usize, f64)> = Vec::new();
    for j in 0..n {
        let (l, u) = (p.lower[j], p.upper[j]);
        let cj = sign * p.objective[j];
        if l.is_finite() {
            maps.push(VarMap::Shift { col: cols, offset: l });
            c.push(cj);
            if u.is_finite() {
                upper_rows.push((cols, u - l));
            }
            cols += 1;
        } else if u.is_finite() {
            maps.push(VarMap::Mirror { col: cols, offset: u });
            c.push(-cj);
            cols += 1;
        } else {
            maps.push(VarMap::Split { pos: cols, neg: cols + 1 });
            c.push(cj);
            c.push(-cj);
            cols += 2;
        }
    }
    let structural = cols;
    let m_orig = p.rows.len();
    let m = m_orig + upper_rows.len();
    let slack_count = p.relations.iter().filter(|r| **r != Relation::Eq).count() + upper_rows.len();
    let total = structural + slack_count;
    c.resize(total, 0.0);

    let mut a = Vec::with_capacity(m);
    let mut b = Vec::with_capacity(m);
    let mut row_sign = Vec::with_capacity(m);
    let mut start_basis = Vec::with_capacity(m);
    let mut next_slack = structural;
    for r in 0..m_orig {
        let mut row = vec![0.0; total];
        let mut rhs = p.rhs[r];
        for (j, map) in maps.iter().enumerate() {
            let coef = p.rows[r][j];
            if coef == 0.0 {
                continue;
            }
            match *map {
                VarMap::Shift { col, offset } => {
                    row[col] += coef;
                    rhs -= coef * offset;
                }
                VarMap::Mirror { col, offset } => {
                    row[col] -= coef;
                    rhs -= coef * offset;
                }
                VarMap::Split { pos, neg } => {
                    row[pos] += coef;
                    row[neg] -= coef;
                }
            }
        }
        let slack = match p.relations[r] {
            Relation::Le => {
                row[next_slack] = 1.0;
                next_slack += 1;
                Some(next_slack - 1)
            }
            Relation::Ge => {
                row[next_slack] = -1.0;
                next_slack += 1;
                Some(next_slack - 1)
            }
            Relation::Eq => None,
        };
        let s = if rhs < 0.0 { -1.0 } else { 1.0 };
        if s < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
            rhs = -rhs;
        }
        let basis = slack.filter(|&col| row[col] > 0.0);
        a.push(row);
        b.push(rhs);
        row_sign.push(s);
        start_basis.push(basis);
    }
    for (col, cap) in upper_rows {
        let mut row = vec![0.0; total];
        row[col] = 1.0;
        row[next_slack] = 1.0;
        a.push(row);
        b.push(cap.max(0.0));
        row_sign.push(1.0);
        start_basis.push(Some(next_slack));
        next_slack += 1;
    }
    Standard {
        a,
        b,
        c,
        row_sign,
        maps,
        start_basis,
        original_rows: m_orig,
    }
}

struct Tableau {
    m: usize,
    width: usize,
    /// (m + 1) x (width + 1); last row is the reduced-cost row, last column the rhs.
    t: Vec<f64>,
    basis: Vec<usize>,
    barred: Vec<bool>,
}

impl Tableau {
    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.t[r * (self.width + 1) + c]
    }

    fn rhs(&self, r: usize) -> f64 {
        self.at(r, self.width)
    }

    fn pivot(&mut self, pr: usize, pc: usize) {
        let w = self.width + 1;
        let piv = self.t[pr * w + pc];
        for v in &mut self.t[pr * w..(pr + 1) * w] {
            *v /= piv;
        }
        let prow: Vec<f64> = self.t[pr * w..(pr + 1) * w].to_vec();
        for r in 0..=self.m {
            if r == pr {
                continue;
            }
            let f = self.t[r * w + pc];
            if f == 0.0 {
                continue;
            }
            let row = &mut self.t[r * w..(r + 1) * w];
            for (v, &p) in row.iter_mut().zip(&prow) {
                *v -= f * p;
            }
            row[pc] = 0.0;
        }
        self.basis[pr] = pc;
    }

    /// Loads `cost` into the objective row, priced out against the basis.
    fn set_costs(&mut self, cost: &[f64]) {
        let w = self.width + 1;
        let obj = self.m * w;
        for c in 0..w {
            self.t[obj + c] = if c < self.width { cost[c] } else { 0.0 };
        }
        for r in 0..self.m {
            let cb = cost[self.basis[r]];
            if cb == 0.0 {
                continue;
            }
            for c in 0..w {
                self.t[obj + c] -= cb * self.t[r * w + c];
            }
        }
    }

    /// Runs simplex iterations on the current objective row.
    fn optimize(&mut self) -> Result<bool> {
        let max_iter = 50_000 + 50 * (self.m + self.width);
        let mut degenerate = 0usize;
        for _ in 0..max_iter {
            let bland = degenerate >= DEGENERATE_RUN;
            let mut enter = None;
            let mut best = -OPT_TOL;
            for c in 0..self.width {
                if self.barred[c] {
                    continue;
                }
                let d = self.at(self.m, c);
                if bland {
                    if d < -OPT_TOL {
                        enter = Some(c);
                        break;
                    }
                } else if d < best {
                    best = d;
                    enter = Some(c);
                }
            }
            let Some(pc) = enter else {
                return Ok(true);
            };
            // Two-pass ratio test: bound the step with a small feasibility
            // slack, then take the largest pivot among rows within it.
            let mut bound = f64::INFINITY;
            for r in 0..self.m {
                let a = self.at(r, pc);
                if a > PIVOT_TOL {
                    bound = bound.min((self.rhs(r).max(0.0) + HARRIS_TOL) / a);
                }
            }
            let mut leave: Option<usize> = None;
            let mut best_ratio = f64::INFINITY;
            for r in 0..self.m {
                let a = self.at(r, pc);
                if a <= PIVOT_TOL {
                    continue;
                }
                let ratio = self.rhs(r).max(0.0) / a;
                if ratio > bound {
                    continue;
                }
                let better = match leave {
                    None => true,
                    Some(l) if bland => {
                        ratio < best_ratio - 1e-12
                            || (ratio <= best_ratio + 1e-12 && self.basis[r] < self.basis[l])
                    }
                    Some(l) => a > self.at(l, pc),
                };
                if better {
                    best_ratio = ratio;
                    leave = Some(r);
                }
            }
            let Some(pr) = leave else {
                return Ok(false);
            };
            if best_ratio <= 1e-12 {
                degenerate += 1;
            } else {
                degenerate = 0;
            }
            self.pivot(pr, pc);
        }
        Err(Error::Numerical("simplex iteration limit reached".into()))
    }
}

/// Solves `B^T y = rhs` for the basis matrix `B` given by `cols` of `a`.
fn solve_transposed(a: &[Vec<f64>], cols: &[usize], rhs: &[f64]) -> Option<Vec<f64>> {
    let m = cols.len();
    // Row k of B^T is column cols[k] of A.
    let mat: Vec<Vec<f64>> = cols
        .iter()
        .map(|&c| (0..m).map(|r| a[r][c]).collect())
        .collect();
    gauss_solve(mat, rhs.to_vec())
}

/// Solves `B z = rhs` for the basis matrix `B` given by `cols` of `a`.
fn solve_basis(a: &[Vec<f64>], cols: &[usize], rhs: &[f64]) -> Option<Vec<f64>> {
    let mat: Vec<Vec<f64>> = a.iter().map(|row| cols.iter().map(|&c| row[c]).collect()).collect();
    gauss_solve(mat, rhs.to_vec())
}

/// Gaussian elimination with partial pivoting.
fn gauss_solve(mut mat: Vec<Vec<f64>>, mut y: Vec<f64>) -> Option<Vec<f64>> {
    let m = y.len();
    for k in 0..m {
        let p = (k..m).max_by(|&i, &j| mat[i][k].abs().total_cmp(&mat[j][k].abs()))?;
        if mat[p][k].abs() < 1e-14 {
            return None;
        }
        mat.swap(k, p);
        y.swap(k, p);
        for i in k + 1..m {
            let f = mat[i][k] / mat[k][k];
            if f != 0.0 {
                for j in k..m {
                    mat[i][j] -= f * mat[k][j];
                }
                y[i] -= f * y[k];
            }
        }
    }
    for k in (0..m).rev() {
        let s: f64 = (k + 1..m).map(|j| mat[k][j] * y[j]).sum();
        y[k] = (y[k] - s) / mat[k][k];
    }
    Some(y)
}

/// Solves a linear program.
///
/// Infeasible and unbounded problems are reported through
/// [`LpSolution::status`]; an error is returned only when the final point
/// cannot be certified feasible within tolerance.
pub fn solve_lp(p: &LpProblem) -> Result<LpSolution> {
    p.check()?;
    let n = p.var_count();
    let std = standardize(p);
    let m = std.a.len();
    let base_width = std.c.len();
    let artificial_rows: Vec<usize> = (0..m).filter(|&r| std.start_basis[r].is_none()).collect();
    let width = base_width + artificial_rows.len();

    let mut t = vec![0.0; (m + 1) * (width + 1)];
    let mut basis = vec![0usize; m];
    let mut art_col = base_width;
    for r in 0..m {
        let row = &mut t[r * (width + 1)..(r + 1) * (width + 1)];
        row[..base_width].copy_from_slice(&std.a[r]);
        row[width] = std.b[r];
        match std.start_basis[r] {
            Some(col) => basis[r] = col,
            None => {
                row[art_col] = 1.0;
                basis[r] = art_col;
                art_col += 1;
            }
        }
    }
    let mut tab = Tableau {
        m,
        width,
        t,
        basis,
        barred: vec![false; width],
    };

    let b_scale = 1.0 + std.b.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    if !artificial_rows.is_empty() {
        let mut phase1 = vec![0.0; width];
        for c in base_width..width {
            phase1[c] = 1.0;
        }
        tab.set_costs(&phase1);
        tab.optimize()?;
        let infeas = -tab.at(m, width);
        if infeas > FEAS_TOL * b_scale {
            return Ok(LpSolution {
                status: LpStatus::Infeasible,
                x: vec![f64::NAN; n],
                duals: vec![0.0; p.rows.len()],
                objective: f64::NAN,
            });
        }
        // Drive zero-level artificials out of the basis where possible.
        for r in 0..m {
            if tab.basis[r] >= base_width {
                if let Some(c) = (0..base_width).find(|&c| tab.at(r, c).abs() > 1e-9) {
                    tab.pivot(r, c);
                }
            }
        }
        for c in base_width..width {
            tab.barred[c] = true;
        }
    }
    let mut cost = std.c.clone();
    cost.resize(width, 0.0);
    tab.set_costs(&cost);
    if !tab.optimize()? {
        return Ok(LpSolution {
            status: LpStatus::Unbounded,
            x: vec![f64::NAN; n],
            duals: vec![0.0; p.rows.len()],
            objective: if p.sense == Sense::Minimize {
                f64::NEG_INFINITY
            } else {
                f64::INFINITY
            },
        });
    }

    // Row duals and the refined primal both use the unpivoted matrix.
    let mut a_full = std.a.clone();
    for &r in &artificial_rows {
        for (rr, row) in a_full.iter_mut().enumerate() {
            row.push(if rr == r { 1.0 } else { 0.0 });
        }
    }
    let mut z = vec![0.0; width];
    for r in 0..m {
        z[tab.basis[r]] = tab.rhs(r).max(0.0);
    }
    // Recompute basic values from the original data to shed pivoting drift.
    if let Some(zb) = solve_basis(&a_full, &tab.basis, &std.b) {
        if zb.iter().all(|&v| v >= -1e-7) {
            for (r, &v) in zb.iter().enumerate() {
                z[tab.basis[r]] = v.max(0.0);
            }
        }
    }
    let x: Vec<f64> = std
        .maps
        .iter()
        .map(|map| match *map {
            VarMap::Shift { col, offset } => offset + z[col],
            VarMap::Mirror { col, offset } => offset - z[col],
            VarMap::Split { pos, neg } => z[pos] - z[neg],
        })
        .collect();
    let objective = dot(&p.objective, &x);

    let c_b: Vec<f64> = tab.basis.iter().map(|&c| cost[c]).collect();
    let y = solve_transposed(&a_full, &tab.basis, &c_b)
        .ok_or_else(|| Error::Numerical("singular final basis".into()))?;
    let sense_sign = if p.sense == Sense::Maximize { -1.0 } else { 1.0 };
    let duals: Vec<f64> = (0..std.original_rows)
        .map(|r| sense_sign * std.row_sign[r] * y[r])
        .collect();

    let violation = p.max_violation(&x);
    if violation > 1e-7 {
        return Err(Error::Numerical(format!(
            "solution violates constraints by {violation:.3e}"
        )));
    }
    Ok(LpSolution {
        status: LpStatus::Optimal,
        x,
        duals,
        objective,
    })
}

/// Which side of the Motzkin alternative a certificate witnesses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FarkasKind {
    /// `c >= 0` with `c.u < 0` and `c.v <= 0`.
    CostWitness,
    /// `(y', y'')` with `y' > 0`, `y'' >= 0` and `y' u + y'' v >= 0`.
    NonNegativeCombination,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FarkasCertificate {
    pub kind: FarkasKind,
    pub witness: Vec<f64>,
}

impl FarkasCertificate {
    /// Re-substitutes the witness into its defining inequalities.
    pub fn verify(&self, u: &[f64], v: &[f64]) -> bool {
        const TOL: f64 = 1e-9;
        match self.kind {
            FarkasKind::CostWitness => {
                let c = &self.witness;
                c.len() == u.len()
                    && c.iter().all(|&x| x >= 0.0)
                    && dot(c, u) < 0.0
                    && dot(c, v) <= TOL
            }
            FarkasKind::NonNegativeCombination => {
                let (a, b) = (self.witness[0], self.witness[1]);
                a > 0.0 && b >= 0.0 && u.iter().zip(v).all(|(x, y)| a * x + b * y >= -TOL)
            }
        }
    }
}

/// Decides which of the two systems holds:
///
/// 1. there is `c >= 0` with `c.u < 0` and `c.v <= 0`;
/// 2. there are `y' > 0`, `y'' >= 0` with `y' u + y'' v >= 0`.
///
/// Exactly one holds. The strict inequality is enforced with margin
/// [`STRICT_EPS`] and the returned witness is re-checked.
pub fn farkas_alternative(u: &[f64], v: &[f64]) -> Result<FarkasCertificate> {
    if u.len() != v.len() {
        return Err(Error::Dimension(format!(
            "vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let dim = u.len();
    // System 1 as a max-margin LP over the simplex: vars (c, t).
    let mut obj = vec![0.0; dim + 1];
    obj[dim] = 1.0;
    let mut lp = LpProblem::new(Sense::Maximize, obj);
    lp.set_bounds(dim, f64::NEG_INFINITY, 1.0);
    let mut row: Vec<f64> = u.to_vec();
    row.push(1.0);
    lp.add_row(row, Relation::Le, 0.0);
    let mut row: Vec<f64> = v.to_vec();
    row.push(0.0);
    lp.add_row(row, Relation::Le, 0.0);
    let mut row = vec![1.0; dim];
    row.push(0.0);
    lp.add_row(row, Relation::Eq, 1.0);
    let sol = solve_lp(&lp)?;
    if sol.is_optimal() && sol.x[dim] > STRICT_EPS {
        let mut c: Vec<f64> = sol.x[..dim].iter().map(|&x| x.max(0.0)).collect();
        let scale = c.iter().fold(0.0f64, |a, &b| a.max(b));
        c.iter_mut().for_each(|x| *x /= scale);
        // Clean tiny positive residue on the weak side.
        let cert = FarkasCertificate {
            kind: FarkasKind::CostWitness,
            witness: c,
        };
        if cert.verify(u, v) {
            return Ok(cert);
        }
    }
    // System 2 with y' = 1: smallest y'' >= 0 with u + y'' v >= 0.
    let mut lp = LpProblem::new(Sense::Minimize, vec![1.0]);
    for (&ui, &vi) in u.iter().zip(v) {
        lp.add_row(vec![vi], Relation::Ge, -ui);
    }
    let sol = solve_lp(&lp)?;
    if sol.is_optimal() {
        let cert = FarkasCertificate {
            kind: FarkasKind::NonNegativeCombination,
            witness: vec![1.0, sol.x[0].max(0.0)],
        };
        if cert.verify(u, v) {
            return Ok(cert);
        }
    }
    Err(Error::Numerical(
        "neither Farkas alternative could be certified".into(),
    ))
}
