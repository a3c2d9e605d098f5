//! Choice probabilities of linear events under agent type distributions,
//! plus compensated summation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dot;
use crate::scenario::{Agent, Distribution};

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn kahan_sum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut k = KahanSum::new();
    for v in it {
        k.add(v);
    }
    k.total()
}

/// Area of the polygon given by its vertices in order.
fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for k in 0..n {
        let (x0, y0) = poly[k];
        let (x1, y1) = poly[(k + 1) % n];
        twice += x0 * y1 - x1 * y0;
    }
    0.5 * twice.abs()
}

/// Clips a convex polygon to `a.x + b <= 0`.
fn clip_halfplane(poly: &[(f64, f64)], a: (f64, f64), b: f64) -> Vec<(f64, f64)> {
    let f = |p: (f64, f64)| a.0 * p.0 + a.1 * p.1 + b;
    let mut out = Vec::with_capacity(poly.len() + 1);
    for k in 0..poly.len() {
        let p = poly[k];
        let q = poly[(k + 1) % poly.len()];
        let (fp, fq) = (f(p), f(q));
        if fp <= 0.0 {
            out.push(p);
        }
        if (fp < 0.0 && fq > 0.0) || (fp > 0.0 && fq < 0.0) {
            let t = fp / (fp - fq);
            out.push((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
        }
    }
    out
}

/// Exact `P(c.kappa < 0)` (or `<= 0` when `strict` is false) for `c`
/// uniform on the box `[lo, hi]`, available when the box has at most two
/// non-degenerate coordinates. Returns `None` otherwise.
pub fn uniform_box_prob(lo: &[f64], hi: &[f64], kappa: &[f64], strict: bool) -> Option<f64> {
    let free: Vec<usize> = (0..lo.len()).filter(|&i| hi[i] > lo[i]).collect();
    let offset: f64 = (0..lo.len())
        .filter(|&i| hi[i] <= lo[i])
        .map(|i| kappa[i] * lo[i])
        .sum();
    let indicator = |v: f64| {
        let hit = if strict { v < 0.0 } else { v <= 0.0 };
        if hit {
            1.0
        } else {
            0.0
        }
    };
    if free.iter().all(|&i| kappa[i] == 0.0) {
        return Some(indicator(offset));
    }
    match free.len() {
        1 => {
            let i = free[0];
            let (k, l, h) = (kappa[i], lo[i], hi[i]);
            // Solve k x + offset < 0 on [l, h].
            let root = -offset / k;
            let frac = if k > 0.0 {
                (root.clamp(l, h) - l) / (h - l)
            } else {
                (h - root.clamp(l, h)) / (h - l)
            };
            Some(frac)
        }
        2 => {
            let (i, j) = (free[0], free[1]);
            let rect = [
                (lo[i], lo[j]),
                (hi[i], lo[j]),
                (hi[i], hi[j]),
                (lo[i], hi[j]),
            ];
            let clipped = clip_halfplane(&rect, (kappa[i], kappa[j]), offset);
            let total = (hi[i] - lo[i]) * (hi[j] - lo[j]);
            Some((polygon_area(&clipped) / total).clamp(0.0, 1.0))
        }
        _ => None,
    }
}

/// A finite or exact representation of one agent's type distribution,
/// used to evaluate myopic choice probabilities over ray menus.
#[derive(Debug, Clone)]
pub enum TypeMeasure {
    /// Uniform on a box with at most two free coordinates; exact.
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
    /// Weighted finite support; exact.
    Weighted { points: Vec<Vec<f64>>, weights: Vec<f64> },
    /// Equally weighted seeded draws; Monte Carlo.
    Sampled { points: Vec<Vec<f64>> },
}

impl TypeMeasure {
    /// Exact where possible, otherwise `samples` seeded draws.
    pub fn for_agent(agent: &Agent, samples: usize, seed: u64) -> Self {
        match &agent.distribution {
            Distribution::Grid { points, weights } => TypeMeasure::Weighted {
                points: points.clone(),
                weights: weights.clone(),
            },
            Distribution::Uniform => {
                let free = agent
                    .pref_lo
                    .iter()
                    .zip(&agent.pref_hi)
                    .filter(|(l, h)| h > l)
                    .count();
                if free <= 2 {
                    TypeMeasure::UniformBox {
                        lo: agent.pref_lo.clone(),
                        hi: agent.pref_hi.clone(),
                    }
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let points = (0..samples.max(1)).map(|_| agent.sample_cost(&mut rng)).collect();
                    TypeMeasure::Sampled { points }
                }
            }
        }
    }

    pub fn is_exact(&self) -> bool {
        !matches!(self, TypeMeasure::Sampled { .. })
    }

    /// Probability that each direction is the myopic choice, i.e. the one
    /// with the most negative `c.kappa < 0`. The remainder is the
    /// probability of staying at the endpoint.
    ///
    /// For `UniformBox` the events are assumed disjoint, which holds for
    /// polarized directions.
    pub fn choice_probabilities(&self, dirs: &[Vec<f64>]) -> Vec<f64> {
        match self {
            TypeMeasure::UniformBox { lo, hi } => dirs
                .iter()
                .map(|k| uniform_box_prob(lo, hi, k, true).expect("at most two free coordinates"))
                .collect(),
            TypeMeasure::Weighted { points, weights } => {
                let mut acc = vec![KahanSum::new(); dirs.len()];
                for (c, &w) in points.iter().zip(weights) {
                    if let Some(k) = myopic_index(c, dirs) {
                        acc[k].add(w);
                    }
                }
                acc.iter().map(KahanSum::total).collect()
            }
            TypeMeasure::Sampled { points } => {
                let mut counts = vec![0usize; dirs.len()];
                for c in points {
                    if let Some(k) = myopic_index(c, dirs) {
                        counts[k] += 1;
                    }
                }
                let n = points.len() as f64;
                counts.iter().map(|&k| k as f64 / n).collect()
            }
        }
    }

    /// Standard error attached to a probability estimate from this measure.
    pub fn stderr(&self, p: f64) -> f64 {
        match self {
            TypeMeasure::Sampled { points } => (p * (1.0 - p) / points.len() as f64).sqrt(),
            _ => 0.0,
        }
    }
}

/// Index of the direction with the most negative `c.kappa`, if any is
/// strictly negative. Ties resolve to the lowest index.
pub fn myopic_index(c: &[f64], dirs: &[Vec<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, d) in dirs.iter().enumerate() {
        let v = dot(c, d);
        if v < 0.0 && best.map_or(true, |(_, b)| v < b) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}
