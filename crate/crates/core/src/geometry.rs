//! Ray menus, polarization tests and separating directions.

use serde::{Deserialize, Serialize};

use crate::dot;
use crate::error::{Error, Result};
use crate::lp::{farkas_alternative, solve_lp, FarkasKind, LpProblem, Relation, Sense, STRICT_EPS};

/// The trading set `{eta + y kappa : y >= 0, eta + y kappa >= 0}`.
/// A zero direction encodes the singleton `{eta}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub endpoint: Vec<f64>,
    pub direction: Vec<f64>,
}

impl Ray {
    pub fn new(endpoint: Vec<f64>, direction: Vec<f64>) -> Self {
        Ray { endpoint, direction }
    }

    pub fn singleton(endpoint: Vec<f64>) -> Self {
        let n = endpoint.len();
        Ray::new(endpoint, vec![0.0; n])
    }

    pub fn is_singleton(&self) -> bool {
        self.direction.iter().all(|&k| k == 0.0)
    }

    /// Has a strictly positive and a strictly negative coordinate.
    pub fn is_non_monotone(&self) -> bool {
        is_non_monotone(&self.direction)
    }

    /// Largest step keeping the bundle non-negative; infinite when the
    /// direction has no negative coordinate.
    pub fn y_max(&self) -> f64 {
        y_max(&self.endpoint, &self.direction)
    }

    pub fn point(&self, y: f64) -> Vec<f64> {
        self.endpoint
            .iter()
            .zip(&self.direction)
            .map(|(e, k)| e + y * k)
            .collect()
    }
}

pub fn is_non_monotone(kappa: &[f64]) -> bool {
    kappa.iter().any(|&k| k > 0.0) && kappa.iter().any(|&k| k < 0.0)
}

pub fn y_max(eta: &[f64], kappa: &[f64]) -> f64 {
    eta.iter()
        .zip(kappa)
        .filter(|(_, &k)| k < 0.0)
        .map(|(&e, &k)| e / -k)
        .fold(f64::INFINITY, f64::min)
}

/// Evidence for or against polarization of a pair of directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PairCertificate {
    /// `y1 kappa1 + y2 kappa2 >= 0` with `y1, y2 >= 0` not both zero.
    Weights { y1: f64, y2: f64 },
    /// `c >= 0` with `c.kappa1 < 0` and `c.kappa2 <= 0`.
    Violation { c: Vec<f64> },
}

impl PairCertificate {
    pub fn verify(&self, k1: &[f64], k2: &[f64]) -> bool {
        match self {
            PairCertificate::Weights { y1, y2 } => {
                *y1 >= 0.0
                    && *y2 >= 0.0
                    && (*y1 > 0.0 || *y2 > 0.0)
                    && k1.iter().zip(k2).all(|(a, b)| y1 * a + y2 * b >= -1e-9)
            }
            PairCertificate::Violation { c } => {
                c.iter().all(|&x| x >= 0.0) && dot(c, k1) < 0.0 && dot(c, k2) <= 1e-9
            }
        }
    }
}

/// Decides whether two rays from a common endpoint are polarized.
///
/// Pairs involving a singleton are exempt and always polarized.
pub fn is_polarized_pair(k1: &Ray, k2: &Ray) -> Result<(bool, PairCertificate)> {
    if k1.endpoint.len() != k2.endpoint.len() || k1.direction.len() != k2.direction.len() {
        return Err(Error::Dimension("rays of different dimension".into()));
    }
    if k1.endpoint != k2.endpoint {
        return Err(Error::Precondition("rays do not share an endpoint".into()));
    }
    polarized_directions(&k1.direction, &k2.direction)
}

/// [`is_polarized_pair`] on bare directions.
pub fn polarized_directions(k1: &[f64], k2: &[f64]) -> Result<(bool, PairCertificate)> {
    if k1.iter().all(|&x| x == 0.0) {
        return Ok((true, PairCertificate::Weights { y1: 1.0, y2: 0.0 }));
    }
    if k2.iter().all(|&x| x == 0.0) {
        return Ok((true, PairCertificate::Weights { y1: 0.0, y2: 1.0 }));
    }
    let first = farkas_alternative(k1, k2)?;
    if first.kind == FarkasKind::NonNegativeCombination {
        return Ok((
            true,
            PairCertificate::Weights {
                y1: first.witness[0],
                y2: first.witness[1],
            },
        ));
    }
    let second = farkas_alternative(k2, k1)?;
    if second.kind == FarkasKind::NonNegativeCombination {
        return Ok((
            true,
            PairCertificate::Weights {
                y1: second.witness[1],
                y2: second.witness[0],
            },
        ));
    }
    Ok((false, PairCertificate::Violation { c: first.witness }))
}

/// Smallest `y >= 0` with `u + y v >= 0`, if any.
fn nonnegative_step(u: &[f64], v: &[f64]) -> Option<f64> {
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    for (&a, &b) in u.iter().zip(v) {
        if b > 0.0 {
            lo = lo.max(-a / b);
        } else if b < 0.0 {
            hi = hi.min(a / -b);
        } else if a < 0.0 {
            return None;
        }
    }
    (lo <= hi * (1.0 + 1e-12) + 1e-12).then_some(lo)
}

/// Closed-form polarization test: each coordinate bounds the step `y` in
/// `k1 + y k2 >= 0` (or the reverse order) from one side.
pub fn polarized_closed_form(k1: &[f64], k2: &[f64]) -> bool {
    k1.iter().all(|&x| x == 0.0)
        || k2.iter().all(|&x| x == 0.0)
        || nonnegative_step(k1, k2).is_some()
        || nonnegative_step(k2, k1).is_some()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub first: usize,
    pub second: usize,
    pub polarized: bool,
    pub certificate: PairCertificate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarizationReport {
    /// Every non-singleton pair polarized and at most `I` non-singleton rays.
    pub verdict: bool,
    pub pairs_polarized: bool,
    pub cardinality_ok: bool,
    /// Negative-coordinate sets of non-singleton rays pairwise disjoint.
    pub disjoint_negatives: bool,
    pub pairs: Vec<PairResult>,
    pub violating_pair: Option<(usize, usize)>,
    pub non_singleton_count: usize,
}

impl PolarizationReport {
    pub fn failed_clauses(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !self.pairs_polarized {
            out.push("polarization");
        }
        if !self.cardinality_ok {
            out.push("cardinality");
        }
        if !self.disjoint_negatives {
            out.push("disjointness");
        }
        out
    }
}

/// Checks a menu of rays sharing one endpoint.
pub fn check_polarized_menu(rays: &[Ray]) -> Result<PolarizationReport> {
    if let Some(first) = rays.first() {
        if rays.iter().any(|r| r.endpoint != first.endpoint) {
            return Err(Error::Precondition("menu rays do not share an endpoint".into()));
        }
    }
    let dirs: Vec<Vec<f64>> = rays.iter().map(|r| r.direction.clone()).collect();
    check_polarized_directions(&dirs)
}

/// [`check_polarized_menu`] on bare directions.
pub fn check_polarized_directions(dirs: &[Vec<f64>]) -> Result<PolarizationReport> {
    let dim = dirs.first().map_or(0, Vec::len);
    if dirs.iter().any(|d| d.len() != dim) {
        return Err(Error::Dimension("menu directions of different dimension".into()));
    }
    let active: Vec<usize> = (0..dirs.len())
        .filter(|&k| dirs[k].iter().any(|&x| x != 0.0))
        .collect();
    let mut pairs = Vec::new();
    let mut violating_pair = None;
    let mut disjoint = true;
    for (a, &p) in active.iter().enumerate() {
        for &q in &active[a + 1..] {
            let (polarized, certificate) = polarized_directions(&dirs[p], &dirs[q])?;
            if !polarized && violating_pair.is_none() {
                violating_pair = Some((p, q));
            }
            if dirs[p].iter().zip(&dirs[q]).any(|(x, y)| *x < 0.0 && *y < 0.0) {
                disjoint = false;
            }
            pairs.push(PairResult {
                first: p,
                second: q,
                polarized,
                certificate,
            });
        }
    }
    let pairs_polarized = violating_pair.is_none();
    let cardinality_ok = active.len() <= dim;
    Ok(PolarizationReport {
        verdict: pairs_polarized && cardinality_ok,
        pairs_polarized,
        cardinality_ok,
        disjoint_negatives: disjoint,
        pairs,
        violating_pair,
        non_singleton_count: active.len(),
    })
}

/// Finds `gamma` with `delta.gamma < 0`, `c1.gamma < 0` and `c2.gamma > 0`,
/// normalized to `|gamma|_inf = 1`, by maximizing the common margin.
/// Returns `None` when the best margin is at most [`STRICT_EPS`].
pub fn separating_direction(c1: &[f64], c2: &[f64], delta: &[f64]) -> Result<Option<Vec<f64>>> {
    let dim = delta.len();
    if c1.len() != dim || c2.len() != dim {
        return Err(Error::Dimension("c1, c2 and delta differ in length".into()));
    }
    if delta.iter().all(|&d| d == 0.0) {
        return Err(Error::Precondition("delta must be nonzero".into()));
    }
    // Variables (gamma, t).
    let mut obj = vec![0.0; dim + 1];
    obj[dim] = 1.0;
    let mut lp = LpProblem::new(Sense::Maximize, obj);
    for i in 0..dim {
        lp.set_bounds(i, -1.0, 1.0);
    }
    let row = |v: &[f64], t: f64| {
        let mut r = v.to_vec();
        r.push(t);
        r
    };
    lp.add_row(row(delta, 1.0), Relation::Le, 0.0);
    lp.add_row(row(c1, 1.0), Relation::Le, 0.0);
    lp.add_row(row(c2, -1.0), Relation::Ge, 0.0);
    let sol = solve_lp(&lp)?;
    if !sol.is_optimal() || sol.x[dim] <= STRICT_EPS {
        return Ok(None);
    }
    let gamma = &sol.x[..dim];
    let norm = gamma.iter().fold(0.0f64, |a, &g| a.max(g.abs()));
    let gamma: Vec<f64> = gamma.iter().map(|g| g / norm).collect();
    let ok = dot(delta, &gamma) < 0.0 && dot(c1, &gamma) < 0.0 && dot(c2, &gamma) > 0.0;
    Ok(ok.then_some(gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ray(d: &[f64]) -> Ray {
        Ray::new(vec![1.0; d.len()], d.to_vec())
    }

    #[test]
    fn opposite_directions_are_polarized() {
        let (ok, cert) = is_polarized_pair(&ray(&[1.0, -1.0]), &ray(&[-1.0, 1.0])).unwrap();
        assert!(ok);
        assert_eq!(cert, PairCertificate::Weights { y1: 1.0, y2: 1.0 });
    }

    #[test]
    fn steeper_return_is_not_polarized() {
        let (k1, k2) = ([1.0, -1.0], [-2.0, 1.0]);
        let (ok, cert) = is_polarized_pair(&ray(&k1), &ray(&k2)).unwrap();
        assert!(!ok);
        let PairCertificate::Violation { c } = &cert else {
            panic!("expected a violation")
        };
        assert!((c[1] / c[0] - 2.0).abs() < 1e-9);
        assert!(cert.verify(&k1, &k2));
    }

    #[test]
    fn singleton_pairs_are_exempt() {
        let (ok, cert) = is_polarized_pair(&ray(&[1.0, -1.0]), &ray(&[0.0, 0.0])).unwrap();
        assert!(ok);
        assert!(cert.verify(&[1.0, -1.0], &[0.0, 0.0]));
    }

    #[test]
    fn endpoint_mismatch() {
        let a = Ray::new(vec![1.0, 1.0], vec![1.0, -1.0]);
        let b = Ray::new(vec![2.0, 0.0], vec![-1.0, 1.0]);
        assert!(matches!(is_polarized_pair(&a, &b), Err(Error::Precondition(_))));
    }

    #[test]
    fn canonical_menu_passes() {
        let r = check_polarized_menu(&[ray(&[0.0, 0.0]), ray(&[1.0, -1.0]), ray(&[-1.0, 1.0])]).unwrap();
        assert!(r.verdict && r.disjoint_negatives);
        assert_eq!(r.non_singleton_count, 2);
    }

    #[test]
    fn shared_negative_coordinate_fails() {
        let r = check_polarized_menu(&[ray(&[1.0, -1.0]), ray(&[2.0, -1.0])]).unwrap();
        assert!(!r.verdict);
        assert!(!r.disjoint_negatives);
        assert!(!r.pairs_polarized);
        assert_eq!(r.violating_pair, Some((0, 1)));
        assert!(r.failed_clauses().contains(&"disjointness"));
    }

    #[test]
    fn too_many_rays_fail_cardinality() {
        // Any three non-monotone rays in two dimensions.
        let r = check_polarized_menu(&[ray(&[1.0, -1.0]), ray(&[-1.0, 1.0]), ray(&[-1.0, 2.0])]).unwrap();
        assert!(!r.verdict);
        assert!(!r.cardinality_ok);
        assert!(r.failed_clauses().contains(&"cardinality"));
    }

    #[test]
    fn separating_direction_examples() {
        let g = separating_direction(&[1.0, 2.0], &[2.0, 1.0], &[-1.0, 1.0]).unwrap().unwrap();
        assert!((g[0] - 1.0).abs() < 1e-9 && (g[1] + 1.0).abs() < 1e-9);
        let g = separating_direction(&[2.0, 1.0], &[1.0, 2.0], &[1.0, -1.0]).unwrap().unwrap();
        assert!((g[0] + 1.0).abs() < 1e-9 && (g[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn identical_points_cannot_be_separated() {
        let c = [1.5, 1.5];
        for delta in [[1.0, -1.0], [-1.0, 1.0]] {
            assert!(separating_direction(&c, &c, &delta).unwrap().is_none());
        }
    }

    #[test]
    fn zero_delta_is_rejected() {
        assert!(separating_direction(&[1.0, 2.0], &[2.0, 1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn separating_direction_margins() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..300 {
            let dim = rng.gen_range(2..5);
            let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..dim).map(|_| rng.gen_range(0.1..3.0)).collect() };
            let (c1, c2) = (draw(&mut rng), draw(&mut rng));
            let delta: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            if let Some(g) = separating_direction(&c1, &c2, &delta).unwrap() {
                let inf = g.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
                assert!((inf - 1.0).abs() < 1e-12);
                assert!(dot(&delta, &g) < -1e-8);
                assert!(dot(&c1, &g) < -1e-8);
                assert!(dot(&c2, &g) > 1e-8);
            }
        }
    }

    #[test]
    fn polarization_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let dim = rng.gen_range(2..5);
            let k1: Vec<f64> = (0..dim).map(|_| rng.gen_range(-3i32..=3) as f64).collect();
            let k2: Vec<f64> = (0..dim).map(|_| rng.gen_range(-3i32..=3) as f64).collect();
            let (a, ca) = polarized_directions(&k1, &k2).unwrap();
            let (b, cb) = polarized_directions(&k2, &k1).unwrap();
            assert_eq!(a, b, "{k1:?} {k2:?}");
            assert_eq!(a, polarized_closed_form(&k1, &k2));
            assert!(ca.verify(&k1, &k2));
            assert!(cb.verify(&k2, &k1));
        }
    }
}
