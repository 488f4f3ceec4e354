//! Bounded-Lipschitz (Dudley) distance between finitely supported measures.
//!
//! For discrete measures the supremum over test functions with `|f| <= 1`
//! and Lipschitz constant `<= 1` reduces to a linear program in the values of
//! `f` on the union of the supports: any feasible assignment extends off the
//! support (McShane extension, then clipping to `[-1, 1]`) without raising
//! either norm.

use minilp::{ComparisonOp, OptimizationDirection, Problem};

use crate::error::{Error, Result};
use crate::points::{lexicographic, sq_dist, Points};

pub const MAX_BL_SUPPORT: usize = 256;

/// A probability measure with finite support.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedPoints {
    points: Points,
    weights: Vec<f64>,
}

impl WeightedPoints {
    pub fn new(points: Points, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("measure support"));
        }
        if weights.len() != points.len() {
            return Err(Error::Dimension {
                expected: points.len(),
                found: weights.len(),
            });
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Contract("measure weights must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("measure weights sum to {total}, not 1")));
        }
        Ok(Self { points, weights })
    }

    /// Empirical measure with mass `1/n` on each point.
    pub fn uniform(points: Points) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![1.0 / n as f64; n])
    }

    /// Point mass at `x`.
    pub fn dirac(x: &[f64]) -> Result<Self> {
        Self::new(Points::from_rows(&[x])?, vec![1.0])
    }

    pub fn points(&self) -> &Points {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// `sup { E_a f - E_b f : |f| <= 1, Lip(f) <= 1 }`, solved exactly as a
/// linear program over the union of the two supports.
pub fn bl_distance(a: &WeightedPoints, b: &WeightedPoints) -> Result<f64> {
    let d = a.points.dim();
    if b.points.dim() != d {
        return Err(Error::Dimension {
            expected: d,
            found: b.points.dim(),
        });
    }

    // Union support with signed masses; coincident points are merged.
    let mut atoms: Vec<(&[f64], f64)> = a
        .points
        .rows()
        .zip(&a.weights)
        .map(|(x, w)| (x, *w))
        .chain(b.points.rows().zip(&b.weights).map(|(x, w)| (x, -*w)))
        .collect();
    atoms.sort_by(|p, q| lexicographic(p.0, q.0));
    let mut support: Vec<(&[f64], f64)> = Vec::with_capacity(atoms.len());
    for (x, w) in atoms {
        match support.last_mut() {
            Some((y, acc)) if *y == x => *acc += w,
            _ => support.push((x, w)),
        }
    }
    if support.len() > MAX_BL_SUPPORT {
        return Err(Error::Contract(format!(
            "union support has {} points, the exact solver is capped at {MAX_BL_SUPPORT}",
            support.len()
        )));
    }
    if support.iter().all(|(_, w)| *w == 0.0) {
        return Ok(0.0);
    }

    let mut problem = Problem::new(OptimizationDirection::Maximize);
    let vars: Vec<_> = support
        .iter()
        .map(|(_, w)| problem.add_var(*w, (-1.0, 1.0)))
        .collect();
    for s in 0..support.len() {
        for t in s + 1..support.len() {
            let dist = sq_dist(support[s].0, support[t].0).sqrt();
            // pairs at distance >= 2 are already constrained by |f| <= 1
            if dist < 2.0 {
                problem.add_constraint(&[(vars[s], 1.0), (vars[t], -1.0)], ComparisonOp::Le, dist);
                problem.add_constraint(&[(vars[t], 1.0), (vars[s], -1.0)], ComparisonOp::Le, dist);
            }
        }
    }
    let solution = problem.solve().map_err(|e| Error::Lp(e.to_string()))?;
    Ok(solution.objective().clamp(0.0, 2.0))
}
