//! Objective, fulfillment diagnostic and the deflation distance/penalty.
//!
//! The objective integrates the squared shortfall `min(0, |u_s| - u_t)^2`
//! with the same quadrature used everywhere else. Shapes are compared
//! through their elementwise characteristic functions, so the distance is
//! the square root of the area of the symmetric difference.

use crate::error::{Error, Result};
use crate::fem::{for_each_quad_point, ElementwiseField};
use crate::mesh::TriMesh;
use crate::physics::SmoothedVelocity;

/// Smallest distance fed to the penalty.
pub const R_MIN: f64 = 1e-3;
/// Clamp on the penalty exponent: `exp(-745)` is the last subnormal above
/// zero and `exp(500)` stays far from overflow when summed.
pub const EXPONENT_MIN: f64 = -745.0;
pub const EXPONENT_MAX: f64 = 500.0;

fn check_threshold(u_t: f64) -> Result<()> {
    if !(u_t > 0.0 && u_t.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "target speed u_t must be positive, got {u_t}"
        )));
    }
    Ok(())
}

fn speed(qp: &crate::fem::QuadPoint, u_s: &SmoothedVelocity) -> f64 {
    let [a, b] = qp.p2_vec(&u_s.u_s);
    a.hypot(b)
}

/// `J = int_D min(0, |u_s| - u_t)^2 dx`.
pub fn evaluate_objective(mesh: &TriMesh, u_s: &SmoothedVelocity, u_t: f64) -> Result<f64> {
    check_threshold(u_t)?;
    let mut j = 0.0;
    for_each_quad_point(mesh, |qp| {
        let short = (speed(qp, u_s) - u_t).min(0.0);
        j += qp.weight * short * short;
    });
    Ok(j)
}

/// Area fraction of quadrature weight where `|u_s| >= u_t`.
pub fn fulfillment_fraction(mesh: &TriMesh, u_s: &SmoothedVelocity, u_t: f64) -> Result<f64> {
    check_threshold(u_t)?;
    let mut met = 0.0;
    let mut total = 0.0;
    for_each_quad_point(mesh, |qp| {
        total += qp.weight;
        if speed(qp, u_s) >= u_t {
            met += qp.weight;
        }
    });
    Ok(if total > 0.0 { met / total } else { 0.0 })
}

fn check_elementwise(mesh: &TriMesh, f: &ElementwiseField, what: &str) -> Result<()> {
    if f.values.len() != mesh.n_triangles() {
        return Err(Error::MeshMismatch(format!(
            "{what} has {} values, mesh has {} triangles",
            f.values.len(),
            mesh.n_triangles()
        )));
    }
    Ok(())
}

/// `sqrt(sum_e area_e (chi1_e - chi2_e)^2)`.
pub fn shape_distance(
    mesh: &TriMesh,
    chi1: &ElementwiseField,
    chi2: &ElementwiseField,
) -> Result<f64> {
    check_elementwise(mesh, chi1, "first shape")?;
    check_elementwise(mesh, chi2, "second shape")?;
    let sq: f64 = mesh
        .element_areas()
        .iter()
        .zip(chi1.values.iter().zip(&chi2.values))
        .map(|(a, (x, y))| a * (x - y) * (x - y))
        .sum();
    Ok(sq.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyParams {
    /// Similarity radius.
    pub gamma: f64,
    /// Steepness.
    pub delta: f64,
    pub r_min: f64,
    pub exponent_min: f64,
    pub exponent_max: f64,
}

impl Default for PenaltyParams {
    fn default() -> Self {
        PenaltyParams {
            gamma: 0.4,
            delta: 50.0,
            r_min: R_MIN,
            exponent_min: EXPONENT_MIN,
            exponent_max: EXPONENT_MAX,
        }
    }
}

impl PenaltyParams {
    pub fn new(gamma: f64, delta: f64) -> Result<Self> {
        let p = PenaltyParams {
            gamma,
            delta,
            ..Self::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| {
            Err(Error::InvalidArgument(format!(
                "{what} must be positive, got {v}"
            )))
        };
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma", self.gamma);
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad("delta", self.delta);
        }
        if !(self.r_min > 0.0 && self.r_min.is_finite()) {
            return bad("r_min", self.r_min);
        }
        if !(self.exponent_min < self.exponent_max) {
            return Err(Error::InvalidArgument(format!(
                "exponent clamp [{}, {}] is empty",
                self.exponent_min, self.exponent_max
            )));
        }
        Ok(())
    }

    /// Distance actually used by the penalty and its derivative.
    pub fn floored(&self, r: f64) -> f64 {
        r.max(self.r_min)
    }

    /// `delta (gamma^2 / r - r)` clamped, at the floored distance. Written
    /// as a product so that it vanishes exactly at `r = gamma`.
    pub fn exponent(&self, r: f64) -> f64 {
        let r = self.floored(r);
        let e = self.delta * (self.gamma - r) * (self.gamma + r) / r;
        e.clamp(self.exponent_min, self.exponent_max)
    }
}

/// `exp(delta (gamma^2 / r - r))`.
pub fn penalty(r: f64, params: &PenaltyParams) -> f64 {
    params.exponent(r).exp()
}

/// An archived minimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub chi: ElementwiseField,
    pub round: usize,
    pub objective: f64,
    pub fulfillment: f64,
}

/// Append-only list of characteristic functions of found minimizers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ShapeArchive {
    entries: Vec<ArchiveEntry>,
}

impl ShapeArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: ArchiveEntry) -> Result<()> {
        if let Some(v) = entry.chi.values.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(format!(
                "archived characteristic function has value {v}, expected 0 or 1"
            )));
        }
        if let Some(first) = self.entries.first() {
            if first.chi.values.len() != entry.chi.values.len() {
                return Err(Error::MeshMismatch(format!(
                    "archive holds {} elements, new entry has {}",
                    first.chi.values.len(),
                    entry.chi.values.len()
                )));
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[ArchiveEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Sum in ascending order so the result does not depend on term order.
pub(crate) fn ordered_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// `sum_j penalty(dist(chi, chi_j))`; zero for an empty archive.
pub fn total_penalty(
    mesh: &TriMesh,
    chi: &ElementwiseField,
    archive: &ShapeArchive,
    params: &PenaltyParams,
) -> Result<f64> {
    let terms = archive
        .entries()
        .iter()
        .map(|e| shape_distance(mesh, chi, &e.chi).map(|r| penalty(r, params)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ordered_sum(terms))
}

pub fn deflated_objective(j: f64, p: f64) -> f64 {
    j + p
}
