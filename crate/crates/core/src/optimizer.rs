//! Level-set optimization loop.
//!
//! The fluid region is `{psi < 0}`, decided per element by the mean of the
//! three vertex values. The level set is kept at unit L2 norm (consistent
//! P1 mass matrix) and moved towards the normalized generalized topological
//! derivative by spherical interpolation. The volume bounds enter twice:
//! every iterate is projected onto them by a constant shift, and the
//! derivative is shifted by the constant that makes its own negative set
//! feasible, which plays the role of the volume multiplier. At a stationary
//! point the level set equals that shifted derivative and the angle is zero.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fem::{assemble_p1_mass, ElementwiseField, ScalarFieldP1};
use crate::linalg::SparseMatrix;
use crate::mesh::TriMesh;
use crate::objective::{
    deflated_objective, evaluate_objective, fulfillment_fraction, total_penalty, PenaltyParams,
    ShapeArchive,
};
use crate::physics::{FlowSolver, FlowState, SmoothedVelocity};
use crate::topderiv::{
    generalized_td_flow, generalized_td_penalty, total_generalized_td, PenaltyTdVariant, TDField,
};

/// Below this `sin(theta)` the update treats `psi` and `g` as aligned.
const ALIGNED_SIN: f64 = 1e-14;
const MAX_BISECTION_STEPS: usize = 200;

/// Consistent P1 mass matrix with the inner product and norm it induces.
#[derive(Debug, Clone)]
pub struct MassInner {
    mass: Arc<SparseMatrix>,
}

impl MassInner {
    pub fn new(mesh: &TriMesh) -> Self {
        MassInner {
            mass: Arc::new(assemble_p1_mass(mesh)),
        }
    }

    pub fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        self.mass
            .mul_vec(b)
            .iter()
            .zip(a)
            .map(|(mb, a)| a * mb)
            .sum()
    }

    pub fn norm(&self, a: &[f64]) -> f64 {
        self.dot(a, a).max(0.0).sqrt()
    }

    /// `a / |a|`, computed after rescaling by the largest magnitude so that
    /// huge fields do not overflow. `None` for the zero field.
    pub fn normalized(&self, a: &[f64]) -> Option<Vec<f64>> {
        let peak = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(peak > 0.0 && peak.is_finite()) {
            return None;
        }
        let scaled: Vec<f64> = a.iter().map(|v| v / peak).collect();
        let n = self.norm(&scaled);
        if !(n > 0.0) {
            return None;
        }
        Some(scaled.iter().map(|v| v / n).collect())
    }
}

/// Level-set function with unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSet {
    pub psi: ScalarFieldP1,
}

impl LevelSet {
    /// Normalizes `values`; fails on the zero field.
    pub fn new(values: Vec<f64>, inner: &MassInner) -> Result<Self> {
        let psi = inner.normalized(&values).ok_or_else(|| {
            Error::InvalidArgument("level set must not vanish identically".into())
        })?;
        Ok(LevelSet {
            psi: ScalarFieldP1 { values: psi },
        })
    }

    /// All-fluid start `psi = -1 + |y - 1/2| + 1e-3 x + 1e-6 y`, normalized.
    /// Negative everywhere; the tilt orders the elements so that the volume
    /// projection removes material away from the port axis first and has no
    /// ties between elements of one row.
    pub fn all_fluid(mesh: &TriMesh, inner: &MassInner) -> Self {
        let values = mesh
            .vertices()
            .iter()
            .map(|p| -1.0 + (p[1] - 0.5).abs() + 1e-3 * p[0] + 1e-6 * p[1])
            .collect();
        Self::new(values, inner).expect("negative field")
    }

    pub fn values(&self) -> &[f64] {
        &self.psi.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSettings {
    pub eps_theta: f64,
    pub max_iterations: usize,
    pub kappa_initial: f64,
    pub kappa_min: f64,
    pub volume_lower: f64,
    pub volume_upper: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            eps_theta: 0.035,
            max_iterations: 500,
            kappa_initial: 1.0,
            kappa_min: 1.0 / 1024.0,
            volume_lower: 0.5,
            volume_upper: 0.7,
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if !(self.eps_theta > 0.0 && self.eps_theta <= std::f64::consts::PI) {
            return fail(format!(
                "eps_theta must lie in (0, pi], got {}",
                self.eps_theta
            ));
        }
        if self.max_iterations == 0 {
            return fail("max_iterations must be positive".into());
        }
        if !(self.kappa_min > 0.0
            && self.kappa_min <= self.kappa_initial
            && self.kappa_initial <= 1.0)
        {
            return fail(format!(
                "need 0 < kappa_min <= kappa_initial <= 1, got {} and {}",
                self.kappa_min, self.kappa_initial
            ));
        }
        if !(self.volume_lower > 0.0
            && self.volume_lower <= self.volume_upper
            && self.volume_upper <= 1.0)
        {
            return fail(format!(
                "need 0 < V_L <= V_U <= 1, got {} and {}",
                self.volume_lower, self.volume_upper
            ));
        }
        Ok(())
    }
}

/// Material and target parameters of the design problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignProblem {
    pub alpha_lower: f64,
    pub alpha_upper: f64,
    pub u_t: f64,
}

impl Default for DesignProblem {
    fn default() -> Self {
        DesignProblem {
            alpha_lower: 2.5 / 100.0 / 100.0,
            alpha_upper: 2.5 / 0.0025 / 0.0025,
            u_t: 0.1,
        }
    }
}

impl DesignProblem {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_lower > 0.0
            && self.alpha_lower < self.alpha_upper
            && self.alpha_upper.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "need 0 < alpha_L < alpha_U, got {} and {}",
                self.alpha_lower, self.alpha_upper
            )));
        }
        if !(self.u_t > 0.0 && self.u_t.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "u_t must be positive, got {}",
                self.u_t
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub penalty: f64,
    pub theta: f64,
    pub volume: f64,
    pub fulfillment: f64,
    /// Accepted step; zero on the final converged record.
    pub kappa: f64,
}

/// `chi_e = 1` where the vertex mean of `psi` is negative.
pub fn characteristic_from_levelset(psi: &LevelSet, mesh: &TriMesh) -> ElementwiseField {
    characteristic_from_values(psi.values(), mesh, 0.0)
}

fn element_means(values: &[f64], mesh: &TriMesh) -> Vec<f64> {
    mesh.triangles()
        .iter()
        .map(|t| (values[t[0]] + values[t[1]] + values[t[2]]) / 3.0)
        .collect()
}

fn characteristic_from_values(values: &[f64], mesh: &TriMesh, shift: f64) -> ElementwiseField {
    ElementwiseField {
        values: element_means(values, mesh)
            .into_iter()
            .map(|m| if m - shift < 0.0 { 1.0 } else { 0.0 })
            .collect(),
    }
}

pub fn alpha_from_levelset(
    psi: &LevelSet,
    mesh: &TriMesh,
    alpha_lower: f64,
    alpha_upper: f64,
) -> ElementwiseField {
    alpha_from_characteristic(
        &characteristic_from_levelset(psi, mesh),
        alpha_lower,
        alpha_upper,
    )
}

pub fn alpha_from_characteristic(
    chi: &ElementwiseField,
    alpha_lower: f64,
    alpha_upper: f64,
) -> ElementwiseField {
    ElementwiseField {
        values: chi
            .values
            .iter()
            .map(|&c| if c == 1.0 { alpha_lower } else { alpha_upper })
            .collect(),
    }
}

/// Fluid area `sum_e area_e chi_e`.
pub fn fluid_volume(mesh: &TriMesh, chi: &ElementwiseField) -> f64 {
    mesh.element_areas()
        .iter()
        .zip(&chi.values)
        .map(|(a, c)| a * c)
        .sum()
}

/// Shift `c` such that `{values - c < 0}` has volume in `[lower, upper]`.
/// Zero when already feasible.
fn feasible_shift(values: &[f64], mesh: &TriMesh, lower: f64, upper: f64) -> Result<f64> {
    let means = element_means(values, mesh);
    let areas = mesh.element_areas();
    let volume = |c: f64| -> f64 {
        means
            .iter()
            .zip(areas)
            .filter(|(m, _)| **m - c < 0.0)
            .map(|(_, a)| a)
            .sum()
    };
    let v0 = volume(0.0);
    if v0 >= lower && v0 <= upper {
        return Ok(0.0);
    }
    let tol = 0.5 * mesh.min_element_area();
    let max_area = areas.iter().fold(0.0f64, |m, a| m.max(*a));
    let (mlo, mhi) = means
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), m| {
            (a.min(*m), b.max(*m))
        });
    let pad = (mhi - mlo).abs().max(mhi.abs()).max(mlo.abs()).max(1.0);
    // volume(lo) = 0 <= target <= volume(hi) = |D|
    let mut lo = mlo - pad;
    let mut hi = mhi + pad;
    let shrink = v0 > upper;
    let target = if shrink { upper } else { lower };
    let (mut vlo, mut vhi) = (0.0, volume(hi));
    for _ in 0..MAX_BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let vm = volume(mid);
        if vm <= target {
            lo = mid;
            vlo = vm;
        } else {
            hi = mid;
            vhi = vm;
        }
        if shrink && target - vlo <= tol || !shrink && vhi - target <= tol {
            break;
        }
    }
    // keep the side that respects the violated bound, else the other side
    // if it is feasible up to one element
    let (first, second) = if shrink {
        ((lo, vlo), (hi, vhi))
    } else {
        ((hi, vhi), (lo, vlo))
    };
    for (c, v) in [first, second] {
        if v >= lower && v <= upper {
            return Ok(c);
        }
    }
    for (c, v) in [first, second] {
        if v >= lower - max_area && v <= upper + max_area {
            return Ok(c);
        }
    }
    Err(Error::Projection(format!(
        "cannot bracket volume {target}: reachable volumes {vlo} and {vhi}"
    )))
}

/// Shifts `psi` by a constant so that the fluid volume lies in
/// `[lower, upper]`, then renormalizes.
pub fn volume_project(
    psi: &LevelSet,
    mesh: &TriMesh,
    inner: &MassInner,
    lower: f64,
    upper: f64,
) -> Result<LevelSet> {
    let c = feasible_shift(psi.values(), mesh, lower, upper)?;
    if c == 0.0 {
        return Ok(psi.clone());
    }
    let shifted: Vec<f64> = psi.values().iter().map(|v| v - c).collect();
    LevelSet::new(shifted, inner)
        .map_err(|_| Error::Projection("shifted level set vanishes identically".into()))
}

/// Angle between `psi` and `g` in the L2 inner product, in `[0, pi]`.
pub fn angle(psi: &LevelSet, g: &TDField, inner: &MassInner) -> Result<f64> {
    let gn = inner.normalized(g.values()).ok_or(Error::ZeroDerivative)?;
    let pn = inner
        .normalized(psi.values())
        .ok_or_else(|| Error::InvalidArgument("level set vanishes identically".into()))?;
    Ok(inner.dot(&pn, &gn).clamp(-1.0, 1.0).acos())
}

/// Spherical interpolation from `psi` towards `g / |g|` by the fraction
/// `kappa` of the angle between them.
pub fn update_levelset(
    psi: &LevelSet,
    g: &TDField,
    kappa: f64,
    inner: &MassInner,
) -> Result<LevelSet> {
    let theta = angle(psi, g, inner)?;
    let s = theta.sin();
    if theta == 0.0 || s.abs() < ALIGNED_SIN {
        return Ok(psi.clone());
    }
    let gn = inner.normalized(g.values()).ok_or(Error::ZeroDerivative)?;
    let a = ((1.0 - kappa) * theta).sin() / s;
    let b = (kappa * theta).sin() / s;
    let values = psi
        .values()
        .iter()
        .zip(&gn)
        .map(|(p, q)| a * p + b * q)
        .collect();
    LevelSet::new(values, inner)
}

/// Derivative shifted by the constant that makes its negative set satisfy
/// the volume bounds.
pub fn volume_shifted_derivative(
    g: &TDField,
    mesh: &TriMesh,
    inner: &MassInner,
    lower: f64,
    upper: f64,
) -> Result<TDField> {
    let gn = inner.normalized(g.values()).ok_or(Error::ZeroDerivative)?;
    let c = feasible_shift(&gn, mesh, lower, upper)?;
    let values = gn.iter().map(|v| v - c).collect();
    Ok(TDField {
        g: ScalarFieldP1 { values },
    })
}

/// Deflation context: archive of earlier minimizers and penalty settings.
#[derive(Debug, Clone)]
pub struct PenaltyContext<'a> {
    pub archive: &'a ShapeArchive,
    pub params: PenaltyParams,
    pub variant: PenaltyTdVariant,
}

/// A level set with its shape, state and objective values.
#[derive(Debug, Clone)]
pub struct Design {
    pub levelset: LevelSet,
    pub chi: ElementwiseField,
    pub alpha: ElementwiseField,
    pub flow: FlowState,
    pub smoothed: SmoothedVelocity,
    pub objective: f64,
    pub penalty: f64,
    pub volume: f64,
    pub fulfillment: f64,
}

impl Design {
    pub fn merit(&self) -> f64 {
        deflated_objective(self.objective, self.penalty)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizeStatus {
    Converged,
    IterationCap,
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub design: Design,
    pub history: Vec<IterationRecord>,
    pub status: OptimizeStatus,
    /// Angle at the returned design.
    pub theta: f64,
}

impl OptimizeResult {
    pub fn iterations(&self) -> usize {
        self.history.len()
    }
}

/// Level-set optimizer bound to one flow solver.
pub struct Optimizer<'s> {
    solver: &'s mut FlowSolver,
    inner: MassInner,
    settings: OptimizerSettings,
    problem: DesignProblem,
}

impl<'s> Optimizer<'s> {
    pub fn new(
        solver: &'s mut FlowSolver,
        settings: OptimizerSettings,
        problem: DesignProblem,
    ) -> Result<Self> {
        settings.validate()?;
        problem.validate()?;
        let inner = MassInner::new(solver.mesh());
        Ok(Optimizer {
            solver,
            inner,
            settings,
            problem,
        })
    }

    pub fn inner(&self) -> &MassInner {
        &self.inner
    }

    pub fn mesh(&self) -> Arc<TriMesh> {
        self.solver.mesh_arc()
    }

    /// All-fluid start projected onto the volume bounds.
    pub fn initial_levelset(&self) -> Result<LevelSet> {
        let mesh = self.solver.mesh_arc();
        let psi = LevelSet::all_fluid(&mesh, &self.inner);
        self.project(&psi)
    }

    fn project(&self, psi: &LevelSet) -> Result<LevelSet> {
        let mesh = self.solver.mesh_arc();
        volume_project(
            psi,
            &mesh,
            &self.inner,
            self.settings.volume_lower,
            self.settings.volume_upper,
        )
    }

    /// Forward solves and objective values for `psi` as given.
    pub fn evaluate(&mut self, psi: &LevelSet, penalty: Option<&PenaltyContext>) -> Result<Design> {
        let mesh = self.solver.mesh_arc();
        let chi = characteristic_from_levelset(psi, &mesh);
        let alpha =
            alpha_from_characteristic(&chi, self.problem.alpha_lower, self.problem.alpha_upper);
        let flow = self.solver.solve_flow(&alpha)?;
        let smoothed = self.solver.solve_smoothing(&flow.u)?;
        let objective = evaluate_objective(&mesh, &smoothed, self.problem.u_t)?;
        let fulfillment = fulfillment_fraction(&mesh, &smoothed, self.problem.u_t)?;
        let penalty = match penalty {
            Some(ctx) => total_penalty(&mesh, &chi, ctx.archive, &ctx.params)?,
            None => 0.0,
        };
        Ok(Design {
            levelset: psi.clone(),
            volume: fluid_volume(&mesh, &chi),
            chi,
            alpha,
            flow,
            smoothed,
            objective,
            penalty,
            fulfillment,
        })
    }

    /// Generalized topological derivative at `design`.
    pub fn derivative(
        &mut self,
        design: &Design,
        penalty: Option<&PenaltyContext>,
    ) -> Result<TDField> {
        let mesh = self.solver.mesh_arc();
        let adjoint =
            self.solver
                .solve_adjoint(&design.alpha, &design.smoothed, self.problem.u_t)?;
        let flow_td = generalized_td_flow(
            &mesh,
            &design.flow.u,
            &adjoint.v,
            (self.problem.alpha_lower, self.problem.alpha_upper),
        )?;
        match penalty {
            Some(ctx) if !ctx.archive.is_empty() => {
                let p = generalized_td_penalty(
                    &mesh,
                    &design.chi,
                    ctx.archive,
                    &ctx.params,
                    ctx.variant,
                )?;
                total_generalized_td(&flow_td, &p)
            }
            _ => Ok(flow_td),
        }
    }

    /// Runs the loop from `initial` (projected first) until the angle test
    /// passes or the iteration cap is reached. `sink` sees every record.
    pub fn optimize(
        &mut self,
        initial: &LevelSet,
        penalty: Option<&PenaltyContext>,
        mut sink: impl FnMut(&IterationRecord),
    ) -> Result<OptimizeResult> {
        let mesh = self.solver.mesh_arc();
        let s = self.settings;
        let psi = self.project(initial)?;
        let mut current = self.evaluate(&psi, penalty)?;
        let mut history = Vec::new();
        for iteration in 0..s.max_iterations {
            let g = self.derivative(&current, penalty)?;
            let g_eff = match volume_shifted_derivative(
                &g,
                &mesh,
                &self.inner,
                s.volume_lower,
                s.volume_upper,
            ) {
                Ok(g) => g,
                Err(Error::ZeroDerivative) => {
                    log::info!("iteration {iteration}: derivative vanishes, stationary");
                    let record = self.record(iteration, &current, 0.0, 0.0);
                    sink(&record);
                    history.push(record);
                    return Ok(OptimizeResult {
                        design: current,
                        history,
                        status: OptimizeStatus::Converged,
                        theta: 0.0,
                    });
                }
                Err(e) => return Err(e),
            };
            let theta = angle(&current.levelset, &g_eff, &self.inner)?;
            if theta < s.eps_theta {
                let record = self.record(iteration, &current, theta, 0.0);
                sink(&record);
                history.push(record);
                return Ok(OptimizeResult {
                    design: current,
                    history,
                    status: OptimizeStatus::Converged,
                    theta,
                });
            }
            let merit = current.merit();
            let mut kappa = s.kappa_initial;
            let accepted = loop {
                let stepped = update_levelset(&current.levelset, &g_eff, kappa, &self.inner)?;
                let trial = self.evaluate(&self.project(&stepped)?, penalty)?;
                if trial.merit() <= merit {
                    break trial;
                }
                if kappa * 0.5 < s.kappa_min {
                    log::warn!(
                        "iteration {iteration}: no decrease down to kappa = {kappa:.3e}, forcing step"
                    );
                    break trial;
                }
                kappa *= 0.5;
            };
            let record = self.record(iteration, &current, theta, kappa);
            log::debug!(
                "iter {iteration}: J = {:.6e} P = {:.3e} theta = {theta:.4} vol = {:.4} kappa = {kappa}",
                current.objective,
                current.penalty,
                current.volume
            );
            sink(&record);
            history.push(record);
            current = accepted;
        }
        let g = self.derivative(&current, penalty)?;
        let theta =
            volume_shifted_derivative(&g, &mesh, &self.inner, s.volume_lower, s.volume_upper)
                .and_then(|g| angle(&current.levelset, &g, &self.inner))
                .unwrap_or(0.0);
        Ok(OptimizeResult {
            design: current,
            history,
            status: OptimizeStatus::IterationCap,
            theta,
        })
    }

    fn record(&self, iteration: usize, d: &Design, theta: f64, kappa: f64) -> IterationRecord {
        IterationRecord {
            iteration,
            objective: d.objective,
            penalty: d.penalty,
            theta,
            volume: d.volume,
            fulfillment: d.fulfillment,
            kappa,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_unit_square_mesh;
    use crate::physics::InflowProfile;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn levelset(mesh: &TriMesh, inner: &MassInner, f: impl Fn([f64; 2]) -> f64) -> LevelSet {
        LevelSet::new(mesh.vertices().iter().map(|&p| f(p)).collect(), inner).unwrap()
    }

    #[test]
    fn characteristic_examples() {
        let mesh = build_unit_square_mesh(8).unwrap();
        let inner = MassInner::new(&mesh);
        let neg = LevelSet::all_fluid(&mesh, &inner);
        assert!((inner.norm(neg.values()) - 1.0).abs() < 1e-12);
        assert!(characteristic_from_levelset(&neg, &mesh)
            .values
            .iter()
            .all(|&c| c == 1.0));
        let pos = levelset(&mesh, &inner, |_| 3.0);
        assert!(characteristic_from_levelset(&pos, &mesh)
            .values
            .iter()
            .all(|&c| c == 0.0));

        let half = levelset(&mesh, &inner, |p| p[0] - 0.5);
        let chi = characteristic_from_levelset(&half, &mesh);
        for t in 0..mesh.n_triangles() {
            assert_eq!(chi.values[t] == 1.0, mesh.centroid(t)[0] < 0.5);
        }
        assert!((fluid_volume(&mesh, &chi) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn alpha_examples() {
        let mesh = build_unit_square_mesh(4).unwrap();
        let inner = MassInner::new(&mesh);
        let p = DesignProblem::default();
        let fluid = alpha_from_levelset(
            &LevelSet::all_fluid(&mesh, &inner),
            &mesh,
            p.alpha_lower,
            p.alpha_upper,
        );
        assert!(fluid.values.iter().all(|&a| a == 2.5e-4));
        let solid = alpha_from_levelset(
            &levelset(&mesh, &inner, |_| 1.0),
            &mesh,
            p.alpha_lower,
            p.alpha_upper,
        );
        assert!(solid.values.iter().all(|&a| a == 400_000.0));
    }

    #[test]
    fn projection_examples() {
        let mesh = build_unit_square_mesh(20).unwrap();
        let inner = MassInner::new(&mesh);
        // fluid volume 0.6: unchanged
        let ok = levelset(&mesh, &inner, |p| p[0] - 0.6);
        let vol = |psi: &LevelSet| fluid_volume(&mesh, &characteristic_from_levelset(psi, &mesh));
        assert!((vol(&ok) - 0.6).abs() < 1e-12);
        assert_eq!(volume_project(&ok, &mesh, &inner, 0.5, 0.7).unwrap(), ok);

        // flat psi cannot be bracketed
        let flat = levelset(&mesh, &inner, |_| -1.0);
        let r = volume_project(&flat, &mesh, &inner, 0.5, 0.7);
        assert!(matches!(r, Err(Error::Projection(_))));

        // all fluid start: projected to 0.7
        let fluid = LevelSet::all_fluid(&mesh, &inner);
        assert!((vol(&fluid) - 1.0).abs() < 1e-12);
        let proj = volume_project(&fluid, &mesh, &inner, 0.5, 0.7).unwrap();
        let v = vol(&proj);
        assert!(
            v <= 0.7 + 1e-12 && v >= 0.7 - mesh.min_element_area() - 1e-12,
            "{v}"
        );

        let slope = levelset(&mesh, &inner, |p| p[0] + 0.01 * p[1] - 2.0);
        let proj = volume_project(&slope, &mesh, &inner, 0.5, 0.7).unwrap();
        let v = vol(&proj);
        assert!(
            v <= 0.7 + 1e-12 && v >= 0.7 - mesh.min_element_area() - 1e-12,
            "{v}"
        );
        assert!((inner.norm(proj.values()) - 1.0).abs() < 1e-12);

        let low = levelset(&mesh, &inner, |p| p[0] + 0.01 * p[1] + 1.0);
        let proj = volume_project(&low, &mesh, &inner, 0.5, 0.7).unwrap();
        let v = vol(&proj);
        assert!(
            v >= 0.5 - 1e-12 && v <= 0.5 + mesh.min_element_area() + 1e-12,
            "{v}"
        );
    }

    #[test]
    fn shifting_down_enlarges_fluid() {
        let mesh = build_unit_square_mesh(10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let values: Vec<f64> = (0..mesh.n_vertices())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let mut last = -1.0;
            for k in 0..=40 {
                let c = -1.0 + 0.05 * f64::from(k);
                let chi = characteristic_from_values(&values, &mesh, c);
                let v = fluid_volume(&mesh, &chi);
                assert!(v >= last);
                last = v;
            }
            assert!((last - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn angle_examples() {
        let mesh = build_unit_square_mesh(6).unwrap();
        let inner = MassInner::new(&mesh);
        let psi = levelset(&mesh, &inner, |p| (3.0 * p[0]).sin() + p[1] - 0.4);
        let g = TDField { g: psi.psi.clone() };
        assert!(angle(&psi, &g, &inner).unwrap() < 1e-7);
        let minus = TDField {
            g: ScalarFieldP1 {
                values: psi.values().iter().map(|v| -v).collect(),
            },
        };
        assert!((angle(&psi, &minus, &inner).unwrap() - std::f64::consts::PI).abs() < 1e-7);
        // Gram-Schmidt
        let w: Vec<f64> = mesh.vertices().iter().map(|p| p[0] * p[1]).collect();
        let c = inner.dot(&w, psi.values());
        let orth: Vec<f64> = w.iter().zip(psi.values()).map(|(a, b)| a - c * b).collect();
        let th = angle(
            &psi,
            &TDField {
                g: ScalarFieldP1 { values: orth },
            },
            &inner,
        )
        .unwrap();
        assert!((th - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!(matches!(
            angle(&psi, &TDField::zeros(&mesh), &inner),
            Err(Error::ZeroDerivative)
        ));
    }

    #[test]
    fn huge_derivative_does_not_overflow() {
        let mesh = build_unit_square_mesh(4).unwrap();
        let inner = MassInner::new(&mesh);
        let psi = levelset(&mesh, &inner, |p| p[0] - 0.5);
        let g = TDField {
            g: ScalarFieldP1 {
                values: psi.values().iter().map(|v| v * 1e250).collect(),
            },
        };
        assert!(angle(&psi, &g, &inner).unwrap() < 1e-7);
    }

    #[test]
    fn update_endpoints() {
        let mesh = build_unit_square_mesh(6).unwrap();
        let inner = MassInner::new(&mesh);
        let psi = levelset(&mesh, &inner, |p| p[0] - 0.3);
        let g = TDField {
            g: ScalarFieldP1 {
                values: mesh.vertices().iter().map(|p| 5.0 * (p[1] - 0.5)).collect(),
            },
        };
        let one = update_levelset(&psi, &g, 1.0, &inner).unwrap();
        let gn = inner.normalized(g.values()).unwrap();
        for (a, b) in one.values().iter().zip(&gn) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero = update_levelset(&psi, &g, 0.0, &inner).unwrap();
        for (a, b) in zero.values().iter().zip(psi.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        let same = update_levelset(&psi, &TDField { g: psi.psi.clone() }, 0.5, &inner).unwrap();
        assert_eq!(same, psi);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn update_rotates_by_fraction(seed in any::<u64>(), kappa in 0.01f64..0.99) {
            let mesh = build_unit_square_mesh(5).unwrap();
            let inner = MassInner::new(&mesh);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = || -> Vec<f64> { (0..mesh.n_vertices()).map(|_| rng.gen_range(-1.0..1.0)).collect() };
            let psi = LevelSet::new(draw(), &inner).unwrap();
            let g = TDField { g: ScalarFieldP1 { values: draw() } };
            let theta = angle(&psi, &g, &inner).unwrap();
            let next = update_levelset(&psi, &g, kappa, &inner).unwrap();
            prop_assert!((inner.norm(next.values()) - 1.0).abs() < 1e-12);
            let after = angle(&next, &g, &inner).unwrap();
            prop_assert!((after - (1.0 - kappa) * theta).abs() < 1e-8);
        }
    }

    #[test]
    fn settings_validation() {
        assert!(OptimizerSettings::default().validate().is_ok());
        let bad = OptimizerSettings {
            kappa_min: 2.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = OptimizerSettings {
            volume_lower: 0.8,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(DesignProblem {
            u_t: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn trivial_tolerance_stops_at_first_iterate() {
        let mesh = Arc::new(build_unit_square_mesh(20).unwrap());
        let mut solver = FlowSolver::new(mesh.clone(), 1e-3, InflowProfile::default()).unwrap();
        let settings = OptimizerSettings {
            eps_theta: std::f64::consts::PI,
            ..Default::default()
        };
        let mut opt = Optimizer::new(&mut solver, settings, DesignProblem::default()).unwrap();
        let start = opt.initial_levelset().unwrap();
        let r = opt.optimize(&start, None, |_| {}).unwrap();
        assert_eq!(r.status, OptimizeStatus::Converged);
        assert_eq!(r.iterations(), 1);
        assert_eq!(r.design.levelset, start);
        assert!(r.design.volume <= 0.7 + 1e-9 && r.design.volume >= 0.7 - mesh.min_element_area());
    }

    #[test]
    fn short_run_keeps_invariants() {
        let mesh = Arc::new(build_unit_square_mesh(20).unwrap());
        let mut solver = FlowSolver::new(mesh.clone(), 1e-3, InflowProfile::default()).unwrap();
        let settings = OptimizerSettings {
            max_iterations: 6,
            ..Default::default()
        };
        let mut opt = Optimizer::new(&mut solver, settings, DesignProblem::default()).unwrap();
        let start = opt.initial_levelset().unwrap();
        let inner = opt.inner().clone();
        let mut seen = Vec::new();
        let r = opt.optimize(&start, None, |rec| seen.push(*rec)).unwrap();
        assert_eq!(seen, r.history);
        let h = mesh.min_element_area();
        for (k, rec) in r.history.iter().enumerate() {
            assert_eq!(rec.iteration, k);
            assert!(rec.volume >= 0.5 - h && rec.volume <= 0.7 + h);
            assert_eq!(rec.penalty, 0.0);
        }
        for w in r.history.windows(2) {
            if w[0].kappa >= settings.kappa_min * 2.0 {
                assert!(w[1].objective <= w[0].objective);
            }
        }
        assert!((inner.norm(r.design.levelset.values()) - 1.0).abs() < 1e-12);
    }
}
