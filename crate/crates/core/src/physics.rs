//! The four PDE solves of one optimization iteration: Stokes-Brinkman flow,
//! implicit-Euler smoothing of the velocity, the adjoint smoothing problem
//! and the adjoint flow problem.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fem::quadrature::line_gauss3;
use crate::fem::{
    assemble_p2_mass, assemble_smoothing_operator, for_each_quad_point, p2_element_dofs, p2_values,
    ElementwiseField, ScalarFieldP1, ScalarFieldP2, StokesAssembler, StokesLayout, VectorFieldP2,
};
use crate::linalg::{DirectSolver, FactorKind, Factorization, SparseMatrix};
use crate::mesh::{BoundaryTag, TriMesh, PORT_HIGH, PORT_LOW};

/// Floor on `||u_s||` in the direction `u_s / ||u_s||` of the adjoint
/// smoothing load.
pub const NORM_EPS: f64 = 1e-12;

/// Tolerance on `|inlet flux + outlet flux|`.
pub const MASS_BALANCE_TOL: f64 = 1e-8;

/// Parabolic port profile `u = amplitude (y - low)(high - y)` in the
/// x-direction, zero outside `[low, high]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InflowProfile {
    pub low: f64,
    pub high: f64,
    pub amplitude: f64,
}

impl Default for InflowProfile {
    fn default() -> Self {
        InflowProfile {
            low: PORT_LOW,
            high: PORT_HIGH,
            amplitude: 400.0 / 9.0,
        }
    }
}

impl InflowProfile {
    pub fn with_amplitude(amplitude: f64) -> Self {
        InflowProfile {
            amplitude,
            ..Self::default()
        }
    }

    pub fn value(&self, y: f64) -> f64 {
        if y < self.low || y > self.high {
            0.0
        } else {
            self.amplitude * (y - self.low) * (self.high - y)
        }
    }

    /// Exact `int u dy` across the port.
    pub fn flux(&self) -> f64 {
        self.amplitude * (self.high - self.low).powi(3) / 6.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub u: VectorFieldP2,
    pub p: ScalarFieldP1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedVelocity {
    pub u_s: VectorFieldP2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointState {
    pub v: VectorFieldP2,
    pub q: ScalarFieldP1,
    pub v_s: VectorFieldP2,
}

/// Mesh-bound solver holding the assembled operators and factorizations
/// shared across optimization iterations.
pub struct FlowSolver {
    mesh: Arc<TriMesh>,
    assembler: StokesAssembler,
    profile: InflowProfile,
    state_boundary: Vec<[f64; 2]>,
    zero_boundary: Vec<[f64; 2]>,
    p2_mass: SparseMatrix,
    dt: f64,
    smoothing: Arc<Factorization>,
    saddle: DirectSolver,
}

impl FlowSolver {
    pub fn new(mesh: Arc<TriMesh>, dt: f64, profile: InflowProfile) -> Result<Self> {
        for tag in [BoundaryTag::Inlet, BoundaryTag::Outlet, BoundaryTag::Wall] {
            if !mesh.has_tag(tag) {
                return Err(Error::InvalidArgument(format!(
                    "mesh has no boundary edge tagged {tag:?}"
                )));
            }
        }
        let smoothing = Factorization::cholesky(Arc::new(assemble_smoothing_operator(&mesh, dt)?))?;
        let assembler = StokesAssembler::new(&mesh);
        let state_boundary = port_boundary_values(&mesh, &assembler, &profile);
        let zero_boundary = vec![[0.0; 2]; assembler.boundary_dofs().len()];
        Ok(FlowSolver {
            p2_mass: assemble_p2_mass(&mesh),
            mesh,
            assembler,
            profile,
            state_boundary,
            zero_boundary,
            dt,
            smoothing: Arc::new(smoothing),
            saddle: DirectSolver::new(2),
        })
    }

    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    pub fn mesh_arc(&self) -> Arc<TriMesh> {
        self.mesh.clone()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn profile(&self) -> InflowProfile {
        self.profile
    }

    pub fn layout(&self) -> StokesLayout {
        self.assembler.layout()
    }

    /// Number of saddle-point factorizations computed so far.
    pub fn saddle_factorizations(&self) -> usize {
        self.saddle.factorization_count()
    }

    /// Stokes-Brinkman flow driven by the port profile (walls no-slip).
    pub fn solve_flow(&mut self, alpha: &ElementwiseField) -> Result<FlowState> {
        let values = self.state_boundary.clone();
        let state = self.solve_saddle(alpha, &values, None)?;
        let inlet = boundary_flux(&self.mesh, &state.u, BoundaryTag::Inlet);
        let outlet = boundary_flux(&self.mesh, &state.u, BoundaryTag::Outlet);
        if (inlet + outlet).abs() > MASS_BALANCE_TOL {
            return Err(Error::Consistency(format!(
                "mass imbalance: inlet flux {inlet:e}, outlet flux {outlet:e}"
            )));
        }
        Ok(state)
    }

    /// Flow with arbitrary Dirichlet velocity on the whole boundary.
    pub fn solve_flow_with(
        &mut self,
        alpha: &ElementwiseField,
        dirichlet: impl Fn([f64; 2], BoundaryTag) -> [f64; 2],
    ) -> Result<FlowState> {
        let values: Vec<[f64; 2]> = self
            .assembler
            .boundary_dofs()
            .iter()
            .map(|&(d, tag)| dirichlet(self.assembler.dof_coords()[d], tag))
            .collect();
        self.solve_saddle(alpha, &values, None)
    }

    fn solve_saddle(
        &mut self,
        alpha: &ElementwiseField,
        boundary: &[[f64; 2]],
        load: Option<(&[f64], &[f64])>,
    ) -> Result<FlowState> {
        let system = self.assembler.system(alpha, boundary, load)?;
        let matrix = Arc::new(system.matrix);
        let x = self
            .saddle
            .solve(&matrix, FactorKind::SymmetricIndefinite, &system.rhs)?;
        Ok(unpack(&system.layout, &x))
    }

    /// Componentwise `(1/dt) u_s - lap u_s = (1/dt) u` with natural boundary
    /// conditions.
    pub fn solve_smoothing(&self, u: &VectorFieldP2) -> Result<SmoothedVelocity> {
        let solve = |c: &ScalarFieldP2| -> Result<ScalarFieldP2> {
            let rhs: Vec<f64> = self
                .p2_mass
                .mul_vec(&c.values)
                .iter()
                .map(|v| v / self.dt)
                .collect();
            Ok(ScalarFieldP2 {
                values: self.smoothing.solve(&rhs)?,
            })
        };
        Ok(SmoothedVelocity {
            u_s: VectorFieldP2 {
                x: solve(&u.x)?,
                y: solve(&u.y)?,
            },
        })
    }

    /// `(1/dt) v_s - lap v_s = 2 (u_s/||u_s||) min(0, ||u_s|| - u_t)` with
    /// natural boundary conditions; the load is integrated with the same
    /// quadrature as the objective.
    pub fn solve_adjoint_smoothing(
        &self,
        u_s: &SmoothedVelocity,
        u_t: f64,
    ) -> Result<VectorFieldP2> {
        if !(u_t > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "target speed must be positive, got {u_t}"
            )));
        }
        let (bx, by) = adjoint_smoothing_load(&self.mesh, &u_s.u_s, u_t);
        if bx.iter().chain(&by).all(|v| *v == 0.0) {
            return Ok(VectorFieldP2::zeros(&self.mesh));
        }
        Ok(VectorFieldP2 {
            x: ScalarFieldP2 {
                values: self.smoothing.solve(&bx)?,
            },
            y: ScalarFieldP2 {
                values: self.smoothing.solve(&by)?,
            },
        })
    }

    /// Adjoint flow: same operator as the state, homogeneous Dirichlet data
    /// on the whole boundary and load `-(1/dt) M v_s`. With this sign the
    /// derivative of the objective with respect to the inverse permeability
    /// of element `e` is `int_e u . v dx`.
    pub fn solve_adjoint_flow(
        &mut self,
        alpha: &ElementwiseField,
        v_s: &VectorFieldP2,
    ) -> Result<(VectorFieldP2, ScalarFieldP1)> {
        if v_s.x.values.iter().chain(&v_s.y.values).all(|v| *v == 0.0) {
            return Ok((
                VectorFieldP2::zeros(&self.mesh),
                ScalarFieldP1::zeros(&self.mesh),
            ));
        }
        let scale = -1.0 / self.dt;
        let fx: Vec<f64> = self
            .p2_mass
            .mul_vec(&v_s.x.values)
            .iter()
            .map(|v| v * scale)
            .collect();
        let fy: Vec<f64> = self
            .p2_mass
            .mul_vec(&v_s.y.values)
            .iter()
            .map(|v| v * scale)
            .collect();
        let zero = self.zero_boundary.clone();
        let state = self.solve_saddle(alpha, &zero, Some((&fx, &fy)))?;
        Ok((state.u, state.p))
    }

    /// Adjoint smoothing followed by adjoint flow.
    pub fn solve_adjoint(
        &mut self,
        alpha: &ElementwiseField,
        u_s: &SmoothedVelocity,
        u_t: f64,
    ) -> Result<AdjointState> {
        let v_s = self.solve_adjoint_smoothing(u_s, u_t)?;
        let (v, q) = self.solve_adjoint_flow(alpha, &v_s)?;
        Ok(AdjointState { v, q, v_s })
    }
}

/// One-shot forward solve with the default port profile.
pub fn solve_flow(mesh: &TriMesh, alpha: &ElementwiseField) -> Result<FlowState> {
    FlowSolver::new(Arc::new(mesh.clone()), 1.0, InflowProfile::default())?.solve_flow(alpha)
}

fn unpack(layout: &StokesLayout, x: &[f64]) -> FlowState {
    let n = layout.n_p2;
    FlowState {
        u: VectorFieldP2 {
            x: ScalarFieldP2 {
                values: x[..n].to_vec(),
            },
            y: ScalarFieldP2 {
                values: x[n..2 * n].to_vec(),
            },
        },
        p: ScalarFieldP1 {
            values: x[2 * n..2 * n + layout.n_p1].to_vec(),
        },
    }
}

/// Port Dirichlet values: the profile interpolated at the quadratic dofs,
/// rescaled per port so the discrete flux equals the exact profile flux.
/// The rescaling is the identity (up to rounding) when the port ends are
/// mesh vertices.
fn port_boundary_values(
    mesh: &TriMesh,
    assembler: &StokesAssembler,
    profile: &InflowProfile,
) -> Vec<[f64; 2]> {
    let coords = assembler.dof_coords();
    let mut values: Vec<[f64; 2]> = assembler
        .boundary_dofs()
        .iter()
        .map(|&(d, tag)| match tag {
            BoundaryTag::Inlet | BoundaryTag::Outlet => [profile.value(coords[d][1]), 0.0],
            BoundaryTag::Wall => [0.0, 0.0],
        })
        .collect();
    let target = profile.flux();
    let mut ux = ScalarFieldP2::zeros(mesh);
    for (&(d, _), v) in assembler.boundary_dofs().iter().zip(&values) {
        ux.values[d] = v[0];
    }
    let field = VectorFieldP2 {
        x: ux,
        y: ScalarFieldP2::zeros(mesh),
    };
    for tag in [BoundaryTag::Inlet, BoundaryTag::Outlet] {
        let discrete = boundary_flux(mesh, &field, tag).abs();
        if discrete > 0.0 && target != 0.0 {
            let scale = target / discrete;
            for (&(_, t), v) in assembler.boundary_dofs().iter().zip(values.iter_mut()) {
                if t == tag {
                    v[0] *= scale;
                }
            }
        }
    }
    values
}

fn outward_normal(m: [f64; 2]) -> [f64; 2] {
    if m[0] < 1e-12 {
        [-1.0, 0.0]
    } else if m[0] > 1.0 - 1e-12 {
        [1.0, 0.0]
    } else if m[1] < 1e-12 {
        [0.0, -1.0]
    } else {
        [0.0, 1.0]
    }
}

/// `int u . n ds` over the boundary edges carrying `tag`, exact for the
/// quadratic trace.
pub fn boundary_flux(mesh: &TriMesh, u: &VectorFieldP2, tag: BoundaryTag) -> f64 {
    let nv = mesh.n_vertices();
    let rule = line_gauss3();
    let mut total = 0.0;
    for e in mesh.boundary_edges().iter().filter(|e| e.tag == tag) {
        let [a, b] = e.vertices;
        let mid = nv + e.edge;
        let n = outward_normal(mesh.edge_midpoint(e.edge));
        let len = mesh.edge_length(e.edge);
        let un = |d: usize| u.x.values[d] * n[0] + u.y.values[d] * n[1];
        let (ua, ub, um) = (un(a), un(b), un(mid));
        for &(t, w) in &rule {
            let trace = ua * (1.0 - t) * (1.0 - 2.0 * t)
                + ub * t * (2.0 * t - 1.0)
                + um * 4.0 * t * (1.0 - t);
            total += w * len * trace;
        }
    }
    total
}

/// Quadrature-assembled load of the adjoint smoothing problem.
pub fn adjoint_smoothing_load(
    mesh: &TriMesh,
    u_s: &VectorFieldP2,
    u_t: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = u_s.x.values.len();
    let mut bx = vec![0.0; n];
    let mut by = vec![0.0; n];
    for_each_quad_point(mesh, |qp| {
        let [sx, sy] = qp.p2_vec(u_s);
        let speed = sx.hypot(sy);
        let deficit = (speed - u_t).min(0.0);
        if deficit == 0.0 {
            return;
        }
        let denom = speed.max(NORM_EPS);
        let (gx, gy) = (2.0 * deficit * sx / denom, 2.0 * deficit * sy / denom);
        let dofs = p2_element_dofs(mesh, qp.element);
        for (phi, d) in p2_values(qp.bary).iter().zip(dofs) {
            bx[d] += qp.weight * phi * gx;
            by[d] += qp.weight * phi * gy;
        }
    });
    (bx, by)
}
