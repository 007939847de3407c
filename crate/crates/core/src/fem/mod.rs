//! Taylor-Hood (P2 velocity / P1 pressure) and quadratic scalar finite
//! elements on [`TriMesh`].
//!
//! Quadratic dofs are numbered vertices first, then one per mesh edge
//! (`n_vertices + edge_index`). Local quadratic basis order on a triangle
//! `(v0, v1, v2)` is the three vertex functions followed by the midpoint
//! functions of edges `(v0,v1)`, `(v1,v2)`, `(v2,v0)`.

mod assembly;
pub mod quadrature;

pub use assembly::{
    apply_dirichlet, assemble_p1_mass, assemble_p2_mass, assemble_p2_stiffness,
    assemble_smoothing_operator, assemble_stokes_brinkman, boundary_p2_dofs, StokesAssembler,
    StokesLayout, StokesSystem,
};

use crate::mesh::TriMesh;
use quadrature::TRIANGLE_DEG4;

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarFieldP1 {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarFieldP2 {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldP2 {
    pub x: ScalarFieldP2,
    pub y: ScalarFieldP2,
}

/// One value per triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementwiseField {
    pub values: Vec<f64>,
}

impl ScalarFieldP1 {
    pub fn zeros(mesh: &TriMesh) -> Self {
        ScalarFieldP1 {
            values: vec![0.0; mesh.n_vertices()],
        }
    }

    pub fn interpolate(mesh: &TriMesh, f: impl Fn([f64; 2]) -> f64) -> Self {
        ScalarFieldP1 {
            values: mesh.vertices().iter().map(|&p| f(p)).collect(),
        }
    }
}

impl ScalarFieldP2 {
    pub fn zeros(mesh: &TriMesh) -> Self {
        ScalarFieldP2 {
            values: vec![0.0; p2_dof_count(mesh)],
        }
    }

    pub fn constant(mesh: &TriMesh, c: f64) -> Self {
        ScalarFieldP2 {
            values: vec![c; p2_dof_count(mesh)],
        }
    }

    /// Nodal interpolant at vertices and edge midpoints.
    pub fn interpolate(mesh: &TriMesh, f: impl Fn([f64; 2]) -> f64) -> Self {
        ScalarFieldP2 {
            values: p2_dof_coords(mesh).into_iter().map(f).collect(),
        }
    }
}

impl VectorFieldP2 {
    pub fn zeros(mesh: &TriMesh) -> Self {
        VectorFieldP2 {
            x: ScalarFieldP2::zeros(mesh),
            y: ScalarFieldP2::zeros(mesh),
        }
    }

    pub fn interpolate(mesh: &TriMesh, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        let coords = p2_dof_coords(mesh);
        let vals: Vec<[f64; 2]> = coords.into_iter().map(f).collect();
        VectorFieldP2 {
            x: ScalarFieldP2 {
                values: vals.iter().map(|v| v[0]).collect(),
            },
            y: ScalarFieldP2 {
                values: vals.iter().map(|v| v[1]).collect(),
            },
        }
    }

    /// Euclidean norm at every dof.
    pub fn dof_norms(&self) -> Vec<f64> {
        self.x
            .values
            .iter()
            .zip(&self.y.values)
            .map(|(a, b)| a.hypot(*b))
            .collect()
    }
}

impl ElementwiseField {
    pub fn constant(mesh: &TriMesh, c: f64) -> Self {
        ElementwiseField {
            values: vec![c; mesh.n_triangles()],
        }
    }
}

pub fn p2_dof_count(mesh: &TriMesh) -> usize {
    mesh.n_vertices() + mesh.n_edges()
}

pub fn p2_dof_coords(mesh: &TriMesh) -> Vec<[f64; 2]> {
    let mut coords = mesh.vertices().to_vec();
    coords.extend((0..mesh.n_edges()).map(|e| mesh.edge_midpoint(e)));
    coords
}

/// Global quadratic dofs of triangle `t` in local basis order.
pub fn p2_element_dofs(mesh: &TriMesh, t: usize) -> [usize; 6] {
    let tri = mesh.triangles()[t];
    let te = mesh.triangle_edges()[t];
    let nv = mesh.n_vertices();
    [tri[0], tri[1], tri[2], nv + te[0], nv + te[1], nv + te[2]]
}

/// Constant gradients of the barycentric coordinates of triangle `t`.
pub fn barycentric_gradients(mesh: &TriMesh, t: usize) -> [[f64; 2]; 3] {
    let [p0, p1, p2] = mesh.triangle_coords(t);
    let two_area = 2.0 * mesh.element_areas()[t];
    [
        [(p1[1] - p2[1]) / two_area, (p2[0] - p1[0]) / two_area],
        [(p2[1] - p0[1]) / two_area, (p0[0] - p2[0]) / two_area],
        [(p0[1] - p1[1]) / two_area, (p1[0] - p0[0]) / two_area],
    ]
}

pub fn p2_values(l: [f64; 3]) -> [f64; 6] {
    [
        l[0] * (2.0 * l[0] - 1.0),
        l[1] * (2.0 * l[1] - 1.0),
        l[2] * (2.0 * l[2] - 1.0),
        4.0 * l[0] * l[1],
        4.0 * l[1] * l[2],
        4.0 * l[2] * l[0],
    ]
}

pub fn p2_gradients(l: [f64; 3], g: &[[f64; 2]; 3]) -> [[f64; 2]; 6] {
    let comb = |a: f64, ga: [f64; 2], b: f64, gb: [f64; 2]| {
        [4.0 * (a * ga[0] + b * gb[0]), 4.0 * (a * ga[1] + b * gb[1])]
    };
    [
        [(4.0 * l[0] - 1.0) * g[0][0], (4.0 * l[0] - 1.0) * g[0][1]],
        [(4.0 * l[1] - 1.0) * g[1][0], (4.0 * l[1] - 1.0) * g[1][1]],
        [(4.0 * l[2] - 1.0) * g[2][0], (4.0 * l[2] - 1.0) * g[2][1]],
        comb(l[1], g[0], l[0], g[1]),
        comb(l[2], g[1], l[1], g[2]),
        comb(l[0], g[2], l[2], g[0]),
    ]
}

/// A quadrature point handed to integrands.
#[derive(Debug, Clone, Copy)]
pub struct QuadPoint<'a> {
    mesh: &'a TriMesh,
    pub element: usize,
    pub bary: [f64; 3],
    pub position: [f64; 2],
    /// Physical weight (reference weight times element area).
    pub weight: f64,
}

impl<'a> QuadPoint<'a> {
    pub fn p2(&self, field: &ScalarFieldP2) -> f64 {
        let dofs = p2_element_dofs(self.mesh, self.element);
        p2_values(self.bary)
            .iter()
            .zip(dofs)
            .map(|(phi, d)| phi * field.values[d])
            .sum()
    }

    pub fn p2_vec(&self, field: &VectorFieldP2) -> [f64; 2] {
        [self.p2(&field.x), self.p2(&field.y)]
    }

    pub fn p1(&self, field: &ScalarFieldP1) -> f64 {
        let tri = self.mesh.triangles()[self.element];
        (0..3).map(|k| self.bary[k] * field.values[tri[k]]).sum()
    }
}

/// Calls `f` on every quadrature point of the degree-4 rule.
pub fn for_each_quad_point<'a>(mesh: &'a TriMesh, mut f: impl FnMut(&QuadPoint<'a>)) {
    for t in 0..mesh.n_triangles() {
        let [p0, p1, p2] = mesh.triangle_coords(t);
        let area = mesh.element_areas()[t];
        for qp in &TRIANGLE_DEG4 {
            let l = qp.bary;
            let position = [
                l[0] * p0[0] + l[1] * p1[0] + l[2] * p2[0],
                l[0] * p0[1] + l[1] * p1[1] + l[2] * p2[1],
            ];
            f(&QuadPoint {
                mesh,
                element: t,
                bary: l,
                position,
                weight: qp.weight * area,
            });
        }
    }
}

/// `sum_elements sum_qpoints w * integrand(qp)` with the degree-4 rule.
pub fn integrate(mesh: &TriMesh, mut integrand: impl FnMut(&QuadPoint) -> f64) -> f64 {
    let mut total = 0.0;
    for_each_quad_point(mesh, |qp| total += qp.weight * integrand(qp));
    total
}

/// Integral restricted to one element.
pub fn integrate_element(
    mesh: &TriMesh,
    t: usize,
    mut integrand: impl FnMut(&QuadPoint) -> f64,
) -> f64 {
    let [p0, p1, p2] = mesh.triangle_coords(t);
    let area = mesh.element_areas()[t];
    TRIANGLE_DEG4
        .iter()
        .map(|qp| {
            let l = qp.bary;
            let point = QuadPoint {
                mesh,
                element: t,
                bary: l,
                position: [
                    l[0] * p0[0] + l[1] * p1[0] + l[2] * p2[0],
                    l[0] * p0[1] + l[1] * p1[1] + l[2] * p2[1],
                ],
                weight: qp.weight * area,
            };
            point.weight * integrand(&point)
        })
        .sum()
}

/// Vertex values of a quadratic field (the basis is interpolatory there).
pub fn evaluate_at_vertices(mesh: &TriMesh, field: &ScalarFieldP2) -> Vec<f64> {
    field.values[..mesh.n_vertices()].to_vec()
}

pub fn evaluate_vector_at_vertices(mesh: &TriMesh, field: &VectorFieldP2) -> Vec<[f64; 2]> {
    let nv = mesh.n_vertices();
    field.x.values[..nv]
        .iter()
        .zip(&field.y.values[..nv])
        .map(|(&a, &b)| [a, b])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_unit_square_mesh;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn integrate_constants_and_linears() {
        let m = build_unit_square_mesh(5).unwrap();
        assert!((integrate(&m, |_| 1.0) - 1.0).abs() < 1e-14);
        assert!((integrate(&m, |qp| qp.position[0]) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn integrate_inlet_profile_squared() {
        // (u_in(y))^2 extended constantly in x, restricted to the strip
        // 0.35 <= y <= 0.65: (400/9)^2 * int (y-a)^2 (b-y)^2 dy
        // = (400/9)^2 * (b-a)^5 / 30 = 0.16.
        let m = build_unit_square_mesh(20).unwrap();
        let val = integrate(&m, |qp| {
            let y = qp.position[1];
            if (0.35..=0.65).contains(&(m.centroid(qp.element)[1])) {
                let u = 400.0 / 9.0 * (y - 0.35) * (0.65 - y);
                u * u
            } else {
                0.0
            }
        });
        let exact = (400.0f64 / 9.0).powi(2) * 0.3f64.powi(5) / 30.0;
        assert!((exact - 0.16).abs() < 1e-14);
        assert!((val - exact).abs() < 1e-13, "{val} vs {exact}");
    }

    #[test]
    fn vertex_evaluation_of_constant_and_quadratic() {
        let m = build_unit_square_mesh(2).unwrap();
        let c = ScalarFieldP2::constant(&m, 3.25);
        assert!(evaluate_at_vertices(&m, &c).iter().all(|&v| v == 3.25));
        let q = ScalarFieldP2::interpolate(&m, |p| p[0] * p[0]);
        for (v, p) in evaluate_at_vertices(&m, &q).iter().zip(m.vertices()) {
            assert_eq!(*v, p[0] * p[0]);
        }
    }

    #[test]
    fn vertex_values_match_pointwise_basis_evaluation() {
        let m = build_unit_square_mesh(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = ScalarFieldP2 {
            values: (0..p2_dof_count(&m))
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        };
        let at_vertices = evaluate_at_vertices(&m, &f);
        // Oracle: evaluate the local expansion at each corner of each element.
        for t in 0..m.n_triangles() {
            let dofs = p2_element_dofs(&m, t);
            for k in 0..3 {
                let mut l = [0.0; 3];
                l[k] = 1.0;
                let value: f64 = p2_values(l)
                    .iter()
                    .zip(dofs)
                    .map(|(p, d)| p * f.values[d])
                    .sum();
                let v = m.triangles()[t][k];
                assert!((value - at_vertices[v]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn quadratic_interpolation_is_exact_inside() {
        let m = build_unit_square_mesh(4).unwrap();
        let g = |p: [f64; 2]| 1.0 + 2.0 * p[0] - p[1] + p[0] * p[1] - 3.0 * p[1] * p[1];
        let f = ScalarFieldP2::interpolate(&m, g);
        for_each_quad_point(&m, |qp| {
            assert!((qp.p2(&f) - g(qp.position)).abs() < 1e-13);
        });
    }

    #[test]
    fn p2_gradients_match_finite_differences() {
        let m = build_unit_square_mesh(3).unwrap();
        let t = 5;
        let g = barycentric_gradients(&m, t);
        let l = [0.2, 0.3, 0.5];
        let grads = p2_gradients(l, &g);
        let h = 1e-6;
        // moving x by h changes barycentrics by h * dL/dx
        for dir in 0..2 {
            let shift = |s: f64| {
                [
                    l[0] + s * g[0][dir],
                    l[1] + s * g[1][dir],
                    l[2] + s * g[2][dir],
                ]
            };
            let fp = p2_values(shift(h));
            let fm = p2_values(shift(-h));
            for k in 0..6 {
                let fd = (fp[k] - fm[k]) / (2.0 * h);
                assert!((fd - grads[k][dir]).abs() < 1e-6, "k={k} dir={dir}");
            }
        }
    }
}
