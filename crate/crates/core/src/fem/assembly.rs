use std::collections::BTreeMap;

use super::quadrature::TRIANGLE_DEG4;
use super::{
    barycentric_gradients, p2_dof_coords, p2_dof_count, p2_element_dofs, p2_gradients, p2_values,
    ElementwiseField,
};
use crate::error::{Error, Result};
use crate::linalg::SparseMatrix;
use crate::mesh::{BoundaryTag, TriMesh};

type Local6 = [[f64; 6]; 6];

/// Unknown ordering of the Stokes-Brinkman system:
/// `[u_x (P2), u_y (P2), p (P1), lambda]`, where `lambda` is the Lagrange
/// multiplier enforcing a mean-zero pressure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StokesLayout {
    pub n_p2: usize,
    pub n_p1: usize,
}

impl StokesLayout {
    pub fn ux(&self, i: usize) -> usize {
        i
    }

    pub fn uy(&self, i: usize) -> usize {
        self.n_p2 + i
    }

    pub fn p(&self, v: usize) -> usize {
        2 * self.n_p2 + v
    }

    pub fn multiplier(&self) -> usize {
        2 * self.n_p2 + self.n_p1
    }

    pub fn size(&self) -> usize {
        2 * self.n_p2 + self.n_p1 + 1
    }
}

/// A constrained saddle-point system ready for a direct solve.
#[derive(Debug, Clone)]
pub struct StokesSystem {
    pub matrix: SparseMatrix,
    pub rhs: Vec<f64>,
    pub layout: StokesLayout,
    /// Rows replaced by Dirichlet identity rows.
    pub constrained: Vec<bool>,
}

fn local_matrices(mesh: &TriMesh, t: usize) -> (Local6, Local6, [[[f64; 6]; 3]; 2]) {
    let g = barycentric_gradients(mesh, t);
    let area = mesh.element_areas()[t];
    let mut stiff = [[0.0; 6]; 6];
    let mut mass = [[0.0; 6]; 6];
    // div[c][i][a] = -int l_i d_c phi_a
    let mut div = [[[0.0; 6]; 3]; 2];
    for qp in &TRIANGLE_DEG4 {
        let w = qp.weight * area;
        let phi = p2_values(qp.bary);
        let dphi = p2_gradients(qp.bary, &g);
        for a in 0..6 {
            for b in 0..6 {
                stiff[a][b] += w * (dphi[a][0] * dphi[b][0] + dphi[a][1] * dphi[b][1]);
                mass[a][b] += w * phi[a] * phi[b];
            }
            for i in 0..3 {
                div[0][i][a] -= w * qp.bary[i] * dphi[a][0];
                div[1][i][a] -= w * qp.bary[i] * dphi[a][1];
            }
        }
    }
    (stiff, mass, div)
}

fn scalar_p2_matrix(mesh: &TriMesh, mut local: impl FnMut(usize) -> Local6) -> SparseMatrix {
    let n = p2_dof_count(mesh);
    let mut triplets = Vec::with_capacity(36 * mesh.n_triangles());
    for t in 0..mesh.n_triangles() {
        let dofs = p2_element_dofs(mesh, t);
        let m = local(t);
        for a in 0..6 {
            for b in 0..6 {
                triplets.push((dofs[a], dofs[b], m[a][b]));
            }
        }
    }
    SparseMatrix::from_triplets(n, n, &triplets)
}

/// Consistent mass matrix of the quadratic scalar space.
pub fn assemble_p2_mass(mesh: &TriMesh) -> SparseMatrix {
    scalar_p2_matrix(mesh, |t| local_matrices(mesh, t).1)
}

/// Laplacian stiffness matrix of the quadratic scalar space.
pub fn assemble_p2_stiffness(mesh: &TriMesh) -> SparseMatrix {
    scalar_p2_matrix(mesh, |t| local_matrices(mesh, t).0)
}

/// `(1/dt) M + K` on the quadratic scalar space with natural boundary
/// conditions.
pub fn assemble_smoothing_operator(mesh: &TriMesh, dt: f64) -> Result<SparseMatrix> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "smoothing step must be positive, got {dt}"
        )));
    }
    Ok(scalar_p2_matrix(mesh, |t| {
        let (k, m, _) = local_matrices(mesh, t);
        let mut op = [[0.0; 6]; 6];
        for a in 0..6 {
            for b in 0..6 {
                op[a][b] = m[a][b] / dt + k[a][b];
            }
        }
        op
    }))
}

/// Consistent mass matrix of the linear scalar space.
pub fn assemble_p1_mass(mesh: &TriMesh) -> SparseMatrix {
    let n = mesh.n_vertices();
    let mut triplets = Vec::with_capacity(9 * mesh.n_triangles());
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let area = mesh.element_areas()[t];
        for a in 0..3 {
            for b in 0..3 {
                let v = if a == b { area / 6.0 } else { area / 12.0 };
                triplets.push((tri[a], tri[b], v));
            }
        }
    }
    SparseMatrix::from_triplets(n, n, &triplets)
}

/// Quadratic dofs on the boundary with their tag. A dof touching both a
/// port edge and a wall edge is reported with the port tag.
pub fn boundary_p2_dofs(mesh: &TriMesh) -> Vec<(usize, BoundaryTag)> {
    let nv = mesh.n_vertices();
    let mut map: BTreeMap<usize, BoundaryTag> = BTreeMap::new();
    for e in mesh.boundary_edges() {
        for dof in [e.vertices[0], e.vertices[1], nv + e.edge] {
            map.entry(dof)
                .and_modify(|t| {
                    if *t == BoundaryTag::Wall {
                        *t = e.tag;
                    }
                })
                .or_insert(e.tag);
        }
    }
    map.into_iter().collect()
}

/// Symmetric elimination of Dirichlet conditions: constrained rows become
/// identity rows with the prescribed value, constrained columns are zeroed
/// and their contribution moved to the right-hand side. Structure is kept.
pub fn apply_dirichlet(
    matrix: &mut SparseMatrix,
    rhs: &mut [f64],
    constrained: &[bool],
    values: &[f64],
) {
    let n = matrix.nrows();
    assert_eq!(constrained.len(), n);
    assert_eq!(values.len(), n);
    assert_eq!(rhs.len(), n);
    let offsets = matrix.row_offsets().to_vec();
    let cols = matrix.col_indices().to_vec();
    let vals = matrix.values_mut();
    for i in 0..n {
        let range = offsets[i]..offsets[i + 1];
        if constrained[i] {
            for k in range {
                vals[k] = if cols[k] == i { 1.0 } else { 0.0 };
            }
            rhs[i] = values[i];
        } else {
            for k in range {
                let j = cols[k];
                if constrained[j] {
                    rhs[i] -= vals[k] * values[j];
                    vals[k] = 0.0;
                }
            }
        }
    }
}

/// Stokes-Brinkman assembler that keeps the alpha-independent part and the
/// scatter positions of the Brinkman mass term, so re-assembly for a new
/// inverse permeability is a single pass over the elements.
#[derive(Debug, Clone)]
pub struct StokesAssembler {
    layout: StokesLayout,
    base: SparseMatrix,
    element_mass: Vec<Local6>,
    /// 72 value positions per element: x-block then y-block, row-major 6x6.
    brinkman_positions: Vec<usize>,
    boundary: Vec<(usize, BoundaryTag)>,
    dof_coords: Vec<[f64; 2]>,
}

impl StokesAssembler {
    pub fn new(mesh: &TriMesh) -> Self {
        let layout = StokesLayout {
            n_p2: p2_dof_count(mesh),
            n_p1: mesh.n_vertices(),
        };
        let nt = mesh.n_triangles();
        let mut triplets = Vec::with_capacity(nt * (72 + 72 + 6));
        let mut element_mass = Vec::with_capacity(nt);
        for t in 0..nt {
            let dofs = p2_element_dofs(mesh, t);
            let tri = mesh.triangles()[t];
            let (stiff, mass, div) = local_matrices(mesh, t);
            element_mass.push(mass);
            for a in 0..6 {
                for b in 0..6 {
                    triplets.push((layout.ux(dofs[a]), layout.ux(dofs[b]), stiff[a][b]));
                    triplets.push((layout.uy(dofs[a]), layout.uy(dofs[b]), stiff[a][b]));
                }
            }
            for i in 0..3 {
                let p = layout.p(tri[i]);
                for a in 0..6 {
                    let (ux, uy) = (layout.ux(dofs[a]), layout.uy(dofs[a]));
                    triplets.push((p, ux, div[0][i][a]));
                    triplets.push((ux, p, div[0][i][a]));
                    triplets.push((p, uy, div[1][i][a]));
                    triplets.push((uy, p, div[1][i][a]));
                }
                let weight = mesh.element_areas()[t] / 3.0;
                triplets.push((layout.multiplier(), p, weight));
                triplets.push((p, layout.multiplier(), weight));
            }
        }
        let size = layout.size();
        let base = SparseMatrix::from_triplets(size, size, &triplets);

        let mut brinkman_positions = Vec::with_capacity(72 * nt);
        for t in 0..nt {
            let dofs = p2_element_dofs(mesh, t);
            for block in [0, 1] {
                let map = |d: usize| {
                    if block == 0 {
                        layout.ux(d)
                    } else {
                        layout.uy(d)
                    }
                };
                for a in 0..6 {
                    for b in 0..6 {
                        let pos = base
                            .position(map(dofs[a]), map(dofs[b]))
                            .expect("velocity block pattern covers element couplings");
                        brinkman_positions.push(pos);
                    }
                }
            }
        }

        StokesAssembler {
            layout,
            base,
            element_mass,
            brinkman_positions,
            boundary: boundary_p2_dofs(mesh),
            dof_coords: p2_dof_coords(mesh),
        }
    }

    pub fn layout(&self) -> StokesLayout {
        self.layout
    }

    pub fn boundary_dofs(&self) -> &[(usize, BoundaryTag)] {
        &self.boundary
    }

    pub fn dof_coords(&self) -> &[[f64; 2]] {
        &self.dof_coords
    }

    /// Unconstrained operator for elementwise inverse permeability `alpha`.
    pub fn matrix(&self, alpha: &ElementwiseField) -> Result<SparseMatrix> {
        let nt = self.element_mass.len();
        if alpha.values.len() != nt {
            return Err(Error::MeshMismatch(format!(
                "alpha has {} values for {nt} elements",
                alpha.values.len()
            )));
        }
        if let Some((e, a)) = alpha
            .values
            .iter()
            .enumerate()
            .find(|(_, a)| !(a.is_finite() && **a >= 0.0))
        {
            return Err(Error::InvalidArgument(format!(
                "inverse permeability must be finite and non-negative, element {e} has {a}"
            )));
        }
        let mut matrix = self.base.clone();
        let values = matrix.values_mut();
        for (t, (&a, mass)) in alpha.values.iter().zip(&self.element_mass).enumerate() {
            if a == 0.0 {
                continue;
            }
            let pos = &self.brinkman_positions[72 * t..72 * (t + 1)];
            for r in 0..6 {
                for c in 0..6 {
                    let v = a * mass[r][c];
                    values[pos[6 * r + c]] += v;
                    values[pos[36 + 6 * r + c]] += v;
                }
            }
        }
        Ok(matrix)
    }

    /// Constrained system. `boundary_values` gives the prescribed velocity
    /// for each entry of [`Self::boundary_dofs`]; `load` the assembled
    /// velocity right-hand side `(f_x, f_y)`, if any.
    pub fn system(
        &self,
        alpha: &ElementwiseField,
        boundary_values: &[[f64; 2]],
        load: Option<(&[f64], &[f64])>,
    ) -> Result<StokesSystem> {
        if boundary_values.len() != self.boundary.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} boundary values, got {}",
                self.boundary.len(),
                boundary_values.len()
            )));
        }
        let mut matrix = self.matrix(alpha)?;
        let size = self.layout.size();
        let mut rhs = vec![0.0; size];
        if let Some((fx, fy)) = load {
            let n = self.layout.n_p2;
            if fx.len() != n || fy.len() != n {
                return Err(Error::InvalidArgument(
                    "load vector has wrong length".into(),
                ));
            }
            rhs[..n].copy_from_slice(fx);
            rhs[n..2 * n].copy_from_slice(fy);
        }
        let mut constrained = vec![false; size];
        let mut values = vec![0.0; size];
        for (&(dof, _), g) in self.boundary.iter().zip(boundary_values) {
            for (row, v) in [(self.layout.ux(dof), g[0]), (self.layout.uy(dof), g[1])] {
                constrained[row] = true;
                values[row] = v;
            }
        }
        apply_dirichlet(&mut matrix, &mut rhs, &constrained, &values);
        Ok(StokesSystem {
            matrix,
            rhs,
            layout: self.layout,
            constrained,
        })
    }
}

/// Assembles `-lap u + alpha u + grad p = 0`, `div u = 0`, `int p = 0` with
/// Dirichlet velocity `dirichlet(x, tag)` on every boundary dof.
pub fn assemble_stokes_brinkman(
    mesh: &TriMesh,
    alpha: &ElementwiseField,
    dirichlet: impl Fn([f64; 2], BoundaryTag) -> [f64; 2],
) -> Result<StokesSystem> {
    if let Some(a) = alpha.values.iter().find(|a| !(**a > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "inverse permeability must be positive, found {a}"
        )));
    }
    let assembler = StokesAssembler::new(mesh);
    let values: Vec<[f64; 2]> = assembler
        .boundary
        .iter()
        .map(|&(dof, tag)| dirichlet(assembler.dof_coords[dof], tag))
        .collect();
    assembler.system(alpha, &values, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::ScalarFieldP2;
    use crate::linalg::{norm2, solve, Factorization};
    use crate::mesh::build_unit_square_mesh;
    use std::sync::Arc;

    #[test]
    fn dof_count_formula() {
        // the n=2 grid has no port edges; the saddle-point layout does not need them
        let m = build_unit_square_mesh(2).unwrap();
        let sys =
            assemble_stokes_brinkman(&m, &ElementwiseField::constant(&m, 1.0), |_, _| [0.0; 2])
                .unwrap();
        // 9 vertices + 16 edges = 25 quadratic dofs
        assert_eq!(sys.matrix.nrows(), 2 * 25 + 9 + 1);
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let m = build_unit_square_mesh(3).unwrap();
        let sys =
            assemble_stokes_brinkman(&m, &ElementwiseField::constant(&m, 1.0), |_, _| [0.0; 2])
                .unwrap();
        let x = solve(&sys.matrix, &sys.rhs).unwrap();
        assert!(x.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn symmetric_after_elimination() {
        let m = build_unit_square_mesh(3).unwrap();
        let sys = assemble_stokes_brinkman(&m, &ElementwiseField::constant(&m, 2.0), |p, _| {
            [p[1] * (1.0 - p[1]), 0.0]
        })
        .unwrap();
        assert!(sys.matrix.asymmetry(&sys.constrained) < 1e-15);
        // symmetric elimination keeps the full matrix symmetric as well
        assert!(sys.matrix.asymmetry(&[]) < 1e-15);
    }

    #[test]
    fn nonpositive_alpha_rejected() {
        let m = build_unit_square_mesh(2).unwrap();
        let mut alpha = ElementwiseField::constant(&m, 1.0);
        alpha.values[3] = 0.0;
        assert!(assemble_stokes_brinkman(&m, &alpha, |_, _| [0.0; 2]).is_err());
        alpha.values[3] = -1.0;
        let asm = StokesAssembler::new(&m);
        assert!(asm.matrix(&alpha).is_err());
    }

    #[test]
    fn mass_rows_sum_to_area() {
        let m = build_unit_square_mesh(6).unwrap();
        let mass = assemble_p2_mass(&m);
        let ones = vec![1.0; mass.ncols()];
        let total: f64 = mass.mul_vec(&ones).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        let p1 = assemble_p1_mass(&m);
        let total1: f64 = p1.mul_vec(&vec![1.0; p1.ncols()]).iter().sum();
        assert!((total1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stiffness_annihilates_constants() {
        let m = build_unit_square_mesh(5).unwrap();
        let k = assemble_p2_stiffness(&m);
        let r = k.mul_vec(&vec![2.5; k.ncols()]);
        assert!(r.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn smoothing_operator_on_constants() {
        let m = build_unit_square_mesh(4).unwrap();
        let dt = 1e-3;
        let op = assemble_smoothing_operator(&m, dt).unwrap();
        let mass = assemble_p2_mass(&m);
        let ones = vec![1.0; op.ncols()];
        let lhs = op.mul_vec(&ones);
        let rhs: Vec<f64> = mass.mul_vec(&ones).iter().map(|v| v / dt).collect();
        for (a, b) in lhs.iter().zip(&rhs) {
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0));
        }
        assert!(op.asymmetry(&[]) < 1e-15);
        assert!(assemble_smoothing_operator(&m, 0.0).is_err());
        assert!(assemble_smoothing_operator(&m, -1.0).is_err());
    }

    #[test]
    fn smoothing_operator_smallest_generalized_eigenvalue() {
        // Inverse iteration on (A, M): the smallest eigenvalue of the
        // Neumann problem is 1/dt (constant eigenvector).
        let m = build_unit_square_mesh(4).unwrap();
        let dt = 1e-3;
        let op = assemble_smoothing_operator(&m, dt).unwrap();
        let mass = assemble_p2_mass(&m);
        let n = op.nrows();
        let mut x: Vec<f64> = (0..n)
            .map(|i| 1.0 + 0.1 * ((i * 7919) % 13) as f64)
            .collect();
        let factor = Factorization::cholesky(Arc::new(op.clone())).unwrap();
        let mut lambda = 0.0;
        // eigenvalue ratio is about 1000 / (1000 + pi^2), so convergence is slow
        for _ in 0..2000 {
            let mx = mass.mul_vec(&x);
            let y = factor.solve(&mx).unwrap();
            let nrm = norm2(&y);
            x = y.iter().map(|v| v / nrm).collect();
            let ax = op.mul_vec(&x);
            let mx = mass.mul_vec(&x);
            lambda = dot(&x, &ax) / dot(&x, &mx);
        }
        assert!((lambda - 1000.0).abs() / 1000.0 < 1e-6, "lambda = {lambda}");
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn boundary_dofs_prefer_port_tags() {
        let m = build_unit_square_mesh(20).unwrap();
        let dofs = boundary_p2_dofs(&m);
        // 80 boundary edges -> 80 vertices + 80 midpoints
        assert_eq!(dofs.len(), 160);
        let coords = p2_dof_coords(&m);
        for (d, tag) in dofs {
            let [x, y] = coords[d];
            if x == 0.0 && (0.35..=0.65).contains(&y) {
                assert_eq!(tag, BoundaryTag::Inlet, "y = {y}");
            }
        }
    }

    #[test]
    fn patch_test_reproduces_quadratic_velocity() {
        // u = (y(1-y), 0), p = -2(x - 1/2) solves -lap u + grad p = 0.
        let m = build_unit_square_mesh(4).unwrap();
        let asm = StokesAssembler::new(&m);
        let exact = |p: [f64; 2]| [p[1] * (1.0 - p[1]), 0.0];
        let values: Vec<[f64; 2]> = asm
            .boundary_dofs()
            .iter()
            .map(|&(d, _)| exact(asm.dof_coords()[d]))
            .collect();
        let sys = asm
            .system(&ElementwiseField::constant(&m, 0.0), &values, None)
            .unwrap();
        let x = solve(&sys.matrix, &sys.rhs).unwrap();
        let ux = ScalarFieldP2::interpolate(&m, |p| exact(p)[0]);
        for (i, v) in ux.values.iter().enumerate() {
            assert!((x[sys.layout.ux(i)] - v).abs() < 1e-12);
            assert!(x[sys.layout.uy(i)].abs() < 1e-12);
        }
        for (v, p) in m.vertices().iter().enumerate() {
            assert!((x[sys.layout.p(v)] + 2.0 * (p[0] - 0.5)).abs() < 1e-10);
        }
    }
}
