//! Structured triangulations of the unit square with tagged boundary edges.
//!
//! The hold-all domain is `(0,1)^2`. Inflow enters through the left side on
//! `0.35 <= y <= 0.65` and leaves through the same window on the right side;
//! all other boundary edges are no-slip walls.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Lower end of the inlet/outlet window.
pub const PORT_LOW: f64 = 7.0 / 20.0;
/// Upper end of the inlet/outlet window.
pub const PORT_HIGH: f64 = 13.0 / 20.0;

const GEOM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BoundaryTag {
    Inlet,
    Outlet,
    Wall,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryEdge {
    pub vertices: [usize; 2],
    /// Index into [`TriMesh::edges`].
    pub edge: usize,
    pub tag: BoundaryTag,
}

/// Conforming triangulation of the unit square.
///
/// Besides vertices and triangles the mesh stores a global edge numbering,
/// which the quadratic finite-element spaces use for their midpoint dofs.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    edges: Vec<[usize; 2]>,
    /// Local edges per triangle in the order (v0,v1), (v1,v2), (v2,v0).
    triangle_edges: Vec<[usize; 3]>,
    boundary_edges: Vec<BoundaryEdge>,
    element_areas: Vec<f64>,
}

impl TriMesh {
    /// Builds a mesh from raw vertices and counter-clockwise triangles and
    /// classifies its boundary.
    pub fn from_parts(vertices: Vec<[f64; 2]>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let mut element_areas = Vec::with_capacity(triangles.len());
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= vertices.len()) {
                return Err(Error::InvalidArgument(format!(
                    "triangle {t} references a missing vertex"
                )));
            }
            let area = signed_area(vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]);
            if area <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "triangle {t} is not counter-clockwise (signed area {area:e})"
                )));
            }
            element_areas.push(area);
        }

        let mut lookup: HashMap<[usize; 2], usize> = HashMap::new();
        let mut edges = Vec::new();
        let mut adjacency: Vec<u8> = Vec::new();
        let mut triangle_edges = Vec::with_capacity(triangles.len());
        for tri in &triangles {
            let mut local = [0usize; 3];
            for (k, slot) in local.iter_mut().enumerate() {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                let key = [a.min(b), a.max(b)];
                let id = *lookup.entry(key).or_insert_with(|| {
                    edges.push(key);
                    adjacency.push(0);
                    edges.len() - 1
                });
                adjacency[id] += 1;
                *slot = id;
            }
            triangle_edges.push(local);
        }
        if adjacency.iter().any(|&c| c > 2) {
            return Err(Error::InvalidArgument(
                "non-manifold edge shared by more than two triangles".into(),
            ));
        }

        let boundary_edges = edges
            .iter()
            .enumerate()
            .filter(|(id, _)| adjacency[*id] == 1)
            .map(|(id, e)| BoundaryEdge {
                vertices: *e,
                edge: id,
                tag: BoundaryTag::Wall,
            })
            .collect();

        let mesh = TriMesh {
            vertices,
            triangles,
            edges,
            triangle_edges,
            boundary_edges,
            element_areas,
        };
        Ok(tag_boundary(mesh))
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn triangle_edges(&self) -> &[[usize; 3]] {
        &self.triangle_edges
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary_edges
    }

    pub fn element_areas(&self) -> &[f64] {
        &self.element_areas
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn triangle_coords(&self, t: usize) -> [[f64; 2]; 3] {
        let tri = self.triangles[t];
        [
            self.vertices[tri[0]],
            self.vertices[tri[1]],
            self.vertices[tri[2]],
        ]
    }

    pub fn centroid(&self, t: usize) -> [f64; 2] {
        let [a, b, c] = self.triangle_coords(t);
        [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
    }

    pub fn edge_midpoint(&self, e: usize) -> [f64; 2] {
        let [a, b] = self.edges[e];
        midpoint(self.vertices[a], self.vertices[b])
    }

    pub fn edge_length(&self, e: usize) -> f64 {
        let [a, b] = self.edges[e];
        let (p, q) = (self.vertices[a], self.vertices[b]);
        (q[0] - p[0]).hypot(q[1] - p[1])
    }

    pub fn min_element_area(&self) -> f64 {
        self.element_areas
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn total_area(&self) -> f64 {
        self.element_areas.iter().sum()
    }

    pub fn has_tag(&self, tag: BoundaryTag) -> bool {
        self.boundary_edges.iter().any(|e| e.tag == tag)
    }

    /// Total length of boundary edges carrying `tag`.
    pub fn tagged_length(&self, tag: BoundaryTag) -> f64 {
        self.boundary_edges
            .iter()
            .filter(|e| e.tag == tag)
            .map(|e| self.edge_length(e.edge))
            .sum()
    }
}

/// Uniform `n x n` grid, each cell split along its lower-left to upper-right
/// diagonal, with tagged boundary.
pub fn build_unit_square_mesh(n: usize) -> Result<TriMesh> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "mesh needs at least one subdivision per side".into(),
        ));
    }
    let port = PORT_LOW * n as f64;
    if (port - port.round()).abs() > 1e-9 {
        log::warn!(
            "mesh resolution n={n} does not place a vertex at y=0.35; \
             the discrete inlet/outlet length deviates from 0.3"
        );
    }
    let stride = n + 1;
    let mut vertices = Vec::with_capacity(stride * stride);
    for j in 0..=n {
        for i in 0..=n {
            vertices.push([i as f64 / n as f64, j as f64 / n as f64]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let v00 = j * stride + i;
            let v10 = v00 + 1;
            let v01 = v00 + stride;
            let v11 = v01 + 1;
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    TriMesh::from_parts(vertices, triangles)
}

/// Classifies every boundary edge by its midpoint.
pub fn tag_boundary(mut mesh: TriMesh) -> TriMesh {
    let tags: Vec<BoundaryTag> = mesh
        .boundary_edges
        .iter()
        .map(|e| classify_midpoint(mesh.edge_midpoint(e.edge)))
        .collect();
    for (edge, tag) in mesh.boundary_edges.iter_mut().zip(tags) {
        edge.tag = tag;
    }
    mesh
}

/// Boundary tag of a point on the unit square boundary.
pub fn classify_midpoint(m: [f64; 2]) -> BoundaryTag {
    let in_window = m[1] >= PORT_LOW - GEOM_TOL && m[1] <= PORT_HIGH + GEOM_TOL;
    if m[0].abs() <= GEOM_TOL && in_window {
        BoundaryTag::Inlet
    } else if (m[0] - 1.0).abs() <= GEOM_TOL && in_window {
        BoundaryTag::Outlet
    } else {
        BoundaryTag::Wall
    }
}

fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

fn midpoint(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_mesh() {
        let m = build_unit_square_mesh(1).unwrap();
        assert_eq!(m.n_triangles(), 2);
        assert_eq!(m.n_vertices(), 4);
        assert!((m.total_area() - 1.0).abs() < 1e-12);
        assert_eq!(m.n_edges(), 5);
    }

    #[test]
    fn element_counts() {
        assert_eq!(build_unit_square_mesh(70).unwrap().n_triangles(), 9800);
        let m = build_unit_square_mesh(100).unwrap();
        assert_eq!(m.n_triangles(), 20000);
        assert_eq!(m.n_vertices(), 10201);
    }

    #[test]
    fn zero_subdivisions_rejected() {
        assert!(build_unit_square_mesh(0).is_err());
    }

    #[test]
    fn uniform_areas_and_orientation() {
        let n = 7;
        let m = build_unit_square_mesh(n).unwrap();
        let expected = 1.0 / (2.0 * (n * n) as f64);
        for (t, &a) in m.element_areas().iter().enumerate() {
            assert!((a - expected).abs() < 1e-12);
            let tri = m.triangles()[t];
            assert!(tri[0] != tri[1] && tri[1] != tri[2] && tri[0] != tri[2]);
        }
        assert!((m.total_area() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn midpoint_classification() {
        assert_eq!(classify_midpoint([0.0, 0.5]), BoundaryTag::Inlet);
        assert_eq!(classify_midpoint([1.0, 0.5]), BoundaryTag::Outlet);
        assert_eq!(classify_midpoint([0.5, 0.0]), BoundaryTag::Wall);
        assert_eq!(classify_midpoint([0.0, 0.2]), BoundaryTag::Wall);
        assert_eq!(classify_midpoint([1.0, 0.66]), BoundaryTag::Wall);
    }

    #[test]
    fn boundary_lengths() {
        for n in [20, 40, 60, 100] {
            let m = build_unit_square_mesh(n).unwrap();
            let perimeter: f64 = m
                .boundary_edges()
                .iter()
                .map(|e| m.edge_length(e.edge))
                .sum();
            assert!((perimeter - 4.0).abs() < 1e-12);
            assert!((m.tagged_length(BoundaryTag::Inlet) - 0.3).abs() < 1e-12);
            assert!((m.tagged_length(BoundaryTag::Outlet) - 0.3).abs() < 1e-12);
            assert!((m.tagged_length(BoundaryTag::Wall) - 3.4).abs() < 1e-12);
        }
    }

    #[test]
    fn boundary_edges_lie_on_square() {
        let m = build_unit_square_mesh(9).unwrap();
        assert_eq!(m.boundary_edges().len(), 36);
        for e in m.boundary_edges() {
            let [x, y] = m.edge_midpoint(e.edge);
            let on_side = x.abs() < 1e-12
                || (x - 1.0).abs() < 1e-12
                || y.abs() < 1e-12
                || (y - 1.0).abs() < 1e-12;
            assert!(on_side);
        }
    }

    #[test]
    fn conforming_edge_count() {
        // Euler: E = V + F - 1 for a triangulated disk.
        let m = build_unit_square_mesh(13).unwrap();
        assert_eq!(m.n_edges(), m.n_vertices() + m.n_triangles() - 1);
    }

    #[test]
    fn clockwise_triangle_rejected() {
        let v = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        assert!(TriMesh::from_parts(v, vec![[0, 2, 1]]).is_err());
    }
}
