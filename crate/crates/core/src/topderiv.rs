//! Generalized topological derivatives: the flow term from the state and
//! adjoint velocities, and the deflation penalty term.
//!
//! The generalized derivative is `-D_T` inside the fluid region and `+D_T`
//! outside, so at a local minimizer it is nonpositive on the fluid and
//! nonnegative on the solid.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fem::{evaluate_vector_at_vertices, ElementwiseField, ScalarFieldP1, VectorFieldP2};
use crate::mesh::TriMesh;
use crate::objective::{ordered_sum, penalty, shape_distance, PenaltyParams, ShapeArchive};

/// Nodal generalized topological derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct TDField {
    pub g: ScalarFieldP1,
}

impl TDField {
    pub fn zeros(mesh: &TriMesh) -> Self {
        TDField {
            g: ScalarFieldP1::zeros(mesh),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.g.values
    }
}

/// Which elementwise sign factor the penalty derivative uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PenaltyTdVariant {
    /// Factor `(1 - 2 chi)` only.
    #[default]
    Paper,
    /// Exact flip of `|chi - chi_j|^2` with the generalized sign, which
    /// reduces to the factor `(1 - 2 chi_j)`.
    Derived,
}

impl fmt::Display for PenaltyTdVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PenaltyTdVariant::Paper => "paper",
            PenaltyTdVariant::Derived => "derived",
        })
    }
}

impl FromStr for PenaltyTdVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "paper" => Ok(PenaltyTdVariant::Paper),
            "derived" => Ok(PenaltyTdVariant::Derived),
            other => Err(format!("expected `paper` or `derived`, got `{other}`")),
        }
    }
}

/// `g(z) = -(alpha_U - alpha_L) u(z) . v(z)` at every vertex.
pub fn generalized_td_flow(
    mesh: &TriMesh,
    u: &VectorFieldP2,
    v: &VectorFieldP2,
    alpha_bounds: (f64, f64),
) -> Result<TDField> {
    let n2 = crate::fem::p2_dof_count(mesh);
    for (name, f) in [("u", u), ("v", v)] {
        if f.x.values.len() != n2 || f.y.values.len() != n2 {
            return Err(Error::MeshMismatch(format!(
                "{name} has {} dofs, mesh needs {n2}",
                f.x.values.len()
            )));
        }
    }
    let (alpha_l, alpha_u) = alpha_bounds;
    let scale = -(alpha_u - alpha_l);
    let uz = evaluate_vector_at_vertices(mesh, u);
    let vz = evaluate_vector_at_vertices(mesh, v);
    let values = uz
        .iter()
        .zip(&vz)
        .map(|(a, b)| scale * (a[0] * b[0] + a[1] * b[1]))
        .collect();
    Ok(TDField {
        g: ScalarFieldP1 { values },
    })
}

/// Elementwise penalty derivative, before projection to vertices.
pub fn penalty_td_elementwise(
    mesh: &TriMesh,
    chi: &ElementwiseField,
    archive: &ShapeArchive,
    params: &PenaltyParams,
    variant: PenaltyTdVariant,
) -> Result<ElementwiseField> {
    let ne = mesh.n_triangles();
    let mut terms: Vec<Vec<f64>> = vec![Vec::with_capacity(archive.len()); ne];
    let (gamma, delta) = (params.gamma, params.delta);
    for entry in archive.entries() {
        let r = params.floored(shape_distance(mesh, chi, &entry.chi)?);
        let weight =
            delta * (gamma * gamma / (2.0 * r * r * r) + 1.0 / (2.0 * r)) * penalty(r, params);
        for (e, t) in terms.iter_mut().enumerate() {
            let sign = match variant {
                PenaltyTdVariant::Paper => 1.0 - 2.0 * chi.values[e],
                PenaltyTdVariant::Derived => 1.0 - 2.0 * entry.chi.values[e],
            };
            t.push(-weight * sign);
        }
    }
    Ok(ElementwiseField {
        values: terms.into_iter().map(ordered_sum).collect(),
    })
}

/// Area-weighted average of element values onto the vertices.
pub fn elementwise_to_vertices(mesh: &TriMesh, f: &ElementwiseField) -> ScalarFieldP1 {
    let mut num = vec![0.0; mesh.n_vertices()];
    let mut den = vec![0.0; mesh.n_vertices()];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let a = mesh.element_areas()[t];
        for &v in tri {
            num[v] += a * f.values[t];
            den[v] += a;
        }
    }
    ScalarFieldP1 {
        values: num
            .iter()
            .zip(&den)
            .map(|(n, d)| if *d > 0.0 { n / d } else { 0.0 })
            .collect(),
    }
}

/// Generalized derivative of the penalty sum; zero for an empty archive.
pub fn generalized_td_penalty(
    mesh: &TriMesh,
    chi: &ElementwiseField,
    archive: &ShapeArchive,
    params: &PenaltyParams,
    variant: PenaltyTdVariant,
) -> Result<TDField> {
    if archive.is_empty() {
        return Ok(TDField::zeros(mesh));
    }
    let elementwise = penalty_td_elementwise(mesh, chi, archive, params, variant)?;
    Ok(TDField {
        g: elementwise_to_vertices(mesh, &elementwise),
    })
}

pub fn total_generalized_td(flow_td: &TDField, penalty_td: &TDField) -> Result<TDField> {
    if flow_td.g.values.len() != penalty_td.g.values.len() {
        return Err(Error::MeshMismatch(format!(
            "flow derivative has {} vertices, penalty derivative {}",
            flow_td.g.values.len(),
            penalty_td.g.values.len()
        )));
    }
    let values = flow_td
        .g
        .values
        .iter()
        .zip(&penalty_td.g.values)
        .map(|(a, b)| a + b)
        .collect();
    Ok(TDField {
        g: ScalarFieldP1 { values },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_unit_square_mesh;
    use crate::objective::ArchiveEntry;
    use proptest::prelude::*;

    const ALPHA: (f64, f64) = (2.5e-4, 4e5);

    fn entry(chi: ElementwiseField) -> ArchiveEntry {
        ArchiveEntry {
            chi,
            round: 0,
            objective: 0.0,
            fulfillment: 0.0,
        }
    }

    fn strip(mesh: &TriMesh, width: f64) -> ElementwiseField {
        ElementwiseField {
            values: (0..mesh.n_triangles())
                .map(|t| {
                    if mesh.centroid(t)[0] < width {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn flow_td_examples() {
        let mesh = build_unit_square_mesh(3).unwrap();
        let u = VectorFieldP2::interpolate(&mesh, |p| [1.0 + p[0], p[1]]);
        let zero = VectorFieldP2::zeros(&mesh);
        let g = generalized_td_flow(&mesh, &u, &zero, ALPHA).unwrap();
        assert!(g.values().iter().all(|&x| x == 0.0));

        let one = VectorFieldP2::interpolate(&mesh, |_| [0.6, 0.8]);
        let g = generalized_td_flow(&mesh, &one, &one, ALPHA).unwrap();
        let diff = 2.5 / 0.0025f64.powi(2) - 2.5 / 100f64.powi(2);
        assert!((diff - 399_999.999_75).abs() < 1e-9);
        for x in g.values() {
            assert!((x + 399_999.999_75).abs() < 1e-6);
        }
    }

    #[test]
    fn penalty_td_at_distance_gamma() {
        // area 0.16 strip: distance 0.4 = gamma from the empty shape
        let mesh = build_unit_square_mesh(25).unwrap();
        let params = PenaltyParams::default();
        let mut archive = ShapeArchive::new();
        archive.push(entry(strip(&mesh, 0.16))).unwrap();

        let zero = ElementwiseField::constant(&mesh, 0.0);
        let e = penalty_td_elementwise(&mesh, &zero, &archive, &params, PenaltyTdVariant::Paper)
            .unwrap();
        for v in &e.values {
            assert!((v + 125.0).abs() < 1e-9, "{v}");
        }
        let g = generalized_td_penalty(&mesh, &zero, &archive, &params, PenaltyTdVariant::Paper)
            .unwrap();
        assert!(g.values().iter().all(|v| (v + 125.0).abs() < 1e-9));

        // complement of a 0.16 strip sits at distance gamma from the full shape
        let one = ElementwiseField::constant(&mesh, 1.0);
        let mut far = ShapeArchive::new();
        far.push(entry(ElementwiseField {
            values: strip(&mesh, 0.84).values,
        }))
        .unwrap();
        let e =
            penalty_td_elementwise(&mesh, &one, &far, &params, PenaltyTdVariant::Paper).unwrap();
        assert!(e.values.iter().all(|v| (v - 125.0).abs() < 1e-9));
    }

    #[test]
    fn derived_variant_follows_archived_shape() {
        let mesh = build_unit_square_mesh(25).unwrap();
        let params = PenaltyParams::default();
        let archived = strip(&mesh, 0.16);
        let mut archive = ShapeArchive::new();
        archive.push(entry(archived.clone())).unwrap();
        let zero = ElementwiseField::constant(&mesh, 0.0);
        let e = penalty_td_elementwise(&mesh, &zero, &archive, &params, PenaltyTdVariant::Derived)
            .unwrap();
        for (v, c) in e.values.iter().zip(&archived.values) {
            let expected = if *c == 1.0 { 125.0 } else { -125.0 };
            assert!((v - expected).abs() < 1e-9);
        }
        // at chi = chi_j both variants agree
        for variant in [PenaltyTdVariant::Paper, PenaltyTdVariant::Derived] {
            let a = penalty_td_elementwise(&mesh, &archived, &archive, &params, variant).unwrap();
            let expected: Vec<f64> = archived
                .values
                .iter()
                .map(|c| {
                    -(50.0 / 0.001f64.powi(3) * 0.08 + 25000.0) * 500f64.exp() * (1.0 - 2.0 * c)
                })
                .collect();
            for (x, y) in a.values.iter().zip(&expected) {
                assert!((x - y).abs() <= 1e-12 * y.abs());
            }
        }
        assert_eq!(
            "derived".parse::<PenaltyTdVariant>(),
            Ok(PenaltyTdVariant::Derived)
        );
        assert!("other".parse::<PenaltyTdVariant>().is_err());
    }

    #[test]
    fn empty_archive_gives_zero() {
        let mesh = build_unit_square_mesh(4).unwrap();
        let chi = ElementwiseField::constant(&mesh, 1.0);
        let g = generalized_td_penalty(
            &mesh,
            &chi,
            &ShapeArchive::new(),
            &PenaltyParams::default(),
            PenaltyTdVariant::Paper,
        )
        .unwrap();
        assert!(g.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn duplicate_entry_doubles_field() {
        let mesh = build_unit_square_mesh(10).unwrap();
        let params = PenaltyParams::default();
        let chi = strip(&mesh, 0.3);
        let other = strip(&mesh, 0.7);
        for variant in [PenaltyTdVariant::Paper, PenaltyTdVariant::Derived] {
            let mut single = ShapeArchive::new();
            single.push(entry(other.clone())).unwrap();
            let mut double = single.clone();
            double.push(entry(other.clone())).unwrap();
            let g1 = generalized_td_penalty(&mesh, &chi, &single, &params, variant).unwrap();
            let g2 = generalized_td_penalty(&mesh, &chi, &double, &params, variant).unwrap();
            for (a, b) in g1.values().iter().zip(g2.values()) {
                assert!((2.0 * a - b).abs() <= 1e-14 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn total_is_vertexwise_sum() {
        let mesh = build_unit_square_mesh(5).unwrap();
        let a = TDField {
            g: ScalarFieldP1::interpolate(&mesh, |p| p[0] - p[1]),
        };
        let b = TDField {
            g: ScalarFieldP1::interpolate(&mesh, |p| p[0] * p[1]),
        };
        let zero = TDField::zeros(&mesh);
        assert_eq!(total_generalized_td(&a, &zero).unwrap(), a);
        assert_eq!(total_generalized_td(&zero, &b).unwrap(), b);
        let s = total_generalized_td(&a, &b).unwrap();
        for (k, p) in mesh.vertices().iter().enumerate() {
            let expected = (p[0] - p[1]) + p[0] * p[1];
            assert!((s.values()[k] - expected).abs() < 1e-15);
        }
        let short = TDField {
            g: ScalarFieldP1 { values: vec![0.0] },
        };
        assert!(total_generalized_td(&a, &short).is_err());
    }

    proptest! {
        #[test]
        fn flow_td_is_bilinear(s in -8.0f64..8.0, t in -8.0f64..8.0, k in 0u32..5) {
            let mesh = build_unit_square_mesh(3).unwrap();
            let f = f64::from(k);
            let u = VectorFieldP2::interpolate(&mesh, |p| [(f * p[0]).sin(), p[1] - f]);
            let v = VectorFieldP2::interpolate(&mesh, |p| [p[0] * p[1], (p[0] + f).cos()]);
            let scale = |w: &VectorFieldP2, c: f64| VectorFieldP2 {
                x: crate::fem::ScalarFieldP2 { values: w.x.values.iter().map(|x| c * x).collect() },
                y: crate::fem::ScalarFieldP2 { values: w.y.values.iter().map(|x| c * x).collect() },
            };
            let g = generalized_td_flow(&mesh, &u, &v, ALPHA).unwrap();
            let gs = generalized_td_flow(&mesh, &scale(&u, s), &scale(&v, t), ALPHA).unwrap();
            for (a, b) in g.values().iter().zip(gs.values()) {
                prop_assert!((s * t * a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}
