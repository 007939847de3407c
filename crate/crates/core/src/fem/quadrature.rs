/// Quadrature point on the reference triangle: barycentric coordinates and a
/// weight normalised so that the weights sum to one.
#[derive(Debug, Clone, Copy)]
pub struct TriPoint {
    pub bary: [f64; 3],
    pub weight: f64,
}

const A1: f64 = 0.445_948_490_915_964_886_32;
const B1: f64 = 0.108_103_018_168_070_227_36;
const W1: f64 = 0.223_381_589_678_011_465_70;
const A2: f64 = 0.091_576_213_509_770_743_46;
const B2: f64 = 0.816_847_572_980_458_513_08;
const W2: f64 = 0.109_951_743_655_321_867_64;

/// Six-point symmetric rule, exact for polynomials of degree 4.
pub const TRIANGLE_DEG4: [TriPoint; 6] = [
    TriPoint {
        bary: [A1, A1, B1],
        weight: W1,
    },
    TriPoint {
        bary: [A1, B1, A1],
        weight: W1,
    },
    TriPoint {
        bary: [B1, A1, A1],
        weight: W1,
    },
    TriPoint {
        bary: [A2, A2, B2],
        weight: W2,
    },
    TriPoint {
        bary: [A2, B2, A2],
        weight: W2,
    },
    TriPoint {
        bary: [B2, A2, A2],
        weight: W2,
    },
];

/// Three-point Gauss-Legendre rule on `[0, 1]` as `(t, weight)`, exact for
/// degree 5.
pub fn line_gauss3() -> [(f64, f64); 3] {
    let s = (0.6f64).sqrt() / 2.0;
    [
        (0.5 - s, 5.0 / 18.0),
        (0.5, 8.0 / 18.0),
        (0.5 + s, 5.0 / 18.0),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn monomial(bary: [f64; 3], p: i32, q: i32) -> f64 {
        // reference triangle (0,0),(1,0),(0,1): x = l1, y = l2
        bary[1].powi(p) * bary[2].powi(q)
    }

    fn factorial(n: i32) -> f64 {
        (1..=n).map(f64::from).product::<f64>()
    }

    #[test]
    fn exact_to_degree_four() {
        for p in 0..=4 {
            for q in 0..=(4 - p) {
                let quad: f64 = TRIANGLE_DEG4
                    .iter()
                    .map(|pt| pt.weight * monomial(pt.bary, p, q))
                    .sum::<f64>()
                    * 0.5;
                // int_T x^p y^q = p! q! / (p + q + 2)!
                let exact = factorial(p) * factorial(q) / factorial(p + q + 2);
                assert!((quad - exact).abs() < 1e-15, "p={p} q={q}");
            }
        }
    }

    #[test]
    fn gauss3_exact_to_degree_five() {
        for k in 0..=5 {
            let quad: f64 = line_gauss3().iter().map(|(t, w)| w * t.powi(k)).sum();
            assert!((quad - 1.0 / f64::from(k + 1)).abs() < 1e-15);
        }
    }
}
